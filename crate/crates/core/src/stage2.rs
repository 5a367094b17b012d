//! Stage 2: a decoder from frozen embeddings to demand primitives, trained
//! against observed bids through the structural pricing model. Also the
//! direct variant that trains encoder and decoder jointly.

use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_spec, Embedding, EmbeddingSource, FeatureSchema, ListingFeatures, DEFAULT_ENCODER_HIDDEN, DEFAULT_EMBEDDING_DIM};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, softplus, Activation, Checkpoint, ForwardCache, Network, NetworkSpec, OptimizerConfig};
use crate::primitives::{BidderGrid, MarketSizeParams, ValuationParams, DEFAULT_KAPPA, MAX_KAPPA};
use crate::simulator::AuctionRecord;
use crate::structural::{BidPrediction, CensoringRule, QuadratureConfig, StructuralModel, DEFAULT_J_MAX};
use crate::training::{batch_mean, epoch_batches, steps_per_epoch, JointOptimizer, LossHistory};

/// Floor added to the softplus scale link.
pub const SIGMA_FLOOR: f64 = 1e-3;
/// Hermite coefficients are `ALPHA_BOUND * tanh(raw)`.
pub const ALPHA_BOUND: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub kappa: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub j_max: usize,
    pub trunk: Vec<usize>,
    pub quadrature: QuadratureConfig,
    pub censoring: CensoringRule,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub optimizer: OptimizerConfig,
    /// Where the last finite decoder is saved if training diverges.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub abort_checkpoint: Option<PathBuf>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        let grid = BidderGrid::default();
        Stage2Config {
            kappa: DEFAULT_KAPPA,
            n_min: grid.n_min,
            n_max: grid.n_max,
            j_max: DEFAULT_J_MAX,
            trunk: vec![32, 16],
            quadrature: QuadratureConfig::default(),
            censoring: CensoringRule::default(),
            epochs: 30,
            batch_size: 32,
            noise_sigma: 0.01,
            optimizer: OptimizerConfig {
                max_lr: 2e-3,
                warmup_steps: 600,
                total_steps: 0,
                ..OptimizerConfig::default()
            },
            abort_checkpoint: None,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if self.kappa > MAX_KAPPA {
            return Err(Error::Config(format!("kappa {} exceeds {MAX_KAPPA}", self.kappa)));
        }
        if self.trunk.is_empty() || self.trunk.iter().any(|w| *w < 2) {
            return Err(Error::Config("decoder trunk widths must be at least 2".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage-2 epochs and batch size must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("stage-2 noise_sigma must be non-negative".into()));
        }
        self.quadrature.validate()?;
        self.grid()?;
        if self.j_max < 2 || self.j_max > self.n_max {
            return Err(Error::Config(format!(
                "j_max must lie in 2..={}, got {}",
                self.n_max, self.j_max
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<BidderGrid> {
        BidderGrid::new(self.n_min, self.n_max).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn structural_model(&self) -> Result<StructuralModel> {
        StructuralModel::new(self.grid()?, self.j_max, &self.quadrature, self.censoring)
    }
}

/// Demand primitives decoded from one embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    pub valuation: ValuationParams,
    pub market_size: MarketSizeParams,
}

/// Trunk `q -> 32 -> 16` (LayerNorm + SiLU) followed by a valuation head
/// `(mu, sigma_raw, alpha_raw...)` and a market-size head of logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub trunk: Network,
    pub valuation_head: Network,
    pub market_head: Network,
    n_min: usize,
}

struct DecoderCache {
    trunk: ForwardCache,
    valuation: ForwardCache,
    market: ForwardCache,
    raw: Vec<f64>,
}

impl Decoder {
    pub fn specs(q: usize, trunk: &[usize], kappa: usize, grid_len: usize) -> Result<[NetworkSpec; 3]> {
        let mut dims = vec![q];
        dims.extend_from_slice(trunk);
        let width = *trunk.last().unwrap();
        Ok([
            NetworkSpec::trunk(&dims)?,
            NetworkSpec::mlp(&[width, 2 + kappa], Activation::Identity)?,
            NetworkSpec::mlp(&[width, grid_len], Activation::Identity)?,
        ])
    }

    pub fn zeros(q: usize, cfg: &Stage2Config) -> Result<Self> {
        let grid = cfg.grid()?;
        let [t, v, m] = Self::specs(q, &cfg.trunk, cfg.kappa, grid.len())?;
        Ok(Decoder {
            trunk: Network::zeros(t)?,
            valuation_head: Network::zeros(v)?,
            market_head: Network::zeros(m)?,
            n_min: grid.n_min,
        })
    }

    pub fn init<R: Rng + ?Sized>(q: usize, cfg: &Stage2Config, rng: &mut R) -> Result<Self> {
        let grid = cfg.grid()?;
        let [t, v, m] = Self::specs(q, &cfg.trunk, cfg.kappa, grid.len())?;
        Ok(Decoder {
            trunk: Network::init(t, rng)?,
            valuation_head: Network::init(v, rng)?,
            market_head: Network::init(m, rng)?,
            n_min: grid.n_min,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.spec().input_dim()
    }

    pub fn kappa(&self) -> usize {
        self.valuation_head.spec().output_dim() - 2
    }

    pub fn param_count(&self) -> usize {
        self.trunk.params().len() + self.valuation_head.params().len() + self.market_head.params().len()
    }

    pub fn networks(&self) -> [&Network; 3] {
        [&self.trunk, &self.valuation_head, &self.market_head]
    }

    pub fn networks_mut(&mut self) -> [&mut Network; 3] {
        [&mut self.trunk, &mut self.valuation_head, &mut self.market_head]
    }

    fn link(&self, raw: &[f64], logits: Vec<f64>) -> Result<DecoderOutput> {
        let alphas = raw[2..].iter().map(|a| ALPHA_BOUND * a.tanh()).collect();
        Ok(DecoderOutput {
            valuation: ValuationParams::new(raw[0], softplus(raw[1]) + SIGMA_FLOOR, alphas)?,
            market_size: MarketSizeParams::new(self.n_min, logits)?,
        })
    }

    pub fn decode(&self, e: &[f64]) -> Result<DecoderOutput> {
        let h = self.trunk.output(e)?;
        self.link(&self.valuation_head.output(&h)?, self.market_head.output(&h)?)
    }

    fn forward(&self, e: &[f64]) -> Result<(DecoderOutput, DecoderCache)> {
        let (h, trunk) = self.trunk.forward(e)?;
        let (raw, valuation) = self.valuation_head.forward(&h)?;
        let (logits, market) = self.market_head.forward(&h)?;
        let out = self.link(&raw, logits)?;
        Ok((out, DecoderCache { trunk, valuation, market, raw }))
    }

    /// Backprop of a gradient on the structural vector `(mu, sigma, alpha..., rho...)`.
    /// Returns the concatenated parameter gradient and the embedding gradient.
    fn backward(&self, cache: &DecoderCache, d_theta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let kappa = cache.raw.len() - 2;
        let mut d_raw = Vec::with_capacity(kappa + 2);
        d_raw.push(d_theta[0]);
        d_raw.push(d_theta[1] * sigmoid(cache.raw[1]));
        for k in 0..kappa {
            let t = cache.raw[2 + k].tanh();
            d_raw.push(d_theta[2 + k] * ALPHA_BOUND * (1.0 - t * t));
        }
        let d_logits = &d_theta[2 + kappa..];
        let (nt, nv) = (self.trunk.params().len(), self.valuation_head.params().len());
        let mut grad = vec![0.0; self.param_count()];
        let (g_trunk, rest) = grad.split_at_mut(nt);
        let (g_val, g_mkt) = rest.split_at_mut(nv);
        let dh_v = self.valuation_head.backward_into(&cache.valuation, &d_raw, g_val)?;
        let dh_m = self.market_head.backward_into(&cache.market, d_logits, g_mkt)?;
        let dh: Vec<f64> = dh_v.iter().zip(&dh_m).map(|(a, b)| a + b).collect();
        let de = self.trunk.backward_into(&cache.trunk, &dh, g_trunk)?;
        Ok((grad, de))
    }

    pub fn to_checkpoint(&self, cfg: &Stage2Config) -> Result<Checkpoint> {
        let cfg_json = serde_json::to_string(cfg).map_err(|e| Error::Data(e.to_string()))?;
        Ok(Checkpoint::new()
            .with_attribute("kind", "stage2")
            .with_attribute("stage2_config", cfg_json)
            .with_network("decoder_trunk", &self.trunk)
            .with_network("decoder_valuation", &self.valuation_head)
            .with_network("decoder_market", &self.market_head))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Stage2Config)> {
        let cfg: Stage2Config = serde_json::from_str(
            ck.attribute("stage2_config")
                .ok_or_else(|| Error::Data("checkpoint lacks a stage-2 config".into()))?,
        )
        .map_err(|e| Error::Data(e.to_string()))?;
        let dec = Decoder {
            trunk: ck.network("decoder_trunk")?.clone(),
            valuation_head: ck.network("decoder_valuation")?.clone(),
            market_head: ck.network("decoder_market")?.clone(),
            n_min: cfg.n_min,
        };
        let expected = Decoder::specs(dec.input_dim(), &cfg.trunk, cfg.kappa, cfg.grid()?.len())?;
        if dec.networks().iter().zip(&expected).any(|(n, s)| n.spec() != s) {
            return Err(Error::Data("decoder networks do not match the stored config".into()));
        }
        Ok((dec, cfg))
    }
}

pub fn decode_params(h2: &Decoder, e: &Embedding) -> Result<DecoderOutput> {
    h2.decode(e.values())
}

/// Mean squared error over ranks `2..=j` between observed and predicted log bids.
pub fn stage2_loss(pred: &BidPrediction, observed: &[f64]) -> Result<f64> {
    if observed.len() != pred.expected_log_bids.len() {
        return Err(Error::dim(pred.expected_log_bids.len(), observed.len(), "observed log bids"));
    }
    let n = observed.len() as f64;
    Ok(pred
        .expected_log_bids
        .iter()
        .zip(observed)
        .map(|(p, o)| (o - p).powi(2))
        .sum::<f64>()
        / n)
}

/// Loss, decoder gradient and embedding gradient for one listing.
pub fn stage2_sample_grad(
    decoder: &Decoder,
    model: &StructuralModel,
    e: &[f64],
    observed: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (out, cache) = decoder.forward(e)?;
    let pred = model.predict(&out.valuation, &out.market_size)?;
    let loss = stage2_loss(&pred, observed)?;
    let jac = model.jacobian(&out.valuation, &out.market_size)?;
    let n = observed.len() as f64;
    let g: Vec<f64> = pred
        .expected_log_bids
        .iter()
        .zip(observed)
        .map(|(p, o)| 2.0 * (p - o) / n)
        .collect();
    let d_theta = jac.transpose_mul(&g);
    let (grad, de) = decoder.backward(&cache, &d_theta)?;
    Ok((loss, grad, de))
}

/// Expected log bid at `rank` and its gradient with respect to the embedding.
pub fn rank_gradient(decoder: &Decoder, model: &StructuralModel, e: &[f64], rank: usize) -> Result<(f64, Vec<f64>)> {
    if rank < 2 || rank > model.j_max() {
        return Err(Error::InvalidParameter(format!("rank {rank} outside 2..={}", model.j_max())));
    }
    let (out, cache) = decoder.forward(e)?;
    let pred = model.predict(&out.valuation, &out.market_size)?;
    let jac = model.jacobian(&out.valuation, &out.market_size)?;
    let mut g = vec![0.0; pred.expected_log_bids.len()];
    g[rank - 2] = 1.0;
    let (_, de) = decoder.backward(&cache, &jac.transpose_mul(&g))?;
    Ok((pred.expected_log_bids[rank - 2], de))
}

/// Mean loss and decoder gradient over a set of listings.
pub fn stage2_objective(
    decoder: &Decoder,
    model: &StructuralModel,
    embeddings: &[Vec<f64>],
    observed: &[Vec<f64>],
) -> Result<(f64, Vec<f64>)> {
    let items: Vec<usize> = (0..embeddings.len()).collect();
    batch_mean(&items, decoder.param_count(), |&i| {
        stage2_sample_grad(decoder, model, &embeddings[i], &observed[i]).map(|(l, g, _)| (l, g))
    })
}

/// Included records with at least `j_max` bids, paired with their observed log bids.
pub fn stage2_examples(records: &[AuctionRecord], j_max: usize) -> Vec<(&AuctionRecord, Vec<f64>)> {
    records
        .iter()
        .filter(|r| !r.excluded)
        .filter_map(|r| r.observed_log_bids(j_max).map(|b| (r, b)))
        .collect()
}

fn noisy<R: Rng + ?Sized>(obs: &[f64], sigma: f64, rng: &mut R) -> Vec<f64> {
    if sigma == 0.0 {
        return obs.to_vec();
    }
    let noise = Normal::new(0.0, sigma).unwrap();
    obs.iter().map(|o| o + noise.sample(rng)).collect()
}

/// Starts the location bias where the untrained decoder's mean prediction
/// matches the mean observed log bid, and the scale near 0.3.
fn calibrate_output_bias(decoder: &mut Decoder, model: &StructuralModel, observed: &[Vec<f64>]) -> Result<()> {
    let target: f64 = observed.iter().flatten().sum::<f64>() / observed.iter().map(Vec::len).sum::<usize>() as f64;
    let sigma0: f64 = 0.3 - SIGMA_FLOOR;
    let kappa = decoder.kappa();
    let probe = ValuationParams::new(0.0, sigma0 + SIGMA_FLOOR, vec![0.0; kappa])?;
    let pred = model.predict(&probe, &MarketSizeParams::uniform(model.grid()))?;
    let offset = pred.expected_log_bids.iter().sum::<f64>() / pred.expected_log_bids.len() as f64;
    let bias = decoder.valuation_head.output_bias_mut();
    bias[0] = target - offset;
    bias[1] = sigma0.exp_m1().ln();
    Ok(())
}

fn check_loss(loss: f64, epoch: usize, step: usize, what: &str) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} loss became non-finite at epoch {epoch}, step {step}")))
    }
}

/// Trains a decoder on frozen embeddings. Embeddings are read once up front
/// and never updated.
pub fn train_stage2(
    source: &dyn EmbeddingSource,
    records: &[AuctionRecord],
    cfg: &Stage2Config,
    seed: u64,
) -> Result<(Decoder, LossHistory)> {
    cfg.validate()?;
    let model = cfg.structural_model()?;
    let examples = stage2_examples(records, cfg.j_max);
    if examples.is_empty() {
        return Err(Error::Data("stage-2 training set has no usable records".into()));
    }
    let embeddings = examples
        .iter()
        .map(|(r, _)| {
            let e = source.embedding(&r.listing_id, &r.features)?;
            if e.dim() != source.dim() {
                return Err(Error::dim(source.dim(), e.dim(), "embedding"));
            }
            Ok(e.into_values())
        })
        .collect::<Result<Vec<_>>>()?;
    let observed: Vec<Vec<f64>> = examples.into_iter().map(|(_, o)| o).collect();
    let steps = steps_per_epoch(embeddings.len(), cfg.batch_size) * cfg.epochs;
    let opt_cfg = cfg.optimizer.with_total_steps(steps)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut decoder = Decoder::init(source.dim(), cfg, &mut rng)?;
    calibrate_output_bias(&mut decoder, &model, &observed)?;
    let mut opt = JointOptimizer::new(opt_cfg, &decoder.networks());
    let mut order: Vec<usize> = (0..embeddings.len()).collect();
    let mut history = LossHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&mut order, cfg.batch_size, &mut rng) {
            let items: Vec<(usize, Vec<f64>)> = batch
                .iter()
                .map(|&i| (i, noisy(&observed[i], cfg.noise_sigma, &mut rng)))
                .collect();
            let (loss, grad) = batch_mean(&items, decoder.param_count(), |(i, obs)| {
                stage2_sample_grad(&decoder, &model, &embeddings[*i], obs).map(|(l, g, _)| (l, g))
            })
            .and_then(|r| check_loss(r.0, epoch, step + 1, "stage-2").map(|_| r))
            .inspect_err(|_| save_last_good(cfg, &decoder))?;
            step += 1;
            history.push(epoch, step, loss);
            opt.step(&mut decoder.networks_mut(), &grad)
                .inspect_err(|_| save_last_good(cfg, &decoder))?;
        }
        log::debug!("stage2 epoch {epoch}: mean loss {:.6}", history.epoch_means()[epoch]);
    }
    Ok((decoder, history))
}

fn save_last_good(cfg: &Stage2Config, decoder: &Decoder) {
    if let Some(path) = &cfg.abort_checkpoint {
        match decoder.to_checkpoint(cfg).and_then(|ck| ck.save(path)) {
            Ok(()) => log::error!("training diverged; last finite decoder saved to {}", path.display()),
            Err(e) => log::error!("training diverged and the last decoder could not be saved: {e}"),
        }
    }
}

/// Settings for the encoder trained jointly with the decoder in direct estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectConfig {
    pub hidden: usize,
    pub embedding_dim: usize,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig {
            hidden: DEFAULT_ENCODER_HIDDEN,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
        }
    }
}

/// Encoder and decoder trained end to end on the structural loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectModel {
    pub schema: FeatureSchema,
    pub encoder: Network,
    pub decoder: Decoder,
}

impl DirectModel {
    pub fn to_checkpoint(&self, cfg: &Stage2Config) -> Result<Checkpoint> {
        let schema = serde_json::to_string(&self.schema).map_err(|e| Error::Data(e.to_string()))?;
        let mut ck = self.decoder.to_checkpoint(cfg)?;
        ck.attributes.insert("kind".into(), "direct".into());
        ck.attributes.insert("feature_schema".into(), schema);
        ck.networks.insert(0, ("encoder".into(), self.encoder.clone()));
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Stage2Config)> {
        if ck.attribute("kind") != Some("direct") {
            return Err(Error::Data("checkpoint is not a direct-estimation model".into()));
        }
        let (decoder, cfg) = Decoder::from_checkpoint(ck)?;
        let schema = serde_json::from_str(
            ck.attribute("feature_schema")
                .ok_or_else(|| Error::Data("checkpoint lacks a feature schema".into()))?,
        )
        .map_err(|e| Error::Data(e.to_string()))?;
        Ok((
            DirectModel {
                schema,
                encoder: ck.network("encoder")?.clone(),
                decoder,
            },
            cfg,
        ))
    }
}

/// Direct estimation: encoder and decoder trained jointly against the
/// structural loss, with no outcome head.
pub fn train_direct(
    records: &[AuctionRecord],
    schema: &FeatureSchema,
    enc_cfg: &DirectConfig,
    cfg: &Stage2Config,
    seed: u64,
) -> Result<(DirectModel, LossHistory)> {
    cfg.validate()?;
    let model = cfg.structural_model()?;
    let examples = stage2_examples(records, cfg.j_max);
    if examples.is_empty() {
        return Err(Error::Data("direct-estimation training set has no usable records".into()));
    }
    let xs = examples
        .iter()
        .map(|(r, _)| schema.vectorize(&r.features))
        .collect::<Result<Vec<_>>>()?;
    let observed: Vec<Vec<f64>> = examples.into_iter().map(|(_, o)| o).collect();
    let steps = steps_per_epoch(xs.len(), cfg.batch_size) * cfg.epochs;
    let opt_cfg = cfg.optimizer.with_total_steps(steps)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut encoder = Network::init(encoder_spec(schema.dim(), enc_cfg.hidden, enc_cfg.embedding_dim)?, &mut rng)?;
    let mut decoder = Decoder::init(enc_cfg.embedding_dim, cfg, &mut rng)?;
    calibrate_output_bias(&mut decoder, &model, &observed)?;
    let [t, v, m] = decoder.networks();
    let mut opt = JointOptimizer::new(opt_cfg, &[&encoder, t, v, m]);
    let n_enc = encoder.params().len();
    let dim = n_enc + decoder.param_count();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = LossHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&mut order, cfg.batch_size, &mut rng) {
            let items: Vec<(usize, Vec<f64>)> = batch
                .iter()
                .map(|&i| (i, noisy(&observed[i], cfg.noise_sigma, &mut rng)))
                .collect();
            let (loss, grad) = batch_mean(&items, dim, |(i, obs)| {
                let (e, enc_cache) = encoder.forward(&xs[*i])?;
                let (l, g_dec, de) = stage2_sample_grad(&decoder, &model, &e, obs)?;
                let mut grad = vec![0.0; n_enc];
                encoder.backward_into(&enc_cache, &de, &mut grad)?;
                grad.extend_from_slice(&g_dec);
                Ok((l, grad))
            })?;
            step += 1;
            check_loss(loss, epoch, step, "direct-estimation")?;
            history.push(epoch, step, loss);
            let [t, v, m] = decoder.networks_mut();
            opt.step(&mut [&mut encoder, t, v, m], &grad)?;
        }
        log::debug!("direct epoch {epoch}: mean loss {:.6}", history.epoch_means()[epoch]);
    }
    Ok((
        DirectModel {
            schema: schema.clone(),
            encoder,
            decoder,
        },
        history,
    ))
}

/// Embedding source backed by the direct model's own encoder.
impl EmbeddingSource for DirectModel {
    fn dim(&self) -> usize {
        self.encoder.spec().output_dim()
    }

    fn embedding(&self, _listing_id: &str, features: &ListingFeatures) -> Result<Embedding> {
        Embedding::new(self.encoder.output(&self.schema.vectorize(features)?)?)
    }
}

/// Embedding -> primitives -> expected log bids for a single listing.
pub fn predict_listing(
    source: &dyn EmbeddingSource,
    decoder: &Decoder,
    model: &StructuralModel,
    listing_id: &str,
    features: &ListingFeatures,
) -> Result<(DecoderOutput, BidPrediction)> {
    let e = source.embedding(listing_id, features)?;
    let out = decode_params(decoder, &e)?;
    let pred = model.predict(&out.valuation, &out.market_size)?;
    Ok((out, pred))
}
