//! Stage 1: train the encoder together with an outcome head so embeddings
//! carry the market outcomes of each listing.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder::{encoder_spec, Embedding, FeatureSchema, DEFAULT_EMBEDDING_DIM, DEFAULT_ENCODER_HIDDEN};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Activation, Checkpoint, Network, NetworkSpec, OptimizerConfig};
use crate::simulator::{AuctionRecord, MIN_UNIQUE_BIDDERS};
use crate::training::{batch_mean, epoch_batches, steps_per_epoch, JointOptimizer, LossHistory};

/// Outputs of the outcome head.
pub const STAGE1_OUTPUTS: usize = 8;

pub const STAGE1_TARGET_NAMES: [&str; STAGE1_OUTPUTS] = [
    "log_b2",
    "log_b3",
    "log_b4",
    "log_b5",
    "log_views",
    "log_watchers",
    "log_bidders",
    "reserve_met",
];

/// Stage-1 regression targets. Engagement counts enter as `ln(1 + x)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Targets {
    pub log_bids: [f64; 4],
    pub log_views: f64,
    pub log_watchers: f64,
    pub log_bidders: f64,
    pub reserve_met: bool,
}

impl Stage1Targets {
    pub fn to_vec(&self) -> [f64; STAGE1_OUTPUTS] {
        let b = self.log_bids;
        [
            b[0],
            b[1],
            b[2],
            b[3],
            self.log_views,
            self.log_watchers,
            self.log_bidders,
            self.reserve_met as u8 as f64,
        ]
    }
}

/// Targets of a record with at least five unique bidders. Fewer bidders is
/// an exclusion, reported as a data error.
pub fn build_stage1_targets(a: &AuctionRecord) -> Result<Stage1Targets> {
    if a.final_bids.len() < MIN_UNIQUE_BIDDERS {
        return Err(Error::Data(format!(
            "listing {} excluded: {} unique bidders, need {MIN_UNIQUE_BIDDERS}",
            a.listing_id,
            a.final_bids.len()
        )));
    }
    let b = &a.final_bids;
    Ok(Stage1Targets {
        log_bids: [b[1].ln(), b[2].ln(), b[3].ln(), b[4].ln()],
        log_views: (a.views as f64).ln_1p(),
        log_watchers: (a.watchers as f64).ln_1p(),
        log_bidders: (a.n_bidders as f64).ln_1p(),
        reserve_met: b[0] >= a.reserve_price,
    })
}

/// Adds i.i.d. `N(0, sigma_noise^2)` noise to every real-valued target.
pub fn perturb_targets<R: Rng + ?Sized>(t: &Stage1Targets, sigma_noise: f64, rng: &mut R) -> Result<Stage1Targets> {
    if !(sigma_noise >= 0.0) {
        return Err(Error::InvalidParameter(format!("noise sigma must be non-negative, got {sigma_noise}")));
    }
    if sigma_noise == 0.0 {
        return Ok(*t);
    }
    let noise = Normal::new(0.0, sigma_noise).unwrap();
    let mut out = *t;
    for b in &mut out.log_bids {
        *b += noise.sample(rng);
    }
    out.log_views += noise.sample(rng);
    out.log_watchers += noise.sample(rng);
    out.log_bidders += noise.sample(rng);
    Ok(out)
}

/// Mean squared error over the eight components. `pred` holds head outputs
/// with the sigmoid already applied to the reserve component.
pub fn stage1_loss(pred: &[f64], target: &Stage1Targets) -> Result<f64> {
    if pred.len() != STAGE1_OUTPUTS {
        return Err(Error::dim(STAGE1_OUTPUTS, pred.len(), "stage-1 prediction"));
    }
    let t = target.to_vec();
    Ok(pred.iter().zip(&t).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / STAGE1_OUTPUTS as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub hidden: usize,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            hidden: DEFAULT_ENCODER_HIDDEN,
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            epochs: 40,
            batch_size: 64,
            noise_sigma: 0.01,
            optimizer: OptimizerConfig {
                max_lr: 2e-3,
                warmup_steps: 300,
                total_steps: 0,
                ..OptimizerConfig::default()
            },
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.embedding_dim < 2 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("stage-1 widths, epochs and batch size must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config("stage-1 noise_sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// Encoder plus outcome head.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Model {
    pub schema: FeatureSchema,
    pub encoder: Network,
    pub head: Network,
}

impl Stage1Model {
    pub fn head_spec(q: usize) -> Result<NetworkSpec> {
        NetworkSpec::mlp(&[q, STAGE1_OUTPUTS], Activation::Identity)
    }

    pub fn embed(&self, x: &[f64]) -> Result<Embedding> {
        Embedding::new(self.encoder.output(x)?)
    }

    /// Head outputs with the sigmoid applied to the reserve component.
    pub fn predict_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.head.output(&self.encoder.output(x)?)?;
        out[STAGE1_OUTPUTS - 1] = sigmoid(out[STAGE1_OUTPUTS - 1]);
        Ok(out)
    }

    pub fn predict(&self, a: &AuctionRecord) -> Result<Vec<f64>> {
        self.predict_vector(&self.schema.vectorize(&a.features)?)
    }

    /// Output `k` (after its link) and its gradient with respect to the feature vector.
    pub fn output_gradient(&self, x: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
        if k >= STAGE1_OUTPUTS {
            return Err(Error::InvalidParameter(format!("stage-1 output {k} out of range")));
        }
        let (e, enc_cache) = self.encoder.forward(x)?;
        let (out, head_cache) = self.head.forward(&e)?;
        let mut g = vec![0.0; STAGE1_OUTPUTS];
        let value = if k == STAGE1_OUTPUTS - 1 {
            let s = sigmoid(out[k]);
            g[k] = s * (1.0 - s);
            s
        } else {
            g[k] = 1.0;
            out[k]
        };
        let de = self.head.backward(&head_cache, &g)?.input;
        Ok((value, self.encoder.backward(&enc_cache, &de)?.input))
    }

    /// Loss and concatenated (encoder, head) gradient for one sample.
    fn sample_grad(&self, x: &[f64], target: &Stage1Targets) -> Result<(f64, Vec<f64>)> {
        let (e, enc_cache) = self.encoder.forward(x)?;
        let (mut out, head_cache) = self.head.forward(&e)?;
        let last = STAGE1_OUTPUTS - 1;
        let s = sigmoid(out[last]);
        out[last] = s;
        let loss = stage1_loss(&out, target)?;
        let t = target.to_vec();
        let mut g: Vec<f64> = out
            .iter()
            .zip(&t)
            .map(|(p, y)| 2.0 * (p - y) / STAGE1_OUTPUTS as f64)
            .collect();
        g[last] *= s * (1.0 - s);
        let n_enc = self.encoder.params().len();
        let mut grad = vec![0.0; n_enc + self.head.params().len()];
        let (enc_grad, head_grad) = grad.split_at_mut(n_enc);
        let de = self.head.backward_into(&head_cache, &g, head_grad)?;
        self.encoder.backward_into(&enc_cache, &de, enc_grad)?;
        Ok((loss, grad))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let schema = serde_json::to_string(&self.schema).map_err(|e| Error::Data(e.to_string()))?;
        Ok(Checkpoint::new()
            .with_attribute("kind", "stage1")
            .with_attribute("feature_schema", schema)
            .with_network("encoder", &self.encoder)
            .with_network("head", &self.head))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.attribute("kind") != Some("stage1") {
            return Err(Error::Data("checkpoint is not a stage-1 model".into()));
        }
        let schema = ck
            .attribute("feature_schema")
            .ok_or_else(|| Error::Data("stage-1 checkpoint lacks a feature schema".into()))?;
        Ok(Stage1Model {
            schema: serde_json::from_str(schema).map_err(|e| Error::Data(e.to_string()))?,
            encoder: ck.network("encoder")?.clone(),
            head: ck.network("head")?.clone(),
        })
    }
}

/// Included records with their clean targets; excluded or short records are skipped.
pub fn stage1_examples(records: &[AuctionRecord]) -> Vec<(&AuctionRecord, Stage1Targets)> {
    records
        .iter()
        .filter(|r| !r.excluded)
        .filter_map(|r| build_stage1_targets(r).ok().map(|t| (r, t)))
        .collect()
}

/// Shuffled mini-batch AdamW over the joint encoder + head parameters. The
/// head's output bias starts at the target means. Returns the model and the
/// per-step training loss.
pub fn train_stage1(
    records: &[AuctionRecord],
    schema: &FeatureSchema,
    cfg: &Stage1Config,
    seed: u64,
) -> Result<(Stage1Model, LossHistory)> {
    cfg.validate()?;
    let examples = stage1_examples(records);
    if examples.is_empty() {
        return Err(Error::Data("stage-1 training set has no usable records".into()));
    }
    let xs = examples
        .iter()
        .map(|(r, _)| schema.vectorize(&r.features))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Stage1Targets> = examples.iter().map(|(_, t)| *t).collect();
    let steps = steps_per_epoch(xs.len(), cfg.batch_size) * cfg.epochs;
    let opt_cfg = cfg.optimizer.with_total_steps(steps)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Network::init(encoder_spec(schema.dim(), cfg.hidden, cfg.embedding_dim)?, &mut rng)?;
    let mut head = Network::init(Stage1Model::head_spec(cfg.embedding_dim)?, &mut rng)?;
    let mut means = [0.0; STAGE1_OUTPUTS];
    for t in &targets {
        for (m, v) in means.iter_mut().zip(t.to_vec()) {
            *m += v / targets.len() as f64;
        }
    }
    let rate = means[STAGE1_OUTPUTS - 1].clamp(0.01, 0.99);
    means[STAGE1_OUTPUTS - 1] = (rate / (1.0 - rate)).ln();
    head.output_bias_mut().copy_from_slice(&means);

    let mut model = Stage1Model {
        schema: schema.clone(),
        encoder,
        head,
    };
    let mut opt = JointOptimizer::new(opt_cfg, &[&model.encoder, &model.head]);
    let dim = model.encoder.params().len() + model.head.params().len();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut history = LossHistory::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(&mut order, cfg.batch_size, &mut rng) {
            let items = batch
                .iter()
                .map(|&i| Ok((i, perturb_targets(&targets[i], cfg.noise_sigma, &mut rng)?)))
                .collect::<Result<Vec<_>>>()?;
            let (loss, grad) = batch_mean(&items, dim, |(i, t)| model.sample_grad(&xs[*i], t))?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "stage-1 loss became non-finite at epoch {epoch}, step {step}"
                )));
            }
            history.push(epoch, step, loss);
            opt.step(&mut [&mut model.encoder, &mut model.head], &grad)?;
        }
        log::debug!("stage1 epoch {epoch}: mean loss {:.6}", history.epoch_means()[epoch]);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ListingFeatures;
    use crate::simulator::GroundTruthMap;

    fn record(bids: Vec<f64>, reserve: f64) -> AuctionRecord {
        AuctionRecord {
            listing_id: "x".into(),
            features: GroundTruthMap::reference_features(),
            n_bidders: 7,
            final_bids: bids,
            reserve_price: reserve,
            reserve_met: true,
            views: 1000,
            watchers: 100,
            truth: None,
            excluded: false,
            exclusion_reason: None,
        }
    }

    #[test]
    fn target_construction() {
        let r = record(vec![100.0, 90.0, 80.0, 70.0, 60.0], 95.0);
        let t = build_stage1_targets(&r).unwrap();
        assert_eq!(t.log_bids[0], 90f64.ln());
        assert_eq!(t.log_bids[3], 60f64.ln());
        assert_eq!(t.log_views, 1001f64.ln());
        assert_eq!(t.log_bidders, 8f64.ln());
        assert!(t.reserve_met);
        let unmet = record(vec![100.0, 90.0, 80.0, 70.0, 60.0], 200.0);
        assert!(!build_stage1_targets(&unmet).unwrap().reserve_met);
        let short = record(vec![100.0, 90.0, 80.0, 70.0], 50.0);
        assert!(matches!(build_stage1_targets(&short), Err(Error::Data(_))));
    }

    #[test]
    fn perturbation() {
        let t = build_stage1_targets(&record(vec![100.0, 90.0, 80.0, 70.0, 60.0], 95.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(perturb_targets(&t, 0.0, &mut rng).unwrap(), t);
        assert!(perturb_targets(&t, -1.0, &mut rng).is_err());
        let sigma = 0.05;
        let n = 10_000;
        let mut ss = 0.0;
        let mut count = 0;
        for _ in 0..n {
            let p = perturb_targets(&t, sigma, &mut rng).unwrap();
            assert_eq!(p.reserve_met, t.reserve_met);
            for (a, b) in p.to_vec().iter().zip(t.to_vec()).take(7) {
                ss += (a - b).powi(2);
                count += 1;
            }
        }
        let var = ss / count as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn loss_examples() {
        let t = build_stage1_targets(&record(vec![100.0, 90.0, 80.0, 70.0, 60.0], 95.0)).unwrap();
        let exact = t.to_vec();
        assert_eq!(stage1_loss(&exact, &t).unwrap(), 0.0);
        let mut off = exact;
        off[5] += 1.0;
        assert!((stage1_loss(&off, &t).unwrap() - 0.125).abs() < 1e-15);
        assert!(stage1_loss(&exact[..7], &t).is_err());

        // Two-sample batch by hand.
        let t2 = build_stage1_targets(&record(vec![50.0, 40.0, 30.0, 20.0, 10.0], 60.0)).unwrap();
        let p1 = [4.5, 4.4, 4.3, 4.2, 6.9, 4.6, 2.0, 0.8];
        let p2 = [3.7, 3.4, 3.0, 2.3, 7.0, 4.5, 2.1, 0.3];
        let by_hand = |p: &[f64; 8], y: &[f64; 8]| {
            let mut s = 0.0;
            for k in 0..8 {
                s += (p[k] - y[k]) * (p[k] - y[k]);
            }
            s / 8.0
        };
        let expected = (by_hand(&p1, &t.to_vec()) + by_hand(&p2, &t2.to_vec())) / 2.0;
        let got = (stage1_loss(&p1, &t).unwrap() + stage1_loss(&p2, &t2).unwrap()) / 2.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn sample_gradient_matches_finite_differences() {
        let feats = vec![
            GroundTruthMap::reference_features(),
            ListingFeatures {
                mileage: 120_000.0,
                brand: "ford".into(),
                ..GroundTruthMap::reference_features()
            },
        ];
        let schema = FeatureSchema::fit(&feats).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = Stage1Model {
            encoder: Network::init(encoder_spec(schema.dim(), 12, 6).unwrap(), &mut rng).unwrap(),
            head: Network::init(Stage1Model::head_spec(6).unwrap(), &mut rng).unwrap(),
            schema: schema.clone(),
        };
        let x = schema.vectorize(&feats[1]).unwrap();
        let t = build_stage1_targets(&record(vec![10.0, 9.0, 8.0, 7.0, 6.0], 5.0)).unwrap();
        let (_, grad) = model.sample_grad(&x, &t).unwrap();
        let h = 1e-5;
        let n_enc = model.encoder.params().len();
        for i in (0..grad.len()).step_by(7) {
            let mut up = model.clone();
            let mut dn = model.clone();
            if i < n_enc {
                up.encoder.params_mut()[i] += h;
                dn.encoder.params_mut()[i] -= h;
            } else {
                up.head.params_mut()[i - n_enc] += h;
                dn.head.params_mut()[i - n_enc] -= h;
            }
            let fd = (stage1_loss(&up.predict_vector(&x).unwrap(), &t).unwrap()
                - stage1_loss(&dn.predict_vector(&x).unwrap(), &t).unwrap())
                / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-4);
            assert!(rel < 1e-3, "param {i}: fd {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn memorizes_a_single_record() {
        let r = record(vec![100.0, 90.0, 80.0, 70.0, 60.0], 95.0);
        let schema = FeatureSchema::fit([&r.features]).unwrap();
        let cfg = Stage1Config {
            hidden: 16,
            embedding_dim: 8,
            epochs: 400,
            batch_size: 1,
            noise_sigma: 0.0,
            optimizer: OptimizerConfig {
                max_lr: 1e-2,
                warmup_steps: 10,
                weight_decay: 0.0,
                ..OptimizerConfig::default()
            },
        };
        let (model, hist) = train_stage1(std::slice::from_ref(&r), &schema, &cfg, 3).unwrap();
        let t = build_stage1_targets(&r).unwrap();
        let loss = stage1_loss(&model.predict(&r).unwrap(), &t).unwrap();
        assert!(loss < 1e-4, "{loss}");
        assert_eq!(hist.records.len(), 400);
        let (again, _) = train_stage1(std::slice::from_ref(&r), &schema, &cfg, 3).unwrap();
        assert_eq!(again, model);
        let ck = Stage1Model::from_checkpoint(&Checkpoint::from_bytes(&model.to_checkpoint().unwrap().to_bytes()).unwrap())
            .unwrap();
        assert_eq!(ck, model);
    }
}
