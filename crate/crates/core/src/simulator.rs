//! Synthetic marketplace with known demand primitives.
//!
//! A [`GroundTruthMap`] turns listing features into valuation and market-size
//! parameters. Each auction then draws a bidder count, draws log-valuations,
//! and applies the English-auction bid rule `b_1 = v_2 + b_inc`.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::ListingFeatures;
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::primitives::{BidderGrid, MarketSizeParams, ValuationParams, DEFAULT_KAPPA};

/// Records with fewer unique bidders are flagged as excluded.
pub const MIN_UNIQUE_BIDDERS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BrandProfile {
    pub name: String,
    pub prestige: f64,
    pub sportiness: f64,
    /// Brand-specific log-price shift on top of the descriptor effects.
    pub offset: f64,
}

fn brand(name: &str, prestige: f64, sportiness: f64, offset: f64) -> BrandProfile {
    BrandProfile {
        name: name.into(),
        prestige,
        sportiness,
        offset,
    }
}

/// Views and watchers as `round(exp(a + b n + s eps))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngagementModel {
    pub views_intercept: f64,
    pub views_slope: f64,
    pub views_noise: f64,
    pub watchers_intercept: f64,
    pub watchers_slope: f64,
    pub watchers_noise: f64,
}

impl Default for EngagementModel {
    fn default() -> Self {
        EngagementModel {
            views_intercept: 6.5,
            views_slope: 0.08,
            views_noise: 0.2,
            watchers_intercept: 3.0,
            watchers_slope: 0.06,
            watchers_noise: 0.3,
        }
    }
}

/// Coefficients of the true map from features to demand primitives.
///
/// ```text
/// mu      = intercept + c_m (log1p(miles) - 10.5) + c_hp (ln hp - 5.5) + c_age (age - 30)
///           + c_auto auto + c_t sale_time + c_p prestige + c_s sportiness
///           + brand offset + body offset + cylinder offset
/// sigma   = sigma_base + sigma_span * sigmoid(sigma_sport (sport - .5) + sigma_age (age - 30) / 30)
/// alpha_1 = alpha1_scale * tanh(prestige - .5),  alpha_2 = alpha2_base + alpha2_sport * sport
/// logit_n = -(n - mode)^2 / (2 width^2),  mode = mode_low + mode_span * sigmoid(...)
/// ```
///
/// Mileage enters only through `mu`, so every order statistic falls
/// strictly with mileage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthMap {
    pub intercept: f64,
    pub log_mileage: f64,
    pub log_horsepower: f64,
    pub age: f64,
    pub automatic: f64,
    pub sale_time: f64,
    pub prestige: f64,
    pub sportiness: f64,
    pub brands: Vec<BrandProfile>,
    pub body_styles: Vec<(String, f64)>,
    pub cylinders: Vec<(u32, f64)>,
    pub sigma_base: f64,
    pub sigma_span: f64,
    pub sigma_sport: f64,
    pub sigma_age: f64,
    pub alpha1_scale: f64,
    pub alpha2_base: f64,
    pub alpha2_sport: f64,
    pub kappa: usize,
    pub n_min: usize,
    pub n_max: usize,
    pub mode_low: f64,
    pub mode_span: f64,
    pub mode_prestige: f64,
    pub mode_sport: f64,
    pub mode_time: f64,
    pub mode_width: f64,
    pub engagement: EngagementModel,
}

impl Default for GroundTruthMap {
    fn default() -> Self {
        GroundTruthMap {
            intercept: 9.6,
            log_mileage: -0.30,
            log_horsepower: 0.6,
            age: -0.004,
            automatic: -0.05,
            sale_time: 0.25,
            prestige: 0.9,
            sportiness: 0.35,
            brands: vec![
                brand("porsche", 0.85, 0.9, 0.05),
                brand("bmw", 0.6, 0.6, 0.0),
                brand("mercedes", 0.75, 0.35, 0.03),
                brand("ford", 0.3, 0.5, -0.02),
                brand("chevrolet", 0.3, 0.55, 0.0),
                brand("toyota", 0.25, 0.3, 0.02),
                brand("ferrari", 1.0, 1.0, 0.05),
                brand("land-rover", 0.5, 0.15, -0.03),
                brand("jaguar", 0.65, 0.6, -0.04),
                // Descriptors sit inside the range spanned by the others.
                brand("dmc", 0.55, 0.6, 0.0),
            ],
            body_styles: vec![
                ("coupe".into(), 0.05),
                ("convertible".into(), 0.1),
                ("sedan".into(), -0.1),
                ("wagon".into(), -0.05),
                ("truck".into(), 0.0),
            ],
            cylinders: vec![(2, -0.2), (4, 0.0), (6, 0.05), (8, 0.15), (10, 0.3), (12, 0.4)],
            sigma_base: 0.22,
            sigma_span: 0.16,
            sigma_sport: 2.0,
            sigma_age: 1.0,
            alpha1_scale: 0.3,
            alpha2_base: 0.12,
            alpha2_sport: 0.08,
            kappa: DEFAULT_KAPPA,
            n_min: 1,
            n_max: 40,
            mode_low: 11.0,
            mode_span: 11.0,
            mode_prestige: 1.5,
            mode_sport: 1.0,
            mode_time: 1.0,
            mode_width: 3.5,
            engagement: EngagementModel::default(),
        }
    }
}

/// True primitives attached to simulated records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthParams {
    pub valuation: ValuationParams,
    pub market_size: MarketSizeParams,
}

impl GroundTruthMap {
    pub fn grid(&self) -> Result<BidderGrid> {
        BidderGrid::new(self.n_min, self.n_max)
    }

    pub fn brand(&self, name: &str) -> Option<&BrandProfile> {
        self.brands.iter().find(|b| b.name == name)
    }

    fn lookup_body(&self, name: &str) -> Result<f64> {
        self.body_styles
            .iter()
            .find(|(b, _)| b == name)
            .map(|(_, o)| *o)
            .ok_or_else(|| Error::Domain(format!("unknown body style {name:?}")))
    }

    fn lookup_cylinders(&self, c: u32) -> Result<f64> {
        self.cylinders
            .iter()
            .find(|(k, _)| *k == c)
            .map(|(_, o)| *o)
            .ok_or_else(|| Error::Domain(format!("unsupported cylinder count {c}")))
    }

    /// Location of the log-valuation distribution.
    pub fn mu(&self, f: &ListingFeatures) -> Result<f64> {
        f.validate()?;
        if f.mileage > 1e6 || f.horsepower < 20.0 || f.horsepower > 2000.0 || f.age > 150.0 {
            return Err(Error::Domain(format!(
                "features outside the simulator's range (mileage {}, horsepower {}, age {})",
                f.mileage, f.horsepower, f.age
            )));
        }
        let brand = self
            .brand(&f.brand)
            .ok_or_else(|| Error::Domain(format!("unknown brand {:?}", f.brand)))?;
        Ok(self.intercept
            + self.log_mileage * (f.log_mileage() - 10.5)
            + self.log_horsepower * (f.log_horsepower() - 5.5)
            + self.age * (f.age - 30.0)
            + self.automatic * f.automatic as u8 as f64
            + self.sale_time * f.sale_time
            + self.prestige * f.brand_prestige
            + self.sportiness * f.brand_sportiness
            + brand.offset
            + self.lookup_body(&f.body_style)?
            + self.lookup_cylinders(f.cylinders)?)
    }

    pub fn primitives(&self, f: &ListingFeatures) -> Result<TruthParams> {
        let mu = self.mu(f)?;
        let sd_arg = self.sigma_sport * (f.brand_sportiness - 0.5) + self.sigma_age * (f.age - 30.0) / 30.0;
        let sigma = self.sigma_base + self.sigma_span * sigmoid(sd_arg);
        let mut alphas = vec![0.0; self.kappa];
        if self.kappa >= 1 {
            alphas[0] = self.alpha1_scale * (f.brand_prestige - 0.5).tanh();
        }
        if self.kappa >= 2 {
            alphas[1] = self.alpha2_base + self.alpha2_sport * f.brand_sportiness;
        }
        let valuation = ValuationParams::new(mu, sigma, alphas)?;
        let lin = self.mode_prestige * (f.brand_prestige - 0.5)
            + self.mode_sport * (f.brand_sportiness - 0.5)
            + self.mode_time * (f.sale_time - 0.5);
        let mode = self.mode_low + self.mode_span * sigmoid(lin);
        let w2 = 2.0 * self.mode_width * self.mode_width;
        let logits = self
            .grid()?
            .counts()
            .map(|n| -(n as f64 - mode).powi(2) / w2)
            .collect();
        let market_size = MarketSizeParams::new(self.n_min, logits)?;
        Ok(TruthParams {
            valuation,
            market_size,
        })
    }

    /// The fixed listing the map's reference parameters are quoted at.
    pub fn reference_features() -> ListingFeatures {
        ListingFeatures {
            mileage: 50_000.0,
            horsepower: 300.0,
            age: 30.0,
            automatic: false,
            cylinders: 6,
            brand: "porsche".into(),
            body_style: "coupe".into(),
            brand_prestige: 0.85,
            brand_sportiness: 0.9,
            sale_time: 0.5,
            sale_year: 2019,
        }
    }

    /// Draws a listing of the given brand.
    pub fn sample_features<R: Rng + ?Sized>(&self, brand: &BrandProfile, rng: &mut R) -> ListingFeatures {
        let mileage = (rng.random_range(7.6f64..12.1)).exp().round();
        let cylinders = {
            const WEIGHTS: [(u32, f64); 6] = [(2, 0.03), (4, 0.3), (6, 0.3), (8, 0.27), (10, 0.04), (12, 0.06)];
            let mut u = rng.random::<f64>();
            let mut pick = 8;
            for (c, w) in WEIGHTS {
                if u < w {
                    pick = c;
                    break;
                }
                u -= w;
            }
            pick
        };
        let hp_noise: f64 = Normal::new(0.0, 0.25).unwrap().sample(rng);
        let horsepower = ((35.0 * cylinders as f64).ln() + 0.4 + hp_noise).exp().clamp(40.0, 1500.0).round();
        let age = rng.random_range(3.0f64..60.0).round();
        let automatic = rng.random_bool(0.4);
        let body = &self.body_styles[rng.random_range(0..self.body_styles.len())].0;
        let sale_time: f64 = rng.random();
        let sale_year = 2014 + ((sale_time * 10.0) as u32).min(9);
        ListingFeatures {
            mileage,
            horsepower,
            age,
            automatic,
            cylinders,
            brand: brand.name.clone(),
            body_style: body.clone(),
            brand_prestige: brand.prestige,
            brand_sportiness: brand.sportiness,
            sale_time,
            sale_year,
        }
    }
}

/// Secret reserve `exp(mu + z sigma)` with `z ~ N(0, z_sd)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReservePolicy {
    pub z_sd: f64,
}

impl Default for ReservePolicy {
    fn default() -> Self {
        ReservePolicy { z_sd: 0.5 }
    }
}

/// Market outcome of one simulated auction.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionOutcome {
    pub final_bids: Vec<f64>,
    pub reserve_price: f64,
    pub reserve_met: bool,
    pub views: u64,
    pub watchers: u64,
}

/// Final bids from dollar valuations: sorted descending, `b_1 = v_2 + b_inc`,
/// `b_j = v_j` below the top. A lone bidder bids their valuation.
pub fn bids_from_valuations(mut values: Vec<f64>, b_inc: f64) -> Vec<f64> {
    values.sort_by(|a, b| b.total_cmp(a));
    if values.len() >= 2 {
        values[0] = values[1] + b_inc;
    }
    values
}

pub fn simulate_auction<R: Rng + ?Sized>(
    truth: &TruthParams,
    engagement: &EngagementModel,
    reserve: &ReservePolicy,
    b_inc: f64,
    rng: &mut R,
) -> Result<AuctionOutcome> {
    if !(b_inc > 0.0) {
        return Err(Error::InvalidParameter(format!("b_inc must be positive, got {b_inc}")));
    }
    let n = truth.market_size.sample(rng);
    let logv = truth.valuation.sample(n, rng)?;
    let final_bids = bids_from_valuations(logv.iter().map(|v| v.exp()).collect(), b_inc);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let z = reserve.z_sd * std_normal.sample(rng);
    let reserve_price = (truth.valuation.mu() + z * truth.valuation.sigma()).exp();
    let views = (engagement.views_intercept
        + engagement.views_slope * n as f64
        + engagement.views_noise * std_normal.sample(rng))
    .exp()
    .round() as u64;
    let watchers = (engagement.watchers_intercept
        + engagement.watchers_slope * n as f64
        + engagement.watchers_noise * std_normal.sample(rng))
    .exp()
    .round() as u64;
    Ok(AuctionOutcome {
        reserve_met: final_bids[0] >= reserve_price,
        final_bids,
        reserve_price,
        views,
        watchers,
    })
}

/// Buyer's premium: 5% of the winning bid, floored at $250 and capped at $5,000.
pub fn buyer_fee(b1: f64) -> Result<f64> {
    if !(b1 > 0.0) {
        return Err(Error::InvalidParameter(format!("winning bid must be positive, got {b1}")));
    }
    Ok((0.05 * b1).clamp(250.0, 5000.0))
}

/// One listing and its auction outcome, as stored one per line in dataset files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuctionRecord {
    pub listing_id: String,
    pub features: ListingFeatures,
    pub final_bids: Vec<f64>,
    pub n_bidders: usize,
    pub reserve_price: f64,
    pub reserve_met: bool,
    pub views: u64,
    pub watchers: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthParams>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub excluded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exclusion_reason: Option<String>,
}

impl AuctionRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(format!("record {}: {m}", self.listing_id)));
        if self.final_bids.is_empty() || self.final_bids.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return bad("final bids must be positive and finite".into());
        }
        if self.final_bids.windows(2).any(|w| w[0] < w[1]) {
            return bad("final bids must be non-increasing".into());
        }
        if self.n_bidders != self.final_bids.len() {
            return bad(format!("n_bidders {} but {} bids", self.n_bidders, self.final_bids.len()));
        }
        if self.reserve_met != (self.final_bids[0] >= self.reserve_price) {
            return bad("reserve_met disagrees with the winning bid".into());
        }
        self.features.validate()
    }

    /// `ln b_j` for `j = 2..=j_max`, or `None` if the record has fewer bids.
    pub fn observed_log_bids(&self, j_max: usize) -> Option<Vec<f64>> {
        (self.final_bids.len() >= j_max).then(|| self.final_bids[1..j_max].iter().map(|b| b.ln()).collect())
    }
}

/// Train/validation fractions; the zero-shot slice is a further share of the count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    pub count: usize,
    pub validation_fraction: f64,
    pub zero_shot_fraction: f64,
    pub zero_shot_brand: String,
    pub b_inc: f64,
    pub reserve: ReservePolicy,
    pub include_truth: bool,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            count: 2000,
            validation_fraction: 0.2,
            zero_shot_fraction: 0.025,
            zero_shot_brand: "dmc".into(),
            b_inc: 100.0,
            reserve: ReservePolicy::default(),
            include_truth: true,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self, map: &GroundTruthMap) -> Result<()> {
        if self.count < 10 {
            return Err(Error::Config(format!("dataset count must be at least 10, got {}", self.count)));
        }
        let frac = |f: f64| (0.0..1.0).contains(&f);
        if !frac(self.validation_fraction)
            || !frac(self.zero_shot_fraction)
            || self.validation_fraction + self.zero_shot_fraction >= 1.0
        {
            return Err(Error::Config("split fractions must be in [0, 1) and leave a training share".into()));
        }
        if map.brand(&self.zero_shot_brand).is_none() {
            return Err(Error::Config(format!(
                "zero-shot brand {:?} is not in the feature space",
                self.zero_shot_brand
            )));
        }
        if map.brands.len() < 2 {
            return Err(Error::Config("need at least one brand besides the zero-shot brand".into()));
        }
        if !(self.b_inc > 0.0) || !(self.reserve.z_sd >= 0.0) {
            return Err(Error::Config("b_inc must be positive and reserve z_sd non-negative".into()));
        }
        Ok(())
    }

    /// `(train, validation, zero_shot)` sizes: floors for the held-out shares, remainder to train.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let val = (self.count as f64 * self.validation_fraction).floor() as usize;
        let zs = (self.count as f64 * self.zero_shot_fraction).floor() as usize;
        (self.count - val - zs, val, zs)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub train: Vec<AuctionRecord>,
    pub validation: Vec<AuctionRecord>,
    pub zero_shot: Vec<AuctionRecord>,
}

pub const SPLIT_FILES: [&str; 3] = ["train.jsonl", "validation.jsonl", "zero_shot.jsonl"];

impl Dataset {
    pub fn splits(&self) -> [&[AuctionRecord]; 3] {
        [&self.train, &self.validation, &self.zero_shot]
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, split) in SPLIT_FILES.iter().zip(self.splits()) {
            write_jsonl(&dir.join(name), split)?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        Ok(Dataset {
            train: read_jsonl(&dir.join(SPLIT_FILES[0]))?,
            validation: read_jsonl(&dir.join(SPLIT_FILES[1]))?,
            zero_shot: read_jsonl(&dir.join(SPLIT_FILES[2]))?,
        })
    }
}

/// Included records only.
pub fn included(records: &[AuctionRecord]) -> Vec<&AuctionRecord> {
    records.iter().filter(|r| !r.excluded).collect()
}

pub fn write_jsonl(path: &Path, records: &[AuctionRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<AuctionRecord>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AuctionRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// SplitMix64 finalizer, used to spread the base seed before xor-ing in the listing index.
pub fn mix_seed(base: u64) -> u64 {
    let mut z = base.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Simulates the listing with the given index under its own RNG stream.
pub fn simulate_listing(
    map: &GroundTruthMap,
    cfg: &SimulationConfig,
    brand: &BrandProfile,
    index: u64,
    seed: u64,
) -> Result<AuctionRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed) ^ index);
    let features = map.sample_features(brand, &mut rng);
    let truth = map.primitives(&features)?;
    let outcome = simulate_auction(&truth, &map.engagement, &cfg.reserve, cfg.b_inc, &mut rng)?;
    let n_bidders = outcome.final_bids.len();
    let excluded = n_bidders < MIN_UNIQUE_BIDDERS;
    Ok(AuctionRecord {
        listing_id: format!("L{index:06}"),
        features,
        final_bids: outcome.final_bids,
        n_bidders,
        reserve_price: outcome.reserve_price,
        reserve_met: outcome.reserve_met,
        views: outcome.views,
        watchers: outcome.watchers,
        truth: cfg.include_truth.then_some(truth),
        excluded,
        exclusion_reason: excluded
            .then(|| format!("fewer than {MIN_UNIQUE_BIDDERS} unique bidders ({n_bidders})")),
    })
}

/// Simulates `cfg.count` listings. Indices are laid out train, then
/// validation, then the zero-shot slice; only the zero-shot slice uses the
/// withheld brand, drawn uniformly from the rest otherwise.
pub fn generate_dataset(map: &GroundTruthMap, cfg: &SimulationConfig, seed: u64) -> Result<Dataset> {
    cfg.validate(map)?;
    let (n_train, n_val, _) = cfg.split_sizes();
    let seen: Vec<&BrandProfile> = map.brands.iter().filter(|b| b.name != cfg.zero_shot_brand).collect();
    let withheld = map.brand(&cfg.zero_shot_brand).unwrap();
    let records = (0..cfg.count)
        .into_par_iter()
        .map(|i| {
            let brand = if i >= n_train + n_val {
                withheld
            } else {
                // Brand choice gets its own stream so it does not shift the listing's draws.
                let mut pick = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ 0xB4A7D) ^ i as u64);
                seen[pick.random_range(0..seen.len())]
            };
            simulate_listing(map, cfg, brand, i as u64, seed)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = records.into_iter();
    Ok(Dataset {
        train: it.by_ref().take(n_train).collect(),
        validation: it.by_ref().take(n_val).collect(),
        zero_shot: it.collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structural::{QuadratureConfig, StructuralModel, CensoringRule};

    #[test]
    fn reference_parameters_are_frozen() {
        let map = GroundTruthMap::default();
        let t = map.primitives(&GroundTruthMap::reference_features()).unwrap();
        let v = &t.valuation;
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(v.mu(), 10.981329999530637));
        assert!(close(v.sigma(), 0.33039591698041804));
        assert!(close(v.alphas()[0], 0.10091266330089967));
        assert!(close(v.alphas()[1], 0.192));
        assert_eq!(&v.alphas()[2..], &[0.0, 0.0]);
        let logits = t.market_size.logits();
        assert_eq!(logits.len(), 40);
        assert!(close(logits[0], -13.043873129228702));
        assert!(close(logits[18], -0.0006209516360037289));
        assert!(close(logits[39], -18.212064839682615));
    }

    #[test]
    fn mileage_lowers_mu() {
        let map = GroundTruthMap::default();
        let mut f = GroundTruthMap::reference_features();
        let mut prev = f64::INFINITY;
        for m in [0.0, 1_000.0, 25_000.0, 50_000.0, 150_000.0, 400_000.0] {
            f.mileage = m;
            let mu = map.mu(&f).unwrap();
            assert!(mu < prev);
            prev = mu;
        }
        assert_eq!(map.primitives(&f).unwrap(), map.primitives(&f).unwrap());
    }

    #[test]
    fn out_of_range_features_are_domain_errors() {
        let map = GroundTruthMap::default();
        let base = GroundTruthMap::reference_features();
        let cases = [
            ListingFeatures { mileage: 5e6, ..base.clone() },
            ListingFeatures { horsepower: 5.0, ..base.clone() },
            ListingFeatures { brand: "yugo".into(), ..base.clone() },
            ListingFeatures { cylinders: 5, ..base.clone() },
            ListingFeatures { body_style: "boat".into(), ..base.clone() },
            ListingFeatures { sale_time: 1.5, ..base },
        ];
        for f in cases {
            assert!(matches!(map.primitives(&f), Err(Error::Domain(_))), "{f:?}");
        }
    }

    #[test]
    fn default_map_alphas_have_no_real_roots() {
        let map = GroundTruthMap::default();
        for b in &map.brands {
            let f = ListingFeatures {
                brand: b.name.clone(),
                brand_prestige: b.prestige,
                brand_sportiness: b.sportiness,
                ..GroundTruthMap::reference_features()
            };
            let a = map.primitives(&f).unwrap().valuation.alphas().to_vec();
            assert!(a[1] > a[0] * a[0] / 4.0, "{}: {a:?}", b.name);
        }
    }

    #[test]
    fn bid_rule() {
        let bids = bids_from_valuations(vec![3.0, 5.0, 4.0], 0.1);
        assert_eq!(bids, vec![4.1, 4.0, 3.0]);
        assert_eq!(bids_from_valuations(vec![7.0], 0.1), vec![7.0]);
    }

    #[test]
    fn single_bidder_auction() {
        let truth = TruthParams {
            valuation: ValuationParams::gaussian(9.0, 0.3).unwrap(),
            market_size: MarketSizeParams::new(1, vec![0.0]).unwrap(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = simulate_auction(&truth, &EngagementModel::default(), &ReservePolicy::default(), 100.0, &mut rng)
            .unwrap();
        assert_eq!(out.final_bids.len(), 1);
        assert_eq!(out.reserve_met, out.final_bids[0] >= out.reserve_price);
        assert!(simulate_auction(&truth, &EngagementModel::default(), &ReservePolicy::default(), 0.0, &mut rng).is_err());
    }

    #[test]
    fn fees() {
        assert_eq!(buyer_fee(1_000.0).unwrap(), 250.0);
        assert_eq!(buyer_fee(10_000.0).unwrap(), 500.0);
        assert_eq!(buyer_fee(200_000.0).unwrap(), 5_000.0);
        assert!(buyer_fee(0.0).is_err());
    }

    #[test]
    fn simulated_rank_two_matches_quadrature() {
        let map = GroundTruthMap::default();
        let truth = map.primitives(&GroundTruthMap::reference_features()).unwrap();
        let model = StructuralModel::new(map.grid().unwrap(), 5, &QuadratureConfig::default(), CensoringRule::LowestExisting)
            .unwrap();
        let pred = model.predict(&truth.valuation, &truth.market_size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let draws = 50_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..draws {
            let n = truth.market_size.sample(&mut rng);
            let mut v = truth.valuation.sample(n, &mut rng).unwrap();
            v.sort_by(|a, b| b.total_cmp(a));
            // Censoring: a market without a second bidder reports its lowest value.
            let x = v[1.min(n - 1)];
            s += x;
            s2 += x * x;
        }
        let mean = s / draws as f64;
        let se = ((s2 / draws as f64 - mean * mean) / draws as f64).sqrt();
        let expected = pred.rank(2).unwrap();
        assert!((mean - expected).abs() < 3.0 * se, "mc {mean} quad {expected} se {se}");
    }

    #[test]
    fn dataset_splits_and_determinism() {
        let map = GroundTruthMap::default();
        let cfg = SimulationConfig {
            count: 203,
            ..Default::default()
        };
        let ds = generate_dataset(&map, &cfg, 11).unwrap();
        assert_eq!(cfg.split_sizes(), (158, 40, 5));
        assert_eq!((ds.train.len(), ds.validation.len(), ds.zero_shot.len()), (158, 40, 5));
        assert!(ds.train.iter().chain(&ds.validation).all(|r| r.features.brand != "dmc"));
        assert!(ds.zero_shot.iter().all(|r| r.features.brand == "dmc"));
        for r in ds.splits().concat() {
            r.validate().unwrap();
            assert_eq!(r.excluded, r.n_bidders < MIN_UNIQUE_BIDDERS);
            assert_eq!(r.excluded, r.exclusion_reason.is_some());
            if r.n_bidders >= 2 {
                assert!((r.final_bids[0] - r.final_bids[1] - cfg.b_inc).abs() < 1e-6 * r.final_bids[0]);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        ds.write(&dir.path().join("a")).unwrap();
        generate_dataset(&map, &cfg, 11).unwrap().write(&dir.path().join("b")).unwrap();
        for f in SPLIT_FILES {
            let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
            let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
            assert_eq!(a, b, "{f}");
        }
        assert_eq!(Dataset::read(&dir.path().join("a")).unwrap(), ds);
        let other = generate_dataset(&map, &cfg, 12).unwrap();
        assert_ne!(other.train[0], ds.train[0]);
    }

    #[test]
    fn config_errors() {
        let map = GroundTruthMap::default();
        let bad_brand = SimulationConfig {
            zero_shot_brand: "delorean-motor".into(),
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&map, &bad_brand, 0), Err(Error::Config(_))));
        let tiny = SimulationConfig {
            count: 9,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(&map, &tiny, 0), Err(Error::Config(_))));
    }
}
