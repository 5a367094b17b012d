//! Single-feature sweeps: substitute each grid value into a listing,
//! re-predict the price-setting bid and normalize the curve to its anchors.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{EmbeddingSource, ListingFeatures};
use crate::error::{Error, Result};
use crate::simulator::{AuctionRecord, GroundTruthMap};
use crate::stage2::{predict_listing, Decoder};
use crate::structural::StructuralModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepFeature {
    Mileage,
    Horsepower,
    Age,
}

impl SweepFeature {
    pub fn apply(self, f: &mut ListingFeatures, value: f64) {
        match self {
            SweepFeature::Mileage => f.mileage = value,
            SweepFeature::Horsepower => f.horsepower = value,
            SweepFeature::Age => f.age = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub feature: SweepFeature,
    pub grid: Vec<f64>,
    pub sample_size: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            feature: SweepFeature::Mileage,
            grid: vec![25_000.0, 50_000.0, 75_000.0, 100_000.0, 125_000.0, 150_000.0],
            sample_size: 200,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 2 {
            return Err(Error::Config("sweep grid needs at least two points".into()));
        }
        if self.grid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("sweep grid must be finite".into()));
        }
        let up = self.grid.windows(2).all(|w| w[1] > w[0]);
        let down = self.grid.windows(2).all(|w| w[1] < w[0]);
        if !(up || down) {
            return Err(Error::Config("sweep grid must be strictly monotone".into()));
        }
        if self.sample_size == 0 {
            return Err(Error::Config("sweep sample size must be positive".into()));
        }
        Ok(())
    }
}

/// Anything that predicts the expected log price-setting bid of a listing.
pub trait PriceModel: Sync {
    fn predict_log_price(&self, listing_id: &str, features: &ListingFeatures) -> Result<f64>;
}

pub struct TwoStagePrice<'a, S: EmbeddingSource + Sync> {
    pub source: &'a S,
    pub decoder: &'a Decoder,
    pub model: &'a StructuralModel,
}

impl<S: EmbeddingSource + Sync> PriceModel for TwoStagePrice<'_, S> {
    fn predict_log_price(&self, listing_id: &str, features: &ListingFeatures) -> Result<f64> {
        let (_, pred) = predict_listing(self.source, self.decoder, self.model, listing_id, features)?;
        Ok(pred.expected_log_bids[0])
    }
}

/// Ground-truth primitives pushed through the structural model.
pub struct OraclePrice<'a> {
    pub map: &'a GroundTruthMap,
    pub model: &'a StructuralModel,
}

impl PriceModel for OraclePrice<'_> {
    fn predict_log_price(&self, _listing_id: &str, features: &ListingFeatures) -> Result<f64> {
        let t = self.map.primitives(features)?;
        Ok(self.model.predict(&t.valuation, &t.market_size)?.expected_log_bids[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepCurve {
    pub listing_id: String,
    pub raw: Vec<f64>,
    /// `None` when the first and last predictions coincide.
    pub normalized: Option<Vec<f64>>,
}

impl SweepCurve {
    pub fn from_raw(listing_id: String, raw: Vec<f64>) -> Self {
        let (first, last) = (raw[0], raw[raw.len() - 1]);
        let normalized = (first != last).then(|| raw.iter().map(|r| (r - last) / (first - last)).collect());
        SweepCurve {
            listing_id,
            raw,
            normalized,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.normalized.is_none()
    }

    /// Raw predictions never rise along the grid, and the curve is not flat end to end.
    pub fn is_non_increasing(&self) -> bool {
        !self.is_degenerate() && self.raw.windows(2).all(|w| w[1] <= w[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub spec: SweepSpec,
    pub curves: Vec<SweepCurve>,
}

/// Deterministic sample of up to `n` records.
pub fn sample_listings(records: &[AuctionRecord], n: usize, seed: u64) -> Vec<&AuctionRecord> {
    if n >= records.len() {
        return records.iter().collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, records.len(), n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| &records[i]).collect()
}

pub fn run_sweep(model: &dyn PriceModel, listings: &[&AuctionRecord], spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    if listings.is_empty() {
        return Err(Error::Data("no listings to sweep".into()));
    }
    let curves = listings
        .par_iter()
        .map(|r| {
            let raw = spec
                .grid
                .iter()
                .map(|&v| {
                    let mut f = r.features.clone();
                    spec.feature.apply(&mut f, v);
                    model.predict_log_price(&r.listing_id, &f)
                })
                .collect::<Result<Vec<_>>>()?;
            let curve = SweepCurve::from_raw(r.listing_id.clone(), raw);
            if curve.is_degenerate() {
                log::warn!("{}: flat sweep, excluded from the aggregate", r.listing_id);
            }
            Ok(curve)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult {
        spec: spec.clone(),
        curves,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub n: usize,
    pub degenerate: usize,
    /// Share of all curves that are non-degenerate and non-increasing.
    pub fraction_monotone: f64,
    /// Mean normalized value per grid point over non-degenerate curves.
    pub mean_curve: Vec<f64>,
}

pub fn monotonicity_report(curves: &[SweepCurve]) -> Result<MonotonicityReport> {
    let first = curves.first().ok_or_else(|| Error::Data("no sweep curves".into()))?;
    let len = first.raw.len();
    if curves.iter().any(|c| c.raw.len() != len) {
        return Err(Error::Data("sweep curves differ in length".into()));
    }
    let monotone = curves.iter().filter(|c| c.is_non_increasing()).count();
    let kept: Vec<&Vec<f64>> = curves.iter().filter_map(|c| c.normalized.as_ref()).collect();
    let mut mean = vec![f64::NAN; len];
    if !kept.is_empty() {
        for (k, m) in mean.iter_mut().enumerate() {
            *m = kept.iter().map(|c| c[k]).sum::<f64>() / kept.len() as f64;
        }
    }
    Ok(MonotonicityReport {
        n: curves.len(),
        degenerate: curves.len() - kept.len(),
        fraction_monotone: monotone as f64 / curves.len() as f64,
        mean_curve: mean,
    })
}

impl SweepResult {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("listing_id,grid_value,raw_pred,normalized\n");
        for c in &self.curves {
            for (k, (&g, r)) in self.spec.grid.iter().zip(&c.raw).enumerate() {
                let norm = c.normalized.as_ref().map(|n| format!("{:?}", n[k])).unwrap_or_default();
                writeln!(s, "{},{g:?},{r:?},{norm}", c.listing_id).unwrap();
            }
        }
        s
    }

    pub fn aggregate_csv(&self) -> Result<String> {
        let rep = monotonicity_report(&self.curves)?;
        let mut s = format!(
            "# curves={} degenerate={} fraction_monotone={:?}\ngrid_value,mean_normalized\n",
            rep.n, rep.degenerate, rep.fraction_monotone
        );
        for (g, m) in self.spec.grid.iter().zip(&rep.mean_curve) {
            writeln!(s, "{g:?},{m:?}").unwrap();
        }
        Ok(s)
    }

    pub fn write_csvs(&self, curves: &Path, aggregate: &Path) -> Result<()> {
        let agg = self.aggregate_csv()?;
        std::fs::write(curves, self.curves_csv())?;
        std::fs::write(aggregate, agg)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::BidderGrid;
    use crate::simulator::{generate_dataset, SimulationConfig};
    use crate::structural::{CensoringRule, QuadratureConfig};

    fn curve(id: &str, raw: Vec<f64>) -> SweepCurve {
        SweepCurve::from_raw(id.into(), raw)
    }

    #[test]
    fn spec_validation() {
        assert!(SweepSpec::default().validate().is_ok());
        let bad = |grid: Vec<f64>| SweepSpec { grid, ..SweepSpec::default() }.validate().is_err();
        assert!(bad(vec![1.0]));
        assert!(bad(vec![1.0, 3.0, 2.0]));
        assert!(bad(vec![1.0, 1.0]));
    }

    #[test]
    fn two_point_curve_is_unit_anchored() {
        let c = curve("a", vec![11.2, 10.7]);
        assert_eq!(c.normalized, Some(vec![1.0, 0.0]));
    }

    #[test]
    fn anchors_are_exact() {
        let c = curve("a", vec![10.9, 10.85, 10.8, 10.601, 10.6, 10.33]);
        let n = c.normalized.unwrap();
        assert_eq!(n[0], 1.0);
        assert_eq!(n[5], 0.0);
    }

    #[test]
    fn report_counts() {
        let mut curves: Vec<SweepCurve> = (0..9).map(|i| curve(&format!("d{i}"), vec![3.0, 2.0 - 0.1 * i as f64, 1.0])).collect();
        let all = monotonicity_report(&curves).unwrap();
        assert_eq!(all.fraction_monotone, 1.0);
        assert_eq!((all.mean_curve[0], all.mean_curve[2]), (1.0, 0.0));
        curves.push(curve("flat", vec![2.0, 2.0, 2.0]));
        let r = monotonicity_report(&curves).unwrap();
        assert!((r.fraction_monotone - 0.9).abs() < 1e-15);
        assert_eq!(r.degenerate, 1);
        assert_eq!((r.mean_curve[0], r.mean_curve[2]), (1.0, 0.0));
        assert!(monotonicity_report(&[]).is_err());
    }

    #[test]
    fn rising_curve_is_not_monotone_decline() {
        assert!(!curve("up", vec![1.0, 2.0, 3.0]).is_non_increasing());
    }

    fn oracle_sweep(seed: u64) -> SweepResult {
        let map = GroundTruthMap::default();
        let cfg = SimulationConfig {
            count: 60,
            ..SimulationConfig::default()
        };
        let ds = generate_dataset(&map, &cfg, seed).unwrap();
        let model = StructuralModel::new(
            BidderGrid::new(1, 40).unwrap(),
            5,
            &QuadratureConfig::default(),
            CensoringRule::default(),
        )
        .unwrap();
        let oracle = OraclePrice { map: &map, model: &model };
        let sample = sample_listings(&ds.train, 20, seed);
        run_sweep(&oracle, &sample, &SweepSpec::default()).unwrap()
    }

    #[test]
    fn oracle_curves_strictly_decrease() {
        let res = oracle_sweep(4);
        for c in &res.curves {
            assert!(c.raw.windows(2).all(|w| w[1] < w[0]), "{}: {:?}", c.listing_id, c.raw);
        }
        assert_eq!(monotonicity_report(&res.curves).unwrap().fraction_monotone, 1.0);
    }

    #[test]
    fn sweep_outputs_are_reproducible() {
        let a = oracle_sweep(9);
        let b = oracle_sweep(9);
        assert_eq!(a.curves_csv(), b.curves_csv());
        assert_eq!(a.aggregate_csv().unwrap(), b.aggregate_csv().unwrap());
        assert!(a.curves_csv().starts_with("listing_id,grid_value,raw_pred,normalized\n"));
    }
}
