//! Fit metrics for predicted log bids and the model comparison report.
//!
//! RMSE and R² are taken on the log scale. MAPE, MdAPE, hit rate and bias
//! are level-scale quantities obtained by exponentiating.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::simulator::AuctionRecord;

pub const DEFAULT_HIT_TOLERANCE: f64 = 0.10;
pub const METRICS_CSV_HEADER: &str = "model,rank,n,rmse_log,r2,mape,mdape,hit,bias";

/// Slack on the hit boundary so an error of exactly the tolerance counts
/// after the exp/ln round trip.
const HIT_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub n: usize,
    pub rmse_log: f64,
    pub r2: f64,
    pub mape_pct: f64,
    pub mdape_pct: f64,
    pub hit_pct: f64,
    pub bias_pct: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Metrics of `pred_log` against `target_log`.
///
/// When the targets have no spread R² is 1 for an exact fit and `-inf`
/// otherwise.
pub fn compute_metrics(pred_log: &[f64], target_log: &[f64], hit_tolerance: f64) -> Result<MetricRow> {
    if pred_log.is_empty() {
        return Err(Error::Data("no predictions to score".into()));
    }
    if pred_log.len() != target_log.len() {
        return Err(Error::dim(target_log.len(), pred_log.len(), "predictions vs targets"));
    }
    if !(hit_tolerance >= 0.0 && hit_tolerance.is_finite()) {
        return Err(Error::InvalidParameter(format!("hit tolerance {hit_tolerance}")));
    }
    if let Some(i) = pred_log.iter().chain(target_log).position(|x| !x.is_finite()) {
        let which = if i < pred_log.len() { "prediction" } else { "target" };
        return Err(Error::Data(format!("non-finite {which} at index {}", i % pred_log.len())));
    }
    let n = pred_log.len();
    let nf = n as f64;
    let mean_t = target_log.iter().sum::<f64>() / nf;
    let mut sse = 0.0;
    let mut sst = 0.0;
    let mut log_err = 0.0;
    let mut ape = Vec::with_capacity(n);
    for (&p, &t) in pred_log.iter().zip(target_log) {
        sse += (p - t) * (p - t);
        sst += (t - mean_t) * (t - mean_t);
        log_err += p - t;
        let (pl, tl) = (p.exp(), t.exp());
        if !(tl > 0.0 && tl.is_finite() && pl.is_finite()) {
            return Err(Error::Data(format!("level-scale value out of range (log {t})")));
        }
        ape.push((pl - tl).abs() / tl);
    }
    let r2 = if sst > 0.0 {
        1.0 - sse / sst
    } else if sse == 0.0 {
        1.0
    } else {
        f64::NEG_INFINITY
    };
    let hits = ape.iter().filter(|&&a| a <= hit_tolerance + HIT_SLACK).count();
    let mape = ape.iter().sum::<f64>() / nf;
    Ok(MetricRow {
        n,
        rmse_log: (sse / nf).sqrt(),
        r2,
        mape_pct: 100.0 * mape,
        mdape_pct: 100.0 * median(&mut ape),
        hit_pct: 100.0 * hits as f64 / nf,
        bias_pct: 100.0 * (log_err / nf).exp_m1(),
    })
}

/// Predicted log bids for ranks `2..2+len` keyed by listing id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPredictions {
    pub model: String,
    pub predictions: BTreeMap<String, Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub model: String,
    pub rank: usize,
    pub metrics: MetricRow,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

/// Observed log bids for ranks `2..=j_max`, keyed by listing id. Excluded
/// records and records with too few bids are skipped.
pub fn observed_targets(records: &[AuctionRecord], j_max: usize) -> BTreeMap<String, Vec<f64>> {
    records
        .iter()
        .filter(|r| !r.excluded)
        .filter_map(|r| r.observed_log_bids(j_max).map(|b| (r.listing_id.clone(), b)))
        .collect()
}

/// Runs `predict` over the records named in `targets`, in parallel.
pub fn collect_predictions<F>(model: &str, records: &[AuctionRecord], targets: &BTreeMap<String, Vec<f64>>, predict: F) -> Result<ModelPredictions>
where
    F: Fn(&AuctionRecord) -> Result<Vec<f64>> + Sync,
{
    let rows = records
        .par_iter()
        .filter(|r| targets.contains_key(&r.listing_id))
        .map(|r| predict(r).map(|p| (r.listing_id.clone(), p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelPredictions {
        model: model.to_string(),
        predictions: rows.into_iter().collect(),
    })
}

fn ranks_in(preds: &BTreeMap<String, Vec<f64>>, what: &str) -> Result<usize> {
    let mut lens = preds.values().map(Vec::len);
    let first = lens.next().ok_or_else(|| Error::Data(format!("{what}: no listings")))?;
    if first == 0 || lens.any(|l| l != first) {
        return Err(Error::Data(format!("{what}: listings disagree on the number of ranks")));
    }
    Ok(first)
}

/// Score every model against `targets` (observed log bids from rank 2 up,
/// keyed by listing id). A model may cover fewer ranks than the targets;
/// its listing ids must match the targets exactly.
pub fn assemble_report(
    models: &[ModelPredictions],
    targets: &BTreeMap<String, Vec<f64>>,
    hit_tolerance: f64,
) -> Result<EvalReport> {
    let target_ranks = ranks_in(targets, "targets")?;
    let mut jobs = Vec::new();
    for m in models {
        let have: BTreeSet<&String> = m.predictions.keys().collect();
        let want: BTreeSet<&String> = targets.keys().collect();
        let mut bad: Vec<String> = want.symmetric_difference(&have).map(|s| s.to_string()).collect();
        if !bad.is_empty() {
            bad.sort();
            return Err(Error::Join(bad));
        }
        let ranks = ranks_in(&m.predictions, &m.model)?;
        if ranks > target_ranks {
            return Err(Error::Data(format!(
                "{}: predicts {ranks} ranks but targets have {target_ranks}",
                m.model
            )));
        }
        for k in 0..ranks {
            jobs.push((m, k));
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(m, k)| {
            let (p, t): (Vec<f64>, Vec<f64>) = targets.iter().map(|(id, t)| (m.predictions[id][k], t[k])).unzip();
            Ok(ReportRow {
                model: m.model.clone(),
                rank: k + 2,
                metrics: compute_metrics(&p, &t, hit_tolerance)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport { rows })
}

impl EvalReport {
    pub fn row(&self, model: &str, rank: usize) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.model == model && r.rank == rank).map(|r| &r.metrics)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{METRICS_CSV_HEADER}\n");
        for r in &self.rows {
            let m = &r.metrics;
            writeln!(
                s,
                "{},{},{},{:?},{:?},{:?},{:?},{:?},{:?}",
                r.model, r.rank, m.n, m.rmse_log, m.r2, m.mape_pct, m.mdape_pct, m.hit_pct, m.bias_pct
            )
            .unwrap();
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == METRICS_CSV_HEADER => {}
            _ => {
                return Err(Error::Format {
                    line: 1,
                    message: "missing metrics header".into(),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: String| Error::Format { line: i + 1, message };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(format!("expected 9 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s:?}: {e}")));
            rows.push(ReportRow {
                model: f[0].to_string(),
                rank: int(f[1])?,
                metrics: MetricRow {
                    n: int(f[2])?,
                    rmse_log: num(f[3])?,
                    r2: num(f[4])?,
                    mape_pct: num(f[5])?,
                    mdape_pct: num(f[6])?,
                    hit_pct: num(f[7])?,
                    bias_pct: num(f[8])?,
                },
            });
        }
        Ok(EvalReport { rows })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Fixed-width comparison table, one block of models per rank.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.model.len()).max().unwrap_or(5).max(5);
        let mut s = format!(
            "{:<width$} {:>4} {:>6} {:>9} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
            "model", "rank", "n", "rmse_log", "r2", "mape%", "mdape%", "hit%", "bias%"
        );
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by_key(|r| r.rank);
        for r in rows {
            let m = &r.metrics;
            writeln!(
                s,
                "{:<width$} {:>4} {:>6} {:>9.4} {:>8.4} {:>8.2} {:>8.2} {:>8.2} {:>8.2}",
                r.model, r.rank, m.n, m.rmse_log, m.r2, m.mape_pct, m.mdape_pct, m.hit_pct, m.bias_pct
            )
            .unwrap();
        }
        s.push_str("r2 and rmse on log scale; percentage errors on level scale\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn logs(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn perfect_fit() {
        let t = logs(&[100.0, 250.0, 900.0]);
        let m = compute_metrics(&t, &t, 0.1).unwrap();
        assert_eq!(
            (m.rmse_log, m.r2, m.mape_pct, m.mdape_pct, m.hit_pct, m.bias_pct),
            (0.0, 1.0, 0.0, 0.0, 100.0, 0.0)
        );
    }

    #[test]
    fn uniform_ten_percent_over() {
        let t = logs(&[100.0, 250.0, 900.0, 1234.5]);
        let p: Vec<f64> = t.iter().map(|x| x + 1.1f64.ln()).collect();
        let m = compute_metrics(&p, &t, 0.1).unwrap();
        assert!((m.mape_pct - 10.0).abs() < 1e-9);
        assert!((m.mdape_pct - 10.0).abs() < 1e-9);
        assert_eq!(m.hit_pct, 100.0);
        assert!((m.bias_pct - 10.0).abs() < 1e-9);
    }

    #[test]
    fn three_point_hand_example() {
        let m = compute_metrics(&logs(&[110.0, 180.0, 400.0]), &logs(&[100.0, 200.0, 400.0]), 0.1).unwrap();
        assert!((m.mdape_pct - 10.0).abs() < 1e-9);
        assert!((m.mape_pct - 20.0 / 3.0).abs() < 1e-9);
        // Both 10% errors sit on the inclusive boundary.
        assert!((m.hit_pct - 100.0).abs() < 1e-9);
        let lp = (1.1f64.ln() + 0.9f64.ln()) / 3.0;
        assert!((m.bias_pct - 100.0 * lp.exp_m1()).abs() < 1e-9);
        let sse = 1.1f64.ln().powi(2) + 0.9f64.ln().powi(2);
        assert!((m.rmse_log - (sse / 3.0).sqrt()).abs() < 1e-12);
        // Tightening the tolerance drops the boundary cases.
        let m = compute_metrics(&logs(&[110.0, 180.0, 400.0]), &logs(&[100.0, 200.0, 400.0]), 0.09).unwrap();
        assert!((m.hit_pct - 100.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn constant_mean_predictor_has_zero_r2() {
        let t = vec![9.1, 10.3, 11.7, 8.2, 10.0];
        let mean = t.iter().sum::<f64>() / t.len() as f64;
        let m = compute_metrics(&vec![mean; t.len()], &t, 0.1).unwrap();
        assert_eq!(m.r2, 0.0);
        let m = compute_metrics(&vec![mean + 0.5; t.len()], &t, 0.1).unwrap();
        assert!(m.r2 < 0.0);
    }

    #[test]
    fn input_errors() {
        assert!(matches!(compute_metrics(&[], &[], 0.1), Err(Error::Data(_))));
        assert!(matches!(compute_metrics(&[1.0, f64::NAN], &[1.0, 2.0], 0.1), Err(Error::Data(_))));
        assert!(matches!(compute_metrics(&[1.0], &[1.0, 2.0], 0.1), Err(Error::Dimension { .. })));
    }

    fn targets() -> BTreeMap<String, Vec<f64>> {
        (0..6).map(|i| (format!("L{i}"), vec![10.0 + 0.1 * i as f64, 9.8 + 0.12 * i as f64])).collect()
    }

    #[test]
    fn report_single_model_rank() {
        let t = targets();
        let m = ModelPredictions {
            model: "ols".into(),
            predictions: t.iter().map(|(k, v)| (k.clone(), vec![v[0] + 0.05])).collect(),
        };
        let r = assemble_report(&[m], &t, 0.1).unwrap();
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.rows[0].rank, 2);
        assert!(r.to_table().contains("ols"));
    }

    #[test]
    fn report_join_error_names_listing() {
        let t = targets();
        let mut preds: BTreeMap<String, Vec<f64>> = t.clone();
        preds.remove("L3");
        let m = ModelPredictions { model: "ts".into(), predictions: preds };
        assert_eq!(assemble_report(&[m], &t, 0.1), Err(Error::Join(vec!["L3".into()])));
    }

    #[test]
    fn csv_round_trip_matches_recomputation() {
        let t = targets();
        let mk = |name: &str, d: f64| ModelPredictions {
            model: name.into(),
            predictions: t.iter().map(|(k, v)| (k.clone(), v.iter().map(|x| x + d * x.sin()).collect())).collect(),
        };
        let r = assemble_report(&[mk("ts", 0.1), mk("de", 0.2)], &t, 0.1).unwrap();
        let back = EvalReport::from_csv(&r.to_csv()).unwrap();
        assert_eq!(back, r);
        let p: Vec<f64> = t.values().map(|v| v[1] + 0.2 * v[1].sin()).collect();
        let o: Vec<f64> = t.values().map(|v| v[1]).collect();
        let direct = compute_metrics(&p, &o, 0.1).unwrap();
        let parsed = back.row("de", 3).unwrap();
        assert!((parsed.rmse_log - direct.rmse_log).abs() < 1e-12);
        assert!((parsed.bias_pct - direct.bias_pct).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn uniform_distortion_bias(k in 0.5f64..2.0, t in prop::collection::vec(5.0f64..12.0, 1..30)) {
            let p: Vec<f64> = t.iter().map(|x| x + k.ln()).collect();
            let m = compute_metrics(&p, &t, 0.1).unwrap();
            prop_assert!((m.bias_pct - (k - 1.0) * 100.0).abs() < 1e-9);
        }

        #[test]
        fn hit_monotone_in_tolerance(
            pairs in prop::collection::vec((5.0f64..12.0, -0.5f64..0.5), 1..40),
            a in 0.0f64..0.5,
            b in 0.0f64..0.5,
        ) {
            let t: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let p: Vec<f64> = pairs.iter().map(|p| p.0 + p.1).collect();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let h_lo = compute_metrics(&p, &t, lo).unwrap().hit_pct;
            let h_hi = compute_metrics(&p, &t, hi).unwrap().hit_pct;
            prop_assert!(h_lo <= h_hi);
            prop_assert!((0.0..=100.0).contains(&h_hi));
        }
    }
}
