//! Pooled-OLS hedonic baseline for the log price-setting bid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::encoder::ListingFeatures;
use crate::error::{Error, Result};
use crate::simulator::AuctionRecord;

const CONTINUOUS: [&str; 6] = ["intercept", "log_mileage", "log_horsepower", "age", "time_trend", "automatic"];
const POOLED_COHORT: &str = "other";

/// Which dummy blocks enter the regression and their omitted levels.
/// `None` drops the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HedonicSpec {
    pub cylinder_reference: Option<u32>,
    pub year_reference: Option<u32>,
    /// Brands with at least this many training rows get their own cohort;
    /// rarer brands share the pooled reference cohort.
    pub cohort_cutoff: Option<usize>,
}

impl Default for HedonicSpec {
    fn default() -> Self {
        HedonicSpec {
            cylinder_reference: Some(2),
            year_reference: Some(2014),
            cohort_cutoff: Some(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DummyBlock<T> {
    pub reference: T,
    pub levels: Vec<T>,
}

impl<T: PartialEq + Copy> DummyBlock<T> {
    fn encode(&self, v: T, out: &mut Vec<f64>) -> bool {
        out.extend(self.levels.iter().map(|&l| if l == v { 1.0 } else { 0.0 }));
        v == self.reference || self.levels.contains(&v)
    }
}

fn block<T: Ord + Copy>(values: impl Iterator<Item = T>, reference: T) -> DummyBlock<T> {
    let mut levels: Vec<T> = values.filter(|&x| x != reference).collect();
    levels.sort();
    levels.dedup();
    DummyBlock { reference, levels }
}

/// Dummy levels learned from the training listings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedonicLayout {
    pub cylinders: Option<DummyBlock<u32>>,
    pub years: Option<DummyBlock<u32>>,
    /// Brands with their own cohort column.
    pub cohorts: Option<Vec<String>>,
    pub cohort_reference: Option<String>,
    pub known_brands: Vec<String>,
    pub columns: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    pub x: DMatrix<f64>,
    pub columns: Vec<String>,
}

impl HedonicLayout {
    pub fn fit<'a>(features: impl IntoIterator<Item = &'a ListingFeatures>, spec: &HedonicSpec) -> Result<Self> {
        let rows: Vec<&ListingFeatures> = features.into_iter().collect();
        if rows.is_empty() {
            return Err(Error::Data("no listings for the hedonic design".into()));
        }
        let cylinders = spec.cylinder_reference.map(|r| block(rows.iter().map(|f| f.cylinders), r));
        let years = spec.year_reference.map(|r| block(rows.iter().map(|f| f.sale_year), r));
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for f in &rows {
            *counts.entry(f.brand.as_str()).or_default() += 1;
        }
        let (cohorts, cohort_reference) = match spec.cohort_cutoff {
            None => (None, None),
            Some(cut) => {
                let frequent: Vec<String> =
                    counts.iter().filter(|(_, &n)| n >= cut).map(|(b, _)| b.to_string()).collect();
                if frequent.len() == counts.len() {
                    // Nothing to pool: the first brand is omitted instead.
                    (Some(frequent[1..].to_vec()), Some(frequent[0].clone()))
                } else {
                    (Some(frequent), Some(POOLED_COHORT.to_string()))
                }
            }
        };
        let mut columns: Vec<String> = CONTINUOUS.iter().map(|s| s.to_string()).collect();
        if let Some(b) = &cylinders {
            columns.extend(b.levels.iter().map(|c| format!("cyl_{c}")));
        }
        if let Some(b) = &years {
            columns.extend(b.levels.iter().map(|y| format!("year_{y}")));
        }
        if let Some(c) = &cohorts {
            columns.extend(c.iter().map(|b| format!("cohort_{b}")));
        }
        Ok(HedonicLayout {
            cylinders,
            years,
            cohorts,
            cohort_reference,
            known_brands: counts.keys().map(|s| s.to_string()).collect(),
            columns,
        })
    }

    pub fn row(&self, f: &ListingFeatures) -> Result<Vec<f64>> {
        f.validate()?;
        let mut r = vec![
            1.0,
            f.log_mileage(),
            f.horsepower.ln(),
            f.age,
            f.sale_time,
            if f.automatic { 1.0 } else { 0.0 },
        ];
        if let Some(b) = &self.cylinders {
            if !b.encode(f.cylinders, &mut r) {
                return Err(Error::Data(format!("cylinder count {} not seen in training", f.cylinders)));
            }
        }
        if let Some(b) = &self.years {
            if !b.encode(f.sale_year, &mut r) {
                return Err(Error::Data(format!("sale year {} not seen in training", f.sale_year)));
            }
        }
        if let Some(cohorts) = &self.cohorts {
            if !self.known_brands.contains(&f.brand) {
                log::warn!("brand {:?} unseen in training; using the reference cohort", f.brand);
            }
            r.extend(cohorts.iter().map(|b| if *b == f.brand { 1.0 } else { 0.0 }));
        }
        Ok(r)
    }

    pub fn design<'a>(&self, features: impl IntoIterator<Item = &'a ListingFeatures>) -> Result<Design> {
        let rows = features.into_iter().map(|f| self.row(f)).collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Err(Error::Data("empty design".into()));
        }
        let x = DMatrix::from_fn(rows.len(), self.columns.len(), |i, j| rows[i][j]);
        Ok(Design {
            x,
            columns: self.columns.clone(),
        })
    }
}

/// Log of the price-setting (second-highest) bid.
pub fn log_price(record: &AuctionRecord) -> Result<f64> {
    record
        .observed_log_bids(2)
        .map(|v| v[0])
        .ok_or_else(|| Error::Data(format!("{}: fewer than two bids", record.listing_id)))
}

/// Layout, design matrix and target for a set of training records.
pub fn build_design(records: &[AuctionRecord], spec: &HedonicSpec) -> Result<(HedonicLayout, Design, DVector<f64>)> {
    let layout = HedonicLayout::fit(records.iter().map(|r| &r.features), spec)?;
    let design = layout.design(records.iter().map(|r| &r.features))?;
    let y = records.iter().map(log_price).collect::<Result<Vec<_>>>()?;
    Ok((layout, design, DVector::from_vec(y)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub columns: Vec<String>,
    pub beta: Vec<f64>,
    pub robust_se: Vec<f64>,
    pub classical_se: Vec<f64>,
    pub r2: f64,
    pub rmse: f64,
    pub n: usize,
}

/// Columns that are linear combinations of other columns, found by
/// Gram-Schmidt on unit-scaled columns. Each dependent column is reported
/// together with the earlier columns it is built from.
fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    const TOL: f64 = 1e-10;
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut basis_cols: Vec<usize> = Vec::new();
    let mut bad: Vec<usize> = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        if norm == 0.0 {
            bad.push(j);
            continue;
        }
        let mut v = col / norm;
        for _ in 0..2 {
            for q in &basis {
                let d = q.dot(&v);
                v -= q * d;
            }
        }
        let rest = v.norm();
        if rest < TOL.sqrt() {
            bad.push(j);
            // Coefficients of the dependency on the independent columns.
            let sub = DMatrix::from_fn(x.nrows(), basis_cols.len(), |i, k| x[(i, basis_cols[k])]);
            if let Ok(c) = sub.clone().svd(true, true).solve(&x.column(j).into_owned(), 1e-12) {
                let scale = x.column(j).norm();
                for (k, &cj) in basis_cols.iter().enumerate() {
                    if (c[k] * sub.column(k).norm()).abs() > 1e-8 * scale {
                        bad.push(cj);
                    }
                }
            }
        } else {
            basis.push(v / rest);
            basis_cols.push(j);
        }
    }
    bad.sort();
    bad.dedup();
    bad.into_iter().map(|j| names[j].clone()).collect()
}

/// Least squares through a thin QR factorization, with HC1 robust errors.
pub fn fit_ols(design: &Design, y: &DVector<f64>) -> Result<OlsFit> {
    let x = &design.x;
    let (n, p) = x.shape();
    if design.columns.len() != p {
        return Err(Error::dim(p, design.columns.len(), "design column names"));
    }
    if y.len() != n {
        return Err(Error::dim(n, y.len(), "ols target"));
    }
    if n <= p {
        return Err(Error::Data(format!("{n} rows for {p} columns")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite design entry".into()));
    }
    let bad = collinear_columns(x, &design.columns);
    if !bad.is_empty() {
        return Err(Error::RankDeficient(bad));
    }
    let qr = x.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let qty = q.transpose() * y;
    let beta = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let fitted = x * &beta;
    let resid = y - &fitted;
    let sse = resid.norm_squared();
    let mean = y.mean();
    let sst: f64 = y.iter().map(|v| (v - mean) * (v - mean)).sum();
    let r_inv = r
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular triangular factor".into()))?;
    let bread = &r_inv * r_inv.transpose();
    let mut meat = DMatrix::<f64>::zeros(p, p);
    for i in 0..n {
        let xi = x.row(i).transpose();
        meat += (&xi * xi.transpose()) * (resid[i] * resid[i]);
    }
    let dof = (n - p) as f64;
    let hc1 = &bread * meat * &bread * (n as f64 / dof);
    let s2 = sse / dof;
    Ok(OlsFit {
        columns: design.columns.clone(),
        beta: beta.iter().copied().collect(),
        robust_se: (0..p).map(|j| hc1[(j, j)].max(0.0).sqrt()).collect(),
        classical_se: (0..p).map(|j| (bread[(j, j)] * s2).max(0.0).sqrt()).collect(),
        r2: if sst > 0.0 { 1.0 - sse / sst } else { 1.0 },
        rmse: (sse / n as f64).sqrt(),
        n,
    })
}

pub fn predict_ols(fit: &OlsFit, design: &Design) -> Result<Vec<f64>> {
    if design.columns != fit.columns {
        return Err(Error::Data(format!(
            "design columns {:?} do not match fitted columns {:?}",
            design.columns, fit.columns
        )));
    }
    let beta = DVector::from_column_slice(&fit.beta);
    Ok((&design.x * beta).iter().copied().collect())
}

/// Largest `|x_jᵀ r|` scaled by the column and target norms.
pub fn residual_orthogonality(design: &Design, y: &DVector<f64>, fit: &OlsFit) -> f64 {
    let beta = DVector::from_column_slice(&fit.beta);
    let r = y - &design.x * beta;
    let scale = y.norm().max(1.0);
    (0..design.x.ncols())
        .map(|j| {
            let c = design.x.column(j);
            c.dot(&r).abs() / (c.norm().max(1e-300) * scale)
        })
        .fold(0.0, f64::max)
}

impl OlsFit {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.columns.iter().position(|c| c == name).map(|i| self.beta[i])
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("term,estimate,robust_se\n");
        for ((c, b), se) in self.columns.iter().zip(&self.beta).zip(&self.robust_se) {
            writeln!(s, "{c},{b:?},{se:?}").unwrap();
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::GroundTruthMap;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn listing(cyl: u32, year: u32, brand: &str) -> ListingFeatures {
        let mut f = GroundTruthMap::reference_features();
        f.cylinders = cyl;
        f.sale_year = year;
        f.brand = brand.into();
        f
    }

    fn no_blocks() -> HedonicSpec {
        HedonicSpec {
            cylinder_reference: None,
            year_reference: None,
            cohort_cutoff: None,
        }
    }

    #[test]
    fn continuous_row() {
        let f = listing(6, 2019, "porsche");
        let l = HedonicLayout::fit([&f], &no_blocks()).unwrap();
        let r = l.row(&f).unwrap();
        assert_eq!(r, vec![1.0, 50_001f64.ln(), 300f64.ln(), 30.0, 0.5, 0.0]);
    }

    #[test]
    fn cylinder_dummies_differ_in_one_block() {
        let a = listing(4, 2019, "bmw");
        let b = listing(8, 2019, "bmw");
        let l = HedonicLayout::fit([&a, &b, &listing(2, 2014, "bmw")], &HedonicSpec::default()).unwrap();
        let (ra, rb) = (l.row(&a).unwrap(), l.row(&b).unwrap());
        let diff: Vec<&String> = l.columns.iter().zip(ra.iter().zip(&rb)).filter(|(_, (x, y))| x != y).map(|(c, _)| c).collect();
        assert_eq!(diff, vec!["cyl_4", "cyl_8"]);
    }

    #[test]
    fn column_count_identity() {
        let fs = vec![
            listing(2, 2014, "bmw"),
            listing(4, 2015, "bmw"),
            listing(6, 2016, "audi"),
            listing(6, 2014, "ford"),
        ];
        let spec = HedonicSpec {
            cohort_cutoff: Some(1),
            ..HedonicSpec::default()
        };
        let l = HedonicLayout::fit(&fs, &spec).unwrap();
        // 3 cylinder levels, 3 years, 3 cohorts.
        assert_eq!(l.columns.len(), 6 + 2 + 2 + 2);
        assert_eq!(l.cohort_reference.as_deref(), Some("audi"));
    }

    #[test]
    fn unseen_categories() {
        let fs = vec![listing(2, 2014, "bmw"), listing(4, 2015, "bmw")];
        let l = HedonicLayout::fit(&fs, &HedonicSpec { cohort_cutoff: Some(1), ..Default::default() }).unwrap();
        assert!(matches!(l.row(&listing(12, 2014, "bmw")), Err(Error::Data(_))));
        assert!(matches!(l.row(&listing(2, 2020, "bmw")), Err(Error::Data(_))));
        // Unseen brand falls back to the reference cohort.
        let r = l.row(&listing(2, 2014, "dmc")).unwrap();
        assert_eq!(r.len(), l.columns.len());
        assert!(r[6..].iter().all(|&v| v == 0.0));
    }

    fn design_from(rows: Vec<Vec<f64>>, names: &[&str]) -> Design {
        Design {
            x: DMatrix::from_fn(rows.len(), names.len(), |i, j| rows[i][j]),
            columns: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn intercept_only_is_mean() {
        let d = design_from(vec![vec![1.0]; 4], &["intercept"]);
        let y = DVector::from_vec(vec![1.0, 2.0, 4.0, 9.0]);
        let fit = fit_ols(&d, &y).unwrap();
        assert!((fit.beta[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn planted_model_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let beta = [0.7, -1.3, 2.1, 0.05];
        let rows: Vec<Vec<f64>> = (0..60)
            .map(|_| vec![1.0, rng.random_range(-2.0..2.0), rng.random_range(0.0..5.0), rng.random_range(-9.0..9.0)])
            .collect();
        let y = DVector::from_iterator(60, rows.iter().map(|r| r.iter().zip(&beta).map(|(a, b)| a * b).sum()));
        let d = design_from(rows.clone(), &["intercept", "a", "b", "c"]);
        let fit = fit_ols(&d, &y).unwrap();
        for (b, t) in fit.beta.iter().zip(&beta) {
            assert!((b - t).abs() < 1e-8);
        }
        assert!((fit.r2 - 1.0).abs() < 1e-12);
        assert!(residual_orthogonality(&d, &y, &fit) < 1e-8);
        let pred = predict_ols(&fit, &d).unwrap();
        for (p, t) in pred.iter().zip(y.iter()) {
            assert!((p - t).abs() < 1e-12);
        }
        // Held-out rows.
        let held = design_from(vec![vec![1.0, 0.3, 4.4, -7.0]], &["intercept", "a", "b", "c"]);
        let expect: f64 = [1.0, 0.3, 4.4, -7.0].iter().zip(&beta).map(|(a, b)| a * b).sum();
        assert!((predict_ols(&fit, &held).unwrap()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, i as f64, (i * i) as f64, i as f64]).collect();
        let d = design_from(rows, &["intercept", "a", "b", "a_copy"]);
        let y = DVector::from_fn(10, |i, _| i as f64);
        assert_eq!(
            fit_ols(&d, &y),
            Err(Error::RankDeficient(vec!["a".into(), "a_copy".into()]))
        );
    }

    #[test]
    fn misaligned_prediction_rejected() {
        let d = design_from(vec![vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 4.0]], &["intercept", "a"]);
        let fit = fit_ols(&d, &DVector::from_vec(vec![1.0, 2.0, 2.5])).unwrap();
        let other = design_from(vec![vec![1.0, 3.0]], &["intercept", "b"]);
        assert!(matches!(predict_ols(&fit, &other), Err(Error::Data(_))));
    }

    #[test]
    fn all_reference_row_uses_continuous_terms_only() {
        let fs = vec![listing(2, 2014, "bmw"), listing(4, 2015, "audi"), listing(8, 2016, "bmw")];
        let l = HedonicLayout::fit(&fs, &HedonicSpec { cohort_cutoff: Some(1), ..Default::default() }).unwrap();
        let fit = OlsFit {
            columns: l.columns.clone(),
            beta: (0..l.columns.len()).map(|i| 1.0 + i as f64).collect(),
            robust_se: vec![0.0; l.columns.len()],
            classical_se: vec![0.0; l.columns.len()],
            r2: 1.0,
            rmse: 0.0,
            n: 3,
        };
        let f = listing(2, 2014, "audi");
        let row = l.row(&f).unwrap();
        let expect: f64 = row[..6].iter().zip(&fit.beta).map(|(a, b)| a * b).sum();
        let p = predict_ols(&fit, &l.design([&f]).unwrap()).unwrap()[0];
        assert!((p - expect).abs() < 1e-12);
    }

    #[test]
    fn hc1_matches_classical_under_homoskedastic_noise() {
        use rand_distr::{Distribution, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let n = 10_000;
        let rows: Vec<Vec<f64>> = (0..n).map(|_| vec![1.0, rng.random_range(-1.0..1.0), rng.random_range(0.0..3.0)]).collect();
        let y = DVector::from_iterator(n, rows.iter().map(|r| 0.2 + r[1] - 0.5 * r[2] + noise.sample(&mut rng)));
        let fit = fit_ols(&design_from(rows, &["intercept", "a", "b"]), &y).unwrap();
        for (h, c) in fit.robust_se.iter().zip(&fit.classical_se) {
            assert!((h / c - 1.0).abs() < 0.05, "{h} vs {c}");
        }
    }

    #[test]
    fn coefficient_csv() {
        let d = design_from(vec![vec![1.0, 1.0], vec![1.0, 2.0], vec![1.0, 4.0]], &["intercept", "a"]);
        let fit = fit_ols(&d, &DVector::from_vec(vec![1.0, 2.0, 2.5])).unwrap();
        let csv = fit.to_csv();
        assert!(csv.starts_with("term,estimate,robust_se\nintercept,"));
        assert_eq!(csv.lines().count(), 3);
    }
}
