//! Integrated Gradients over scalar outputs of the model stack.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stage1::Stage1Model;
use crate::stage2::{rank_gradient, Decoder};
use crate::structural::StructuralModel;

pub const DEFAULT_STEPS: usize = 256;
pub const RESIDUAL_GROUP: &str = "ungrouped";

/// A differentiable scalar function of a vector.
pub trait ScalarTarget: Sync {
    fn dim(&self) -> usize;
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    fn value(&self, x: &[f64]) -> Result<f64> {
        self.value_and_grad(x).map(|v| v.0)
    }
}

/// Wraps a closure returning `(f(x), ∇f(x))`.
pub struct FnTarget<F> {
    pub dim: usize,
    pub f: F,
}

impl<F> ScalarTarget for FnTarget<F>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        (self.f)(x)
    }
}

/// One Stage-1 head output as a function of the feature vector.
pub struct Stage1Target<'a> {
    pub model: &'a Stage1Model,
    pub output: usize,
}

impl ScalarTarget for Stage1Target<'_> {
    fn dim(&self) -> usize {
        self.model.encoder.spec().input_dim()
    }
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.model.output_gradient(x, self.output)
    }
}

/// Expected log bid at one rank as a function of the embedding.
pub struct Stage2Target<'a> {
    pub decoder: &'a Decoder,
    pub model: &'a StructuralModel,
    pub rank: usize,
}

impl ScalarTarget for Stage2Target<'_> {
    fn dim(&self) -> usize {
        self.decoder.input_dim()
    }
    fn value_and_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        rank_gradient(self.decoder, self.model, x, self.rank)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    pub attributions: Vec<f64>,
    pub completeness_gap: f64,
    pub steps: usize,
    pub baseline_id: String,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl AttributionResult {
    pub fn delta(&self) -> f64 {
        self.f_input - self.f_baseline
    }

    pub fn tolerance(&self) -> f64 {
        completeness_tolerance(self.delta())
    }

    pub fn passes(&self) -> bool {
        self.completeness_gap <= self.tolerance()
    }
}

pub fn completeness_tolerance(delta: f64) -> f64 {
    f64::max(1e-3, 0.02 * delta.abs())
}

fn check_dims(target: &dyn ScalarTarget, x: &[f64], baseline: &[f64]) -> Result<()> {
    if x.len() != target.dim() {
        return Err(Error::dim(target.dim(), x.len(), "attribution input"));
    }
    if baseline.len() != x.len() {
        return Err(Error::dim(x.len(), baseline.len(), "attribution baseline"));
    }
    Ok(())
}

/// Midpoint-rule path integral of the gradient from `baseline` to `x`.
pub fn integrated_gradients(
    target: &dyn ScalarTarget,
    x: &[f64],
    baseline: &[f64],
    steps: usize,
    baseline_id: &str,
) -> Result<AttributionResult> {
    check_dims(target, x, baseline)?;
    if steps == 0 {
        return Err(Error::InvalidParameter("integrated gradients needs at least one step".into()));
    }
    let diff: Vec<f64> = x.iter().zip(baseline).map(|(a, b)| a - b).collect();
    let grads = (0..steps)
        .into_par_iter()
        .map(|k| {
            let a = (k as f64 + 0.5) / steps as f64;
            let point: Vec<f64> = baseline.iter().zip(&diff).map(|(b, d)| b + a * d).collect();
            let (_, g) = target.value_and_grad(&point)?;
            if g.len() != x.len() {
                return Err(Error::dim(x.len(), g.len(), "target gradient"));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient on path step {k}")));
            }
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sum = vec![0.0; x.len()];
    for g in &grads {
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let attributions: Vec<f64> = sum.iter().zip(&diff).map(|(s, d)| d * s / steps as f64).collect();
    let f_input = target.value(x)?;
    let f_baseline = target.value(baseline)?;
    let gap = (attributions.iter().sum::<f64>() - (f_input - f_baseline)).abs();
    Ok(AttributionResult {
        attributions,
        completeness_gap: gap,
        steps,
        baseline_id: baseline_id.to_string(),
        f_input,
        f_baseline,
    })
}

/// Re-evaluates the endpoints and checks the attribution sum against them.
pub fn check_completeness(result: &AttributionResult, target: &dyn ScalarTarget, x: &[f64], baseline: &[f64]) -> Result<bool> {
    check_dims(target, x, baseline)?;
    if result.attributions.len() != x.len() {
        return Err(Error::dim(x.len(), result.attributions.len(), "attributions"));
    }
    let delta = target.value(x)? - target.value(baseline)?;
    let gap = (result.attributions.iter().sum::<f64>() - delta).abs();
    Ok(gap <= completeness_tolerance(delta))
}

/// Sums attributions over disjoint index groups. Indices left out of every
/// group are summed under [`RESIDUAL_GROUP`].
pub fn aggregate_groups(result: &AttributionResult, groups: &[(String, Vec<usize>)]) -> Result<Vec<(String, f64)>> {
    let n = result.attributions.len();
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(groups.len() + 1);
    for (name, idx) in groups {
        let mut total = 0.0;
        for &i in idx {
            if i >= n {
                return Err(Error::dim(n, i + 1, format!("group {name:?} index")));
            }
            if !seen.insert(i) {
                return Err(Error::InvalidParameter(format!("index {i} appears in more than one group")));
            }
            total += result.attributions[i];
        }
        out.push((name.clone(), total));
    }
    if seen.len() < n {
        let rest = (0..n).filter(|i| !seen.contains(i)).map(|i| result.attributions[i]).sum();
        out.push((RESIDUAL_GROUP.to_string(), rest));
    }
    Ok(out)
}

impl AttributionResult {
    /// Per-index CSV preceded by a `#` header with the run summary.
    pub fn to_csv(&self, labels: &[String]) -> String {
        let mut s = self.csv_header();
        s.push_str("index,label,attribution\n");
        for (i, a) in self.attributions.iter().enumerate() {
            let label = labels.get(i).map(String::as_str).unwrap_or("");
            writeln!(s, "{i},{label},{a:?}").unwrap();
        }
        s
    }

    pub fn groups_csv(&self, groups: &[(String, f64)]) -> String {
        let mut s = self.csv_header();
        s.push_str("group,attribution\n");
        for (g, a) in groups {
            writeln!(s, "{g},{a:?}").unwrap();
        }
        s
    }

    fn csv_header(&self) -> String {
        format!(
            "# steps={} baseline={} f_input={:?} f_baseline={:?} completeness_gap={:?} pass={}\n",
            self.steps,
            self.baseline_id,
            self.f_input,
            self.f_baseline,
            self.completeness_gap,
            self.passes()
        )
    }

    pub fn write_csv(&self, path: &Path, labels: &[String]) -> Result<()> {
        std::fs::write(path, self.to_csv(labels))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn linear(w: Vec<f64>) -> FnTarget<impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync> {
        let dim = w.len();
        FnTarget {
            dim,
            f: move |x: &[f64]| Ok((x.iter().zip(&w).map(|(a, b)| a * b).sum(), w.clone())),
        }
    }

    fn square() -> FnTarget<impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync> {
        FnTarget {
            dim: 1,
            f: |x: &[f64]| Ok((x[0] * x[0], vec![2.0 * x[0]])),
        }
    }

    fn cubic() -> FnTarget<impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync> {
        FnTarget {
            dim: 1,
            f: |x: &[f64]| Ok((x[0].powi(3), vec![3.0 * x[0] * x[0]])),
        }
    }

    #[test]
    fn linear_is_exact() {
        let w = vec![0.5, -2.0, 3.25];
        let x = [1.0, 0.7, -4.0];
        let r = integrated_gradients(&linear(w.clone()), &x, &[0.0; 3], DEFAULT_STEPS, "zero").unwrap();
        for i in 0..3 {
            assert!((r.attributions[i] - w[i] * x[i]).abs() < 1e-12);
        }
        assert!(r.completeness_gap < 1e-12);
        assert!(check_completeness(&r, &linear(w), &x, &[0.0; 3]).unwrap());
    }

    #[test]
    fn constant_gives_zeros() {
        let t = FnTarget {
            dim: 2,
            f: |_: &[f64]| Ok((4.0, vec![0.0, 0.0])),
        };
        let r = integrated_gradients(&t, &[1.0, 2.0], &[0.0, 0.0], 16, "zero").unwrap();
        assert_eq!(r.attributions, vec![0.0, 0.0]);
    }

    #[test]
    fn square_path_integral() {
        let r = integrated_gradients(&square(), &[3.0], &[0.0], DEFAULT_STEPS, "zero").unwrap();
        assert!((r.attributions[0] - 9.0).abs() < 1e-3);
        assert!(r.completeness_gap <= completeness_tolerance(9.0));
        assert!(r.passes());
        assert!(check_completeness(&r, &square(), &[3.0], &[0.0]).unwrap());
    }

    #[test]
    fn coarse_cubic_fails_check() {
        // Two midpoints at 1/4 and 3/4 of the path.
        let x = 2.0;
        let r = integrated_gradients(&cubic(), &[x], &[0.0], 2, "zero").unwrap();
        let hand = x * 0.5 * (3.0 * (0.25 * x).powi(2) + 3.0 * (0.75 * x).powi(2));
        assert!((r.attributions[0] - hand).abs() < 1e-12);
        // hand = 7.5 against f(x) = 8, a gap of 0.5 above the 0.16 tolerance.
        assert!((r.completeness_gap - 0.5).abs() < 1e-12);
        assert!(!r.passes());
        assert!(!check_completeness(&r, &cubic(), &[x], &[0.0]).unwrap());
    }

    #[test]
    fn groups() {
        let w = vec![1.0, 2.0, 3.0, 4.0];
        let x = [1.0, 1.0, 2.0, 0.5];
        let r = integrated_gradients(&linear(w), &x, &[0.0; 4], 8, "zero").unwrap();
        let single: Vec<(String, Vec<usize>)> = (0..4).map(|i| (format!("g{i}"), vec![i])).collect();
        let agg = aggregate_groups(&r, &single).unwrap();
        assert_eq!(agg.iter().map(|g| g.1).collect::<Vec<_>>(), r.attributions);
        let all = aggregate_groups(&r, &[("all".into(), vec![0, 1, 2, 3])]).unwrap();
        assert_eq!(all.len(), 1);
        assert!((all[0].1 - r.attributions.iter().sum::<f64>()).abs() < 1e-12);
        let two = aggregate_groups(&r, &[("a".into(), vec![0, 2]), ("b".into(), vec![1, 3])]).unwrap();
        assert!((two[0].1 - 7.0).abs() < 1e-12 && (two[1].1 - 4.0).abs() < 1e-12);
        let partial = aggregate_groups(&r, &[("a".into(), vec![0])]).unwrap();
        assert_eq!(partial[1].0, RESIDUAL_GROUP);
        assert!((partial[1].1 - 10.0).abs() < 1e-12);
        assert!(aggregate_groups(&r, &[("a".into(), vec![0, 1]), ("b".into(), vec![1])]).is_err());
    }

    #[test]
    fn dimension_errors() {
        assert!(integrated_gradients(&square(), &[1.0, 2.0], &[0.0, 0.0], 4, "zero").is_err());
        assert!(integrated_gradients(&linear(vec![1.0, 1.0]), &[1.0, 2.0], &[0.0], 4, "zero").is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let r = integrated_gradients(&linear(vec![1.0, 2.0]), &[1.0, 1.0], &[0.0, 0.0], 4, "zero").unwrap();
        let csv = r.to_csv(&["a".into(), "b".into()]);
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# steps=4 baseline=zero"));
        assert_eq!(lines.next(), Some("index,label,attribution"));
        assert_eq!(lines.next(), Some("0,a,1.0"));
    }

    fn smooth() -> FnTarget<impl Fn(&[f64]) -> Result<(f64, Vec<f64>)> + Sync> {
        FnTarget {
            dim: 3,
            f: |x: &[f64]| {
                let s = x[0] * x[1] + x[2].sin();
                Ok((s.exp(), vec![s.exp() * x[1], s.exp() * x[0], s.exp() * x[2].cos()]))
            },
        }
    }

    proptest! {
        #[test]
        fn gap_shrinks_with_steps(
            x in prop::collection::vec(-1.0f64..1.0, 3),
            k in 2usize..64,
        ) {
            let base = [0.0; 3];
            let a = integrated_gradients(&smooth(), &x, &base, k, "zero").unwrap();
            let b = integrated_gradients(&smooth(), &x, &base, 2 * k, "zero").unwrap();
            prop_assert!(b.completeness_gap <= a.completeness_gap + 1e-12);
        }

        #[test]
        fn permutation_symmetry(x in prop::collection::vec(-2.0f64..2.0, 3), w in prop::collection::vec(-2.0f64..2.0, 3)) {
            // f(x) = Σ w_i x_i² is symmetric under a joint permutation of w and x.
            let make = |w: Vec<f64>| FnTarget {
                dim: 3,
                f: move |x: &[f64]| Ok((
                    x.iter().zip(&w).map(|(a, b)| b * a * a).sum(),
                    x.iter().zip(&w).map(|(a, b)| 2.0 * b * a).collect(),
                )),
            };
            let perm = [2usize, 0, 1];
            let xp: Vec<f64> = perm.iter().map(|&i| x[i]).collect();
            let wp: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
            let a = integrated_gradients(&make(w.clone()), &x, &[0.0; 3], 32, "zero").unwrap();
            let b = integrated_gradients(&make(wp), &xp, &[0.0; 3], 32, "zero").unwrap();
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((b.attributions[j] - a.attributions[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn self_baseline_is_zero(x in prop::collection::vec(-2.0f64..2.0, 3)) {
            let r = integrated_gradients(&smooth(), &x, &x, 16, "self").unwrap();
            prop_assert!(r.attributions.iter().all(|&a| a == 0.0));
        }
    }
}
