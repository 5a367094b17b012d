//! The structural pricing model.
//!
//! Bidder counts are drawn from the market-size PMF and valuations i.i.d.
//! from the valuation density. Conditional on `n`, the `j`-th largest
//! valuation has density
//!
//! ```text
//! n! / ((j-1)! (n-j)!) f(v) F(v)^(n-j) (1 - F(v))^(j-1)
//! ```
//!
//! Its mean is computed after the substitution `u = F(v)`, which turns it
//! into a one-dimensional integral of the quantile function against a Beta
//! kernel. The kernel depends only on `(n, j)` and the point set, so it is
//! tabulated once per [`StructuralModel`] and every prediction reduces to a
//! batch of quantile solves plus a handful of dot products.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::primitives::{softmax, BidderGrid, MarketSizeParams, ValuationParams};
use crate::sobol;

/// Highest rank whose expectation is predicted by default (bids 2 through 5).
pub const DEFAULT_J_MAX: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum QuadratureScheme {
    #[default]
    Sobol1d,
    UniformMidpoint,
}

/// Point set used for the order-statistic integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub points: usize,
    pub scheme: QuadratureScheme,
    /// Nodes are clipped into `[epsilon_clip, 1 - epsilon_clip]`.
    pub epsilon_clip: f64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            points: 512,
            scheme: QuadratureScheme::Sobol1d,
            epsilon_clip: 1e-6,
        }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points < 16 {
            return Err(Error::Config(format!(
                "quadrature needs at least 16 points, got {}",
                self.points
            )));
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 0.01) {
            return Err(Error::Config(format!(
                "epsilon_clip must lie in (0, 0.01), got {}",
                self.epsilon_clip
            )));
        }
        Ok(())
    }

    /// Sorted nodes in `(0, 1)`.
    pub fn nodes(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.points;
        let mut nodes = match self.scheme {
            // Sobol' prefixes shorter than 32 points are too coarse to beat the midpoint rule.
            QuadratureScheme::Sobol1d if n >= 32 => sobol::centered_points(n),
            _ => (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect(),
        };
        let eps = self.epsilon_clip;
        for u in nodes.iter_mut() {
            *u = u.clamp(eps, 1.0 - eps);
        }
        nodes.sort_by(f64::total_cmp);
        Ok(nodes)
    }
}

/// How ranks above the realized market size enter the mixture over `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CensoringRule {
    /// A market of `n < j` contributes its lowest order statistic `E[V_(n) | n]`.
    #[default]
    LowestExisting,
    /// Markets with `n < j` are dropped and the remaining weights renormalized.
    DropRenormalize,
}

/// Expected log bids for ranks `2..=j_max`, plus the censored rank-1 value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidPrediction {
    /// `E[V_(1)]`. The winner's valuation is censored in an English auction,
    /// so this entry is advisory and never enters a loss.
    pub rank1_advisory: f64,
    /// Entry `i` holds rank `i + 2`.
    pub expected_log_bids: Vec<f64>,
}

impl BidPrediction {
    pub fn j_max(&self) -> usize {
        self.expected_log_bids.len() + 1
    }

    /// Expected log bid at `rank`, including the advisory rank 1.
    pub fn rank(&self, rank: usize) -> Option<f64> {
        match rank {
            0 => None,
            1 => Some(self.rank1_advisory),
            r => self.expected_log_bids.get(r - 2).copied(),
        }
    }
}

/// Jacobian of the rank-2..=j_max predictions with respect to the flattened
/// parameter vector `(mu, sigma, alpha_1..alpha_kappa, rho_1..rho_|B|)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralJacobian {
    pub rows: usize,
    pub cols: usize,
    pub kappa: usize,
    /// Row-major, one row per rank starting at rank 2.
    pub data: Vec<f64>,
}

impl StructuralJacobian {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// `J^T g` for an output-space gradient `g`.
    pub fn transpose_mul(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, gr) in g.iter().enumerate().take(self.rows) {
            for (o, j) in out.iter_mut().zip(self.row(r)) {
                *o += gr * j;
            }
        }
        out
    }
}

fn ln_binomial_kernel(n: usize, j: usize) -> f64 {
    ln_gamma(n as f64 + 1.0) - ln_gamma(j as f64) - ln_gamma((n - j) as f64 + 1.0)
}

fn check_rank(n: usize, j: usize) -> Result<()> {
    if j < 1 || j > n {
        return Err(Error::Domain(format!(
            "order statistic rank must satisfy 1 <= j <= n, got j={j}, n={n}"
        )));
    }
    Ok(())
}

/// Density of the `j`-th largest of `n` i.i.d. valuations at `v`.
pub fn order_stat_pdf(p: &ValuationParams, n: usize, j: usize, v: f64) -> Result<f64> {
    check_rank(n, j)?;
    let (cdf, pdf) = p.cdf_pdf(v);
    if pdf == 0.0 {
        return Ok(0.0);
    }
    let log_tail = (n - j) as f64 * cdf.ln() + (j - 1) as f64 * (1.0 - cdf).ln();
    let mut out = (ln_binomial_kernel(n, j) + log_tail).exp() * pdf;
    if !out.is_finite() {
        out = 0.0;
    }
    Ok(out)
}

/// Beta-kernel weights for `(n, j)` on `nodes`, renormalized to sum to one
/// so constants are integrated exactly and location shifts pass through
/// unchanged.
fn kernel_weights(nodes: &[f64], n: usize, j: usize) -> Vec<f64> {
    let (start, w) = trimmed_kernel(nodes, n, j);
    let mut full = vec![0.0; nodes.len()];
    full[start..start + w.len()].copy_from_slice(&w);
    full
}

/// Kernel restricted to the contiguous node range carrying relative weight
/// above 1e-18 (the kernel is unimodal in `u`), renormalized over that range.
fn trimmed_kernel(nodes: &[f64], n: usize, j: usize) -> (usize, Vec<f64>) {
    let w = raw_kernel(nodes, n, j);
    let peak = w.iter().cloned().fold(0.0, f64::max);
    let keep = |x: &f64| *x > 1e-18 * peak;
    let start = w.iter().position(keep).unwrap_or(0);
    let end = w.iter().rposition(keep).map_or(w.len(), |e| e + 1);
    let mut kept = w[start..end].to_vec();
    let total: f64 = kept.iter().sum();
    for x in kept.iter_mut() {
        *x /= total;
    }
    (start, kept)
}

fn raw_kernel(nodes: &[f64], n: usize, j: usize) -> Vec<f64> {
    let lc = ln_binomial_kernel(n, j);
    let a = (n - j) as f64;
    let b = (j - 1) as f64;
    let w: Vec<f64> = nodes
        .iter()
        .map(|&u| (lc + a * u.ln() + b * (1.0 - u).ln()).exp())
        .collect();
    w
}

/// `E[V_(j) | n]` for a single `(n, j)`.
pub fn expected_order_stat_given_n(
    p: &ValuationParams,
    n: usize,
    j: usize,
    q: &QuadratureConfig,
) -> Result<f64> {
    check_rank(n, j)?;
    let nodes = q.nodes()?;
    let quantiles = p.quantiles_sorted(&nodes)?;
    let w = kernel_weights(&nodes, n, j);
    Ok(dot(&w, &quantiles))
}

/// Expected log bids under the mixture over market sizes.
pub fn expected_order_stats_unconditional(
    p: &ValuationParams,
    m: &MarketSizeParams,
    j_max: usize,
    q: &QuadratureConfig,
) -> Result<BidPrediction> {
    StructuralModel::new(m.grid(), j_max, q, CensoringRule::default())?.predict(p, m)
}

/// Finite-difference Jacobian of the expected log bids.
pub fn structural_gradient(
    p: &ValuationParams,
    m: &MarketSizeParams,
    j_max: usize,
    q: &QuadratureConfig,
) -> Result<StructuralJacobian> {
    StructuralModel::new(m.grid(), j_max, q, CensoringRule::default())?.jacobian(p, m)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Precomputed quadrature for a fixed bidder grid and rank depth.
#[derive(Debug, Clone)]
pub struct StructuralModel {
    grid: BidderGrid,
    j_max: usize,
    censoring: CensoringRule,
    nodes: Vec<f64>,
    /// Trimmed kernels `(first node, weights)` indexed by
    /// `(n - n_min) * j_max + (j - 1)`; `None` for `j > n`.
    kernels: Vec<Option<(usize, Vec<f64>)>>,
}

/// `E[V_(j) | n]` for every grid count and rank, after applying the censoring rule.
#[derive(Debug, Clone)]
pub struct ConditionalTable {
    j_max: usize,
    /// `(n - n_min) * j_max + (j - 1)`; `None` for `j > n`.
    values: Vec<Option<f64>>,
}

impl ConditionalTable {
    pub fn get(&self, n_offset: usize, j: usize) -> Option<f64> {
        self.values[n_offset * self.j_max + j - 1]
    }
}

impl StructuralModel {
    pub fn new(
        grid: BidderGrid,
        j_max: usize,
        q: &QuadratureConfig,
        censoring: CensoringRule,
    ) -> Result<Self> {
        if j_max < 2 {
            return Err(Error::Config(format!("j_max must be at least 2, got {j_max}")));
        }
        if j_max > grid.n_max {
            return Err(Error::Config(format!(
                "j_max {j_max} exceeds largest bidder count {}",
                grid.n_max
            )));
        }
        let nodes = q.nodes()?;
        let mut kernels = Vec::with_capacity(grid.len() * j_max);
        for n in grid.counts() {
            for j in 1..=j_max {
                kernels.push((j <= n).then(|| trimmed_kernel(&nodes, n, j)));
            }
        }
        Ok(StructuralModel {
            grid,
            j_max,
            censoring,
            nodes,
            kernels,
        })
    }

    pub fn grid(&self) -> BidderGrid {
        self.grid
    }

    pub fn j_max(&self) -> usize {
        self.j_max
    }

    pub fn censoring(&self) -> CensoringRule {
        self.censoring
    }

    /// Number of columns of the Jacobian for a given expansion order.
    pub fn param_dim(&self, kappa: usize) -> usize {
        2 + kappa + self.grid.len()
    }

    pub fn conditional(&self, p: &ValuationParams) -> Result<ConditionalTable> {
        let quantiles = p.quantiles_sorted(&self.nodes)?;
        let values = self
            .kernels
            .iter()
            .map(|k| k.as_ref().map(|(start, w)| dot(w, &quantiles[*start..])))
            .collect();
        Ok(ConditionalTable {
            j_max: self.j_max,
            values,
        })
    }

    /// Mixture over `n` for ranks `1..=j_max`.
    fn mix(&self, table: &ConditionalTable, pmf: &[f64]) -> Vec<f64> {
        (1..=self.j_max)
            .map(|j| {
                let mut acc = 0.0;
                let mut mass = 0.0;
                for (offset, (n, w)) in self.grid.counts().zip(pmf).enumerate() {
                    match table.get(offset, j) {
                        Some(e) => {
                            acc += w * e;
                            mass += w;
                        }
                        None => {
                            if self.censoring == CensoringRule::LowestExisting {
                                let lowest = table.get(offset, n.min(self.j_max)).unwrap_or(0.0);
                                acc += w * lowest;
                                mass += w;
                            }
                        }
                    }
                }
                match self.censoring {
                    CensoringRule::LowestExisting => acc,
                    CensoringRule::DropRenormalize => acc / mass,
                }
            })
            .collect()
    }

    fn check_grid(&self, m: &MarketSizeParams) -> Result<()> {
        if m.grid() != self.grid {
            return Err(Error::Config(format!(
                "market-size grid {:?} does not match model grid {:?}",
                m.grid(),
                self.grid
            )));
        }
        Ok(())
    }

    pub fn predict(&self, p: &ValuationParams, m: &MarketSizeParams) -> Result<BidPrediction> {
        self.check_grid(m)?;
        let table = self.conditional(p)?;
        let ranks = self.mix(&table, &m.pmf());
        Ok(BidPrediction {
            rank1_advisory: ranks[0],
            expected_log_bids: ranks[1..].to_vec(),
        })
    }

    /// Central differences with step `1e-4 * max(1, |theta_i|)`. The point set
    /// is fixed, so the estimator is smooth in the parameters. Logit columns
    /// reuse the conditional table, which does not depend on them.
    pub fn jacobian(&self, p: &ValuationParams, m: &MarketSizeParams) -> Result<StructuralJacobian> {
        self.check_grid(m)?;
        let kappa = p.kappa();
        let rows = self.j_max - 1;
        let cols = self.param_dim(kappa);
        let mut data = vec![0.0; rows * cols];
        let theta_v = p.to_vec();
        let logits = m.logits();
        let pmf = m.pmf();

        let mut set_col = |col: usize, plus: &[f64], minus: &[f64], h: f64| -> Result<()> {
            for r in 0..rows {
                let d = (plus[r + 1] - minus[r + 1]) / (2.0 * h);
                if !d.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite structural gradient at parameter index {col}"
                    )));
                }
                data[r * cols + col] = d;
            }
            Ok(())
        };

        for i in 0..theta_v.len() {
            let mut h = 1e-4 * theta_v[i].abs().max(1.0);
            if i == 1 {
                // Keep the perturbed scale strictly positive.
                h = h.min(0.5 * theta_v[1]);
            }
            let mut up = theta_v.clone();
            up[i] += h;
            let mut down = theta_v.clone();
            down[i] -= h;
            let plus = self.mix(&self.conditional(&ValuationParams::from_slice(&up)?)?, &pmf);
            let minus = self.mix(&self.conditional(&ValuationParams::from_slice(&down)?)?, &pmf);
            set_col(i, &plus, &minus, h)?;
        }

        let table = self.conditional(p)?;
        for k in 0..logits.len() {
            let h = 1e-4 * logits[k].abs().max(1.0);
            let mut up = logits.to_vec();
            up[k] += h;
            let mut down = logits.to_vec();
            down[k] -= h;
            let plus = self.mix(&table, &softmax(&up));
            let minus = self.mix(&table, &softmax(&down));
            set_col(2 + kappa + k, &plus, &minus, h)?;
        }

        Ok(StructuralJacobian {
            rows,
            cols,
            kappa,
            data,
        })
    }
}
