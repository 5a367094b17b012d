//! Demand primitives.
//!
//! Two distribution families drive every listing's demand schedule:
//!
//! - [`ValuationParams`]: a Gaussian density multiplied by a squared
//!   polynomial in the standardized variable `z = (v - mu) / sigma`,
//!   normalized to integrate to one. Valuations live in log-dollar space.
//! - [`MarketSizeParams`]: a softmax over a discrete grid of bidder counts.
//!
//! Normalization, CDF and moments are all closed form; only the quantile
//! requires a root solve.

use rand::distr::Open01;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};

/// Largest supported expansion order.
pub const MAX_KAPPA: usize = 8;
/// Expansion order used when a configuration does not specify one.
pub const DEFAULT_KAPPA: usize = 4;
/// Half-width, in units of sigma, of the numerical support `[mu - 12 sigma, mu + 12 sigma]`.
pub const SUPPORT_HALF_WIDTH: f64 = 12.0;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
const QUANTILE_BISECTION_WIDTH: f64 = 1e-3;
const QUANTILE_MAX_ITER: usize = 100;

/// `E[Z^m]` for a standard normal `Z`, `m = 0..=2 * MAX_KAPPA`.
const GAUSSIAN_MOMENTS: [f64; 2 * MAX_KAPPA + 1] = [
    1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0, 0.0, 105.0, 0.0, 945.0, 0.0, 10395.0, 0.0, 135135.0, 0.0,
    2027025.0,
];

/// Raw moment of the standard normal distribution: `0` for odd `m`, `(m-1)!!` for even `m`.
pub fn gaussian_moment(m: usize) -> f64 {
    GAUSSIAN_MOMENTS[m]
}

/// Standard normal density.
#[inline]
pub fn std_normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Standard normal CDF.
#[inline]
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal quantile.
pub fn std_normal_quantile(u: f64) -> f64 {
    -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
}

/// Coefficients of `(1 + sum_k alpha_k z^k)^2` in powers of `z`.
fn squared_poly_coeffs(alphas: &[f64]) -> Vec<f64> {
    let kappa = alphas.len();
    let mut a = Vec::with_capacity(kappa + 1);
    a.push(1.0);
    a.extend_from_slice(alphas);
    let mut b = vec![0.0; 2 * kappa + 1];
    for (j, aj) in a.iter().enumerate() {
        for (k, ak) in a.iter().enumerate() {
            b[j + k] += aj * ak;
        }
    }
    b
}

/// Normalizing constant `c` of the Hermite-expanded density with shape
/// weights `alphas`, i.e. `1 / E[(1 + sum alpha_k Z^k)^2]`.
pub fn normalizing_constant(alphas: &[f64]) -> Result<f64> {
    if alphas.len() > MAX_KAPPA {
        return Err(Error::InvalidParameter(format!(
            "kappa {} exceeds maximum {MAX_KAPPA}",
            alphas.len()
        )));
    }
    let mass: f64 = squared_poly_coeffs(alphas)
        .iter()
        .enumerate()
        .map(|(m, bm)| bm * gaussian_moment(m))
        .sum();
    let c = 1.0 / mass;
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "normalizing constant not finite for alphas {alphas:?}"
        )));
    }
    Ok(c)
}

#[derive(Serialize, Deserialize)]
struct RawValuationParams {
    mu: f64,
    sigma: f64,
    alphas: Vec<f64>,
}

/// Location, scale and shape of the log-valuation density.
///
/// Construction validates the parameters and caches the normalizing constant
/// together with the expanded squared-polynomial coefficients, so every
/// density query is allocation free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawValuationParams", into = "RawValuationParams")]
pub struct ValuationParams {
    mu: f64,
    sigma: f64,
    alphas: Vec<f64>,
    norm: f64,
    sq_coeffs: Vec<f64>,
}

impl TryFrom<RawValuationParams> for ValuationParams {
    type Error = Error;
    fn try_from(raw: RawValuationParams) -> Result<Self> {
        ValuationParams::new(raw.mu, raw.sigma, raw.alphas)
    }
}

impl From<ValuationParams> for RawValuationParams {
    fn from(p: ValuationParams) -> Self {
        RawValuationParams {
            mu: p.mu,
            sigma: p.sigma,
            alphas: p.alphas,
        }
    }
}

impl ValuationParams {
    pub fn new(mu: f64, sigma: f64, alphas: Vec<f64>) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::InvalidParameter(format!("mu must be finite, got {mu}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be positive and finite, got {sigma}"
            )));
        }
        if let Some(a) = alphas.iter().find(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite alpha {a}")));
        }
        let norm = normalizing_constant(&alphas)?;
        let sq_coeffs = squared_poly_coeffs(&alphas);
        Ok(ValuationParams {
            mu,
            sigma,
            alphas,
            norm,
            sq_coeffs,
        })
    }

    /// Plain Gaussian (`kappa = 0`).
    pub fn gaussian(mu: f64, sigma: f64) -> Result<Self> {
        Self::new(mu, sigma, Vec::new())
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn kappa(&self) -> usize {
        self.alphas.len()
    }

    pub fn normalizing_constant(&self) -> f64 {
        self.norm
    }

    /// Copy with the location shifted by `delta`.
    pub fn shifted(&self, delta: f64) -> Result<Self> {
        Self::new(self.mu + delta, self.sigma, self.alphas.clone())
    }

    /// `[mu - 12 sigma, mu + 12 sigma]`.
    pub fn support(&self) -> (f64, f64) {
        (
            self.mu - SUPPORT_HALF_WIDTH * self.sigma,
            self.mu + SUPPORT_HALF_WIDTH * self.sigma,
        )
    }

    /// Parameters flattened as `(mu, sigma, alpha_1..alpha_kappa)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(2 + self.kappa());
        v.push(self.mu);
        v.push(self.sigma);
        v.extend_from_slice(&self.alphas);
        v
    }

    /// Inverse of [`to_vec`](Self::to_vec).
    pub fn from_slice(theta: &[f64]) -> Result<Self> {
        if theta.len() < 2 {
            return Err(Error::dim(2, theta.len(), "valuation parameter vector"));
        }
        Self::new(theta[0], theta[1], theta[2..].to_vec())
    }

    #[inline]
    fn poly(&self, z: f64) -> f64 {
        // Horner on 1 + alpha_1 z + ... + alpha_kappa z^kappa.
        let mut acc = 0.0;
        for a in self.alphas.iter().rev() {
            acc = (acc + a) * z;
        }
        1.0 + acc
    }

    /// `d/dv ln f(v)`, infinite at roots of the shape polynomial.
    fn dlog_pdf(&self, v: f64) -> f64 {
        let z = (v - self.mu) / self.sigma;
        let mut dp = 0.0;
        for (k, a) in self.alphas.iter().enumerate().rev() {
            dp = dp * z + (k + 1) as f64 * a;
        }
        (2.0 * dp / self.poly(z) - z) / self.sigma
    }

    /// Density at log-valuation `v`.
    pub fn pdf(&self, v: f64) -> f64 {
        let z = (v - self.mu) / self.sigma;
        let p = self.poly(z);
        self.norm * p * p * std_normal_pdf(z) / self.sigma
    }

    /// Closed-form CDF at `v`.
    pub fn cdf(&self, v: f64) -> f64 {
        self.cdf_pdf(v).0
    }

    /// CDF and density at `v`, sharing the Gaussian evaluation.
    pub fn cdf_pdf(&self, v: f64) -> (f64, f64) {
        let z = (v - self.mu) / self.sigma;
        let phi = std_normal_pdf(z);
        let p = self.poly(z);
        let dens = self.norm * p * p * phi / self.sigma;

        // Partial moments of t^m phi(t), accumulated two orders at a time.
        // Below the mode the lower integral is accurate; above it the upper
        // integral keeps precision in 1 - F.
        let upper = z > 0.0;
        let (m0, m1) = if upper {
            (std_normal_cdf(-z), phi)
        } else {
            (std_normal_cdf(z), -phi)
        };
        let sign = if upper { 1.0 } else { -1.0 };
        let mut prev2 = m0; // M_{m-2}
        let mut prev1 = m1; // M_{m-1}
        let mut acc = self.sq_coeffs[0] * m0;
        if self.sq_coeffs.len() > 1 {
            acc += self.sq_coeffs[1] * m1;
        }
        let mut zpow = 1.0; // z^{m-1}
        for m in 2..self.sq_coeffs.len() {
            zpow *= z;
            let mm = sign * zpow * phi + (m as f64 - 1.0) * prev2;
            acc += self.sq_coeffs[m] * mm;
            prev2 = prev1;
            prev1 = mm;
        }
        let tail = self.norm * acc;
        let f = if upper { 1.0 - tail } else { tail };
        (f.clamp(0.0, 1.0), dens)
    }

    /// Inverse CDF: bisection on the support down to a bracket of width
    /// 1e-3, then Newton safeguarded by the bracket.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain(format!("quantile level must lie in (0, 1), got {u}")));
        }
        let (mut lo, mut hi) = self.support();
        if self.cdf(lo) >= u {
            return Ok(lo);
        }
        if self.cdf(hi) <= u {
            return Ok(hi);
        }
        while hi - lo > QUANTILE_BISECTION_WIDTH {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(self.newton(u, lo, hi, 0.5 * (lo + hi)))
    }

    /// Quantiles of a non-decreasing sequence of levels. Each solve starts
    /// from the previous root, so a dense grid costs a few Newton steps per
    /// point rather than a full bisection.
    pub fn quantiles_sorted(&self, us: &[f64]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(us.len());
        let (_, hi) = self.support();
        let cdf_hi = self.cdf(hi);
        let mut prev: Option<(f64, f64)> = None;
        for &u in us {
            let x = match prev {
                None => self.quantile(u)?,
                Some((pu, px)) => {
                    if !(u > 0.0 && u < 1.0) {
                        return Err(Error::Domain(format!(
                            "quantile level must lie in (0, 1), got {u}"
                        )));
                    }
                    if u < pu {
                        return Err(Error::Usage("quantile levels must be sorted".into()));
                    }
                    if cdf_hi <= u {
                        hi
                    } else {
                        // Second-order Taylor step of the quantile function from the previous root.
                        let dens = self.pdf(px);
                        let du = u - pu;
                        let mut guess = px;
                        if dens > 0.0 {
                            guess += du / dens;
                            let curv = self.dlog_pdf(px);
                            if curv.is_finite() {
                                guess -= 0.5 * curv * du * du / (dens * dens);
                            }
                        }
                        self.newton(u, px, hi, guess)
                    }
                }
            };
            prev = Some((u, x));
            out.push(x);
        }
        Ok(out)
    }

    fn newton(&self, u: f64, mut lo: f64, mut hi: f64, mut x: f64) -> f64 {
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        for _ in 0..QUANTILE_MAX_ITER {
            let (f, dens) = self.cdf_pdf(x);
            let r = f - u;
            if r.abs() < 1e-14 {
                return x;
            }
            // Close enough that one more Newton step lands within rounding
            // of the root, so take it without re-evaluating.
            if r.abs() < 1e-10 && dens > 0.0 {
                let next = x - r / dens;
                if next > lo && next < hi {
                    return next;
                }
            }
            if r < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let mut next = if dens > 0.0 { x - r / dens } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-15 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }

    /// `n` i.i.d. log-valuations by inverse-CDF sampling.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<f64>> {
        if n == 0 {
            return Err(Error::InvalidParameter("sample size must be at least 1".into()));
        }
        (0..n)
            .map(|_| {
                let u: f64 = rng.sample(Open01);
                self.quantile(u)
            })
            .collect()
    }
}

/// Inclusive range of potential bidder counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BidderGrid {
    pub n_min: usize,
    pub n_max: usize,
}

impl Default for BidderGrid {
    fn default() -> Self {
        // One above the largest bidder count observed on the platform (39).
        BidderGrid { n_min: 1, n_max: 40 }
    }
}

impl BidderGrid {
    pub fn new(n_min: usize, n_max: usize) -> Result<Self> {
        if n_min < 1 || n_max < n_min {
            return Err(Error::InvalidParameter(format!(
                "bidder grid requires 1 <= n_min <= n_max, got {n_min}..={n_max}"
            )));
        }
        Ok(BidderGrid { n_min, n_max })
    }

    pub fn len(&self) -> usize {
        self.n_max - self.n_min + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn counts(&self) -> std::ops::RangeInclusive<usize> {
        self.n_min..=self.n_max
    }
}

#[derive(Serialize, Deserialize)]
struct RawMarketSizeParams {
    n_min: usize,
    logits: Vec<f64>,
}

/// Unnormalized log-likelihoods over the bidder-count grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMarketSizeParams", into = "RawMarketSizeParams")]
pub struct MarketSizeParams {
    grid: BidderGrid,
    logits: Vec<f64>,
}

impl TryFrom<RawMarketSizeParams> for MarketSizeParams {
    type Error = Error;
    fn try_from(raw: RawMarketSizeParams) -> Result<Self> {
        MarketSizeParams::new(raw.n_min, raw.logits)
    }
}

impl From<MarketSizeParams> for RawMarketSizeParams {
    fn from(m: MarketSizeParams) -> Self {
        RawMarketSizeParams {
            n_min: m.grid.n_min,
            logits: m.logits,
        }
    }
}

impl MarketSizeParams {
    pub fn new(n_min: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.is_empty() {
            return Err(Error::InvalidParameter("market-size logits are empty".into()));
        }
        if let Some(r) = logits.iter().find(|r| !r.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite logit {r}")));
        }
        let grid = BidderGrid::new(n_min, n_min + logits.len() - 1)?;
        Ok(MarketSizeParams { grid, logits })
    }

    pub fn uniform(grid: BidderGrid) -> Self {
        MarketSizeParams {
            grid,
            logits: vec![0.0; grid.len()],
        }
    }

    pub fn grid(&self) -> BidderGrid {
        self.grid
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Softmax with max subtraction.
    pub fn pmf(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Categorical draw of a bidder count.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let pmf = self.pmf();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in pmf.iter().enumerate() {
            acc += p;
            if u < acc {
                return self.grid.n_min + i;
            }
        }
        // Rounding left a sliver above the last cumulative sum.
        self.grid.n_min + pmf.iter().rposition(|&p| p > 0.0).unwrap_or(pmf.len() - 1)
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|r| (r - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
