//! Achievable error exponents of the feedback scheme and their optimization.
//!
//! All exponents are per channel use of the nominal block length `n`, so the
//! common prefactor is the no-feedback exponent `E(M, A) = AM / (4(M - 1))`.

use std::cmp::Ordering;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::protocol::SchemeParams;

/// `E(M, A) = AM / (4(M - 1))`, the simplex exponent without feedback.
pub fn exponent_nofeedback(m: usize, a: f64) -> f64 {
    assert!(m >= 2, "need at least two messages");
    let mf = m as f64;
    a * mf / (4.0 * (mf - 1.0))
}

/// `Phi(-z)` for the standard normal, from `erfc`.
pub fn gaussian_tail(z: f64) -> f64 {
    0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
}

/// `exp(-z^2 / 2) / 2`, an upper bound on `Phi(-z)` for `z >= 0`.
pub fn gaussian_tail_bound(z: f64) -> f64 {
    0.5 * (-0.5 * z * z).exp()
}

fn gamma_of(sigma: f64) -> f64 {
    if sigma == 0.0 {
        f64::INFINITY
    } else {
        1.0 / (4.0 * sigma * sigma)
    }
}

fn mu_of(m: usize, beta: f64) -> f64 {
    let mf = m as f64;
    (mf - 1.0) * beta / mf
}

/// Largest admissible `beta` when `2 - 9 gamma > 0`; `None` otherwise.
pub fn beta_limit(sigma: f64) -> Option<f64> {
    let g = gamma_of(sigma);
    if g.is_finite() && 2.0 - 9.0 * g > 0.0 {
        Some(9.0 * g / (2.0 - 9.0 * g))
    } else {
        None
    }
}

fn b1_raw(m: usize, a: f64, sigma: f64, beta: f64, tau0: f64) -> f64 {
    let g = gamma_of(sigma);
    let t2 = (1.0 - tau0).powi(2);
    let second = t2 / ((3.0 + 4.0 * beta) * (1.0 + 2.0 * sigma).powi(2));
    let third = if g.is_infinite() {
        t2 / (3.0 + 4.0 * beta)
    } else {
        t2 / (3.0 + 4.0 * beta) - 2.0 * t2 / (3.0 * (1.0 + beta) * (3.0 * g + 2.0))
    };
    exponent_nofeedback(m, a) * (1.0 + beta.min(second).min(third))
}

fn b2_raw(m: usize, a: f64, beta: f64) -> f64 {
    let mu = mu_of(m, beta);
    exponent_nofeedback(m, a) * (1.0 + 2.0 * mu) / (1.0 + beta)
}

/// Second argument of the `b3` minimum; `1 / (3 + 4 mu)` in the noiseless limit.
fn b3_gain(mu: f64, g: f64) -> f64 {
    if g.is_infinite() {
        return 1.0 / (3.0 + 4.0 * mu);
    }
    let root = (1.0 + 3.0 * g / mu).sqrt();
    g / ((3.0 + 4.0 * mu) * (1.0 + g)) * (1.0 - 2.0 / (1.0 + root)).powi(2)
}

fn b3_raw(m: usize, a: f64, sigma: f64, beta: f64) -> f64 {
    let mu = mu_of(m, beta);
    let g = gamma_of(sigma);
    exponent_nofeedback(m, a) * (1.0 + mu) / (1.0 + beta) * (1.0 + mu.min(b3_gain(mu, g)))
}

fn check_b1(p: &SchemeParams) -> Result<()> {
    if !(0.0..=1.0).contains(&p.tau0) {
        return Err(param(format!("b1 needs tau0 in [0, 1], got {}", p.tau0)));
    }
    Ok(())
}

/// Bound on the exponent of the "true message not among the transmitter's
/// top two" error event.
pub fn b1(p: &SchemeParams) -> Result<f64> {
    check_b1(p)?;
    Ok(b1_raw(p.m, p.a, p.sigma, p.beta, p.tau0))
}

/// Bound on the exponent of the Case 1 error event.
pub fn b2(p: &SchemeParams) -> f64 {
    b2_raw(p.m, p.a, p.beta)
}

/// Bound on the exponent of the Case 2 error events.
pub fn b3(p: &SchemeParams) -> Result<f64> {
    if p.mu <= 0.0 {
        return Err(param("b3 needs mu > 0"));
    }
    Ok(b3_raw(p.m, p.a, p.sigma, p.beta))
}

/// Finite-length penalties subtracted from `b1` and `b2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiniteNCorrections {
    pub n: usize,
    /// `-3 ln M / n`
    pub b1: f64,
    /// `-1 / n`
    pub b2: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentBreakdown {
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub min_b: f64,
    pub e_nofb: f64,
    pub beta: f64,
    pub tau0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub finite_n_corrections: Option<FiniteNCorrections>,
}

impl ExponentBreakdown {
    pub fn new(p: &SchemeParams) -> Result<Self> {
        let (b1, b2, b3) = (b1(p)?, b2(p), b3(p)?);
        Ok(Self {
            b1,
            b2,
            b3,
            min_b: b1.min(b2).min(b3),
            e_nofb: exponent_nofeedback(p.m, p.a),
            beta: p.beta,
            tau0: p.tau0,
            finite_n_corrections: None,
        })
    }

    /// Attaches the finite-length terms for block length `p.n`.
    pub fn with_finite_n(mut self, p: &SchemeParams) -> Self {
        let n = p.n as f64;
        self.finite_n_corrections = Some(FiniteNCorrections {
            n: p.n,
            b1: -3.0 * (p.m as f64).ln() / n,
            b2: -1.0 / n,
        });
        self
    }

    pub fn gain(&self) -> f64 {
        self.min_b / self.e_nofb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    Linear,
    Log,
}

/// Search grid over `(beta, tau0)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta_steps: usize,
    pub beta_spacing: Spacing,
    /// `tau0` runs over `tau0_min + j (tau0_max - tau0_min) / tau0_steps`,
    /// so `tau0_max` itself is excluded.
    pub tau0_min: f64,
    pub tau0_max: f64,
    pub tau0_steps: usize,
    /// Rounds of 21 x 21 refinement around the incumbent.
    pub refine_rounds: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            beta_min: 1e-8,
            beta_max: 2.0,
            beta_steps: 400,
            beta_spacing: Spacing::Log,
            tau0_min: 0.0,
            tau0_max: 1.0,
            tau0_steps: 400,
            refine_rounds: 3,
        }
    }
}

const REFINE_STEPS: usize = 21;

impl GridSpec {
    fn validate(&self) -> Result<()> {
        if self.beta_steps == 0 || self.tau0_steps == 0 {
            return Err(param("grid must have at least one point per axis"));
        }
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(param(format!(
                "beta range must satisfy 0 < min <= max, got [{}, {}]",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.tau0_min >= 0.0 && self.tau0_min <= self.tau0_max && self.tau0_max <= 1.0) {
            return Err(param(format!(
                "tau0 range must lie in [0, 1], got [{}, {}]",
                self.tau0_min, self.tau0_max
            )));
        }
        Ok(())
    }

    pub fn betas(&self) -> Vec<f64> {
        let k = self.beta_steps;
        if k == 1 {
            return vec![self.beta_min];
        }
        (0..k)
            .map(|i| {
                let f = i as f64 / (k - 1) as f64;
                match self.beta_spacing {
                    Spacing::Linear => self.beta_min + f * (self.beta_max - self.beta_min),
                    Spacing::Log => (self.beta_min.ln() + f * (self.beta_max / self.beta_min).ln()).exp(),
                }
            })
            .collect()
    }

    pub fn tau0s(&self) -> Vec<f64> {
        let k = self.tau0_steps;
        (0..k)
            .map(|j| self.tau0_min + j as f64 * (self.tau0_max - self.tau0_min) / k as f64)
            .collect()
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub beta: f64,
    pub tau0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub min_b: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptReport {
    pub m: usize,
    pub a: f64,
    pub sigma: f64,
    pub beta: f64,
    pub tau0: f64,
    pub b1: f64,
    pub b2: f64,
    pub b3: f64,
    pub min_b: f64,
    pub e_nofb: f64,
    pub grid: GridSpec,
    pub points_evaluated: usize,
    pub infeasible_points: usize,
    /// `Some(limit)` when the small-gamma constraint `beta < limit` applied.
    pub beta_limit: Option<f64>,
    #[serde(skip)]
    pub dump: Option<Vec<GridPoint>>,
}

impl OptReport {
    pub fn gain(&self) -> f64 {
        self.min_b / self.e_nofb
    }

    /// Writes the grid dump (if kept) as CSV.
    pub fn write_grid_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        for p in self.dump.iter().flatten() {
            wr.serialize(p)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn eval_point(m: usize, a: f64, sigma: f64, limit: Option<f64>, beta: f64, tau0: f64) -> GridPoint {
    let b1 = b1_raw(m, a, sigma, beta, tau0);
    let b2 = b2_raw(m, a, beta);
    let b3 = b3_raw(m, a, sigma, beta);
    let min_b = b1.min(b2).min(b3);
    let feasible = limit.is_none_or(|l| beta < l) && min_b.is_finite();
    GridPoint {
        beta,
        tau0,
        b1,
        b2,
        b3,
        min_b,
        feasible,
    }
}

/// Larger objective first, then lower beta, then lower tau0.
fn better(a: &GridPoint, b: &GridPoint) -> Ordering {
    b.min_b
        .total_cmp(&a.min_b)
        .then(a.beta.total_cmp(&b.beta))
        .then(a.tau0.total_cmp(&b.tau0))
}

fn best_of(points: &[GridPoint]) -> Option<GridPoint> {
    points.par_iter().filter(|p| p.feasible).copied().min_by(better)
}

fn evaluate(m: usize, a: f64, sigma: f64, limit: Option<f64>, betas: &[f64], taus: &[f64]) -> Vec<GridPoint> {
    betas
        .par_iter()
        .flat_map_iter(|&b| taus.iter().map(move |&t| eval_point(m, a, sigma, limit, b, t)))
        .collect()
}

fn neighbours(axis: &[f64], v: f64) -> (f64, f64) {
    let i = axis.iter().position(|&x| x == v).unwrap_or(0);
    let lo = axis[i.saturating_sub(1)];
    let hi = axis[(i + 1).min(axis.len() - 1)];
    (lo, hi)
}

fn linspace(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    (0..k).map(|i| lo + (hi - lo) * i as f64 / (k - 1) as f64).collect()
}

/// Grid maximum of `min(b1, b2, b3)` over `(beta, tau0)`.
pub fn f1_lower(m: usize, a: f64, sigma: f64, grid: &GridSpec) -> Result<OptReport> {
    f1_lower_impl(m, a, sigma, grid, false)
}

/// Like [`f1_lower`] but keeps every evaluated point in `dump`.
pub fn f1_lower_with_dump(m: usize, a: f64, sigma: f64, grid: &GridSpec) -> Result<OptReport> {
    f1_lower_impl(m, a, sigma, grid, true)
}

fn f1_lower_impl(m: usize, a: f64, sigma: f64, grid: &GridSpec, keep: bool) -> Result<OptReport> {
    if m < 3 {
        return Err(param(format!("the feedback scheme needs M >= 3, got {m}")));
    }
    if !(a > 0.0 && a.is_finite()) {
        return Err(param(format!("A must be positive, got {a}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(param(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    grid.validate()?;
    let limit = beta_limit(sigma);
    let betas = grid.betas();
    let taus = grid.tau0s();
    let pts = evaluate(m, a, sigma, limit, &betas, &taus);
    let mut evaluated = pts.len();
    let mut infeasible = pts.iter().filter(|p| !p.feasible).count();
    let mut best = best_of(&pts).ok_or_else(|| {
        Error::Infeasible(match limit {
            Some(l) => format!("every grid beta violates beta < 9 gamma / (2 - 9 gamma) = {l:.3e} at sigma = {sigma}"),
            None => "every grid point produced a non-finite exponent".into(),
        })
    })?;
    let mut dump = keep.then_some(pts);

    let (mut beta_axis, mut tau_axis) = (betas, taus);
    for _ in 0..grid.refine_rounds {
        let (blo, bhi) = neighbours(&beta_axis, best.beta);
        let (tlo, thi) = neighbours(&tau_axis, best.tau0);
        beta_axis = linspace(blo, bhi, REFINE_STEPS);
        tau_axis = linspace(tlo, thi, REFINE_STEPS);
        let sub = evaluate(m, a, sigma, limit, &beta_axis, &tau_axis);
        evaluated += sub.len();
        infeasible += sub.iter().filter(|p| !p.feasible).count();
        if let Some(c) = best_of(&sub) {
            if better(&c, &best) == Ordering::Less {
                best = c;
            }
        }
        if let Some(d) = dump.as_mut() {
            d.extend(sub);
        }
    }

    Ok(OptReport {
        m,
        a,
        sigma,
        beta: best.beta,
        tau0: best.tau0,
        b1: best.b1,
        b2: best.b2,
        b3: best.b3,
        min_b: best.min_b,
        e_nofb: exponent_nofeedback(m, a),
        grid: *grid,
        points_evaluated: evaluated,
        infeasible_points: infeasible,
        beta_limit: limit,
        dump,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmallSigmaAsymptote {
    pub beta_star: f64,
    pub value: f64,
}

/// Noiseless-feedback optimum: `beta* = (sqrt 5 - 1) / 4` and the exponent
/// `E(M, A) [1 + 1 / (2 + sqrt 5) - 1 / (2M)]`.
pub fn asymptotic_small_sigma(m: usize, a: f64) -> Result<SmallSigmaAsymptote> {
    if m < 3 {
        return Err(param(format!("need M >= 3, got {m}")));
    }
    let s5 = 5f64.sqrt();
    Ok(SmallSigmaAsymptote {
        beta_star: (s5 - 1.0) / 4.0,
        value: exponent_nofeedback(m, a) * (1.0 + 1.0 / (2.0 + s5) - 1.0 / (2.0 * m as f64)),
    })
}

/// Very noisy feedback: `E(M, A) [1 + gamma / 14]`, i.e. a gain of
/// `1 / (56 sigma^2)`.
pub fn asymptotic_large_sigma(m: usize, a: f64, sigma: f64) -> Result<f64> {
    if !(sigma >= 1.0) {
        return Err(param(format!("large-sigma form needs sigma >= 1, got {sigma}")));
    }
    Ok(exponent_nofeedback(m, a) * (1.0 + gamma_of(sigma) / 14.0))
}
