//! Monte Carlo checks of the ambiguity-probability caps.
//!
//! Work in the orthogonal picture: the true message is label 0 with codeword
//! `sqrt(A3) e_0`, and the receiver's phase-I noise gives normalized
//! projections `u_i = xi_i / sqrt(A3)`. Competitors are relabeled so that
//! `y_1 <= y_2 <= ...` with `y_i = 1 + u_0 - u_i` (label 1 is the receiver's
//! strongest competitor). Given these statistics the transmitter's distance
//! excess over label 0 is `2 sigma sqrt(A3) (w_i + eta_0 - eta_i)` with
//! `w_i = y_i sqrt(A3) / sigma`, and the switching threshold is
//! `s = tau0 sqrt(A3) / (2 sigma)` in the same units.
//!
//! The events, given `tau_stat = d(3)t - d(2)t`:
//! - `Z1`: `tau_stat <= tau0 A3` (no split);
//! - otherwise `Z2`, `Z3`, `Z4` when the transmitter's top two share two,
//!   one, or zero labels with `{0, 1}`.
//!
//! The paper's labels 1, 2, 3 correspond to 0, 1, 2 here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{NoiseStream, StreamRole};
use crate::error::{param, Result};
use crate::protocol::{top3, SchemeParams};

/// Phase-I projection statistics seen by the receiver.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionStats {
    /// `u[0]` for the true message, then competitors by decreasing `u`.
    pub u: Vec<f64>,
    /// `1 + u_0 - u_i` for the two strongest competitors.
    pub y2: f64,
    pub y3: f64,
    pub w2: f64,
    pub w3: f64,
    pub s: f64,
}

impl ProjectionStats {
    /// Builds the statistics from explicit projections. Competitors are
    /// re-sorted so that `u[1] >= u[2] >= ...`.
    pub fn from_u(u: &[f64], p: &SchemeParams) -> Result<Self> {
        if u.len() != p.m {
            return Err(param(format!("expected {} projections, got {}", p.m, u.len())));
        }
        if !(p.sigma > 0.0) {
            return Err(param("projection statistics need sigma > 0"));
        }
        let mut u = u.to_vec();
        u[1..].sort_by(|a, b| b.total_cmp(a));
        let root = p.a3.sqrt();
        let y2 = 1.0 + u[0] - u[1];
        let y3 = 1.0 + u[0] - u[2];
        Ok(Self {
            y2,
            y3,
            w2: y2 * root / p.sigma,
            w3: y3 * root / p.sigma,
            s: p.tau0 * root / (2.0 * p.sigma),
            u,
        })
    }

    /// Draws the projections from their law given the true message.
    pub fn from_noise(p: &SchemeParams, stream: &NoiseStream) -> Result<Self> {
        let mut s = stream.sampler();
        let root = p.a3.sqrt();
        let u: Vec<f64> = (0..p.m).map(|_| s.next_normal() / root).collect();
        Self::from_u(&u, p)
    }

    /// `y_i` for every label; label 0 gets 1.
    pub fn y(&self) -> impl Iterator<Item = f64> + '_ {
        let u0 = self.u[0];
        self.u.iter().map(move |ui| 1.0 + u0 - ui)
    }
}

/// Empirical probabilities of `Z1..Z4` with the analytic caps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityEstimate {
    pub counts: [u64; 4],
    pub p_hat: [f64; 4],
    pub trials: u64,
    pub bound1: f64,
    pub bound3: f64,
}

impl AmbiguityEstimate {
    /// Binomial standard error of `p_hat[k]`.
    pub fn std_err(&self, k: usize) -> f64 {
        let p = self.p_hat[k];
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    pub fn p1_ok(&self) -> bool {
        self.p_hat[0] <= self.bound1 + 3.0 * self.std_err(0)
    }

    pub fn p3_ok(&self) -> bool {
        self.p_hat[2] <= self.bound3 + 3.0 * self.std_err(2)
    }

    pub fn pass(&self) -> bool {
        self.p1_ok() && self.p3_ok()
    }
}

pub const MIN_TRIALS: u64 = 1000;

/// Samples feedback noise given fixed phase-I statistics and classifies
/// each transmitter view into `Z1..Z4`.
pub fn ambiguity_probabilities(
    stats: &ProjectionStats,
    p: &SchemeParams,
    trials: u64,
    stream: &NoiseStream,
) -> Result<AmbiguityEstimate> {
    if trials < MIN_TRIALS {
        return Err(param(format!("need at least {MIN_TRIALS} trials, got {trials}")));
    }
    if !(p.sigma > 0.0) {
        return Err(param("ambiguity probabilities need sigma > 0"));
    }
    let m = p.m;
    if stats.u.len() != m {
        return Err(param(format!("statistics have {} labels, M = {m}", stats.u.len())));
    }
    let y: Vec<f64> = stats.y().collect();
    let root = p.a3.sqrt();
    let threshold = p.tau0 * p.a3;
    let mut eta = vec![0.0; m];
    let mut dt = vec![0.0; m];
    let mut counts = [0u64; 4];
    let mut s = stream.sampler();
    for _ in 0..trials {
        s.fill(&mut eta);
        dt[0] = 0.0;
        for i in 1..m {
            dt[i] = 2.0 * p.a3 * y[i] + 2.0 * p.sigma * root * (eta[0] - eta[i]);
        }
        let t = top3(&dt);
        let tau_stat = dt[t[2]] - dt[t[1]];
        let shared = usize::from(t[0] <= 1) + usize::from(t[1] <= 1);
        let split = tau_stat > threshold;
        let z = [!split, split && shared == 2, split && shared == 1, split && shared == 0];
        assert_eq!(z.iter().filter(|&&b| b).count(), 1, "event partition violated");
        counts[z.iter().position(|&b| b).unwrap()] += 1;
    }
    let n = trials as f64;
    Ok(AmbiguityEstimate {
        counts,
        p_hat: counts.map(|c| c as f64 / n),
        trials,
        bound1: p1_bound(stats, m),
        bound3: p3_bound(stats, p),
    })
}

/// `min(1, 6 M^3 exp(-[w3 - (w2)+ - s]+^2 / 4))`.
pub fn p1_bound(stats: &ProjectionStats, m: usize) -> f64 {
    let x = (stats.w3 - stats.w2.max(0.0) - stats.s).max(0.0);
    let mf = m as f64;
    (6.0 * mf.powi(3) * (-x * x / 4.0).exp()).min(1.0)
}

/// Four-branch exponent function of the `p3` cap. Where several branches
/// apply on a boundary the smallest value is returned.
pub fn r_piecewise(y2: f64, y3: f64, tau0: f64) -> f64 {
    let h = tau0 / 2.0;
    let mut r = f64::INFINITY;
    if y2 <= h && y3 <= 0.0 {
        r = r.min((h - y2).min(-y3));
    }
    if y2 <= h && y3 >= 0.0 {
        r = r.min(y3);
    }
    if y2 >= h && y3 <= y2 - h {
        r = r.min(0.0);
    }
    if y2 >= h && y3 >= y2 - h {
        r = r.min(h - y2 + y3);
    }
    r
}

/// `min(1, 4M exp(-gamma A3 r^2))`.
pub fn p3_bound(stats: &ProjectionStats, p: &SchemeParams) -> f64 {
    let r = r_piecewise(stats.y2, stats.y3, p.tau0);
    (4.0 * p.m as f64 * (-p.gamma * p.a3 * r * r).exp()).min(1.0)
}

/// A batch of validation configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationSpec {
    pub ms: Vec<usize>,
    pub sigmas: Vec<f64>,
    pub configs: usize,
    pub trials: u64,
    /// Total energy `nA` of the underlying scheme.
    pub total_energy: f64,
    pub beta: f64,
    pub tau0: f64,
    pub seed: u64,
}

impl Default for ValidationSpec {
    fn default() -> Self {
        Self {
            ms: vec![3, 5],
            sigmas: vec![0.1, 0.5, 1.0],
            configs: 50,
            trials: 20_000,
            total_energy: 16.0,
            beta: 0.3,
            tau0: 0.1,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub config_id: usize,
    pub m: usize,
    pub sigma: f64,
    pub y2: f64,
    pub y3: f64,
    pub p_hat1: f64,
    pub p_hat2: f64,
    pub p_hat3: f64,
    pub p_hat4: f64,
    pub bound1: f64,
    pub bound3: f64,
    pub pass: bool,
}

/// Runs every configuration of `spec`; configuration `k` uses
/// `M = ms[k mod |ms|]` and `sigma = sigmas[(k / |ms|) mod |sigmas|]`.
pub fn run_validation(spec: &ValidationSpec) -> Result<Vec<ValidationRow>> {
    if spec.ms.is_empty() || spec.sigmas.is_empty() {
        return Err(param("validation needs at least one M and one sigma"));
    }
    (0..spec.configs)
        .into_par_iter()
        .map(|k| {
            let m = spec.ms[k % spec.ms.len()];
            let sigma = spec.sigmas[(k / spec.ms.len()) % spec.sigmas.len()];
            let p = SchemeParams::with_total_energy(spec.total_energy, m, sigma, spec.beta, spec.tau0)?;
            let stats =
                ProjectionStats::from_noise(&p, &NoiseStream::for_trial(spec.seed, k as u64, StreamRole::Validation))?;
            let est = ambiguity_probabilities(
                &stats,
                &p,
                spec.trials,
                &NoiseStream::for_trial(spec.seed, k as u64, StreamRole::Feedback),
            )?;
            Ok(ValidationRow {
                config_id: k,
                m,
                sigma,
                y2: stats.y2,
                y3: stats.y3,
                p_hat1: est.p_hat[0],
                p_hat2: est.p_hat[1],
                p_hat3: est.p_hat[2],
                p_hat4: est.p_hat[3],
                bound1: est.bound1,
                bound3: est.bound3,
                pass: est.pass(),
            })
        })
        .collect()
}

pub fn write_validation_csv<W: std::io::Write>(rows: &[ValidationRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn params(m: usize, sigma: f64, tau0: f64) -> SchemeParams {
        SchemeParams::with_total_energy(16.0, m, sigma, 0.3, tau0).unwrap()
    }

    fn manual(w2: f64, w3: f64, s: f64) -> ProjectionStats {
        ProjectionStats {
            u: vec![0.0; 3],
            y2: 0.0,
            y3: 0.0,
            w2,
            w3,
            s,
        }
    }

    #[test]
    fn r_piecewise_table() {
        assert_eq!(r_piecewise(0.0, 0.5, 0.2), 0.5);
        assert_eq!(r_piecewise(1.0, 0.5, 0.2), 0.0);
        assert_relative_eq!(r_piecewise(0.2, 0.3, 0.2), 0.2, max_relative = 1e-12);
        assert_relative_eq!(r_piecewise(-0.5, -0.2, 0.2), 0.2, max_relative = 1e-12);
        assert_relative_eq!(r_piecewise(0.05, -0.5, 0.2), 0.05, max_relative = 1e-12);
    }

    #[test]
    fn p1_bound_cases() {
        assert_eq!(p1_bound(&manual(2.0, 2.5, 1.0), 3), 1.0);
        let b = p1_bound(&manual(-1.0, 10.0, 1.0), 3);
        assert_relative_eq!(b, (-81.0f64 / 4.0).exp() * 162.0, max_relative = 1e-12);
    }

    #[test]
    fn p3_bound_cases() {
        let p = params(3, 0.5, 0.2);
        let mut st = ProjectionStats::from_u(&[0.0, 0.0, 0.0], &p).unwrap();
        st.y2 = 1.0;
        st.y3 = 0.5;
        assert_eq!(p3_bound(&st, &p), 1.0);
        // choose y3 so gamma A3 r^2 = 10 on branch 2
        st.y2 = 0.0;
        st.y3 = (10.0 / (p.gamma * p.a3)).sqrt();
        assert_relative_eq!(p3_bound(&st, &p), 12.0 * (-10.0f64).exp(), max_relative = 1e-12);
    }

    #[test]
    fn stats_consistency_and_sorting() {
        let p = params(5, 0.5, 0.1);
        let st = ProjectionStats::from_u(&[0.1, -0.2, 0.3, 0.0, 0.05], &p).unwrap();
        assert_eq!(st.u, vec![0.1, 0.3, 0.05, 0.0, -0.2]);
        let root = p.a3.sqrt();
        assert!((st.y2 * root - p.sigma * st.w2).abs() < 1e-12);
        assert!((st.y3 * root - p.sigma * st.w3).abs() < 1e-12);
        assert_relative_eq!(st.y2, 0.8, max_relative = 1e-12);
    }

    #[test]
    fn clear_leader_gives_z2() {
        let p = params(4, 0.05, 0.001);
        // receiver strongly favours 0 then 1, others far
        let st = ProjectionStats::from_u(&[0.0, -0.2, -3.0, -3.0], &p).unwrap();
        let est = ambiguity_probabilities(&st, &p, 5000, &NoiseStream::new(1, 2)).unwrap();
        assert!(est.p_hat[1] > 0.999, "{:?}", est.p_hat);
    }

    #[test]
    fn partition_sums_to_one() {
        let p = params(3, 1.0, 0.1);
        let st = ProjectionStats::from_noise(&p, &NoiseStream::new(3, 3)).unwrap();
        let est = ambiguity_probabilities(&st, &p, 10_000, &NoiseStream::new(3, 4)).unwrap();
        assert_eq!(est.counts.iter().sum::<u64>(), 10_000);
        assert!((est.p_hat.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = params(3, 0.5, 0.1);
        let st = ProjectionStats::from_u(&[0.0; 3], &p).unwrap();
        assert!(ambiguity_probabilities(&st, &p, 999, &NoiseStream::new(0, 0)).is_err());
        let p0 = params(3, 0.0, 0.1);
        assert!(ProjectionStats::from_u(&[0.0; 3], &p0).is_err());
    }

    proptest! {
        #[test]
        fn r_is_nonnegative_and_continuous(y2 in -2.0f64..2.0, y3 in -2.0f64..2.0, tau0 in 0.0f64..1.0) {
            let r = r_piecewise(y2, y3, tau0);
            prop_assert!(r >= 0.0 && r.is_finite());
            let eps = 1e-9;
            for (dy2, dy3) in [(eps, 0.0), (0.0, eps), (-eps, 0.0), (0.0, -eps)] {
                prop_assert!((r_piecewise(y2 + dy2, y3 + dy3, tau0) - r).abs() < 1e-8);
            }
        }

        #[test]
        fn caps_lie_in_unit_interval(w2 in -20.0f64..20.0, w3 in -20.0f64..20.0, s in 0.0f64..5.0, m in 3usize..50) {
            let b = p1_bound(&manual(w2, w3, s), m);
            prop_assert!(b > 0.0 && b <= 1.0);
        }
    }
}
