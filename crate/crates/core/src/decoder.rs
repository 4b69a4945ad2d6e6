//! Receiver: posterior decoding over the unknown phase-II codebook.
//!
//! The receiver never sees the transmitter's feedback observation `z'`, so
//! the phase-II likelihood of message `i` is a mixture over
//! `z' ~ N(y', sigma^2 I)` of `exp[(y'', x_i''(z')) - |x_i''(z')|^2 / 2]`.
//! The mixture is estimated with `S` Monte Carlo draws of `z'`, each pushed
//! through the transmitter's own switching rule, and averaged with a
//! streaming log-sum-exp.

use serde::{Deserialize, Serialize};

use crate::channel::NoiseStream;
use crate::error::{contract, param, Result};
use crate::geometry::{dist_sq, dot, Codebook};
use crate::protocol::{rest_slot, Phase2Plan, Scheme, SchemeParams};

pub const DEFAULT_INNER_SAMPLES: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Maximum a posteriori over the feedback-noise mixture.
    FullBayes,
    /// Ignores switching: scores both phases as fixed simplex codes.
    NoFeedbackMl,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderSettings {
    /// Draws of `z'` per decoding call.
    #[serde(default = "default_inner_samples")]
    pub inner_samples: usize,
    /// Reuse the same draws of `z'` for every hypothesis.
    #[serde(default = "default_shared")]
    pub shared_randomness: bool,
    #[serde(default = "default_mode")]
    pub mode: DecoderMode,
}

fn default_inner_samples() -> usize {
    DEFAULT_INNER_SAMPLES
}
fn default_shared() -> bool {
    true
}
fn default_mode() -> DecoderMode {
    DecoderMode::FullBayes
}

impl Default for DecoderSettings {
    fn default() -> Self {
        Self {
            inner_samples: DEFAULT_INNER_SAMPLES,
            shared_randomness: true,
            mode: DecoderMode::FullBayes,
        }
    }
}

impl DecoderSettings {
    pub fn validate(&self) -> Result<()> {
        if self.inner_samples == 0 {
            return Err(param("inner_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Running `ln sum exp(v)` without overflow.
#[derive(Debug, Clone, Copy)]
struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    const EMPTY: Self = Self {
        max: f64::NEG_INFINITY,
        sum: 0.0,
    };

    #[inline]
    fn push(&mut self, v: f64) {
        if v > self.max {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        } else {
            self.sum += (v - self.max).exp();
        }
    }

    fn value(&self) -> f64 {
        self.max + self.sum.ln()
    }
}

/// `(y, x_i) - |x_i|^2 / 2` for every codeword.
pub fn phase1_loglik(y1: &[f64], cb: &Codebook) -> Result<Vec<f64>> {
    if y1.len() != cb.dim() {
        return Err(contract(format!(
            "received block has dimension {}, codebook has {}",
            y1.len(),
            cb.dim()
        )));
    }
    Ok(cb.codewords().map(|x| dot(y1, x) - 0.5 * dot(x, x)).collect())
}

/// Nearest-codeword decision; ties go to the lowest index.
pub fn decode_nofeedback(y: &[f64], cb: &Codebook) -> Result<usize> {
    if y.len() != cb.dim() {
        return Err(contract(format!(
            "received block has dimension {}, codebook has {}",
            y.len(),
            cb.dim()
        )));
    }
    let mut best = (f64::INFINITY, 0);
    for (i, x) in cb.codewords().enumerate() {
        let d = dist_sq(y, x);
        if d < best.0 {
            best = (d, i);
        }
    }
    Ok(best.1)
}

/// Decoder that is told the phase-II codebook actually used.
pub fn decode_known_code(y1: &[f64], y2: &[f64], phase1: &Codebook, phase2: &Codebook) -> Result<usize> {
    let l1 = phase1_loglik(y1, phase1)?;
    let l2 = phase1_loglik(y2, phase2)?;
    Ok(argmax(l1.iter().zip(&l2).map(|(a, b)| a + b)))
}

fn argmax(it: impl Iterator<Item = f64>) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (i, v) in it.enumerate() {
        if v > best.0 {
            best = (v, i);
        }
    }
    best.1
}

/// Reusable receiver for one scheme; holds scratch buffers, so give each
/// worker thread its own.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    scheme: &'a Scheme,
    settings: DecoderSettings,
    z: Vec<f64>,
    dist: Vec<f64>,
    simplex_corr: Vec<f64>,
    rest_corr: Vec<f64>,
    pair_corr: f64,
    acc: Vec<LogSumExp>,
    out: Vec<f64>,
}

impl<'a> Decoder<'a> {
    pub fn new(scheme: &'a Scheme, settings: DecoderSettings) -> Result<Self> {
        settings.validate()?;
        let m = scheme.params().m;
        Ok(Self {
            scheme,
            settings,
            z: vec![0.0; m - 1],
            dist: vec![0.0; m],
            simplex_corr: vec![0.0; m],
            rest_corr: vec![0.0; m - 2],
            pair_corr: 0.0,
            acc: vec![LogSumExp::EMPTY; m],
            out: vec![0.0; m],
        })
    }

    pub fn settings(&self) -> &DecoderSettings {
        &self.settings
    }

    fn check(&self, y1: &[f64], y2: &[f64]) -> Result<()> {
        let k = self.scheme.params().m - 1;
        if y1.len() != k || y2.len() != k {
            return Err(contract(format!(
                "received blocks have dimensions {} and {}, expected {k}",
                y1.len(),
                y2.len()
            )));
        }
        Ok(())
    }

    /// Correlations of `y2` with every possible phase-II codeword.
    fn prepare(&mut self, y2: &[f64]) {
        let p = self.scheme.params();
        let m = p.m;
        let amp = p.a2.sqrt();
        for (c, x) in self
            .simplex_corr
            .iter_mut()
            .zip(self.scheme.phase2_simplex().codewords())
        {
            *c = dot(y2, x);
        }
        self.pair_corr = amp * y2[m - 2];
        match self.scheme.rest_code() {
            Some(rest) => {
                for (c, x) in self.rest_corr.iter_mut().zip(rest.codewords()) {
                    *c = dot(&y2[..m - 3], x);
                }
            }
            None => self.rest_corr[0] = amp * y2[0],
        }
    }

    /// `(y2, x_i'') - A2 / 2` under `plan`, after [`Self::prepare`].
    #[inline]
    fn term(&self, plan: Phase2Plan, i: usize) -> f64 {
        let corr = match plan {
            Phase2Plan::Simplex => self.simplex_corr[i],
            Phase2Plan::Split { plus, minus } => {
                if i == plus {
                    self.pair_corr
                } else if i == minus {
                    -self.pair_corr
                } else {
                    self.rest_corr[rest_slot(i, plus, minus)]
                }
            }
        };
        corr - 0.5 * self.scheme.params().a2
    }

    fn draw_plan(&mut self, y1: &[f64], sampler: &mut crate::channel::NormalSampler) -> Phase2Plan {
        let sigma = self.scheme.params().sigma;
        for (z, y) in self.z.iter_mut().zip(y1) {
            *z = y + sigma * sampler.next_normal();
        }
        self.scheme.plan_from_observation(&self.z, &mut self.dist).1
    }

    /// Writes the estimated phase-II log-likelihood of every message to `out`.
    pub fn phase2_posterior_loglik_into(
        &mut self,
        y1: &[f64],
        y2: &[f64],
        stream: &NoiseStream,
        out: &mut [f64],
    ) -> Result<()> {
        self.check(y1, y2)?;
        let m = self.scheme.params().m;
        if out.len() != m {
            return Err(contract(format!("output has length {}, M = {m}", out.len())));
        }
        self.prepare(y2);
        if self.settings.mode == DecoderMode::NoFeedbackMl {
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.term(Phase2Plan::Simplex, i);
            }
            return Ok(());
        }
        if self.scheme.params().sigma == 0.0 {
            let plan = self.scheme.plan_from_observation(y1, &mut self.dist).1;
            for (i, o) in out.iter_mut().enumerate() {
                *o = self.term(plan, i);
            }
            return Ok(());
        }
        let s = self.settings.inner_samples;
        let mut sampler = stream.sampler();
        self.acc.fill(LogSumExp::EMPTY);
        if self.settings.shared_randomness {
            for _ in 0..s {
                let plan = self.draw_plan(y1, &mut sampler);
                for i in 0..m {
                    let v = self.term(plan, i);
                    self.acc[i].push(v);
                }
            }
        } else {
            for i in 0..m {
                for _ in 0..s {
                    let plan = self.draw_plan(y1, &mut sampler);
                    let v = self.term(plan, i);
                    self.acc[i].push(v);
                }
            }
        }
        let ln_s = (s as f64).ln();
        for (o, a) in out.iter_mut().zip(&self.acc) {
            *o = a.value() - ln_s;
        }
        Ok(())
    }

    pub fn phase2_posterior_loglik(&mut self, y1: &[f64], y2: &[f64], stream: &NoiseStream) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.scheme.params().m];
        self.phase2_posterior_loglik_into(y1, y2, stream, &mut out)?;
        Ok(out)
    }

    /// Most probable message; ties go to the lowest index.
    pub fn decode(&mut self, y1: &[f64], y2: &[f64], stream: &NoiseStream) -> Result<usize> {
        let mut out = std::mem::take(&mut self.out);
        let res = self.phase2_posterior_loglik_into(y1, y2, stream, &mut out);
        let half = 0.5 * self.scheme.params().a1;
        let best = argmax(
            self.scheme
                .phase1_code()
                .codewords()
                .zip(&out)
                .map(|(x, l)| dot(y1, x) - half + l),
        );
        self.out = out;
        res.map(|_| best)
    }
}

/// One-shot phase-II posterior log-likelihoods.
pub fn phase2_posterior_loglik(
    y1: &[f64],
    y2: &[f64],
    p: &SchemeParams,
    s: &DecoderSettings,
    stream: &NoiseStream,
) -> Result<Vec<f64>> {
    let scheme = Scheme::new(*p)?;
    Decoder::new(&scheme, *s)?.phase2_posterior_loglik(y1, y2, stream)
}

/// One-shot decision.
pub fn decode(y1: &[f64], y2: &[f64], p: &SchemeParams, s: &DecoderSettings, stream: &NoiseStream) -> Result<usize> {
    let scheme = Scheme::new(*p)?;
    Decoder::new(&scheme, *s)?.decode(y1, y2, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::SessionStreams;
    use crate::geometry::make_simplex;
    use crate::protocol::{build_phase2_code, rank_distances, Case};
    use approx::assert_relative_eq;

    fn scheme(m: usize, total: f64, sigma: f64, tau0: f64) -> Scheme {
        Scheme::new(SchemeParams::with_total_energy(total, m, sigma, 0.4, tau0).unwrap()).unwrap()
    }

    #[test]
    fn phase1_matches_nearest_codeword() {
        let cb = make_simplex(5, 3.0, 4).unwrap();
        let mut s = NoiseStream::new(4, 4).sampler();
        for _ in 0..200 {
            let y: Vec<f64> = (0..4).map(|_| 2.0 * s.next_normal()).collect();
            let l = phase1_loglik(&y, &cb).unwrap();
            assert_eq!(argmax(l.into_iter()), decode_nofeedback(&y, &cb).unwrap());
        }
        assert_eq!(decode_nofeedback(cb.codeword(3), &cb).unwrap(), 3);
        assert!(phase1_loglik(&[0.0; 3], &cb).is_err());
    }

    #[test]
    fn pairwise_difference_is_x_statistic() {
        let m = 4;
        let a1 = 6.0;
        let cb = make_simplex(m, a1, m - 1).unwrap();
        let a3 = m as f64 * a1 / (m as f64 - 1.0);
        let xi = [0.3, -1.2, 0.7];
        let y: Vec<f64> = cb.codeword(0).iter().zip(&xi).map(|(a, b)| a + b).collect();
        let l = phase1_loglik(&y, &cb).unwrap();
        let diff: Vec<f64> = cb.codeword(1).iter().zip(cb.codeword(0)).map(|(a, b)| a - b).collect();
        assert_relative_eq!(l[1] - l[0], -a3 + dot(&diff, &xi), max_relative = 1e-12);
    }

    #[test]
    fn sigma_zero_is_single_codebook_likelihood() {
        let sch = scheme(4, 10.0, 0.0, 0.1);
        let t = sch.run_session(2, &SessionStreams::new(8, 3)).unwrap();
        let mut dec = Decoder::new(&sch, DecoderSettings::default()).unwrap();
        let got = dec
            .phase2_posterior_loglik(&t.y1, &t.y2, &NoiseStream::new(1, 1))
            .unwrap();
        let want = phase1_loglik(&t.y2, &t.phase2_code).unwrap();
        for (g, w) in got.iter().zip(&want) {
            assert_relative_eq!(g, w, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn infinite_threshold_is_plain_simplex() {
        let sch = scheme(5, 16.0, 0.7, f64::INFINITY);
        let t = sch.run_session(1, &SessionStreams::new(2, 9)).unwrap();
        let want = phase1_loglik(&t.y2, sch.phase2_simplex()).unwrap();
        for s in [1, 7, 300] {
            for shared in [true, false] {
                let set = DecoderSettings {
                    inner_samples: s,
                    shared_randomness: shared,
                    mode: DecoderMode::FullBayes,
                };
                let got = Decoder::new(&sch, set)
                    .unwrap()
                    .phase2_posterior_loglik(&t.y1, &t.y2, &NoiseStream::new(5, 5))
                    .unwrap();
                for (g, w) in got.iter().zip(&want) {
                    assert_relative_eq!(g, w, max_relative = 1e-9, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn case2_noiseless_feedback_decides_pair_by_sign() {
        let p = SchemeParams::with_total_energy(12.0, 4, 0.0, 0.5, 0.0).unwrap();
        let sch = Scheme::new(p).unwrap();
        // y1 between codewords 0 and 1, far from 2 and 3: Case 2 with pair (0, 1)
        let c = sch.phase1_code();
        let y1: Vec<f64> = c
            .codeword(0)
            .iter()
            .zip(c.codeword(1))
            .map(|(a, b)| 0.51 * a + 0.49 * b)
            .collect();
        let rk = rank_distances(c, &y1).unwrap();
        assert_eq!(rk.top2(), [0, 1]);
        let cb2 = build_phase2_code(&rk, Case::Case2, &p).unwrap();
        let axis = cb2.codeword(0).to_vec();
        let mut dec = Decoder::new(&sch, DecoderSettings::default()).unwrap();
        for sign in [1.0, -1.0] {
            let y2: Vec<f64> = axis.iter().map(|v| sign * 3.0 * v).collect();
            let want = if sign > 0.0 { 0 } else { 1 };
            assert_eq!(dec.decode(&y1, &y2, &NoiseStream::zeros()).unwrap(), want);
        }
    }

    #[test]
    fn noiseless_sessions_decode_exactly() {
        for m in [3, 4, 7] {
            let sch = scheme(m, 8.0, 0.0, 0.2);
            let mut dec = Decoder::new(&sch, DecoderSettings::default()).unwrap();
            for msg in 0..m {
                let t = sch.run_session(msg, &SessionStreams::noiseless()).unwrap();
                assert_eq!(dec.decode(&t.y1, &t.y2, &NoiseStream::zeros()).unwrap(), msg);
            }
            let sch = scheme(m, 8.0, 0.5, 0.2);
            let mut dec = Decoder::new(&sch, DecoderSettings::default()).unwrap();
            for msg in 0..m {
                let t = sch.run_session(msg, &SessionStreams::noiseless()).unwrap();
                assert_eq!(dec.decode(&t.y1, &t.y2, &NoiseStream::new(0, 0)).unwrap(), msg);
            }
        }
    }

    #[test]
    fn shared_randomness_replays_bit_exactly() {
        let sch = scheme(5, 12.0, 0.4, 0.1);
        let t = sch.run_session(3, &SessionStreams::new(11, 0)).unwrap();
        let st = NoiseStream::new(11, 3);
        let mut a = Decoder::new(&sch, DecoderSettings::default()).unwrap();
        let mut b = a.clone();
        let la = a.phase2_posterior_loglik(&t.y1, &t.y2, &st).unwrap();
        let lb = b.phase2_posterior_loglik(&t.y1, &t.y2, &st).unwrap();
        assert_eq!(la, lb);
        assert_eq!(
            a.decode(&t.y1, &t.y2, &st).unwrap(),
            b.decode(&t.y1, &t.y2, &st).unwrap()
        );
    }

    #[test]
    fn extreme_energies_stay_finite() {
        for total in [1e-6, 1e4, 1e7] {
            let sch = scheme(4, total, 0.3, 0.05);
            let t = sch.run_session(0, &SessionStreams::new(1, 2)).unwrap();
            let mut y2 = t.y2.clone();
            y2.iter_mut().for_each(|v| *v *= 1e3);
            for shared in [true, false] {
                let set = DecoderSettings {
                    inner_samples: 64,
                    shared_randomness: shared,
                    mode: DecoderMode::FullBayes,
                };
                let l = Decoder::new(&sch, set)
                    .unwrap()
                    .phase2_posterior_loglik(&t.y1, &y2, &NoiseStream::new(2, 2))
                    .unwrap();
                assert!(l.iter().all(|v| v.is_finite()), "{l:?}");
            }
        }
    }

    #[test]
    fn log_sum_exp_matches_direct() {
        let vals = [-3.0, 0.5, 2.0, -700.0, 1.0];
        let mut acc = LogSumExp::EMPTY;
        vals.iter().for_each(|&v| acc.push(v));
        let direct: f64 = vals.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert_relative_eq!(acc.value(), direct, max_relative = 1e-14);
        let mut big = LogSumExp::EMPTY;
        [1e4, 1e4].iter().for_each(|&v| big.push(v));
        assert_relative_eq!(big.value(), 1e4 + 2f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn zero_inner_samples_rejected() {
        let sch = scheme(3, 4.0, 0.1, 0.1);
        let set = DecoderSettings {
            inner_samples: 0,
            ..Default::default()
        };
        assert!(Decoder::new(&sch, set).is_err());
    }

    #[test]
    fn decode_shift_invariance() {
        // adding a constant to every hypothesis leaves the argmax unchanged
        let l = vec![0.2, 1.5, -0.3];
        let shifted: Vec<f64> = l.iter().map(|v| v + 1e3).collect();
        assert_eq!(argmax(l.into_iter()), argmax(shifted.into_iter()));
    }
}
