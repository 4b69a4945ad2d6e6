//! Transmitter side of the one-switching-moment scheme.
//!
//! Phase I sends a simplex codeword of energy `A1` over `M - 1` channel uses.
//! The transmitter ranks the messages by squared distance to its feedback
//! observation `z'` and computes `tau_stat = d(3)t - d(2)t`. If
//! `tau_stat <= tau0 * A3` (Case 1) phase II repeats a simplex code of energy
//! `A2`; otherwise (Case 2) the two transmitter-favoured messages get
//! antipodal codewords on the last phase-II coordinate (the lower message
//! index takes the positive sign) and the remaining `M - 2` messages share a
//! simplex orthogonal to that pair.
//!
//! Messages are 0-based throughout.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::channel::{feedback, SessionStreams, StreamRole};
use crate::error::{contract, param, Result};
use crate::geometry::{dist_sq, make_simplex, Codebook};

/// Scalar parameters of the scheme and their derived energies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SchemeParams {
    /// Per-symbol power budget.
    pub a: f64,
    /// Nominal block length; `n * a` is the total energy.
    pub n: usize,
    pub m: usize,
    pub sigma: f64,
    /// Energy split `A2 / A1`.
    pub beta: f64,
    /// Switching threshold coefficient; `f64::INFINITY` means always Case 1.
    pub tau0: f64,
    pub a1: f64,
    pub a2: f64,
    pub a3: f64,
    pub a4: f64,
    pub mu: f64,
    /// `1 / (4 sigma^2)`, infinite for noiseless feedback.
    pub gamma: f64,
    /// Set when `M > (n + 2) / 2`, i.e. the strict simplex layout does not
    /// fit in `n` channel uses.
    pub quasi_equidistant: bool,
}

impl SchemeParams {
    /// Derives all energies. Fails when `M > (n + 2) / 2`.
    pub fn new(a: f64, n: usize, m: usize, sigma: f64, beta: f64, tau0: f64) -> Result<Self> {
        let p = Self::derive(a, n, m, sigma, beta, tau0)?;
        if p.quasi_equidistant {
            return Err(param(format!(
                "M = {m} exceeds (n + 2) / 2 = {} for n = {n}; enable quasi-equidistant mode",
                (n + 2) as f64 / 2.0
            )));
        }
        Ok(p)
    }

    /// Like [`SchemeParams::new`] but flags, rather than rejects, message
    /// counts beyond the strict simplex layout.
    pub fn allowing_quasi_equidistant(a: f64, n: usize, m: usize, sigma: f64, beta: f64, tau0: f64) -> Result<Self> {
        Self::derive(a, n, m, sigma, beta, tau0)
    }

    /// Parameters on the scheme's own block length `2M - 2` with the given
    /// total energy.
    pub fn with_total_energy(total: f64, m: usize, sigma: f64, beta: f64, tau0: f64) -> Result<Self> {
        if m < 3 {
            return Err(param(format!("the feedback scheme needs M >= 3, got {m}")));
        }
        let n = 2 * m - 2;
        Self::new(total / n as f64, n, m, sigma, beta, tau0)
    }

    fn derive(a: f64, n: usize, m: usize, sigma: f64, beta: f64, tau0: f64) -> Result<Self> {
        if !(a > 0.0 && a.is_finite()) {
            return Err(param(format!("A must be positive, got {a}")));
        }
        if n < 2 {
            return Err(param(format!("n must be >= 2, got {n}")));
        }
        if m < 3 {
            return Err(param(format!("M must be >= 3, got {m}")));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(param(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(param(format!("beta must be positive, got {beta}")));
        }
        if !(tau0 >= 0.0) {
            return Err(param(format!("tau0 must be >= 0, got {tau0}")));
        }
        let total = n as f64 * a;
        let a1 = total / (1.0 + beta);
        let a2 = beta * a1;
        let mf = m as f64;
        let a3 = mf * a1 / (mf - 1.0);
        let a4 = mf * a2 / (mf - 1.0);
        let mu = (mf - 1.0) * beta / mf;
        let gamma = if sigma == 0.0 {
            f64::INFINITY
        } else {
            1.0 / (4.0 * sigma * sigma)
        };
        Ok(Self {
            a,
            n,
            m,
            sigma,
            beta,
            tau0,
            a1,
            a2,
            a3,
            a4,
            mu,
            gamma,
            quasi_equidistant: 2 * m > n + 2,
        })
    }

    pub fn total_energy(&self) -> f64 {
        self.n as f64 * self.a
    }

    /// Phase length: both phases use `M - 1` channel uses.
    pub fn phase_len(&self) -> usize {
        self.m - 1
    }
}

/// Alias matching the operation name used in the docs.
pub fn derive_params(a: f64, n: usize, m: usize, sigma: f64, beta: f64, tau0: f64) -> Result<SchemeParams> {
    SchemeParams::new(a, n, m, sigma, beta, tau0)
}

/// Messages ordered by increasing squared distance to an observation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// `d_i` indexed by message.
    pub raw_distances: Vec<f64>,
    /// `d(1) <= d(2) <= ...`
    pub distances: Vec<f64>,
    /// `permutation[k]` is the message with rank `k` (0 = closest).
    pub permutation: Vec<usize>,
}

#[inline]
fn rank_cmp(d: &[f64], a: usize, b: usize) -> Ordering {
    d[a].total_cmp(&d[b]).then(a.cmp(&b))
}

impl Ranking {
    /// Sorts ascending; equal distances go to the lower message index.
    pub fn from_distances(raw: Vec<f64>) -> Self {
        let mut permutation: Vec<usize> = (0..raw.len()).collect();
        permutation.sort_by(|&a, &b| rank_cmp(&raw, a, b));
        let distances = permutation.iter().map(|&i| raw[i]).collect();
        Self {
            raw_distances: raw,
            distances,
            permutation,
        }
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn top2(&self) -> [usize; 2] {
        [self.permutation[0], self.permutation[1]]
    }
}

/// Squared distances from `obs` to every codeword, sorted.
pub fn rank_distances(cb: &Codebook, obs: &[f64]) -> Result<Ranking> {
    if obs.len() != cb.dim() {
        return Err(contract(format!(
            "observation has dimension {}, codebook has {}",
            obs.len(),
            cb.dim()
        )));
    }
    Ok(Ranking::from_distances(
        cb.codewords().map(|c| dist_sq(obs, c)).collect(),
    ))
}

/// The three closest messages under the same ordering as [`Ranking`].
pub(crate) fn top3(d: &[f64]) -> [usize; 3] {
    debug_assert!(d.len() >= 3);
    let mut t = [0usize, 1, 2];
    t.sort_by(|&a, &b| rank_cmp(d, a, b));
    for i in 3..d.len() {
        if rank_cmp(d, i, t[2]) == Ordering::Less {
            t[2] = i;
            if rank_cmp(d, t[2], t[1]) == Ordering::Less {
                t.swap(1, 2);
                if rank_cmp(d, t[1], t[0]) == Ordering::Less {
                    t.swap(0, 1);
                }
            }
        }
    }
    t
}

/// Which phase-II codebook the transmitter uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Case {
    /// Top three too close to call: reuse the simplex.
    Case1,
    /// Antipodal pair for the top two, orthogonal simplex for the rest.
    Case2,
}

/// Outcome of the switching rule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Switch {
    /// `d(3)t - d(2)t >= 0`.
    pub tau_stat: f64,
    pub case: Case,
}

#[inline]
pub(crate) fn decide(d2: f64, d3: f64, tau0: f64, a3: f64) -> Switch {
    let tau_stat = d3 - d2;
    let case = if tau_stat <= tau0 * a3 {
        Case::Case1
    } else {
        Case::Case2
    };
    Switch { tau_stat, case }
}

/// Applies the switching rule to a transmitter ranking (`M >= 3`).
pub fn switching_decision(rk: &Ranking, p: &SchemeParams) -> Switch {
    assert!(rk.len() >= 3, "switching rule needs at least three messages");
    decide(rk.distances[1], rk.distances[2], p.tau0, p.a3)
}

/// Phase-II code identity: enough to rebuild any codeword.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase2Plan {
    Simplex,
    /// The transmitter's top two messages; `plus < minus`. `plus` gets
    /// `+sqrt(A2)` and `minus` gets `-sqrt(A2)` on the last coordinate.
    Split {
        plus: usize,
        minus: usize,
    },
}

impl Phase2Plan {
    /// The split depends on the top-two set only, not on its internal
    /// order, so the receiver needs to infer just the set.
    pub fn new(top2: [usize; 2], case: Case) -> Self {
        match case {
            Case::Case1 => Self::Simplex,
            Case::Case2 => Self::Split {
                plus: top2[0].min(top2[1]),
                minus: top2[0].max(top2[1]),
            },
        }
    }

    pub fn case(&self) -> Case {
        match self {
            Self::Simplex => Case::Case1,
            Self::Split { .. } => Case::Case2,
        }
    }
}

/// Position of `msg` among the messages outside the antipodal pair, in
/// ascending index order.
#[inline]
pub(crate) fn rest_slot(msg: usize, plus: usize, minus: usize) -> usize {
    msg - usize::from(plus < msg) - usize::from(minus < msg)
}

/// Fixed codebooks of a scheme, built once per parameter set.
#[derive(Debug, Clone)]
pub struct Scheme {
    params: SchemeParams,
    phase1: Codebook,
    phase2_simplex: Codebook,
    /// Simplex of `M - 2` codewords on the first `M - 3` coordinates (M >= 4).
    rest: Option<Codebook>,
}

impl Scheme {
    pub fn new(params: SchemeParams) -> Result<Self> {
        let m = params.m;
        let phase1 = make_simplex(m, params.a1, m - 1)?;
        let phase2_simplex = make_simplex(m, params.a2, m - 1)?;
        let rest = if m >= 4 {
            Some(make_simplex(m - 2, params.a2, m - 3)?)
        } else {
            None
        };
        Ok(Self {
            params,
            phase1,
            phase2_simplex,
            rest,
        })
    }

    pub fn params(&self) -> &SchemeParams {
        &self.params
    }

    pub fn phase1_code(&self) -> &Codebook {
        &self.phase1
    }

    pub fn phase2_simplex(&self) -> &Codebook {
        &self.phase2_simplex
    }

    pub(crate) fn rest_code(&self) -> Option<&Codebook> {
        self.rest.as_ref()
    }

    /// Writes the phase-II codeword of `msg` under `plan` into `out`.
    pub fn phase2_codeword(&self, plan: Phase2Plan, msg: usize, out: &mut [f64]) {
        let m = self.params.m;
        match plan {
            Phase2Plan::Simplex => out.copy_from_slice(self.phase2_simplex.codeword(msg)),
            Phase2Plan::Split { plus, minus } => {
                out.fill(0.0);
                let amp = self.params.a2.sqrt();
                if msg == plus {
                    out[m - 2] = amp;
                } else if msg == minus {
                    out[m - 2] = -amp;
                } else {
                    let k = rest_slot(msg, plus, minus);
                    match &self.rest {
                        Some(rest) => out[..m - 3].copy_from_slice(rest.codeword(k)),
                        None => out[0] = amp,
                    }
                }
            }
        }
    }

    /// Materializes the full phase-II codebook for `plan`.
    pub fn phase2_code(&self, plan: Phase2Plan) -> Codebook {
        let m = self.params.m;
        let mut data = vec![0.0; m * (m - 1)];
        for (i, row) in data.chunks_exact_mut(m - 1).enumerate() {
            self.phase2_codeword(plan, i, row);
        }
        Codebook::new(m, m - 1, self.params.a2, data).expect("phase-II codewords have energy A2")
    }

    /// Transmitter decision from a feedback observation `z1`, using `dist`
    /// (length `M`) as scratch.
    pub(crate) fn plan_from_observation(&self, z1: &[f64], dist: &mut [f64]) -> (Switch, Phase2Plan) {
        for (d, c) in dist.iter_mut().zip(self.phase1.codewords()) {
            *d = dist_sq(z1, c);
        }
        let t = top3(dist);
        let sw = decide(dist[t[1]], dist[t[2]], self.params.tau0, self.params.a3);
        (sw, Phase2Plan::new([t[0], t[1]], sw.case))
    }

    /// Runs one session for `true_msg`, writing the received blocks into the
    /// provided buffers (each of length `M - 1`; `dist` of length `M`).
    pub(crate) fn transmit_into(
        &self,
        true_msg: usize,
        streams: &SessionStreams,
        y1: &mut [f64],
        z1: &mut [f64],
        y2: &mut [f64],
        dist: &mut [f64],
    ) -> (Switch, Phase2Plan) {
        let x1 = self.phase1.codeword(true_msg);
        let mut fwd1 = streams.stream(StreamRole::ForwardPhase1).sampler();
        for (y, x) in y1.iter_mut().zip(x1) {
            *y = x + fwd1.next_normal();
        }
        let sigma = self.params.sigma;
        if sigma == 0.0 {
            z1.copy_from_slice(y1);
        } else {
            let mut fb = streams.stream(StreamRole::Feedback).sampler();
            for (z, y) in z1.iter_mut().zip(y1.iter()) {
                *z = y + sigma * fb.next_normal();
            }
        }
        let (sw, plan) = self.plan_from_observation(z1, dist);
        self.phase2_codeword(plan, true_msg, y2);
        let mut fwd2 = streams.stream(StreamRole::ForwardPhase2).sampler();
        for y in y2.iter_mut() {
            *y += fwd2.next_normal();
        }
        (sw, plan)
    }

    /// Executes a full session and records everything needed to decode or
    /// replay it.
    pub fn run_session(&self, true_msg: usize, streams: &SessionStreams) -> Result<Transcript> {
        let m = self.params.m;
        if true_msg >= m {
            return Err(param(format!("message {true_msg} out of range for M = {m}")));
        }
        let k = m - 1;
        let (mut y1, mut z1, mut y2, mut dist) = (vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; m]);
        let (sw, plan) = self.transmit_into(true_msg, streams, &mut y1, &mut z1, &mut y2, &mut dist);
        let top2 = rank_distances(&self.phase1, &z1)?.top2();
        Ok(Transcript {
            true_message: true_msg,
            phase1_code: self.phase1.clone(),
            y1,
            z1,
            case_taken: sw.case,
            tau_stat: sw.tau_stat,
            transmitter_top2: top2,
            plan,
            phase2_code: self.phase2_code(plan),
            y2,
            streams: *streams,
        })
    }
}

/// Builds the phase-II codebook from a transmitter ranking.
pub fn build_phase2_code(rk: &Ranking, case: Case, p: &SchemeParams) -> Result<Codebook> {
    if rk.len() != p.m {
        return Err(contract(format!("ranking has {} messages, M = {}", rk.len(), p.m)));
    }
    Ok(Scheme::new(*p)?.phase2_code(Phase2Plan::new(rk.top2(), case)))
}

/// Runs a session with freshly built codebooks.
pub fn run_session(true_msg: usize, p: &SchemeParams, streams: &SessionStreams) -> Result<Transcript> {
    Scheme::new(*p)?.run_session(true_msg, streams)
}

/// One complete transmission, immutable once produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub true_message: usize,
    pub phase1_code: Codebook,
    /// Phase-I block at the receiver.
    pub y1: Vec<f64>,
    /// Phase-I block as seen by the transmitter through feedback.
    pub z1: Vec<f64>,
    pub case_taken: Case,
    pub tau_stat: f64,
    pub transmitter_top2: [usize; 2],
    pub plan: Phase2Plan,
    pub phase2_code: Codebook,
    pub y2: Vec<f64>,
    pub streams: SessionStreams,
}

impl Transcript {
    /// Energy actually spent: `|x'|^2 + |x''|^2`.
    pub fn transmitted_energy(&self) -> f64 {
        let e1: f64 = self.phase1_code.codeword(self.true_message).iter().map(|v| v * v).sum();
        let e2: f64 = self.phase2_code.codeword(self.true_message).iter().map(|v| v * v).sum();
        e1 + e2
    }
}

/// Feedback observation as the transmitter would see it for a given `y1`.
pub fn transmitter_view(y1: &[f64], p: &SchemeParams, streams: &SessionStreams) -> Vec<f64> {
    feedback(y1, p.sigma, &streams.stream(StreamRole::Feedback))
}
