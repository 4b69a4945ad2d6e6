//! Forward and feedback Gaussian channels with counter-based noise streams.
//!
//! Every stream is a ChaCha8 keystream keyed by the run's master seed and
//! selected by a 64-bit stream id, so a trial's noise depends only on
//! `(master_seed, trial, role)` and never on which thread ran it. Standard
//! normals are drawn with the ziggurat sampler of `rand_distr`
//! (`StandardNormal`); that choice is part of the reproducibility contract.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// What a stream is used for inside one trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StreamRole {
    ForwardPhase1 = 0,
    ForwardPhase2 = 1,
    Feedback = 2,
    DecoderInner = 3,
    Message = 4,
    Validation = 5,
}

/// Stream ids reserved per trial.
pub const ROLES_PER_TRIAL: u64 = 8;

/// Identifies one reproducible sequence of standard normals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseStream {
    pub master_seed: u64,
    pub stream_id: u64,
    /// Test hook: the stream yields only zeros.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zeroed: bool,
}

impl NoiseStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        Self {
            master_seed,
            stream_id,
            zeroed: false,
        }
    }

    pub fn for_trial(master_seed: u64, trial: u64, role: StreamRole) -> Self {
        Self::new(master_seed, trial * ROLES_PER_TRIAL + role as u64)
    }

    /// A stream of exact zeros.
    pub fn zeros() -> Self {
        Self {
            master_seed: 0,
            stream_id: 0,
            zeroed: true,
        }
    }

    /// Starts reading the stream from its beginning.
    pub fn sampler(&self) -> NormalSampler {
        if self.zeroed {
            return NormalSampler { rng: None };
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(self.stream_id);
        NormalSampler { rng: Some(rng) }
    }
}

/// Cursor over a [`NoiseStream`].
#[derive(Debug, Clone)]
pub struct NormalSampler {
    rng: Option<ChaCha8Rng>,
}

impl NormalSampler {
    #[inline]
    pub fn next_normal(&mut self) -> f64 {
        match &mut self.rng {
            Some(r) => StandardNormal.sample(r),
            None => 0.0,
        }
    }

    pub fn fill(&mut self, out: &mut [f64]) {
        for v in out {
            *v = self.next_normal();
        }
    }

    /// Uniform draw in `[0, 1)`; zero for a zeroed stream.
    pub fn next_uniform(&mut self) -> f64 {
        match &mut self.rng {
            Some(r) => rand::Rng::random::<f64>(r),
            None => 0.0,
        }
    }

    /// Uniform index in `0..n`; zero for a zeroed stream.
    pub fn next_index(&mut self, n: usize) -> usize {
        match &mut self.rng {
            Some(r) => rand::Rng::random_range(r, 0..n),
            None => 0,
        }
    }
}

/// The streams of one simulated trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStreams {
    pub master_seed: u64,
    pub trial: u64,
    #[serde(default)]
    pub zero_forward: bool,
    #[serde(default)]
    pub zero_feedback: bool,
}

impl SessionStreams {
    pub fn new(master_seed: u64, trial: u64) -> Self {
        Self {
            master_seed,
            trial,
            zero_forward: false,
            zero_feedback: false,
        }
    }

    /// Every channel noise stubbed to zero.
    pub fn noiseless() -> Self {
        Self {
            master_seed: 0,
            trial: 0,
            zero_forward: true,
            zero_feedback: true,
        }
    }

    pub fn stream(&self, role: StreamRole) -> NoiseStream {
        let zeroed = match role {
            StreamRole::ForwardPhase1 | StreamRole::ForwardPhase2 => self.zero_forward,
            StreamRole::Feedback => self.zero_feedback,
            _ => false,
        };
        NoiseStream {
            zeroed,
            ..NoiseStream::for_trial(self.master_seed, self.trial, role)
        }
    }
}

/// Forward channel: `y = x + xi` with `xi` i.i.d. standard normal.
pub fn forward(x: &[f64], stream: &NoiseStream) -> Vec<f64> {
    let mut s = stream.sampler();
    x.iter().map(|v| v + s.next_normal()).collect()
}

/// Passive feedback link: `z = y + sigma * eta`. With `sigma == 0` the output
/// is `y` exactly and the stream is not consulted.
pub fn feedback(y: &[f64], sigma: f64, stream: &NoiseStream) -> Vec<f64> {
    assert!(sigma >= 0.0, "feedback noise scale must be non-negative");
    if sigma == 0.0 {
        return y.to_vec();
    }
    let mut s = stream.sampler();
    y.iter().map(|v| v + sigma * s.next_normal()).collect()
}
