//! Run configuration, Monte Carlo orchestration and summary statistics.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{NoiseStream, SessionStreams, StreamRole};
use crate::decoder::{decode_nofeedback, Decoder, DecoderMode, DecoderSettings};
use crate::error::{param, Error, Result};
use crate::exponent::{exponent_nofeedback, f1_lower, gaussian_tail, ExponentBreakdown, GridSpec};
use crate::geometry::{make_simplex, Codebook};
use crate::protocol::{Scheme, SchemeParams, Transcript};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959963984540054;

/// Expected error counts below this trigger a warning.
pub const MIN_EXPECTED_ERRORS: f64 = 30.0;

/// A fixed value or `"auto"` (take the optimizer's choice).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TunableRepr", into = "TunableRepr")]
pub enum Tunable {
    Auto,
    Fixed(f64),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TunableRepr {
    Number(f64),
    Word(String),
}

impl TryFrom<TunableRepr> for Tunable {
    type Error = String;
    fn try_from(r: TunableRepr) -> std::result::Result<Self, String> {
        match r {
            TunableRepr::Number(v) => Ok(Self::Fixed(v)),
            TunableRepr::Word(w) if w == "auto" => Ok(Self::Auto),
            TunableRepr::Word(w) => Err(format!("expected a number or \"auto\", got {w:?}")),
        }
    }
}

impl From<Tunable> for TunableRepr {
    fn from(t: Tunable) -> Self {
        match t {
            Tunable::Auto => Self::Word("auto".into()),
            Tunable::Fixed(v) => Self::Number(v),
        }
    }
}

impl fmt::Display for Tunable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Auto => f.write_str("auto"),
            Self::Fixed(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Total energy `nA`; `A` is recomputed as `value / n`.
    TotalEnergy,
    Sigma,
    M,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::TotalEnergy => "total_energy",
            Self::Sigma => "sigma",
            Self::M => "M",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self { dir: default_out_dir() }
    }
}

fn default_seed() -> u64 {
    1
}
fn default_auto() -> Tunable {
    Tunable::Auto
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Per-symbol power.
    #[serde(rename = "A")]
    pub a: f64,
    /// Block length; defaults to `2M - 2`.
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(rename = "M")]
    pub m: usize,
    pub sigma: f64,
    #[serde(default = "default_auto")]
    pub beta: Tunable,
    #[serde(default = "default_auto")]
    pub tau0: Tunable,
    pub trials: u64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub decoder: DecoderSettings,
    #[serde(default)]
    pub optimizer: Option<GridSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    #[serde(default)]
    pub output: OutputSpec,
    /// Test hook: stub every channel noise to zero.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub zero_noise: bool,
}

impl RunConfig {
    /// A config with defaults for everything but the core parameters.
    pub fn new(a: f64, m: usize, sigma: f64, trials: u64) -> Self {
        Self {
            a,
            n: None,
            m,
            sigma,
            beta: Tunable::Auto,
            tau0: Tunable::Auto,
            trials,
            seed: default_seed(),
            decoder: DecoderSettings::default(),
            optimizer: None,
            sweep: None,
            output: OutputSpec::default(),
            zero_noise: false,
        }
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        Ok(toml::from_str(s)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn feedback(&self) -> bool {
        self.decoder.mode == DecoderMode::FullBayes
    }

    pub fn block_len(&self) -> usize {
        self.n.unwrap_or(2 * self.m.max(2) - 2)
    }

    /// Checks the config and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.trials == 0 {
            return Err(param("trials must be >= 1"));
        }
        self.decoder.validate()?;
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(param("sweep grid is empty"));
            }
        }
        let mut warnings = Vec::new();
        if self.feedback() && self.sigma > 0.0 && self.decoder.inner_samples == 1 {
            warnings.push("inner_samples = 1: the phase-II mixture estimate has high variance".into());
        }
        for pt in self.points()? {
            let e = pt.crude_error_estimate() * self.trials as f64;
            if e < MIN_EXPECTED_ERRORS {
                warnings.push(format!(
                    "{}: about {e:.1} expected errors (< {MIN_EXPECTED_ERRORS}); estimate will be noisy",
                    pt.label
                ));
            }
        }
        Ok(warnings)
    }

    /// The base point and every sweep point, before optimization.
    fn points(&self) -> Result<Vec<PointSpec>> {
        let base = PointSpec {
            label: "base".into(),
            axis_value: f64::NAN,
            m: self.m,
            n: self.block_len(),
            a: self.a,
            sigma: self.sigma,
        };
        let Some(sweep) = &self.sweep else {
            return Ok(vec![base]);
        };
        sweep
            .values
            .iter()
            .map(|&v| {
                let mut p = base.clone();
                p.axis_value = v;
                match sweep.axis {
                    SweepAxis::TotalEnergy => p.a = v / p.n as f64,
                    SweepAxis::Sigma => p.sigma = v,
                    SweepAxis::M => {
                        if v < 2.0 || v.fract() != 0.0 {
                            return Err(param(format!("M sweep values must be integers >= 2, got {v}")));
                        }
                        p.m = v as usize;
                        p.n = self.n.unwrap_or(2 * p.m - 2);
                    }
                }
                p.label = format!("{}={v}", sweep.axis.name());
                Ok(p)
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct PointSpec {
    label: String,
    axis_value: f64,
    m: usize,
    n: usize,
    a: f64,
    sigma: f64,
}

impl PointSpec {
    /// Pairwise-error estimate for a simplex of total energy `nA`; an upper
    /// guide for the feedback scheme.
    fn crude_error_estimate(&self) -> f64 {
        let e = self.n as f64 * self.a;
        let mf = self.m as f64;
        ((mf - 1.0) * gaussian_tail((e * mf / (2.0 * (mf - 1.0))).sqrt())).min(1.0)
    }
}

/// Parameters of one simulated point after resolving `auto`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedPoint {
    pub axis_value: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub n: usize,
    #[serde(rename = "A")]
    pub a: f64,
    pub sigma: f64,
    /// `None` for the no-feedback baseline.
    pub beta: Option<f64>,
    pub tau0: Option<f64>,
}

impl ResolvedPoint {
    pub fn total_energy(&self) -> f64 {
        self.n as f64 * self.a
    }

    pub fn scheme_params(&self) -> Result<SchemeParams> {
        let (Some(beta), Some(tau0)) = (self.beta, self.tau0) else {
            return Err(param("the no-feedback baseline has no scheme parameters"));
        };
        SchemeParams::new(self.a, self.n, self.m, self.sigma, beta, tau0)
    }
}

fn resolve(cfg: &RunConfig, pt: &PointSpec) -> Result<ResolvedPoint> {
    let mut r = ResolvedPoint {
        axis_value: pt.axis_value,
        m: pt.m,
        n: pt.n,
        a: pt.a,
        sigma: pt.sigma,
        beta: None,
        tau0: None,
    };
    if !cfg.feedback() {
        if pt.m < 2 {
            return Err(param(format!("need M >= 2, got {}", pt.m)));
        }
        return Ok(r);
    }
    let needs_opt = matches!(cfg.beta, Tunable::Auto) || matches!(cfg.tau0, Tunable::Auto);
    let opt = if needs_opt {
        Some(f1_lower(pt.m, pt.a, pt.sigma, &cfg.optimizer.unwrap_or_default())?)
    } else {
        None
    };
    r.beta = Some(match cfg.beta {
        Tunable::Fixed(v) => v,
        Tunable::Auto => opt.as_ref().map(|o| o.beta).unwrap_or_default(),
    });
    r.tau0 = Some(match cfg.tau0 {
        Tunable::Fixed(v) => v,
        Tunable::Auto => opt.as_ref().map(|o| o.tau0).unwrap_or_default(),
    });
    r.scheme_params()?;
    Ok(r)
}

/// Resolves every point of the config (the base point when no sweep is set).
pub fn resolve_points(cfg: &RunConfig) -> Result<Vec<ResolvedPoint>> {
    cfg.points()?.iter().map(|p| resolve(cfg, p)).collect()
}

/// Empirical error probability with a 95% Wilson interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorEstimate {
    pub errors: u64,
    pub trials: u64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `-ln(p_hat) / n`; absent when no errors were seen.
    pub neg_log_p_per_symbol: Option<f64>,
}

impl ErrorEstimate {
    pub fn from_counts(errors: u64, trials: u64, n: usize) -> Self {
        assert!(trials > 0 && errors <= trials);
        let p = errors as f64 / trials as f64;
        let (lo, hi) = wilson_interval(errors, trials, Z95);
        Self {
            errors,
            trials,
            p_hat: p,
            ci_low: lo.min(p),
            ci_high: hi.max(p),
            neg_log_p_per_symbol: (errors > 0).then(|| -p.ln() / n as f64),
        }
    }

    /// Binomial standard error at `p_hat`.
    pub fn std_err(&self) -> f64 {
        (self.p_hat * (1.0 - self.p_hat) / self.trials as f64).sqrt()
    }
}

/// Wilson score interval for `k` successes in `n` trials.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let centre = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

fn session_streams(cfg: &RunConfig, trial: u64) -> SessionStreams {
    let mut s = SessionStreams::new(cfg.seed, trial);
    s.zero_forward = cfg.zero_noise;
    s.zero_feedback = cfg.zero_noise;
    s
}

fn true_message(seed: u64, trial: u64, m: usize) -> usize {
    NoiseStream::for_trial(seed, trial, StreamRole::Message)
        .sampler()
        .next_index(m)
}

/// Simplex of energy `nA` used without feedback (antipodal for `M = 2`).
pub fn baseline_code(pt: &ResolvedPoint) -> Result<Codebook> {
    make_simplex(pt.m, pt.total_energy(), (pt.m - 1).max(1))
}

fn count_errors(cfg: &RunConfig, pt: &ResolvedPoint) -> Result<u64> {
    let trials = cfg.trials;
    if !cfg.feedback() {
        let cb = baseline_code(pt)?;
        let dim = cb.dim();
        return (0..trials)
            .into_par_iter()
            .map_init(
                || vec![0.0; dim],
                |y, t| {
                    let msg = true_message(cfg.seed, t, pt.m);
                    let mut s = session_streams(cfg, t).stream(StreamRole::ForwardPhase1).sampler();
                    for (v, x) in y.iter_mut().zip(cb.codeword(msg)) {
                        *v = x + s.next_normal();
                    }
                    decode_nofeedback(y, &cb).map(|d| u64::from(d != msg))
                },
            )
            .try_reduce(|| 0, |a, b| Ok(a + b));
    }
    let scheme = Scheme::new(pt.scheme_params()?)?;
    let k = pt.m - 1;
    (0..trials)
        .into_par_iter()
        .map_init(
            || {
                (
                    Decoder::new(&scheme, cfg.decoder).expect("validated settings"),
                    vec![0.0; k],
                    vec![0.0; k],
                    vec![0.0; k],
                    vec![0.0; pt.m],
                )
            },
            |(dec, y1, z1, y2, dist), t| {
                let msg = true_message(cfg.seed, t, pt.m);
                scheme.transmit_into(msg, &session_streams(cfg, t), y1, z1, y2, dist);
                let inner = NoiseStream::for_trial(cfg.seed, t, StreamRole::DecoderInner);
                dec.decode(y1, y2, &inner).map(|d| u64::from(d != msg))
            },
        )
        .try_reduce(|| 0, |a, b| Ok(a + b))
}

/// Monte Carlo estimate at one resolved point.
pub fn estimate_point(cfg: &RunConfig, pt: &ResolvedPoint) -> Result<ErrorEstimate> {
    let errors = count_errors(cfg, pt)?;
    Ok(ErrorEstimate::from_counts(errors, cfg.trials, pt.n))
}

/// Runs `cfg.trials` sessions at the base point.
pub fn run_monte_carlo(cfg: &RunConfig) -> Result<ErrorEstimate> {
    cfg.validate()?;
    let base = RunConfig {
        sweep: None,
        ..cfg.clone()
    };
    let pt = resolve_points(&base)?[0];
    estimate_point(cfg, &pt)
}

/// Replays the first `k` feedback sessions of a run.
pub fn transcripts(cfg: &RunConfig, k: u64) -> Result<Vec<Transcript>> {
    let base = RunConfig {
        sweep: None,
        ..cfg.clone()
    };
    let pt = resolve_points(&base)?[0];
    let scheme = Scheme::new(pt.scheme_params()?)?;
    (0..k.min(cfg.trials))
        .map(|t| scheme.run_session(true_message(cfg.seed, t, pt.m), &session_streams(cfg, t)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axis_value: f64,
    pub p_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub neg_log_p_per_symbol: Option<f64>,
    /// Exponent-engine `min(b1, b2, b3)` at this point (feedback runs only).
    pub theory_min_b: Option<f64>,
    pub theory_e_nofb: f64,
    pub errors: u64,
    pub trials: u64,
    pub total_energy: f64,
    pub beta: Option<f64>,
    pub tau0: Option<f64>,
}

/// One row per sweep value.
pub fn sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    if cfg.sweep.is_none() {
        return Err(param("no sweep axis configured"));
    }
    cfg.validate()?;
    resolve_points(cfg)?
        .iter()
        .map(|pt| {
            let est = estimate_point(cfg, pt)?;
            let theory_min_b = match pt.scheme_params() {
                Ok(p) => Some(ExponentBreakdown::new(&p)?.min_b),
                Err(_) => None,
            };
            Ok(SweepRow {
                axis_value: pt.axis_value,
                p_hat: est.p_hat,
                ci_low: est.ci_low,
                ci_high: est.ci_high,
                neg_log_p_per_symbol: est.neg_log_p_per_symbol,
                theory_min_b,
                theory_e_nofb: exponent_nofeedback(pt.m, pt.a),
                errors: est.errors,
                trials: est.trials,
                total_energy: pt.total_energy(),
                beta: pt.beta,
                tau0: pt.tau0,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

/// Least-squares fit of `-ln p_hat` against total energy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    /// Residual-based OLS standard error (zero with an exact fit).
    pub stderr: f64,
    /// Standard error from binomial count noise alone.
    pub count_stderr: f64,
    pub intercept: f64,
    pub used: Vec<f64>,
    /// Energies dropped for having no errors.
    pub excluded: Vec<f64>,
}

/// A point for [`fit_slope`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopePoint {
    pub energy: f64,
    pub errors: u64,
    pub trials: u64,
}

impl From<&SweepRow> for SlopePoint {
    fn from(r: &SweepRow) -> Self {
        Self {
            energy: r.total_energy,
            errors: r.errors,
            trials: r.trials,
        }
    }
}

pub fn fit_slope(points: &[SlopePoint]) -> Result<SlopeFit> {
    let (used, excluded): (Vec<&SlopePoint>, Vec<&SlopePoint>) = points.iter().partition(|p| p.errors > 0);
    if used.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "slope fit needs 3 points with errors, have {}",
            used.len()
        )));
    }
    let k = used.len() as f64;
    let xs: Vec<f64> = used.iter().map(|p| p.energy).collect();
    let ys: Vec<f64> = used.iter().map(|p| -(p.errors as f64 / p.trials as f64).ln()).collect();
    let xm = xs.iter().sum::<f64>() / k;
    let ym = ys.iter().sum::<f64>() / k;
    let sxx: f64 = xs.iter().map(|x| (x - xm).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InsufficientData("all energies are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - xm) * (y - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let rss: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let stderr = (rss / (k - 2.0) / sxx).sqrt();
    // Var(ln p_hat) ~ (1 - p) / errors
    let count_var: f64 = used
        .iter()
        .zip(&xs)
        .map(|(p, x)| {
            let ph = p.errors as f64 / p.trials as f64;
            (x - xm).powi(2) * (1.0 - ph) / p.errors as f64
        })
        .sum();
    Ok(SlopeFit {
        slope,
        stderr,
        count_stderr: count_var.sqrt() / sxx,
        intercept,
        used: xs,
        excluded: excluded.iter().map(|p| p.energy).collect(),
    })
}

/// Provenance written next to every result file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config: RunConfig,
    pub resolved: Vec<ResolvedPoint>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, cfg: &RunConfig, resolved: Vec<ResolvedPoint>, warnings: Vec<String>) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            config: cfg.clone(),
            resolved,
            warnings,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}
