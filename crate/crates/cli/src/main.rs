use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use noisyfb::bounds::{run_validation, write_validation_csv, ValidationSpec};
use noisyfb::exponent::{f1_lower, f1_lower_with_dump};
use noisyfb::geometry::{gram_check, make_quasi_equidistant, make_simplex, EXACT_TOL};
use noisyfb::harness::{
    fit_slope, resolve_points, run_monte_carlo, sweep, transcripts, write_sweep_csv, Manifest, SlopePoint, SweepAxis,
    SweepSpec, Tunable,
};
use noisyfb::{DecoderMode, ExponentBreakdown, RunConfig, SchemeParams};

#[derive(Parser)]
#[command(
    name = "noisyfb",
    version,
    about = "Zero-rate AWGN coding with noisy passive feedback"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Number of trials; overrides the config.
    #[arg(long, global = true)]
    trials: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

/// Scheme parameters given on the command line. Each one overrides the config.
#[derive(Args, Default)]
struct PointArgs {
    /// Per-symbol power A.
    #[arg(short = 'A', long = "power")]
    a: Option<f64>,
    /// Number of messages M.
    #[arg(short = 'M', long = "messages")]
    m: Option<usize>,
    /// Block length n (default 2M - 2).
    #[arg(short = 'n', long)]
    n: Option<usize>,
    /// Feedback noise standard deviation.
    #[arg(long)]
    sigma: Option<f64>,
    /// Phase-II energy ratio, or "auto".
    #[arg(long)]
    beta: Option<String>,
    /// Switching threshold, or "auto".
    #[arg(long)]
    tau0: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate b1, b2, b3 at one (beta, tau0).
    Exponent {
        #[command(flatten)]
        point: PointArgs,
    },
    /// Maximize min(b1, b2, b3) over (beta, tau0).
    Optimize {
        #[command(flatten)]
        point: PointArgs,
        /// Also write every grid point to grid.csv.
        #[arg(long)]
        grid_csv: bool,
    },
    /// Estimate the error probability at one point.
    Simulate {
        #[command(flatten)]
        point: PointArgs,
        /// Keep the first k session transcripts in transcripts.json.
        #[arg(long, value_name = "K")]
        dump_transcripts: Option<u64>,
        /// Simulate the no-feedback simplex baseline instead.
        #[arg(long)]
        no_feedback: bool,
    },
    /// Estimate the error probability along one axis and fit the slope.
    Sweep {
        #[command(flatten)]
        point: PointArgs,
        #[arg(long, value_enum)]
        axis: Option<Axis>,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        #[arg(long)]
        no_feedback: bool,
    },
    /// Write a codebook as CSV plus a JSON header.
    Codegen {
        #[arg(long, value_enum, default_value = "simplex")]
        kind: CodeKind,
        /// Codebook size (simplex) or target size (packing).
        #[arg(short = 'M', long = "messages")]
        m: usize,
        /// Dimension; defaults to M - 1 for a simplex.
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        energy: f64,
        /// Cosine cap for the packing.
        #[arg(long, default_value_t = 0.4)]
        rho: f64,
        /// Candidate budget for the packing.
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Check the ambiguity-probability caps by simulation.
    ValidateBounds {
        /// Number of (M, sigma, statistics) configurations.
        #[arg(long)]
        configs: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        ms: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    TotalEnergy,
    Sigma,
    M,
}

#[derive(Clone, Copy, ValueEnum)]
enum CodeKind {
    Simplex,
    Packing,
}

fn parse_tunable(s: &str) -> Result<Tunable> {
    if s.eq_ignore_ascii_case("auto") {
        return Ok(Tunable::Auto);
    }
    Ok(Tunable::Fixed(s.parse().with_context(|| {
        format!("expected a number or \"auto\", got {s:?}")
    })?))
}

/// Builds the run config from the optional file, then applies flag overrides.
fn load_config(common: &Common, point: &PointArgs) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_path(path).with_context(|| format!("reading {}", path.display()))?,
        None => {
            let (Some(a), Some(m), Some(sigma)) = (point.a, point.m, point.sigma) else {
                bail!("without --config, -A, -M and --sigma are required");
            };
            RunConfig::new(a, m, sigma, 1)
        }
    };
    if let Some(v) = point.a {
        cfg.a = v;
    }
    if let Some(v) = point.m {
        cfg.m = v;
    }
    if point.n.is_some() {
        cfg.n = point.n;
    }
    if let Some(v) = point.sigma {
        cfg.sigma = v;
    }
    if let Some(v) = &point.beta {
        cfg.beta = parse_tunable(v)?;
    }
    if let Some(v) = &point.tau0 {
        cfg.tau0 = parse_tunable(v)?;
    }
    if let Some(v) = common.seed {
        cfg.seed = v;
    }
    if let Some(v) = common.trials {
        cfg.trials = v;
    }
    if let Some(v) = &common.out {
        cfg.output.dir = v.clone();
    }
    Ok(cfg)
}

fn out_dir(common: &Common, cfg: Option<&RunConfig>) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| cfg.map(|c| c.output.dir.clone()))
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    Ok(BufWriter::new(
        File::create(&path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(create(dir, name)?, value)?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn fixed(t: Tunable, name: &str) -> Result<f64> {
    match t {
        Tunable::Fixed(v) => Ok(v),
        Tunable::Auto => bail!("exponent needs a fixed {name}; use `optimize` to choose it"),
    }
}

fn exponent(common: &Common, point: &PointArgs) -> Result<()> {
    let cfg = load_config(common, point)?;
    let p = SchemeParams::new(
        cfg.a,
        cfg.block_len(),
        cfg.m,
        cfg.sigma,
        fixed(cfg.beta, "beta")?,
        fixed(cfg.tau0, "tau0")?,
    )?;
    let b = ExponentBreakdown::new(&p)?.with_finite_n(&p);
    let dir = out_dir(common, Some(&cfg))?;
    write_json(
        &dir,
        "exponent.json",
        &json!({ "params": p, "exponents": b, "gain": b.gain() }),
    )?;
    Manifest::new("exponent", &cfg, resolve_points(&cfg)?, vec![]).write(&dir.join("manifest.json"))?;
    print_json(&b)
}

fn optimize(common: &Common, point: &PointArgs, grid_csv: bool) -> Result<()> {
    let cfg = load_config(common, point)?;
    let grid = cfg.optimizer.unwrap_or_default();
    let run = if grid_csv { f1_lower_with_dump } else { f1_lower };
    let r = run(cfg.m, cfg.a, cfg.sigma, &grid)?;
    let dir = out_dir(common, Some(&cfg))?;
    write_json(&dir, "optimize.json", &r)?;
    if grid_csv {
        r.write_grid_csv(create(&dir, "grid.csv")?)?;
    }
    let mut fixed_cfg = cfg.clone();
    fixed_cfg.beta = Tunable::Fixed(r.beta);
    fixed_cfg.tau0 = Tunable::Fixed(r.tau0);
    Manifest::new("optimize", &cfg, resolve_points(&fixed_cfg)?, vec![]).write(&dir.join("manifest.json"))?;
    print_json(&r)
}

fn simulate(common: &Common, point: &PointArgs, dump: Option<u64>, no_feedback: bool) -> Result<()> {
    let mut cfg = load_config(common, point)?;
    cfg.sweep = None;
    if no_feedback {
        cfg.decoder.mode = DecoderMode::NoFeedbackMl;
    }
    let warnings = cfg.validate()?;
    warn_all(&warnings);
    let resolved = resolve_points(&cfg)?;
    let est = run_monte_carlo(&cfg)?;
    let dir = out_dir(common, Some(&cfg))?;
    write_json(&dir, "estimate.json", &json!({ "point": resolved[0], "estimate": est }))?;
    if let Some(k) = dump {
        if !cfg.feedback() {
            bail!("--dump-transcripts needs the feedback scheme");
        }
        write_json(&dir, "transcripts.json", &transcripts(&cfg, k)?)?;
    }
    Manifest::new("simulate", &cfg, resolved, warnings).write(&dir.join("manifest.json"))?;
    print_json(&est)
}

fn run_sweep(
    common: &Common,
    point: &PointArgs,
    axis: Option<Axis>,
    values: Option<Vec<f64>>,
    no_feedback: bool,
) -> Result<()> {
    let mut cfg = load_config(common, point)?;
    if no_feedback {
        cfg.decoder.mode = DecoderMode::NoFeedbackMl;
    }
    match (axis, values) {
        (Some(a), Some(v)) => {
            let axis = match a {
                Axis::TotalEnergy => SweepAxis::TotalEnergy,
                Axis::Sigma => SweepAxis::Sigma,
                Axis::M => SweepAxis::M,
            };
            cfg.sweep = Some(SweepSpec { axis, values: v });
        }
        (None, None) => {}
        _ => bail!("--axis and --values must be given together"),
    }
    if cfg.sweep.is_none() {
        bail!("no sweep configured; give [sweep] in the config or --axis and --values");
    }
    let warnings = cfg.validate()?;
    warn_all(&warnings);
    let resolved = resolve_points(&cfg)?;
    let rows = sweep(&cfg)?;
    let dir = out_dir(common, Some(&cfg))?;
    write_sweep_csv(&rows, create(&dir, "sweep.csv")?)?;
    if matches!(cfg.sweep.as_ref().map(|s| s.axis), Some(SweepAxis::TotalEnergy)) {
        let pts: Vec<SlopePoint> = rows.iter().map(SlopePoint::from).collect();
        match fit_slope(&pts) {
            Ok(fit) => {
                write_json(&dir, "slope.json", &fit)?;
                eprintln!("slope {:.4} +- {:.4}", fit.slope, fit.stderr);
            }
            Err(e) => eprintln!("slope fit skipped: {e}"),
        }
    }
    Manifest::new("sweep", &cfg, resolved, warnings).write(&dir.join("manifest.json"))?;
    for r in &rows {
        println!(
            "{:>10} p_hat={:.4e} [{:.4e}, {:.4e}] errors={}",
            r.axis_value, r.p_hat, r.ci_low, r.ci_high, r.errors
        );
    }
    Ok(())
}

fn codegen(
    common: &Common,
    kind: CodeKind,
    m: usize,
    dim: Option<usize>,
    energy: f64,
    rho: f64,
    budget: Option<usize>,
) -> Result<()> {
    let dir = out_dir(common, None)?;
    let seed = common.seed.unwrap_or(1);
    let (cb, info) = match kind {
        CodeKind::Simplex => {
            let cb = make_simplex(m, energy, dim.unwrap_or(m.saturating_sub(1).max(1)))?;
            let report = gram_check(&cb, EXACT_TOL);
            if !report.is_equidistant {
                bail!("generated simplex failed its Gram check: {report:?}");
            }
            (cb, json!({ "kind": "simplex", "gram": report }))
        }
        CodeKind::Packing => {
            let Some(n) = dim else {
                bail!("--dim is required for a packing");
            };
            let out = make_quasi_equidistant(n, rho, m, seed, budget)?;
            if !out.complete {
                eprintln!(
                    "warning: packing stopped at {} of {} codewords after {} candidates",
                    out.achieved, out.target, out.candidates_tried
                );
            }
            let info = json!({
                "kind": "packing",
                "rho": rho,
                "target": out.target,
                "achieved": out.achieved,
                "floor": out.floor,
                "candidates_tried": out.candidates_tried,
                "complete": out.complete,
            });
            (out.codebook.scaled(energy)?, info)
        }
    };
    cb.write_csv(create(&dir, "codebook.csv")?)?;
    write_json(&dir, "codebook.json", &cb.header())?;
    write_json(
        &dir,
        "manifest.json",
        &json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": "codegen",
            "seed": seed,
            "codebook": info,
        }),
    )?;
    print_json(&cb.header())
}

fn validate_bounds(
    common: &Common,
    configs: Option<usize>,
    ms: Option<Vec<usize>>,
    sigmas: Option<Vec<f64>>,
) -> Result<()> {
    let mut spec = ValidationSpec::default();
    if let Some(v) = configs {
        spec.configs = v;
    }
    if let Some(v) = ms {
        spec.ms = v;
    }
    if let Some(v) = sigmas {
        spec.sigmas = v;
    }
    if let Some(v) = common.seed {
        spec.seed = v;
    }
    if let Some(v) = common.trials {
        spec.trials = v;
    }
    let rows = run_validation(&spec)?;
    let dir = out_dir(common, None)?;
    write_validation_csv(&rows, create(&dir, "validation.csv")?)?;
    write_json(
        &dir,
        "manifest.json",
        &json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "command": "validate-bounds",
            "seed": spec.seed,
            "spec": spec,
        }),
    )?;
    let failed: Vec<usize> = rows.iter().filter(|r| !r.pass).map(|r| r.config_id).collect();
    println!("{} configurations, {} failed", rows.len(), failed.len());
    if !failed.is_empty() {
        bail!("bound violated in configurations {failed:?}");
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    if let Some(t) = c.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global()?;
    }
    match cli.command {
        Command::Exponent { point } => exponent(c, &point),
        Command::Optimize { point, grid_csv } => optimize(c, &point, grid_csv),
        Command::Simulate {
            point,
            dump_transcripts,
            no_feedback,
        } => simulate(c, &point, dump_transcripts, no_feedback),
        Command::Sweep {
            point,
            axis,
            values,
            no_feedback,
        } => run_sweep(c, &point, axis, values, no_feedback),
        Command::Codegen {
            kind,
            m,
            dim,
            energy,
            rho,
            budget,
        } => codegen(c, kind, m, dim, energy, rho, budget),
        Command::ValidateBounds { configs, ms, sigmas } => validate_bounds(c, configs, ms, sigmas),
    }
}
