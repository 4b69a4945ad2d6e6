//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset: `cargo test -p noisyfb-suite -- 1 3`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use noisyfb::bounds::{run_validation, ValidationSpec};
use noisyfb::decoder::decode_known_code;
use noisyfb::exponent::{asymptotic_large_sigma, exponent_nofeedback, f1_lower, gaussian_tail, GridSpec};
use noisyfb::geometry::{gram_check, make_quasi_equidistant, make_simplex, EXACT_TOL};
use noisyfb::harness::{fit_slope, run_monte_carlo, sweep, SlopePoint, SweepAxis, SweepSpec, Tunable};
use noisyfb::{
    Decoder, DecoderMode, DecoderSettings, NoiseStream, RunConfig, Scheme, SchemeParams, SessionStreams, StreamRole,
};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn small_sigma_optimum() -> Outcome {
    let m = 1_000_000;
    let (r, dt) = timed(|| f1_lower(m, 1.0, 1e-4, &GridSpec::default()).unwrap());
    let beta_star = (5f64.sqrt() - 1.0) / 4.0;
    let want = 1.0 + 1.0 / (2.0 + 5f64.sqrt()) - 1.0 / (2.0 * m as f64);
    let ok = (r.beta - beta_star).abs() <= 0.01 && (r.gain() - want).abs() <= 0.005 && dt.as_secs_f64() < 5.0;
    outcome(
        ok,
        format!(
            "beta* = {:.4} (want {beta_star:.4} +- 0.01), min_b/E = {:.5} (want {want:.5} +- 0.005), tau0 = {}, {:.2?}",
            r.beta,
            r.gain(),
            r.tau0,
            dt
        ),
    )
}

fn large_sigma_regime() -> Outcome {
    let m = 1_000_000;
    let mut ok = true;
    let mut parts = Vec::new();
    for sigma in [5.0, 10.0, 30.0] {
        let (r, dt) = timed(|| f1_lower(m, 1.0, sigma, &GridSpec::default()).unwrap());
        let scaled = (r.gain() - 1.0) * 56.0 * sigma * sigma;
        ok &= (0.8..=1.2).contains(&scaled) && dt.as_secs_f64() < 10.0;
        let predicted = asymptotic_large_sigma(m, 1.0, sigma).unwrap();
        let vs = (r.min_b - r.e_nofb) / (predicted - r.e_nofb);
        parts.push(format!(
            "sigma={sigma}: {scaled:.3} (beta={:.2e}, {vs:.2}x predicted gain, {:.2?})",
            r.beta, dt
        ));
    }
    outcome(ok, format!("(gain - 1) 56 sigma^2 in [0.8, 1.2]: {}", parts.join("; ")))
}

fn strict_positivity() -> Outcome {
    let mut worst = f64::INFINITY;
    let mut where_ = String::new();
    let mut ok = true;
    for m in [3, 10, 100] {
        for sigma in [0.01, 0.03, 0.1, 0.3, 1.0, 3.0, 10.0, 100.0] {
            let r = f1_lower(m, 1.0, sigma, &GridSpec::default()).unwrap();
            let e = exponent_nofeedback(m, 1.0);
            ok &= r.min_b > e;
            let rel = r.min_b / e - 1.0;
            if rel < worst {
                worst = rel;
                where_ = format!("M={m}, sigma={sigma}");
            }
        }
    }
    outcome(ok, format!("smallest relative gain {worst:.3e} at {where_}"))
}

fn binary_baseline() -> Outcome {
    let mut cfg = RunConfig::new(2.0, 2, 0.0, 1_000_000);
    cfg.decoder.mode = DecoderMode::NoFeedbackMl;
    cfg.seed = 20;
    let (est, dt) = timed(|| run_monte_carlo(&cfg).unwrap());
    let p = gaussian_tail(2.0);
    let se = (p * (1.0 - p) / est.trials as f64).sqrt();
    let z = (est.p_hat - p) / se;
    outcome(
        z.abs() <= 3.0 && dt.as_secs_f64() < 30.0,
        format!(
            "p_hat = {:.6}, Phi(-2) = {p:.6}, deviation {z:+.2} s.e., {:.2?}",
            est.p_hat, dt
        ),
    )
}

fn feedback_benefit() -> Outcome {
    let energies = vec![8.0, 12.0, 16.0, 20.0];
    let mut fb = RunConfig::new(1.0, 3, 0.05, 1_000_000);
    fb.seed = 5;
    fb.beta = Tunable::Auto;
    fb.tau0 = Tunable::Auto;
    fb.sweep = Some(SweepSpec {
        axis: SweepAxis::TotalEnergy,
        values: energies,
    });
    let mut nofb = fb.clone();
    nofb.decoder.mode = DecoderMode::NoFeedbackMl;
    let ((rows_fb, rows_nofb), dt) = timed(|| (sweep(&fb).unwrap(), sweep(&nofb).unwrap()));
    let pts = |rows: &[noisyfb::harness::SweepRow]| rows.iter().map(SlopePoint::from).collect::<Vec<_>>();
    let f = fit_slope(&pts(&rows_fb)).unwrap();
    let g = fit_slope(&pts(&rows_nofb)).unwrap();
    let combined = (f.stderr.powi(2) + g.stderr.powi(2)).sqrt();
    let reference = 3.0 / 8.0;
    let ok = f.slope > g.slope - 2.0 * combined
        && (g.slope - reference).abs() <= 0.25 * reference
        && dt.as_secs_f64() < 900.0;
    let counts =
        |rows: &[noisyfb::harness::SweepRow]| rows.iter().map(|r| r.errors.to_string()).collect::<Vec<_>>().join("/");
    outcome(
        ok,
        format!(
            "feedback slope {:.4} +- {:.4}, no-feedback slope {:.4} +- {:.4} (ref 0.375), errors fb {} nofb {}, beta={:.3} tau0={:.3}, {:.1?}",
            f.slope,
            f.stderr,
            g.slope,
            g.stderr,
            counts(&rows_fb),
            counts(&rows_nofb),
            rows_fb[0].beta.unwrap(),
            rows_fb[0].tau0.unwrap(),
            dt
        ),
    )
}

fn bound_validation() -> Outcome {
    let spec = ValidationSpec::default();
    let rows = run_validation(&spec).unwrap();
    let failed: Vec<usize> = rows.iter().filter(|r| !r.pass).map(|r| r.config_id).collect();
    let partition_ok = rows
        .iter()
        .all(|r| ((r.p_hat1 + r.p_hat2 + r.p_hat3 + r.p_hat4) - 1.0).abs() < 1e-12);
    let active3 = rows.iter().filter(|r| r.bound3 < 1.0).count();
    let active1 = rows.iter().filter(|r| r.bound1 < 1.0).count();
    outcome(
        failed.is_empty() && partition_ok && rows.len() == 50,
        format!(
            "{} configs x {} trials, failures {failed:?}, non-vacuous caps p1 {active1} p3 {active3}",
            rows.len(),
            spec.trials
        ),
    )
}

fn geometry_invariants() -> Outcome {
    let mut worst: f64 = 0.0;
    for m in [2, 3, 4, 7, 16, 50] {
        let cb = make_simplex(m, 1.0, m - 1).unwrap();
        let g = cb.gram();
        for i in 0..m {
            for j in 0..m {
                let want = if i == j { 1.0 } else { -1.0 / (m as f64 - 1.0) };
                worst = worst.max((g[i * m + j] - want).abs());
            }
        }
        assert!(gram_check(&cb, EXACT_TOL).is_equidistant);
    }
    let (pk, dt) = timed(|| make_quasi_equidistant(100, 0.4, 1193, 7, None).unwrap());
    let cb = &pk.codebook;
    let mut max_cos: f64 = 0.0;
    for i in 0..cb.len() {
        for j in i + 1..cb.len() {
            let c: f64 = cb.codeword(i).iter().zip(cb.codeword(j)).map(|(a, b)| a * b).sum();
            max_cos = max_cos.max(c.abs());
        }
    }
    let floor = pk.floor.ceil() as usize;
    outcome(
        worst <= 1e-9 && floor == 1193 && pk.achieved >= floor && max_cos <= 0.4 && dt.as_secs_f64() < 60.0,
        format!(
            "Gram deviation {worst:.1e}; packing {} / floor {floor}, max |cos| {max_cos:.4}, {} candidates, {:.2?}",
            pk.achieved, pk.candidates_tried, dt
        ),
    )
}

fn decoder_degeneracy() -> Outcome {
    let p = SchemeParams::with_total_energy(8.0, 4, 0.0, 0.3, 0.1).unwrap();
    let scheme = Scheme::new(p).unwrap();
    let mut dec = Decoder::new(&scheme, DecoderSettings::default()).unwrap();
    let mut disagree = 0;
    let mut errors = 0;
    let mut case2 = 0;
    for t in 0..10_000u64 {
        let msg = NoiseStream::for_trial(3, t, StreamRole::Message)
            .sampler()
            .next_index(4);
        let tr = scheme.run_session(msg, &SessionStreams::new(3, t)).unwrap();
        let inner = NoiseStream::for_trial(3, t, StreamRole::DecoderInner);
        let a = dec.decode(&tr.y1, &tr.y2, &inner).unwrap();
        let b = decode_known_code(&tr.y1, &tr.y2, &tr.phase1_code, &tr.phase2_code).unwrap();
        disagree += usize::from(a != b);
        errors += usize::from(a != msg);
        case2 += usize::from(tr.case_taken == noisyfb::Case::Case2);
    }
    let mut exact = true;
    for m in [3, 4, 6] {
        let sch = Scheme::new(SchemeParams::with_total_energy(5.0, m, 0.0, 0.3, 0.1).unwrap()).unwrap();
        let mut d = Decoder::new(&sch, DecoderSettings::default()).unwrap();
        for msg in 0..m {
            let tr = sch.run_session(msg, &SessionStreams::noiseless()).unwrap();
            exact &= d.decode(&tr.y1, &tr.y2, &NoiseStream::zeros()).unwrap() == msg;
        }
    }
    outcome(
        disagree == 0 && exact,
        format!("{disagree} disagreements in 10^4 trials ({errors} errors, {case2} Case 2 sessions); noiseless exact: {exact}"),
    )
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 8] = [
    (1, "small-sigma optimum", small_sigma_optimum),
    (2, "large-sigma regime", large_sigma_regime),
    (3, "strict positivity of the gain", strict_positivity),
    (4, "M=2 baseline oracle", binary_baseline),
    (5, "empirical benefit of feedback", feedback_benefit),
    (6, "bound validation", bound_validation),
    (7, "geometry invariants", geometry_invariants),
    (8, "decoder degeneracy", decoder_degeneracy),
];

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        for (id, name, _) in CRITERIA {
            println!("criterion {id} ({name}): test");
        }
        return;
    }
    let selected: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, run) in CRITERIA {
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let res = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let tag = if res.pass { "PASS" } else { "FAIL" };
        println!("criterion {id} [{tag}] {name}: {}", res.detail);
        if !res.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all selected criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
