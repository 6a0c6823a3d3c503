//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dualspike::bench::{sweep, to_hw_input, EvalConfig, Method, MethodParams, SweepAxis, SweepCell, SweepSpec};
use dualspike::dataio::{generate, SyntheticConfig};
use dualspike::detector::{DetectStatus, EventFormationConfig, WARMUP_SAMPLES};
use dualspike::hw::{hw_detect_channel, hw_detect_multichannel, trace_internal, InterleavedStream};
use dualspike::metrics::{accuracy, match_events, MatchReport};
use dualspike::signal::{FixedPointFormat, QuantizedRecord};
use dualspike::threshold::{std_dev, SigmaEstimatorState, ThresholdCoefficients, CONVERGENCE_FACTOR, FRAME_LEN};
use dualspike::transforms::{smooth2, teo};
use dualspike::{DetectorKind, HwConfig};

const NOISE_POINTS: [f64; 4] = [0.05, 0.1, 0.15, 0.2];
const REPLICATES: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn unit_identities() -> Outcome {
    let constant = teo(&[0.7; 64]).into_vec();
    let const_ok = constant[1..63].iter().all(|&v| v == 0.0);
    let ramp: Vec<f64> = (0..64).map(|k| k as f64 - 20.0).collect();
    let ramp_out = teo(&ramp).into_vec();
    let ramp_ok = ramp_out[1..63].iter().all(|&v| v == 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let x: Vec<f64> = (0..128).map(|_| rng.random_range(-1.0..1.0)).collect();
        let a: f64 = rng.random_range(-100.0..100.0);
        let scaled: Vec<f64> = x.iter().map(|v| a * v).collect();
        let lhs = teo(&scaled).into_vec();
        let rhs = teo(&x).into_vec();
        for (l, r) in lhs.iter().zip(&rhs) {
            // Cancellation makes tiny outputs meaningless in relative terms.
            if r.abs() > 1e-6 {
                worst = worst.max(rel_err(*l, a * a * r));
            }
        }
    }
    outcome(
        const_ok && ramp_ok && worst < 1e-9,
        format!("constant→0 {const_ok}, ramp→1 {ramp_ok}, scale covariance max rel err {worst:.2e}"),
    )
}

fn estimator_convergence() -> Outcome {
    const N: usize = 1_000_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x: Vec<f64> = (0..N).map(|_| rng.sample(StandardNormal)).collect();
    let s = smooth2(&x);

    let mut est = SigmaEstimatorState::new(std_dev(&s[..FRAME_LEN]));

    let mut counts = Vec::new();
    let mut sigmas = Vec::new();
    let mut count = 0;
    for (k, &v) in s.iter().enumerate().skip(FRAME_LEN) {
        if v > est.sigma {
            count += 1;
        }
        if est.step(v) {
            if k >= WARMUP_SAMPLES {
                counts.push(count as f64);
                sigmas.push(est.sigma);
            }
            count = 0;
        }
    }
    let mean_count = counts.iter().sum::<f64>() / counts.len() as f64;
    let mean_sigma = sigmas.iter().sum::<f64>() / sigmas.len() as f64;

    let mut oracle_rng = ChaCha8Rng::seed_from_u64(3);
    let y: Vec<f64> = (0..N).map(|_| oracle_rng.sample(StandardNormal)).collect();
    let mut sy = smooth2(&y);
    sy.sort_by(f64::total_cmp);
    let q = 1.0 - CONVERGENCE_FACTOR as f64 / FRAME_LEN as f64;
    let quantile = sy[(q * N as f64) as usize];
    let err = rel_err(mean_sigma, quantile);

    outcome(
        (mean_count - CONVERGENCE_FACTOR as f64).abs() <= 3.0 && err <= 0.10,
        format!("mean count {mean_count:.2}, σ {mean_sigma:.4} vs quantile {quantile:.4} ({:.1}%)", err * 100.0),
    )
}

fn random_channel(rng: &mut ChaCha8Rng, frames: usize) -> Vec<i64> {
    let noise: f64 = rng.random_range(2.0..20.0);
    let spike_rate: f64 = rng.random_range(0.0..0.01);
    let mut codes = Vec::with_capacity(frames);
    let mut burst = 0i32;
    for _ in 0..frames {
        if burst == 0 && rng.random_bool(spike_rate) {
            burst = 8;
        }
        let spike = if burst > 0 {
            burst -= 1;
            -60.0 * (burst as f64 * 0.8).sin()
        } else {
            0.0
        };
        let v: f64 = noise * rng.sample::<f64, _>(StandardNormal) + spike;
        codes.push((v.round() as i64).clamp(-64, 63));
    }
    codes
}

fn scheduler_transparency() -> Outcome {
    let cfg = HwConfig::default();
    let coeffs = ThresholdCoefficients::default_hw();
    let evt = EventFormationConfig::for_rate(cfg.rate_hz);
    let fmt = FixedPointFormat::signed(cfg.input_bits).unwrap();
    let frames = WARMUP_SAMPLES + 600;
    let mut mismatches = 0;
    let mut events = 0;
    for r in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + r);
        let per_channel: Vec<Vec<i64>> = (0..cfg.channels).map(|_| random_channel(&mut rng, frames)).collect();
        let stream = InterleavedStream::interleave(&per_channel).unwrap();
        let multi = hw_detect_multichannel(&stream, &cfg, &coeffs, &evt).unwrap();
        for (ch, codes) in per_channel.into_iter().enumerate() {
            let q = QuantizedRecord::new(codes, fmt, cfg.rate_hz, ch as u32, 1.0).unwrap();
            let single = hw_detect_channel(&q, &cfg, &coeffs, &evt).unwrap();
            events += single.len();
            if single != multi[ch] || single.status != DetectStatus::Ok {
                mismatches += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && events > 0,
        format!("100 records × 256 channels, {events} events, {mismatches} mismatching channels"),
    )
}

fn corpus_configs() -> Vec<SyntheticConfig> {
    NOISE_POINTS
        .iter()
        .flat_map(|&noise_level| {
            (0..REPLICATES as u64).map(move |seed| SyntheticConfig {
                noise_level,
                seed,
                ..Default::default()
            })
        })
        .collect()
}

fn fixed_point_closure() -> Outcome {
    let cfg = HwConfig::default();
    let coeffs = ThresholdCoefficients::default_hw();
    let formats = [
        cfg.input_format(),
        cfg.smoothed_format(),
        cfg.xteo_format(),
        cfg.steo_format(),
        cfg.threshold_format(),
        cfg.threshold_format(),
        cfg.sigma_format(),
    ];
    let mut rows = 0usize;
    let mut escapes = 0usize;
    let mut panics = 0usize;
    for sc in corpus_configs() {
        let (rec, truth) = generate(&sc).unwrap();
        let (q, _) = to_hw_input(&rec, &truth, &cfg).unwrap();
        match catch_unwind(AssertUnwindSafe(|| trace_internal(&q, &cfg, &coeffs).unwrap())) {
            Ok(trace) => {
                rows += trace.len();
                for r in &trace {
                    let vals = [r.x, r.s, r.x_teo, r.s_teo, r.thr_x, r.thr_s, r.sigma_q];
                    escapes += vals.iter().zip(&formats).filter(|(v, f)| !f.contains(**v)).count();
                }
            }
            Err(_) => panics += 1,
        }
    }
    outcome(
        escapes == 0 && panics == 0 && rows > 0,
        format!(
            "{rows} samples traced (debug assertions {}), {escapes} escapes, {panics} assertion failures",
            if cfg!(debug_assertions) { "on" } else { "off" }
        ),
    )
}

fn noise_sweep() -> Vec<SweepCell> {
    let spec = SweepSpec {
        axis: SweepAxis::NoiseLevel,
        points: NOISE_POINTS.to_vec(),
        detectors: vec![
            Method::Float(DetectorKind::Dual),
            Method::Float(DetectorKind::TeoSingle),
            Method::Float(DetectorKind::At),
            Method::Float(DetectorKind::Dvt),
            Method::Float(DetectorKind::Mae),
            Method::DualHw,
        ],
        replicates: REPLICATES,
        base_cfg: SyntheticConfig::default(),
    };
    sweep(&spec, &MethodParams::default(), &EvalConfig::default()).unwrap()
}

fn cell(cells: &[SweepCell], detector: &str, point: f64) -> f64 {
    cells
        .iter()
        .find(|c| c.detector == detector && c.point == point)
        .unwrap_or_else(|| panic!("missing cell {detector} @ {point}"))
        .mean_accuracy
}

fn mean_over_points(cells: &[SweepCell], detector: &str) -> f64 {
    NOISE_POINTS.iter().map(|&p| cell(cells, detector, p)).sum::<f64>() / NOISE_POINTS.len() as f64
}

fn float_accuracy(cells: &[SweepCell]) -> Outcome {
    let mean = mean_over_points(cells, "DUAL");
    let high = cell(cells, "DUAL", 0.2);
    outcome(
        mean >= 0.97 && high >= 0.95,
        format!("mean {:.2}%, noise 0.2 {:.2}%", mean * 100.0, high * 100.0),
    )
}

fn hardware_gap(cells: &[SweepCell]) -> Outcome {
    let float = mean_over_points(cells, "DUAL");
    let hw = mean_over_points(cells, "DUAL_HW");
    let gap = (float - hw) * 100.0;
    outcome(
        gap.abs() <= 2.5,
        format!("float {:.2}%, fixed-point {:.2}%, gap {gap:.2} points", float * 100.0, hw * 100.0),
    )
}

fn ordering(cells: &[SweepCell]) -> Outcome {
    let dominance = NOISE_POINTS
        .iter()
        .all(|&p| cell(cells, "DUAL", p) >= cell(cells, "TEO_SINGLE", p));
    let drop = |d: &str| (cell(cells, d, 0.05) - cell(cells, d, 0.2)) * 100.0;
    let baselines: Vec<(&str, f64)> = ["AT", "DVT", "MAE"].iter().map(|&d| (d, drop(d))).collect();
    let baselines_ok = baselines.iter().all(|(_, v)| *v >= 5.0);
    let dual = drop("DUAL");
    let detail = baselines
        .iter()
        .map(|(d, v)| format!("{d} −{v:.1}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        dominance && baselines_ok && dual <= 2.0,
        format!("dual ≥ TEO_SINGLE everywhere {dominance}; drops {detail}, DUAL −{dual:.2}"),
    )
}

fn resolution_robustness() -> Outcome {
    let spec = SweepSpec {
        axis: SweepAxis::ResolutionBits,
        points: vec![4.0, 8.0],
        detectors: vec![Method::Float(DetectorKind::Dual)],
        replicates: REPLICATES,
        base_cfg: SyntheticConfig::default(),
    };
    let cells = sweep(&spec, &MethodParams::default(), &EvalConfig::default()).unwrap();
    let four = cell(&cells, "DUAL", 4.0);
    outcome(four >= 0.90, format!("4-bit accuracy {:.2}% at noise 0.1", four * 100.0))
}

/// Largest one-to-one matching by exhaustive search over detection subsets.
fn brute_force_tp(detected: &[usize], truth: &[usize], tol: usize) -> usize {
    fn go(ti: usize, used: u32, d: &[usize], t: &[usize], tol: usize) -> usize {
        if ti == t.len() {
            return 0;
        }
        let mut best = go(ti + 1, used, d, t, tol);
        for (j, &dj) in d.iter().enumerate() {
            if used & (1 << j) == 0 && dj.abs_diff(t[ti]) <= tol {
                best = best.max(1 + go(ti + 1, used | (1 << j), d, t, tol));
            }
        }
        best
    }
    go(0, 0, detected, truth, tol)
}

fn metric_exactness() -> Outcome {
    let exact = accuracy(&MatchReport {
        tp: 95,
        fp: 2,
        fn_: 3,
        tolerance_samples: 0,
    })
    .unwrap()
        == 0.95;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bad_identity = 0;
    let mut above_optimum = 0;
    let mut separated_mismatch = 0;
    for trial in 0..3000 {
        let tol = rng.random_range(0..6usize);
        let nd = rng.random_range(0..=6usize);
        let nt = rng.random_range(0..=6usize);
        let separated = trial % 2 == 0;
        let mut truth: Vec<usize> = if separated {
            let mut t = 0;
            (0..nt)
                .map(|_| {
                    t += 2 * tol + 1 + rng.random_range(0..10usize);
                    t
                })
                .collect()
        } else {
            (0..nt).map(|_| rng.random_range(0..40)).collect()
        };
        let mut det: Vec<usize> = (0..nd).map(|_| rng.random_range(0..40 + 20 * nt)).collect();
        truth.sort_unstable();
        det.sort_unstable();
        let r = match_events(&det, &truth, tol);
        if r.tp + r.fp != det.len() || r.tp + r.fn_ != truth.len() || r.tolerance_samples != tol {
            bad_identity += 1;
        }
        let opt = brute_force_tp(&det, &truth, tol);
        if r.tp > opt {
            above_optimum += 1;
        }
        if separated && r.tp != opt {
            separated_mismatch += 1;
        }
    }
    outcome(
        exact && bad_identity == 0 && above_optimum == 0 && separated_mismatch == 0,
        format!(
            "accuracy(95,2,3)=0.95 {exact}; 3000 random matchings: {bad_identity} identity violations, \
             {above_optimum} above optimum, {separated_mismatch} separated-case mismatches"
        ),
    )
}

fn run_cli(args: &[&str]) -> bool {
    let status = Command::new(env!("CARGO_BIN_EXE_dualspike"))
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .expect("cli runs");
    status.success()
}

fn cli_run_all(dir: &Path) -> bool {
    let d = |name: &str| dir.join(name).to_string_lossy().into_owned();
    let gen_cfg = d("gen.toml");
    fs::write(&gen_cfg, "duration_s = 6.0\nnoise_level = 0.1\n").unwrap();
    let sweep_spec = d("sweep.toml");
    fs::write(
        &sweep_spec,
        "axis = \"noise_level\"\npoints = [0.05, 0.2]\ndetectors = [\"DUAL\", \"AT\", \"DUAL_HW\"]\n\
         replicates = 2\n[base_cfg]\nduration_s = 3.0\n",
    )
    .unwrap();
    let corpus = d("corpus");
    let ok = [
        run_cli(&["generate", "--config", &gen_cfg, "--out", &corpus, "--seed", "7"]),
        run_cli(&[
            "detect",
            "--record",
            &format!("{corpus}/record.f32"),
            "--truth",
            &format!("{corpus}/record.truth.csv"),
            "--out",
            &d("events.csv"),
        ]),
        run_cli(&[
            "detect",
            "--hw",
            "--record",
            &format!("{corpus}/record.f32"),
            "--truth",
            &format!("{corpus}/record.truth.csv"),
            "--out",
            &d("events_hw.csv"),
        ]),
        run_cli(&["trace", "--record", &format!("{corpus}/record.f32"), "--out", &d("trace.csv")]),
        run_cli(&["sweep", "--spec", &sweep_spec, "--out", &d("sweep"), "--seed", "3"]),
        run_cli(&["calibrate", "--corpus", &corpus, "--target", "float", "--out", &d("coeffs.txt")]),
        run_cli(&["calibrate", "--corpus", &corpus, "--target", "baselines", "--out", &d("baselines.toml")]),
    ];
    ok.iter().all(|&b| b)
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ran = cli_run_all(a.path()) && cli_run_all(b.path());
    let fa = files(a.path());
    let fb = files(b.path());
    let differing: Vec<&str> = fa
        .iter()
        .zip(&fb)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    outcome(
        ran && fa.len() == fb.len() && differing.is_empty(),
        format!("{} files per run, differing: {differing:?}", fa.len()),
    )
}

fn report(n: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    report_with(n, name, limit, Duration::ZERO, f)
}

/// `shared` is time spent on inputs computed once for several criteria.
fn report_with(n: usize, name: &str, limit: Option<Duration>, shared: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = f();
    let dt = t0.elapsed() + shared;
    let in_time = limit.is_none_or(|l| dt <= l);
    let pass = o.pass && in_time;
    let budget = limit.map(|l| format!(" / {}s", l.as_secs())).unwrap_or_default();
    println!(
        "{} criterion {n:>2} {name}: {} [{:.1}s{budget}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        dt.as_secs_f64()
    );
    pass
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut results = vec![
        report(1, "unit identities", secs(1), unit_identities),
        report(2, "estimator convergence", secs(10), estimator_convergence),
        report(3, "scheduler transparency", secs(30), scheduler_transparency),
        report(4, "fixed-point closure", None, fixed_point_closure),
    ];

    let t0 = Instant::now();
    let cells = noise_sweep();
    let sweep_time = t0.elapsed();
    results.push(report_with(5, "float accuracy", secs(300), sweep_time, || float_accuracy(&cells)));
    results.push(report_with(6, "hardware gap", secs(300), sweep_time, || hardware_gap(&cells)));
    results.push(report(7, "ordering", None, || ordering(&cells)));
    results.push(report(8, "resolution robustness", None, resolution_robustness));
    results.push(report(9, "metric exactness", None, metric_exactness));
    results.push(report(10, "determinism", None, determinism));

    let failed = results.iter().filter(|&&p| !p).count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
