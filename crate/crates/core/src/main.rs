use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use dualspike::bench::{
    calibrate_baselines, evaluate, report, standard_training_set, sweep, to_hw_input, EvalConfig, Method,
    MethodParams, ReportFormat, SweepSpec,
};
use dualspike::dataio::{generate, load_ground_truth, load_record, save_record, GroundTruth, SyntheticConfig};
use dualspike::detector::{detect, EventFormationConfig, MAE_WINDOW};
use dualspike::hw::{hw_detect_channel, trace_internal, trace_to_csv, HwConfig};
use dualspike::metrics::accuracy;
use dualspike::threshold::{
    calibrate_coefficients, calibrate_hw, default_grid, CalibrationCorpus, Pipeline, ThresholdCoefficients,
};
use dualspike::{DetectorKind, Error, SignalRecord};

#[derive(Parser)]
#[command(name = "dualspike", version, about = "Dual-TEO spike detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CalibrationTarget {
    Float,
    Hw,
    Baselines,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic record with ground truth.
    Generate {
        /// TOML generator config; defaults are used for missing keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Base name of the files written into OUT.
        #[arg(long, default_value = "record")]
        name: String,
    },
    /// Run a detector on a record and score it against ground truth.
    Detect {
        #[arg(long, default_value = "DUAL")]
        detector: String,
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Use the fixed-point datapath (dual detector only).
        #[arg(long)]
        hw: bool,
        /// Coefficient fixture to use instead of the shipped one.
        #[arg(long)]
        coeffs: Option<PathBuf>,
        /// Write the detected events here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an accuracy sweep and write results.csv and results.py.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the base seed of the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Search threshold coefficients (or baseline multiples) on a corpus.
    Calibrate {
        /// Directory scanned for `<stem>.truth.csv` files next to their records.
        #[arg(long, required_unless_present = "synthetic")]
        corpus: Option<PathBuf>,
        /// Use the built-in synthetic training set instead of a directory.
        #[arg(long, conflicts_with = "corpus")]
        synthetic: bool,
        #[arg(long, value_enum, default_value = "float")]
        target: CalibrationTarget,
        /// With `--target hw`, keep the default LSB drop counts instead of searching them.
        #[arg(long)]
        fixed_drops: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the per-sample integer trace of the fixed-point datapath.
    Trace {
        #[arg(long)]
        record: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        coeffs: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| {
                matches!(
                    c.downcast_ref::<Error>(),
                    Some(Error::InvalidInput(_) | Error::Parse { .. } | Error::FormatMismatch(_))
                )
            });
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            config,
            out,
            seed,
            name,
        } => cmd_generate(config.as_deref(), &out, seed, &name),
        Command::Detect {
            detector,
            record,
            truth,
            hw,
            coeffs,
            out,
        } => cmd_detect(&detector, &record, &truth, hw, coeffs.as_deref(), out.as_deref()),
        Command::Sweep { spec, out, seed } => cmd_sweep(&spec, &out, seed),
        Command::Calibrate {
            corpus,
            synthetic: _,
            target,
            fixed_drops,
            out,
        } => cmd_calibrate(corpus.as_deref(), target, fixed_drops, &out),
        Command::Trace { record, out, coeffs } => cmd_trace(&record, &out, coeffs.as_deref()),
    }
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_generate(config: Option<&Path>, out: &Path, seed: Option<u64>, name: &str) -> anyhow::Result<()> {
    let mut cfg = match config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SyntheticConfig::from_toml(&text, p)?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (record, truth) = generate(&cfg)?;
    create_dir(out)?;
    let rec_path = out.join(format!("{name}.f32"));
    save_record(&rec_path, &record, record.max_abs())?;
    truth.save(&out.join(format!("{name}.truth.csv")))?;
    let manifest = out.join(format!("{name}.manifest.toml"));
    fs::write(&manifest, cfg.to_toml()).with_context(|| format!("writing {}", manifest.display()))?;
    println!(
        "wrote {} ({} samples, {} spikes)",
        rec_path.display(),
        record.len(),
        truth.len()
    );
    Ok(())
}

fn load_coeffs(path: Option<&Path>, hw: bool) -> anyhow::Result<ThresholdCoefficients> {
    Ok(match path {
        Some(p) => ThresholdCoefficients::load(p)?,
        None if hw => ThresholdCoefficients::default_hw(),
        None => ThresholdCoefficients::default_float(),
    })
}

fn cmd_detect(
    detector: &str,
    record: &Path,
    truth: &Path,
    hw: bool,
    coeffs: Option<&Path>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let kind: DetectorKind = detector.parse()?;
    if hw && kind != DetectorKind::Dual {
        return Err(Error::InvalidInput("--hw is only available for the DUAL detector".into()).into());
    }
    let rec = load_record(record)?;
    let gt = load_ground_truth(truth)?;
    gt.check_bounds(rec.len())?;
    let eval = EvalConfig::default();
    let coeffs = load_coeffs(coeffs, hw)?;

    let (events, report) = if hw {
        let cfg = HwConfig::default();
        let (q, t) = to_hw_input(&rec, &gt, &cfg)?;
        let events = hw_detect_channel(&q, &cfg, &coeffs, &EventFormationConfig::for_rate(cfg.rate_hz))?;
        let report = eval.score(&events, &t, cfg.rate_hz);
        (events, report)
    } else {
        let mut params = MethodParams::default();
        params.float.coeffs = coeffs;
        let events = detect(kind, &rec, &params.float, &EventFormationConfig::for_rate(rec.rate_hz()));
        let report = evaluate(Method::Float(kind), &rec, &gt, &params, &eval)?;
        (events, report)
    };
    if let Some(p) = out {
        events.save(p)?;
    }
    let acc = accuracy(&report).map(|a| format!("{a:.6}")).unwrap_or_else(|_| "undefined".into());
    println!(
        "detector={}{} events={} tp={} fp={} fn={} accuracy={}",
        kind.name(),
        if hw { " (fixed-point)" } else { "" },
        events.len(),
        report.tp,
        report.fp,
        report.fn_,
        acc
    );
    Ok(())
}

fn cmd_sweep(spec: &Path, out: &Path, seed: Option<u64>) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec).with_context(|| format!("reading {}", spec.display()))?;
    let mut spec = SweepSpec::from_toml(&text, spec)?;
    if let Some(s) = seed {
        spec.base_cfg.seed = s;
    }
    let cells = sweep(&spec, &MethodParams::default(), &EvalConfig::default())?;
    create_dir(out)?;
    report(&cells, ReportFormat::Csv, &out.join("results.csv"))?;
    report(&cells, ReportFormat::PlotScript, &out.join("results.py"))?;
    for c in &cells {
        println!(
            "{}={} {:<10} {:.4} ± {:.4}",
            c.axis.name(),
            c.point,
            c.detector,
            c.mean_accuracy,
            c.std_accuracy
        );
    }
    Ok(())
}

/// Every `<stem>.truth.csv` under `dir` paired with `<stem>.f32` or `<stem>.csv`.
fn load_corpus(dir: &Path) -> anyhow::Result<Vec<(SignalRecord, GroundTruth)>> {
    let mut truth_files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.to_string_lossy().ends_with(".truth.csv") {
                truth_files.push(path);
            }
        }
    }
    truth_files.sort();
    let mut out = Vec::new();
    for t in truth_files {
        let stem = t.to_string_lossy().trim_end_matches(".truth.csv").to_string();
        let rec_path = [format!("{stem}.f32"), format!("{stem}.csv")]
            .into_iter()
            .map(PathBuf::from)
            .find(|p| p.exists());
        let Some(rec_path) = rec_path else {
            bail!("no record next to {}", t.display());
        };
        let rec = load_record(&rec_path)?;
        let gt = load_ground_truth(&t)?;
        gt.check_bounds(rec.len())?;
        out.push((rec, gt));
    }
    if out.is_empty() {
        return Err(Error::InvalidInput(format!("no records found under {}", dir.display())).into());
    }
    Ok(out)
}

fn cmd_calibrate(corpus: Option<&Path>, target: CalibrationTarget, fixed_drops: bool, out: &Path) -> anyhow::Result<()> {
    let data = match corpus {
        Some(dir) => load_corpus(dir)?,
        None => standard_training_set()?,
    };
    let eval = EvalConfig::default();
    let text = match target {
        CalibrationTarget::Float => {
            let corpus = CalibrationCorpus::new(Pipeline::Float, &data, eval)?;
            let r = calibrate_coefficients(&corpus, &default_grid(&Pipeline::Float))?;
            format!("# mean_accuracy {}\n{}", r.mean_accuracy, r.coeffs.to_fixture())
        }
        CalibrationTarget::Hw => {
            let base = HwConfig::default();
            let (xteo, steo) = if fixed_drops {
                (vec![base.xteo_drop_lsbs], vec![base.steo_drop_lsbs])
            } else {
                (vec![5, 6, 7, 8], vec![4, 5, 6, 7])
            };
            let (cfg, r) = calibrate_hw(base, &data, eval, &xteo, &steo, &default_grid(&Pipeline::Hw(base)))?;
            format!(
                "# mean_accuracy {}\n# xteo_drop_lsbs {}\n# steo_drop_lsbs {}\n{}",
                r.mean_accuracy,
                cfg.xteo_drop_lsbs,
                cfg.steo_drop_lsbs,
                r.coeffs.to_fixture()
            )
        }
        CalibrationTarget::Baselines => {
            let m = calibrate_baselines(&data, &eval, MAE_WINDOW)?;
            format!(
                "at_multiple = {}\ndvt_pos_multiple = {}\ndvt_neg_multiple = {}\nmae_window = {}\nmae_multiple = {}\n",
                m.at, m.dvt_pos, m.dvt_neg, MAE_WINDOW, m.mae
            )
        }
    };
    fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    print!("{text}");
    Ok(())
}

fn cmd_trace(record: &Path, out: &Path, coeffs: Option<&Path>) -> anyhow::Result<()> {
    let rec = load_record(record)?;
    let cfg = HwConfig::default();
    let empty = GroundTruth::new(Vec::new(), None)?;
    let (q, _) = to_hw_input(&rec, &empty, &cfg)?;
    let rows = trace_internal(&q, &cfg, &load_coeffs(coeffs, true)?)?;
    fs::write(out, trace_to_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote {} rows to {}", rows.len(), out.display());
    Ok(())
}
