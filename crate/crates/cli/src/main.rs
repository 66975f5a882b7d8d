mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use headstage::evaluation::{run_comparison, ComparisonReport, EvaluationError, Scheme};
use headstage::optimizer::{optimize_array, ElectrodeProfile};
use headstage::predictor::{load_or_train, MlpModel};
use headstage::synth::SyntheticDataset;
use headstage::telemetry::{run_session, Fault, SessionLog};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "headstage", version, about = "Adaptive-rate neural headstage simulator")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set session.optimizer.epsilon=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Diagnostics written to stderr.
    #[arg(long, value_enum, default_value_t = LogLevel::Info, global = true)]
    log_level: LogLevel,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum LogLevel {
    Off,
    Error,
    Warn,
    Info,
    Debug,
}

impl From<LogLevel> for log::LevelFilter {
    fn from(l: LogLevel) -> Self {
        match l {
            LogLevel::Off => log::LevelFilter::Off,
            LogLevel::Error => log::LevelFilter::Error,
            LogLevel::Warn => log::LevelFilter::Warn,
            LogLevel::Info => log::LevelFilter::Info,
            LogLevel::Debug => log::LevelFilter::Debug,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labelled multi-electrode recording.
    Synth,
    /// Train (or load the cached) error predictor and report held-out MAE.
    Train,
    /// Choose per-electrode rates and thresholds; writes a config vector.
    Optimize,
    /// Stream the dataset through the closed-loop session or a baseline codec.
    Run(RunArgs),
    /// Write the CR-versus-SDE table for every configured scheme.
    Compare(CompareArgs),
    /// Print the full default configuration as TOML.
    Defaults,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RunScheme {
    Adaptive,
    Dct,
    Cs,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long, value_enum, default_value_t = RunScheme::Adaptive)]
    scheme: RunScheme,
    /// Inject a downlink fault: `downlink-drop` or `downlink-corrupt`,
    /// optionally `@EPOCH` (default 1). Repeatable.
    #[arg(long, value_name = "KIND[@EPOCH]")]
    fault: Vec<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Comma-separated schemes (raw, adaptive, uniform, dct, cs); overrides the config.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    /// Output CSV path; `-` for stdout. Defaults to `<output>/compare.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_fault(spec: &str) -> Result<Fault> {
    let (kind, epoch) = match spec.split_once('@') {
        Some((k, e)) => (
            k,
            e.parse::<u16>()
                .with_context(|| format!("bad epoch in fault '{spec}'"))?,
        ),
        None => (spec, 1),
    };
    match kind {
        "downlink-drop" => Ok(Fault::DownlinkDrop { epoch }),
        "downlink-corrupt" => Ok(Fault::DownlinkCorrupt { epoch }),
        _ => bail!("unknown fault '{kind}' (expected downlink-drop or downlink-corrupt)"),
    }
}

/// Reads the dataset directory, or synthesizes the configured dataset in
/// memory when there is none yet.
fn dataset(cfg: &RunConfig) -> Result<SyntheticDataset> {
    let dir = &cfg.paths.dataset;
    if dir.join("trace.json").exists() {
        log::info!("reading dataset from {}", dir.display());
        return SyntheticDataset::read(dir).with_context(|| format!("reading dataset {}", dir.display()));
    }
    log::info!("no dataset at {}; synthesizing from [synth]", dir.display());
    Ok(SyntheticDataset::generate(&cfg.synth, cfg.execution)?)
}

fn model(cfg: &RunConfig) -> Result<MlpModel> {
    let (model, metrics, trained) = load_or_train(&cfg.training, &cfg.paths.models, cfg.execution)?;
    log::info!(
        "predictor {} (held-out MAE fnr {:.4}, fpr {:.4})",
        if trained { "trained" } else { "loaded from cache" },
        metrics.test_mae.fnr,
        metrics.test_mae.fpr
    );
    Ok(model)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let ds = SyntheticDataset::generate(&cfg.synth, cfg.execution)?;
    ds.write(&cfg.paths.dataset)
        .with_context(|| format!("writing dataset to {}", cfg.paths.dataset.display()))?;
    let counts: Vec<usize> = ds
        .electrode_ids()
        .iter()
        .map(|&e| ds.ground_truth(e).event_times_s.len())
        .collect();
    println!(
        "wrote {} channels x {} samples at {} Hz to {}",
        ds.trace.n_channels(),
        ds.trace.channels().first().map_or(0, |c| c.samples.len()),
        cfg.synth.base_rate_hz,
        cfg.paths.dataset.display()
    );
    println!(
        "ground-truth events per electrode: min {} max {}",
        counts.iter().min().unwrap_or(&0),
        counts.iter().max().unwrap_or(&0)
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (_, m, trained) = load_or_train(&cfg.training, &cfg.paths.models, cfg.execution)?;
    println!(
        "{} predictor: {} train / {} test samples, best epoch {} of {}",
        if trained { "trained" } else { "cached" },
        m.n_train,
        m.n_test,
        m.best_epoch,
        m.epochs_run
    );
    println!("held-out MAE: fnr {:.5} fpr {:.5}", m.test_mae.fnr, m.test_mae.fpr);
    Ok(())
}

fn cmd_optimize(cfg: &RunConfig) -> Result<()> {
    let ds = dataset(cfg)?;
    let model = model(cfg)?;
    let profiles = ElectrodeProfile::from_trace(&ds.trace, &ds.templates)?;
    let cv = optimize_array(&profiles, &model, &cfg.session.optimizer, &cfg.clock, 1, cfg.execution)?;
    create_dir(&cfg.paths.output)?;
    let path = cfg.paths.output.join("config.json");
    cv.save(&path)?;
    println!("electrode factor threshold_uv flagged predicted_total");
    for e in &cv.electrodes {
        let total = e.predicted.map_or(f64::NAN, |p| p.fnr + p.fpr);
        println!(
            "{:>9} {:>6} {:>12.1} {:>7} {:>15.4}",
            e.schedule.electrode_id, e.schedule.factor, e.schedule.threshold_uv, e.flagged, total
        );
    }
    println!(
        "mean factor {:.3}, acquisition CR {:.3}, {} flagged; wrote {}",
        cv.mean_factor(),
        cv.compression_ratio(),
        cv.n_flagged(),
        path.display()
    );
    Ok(())
}

fn write_outcomes(log: &SessionLog, path: &Path) -> Result<()> {
    let mut w =
        std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(
        w,
        "electrode_id,factor,threshold_uv,flagged,n_true,n_detected,n_matched,fnr,fpr,sde"
    )?;
    for o in &log.outcomes {
        let r = &o.report;
        writeln!(
            w,
            "{},{},{:.1},{},{},{},{},{:.6},{:.6},{:.6}",
            o.electrode_id,
            o.factor,
            o.threshold_uv,
            o.flagged,
            r.n_true,
            r.n_detected,
            r.n_matched,
            r.fnr,
            r.fpr,
            r.sde
        )?;
    }
    w.flush()?;
    Ok(())
}

fn write_report(report: &ComparisonReport, out: &Path) -> Result<()> {
    if out == Path::new("-") {
        report.write_csv(std::io::stdout().lock())?;
        return Ok(());
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    report.write_csv(fs::File::create(out).with_context(|| format!("creating {}", out.display()))?)?;
    println!("wrote {} rows to {}", report.rows.len(), out.display());
    Ok(())
}

fn cmd_run(cfg: &RunConfig, args: &RunArgs) -> Result<()> {
    let ds = dataset(cfg)?;
    create_dir(&cfg.paths.output)?;
    if args.scheme != RunScheme::Adaptive {
        let scheme = if args.scheme == RunScheme::Dct {
            Scheme::Dct
        } else {
            Scheme::Cs
        };
        let settings = headstage::evaluation::ComparisonSettings {
            schemes: vec![Scheme::Raw, scheme],
            ..cfg.compare.clone()
        };
        // Baselines detect with the raw scheme's thresholds, which the
        // predictor picks.
        let report = run_comparison(&ds, &model(cfg)?, &settings, &cfg.clock, cfg.execution)?;
        let path = cfg.paths.output.join(format!("run-{}.csv", scheme.name()));
        report.write_csv(std::io::stdout().lock())?;
        return write_report(&report, &path);
    }

    let mut settings = cfg.session.clone();
    for f in &args.fault {
        settings.faults.push(parse_fault(f)?);
    }
    let model = model(cfg)?;
    let log = run_session(&ds, &model, &settings, &cfg.clock, cfg.execution)?;
    let log_path = cfg.paths.output.join("session.jsonl");
    log.save(&log_path)
        .with_context(|| format!("writing {}", log_path.display()))?;
    let report_path = cfg.paths.output.join("session-report.csv");
    write_outcomes(&log, &report_path)?;

    let n = log.outcomes.len().max(1) as f64;
    let mean_sde = log.outcomes.iter().map(|o| o.report.sde).sum::<f64>() / n;
    println!(
        "epochs {:?}, stale {:?}; {} events, uplink {} bits vs {} raw",
        log.config_epochs(),
        log.stale_epochs,
        log.n_events(),
        log.uplink_bits,
        log.raw_bits
    );
    if let Some(cv) = log.configs.first() {
        println!(
            "first config: mean factor {:.3}, {} flagged",
            cv.mean_factor(),
            cv.n_flagged()
        );
    }
    println!(
        "mean SDE {mean_sde:.4}; executed {} of {} samples; wrote {} and {}",
        log.cost.total_executed(),
        log.cost.full_rate_count(),
        log_path.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_compare(cfg: &RunConfig, args: &CompareArgs) -> Result<()> {
    let mut settings = cfg.compare.clone();
    if let Some(names) = &args.schemes {
        settings.schemes = names
            .iter()
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Scheme>().map_err(anyhow::Error::msg))
            .collect::<Result<_>>()?;
    }
    if settings.schemes.is_empty() {
        return Err(EvaluationError::NoSchemes.into());
    }
    let ds = dataset(cfg)?;
    let report = run_comparison(&ds, &model(cfg)?, &settings, &cfg.clock, cfg.execution)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.paths.output.join("compare.csv"));
    write_report(&report, &out)?;
    for v in report.cost_contrast_violations() {
        log::warn!("cost contrast: {v}");
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::load(cli.common.config.as_deref(), &cli.common.overrides)?;
    match &cli.command {
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Optimize => cmd_optimize(&cfg),
        Command::Run(a) => cmd_run(&cfg, a),
        Command::Compare(a) => cmd_compare(&cfg, a),
        Command::Defaults => {
            print!("{}", toml::to_string(&cfg)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.common.log_level.into())
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<EvaluationError>(), Some(EvaluationError::NoSchemes)) {
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut("compare") {
                    eprintln!("\n{}", sub.render_long_help());
                }
            }
            ExitCode::FAILURE
        }
    }
}
