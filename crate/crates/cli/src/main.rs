//! `ice-localizer` command-line driver.
//!
//! Exit codes: 0 on success, 1 for configuration/input errors, 2 for
//! failures while running an otherwise valid experiment.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use ice_localizer::corpus::{generate_synthetic, read_manifest, validate_manifest, SynthConfig};
use ice_localizer::experiment::{
    evaluate_experiment, export_gradcams, load_corpus, render_summary, report, run_experiment_with, CorpusSource,
    ExperimentConfig, Progress, Summary,
};
use ice_localizer::folds::{folds_to_json, make_folds};
use ice_localizer::{Error, ViewLabel};

const DETERMINISTIC_ENV: &str = "ICE_LOCALIZER_DETERMINISTIC";

#[derive(Parser)]
#[command(name = "ice-localizer", version, about = "Pacing-site classification from ICE heartbeat videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Seed for initialization, shuffling, dropout and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 12)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Render frames at the clinical 708x1016 size instead of 177x254.
        #[arg(long)]
        full_size: bool,
    },
    /// Check a config (and its manifest) or a bare manifest.
    Validate {
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Print the fold table.
    Split {
        #[command(flatten)]
        common: Common,
    },
    /// Train (and evaluate) one fold/view cell.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        view: String,
    },
    /// Re-predict completed cells from their checkpoints and rewrite the reports.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        view: Option<String>,
    },
    /// Export Grad-CAM animations for a trained cell's test clips.
    Gradcam {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        view: String,
        /// Destination of the GIFs (default: the cell's gradcam/ directory).
        #[arg(long)]
        dest: Option<PathBuf>,
        /// Export at most this many clips.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Render the tables of an experiment directory.
    Report {
        #[arg(long, required_unless_present = "config")]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Full pipeline: every requested fold and view, then the reports.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        view: Option<String>,
    },
}

fn parse_view(s: &str) -> anyhow::Result<ViewLabel> {
    ViewLabel::parse(s).ok_or_else(|| anyhow!(Error::Config(format!("unknown view `{s}` (expected TV, MV, LPV or CT)"))))
}

fn load_config(c: &Common, fold: Option<usize>, view: Option<&str>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.set_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.output_dir = out.clone();
    }
    if let Some(f) = fold {
        cfg.folds_to_run = Some(vec![f]);
    }
    if let Some(v) = view {
        cfg.views = vec![parse_view(v)?];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_progress(p: Progress<'_>) {
    match p {
        Progress::Skipped { fold, view } => eprintln!("fold {fold} view {view}: already complete"),
        Progress::Started { fold, view } => eprintln!("fold {fold} view {view}: training"),
        Progress::Finished { record } => eprintln!(
            "fold {} view {}: best epoch {} of {} (val {:.2}%, {:?})",
            record.fold, record.view, record.best_epoch, record.epochs_run, record.best_val_accuracy, record.stop_reason
        ),
        Progress::Failed { fold, view, error } => eprintln!("fold {fold} view {view}: failed: {error}"),
    }
}

fn finish(summary: &Summary) -> anyhow::Result<()> {
    print!("{}", render_summary(summary));
    if summary.complete {
        Ok(())
    } else {
        bail!("experiment incomplete: some cells failed or were not run")
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Synth { out, patients, seed, full_size } => {
            let frames = if full_size { SynthConfig::default() } else { SynthConfig::small() };
            let m = generate_synthetic(patients, seed, &frames, &out)?;
            let clips: usize = m.patients.iter().map(|p| p.clips.len()).sum();
            println!("wrote {} ({} patients, {clips} clips)", out.join("manifest.json").display(), m.patients.len());
        }
        Command::Validate { config, manifest } => {
            let manifest = match (config, manifest) {
                (Some(path), _) => {
                    let cfg = ExperimentConfig::from_file(&path)?;
                    cfg.validate()?;
                    println!("config ok: {} cells", cfg.cells().len());
                    match cfg.corpus {
                        CorpusSource::Manifest { path } => path,
                        CorpusSource::Synthetic { .. } => return Ok(()),
                    }
                }
                (None, Some(path)) => path,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let m = read_manifest(&manifest)?;
            let problems = validate_manifest(&m);
            if !problems.is_empty() {
                for p in &problems {
                    eprintln!("{p}");
                }
                return Err(Error::Validation(format!("{} problem(s) in {}", problems.len(), manifest.display())).into());
            }
            println!("manifest ok: {} patients", m.patients.len());
        }
        Command::Split { common } => {
            let cfg = load_config(&common, None, None)?;
            let m = load_corpus(&cfg)?;
            let folds = make_folds(&m.ordering(), cfg.folds.n_folds, cfg.folds.window)?;
            println!("{}", folds_to_json(&folds));
        }
        Command::Train { common, fold, view } => {
            let cfg = load_config(&common, Some(fold), Some(&view))?;
            finish(&run_experiment_with(cfg, &mut print_progress)?)?;
        }
        Command::Run { common, fold, view } => {
            let cfg = load_config(&common, fold, view.as_deref())?;
            finish(&run_experiment_with(cfg, &mut print_progress)?)?;
        }
        Command::Eval { common, fold, view } => {
            let cfg = load_config(&common, fold, view.as_deref())?;
            finish(&evaluate_experiment(cfg)?)?;
        }
        Command::Gradcam { common, fold, view, dest, limit } => {
            let cfg = load_config(&common, Some(fold), Some(&view))?;
            for path in export_gradcams(cfg, fold, parse_view(&view)?, dest.as_deref(), limit)? {
                println!("{}", path.display());
            }
        }
        Command::Report { out, config } => {
            let dir = match (out, config) {
                (Some(out), _) => out,
                (None, Some(c)) => ExperimentConfig::from_file(&c)?.output_dir,
                (None, None) => unreachable!("clap requires one of them"),
            };
            let summary = report(&dir).with_context(|| format!("reporting {}", dir.display()))?;
            print!("{}", render_summary(&summary));
            println!("tables written to {}", dir.join("summary").display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(err) if err.is_config_error() => 1,
        _ => 2,
    }
}

fn check_env() -> anyhow::Result<()> {
    match std::env::var(DETERMINISTIC_ENV).as_deref() {
        // Every kernel is deterministic, so the flag needs no action.
        Ok("0") | Ok("1") | Err(_) => Ok(()),
        Ok(other) => Err(Error::Config(format!("{DETERMINISTIC_ENV} must be 0 or 1, got `{other}`")).into()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match check_env().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
