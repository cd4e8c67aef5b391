//! Command-line driver for the staged experiment pipeline.
//!
//! Every subcommand resolves the same layered config (TOML file plus
//! repeated `--set path=value` overrides) and then ensures the pipeline up
//! to its stage, reusing whatever the cache already holds. Exit codes: 0
//! success, 1 validation, 2 runtime failure, 3 partial failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mindcine_core::config::ExperimentConfig;
use mindcine_core::error::{Error, Result};
use mindcine_core::metrics::{load_report, render_report, save_report, ReportFormat};
use mindcine_core::pipeline::{
    self, ensure_datasets, ensure_perceptual, ensure_reconstructions, ensure_semantic,
    resolve_cache_root, resolve_run_config, run_ablation, AblationPlan,
};

#[derive(Parser)]
#[command(name = "mindcine", version, about = "EEG-to-video decoding experiments")]
struct Cli {
    /// Experiment config file (TOML); defaults apply when omitted.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config field, e.g. --set run.seed=9 (repeatable).
    #[arg(long = "set", global = true, value_name = "PATH=VALUE")]
    set: Vec<String>,

    /// Artifact root; falls back to $MINDCINE_CACHE, then ./mindcine-cache.
    #[arg(long, global = true, value_name = "DIR")]
    cache: Option<PathBuf>,

    /// More logging (-v debug, -vv trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset.
    Gen,
    /// Train the semantic encoder and projection head.
    TrainSemantic,
    /// Train the perceptual sequence model.
    TrainPerceptual,
    /// Reconstruct the held-out clips, training anything still missing.
    Reconstruct,
    /// Run the full pipeline and print the metrics report.
    Eval,
    /// Run the six-variant comparison matrix and print one table.
    Ablate {
        /// Also write each variant's report here as <variant>.json.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Render an existing report without recomputing anything.
    Report {
        /// Report file; defaults to this config's cached report.
        #[arg(long, value_name = "FILE")]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
        /// Write to a file instead of stdout.
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

impl From<Format> for ReportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Table => ReportFormat::Table,
            Format::Csv => ReportFormat::Csv,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(2))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::from_layers(cli.config.as_deref(), &cli.set)?;
    let root = resolve_cache_root(cli.cache.as_deref());
    match cli.cmd {
        Cmd::Gen => {
            let cfg = resolve_run_config(&cfg)?;
            let (dir, sets) = ensure_datasets(&cfg, &root)?;
            let clips: usize = sets.iter().map(|d| d.clips.len()).sum();
            println!(
                "dataset: {} clip(s) across {} subject(s) at {}",
                clips,
                sets.len(),
                dir.display()
            );
        }
        Cmd::TrainSemantic => {
            let cfg = resolve_run_config(&cfg)?;
            let (_, sets) = ensure_datasets(&cfg, &root)?;
            let (dir, _) = ensure_semantic(&cfg, &root, &sets)?;
            println!("semantic checkpoint: {}", dir.display());
        }
        Cmd::TrainPerceptual => {
            let cfg = resolve_run_config(&cfg)?;
            let (_, sets) = ensure_datasets(&cfg, &root)?;
            let (dir, _) = ensure_perceptual(&cfg, &root, &sets)?;
            println!("perceptual checkpoint: {}", dir.display());
        }
        Cmd::Reconstruct => {
            let cfg = resolve_run_config(&cfg)?;
            let (_, sets) = ensure_datasets(&cfg, &root)?;
            let (_, semantic) = ensure_semantic(&cfg, &root, &sets)?;
            let (_, perceptual) = ensure_perceptual(&cfg, &root, &sets)?;
            let (dir, recons) =
                ensure_reconstructions(&cfg, &root, &sets, &semantic, &perceptual)?;
            let clips: usize = recons.iter().map(|r| r.clips.len()).sum();
            println!("reconstructed {} clip(s) at {}", clips, dir.display());
        }
        Cmd::Eval => {
            let arts = pipeline::run_experiment(&cfg, &root)?;
            print!("{}", render_report(&arts.report, ReportFormat::Table));
            println!("report: {}", arts.report_path.display());
        }
        Cmd::Ablate { out } => {
            let plan = AblationPlan::standard(&cfg)?;
            let outcome = run_ablation(&plan, &root)?;
            print!("{}", pipeline::render_ablation(&outcome));
            if let Some(dir) = out {
                for (name, report) in &outcome.reports {
                    save_report(&dir.join(format!("{name}.json")), report)?;
                }
                println!("reports written to {}", dir.display());
            }
        }
        Cmd::Report { input, format, out } => {
            let path = match input {
                Some(p) => p,
                None => {
                    let cfg = resolve_run_config(&cfg)?;
                    pipeline::stage_dir(&root, &cfg, mindcine_core::config::Stage::Eval)
                        .join("report.json")
                }
            };
            if !path.exists() {
                return Err(Error::Validation(format!(
                    "no report at {}; run eval first or pass --input",
                    path.display()
                )));
            }
            let report = load_report(&path)?;
            let rendered = render_report(&report, format.into());
            match out {
                Some(p) => {
                    std::fs::write(&p, rendered)?;
                    println!("wrote {}", p.display());
                }
                None => print!("{rendered}"),
            }
        }
    }
    Ok(())
}
