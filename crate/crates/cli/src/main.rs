use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use photoscene_core::pipeline::{self, BaselineMethod, PipelineConfig};

/// Fits procedural materials, light mixes, and exposures to photographed
/// indoor scenes, and ships the supporting baselines, metrics, and synthetic
/// scene generator.
#[derive(Parser)]
#[command(name = "photoscene", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit materials and lighting for a scene bundle.
    Fit {
        /// Scene bundle directory (bundle.json plus assets).
        #[arg(long)]
        bundle: PathBuf,
        /// Pipeline configuration JSON; defaults apply where omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for report, assets, and renders.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads; 0 means one per core. Overrides the config.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Run a homogeneous-median baseline over a bundle.
    Baseline {
        #[arg(long)]
        bundle: PathBuf,
        /// "pixelMedian" or "invRenderMedian".
        #[arg(long)]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a run directory's renders against the bundle photos.
    Metrics {
        #[arg(long)]
        bundle: PathBuf,
        /// Run directory holding renders/v{i}.pfm; metrics.json lands here.
        /// Externally produced render sets work too.
        #[arg(long)]
        out: PathBuf,
        /// Method label for the report when the run directory has no saved
        /// assets.
        #[arg(long)]
        method: Option<String>,
    },
    /// Re-render one view from a run directory's saved assets.
    Render {
        #[arg(long)]
        bundle: PathBuf,
        /// Run directory with fitted assets; the render is written back
        /// under its renders/ folder.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        view: usize,
    },
    /// Re-run template selection for one part and dump every exemplar.
    Exemplars {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Part id from the bundle manifest.
        #[arg(long)]
        part: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a synthetic scene bundle with known ground truth.
    GenSynthetic {
        /// Generator configuration JSON; defaults apply where omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<PipelineConfig> {
    match path {
        Some(p) => Ok(pipeline::load_pipeline_config(p)?),
        None => Ok(PipelineConfig::default()),
    }
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::Fit {
            bundle,
            config,
            out,
            seed,
            jobs,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let report = pipeline::run_fit(&bundle, &cfg, &out)?;
            for part in &report.parts {
                println!(
                    "part {}: mode={} view={} graph={}",
                    part.part_id,
                    part.mode,
                    part.selected_view,
                    part.graph_id.as_deref().unwrap_or("-")
                );
            }
            println!("report: {}", out.join("report.json").display());
        }
        Command::Baseline {
            bundle,
            method,
            out,
        } => {
            let method: BaselineMethod = method.parse()?;
            let report = pipeline::run_baseline(&bundle, method, &out)?;
            println!(
                "{}: {} parts, report: {}",
                report.method,
                report.parts.len(),
                out.join("report.json").display()
            );
        }
        Command::Metrics {
            bundle,
            out,
            method,
        } => {
            let report = pipeline::run_metrics(&bundle, &out, method.as_deref(), None)?;
            println!(
                "{}: mean RMSE {:.4}, mean SSIM {:.4}",
                report.method, report.mean_rmse, report.mean_ssim
            );
            println!("metrics: {}", out.join("metrics.json").display());
        }
        Command::Render { bundle, out, view } => {
            let path = pipeline::run_render(&bundle, &out, view, &out)?;
            println!("render: {}", path.display());
        }
        Command::Exemplars {
            bundle,
            config,
            out,
            part,
            seed,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = pipeline::run_exemplars(&bundle, &part, &cfg, &out)?;
            println!(
                "part {}: winner {} ({} exemplars, k={})",
                report.part_id,
                report.graph_id,
                report.ranked.len(),
                report.k
            );
            println!("tally: {}", out.join("exemplars.json").display());
        }
        Command::GenSynthetic { config, out, seed } => {
            let truth = pipeline::run_gen_synthetic(config.as_deref(), seed, &out)?;
            println!(
                "scene: {} parts, seed {}, bundle at {}",
                truth.parts.len(),
                truth.seed,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
