//! Command-line front end for latent-inversion image restoration.
//!
//! Exit codes: 0 success, 1 optimization divergence, 2 usage or I/O error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cri::harness::config::{RunConfig, TaskConfig, TaskKind};
use cri::harness::experiments;
use cri::harness::plan::{Overrides, PlanEntry, PlanRunner, TargetSource};
use cri::invert::InversionMode;
use cri::Error;

#[derive(Parser)]
#[command(name = "cri", version, about = "Latent-space inversion for image restoration")]
struct Cli {
    /// JSON config file; missing sections take the documented defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "CRI_OUT_DIR", default_value = "out")]
    out: PathBuf,

    /// Run seed.
    #[arg(long, global = true, env = "CRI_SEED", default_value_t = 0)]
    seed: u64,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert one degraded image and write its record and artifacts.
    Invert {
        /// Degraded input PNG; omit to synthesize a seeded target instead.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Optional clean reference PNG for evaluation metrics.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Target seed for a synthetic ground-truth run (used when no
        /// input file is given).
        #[arg(long, default_value_t = 42)]
        target_seed: u64,
        /// Off-manifold amplitude for synthetic targets.
        #[arg(long, default_value_t = 0.0)]
        off_manifold: f64,
        /// Class label of the input.
        #[arg(long)]
        class: usize,
        #[arg(long)]
        task: Option<String>,
        /// Super-resolution factor.
        #[arg(long)]
        scale: Option<usize>,
        /// Mask PNG (nonzero = observed) for inpainting.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long, default_value = "cri")]
        mode: String,
        /// Cluster-count override.
        #[arg(long)]
        clusters: Option<usize>,
        /// Offset-norm weight override.
        #[arg(long)]
        lambda2: Option<f64>,
        /// Run id; derived from the inputs when omitted.
        #[arg(long)]
        id: Option<String>,
    },
    /// Sweep the cluster count over a seeded target set.
    AblateClusters {
        /// Comma-separated cluster counts.
        #[arg(long, default_value = "1,5,10,15", value_delimiter = ',')]
        n_values: Vec<usize>,
        #[arg(long, default_value_t = 20)]
        targets: usize,
        #[arg(long, default_value = "colorize")]
        task: String,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Compare offset regularizers (none, absolute, Euclidean).
    AblateReg {
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value = "colorize")]
        task: String,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Synthesize a ground-truth evaluation target with known latent.
    SynthTarget {
        #[arg(long)]
        class: usize,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        scale: Option<usize>,
    },
    /// Re-derive metrics from artifacts, check for orphans and verify
    /// emitted tables.
    Eval {
        /// Restrict the set-level score to one class.
        #[arg(long)]
        class: Option<usize>,
    },
    /// Precompute and persist a centroid set for a class.
    Cluster {
        #[arg(long)]
        class: usize,
        #[arg(long)]
        clusters: Option<usize>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Divergence { .. } => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>) -> cri::Result<RunConfig> {
    let cfg = match cli_config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    log::debug!("effective config:\n{}", cfg.to_json());
    Ok(cfg)
}

fn apply_task(
    cfg: &mut RunConfig,
    task: &Option<String>,
    scale: Option<usize>,
    mask: Option<PathBuf>,
) -> cri::Result<()> {
    if let Some(kind) = task {
        cfg.task.kind = kind.parse::<TaskKind>()?;
    }
    if let Some(s) = scale {
        cfg.task.scale = s;
    }
    if mask.is_some() {
        cfg.task.mask = mask;
    }
    cfg.validate()
}

fn task_config(kind: &str, scale: Option<usize>) -> cri::Result<TaskConfig> {
    let mut task = TaskConfig {
        kind: kind.parse::<TaskKind>()?,
        ..TaskConfig::default()
    };
    if let Some(s) = scale {
        task.scale = s;
    }
    Ok(task)
}

fn check_class(cfg: &RunConfig, class: usize) -> cri::Result<()> {
    if class >= cfg.generator.classes {
        return Err(Error::Config(format!(
            "class {class} out of range (config declares {})",
            cfg.generator.classes
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> cri::Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.command {
        Command::Invert {
            input,
            clean,
            target_seed,
            off_manifold,
            class,
            task,
            scale,
            mask,
            mode,
            clusters,
            lambda2,
            id,
        } => {
            apply_task(&mut cfg, &task, scale, mask)?;
            check_class(&cfg, class)?;
            let mode: InversionMode = mode.parse()?;
            let target = match &input {
                Some(path) => {
                    if !path.exists() {
                        return Err(Error::Config(format!(
                            "input file {} does not exist",
                            path.display()
                        )));
                    }
                    TargetSource::File {
                        path: path.clone(),
                        clean: clean.clone(),
                    }
                }
                None => TargetSource::Synthetic {
                    seed: target_seed,
                    off_manifold,
                },
            };
            let run_id = id.unwrap_or_else(|| match &input {
                Some(path) => format!(
                    "invert-{}-{}",
                    mode.as_str(),
                    path.file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_default()
                ),
                None => format!("invert-{}-t{target_seed}-s{}", mode.as_str(), cli.seed),
            });
            let entry = PlanEntry {
                id: run_id,
                class,
                target,
                mode,
                seed: cli.seed,
                overrides: Overrides {
                    clusters,
                    lambda2,
                    ..Overrides::default()
                },
            };
            let mut runner = PlanRunner::new(&cfg, &cli.out)?;
            let record = runner.run_entry(&entry, None)?;
            println!("run {} done", record.run_id);
            if let Some(vs) = record.metrics.vs_clean {
                println!(
                    "  vs clean: perceptual {:.6} mse {:.6} psnr {:.2} dB",
                    vs.perceptual, vs.pixel_mse, vs.psnr_db
                );
            }
            println!(
                "  observed: perceptual {:.6} mse {:.6} | offset l2 {:.4} | record {}",
                record.metrics.observed.perceptual,
                record.metrics.observed.pixel_mse,
                record.metrics.offset_norm_l2,
                cli.out
                    .join("runs")
                    .join(&record.run_id)
                    .join("record.json")
                    .display()
            );
            Ok(())
        }
        Command::AblateClusters {
            n_values,
            targets,
            task,
            scale,
        } => {
            let task = task_config(&task, scale)?;
            let sweep =
                experiments::ablate_clusters(&cfg, &cli.out, &n_values, targets, cli.seed, &task)?;
            println!("table: {}", sweep.csv_path.display());
            println!("plot:  {}", sweep.plot_path.display());
            for (n, mean) in &sweep.means {
                println!("  clusters {n:>3}: mean perceptual {mean:.6}");
            }
            Ok(())
        }
        Command::AblateReg { trials, task, scale } => {
            let task = task_config(&task, scale)?;
            let sweep = experiments::ablate_reg(&cfg, &cli.out, trials, cli.seed, &task)?;
            println!("table: {}", sweep.csv_path.display());
            Ok(())
        }
        Command::SynthTarget { class, task, scale } => {
            apply_task(&mut cfg, &task, scale, None)?;
            check_class(&cfg, class)?;
            let (clean, degraded, manifest) =
                experiments::synth_target(&cfg, class, cli.seed, &cli.out)?;
            println!("clean:    {}", clean.display());
            println!("degraded: {}", degraded.display());
            println!("manifest: {}", manifest.display());
            Ok(())
        }
        Command::Eval { class } => {
            let report = experiments::evaluate(&cli.out, class)?;
            println!("evaluated {} runs -> {}", report.rows, report.csv_path.display());
            for (class, score) in &report.set_frechet {
                println!("  class {class}: set frechet {score:.6}");
            }
            for m in &report.mismatches {
                println!("  mismatch: {m}");
            }
            for o in &report.orphans {
                println!("  orphan: {o}");
            }
            for m in &report.missing_artifacts {
                println!("  missing: {m}");
            }
            if report.clean() {
                println!("all records verified against artifacts");
                Ok(())
            } else {
                Err(Error::Config("verification found inconsistencies".into()))
            }
        }
        Command::Cluster { class, clusters } => {
            if let Some(n) = clusters {
                cfg.cluster.clusters = n;
                cfg.validate()?;
            }
            check_class(&cfg, class)?;
            let dir = cli.out.join("cache").join("centroids");
            let manifest = experiments::precompute_centroids(&cfg, class, &dir)?;
            println!("centroids: {}", manifest.display());
            Ok(())
        }
    }
}
