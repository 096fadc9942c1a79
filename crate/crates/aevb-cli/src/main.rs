use std::path::PathBuf;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};

use aevb_cli::config::parse_config;
use aevb_cli::presets::{preset, PRESET_NAMES};
use aevb_cli::runner::{eval_run, export_latents_run, generate_run, train_run};

/// Train and inspect small latent-variable models from the command line.
#[derive(Parser)]
#[command(name = "aevb", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a config file or a named preset and write the
    /// run directory (config.resolved, metrics.csv, checkpoint.bin).
    Train {
        /// Path to a key = value config file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Name of a built-in preset configuration.
        #[arg(long)]
        preset: Option<String>,
        /// Run directory to write (default: runs/<preset or config stem>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-score the held-out split under a run's checkpoint.
    Eval {
        /// The run directory holding checkpoint.bin.
        #[arg(long)]
        out: PathBuf,
        /// Optional config override (same model; may repoint the data).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Draw from a trained model and write image grids plus raw values.
    Generate {
        /// The run directory holding checkpoint.bin.
        #[arg(long)]
        out: PathBuf,
        /// unconditional | per_label | per_cluster | sequential
        /// (default: the mode matching the model).
        #[arg(long)]
        mode: Option<String>,
        /// Total draws (grids) or draws per row (conditional grids).
        #[arg(long)]
        n: Option<usize>,
        /// Seed for the generation stream (default: the run's seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the held-out split's posterior means with labels as CSV.
    ExportLatents {
        /// The run directory holding checkpoint.bin.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Train { config, preset: preset_name, out, seed } => {
            let (text, stem) = match (&config, &preset_name) {
                (Some(path), None) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    let stem = path
                        .file_stem()
                        .map(|s| s.to_string_lossy().into_owned())
                        .unwrap_or_else(|| "run".to_string());
                    (text, stem)
                }
                (None, Some(name)) => {
                    let text = preset(name).ok_or_else(|| {
                        anyhow!(
                            "unknown preset {name:?}; available: {}",
                            PRESET_NAMES.join(", ")
                        )
                    })?;
                    (text.to_string(), name.clone())
                }
                _ => bail!("pass exactly one of --config or --preset"),
            };
            let cfg = parse_config(&text, seed)?;
            let out_dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&stem));
            let outcome = train_run(cfg, &out_dir)?;
            if let Some(last) = outcome.rows.last() {
                let evidence = last
                    .evidence
                    .map(|e| format!(", evidence {e:.4}"))
                    .unwrap_or_default();
                println!(
                    "trained {} steps; final held-out elbo {:.4} (se {:.4}){}",
                    last.step, last.elbo, last.elbo_se, evidence
                );
            }
            if let Some(true_ev) = outcome.true_test_evidence {
                println!("true test evidence {true_ev:.4}");
            }
            println!("wrote {}", outcome.metrics_path.display());
            println!("wrote {}", outcome.checkpoint_path.display());
            Ok(())
        }
        Cmd::Eval { out, config } => {
            let override_text = match &config {
                Some(path) => Some(
                    std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?,
                ),
                None => None,
            };
            let (_row, csv) = eval_run(&out, override_text.as_deref())?;
            print!("{csv}");
            println!("wrote {}", out.join("eval.csv").display());
            Ok(())
        }
        Cmd::Generate { out, mode, n, seed } => {
            let paths = generate_run(&out, mode.as_deref(), n, seed)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Cmd::ExportLatents { out } => {
            let path = export_latents_run(&out)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}
