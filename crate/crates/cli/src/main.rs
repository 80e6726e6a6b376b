use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gaitrdae_cli::commands;
use gaitrdae_cli::error::{CliError, CliResult};
use gaitrdae_cli::gradcheck;
use gaitrdae_cli::train;
use gaitrdae_cli::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "gaitrdae", version, about = "Gait recognition with region-aware dynamic aggregation and excitation")]
struct Cli {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (dataset directory for `synth`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic silhouette dataset.
    Synth {
        /// Training identities.
        #[arg(long)]
        ids: Option<usize>,
        /// Test identities.
        #[arg(long)]
        test_ids: Option<usize>,
    },
    /// Train a model on a synthetic dataset.
    Train {
        /// Dataset directory holding `manifest.csv`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, action = clap::ArgAction::Set)]
        enable_rda: Option<bool>,
        /// Switches both excitation modules.
        #[arg(long, action = clap::ArgAction::Set)]
        enable_rde: Option<bool>,
        /// Iteration count; milestones are rescaled proportionally.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Embed every sequence of a manifest with a checkpoint.
    Embed {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Rank-k and mAP of embeddings under the manifest's gallery/probe split.
    Eval {
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Exclude probe/gallery pairs captured from the same view.
        #[arg(long)]
        cross_view: bool,
        /// Also write the probe x gallery distance matrix to this GRDT file.
        #[arg(long)]
        dump_distances: Option<PathBuf>,
    },
    /// Finite-difference gradient checks in f64.
    Gradcheck {
        /// all, op, block, model, op:<name> or block:<name>.
        #[arg(long, default_value = "all")]
        scope: String,
    },
    /// Export stage-3 offset heatmaps and region statistics.
    Offsets {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Manifest path of one sequence; default is every test sequence.
        #[arg(long)]
        sequence: Option<String>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out_dir = cli.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
    let default_manifest = cfg.paths.data.join("manifest.csv");
    let default_checkpoint = out_dir.join("checkpoint.grdt");
    match cli.command {
        Command::Synth { ids, test_ids } => {
            if let Some(n) = ids {
                cfg.data.train_ids = n;
            }
            if let Some(n) = test_ids {
                cfg.data.test_ids = n;
            }
            let dir = cli.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
            let entries = commands::synth(&cfg, &dir, cli.force)?;
            println!(
                "wrote {} sequences ({} train ids, {} test ids) to {}",
                entries.len(),
                cfg.data.train_ids,
                cfg.data.test_ids,
                dir.join("manifest.csv").display()
            );
        }
        Command::Train {
            data,
            enable_rda,
            enable_rde,
            iters,
        } => {
            if let Some(on) = enable_rda {
                cfg.model.enable_rda = on;
            }
            if let Some(on) = enable_rde {
                cfg.model.enable_sme = on;
                cfg.model.enable_cme = on;
            }
            if let Some(n) = iters {
                cfg.set_iters(n);
            }
            let manifest = data.unwrap_or_else(|| cfg.paths.data.clone()).join("manifest.csv");
            commands::guard_output(&out_dir.join("checkpoint.grdt"), cli.force)?;
            let every = (cfg.train.max_iters / 20).max(1);
            let outcome = train::train(&cfg, &manifest, &out_dir, |i, r| {
                if i % every == 0 {
                    eprintln!(
                        "iter {i}: combined {:.4} triplet {:.4} ce {:.4} acc {:.3}",
                        r.combined, r.triplet_loss, r.ce_loss, r.ce_accuracy
                    );
                }
            })?;
            if let Some(r) = outcome.reports.last() {
                println!("final combined loss {:.6}", r.combined);
            }
            println!("checkpoint {}", outcome.checkpoint.display());
        }
        Command::Embed { checkpoint, manifest } => {
            let path = out_dir.join("embeddings.grdt");
            commands::guard_output(&path, cli.force)?;
            let emb = commands::embed(
                &checkpoint.unwrap_or(default_checkpoint),
                &manifest.unwrap_or(default_manifest),
            )?;
            ensure_dir(&out_dir)?;
            commands::write_embeddings(&path, &emb)?;
            println!("wrote {} embeddings to {}", emb.len(), path.display());
        }
        Command::Eval {
            embeddings,
            manifest,
            cross_view,
            dump_distances,
        } => {
            let path = out_dir.join("eval.csv");
            commands::guard_output(&path, cli.force)?;
            let report = commands::eval(
                &embeddings.unwrap_or_else(|| out_dir.join("embeddings.grdt")),
                &manifest.unwrap_or(default_manifest),
                cross_view,
                dump_distances.as_deref(),
            )?;
            ensure_dir(&out_dir)?;
            let csv = report.to_csv();
            std::fs::write(&path, &csv).map_err(|e| gaitrdae::Error::io(&path, e))?;
            print!("{csv}");
        }
        Command::Gradcheck { scope } => {
            let lines = gradcheck::run(&scope, cfg.seed, |l| println!("{}", l.render()))?;
            let failed = lines.iter().filter(|l| !l.report.pass).count();
            println!("{} checks, {failed} failed", lines.len());
            if failed > 0 {
                return Err(CliError::Numeric(format!("{failed} gradient checks failed")));
            }
        }
        Command::Offsets {
            checkpoint,
            manifest,
            sequence,
        } => {
            let dir = out_dir.join("offsets");
            let export = commands::offsets(
                &checkpoint.unwrap_or(default_checkpoint),
                &manifest.unwrap_or(default_manifest),
                sequence.as_deref(),
                &dir,
                cli.force,
            )?;
            print!("{}", export.stats.to_csv());
            println!("wrote {} heatmaps to {}", export.heatmaps.len(), dir.display());
        }
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| gaitrdae::Error::io(dir, e).into())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
