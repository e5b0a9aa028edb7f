use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use veil_core::config::ExperimentConfig;
use veil_core::networks::NormVariant;
use veil_core::objectives::PrivacyUpdateMode;
use veil_cli::*;

/// Train and audit privacy-preserving image encoders.
#[derive(Parser)]
#[command(name = "veil", version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Adversarially train an encoder.
    TrainEncoder {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        privacy_loss: Option<PrivacyUpdateMode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory (default: $VEIL_OUTPUT_ROOT/<name>-<loss>-s<seed>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Train fresh classifiers to saturation on frozen encoders.
    Verify {
        /// Run directories (or encoder files inside them).
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        /// Verification settings; defaults to the first run's config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tasks: Vec<String>,
        /// Also verify the identity and constant-output encoders.
        #[arg(long)]
        baselines: bool,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare encoder normalization variants for collapse.
    AblateNorm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Label-flip versus GAN-style privacy updates, end to end.
    CompareLosses {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Check the conditional-entropy identities on random discrete joints.
    MiCheck {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long)]
        balanced_binary: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize a run directory.
    Report { dir: PathBuf },
}

fn seeds_or(seeds: Vec<u64>, cfg: &ExperimentConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::TrainEncoder { config, privacy_loss, seed, out, force } => {
            let mut cfg = read_config(&config)?;
            if let Some(s) = seed {
                cfg = with_seed(&cfg, s);
            }
            if let Some(m) = privacy_loss {
                cfg.train.objective.privacy = m;
            }
            let name = format!("{}-{}-s{}", cfg.name, cfg.train.objective.privacy.flag(), cfg.seed);
            let dir = run_dir(out.as_deref(), &name);
            let outcome = train_encoder(&cfg, &dir, force)?;
            let last = outcome.rows.last().context("empty training log")?;
            println!("encoder   {}", dir.join("encoder.bin").display());
            println!("sha256    {}", outcome.encoder_sha256);
            println!(
                "final     private acc {:.3} (last {} evals {:.3}), unit-band share {:.3}, collapse alarm {}",
                last.val_private_accuracy,
                FINAL_WINDOW,
                final_within_training_accuracy(&outcome.rows),
                last.collapse.unit_band,
                last.collapse.alarm
            );
        }
        Cmd::Verify { runs, config, tasks, baselines, workers, out, force } => {
            let mut targets = Vec::new();
            let mut run_cfg = None;
            for r in &runs {
                let (t, c) = target_from_run(r)?;
                run_cfg.get_or_insert(c);
                targets.push(t);
            }
            let mut cfg = match config {
                Some(p) => read_config(&p)?,
                None => run_cfg.context("no runs given")?,
            };
            if let Some(w) = workers {
                cfg.workers = w;
            }
            if baselines {
                let first = &targets[0].encoder;
                targets.extend(baseline_targets(cfg.encoder.input, first.output_shape()));
            }
            let tasks = if tasks.is_empty() { cfg.verify_tasks.clone() } else { tasks };
            let data = load_dataset(&cfg)?;
            let dir = match (&out, runs.as_slice()) {
                (Some(o), _) => o.clone(),
                (None, [one]) if one.is_dir() => one.join("verify"),
                (None, _) => output_root().join(format!("{}-verify", cfg.name)),
            };
            let cells = verify(&cfg, &data, &targets, &tasks, &dir, force)?;
            print!("{}", render_table(&cells, &targets, &tasks));
            println!("reports   {}", dir.display());
        }
        Cmd::AblateNorm { config, seeds, variants, out, force } => {
            let cfg = read_config(&config)?;
            let variants = if variants.is_empty() {
                NormVariant::ALL.to_vec()
            } else {
                variants.iter().map(|v| v.parse()).collect::<Result<Vec<NormVariant>, _>>()?
            };
            let seeds = seeds_or(seeds, &cfg);
            let data = load_dataset(&cfg)?;
            let dir = run_dir(out.as_deref(), &format!("{}-ablate-norm", cfg.name));
            ablate_norm(&cfg, &data, &variants, &seeds, &dir, force)?;
            print!("{}", std::fs::read_to_string(dir.join("ablation.csv"))?);
        }
        Cmd::CompareLosses { config, seeds, out, force } => {
            let cfg = read_config(&config)?;
            let seeds = seeds_or(seeds, &cfg);
            let data = load_dataset(&cfg)?;
            let dir = run_dir(out.as_deref(), &format!("{}-compare-losses", cfg.name));
            compare_losses(&cfg, &data, &seeds, &dir, force)?;
            print!("{}", std::fs::read_to_string(dir.join("comparison.csv"))?);
        }
        Cmd::MiCheck { trials, balanced_binary, seed } => {
            let r = mi_check(trials, balanced_binary, seed)?;
            println!("trials           {}", r.trials);
            println!("max residual     {:e}", r.max_eq2_residual);
            println!("mean residual    {:e}", r.mean_eq2_residual);
            if let Some(j) = r.max_jsd_residual {
                println!("max jsd residual {j:e}");
            }
        }
        Cmd::Report { dir } => print!("{}", report(Path::new(&dir))?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if let Some(veil_core::Error::Config(items)) = e.downcast_ref::<veil_core::Error>() {
                for i in items {
                    eprintln!("  - {i}");
                }
            }
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
