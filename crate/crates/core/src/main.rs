use std::path::PathBuf;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};

use proia::harness::{self, stages, ExperimentConfig, Variant};

/// Prompt-enhanced membership and attribute inference attacks on GNNs.
#[derive(Parser)]
#[command(name = "proia", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train the prompt encoder and write prompt features.
    Pretrain(StageArgs),
    /// Train the target (and shadow) victim models.
    TrainVictim(StageArgs),
    /// Query the victims and write the attack dataset.
    BuildAttackData(StageArgs),
    /// Train the attack head and score it on the attack test rows.
    Attack(StageArgs),
    /// Run every stage for every configured seed.
    Run(RunArgs),
    /// Collect plot-data series from finished runs.
    EmitPlots {
        /// Directory receiving the plot-data files.
        #[arg(long)]
        out: PathBuf,
        /// Run directories containing metrics.json.
        reports: Vec<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Attack variant: vanilla, pretrain_only, disentangle_only or full.
    #[arg(long)]
    variant: Option<Variant>,
    /// Defense applied to target queries: none, vandp or neighb.
    #[arg(long)]
    defense: Option<String>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    common: Common,
    /// Seed (defaults to the first configured seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Stage directory (defaults to <output_dir>/seed-<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Run only this seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory overriding the configured one.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(v) = common.variant {
        cfg.variant = v;
    }
    if let Some(d) = &common.defense {
        cfg.set_defense(d)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage_target(args: &StageArgs) -> Result<(ExperimentConfig, u64, PathBuf)> {
    let cfg = load(&args.common)?;
    let seed = args.seed.unwrap_or(cfg.seeds[0]);
    let dir = args.out.clone().unwrap_or_else(|| cfg.seed_dir(seed));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok((cfg, seed, dir))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Pretrain(args) => {
            let (cfg, seed, dir) = stage_target(&args)?;
            match stages::pretrain(&cfg, seed, &dir)? {
                Some(out) => {
                    let last = out.loss_curve.last().map(|e| e.parts.total).unwrap_or(f64::NAN);
                    println!("pretrained encoder -> {} (final loss {last:.4})", dir.join("pretrain").display());
                }
                None => println!("variant {} uses no prompts; nothing to pre-train", cfg.variant.name()),
            }
        }
        Command::TrainVictim(args) => {
            let (cfg, seed, dir) = stage_target(&args)?;
            let v = stages::train_victims(&cfg, seed, &dir)?;
            println!("target: train acc {:.4}, test acc {:.4}", v.target.train_accuracy, v.target.test_accuracy);
            if let Some(s) = &v.shadow {
                println!("shadow: train acc {:.4}, test acc {:.4}", s.train_accuracy, s.test_accuracy);
            }
        }
        Command::BuildAttackData(args) => {
            let (cfg, seed, dir) = stage_target(&args)?;
            let ds = stages::build_attack_data(&cfg, seed, &dir)?;
            println!(
                "attack dataset: {} train rows, {} test rows -> {}",
                ds.train_indices().len(),
                ds.test_indices().len(),
                dir.join("attack_data").display()
            );
        }
        Command::Attack(args) => {
            let (cfg, seed, dir) = stage_target(&args)?;
            let s = stages::attack(&cfg, seed, &dir)?;
            println!("accuracy {:.4}  weighted-F1 {:.4}  AUC {:.4}", s.accuracy, s.weighted_f1, s.auc);
        }
        Command::Run(args) => {
            let mut cfg = load(&args.common)?;
            if let Some(seed) = args.seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = args.out {
                cfg.output_dir = out;
            }
            let report = harness::run_experiment(&cfg)?;
            for r in &report.seeds {
                match (&r.failure, r.scores) {
                    (Some(reason), _) => println!("seed {}: failed: {reason}", r.seed),
                    (None, Some(s)) => println!(
                        "seed {}: accuracy {:.4}  weighted-F1 {:.4}  AUC {:.4}",
                        r.seed, s.accuracy, s.weighted_f1, s.auc
                    ),
                    (None, None) => {}
                }
            }
            for key in ["accuracy", "weighted_f1", "auc"] {
                if let Some(m) = report.summary.get(key) {
                    println!("{key}: {:.4} +- {:.4}", m.mean, m.std);
                }
            }
            println!("report -> {}", cfg.output_dir.join("metrics.json").display());
            if report.partial {
                anyhow::bail!("some seeds failed; see metrics.json");
            }
        }
        Command::EmitPlots { out, reports } => {
            for path in harness::emit_plots(&reports, &out)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}
