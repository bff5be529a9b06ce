use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lsa_core::cotrain::CotrainStrategy;
use lsa_core::harness::{self, ExperimentConfig, Report, Run, BASELINE};
use lsa_core::schedule::StrategyKind;
use lsa_core::LsaError;

/// Noise-robust training with alternating linear-separation and small-loss
/// detection, on desk-scale synthetic web-noisy data.
#[derive(Parser, Debug)]
#[command(name = "lsa", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Run a single seed instead of every seed in the config.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output root; defaults to the config's out_dir, then ./runs.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace completed stages.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build the noisy training set and the clean test set.
    BuildData,
    /// Contrastive pretraining of the encoder.
    Pretrain,
    /// Oracle ID/OOD linear probe at every encoder block.
    Probe,
    /// Compare detectors and train on what each declares clean.
    Detect {
        /// Start from this checkpoint instead of the pretrained encoder.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// PLS-LSA training.
    Train {
        /// One strategy (e.g. ALTERNATE_MOD2, Z_ONLY, or CE_MIXUP for the
        /// plain reference); default: every configured one.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Two-network co-training.
    Cotrain {
        /// INDEP, DM_STYLE, VOTE or OURS; default: every configured one.
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Aggregate logged results over seeds.
    Report,
    /// Print the default configuration.
    DefaultConfig,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<LsaError>() {
        Some(l) if l.is_user_error() => 1,
        Some(_) => 2,
        None if e.downcast_ref::<UserError>().is_some() => 1,
        None => 2,
    }
}

#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn check_device() -> Result<()> {
    match std::env::var("LSA_DEVICE") {
        Err(_) => Ok(()),
        Ok(d) if d.eq_ignore_ascii_case("cpu") => Ok(()),
        Ok(d) => Err(user(format!("LSA_DEVICE={d} is not available; only 'cpu' is supported"))),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    check_device()?;
    if let Command::DefaultConfig = cli.command {
        print!("{}", ExperimentConfig::default().to_toml()?);
        return Ok(());
    }
    let c = &cli.common;
    let path = c.config.as_deref().ok_or_else(|| user("--config is required"))?;
    let config = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    let root = c
        .out
        .clone()
        .or_else(|| config.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"));
    if let Command::Report = cli.command {
        let report = Report::collect(&config, &root)?;
        if report.seeds.is_empty() {
            bail!(user(format!(
                "no results for config {} under {}",
                config.hash(),
                root.display()
            )));
        }
        let md = report.write(&root)?;
        print!("{}", report.render());
        log::info!("report written to {}", md.display());
        return Ok(());
    }
    let seeds = match c.seed {
        Some(s) => vec![s],
        None => config.seeds.clone(),
    };
    for seed in seeds {
        let run = Run::new(&config, &root, seed, c.force)?;
        log::info!("seed {seed}, config {}", run.hash);
        stage(&cli.command, &run).with_context(|| format!("seed {seed}"))?;
    }
    Ok(())
}

fn parse_train_targets(config: &ExperimentConfig, s: Option<&str>) -> Result<Vec<String>> {
    Ok(match s {
        Some(BASELINE) => vec![BASELINE.to_string()],
        Some(s) => vec![s.parse::<StrategyKind>()?.as_str().to_string()],
        None => {
            let mut v: Vec<String> =
                config.experiments.strategies.iter().map(|k| k.as_str().to_string()).collect();
            if config.experiments.baseline {
                v.push(BASELINE.to_string());
            }
            v
        }
    })
}

fn load_checkpoint(p: &Path) -> Result<lsa_core::nn::Network> {
    Ok(harness::load_network(p)?.0)
}

fn stage(cmd: &Command, run: &Run) -> Result<()> {
    match cmd {
        Command::BuildData => {
            let d = harness::build_data(run)?;
            log::info!("{} training samples, {:.0}% OOD", d.train.len(), 100.0 * d.train.manifest.noise_fraction());
        }
        Command::Pretrain => {
            let data = harness::load_data(run)?;
            harness::pretrain_stage(run, &data)?;
        }
        Command::Probe => {
            let data = harness::load_data(run)?;
            let enc = harness::load_encoder(run)?;
            for r in harness::probe_stage(run, &data, &enc)? {
                println!("seed {} block {} auroc {:.4}", run.seed, r.block_index, r.auroc);
            }
        }
        Command::Detect { checkpoint } => {
            let data = harness::load_data(run)?;
            let net = match checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => harness::load_encoder(run)?,
            };
            let rep = harness::detect_stage(run, &data, &net)?;
            for r in &rep.rows {
                println!(
                    "seed {} {:<7} auroc {} acc {:.4}",
                    run.seed,
                    r.detector,
                    r.auroc.map_or("n/a".into(), |a| format!("{a:.4}")),
                    r.best_accuracy
                );
            }
        }
        Command::Train { strategy } => {
            let targets = parse_train_targets(&run.config, strategy.as_deref())?;
            let data = harness::load_data(run)?;
            let enc = harness::load_encoder(run)?;
            for t in targets {
                let s = if t == BASELINE {
                    harness::baseline_stage(run, &data, &enc)?
                } else {
                    harness::train_stage(run, &data, &enc, t.parse()?)?
                };
                println!(
                    "seed {} {} best {:.4} final {:.4}",
                    run.seed, s.name, s.best_accuracy, s.final_accuracy
                );
            }
        }
        Command::Cotrain { strategy } => {
            let targets: Vec<CotrainStrategy> = match strategy {
                Some(s) => vec![s.parse()?],
                None => {
                    let mut v = run.config.experiments.cotrain.clone();
                    v.sort_by_key(|s| *s != CotrainStrategy::Indep);
                    v
                }
            };
            let data = harness::load_data(run)?;
            let enc = harness::load_encoder(run)?;
            for t in targets {
                let s = harness::cotrain_stage(run, &data, &enc, t)?;
                println!(
                    "seed {} {} individual {:.4}/{:.4} ensemble {:.4}",
                    run.seed, t, s.best_individual[0], s.best_individual[1], s.best_ensemble
                );
            }
        }
        Command::Report | Command::DefaultConfig => unreachable!("handled before the seed loop"),
    }
    Ok(())
}
