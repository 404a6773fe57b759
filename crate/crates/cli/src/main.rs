use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use poco::envs::EnvKind;
use poco::error::{Error, Result};
use poco::replay::save_demos;
use poco::trainer::metrics::{eval_csv, metrics_csv, write_text};
use poco::trainer::{
    ablate, ablation_csv, demos_for, evaluate, finetune, load_actor, pretrain, save_finetune, AblationParam,
    TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "poco",
    version,
    about = "Pre-train and fine-tune flow-matching chunk policies on toy reaching tasks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` config file; unset keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Environment, overriding the config: point_reach, channel_insert or bimodal_reach.
    #[arg(long)]
    env: Option<String>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the noisy scripted expert and save the demonstrations.
    CollectDemos {
        #[command(flatten)]
        common: Common,
    },
    /// Fit the actor to demonstrations by flow matching.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Demonstration file; collected fresh when omitted.
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Warm up the critic and fine-tune the actor online.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        demos: Option<PathBuf>,
        /// Starting actor checkpoint; pre-trained first when omitted.
        #[arg(long)]
        actor: Option<PathBuf>,
    },
    /// Evaluate an actor checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        actor: PathBuf,
        /// Overrides eval_trials.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Fine-tune once per value of `zeta` or `beta` from the same actor.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        demos: Option<PathBuf>,
        #[arg(long)]
        actor: Option<PathBuf>,
        /// `zeta` or `beta`.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
}

fn load_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::new(EnvKind::PointReach),
    };
    if let Some(env) = &common.env {
        cfg.set("env", env)?;
    }
    for item in &common.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {item:?} is not key=value")))?;
        cfg.set(key, value)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    std::fs::create_dir_all(&common.out)?;
    write_text(&common.out.join("config.txt"), &cfg.to_text())?;
    Ok(cfg)
}

fn with_demos(mut cfg: TrainConfig, demos: &Option<PathBuf>) -> TrainConfig {
    if let Some(path) = demos {
        cfg.demo_file = Some(path.clone());
    }
    cfg
}

fn starting_actor(
    cfg: &TrainConfig,
    actor: &Option<PathBuf>,
    demos: &poco::replay::DemoSet,
    out: &Path,
) -> Result<poco::flow::FlowPolicy> {
    match actor {
        Some(path) => {
            let actor = load_actor(path)?;
            poco::trainer::check_actor(cfg, &actor)?;
            Ok(actor)
        }
        None => {
            let pre = pretrain(cfg, demos, false)?;
            write_text(&out.join("pretrain_metrics.csv"), &metrics_csv(&pre.rows))?;
            Ok(pre.actor)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::CollectDemos { common } => {
            let cfg = load_config(&common)?;
            let demos = poco::trainer::collect(&cfg)?;
            let path = common.out.join("demos.txt");
            save_demos(&path, &demos)?;
            println!(
                "{} episodes, {} steps -> {}",
                demos.episodes.len(),
                demos.num_steps(),
                path.display()
            );
        }
        Command::Pretrain { common, demos } => {
            let cfg = with_demos(load_config(&common)?, &demos);
            let demos = demos_for(&cfg)?;
            let report = pretrain(&cfg, &demos, true)?;
            report.actor.to_checkpoint()?.save(common.out.join("actor.ckpt"))?;
            write_text(&common.out.join("metrics.csv"), &metrics_csv(&report.rows))?;
            if let Some(eval) = &report.eval {
                write_text(&common.out.join("eval.csv"), &eval_csv(std::slice::from_ref(eval)))?;
                println!("pre-trained success {:.3}", eval.success_rate);
            }
        }
        Command::Finetune { common, demos, actor } => {
            let cfg = with_demos(load_config(&common)?, &demos);
            let demos = demos_for(&cfg)?;
            let actor = starting_actor(&cfg, &actor, &demos, &common.out)?;
            let report = finetune(&cfg, actor, &demos)?;
            save_finetune(&common.out, &report, cfg.tau)?;
            println!(
                "initial success {:.3}, final success {:.3}, {} episodes, {} env steps",
                report.initial_success,
                report.final_success(),
                report.episodes,
                report.env_steps
            );
        }
        Command::Eval { common, actor, trials } => {
            let cfg = load_config(&common)?;
            let policy = load_actor(&actor)?;
            poco::trainer::check_actor(&cfg, &policy)?;
            let n = trials.unwrap_or(cfg.eval_trials);
            let report = evaluate(&cfg.env, &policy, n, cfg.seed)?;
            let mean = report.returns.iter().sum::<f64>() / n.max(1) as f64;
            println!(
                "success {:.3} over {n} trials, mean return {mean:.3}",
                report.success_rate
            );
        }
        Command::Ablate {
            common,
            demos,
            actor,
            param,
            values,
        } => {
            let param: AblationParam = param.parse()?;
            let cfg = with_demos(load_config(&common)?, &demos);
            let demos = demos_for(&cfg)?;
            let actor = starting_actor(&cfg, &actor, &demos, &common.out)?;
            let runs = ablate(&cfg, param, &values, &actor, &demos)?;
            write_text(
                &common.out.join(format!("ablation_{}.csv", param.name())),
                &ablation_csv(param, &runs),
            )?;
            for r in &runs {
                println!(
                    "{} = {}: final success {:.3}",
                    param.name(),
                    r.value,
                    r.report.final_success()
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(3);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
