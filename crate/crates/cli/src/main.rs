//! `rulprune`: synth → prune → train → finetune → eval → report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::Value;

use rulprune::pipeline::{self, Arm, PipelineConfig};
use rulprune::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "rulprune", version, about = "Causal and quality-based window pruning for RUL fine-tuning")]
struct Cli {
    /// Pipeline config (.toml or .json). Without it the preset is used.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,

    /// Built-in starting point when no config file is given.
    #[arg(long, value_enum, global = true, default_value_t = Preset::Benchmark)]
    preset: Preset,

    /// Root seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for all artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Experiment arm: cg, pc, full or sub.
    #[arg(long, global = true)]
    arm: Option<Arm>,

    /// Override any config key by dotted path, e.g.
    /// `--set causal.alpha=0.05` or `--set finetune.max_epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate source, corrupted target and test series plus span labels.
    Synth,
    /// Causal alignment then quality screening of the target windows.
    Prune,
    /// Train the predictor from scratch on the source series.
    Train,
    /// Fine-tune the pretrained checkpoint on the retained target windows.
    Finetune,
    /// Score the fine-tuned (or pretrained) model on the test series.
    Eval,
    /// Collect the run's reports into summary.json.
    Report,
    /// synth, prune, train, finetune, eval and report in order.
    Run,
    /// Print the effective config as JSON.
    Config,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Preset {
    /// Library defaults (real-data scale).
    Default,
    /// Synthetic benchmark, fixed alignment threshold.
    Benchmark,
    /// Synthetic benchmark, adaptive alignment threshold.
    Aggressive,
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("`{key}`: `{}` is not a table", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked");
    }
    unreachable!("split yields at least one part")
}

fn apply_overrides(cfg: PipelineConfig, overrides: &[String]) -> Result<PipelineConfig> {
    if overrides.is_empty() {
        return Ok(cfg);
    }
    let mut tree = serde_json::to_value(&cfg).map_err(|e| Error::json("encoding config", e))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        // bare words (paths, arm names) are taken as strings
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut tree, key.trim(), value)?;
    }
    serde_json::from_value(tree).map_err(|e| Error::json("applying overrides", e))
}

fn effective_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => match cli.preset {
            Preset::Default => PipelineConfig::default(),
            Preset::Benchmark => PipelineConfig::synth_benchmark(),
            Preset::Aggressive => PipelineConfig::synth_aggressive(),
        },
    };
    cfg = apply_overrides(cfg, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir.clone_from(out);
    }
    if let Some(arm) = cli.arm {
        cfg.arm = arm;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth(cfg: &PipelineConfig) -> Result<()> {
    let out = pipeline::cmd_synth(cfg)?;
    println!(
        "synth: {} source / {} target / {} test units, {} corrupted spans -> {}",
        out.source.len(),
        out.target.len(),
        out.test.len(),
        out.spans.len(),
        cfg.out_dir.display()
    );
    Ok(())
}

fn prune(cfg: &PipelineConfig) -> Result<()> {
    let out = pipeline::cmd_prune(cfg)?;
    let r = &out.report.retention;
    println!(
        "prune [{:?}]: retained {}/{} windows ({:.1}%); removed causal {}, quality {}, other {}",
        cfg.arm,
        r.retained,
        r.full,
        100.0 * r.fraction,
        r.removed_causal,
        r.removed_quality,
        r.removed_other
    );
    if let Some(s2) = &out.report.stage_two {
        println!(
            "  stage 2: kept {}/{} survivors ({:.1}%) at theta {:.4}",
            s2.retained,
            s2.candidates,
            100.0 * s2.retention,
            s2.theta
        );
    }
    Ok(())
}

fn print_run(tag: &str, run: &pipeline::TrainRun) {
    let last = run.history.last();
    println!(
        "{tag}: {} samples, {} epochs, best epoch {}, final val loss {:.6}",
        run.samples,
        run.history.len(),
        run.best_epoch,
        last.map_or(f64::NAN, |r| r.val_loss)
    );
}

fn train(cfg: &PipelineConfig) -> Result<()> {
    print_run("train", &pipeline::cmd_train(cfg)?);
    Ok(())
}

fn finetune(cfg: &PipelineConfig) -> Result<()> {
    print_run("finetune", &pipeline::cmd_finetune(cfg)?);
    Ok(())
}

fn eval(cfg: &PipelineConfig) -> Result<()> {
    let out = pipeline::cmd_eval(cfg)?;
    let r = &out.report;
    print!("eval: rmse {:.4}, score {:.4} over {} windows", r.rmse, r.nasa_score, r.n);
    if let Some(acc) = r.separability_accuracy {
        print!(", separability {acc:.3}");
    }
    println!();
    Ok(())
}

fn report(cfg: &PipelineConfig) -> Result<()> {
    pipeline::cmd_report(cfg)?;
    println!("report: {}", cfg.artifact("summary.json").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    match cli.command {
        Command::Synth => synth(&cfg),
        Command::Prune => prune(&cfg),
        Command::Train => train(&cfg),
        Command::Finetune => finetune(&cfg),
        Command::Eval => eval(&cfg),
        Command::Report => report(&cfg),
        Command::Run => {
            synth(&cfg)?;
            if cfg.arm != Arm::Full {
                prune(&cfg)?;
            }
            train(&cfg)?;
            finetune(&cfg)?;
            eval(&cfg)?;
            report(&cfg)
        }
        Command::Config => {
            let text = serde_json::to_string_pretty(&cfg).map_err(|e| Error::json("encoding config", e))?;
            println!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
