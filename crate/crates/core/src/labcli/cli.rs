use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{ExperimentConfig, Precision, ORIGIN};
use super::pipeline::{Domain, Lab};
use super::report::write_report;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate_adaptation, EvalInputs};
use crate::gradcore::Real;
use crate::synthworld::Split;

#[derive(Parser, Debug)]
#[command(name = "csplab", version, about = "Characteristic-specific partial fine-tuning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON); the reference config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Restrict fine-tuning/evaluation to these seeds.
    #[arg(long)]
    seed: Vec<u64>,
    /// Restrict fine-tuning/evaluation to these strategies.
    #[arg(long)]
    strategy: Vec<String>,
    /// Dotted-path override, e.g. `--set pretrain.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the domain spec and every corpus split.
    GenData(Common),
    /// Pretrain the source model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Continue from an interrupted checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many total steps (leaves a resumable checkpoint).
        #[arg(long)]
        until: Option<u64>,
    },
    /// Learn layer weights on the target-train split.
    Probe(Common),
    /// Write plan files from the weights file.
    Select(Common),
    /// Fine-tune (strategy, seed) cells with per-epoch evaluation.
    Finetune(Common),
    /// Evaluate finished cells' final checkpoints (origin by default).
    Eval(Common),
    /// Time 100 fine-tuning steps per benchmarked strategy.
    Bench(Common),
    /// Regenerate the report tables from finished cells.
    Report(Common),
    /// The full grid: every stage, the transfer run and both reports.
    RunAll(Common),
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::reference(),
        };
        for s in &self.set {
            cfg = cfg.with_override(s)?;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.clone();
        }
        if !self.seed.is_empty() {
            cfg.seeds = self.seed.clone();
        }
        if !self.strategy.is_empty() {
            cfg.strategies = self.strategy.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn lab(&self) -> Result<Lab> {
        Lab::new(self.config()?)
    }
}

/// Process exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::ConfigMismatch(_) => 2,
        Error::NonFinite(_) => 3,
        Error::AcceptanceBar(_) => 4,
        _ => 1,
    }
}

macro_rules! at_precision {
    ($lab:expr, $f:ident ( $($arg:expr),* )) => {
        match $lab.cfg.precision {
            Precision::F64 => $f::<f64>($($arg),*),
            Precision::F32 => $f::<f32>($($arg),*),
        }
    };
}

fn partial(complete: bool) -> Result<i32> {
    Ok(if complete { 0 } else { 5 })
}

fn pretrain<R: Real>(lab: &Lab, resume: bool, until: Option<u64>) -> Result<i32> {
    let data = lab.load_data()?;
    match lab.pretrain::<R>(&data, resume, until)? {
        Some(s) => println!(
            "pretrained {} steps, final loss {:.4}, source TER {:.4} (ground truth {:.4})",
            s.steps,
            s.log.last().map_or(f64::NAN, |p| p.mean_loss),
            s.source_ter,
            s.ground_truth_ter
        ),
        None => println!("pretraining paused; resume with --resume"),
    }
    Ok(0)
}

fn probe<R: Real>(lab: &Lab) -> Result<i32> {
    let data = lab.load_data()?;
    let w = lab.probe::<R>(&data)?;
    println!("{}", serde_json::to_string(&w)?);
    Ok(0)
}

fn select<R: Real>(lab: &Lab) -> Result<i32> {
    let mut strategies = lab.cfg.strategies.clone();
    strategies.extend(lab.cfg.bench.strategies.iter().filter(|s| !lab.cfg.strategies.contains(s)).cloned());
    for p in lab.select::<R>(Domain::Target, &strategies)? {
        println!("{}: layers {:?} lora {:?} trainable {}/{}", p.policy, p.layers_1based, p.lora_rank, p.trainable, p.total);
    }
    Ok(0)
}

fn finetune<R: Real>(lab: &Lab) -> Result<i32> {
    let data = lab.load_data()?;
    for s in &lab.cfg.strategies {
        for &seed in &lab.cfg.seeds {
            let c = lab.run_cell::<R>(&data, Domain::Target, s, seed)?;
            let e = c.last();
            println!("{s} seed {seed}: ss {:.4} ers {:.4} ter {:.4} source-ter {:.4}", e.ss, e.ers, e.ter_target, e.ter_source);
        }
    }
    Ok(0)
}

fn eval<R: Real>(lab: &Lab, explicit: bool) -> Result<i32> {
    let data = lab.load_data()?;
    let ev = lab.evaluator(&data, Domain::Target)?;
    let inputs = EvalInputs {
        spec: &data.spec,
        evaluator: &ev,
        target_test: data.corpora.get(Split::TargetTest),
        target_prompts: data.corpora.get(Split::TargetTrain),
        source_test: data.corpora.get(Split::SourceHeldout),
        source_prompts: data.corpora.get(Split::Pretrain),
    };
    let strategies = if explicit { lab.cfg.strategies.clone() } else { vec![ORIGIN.to_string()] };
    for s in &strategies {
        for &seed in &lab.cfg.seeds {
            let model = if s == ORIGIN {
                lab.pretrained::<R>()?
            } else {
                let path = lab.cell_path(Domain::Target, s, seed).with_extension("cspl");
                let (m, meta, _) = super::checkpoint::load_checkpoint::<R>(&path)?;
                if meta.config_hash != lab.hash {
                    return Err(Error::ConfigMismatch(format!("{} belongs to config {}", path.display(), meta.config_hash)));
                }
                m
            };
            let row = evaluate_adaptation(&model, &inputs)?;
            println!("{}", serde_json::json!({"strategy": s, "seed": seed, "ss": row.ss, "ers": row.ers, "ter_target": row.ter_target, "ter_source": row.ter_source}));
            if s == ORIGIN {
                break;
            }
        }
    }
    Ok(0)
}

fn bench<R: Real>(lab: &Lab) -> Result<i32> {
    let data = lab.load_data()?;
    let rows = lab.bench::<R>(&data)?;
    print!("{}", super::report::timing_csv(&rows));
    Ok(0)
}

fn run_all<R: Real>(lab: &Lab) -> Result<i32> {
    let complete = lab.run_all::<R>()?;
    println!("report written to {}", super::report::report_dir(lab, Domain::Target).display());
    partial(complete)
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::GenData(c) => {
            let lab = c.lab()?;
            lab.gen_data()?;
            println!("corpus written to {}", lab.path("data").display());
            Ok(0)
        }
        Command::Pretrain { common, resume, until } => {
            let lab = common.lab()?;
            at_precision!(lab, pretrain(&lab, resume, until))
        }
        Command::Probe(c) => {
            let lab = c.lab()?;
            at_precision!(lab, probe(&lab))
        }
        Command::Select(c) => {
            let lab = c.lab()?;
            at_precision!(lab, select(&lab))
        }
        Command::Finetune(c) => {
            let lab = c.lab()?;
            at_precision!(lab, finetune(&lab))
        }
        Command::Eval(c) => {
            let lab = c.lab()?;
            let explicit = !c.strategy.is_empty();
            at_precision!(lab, eval(&lab, explicit))
        }
        Command::Bench(c) => {
            let lab = c.lab()?;
            at_precision!(lab, bench(&lab))
        }
        Command::Report(c) => {
            let lab = c.lab()?;
            let mut complete = write_report(&lab, Domain::Target)?;
            if lab.path("runs/transfer").exists() {
                complete &= write_report(&lab, Domain::Transfer)?;
            }
            partial(complete)
        }
        Command::RunAll(c) => {
            let lab = c.lab()?;
            at_precision!(lab, run_all(&lab))
        }
    }
}

/// Parses `argv` and runs the subcommand; returns the exit status.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
