mod rundir;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use vlfuse::baseline::BaselineModel;
use vlfuse::checkpoint::Checkpoint;
use vlfuse::config::RunConfig;
use vlfuse::data::{self, TaskKind, TaskSpec};
use vlfuse::model::{BaseLm, FrozenChecksums, InverseModel, LanguageModel};
use vlfuse::pipeline::{self, RunReport, TaskData, TrainedRun};
use vlfuse::train::{self, EvalRecord, Exec, Mode};
use vlfuse::vision::VisionEncoder;
use vlfuse::Error;

use rundir::RunDir;

/// Gradient checks above this many coordinates sample each tensor instead.
const FULL_GRADCHECK_LIMIT: usize = 4096;
const SAMPLED_COORDS_PER_TENSOR: usize = 48;
const GRADCHECK_EPS: f64 = 1e-5;
const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "vlfuse", version, about = "Train and compare small vision-language models")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Configuration file (`key = value` lines); defaults apply to missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key, e.g. `--set seed=13`
    #[arg(long = "set", value_name = "K=V", global = true)]
    overrides: Vec<String>,

    /// Run directory to create
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Replace an existing run directory
    #[arg(long, global = true)]
    force: bool,

    #[arg(long, value_enum, default_value_t = CliMode::Reference, global = true)]
    mode: CliMode,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Pretrain the base language model on the copy task and freeze it
    PretrainLm,
    /// Single-stage training of the fusion model on the visual tasks
    TrainInverse,
    /// Two-stage training of the projector baseline
    TrainBaseline,
    /// Evaluate the checkpoint named by the `checkpoint` key
    Eval,
    /// Finite-difference check of every trainable tensor of the fusion model
    Gradcheck,
    /// Train both pipelines on one frozen base and tabulate the budgets
    Compare,
    /// Write the generated train and eval sets as JSON lines
    DumpData,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::PretrainLm => "pretrain-lm",
            Command::TrainInverse => "train-inverse",
            Command::TrainBaseline => "train-baseline",
            Command::Eval => "eval",
            Command::Gradcheck => "gradcheck",
            Command::Compare => "compare",
            Command::DumpData => "dump-data",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, PartialEq, Eq)]
enum CliMode {
    Reference,
    Throughput,
}

impl From<CliMode> for Mode {
    fn from(m: CliMode) -> Self {
        match m {
            CliMode::Reference => Mode::Reference,
            CliMode::Throughput => Mode::Throughput,
        }
    }
}

/// Failure that maps to a specific exit status.
#[derive(Debug)]
struct Exit(u8, String);

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.1)
    }
}

impl std::error::Error for Exit {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if let Some(Exit(code, _)) = e.downcast_ref::<Exit>() {
        return *code;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::TrainingFailure { .. } | Error::NonFiniteLoss { .. }) => 2,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            RunConfig::parse(&text).map_err(Error::Config)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&cli.overrides).map_err(Error::Config)?;
    // a gradient check never touches the task data
    if cli.command == Command::Gradcheck {
        cfg.model.validate().map_err(Error::Config)?;
    } else {
        cfg.validate().map_err(Error::Config)?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let mode = Mode::from(cli.mode);
    let exec = Exec {
        mode,
        on_eval: Some(progress),
    };
    let out = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("runs/{}-seed{}", cli.command.name(), cfg.model.seed)));
    let dir = RunDir::create(&out, cli.force)?;
    let start = Instant::now();
    let checksums = match cli.command {
        Command::PretrainLm => pretrain(&cfg, exec, &dir)?,
        Command::TrainInverse => train_inverse(&cfg, exec, &dir)?,
        Command::TrainBaseline => train_baseline(&cfg, exec, &dir)?,
        Command::Eval => eval(&cfg, &dir)?,
        Command::Gradcheck => gradcheck(&cfg, &dir)?,
        Command::Compare => compare(&cfg, exec, &dir)?,
        Command::DumpData => dump_data(&cfg, &dir)?,
    };
    dir.write("config.cfg", cfg.to_text())?;
    dir.write_json(
        "manifest.json",
        &json!({
            "command": cli.command.name(),
            "version": env!("CARGO_PKG_VERSION"),
            "seed": cfg.model.seed,
            "mode": mode,
            "config": cfg.to_text(),
            "checksums": checksums,
        }),
    )?;
    dir.write_json("timing.json", &json!({ "wall_clock_secs": start.elapsed().as_secs_f64() }))?;
    let path = dir.commit()?;
    println!("run written to {}", path.display());
    if let Some(Exit(code, msg)) = pending_failure(cli.command, &path)? {
        return Err(Exit(code, msg).into());
    }
    Ok(())
}

/// A gradient check that ran to completion but exceeded its tolerance still
/// gets its run directory; the failure is reported afterwards.
fn pending_failure(command: Command, path: &Path) -> Result<Option<Exit>> {
    if command != Command::Gradcheck {
        return Ok(None);
    }
    let text = std::fs::read_to_string(path.join("summary.json"))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let err = v["max_rel_error"].as_f64().unwrap_or(f64::INFINITY);
    Ok((err >= GRADCHECK_TOLERANCE).then(|| {
        Exit(2, format!("max relative error {err:e} is not below {GRADCHECK_TOLERANCE:e}"))
    }))
}

fn progress(rec: &EvalRecord) {
    eprintln!(
        "step {:>5}  accuracy {:.4}  token accuracy {:.4}  loss {:.4}",
        rec.step, rec.result.overall, rec.result.token_accuracy, rec.result.loss
    );
}

fn obtain_base(cfg: &RunConfig, exec: Exec, dir: &RunDir) -> Result<BaseLm> {
    match &cfg.base_checkpoint {
        Some(path) => Ok(pipeline::load_base(Path::new(path), &cfg.model)?),
        None => {
            println!("no base_checkpoint given; pretraining the base LM first");
            let (base, report) = pipeline::pretrain_base_lm(cfg, exec)?;
            println!(
                "base LM reached token accuracy {:.4} in {} steps",
                report.token_accuracy, report.steps
            );
            Checkpoint::from_store("base", &cfg.to_text(), &base.store).save(&dir.path("base.ckpt"))?;
            dir.write_json("pretrain_summary.json", &report)?;
            Ok(base)
        }
    }
}

fn pretrain(cfg: &RunConfig, exec: Exec, dir: &RunDir) -> Result<serde_json::Value> {
    let (base, report) = pipeline::pretrain_base_lm(cfg, exec)?;
    Checkpoint::from_store("base", &cfg.to_text(), &base.store).save(&dir.path("base.ckpt"))?;
    dir.write_json("summary.json", &report)?;
    dir.write_jsonl("metrics.jsonl", &report.evals)?;
    dir.write("losses.csv", losses_csv(&report.losses, None))?;
    println!(
        "copy-task token accuracy {:.4} after {} steps ({} samples)",
        report.token_accuracy, report.steps, report.samples
    );
    Ok(json!({ "frozen": report.checksums }))
}

fn losses_csv(losses: &[f64], grad_norms: Option<&[f64]>) -> String {
    let mut s = String::from(if grad_norms.is_some() { "step,loss,grad_norm\n" } else { "step,loss\n" });
    for (i, l) in losses.iter().enumerate() {
        match grad_norms {
            Some(g) => writeln!(s, "{},{l},{}", i + 1, g[i]),
            None => writeln!(s, "{},{l}", i + 1),
        }
        .expect("writing to a String");
    }
    s
}

fn accuracy_csv(evals: &[EvalRecord]) -> String {
    let mut s = String::from("step,task,accuracy\n");
    for e in evals {
        for (k, a) in &e.result.accuracy {
            writeln!(s, "{},{k},{a}", e.step).expect("writing to a String");
        }
        writeln!(s, "{},all,{}", e.step, e.result.overall).expect("writing to a String");
    }
    s
}

fn write_run<M: LanguageModel>(
    cfg: &RunConfig,
    dir: &RunDir,
    kind: &str,
    run: &TrainedRun<M>,
) -> Result<()> {
    let text = cfg.to_text();
    Checkpoint::from_store(kind, &text, run.model.params()).save(&dir.path("final.ckpt"))?;
    let mut best = run.model.params().clone();
    train::restore(&mut best, &run.best_params)?;
    Checkpoint::from_store(kind, &text, &best).save(&dir.path("best.ckpt"))?;
    write_report(dir, &run.report)
}

fn write_report(dir: &RunDir, report: &RunReport) -> Result<()> {
    dir.write_json("summary.json", report)?;
    dir.write_jsonl("metrics.jsonl", &report.evals)?;
    dir.write("losses.csv", losses_csv(&report.losses, Some(&report.grad_norms)))?;
    dir.write("accuracy.csv", accuracy_csv(&report.evals))?;
    Ok(())
}

fn print_report(report: &RunReport) {
    if let Some(e) = &report.final_eval {
        println!(
            "{}: {} samples ({} alignment), held-out accuracy {:.4}",
            report.model, report.total_samples, report.alignment_samples, e.result.overall
        );
        for (k, a) in &e.result.accuracy {
            println!("  {k}: {a:.4}");
        }
    }
    println!(
        "  majority-class accuracy {:.4}, rule-based oracle {:.4}",
        report.majority_accuracy, report.oracle_accuracy
    );
}

fn train_inverse(cfg: &RunConfig, exec: Exec, dir: &RunDir) -> Result<serde_json::Value> {
    let base = obtain_base(cfg, exec, dir)?;
    let data = TaskData::from_config(cfg)?;
    let run = pipeline::train_inverse(cfg, &base, &data, exec)?;
    write_run(cfg, dir, "inverse", &run)?;
    print_report(&run.report);
    Ok(json!({ "frozen": run.report.checksums }))
}

fn train_baseline(cfg: &RunConfig, exec: Exec, dir: &RunDir) -> Result<serde_json::Value> {
    let base = obtain_base(cfg, exec, dir)?;
    let data = TaskData::from_config(cfg)?;
    let (align_steps, _) = pipeline::unit_steps(cfg);
    let captions = if align_steps > 0 {
        data::generate_captions(&data.spec, align_steps * cfg.train.batch_size, cfg.data.train_seed)?
    } else {
        Vec::new()
    };
    let run = pipeline::run_two_stage(cfg, &base, &captions, &data, align_steps, cfg.train.total_steps, exec)?;
    write_run(cfg, dir, "baseline", &run)?;
    dir.write_json("stages.json", &run.report.stages)?;
    print_report(&run.report);
    Ok(json!({ "frozen": run.report.checksums }))
}

fn eval(cfg: &RunConfig, dir: &RunDir) -> Result<serde_json::Value> {
    let path = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Contract("eval needs the `checkpoint` key".into()))?;
    let ckpt = Checkpoint::load(Path::new(path))?;
    let vision = VisionEncoder::for_model(&cfg.model);
    let skeleton = BaseLm::init(&cfg.model);
    let copy_only = [TaskKind::Copy];
    let (result, samples, spec, checksums) = match ckpt.kind.as_str() {
        "base" => {
            let mut m = skeleton;
            ckpt.apply_to(&mut m.store)?;
            let samples = pipeline::copy_samples(cfg, cfg.data.eval_size, cfg.data.eval_seed)?;
            let spec = TaskSpec::from_config(cfg, &copy_only)?;
            let r = train::evaluate(&m, &vision, &samples)?;
            (r, samples, spec, FrozenChecksums::of(&m.store, &vision.weights))
        }
        "inverse" | "baseline" => {
            let data = TaskData::from_config(cfg)?;
            let (r, sums) = if ckpt.kind == "inverse" {
                let mut m = InverseModel::from_base(&skeleton);
                ckpt.apply_to(&mut m.store)?;
                (train::evaluate(&m, &vision, &data.eval)?, FrozenChecksums::of(&m.store, &vision.weights))
            } else {
                let mut m = BaselineModel::from_base(&skeleton);
                ckpt.apply_to(&mut m.store)?;
                (train::evaluate(&m, &vision, &data.eval)?, FrozenChecksums::of(&m.store, &vision.weights))
            };
            (r, data.eval, data.spec, sums)
        }
        other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other}")).into()),
    };
    let oracle = samples.iter().filter(|s| data::solve(&spec, s) == s.answer).count() as f64 / samples.len() as f64;
    dir.write_json(
        "summary.json",
        &json!({
            "checkpoint_kind": ckpt.kind,
            "eval": result,
            "majority_accuracy": data::majority_accuracy(&samples),
            "oracle_accuracy": oracle,
        }),
    )?;
    println!("{} checkpoint: accuracy {:.4}, token accuracy {:.4}", ckpt.kind, result.overall, result.token_accuracy);
    for (k, a) in &result.accuracy {
        println!("  {k}: {a:.4}");
    }
    Ok(json!({ "frozen": checksums }))
}

fn gradcheck(cfg: &RunConfig, dir: &RunDir) -> Result<serde_json::Value> {
    let probe = InverseModel::from_base(&BaseLm::init(&cfg.model));
    let (trainable, _) = probe.store.count();
    let max_coords = (trainable > FULL_GRADCHECK_LIMIT).then_some(SAMPLED_COORDS_PER_TENSOR);
    let summary = pipeline::gradcheck_model(&cfg.model, GRADCHECK_EPS, max_coords)?;
    dir.write_json("summary.json", &summary)?;
    println!(
        "max relative error {:e} over {} coordinates (eps {:e}){}",
        summary.max_rel_error,
        summary.coordinates,
        summary.eps,
        if max_coords.is_some() { ", sampled" } else { "" }
    );
    if let (Some(t), Some(c)) = (&summary.worst_tensor, summary.worst_coordinate) {
        println!("  worst coordinate: {t}[{c}]");
    }
    Ok(json!({}))
}

fn compare(cfg: &RunConfig, exec: Exec, dir: &RunDir) -> Result<serde_json::Value> {
    let base = obtain_base(cfg, exec, dir)?;
    let data = TaskData::from_config(cfg)?;
    let (cmp, inverse, baseline) = pipeline::compare_pipelines(cfg, &base, &data, exec)?;
    dir.write_json("summary.json", &cmp)?;
    dir.write_json("inverse_report.json", &inverse.report)?;
    dir.write_json("baseline_report.json", &baseline.report)?;
    let mut csv = String::from("model,alignment_samples,total_samples,trainable_params,forward_macs_per_sample,overall_accuracy\n");
    for (name, s) in [("inverse", &cmp.inverse), ("baseline", &cmp.baseline)] {
        writeln!(
            csv,
            "{name},{},{},{},{},{}",
            s.alignment_samples, s.total_samples, s.trainable_params, s.forward_macs_per_sample, s.overall_accuracy
        )
        .expect("writing to a String");
    }
    dir.write("comparison.csv", csv)?;
    println!(
        "samples: inverse {} vs baseline {} -> reduction {:.1}%",
        cmp.inverse.total_samples, cmp.baseline.total_samples, cmp.sample_reduction_pct
    );
    Ok(json!({ "frozen": cmp.base_checksums }))
}

fn dump_data(cfg: &RunConfig, dir: &RunDir) -> Result<serde_json::Value> {
    let data = TaskData::from_config(cfg)?;
    dir.write_jsonl("train.jsonl", data.train.iter().map(|s| s.to_json()))?;
    dir.write_jsonl("eval.jsonl", data.eval.iter().map(|s| s.to_json()))?;
    dir.write_json(
        "summary.json",
        &json!({
            "train_samples": data.train.len(),
            "eval_samples": data.eval.len(),
            "eval_majority_accuracy": data::majority_accuracy(&data.eval),
        }),
    )?;
    println!("wrote {} train and {} eval samples", data.train.len(), data.eval.len());
    Ok(json!({}))
}
