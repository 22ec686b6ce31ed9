//! End-to-end runs: base pretraining, single-stage fusion training, the
//! two-stage projector baseline, their comparison, and gradient checking.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample as sample_indices;
use serde::Serialize;

use crate::baseline::BaselineModel;
use crate::checkpoint::Checkpoint;
use crate::config::{ModelConfig, RunConfig};
use crate::data::{self, PatchGrid, Sample, TaskKind, TaskSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{finite_diff_check_at, GradCheckReport};
use crate::model::{BaseLm, FrozenChecksums, InverseModel, LanguageModel, SlotAudit};
use crate::rng::{self, streams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{self, EvalRecord, FitOptions, FitOutcome, LrSchedule, Exec, BETA1, BETA2, ADAM_EPS};
use crate::vision::VisionEncoder;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerInfo {
    pub name: &'static str,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub schedule: &'static str,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
}

impl OptimizerInfo {
    fn new(schedule: &LrSchedule, weight_decay: f64, grad_clip: f64) -> Self {
        Self {
            name: "adamw",
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            weight_decay,
            schedule: "linear-warmup-cosine",
            peak_lr: schedule.peak,
            warmup_steps: schedule.warmup,
            grad_clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageReport {
    pub name: &'static str,
    pub steps: usize,
    pub batch_size: usize,
    /// Always `steps × batch_size`.
    pub samples: usize,
}

impl StageReport {
    fn new(name: &'static str, fit: &FitOutcome, batch_size: usize) -> Self {
        Self {
            name,
            steps: fit.steps,
            batch_size,
            samples: fit.samples(batch_size),
        }
    }
}

/// Everything a multimodal training run reports. Wall-clock time is kept out
/// of the serialized form so that identical runs serialize identically.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub model: &'static str,
    pub seed: u64,
    pub optimizer: OptimizerInfo,
    pub stages: Vec<StageReport>,
    pub alignment_samples: usize,
    pub total_samples: usize,
    pub trainable_params: usize,
    pub frozen_params: usize,
    /// Decoder multiply-accumulates for one evaluation sample (encoder excluded).
    pub forward_macs_per_sample: u64,
    pub majority_accuracy: f64,
    pub oracle_accuracy: f64,
    pub final_eval: Option<EvalRecord>,
    pub best_eval: Option<EvalRecord>,
    pub evals: Vec<EvalRecord>,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub slot_audit: SlotAudit,
    pub checksums: FrozenChecksums,
    pub config: String,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Task samples for a run: the spec they were drawn from and disjoint splits.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub spec: TaskSpec,
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
}

impl TaskData {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        let spec = TaskSpec::from_config(cfg, &cfg.data.tasks)?;
        Ok(Self {
            train: data::generate(&spec, cfg.data.train_size, cfg.data.train_seed)?,
            eval: data::generate(&spec, cfg.data.eval_size, cfg.data.eval_seed)?,
            spec,
        })
    }
}

fn oracle_accuracy(spec: &TaskSpec, samples: &[Sample]) -> f64 {
    let hits = samples.iter().filter(|s| data::solve(spec, s) == s.answer).count();
    hits as f64 / samples.len().max(1) as f64
}

/// Decoder multiply-accumulates of one teacher-forced forward pass.
pub fn forward_macs<M: LanguageModel>(model: &M, vision: &VisionEncoder, sample: &Sample) -> Result<u64> {
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, false);
    let v_emb = match &sample.image {
        Some(img) => Some(tape.constant(vision.encode(img)?.0)),
        None => None,
    };
    let (inputs, _, _) = sample.next_token_view();
    model.forward(&mut tape, &bind, v_emb, &inputs)?;
    Ok(tape.mac_count())
}

fn check_frozen(before: &FrozenChecksums, after: &FrozenChecksums) -> Result<()> {
    if before != after {
        return Err(Error::Contract("frozen tensors changed during training".into()));
    }
    Ok(())
}

/// Copy-task samples; every other one carries a blank image so the base LM
/// also learns the layout with `p` content-free slots in front of the text.
pub fn copy_samples(cfg: &RunConfig, count: usize, seed: u64) -> Result<Vec<Sample>> {
    let spec = TaskSpec::from_config(cfg, &[TaskKind::Copy])?;
    let mut samples = data::generate(&spec, count, seed)?;
    let p = cfg.model.patches;
    let g = (p as f64).sqrt().round() as usize;
    if p > 0 && g * g == p {
        let blank = PatchGrid::render(&vec![0; p], cfg.model.cell_pixels, 0.0, None);
        for s in samples.iter_mut().skip(1).step_by(2) {
            s.image = Some(blank.clone());
        }
    }
    Ok(samples)
}

#[derive(Clone, Debug, Serialize)]
pub struct PretrainReport {
    pub seed: u64,
    pub optimizer: OptimizerInfo,
    pub steps: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub target_accuracy: f64,
    pub token_accuracy: f64,
    pub parameters: usize,
    pub evals: Vec<EvalRecord>,
    pub losses: Vec<f64>,
    pub checksums: FrozenChecksums,
    pub config: String,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Trains the base LM on the copy task until held-out next-token accuracy
/// reaches the target, then freezes every weight.
pub fn pretrain_base_lm(cfg: &RunConfig, exec: impl Into<Exec>) -> Result<(BaseLm, PretrainReport)> {
    let start = Instant::now();
    let exec = exec.into();
    let pc = &cfg.pretrain;
    let batch = cfg.train.batch_size;
    let train = copy_samples(cfg, pc.steps * batch, cfg.data.train_seed)?;
    let eval = copy_samples(cfg, cfg.data.eval_size, cfg.data.eval_seed)?;
    let vision = VisionEncoder::for_model(&cfg.model);
    let mut base = BaseLm::init(&cfg.model);
    let schedule = LrSchedule::new(pc.learning_rate, cfg.train.warmup_ratio, pc.steps);
    let opts = FitOptions {
        schedule,
        batch_size: batch,
        weight_decay: cfg.train.weight_decay,
        grad_clip: cfg.train.grad_clip,
        eval_every: pc.eval_every,
        mode: exec.mode,
        stop_at_token_accuracy: Some(pc.target_accuracy),
        shuffle_seed: cfg.model.seed ^ streams::PRETRAIN_DATA,
        on_eval: exec.on_eval,
    };
    let fit = train::fit(&mut base, &vision, &train, &eval, &opts)?;
    let token_accuracy = fit.evals.last().map_or(0.0, |e| e.result.token_accuracy);
    if token_accuracy < pc.target_accuracy {
        return Err(Error::TrainingFailure {
            reason: format!(
                "copy-task token accuracy {token_accuracy:.4} below target {} after {} steps",
                pc.target_accuracy, fit.steps
            ),
            losses: fit.losses,
        });
    }
    base.freeze();
    let report = PretrainReport {
        seed: cfg.model.seed,
        optimizer: OptimizerInfo::new(&schedule, cfg.train.weight_decay, cfg.train.grad_clip),
        steps: fit.steps,
        batch_size: batch,
        samples: fit.samples(batch),
        target_accuracy: pc.target_accuracy,
        token_accuracy,
        parameters: base.store.iter().map(|(_, p)| p.value.len()).sum(),
        evals: fit.evals,
        losses: fit.losses,
        checksums: FrozenChecksums::of(&base.store, &vision.weights),
        config: cfg.to_text(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((base, report))
}

/// Loads a base LM checkpoint. Its base architecture must match `cfg`;
/// adapter settings (fusion layers, LoRA, projector, visual width) may differ.
pub fn load_base(path: &Path, cfg: &ModelConfig) -> Result<BaseLm> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != "base" {
        return Err(Error::Checkpoint(format!("expected a base checkpoint, found {}", ckpt.kind)));
    }
    let saved = RunConfig::parse(&ckpt.config).map_err(Error::Config)?;
    if !saved.model.same_base(cfg) {
        return Err(Error::Checkpoint(
            "base checkpoint was trained with a different base architecture".into(),
        ));
    }
    let mut base = BaseLm::init(cfg);
    ckpt.apply_to(&mut base.store)?;
    base.freeze();
    Ok(base)
}

/// A trained model with its report and the trainable tensors at its best evaluation.
#[derive(Clone, Debug)]
pub struct TrainedRun<M> {
    pub model: M,
    pub report: RunReport,
    pub best_params: Vec<(String, Tensor)>,
}

#[allow(clippy::too_many_arguments)]
fn build_report<M: LanguageModel>(
    name: &'static str,
    cfg: &RunConfig,
    model: &M,
    vision: &VisionEncoder,
    data: &TaskData,
    eval: &[Sample],
    stages: Vec<StageReport>,
    fits: &[&FitOutcome],
    schedule: &LrSchedule,
    checksums: FrozenChecksums,
    start: Instant,
) -> Result<RunReport> {
    let last = fits.last().expect("at least one stage");
    let (trainable, frozen) = model.params().count();
    let mut audit = SlotAudit::default();
    for f in fits {
        audit.merge(f.audit);
    }
    let probe = eval.first().or(data.train.first()).ok_or_else(|| Error::Contract("no samples".into()))?;
    let alignment_samples = stages.iter().filter(|s| s.name == "alignment").map(|s| s.samples).sum();
    Ok(RunReport {
        model: name,
        seed: cfg.model.seed,
        optimizer: OptimizerInfo::new(schedule, cfg.train.weight_decay, cfg.train.grad_clip),
        alignment_samples,
        total_samples: stages.iter().map(|s| s.samples).sum(),
        stages,
        trainable_params: trainable,
        frozen_params: frozen,
        forward_macs_per_sample: forward_macs(model, vision, probe)?,
        majority_accuracy: data::majority_accuracy(eval),
        oracle_accuracy: oracle_accuracy(&data.spec, eval),
        final_eval: last.evals.last().cloned(),
        best_eval: last.best.map(|b| last.evals[b].clone()),
        evals: last.evals.clone(),
        losses: fits.iter().flat_map(|f| f.losses.iter().copied()).collect(),
        grad_norms: fits.iter().flat_map(|f| f.grad_norms.iter().copied()).collect(),
        slot_audit: audit,
        checksums,
        config: cfg.to_text(),
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

/// Single multimodal stage: fusion parameters and LoRA learn on the task
/// data directly, with no alignment stage.
pub fn train_inverse(cfg: &RunConfig, base: &BaseLm, data: &TaskData, exec: impl Into<Exec>) -> Result<TrainedRun<InverseModel>> {
    let start = Instant::now();
    let exec = exec.into();
    let vision = VisionEncoder::for_model(&cfg.model);
    let mut model = InverseModel::from_base(base);
    let before = FrozenChecksums::of(&model.store, &vision.weights);
    let opts = FitOptions::from_config(&cfg.train, exec, cfg.model.seed);
    let fit = train::fit(&mut model, &vision, &data.train, &data.eval, &opts)?;
    let after = FrozenChecksums::of(&model.store, &vision.weights);
    check_frozen(&before, &after)?;
    let stages = vec![StageReport::new("instruction", &fit, opts.batch_size)];
    let report = build_report(
        "inverse", cfg, &model, &vision, data, &data.eval, stages, &[&fit], &opts.schedule, after, start,
    )?;
    assert_eq!(report.alignment_samples, 0, "single-stage training consumed alignment samples");
    Ok(TrainedRun {
        model,
        report,
        best_params: fit.best_params,
    })
}

/// Projector baseline: `align_steps` on caption pairs training only the
/// projector (skipped when zero), then `instruct_steps` on task data
/// training projector and LoRA.
pub fn run_two_stage(
    cfg: &RunConfig,
    base: &BaseLm,
    align: &[Sample],
    data: &TaskData,
    align_steps: usize,
    instruct_steps: usize,
    exec: impl Into<Exec>,
) -> Result<TrainedRun<BaselineModel>> {
    if data.train.is_empty() || (align_steps > 0 && align.is_empty()) {
        return Err(Error::Contract("empty training set for the baseline".into()));
    }
    let start = Instant::now();
    let exec = exec.into();
    let vision = VisionEncoder::for_model(&cfg.model);
    let mut model = BaselineModel::from_base(base);
    let before = FrozenChecksums::of(&model.store, &vision.weights);
    let batch = cfg.train.batch_size;
    let mut stages = Vec::new();
    let mut fits = Vec::new();
    if align_steps > 0 {
        model.set_stage_alignment();
        let mut opts = FitOptions::from_config(&cfg.train, exec, cfg.model.seed ^ 1);
        opts.schedule = LrSchedule::new(cfg.train.learning_rate, cfg.train.warmup_ratio, align_steps);
        let fit = train::fit(&mut model, &vision, align, &[], &opts)?;
        stages.push(StageReport::new("alignment", &fit, batch));
        fits.push(fit);
    }
    model.set_stage_instruction();
    let mut opts = FitOptions::from_config(&cfg.train, exec, cfg.model.seed);
    opts.schedule = LrSchedule::new(cfg.train.learning_rate, cfg.train.warmup_ratio, instruct_steps);
    let fit = train::fit(&mut model, &vision, &data.train, &data.eval, &opts)?;
    stages.push(StageReport::new("instruction", &fit, batch));
    fits.push(fit);
    let after = FrozenChecksums::of(&model.store, &vision.weights);
    check_frozen(&before, &after)?;
    let refs: Vec<&FitOutcome> = fits.iter().collect();
    let report = build_report(
        "baseline", cfg, &model, &vision, data, &data.eval, stages, &refs, &opts.schedule, after, start,
    )?;
    let best_params = fits.pop().expect("instruction stage").best_params;
    Ok(TrainedRun {
        model,
        report,
        best_params,
    })
}

/// Steps the alignment and instruction stages get under the unit budget.
pub fn unit_steps(cfg: &RunConfig) -> (usize, usize) {
    let c = &cfg.compare;
    let batch = cfg.train.batch_size;
    (
        c.align_units * c.samples_per_unit / batch,
        c.instruct_units * c.samples_per_unit / batch,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineSummary {
    pub stages: Vec<StageReport>,
    pub alignment_samples: usize,
    pub total_samples: usize,
    pub trainable_params: usize,
    pub forward_macs_per_sample: u64,
    /// Forward plus backward, with backward counted as twice the forward.
    pub train_step_macs: u64,
    pub accuracy: BTreeMap<String, f64>,
    pub overall_accuracy: f64,
}

impl PipelineSummary {
    fn of(r: &RunReport, batch: usize) -> Self {
        let (accuracy, overall) = r
            .final_eval
            .as_ref()
            .map(|e| (e.result.accuracy.clone(), e.result.overall))
            .unwrap_or_default();
        Self {
            stages: r.stages.clone(),
            alignment_samples: r.alignment_samples,
            total_samples: r.total_samples,
            trainable_params: r.trainable_params,
            forward_macs_per_sample: r.forward_macs_per_sample,
            train_step_macs: 3 * batch as u64 * r.forward_macs_per_sample,
            accuracy,
            overall_accuracy: overall,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub inverse: PipelineSummary,
    pub baseline: PipelineSummary,
    pub sample_reduction: f64,
    /// `sample_reduction` in percent, rounded to one decimal.
    pub sample_reduction_pct: f64,
    /// Closed-form extra MACs of the fusion layers per sample.
    pub fusion_extra_macs_per_sample: u64,
    pub base_checksums: FrozenChecksums,
}

/// Tabulates two finished runs. Runs on different frozen bases are refused.
pub fn compare_reports(inverse: &RunReport, baseline: &RunReport, cfg: &RunConfig, p: usize, n_text: usize) -> Result<Comparison> {
    if inverse.checksums != baseline.checksums {
        return Err(Error::Comparison(
            "the two runs do not share the same frozen base LM and encoder".into(),
        ));
    }
    if baseline.total_samples == 0 {
        return Err(Error::Comparison("baseline consumed no samples".into()));
    }
    let reduction = 1.0 - inverse.total_samples as f64 / baseline.total_samples as f64;
    let batch = cfg.train.batch_size;
    Ok(Comparison {
        inverse: PipelineSummary::of(inverse, batch),
        baseline: PipelineSummary::of(baseline, batch),
        sample_reduction: reduction,
        sample_reduction_pct: (reduction * 1000.0).round() / 10.0,
        fusion_extra_macs_per_sample: cfg.model.fusion_layers.len() as u64
            * InverseModel::fusion_extra_macs(&cfg.model, p, n_text),
        base_checksums: inverse.checksums.clone(),
    })
}

/// Both pipelines from one frozen base under the unit budget.
pub fn compare_pipelines(
    cfg: &RunConfig,
    base: &BaseLm,
    data: &TaskData,
    exec: impl Into<Exec>,
) -> Result<(Comparison, TrainedRun<InverseModel>, TrainedRun<BaselineModel>)> {
    let exec = exec.into();
    let (align_steps, instruct_steps) = unit_steps(cfg);
    if instruct_steps == 0 {
        return Err(Error::Contract("instruction budget rounds to zero steps".into()));
    }
    let mut icfg = cfg.clone();
    icfg.train.total_steps = instruct_steps;
    let inverse = train_inverse(&icfg, base, data, exec)?;
    let captions = if align_steps > 0 {
        data::generate_captions(&data.spec, align_steps * cfg.train.batch_size, cfg.data.train_seed)?
    } else {
        Vec::new()
    };
    let baseline = run_two_stage(&icfg, base, &captions, data, align_steps, instruct_steps, exec)?;
    let probe = data.eval.first().or(data.train.first()).expect("non-empty data");
    let p = probe.image.as_ref().map_or(0, PatchGrid::patches);
    let n_text = probe.prompt.len() + probe.answer.len() - 1;
    let cmp = compare_reports(&inverse.report, &baseline.report, &icfg, p, n_text)?;
    Ok((cmp, inverse, baseline))
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckSummary {
    pub max_rel_error: f64,
    pub worst_tensor: Option<String>,
    pub worst_coordinate: Option<usize>,
    pub coordinates: usize,
    pub tensors: Vec<String>,
    pub eps: f64,
}

/// Central-difference check of every trainable tensor of a fusion model at a
/// random point. Trainable tensors are redrawn first so no path is
/// structurally zero. With `max_coords` set, each tensor is checked on at
/// most that many randomly chosen coordinates.
pub fn gradcheck_model(cfg: &ModelConfig, eps: f64, max_coords: Option<usize>) -> Result<GradCheckSummary> {
    let mut rng = rng::derive(cfg.seed, streams::GRADCHECK);
    let mut model = InverseModel::from_base(&BaseLm::init(cfg));
    let ids = model.store.trainable_ids();
    for &id in &ids {
        let shape = model.store.value(id).shape().to_vec();
        *model.store.value_mut(id) = Tensor::randn(&shape, 0.3, &mut rng);
    }
    let n = cfg.max_text_len;
    let tokens: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..cfg.vocab_size)).collect();
    let targets: Vec<usize> = (0..n).map(|_| rand::Rng::random_range(&mut rng, 0..cfg.vocab_size)).collect();
    let mask = vec![true; n];
    let v_emb = (cfg.patches > 0).then(|| Tensor::randn(&[cfg.d_v, cfg.patches], 1.0, &mut rng));
    let params: Vec<Tensor> = ids.iter().map(|&id| model.store.value(id).clone()).collect();
    let coords: Option<Vec<Vec<usize>>> = max_coords.map(|k| {
        params
            .iter()
            .map(|t| {
                if t.len() <= k {
                    (0..t.len()).collect()
                } else {
                    let mut c = sample_indices(&mut rng, t.len(), k).into_vec();
                    c.sort_unstable();
                    c
                }
            })
            .collect()
    });
    let model = &model;
    let objective = |tape: &mut Tape, vars: &[crate::tape::Var]| {
        let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
        let bind = model.store.bind_with(tape, false, &overrides);
        let v = v_emb.clone().map(|t| tape.constant(t));
        let out = model.forward(tape, &bind, v, &tokens)?;
        let text = tape.select_cols(out.logits, &out.layout.text)?;
        tape.cross_entropy(text, &targets, &mask)
    };
    let report: GradCheckReport = finite_diff_check_at(objective, &params, eps, coords.as_deref())?;
    let names: Vec<String> = ids.iter().map(|&id| model.store.get(id).name.clone()).collect();
    Ok(GradCheckSummary {
        max_rel_error: report.max_rel_error,
        worst_tensor: report.worst.map(|(i, _)| names[i].clone()),
        worst_coordinate: report.worst.map(|(_, c)| c),
        coordinates: report.coordinates,
        tensors: names,
        eps,
    })
}
