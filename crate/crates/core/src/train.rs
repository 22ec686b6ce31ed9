//! Optimization: learning-rate schedule, AdamW, batched steps and the
//! evaluate/fit loop shared by base pretraining, fusion training and the
//! projector baseline.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::config::TrainConfig;
use crate::data::{Sample, TaskKind};
use crate::error::{Error, Result};
use crate::model::{LanguageModel, SlotAudit};
use crate::params::{ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::vision::VisionEncoder;
use rand::seq::SliceRandom;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Reference mode evaluates a batch sample by sample; throughput mode
/// evaluates samples in parallel. Both reduce gradients in sample order, so
/// they produce the same numbers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Reference,
    Throughput,
}

/// How a run executes: batch evaluation mode and an optional progress hook.
#[derive(Clone, Copy, Debug)]
pub struct Exec {
    pub mode: Mode,
    pub on_eval: Option<fn(&EvalRecord)>,
}

impl From<Mode> for Exec {
    fn from(mode: Mode) -> Self {
        Self { mode, on_eval: None }
    }
}

/// Linear warmup from 0 to `peak` over `warmup` steps, then cosine decay
/// reaching 0 at step `total - 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LrSchedule {
    pub fn new(peak: f64, warmup_ratio: f64, total: usize) -> Self {
        Self {
            peak,
            warmup: (warmup_ratio * total as f64).round() as usize,
            total,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.learning_rate, cfg.warmup_ratio, cfg.total_steps)
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        let last = self.total.saturating_sub(1);
        if last <= self.warmup {
            return self.peak;
        }
        let progress = (step.min(last) - self.warmup) as f64 / (last - self.warmup) as f64;
        self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// AdamW moments for exactly the trainable parameters of a store.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    slots: Vec<(ParamId, Tensor, Tensor)>,
    pub step: u64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let slots = store
            .trainable_ids()
            .into_iter()
            .map(|id| {
                let shape = store.value(id).shape().to_vec();
                (id, Tensor::zeros(&shape), Tensor::zeros(&shape))
            })
            .collect();
        Self {
            slots,
            step: 0,
            weight_decay,
        }
    }

    /// True when the moments cover exactly the trainable partition with matching shapes.
    pub fn mirrors(&self, store: &ParamStore) -> bool {
        let ids = store.trainable_ids();
        ids.len() == self.slots.len()
            && ids.iter().zip(&self.slots).all(|(&id, (sid, m, v))| {
                id == *sid && m.shape() == store.value(id).shape() && v.shape() == m.shape()
            })
    }

    /// One update from the gradients accumulated in `store`; missing gradients count as zero.
    pub fn apply(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - BETA1.powi(t), 1.0 - BETA2.powi(t));
        for (id, m, v) in &mut self.slots {
            let param = store.get_mut(*id);
            let grad = param.grad.take();
            let g = grad.as_ref().map(|g| g.data());
            let p = param.value.data_mut();
            let (m, v) = (m.data_mut(), v.data_mut());
            for i in 0..p.len() {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                p[i] -= lr * (update + self.weight_decay * p[i]);
            }
        }
    }
}

/// Loss and gradients of one sample; gradients keyed by trainable parameter.
struct SampleGrad {
    loss: f64,
    count: usize,
    grads: Vec<(ParamId, Tensor)>,
    audit: SlotAudit,
}

fn sample_grad<M: LanguageModel>(model: &M, vision: &VisionEncoder, sample: &Sample, weight: f64) -> Result<SampleGrad> {
    let store = model.params();
    let mut tape = Tape::new();
    let bind = store.bind(&mut tape, true);
    let v_emb = match &sample.image {
        Some(img) => Some(tape.constant(vision.encode(img)?.0)),
        None => None,
    };
    let (inputs, targets, mask) = sample.next_token_view();
    let out = model.forward(&mut tape, &bind, v_emb, &inputs)?;
    let text_logits = tape.select_cols(out.logits, &out.layout.text)?;
    let mean = tape.cross_entropy(text_logits, &targets, &mask)?;
    let loss = tape.value(mean).item();
    let count = mask.iter().filter(|&&m| m).count();
    let scaled = tape.scale(mean, weight);
    let grads = tape.backward(scaled)?;
    let grads = store
        .trainable_ids()
        .into_iter()
        .filter_map(|id| grads.get(bind[id]).map(|g| (id, g.clone())))
        .collect();
    Ok(SampleGrad {
        loss,
        count,
        grads,
        audit: out.audit,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Token-mean loss over the batch.
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub audit: SlotAudit,
}

fn dump_batch(batch: &[Sample]) -> String {
    serde_json::to_string(&batch.iter().map(Sample::to_json).collect::<Vec<_>>()).unwrap_or_default()
}

/// Forward/backward over `batch`, optional global-norm clipping, one AdamW update.
///
/// The loss is the mean over every answer token in the batch. Frozen
/// parameters are never touched. A non-finite loss or gradient aborts with
/// the offending batch serialized into the error.
#[allow(clippy::too_many_arguments)]
pub fn train_step<M: LanguageModel>(
    model: &mut M,
    opt: &mut OptimizerState,
    vision: &VisionEncoder,
    batch: &[Sample],
    lr: f64,
    grad_clip: f64,
    mode: Mode,
    step: usize,
) -> Result<StepOutcome> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let total: usize = batch.iter().map(|s| s.answer.len()).sum();
    let weight = |s: &Sample| s.answer.len() as f64 / total as f64;
    let results: Vec<Result<SampleGrad>> = {
        let m = &*model;
        match mode {
            Mode::Reference => batch.iter().map(|s| sample_grad(m, vision, s, weight(s))).collect(),
            Mode::Throughput => batch.par_iter().map(|s| sample_grad(m, vision, s, weight(s))).collect(),
        }
    };
    let store = model.params_mut();
    store.zero_grads();
    let mut loss = 0.0;
    let mut audit = SlotAudit::default();
    for r in results {
        let r = r?;
        loss += r.loss * r.count as f64 / total as f64;
        audit.merge(r.audit);
        for (id, g) in r.grads {
            let slot = &mut store.get_mut(id).grad;
            match slot {
                Some(acc) => acc.add_assign(&g),
                None => *slot = Some(g),
            }
        }
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            dump: dump_batch(batch),
        });
    }
    let sq: f64 = store.iter().filter_map(|(_, p)| p.grad.as_ref()).map(Tensor::sq_norm).sum();
    let grad_norm = sq.sqrt();
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            dump: dump_batch(batch),
        });
    }
    if grad_clip > 0.0 && grad_norm > grad_clip {
        let c = grad_clip / grad_norm;
        for id in store.trainable_ids() {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.scale_assign(c);
            }
        }
    }
    opt.apply(store, lr);
    Ok(StepOutcome { loss, grad_norm, audit })
}

/// Teacher-forced result on one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub kind: TaskKind,
    /// Argmax at each answer position.
    pub predicted: Vec<usize>,
    pub correct_tokens: usize,
    pub answer_tokens: usize,
    pub loss: f64,
}

impl Prediction {
    pub fn exact(&self) -> bool {
        self.correct_tokens == self.answer_tokens
    }
}

/// Greedy argmax at every answer position under teacher forcing; ties go to the lower id.
pub fn predict<M: LanguageModel>(model: &M, vision: &VisionEncoder, sample: &Sample) -> Result<(Prediction, SlotAudit)> {
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, false);
    let v_emb = match &sample.image {
        Some(img) => Some(tape.constant(vision.encode(img)?.0)),
        None => None,
    };
    let (inputs, targets, mask) = sample.next_token_view();
    let out = model.forward(&mut tape, &bind, v_emb, &inputs)?;
    let text_logits = tape.select_cols(out.logits, &out.layout.text)?;
    let loss = tape.cross_entropy(text_logits, &targets, &mask)?;
    let logits = tape.value(text_logits);
    let mut predicted = Vec::new();
    let mut correct = 0;
    for (j, (&t, &m)) in targets.iter().zip(&mask).enumerate() {
        if !m {
            continue;
        }
        let col = logits.column(j);
        let best = col
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc })
            .0;
        predicted.push(best);
        correct += usize::from(best == t);
    }
    Ok((
        Prediction {
            kind: sample.kind,
            answer_tokens: predicted.len(),
            predicted,
            correct_tokens: correct,
            loss: tape.value(loss).item(),
        },
        out.audit,
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// Fraction of samples whose every answer token is right, per task kind.
    pub accuracy: BTreeMap<String, f64>,
    pub overall: f64,
    pub token_accuracy: f64,
    pub loss: f64,
    pub samples: usize,
    #[serde(skip)]
    pub audit: SlotAudit,
}

/// Evaluation is read-only, so samples always run in parallel; results are
/// reduced in sample order.
pub fn evaluate<M: LanguageModel>(model: &M, vision: &VisionEncoder, samples: &[Sample]) -> Result<EvalResult> {
    if samples.is_empty() {
        return Err(Error::Contract("empty evaluation set".into()));
    }
    let preds: Vec<(Prediction, SlotAudit)> = samples
        .par_iter()
        .map(|s| predict(model, vision, s))
        .collect::<Result<_>>()?;
    let mut per_kind: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let (mut exact, mut tok, mut tok_total, mut loss) = (0, 0, 0, 0.0);
    let mut audit = SlotAudit::default();
    for (p, a) in &preds {
        let e = per_kind.entry(p.kind.name().to_string()).or_default();
        e.0 += usize::from(p.exact());
        e.1 += 1;
        exact += usize::from(p.exact());
        tok += p.correct_tokens;
        tok_total += p.answer_tokens;
        loss += p.loss;
        audit.merge(*a);
    }
    Ok(EvalResult {
        accuracy: per_kind.into_iter().map(|(k, (c, n))| (k, c as f64 / n as f64)).collect(),
        overall: exact as f64 / preds.len() as f64,
        token_accuracy: tok as f64 / tok_total.max(1) as f64,
        loss: loss / preds.len() as f64,
        samples: preds.len(),
        audit,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRecord {
    pub step: usize,
    #[serde(flatten)]
    pub result: EvalResult,
}

/// Knobs of one optimization stage.
#[derive(Clone, Debug)]
pub struct FitOptions {
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub eval_every: usize,
    pub mode: Mode,
    /// Stop once held-out token accuracy reaches this value.
    pub stop_at_token_accuracy: Option<f64>,
    /// Seed for the per-epoch shuffles of the training set.
    pub shuffle_seed: u64,
    /// Called after every evaluation, e.g. to report progress.
    pub on_eval: Option<fn(&EvalRecord)>,
}

impl FitOptions {
    pub fn from_config(cfg: &TrainConfig, exec: Exec, shuffle_seed: u64) -> Self {
        Self {
            schedule: LrSchedule::from_config(cfg),
            batch_size: cfg.batch_size,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            eval_every: cfg.eval_every,
            mode: exec.mode,
            stop_at_token_accuracy: None,
            shuffle_seed,
            on_eval: exec.on_eval,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub steps: usize,
    pub losses: Vec<f64>,
    pub grad_norms: Vec<f64>,
    pub evals: Vec<EvalRecord>,
    /// Index into `evals` of the best overall accuracy (first on ties).
    pub best: Option<usize>,
    /// Trainable tensors at the best evaluation.
    pub best_params: Vec<(String, Tensor)>,
    pub audit: SlotAudit,
}

impl FitOutcome {
    pub fn samples(&self, batch: usize) -> usize {
        self.steps * batch
    }
}

/// Runs `opts.schedule.total` steps (fewer if the stop criterion fires),
/// drawing consecutive batches from `train` reshuffled every epoch, and
/// evaluating on `eval` every `eval_every` steps and after the last step.
pub fn fit<M: LanguageModel>(
    model: &mut M,
    vision: &VisionEncoder,
    train: &[Sample],
    eval: &[Sample],
    opts: &FitOptions,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Contract("empty training set".into()));
    }
    let batch = opts.batch_size;
    let total = opts.schedule.total;
    let mut opt = OptimizerState::new(model.params(), opts.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch = 0u64;
    let mut cursor = 0;
    let mut out = FitOutcome {
        steps: 0,
        losses: Vec::with_capacity(total),
        grad_norms: Vec::with_capacity(total),
        evals: Vec::new(),
        best: None,
        best_params: Vec::new(),
        audit: SlotAudit::default(),
    };
    let shuffle = |order: &mut Vec<usize>, epoch: u64| {
        let mut r = rng::derive(opts.shuffle_seed ^ epoch.wrapping_mul(0x9E37_79B9), streams::SHUFFLE);
        order.shuffle(&mut r);
    };
    shuffle(&mut order, epoch);
    for step in 0..total {
        let mut items = Vec::with_capacity(batch);
        while items.len() < batch {
            if cursor == order.len() {
                epoch += 1;
                cursor = 0;
                shuffle(&mut order, epoch);
            }
            items.push(train[order[cursor]].clone());
            cursor += 1;
        }
        let lr = opts.schedule.lr(step);
        let s = train_step(model, &mut opt, vision, &items, lr, opts.grad_clip, opts.mode, step)?;
        out.audit.merge(s.audit);
        out.losses.push(s.loss);
        out.grad_norms.push(s.grad_norm);
        out.steps = step + 1;
        let last = step + 1 == total;
        if !eval.is_empty() && ((opts.eval_every > 0 && (step + 1) % opts.eval_every == 0) || last) {
            let result = evaluate(&*model, vision, eval)?;
            out.audit.merge(result.audit);
            let better = out.best.is_none_or(|b| result.overall > out.evals[b].result.overall);
            let done = opts.stop_at_token_accuracy.is_some_and(|t| result.token_accuracy >= t);
            out.evals.push(EvalRecord { step: step + 1, result });
            if let Some(report) = opts.on_eval {
                report(out.evals.last().expect("just pushed"));
            }
            if better {
                out.best = Some(out.evals.len() - 1);
                out.best_params = snapshot_trainable(model.params());
            }
            if done {
                break;
            }
        }
    }
    if out.audit.violations > 0 {
        return Err(Error::Contract(format!(
            "{} padded-stream columns were not zero",
            out.audit.violations
        )));
    }
    Ok(out)
}

pub fn snapshot_trainable(store: &ParamStore) -> Vec<(String, Tensor)> {
    store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| (p.name.clone(), p.value.clone()))
        .collect()
}

/// Writes a snapshot from [`snapshot_trainable`] back into a store.
pub fn restore(store: &mut ParamStore, snapshot: &[(String, Tensor)]) -> Result<()> {
    for (name, t) in snapshot {
        let id = store.id(name)?;
        if store.value(id).shape() != t.shape() {
            return Err(Error::shape("restore", store.value(id).shape(), t.shape()));
        }
        *store.value_mut(id) = t.clone();
    }
    Ok(())
}

/// Centered moving average with the window truncated at the ends.
pub fn smoothed(losses: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..losses.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(losses.len());
            losses[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}
