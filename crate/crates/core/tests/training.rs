mod common;

use common::tiny_config;
use vlfuse::checkpoint::Checkpoint;
use vlfuse::config::RunConfig;
use vlfuse::data;
use vlfuse::model::{BaseLm, FrozenChecksums, InverseModel, LanguageModel};
use vlfuse::pipeline::{self, TaskData};
use vlfuse::train::{self, Mode, OptimizerState};
use vlfuse::vision::VisionEncoder;
use vlfuse::Error;

fn base(cfg: &RunConfig) -> BaseLm {
    pipeline::pretrain_base_lm(cfg, Mode::Reference).expect("pretrain").0
}

#[test]
fn pretraining_reduces_the_copy_loss() {
    let mut cfg = tiny_config();
    cfg.pretrain.steps = 300;
    cfg.pretrain.eval_every = 300;
    let (_, report) = pipeline::pretrain_base_lm(&cfg, Mode::Reference).unwrap();
    assert_eq!(report.steps, 300);
    let s = train::smoothed(&report.losses, 20);
    assert!(s.last().unwrap() < &(s[0] * 0.8), "{} -> {}", s[0], s.last().unwrap());
}

#[test]
fn pretraining_below_target_is_a_training_failure() {
    let mut cfg = tiny_config();
    cfg.pretrain.steps = 4;
    cfg.pretrain.eval_every = 4;
    cfg.pretrain.target_accuracy = 1.0;
    match pipeline::pretrain_base_lm(&cfg, Mode::Reference) {
        Err(Error::TrainingFailure { losses, .. }) => assert_eq!(losses.len(), 4),
        other => panic!("expected a training failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn single_stage_leaves_frozen_weights_untouched() {
    let cfg = tiny_config();
    let base = base(&cfg);
    let vision = VisionEncoder::for_model(&cfg.model);
    let before = FrozenChecksums::of(&InverseModel::from_base(&base).store, &vision.weights);
    let data = TaskData::from_config(&cfg).unwrap();
    let run = pipeline::train_inverse(&cfg, &base, &data, Mode::Reference).unwrap();
    assert_eq!(run.report.checksums, before);
    assert_eq!(FrozenChecksums::of(&run.model.store, &vision.weights), before);
    assert_eq!(run.report.alignment_samples, 0);
    assert_eq!(run.report.total_samples, 24 * 4);
    assert_eq!(run.report.slot_audit.violations, 0);
    assert!(run.report.slot_audit.checked_columns > 0);

    // frozen tensors are bitwise the base values
    for (name, p) in base.store.iter().map(|(_, p)| (p.name.clone(), p)) {
        assert_eq!(run.model.store.by_name(&name).unwrap(), &p.value, "{name}");
    }
    assert!(OptimizerState::new(&run.model.store, 0.0).mirrors(&run.model.store));
}

#[test]
fn throughput_mode_reproduces_reference_bitwise() {
    let cfg = tiny_config();
    let base = base(&cfg);
    let data = TaskData::from_config(&cfg).unwrap();
    let a = pipeline::train_inverse(&cfg, &base, &data, Mode::Reference).unwrap();
    let b = pipeline::train_inverse(&cfg, &base, &data, Mode::Throughput).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.report.losses), bits(&b.report.losses));
    assert_eq!(
        Checkpoint::from_store("inverse", "", &a.model.store).to_bytes(),
        Checkpoint::from_store("inverse", "", &b.model.store).to_bytes()
    );
}

#[test]
fn two_stage_accounting() {
    let cfg = tiny_config();
    let base = base(&cfg);
    let data = TaskData::from_config(&cfg).unwrap();
    let (align_steps, instruct_steps) = pipeline::unit_steps(&cfg);
    assert_eq!((align_steps, instruct_steps), (3, 4));
    let captions = data::generate_captions(&data.spec, align_steps * 4, 0).unwrap();
    let run = pipeline::run_two_stage(&cfg, &base, &captions, &data, align_steps, instruct_steps, Mode::Reference).unwrap();
    let names: Vec<_> = run.report.stages.iter().map(|s| (s.name, s.steps, s.samples)).collect();
    assert_eq!(names, vec![("alignment", 3, 12), ("instruction", 4, 16)]);
    assert_eq!(run.report.alignment_samples, 12);
    assert_eq!(run.report.total_samples, 28);

    let skipped = pipeline::run_two_stage(&cfg, &base, &[], &data, 0, instruct_steps, Mode::Reference).unwrap();
    assert_eq!(skipped.report.stages.len(), 1);
    assert_eq!(skipped.report.alignment_samples, 0);
}

#[test]
fn comparison_reports_the_unit_budget_reduction() {
    let cfg = tiny_config();
    let base = base(&cfg);
    let data = TaskData::from_config(&cfg).unwrap();
    let (cmp, inverse, baseline) = pipeline::compare_pipelines(&cfg, &base, &data, Mode::Reference).unwrap();
    // 6 alignment + 8 instruction units against 8 instruction units
    assert!((cmp.sample_reduction - 6.0 / 14.0).abs() < 1e-12);
    assert_eq!(cmp.sample_reduction_pct, 42.9);
    assert_eq!(inverse.report.checksums, baseline.report.checksums);

    let mut other = baseline.report.clone();
    other.checksums.base_layers = "0".repeat(64);
    assert!(matches!(
        pipeline::compare_reports(&inverse.report, &other, &cfg, 4, 5),
        Err(Error::Comparison(_))
    ));

    let mut none = cfg.clone();
    none.compare.align_units = 0;
    let (cmp, _, _) = pipeline::compare_pipelines(&none, &base, &data, Mode::Reference).unwrap();
    assert_eq!(cmp.sample_reduction, 0.0);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    let cfg = tiny_config();
    let base = base(&cfg);
    let data = TaskData::from_config(&cfg).unwrap();
    let run = pipeline::train_inverse(&cfg, &base, &data, Mode::Reference).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    Checkpoint::from_store("inverse", &cfg.to_text(), &run.model.store).save(&path).unwrap();

    let mut fresh = InverseModel::from_base(&base);
    Checkpoint::load(&path).unwrap().apply_to(&mut fresh.store).unwrap();
    let vision = VisionEncoder::for_model(&cfg.model);
    let again = train::evaluate(&fresh, &vision, &data.eval).unwrap();
    let reported = run.report.final_eval.unwrap().result;
    assert_eq!(again.overall.to_bits(), reported.overall.to_bits());
    assert_eq!(again.loss.to_bits(), reported.loss.to_bits());
    assert_eq!(fresh.params().count(), run.model.params().count());
}

#[test]
fn task_loss_decreases_under_training() {
    let mut cfg = tiny_config();
    cfg.train.total_steps = 150;
    cfg.train.eval_every = 150;
    cfg.data.train_size = 600;
    cfg.data.eval_size = 100;
    cfg.data.tasks = vec![data::TaskKind::Existence];
    let base = base(&cfg);
    let data = TaskData::from_config(&cfg).unwrap();
    let run = pipeline::train_inverse(&cfg, &base, &data, Mode::Throughput).unwrap();
    let s = train::smoothed(&run.report.losses, 30);
    assert!(s.last().unwrap() < &s[0], "{} -> {}", s[0], s.last().unwrap());
    assert!(run.report.oracle_accuracy == 1.0);
}

#[test]
fn base_checkpoint_loads_under_other_adapter_settings() {
    let cfg = tiny_config();
    let base = base(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.ckpt");
    Checkpoint::from_store("base", &cfg.to_text(), &base.store).save(&path).unwrap();

    let mut other = cfg.model.clone();
    other.fusion_layers = vec![1, 2];
    other.lora_rank = 3;
    let loaded = pipeline::load_base(&path, &other).unwrap();
    assert_eq!(loaded.store.checksum(|_| true), base.store.checksum(|_| true));
    assert!(loaded.store.trainable_ids().is_empty());

    other.d_h = 8;
    assert!(matches!(pipeline::load_base(&path, &other), Err(Error::Checkpoint(_))));
}
