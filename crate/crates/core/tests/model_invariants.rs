mod common;

use common::*;
use vlfuse::baseline::BaselineModel;
use vlfuse::config::ModelConfig;
use vlfuse::model::{build_slot_layout, BaseLm, InverseModel, LanguageModel};
use vlfuse::tape::Tape;
use vlfuse::Tensor;
use rand::Rng as _;

#[test]
fn zero_init_fusion_model_reproduces_base_logits_exactly() {
    let cfg = ModelConfig::reference();
    let base = BaseLm::init(&cfg);
    let model = InverseModel::from_base(&base);
    let mut r = rng(10);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = r.random_range(1..=cfg.max_text_len);
        let tokens = random_tokens(&mut r, n, cfg.vocab_size);
        let v = random_visual(&mut r, &cfg);
        let fused = text_logits(&model, Some(&v), &tokens);
        let plain = text_logits(&base, Some(&v), &tokens);
        worst = worst.max(fused.max_abs_diff(&plain));
    }
    assert!(worst <= 1e-12, "max |Δ| = {worst}");
}

#[test]
fn zero_init_fusion_model_without_image_is_the_text_only_base() {
    let cfg = ModelConfig::reference();
    let base = BaseLm::init(&cfg);
    let model = InverseModel::from_base(&base);
    let mut r = rng(11);
    let tokens = random_tokens(&mut r, 10, cfg.vocab_size);
    assert_eq!(logits(&model, None, &tokens), logits(&base, None, &tokens));
}

#[test]
fn zero_init_projector_matches_base_with_empty_slots() {
    let cfg = ModelConfig::reference();
    let base = BaseLm::init(&cfg);
    let model = BaselineModel::from_base(&base);
    let mut r = rng(12);
    let tokens = random_tokens(&mut r, 7, cfg.vocab_size);
    let v = random_visual(&mut r, &cfg);
    assert_eq!(logits(&model, Some(&v), &tokens), logits(&base, Some(&v), &tokens));
    assert_eq!(logits(&model, None, &tokens), logits(&base, None, &tokens));
}

#[test]
fn reference_logits_shape() {
    let cfg = ModelConfig::reference();
    let model = InverseModel::from_base(&BaseLm::init(&cfg));
    let mut r = rng(13);
    let tokens = random_tokens(&mut r, cfg.max_text_len, cfg.vocab_size);
    let v = random_visual(&mut r, &cfg);
    assert_eq!(logits(&model, Some(&v), &tokens).shape(), &[64, 40]);
    let baseline = BaselineModel::from_base(&BaseLm::init(&cfg));
    assert_eq!(logits(&baseline, Some(&v), &tokens).shape(), &[64, 40]);
}

#[test]
fn future_tokens_never_change_earlier_logits() {
    let cfg = ModelConfig::reference();
    let mut r = rng(14);
    let mut model = InverseModel::from_base(&BaseLm::init(&cfg));
    randomize_trainable(&mut model.store, 0.2, &mut r);
    for _ in 0..10 {
        let n = r.random_range(2..=cfg.max_text_len);
        let tokens = random_tokens(&mut r, n, cfg.vocab_size);
        let v = random_visual(&mut r, &cfg);
        let cut = r.random_range(1..n);
        let mut changed = tokens.clone();
        for t in &mut changed[cut..] {
            *t = (*t + 1 + r.random_range(0..cfg.vocab_size - 1)) % cfg.vocab_size;
        }
        let a = text_logits(&model, Some(&v), &tokens);
        let b = text_logits(&model, Some(&v), &changed);
        for row in 0..cfg.vocab_size {
            for col in 0..cut {
                assert_eq!(a.at(row, col).to_bits(), b.at(row, col).to_bits());
            }
        }
    }
}

#[test]
fn alpha_and_concat_rescaling_leaves_logits_unchanged() {
    let cfg = ModelConfig {
        fusion_layers: vec![1, 3],
        ..ModelConfig::reference()
    };
    let mut r = rng(15);
    let mut model = InverseModel::from_base(&BaseLm::init(&cfg));
    randomize_trainable(&mut model.store, 0.2, &mut r);
    let tokens = random_tokens(&mut r, 12, cfg.vocab_size);
    let v = random_visual(&mut r, &cfg);
    let reference = logits(&model, Some(&v), &tokens);
    for c in [0.5, 2.0, 10.0] {
        let mut scaled = model.clone();
        for (_, f) in &model.fusion {
            for (alpha, wc) in [(f.alpha_q, f.wc_q), (f.alpha_k, f.wc_k), (f.alpha_v, f.wc_v)] {
                scaled.store.value_mut(alpha).scale_assign(c);
                scaled.store.value_mut(wc).scale_assign(1.0 / c);
            }
        }
        let got = logits(&scaled, Some(&v), &tokens);
        assert!(got.max_abs_diff(&reference) <= 1e-10, "c = {c}");
    }
}

#[test]
fn zero_alpha_disables_fusion() {
    let cfg = ModelConfig::micro();
    let mut r = rng(16);
    let base = BaseLm::init(&cfg);
    let mut model = InverseModel::from_base(&base);
    randomize_trainable(&mut model.store, 0.5, &mut r);
    for (_, f) in model.fusion.clone() {
        for a in [f.alpha_q, f.alpha_k, f.alpha_v] {
            *model.store.value_mut(a) = Tensor::scalar(0.0);
        }
    }
    // LoRA off as well, so the result must be the base model
    for (_, pair) in model.lora.clone() {
        for b in [pair.q.b, pair.v.b] {
            let shape = model.store.value(b).shape().to_vec();
            *model.store.value_mut(b) = Tensor::zeros(&shape);
        }
    }
    let tokens = random_tokens(&mut r, 4, cfg.vocab_size);
    let v = random_visual(&mut r, &cfg);
    assert!(logits(&model, Some(&v), &tokens).max_abs_diff(&logits(&base, Some(&v), &tokens)) == 0.0);
}

fn loss_and_grads(model: &InverseModel, v: &Tensor, tokens: &[usize]) -> (Tape, vlfuse::params::Binding, vlfuse::tape::Gradients, vlfuse::Var) {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, true);
    let vv = tape.leaf(v.clone(), true);
    let out = model.forward(&mut tape, &bind, Some(vv), tokens).unwrap();
    let text = tape.select_cols(out.logits, &out.layout.text).unwrap();
    let n = tokens.len();
    let targets: Vec<usize> = tokens.iter().map(|t| (t + 1) % model.cfg.vocab_size).collect();
    let loss = tape.cross_entropy(text, &targets, &vec![true; n]).unwrap();
    let grads = tape.backward(loss).unwrap();
    (tape, bind, grads, vv)
}

#[test]
fn every_trainable_tensor_gets_a_gradient_and_frozen_ones_none() {
    let cfg = ModelConfig::reference();
    let mut r = rng(17);
    let model = InverseModel::from_base(&BaseLm::init(&cfg));
    let tokens = random_tokens(&mut r, 6, cfg.vocab_size);
    let v = random_visual(&mut r, &cfg);
    let (_, bind, grads, _) = loss_and_grads(&model, &v, &tokens);
    for (id, p) in model.store.iter() {
        assert_eq!(grads.get(bind[id]).is_some(), p.trainable, "{}", p.name);
    }
}

#[test]
fn visual_features_influence_text_loss_once_fusion_is_live() {
    let cfg = ModelConfig::reference();
    let mut r = rng(18);
    let mut model = InverseModel::from_base(&BaseLm::init(&cfg));
    let (_, f) = model.fusion[0].clone();
    *model.store.value_mut(f.wc_k) = Tensor::randn(&[cfg.d_h, 2 * cfg.d_v], 0.1, &mut r);
    *model.store.value_mut(f.wc_v) = Tensor::randn(&[cfg.d_h, 2 * cfg.d_v], 0.1, &mut r);
    let tokens = random_tokens(&mut r, 6, cfg.vocab_size);
    let v = random_visual(&mut r, &cfg);
    let (_, _, grads, vv) = loss_and_grads(&model, &v, &tokens);
    let g = grads.get(vv).expect("gradient reaches the visual features");
    assert!(g.data().iter().any(|&x| x != 0.0));

    // and at zero init the visual features have no effect at all
    let fresh = InverseModel::from_base(&BaseLm::init(&cfg));
    let (_, _, grads, vv) = loss_and_grads(&fresh, &v, &tokens);
    assert!(grads.get(vv).is_none_or(|g| g.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn padded_streams_stay_complementary_on_every_fusion_layer() {
    let cfg = ModelConfig {
        fusion_layers: vec![1, 2, 3, 4],
        ..ModelConfig::reference()
    };
    let mut r = rng(19);
    let mut model = InverseModel::from_base(&BaseLm::init(&cfg));
    randomize_trainable(&mut model.store, 0.3, &mut r);
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, false);
    let v = tape.constant(random_visual(&mut r, &cfg));
    let out = model.forward(&mut tape, &bind, Some(v), &[1, 2, 3, 4, 5]).unwrap();
    assert_eq!(out.audit.checked_columns, 4 * 21);
    assert_eq!(out.audit.violations, 0);
}

#[test]
fn fusion_mac_overhead_matches_closed_form() {
    for (p_tokens, fusion_layers) in [(5usize, vec![1usize, 2, 3, 4]), (24, vec![1, 2, 3, 4])] {
        let cfg = ModelConfig {
            fusion_layers: fusion_layers.clone(),
            ..ModelConfig::reference()
        };
        let base = BaseLm::init(&cfg);
        let model = InverseModel::from_base(&base);
        assert!(model.lora.is_empty());
        let mut r = rng(20);
        let tokens = random_tokens(&mut r, p_tokens, cfg.vocab_size);
        let v = random_visual(&mut r, &cfg);
        let count = |m: &dyn Fn(&mut Tape)| {
            let mut tape = Tape::new();
            m(&mut tape);
            tape.mac_count()
        };
        let fused = count(&|tape: &mut Tape| {
            let bind = model.store.bind(tape, false);
            let vv = tape.constant(v.clone());
            model.forward(tape, &bind, Some(vv), &tokens).unwrap();
        });
        let plain = count(&|tape: &mut Tape| {
            let bind = base.store.bind(tape, false);
            base.forward_with_slots(tape, &bind, cfg.patches, &tokens).unwrap();
        });
        let per_layer = InverseModel::fusion_extra_macs(&cfg, cfg.patches, p_tokens);
        assert_eq!(fused - plain, fusion_layers.len() as u64 * per_layer);
    }
}

#[test]
fn parameter_partition_is_exhaustive() {
    let cfg = ModelConfig::reference();
    let model = InverseModel::from_base(&BaseLm::init(&cfg));
    let (trainable, frozen) = model.store.count();
    let total: usize = model.store.iter().map(|(_, p)| p.value.len()).sum();
    assert_eq!(trainable + frozen, total);
    let lora = 3 * 2 * (cfg.lora_rank * cfg.d_h * 2);
    assert_eq!(trainable, 14371 + lora);

    let all = ModelConfig {
        fusion_layers: vec![1, 2, 3, 4],
        ..ModelConfig::reference()
    };
    let model = InverseModel::from_base(&BaseLm::init(&all));
    let (trainable, frozen) = model.store.count();
    assert_eq!(trainable, 4 * 14371);
    let base_total: usize = BaseLm::init(&all).store.iter().map(|(_, p)| p.value.len()).sum();
    assert_eq!(frozen, base_total);
}

#[test]
fn oversize_inputs_are_rejected() {
    let cfg = ModelConfig::micro();
    let model = InverseModel::from_base(&BaseLm::init(&cfg));
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape, false);
    let err = model.forward(&mut tape, &bind, None, &[1; 5]).unwrap_err();
    assert!(matches!(err, vlfuse::Error::Capacity { .. }));
    let err = model.forward(&mut tape, &bind, None, &[16]).unwrap_err();
    assert!(matches!(err, vlfuse::Error::Index { .. }));
    let err = model.forward(&mut tape, &bind, None, &[]).unwrap_err();
    assert!(matches!(err, vlfuse::Error::Layout(_)));
    let bad = tape.constant(Tensor::zeros(&[cfg.d_v, cfg.patches + 1]));
    assert!(model.forward(&mut tape, &bind, Some(bad), &[1]).is_err());
    assert!(build_slot_layout(2, 0).is_err());
}
