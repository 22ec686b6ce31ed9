#![allow(dead_code, clippy::needless_range_loop)]

pub mod oracle;

use vlfuse::config::ModelConfig;
use vlfuse::model::LanguageModel;
use vlfuse::params::ParamStore;
use vlfuse::rng::{self, Rng};
use vlfuse::tape::Tape;
use vlfuse::Tensor;
use rand::Rng as _;

pub fn rng(label: u64) -> Rng {
    rng::derive(0xC0FFEE, label)
}

/// Redraws every trainable tensor so zero-initialized paths become live.
pub fn randomize_trainable(store: &mut ParamStore, std: f64, rng: &mut Rng) {
    for id in store.trainable_ids() {
        let shape = store.value(id).shape().to_vec();
        *store.value_mut(id) = Tensor::randn(&shape, std, rng);
    }
}

pub fn random_tokens(rng: &mut Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

pub fn random_visual(rng: &mut Rng, cfg: &ModelConfig) -> Tensor {
    Tensor::randn(&[cfg.d_v, cfg.patches], 1.0, rng)
}

/// Full `|V| × N` logits without gradients.
pub fn logits<M: LanguageModel>(model: &M, v_emb: Option<&Tensor>, tokens: &[usize]) -> Tensor {
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, false);
    let v = v_emb.map(|t| tape.constant(t.clone()));
    let out = model.forward(&mut tape, &bind, v, tokens).expect("forward");
    tape.value(out.logits).clone()
}

/// Logits restricted to the text columns, which are the last `tokens.len()` columns.
pub fn text_logits<M: LanguageModel>(model: &M, v_emb: Option<&Tensor>, tokens: &[usize]) -> Tensor {
    let all = logits(model, v_emb, tokens);
    let (rows, cols) = all.dims2();
    let start = cols - tokens.len();
    let mut out = Tensor::zeros(&[rows, tokens.len()]);
    for r in 0..rows {
        for c in 0..tokens.len() {
            out.set(r, c, all.at(r, start + c));
        }
    }
    out
}

pub fn to_mat(t: &Tensor) -> oracle::Mat {
    let (r, c) = t.dims2();
    (0..r).map(|i| (0..c).map(|j| t.at(i, j)).collect()).collect()
}

pub fn max_diff(t: &Tensor, m: &oracle::Mat) -> f64 {
    let (r, c) = t.dims2();
    assert_eq!((r, c), (m.len(), m[0].len()), "oracle shape");
    let mut worst = 0.0f64;
    for i in 0..r {
        for j in 0..c {
            worst = worst.max((t.at(i, j) - m[i][j]).abs());
        }
    }
    worst
}

pub fn oracle_shape(cfg: &ModelConfig) -> oracle::Shape {
    oracle::Shape {
        d_h: cfg.d_h,
        layers: cfg.layers,
        heads: cfg.heads,
        lora_scale: cfg.lora_scale(),
    }
}

pub const TINY: &str = "\
d_h = 16
d_v = 8
layers = 2
heads = 2
vocab_size = 32
patches = 4
max_text_len = 12
fusion_layers = 1
lora_rank = 2
lora_alpha = 4
cell_pixels = 1
seed = 5
learning_rate = 3e-3
total_steps = 24
batch_size = 4
eval_every = 8
pretrain_steps = 60
pretrain_lr = 3e-3
pretrain_target_acc = 0.0
copy_len = 4
pretrain_eval_every = 20
train_size = 96
eval_size = 24
eval_seed = 50000
align_units = 6
instruct_units = 8
samples_per_unit = 2
";

/// A run small enough to train end to end inside a unit test.
pub fn tiny_config() -> vlfuse::config::RunConfig {
    vlfuse::config::RunConfig::parse(TINY).expect("tiny config")
}
