//! Decoder-only transformer with text-to-visual fusion inside attention.
//!
//! Sequences are laid out as `p` vision slots followed by the text tokens.
//! The base LM sees vision slots only through their positional encodings.
//! In a fusion layer `l ∈ S` the normalized hidden state `X` is projected
//! into visual width, `T = W_t2v·X + b_t2v`, its vision columns are zeroed,
//! the visual features are scattered into the complementary columns, and
//!
//! ```text
//! F = [T_pad ; V_pad]                       (2·d_v × N)
//! Q = W_Q·X + α_Q · W_cQ·F
//! K = W_K·X + α_K · W_cK·F
//! V = W_V·X + α_V · W_cV·F
//! ```
//!
//! Non-fusion layers carry low-rank adapters on `W_Q` and `W_V`. All base
//! weights, embeddings and the LM head stay frozen during multimodal training.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vision::EncoderWeights;

/// Partition of `0..total` into vision slots (a prefix) and text slots.
///
/// Positions are 0-based here; vision occupies `0..p`, text `p..p+n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotLayout {
    pub total: usize,
    pub vis: Vec<usize>,
    pub text: Vec<usize>,
}

pub fn build_slot_layout(p: usize, n_text: usize) -> Result<SlotLayout> {
    if n_text == 0 {
        return Err(Error::Layout("at least one text position is required".into()));
    }
    Ok(SlotLayout {
        total: p + n_text,
        vis: (0..p).collect(),
        text: (p..p + n_text).collect(),
    })
}

impl SlotLayout {
    pub fn is_vis(&self, pos: usize) -> bool {
        pos < self.vis.len()
    }

    /// Row-major `N × N` visibility: row = query position, column = key position.
    ///
    /// Vision slots see each other; text sees all vision slots and earlier or
    /// equal text slots; vision never sees text.
    pub fn attention_mask(&self) -> Vec<bool> {
        let n = self.total;
        let mut mask = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                mask[i * n + j] = match (self.is_vis(i), self.is_vis(j)) {
                    (true, true) => true,
                    (true, false) => false,
                    (false, true) => true,
                    (false, false) => j <= i,
                };
            }
        }
        mask
    }
}

/// Running count of zero-column checks on the padded fusion streams.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize)]
pub struct SlotAudit {
    pub checked_columns: usize,
    pub violations: usize,
}

impl SlotAudit {
    pub fn merge(&mut self, other: SlotAudit) {
        self.checked_columns += other.checked_columns;
        self.violations += other.violations;
    }
}

/// `W_t2v · H + b_t2v`, bias broadcast over columns.
pub fn project_text_to_visual(tape: &mut Tape, h: Var, w_t2v: Var, b_t2v: Var) -> Result<Var> {
    let t = tape.matmul(w_t2v, h)?;
    tape.add_bias(t, b_t2v)
}

/// Builds `(T_pad, V_pad)`: projected text kept at text slots, visual
/// features scattered to vision slots, zeros elsewhere in each stream.
pub fn build_padded_streams(
    tape: &mut Tape,
    t_proj: Var,
    v_emb: Option<Var>,
    layout: &SlotLayout,
) -> Result<(Var, Var)> {
    let p = layout.vis.len();
    let (d_v, n) = tape.value(t_proj).dims2();
    if n != layout.total {
        return Err(Error::Layout(format!(
            "projected text has {n} columns, layout has {}",
            layout.total
        )));
    }
    let got = v_emb.map(|v| tape.value(v).cols()).unwrap_or(0);
    if got != p {
        return Err(Error::Layout(format!("{got} visual tokens for {p} vision slots")));
    }
    let t_pad = if p == 0 {
        t_proj
    } else {
        let kept = tape.select_cols(t_proj, &layout.text)?;
        tape.scatter_cols(kept, &layout.text, n)?
    };
    let v_pad = match v_emb {
        Some(v) => {
            let rows = tape.value(v).rows();
            if rows != d_v {
                return Err(Error::shape("padded streams", &[d_v, n], tape.value(v).shape()));
            }
            tape.scatter_cols(v, &layout.vis, n)?
        }
        None => tape.constant(Tensor::zeros(&[d_v, n])),
    };
    Ok((t_pad, v_pad))
}

/// Checks the complementary-zero invariant of a pair of padded streams.
pub fn audit_streams(tape: &Tape, t_pad: Var, v_pad: Var, layout: &SlotLayout) -> SlotAudit {
    let (t, v) = (tape.value(t_pad), tape.value(v_pad));
    let mut audit = SlotAudit::default();
    for &c in &layout.vis {
        audit.checked_columns += 1;
        if t.column(c).iter().any(|&x| x != 0.0) {
            audit.violations += 1;
        }
    }
    for &c in &layout.text {
        audit.checked_columns += 1;
        if v.column(c).iter().any(|&x| x != 0.0) {
            audit.violations += 1;
        }
    }
    audit
}

/// Multi-head scaled dot-product attention over `d_h × N` inputs followed by `W_O`.
///
/// `mask` is row-major `N × N` (query row, key column); masked scores act as −∞.
pub fn attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    w_o: Var,
    mask: &[bool],
    heads: usize,
) -> Result<Var> {
    let (d_h, n) = tape.value(q).dims2();
    if heads == 0 || d_h % heads != 0 {
        return Err(Error::Contract(format!("{heads} heads do not divide d_h = {d_h}")));
    }
    for x in [k, v] {
        if tape.value(x).dims2() != (d_h, n) {
            return Err(Error::shape("attention", tape.value(q).shape(), tape.value(x).shape()));
        }
    }
    // the diagonal is always visible
    let mut mask = mask.to_vec();
    for i in 0..n {
        mask[i * n + i] = true;
    }
    let dk = d_h / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let mut merged: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_rows(q, h * dk, dk)?;
        let kh = tape.slice_rows(k, h * dk, dk)?;
        let vh = tape.slice_rows(v, h * dk, dk)?;
        let qt = tape.transpose(qh);
        let scores = tape.matmul(qt, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.masked_softmax_rows(scores, &mask)?;
        let wt = tape.transpose(weights);
        let out = tape.matmul(vh, wt)?;
        merged = Some(match merged {
            None => out,
            Some(acc) => tape.concat_rows(acc, out)?,
        });
    }
    tape.matmul(w_o, merged.expect("at least one head"))
}

/// Sinusoidal table, `rows × d` (row = position).
pub fn sinusoidal_table(rows: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows, d]);
    for pos in 0..rows {
        for i in 0..d {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * k / d as f64);
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct DecoderIds {
    pub tok_emb: ParamId,
    pub pos_enc: ParamId,
    pub blocks: Vec<BlockIds>,
    pub lm_w: ParamId,
    pub lm_b: ParamId,
}

/// Trainable fusion parameters of one layer.
#[derive(Clone, Debug)]
pub struct FusionIds {
    pub w_t2v: ParamId,
    pub b_t2v: ParamId,
    pub wc_q: ParamId,
    pub wc_k: ParamId,
    pub wc_v: ParamId,
    pub alpha_q: ParamId,
    pub alpha_k: ParamId,
    pub alpha_v: ParamId,
}

/// Low-rank delta `scale · B · A` on one frozen projection.
#[derive(Clone, Debug)]
pub struct LoraAdapter {
    /// `r × d_h`, small random init
    pub a: ParamId,
    /// `d_h × r`, zero init
    pub b: ParamId,
    pub scale: f64,
}

#[derive(Clone, Debug)]
pub struct LoraPair {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

impl LoraAdapter {
    fn add(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, rng: &mut rng::Rng) -> Self {
        let a = store.add(
            format!("{prefix}.a"),
            Tensor::randn(&[cfg.lora_rank, cfg.d_h], 1.0 / (cfg.d_h as f64).sqrt(), rng),
            true,
        );
        let b = store.add(format!("{prefix}.b"), Tensor::zeros(&[cfg.d_h, cfg.lora_rank]), true);
        Self {
            a,
            b,
            scale: cfg.lora_scale(),
        }
    }

    /// `base + scale · B·(A·x)`
    fn apply(&self, tape: &mut Tape, bind: &Binding, x: Var, base: Var) -> Result<Var> {
        let ax = tape.matmul(bind[self.a], x)?;
        let bax = tape.matmul(bind[self.b], ax)?;
        let delta = tape.scale(bax, self.scale);
        tape.add(base, delta)
    }
}

impl LoraPair {
    pub(crate) fn add(store: &mut ParamStore, layer: usize, cfg: &ModelConfig, rng: &mut rng::Rng) -> Self {
        Self {
            q: LoraAdapter::add(store, &format!("lora{layer}.q"), cfg, rng),
            v: LoraAdapter::add(store, &format!("lora{layer}.v"), cfg, rng),
        }
    }
}

/// What a block adds on top of its frozen projections.
#[derive(Clone, Copy)]
pub(crate) enum BlockMode<'a> {
    Plain,
    Lora(&'a LoraPair),
    Fusion(&'a FusionIds, Option<Var>),
}

/// Output of one decoder pass.
#[derive(Clone, Debug)]
pub struct ForwardOut {
    /// `|V| × N` logits over every slot.
    pub logits: Var,
    pub layout: SlotLayout,
    pub audit: SlotAudit,
}

impl DecoderIds {
    fn add(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut rng::Rng) -> Self {
        let d = cfg.d_h;
        let inv = |n: usize| 1.0 / (n as f64).sqrt();
        let out_scale = 1.0 / (2.0 * cfg.layers as f64).sqrt();
        let tok_emb = store.add("tok_emb", Tensor::randn(&[cfg.vocab_size, d], 1.0, rng), true);
        let pos_enc = store.add("pos_enc", sinusoidal_table(cfg.max_seq_len(), d), false);
        let blocks = (1..=cfg.layers)
            .map(|l| {
                let mut w = |name: &str, shape: &[usize], std: f64| {
                    store.add(format!("layer{l}.{name}"), Tensor::randn(shape, std, rng), true)
                };
                let wq = w("wq", &[d, d], inv(d));
                let wk = w("wk", &[d, d], inv(d));
                let wv = w("wv", &[d, d], inv(d));
                let wo = w("wo", &[d, d], inv(d) * out_scale);
                let ff1_w = w("ff1.w", &[4 * d, d], inv(d));
                let ff2_w = w("ff2.w", &[d, 4 * d], inv(4 * d) * out_scale);
                let mut c = |name: &str, len: usize, v: f64| {
                    store.add(format!("layer{l}.{name}"), Tensor::full(&[len], v), true)
                };
                BlockIds {
                    ln1_g: c("ln1.g", d, 1.0),
                    ln1_b: c("ln1.b", d, 0.0),
                    ln2_g: c("ln2.g", d, 1.0),
                    ln2_b: c("ln2.b", d, 0.0),
                    ff1_b: c("ff1.b", 4 * d, 0.0),
                    ff2_b: c("ff2.b", d, 0.0),
                    wq,
                    wk,
                    wv,
                    wo,
                    ff1_w,
                    ff2_w,
                }
            })
            .collect();
        let lm_w = store.add("lm_head.w", Tensor::randn(&[cfg.vocab_size, d], inv(d), rng), true);
        let lm_b = store.add("lm_head.b", Tensor::zeros(&[cfg.vocab_size]), true);
        Self {
            tok_emb,
            pos_enc,
            blocks,
            lm_w,
            lm_b,
        }
    }

    /// Looks the decoder up by name in a store built by [`DecoderIds::add`].
    pub fn find(store: &ParamStore, layers: usize) -> Result<Self> {
        let blocks = (1..=layers)
            .map(|l| {
                let id = |n: &str| store.id(&format!("layer{l}.{n}"));
                Ok(BlockIds {
                    ln1_g: id("ln1.g")?,
                    ln1_b: id("ln1.b")?,
                    wq: id("wq")?,
                    wk: id("wk")?,
                    wv: id("wv")?,
                    wo: id("wo")?,
                    ln2_g: id("ln2.g")?,
                    ln2_b: id("ln2.b")?,
                    ff1_w: id("ff1.w")?,
                    ff1_b: id("ff1.b")?,
                    ff2_w: id("ff2.w")?,
                    ff2_b: id("ff2.b")?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            tok_emb: store.id("tok_emb")?,
            pos_enc: store.id("pos_enc")?,
            blocks,
            lm_w: store.id("lm_head.w")?,
            lm_b: store.id("lm_head.b")?,
        })
    }

    /// `H₀`: token embeddings at text slots plus positional encodings everywhere.
    /// `vis_tokens`, when given, is added at the vision slots (projector baseline).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn embed(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        store: &ParamStore,
        cfg: &ModelConfig,
        layout: &SlotLayout,
        tokens: &[usize],
        vis_tokens: Option<Var>,
    ) -> Result<Var> {
        let n = layout.total;
        if tokens.len() > cfg.max_text_len || n > cfg.max_seq_len() {
            return Err(Error::Capacity {
                len: tokens.len().max(n),
                max: if tokens.len() > cfg.max_text_len {
                    cfg.max_text_len
                } else {
                    cfg.max_seq_len()
                },
            });
        }
        let emb = tape.embed(bind[self.tok_emb], tokens)?;
        let mut h = if layout.vis.is_empty() {
            emb
        } else {
            tape.scatter_cols(emb, &layout.text, n)?
        };
        if let Some(vt) = vis_tokens {
            let placed = tape.scatter_cols(vt, &layout.vis, n)?;
            h = tape.add(h, placed)?;
        }
        let table = store.value(self.pos_enc);
        let d = cfg.d_h;
        let mut pe = Tensor::zeros(&[d, n]);
        for pos in 0..n {
            for r in 0..d {
                pe.set(r, pos, table.at(pos, r));
            }
        }
        let pe = tape.constant(pe);
        tape.add(h, pe)
    }

    #[allow(clippy::too_many_arguments)]
    fn block(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cfg: &ModelConfig,
        layer: usize,
        h: Var,
        layout: &SlotLayout,
        mask: &[bool],
        mode: BlockMode<'_>,
        audit: &mut SlotAudit,
    ) -> Result<Var> {
        let w = &self.blocks[layer - 1];
        let x = tape.layer_norm(h, bind[w.ln1_g], bind[w.ln1_b])?;
        let mut q = tape.matmul(bind[w.wq], x)?;
        let mut k = tape.matmul(bind[w.wk], x)?;
        let mut v = tape.matmul(bind[w.wv], x)?;
        match mode {
            BlockMode::Plain => {}
            BlockMode::Lora(pair) => {
                q = pair.q.apply(tape, bind, x, q)?;
                v = pair.v.apply(tape, bind, x, v)?;
            }
            BlockMode::Fusion(f, v_emb) => {
                let (qf, kf, vf) = fused_terms(tape, bind, f, x, v_emb, layout, audit)?;
                q = tape.add(q, qf)?;
                k = tape.add(k, kf)?;
                v = tape.add(v, vf)?;
            }
        }
        let att = attention(tape, q, k, v, bind[w.wo], mask, cfg.heads)?;
        let h = tape.add(h, att)?;
        let y = tape.layer_norm(h, bind[w.ln2_g], bind[w.ln2_b])?;
        let f1 = tape.matmul(bind[w.ff1_w], y)?;
        let f1 = tape.add_bias(f1, bind[w.ff1_b])?;
        let f1 = tape.gelu(f1);
        let f2 = tape.matmul(bind[w.ff2_w], f1)?;
        let f2 = tape.add_bias(f2, bind[w.ff2_b])?;
        tape.add(h, f2)
    }

    pub(crate) fn run_with<'a>(
        &self,
        tape: &mut Tape,
        bind: &Binding,
        cfg: &ModelConfig,
        layout: SlotLayout,
        h0: Var,
        modes: &[BlockMode<'a>],
    ) -> Result<ForwardOut> {
        let mask = layout.attention_mask();
        let mut audit = SlotAudit::default();
        let mut h = h0;
        for layer in 1..=cfg.layers {
            h = self.block(tape, bind, cfg, layer, h, &layout, &mask, modes[layer - 1], &mut audit)?;
        }
        let logits = tape.matmul(bind[self.lm_w], h)?;
        let logits = tape.add_bias(logits, bind[self.lm_b])?;
        Ok(ForwardOut {
            logits,
            layout,
            audit,
        })
    }
}

/// The additive fusion terms `α_* · W_c* · [T_pad ; V_pad]` for one layer.
pub fn fused_terms(
    tape: &mut Tape,
    bind: &Binding,
    f: &FusionIds,
    x: Var,
    v_emb: Option<Var>,
    layout: &SlotLayout,
    audit: &mut SlotAudit,
) -> Result<(Var, Var, Var)> {
    let t_proj = project_text_to_visual(tape, x, bind[f.w_t2v], bind[f.b_t2v])?;
    let (t_pad, v_pad) = build_padded_streams(tape, t_proj, v_emb, layout)?;
    audit.merge(audit_streams(tape, t_pad, v_pad, layout));
    let feat = tape.concat_rows(t_pad, v_pad)?;
    let mut term = |wc: ParamId, alpha: ParamId| -> Result<Var> {
        let m = tape.matmul(bind[wc], feat)?;
        tape.scale_by(m, bind[alpha])
    };
    Ok((term(f.wc_q, f.alpha_q)?, term(f.wc_k, f.alpha_k)?, term(f.wc_v, f.alpha_v)?))
}

/// The shared interface of every trainable model in this crate.
pub trait LanguageModel: Sync {
    fn config(&self) -> &ModelConfig;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// Logits for `tokens` with `p` vision slots in front, where `p` is the
    /// column count of `v_emb` (zero when absent).
    fn forward(&self, tape: &mut Tape, bind: &Binding, v_emb: Option<Var>, tokens: &[usize]) -> Result<ForwardOut>;
}

/// The frozen-able decoder: token embeddings, `L` pre-norm blocks, LM head.
#[derive(Clone, Debug)]
pub struct BaseLm {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: DecoderIds,
}

impl BaseLm {
    /// Randomly initialized, fully trainable except the positional table.
    pub fn init(cfg: &ModelConfig) -> Self {
        let mut rng = rng::derive(cfg.seed, streams::BASE_INIT);
        let mut store = ParamStore::new();
        let ids = DecoderIds::add(&mut store, cfg, &mut rng);
        Self {
            cfg: cfg.clone(),
            store,
            ids,
        }
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    /// Text-only run with `p` content-free vision slots in front.
    pub fn forward_with_slots(&self, tape: &mut Tape, bind: &Binding, p: usize, tokens: &[usize]) -> Result<ForwardOut> {
        let layout = build_slot_layout(p, tokens.len())?;
        let h0 = self.ids.embed(tape, bind, &self.store, &self.cfg, &layout, tokens, None)?;
        let modes = vec![BlockMode::Plain; self.cfg.layers];
        self.ids.run_with(tape, bind, &self.cfg, layout, h0, &modes)
    }
}

/// Checksums of the groups that must never change once the base LM is frozen.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FrozenChecksums {
    pub base_layers: String,
    pub embeddings: String,
    pub lm_head: String,
    pub encoder: String,
}

impl FrozenChecksums {
    pub fn of(store: &ParamStore, encoder: &EncoderWeights) -> Self {
        Self {
            base_layers: store.checksum(|p| p.name.starts_with("layer")),
            embeddings: store.checksum(|p| p.name == "tok_emb" || p.name == "pos_enc"),
            lm_head: store.checksum(|p| p.name.starts_with("lm_head.")),
            encoder: encoder.checksum(),
        }
    }
}

impl LanguageModel for BaseLm {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward(&self, tape: &mut Tape, bind: &Binding, v_emb: Option<Var>, tokens: &[usize]) -> Result<ForwardOut> {
        let p = v_emb.map(|v| tape.value(v).cols()).unwrap_or(0);
        self.forward_with_slots(tape, bind, p, tokens)
    }
}

/// Frozen base LM plus fusion parameters on `S` and LoRA elsewhere.
#[derive(Clone, Debug)]
pub struct InverseModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: DecoderIds,
    /// Keyed by 1-based layer index.
    pub fusion: Vec<(usize, FusionIds)>,
    pub lora: Vec<(usize, LoraPair)>,
}

impl InverseModel {
    /// Freezes a copy of `base` and attaches freshly initialized fusion and LoRA parameters.
    pub fn from_base(base: &BaseLm) -> Self {
        let cfg = base.cfg.clone();
        let mut store = base.store.clone();
        store.freeze_all();
        let mut rng = rng::derive(cfg.seed, streams::FUSION_INIT);
        let (d_h, d_v) = (cfg.d_h, cfg.d_v);
        let mut fusion = Vec::new();
        let mut lora = Vec::new();
        for l in 1..=cfg.layers {
            if cfg.is_fusion_layer(l) {
                let pre = format!("fusion{l}");
                let w_t2v = store.add(
                    format!("{pre}.w_t2v"),
                    Tensor::randn(&[d_v, d_h], 1.0 / (d_h as f64).sqrt(), &mut rng),
                    true,
                );
                let b_t2v = store.add(format!("{pre}.b_t2v"), Tensor::zeros(&[d_v]), true);
                let mut wc = |n: &str| store.add(format!("{pre}.{n}"), Tensor::zeros(&[d_h, 2 * d_v]), true);
                let (wc_q, wc_k, wc_v) = (wc("wc_q"), wc("wc_k"), wc("wc_v"));
                let mut alpha = |n: &str| store.add(format!("{pre}.{n}"), Tensor::scalar(1.0), true);
                let (alpha_q, alpha_k, alpha_v) = (alpha("alpha_q"), alpha("alpha_k"), alpha("alpha_v"));
                fusion.push((
                    l,
                    FusionIds {
                        w_t2v,
                        b_t2v,
                        wc_q,
                        wc_k,
                        wc_v,
                        alpha_q,
                        alpha_k,
                        alpha_v,
                    },
                ));
            } else {
                lora.push((l, LoraPair::add(&mut store, l, &cfg, &mut rng)));
            }
        }
        Self {
            ids: base.ids.clone(),
            cfg,
            store,
            fusion,
            lora,
        }
    }

    pub fn fusion_layer(&self, l: usize) -> Option<&FusionIds> {
        self.fusion.iter().find(|(k, _)| *k == l).map(|(_, f)| f)
    }

    pub fn lora_layer(&self, l: usize) -> Option<&LoraPair> {
        self.lora.iter().find(|(k, _)| *k == l).map(|(_, f)| f)
    }

    /// Number of scalars the fusion parameters of one layer hold.
    pub fn fusion_params_per_layer(cfg: &ModelConfig) -> usize {
        3 * cfg.d_h * 2 * cfg.d_v + cfg.d_v * cfg.d_h + cfg.d_v + 3
    }

    /// Forward multiply-accumulates a fusion layer adds over the same layer
    /// without fusion: `W_t2v` on every slot plus three `W_c` products,
    /// `d_v·d_h·N + 3·d_h·2d_v·N = 7·d_h·d_v·(p + n)`.
    pub fn fusion_extra_macs(cfg: &ModelConfig, p: usize, n_text: usize) -> u64 {
        7 * (cfg.d_h * cfg.d_v * (p + n_text)) as u64
    }
}

impl LanguageModel for InverseModel {
    fn config(&self) -> &ModelConfig {
        &self.cfg
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn forward(&self, tape: &mut Tape, bind: &Binding, v_emb: Option<Var>, tokens: &[usize]) -> Result<ForwardOut> {
        let p = v_emb.map(|v| tape.value(v).cols()).unwrap_or(0);
        if let Some(v) = v_emb {
            if p != self.cfg.patches || tape.value(v).rows() != self.cfg.d_v {
                return Err(Error::shape(
                    "visual embedding",
                    &[self.cfg.d_v, self.cfg.patches],
                    tape.value(v).shape(),
                ));
            }
        }
        let layout = build_slot_layout(p, tokens.len())?;
        let h0 = self.ids.embed(tape, bind, &self.store, &self.cfg, &layout, tokens, None)?;
        let modes: Vec<BlockMode<'_>> = (1..=self.cfg.layers)
            .map(|l| match (self.fusion_layer(l), self.lora_layer(l)) {
                (Some(f), _) => BlockMode::Fusion(f, v_emb),
                (None, Some(pair)) => BlockMode::Lora(pair),
                (None, None) => BlockMode::Plain,
            })
            .collect();
        self.ids.run_with(tape, bind, &self.cfg, layout, h0, &modes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_layout_examples() {
        let l = build_slot_layout(0, 3).unwrap();
        assert!(l.vis.is_empty());
        assert_eq!(l.text, vec![0, 1, 2]);
        let l = build_slot_layout(2, 2).unwrap();
        assert_eq!((l.vis.clone(), l.text.clone()), (vec![0, 1], vec![2, 3]));
        assert_eq!(build_slot_layout(16, 24).unwrap().total, 40);
        assert!(matches!(build_slot_layout(3, 0), Err(Error::Layout(_))));
    }

    #[test]
    fn mask_convention() {
        let l = build_slot_layout(2, 2).unwrap();
        let m = l.attention_mask();
        let at = |i: usize, j: usize| m[i * 4 + j];
        assert!(at(0, 1) && at(1, 0));
        assert!(!at(0, 2) && !at(1, 3));
        assert!(at(2, 0) && at(2, 1) && at(2, 2) && !at(2, 3));
        assert!(at(3, 2) && at(3, 3));
    }

    #[test]
    fn text_to_visual_projection_examples() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0], &[3.0]]));
        let w = tape.constant(Tensor::from_rows(&[&[1.0, 0.0, 1.0], &[0.0, 2.0, 0.0]]));
        let b = tape.constant(Tensor::vector(&[1.0, 1.0]));
        let t = project_text_to_visual(&mut tape, h, w, b).unwrap();
        assert_eq!(tape.value(t).data(), &[5.0, 5.0]);

        let w0 = tape.constant(Tensor::zeros(&[2, 3]));
        let b0 = tape.constant(Tensor::zeros(&[2]));
        let t = project_text_to_visual(&mut tape, h, w0, b0).unwrap();
        assert_eq!(tape.value(t).data(), &[0.0, 0.0]);

        let i3 = tape.constant(Tensor::identity(3));
        let b3 = tape.constant(Tensor::zeros(&[3]));
        let t = project_text_to_visual(&mut tape, h, i3, b3).unwrap();
        assert_eq!(tape.value(t), tape.value(h));

        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(
            project_text_to_visual(&mut tape, h, bad, b0),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn padded_stream_examples() {
        let mut tape = Tape::new();
        let layout = build_slot_layout(0, 3).unwrap();
        let t = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let (tp, vp) = build_padded_streams(&mut tape, t, None, &layout).unwrap();
        assert_eq!(tape.value(tp), tape.value(t));
        assert_eq!(tape.value(vp), &Tensor::zeros(&[1, 3]));

        let layout = build_slot_layout(2, 1).unwrap();
        let t = tape.constant(Tensor::from_rows(&[&[1.0, 2.0, 3.0]]));
        let v = tape.constant(Tensor::from_rows(&[&[5.0, 6.0]]));
        let (tp, vp) = build_padded_streams(&mut tape, t, Some(v), &layout).unwrap();
        assert_eq!(tape.value(vp).data(), &[5.0, 6.0, 0.0]);
        assert_eq!(tape.value(tp).data(), &[0.0, 0.0, 3.0]);
        let tv = tape.value(tp).data();
        let vv = tape.value(vp).data();
        assert!(tv.iter().zip(vv).all(|(a, b)| *a == 0.0 || *b == 0.0));
        assert_eq!(audit_streams(&tape, tp, vp, &layout).violations, 0);

        let short = tape.constant(Tensor::from_rows(&[&[5.0]]));
        assert!(matches!(
            build_padded_streams(&mut tape, t, Some(short), &layout),
            Err(Error::Layout(_))
        ));
    }

    #[test]
    fn single_position_attention_is_wo_v() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[&[3.0], &[-1.0]]));
        let k = tape.constant(Tensor::from_rows(&[&[0.2], &[7.0]]));
        let v = tape.constant(Tensor::from_rows(&[&[1.0], &[2.0]]));
        let wo = tape.constant(Tensor::from_rows(&[&[0.0, 1.0], &[2.0, 0.5]]));
        let out = attention(&mut tape, q, k, v, wo, &[true], 2).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 3.0]);
    }

    #[test]
    fn uniform_scores_average_values() {
        let mut tape = Tape::new();
        let n = 4;
        let q = tape.constant(Tensor::full(&[2, n], 0.3));
        let k = tape.constant(Tensor::full(&[2, n], 0.3));
        let vals = Tensor::from_rows(&[&[1.0, 2.0, 3.0, 6.0], &[0.0, 0.0, 4.0, 0.0]]);
        let v = tape.constant(vals);
        let wo = tape.constant(Tensor::identity(2));
        let out = attention(&mut tape, q, k, v, wo, &[true; 16], 1).unwrap();
        for c in 0..n {
            assert!((tape.value(out).at(0, c) - 3.0).abs() < 1e-15);
            assert!((tape.value(out).at(1, c) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn two_position_causal_matches_closed_form() {
        let mut tape = Tape::new();
        let q = tape.constant(Tensor::from_rows(&[&[0.5, 1.5]]));
        let k = tape.constant(Tensor::from_rows(&[&[2.0, -1.0]]));
        let v = tape.constant(Tensor::from_rows(&[&[10.0, 20.0]]));
        let wo = tape.constant(Tensor::identity(1));
        let mask = build_slot_layout(0, 2).unwrap().attention_mask();
        let out = attention(&mut tape, q, k, v, wo, &mask, 1).unwrap();
        // position 0 sees itself only; position 1 mixes with weights softmax(1.5·2, 1.5·−1)
        let (s0, s1) = (3.0f64, -1.5f64);
        let w0 = 1.0 / (1.0 + (s1 - s0).exp());
        let expect = w0 * 10.0 + (1.0 - w0) * 20.0;
        assert_eq!(tape.value(out).at(0, 0), 10.0);
        assert!((tape.value(out).at(0, 1) - expect).abs() < 1e-12);
    }

    #[test]
    fn fusion_parameter_count() {
        assert_eq!(InverseModel::fusion_params_per_layer(&ModelConfig::reference()), 14371);
    }
}
