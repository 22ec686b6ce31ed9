//! Projector baseline: visual features are mapped into the LM hidden space
//! by a small MLP and placed at the vision slots of the embedding sequence.
//! Every decoder layer is standard; LoRA sits on the same layers as in the
//! fusion model so both share one trainable-adapter layout.

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{build_slot_layout, BaseLm, BlockMode, DecoderIds, ForwardOut, LanguageModel, LoraPair};
use crate::params::{Binding, ParamId, ParamStore};
use crate::rng::{self, streams};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `(weight, bias)` per projector layer; GELU between layers.
#[derive(Clone, Debug)]
pub struct ProjectorIds {
    pub layers: Vec<(ParamId, ParamId)>,
}

impl ProjectorIds {
    /// One layer is the linear map `W·V + b`; two layers insert a GELU and a
    /// `d_h × d_h` output layer. The output layer starts at zero.
    fn add(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut rng::Rng) -> Self {
        let (d_v, d_h) = (cfg.d_v, cfg.d_h);
        let mut layers = Vec::new();
        if cfg.projector_layers >= 2 {
            let w = store.add(
                "projector.0.w",
                Tensor::randn(&[d_h, d_v], 1.0 / (d_v as f64).sqrt(), rng),
                true,
            );
            let b = store.add("projector.0.b", Tensor::zeros(&[d_h]), true);
            layers.push((w, b));
        }
        let fan_in = if layers.is_empty() { d_v } else { d_h };
        let i = layers.len();
        let w = store.add(format!("projector.{i}.w"), Tensor::zeros(&[d_h, fan_in]), true);
        let b = store.add(format!("projector.{i}.b"), Tensor::zeros(&[d_h]), true);
        layers.push((w, b));
        Self { layers }
    }
}

/// Per-patch MLP: `d_v × p` in, `d_h × p` out.
pub fn project_visual_to_text(tape: &mut Tape, v_emb: Var, layers: &[(Var, Var)]) -> Result<Var> {
    let mut x = v_emb;
    for (i, &(w, b)) in layers.iter().enumerate() {
        if i > 0 {
            x = tape.gelu(x);
        }
        x = tape.matmul(w, x)?;
        x = tape.add_bias(x, b)?;
    }
    Ok(x)
}

/// Frozen base LM plus projector and LoRA adapters.
#[derive(Clone, Debug)]
pub struct BaselineModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub ids: DecoderIds,
    pub projector: ProjectorIds,
    pub lora: Vec<(usize, LoraPair)>,
}

impl BaselineModel {
    pub fn from_base(base: &BaseLm) -> Self {
        let cfg = base.cfg.clone();
        let mut store = base.store.clone();
        store.freeze_all();
        let mut rng = rng::derive(cfg.seed, streams::PROJECTOR_INIT);
        let projector = ProjectorIds::add(&mut store, &cfg, &mut rng);
        let lora = (1..=cfg.layers)
            .filter(|&l| !cfg.is_fusion_layer(l))
            .map(|l| (l, LoraPair::add(&mut store, l, &cfg, &mut rng)))
            .collect();
        Self {
            ids: base.ids.clone(),
            cfg,
            store,
            projector,
            lora,
        }
    }

    pub fn projector_ids(&self) -> Vec<ParamId> {
        self.projector.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }

    pub fn lora_ids(&self) -> Vec<ParamId> {
        self.lora
            .iter()
            .flat_map(|(_, p)| [p.q.a, p.q.b, p.v.a, p.v.b])
            .collect()
    }

    /// Alignment stage: only the projector learns.
    pub fn set_stage_alignment(&mut self) {
        for id in self.lora_ids() {
            self.store.set_trainable(id, false);
        }
        for id in self.projector_ids() {
            self.store.set_trainable(id, true);
        }
    }

    /// Instruction stage: projector and LoRA learn.
    pub fn set_stage_instruction(&mut self) {
        for id in self.lora_ids().into_iter().chain(self.projector_ids()) {
            self.store.set_trainable(id, true);
        }
    }
}

impl LanguageModel for BaselineModel {
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
        let vis_tokens = match v_emb {
            Some(v) => {
                if p != self.cfg.patches || tape.value(v).rows() != self.cfg.d_v {
                    return Err(Error::shape(
                        "visual embedding",
                        &[self.cfg.d_v, self.cfg.patches],
                        tape.value(v).shape(),
                    ));
                }
                let layers: Vec<(Var, Var)> = self.projector.layers.iter().map(|&(w, b)| (bind[w], bind[b])).collect();
                Some(project_visual_to_text(tape, v, &layers)?)
            }
            None => None,
        };
        let layout = build_slot_layout(p, tokens.len())?;
        let h0 = self.ids.embed(tape, bind, &self.store, &self.cfg, &layout, tokens, vis_tokens)?;
        let modes: Vec<BlockMode<'_>> = (1..=self.cfg.layers)
            .map(|l| match self.lora.iter().find(|(k, _)| *k == l) {
                Some((_, pair)) => BlockMode::Lora(pair),
                None => BlockMode::Plain,
            })
            .collect();
        self.ids.run_with(tape, bind, &self.cfg, layout, h0, &modes)
    }
}
