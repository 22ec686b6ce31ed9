//! Frozen stand-in vision encoder.
//!
//! Two bias-free linear stages with a tanh between them:
//! `penultimate = tanh(W₁ · patch)`, `final = W₂ · penultimate`.
//! The HD variant stacks penultimate rows above final rows.

use sha2::{Digest, Sha256};

use crate::config::ModelConfig;
use crate::data::PatchGrid;
use crate::error::{Error, Result};
use crate::rng::{self, streams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureStage {
    Final,
    Penultimate,
    /// Penultimate rows followed by final rows.
    Both,
}

impl FeatureStage {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        match (cfg.hd_mode, cfg.penultimate_features) {
            (true, _) => FeatureStage::Both,
            (false, true) => FeatureStage::Penultimate,
            (false, false) => FeatureStage::Final,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    /// `d_enc × d_raw`
    pub stage1: Tensor,
    /// `d_enc × d_enc`
    pub stage2: Tensor,
}

/// `d_v × p` visual features, one column per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualEmbedding(pub Tensor);

impl VisualEmbedding {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn patches(&self) -> usize {
        self.0.cols()
    }
}

impl EncoderWeights {
    pub fn seeded(d_raw: usize, d_enc: usize, seed: u64) -> Self {
        let mut rng = rng::derive(seed, streams::ENCODER);
        let stage1 = Tensor::randn(&[d_enc, d_raw], 1.0 / (d_raw as f64).sqrt(), &mut rng);
        let stage2 = Tensor::randn(&[d_enc, d_enc], 1.0 / (d_enc as f64).sqrt(), &mut rng);
        Self { stage1, stage2 }
    }

    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self::seeded(cfg.patch_dim(), cfg.d_enc(), cfg.seed)
    }

    pub fn d_enc(&self) -> usize {
        self.stage1.rows()
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in [&self.stage1, &self.stage2] {
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Encodes an image whose patch count must equal `patches`.
pub fn encode(img: &PatchGrid, w: &EncoderWeights, stage: FeatureStage, patches: usize) -> Result<VisualEmbedding> {
    if img.patches() != patches {
        return Err(Error::shape("encode: patch count", &[patches], &[img.patches()]));
    }
    if img.patch_dim() != w.stage1.cols() {
        return Err(Error::shape("encode: patch width", w.stage1.shape(), &[img.patch_dim()]));
    }
    let x = img.to_columns();
    let pen = w.stage1.matmul(&x)?.map(f64::tanh);
    let out = match stage {
        FeatureStage::Penultimate => pen,
        FeatureStage::Final => w.stage2.matmul(&pen)?,
        FeatureStage::Both => {
            let fin = w.stage2.matmul(&pen)?;
            let mut data = pen.into_data();
            data.extend_from_slice(fin.data());
            Tensor::from_vec(&[2 * w.d_enc(), patches], data)?
        }
    };
    Ok(VisualEmbedding(out))
}

/// Frozen encoder weights plus the feature stage a model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionEncoder {
    pub weights: EncoderWeights,
    pub stage: FeatureStage,
    pub patches: usize,
}

impl VisionEncoder {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        Self {
            weights: EncoderWeights::for_model(cfg),
            stage: FeatureStage::from_config(cfg),
            patches: cfg.patches,
        }
    }

    pub fn encode(&self, img: &PatchGrid) -> Result<VisualEmbedding> {
        encode(img, &self.weights, self.stage, self.patches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(p: usize, d_raw: usize, f: impl Fn(usize) -> f64) -> PatchGrid {
        let g = (p as f64).sqrt() as usize;
        PatchGrid::new(g, d_raw, (0..p * d_raw).map(f).collect()).unwrap()
    }

    #[test]
    fn zero_image_encodes_to_zero() {
        let w = EncoderWeights::seeded(12, 32, 7);
        let v = encode(&image(16, 12, |_| 0.0), &w, FeatureStage::Final, 16).unwrap();
        assert!(v.tensor().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn shapes_and_hd_layout() {
        let w = EncoderWeights::seeded(12, 32, 7);
        let img = image(16, 12, |i| ((i * 37) % 11) as f64 / 11.0 - 0.5);
        let fin = encode(&img, &w, FeatureStage::Final, 16).unwrap();
        let pen = encode(&img, &w, FeatureStage::Penultimate, 16).unwrap();
        let both = encode(&img, &w, FeatureStage::Both, 16).unwrap();
        assert_eq!(fin.tensor().shape(), &[32, 16]);
        assert_eq!(both.tensor().shape(), &[64, 16]);
        let b = both.tensor().data();
        assert_eq!(&b[..32 * 16], pen.tensor().data());
        assert_eq!(&b[32 * 16..], fin.tensor().data());
    }

    #[test]
    fn column_zero_matches_loop_oracle() {
        let w = EncoderWeights::seeded(12, 32, 7);
        let img = image(16, 12, |i| (i as f64 * 0.173).sin());
        let v = encode(&img, &w, FeatureStage::Final, 16).unwrap();
        let patch = img.patch(0);
        let mut pen = [0.0; 32];
        for (r, slot) in pen.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, &x) in patch.iter().enumerate() {
                acc += w.stage1.at(r, c) * x;
            }
            *slot = acc.tanh();
        }
        for r in 0..32 {
            let mut acc = 0.0;
            for (c, &x) in pen.iter().enumerate() {
                acc += w.stage2.at(r, c) * x;
            }
            assert!((acc - v.tensor().at(r, 0)).abs() < 1e-14);
        }
    }

    #[test]
    fn deterministic_and_rejects_wrong_patch_count() {
        let w = EncoderWeights::seeded(12, 32, 7);
        let img = image(16, 12, |i| (i as f64).cos());
        let a = encode(&img, &w, FeatureStage::Final, 16).unwrap();
        let b = encode(&img, &w, FeatureStage::Final, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(EncoderWeights::seeded(12, 32, 7), w);
        assert!(matches!(
            encode(&image(4, 12, |_| 0.0), &w, FeatureStage::Final, 16),
            Err(Error::Shape { .. })
        ));
    }
}
