//! The full network: convolutional backbone feeding the factorized video transformer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{Element, Tensor};
use crate::vivit::{EncoderConfig, TubeletConfig, VivitHead, NUM_AUS};

/// Architecture hyperparameters plus the input geometry the position tables are sized for.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub tubelet: TubeletConfig,
    pub encoder: EncoderConfig,
    /// Square frame side length.
    pub image_size: usize,
    /// Frames per clip.
    pub seq_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            tubelet: TubeletConfig::default(),
            encoder: EncoderConfig::default(),
            image_size: 32,
            seq_len: 32,
        }
    }
}

impl ModelConfig {
    /// Token grid `(n_t, n_h·n_w)` for one clip.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        self.backbone.validate()?;
        self.encoder.validate()?;
        let (eh, ew) = self.backbone.output_grid(self.image_size, self.image_size)?;
        let layout = self.tubelet.layout_for(self.seq_len, eh, ew)?;
        Ok((layout.n_t, layout.spatial()))
    }

    pub fn validate(&self) -> Result<()> {
        self.token_grid().map(|_| ())
    }
}

pub struct AuModel<F: Element> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    pub backbone: Backbone,
    pub head: VivitHead,
}

impl<F: Element> AuModel<F> {
    /// Randomly initialized model; the backbone's leading stages are frozen per its config.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let (n_t, n_s) = cfg.token_grid()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, "backbone", cfg.backbone.clone(), &mut rng)?;
        let head = VivitHead::new(
            &mut params,
            "head",
            cfg.tubelet,
            cfg.encoder,
            cfg.backbone.embed_channels(),
            n_s,
            n_t,
            &mut rng,
        )?;
        Ok(AuModel { cfg, params, backbone, head })
    }

    /// Same architecture with parameters converted to another float width.
    pub fn cast<G: Element>(&self) -> AuModel<G> {
        AuModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    /// Frames `[B, T, 3, H, W]` to logits `[B, T, 12]`.
    pub fn forward(&self, tape: &mut Tape<F>, p: &Bound, frames: Var) -> Result<Var> {
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 5 || shape[2] != 3 {
            return Err(Error::dim(format!("frames must be [B, T, 3, H, W], got {shape:?}")));
        }
        if shape[1] != self.cfg.seq_len || shape[3] != self.cfg.image_size || shape[4] != self.cfg.image_size {
            return Err(Error::dim(format!(
                "model expects clips of {} frames at {}x{}, got {shape:?}",
                self.cfg.seq_len, self.cfg.image_size, self.cfg.image_size
            )));
        }
        let v = self.backbone.forward(tape, p, frames)?;
        self.head.forward(tape, p, v)
    }

    /// Sigmoid probabilities `[B, T, 12]` without recording gradients.
    pub fn predict_proba(&self, frames: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let p = Bound::from_vars(self.params.iter().map(|p| tape.constant(p.tensor.clone())).collect());
        let x = tape.constant(frames.clone());
        let logits = self.forward(&mut tape, &p, x)?;
        let probs = tape.sigmoid(logits);
        let out = tape.to_tensor(probs);
        debug_assert_eq!(out.shape().last(), Some(&NUM_AUS));
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig { n_spatial_layers: 1, n_temporal_layers: 1, n_heads: 2, model_dim: 8, layer_budget: 2, ..Default::default() },
            tubelet: TubeletConfig { embed_dim: 8, ..Default::default() },
            seq_len: 4,
            ..Default::default()
        }
    }

    #[test]
    fn probabilities_have_frame_shape() {
        let m = AuModel::<f32>::new(tiny(), 0).unwrap();
        let x = Tensor::from_fn(&[2, 4, 3, 32, 32], |i| (i % 7) as f32 / 7.0);
        let p = m.predict_proba(&x).unwrap();
        assert_eq!(p.shape(), &[2, 4, NUM_AUS]);
        assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        // Frames within one tubelet share a prediction.
        assert_eq!(p.data()[..NUM_AUS], p.data()[NUM_AUS..2 * NUM_AUS]);
    }

    #[test]
    fn parameter_names_are_prefixed() {
        let m = AuModel::<f32>::new(tiny(), 0).unwrap();
        assert!(m.params.iter().all(|p| p.name.starts_with("backbone.") || p.name.starts_with("head.")));
        assert!(m.params.find("head.classifier.weight").is_some());
        let frozen: Vec<_> = m.params.iter().filter(|p| p.frozen()).map(|p| p.name.clone()).collect();
        assert!(!frozen.is_empty());
        assert!(frozen.iter().all(|n| n.starts_with("backbone.stem") || n.starts_with("backbone.stage1.")));
    }

    #[test]
    fn wrong_geometry_is_rejected() {
        let m = AuModel::<f32>::new(tiny(), 0).unwrap();
        let err = m.predict_proba(&Tensor::zeros(&[1, 6, 3, 32, 32])).unwrap_err();
        assert!(err.to_string().contains("4 frames"));
        let bad = ModelConfig { image_size: 30, ..tiny() };
        assert!(AuModel::<f32>::new(bad, 0).is_err());
    }

    #[test]
    fn seed_determines_initialization() {
        let a = AuModel::<f32>::new(tiny(), 5).unwrap();
        let b = AuModel::<f32>::new(tiny(), 5).unwrap();
        let c = AuModel::<f32>::new(tiny(), 6).unwrap();
        let same = |x: &AuModel<f32>, y: &AuModel<f32>| x.params.iter().zip(y.params.iter()).all(|(p, q)| p.tensor.data() == q.tensor.data());
        assert!(same(&a, &b));
        assert!(!same(&a, &c));
    }
}
