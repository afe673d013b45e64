//! Tubelet tokenization and the factorized-encoder video transformer head.
//!
//! Spatial stage: per temporal index, transformer layers over that index's
//! spatial tokens plus a learned summary token, whose output stands for the
//! index. Temporal stage: transformer layers over the summaries. Each
//! temporal feature is classified into 12 AU logits and broadcast to the
//! frames of its tubelet.

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::backbone::VideoEmbedding;
use crate::error::{Error, Result};
use crate::nn::{normal, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::tensor::Element;

pub const NUM_AUS: usize = 12;

/// Initial spread of the learned position tables. Token features arrive at unit
/// scale, and the backbone is translation-equivariant, so smaller tables leave
/// tokens at different positions nearly indistinguishable early in training.
pub const POSITION_STD: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TubeletConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub embed_dim: usize,
}

impl Default for TubeletConfig {
    fn default() -> Self {
        TubeletConfig { t: 2, h: 2, w: 2, embed_dim: 64 }
    }
}

impl TubeletConfig {
    /// Token grid `(n_t, n_h, n_w)` for `frames` frames over an `eh`×`ew` grid.
    pub fn layout_for(&self, frames: usize, eh: usize, ew: usize) -> Result<TokenLayout> {
        let check = |axis: &str, total: usize, part: usize| {
            if part == 0 || !total.is_multiple_of(part) {
                Err(Error::dim(format!("{axis} extent {total} is not divisible by tubelet size {part}")))
            } else {
                Ok(total / part)
            }
        };
        Ok(TokenLayout {
            n_t: check("temporal", frames, self.t)?,
            n_h: check("height", eh, self.h)?,
            n_w: check("width", ew, self.w)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    pub n_spatial_layers: usize,
    pub n_temporal_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub mlp_ratio: f64,
    /// Total retained transformer layers (spatial + temporal).
    pub layer_budget: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_spatial_layers: 4,
            n_temporal_layers: 4,
            n_heads: 8,
            model_dim: 64,
            mlp_ratio: 4.0,
            layer_budget: 8,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "model_dim {} must be a positive multiple of n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.n_spatial_layers == 0 || self.n_temporal_layers == 0 {
            return Err(Error::config("both encoder stacks need at least one layer"));
        }
        if self.n_spatial_layers + self.n_temporal_layers != self.layer_budget {
            return Err(Error::config(format!(
                "{} spatial + {} temporal layers do not match the layer budget {}",
                self.n_spatial_layers, self.n_temporal_layers, self.layer_budget
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::config(format!("mlp_ratio must be positive, got {}", self.mlp_ratio)));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.model_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl TokenLayout {
    pub fn spatial(&self) -> usize {
        self.n_h * self.n_w
    }

    pub fn len(&self) -> usize {
        self.n_t * self.spatial()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Tokens `[B, N, D]`, ordered row-major over `(n_t, n_h, n_w)`.
#[derive(Debug, Clone, Copy)]
pub struct TokenSequence {
    pub tokens: Var,
    pub layout: Option<TokenLayout>,
}

/// Projects non-overlapping `t×h×w` blocks of the embedding grid to `D`-dim tokens.
pub fn tubelet_embed<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    v: VideoEmbedding,
    cfg: &TubeletConfig,
    proj: &Linear,
) -> Result<TokenSequence> {
    let shape = tape.shape(v.data).to_vec();
    if shape.len() != 5 {
        return Err(Error::dim(format!("video embedding must be [B, T, E_l, E_h, E_w], got {shape:?}")));
    }
    let (b, t, c, eh, ew) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    let layout = cfg.layout_for(t, eh, ew)?;
    let x = tape.reshape(v.data, &[b, layout.n_t, cfg.t, c, layout.n_h, cfg.h, layout.n_w, cfg.w])?;
    let x = tape.permute(x, &[0, 1, 4, 6, 3, 2, 5, 7])?;
    let x = tape.reshape(x, &[b, layout.len(), c * cfg.t * cfg.h * cfg.w])?;
    let tokens = proj.forward(tape, p, x)?;
    Ok(TokenSequence { tokens, layout: Some(layout) })
}

/// Adds the first `N` rows of `table [N_max, D]` to tokens `[.., N, D]`.
pub fn add_positional<F: Element>(tape: &mut Tape<F>, tokens: Var, table: Var) -> Result<Var> {
    let shape = tape.shape(tokens).to_vec();
    let rows = tape.shape(table)[0];
    if shape.len() < 2 {
        return Err(Error::dim(format!("tokens must be [.., N, D], got {shape:?}")));
    }
    let n = shape[shape.len() - 2];
    if rows < n {
        return Err(Error::config(format!("positional table has {rows} rows for {n} tokens")));
    }
    let used = if rows == n { table } else { tape.slice(table, 0, 0, n)? };
    tape.add(tokens, used)
}

#[derive(Debug, Clone)]
pub struct Msa {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub n_heads: usize,
}

impl Msa {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, dim: usize, n_heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if n_heads == 0 || !dim.is_multiple_of(n_heads) {
            return Err(Error::config(format!("{name}: dim {dim} not divisible by {n_heads} heads")));
        }
        Ok(Msa {
            query: Linear::new(store, &format!("{name}.query"), dim, dim, rng),
            key: Linear::new(store, &format!("{name}.key"), dim, dim, rng),
            value: Linear::new(store, &format!("{name}.value"), dim, dim, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, dim, rng),
            n_heads,
        })
    }

    fn heads<F: Element>(&self, tape: &mut Tape<F>, x: Var, b: usize, n: usize, dh: usize) -> Result<Var> {
        let x = tape.reshape(x, &[b, n, self.n_heads, dh])?;
        tape.permute(x, &[0, 2, 1, 3])
    }

    /// Returns the output `[B, N, D]` and the attention weights `[B, H, N, N]`.
    pub fn forward_with_weights<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<(Var, Var)> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 3 {
            return Err(Error::dim(format!("attention expects [B, N, D], got {shape:?}")));
        }
        let (b, n, d) = (shape[0], shape[1], shape[2]);
        if d % self.n_heads != 0 {
            return Err(Error::config(format!("dim {d} not divisible by {} heads", self.n_heads)));
        }
        let dh = d / self.n_heads;
        let q = self.query.forward(tape, p, x)?;
        let k = self.key.forward(tape, p, x)?;
        let v = self.value.forward(tape, p, x)?;
        let q = self.heads(tape, q, b, n, dh)?;
        let k = self.heads(tape, k, b, n, dh)?;
        let v = self.heads(tape, v, b, n, dh)?;
        let kt = tape.permute(k, &[0, 1, 3, 2])?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scores, 3)?;
        let ctx = tape.matmul(attn, v)?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, n, d])?;
        Ok((self.out.forward(tape, p, ctx)?, attn))
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(tape, p, x)?.0)
    }
}

/// Pre-norm layer: `y = MSA(LN(z)) + z`, then `z' = MLP(LN(y)) + y`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub norm1: LayerNorm,
    pub msa: Msa,
    pub norm2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

impl TransformerLayer {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.model_dim;
        Ok(TransformerLayer {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d),
            msa: Msa::new(store, &format!("{name}.msa"), d, cfg.n_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d),
            mlp_in: Linear::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden(), rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_hidden(), d, rng),
        })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, z: Var) -> Result<Var> {
        let h = self.norm1.forward(tape, p, z)?;
        let h = self.msa.forward(tape, p, h)?;
        let y = tape.add(h, z)?;
        let h = self.norm2.forward(tape, p, y)?;
        let h = self.mlp_in.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.mlp_out.forward(tape, p, h)?;
        tape.add(h, y)
    }
}

#[derive(Debug, Clone)]
pub struct FactorizedEncoder {
    pub spatial: Vec<TransformerLayer>,
    pub spatial_norm: LayerNorm,
    pub temporal: Vec<TransformerLayer>,
    pub temporal_norm: LayerNorm,
    pub summary_token: ParamId,
    pub spatial_pos: ParamId,
    pub temporal_pos: ParamId,
}

impl FactorizedEncoder {
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        cfg: &EncoderConfig,
        max_spatial: usize,
        max_temporal: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        // Random rather than zero: LN of a zero token is zero, which starves its query of gradient.
        let summary_token = store.add(format!("{name}.summary_token"), normal(&[1, 1, d], 0.02, rng));
        let spatial_pos = store.add(format!("{name}.spatial_pos"), normal(&[max_spatial, d], POSITION_STD, rng));
        let temporal_pos = store.add(format!("{name}.temporal_pos"), normal(&[max_temporal, d], POSITION_STD, rng));
        let spatial = (0..cfg.n_spatial_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.spatial.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let spatial_norm = LayerNorm::new(store, &format!("{name}.spatial_norm"), d);
        let temporal = (0..cfg.n_temporal_layers)
            .map(|i| TransformerLayer::new(store, &format!("{name}.temporal.{i}"), cfg, rng))
            .collect::<Result<_>>()?;
        let temporal_norm = LayerNorm::new(store, &format!("{name}.temporal_norm"), d);
        Ok(FactorizedEncoder { spatial, spatial_norm, temporal, temporal_norm, summary_token, spatial_pos, temporal_pos })
    }

    /// Encodes tokens `[B, N, D]` to per-temporal-index features `[B, n_t, D]`.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, seq: TokenSequence) -> Result<Var> {
        let layout = seq.layout.ok_or_else(|| Error::usage("factorized encoding needs the token layout"))?;
        let shape = tape.shape(seq.tokens).to_vec();
        if shape.len() != 3 || shape[1] != layout.len() {
            return Err(Error::usage(format!("token shape {shape:?} does not match layout {layout:?}")));
        }
        let (b, d) = (shape[0], shape[2]);
        let rows = b * layout.n_t;
        let x = tape.reshape(seq.tokens, &[rows, layout.spatial(), d])?;
        let x = add_positional(tape, x, p[self.spatial_pos])?;
        let cls = tape.expand(p[self.summary_token], &[rows, 1, d])?;
        let mut x = tape.concat(&[cls, x], 1)?;
        for layer in &self.spatial {
            x = layer.forward(tape, p, x)?;
        }
        let x = self.spatial_norm.forward(tape, p, x)?;
        let summary = tape.slice(x, 1, 0, 1)?;
        let z = tape.reshape(summary, &[b, layout.n_t, d])?;
        let mut z = add_positional(tape, z, p[self.temporal_pos])?;
        for layer in &self.temporal {
            z = layer.forward(tape, p, z)?;
        }
        self.temporal_norm.forward(tape, p, z)
    }
}

/// Maps `[B, n_t, D]` features to `[B, T, 12]` logits, repeating each row for its `t` frames.
pub fn framewise_logits<F: Element>(
    tape: &mut Tape<F>,
    p: &Bound,
    classifier: &Linear,
    features: Var,
    t: usize,
    frames: usize,
) -> Result<Var> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim(format!("features must be [B, n_t, D], got {shape:?}")));
    }
    let (b, n_t) = (shape[0], shape[1]);
    if n_t * t != frames {
        return Err(Error::dim(format!("{n_t} temporal tokens x tubelet {t} != {frames} frames")));
    }
    let logits = classifier.forward(tape, p, features)?;
    let k = tape.shape(logits)[2];
    if t == 1 {
        return Ok(logits);
    }
    let l = tape.reshape(logits, &[b, n_t, 1, k])?;
    let l = tape.expand(l, &[b, n_t, t, k])?;
    tape.reshape(l, &[b, frames, k])
}

#[derive(Debug, Clone)]
pub struct VivitHead {
    pub tubelet: TubeletConfig,
    pub encoder_cfg: EncoderConfig,
    pub proj: Linear,
    pub encoder: FactorizedEncoder,
    pub classifier: Linear,
}

impl VivitHead {
    /// `channels` is the embedding depth E_l; position tables cover the given token counts.
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        prefix: &str,
        tubelet: TubeletConfig,
        encoder_cfg: EncoderConfig,
        channels: usize,
        max_spatial: usize,
        max_temporal: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        encoder_cfg.validate()?;
        if tubelet.embed_dim != encoder_cfg.model_dim {
            return Err(Error::config(format!(
                "tubelet embed_dim {} must equal encoder model_dim {}",
                tubelet.embed_dim, encoder_cfg.model_dim
            )));
        }
        if tubelet.t == 0 || tubelet.h == 0 || tubelet.w == 0 {
            return Err(Error::config("tubelet extents must be positive"));
        }
        let patch = channels * tubelet.t * tubelet.h * tubelet.w;
        let proj = Linear::new(store, &format!("{prefix}.tubelet"), patch, tubelet.embed_dim, rng);
        let encoder = FactorizedEncoder::new(store, &format!("{prefix}.encoder"), &encoder_cfg, max_spatial, max_temporal, rng)?;
        let classifier = Linear::new(store, &format!("{prefix}.classifier"), encoder_cfg.model_dim, NUM_AUS, rng);
        Ok(VivitHead { tubelet, encoder_cfg, proj, encoder, classifier })
    }

    pub fn tubelet_embed<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, v: VideoEmbedding) -> Result<TokenSequence> {
        tubelet_embed(tape, p, v, &self.tubelet, &self.proj)
    }

    /// Embedding grid `[B, T, E_l, E_h, E_w]` to logits `[B, T, 12]`.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, v: VideoEmbedding) -> Result<Var> {
        let frames = tape.shape(v.data)[1];
        let seq = self.tubelet_embed(tape, p, v)?;
        let feats = self.encoder.forward(tape, p, seq)?;
        framewise_logits(tape, p, &self.classifier, feats, self.tubelet.t, frames)
    }
}
