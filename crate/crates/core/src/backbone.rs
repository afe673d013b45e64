//! RegNetY-style convolutional feature extractor.
//!
//! Stem (3×3 conv, stride 2) followed by four stages of residual bottleneck
//! blocks with grouped 3×3 convolutions and squeeze-excitation. There is no
//! global pooling: the last stage's spatial grid is returned per frame.

use rand::Rng;

use crate::autograd::{Conv2dParams, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv2d, GroupNorm, Linear, ParamId, ParamStore};
use crate::tensor::Element;

pub const NUM_STAGES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem_width: usize,
    pub stage_depths: [usize; NUM_STAGES],
    pub stage_widths: [usize; NUM_STAGES],
    pub group_width: usize,
    pub se_ratio: f64,
    pub stage_strides: [usize; NUM_STAGES],
    pub n_frozen_stages: usize,
}

impl Default for BackboneConfig {
    /// Micro configuration: 32×32 frames map to a 64-channel 4×4 grid.
    fn default() -> Self {
        BackboneConfig {
            stem_width: 16,
            stage_depths: [1, 1, 2, 1],
            stage_widths: [16, 24, 32, 64],
            group_width: 8,
            se_ratio: 0.25,
            stage_strides: [1, 2, 2, 1],
            n_frozen_stages: 1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stem_width == 0 || self.group_width == 0 {
            return Err(Error::config("stem_width and group_width must be positive"));
        }
        for s in 0..NUM_STAGES {
            let (w, d, st) = (self.stage_widths[s], self.stage_depths[s], self.stage_strides[s]);
            if w == 0 || d == 0 || st == 0 {
                return Err(Error::config(format!("stage {} needs positive width, depth and stride", s + 1)));
            }
            if w % self.group_width != 0 {
                return Err(Error::config(format!(
                    "stage {} width {w} is not divisible by group_width {}",
                    s + 1,
                    self.group_width
                )));
            }
            if ((w as f64) * self.se_ratio).round() < 1.0 {
                return Err(Error::config(format!("se_ratio {} leaves stage {} with no SE units", self.se_ratio, s + 1)));
            }
        }
        if !(self.se_ratio > 0.0 && self.se_ratio <= 1.0) {
            return Err(Error::config(format!("se_ratio must lie in (0, 1], got {}", self.se_ratio)));
        }
        if self.n_frozen_stages > NUM_STAGES {
            return Err(Error::config(format!("n_frozen_stages must be in [0, 4], got {}", self.n_frozen_stages)));
        }
        Ok(())
    }

    /// Total downsampling factor of stem and body.
    pub fn total_stride(&self) -> usize {
        2 * self.stage_strides.iter().product::<usize>()
    }

    /// Spatial extents of the output grid for `h`×`w` frames.
    pub fn output_grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.total_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::dim(format!(
                "frame size {h}x{w} must be a positive multiple of the backbone stride {s}"
            )));
        }
        Ok((h / s, w / s))
    }

    pub fn embed_channels(&self) -> usize {
        self.stage_widths[NUM_STAGES - 1]
    }

    /// Replaces explicit widths/depths by those a width rule generates.
    pub fn with_width_rule(mut self, rule: &WidthRule) -> Result<Self> {
        let stages = stages_from_widths(&generate_widths(rule)?);
        if stages.len() != NUM_STAGES {
            return Err(Error::config(format!(
                "width rule yields {} stages, the body needs exactly {NUM_STAGES}; adjust wa or w_m",
                stages.len()
            )));
        }
        for (i, (w, d)) in stages.into_iter().enumerate() {
            self.stage_widths[i] = w;
            self.stage_depths[i] = d;
        }
        Ok(self)
    }
}

/// Linear width parameterization quantized onto a geometric grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WidthRule {
    pub w0: usize,
    pub wa: f64,
    pub w_m: f64,
    pub depth: usize,
    pub quantum: usize,
}

/// Per-block widths: `u_j = w0 + wa·j`, snapped to `w0·w_m^s` and rounded to the quantum.
pub fn generate_widths(rule: &WidthRule) -> Result<Vec<usize>> {
    let WidthRule { w0, wa, w_m, depth, quantum } = *rule;
    if w0 == 0 || depth == 0 || quantum == 0 || wa < 0.0 || !(w_m > 1.0) {
        return Err(Error::config(format!(
            "width rule needs w0, depth, quantum > 0, wa >= 0 and w_m > 1, got {rule:?}"
        )));
    }
    let widths: Vec<usize> = (0..depth)
        .map(|j| {
            let u = w0 as f64 + wa * j as f64;
            let s = ((u / w0 as f64).ln() / w_m.ln()).round();
            let w = w0 as f64 * w_m.powf(s);
            ((w / quantum as f64).round() as usize).max(1) * quantum
        })
        .collect();
    let stages = stages_from_widths(&widths).len();
    if stages > NUM_STAGES {
        return Err(Error::config(format!(
            "width rule produces {stages} distinct stages (max {NUM_STAGES}); lower wa or raise w_m"
        )));
    }
    Ok(widths)
}

/// Collapses runs of equal widths into `(width, depth)` stages.
pub fn stages_from_widths(widths: &[usize]) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    for &w in widths {
        match out.last_mut() {
            Some((lw, d)) if *lw == w => *d += 1,
            _ => out.push((w, 1)),
        }
    }
    out
}

/// The backbone's output `[B, T, E_l, E_h, E_w]`.
#[derive(Debug, Clone, Copy)]
pub struct VideoEmbedding {
    pub data: Var,
}

#[derive(Debug, Clone)]
pub struct SqueezeExcite {
    pub reduce: Linear,
    pub expand: Linear,
}

impl SqueezeExcite {
    pub fn new<F: Element>(store: &mut ParamStore<F>, name: &str, channels: usize, ratio: f64, rng: &mut impl Rng) -> Result<Self> {
        let hidden = (channels as f64 * ratio).round() as usize;
        if hidden == 0 {
            return Err(Error::config(format!("{name}: round({channels}·{ratio}) must be >= 1")));
        }
        Ok(SqueezeExcite {
            reduce: Linear::new_relu(store, &format!("{name}.reduce"), channels, hidden, rng),
            expand: Linear::new(store, &format!("{name}.expand"), hidden, channels, rng),
        })
    }

    /// The sigmoid gate, shaped `[n, c, 1, 1]`.
    pub fn gate<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 4 {
            return Err(Error::dim(format!("squeeze-excitation expects [n,c,h,w], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let pooled = tape.mean(x, &[2, 3], false)?;
        let h = self.reduce.forward(tape, p, pooled)?;
        let h = tape.relu(h);
        let e = self.expand.forward(tape, p, h)?;
        let g = tape.sigmoid(e);
        tape.reshape(g, &[n, c, 1, 1])
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let g = self.gate(tape, p, x)?;
        tape.mul(x, g)
    }

    pub fn ids(&self) -> Vec<ParamId> {
        [self.reduce.ids(), self.expand.ids()].concat()
    }
}

/// Residual bottleneck block (ratio 1) with grouped 3×3 conv and SE.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub conv_a: Conv2d,
    pub norm_a: GroupNorm,
    pub conv_b: Conv2d,
    pub norm_b: GroupNorm,
    pub se: SqueezeExcite,
    pub conv_c: Conv2d,
    pub norm_c: GroupNorm,
    pub shortcut: Option<(Conv2d, GroupNorm)>,
}

impl BottleneckBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Element>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        group_width: usize,
        se_ratio: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !c_out.is_multiple_of(group_width) {
            return Err(Error::config(format!("{name}: width {c_out} not divisible by group width {group_width}")));
        }
        let groups = c_out / group_width;
        let shortcut = if stride != 1 || c_in != c_out {
            Some((
                Conv2d::new(store, &format!("{name}.shortcut.conv"), c_in, c_out, 1, Conv2dParams::new(stride, 0, 1), rng)?,
                GroupNorm::new(store, &format!("{name}.shortcut.norm"), c_out),
            ))
        } else {
            None
        };
        Ok(BottleneckBlock {
            conv_a: Conv2d::new(store, &format!("{name}.conv_a"), c_in, c_out, 1, Conv2dParams::default(), rng)?,
            norm_a: GroupNorm::new(store, &format!("{name}.norm_a"), c_out),
            conv_b: Conv2d::new(store, &format!("{name}.conv_b"), c_out, c_out, 3, Conv2dParams::new(stride, 1, groups), rng)?,
            norm_b: GroupNorm::new(store, &format!("{name}.norm_b"), c_out),
            se: SqueezeExcite::new(store, &format!("{name}.se"), c_out, se_ratio, rng)?,
            conv_c: Conv2d::new(store, &format!("{name}.conv_c"), c_out, c_out, 1, Conv2dParams::default(), rng)?,
            norm_c: GroupNorm::new(store, &format!("{name}.norm_c"), c_out),
            shortcut,
        })
    }

    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.conv_a.forward(tape, p, x)?;
        let h = self.norm_a.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.conv_b.forward(tape, p, h)?;
        let h = self.norm_b.forward(tape, p, h)?;
        let h = tape.relu(h);
        let h = self.se.forward(tape, p, h)?;
        let h = self.conv_c.forward(tape, p, h)?;
        let h = self.norm_c.forward(tape, p, h)?;
        let residual = match &self.shortcut {
            Some((conv, norm)) => {
                let r = conv.forward(tape, p, x)?;
                norm.forward(tape, p, r)?
            }
            None => x,
        };
        let sum = tape.add(h, residual)?;
        Ok(tape.relu(sum))
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = [
            self.conv_a.ids(),
            self.norm_a.ids(),
            self.conv_b.ids(),
            self.norm_b.ids(),
            self.se.ids(),
            self.conv_c.ids(),
            self.norm_c.ids(),
        ]
        .concat();
        if let Some((c, n)) = &self.shortcut {
            ids.extend(c.ids());
            ids.extend(n.ids());
        }
        ids
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub stem: (Conv2d, GroupNorm),
    pub stages: Vec<Vec<BottleneckBlock>>,
}

impl Backbone {
    pub fn new<F: Element>(store: &mut ParamStore<F>, prefix: &str, cfg: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let stem = (
            Conv2d::new(store, &format!("{prefix}.stem.conv"), 3, cfg.stem_width, 3, Conv2dParams::new(2, 1, 1), rng)?,
            GroupNorm::new(store, &format!("{prefix}.stem.norm"), cfg.stem_width),
        );
        let mut stages = Vec::with_capacity(NUM_STAGES);
        let mut c_in = cfg.stem_width;
        for s in 0..NUM_STAGES {
            let mut blocks = Vec::with_capacity(cfg.stage_depths[s]);
            for b in 0..cfg.stage_depths[s] {
                let stride = if b == 0 { cfg.stage_strides[s] } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                blocks.push(BottleneckBlock::new(store, &name, c_in, cfg.stage_widths[s], stride, cfg.group_width, cfg.se_ratio, rng)?);
                c_in = cfg.stage_widths[s];
            }
            stages.push(blocks);
        }
        let bb = Backbone { cfg, stem, stages };
        bb.freeze_stages(store, bb.cfg.n_frozen_stages)?;
        Ok(bb)
    }

    pub fn stem_ids(&self) -> Vec<ParamId> {
        [self.stem.0.ids(), self.stem.1.ids()].concat()
    }

    pub fn stage_ids(&self, stage: usize) -> Vec<ParamId> {
        self.stages[stage].iter().flat_map(|b| b.ids()).collect()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = self.stem_ids();
        (0..NUM_STAGES).for_each(|s| ids.extend(self.stage_ids(s)));
        ids
    }

    /// Freezes the stem and the first `n_frozen` stages; unfreezes the rest.
    pub fn freeze_stages<F: Element>(&self, store: &mut ParamStore<F>, n_frozen: usize) -> Result<()> {
        if n_frozen > NUM_STAGES {
            return Err(Error::usage(format!("n_frozen must be in [0, 4], got {n_frozen}")));
        }
        for id in self.stem_ids() {
            store.set_trainable(id, n_frozen == 0);
        }
        for s in 0..NUM_STAGES {
            for id in self.stage_ids(s) {
                store.set_trainable(id, s >= n_frozen);
            }
        }
        Ok(())
    }

    /// Maps frames `[B, T, 3, H, W]` to the embedding grid `[B, T, E_l, E_h, E_w]`.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, p: &Bound, frames: Var) -> Result<VideoEmbedding> {
        let shape = tape.shape(frames).to_vec();
        if shape.len() != 5 || shape[2] != 3 {
            return Err(Error::dim(format!("backbone expects frames [B, T, 3, H, W], got {shape:?}")));
        }
        let (b, t, h, w) = (shape[0], shape[1], shape[3], shape[4]);
        let (eh, ew) = self.cfg.output_grid(h, w)?;
        let mut x = tape.reshape(frames, &[b * t, 3, h, w])?;
        x = self.stem.0.forward(tape, p, x)?;
        x = self.stem.1.forward(tape, p, x)?;
        x = tape.relu(x);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(tape, p, x)?;
            }
        }
        let data = tape.reshape(x, &[b, t, self.cfg.embed_channels(), eh, ew])?;
        Ok(VideoEmbedding { data })
    }
}
