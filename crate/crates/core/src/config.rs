//! Flat `key = value` run configuration covering every tunable of the pipeline.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{BackboneConfig, WidthRule, NUM_STAGES};
use crate::data::SyntheticSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::tensor::Element;
use crate::training::{FocalLossConfig, OptimizerState, SchedulerState, TrainConfig};
use crate::vivit::{EncoderConfig, TubeletConfig, NUM_AUS};

/// Initial values of the learning-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerInit {
    pub eta_min: f64,
    pub eta_max: f64,
    pub t_0: usize,
    pub t_mult: usize,
}

/// Initial values of the optimizer; the schedule overrides `lr` from the first step on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerInit {
    pub lr: f64,
    pub momentum: f64,
    pub max_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub backbone: BackboneConfig,
    /// Generates stage widths/depths unless `backbone.stage_widths` is given explicitly.
    pub width_rule: Option<WidthRule>,
    pub tubelet: TubeletConfig,
    pub encoder: EncoderConfig,
    pub focal: FocalLossConfig,
    pub scheduler: SchedulerInit,
    pub optimizer: OptimizerInit,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    /// Window step when chunking videos; 0 means `seq_len` (no overlap).
    pub chunk_stride: usize,
    pub val_fraction: f64,
    pub threshold: f64,
    pub kfold_k: usize,
}

impl Default for RunConfig {
    /// The desk-scale micro setup.
    fn default() -> Self {
        RunConfig {
            // No pretrained weights exist here, so a frozen random stem would only
            // discard information; the whole backbone trains.
            backbone: BackboneConfig { n_frozen_stages: 0, ..BackboneConfig::default() },
            width_rule: None,
            tubelet: TubeletConfig { t: 2, h: 2, w: 2, embed_dim: 64 },
            encoder: EncoderConfig {
                n_spatial_layers: 2,
                n_temporal_layers: 1,
                n_heads: 2,
                model_dim: 64,
                mlp_ratio: 4.0,
                layer_budget: 3,
            },
            focal: FocalLossConfig { alpha: 0.5, ..FocalLossConfig::default() },
            scheduler: SchedulerInit { eta_min: 0.0, eta_max: 0.1, t_0: 100, t_mult: 1 },
            optimizer: OptimizerInit { lr: 0.1, momentum: 0.9, max_grad_norm: None },
            train: TrainConfig { batch_size: 4, ..TrainConfig::default() },
            data: SyntheticSpec::default(),
            chunk_stride: 0,
            val_fraction: 0.25,
            threshold: 0.5,
            kfold_k: 5,
        }
    }
}

fn parse_one<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("{v:?}: {e}"))
}

fn parse_list<T: FromStr, const N: usize>(v: &str) -> std::result::Result<[T; N], String>
where
    T::Err: std::fmt::Display,
{
    let items = v.split(',').map(|s| parse_one::<T>(s.trim())).collect::<std::result::Result<Vec<T>, _>>()?;
    let n = items.len();
    items.try_into().map_err(|_| format!("expected {N} comma-separated values, got {n}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(format!("{v:?} is not a boolean")),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Every accepted key, in the order `to_text` writes them.
pub const KEYS: &[&str] = &[
    "backbone.stem_width",
    "backbone.stage_depths",
    "backbone.stage_widths",
    "backbone.group_width",
    "backbone.se_ratio",
    "backbone.stage_strides",
    "backbone.n_frozen_stages",
    "backbone.width_rule",
    "tubelet.t",
    "tubelet.h",
    "tubelet.w",
    "tubelet.embed_dim",
    "encoder.n_spatial_layers",
    "encoder.n_temporal_layers",
    "encoder.n_heads",
    "encoder.model_dim",
    "encoder.mlp_ratio",
    "encoder.layer_budget",
    "focal.alpha",
    "focal.gamma",
    "focal.au_weights",
    "scheduler.eta_min",
    "scheduler.eta_max",
    "scheduler.t_0",
    "scheduler.t_mult",
    "optimizer.lr",
    "optimizer.momentum",
    "optimizer.max_grad_norm",
    "train.seq_len",
    "train.batch_size",
    "train.max_steps",
    "train.seed",
    "train.eval_every",
    "train.deterministic",
    "data.n_videos",
    "data.frames_per_video",
    "data.image_size",
    "data.on_frames",
    "data.off_frames",
    "data.noise_std",
    "data.mask_fraction",
    "data.seed",
    "data.chunk_stride",
    "data.val_fraction",
    "eval.threshold",
    "kfold.k",
];

impl RunConfig {
    /// Parses config text over the defaults; `origin` labels error messages.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut explicit_widths = false;
        let mut seen = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let row = i + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, row, format!("expected `key = value`, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.contains(&key.to_string()) {
                return Err(Error::parse(origin, row, format!("duplicate key {key}")));
            }
            seen.push(key.to_string());
            explicit_widths |= key == "backbone.stage_widths" || key == "backbone.stage_depths";
            cfg.set(key, value).map_err(|msg| Error::parse(origin, row, format!("{key}: {msg}")))?;
        }
        if let (Some(rule), false) = (cfg.width_rule, explicit_widths) {
            cfg.backbone = cfg.backbone.clone().with_width_rule(&rule)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Applies one `key = value` pair.
    pub fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let b = &mut self.backbone;
        match key {
            "backbone.stem_width" => b.stem_width = parse_one(v)?,
            "backbone.stage_depths" => b.stage_depths = parse_list::<usize, NUM_STAGES>(v)?,
            "backbone.stage_widths" => b.stage_widths = parse_list::<usize, NUM_STAGES>(v)?,
            "backbone.group_width" => b.group_width = parse_one(v)?,
            "backbone.se_ratio" => b.se_ratio = parse_one(v)?,
            "backbone.stage_strides" => b.stage_strides = parse_list::<usize, NUM_STAGES>(v)?,
            "backbone.n_frozen_stages" => b.n_frozen_stages = parse_one(v)?,
            "backbone.width_rule" => {
                self.width_rule = if v == "none" {
                    None
                } else {
                    let [w0, wa, w_m, depth, quantum] = parse_list::<f64, 5>(v)?;
                    Some(WidthRule { w0: w0 as usize, wa, w_m, depth: depth as usize, quantum: quantum as usize })
                }
            }
            "tubelet.t" => self.tubelet.t = parse_one(v)?,
            "tubelet.h" => self.tubelet.h = parse_one(v)?,
            "tubelet.w" => self.tubelet.w = parse_one(v)?,
            "tubelet.embed_dim" => self.tubelet.embed_dim = parse_one(v)?,
            "encoder.n_spatial_layers" => self.encoder.n_spatial_layers = parse_one(v)?,
            "encoder.n_temporal_layers" => self.encoder.n_temporal_layers = parse_one(v)?,
            "encoder.n_heads" => self.encoder.n_heads = parse_one(v)?,
            "encoder.model_dim" => self.encoder.model_dim = parse_one(v)?,
            "encoder.mlp_ratio" => self.encoder.mlp_ratio = parse_one(v)?,
            "encoder.layer_budget" => self.encoder.layer_budget = parse_one(v)?,
            "focal.alpha" => self.focal.alpha = parse_one(v)?,
            "focal.gamma" => self.focal.gamma = parse_one(v)?,
            "focal.au_weights" => {
                self.focal.au_weights = if v == "none" { None } else { Some(parse_list::<f64, NUM_AUS>(v)?) }
            }
            "scheduler.eta_min" => self.scheduler.eta_min = parse_one(v)?,
            "scheduler.eta_max" => self.scheduler.eta_max = parse_one(v)?,
            "scheduler.t_0" => self.scheduler.t_0 = parse_one(v)?,
            "scheduler.t_mult" => self.scheduler.t_mult = parse_one(v)?,
            "optimizer.lr" => self.optimizer.lr = parse_one(v)?,
            "optimizer.momentum" => self.optimizer.momentum = parse_one(v)?,
            "optimizer.max_grad_norm" => {
                let n: f64 = parse_one(v)?;
                self.optimizer.max_grad_norm = (n > 0.0).then_some(n);
            }
            "train.seq_len" => self.train.seq_len = parse_one(v)?,
            "train.batch_size" => self.train.batch_size = parse_one(v)?,
            "train.max_steps" => self.train.max_steps = parse_one(v)?,
            "train.seed" => self.train.seed = parse_one(v)?,
            "train.eval_every" => self.train.eval_every = parse_one(v)?,
            "train.deterministic" => self.train.deterministic = parse_bool(v)?,
            "data.n_videos" => self.data.n_videos = parse_one(v)?,
            "data.frames_per_video" => self.data.frames_per_video = parse_one(v)?,
            "data.image_size" => self.data.image_size = parse_one(v)?,
            "data.on_frames" => self.data.on_frames = parse_list::<usize, 2>(v).map(|[a, b]| (a, b))?,
            "data.off_frames" => self.data.off_frames = parse_list::<usize, 2>(v).map(|[a, b]| (a, b))?,
            "data.noise_std" => self.data.noise_std = parse_one(v)?,
            "data.mask_fraction" => self.data.mask_fraction = parse_one(v)?,
            "data.seed" => self.data.seed = parse_one(v)?,
            "data.chunk_stride" => self.chunk_stride = parse_one(v)?,
            "data.val_fraction" => self.val_fraction = parse_one(v)?,
            "eval.threshold" => self.threshold = parse_one(v)?,
            "kfold.k" => self.kfold_k = parse_one(v)?,
            _ => return Err("unknown configuration key".to_string()),
        }
        Ok(())
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let b = &self.backbone;
        let mut out = String::new();
        let mut put = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        put("backbone.stem_width", b.stem_width.to_string());
        put("backbone.stage_depths", join(&b.stage_depths));
        put("backbone.stage_widths", join(&b.stage_widths));
        put("backbone.group_width", b.group_width.to_string());
        put("backbone.se_ratio", b.se_ratio.to_string());
        put("backbone.stage_strides", join(&b.stage_strides));
        put("backbone.n_frozen_stages", b.n_frozen_stages.to_string());
        put(
            "backbone.width_rule",
            self.width_rule.map_or("none".into(), |r| format!("{},{},{},{},{}", r.w0, r.wa, r.w_m, r.depth, r.quantum)),
        );
        put("tubelet.t", self.tubelet.t.to_string());
        put("tubelet.h", self.tubelet.h.to_string());
        put("tubelet.w", self.tubelet.w.to_string());
        put("tubelet.embed_dim", self.tubelet.embed_dim.to_string());
        put("encoder.n_spatial_layers", self.encoder.n_spatial_layers.to_string());
        put("encoder.n_temporal_layers", self.encoder.n_temporal_layers.to_string());
        put("encoder.n_heads", self.encoder.n_heads.to_string());
        put("encoder.model_dim", self.encoder.model_dim.to_string());
        put("encoder.mlp_ratio", self.encoder.mlp_ratio.to_string());
        put("encoder.layer_budget", self.encoder.layer_budget.to_string());
        put("focal.alpha", self.focal.alpha.to_string());
        put("focal.gamma", self.focal.gamma.to_string());
        put("focal.au_weights", self.focal.au_weights.map_or("none".into(), |w| join(&w)));
        put("scheduler.eta_min", self.scheduler.eta_min.to_string());
        put("scheduler.eta_max", self.scheduler.eta_max.to_string());
        put("scheduler.t_0", self.scheduler.t_0.to_string());
        put("scheduler.t_mult", self.scheduler.t_mult.to_string());
        put("optimizer.lr", self.optimizer.lr.to_string());
        put("optimizer.momentum", self.optimizer.momentum.to_string());
        put("optimizer.max_grad_norm", self.optimizer.max_grad_norm.unwrap_or(0.0).to_string());
        put("train.seq_len", self.train.seq_len.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.max_steps", self.train.max_steps.to_string());
        put("train.seed", self.train.seed.to_string());
        put("train.eval_every", self.train.eval_every.to_string());
        put("train.deterministic", self.train.deterministic.to_string());
        put("data.n_videos", self.data.n_videos.to_string());
        put("data.frames_per_video", self.data.frames_per_video.to_string());
        put("data.image_size", self.data.image_size.to_string());
        put("data.on_frames", format!("{},{}", self.data.on_frames.0, self.data.on_frames.1));
        put("data.off_frames", format!("{},{}", self.data.off_frames.0, self.data.off_frames.1));
        put("data.noise_std", self.data.noise_std.to_string());
        put("data.mask_fraction", self.data.mask_fraction.to_string());
        put("data.seed", self.data.seed.to_string());
        put("data.chunk_stride", self.chunk_stride.to_string());
        put("data.val_fraction", self.val_fraction.to_string());
        put("eval.threshold", self.threshold.to_string());
        put("kfold.k", self.kfold_k.to_string());
        out
    }

    /// Architecture implied by this run (frame size from the data, clip length from training).
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            tubelet: self.tubelet,
            encoder: self.encoder,
            image_size: self.data.image_size,
            seq_len: self.train.seq_len,
        }
    }

    pub fn scheduler_state(&self) -> Result<SchedulerState> {
        let s = self.scheduler;
        SchedulerState::new(s.eta_min, s.eta_max, s.t_0, s.t_mult)
    }

    pub fn optimizer_state<F: Element>(&self) -> Result<OptimizerState<F>> {
        Ok(OptimizerState::new(self.optimizer.lr, self.optimizer.momentum)?.with_clipping(self.optimizer.max_grad_norm))
    }

    pub fn stride(&self) -> usize {
        if self.chunk_stride == 0 { self.train.seq_len } else { self.chunk_stride }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate(self.tubelet.t)?;
        self.model_config().validate()?;
        self.focal.validate()?;
        self.scheduler_state()?;
        self.optimizer_state::<f64>()?;
        self.data.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("eval.threshold must lie in (0, 1), got {}", self.threshold)));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config(format!("data.val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        if self.kfold_k < 2 {
            return Err(Error::config(format!("kfold.k must be at least 2, got {}", self.kfold_k)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_covers_every_key() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let keys: Vec<&str> = text.lines().map(|l| l.split(" = ").next().unwrap()).collect();
        assert_eq!(keys, KEYS);
        assert_eq!(RunConfig::parse(&text, Path::new("x")).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply() {
        let text = "# comment\ntrain.max_steps = 7  # inline\nbackbone.stage_depths = 1,1,1,1\nfocal.gamma=0\n";
        let cfg = RunConfig::parse(text, Path::new("x")).unwrap();
        assert_eq!(cfg.train.max_steps, 7);
        assert_eq!(cfg.backbone.stage_depths, [1, 1, 1, 1]);
        assert_eq!(cfg.focal.gamma, 0.0);
        assert_eq!(cfg.model_config().seq_len, 32);
    }

    #[test]
    fn unknown_and_malformed_keys_name_the_row() {
        let err = RunConfig::parse("train.seed = 1\nmodel.depth = 3\n", Path::new("run.cfg")).unwrap_err();
        assert!(matches!(&err, Error::Parse { row: 2, msg, .. } if msg.contains("unknown")), "{err}");
        let err = RunConfig::parse("train.seed = x\n", Path::new("run.cfg")).unwrap_err();
        assert!(err.to_string().starts_with("parse error in run.cfg:1"), "{err}");
        assert!(RunConfig::parse("just words\n", Path::new("r")).is_err());
        assert!(RunConfig::parse("train.seed = 1\ntrain.seed = 2\n", Path::new("r")).is_err());
        assert!(RunConfig::parse("backbone.stage_widths = 8,8\n", Path::new("r")).is_err());
    }

    #[test]
    fn semantic_errors_surface_after_parsing() {
        assert!(matches!(RunConfig::parse("train.seq_len = 31\n", Path::new("r")), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("eval.threshold = 1\n", Path::new("r")), Err(Error::Config(_))));
    }

    #[test]
    fn width_rule_unless_explicit() {
        // Generates [8, 16, 32, 64]-style stages from a rule.
        let rule = "backbone.width_rule = 8,8,2,8,8\n";
        let generated = RunConfig::parse(rule, Path::new("r")).unwrap();
        let expect = BackboneConfig::default().with_width_rule(&WidthRule { w0: 8, wa: 8.0, w_m: 2.0, depth: 8, quantum: 8 }).unwrap();
        assert_eq!(generated.backbone.stage_widths, expect.stage_widths);
        let explicit = RunConfig::parse(&format!("{rule}backbone.stage_widths = 16,24,32,64\n"), Path::new("r")).unwrap();
        assert_eq!(explicit.backbone.stage_widths, [16, 24, 32, 64]);
    }
}
