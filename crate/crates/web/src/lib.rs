//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Everything here is a thin wrapper over the core crate, so the page shows
//! exactly the numbers the trainer uses.

use auvit::data::{synthesize, SyntheticSpec, Video};
use auvit::training::{focal_entry, FocalLossConfig, SchedulerState};
use wasm_bindgen::prelude::*;

// Errors cross into JavaScript as plain strings, which also keeps them usable natively.
fn js_err(e: auvit::Error) -> String {
    e.to_string()
}

/// Learning rate at each of the first `steps` optimizer steps.
#[wasm_bindgen]
pub fn lr_schedule(eta_min: f64, eta_max: f64, t_0: usize, t_mult: usize, steps: usize) -> Result<Vec<f64>, String> {
    let mut s = SchedulerState::new(eta_min, eta_max, t_0, t_mult).map_err(js_err)?;
    Ok((0..steps).map(|_| s.advance().0).collect())
}

/// Steps (1-based count of completed steps) after which the schedule restarts.
#[wasm_bindgen]
pub fn restart_steps(t_0: usize, t_mult: usize, steps: usize) -> Result<Vec<usize>, String> {
    let mut s = SchedulerState::new(0.0, 1.0, t_0, t_mult).map_err(js_err)?;
    Ok((1..=steps).filter(|_| s.advance().1).collect())
}

/// Focal loss of a positive entry at `points` evenly spaced probabilities in (0, 1).
///
/// By symmetry the curve for a negative entry at probability `p` is this curve
/// at `1 − p` with `alpha` replaced by `1 − alpha`.
#[wasm_bindgen]
pub fn focal_curve(alpha: f64, gamma: f64, points: usize) -> Result<Vec<f64>, String> {
    let cfg = FocalLossConfig { alpha, gamma, au_weights: None };
    cfg.validate().map_err(js_err)?;
    Ok((1..=points)
        .map(|i| {
            let p = i as f64 / (points + 1) as f64;
            focal_entry((p / (1.0 - p)).ln(), true, &cfg).0
        })
        .collect())
}

/// One synthetic video held in memory for frame-by-frame display.
#[wasm_bindgen]
pub struct SyntheticViewer {
    video: Video,
    size: usize,
}

#[wasm_bindgen]
impl SyntheticViewer {
    /// Generates the first video of the default synthetic set with the given seed and noise level.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, noise_std: f64) -> Result<SyntheticViewer, String> {
        let spec = SyntheticSpec { n_videos: 1, noise_std, seed, ..SyntheticSpec::default() };
        let video = synthesize(&spec).map_err(js_err)?.remove(0);
        Ok(SyntheticViewer { video, size: spec.image_size })
    }

    pub fn len(&self) -> usize {
        self.video.len()
    }

    pub fn is_empty(&self) -> bool {
        self.video.is_empty()
    }

    /// Frame side length in pixels.
    pub fn size(&self) -> usize {
        self.size
    }

    /// Frame `index` as RGBA bytes (values clamped to [0, 1] before scaling).
    pub fn frame_rgba(&self, index: usize) -> Result<Vec<u8>, String> {
        if index >= self.len() {
            return Err(format!("frame {index} out of range (video has {})", self.len()));
        }
        let plane = self.size * self.size;
        let data = &self.video.frames.data()[index * 3 * plane..(index + 1) * 3 * plane];
        let mut out = Vec::with_capacity(4 * plane);
        for px in 0..plane {
            for c in 0..3 {
                out.push((data[c * plane + px].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        Ok(out)
    }

    /// Frame `index` labels: 1 active, 0 inactive, −1 unannotated.
    pub fn labels(&self, index: usize) -> Result<Vec<i8>, String> {
        self.video
            .labels
            .get(index)
            .map(|l| l.0.to_vec())
            .ok_or_else(|| format!("frame {index} out of range"))
    }
}

/// Names of the 12 action units, in label order.
#[wasm_bindgen]
pub fn au_names() -> Vec<String> {
    auvit::metrics::AU_NAMES.iter().map(|s| s.to_string()).collect()
}
