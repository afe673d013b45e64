//! Synthetic AU video generation, on-disk dataset layout, and clip chunking.
//!
//! Layout: `<root>/manifest.txt` lists `video_id frame_count` pairs;
//! `<root>/<video_id>/frames.vaut` holds one `[N, 3, H, W]` tensor record and
//! `<root>/<video_id>/labels.csv` the per-frame annotations.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::metrics::{AuLabelFrame, Prediction, AU_NAMES, UNKNOWN};
use crate::tensor::Tensor;
use crate::vivit::NUM_AUS;

pub const MANIFEST: &str = "manifest.txt";
pub const FRAMES_FILE: &str = "frames.vaut";
pub const LABELS_FILE: &str = "labels.csv";

/// Parameters of the seeded synthetic AU dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    pub frames_per_video: usize,
    /// Square frame side.
    pub image_size: usize,
    /// Inclusive range of active-segment lengths, in frames.
    pub on_frames: (usize, usize),
    /// Inclusive range of inactive-segment lengths, in frames.
    pub off_frames: (usize, usize),
    pub noise_std: f64,
    /// Probability that any single label entry is replaced by the unknown code.
    pub mask_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_videos: 16,
            frames_per_video: 128,
            image_size: 32,
            on_frames: (16, 40),
            off_frames: (16, 56),
            noise_std: 0.1,
            mask_fraction: 0.05,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames_per_video == 0 {
            return Err(Error::config("synthetic dataset needs at least one video and one frame"));
        }
        if self.image_size < 8 {
            return Err(Error::config(format!("image_size {} is too small for 12 patterns", self.image_size)));
        }
        for (name, (lo, hi)) in [("on", self.on_frames), ("off", self.off_frames)] {
            if lo == 0 || lo > hi {
                return Err(Error::config(format!("{name}-segment range {lo}..={hi} is invalid")));
            }
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config(format!("noise_std must be non-negative, got {}", self.noise_std)));
        }
        if !(0.0..1.0).contains(&self.mask_fraction) {
            return Err(Error::config(format!("mask_fraction must lie in [0, 1), got {}", self.mask_fraction)));
        }
        Ok(())
    }

    /// Long-run fraction of frames in which a unit is active.
    pub fn duty_cycle(&self) -> f64 {
        let on = (self.on_frames.0 + self.on_frames.1) as f64 / 2.0;
        let off = (self.off_frames.0 + self.off_frames.1) as f64 / 2.0;
        on / (on + off)
    }
}

/// One video held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Video {
    pub id: String,
    /// `[N, 3, H, W]`.
    pub frames: Tensor<f32>,
    pub labels: Vec<AuLabelFrame>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

const PATTERN_SIGMA: f64 = 1.5;

/// Channel carrying unit `j`'s pattern: units 0–3 red, 4–7 green, 8–11 blue.
pub fn unit_channel(j: usize) -> usize {
    j / 4
}

/// Centre `(row, col)` of unit `j`'s blob.
///
/// The frame is a 4×4 grid of cells; each colour owns one 2×2 quadrant and its
/// four units take one cell each, so every unit differs from every other in
/// location and no two units of the same colour overlap.
pub fn unit_center(image_size: usize, j: usize) -> (f64, f64) {
    let cell = image_size as f64 / 4.0;
    let (quad_r, quad_c) = [(0, 0), (0, 1), (1, 0)][unit_channel(j)];
    let (r, c) = (2 * quad_r + (j % 4) / 2, 2 * quad_c + j % 2);
    ((r as f64 + 0.5) * cell, (c as f64 + 0.5) * cell)
}

/// Unit `j`'s additive pattern `[3, S, S]`: a Gaussian blob in its own channel.
pub fn unit_pattern(image_size: usize, j: usize) -> Vec<f32> {
    let (cy, cx) = unit_center(image_size, j);
    let plane = image_size * image_size;
    let mut out = vec![0.0f32; 3 * plane];
    let c = unit_channel(j);
    for y in 0..image_size {
        for x in 0..image_size {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            out[c * plane + y * image_size + x] = (-d2 / (2.0 * PATTERN_SIGMA * PATTERN_SIGMA)).exp() as f32;
        }
    }
    out
}

/// Alternating on/off segments with uniformly drawn lengths and a random initial phase.
fn activation_track(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<bool> {
    let mut on = rng.random_bool(spec.duty_cycle());
    let mut track = Vec::with_capacity(spec.frames_per_video);
    // Start part-way through the first segment so onsets are not aligned to frame 0.
    let first = if on { spec.on_frames } else { spec.off_frames };
    let first_len = rng.random_range(first.0..=first.1);
    let mut remaining = rng.random_range(1..=first_len);
    while track.len() < spec.frames_per_video {
        track.extend(std::iter::repeat_n(on, remaining.min(spec.frames_per_video - track.len())));
        on = !on;
        let (lo, hi) = if on { spec.on_frames } else { spec.off_frames };
        remaining = rng.random_range(lo..=hi);
    }
    track
}

pub fn video_id(index: usize) -> String {
    format!("video{index:03}")
}

/// Builds the dataset in memory; each video draws from its own ChaCha stream.
pub fn synthesize(spec: &SyntheticSpec) -> Result<Vec<Video>> {
    spec.validate()?;
    let s = spec.image_size;
    let plane = 3 * s * s;
    let patterns: Vec<Vec<f32>> = (0..NUM_AUS).map(|j| unit_pattern(s, j)).collect();
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    (0..spec.n_videos)
        .map(|v| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(v as u64 + 1);
            let tracks: Vec<Vec<bool>> = (0..NUM_AUS).map(|_| activation_track(spec, &mut rng)).collect();
            let n = spec.frames_per_video;
            let mut data = vec![0.0f32; n * plane];
            let mut labels = Vec::with_capacity(n);
            for (f, frame) in data.chunks_mut(plane).enumerate() {
                let mut codes = [0i8; NUM_AUS];
                for j in 0..NUM_AUS {
                    if tracks[j][f] {
                        codes[j] = 1;
                        frame.iter_mut().zip(&patterns[j]).for_each(|(a, &b)| *a += b);
                    }
                }
                if spec.noise_std > 0.0 {
                    frame.iter_mut().for_each(|a| *a += noise.sample(&mut rng) as f32);
                }
                for code in codes.iter_mut() {
                    if rng.random_bool(spec.mask_fraction) {
                        *code = UNKNOWN;
                    }
                }
                labels.push(AuLabelFrame(codes));
            }
            Ok(Video { id: video_id(v), frames: Tensor::new(vec![n, 3, s, s], data)?, labels })
        })
        .collect()
}

/// Synthesizes the dataset and writes it under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, root: &Path) -> Result<Vec<Video>> {
    let videos = synthesize(spec)?;
    write_dataset(root, &videos)?;
    Ok(videos)
}

pub fn write_dataset(root: &Path, videos: &[Video]) -> Result<()> {
    let mut manifest = String::new();
    for v in videos {
        let dir = root.join(&v.id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let path = dir.join(FRAMES_FILE);
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        v.frames.write_to(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(LABELS_FILE);
        fs::write(&path, labels_to_csv(&v.labels)).map_err(|e| Error::io(&path, e))?;
        manifest.push_str(&format!("{} {}\n", v.id, v.len()));
    }
    let path = root.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
}

/// Reads every video listed in the manifest, in manifest order.
pub fn load_dataset(root: &Path) -> Result<Vec<Video>> {
    let path = root.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut videos = Vec::new();
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(count), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(&path, row + 1, format!("expected `video_id frame_count`, got {line:?}")));
        };
        let count: usize = count.parse().map_err(|e| Error::parse(&path, row + 1, format!("frame count: {e}")))?;
        videos.push(load_video(root, id, count)?);
    }
    if videos.is_empty() {
        return Err(Error::parse(&path, 1, "manifest lists no videos"));
    }
    Ok(videos)
}

fn load_video(root: &Path, id: &str, count: usize) -> Result<Video> {
    let path = root.join(id).join(FRAMES_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let frames: Tensor<f32> = Tensor::read_from(&mut BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(&path, source),
        other => Error::parse(&path, 1, other.to_string()),
    })?;
    let shape = frames.shape();
    if shape.len() != 4 || shape[0] != count || shape[1] != 3 {
        return Err(Error::parse(&path, 1, format!("expected [{count}, 3, H, W] frames, found {shape:?}")));
    }
    let path = root.join(id).join(LABELS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let labels = labels_from_csv(&text, &path)?;
    if labels.len() != count {
        return Err(Error::parse(&path, labels.len() + 1, format!("{} label rows for {count} frames", labels.len())));
    }
    Ok(Video { id: id.to_string(), frames, labels })
}

pub fn csv_header() -> String {
    format!("frame,{}", AU_NAMES.join(","))
}

pub fn labels_to_csv(labels: &[AuLabelFrame]) -> String {
    rows_to_csv(labels.iter().map(|l| l.0.map(i32::from)))
}

pub fn predictions_to_csv(preds: &[Prediction]) -> String {
    rows_to_csv(preds.iter().map(|p| p.map(i32::from)))
}

fn rows_to_csv(rows: impl Iterator<Item = [i32; NUM_AUS]>) -> String {
    let mut out = csv_header();
    out.push('\n');
    for (i, row) in rows.enumerate() {
        out.push_str(&i.to_string());
        for v in row {
            out.push(',');
            out.push_str(&v.to_string());
        }
        out.push('\n');
    }
    out
}

/// Parses the per-frame CSV; `file` only labels errors.
pub fn labels_from_csv(text: &str, file: &Path) -> Result<Vec<AuLabelFrame>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == csv_header() => {}
        Some((_, h)) => return Err(Error::parse(file, 1, format!("unexpected header {h:?}"))),
        None => return Err(Error::parse(file, 1, "empty label file")),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != NUM_AUS + 1 {
            return Err(Error::parse(file, row, format!("expected {} columns, found {}", NUM_AUS + 1, cells.len())));
        }
        if cells[0].parse::<usize>().ok() != Some(out.len()) {
            return Err(Error::parse(file, row, format!("frame index {:?} out of sequence", cells[0])));
        }
        let mut codes = [0i8; NUM_AUS];
        for (c, cell) in codes.iter_mut().zip(&cells[1..]) {
            *c = match *cell {
                "0" => 0,
                "1" => 1,
                "-1" => UNKNOWN,
                other => return Err(Error::parse(file, row, format!("invalid AU code {other:?}"))),
            };
        }
        out.push(AuLabelFrame(codes));
    }
    Ok(out)
}

/// A fixed-length window of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub video_id: String,
    /// Index of the window's first frame within its video.
    pub offset: usize,
    /// `[T, 3, H, W]`; padded frames are zero.
    pub frames: Tensor<f32>,
    /// Padded frames carry the unknown code on every AU.
    pub labels: Vec<AuLabelFrame>,
    pub padding: Vec<bool>,
}

impl Clip {
    pub fn real_frames(&self) -> usize {
        self.padding.iter().filter(|p| !**p).count()
    }
}

/// Cuts a video into `seq_len` windows every `stride` frames, zero-padding the last.
pub fn chunk_video(video: &Video, seq_len: usize, stride: usize) -> Result<Vec<Clip>> {
    if seq_len == 0 || stride == 0 {
        return Err(Error::config("seq_len and stride must be positive"));
    }
    let n = video.len();
    let frame_size: usize = video.frames.shape()[1..].iter().product();
    let mut shape = video.frames.shape().to_vec();
    shape[0] = seq_len;
    let mut clips = Vec::new();
    let mut start = 0;
    loop {
        let real = seq_len.min(n - start);
        let mut data = vec![0.0f32; seq_len * frame_size];
        data[..real * frame_size].copy_from_slice(&video.frames.data()[start * frame_size..(start + real) * frame_size]);
        let mut labels = video.labels[start..start + real].to_vec();
        labels.resize(seq_len, AuLabelFrame::UNKNOWN);
        let padding = (0..seq_len).map(|i| i >= real).collect();
        clips.push(Clip { video_id: video.id.clone(), offset: start, frames: Tensor::new(shape.clone(), data)?, labels, padding });
        if start + seq_len >= n {
            break;
        }
        start += stride;
    }
    Ok(clips)
}

pub fn chunk_videos<'a>(videos: impl IntoIterator<Item = &'a Video>, seq_len: usize, stride: usize) -> Result<Vec<Clip>> {
    Ok(videos
        .into_iter()
        .map(|v| chunk_video(v, seq_len, stride))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

/// Loads a dataset from disk and cuts it into clips, videos in manifest order.
pub fn load_and_chunk(root: &Path, seq_len: usize, stride: usize) -> Result<Vec<Clip>> {
    chunk_videos(&load_dataset(root)?, seq_len, stride)
}

/// Clips stacked along a leading batch axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipBatch {
    /// `[B, T, 3, H, W]`.
    pub frames: Tensor<f32>,
    /// `B·T` frames, batch-major.
    pub labels: Vec<AuLabelFrame>,
    pub video_ids: Vec<String>,
    pub offsets: Vec<usize>,
    pub padding: Vec<bool>,
}

impl ClipBatch {
    pub fn from_clips(clips: &[&Clip]) -> Result<Self> {
        if clips.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let frames = Tensor::stack(&clips.iter().map(|c| c.frames.clone()).collect::<Vec<_>>())?;
        Ok(ClipBatch {
            frames,
            labels: clips.iter().flat_map(|c| c.labels.iter().copied()).collect(),
            video_ids: clips.iter().map(|c| c.video_id.clone()).collect(),
            offsets: clips.iter().map(|c| c.offset).collect(),
            padding: clips.iter().flat_map(|c| c.padding.iter().copied()).collect(),
        })
    }
}

/// Seeded video-level split; `val_fraction` of the videos (rounded, at least one) are held out.
pub fn split_videos(ids: &[String], val_fraction: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::config(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    if ids.len() < 2 {
        return Err(Error::config("a train/val split needs at least two videos"));
    }
    let n_val = ((ids.len() as f64 * val_fraction).round() as usize).clamp(1, ids.len() - 1);
    let mut order = ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val: Vec<String> = order[..n_val].to_vec();
    let train = ids.iter().filter(|i| !val.contains(i)).cloned().collect();
    let val = ids.iter().filter(|i| val.contains(i)).cloned().collect();
    Ok((train, val))
}

/// The videos whose ids appear in `ids`, in dataset order.
pub fn select<'a>(videos: &'a [Video], ids: &[String]) -> Vec<&'a Video> {
    videos.iter().filter(|v| ids.contains(&v.id)).collect()
}

#[cfg(test)]
mod tests;
