//! End-to-end workflows shared by the command line and the acceptance suite:
//! data generation, training with checkpoints, evaluation, prediction files,
//! ensembles and the k-fold harness.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{chunk_videos, generate_synthetic, load_dataset, predictions_to_csv, select, split_videos, synthesize, Clip, Video};
use crate::error::{Error, Result};
use crate::metrics::{binarize, kfold_split, per_au_f1, FoldOutcome, FoldReport, PerAuF1};
use crate::model::AuModel;
use crate::tensor::Tensor;
use crate::training::{ensemble_predict, evaluate, pool_frames, train_loop, History, TrainSetup};

pub const HISTORY_FILE: &str = "history.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const REPORT_FILE: &str = "report.txt";
pub const REPORT_DATA_FILE: &str = "report.kv";
pub const PREDICTION_DIR: &str = "predictions";

/// Which videos an evaluation covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

/// Reads the dataset at `data`, or synthesizes one in memory from the config.
pub fn obtain_videos(cfg: &RunConfig, data: Option<&Path>) -> Result<Vec<Video>> {
    match data {
        Some(root) => load_dataset(root),
        None => synthesize(&cfg.data),
    }
}

/// Writes the configured synthetic dataset under `out_dir/dataset`.
pub fn gen_data(cfg: &RunConfig, out_dir: &Path) -> Result<(PathBuf, Vec<Video>)> {
    let root = out_dir.join("dataset");
    let videos = generate_synthetic(&cfg.data, &root)?;
    Ok((root, videos))
}

/// The seeded by-video train/validation partition.
pub fn train_val_ids(cfg: &RunConfig, videos: &[Video]) -> Result<(Vec<String>, Vec<String>)> {
    let ids: Vec<String> = videos.iter().map(|v| v.id.clone()).collect();
    split_videos(&ids, cfg.val_fraction, cfg.train.seed)
}

pub fn split_clips(cfg: &RunConfig, videos: &[Video], which: SplitChoice) -> Result<Vec<Clip>> {
    let (train, val) = train_val_ids(cfg, videos)?;
    let chosen: Vec<&Video> = match which {
        SplitChoice::Train => select(videos, &train),
        SplitChoice::Val => select(videos, &val),
        SplitChoice::All => videos.iter().collect(),
    };
    chunk_videos(chosen, cfg.train.seq_len, cfg.stride())
}

pub struct TrainOutcome {
    pub model: AuModel<f32>,
    pub history: History,
    /// Held-out F1 after the last step, when validation clips were given.
    pub val: Option<PerAuF1>,
}

/// Trains a fresh model; with `checkpoint_dir`, writes `step_NNNNN.ckpt` at every evaluation point.
pub fn train_model(
    cfg: &RunConfig,
    train: &[Clip],
    val: &[Clip],
    checkpoint_dir: Option<&Path>,
    progress: &mut dyn FnMut(&str),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut model = AuModel::<f32>::new(cfg.model_config(), cfg.train.seed)?;
    let mut scheduler = cfg.scheduler_state()?;
    let mut optimizer = cfg.optimizer_state()?;
    let setup = TrainSetup {
        config: &cfg.train,
        focal: &cfg.focal,
        scheduler: &mut scheduler,
        optimizer: &mut optimizer,
        eval_clips: (!val.is_empty()).then_some(val),
        threshold: cfg.threshold,
    };
    let history = train_loop(&mut model, train, setup, |step, m, f1| {
        match f1 {
            Some(f) => progress(&format!("step {step}: held-out macro-F1 {f:.4}")),
            None => progress(&format!("step {step}")),
        }
        if let Some(dir) = checkpoint_dir {
            save_checkpoint(&dir.join(format!("step_{step:05}.ckpt")), m, cfg)?;
        }
        Ok(())
    })?;
    let val = if val.is_empty() { None } else { Some(evaluate(&model, val, cfg.threshold)?) };
    Ok(TrainOutcome { model, history, val })
}

pub struct TrainRun {
    pub outcome: TrainOutcome,
    pub model_path: PathBuf,
    pub history_path: PathBuf,
}

/// `train`: split, train, and write the history, periodic checkpoints and final model under `out_dir`.
pub fn train_command(cfg: &RunConfig, data: Option<&Path>, out_dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<TrainRun> {
    let videos = obtain_videos(cfg, data)?;
    let train = split_clips(cfg, &videos, SplitChoice::Train)?;
    let val = split_clips(cfg, &videos, SplitChoice::Val)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let outcome = train_model(cfg, &train, &val, Some(&out_dir.join(CHECKPOINT_DIR)), progress)?;
    let history_path = out_dir.join(HISTORY_FILE);
    fs::write(&history_path, outcome.history.to_text()).map_err(|e| Error::io(&history_path, e))?;
    let model_path = out_dir.join(MODEL_FILE);
    save_checkpoint(&model_path, &outcome.model, cfg)?;
    Ok(TrainRun { outcome, model_path, history_path })
}

/// Averaged probabilities `[T, 12]` for each clip.
pub fn ensemble_clips(models: &[&AuModel<f32>], clips: &[Clip]) -> Result<Vec<Tensor<f32>>> {
    clips.iter().map(|c| ensemble_predict(models, &c.frames)).collect()
}

/// Per-AU F1 of the ensemble's thresholded probabilities over all real frames.
pub fn ensemble_evaluate(models: &[&AuModel<f32>], clips: &[Clip], threshold: f64) -> Result<PerAuF1> {
    let probs = ensemble_clips(models, clips)?;
    let (preds, labels) = pool_frames(clips, &probs, threshold)?;
    per_au_f1(&preds, &labels)
}

/// Loads checkpoints that must share one architecture; the first one's config governs data handling.
pub fn load_members(paths: &[PathBuf]) -> Result<(Vec<AuModel<f32>>, RunConfig)> {
    let Some(first) = paths.first() else {
        return Err(Error::usage("at least one checkpoint is required"));
    };
    let (model, cfg) = load_checkpoint::<f32>(first)?;
    let mut models = vec![model];
    for p in &paths[1..] {
        let (m, c) = load_checkpoint::<f32>(p)?;
        if c.model_config() != cfg.model_config() {
            return Err(Error::usage(format!(
                "{} has a different architecture from {}",
                p.display(),
                first.display()
            )));
        }
        models.push(m);
    }
    Ok((models, cfg))
}

/// Scores one model or an ensemble on the chosen split of the dataset.
pub fn eval_command(paths: &[PathBuf], data: Option<&Path>, which: SplitChoice) -> Result<PerAuF1> {
    let (models, cfg) = load_members(paths)?;
    let videos = obtain_videos(&cfg, data)?;
    let clips = split_clips(&cfg, &videos, which)?;
    if clips.is_empty() {
        return Err(Error::usage("the selected split holds no videos"));
    }
    let refs: Vec<&AuModel<f32>> = models.iter().collect();
    ensemble_evaluate(&refs, &clips, cfg.threshold)
}

/// Writes `predictions/<video>.csv` (hard 0/1 per AU per frame) for every video; returns the files.
pub fn predict_command(paths: &[PathBuf], data: Option<&Path>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (models, cfg) = load_members(paths)?;
    let refs: Vec<&AuModel<f32>> = models.iter().collect();
    let videos = obtain_videos(&cfg, data)?;
    let dir = out_dir.join(PREDICTION_DIR);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut written = Vec::with_capacity(videos.len());
    for video in &videos {
        let clips = chunk_videos([video], cfg.train.seq_len, cfg.train.seq_len)?;
        let probs = ensemble_clips(&refs, &clips)?;
        let mut preds = Vec::with_capacity(video.len());
        for (clip, p) in clips.iter().zip(&probs) {
            let hard = binarize(p, cfg.threshold)?;
            preds.extend(hard.into_iter().zip(&clip.padding).filter(|(_, pad)| !**pad).map(|(h, _)| h));
        }
        let path = dir.join(format!("{}.csv", video.id));
        fs::write(&path, predictions_to_csv(&preds)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// The k-fold harness: hold out the validation split, cross-validate on the rest,
/// then score the ensemble of fold models on the held-out split.
///
/// A fold whose training fails is reported as failed; the others still run.
pub fn kfold_command(cfg: &RunConfig, data: Option<&Path>, out_dir: &Path, progress: &mut dyn FnMut(&str)) -> Result<FoldReport> {
    cfg.validate()?;
    let videos = obtain_videos(cfg, data)?;
    let (pool, val_ids) = train_val_ids(cfg, &videos)?;
    let folds = kfold_split(&pool, cfg.kfold_k, cfg.train.seed)?;
    let val_clips = chunk_videos(select(&videos, &val_ids), cfg.train.seq_len, cfg.stride())?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut report = FoldReport::default();
    let mut members = Vec::new();
    for fold in &folds {
        let number = fold.id;
        progress(&format!("fold {number}/{}: {} training videos, {} held out", folds.len(), fold.train.len(), fold.val.len()));
        let fold_dir = out_dir.join(format!("fold{number}"));
        let mut run = || -> Result<(AuModel<f32>, f64)> {
            let train = chunk_videos(select(&videos, &fold.train), cfg.train.seq_len, cfg.stride())?;
            let held = chunk_videos(select(&videos, &fold.val), cfg.train.seq_len, cfg.stride())?;
            let outcome = train_model(cfg, &train, &held, None, &mut |line| progress(&format!("fold {number}: {line}")))?;
            fs::create_dir_all(&fold_dir).map_err(|e| Error::io(&fold_dir, e))?;
            let history_path = fold_dir.join(HISTORY_FILE);
            fs::write(&history_path, outcome.history.to_text()).map_err(|e| Error::io(&history_path, e))?;
            save_checkpoint(&fold_dir.join(MODEL_FILE), &outcome.model, cfg)?;
            let score = outcome.val.map(|v| v.macro_f1()).ok_or_else(|| Error::usage("fold has no held-out videos"))?;
            Ok((outcome.model, score))
        };
        match run() {
            Ok((model, score)) => {
                progress(&format!("fold {number}: F1 {score:.4}"));
                report.folds.push((number, FoldOutcome::Scored(score)));
                members.push(model);
            }
            Err(e) => {
                progress(&format!("fold {number}: failed: {e}"));
                report.folds.push((number, FoldOutcome::Failed(e.to_string())));
            }
        }
    }
    if !members.is_empty() && !val_clips.is_empty() {
        let refs: Vec<&AuModel<f32>> = members.iter().collect();
        let per_au = ensemble_evaluate(&refs, &val_clips, cfg.threshold)?;
        report.val_score = Some(per_au.macro_f1());
        report.per_au_f1 = Some(per_au.scores);
    }
    write_report(&report, out_dir)?;
    Ok(report)
}

/// Writes the rendered table and its machine-readable form.
pub fn write_report(report: &FoldReport, out_dir: &Path) -> Result<()> {
    use crate::metrics::{render_report, ComparisonRow};
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let text = out_dir.join(REPORT_FILE);
    fs::write(&text, render_report(report, &ComparisonRow::literature())).map_err(|e| Error::io(&text, e))?;
    let kv = out_dir.join(REPORT_DATA_FILE);
    fs::write(&kv, report.to_kv()).map_err(|e| Error::io(&kv, e))
}

/// Re-renders a report from the `report.kv` a k-fold run left in `dir`.
pub fn report_command(dir: &Path) -> Result<String> {
    use crate::metrics::{render_report, ComparisonRow};
    let kv = dir.join(REPORT_DATA_FILE);
    let text = fs::read_to_string(&kv).map_err(|e| Error::io(&kv, e))?;
    let report = FoldReport::from_kv(&text).map_err(|e| match e {
        Error::Parse { row, msg, .. } => Error::Parse { file: kv.clone(), row, msg },
        other => other,
    })?;
    Ok(render_report(&report, &ComparisonRow::literature()))
}
