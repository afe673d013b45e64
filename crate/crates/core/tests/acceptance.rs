//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs as a plain binary (`harness = false`) so the lines appear in order and
//! the process fails if any criterion does.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use auvit::autograd::Tape;
use auvit::backbone::BackboneConfig;
use auvit::checkpoint::{load_checkpoint, save_checkpoint};
use auvit::config::RunConfig;
use auvit::data::{chunk_videos, select, synthesize, SyntheticSpec};
use auvit::gradcheck::run_suite;
use auvit::metrics::{per_au_f1, AuLabelFrame, Prediction, UNKNOWN};
use auvit::model::{AuModel, ModelConfig};
use auvit::nn::{normal, ParamStore};
use auvit::pipeline::{self, SplitChoice};
use auvit::training::{
    ensemble_predict, evaluate, focal_loss, train_loop, FocalLossConfig, OptimizerState, SchedulerState, TrainConfig, TrainSetup,
};
use auvit::vivit::{EncoderConfig, Msa, TransformerLayer, TubeletConfig, NUM_AUS};
use auvit::Tensor;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("residual identity", residual_identity),
        ("attention normalization", attention_normalization),
        ("focal-loss reduction and masking", focal_reduction),
        ("scheduler exactness", scheduler_exactness),
        ("freezing", freezing),
        ("metric oracle", metric_oracle),
        ("end-to-end learnability", learnability),
        ("k-fold harness", kfold_harness),
        ("ensemble identities", ensemble_identities),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let tag = if v.pass { "PASS" } else { "FAIL" };
        println!("{tag} {name}: {} [{:.1}s]", v.detail, start.elapsed().as_secs_f64());
        failed += usize::from(!v.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------------------

fn gradient_correctness() -> Verdict {
    let start = Instant::now();
    let results = match run_suite(|_| {}) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let elapsed = start.elapsed();
    let worst = results.iter().max_by(|a, b| (a.max_error / a.tolerance).total_cmp(&(b.max_error / b.tolerance))).unwrap();
    let failed: Vec<String> = results.iter().filter(|c| !c.passed()).map(|c| format!("{} ({:.2e})", c.name, c.max_error)).collect();
    let model = results.iter().find(|c| c.name == "micro_model").map(|c| c.max_error).unwrap_or(f64::NAN);
    let pass = failed.is_empty() && elapsed < Duration::from_secs(120) && model < 1e-4;
    verdict(
        pass,
        format!(
            "{} checks, worst relative to tolerance: {} {:.2e} < {:.0e}; micro model {:.2e}; failures {:?}; {:.1}s < 120s",
            results.len(),
            worst.name,
            worst.max_error,
            worst.tolerance,
            model,
            failed,
            elapsed.as_secs_f64()
        ),
    )
}

fn residual_identity() -> Verdict {
    fn check<F: auvit::Element>(seed: u64) -> bool {
        let cfg = EncoderConfig { n_spatial_layers: 1, n_temporal_layers: 1, n_heads: 2, model_dim: 8, layer_budget: 2, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<F>::new();
        let layer = TransformerLayer::new(&mut store, "layer", &cfg, &mut rng).unwrap();
        for id in [layer.msa.out.ids(), layer.mlp_out.ids()].concat() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = F::lit(0.0));
        }
        let x: Tensor<F> = normal(&[3, 5, 8], 3.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &p, xv).unwrap();
        let y = tape.to_tensor(y);
        x.data().iter().zip(y.data()).all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
    let ok = (0..10).all(|s| check::<f32>(s) && check::<f64>(s));
    verdict(ok, "zeroed out-projection and MLP output: output bit-identical to input (10 seeds, f32 and f64)")
}

fn attention_normalization() -> Verdict {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n_heads = [1, 2, 4][seed as usize % 3];
        let mut store = ParamStore::<f64>::new();
        let msa = Msa::new(&mut store, "msa", 8, n_heads, &mut rng).unwrap();
        let n = rng.random_range(1..9);
        let x: Tensor<f64> = normal(&[2, n, 8], 1.0 + seed as f64 / 10.0, &mut rng);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape);
        let xv = tape.constant(x);
        let (_, attn) = msa.forward_with_weights(&mut tape, &p, xv).unwrap();
        for row in tape.value(attn).chunks(n) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    verdict(worst < 1e-6, format!("max |row sum − 1| = {worst:.2e} < 1e-6 over 100 inputs"))
}

fn focal_reduction() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = FocalLossConfig { alpha: 0.5, gamma: 0.0, au_weights: None };
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let z: f64 = rng.random_range(-8.0..8.0);
        let y = rng.random_bool(0.5);
        let mut codes = [UNKNOWN; NUM_AUS];
        codes[0] = i8::from(y);
        let mut tape = Tape::<f64>::new();
        let mut logits = vec![0.0; NUM_AUS];
        logits[0] = z;
        let lv = tape.constant(Tensor::from_f64(&[1, 1, NUM_AUS], &logits).unwrap());
        let loss = focal_loss(&mut tape, lv, &[AuLabelFrame(codes)], &cfg).unwrap();
        // Independent oracle: binary cross-entropy from the probability.
        let p = 1.0 / (1.0 + (-z).exp());
        let bce = if y { -p.ln() } else { -(1.0 - p).ln() };
        worst = worst.max((tape.item(loss) - 0.5 * bce).abs());
    }

    // Masked entries: perturbing their logits must leave loss and gradients bit-identical.
    let labels: Vec<AuLabelFrame> =
        (0..8).map(|_| AuLabelFrame(std::array::from_fn(|_| [0, 1, UNKNOWN][rng.random_range(0..3)]))).collect();
    let base: Tensor<f64> = normal(&[2, 4, NUM_AUS], 2.0, &mut rng);
    let eval = |t: &Tensor<f64>| {
        let mut tape = Tape::new();
        let leaf = t.clone().with_requires_grad(true);
        let v = tape.leaf(&leaf);
        let loss = focal_loss(&mut tape, v, &labels, &FocalLossConfig::default()).unwrap();
        let value = tape.item(loss);
        let grads = tape.backward(loss).unwrap();
        (value, grads.get(v).unwrap().data().to_vec())
    };
    let (l0, g0) = eval(&base);
    let mut inert = true;
    for trial in 0..20 {
        let mut perturbed = base.clone();
        for (i, l) in labels.iter().flat_map(|f| f.0).enumerate() {
            if l == UNKNOWN {
                perturbed.data_mut()[i] += rng.random_range(-50.0..50.0) * (trial + 1) as f64;
            }
        }
        let (l1, g1) = eval(&perturbed);
        inert &= l1.to_bits() == l0.to_bits();
        inert &= g1.iter().zip(&g0).all(|(a, b)| a.to_bits() == b.to_bits());
    }
    let masked_grad_zero = labels.iter().flat_map(|f| f.0).zip(&g0).all(|(l, g)| l != UNKNOWN || *g == 0.0);
    verdict(
        worst < 1e-9 && inert && masked_grad_zero,
        format!("γ=0, α=0.5 vs 0.5×BCE max diff {worst:.2e} < 1e-9 (1000 pairs); masked perturbation bit-identical: {inert}; masked gradients zero: {masked_grad_zero}"),
    )
}

fn scheduler_exactness() -> Verdict {
    let (lo, hi) = (0.0013, 0.37);
    let mut s = SchedulerState::new(lo, hi, 10, 1).unwrap();
    let first = s.current() == hi;
    for _ in 0..5 {
        s.advance();
    }
    let mid_err = (s.current() - (hi + lo) / 2.0).abs();
    let mut r = SchedulerState::new(0.0, 1.0, 4, 2).unwrap();
    let restarts: Vec<usize> = (1..=30).filter(|_| r.advance().1).collect();
    let pass = first && mid_err < 1e-12 && restarts == [4, 12, 28];
    verdict(pass, format!("η(0) == eta_max exactly: {first}; midpoint error {mid_err:.1e} < 1e-12; restarts {restarts:?} == [4, 12, 28]"))
}

fn tiny_model_config(seq_len: usize) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig { n_frozen_stages: 1, ..Default::default() },
        tubelet: TubeletConfig { embed_dim: 16, ..Default::default() },
        encoder: EncoderConfig { n_spatial_layers: 1, n_temporal_layers: 1, n_heads: 2, model_dim: 16, layer_budget: 2, ..Default::default() },
        seq_len,
        ..Default::default()
    }
}

fn freezing() -> Verdict {
    let mut model = AuModel::<f32>::new(tiny_model_config(8), 4).unwrap();
    let videos = synthesize(&SyntheticSpec { n_videos: 2, frames_per_video: 32, ..Default::default() }).unwrap();
    let clips = chunk_videos(&videos, 8, 8).unwrap();
    let snapshot = |m: &AuModel<f32>, prefix: &[&str]| -> Vec<(String, Vec<u32>)> {
        m.params
            .iter()
            .filter(|p| prefix.iter().any(|pre| p.name.starts_with(pre)))
            .map(|p| (p.name.clone(), p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    };
    let frozen_prefixes = ["backbone.stem", "backbone.stage1."];
    let before = snapshot(&model, &frozen_prefixes);
    let others_before = snapshot(&model, &["backbone.stage2.", "head."]);
    let cfg = TrainConfig { seq_len: 8, batch_size: 2, max_steps: 100, eval_every: 0, ..Default::default() };
    let mut sched = SchedulerState::new(0.0, 0.05, 25, 2).unwrap();
    let mut opt = OptimizerState::new(0.05, 0.9).unwrap();
    let setup = TrainSetup { config: &cfg, focal: &FocalLossConfig::default(), scheduler: &mut sched, optimizer: &mut opt, eval_clips: None, threshold: 0.5 };
    train_loop(&mut model, &clips, setup, |_, _, _| Ok(())).unwrap();
    let after = snapshot(&model, &frozen_prefixes);
    let others_after = snapshot(&model, &["backbone.stage2.", "head."]);
    let changed = others_before.iter().zip(&others_after).filter(|(a, b)| a.1 != b.1).count();
    let pass = !before.is_empty() && before == after && changed > 0;
    verdict(
        pass,
        format!("{} stem/stage-1 tensors bit-identical after 100 steps; {changed}/{} later tensors moved", before.len(), others_before.len()),
    )
}

// Independent F1 oracle: per-AU counts gathered column by column.
fn oracle_fraction(preds: &[Prediction], labels: &[AuLabelFrame], au: usize) -> (u64, u64) {
    let column: Vec<(u8, i8)> = preds.iter().zip(labels).map(|(p, l)| (p[au], l.0[au])).filter(|&(_, l)| l != UNKNOWN).collect();
    let tp = column.iter().filter(|&&(p, l)| p == 1 && l == 1).count() as u64;
    let fp = column.iter().filter(|&&(p, l)| p == 1 && l == 0).count() as u64;
    let fn_ = column.iter().filter(|&&(p, l)| p == 0 && l == 1).count() as u64;
    (2 * tp, 2 * tp + fp + fn_)
}

fn oracle_macro(preds: &[Prediction], labels: &[AuLabelFrame]) -> ([f64; NUM_AUS], f64) {
    let per: [f64; NUM_AUS] = std::array::from_fn(|au| {
        let (num, den) = oracle_fraction(preds, labels, au);
        if den == 0 { 0.0 } else { num as f64 / den as f64 }
    });
    let mut total = 0.0;
    for v in per {
        total += v;
    }
    (per, total / NUM_AUS as f64)
}

fn metric_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let t = rng.random_range(1..40);
        let p_pos = rng.random_range(0.0..1.0);
        let preds: Vec<Prediction> = (0..t).map(|_| std::array::from_fn(|_| u8::from(rng.random_bool(p_pos)))).collect();
        let labels: Vec<AuLabelFrame> =
            (0..t).map(|_| AuLabelFrame(std::array::from_fn(|_| [0, 1, UNKNOWN][rng.random_range(0..3)]))).collect();
        let got = per_au_f1(&preds, &labels).unwrap();
        let (per, mac) = oracle_macro(&preds, &labels);
        if got.scores != per || got.macro_f1().to_bits() != mac.to_bits() {
            mismatches += 1;
        }
    }
    // Every label/prediction combination for one AU and T ≤ 6; the AU is copied to all 12 slots.
    let mut enumerated = 0u64;
    let mut enum_mismatch = 0;
    for t in 1..=6u32 {
        for lab_code in 0..3u32.pow(t) {
            for pred_code in 0..2u32.pow(t) {
                let mut labels = Vec::new();
                let mut preds = Vec::new();
                let (mut l, mut p) = (lab_code, pred_code);
                for _ in 0..t {
                    labels.push(AuLabelFrame([[0, 1, UNKNOWN][(l % 3) as usize]; NUM_AUS]));
                    preds.push([(p % 2) as u8; NUM_AUS]);
                    l /= 3;
                    p /= 2;
                }
                let got = per_au_f1(&preds, &labels).unwrap();
                let (num, den) = oracle_fraction(&preds, &labels, 0);
                // num and den are small integers, so num / den is the correctly rounded rational.
                let expect = if den == 0 { 0.0 } else { num as f64 / den as f64 };
                if got.scores[0] != expect || got.macro_f1() != oracle_macro(&preds, &labels).1 {
                    enum_mismatch += 1;
                }
                enumerated += 1;
            }
        }
    }
    verdict(
        mismatches == 0 && enum_mismatch == 0,
        format!("{mismatches}/1000 random mismatches; {enum_mismatch}/{enumerated} enumerated (T ≤ 6, single AU) mismatches"),
    )
}

fn learnability() -> Verdict {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let videos = synthesize(&cfg.data).unwrap();
    let train = pipeline::split_clips(&cfg, &videos, SplitChoice::Train).unwrap();
    let val = pipeline::split_clips(&cfg, &videos, SplitChoice::Val).unwrap();
    let out = pipeline::train_model(&cfg, &train, &val, None, &mut |_| {});
    let outcome = match out {
        Ok(o) => o,
        Err(e) => return verdict(false, format!("training failed: {e}")),
    };
    let train_f1 = evaluate(&outcome.model, &train, cfg.threshold).unwrap().macro_f1();
    let val_f1 = outcome.val.as_ref().map(|v| v.macro_f1()).unwrap_or(0.0);
    let elapsed = start.elapsed();
    let pass = train_f1 >= 0.95 && val_f1 >= 0.8 && elapsed < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "after {} steps: train macro-F1 {train_f1:.4} (≥ 0.95), held-out {val_f1:.4} (≥ 0.8), {:.0}s (< 600s)",
            cfg.train.max_steps,
            elapsed.as_secs_f64()
        ),
    )
}

fn kfold_harness() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.kfold_k = 5;
    let dir = tempfile::tempdir().unwrap();
    let report = match pipeline::kfold_command(&cfg, None, dir.path(), &mut |_| {}) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("k-fold run failed: {e}")),
    };
    let text = pipeline::report_command(dir.path()).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    let fold_rows = (1..=5).all(|i| rows.iter().any(|r| r.trim_start().starts_with(&format!("{i} "))));
    let val_row = rows.iter().any(|r| r.starts_with("Val Set"));
    let spread = report.spread().unwrap_or(f64::NAN);
    let scores: Vec<String> = report.scores().iter().map(|s| format!("{s:.3}")).collect();
    let pass = report.folds.len() == 5 && report.scores().len() == 5 && fold_rows && val_row && spread < 0.15;
    verdict(
        pass,
        format!(
            "5 fold rows + Val row: {}; fold F1 [{}], spread {spread:.4} < 0.15; ensemble val {:.4}",
            fold_rows && val_row,
            scores.join(", "),
            report.val_score.unwrap_or(f64::NAN)
        ),
    )
}

fn ensemble_identities() -> Verdict {
    let cfg = RunConfig { train: TrainConfig { seq_len: 8, ..Default::default() }, ..Default::default() };
    let dir = tempfile::tempdir().unwrap();
    let mut paths = Vec::new();
    for seed in 0..3 {
        let m = AuModel::<f32>::new(cfg.model_config(), seed).unwrap();
        let p = dir.path().join(format!("m{seed}.ckpt"));
        save_checkpoint(&p, &m, &cfg).unwrap();
        paths.push(p);
    }
    let load = |p: &std::path::Path| load_checkpoint::<f32>(p).unwrap().0;
    let (a, b, c) = (load(&paths[0]), load(&paths[1]), load(&paths[2]));
    let copies: Vec<AuModel<f32>> = (0..4).map(|_| load(&paths[0])).collect();
    let videos = synthesize(&SyntheticSpec { n_videos: 1, frames_per_video: 16, ..Default::default() }).unwrap();
    let clips = chunk_videos(select(&videos, &[videos[0].id.clone()]), 8, 8).unwrap();
    let mut identical = true;
    let mut permuted = true;
    for clip in &clips {
        let single = a.predict_proba(&clip.frames.reshaped(&[1, 8, 3, 32, 32]).unwrap()).unwrap();
        for k in 1..=4 {
            let refs: Vec<&AuModel<f32>> = copies[..k].iter().collect();
            let e = ensemble_predict(&refs, &clip.frames).unwrap();
            identical &= e.data().iter().zip(single.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
        let abc = ensemble_predict(&[&a, &b, &c], &clip.frames).unwrap();
        for order in [[&a, &c, &b], [&b, &a, &c], [&b, &c, &a], [&c, &a, &b], [&c, &b, &a]] {
            let e = ensemble_predict(&order, &clip.frames).unwrap();
            permuted &= e.data().iter().zip(abc.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        }
    }
    verdict(
        identical && permuted,
        format!("k ∈ 1..=4 identical checkpoints == single model bitwise: {identical}; all 6 orders of 3 members bit-identical: {permuted}"),
    )
}

fn determinism() -> Verdict {
    let mut cfg = RunConfig::default();
    cfg.train.max_steps = 40;
    cfg.train.eval_every = 20;
    let videos = synthesize(&cfg.data).unwrap();
    let train = pipeline::split_clips(&cfg, &videos, SplitChoice::Train).unwrap();
    let val = pipeline::split_clips(&cfg, &videos, SplitChoice::Val).unwrap();
    let run = || pipeline::train_model(&cfg, &train, &val, None, &mut |_| {}).unwrap();
    let (a, b) = (run(), run());
    let same_history = a.history.records.len() == b.history.records.len()
        && a.history.records.iter().zip(&b.history.records).all(|(x, y)| {
            x.step == y.step
                && x.loss.to_bits() == y.loss.to_bits()
                && x.lr.to_bits() == y.lr.to_bits()
                && x.macro_f1.map(f64::to_bits) == y.macro_f1.map(f64::to_bits)
        });
    let same_params = a.model.params.iter().zip(b.model.params.iter()).all(|(p, q)| p.tensor.data() == q.tensor.data());
    verdict(
        same_history && same_params && a.history.to_text() == b.history.to_text(),
        format!("two {}-step runs, same seed: histories bit-identical: {same_history}; parameters identical: {same_params}", cfg.train.max_steps),
    )
}
