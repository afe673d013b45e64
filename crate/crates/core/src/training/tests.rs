use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::Tape;
use crate::data::{chunk_videos, synthesize, SyntheticSpec};
use crate::error::Error;
use crate::gradcheck::finite_diff_check;
use crate::metrics::{AuLabelFrame, UNKNOWN};
use crate::model::{AuModel, ModelConfig};
use crate::nn::ParamStore;
use crate::tensor::Tensor;
use crate::vivit::{EncoderConfig, TubeletConfig, NUM_AUS};

fn loss_of(logits: &[f64], labels: &[AuLabelFrame], cfg: &FocalLossConfig) -> crate::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let z = tape.leaf(&Tensor::from_f64(&[1, labels.len(), NUM_AUS], logits).unwrap().with_requires_grad(true));
    let l = focal_loss(&mut tape, z, labels, cfg)?;
    Ok(tape.item(l))
}

fn one_entry(logit: f64, label: i8, cfg: &FocalLossConfig) -> f64 {
    let mut codes = [UNKNOWN; NUM_AUS];
    codes[0] = label;
    let mut z = [0.0; NUM_AUS];
    z[0] = logit;
    loss_of(&z, &[AuLabelFrame(codes)], cfg).unwrap()
}

#[test]
fn closed_form_example() {
    let v = one_entry(0.0, 1, &FocalLossConfig::default());
    assert!((v - 0.25 * 0.25 * std::f64::consts::LN_2).abs() < 1e-15);
    assert!((v - 0.043322).abs() < 1e-6);
}

#[test]
fn zero_gamma_half_alpha_is_half_bce() {
    let cfg = FocalLossConfig { alpha: 0.5, gamma: 0.0, au_weights: None };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let z: f64 = rng.random_range(-30.0..30.0);
        let y = rng.random_range(0..2i8);
        // Textbook stable form: max(z,0) − z·y + ln(1 + e^{−|z|}).
        let bce = z.max(0.0) - z * y as f64 + (-z.abs()).exp().ln_1p();
        let got = one_entry(z, y, &cfg);
        assert!((got - 0.5 * bce).abs() < 1e-9, "z={z} y={y}: {got} vs {}", 0.5 * bce);
    }
}

#[test]
fn confident_correct_predictions_cost_nothing() {
    let cfg = FocalLossConfig::default();
    assert!(one_entry(40.0, 1, &cfg) < 1e-30);
    assert!(one_entry(-40.0, 0, &cfg) < 1e-30);
}

#[test]
fn loss_decreases_as_target_probability_rises() {
    let cfg = FocalLossConfig::default();
    for label in [0, 1] {
        let sign = if label == 1 { 1.0 } else { -1.0 };
        let values: Vec<f64> = (-60..=60).map(|i| one_entry(sign * i as f64 / 6.0, label, &cfg)).collect();
        assert!(values.windows(2).all(|w| w[1] < w[0]), "label {label}");
    }
}

#[test]
fn masked_logits_are_inert() {
    let cfg = FocalLossConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..100 {
        let labels: Vec<AuLabelFrame> =
            (0..3).map(|_| AuLabelFrame(std::array::from_fn(|_| rng.random_range(-1..2i8)))).collect();
        if labels.iter().all(|l| l.0.iter().all(|&c| c == UNKNOWN)) {
            continue;
        }
        let z: Vec<f64> = (0..3 * NUM_AUS).map(|_| rng.random_range(-5.0..5.0)).collect();
        let base = loss_of(&z, &labels, &cfg).unwrap();
        let mut perturbed = z.clone();
        for (i, v) in perturbed.iter_mut().enumerate() {
            if labels[i / NUM_AUS].0[i % NUM_AUS] == UNKNOWN {
                *v += rng.random_range(-100.0..100.0);
            }
        }
        assert_eq!(base.to_bits(), loss_of(&perturbed, &labels, &cfg).unwrap().to_bits());
    }
}

#[test]
fn all_masked_is_an_empty_batch() {
    let err = loss_of(&[0.0; NUM_AUS], &[AuLabelFrame::UNKNOWN], &FocalLossConfig::default()).unwrap_err();
    assert!(matches!(err, Error::EmptyBatch));
}

#[test]
fn focal_gradient_matches_finite_differences() {
    let labels = vec![AuLabelFrame([1, 0, -1, 1, 0, 0, 1, 1, 0, -1, 0, 1]), AuLabelFrame([0; NUM_AUS])];
    let weights = std::array::from_fn(|i| 0.5 + i as f64 / 10.0);
    for cfg in [
        FocalLossConfig::default(),
        FocalLossConfig { alpha: 0.7, gamma: 0.5, au_weights: Some(weights) },
        FocalLossConfig { alpha: 0.5, gamma: 0.0, au_weights: None },
    ] {
        let point = Tensor::from_fn(&[1, 2, NUM_AUS], |i| ((i * 37 % 23) as f64 - 11.0) / 4.0);
        let err = finite_diff_check(|t, z| focal_loss(t, z, &labels, &cfg), &point, 1e-6).unwrap();
        assert!(err < 1e-5, "{cfg:?}: {err}");
    }
}

#[test]
fn focal_config_contracts() {
    for bad in [
        FocalLossConfig { alpha: 0.0, ..Default::default() },
        FocalLossConfig { alpha: 1.5, ..Default::default() },
        FocalLossConfig { gamma: -1.0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

fn store(values: &[f64], grads: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for (&v, &g) in values.iter().zip(grads) {
        let id = s.add(format!("p{}", s.len()), Tensor::from_f64(&[1], &[v]).unwrap());
        s.tensor_mut(id).accumulate_grad(&[g]).unwrap();
    }
    s
}

#[test]
fn plain_sgd_arithmetic() {
    let mut s = store(&[1.0], &[2.0]);
    let mut opt = OptimizerState::new(0.1, 0.0).unwrap();
    sgd_step(&mut s, &mut opt).unwrap();
    assert!((s.iter().next().unwrap().tensor.item() - 0.8).abs() < 1e-15);
    assert!(s.iter().all(|p| p.tensor.grad().is_none()));
}

#[test]
fn momentum_recurrence() {
    let mut s = store(&[0.0], &[1.0]);
    let mut opt = OptimizerState::new(1.0, 0.9).unwrap();
    sgd_step(&mut s, &mut opt).unwrap();
    assert_eq!(s.iter().next().unwrap().tensor.item(), -1.0);
    let id = s.ids().next().unwrap();
    s.tensor_mut(id).accumulate_grad(&[1.0]).unwrap();
    sgd_step(&mut s, &mut opt).unwrap();
    assert!((s.get(id).tensor.item() - -2.9).abs() < 1e-15);
    assert!((opt.velocity(0).unwrap()[0] - 1.9).abs() < 1e-15);
}

#[test]
fn zero_grads_leave_parameters_unchanged() {
    let mut s = store(&[0.3, -0.7], &[0.0, 0.0]);
    let mut opt = OptimizerState::new(0.5, 0.9).unwrap();
    sgd_step(&mut s, &mut opt).unwrap();
    let v: Vec<f64> = s.iter().map(|p| p.tensor.item()).collect();
    assert_eq!(v, vec![0.3, -0.7]);
}

#[test]
fn frozen_parameters_are_untouched_and_missing_grads_rejected() {
    let mut s = store(&[0.3, -0.7], &[1.0, 1.0]);
    let frozen = s.ids().next().unwrap();
    s.set_trainable(frozen, false);
    let mut opt = OptimizerState::new(0.5, 0.9).unwrap();
    sgd_step(&mut s, &mut opt).unwrap();
    assert_eq!(s.get(frozen).tensor.item().to_bits(), 0.3f64.to_bits());
    // Second parameter is trainable but has no gradient now.
    let err = sgd_step(&mut s, &mut opt).unwrap_err();
    assert!(matches!(&err, Error::Usage(m) if m.contains("p1")), "{err}");
}

#[test]
fn clipping_bounds_the_update() {
    let mut s = store(&[0.0, 0.0], &[3.0, 4.0]);
    let mut opt = OptimizerState::new(1.0, 0.0).unwrap().with_clipping(Some(1.0));
    sgd_step(&mut s, &mut opt).unwrap();
    let v: Vec<f64> = s.iter().map(|p| p.tensor.item()).collect();
    assert!((v[0] + 0.6).abs() < 1e-15 && (v[1] + 0.8).abs() < 1e-15);
}

#[test]
fn optimizer_contracts() {
    assert!(OptimizerState::<f32>::new(0.1, 1.0).is_err());
    assert!(OptimizerState::<f32>::new(-0.1, 0.5).is_err());
}

#[test]
fn schedule_endpoints_and_midpoint() {
    let mut s = SchedulerState::new(0.001, 0.1, 10, 1).unwrap();
    assert_eq!(cosine_warm_restarts(&mut s), 0.1);
    for _ in 1..5 {
        s.advance();
    }
    assert_eq!(s.t_cur, 5);
    assert!((s.current() - (0.1 + 0.001) / 2.0).abs() < 1e-12);
    for _ in 5..9 {
        s.advance();
    }
    let before_restart = 0.001 + 0.5 * (0.1 - 0.001) * (1.0 + (std::f64::consts::PI * 9.0 / 10.0).cos());
    assert_eq!(cosine_warm_restarts(&mut s), before_restart);
    assert_eq!(s.current(), 0.1);
}

#[test]
fn restart_boundaries_grow_geometrically() {
    let mut s = SchedulerState::new(0.0, 1.0, 4, 2).unwrap();
    let restarts: Vec<usize> = (1..=70).filter(|_| s.advance().1).collect();
    assert_eq!(restarts, vec![4, 12, 28, 60]);
}

#[test]
fn schedule_stays_in_range() {
    let mut s = SchedulerState::new(0.01, 0.2, 3, 3).unwrap();
    for _ in 0..200 {
        let lr = cosine_warm_restarts(&mut s);
        assert!((0.01..=0.2).contains(&lr));
        assert!(s.t_cur < s.t_i);
    }
    assert!(SchedulerState::new(0.2, 0.1, 3, 1).is_err());
    assert!(SchedulerState::new(0.0, 0.1, 0, 1).is_err());
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig { n_spatial_layers: 1, n_temporal_layers: 1, n_heads: 2, model_dim: 8, layer_budget: 2, ..Default::default() },
        tubelet: TubeletConfig { embed_dim: 8, ..Default::default() },
        seq_len: 8,
        ..Default::default()
    }
}

fn tiny_clips() -> Vec<crate::data::Clip> {
    let videos = synthesize(&SyntheticSpec { n_videos: 2, frames_per_video: 20, ..Default::default() }).unwrap();
    chunk_videos(&videos, 8, 8).unwrap()
}

fn run(model: &mut AuModel<f32>, steps: usize, lr: f64) -> History {
    let cfg = TrainConfig { seq_len: 8, batch_size: 2, max_steps: steps, eval_every: 0, ..Default::default() };
    let mut sched = SchedulerState::new(0.0, lr, 4, 2).unwrap();
    let mut opt = OptimizerState::new(lr, 0.9).unwrap();
    let setup = TrainSetup {
        config: &cfg,
        focal: &FocalLossConfig::default(),
        scheduler: &mut sched,
        optimizer: &mut opt,
        eval_clips: None,
        threshold: 0.5,
    };
    train_loop(model, &tiny_clips(), setup, |_, _, _| Ok(())).unwrap()
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let mut m = AuModel::<f32>::new(tiny_cfg(), 0).unwrap();
    let before: Vec<Vec<f32>> = m.params.iter().map(|p| p.tensor.data().to_vec()).collect();
    // Six clips, batches of two: every third step revisits the same batch composition.
    let h = run(&mut m, 6, 0.0);
    let after: Vec<Vec<f32>> = m.params.iter().map(|p| p.tensor.data().to_vec()).collect();
    assert_eq!(before, after);
    assert!(h.records.iter().all(|r| r.lr == 0.0));
}

#[test]
fn training_is_reproducible_and_respects_freezing() {
    let mut a = AuModel::<f32>::new(tiny_cfg(), 3).unwrap();
    let mut b = AuModel::<f32>::new(tiny_cfg(), 3).unwrap();
    let frozen_before: Vec<Vec<f32>> = a.params.iter().filter(|p| p.frozen()).map(|p| p.tensor.data().to_vec()).collect();
    let ha = run(&mut a, 5, 0.05);
    let hb = run(&mut b, 5, 0.05);
    assert_eq!(ha.to_text(), hb.to_text());
    let frozen_after: Vec<Vec<f32>> = a.params.iter().filter(|p| p.frozen()).map(|p| p.tensor.data().to_vec()).collect();
    assert_eq!(frozen_before, frozen_after);
    assert!(a.params.iter().any(|p| !p.frozen()));
    assert_eq!(History::from_text(&ha.to_text()).unwrap(), ha);
}

#[test]
fn ensemble_identities() {
    let m1 = AuModel::<f32>::new(tiny_cfg(), 1).unwrap();
    let m2 = AuModel::<f32>::new(tiny_cfg(), 2).unwrap();
    let m3 = AuModel::<f32>::new(tiny_cfg(), 3).unwrap();
    let clip = tiny_clips()[0].frames.clone();
    let single = ensemble_predict(&[&m1], &clip).unwrap();
    let direct = m1.predict_proba(&clip.reshaped(&[1, 8, 3, 32, 32]).unwrap()).unwrap();
    assert_eq!(single.data(), direct.data());
    assert_eq!(single.shape(), &[8, NUM_AUS]);
    assert_eq!(ensemble_predict(&[&m1, &m1, &m1], &clip).unwrap().data(), single.data());
    let abc = ensemble_predict(&[&m1, &m2, &m3], &clip).unwrap();
    for perm in [[&m3, &m1, &m2], [&m2, &m3, &m1], [&m1, &m3, &m2]] {
        assert_eq!(ensemble_predict(&perm, &clip).unwrap().data(), abc.data());
    }
    assert!(matches!(ensemble_predict::<f32>(&[], &clip), Err(Error::Usage(_))));
}
