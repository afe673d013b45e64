use auvit::data::{chunk_video, split_videos, Video};
use auvit::metrics::{binarize, kfold_split, per_au_f1, AuLabelFrame, Prediction};
use auvit::vivit::NUM_AUS;
use auvit::training::SchedulerState;
use auvit::Tensor;
use proptest::prelude::*;

fn label_frame() -> impl Strategy<Value = AuLabelFrame> {
    prop::array::uniform12(prop::sample::select(vec![-1i8, 0, 1])).prop_map(AuLabelFrame)
}

fn prediction() -> impl Strategy<Value = Prediction> {
    prop::array::uniform12(0u8..=1)
}

fn frames(max: usize) -> impl Strategy<Value = Vec<(Prediction, AuLabelFrame)>> {
    prop::collection::vec((prediction(), label_frame()), 1..max)
}

fn ids(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("v{i:02}")).collect()
}

proptest! {
    #[test]
    fn f1_ignores_frame_order(rows in frames(40), seed in any::<u64>()) {
        let (p, l): (Vec<_>, Vec<_>) = rows.iter().copied().unzip();
        let mut shuffled = rows.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (seed as usize).wrapping_add(i * 7919) % n);
        }
        let (sp, sl): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
        prop_assert_eq!(per_au_f1(&p, &l).unwrap().scores, per_au_f1(&sp, &sl).unwrap().scores);
    }

    /// F1 counts TP twice and FP/FN once each, so exchanging predictions and
    /// (fully annotated) labels leaves every score unchanged.
    #[test]
    fn f1_is_symmetric_in_predictions_and_labels(rows in prop::collection::vec((prediction(), prediction()), 1..40)) {
        let p: Vec<Prediction> = rows.iter().map(|r| r.0).collect();
        let q: Vec<Prediction> = rows.iter().map(|r| r.1).collect();
        let as_labels = |v: &[Prediction]| v.iter().map(|r| AuLabelFrame(r.map(|x| x as i8))).collect::<Vec<_>>();
        let a = per_au_f1(&p, &as_labels(&q)).unwrap();
        let b = per_au_f1(&q, &as_labels(&p)).unwrap();
        prop_assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn scores_stay_in_unit_interval_and_unknowns_are_invisible(rows in frames(40), flips in prop::collection::vec(prediction(), 40)) {
        let (p, l): (Vec<_>, Vec<_>) = rows.iter().copied().unzip();
        let f = per_au_f1(&p, &l).unwrap();
        prop_assert!(f.scores.iter().all(|s| (0.0..=1.0).contains(s)));
        // Changing the prediction on an unknown label changes nothing.
        let p2: Vec<Prediction> = p.iter().zip(&l).zip(&flips).map(|((row, lab), flip)| {
            std::array::from_fn(|au| if lab.0[au] == -1 { flip[au] } else { row[au] })
        }).collect();
        prop_assert_eq!(f.scores, per_au_f1(&p2, &l).unwrap().scores);
    }

    #[test]
    fn binarize_is_monotone_in_threshold(probs in prop::collection::vec(0.0f32..1.0, NUM_AUS * 3), lo in 0.01f64..0.98, gap in 0.0f64..0.5) {
        let hi = (lo + gap).min(0.99);
        let t = Tensor::new(vec![3, NUM_AUS], probs).unwrap();
        let a = binarize(&t, lo).unwrap();
        let b = binarize(&t, hi).unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for au in 0..NUM_AUS {
                prop_assert!(rb[au] <= ra[au]);
            }
        }
    }

    #[test]
    fn chunks_cover_every_frame_exactly_once(n in 1usize..70, seq in 1usize..20) {
        let video = Video {
            id: "v".into(),
            frames: Tensor::new(vec![n, 1, 1, 1], (0..n).map(|i| i as f32 + 1.0).collect()).unwrap(),
            labels: vec![AuLabelFrame::default(); n],
        };
        let clips = chunk_video(&video, seq, seq).unwrap();
        let mut seen = Vec::new();
        for c in &clips {
            prop_assert_eq!(c.labels.len(), seq);
            for (i, pad) in c.padding.iter().enumerate() {
                let v = c.frames.data()[i];
                if *pad {
                    prop_assert_eq!(v, 0.0);
                    prop_assert_eq!(c.labels[i], AuLabelFrame::UNKNOWN);
                } else {
                    prop_assert_eq!(v as usize, c.offset + i + 1);
                    seen.push(c.offset + i);
                }
            }
        }
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn kfold_partitions_the_videos(n in 2usize..40, k in 2usize..8, seed in any::<u64>()) {
        prop_assume!(n >= k);
        let all = ids(n);
        let folds = kfold_split(&all, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut held: Vec<String> = folds.iter().flat_map(|f| f.val.clone()).collect();
        held.sort();
        prop_assert_eq!(&held, &all);
        let sizes: Vec<usize> = folds.iter().map(|f| f.val.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in &folds {
            prop_assert_eq!(f.train.len() + f.val.len(), n);
            prop_assert!(f.train.iter().all(|v| !f.val.contains(v)));
        }
        prop_assert_eq!(folds, kfold_split(&all, k, seed).unwrap());
    }

    #[test]
    fn train_val_split_is_disjoint_and_complete(n in 2usize..40, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let all = ids(n);
        let (train, val) = split_videos(&all, frac, seed).unwrap();
        prop_assert!(!train.is_empty() && !val.is_empty());
        let mut joined = [train.clone(), val.clone()].concat();
        joined.sort();
        prop_assert_eq!(joined, all);
    }

    #[test]
    fn schedule_stays_in_range_and_restarts_at_eta_max(eta_max in 0.001f64..1.0, t_0 in 1usize..20, t_mult in 1usize..4, steps in 1usize..200) {
        let mut s = SchedulerState::new(0.0, eta_max, t_0, t_mult).unwrap();
        let mut restart_next = true;
        for _ in 0..steps {
            let (lr, restarted) = s.advance();
            prop_assert!((0.0..=eta_max).contains(&lr));
            if restart_next {
                prop_assert_eq!(lr, eta_max);
            }
            restart_next = restarted;
        }
    }
}
