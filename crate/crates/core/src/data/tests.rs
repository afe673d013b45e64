use super::*;

fn small() -> SyntheticSpec {
    SyntheticSpec { n_videos: 3, frames_per_video: 40, ..Default::default() }
}

#[test]
fn spec_contracts() {
    assert!(SyntheticSpec::default().validate().is_ok());
    for bad in [
        SyntheticSpec { n_videos: 0, ..small() },
        SyntheticSpec { on_frames: (5, 4), ..small() },
        SyntheticSpec { off_frames: (0, 4), ..small() },
        SyntheticSpec { noise_std: -1.0, ..small() },
        SyntheticSpec { mask_fraction: 1.0, ..small() },
    ] {
        assert!(matches!(synthesize(&bad), Err(Error::Config(_))), "{bad:?}");
    }
}

#[test]
fn noiseless_pattern_appears_wherever_unit_is_active() {
    let spec = SyntheticSpec { noise_std: 0.0, mask_fraction: 0.0, ..small() };
    let videos = synthesize(&spec).unwrap();
    let s = spec.image_size;
    let plane = 3 * s * s;
    let patterns: Vec<Vec<f32>> = (0..NUM_AUS).map(|j| unit_pattern(s, j)).collect();
    for v in &videos {
        for (f, label) in v.labels.iter().enumerate() {
            let frame = &v.frames.data()[f * plane..(f + 1) * plane];
            // Independent reconstruction: sum of active patterns.
            let mut expect = vec![0.0f32; plane];
            for j in 0..NUM_AUS {
                if label.0[j] == 1 {
                    expect.iter_mut().zip(&patterns[j]).for_each(|(a, &b)| *a += b);
                }
            }
            assert_eq!(frame, &expect[..]);
        }
    }
}

#[test]
fn always_on_unit_is_visible_in_every_frame() {
    // Segments far longer than the video: each unit keeps its initial state throughout.
    let spec = SyntheticSpec {
        noise_std: 0.0,
        mask_fraction: 0.0,
        on_frames: (1000, 1000),
        off_frames: (1000, 1000),
        n_videos: 6,
        ..small()
    };
    let videos = synthesize(&spec).unwrap();
    let s = spec.image_size;
    let mut seen_on = 0;
    for v in &videos {
        for j in 0..NUM_AUS {
            if v.labels[0].0[j] != 1 {
                continue;
            }
            seen_on += 1;
            let (cy, cx) = unit_center(s, j);
            let (y, x) = (cy as usize, cx as usize);
            let c = unit_channel(j);
            for f in 0..v.len() {
                assert_eq!(v.labels[f].0[j], 1);
                let px = v.frames.data()[((f * 3 + c) * s + y) * s + x];
                assert!(px > 0.5, "unit {j} frame {f}: {px}");
            }
        }
    }
    assert!(seen_on > 0);
}

#[test]
fn generation_is_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate_synthetic(&small(), a.path()).unwrap();
    generate_synthetic(&small(), b.path()).unwrap();
    for rel in ["manifest.txt", "video001/frames.vaut", "video002/labels.csv"] {
        assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel}");
    }
    let other = synthesize(&SyntheticSpec { seed: 1, ..small() }).unwrap();
    assert_ne!(other, synthesize(&small()).unwrap());
}

#[test]
fn round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let made = generate_synthetic(&small(), dir.path()).unwrap();
    let loaded = load_dataset(dir.path()).unwrap();
    assert_eq!(made, loaded);
}

#[test]
fn label_marginals_match_duty_cycle() {
    let spec = SyntheticSpec { n_videos: 8, frames_per_video: 1250, mask_fraction: 0.0, ..Default::default() };
    let videos = synthesize(&spec).unwrap();
    let (mut on, mut total) = (0usize, 0usize);
    for v in &videos {
        for l in &v.labels {
            on += l.0.iter().filter(|&&c| c == 1).count();
            total += NUM_AUS;
        }
    }
    let rate = on as f64 / total as f64;
    // 96 independent tracks of 1250 frames hold ~3900 segments; the rate's sampling error is ~0.01.
    assert!((rate - spec.duty_cycle()).abs() < 0.04, "rate {rate} vs duty {}", spec.duty_cycle());
}

#[test]
fn mask_fraction_is_respected() {
    let spec = SyntheticSpec { n_videos: 4, frames_per_video: 500, ..Default::default() };
    let videos = synthesize(&spec).unwrap();
    let masked = videos.iter().flat_map(|v| &v.labels).flat_map(|l| l.0).filter(|&c| c == UNKNOWN).count();
    let rate = masked as f64 / (4 * 500 * NUM_AUS) as f64;
    assert!((rate - 0.05).abs() < 0.01, "{rate}");
}

fn counting_video(n: usize) -> Video {
    let s = 8;
    let frames = Tensor::from_fn(&[n, 3, s, s], |i| (i / (3 * s * s)) as f32 + 1.0);
    let labels = (0..n).map(|i| AuLabelFrame([(i % 2) as i8; NUM_AUS])).collect();
    Video { id: "v".into(), frames, labels }
}

#[test]
fn chunking_pads_the_final_window() {
    let clips = chunk_video(&counting_video(70), 32, 32).unwrap();
    assert_eq!(clips.iter().map(|c| c.real_frames()).collect::<Vec<_>>(), vec![32, 32, 6]);
    assert_eq!(clips.iter().map(|c| c.offset).collect::<Vec<_>>(), vec![0, 32, 64]);
    let last = &clips[2];
    assert_eq!(last.padding.iter().filter(|p| **p).count(), 26);
    let fs = 3 * 8 * 8;
    assert_eq!(last.frames.data()[5 * fs], 70.0);
    assert!(last.frames.data()[6 * fs..].iter().all(|&v| v == 0.0));
    assert!(last.labels[6..].iter().all(|l| *l == AuLabelFrame::UNKNOWN));
}

#[test]
fn window_equal_to_video_is_unpadded() {
    let clips = chunk_video(&counting_video(32), 32, 32).unwrap();
    assert_eq!(clips.len(), 1);
    assert!(clips[0].padding.iter().all(|p| !p));
}

#[test]
fn chunking_covers_every_frame_once() {
    for n in [1, 31, 32, 33, 64, 100] {
        let v = counting_video(n);
        let clips = chunk_video(&v, 32, 32).unwrap();
        let mut seen = vec![0; n];
        for c in &clips {
            for (i, pad) in c.padding.iter().enumerate() {
                if !pad {
                    seen[c.offset + i] += 1;
                    assert_eq!(c.labels[i], v.labels[c.offset + i]);
                }
            }
        }
        assert!(seen.iter().all(|&k| k == 1), "n = {n}");
    }
}

#[test]
fn overlapping_stride() {
    let clips = chunk_video(&counting_video(10), 4, 2).unwrap();
    assert_eq!(clips.iter().map(|c| c.offset).collect::<Vec<_>>(), vec![0, 2, 4, 6]);
    assert!(clips.iter().all(|c| c.real_frames() == 4));
}

#[test]
fn batches_stack_clips() {
    let clips = chunk_video(&counting_video(70), 32, 32).unwrap();
    let b = ClipBatch::from_clips(&[&clips[0], &clips[2]]).unwrap();
    assert_eq!(b.frames.shape(), &[2, 32, 3, 8, 8]);
    assert_eq!(b.labels.len(), 64);
    assert_eq!(b.offsets, vec![0, 64]);
    assert_eq!(b.padding.iter().filter(|p| **p).count(), 26);
    assert!(matches!(ClipBatch::from_clips(&[]), Err(Error::EmptyBatch)));
}

#[test]
fn malformed_files_name_file_and_row() {
    let dir = tempfile::tempdir().unwrap();
    generate_synthetic(&small(), dir.path()).unwrap();
    let labels = dir.path().join("video001").join(LABELS_FILE);
    let mut text = fs::read_to_string(&labels).unwrap();
    text = text.replacen("\n3,", "\n3,7,", 1);
    fs::write(&labels, text).unwrap();
    let err = load_dataset(dir.path()).unwrap_err();
    match &err {
        Error::Parse { file, row, .. } => {
            assert!(file.ends_with("video001/labels.csv"));
            assert_eq!(*row, 5);
        }
        other => panic!("unexpected {other:?}"),
    }

    fs::write(dir.path().join(MANIFEST), "video000 abc\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { row: 1, .. })));
    fs::write(dir.path().join(MANIFEST), "video000 41\n").unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn csv_round_trip() {
    let labels = vec![AuLabelFrame([1, 0, -1, 0, 1, 0, 0, 0, 0, 0, 0, 1]), AuLabelFrame::UNKNOWN];
    let text = labels_to_csv(&labels);
    assert!(text.starts_with("frame,AU1,AU2,AU4,AU6,AU7,AU10,AU12,AU15,AU23,AU24,AU25,AU26\n0,1,0,-1,"));
    assert_eq!(labels_from_csv(&text, Path::new("x")).unwrap(), labels);
    let preds = vec![[1u8; NUM_AUS]];
    assert_eq!(predictions_to_csv(&preds).lines().nth(1).unwrap(), "0,1,1,1,1,1,1,1,1,1,1,1,1");
}

#[test]
fn video_split_is_seeded_and_disjoint() {
    let ids: Vec<String> = (0..16).map(video_id).collect();
    let (train, val) = split_videos(&ids, 0.25, 3).unwrap();
    assert_eq!((train.len(), val.len()), (12, 4));
    assert!(train.iter().all(|t| !val.contains(t)));
    assert_eq!(split_videos(&ids, 0.25, 3).unwrap(), (train, val));
    assert!(split_videos(&ids, 1.0, 3).is_err());
}
