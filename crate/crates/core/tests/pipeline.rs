use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vivi_core::pipeline::histogram::{boundary_counts, f1_score, frame_histogram_u8, l1_distance};
use vivi_core::pipeline::sampler::Sampler;
use vivi_core::pipeline::{
    augment, detect_shot_boundaries, read_shards, sample_hierarchical_batch, write_shards, AugmentConfig, BatchSpec,
    ShardReader,
};
use vivi_core::videogen::{generate_corpus, Corpus, GenConfig, VideoRecord};
use vivi_core::Error;

fn small_corpus(videos: usize, seed: u64) -> Corpus {
    let cfg = GenConfig {
        videos,
        size: 16,
        frames_per_shot: 10,
        ..GenConfig::default()
    };
    generate_corpus(&cfg, seed).unwrap()
}

/// A flat-color video whose shots have the given lengths.
fn flat_video(id: u32, shot_lens: &[usize], size: usize) -> VideoRecord {
    let frame_len = size * size * 3;
    let mut frames = Vec::new();
    let mut boundaries = Vec::new();
    let mut t = 0;
    for (s, &len) in shot_lens.iter().enumerate() {
        if s > 0 {
            boundaries.push(t);
        }
        let value = (s * 60 % 256) as u8;
        frames.extend(std::iter::repeat(value).take(len * frame_len));
        t += len;
    }
    VideoRecord {
        video_id: id,
        height: size,
        width: size,
        channels: 3,
        frames,
        boundaries,
        label: 0,
        meta: None,
    }
}

#[test]
fn shard_round_trip_is_byte_exact() {
    let corpus = small_corpus(100, 3);
    let dir = tempfile::tempdir().unwrap();
    let paths = write_shards(&corpus, dir.path(), 30).unwrap();
    assert_eq!(paths.len(), 4);
    let back = read_shards(dir.path()).unwrap();
    assert_eq!(back, corpus);
}

#[test]
fn random_access_touches_one_shard() {
    let corpus = small_corpus(100, 4);
    let dir = tempfile::tempdir().unwrap();
    write_shards(&corpus, dir.path(), 10).unwrap();
    let mut reader = ShardReader::open(dir.path()).unwrap();
    assert_eq!(reader.len(), 100);
    let v = reader.get(57).unwrap();
    assert_eq!(&v, corpus.get(57).unwrap());
    assert_eq!(reader.touched().len(), 1);
    assert!(reader.touched().contains("shard-00005.vivs"));
}

#[test]
fn truncated_shard_is_a_structured_error() {
    let corpus = small_corpus(12, 5);
    let dir = tempfile::tempdir().unwrap();
    let paths = write_shards(&corpus, dir.path(), 6).unwrap();
    let bytes = std::fs::read(&paths[1]).unwrap();
    std::fs::write(&paths[1], &bytes[..bytes.len() - 100]).unwrap();
    match read_shards(dir.path()) {
        Err(Error::Format { path, record, .. }) => {
            assert_eq!(path, paths[1]);
            assert!(record.contains(&corpus.videos[11].video_id.to_string()), "{record}");
        }
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn empty_corpus_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert!(write_shards(&Corpus { videos: vec![] }, dir.path(), 10).is_err());
}

#[test]
fn batch_shape_and_labels() {
    let corpus = small_corpus(40, 6);
    let spec = BatchSpec::new(8, 4, 8, 32).unwrap();
    let b = sample_hierarchical_batch(&corpus, spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(b.frames.len(), 8 * 4 * 8 * 16 * 16 * 3);
    assert_eq!(b.exemplar_classes, (0..32).collect::<Vec<_>>());
    let mut ids = b.video_ids.clone();
    ids.sort_unstable();
    ids.dedup();
    assert_eq!(ids.len(), 8);
    for (i, &id) in b.video_ids.iter().enumerate() {
        let video = corpus.get(id).unwrap();
        let shots = video.shots();
        for k in 0..4 {
            let s = b.shot_indices[i * 4 + k];
            if k > 0 {
                assert_eq!(s, b.shot_indices[i * 4 + k - 1] + 1);
            }
            let f0 = b.frame_starts[i * 4 + k];
            let (start, len) = shots[s];
            assert!(f0 >= start && f0 + 8 <= start + len);
            let expect: Vec<f32> = (f0..f0 + 8)
                .flat_map(|t| video.frame(t).iter().map(|&v| f32::from(v) / 255.0))
                .collect();
            assert_eq!(b.shot(i, k), &expect[..]);
        }
    }
    assert!(BatchSpec::new(8, 4, 8, 16).is_err());
}

#[test]
fn short_videos_are_never_sampled() {
    let mut videos: Vec<VideoRecord> = (0..12).map(|i| flat_video(i, &[8, 8, 8, 8], 4)).collect();
    videos.push(flat_video(99, &[8, 8], 4));
    let corpus = Corpus { videos };
    let sampler = Sampler::new(&corpus, BatchSpec { n: 2, k: 4, l: 4 }).unwrap();
    assert_eq!(sampler.eligible_count(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10_000 {
        assert!(!sampler.sample(&mut rng).video_ids.contains(&99));
    }
    match Sampler::new(&corpus, BatchSpec { n: 13, k: 4, l: 4 }) {
        Err(Error::NotEnoughVideos { needed, eligible, total }) => assert_eq!((needed, eligible, total), (13, 12, 13)),
        other => panic!("unexpected {:?}", other.err()),
    }
}

/// Chi-square critical value via the Wilson-Hilferty approximation.
fn chi2_critical(df: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * df);
    df * (1.0 - a + z * a.sqrt()).powi(3)
}

#[test]
fn selection_is_uniform_over_eligible_videos() {
    let corpus = Corpus {
        videos: (0..100).map(|i| flat_video(i, &[4, 4, 4, 4], 2)).collect(),
    };
    let sampler = Sampler::new(&corpus, BatchSpec { n: 1, k: 4, l: 2 }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut counts: HashMap<u32, usize> = HashMap::new();
    let draws = 10_000;
    for _ in 0..draws {
        *counts.entry(sampler.sample(&mut rng).video_ids[0]).or_default() += 1;
    }
    let expected = draws as f64 / 100.0;
    let chi2: f64 = (0..100)
        .map(|i| {
            let o = *counts.get(&i).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    // upper 1% quantile, z = 2.3263
    assert!(chi2 < chi2_critical(99.0, 2.3263), "chi2 {chi2}");
}

#[test]
fn constant_and_alternating_videos() {
    let fl = 4 * 4 * 3;
    let constant = vec![77u8; 20 * fl];
    assert!(detect_shot_boundaries(&constant, fl, 3, 0.3).is_empty());
    let alternating: Vec<u8> = (0..20)
        .flat_map(|t| std::iter::repeat(if (t / 5) % 2 == 0 { 10u8 } else { 240 }).take(fl))
        .collect();
    assert_eq!(detect_shot_boundaries(&alternating, fl, 3, 0.3), vec![5, 10, 15]);
}

#[test]
fn histogram_distance_oracle() {
    let fl = 8 * 8 * 3;
    let a = vec![8u8; fl];
    let b = vec![8u8 + 16; fl];
    let (ha, hb) = (frame_histogram_u8(&a, 3), frame_histogram_u8(&b, 3));
    assert!((ha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    // all mass moves one bin in each channel: 3 * (1/3 + 1/3)
    assert!((l1_distance(&ha, &hb) - 2.0).abs() < 1e-12);
    let mut c = a.clone();
    for px in c.chunks_mut(3) {
        px[0] += 16;
    }
    assert!((l1_distance(&ha, &frame_histogram_u8(&c, 3)) - 2.0 / 3.0).abs() < 1e-12);
}

#[test]
fn boundary_recovery_on_generated_corpus() {
    let corpus = small_corpus(60, 8);
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for v in &corpus.videos {
        let found = detect_shot_boundaries(&v.frames, v.frame_len(), 3, vivi_core::pipeline::DEFAULT_THRESHOLD);
        let (a, b, c) = boundary_counts(&found, &v.boundaries);
        (tp, fp, fn_) = (tp + a, fp + b, fn_ + c);
    }
    assert!(f1_score(tp, fp, fn_) >= 0.95);
}

fn bin_centered_video(levels: &[u8], frames_per_level: usize, fl: usize) -> Vec<u8> {
    levels
        .iter()
        .flat_map(|&l| std::iter::repeat(l * 16 + 8).take(frames_per_level * fl))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn luminance_offset_below_a_bin_is_invisible(
        levels in prop::collection::vec(0u8..16, 2..8),
        offset in -7i16..=7,
    ) {
        let fl = 4 * 4 * 3;
        let video = bin_centered_video(&levels, 3, fl);
        let shifted: Vec<u8> = video.iter().map(|&v| (i16::from(v) + offset) as u8).collect();
        prop_assert_eq!(
            detect_shot_boundaries(&video, fl, 3, 0.3),
            detect_shot_boundaries(&shifted, fl, 3, 0.3)
        );
    }

    #[test]
    fn detected_boundaries_are_sorted_and_spaced(values in prop::collection::vec(any::<u8>(), 2..40)) {
        let fl = 2 * 2 * 3;
        let video: Vec<u8> = values.iter().flat_map(|&v| std::iter::repeat(v).take(fl)).collect();
        let b = detect_shot_boundaries(&video, fl, 3, 0.3);
        for w in b.windows(2) {
            prop_assert!(w[1] >= w[0] + 2);
        }
        prop_assert!(b.iter().all(|&t| t >= 1 && t < values.len()));
    }

    #[test]
    fn augment_stays_in_range_and_is_seeded(seed in any::<u64>(), hsv in any::<bool>()) {
        let n = 8;
        let base: Vec<f32> = (0..3 * n * n * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        let cfg = AugmentConfig { hsv_randomization: hsv, ..AugmentConfig::default() };
        let mut a = base.clone();
        let mut b = base.clone();
        augment(&mut a, n, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        augment(&mut b, n, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a, &b);
        prop_assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
        let mut id = base.clone();
        augment(&mut id, n, 3, &AugmentConfig::identity(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(id, base);
    }
}
