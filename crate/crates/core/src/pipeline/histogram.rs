pub const BINS: usize = 16;
pub const DEFAULT_THRESHOLD: f64 = 0.3;
/// A cut closer than this to the previous accepted one is suppressed.
pub const MIN_SHOT_LEN: usize = 2;

fn bin_of(v: f64) -> usize {
    ((v * BINS as f64).floor().max(0.0) as usize).min(BINS - 1)
}

/// Per-channel 16-bin histograms, concatenated and normalized to sum 1.
pub fn frame_histogram(frame: &[f64], channels: usize) -> Vec<f64> {
    let mut h = vec![0.0; BINS * channels];
    for px in frame.chunks(channels) {
        for (c, &v) in px.iter().enumerate() {
            h[c * BINS + bin_of(v)] += 1.0;
        }
    }
    normalize(h)
}

/// Same as [`frame_histogram`] for 8-bit pixels (`v / 255`).
pub fn frame_histogram_u8(frame: &[u8], channels: usize) -> Vec<f64> {
    let mut counts = vec![0u32; BINS * channels];
    for px in frame.chunks(channels) {
        for (c, &v) in px.iter().enumerate() {
            // floor(v / 255 * 16) == v >> 4 for every 8-bit value
            counts[c * BINS + (v >> 4) as usize] += 1;
        }
    }
    normalize(counts.into_iter().map(f64::from).collect())
}

fn normalize(mut h: Vec<f64>) -> Vec<f64> {
    let total: f64 = h.iter().sum();
    if total > 0.0 {
        h.iter_mut().for_each(|v| *v /= total);
    }
    h
}

pub fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Boundaries from a sequence of frame histograms.
pub fn boundaries_from_histograms(hists: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let mut out = Vec::new();
    let mut last = 0;
    for t in 1..hists.len() {
        if l1_distance(&hists[t - 1], &hists[t]) > threshold && t - last >= MIN_SHOT_LEN {
            out.push(t);
            last = t;
        }
    }
    out
}

/// Frame `t` starts a new shot when the L1 distance between the histograms
/// of frames `t − 1` and `t` exceeds `threshold`.
pub fn detect_shot_boundaries(frames: &[u8], frame_len: usize, channels: usize, threshold: f64) -> Vec<usize> {
    let hists: Vec<Vec<f64>> = frames
        .chunks_exact(frame_len)
        .map(|f| frame_histogram_u8(f, channels))
        .collect();
    boundaries_from_histograms(&hists, threshold)
}

/// True positives, false positives and misses (exact index match).
pub fn boundary_counts(detected: &[usize], truth: &[usize]) -> (usize, usize, usize) {
    let tp = detected.iter().filter(|d| truth.contains(d)).count();
    (tp, detected.len() - tp, truth.len() - tp)
}

pub fn f1_score(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 && fp == 0 && fn_ == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gray_frame_has_one_bin_per_channel() {
        let h = frame_histogram(&[0.5; 30], 3);
        assert_eq!(h.iter().filter(|&&v| v > 0.0).count(), 3);
        for c in 0..3 {
            assert_eq!(h[c * BINS + 8], 1.0 / 3.0);
        }
    }

    #[test]
    fn one_bin_shift_costs_two_thirds() {
        let a = frame_histogram(&[0.1, 0.5, 0.9].repeat(4), 3);
        let b = frame_histogram(&[0.1 + 1.0 / 16.0, 0.5, 0.9].repeat(4), 3);
        assert!((l1_distance(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn u8_matches_real_valued_binning() {
        let px: Vec<u8> = (0..=255).collect();
        let real: Vec<f64> = px.iter().map(|&v| v as f64 / 255.0).collect();
        assert_eq!(frame_histogram_u8(&px, 1), frame_histogram(&real, 1));
    }

    #[test]
    fn alternating_colors() {
        let mut frames = Vec::new();
        for t in 0..20 {
            let v = if (t / 5) % 2 == 0 { 20 } else { 200 };
            frames.extend([v; 12]);
        }
        assert_eq!(detect_shot_boundaries(&frames, 12, 3, DEFAULT_THRESHOLD), vec![5, 10, 15]);
        assert!(detect_shot_boundaries(&[7u8; 120], 12, 3, DEFAULT_THRESHOLD).is_empty());
    }

    #[test]
    fn suppresses_one_frame_shots() {
        let mut frames = Vec::new();
        for v in [10u8, 10, 200, 10, 10, 10] {
            frames.extend([v; 3]);
        }
        assert_eq!(detect_shot_boundaries(&frames, 3, 3, DEFAULT_THRESHOLD), vec![2]);
    }
}
