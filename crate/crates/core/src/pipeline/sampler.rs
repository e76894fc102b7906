use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::videogen::Corpus;

/// `N` videos × `K` consecutive shots × `L` consecutive frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub n: usize,
    pub k: usize,
    pub l: usize,
}

impl BatchSpec {
    pub fn new(n: usize, k: usize, l: usize, product: usize) -> Result<Self> {
        let s = Self { n, k, l };
        s.validate(product)?;
        Ok(s)
    }

    pub fn validate(&self, product: usize) -> Result<()> {
        if self.n * self.k != product {
            return Err(Error::Config(format!(
                "N·K = {}·{} = {} must equal the configured product {product}",
                self.n,
                self.k,
                self.n * self.k
            )));
        }
        if self.l == 0 || self.k == 0 || self.n == 0 {
            return Err(Error::Config("N, K and L must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HierBatch {
    pub spec: BatchSpec,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// `N × K × L × H × W × C` in `[0, 1]`.
    pub frames: Vec<f32>,
    /// One class per (video, shot), row-major over `(N, K)`.
    pub exemplar_classes: Vec<usize>,
    pub video_ids: Vec<u32>,
    /// Source shot index per (video, shot).
    pub shot_indices: Vec<usize>,
    /// Source frame index of the first sampled frame per (video, shot).
    pub frame_starts: Vec<usize>,
}

impl HierBatch {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// Frames of shot `(i, k)`, `L × H × W × C`.
    pub fn shot(&self, i: usize, k: usize) -> &[f32] {
        let n = self.spec.l * self.frame_len();
        let s = i * self.spec.k + k;
        &self.frames[s * n..(s + 1) * n]
    }
}

/// Eligibility of every video for one batch shape, computed once.
pub struct Sampler<'a> {
    corpus: &'a Corpus,
    spec: BatchSpec,
    /// `(video position, valid first-shot offsets)`.
    eligible: Vec<(usize, Vec<usize>)>,
}

impl<'a> Sampler<'a> {
    pub fn new(corpus: &'a Corpus, spec: BatchSpec) -> Result<Self> {
        let eligible: Vec<(usize, Vec<usize>)> = corpus
            .videos
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let shots = v.shots();
                if shots.len() < spec.k {
                    return None;
                }
                let starts: Vec<usize> = (0..=shots.len() - spec.k)
                    .filter(|&s| shots[s..s + spec.k].iter().all(|&(_, len)| len >= spec.l))
                    .collect();
                (!starts.is_empty()).then_some((i, starts))
            })
            .collect();
        if eligible.len() < spec.n {
            return Err(Error::NotEnoughVideos {
                needed: spec.n,
                eligible: eligible.len(),
                total: corpus.len(),
            });
        }
        let first = &corpus.videos[eligible[0].0];
        if corpus
            .videos
            .iter()
            .any(|v| (v.height, v.width, v.channels) != (first.height, first.width, first.channels))
        {
            return Err(Error::invalid("corpus mixes frame sizes"));
        }
        Ok(Self { corpus, spec, eligible })
    }

    pub fn eligible_count(&self) -> usize {
        self.eligible.len()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> HierBatch {
        let BatchSpec { n, k, l } = self.spec;
        let first = &self.corpus.videos[self.eligible[0].0];
        let (h, w, c) = (first.height, first.width, first.channels);
        let frame_len = h * w * c;
        let mut batch = HierBatch {
            spec: self.spec,
            height: h,
            width: w,
            channels: c,
            frames: Vec::with_capacity(n * k * l * frame_len),
            exemplar_classes: (0..n * k).collect(),
            video_ids: Vec::with_capacity(n),
            shot_indices: Vec::with_capacity(n * k),
            frame_starts: Vec::with_capacity(n * k),
        };
        for pick in sample(rng, self.eligible.len(), n) {
            let (vi, starts) = &self.eligible[pick];
            let video = &self.corpus.videos[*vi];
            let shots = video.shots();
            let s0 = starts[rng.gen_range(0..starts.len())];
            batch.video_ids.push(video.video_id);
            for s in s0..s0 + k {
                let (start, len) = shots[s];
                let f0 = start + rng.gen_range(0..=len - l);
                batch.shot_indices.push(s);
                batch.frame_starts.push(f0);
                let px = &video.frames[f0 * frame_len..(f0 + l) * frame_len];
                batch.frames.extend(px.iter().map(|&v| f32::from(v) / 255.0));
            }
        }
        batch
    }
}

pub fn sample_hierarchical_batch<R: Rng>(corpus: &Corpus, spec: BatchSpec, rng: &mut R) -> Result<HierBatch> {
    Ok(Sampler::new(corpus, spec)?.sample(rng))
}
