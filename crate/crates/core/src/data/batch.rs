use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::manifest::Corpus;
use crate::error::{Error, Result};
use crate::numerics::{Mode, Tensor};
use crate::rng::{self, tags};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchPlan {
    pub mode: Mode,
    pub batch_size: usize,
    /// Train-mode crop length; longer videos are cut to a random window.
    pub max_frames: Option<usize>,
    pub seed: u64,
    pub epoch: u64,
}

/// Videos padded to a common length. Rows are `video * frames + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<S> {
    pub video_indices: Vec<usize>,
    pub video_ids: Vec<String>,
    pub frames: usize,
    /// `[B·T, D0]`
    pub features: Tensor<S>,
    /// `[B·T, C]`
    pub targets: Tensor<S>,
    pub mask: Vec<bool>,
    /// First source frame of each video (non-zero only when cropped).
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
}

impl<S: Scalar> Batch<S> {
    pub fn videos(&self) -> usize {
        self.video_ids.len()
    }

    pub fn valid_frames(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Splits `indices` into padded batches. Train mode shuffles the order and
/// crops long videos, both from `(seed, epoch)`; eval mode keeps the given
/// order and never crops.
pub fn make_batches<S: Scalar>(corpus: &Corpus, indices: &[usize], plan: &BatchPlan) -> Result<Vec<Batch<S>>> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if plan.max_frames == Some(0) {
        return Err(Error::Config("max_frames must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    let mut crop_rng = rng::stream(plan.seed, &[tags::CROP, plan.epoch]);
    if plan.mode == Mode::Train {
        order.shuffle(&mut rng::stream(plan.seed, &[tags::SHUFFLE, plan.epoch]));
    }
    let d0 = corpus.feature_dim;
    let c = corpus.class_count;
    let mut out = Vec::with_capacity(order.len().div_ceil(plan.batch_size));
    for chunk in order.chunks(plan.batch_size) {
        let mut offsets = Vec::with_capacity(chunk.len());
        let mut lengths = Vec::with_capacity(chunk.len());
        for &vi in chunk {
            let total = corpus.videos[vi].frames();
            match plan.max_frames {
                Some(max) if plan.mode == Mode::Train && total > max => {
                    offsets.push(crop_rng.random_range(0..=total - max));
                    lengths.push(max);
                }
                _ => {
                    offsets.push(0);
                    lengths.push(total);
                }
            }
        }
        let frames = *lengths.iter().max().unwrap();
        let rows = chunk.len() * frames;
        let mut features = vec![S::zero(); rows * d0];
        let mut targets = vec![S::zero(); rows * c];
        let mut mask = vec![false; rows];
        for (b, &vi) in chunk.iter().enumerate() {
            let video = &corpus.videos[vi];
            for t in 0..lengths[b] {
                let src = offsets[b] + t;
                let row = b * frames + t;
                mask[row] = true;
                for (dst, &v) in features[row * d0..(row + 1) * d0].iter_mut().zip(video.features.row(src)) {
                    *dst = S::of(v as f64);
                }
                for (dst, &on) in targets[row * c..(row + 1) * c].iter_mut().zip(video.dense.row(src)) {
                    if on {
                        *dst = S::one();
                    }
                }
            }
        }
        out.push(Batch {
            video_indices: chunk.to_vec(),
            video_ids: chunk.iter().map(|&i| corpus.videos[i].id().to_string()).collect(),
            frames,
            features: Tensor::new([rows, d0], features)?,
            targets: Tensor::new([rows, c], targets)?,
            mask,
            offsets,
            lengths,
        });
    }
    Ok(out)
}
