//! Per-attribute extractors and the anchor-matching objective.

use rand::Rng;

use crate::data::AnchorSet;
use crate::error::{Error, Result};
use crate::numerics::{BatchStats, Mode, Tape, Tensor, Var, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};
use crate::params::Bindings;
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// `N` filters `D0 → D0` stored side by side as one `[D0, N·D0]` matrix,
/// followed by batch normalization over all `N·D0` output channels, which is
/// the same as `N` independent per-attribute normalizations.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributeExtractor<S> {
    pub attributes: usize,
    pub dim: usize,
    pub batch_norm: bool,
    pub weight: Tensor<S>,
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
    pub running_mean: Tensor<S>,
    pub running_var: Tensor<S>,
}

impl<S: Scalar> AttributeExtractor<S> {
    pub fn zeros(attributes: usize, dim: usize, batch_norm: bool) -> Self {
        let channels = attributes * dim;
        Self {
            attributes,
            dim,
            batch_norm,
            weight: Tensor::zeros([dim, channels]),
            gain: Tensor::full([channels], S::one()),
            bias: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], S::one()),
        }
    }

    pub fn init(attributes: usize, dim: usize, batch_norm: bool, rng: &mut impl Rng) -> Self {
        let mut out = Self::zeros(attributes, dim, batch_norm);
        let bound = 1.0 / (dim as f64).sqrt();
        out.gain = Tensor::full([attributes * dim], S::of(bound));
        for w in out.weight.data_mut() {
            *w = S::of(rng.random_range(-bound..bound));
        }
        out
    }

    /// Filter of one attribute as a `[D0, D0]` matrix in `x · W` form.
    pub fn filter(&self, attribute: usize) -> Tensor<S> {
        let (d, stride) = (self.dim, self.attributes * self.dim);
        let w = self.weight.data();
        Tensor::from_fn([d, d], |i| w[(i / d) * stride + attribute * d + i % d])
    }

    pub fn set_filter(&mut self, attribute: usize, filter: &Tensor<S>) {
        let (d, stride) = (self.dim, self.attributes * self.dim);
        let w = self.weight.data_mut();
        for (i, &v) in filter.data().iter().enumerate() {
            w[(i / d) * stride + attribute * d + i % d] = v;
        }
    }

    /// `features: [R, D0]` to attribute features `[R, N, D0]`. Train mode
    /// also returns the batch statistics for [`Self::update_running`].
    pub fn extract(
        &self,
        tape: &mut Tape<S>,
        bindings: &mut Bindings,
        prefix: &str,
        features: Var,
        mask: &[bool],
        mode: Mode,
    ) -> Result<(Var, Option<BatchStats<S>>)> {
        let fs = tape.shape(features).to_vec();
        if fs.len() != 2 || fs[1] != self.dim {
            return Err(Error::Shape {
                op: "extract_attributes",
                lhs: fs,
                rhs: vec![self.dim],
            });
        }
        let rows = fs[0];
        let w = bindings.bind(tape, format!("{prefix}.weight"), &self.weight);
        let mut h = tape.affine(features, w, None)?;
        let mut stats = None;
        if self.batch_norm {
            let g = bindings.bind(tape, format!("{prefix}.bn.gain"), &self.gain);
            let b = bindings.bind(tape, format!("{prefix}.bn.bias"), &self.bias);
            let eps = S::of(BATCH_NORM_EPS);
            h = match mode {
                Mode::Train => {
                    let (y, s) = tape.batch_norm_train(h, g, b, mask, eps)?;
                    stats = Some(s);
                    y
                }
                Mode::Eval => tape.batch_norm_eval(
                    h,
                    g,
                    b,
                    self.running_mean.data(),
                    self.running_var.data(),
                    eps,
                )?,
            };
        }
        let h = tape.relu(h);
        Ok((tape.reshape(h, [rows, self.attributes, self.dim])?, stats))
    }

    pub fn update_running(&mut self, stats: &BatchStats<S>) {
        let m = S::of(BATCH_NORM_MOMENTUM);
        let keep = S::one() - m;
        for (r, &s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
    }

    /// Reorders attributes so that new attribute `i` is old attribute `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let d = self.dim;
        let cols = |t: &Tensor<S>, rows: usize| {
            let stride = self.attributes * d;
            let v = t.data();
            Tensor::new(
                t.shape().to_vec(),
                (0..rows * stride)
                    .map(|i| {
                        let (r, c) = (i / stride, i % stride);
                        v[r * stride + perm[c / d] * d + c % d]
                    })
                    .collect(),
            )
            .expect("same shape")
        };
        Self {
            attributes: self.attributes,
            dim: d,
            batch_norm: self.batch_norm,
            weight: cols(&self.weight, d),
            gain: cols(&self.gain, 1),
            bias: cols(&self.bias, 1),
            running_mean: cols(&self.running_mean, 1),
            running_var: cols(&self.running_var, 1),
        }
    }
}

/// Prompt used for one video: pseudo-random per `(seed, epoch, video)` in
/// train mode, always the first prompt in eval mode.
pub fn select_anchor_prompt(anchors: &AnchorSet, mode: Mode, seed: u64, epoch: u64, video_id: &str) -> usize {
    let prompts = anchors.prompt_count();
    match mode {
        Mode::Eval => 0,
        Mode::Train if prompts <= 1 => 0,
        Mode::Train => {
            rng::stream(seed, &[tags::PROMPT, epoch, rng::hash_str(video_id)]).random_range(0..prompts)
        }
    }
}

/// `[N, D0]` anchors of one prompt, optionally scaled to unit length.
pub fn anchor_matrix<S: Scalar>(anchors: &AnchorSet, prompt: usize, unit_norm: bool) -> Tensor<S> {
    let (n, d) = (anchors.attribute_count(), anchors.dim);
    let mut data = Vec::with_capacity(n * d);
    for a in 0..n {
        let v = anchors.anchor(a, prompt);
        let scale = if unit_norm {
            1.0 / v.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
        } else {
            1.0
        };
        data.extend(v.iter().map(|&x| S::of(x as f64 * scale)));
    }
    Tensor::new([n, d], data).expect("anchor set is rectangular")
}

/// Stacked `[B, N, D0]` anchors, one selected prompt per video.
pub fn batch_anchors<S: Scalar>(
    anchors: &AnchorSet,
    video_ids: &[String],
    mode: Mode,
    seed: u64,
    epoch: u64,
    unit_norm: bool,
) -> Tensor<S> {
    let (n, d) = (anchors.attribute_count(), anchors.dim);
    let mut data = Vec::with_capacity(video_ids.len() * n * d);
    for id in video_ids {
        let p = select_anchor_prompt(anchors, mode, seed, epoch, id);
        data.extend(anchor_matrix::<S>(anchors, p, unit_norm).into_data());
    }
    Tensor::new([video_ids.len(), n, d], data).expect("anchor set is rectangular")
}

/// Mean squared distance of each valid frame's attribute features to the
/// anchors; `anchors` is `[N, D0]` or one `[N, D0]` block per video.
pub fn attribute_loss<S: Scalar>(tape: &mut Tape<S>, attributes: Var, anchors: &Tensor<S>, mask: &[bool]) -> Result<Var> {
    tape.mse_to_anchor(attributes, anchors, mask)
}
