use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attributes::{attribute_loss, AttributeExtractor};
use crate::error::{Error, Result};
use crate::graph::ops::{self, TemporalMixVars};
use crate::graph::prior::CoOccurrencePrior;
use crate::numerics::{BatchStats, Mode, Tape, Tensor, Var};
use crate::params::Bindings;
use crate::rng::{self, tags};
use crate::scalar::Scalar;

/// Which parts of the network are wired in.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Extractor and bottleneck, pooled straight into the classifier.
    ExtractorOnly,
    /// A linear classifier on the raw frame features.
    LinearBaseline,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Variant::Full),
            "extractor-only" => Ok(Variant::ExtractorOnly),
            "linear-baseline" => Ok(Variant::LinearBaseline),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub attributes: usize,
    pub classes: usize,
    pub blocks: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub variant: Variant,
    /// Use the prior alone as the adjacency.
    pub disable_attention: bool,
    /// Skip the temporal branch of every block.
    pub disable_temporal: bool,
    pub batch_norm: bool,
    pub mix_bias: bool,
    pub unit_anchors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 16,
            attributes: 8,
            classes: 10,
            blocks: 2,
            heads: 4,
            kernel_size: 3,
            variant: Variant::Full,
            disable_attention: false,
            disable_temporal: false,
            batch_norm: true,
            mix_bias: true,
            unit_anchors: false,
        }
    }

    pub fn paper() -> Self {
        Self {
            feature_dim: 768,
            hidden_dim: 256,
            attributes: 38,
            classes: 157,
            blocks: 5,
            heads: 4,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden_dim", self.hidden_dim),
            ("attributes", self.attributes),
            ("classes", self.classes),
            ("heads", self.heads),
            ("kernel_size", self.kernel_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!(
                "temporal kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    fn classifier_inputs(&self) -> usize {
        match self.variant {
            Variant::LinearBaseline => self.feature_dim,
            _ => self.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GraphBlock<S> {
    /// `[H, dh, dh]`
    pub query: Tensor<S>,
    pub key: Tensor<S>,
    pub propagate: Tensor<S>,
    /// `[D1, D1]`
    pub mix_in: Tensor<S>,
    pub mix_in_bias: Tensor<S>,
    /// `[D1, k]`
    pub kernel: Tensor<S>,
    pub mix_out: Tensor<S>,
    pub mix_out_bias: Tensor<S>,
}

fn uniform<S: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape.to_vec(), |_| S::of(rng.random_range(-bound..bound)))
}

impl<S: Scalar> GraphBlock<S> {
    fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (h, dh, d, k) = (config.heads, config.head_dim(), config.hidden_dim, config.kernel_size);
        let centre = k / 2;
        let kernel = Tensor::from_fn([d, k], |i| {
            let noise = rng.random_range(-0.01..0.01);
            S::of(if i % k == centre { 1.0 + noise } else { noise })
        });
        Self {
            query: uniform(&[h, dh, dh], dh, rng),
            key: uniform(&[h, dh, dh], dh, rng),
            propagate: uniform(&[h, dh, dh], dh, rng),
            mix_in: uniform(&[d, d], d, rng),
            mix_in_bias: Tensor::zeros([d]),
            kernel,
            mix_out: uniform(&[d, d], d, rng),
            mix_out_bias: Tensor::zeros([d]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Parameter,
    /// Non-learned state: normalization statistics and the prior.
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub config: ModelConfig,
    pub extractor: AttributeExtractor<S>,
    /// `[D0, D1]`
    pub bottleneck: Tensor<S>,
    pub blocks: Vec<GraphBlock<S>>,
    /// `[D1, C]`, or `[D0, C]` for the linear baseline.
    pub classifier: Tensor<S>,
    pub classifier_bias: Tensor<S>,
    /// `[N, N]`
    pub prior: Tensor<S>,
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward<S> {
    /// `[R, C]`
    pub logits: Var,
    /// `[R, N, D0]`, absent for the linear baseline.
    pub attributes: Option<Var>,
    pub stats: Option<BatchStats<S>>,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub action: Var,
    pub attributes: Option<Var>,
}

macro_rules! each_tensor {
    ($model:ident, $f:ident, $iter:ident $(, $m:ident)?) => {{
        use TensorKind::{Buffer, Parameter};
        $f("extractor.weight", Parameter, & $($m)? $model.extractor.weight);
        $f("extractor.bn.gain", Parameter, & $($m)? $model.extractor.gain);
        $f("extractor.bn.bias", Parameter, & $($m)? $model.extractor.bias);
        $f("extractor.bn.running_mean", Buffer, & $($m)? $model.extractor.running_mean);
        $f("extractor.bn.running_var", Buffer, & $($m)? $model.extractor.running_var);
        $f("bottleneck.weight", Parameter, & $($m)? $model.bottleneck);
        for (i, b) in $model.blocks.$iter().enumerate() {
            $f(&format!("blocks.{i}.attention.query"), Parameter, & $($m)? b.query);
            $f(&format!("blocks.{i}.attention.key"), Parameter, & $($m)? b.key);
            $f(&format!("blocks.{i}.propagate"), Parameter, & $($m)? b.propagate);
            $f(&format!("blocks.{i}.mix_in.weight"), Parameter, & $($m)? b.mix_in);
            $f(&format!("blocks.{i}.mix_in.bias"), Parameter, & $($m)? b.mix_in_bias);
            $f(&format!("blocks.{i}.temporal.kernel"), Parameter, & $($m)? b.kernel);
            $f(&format!("blocks.{i}.mix_out.weight"), Parameter, & $($m)? b.mix_out);
            $f(&format!("blocks.{i}.mix_out.bias"), Parameter, & $($m)? b.mix_out_bias);
        }
        $f("classifier.weight", Parameter, & $($m)? $model.classifier);
        $f("classifier.bias", Parameter, & $($m)? $model.classifier_bias);
        $f("prior", Buffer, & $($m)? $model.prior);
    }};
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters drawn from the `INIT` stream of `seed`.
    pub fn init(config: ModelConfig, prior: &CoOccurrencePrior, seed: u64) -> Result<Self> {
        config.validate()?;
        if prior.attributes != config.attributes {
            return Err(Error::Config(format!(
                "prior covers {} attributes, the model {}",
                prior.attributes, config.attributes
            )));
        }
        let mut rng = rng::stream(seed, &[tags::INIT]);
        let (d0, d1) = (config.feature_dim, config.hidden_dim);
        let extractor = AttributeExtractor::init(config.attributes, d0, config.batch_norm, &mut rng);
        let bottleneck = uniform(&[d0, d1], d0, &mut rng);
        let blocks = (0..config.blocks).map(|_| GraphBlock::init(&config, &mut rng)).collect();
        let fan_in = config.classifier_inputs();
        let classifier = uniform(&[fan_in, config.classes], fan_in, &mut rng);
        Ok(Self {
            extractor,
            bottleneck,
            blocks,
            classifier,
            classifier_bias: Tensor::zeros([config.classes]),
            prior: prior.tensor(),
            config,
        })
    }

    pub fn visit<'a>(&'a self, mut f: impl FnMut(&str, TensorKind, &'a Tensor<S>)) {
        each_tensor!(self, f, iter);
    }

    pub fn visit_mut<'a>(&'a mut self, mut f: impl FnMut(&str, TensorKind, &'a mut Tensor<S>)) {
        each_tensor!(self, f, iter_mut, mut);
    }

    /// Learnable tensors by name.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor<S>)> {
        let mut out = Vec::new();
        self.visit_mut(|n, kind, t| {
            if kind == TensorKind::Parameter {
                out.push((n.to_string(), t))
            }
        });
        out
    }

    /// Names and shapes of every stored tensor, in a fixed order.
    pub fn shape_table(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        self.visit(|n, _, t| out.push((n.to_string(), t.shape().to_vec())));
        out
    }

    pub fn parameter_count(&self) -> usize {
        let mut total = 0;
        self.visit(|_, kind, t| {
            if kind == TensorKind::Parameter {
                total += t.numel()
            }
        });
        total
    }

    /// Full pass over a padded batch. `features: [B·T, D0]`, `mask: [B·T]`.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bindings: &mut Bindings,
        features: &Tensor<S>,
        mask: &[bool],
        videos: usize,
        mode: Mode,
    ) -> Result<Forward<S>> {
        let c = &self.config;
        let x = tape.constant(features.clone());
        let w_cls = bindings.bind(tape, "classifier.weight", &self.classifier);
        let b_cls = bindings.bind(tape, "classifier.bias", &self.classifier_bias);
        if c.variant == Variant::LinearBaseline {
            return Ok(Forward {
                logits: tape.affine(x, w_cls, Some(b_cls))?,
                attributes: None,
                stats: None,
            });
        }
        let (attrs, stats) = self.extractor.extract(tape, bindings, "extractor", x, mask, mode)?;
        let w_b = bindings.bind(tape, "bottleneck.weight", &self.bottleneck);
        let mut h = ops::bottleneck(tape, attrs, w_b)?;
        if c.variant == Variant::Full {
            let prior = tape.constant(self.prior.clone());
            for (i, block) in self.blocks.iter().enumerate() {
                h = self.block_forward(tape, bindings, i, block, h, prior, videos, mask)?;
            }
        }
        Ok(Forward {
            logits: ops::classify(tape, h, w_cls, b_cls)?,
            attributes: Some(attrs),
            stats,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape<S>,
        bindings: &mut Bindings,
        index: usize,
        block: &GraphBlock<S>,
        x: Var,
        prior: Var,
        videos: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let c = &self.config;
        let n = c.attributes;
        let name = |s: &str| format!("blocks.{index}.{s}");
        let xh = ops::split_heads(tape, x, c.heads)?;
        let adjacency = if c.disable_attention {
            ops::prior_adjacency(tape, xh, prior, n)?
        } else {
            let q = bindings.bind(tape, name("attention.query"), &block.query);
            let k = bindings.bind(tape, name("attention.key"), &block.key);
            ops::attention_adjacency(tape, xh, q, k, prior, n)?
        };
        let w3 = bindings.bind(tape, name("propagate"), &block.propagate);
        let conv = ops::graph_conv(tape, xh, adjacency, w3)?;
        let merged = ops::merge_heads(tape, conv, n)?;
        if c.disable_temporal {
            return Ok(merged);
        }
        let mut bias = |tape: &mut Tape<S>, s: &str, t: &Tensor<S>| c.mix_bias.then(|| bindings.bind(tape, name(s), t));
        let mix_in_bias = bias(tape, "mix_in.bias", &block.mix_in_bias);
        let mix_out_bias = bias(tape, "mix_out.bias", &block.mix_out_bias);
        let vars = TemporalMixVars {
            mix_in: bindings.bind(tape, name("mix_in.weight"), &block.mix_in),
            mix_in_bias,
            kernel: bindings.bind(tape, name("temporal.kernel"), &block.kernel),
            mix_out: bindings.bind(tape, name("mix_out.weight"), &block.mix_out),
            mix_out_bias,
        };
        ops::temporal_mix(tape, merged, &vars, videos, mask)
    }

    /// New node `i` is old node `perm[i]`; shared weights are untouched.
    pub fn permute_attributes(&self, perm: &[usize]) -> Result<Self> {
        let n = self.config.attributes;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Config(format!("{perm:?} is not a permutation of {n} attributes")));
        }
        let p = self.prior.data();
        let mut out = self.clone();
        out.extractor = self.extractor.permuted(perm);
        out.prior = Tensor::from_fn([n, n], |k| p[perm[k / n] * n + perm[k % n]]);
        Ok(out)
    }
}

/// `action + weight · attributes`; the attribute term is omitted when the
/// model produced no attribute features.
#[allow(clippy::too_many_arguments)]
pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    targets: &Tensor<S>,
    attributes: Option<Var>,
    anchors: &Tensor<S>,
    mask: &[bool],
    weight: S,
) -> Result<LossParts> {
    let action = tape.bce_with_logits(logits, targets, mask)?;
    let Some(attrs) = attributes else {
        return Ok(LossParts {
            total: action,
            action,
            attributes: None,
        });
    };
    let attr = attribute_loss(tape, attrs, anchors, mask)?;
    let weighted = if weight == S::one() { attr } else { tape.scale(attr, weight) };
    Ok(LossParts {
        total: tape.add(action, weighted)?,
        action,
        attributes: Some(attr),
    })
}
