//! Finite-difference gradient checks over every differentiable operation
//! and the composed training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::ops::{self, TemporalMixVars};
use crate::graph::{total_loss, CoOccurrencePrior, Model, ModelConfig, TensorKind};
use crate::numerics::grad_check_on;
use crate::numerics::{GradCheckReport, Mode, Tape, Tensor, Var, BATCH_NORM_EPS};
use crate::params::Bindings;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    pub seed: u64,
    pub videos: usize,
    pub frames: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub attributes: usize,
    pub classes: usize,
    pub blocks: usize,
    pub heads: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Run every check on tapes whose ReLU backward is deliberately wrong.
    #[serde(skip)]
    pub inject_fault: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            videos: 2,
            frames: 4,
            feature_dim: 6,
            hidden_dim: 4,
            attributes: 3,
            classes: 2,
            blocks: 2,
            heads: 2,
            step: DEFAULT_STEP,
            tolerance: DEFAULT_TOLERANCE,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub name: &'static str,
    #[serde(flatten)]
    pub report: GradCheckReport,
}

struct Suite {
    cfg: SuiteConfig,
    rng: ChaCha8Rng,
    out: Vec<OpCheck>,
}

impl Suite {
    fn uniform(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    fn normal(&mut self, shape: &[usize]) -> Tensor<f64> {
        self.uniform(shape, -1.0, 1.0)
    }

    fn check<F>(&mut self, name: &'static str, inputs: &[Tensor<f64>], f: F) -> Result<()>
    where
        F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
    {
        let fault = self.cfg.inject_fault;
        let report = grad_check_on(inputs, f, self.cfg.step, self.cfg.tolerance, move || {
            if fault {
                Tape::with_injected_fault()
            } else {
                Tape::new()
            }
        })?;
        self.out.push(OpCheck { name, report });
        Ok(())
    }
}

/// `Σ y ⊙ weights`, a generic scalar read-out that keeps every output
/// coordinate's gradient distinct.
fn readout(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Runs all checks; the caller decides what to do with failures.
pub fn gradient_suite(cfg: &SuiteConfig) -> Result<Vec<OpCheck>> {
    let mut s = Suite {
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        out: Vec::new(),
    };
    let (b, t, d0, d1, n, c, h) = (
        cfg.videos,
        cfg.frames,
        cfg.feature_dim,
        cfg.hidden_dim,
        cfg.attributes,
        cfg.classes,
        cfg.heads,
    );
    let r = b * t;
    let mut mask = vec![true; r];
    if r > 2 {
        mask[r - 1] = false;
    }

    let (x, w, bias, ro) = (s.normal(&[3, 4]), s.normal(&[4, 2]), s.normal(&[2]), s.normal(&[3, 2]));
    s.check("affine", &[x, w, bias], |tp, v| {
        let y = tp.affine(v[0], v[1], Some(v[2]))?;
        readout(tp, y, &ro)
    })?;

    let (x, ro) = (s.normal(&[4, 5]), s.normal(&[4, 5]));
    s.check("relu", &[x], |tp, v| {
        let y = tp.relu(v[0]);
        readout(tp, y, &ro)
    })?;

    let (x, ro) = (s.normal(&[4, 5]), s.normal(&[4, 5]));
    s.check("sigmoid", &[x], |tp, v| {
        let y = tp.sigmoid(v[0]);
        readout(tp, y, &ro)
    })?;

    let (x, y, ro) = (s.normal(&[2, 3, 4]), s.normal(&[2, 3, 4]), s.normal(&[2, 3, 4]));
    let cb = s.normal(&[3, 4]);
    s.check("elementwise", &[x, y, cb], |tp, v| {
        let a = tp.add(v[0], v[1])?;
        let m = tp.mul(a, v[0])?;
        let k = tp.add_broadcast(m, v[2])?;
        let k = tp.scale(k, 0.7);
        readout(tp, k, &ro)
    })?;

    let (x, ro) = (s.normal(&[2, 3, 4]), s.normal(&[4, 2, 3]));
    s.check("reshape_permute", &[x], |tp, v| {
        let p = tp.permute(v[0], &[2, 0, 1])?;
        let p = tp.reshape(p, [4, 6])?;
        let p = tp.reshape(p, [4, 2, 3])?;
        readout(tp, p, &ro)
    })?;

    let (a, bm, ro) = (s.normal(&[2, 3, 4]), s.normal(&[2, 4, 5]), s.normal(&[2, 3, 5]));
    s.check("bmm", &[a, bm], |tp, v| {
        let y = tp.bmm(v[0], v[1], false)?;
        readout(tp, y, &ro)
    })?;
    let (a, bm, ro) = (s.normal(&[2, 3, 4]), s.normal(&[2, 5, 4]), s.normal(&[2, 3, 5]));
    s.check("bmm_transposed", &[a, bm], |tp, v| {
        let y = tp.bmm(v[0], v[1], true)?;
        readout(tp, y, &ro)
    })?;

    let (x, ro) = (s.uniform(&[3, 4], -3.0, 3.0), s.normal(&[3, 4]));
    s.check("softmax_lastaxis", &[x], |tp, v| {
        let y = tp.softmax_lastaxis(v[0])?;
        readout(tp, y, &ro)
    })?;

    let (x, g, bb, ro) = (s.normal(&[r, 3]), s.uniform(&[3], 0.5, 1.5), s.normal(&[3]), s.normal(&[r, 3]));
    let bn_mask = mask.clone();
    s.check("batch_norm_train", &[x, g, bb], |tp, v| {
        let (y, _) = tp.batch_norm_train(v[0], v[1], v[2], &bn_mask, BATCH_NORM_EPS)?;
        readout(tp, y, &ro)
    })?;

    let (x, g, bb, ro) = (s.normal(&[r, 3]), s.uniform(&[3], 0.5, 1.5), s.normal(&[3]), s.normal(&[r, 3]));
    let (rm, rv) = (s.normal(&[3]).into_data(), s.uniform(&[3], 0.5, 2.0).into_data());
    s.check("batch_norm_eval", &[x, g, bb], |tp, v| {
        let y = tp.batch_norm_eval(v[0], v[1], v[2], &rm, &rv, BATCH_NORM_EPS)?;
        readout(tp, y, &ro)
    })?;

    let (x, k, ro) = (s.normal(&[b, t, 2, 3]), s.normal(&[3, 3]), s.normal(&[b, t, 2, 3]));
    let conv_mask = mask.clone();
    s.check("depthwise_temporal_conv", &[x, k], |tp, v| {
        let y = tp.depthwise_temporal_conv(v[0], v[1], &conv_mask)?;
        readout(tp, y, &ro)
    })?;

    let (x, ro) = (s.normal(&[r, n, 3]), s.normal(&[r, 3]));
    s.check("mean_pool_nodes", &[x], |tp, v| {
        let y = tp.mean_pool_nodes(v[0])?;
        readout(tp, y, &ro)
    })?;

    let logits = s.uniform(&[r, c], -3.0, 3.0);
    let targets = Tensor::from_fn([r, c], |i| ((i * 7 + 3) % 3 == 0) as u8 as f64);
    let bce_mask = mask.clone();
    s.check("bce_with_logits", &[logits], |tp, v| tp.bce_with_logits(v[0], &targets, &bce_mask))?;

    let (inp, anchors) = (s.normal(&[r, n, d0]), s.normal(&[b, n, d0]));
    let mse_mask = mask.clone();
    s.check("mse_to_anchor", &[inp], |tp, v| tp.mse_to_anchor(v[0], &anchors, &mse_mask))?;

    let (i, wb, ro) = (s.normal(&[r, n, d0]), s.normal(&[d0, d1]), s.normal(&[r, n, d1]));
    s.check("bottleneck", &[i, wb], |tp, v| {
        let y = ops::bottleneck(tp, v[0], v[1])?;
        readout(tp, y, &ro)
    })?;

    let dh = d1 / h;
    let prior = s.uniform(&[n, n], 0.0, 1.0);
    let (x, q, k, w3, ro) = (
        s.normal(&[r, n, d1]),
        s.normal(&[h, dh, dh]),
        s.normal(&[h, dh, dh]),
        s.normal(&[h, dh, dh]),
        s.normal(&[r, n, d1]),
    );
    s.check("attention_graph_conv", &[x, q, k, w3], |tp, v| {
        let p = tp.constant(prior.clone());
        let xh = ops::split_heads(tp, v[0], h)?;
        let a = ops::attention_adjacency(tp, xh, v[1], v[2], p, n)?;
        let y = ops::graph_conv(tp, xh, a, v[3])?;
        let y = ops::merge_heads(tp, y, n)?;
        readout(tp, y, &ro)
    })?;

    let inputs = [
        s.normal(&[r, n, d1]),
        s.normal(&[d1, d1]),
        s.normal(&[d1]),
        s.normal(&[d1, 3]),
        s.normal(&[d1, d1]),
        s.normal(&[d1]),
    ];
    let ro = s.normal(&[r, n, d1]);
    let mix_mask = mask.clone();
    s.check("temporal_mix", &inputs, |tp, v| {
        let vars = TemporalMixVars {
            mix_in: v[1],
            mix_in_bias: Some(v[2]),
            kernel: v[3],
            mix_out: v[4],
            mix_out_bias: Some(v[5]),
        };
        let y = ops::temporal_mix(tp, v[0], &vars, b, &mix_mask)?;
        readout(tp, y, &ro)
    })?;

    let (wc, bc, x, ro) = (s.normal(&[d1, c]), s.normal(&[c]), s.normal(&[r, n, d1]), s.normal(&[r, c]));
    s.check("classify", &[x, wc, bc], |tp, v| {
        let y = ops::classify(tp, v[0], v[1], v[2])?;
        readout(tp, y, &ro)
    })?;

    // Full model: every parameter of a randomly initialized network.
    let config = ModelConfig {
        feature_dim: d0,
        hidden_dim: d1,
        attributes: n,
        classes: c,
        blocks: cfg.blocks,
        heads: h,
        ..ModelConfig::desk()
    };
    let totals: Vec<u64> = (0..n).map(|_| s.rng.random_range(4..12)).collect();
    let counts = (0..n * n)
        .map(|k| if k / n == k % n { totals[k / n] } else { s.rng.random_range(0..=totals[k / n]) })
        .collect();
    let prior = CoOccurrencePrior::from_counts(n, counts, totals);
    let mut model = Model::<f64>::init(config, &prior, cfg.seed)?;
    let mut names = Vec::new();
    let mut inputs = Vec::new();
    let rng = &mut s.rng;
    model.visit_mut(|name, kind, t| {
        if kind == TensorKind::Parameter {
            if name.ends_with("bias") || name.ends_with("gain") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            }
            names.push(name.to_string());
            inputs.push(t.clone());
        }
    });
    let features = s.normal(&[r, d0]);
    let anchors = s.uniform(&[b, n, d0], 0.0, 1.0);
    let targets = Tensor::from_fn([r, c], |i| (i % 3 == 1) as u8 as f64);
    s.check("total_loss", &inputs, |tp, v| {
        let mut bindings = Bindings::with_leaves(names.iter().cloned().zip(v.iter().copied()).collect());
        let out = model.forward(tp, &mut bindings, &features, &mask, b, Mode::Train)?;
        Ok(total_loss(tp, out.logits, &targets, out.attributes, &anchors, &mask, 1.0)?.total)
    })?;
    Ok(s.out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let checks = gradient_suite(&SuiteConfig::default()).unwrap();
        assert!(checks.len() >= 18);
        for c in &checks {
            assert!(c.report.passed, "{}: {:?}", c.name, c.report);
        }
    }

    #[test]
    fn injected_fault_is_caught() {
        let cfg = SuiteConfig {
            inject_fault: true,
            ..SuiteConfig::default()
        };
        let checks = gradient_suite(&cfg).unwrap();
        let relu = checks.iter().find(|c| c.name == "relu").unwrap();
        assert!(!relu.report.passed);
    }
}
