use aan_core::graph::{total_loss, CoOccurrencePrior, Model, ModelConfig, TensorKind, Variant};
use aan_core::numerics::grad_check;
use aan_core::params::Bindings;
use aan_core::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> ModelConfig {
    ModelConfig {
        feature_dim: 6,
        hidden_dim: 4,
        attributes: 3,
        classes: 2,
        blocks: 2,
        heads: 2,
        ..ModelConfig::desk()
    }
}

fn random_prior(n: usize, seed: u64) -> CoOccurrencePrior {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let totals: Vec<u64> = (0..n).map(|_| rng.random_range(5..20)).collect();
    let counts = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            if i == j {
                totals[i]
            } else {
                rng.random_range(0..=totals[i])
            }
        })
        .collect();
    CoOccurrencePrior::from_counts(n, counts, totals)
}

/// Model with every parameter, biases included, drawn at random.
fn random_model(config: ModelConfig, seed: u64) -> Model<f64> {
    let mut model = Model::init(config.clone(), &random_prior(config.attributes, seed), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    model.visit_mut(|name, kind, t| {
        if kind == TensorKind::Parameter && (name.ends_with("bias") || name.ends_with("gain")) {
            for v in t.data_mut() {
                *v = rng.random_range(0.5..1.5);
            }
        }
    });
    model
}

fn features(rows: usize, dim: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([rows, dim], |_| rng.random_range(-1.0..1.0))
}

fn logits(model: &Model<f64>, f: &Tensor<f64>, mask: &[bool], videos: usize, mode: Mode) -> Tensor<f64> {
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &mut Bindings::frozen(), f, mask, videos, mode)
        .unwrap();
    tape.value(out.logits).clone()
}

#[test]
fn output_shapes_per_variant() {
    for variant in [Variant::Full, Variant::ExtractorOnly, Variant::LinearBaseline] {
        let cfg = ModelConfig { variant, ..tiny_config() };
        let model = random_model(cfg, 1);
        let f = features(8, 6, 2);
        let mut tape = Tape::new();
        let mut b = Bindings::trainable();
        let out = model.forward(&mut tape, &mut b, &f, &[true; 8], 2, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.logits), [8, 2]);
        assert_eq!(out.attributes.is_some(), variant != Variant::LinearBaseline);
        let names = b.names();
        assert_eq!(names.iter().any(|n| n.starts_with("blocks.")), variant == Variant::Full);
        assert_eq!(names.iter().any(|n| n.starts_with("extractor.")), variant != Variant::LinearBaseline);
    }
}

#[test]
fn ablation_flags_leave_weights_unbound() {
    let cfg = ModelConfig {
        disable_attention: true,
        disable_temporal: true,
        ..tiny_config()
    };
    let model = random_model(cfg, 3);
    let mut tape = Tape::new();
    let mut b = Bindings::trainable();
    model
        .forward(&mut tape, &mut b, &features(4, 6, 4), &[true; 4], 1, Mode::Train)
        .unwrap();
    let names = b.names();
    assert!(names.iter().any(|n| n.ends_with("propagate")));
    assert!(!names.iter().any(|n| n.contains("attention") || n.contains("mix_") || n.contains("temporal")));
}

#[test]
fn eval_forward_is_bitwise_deterministic() {
    let model = random_model(tiny_config(), 5);
    let f = features(10, 6, 6);
    let mask = [true, true, true, true, false, true, true, true, true, true];
    assert_eq!(logits(&model, &f, &mask, 2, Mode::Eval), logits(&model, &f, &mask, 2, Mode::Eval));
}

#[test]
fn masked_frames_do_not_change_valid_logits() {
    let model = random_model(tiny_config(), 7);
    let mut f = features(8, 6, 8);
    let mask = [true, true, true, false, true, true, true, true];
    let a = logits(&model, &f, &mask, 2, Mode::Train);
    for v in &mut f.data_mut()[3 * 6..4 * 6] {
        *v += 10.0;
    }
    let b = logits(&model, &f, &mask, 2, Mode::Train);
    for r in (0..8).filter(|&r| mask[r]) {
        assert_eq!(a.data()[r * 2..r * 2 + 2], b.data()[r * 2..r * 2 + 2]);
    }
}

#[test]
fn receptive_field_is_bounded_by_the_temporal_stack() {
    let cfg = ModelConfig {
        blocks: 3,
        ..tiny_config()
    };
    let reach = cfg.blocks * (cfg.kernel_size - 1) / 2;
    let model = random_model(cfg, 9);
    let frames = 20;
    let base = features(frames, 6, 10);
    let mut probe = base.clone();
    let t0 = 9;
    for v in &mut probe.data_mut()[t0 * 6..(t0 + 1) * 6] {
        *v += 1.0;
    }
    let mask = vec![true; frames];
    let a = logits(&model, &base, &mask, 1, Mode::Eval);
    let b = logits(&model, &probe, &mask, 1, Mode::Eval);
    for t in 0..frames {
        let changed = a.data()[t * 2..t * 2 + 2] != b.data()[t * 2..t * 2 + 2];
        assert_eq!(changed, t.abs_diff(t0) <= reach, "frame {t}");
    }
}

#[test]
fn attribute_permutation_leaves_logits_unchanged() {
    let model = random_model(tiny_config(), 11);
    let perm = [2, 0, 1];
    let permuted = model.permute_attributes(&perm).unwrap();
    let f = features(8, 6, 12);
    for mode in [Mode::Train, Mode::Eval] {
        let a = logits(&model, &f, &[true; 8], 2, mode);
        let b = logits(&permuted, &f, &[true; 8], 2, mode);
        assert!(a.max_abs_diff(&b) < 1e-9);
    }
    assert!(model.permute_attributes(&[0, 0, 1]).is_err());
}

#[test]
fn loss_components_sum_exactly() {
    let model = random_model(tiny_config(), 13);
    let f = features(6, 6, 14);
    let targets = Tensor::from_fn([6, 2], |i| (i % 3 == 0) as u8 as f64);
    let anchors = features(3, 6, 15).map(f64::abs);
    let mut tape = Tape::new();
    let out = model
        .forward(&mut tape, &mut Bindings::frozen(), &f, &[true; 6], 2, Mode::Train)
        .unwrap();
    let parts = total_loss(&mut tape, out.logits, &targets, out.attributes, &anchors, &[true; 6], 1.0).unwrap();
    let total = tape.value(parts.total).item();
    let action = tape.value(parts.action).item();
    let attrs = tape.value(parts.attributes.unwrap()).item();
    assert!((total - action - attrs).abs() < 1e-12);
}

#[test]
fn full_model_loss_passes_grad_check() {
    let model = random_model(tiny_config(), 17);
    let (videos, frames) = (2, 4);
    let rows = videos * frames;
    let f = features(rows, 6, 18);
    let mask = [true, true, true, true, true, true, true, false];
    let targets = Tensor::from_fn([rows, 2], |i| (i % 3 == 1) as u8 as f64);
    let anchors = features(3, 6, 19).map(f64::abs);
    let mut names = Vec::new();
    let mut inputs = Vec::new();
    model.visit(|n, kind, t| {
        if kind == TensorKind::Parameter {
            names.push(n.to_string());
            inputs.push(t.clone());
        }
    });
    let report = grad_check(
        &inputs,
        |tape, vars| {
            let mut b = Bindings::with_leaves(names.iter().cloned().zip(vars.iter().copied()).collect());
            let out = model.forward(tape, &mut b, &f, &mask, videos, Mode::Train)?;
            Ok(total_loss(tape, out.logits, &targets, out.attributes, &anchors, &mask, 1.0)?.total)
        },
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}
