//! Building blocks of one graph reasoning layer. Node features are laid out
//! as `[R, N, D1]` with `R = videos · frames`.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};
use crate::scalar::Scalar;

pub fn bottleneck<S: Scalar>(tape: &mut Tape<S>, attributes: Var, weight: Var) -> Result<Var> {
    tape.affine(attributes, weight, None)
}

/// `[R, N, H·dh] -> [H, R·N, dh]`
pub fn split_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, heads: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
        return Err(Error::Shape {
            op: "split_heads",
            lhs: s,
            rhs: vec![heads],
        });
    }
    let (r, n, dh) = (s[0], s[1], s[2] / heads);
    let x = tape.reshape(x, [r, n, heads, dh])?;
    let x = tape.permute(x, &[2, 0, 1, 3])?;
    tape.reshape(x, [heads, r * n, dh])
}

/// `[H, R·N, dh] -> [R, N, H·dh]`
pub fn merge_heads<S: Scalar>(tape: &mut Tape<S>, x: Var, nodes: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || nodes == 0 || s[1] % nodes != 0 {
        return Err(Error::Shape {
            op: "merge_heads",
            lhs: s,
            rhs: vec![nodes],
        });
    }
    let (h, r, dh) = (s[0], s[1] / nodes, s[2]);
    let x = tape.reshape(x, [h, r, nodes, dh])?;
    let x = tape.permute(x, &[1, 2, 0, 3])?;
    tape.reshape(x, [r, nodes, h * dh])
}

/// Per head and frame, `softmax(q kᵀ) + prior` with `q = x·query`,
/// `k = x·key` and the softmax over keys.
///
/// `x: [H, R·N, dh]`, `query`/`key: [H, dh, dh]`, `prior: [N, N]`;
/// returns `[H·R, N, N]`.
pub fn attention_adjacency<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    query: Var,
    key: Var,
    prior: Var,
    nodes: usize,
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let groups = s[0] * s[1] / nodes;
    let q = tape.bmm(x, query, false)?;
    let q = tape.reshape(q, [groups, nodes, s[2]])?;
    let k = tape.bmm(x, key, false)?;
    let k = tape.reshape(k, [groups, nodes, s[2]])?;
    let scores = tape.bmm(q, k, true)?;
    let attn = tape.softmax_lastaxis(scores)?;
    tape.add_broadcast(attn, prior)
}

/// The prior alone as the adjacency of every head and frame.
pub fn prior_adjacency<S: Scalar>(tape: &mut Tape<S>, x: Var, prior: Var, nodes: usize) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let groups = s[0] * s[1] / nodes;
    let zeros = tape.constant(crate::numerics::Tensor::zeros([groups, nodes, nodes]));
    tape.add_broadcast(zeros, prior)
}

/// `ReLU(A · x · weight) + x` per head and frame.
///
/// `x: [H, R·N, dh]`, `adjacency: [H·R, N, N]`, `weight: [H, dh, dh]`.
pub fn graph_conv<S: Scalar>(tape: &mut Tape<S>, x: Var, adjacency: Var, weight: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let a = tape.shape(adjacency).to_vec();
    if a.len() != 3 || a[0] * a[1] != s[0] * s[1] {
        return Err(Error::Shape {
            op: "graph_conv",
            lhs: s,
            rhs: a,
        });
    }
    let xg = tape.reshape(x, [a[0], a[1], s[2]])?;
    let ax = tape.bmm(adjacency, xg, false)?;
    let ax = tape.reshape(ax, s.clone())?;
    let axw = tape.bmm(ax, weight, false)?;
    let h = tape.relu(axw);
    tape.add(h, x)
}

/// Weights of the channel-mix / temporal-conv / channel-mix branch.
#[derive(Clone, Copy, Debug)]
pub struct TemporalMixVars {
    pub mix_in: Var,
    pub mix_in_bias: Option<Var>,
    pub kernel: Var,
    pub mix_out: Var,
    pub mix_out_bias: Option<Var>,
}

/// `mix_out(ReLU(conv(mix_in(x)))) + x` where the convolution runs along
/// time for each node. `x: [B·T, N, D1]`, `mask: [B·T]`.
pub fn temporal_mix<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    vars: &TemporalMixVars,
    videos: usize,
    mask: &[bool],
) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || videos == 0 || s[0] % videos != 0 {
        return Err(Error::Shape {
            op: "temporal_mix",
            lhs: s,
            rhs: vec![videos],
        });
    }
    let frames = s[0] / videos;
    let h = tape.affine(x, vars.mix_in, vars.mix_in_bias)?;
    let h = tape.reshape(h, [videos, frames, s[1], s[2]])?;
    let h = tape.depthwise_temporal_conv(h, vars.kernel, mask)?;
    let h = tape.relu(h);
    let h = tape.reshape(h, s)?;
    let h = tape.affine(h, vars.mix_out, vars.mix_out_bias)?;
    tape.add(h, x)
}

/// Mean over nodes followed by a linear map to class logits.
pub fn classify<S: Scalar>(tape: &mut Tape<S>, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let pooled = tape.mean_pool_nodes(x)?;
    tape.affine(pooled, weight, Some(bias))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
    }

    fn eye(h: usize, d: usize) -> Tensor<f64> {
        Tensor::from_fn([h, d, d], |i| if i % d == (i / d) % d { 1.0 } else { 0.0 })
    }

    #[test]
    fn heads_round_trip() {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[3, 2, 8], -1.0, 1.0, 1));
        let h = split_heads(&mut tape, x, 4).unwrap();
        assert_eq!(tape.shape(h), [4, 6, 2]);
        let back = merge_heads(&mut tape, h, 2).unwrap();
        assert_eq!(tape.value(back), tape.value(x));
        assert!(split_heads(&mut tape, x, 3).is_err());
    }

    #[test]
    fn bottleneck_copies_leading_coordinates() {
        let mut tape = Tape::new();
        let i = random(&[2, 3, 4], -1.0, 1.0, 2);
        let x = tape.constant(i.clone());
        let w = tape.constant(Tensor::from_fn([4, 2], |k| if k / 2 == k % 2 { 1.0 } else { 0.0 }));
        let y = bottleneck(&mut tape, x, w).unwrap();
        for r in 0..6 {
            assert_eq!(tape.value(y).data()[r * 2..r * 2 + 2], i.data()[r * 4..r * 4 + 2]);
        }
        let z = tape.constant(Tensor::zeros([4, 2]));
        let y0 = bottleneck(&mut tape, x, z).unwrap();
        assert!(tape.value(y0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_grad_check() {
        let i = random(&[2, 3, 4], -1.0, 1.0, 3);
        let w = random(&[4, 2], -1.0, 1.0, 4);
        let r = grad_check(
            &[i, w],
            |t, v| {
                let y = bottleneck(t, v[0], v[1])?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_projections_give_uniform_attention_plus_prior() {
        let mut tape = Tape::new();
        let x = tape.constant(random(&[1, 6, 2], -1.0, 1.0, 5));
        let z = tape.constant(Tensor::zeros([1, 2, 2]));
        let prior = random(&[3, 3], 0.0, 1.0, 6);
        let p = tape.constant(prior.clone());
        let a = attention_adjacency(&mut tape, x, z, z, p, 3).unwrap();
        assert_eq!(tape.shape(a), [2, 3, 3]);
        for (k, &v) in tape.value(a).data().iter().enumerate() {
            assert!((v - (1.0 / 3.0 + prior.data()[k % 9])).abs() < 1e-15);
        }
    }

    #[test]
    fn adjacency_rows_sum_to_one_plus_prior_row() {
        let mut tape = Tape::new();
        let (h, r, n, dh) = (2, 3, 4, 3);
        let x = tape.constant(random(&[h, r * n, dh], -2.0, 2.0, 7));
        let q = tape.constant(random(&[h, dh, dh], -1.0, 1.0, 8));
        let k = tape.constant(random(&[h, dh, dh], -1.0, 1.0, 9));
        let prior = random(&[n, n], 0.0, 1.0, 10);
        let p = tape.constant(prior.clone());
        let a = attention_adjacency(&mut tape, x, q, k, p, n).unwrap();
        for (row, vals) in tape.value(a).data().chunks(n).enumerate() {
            let i = row % n;
            let expect = 1.0 + prior.data()[i * n..(i + 1) * n].iter().sum::<f64>();
            assert!((vals.iter().sum::<f64>() - expect).abs() < 1e-9);
            assert!(vals.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn graph_conv_identities() {
        let mut tape = Tape::new();
        let xv = random(&[1, 6, 3], 0.0, 1.0, 11);
        let x = tape.constant(xv.clone());
        let a = tape.constant(eye(2, 3));
        let w = tape.constant(eye(1, 3));
        let y = graph_conv(&mut tape, x, a, w).unwrap();
        let twice = xv.map(|v| 2.0 * v);
        assert!(tape.value(y).max_abs_diff(&twice) < 1e-15);

        let xr = tape.constant(random(&[1, 6, 3], -1.0, 1.0, 12));
        let dense = tape.constant(random(&[2, 3, 3], 0.0, 1.0, 13));
        let zero = tape.constant(Tensor::zeros([1, 3, 3]));
        let y0 = graph_conv(&mut tape, xr, dense, zero).unwrap();
        assert_eq!(tape.value(y0), tape.value(xr));
    }

    #[test]
    fn attention_and_graph_conv_grad_check() {
        let (h, r, n, dh) = (2, 2, 3, 2);
        let prior = random(&[n, n], 0.0, 1.0, 14);
        let inputs = [
            random(&[r, n, h * dh], -1.0, 1.0, 15),
            random(&[h, dh, dh], -1.0, 1.0, 16),
            random(&[h, dh, dh], -1.0, 1.0, 17),
            random(&[h, dh, dh], -1.0, 1.0, 18),
        ];
        let rep = grad_check(
            &inputs,
            |t, v| {
                let p = t.constant(prior.clone());
                let xh = split_heads(t, v[0], h)?;
                let a = attention_adjacency(t, xh, v[1], v[2], p, n)?;
                let y = graph_conv(t, xh, a, v[3])?;
                let y = merge_heads(t, y, n)?;
                let y2 = t.mul(y, y)?;
                Ok(t.sum(y2))
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(rep.passed, "{rep:?}");
    }

    fn mix_vars(tape: &mut Tape<f64>, d: usize, w4: Tensor<f64>, kernel: Tensor<f64>, w5: Tensor<f64>) -> TemporalMixVars {
        TemporalMixVars {
            mix_in: tape.constant(w4),
            mix_in_bias: Some(tape.constant(Tensor::zeros([d]))),
            kernel: tape.constant(kernel),
            mix_out: tape.constant(w5),
            mix_out_bias: None,
        }
    }

    #[test]
    fn temporal_mix_identities() {
        let d = 3;
        let eye2 = Tensor::from_fn([d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        let impulse = Tensor::from_fn([d, 3], |i| if i % 3 == 1 { 1.0 } else { 0.0 });
        let mut tape = Tape::new();
        let xv = random(&[8, 2, d], 0.0, 1.0, 19);
        let x = tape.constant(xv.clone());
        let vars = mix_vars(&mut tape, d, eye2.clone(), impulse, eye2.clone());
        let y = temporal_mix(&mut tape, x, &vars, 2, &[true; 8]).unwrap();
        assert!(tape.value(y).max_abs_diff(&xv.map(|v| 2.0 * v)) < 1e-15);

        let xr = tape.constant(random(&[8, 2, d], -1.0, 1.0, 20));
        let vars0 = mix_vars(&mut tape, d, eye2, random(&[d, 3], -1.0, 1.0, 21), Tensor::zeros([d, d]));
        let y0 = temporal_mix(&mut tape, xr, &vars0, 2, &[true; 8]).unwrap();
        assert_eq!(tape.value(y0), tape.value(xr));
    }

    #[test]
    fn classify_contracts() {
        let mut tape = Tape::<f64>::new();
        let row = [0.5, -1.0];
        let x = tape.constant(Tensor::from_fn([3, 4, 2], |i| row[i % 2]));
        let w = tape.constant(Tensor::from_f64([2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::from_f64([2], &[0.1, 0.2]).unwrap());
        let y = classify(&mut tape, x, w, b).unwrap();
        assert_eq!(tape.shape(y), [3, 2]);
        assert!((tape.value(y).at(&[1, 0]) - (0.5 - 3.0 + 0.1)).abs() < 1e-15);
        let z = tape.constant(Tensor::zeros([2, 2]));
        let y0 = classify(&mut tape, x, z, b).unwrap();
        assert_eq!(tape.value(y0).data(), [0.1, 0.2, 0.1, 0.2, 0.1, 0.2]);
    }
}
