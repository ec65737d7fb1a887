//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value and whatever it
//! needs for the backward sweep. `Tape::backward` walks the nodes in reverse
//! and accumulates gradients into every node that requires one.

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batch norm, used to update
/// running estimates outside the tape.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased (n - 1) variance of the valid rows.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    Affine { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    AddBroadcast { x: Var, c: Var },
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Reshape(Var),
    Permute { x: Var, map: Vec<usize> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Softmax(Var),
    BatchNormTrain {
        x: Var,
        gain: Var,
        bias: Var,
        mask: Vec<bool>,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<S>,
        inv_std: Vec<S>,
    },
    TemporalConv { x: Var, kernel: Var, mask: Vec<bool> },
    MeanPoolNodes(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<S>,
        mask: Vec<bool>,
        count: usize,
    },
    MseToAnchor {
        input: Var,
        anchors: Vec<S>,
        mask: Vec<bool>,
        count: usize,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every leaf that requires one.
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    relu_fault: bool,
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

#[inline]
pub fn sigmoid_scalar<S: Scalar>(z: S) -> S {
    if z >= S::zero() {
        S::one() / (S::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (S::one() + e)
    }
}

/// For each output linear index, the input linear index it reads.
fn permutation_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let rank = shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel: usize = shape.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut counter = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        map.push(offset);
        for axis in (0..rank).rev() {
            counter[axis] += 1;
            offset += strides[axis];
            if counter[axis] < out_shape[axis] {
                break;
            }
            offset -= strides[axis] * out_shape[axis];
            counter[axis] = 0;
        }
    }
    map
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            relu_fault: false,
        }
    }

    /// A tape whose ReLU backward deliberately passes gradient through
    /// negative inputs. Only used to prove the gradient checker catches
    /// a broken backward.
    #[doc(hidden)]
    pub fn with_injected_fault() -> Self {
        Self {
            nodes: Vec::new(),
            relu_fault: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// `x · w (+ b)` over the last axis of `x`.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("affine", &xs, &ws));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).numel() / k;
        let mut out = vec![S::zero(); m * n];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [n] {
                return Err(shape_err("affine bias", bs, &[n]));
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        matmul_acc(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::new(shape, out)?, Op::Affine { x, w, b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// `x + c` where the shape of `c` equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, c: Var) -> Result<Var> {
        let xs = self.shape(x);
        let cs = self.shape(c);
        if cs.len() > xs.len() || xs[xs.len() - cs.len()..] != *cs {
            return Err(shape_err("add_broadcast", xs, cs));
        }
        let cv = self.value(c).data();
        let period = cv.len();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(period) {
            for (o, &v) in chunk.iter_mut().zip(cv) {
                *o += v;
            }
        }
        let t = Tensor::new(xs.to_vec(), data)?;
        let rg = self.rg(x) || self.rg(c);
        Ok(self.push(t, Op::AddBroadcast { x, c }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid_scalar);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", &shape, perm));
        }
        let map = permutation_map(&shape, perm);
        let src = self.value(x).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Permute { x, map }, rg))
    }

    /// Batched matrix product `[G,M,K] × [G,K,N]`, or `[G,M,K] × [G,N,K]ᵀ`
    /// when `trans_b` is set.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let (g, m, k) = (as_[0], as_[1], as_[2]);
        let (bk, n) = if trans_b { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if bk != k {
            return Err(shape_err("bmm", &as_, &bs));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![S::zero(); g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let ob = &mut out[gi * m * n..(gi + 1) * m * n];
            if trans_b {
                matmul_nt_acc(ab, bb, ob, m, k, n);
            } else {
                matmul_acc(ab, bb, ob, m, k, n);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([g, m, n], out)?, Op::Bmm { a, b, trans_b }, rg))
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastaxis(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let k = *shape.last().ok_or_else(|| shape_err("softmax", &shape, &[1]))?;
        if k == 0 {
            return Err(shape_err("softmax", &shape, &[1]));
        }
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(k) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let mut total = S::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(x), rg))
    }

    /// Train-mode batch normalization of `x: [R, F]` per feature column,
    /// using only rows whose mask entry is true.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        mask: &[bool],
        eps: S,
    ) -> Result<(Var, BatchStats<S>)> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || mask.len() != xs[0] {
            return Err(shape_err("batch_norm", &xs, &[mask.len()]));
        }
        let (r, f) = (xs[0], xs[1]);
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(shape_err("batch_norm affine", self.shape(gain), &[f]));
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid < 2 {
            return Err(Error::DegenerateBatch(valid));
        }
        let xv = self.value(x).data();
        let m = S::of(valid as f64);
        let mut mean = vec![S::zero(); f];
        for (row, _) in xv.chunks(f).zip(mask).filter(|(_, &v)| v) {
            for (acc, &v) in mean.iter_mut().zip(row) {
                *acc += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        let mut var = vec![S::zero(); f];
        for (row, _) in xv.chunks(f).zip(mask).filter(|(_, &v)| v) {
            for ((acc, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - mu;
                *acc += d * d;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut xhat = vec![S::zero(); r * f];
        let mut out = vec![S::zero(); r * f];
        for i in 0..r {
            for j in 0..f {
                let h = (xv[i * f + j] - mean[j]) * inv_std[j];
                xhat[i * f + j] = h;
                out[i * f + j] = gv[j] * h + bv[j];
            }
        }
        let unbiased = S::of(valid as f64 / (valid as f64 - 1.0));
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::BatchNormTrain {
            x,
            gain,
            bias,
            mask: mask.to_vec(),
            xhat,
            inv_std,
        };
        Ok((self.push(Tensor::new(xs, out)?, op, rg), stats))
    }

    /// Eval-mode batch normalization with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let f = *xs.last().unwrap_or(&0);
        if xs.len() != 2 || running_mean.len() != f || running_var.len() != f {
            return Err(shape_err("batch_norm", &xs, &[running_mean.len()]));
        }
        if self.shape(gain) != [f] || self.shape(bias) != [f] {
            return Err(shape_err("batch_norm affine", self.shape(gain), &[f]));
        }
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(f) {
            for j in 0..f {
                row[j] = gv[j] * ((row[j] - running_mean[j]) * inv_std[j]) + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        let op = Op::BatchNormEval {
            x,
            gain,
            bias,
            mean: running_mean.to_vec(),
            inv_std,
        };
        Ok(self.push(Tensor::new(xs, out)?, op, rg))
    }

    /// Depthwise convolution along the time axis of `x: [B, T, N, D]` with
    /// `kernel: [D, k]` shared by all nodes. Zero padding keeps the length;
    /// frames whose mask entry is false read as zeros.
    pub fn depthwise_temporal_conv(&mut self, x: Var, kernel: Var, mask: &[bool]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernel).to_vec();
        if xs.len() != 4 || ks.len() != 2 || ks[0] != xs[3] || mask.len() != xs[0] * xs[1] {
            return Err(shape_err("depthwise_temporal_conv", &xs, &ks));
        }
        let k = ks[1];
        if k % 2 == 0 {
            return Err(Error::Config(format!("temporal kernel size must be odd, got {k}")));
        }
        let (b, t, n, d) = (xs[0], xs[1], xs[2], xs[3]);
        let pad = k / 2;
        let frame = n * d;
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        let mut out = vec![S::zero(); xv.len()];
        for bi in 0..b {
            for ti in 0..t {
                let o = &mut out[(bi * t + ti) * frame..(bi * t + ti + 1) * frame];
                for j in 0..k {
                    let Some(src) = (ti + j).checked_sub(pad).filter(|&s| s < t) else {
                        continue;
                    };
                    if !mask[bi * t + src] {
                        continue;
                    }
                    let inp = &xv[(bi * t + src) * frame..(bi * t + src + 1) * frame];
                    for (idx, (ov, &iv)) in o.iter_mut().zip(inp).enumerate() {
                        *ov += kv[(idx % d) * k + j] * iv;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        let op = Op::TemporalConv {
            x,
            kernel,
            mask: mask.to_vec(),
        };
        Ok(self.push(Tensor::new(xs, out)?, op, rg))
    }

    /// Mean over the node axis: `[R, N, D] -> [R, D]`.
    pub fn mean_pool_nodes(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] == 0 {
            return Err(shape_err("mean_pool_nodes", &xs, &[]));
        }
        let (r, n, d) = (xs[0], xs[1], xs[2]);
        let inv = S::one() / S::of(n as f64);
        let xv = self.value(x).data();
        let mut out = vec![S::zero(); r * d];
        for ri in 0..r {
            let o = &mut out[ri * d..(ri + 1) * d];
            for ni in 0..n {
                let src = &xv[(ri * n + ni) * d..(ri * n + ni + 1) * d];
                for (ov, &v) in o.iter_mut().zip(src) {
                    *ov += v;
                }
            }
            o.iter_mut().for_each(|v| *v *= inv);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([r, d], out)?, Op::MeanPoolNodes(x), rg))
    }

    /// Mean binary cross entropy of `sigmoid(logits)` against `targets`
    /// over every class of every valid row, via the fused log-sigmoid form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<S>, mask: &[bool]) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        if ls.len() != 2 || targets.shape() != ls.as_slice() || mask.len() != ls[0] {
            return Err(shape_err("bce_loss", &ls, targets.shape()));
        }
        let c = ls[1];
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::EmptyMask);
        }
        let count = valid * c;
        let lv = self.value(logits).data();
        let mut total = S::zero();
        for ((zrow, yrow), _) in lv.chunks(c).zip(targets.data().chunks(c)).zip(mask).filter(|(_, &m)| m) {
            for (&z, &y) in zrow.iter().zip(yrow) {
                total += z.max(S::zero()) - z * y + (-z.abs()).exp().ln_1p();
            }
        }
        let loss = total / S::of(count as f64);
        let rg = self.rg(logits);
        let op = Op::BceWithLogits {
            logits,
            targets: targets.data().to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// `1/(N·R_valid) Σ_valid rows Σ_n ‖input[r,n] − anchor[n]‖²`.
    ///
    /// `input: [R, N, D]`; `anchors` is `[N, D]` or `[G, N, D]` with `R`
    /// divisible by `G`, in which case rows `g·R/G .. (g+1)·R/G` use group `g`.
    pub fn mse_to_anchor(&mut self, input: Var, anchors: &Tensor<S>, mask: &[bool]) -> Result<Var> {
        let is = self.shape(input).to_vec();
        let anchors_shape = anchors.shape();
        let groups = match anchors_shape.len() {
            2 => 1,
            3 => anchors_shape[0],
            _ => return Err(shape_err("mse_to_anchor", &is, anchors_shape)),
        };
        let tail = &anchors_shape[anchors_shape.len() - 2..];
        if is.len() != 3 || tail != &is[1..] || groups == 0 || is[0] % groups != 0 || mask.len() != is[0] {
            return Err(shape_err("mse_to_anchor", &is, anchors_shape));
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(Error::EmptyMask);
        }
        let (r, n, d) = (is[0], is[1], is[2]);
        let per_group = r / groups;
        let node = n * d;
        let count = valid * n;
        let iv = self.value(input).data();
        let av = anchors.data();
        let mut total = S::zero();
        for ri in (0..r).filter(|&ri| mask[ri]) {
            let g = ri / per_group;
            let row = &iv[ri * node..(ri + 1) * node];
            let anchor = &av[g * node..(g + 1) * node];
            for (&x, &a) in row.iter().zip(anchor) {
                let diff = x - a;
                total += diff * diff;
            }
        }
        let loss = total / S::of(count as f64);
        let rg = self.rg(input);
        let op = Op::MseToAnchor {
            input,
            anchors: av.to_vec(),
            mask: mask.to_vec(),
            count,
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Gradients of the one-element node `loss` with respect to every leaf
    /// created with [`Tape::param`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[]));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let m = g.len() / n;
                if let Some(dx) = self.slot(grads, *x) {
                    matmul_nt_acc(g, self.value(*w).data(), dx, m, n, k);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    matmul_tn_acc(self.value(*x).data(), g, dw, m, k, n);
                }
                if let Some(db) = b.and_then(|b| self.slot(grads, b)) {
                    for row in g.chunks(n) {
                        for (a, &v) in db.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::AddBroadcast { x, c } => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                }
                if let Some(dc) = self.slot(grads, *c) {
                    let period = dc.len();
                    for chunk in g.chunks(period) {
                        dc.iter_mut().zip(chunk).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    for ((d, &gv), &y) in da.iter_mut().zip(g).zip(bv) {
                        *d += gv * y;
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for ((d, &gv), &x) in db.iter_mut().zip(g).zip(av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, &v)| *a += v * *s);
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Relu(x) => {
                let fault = self.relu_fault;
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &v) in dx.iter_mut().zip(g).zip(xv) {
                        if v > S::zero() || fault {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((d, &gv), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gv * y * (S::one() - y);
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(a, &v)| *a += v);
                }
            }
            Op::Permute { x, map } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (&src, &gv) in map.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let as_ = self.shape(*a);
                let (gn, m, k) = (as_[0], as_[1], as_[2]);
                let n = node.value.shape()[2];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(da) = self.slot(grads, *a) {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let bb = &bv[gi * k * n..(gi + 1) * k * n];
                        let db = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            matmul_acc(gb, bb, db, m, n, k);
                        } else {
                            matmul_nt_acc(gb, bb, db, m, n, k);
                        }
                    }
                }
                if let Some(dbv) = self.slot(grads, *b) {
                    for gi in 0..gn {
                        let gb = &g[gi * m * n..(gi + 1) * m * n];
                        let ab = &av[gi * m * k..(gi + 1) * m * k];
                        let db = &mut dbv[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            matmul_tn_acc(gb, ab, db, m, n, k);
                        } else {
                            matmul_tn_acc(ab, gb, db, m, k, n);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let k = *node.value.shape().last().unwrap();
                let yv = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for ((drow, grow), yrow) in dx.chunks_mut(k).zip(g.chunks(k)).zip(yv.chunks(k)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gain,
                bias,
                mask,
                xhat,
                inv_std,
            } => {
                let f = inv_std.len();
                let m = S::of(mask.iter().filter(|&&v| v).count() as f64);
                let gv = self.value(*gain).data();
                let mut sum_dy = vec![S::zero(); f];
                let mut sum_dy_xhat = vec![S::zero(); f];
                // Padded rows do not shape the statistics but still read them.
                for (grow, hrow) in g.chunks(f).zip(xhat.chunks(f)) {
                    for j in 0..f {
                        sum_dy[j] += grow[j];
                        sum_dy_xhat[j] += grow[j] * hrow[j];
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    dg.iter_mut().zip(&sum_dy_xhat).for_each(|(a, &v)| *a += v);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    db.iter_mut().zip(&sum_dy).for_each(|(a, &v)| *a += v);
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (((drow, grow), hrow), &valid) in dx.chunks_mut(f).zip(g.chunks(f)).zip(xhat.chunks(f)).zip(mask) {
                        for j in 0..f {
                            let dh = grow[j] * gv[j];
                            drow[j] += if valid {
                                let s1 = sum_dy[j] * gv[j];
                                let s2 = sum_dy_xhat[j] * gv[j];
                                inv_std[j] / m * (m * dh - s1 - hrow[j] * s2)
                            } else {
                                inv_std[j] * dh
                            };
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gain,
                bias,
                mean,
                inv_std,
            } => {
                let f = inv_std.len();
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (drow, grow) in dx.chunks_mut(f).zip(g.chunks(f)) {
                        for j in 0..f {
                            drow[j] += grow[j] * gv[j] * inv_std[j];
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (grow, xrow) in g.chunks(f).zip(xv.chunks(f)) {
                        for j in 0..f {
                            dg[j] += grow[j] * (xrow[j] - mean[j]) * inv_std[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for grow in g.chunks(f) {
                        db.iter_mut().zip(grow).for_each(|(a, &v)| *a += v);
                    }
                }
            }
            Op::TemporalConv { x, kernel, mask } => {
                let xs = self.shape(*x);
                let (b, t, n, d) = (xs[0], xs[1], xs[2], xs[3]);
                let k = self.shape(*kernel)[1];
                let pad = k / 2;
                let frame = n * d;
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                let taps = |bi: usize, ti: usize| {
                    (0..k).filter_map(move |j| {
                        (ti + j)
                            .checked_sub(pad)
                            .filter(|&s| s < t && mask[bi * t + s])
                            .map(|s| (j, s))
                    })
                };
                if let Some(dx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let go = &g[(bi * t + ti) * frame..(bi * t + ti + 1) * frame];
                            for (j, src) in taps(bi, ti) {
                                let di = &mut dx[(bi * t + src) * frame..(bi * t + src + 1) * frame];
                                for (idx, (dv, &gv)) in di.iter_mut().zip(go).enumerate() {
                                    *dv += kv[(idx % d) * k + j] * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(dk) = self.slot(grads, *kernel) {
                    for bi in 0..b {
                        for ti in 0..t {
                            let go = &g[(bi * t + ti) * frame..(bi * t + ti + 1) * frame];
                            for (j, src) in taps(bi, ti) {
                                let xi = &xv[(bi * t + src) * frame..(bi * t + src + 1) * frame];
                                for (idx, (&xval, &gv)) in xi.iter().zip(go).enumerate() {
                                    dk[(idx % d) * k + j] += xval * gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::MeanPoolNodes(x) => {
                let xs = self.shape(*x);
                let (n, d) = (xs[1], xs[2]);
                let inv = S::one() / S::of(n as f64);
                if let Some(dx) = self.slot(grads, *x) {
                    for (ri, grow) in g.chunks(d).enumerate() {
                        for ni in 0..n {
                            let drow = &mut dx[(ri * n + ni) * d..(ri * n + ni + 1) * d];
                            drow.iter_mut().zip(grow).for_each(|(a, &v)| *a += v * inv);
                        }
                    }
                }
            }
            Op::BceWithLogits {
                logits,
                targets,
                mask,
                count,
            } => {
                let c = self.shape(*logits)[1];
                let scale = g[0] / S::of(*count as f64);
                let lv = self.value(*logits).data();
                if let Some(dl) = self.slot(grads, *logits) {
                    for (ri, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for ci in 0..c {
                            let i = ri * c + ci;
                            dl[i] += scale * (sigmoid_scalar(lv[i]) - targets[i]);
                        }
                    }
                }
            }
            Op::MseToAnchor {
                input,
                anchors,
                mask,
                count,
            } => {
                let is = self.shape(*input);
                let node_len = is[1] * is[2];
                let groups = anchors.len() / node_len;
                let per_group = is[0] / groups;
                let scale = g[0] * S::of(2.0) / S::of(*count as f64);
                let iv = self.value(*input).data();
                if let Some(di) = self.slot(grads, *input) {
                    for (ri, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        let gi = ri / per_group;
                        let anchor = &anchors[gi * node_len..(gi + 1) * node_len];
                        let off = ri * node_len;
                        for (j, &a) in anchor.iter().enumerate() {
                            di[off + j] += scale * (iv[off + j] - a);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn affine_identity_and_bias() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let id = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = tape.affine(x, id, None).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let zero = tape.constant(Tensor::zeros([2, 2]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.affine(x, zero, Some(b)).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn affine_shape_error_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros([2, 3]));
        let w = tape.constant(Tensor::zeros([2, 2]));
        let err = tape.affine(x, w, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_keeps_positive_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.5, 1.0, 7.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.5, 1.0, 7.0]);
    }

    #[test]
    fn softmax_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 2], &[0.0, 0.0, 0.0, 3f64.ln(), 1000.0, 1000.0]));
        let y = tape.softmax_lastaxis(x).unwrap();
        let v = tape.value(y).data();
        assert_eq!(&v[0..2], &[0.5, 0.5]);
        assert!((v[2] - 0.25).abs() < 1e-15 && (v[3] - 0.75).abs() < 1e-15);
        assert_eq!(&v[4..6], &[0.5, 0.5]);
    }

    #[test]
    fn batch_norm_cases() {
        // constant column -> zeros
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3, 1], &[2.0, 2.0, 2.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let (y, _) = tape.batch_norm_train(x, g, b, &[true; 3], 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        // [-1, 1] with eps -> 0 gives [-1, 1]
        let x = tape.constant(t(&[2, 1], &[-1.0, 1.0]));
        let (y, stats) = tape.batch_norm_train(x, g, b, &[true; 2], 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![2.0]);

        // eval with mean 0, var 1, gain 2, bias 3 on x=1 -> 5
        let x = tape.constant(t(&[1, 1], &[1.0]));
        let g2 = tape.constant(t(&[1], &[2.0]));
        let b3 = tape.constant(t(&[1], &[3.0]));
        let y = tape.batch_norm_eval(x, g2, b3, &[0.0], &[1.0], 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0]);
    }

    #[test]
    fn batch_norm_rejects_degenerate_batch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 1], &[1.0, 2.0]));
        let g = tape.constant(t(&[1], &[1.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let err = tape.batch_norm_train(x, g, b, &[true, false], 1e-5).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(1)));
    }

    #[test]
    fn bce_at_zero_logits_is_ln2() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(Tensor::zeros([3, 2]));
        let y = t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let l = tape.bce_with_logits(z, &y, &[true; 3]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn bce_vanishes_for_confident_correct_logits() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2], &[60.0, -60.0]));
        let y = t(&[1, 2], &[1.0, 0.0]);
        let l = tape.bce_with_logits(z, &y, &[true]).unwrap();
        assert!(tape.value(l).item() < 1e-25);
    }

    #[test]
    fn bce_ignores_masked_rows_and_requires_a_valid_one() {
        let y = t(&[2, 1], &[1.0, 0.0]);
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[2, 1], &[0.3, 5.0]));
        let b = tape.constant(t(&[2, 1], &[0.3, -9.0]));
        let la = tape.bce_with_logits(a, &y, &[true, false]).unwrap();
        let lb = tape.bce_with_logits(b, &y, &[true, false]).unwrap();
        assert_eq!(tape.value(la).item().to_bits(), tape.value(lb).item().to_bits());
        assert!(matches!(tape.bce_with_logits(a, &y, &[false, false]), Err(Error::EmptyMask)));
    }

    #[test]
    fn mse_to_anchor_cases() {
        let mut tape = Tape::<f64>::new();
        let i = tape.constant(t(&[1, 1, 2], &[0.0, 0.0]));
        let anchors = t(&[1, 2], &[3.0, 4.0]);
        let l = tape.mse_to_anchor(i, &anchors, &[true]).unwrap();
        assert_eq!(tape.value(l).item(), 25.0);

        // duplicated frames leave the mean unchanged
        let i2 = tape.constant(t(&[2, 1, 2], &[0.0, 0.0, 0.0, 0.0]));
        let l2 = tape.mse_to_anchor(i2, &anchors, &[true, true]).unwrap();
        assert_eq!(tape.value(l2).item(), 25.0);

        let wrong = t(&[2, 2], &[3.0, 4.0, 1.0, 1.0]);
        assert!(tape.mse_to_anchor(i, &wrong, &[true]).is_err());
    }

    #[test]
    fn temporal_conv_identity_and_impulse() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([1, 5, 2, 1], |i| i as f64 + 1.0));
        let id = tape.constant(t(&[1, 3], &[0.0, 1.0, 0.0]));
        let y = tape.depthwise_temporal_conv(x, id, &[true; 5]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let mut imp = Tensor::<f64>::zeros([1, 5, 1, 1]);
        imp.set(&[0, 2, 0, 0], 1.0);
        let x = tape.constant(imp);
        let ones = tape.constant(t(&[1, 3], &[1.0, 1.0, 1.0]));
        let y = tape.depthwise_temporal_conv(x, ones, &[true; 5]).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);

        let even = tape.constant(Tensor::zeros([1, 2]));
        assert!(matches!(
            tape.depthwise_temporal_conv(x, even, &[true; 5]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn mean_pool_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1, 2, 1], &[1.0, 3.0]));
        let y = tape.mean_pool_nodes(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn permute_round_trip() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn([2, 3, 4], |i| i as f64));
        let y = tape.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(tape.shape(y), &[4, 2, 3]);
        assert_eq!(tape.value(y).at(&[3, 1, 2]), tape.value(x).at(&[1, 2, 3]));
        let z = tape.permute(y, &[1, 2, 0]).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
        assert!(tape.permute(x, &[0, 0, 1]).is_err());
    }
}
