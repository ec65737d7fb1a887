use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> S) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self {
            shape,
            data: (0..numel).map(&mut f).collect(),
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape,
                rhs: shape,
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> S {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: S) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                debug_assert!(i < extent);
                acc * extent + i
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::of(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }
}

/// `out[m][n] += sum_k a[m][k] * b[k][n]`
pub(crate) fn matmul_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m][n] += sum_k a[m][k] * b[n][k]`
pub(crate) fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[k][n] += sum_m a[m][k] * b[m][n]`
pub(crate) fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == S::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f64>::new([2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f64>::new([2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::<f64>::from_fn([2, 3], |i| i as f64);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut out = [0.0; 4];
        matmul_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [0.5, 7.0, 2.0, 16.0]);

        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0]; // b transposed, 2x3
        let mut out2 = [0.0; 4];
        matmul_nt_acc(&a, &bt, &mut out2, 2, 3, 2);
        assert_eq!(out, out2);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // a transposed, 3x2
        let mut out3 = [0.0; 4];
        matmul_tn_acc(&at, &b, &mut out3, 3, 2, 2);
        assert_eq!(out, out3);
    }
}
