//! Dense row-major `f64` tensors and the raw kernels the tape is built on.
//!
//! A [`Tensor`] is a plain value: shape plus flat data. It never changes
//! shape after construction; [`Tensor::reshape`] returns a new tensor.
//! Gradient bookkeeping lives in [`crate::autograd`].

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Builds a tensor from a flat index → value function.
    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(f).collect(),
        }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn([n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape.clone())
    }

    pub fn ones_like(&self) -> Self {
        Self::ones(self.shape.clone())
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(
                "item",
                format!("expected one element, shape is {:?}", self.shape),
            )),
        }
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Value at a multi-dimensional index.
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(
                ix < dim,
                "index {ix} out of bounds for axis {i} of size {dim}"
            );
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// Rows `[start, end)` along axis 0.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.shape.is_empty() || start > end || end > self.shape[0] {
            return Err(Error::shape(
                "slice_rows",
                format!("rows {start}..{end} of shape {:?}", self.shape),
            ));
        }
        let row: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Tensor::new(shape, self.data[start * row..end * row].to_vec())
    }

    /// Concatenates tensors along axis 0. All trailing dimensions must agree.
    pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        if first.shape.is_empty() {
            return Err(Error::shape("concat_rows", "cannot concatenate scalars"));
        }
        let tail = &first.shape[1..];
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() != first.shape.len() || &p.shape[1..] != tail {
                return Err(Error::shape(
                    "concat_rows",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            rows += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = rows;
        Tensor::new(shape, data)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("stack", "no inputs"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::shape(
                    "stack",
                    format!("{:?} vs {:?}", first.shape, p.shape),
                ));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }

    /// True when both tensors have the same shape and bit-identical data.
    pub fn bitwise_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn ensure_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// `out[m,n] += a[m,k] · b[k,n]`, row-major.
///
/// Every output row depends only on its own row of `a`, so results are
/// independent of how callers partition rows.
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a
        .chunks_exact(k.max(1))
        .zip(out.chunks_exact_mut(n))
        .take(m)
    {
        let mut p = 0;
        while p + 4 <= k {
            let (a0, a1, a2, a3) = (a_row[p], a_row[p + 1], a_row[p + 2], a_row[p + 3]);
            let b0 = &b[p * n..(p + 1) * n];
            let b1 = &b[(p + 1) * n..(p + 2) * n];
            let b2 = &b[(p + 2) * n..(p + 3) * n];
            let b3 = &b[(p + 3) * n..(p + 4) * n];
            for j in 0..n {
                c_row[j] += a0 * b0[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
            }
            p += 4;
        }
        while p < k {
            let av = a_row[p];
            let bp = &b[p * n..(p + 1) * n];
            for j in 0..n {
                c_row[j] += av * bp[j];
            }
            p += 1;
        }
    }
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    if k > 0 {
        matmul_acc(a, b, &mut out, m, k, n);
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Row-major strides for a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let gather: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    if numel == 0 {
        return (out, out_shape);
    }
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += gather[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= gather[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn kernel_matches_triple_loop() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let fast = matmul(&a, &b, m, k, n);
        let slow = naive(&a, &b, m, k, n);
        for (x, y) in fast.iter().zip(&slow) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_swaps_axes() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let (out, shape) = permute(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, transpose(&data, 2, 3));
        let (back, _) = permute(&out, &shape, &[1, 0]);
        assert_eq!(back, data);
    }

    #[test]
    fn permute_rank4_round_trip() {
        let shape = [2, 3, 4, 5];
        let data: Vec<f64> = (0..120).map(f64::from).collect();
        let (p, ps) = permute(&data, &shape, &[0, 2, 1, 3]);
        assert_eq!(ps, vec![2, 4, 3, 5]);
        let t = Tensor::new(ps.clone(), p.clone()).unwrap();
        let src = Tensor::new(shape.to_vec(), data.clone()).unwrap();
        assert_eq!(t.at(&[1, 3, 2, 4]), src.at(&[1, 2, 3, 4]));
        let (back, _) = permute(&p, &ps, &[0, 2, 1, 3]);
        assert_eq!(back, data);
    }

    #[test]
    fn new_rejects_wrong_length() {
        assert!(matches!(
            Tensor::new([2, 2], vec![1.0; 3]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn concat_and_slice() {
        let a = Tensor::new([1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new([2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = Tensor::concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.slice_rows(1, 3).unwrap(), b);
    }
}
