//! Dense row-major `f64` tensors and the forward/adjoint rules of every
//! primitive the toy transformer needs.
//!
//! Primitives are free functions over borrowed tensors so that the compute
//! record can replay them verbatim; the record owns the bookkeeping.

use crate::error::{CmcError, Result};

/// Epsilon used by every layer norm.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Value written above the diagonal by [`causal_mask`]. Finite so that every
/// tensor stays finite; `exp` of it underflows to exactly zero after the
/// softmax shift.
pub const MASK_VALUE: f64 = -1e30;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(CmcError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a 2-D tensor.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn set2(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.shape[1];
        self.data[r * cols + c] = v;
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape("dot", self, other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(CmcError::Shape {
            op,
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    Ok(())
}

fn require_2d(op: &'static str, a: &Tensor) -> Result<(usize, usize)> {
    a.dims2().ok_or_else(|| CmcError::Shape {
        op,
        left: a.shape.clone(),
        right: vec![0, 0],
    })
}

fn last_dim(op: &'static str, a: &Tensor) -> Result<usize> {
    a.shape.last().copied().ok_or_else(|| CmcError::Shape {
        op,
        left: a.shape.clone(),
        right: vec![1],
    })
}

// ---------------------------------------------------------------------------
// Forward rules
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d("matmul", a)?;
    let (k2, n) = require_2d("matmul", b)?;
    if k != k2 {
        return Err(CmcError::Shape {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("add", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    })
}

/// `a + b` with `b` broadcast over every row of `a` along the last dimension.
pub fn add_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = last_dim("add_row", a)?;
    if b.shape != [n] {
        return Err(CmcError::Shape {
            op: "add_row",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for chunk in data.chunks_mut(n) {
        for (x, y) in chunk.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape("mul", a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    })
}

/// `a * b` with `b` broadcast over rows.
pub fn mul_row(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = last_dim("mul_row", a)?;
    if b.shape != [n] {
        return Err(CmcError::Shape {
            op: "mul_row",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut data = a.data.clone();
    for chunk in data.chunks_mut(n) {
        for (x, y) in chunk.iter_mut().zip(&b.data) {
            *x *= y;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|x| x * s).collect(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Tanh-approximated GELU.
pub fn gelu(a: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|&x| gelu_scalar(x)).collect(),
    }
}

pub fn softmax_last_dim(a: &Tensor) -> Result<Tensor> {
    let n = last_dim("softmax", a)?;
    let mut data = a.data.clone();
    for row in data.chunks_mut(n) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

/// Normalise over the last dimension, then apply `gain` and `bias`.
pub fn layer_norm(a: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let n = last_dim("layer_norm", a)?;
    if gain.shape != [n] || bias.shape != [n] {
        return Err(CmcError::Shape {
            op: "layer_norm",
            left: a.shape.clone(),
            right: gain.shape.clone(),
        });
    }
    let mut data = Vec::with_capacity(a.data.len());
    for row in a.data.chunks(n) {
        let (mean, inv_std) = row_stats(row);
        for (i, &x) in row.iter().enumerate() {
            data.push((x - mean) * inv_std * gain.data[i] + bias.data[i]);
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

pub fn embed_lookup(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    let (rows, cols) = require_2d("embed_lookup", table)?;
    let mut data = Vec::with_capacity(ids.len() * cols);
    for &id in ids {
        if id >= rows {
            return Err(CmcError::Shape {
                op: "embed_lookup",
                left: table.shape.clone(),
                right: vec![id],
            });
        }
        data.extend_from_slice(table.row(id));
    }
    Ok(Tensor {
        shape: vec![ids.len(), cols],
        data,
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d("transpose", a)?;
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data,
    })
}

/// Replace every entry strictly above the diagonal with [`MASK_VALUE`].
pub fn causal_mask(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d("causal_mask", a)?;
    let mut data = a.data.clone();
    for i in 0..m {
        for j in (i + 1)..n {
            data[i * n + j] = MASK_VALUE;
        }
    }
    Ok(Tensor {
        shape: a.shape.clone(),
        data,
    })
}

pub fn sum_all(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

pub fn select_row(a: &Tensor, r: usize) -> Result<Tensor> {
    let (m, _) = require_2d("select_row", a)?;
    if r >= m {
        return Err(CmcError::Shape {
            op: "select_row",
            left: a.shape.clone(),
            right: vec![r],
        });
    }
    Ok(Tensor::vector(a.row(r).to_vec()))
}

pub fn dot_const(a: &Tensor, w: &[f64]) -> Result<Tensor> {
    if a.shape.len() != 1 || a.len() != w.len() {
        return Err(CmcError::Shape {
            op: "dot_const",
            left: a.shape.clone(),
            right: vec![w.len()],
        });
    }
    Ok(Tensor::scalar(a.data.iter().zip(w).map(|(x, y)| x * y).sum()))
}

pub fn replace_row(a: &Tensor, r: usize, values: &[f64]) -> Result<Tensor> {
    let (m, n) = require_2d("replace_row", a)?;
    if r >= m || values.len() != n {
        return Err(CmcError::Shape {
            op: "replace_row",
            left: a.shape.clone(),
            right: vec![r, values.len()],
        });
    }
    let mut out = a.clone();
    out.row_mut(r).copy_from_slice(values);
    Ok(out)
}

// ---------------------------------------------------------------------------
// Adjoint rules. Each returns the gradient contribution for its operands
// given the output gradient `g`.
// ---------------------------------------------------------------------------

pub(crate) fn matmul_adjoint(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let bt = transpose(b).expect("2-D");
    let at = transpose(a).expect("2-D");
    (matmul(g, &bt).expect("shapes"), matmul(&at, g).expect("shapes"))
}

pub(crate) fn add_row_adjoint_bias(g: &Tensor, n: usize) -> Tensor {
    let mut out = vec![0.0; n];
    for chunk in g.data.chunks(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::vector(out)
}

pub(crate) fn mul_row_adjoint(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let n = b.len();
    let da = mul_row(g, b).expect("shapes");
    let mut db = vec![0.0; n];
    for (ga, aa) in g.data.chunks(n).zip(a.data.chunks(n)) {
        for i in 0..n {
            db[i] += ga[i] * aa[i];
        }
    }
    (da, Tensor::vector(db))
}

pub(crate) fn gelu_adjoint(a: &Tensor, g: &Tensor) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a
            .data
            .iter()
            .zip(&g.data)
            .map(|(&x, &gv)| gv * gelu_grad_scalar(x))
            .collect(),
    }
}

pub(crate) fn softmax_adjoint(y: &Tensor, g: &Tensor) -> Tensor {
    let n = *y.shape.last().expect("non-scalar");
    let mut data = Vec::with_capacity(y.len());
    for (yr, gr) in y.data.chunks(n).zip(g.data.chunks(n)) {
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for (yv, gv) in yr.iter().zip(gr) {
            data.push(yv * (gv - inner));
        }
    }
    Tensor {
        shape: y.shape.clone(),
        data,
    }
}

pub(crate) fn layer_norm_adjoint(
    x: &Tensor,
    gain: &Tensor,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let n = gain.len();
    let nf = n as f64;
    let mut dx = Vec::with_capacity(x.len());
    let mut dgain = vec![0.0; n];
    let mut dbias = vec![0.0; n];
    for (row, grow) in x.data.chunks(n).zip(g.data.chunks(n)) {
        let (mean, inv_std) = row_stats(row);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv_std).collect();
        let dxhat: Vec<f64> = grow.iter().zip(&gain.data).map(|(a, b)| a * b).collect();
        let mean_dxhat = dxhat.iter().sum::<f64>() / nf;
        let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / nf;
        for i in 0..n {
            dx.push(inv_std * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat));
            dgain[i] += grow[i] * xhat[i];
            dbias[i] += grow[i];
        }
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: dx,
        },
        Tensor::vector(dgain),
        Tensor::vector(dbias),
    )
}

pub(crate) fn embed_adjoint(table_shape: &[usize], ids: &[usize], g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(table_shape);
    for (r, &id) in ids.iter().enumerate() {
        let src = g.row(r).to_vec();
        for (o, v) in out.row_mut(id).iter_mut().zip(src) {
            *o += v;
        }
    }
    out
}

pub(crate) fn causal_mask_adjoint(g: &Tensor) -> Tensor {
    let (m, n) = g.dims2().expect("2-D");
    let mut out = g.clone();
    for i in 0..m {
        for j in (i + 1)..n {
            out.data[i * n + j] = 0.0;
        }
    }
    out
}

pub(crate) fn select_row_adjoint(shape: &[usize], r: usize, g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(shape);
    out.row_mut(r).copy_from_slice(&g.data);
    out
}

pub(crate) fn replace_row_adjoint(r: usize, g: &Tensor) -> Tensor {
    let mut out = g.clone();
    out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_is_noop() {
        let a = Tensor::matrix(3, 3, (0..9).map(|v| v as f64 * 0.7 - 2.0).collect()).unwrap();
        let out = matmul(&Tensor::identity(3), &a).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let out = softmax_last_dim(&Tensor::vector(vec![0.0; 3])).unwrap();
        for v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_fixed_point_at_zero() {
        assert_eq!(gelu(&Tensor::scalar(0.0)).item(), 0.0);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_rows_have_zero_mean_unit_variance() {
        let a = Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 8.0, 2.0]).unwrap();
        let out = layer_norm(&a, &Tensor::filled(&[4], 1.0), &Tensor::zeros(&[4])).unwrap();
        for r in 0..2 {
            let row = out.row(r);
            let mean: f64 = row.iter().sum::<f64>() / 4.0;
            let var: f64 = row.iter().map(|v| v * v).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn causal_mask_then_softmax_zeroes_future() {
        let s = causal_mask(&Tensor::zeros(&[3, 3])).unwrap();
        let p = softmax_last_dim(&s).unwrap();
        assert!(p.is_finite());
        assert_eq!(p.get2(0, 1), 0.0);
        assert!((p.get2(1, 0) - 0.5).abs() < 1e-15);
    }
}
