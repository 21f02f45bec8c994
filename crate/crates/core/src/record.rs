//! Reverse-mode automatic differentiation over a linear compute record.
//!
//! Every primitive applied through a [`ComputeRecord`] appends one entry that
//! stores the operand identities, whatever constants the adjoint needs, and
//! the output value. [`ComputeRecord::gradients`] walks the entries backwards;
//! [`ComputeRecord::replay`] re-evaluates them (optionally with one tensor
//! overridden), which is what the finite-difference checker uses.
//!
//! ```
//! use cmc::record::ComputeRecord;
//! use cmc::tensor::Tensor;
//!
//! let mut rec = ComputeRecord::new();
//! let x = rec.input(Tensor::scalar(3.0));
//! let y = rec.mul(x, x).unwrap();
//! let grads = rec.gradients(y).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), 6.0);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CmcError, Result};
use crate::tensor::{self, Tensor};

static NEXT_RECORD: AtomicU64 = AtomicU64::new(1);

/// Identity of a tensor produced on a specific record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId {
    record: u64,
    index: usize,
}

impl TensorId {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone)]
enum Op {
    Input,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    Embed { table: usize, ids: Arc<Vec<usize>> },
    Transpose(usize),
    CausalMask(usize),
    Sum(usize),
    SelectRow(usize, usize),
    DotConst(usize, Arc<Vec<f64>>),
    ReplaceRow { x: usize, row: usize, values: Arc<Vec<f64>> },
}

#[derive(Debug, Clone)]
struct Entry {
    op: Op,
    value: Arc<Tensor>,
}

/// Ordered log of primitive applications for one forward pass.
#[derive(Debug)]
pub struct ComputeRecord {
    id: u64,
    recording: bool,
    entries: Vec<Entry>,
}

impl Default for ComputeRecord {
    fn default() -> Self {
        Self::new()
    }
}

impl ComputeRecord {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    /// A record that only evaluates. Values are identical to a recording
    /// pass but no adjoint information is kept.
    pub fn detached() -> Self {
        Self::with_recording(false)
    }

    pub fn with_recording(recording: bool) -> Self {
        Self {
            id: NEXT_RECORD.fetch_add(1, Ordering::Relaxed),
            recording,
            entries: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn resolve(&self, id: TensorId) -> Result<usize> {
        if id.record != self.id || id.index >= self.entries.len() {
            return Err(CmcError::UnknownTensor {
                record: self.id,
                index: id.index,
            });
        }
        Ok(id.index)
    }

    pub fn value(&self, id: TensorId) -> Result<&Tensor> {
        let i = self.resolve(id)?;
        Ok(&self.entries[i].value)
    }

    pub fn shared_value(&self, id: TensorId) -> Result<Arc<Tensor>> {
        let i = self.resolve(id)?;
        Ok(Arc::clone(&self.entries[i].value))
    }

    fn push(&mut self, op: Op, value: Tensor) -> TensorId {
        let op = if self.recording { op } else { Op::Input };
        self.entries.push(Entry {
            op,
            value: Arc::new(value),
        });
        TensorId {
            record: self.id,
            index: self.entries.len() - 1,
        }
    }

    /// Register an externally produced tensor (weights, constants, patches).
    pub fn input(&mut self, t: impl Into<Arc<Tensor>>) -> TensorId {
        self.entries.push(Entry {
            op: Op::Input,
            value: t.into(),
        });
        TensorId {
            record: self.id,
            index: self.entries.len() - 1,
        }
    }

    fn v(&self, i: usize) -> &Tensor {
        &self.entries[i].value
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let out = tensor::matmul(self.v(a), self.v(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let out = tensor::add(self.v(a), self.v(b))?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn add_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let out = tensor::add_row(self.v(a), self.v(b))?;
        Ok(self.push(Op::AddRow(a, b), out))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let out = tensor::mul(self.v(a), self.v(b))?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn mul_row(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (a, b) = (self.resolve(a)?, self.resolve(b)?);
        let out = tensor::mul_row(self.v(a), self.v(b))?;
        Ok(self.push(Op::MulRow(a, b), out))
    }

    pub fn scale(&mut self, a: TensorId, s: f64) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::scale(self.v(a), s);
        Ok(self.push(Op::Scale(a, s), out))
    }

    pub fn gelu(&mut self, a: TensorId) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::gelu(self.v(a));
        Ok(self.push(Op::Gelu(a), out))
    }

    pub fn softmax_last_dim(&mut self, a: TensorId) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::softmax_last_dim(self.v(a))?;
        Ok(self.push(Op::Softmax(a), out))
    }

    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (x, gain, bias) = (self.resolve(x)?, self.resolve(gain)?, self.resolve(bias)?);
        let out = tensor::layer_norm(self.v(x), self.v(gain), self.v(bias))?;
        Ok(self.push(Op::LayerNorm { x, gain, bias }, out))
    }

    pub fn embed_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let table = self.resolve(table)?;
        let out = tensor::embed_lookup(self.v(table), ids)?;
        Ok(self.push(
            Op::Embed {
                table,
                ids: Arc::new(ids.to_vec()),
            },
            out,
        ))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::transpose(self.v(a))?;
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn causal_mask(&mut self, a: TensorId) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::causal_mask(self.v(a))?;
        Ok(self.push(Op::CausalMask(a), out))
    }

    pub fn sum_all(&mut self, a: TensorId) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::sum_all(self.v(a));
        Ok(self.push(Op::Sum(a), out))
    }

    pub fn select_row(&mut self, a: TensorId, row: usize) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::select_row(self.v(a), row)?;
        Ok(self.push(Op::SelectRow(a, row), out))
    }

    pub fn dot_const(&mut self, a: TensorId, weights: Arc<Vec<f64>>) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::dot_const(self.v(a), &weights)?;
        Ok(self.push(Op::DotConst(a, weights), out))
    }

    pub fn replace_row(&mut self, a: TensorId, row: usize, values: Arc<Vec<f64>>) -> Result<TensorId> {
        let a = self.resolve(a)?;
        let out = tensor::replace_row(self.v(a), row, &values)?;
        Ok(self.push(Op::ReplaceRow { x: a, row, values }, out))
    }

    fn eval(op: &Op, vals: &[Arc<Tensor>]) -> Result<Tensor> {
        let v = |i: usize| -> &Tensor { &vals[i] };
        Ok(match op {
            Op::Input => unreachable!("inputs are not re-evaluated"),
            Op::MatMul(a, b) => tensor::matmul(v(*a), v(*b))?,
            Op::Add(a, b) => tensor::add(v(*a), v(*b))?,
            Op::AddRow(a, b) => tensor::add_row(v(*a), v(*b))?,
            Op::Mul(a, b) => tensor::mul(v(*a), v(*b))?,
            Op::MulRow(a, b) => tensor::mul_row(v(*a), v(*b))?,
            Op::Scale(a, s) => tensor::scale(v(*a), *s),
            Op::Gelu(a) => tensor::gelu(v(*a)),
            Op::Softmax(a) => tensor::softmax_last_dim(v(*a))?,
            Op::LayerNorm { x, gain, bias } => tensor::layer_norm(v(*x), v(*gain), v(*bias))?,
            Op::Embed { table, ids } => tensor::embed_lookup(v(*table), ids)?,
            Op::Transpose(a) => tensor::transpose(v(*a))?,
            Op::CausalMask(a) => tensor::causal_mask(v(*a))?,
            Op::Sum(a) => tensor::sum_all(v(*a)),
            Op::SelectRow(a, r) => tensor::select_row(v(*a), *r)?,
            Op::DotConst(a, w) => tensor::dot_const(v(*a), w)?,
            Op::ReplaceRow { x, row, values } => tensor::replace_row(v(*x), *row, values)?,
        })
    }

    /// Re-evaluate the record. `overrides` replace the value of the given
    /// tensors; everything downstream of them is recomputed.
    pub fn replay(&self, overrides: &[(TensorId, Tensor)]) -> Result<Vec<Arc<Tensor>>> {
        if !self.recording {
            return Err(CmcError::NotRecording(self.id));
        }
        let mut forced: Vec<Option<Arc<Tensor>>> = vec![None; self.entries.len()];
        for (id, t) in overrides {
            let i = self.resolve(*id)?;
            if t.shape() != self.entries[i].value.shape() {
                return Err(CmcError::Shape {
                    op: "replay",
                    left: self.entries[i].value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            forced[i] = Some(Arc::new(t.clone()));
        }
        let first = forced.iter().position(Option::is_some).unwrap_or(self.entries.len());
        let mut vals: Vec<Arc<Tensor>> = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            let value = if let Some(t) = forced[i].take() {
                t
            } else if i < first || matches!(e.op, Op::Input) {
                Arc::clone(&e.value)
            } else {
                Arc::new(Self::eval(&e.op, &vals)?)
            };
            vals.push(value);
        }
        Ok(vals)
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every
    /// tensor on the record.
    pub fn gradients(&self, loss: TensorId) -> Result<Gradients> {
        if !self.recording {
            return Err(CmcError::NotRecording(self.id));
        }
        let li = self.resolve(loss)?;
        if self.entries[li].value.len() != 1 {
            return Err(CmcError::NonScalarLoss(self.entries[li].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; li + 1];
        grads[li] = Some(Tensor::filled(self.entries[li].value.shape(), 1.0));

        fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
            match &mut grads[i] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = &self.entries[i].op;
            let v = |j: usize| -> &Tensor { &self.entries[j].value };
            match op {
                Op::Input => {}
                Op::MatMul(a, b) => {
                    let (da, db) = tensor::matmul_adjoint(v(*a), v(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, b) => {
                    let db = tensor::add_row_adjoint_bias(&g, v(*b).len());
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let da = tensor::mul(&g, v(*b))?;
                    let db = tensor::mul(&g, v(*a))?;
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MulRow(a, b) => {
                    let (da, db) = tensor::mul_row_adjoint(v(*a), v(*b), &g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, tensor::scale(&g, *s)),
                Op::Gelu(a) => acc(&mut grads, *a, tensor::gelu_adjoint(v(*a), &g)),
                Op::Softmax(a) => {
                    let y = &self.entries[i].value;
                    acc(&mut grads, *a, tensor::softmax_adjoint(y, &g));
                }
                Op::LayerNorm { x, gain, bias } => {
                    let (dx, dg, db) = tensor::layer_norm_adjoint(v(*x), v(*gain), &g);
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gain, dg);
                    acc(&mut grads, *bias, db);
                }
                Op::Embed { table, ids } => {
                    let dt = tensor::embed_adjoint(v(*table).shape(), ids, &g);
                    acc(&mut grads, *table, dt);
                }
                Op::Transpose(a) => acc(&mut grads, *a, tensor::transpose(&g)?),
                Op::CausalMask(a) => acc(&mut grads, *a, tensor::causal_mask_adjoint(&g)),
                Op::Sum(a) => {
                    let shape = v(*a).shape().to_vec();
                    acc(&mut grads, *a, Tensor::filled(&shape, g.item()));
                }
                Op::SelectRow(a, r) => {
                    acc(&mut grads, *a, tensor::select_row_adjoint(v(*a).shape(), *r, &g))
                }
                Op::DotConst(a, w) => {
                    let d = Tensor::vector(w.iter().map(|x| x * g.item()).collect());
                    acc(&mut grads, *a, d);
                }
                Op::ReplaceRow { x, row, .. } => {
                    acc(&mut grads, *x, tensor::replace_row_adjoint(*row, &g))
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients {
            record: self.id,
            shapes: self.entries.iter().map(|e| e.value.shape().to_vec()).collect(),
            grads,
        })
    }
}

/// dLoss/dT for every tensor on a record.
#[derive(Debug)]
pub struct Gradients {
    record: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`. Tensors the loss does not
    /// depend on get an all-zero gradient.
    pub fn get(&self, id: TensorId) -> Result<Tensor> {
        if id.record != self.record || id.index >= self.shapes.len() {
            return Err(CmcError::UnknownTensor {
                record: self.record,
                index: id.index,
            });
        }
        Ok(match self.grads.get(id.index) {
            Some(Some(g)) => g.clone(),
            _ => Tensor::zeros(&self.shapes[id.index]),
        })
    }
}

/// Below this analytic magnitude the checker compares absolute error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compare reverse-mode gradients against central differences at `probes`
/// coordinates drawn (deterministically from `seed`) across the `wrt`
/// tensors. Returns the worst error: relative where the analytic gradient is
/// at least [`GRAD_CHECK_FLOOR`], absolute otherwise.
pub fn check_gradients(
    record: &ComputeRecord,
    loss: TensorId,
    wrt: &[TensorId],
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let grads = record.gradients(loss)?;
    let sizes: Vec<usize> = wrt
        .iter()
        .map(|id| record.value(*id).map(Tensor::len))
        .collect::<Result<_>>()?;
    let total: usize = sizes.iter().sum();
    if total == 0 || probes == 0 {
        return Err(CmcError::Empty("gradient probes"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, total, probes.min(total)).into_vec();

    let loss_index = record.resolve(loss)?;
    let mut worst: f64 = 0.0;
    for flat in picks {
        let (mut t, mut off) = (0, flat);
        while off >= sizes[t] {
            off -= sizes[t];
            t += 1;
        }
        let id = wrt[t];
        let analytic = grads.get(id)?.data()[off];
        let base = record.value(id)?.clone();
        let eval_at = |delta: f64| -> Result<f64> {
            let mut p = base.clone();
            p.data_mut()[off] += delta;
            Ok(record.replay(&[(id, p)])?[loss_index].item())
        };
        let fd = (eval_at(h)? - eval_at(-h)?) / (2.0 * h);
        let err = if analytic.abs() < GRAD_CHECK_FLOOR {
            (analytic - fd).abs()
        } else {
            (analytic - fd).abs() / analytic.abs().max(fd.abs())
        };
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut rec = ComputeRecord::new();
        let x = rec.input(Tensor::scalar(3.0));
        let y = rec.mul(x, x).unwrap();
        let g = rec.gradients(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn linear_map_gradient_is_column_sums() {
        let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let mut rec = ComputeRecord::new();
        let ai = rec.input(a);
        let x = rec.input(Tensor::matrix(3, 1, vec![0.3, -0.1, 2.0]).unwrap());
        let y = rec.matmul(ai, x).unwrap();
        let s = rec.sum_all(y).unwrap();
        let g = rec.gradients(s).unwrap().get(x).unwrap();
        assert_eq!(g.data(), &[5.0, 7.0, 9.0]);
    }

    #[test]
    fn foreign_tensor_is_rejected() {
        let mut a = ComputeRecord::new();
        let mut b = ComputeRecord::new();
        let xa = a.input(Tensor::scalar(1.0));
        let xb = b.input(Tensor::scalar(1.0));
        let s = a.sum_all(xa).unwrap();
        let g = a.gradients(s).unwrap();
        assert!(matches!(g.get(xb), Err(CmcError::UnknownTensor { .. })));
        assert!(a.value(xb).is_err());
    }

    #[test]
    fn detached_record_refuses_gradients() {
        let mut rec = ComputeRecord::detached();
        let x = rec.input(Tensor::scalar(2.0));
        let y = rec.mul(x, x).unwrap();
        assert_eq!(rec.value(y).unwrap().item(), 4.0);
        assert!(matches!(rec.gradients(y), Err(CmcError::NotRecording(_))));
    }

    #[test]
    fn quadratic_gradient_check_is_tight() {
        let mut rec = ComputeRecord::new();
        let x = rec.input(Tensor::vector(vec![0.5, -1.5, 2.0, 0.0]));
        let y = rec.mul(x, x).unwrap();
        let s = rec.sum_all(y).unwrap();
        let err = check_gradients(&rec, s, &[x], 4, 1e-5, 7).unwrap();
        assert!(err <= 1e-8, "{err}");
    }

    #[test]
    fn replay_without_overrides_is_bit_identical() {
        let mut rec = ComputeRecord::new();
        let x = rec.input(Tensor::matrix(2, 2, vec![0.1, 0.2, -0.3, 0.4]).unwrap());
        let g = rec.gelu(x).unwrap();
        let sm = rec.softmax_last_dim(g).unwrap();
        let out = rec.sum_all(sm).unwrap();
        let vals = rec.replay(&[]).unwrap();
        assert_eq!(vals[out.index()].item(), rec.value(out).unwrap().item());
    }
}
