//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every operation appends one node holding its output value and whatever
//! intermediates its gradient rule needs. Nodes only reference earlier
//! nodes, so insertion order is a topological order and
//! [`Tape::backward`] is a single reverse sweep.
//!
//! A tape is single-writer: one forward/backward pass owns it. Any operation
//! that would produce NaN or ±∞ fails with [`Error::NonFinite`] naming it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, ensure_finite, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

/// Surrogate for −∞ on masked attention logits.
pub const MASKED_LOGIT: f64 = -1e30;

const GELU_K0: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_K1: f64 = 0.044_715;

/// Batch statistics observed by a train-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n − 1) variance, the convention used for running estimates.
    pub var_unbiased: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf {
        name: Option<String>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Binary {
        a: Var,
        b: Var,
        kind: BinaryKind,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Sum {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of grad-enabled leaves reached by a backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    leaves: BTreeMap<usize, Tensor>,
    names: BTreeMap<String, usize>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.leaves.get(&var.0)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.get(name).and_then(|i| self.leaves.get(i))
    }

    /// Named parameter gradients in name order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names
            .iter()
            .filter_map(|(n, i)| self.leaves.get(i).map(|t| (n.as_str(), t)))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn broadcast_suffix(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let ok = !b.is_empty() && b.len() <= a.len() && a[a.len() - b.len()..] == *b;
    if ok || a == b {
        Ok(())
    } else {
        Err(Error::shape(
            op,
            format!("{b:?} does not broadcast over trailing axes of {a:?}"),
        ))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        ensure_finite(name, value.data())?;
        Ok(self.push(value, op, requires_grad))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { name: None }, requires_grad)
    }

    /// Grad-enabled leaf reported under `name` by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        self.push(
            value,
            Op::Leaf {
                name: Some(name.into()),
            },
            true,
        )
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Matrix product over the last two axes.
    ///
    /// `b` is either a matrix shared by every leading index of `a`, or has
    /// exactly the same leading (batch) dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(err());
        }
        let k = sa[sa.len() - 1];
        let n = sb[sb.len() - 1];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (data, mut shape) = if sb.len() == 2 {
            let m = av.len() / k.max(1);
            let m = if k == 0 {
                sa[..sa.len() - 1].iter().product()
            } else {
                m
            };
            (tensor::matmul(av, bv, m, k, n), sa[..sa.len() - 1].to_vec())
        } else {
            if sa.len() != sb.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(err());
            }
            let batch: usize = sa[..sa.len() - 2].iter().product();
            let m = sa[sa.len() - 2];
            let mut out = Vec::with_capacity(batch * m * n);
            for i in 0..batch {
                out.extend(tensor::matmul(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    m,
                    k,
                    n,
                ));
            }
            (out, sa[..sa.len() - 1].to_vec())
        };
        shape.push(n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked("matmul", Tensor::new(shape, data)?, Op::MatMul { a, b }, rg)
    }

    /// Pointwise add/sub/mul. `b` may be a suffix of `a`'s shape, in which
    /// case it is repeated over the leading axes (bias, position tables).
    pub fn elementwise(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        broadcast_suffix(name, self.shape(a), self.shape(b))?;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let bn = bv.len();
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = bv[i % bn];
                match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                }
            })
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push_checked(name, value, Op::Binary { a, b, kind }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let v = self.value(x);
        let data = v.data().iter().map(|e| e * factor).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push_checked("scale", value, Op::Scale { x, factor }, rg)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = tensor::axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| o * len * inner + l * inner + i;
                let max = (0..len)
                    .map(|l| src[at(l)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    out[at(l)] = e;
                    sum += e;
                }
                for l in 0..len {
                    out[at(l)] /= sum;
                }
            }
        }
        let rg = self.requires_grad(x);
        self.push_checked(
            "softmax",
            Tensor::new(shape, out)?,
            Op::Softmax { x, axis },
            rg,
        )
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let v = self.value(x);
        let data = v
            .data()
            .iter()
            .map(|&e| match kind {
                Activation::Sigmoid => sigmoid(e),
                Activation::Gelu => {
                    let u = GELU_K0 * (e + GELU_K1 * e * e * e);
                    0.5 * e * (1.0 + u.tanh())
                }
            })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let name = match kind {
            Activation::Sigmoid => "sigmoid",
            Activation::Gelu => "gelu",
        };
        let rg = self.requires_grad(x);
        self.push_checked(name, value, Op::Activation { x, kind }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Gelu)
    }

    /// Normalises each slice along the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} must be [{d}] for input {shape:?}",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::Param(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d.max(1);
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        };
        self.push_checked("layer_norm", Tensor::new(shape, out)?, op, rg)
    }

    /// Train-mode batch norm over axis 0 of a `[batch, features]` input.
    ///
    /// Normalises with the biased batch variance and reports the batch mean
    /// and unbiased variance for running-statistics updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (n, f) = self.bn_dims(x, gamma, beta)?;
        if n < 2 {
            return Err(Error::DegenerateBatch(format!(
                "train-mode batch norm needs at least 2 rows, got {n}"
            )));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = vec![0.0; f];
        for r in 0..n {
            for j in 0..f {
                mean[j] += src[r * f + j];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut sq = vec![0.0; f];
        for r in 0..n {
            for j in 0..f {
                let c = src[r * f + j] - mean[j];
                sq[j] += c * c;
            }
        }
        let inv_std: Vec<f64> = sq
            .iter()
            .map(|s| 1.0 / (s / n as f64 + eps).sqrt())
            .collect();
        let var_unbiased = sq.iter().map(|s| s / (n - 1) as f64).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for r in 0..n {
            for j in 0..f {
                let h = (src[r * f + j] - mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let value = Tensor::new([n, f], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: true,
        };
        let out = self.push_checked("batch_norm", value, op, rg)?;
        Ok((out, BatchStats { mean, var_unbiased }))
    }

    /// Eval-mode batch norm using fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, f) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != f || running_var.len() != f {
            return Err(Error::shape(
                "batch_norm",
                format!("running statistics must have {f} entries"),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for r in 0..n {
            for j in 0..f {
                let h = (src[r * f + j] - running_mean[j]) * inv_std[j];
                xhat[r * f + j] = h;
                out[r * f + j] = g[j] * h + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        let value = Tensor::new([n, f], out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train: false,
        };
        self.push_checked("batch_norm", value, op, rg)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize)> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape(
                "batch_norm",
                format!("expected [batch, features], got {s:?}"),
            ));
        }
        let f = s[1];
        if self.shape(gamma) != [f] || self.shape(beta) != [f] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma/beta must be [{f}]"),
            ));
        }
        Ok((s[0], f))
    }

    /// Arithmetic mean along `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::shape(
                "reduce_mean",
                format!("axis {axis} invalid for shape {shape:?}"),
            ));
        }
        let (outer, len, inner) = tensor::axis_extents(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[o * len * inner + l * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= len as f64);
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.requires_grad(x);
        self.push_checked(
            "reduce_mean",
            Tensor::new(out_shape, out)?,
            Op::Mean { x, axis },
            rg,
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let rg = self.requires_grad(x);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape(
                "embedding_lookup",
                format!("table must be [vocab, d], got {shape:?}"),
            ));
        }
        let (vocab, d) = (shape[0], shape[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::index(
                "embedding_lookup",
                format!("id {bad} out of range for vocabulary of {vocab}"),
            ));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.requires_grad(table);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push_checked(
            "embedding_lookup",
            Tensor::new([ids.len(), d], out)?,
            op,
            rg,
        )
    }

    /// Inverted dropout. With `training == false` or `p == 0` the input
    /// handle itself is returned.
    pub fn dropout(&mut self, x: Var, p: f64, training: bool, rng: &mut RngStream) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Param(format!(
                "dropout p must lie in [0, 1), got {p}"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - p);
        let v = self.value(x);
        let mask: Vec<f64> = (0..v.numel())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep_scale })
            .collect();
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push_checked("dropout", value, Op::Dropout { x, mask }, rg)
    }

    /// Mean over the batch of `−log softmax(logits)[target]`.
    /// Accepts `[batch, classes]` or a single `[classes]` row.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let (batch, classes) = match shape.as_slice() {
            [c] => (1, *c),
            [b, c] => (*b, *c),
            _ => {
                return Err(Error::shape(
                    "cross_entropy",
                    format!("logits must be [batch, classes], got {shape:?}"),
                ))
            }
        };
        if targets.len() != batch || batch == 0 {
            return Err(Error::shape(
                "cross_entropy",
                format!("{} targets for batch of {batch}", targets.len()),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::index(
                "cross_entropy",
                format!("target {bad} out of range for {classes} classes"),
            ));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; src.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &src[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += (max - row[t]) + sum.ln();
            for c in 0..classes {
                probs[r * classes + c] = (row[c] - lse).exp();
            }
        }
        let rg = self.requires_grad(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(total / batch as f64),
            op,
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        let valid = perm.len() == shape.len()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::shape(
                "permute",
                format!("{perm:?} is not a permutation of the axes of {shape:?}"),
            ));
        }
        let (data, out_shape) = tensor::permute(self.value(x).data(), &shape, perm);
        let rg = self.requires_grad(x);
        let op = Op::Permute {
            x,
            perm: perm.to_vec(),
        };
        Ok(self.push(Tensor::new(out_shape, data)?, op, rg))
    }

    /// Replaces entries where `keep` is false with [`MASKED_LOGIT`].
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>) -> Result<Var> {
        let v = self.value(x);
        if keep.len() != v.numel() {
            return Err(Error::shape(
                "mask_fill",
                format!("mask of {} entries for shape {:?}", keep.len(), v.shape()),
            ));
        }
        let data = v
            .data()
            .iter()
            .zip(&keep)
            .map(|(&e, &k)| if k { e } else { MASKED_LOGIT })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.requires_grad(x);
        self.push_checked("mask_fill", value, Op::MaskFill { x, keep }, rg)
    }

    /// Exact reverse-mode gradients of a scalar `loss` with respect to every
    /// grad-enabled leaf it depends on.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.requires_grad(loss) {
            return Err(Error::Contract(
                "loss does not depend on any grad-enabled leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let rg = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf { name } => {
                    if let Some(n) = name {
                        out.names.insert(n.clone(), idx);
                    }
                    out.leaves
                        .insert(idx, Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let sa = av.shape();
                    let sb = bv.shape();
                    let k = sa[sa.len() - 1];
                    let n = sb[sb.len() - 1];
                    if sb.len() == 2 {
                        let m = g.len() / n.max(1);
                        if rg(*a) {
                            let bt = tensor::transpose(bv.data(), k, n);
                            accumulate(&mut grads, *a, tensor::matmul(&g, &bt, m, n, k));
                        }
                        if rg(*b) {
                            let at = tensor::transpose(av.data(), m, k);
                            accumulate(&mut grads, *b, tensor::matmul(&at, &g, k, m, n));
                        }
                    } else {
                        let batch: usize = sa[..sa.len() - 2].iter().product();
                        let m = sa[sa.len() - 2];
                        if rg(*a) {
                            let mut da = Vec::with_capacity(av.numel());
                            for i in 0..batch {
                                let bt =
                                    tensor::transpose(&bv.data()[i * k * n..(i + 1) * k * n], k, n);
                                da.extend(tensor::matmul(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &bt,
                                    m,
                                    n,
                                    k,
                                ));
                            }
                            accumulate(&mut grads, *a, da);
                        }
                        if rg(*b) {
                            let mut db = Vec::with_capacity(bv.numel());
                            for i in 0..batch {
                                let at =
                                    tensor::transpose(&av.data()[i * m * k..(i + 1) * m * k], m, k);
                                db.extend(tensor::matmul(
                                    &at,
                                    &g[i * m * n..(i + 1) * m * n],
                                    k,
                                    m,
                                    n,
                                ));
                            }
                            accumulate(&mut grads, *b, db);
                        }
                    }
                }
                Op::Binary { a, b, kind } => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let bn = bv.len();
                    if rg(*a) {
                        let da = match kind {
                            BinaryKind::Add | BinaryKind::Sub => g.clone(),
                            BinaryKind::Mul => g
                                .iter()
                                .enumerate()
                                .map(|(i, gi)| gi * bv[i % bn])
                                .collect(),
                        };
                        accumulate(&mut grads, *a, da);
                    }
                    if rg(*b) {
                        let mut db = vec![0.0; bn];
                        for (i, gi) in g.iter().enumerate() {
                            db[i % bn] += match kind {
                                BinaryKind::Add => *gi,
                                BinaryKind::Sub => -gi,
                                BinaryKind::Mul => gi * av[i],
                            };
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale { x, factor } => {
                    accumulate(&mut grads, *x, g.iter().map(|v| v * factor).collect());
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, len, inner) = tensor::axis_extents(node.value.shape(), *axis);
                    let mut dx = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| o * len * inner + l * inner + i;
                            let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Activation { x, kind } => {
                    let xv = self.value(*x).data();
                    let y = node.value.data();
                    let dx = match kind {
                        Activation::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(gi, yi)| gi * yi * (1.0 - yi))
                            .collect(),
                        Activation::Gelu => g
                            .iter()
                            .zip(xv)
                            .map(|(gi, &e)| {
                                let u = GELU_K0 * (e + GELU_K1 * e * e * e);
                                let t = u.tanh();
                                let du = GELU_K0 * (1.0 + 3.0 * GELU_K1 * e * e);
                                gi * (0.5 * (1.0 + t) + 0.5 * e * (1.0 - t * t) * du)
                            })
                            .collect(),
                    };
                    accumulate(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gamma).data();
                    let d = gv.len();
                    let rows = inv_std.len();
                    if rg(*x) {
                        let mut dx = vec![0.0; g.len()];
                        for r in 0..rows {
                            let s = r * d;
                            let mut sum_dh = 0.0;
                            let mut sum_dh_h = 0.0;
                            for j in 0..d {
                                let dh = g[s + j] * gv[j];
                                sum_dh += dh;
                                sum_dh_h += dh * xhat[s + j];
                            }
                            let k = inv_std[r] / d as f64;
                            for j in 0..d {
                                let dh = g[s + j] * gv[j];
                                dx[s + j] = k * (d as f64 * dh - sum_dh - xhat[s + j] * sum_dh_h);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    self.affine_param_grads(&mut grads, *gamma, *beta, &g, xhat, d);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let gv = self.value(*gamma).data();
                    let f = gv.len();
                    let n = g.len() / f.max(1);
                    if rg(*x) {
                        let mut dx = vec![0.0; g.len()];
                        if *train {
                            for j in 0..f {
                                let mut sum_dh = 0.0;
                                let mut sum_dh_h = 0.0;
                                for r in 0..n {
                                    let dh = g[r * f + j] * gv[j];
                                    sum_dh += dh;
                                    sum_dh_h += dh * xhat[r * f + j];
                                }
                                let k = inv_std[j] / n as f64;
                                for r in 0..n {
                                    let dh = g[r * f + j] * gv[j];
                                    dx[r * f + j] =
                                        k * (n as f64 * dh - sum_dh - xhat[r * f + j] * sum_dh_h);
                                }
                            }
                        } else {
                            for r in 0..n {
                                for j in 0..f {
                                    dx[r * f + j] = g[r * f + j] * gv[j] * inv_std[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    self.affine_param_grads(&mut grads, *gamma, *beta, &g, xhat, f);
                }
                Op::Mean { x, axis } => {
                    let shape = self.value(*x).shape();
                    let (outer, len, inner) = tensor::axis_extents(shape, *axis);
                    let mut dx = vec![0.0; outer * len * inner];
                    let scale = 1.0 / len as f64;
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                dx[o * len * inner + l * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum { x } => {
                    let n = self.value(*x).numel();
                    accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Embedding { table, ids } => {
                    let tv = self.value(*table);
                    let d = tv.shape()[1];
                    let mut dt = vec![0.0; tv.numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[id * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::Dropout { x, mask } => {
                    accumulate(
                        &mut grads,
                        *x,
                        g.iter().zip(mask).map(|(a, m)| a * m).collect(),
                    );
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let batch = targets.len();
                    let classes = probs.len() / batch;
                    let scale = g[0] / batch as f64;
                    let mut dl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[r * classes + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, dl);
                }
                Op::Reshape { x } => accumulate(&mut grads, *x, g),
                Op::Permute { x, perm } => {
                    let mut inverse = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inverse[p] = i;
                    }
                    let (dx, _) = tensor::permute(&g, node.value.shape(), &inverse);
                    accumulate(&mut grads, *x, dx);
                }
                Op::MaskFill { x, keep } => {
                    let dx = g
                        .iter()
                        .zip(keep)
                        .map(|(gi, &k)| if k { *gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, dx);
                }
            }
        }
        Ok(out)
    }

    fn affine_param_grads(
        &self,
        grads: &mut [Option<Vec<f64>>],
        gamma: Var,
        beta: Var,
        g: &[f64],
        xhat: &[f64],
        d: usize,
    ) {
        if self.requires_grad(gamma) {
            let mut dg = vec![0.0; d];
            for (i, (gi, h)) in g.iter().zip(xhat).enumerate() {
                dg[i % d] += gi * h;
            }
            accumulate(grads, gamma, dg);
        }
        if self.requires_grad(beta) {
            let mut db = vec![0.0; d];
            for (i, gi) in g.iter().enumerate() {
                db[i % d] += gi;
            }
            accumulate(grads, beta, db);
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let r = tape.matmul(eye, m).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let n = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let r = tape.matmul(m, n).unwrap();
        assert_eq!(tape.value(r).data(), &[19.0, 22.0, 43.0, 50.0]);

        let z = tape.constant(Tensor::zeros([2, 3]));
        let any = tape.constant(Tensor::from_fn([3, 4], |i| i as f64 - 5.0));
        let r = tape.matmul(z, any).unwrap();
        assert_eq!(tape.value(r), &Tensor::zeros([2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn elementwise_identities_and_product() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[1.0, -2.0, 3.5]));
        let z = tape.constant(Tensor::zeros([3]));
        let o = tape.constant(Tensor::ones([3]));
        let s = tape.add(x, z).unwrap();
        assert!(tape.value(s).bitwise_eq(tape.value(x)));
        let p = tape.mul(x, o).unwrap();
        assert!(tape.value(p).bitwise_eq(tape.value(x)));
        let a = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let b = tape.constant(t(&[3], &[4.0, 5.0, 6.0]));
        let m = tape.mul(a, b).unwrap();
        assert_eq!(tape.value(m).data(), &[4.0, 10.0, 18.0]);
    }

    #[test]
    fn elementwise_rejects_non_suffix_broadcast() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2]));
        assert!(matches!(tape.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        let b = tape.constant(t(&[2], &[0.0, 2f64.ln()]));
        let s = tape.softmax(b, 0).unwrap();
        assert!(close(tape.value(s).data(), &[1.0 / 3.0, 2.0 / 3.0], 1e-15));
        let c = tape.constant(t(&[2], &[1000.0, 1000.0]));
        let s = tape.softmax(c, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
        assert!(tape.softmax(c, 1).is_err());
    }

    #[test]
    fn softmax_non_last_axis() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, 5.0]));
        let s = tape.softmax(a, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5, 0.5, 0.5]);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 0.75).abs() < 1e-15);
        let g = tape.gelu(x).unwrap();
        assert_eq!(tape.value(g).data()[0], 0.0);
    }

    #[test]
    fn sigmoid_saturates_without_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-800.0, 800.0]));
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let c = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let y = tape.layer_norm(c, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 1.0]));
        let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
        assert!(close(
            tape.value(y).data(),
            &[-1.224_744_871, 0.0, 1.224_744_871],
            1e-8
        ));
        let g0 = tape.constant(Tensor::zeros([3]));
        let bb = tape.constant(Tensor::full([3], 0.7));
        let y = tape.layer_norm(x, g0, bb, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.7, 0.7, 0.7]);
    }

    #[test]
    fn batch_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::ones([1]));
        let b = tape.constant(Tensor::zeros([1]));
        let x = tape.constant(t(&[2, 1], &[-1.0, 1.0]));
        let (y, stats) = tape.batch_norm_train(x, g, b, 1e-5).unwrap();
        assert!(close(tape.value(y).data(), &[-1.0, 1.0], 1e-5));
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var_unbiased, vec![2.0]);

        let g0 = tape.constant(Tensor::zeros([1]));
        let (y, _) = tape.batch_norm_train(x, g0, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

        let xs = tape.constant(t(&[3, 2], &[0.3, -1.0, 2.0, 4.0, -0.5, 0.0]));
        let g2 = tape.constant(Tensor::ones([2]));
        let b2 = tape.constant(Tensor::zeros([2]));
        let y = tape
            .batch_norm_eval(xs, g2, b2, &[0.0, 0.0], &[1.0, 1.0], 1e-5)
            .unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(xs)) < 1e-4 * 4.0 / 2.0);

        let one = tape.constant(t(&[1, 1], &[3.0]));
        assert!(matches!(
            tape.batch_norm_train(one, g, b, 1e-5),
            Err(Error::DegenerateBatch(_))
        ));
    }

    #[test]
    fn batch_norm_eval_identity_stats_within_1e9() {
        // With running variance 1 − eps the eval transform is exactly x.
        let eps = 1e-5;
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.25, -3.0, 7.5, 1.0]));
        let g = tape.constant(Tensor::ones([2]));
        let b = tape.constant(Tensor::zeros([2]));
        let y = tape
            .batch_norm_eval(x, g, b, &[0.0, 0.0], &[1.0 - eps, 1.0 - eps], eps)
            .unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-9);
    }

    #[test]
    fn reduce_mean_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[2.0, 2.0, 2.0]));
        let m = tape.mean(a, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[2.0]);
        let b = tape.constant(t(&[2, 2], &[1.0, 3.0, 5.0, 7.0]));
        let m = tape.mean(b, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[3.0, 5.0]);
        let c = tape.constant(t(&[1, 3], &[1.5, -2.0, 9.0]));
        let m = tape.mean(c, 0).unwrap();
        assert_eq!(tape.value(m).data(), &[1.5, -2.0, 9.0]);
    }

    #[test]
    fn embedding_gather_and_scatter() {
        let mut tape = Tape::new();
        let table = tape.param("tok", Tensor::from_fn([4, 2], |i| i as f64));
        let r = tape.embedding(table, &[2]).unwrap();
        assert_eq!(tape.value(r).data(), &[4.0, 5.0]);

        let r = tape.embedding(table, &[0, 0]).unwrap();
        let s = tape.sum(r).unwrap();
        let grads = tape.backward(s).unwrap();
        let g = grads.by_name("tok").unwrap();
        assert_eq!(g.data(), &[2.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);

        let e = tape.embedding(table, &[]).unwrap();
        assert_eq!(tape.value(e).shape(), &[0, 2]);

        let err = tape.embedding(table, &[4]).unwrap_err().to_string();
        assert!(err.contains("id 4"), "{err}");
    }

    #[test]
    fn dropout_contract() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(5);
        let x = tape.constant(Tensor::from_fn([8], |i| i as f64 + 0.5));
        let y = tape.dropout(x, 0.0, true, &mut rng).unwrap();
        assert!(tape.value(y).bitwise_eq(tape.value(x)));
        let y = tape.dropout(x, 0.9, false, &mut rng).unwrap();
        assert!(tape.value(y).bitwise_eq(tape.value(x)));
        assert!(matches!(
            tape.dropout(x, 1.0, true, &mut rng),
            Err(Error::Param(_))
        ));
        assert!(matches!(
            tape.dropout(x, -0.1, true, &mut rng),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut tape = Tape::new();
        let mut rng = RngStream::new(2024);
        let x = tape.constant(Tensor::ones([100_000]));
        let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
        let v = tape.value(y).data();
        let survivors = v.iter().filter(|&&e| e != 0.0).count() as f64 / v.len() as f64;
        assert!((0.49..=0.51).contains(&survivors), "{survivors}");
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(t(&[1, 2], &[0.3, 0.3]));
        let l = tape.cross_entropy(u, &[1]).unwrap();
        assert!((tape.value(l).data()[0] - 2f64.ln()).abs() < 1e-15);
        let s = tape.constant(t(&[1, 2], &[10.0, -10.0]));
        let l = tape.cross_entropy(s, &[0]).unwrap();
        let expected = (1.0 + (-20f64).exp()).ln();
        assert!((tape.value(l).data()[0] - expected).abs() < 1e-6 * expected);
        assert!((tape.value(l).data()[0] - 2.06e-9).abs() < 1e-11);
        let one = tape.constant(t(&[1, 3], &[0.1, 2.0, -1.0]));
        let two = tape.constant(t(&[2, 3], &[0.1, 2.0, -1.0, 0.1, 2.0, -1.0]));
        let a = tape.cross_entropy(one, &[2]).unwrap();
        let b = tape.cross_entropy(two, &[2, 2]).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(b).data());
        assert!(matches!(
            tape.cross_entropy(one, &[3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn backward_linear_and_quadratic() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let half = tape.scale(s, 0.5).unwrap();
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::ones([2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_participating_leaves_are_absent() {
        let mut tape = Tape::new();
        let x = tape.param("x", Tensor::ones([2]));
        let unused = tape.param("unused", Tensor::ones([2]));
        let c = tape.constant(Tensor::ones([2]));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_some());
        assert!(g.get(unused).is_none());
        assert!(g.get(c).is_none());
        assert!(g.by_name("unused").is_none());
    }

    #[test]
    fn mask_fill_blocks_gradient() {
        let mut tape = Tape::new();
        let x = tape.param("x", t(&[3], &[1.0, 2.0, 3.0]));
        let m = tape.mask_fill(x, vec![true, false, true]).unwrap();
        assert_eq!(tape.value(m).data()[1], MASKED_LOGIT);
        let s = tape.softmax(m, 0).unwrap();
        assert_eq!(tape.value(s).data()[1], 0.0);
        let w = tape.constant(t(&[3], &[1.0, 5.0, -1.0]));
        let p = tape.mul(s, w).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data()[1], 0.0);
    }

    #[test]
    fn batched_matmul_matches_per_batch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([2, 2, 3], |i| (i as f64).sin()));
        let b = tape.constant(Tensor::from_fn([2, 3, 2], |i| (i as f64).cos()));
        let c = tape.matmul(a, b).unwrap();
        for batch in 0..2 {
            let a0 = tape.constant(
                tape.value(a)
                    .slice_rows(batch, batch + 1)
                    .unwrap()
                    .reshape([2, 3])
                    .unwrap(),
            );
            let b0 = tape.constant(
                tape.value(b)
                    .slice_rows(batch, batch + 1)
                    .unwrap()
                    .reshape([3, 2])
                    .unwrap(),
            );
            let c0 = tape.matmul(a0, b0).unwrap();
            assert_eq!(
                &tape.value(c).data()[batch * 4..(batch + 1) * 4],
                tape.value(c0).data()
            );
        }
    }
}
