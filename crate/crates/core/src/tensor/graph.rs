use rand::Rng;
use std::f64::consts::{PI, SQRT_2};

use super::Tensor;
use crate::error::{ensure_finite, Error, Result};
use crate::rng::rng_for;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-feature batch statistics (population variance) produced by a
/// train-mode batchnorm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Variance floor for batch normalization.
pub const NORM_EPS: f64 = 1e-5;
/// Variance floor for layer normalization; small enough that rows with
/// variance above 1e-2 come out with unit variance to 1e-8.
pub const LAYERNORM_EPS: f64 = 1e-10;

/// Operation selector for [`Graph::apply`] and [`super::grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Relu,
    Gelu,
    SoftmaxRows,
    LayerNormRows,
    /// Train mode normalizes with batch statistics; eval mode requires
    /// `running`.
    BatchNormFeatures { running: Option<RunningStats> },
    Dropout { rate: f64 },
    MeanRows,
    StackRows,
    Mul,
    Scale(f64),
    Sigmoid,
    BatchMatMul,
    TransposeLast,
    SliceLast { start: usize, len: usize },
    ConcatLast,
    Sum,
}

#[derive(Debug)]
enum Back {
    Leaf,
    MatMul { rows: usize, k: usize, n: usize },
    BatchMatMul { batch: usize, m: usize, k: usize, n: usize },
    TransposeLast { batch: usize, m: usize, n: usize },
    Add { broadcast: bool },
    Mul { broadcast: bool },
    Scale(f64),
    Relu,
    Gelu,
    Sigmoid,
    SoftmaxRows { cols: usize },
    LayerNormRows { cols: usize, inv_std: Vec<f64> },
    BatchNormTrain { rows: usize, cols: usize, inv_std: Vec<f64> },
    BatchNormEval { cols: usize, inv_std: Vec<f64> },
    Dropout { scale: Vec<f64> },
    MeanRows { groups: usize, k: usize, m: usize },
    StackRows { count: usize, m: usize },
    SliceLast { width: usize, start: usize, len: usize },
    ConcatLast { widths: Vec<usize> },
    Sum,
    /// Terminal losses store d(loss)/d(input) at forward time.
    Terminal { grad: Vec<f64> },
}

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Back,
    tracked: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * gelu_cdf(x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Loss reduction over patients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, parents: Vec<Var>, back: Back) -> Result<Var> {
        ensure_finite(value.data(), "op output")?;
        let tracked = parents.iter().any(|p| self.nodes[p.0].tracked);
        self.nodes.push(Node {
            value,
            parents,
            back,
            tracked,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, mut t: Tensor, requires_grad: bool) -> Result<Var> {
        ensure_finite(t.data(), "leaf tensor")?;
        t.requires_grad = requires_grad;
        t.grad = None;
        self.nodes.push(Node {
            value: t,
            parents: Vec::new(),
            back: Back::Leaf,
            tracked: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf(t.clone(), true)
    }

    /// Register a constant leaf.
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(t, false)
    }

    /// Register a leaf keeping the tensor's own `requires_grad` flag.
    pub fn leaf_tensor(&mut self, t: Tensor) -> Result<Var> {
        let rg = t.requires_grad();
        self.leaf(t, rg)
    }

    /// Generic dispatch over the op catalogue.
    pub fn apply(&mut self, kind: &OpKind, inputs: &[Var], mode: Mode, rng_seed: u64) -> Result<Var> {
        let unary = |inputs: &[Var]| -> Result<Var> {
            if inputs.len() == 1 {
                Ok(inputs[0])
            } else {
                Err(Error::shape(format!("{kind:?} takes 1 input, got {}", inputs.len())))
            }
        };
        let binary = |inputs: &[Var]| -> Result<(Var, Var)> {
            if inputs.len() == 2 {
                Ok((inputs[0], inputs[1]))
            } else {
                Err(Error::shape(format!("{kind:?} takes 2 inputs, got {}", inputs.len())))
            }
        };
        match kind {
            OpKind::MatMul => {
                let (a, b) = binary(inputs)?;
                self.matmul(a, b)
            }
            OpKind::Add => {
                let (a, b) = binary(inputs)?;
                self.add(a, b)
            }
            OpKind::Mul => {
                let (a, b) = binary(inputs)?;
                self.mul(a, b)
            }
            OpKind::BatchMatMul => {
                let (a, b) = binary(inputs)?;
                self.bmm(a, b)
            }
            OpKind::Relu => self.relu(unary(inputs)?),
            OpKind::Gelu => self.gelu(unary(inputs)?),
            OpKind::Sigmoid => self.sigmoid(unary(inputs)?),
            OpKind::SoftmaxRows => self.softmax_rows(unary(inputs)?),
            OpKind::LayerNormRows => self.layernorm_rows(unary(inputs)?),
            OpKind::BatchNormFeatures { running } => {
                let x = unary(inputs)?;
                match mode {
                    Mode::Train => self.batchnorm_train(x).map(|(v, _)| v),
                    Mode::Eval => {
                        let rs = running.as_ref().ok_or_else(|| {
                            Error::invalid("batchnorm in eval mode needs running statistics")
                        })?;
                        self.batchnorm_eval(x, rs)
                    }
                }
            }
            OpKind::Dropout { rate } => self.dropout(unary(inputs)?, *rate, mode, rng_seed),
            OpKind::MeanRows => self.mean_rows(unary(inputs)?),
            OpKind::StackRows => self.stack_rows(inputs),
            OpKind::Scale(s) => self.scale(unary(inputs)?, *s),
            OpKind::TransposeLast => self.transpose_last(unary(inputs)?),
            OpKind::SliceLast { start, len } => self.slice_last(unary(inputs)?, *start, *len),
            OpKind::ConcatLast => self.concat_last(inputs),
            OpKind::Sum => self.sum(unary(inputs)?),
        }
    }

    /// `a[.., k] @ b[k, n]`; leading axes of `a` are flattened into rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if bsh.len() != 2 || ash[ash.len() - 1] != bsh[0] {
            return Err(Error::shape(format!("matmul {ash:?} x {bsh:?}")));
        }
        let (k, n) = (bsh[0], bsh[1]);
        let rows = self.value(a).len() / k;
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let arow = &ad[r * k..(r + 1) * k];
            let orow = &mut out[r * n..(r + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
        let mut shape = ash[..ash.len() - 1].to_vec();
        shape.push(n);
        let t = Tensor::new(shape, out)?;
        self.push(t, vec![a, b], Back::MatMul { rows, k, n })
    }

    /// Batched matmul `[B, m, k] x [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ash, bsh) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if ash.len() != 3 || bsh.len() != 3 || ash[0] != bsh[0] || ash[2] != bsh[1] {
            return Err(Error::shape(format!("bmm {ash:?} x {bsh:?}")));
        }
        let (batch, m, k, n) = (ash[0], ash[1], ash[2], bsh[2]);
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let (ao, bo, oo) = (bi * m * k, bi * k * n, bi * m * n);
            for i in 0..m {
                for p in 0..k {
                    let av = ad[ao + i * k + p];
                    for j in 0..n {
                        out[oo + i * n + j] += av * bd[bo + p * n + j];
                    }
                }
            }
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push(t, vec![a, b], Back::BatchMatMul { batch, m, k, n })
    }

    /// Swap the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose_last(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let (batch, m, n, out_shape) = match sh.len() {
            2 => (1, sh[0], sh[1], vec![sh[1], sh[0]]),
            3 => (sh[0], sh[1], sh[2], vec![sh[0], sh[2], sh[1]]),
            _ => return Err(Error::shape(format!("transpose of {sh:?}"))),
        };
        let d = self.data(a);
        let mut out = vec![0.0; d.len()];
        for b in 0..batch {
            let o = b * m * n;
            for i in 0..m {
                for j in 0..n {
                    out[o + j * m + i] = d[o + i * n + j];
                }
            }
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(t, vec![a], Back::TransposeLast { batch, m, n })
    }

    fn broadcast_check(&self, a: Var, b: Var, op: &str) -> Result<bool> {
        let (ash, bsh) = (self.shape(a), self.shape(b));
        if ash == bsh {
            Ok(false)
        } else if bsh.len() == 1 && bsh[0] == ash[ash.len() - 1] {
            Ok(true)
        } else {
            Err(Error::shape(format!("{op} {ash:?} with {bsh:?}")))
        }
    }

    /// Elementwise sum; `b` may also be a vector matching the last axis of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check(a, b, "add")?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<f64> = if broadcast {
            let m = bd.len();
            ad.iter().enumerate().map(|(i, &x)| x + bd[i % m]).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| x + y).collect()
        };
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a, b], Back::Add { broadcast })
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let broadcast = self.broadcast_check(a, b, "mul")?;
        let (ad, bd) = (self.data(a), self.data(b));
        let out: Vec<f64> = if broadcast {
            let m = bd.len();
            ad.iter().enumerate().map(|(i, &x)| x * bd[i % m]).collect()
        } else {
            ad.iter().zip(bd).map(|(x, y)| x * y).collect()
        };
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a, b], Back::Mul { broadcast })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.data(a).iter().map(|x| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a], Back::Scale(s))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, back: Back) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a], back)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, |x| x.max(0.0), Back::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, gelu, Back::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, sigmoid, Back::Sigmoid)
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).last_dim();
        let mut out = self.data(a).to_vec();
        for row in out.chunks_mut(cols) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a], Back::SoftmaxRows { cols })
    }

    /// Normalize each last-axis row to zero mean and unit (population)
    /// variance. No affine part; compose with [`Graph::mul`]/[`Graph::add`].
    pub fn layernorm_rows(&mut self, a: Var) -> Result<Var> {
        let cols = self.value(a).last_dim();
        let mut out = self.data(a).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a], Back::LayerNormRows { cols, inv_std })
    }

    /// Train-mode batch normalization of a `[N, F]` tensor over its rows.
    pub fn batchnorm_train(&mut self, a: Var) -> Result<(Var, BatchStats)> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(Error::shape(format!("batchnorm expects [N, F], got {sh:?}")));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let d = self.data(a);
        let mut mean = vec![0.0; cols];
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                mean[c] += d[r * cols + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            for c in 0..cols {
                let dv = d[r * cols + c] - mean[c];
                var[c] += dv * dv;
            }
        }
        var.iter_mut().for_each(|v| *v /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let out = d
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - mean[i % cols]) * inv_std[i % cols])
            .collect();
        let t = Tensor::new(sh, out)?;
        let v = self.push(t, vec![a], Back::BatchNormTrain { rows, cols, inv_std })?;
        Ok((v, BatchStats { mean, var }))
    }

    /// Eval-mode batch normalization with stored running statistics.
    pub fn batchnorm_eval(&mut self, a: Var, running: &RunningStats) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let cols = sh[sh.len() - 1];
        if sh.len() != 2 || running.mean.len() != cols || running.var.len() != cols {
            return Err(Error::shape(format!(
                "batchnorm eval on {sh:?} with {} running features",
                running.mean.len()
            )));
        }
        let inv_std: Vec<f64> = running.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let out = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - running.mean[i % cols]) * inv_std[i % cols])
            .collect();
        let t = Tensor::new(sh, out)?;
        self.push(t, vec![a], Back::BatchNormEval { cols, inv_std })
    }

    /// Inverted dropout. Eval mode returns a bit-identical copy.
    pub fn dropout(&mut self, a: Var, rate: f64, mode: Mode, rng_seed: u64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate {rate} outside [0, 1)")));
        }
        let n = self.value(a).len();
        let scale = if mode == Mode::Eval || rate == 0.0 {
            vec![1.0; n]
        } else {
            let mut rng = rng_for(rng_seed, &[0xD0]);
            let keep = 1.0 / (1.0 - rate);
            (0..n)
                .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
                .collect()
        };
        let out = self.data(a).iter().zip(&scale).map(|(x, s)| x * s).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        self.push(t, vec![a], Back::Dropout { scale })
    }

    /// Mean over the second-to-last axis: `[.., K, M] -> [.., M]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() < 2 {
            return Err(Error::shape(format!("mean_rows on {sh:?}")));
        }
        let (k, m) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let groups = self.value(a).len() / (k * m);
        let d = self.data(a);
        let mut out = vec![0.0; groups * m];
        for g in 0..groups {
            for r in 0..k {
                for c in 0..m {
                    out[g * m + c] += d[(g * k + r) * m + c];
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= k as f64);
        let mut shape = sh[..sh.len() - 2].to_vec();
        shape.push(m);
        let t = Tensor::new(shape, out)?;
        self.push(t, vec![a], Back::MeanRows { groups, k, m })
    }

    /// Stack equal-shape inputs `[.., M]` into `[.., K, M]`.
    pub fn stack_rows(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("stack_rows needs at least one input"))?;
        let sh = self.shape(first).to_vec();
        if inputs.iter().any(|&v| self.shape(v) != sh.as_slice()) {
            return Err(Error::shape("stack_rows inputs have ragged shapes"));
        }
        let count = inputs.len();
        let m = sh[sh.len() - 1];
        let groups = self.value(first).len() / m;
        let mut out = vec![0.0; groups * count * m];
        for (k, &v) in inputs.iter().enumerate() {
            let d = self.data(v);
            for g in 0..groups {
                out[(g * count + k) * m..(g * count + k + 1) * m]
                    .copy_from_slice(&d[g * m..(g + 1) * m]);
            }
        }
        let mut shape = sh[..sh.len() - 1].to_vec();
        shape.push(count);
        shape.push(m);
        let t = Tensor::new(shape, out)?;
        self.push(t, inputs.to_vec(), Back::StackRows { count, m })
    }

    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        let width = sh[sh.len() - 1];
        if len == 0 || start + len > width {
            return Err(Error::shape(format!("slice {start}..{} of width {width}", start + len)));
        }
        let out: Vec<f64> = self
            .data(a)
            .chunks(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = sh.clone();
        *shape.last_mut().unwrap() = len;
        let t = Tensor::new(shape, out)?;
        self.push(t, vec![a], Back::SliceLast { width, start, len })
    }

    pub fn concat_last(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat needs at least one input"))?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let sh = self.shape(v);
            if sh[..sh.len() - 1] != lead[..] {
                return Err(Error::shape("concat inputs disagree on leading axes"));
            }
            widths.push(sh[sh.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let t = Tensor::new(shape, out)?;
        self.push(t, inputs.to_vec(), Back::ConcatLast { widths })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum();
        self.push(Tensor::scalar(s), vec![a], Back::Sum)
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len() as f64;
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n)
    }

    /// MTLR negative log-likelihood over `[N, T]` logits.
    ///
    /// `admissible` is an `N*T` row-major mask of the bins each patient's
    /// outcome is compatible with: the event bin alone when uncensored, the
    /// censoring bin and all later bins when censored. Per patient the loss is
    /// `logsumexp(z) - logsumexp(z[admissible])`.
    pub fn mtlr_nll(&mut self, logits: Var, admissible: &[bool], reduction: Reduction) -> Result<Var> {
        let sh = self.shape(logits).to_vec();
        if sh.len() != 2 || admissible.len() != sh[0] * sh[1] {
            return Err(Error::shape(format!(
                "mtlr logits {sh:?} with {} target entries",
                admissible.len()
            )));
        }
        let (n, t) = (sh[0], sh[1]);
        let z = self.data(logits);
        let mut loss = 0.0;
        let mut grad = vec![0.0; n * t];
        for i in 0..n {
            let row = &z[i * t..(i + 1) * t];
            let adm = &admissible[i * t..(i + 1) * t];
            if !adm.iter().any(|&a| a) {
                return Err(Error::invalid(format!("patient {i} has no admissible bin")));
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let all: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
            let mxa = row
                .iter()
                .zip(adm)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            let part: f64 = row
                .iter()
                .zip(adm)
                .filter(|(_, &a)| a)
                .map(|(&v, _)| (v - mxa).exp())
                .sum();
            loss += (mx + all.ln()) - (mxa + part.ln());
            for j in 0..t {
                let p_all = (row[j] - mx).exp() / all;
                let p_adm = if adm[j] { (row[j] - mxa).exp() / part } else { 0.0 };
                grad[i * t + j] = p_all - p_adm;
            }
        }
        if reduction == Reduction::Mean {
            loss /= n as f64;
            grad.iter_mut().for_each(|g| *g /= n as f64);
        }
        self.push(Tensor::scalar(loss), vec![logits], Back::Terminal { grad })
    }

    /// Class-weighted binary cross entropy on probabilities.
    ///
    /// Per sample `-(y * w1 * ln p + (1 - y) * w0 * ln(1 - p))` with `p`
    /// clamped to `[1e-12, 1 - 1e-12]`.
    pub fn weighted_bce(
        &mut self,
        probs: Var,
        labels: &[f64],
        weights: (f64, f64),
        reduction: Reduction,
    ) -> Result<Var> {
        let p = self.data(probs);
        if p.len() != labels.len() {
            return Err(Error::shape(format!(
                "{} probabilities for {} labels",
                p.len(),
                labels.len()
            )));
        }
        let (w0, w1) = weights;
        let mut loss = 0.0;
        let mut grad = vec![0.0; p.len()];
        for (i, (&pi, &y)) in p.iter().zip(labels).enumerate() {
            let pc = pi.clamp(CLAMP, 1.0 - CLAMP);
            loss -= y * w1 * pc.ln() + (1.0 - y) * w0 * (1.0 - pc).ln();
            grad[i] = if pi > CLAMP && pi < 1.0 - CLAMP {
                -y * w1 / pc + (1.0 - y) * w0 / (1.0 - pc)
            } else {
                0.0
            };
        }
        if reduction == Reduction::Mean {
            let n = p.len() as f64;
            loss /= n;
            grad.iter_mut().for_each(|g| *g /= n);
        }
        self.push(Tensor::scalar(loss), vec![probs], Back::Terminal { grad })
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Leaves that require gradients always receive one (zeros when the loss
    /// does not depend on them) and accumulate it into their tensor's `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid("loss is not a node of this graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = Some(gout);
                continue;
            }
            if node.parents.iter().any(|p| p.0 >= idx) {
                return Err(Error::invalid("graph cycle detected"));
            }
            let contributions = self.vjp(idx, &gout);
            for (parent, g) in node.parents.iter().zip(contributions) {
                if !self.nodes[parent.0].tracked {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            grads[idx] = Some(gout);
        }
        for (idx, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.back, Back::Leaf) && node.value.requires_grad {
                let g = grads[idx]
                    .get_or_insert_with(|| vec![0.0; node.value.len()])
                    .clone();
                ensure_finite(&g, "gradient")?;
                node.value.accumulate_grad(&g);
            }
        }
        Ok(Gradients { grads })
    }

    fn vjp(&self, idx: usize, gout: &[f64]) -> Vec<Vec<f64>> {
        let node = &self.nodes[idx];
        let pdata = |k: usize| self.nodes[node.parents[k].0].value.data();
        let y = node.value.data();
        match &node.back {
            Back::Leaf => vec![],
            Back::MatMul { rows, k, n } => {
                let (a, b) = (pdata(0), pdata(1));
                let (rows, k, n) = (*rows, *k, *n);
                let mut ga = vec![0.0; rows * k];
                let mut gb = vec![0.0; k * n];
                for r in 0..rows {
                    let go = &gout[r * n..(r + 1) * n];
                    for p in 0..k {
                        let brow = &b[p * n..(p + 1) * n];
                        ga[r * k + p] = go.iter().zip(brow).map(|(x, y)| x * y).sum();
                        let av = a[r * k + p];
                        if av != 0.0 {
                            for (gbv, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(go) {
                                *gbv += av * gv;
                            }
                        }
                    }
                }
                vec![ga, gb]
            }
            Back::BatchMatMul { batch, m, k, n } => {
                let (a, b) = (pdata(0), pdata(1));
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let mut ga = vec![0.0; batch * m * k];
                let mut gb = vec![0.0; batch * k * n];
                for bi in 0..batch {
                    let (ao, bo, oo) = (bi * m * k, bi * k * n, bi * m * n);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                let g = gout[oo + i * n + j];
                                s += g * b[bo + p * n + j];
                                gb[bo + p * n + j] += a[ao + i * k + p] * g;
                            }
                            ga[ao + i * k + p] = s;
                        }
                    }
                }
                vec![ga, gb]
            }
            Back::TransposeLast { batch, m, n } => {
                let (m, n) = (*m, *n);
                let mut g = vec![0.0; gout.len()];
                for b in 0..*batch {
                    let o = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            g[o + i * n + j] = gout[o + j * m + i];
                        }
                    }
                }
                vec![g]
            }
            Back::Add { broadcast } => {
                let gb = if *broadcast {
                    let m = pdata(1).len();
                    let mut gb = vec![0.0; m];
                    gout.iter().enumerate().for_each(|(i, g)| gb[i % m] += g);
                    gb
                } else {
                    gout.to_vec()
                };
                vec![gout.to_vec(), gb]
            }
            Back::Mul { broadcast } => {
                let (a, b) = (pdata(0), pdata(1));
                if *broadcast {
                    let m = b.len();
                    let ga = gout.iter().enumerate().map(|(i, g)| g * b[i % m]).collect();
                    let mut gb = vec![0.0; m];
                    gout.iter().enumerate().for_each(|(i, g)| gb[i % m] += g * a[i]);
                    vec![ga, gb]
                } else {
                    let ga = gout.iter().zip(b).map(|(g, y)| g * y).collect();
                    let gb = gout.iter().zip(a).map(|(g, x)| g * x).collect();
                    vec![ga, gb]
                }
            }
            Back::Scale(s) => vec![gout.iter().map(|g| g * s).collect()],
            Back::Relu => {
                let x = pdata(0);
                vec![gout.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect()]
            }
            Back::Gelu => {
                let x = pdata(0);
                vec![gout
                    .iter()
                    .zip(x)
                    .map(|(g, &x)| g * (gelu_cdf(x) + x * gelu_pdf(x)))
                    .collect()]
            }
            Back::Sigmoid => vec![gout.iter().zip(y).map(|(g, s)| g * s * (1.0 - s)).collect()],
            Back::SoftmaxRows { cols } => {
                let mut g = vec![0.0; gout.len()];
                for ((grow, yrow), gorow) in g.chunks_mut(*cols).zip(y.chunks(*cols)).zip(gout.chunks(*cols)) {
                    let dot: f64 = yrow.iter().zip(gorow).map(|(a, b)| a * b).sum();
                    for ((gv, yv), gov) in grow.iter_mut().zip(yrow).zip(gorow) {
                        *gv = yv * (gov - dot);
                    }
                }
                vec![g]
            }
            Back::LayerNormRows { cols, inv_std } => {
                let c = *cols as f64;
                let mut g = vec![0.0; gout.len()];
                for (r, ((grow, yrow), gorow)) in g
                    .chunks_mut(*cols)
                    .zip(y.chunks(*cols))
                    .zip(gout.chunks(*cols))
                    .enumerate()
                {
                    let mg = gorow.iter().sum::<f64>() / c;
                    let mgy = gorow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / c;
                    for ((gv, yv), gov) in grow.iter_mut().zip(yrow).zip(gorow) {
                        *gv = inv_std[r] * (gov - mg - yv * mgy);
                    }
                }
                vec![g]
            }
            Back::BatchNormTrain { rows, cols, inv_std } => {
                let (rows, cols) = (*rows, *cols);
                let nr = rows as f64;
                let mut mg = vec![0.0; cols];
                let mut mgy = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mg[c] += gout[r * cols + c];
                        mgy[c] += gout[r * cols + c] * y[r * cols + c];
                    }
                }
                let mut g = vec![0.0; gout.len()];
                for r in 0..rows {
                    for c in 0..cols {
                        let i = r * cols + c;
                        g[i] = inv_std[c] * (gout[i] - mg[c] / nr - y[i] * mgy[c] / nr);
                    }
                }
                vec![g]
            }
            Back::BatchNormEval { cols, inv_std } => {
                vec![gout.iter().enumerate().map(|(i, g)| g * inv_std[i % cols]).collect()]
            }
            Back::Dropout { scale } => vec![gout.iter().zip(scale).map(|(g, s)| g * s).collect()],
            Back::MeanRows { groups, k, m } => {
                let (k, m) = (*k, *m);
                let mut g = vec![0.0; groups * k * m];
                for gi in 0..*groups {
                    for r in 0..k {
                        for c in 0..m {
                            g[(gi * k + r) * m + c] = gout[gi * m + c] / k as f64;
                        }
                    }
                }
                vec![g]
            }
            Back::StackRows { count, m } => {
                let (count, m) = (*count, *m);
                let groups = gout.len() / (count * m);
                (0..count)
                    .map(|k| {
                        let mut g = Vec::with_capacity(groups * m);
                        for gi in 0..groups {
                            g.extend_from_slice(&gout[(gi * count + k) * m..(gi * count + k + 1) * m]);
                        }
                        g
                    })
                    .collect()
            }
            Back::SliceLast { width, start, len } => {
                let rows = gout.len() / len;
                let mut g = vec![0.0; rows * width];
                for r in 0..rows {
                    g[r * width + start..r * width + start + len]
                        .copy_from_slice(&gout[r * len..(r + 1) * len]);
                }
                vec![g]
            }
            Back::ConcatLast { widths } => {
                let total: usize = widths.iter().sum();
                let rows = gout.len() / total;
                let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (part, &w) in parts.iter_mut().zip(widths) {
                        part.extend_from_slice(&gout[off..off + w]);
                        off += w;
                    }
                }
                parts
            }
            Back::Sum => {
                let n = pdata(0).len();
                vec![vec![gout[0]; n]]
            }
            Back::Terminal { grad } => vec![grad.iter().map(|g| g * gout[0]).collect()],
        }
    }
}

const CLAMP: f64 = 1e-12;
