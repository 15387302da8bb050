//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Forward values are
//! computed by the same kernels as the plain [`Tensor`] methods, so a graph
//! evaluated on a tape is bitwise identical to the equivalent direct
//! computation. `backward` walks the tape once in reverse.

use super::tensor::{log_sum_exp, row_moments, softmax_in_place, Activation, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Activation(Var, Activation),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
    ConcatRows(Var, Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    Sum(Var),
    LogSoftmaxPick(Var, usize),
    GaussianLogLik {
        x: Var,
        target: f64,
        sigma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; zeros if `var` did not
    /// contribute to the loss.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    pub fn take(&mut self, var: Var) -> Tensor {
        match self.grads[var.0].take() {
            Some(g) => g,
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], var: Var, delta: Tensor) {
    match &mut grads[var.0] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
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

    /// Clears all recorded nodes so the tape can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf: receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_transposed(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMulT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).mul(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let v = self.value(a).add_row(self.value(bias))?;
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(v, Op::AddRow(a, bias), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, c), ng)
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let v = self.value(a).activation(kind);
        let ng = self.ng(a);
        self.push(v, Op::Activation(a, kind), ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax_rows()?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SoftmaxRows(a), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let value = self.value(x).layer_norm(self.value(gamma), self.value(beta), eps)?;
        let xs = self.value(x);
        let d = xs.cols();
        let mut normalized = Vec::with_capacity(xs.len());
        let mut inv_std = Vec::with_capacity(xs.rows());
        for row in xs.data().chunks_exact(d) {
            let (mean, inv) = row_moments(row, eps);
            inv_std.push(inv);
            normalized.extend(row.iter().map(|v| (v - mean) * inv));
        }
        let normalized = Tensor::new(xs.shape().to_vec(), normalized)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_rows(self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::ConcatRows(a, b), ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let v = self.value(a).slice_cols(start, width)?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::SliceCols(a, start), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor::concat_cols(&tensors)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).mean_rows()?;
        let ng = self.ng(a);
        Ok(self.push(v, Op::MeanRows(a), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(a);
        self.push(v, Op::Sum(a), ng)
    }

    /// `log softmax(logits)[class]` for a single row of logits.
    pub fn log_softmax_pick(&mut self, logits: Var, class: usize) -> Result<Var> {
        let l = self.value(logits);
        if class >= l.len() {
            return Err(Error::input(format!(
                "class {class} out of range for {} logits",
                l.len()
            )));
        }
        let v = Tensor::scalar(l.data()[class] - log_sum_exp(l.data()));
        let ng = self.ng(logits);
        Ok(self.push(v, Op::LogSoftmaxPick(logits, class), ng))
    }

    /// Gaussian log-density `log N(target; x, sigma²)` of a single output.
    pub fn gaussian_log_lik(&mut self, x: Var, target: f64, sigma: f64) -> Var {
        let out = self.value(x).item();
        let v = Tensor::scalar(gaussian_log_density(out, target, sigma));
        let ng = self.ng(x);
        self.push(v, Op::GaussianLogLik { x, target, sigma }, ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.value(loss).shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(shape, 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.matmul_transposed(self.value(*b))?);
                }
                if self.ng(*b) {
                    accumulate(grads, *b, self.value(*a).transposed_matmul(g)?);
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.matmul(self.value(*b))?);
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.transposed_matmul(self.value(*a))?);
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.mul(self.value(*b))?);
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.mul(self.value(*a))?);
                }
            }
            Op::AddRow(a, bias) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*bias) {
                    let n = g.cols();
                    let mut col_sums = vec![0.0; n];
                    for gr in g.data().chunks_exact(n) {
                        for (o, gi) in col_sums.iter_mut().zip(gr) {
                            *o += gi;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    accumulate(grads, *bias, Tensor::new(shape, col_sums)?);
                }
            }
            Op::Scale(a, c) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.scale(*c));
                }
            }
            Op::Activation(a, kind) => {
                if self.ng(*a) {
                    let d = g.zip_map(&node.value, "activation_grad", |gi, y| {
                        gi * kind.derivative_from_output(y)
                    })?;
                    accumulate(grads, *a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = &node.value;
                    let n = y.cols();
                    let mut d = Vec::with_capacity(y.len());
                    for (yr, gr) in y.data().chunks_exact(n).zip(g.data().chunks_exact(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        d.extend(yr.iter().zip(gr).map(|(yi, gi)| yi * (gi - dot)));
                    }
                    accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let d = normalized.cols();
                if self.ng(*x) {
                    let gam = self.value(*gamma).data();
                    let mut dx = Vec::with_capacity(normalized.len());
                    for ((xh, gr), inv) in normalized
                        .data()
                        .chunks_exact(d)
                        .zip(g.data().chunks_exact(d))
                        .zip(inv_std)
                    {
                        let dxh: Vec<f64> = gr.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh =
                            dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        dx.extend(
                            dxh.iter()
                                .zip(xh)
                                .map(|(a, h)| inv * (a - mean_dxh - h * mean_dxh_xh)),
                        );
                    }
                    accumulate(grads, *x, Tensor::new(normalized.shape().to_vec(), dx)?);
                }
                if self.ng(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (xh, gr) in normalized.data().chunks_exact(d).zip(g.data().chunks_exact(d)) {
                        for ((o, h), gi) in dg.iter_mut().zip(xh).zip(gr) {
                            *o += h * gi;
                        }
                    }
                    let shape = self.value(*gamma).shape().to_vec();
                    accumulate(grads, *gamma, Tensor::new(shape, dg)?);
                }
                if self.ng(*beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.data().chunks_exact(d) {
                        for (o, gi) in db.iter_mut().zip(gr) {
                            *o += gi;
                        }
                    }
                    let shape = self.value(*beta).shape().to_vec();
                    accumulate(grads, *beta, Tensor::new(shape, db)?);
                }
            }
            Op::ConcatRows(a, b) => {
                let n = g.cols();
                let split = self.value(*a).rows() * n;
                if self.ng(*a) {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(grads, *a, Tensor::new(shape, g.data()[..split].to_vec())?);
                }
                if self.ng(*b) {
                    let shape = self.value(*b).shape().to_vec();
                    accumulate(grads, *b, Tensor::new(shape, g.data()[split..].to_vec())?);
                }
            }
            Op::SliceCols(a, start) => {
                if self.ng(*a) {
                    let src = self.value(*a);
                    let (n, w) = (src.cols(), g.cols());
                    let mut d = Tensor::zeros(src.shape());
                    for (row, gr) in d.data_mut().chunks_exact_mut(n).zip(g.data().chunks_exact(w)) {
                        row[*start..*start + w].copy_from_slice(gr);
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if self.ng(*p) {
                        accumulate(grads, *p, g.slice_cols(offset, w)?);
                    }
                    offset += w;
                }
            }
            Op::MeanRows(a) => {
                if self.ng(*a) {
                    let src = self.value(*a);
                    let inv = 1.0 / src.rows() as f64;
                    let row: Vec<f64> = g.data().iter().map(|v| v * inv).collect();
                    let data: Vec<f64> = (0..src.rows()).flat_map(|_| row.iter().copied()).collect();
                    accumulate(grads, *a, Tensor::new(src.shape().to_vec(), data)?);
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    accumulate(grads, *a, Tensor::full(self.value(*a).shape(), g.item()));
                }
            }
            Op::LogSoftmaxPick(a, class) => {
                if self.ng(*a) {
                    let src = self.value(*a);
                    let mut p = src.data().to_vec();
                    softmax_in_place(&mut p);
                    let gi = g.item();
                    let d: Vec<f64> = p
                        .iter()
                        .enumerate()
                        .map(|(j, pj)| gi * (if j == *class { 1.0 } else { 0.0 } - pj))
                        .collect();
                    accumulate(grads, *a, Tensor::new(src.shape().to_vec(), d)?);
                }
            }
            Op::GaussianLogLik { x, target, sigma } => {
                if self.ng(*x) {
                    let src = self.value(*x);
                    let d = -(src.item() - target) / (sigma * sigma) * g.item();
                    accumulate(grads, *x, Tensor::full(src.shape(), d));
                }
            }
        }
        Ok(())
    }
}

/// `log N(target; mean, sigma²)`.
pub fn gaussian_log_density(mean: f64, target: f64, sigma: f64) -> f64 {
    let r = mean - target;
    -(r * r) / (2.0 * sigma * sigma) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let loss = tape.sum(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w), Tensor::full(&[2, 2], 1.0));
    }

    #[test]
    fn squared_sum_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let w = tape.param(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(w), m(&[&[2.0, 4.0], &[6.0, 8.0]]));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn unused_params_get_zero_gradient_and_constants_none() {
        let mut tape = Tape::new();
        let used = tape.param(Tensor::full(&[1, 2], 3.0));
        let unused = tape.param(Tensor::full(&[3, 1], 1.0));
        let c = tape.constant(Tensor::full(&[1, 2], 2.0));
        let prod = tape.mul(used, c).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(used).data(), &[2.0, 2.0]);
        assert_eq!(g.get(unused), Tensor::zeros(&[3, 1]));
        assert_eq!(g.get(c), Tensor::zeros(&[1, 2]));
    }

    #[test]
    fn saturated_log_softmax_is_near_zero() {
        let mut tape = Tape::new();
        let l = tape.constant(m(&[&[10.0, -10.0]]));
        let v = tape.log_softmax_pick(l, 0).unwrap();
        assert!(tape.value(v).item().abs() < 1e-8);
        assert!(tape.log_softmax_pick(l, 2).is_err());
    }

    #[test]
    fn gaussian_log_density_at_mode() {
        let v = gaussian_log_density(0.3, 0.3, 1.0);
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-15);
    }
}
