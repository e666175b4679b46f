use std::fmt;
use std::sync::Arc;

use super::kernels::{broadcast_shape, gemm, reduce_to, split_axis, zip_broadcast};
use super::{GraphError, Tensor};

/// A fixed linear operator with a hand-written adjoint.
///
/// Used for transforms such as the STFT whose dense matrix form would be
/// wasteful. `adjoint` must satisfy `⟨apply(x), y⟩ == ⟨x, adjoint(y)⟩`.
pub trait LinearMap: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, GraphError>;
    fn apply(&self, input: &Tensor) -> Tensor;
    fn adjoint(&self, grad_output: &Tensor) -> Tensor;
}

#[derive(Clone, Debug)]
pub enum Op {
    Param(String),
    Input(String),
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    Slice {
        axis: usize,
        start: usize,
        end: usize,
    },
    /// Sum over one axis (kept with extent 1), or over everything.
    Sum {
        axis: Option<usize>,
    },
    Mean {
        axis: Option<usize>,
    },
    Broadcast(Vec<usize>),
    Tanh,
    Sigmoid,
    Relu,
    Exp,
    Log,
    Sqrt,
    Square,
    /// Euclidean norm over the last axis (kept with extent 1).
    L2Norm,
    /// Log-softmax over the last axis.
    LogSoftmax,
    GatherRows(Vec<usize>),
    Scale(f64),
    AddScalar(f64),
    Linear(Arc<dyn LinearMap>),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Input(_) => "input",
            Op::Constant => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Broadcast(_) => "broadcast",
            Op::Tanh => "tanh",
            Op::Sigmoid => "sigmoid",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::L2Norm => "l2_norm",
            Op::LogSoftmax => "log_softmax",
            Op::GatherRows(_) => "gather_rows",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Linear(map) => map.name(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Op::Param(_) | Op::Input(_) | Op::Constant)
    }

    fn mismatch(&self, inputs: &[&Tensor]) -> GraphError {
        GraphError::ShapeMismatch {
            op: self.name(),
            shapes: inputs.iter().map(|t| t.shape().to_vec()).collect(),
        }
    }

    /// Shape check and evaluation. Leaves are never evaluated here.
    pub(crate) fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor, GraphError> {
        let unary = |f: fn(f64) -> f64| Ok(inputs[0].map(f));
        match self {
            Op::Param(_) | Op::Input(_) | Op::Constant => {
                unreachable!("leaf nodes carry their own value")
            }
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let shape =
                    broadcast_shape(a.shape(), b.shape()).ok_or_else(|| self.mismatch(inputs))?;
                let f: fn(f64, f64) -> f64 = match self {
                    Op::Add => |x, y| x + y,
                    Op::Sub => |x, y| x - y,
                    Op::Mul => |x, y| x * y,
                    _ => |x, y| x / y,
                };
                let data = zip_broadcast(a.data(), a.shape(), b.data(), b.shape(), &shape, f);
                Ok(Tensor::from_parts(shape, data))
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let ((m, k), (_, n)) = match (a.dims2(), b.dims2()) {
                    (Some(x), Some(y)) if x.1 == y.0 => (x, y),
                    _ => return Err(self.mismatch(inputs)),
                };
                let mut out = vec![0.0; m * n];
                gemm(m, k, n, a.data(), (k, 1), b.data(), (n, 1), 0.0, &mut out);
                Ok(Tensor::from_parts(vec![m, n], out))
            }
            Op::Transpose => {
                let (r, c) = inputs[0].dims2().ok_or_else(|| self.mismatch(inputs))?;
                let x = inputs[0].data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = x[i * c + j];
                    }
                }
                Ok(Tensor::from_parts(vec![c, r], out))
            }
            Op::Reshape(shape) => inputs[0]
                .reshaped(shape.clone())
                .map_err(|_| self.mismatch(inputs)),
            Op::Concat { axis } => concat(inputs, *axis).ok_or_else(|| self.mismatch(inputs)),
            Op::Slice { axis, start, end } => {
                let x = inputs[0];
                if *axis >= x.rank() || start >= end || *end > x.shape()[*axis] {
                    return Err(self.mismatch(inputs));
                }
                let (outer, extent, inner) = split_axis(x.shape(), *axis);
                let width = (end - start) * inner;
                let mut out = Vec::with_capacity(outer * width);
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    out.extend_from_slice(&x.data()[base..base + width]);
                }
                let mut shape = x.shape().to_vec();
                shape[*axis] = end - start;
                Ok(Tensor::from_parts(shape, out))
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let x = inputs[0];
                let mean = matches!(self, Op::Mean { .. });
                match axis {
                    None => {
                        let s: f64 = x.data().iter().sum();
                        let v = if mean { s / x.len() as f64 } else { s };
                        Ok(Tensor::from_parts(vec![1; x.rank()], vec![v]))
                    }
                    Some(axis) => {
                        if *axis >= x.rank() {
                            return Err(self.mismatch(inputs));
                        }
                        let (outer, extent, inner) = split_axis(x.shape(), *axis);
                        let mut out = vec![0.0; outer * inner];
                        for o in 0..outer {
                            for a in 0..extent {
                                let src = &x.data()[(o * extent + a) * inner..][..inner];
                                for (acc, v) in out[o * inner..][..inner].iter_mut().zip(src) {
                                    *acc += v;
                                }
                            }
                        }
                        if mean {
                            let n = extent as f64;
                            out.iter_mut().for_each(|v| *v /= n);
                        }
                        let mut shape = x.shape().to_vec();
                        shape[*axis] = 1;
                        Ok(Tensor::from_parts(shape, out))
                    }
                }
            }
            Op::Broadcast(shape) => {
                let x = inputs[0];
                match broadcast_shape(x.shape(), shape) {
                    Some(s) if &s == shape => {
                        let data = zip_broadcast(
                            x.data(),
                            x.shape(),
                            &[0.0],
                            &vec![1; shape.len()],
                            shape,
                            |a, _| a,
                        );
                        Ok(Tensor::from_parts(shape.clone(), data))
                    }
                    _ => Err(self.mismatch(inputs)),
                }
            }
            Op::Tanh => unary(f64::tanh),
            Op::Sigmoid => unary(sigmoid),
            Op::Relu => unary(|x| x.max(0.0)),
            Op::Exp => unary(f64::exp),
            Op::Log => unary(f64::ln),
            Op::Sqrt => unary(f64::sqrt),
            Op::Square => unary(|x| x * x),
            Op::L2Norm => {
                let x = inputs[0];
                let n = *x.shape().last().expect("rank >= 1");
                let out = x
                    .data()
                    .chunks_exact(n)
                    .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
                    .collect();
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = 1;
                Ok(Tensor::from_parts(shape, out))
            }
            Op::LogSoftmax => {
                let x = inputs[0];
                let n = *x.shape().last().expect("rank >= 1");
                let mut out = Vec::with_capacity(x.len());
                for row in x.data().chunks_exact(n) {
                    let lse = log_sum_exp(row);
                    out.extend(row.iter().map(|v| v - lse));
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), out))
            }
            Op::GatherRows(idx) => {
                let x = inputs[0];
                let (rows, cols) = x.dims2().ok_or_else(|| self.mismatch(inputs))?;
                if idx.is_empty() || idx.iter().any(|&i| i >= rows) {
                    return Err(self.mismatch(inputs));
                }
                let mut out = Vec::with_capacity(idx.len() * cols);
                for &i in idx {
                    out.extend_from_slice(&x.data()[i * cols..(i + 1) * cols]);
                }
                Ok(Tensor::from_parts(vec![idx.len(), cols], out))
            }
            Op::Scale(c) => {
                let c = *c;
                Ok(inputs[0].map(|x| x * c))
            }
            Op::AddScalar(c) => {
                let c = *c;
                Ok(inputs[0].map(|x| x + c))
            }
            Op::Linear(map) => {
                let shape = map.output_shape(inputs[0].shape())?;
                let out = map.apply(inputs[0]);
                if out.shape() != shape.as_slice() {
                    return Err(self.mismatch(&[inputs[0], &out]));
                }
                Ok(out)
            }
        }
    }

    /// Adjoint of each input given the output adjoint `grad`.
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &[f64],
    ) -> Vec<Vec<f64>> {
        let out_shape = output.shape();
        let elementwise = |f: &dyn Fn(f64, f64, f64) -> f64| {
            let x = inputs[0].data();
            let y = output.data();
            vec![(0..x.len()).map(|i| f(x[i], y[i], grad[i])).collect()]
        };
        match self {
            Op::Param(_) | Op::Input(_) | Op::Constant => Vec::new(),
            Op::Add | Op::Sub => {
                let ga = reduce_to(grad, out_shape, inputs[0].shape());
                let mut gb = reduce_to(grad, out_shape, inputs[1].shape());
                if matches!(self, Op::Sub) {
                    gb.iter_mut().for_each(|g| *g = -*g);
                }
                vec![ga, gb]
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let b_full =
                    zip_broadcast(grad, out_shape, b.data(), b.shape(), out_shape, |g, y| {
                        g * y
                    });
                let a_full =
                    zip_broadcast(grad, out_shape, a.data(), a.shape(), out_shape, |g, x| {
                        g * x
                    });
                vec![
                    reduce_to(&b_full, out_shape, a.shape()),
                    reduce_to(&a_full, out_shape, b.shape()),
                ]
            }
            Op::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let ga_full =
                    zip_broadcast(grad, out_shape, b.data(), b.shape(), out_shape, |g, y| {
                        g / y
                    });
                // d(a/b)/db = -(a/b)/b
                let q = zip_broadcast(
                    output.data(),
                    out_shape,
                    b.data(),
                    b.shape(),
                    out_shape,
                    |o, y| o / y,
                );
                let gb_full: Vec<f64> = q.iter().zip(grad).map(|(q, g)| -q * g).collect();
                vec![
                    reduce_to(&ga_full, out_shape, a.shape()),
                    reduce_to(&gb_full, out_shape, b.shape()),
                ]
            }
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = a.dims2().expect("checked in forward");
                let n = b.dims2().expect("checked in forward").1;
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, grad, (n, 1), b.data(), (1, n), 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), (1, k), grad, (n, 1), 0.0, &mut gb);
                vec![ga, gb]
            }
            Op::Transpose => {
                let (r, c) = inputs[0].dims2().expect("checked in forward");
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[i * c + j] = grad[j * r + i];
                    }
                }
                vec![out]
            }
            Op::Reshape(_) => vec![grad.to_vec()],
            Op::Concat { axis } => {
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut grads: Vec<Vec<f64>> =
                    inputs.iter().map(|t| Vec::with_capacity(t.len())).collect();
                for o in 0..outer {
                    let mut cursor = o * total * inner;
                    for (g, t) in grads.iter_mut().zip(inputs) {
                        let width = t.shape()[*axis] * inner;
                        g.extend_from_slice(&grad[cursor..cursor + width]);
                        cursor += width;
                    }
                }
                grads
            }
            Op::Slice { axis, start, end } => {
                let x = inputs[0];
                let (outer, extent, inner) = split_axis(x.shape(), *axis);
                let width = (end - start) * inner;
                let mut out = vec![0.0; x.len()];
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    out[base..base + width].copy_from_slice(&grad[o * width..(o + 1) * width]);
                }
                vec![out]
            }
            Op::Sum { axis } | Op::Mean { axis } => {
                let x = inputs[0];
                let denom = match (self, axis) {
                    (Op::Mean { .. }, None) => x.len() as f64,
                    (Op::Mean { .. }, Some(a)) => x.shape()[*a] as f64,
                    _ => 1.0,
                };
                let scaled: Vec<f64> = grad.iter().map(|g| g / denom).collect();
                vec![zip_broadcast(
                    &vec![0.0; x.len()],
                    x.shape(),
                    &scaled,
                    out_shape,
                    x.shape(),
                    |_, g| g,
                )]
            }
            Op::Broadcast(_) => vec![reduce_to(grad, out_shape, inputs[0].shape())],
            Op::Tanh => elementwise(&|_, y, g| g * (1.0 - y * y)),
            Op::Sigmoid => elementwise(&|_, y, g| g * y * (1.0 - y)),
            Op::Relu => elementwise(&|x, _, g| if x > 0.0 { g } else { 0.0 }),
            Op::Exp => elementwise(&|_, y, g| g * y),
            Op::Log => elementwise(&|x, _, g| g / x),
            Op::Sqrt => elementwise(&|_, y, g| g / (2.0 * y)),
            Op::Square => elementwise(&|x, _, g| 2.0 * x * g),
            Op::L2Norm => {
                let x = inputs[0];
                let n = *x.shape().last().unwrap();
                let mut out = Vec::with_capacity(x.len());
                for ((row, norm), g) in x.data().chunks_exact(n).zip(output.data()).zip(grad) {
                    if *norm > 0.0 {
                        out.extend(row.iter().map(|v| g * v / norm));
                    } else {
                        out.extend(std::iter::repeat_n(0.0, n));
                    }
                }
                vec![out]
            }
            Op::LogSoftmax => {
                let n = *out_shape.last().unwrap();
                let mut out = Vec::with_capacity(output.len());
                for (y, g) in output.data().chunks_exact(n).zip(grad.chunks_exact(n)) {
                    let gsum: f64 = g.iter().sum();
                    out.extend(y.iter().zip(g).map(|(y, g)| g - y.exp() * gsum));
                }
                vec![out]
            }
            Op::GatherRows(idx) => {
                let x = inputs[0];
                let cols = x.dims2().unwrap().1;
                let mut out = vec![0.0; x.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, g) in out[i * cols..(i + 1) * cols]
                        .iter_mut()
                        .zip(&grad[r * cols..])
                    {
                        *acc += g;
                    }
                }
                vec![out]
            }
            Op::Scale(c) => vec![grad.iter().map(|g| g * c).collect()],
            Op::AddScalar(_) => vec![grad.to_vec()],
            Op::Linear(map) => {
                let g = Tensor::from_parts(out_shape.to_vec(), grad.to_vec());
                vec![map.adjoint(&g).into_vec()]
            }
        }
    }
}

fn concat(inputs: &[&Tensor], axis: usize) -> Option<Tensor> {
    let first = inputs.first()?;
    if axis >= first.rank() {
        return None;
    }
    let mut shape = first.shape().to_vec();
    let mut total = 0;
    for t in inputs {
        if t.rank() != shape.len()
            || t.shape()
                .iter()
                .enumerate()
                .any(|(d, &e)| d != axis && e != shape[d])
        {
            return None;
        }
        total += t.shape()[axis];
    }
    shape[axis] = total;
    let (outer, _, inner) = split_axis(&shape, axis);
    let mut out = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let width = t.shape()[axis] * inner;
            out.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
        }
    }
    Some(Tensor::from_parts(shape, out))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln Σ exp(x)` with the maximum shifted out.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
