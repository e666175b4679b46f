use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::ops::{LinearMap, Op};
use super::{GraphError, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Define-by-run computation record.
///
/// Every op is evaluated eagerly when recorded, so values are available for
/// host-side control flow. The recorded graph can later be re-evaluated with
/// new leaf bindings through [`Tape::replay`], which is what finite-difference
/// checks rely on.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaves: BTreeMap<String, usize>,
    trainable: BTreeSet<String>,
    outputs: BTreeMap<String, usize>,
    first_non_finite: Option<usize>,
}

/// Gradients of a scalar with respect to every trainable parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

/// Adjoints of every node reached from a scalar, indexed by [`Var`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Adjoints {
    /// Adjoint of `var`; zeros when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        let shape = self.shapes[var.0].clone();
        match &self.grads[var.0] {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    /// Value of a one-element node.
    pub fn scalar(&self, var: Var) -> Result<f64, GraphError> {
        let v = self.value(var);
        v.item().ok_or_else(|| GraphError::NotScalar {
            shape: v.shape().to_vec(),
        })
    }

    pub fn op(&self, var: Var) -> &Op {
        &self.nodes[var.0].op
    }

    fn leaf(&mut self, name: Option<String>, op: Op, value: Tensor) -> Var {
        let id = self.nodes.len();
        if let Some(name) = name {
            let prior = self.leaves.insert(name.clone(), id);
            assert!(prior.is_none(), "leaf `{name}` bound twice on one tape");
        }
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
        });
        Var(id)
    }

    /// Trainable leaf. Its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        self.trainable.insert(name.clone());
        self.leaf(Some(name.clone()), Op::Param(name), value)
    }

    /// Named, non-trainable leaf that [`Tape::replay`] can rebind.
    pub fn input(&mut self, name: impl Into<String>, value: Tensor) -> Var {
        let name = name.into();
        self.leaf(Some(name.clone()), Op::Input(name), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(None, Op::Constant, value)
    }

    /// Records `value` under an output name returned by [`Tape::replay`].
    pub fn mark_output(&mut self, name: impl Into<String>, var: Var) {
        self.outputs.insert(name.into(), var.0);
    }

    pub fn leaf_var(&self, name: &str) -> Option<Var> {
        self.leaves.get(name).copied().map(Var)
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.trainable.iter().map(String::as_str)
    }

    /// Current values of the trainable leaves.
    pub fn param_values(&self) -> BTreeMap<String, Tensor> {
        self.trainable
            .iter()
            .map(|n| (n.clone(), self.nodes[self.leaves[n]].value.clone()))
            .collect()
    }

    fn push(&mut self, op: Op, inputs: &[Var]) -> Result<Var, GraphError> {
        let value = {
            let args: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
            op.forward(&args)?
        };
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.0).collect(),
            value,
        });
        Ok(Var(id))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        self.push(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Transpose, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GraphError> {
        self.push(Op::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, GraphError> {
        if parts.is_empty() {
            return Err(GraphError::InvalidArgument("concat of nothing".into()));
        }
        self.push(Op::Concat { axis }, parts)
    }

    pub fn slice(
        &mut self,
        a: Var,
        axis: usize,
        start: usize,
        end: usize,
    ) -> Result<Var, GraphError> {
        self.push(Op::Slice { axis, start, end }, &[a])
    }

    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var, GraphError> {
        self.push(Op::Sum { axis: Some(axis) }, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Sum { axis: None }, &[a])
    }

    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, GraphError> {
        self.push(Op::Mean { axis: Some(axis) }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Mean { axis: None }, &[a])
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, GraphError> {
        self.push(Op::Broadcast(shape.to_vec()), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Sigmoid, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Relu, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Exp, &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Log, &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Sqrt, &[a])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Square, &[a])
    }

    pub fn l2_norm(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::L2Norm, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var, GraphError> {
        self.push(Op::LogSoftmax, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, GraphError> {
        self.push(Op::GatherRows(rows.to_vec()), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, GraphError> {
        self.push(Op::Scale(c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, GraphError> {
        self.push(Op::AddScalar(c), &[a])
    }

    pub fn linear(&mut self, map: Arc<dyn LinearMap>, a: Var) -> Result<Var, GraphError> {
        self.push(Op::Linear(map), &[a])
    }

    /// Sum of products over all elements of two same-shape tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    /// `x / ‖x‖` along the last axis.
    pub fn normalize(&mut self, a: Var) -> Result<Var, GraphError> {
        let n = self.l2_norm(a)?;
        self.div(a, n)
    }

    /// Cosine similarity of two row vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, GraphError> {
        let ua = self.normalize(a)?;
        let ub = self.normalize(b)?;
        self.dot(ua, ub)
    }

    /// Errors with the first node whose value is not finite.
    pub fn check_finite(&self) -> Result<(), GraphError> {
        match self.first_non_finite {
            None => Ok(()),
            Some(id) => Err(GraphError::NonFinite {
                node: id,
                op: self.nodes[id].op.name(),
            }),
        }
    }

    /// Re-evaluates every node with the given leaf rebindings and returns the
    /// marked outputs.
    pub fn replay(
        &mut self,
        inputs: &BTreeMap<String, Tensor>,
    ) -> Result<BTreeMap<String, Tensor>, GraphError> {
        for name in inputs.keys() {
            if !self.leaves.contains_key(name) {
                return Err(GraphError::UnknownLeaf(name.clone()));
            }
        }
        self.first_non_finite = None;
        for id in 0..self.nodes.len() {
            let value = match &self.nodes[id].op {
                Op::Param(name) | Op::Input(name) => match inputs.get(name) {
                    Some(v) => {
                        if v.shape() != self.nodes[id].value.shape() {
                            return Err(GraphError::ShapeMismatch {
                                op: "rebind",
                                shapes: vec![
                                    self.nodes[id].value.shape().to_vec(),
                                    v.shape().to_vec(),
                                ],
                            });
                        }
                        v.clone()
                    }
                    None => self.nodes[id].value.clone(),
                },
                Op::Constant => self.nodes[id].value.clone(),
                op => {
                    let args: Vec<&Tensor> = self.nodes[id]
                        .inputs
                        .iter()
                        .map(|&i| &self.nodes[i].value)
                        .collect();
                    op.forward(&args)?
                }
            };
            if self.first_non_finite.is_none() && !value.is_finite() {
                self.first_non_finite = Some(id);
            }
            self.nodes[id].value = value;
        }
        self.check_finite()?;
        Ok(self
            .outputs
            .iter()
            .map(|(n, &id)| (n.clone(), self.nodes[id].value.clone()))
            .collect())
    }

    /// Reverse sweep from a scalar node, returning the adjoint of every node.
    pub fn adjoints(&self, loss: Var) -> Result<Adjoints, GraphError> {
        self.check_finite()?;
        let loss_value = &self.nodes[loss.0].value;
        if loss_value.len() != 1 {
            return Err(GraphError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if let Op::Slice { axis, start, end } = node.op {
                // Scatter straight into the input's adjoint; per-step slices of
                // a long sequence would otherwise each allocate its full size.
                let input = node.inputs[0];
                let shape = self.nodes[input].value.shape();
                let (outer, extent, inner) = super::kernels::split_axis(shape, axis);
                let width = (end - start) * inner;
                let acc = grads[input].get_or_insert_with(|| vec![0.0; outer * extent * inner]);
                for o in 0..outer {
                    let base = o * extent * inner + start * inner;
                    acc[base..base + width]
                        .iter_mut()
                        .zip(&g[o * width..(o + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
            } else if !node.op.is_leaf() {
                let args: Vec<&Tensor> =
                    node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                let input_grads = node.op.backward(&args, &node.value, &g);
                for (&input, ig) in node.inputs.iter().zip(input_grads) {
                    match &mut grads[input] {
                        Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(ig),
                    }
                }
            }
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Adjoints {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    /// Gradients of a scalar node with respect to all trainable parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients, GraphError> {
        let adjoints = self.adjoints(loss)?;
        let mut map = BTreeMap::new();
        for name in &self.trainable {
            let g = adjoints.get(Var(self.leaves[name]));
            if !g.is_finite() {
                return Err(GraphError::NonFiniteGradient(name.clone()));
            }
            map.insert(name.clone(), g);
        }
        Ok(Gradients { map })
    }
}

impl Gradients {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        Self { map }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    /// Euclidean norm over every coordinate of every parameter.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|g| g * c)))
                .collect(),
        }
    }

    /// Elementwise sum; both sides must carry the same parameter set.
    pub fn accumulate(&mut self, other: &Gradients) -> Result<(), GraphError> {
        if self.map.is_empty() {
            self.map = other.map.clone();
            return Ok(());
        }
        if !self.map.keys().eq(other.map.keys()) {
            return Err(GraphError::InvalidArgument("gradient sets differ".into()));
        }
        for (k, v) in self.map.iter_mut() {
            let o = &other.map[k];
            let data = v.data().iter().zip(o.data()).map(|(a, b)| a + b).collect();
            *v = Tensor::from_parts(v.shape().to_vec(), data);
        }
        Ok(())
    }
}
