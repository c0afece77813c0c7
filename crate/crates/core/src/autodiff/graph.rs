use std::rc::Rc;

use super::kernels::{self, PROB_FLOOR};
use crate::error::{LabError, Result};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    StopGradient,
    /// `big` has the output shape; `small` is broadcast over it (suffix rule).
    Add { big: Var, small: Var },
    Mul { big: Var, small: Var },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    Log { x: Var },
    Exp { x: Var },
    Powf { x: Var, exponent: f64 },
    Gather { x: Var, index: Vec<usize> },
    Sum { x: Var },
    Mean { x: Var },
    LayerNorm { x: Var, rstd: Vec<f64> },
    Gelu { x: Var },
    Relu { x: Var },
    Transpose { x: Var, axis0: usize, axis1: usize },
    Reshape { x: Var },
    Embedding { table: Var, ids: Vec<usize> },
    Affine { x: Var, scale: f64 },
    MaskFill { x: Var, mask: Rc<[bool]> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::StopGradient => "stop_gradient",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "multiply",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Log { .. } => "log",
            Op::Exp { .. } => "exp",
            Op::Powf { .. } => "powf",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu { .. } => "gelu",
            Op::Relu { .. } => "relu",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Embedding { .. } => "embedding",
            Op::Affine { .. } => "affine",
            Op::MaskFill { .. } => "mask_fill",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf | Op::StopGradient => vec![],
            Op::Add { big, small } | Op::Mul { big, small } => vec![big, small],
            Op::MatMul { a, b, .. } => vec![a, b],
            Op::Embedding { table, .. } => vec![table],
            Op::Softmax { x }
            | Op::LogSoftmax { x }
            | Op::Log { x }
            | Op::Exp { x }
            | Op::Powf { x, .. }
            | Op::Gather { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::LayerNorm { x, .. }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::Transpose { x, .. }
            | Op::Reshape { x }
            | Op::Affine { x, .. }
            | Op::MaskFill { x, .. } => vec![x],
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    /// Accumulated gradient; only kept for trainable leaves.
    grad: Option<Vec<f64>>,
}

/// One entry of the computation record, exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpRecord {
    pub kind: &'static str,
    pub inputs: Vec<Var>,
    pub output: Var,
}

/// Append-only computation record for reverse-mode differentiation.
///
/// Nodes are stored in creation order, which is a topological order: every
/// op's inputs already exist when it is recorded. `backward` walks the record
/// once in reverse. Gradients of trainable leaves accumulate across calls
/// until [`Graph::zero_grad`].
///
/// A graph is confined to one thread; use one graph per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient => false,
            other => other
                .inputs()
                .iter()
                .any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Records `tensor` as a leaf. It is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: &Tensor) -> Var {
        let requires_grad = tensor.requires_grad();
        let var = self.push(tensor.shape().to_vec(), tensor.values().to_vec(), Op::Leaf);
        let node = &mut self.nodes[var.0];
        node.requires_grad = requires_grad;
        if requires_grad {
            node.grad = Some(vec![0.0; node.value.len()]);
        }
        var
    }

    /// Records a non-differentiable constant.
    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, values)?;
        Ok(self.leaf(&t))
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.leaf(&Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.node(v).value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of a trainable leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    /// Materializes a recorded value (with its gradient, if any) as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let node = self.node(v);
        let mut t = Tensor::new(node.shape.clone(), node.value.clone())
            .expect("recorded nodes always have consistent shapes");
        if let Some(g) = &node.grad {
            t.set_requires_grad(true);
            t.accumulate_grad(g);
        }
        t
    }

    pub fn record(&self) -> Vec<OpRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| OpRecord {
                kind: n.op.name(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    // ---- primitives -------------------------------------------------------

    /// Identity forward, zero backward.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let node = self.node(x);
        let (shape, value) = (node.shape.clone(), node.value.clone());
        self.push(shape, value, Op::StopGradient)
    }

    fn broadcast_operands(&self, op: &'static str, a: Var, b: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sb, sa) {
            Ok((a, b))
        } else if is_suffix(sa, sb) {
            Ok((b, a))
        } else {
            Err(LabError::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Elementwise sum; the lower-rank operand must match the trailing
    /// dimensions of the other and is repeated over the leading ones.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_operands("add", a, b)?;
        let sv = &self.node(small).value;
        let bn = self.node(big);
        let value: Vec<f64> = bn
            .value
            .chunks(sv.len())
            .flat_map(|c| c.iter().zip(sv).map(|(x, y)| x + y))
            .collect();
        let shape = bn.shape.clone();
        Ok(self.push(shape, value, Op::Add { big, small }))
    }

    /// Elementwise product with the same broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (big, small) = self.broadcast_operands("multiply", a, b)?;
        let sv = &self.node(small).value;
        let bn = self.node(big);
        let value: Vec<f64> = bn
            .value
            .chunks(sv.len())
            .flat_map(|c| c.iter().zip(sv).map(|(x, y)| x * y))
            .collect();
        let shape = bn.shape.clone();
        Ok(self.push(shape, value, Op::Mul { big, small }))
    }

    /// `a: [..., m, k]` times `b: [k, n]` (shared right operand) or
    /// `b: [..., k, n]` with the same leading dimensions as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || LabError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(err());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(err());
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let mut value = vec![0.0; batch * m * n];
        let (av, bv) = (&self.node(a).value, &self.node(b).value);
        if shared_rhs {
            kernels::matmul_into(batch * m, k, n, av, bv, &mut value);
        } else {
            for i in 0..batch {
                kernels::matmul_into(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut value[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push(
            shape,
            value,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
        ))
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        match self.shape(x).last() {
            Some(&d) => Ok(d),
            None => Err(LabError::Shape {
                op,
                lhs: vec![],
                rhs: vec![],
            }),
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let width = self.last_dim("softmax", x)?;
        let node = self.node(x);
        let mut value = vec![0.0; node.value.len()];
        for (row, out) in node.value.chunks(width).zip(value.chunks_mut(width)) {
            kernels::softmax_row(row, out);
        }
        let shape = node.shape.clone();
        Ok(self.push(shape, value, Op::Softmax { x }))
    }

    /// Log-softmax over the last dimension (log-sum-exp form).
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let width = self.last_dim("log_softmax", x)?;
        let node = self.node(x);
        let mut value = vec![0.0; node.value.len()];
        for (row, out) in node.value.chunks(width).zip(value.chunks_mut(width)) {
            kernels::log_softmax_row(row, out);
        }
        let shape = node.shape.clone();
        Ok(self.push(shape, value, Op::LogSoftmax { x }))
    }

    /// Natural log with inputs clamped to [`PROB_FLOOR`].
    pub fn log(&mut self, x: Var) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|&v| v.max(PROB_FLOOR).ln()).collect();
        let shape = node.shape.clone();
        self.push(shape, value, Op::Log { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|v| v.exp()).collect();
        let shape = node.shape.clone();
        self.push(shape, value, Op::Exp { x })
    }

    /// `x^exponent` for `x ≥ 0`.
    pub fn powf(&mut self, x: Var, exponent: f64) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|v| v.powf(exponent)).collect();
        let shape = node.shape.clone();
        self.push(shape, value, Op::Powf { x, exponent })
    }

    /// `scale · x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|v| scale * v + shift).collect();
        let shape = node.shape.clone();
        self.push(shape, value, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    /// Picks `x[..., index[i]]` from each row of the last dimension.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let width = self.last_dim("gather", x)?;
        let node = self.node(x);
        let rows = node.value.len() / width;
        if index.len() != rows {
            return Err(LabError::Shape {
                op: "gather",
                lhs: node.shape.clone(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= width) {
            return Err(LabError::IndexOutOfRange {
                op: "gather",
                index: bad,
                size: width,
            });
        }
        let value = index
            .iter()
            .enumerate()
            .map(|(r, &i)| node.value[r * width + i])
            .collect();
        let mut shape = node.shape[..node.shape.len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        Ok(self.push(
            shape,
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().sum();
        self.push(vec![], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = &self.node(x).value;
        let s = v.iter().sum::<f64>() / v.len() as f64;
        self.push(vec![], vec![s], Op::Mean { x })
    }

    /// Normalization over the last dimension (no affine part).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let width = self.last_dim("layer_norm", x)?;
        let node = self.node(x);
        let mut value = vec![0.0; node.value.len()];
        let rstd = node
            .value
            .chunks(width)
            .zip(value.chunks_mut(width))
            .map(|(row, out)| kernels::layer_norm_row(row, out))
            .collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, value, Op::LayerNorm { x, rstd }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|&v| kernels::gelu(v)).collect();
        let shape = node.shape.clone();
        self.push(shape, value, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let node = self.node(x);
        let value = node.value.iter().map(|&v| v.max(0.0)).collect();
        let shape = node.shape.clone();
        self.push(shape, value, Op::Relu { x })
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, axis0: usize, axis1: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis0 >= shape.len() || axis1 >= shape.len() {
            return Err(LabError::IndexOutOfRange {
                op: "transpose",
                index: axis0.max(axis1),
                size: shape.len(),
            });
        }
        let (value, out_shape) = swap_axes(&self.node(x).value, &shape, axis0, axis1);
        Ok(self.push(out_shape, value, Op::Transpose { x, axis0, axis1 }))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let old = self.shape(x);
        if numel(&shape) != numel(old) || shape.contains(&0) {
            return Err(LabError::Shape {
                op: "reshape",
                lhs: old.to_vec(),
                rhs: shape,
            });
        }
        let value = self.node(x).value.clone();
        Ok(self.push(shape, value, Op::Reshape { x }))
    }

    /// Rows of `table: [vocab, width]` selected by `ids`; output `[ids.len(), width]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return Err(LabError::Shape {
                op: "embedding",
                lhs: shape,
                rhs: vec![ids.len()],
            });
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(LabError::IndexOutOfRange {
                op: "embedding",
                index: bad,
                size: vocab,
            });
        }
        let tv = &self.node(table).value;
        let mut value = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            value.extend_from_slice(&tv[id * width..(id + 1) * width]);
        }
        Ok(self.push(
            vec![ids.len(), width],
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Replaces entries where `mask` is true with `fill`. The mask shape must
    /// match the trailing dimensions of `x`.
    pub fn mask_fill(&mut self, x: Var, mask_shape: &[usize], mask: Rc<[bool]>, fill: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if !is_suffix(mask_shape, &shape) || numel(mask_shape) != mask.len() {
            return Err(LabError::Shape {
                op: "mask_fill",
                lhs: shape,
                rhs: mask_shape.to_vec(),
            });
        }
        let value = self
            .node(x)
            .value
            .chunks(mask.len())
            .flat_map(|c| c.iter().zip(mask.iter()).map(|(&v, &m)| if m { fill } else { v }))
            .collect();
        Ok(self.push(shape, value, Op::MaskFill { x, mask }))
    }

    // ---- reverse pass -----------------------------------------------------

    /// Back-propagates from a scalar `loss`, adding `∂loss/∂leaf` into every
    /// trainable leaf's gradient. Stop-gradient nodes contribute nothing.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if numel(shape) != 1 {
            return Err(LabError::NonScalarLoss(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backward_op(node, &dy, &mut grads);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                let acc = node.grad.get_or_insert_with(|| vec![0.0; g.len()]);
                for (a, d) in acc.iter_mut().zip(&g) {
                    *a += d;
                }
            }
        }
        Ok(())
    }

    fn backward_op(&self, node: &Node, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Gradient buffer for `v`, or None if `v` is not differentiated.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let len = nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add { big, small } => {
                if let Some(g) = slot!(*big) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
                if let Some(g) = slot!(*small) {
                    let w = g.len();
                    for chunk in dy.chunks(w) {
                        g.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                }
            }
            Op::Mul { big, small } => {
                let (bv, sv) = (&nodes[big.0].value, &nodes[small.0].value);
                let w = sv.len();
                if let Some(g) = slot!(*big) {
                    for (gc, dc) in g.chunks_mut(w).zip(dy.chunks(w)) {
                        for ((g, d), s) in gc.iter_mut().zip(dc).zip(sv) {
                            *g += d * s;
                        }
                    }
                }
                if let Some(g) = slot!(*small) {
                    for (dc, bc) in dy.chunks(w).zip(bv.chunks(w)) {
                        for ((g, d), b) in g.iter_mut().zip(dc).zip(bc) {
                            *g += d * b;
                        }
                    }
                }
            }
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                if shared_rhs {
                    let rows = batch * m;
                    if let Some(g) = slot!(a) {
                        // dA = dC · Bᵀ
                        kernels::gemm(rows, n, k, dy, n, 1, bv, 1, n, 1.0, g, k, 1);
                    }
                    if let Some(g) = slot!(b) {
                        // dB = Aᵀ · dC
                        kernels::gemm(k, rows, n, av, 1, k, dy, n, 1, 1.0, g, n, 1);
                    }
                } else {
                    if let Some(g) = slot!(a) {
                        for i in 0..batch {
                            kernels::gemm(
                                m,
                                n,
                                k,
                                &dy[i * m * n..],
                                n,
                                1,
                                &bv[i * k * n..],
                                1,
                                n,
                                1.0,
                                &mut g[i * m * k..(i + 1) * m * k],
                                k,
                                1,
                            );
                        }
                    }
                    if let Some(g) = slot!(b) {
                        for i in 0..batch {
                            kernels::gemm(
                                k,
                                m,
                                n,
                                &av[i * m * k..],
                                1,
                                k,
                                &dy[i * m * n..],
                                n,
                                1,
                                1.0,
                                &mut g[i * k * n..(i + 1) * k * n],
                                n,
                                1,
                            );
                        }
                    }
                }
            }
            Op::Softmax { x } => {
                let w = *node.shape.last().unwrap();
                if let Some(g) = slot!(*x) {
                    for ((gr, yr), dr) in g.chunks_mut(w).zip(node.value.chunks(w)).zip(dy.chunks(w)) {
                        let dot: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                        for ((g, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += y * (d - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax { x } => {
                let w = *node.shape.last().unwrap();
                if let Some(g) = slot!(*x) {
                    for ((gr, yr), dr) in g.chunks_mut(w).zip(node.value.chunks(w)).zip(dy.chunks(w)) {
                        let total: f64 = dr.iter().sum();
                        for ((g, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += d - y.exp() * total;
                        }
                    }
                }
            }
            Op::Log { x } => {
                let xv = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    for ((g, &xi), d) in g.iter_mut().zip(xv).zip(dy) {
                        if xi > PROB_FLOOR {
                            *g += d / xi;
                        }
                    }
                }
            }
            Op::Exp { x } => {
                if let Some(g) = slot!(*x) {
                    for ((g, y), d) in g.iter_mut().zip(&node.value).zip(dy) {
                        *g += d * y;
                    }
                }
            }
            &Op::Powf { x, exponent } => {
                let xv = &nodes[x.0].value;
                if let Some(g) = slot!(x) {
                    if exponent != 0.0 {
                        for ((g, &xi), d) in g.iter_mut().zip(xv).zip(dy) {
                            *g += d * exponent * xi.max(PROB_FLOOR).powf(exponent - 1.0);
                        }
                    }
                }
            }
            Op::Gather { x, index } => {
                let w = *nodes[x.0].shape.last().unwrap();
                if let Some(g) = slot!(*x) {
                    for (r, (&i, d)) in index.iter().zip(dy).enumerate() {
                        g[r * w + i] += d;
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(g) = slot!(*x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
            Op::Mean { x } => {
                if let Some(g) = slot!(*x) {
                    let d = dy[0] / g.len() as f64;
                    g.iter_mut().for_each(|g| *g += d);
                }
            }
            Op::LayerNorm { x, rstd } => {
                let w = *node.shape.last().unwrap();
                if let Some(g) = slot!(*x) {
                    let rows = g.chunks_mut(w).zip(node.value.chunks(w)).zip(dy.chunks(w));
                    for (((gr, yr), dr), &r) in rows.zip(rstd) {
                        let mean_d = dr.iter().sum::<f64>() / w as f64;
                        let mean_dy = dr.iter().zip(yr).map(|(d, y)| d * y).sum::<f64>() / w as f64;
                        for ((g, y), d) in gr.iter_mut().zip(yr).zip(dr) {
                            *g += r * (d - mean_d - y * mean_dy);
                        }
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    for ((g, &xi), d) in g.iter_mut().zip(xv).zip(dy) {
                        *g += d * kernels::gelu_grad(xi);
                    }
                }
            }
            Op::Relu { x } => {
                let xv = &nodes[x.0].value;
                if let Some(g) = slot!(*x) {
                    for ((g, &xi), d) in g.iter_mut().zip(xv).zip(dy) {
                        if xi > 0.0 {
                            *g += d;
                        }
                    }
                }
            }
            &Op::Transpose { x, axis0, axis1 } => {
                if let Some(g) = slot!(x) {
                    let (back, _) = swap_axes(dy, &node.shape, axis0, axis1);
                    g.iter_mut().zip(&back).for_each(|(g, d)| *g += d);
                }
            }
            Op::Reshape { x } => {
                if let Some(g) = slot!(*x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                }
            }
            Op::Embedding { table, ids } => {
                let w = *node.shape.last().unwrap();
                if let Some(g) = slot!(*table) {
                    for (&id, d) in ids.iter().zip(dy.chunks(w)) {
                        g[id * w..(id + 1) * w]
                            .iter_mut()
                            .zip(d)
                            .for_each(|(g, d)| *g += d);
                    }
                }
            }
            &Op::Affine { x, scale } => {
                if let Some(g) = slot!(x) {
                    g.iter_mut().zip(dy).for_each(|(g, d)| *g += scale * d);
                }
            }
            Op::MaskFill { x, mask } => {
                if let Some(g) = slot!(*x) {
                    for (gc, dc) in g.chunks_mut(mask.len()).zip(dy.chunks(mask.len())) {
                        for ((g, d), &m) in gc.iter_mut().zip(dc).zip(mask.iter()) {
                            if !m {
                                *g += d;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Copies `src` (row-major, `shape`) with two axes swapped.
fn swap_axes(src: &[f64], shape: &[usize], axis0: usize, axis1: usize) -> (Vec<f64>, Vec<usize>) {
    let mut out_shape = shape.to_vec();
    out_shape.swap(axis0, axis1);
    if axis0 == axis1 {
        return (src.to_vec(), out_shape);
    }
    let (lo, hi) = (axis0.min(axis1), axis0.max(axis1));
    let pre: usize = shape[..lo].iter().product();
    let d_lo = shape[lo];
    let mid: usize = shape[lo + 1..hi].iter().product();
    let d_hi = shape[hi];
    let post: usize = shape[hi + 1..].iter().product();
    let mut out = vec![0.0; src.len()];
    // src index: [p, a, m, b, q]; dst index: [p, b, m, a, q]
    for p in 0..pre {
        for b in 0..d_hi {
            for m in 0..mid {
                for a in 0..d_lo {
                    let s = (((p * d_lo + a) * mid + m) * d_hi + b) * post;
                    let d = (((p * d_hi + b) * mid + m) * d_lo + a) * post;
                    out[d..d + post].copy_from_slice(&src[s..s + post]);
                }
            }
        }
    }
    (out, out_shape)
}
