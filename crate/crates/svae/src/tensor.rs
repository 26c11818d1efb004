//! Reverse-mode automatic differentiation over dense row-major f64 tensors.
//!
//! A `Graph` is a flat tape: every primitive application appends one node and
//! `backward` walks the tape in exact reverse construction order. Graphs are
//! rebuilt each training step (define by run). Nothing here is shared across
//! threads, so identical inputs produce bit-identical values and gradients.

use thiserror::Error;

pub type Shape = Vec<usize>;

/// Largest argument accepted by `exp` before f64 overflow (e^710 is inf).
const EXP_MAX: f64 = 709.0;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{primitive}: shape mismatch, got {shapes:?}")]
    ShapeMismatch {
        primitive: &'static str,
        shapes: Vec<Shape>,
    },
    #[error("{primitive}: expected {expected} inputs, got {got}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{primitive}: domain violation at flat index {index} (value {value})")]
    Domain {
        primitive: &'static str,
        index: usize,
        value: f64,
    },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Shape },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// Handle into a `Graph`. Only valid for the graph that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Primitive {
    Add,
    Subtract,
    Multiply,
    MatMul,
    Relu,
    LeakyRelu { slope: f64 },
    Tanh,
    Sigmoid,
    Log,
    Exp,
    Softplus,
    Negate,
    MeanReduce,
    SumReduce,
    Concat,
    BroadcastAdd,
    Square,
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Subtract => "subtract",
            Primitive::Multiply => "multiply",
            Primitive::MatMul => "matmul",
            Primitive::Relu => "relu",
            Primitive::LeakyRelu { .. } => "leaky-relu",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Softplus => "softplus",
            Primitive::Negate => "negate",
            Primitive::MeanReduce => "mean-reduce",
            Primitive::SumReduce => "sum-reduce",
            Primitive::Concat => "concat",
            Primitive::BroadcastAdd => "broadcast-add",
            Primitive::Square => "square",
        }
    }

    fn arity(&self) -> usize {
        match self {
            Primitive::Add
            | Primitive::Subtract
            | Primitive::Multiply
            | Primitive::MatMul
            | Primitive::Concat
            | Primitive::BroadcastAdd => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum NodeOp {
    Source,
    Apply(Primitive, Vec<TensorId>),
}

#[derive(Debug, Clone)]
struct Node {
    op: NodeOp,
    shape: Shape,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Overflow-safe logistic function, exact at 0.
pub fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow for large |x|.
pub fn stable_softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    fn push(&mut self, node: Node) -> TensorId {
        self.nodes.push(node);
        TensorId(self.nodes.len() - 1)
    }

    /// Trainable input: participates in backward.
    pub fn leaf(&mut self, values: Vec<f64>, shape: Shape) -> TensorId {
        assert_eq!(values.len(), numel(&shape), "leaf data/shape mismatch");
        self.push(Node {
            op: NodeOp::Source,
            shape,
            values,
            requires_grad: true,
            grad: None,
        })
    }

    /// Fixed input: no gradient is ever computed for it.
    pub fn constant(&mut self, values: Vec<f64>, shape: Shape) -> TensorId {
        assert_eq!(values.len(), numel(&shape), "constant data/shape mismatch");
        self.push(Node {
            op: NodeOp::Source,
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn constant_scalar(&mut self, v: f64) -> TensorId {
        self.constant(vec![v], vec![])
    }

    /// Constant with every element equal to `v`, shaped like `like`.
    pub fn constant_full(&mut self, v: f64, like: TensorId) -> TensorId {
        let shape = self.nodes[like.0].shape.clone();
        let n = numel(&shape);
        self.constant(vec![v; n], shape)
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a single-element tensor.
    pub fn value_scalar(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].values.len(), 1);
        self.nodes[id.0].values[0]
    }

    /// Gradient accumulated by the last `backward`, if this node needed one.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    // ---- forward -----------------------------------------------------------

    /// Single dispatch point for every primitive. Shape checking happens here
    /// so that a mismatch is reported with the primitive name and the exact
    /// offending shapes.
    pub fn apply(&mut self, kind: Primitive, inputs: &[TensorId]) -> Result<TensorId> {
        if inputs.len() != kind.arity() {
            return Err(TensorError::Arity {
                primitive: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|t| self.shape(*t)).collect();
        let out_shape = output_shape(kind, &shapes).ok_or_else(|| TensorError::ShapeMismatch {
            primitive: kind.name(),
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        })?;

        let values = self.forward_values(kind, inputs, &out_shape)?;
        let requires_grad = inputs.iter().any(|t| self.nodes[t.0].requires_grad);
        Ok(self.push(Node {
            op: NodeOp::Apply(kind, inputs.to_vec()),
            shape: out_shape,
            values,
            requires_grad,
            grad: None,
        }))
    }

    fn forward_values(
        &self,
        kind: Primitive,
        inputs: &[TensorId],
        out_shape: &[usize],
    ) -> Result<Vec<f64>> {
        let a = &self.nodes[inputs[0].0];
        let mut out = vec![0.0; numel(out_shape)];
        match kind {
            Primitive::Add => {
                let b = &self.nodes[inputs[1].0];
                for (o, (x, y)) in out.iter_mut().zip(a.values.iter().zip(&b.values)) {
                    *o = x + y;
                }
            }
            Primitive::Subtract => {
                let b = &self.nodes[inputs[1].0];
                for (o, (x, y)) in out.iter_mut().zip(a.values.iter().zip(&b.values)) {
                    *o = x - y;
                }
            }
            Primitive::Multiply => {
                let b = &self.nodes[inputs[1].0];
                for (o, (x, y)) in out.iter_mut().zip(a.values.iter().zip(&b.values)) {
                    *o = x * y;
                }
            }
            Primitive::MatMul => {
                let b = &self.nodes[inputs[1].0];
                let (m, k) = (a.shape[0], a.shape[1]);
                let n = b.shape[1];
                matmul_into(&a.values, &b.values, m, k, n, &mut out);
            }
            Primitive::Relu => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = if x > 0.0 { x } else { 0.0 };
                }
            }
            Primitive::LeakyRelu { slope } => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = if x > 0.0 { x } else { slope * x };
                }
            }
            Primitive::Tanh => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = x.tanh();
                }
            }
            Primitive::Sigmoid => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = stable_sigmoid(x);
                }
            }
            Primitive::Log => {
                for (i, (o, &x)) in out.iter_mut().zip(&a.values).enumerate() {
                    if x <= 0.0 {
                        return Err(TensorError::Domain {
                            primitive: "log",
                            index: i,
                            value: x,
                        });
                    }
                    *o = x.ln();
                }
            }
            Primitive::Exp => {
                for (i, (o, &x)) in out.iter_mut().zip(&a.values).enumerate() {
                    if x > EXP_MAX {
                        return Err(TensorError::Domain {
                            primitive: "exp",
                            index: i,
                            value: x,
                        });
                    }
                    *o = x.exp();
                }
            }
            Primitive::Softplus => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = stable_softplus(x);
                }
            }
            Primitive::Negate => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = -x;
                }
            }
            Primitive::MeanReduce => {
                out[0] = a.values.iter().sum::<f64>() / a.values.len() as f64;
            }
            Primitive::SumReduce => {
                out[0] = a.values.iter().sum::<f64>();
            }
            Primitive::Concat => {
                let b = &self.nodes[inputs[1].0];
                let (rows, ca, cb) = concat_dims(&a.shape, &b.shape);
                for r in 0..rows {
                    out[r * (ca + cb)..r * (ca + cb) + ca]
                        .copy_from_slice(&a.values[r * ca..(r + 1) * ca]);
                    out[r * (ca + cb) + ca..(r + 1) * (ca + cb)]
                        .copy_from_slice(&b.values[r * cb..(r + 1) * cb]);
                }
            }
            Primitive::BroadcastAdd => {
                let b = &self.nodes[inputs[1].0];
                let (m, n) = (a.shape[0], a.shape[1]);
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = a.values[i * n + j] + b.values[j];
                    }
                }
            }
            Primitive::Square => {
                for (o, &x) in out.iter_mut().zip(&a.values) {
                    *o = x * x;
                }
            }
        }
        Ok(out)
    }

    // ---- convenience wrappers ---------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Add, &[a, b])
    }
    pub fn subtract(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Subtract, &[a, b])
    }
    pub fn multiply(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Multiply, &[a, b])
    }
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::MatMul, &[a, b])
    }
    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Relu, &[a])
    }
    pub fn leaky_relu(&mut self, a: TensorId, slope: f64) -> Result<TensorId> {
        self.apply(Primitive::LeakyRelu { slope }, &[a])
    }
    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Tanh, &[a])
    }
    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Sigmoid, &[a])
    }
    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Log, &[a])
    }
    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Exp, &[a])
    }
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Softplus, &[a])
    }
    pub fn negate(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Negate, &[a])
    }
    pub fn mean_reduce(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::MeanReduce, &[a])
    }
    pub fn sum_reduce(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::SumReduce, &[a])
    }
    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Concat, &[a, b])
    }
    pub fn broadcast_add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.apply(Primitive::BroadcastAdd, &[a, b])
    }
    pub fn square(&mut self, a: TensorId) -> Result<TensorId> {
        self.apply(Primitive::Square, &[a])
    }

    /// Elementwise multiplication by a scalar constant.
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let k = self.constant_full(c, a);
        self.multiply(a, k)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from `loss` (which must hold exactly one element) back to
    /// every source that requires a gradient. Visits nodes in exact reverse
    /// construction order; gradients accumulate by addition, so fan-out is
    /// handled without any bookkeeping. Resets previous gradients first.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if numel(&self.nodes[loss.0].shape) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.nodes[loss.0].shape.clone(),
            });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let (op, inputs) = match &self.nodes[idx].op {
                NodeOp::Source => continue,
                NodeOp::Apply(kind, inputs) => (*kind, inputs.clone()),
            };
            let grad_out = self.nodes[idx].grad.clone().unwrap();
            self.backprop_node(idx, op, &inputs, &grad_out);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) -> &mut Vec<f64> {
        let n = numel(&self.nodes[id.0].shape);
        self.nodes[id.0].grad.get_or_insert_with(|| vec![0.0; n])
    }

    fn backprop_node(&mut self, idx: usize, kind: Primitive, inputs: &[TensorId], gout: &[f64]) {
        let needs: Vec<bool> = inputs
            .iter()
            .map(|t| self.nodes[t.0].requires_grad)
            .collect();
        match kind {
            Primitive::Add => {
                for (slot, input) in inputs.iter().enumerate() {
                    if needs[slot] {
                        let g = self.ensure_grad(*input);
                        for (gi, &go) in g.iter_mut().zip(gout) {
                            *gi += go;
                        }
                    }
                }
            }
            Primitive::Subtract => {
                if needs[0] {
                    let g = self.ensure_grad(inputs[0]);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if needs[1] {
                    let g = self.ensure_grad(inputs[1]);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                }
            }
            Primitive::Multiply => {
                if needs[0] {
                    let other = self.nodes[inputs[1].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &y) in g.iter_mut().zip(gout).zip(&other) {
                        *gi += go * y;
                    }
                }
                if needs[1] {
                    let other = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[1]);
                    for ((gi, &go), &x) in g.iter_mut().zip(gout).zip(&other) {
                        *gi += go * x;
                    }
                }
            }
            Primitive::MatMul => {
                let (m, k) = (self.nodes[inputs[0].0].shape[0], self.nodes[inputs[0].0].shape[1]);
                let n = self.nodes[inputs[1].0].shape[1];
                if needs[0] {
                    // dA[i, kk] += sum_j gout[i, j] * B[kk, j]
                    let b = self.nodes[inputs[1].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for i in 0..m {
                        for kk in 0..k {
                            let mut acc = 0.0;
                            let brow = &b[kk * n..(kk + 1) * n];
                            let grow = &gout[i * n..(i + 1) * n];
                            for j in 0..n {
                                acc += grow[j] * brow[j];
                            }
                            g[i * k + kk] += acc;
                        }
                    }
                }
                if needs[1] {
                    // dB[kk, j] += sum_i A[i, kk] * gout[i, j]
                    let a = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[1]);
                    for i in 0..m {
                        let grow = &gout[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let aik = a[i * k + kk];
                            if aik == 0.0 {
                                continue;
                            }
                            let gb = &mut g[kk * n..(kk + 1) * n];
                            for j in 0..n {
                                gb[j] += aik * grow[j];
                            }
                        }
                    }
                }
            }
            Primitive::Relu => {
                if needs[0] {
                    let x = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        if xv > 0.0 {
                            *gi += go;
                        }
                    }
                }
            }
            Primitive::LeakyRelu { slope } => {
                if needs[0] {
                    let x = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        *gi += go * if xv > 0.0 { 1.0 } else { slope };
                    }
                }
            }
            Primitive::Tanh => {
                if needs[0] {
                    let y = self.nodes[idx].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(&y) {
                        *gi += go * (1.0 - yv * yv);
                    }
                }
            }
            Primitive::Sigmoid => {
                if needs[0] {
                    let y = self.nodes[idx].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(&y) {
                        *gi += go * yv * (1.0 - yv);
                    }
                }
            }
            Primitive::Log => {
                if needs[0] {
                    let x = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        *gi += go / xv;
                    }
                }
            }
            Primitive::Exp => {
                if needs[0] {
                    let y = self.nodes[idx].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &yv) in g.iter_mut().zip(gout).zip(&y) {
                        *gi += go * yv;
                    }
                }
            }
            Primitive::Softplus => {
                if needs[0] {
                    let x = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        *gi += go * stable_sigmoid(xv);
                    }
                }
            }
            Primitive::Negate => {
                if needs[0] {
                    let g = self.ensure_grad(inputs[0]);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi -= go;
                    }
                }
            }
            Primitive::MeanReduce => {
                if needs[0] {
                    let n = numel(&self.nodes[inputs[0].0].shape) as f64;
                    let go = gout[0] / n;
                    let g = self.ensure_grad(inputs[0]);
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Primitive::SumReduce => {
                if needs[0] {
                    let go = gout[0];
                    let g = self.ensure_grad(inputs[0]);
                    for gi in g.iter_mut() {
                        *gi += go;
                    }
                }
            }
            Primitive::Concat => {
                let (rows, ca, cb) = concat_dims(
                    &self.nodes[inputs[0].0].shape,
                    &self.nodes[inputs[1].0].shape,
                );
                if needs[0] {
                    let g = self.ensure_grad(inputs[0]);
                    for r in 0..rows {
                        for j in 0..ca {
                            g[r * ca + j] += gout[r * (ca + cb) + j];
                        }
                    }
                }
                if needs[1] {
                    let g = self.ensure_grad(inputs[1]);
                    for r in 0..rows {
                        for j in 0..cb {
                            g[r * cb + j] += gout[r * (ca + cb) + ca + j];
                        }
                    }
                }
            }
            Primitive::BroadcastAdd => {
                let (m, n) = (self.nodes[inputs[0].0].shape[0], self.nodes[inputs[0].0].shape[1]);
                if needs[0] {
                    let g = self.ensure_grad(inputs[0]);
                    for (gi, &go) in g.iter_mut().zip(gout) {
                        *gi += go;
                    }
                }
                if needs[1] {
                    let g = self.ensure_grad(inputs[1]);
                    for i in 0..m {
                        for j in 0..n {
                            g[j] += gout[i * n + j];
                        }
                    }
                }
            }
            Primitive::Square => {
                if needs[0] {
                    let x = self.nodes[inputs[0].0].values.clone();
                    let g = self.ensure_grad(inputs[0]);
                    for ((gi, &go), &xv) in g.iter_mut().zip(gout).zip(&x) {
                        *gi += go * 2.0 * xv;
                    }
                }
            }
        }
    }
}

fn output_shape(kind: Primitive, shapes: &[&[usize]]) -> Option<Shape> {
    match kind {
        Primitive::Add | Primitive::Subtract | Primitive::Multiply => {
            if shapes[0] == shapes[1] {
                Some(shapes[0].to_vec())
            } else {
                None
            }
        }
        Primitive::MatMul => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.len() == 2 && b.len() == 2 && a[1] == b[0] {
                Some(vec![a[0], b[1]])
            } else {
                None
            }
        }
        Primitive::Relu
        | Primitive::LeakyRelu { .. }
        | Primitive::Tanh
        | Primitive::Sigmoid
        | Primitive::Log
        | Primitive::Exp
        | Primitive::Softplus
        | Primitive::Negate
        | Primitive::Square => Some(shapes[0].to_vec()),
        Primitive::MeanReduce | Primitive::SumReduce => {
            if numel(shapes[0]) > 0 {
                Some(vec![])
            } else {
                None
            }
        }
        Primitive::Concat => {
            let (a, b) = (shapes[0], shapes[1]);
            match (a.len(), b.len()) {
                (1, 1) => Some(vec![a[0] + b[0]]),
                (2, 2) if a[0] == b[0] => Some(vec![a[0], a[1] + b[1]]),
                _ => None,
            }
        }
        Primitive::BroadcastAdd => {
            let (a, b) = (shapes[0], shapes[1]);
            if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
                Some(a.to_vec())
            } else {
                None
            }
        }
    }
}

fn concat_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize) {
    if a.len() == 1 {
        (1, a[0], b[0])
    } else {
        (a[0], a[1], b[1])
    }
}

fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += aik * brow[j];
            }
        }
    }
}

/// Central-difference gradient of `f` at `x`. Deliberately independent of the
/// tape machinery above; used as the oracle that `backward` is checked against.
pub fn finite_difference_grad<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}
