use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
///
/// Handles are plain indices; they are only meaningful for the graph that
/// produced them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Node(usize);

impl Node {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive catalog. Every recorded value is a leaf or the result of one of
/// these applied to earlier nodes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Sigmoid,
    Tanh,
    Relu,
    Log,
    Exp,
    /// Row-wise softmax.
    Softmax,
    /// Sum of all entries, giving a scalar.
    Sum,
    /// Mean of all entries, giving a scalar.
    Mean,
    /// Sum over the axes along which the target shape has extent one.
    SumTo(Shape),
    Broadcast(Shape),
    Scale(f64),
    /// Adds a constant to every entry.
    Offset(f64),
    Clamp { lo: f64, hi: f64 },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Tanh => "tanh",
            Primitive::Relu => "relu",
            Primitive::Log => "log",
            Primitive::Exp => "exp",
            Primitive::Softmax => "softmax",
            Primitive::Sum => "sum",
            Primitive::Mean => "mean",
            Primitive::SumTo(_) => "sum_to",
            Primitive::Broadcast(_) => "broadcast",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Clamp { .. } => "clamp",
        }
    }

    /// Names of every primitive, as reported by [`name`](Self::name).
    pub const NAMES: [&'static str; 19] = [
        "add", "sub", "mul", "div", "matmul", "transpose", "sigmoid", "tanh", "relu", "log", "exp", "softmax", "sum",
        "mean", "sum_to", "broadcast", "scale", "offset", "clamp",
    ];

    /// The interned name matching `name`, if it is a primitive.
    pub fn static_name(name: &str) -> Option<&'static str> {
        Self::NAMES.iter().copied().find(|n| *n == name)
    }

    pub fn arity(&self) -> usize {
        match self {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::Div | Primitive::MatMul => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Provenance {
    Leaf,
    Op { primitive: Primitive, parents: Vec<Node> },
}

#[derive(Clone, Debug)]
struct Record {
    value: Tensor,
    provenance: Provenance,
    requires_grad: bool,
}

/// A gradient record: an append-only list of applied primitives.
///
/// Nodes are stored in creation order, so every parent precedes its
/// children. [`Graph::grad`] records its own backward pass as primitives in
/// the same list, which is what makes second-order differentiation work:
/// with `build_graph` set the returned adjoints are ordinary nodes and can be
/// differentiated again.
///
/// A graph is owned by one thread; independent graphs can be used in
/// parallel.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    records: Vec<Record>,
    fault: Option<(&'static str, f64)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Debug hook for mutation checks: every adjoint produced by the named
    /// primitive is multiplied by `factor`. Gradient checks must fail while
    /// this is set.
    pub fn corrupt_adjoint(&mut self, primitive: &'static str, factor: f64) {
        self.fault = Some((primitive, factor));
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn push(&mut self, value: Tensor, provenance: Provenance, requires_grad: bool) -> Node {
        self.records.push(Record { value, provenance, requires_grad });
        Node(self.records.len() - 1)
    }

    /// A leaf that gradients can be taken with respect to.
    pub fn param(&mut self, value: Tensor) -> Node {
        self.push(value, Provenance::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Node {
        self.push(value, Provenance::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Node {
        self.constant(Tensor::scalar(v))
    }

    /// A constant copy of `node`'s current value; gradients do not flow
    /// through it.
    pub fn detach(&mut self, node: Node) -> Node {
        let v = self.value(node).clone();
        self.constant(v)
    }

    pub fn value(&self, node: Node) -> &Tensor {
        &self.records[node.0].value
    }

    pub fn shape(&self, node: Node) -> Shape {
        self.records[node.0].value.shape()
    }

    pub fn requires_grad(&self, node: Node) -> bool {
        self.records[node.0].requires_grad
    }

    pub fn primitive(&self, node: Node) -> Option<Primitive> {
        match &self.records[node.0].provenance {
            Provenance::Leaf => None,
            Provenance::Op { primitive, .. } => Some(*primitive),
        }
    }

    pub fn parents(&self, node: Node) -> &[Node] {
        match &self.records[node.0].provenance {
            Provenance::Leaf => &[],
            Provenance::Op { parents, .. } => parents,
        }
    }

    /// Evaluates `primitive` on `inputs` and records the result.
    pub fn apply(&mut self, primitive: Primitive, inputs: &[Node]) -> Result<Node> {
        let op = primitive.name();
        if inputs.len() != primitive.arity() {
            return Err(Error::Arity { op, expected: primitive.arity(), got: inputs.len() });
        }
        let a = &self.records[inputs[0].0].value;
        let value = if primitive.arity() == 2 {
            let b = &self.records[inputs[1].0].value;
            eval_binary(primitive, a, b)?
        } else {
            eval_unary(primitive, a)?
        };
        if !value.is_finite() {
            return Err(Error::NonFinite { op });
        }
        let requires_grad = inputs.iter().any(|n| self.records[n.0].requires_grad);
        let provenance = Provenance::Op { primitive, parents: inputs.to_vec() };
        Ok(self.push(value, provenance, requires_grad))
    }

    pub fn add(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn matmul(&mut self, a: Node, b: Node) -> Result<Node> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn sigmoid(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn tanh(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn relu(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Relu, &[a])
    }

    pub fn log(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Log, &[a])
    }

    pub fn exp(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Exp, &[a])
    }

    pub fn softmax(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Softmax, &[a])
    }

    pub fn sum(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn mean(&mut self, a: Node) -> Result<Node> {
        self.apply(Primitive::Mean, &[a])
    }

    pub fn sum_to(&mut self, a: Node, shape: Shape) -> Result<Node> {
        self.apply(Primitive::SumTo(shape), &[a])
    }

    /// Row sums as a column vector.
    pub fn sum_rows(&mut self, a: Node) -> Result<Node> {
        let rows = self.shape(a).rows;
        self.sum_to(a, Shape::new(rows, 1))
    }

    pub fn broadcast(&mut self, a: Node, shape: Shape) -> Result<Node> {
        self.apply(Primitive::Broadcast(shape), &[a])
    }

    pub fn scale(&mut self, a: Node, c: f64) -> Result<Node> {
        self.apply(Primitive::Scale(c), &[a])
    }

    pub fn offset(&mut self, a: Node, c: f64) -> Result<Node> {
        self.apply(Primitive::Offset(c), &[a])
    }

    pub fn clamp(&mut self, a: Node, lo: f64, hi: f64) -> Result<Node> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Node) -> Result<Node> {
        let neg = self.scale(a, -1.0)?;
        self.offset(neg, 1.0)
    }

    /// `x + b` with `b` broadcast to `x`'s shape.
    pub fn add_broadcast(&mut self, x: Node, b: Node) -> Result<Node> {
        let shape = self.shape(x);
        let bb = if self.shape(b) == shape { b } else { self.broadcast(b, shape)? };
        self.add(x, bb)
    }

    /// `x * b` with `b` broadcast to `x`'s shape.
    pub fn mul_broadcast(&mut self, x: Node, b: Node) -> Result<Node> {
        let shape = self.shape(x);
        let bb = if self.shape(b) == shape { b } else { self.broadcast(b, shape)? };
        self.mul(x, bb)
    }

    /// Reverse-mode derivatives of the scalar `output` with respect to each
    /// node in `wrt`.
    ///
    /// With `build_graph` the backward pass stays recorded and the returned
    /// nodes depend differentiably on the forward values; otherwise the
    /// backward records are dropped and the results are constants. A `wrt`
    /// node that `output` does not depend on gets an all-zero gradient.
    pub fn grad(&mut self, output: Node, wrt: &[Node], build_graph: bool) -> Result<Vec<Node>> {
        let out_shape = self.shape(output);
        if !out_shape.is_scalar() {
            return Err(Error::NotScalar { shape: out_shape });
        }
        if let Some(w) = wrt.iter().find(|w| !self.requires_grad(**w)) {
            return Err(Error::NoGradient { node: w.0 });
        }

        let end = output.0 + 1;
        let mut relevant = vec![false; end];
        for w in wrt {
            if w.0 < end {
                relevant[w.0] = true;
            }
        }
        for i in 0..end {
            if !relevant[i] && self.records[i].requires_grad {
                relevant[i] = self.parents(Node(i)).iter().any(|p| relevant[p.0]);
            }
        }

        let mark = self.records.len();
        let mut adjoint: Vec<Option<Node>> = vec![None; end];
        if relevant[output.0] {
            adjoint[output.0] = Some(self.scalar(1.0));
        }
        for i in (0..end).rev() {
            let Some(dy) = adjoint[i] else { continue };
            let (primitive, parents) = match &self.records[i].provenance {
                Provenance::Leaf => continue,
                Provenance::Op { primitive, parents } => (*primitive, parents.clone()),
            };
            let wanted: Vec<bool> = parents.iter().map(|p| relevant[p.0]).collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let contributions = self.backward_rule(primitive, Node(i), &parents, dy, &wanted)?;
            for ((p, c), w) in parents.iter().zip(contributions).zip(wanted) {
                if !w {
                    continue;
                }
                let c = c.expect("adjoint rule produced no contribution for a wanted parent");
                adjoint[p.0] = Some(match adjoint[p.0] {
                    None => c,
                    Some(prev) => self.add(prev, c)?,
                });
            }
        }

        let mut results = Vec::with_capacity(wrt.len());
        for w in wrt {
            let found = if w.0 < end { adjoint[w.0] } else { None };
            results.push(found);
        }
        if build_graph {
            Ok(results
                .into_iter()
                .zip(wrt)
                .map(|(r, w)| match r {
                    Some(n) => n,
                    None => {
                        let shape = self.shape(*w);
                        self.constant(Tensor::zeros(shape))
                    }
                })
                .collect())
        } else {
            let values: Vec<Tensor> = results
                .iter()
                .zip(wrt)
                .map(|(r, w)| match r {
                    Some(n) => self.value(*n).clone(),
                    None => Tensor::zeros(self.shape(*w)),
                })
                .collect();
            self.records.truncate(mark);
            Ok(values.into_iter().map(|v| self.constant(v)).collect())
        }
    }

    /// Convenience: gradients as plain tensors, backward records discarded.
    pub fn grad_values(&mut self, output: Node, wrt: &[Node]) -> Result<Vec<Tensor>> {
        let mark = self.records.len();
        let nodes = self.grad(output, wrt, false)?;
        let values = nodes.iter().map(|n| self.value(*n).clone()).collect();
        self.records.truncate(mark);
        Ok(values)
    }

    /// Vector-Jacobian product of one primitive, expressed in primitives so
    /// that it is itself differentiable.
    fn backward_rule(
        &mut self,
        primitive: Primitive,
        out: Node,
        parents: &[Node],
        dy: Node,
        wanted: &[bool],
    ) -> Result<Vec<Option<Node>>> {
        let a = parents[0];
        let mut grads: Vec<Option<Node>> = match primitive {
            Primitive::Add => vec![Some(dy), Some(dy)],
            Primitive::Sub => {
                let neg = if wanted[1] { Some(self.scale(dy, -1.0)?) } else { None };
                vec![Some(dy), neg]
            }
            Primitive::Mul => {
                let b = parents[1];
                let da = if wanted[0] { Some(self.mul(dy, b)?) } else { None };
                let db = if wanted[1] { Some(self.mul(dy, a)?) } else { None };
                vec![da, db]
            }
            Primitive::Div => {
                let b = parents[1];
                let da = if wanted[0] { Some(self.div(dy, b)?) } else { None };
                let db = if wanted[1] {
                    // d(a/b)/db = -(a/b)/b
                    let t = self.mul(dy, out)?;
                    let t = self.div(t, b)?;
                    Some(self.scale(t, -1.0)?)
                } else {
                    None
                };
                vec![da, db]
            }
            Primitive::MatMul => {
                let b = parents[1];
                let da = if wanted[0] {
                    let bt = self.transpose(b)?;
                    Some(self.matmul(dy, bt)?)
                } else {
                    None
                };
                let db = if wanted[1] {
                    let at = self.transpose(a)?;
                    Some(self.matmul(at, dy)?)
                } else {
                    None
                };
                vec![da, db]
            }
            Primitive::Transpose => vec![Some(self.transpose(dy)?)],
            Primitive::Sigmoid => {
                let one_minus = self.one_minus(out)?;
                let local = self.mul(out, one_minus)?;
                vec![Some(self.mul(dy, local)?)]
            }
            Primitive::Tanh => {
                let sq = self.mul(out, out)?;
                let local = self.one_minus(sq)?;
                vec![Some(self.mul(dy, local)?)]
            }
            Primitive::Relu => {
                let mask = self.value(a).map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![Some(self.mul(dy, mask)?)]
            }
            Primitive::Clamp { lo, hi } => {
                let mask = self.value(a).map(|v| if v >= lo && v <= hi { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                vec![Some(self.mul(dy, mask)?)]
            }
            Primitive::Log => vec![Some(self.div(dy, a)?)],
            Primitive::Exp => vec![Some(self.mul(dy, out)?)],
            Primitive::Softmax => {
                // y * (dy - rowsum(dy * y))
                let shape = self.shape(out);
                let dyy = self.mul(dy, out)?;
                let rs = self.sum_rows(dyy)?;
                let rs = self.broadcast(rs, shape)?;
                let centered = self.sub(dy, rs)?;
                vec![Some(self.mul(out, centered)?)]
            }
            Primitive::Sum => {
                let shape = self.shape(a);
                vec![Some(self.broadcast(dy, shape)?)]
            }
            Primitive::Mean => {
                let shape = self.shape(a);
                let scaled = self.scale(dy, 1.0 / shape.len() as f64)?;
                vec![Some(self.broadcast(scaled, shape)?)]
            }
            Primitive::SumTo(_) => {
                let shape = self.shape(a);
                vec![Some(self.broadcast(dy, shape)?)]
            }
            Primitive::Broadcast(_) => {
                let shape = self.shape(a);
                vec![Some(self.sum_to(dy, shape)?)]
            }
            Primitive::Scale(c) => vec![Some(self.scale(dy, c)?)],
            Primitive::Offset(_) => vec![Some(dy)],
        };
        if let Some((name, factor)) = self.fault {
            if name == primitive.name() {
                for g in grads.iter_mut().flatten() {
                    *g = self.scale(*g, factor)?;
                }
            }
        }
        Ok(grads)
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape { op, lhs: a.shape(), rhs: b.shape() });
    }
    Ok(())
}

fn eval_binary(primitive: Primitive, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let op = primitive.name();
    match primitive {
        Primitive::Add => {
            same_shape(op, a, b)?;
            Ok(a.zip_map(b, |x, y| x + y))
        }
        Primitive::Sub => {
            same_shape(op, a, b)?;
            Ok(a.zip_map(b, |x, y| x - y))
        }
        Primitive::Mul => {
            same_shape(op, a, b)?;
            Ok(a.zip_map(b, |x, y| x * y))
        }
        Primitive::Div => {
            same_shape(op, a, b)?;
            if b.data().iter().any(|&v| v == 0.0) {
                return Err(Error::Domain { op, detail: "division by zero".into() });
            }
            Ok(a.zip_map(b, |x, y| x / y))
        }
        Primitive::MatMul => {
            if a.cols() != b.rows() {
                return Err(Error::Shape { op, lhs: a.shape(), rhs: b.shape() });
            }
            Ok(a.matmul(b))
        }
        _ => unreachable!("{op} is not binary"),
    }
}

fn eval_unary(primitive: Primitive, a: &Tensor) -> Result<Tensor> {
    let op = primitive.name();
    Ok(match primitive {
        Primitive::Transpose => a.transpose(),
        Primitive::Sigmoid => a.map(sigmoid),
        Primitive::Tanh => a.map(f64::tanh),
        Primitive::Relu => a.map(|v| v.max(0.0)),
        Primitive::Log => {
            if let Some(v) = a.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                return Err(Error::Domain { op, detail: format!("log of non-positive value {v}") });
            }
            a.map(f64::ln)
        }
        Primitive::Exp => a.map(f64::exp),
        Primitive::Softmax => a.softmax_rows(),
        Primitive::Sum => Tensor::scalar(a.sum()),
        Primitive::Mean => {
            if a.is_empty() {
                return Err(Error::Domain { op, detail: "mean of empty array".into() });
            }
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        Primitive::SumTo(target) => {
            if !target.broadcasts_to(a.shape()) {
                return Err(Error::Shape { op, lhs: a.shape(), rhs: target });
            }
            a.sum_to(target)
        }
        Primitive::Broadcast(target) => {
            if !a.shape().broadcasts_to(target) {
                return Err(Error::Shape { op, lhs: a.shape(), rhs: target });
            }
            a.broadcast_to(target)
        }
        Primitive::Scale(c) => a.map(|v| c * v),
        Primitive::Offset(c) => a.map(|v| v + c),
        Primitive::Clamp { lo, hi } => a.map(|v| v.clamp(lo, hi)),
        _ => unreachable!("{op} is not unary"),
    })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
