//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every node holds a dense matrix. Batched evaluations put one sample per
//! column, so a whole minibatch shares a single graph. Nodes are only ever
//! appended, which keeps the list in topological order; `backward` walks it
//! once in reverse.

use super::matrix::{matmul_into, Mat};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("backward root must be 1x1, got {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("{op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

pub type AdResult<T> = Result<T, AdError>;

/// Primitive operation recorded on the tape.
#[derive(Debug, Clone)]
pub enum Op {
    /// Input or parameter. Only variables propagate gradients.
    Leaf { variable: bool },
    /// Element-wise with broadcasting of the right operand
    /// (same shape, `r×1` column, `1×c` row, or `1×1`).
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Square(NodeId),
    Cube(NodeId),
    Tanh(NodeId),
    Elu(NodeId),
    /// Derivative of ELU (α = 1): `1` for `x > 0`, `eˣ` otherwise.
    EluDeriv(NodeId),
    Recip(NodeId),
    Ln(NodeId),
    Sum(NodeId),
    /// Column sums, `r×c → 1×c`.
    SumRows(NodeId),
    SqNorm(NodeId),
    Reshape(NodeId),
    RowSlice { src: NodeId, start: usize },
    VStack(Vec<NodeId>),
    /// Per-column product of a flattened `n×n` matrix (stored row-major
    /// down the column, `n²×B`) with a vector `n×B`.
    BatchMatVec { mat: NodeId, vec: NodeId, n: usize, transpose: bool },
    /// Per-column transpose of flattened `n×n` matrices.
    BatchTranspose { src: NodeId, n: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Square(..) => "square",
            Op::Cube(..) => "cube",
            Op::Tanh(..) => "tanh",
            Op::Elu(..) => "elu",
            Op::EluDeriv(..) => "elu_deriv",
            Op::Recip(..) => "recip",
            Op::Ln(..) => "ln",
            Op::Sum(..) => "sum",
            Op::SumRows(..) => "sum_rows",
            Op::SqNorm(..) => "sq_norm",
            Op::Reshape(..) => "reshape",
            Op::RowSlice { .. } => "row_slice",
            Op::VStack(..) => "vstack",
            Op::BatchMatVec { .. } => "batch_matvec",
            Op::BatchTranspose { .. } => "batch_transpose",
        }
    }
}

struct Node {
    op: Op,
    value: Mat,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Broadcast {
    Same,
    Column,
    Row,
    Scalar,
}

fn broadcast_kind(op: &'static str, a: &Mat, b: &Mat) -> AdResult<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.rows == 1 && b.cols == 1 {
        Ok(Broadcast::Scalar)
    } else if b.cols == 1 && b.rows == a.rows {
        Ok(Broadcast::Column)
    } else if b.rows == 1 && b.cols == a.cols {
        Ok(Broadcast::Row)
    } else {
        Err(AdError::Shape { op, lhs: a.shape(), rhs: b.shape() })
    }
}

#[inline]
fn bcast_index(kind: Broadcast, cols: usize, r: usize, c: usize) -> usize {
    match kind {
        Broadcast::Same => r * cols + c,
        Broadcast::Column => r,
        Broadcast::Row => c,
        Broadcast::Scalar => 0,
    }
}

fn elementwise(a: &Mat, b: &Mat, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Mat {
    if kind == Broadcast::Same {
        return a.zip_map(b, f);
    }
    let mut out = Mat::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        for c in 0..a.cols {
            let i = r * a.cols + c;
            out.data[i] = f(a.data[i], b.data[bcast_index(kind, a.cols, r, c)]);
        }
    }
    out
}

/// Sums `full` (shape of the broadcast result) down to the shape of `b`.
fn reduce_to(kind: Broadcast, full: Mat, b_shape: (usize, usize)) -> Mat {
    if kind == Broadcast::Same {
        return full;
    }
    let mut out = Mat::zeros(b_shape.0, b_shape.1);
    for r in 0..full.rows {
        for c in 0..full.cols {
            out.data[bcast_index(kind, full.cols, r, c)] += full.data[r * full.cols + c];
        }
    }
    out
}

#[inline]
fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_deriv(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].value.shape()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.data[0]
    }

    fn push(&mut self, op: Op, value: Mat, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_of(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn var(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf { variable: true }, value, true)
    }

    /// Leaf treated as data.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf { variable: false }, value, false)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        make: fn(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> AdResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = broadcast_kind(name, va, vb)?;
        let value = elementwise(va, vb, kind, f);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(make(a, b), value, g))
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let value = self.value(a).map(f);
        let g = self.grad_of(&[a]);
        self.push(op, value, g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.binary(a, b, "add", Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.binary(a, b, "sub", Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.binary(a, b, "mul", Op::Mul, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.unary(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, Op::Offset(a, c), |x| x + c)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn cube(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Cube(a), |x| x * x * x)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Elu(a), elu)
    }

    pub fn elu_deriv(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::EluDeriv(a), elu_deriv)
    }

    pub fn recip(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Recip(a), |x| 1.0 / x)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols != vb.rows {
            return Err(AdError::Shape { op: "matmul", lhs: va.shape(), rhs: vb.shape() });
        }
        let value = va.matmul(vb);
        let g = self.grad_of(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    /// Matrix-vector product; `v` must be a single column.
    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> AdResult<NodeId> {
        let (vm, vv) = (self.value(m), self.value(v));
        if vv.cols != 1 || vm.cols != vv.rows {
            return Err(AdError::Shape { op: "matvec", lhs: vm.shape(), rhs: vv.shape() });
        }
        self.matmul(m, v)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        let g = self.grad_of(&[a]);
        self.push(Op::Transpose(a), value, g)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Mat::scalar(self.value(a).sum());
        let g = self.grad_of(&[a]);
        self.push(Op::Sum(a), value, g)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let mut value = Mat::zeros(1, va.cols);
        for r in 0..va.rows {
            for (o, x) in value.data.iter_mut().zip(va.row_slice(r)) {
                *o += x;
            }
        }
        let g = self.grad_of(&[a]);
        self.push(Op::SumRows(a), value, g)
    }

    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let value = Mat::scalar(self.value(a).data.iter().map(|x| x * x).sum());
        let g = self.grad_of(&[a]);
        self.push(Op::SqNorm(a), value, g)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> AdResult<NodeId> {
        let va = self.value(a);
        if va.len() != rows * cols {
            return Err(AdError::Shape { op: "reshape", lhs: va.shape(), rhs: (rows, cols) });
        }
        let value = Mat::from_vec(rows, cols, va.data.clone());
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::Reshape(a), value, g))
    }

    pub fn row_slice(&mut self, a: NodeId, start: usize, len: usize) -> AdResult<NodeId> {
        let va = self.value(a);
        if start + len > va.rows || len == 0 {
            return Err(AdError::Shape { op: "row_slice", lhs: va.shape(), rhs: (start, len) });
        }
        let value = va.rows_range(start, len);
        let g = self.grad_of(&[a]);
        Ok(self.push(Op::RowSlice { src: a, start }, value, g))
    }

    pub fn vstack(&mut self, parts: &[NodeId]) -> AdResult<NodeId> {
        let Some(&first) = parts.first() else {
            return Err(AdError::Invalid { op: "vstack", detail: "no operands".into() });
        };
        let cols = self.value(first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols != cols {
                return Err(AdError::Shape { op: "vstack", lhs: self.shape(first), rhs: v.shape() });
            }
            data.extend_from_slice(&v.data);
            rows += v.rows;
        }
        let g = self.grad_of(parts);
        Ok(self.push(Op::VStack(parts.to_vec()), Mat::from_vec(rows, cols, data), g))
    }

    pub fn batch_matvec(&mut self, mat: NodeId, vec: NodeId, n: usize, transpose: bool) -> AdResult<NodeId> {
        let (vm, vv) = (self.value(mat), self.value(vec));
        if vm.rows != n * n || vv.rows != n || vm.cols != vv.cols {
            return Err(AdError::Shape { op: "batch_matvec", lhs: vm.shape(), rhs: vv.shape() });
        }
        let b = vv.cols;
        let mut value = Mat::zeros(n, b);
        for r in 0..n {
            for c in 0..n {
                let mrow = if transpose { c * n + r } else { r * n + c };
                let m = &vm.data[mrow * b..(mrow + 1) * b];
                let v = &vv.data[c * b..(c + 1) * b];
                let out = &mut value.data[r * b..(r + 1) * b];
                for k in 0..b {
                    out[k] += m[k] * v[k];
                }
            }
        }
        let g = self.grad_of(&[mat, vec]);
        Ok(self.push(Op::BatchMatVec { mat, vec, n, transpose }, value, g))
    }

    pub fn batch_transpose(&mut self, src: NodeId, n: usize) -> AdResult<NodeId> {
        let vs = self.value(src);
        if vs.rows != n * n {
            return Err(AdError::Shape { op: "batch_transpose", lhs: vs.shape(), rhs: (n * n, vs.cols) });
        }
        let b = vs.cols;
        let mut value = Mat::zeros(n * n, b);
        for r in 0..n {
            for c in 0..n {
                let (dst, s) = (r * n + c, c * n + r);
                value.data[dst * b..(dst + 1) * b].copy_from_slice(&vs.data[s * b..(s + 1) * b]);
            }
        }
        let g = self.grad_of(&[src]);
        Ok(self.push(Op::BatchTranspose { src, n }, value, g))
    }

    /// Reverse sweep from a `1×1` root.
    pub fn backward(&self, root: NodeId) -> AdResult<Gradients> {
        let root_shape = self.shape(root);
        if root_shape != (1, 1) {
            return Err(AdError::NonScalarRoot(root_shape));
        }
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::scalar(1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut adj);
            adj[i] = Some(g);
        }
        Ok(Gradients { adjoints: adj })
    }

    fn propagate(&self, node: &Node, g: &Mat, adj: &mut [Option<Mat>]) {
        let mut send = |id: NodeId, contrib: Mat| {
            if !self.nodes[id.0].needs_grad {
                return;
            }
            match &mut adj[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let kind = broadcast_kind("add", val(*a), val(*b)).expect("checked in forward");
                send(*a, g.clone());
                let gb = if sign < 0.0 { g.map(|x| -x) } else { g.clone() };
                send(*b, reduce_to(kind, gb, val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let kind = broadcast_kind("mul", va, vb).expect("checked in forward");
                if self.nodes[a.0].needs_grad {
                    send(*a, elementwise(g, vb, kind, |x, y| x * y));
                }
                if self.nodes[b.0].needs_grad {
                    send(*b, reduce_to(kind, g.zip_map(va, |x, y| x * y), vb.shape()));
                }
            }
            Op::Scale(a, s) => send(*a, g.map(|x| s * x)),
            Op::Offset(a, _) | Op::Reshape(a) => {
                let shape = val(*a).shape();
                send(*a, Mat::from_vec(shape.0, shape.1, g.data.clone()));
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.nodes[a.0].needs_grad {
                    // dA = G · Bᵀ
                    let mut ga = Mat::zeros(va.rows, va.cols);
                    for i in 0..va.rows {
                        for p in 0..va.cols {
                            let grow = g.row_slice(i);
                            let brow = vb.row_slice(p);
                            ga.data[i * va.cols + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].needs_grad {
                    // dB = Aᵀ · G
                    let mut gb = Mat::zeros(vb.rows, vb.cols);
                    let at = va.transpose();
                    matmul_into(&mut gb.data, &at.data, &g.data, va.cols, va.rows, g.cols);
                    send(*b, gb);
                }
            }
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Square(a) => send(*a, g.zip_map(val(*a), |gi, x| 2.0 * x * gi)),
            Op::Cube(a) => send(*a, g.zip_map(val(*a), |gi, x| 3.0 * x * x * gi)),
            Op::Tanh(a) => send(*a, g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))),
            Op::Elu(a) => send(*a, g.zip_map(val(*a), |gi, x| gi * elu_deriv(x))),
            Op::EluDeriv(a) => {
                send(*a, g.zip_map(val(*a), |gi, x| if x > 0.0 { 0.0 } else { gi * x.exp() }))
            }
            Op::Recip(a) => send(*a, g.zip_map(&node.value, |gi, y| -gi * y * y)),
            Op::Ln(a) => send(*a, g.zip_map(val(*a), |gi, x| gi / x)),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Mat::filled(r, c, g.data[0]));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                send(*a, Mat::from_fn(r, c, |_, j| g.data[j]));
            }
            Op::SqNorm(a) => send(*a, val(*a).map(|x| 2.0 * x * g.data[0])),
            Op::RowSlice { src, start } => {
                let vs = val(*src);
                let mut full = Mat::zeros(vs.rows, vs.cols);
                full.data[start * vs.cols..start * vs.cols + g.len()].copy_from_slice(&g.data);
                send(*src, full);
            }
            Op::VStack(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (r, c) = val(*p).shape();
                    send(*p, Mat::from_vec(r, c, g.data[offset..offset + r * c].to_vec()));
                    offset += r * c;
                }
            }
            Op::BatchMatVec { mat, vec, n, transpose } => {
                let (n, b) = (*n, g.cols);
                let (vm, vv) = (val(*mat), val(*vec));
                let want_m = self.nodes[mat.0].needs_grad;
                let want_v = self.nodes[vec.0].needs_grad;
                let mut gm = Mat::zeros(vm.rows, vm.cols);
                let mut gv = Mat::zeros(vv.rows, vv.cols);
                for r in 0..n {
                    let grow = &g.data[r * b..(r + 1) * b];
                    for c in 0..n {
                        let mrow = if *transpose { c * n + r } else { r * n + c };
                        if want_m {
                            let v = &vv.data[c * b..(c + 1) * b];
                            let dst = &mut gm.data[mrow * b..(mrow + 1) * b];
                            for k in 0..b {
                                dst[k] += grow[k] * v[k];
                            }
                        }
                        if want_v {
                            let m = &vm.data[mrow * b..(mrow + 1) * b];
                            let dst = &mut gv.data[c * b..(c + 1) * b];
                            for k in 0..b {
                                dst[k] += grow[k] * m[k];
                            }
                        }
                    }
                }
                if want_m {
                    send(*mat, gm);
                }
                if want_v {
                    send(*vec, gv);
                }
            }
            Op::BatchTranspose { src, n } => {
                let (n, b) = (*n, g.cols);
                let mut gs = Mat::zeros(n * n, b);
                for r in 0..n {
                    for c in 0..n {
                        let (dst, s) = (c * n + r, r * n + c);
                        gs.data[dst * b..(dst + 1) * b].copy_from_slice(&g.data[s * b..(s + 1) * b]);
                    }
                }
                send(*src, gs);
            }
        }
    }
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient with respect to `id`, or `None` when the root does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Mat> {
        self.adjoints.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `id`, zero-filled when unreachable.
    pub fn wrt(&self, tape: &Tape, id: NodeId) -> Mat {
        match self.get(id) {
            Some(m) => m.clone(),
            None => {
                let (r, c) = tape.shape(id);
                Mat::zeros(r, c)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
    }

    #[test]
    fn primitive_values() {
        let mut t = Tape::new();
        let z = t.constant(Mat::scalar(0.0));
        let th = t.tanh(z);
        assert_eq!(t.scalar(th), 0.0);

        let m1 = t.constant(Mat::scalar(-1.0));
        let e = t.elu(m1);
        // e^-1 - 1
        assert!(close(t.scalar(e), -0.632_120_558_828_557_7, 1e-15));

        let eye = t.constant(Mat::identity(2));
        let v = t.constant(Mat::col(&[3.0, 4.0]));
        let mv = t.matvec(eye, v).unwrap();
        assert_eq!(t.value(mv).data, vec![3.0, 4.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(Mat::zeros(2, 3));
        let b = t.constant(Mat::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(err, AdError::Shape { op: "matmul", lhs: (2, 3), rhs: (2, 3) });
        let c = t.constant(Mat::zeros(3, 2));
        assert!(matches!(t.add(a, c), Err(AdError::Shape { op: "add", .. })));
    }

    #[test]
    fn square_and_tanh_derivatives() {
        let mut t = Tape::new();
        let x = t.var(Mat::scalar(3.0));
        let y = t.square(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).data[0], 6.0);

        let mut t = Tape::new();
        let x = t.var(Mat::scalar(0.0));
        let y = t.tanh(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, x).data[0], 1.0);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.var(Mat::col(&[1.0, 2.0]));
        let y = t.square(x);
        assert_eq!(t.backward(y).unwrap_err(), AdError::NonScalarRoot((2, 1)));
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut t = Tape::new();
        let x = t.var(Mat::scalar(2.0));
        let unused = t.var(Mat::col(&[1.0, 1.0]));
        let y = t.cube(x);
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(&t, unused).data, vec![0.0, 0.0]);
        assert_eq!(g.wrt(&t, x).data[0], 12.0);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = x·x + 3x, with x feeding three consumers.
        let mut t = Tape::new();
        let x = t.var(Mat::scalar(1.5));
        let xx = t.mul(x, x).unwrap();
        let x3 = t.scale(x, 3.0);
        let f = t.add(xx, x3).unwrap();
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(&t, x).data[0], 2.0 * 1.5 + 3.0);
    }

    #[test]
    fn broadcast_reductions() {
        let mut t = Tape::new();
        let a = t.var(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let col = t.var(Mat::col(&[10.0, 20.0]));
        let row = t.var(Mat::row(&[0.5, 2.0]));
        let s = t.add(a, col).unwrap();
        let p = t.mul(s, row).unwrap();
        let f = t.sum(p);
        let g = t.backward(f).unwrap();
        assert_eq!(g.wrt(&t, col).data, vec![2.5, 2.5]);
        assert_eq!(g.wrt(&t, row).data, vec![11.0 + 23.0, 12.0 + 24.0]);
        assert_eq!(g.wrt(&t, a).data, vec![0.5, 2.0, 0.5, 2.0]);
    }

    #[test]
    fn batch_matvec_matches_dense() {
        let mut t = Tape::new();
        let m = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let flat = t.constant(Mat::col(&m.data));
        let v = t.constant(Mat::col(&[5.0, 6.0]));
        let mv = t.batch_matvec(flat, v, 2, false).unwrap();
        let mtv = t.batch_matvec(flat, v, 2, true).unwrap();
        assert_eq!(t.value(mv).data, m.matvec(&[5.0, 6.0]));
        assert_eq!(t.value(mtv).data, m.transpose().matvec(&[5.0, 6.0]));
        let bt = t.batch_transpose(flat, 2).unwrap();
        assert_eq!(t.value(bt).data, m.transpose().data);
    }
}
