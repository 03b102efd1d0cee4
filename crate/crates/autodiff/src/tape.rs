//! Wengert-list tape: every operation appends a node holding its value and
//! enough bookkeeping to replay the chain rule in reverse.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::conv::{self, ConvGeom};
use crate::tensor::{gemm, Tensor};

/// Elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Sqrt,
    Square,
    Relu,
    Silu,
    Tanh,
    Sigmoid,
    Softplus,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else {
        x.exp().ln_1p()
    }
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Square => x * x,
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => softplus(x),
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Neg => -1.0,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Tanh => 1.0 - y * y,
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
        }
    }
}

/// A user-defined differentiable operation with a hand-written backward.
pub trait CustomOp {
    fn name(&self) -> &str;

    /// Gradients with respect to each input; `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_output: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Affine { x: usize, scale: f64 },
    Unary { x: usize, kind: Unary },
    AddRowBroadcast { x: usize, b: usize },
    MatMul { a: usize, b: usize, trans_b: bool },
    Sum(usize),
    SumRows(usize),
    CenterRows(usize),
    NormRows(usize),
    NormalizeRows(usize),
    LogSumExpRows { x: usize, mask: Option<Rc<[bool]>> },
    Gather { x: usize, idx: Rc<[usize]> },
    WeightedSum { x: usize, w: Rc<[f64]> },
    Reshape(usize),
    SelectRows { x: usize, rows: Rc<[usize]> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Custom { inputs: Vec<usize>, op: Rc<dyn CustomOp> },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the differentiated scalar with respect to `v`, if it was reached.
    pub fn get(&self, v: Var<'_>) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when `v` did not influence the output.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = self.shapes[v.id].clone();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Leaf that gradients flow into.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let first = parts[0].value();
        let inner = first.shape()[1..].to_vec();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = p.value();
            assert_eq!(&v.shape()[1..], &inner[..], "concat_rows: trailing shapes differ");
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![rows];
        shape.extend(inner);
        let rg = parts.iter().any(|p| self.needs(p.id));
        self.push(
            Tensor::new(shape, data),
            Op::ConcatRows(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let n = parts[0].value().rows();
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        for v in &values {
            assert_eq!(v.shape().len(), 2, "concat_cols expects matrices");
            assert_eq!(v.rows(), n, "concat_cols: row counts differ");
        }
        let total: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for v in &values {
                data.extend_from_slice(v.row(i));
            }
        }
        let rg = parts.iter().any(|p| self.needs(p.id));
        self.push(
            Tensor::matrix(n, total, data),
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rg,
        )
    }

    /// Appends the result of a custom operation whose forward value was computed by the caller.
    pub fn custom<'t>(&'t self, op: Rc<dyn CustomOp>, inputs: &[Var<'t>], output: Tensor) -> Var<'t> {
        let rg = inputs.iter().any(|v| self.needs(v.id));
        self.push(
            output,
            Op::Custom {
                inputs: inputs.iter().map(|v| v.id).collect(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[output.id].value.numel(),
            1,
            "backward needs a scalar output"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients {
            grads,
            shapes: nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, f: impl FnOnce(&mut [f64])) {
    if !nodes[id].requires_grad {
        return;
    }
    let slot = grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]);
    f(slot);
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| add_into(d, g));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, |d| add_into(d, g));
            accumulate(grads, nodes, *b, |d| {
                for (d, s) in d.iter_mut().zip(g) {
                    *d -= s;
                }
            });
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            accumulate(grads, nodes, *a, |d| {
                for ((d, s), y) in d.iter_mut().zip(g).zip(vb.data()) {
                    *d += s * y;
                }
            });
            accumulate(grads, nodes, *b, |d| {
                for ((d, s), x) in d.iter_mut().zip(g).zip(va.data()) {
                    *d += s * x;
                }
            });
        }
        Op::Affine { x, scale } => {
            accumulate(grads, nodes, *x, |d| {
                for (d, s) in d.iter_mut().zip(g) {
                    *d += s * scale;
                }
            });
        }
        Op::Unary { x, kind } => {
            let vx = nodes[*x].value.clone();
            accumulate(grads, nodes, *x, |d| {
                for (((d, s), xi), yi) in d.iter_mut().zip(g).zip(vx.data()).zip(out.data()) {
                    *d += s * kind.derivative(*xi, *yi);
                }
            });
        }
        Op::AddRowBroadcast { x, b } => {
            accumulate(grads, nodes, *x, |d| add_into(d, g));
            let m = nodes[*b].value.numel();
            accumulate(grads, nodes, *b, |d| {
                for row in g.chunks(m) {
                    add_into(d, row);
                }
            });
        }
        Op::MatMul { a, b, trans_b } => {
            let (va, vb) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            let (n, k) = (va.shape()[0], va.shape()[1]);
            let m = out.shape()[1];
            accumulate(grads, nodes, *a, |d| {
                // dA = dC * op(B)^T
                gemm(n, m, k, g, false, vb.data(), !*trans_b, d, 1.0);
            });
            accumulate(grads, nodes, *b, |d| {
                if *trans_b {
                    // B is [m, k]: dB = dC^T * A
                    gemm(m, n, k, g, true, va.data(), false, d, 1.0);
                } else {
                    // B is [k, m]: dB = A^T * dC
                    gemm(k, n, m, va.data(), true, g, false, d, 1.0);
                }
            });
        }
        Op::Sum(x) => {
            let s = g[0];
            accumulate(grads, nodes, *x, |d| d.iter_mut().for_each(|v| *v += s));
        }
        Op::SumRows(x) => {
            let w = nodes[*x].value.row_len();
            accumulate(grads, nodes, *x, |d| {
                for (row, s) in d.chunks_mut(w).zip(g) {
                    row.iter_mut().for_each(|v| *v += s);
                }
            });
        }
        Op::CenterRows(x) => {
            let w = nodes[*x].value.row_len();
            accumulate(grads, nodes, *x, |d| {
                for (row, gr) in d.chunks_mut(w).zip(g.chunks(w)) {
                    let mean = gr.iter().sum::<f64>() / w as f64;
                    for (v, gi) in row.iter_mut().zip(gr) {
                        *v += gi - mean;
                    }
                }
            });
        }
        Op::NormRows(x) => {
            let vx = nodes[*x].value.clone();
            let w = vx.row_len();
            accumulate(grads, nodes, *x, |d| {
                for (i, (row, s)) in d.chunks_mut(w).zip(g).enumerate() {
                    let norm = out.data()[i];
                    if norm > 0.0 {
                        for (dv, xv) in row.iter_mut().zip(vx.row(i)) {
                            *dv += s * xv / norm;
                        }
                    }
                }
            });
        }
        Op::NormalizeRows(x) => {
            let vx = nodes[*x].value.clone();
            let w = vx.row_len();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..vx.rows() {
                    let norm = vx.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        continue;
                    }
                    let y = out.row(i);
                    let gi = &g[i * w..(i + 1) * w];
                    let proj: f64 = y.iter().zip(gi).map(|(a, b)| a * b).sum();
                    for ((dv, gv), yv) in d[i * w..(i + 1) * w].iter_mut().zip(gi).zip(y) {
                        *dv += (gv - yv * proj) / norm;
                    }
                }
            });
        }
        Op::LogSumExpRows { x, mask } => {
            let vx = nodes[*x].value.clone();
            let w = vx.row_len();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..vx.rows() {
                    let lse = out.data()[i];
                    for j in 0..w {
                        let k = i * w + j;
                        if mask.as_ref().is_none_or(|m| m[k]) {
                            d[k] += g[i] * (vx.data()[k] - lse).exp();
                        }
                    }
                }
            });
        }
        Op::Gather { x, idx } => {
            accumulate(grads, nodes, *x, |d| {
                for (s, &k) in g.iter().zip(idx.iter()) {
                    d[k] += s;
                }
            });
        }
        Op::WeightedSum { x, w } => {
            let s = g[0];
            accumulate(grads, nodes, *x, |d| {
                for (dv, wv) in d.iter_mut().zip(w.iter()) {
                    *dv += s * wv;
                }
            });
        }
        Op::Reshape(x) => accumulate(grads, nodes, *x, |d| add_into(d, g)),
        Op::SelectRows { x, rows } => {
            let w = nodes[*x].value.row_len();
            accumulate(grads, nodes, *x, |d| {
                for (k, &r) in rows.iter().enumerate() {
                    add_into(&mut d[r * w..(r + 1) * w], &g[k * w..(k + 1) * w]);
                }
            });
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                accumulate(grads, nodes, p, |d| add_into(d, &g[offset..offset + len]));
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let n = out.rows();
            let total = out.row_len();
            let mut col = 0;
            for &p in parts {
                let m = nodes[p].value.shape()[1];
                accumulate(grads, nodes, p, |d| {
                    for i in 0..n {
                        add_into(&mut d[i * m..(i + 1) * m], &g[i * total + col..i * total + col + m]);
                    }
                });
                col += m;
            }
        }
        Op::SliceCols { x, start } => {
            let vx = nodes[*x].value.clone();
            let (n, m) = (vx.rows(), vx.row_len());
            let len = out.row_len();
            accumulate(grads, nodes, *x, |d| {
                for i in 0..n {
                    add_into(&mut d[i * m + start..i * m + start + len], &g[i * len..(i + 1) * len]);
                }
            });
        }
        Op::Conv2d { x, w, b, geom } => {
            let (vx, vw) = (nodes[*x].value.clone(), nodes[*w].value.clone());
            let need_b = b.is_some_and(|b| nodes[b].requires_grad);
            let (dx, dw, db) = conv::backward(
                geom,
                vx.data(),
                vw.data(),
                g,
                nodes[*x].requires_grad,
                nodes[*w].requires_grad,
                need_b,
            );
            if let Some(dx) = dx {
                accumulate(grads, nodes, *x, |d| add_into(d, &dx));
            }
            if let Some(dw) = dw {
                accumulate(grads, nodes, *w, |d| add_into(d, &dw));
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(grads, nodes, *b, |d| add_into(d, &db));
            }
        }
        Op::Custom { inputs, op } => {
            let values: Vec<Rc<Tensor>> = inputs.iter().map(|&i| nodes[i].value.clone()).collect();
            let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
            let needs: Vec<bool> = inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let results = op.backward(&refs, out, g, &needs);
            assert_eq!(results.len(), inputs.len(), "custom op {} returned wrong arity", op.name());
            for (&i, r) in inputs.iter().zip(results) {
                if let Some(r) = r {
                    accumulate(grads, nodes, i, |d| add_into(d, &r));
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Rc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Value of a single-element variable.
    pub fn item(self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(self) -> bool {
        self.tape.needs(self.id)
    }

    fn rg(self) -> bool {
        self.requires_grad()
    }

    /// Copies the value into a new constant leaf; no gradient flows back.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn binary(self, other: Var<'t>, f: impl Fn(f64, f64) -> f64, op: Op) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "elementwise op on mismatched shapes");
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg() || other.rg();
        self.tape.push(Tensor::new(a.shape().to_vec(), data), op, rg)
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x * y, Op::Mul(self.id, other.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x * c);
        self.tape.push(v, Op::Affine { x: self.id, scale: c }, self.rg())
    }

    /// `x + c` elementwise.
    pub fn offset(self, c: f64) -> Var<'t> {
        let v = self.value().map(|x| x + c);
        self.tape.push(v, Op::Affine { x: self.id, scale: 1.0 }, self.rg())
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let v = self.value().map(|x| kind.apply(x));
        self.tape.push(v, Op::Unary { x: self.id, kind }, self.rg())
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn sqrt(self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn square(self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn silu(self) -> Var<'t> {
        self.unary(Unary::Silu)
    }
    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }
    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    /// `x[n, m] + b[m]` broadcast over rows.
    pub fn add_row_broadcast(self, bias: Var<'t>) -> Var<'t> {
        let (x, b) = (self.value(), bias.value());
        let m = b.numel();
        assert_eq!(x.row_len(), m, "bias length does not match row length");
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(m) {
            add_into(row, b.data());
        }
        let rg = self.rg() || bias.rg();
        self.tape.push(
            Tensor::new(x.shape().to_vec(), data),
            Op::AddRowBroadcast { x: self.id, b: bias.id },
            rg,
        )
    }

    fn matmul_impl(self, other: Var<'t>, trans_b: bool) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be a matrix");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be a matrix");
        let (n, k) = (a.shape()[0], a.shape()[1]);
        let (kb, m) = if trans_b {
            (b.shape()[1], b.shape()[0])
        } else {
            (b.shape()[0], b.shape()[1])
        };
        assert_eq!(k, kb, "matmul inner dimensions differ: {:?} x {:?}", a.shape(), b.shape());
        let mut c = vec![0.0; n * m];
        gemm(n, k, m, a.data(), false, b.data(), trans_b, &mut c, 0.0);
        let rg = self.rg() || other.rg();
        self.tape.push(
            Tensor::matrix(n, m, c),
            Op::MatMul {
                a: self.id,
                b: other.id,
                trans_b,
            },
            rg,
        )
    }

    /// `self[n,k] @ other[k,m]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, false)
    }

    /// `self[n,k] @ other[m,k]^T`.
    pub fn matmul_t(self, other: Var<'t>) -> Var<'t> {
        self.matmul_impl(other, true)
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id), self.rg())
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums each leading-dimension slice, giving shape `[rows]`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value();
        let data = (0..v.rows()).map(|i| v.row(i).iter().sum()).collect();
        self.tape.push(Tensor::vector(data), Op::SumRows(self.id), self.rg())
    }

    /// Subtracts each row's mean from the row.
    pub fn center_rows(self) -> Var<'t> {
        let mut out = (*self.value()).clone();
        let w = out.row_len();
        for row in out.data_mut().chunks_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            row.iter_mut().for_each(|v| *v -= mean);
        }
        self.tape.push(out, Op::CenterRows(self.id), self.rg())
    }

    /// Euclidean norm of each row; the gradient at a zero row is zero.
    pub fn norm_rows(self) -> Var<'t> {
        let v = self.value();
        let data = (0..v.rows())
            .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.tape.push(Tensor::vector(data), Op::NormRows(self.id), self.rg())
    }

    /// Scales each row to unit norm. A zero row maps to the first basis
    /// vector and passes no gradient.
    pub fn normalize_rows(self) -> Var<'t> {
        let v = self.value();
        let mut out = (*v).clone();
        for i in 0..v.rows() {
            let row = out.row_mut(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                row.fill(0.0);
                if let Some(first) = row.first_mut() {
                    *first = 1.0;
                }
            } else {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        self.tape.push(out, Op::NormalizeRows(self.id), self.rg())
    }

    /// Row-wise log-sum-exp over the entries where `mask` is true (all if `None`).
    /// Every row must keep at least one entry.
    pub fn logsumexp_rows(self, mask: Option<Rc<[bool]>>) -> Var<'t> {
        let v = self.value();
        let w = v.row_len();
        if let Some(m) = &mask {
            assert_eq!(m.len(), v.numel(), "mask length mismatch");
        }
        let keep = |k: usize| mask.as_ref().is_none_or(|m| m[k]);
        let mut data = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row(i);
            assert!((0..w).any(|j| keep(i * w + j)), "logsumexp row {i} fully masked");
            if (0..w).any(|j| keep(i * w + j) && row[j].is_nan()) {
                data.push(f64::NAN);
                continue;
            }
            let max = (0..w)
                .filter(|&j| keep(i * w + j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = (0..w)
                .filter(|&j| keep(i * w + j))
                .map(|j| (row[j] - max).exp())
                .sum();
            data.push(max + s.ln());
        }
        self.tape.push(
            Tensor::vector(data),
            Op::LogSumExpRows { x: self.id, mask },
            self.rg(),
        )
    }

    /// Picks flat-indexed entries into a vector.
    pub fn gather(self, idx: Rc<[usize]>) -> Var<'t> {
        let v = self.value();
        let data = idx.iter().map(|&k| v.data()[k]).collect();
        self.tape
            .push(Tensor::vector(data), Op::Gather { x: self.id, idx }, self.rg())
    }

    /// `sum_k w[k] * x[k]` with constant weights.
    pub fn weighted_sum(self, w: Rc<[f64]>) -> Var<'t> {
        let v = self.value();
        assert_eq!(w.len(), v.numel(), "weight length mismatch");
        let s = v.data().iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        self.tape
            .push(Tensor::scalar(s), Op::WeightedSum { x: self.id, w }, self.rg())
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t> {
        let v = (*self.value()).clone().reshape(shape);
        self.tape.push(v, Op::Reshape(self.id), self.rg())
    }

    /// Flattens everything after the leading dimension.
    pub fn flatten(self) -> Var<'t> {
        let v = self.value();
        let shape = [v.rows(), v.row_len()];
        self.reshape(&shape)
    }

    /// Rows picked by index (repeats allowed).
    pub fn select_rows(self, rows: Rc<[usize]>) -> Var<'t> {
        let v = self.value();
        let mut data = Vec::with_capacity(rows.len() * v.row_len());
        for &r in rows.iter() {
            data.extend_from_slice(v.row(r));
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(&v.shape()[1..]);
        self.tape.push(
            Tensor::new(shape, data),
            Op::SelectRows { x: self.id, rows },
            self.rg(),
        )
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape().len(), 2, "slice_cols expects a matrix");
        assert!(start + len <= v.shape()[1], "slice_cols out of range");
        let mut data = Vec::with_capacity(v.rows() * len);
        for i in 0..v.rows() {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        self.tape.push(
            Tensor::matrix(v.rows(), len, data),
            Op::SliceCols { x: self.id, start },
            self.rg(),
        )
    }

    /// 2-D convolution of `[B, C, H, W]` with weights `[O, C, kh, kw]`.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize, padding: usize) -> Var<'t> {
        let (x, w) = (self.value(), weight.value());
        assert_eq!(x.shape().len(), 4, "conv2d input must be [B, C, H, W]");
        assert_eq!(w.shape().len(), 4, "conv2d weight must be [O, C, kh, kw]");
        assert_eq!(x.shape()[1], w.shape()[1], "conv2d channel mismatch");
        let geom = ConvGeom {
            batch: x.shape()[0],
            in_ch: x.shape()[1],
            height: x.shape()[2],
            width: x.shape()[3],
            out_ch: w.shape()[0],
            kernel_h: w.shape()[2],
            kernel_w: w.shape()[3],
            stride,
            padding,
        };
        let bv = bias.map(|b| b.value());
        if let Some(b) = &bv {
            assert_eq!(b.numel(), geom.out_ch, "conv2d bias length mismatch");
        }
        let out = conv::forward(&geom, x.data(), w.data(), bv.as_ref().map(|b| b.data()));
        let rg = self.rg() || weight.rg() || bias.is_some_and(|b| b.rg());
        self.tape.push(
            Tensor::new(geom.output_shape(), out),
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            },
            rg,
        )
    }
}
