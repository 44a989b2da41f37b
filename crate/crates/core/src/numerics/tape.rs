//! Reverse-mode differentiation over a tape of 2-D tensors.
//!
//! Every value on the tape is an `Array2<f64>` (scalars are `1x1`). Backward
//! rules are written in terms of tape operations, so when `grad` is called
//! with `create_graph = true` the returned gradients are themselves tape
//! variables that can be differentiated again. This is what the MAML outer
//! update needs to see through the inner gradient step.

use std::cell::{Cell, Ref, RefCell};

use ndarray::{Array2, Axis};

use super::NumericsError;

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulScalar(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    Neg(usize),
    Relu(usize),
    Tanh(usize),
    Exp(usize),
    Log(usize),
    Recip(usize),
    Sigmoid(usize),
    Softplus(usize),
    Square(usize),
    Minimum(usize, usize),
    Transpose(usize),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRows(usize),
    BroadcastCols(usize),
    BroadcastScalar(usize),
    Reshape(usize),
    SliceCols(usize, usize),
    PadCols(usize, usize),
    ConcatCols(usize, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation graph. Parents always have smaller ids than
/// their children, so id order is a valid topological order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    recording: Cell<bool>,
    fault: RefCell<Option<String>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::with_capacity(256)),
            recording: Cell::new(true),
            fault: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&self, value: Array2<f64>) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Non-differentiable leaf (data, masks, targets).
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// First non-finite value produced on this tape, if any.
    pub fn check(&self) -> Result<(), NumericsError> {
        match self.fault.borrow().as_ref() {
            Some(msg) => Err(NumericsError::NonFinite(msg.clone())),
            None => Ok(()),
        }
    }

    fn push_leaf(&self, value: Array2<f64>, requires_grad: bool) -> Var<'_> {
        self.note_finite(&value, "leaf");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn note_finite(&self, value: &Array2<f64>, what: &str) {
        if self.fault.borrow().is_none() && !value.iter().all(|v| v.is_finite()) {
            let id = self.nodes.borrow().len();
            *self.fault.borrow_mut() = Some(format!("{what} produced a non-finite value at node {id}"));
        }
    }

    fn push(&self, value: Array2<f64>, op: Op, parents: &[usize]) -> Var<'_> {
        self.note_finite(&value, op_name(op));
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad =
            self.recording.get() && parents.iter().any(|&p| nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn val(&self, id: usize) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Gradients of a scalar `loss` with respect to `wrt`.
    ///
    /// With `create_graph` the gradient computation is recorded, so the
    /// results can be fed into further differentiable computation.
    /// Variables that `loss` does not depend on get a zero gradient.
    pub fn grad<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
        create_graph: bool,
    ) -> Result<Vec<Var<'t>>, NumericsError> {
        let shape = loss.shape();
        if shape != (1, 1) {
            return Err(NumericsError::Contract(format!(
                "gradient requires a scalar loss, got shape {shape:?}"
            )));
        }
        self.check()?;
        let n = loss.id + 1;

        // Nodes on some path from a `wrt` variable to the loss.
        let mut depends = vec![false; n];
        for w in wrt {
            if w.id < n {
                depends[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if depends[id] || !nodes[id].requires_grad {
                    continue;
                }
                depends[id] = parents(nodes[id].op).iter().any(|&p| depends[p]);
            }
        }

        let prev = self.recording.replace(create_graph);
        let mut adj: Vec<Option<Var<'t>>> = vec![None; n];
        adj[loss.id] = Some(self.scalar(1.0));

        for id in (0..n).rev() {
            if !depends[id] {
                continue;
            }
            let Some(g) = adj[id] else { continue };
            let op = self.nodes.borrow()[id].op;
            for (p, gp) in self.vjp(id, op, g, &depends) {
                adj[p] = Some(match adj[p] {
                    Some(acc) => acc.add(gp),
                    None => gp,
                });
            }
        }
        self.recording.set(prev);
        self.check()?;

        Ok(wrt
            .iter()
            .map(|w| match adj.get(w.id).copied().flatten() {
                Some(g) => g,
                None => self.constant(Array2::zeros(w.shape())),
            })
            .collect())
    }

    /// First-order gradients as plain arrays.
    pub fn gradients<'t>(
        &'t self,
        loss: Var<'t>,
        wrt: &[Var<'t>],
    ) -> Result<Vec<Array2<f64>>, NumericsError> {
        let grads = self.grad(loss, wrt, false)?;
        Ok(grads.iter().map(|g| g.value()).collect())
    }

    fn vjp<'t>(&'t self, id: usize, op: Op, g: Var<'t>, depends: &[bool]) -> Vec<(usize, Var<'t>)> {
        let v = |i: usize| Var { tape: self, id: i };
        let need = |i: usize| depends[i];
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(a) {
                    out.push((a, g.matmul(v(b).t())));
                }
                if need(b) {
                    out.push((b, v(a).t().matmul(g)));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g.neg()));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, g.mul(v(b))));
                }
                if need(b) {
                    out.push((b, g.mul(v(a))));
                }
            }
            Op::AddRow(a, row) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(row) {
                    out.push((row, g.sum_rows()));
                }
            }
            Op::MulScalar(a, s) => {
                if need(a) {
                    out.push((a, g.mul_scalar(v(s))));
                }
                if need(s) {
                    out.push((s, g.mul(v(a)).sum()));
                }
            }
            Op::Scale(a, c) => out.push((a, g.scale(c))),
            Op::Shift(a) => out.push((a, g)),
            Op::Neg(a) => out.push((a, g.neg())),
            Op::Relu(a) => {
                let mask = v(a).value().mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                out.push((a, g.mul(self.constant(mask))));
            }
            Op::Tanh(a) => {
                let y = v(id);
                out.push((a, g.mul(y.square().neg().shift(1.0))));
            }
            Op::Exp(a) => out.push((a, g.mul(v(id)))),
            Op::Log(a) => out.push((a, g.mul(v(a).recip()))),
            Op::Recip(a) => {
                let y = v(id);
                out.push((a, g.mul(y.square()).neg()));
            }
            Op::Sigmoid(a) => {
                let y = v(id);
                out.push((a, g.mul(y.mul(y.neg().shift(1.0)))));
            }
            Op::Softplus(a) => out.push((a, g.mul(v(a).sigmoid()))),
            Op::Square(a) => out.push((a, g.mul(v(a)).scale(2.0))),
            Op::Minimum(a, b) => {
                let mask = {
                    let (va, vb) = (self.val(a), self.val(b));
                    ndarray::Zip::from(&*va)
                        .and(&*vb)
                        .map_collect(|x, y| if x <= y { 1.0 } else { 0.0 })
                };
                let other = mask.mapv(|m| 1.0 - m);
                if need(a) {
                    out.push((a, g.mul(self.constant(mask))));
                }
                if need(b) {
                    out.push((b, g.mul(self.constant(other))));
                }
            }
            Op::Transpose(a) => out.push((a, g.t())),
            Op::SumAll(a) => {
                let (r, c) = v(a).shape();
                out.push((a, g.broadcast_scalar(r, c)));
            }
            Op::SumRows(a) => out.push((a, g.broadcast_rows(v(a).shape().0))),
            Op::SumCols(a) => out.push((a, g.broadcast_cols(v(a).shape().1))),
            Op::BroadcastRows(a) => out.push((a, g.sum_rows())),
            Op::BroadcastCols(a) => out.push((a, g.sum_cols())),
            Op::BroadcastScalar(a) => out.push((a, g.sum())),
            Op::Reshape(a) => {
                let (r, c) = v(a).shape();
                out.push((a, g.reshape(r, c)));
            }
            Op::SliceCols(a, start) => {
                let total = v(a).shape().1;
                out.push((a, g.pad_cols(start, total)));
            }
            Op::PadCols(a, start) => {
                let width = v(a).shape().1;
                out.push((a, g.slice_cols(start, start + width)));
            }
            Op::ConcatCols(a, b) => {
                let wa = v(a).shape().1;
                let wb = v(b).shape().1;
                if need(a) {
                    out.push((a, g.slice_cols(0, wa)));
                }
                if need(b) {
                    out.push((b, g.slice_cols(wa, wa + wb)));
                }
            }
        }
        out.retain(|(p, _)| need(*p));
        out
    }
}

fn parents(op: Op) -> Vec<usize> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::AddRow(a, b)
        | Op::MulScalar(a, b)
        | Op::Minimum(a, b)
        | Op::ConcatCols(a, b) => vec![a, b],
        Op::Scale(a, _)
        | Op::Shift(a)
        | Op::Neg(a)
        | Op::Relu(a)
        | Op::Tanh(a)
        | Op::Exp(a)
        | Op::Log(a)
        | Op::Recip(a)
        | Op::Sigmoid(a)
        | Op::Softplus(a)
        | Op::Square(a)
        | Op::Transpose(a)
        | Op::SumAll(a)
        | Op::SumRows(a)
        | Op::SumCols(a)
        | Op::BroadcastRows(a)
        | Op::BroadcastCols(a)
        | Op::BroadcastScalar(a)
        | Op::Reshape(a)
        | Op::SliceCols(a, _)
        | Op::PadCols(a, _) => vec![a],
    }
}

fn op_name(op: Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::MulScalar(..) => "mul_scalar",
        Op::Scale(..) => "scale",
        Op::Shift(..) => "shift",
        Op::Neg(..) => "neg",
        Op::Relu(..) => "relu",
        Op::Tanh(..) => "tanh",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Recip(..) => "recip",
        Op::Sigmoid(..) => "sigmoid",
        Op::Softplus(..) => "softplus",
        Op::Square(..) => "square",
        Op::Minimum(..) => "minimum",
        Op::Transpose(..) => "transpose",
        Op::SumAll(..) => "sum",
        Op::SumRows(..) => "sum_rows",
        Op::SumCols(..) => "sum_cols",
        Op::BroadcastRows(..) => "broadcast_rows",
        Op::BroadcastCols(..) => "broadcast_cols",
        Op::BroadcastScalar(..) => "broadcast_scalar",
        Op::Reshape(..) => "reshape",
        Op::SliceCols(..) => "slice_cols",
        Op::PadCols(..) => "pad_cols",
        Op::ConcatCols(..) => "concat_cols",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

// Shape mismatches inside the tape are programming errors and panic, the
// same way ndarray does. Public model entry points validate shapes first.
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.val(self.id).dim()
    }

    pub fn value(&self) -> Array2<f64> {
        self.tape.val(self.id).clone()
    }

    /// The single element of a `1x1` variable.
    pub fn item(&self) -> f64 {
        let v = self.tape.val(self.id);
        assert_eq!(v.dim(), (1, 1), "item() on non-scalar");
        v[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Array2<f64>) -> Array2<f64>) -> Var<'t> {
        let value = f(&self.tape.val(self.id));
        self.tape.push(value, op, &[self.id])
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Array2<f64>, &Array2<f64>) -> Array2<f64>,
    ) -> Var<'t> {
        let value = f(&self.tape.val(self.id), &self.tape.val(other.id));
        self.tape.push(value, op, &[self.id, other.id])
    }

    fn same_shape(&self, other: &Var<'t>, what: &str) {
        assert_eq!(self.shape(), other.shape(), "{what}: shape mismatch");
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a.1, b.0, "matmul: {a:?} x {b:?}");
        self.binary(other, Op::MatMul(self.id, other.id), |x, y| x.dot(y))
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "add");
        self.binary(other, Op::Add(self.id, other.id), |x, y| x + y)
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "sub");
        self.binary(other, Op::Sub(self.id, other.id), |x, y| x - y)
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "mul");
        self.binary(other, Op::Mul(self.id, other.id), |x, y| x * y)
    }

    /// `self (m x n) + row (1 x n)` broadcast over rows.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (a, r) = (self.shape(), row.shape());
        assert!(r.0 == 1 && r.1 == a.1, "add_row: {a:?} + {r:?}");
        self.binary(row, Op::AddRow(self.id, row.id), |x, y| x + y)
    }

    /// Multiply every element by the `1x1` variable `s`.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1), "mul_scalar: scalar must be 1x1");
        self.binary(s, Op::MulScalar(self.id, s.id), |x, y| x * y[[0, 0]])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    /// Add a constant to every element.
    pub fn shift(self, c: f64) -> Var<'t> {
        self.unary(Op::Shift(self.id), |x| x + c)
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(Op::Neg(self.id), |x| -x)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.mapv(|v| v.max(0.0)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |x| x.mapv(f64::tanh))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Op::Exp(self.id), |x| x.mapv(f64::exp))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(Op::Log(self.id), |x| x.mapv(f64::ln))
    }

    pub fn recip(self) -> Var<'t> {
        self.unary(Op::Recip(self.id), |x| x.mapv(|v| 1.0 / v))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), |x| x.mapv(sigmoid))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), |x| x.mapv(softplus))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |x| x.mapv(|v| v * v))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn minimum(self, other: Var<'t>) -> Var<'t> {
        self.same_shape(&other, "minimum");
        self.binary(other, Op::Minimum(self.id, other.id), |x, y| {
            ndarray::Zip::from(x).and(y).map_collect(|a, b| a.min(*b))
        })
    }

    pub fn t(self) -> Var<'t> {
        self.unary(Op::Transpose(self.id), |x| x.t().as_standard_layout().into_owned())
    }

    /// Sum of all elements, as `1x1`.
    pub fn sum(self) -> Var<'t> {
        self.unary(Op::SumAll(self.id), |x| Array2::from_elem((1, 1), x.sum()))
    }

    pub fn mean(self) -> Var<'t> {
        let (r, c) = self.shape();
        self.sum().scale(1.0 / (r * c) as f64)
    }

    /// Column sums, `m x n -> 1 x n`.
    pub fn sum_rows(self) -> Var<'t> {
        self.unary(Op::SumRows(self.id), |x| x.sum_axis(Axis(0)).insert_axis(Axis(0)))
    }

    /// Row sums, `m x n -> m x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        self.unary(Op::SumCols(self.id), |x| x.sum_axis(Axis(1)).insert_axis(Axis(1)))
    }

    pub fn broadcast_rows(self, rows: usize) -> Var<'t> {
        assert_eq!(self.shape().0, 1, "broadcast_rows needs a row vector");
        self.unary(Op::BroadcastRows(self.id), |x| {
            x.broadcast((rows, x.ncols())).unwrap().to_owned()
        })
    }

    pub fn broadcast_cols(self, cols: usize) -> Var<'t> {
        assert_eq!(self.shape().1, 1, "broadcast_cols needs a column vector");
        self.unary(Op::BroadcastCols(self.id), |x| {
            x.broadcast((x.nrows(), cols)).unwrap().to_owned()
        })
    }

    pub fn broadcast_scalar(self, rows: usize, cols: usize) -> Var<'t> {
        assert_eq!(self.shape(), (1, 1), "broadcast_scalar needs 1x1");
        self.unary(Op::BroadcastScalar(self.id), |x| Array2::from_elem((rows, cols), x[[0, 0]]))
    }

    /// Row-major reshape.
    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert_eq!(r * c, rows * cols, "reshape: {r}x{c} -> {rows}x{cols}");
        self.unary(Op::Reshape(self.id), |x| {
            let flat: Vec<f64> = x.iter().copied().collect();
            Array2::from_shape_vec((rows, cols), flat).unwrap()
        })
    }

    /// Columns `start..end`.
    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        assert!(start < end && end <= self.shape().1, "slice_cols out of range");
        self.unary(Op::SliceCols(self.id, start), |x| {
            x.slice(ndarray::s![.., start..end]).to_owned()
        })
    }

    /// Embed into a zero matrix of width `total` starting at column `start`.
    pub fn pad_cols(self, start: usize, total: usize) -> Var<'t> {
        let (r, c) = self.shape();
        assert!(start + c <= total, "pad_cols out of range");
        self.unary(Op::PadCols(self.id, start), |x| {
            let mut out = Array2::zeros((r, total));
            out.slice_mut(ndarray::s![.., start..start + c]).assign(x);
            out
        })
    }

    pub fn concat_cols(self, other: Var<'t>) -> Var<'t> {
        assert_eq!(self.shape().0, other.shape().0, "concat_cols: row mismatch");
        self.binary(other, Op::ConcatCols(self.id, other.id), |x, y| {
            ndarray::concatenate(Axis(1), &[x.view(), y.view()]).unwrap()
        })
    }
}
