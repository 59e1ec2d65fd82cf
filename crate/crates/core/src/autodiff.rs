//! Tape-based reverse-mode differentiation over small dense arrays.
//!
//! Values are row-major `rows x cols` arrays of `f64`; a scalar is `1x1` and a
//! vector is `n x 1`. There is no broadcasting: elementwise ops need equal
//! shapes, and the only mixed-shape products are [`Var::scale`] (scalar times
//! array), [`Var::matvec`] and [`Var::vecmat`].
//!
//! Recording never panics. A shape mismatch or a non-finite value poisons the
//! tape: the offending node is filled with NaN and the first error is returned
//! by [`Tape::backward`] and [`Tape::check`].
//!
//! ```
//! use posefield::autodiff::Tape;
//!
//! let tape = Tape::new();
//! let x = tape.scalar(3.0);
//! let y = x * x;
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.wrt(x), vec![6.0]);
//! ```

use std::cell::RefCell;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, usize),
    MulConst(usize, f64),
    AddConst(usize),
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Tanh(usize),
    Sigmoid(usize),
    Softplus(usize),
    Sqrt(usize),
    MinConst(usize, f64),
    Sum(usize),
    Dot(usize, usize),
    MatVec(usize, usize),
    VecMat(usize, usize),
    Normalize(usize),
    Norm(usize),
    Slice(usize, usize),
    Concat(Vec<usize>),
    Reshape(usize),
    QuatMul(usize, usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::AddConst(..) => "add_const",
            Op::Sin(..) => "sin",
            Op::Cos(..) => "cos",
            Op::Exp(..) => "exp",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Sqrt(..) => "sqrt",
            Op::MinConst(..) => "min_const",
            Op::Sum(..) => "sum",
            Op::Dot(..) => "dot",
            Op::MatVec(..) => "matvec",
            Op::VecMat(..) => "vecmat",
            Op::Normalize(..) => "normalize",
            Op::Norm(..) => "norm",
            Op::Slice(..) => "slice",
            Op::Concat(..) => "concat",
            Op::Reshape(..) => "reshape",
            Op::QuatMul(..) => "quat_mul",
        }
    }

    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Scale(a, b)
            | Op::Dot(a, b)
            | Op::MatVec(a, b)
            | Op::VecMat(a, b)
            | Op::QuatMul(a, b) => vec![*a, *b],
            Op::Neg(a)
            | Op::MulConst(a, _)
            | Op::AddConst(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Tanh(a)
            | Op::Sigmoid(a)
            | Op::Softplus(a)
            | Op::Sqrt(a)
            | Op::MinConst(a, _)
            | Op::Sum(a)
            | Op::Normalize(a)
            | Op::Norm(a)
            | Op::Slice(a, _)
            | Op::Reshape(a) => vec![*a],
            Op::Concat(ids) => ids.clone(),
        }
    }
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    error: RefCell<Option<Error>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (r, c) = self.shape();
        write!(f, "Var#{}[{}x{}]", self.id, r, c)
    }
}

pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    lens: Vec<usize>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` does not reach the output.
    pub fn wrt(&self, v: Var<'_>) -> Vec<f64> {
        match self.grads.get(v.id) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; self.lens[v.id]],
        }
    }

    /// Adds the gradient of `v` into `out`.
    pub fn accumulate(&self, v: Var<'_>, out: &mut [f64]) {
        if let Some(Some(g)) = self.grads.get(v.id) {
            for (o, x) in out.iter_mut().zip(g) {
                *o += x;
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First recording error, if any.
    pub fn check(&self) -> Result<()> {
        match &*self.error.borrow() {
            None => Ok(()),
            Some(e) => Err(clone_error(e)),
        }
    }

    fn fail(&self, e: Error) {
        let mut slot = self.error.borrow_mut();
        if slot.is_none() {
            *slot = Some(e);
        }
    }

    fn push(&self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var<'_> {
        let needs_grad = match &op {
            Op::Leaf => true,
            Op::Constant => false,
            other => {
                let nodes = self.nodes.borrow();
                other.inputs().iter().any(|&i| nodes[i].needs_grad)
            }
        };
        if value.iter().any(|v| !v.is_finite()) {
            self.fail(Error::NonFinite { op: op.name() });
        }
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op, rows, cols, value, needs_grad });
        Var { tape: self, id }
    }

    fn poisoned(&self, op: Op, rows: usize, cols: usize, detail: String) -> Var<'_> {
        self.fail(Error::ShapeMismatch { op: op.name(), detail });
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { op: Op::Constant, rows, cols, value: vec![f64::NAN; rows * cols], needs_grad: false });
        Var { tape: self, id }
    }

    /// A differentiable input.
    pub fn leaf(&self, rows: usize, cols: usize, values: &[f64]) -> Var<'_> {
        if values.len() != rows * cols {
            return self.poisoned(Op::Leaf, rows, cols, format!("{} values for {rows}x{cols}", values.len()));
        }
        self.push(Op::Leaf, rows, cols, values.to_vec())
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.leaf(1, 1, &[x])
    }

    pub fn vector(&self, values: &[f64]) -> Var<'_> {
        self.leaf(values.len(), 1, values)
    }

    pub fn matrix(&self, rows: usize, cols: usize, values: &[f64]) -> Var<'_> {
        self.leaf(rows, cols, values)
    }

    /// A non-differentiable input; backward never visits it.
    pub fn constant(&self, rows: usize, cols: usize, values: &[f64]) -> Var<'_> {
        if values.len() != rows * cols {
            return self.poisoned(Op::Constant, rows, cols, format!("{} values for {rows}x{cols}", values.len()));
        }
        self.push(Op::Constant, rows, cols, values.to_vec())
    }

    pub fn const_scalar(&self, x: f64) -> Var<'_> {
        self.constant(1, 1, &[x])
    }

    pub fn const_vector(&self, values: &[f64]) -> Var<'_> {
        self.constant(values.len(), 1, values)
    }

    /// Stack vectors (or scalars) into one column vector.
    pub fn concat(&self, parts: &[Var<'_>]) -> Var<'_> {
        let nodes = self.nodes.borrow();
        let mut value = Vec::new();
        for p in parts {
            let n = &nodes[p.id];
            if n.cols != 1 {
                let (r, c) = (n.rows, n.cols);
                drop(nodes);
                return self.poisoned(Op::Concat(vec![]), 1, 1, format!("part is {r}x{c}, not a vector"));
            }
            value.extend_from_slice(&n.value);
        }
        drop(nodes);
        let len = value.len();
        self.push(Op::Concat(parts.iter().map(|p| p.id).collect()), len, 1, value)
    }

    fn shape_of(&self, id: usize) -> (usize, usize) {
        let n = &self.nodes.borrow()[id];
        (n.rows, n.cols)
    }

    fn value_of(&self, id: usize) -> Vec<f64> {
        self.nodes.borrow()[id].value.clone()
    }

    fn unary(&self, a: usize, op: Op, f: impl Fn(f64) -> f64) -> Var<'_> {
        let (rows, cols, value) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a];
            (n.rows, n.cols, n.value.iter().map(|&x| f(x)).collect())
        };
        self.push(op, rows, cols, value)
    }

    fn binary(&self, a: usize, b: usize, op: Op, f: impl Fn(f64, f64) -> f64) -> Var<'_> {
        let result = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a], &nodes[b]);
            if (na.rows, na.cols) != (nb.rows, nb.cols) {
                Err(((na.rows, na.cols), (nb.rows, nb.cols)))
            } else {
                Ok((na.rows, na.cols, na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect()))
            }
        };
        match result {
            Ok((rows, cols, value)) => self.push(op, rows, cols, value),
            Err((sa, sb)) => self.poisoned(op, sa.0, sa.1, format!("{sa:?} vs {sb:?}")),
        }
    }

    /// Reverse accumulation from a scalar `output`.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        self.check()?;
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.rows * out.cols != 1 {
            return Err(Error::NonScalarOutput { rows: out.rows, cols: out.cols });
        }
        let lens: Vec<usize> = nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[output.id] = Some(vec![1.0]);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, lens })
    }
}

fn clone_error(e: &Error) -> Error {
    match e {
        Error::ShapeMismatch { op, detail } => Error::ShapeMismatch { op, detail: detail.clone() },
        Error::NonFinite { op } => Error::NonFinite { op },
        other => Error::InvalidParameter(other.to_string()),
    }
}

fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].needs_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()]))
}

fn quat_product(a: &[f64], b: &[f64]) -> [f64; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

fn conj(a: &[f64]) -> [f64; 4] {
    [a[0], -a[1], -a[2], -a[3]]
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf | Op::Constant => {}
        Op::Add(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(o, g)| *o -= g);
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * vb[k];
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for k in 0..g.len() {
                    gb[k] += g[k] * va[k];
                }
            }
        }
        Op::Div(a, b) => {
            let vb = &nodes[*b].value;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] / vb[k];
                }
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                for k in 0..g.len() {
                    gb[k] -= g[k] * y[k] / vb[k];
                }
            }
        }
        Op::Neg(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o -= g);
            }
        }
        Op::Scale(s, a) => {
            let (vs, va) = (nodes[*s].value[0], &nodes[*a].value);
            if let Some(gs) = grad_buf(nodes, grads, *s) {
                gs[0] += g.iter().zip(va).map(|(g, x)| g * x).sum::<f64>();
            }
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += vs * g);
            }
        }
        Op::MulConst(a, c) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += c * g);
            }
        }
        Op::AddConst(a) | Op::Reshape(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
        }
        Op::Sin(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * va[k].cos();
                }
            }
        }
        Op::Cos(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] -= g[k] * va[k].sin();
                }
            }
        }
        Op::Exp(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k];
                }
            }
        }
        Op::Tanh(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * (1.0 - y[k] * y[k]);
                }
            }
        }
        Op::Sigmoid(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * y[k] * (1.0 - y[k]);
                }
            }
        }
        Op::Softplus(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    ga[k] += g[k] * sigmoid(va[k]);
                }
            }
        }
        Op::Sqrt(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    if y[k] > 0.0 {
                        ga[k] += g[k] * 0.5 / y[k];
                    }
                }
            }
        }
        Op::MinConst(a, c) => {
            let va = &nodes[*a].value;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                for k in 0..g.len() {
                    // subgradient 0 at the kink
                    if va[k] < *c {
                        ga[k] += g[k];
                    }
                }
            }
        }
        Op::Sum(a) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::Dot(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga.iter_mut().zip(vb).for_each(|(o, x)| *o += g[0] * x);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                gb.iter_mut().zip(va).for_each(|(o, x)| *o += g[0] * x);
            }
        }
        Op::MatVec(w, x) => {
            let (nw, vx) = (&nodes[*w], &nodes[*x].value);
            let (m, n) = (nw.rows, nw.cols);
            if let Some(gw) = grad_buf(nodes, grads, *w) {
                for i in 0..m {
                    let gi = g[i];
                    if gi != 0.0 {
                        let row = &mut gw[i * n..(i + 1) * n];
                        row.iter_mut().zip(vx).for_each(|(o, x)| *o += gi * x);
                    }
                }
            }
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..m {
                    let gi = g[i];
                    if gi != 0.0 {
                        let row = &nw.value[i * n..(i + 1) * n];
                        gx.iter_mut().zip(row).for_each(|(o, w)| *o += gi * w);
                    }
                }
            }
        }
        Op::VecMat(x, mtx) => {
            let (vx, nm) = (&nodes[*x].value, &nodes[*mtx]);
            let (m, n) = (nm.rows, nm.cols);
            if let Some(gx) = grad_buf(nodes, grads, *x) {
                for i in 0..m {
                    let row = &nm.value[i * n..(i + 1) * n];
                    gx[i] += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            if let Some(gm) = grad_buf(nodes, grads, *mtx) {
                for i in 0..m {
                    let row = &mut gm[i * n..(i + 1) * n];
                    row.iter_mut().zip(g).for_each(|(o, g)| *o += vx[i] * g);
                }
            }
        }
        Op::Normalize(a) => {
            let va = &nodes[*a].value;
            let norm = va.iter().map(|x| x * x).sum::<f64>().sqrt();
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                if norm > 0.0 {
                    let yg: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for k in 0..g.len() {
                        ga[k] += (g[k] - y[k] * yg) / norm;
                    }
                }
            }
        }
        Op::Norm(a) => {
            let va = &nodes[*a].value;
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                if y[0] > 0.0 {
                    ga.iter_mut().zip(va).for_each(|(o, x)| *o += g[0] * x / y[0]);
                }
            }
        }
        Op::Slice(a, start) => {
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                ga[*start..*start + g.len()].iter_mut().zip(g).for_each(|(o, g)| *o += g);
            }
        }
        Op::Concat(ids) => {
            let mut offset = 0;
            for &id in ids {
                let len = nodes[id].value.len();
                if let Some(gi) = grad_buf(nodes, grads, id) {
                    gi.iter_mut().zip(&g[offset..offset + len]).for_each(|(o, g)| *o += g);
                }
                offset += len;
            }
        }
        Op::QuatMul(a, b) => {
            let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
            if let Some(ga) = grad_buf(nodes, grads, *a) {
                let d = quat_product(g, &conj(vb));
                ga.iter_mut().zip(d).for_each(|(o, x)| *o += x);
            }
            if let Some(gb) = grad_buf(nodes, grads, *b) {
                let d = quat_product(&conj(va), g);
                gb.iter_mut().zip(d).for_each(|(o, x)| *o += x);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.shape_of(self.id)
    }

    pub fn len(&self) -> usize {
        let (r, c) = self.shape();
        r * c
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.value_of(self.id)
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn scale(self, s: Var<'t>) -> Var<'t> {
        let (sr, sc) = s.shape();
        if sr * sc != 1 {
            let (r, c) = self.shape();
            return self.tape.poisoned(Op::Scale(s.id, self.id), r, c, format!("scale factor is {sr}x{sc}"));
        }
        let k = s.item();
        let (rows, cols) = self.shape();
        let value = self.value().iter().map(|x| k * x).collect();
        self.tape.push(Op::Scale(s.id, self.id), rows, cols, value)
    }

    pub fn mul_const(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::MulConst(self.id, c), |x| c * x)
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::AddConst(self.id), |x| x + c)
    }

    pub fn sin(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sin(self.id), f64::sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Cos(self.id), f64::cos)
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Exp(self.id), f64::exp)
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Tanh(self.id), f64::tanh)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sigmoid(self.id), sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Softplus(self.id), softplus)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Sqrt(self.id), f64::sqrt)
    }

    /// Elementwise `min(x, c)`; the gradient is 0 at `x == c`.
    pub fn min_const(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, Op::MinConst(self.id, c), |x| x.min(c))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().iter().sum::<f64>();
        self.tape.push(Op::Sum(self.id), 1, 1, vec![s])
    }

    pub fn dot(self, other: Var<'t>) -> Var<'t> {
        if self.shape() != other.shape() {
            let detail = format!("{:?} vs {:?}", self.shape(), other.shape());
            return self.tape.poisoned(Op::Dot(self.id, other.id), 1, 1, detail);
        }
        let s = self.value().iter().zip(other.value()).map(|(a, b)| a * b).sum::<f64>();
        self.tape.push(Op::Dot(self.id, other.id), 1, 1, vec![s])
    }

    /// `self` is an `m x n` matrix, `x` an `n`-vector.
    pub fn matvec(self, x: Var<'t>) -> Var<'t> {
        let (m, n) = self.shape();
        let (xr, xc) = x.shape();
        if xc != 1 || xr != n {
            return self.tape.poisoned(Op::MatVec(self.id, x.id), m, 1, format!("{m}x{n} times {xr}x{xc}"));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (w, v) = (&nodes[self.id].value, &nodes[x.id].value);
            (0..m).map(|i| w[i * n..(i + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum()).collect()
        };
        self.tape.push(Op::MatVec(self.id, x.id), m, 1, value)
    }

    /// `selfᵀ M` for an `m`-vector `self` and an `m x n` matrix, as an `n`-vector.
    pub fn vecmat(self, mtx: Var<'t>) -> Var<'t> {
        let (m, n) = mtx.shape();
        let (xr, xc) = self.shape();
        if xc != 1 || xr != m {
            return self.tape.poisoned(Op::VecMat(self.id, mtx.id), n, 1, format!("{xr}x{xc} times {m}x{n}"));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[mtx.id].value);
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += x[i] * w[i * n + j];
                }
            }
            out
        };
        self.tape.push(Op::VecMat(self.id, mtx.id), n, 1, value)
    }

    pub fn normalize(self) -> Var<'t> {
        let v = self.value();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let (rows, cols) = self.shape();
        self.tape.push(Op::Normalize(self.id), rows, cols, v.iter().map(|x| x / norm).collect())
    }

    /// Euclidean norm; the gradient at the origin is taken as 0.
    pub fn norm(self) -> Var<'t> {
        let n = self.value().iter().map(|x| x * x).sum::<f64>().sqrt();
        self.tape.push(Op::Norm(self.id), 1, 1, vec![n])
    }

    pub fn slice(self, start: usize, len: usize) -> Var<'t> {
        let (rows, cols) = self.shape();
        if cols != 1 || start + len > rows {
            return self.tape.poisoned(Op::Slice(self.id, start), len, 1, format!("[{start}..{}] of {rows}x{cols}", start + len));
        }
        let value = self.tape.nodes.borrow()[self.id].value[start..start + len].to_vec();
        self.tape.push(Op::Slice(self.id, start), len, 1, value)
    }

    pub fn at(self, index: usize) -> Var<'t> {
        self.slice(index, 1)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        if rows * cols != self.len() {
            return self.tape.poisoned(Op::Reshape(self.id), rows, cols, format!("{:?} to {rows}x{cols}", self.shape()));
        }
        self.tape.push(Op::Reshape(self.id), rows, cols, self.value())
    }

    /// Hamilton product of two 4-vectors (no normalization).
    pub fn quat_mul(self, other: Var<'t>) -> Var<'t> {
        if self.shape() != (4, 1) || other.shape() != (4, 1) {
            let detail = format!("{:?} and {:?}", self.shape(), other.shape());
            return self.tape.poisoned(Op::QuatMul(self.id, other.id), 4, 1, detail);
        }
        let value = quat_product(&self.value(), &other.value()).to_vec();
        self.tape.push(Op::QuatMul(self.id, other.id), 4, 1, value)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Add(self.id, rhs.id), |a, b| a + b)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Sub(self.id, rhs.id), |a, b| a - b)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Mul(self.id, rhs.id), |a, b| a * b)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Var<'t> {
        self.tape.binary(self.id, rhs.id, Op::Div(self.id, rhs.id), |a, b| a / b)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, Op::Neg(self.id), |a| -a)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.mul_const(rhs)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_const(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    /// Central differences of `f` over every coordinate of `x0`.
    fn finite_diff(x0: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|k| {
                let mut xp = x0.to_vec();
                let mut xm = x0.to_vec();
                xp[k] += h;
                xm[k] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn check_op(name: &str, x0: &[f64], build: impl for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>) {
        let tape = Tape::new();
        let x = tape.vector(x0);
        let out = build(&tape, x);
        let analytic = tape.backward(out).unwrap().wrt(x);
        let numeric = finite_diff(x0, |xs| {
            let t = Tape::new();
            let v = t.vector(xs);
            build(&t, v).item()
        });
        for (k, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(err < 1e-6, "{name}[{k}]: analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn mul_example() {
        let tape = Tape::new();
        let a = tape.scalar(2.0);
        let b = tape.scalar(3.0);
        let y = a * b;
        assert_eq!(y.item(), 6.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(a), vec![3.0]);
        assert_eq!(g.wrt(b), vec![2.0]);
    }

    #[test]
    fn sin_at_half_pi() {
        let tape = Tape::new();
        let x = tape.scalar(FRAC_PI_2);
        let y = x.sin();
        assert_eq!(y.item(), 1.0);
        assert!(tape.backward(y).unwrap().wrt(x)[0].abs() < 1e-12);
    }

    #[test]
    fn square_example() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let g = tape.backward(x * x).unwrap();
        assert_eq!(g.wrt(x), vec![6.0]);
    }

    #[test]
    fn disconnected_leaf_has_zero_gradient() {
        let tape = Tape::new();
        let x = tape.scalar(3.0);
        let unused = tape.vector(&[1.0, 2.0]);
        let g = tape.backward(x.exp()).unwrap();
        assert_eq!(g.wrt(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn normalize_jacobian_is_projector() {
        let v0 = [0.3, -1.2, 0.5, 2.0];
        let norm = v0.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vhat: Vec<f64> = v0.iter().map(|x| x / norm).collect();
        for row in 0..4 {
            let tape = Tape::new();
            let v = tape.vector(&v0);
            let y = v.normalize().at(row);
            let g = tape.backward(y).unwrap().wrt(v);
            for col in 0..4 {
                let delta = if row == col { 1.0 } else { 0.0 };
                let expected = (delta - vhat[row] * vhat[col]) / norm;
                assert!((g[col] - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let x0 = [0.4, -0.7, 1.3, 0.2];
        let w: Vec<f64> = (0..12).map(|k| (k as f64 * 0.37).sin()).collect();
        check_op("add", &x0, |t, x| (x + t.const_vector(&[1.0, 2.0, 3.0, 4.0])).dot(x));
        check_op("sub", &x0, |t, x| (t.const_vector(&[1.0, 2.0, 3.0, 4.0]) - x).dot(x));
        check_op("mul", &x0, |_, x| (x * x).sum());
        check_op("div", &x0, |t, x| (t.const_vector(&[1.0, 2.0, 3.0, 4.0]) / (x * x + 1.0)).sum());
        check_op("neg", &x0, |_, x| (-x).dot(x));
        check_op("scale", &x0, |_, x| x.scale(x.at(1)).sum());
        check_op("mul_const", &x0, |_, x| (x * 2.5).dot(x));
        check_op("sin", &x0, |_, x| x.sin().sum());
        check_op("cos", &x0, |_, x| x.cos().sum());
        check_op("exp", &x0, |_, x| x.exp().sum());
        check_op("tanh", &x0, |_, x| x.tanh().sum());
        check_op("sigmoid", &x0, |_, x| x.sigmoid().sum());
        check_op("softplus", &x0, |_, x| x.softplus().sum());
        check_op("sqrt", &x0, |_, x| (x * x + 0.5).sqrt().sum());
        check_op("min_const", &x0, |_, x| (x.min_const(0.5) * x).sum());
        check_op("matvec", &x0, |t, x| t.constant(3, 4, &w).matvec(x).sin().sum());
        check_op("matvec_weights", &w, |t, m| m.reshape(3, 4).matvec(t.const_vector(&x0)).sin().sum());
        check_op("vecmat", &x0, |t, x| x.vecmat(t.constant(4, 3, &w)).sin().sum());
        check_op("vecmat_weights", &w, |t, m| t.const_vector(&x0).vecmat(m.reshape(4, 3)).sin().sum());
        check_op("normalize", &x0, |t, x| x.normalize().dot(t.const_vector(&[0.1, 0.9, -0.3, 0.2])));
        check_op("norm", &x0, |_, x| x.norm());
        check_op("slice_concat", &x0, |t, x| t.concat(&[x.slice(1, 2), x.at(0)]).sin().sum());
        check_op("quat_mul", &x0, |t, x| x.quat_mul(t.const_vector(&[0.2, -0.4, 0.1, 0.9])).dot(x));
        check_op("quat_mul_rhs", &x0, |t, x| t.const_vector(&[0.2, -0.4, 0.1, 0.9]).quat_mul(x).sin().sum());
    }

    #[test]
    fn min_const_kink_has_zero_subgradient() {
        let tape = Tape::new();
        let x = tape.scalar(2.0);
        let g = tape.backward(x.min_const(2.0)).unwrap();
        assert_eq!(g.wrt(x), vec![0.0]);
    }

    #[test]
    fn gradients_are_linear() {
        let tape = Tape::new();
        let x = tape.vector(&[0.3, 0.8, -0.4]);
        let f = x.sin().sum();
        let g = x.exp().dot(x);
        let (a, b) = (1.5, -0.25);
        let combo = f * a + g * b;
        let gf = tape.backward(f).unwrap().wrt(x);
        let gg = tape.backward(g).unwrap().wrt(x);
        let gc = tape.backward(combo).unwrap().wrt(x);
        for k in 0..3 {
            assert!((gc[k] - (a * gf[k] + b * gg[k])).abs() < 1e-14);
        }
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let tape = Tape::new();
        let x = tape.vector(&[0.3, 0.8, -0.4]);
        let y = x.tanh().normalize().dot(x.cos());
        let a = tape.backward(y).unwrap().wrt(x);
        let b = tape.backward(y).unwrap().wrt(x);
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn shape_mismatch_poisons_tape() {
        let tape = Tape::new();
        let a = tape.vector(&[1.0, 2.0]);
        let b = tape.vector(&[1.0, 2.0, 3.0]);
        let c = (a + b).sum();
        assert!(matches!(tape.check(), Err(Error::ShapeMismatch { op: "add", .. })));
        assert!(tape.backward(c).is_err());
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let tape = Tape::new();
        let a = tape.scalar(0.0);
        let y = tape.const_scalar(1.0) / a;
        assert!(matches!(tape.backward(y), Err(Error::NonFinite { op: "div" })));
        let tape = Tape::new();
        tape.scalar(f64::NAN);
        assert!(matches!(tape.check(), Err(Error::NonFinite { op: "leaf" })));
    }

    #[test]
    fn backward_needs_scalar() {
        let tape = Tape::new();
        let a = tape.vector(&[1.0, 2.0]);
        assert!(matches!(tape.backward(a), Err(Error::NonScalarOutput { rows: 2, cols: 1 })));
    }
}
