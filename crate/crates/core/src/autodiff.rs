//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation whose inputs require a gradient. Values
//! that do not depend on a recorded leaf are plain constants and never touch
//! the tape, so a tape that is not recording (see [`Tape::no_grad`]) performs
//! a forward-only evaluation with no memory growth.
//!
//! Arrays have rank at most 3. Element-wise binary operations broadcast with
//! the usual right-aligned rules.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix2, IxDyn, Zip};
use thiserror::Error;

/// Dense array used for every value on the tape.
pub type Array = ArrayD<f64>;

/// Maximum supported array rank.
pub const MAX_RANK: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AutodiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for axis of length {len}")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooHigh(usize),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("value refers to a node that was cleared from the tape")]
    StaleNode,
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("stop-gradient replay ran out of frozen values after {0} calls")]
    ReplayExhausted(usize),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Abs,
    Ln,
    Exp,
    Square,
    Sqrt,
    Neg,
    Scale(f64),
    Offset(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone)]
struct Operand {
    node: Option<usize>,
    data: Rc<Array>,
}

enum Op {
    Leaf,
    Unary(UnaryKind, Operand),
    Binary(BinaryKind, Operand, Operand),
    MatMul(Operand, Operand),
    Transpose(Operand),
    Sum(Operand),
    Mean(Operand),
    SumAxis(Operand, usize),
    Concat(Vec<Operand>, usize),
    Gather(Operand, Rc<[usize]>),
    Reshape(Operand),
}

struct Node {
    serial: u64,
    op: Op,
    data: Rc<Array>,
    grad: Option<Array>,
}

enum StopMode {
    Pass,
    Record(Vec<Rc<Array>>),
    Replay(Vec<Rc<Array>>, usize),
}

struct TapeInner {
    nodes: Vec<Node>,
    next_serial: u64,
    recording: bool,
    stops: StopMode,
}

/// Append-only record of differentiable operations.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

/// Position on a tape that [`Tape::clear_to`] can rewind to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Checkpoint(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct NodeRef {
    index: usize,
    serial: u64,
}

/// A value produced on a tape: its data plus, when it requires a gradient,
/// the id of the node that produced it.
#[derive(Clone)]
pub struct Var<'t> {
    tape: &'t Tape,
    node: Option<NodeRef>,
    data: Rc<Array>,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("node", &self.node.map(|n| n.index))
            .field("shape", &self.data.shape())
            .finish()
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// A recording tape.
    pub fn new() -> Self {
        Self::with_mode(true, StopMode::Pass)
    }

    /// A tape that never records: every value is a constant.
    pub fn no_grad() -> Self {
        Self::with_mode(false, StopMode::Pass)
    }

    fn with_mode(recording: bool, stops: StopMode) -> Self {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                next_serial: 0,
                recording,
                stops,
            }),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.inner.borrow().recording
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint(self.len())
    }

    /// Drops every node recorded after `mark`. Values referring to those
    /// nodes become stale and are rejected by [`Tape::backward`].
    pub fn clear_to(&self, mark: Checkpoint) {
        self.inner.borrow_mut().nodes.truncate(mark.0);
    }

    pub fn clear(&self) {
        self.clear_to(Checkpoint(0));
    }

    /// A learnable leaf. On a non-recording tape this is a constant.
    pub fn param(&self, value: Array) -> Result<Var<'_>> {
        check_rank(&value)?;
        let data = Rc::new(value);
        let node = self.push(Op::Leaf, data.clone(), true);
        Ok(Var {
            tape: self,
            node,
            data,
        })
    }

    pub fn constant(&self, value: Array) -> Result<Var<'_>> {
        check_rank(&value)?;
        Ok(Var {
            tape: self,
            node: None,
            data: Rc::new(value),
        })
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            node: None,
            data: Rc::new(ArrayD::from_elem(IxDyn(&[]), value)),
        }
    }

    pub fn vector(&self, values: Vec<f64>) -> Var<'_> {
        Var {
            tape: self,
            node: None,
            data: Rc::new(Array1::from(values).into_dyn()),
        }
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, var: &Var<'_>) -> Option<Array> {
        let node = var.node?;
        let inner = self.inner.borrow();
        let n = inner.nodes.get(node.index)?;
        if n.serial != node.serial {
            return None;
        }
        n.grad.clone()
    }

    /// Resets the accumulated gradient on every leaf.
    pub fn zero_grads(&self) {
        for n in self.inner.borrow_mut().nodes.iter_mut() {
            n.grad = None;
        }
    }

    /// Starts recording the input of every `stop_gradient` call so that a
    /// later evaluation can hold those values fixed (see [`gradient_check`]).
    pub fn record_stops(&self) {
        self.inner.borrow_mut().stops = StopMode::Record(Vec::new());
    }

    pub fn take_recorded_stops(&self) -> Vec<Rc<Array>> {
        let mut inner = self.inner.borrow_mut();
        match std::mem::replace(&mut inner.stops, StopMode::Pass) {
            StopMode::Record(values) => values,
            other => {
                inner.stops = other;
                Vec::new()
            }
        }
    }

    /// A non-recording tape whose `stop_gradient` calls return `frozen` in order.
    pub fn replaying(frozen: Vec<Rc<Array>>) -> Self {
        Self::with_mode(false, StopMode::Replay(frozen, 0))
    }

    fn push(&self, op: Op, data: Rc<Array>, force: bool) -> Option<NodeRef> {
        let mut inner = self.inner.borrow_mut();
        if !inner.recording {
            return None;
        }
        if !force {
            let needs = match &op {
                Op::Leaf => true,
                Op::Unary(_, a)
                | Op::Transpose(a)
                | Op::Sum(a)
                | Op::Mean(a)
                | Op::SumAxis(a, _)
                | Op::Gather(a, _)
                | Op::Reshape(a) => a.node.is_some(),
                Op::Binary(_, a, b) | Op::MatMul(a, b) => a.node.is_some() || b.node.is_some(),
                Op::Concat(xs, _) => xs.iter().any(|x| x.node.is_some()),
            };
            if !needs {
                return None;
            }
        }
        let serial = inner.next_serial;
        inner.next_serial += 1;
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            serial,
            op,
            data,
            grad: None,
        });
        Some(NodeRef { index, serial })
    }

    fn validate(&self, node: NodeRef) -> Result<()> {
        let inner = self.inner.borrow();
        match inner.nodes.get(node.index) {
            Some(n) if n.serial == node.serial => Ok(()),
            _ => Err(AutodiffError::StaleNode),
        }
    }

    /// Propagates the gradient of a scalar `loss` back to every leaf it
    /// depends on. Leaf gradients accumulate across calls.
    pub fn backward(&self, loss: &Var<'_>) -> Result<()> {
        if loss.data.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss.data.shape().to_vec()));
        }
        let Some(root) = loss.node else {
            return Ok(());
        };
        self.validate(root)?;
        let mut leaf_grads: Vec<(usize, Array)> = Vec::new();
        {
            let inner = self.inner.borrow();
            let nodes = &inner.nodes;
            let mut adj: Vec<Option<Array>> = Vec::with_capacity(root.index + 1);
            adj.resize_with(root.index + 1, || None);
            adj[root.index] = Some(ArrayD::ones(loss.data.raw_dim()));
            for i in (0..=root.index).rev() {
                let Some(g) = adj[i].take() else { continue };
                let node = &nodes[i];
                propagate(node, g, &mut adj, &mut leaf_grads, i);
            }
        }
        let mut inner = self.inner.borrow_mut();
        for (i, g) in leaf_grads {
            let slot = &mut inner.nodes[i].grad;
            match slot {
                Some(acc) => *acc += &g,
                None => *slot = Some(g),
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Array>], operand: &Operand, g: Array) {
    if let Some(i) = operand.node {
        match &mut adj[i] {
            Some(acc) if acc.shape() == g.shape() => update_with(acc, &g, |a, g| *a += g),
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }
}

fn propagate(
    node: &Node,
    g: Array,
    adj: &mut [Option<Array>],
    leaf_grads: &mut Vec<(usize, Array)>,
    index: usize,
) {
    let y = &node.data;
    match &node.op {
        Op::Leaf => leaf_grads.push((index, g)),
        Op::Unary(kind, a) => {
            let x = &a.data;
            let ga = match *kind {
                UnaryKind::Tanh => {
                    let mut g = g;
                    update_with(&mut g, y, |g, y| *g *= 1.0 - y * y);
                    g
                }
                UnaryKind::Sigmoid => {
                    let mut g = g;
                    update_with(&mut g, y, |g, y| *g *= y * (1.0 - y));
                    g
                }
                UnaryKind::Abs => {
                    let mut g = g;
                    Zip::from(&mut g).and(&**x).for_each(|g, &x| {
                        *g *= if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    g
                }
                UnaryKind::Ln => {
                    let mut g = g;
                    update_with(&mut g, x, |g, x| *g /= x);
                    g
                }
                UnaryKind::Exp => {
                    let mut g = g;
                    update_with(&mut g, y, |g, y| *g *= y);
                    g
                }
                UnaryKind::Square => {
                    let mut g = g;
                    update_with(&mut g, x, |g, x| *g *= 2.0 * x);
                    g
                }
                UnaryKind::Sqrt => {
                    let mut g = g;
                    update_with(&mut g, y, |g, y| *g *= 0.5 / y);
                    g
                }
                UnaryKind::Neg => -g,
                UnaryKind::Scale(c) => g * c,
                UnaryKind::Offset(_) => g,
            };
            accumulate(adj, a, ga);
        }
        Op::Binary(kind, a, b) => {
            let (ga, gb) = match kind {
                BinaryKind::Add | BinaryKind::Sub => {
                    let (ga, gb) = match (a.node.is_some(), b.node.is_some()) {
                        (true, true) => (Some(g.clone()), Some(g)),
                        (true, false) => (Some(g), None),
                        (false, true) => (None, Some(g)),
                        (false, false) => (None, None),
                    };
                    let sign = |g: Array| if *kind == BinaryKind::Sub { -g } else { g };
                    (
                        ga.map(|g| reduce_to(g, a.data.shape())),
                        gb.map(|g| reduce_to(sign(g), b.data.shape())),
                    )
                }
                BinaryKind::Mul => (
                    a.node.map(|_| reduce_to(times(&g, &b.data), a.data.shape())),
                    b.node.map(|_| reduce_to(times(&g, &a.data), b.data.shape())),
                ),
                BinaryKind::Div => (
                    a.node.map(|_| reduce_to(&g / &*b.data, a.data.shape())),
                    b.node.map(|_| {
                        let t = -(&g * &**y) / &*b.data;
                        reduce_to(t, b.data.shape())
                    }),
                ),
            };
            if let Some(ga) = ga {
                accumulate(adj, a, ga);
            }
            if let Some(gb) = gb {
                accumulate(adj, b, gb);
            }
        }
        Op::MatMul(a, b) => {
            let am = a.data.view().into_dimensionality::<Ix2>().expect("matmul lhs");
            if b.data.ndim() == 1 {
                let bv = b.data.view().into_dimensionality::<Ix1>().expect("matvec rhs");
                let gv = g.view().into_dimensionality::<Ix1>().expect("matvec grad");
                if a.node.is_some() {
                    let outer = gv
                        .to_owned()
                        .insert_axis(Axis(1))
                        .dot(&bv.to_owned().insert_axis(Axis(0)));
                    accumulate(adj, a, outer.into_dyn());
                }
                if b.node.is_some() {
                    accumulate(adj, b, am.t().dot(&gv).into_dyn());
                }
            } else {
                let bm = b.data.view().into_dimensionality::<Ix2>().expect("matmul rhs");
                let gm = g.view().into_dimensionality::<Ix2>().expect("matmul grad");
                if a.node.is_some() {
                    accumulate(adj, a, gm.dot(&bm.t()).into_dyn());
                }
                if b.node.is_some() {
                    accumulate(adj, b, am.t().dot(&gm).into_dyn());
                }
            }
        }
        Op::Transpose(a) => {
            accumulate(adj, a, g.reversed_axes().as_standard_layout().to_owned());
        }
        Op::Sum(a) => {
            let s = g.iter().next().copied().unwrap_or(0.0);
            accumulate(adj, a, ArrayD::from_elem(a.data.raw_dim(), s));
        }
        Op::Mean(a) => {
            let n = a.data.len().max(1) as f64;
            let s = g.iter().next().copied().unwrap_or(0.0) / n;
            accumulate(adj, a, ArrayD::from_elem(a.data.raw_dim(), s));
        }
        Op::SumAxis(a, axis) => {
            let expanded = g.insert_axis(Axis(*axis));
            let full = expanded
                .broadcast(a.data.raw_dim())
                .expect("sum-axis broadcast")
                .to_owned();
            accumulate(adj, a, full);
        }
        Op::Concat(parts, axis) => {
            let mut start = 0;
            for p in parts {
                let len = p.data.shape()[*axis];
                if p.node.is_some() {
                    let piece = g
                        .slice_axis(Axis(*axis), ndarray::Slice::from(start..start + len))
                        .to_owned();
                    accumulate(adj, p, piece);
                }
                start += len;
            }
        }
        Op::Gather(a, indices) => {
            let mut out = ArrayD::zeros(a.data.raw_dim());
            let g = g.as_standard_layout();
            let width = if indices.is_empty() { 0 } else { g.len() / indices.len() };
            let (dst, src) = (out.as_slice_mut().expect("fresh array"), g.as_slice().expect("standard layout"));
            for (row, &i) in indices.iter().enumerate() {
                for (d, s) in dst[i * width..(i + 1) * width].iter_mut().zip(&src[row * width..(row + 1) * width]) {
                    *d += s;
                }
            }
            accumulate(adj, a, out);
        }
        Op::Reshape(a) => {
            let shaped = g
                .as_standard_layout()
                .into_owned()
                .into_shape_with_order(a.data.raw_dim())
                .expect("reshape grad");
            accumulate(adj, a, shaped);
        }
    }
}

/// `f(a_i, b_i)` for equally shaped arrays.
fn map2(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    match (a.as_slice(), b.as_slice()) {
        (Some(x), Some(y)) => {
            let data = x.iter().zip(y).map(|(&x, &y)| f(x, y)).collect();
            ArrayD::from_shape_vec(a.raw_dim(), data).expect("same length")
        }
        _ => Zip::from(a).and(b).map_collect(|&x, &y| f(x, y)),
    }
}

/// Applies `f(g_i, v_i)` in place for equally shaped arrays.
fn update_with(g: &mut Array, v: &Array, f: impl Fn(&mut f64, f64)) {
    if let Some(vs) = v.as_slice() {
        if let Some(gs) = g.as_slice_mut() {
            gs.iter_mut().zip(vs).for_each(|(g, &v)| f(g, v));
            return;
        }
    }
    Zip::from(g).and(v).for_each(|g, &v| f(g, v));
}

/// Product of `g` with `v`, where `v` broadcasts to `g`'s shape.
fn times(g: &Array, v: &Array) -> Array {
    if g.shape() == v.shape() {
        map2(g, v, |a, b| a * b)
    } else {
        g * v
    }
}

/// Sums `g` down to `shape`, undoing right-aligned broadcasting.
fn reduce_to(g: Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g;
    }
    let mut out = g;
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn check_rank(a: &Array) -> Result<()> {
    if a.ndim() > MAX_RANK {
        Err(AutodiffError::RankTooHigh(a.ndim()))
    } else {
        Ok(())
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Forward value.
    pub fn data(&self) -> &Array {
        &self.data
    }

    pub fn data_rc(&self) -> Rc<Array> {
        self.data.clone()
    }

    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Whether gradients flow into this value.
    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Node id on the tape, `None` for constants.
    pub fn node_id(&self) -> Option<usize> {
        self.node.map(|n| n.index)
    }

    /// The single element of a one-element value.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data.iter().next().copied().unwrap_or(f64::NAN)
    }

    /// Contents as a flat vector in logical order.
    pub fn to_vec(&self) -> Vec<f64> {
        self.data.iter().copied().collect()
    }

    pub fn grad(&self) -> Option<Array> {
        self.tape.grad(self)
    }

    fn operand(&self) -> Operand {
        Operand {
            node: self.node.map(|n| n.index),
            data: self.data.clone(),
        }
    }

    fn wrap(&self, op: Op, data: Array) -> Var<'t> {
        let data = Rc::new(data);
        let node = self.tape.push(op, data.clone(), false);
        Var {
            tape: self.tape,
            node,
            data,
        }
    }

    fn unary(&self, kind: UnaryKind, f: impl Fn(f64) -> f64) -> Var<'t> {
        let out = self.data.mapv(f);
        self.wrap(Op::Unary(kind, self.operand()), out)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        kind: BinaryKind,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (&*self.data, &*other.data);
        let out = if a.shape() == b.shape() {
            map2(a, b, f)
        } else {
            let shape = broadcast_shape(name, a.shape(), b.shape())?;
            let av = a.broadcast(IxDyn(&shape)).expect("checked broadcast");
            let bv = b.broadcast(IxDyn(&shape)).expect("checked broadcast");
            Zip::from(&av).and(&bv).map_collect(|&x, &y| f(x, y))
        };
        Ok(self.wrap(Op::Binary(kind, self.operand(), other.operand()), out))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Add, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Sub, "subtract", |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Mul, "multiply", |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, BinaryKind::Div, "divide", |a, b| a / b)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(UnaryKind::Tanh, tanh)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid, sigmoid)
    }

    /// Absolute value; the subgradient at 0 is 0.
    pub fn abs(&self) -> Var<'t> {
        self.unary(UnaryKind::Abs, f64::abs)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(UnaryKind::Ln, f64::ln)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(UnaryKind::Exp, f64::exp)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(UnaryKind::Square, |x| x * x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt, f64::sqrt)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(UnaryKind::Neg, |x| -x)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Scale(c), move |x| x * c)
    }

    pub fn offset(&self, c: f64) -> Var<'t> {
        self.unary(UnaryKind::Offset(c), move |x| x + c)
    }

    /// Matrix-matrix (`[m,k]·[k,n]`) or matrix-vector (`[m,k]·[k]`) product.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (&*self.data, &*other.data);
        let mismatch = || AutodiffError::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        if a.ndim() != 2 || !(b.ndim() == 1 || b.ndim() == 2) || a.shape()[1] != b.shape()[0] {
            return Err(mismatch());
        }
        let am = a.view().into_dimensionality::<Ix2>().map_err(|_| mismatch())?;
        let out = if b.ndim() == 1 {
            let bv = b.view().into_dimensionality::<Ix1>().map_err(|_| mismatch())?;
            am.dot(&bv).into_dyn()
        } else {
            let bm = b.view().into_dimensionality::<Ix2>().map_err(|_| mismatch())?;
            am.dot(&bm).into_dyn()
        };
        Ok(self.wrap(Op::MatMul(self.operand(), other.operand()), out))
    }

    pub fn transpose(&self) -> Result<Var<'t>> {
        if self.data.ndim() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "transpose",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let out = self.data.t().as_standard_layout().to_owned();
        Ok(self.wrap(Op::Transpose(self.operand()), out))
    }

    /// Sum of all elements, as a rank-0 value.
    pub fn sum(&self) -> Var<'t> {
        let out = ArrayD::from_elem(IxDyn(&[]), self.data.sum());
        self.wrap(Op::Sum(self.operand()), out)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.data.len().max(1) as f64;
        let out = ArrayD::from_elem(IxDyn(&[]), self.data.sum() / n);
        self.wrap(Op::Mean(self.operand()), out)
    }

    /// Sum along one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        if axis >= self.data.ndim() {
            return Err(AutodiffError::ShapeMismatch {
                op: "sum-axis",
                lhs: self.shape().to_vec(),
                rhs: vec![axis],
            });
        }
        let out = self.data.sum_axis(Axis(axis));
        Ok(self.wrap(Op::SumAxis(self.operand(), axis), out))
    }

    /// Concatenates values along `axis`.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(AutodiffError::ShapeMismatch {
            op: "concatenate",
            lhs: vec![],
            rhs: vec![],
        })?;
        for p in parts {
            let ok = p.data.ndim() == first.data.ndim()
                && axis < p.data.ndim()
                && p
                    .shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concatenate",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).map_err(|_| {
            AutodiffError::ShapeMismatch {
                op: "concatenate",
                lhs: first.shape().to_vec(),
                rhs: vec![],
            }
        })?;
        let ops = parts.iter().map(Var::operand).collect();
        Ok(first.wrap(Op::Concat(ops, axis), out))
    }

    /// Selects entries along axis 0. Duplicate indices are allowed; their
    /// gradients accumulate.
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        if self.data.ndim() == 0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: vec![],
                rhs: vec![indices.len()],
            });
        }
        let len = self.data.shape()[0];
        if let Some(&bad) = indices.iter().find(|&&i| i >= len) {
            return Err(AutodiffError::IndexOutOfRange {
                op: "gather",
                index: bad,
                len,
            });
        }
        let out = match self.data.as_slice() {
            Some(src) => {
                let width = if len == 0 { 0 } else { src.len() / len };
                let mut data = Vec::with_capacity(indices.len() * width);
                for &i in indices {
                    data.extend_from_slice(&src[i * width..(i + 1) * width]);
                }
                let mut shape = self.data.shape().to_vec();
                shape[0] = indices.len();
                ArrayD::from_shape_vec(shape, data).expect("gathered rows fill the shape")
            }
            None => self.data.select(Axis(0), indices),
        };
        Ok(self.wrap(Op::Gather(self.operand(), indices.into()), out))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let size: usize = shape.iter().product();
        if size != self.data.len() || shape.len() > MAX_RANK {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self
            .data
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("checked reshape");
        Ok(self.wrap(Op::Reshape(self.operand()), out))
    }

    /// Passes the data through and blocks all gradient flow.
    pub fn stop_gradient(&self) -> Result<Var<'t>> {
        let mut inner = self.tape.inner.borrow_mut();
        let data = match &mut inner.stops {
            StopMode::Pass => self.data.clone(),
            StopMode::Record(values) => {
                values.push(self.data.clone());
                self.data.clone()
            }
            StopMode::Replay(values, cursor) => {
                let v = values
                    .get(*cursor)
                    .cloned()
                    .ok_or(AutodiffError::ReplayExhausted(*cursor))?;
                *cursor += 1;
                v
            }
        };
        Ok(Var {
            tape: self.tape,
            node: None,
            data,
        })
    }

    /// `log Σ exp(x)` over all elements, stabilised by the maximum.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        let m = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !m.is_finite() {
            // All -inf (or some +inf/NaN): the plain formula gives the right
            // limit and there is nothing to stabilise.
            return Ok(self.exp().sum().ln());
        }
        let shift = self.tape.scalar(m);
        Ok(self.sub(&shift)?.exp().sum().ln().offset(m))
    }

    /// Row-wise `log Σ exp` over the last axis of a rank-2 value.
    pub fn logsumexp_rows(&self) -> Result<Var<'t>> {
        if self.data.ndim() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "logsumexp-rows",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let maxes: Array = self
            .data
            .map_axis(Axis(1), |row| {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if m.is_finite() {
                    m
                } else {
                    0.0
                }
            })
            .into_dyn();
        let shift = self.tape.constant(maxes.clone().insert_axis(Axis(1)))?;
        let lse = self.sub(&shift)?.exp().sum_axis(1)?.ln();
        lse.add(&self.tape.constant(maxes)?)
    }
}

/// `tanh` through one `exp` away from zero, where the libm routine is
/// several times slower; absolute error stays below 1e-15.
pub fn tanh(x: f64) -> f64 {
    if x.abs() < 0.5 {
        x.tanh()
    } else {
        1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
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

/// One-hot rows for the given indices: shape `[indices.len(), width]`.
pub fn one_hot(indices: &[usize], width: usize) -> Array {
    let mut out = Array2::<f64>::zeros((indices.len(), width));
    for (row, &k) in indices.iter().enumerate() {
        out[[row, k]] = 1.0;
    }
    out.into_dyn()
}

/// Compares reverse-mode gradients of `f` at `point` against central finite
/// differences and returns the largest relative error
/// `|analytic - numeric| / max(1, |numeric|)` over all coordinates.
///
/// Values passed through `stop_gradient` during the analytic pass are held
/// fixed during the perturbed evaluations, so functions with blocked
/// gradient paths are checked against the derivative they claim to compute.
/// `f` must be deterministic.
pub fn gradient_check<F, E>(f: F, point: &[Array], step: f64) -> std::result::Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> std::result::Result<Var<'t>, E>,
    E: From<AutodiffError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let tape = Tape::new();
    tape.record_stops();
    let inputs = point
        .iter()
        .map(|p| tape.param(p.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &inputs)?;
    if out.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(out.shape().to_vec()).into());
    }
    if !out.item().is_finite() {
        return Err(AutodiffError::NonFinite("function value at the base point".into()).into());
    }
    tape.backward(&out)?;
    let analytic: Vec<Array> = inputs
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| ArrayD::zeros(v.data.raw_dim())))
        .collect();
    let frozen = tape.take_recorded_stops();

    let eval = |shifted: &[Array]| -> std::result::Result<f64, E> {
        let t = Tape::replaying(frozen.clone());
        let vars = shifted
            .iter()
            .map(|p| t.constant(p.clone()))
            .collect::<Result<Vec<_>>>()?;
        let v = f(&t, &vars)?.item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AutodiffError::NonFinite("function value at a perturbed point".into()).into())
        }
    };

    let mut worst = 0.0f64;
    let mut shifted: Vec<Array> = point.to_vec();
    for (i, p) in point.iter().enumerate() {
        for j in 0..p.len() {
            let base = flat(p, j);
            set_flat(&mut shifted[i], j, base + step);
            let plus = eval(&shifted)?;
            set_flat(&mut shifted[i], j, base - step);
            let minus = eval(&shifted)?;
            set_flat(&mut shifted[i], j, base);
            let numeric = (plus - minus) / (2.0 * step);
            let a = flat(&analytic[i], j);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn flat(a: &Array, j: usize) -> f64 {
    a.iter().nth(j).copied().unwrap_or(0.0)
}

fn set_flat(a: &mut Array, j: usize, v: f64) {
    if let Some(x) = a.iter_mut().nth(j) {
        *x = v;
    }
}
