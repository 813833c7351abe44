//! Gradient tape: an append-only record of primitive operations.
//!
//! Creation order of nodes is a topological order of the computation graph,
//! so the backward pass is a single reverse sweep over the arena. A tape can
//! be consumed by [`backward`] exactly once.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::error::NumericsError;
use super::tensor::Tensor;

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// One operand of a recorded operation: its forward value and, when the
/// operand was itself tracked, the arena index to route gradient into.
#[derive(Clone)]
pub(crate) struct Operand {
    pub data: Arc<Vec<f64>>,
    pub node: Option<usize>,
}

impl Operand {
    pub(crate) fn of(t: &Tensor, tape: &Tape) -> Operand {
        let node = match t.node_ref() {
            Some(r) => {
                assert_eq!(
                    r.tape.id(),
                    tape.id(),
                    "operands tracked on different tapes cannot be combined"
                );
                Some(r.id)
            }
            None => None,
        };
        Operand { data: Arc::clone(&t.data), node }
    }
}

pub(crate) enum Op {
    Leaf,
    Add { a: Operand, b: Operand },
    Sub { a: Operand, b: Operand },
    Mul { a: Operand, b: Operand },
    Neg { x: Operand },
    Scale { x: Operand, c: f64 },
    /// y = W x with W: [m, n], x: [n].
    MatVec { w: Operand, x: Operand, m: usize, n: usize },
    /// y = A Bᵀ with A: [r, k], B: [c, k], y: [r, c].
    MatMulNT { a: Operand, b: Operand, r: usize, k: usize, c: usize },
    /// 3x3 cross-correlation, stride 1, zero padding 1.
    Conv2d { x: Operand, k: Operand, b: Operand, ch: usize, h: usize, w: usize, f: usize },
    Sigmoid { x: Operand },
    Tanh { x: Operand },
    Relu { x: Operand },
    Exp { x: Operand },
    Ln { x: Operand },
    Recip { x: Operand },
    Sum { x: Operand },
    Mean { x: Operand },
    Dot { a: Operand, b: Operand },
    Concat { parts: Vec<Operand> },
    StackRows { rows: Vec<Operand>, cols: usize },
    PickElement { x: Operand, idx: usize },
    LogSoftmax { x: Operand },
    RowLogSoftmax { x: Operand, r: usize, c: usize },
    /// Per-row log-sum-exp over unmasked columns; mask length r*c.
    RowLogSumExpMasked { x: Operand, mask: Arc<Vec<bool>>, r: usize, c: usize },
    /// Each row divided by its Euclidean norm.
    RowNormalize { x: Operand, r: usize, c: usize },
    /// Scalar Σ w_i x_i with constant weights.
    WeightedSum { x: Operand, w: Arc<Vec<f64>> },
    /// Elementwise product with a tracked scalar.
    MulScalar { x: Operand, s: Operand },
    /// x: [r, c] plus b: [c] added to every row.
    AddRowBroadcast { x: Operand, b: Operand, r: usize, c: usize },
    Abs { x: Operand },
    Reshape { x: Operand },
}

pub(crate) struct Node {
    pub value: Arc<Vec<f64>>,
    pub op: Op,
}

pub(crate) struct TapeInner {
    pub nodes: Vec<Node>,
    pub consumed: bool,
}

/// Cloneable handle to a recording tape. Confined to one thread.
#[derive(Clone)]
pub struct Tape {
    pub(crate) inner: Rc<RefCell<TapeInner>>,
    id: u64,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    pub tape: Tape,
    pub id: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner { nodes: Vec::new(), consumed: false })),
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_consumed(&self) -> bool {
        self.inner.borrow().consumed
    }

    /// Register a tensor as a tracked leaf on this tape.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = self.push(Arc::clone(&t.data), Op::Leaf);
        Tensor {
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
            node: Some(NodeRef { tape: self.clone(), id }),
        }
    }

    pub(crate) fn push(&self, value: Arc<Vec<f64>>, op: Op) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        inner.nodes.len() - 1
    }
}

/// Per-node gradients produced by [`backward`].
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` is tracked on the
    /// consumed tape and received any gradient.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let r = t.node_ref()?;
        if r.tape.id() != self.tape_id {
            return None;
        }
        self.grads.get(r.id)?.as_deref()
    }

    /// Gradient as above, densified to zeros when absent.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; t.len()])
    }
}

/// Reverse sweep from a scalar loss. Every tracked leaf reachable from the
/// loss receives dLoss/dLeaf; the tape is consumed.
pub fn backward(loss: &Tensor) -> Result<Gradients, NumericsError> {
    let node = loss.node_ref().ok_or(NumericsError::UntrackedLoss)?;
    if loss.len() != 1 {
        return Err(NumericsError::NonScalarLoss { shape: loss.shape().to_vec() });
    }
    let tape = node.tape.clone();
    {
        let mut inner = tape.inner.borrow_mut();
        if inner.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        inner.consumed = true;
    }

    let inner = tape.inner.borrow();
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; inner.nodes.len()];
    grads[node.id] = Some(vec![1.0]);

    for id in (0..=node.id).rev() {
        let Some(g) = grads[id].take() else { continue };
        let n = &inner.nodes[id];
        backward_op(n, &g, &mut grads);
        // Leaves keep their gradient; interior nodes can drop theirs.
        if matches!(n.op, Op::Leaf) {
            grads[id] = Some(g);
        }
    }
    Ok(Gradients { tape_id: tape.id(), grads })
}

fn acc(grads: &mut [Option<Vec<f64>>], opd: &Operand, f: impl FnOnce(&mut [f64])) {
    if let Some(id) = opd.node {
        let buf = grads[id].get_or_insert_with(|| vec![0.0; opd.data.len()]);
        f(buf);
    }
}

fn backward_op(node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(grads, b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
        Op::Sub { a, b } => {
            acc(grads, a, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(grads, b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Mul { a, b } => {
            acc(grads, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * b.data[i];
                }
            });
            acc(grads, b, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * a.data[i];
                }
            });
        }
        Op::Neg { x } => {
            acc(grads, x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
        }
        Op::Scale { x, c } => {
            acc(grads, x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += c * g));
        }
        Op::MatVec { w, x, m, n } => {
            let (m, n) = (*m, *n);
            acc(grads, w, |d| {
                for i in 0..m {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &mut d[i * n..(i + 1) * n];
                    for (dj, xj) in row.iter_mut().zip(x.data.iter()) {
                        *dj += gi * xj;
                    }
                }
            });
            acc(grads, x, |d| {
                for i in 0..m {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    let row = &w.data[i * n..(i + 1) * n];
                    for (dj, wj) in d.iter_mut().zip(row.iter()) {
                        *dj += gi * wj;
                    }
                }
            });
        }
        Op::MatMulNT { a, b, r, k, c } => {
            let (r, k, c) = (*r, *k, *c);
            // dA = G @ B, dB = Gᵀ @ A
            acc(grads, a, |d| {
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let drow = &mut d[i * k..(i + 1) * k];
                    for (j, &gij) in grow.iter().enumerate() {
                        if gij == 0.0 {
                            continue;
                        }
                        let brow = &b.data[j * k..(j + 1) * k];
                        for (dv, bv) in drow.iter_mut().zip(brow.iter()) {
                            *dv += gij * bv;
                        }
                    }
                }
            });
            acc(grads, b, |d| {
                for i in 0..r {
                    let grow = &g[i * c..(i + 1) * c];
                    let arow = &a.data[i * k..(i + 1) * k];
                    for (j, &gij) in grow.iter().enumerate() {
                        if gij == 0.0 {
                            continue;
                        }
                        let drow = &mut d[j * k..(j + 1) * k];
                        for (dv, av) in drow.iter_mut().zip(arow.iter()) {
                            *dv += gij * av;
                        }
                    }
                }
            });
        }
        Op::Conv2d { x, k, b, ch, h, w, f } => {
            let (ch, h, w, f) = (*ch, *h, *w, *f);
            acc(grads, b, |d| {
                for fi in 0..f {
                    d[fi] += g[fi * h * w..(fi + 1) * h * w].iter().sum::<f64>();
                }
            });
            acc(grads, k, |d| {
                for fi in 0..f {
                    for c in 0..ch {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let mut s = 0.0;
                                for i in 0..h {
                                    let xi = i as isize + a as isize - 1;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    for j in 0..w {
                                        let xj = j as isize + bb as isize - 1;
                                        if xj < 0 || xj >= w as isize {
                                            continue;
                                        }
                                        s += g[(fi * h + i) * w + j]
                                            * x.data[(c * h + xi as usize) * w + xj as usize];
                                    }
                                }
                                d[((fi * ch + c) * 3 + a) * 3 + bb] += s;
                            }
                        }
                    }
                }
            });
            acc(grads, x, |d| {
                for fi in 0..f {
                    for c in 0..ch {
                        for a in 0..3 {
                            for bb in 0..3 {
                                let kv = k.data[((fi * ch + c) * 3 + a) * 3 + bb];
                                if kv == 0.0 {
                                    continue;
                                }
                                for i in 0..h {
                                    let xi = i as isize + a as isize - 1;
                                    if xi < 0 || xi >= h as isize {
                                        continue;
                                    }
                                    for j in 0..w {
                                        let xj = j as isize + bb as isize - 1;
                                        if xj < 0 || xj >= w as isize {
                                            continue;
                                        }
                                        d[(c * h + xi as usize) * w + xj as usize] +=
                                            g[(fi * h + i) * w + j] * kv;
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Op::Sigmoid { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            });
        }
        Op::Tanh { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            });
        }
        Op::Relu { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    if x.data[i] > 0.0 {
                        d[i] += g[i];
                    }
                }
            });
        }
        Op::Exp { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            });
        }
        Op::Ln { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] / x.data[i];
                }
            });
        }
        Op::Recip { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] -= g[i] * y[i] * y[i];
                }
            });
        }
        Op::Sum { x } => {
            acc(grads, x, |d| d.iter_mut().for_each(|d| *d += g[0]));
        }
        Op::Mean { x } => {
            let inv = 1.0 / x.data.len() as f64;
            acc(grads, x, |d| d.iter_mut().for_each(|d| *d += g[0] * inv));
        }
        Op::Dot { a, b } => {
            acc(grads, a, |d| {
                for i in 0..d.len() {
                    d[i] += g[0] * b.data[i];
                }
            });
            acc(grads, b, |d| {
                for i in 0..d.len() {
                    d[i] += g[0] * a.data[i];
                }
            });
        }
        Op::Concat { parts } => {
            let mut off = 0;
            for p in parts {
                let len = p.data.len();
                acc(grads, p, |d| {
                    for i in 0..len {
                        d[i] += g[off + i];
                    }
                });
                off += len;
            }
        }
        Op::StackRows { rows, cols } => {
            for (r, p) in rows.iter().enumerate() {
                let off = r * cols;
                acc(grads, p, |d| {
                    for i in 0..d.len() {
                        d[i] += g[off + i];
                    }
                });
            }
        }
        Op::PickElement { x, idx } => {
            let idx = *idx;
            acc(grads, x, |d| d[idx] += g[0]);
        }
        Op::LogSoftmax { x } => {
            // y = x − lse(x); dx_i = g_i − softmax_i · Σ g
            let gsum: f64 = g.iter().sum();
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] - y[i].exp() * gsum;
                }
            });
        }
        Op::RowLogSoftmax { x, r, c } => {
            let (r, c) = (*r, *c);
            acc(grads, x, |d| {
                for i in 0..r {
                    let row = i * c;
                    let gsum: f64 = g[row..row + c].iter().sum();
                    for j in 0..c {
                        d[row + j] += g[row + j] - y[row + j].exp() * gsum;
                    }
                }
            });
        }
        Op::RowLogSumExpMasked { x, mask, r, c } => {
            let (r, c) = (*r, *c);
            acc(grads, x, |d| {
                for i in 0..r {
                    let gi = g[i];
                    if gi == 0.0 {
                        continue;
                    }
                    for j in 0..c {
                        if mask[i * c + j] {
                            d[i * c + j] += gi * (x.data[i * c + j] - y[i]).exp();
                        }
                    }
                }
            });
        }
        Op::RowNormalize { x, r, c } => {
            let (r, c) = (*r, *c);
            acc(grads, x, |d| {
                for i in 0..r {
                    let xrow = &x.data[i * c..(i + 1) * c];
                    let yrow = &y[i * c..(i + 1) * c];
                    let grow = &g[i * c..(i + 1) * c];
                    let norm = xrow.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gy: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                    for j in 0..c {
                        d[i * c + j] += (grow[j] - gy * yrow[j]) / norm;
                    }
                }
            });
        }
        Op::WeightedSum { x, w } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[0] * w[i];
                }
            });
        }
        Op::MulScalar { x, s } => {
            let sv = s.data[0];
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * sv;
                }
            });
            acc(grads, s, |d| {
                d[0] += g.iter().zip(x.data.iter()).map(|(g, x)| g * x).sum::<f64>();
            });
        }
        Op::AddRowBroadcast { x, b, r, c } => {
            let (r, c) = (*r, *c);
            acc(grads, x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            acc(grads, b, |d| {
                for i in 0..r {
                    for j in 0..c {
                        d[j] += g[i * c + j];
                    }
                }
            });
        }
        Op::Abs { x } => {
            acc(grads, x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * x.data[i].signum() * if x.data[i] == 0.0 { 0.0 } else { 1.0 };
                }
            });
        }
        Op::Reshape { x } => {
            acc(grads, x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
        }
    }
}
