//! Reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Node ids are
//! assigned in creation order, so the id order is a topological order and
//! [`Tape::backward`] visits nodes from the loss down to the leaves exactly once,
//! accumulating parent gradients additively.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut ParentGrads<'_>)>;

/// Gradient accumulators for the parents of the node being differentiated.
/// Backward functions add into these slots; buffers are allocated lazily.
pub(crate) struct ParentGrads<'a> {
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &'a [Node],
    parents: &'a [usize],
}

impl ParentGrads<'_> {
    /// Whether parent `k` needs a gradient at all.
    pub(crate) fn wants(&self, k: usize) -> bool {
        self.nodes[self.parents[k]].requires_grad
    }

    /// Accumulator for parent `k`. Only call when `wants(k)`.
    pub(crate) fn slot(&mut self, k: usize) -> &mut [f64] {
        let p = self.parents[k];
        let len = self.nodes[p].value.len();
        self.grads[p].get_or_insert_with(|| vec![0.0; len])
    }

    pub(crate) fn add(&mut self, k: usize, g: &[f64]) {
        if self.wants(k) {
            self.slot(k).iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

struct Node {
    shape: Vec<usize>,
    value: Rc<Vec<f64>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

pub struct Tape {
    id: usize,
    nodes: RefCell<Vec<Node>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("tape", &self.tape.id)
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every node on the tape.
pub struct Gradients {
    tape_id: usize,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<usize>,
}

impl Gradients {
    /// Gradient of `var`; `None` when the node does not require grad or the
    /// loss does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        assert_eq!(var.tape.id, self.tape_id, "gradient lookup on a foreign tape");
        self.grads[var.id].as_deref()
    }

    /// Gradient of `var`, with zeros standing in for "no dependence".
    pub fn get_or_zeros(&self, var: Var<'_>) -> Vec<f64> {
        self.get(var)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; self.shapes[var.id]])
    }

    /// Stores the gradient of `var` into `tensor.grad`.
    pub fn write_to(&self, var: Var<'_>, tensor: &mut Tensor) -> Result<()> {
        tensor.set_grad(self.get_or_zeros(var))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Records a tensor as a leaf; gradients are tracked iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_leaf(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            tensor.requires_grad(),
        )
    }

    pub fn constant(&self, shape: Vec<usize>, data: Vec<f64>) -> Var<'_> {
        assert_eq!(numel(&shape), data.len(), "constant shape/data mismatch");
        self.push_leaf(shape, data, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(vec![1], vec![value])
    }

    fn push_leaf(&self, shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value: Rc::new(data),
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a derived node. `backward` maps the output gradient to one
    /// optional gradient per parent and is only kept when some parent
    /// requires grad.
    pub(crate) fn push_op(
        &self,
        parents: &[Var<'_>],
        shape: Vec<usize>,
        value: Rc<Vec<f64>>,
        backward: BackwardFn,
    ) -> Var<'_> {
        debug_assert_eq!(numel(&shape), value.len());
        for p in parents {
            assert_eq!(
                p.tape.id, self.id,
                "graph error: operands recorded on different tapes"
            );
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            shape,
            value,
            parents: parents.iter().map(|p| p.id).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if loss.tape.id != self.id {
            return Err(Error::Graph("loss was not recorded on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        if !root.value[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", root.value[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let mut slots = ParentGrads {
                grads: &mut grads,
                nodes: &nodes,
                parents: &node.parents,
            };
            backward(&upstream, &mut slots);
            // keep gradients of leaves and of the loss itself
            grads[id] = Some(upstream);
        }
        for (id, node) in nodes.iter().enumerate() {
            if !node.requires_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients {
            tape_id: self.id,
            grads,
            shapes: nodes.iter().map(|n| n.value.len()).collect(),
        })
    }
}

fn map_unary<'t>(
    x: Var<'t>,
    f: impl Fn(f64) -> f64,
    // derivative given (input, output)
    df: impl Fn(f64, f64) -> f64 + 'static,
) -> Var<'t> {
    let xv = x.value();
    let out = Rc::new(xv.iter().map(|&v| f(v)).collect::<Vec<_>>());
    let out_c = Rc::clone(&out);
    x.tape.push_op(
        &[x],
        x.shape(),
        out,
        Box::new(move |g, pg| {
            let slot = pg.slot(0);
            for (((s, g), &i), &o) in slot.iter_mut().zip(g).zip(xv.iter()).zip(out_c.iter()) {
                *s += g * df(i, o);
            }
        }),
    )
}

fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v + (-v).exp()
    } else {
        v.exp().ln_1p()
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn item(&self) -> f64 {
        let v = self.value();
        assert_eq!(v.len(), 1, "item() on a non-scalar");
        v[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape(), self.value().as_ref().clone()).expect("node shape is consistent")
    }

    /// Same value, cut off from the graph.
    pub fn detach(self) -> Var<'t> {
        self.tape.constant(self.shape(), self.value().as_ref().clone())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Var<'t> {
        assert_eq!(numel(&shape), self.len(), "reshape changes element count");
        self.tape.push_op(
            &[self],
            shape,
            self.value(),
            Box::new(|g, pg| pg.add(0, g)),
        )
    }

    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Var<'t> {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        let (a, b) = (self.value(), other.value());
        let out = Rc::new(a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect());
        self.tape.push_op(
            &[self, other],
            self.shape(),
            out,
            Box::new(move |g, pg| {
                let (wa, wb) = (pg.wants(0), pg.wants(1));
                let mut ga = vec![0.0; if wa { g.len() } else { 0 }];
                let mut gb = vec![0.0; if wb { g.len() } else { 0 }];
                for (i, &gv) in g.iter().enumerate() {
                    let (da, db) = grads(gv, a[i], b[i]);
                    if wa {
                        ga[i] = da;
                    }
                    if wb {
                        gb[i] = db;
                    }
                }
                pg.add(0, &ga);
                pg.add(1, &gb);
            }),
        )
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |x, y| x / y, |g, x, y| (g / y, -g * x / (y * y)))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        map_unary(self, |v| c * v, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        map_unary(self, |v| v + c, |_, _| 1.0)
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn square(self) -> Var<'t> {
        map_unary(self, |v| v * v, |i, _| 2.0 * i)
    }

    pub fn sqrt(self) -> Var<'t> {
        map_unary(self, f64::sqrt, |_, o| if o > 0.0 { 0.5 / o } else { 0.0 })
    }

    pub fn exp(self) -> Var<'t> {
        map_unary(self, f64::exp, |_, o| o)
    }

    pub fn ln(self) -> Var<'t> {
        map_unary(self, f64::ln, |i, _| 1.0 / i)
    }

    pub fn tanh(self) -> Var<'t> {
        map_unary(self, f64::tanh, |_, o| 1.0 - o * o)
    }

    pub fn elu(self) -> Var<'t> {
        map_unary(
            self,
            |v| if v > 0.0 { v } else { v.exp_m1() },
            |i, o| if i > 0.0 { 1.0 } else { o + 1.0 },
        )
    }

    pub fn softplus(self) -> Var<'t> {
        map_unary(self, softplus, |i, _| sigmoid(i))
    }

    pub fn sum(self) -> Var<'t> {
        let v = self.value();
        let total: f64 = v.iter().sum();
        self.tape.push_op(
            &[self],
            vec![1],
            Rc::new(vec![total]),
            Box::new(move |g, pg| pg.slot(0).iter_mut().for_each(|s| *s += g[0])),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum of equally shaped vars.
    pub fn add_n(vars: &[Var<'t>]) -> Var<'t> {
        assert!(!vars.is_empty(), "add_n of nothing");
        let shape = vars[0].shape();
        let mut out = vec![0.0; numel(&shape)];
        for v in vars {
            assert_eq!(v.shape(), shape, "add_n shape mismatch");
            out.iter_mut().zip(v.value().iter()).for_each(|(a, b)| *a += b);
        }
        let k = vars.len();
        vars[0].tape.push_op(
            vars,
            shape,
            Rc::new(out),
            Box::new(move |g, pg| (0..k).for_each(|i| pg.add(i, g))),
        )
    }

    /// `[n,k] × [k,m] → [n,m]`.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let (sa, sb) = (self.shape(), other.shape());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} × {sb:?}"
        );
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let (a, b) = (self.value(), other.value());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &b[p * m..(p + 1) * m];
                row.iter_mut().zip(brow).for_each(|(o, &bv)| *o += aip * bv);
            }
        }
        self.tape.push_op(
            &[self, other],
            vec![n, m],
            Rc::new(out),
            Box::new(move |g, pg| {
                if pg.wants(0) {
                    let ga = pg.slot(0);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let brow = &b[p * m..(p + 1) * m];
                            ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
                if pg.wants(1) {
                    let gb = pg.slot(1);
                    for i in 0..n {
                        let grow = &g[i * m..(i + 1) * m];
                        for p in 0..k {
                            let aip = a[i * k + p];
                            gb[p * m..(p + 1) * m]
                                .iter_mut()
                                .zip(grow)
                                .for_each(|(o, &gv)| *o += aip * gv);
                        }
                    }
                }
            }),
        )
    }

    fn row_broadcast(
        self,
        row: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(f64, f64, f64) -> (f64, f64) + 'static,
    ) -> Var<'t> {
        let m = row.len();
        assert!(
            self.len() % m == 0 && *self.shape().last().unwrap() == m,
            "row broadcast shape mismatch"
        );
        let (a, b) = (self.value(), row.value());
        let out: Vec<f64> = a.iter().enumerate().map(|(i, &x)| f(x, b[i % m])).collect();
        self.tape.push_op(
            &[self, row],
            self.shape(),
            Rc::new(out),
            Box::new(move |g, pg| {
                let mut ga = vec![0.0; a.len()];
                let mut gb = vec![0.0; m];
                for (i, &gv) in g.iter().enumerate() {
                    let (da, db) = grads(gv, a[i], b[i % m]);
                    ga[i] = da;
                    gb[i % m] += db;
                }
                pg.add(0, &ga);
                pg.add(1, &gb);
            }),
        )
    }

    /// Adds a length-`m` vector to every row of an `[.., m]` tensor.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.row_broadcast(row, |x, y| x + y, |g, _, _| (g, g))
    }

    pub fn sub_row(self, row: Var<'t>) -> Var<'t> {
        self.row_broadcast(row, |x, y| x - y, |g, _, _| (g, -g))
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.row_broadcast(row, |x, y| x * y, |g, x, y| (g * y, g * x))
    }

    pub fn div_row(self, row: Var<'t>) -> Var<'t> {
        self.row_broadcast(row, |x, y| x / y, |g, x, y| (g / y, -g * x / (y * y)))
    }

    /// Column sums of a `[n, m]` tensor.
    pub fn sum_rows(self) -> Var<'t> {
        let shape = self.shape();
        let m = *shape.last().unwrap();
        let v = self.value();
        let mut out = vec![0.0; m];
        for (i, &x) in v.iter().enumerate() {
            out[i % m] += x;
        }
        self.tape.push_op(
            &[self],
            vec![m],
            Rc::new(out),
            Box::new(move |g, pg| {
                for (i, s) in pg.slot(0).iter_mut().enumerate() {
                    *s += g[i % m];
                }
            }),
        )
    }

    pub fn mean_rows(self) -> Var<'t> {
        let rows = self.len() / self.shape().last().unwrap();
        self.sum_rows().scale(1.0 / rows as f64)
    }

    fn extreme_rows(self, pick_max: bool) -> Var<'t> {
        let m = *self.shape().last().unwrap();
        let v = self.value();
        let mut arg = vec![usize::MAX; m];
        for (i, &x) in v.iter().enumerate() {
            let c = i % m;
            let better = arg[c] == usize::MAX
                || if pick_max { x > v[arg[c]] } else { x < v[arg[c]] };
            if better {
                arg[c] = i;
            }
        }
        let out = arg.iter().map(|&i| v[i]).collect();
        self.tape.push_op(
            &[self],
            vec![m],
            Rc::new(out),
            Box::new(move |g, pg| {
                let gx = pg.slot(0);
                for (c, &i) in arg.iter().enumerate() {
                    gx[i] += g[c];
                }
            }),
        )
    }

    /// Column maxima; the gradient goes to the first maximizing row.
    pub fn max_rows(self) -> Var<'t> {
        self.extreme_rows(true)
    }

    pub fn min_rows(self) -> Var<'t> {
        self.extreme_rows(false)
    }

    /// Columns `start..start + len` of a `[n, w]` matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let shape = self.shape();
        assert!(shape.len() == 2 && start + len <= shape[1], "column slice out of range");
        let (n, w) = (shape[0], shape[1]);
        let v = self.value();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&v[i * w + start..i * w + start + len]);
        }
        self.tape.push_op(
            &[self],
            vec![n, len],
            Rc::new(out),
            Box::new(move |g, pg| {
                let gx = pg.slot(0);
                for i in 0..n {
                    gx[i * w + start..i * w + start + len]
                        .iter_mut()
                        .zip(&g[i * len..(i + 1) * len])
                        .for_each(|(a, b)| *a += b);
                }
            }),
        )
    }

    /// Gathers rows along the leading axis.
    pub fn select_rows(self, indices: &[usize]) -> Var<'t> {
        let mut shape = self.shape();
        let rows = shape[0];
        let width = self.len() / rows;
        let v = self.value();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            assert!(i < rows, "row {i} out of range {rows}");
            out.extend_from_slice(&v[i * width..(i + 1) * width]);
        }
        shape[0] = indices.len();
        let idx = indices.to_vec();
        self.tape.push_op(
            &[self],
            shape,
            Rc::new(out),
            Box::new(move |g, pg| {
                let gx = pg.slot(0);
                for (r, &i) in idx.iter().enumerate() {
                    gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[r * width..(r + 1) * width])
                        .for_each(|(a, b)| *a += b);
                }
            }),
        )
    }
}
