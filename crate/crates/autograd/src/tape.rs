//! Dynamic-graph reverse-mode differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order. Because the tape is append-only, reverse insertion order is a valid
//! topological order for the backward sweep.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use crate::kernels;
use crate::params::{ParamId, ParamStore};
use crate::{Result, Tensor, TensorError};

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow { x: usize, bias: usize },
    Scale(usize, f64),
    Softmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Gelu(usize),
    Silu(usize),
    Square(usize),
    Mean(usize),
    Sum(usize),
    MeanAbsDiff(usize, usize),
    Reshape(usize),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    GatherRows { x: usize, index: Vec<usize> },
    Unfold3x3 { x: usize, h: usize, w: usize },
    AvgPool2 { x: usize, h: usize, w: usize },
    Upsample2 { x: usize, h: usize, w: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder and gradient store for one forward/backward pass.
///
/// Not `Sync`: a tape and its variables stay on the thread that built them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
    bindings: RefCell<HashMap<ParamId, usize>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Nodes that cannot carry gradient never need their inputs again.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { tape: self, id }
    }

    /// Records a leaf value.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Binds a registry parameter to this tape, reusing the node if the
    /// parameter was already bound. Frozen parameters only track gradient when
    /// `grad_enabled` is set on them.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(&node) = self.bindings.borrow().get(&id) {
            return Var { tape: self, id: node };
        }
        let p = store.get(id);
        let var = self.leaf(p.value.clone(), p.trainable || p.grad_enabled);
        self.bindings.borrow_mut().insert(id, var.id);
        var
    }

    /// Parameter bindings made on this tape, as `(parameter, node)` pairs.
    pub fn bindings(&self) -> Vec<(ParamId, usize)> {
        let mut out: Vec<_> = self.bindings.borrow().iter().map(|(&p, &n)| (p, n)).collect();
        out.sort();
        out
    }

    pub(crate) fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Gradient of the last backward pass(es) with respect to `var`; zeros
    /// when `var` was not reached.
    pub fn grad(&self, var: Var<'_>) -> Tensor {
        let shape = self.value_ref(var.id).shape().to_vec();
        match self.grads.borrow().get(var.id) {
            Some(Some(g)) => Tensor::new(&shape, g.clone()).expect("grad shape"),
            _ => Tensor::zeros(&shape),
        }
    }

    /// Raw gradient buffer of a node, if any gradient reached it.
    pub fn grad_of_node(&self, node: usize) -> Option<Vec<f64>> {
        self.grads.borrow().get(node).cloned().flatten()
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate across calls
    /// until [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if !root.value.is_scalar() {
            return Err(TensorError::Contract {
                op: "backward",
                msg: format!("loss must be scalar, got shape {:?}", root.value.shape()),
            });
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        g[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gy) = g[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, &node.op, &node.value, &gy, &mut g);
            let mut store = self.grads.borrow_mut();
            if store.len() < nodes.len() {
                store.resize(nodes.len(), None);
            }
            match &mut store[id] {
                Some(acc) => acc.iter_mut().zip(&gy).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(gy),
            }
        }
        Ok(())
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat_rows",
            msg: "no parts".into(),
        })?;
        let cols = nodes[first.id].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.cols() != cols {
                return Err(shape_err("concat_rows", &nodes[first.id].value, v));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let value = Tensor::new(&[rows, cols], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        let nodes = self.nodes.borrow();
        let first = parts.first().ok_or(TensorError::Contract {
            op: "concat_cols",
            msg: "no parts".into(),
        })?;
        let rows = nodes[first.id].value.rows();
        let mut total = 0;
        for p in parts {
            let v = &nodes[p.id].value;
            if v.rows() != rows {
                return Err(shape_err("concat_cols", &nodes[first.id].value, v));
            }
            total += v.cols();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(nodes[p.id].value.row(r));
            }
        }
        let rg = parts.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(value, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg))
    }
}

/// Returns the gradient buffer for `id`, allocating zeros, or `None` if the
/// node does not track gradient.
fn slot<'g>(nodes: &[Node], g: &'g mut [Option<Vec<f64>>], id: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.numel();
    Some(g[id].get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &[Node], op: &Op, out: &Tensor, gy: &[f64], g: &mut [Option<Vec<f64>>]) {
    let val = |id: usize| &nodes[id].value;
    match op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, g, a) {
                // dA += dC · Bᵀ
                kernels::gemm_acc(m, n, k, gy, n as isize, 1, val(b).data(), 1, n as isize, ga);
            }
            if let Some(gb) = slot(nodes, g, b) {
                // dB += Aᵀ · dC
                kernels::gemm_acc(k, m, n, val(a).data(), 1, k as isize, gy, n as isize, 1, gb);
            }
        }
        &Op::MatMulNt { a, b, m, k, n } => {
            if let Some(ga) = slot(nodes, g, a) {
                // dA += dC · B
                kernels::gemm_acc(m, n, k, gy, n as isize, 1, val(b).data(), k as isize, 1, ga);
            }
            if let Some(gb) = slot(nodes, g, b) {
                // dB += dCᵀ · A
                kernels::gemm_acc(n, m, k, gy, 1, n as isize, val(a).data(), k as isize, 1, gb);
            }
        }
        &Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, g, a) {
                add_into(ga, gy);
            }
            if let Some(gb) = slot(nodes, g, b) {
                add_into(gb, gy);
            }
        }
        &Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, g, a) {
                add_into(ga, gy);
            }
            if let Some(gb) = slot(nodes, g, b) {
                gb.iter_mut().zip(gy).for_each(|(d, &s)| *d -= s);
            }
        }
        &Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, g, a) {
                let bv = val(b).data();
                for i in 0..gy.len() {
                    ga[i] += gy[i] * bv[i];
                }
            }
            if let Some(gb) = slot(nodes, g, b) {
                let av = val(a).data();
                for i in 0..gy.len() {
                    gb[i] += gy[i] * av[i];
                }
            }
        }
        &Op::AddRow { x, bias } => {
            if let Some(gx) = slot(nodes, g, x) {
                add_into(gx, gy);
            }
            if let Some(gb) = slot(nodes, g, bias) {
                let cols = gb.len();
                for row in gy.chunks(cols) {
                    add_into(gb, row);
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = slot(nodes, g, a) {
                ga.iter_mut().zip(gy).for_each(|(d, &s)| *d += c * s);
            }
        }
        &Op::Softmax(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                let cols = out.cols();
                for ((y, dy), dx) in out
                    .data()
                    .chunks(cols)
                    .zip(gy.chunks(cols))
                    .zip(ga.chunks_mut(cols))
                {
                    let dot: f64 = y.iter().zip(dy).map(|(p, q)| p * q).sum();
                    for j in 0..cols {
                        dx[j] += y[j] * (dy[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let cols = out.cols();
            let gv = val(*gain).data().to_vec();
            if let Some(gg) = slot(nodes, g, *gain) {
                for (dy, xh) in gy.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        gg[j] += dy[j] * xh[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, g, *bias) {
                for dy in gy.chunks(cols) {
                    add_into(gb, dy);
                }
            }
            if let Some(gx) = slot(nodes, g, *x) {
                let n = cols as f64;
                for (r, ((dy, xh), dx)) in gy
                    .chunks(cols)
                    .zip(xhat.chunks(cols))
                    .zip(gx.chunks_mut(cols))
                    .enumerate()
                {
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..cols {
                        let d = dy[j] * gv[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                    }
                    mean_d /= n;
                    mean_dx /= n;
                    let inv = inv_std[r];
                    for j in 0..cols {
                        let d = dy[j] * gv[j];
                        dx[j] += inv * (d - mean_d - xh[j] * mean_dx);
                    }
                }
            }
        }
        &Op::Gelu(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                for ((d, &s), &x) in ga.iter_mut().zip(gy).zip(val(a).data()) {
                    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
                    let t = u.tanh();
                    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
                    *d += s * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
                }
            }
        }
        &Op::Silu(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                for ((d, &s), &x) in ga.iter_mut().zip(gy).zip(val(a).data()) {
                    let sig = 1.0 / (1.0 + (-x).exp());
                    *d += s * (sig + x * sig * (1.0 - sig));
                }
            }
        }
        &Op::Square(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                for ((d, &s), &x) in ga.iter_mut().zip(gy).zip(val(a).data()) {
                    *d += 2.0 * x * s;
                }
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                let s = gy[0] / ga.len() as f64;
                ga.iter_mut().for_each(|d| *d += s);
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                ga.iter_mut().for_each(|d| *d += gy[0]);
            }
        }
        &Op::MeanAbsDiff(a, b) => {
            let n = val(a).numel() as f64;
            let signs: Vec<f64> = val(a)
                .data()
                .iter()
                .zip(val(b).data())
                .map(|(x, y)| sign(x - y) * gy[0] / n)
                .collect();
            if let Some(ga) = slot(nodes, g, a) {
                add_into(ga, &signs);
            }
            if let Some(gb) = slot(nodes, g, b) {
                gb.iter_mut().zip(&signs).for_each(|(d, s)| *d -= s);
            }
        }
        &Op::Reshape(a) => {
            if let Some(ga) = slot(nodes, g, a) {
                add_into(ga, gy);
            }
        }
        &Op::SliceCols { x, start } => {
            if let Some(gx) = slot(nodes, g, x) {
                let in_cols = val(x).cols();
                let out_cols = out.cols();
                for (r, dy) in gy.chunks(out_cols).enumerate() {
                    let base = r * in_cols + start;
                    add_into(&mut gx[base..base + out_cols], dy);
                }
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let cols = val(p).cols();
                if let Some(gp) = slot(nodes, g, p) {
                    for (r, dst) in gp.chunks_mut(cols).enumerate() {
                        add_into(dst, &gy[r * total + offset..r * total + offset + cols]);
                    }
                }
                offset += cols;
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = val(p).numel();
                if let Some(gp) = slot(nodes, g, p) {
                    add_into(gp, &gy[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::GatherRows { x, index } => {
            if let Some(gx) = slot(nodes, g, *x) {
                let cols = out.cols();
                for (i, &src) in index.iter().enumerate() {
                    add_into(&mut gx[src * cols..(src + 1) * cols], &gy[i * cols..(i + 1) * cols]);
                }
            }
        }
        &Op::Unfold3x3 { x, h, w } => {
            if let Some(gx) = slot(nodes, g, x) {
                kernels::fold3x3_acc(gy, h, w, val(x).cols(), gx);
            }
        }
        &Op::AvgPool2 { x, h, w } => {
            if let Some(gx) = slot(nodes, g, x) {
                kernels::avg_pool2_backward_acc(gy, h, w, val(x).cols(), gx);
            }
        }
        &Op::Upsample2 { x, h, w } => {
            if let Some(gx) = slot(nodes, g, x) {
                kernels::upsample2_backward_acc(gy, h, w, val(x).cols(), gx);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

/// Sign with the subgradient at zero defined as zero.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn tape(self) -> &'t Tape {
        self.tape
    }

    pub fn id(self) -> usize {
        self.id
    }

    /// Copy of the recorded value.
    pub fn value(self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.value_ref(self.id).shape().to_vec()
    }

    pub fn rows(self) -> usize {
        self.tape.value_ref(self.id).rows()
    }

    pub fn cols(self) -> usize {
        self.tape.value_ref(self.id).cols()
    }

    pub fn item(self) -> f64 {
        self.tape.value_ref(self.id).data()[0]
    }

    pub fn requires_grad(self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub fn grad(self) -> Tensor {
        self.tape.grad(self)
    }

    fn unary(self, f: impl FnOnce(&Tensor) -> Result<(Tensor, Op)>) -> Result<Var<'t>> {
        let (value, op) = f(&self.tape.value_ref(self.id))?;
        Ok(self.tape.push(value, op, self.requires_grad()))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<(Tensor, Op)>,
    ) -> Result<Var<'t>> {
        debug_assert!(std::ptr::eq(self.tape, rhs.tape), "vars from different tapes");
        let (value, op) = {
            let a = self.tape.value_ref(self.id);
            let b = self.tape.value_ref(rhs.id);
            f(&a, &b)?
        };
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.tape.push(value, op, rg))
    }

    fn elementwise(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, rhs.id);
        self.binary(rhs, |a, b| {
            if a.shape() != b.shape() {
                return Err(shape_err(name, a, b));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((Tensor::new(a.shape(), data)?, op(ia, ib)))
        })
    }

    /// `self[m×k] · rhs[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, rhs.id);
        self.binary(rhs, |a, b| {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.rows() {
                return Err(shape_err("matmul", a, b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.cols());
            let mut c = vec![0.0; m * n];
            kernels::gemm_acc(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1, &mut c);
            Ok((Tensor::new(&[m, n], c)?, Op::MatMul { a: ia, b: ib, m, k, n }))
        })
    }

    /// `self[m×k] · rhs[n×k]ᵀ`; the layout used by linear layers and `QKᵀ`.
    pub fn matmul_t(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, rhs.id);
        self.binary(rhs, |a, b| {
            if a.shape().len() != 2 || b.shape().len() != 2 || a.cols() != b.cols() {
                return Err(shape_err("matmul_t", a, b));
            }
            let (m, k, n) = (a.rows(), a.cols(), b.rows());
            let mut c = vec![0.0; m * n];
            kernels::gemm_acc(m, k, n, a.data(), k as isize, 1, b.data(), 1, k as isize, &mut c);
            Ok((Tensor::new(&[m, n], c)?, Op::MatMulNt { a: ia, b: ib, m, k, n }))
        })
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.elementwise(rhs, "mul", |x, y| x * y, Op::Mul)
    }

    /// Adds a vector of length `cols()` to every row.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let (ix, ib) = (self.id, bias.id);
        self.binary(bias, |x, b| {
            let cols = x.cols();
            if b.numel() != cols {
                return Err(shape_err("add_row", x, b));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                add_into(row, b.data());
            }
            Ok((Tensor::new(x.shape(), data)?, Op::AddRow { x: ix, bias: ib }))
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(|v| v * c), Op::Scale(id, c))))
    }

    /// Softmax along the last extent, stabilised by subtracting the row max.
    pub fn softmax(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let cols = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(cols) {
                kernels::softmax_in_place(row);
            }
            Ok((Tensor::new(x.shape(), data)?, Op::Softmax(id)))
        })
    }

    /// Per-row normalisation to zero mean / unit variance, then `gain ⊙ · + bias`.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let (cols, gv, bv) = {
            let x = self.tape.value_ref(self.id);
            let g = self.tape.value_ref(gain.id);
            let b = self.tape.value_ref(bias.id);
            if g.numel() != x.cols() {
                return Err(shape_err("layer_norm", &x, &g));
            }
            if b.numel() != x.cols() {
                return Err(shape_err("layer_norm", &x, &b));
            }
            (x.cols(), g.data().to_vec(), b.data().to_vec())
        };
        let (value, xhat, inv_std) = {
            let x = self.tape.value_ref(self.id);
            let mut xhat = vec![0.0; x.numel()];
            let mut out = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(x.rows());
            for (r, row) in x.data().chunks(cols).enumerate() {
                let n = cols as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                for j in 0..cols {
                    let xh = (row[j] - mean) * inv;
                    xhat[r * cols + j] = xh;
                    out[r * cols + j] = xh * gv[j] + bv[j];
                }
            }
            (Tensor::new(x.shape(), out)?, xhat, inv_std)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let v = x.map(|x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh()));
            Ok((v, Op::Gelu(id)))
        })
    }

    pub fn silu(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(|x| x / (1.0 + (-x).exp())), Op::Silu(id))))
    }

    pub fn square(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.map(|x| x * x), Op::Square(id))))
    }

    /// Mean of all elements, as a one-element tensor.
    pub fn mean(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let m = x.data().iter().sum::<f64>() / x.numel() as f64;
            Ok((Tensor::scalar(m), Op::Mean(id)))
        })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((Tensor::scalar(x.data().iter().sum()), Op::Sum(id))))
    }

    /// `(1/n) Σ |self − rhs|`, with subgradient 0 at ties.
    pub fn mean_abs_diff(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (ia, ib) = (self.id, rhs.id);
        self.binary(rhs, |a, b| {
            if a.shape() != b.shape() {
                return Err(shape_err("mean_abs_diff", a, b));
            }
            let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
            Ok((Tensor::scalar(s / a.numel() as f64), Op::MeanAbsDiff(ia, ib)))
        })
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| Ok((x.clone().reshape(shape)?, Op::Reshape(id))))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let cols = x.cols();
            if start + len > cols || len == 0 {
                return Err(TensorError::Index {
                    op: "slice_cols",
                    index: start + len,
                    extent: cols,
                });
            }
            let rows = x.rows();
            let mut data = Vec::with_capacity(rows * len);
            for r in 0..rows {
                data.extend_from_slice(&x.row(r)[start..start + len]);
            }
            Ok((Tensor::new(&[rows, len], data)?, Op::SliceCols { x: id, start }))
        })
    }

    /// Rows selected by `index` (repeats allowed).
    pub fn gather_rows(self, index: &[usize]) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            let rows = x.rows();
            let cols = x.cols();
            let mut data = Vec::with_capacity(index.len() * cols);
            for &i in index {
                if i >= rows {
                    return Err(TensorError::Index {
                        op: "gather_rows",
                        index: i,
                        extent: rows,
                    });
                }
                data.extend_from_slice(x.row(i));
            }
            Ok((
                Tensor::new(&[index.len(), cols], data)?,
                Op::GatherRows {
                    x: id,
                    index: index.to_vec(),
                },
            ))
        })
    }

    pub fn rows_range(self, start: usize, len: usize) -> Result<Var<'t>> {
        let index: Vec<usize> = (start..start + len).collect();
        self.gather_rows(&index)
    }

    /// Same value, cut from the graph.
    pub fn detach(self) -> Var<'t> {
        let v = self.value();
        self.tape.constant(v)
    }

    /// 3×3 neighbourhood extraction with zero padding for a `[h·w × c]`
    /// feature map, giving `[h·w × 9c]`.
    pub fn unfold3x3(self, h: usize, w: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            check_spatial("unfold3x3", x, h, w)?;
            let c = x.cols();
            let data = kernels::unfold3x3(x.data(), h, w, c);
            Ok((Tensor::new(&[h * w, 9 * c], data)?, Op::Unfold3x3 { x: id, h, w }))
        })
    }

    /// 2×2 average pooling of a `[h·w × c]` feature map.
    pub fn avg_pool2(self, h: usize, w: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            check_spatial("avg_pool2", x, h, w)?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(TensorError::Contract {
                    op: "avg_pool2",
                    msg: format!("odd spatial size {h}x{w}"),
                });
            }
            let c = x.cols();
            let data = kernels::avg_pool2(x.data(), h, w, c);
            Ok((Tensor::new(&[h * w / 4, c], data)?, Op::AvgPool2 { x: id, h, w }))
        })
    }

    /// Nearest-neighbour 2× upsampling of a `[h·w × c]` feature map.
    pub fn upsample2(self, h: usize, w: usize) -> Result<Var<'t>> {
        let id = self.id;
        self.unary(|x| {
            check_spatial("upsample2", x, h, w)?;
            let c = x.cols();
            let data = kernels::upsample2(x.data(), h, w, c);
            Ok((Tensor::new(&[h * w * 4, c], data)?, Op::Upsample2 { x: id, h, w }))
        })
    }
}

fn check_spatial(op: &'static str, x: &Tensor, h: usize, w: usize) -> Result<()> {
    if x.rows() != h * w {
        return Err(TensorError::Contract {
            op,
            msg: format!("{} rows do not form a {h}x{w} grid", x.rows()),
        });
    }
    Ok(())
}
