//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation executed through a [`Var`] handle in
//! execution order, so inputs always precede their consumers. [`Tape::backward`]
//! walks the record once in reverse and returns the gradient of a scalar loss
//! with respect to every parameter that was read onto the tape.
//!
//! Shapes follow two conventions. Matrix operations act on the last two axes
//! and treat an optional leading axis as a batch. Row-wise operations
//! (softmax, normalization, norms) act on the last axis and treat everything
//! before it as rows.

use alloc::string::String;
use alloc::vec;
use alloc::rc::Rc;
use alloc::vec::Vec;
use core::cell::RefCell;

use crate::error::{shape_err, Error, Result};
use crate::linalg::{gemm_nn, gemm_nt, gemm_tn};
use crate::param::{Gradients, ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Variance epsilon of [`Var::layer_normalize`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    MatMulNt { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize },
    Affine { x: usize, w: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { x: usize, batch: usize, rows: usize, cols: usize },
    GroupedMatMul { x: usize, w: usize, batch: usize, groups: usize, k: usize, n: usize },
    ConvTime { x: usize, kernels: usize, batch: usize, d: usize, t: usize, kc: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBroadcast { x: usize, b: usize },
    MulBroadcast { x: usize, b: usize },
    Scale { x: usize, s: f64 },
    AddScalar { x: usize },
    Relu { x: usize },
    Tanh { x: usize },
    Exp { x: usize },
    Log { x: usize },
    Softmax { x: usize, n: usize },
    LayerNorm { x: usize, n: usize, inv_std: Vec<f64> },
    Sum { x: usize },
    Mean { x: usize },
    L2NormRows { x: usize, n: usize },
    Concat { parts: Vec<(usize, usize)>, rows: usize, width: usize },
    SliceLast { x: usize, start: usize, len: usize, n: usize },
    Gather { x: usize, indices: Vec<usize>, block: usize },
    RepeatInterleave { x: usize, times: usize, block: usize },
    Reshape { x: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::MatMulNt { .. } => "matmul_nt",
            Op::Affine { .. } => "affine",
            Op::Transpose { .. } => "transpose",
            Op::GroupedMatMul { .. } => "grouped_matmul",
            Op::ConvTime { .. } => "conv_time",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "elementwise_mul",
            Op::AddBroadcast { .. } => "add_broadcast",
            Op::MulBroadcast { .. } => "mul_broadcast",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Relu { .. } => "relu",
            Op::Tanh { .. } => "tanh",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Softmax { .. } => "softmax_lastaxis",
            Op::LayerNorm { .. } => "layer_normalize",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::L2NormRows { .. } => "l2_norm_rows",
            Op::Concat { .. } => "concat_lastaxis",
            Op::SliceLast { .. } => "slice_lastaxis",
            Op::Gather { .. } => "gather",
            Op::RepeatInterleave { .. } => "repeat_interleave",
            Op::Reshape { .. } => "reshape",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    param_nodes: RefCell<Vec<Option<usize>>>,
    frozen: Vec<bool>,
}

/// A tensor recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl core::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Location of the first non-finite value found on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct NonFiniteReport {
    pub node: usize,
    pub op: &'static str,
    pub param: Option<String>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which parameters flagged in `frozen` (by index) are read
    /// as constants and receive no gradient.
    pub fn with_frozen(frozen: Vec<bool>) -> Self {
        Self {
            frozen,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_shared(shape, Rc::new(data), op, requires_grad)
    }

    fn push_shared(&self, shape: Vec<usize>, data: Rc<Vec<f64>>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(numel(&shape), data.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a constant input (no gradient).
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&self, shape: &[usize], data: Vec<f64>) -> Result<Var<'_>> {
        if numel(shape) != data.len() {
            return Err(shape_err("constant", shape, &[data.len()]));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    /// Records a differentiable leaf that is not a stored parameter.
    pub fn variable(&self, t: &Tensor) -> Var<'_> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Reads a parameter onto the tape. Repeated reads share one node.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        if let Some(Some(node)) = self.param_nodes.borrow().get(id.index()) {
            return Var {
                tape: self,
                id: *node,
            };
        }
        let t = store.value(id);
        let trainable = !self.frozen.get(id.index()).copied().unwrap_or(false);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Param(id), trainable);
        let mut map = self.param_nodes.borrow_mut();
        if map.len() <= id.index() {
            map.resize(id.index() + 1, None);
        }
        map[id.index()] = Some(v.id);
        v
    }

    /// Gradient of the scalar `loss` with respect to every parameter of `store`.
    /// Parameters that were never read receive zeros.
    pub fn backward(&self, loss: Var<'_>, store: &ParamStore) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let grads = backprop(&nodes, loss.id, &[]);
        let mut out = Gradients::zeros_like(store);
        for (i, node) in nodes.iter().enumerate() {
            if let (Op::Param(pid), Some(g)) = (&node.op, &grads[i]) {
                out.accumulate(*pid, g);
            }
        }
        Ok(out)
    }

    /// Gradients of the scalar `loss` with respect to arbitrary leaves.
    pub fn grad_of(&self, loss: Var<'_>, wrt: &[Var<'_>]) -> Result<Vec<Tensor>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].data.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let keep: Vec<usize> = wrt.iter().map(|v| v.id).collect();
        let grads = backprop(&nodes, loss.id, &keep);
        Ok(wrt
            .iter()
            .map(|v| {
                let n = &nodes[v.id];
                let data = grads[v.id].clone().unwrap_or_else(|| vec![0.0; n.data.len()]);
                Tensor::new(&n.shape, data).expect("gradient shape matches node")
            })
            .collect())
    }

    /// The first recorded value that is NaN or infinite, if any.
    pub fn first_non_finite(&self, store: &ParamStore) -> Option<NonFiniteReport> {
        let nodes = self.nodes.borrow();
        nodes.iter().enumerate().find_map(|(i, n)| {
            if n.data.iter().all(|v| v.is_finite()) {
                return None;
            }
            let param = match n.op {
                Op::Param(id) => Some(String::from(store.name(id))),
                _ => None,
            };
            Some(NonFiniteReport {
                node: i,
                op: n.op.name(),
                param,
            })
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn backprop(nodes: &[Node], root: usize, keep: &[usize]) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[root] = Some(vec![1.0]);

    // Lazily allocated gradient slot for a parent node.
    fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
        if !nodes[id].requires_grad {
            return None;
        }
        Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]))
    }

    // Hands a finished gradient buffer to a parent, reusing it when the slot is empty.
    fn give(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: usize, g: Vec<f64>) {
        if !nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(d) => add_into(d, &g),
            None => grads[id] = Some(g),
        }
    }

    for i in (0..=root).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &nodes[i];
        if !node.requires_grad {
            continue;
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {
                grads[i] = Some(g);
                continue;
            }
            _ => {}
        }
        let kept = keep.contains(&i).then(|| g.clone());
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            &Op::MatMul { a, b, batch, m, k, n } => {
                let (ad, bd) = (&nodes[a].data[..], &nodes[b].data[..]);
                if let Some(ga) = slot(&mut grads, nodes, a) {
                    for s in 0..batch {
                        gemm_nt(
                            &g[s * m * n..(s + 1) * m * n],
                            &bd[s * k * n..(s + 1) * k * n],
                            &mut ga[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for s in 0..batch {
                        gemm_tn(
                            &ad[s * m * k..(s + 1) * m * k],
                            &g[s * m * n..(s + 1) * m * n],
                            &mut gb[s * k * n..(s + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                }
            }
            &Op::MatMulNt { a, b, batch, m, k, n } => {
                let (ad, bd) = (&nodes[a].data[..], &nodes[b].data[..]);
                if let Some(ga) = slot(&mut grads, nodes, a) {
                    for s in 0..batch {
                        gemm_nn(
                            &g[s * m * n..(s + 1) * m * n],
                            &bd[s * n * k..(s + 1) * n * k],
                            &mut ga[s * m * k..(s + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for s in 0..batch {
                        gemm_tn(
                            &g[s * m * n..(s + 1) * m * n],
                            &ad[s * m * k..(s + 1) * m * k],
                            &mut gb[s * n * k..(s + 1) * n * k],
                            n,
                            m,
                            k,
                        );
                    }
                }
            }
            &Op::Affine { x, w, b, m, k, n } => {
                let (xd, wd) = (&nodes[x].data[..], &nodes[w].data[..]);
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    gemm_nt(&g, wd, gx, m, n, k);
                }
                if let Some(gw) = slot(&mut grads, nodes, w) {
                    gemm_tn(xd, &g, gw, k, m, n);
                }
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for row in g.chunks_exact(n) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Transpose { x, batch, rows, cols } => {
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for s in 0..batch {
                        let off = s * rows * cols;
                        for r in 0..rows {
                            for c in 0..cols {
                                gx[off + r * cols + c] += g[off + c * rows + r];
                            }
                        }
                    }
                }
            }
            &Op::GroupedMatMul { x, w, batch, groups, k, n } => {
                let (xd, wd) = (&nodes[x].data[..], &nodes[w].data[..]);
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for s in 0..batch {
                        for q in 0..groups {
                            let row = s * groups + q;
                            gemm_nt(
                                &g[row * n..(row + 1) * n],
                                &wd[q * k * n..(q + 1) * k * n],
                                &mut gx[row * k..(row + 1) * k],
                                1,
                                n,
                                k,
                            );
                        }
                    }
                }
                if let Some(gw) = slot(&mut grads, nodes, w) {
                    for s in 0..batch {
                        for q in 0..groups {
                            let row = s * groups + q;
                            gemm_tn(
                                &xd[row * k..(row + 1) * k],
                                &g[row * n..(row + 1) * n],
                                &mut gw[q * k * n..(q + 1) * k * n],
                                k,
                                1,
                                n,
                            );
                        }
                    }
                }
            }
            &Op::ConvTime { x, kernels, batch, d, t, kc } => {
                let (xd, kd) = (&nodes[x].data[..], &nodes[kernels].data[..]);
                if let Some(gk) = slot(&mut grads, nodes, kernels) {
                    for s in 0..batch {
                        gemm_nn(&g[s * kc * d..(s + 1) * kc * d], &xd[s * d * t..(s + 1) * d * t], gk, kc, d, t);
                    }
                }
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for s in 0..batch {
                        gemm_tn(&g[s * kc * d..(s + 1) * kc * d], kd, &mut gx[s * d * t..(s + 1) * d * t], d, kc, t);
                    }
                }
            }
            &Op::Add { a, b } => {
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    add_into(gb, &g);
                }
                give(&mut grads, nodes, a, g);
            }
            &Op::Sub { a, b } => {
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for (d, s) in gb.iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
                give(&mut grads, nodes, a, g);
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (&nodes[a].data[..], &nodes[b].data[..]);
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for ((d, gi), ai) in gb.iter_mut().zip(&g).zip(ad) {
                        *d += gi * ai;
                    }
                }
                let mut g = g;
                for (gi, bi) in g.iter_mut().zip(bd) {
                    *gi *= bi;
                }
                give(&mut grads, nodes, a, g);
            }
            &Op::AddBroadcast { x, b } => {
                let width = nodes[b].data.len();
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for chunk in g.chunks_exact(width) {
                        add_into(gb, chunk);
                    }
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::MulBroadcast { x, b } => {
                let (xd, bd) = (&nodes[x].data[..], &nodes[b].data[..]);
                let width = bd.len();
                if let Some(gb) = slot(&mut grads, nodes, b) {
                    for (xc, gc) in xd.chunks_exact(width).zip(g.chunks_exact(width)) {
                        for ((d, gi), xi) in gb.iter_mut().zip(gc).zip(xc) {
                            *d += gi * xi;
                        }
                    }
                }
                let mut g = g;
                for gc in g.chunks_exact_mut(width) {
                    for (gi, bi) in gc.iter_mut().zip(bd) {
                        *gi *= bi;
                    }
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::Scale { x, s } => {
                let mut g = g;
                g.iter_mut().for_each(|gi| *gi *= s);
                give(&mut grads, nodes, x, g);
            }
            &Op::AddScalar { x } | &Op::Reshape { x } => give(&mut grads, nodes, x, g),
            &Op::Relu { x } => {
                let mut g = g;
                for (gi, xi) in g.iter_mut().zip(&nodes[x].data[..]) {
                    if *xi <= 0.0 {
                        *gi = 0.0;
                    }
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::Tanh { x } => {
                let mut g = g;
                for (gi, yi) in g.iter_mut().zip(&node.data[..]) {
                    *gi *= 1.0 - yi * yi;
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::Exp { x } => {
                let mut g = g;
                for (gi, yi) in g.iter_mut().zip(&node.data[..]) {
                    *gi *= yi;
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::Log { x } => {
                let mut g = g;
                for (gi, xi) in g.iter_mut().zip(&nodes[x].data[..]) {
                    *gi /= xi;
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::Softmax { x, n } => {
                let mut g = g;
                for (gr, yr) in g.chunks_exact_mut(n).zip(node.data.chunks_exact(n)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for (gi, yi) in gr.iter_mut().zip(yr) {
                        *gi = yi * (*gi - dot);
                    }
                }
                give(&mut grads, nodes, x, g);
            }
            Op::LayerNorm { x, n, inv_std } => {
                let (x, n) = (*x, *n);
                let nf = n as f64;
                let mut g = g;
                for ((gr, yr), &is) in g.chunks_exact_mut(n).zip(node.data.chunks_exact(n)).zip(inv_std) {
                    let mean_g: f64 = gr.iter().sum::<f64>() / nf;
                    let mean_gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / nf;
                    for (gi, yi) in gr.iter_mut().zip(yr) {
                        *gi = is * (*gi - mean_g - yi * mean_gy);
                    }
                }
                give(&mut grads, nodes, x, g);
            }
            &Op::Sum { x } => {
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            &Op::Mean { x } => {
                let n = nodes[x].data.len() as f64;
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            &Op::L2NormRows { x, n } => {
                let xd = &nodes[x].data[..];
                let y = &node.data[..];
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for (r, (gxr, xr)) in gx.chunks_exact_mut(n).zip(xd.chunks_exact(n)).enumerate() {
                        if y[r] == 0.0 {
                            continue;
                        }
                        let f = g[r] / y[r];
                        for (d, xi) in gxr.iter_mut().zip(xr) {
                            *d += f * xi;
                        }
                    }
                }
            }
            Op::Concat { parts, rows, width } => {
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(gp) = slot(&mut grads, nodes, p) {
                        for r in 0..*rows {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * width + offset..r * width + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceLast { x, start, len, n } => {
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for (r, gr) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[r * n + start..r * n + start + len], gr);
                    }
                }
            }
            Op::Gather { x, indices, block } => {
                let block = *block;
                if let Some(gx) = slot(&mut grads, nodes, *x) {
                    for (o, &src) in indices.iter().enumerate() {
                        add_into(&mut gx[src * block..(src + 1) * block], &g[o * block..(o + 1) * block]);
                    }
                }
            }
            &Op::RepeatInterleave { x, times, block } => {
                if let Some(gx) = slot(&mut grads, nodes, x) {
                    for (o, gc) in g.chunks_exact(block).enumerate() {
                        let src = o / times;
                        add_into(&mut gx[src * block..(src + 1) * block], gc);
                    }
                }
            }
        }
        if let Some(k) = kept {
            grads[i] = Some(k);
        }
    }
    grads
}

/// Splits a shape into `(batch, rows, cols)` for matrix operations.
fn as_batched(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [r, c] => Ok((1, r, c)),
        [b, r, c] => Ok((b, r, c)),
        _ => Err(Error::Contract(alloc::format!(
            "{op} expects a matrix or a batch of matrices, got shape {shape:?}"
        ))),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].data.len()
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(&n.shape, n.data.to_vec()).expect("recorded node is well formed")
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn rg(&self, other: &Var<'_>) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].requires_grad || nodes[other.id].requires_grad
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.data.iter().map(|&v| f(v)).collect(), n.requires_grad)
        };
        self.tape.push(shape, data, op, rg)
    }

    fn binary(&self, other: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        let (shape, data) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            if a.shape != b.shape {
                return Err(shape_err(name, &a.shape, &b.shape));
            }
            (a.shape.clone(), a.data.iter().zip(&b.data[..]).map(|(&x, &y)| f(x, y)).collect())
        };
        let rg = self.rg(&other);
        Ok(self.tape.push(shape, data, op, rg))
    }

    /// Matrix product on the last two axes; both operands may carry the same
    /// leading batch axis.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (ba, m, k) = as_batched("matmul", &sa)?;
        let (bb, k2, n) = as_batched("matmul", &sb)?;
        if k != k2 || ba != bb || sa.len() != sb.len() {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].data[..], &nodes[other.id].data[..]);
            for s in 0..ba {
                gemm_nn(
                    &a[s * m * k..(s + 1) * m * k],
                    &b[s * k * n..(s + 1) * k * n],
                    &mut out[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![ba, m, n] } else { vec![m, n] };
        let rg = self.rg(&other);
        Ok(self.tape.push(shape, out, Op::MatMul { a: self.id, b: other.id, batch: ba, m, k, n }, rg))
    }

    /// `self * w + b` over the last axis: `w` is `[k, n]`, `b` is `[n]`, and
    /// any leading axes of `self` are kept.
    pub fn affine(&self, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
        let (sx, sw, sb) = (self.shape(), w.shape(), b.shape());
        let k = sx.last().copied().unwrap_or(0);
        if sw.len() != 2 || sw[0] != k || sb.len() != 1 || sb[0] != sw[1] || k == 0 {
            return Err(shape_err("affine", &sx, &sw));
        }
        let n = sw[1];
        let m = numel(&sx) / k;
        let out = {
            let nodes = self.tape.nodes.borrow();
            let (xd, wd, bd) = (&nodes[self.id].data[..], &nodes[w.id].data[..], &nodes[b.id].data[..]);
            let mut out = bd.repeat(m);
            gemm_nn(xd, wd, &mut out, m, k, n);
            out
        };
        let mut shape = sx;
        *shape.last_mut().expect("non-empty shape") = n;
        let rg = self.rg(&w) || b.requires_grad();
        Ok(self.tape.push(shape, out, Op::Affine { x: self.id, w: w.id, b: b.id, m, k, n }, rg))
    }

    /// `self * other^T` on the last two axes.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (ba, m, k) = as_batched("matmul_nt", &sa)?;
        let (bb, n, k2) = as_batched("matmul_nt", &sb)?;
        if k != k2 || ba != bb || sa.len() != sb.len() {
            return Err(shape_err("matmul_nt", &sa, &sb));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].data[..], &nodes[other.id].data[..]);
            for s in 0..ba {
                gemm_nt(
                    &a[s * m * k..(s + 1) * m * k],
                    &b[s * n * k..(s + 1) * n * k],
                    &mut out[s * m * n..(s + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let shape = if sa.len() == 3 { vec![ba, m, n] } else { vec![m, n] };
        let rg = self.rg(&other);
        Ok(self.tape.push(shape, out, Op::MatMulNt { a: self.id, b: other.id, batch: ba, m, k, n }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let shape = self.shape();
        let (batch, rows, cols) = as_batched("transpose", &shape)?;
        let (data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data[..];
            let mut out = vec![0.0; x.len()];
            for s in 0..batch {
                let off = s * rows * cols;
                for r in 0..rows {
                    for c in 0..cols {
                        out[off + c * rows + r] = x[off + r * cols + c];
                    }
                }
            }
            (out, nodes[self.id].requires_grad)
        };
        let new_shape = if shape.len() == 3 { vec![batch, cols, rows] } else { vec![cols, rows] };
        Ok(self.tape.push(new_shape, data, Op::Transpose { x: self.id, batch, rows, cols }, rg))
    }

    /// Per-group linear map: `self[B x G x k]` times `w[G x k x n]` gives
    /// `[B x G x n]`, row `(b, g)` multiplied by its own matrix `w[g]`.
    pub fn grouped_matmul(&self, w: Var<'t>) -> Result<Var<'t>> {
        let (sx, sw) = (self.shape(), w.shape());
        let (batch, groups, k) = match *sx {
            [b, g, k] => (b, g, k),
            _ => return Err(shape_err("grouped_matmul", &sx, &sw)),
        };
        let n = match *sw {
            [g, k2, n] if g == groups && k2 == k => n,
            _ => return Err(shape_err("grouped_matmul", &sx, &sw)),
        };
        let mut out = vec![0.0; batch * groups * n];
        {
            let nodes = self.tape.nodes.borrow();
            let (xd, wd) = (&nodes[self.id].data[..], &nodes[w.id].data[..]);
            for s in 0..batch {
                for q in 0..groups {
                    let row = s * groups + q;
                    gemm_nn(
                        &xd[row * k..(row + 1) * k],
                        &wd[q * k * n..(q + 1) * k * n],
                        &mut out[row * n..(row + 1) * n],
                        1,
                        k,
                        n,
                    );
                }
            }
        }
        let rg = self.rg(&w);
        Ok(self.tape.push(
            vec![batch, groups, n],
            out,
            Op::GroupedMatMul { x: self.id, w: w.id, batch, groups, k, n },
            rg,
        ))
    }

    /// Temporal convolution with `K_c` kernels spanning the whole time axis.
    ///
    /// `self` is `[d x t]` (or `[B x d x t]`), `kernels` is `[K_c x t]`; the
    /// result is `[K_c x d]` (or `[B x K_c x d]`) with
    /// `out[c][j] = sum_t kernels[c][t] * x[j][t]`.
    pub fn conv_time(&self, kernels: Var<'t>) -> Result<Var<'t>> {
        let (sx, sk) = (self.shape(), kernels.shape());
        let (batch, d, t) = as_batched("conv_time", &sx)?;
        let kc = match *sk {
            [kc, t2] if t2 == t => kc,
            _ => return Err(shape_err("conv_time", &sx, &sk)),
        };
        let mut out = vec![0.0; batch * kc * d];
        {
            let nodes = self.tape.nodes.borrow();
            let (xd, kd) = (&nodes[self.id].data[..], &nodes[kernels.id].data[..]);
            for s in 0..batch {
                gemm_nt(kd, &xd[s * d * t..(s + 1) * d * t], &mut out[s * kc * d..(s + 1) * kc * d], kc, t, d);
            }
        }
        let shape = if sx.len() == 3 { vec![batch, kc, d] } else { vec![kc, d] };
        let rg = self.rg(&kernels);
        Ok(self.tape.push(
            shape,
            out,
            Op::ConvTime { x: self.id, kernels: kernels.id, batch, d, t, kc },
            rg,
        ))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", Op::Add { a: self.id, b: other.id }, |a, b| a + b)
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", Op::Sub { a: self.id, b: other.id }, |a, b| a - b)
    }

    pub fn elementwise_mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "elementwise_mul", Op::Mul { a: self.id, b: other.id }, |a, b| a * b)
    }

    fn broadcast(&self, b: Var<'t>, name: &'static str, mul: bool) -> Result<Var<'t>> {
        let (sx, sb) = (self.shape(), b.shape());
        if sb.len() > sx.len() || sx[sx.len() - sb.len()..] != sb[..] {
            return Err(shape_err(name, &sx, &sb));
        }
        let data = {
            let nodes = self.tape.nodes.borrow();
            let (xd, bd) = (&nodes[self.id].data[..], &nodes[b.id].data[..]);
            let w = bd.len();
            let mut out = xd.to_vec();
            for chunk in out.chunks_exact_mut(w) {
                for (o, bi) in chunk.iter_mut().zip(bd) {
                    if mul {
                        *o *= bi
                    } else {
                        *o += bi
                    }
                }
            }
            out
        };
        let op = if mul {
            Op::MulBroadcast { x: self.id, b: b.id }
        } else {
            Op::AddBroadcast { x: self.id, b: b.id }
        };
        let rg = self.rg(&b);
        Ok(self.tape.push(sx, data, op, rg))
    }

    /// Adds `b` to every trailing block of matching shape (e.g. a bias row
    /// to every row).
    pub fn broadcast_rows(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.broadcast(b, "broadcast_rows", false)
    }

    /// Multiplies every trailing block of matching shape by `b` elementwise.
    pub fn mul_rows(&self, b: Var<'t>) -> Result<Var<'t>> {
        self.broadcast(b, "mul_rows", true)
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(Op::Scale { x: self.id, s }, |v| s * v)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar { x: self.id }, |v| v + c)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu { x: self.id }, |v| if v > 0.0 || v.is_nan() { v } else { 0.0 })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh { x: self.id }, libm::tanh)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(Op::Exp { x: self.id }, libm::exp)
    }

    pub fn log(&self) -> Var<'t> {
        self.unary(Op::Log { x: self.id }, libm::log)
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_lastaxis(&self) -> Var<'t> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let n = last_dim(&node.shape);
            let mut out = node.data.to_vec();
            for row in out.chunks_exact_mut(n) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = libm::exp(*v - max);
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            (node.shape.clone(), out, node.requires_grad)
        };
        let n = last_dim(&shape);
        self.tape.push(shape, data, Op::Softmax { x: self.id, n }, rg)
    }

    /// Zero-mean, unit-variance normalization over the last axis (no affine).
    pub fn layer_normalize(&self) -> Var<'t> {
        let (shape, data, inv_std, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let n = last_dim(&node.shape);
            let nf = n as f64;
            let mut out = node.data.to_vec();
            let mut inv_std = Vec::with_capacity(out.len() / n);
            for row in out.chunks_exact_mut(n) {
                let mean = row.iter().sum::<f64>() / nf;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / nf;
                let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                for v in row.iter_mut() {
                    *v = (*v - mean) * is;
                }
                inv_std.push(is);
            }
            (node.shape.clone(), out, inv_std, node.requires_grad)
        };
        let n = last_dim(&shape);
        self.tape.push(shape, data, Op::LayerNorm { x: self.id, n, inv_std }, rg)
    }

    pub fn sum(&self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            (nodes[self.id].data.iter().sum::<f64>(), nodes[self.id].requires_grad)
        };
        self.tape.push(Vec::new(), vec![v], Op::Sum { x: self.id }, rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let (v, rg) = {
            let nodes = self.tape.nodes.borrow();
            let d = &nodes[self.id].data[..];
            (d.iter().sum::<f64>() / d.len() as f64, nodes[self.id].requires_grad)
        };
        self.tape.push(Vec::new(), vec![v], Op::Mean { x: self.id }, rg)
    }

    /// Euclidean norm of every last-axis row; drops the last axis.
    /// The gradient at a zero row is taken as zero.
    pub fn l2_norm_rows(&self) -> Var<'t> {
        let (shape, data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let node = &nodes[self.id];
            let n = last_dim(&node.shape);
            let out: Vec<f64> = node
                .data
                .chunks_exact(n)
                .map(|r| libm::sqrt(r.iter().map(|v| v * v).sum::<f64>()))
                .collect();
            let mut shape = node.shape.clone();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            (shape, out, node.requires_grad)
        };
        let n = last_dim(&self.shape());
        self.tape.push(shape, data, Op::L2NormRows { x: self.id, n }, rg)
    }

    /// Concatenates along the last axis; all leading axes must agree.
    pub fn concat_lastaxis(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let tape = first.tape;
        let lead = {
            let s = first.shape();
            s[..s.len() - 1].to_vec()
        };
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_lastaxis", &first.shape(), &s));
            }
            widths.push(last_dim(&s));
        }
        let width: usize = widths.iter().sum();
        let (data, rg) = {
            let nodes = tape.nodes.borrow();
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                for (p, &w) in parts.iter().zip(&widths) {
                    out.extend_from_slice(&nodes[p.id].data[r * w..(r + 1) * w]);
                }
            }
            (out, parts.iter().any(|p| nodes[p.id].requires_grad))
        };
        let mut shape = lead;
        shape.push(width);
        let parts = parts.iter().zip(&widths).map(|(p, &w)| (p.id, w)).collect();
        Ok(tape.push(shape, data, Op::Concat { parts, rows, width }, rg))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_lastaxis(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let n = last_dim(&shape);
        if len == 0 || start + len > n {
            return Err(shape_err("slice_lastaxis", &shape, &[start, start + len]));
        }
        let (data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].data;
            let mut out = Vec::with_capacity(src.len() / n * len);
            for r in src.chunks_exact(n) {
                out.extend_from_slice(&r[start..start + len]);
            }
            (out, nodes[self.id].requires_grad)
        };
        let mut new_shape = shape;
        *new_shape.last_mut().expect("non-empty shape") = len;
        Ok(self.tape.push(new_shape, data, Op::SliceLast { x: self.id, start, len, n }, rg))
    }

    /// Selects entries `indices` of the first axis (repeats allowed).
    pub fn gather(&self, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some((&lead, rest)) = shape.split_first() else {
            return Err(Error::Contract("gather on a scalar".into()));
        };
        if indices.is_empty() || indices.iter().any(|&i| i >= lead) {
            return Err(Error::Contract(alloc::format!(
                "gather indices out of range for first axis {lead}"
            )));
        }
        let block = numel(rest);
        let (data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data[..];
            let out = indices
                .iter()
                .flat_map(|&i| x[i * block..(i + 1) * block].iter().copied())
                .collect();
            (out, nodes[self.id].requires_grad)
        };
        let mut new_shape = vec![indices.len()];
        new_shape.extend_from_slice(rest);
        Ok(self.tape.push(
            new_shape,
            data,
            Op::Gather { x: self.id, indices: indices.to_vec(), block },
            rg,
        ))
    }

    /// Entries `start..start + len` of the first axis.
    pub fn slice(&self, start: usize, len: usize) -> Result<Var<'t>> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(&idx)
    }

    /// Repeats every entry of the first axis `times` times in place:
    /// `[a, b] -> [a, a, b, b]` for `times = 2`.
    pub fn repeat_interleave(&self, times: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if times == 0 || shape.is_empty() {
            return Err(Error::Contract("repeat_interleave needs times >= 1 and a leading axis".into()));
        }
        let block = numel(&shape[1..]);
        let (data, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].data[..];
            let mut out = Vec::with_capacity(x.len() * times);
            for chunk in x.chunks_exact(block) {
                for _ in 0..times {
                    out.extend_from_slice(chunk);
                }
            }
            (out, nodes[self.id].requires_grad)
        };
        let mut new_shape = shape;
        new_shape[0] *= times;
        Ok(self.tape.push(new_shape, data, Op::RepeatInterleave { x: self.id, times, block }, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let (data, rg, old) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.data.clone(), n.requires_grad, n.shape.clone())
        };
        if numel(shape) != data.len() {
            return Err(shape_err("reshape", &old, shape));
        }
        Ok(self.tape.push_shared(shape.to_vec(), data, Op::Reshape { x: self.id }, rg))
    }
}
