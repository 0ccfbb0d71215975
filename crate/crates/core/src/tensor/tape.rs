use std::cell::{Cell, RefCell};
use std::rc::Rc;

use super::resample::{Resample2d, ResizeMode};
use super::{Tensor, TensorError};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Clamp(usize, f64, f64),
    Abs(usize),
    Sign(usize),
    Square(usize),
    Sqrt(usize),
    Tanh(usize),
    Relu(usize),
    Sum(usize),
    Matmul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Reshape(usize),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Variance {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeom,
    },
    PoolAvg {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    Resample {
        x: usize,
        channels: usize,
        map: Rc<Resample2d>,
    },
    Pad2d {
        x: usize,
        c: usize,
        h: usize,
        w: usize,
        top: usize,
        left: usize,
    },
    Select {
        x: usize,
        index: usize,
        size: usize,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of one forward computation.
///
/// Node ids are assigned in creation order, so reverse id order is a valid
/// reverse topological order for backward.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads_ready: Cell<bool>,
}

/// Handle to a node on a [`Tape`].
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

/// Elementwise kinds accepted by [`Var::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Div,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf that receives a gradient.
    pub fn param(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, t: &Tensor) -> Var<'_> {
        self.leaf(t, false)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.constant(&Tensor::scalar(v))
    }

    fn leaf(&self, t: &Tensor, requires_grad: bool) -> Var<'_> {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            requires_grad,
        )
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var<'_> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
        self.grads_ready.set(false);
    }

    /// Populates gradients of every node that requires one. Rejected if a
    /// previous backward has not been cleared with [`Tape::zero_grad`].
    pub fn backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        if self.grads_ready.get() {
            return Err(TensorError::GradientsPopulated);
        }
        self.run_backward(loss)
    }

    /// Like [`Tape::backward`] but adds into gradients already present.
    pub fn backward_accumulate(&self, loss: Var<'_>) -> Result<(), TensorError> {
        self.run_backward(loss)
    }

    fn run_backward(&self, loss: Var<'_>) -> Result<(), TensorError> {
        let shape = loss.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(shape));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            backprop(&nodes, id, &g, &mut grads);
            let slot = &mut nodes[id].grad;
            match slot {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, v)| *e += v),
                None => *slot = Some(g),
            }
        }
        // Nodes that require grad but were unreachable get explicit zeros so
        // leaves always expose a gradient after backward.
        for n in nodes.iter_mut() {
            if n.requires_grad && n.grad.is_none() {
                n.grad = Some(vec![0.0; n.value.len()]);
            }
        }
        self.grads_ready.set(true);
        Ok(())
    }
}

fn acc(nodes: &[Node], grads: &mut [Option<Vec<f64>>], id: usize, contrib: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot => *slot = Some(contrib),
    }
}

/// Gradient for an operand that may have been broadcast from a single element.
fn reduce_to(nodes: &[Node], id: usize, full: Vec<f64>) -> Vec<f64> {
    if nodes[id].value.len() == full.len() {
        full
    } else {
        vec![full.iter().sum()]
    }
}

fn bval(v: &[f64], i: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backprop(nodes: &[Node], id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let node = &nodes[id];
    match node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = reduce_to(nodes, a, g.to_vec());
            acc(nodes, grads, a, ga);
            let gb = reduce_to(nodes, b, g.to_vec());
            acc(nodes, grads, b, gb);
        }
        Op::Sub(a, b) => {
            let ga = reduce_to(nodes, a, g.to_vec());
            acc(nodes, grads, a, ga);
            let gb = reduce_to(nodes, b, g.iter().map(|v| -v).collect());
            acc(nodes, grads, b, gb);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let full = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bval(bv, i))
                    .collect();
                let ga = reduce_to(nodes, a, full);
                acc(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                let full = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi * bval(av, i))
                    .collect();
                let gb = reduce_to(nodes, b, full);
                acc(nodes, grads, b, gb);
            }
        }
        Op::Div(a, b) => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let full = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| gi / bval(bv, i))
                    .collect();
                let ga = reduce_to(nodes, a, full);
                acc(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                let full = g
                    .iter()
                    .enumerate()
                    .map(|(i, gi)| {
                        let d = bval(bv, i);
                        -gi * bval(av, i) / (d * d)
                    })
                    .collect();
                let gb = reduce_to(nodes, b, full);
                acc(nodes, grads, b, gb);
            }
        }
        Op::Scale(a, k) => acc(nodes, grads, a, g.iter().map(|v| v * k).collect()),
        Op::Offset(a) | Op::Reshape(a) => acc(nodes, grads, a, g.to_vec()),
        Op::Clamp(a, lo, hi) => {
            let av = &nodes[a].value;
            let ga = g
                .iter()
                .zip(av)
                .map(|(gi, &x)| if x >= lo && x <= hi { *gi } else { 0.0 })
                .collect();
            acc(nodes, grads, a, ga);
        }
        Op::Abs(a) => {
            let av = &nodes[a].value;
            let ga = g.iter().zip(av).map(|(gi, &x)| gi * sign(x)).collect();
            acc(nodes, grads, a, ga);
        }
        Op::Sign(a) => acc(nodes, grads, a, vec![0.0; g.len()]),
        Op::Square(a) => {
            let av = &nodes[a].value;
            let ga = g.iter().zip(av).map(|(gi, &x)| 2.0 * x * gi).collect();
            acc(nodes, grads, a, ga);
        }
        Op::Sqrt(a) => {
            let ga = g
                .iter()
                .zip(&node.value)
                .map(|(gi, &y)| if y > 0.0 { gi / (2.0 * y) } else { 0.0 })
                .collect();
            acc(nodes, grads, a, ga);
        }
        Op::Tanh(a) => {
            let ga = g
                .iter()
                .zip(&node.value)
                .map(|(gi, &y)| gi * (1.0 - y * y))
                .collect();
            acc(nodes, grads, a, ga);
        }
        Op::Relu(a) => {
            let av = &nodes[a].value;
            let ga = g
                .iter()
                .zip(av)
                .map(|(gi, &x)| if x > 0.0 { *gi } else { 0.0 })
                .collect();
            acc(nodes, grads, a, ga);
        }
        Op::Sum(a) => acc(nodes, grads, a, vec![g[0]; nodes[a].value.len()]),
        Op::Matmul {
            a,
            b,
            batch,
            m,
            k,
            n,
        } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                // dA = G · Bᵀ
                let mut ga = vec![0.0; batch * m * k];
                for t in 0..batch {
                    let (gt, bt) = (&g[t * m * n..], &bv[t * k * n..]);
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += gt[i * n + j] * bt[p * n + j];
                            }
                            ga[t * m * k + i * k + p] = s;
                        }
                    }
                }
                acc(nodes, grads, a, ga);
            }
            if nodes[b].requires_grad {
                // dB = Aᵀ · G
                let mut gb = vec![0.0; batch * k * n];
                for t in 0..batch {
                    let (gt, at) = (&g[t * m * n..], &av[t * m * k..]);
                    for p in 0..k {
                        for i in 0..m {
                            let aip = at[i * k + p];
                            if aip == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                gb[t * k * n + p * n + j] += aip * gt[i * n + j];
                            }
                        }
                    }
                }
                acc(nodes, grads, b, gb);
            }
        }
        Op::Transpose {
            a,
            batch,
            rows,
            cols,
        } => {
            // forward mapped [rows, cols] -> [cols, rows]; g has the latter layout
            let ga = transpose(g, batch, cols, rows);
            acc(nodes, grads, a, ga);
        }
        Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = &node.value;
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + q;
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        ga[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            acc(nodes, grads, a, ga);
        }
        Op::Variance {
            a,
            outer,
            len,
            inner,
        } => {
            let x = &nodes[a].value;
            let mut ga = vec![0.0; x.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + q;
                    let mean = (0..len).map(|j| x[idx(j)]).sum::<f64>() / len as f64;
                    let go = g[o * inner + q];
                    for j in 0..len {
                        ga[idx(j)] = go * 2.0 * (x[idx(j)] - mean) / len as f64;
                    }
                }
            }
            acc(nodes, grads, a, ga);
        }
        Op::Conv2d { x, w, b, geom } => conv2d_backward(nodes, grads, x, w, b, geom, g),
        Op::PoolAvg {
            x,
            c,
            h,
            w,
            kernel: (kh, kw),
            stride: (sh, sw),
        } => {
            let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
            let inv = 1.0 / (kh * kw) as f64;
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(ch * oh + oy) * ow + ox] * inv;
                        for dy in 0..kh {
                            let row = (ch * h + oy * sh + dy) * w + ox * sw;
                            gx[row..row + kw].iter_mut().for_each(|v| *v += gv);
                        }
                    }
                }
            }
            acc(nodes, grads, x, gx);
        }
        Op::Resample {
            x,
            channels,
            ref map,
        } => acc(nodes, grads, x, map.backward(channels, g)),
        Op::Pad2d {
            x,
            c,
            h,
            w,
            top,
            left,
        } => {
            let (ph, pw) = (node.shape[1], node.shape[2]);
            let mut gx = vec![0.0; c * h * w];
            for ch in 0..c {
                for i in 0..h {
                    let src = (ch * ph + i + top) * pw + left;
                    let dst = (ch * h + i) * w;
                    gx[dst..dst + w].copy_from_slice(&g[src..src + w]);
                }
            }
            acc(nodes, grads, x, gx);
        }
        Op::Select { x, index, size } => {
            let mut gx = vec![0.0; nodes[x].value.len()];
            gx[index * size..(index + 1) * size].copy_from_slice(g);
            acc(nodes, grads, x, gx);
        }
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn transpose(v: &[f64], batch: usize, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for t in 0..batch {
        let base = t * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                out[base + j * rows + i] = v[base + i * cols + j];
            }
        }
    }
    out
}

/// Output columns `lo..hi` whose input column `ox·stride + kx − pad` lies in `0..w`.
fn valid_outputs(kx: usize, pad: usize, stride: usize, w: usize, ow: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kx).div_ceil(stride);
    let hi = if w + pad > kx {
        (w + pad - kx - 1) / stride + 1
    } else {
        0
    };
    (lo.min(ow), hi.min(ow).max(lo.min(ow)))
}

fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let mut out = vec![0.0; g.c_out * g.oh * g.ow];
    for o in 0..g.c_out {
        let b = bias.map_or(0.0, |b| b[o]);
        out[o * g.oh * g.ow..(o + 1) * g.oh * g.ow]
            .iter_mut()
            .for_each(|v| *v = b);
        for c in 0..g.c_in {
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let wv = wt[((o * g.c_in + c) * g.kh + ky) * g.kw + kx];
                    let (lo, hi) = valid_outputs(kx, g.pad, g.stride, g.w, g.ow);
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo >= hi {
                            continue;
                        }
                        let xrow =
                            &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                        let orow = &mut out[(o * g.oh + oy) * g.ow..(o * g.oh + oy + 1) * g.ow];
                        if g.stride == 1 {
                            let xs = &xrow[lo + kx - g.pad..hi + kx - g.pad];
                            for (ov, &xv) in orow[lo..hi].iter_mut().zip(xs) {
                                *ov += wv * xv;
                            }
                        } else {
                            for (ox, ov) in orow.iter_mut().enumerate().take(hi).skip(lo) {
                                *ov += wv * xrow[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    x: usize,
    w: usize,
    b: Option<usize>,
    geom: ConvGeom,
    g: &[f64],
) {
    let ConvGeom {
        c_in,
        h,
        w: width,
        c_out,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    } = geom;
    let (xv, wv) = (&nodes[x].value, &nodes[w].value);
    let need_x = nodes[x].requires_grad;
    let need_w = nodes[w].requires_grad;
    let mut gx = if need_x {
        vec![0.0; xv.len()]
    } else {
        Vec::new()
    };
    let mut gw = if need_w {
        vec![0.0; wv.len()]
    } else {
        Vec::new()
    };
    for o in 0..c_out {
        for c in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let widx = ((o * c_in + c) * kh + ky) * kw + kx;
                    let wval = wv[widx];
                    let mut wacc = 0.0;
                    let (lo, hi) = valid_outputs(kx, pad, stride, width, ow);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        if lo >= hi {
                            continue;
                        }
                        // lo · stride + kx ≥ pad, so these offsets never underflow
                        let xrow = (c * h + iy as usize) * width;
                        let gbase = (o * oh + oy) * ow;
                        let gs = &g[gbase + lo..gbase + hi];
                        if stride == 1 {
                            let span = xrow + lo + kx - pad..xrow + hi + kx - pad;
                            if need_x {
                                for (gxv, &gv) in gx[span.clone()].iter_mut().zip(gs) {
                                    *gxv += wval * gv;
                                }
                            }
                            if need_w {
                                wacc += xv[span].iter().zip(gs).map(|(a, b)| a * b).sum::<f64>();
                            }
                        } else {
                            for (k, &gv) in gs.iter().enumerate() {
                                let xi = xrow + (lo + k) * stride + kx - pad;
                                if need_x {
                                    gx[xi] += wval * gv;
                                }
                                if need_w {
                                    wacc += xv[xi] * gv;
                                }
                            }
                        }
                    }
                    if need_w {
                        gw[widx] += wacc;
                    }
                }
            }
        }
    }
    if need_x {
        acc(nodes, grads, x, gx);
    }
    if need_w {
        acc(nodes, grads, w, gw);
    }
    if let Some(b) = b {
        if nodes[b].requires_grad {
            let gb = (0..c_out)
                .map(|o| g[o * oh * ow..(o + 1) * oh * ow].iter().sum())
                .collect();
            acc(nodes, grads, b, gb);
        }
    }
}

/// `(outer, len, inner)` strides for reducing along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
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

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    /// First element; the value of a scalar.
    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn grad(&self) -> Option<Tensor> {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        n.grad
            .as_ref()
            .map(|g| Tensor::new(n.shape.clone(), g.clone()).expect("grad matches shape"))
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&v| f(v)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, value, op, rg)
    }

    fn binary(
        &self,
        other: &Var<'t>,
        op_name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let (al, bl) = (a.value.len(), b.value.len());
            let shape = if a.shape == b.shape || bl == 1 {
                a.shape.clone()
            } else if al == 1 {
                b.shape.clone()
            } else {
                return Err(TensorError::ShapeMismatch {
                    op: op_name,
                    lhs: a.shape.clone(),
                    rhs: b.shape.clone(),
                });
            };
            let n = al.max(bl);
            let value = (0..n)
                .map(|i| f(bval(&a.value, i), bval(&b.value, i)))
                .collect();
            (shape, value, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn elementwise(&self, kind: Elementwise, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        match kind {
            Elementwise::Add => self.add(other),
            Elementwise::Sub => self.sub(other),
            Elementwise::Mul => self.mul(other),
            Elementwise::Div => self.div(other),
        }
    }

    /// Elementwise sum; `other` may also be a single-element tensor.
    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, "div", Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn scale(&self, k: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, k), |v| v * k)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, k: f64) -> Var<'t> {
        self.unary(Op::Offset(self.id), |v| v + k)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(Op::Clamp(self.id, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn abs(&self) -> Var<'t> {
        self.unary(Op::Abs(self.id), f64::abs)
    }

    pub fn sign(&self) -> Var<'t> {
        self.unary(Op::Sign(self.id), sign)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(Op::Square(self.id), |v| v * v)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Op::Sqrt(self.id), f64::sqrt)
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), f64::tanh)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |v| v.max(0.0))
    }

    pub fn sum(&self) -> Var<'t> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum(), n.requires_grad)
        };
        self.tape.push(vec![1], vec![s], Op::Sum(self.id), rg)
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Batched matrix product over matching leading dimensions.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let mismatch = || TensorError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            };
            let (ra, rb) = (a.shape.len(), b.shape.len());
            if ra < 2 || ra != rb || a.shape[..ra - 2] != b.shape[..rb - 2] {
                return Err(mismatch());
            }
            let (m, k) = (a.shape[ra - 2], a.shape[ra - 1]);
            let (k2, n) = (b.shape[rb - 2], b.shape[rb - 1]);
            if k != k2 {
                return Err(mismatch());
            }
            let batch: usize = a.shape[..ra - 2].iter().product();
            let mut out = vec![0.0; batch * m * n];
            for t in 0..batch {
                let (at, bt) = (&a.value[t * m * k..], &b.value[t * k * n..]);
                let ot = &mut out[t * m * n..(t + 1) * m * n];
                for i in 0..m {
                    for p in 0..k {
                        let aip = at[i * k + p];
                        if aip == 0.0 {
                            continue;
                        }
                        let brow = &bt[p * n..p * n + n];
                        for (o, bv) in ot[i * n..i * n + n].iter_mut().zip(brow) {
                            *o += aip * bv;
                        }
                    }
                }
            }
            let mut shape = a.shape[..ra - 2].to_vec();
            shape.extend([m, n]);
            let op = Op::Matmul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
            };
            (shape, out, op, a.requires_grad || b.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Swaps the last two dimensions.
    pub fn transpose(&self) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let r = a.shape.len();
            if r < 2 {
                return Err(TensorError::invalid("transpose", "rank must be at least 2"));
            }
            let (rows, cols) = (a.shape[r - 2], a.shape[r - 1]);
            let batch = a.value.len() / (rows * cols);
            let mut shape = a.shape.clone();
            shape.swap(r - 2, r - 1);
            let op = Op::Transpose {
                a: self.id,
                batch,
                rows,
                cols,
            };
            (
                shape,
                transpose(&a.value, batch, rows, cols),
                op,
                a.requires_grad,
            )
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if shape.iter().product::<usize>() != a.value.len() {
                return Err(TensorError::InvalidShape {
                    shape: shape.to_vec(),
                    len: a.value.len(),
                });
            }
            (a.value.clone(), a.requires_grad)
        };
        Ok(self
            .tape
            .push(shape.to_vec(), value, Op::Reshape(self.id), rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (outer, len, inner) = axis_split(&a.shape, axis)?;
            let mut out = vec![0.0; a.value.len()];
            for o in 0..outer {
                for q in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + q;
                    let max = (0..len)
                        .map(|j| a.value[idx(j)])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..len {
                        let e = (a.value[idx(j)] - max).exp();
                        out[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..len {
                        out[idx(j)] /= total;
                    }
                }
            }
            let op = Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            };
            (a.shape.clone(), out, op, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Population variance (1/n normalisation) along `axis`; that axis is removed.
    pub fn variance(&self, axis: usize) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            let (outer, len, inner) = axis_split(&a.shape, axis)?;
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for q in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + q;
                    let mean = (0..len).map(|j| a.value[idx(j)]).sum::<f64>() / len as f64;
                    out[o * inner + q] = (0..len)
                        .map(|j| (a.value[idx(j)] - mean).powi(2))
                        .sum::<f64>()
                        / len as f64;
                }
            }
            let mut shape = a.shape.clone();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            let op = Op::Variance {
                a: self.id,
                outer,
                len,
                inner,
            };
            (shape, out, op, a.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Cross-correlation of `[c_in, h, w]` input with `[c_out, c_in, kh, kw]`
    /// weights, symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Var<'t>,
        bias: Option<&Var<'t>>,
        stride: usize,
        padding: usize,
    ) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id], &nodes[weight.id]);
            let (c_in, h, width) = match x.shape[..] {
                [c, h, w] => (c, h, w),
                _ => return Err(TensorError::invalid("conv2d", "input must be [c, h, w]")),
            };
            let (c_out, wc, kh, kw) = match w.shape[..] {
                [o, c, kh, kw] => (o, c, kh, kw),
                _ => {
                    return Err(TensorError::invalid(
                        "conv2d",
                        "weight must be [c_out, c_in, kh, kw]",
                    ))
                }
            };
            if wc != c_in {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    lhs: x.shape.clone(),
                    rhs: w.shape.clone(),
                });
            }
            if stride == 0 {
                return Err(TensorError::invalid("conv2d", "stride must be positive"));
            }
            if kh > h + 2 * padding || kw > width + 2 * padding {
                return Err(TensorError::invalid(
                    "conv2d",
                    format!(
                        "kernel {kh}x{kw} larger than padded input {}x{}",
                        h + 2 * padding,
                        width + 2 * padding
                    ),
                ));
            }
            let bias_val = match bias {
                Some(b) => {
                    let bn = &nodes[b.id];
                    if bn.value.len() != c_out {
                        return Err(TensorError::ShapeMismatch {
                            op: "conv2d bias",
                            lhs: w.shape.clone(),
                            rhs: bn.shape.clone(),
                        });
                    }
                    Some(bn.value.as_slice())
                }
                None => None,
            };
            let geom = ConvGeom {
                c_in,
                h,
                w: width,
                c_out,
                kh,
                kw,
                stride,
                pad: padding,
                oh: (h + 2 * padding - kh) / stride + 1,
                ow: (width + 2 * padding - kw) / stride + 1,
            };
            let out = conv2d_forward(&x.value, &w.value, bias_val, geom);
            let rg = x.requires_grad
                || w.requires_grad
                || bias.is_some_and(|b| nodes[b.id].requires_grad);
            let op = Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                geom,
            };
            (vec![c_out, geom.oh, geom.ow], out, op, rg)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Average pooling over `[c, h, w]`; the window grid must tile the input exactly.
    pub fn pool_avg(
        &self,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (c, h, w) = match x.shape[..] {
                [c, h, w] => (c, h, w),
                _ => return Err(TensorError::invalid("pool_avg", "input must be [c, h, w]")),
            };
            let ((kh, kw), (sh, sw)) = (kernel, stride);
            if kh == 0 || kw == 0 || sh == 0 || sw == 0 || kh > h || kw > w {
                return Err(TensorError::invalid(
                    "pool_avg",
                    format!("kernel {kh}x{kw} stride {sh}x{sw} invalid for {h}x{w}"),
                ));
            }
            if (h - kh) % sh != 0 || (w - kw) % sw != 0 {
                return Err(TensorError::invalid(
                    "pool_avg",
                    format!("kernel {kh}x{kw} stride {sh}x{sw} does not tile {h}x{w}"),
                ));
            }
            let (oh, ow) = ((h - kh) / sh + 1, (w - kw) / sw + 1);
            let mut out = vec![0.0; c * oh * ow];
            for ch in 0..c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = 0.0;
                        for dy in 0..kh {
                            let row = (ch * h + oy * sh + dy) * w + ox * sw;
                            s += x.value[row..row + kw].iter().sum::<f64>();
                        }
                        out[(ch * oh + oy) * ow + ox] = s / (kh * kw) as f64;
                    }
                }
            }
            let op = Op::PoolAvg {
                x: self.id,
                c,
                h,
                w,
                kernel,
                stride,
            };
            (vec![c, oh, ow], out, op, x.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    pub fn resize(&self, target: (usize, usize), mode: ResizeMode) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let (h, w) = match shape[..] {
            [_, h, w] => (h, w),
            _ => return Err(TensorError::invalid("resize", "input must be [c, h, w]")),
        };
        let map = Resample2d::new(mode, (h, w), target)?;
        self.resample(Rc::new(map))
    }

    pub fn resample(&self, map: Rc<Resample2d>) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let c = match x.shape[..] {
                [c, h, w] if (h, w) == map.input_hw() => c,
                _ => {
                    return Err(TensorError::invalid(
                        "resample",
                        format!(
                            "input {:?} does not match map {:?}",
                            x.shape,
                            map.input_hw()
                        ),
                    ))
                }
            };
            let (oh, ow) = map.output_hw();
            let out = map.forward(c, &x.value);
            let op = Op::Resample {
                x: self.id,
                channels: c,
                map,
            };
            (vec![c, oh, ow], out, op, x.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Zero padding of a `[c, h, w]` tensor.
    pub fn pad2d(
        &self,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            let (c, h, w) = match x.shape[..] {
                [c, h, w] => (c, h, w),
                _ => return Err(TensorError::invalid("pad2d", "input must be [c, h, w]")),
            };
            let (ph, pw) = (h + top + bottom, w + left + right);
            let mut out = vec![0.0; c * ph * pw];
            for ch in 0..c {
                for i in 0..h {
                    let dst = (ch * ph + i + top) * pw + left;
                    let src = (ch * h + i) * w;
                    out[dst..dst + w].copy_from_slice(&x.value[src..src + w]);
                }
            }
            let op = Op::Pad2d {
                x: self.id,
                c,
                h,
                w,
                top,
                left,
            };
            (vec![c, ph, pw], out, op, x.requires_grad)
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// Slice `index` along the first axis, dropping that axis.
    pub fn select(&self, index: usize) -> Result<Var<'t>, TensorError> {
        let (shape, value, op, rg) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id];
            if x.shape.len() < 2 || index >= x.shape[0] {
                return Err(TensorError::invalid(
                    "select",
                    format!("index {index} invalid for shape {:?}", x.shape),
                ));
            }
            let size = x.value.len() / x.shape[0];
            let op = Op::Select {
                x: self.id,
                index,
                size,
            };
            (
                x.shape[1..].to_vec(),
                x.value[index * size..(index + 1) * size].to_vec(),
                op,
                x.requires_grad,
            )
        };
        Ok(self.tape.push(shape, value, op, rg))
    }

    /// `self / sqrt(sum(self^2))`.
    pub fn l2_normalize(&self) -> Result<Var<'t>, TensorError> {
        let norm = self.square().sum().sqrt();
        self.div(&norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(&b).unwrap().value().data(), &[4.0, 6.0]);
        let c = tape.constant(&t(&[3], &[-0.2, 0.5, 1.3]));
        assert_eq!(c.clamp(0.0, 1.0).value().data(), &[0.0, 0.5, 1.0]);
        let s = tape.constant(&t(&[3], &[-3.0, 0.0, 7.0]));
        assert_eq!(s.sign().value().data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(
            s.elementwise(Elementwise::Mul, &tape.scalar(2.0))
                .unwrap()
                .value()
                .data(),
            &[-6.0, 0.0, 14.0]
        );
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(&Tensor::zeros(&[2, 3]));
        let b = tape.constant(&Tensor::zeros(&[3, 2]));
        let err = a.add(&b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2, 3],
                rhs: vec![3, 2]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[3, 2]"));
    }

    #[test]
    fn matmul_hand_product_and_identity() {
        let tape = Tape::new();
        let a = tape.constant(&t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(&t(&[2, 1], &[3.0, 4.0]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[11.0]);
        let id = tape.constant(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(&t(&[2, 2], &[0.3, -1.0, 2.5, 7.0]));
        assert_eq!(id.matmul(&m).unwrap().value(), m.value());
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let z = tape.constant(&Tensor::zeros(&[3]));
        for v in z.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = tape.constant(&t(&[2], &[1000.0, 0.0]));
        let s = big.softmax(0).unwrap().value();
        assert!((s.data()[0] - 1.0).abs() < 1e-9 && s.data()[1] < 1e-9);
        assert!(matches!(
            z.softmax(1),
            Err(TensorError::InvalidAxis { axis: 1, rank: 1 })
        ));
    }

    #[test]
    fn variance_examples() {
        let tape = Tape::new();
        let c = tape.constant(&t(&[3], &[1.0, 1.0, 1.0]));
        assert_eq!(c.variance(0).unwrap().item(), 0.0);
        let one_hot = tape.constant(&t(&[4], &[0.0, 1.0, 0.0, 0.0]));
        assert!((one_hot.variance(0).unwrap().item() - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn conv2d_examples() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 3, 3], 1.0));
        let w = tape.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        assert_eq!(x.conv2d(&w, None, 1, 0).unwrap().value().data(), &[9.0]);
        let one = tape.constant(&Tensor::full(&[1, 1, 1, 1], 1.0));
        let img = tape.constant(&Tensor::from_fn(&[1, 3, 3], |i| i as f64));
        assert_eq!(img.conv2d(&one, None, 1, 0).unwrap().value(), img.value());
        let big = tape.constant(&Tensor::full(&[1, 1, 5, 5], 1.0));
        assert!(x.conv2d(&big, None, 1, 0).is_err());
        assert!(x.conv2d(&big, None, 1, 1).is_ok());
    }

    #[test]
    fn pool_examples() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.pool_avg((2, 2), (2, 2)).unwrap().value().data(), &[2.5]);
        assert_eq!(x.pool_avg((1, 1), (1, 1)).unwrap().value(), x.value());
        let y = tape.constant(&Tensor::zeros(&[1, 5, 5]));
        assert!(y.pool_avg((2, 2), (2, 2)).is_err());
    }

    #[test]
    fn resize_examples() {
        let tape = Tape::new();
        let x = tape.constant(&t(&[1, 1, 1], &[5.0]));
        let up = x.resize((2, 2), ResizeMode::Nearest).unwrap();
        assert_eq!(up.value().data(), &[5.0; 4]);
        let r = tape.constant(&t(&[1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let b = r.resize((3, 3), ResizeMode::Bilinear).unwrap().value();
        let expect = [0.0, 0.5, 1.0, 0.0, 0.5, 1.0, 0.0, 0.5, 1.0];
        for (v, e) in b.data().iter().zip(expect) {
            assert!((v - e).abs() < 1e-9);
        }
        for mode in [ResizeMode::Nearest, ResizeMode::Bilinear, ResizeMode::Area] {
            assert_eq!(r.resize((2, 2), mode).unwrap().value(), r.value());
        }
        assert!(r.resize((0, 2), ResizeMode::Nearest).is_err());
    }

    #[test]
    fn backward_examples() {
        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let loss = x.square().sum();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);
        assert_eq!(tape.backward(loss), Err(TensorError::GradientsPopulated));
        tape.backward_accumulate(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[4.0, 8.0]);
        tape.zero_grad();
        tape.backward(loss).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[2.0, 4.0]);

        let tape = Tape::new();
        let x = tape.param(&t(&[2], &[1.0, 2.0]));
        let c = tape.scalar(3.0);
        tape.backward(c).unwrap();
        assert_eq!(x.grad().unwrap().data(), &[0.0, 0.0]);
        assert!(matches!(
            tape.zero_grad_then(|| tape.backward(x)),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    impl Tape {
        fn zero_grad_then<R>(&self, f: impl FnOnce() -> R) -> R {
            self.zero_grad();
            f()
        }
    }
}
