//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation eagerly; [`Var`] is a cheap handle into
//! it. Leaves created with [`Tape::var`] receive gradients, leaves created with
//! [`Tape::constant`] do not, and subgraphs that depend only on constants are
//! skipped during [`Tape::backward`].
//!
//! Broadcasting is never implicit. Bias-style additions have their own ops
//! ([`Tape::add_row_bias`], [`Tape::add_channel_bias`], [`Tape::channel_affine`]).

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{PdenError, Result};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Floor applied to the per-channel standard deviation in instance statistics.
pub const INSTANCE_STD_FLOOR: f64 = 1e-5;
/// Minimum row norm accepted by [`Tape::l2_normalize`].
pub const L2_NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Convolution geometry.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    AddChannelBias(Var, Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    Softmax(Var),
    L2Normalize(Var),
    Conv2d(Var, Var, Conv2dSpec),
    Upsample2x(Var),
    GlobalAvgPool(Var),
    InstanceNorm(Var),
    ChannelAffine(Var, Var, Var),
    StopGradient,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::Neg(..) => "neg",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Sigmoid(..) => "sigmoid",
            Op::Sqrt(..) => "sqrt",
            Op::ClampMin(..) => "clamp_min",
            Op::ClampMax(..) => "clamp_max",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::AddRowBias(..) => "add_row_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::Reshape(..) => "reshape",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Gather(..) => "gather",
            Op::Softmax(..) => "softmax",
            Op::L2Normalize(..) => "l2_normalize",
            Op::Conv2d(..) => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::InstanceNorm(..) => "instance_norm",
            Op::ChannelAffine(..) => "channel_affine",
            Op::StopGradient => "stop_gradient",
        }
    }
}

/// Every differentiable op name, as reported by the gradient checker.
pub const OP_NAMES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "neg",
    "exp",
    "log",
    "relu",
    "tanh",
    "sigmoid",
    "sqrt",
    "clamp_min",
    "clamp_max",
    "sum",
    "mean",
    "sum_rows",
    "matmul",
    "transpose",
    "add_row_bias",
    "add_channel_bias",
    "reshape",
    "concat_rows",
    "slice_rows",
    "gather",
    "softmax",
    "l2_normalize",
    "conv2d",
    "upsample2x",
    "global_avg_pool",
    "instance_norm",
    "channel_affine",
];

struct Node {
    value: Rc<Tensor>,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape. Single-threaded; build one per training step.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    fault: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: None,
        }
    }

    /// A tape whose backward rule for `op` is deliberately wrong (scaled by
    /// 1.5). Used as the negative control of the gradient checker.
    pub fn with_fault(op: &'static str) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            fault: Some(op),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            grad: None,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn rg_any(&self, vs: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vs.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `v`, but gradients do not flow back through it.
    pub fn stop_gradient(&self, v: Var) -> Var {
        let value = (*self.value(v)).clone();
        self.push(value, Op::StopGradient, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    /// Accumulated gradient of `v`, zeros if nothing reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let node = &nodes[v.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let value = self.value(a).zip_map(&self.value(b), f)?;
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().contains(&0.0) {
            return Err(PdenError::Domain("division by zero".into()));
        }
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(PdenError::Domain("log of non-positive value".into()));
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(PdenError::Domain("sqrt of negative value".into()));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    pub fn clamp_min(&self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    pub fn clamp_max(&self, a: Var, hi: f64) -> Var {
        self.unary(a, |x| x.min(hi), Op::ClampMax(a, hi))
    }

    // ---- reductions and shape ---------------------------------------------

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = self.value(a).mean();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Sums each leading-axis slice: `[N, ...] -> [N]`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let v = self.value(a);
        let n = v.shape()[0];
        let row = v.len() / n;
        let data = v.data().chunks(row).map(|r| r.iter().sum()).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(vec![n], data).unwrap(), Op::SumRows(a), rg)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(PdenError::Shape(format!("matmul {:?} x {:?}", av.shape(), bv.shape())));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg_any(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 {
            return Err(PdenError::Shape("transpose needs a 2-d tensor".into()));
        }
        let rg = self.rg(a);
        Ok(self.push(v.transpose2(), Op::Transpose(a), rg))
    }

    /// `x[N×D] + b[D]` row-wise.
    pub fn add_row_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.ndim() != 2 || bv.len() != xv.shape()[1] {
            return Err(PdenError::Shape(format!(
                "add_row_bias {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let d = bv.len();
        let mut out = (*xv).clone();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let rg = self.rg_any(&[x, b]);
        Ok(self.push(out, Op::AddRowBias(x, b), rg))
    }

    /// `x[N×C×H×W] + b[C]` per channel.
    pub fn add_channel_bias(&self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if xv.ndim() != 4 || bv.len() != xv.shape()[1] {
            return Err(PdenError::Shape(format!(
                "add_channel_bias {:?} + {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let hw = xv.shape()[2] * xv.shape()[3];
        let c = bv.len();
        let mut out = (*xv).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let bb = bv.data()[i % c];
            plane.iter_mut().for_each(|o| *o += bb);
        }
        let rg = self.rg_any(&[x, b]);
        Ok(self.push(out, Op::AddChannelBias(x, b), rg))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&self, a: Var) -> Result<Var> {
        let shape = self.shape(a);
        let n = shape[0];
        let rest = shape[1..].iter().product();
        self.reshape(a, &[n, rest])
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::concat_rows(&refs)?;
        let rg = self.rg_any(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&self, a: Var, start: usize, count: usize) -> Result<Var> {
        let v = self.value(a);
        if count == 0 || start + count > v.shape()[0] {
            return Err(PdenError::Shape(format!(
                "slice_rows [{start}, {}) of {}",
                start + count,
                v.shape()[0]
            )));
        }
        let out = v.slice_rows(start, count);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    /// Picks `a[i, idx[i]]` from a 2-d tensor: `[N×M] -> [N]`.
    pub fn gather(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 || idx.len() != v.shape()[0] {
            return Err(PdenError::Shape("gather: index count != rows".into()));
        }
        let m = v.shape()[1];
        if let Some(&bad) = idx.iter().find(|&&j| j >= m) {
            return Err(PdenError::InvalidArgument(format!(
                "gather index {bad} out of range for {m} columns"
            )));
        }
        let data = idx.iter().enumerate().map(|(i, &j)| v.data()[i * m + j]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![idx.len()], data)?, Op::Gather(a, idx.to_vec()), rg))
    }

    // ---- normalizations ---------------------------------------------------

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 {
            return Err(PdenError::Shape("softmax needs a 2-d tensor".into()));
        }
        let m = v.shape()[1];
        let mut out = (*v).clone();
        for row in out.data_mut().chunks_mut(m) {
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - mx).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize(&self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.ndim() != 2 {
            return Err(PdenError::Shape("l2_normalize needs a 2-d tensor".into()));
        }
        let d = v.shape()[1];
        let mut out = (*v).clone();
        for row in out.data_mut().chunks_mut(d) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm <= L2_NORM_EPS {
                return Err(PdenError::Domain(format!("row norm {norm:e} too small to normalize")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::L2Normalize(a), rg))
    }

    /// Per-sample, per-channel normalization `(z - mu) / sigma` with population
    /// statistics over spatial positions and `sigma` floored at
    /// [`INSTANCE_STD_FLOOR`].
    pub fn instance_norm(&self, z: Var) -> Result<Var> {
        let v = self.value(z);
        check_nchw(&v, "instance_norm")?;
        let hw = v.shape()[2] * v.shape()[3];
        if hw < 2 {
            return Err(PdenError::Shape("instance_norm needs H*W >= 2".into()));
        }
        let mut out = (*v).clone();
        for plane in out.data_mut().chunks_mut(hw) {
            let (mu, sigma) = plane_stats(plane);
            plane.iter_mut().for_each(|x| *x = (*x - mu) / sigma);
        }
        let rg = self.rg(z);
        Ok(self.push(out, Op::InstanceNorm(z), rg))
    }

    /// `x * scale + shift` with `scale`, `shift` of shape `[N×C]` applied per
    /// sample and channel.
    pub fn channel_affine(&self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        let (xv, sv, tv) = (self.value(x), self.value(scale), self.value(shift));
        check_nchw(&xv, "channel_affine")?;
        let nc = [xv.shape()[0], xv.shape()[1]];
        if sv.shape() != nc || tv.shape() != nc {
            return Err(PdenError::Shape(format!(
                "channel_affine: scale {:?} / shift {:?} vs {:?}",
                sv.shape(),
                tv.shape(),
                nc
            )));
        }
        let hw = xv.shape()[2] * xv.shape()[3];
        let mut out = (*xv).clone();
        for (i, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let (s, t) = (sv.data()[i], tv.data()[i]);
            plane.iter_mut().for_each(|o| *o = *o * s + t);
        }
        let rg = self.rg_any(&[x, scale, shift]);
        Ok(self.push(out, Op::ChannelAffine(x, scale, shift), rg))
    }

    // ---- spatial ------------------------------------------------------------

    /// Cross-correlation of `x[N×C×H×W]` with `w[O×C×kh×kw]`.
    pub fn conv2d(&self, x: Var, w: Var, spec: Conv2dSpec) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let geo = ConvGeometry::new(xv.shape(), wv.shape(), spec)?;
        let mut out = vec![0.0; geo.n * geo.o * geo.ho * geo.wo];
        let mut cols = vec![0.0; geo.ckk() * geo.hw_out()];
        for s in 0..geo.n {
            geo.im2col(&xv.data()[s * geo.in_len()..(s + 1) * geo.in_len()], &mut cols);
            let dst = &mut out[s * geo.out_len()..(s + 1) * geo.out_len()];
            gemm_acc(wv.data(), &cols, dst, geo.o, geo.ckk(), geo.hw_out());
        }
        let rg = self.rg_any(&[x, w]);
        Ok(self.push(
            Tensor::new(vec![geo.n, geo.o, geo.ho, geo.wo], out)?,
            Op::Conv2d(x, w, spec),
            rg,
        ))
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        check_nchw(&v, "upsample2x")?;
        let (n, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
        let mut out = vec![0.0; n * c * 4 * h * w];
        for p in 0..n * c {
            let src = &v.data()[p * h * w..(p + 1) * h * w];
            let dst = &mut out[p * 4 * h * w..(p + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c, 2 * h, 2 * w], out)?, Op::Upsample2x(x), rg))
    }

    /// Spatial mean per channel: `[N×C×H×W] -> [N×C]`.
    pub fn global_avg_pool(&self, x: Var) -> Result<Var> {
        let v = self.value(x);
        check_nchw(&v, "global_avg_pool")?;
        let (n, c) = (v.shape()[0], v.shape()[1]);
        let hw = v.shape()[2] * v.shape()[3];
        let data = v.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x), rg))
    }

    // ---- backward -------------------------------------------------------------

    /// Accumulates d(root)/d(node) into every node that depends on a
    /// differentiable leaf. Calling it again without [`Tape::zero_grad`] adds
    /// to the stored gradients.
    pub fn backward(&self, root: Var) -> Result<()> {
        let root_shape = self.shape(root);
        if root_shape.iter().product::<usize>() != 1 {
            return Err(PdenError::Shape(format!(
                "backward needs a scalar root, got shape {root_shape:?}"
            )));
        }
        let mut nodes = self.nodes.borrow_mut();
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::ones(&root_shape));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !nodes[id].requires_grad {
                continue;
            }
            let op = nodes[id].op.clone();
            let mut contributions = self.local_backward(&nodes, id, &op, &g);
            if self.fault == Some(op.name()) {
                for (_, c) in contributions.iter_mut() {
                    c.data_mut().iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (parent, c) in contributions {
                if !nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
            match &mut nodes[id].grad {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn local_backward(&self, nodes: &[Node], id: usize, op: &Op, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };
        let out = &nodes[id].value;
        let need = |v: Var| nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.clone()));
            }
            Op::Sub(a, b) => {
                res.push((*a, g.clone()));
                res.push((*b, g.map(|x| -x)));
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    res.push((*a, g.zip_map(val(*b), |x, y| x * y).unwrap()));
                }
                if need(*b) {
                    res.push((*b, g.zip_map(val(*a), |x, y| x * y).unwrap()));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if need(*a) {
                    res.push((*a, g.zip_map(bv, |x, y| x / y).unwrap()));
                }
                if need(*b) {
                    // d(a/b)/db = -out / b
                    let t = out.zip_map(bv, |o, y| -o / y).unwrap();
                    res.push((*b, g.zip_map(&t, |x, y| x * y).unwrap()));
                }
            }
            Op::AddScalar(a) => res.push((*a, g.clone())),
            Op::MulScalar(a, c) => res.push((*a, g.map(|x| x * c))),
            Op::Neg(a) => res.push((*a, g.map(|x| -x))),
            Op::Exp(a) => res.push((*a, g.zip_map(out, |x, o| x * o).unwrap())),
            Op::Log(a) => res.push((*a, g.zip_map(val(*a), |x, v| x / v).unwrap())),
            Op::Relu(a) => res.push((*a, g.zip_map(val(*a), |x, v| if v > 0.0 { x } else { 0.0 }).unwrap())),
            Op::Tanh(a) => res.push((*a, g.zip_map(out, |x, o| x * (1.0 - o * o)).unwrap())),
            Op::Sigmoid(a) => res.push((*a, g.zip_map(out, |x, o| x * o * (1.0 - o)).unwrap())),
            Op::Sqrt(a) => res.push((
                *a,
                g.zip_map(out, |x, o| if o > 0.0 { x * 0.5 / o } else { 0.0 }).unwrap(),
            )),
            Op::ClampMin(a, lo) => res.push((*a, g.zip_map(val(*a), |x, v| if v > *lo { x } else { 0.0 }).unwrap())),
            Op::ClampMax(a, hi) => res.push((*a, g.zip_map(val(*a), |x, v| if v < *hi { x } else { 0.0 }).unwrap())),
            Op::Sum(a) => res.push((*a, Tensor::full(val(*a).shape(), g.item()))),
            Op::Mean(a) => {
                let av = val(*a);
                res.push((*a, Tensor::full(av.shape(), g.item() / av.len() as f64)));
            }
            Op::SumRows(a) => {
                let av = val(*a);
                let row = av.len() / av.shape()[0];
                let data = g.data().iter().flat_map(|&gi| std::iter::repeat_n(gi, row)).collect();
                res.push((*a, Tensor::new(av.shape().to_vec(), data).unwrap()));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if need(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt_acc(g.data(), bv.data(), &mut ga, m, n, k);
                    res.push((*a, Tensor::new(vec![m, k], ga).unwrap()));
                }
                if need(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn_acc(av.data(), g.data(), &mut gb, k, m, n);
                    res.push((*b, Tensor::new(vec![k, n], gb).unwrap()));
                }
            }
            Op::Transpose(a) => res.push((*a, g.transpose2())),
            Op::AddRowBias(x, b) => {
                res.push((*x, g.clone()));
                if need(*b) {
                    let d = val(*b).len();
                    let mut gb = vec![0.0; d];
                    for row in g.data().chunks(d) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    res.push((*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap()));
                }
            }
            Op::AddChannelBias(x, b) => {
                res.push((*x, g.clone()));
                if need(*b) {
                    let xs = val(*x).shape();
                    let (c, hw) = (xs[1], xs[2] * xs[3]);
                    let mut gb = vec![0.0; c];
                    for (i, plane) in g.data().chunks(hw).enumerate() {
                        gb[i % c] += plane.iter().sum::<f64>();
                    }
                    res.push((*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap()));
                }
            }
            Op::Reshape(a) => res.push((*a, g.reshape(val(*a).shape()).unwrap())),
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = val(p).shape()[0];
                    if need(p) {
                        res.push((p, g.slice_rows(offset, rows)));
                    }
                    offset += rows;
                }
            }
            Op::SliceRows(a, start) => {
                let av = val(*a);
                let row = av.len() / av.shape()[0];
                let mut ga = Tensor::zeros(av.shape());
                ga.data_mut()[start * row..start * row + g.len()].copy_from_slice(g.data());
                res.push((*a, ga));
            }
            Op::Gather(a, idx) => {
                let av = val(*a);
                let m = av.shape()[1];
                let mut ga = Tensor::zeros(av.shape());
                for (i, &j) in idx.iter().enumerate() {
                    ga.data_mut()[i * m + j] = g.data()[i];
                }
                res.push((*a, ga));
            }
            Op::Softmax(a) => {
                let m = out.shape()[1];
                let mut ga = g.clone();
                for (grow, orow) in ga.data_mut().chunks_mut(m).zip(out.data().chunks(m)) {
                    let dot: f64 = grow.iter().zip(orow).map(|(x, y)| x * y).sum();
                    for (x, &y) in grow.iter_mut().zip(orow) {
                        *x = y * (*x - dot);
                    }
                }
                res.push((*a, ga));
            }
            Op::L2Normalize(a) => {
                let av = val(*a);
                let d = av.shape()[1];
                let mut ga = g.clone();
                for ((grow, orow), arow) in ga
                    .data_mut()
                    .chunks_mut(d)
                    .zip(out.data().chunks(d))
                    .zip(av.data().chunks(d))
                {
                    let norm = arow.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = grow.iter().zip(orow).map(|(x, y)| x * y).sum();
                    for (x, &y) in grow.iter_mut().zip(orow) {
                        *x = (*x - y * dot) / norm;
                    }
                }
                res.push((*a, ga));
            }
            Op::InstanceNorm(z) => {
                let zv = val(*z);
                let hw = zv.shape()[2] * zv.shape()[3];
                let mut gz = g.clone();
                for ((gp, op_), zp) in gz
                    .data_mut()
                    .chunks_mut(hw)
                    .zip(out.data().chunks(hw))
                    .zip(zv.data().chunks(hw))
                {
                    let (_, sigma) = plane_stats(zp);
                    let raw_std = raw_std(zp);
                    let gmean = gp.iter().sum::<f64>() / hw as f64;
                    if raw_std > INSTANCE_STD_FLOOR {
                        let gy_mean = gp.iter().zip(op_).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                        for (x, &y) in gp.iter_mut().zip(op_) {
                            *x = (*x - gmean - y * gy_mean) / sigma;
                        }
                    } else {
                        // sigma is the constant floor here
                        for x in gp.iter_mut() {
                            *x = (*x - gmean) / sigma;
                        }
                    }
                }
                res.push((*z, gz));
            }
            Op::ChannelAffine(x, s, t) => {
                let (xv, sv) = (val(*x), val(*s));
                let hw = xv.shape()[2] * xv.shape()[3];
                if need(*x) {
                    let mut gx = g.clone();
                    for (i, plane) in gx.data_mut().chunks_mut(hw).enumerate() {
                        let sc = sv.data()[i];
                        plane.iter_mut().for_each(|v| *v *= sc);
                    }
                    res.push((*x, gx));
                }
                if need(*s) {
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    res.push((*s, Tensor::new(sv.shape().to_vec(), data).unwrap()));
                }
                if need(*t) {
                    let data = g.data().chunks(hw).map(|gp| gp.iter().sum()).collect();
                    res.push((*t, Tensor::new(sv.shape().to_vec(), data).unwrap()));
                }
            }
            Op::Conv2d(x, w, spec) => {
                let (xv, wv) = (val(*x), val(*w));
                let geo = ConvGeometry::new(xv.shape(), wv.shape(), *spec).unwrap();
                let mut gw = vec![0.0; wv.len()];
                let mut gx = if need(*x) { vec![0.0; xv.len()] } else { Vec::new() };
                let mut cols = vec![0.0; geo.ckk() * geo.hw_out()];
                let mut gcols = vec![0.0; geo.ckk() * geo.hw_out()];
                for s in 0..geo.n {
                    let gout = &g.data()[s * geo.out_len()..(s + 1) * geo.out_len()];
                    if need(*w) {
                        geo.im2col(&xv.data()[s * geo.in_len()..(s + 1) * geo.in_len()], &mut cols);
                        gemm_nt_acc(gout, &cols, &mut gw, geo.o, geo.hw_out(), geo.ckk());
                    }
                    if need(*x) {
                        gcols.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn_acc(wv.data(), gout, &mut gcols, geo.ckk(), geo.o, geo.hw_out());
                        geo.col2im(&gcols, &mut gx[s * geo.in_len()..(s + 1) * geo.in_len()]);
                    }
                }
                if need(*w) {
                    res.push((*w, Tensor::new(wv.shape().to_vec(), gw).unwrap()));
                }
                if need(*x) {
                    res.push((*x, Tensor::new(xv.shape().to_vec(), gx).unwrap()));
                }
            }
            Op::Upsample2x(x) => {
                let xs = val(*x).shape();
                let (h, w) = (xs[2], xs[3]);
                let mut gx = Tensor::zeros(xs);
                for (p, dst) in gx.data_mut().chunks_mut(h * w).enumerate() {
                    let src = &g.data()[p * 4 * h * w..(p + 1) * 4 * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            dst[(i / 2) * w + j / 2] += src[i * 2 * w + j];
                        }
                    }
                }
                res.push((*x, gx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = val(*x).shape();
                let hw = xs[2] * xs[3];
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gi| std::iter::repeat_n(gi / hw as f64, hw))
                    .collect();
                res.push((*x, Tensor::new(xs.to_vec(), data).unwrap()));
            }
        }
        res
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

fn check_nchw(t: &Tensor, what: &str) -> Result<()> {
    if t.ndim() != 4 {
        return Err(PdenError::Shape(format!("{what} needs N×C×H×W, got {:?}", t.shape())));
    }
    Ok(())
}

fn raw_std(plane: &[f64]) -> f64 {
    let n = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / n;
    (plane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n).sqrt()
}

/// Mean and floored population standard deviation of one spatial plane.
fn plane_stats(plane: &[f64]) -> (f64, f64) {
    let n = plane.len() as f64;
    let mu = plane.iter().sum::<f64>() / n;
    let var = plane.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, var.sqrt().max(INSTANCE_STD_FLOOR))
}

/// Per-sample, per-channel mean and population standard deviation (floored at
/// [`INSTANCE_STD_FLOOR`]) over spatial positions.
pub fn instance_stats(z: &Tensor) -> Result<(Tensor, Tensor)> {
    check_nchw(z, "instance_stats")?;
    let (n, c) = (z.shape()[0], z.shape()[1]);
    let hw = z.shape()[2] * z.shape()[3];
    if hw < 2 {
        return Err(PdenError::Shape("instance_stats needs H*W >= 2".into()));
    }
    let (mus, sigmas): (Vec<f64>, Vec<f64>) = z.data().chunks(hw).map(plane_stats).unzip();
    Ok((Tensor::new(vec![n, c], mus)?, Tensor::new(vec![n, c], sigmas)?))
}

struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], spec: Conv2dSpec) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 || x[1] != w[1] {
            return Err(PdenError::Shape(format!("conv2d input {x:?} with kernel {w:?}")));
        }
        if spec.stride == 0 {
            return Err(PdenError::InvalidArgument("conv2d stride must be positive".into()));
        }
        let (hp, wp) = (x[2] + 2 * spec.padding, x[3] + 2 * spec.padding);
        if w[2] > hp || w[3] > wp {
            return Err(PdenError::Shape(format!(
                "kernel {}x{} larger than padded input {hp}x{wp}",
                w[2], w[3]
            )));
        }
        Ok(Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            o: w[0],
            kh: w[2],
            kw: w[3],
            ho: (hp - w[2]) / spec.stride + 1,
            wo: (wp - w[3]) / spec.stride + 1,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_len(&self) -> usize {
        self.o * self.hw_out()
    }

    /// Calls `f(col_row, out_pos, in_index)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let r = (ci * self.kh + ki) * self.kw + kj;
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj < 0 || jj >= self.w as isize {
                                continue;
                            }
                            f(r, oi * self.wo + oj, (ci * self.h + ii as usize) * self.w + jj as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let hw = self.hw_out();
        self.for_each_tap(|r, p, i| cols[r * hw + p] = x[i]);
    }

    fn col2im(&self, cols: &[f64], x: &mut [f64]) {
        let hw = self.hw_out();
        self.for_each_tap(|r, p, i| x[i] += cols[r * hw + p]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);
        let a = tape.constant(t(&[1, 2], &[1., 2.]));
        let b = tape.constant(t(&[2, 1], &[3., 4.]));
        assert_eq!(tape.value(tape.matmul(a, b).unwrap()).data(), &[11.]);
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn matmul_grad_is_ones_times_b_transpose() {
        let tape = Tape::new();
        let a = tape.var(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let b = tape.constant(t(&[3, 2], &[1., -1., 2., 0.5, 3., 7.]));
        let s = tape.sum(tape.matmul(a, b).unwrap());
        tape.backward(s).unwrap();
        // ones(2x2) · bᵀ: each row is the row sums of b
        assert_eq!(tape.grad(a).data(), &[0., 2.5, 10., 0., 2.5, 10.]);
    }

    #[test]
    fn conv_identity_and_hand_sum() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.]));
        let spec = Conv2dSpec { stride: 1, padding: 0 };
        let y = tape.conv2d(x, w, spec).unwrap();
        assert_eq!(tape.value(y).as_ref(), tape.value(x).as_ref());

        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let y = tape.conv2d(x, w, spec).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.]);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let w = tape.constant(Tensor::ones(&[1, 1, 3, 3]));
        assert!(tape.conv2d(x, w, Conv2dSpec { stride: 1, padding: 0 }).is_err());
        assert!(tape.conv2d(x, w, Conv2dSpec { stride: 1, padding: 1 }).is_ok());
        assert!(tape.conv2d(x, w, Conv2dSpec { stride: 0, padding: 1 }).is_err());
        let w2 = tape.constant(Tensor::ones(&[1, 2, 1, 1]));
        assert!(tape.conv2d(x, w2, Conv2dSpec { stride: 1, padding: 0 }).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[-1., 0., 2.]));
        assert_eq!(tape.value(tape.relu(x)).data(), &[0., 0., 2.]);
        let p = tape.constant(t(&[3], &[0.5, 1.0, 7.25]));
        let round = tape.exp(tape.log(p).unwrap());
        for (a, b) in tape.value(round).data().iter().zip(tape.value(p).data()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        assert!(tape.log(x).is_err());
        let z = tape.constant(t(&[3], &[1., 0., 1.]));
        assert!(tape.div(p, z).is_err());
    }

    #[test]
    fn softmax_closed_forms() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0., 0., 1f64.ln(), 3f64.ln()]));
        let s = tape.value(tape.softmax(x).unwrap());
        assert_abs_diff_eq!(s.data()[0], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[2], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[3], 0.75, epsilon = 1e-15);
    }

    #[test]
    fn l2_normalize_cases() {
        let tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[3., 4., 0., 1.]));
        let y = tape.value(tape.l2_normalize(x).unwrap());
        assert_abs_diff_eq!(y.data()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(y.data()[1], 0.8, epsilon = 1e-15);
        assert_eq!(&y.data()[2..], &[0., 1.]);
        let zero = tape.constant(t(&[1, 2], &[0., 0.]));
        assert!(tape.l2_normalize(zero).is_err());
    }

    #[test]
    fn instance_stats_cases() {
        let z = t(&[1, 2, 2, 2], &[5., 5., 5., 5., 1., 2., 3., 4.]);
        let (mu, sigma) = instance_stats(&z).unwrap();
        assert_eq!(mu.data(), &[5., 2.5]);
        assert_eq!(sigma.data()[0], INSTANCE_STD_FLOOR);
        assert_abs_diff_eq!(sigma.data()[1], 1.25f64.sqrt(), epsilon = 1e-15);
        assert_abs_diff_eq!(sigma.data()[1], 1.1180, epsilon = 1e-4);
        assert!(instance_stats(&t(&[1, 1, 1, 1], &[1.])).is_err());
    }

    #[test]
    fn instance_norm_moments() {
        let mut rng = crate::tensor::Rng::new(11);
        let tape = Tape::new();
        let z = tape.constant(Tensor::randn(&[2, 3, 4, 5], 3.0, &mut rng));
        let y = tape.value(tape.instance_norm(z).unwrap());
        let (mu, sigma) = instance_stats(&y).unwrap();
        for (&m, &s) in mu.data().iter().zip(sigma.data()) {
            assert!(m.abs() < 1e-9);
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn global_pool_mean() {
        let tape = Tape::new();
        let x = tape.var(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let p = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(p).data(), &[2.5]);
        tape.backward(tape.sum(p)).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.25; 4]);
    }

    #[test]
    fn backward_basics() {
        let tape = Tape::new();
        let p = tape.var(t(&[2, 3], &[1., -2., 3., 0., 5., 6.]));
        tape.backward(tape.sum(p)).unwrap();
        assert_eq!(tape.grad(p).data(), &[1.; 6]);

        let tape = Tape::new();
        let p = tape.var(t(&[2], &[1., 2.]));
        let sq = tape.mul(p, p).unwrap();
        let root = tape.sum(sq);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(p).data(), &[2., 4.]);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(p).data(), &[4., 8.]);
        tape.zero_grad();
        assert_eq!(tape.grad(p).data(), &[0., 0.]);
        assert!(tape.backward(sq).is_err());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let p = tape.var(t(&[2], &[1., 2.]));
        let q = tape.stop_gradient(p);
        let root = tape.sum(tape.mul(q, p).unwrap());
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(p).data(), &[1., 2.]);
    }

    #[test]
    fn fault_injection_changes_gradient() {
        let tape = Tape::with_fault("relu");
        let p = tape.var(t(&[2], &[1., 2.]));
        tape.backward(tape.sum(tape.relu(p))).unwrap();
        assert_eq!(tape.grad(p).data(), &[1.5, 1.5]);
    }
}
