//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and returns
//! a [`Gradients`] table. Graphs are cheap to build and are discarded after
//! each step.

mod gradcheck;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_entries, param_grad_check, rel_err, GradCheckReport};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};
use kernels::{AxisTaps, ConvGeom, PoolGeom};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Sub,
    Mul,
    Abs,
    Relu,
    Gelu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// Whether batch normalization uses batch statistics or stored running ones.
#[derive(Debug, Clone)]
pub enum NormStats<T> {
    Batch,
    Running { mean: Vec<T>, var: Vec<T> },
}

/// Batch statistics observed by a training-mode batch norm, for the caller
/// to fold into its running buffers.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Scale(Var, T),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    ConcatChannels(Vec<Var>),
    Resize { x: Var, ty: AxisTaps, tx: AxisTaps },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPool { x: Var, geom: PoolGeom },
    LayerNorm { x: Var, gain: Var, shift: Var, mean: Vec<T>, rstd: Vec<T> },
    BatchNorm { x: Var, gain: Var, shift: Var, mean: Vec<T>, rstd: Vec<T>, batch: bool },
    Linear { x: Var, w: Var, b: Option<Var> },
    Softmax(Var),
    Bmm { a: Var, b: Var, trans_a: bool, trans_b: bool },
    Sum(Var),
    Mean(Var),
    PixelLoss { logits: Var, targets: Vec<u8>, gamma: T },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    let half = T::of(0.5);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * a * x * x)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; no gradient is tracked through it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter into the graph.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            needs_grad: p.trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(op, format!("operand shapes {sa:?} and {sb:?} differ")));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.abs());
        self.push(v, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a), &[a])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    /// Dispatches on [`ElementwiseKind`]; binary kinds require `b`.
    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::Usage(format!("{kind:?} needs two operands")));
        match kind {
            ElementwiseKind::Add => self.add(a, need_b()?),
            ElementwiseKind::Sub => self.sub(a, need_b()?),
            ElementwiseKind::Mul => self.mul(a, need_b()?),
            ElementwiseKind::Abs => Ok(self.abs(a)),
            ElementwiseKind::Relu => Ok(self.relu(a)),
            ElementwiseKind::Gelu => Ok(self.gelu(a)),
            ElementwiseKind::Sigmoid => Ok(self.sigmoid(a)),
        }
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(a), &[a]))
    }

    /// General axis permutation: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let rank = src.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::dim("permute", format!("{axes:?} is not a permutation of rank {rank}")));
        }
        let v = permute_tensor(src, axes);
        Ok(self.push(v, Op::Permute(a, axes.to_vec()), &[a]))
    }

    /// Concatenates `(N, C_i, H, W)` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat_channels", "no parts given"))?;
        let (n, _, h, w) = self.value(first).dims4("concat_channels")?;
        let mut channels = Vec::with_capacity(parts.len());
        for (i, &p) in parts.iter().enumerate() {
            let (pn, pc, ph, pw) = self.value(p).dims4("concat_channels")?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("part {i} has (N,H,W)=({pn},{ph},{pw}), expected ({n},{h},{w})"),
                ));
            }
            channels.push(pc);
        }
        let total: usize = channels.iter().sum();
        let mut data = Vec::with_capacity(n * total * h * w);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[b * c * h * w..(b + 1) * c * h * w]);
            }
        }
        let v = Tensor::new(&[n, total, h, w], data)?;
        Ok(self.push(v, Op::ConcatChannels(parts.to_vec()), parts))
    }

    /// Bilinear resize with half-pixel centres (corner alignment off).
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("upsample_bilinear", "output size must be at least 1x1"));
        }
        if (out_h, out_w) == (h, w) {
            let v = self.value(x).clone();
            return Ok(self.push(v, Op::Reshape(x), &[x]));
        }
        let ty = AxisTaps::new(h, out_h);
        let tx = AxisTaps::new(w, out_w);
        let data = kernels::bilinear_forward(n * c, (h, w), &ty, &tx, self.value(x).data());
        let v = Tensor::new(&[n, c, out_h, out_w], data)?;
        Ok(self.push(v, Op::Resize { x, ty, tx }, &[x]))
    }

    /// Cross-correlation of `(N, Ci, H, W)` with `(Co, Ci, kH, kW)` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let (n, ci, h, wd) = self.value(x).dims4("conv2d")?;
        let (co, wci, kh, kw) = self.value(w).dims4("conv2d")?;
        if wci != ci {
            return Err(Error::dim(
                "conv2d",
                format!("input channel axis has {ci} but weight axis 1 has {wci}"),
            ));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d", "stride must be at least 1"));
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias shape {:?} does not match {co} output channels", self.shape(b)),
                ));
            }
        }
        let (span_h, span_w) = (h + 2 * padding, wd + 2 * padding);
        if span_h < kh || span_w < kw || (span_h - kh) % stride != 0 || (span_w - kw) % stride != 0 {
            return Err(Error::dim(
                "conv2d",
                format!("height/width axes ({h},{wd}) with padding {padding} do not tile kernel ({kh},{kw}) at stride {stride}"),
            ));
        }
        let geom = ConvGeom {
            n,
            ci,
            h,
            w: wd,
            co,
            kh,
            kw,
            stride,
            pad: padding,
            ho: (span_h - kh) / stride + 1,
            wo: (span_w - kw) / stride + 1,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Tensor::new(&[n, co, geom.ho, geom.wo], data)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, &parents))
    }

    pub fn pool2d(&mut self, kind: PoolKind, x: Var, k: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("pool2d")?;
        if k == 0 || stride == 0 || h < k || w < k || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(Error::dim(
                "pool2d",
                format!("height/width axes ({h},{w}) not divisible into {k}x{k} windows at stride {stride}"),
            ));
        }
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            k,
            stride,
            ho: (h - k) / stride + 1,
            wo: (w - k) / stride + 1,
        };
        let shape = [n, c, geom.ho, geom.wo];
        match kind {
            PoolKind::Max => {
                let (data, argmax) = kernels::max_pool_forward(&geom, self.value(x).data());
                let v = Tensor::new(&shape, data)?;
                Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
            }
            PoolKind::Avg => {
                let data = kernels::avg_pool_forward(&geom, self.value(x).data());
                let v = Tensor::new(&shape, data)?;
                Ok(self.push(v, Op::AvgPool { x, geom }, &[x]))
            }
        }
    }

    /// Non-overlapping `k`x`k` max pooling that keeps a partial window at the
    /// bottom/right border when the size is not a multiple of `k`.
    pub fn max_pool2d_ceil(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("max_pool2d_ceil")?;
        if k == 0 {
            return Err(Error::dim("max_pool2d_ceil", "window must be non-empty"));
        }
        let geom = PoolGeom {
            planes: n * c,
            h,
            w,
            k,
            stride: k,
            ho: h.div_ceil(k),
            wo: w.div_ceil(k),
        };
        let (data, argmax) = kernels::max_pool_forward(&geom, self.value(x).data());
        let v = Tensor::new(&[n, c, geom.ho, geom.wo], data)?;
        Ok(self.push(v, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Normalizes each row over the last axis, then applies `gain`/`shift`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "channel axis has {c} but gain/shift have {:?}/{:?}",
                    self.shape(gain),
                    self.shape(shift)
                ),
            ));
        }
        let eps = T::of(eps);
        let inv_c = T::of(1.0 / c as f64);
        let xv = self.value(x);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let rows = xv.numel() / c;
        let mut out = Vec::with_capacity(xv.numel());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xv.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + s[j]));
            means.push(mean);
            rstds.push(rstd);
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean: means,
                rstd: rstds,
            },
            &[x, gain, shift],
        ))
    }

    /// Per-channel normalization of `(N, C, H, W)`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        shift: Var,
        eps: f64,
        stats: NormStats<T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let (n, c, h, w) = self.value(x).dims4("batch_norm")?;
        if self.shape(gain) != [c] || self.shape(shift) != [c] {
            return Err(Error::dim("batch_norm", format!("channel axis has {c}, gain/shift mismatch")));
        }
        let eps = T::of(eps);
        let hw = h * w;
        let xv = self.value(x).data();
        let (mean, var, batch) = match stats {
            NormStats::Batch => {
                let inv = T::of(1.0 / (n * hw) as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += xv[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    mean[ch] = s * inv;
                    let mut q = T::zero();
                    for b in 0..n {
                        for &v in &xv[(b * c + ch) * hw..(b * c + ch + 1) * hw] {
                            q += (v - mean[ch]) * (v - mean[ch]);
                        }
                    }
                    var[ch] = q * inv;
                }
                (mean, var, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm", "running statistics length mismatch"));
                }
                (mean, var, false)
            }
        };
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let mut out = Vec::with_capacity(xv.len());
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                out.extend(xv[base..base + hw].iter().map(|&v| (v - mean[ch]) * rstd[ch] * g[ch] + s[ch]));
            }
        }
        let v = Tensor::new(&[n, c, h, w], out)?;
        let observed = batch.then(|| BatchStats {
            mean: mean.clone(),
            var: var.clone(),
        });
        let id = self.push(
            v,
            Op::BatchNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
                batch,
            },
            &[x, gain, shift],
        );
        Ok((id, observed))
    }

    /// Affine map over the last axis: `x (.., Cin) @ w (Cin, Cout) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let cin = *xs.last().ok_or_else(|| Error::dim("linear", "scalar input"))?;
        let (wi, wo) = match self.shape(w) {
            [i, o] => (*i, *o),
            s => return Err(Error::dim("linear", format!("weight must be (Cin, Cout), got {s:?}"))),
        };
        if wi != cin {
            return Err(Error::dim("linear", format!("input last axis {cin} vs weight axis 0 {wi}")));
        }
        if let Some(b) = b {
            if self.shape(b) != [wo] {
                return Err(Error::dim("linear", format!("bias shape {:?} vs Cout {wo}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / cin;
        let mut out = vec![T::zero(); rows * wo];
        T::gemm(
            rows,
            cin,
            wo,
            T::one(),
            self.value(x).data(),
            cin as isize,
            1,
            self.value(w).data(),
            wo as isize,
            1,
            T::zero(),
            &mut out,
            wo as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(wo) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().expect("rank >= 1") = wo;
        let v = Tensor::new(&shape, out)?;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(v, Op::Linear { x, w, b }, &parents))
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let k = *self.shape(x).last().ok_or_else(|| Error::dim("softmax", "scalar input"))?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut s = T::zero();
            for &v in row {
                let e = (v - m).exp();
                s += e;
                out.push(e);
            }
            let inv = T::one() / s;
            out[start..].iter_mut().for_each(|e| *e *= inv);
        }
        let v = Tensor::new(xv.shape(), out)?;
        Ok(self.push(v, Op::Softmax(x), &[x]))
    }

    /// Batched matmul of rank-3 tensors with optional transposes of the
    /// trailing two axes: `op(a) (B, M, K) @ op(b) (B, K, N)`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (ba, a0, a1) = rank3(self.shape(a), "bmm")?;
        let (bb, b0, b1) = rank3(self.shape(b), "bmm")?;
        let (m, ka) = if trans_a { (a1, a0) } else { (a0, a1) };
        let (kb, n) = if trans_b { (b1, b0) } else { (b0, b1) };
        if ba != bb || ka != kb {
            return Err(Error::dim(
                "bmm",
                format!("batch {ba} vs {bb}, inner axes {ka} vs {kb}"),
            ));
        }
        let (rsa, csa) = mat_strides(a0, a1, trans_a);
        let (rsb, csb) = mat_strides(b0, b1, trans_b);
        let mut out = vec![T::zero(); ba * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            T::gemm(
                m,
                ka,
                n,
                T::one(),
                &av[i * a0 * a1..(i + 1) * a0 * a1],
                rsa,
                csa,
                &bv[i * b0 * b1..(i + 1) * b0 * b1],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
            );
        }
        let v = Tensor::new(&[ba, m, n], out)?;
        Ok(self.push(v, Op::Bmm { a, b, trans_a, trans_b }, &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().copied().sum::<T>() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Mean over pixels of `-(1 - p_t)^gamma * ln p_t`, with `p_t` the softmax
    /// probability (over the channel axis) of the target class. `gamma = 0`
    /// is plain cross-entropy.
    pub fn pixel_loss(&mut self, logits: Var, targets: &[u8], gamma: f64) -> Result<Var> {
        let (n, c, h, w) = self.value(logits).dims4("pixel_loss")?;
        if targets.len() != n * h * w {
            return Err(Error::dim(
                "pixel_loss",
                format!("{} targets for {} pixels", targets.len(), n * h * w),
            ));
        }
        if let Some(bad) = targets.iter().find(|&&t| t as usize >= c) {
            return Err(Error::Input(format!("target class {bad} out of range for {c} channels")));
        }
        if gamma < 0.0 {
            return Err(Error::Input(format!("focal gamma must be >= 0, got {gamma}")));
        }
        let hw = h * w;
        let lv = self.value(logits).data();
        let mut total = 0.0f64;
        let mut probs = vec![T::zero(); c];
        for b in 0..n {
            for px in 0..hw {
                let t = targets[b * hw + px] as usize;
                let log_pt = log_softmax_at(lv, b, c, hw, px, t, &mut probs);
                total += pixel_term(log_pt, &probs, t, gamma).as_f64();
            }
        }
        let v = Tensor::scalar(T::of(total / (n * hw) as f64));
        Ok(self.push(
            v,
            Op::PixelLoss {
                logits,
                targets: targets.to_vec(),
                gamma: T::of(gamma),
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) if n.needs_grad => Some((id, i)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }

    fn buf<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().map(|t| t.data_mut())
    }

    fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.buf(grads, v) {
                        d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(d) = self.buf(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
                if let Some(d) = self.buf(grads, *b) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d -= g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(d) = self.buf(grads, *a) {
                    d.iter_mut().zip(gd.iter().zip(vb)).for_each(|(d, (&g, &y))| *d += g * y);
                }
                if let Some(d) = self.buf(grads, *b) {
                    d.iter_mut().zip(gd.iter().zip(va)).for_each(|(d, (&g, &x))| *d += g * x);
                }
            }
            Op::Abs(a) => self.unary_back(grads, *a, gd, |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }),
            Op::Relu(a) => self.unary_back(grads, *a, gd, |x, _| if x > T::zero() { T::one() } else { T::zero() }),
            Op::Gelu(a) => self.unary_back(grads, *a, gd, |x, _| gelu_grad(x)),
            Op::Sigmoid(a) => {
                let y = out.data();
                if let Some(d) = self.buf(grads, *a) {
                    for ((d, &g), &y) in d.iter_mut().zip(gd).zip(y) {
                        *d += g * y * (T::one() - y);
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(d) = self.buf(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g * c);
                }
            }
            Op::Reshape(a) => {
                if let Some(d) = self.buf(grads, *a) {
                    d.iter_mut().zip(gd).for_each(|(d, &g)| *d += g);
                }
            }
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                let back = permute_tensor(g, &inv);
                if let Some(d) = self.buf(grads, *a) {
                    d.iter_mut().zip(back.data()).for_each(|(d, &g)| *d += g);
                }
            }
            Op::ConcatChannels(parts) => {
                let (n, total, h, w) = out.dims4("concat_channels").expect("validated");
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if let Some(d) = self.buf(grads, p) {
                        for b in 0..n {
                            let src = &gd[(b * total + offset) * hw..(b * total + offset + c) * hw];
                            let dst = &mut d[b * c * hw..(b + 1) * c * hw];
                            dst.iter_mut().zip(src).for_each(|(d, &g)| *d += g);
                        }
                    }
                    offset += c;
                }
            }
            Op::Resize { x, ty, tx } => {
                let (n, c, h, w) = self.value(*x).dims4("upsample_bilinear").expect("validated");
                if let Some(d) = self.buf(grads, *x) {
                    kernels::bilinear_backward(n * c, (h, w), ty, tx, gd, d);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut dx = self.nodes[x.0].needs_grad.then(|| vec![T::zero(); xv.len()]);
                let mut dw = self.nodes[w.0].needs_grad.then(|| vec![T::zero(); wv.len()]);
                let mut db = b.filter(|b| self.nodes[b.0].needs_grad).map(|_| vec![T::zero(); geom.co]);
                kernels::conv2d_backward(geom, xv, wv, gd, dx.as_deref_mut(), dw.as_deref_mut(), db.as_deref_mut());
                for (v, src) in [(Some(*x), dx), (Some(*w), dw), (*b, db)] {
                    if let (Some(v), Some(src)) = (v, src) {
                        if let Some(d) = self.buf(grads, v) {
                            d.iter_mut().zip(&src).for_each(|(d, &g)| *d += g);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if let Some(d) = self.buf(grads, *x) {
                    for (&g, &src) in gd.iter().zip(argmax) {
                        d[src as usize] += g;
                    }
                }
            }
            Op::AvgPool { x, geom } => {
                if let Some(d) = self.buf(grads, *x) {
                    kernels::avg_pool_backward(geom, gd, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
            } => {
                let c = self.shape(*gain)[0];
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let inv_c = T::of(1.0 / c as f64);
                let mut dgain = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                let mut xhat = vec![T::zero(); c];
                let mut dxhat = vec![T::zero(); c];
                for (r, (row, grow)) in xv.chunks(c).zip(gd.chunks(c)).enumerate() {
                    let (m, rs) = (mean[r], rstd[r]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..c {
                        xhat[j] = (row[j] - m) * rs;
                        dxhat[j] = grow[j] * gv[j];
                        dgain[j] += grow[j] * xhat[j];
                        dshift[j] += grow[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[j];
                    }
                    let (s1, s2) = (s1 * inv_c, s2 * inv_c);
                    for j in 0..c {
                        dx[r * c + j] = rs * (dxhat[j] - s1 - xhat[j] * s2);
                    }
                }
                for (v, src) in [(*x, dx), (*gain, dgain), (*shift, dshift)] {
                    if let Some(d) = self.buf(grads, v) {
                        d.iter_mut().zip(&src).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gain,
                shift,
                mean,
                rstd,
                batch,
            } => {
                let (n, c, h, w) = self.value(*x).dims4("batch_norm").expect("validated");
                let hw = h * w;
                let count = T::of((n * hw) as f64);
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let mut dgain = vec![T::zero(); c];
                let mut dshift = vec![T::zero(); c];
                let mut dx = vec![T::zero(); xv.len()];
                for ch in 0..c {
                    let (m, rs) = (mean[ch], rstd[ch]);
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for p in base..base + hw {
                            let xh = (xv[p] - m) * rs;
                            dgain[ch] += gd[p] * xh;
                            dshift[ch] += gd[p];
                            s1 += gd[p] * gv[ch];
                            s2 += gd[p] * gv[ch] * xh;
                        }
                    }
                    for b in 0..n {
                        let base = (b * c + ch) * hw;
                        for p in base..base + hw {
                            let dxh = gd[p] * gv[ch];
                            dx[p] = if *batch {
                                let xh = (xv[p] - m) * rs;
                                rs * (dxh - s1 / count - xh * s2 / count)
                            } else {
                                rs * dxh
                            };
                        }
                    }
                }
                for (v, src) in [(*x, dx), (*gain, dgain), (*shift, dshift)] {
                    if let Some(d) = self.buf(grads, v) {
                        d.iter_mut().zip(&src).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let cin = self.shape(*w)[0];
                let cout = self.shape(*w)[1];
                let rows = gd.len() / cout;
                if let Some(db) = b.and_then(|b| self.buf(grads, b)) {
                    for row in gd.chunks(cout) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let xv = self.value(*x).data();
                    let dw = self.buf(grads, *w).expect("needs grad");
                    // dW (Cin, Cout) += x^T (Cin, rows) @ g (rows, Cout)
                    T::gemm(cin, rows, cout, T::one(), xv, 1, cin as isize, gd, cout as isize, 1, T::one(), dw, cout as isize, 1);
                }
                if self.nodes[x.0].needs_grad {
                    let wv = self.value(*w).data();
                    let dx = self.buf(grads, *x).expect("needs grad");
                    // dx (rows, Cin) += g (rows, Cout) @ W^T (Cout, Cin)
                    T::gemm(rows, cout, cin, T::one(), gd, cout as isize, 1, wv, 1, cout as isize, T::one(), dx, cin as isize, 1);
                }
            }
            Op::Softmax(x) => {
                let k = *out.shape().last().expect("rank >= 1");
                let y = out.data();
                if let Some(d) = self.buf(grads, *x) {
                    for ((drow, grow), yrow) in d.chunks_mut(k).zip(gd.chunks(k)).zip(y.chunks(k)) {
                        let dot: T = grow.iter().zip(yrow).map(|(&g, &y)| g * y).sum();
                        for j in 0..k {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_a, trans_b } => {
                let (ba, a0, a1) = rank3(self.shape(*a), "bmm").expect("validated");
                let (_, b0, b1) = rank3(self.shape(*b), "bmm").expect("validated");
                let (m, k) = if *trans_a { (a1, a0) } else { (a0, a1) };
                let n = if *trans_b { b0 } else { b1 };
                let (rsa, csa) = mat_strides(a0, a1, *trans_a);
                let (rsb, csb) = mat_strides(b0, b1, *trans_b);
                if self.nodes[a.0].needs_grad {
                    let bv = self.value(*b).data();
                    let da = self.buf(grads, *a).expect("needs grad");
                    for i in 0..ba {
                        // dA (M, K) += dC (M, N) @ B^T (N, K)
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv[i * b0 * b1..(i + 1) * b0 * b1],
                            csb,
                            rsb,
                            T::one(),
                            &mut da[i * a0 * a1..(i + 1) * a0 * a1],
                            rsa,
                            csa,
                        );
                    }
                }
                if self.nodes[b.0].needs_grad {
                    let av = self.value(*a).data();
                    let db = self.buf(grads, *b).expect("needs grad");
                    for i in 0..ba {
                        // dB (K, N) += A^T (K, M) @ dC (M, N)
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[i * a0 * a1..(i + 1) * a0 * a1],
                            csa,
                            rsa,
                            &gd[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            T::one(),
                            &mut db[i * b0 * b1..(i + 1) * b0 * b1],
                            rsb,
                            csb,
                        );
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::Mean(x) => {
                let g0 = gd[0] / T::of(self.value(*x).numel() as f64);
                if let Some(d) = self.buf(grads, *x) {
                    d.iter_mut().for_each(|d| *d += g0);
                }
            }
            Op::PixelLoss { logits, targets, gamma } => {
                let (n, c, h, w) = self.value(*logits).dims4("pixel_loss").expect("validated");
                let hw = h * w;
                let lv = self.value(*logits).data();
                let scale = gd[0] / T::of((n * hw) as f64);
                let gamma = *gamma;
                let Some(d) = self.buf(grads, *logits) else { return };
                let mut probs = vec![T::zero(); c];
                for b in 0..n {
                    for px in 0..hw {
                        let t = targets[b * hw + px] as usize;
                        let log_pt = log_softmax_at(lv, b, c, hw, px, t, &mut probs);
                        let coef = pixel_term_slope(log_pt, &probs, t, gamma);
                        let pt = probs[t];
                        for j in 0..c {
                            let delta = if j == t { T::one() } else { T::zero() };
                            // dL/dz_j = dL/dp_t * p_t * (delta_tj - p_j)
                            d[(b * c + j) * hw + px] += scale * coef * pt * (delta - probs[j]);
                        }
                    }
                }
            }
        }
    }

    fn unary_back(&self, grads: &mut [Option<Tensor<T>>], a: Var, gd: &[T], f: impl Fn(T, T) -> T) {
        let xv = self.value(a).data();
        if let Some(d) = self.buf(grads, a) {
            for ((d, &g), &x) in d.iter_mut().zip(gd).zip(xv) {
                *d += g * f(x, g);
            }
        }
    }
}

/// Fills `probs` with the channel softmax at one pixel and returns `ln p_t`.
fn log_softmax_at<T: Scalar>(lv: &[T], b: usize, c: usize, hw: usize, px: usize, t: usize, probs: &mut [T]) -> T {
    let at = |j: usize| lv[(b * c + j) * hw + px];
    let m = (0..c).map(at).fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for (j, p) in probs.iter_mut().enumerate() {
        *p = (at(j) - m).exp();
        s += *p;
    }
    let inv = T::one() / s;
    probs.iter_mut().for_each(|p| *p *= inv);
    at(t) - m - s.ln()
}

/// `1 - p_t`, summed from the other classes to keep precision near p_t = 1.
fn one_minus_pt<T: Scalar>(probs: &[T], t: usize) -> T {
    probs.iter().enumerate().filter(|&(j, _)| j != t).map(|(_, &p)| p).sum()
}

fn pixel_term<T: Scalar>(log_pt: T, probs: &[T], t: usize, gamma: f64) -> T {
    if gamma == 0.0 {
        return -log_pt;
    }
    -one_minus_pt(probs, t).powf(T::of(gamma)) * log_pt
}

/// d(term)/d(p_t).
fn pixel_term_slope<T: Scalar>(log_pt: T, probs: &[T], t: usize, gamma: T) -> T {
    let pt = probs[t];
    if gamma == T::zero() {
        return -T::one() / pt;
    }
    let q = one_minus_pt(probs, t).max(T::min_positive_value());
    gamma * q.powf(gamma - T::one()) * log_pt - q.powf(gamma) / pt
}

fn rank3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [b, m, n] => Ok((*b, *m, *n)),
        s => Err(Error::dim(op, format!("expected rank-3 (B, M, N), got {s:?}"))),
    }
}

/// Logical (row, col) strides of a stored `(r, c)` matrix, optionally transposed.
fn mat_strides(r: usize, c: usize, trans: bool) -> (isize, isize) {
    let _ = r;
    if trans {
        (1, c as isize)
    } else {
        (c as isize, 1)
    }
}

pub(crate) fn permute_tensor<T: Scalar>(src: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let in_shape = src.shape();
    let rank = in_shape.len();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let data = src.data();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permutation preserves element count")
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a leaf or parameter node; `None` if it was unreachable.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// One entry per parameter binding; a parameter bound twice appears twice.
    pub fn param_grads(&self) -> Vec<(ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
            .collect()
    }
}
