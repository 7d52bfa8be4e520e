use std::rc::Rc;

use rustfft::num_complex::Complex;

use super::fft::transform_planes;
use super::kernels::{self, adaptive_bin, bilinear_taps, conv_out, gemm, split_axis, ConvGeom};
use super::{invalid, shape_err, Result, Tensor, TensorError};

/// Label value skipped by the loss ops and by one-hot encoding.
pub const IGNORE_INDEX: usize = 255;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running estimates.
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddTrailing(Var, Var),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var, f64),
    Sin(Var),
    Custom(Var, fn(f64) -> f64),
    Sum(Var),
    Mean(Var),
    MeanAxis(Var, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    AdaptiveAvgPool(Var),
    Bilinear(Var),
    Concat(Vec<Var>, usize),
    MulChannel(Var, Var),
    AttnProbs {
        q: Var,
        k: Var,
        heads: usize,
    },
    AttnApply {
        p: Var,
        v: Var,
        heads: usize,
    },
    RowNormalize(Var),
    Fft2(Var),
    Ifft2(Var),
    FftShift(Var),
    MaskMul(Var, Rc<Vec<f64>>),
    ComplexAbs(Var),
    Nll {
        logp: Var,
        targets: Vec<usize>,
        count: usize,
    },
    KlDiv {
        target: Var,
        pred: Var,
        eps: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations. Nodes are appended in execution order, so
/// the tape is topologically sorted by construction.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rank_at_least(op: &'static str, t: &Tensor, r: usize, what: &str) -> Result<()> {
    if t.rank() < r {
        return Err(shape_err(op, format!("{what} needs rank >= {r}, got {:?}", t.shape())));
    }
    Ok(())
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += out_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= out_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn shift_packed(data: &[f64], planes: usize, h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                let a = ((p * h + y) * w + x) * 2;
                let b = ((p * h + (y + h / 2) % h) * w + (x + w / 2) % w) * 2;
                let (src, dst) = if inverse { (b, a) } else { (a, b) };
                out[dst] = data[src];
                out[dst + 1] = data[src + 1];
            }
        }
    }
    out
}

fn packed_to_complex(data: &[f64]) -> Vec<Complex<f64>> {
    data.chunks_exact(2).map(|c| Complex::new(c[0], c[1])).collect()
}

fn complex_to_packed(buf: &[Complex<f64>], scale: f64) -> Vec<f64> {
    buf.iter().flat_map(|c| [c.re * scale, c.im * scale]).collect()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Records a leaf. Leaves built from tensors with `requires_grad`
    /// receive gradients on [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, &[])
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    /// Records a constant leaf.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.t(v).clone().with_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.t(v)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.t(v).shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.t(v).data()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient accumulated into a `requires_grad` leaf by the last backward.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.t(v).grad()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.t(x);
        let out = Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.push(out, op, &[x])
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        same_shape(name, ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.shape(), data)?;
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + s)
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a`.
    pub fn add_trailing(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.t(a), self.t(b));
        if tb.rank() > ta.rank() || ta.shape()[ta.rank() - tb.rank()..] != *tb.shape() {
            return Err(shape_err("add_trailing", format!("{:?} is not a suffix of {:?}", tb.shape(), ta.shape())));
        }
        let n = tb.numel();
        let mut out = ta.data().to_vec();
        for chunk in out.chunks_mut(n) {
            kernels::add_into(chunk, tb.data());
        }
        let out = Tensor::new(ta.shape(), out)?;
        Ok(self.push(out, Op::AddTrailing(a, b), &[a, b]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.t(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(invalid("narrow", format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Narrow { x, axis, start }, &[x]))
    }

    /// ReLU with subgradient 0 at the kink.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), |v| 1.0 / (1.0 + (-v).exp()))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    /// `ln(max(x, eps))`.
    pub fn log(&mut self, x: Var, eps: f64) -> Var {
        self.unary(x, Op::Log(x, eps), move |v| v.max(eps).ln())
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sin(x), f64::sin)
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn custom_unary(&mut self, x: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Var {
        self.unary(x, Op::Custom(x, df), f)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.t(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.t(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.t(x);
        if axis >= t.rank() {
            return Err(invalid("mean_axis", format!("axis {axis} for {:?}", t.shape())));
        }
        let (outer, n, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &t.data()[(o * n + a) * inner..(o * n + a + 1) * inner];
                kernels::add_into(&mut out[o * inner..(o + 1) * inner], src);
            }
        }
        out.iter_mut().for_each(|v| *v /= n as f64);
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MeanAxis(x, axis), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.t(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.t(x);
        let mut seen = vec![false; t.rank()];
        if perm.len() != t.rank() || perm.iter().any(|&p| p >= t.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} for rank {}", t.rank())));
        }
        let (shape, data) = permute_data(t.data(), t.shape(), perm);
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(out, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// `a[..., K] · b[K, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.linear(a, b, None)
    }

    /// `x[..., K] · w[K, N] + bias[N]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.t(x), self.t(w));
        rank_at_least("linear", tx, 1, "input")?;
        if tw.rank() != 2 || tx.shape()[tx.rank() - 1] != tw.shape()[0] {
            return Err(shape_err(
                "linear",
                format!("input {:?} (last axis K) vs weight {:?} ([K, N])", tx.shape(), tw.shape()),
            ));
        }
        let (k, n) = (tw.shape()[0], tw.shape()[1]);
        let m = tx.numel() / k;
        let mut out = vec![0.0; m * n];
        if let Some(b) = bias {
            let tb = self.t(b);
            if tb.shape() != [n] {
                return Err(shape_err("linear", format!("bias {:?} vs out width {n}", tb.shape())));
            }
            for row in out.chunks_mut(n) {
                row.copy_from_slice(tb.data());
            }
        }
        gemm(m, k, n, tx.data(), (k, 1), tw.data(), (n, 1), &mut out, bias.is_some());
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Linear { x, w, b: bias }, &inputs))
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<(usize, usize, ConvGeom)> {
        let (tx, tw) = (self.t(x), self.t(w));
        if tx.rank() != 4 {
            return Err(shape_err("conv2d", format!("input must be [B, C_in, H, W], got {:?}", tx.shape())));
        }
        if tw.rank() != 4 || tw.shape()[2] != tw.shape()[3] {
            return Err(shape_err("conv2d", format!("weight must be [C_out, C_in, k, k], got {:?}", tw.shape())));
        }
        let (b, c, h, wd) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (cout, cin, k) = (tw.shape()[0], tw.shape()[1], tw.shape()[2]);
        if cin != c {
            return Err(shape_err("conv2d", format!("C_in: input has {c} channels, weight expects {cin}")));
        }
        if k != 1 && k != 3 {
            return Err(invalid("conv2d", format!("kernel size {k}; only 1 and 3 are supported")));
        }
        let (Some(ho), Some(wo)) = (conv_out(h, k, stride, pad), conv_out(wd, k, stride, pad)) else {
            return Err(shape_err("conv2d", format!("H={h}, W={wd} too small for k={k}, pad={pad}, stride={stride}")));
        };
        Ok((b, cout, ConvGeom { c, h, w: wd, k, stride, pad, ho, wo }))
    }

    /// Cross-correlation of `x[B, C_in, H, W]` with `w[C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (batch, cout, g) = self.conv_geom(x, w, stride, pad)?;
        let (tx, tw) = (self.t(x), self.t(w));
        let ck = g.c * g.k * g.k;
        let p = g.ho * g.wo;
        let direct = g.k == 1 && stride == 1 && pad == 0;
        let mut out = vec![0.0; batch * cout * p];
        if let Some(b) = bias {
            let tb = self.t(b);
            if tb.shape() != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?} vs C_out {cout}", tb.shape())));
            }
            for (i, plane) in out.chunks_mut(p).enumerate() {
                plane.iter_mut().for_each(|v| *v = tb.data()[i % cout]);
            }
        }
        let mut cols = if direct { Vec::new() } else { vec![0.0; ck * p] };
        let in_sz = g.c * g.h * g.w;
        for s in 0..batch {
            let xs = &tx.data()[s * in_sz..(s + 1) * in_sz];
            let src: &[f64] = if direct {
                xs
            } else {
                kernels::im2col(xs, &g, &mut cols);
                &cols
            };
            gemm(cout, ck, p, tw.data(), (ck, 1), src, (p, 1), &mut out[s * cout * p..(s + 1) * cout * p], bias.is_some());
        }
        let out = Tensor::new(&[batch, cout, g.ho, g.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.push(out, Op::Conv2d { x, w, b: bias, stride, pad }, &inputs))
    }

    fn check_affine(&self, op: &'static str, x: Var, gamma: Var, beta: Var, c: usize) -> Result<()> {
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.t(v).shape() != [c] {
                return Err(shape_err(op, format!("{name} {:?} vs {c} channels of {:?}", self.t(v).shape(), self.t(x).shape())));
            }
        }
        Ok(())
    }

    /// Training-mode batch norm over every axis except 1 (channels).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let tx = self.t(x);
        rank_at_least("batch_norm", tx, 2, "input")?;
        let (b, c) = (tx.shape()[0], tx.shape()[1]);
        let inner: usize = tx.shape()[2..].iter().product();
        self.check_affine("batch_norm", x, gamma, beta, c)?;
        let m = (b * inner) as f64;
        let (mut mean, mut var) = (vec![0.0; c], vec![0.0; c]);
        for s in 0..b {
            for ch in 0..c {
                let row = &tx.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                mean[ch] += row.iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..b {
            for ch in 0..c {
                let row = &tx.data()[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                var[ch] += row.iter().map(|v| (v - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let biased: Vec<f64> = var.iter().map(|v| v / m).collect();
        let inv_std: Vec<f64> = biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (tg, tb) = (self.t(gamma).data(), self.t(beta).data());
        let mut xhat = vec![0.0; tx.numel()];
        let mut out = vec![0.0; tx.numel()];
        for s in 0..b {
            for ch in 0..c {
                for i in 0..inner {
                    let idx = (s * c + ch) * inner + i;
                    xhat[idx] = (tx.data()[idx] - mean[ch]) * inv_std[ch];
                    out[idx] = tg[ch] * xhat[idx] + tb[ch];
                }
            }
        }
        let unbiased = var.iter().map(|v| if m > 1.0 { v / (m - 1.0) } else { 0.0 }).collect();
        let out = Tensor::new(tx.shape(), out)?;
        let stats = BatchStats { mean, var: unbiased };
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]);
        Ok((v, stats))
    }

    /// Inference-mode batch norm using supplied running statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, running_mean: &[f64], running_var: &[f64], eps: f64) -> Result<Var> {
        let tx = self.t(x);
        rank_at_least("batch_norm", tx, 2, "input")?;
        let (b, c) = (tx.shape()[0], tx.shape()[1]);
        let inner: usize = tx.shape()[2..].iter().product();
        self.check_affine("batch_norm", x, gamma, beta, c)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err("batch_norm", format!("running stats for {} channels, input has {c}", running_mean.len())));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (tg, tb) = (self.t(gamma).data(), self.t(beta).data());
        let mut out = vec![0.0; tx.numel()];
        for s in 0..b {
            for ch in 0..c {
                for i in 0..inner {
                    let idx = (s * c + ch) * inner + i;
                    out[idx] = tg[ch] * (tx.data()[idx] - running_mean[ch]) * inv_std[ch] + tb[ch];
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let mean = running_mean.to_vec();
        Ok(self.push(out, Op::BatchNormEval { x, gamma, beta, mean, inv_std }, &[x, gamma, beta]))
    }

    /// Layer norm over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.t(x);
        rank_at_least("layer_norm", tx, 1, "input")?;
        let d = tx.shape()[tx.rank() - 1];
        self.check_affine("layer_norm", x, gamma, beta, d)?;
        let (tg, tb) = (self.t(gamma).data(), self.t(beta).data());
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = tg[j] * xh + tb[j];
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, &[x, gamma, beta]))
    }

    fn softmax_like(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let tx = self.t(x);
        if axis >= tx.rank() {
            return Err(invalid("softmax", format!("axis {axis} for {:?}", tx.shape())));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let d = tx.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let max = (0..n).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|a| (d[at(a)] - max).exp()).sum();
                let lz = z.ln();
                for a in 0..n {
                    out[at(a)] = if log {
                        d[at(a)] - max - lz
                    } else {
                        (d[at(a)] - max).exp() / z
                    };
                }
            }
        }
        let out = Tensor::new(tx.shape(), out)?;
        let op = if log { Op::LogSoftmax(x, axis) } else { Op::Softmax(x, axis) };
        Ok(self.push(out, op, &[x]))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_like(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_like(x, axis, true)
    }

    /// Max pooling over `[..., H, W]` with a square window and no padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let tx = self.t(x);
        rank_at_least("max_pool2d", tx, 2, "input")?;
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        let (Some(ho), Some(wo)) = (conv_out(h, kernel, stride, 0), conv_out(w, kernel, stride, 0)) else {
            return Err(shape_err("max_pool2d", format!("{h}x{w} smaller than window {kernel}")));
        };
        let planes = tx.numel() / (h * w);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = usize::MAX;
                    let mut best_v = f64::NEG_INFINITY;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = (p * h + oy * stride + ky) * w + ox * stride + kx;
                            if best == usize::MAX || tx.data()[idx] > best_v {
                                best = idx;
                                best_v = tx.data()[idx];
                            }
                        }
                    }
                    out.push(best_v);
                    argmax.push(best);
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = ho;
        shape[r - 1] = wo;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Adaptive average pooling of `[..., H, W]` to `oh×ow` bins.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let tx = self.t(x);
        rank_at_least("adaptive_avg_pool2d", tx, 2, "input")?;
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        if oh == 0 || ow == 0 || oh > h || ow > w {
            return Err(invalid("adaptive_avg_pool2d", format!("{oh}x{ow} bins for {h}x{w} input")));
        }
        let planes = tx.numel() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            for by in 0..oh {
                let (y0, y1) = adaptive_bin(by, h, oh);
                for bx in 0..ow {
                    let (x0, x1) = adaptive_bin(bx, w, ow);
                    let mut s = 0.0;
                    for y in y0..y1 {
                        for xx in x0..x1 {
                            s += tx.data()[(p * h + y) * w + xx];
                        }
                    }
                    out.push(s / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::AdaptiveAvgPool(x), &[x]))
    }

    /// Bilinear upsampling of `[..., H, W]` with half-pixel centres.
    pub fn bilinear_upsample(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let tx = self.t(x);
        rank_at_least("bilinear_upsample", tx, 2, "input")?;
        let r = tx.rank();
        let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
        if oh == 0 || ow == 0 {
            return Err(invalid("bilinear_upsample", "zero target extent"));
        }
        if oh < h || ow < w {
            return Err(invalid("bilinear_upsample", format!("target {oh}x{ow} smaller than input {h}x{w}")));
        }
        let (ty, tx_) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
        let planes = tx.numel() / (h * w);
        let mut out = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            for &(y0, y1, wy0, wy1) in &ty {
                for &(x0, x1, wx0, wx1) in &tx_ {
                    out.push(
                        wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                            + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]),
                    );
                }
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[r - 2] = oh;
        shape[r - 1] = ow;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Bilinear(x), &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let base = self.t(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(invalid("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.t(v).shape();
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", format!("{s:?} vs {base:?} off axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.t(v);
                let n = t.shape()[axis];
                out.extend_from_slice(&t.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Concat(xs.to_vec(), axis), xs))
    }

    /// Broadcasts `s[B, C]` over the trailing axes of `x[B, C, ...]`.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.t(x), self.t(s));
        if tx.rank() < 2 || ts.shape() != &tx.shape()[..2] {
            return Err(shape_err("mul_channel", format!("scores {:?} vs features {:?}", ts.shape(), tx.shape())));
        }
        let inner: usize = tx.shape()[2..].iter().product();
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let f = ts.data()[i];
            chunk.iter_mut().for_each(|v| *v *= f);
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::MulChannel(x, s), &[x, s]))
    }

    fn attn_dims(&self, op: &'static str, a: Var, heads: usize) -> Result<(usize, usize, usize, usize)> {
        let t = self.t(a);
        if t.rank() != 3 {
            return Err(shape_err(op, format!("tokens must be [B, N, D], got {:?}", t.shape())));
        }
        let (b, n, d) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(invalid(op, format!("{heads} heads do not divide width {d}")));
        }
        Ok((b, n, d, d / heads))
    }

    /// Per-head attention probabilities `softmax(Q_h K_hᵀ / √d_h)`,
    /// returned as `[B, heads, N, N]`.
    pub fn attn_probs(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (b, n, d, dh) = self.attn_dims("attention", q, heads)?;
        if self.t(k).shape() != self.t(q).shape() {
            return Err(shape_err("attention", format!("Q {:?} vs K {:?}", self.t(q).shape(), self.t(k).shape())));
        }
        let (tq, tk) = (self.t(q).data(), self.t(k).data());
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; b * heads * n * n];
        for s in 0..b {
            for h in 0..heads {
                let off = s * n * d + h * dh;
                let dst = &mut out[(s * heads + h) * n * n..(s * heads + h + 1) * n * n];
                gemm(n, dh, n, &tq[off..], (d, 1), &tk[off..], (1, d), dst, false);
                for row in dst.chunks_mut(n) {
                    let max = row.iter().map(|v| v * scale).fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v * scale - max).exp();
                        z += *v;
                    }
                    row.iter_mut().for_each(|v| *v /= z);
                }
            }
        }
        let out = Tensor::new(&[b, heads, n, n], out)?;
        Ok(self.push(out, Op::AttnProbs { q, k, heads }, &[q, k]))
    }

    /// Applies per-head probabilities `p[B, heads, N, N]` to `v[B, N, D]`.
    pub fn attn_apply(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (b, n, d, dh) = self.attn_dims("attention", v, heads)?;
        if self.t(p).shape() != [b, heads, n, n] {
            return Err(shape_err("attention", format!("probs {:?} vs values {:?} with {heads} heads", self.t(p).shape(), self.t(v).shape())));
        }
        let (tp, tv) = (self.t(p).data(), self.t(v).data());
        let mut out = vec![0.0; b * n * d];
        let mut tmp = vec![0.0; n * dh];
        for s in 0..b {
            for h in 0..heads {
                let ph = &tp[(s * heads + h) * n * n..];
                gemm(n, n, dh, ph, (n, 1), &tv[s * n * d + h * dh..], (d, 1), &mut tmp, false);
                for i in 0..n {
                    out[s * n * d + i * d + h * dh..s * n * d + i * d + (h + 1) * dh]
                        .copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                }
            }
        }
        let out = Tensor::new(&[b, n, d], out)?;
        Ok(self.push(out, Op::AttnApply { p, v, heads }, &[p, v]))
    }

    /// Divides each row (last axis) by its sum.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.t(x);
        rank_at_least("row_normalize", tx, 1, "input")?;
        let d = tx.shape()[tx.rank() - 1];
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            let s: f64 = row.iter().sum();
            if s == 0.0 {
                return Err(invalid("row_normalize", "row sums to zero"));
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        let out = Tensor::new(tx.shape(), out)?;
        Ok(self.push(out, Op::RowNormalize(x), &[x]))
    }

    fn planes_of(&self, op: &'static str, x: Var, packed: bool) -> Result<(usize, usize, usize)> {
        let t = self.t(x);
        let r = t.rank();
        let need = if packed { 3 } else { 2 };
        if r < need || (packed && t.shape()[r - 1] != 2) {
            return Err(shape_err(op, format!("expected [..., H, W{}], got {:?}", if packed { ", 2" } else { "" }, t.shape())));
        }
        let base = if packed { r - 1 } else { r };
        let (h, w) = (t.shape()[base - 2], t.shape()[base - 1]);
        Ok((t.numel() / (h * w * if packed { 2 } else { 1 }), h, w))
    }

    /// Forward FFT of a real `[..., H, W]` input. The complex result is
    /// packed as `[..., H, W, 2]` (real, imaginary).
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.planes_of("fft2", x, false)?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(invalid("fft2", format!("extents {h}x{w} are not powers of two")));
        }
        let t = self.t(x);
        let mut buf: Vec<Complex<f64>> = t.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
        transform_planes(&mut buf, h, w, false);
        let mut shape = t.shape().to_vec();
        shape.push(2);
        let out = Tensor::new(&shape, complex_to_packed(&buf, 1.0))?;
        Ok(self.push(out, Op::Fft2(x), &[x]))
    }

    /// Inverse FFT (scaled by `1/(H·W)`) of a packed complex input.
    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        let (_, h, w) = self.planes_of("ifft2", x, true)?;
        if !h.is_power_of_two() || !w.is_power_of_two() {
            return Err(invalid("ifft2", format!("extents {h}x{w} are not powers of two")));
        }
        let t = self.t(x);
        let mut buf = packed_to_complex(t.data());
        transform_planes(&mut buf, h, w, true);
        let out = Tensor::new(t.shape(), complex_to_packed(&buf, 1.0 / (h * w) as f64))?;
        Ok(self.push(out, Op::Ifft2(x), &[x]))
    }

    /// Quadrant swap of a packed complex spectrum (even extents only).
    pub fn fftshift(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.planes_of("fftshift", x, true)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("fftshift", format!("odd extents {h}x{w}")));
        }
        let t = self.t(x);
        let out = Tensor::new(t.shape(), shift_packed(t.data(), planes, h, w, false))?;
        Ok(self.push(out, Op::FftShift(x), &[x]))
    }

    /// Multiplies both parts of a packed spectrum by a real `[H, W]` mask.
    pub fn mask_mul(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let (_, h, w) = self.planes_of("mask_mul", x, true)?;
        if mask.shape() != [h, w] {
            return Err(shape_err("mask_mul", format!("mask {:?} vs spectrum {h}x{w}", mask.shape())));
        }
        let t = self.t(x);
        let m = mask.data();
        let out: Vec<f64> = t.data().iter().enumerate().map(|(i, v)| v * m[(i / 2) % (h * w)]).collect();
        let out = Tensor::new(t.shape(), out)?;
        Ok(self.push(out, Op::MaskMul(x, Rc::new(m.to_vec())), &[x]))
    }

    /// `√(re² + im² + ε)` of a packed spectrum.
    pub fn complex_abs(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.planes_of("complex_abs", x, true)?;
        let t = self.t(x);
        let out: Vec<f64> = t.data().chunks_exact(2).map(|c| (c[0] * c[0] + c[1] * c[1] + eps).sqrt()).collect();
        let shape = &t.shape()[..t.rank() - 1];
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::ComplexAbs(x), &[x]))
    }

    /// Mean negative log-likelihood of `logp[B, C, ...]` at integer
    /// `targets` (one per `[B, ...]` position). [`IGNORE_INDEX`] positions
    /// are skipped; an all-ignored batch yields 0.
    pub fn nll(&mut self, logp: Var, targets: &[usize]) -> Result<Var> {
        let t = self.t(logp);
        rank_at_least("nll", t, 2, "log-probabilities")?;
        let (b, c) = (t.shape()[0], t.shape()[1]);
        let inner: usize = t.shape()[2..].iter().product();
        if targets.len() != b * inner {
            return Err(shape_err("nll", format!("{} targets for predictions {:?}", targets.len(), t.shape())));
        }
        let mut total = 0.0;
        let mut count = 0;
        for (pos, &cls) in targets.iter().enumerate() {
            if cls == IGNORE_INDEX {
                continue;
            }
            if cls >= c {
                return Err(invalid("nll", format!("class index {cls} outside [0, {c})")));
            }
            let (s, i) = (pos / inner, pos % inner);
            total -= t.data()[(s * c + cls) * inner + i];
            count += 1;
        }
        let value = if count == 0 { 0.0 } else { total / count as f64 };
        let targets = targets.to_vec();
        Ok(self.push(Tensor::scalar(value), Op::Nll { logp, targets, count }, &[logp]))
    }

    /// Cross-entropy of class logits `[B, C, ...]` against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lp = self.log_softmax(logits, 1)?;
        self.nll(lp, targets)
    }

    /// `Σ t·(ln max(t, ε) − ln max(q, ε))` over all entries.
    pub fn kl_div(&mut self, target: Var, pred: Var, eps: f64) -> Result<Var> {
        let (tt, tq) = (self.t(target), self.t(pred));
        same_shape("kl_div", tt, tq)?;
        let s: f64 = tt
            .data()
            .iter()
            .zip(tq.data())
            .map(|(&t, &q)| t * (t.max(eps).ln() - q.max(eps).ln()))
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::KlDiv { target, pred, eps }, &[target, pred]))
    }

    /// Reverse sweep from a scalar `loss`. Gradients land on every leaf
    /// recorded with `requires_grad`, in a fixed order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let lt = self.t(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                leaf_grads.push((i, g));
                continue;
            }
            for (v, gv) in self.input_grads(i, &g) {
                match &mut grads[v.0] {
                    Some(acc) => kernels::add_into(acc, &gv),
                    slot @ None => *slot = Some(gv),
                }
            }
        }
        for (i, g) in leaf_grads {
            self.nodes[i].value.accumulate_grad(&g);
        }
        Ok(())
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let y = node.value.data();
        let need = |v: Var| self.nodes[v.0].needs_grad;
        let mut out: Vec<(Var, Vec<f64>)> = Vec::new();
        let map = |v: Var, f: &dyn Fn(usize, f64) -> f64| -> Vec<f64> {
            let x = self.t(v).data();
            g.iter().enumerate().map(|(j, &gj)| gj * f(j, x[j])).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                out.push((*a, g.to_vec()));
                out.push((*b, g.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.t(*a).data(), self.t(*b).data());
                if need(*a) {
                    out.push((*a, g.iter().zip(tb).map(|(g, b)| g * b).collect()));
                }
                if need(*b) {
                    out.push((*b, g.iter().zip(ta).map(|(g, a)| g * a).collect()));
                }
            }
            Op::Scale(x, s) => out.push((*x, g.iter().map(|v| v * s).collect())),
            Op::AddTrailing(a, b) => {
                out.push((*a, g.to_vec()));
                if need(*b) {
                    let n = self.t(*b).numel();
                    let mut db = vec![0.0; n];
                    for chunk in g.chunks(n) {
                        kernels::add_into(&mut db, chunk);
                    }
                    out.push((*b, db));
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = split_axis(self.t(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    dx[(o * n + start) * inner..(o * n + start + len) * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((*x, dx));
            }
            Op::AddScalar(x) | Op::Reshape(x) => out.push((*x, g.to_vec())),
            Op::Relu(x) => out.push((*x, map(*x, &|_, v| if v > 0.0 { 1.0 } else { 0.0 }))),
            Op::Sigmoid(x) => out.push((*x, map(*x, &|j, _| y[j] * (1.0 - y[j])))),
            Op::Gelu(x) => out.push((*x, map(*x, &|_, v| kernels::gelu_grad(v)))),
            Op::Exp(x) => out.push((*x, map(*x, &|j, _| y[j]))),
            Op::Log(x, eps) => out.push((*x, map(*x, &|_, v| if v > *eps { 1.0 / v } else { 0.0 }))),
            Op::Sin(x) => out.push((*x, map(*x, &|_, v| v.cos()))),
            Op::Custom(x, df) => out.push((*x, map(*x, &|_, v| df(v)))),
            Op::Sum(x) => out.push((*x, vec![g[0]; self.t(*x).numel()])),
            Op::Mean(x) => {
                let n = self.t(*x).numel();
                out.push((*x, vec![g[0] / n as f64; n]));
            }
            Op::MeanAxis(x, axis) => {
                let (outer, n, inner) = split_axis(self.t(*x).shape(), *axis);
                let mut dx = vec![0.0; outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for k in 0..inner {
                            dx[(o * n + a) * inner + k] = g[o * inner + k] / n as f64;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (_, dx) = permute_data(g, node.value.shape(), &inv);
                out.push((*x, dx));
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.t(*x), self.t(*w));
                let (k, n) = (tw.shape()[0], tw.shape()[1]);
                let m = tx.numel() / k;
                if need(*x) {
                    let mut dx = vec![0.0; m * k];
                    gemm(m, n, k, g, (n, 1), tw.data(), (1, n), &mut dx, false);
                    out.push((*x, dx));
                }
                if need(*w) {
                    let mut dw = vec![0.0; k * n];
                    gemm(k, m, n, tx.data(), (1, k), g, (n, 1), &mut dw, false);
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        kernels::add_into(&mut db, row);
                    }
                    out.push((b, db));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (batch, cout, geo) = self.conv_geom(*x, *w, *stride, *pad).expect("validated in forward");
                let (tx, tw) = (self.t(*x), self.t(*w));
                let ck = geo.c * geo.k * geo.k;
                let p = geo.ho * geo.wo;
                let direct = geo.k == 1 && *stride == 1 && *pad == 0;
                let in_sz = geo.c * geo.h * geo.w;
                let mut dx = if need(*x) { vec![0.0; batch * in_sz] } else { Vec::new() };
                let mut dw = vec![0.0; cout * ck];
                let mut cols = vec![0.0; if direct { 0 } else { ck * p }];
                let mut dcols = vec![0.0; ck * p];
                for s in 0..batch {
                    let gs = &g[s * cout * p..(s + 1) * cout * p];
                    if need(*w) {
                        let xs = &tx.data()[s * in_sz..(s + 1) * in_sz];
                        let src: &[f64] = if direct {
                            xs
                        } else {
                            kernels::im2col(xs, &geo, &mut cols);
                            &cols
                        };
                        gemm(cout, p, ck, gs, (p, 1), src, (1, p), &mut dw, true);
                    }
                    if need(*x) {
                        let dxs = &mut dx[s * in_sz..(s + 1) * in_sz];
                        if direct {
                            gemm(ck, cout, p, tw.data(), (1, ck), gs, (p, 1), dxs, true);
                        } else {
                            gemm(ck, cout, p, tw.data(), (1, ck), gs, (p, 1), &mut dcols, false);
                            kernels::col2im_add(&dcols, &geo, dxs);
                        }
                    }
                }
                if need(*x) {
                    out.push((*x, dx));
                }
                if need(*w) {
                    out.push((*w, dw));
                }
                if let Some(b) = b.filter(|b| need(*b)) {
                    let mut db = vec![0.0; cout];
                    for (i, plane) in g.chunks(p).enumerate() {
                        db[i % cout] += plane.iter().sum::<f64>();
                    }
                    out.push((b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let shape = self.t(*x).shape();
                let (b, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let m = (b * inner) as f64;
                let tg = self.t(*gamma).data();
                let (mut dgamma, mut dbeta) = (vec![0.0; c], vec![0.0; c]);
                for s in 0..b {
                    for ch in 0..c {
                        for k in 0..inner {
                            let idx = (s * c + ch) * inner + k;
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                        }
                    }
                }
                if need(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for s in 0..b {
                        for ch in 0..c {
                            for k in 0..inner {
                                let idx = (s * c + ch) * inner + k;
                                dx[idx] = tg[ch] * inv_std[ch] / m
                                    * (m * g[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::BatchNormEval { x, gamma, beta, mean, inv_std } => {
                let tx = self.t(*x);
                let c = tx.shape()[1];
                let inner: usize = tx.shape()[2..].iter().product();
                let tg = self.t(*gamma).data();
                let (mut dx, mut dgamma, mut dbeta) = (vec![0.0; g.len()], vec![0.0; c], vec![0.0; c]);
                for (idx, &gi) in g.iter().enumerate() {
                    let ch = (idx / inner) % c;
                    dx[idx] = gi * tg[ch] * inv_std[ch];
                    dgamma[ch] += gi * (tx.data()[idx] - mean[ch]) * inv_std[ch];
                    dbeta[ch] += gi;
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.t(*gamma).numel();
                let tg = self.t(*gamma).data();
                let (mut dx, mut dgamma, mut dbeta) = (vec![0.0; g.len()], vec![0.0; d], vec![0.0; d]);
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..d {
                        let dxh = gr[j] * tg[j];
                        s1 += dxh;
                        s2 += dxh * xr[j];
                        dgamma[j] += gr[j] * xr[j];
                        dbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let dxh = gr[j] * tg[j];
                        dx[r * d + j] = is / d as f64 * (d as f64 * dxh - s1 - xr[j] * s2);
                    }
                }
                out.push((*x, dx));
                out.push((*gamma, dgamma));
                out.push((*beta, dbeta));
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for k in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + k;
                        if log {
                            let gs: f64 = (0..n).map(|a| g[at(a)]).sum();
                            for a in 0..n {
                                dx[at(a)] = g[at(a)] - y[at(a)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..n {
                                dx[at(a)] = y[at(a)] * (g[at(a)] - dot);
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![0.0; self.t(*x).numel()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += g[o];
                }
                out.push((*x, dx));
            }
            Op::AdaptiveAvgPool(x) => {
                let tx = self.t(*x);
                let r = tx.rank();
                let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
                let s = node.value.shape();
                let (oh, ow) = (s[r - 2], s[r - 1]);
                let planes = tx.numel() / (h * w);
                let mut dx = vec![0.0; tx.numel()];
                for p in 0..planes {
                    for by in 0..oh {
                        let (y0, y1) = adaptive_bin(by, h, oh);
                        for bx in 0..ow {
                            let (x0, x1) = adaptive_bin(bx, w, ow);
                            let share = g[(p * oh + by) * ow + bx] / ((y1 - y0) * (x1 - x0)) as f64;
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    dx[(p * h + yy) * w + xx] += share;
                                }
                            }
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Bilinear(x) => {
                let tx = self.t(*x);
                let r = tx.rank();
                let (h, w) = (tx.shape()[r - 2], tx.shape()[r - 1]);
                let s = node.value.shape();
                let (oh, ow) = (s[r - 2], s[r - 1]);
                let (ty, txp) = (bilinear_taps(h, oh), bilinear_taps(w, ow));
                let planes = tx.numel() / (h * w);
                let mut dx = vec![0.0; tx.numel()];
                for p in 0..planes {
                    let dst = &mut dx[p * h * w..(p + 1) * h * w];
                    let src = &g[p * oh * ow..(p + 1) * oh * ow];
                    for (oy, &(y0, y1, wy0, wy1)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in txp.iter().enumerate() {
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * wy0 * wx0;
                            dst[y0 * w + x1] += gv * wy0 * wx1;
                            dst[y1 * w + x0] += gv * wy1 * wx0;
                            dst[y1 * w + x1] += gv * wy1 * wx1;
                        }
                    }
                }
                out.push((*x, dx));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let n = self.t(v).shape()[*axis];
                    if need(v) {
                        let mut dx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            dx.extend_from_slice(&g[base..base + n * inner]);
                        }
                        out.push((v, dx));
                    }
                    start += n;
                }
            }
            Op::MulChannel(x, s) => {
                let (tx, ts) = (self.t(*x), self.t(*s));
                let inner: usize = tx.shape()[2..].iter().product();
                let mut dx = vec![0.0; g.len()];
                let mut ds = vec![0.0; ts.numel()];
                for (i, f) in ts.data().iter().enumerate() {
                    for k in i * inner..(i + 1) * inner {
                        dx[k] = g[k] * f;
                        ds[i] += g[k] * tx.data()[k];
                    }
                }
                out.push((*x, dx));
                out.push((*s, ds));
            }
            Op::AttnProbs { q, k, heads } => {
                let (b, n, d, dh) = self.attn_dims("attention", *q, *heads).expect("validated");
                let (tq, tk) = (self.t(*q).data(), self.t(*k).data());
                let scale = 1.0 / (dh as f64).sqrt();
                let mut dq = vec![0.0; b * n * d];
                let mut dk = vec![0.0; b * n * d];
                let mut ds = vec![0.0; n * n];
                let mut tmp = vec![0.0; n * dh];
                for s in 0..b {
                    for h in 0..*heads {
                        let base = (s * heads + h) * n * n;
                        let (py, gy) = (&y[base..base + n * n], &g[base..base + n * n]);
                        for r in 0..n {
                            let dot: f64 = (0..n).map(|c| py[r * n + c] * gy[r * n + c]).sum();
                            for c in 0..n {
                                ds[r * n + c] = py[r * n + c] * (gy[r * n + c] - dot) * scale;
                            }
                        }
                        let off = s * n * d + h * dh;
                        if need(*q) {
                            gemm(n, n, dh, &ds, (n, 1), &tk[off..], (d, 1), &mut tmp, false);
                            for r in 0..n {
                                kernels::add_into(&mut dq[off + r * d..off + r * d + dh], &tmp[r * dh..(r + 1) * dh]);
                            }
                        }
                        if need(*k) {
                            gemm(n, n, dh, &ds, (1, n), &tq[off..], (d, 1), &mut tmp, false);
                            for r in 0..n {
                                kernels::add_into(&mut dk[off + r * d..off + r * d + dh], &tmp[r * dh..(r + 1) * dh]);
                            }
                        }
                    }
                }
                out.push((*q, dq));
                out.push((*k, dk));
            }
            Op::AttnApply { p, v, heads } => {
                let (b, n, d, dh) = self.attn_dims("attention", *v, *heads).expect("validated");
                let (tp, tv) = (self.t(*p).data(), self.t(*v).data());
                let mut dp = vec![0.0; b * heads * n * n];
                let mut dv = vec![0.0; b * n * d];
                let mut tmp = vec![0.0; n * dh];
                for s in 0..b {
                    for h in 0..*heads {
                        let off = s * n * d + h * dh;
                        let pbase = (s * heads + h) * n * n;
                        if need(*p) {
                            gemm(n, dh, n, &g[off..], (d, 1), &tv[off..], (1, d), &mut dp[pbase..pbase + n * n], false);
                        }
                        if need(*v) {
                            gemm(n, n, dh, &tp[pbase..], (1, n), &g[off..], (d, 1), &mut tmp, false);
                            for r in 0..n {
                                kernels::add_into(&mut dv[off + r * d..off + r * d + dh], &tmp[r * dh..(r + 1) * dh]);
                            }
                        }
                    }
                }
                out.push((*p, dp));
                out.push((*v, dv));
            }
            Op::RowNormalize(x) => {
                let tx = self.t(*x);
                let d = tx.shape()[tx.rank() - 1];
                let mut dx = vec![0.0; g.len()];
                for (r, row) in tx.data().chunks(d).enumerate() {
                    let s: f64 = row.iter().sum();
                    let dot: f64 = (0..d).map(|j| g[r * d + j] * y[r * d + j]).sum();
                    for j in 0..d {
                        dx[r * d + j] = (g[r * d + j] - dot) / s;
                    }
                }
                out.push((*x, dx));
            }
            Op::Fft2(x) => {
                let (_, h, w) = self.planes_of("fft2", *x, false).expect("validated");
                let mut buf = packed_to_complex(g);
                transform_planes(&mut buf, h, w, true);
                out.push((*x, buf.iter().map(|c| c.re).collect()));
            }
            Op::Ifft2(x) => {
                let (_, h, w) = self.planes_of("ifft2", *x, true).expect("validated");
                let mut buf = packed_to_complex(g);
                transform_planes(&mut buf, h, w, false);
                out.push((*x, complex_to_packed(&buf, 1.0 / (h * w) as f64)));
            }
            Op::FftShift(x) => {
                let (planes, h, w) = self.planes_of("fftshift", *x, true).expect("validated");
                out.push((*x, shift_packed(g, planes, h, w, true)));
            }
            Op::MaskMul(x, mask) => {
                let hw = mask.len();
                out.push((*x, g.iter().enumerate().map(|(i, v)| v * mask[(i / 2) % hw]).collect()));
            }
            Op::ComplexAbs(x) => {
                let tx = self.t(*x).data();
                let mut dx = vec![0.0; tx.len()];
                for (j, gj) in g.iter().enumerate() {
                    dx[2 * j] = gj * tx[2 * j] / y[j];
                    dx[2 * j + 1] = gj * tx[2 * j + 1] / y[j];
                }
                out.push((*x, dx));
            }
            Op::Nll { logp, targets, count } => {
                let t = self.t(*logp);
                let c = t.shape()[1];
                let inner: usize = t.shape()[2..].iter().product();
                let mut dx = vec![0.0; t.numel()];
                if *count > 0 {
                    let share = -g[0] / *count as f64;
                    for (pos, &cls) in targets.iter().enumerate() {
                        if cls != IGNORE_INDEX {
                            dx[((pos / inner) * c + cls) * inner + pos % inner] = share;
                        }
                    }
                }
                out.push((*logp, dx));
            }
            Op::KlDiv { target, pred, eps } => {
                let (tt, tq) = (self.t(*target).data(), self.t(*pred).data());
                if need(*target) {
                    let dt = tt
                        .iter()
                        .zip(tq)
                        .map(|(&t, &q)| g[0] * (t.max(*eps).ln() - q.max(*eps).ln() + if t > *eps { 1.0 } else { 0.0 }))
                        .collect();
                    out.push((*target, dt));
                }
                if need(*pred) {
                    let dq = tt
                        .iter()
                        .zip(tq)
                        .map(|(&t, &q)| if q > *eps { -g[0] * t / q } else { 0.0 })
                        .collect();
                    out.push((*pred, dq));
                }
            }
        }
        out.retain(|(v, _)| need(*v));
        out
    }
}
