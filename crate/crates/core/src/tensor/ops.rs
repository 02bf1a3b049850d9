//! Graph-building operations. Each method validates shapes, computes the
//! forward value through [`kernels`], and records an `Op` edge when gradients
//! are enabled and some input participates in differentiation.

use super::kernels::{self, ConvDims};
use super::{grad_enabled, Tensor};
use crate::error::{config_err, data_err, shape_err, Result};
use crate::scalar::Scalar;

/// Norm exponent for factor-distance losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormP {
    L1,
    L2,
}

impl NormP {
    pub fn from_u8(p: u8) -> Result<Self> {
        match p {
            1 => Ok(NormP::L1),
            2 => Ok(NormP::L2),
            other => config_err!("norm exponent p must be 1 or 2, got {other}"),
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            NormP::L1 => 1,
            NormP::L2 => 2,
        }
    }
}

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Sum(Tensor<T>),
    Mean(Tensor<T>),
    Reshape(Tensor<T>),
    LeakyRelu {
        input: Tensor<T>,
        slope: T,
    },
    Conv2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        dims: ConvDims,
    },
    /// `dims` describes the adjoint convolution: the transposed convolution's
    /// output plays the conv input role and vice versa.
    ConvTranspose2d {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
        dims: ConvDims,
    },
    BatchNorm {
        input: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        mean: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    AvgPool {
        input: Tensor<T>,
        kernel: usize,
    },
    GlobalAvgPool {
        input: Tensor<T>,
    },
    Linear {
        input: Tensor<T>,
        weight: Tensor<T>,
        bias: Tensor<T>,
    },
    L2NormalizeRows {
        input: Tensor<T>,
        eps: T,
        raw_norms: Vec<T>,
    },
    SoftmaxT {
        input: Tensor<T>,
        t: T,
    },
    LogSoftmax {
        input: Tensor<T>,
    },
    SquareChannelSum {
        input: Tensor<T>,
    },
    PNormRowsMean {
        input: Tensor<T>,
        p: NormP,
        row_norms: Vec<T>,
    },
    SqNormRowsMean {
        input: Tensor<T>,
    },
    CrossEntropy {
        logits: Tensor<T>,
        labels: Vec<usize>,
    },
    KdLoss {
        student: Tensor<T>,
        teacher_probs: Vec<T>,
        t: T,
    },
}

impl<T: Scalar> Op<T> {
    /// Graph predecessors of this node, in a fixed order.
    pub(crate) fn inputs(&self) -> Vec<Tensor<T>> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![a.clone(), b.clone()],
            Op::Scale(a, _) | Op::Sum(a) | Op::Mean(a) | Op::Reshape(a) => vec![a.clone()],
            Op::LeakyRelu { input, .. }
            | Op::AvgPool { input, .. }
            | Op::GlobalAvgPool { input }
            | Op::L2NormalizeRows { input, .. }
            | Op::SoftmaxT { input, .. }
            | Op::LogSoftmax { input }
            | Op::SquareChannelSum { input }
            | Op::PNormRowsMean { input, .. }
            | Op::SqNormRowsMean { input } => vec![input.clone()],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![input.clone(), weight.clone()];
                if let Some(b) = bias {
                    v.push(b.clone());
                }
                v
            }
            Op::BatchNorm {
                input, gamma, beta, ..
            } => vec![input.clone(), gamma.clone(), beta.clone()],
            Op::Linear {
                input,
                weight,
                bias,
            } => vec![input.clone(), weight.clone(), bias.clone()],
            Op::CrossEntropy { logits, .. } => vec![logits.clone()],
            Op::KdLoss { student, .. } => vec![student.clone()],
        }
    }
}

fn pick<T: Scalar>(record: bool, op: Op<T>) -> Op<T> {
    if record {
        op
    } else {
        Op::Leaf
    }
}

impl<T: Scalar> Tensor<T> {
    fn dims4(&self, what: &str) -> Result<(usize, usize, usize, usize)> {
        if self.ndim() != 4 {
            shape_err!("{what}: expected a 4-d [N,C,H,W] tensor, got shape {:?}", self.shape());
        }
        let s = self.shape();
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        if self.ndim() != 2 {
            shape_err!("{what}: expected a 2-d tensor, got shape {:?}", self.shape());
        }
        Ok((self.shape()[0], self.shape()[1]))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a + b)
            .collect();
        let record = grad_enabled() && (self.tracks() || other.tracks());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            pick(record, Op::Add(self.clone(), other.clone())),
        ))
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "sub")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a - b)
            .collect();
        let record = grad_enabled() && (self.tracks() || other.tracks());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            pick(record, Op::Sub(self.clone(), other.clone())),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let data: Vec<T> = self
            .data()
            .iter()
            .zip(other.data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let record = grad_enabled() && (self.tracks() || other.tracks());
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            pick(record, Op::Mul(self.clone(), other.clone())),
        ))
    }

    pub fn scale(&self, factor: f64) -> Tensor<T> {
        let c = T::from_f64(factor);
        let data: Vec<T> = self.data().iter().map(|&a| a * c).collect();
        let record = grad_enabled() && self.tracks();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            pick(record, Op::Scale(self.clone(), c)),
        )
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        let record = grad_enabled() && self.tracks();
        Tensor::from_op(vec![acc], vec![1], pick(record, Op::Sum(self.clone())))
    }

    pub fn mean(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        let m = acc / T::from_f64(self.numel() as f64);
        let record = grad_enabled() && self.tracks();
        Tensor::from_op(vec![m], vec![1], pick(record, Op::Mean(self.clone())))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<T>> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel() {
            shape_err!(
                "reshape: cannot view shape {:?} as {:?}",
                self.shape(),
                new_shape
            );
        }
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            self.to_vec(),
            new_shape.to_vec(),
            pick(record, Op::Reshape(self.clone())),
        ))
    }

    /// View as `[N, rest]`; a 1-d tensor becomes a single row.
    pub fn flatten_rows(&self) -> Result<Tensor<T>> {
        let (rows, cols) = if self.ndim() <= 1 {
            (1, self.numel())
        } else {
            (self.shape()[0], self.numel() / self.shape()[0])
        };
        self.reshape(&[rows, cols])
    }

    /// Elementwise `max(x, slope·x)`; the derivative at zero takes the
    /// positive branch.
    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&slope) {
            config_err!("leaky_relu slope must lie in [0,1), got {slope}");
        }
        let s = T::from_f64(slope);
        let data: Vec<T> = self
            .data()
            .iter()
            .map(|&v| if v < T::zero() { v * s } else { v })
            .collect();
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            pick(
                record,
                Op::LeakyRelu {
                    input: self.clone(),
                    slope: s,
                },
            ),
        ))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.leaky_relu(0.0)
    }

    /// 2-d cross-correlation of `[N,C,H,W]` with weight `[O,C,kh,kw]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("conv2d input")?;
        let (o, wc, kh, kw) = weight.dims4("conv2d weight")?;
        if wc != c {
            shape_err!("conv2d: input has {c} channels but weight expects {wc}");
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                shape_err!("conv2d: bias shape {:?} does not match {o} output channels", b.shape());
            }
        }
        if stride == 0 {
            config_err!("conv2d: stride must be positive");
        }
        let (oh, ow) = conv_out_size(h, w, kh, kw, stride, padding)?;
        let dims = ConvDims {
            n,
            c_in: c,
            h,
            w,
            c_out: o,
            kh,
            kw,
            stride,
            pad: padding,
            oh,
            ow,
        };
        let bias_data = bias.map(|b| b.data());
        let bias_slice = bias_data.as_ref().map(|r| r.as_slice());
        let out = kernels::conv2d_fwd(&self.data(), &weight.data(), bias_slice, &dims);
        drop(bias_data);
        let record = grad_enabled()
            && (self.tracks() || weight.tracks() || bias.map(|b| b.tracks()).unwrap_or(false));
        Ok(Tensor::from_op(
            out,
            vec![n, o, oh, ow],
            pick(
                record,
                Op::Conv2d {
                    input: self.clone(),
                    weight: weight.clone(),
                    bias: bias.cloned(),
                    dims,
                },
            ),
        ))
    }

    /// Transposed convolution of `[N,C,H,W]` with weight `[C,O,kh,kw]`;
    /// the exact adjoint of `conv2d` with the same stride and padding.
    pub fn conv_transpose2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("conv_transpose2d input")?;
        let (wc, o, kh, kw) = weight.dims4("conv_transpose2d weight")?;
        if wc != c {
            shape_err!("conv_transpose2d: input has {c} channels but weight expects {wc}");
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                shape_err!(
                    "conv_transpose2d: bias shape {:?} does not match {o} output channels",
                    b.shape()
                );
            }
        }
        if stride == 0 {
            config_err!("conv_transpose2d: stride must be positive");
        }
        let oh_s = (h - 1) * stride + kh;
        let ow_s = (w - 1) * stride + kw;
        if oh_s <= 2 * padding || ow_s <= 2 * padding {
            config_err!(
                "conv_transpose2d: padding {padding} exceeds output extent for input {h}x{w}, kernel {kh}x{kw}, stride {stride}"
            );
        }
        let (oh, ow) = (oh_s - 2 * padding, ow_s - 2 * padding);
        // Adjoint configuration: the transposed output is the conv input.
        let dims = ConvDims {
            n,
            c_in: o,
            h: oh,
            w: ow,
            c_out: c,
            kh,
            kw,
            stride,
            pad: padding,
            oh: h,
            ow: w,
        };
        let mut out = kernels::conv2d_bwd_input(&self.data(), &weight.data(), &dims);
        if let Some(b) = bias {
            let bd = b.data();
            let plane = oh * ow;
            for s in 0..n {
                for ch in 0..o {
                    let bo = bd[ch];
                    let base = (s * o + ch) * plane;
                    for v in out[base..base + plane].iter_mut() {
                        *v += bo;
                    }
                }
            }
        }
        let record = grad_enabled()
            && (self.tracks() || weight.tracks() || bias.map(|b| b.tracks()).unwrap_or(false));
        Ok(Tensor::from_op(
            out,
            vec![n, o, oh, ow],
            pick(
                record,
                Op::ConvTranspose2d {
                    input: self.clone(),
                    weight: weight.clone(),
                    bias: bias.cloned(),
                    dims,
                },
            ),
        ))
    }

    /// Batch normalization over `[N,C,H,W]`. In training mode the batch
    /// statistics normalize and the running buffers are updated in place;
    /// in eval mode the running buffers normalize.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &self,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        momentum: f64,
        eps: f64,
        training: bool,
    ) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("batch_norm input")?;
        for (t, name) in [
            (gamma, "gamma"),
            (beta, "beta"),
            (running_mean, "running_mean"),
            (running_var, "running_var"),
        ] {
            if t.shape() != [c] {
                shape_err!("batch_norm: {name} shape {:?} does not match {c} channels", t.shape());
            }
        }
        if eps <= 0.0 {
            config_err!("batch_norm: eps must be positive, got {eps}");
        }
        let plane = h * w;
        let (mean, inv_std) = if training {
            if n * plane < 2 {
                return Err(crate::error::Error::Numeric(format!(
                    "batch_norm: degenerate batch, {n}x{h}x{w} gives fewer than 2 elements per channel"
                )));
            }
            let (mean, var) = kernels::bn_batch_stats(&self.data(), n, c, plane);
            let eps_t = T::from_f64(eps);
            let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
            // running <- (1 - momentum)*running + momentum*batch
            let mom = T::from_f64(momentum);
            let one_m = T::one() - mom;
            let new_rm: Vec<T> = running_mean
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| r * one_m + b * mom)
                .collect();
            let new_rv: Vec<T> = running_var
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| r * one_m + b * mom)
                .collect();
            running_mean.set_data(new_rm);
            running_var.set_data(new_rv);
            (mean, inv_std)
        } else {
            let eps_t = T::from_f64(eps);
            let mean = running_mean.to_vec();
            let inv_std: Vec<T> = running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps_t).sqrt())
                .collect();
            (mean, inv_std)
        };
        let y = kernels::bn_apply(
            &self.data(),
            &mean,
            &inv_std,
            &gamma.data(),
            &beta.data(),
            n,
            c,
            plane,
        );
        let record = grad_enabled() && (self.tracks() || gamma.tracks() || beta.tracks());
        Ok(Tensor::from_op(
            y,
            self.shape().to_vec(),
            pick(
                record,
                Op::BatchNorm {
                    input: self.clone(),
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    mean,
                    inv_std,
                    training,
                },
            ),
        ))
    }

    /// Non-overlapping window average; H and W must divide by `kernel`.
    pub fn avg_pool2d(&self, kernel: usize) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("avg_pool2d input")?;
        if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
            config_err!("avg_pool2d: {h}x{w} input not divisible by kernel {kernel}");
        }
        let (oh, ow) = (h / kernel, w / kernel);
        let inv = T::one() / T::from_f64((kernel * kernel) as f64);
        let data = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for s in 0..n {
            for ch in 0..c {
                let src = &data[(s * c + ch) * h * w..(s * c + ch + 1) * h * w];
                let dst = &mut out[(s * c + ch) * oh * ow..(s * c + ch + 1) * oh * ow];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = T::zero();
                        for ky in 0..kernel {
                            for kx in 0..kernel {
                                acc += src[(oy * kernel + ky) * w + ox * kernel + kx];
                            }
                        }
                        dst[oy * ow + ox] = acc * inv;
                    }
                }
            }
        }
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            out,
            vec![n, c, oh, ow],
            pick(
                record,
                Op::AvgPool {
                    input: self.clone(),
                    kernel,
                },
            ),
        ))
    }

    /// Mean over the spatial extent: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("global_avg_pool input")?;
        let plane = h * w;
        let inv = T::one() / T::from_f64(plane as f64);
        let data = self.data();
        let mut out = vec![T::zero(); n * c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = T::zero();
            for &v in &data[i * plane..(i + 1) * plane] {
                acc += v;
            }
            *o = acc * inv;
        }
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            out,
            vec![n, c, 1, 1],
            pick(record, Op::GlobalAvgPool { input: self.clone() }),
        ))
    }

    /// Affine map `[N,F] x [O,F] + [O] -> [N,O]`.
    pub fn linear(&self, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, f) = self.dims2("linear input")?;
        let (o, wf) = weight.dims2("linear weight")?;
        if wf != f {
            shape_err!("linear: input features {f} do not match weight features {wf}");
        }
        if bias.shape() != [o] {
            shape_err!("linear: bias shape {:?} does not match {o} outputs", bias.shape());
        }
        let mut out = vec![T::zero(); n * o];
        kernels::matmul_nt_acc(&self.data(), &weight.data(), &mut out, n, f, o);
        let bd = bias.data();
        for r in 0..n {
            for (j, v) in out[r * o..(r + 1) * o].iter_mut().enumerate() {
                *v += bd[j];
            }
        }
        let record = grad_enabled() && (self.tracks() || weight.tracks() || bias.tracks());
        Ok(Tensor::from_op(
            out,
            vec![n, o],
            pick(
                record,
                Op::Linear {
                    input: self.clone(),
                    weight: weight.clone(),
                    bias: bias.clone(),
                },
            ),
        ))
    }

    /// Per-sample l2 normalization. Each sample (dim 0 for n-d tensors, the
    /// whole tensor when 1-d) is flattened and divided by
    /// `max(its euclidean norm, eps)`.
    pub fn l2_normalize(&self, eps: f64) -> Result<Tensor<T>> {
        if eps <= 0.0 {
            config_err!("l2_normalize: eps must be positive, got {eps}");
        }
        let rows = if self.ndim() <= 1 { 1 } else { self.shape()[0] };
        let d = self.numel() / rows;
        let eps_t = T::from_f64(eps);
        let data = self.data();
        let mut out = vec![T::zero(); self.numel()];
        let mut raw_norms = vec![T::zero(); rows];
        for r in 0..rows {
            let src = &data[r * d..(r + 1) * d];
            let mut acc = T::zero();
            for &v in src {
                acc += v * v;
            }
            let norm = acc.sqrt();
            raw_norms[r] = norm;
            let div = if norm > eps_t { norm } else { eps_t };
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(src) {
                *o = v / div;
            }
        }
        drop(data);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            pick(
                record,
                Op::L2NormalizeRows {
                    input: self.clone(),
                    eps: eps_t,
                    raw_norms,
                },
            ),
        ))
    }

    /// Temperature-softened softmax over rows of `[N,K]`.
    pub fn softmax_t(&self, t: f64) -> Result<Tensor<T>> {
        if t <= 0.0 {
            config_err!("softmax_t: temperature must be positive, got {t}");
        }
        let (n, k) = self.dims2("softmax_t input")?;
        let y = kernels::softmax_rows(&self.data(), n, k, T::from_f64(t));
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            y,
            vec![n, k],
            pick(
                record,
                Op::SoftmaxT {
                    input: self.clone(),
                    t: T::from_f64(t),
                },
            ),
        ))
    }

    pub fn log_softmax(&self) -> Result<Tensor<T>> {
        let (n, k) = self.dims2("log_softmax input")?;
        let y = kernels::log_softmax_rows(&self.data(), n, k);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            y,
            vec![n, k],
            pick(record, Op::LogSoftmax { input: self.clone() }),
        ))
    }

    /// Channel-squared sum: `[N,C,H,W] -> [N, H·W]`, the unnormalized
    /// spatial attention map.
    pub fn square_channel_sum(&self) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.dims4("square_channel_sum input")?;
        let plane = h * w;
        let data = self.data();
        let mut out = vec![T::zero(); n * plane];
        for s in 0..n {
            let dst = &mut out[s * plane..(s + 1) * plane];
            for ch in 0..c {
                let src = &data[(s * c + ch) * plane..(s * c + ch + 1) * plane];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v * v;
                }
            }
        }
        drop(data);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            out,
            vec![n, plane],
            pick(record, Op::SquareChannelSum { input: self.clone() }),
        ))
    }

    /// Mean over rows of the row p-norm of `[N,D]` -> scalar.
    pub fn pnorm_rows_mean(&self, p: NormP) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("pnorm_rows_mean input")?;
        let data = self.data();
        let mut row_norms = vec![T::zero(); n];
        let mut acc = T::zero();
        for r in 0..n {
            let row = &data[r * d..(r + 1) * d];
            let norm = match p {
                NormP::L1 => {
                    let mut s = T::zero();
                    for &v in row {
                        s += v.abs();
                    }
                    s
                }
                NormP::L2 => {
                    let mut s = T::zero();
                    for &v in row {
                        s += v * v;
                    }
                    s.sqrt()
                }
            };
            row_norms[r] = norm;
            acc += norm;
        }
        drop(data);
        let val = acc / T::from_f64(n as f64);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            vec![val],
            vec![1],
            pick(
                record,
                Op::PNormRowsMean {
                    input: self.clone(),
                    p,
                    row_norms,
                },
            ),
        ))
    }

    /// Mean over rows of the squared row norm of `[N,D]` -> scalar.
    pub fn sqnorm_rows_mean(&self) -> Result<Tensor<T>> {
        let (n, d) = self.dims2("sqnorm_rows_mean input")?;
        let data = self.data();
        let mut acc = T::zero();
        for r in 0..n {
            for &v in &data[r * d..(r + 1) * d] {
                acc += v * v;
            }
        }
        drop(data);
        let val = acc / T::from_f64(n as f64);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            vec![val],
            vec![1],
            pick(record, Op::SqNormRowsMean { input: self.clone() }),
        ))
    }

    /// Mean negative log-likelihood of integer labels under the softmax of
    /// `[N,K]` logits. Numerically stable.
    pub fn cross_entropy_loss(&self, labels: &[usize]) -> Result<Tensor<T>> {
        let (n, k) = self.dims2("cross_entropy logits")?;
        if labels.len() != n {
            shape_err!("cross_entropy: {n} logit rows but {} labels", labels.len());
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            data_err!("cross_entropy: label {bad} out of range for {k} classes");
        }
        let logp = kernels::log_softmax_rows(&self.data(), n, k);
        let mut acc = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            acc -= logp[r * k + y];
        }
        let val = acc / T::from_f64(n as f64);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            vec![val],
            vec![1],
            pick(
                record,
                Op::CrossEntropy {
                    logits: self.clone(),
                    labels: labels.to_vec(),
                },
            ),
        ))
    }

    /// `T² · KL(softmax(teacher/T) ‖ softmax(self/T))`, batch mean. The
    /// teacher side is a constant; gradients flow into `self` only.
    pub fn kd_loss_vs(&self, teacher_logits: &Tensor<T>, t: f64) -> Result<Tensor<T>> {
        if t <= 0.0 {
            config_err!("kd loss: temperature must be positive, got {t}");
        }
        let (n, k) = self.dims2("kd student logits")?;
        self.check_same_shape(teacher_logits, "kd loss")?;
        let t_t = T::from_f64(t);
        let p = kernels::softmax_rows(&teacher_logits.data(), n, k, t_t);
        // log q at temperature: log_softmax of scaled logits
        let scaled: Vec<T> = self.data().iter().map(|&v| v / t_t).collect();
        let logq = kernels::log_softmax_rows(&scaled, n, k);
        let mut acc = T::zero();
        for r in 0..n {
            for j in 0..k {
                let pj = p[r * k + j];
                acc += pj * (pj.ln() - logq[r * k + j]);
            }
        }
        let val = acc * t_t * t_t / T::from_f64(n as f64);
        let record = grad_enabled() && self.tracks();
        Ok(Tensor::from_op(
            vec![val],
            vec![1],
            pick(
                record,
                Op::KdLoss {
                    student: self.clone(),
                    teacher_probs: p,
                    t: t_t,
                },
            ),
        ))
    }
}

pub(crate) fn conv_out_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    let he = h + 2 * pad;
    let we = w + 2 * pad;
    if he < kh || we < kw {
        config_err!("conv2d: kernel {kh}x{kw} larger than padded input {he}x{we}");
    }
    if (he - kh) % stride != 0 || (we - kw) % stride != 0 {
        config_err!(
            "conv2d: non-integral output size for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, padding {pad}"
        );
    }
    Ok(((he - kh) / stride + 1, (we - kw) / stride + 1))
}
