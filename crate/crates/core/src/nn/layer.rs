//! Layer specifications, built layers with their parameters, and the
//! shape contracts validated when a network is assembled.

use rand::Rng;
use rand_distr::StandardNormal;

use super::Mode;
use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Declarative layer description; building one draws parameters from the
/// init stream. Shape contracts between adjacent layers are validated when
/// the network is assembled, before any parameter is allocated.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    Conv {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    ConvTranspose {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    BatchNorm {
        channels: usize,
    },
    LeakyRelu {
        slope: f64,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    GlobalAvgPool,
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Two 3x3 convs with batchnorm and an identity skip; a 1x1 projection
    /// (with batchnorm) bridges the skip when channel counts differ.
    ResidualBlock {
        in_ch: usize,
        out_ch: usize,
    },
}

/// Symbolic activation shape threaded through a network at build time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatShape {
    Map { c: usize, h: usize, w: usize },
    Flat { f: usize },
}

impl LayerSpec {
    /// Output shape given the input shape, or a configuration error naming
    /// the mismatch.
    pub(crate) fn infer(&self, input: FeatShape) -> Result<FeatShape> {
        let need_map = |what: &str| -> Result<(usize, usize, usize)> {
            match input {
                FeatShape::Map { c, h, w } => Ok((c, h, w)),
                FeatShape::Flat { .. } => {
                    config_err!("{what} expects a feature map input, got a flat vector")
                }
            }
        };
        match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = need_map("conv layer")?;
                if c != in_ch {
                    config_err!("conv layer expects {in_ch} input channels, got {c}");
                }
                let (oh, ow) =
                    crate::tensor::conv_output_extent(h, w, kernel, kernel, stride, padding)?;
                Ok(FeatShape::Map {
                    c: out_ch,
                    h: oh,
                    w: ow,
                })
            }
            LayerSpec::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = need_map("transposed conv layer")?;
                if c != in_ch {
                    config_err!("transposed conv layer expects {in_ch} input channels, got {c}");
                }
                let oh = (h - 1) * stride + kernel;
                let ow = (w - 1) * stride + kernel;
                if oh <= 2 * padding || ow <= 2 * padding {
                    config_err!("transposed conv padding {padding} exceeds output extent");
                }
                Ok(FeatShape::Map {
                    c: out_ch,
                    h: oh - 2 * padding,
                    w: ow - 2 * padding,
                })
            }
            LayerSpec::BatchNorm { channels } => {
                let (c, h, w) = need_map("batchnorm layer")?;
                if c != channels {
                    config_err!("batchnorm expects {channels} channels, got {c}");
                }
                Ok(FeatShape::Map { c, h, w })
            }
            LayerSpec::LeakyRelu { .. } | LayerSpec::Relu => Ok(input),
            LayerSpec::AvgPool { kernel } => {
                let (c, h, w) = need_map("avg pool layer")?;
                if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                    config_err!("avg pool kernel {kernel} does not divide {h}x{w}");
                }
                Ok(FeatShape::Map {
                    c,
                    h: h / kernel,
                    w: w / kernel,
                })
            }
            LayerSpec::GlobalAvgPool => {
                let (c, ..) = need_map("global avg pool layer")?;
                Ok(FeatShape::Map { c, h: 1, w: 1 })
            }
            LayerSpec::Flatten => match input {
                FeatShape::Map { c, h, w } => Ok(FeatShape::Flat { f: c * h * w }),
                FeatShape::Flat { f } => Ok(FeatShape::Flat { f }),
            },
            LayerSpec::Linear {
                in_features,
                out_features,
            } => match input {
                FeatShape::Flat { f } if f == in_features => {
                    Ok(FeatShape::Flat { f: out_features })
                }
                other => config_err!(
                    "linear layer expects a flat input of {in_features} features, got {other:?}"
                ),
            },
            LayerSpec::ResidualBlock { in_ch, out_ch } => {
                let (c, h, w) = need_map("residual block")?;
                if c != in_ch {
                    config_err!("residual block expects {in_ch} input channels, got {c}");
                }
                Ok(FeatShape::Map { c: out_ch, h, w })
            }
        }
    }
}

/// He fan-in normal draw: `N(0, 2/fan_in)`, sampled in f64 so f32 and f64
/// builds see the same stream.
fn he_normal<T: Scalar>(rng: &mut impl Rng, n: usize, fan_in: usize) -> Vec<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    (0..n)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect()
}

/// Bias-free stride-1 conv for residual-block internals.
fn plain_conv<T: Scalar>(
    rng: &mut impl Rng,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    padding: usize,
) -> Result<ConvLayer<T>> {
    let fan_in = in_ch * kernel * kernel;
    Ok(ConvLayer {
        weight: Tensor::param(
            he_normal(rng, out_ch * fan_in, fan_in),
            &[out_ch, in_ch, kernel, kernel],
        )?,
        bias: None,
        stride: 1,
        padding,
        transposed: false,
    })
}

pub struct ConvLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: usize,
    transposed: bool,
}

pub struct BatchNormLayer<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Scalar> BatchNormLayer<T> {
    fn new(channels: usize) -> Self {
        BatchNormLayer {
            gamma: Tensor::param(vec![T::one(); channels], &[channels]).expect("shape"),
            beta: Tensor::param(vec![T::zero(); channels], &[channels]).expect("shape"),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        x.batch_norm(
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.momentum,
            self.eps,
            mode == Mode::Train,
        )
    }

    fn collect_state(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        let push = |out: &mut Vec<ParamEntry<T>>, name: String, t: &Tensor<T>, trainable| {
            out.push(ParamEntry {
                name,
                tensor: t.clone(),
                trainable,
                decay: false,
            });
        };
        push(out, format!("{prefix}.gamma"), &self.gamma, true);
        push(out, format!("{prefix}.beta"), &self.beta, true);
        push(out, format!("{prefix}.running_mean"), &self.running_mean, false);
        push(out, format!("{prefix}.running_var"), &self.running_var, false);
    }
}

pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub struct ResidualBlockLayer<T: Scalar> {
    conv1: ConvLayer<T>,
    bn1: BatchNormLayer<T>,
    conv2: ConvLayer<T>,
    bn2: BatchNormLayer<T>,
    proj: Option<(ConvLayer<T>, BatchNormLayer<T>)>,
}

pub enum Layer<T: Scalar> {
    Conv(ConvLayer<T>),
    ConvTranspose(ConvLayer<T>),
    BatchNorm(BatchNormLayer<T>),
    LeakyRelu { slope: f64 },
    Relu,
    AvgPool { kernel: usize },
    GlobalAvgPool,
    Flatten,
    Linear(LinearLayer<T>),
    Residual(ResidualBlockLayer<T>),
}

/// Named handle onto one parameter or state buffer of a network.
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Updated by the optimizer (false for batchnorm running statistics).
    pub trainable: bool,
    /// Weight decay applies (false for batchnorm scale/shift).
    pub decay: bool,
}

impl<T: Scalar> LayerSpec {
    pub(crate) fn build_layer(&self, rng: &mut impl Rng) -> Result<Layer<T>> {
        Ok(match *self {
            LayerSpec::Conv {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                bias,
            } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    config_err!("conv layer dimensions must be positive");
                }
                let fan_in = in_ch * kernel * kernel;
                let weight = Tensor::param(
                    he_normal(rng, out_ch * fan_in, fan_in),
                    &[out_ch, in_ch, kernel, kernel],
                )?;
                let bias = if bias {
                    Some(Tensor::param(vec![T::zero(); out_ch], &[out_ch])?)
                } else {
                    None
                };
                Layer::Conv(ConvLayer {
                    weight,
                    bias,
                    stride,
                    padding,
                    transposed: false,
                })
            }
            LayerSpec::ConvTranspose {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
                bias,
            } => {
                if in_ch == 0 || out_ch == 0 || kernel == 0 || stride == 0 {
                    config_err!("transposed conv layer dimensions must be positive");
                }
                let fan_in = in_ch * kernel * kernel;
                let weight = Tensor::param(
                    he_normal(rng, in_ch * out_ch * kernel * kernel, fan_in),
                    &[in_ch, out_ch, kernel, kernel],
                )?;
                let bias = if bias {
                    Some(Tensor::param(vec![T::zero(); out_ch], &[out_ch])?)
                } else {
                    None
                };
                Layer::ConvTranspose(ConvLayer {
                    weight,
                    bias,
                    stride,
                    padding,
                    transposed: true,
                })
            }
            LayerSpec::BatchNorm { channels } => Layer::BatchNorm(BatchNormLayer::new(channels)),
            LayerSpec::LeakyRelu { slope } => Layer::LeakyRelu { slope },
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::AvgPool { kernel } => Layer::AvgPool { kernel },
            LayerSpec::GlobalAvgPool => Layer::GlobalAvgPool,
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                let weight = Tensor::param(
                    he_normal(rng, out_features * in_features, in_features),
                    &[out_features, in_features],
                )?;
                let bias = Tensor::param(vec![T::zero(); out_features], &[out_features])?;
                Layer::Linear(LinearLayer { weight, bias })
            }
            LayerSpec::ResidualBlock { in_ch, out_ch } => {
                let conv1 = plain_conv(rng, in_ch, out_ch, 3, 1)?;
                let bn1 = BatchNormLayer::new(out_ch);
                let conv2 = plain_conv(rng, out_ch, out_ch, 3, 1)?;
                let bn2 = BatchNormLayer::new(out_ch);
                let proj = if in_ch != out_ch {
                    Some((plain_conv(rng, in_ch, out_ch, 1, 0)?, BatchNormLayer::new(out_ch)))
                } else {
                    None
                };
                Layer::Residual(ResidualBlockLayer {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    proj,
                })
            }
        })
    }
}

impl<T: Scalar> Layer<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Layer::Conv(c) => x.conv2d(&c.weight, c.bias.as_ref(), c.stride, c.padding),
            Layer::ConvTranspose(c) => {
                x.conv_transpose2d(&c.weight, c.bias.as_ref(), c.stride, c.padding)
            }
            Layer::BatchNorm(bn) => bn.forward(x, mode),
            Layer::LeakyRelu { slope } => x.leaky_relu(*slope),
            Layer::Relu => x.relu(),
            Layer::AvgPool { kernel } => x.avg_pool2d(*kernel),
            Layer::GlobalAvgPool => x.global_avg_pool(),
            Layer::Flatten => x.flatten_rows(),
            Layer::Linear(l) => x.flatten_rows()?.linear(&l.weight, &l.bias),
            Layer::Residual(rb) => {
                let out = rb.conv1.apply(x)?;
                let out = rb.bn1.forward(&out, mode)?;
                let out = out.relu()?;
                let out = rb.conv2.apply(&out)?;
                let out = rb.bn2.forward(&out, mode)?;
                let skip = match &rb.proj {
                    Some((pc, pbn)) => pbn.forward(&pc.apply(x)?, mode)?,
                    None => x.clone(),
                };
                out.add(&skip)?.relu()
            }
        }
    }

    pub(crate) fn collect_state(&self, prefix: &str, out: &mut Vec<ParamEntry<T>>) {
        let push = |out: &mut Vec<ParamEntry<T>>, name: String, t: &Tensor<T>, trainable, decay| {
            out.push(ParamEntry {
                name,
                tensor: t.clone(),
                trainable,
                decay,
            });
        };
        match self {
            Layer::Conv(c) | Layer::ConvTranspose(c) => {
                push(out, format!("{prefix}.weight"), &c.weight, true, true);
                if let Some(b) = &c.bias {
                    push(out, format!("{prefix}.bias"), b, true, true);
                }
            }
            Layer::BatchNorm(bn) => bn.collect_state(prefix, out),
            Layer::Linear(l) => {
                push(out, format!("{prefix}.weight"), &l.weight, true, true);
                push(out, format!("{prefix}.bias"), &l.bias, true, true);
            }
            Layer::Residual(rb) => {
                push(out, format!("{prefix}.conv1.weight"), &rb.conv1.weight, true, true);
                rb.bn1.collect_state(&format!("{prefix}.bn1"), out);
                push(out, format!("{prefix}.conv2.weight"), &rb.conv2.weight, true, true);
                rb.bn2.collect_state(&format!("{prefix}.bn2"), out);
                if let Some((pc, pbn)) = &rb.proj {
                    push(out, format!("{prefix}.proj.weight"), &pc.weight, true, true);
                    pbn.collect_state(&format!("{prefix}.proj_bn"), out);
                }
            }
            _ => {}
        }
    }
}

impl<T: Scalar> ConvLayer<T> {
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if self.transposed {
            x.conv_transpose2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
        } else {
            x.conv2d(&self.weight, self.bias.as_ref(), self.stride, self.padding)
        }
    }
}
