//! Concrete architectures. The teacher and student share one family and one
//! stride plan (spatial halving at group entry via 2x2 average pooling), so
//! their last-group feature maps always share spatial extent and only width
//! and depth differ; a translator bridges channel counts.
//!
//! Downsampling happens with pooling rather than strided 3x3 convolutions
//! because the convolution contract requires integral output extents, which
//! odd kernels with stride 2 cannot satisfy on even inputs.

use rand::Rng;

use super::layer::{FeatShape, LayerSpec};
use super::network::{ArchSpec, GroupSpec, Network};
use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{NoGradGuard, Tensor};

/// Slope of every leaky rectifier inside the paraphraser and translator.
pub const FACTOR_SLOPE: f64 = 0.1;

/// Factor channel count `round(m·k)`, rounding half up. Rejects results
/// below one.
pub fn factor_channels(m: usize, k: f64) -> Result<usize> {
    if k <= 0.0 || !k.is_finite() {
        config_err!("paraphrase rate k must be a positive finite number, got {k}");
    }
    let f = (m as f64 * k + 0.5).floor();
    if f < 1.0 {
        config_err!("paraphrase rate k={k} with m={m} gives {f} factor channels (minimum 1)");
    }
    Ok(f as usize)
}

pub(super) fn build_resnet<T: Scalar>(
    blocks: usize,
    width: usize,
    classes: usize,
    in_channels: usize,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    if blocks < 1 {
        config_err!("residual classifier needs at least one block per group, got {blocks}");
    }
    if width < 8 {
        config_err!("residual classifier width must be at least 8, got {width}");
    }
    if classes < 2 {
        config_err!("residual classifier needs at least two classes, got {classes}");
    }
    if in_channels < 1 {
        config_err!("residual classifier needs at least one input channel");
    }
    let stem = GroupSpec {
        name: "stem",
        collect: false,
        layers: vec![
            LayerSpec::Conv {
                in_ch: in_channels,
                out_ch: width,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: false,
            },
            LayerSpec::BatchNorm { channels: width },
            LayerSpec::Relu,
        ],
    };
    let group = |name: &'static str, in_ch: usize, out_ch: usize, pool: bool| {
        let mut layers = Vec::new();
        if pool {
            layers.push(LayerSpec::AvgPool { kernel: 2 });
        }
        layers.push(LayerSpec::ResidualBlock { in_ch, out_ch });
        for _ in 1..blocks {
            layers.push(LayerSpec::ResidualBlock {
                in_ch: out_ch,
                out_ch,
            });
        }
        GroupSpec {
            name,
            collect: true,
            layers,
        }
    };
    let head = GroupSpec {
        name: "head",
        collect: false,
        layers: vec![
            LayerSpec::GlobalAvgPool,
            LayerSpec::Flatten,
            LayerSpec::Linear {
                in_features: 4 * width,
                out_features: classes,
            },
        ],
    };
    Network::assemble(
        ArchSpec::Resnet {
            blocks,
            width,
            classes,
            in_channels,
        },
        // Spatial extent is only constrained at forward time (it must divide
        // by four); 8x8 here stands in for any valid size.
        FeatShape::Map {
            c: in_channels,
            h: 8,
            w: 8,
        },
        vec![
            stem,
            group("g1", width, width, false),
            group("g2", width, 2 * width, true),
            group("g3", 2 * width, 4 * width, true),
            head,
        ],
        rng,
    )
}

/// Teacher classifier: `blocks` residual blocks per group at base `width`.
pub fn build_teacher<T: Scalar>(
    blocks: usize,
    width: usize,
    classes: usize,
    in_channels: usize,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    build_resnet(blocks, width, classes, in_channels, rng)
}

/// Student classifier: same family and stride plan as the teacher, smaller
/// depth and/or width.
pub fn build_student<T: Scalar>(
    blocks: usize,
    width: usize,
    classes: usize,
    in_channels: usize,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    build_resnet(blocks, width, classes, in_channels, rng)
}

/// Paraphraser over `m`-channel last-group features: a spatial-preserving
/// encoder (m -> m -> round(m·k) -> round(m·k)) whose output is the teacher
/// factor, and a mirrored transposed-convolution decoder used only for
/// reconstruction training.
pub fn build_paraphraser<T: Scalar>(m: usize, k: f64, rng: &mut impl Rng) -> Result<Network<T>> {
    let f = factor_channels(m, k)?;
    let conv = |in_ch, out_ch| LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
        padding: 1,
        bias: true,
    };
    let deconv = |in_ch, out_ch| LayerSpec::ConvTranspose {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
        padding: 1,
        bias: true,
    };
    let lrelu = LayerSpec::LeakyRelu {
        slope: FACTOR_SLOPE,
    };
    Network::assemble(
        ArchSpec::Paraphraser { m, k },
        FeatShape::Map { c: m, h: 8, w: 8 },
        vec![
            GroupSpec {
                name: "encoder",
                collect: true,
                layers: vec![
                    conv(m, m),
                    lrelu.clone(),
                    conv(m, f),
                    lrelu.clone(),
                    conv(f, f),
                    lrelu.clone(),
                ],
            },
            GroupSpec {
                name: "decoder",
                collect: false,
                layers: vec![
                    deconv(f, m),
                    lrelu.clone(),
                    deconv(m, m),
                    lrelu,
                    deconv(m, m),
                ],
            },
        ],
        rng,
    )
}

/// Translator from `s` student channels onto the teacher factor's
/// `round(m·k)` channels, spatial extent preserved.
pub fn build_translator<T: Scalar>(
    s: usize,
    m: usize,
    k: f64,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    build_translator_to(s, factor_channels(m, k)?, rng)
}

/// Translator with an explicit target channel count (ablations match raw
/// teacher features by passing `target = m`).
pub fn build_translator_to<T: Scalar>(
    s: usize,
    target: usize,
    rng: &mut impl Rng,
) -> Result<Network<T>> {
    if s < 1 || target < 1 {
        config_err!("translator channel counts must be positive (s={s}, target={target})");
    }
    let conv = |in_ch, out_ch| LayerSpec::Conv {
        in_ch,
        out_ch,
        kernel: 3,
        stride: 1,
        padding: 1,
        bias: true,
    };
    let lrelu = LayerSpec::LeakyRelu {
        slope: FACTOR_SLOPE,
    };
    Network::assemble(
        ArchSpec::Translator {
            in_channels: s,
            out_channels: target,
        },
        FeatShape::Map { c: s, h: 8, w: 8 },
        vec![GroupSpec {
            name: "translator",
            collect: true,
            layers: vec![
                conv(s, s),
                lrelu.clone(),
                conv(s, target),
                lrelu,
                conv(target, target),
            ],
        }],
        rng,
    )
}

/// Run the factor-extracting part of a network over a feature map: the
/// encoder group of a paraphraser, or the whole network otherwise.
///
/// With `frozen` set, the input is detached and nothing is recorded, so a
/// later backward pass can reach neither the sub-network's parameters nor
/// anything upstream of `feature`. Unfrozen extraction participates in the
/// graph normally.
pub fn extract_factor<T: Scalar>(
    net: &Network<T>,
    feature: &Tensor<T>,
    frozen: bool,
) -> Result<Tensor<T>> {
    let run = |x: &Tensor<T>| -> Result<Tensor<T>> {
        match net.arch() {
            ArchSpec::Paraphraser { .. } => net.forward_through(x, "encoder"),
            _ => net.forward(x),
        }
    };
    if frozen {
        let _ng = NoGradGuard::new();
        run(&feature.detach())
    } else {
        run(feature)
    }
}

/// Logits plus collected per-group feature maps; thin named wrapper over
/// [`Network::forward_collect`].
pub fn forward_collect<T: Scalar>(
    net: &Network<T>,
    batch: &Tensor<T>,
) -> Result<(Tensor<T>, super::network::Features<T>)> {
    net.forward_collect(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::rng::component_rng;

    #[test]
    fn factor_channel_rounding() {
        assert_eq!(factor_channels(64, 0.5).unwrap(), 32);
        assert_eq!(factor_channels(64, 0.75).unwrap(), 48);
        assert_eq!(factor_channels(64, 1.0).unwrap(), 64);
        assert_eq!(factor_channels(64, 2.0).unwrap(), 128);
        assert_eq!(factor_channels(64, 4.0).unwrap(), 256);
        assert_eq!(factor_channels(3, 0.5).unwrap(), 2, "round half up");
        assert!(factor_channels(10, 0.01).is_err());
        assert!(factor_channels(10, -1.0).is_err());
    }

    #[test]
    fn teacher_shapes_and_param_ordering() {
        let mut rng = component_rng(0, "test.teacher");
        let teacher = build_teacher::<f32>(3, 16, 10, 3, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let (logits, features) = teacher.forward_collect(&x).unwrap();
        assert_eq!(logits.shape(), &[2, 10]);
        let names: Vec<&str> = features.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names, ["g1", "g2", "g3"]);
        assert_eq!(features[0].1.shape(), &[2, 16, 32, 32]);
        assert_eq!(features[1].1.shape(), &[2, 32, 16, 16]);
        assert_eq!(features[2].1.shape(), &[2, 64, 8, 8]);
    }

    #[test]
    fn teacher_eval_forward_is_finite_on_zeros() {
        let mut rng = component_rng(1, "test.teacher");
        let mut teacher = build_teacher::<f32>(3, 16, 10, 3, &mut rng).unwrap();
        teacher.set_mode(Mode::Eval);
        let logits = teacher.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        assert!(logits.is_finite());
    }

    #[test]
    fn teacher_larger_than_student() {
        let mut rng = component_rng(2, "test.pair");
        let teacher = build_teacher::<f32>(3, 16, 10, 3, &mut rng).unwrap();
        let student = build_student::<f32>(1, 16, 10, 3, &mut rng).unwrap();
        assert!(teacher.param_count() > student.param_count());
        // Same stride plan: matching spatial extents on the last group.
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let (_, tf) = teacher.forward_collect(&x).unwrap();
        let (_, sf) = student.forward_collect(&x).unwrap();
        assert_eq!(tf[2].1.shape(), &[1, 64, 8, 8]);
        assert_eq!(sf[2].1.shape(), &[1, 64, 8, 8]);
    }

    #[test]
    fn narrow_student_needs_translator() {
        let mut rng = component_rng(3, "test.narrow");
        let student = build_student::<f32>(3, 8, 10, 3, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 3, 32, 32]);
        let (_, sf) = student.forward_collect(&x).unwrap();
        assert_eq!(sf[2].1.shape(), &[1, 32, 8, 8]);
    }

    #[test]
    fn builder_validation() {
        let mut rng = component_rng(4, "test.bad");
        assert!(build_teacher::<f32>(0, 16, 10, 3, &mut rng).is_err());
        assert!(build_teacher::<f32>(3, 4, 10, 3, &mut rng).is_err());
        assert!(build_paraphraser::<f32>(10, 0.01, &mut rng).is_err());
    }

    #[test]
    fn paraphraser_shape_contract() {
        let mut rng = component_rng(5, "test.para");
        let p = build_paraphraser::<f32>(64, 0.5, &mut rng).unwrap();
        let x = Tensor::zeros(&[2, 64, 8, 8]);
        let factor = p.forward_through(&x, "encoder").unwrap();
        assert_eq!(factor.shape(), &[2, 32, 8, 8]);
        let recon = p.forward(&x).unwrap();
        assert_eq!(recon.shape(), &[2, 64, 8, 8]);
    }

    #[test]
    fn translator_matches_factor_shape() {
        let mut rng = component_rng(6, "test.trans");
        for (s, m, k) in [(32, 64, 0.5), (64, 64, 1.0), (48, 64, 2.0)] {
            let tr = build_translator::<f32>(s, m, k, &mut rng).unwrap();
            let p = build_paraphraser::<f32>(m, k, &mut rng).unwrap();
            let sf = Tensor::zeros(&[2, s, 8, 8]);
            let tf = Tensor::zeros(&[2, m, 8, 8]);
            let fs = tr.forward(&sf).unwrap();
            let ft = p.forward_through(&tf, "encoder").unwrap();
            assert_eq!(fs.shape(), ft.shape());
        }
    }

    #[test]
    fn deterministic_initialization() {
        let mut a = component_rng(7, "init.teacher");
        let mut b = component_rng(7, "init.teacher");
        let na = build_teacher::<f32>(1, 8, 4, 3, &mut a).unwrap();
        let nb = build_teacher::<f32>(1, 8, 4, 3, &mut b).unwrap();
        for (ea, eb) in na.state_entries().iter().zip(nb.state_entries().iter()) {
            assert_eq!(ea.name, eb.name);
            assert_eq!(ea.tensor.to_vec(), eb.tensor.to_vec());
        }
    }

    #[test]
    fn zero_feature_through_biasless_encoder_is_zero() {
        let mut rng = component_rng(8, "test.zero");
        let p = build_paraphraser::<f32>(8, 0.5, &mut rng).unwrap();
        for e in p.params() {
            if e.name.ends_with(".bias") {
                e.tensor.set_data(vec![0.0; e.tensor.numel()]);
            }
        }
        let z = Tensor::zeros(&[1, 8, 4, 4]);
        let factor = extract_factor(&p, &z, true).unwrap();
        assert!(factor.to_vec().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn frozen_extraction_records_nothing() {
        let mut rng = component_rng(9, "test.freeze");
        let p = build_paraphraser::<f32>(8, 0.5, &mut rng).unwrap();
        let x = Tensor::<f32>::param(vec![0.5; 8 * 16], &[1, 8, 4, 4]).unwrap();
        let frozen = extract_factor(&p, &x, true).unwrap();
        assert!(frozen.is_leaf());
        let live = extract_factor(&p, &x, false).unwrap();
        assert!(!live.is_leaf());
    }
}
