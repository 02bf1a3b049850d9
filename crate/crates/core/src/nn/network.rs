//! Networks are ordered, named groups of layers. Group boundaries make
//! "the feature maps of the last group" a well-defined object for factor
//! extraction and attention transfer.

use rand::Rng;

use super::layer::{FeatShape, Layer, LayerSpec, ParamEntry};
use super::Mode;
use crate::error::{config_err, format_err, shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Buildable architecture identity; round-trips through checkpoint files.
#[derive(Clone, Debug, PartialEq)]
pub enum ArchSpec {
    /// Residual classifier: `blocks` residual blocks in each of three groups
    /// of widths (w, 2w, 4w), spatial halving at group 2 and 3 entries.
    Resnet {
        blocks: usize,
        width: usize,
        classes: usize,
        in_channels: usize,
    },
    /// Spatial-preserving encoder/decoder over `m`-channel feature maps with
    /// paraphrase rate `k`.
    Paraphraser { m: usize, k: f64 },
    /// Student-side factor extractor mapping `in_channels` feature channels
    /// onto `out_channels` factor channels at the same spatial extent.
    Translator {
        in_channels: usize,
        out_channels: usize,
    },
}

impl ArchSpec {
    pub fn descriptor(&self) -> String {
        match self {
            ArchSpec::Resnet {
                blocks,
                width,
                classes,
                in_channels,
            } => format!("resnet:{blocks}:{width}:{classes}:{in_channels}"),
            ArchSpec::Paraphraser { m, k } => format!("paraphraser:{m}:{k}"),
            ArchSpec::Translator {
                in_channels,
                out_channels,
            } => format!("translator:{in_channels}:{out_channels}"),
        }
    }

    pub fn parse(s: &str) -> Result<ArchSpec> {
        let parts: Vec<&str> = s.split(':').collect();
        let usize_at = |i: usize| -> Result<usize> {
            parts[i]
                .parse::<usize>()
                .map_err(|_| crate::error::Error::Format(format!("bad architecture field '{}' in '{s}'", parts[i])))
        };
        match parts.first() {
            Some(&"resnet") if parts.len() == 5 => Ok(ArchSpec::Resnet {
                blocks: usize_at(1)?,
                width: usize_at(2)?,
                classes: usize_at(3)?,
                in_channels: usize_at(4)?,
            }),
            Some(&"paraphraser") if parts.len() == 3 => {
                let k: f64 = parts[2]
                    .parse()
                    .map_err(|_| crate::error::Error::Format(format!("bad paraphrase rate in '{s}'")))?;
                Ok(ArchSpec::Paraphraser { m: usize_at(1)?, k })
            }
            Some(&"translator") if parts.len() == 3 => Ok(ArchSpec::Translator {
                in_channels: usize_at(1)?,
                out_channels: usize_at(2)?,
            }),
            _ => format_err!("unrecognized architecture descriptor '{s}'"),
        }
    }

    /// Rebuild a network of this architecture (fresh parameters).
    pub fn build<T: Scalar>(&self, rng: &mut impl Rng) -> Result<Network<T>> {
        match *self {
            ArchSpec::Resnet {
                blocks,
                width,
                classes,
                in_channels,
            } => super::build::build_resnet(blocks, width, classes, in_channels, rng),
            ArchSpec::Paraphraser { m, k } => super::build::build_paraphraser(m, k, rng),
            ArchSpec::Translator {
                in_channels,
                out_channels,
            } => super::build::build_translator_to(in_channels, out_channels, rng),
        }
    }
}

pub struct Group<T: Scalar> {
    pub name: String,
    pub layers: Vec<Layer<T>>,
    /// Whether `forward_collect` reports this group's output feature map.
    pub collect: bool,
}

/// Ordered groups with a mode flag and a declared input contract.
pub struct Network<T: Scalar> {
    arch: ArchSpec,
    groups: Vec<Group<T>>,
    mode: Mode,
    input_channels: usize,
}

/// Group outputs by name, in network order.
pub type Features<T> = Vec<(String, Tensor<T>)>;

pub(super) struct GroupSpec {
    pub name: &'static str,
    pub collect: bool,
    pub layers: Vec<LayerSpec>,
}

impl<T: Scalar> Network<T> {
    /// Validate the layer chain against `input`, then draw parameters.
    /// Parameter names are `<group>.<index>.<field>`; uniqueness follows
    /// from the naming scheme and is asserted here.
    pub(super) fn assemble(
        arch: ArchSpec,
        input: FeatShape,
        spec_groups: Vec<GroupSpec>,
        rng: &mut impl Rng,
    ) -> Result<Network<T>> {
        // Shape-check the whole chain first so no parameters are drawn for a
        // misconfigured network.
        let mut shape = input;
        for g in &spec_groups {
            for (i, spec) in g.layers.iter().enumerate() {
                shape = spec.infer(shape).map_err(|e| {
                    crate::error::Error::Config(format!("group {} layer {i}: {e}", g.name))
                })?;
            }
        }
        let input_channels = match input {
            FeatShape::Map { c, .. } => c,
            FeatShape::Flat { .. } => 0,
        };
        let mut groups = Vec::with_capacity(spec_groups.len());
        for g in spec_groups {
            let mut layers = Vec::with_capacity(g.layers.len());
            for spec in &g.layers {
                layers.push(spec.build_layer(rng)?);
            }
            groups.push(Group {
                name: g.name.to_string(),
                layers,
                collect: g.collect,
            });
        }
        let net = Network {
            arch,
            groups,
            mode: Mode::Train,
            input_channels,
        };
        debug_assert!(net.unique_param_names());
        Ok(net)
    }

    fn unique_param_names(&self) -> bool {
        let entries = self.state_entries();
        let mut names: Vec<&str> = entries.iter().map(|e| e.name.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        names.len() == before
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn groups(&self) -> &[Group<T>] {
        &self.groups
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.ndim() != 4 {
            shape_err!(
                "network input must be [N,C,H,W], got shape {:?}",
                x.shape()
            );
        }
        if self.input_channels != 0 && x.shape()[1] != self.input_channels {
            shape_err!(
                "network expects {} input channels, got {}",
                self.input_channels,
                x.shape()[1]
            );
        }
        Ok(())
    }

    /// Final output of the whole network.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for g in &self.groups {
            for layer in &g.layers {
                cur = layer.forward(&cur, self.mode)?;
            }
        }
        Ok(cur)
    }

    /// Final output plus every collected group's output feature map,
    /// all recorded on the tape when gradients are enabled.
    pub fn forward_collect(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Features<T>)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut features = Vec::new();
        for g in &self.groups {
            for layer in &g.layers {
                cur = layer.forward(&cur, self.mode)?;
            }
            if g.collect {
                features.push((g.name.clone(), cur.clone()));
            }
        }
        Ok((cur, features))
    }

    /// Output of the named group, not running any later group.
    pub fn forward_through(&self, x: &Tensor<T>, group: &str) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = x.clone();
        for g in &self.groups {
            for layer in &g.layers {
                cur = layer.forward(&cur, self.mode)?;
            }
            if g.name == group {
                return Ok(cur);
            }
        }
        config_err!("network has no group named '{group}'")
    }

    /// Trainable parameters in definition order.
    pub fn params(&self) -> Vec<ParamEntry<T>> {
        self.state_entries().into_iter().filter(|e| e.trainable).collect()
    }

    /// Every named buffer: parameters plus batchnorm running statistics.
    pub fn state_entries(&self) -> Vec<ParamEntry<T>> {
        let mut out = Vec::new();
        for g in &self.groups {
            for (i, layer) in g.layers.iter().enumerate() {
                layer.collect_state(&format!("{}.{}", g.name, i), &mut out);
            }
        }
        out
    }

    /// Number of trainable parameter elements.
    pub fn param_count(&self) -> usize {
        self.params().iter().map(|e| e.tensor.numel()).sum()
    }

    /// Exclude every parameter from gradient computation. A frozen network
    /// forwarded on detached input records nothing on the tape.
    pub fn freeze(&self) {
        for e in self.params() {
            e.tensor.set_requires_grad(false);
        }
    }

    pub fn unfreeze(&self) {
        for e in self.params() {
            e.tensor.set_requires_grad(true);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.params().iter().all(|e| !e.tensor.requires_grad())
    }

    pub fn zero_grads(&self) {
        for e in self.params() {
            e.tensor.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_descriptor_roundtrip() {
        for arch in [
            ArchSpec::Resnet {
                blocks: 3,
                width: 16,
                classes: 10,
                in_channels: 3,
            },
            ArchSpec::Paraphraser { m: 64, k: 0.75 },
            ArchSpec::Translator {
                in_channels: 32,
                out_channels: 48,
            },
        ] {
            let s = arch.descriptor();
            assert_eq!(ArchSpec::parse(&s).unwrap(), arch);
        }
        assert!(ArchSpec::parse("vgg:13").is_err());
    }
}
