//! Layer and network composition plus the concrete architectures:
//! residual teacher/student classifiers, the paraphraser (encoder/decoder
//! attached to the teacher's last group) and the translator (the student-side
//! factor extractor).

mod build;
mod layer;
mod network;

pub use build::{
    build_paraphraser, build_student, build_teacher, build_translator, build_translator_to,
    extract_factor, factor_channels, forward_collect, FACTOR_SLOPE,
};
pub use layer::{Layer, LayerSpec, ParamEntry};
pub use network::{ArchSpec, Features, Group, Network};

/// Forward-pass mode. Eval uses running batchnorm statistics; train uses
/// batch statistics and updates the running buffers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
