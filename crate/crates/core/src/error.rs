use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PcnnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PcnnError {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("degenerate discrete set: {0}")]
    DegenerateSet(String),

    #[error("cannot pack entry {index} = {value}: not one of {{-{scale}, +{scale}}}")]
    Pack { index: usize, value: f32, scale: f32 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("layer {0} has no cached forward pass")]
    MissingCache(String),

    #[error("unknown architecture `{0}`")]
    UnknownArch(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("non-finite loss at iteration {iteration} (layer {layer}): {detail}")]
    NonFinite {
        layer: String,
        iteration: u64,
        detail: String,
    },

    #[error("{path}: truncated at byte offset {offset} (file needs {needed} bytes)")]
    Truncated {
        path: PathBuf,
        offset: usize,
        needed: usize,
    },

    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("dataset: {0}")]
    Data(String),

    #[error("model format: {0}")]
    Format(String),

    #[error("checksum mismatch: stored 0x{stored:08x}, computed 0x{computed:08x}")]
    Integrity { stored: u32, computed: u32 },

    #[error("config: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl PcnnError {
    pub(crate) fn shape(op: &'static str, lhs: impl std::fmt::Debug, rhs: impl std::fmt::Debug) -> Self {
        PcnnError::Shape {
            op,
            lhs: format!("{lhs:?}"),
            rhs: format!("{rhs:?}"),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        PcnnError::Io {
            context: context.into(),
            source,
        }
    }

    /// Short machine-readable category, used by the CLI error line and the C API.
    pub fn category(&self) -> &'static str {
        match self {
            PcnnError::Shape { .. } => "shape",
            PcnnError::DegenerateSet(_) => "degenerate-set",
            PcnnError::Pack { .. } => "pack",
            PcnnError::LabelOutOfRange { .. } => "label",
            PcnnError::MissingCache(_) => "missing-cache",
            PcnnError::UnknownArch(_) => "unknown-arch",
            PcnnError::UnknownLayer(_) => "unknown-layer",
            PcnnError::NonFinite { .. } => "non-finite",
            PcnnError::Truncated { .. } | PcnnError::BadMagic { .. } | PcnnError::Data(_) => "data",
            PcnnError::Format(_) => "format",
            PcnnError::Integrity { .. } => "integrity",
            PcnnError::Config(_) => "config",
            PcnnError::Io { .. } => "io",
        }
    }
}
