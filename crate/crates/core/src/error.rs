// SPDX-License-Identifier: MIT OR Apache-2.0

//! Crate-wide error type.

use std::path::PathBuf;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    // -- model loading --
    #[error("config error: {0}")]
    Config(String),
    #[error("dimension inconsistency: {0}")]
    Dimension(String),
    #[error("corrupt weight file header: {0}")]
    CorruptHeader(String),
    #[error("shape mismatch for tensor `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),

    // -- forward pass --
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("layer index {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("non-finite activation after layer {layer}")]
    NonFinite { layer: usize },
    #[error("tokenization failed: {0}")]
    Tokenize(String),
    #[error("need at least {needed} tokens, got {got}")]
    TooFewTokens { needed: usize, got: usize },

    // -- steering --
    #[error("empty prompt pair set")]
    EmptyPairSet,
    #[error("invalid prompt pair: {0}")]
    InvalidPair(String),
    #[error("no layers requested")]
    NoLayers,
    #[error("control vector `{trait_name}` was extracted from model {vector_model}, target model is {target_model}")]
    ModelMismatch {
        trait_name: String,
        vector_model: String,
        target_model: String,
    },
    #[error("control vector `{trait_name}` has hidden size {found}, model expects {expected}")]
    HiddenMismatch {
        trait_name: String,
        expected: usize,
        found: usize,
    },
    #[error("control vector `{trait_name}` has no entry for layer {layer}")]
    MissingLayer { trait_name: String, layer: usize },
    #[error("gamma must be finite, got {0}")]
    NonFiniteGamma(f64),
    #[error("invalid control vector: {0}")]
    InvalidVector(String),

    // -- hub --
    #[error("hub already holds `{trait_name}` for this model; pass replace to overwrite")]
    DuplicateEntry { trait_name: String },
    #[error("no hub entry for `{trait_name}` and model {model_id}")]
    NotFound {
        trait_name: String,
        model_id: String,
    },
    #[error("checksum mismatch for hub entry `{trait_name}`")]
    Checksum { trait_name: String },
    #[error("malformed hub file: {0}")]
    MalformedHub(String),

    // -- aca --
    #[error("backend error: {0}")]
    Backend(String),
    #[error("seed elicitation for `{0}` produced no words or behaviors")]
    EmptySeed(String),
    #[error("generation for item {index} failed after {attempts} attempts")]
    RetriesExhausted { index: usize, attempts: usize },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    // -- eval --
    #[error("length mismatch: {items} items, {answers} answers")]
    LengthMismatch { items: usize, answers: usize },
    #[error("unknown trait `{0}`")]
    UnknownTrait(String),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("every MPI item was unparseable")]
    AllUnparseable,
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// Wrap an error with the pipeline stage that produced it.
    pub fn at_stage(self, stage: &'static str) -> Self {
        Self::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
