// SPDX-License-Identifier: MIT OR Apache-2.0

//! Deterministic decoder-only transformer runtime with residual-stream hooks.

mod config;
mod decode;
pub mod fixtures;
mod forward;
mod hooks;
mod tokenizer;
mod weights;

use std::path::Path;

pub use config::{ModelConfig, PositionalScheme};
pub use decode::DecodeStep;
pub use forward::{argmax, log_softmax, KvCache, LogitRecord, LogitRows};
pub use hooks::{HookSet, ResidualState};
pub use tokenizer::{StreamDecoder, Tokenizer, BYTE_EOS};
pub use weights::{expected_schema, ModelId, ModelWeights, Tensor, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use crate::error::Result;

/// Token ids in `[0, vocab_size)`.
pub type TokenSequence = Vec<u32>;

/// A loaded, validated model. Immutable after construction and safe to share
/// across threads; every forward call owns its own activations and caches.
#[derive(Debug, Clone)]
pub struct ModelHandle {
    config: ModelConfig,
    weights: ModelWeights,
    model_id: ModelId,
    tokenizer: Tokenizer,
}

impl ModelHandle {
    /// Validate `weights` against `config` and compute the model id.
    /// Uses the built-in byte tokenizer.
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        weights.validate(&config)?;
        let model_id = weights.model_id(&config);
        let tokenizer = Tokenizer::bytes(config.vocab_size);
        Ok(Self {
            config,
            weights,
            model_id,
            tokenizer,
        })
    }

    pub fn with_tokenizer(mut self, tokenizer: Tokenizer) -> Self {
        self.tokenizer = tokenizer;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn model_id(&self) -> ModelId {
        self.model_id
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn encode(&self, text: &str) -> Result<TokenSequence> {
        self.tokenizer.encode(text)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        self.tokenizer.decode(ids)
    }

    /// Write `config` and `weights` files that [`load_model`] reads back.
    pub fn save(&self, config_path: &Path, weights_path: &Path) -> Result<()> {
        self.config.write_file(config_path)?;
        self.weights.write_file(weights_path)
    }
}

/// Load a model from a `key=value` config file and a `CLMW` weight file.
pub fn load_model(config_path: &Path, weights_path: &Path) -> Result<ModelHandle> {
    let config = ModelConfig::from_file(config_path)?;
    let weights = ModelWeights::from_file(weights_path)?;
    ModelHandle::new(config, weights)
}
