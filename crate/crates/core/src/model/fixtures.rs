// SPDX-License-Identifier: MIT OR Apache-2.0

//! Small models with known behaviour: seeded random weights, and hand-built
//! weights whose greedy output is fixed by construction. Used by the test
//! suites and the runnable examples.

use std::collections::BTreeMap;

use super::config::{ModelConfig, PositionalScheme};
use super::weights::ModelWeights;
use super::ModelHandle;
use crate::steering::{ControlVector, ExtractionMeta, ReadPosition};

/// Byte vocabulary plus end-of-sequence and a few spare ids.
pub const TINY_VOCAB: usize = 260;
pub const TINY_MAX_SEQ: usize = 512;

pub fn tiny_config(n_layers: usize, hidden_dim: usize, n_heads: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        hidden_dim,
        n_heads,
        vocab_size: TINY_VOCAB,
        max_seq_len: TINY_MAX_SEQ,
        norm_epsilon: 1e-5,
        positional_scheme: PositionalScheme::Rotary,
    }
}

pub fn random_model(n_layers: usize, hidden_dim: usize, n_heads: usize, seed: u64) -> ModelHandle {
    let config = tiny_config(n_layers, hidden_dim, n_heads);
    let weights = ModelWeights::random(&config, seed);
    ModelHandle::new(config, weights).expect("random weights match their own schema")
}

/// Every logit is zero at every position, so each next-token distribution is
/// uniform over `vocab_size`.
pub fn uniform_model(vocab_size: usize) -> ModelHandle {
    let config = ModelConfig {
        vocab_size,
        ..tiny_config(1, 8, 2)
    };
    let mut weights = ModelWeights::zeros(&config);
    weights.get_mut("tok_embeddings").unwrap().data.fill(1.0);
    ModelHandle::new(config, weights).expect("valid schema")
}

/// Greedy decoding emits `token` forever.
///
/// All embeddings are the all-ones vector and every block is zero, so the
/// final normalised state is all ones; only `token`'s unembedding column is
/// non-zero.
pub fn constant_output_model(token: u32) -> ModelHandle {
    let config = tiny_config(1, 8, 2);
    let mut weights = ModelWeights::zeros(&config);
    weights.get_mut("tok_embeddings").unwrap().data.fill(1.0);
    let out = weights.get_mut("output").unwrap();
    for r in 0..config.hidden_dim {
        *out.at_mut(r, token as usize) = 1.0;
    }
    ModelHandle::new(config, weights).expect("valid schema")
}

/// Emits `first` until `marker` appears anywhere in the context, then emits
/// `second`.
///
/// Slot 0 of every embedding is 1; slot 1 flags the marker byte. Uniform
/// attention (zero queries and keys) copies the marker frequency into slot 2,
/// which drives `second`'s logit far above `first`'s.
pub fn marker_switch_model(first: u32, second: u32, marker: u32) -> ModelHandle {
    let config = ModelConfig {
        n_heads: 1,
        ..tiny_config(1, 8, 1)
    };
    let mut weights = ModelWeights::zeros(&config);
    let emb = weights.get_mut("tok_embeddings").unwrap();
    for t in 0..config.vocab_size {
        *emb.at_mut(t, 0) = 1.0;
    }
    *emb.at_mut(marker as usize, 1) = 1.0;
    *weights.get_mut("layers.0.wv").unwrap().at_mut(1, 2) = 1.0;
    *weights.get_mut("layers.0.wo").unwrap().at_mut(2, 2) = 1.0;
    let out = weights.get_mut("output").unwrap();
    *out.at_mut(0, first as usize) = 1.0;
    *out.at_mut(2, second as usize) = 1000.0;
    ModelHandle::new(config, weights).expect("valid schema")
}

/// Control vector at the last layer equal to `token`'s unembedding column.
///
/// When the final norm has uniform gain, adding `γ·v` before it raises
/// `token`'s logit strictly monotonically in `γ`, whatever the residual.
pub fn unembedding_vector(handle: &ModelHandle, token: u32, trait_name: &str) -> ControlVector {
    let last = handle.n_layers() - 1;
    let column = handle
        .weights()
        .get("output")
        .expect("validated")
        .column(token as usize);
    ControlVector {
        trait_name: trait_name.to_string(),
        model_id: handle.model_id(),
        hidden_dim: handle.hidden_dim(),
        layer_vectors: BTreeMap::from([(last, column)]),
        meta: ExtractionMeta {
            pair_count: 1,
            read_position: ReadPosition::LastToken,
            source: "unembedding_column".to_string(),
            created_unix: 0,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::HookSet;

    #[test]
    fn marker_switch_behaviour() {
        let m = marker_switch_model(b'A' as u32, b'B' as u32, b'\'' as u32);
        let plain = m.encode("User: pick one\nAssistant:").unwrap();
        let out = m.greedy_decode(&plain, 3, &mut HookSet::new()).unwrap();
        assert_eq!(m.decode(&out[plain.len()..]), "AAA");
        let marked = m.encode("User: that's wrong\nAssistant:").unwrap();
        let out = m.greedy_decode(&marked, 3, &mut HookSet::new()).unwrap();
        assert_eq!(m.decode(&out[marked.len()..]), "BBB");
    }
}
