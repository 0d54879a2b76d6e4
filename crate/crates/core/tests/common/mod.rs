// SPDX-License-Identifier: MIT OR Apache-2.0
#![allow(dead_code)]

use std::cell::RefCell;
use std::collections::BTreeMap;

use controllm::model::{HookSet, ModelHandle};
use controllm::steering::{
    ControlVector, ExtractionMeta, ReadPosition, SOURCE_POST_BLOCK_RESIDUAL,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Residual stream rows recorded at `layer` during a vanilla forward pass.
pub fn record_rows(handle: &ModelHandle, tokens: &[u32], layer: usize) -> Vec<Vec<f32>> {
    let rows = RefCell::new(Vec::new());
    let mut hooks = HookSet::new();
    hooks.add(layer, |s| {
        *rows.borrow_mut() = (0..s.seq_len()).map(|i| s.row(i).to_vec()).collect();
    });
    handle.forward(tokens, &mut hooks).unwrap();
    drop(hooks);
    rows.into_inner()
}

pub fn random_vector(
    handle: &ModelHandle,
    name: &str,
    layers: &[usize],
    seed: u64,
) -> ControlVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = handle.hidden_dim();
    ControlVector {
        trait_name: name.to_string(),
        model_id: handle.model_id(),
        hidden_dim: h,
        layer_vectors: layers
            .iter()
            .map(|&l| (l, (0..h).map(|_| rng.random_range(-1.0f32..1.0)).collect()))
            .collect::<BTreeMap<_, _>>(),
        meta: ExtractionMeta {
            pair_count: rng.random_range(1..100),
            read_position: ReadPosition::LastToken,
            source: SOURCE_POST_BLOCK_RESIDUAL.to_string(),
            created_unix: rng.random_range(0..2_000_000_000),
        },
    }
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f32::max)
}
