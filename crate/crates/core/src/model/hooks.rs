// SPDX-License-Identifier: MIT OR Apache-2.0

//! Read/write access to the residual stream between transformer blocks.

use std::fmt;

/// Post-block residual for a contiguous run of positions.
///
/// `layer()` is the index of the block that produced this state, so the hook
/// at layer `l` sees `x_{l+1} = x_l + M_l(x_l)`. Rows are absolute positions
/// `start_position()..start_position() + seq_len()`; during cached decoding a
/// hook only sees the newly computed positions.
pub struct ResidualState {
    layer: usize,
    start_position: usize,
    hidden_dim: usize,
    data: Vec<f32>,
}

impl ResidualState {
    pub(crate) fn new(
        layer: usize,
        start_position: usize,
        hidden_dim: usize,
        data: Vec<f32>,
    ) -> Self {
        debug_assert_eq!(data.len() % hidden_dim, 0);
        Self {
            layer,
            start_position,
            hidden_dim,
            data,
        }
    }

    pub(crate) fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn start_position(&self) -> usize {
        self.start_position
    }

    pub fn seq_len(&self) -> usize {
        self.data.len() / self.hidden_dim
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.hidden_dim..(i + 1) * self.hidden_dim]
    }

    /// `x ← x + scale·v` on every row.
    pub fn add_scaled(&mut self, v: &[f32], scale: f32) {
        assert_eq!(
            v.len(),
            self.hidden_dim,
            "vector length must equal hidden_dim"
        );
        for row in self.data.chunks_exact_mut(self.hidden_dim) {
            for (x, d) in row.iter_mut().zip(v) {
                *x += scale * d;
            }
        }
    }
}

impl fmt::Debug for ResidualState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResidualState")
            .field("layer", &self.layer)
            .field("start_position", &self.start_position)
            .field("seq_len", &self.seq_len())
            .field("hidden_dim", &self.hidden_dim)
            .finish()
    }
}

type HookFn<'a> = Box<dyn FnMut(&mut ResidualState) + 'a>;

/// Ordered hooks keyed by block index. Hooks registered for the same layer
/// run in insertion order.
#[derive(Default)]
pub struct HookSet<'a> {
    hooks: Vec<(usize, HookFn<'a>)>,
}

impl<'a> HookSet<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, layer: usize, hook: impl FnMut(&mut ResidualState) + 'a) -> &mut Self {
        self.hooks.push((layer, Box::new(hook)));
        self
    }

    pub fn with(mut self, layer: usize, hook: impl FnMut(&mut ResidualState) + 'a) -> Self {
        self.add(layer, hook);
        self
    }

    /// Move all hooks of `other` after the ones already registered.
    pub fn extend(&mut self, other: HookSet<'a>) {
        self.hooks.extend(other.hooks);
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.hooks.len()
    }

    pub fn max_layer(&self) -> Option<usize> {
        self.hooks.iter().map(|(l, _)| *l).max()
    }

    pub(crate) fn run(&mut self, state: &mut ResidualState) {
        let layer = state.layer();
        for (l, hook) in &mut self.hooks {
            if *l == layer {
                hook(state);
            }
        }
    }
}

impl fmt::Debug for HookSet<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.hooks.iter().map(|(l, _)| l))
            .finish()
    }
}
