// SPDX-License-Identifier: MIT OR Apache-2.0

//! The forward pass: pre-norm blocks `x + Attn(Norm(x))`, `x + Mlp(Norm(x))`,
//! with hooks after each full block.

use super::config::PositionalScheme;
use super::hooks::{HookSet, ResidualState};
use super::weights::Tensor;
use super::ModelHandle;
use crate::error::{Error, Result};

/// Dot products longer than this accumulate in f64.
const F64_ACCUM_THRESHOLD: usize = 4096;
const ROPE_THETA: f64 = 10_000.0;

/// Per-layer keys and values of every position processed so far.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            keys: vec![Vec::new(); n_layers],
            values: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    /// Number of cached positions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Which rows of logits to materialise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogitRows {
    All,
    Last,
}

/// Logits for a run of positions, `[rows × vocab]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    vocab: usize,
    data: Vec<f32>,
}

impl LogitRecord {
    pub fn seq_len(&self) -> usize {
        self.data.len() / self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.vocab..(i + 1) * self.vocab]
    }

    pub fn last_row(&self) -> &[f32] {
        self.row(self.seq_len() - 1)
    }

    pub fn log_softmax_row(&self, i: usize) -> Vec<f64> {
        log_softmax(self.row(i))
    }
}

/// Log-softmax computed in f64.
pub fn log_softmax(logits: &[f32]) -> Vec<f64> {
    let max = logits
        .iter()
        .fold(f64::NEG_INFINITY, |m, x| m.max(f64::from(*x)));
    let sum: f64 = logits.iter().map(|x| (f64::from(*x) - max).exp()).sum();
    let lse = max + sum.ln();
    logits.iter().map(|x| f64::from(*x) - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f32]) -> u32 {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

/// `x · W` for `rows` row vectors, with `W` stored `[in, out]`.
fn matmul(x: &[f32], w: &Tensor) -> Vec<f32> {
    let (inp, out) = (w.dims[0], w.dims[1]);
    let rows = x.len() / inp;
    let mut y = vec![0.0f32; rows * out];
    for r in 0..rows {
        let xr = &x[r * inp..(r + 1) * inp];
        let yr = &mut y[r * out..(r + 1) * out];
        if inp > F64_ACCUM_THRESHOLD {
            let mut acc = vec![0.0f64; out];
            for (i, xi) in xr.iter().enumerate() {
                let xi = f64::from(*xi);
                for (a, wij) in acc.iter_mut().zip(w.row(i)) {
                    *a += xi * f64::from(*wij);
                }
            }
            for (yj, a) in yr.iter_mut().zip(acc) {
                *yj = a as f32;
            }
        } else {
            for (i, xi) in xr.iter().enumerate() {
                for (yj, wij) in yr.iter_mut().zip(w.row(i)) {
                    *yj += xi * wij;
                }
            }
        }
    }
    y
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    if a.len() > F64_ACCUM_THRESHOLD {
        a.iter()
            .zip(b)
            .map(|(x, y)| f64::from(*x) * f64::from(*y))
            .sum::<f64>() as f32
    } else {
        a.iter().zip(b).fold(0.0f32, |acc, (x, y)| acc + x * y)
    }
}

fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let h = gain.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(h) {
        let ms = if h > F64_ACCUM_THRESHOLD {
            (row.iter()
                .map(|v| f64::from(*v) * f64::from(*v))
                .sum::<f64>()
                / h as f64) as f32
        } else {
            row.iter().fold(0.0f32, |acc, v| acc + v * v) / h as f32
        };
        let inv = 1.0 / (ms + eps).sqrt();
        out.extend(row.iter().zip(gain).map(|(v, g)| v * inv * g));
    }
    out
}

fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

/// Rotate consecutive pairs `(2i, 2i+1)` of every head by `pos·θ^{-2i/d}`.
fn apply_rotary(x: &mut [f32], start: usize, hidden: usize, head_dim: usize) {
    for (r, row) in x.chunks_exact_mut(hidden).enumerate() {
        let pos = (start + r) as f64;
        for head in row.chunks_exact_mut(head_dim) {
            for i in 0..head_dim / 2 {
                let freq = ROPE_THETA.powf(-2.0 * i as f64 / head_dim as f64);
                let (sin, cos) = (pos * freq).sin_cos();
                let (sin, cos) = (sin as f32, cos as f32);
                let (a, b) = (head[2 * i], head[2 * i + 1]);
                head[2 * i] = a * cos - b * sin;
                head[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
}

fn all_finite(x: &[f32]) -> bool {
    x.iter().all(|v| v.is_finite())
}

impl ModelHandle {
    fn check_tokens(&self, tokens: &[u32], already: usize) -> Result<()> {
        let c = &self.config;
        if tokens.is_empty() {
            return Err(Error::EmptySequence);
        }
        let len = already + tokens.len();
        if len > c.max_seq_len {
            return Err(Error::SequenceTooLong {
                len,
                max: c.max_seq_len,
            });
        }
        if let Some(id) = tokens.iter().find(|t| **t as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: *id,
                vocab: c.vocab_size,
            });
        }
        Ok(())
    }

    pub(crate) fn check_hooks(&self, hooks: &HookSet<'_>) -> Result<()> {
        match hooks.max_layer() {
            Some(layer) if layer >= self.config.n_layers => Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            }),
            _ => Ok(()),
        }
    }

    /// Token (and, for learned positions, position) embeddings: `x_0`.
    pub fn embed(&self, tokens: &[u32], start: usize) -> Vec<f32> {
        let emb = self.weights.tensor("tok_embeddings");
        let mut x = Vec::with_capacity(tokens.len() * self.config.hidden_dim);
        for t in tokens {
            x.extend_from_slice(emb.row(*t as usize));
        }
        if self.config.positional_scheme == PositionalScheme::LearnedAbsolute {
            let pos = self.weights.tensor("pos_embeddings");
            for (r, row) in x.chunks_exact_mut(self.config.hidden_dim).enumerate() {
                for (v, p) in row.iter_mut().zip(pos.row(start + r)) {
                    *v += p;
                }
            }
        }
        x
    }

    /// One block, updating `x` in place: `x ← x + M_l(x)`.
    fn block(&self, layer: usize, x: &mut [f32], start: usize, cache: &mut KvCache) {
        let c = &self.config;
        let h = c.hidden_dim;
        let hd = c.head_dim();
        let rows = x.len() / h;
        let w = |name: &str| self.weights.tensor(&format!("layers.{layer}.{name}"));

        let normed = rms_norm(x, &w("attn_norm").data, c.norm_epsilon);
        let mut q = matmul(&normed, w("wq"));
        let mut k = matmul(&normed, w("wk"));
        let v = matmul(&normed, w("wv"));
        if c.positional_scheme == PositionalScheme::Rotary {
            apply_rotary(&mut q, start, h, hd);
            apply_rotary(&mut k, start, h, hd);
        }
        let keys = &mut cache.keys[layer];
        let values = &mut cache.values[layer];
        keys.truncate(start * h);
        values.truncate(start * h);
        keys.extend_from_slice(&k);
        values.extend_from_slice(&v);

        let scale = 1.0 / (hd as f32).sqrt();
        let mut attn = vec![0.0f32; rows * h];
        let mut scores = Vec::with_capacity(start + rows);
        for r in 0..rows {
            let pos = start + r;
            for head in 0..c.n_heads {
                let off = head * hd;
                let qh = &q[r * h + off..r * h + off + hd];
                scores.clear();
                for j in 0..=pos {
                    scores.push(dot(qh, &keys[j * h + off..j * h + off + hd]) * scale);
                }
                let max = scores.iter().fold(f32::NEG_INFINITY, |m, s| m.max(*s));
                let mut denom = 0.0f32;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    denom += *s;
                }
                let out = &mut attn[r * h + off..r * h + off + hd];
                for (j, s) in scores.iter().enumerate() {
                    let p = s / denom;
                    for (o, vv) in out.iter_mut().zip(&values[j * h + off..j * h + off + hd]) {
                        *o += p * vv;
                    }
                }
            }
        }
        let attn_out = matmul(&attn, w("wo"));
        for (xi, a) in x.iter_mut().zip(&attn_out) {
            *xi += a;
        }

        let normed = rms_norm(x, &w("ffn_norm").data, c.norm_epsilon);
        let gate = matmul(&normed, w("w_gate"));
        let up = matmul(&normed, w("w_up"));
        let act: Vec<f32> = gate.iter().zip(&up).map(|(g, u)| silu(*g) * u).collect();
        let mlp_out = matmul(&act, w("w_down"));
        for (xi, m) in x.iter_mut().zip(&mlp_out) {
            *xi += m;
        }
    }

    /// The block function `M_l` alone, evaluated on a full sequence starting at
    /// position 0. Returns `M_l(x)`, not `x + M_l(x)`.
    pub fn block_output(&self, layer: usize, x: &[f32]) -> Result<Vec<f32>> {
        if layer >= self.config.n_layers {
            return Err(Error::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let mut y = x.to_vec();
        let mut cache = KvCache::new(self.config.n_layers);
        self.block(layer, &mut y, 0, &mut cache);
        Ok(y.iter().zip(x).map(|(a, b)| a - b).collect())
    }

    /// Process `tokens` at positions `cache.len()..`, extending `cache`.
    pub fn forward_cached(
        &self,
        tokens: &[u32],
        cache: &mut KvCache,
        hooks: &mut HookSet<'_>,
        rows: LogitRows,
    ) -> Result<LogitRecord> {
        let start = cache.len;
        self.check_tokens(tokens, start)?;
        self.check_hooks(hooks)?;
        let c = &self.config;
        let mut x = self.embed(tokens, start);
        for layer in 0..c.n_layers {
            self.block(layer, &mut x, start, cache);
            let mut state = ResidualState::new(layer, start, c.hidden_dim, x);
            hooks.run(&mut state);
            x = state.into_data();
            if !all_finite(&x) {
                // Leave the cache as it was before this call.
                for l in 0..c.n_layers {
                    cache.keys[l].truncate(start * c.hidden_dim);
                    cache.values[l].truncate(start * c.hidden_dim);
                }
                return Err(Error::NonFinite { layer });
            }
        }
        cache.len = start + tokens.len();

        let x = match rows {
            LogitRows::All => x,
            LogitRows::Last => x[x.len() - c.hidden_dim..].to_vec(),
        };
        let normed = rms_norm(&x, &self.weights.tensor("norm").data, c.norm_epsilon);
        let data = matmul(&normed, self.weights.tensor("output"));
        if !all_finite(&data) {
            return Err(Error::NonFinite { layer: c.n_layers });
        }
        Ok(LogitRecord {
            vocab: c.vocab_size,
            data,
        })
    }

    /// Full forward pass over `tokens`, returning logits for every position.
    pub fn forward(&self, tokens: &[u32], hooks: &mut HookSet<'_>) -> Result<LogitRecord> {
        let mut cache = KvCache::new(self.config.n_layers);
        self.forward_cached(tokens, &mut cache, hooks, LogitRows::All)
    }
}
