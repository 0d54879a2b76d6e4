// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy decoding and teacher-forced log-probabilities.

use super::forward::{argmax, log_softmax, KvCache, LogitRows};
use super::hooks::HookSet;
use super::{ModelHandle, TokenSequence};
use crate::error::{Error, Result};

/// Whether the decoder should keep going after a token was emitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeStep {
    Continue,
    Stop,
}

impl ModelHandle {
    /// Greedy (temperature 0) continuation of `prompt`, returning prompt plus
    /// new tokens. Stops after `max_new` tokens, at the end-of-sequence id
    /// (which is not appended), or when the context window is full.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        max_new: usize,
        hooks: &mut HookSet<'_>,
    ) -> Result<TokenSequence> {
        let mut out = prompt.to_vec();
        self.greedy_decode_with(prompt, max_new, hooks, |t| {
            out.push(t);
            DecodeStep::Continue
        })?;
        Ok(out)
    }

    /// Greedy decoding with a KV cache, handing each new token to `on_token`.
    pub fn greedy_decode_with(
        &self,
        prompt: &[u32],
        max_new: usize,
        hooks: &mut HookSet<'_>,
        mut on_token: impl FnMut(u32) -> DecodeStep,
    ) -> Result<usize> {
        if prompt.is_empty() {
            return Err(Error::EmptySequence);
        }
        self.check_hooks(hooks)?;
        if max_new == 0 {
            return Ok(0);
        }
        let eos = self.tokenizer.eos();
        let mut cache = KvCache::new(self.config.n_layers);
        let mut logits = self.forward_cached(prompt, &mut cache, hooks, LogitRows::Last)?;
        let mut produced = 0;
        loop {
            let next = argmax(logits.last_row());
            if Some(next) == eos {
                break;
            }
            produced += 1;
            if on_token(next) == DecodeStep::Stop
                || produced == max_new
                || prompt.len() + produced >= self.config.max_seq_len
            {
                break;
            }
            logits = self.forward_cached(&[next], &mut cache, hooks, LogitRows::Last)?;
        }
        Ok(produced)
    }

    /// Reference decoder that re-runs the whole sequence every step.
    ///
    /// Produces the same tokens as [`greedy_decode`](Self::greedy_decode); kept
    /// for checking the cached path.
    pub fn greedy_decode_uncached(
        &self,
        prompt: &[u32],
        max_new: usize,
        hooks: &mut HookSet<'_>,
    ) -> Result<TokenSequence> {
        if prompt.is_empty() {
            return Err(Error::EmptySequence);
        }
        self.check_hooks(hooks)?;
        let eos = self.tokenizer.eos();
        let mut out = prompt.to_vec();
        for _ in 0..max_new {
            let logits = self.forward(&out, hooks)?;
            let next = argmax(logits.last_row());
            if Some(next) == eos {
                break;
            }
            out.push(next);
            if out.len() >= self.config.max_seq_len {
                break;
            }
        }
        Ok(out)
    }

    /// `log P(token_i | tokens_<i)` for `i = 1..len`, under teacher forcing.
    pub fn sequence_logprob(&self, tokens: &[u32], hooks: &mut HookSet<'_>) -> Result<Vec<f64>> {
        if tokens.len() < 2 {
            return Err(Error::TooFewTokens {
                needed: 2,
                got: tokens.len(),
            });
        }
        let logits = self.forward(tokens, hooks)?;
        Ok((1..tokens.len())
            .map(|i| log_softmax(logits.row(i - 1))[tokens[i] as usize])
            .collect())
    }
}
