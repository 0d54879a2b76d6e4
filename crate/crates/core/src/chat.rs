// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain `User:` / `Assistant:` transcripts and steered text generation.
//!
//! Format version 1 renders each turn as `"<Role>: <trimmed text>\n"` and ends
//! the prompt with `"Assistant:"`, so the model continues the assistant turn.
//! Used by the sycophancy protocol, `generate --chat` and the HTTP service.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{DecodeStep, ModelHandle, StreamDecoder};
use crate::steering::{make_hooks, SteeringPlan};

pub const TRANSCRIPT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    fn label(self) -> &'static str {
        match self {
            Role::User => "User",
            Role::Assistant => "Assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
        }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            text: text.into(),
        }
    }
}

/// Render `turns` as a prompt awaiting the next assistant turn.
pub fn render_prompt(turns: &[Turn]) -> String {
    let mut out = String::new();
    for t in turns {
        out.push_str(t.role.label());
        out.push_str(": ");
        out.push_str(t.text.trim());
        out.push('\n');
    }
    out.push_str("Assistant:");
    out
}

/// Greedy steered continuation of `prompt`, returned as text.
pub fn generate(
    handle: &ModelHandle,
    plan: &SteeringPlan,
    prompt: &str,
    max_new: usize,
) -> Result<String> {
    generate_stream(handle, plan, prompt, max_new, |_, _| DecodeStep::Continue)
}

/// Like [`generate`], handing each decoded piece to `on_piece` as it is
/// produced. Pieces are indexed from 0; a token that ends mid-character yields
/// an empty piece, and any bytes left at the end arrive as one extra piece.
/// Concatenated pieces equal the returned string.
pub fn generate_stream(
    handle: &ModelHandle,
    plan: &SteeringPlan,
    prompt: &str,
    max_new: usize,
    mut on_piece: impl FnMut(usize, &str) -> DecodeStep,
) -> Result<String> {
    let tokens = handle.encode(prompt)?;
    let mut hooks = make_hooks(plan, handle)?;
    let mut decoder = StreamDecoder::new();
    let mut text = String::new();
    let mut index = 0;
    handle.greedy_decode_with(&tokens, max_new, &mut hooks, |id| {
        let piece = decoder.push(handle.tokenizer(), id);
        text.push_str(&piece);
        let step = on_piece(index, &piece);
        index += 1;
        step
    })?;
    let rest = decoder.finish();
    if !rest.is_empty() {
        text.push_str(&rest);
        on_piece(index, &rest);
    }
    Ok(text)
}
