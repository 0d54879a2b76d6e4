// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation steering for small decoder-only transformers.
//!
//! A [`steering::ControlVector`] is the mean difference of post-block
//! residuals between contrastive prompt pairs. A [`steering::SteeringPlan`]
//! adds scaled vectors back into the residual stream while decoding.
//!
//! | Module | Role |
//! |---|---|
//! | [`model`] | config, CLMW weights, byte tokenizer, forward pass with layer hooks, greedy decoding |
//! | [`steering`] | prompt pairs, extraction, plans, composition, γ sweeps |
//! | [`hub`] | checksummed single-file store of control vectors |
//! | [`aca`] | builds prompt-pair datasets from an LLM backend |
//! | [`eval`] | personality inventory, perplexity, reasoning, sycophancy, answer cleansing |
//! | [`chat`] | transcript rendering and streamed generation |
//! | [`service`] | HTTP + SSE API for an interactive control panel |
//! | [`cli`] | the `controllm` command line |
//!
//! Runnable examples live in `examples/`: `generate`, `extract`, `steer`,
//! `hub`, `aca`, `eval`, `sweep` and `service`.

pub mod aca;
pub mod chat;
pub mod cli;
pub mod error;
pub mod eval;
pub mod hub;
pub mod model;
pub mod service;
pub mod steering;

pub use error::{Error, Result};
