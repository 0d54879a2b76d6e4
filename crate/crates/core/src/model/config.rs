// SPDX-License-Identifier: MIT OR Apache-2.0

//! Model hyperparameters and the `key=value` config file format.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token positions enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionalScheme {
    /// Rotary embeddings applied to queries and keys.
    Rotary,
    /// A learned `[max_seq_len × H]` table added to the token embeddings.
    LearnedAbsolute,
}

impl fmt::Display for PositionalScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rotary => f.write_str("rotary"),
            Self::LearnedAbsolute => f.write_str("learned-absolute"),
        }
    }
}

impl FromStr for PositionalScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rotary" => Ok(Self::Rotary),
            "learned-absolute" => Ok(Self::LearnedAbsolute),
            other => Err(Error::Config(format!(
                "unknown positional_scheme `{other}`"
            ))),
        }
    }
}

/// Shape of a pre-norm decoder-only transformer.
///
/// The MLP width is not a free parameter: every block uses a gated MLP of
/// width `4 * hidden_dim`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_epsilon: f32,
    pub positional_scheme: PositionalScheme,
}

const KEYS: [&str; 7] = [
    "n_layers",
    "hidden_dim",
    "n_heads",
    "vocab_size",
    "max_seq_len",
    "norm_epsilon",
    "positional_scheme",
];

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("hidden_dim", self.hidden_dim),
            ("n_heads", self.n_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Dimension(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Dimension(format!(
                "hidden_dim {} is not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.positional_scheme == PositionalScheme::Rotary && !self.head_dim().is_multiple_of(2)
        {
            return Err(Error::Dimension(format!(
                "rotary embeddings need an even head dimension, got {}",
                self.head_dim()
            )));
        }
        if !(self.norm_epsilon.is_finite() && self.norm_epsilon > 0.0) {
            return Err(Error::Dimension(format!(
                "norm_epsilon must be a positive finite number, got {}",
                self.norm_epsilon
            )));
        }
        Ok(())
    }

    /// Canonical text form; this exact string participates in the model hash.
    pub fn to_config_string(&self) -> String {
        format!(
            "n_layers={}\nhidden_dim={}\nn_heads={}\nvocab_size={}\nmax_seq_len={}\nnorm_epsilon={:e}\npositional_scheme={}\n",
            self.n_layers,
            self.hidden_dim,
            self.n_heads,
            self.vocab_size,
            self.max_seq_len,
            self.norm_epsilon,
            self.positional_scheme
        )
    }

    /// Parse the `key=value` format. Blank lines and `#` comments are ignored;
    /// every field must appear exactly once and unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: [Option<&str>; 7] = [None; 7];
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let key = key.trim();
            let slot = KEYS.iter().position(|k| *k == key).ok_or_else(|| {
                Error::Config(format!("line {}: unknown key `{key}`", lineno + 1))
            })?;
            if values[slot].replace(value.trim()).is_some() {
                return Err(Error::Config(format!(
                    "line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
        }
        let get =
            |i: usize| values[i].ok_or_else(|| Error::Config(format!("missing key `{}`", KEYS[i])));
        let int = |i: usize| -> Result<usize> {
            get(i)?
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", KEYS[i])))
        };
        let config = Self {
            n_layers: int(0)?,
            hidden_dim: int(1)?,
            n_heads: int(2)?,
            vocab_size: int(3)?,
            max_seq_len: int(4)?,
            norm_epsilon: get(5)?
                .parse()
                .map_err(|e| Error::Config(format!("norm_epsilon: {e}")))?,
            positional_scheme: get(6)?.parse()?,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_config_string()).map_err(|e| Error::io(path, e))
    }
}
