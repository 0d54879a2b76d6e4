// SPDX-License-Identifier: MIT OR Apache-2.0

//! Automatic construction of contrastive trait datasets.
//!
//! Three steps, each a prompt to an [`LlmBackend`]:
//!
//! 1. elicit seed words and seed behaviors for the trait;
//! 2. for each of `P` behaviors, ask for a yes/no question and turn it into a
//!    pair `"<question> Yes"` / `"<question> No"`;
//! 3. extract a control vector from the pairs and store it in the hub.
//!
//! Prompt wording lives in versioned template files under `templates/aca/`.

mod backend;

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

pub use backend::{
    extract_text, LlmBackend, LocalBackend, RemoteBackend, RemoteShape, ScriptedBackend,
    API_KEY_ENV,
};

use crate::error::{Error, Result};
use crate::hub::{EntryId, Hub};
use crate::model::ModelHandle;
use crate::steering::{extract_control_vector, PromptPair, PromptPairSet, ReadPosition};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AcaTemplates {
    pub version: String,
    pub words: String,
    pub behaviors: String,
    pub question: String,
}

impl Default for AcaTemplates {
    fn default() -> Self {
        Self {
            version: "v1".into(),
            words: include_str!("../../templates/aca/v1/words.txt").into(),
            behaviors: include_str!("../../templates/aca/v1/behaviors.txt").into(),
            question: include_str!("../../templates/aca/v1/question.txt").into(),
        }
    }
}

impl AcaTemplates {
    /// Read `words.txt`, `behaviors.txt` and `question.txt` from `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let read = |f: &str| {
            let p = dir.join(f);
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
        };
        Ok(Self {
            version: dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            words: read("words.txt")?,
            behaviors: read("behaviors.txt")?,
            question: read("question.txt")?,
        })
    }
}

fn fill(template: &str, slots: &[(&str, &str)]) -> String {
    slots.iter().fold(template.to_string(), |t, (k, v)| {
        t.replace(&format!("{{{k}}}"), v)
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedContext {
    pub trait_name: String,
    pub seed_words: Vec<String>,
    pub seed_behaviors: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedQuestion {
    pub text: String,
    pub polarity: Polarity,
}

impl GeneratedQuestion {
    pub fn expected_answer(&self) -> &'static str {
        match self.polarity {
            Polarity::Positive => "Yes",
            Polarity::Negative => "No",
        }
    }

    /// Question followed by its expected answer.
    pub fn prompt_text(&self) -> String {
        format!("{} {}", self.text, self.expected_answer())
    }
}

#[derive(Debug, Clone)]
pub struct AcaOptions {
    pub pair_count: usize,
    /// Upper bound on concurrent backend requests during pair generation.
    pub concurrency: usize,
    pub max_attempts: usize,
    pub max_tokens: usize,
    pub temperature: f32,
    pub read_position: ReadPosition,
    pub replace: bool,
    pub templates: AcaTemplates,
}

impl Default for AcaOptions {
    fn default() -> Self {
        Self {
            pair_count: 16,
            concurrency: 4,
            max_attempts: 3,
            max_tokens: 256,
            temperature: 0.7,
            read_position: ReadPosition::LastToken,
            replace: false,
            templates: AcaTemplates::default(),
        }
    }
}

/// Split a list-style response into items: newline or comma separated, with
/// bullets and numbering removed, blanks dropped and duplicates removed
/// (first occurrence wins).
pub fn parse_items(response: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    response
        .split(['\n', ','])
        .map(strip_bullet)
        .filter(|s| !s.is_empty())
        .filter(|s| seen.insert(s.to_string()))
        .map(str::to_string)
        .collect()
}

fn strip_bullet(s: &str) -> &str {
    let s = s.trim();
    let s = s.trim_start_matches(['-', '*', '•']).trim_start();
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    let s = if digits > 0 && s[digits..].starts_with(['.', ')']) {
        s[digits + 1..].trim_start()
    } else {
        s
    };
    s.trim()
}

/// The sentence ending at the first `?` of the first line that has one.
pub fn parse_question(response: &str) -> Option<String> {
    response.lines().find_map(|line| {
        let line = strip_bullet(line);
        let end = line.find('?')?;
        let start = line[..end].rfind(['.', '!', ':']).map_or(0, |i| i + 1);
        let q = line[start..=end].trim();
        (q.len() > 1).then(|| q.to_string())
    })
}

/// Step 1: ask for words and behaviors describing `trait_name`.
pub fn elicit_seed(
    trait_name: &str,
    backend: &dyn LlmBackend,
    options: &AcaOptions,
) -> Result<SeedContext> {
    if trait_name.trim().is_empty() {
        return Err(Error::EmptySeed(trait_name.to_string()));
    }
    let t = &options.templates;
    let words = backend.generate(
        &fill(&t.words, &[("trait", trait_name)]),
        options.max_tokens,
        options.temperature,
    )?;
    let behaviors = backend.generate(
        &fill(&t.behaviors, &[("trait", trait_name)]),
        options.max_tokens,
        options.temperature,
    )?;
    let seed = SeedContext {
        trait_name: trait_name.to_string(),
        seed_words: parse_items(&words),
        seed_behaviors: parse_items(&behaviors),
    };
    if seed.seed_words.is_empty() && seed.seed_behaviors.is_empty() {
        return Err(Error::EmptySeed(trait_name.to_string()));
    }
    Ok(seed)
}

fn generate_question(
    index: usize,
    seed: &SeedContext,
    backend: &dyn LlmBackend,
    options: &AcaOptions,
) -> Result<String> {
    let source = if seed.seed_behaviors.is_empty() {
        &seed.seed_words
    } else {
        &seed.seed_behaviors
    };
    let behavior = &source[index % source.len()];
    let prompt = fill(
        &options.templates.question,
        &[
            ("trait", &seed.trait_name),
            ("words", &seed.seed_words.join(", ")),
            ("behaviors", &seed.seed_behaviors.join("; ")),
            ("behavior", behavior),
        ],
    );
    for _ in 0..options.max_attempts {
        let response = backend.generate(&prompt, options.max_tokens, options.temperature)?;
        if let Some(q) = parse_question(&response) {
            return Ok(q);
        }
    }
    Err(Error::RetriesExhausted {
        index,
        attempts: options.max_attempts,
    })
}

/// Step 2: `pair_count` questions, each becoming a Yes/No pair.
///
/// Requests fan out over at most `options.concurrency` threads; pairs come
/// back in index order regardless of completion order.
pub fn generate_pairs(
    seed: &SeedContext,
    backend: &dyn LlmBackend,
    options: &AcaOptions,
) -> Result<PromptPairSet> {
    if options.pair_count == 0 {
        return Err(Error::Other("pair count must be at least 1".into()));
    }
    if seed.seed_words.is_empty() && seed.seed_behaviors.is_empty() {
        return Err(Error::EmptySeed(seed.trait_name.clone()));
    }
    let mut questions: Vec<Option<Result<String>>> =
        (0..options.pair_count).map(|_| None).collect();
    let workers = options.concurrency.max(1);
    for chunk_start in (0..options.pair_count).step_by(workers) {
        let end = (chunk_start + workers).min(options.pair_count);
        std::thread::scope(|s| {
            let handles: Vec<_> = (chunk_start..end)
                .map(|i| {
                    (
                        i,
                        s.spawn(move || generate_question(i, seed, backend, options)),
                    )
                })
                .collect();
            for (i, h) in handles {
                questions[i] = Some(h.join().unwrap_or_else(|_| {
                    Err(Error::Backend(format!("worker for item {i} panicked")))
                }));
            }
        });
    }
    let pairs = questions
        .into_iter()
        .map(|q| {
            let text = q.expect("every index filled")?;
            let pos = GeneratedQuestion {
                text: text.clone(),
                polarity: Polarity::Positive,
            };
            let neg = GeneratedQuestion {
                text,
                polarity: Polarity::Negative,
            };
            PromptPair::new(
                seed.trait_name.clone(),
                pos.prompt_text(),
                neg.prompt_text(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    PromptPairSet::new(seed.trait_name.clone(), pairs)
}

/// Result of a full pipeline run.
#[derive(Debug, Clone)]
pub struct AcaOutcome {
    pub entry: EntryId,
    pub seed: SeedContext,
    pub pairs: PromptPairSet,
}

/// Steps 1–3: elicit, generate, extract, save. Errors carry the stage name.
pub fn build_and_save(
    trait_name: &str,
    backend: &dyn LlmBackend,
    handle: &ModelHandle,
    layers: &BTreeSet<usize>,
    hub: &Hub,
    options: &AcaOptions,
) -> Result<AcaOutcome> {
    if layers.is_empty() {
        return Err(Error::NoLayers);
    }
    let seed = elicit_seed(trait_name, backend, options).map_err(|e| e.at_stage("elicit"))?;
    let pairs = generate_pairs(&seed, backend, options).map_err(|e| e.at_stage("generate"))?;
    let vector = extract_control_vector(handle, &pairs, layers, options.read_position)
        .map_err(|e| e.at_stage("extract"))?;
    let entry = hub
        .save(&vector, options.replace)
        .map_err(|e| e.at_stage("save"))?;
    Ok(AcaOutcome { entry, seed, pairs })
}
