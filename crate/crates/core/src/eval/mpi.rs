// SPDX-License-Identifier: MIT OR Apache-2.0

//! Big Five personality inventory: item files, Likert scoring and steered
//! administration.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::cleanse::{cleanse_answer, CleansingFormat};
use super::{par_map, EvalOptions};
use crate::chat::generate;
use crate::error::{Error, Result};
use crate::model::ModelHandle;
use crate::steering::SteeringPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BigFive {
    O,
    C,
    E,
    A,
    N,
}

impl BigFive {
    pub const ALL: [BigFive; 5] = [Self::O, Self::C, Self::E, Self::A, Self::N];

    pub fn name(self) -> &'static str {
        match self {
            Self::O => "Openness",
            Self::C => "Conscientiousness",
            Self::E => "Extraversion",
            Self::A => "Agreeableness",
            Self::N => "Neuroticism",
        }
    }

    pub fn letter(self) -> char {
        match self {
            Self::O => 'O',
            Self::C => 'C',
            Self::E => 'E',
            Self::A => 'A',
            Self::N => 'N',
        }
    }

    /// Human reference mean for this trait.
    pub fn human_baseline(self) -> f64 {
        match self {
            Self::O => 3.44,
            Self::C => 3.60,
            Self::E => 3.41,
            Self::A => 3.66,
            Self::N => 2.80,
        }
    }
}

impl fmt::Display for BigFive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

impl FromStr for BigFive {
    type Err = Error;

    /// Accepts the single letter or the full trait name, any case.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Self::ALL
            .into_iter()
            .find(|t| {
                s.eq_ignore_ascii_case(&t.letter().to_string()) || s.eq_ignore_ascii_case(t.name())
            })
            .ok_or_else(|| Error::UnknownTrait(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Key {
    Plus,
    Minus,
}

impl Key {
    pub fn flipped(self) -> Self {
        match self {
            Self::Plus => Self::Minus,
            Self::Minus => Self::Plus,
        }
    }
}

impl FromStr for Key {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "plus" | "+" => Ok(Self::Plus),
            "minus" | "-" => Ok(Self::Minus),
            other => Err(Error::Other(format!(
                "unknown key `{other}`, expected plus or minus"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MpiItem {
    pub text: String,
    #[serde(rename = "trait")]
    pub trait_dim: BigFive,
    pub key: Key,
}

impl MpiItem {
    pub fn new(text: impl Into<String>, trait_dim: BigFive, key: Key) -> Self {
        Self {
            text: text.into(),
            trait_dim,
            key,
        }
    }
}

/// Five-point Likert response, options `A` through `E` in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MpiAnswer {
    VeryAccurate,
    ModeratelyAccurate,
    Neither,
    ModeratelyInaccurate,
    VeryInaccurate,
}

impl MpiAnswer {
    pub const ALL: [MpiAnswer; 5] = [
        Self::VeryAccurate,
        Self::ModeratelyAccurate,
        Self::Neither,
        Self::ModeratelyInaccurate,
        Self::VeryInaccurate,
    ];

    pub fn letter(self) -> char {
        (b'A' + self as u8) as char
    }

    pub fn from_letter(letter: &str) -> Option<Self> {
        match letter {
            "A" => Some(Self::VeryAccurate),
            "B" => Some(Self::ModeratelyAccurate),
            "C" => Some(Self::Neither),
            "D" => Some(Self::ModeratelyInaccurate),
            "E" => Some(Self::VeryInaccurate),
            _ => None,
        }
    }

    /// Item score in 1..=5.
    pub fn score(self, key: Key) -> u32 {
        let rank = self as u32;
        match key {
            Key::Plus => 5 - rank,
            Key::Minus => 1 + rank,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraitScore {
    /// Number of scored items.
    pub count: u32,
    /// Sum of item scores.
    pub total: u32,
    pub score: f64,
    pub human: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpiScorecard {
    pub traits: BTreeMap<BigFive, TraitScore>,
    pub items: usize,
    pub unparsed: usize,
    pub parse_failure_rate: f64,
}

impl MpiScorecard {
    pub fn score(&self, t: BigFive) -> Option<f64> {
        self.traits.get(&t).map(|s| s.score)
    }

    pub fn delta(&self, t: BigFive) -> Option<f64> {
        self.traits.get(&t).map(|s| s.delta)
    }
}

/// Per-trait mean item scores and distance to the human baseline.
pub fn score_mpi(items: &[MpiItem], answers: &[MpiAnswer]) -> Result<MpiScorecard> {
    let answers: Vec<_> = answers.iter().copied().map(Some).collect();
    score_mpi_partial(items, &answers)
}

/// Like [`score_mpi`], skipping unparsed (`None`) answers and reporting their
/// share as `parse_failure_rate`.
pub fn score_mpi_partial(items: &[MpiItem], answers: &[Option<MpiAnswer>]) -> Result<MpiScorecard> {
    if items.len() != answers.len() {
        return Err(Error::LengthMismatch {
            items: items.len(),
            answers: answers.len(),
        });
    }
    let mut sums: BTreeMap<BigFive, (u32, u32)> = BTreeMap::new();
    for (item, answer) in items.iter().zip(answers) {
        if let Some(a) = answer {
            let e = sums.entry(item.trait_dim).or_default();
            e.0 += 1;
            e.1 += a.score(item.key);
        }
    }
    let unparsed = answers.iter().filter(|a| a.is_none()).count();
    let traits = sums
        .into_iter()
        .map(|(t, (count, total))| {
            let score = f64::from(total) / f64::from(count);
            let human = t.human_baseline();
            (
                t,
                TraitScore {
                    count,
                    total,
                    score,
                    human,
                    delta: (score - human).abs(),
                },
            )
        })
        .collect();
    Ok(MpiScorecard {
        traits,
        items: items.len(),
        unparsed,
        parse_failure_rate: if items.is_empty() {
            0.0
        } else {
            unparsed as f64 / items.len() as f64
        },
    })
}

/// Built-in prompt with an `{item}` slot and options `(A)` to `(E)`.
pub fn default_mpi_template() -> &'static str {
    include_str!("../../templates/mpi/v1.txt").trim_end()
}

/// Greedy responses plus the scorecard built from them.
#[derive(Debug, Clone, PartialEq)]
pub struct MpiRun {
    pub scorecard: MpiScorecard,
    pub responses: Vec<String>,
    pub answers: Vec<Option<MpiAnswer>>,
}

/// Administer every item through `template`, reading the first option letter
/// from each continuation. Unparseable responses are excluded from the means;
/// the run fails only if none parse.
pub fn run_mpi(
    handle: &ModelHandle,
    items: &[MpiItem],
    template: &str,
    plan: &SteeringPlan,
    options: &EvalOptions,
) -> Result<MpiRun> {
    if !template.contains("{item}") {
        return Err(Error::Config("MPI template has no {item} slot".into()));
    }
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let responses = par_map(items, options.concurrency, |item| {
        generate(
            handle,
            plan,
            &template.replace("{item}", &item.text),
            options.max_new,
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let answers: Vec<_> = responses
        .iter()
        .map(|r| {
            cleanse_answer(r, CleansingFormat::MultipleChoice)
                .and_then(|l| MpiAnswer::from_letter(&l))
        })
        .collect();
    if answers.iter().all(Option::is_none) {
        return Err(Error::AllUnparseable);
    }
    Ok(MpiRun {
        scorecard: score_mpi_partial(items, &answers)?,
        responses,
        answers,
    })
}

#[derive(Debug, Deserialize)]
struct MpiRow {
    text: String,
    #[serde(rename = "trait")]
    trait_dim: String,
    key: String,
}

/// Parse a CSV item file with header `text,trait,key`.
pub fn parse_mpi_csv(text: &str) -> Result<Vec<MpiItem>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut items = Vec::new();
    for row in reader.deserialize::<MpiRow>() {
        let row = row.map_err(|e| Error::Schema {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = items.len() + 2;
        let schema = |e: Error| Error::Schema {
            line,
            message: e.to_string(),
        };
        items.push(MpiItem {
            text: row.text,
            trait_dim: row.trait_dim.parse().map_err(schema)?,
            key: row.key.parse().map_err(schema)?,
        });
    }
    Ok(items)
}

pub fn load_mpi_items(path: &Path) -> Result<Vec<MpiItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_mpi_csv(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keyed_scores() {
        let s: Vec<_> = MpiAnswer::ALL.iter().map(|a| a.score(Key::Plus)).collect();
        assert_eq!(s, [5, 4, 3, 2, 1]);
        let s: Vec<_> = MpiAnswer::ALL.iter().map(|a| a.score(Key::Minus)).collect();
        assert_eq!(s, [1, 2, 3, 4, 5]);
        assert_eq!(MpiAnswer::Neither.letter(), 'C');
    }

    #[test]
    fn plus_and_minus_average_to_three() {
        let items = [
            MpiItem::new("x", BigFive::C, Key::Plus),
            MpiItem::new("y", BigFive::C, Key::Minus),
        ];
        let card = score_mpi(&items, &[MpiAnswer::VeryAccurate; 2]).unwrap();
        assert_eq!(card.score(BigFive::C), Some(3.0));
        assert!(card.score(BigFive::O).is_none());
    }

    #[test]
    fn length_mismatch() {
        let items = [MpiItem::new("x", BigFive::O, Key::Plus)];
        assert!(matches!(
            score_mpi(&items, &[]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn csv_items() {
        let items =
            parse_mpi_csv("text,trait,key\n\"worry, a lot\",N,plus\nlike art,openness,minus\n")
                .unwrap();
        assert_eq!(items[0].text, "worry, a lot");
        assert_eq!(items[1].trait_dim, BigFive::O);
        assert_eq!(items[1].key, Key::Minus);
        let err = parse_mpi_csv("text,trait,key\na,O,plus\nb,Q,plus\n").unwrap_err();
        assert!(matches!(err, Error::Schema { line: 3, .. }), "{err}");
    }

    #[test]
    fn template_has_slot_and_options() {
        let t = default_mpi_template();
        assert!(t.contains("{item}"));
        for l in ["(A)", "(B)", "(C)", "(D)", "(E)"] {
            assert!(t.contains(l));
        }
    }
}
