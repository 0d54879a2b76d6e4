// SPDX-License-Identifier: MIT OR Apache-2.0

//! Answer extraction from free-running generations.

use std::fmt;
use std::str::FromStr;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleansingFormat {
    Number,
    MultipleChoice,
    TrueFalse,
    YesNo,
    FreeFormat,
}

impl CleansingFormat {
    pub const ALL: [CleansingFormat; 5] = [
        Self::Number,
        Self::MultipleChoice,
        Self::TrueFalse,
        Self::YesNo,
        Self::FreeFormat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Number => "number",
            Self::MultipleChoice => "multiple_choice",
            Self::TrueFalse => "true_false",
            Self::YesNo => "yes_no",
            Self::FreeFormat => "free_format",
        }
    }
}

impl fmt::Display for CleansingFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for CleansingFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let norm = s.trim().to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|f| f.as_str() == norm)
            .ok_or_else(|| Error::Other(format!("unknown answer format `{s}`")))
    }
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+\.?\d*").unwrap());
static CHOICE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"A|B|C|D|E").unwrap());
static SEPARATORS: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""|'|\n|\.|\s|:|,"#).unwrap());
static FREE_NOISE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r#""|'|\n|\.|\s"#).unwrap());

/// Extract the answer from `raw`. `None` means nothing matched; an empty
/// `Some("")` is only possible for [`CleansingFormat::FreeFormat`].
///
/// * `Number`: commas removed, first signed decimal, one trailing `.` dropped.
/// * `MultipleChoice`: first capital `A`..`E` anywhere in the text.
/// * `TrueFalse` / `YesNo`: lowercased, punctuation and whitespace turned into
///   spaces, first `true`/`false` (or `yes`/`no`) word.
/// * `FreeFormat`: quotes, periods and whitespace deleted.
pub fn cleanse_answer(raw: &str, format: CleansingFormat) -> Option<String> {
    match format {
        CleansingFormat::Number => {
            let text = raw.replace(',', "");
            let m = NUMBER.find(&text)?.as_str();
            Some(m.strip_suffix('.').unwrap_or(m).to_string())
        }
        CleansingFormat::MultipleChoice => CHOICE.find(raw).map(|m| m.as_str().to_string()),
        CleansingFormat::TrueFalse => first_word(raw, &["true", "false"]),
        CleansingFormat::YesNo => first_word(raw, &["yes", "no"]),
        CleansingFormat::FreeFormat => Some(FREE_NOISE.replace_all(raw, "").into_owned()),
    }
}

fn first_word(raw: &str, targets: &[&str]) -> Option<String> {
    let lowered = raw.to_lowercase();
    let spaced = SEPARATORS.replace_all(&lowered, " ");
    spaced
        .split(' ')
        .find(|w| targets.iter().any(|t| t.eq_ignore_ascii_case(w)))
        .map(str::to_string)
}

/// Whether a cleansed prediction matches the gold answer, which is cleansed
/// the same way when possible.
pub fn answer_matches(extracted: Option<&str>, gold: &str, format: CleansingFormat) -> bool {
    let Some(pred) = extracted else { return false };
    let gold = cleanse_answer(gold, format).unwrap_or_else(|| gold.trim().to_string());
    match format {
        CleansingFormat::Number => match (pred.parse::<f64>(), gold.parse::<f64>()) {
            (Ok(a), Ok(b)) => a == b,
            _ => pred == gold,
        },
        _ => pred == gold,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use CleansingFormat::*;

    #[test]
    fn basics() {
        assert_eq!(
            cleanse_answer("The total is 1,234.", Number).as_deref(),
            Some("1234")
        );
        assert_eq!(
            cleanse_answer("I think (B) is correct", MultipleChoice).as_deref(),
            Some("B")
        );
        assert_eq!(cleanse_answer("Yes.\n", YesNo).as_deref(), Some("yes"));
        assert_eq!(cleanse_answer("no numbers here", Number), None);
        assert_eq!(cleanse_answer("", FreeFormat).as_deref(), Some(""));
    }

    #[test]
    fn free_format_idempotent() {
        for s in ["a. b\n'c'", "\"x\"", "plain"] {
            let once = cleanse_answer(s, FreeFormat).unwrap();
            assert_eq!(cleanse_answer(&once, FreeFormat).unwrap(), once);
        }
    }

    #[test]
    fn format_names() {
        for f in CleansingFormat::ALL {
            assert_eq!(f.to_string().parse::<CleansingFormat>().unwrap(), f);
        }
        assert_eq!("Yes-No".parse::<CleansingFormat>().unwrap(), YesNo);
        assert!("essay".parse::<CleansingFormat>().is_err());
    }

    #[test]
    fn matching() {
        assert!(answer_matches(Some("1234"), "1,234", Number));
        assert!(answer_matches(Some("3"), "3.0", Number));
        assert!(answer_matches(Some("B"), "B", MultipleChoice));
        assert!(!answer_matches(None, "B", MultipleChoice));
        assert!(answer_matches(Some("yes"), "Yes", YesNo));
    }
}
