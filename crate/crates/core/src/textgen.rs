//! Prompt text generation for synthesis.
//!
//! Positive prompts are built from one of five templates that place the
//! keyword's prefix and name in front of a query and decorate them with
//! prosody-control symbols. Negative prompts are corpus lines that do not
//! contain the keyword.
//!
//! | symbol   | effect                         |
//! |----------|--------------------------------|
//! | `(w)`    | speak `w` slowly               |
//! | `w:`     | pause after `w`                |
//! | `w?`     | raise pitch at the end of `w`  |
//! | `w!`     | speak `w` loudly               |

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Label;

/// Templates indexed by `template_id - 1`; id 6 is the negative template.
pub const TEMPLATES: [&str; 6] = [
    "{prefix} {key_name} {query}",
    "{prefix} ({key_name}) {query}",
    "({prefix}): ({key_name}) {query}",
    "{prefix}: ({key_name})? {query}",
    "{prefix}: {key_name}! {query}",
    "{query}",
];
pub const POSITIVE_TEMPLATES: usize = 5;
pub const NEGATIVE_TEMPLATE_ID: usize = 6;
pub const CONTROL_CHARS: [char; 5] = ['(', ')', ':', '?', '!'];

#[derive(Debug, Error, PartialEq)]
pub enum TextgenError {
    #[error("query is empty")]
    EmptyQuery,
    #[error("invalid keyword: {0}")]
    InvalidKeyword(String),
    #[error("template id {0} is not a positive template")]
    BadTemplate(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Keyword {
    pub prefix: String,
    pub key_name: String,
}

impl Keyword {
    pub fn new(prefix: &str, key_name: &str) -> Result<Self, TextgenError> {
        let kw = Self {
            prefix: prefix.trim().to_string(),
            key_name: key_name.trim().to_string(),
        };
        for part in [&kw.prefix, &kw.key_name] {
            if part.is_empty() || part.contains(CONTROL_CHARS) {
                return Err(TextgenError::InvalidKeyword(part.clone()));
            }
        }
        Ok(kw)
    }

    /// `"Hey Google"` → prefix `"Hey"`, key name `"Google"`. Everything after
    /// the first word is the key name.
    pub fn parse(phrase: &str) -> Result<Self, TextgenError> {
        let phrase = phrase.trim();
        let (prefix, key_name) = phrase
            .split_once(char::is_whitespace)
            .ok_or_else(|| TextgenError::InvalidKeyword(phrase.to_string()))?;
        Self::new(prefix, key_name)
    }

    /// Normalized word sequence of the whole keyword.
    pub fn words(&self) -> Vec<String> {
        normalize_words(&format!("{} {}", self.prefix, self.key_name))
    }
}

impl std::fmt::Display for Keyword {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} {}", self.prefix, self.key_name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProsodyKind {
    Slow,
    Pause,
    Rise,
    Loud,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProsodyControl {
    /// Index of the word (in render order) the control applies to.
    pub word: usize,
    pub kind: ProsodyKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSpec {
    pub text: String,
    pub label: Label,
    pub template_id: usize,
    pub query: String,
    #[serde(skip)]
    pub controls: Vec<ProsodyControl>,
}

impl PromptSpec {
    /// Parses a JSON line and re-derives the controls from the text.
    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        let mut spec: PromptSpec = serde_json::from_str(line)?;
        spec.controls = parse_controls(&spec.text);
        Ok(spec)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("prompt serializes")
    }
}

/// One whitespace token of a prompt, stripped of control symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptWord {
    /// Lowercase alphanumeric letters only.
    pub text: String,
    pub slow: bool,
    pub pause: bool,
    pub rise: bool,
    pub loud: bool,
}

/// Splits prompt text into renderable words. Controls compose: `(w)?` is
/// both slow and rising. Tokens with no letters or digits are dropped.
pub fn parse_prompt(text: &str) -> Vec<PromptWord> {
    text.split_whitespace()
        .filter_map(|tok| {
            let mut core = tok;
            let (mut pause, mut rise, mut loud) = (false, false, false);
            loop {
                if let Some(rest) = core.strip_suffix(':') {
                    pause = true;
                    core = rest;
                } else if let Some(rest) = core.strip_suffix('?') {
                    rise = true;
                    core = rest;
                } else if let Some(rest) = core.strip_suffix('!') {
                    loud = true;
                    core = rest;
                } else {
                    break;
                }
            }
            let slow = core.starts_with('(') && core.ends_with(')') && core.len() >= 2;
            let letters: String = core
                .chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect();
            (!letters.is_empty()).then_some(PromptWord {
                text: letters,
                slow,
                pause,
                rise,
                loud,
            })
        })
        .collect()
}

pub fn parse_controls(text: &str) -> Vec<ProsodyControl> {
    let mut out = Vec::new();
    for (i, w) in parse_prompt(text).iter().enumerate() {
        for (on, kind) in [
            (w.slow, ProsodyKind::Slow),
            (w.pause, ProsodyKind::Pause),
            (w.rise, ProsodyKind::Rise),
            (w.loud, ProsodyKind::Loud),
        ] {
            if on {
                out.push(ProsodyControl { word: i, kind });
            }
        }
    }
    out
}

/// Lowercases, turns every non-alphanumeric character (including the
/// control symbols) into a separator, and splits into words.
pub fn normalize_words(text: &str) -> Vec<String> {
    text.chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .flat_map(char::to_lowercase)
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// True iff the normalized text contains `prefix key_name` as a contiguous
/// word sequence.
pub fn contains_keyword(text: &str, kw: &Keyword) -> bool {
    let needle = kw.words();
    let hay = normalize_words(text);
    !needle.is_empty() && hay.windows(needle.len()).any(|w| w == needle.as_slice())
}

pub fn make_positive_with_template(kw: &Keyword, query: &str, template_id: usize) -> Result<PromptSpec, TextgenError> {
    let query = query.trim();
    if query.is_empty() {
        return Err(TextgenError::EmptyQuery);
    }
    if !(1..=POSITIVE_TEMPLATES).contains(&template_id) {
        return Err(TextgenError::BadTemplate(template_id));
    }
    let text = TEMPLATES[template_id - 1]
        .replace("{prefix}", &kw.prefix)
        .replace("{key_name}", &kw.key_name)
        .replace("{query}", query);
    Ok(PromptSpec {
        controls: parse_controls(&text),
        text,
        label: Label::Positive,
        template_id,
        query: query.to_string(),
    })
}

/// Positive prompt from a uniformly chosen template.
pub fn make_positive<R: Rng>(kw: &Keyword, query: &str, rng: &mut R) -> Result<PromptSpec, TextgenError> {
    let id = 1 + rng.gen_range(0..POSITIVE_TEMPLATES as u64) as usize;
    make_positive_with_template(kw, query, id)
}

/// `None` when the line contains the keyword or has nothing to render.
pub fn make_negative(corpus_line: &str, kw: &Keyword) -> Option<PromptSpec> {
    let line = corpus_line.trim();
    if normalize_words(line).is_empty() || contains_keyword(line, kw) {
        return None;
    }
    Some(PromptSpec {
        text: line.to_string(),
        label: Label::Negative,
        template_id: NEGATIVE_TEMPLATE_ID,
        query: line.to_string(),
        controls: parse_controls(line),
    })
}

/// Draws prompts from a query corpus.
pub struct PromptGenerator<'a> {
    keyword: &'a Keyword,
    corpus: &'a [String],
}

impl<'a> PromptGenerator<'a> {
    pub fn new(keyword: &'a Keyword, corpus: &'a [String]) -> Self {
        Self { keyword, corpus }
    }

    /// `count` positives; queries are drawn from corpus lines that do not
    /// themselves contain the keyword.
    pub fn positives<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<PromptSpec> {
        let queries: Vec<&String> = self
            .corpus
            .iter()
            .filter(|l| !l.trim().is_empty() && !contains_keyword(l, self.keyword))
            .collect();
        if queries.is_empty() {
            return Vec::new();
        }
        (0..count)
            .map(|_| {
                let q = queries[crate::seed::index(rng, queries.len())];
                make_positive(self.keyword, q, rng).expect("non-empty query")
            })
            .collect()
    }

    /// Up to `count` negatives from randomly drawn corpus lines; rejected
    /// lines are skipped. Gives up after `20 * count` draws.
    pub fn negatives<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<PromptSpec> {
        let mut out = Vec::with_capacity(count);
        if self.corpus.is_empty() {
            return out;
        }
        let mut draws = 0;
        while out.len() < count && draws < 20 * count.max(1) {
            draws += 1;
            let line = &self.corpus[crate::seed::index(rng, self.corpus.len())];
            if let Some(p) = make_negative(line, self.keyword) {
                out.push(p);
            }
        }
        out
    }
}
