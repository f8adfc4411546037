//! Evaluation items (JSONL) and few-shot prompt assembly.
//!
//! One record per line: `{"query": ..., "choices": [...], "gold": 1}` for
//! multiple choice, `{"query": ..., "gold": "42"}` for generative items, with
//! an optional `"group"` restricting which items may serve as shots.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Gold {
    /// Index of the correct choice.
    Choice(usize),
    /// Exact-match target for generative items.
    Target(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub query: String,
    pub choices: Option<Vec<String>>,
    pub gold: Gold,
    pub group: Option<String>,
    /// 1-based source line.
    pub line: usize,
}

impl EvalItem {
    pub fn is_generative(&self) -> bool {
        self.choices.is_none()
    }

    /// Text of the correct answer.
    pub fn answer_text(&self) -> &str {
        match (&self.gold, &self.choices) {
            (Gold::Choice(i), Some(c)) => &c[*i],
            (Gold::Target(t), _) => t,
            (Gold::Choice(_), None) => unreachable!("validated at load"),
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawGold {
    Index(usize),
    Text(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawItem {
    query: String,
    #[serde(default)]
    choices: Option<Vec<String>>,
    gold: RawGold,
    #[serde(default)]
    group: Option<String>,
}

fn validate(raw: RawItem, line: usize) -> Result<EvalItem> {
    let err = |reason: String| Error::Parse { line, reason };
    let gold = match (&raw.choices, raw.gold) {
        (Some(c), _) if c.len() < 2 => {
            return Err(err(format!("need at least 2 choices, got {}", c.len())))
        }
        (Some(c), RawGold::Index(g)) if g >= c.len() => {
            return Err(err(format!("gold index {g} out of range for {} choices", c.len())))
        }
        (Some(_), RawGold::Index(g)) => Gold::Choice(g),
        (Some(_), RawGold::Text(_)) => {
            return Err(err("multiple-choice gold must be an index".into()))
        }
        (None, RawGold::Text(t)) => Gold::Target(t),
        (None, RawGold::Index(g)) => Gold::Target(g.to_string()),
    };
    Ok(EvalItem {
        query: raw.query,
        choices: raw.choices,
        gold,
        group: raw.group,
        line,
    })
}

pub fn parse_dataset(text: &str) -> Result<Vec<EvalItem>> {
    let mut items = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawItem = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: i + 1,
            reason: e.to_string(),
        })?;
        items.push(validate(raw, i + 1)?);
    }
    Ok(items)
}

pub fn load_dataset(path: &Path) -> Result<Vec<EvalItem>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

/// Prompt layout. Defaults are this project's own choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub shot_separator: String,
    pub query_prefix: String,
    pub answer_prefix: String,
    pub n_shots: usize,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            shot_separator: "\n\n".into(),
            query_prefix: "Question: ".into(),
            answer_prefix: "\nAnswer: ".into(),
            n_shots: 0,
        }
    }
}

impl PromptTemplate {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("template {}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub context: String,
    /// Candidate continuations; empty for generative items.
    pub continuations: Vec<String>,
}

/// Concatenates each shot (query, gold answer, separator), then the item's
/// query and answer prefix.
pub fn build_prompt(item: &EvalItem, shots: &[&EvalItem], template: &PromptTemplate) -> Result<Prompt> {
    let mut context = String::new();
    for shot in shots {
        if *shot == item {
            return Err(Error::Protocol(format!(
                "item at line {} used as its own shot",
                item.line
            )));
        }
        context.push_str(&template.query_prefix);
        context.push_str(&shot.query);
        context.push_str(&template.answer_prefix);
        context.push_str(shot.answer_text());
        context.push_str(&template.shot_separator);
    }
    context.push_str(&template.query_prefix);
    context.push_str(&item.query);
    context.push_str(&template.answer_prefix);
    Ok(Prompt {
        context,
        continuations: item.choices.clone().unwrap_or_default(),
    })
}

/// Picks `n` shots for `items[index]` from other items of the same group,
/// deterministically for a given seed.
pub fn select_shots(items: &[EvalItem], index: usize, n: usize, seed: u64) -> Vec<&EvalItem> {
    if n == 0 {
        return Vec::new();
    }
    let target = &items[index];
    let mut pool: Vec<&EvalItem> = items
        .iter()
        .enumerate()
        .filter(|(i, it)| *i != index && it.group == target.group)
        .map(|(_, it)| it)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    pool.shuffle(&mut rng);
    pool.truncate(n);
    pool
}

/// Last number in `text` with thousands separators removed.
pub fn final_number(text: &str) -> Option<String> {
    let re = Regex::new(r"-?\d[\d,]*(?:\.\d+)?").expect("static regex");
    re.find_iter(text)
        .last()
        .map(|m| m.as_str().replace(',', "").trim_end_matches('.').to_string())
}

/// Exact match on the final numeric group of the generation.
pub fn grade_generation(generated: &str, target: &str) -> bool {
    match (final_number(generated), final_number(target)) {
        (Some(a), Some(b)) => a == b,
        _ => false,
    }
}
