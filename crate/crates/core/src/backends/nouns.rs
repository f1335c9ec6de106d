//! Deterministic noun-phrase extraction for surrounding descriptions.

use std::collections::HashSet;

use regex::Regex;
use std::sync::OnceLock;

use super::{BackendError, NounPhraseExtractor};
use crate::prompts::parse_surrounding_description;

const ARTICLES: [&str; 3] = ["a", "an", "the"];

fn strip_article(phrase: &str) -> &str {
    let trimmed = phrase.trim();
    if let Some((first, rest)) = trimmed.split_once(char::is_whitespace) {
        if ARTICLES.iter().any(|a| a.eq_ignore_ascii_case(first)) {
            return rest.trim_start();
        }
    }
    trimmed
}

fn fallback_splitter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)[,;]|\sand\s").unwrap())
}

/// Candidate noun phrases from a description: the entity list when the
/// text follows the surrounding template, otherwise the text split on
/// commas, semicolons and " and ". Leading articles are dropped and
/// duplicates (case-insensitive) removed, keeping first occurrences.
pub fn extract_noun_phrases(text: &str) -> Vec<String> {
    let parsed = parse_surrounding_description(text);
    let raw: Vec<String> = if !parsed.fallback {
        parsed.entity_phrases
    } else {
        fallback_splitter()
            .split(text)
            .map(|s| s.trim().trim_end_matches(['.', '!', '?']).to_string())
            .collect()
    };
    let mut seen = HashSet::new();
    raw.iter()
        .map(|p| strip_article(p))
        .filter(|p| !p.is_empty())
        .filter(|p| seen.insert(p.to_lowercase()))
        .map(str::to_string)
        .collect()
}

/// The built-in extractor.
pub struct BaselineNounPhrases;

impl NounPhraseExtractor for BaselineNounPhrases {
    fn extract(&self, text: &str) -> Result<Vec<String>, BackendError> {
        Ok(extract_noun_phrases(text))
    }
}
