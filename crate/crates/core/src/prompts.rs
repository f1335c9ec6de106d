//! The two MLLM instruction templates and parsers for the descriptions
//! they request.

use regex::Regex;
use serde::{Deserialize, Serialize};
use std::sync::OnceLock;
use thiserror::Error;

/// Placeholder replaced by the referring expression.
pub const INPUT_PLACEHOLDER: &str = "<input>";

/// Attribute-description instruction. Asks for the referent's category and
/// its crucial attributes.
pub const ATTRIBUTE_TEMPLATE: &str = "Given an image and the corresponding referring expression \"<input>\", the entity referred by the referring expression is unique in the image. Please generate a caption with local concept to describe the referent object according to the referring expression. The format is \"A photo of <object> (attribute)\".";

/// Surrounding-description instruction. Asks for the referent and the
/// entities around it.
pub const SURROUNDING_TEMPLATE: &str = "Given an image and the corresponding referring expression \"<input>\", the entity referred by the referring expression is unique in the image. Please generate a caption to describe the referent object and its surrounding entities according to the referring expression. The format is \"A photo of <object> surrounded by (entities)\".";

const PHOTO_PREFIX: &str = "a photo of";
const SURROUNDED_BY: &str = "surrounded by";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("referring expression is empty")]
    EmptyExpression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Attribute,
    Surrounding,
}

impl PromptKind {
    pub const ALL: [PromptKind; 2] = [PromptKind::Attribute, PromptKind::Surrounding];

    pub fn template(self) -> &'static str {
        match self {
            PromptKind::Attribute => ATTRIBUTE_TEMPLATE,
            PromptKind::Surrounding => SURROUNDING_TEMPLATE,
        }
    }
}

pub fn build_prompt(kind: PromptKind, expression: &str) -> Result<String, PromptError> {
    if expression.trim().is_empty() {
        return Err(PromptError::EmptyExpression);
    }
    // Each template carries the placeholder exactly once; splitting keeps
    // placeholder-like text inside the expression untouched.
    let (head, tail) = kind
        .template()
        .split_once(INPUT_PLACEHOLDER)
        .expect("template has an input placeholder");
    let mut out = String::with_capacity(head.len() + expression.len() + tail.len());
    out.push_str(head);
    out.push_str(expression);
    out.push_str(tail);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeParse {
    pub object_phrase: String,
    pub attribute_phrase: String,
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurroundingParse {
    pub object_phrase: String,
    pub entity_phrases: Vec<String>,
    pub fallback: bool,
}

/// Generated descriptions for one sample, parsed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptionBundle {
    pub t_van: String,
    pub t_att: String,
    pub t_sur: String,
    pub object_phrase: String,
    pub attribute_phrase: String,
    pub entity_phrases: Vec<String>,
    pub att_fallback: bool,
    pub sur_fallback: bool,
}

impl DescriptionBundle {
    /// Parses both replies. The referent phrase comes from the attribute
    /// reply, then the surrounding reply, then the expression itself.
    pub fn from_replies(t_van: &str, t_att: &str, t_sur: &str) -> Self {
        let att = parse_attribute_description(t_att);
        let sur = parse_surrounding_description(t_sur);
        let object_phrase = if !att.fallback {
            att.object_phrase.clone()
        } else if !sur.fallback {
            sur.object_phrase.clone()
        } else {
            t_van.to_string()
        };
        Self {
            t_van: t_van.to_string(),
            t_att: t_att.to_string(),
            t_sur: t_sur.to_string(),
            object_phrase,
            attribute_phrase: att.attribute_phrase,
            entity_phrases: sur.entity_phrases,
            att_fallback: att.fallback,
            sur_fallback: sur.fallback,
        }
    }
}

/// Strips a case-insensitive "A photo of" prefix (after leading whitespace).
fn strip_photo_prefix(raw: &str) -> Option<&str> {
    let s = raw.trim_start();
    let head = s.get(..PHOTO_PREFIX.len())?;
    if !head.eq_ignore_ascii_case(PHOTO_PREFIX) {
        return None;
    }
    let rest = &s[PHOTO_PREFIX.len()..];
    // "A photo ofman" is not the template
    if !rest.starts_with(char::is_whitespace) {
        return None;
    }
    Some(rest)
}

/// First balanced parenthesis group: `(before, inside)`.
fn first_group(s: &str) -> Option<(&str, &str)> {
    let open = s.find('(')?;
    let mut depth = 0usize;
    for (i, c) in s[open..].char_indices() {
        match c {
            '(' => depth += 1,
            ')' => {
                depth -= 1;
                if depth == 0 {
                    return Some((&s[..open], &s[open + 1..open + i]));
                }
            }
            _ => {}
        }
    }
    None
}

pub fn parse_attribute_description(raw: &str) -> AttributeParse {
    let parsed = strip_photo_prefix(raw)
        .and_then(first_group)
        .map(|(obj, attr)| (obj.trim(), attr.trim()))
        .filter(|(obj, _)| !obj.is_empty());
    match parsed {
        Some((obj, attr)) => AttributeParse {
            object_phrase: obj.to_string(),
            attribute_phrase: attr.to_string(),
            fallback: false,
        },
        None => AttributeParse {
            object_phrase: raw.to_string(),
            attribute_phrase: raw.to_string(),
            fallback: true,
        },
    }
}

fn find_ignore_ascii_case(haystack: &str, needle: &str) -> Option<usize> {
    haystack
        .as_bytes()
        .windows(needle.len())
        .position(|w| w.eq_ignore_ascii_case(needle.as_bytes()))
}

fn entity_splitter() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i),|\band\b").unwrap())
}

/// Splits an entity list on commas and the word "and".
pub fn split_entities(list: &str) -> Vec<String> {
    entity_splitter()
        .split(list)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn parse_surrounding_description(raw: &str) -> SurroundingParse {
    let parsed = strip_photo_prefix(raw).and_then(|rest| {
        let at = find_ignore_ascii_case(rest, SURROUNDED_BY)?;
        let object = rest[..at].trim();
        let after = &rest[at + SURROUNDED_BY.len()..];
        let (_, inside) = first_group(after)?;
        (!object.is_empty()).then_some((object, inside))
    });
    match parsed {
        Some((object, inside)) => SurroundingParse {
            object_phrase: object.to_string(),
            entity_phrases: split_entities(inside),
            fallback: false,
        },
        None => SurroundingParse {
            object_phrase: raw.to_string(),
            entity_phrases: Vec::new(),
            fallback: true,
        },
    }
}
