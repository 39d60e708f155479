//! Deterministic rule-based hallucination injectors.

use std::collections::HashMap;
use std::ops::Range;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{normalize, sentence_spans};

/// Names the toy generator never uses, so an injected sentence naming one is
/// guaranteed unsupported by the context.
pub const RESERVED_ENTITIES: [&str; 16] = [
    "Zorvath", "Quillane", "Vexmoor", "Ysolde", "Kravik", "Thessaly", "Morcant", "Ulbrecht",
    "Xandria", "Pellinor", "Ravenna", "Oswick", "Dunmarrow", "Ilsabet", "Corvane", "Haldric",
];

const BASELESS_TEMPLATES: [&str; 8] = [
    "{E} once wrote a long letter about the {T}.",
    "Years later, {E} claimed to have seen the {T} in a dream.",
    "{E} was said to guard the secrets of the {T}.",
    "According to {E}, the {T} had been cursed long ago.",
    "{E} traveled far to study the {T} in secret.",
    "A stranger named {E} offered gold in exchange for the {T}.",
    "{E} composed a famous song about the {T}.",
    "Rumors spread that {E} had hidden a map near the {T}.",
];

/// Antonym pairs; lookup goes both ways.
pub const ANTONYMS: [(&str, &str); 14] = [
    ("useless", "essential"),
    ("weak", "strong"),
    ("rich", "poor"),
    ("brave", "cowardly"),
    ("loyal", "treacherous"),
    ("honest", "deceitful"),
    ("kind", "cruel"),
    ("calm", "restless"),
    ("wise", "foolish"),
    ("proud", "humble"),
    ("friends", "enemies"),
    ("victory", "defeat"),
    ("safe", "dangerous"),
    ("ancient", "modern"),
];

pub const AUXILIARIES: [&str; 9] = ["is", "are", "was", "were", "has", "have", "can", "should", "will"];

const STOPWORDS: [&str; 48] = [
    "the", "a", "an", "and", "or", "but", "of", "to", "in", "on", "at", "by", "for", "with", "from", "into", "as",
    "is", "are", "was", "were", "be", "been", "has", "have", "had", "can", "should", "will", "not", "it", "its",
    "he", "she", "they", "them", "his", "her", "their", "this", "that", "these", "those", "there", "then", "than",
    "who", "which",
];

pub fn antonym(word: &str) -> Option<&'static str> {
    let lower = word.to_lowercase();
    ANTONYMS.iter().find_map(|&(a, b)| {
        if lower == a {
            Some(b)
        } else if lower == b {
            Some(a)
        } else {
            None
        }
    })
}

fn is_aux(word: &str) -> bool {
    AUXILIARIES.iter().any(|a| a.eq_ignore_ascii_case(word))
}

/// Alphabetic word spans of `text`.
fn words(text: &str) -> Vec<Range<usize>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphabetic(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(s..i);
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(s..text.len());
    }
    out
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut c = replacement.chars();
        c.next()
            .map(|f| f.to_uppercase().chain(c).collect())
            .unwrap_or_default()
    } else {
        replacement.to_string()
    }
}

/// Most frequent non-stopword of `text` (ties broken lexicographically), in
/// its first-seen spelling.
pub fn topic_word(text: &str) -> Option<String> {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in normalize(text) {
        if t.len() >= 3 && t.chars().all(char::is_alphabetic) && !STOPWORDS.contains(&t.as_str()) {
            *counts.entry(t).or_default() += 1;
        }
    }
    let best = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))?
        .0;
    words(text)
        .into_iter()
        .map(|r| &text[r])
        .find(|w| w.to_lowercase() == best)
        .map(str::to_string)
}

/// Inserts one fabricated sentence at a seeded sentence boundary. Returns the
/// new text and the index of the inserted sentence.
pub fn inject_baseless_rule(summary: &str, seed: u64) -> Result<(String, usize)> {
    let spans = sentence_spans(summary);
    if spans.is_empty() {
        return Err(Error::Contract("summary has no sentences".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present: Vec<String> = normalize(summary);
    let candidates: Vec<&str> = RESERVED_ENTITIES
        .iter()
        .copied()
        .filter(|e| !present.contains(&e.to_lowercase()))
        .collect();
    let entity = *candidates
        .choose(&mut rng)
        .ok_or_else(|| Error::Contract("every reserved entity already appears in the summary".into()))?;
    let topic = topic_word(summary).unwrap_or_else(|| "matter".to_string());
    let template = BASELESS_TEMPLATES.choose(&mut rng).expect("template bank is non-empty");
    let sentence = template.replace("{E}", entity).replace("{T}", &topic);

    let at = rng.random_range(0..=spans.len());
    let mut out = String::with_capacity(summary.len() + sentence.len() + 1);
    if at < spans.len() {
        let pos = spans[at].start;
        out.push_str(&summary[..pos]);
        out.push_str(&sentence);
        out.push(' ');
        out.push_str(&summary[pos..]);
    } else {
        let pos = spans[spans.len() - 1].end;
        out.push_str(&summary[..pos]);
        out.push(' ');
        out.push_str(&sentence);
        out.push_str(&summary[pos..]);
    }
    Ok((out, at))
}

/// A byte-range replacement inside one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Edit {
    range: Range<usize>,
    replacement: String,
}

/// Flip for one sentence: antonym substitution first, then removal of an
/// existing "not" after an auxiliary, then insertion of "not" after the first
/// auxiliary.
fn contradiction_edit(sentence: &str) -> Option<Edit> {
    let ws = words(sentence);
    for r in &ws {
        let w = &sentence[r.clone()];
        if let Some(ant) = antonym(w) {
            return Some(Edit {
                range: r.clone(),
                replacement: match_case(w, ant),
            });
        }
    }
    for pair in ws.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let between = &sentence[a.end..b.start];
        if is_aux(&sentence[a.clone()])
            && sentence[b.clone()].eq_ignore_ascii_case("not")
            && between.chars().all(char::is_whitespace)
        {
            return Some(Edit {
                range: a.end..b.end,
                replacement: String::new(),
            });
        }
    }
    ws.iter().find(|r| is_aux(&sentence[(*r).clone()])).map(|r| Edit {
        range: r.end..r.end,
        replacement: " not".into(),
    })
}

/// Rewrites one seeded-random negatable sentence so it contradicts the
/// original. Returns the new text and the index of the changed sentence.
pub fn inject_contradictory_rule(summary: &str, seed: u64) -> Result<(String, usize)> {
    let spans = sentence_spans(summary);
    if spans.is_empty() {
        return Err(Error::Contract("summary has no sentences".into()));
    }
    let candidates: Vec<(usize, Edit)> = spans
        .iter()
        .enumerate()
        .filter_map(|(i, s)| contradiction_edit(&summary[s.clone()]).map(|e| (i, e)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (index, edit) = candidates.choose(&mut rng).ok_or(Error::NoCandidate)?;
    let base = spans[*index].start;
    let range = base + edit.range.start..base + edit.range.end;
    let mut out = String::with_capacity(summary.len() + 4);
    out.push_str(&summary[..range.start]);
    out.push_str(&edit.replacement);
    out.push_str(&summary[range.end..]);
    Ok((out, *index))
}
