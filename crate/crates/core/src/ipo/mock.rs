use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::{GeneratorConfig, PromptCandidate, PromptGenerator};
use crate::decoding::IMAGE_PLACEHOLDER;
use crate::rng::{self, derived};
use crate::Result;

const SYNONYMS: &[(&str, &[&str])] = &[
    ("describe", &["summarize", "explain"]),
    ("summarize", &["describe"]),
    ("picture", &["photo", "image"]),
    ("photo", &["picture"]),
    ("short", &["brief", "simple"]),
    ("brief", &["short", "concise"]),
    ("sentence", &["phrase"]),
    ("caption", &["description", "summary"]),
    ("main", &["key", "central"]),
    ("objects", &["items", "subjects"]),
    ("scene", &["view", "setting"]),
    ("see", &["notice", "observe"]),
    ("write", &["give", "compose"]),
    ("list", &["name"]),
    ("visible", &["shown", "present"]),
    ("shown", &["depicted", "visible"]),
    ("happening", &["going on", "taking place"]),
    ("tell", &["inform"]),
    ("what", &["which things"]),
];

const SUFFIXES: &[&str] = &[" Be concise.", " Answer in a few words.", " Mention the setting.", " Focus on people and objects."];

const TEMPLATES: &[&str] = &[
    "Describe <image> in one short sentence.",
    "Write a short caption for <image>.",
    "What objects and actions appear in <image>?",
    "Give a brief description of the scene in <image>.",
    "Look at <image> and say what is going on.",
    "Caption the photo <image> in plain words.",
];

fn split_word(token: &str) -> (&str, &str) {
    let end = token.trim_end_matches(|c: char| c.is_ascii_punctuation()).len();
    token.split_at(end)
}

fn match_case(template: &str, replacement: &str) -> String {
    let upper = template.chars().next().is_some_and(char::is_uppercase);
    let mut chars = replacement.chars();
    match chars.next() {
        Some(c) if upper => c.to_uppercase().chain(chars).collect(),
        _ => replacement.to_string(),
    }
}

fn substitute(text: &str, rng: &mut rng::Rng) -> Option<String> {
    let tokens: Vec<&str> = text.split(' ').collect();
    let slots: Vec<(usize, &[&str])> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| !t.contains(IMAGE_PLACEHOLDER))
        .filter_map(|(i, t)| {
            let word = split_word(t).0.to_lowercase();
            SYNONYMS.iter().find(|(w, _)| *w == word).map(|(_, alts)| (i, *alts))
        })
        .collect();
    if slots.is_empty() {
        return None;
    }
    let (i, alts) = slots[rng::index(rng, slots.len())];
    let (word, punct) = split_word(tokens[i]);
    let replacement = match_case(word, alts[rng::index(rng, alts.len())]);
    let mut out: Vec<String> = tokens.iter().map(|t| t.to_string()).collect();
    out[i] = format!("{replacement}{punct}");
    Some(out.join(" "))
}

fn mutate(text: &str, rng: &mut rng::Rng) -> Option<String> {
    match rng::index(rng, 4) {
        0 | 1 => substitute(text, rng),
        2 => {
            let s = SUFFIXES[rng::index(rng, SUFFIXES.len())];
            (!text.ends_with(s)).then(|| format!("{text}{s}"))
        }
        _ => Some(TEMPLATES[rng::index(rng, TEMPLATES.len())].to_string()),
    }
}

/// Deterministic stand-in for an LLM prompt writer.
///
/// Mutates pool members through a fixed synonym, suffix and template table.
/// Returns `k` distinct texts, none already in the pool, each holding the
/// placeholder exactly once. Numbered fallback prompts cover the case where
/// the table runs dry.
pub fn mock_generate(pool: &[PromptCandidate], k: usize, seed: u64) -> Vec<String> {
    let mut rng = derived(seed, 0x1b0);
    let mut taken: BTreeSet<String> = pool.iter().map(|c| c.text.clone()).collect();
    let mut out = Vec::with_capacity(k);
    let mut attempts = 0;
    while out.len() < k && attempts < 64 * k && !pool.is_empty() {
        attempts += 1;
        let base = &pool[rng::index(&mut rng, pool.len())].text;
        if let Some(t) = mutate(base, &mut rng) {
            if t.matches(IMAGE_PLACEHOLDER).count() == 1 && taken.insert(t.clone()) {
                out.push(t);
            }
        }
    }
    let mut n = 1;
    while out.len() < k {
        let t = format!("Describe {IMAGE_PLACEHOLDER} briefly, variant {n}.");
        if taken.insert(t.clone()) {
            out.push(t);
        }
        n += 1;
    }
    out
}

/// [`mock_generate`] with a fresh seed for every call.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    seed: u64,
    calls: u64,
}

impl MockGenerator {
    pub fn new(seed: u64) -> Self {
        MockGenerator { seed, calls: 0 }
    }
}

impl PromptGenerator for MockGenerator {
    fn generate(&mut self, pool: &[PromptCandidate], k: usize, _cfg: &GeneratorConfig) -> Result<Vec<String>> {
        self.calls += 1;
        Ok(mock_generate(pool, k, self.seed.wrapping_add(self.calls)))
    }
}
