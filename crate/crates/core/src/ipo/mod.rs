//! Interpretable prompt optimization: a propose, score and select loop over
//! human-readable prompts with a complete audit trace.

mod mock;

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use mock::{mock_generate, MockGenerator};

use crate::decoding::IMAGE_PLACEHOLDER;
use crate::{Error, Result};

/// Default meta-prompt sent to an external prompt generator.
pub const DEFAULT_INSTRUCTION: &str = "You write prompts for an image captioning model. \
Rewrite the prompts below into new, clearly worded prompts that ask for a short and accurate \
description of the image. Keep the marker <image> exactly once in every prompt and return only the prompts.";

/// Initial pool used when no seeds are configured.
pub const DEFAULT_SEED_PROMPTS: [&str; 5] = [
    "Describe what you see in <image> using one short sentence.",
    "What is happening in the picture <image>?",
    "Write a brief caption for <image>.",
    "List the main objects visible in <image>.",
    "Tell me about the scene shown in <image>.",
];

/// Check that a prompt is nonempty and holds the placeholder exactly once.
pub fn validate_prompt(text: &str) -> Result<()> {
    if text.trim().is_empty() {
        return Err(Error::InvalidInput("empty prompt".into()));
    }
    let n = text.matches(IMAGE_PLACEHOLDER).count();
    if n != 1 {
        return Err(Error::InvalidInput(format!(
            "prompt `{text}` must contain `{IMAGE_PLACEHOLDER}` exactly once, found {n}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub text: String,
    /// Iteration that first produced the prompt; 0 for seeds.
    pub iter_added: usize,
    pub score: Option<f64>,
}

impl PromptCandidate {
    pub fn new(text: impl Into<String>, iter_added: usize) -> Result<Self> {
        let text = text.into();
        validate_prompt(&text)?;
        Ok(PromptCandidate {
            text,
            iter_added,
            score: None,
        })
    }
}

/// Score descending, then earlier `iter_added`, then text.
pub fn rank_order(a: &PromptCandidate, b: &PromptCandidate) -> Ordering {
    let sa = a.score.unwrap_or(f64::NEG_INFINITY);
    let sb = b.score.unwrap_or(f64::NEG_INFINITY);
    sb.total_cmp(&sa)
        .then(a.iter_added.cmp(&b.iter_added))
        .then_with(|| a.text.cmp(&b.text))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPool {
    pub capacity: usize,
    /// Sorted by [`rank_order`].
    pub members: Vec<PromptCandidate>,
}

impl PromptPool {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidInput("pool capacity must be >= 1".into()));
        }
        Ok(PromptPool {
            capacity,
            members: Vec::new(),
        })
    }

    /// Keep the top `capacity` of the current members plus `incoming`.
    pub fn select(&mut self, incoming: impl IntoIterator<Item = PromptCandidate>) {
        self.members.extend(incoming);
        self.members.sort_by(rank_order);
        self.members.truncate(self.capacity);
    }

    pub fn best(&self) -> Option<&PromptCandidate> {
        self.members.first()
    }

    pub fn best_score(&self) -> Option<f64> {
        self.best().and_then(|c| c.score)
    }

    pub fn texts(&self) -> Vec<String> {
        self.members.iter().map(|c| c.text.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: usize,
    pub candidates_per_iter: usize,
    pub iterations: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            temperature: 0.8,
            top_p: 0.95,
            max_new_tokens: 1024,
            candidates_per_iter: 6,
            iterations: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates_per_iter == 0 || self.iterations == 0 {
            return Err(Error::InvalidInput("candidates_per_iter and iterations must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) || !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidInput(format!(
                "need temperature >= 0 and top_p in (0, 1], got {} and {}",
                self.temperature, self.top_p
            )));
        }
        Ok(())
    }
}

/// Source of new candidate prompts.
pub trait PromptGenerator {
    /// Propose exactly `k` new prompt texts given the current pool.
    fn generate(&mut self, pool: &[PromptCandidate], k: usize, cfg: &GeneratorConfig) -> Result<Vec<String>>;
}

/// Validation score of a prompt; higher is better.
pub trait PromptScorer {
    fn score(&self, prompt: &str) -> Result<f64>;
}

impl<F: Fn(&str) -> Result<f64>> PromptScorer for F {
    fn score(&self, prompt: &str) -> Result<f64> {
        self(prompt)
    }
}

/// One scored candidate. Field order is the on-disk column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub prompt: String,
    pub iter_added: usize,
    pub score: f64,
    pub iteration_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedIteration {
    pub iteration: usize,
    pub error_kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuplicatePrompt {
    pub iteration: usize,
    pub prompt: String,
}

/// Append-only audit log of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IPOTrace {
    pub records: Vec<TraceRecord>,
    /// Best pool score after the seeds (index 0) and after each iteration.
    pub best_per_iteration: Vec<f64>,
    pub skipped: Vec<SkippedIteration>,
    /// Generated texts that had already been scored and were not rescored.
    pub duplicates: Vec<DuplicatePrompt>,
}

impl IPOTrace {
    pub fn records_for_iteration(&self, iteration: usize) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(move |r| r.iteration_evaluated == iteration)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpoOutcome {
    pub best: PromptCandidate,
    pub pool: PromptPool,
    pub trace: IPOTrace,
}

fn scored<S: PromptScorer + ?Sized>(scorer: &S, text: &str, iter_added: usize) -> Result<PromptCandidate> {
    let score = scorer.score(text)?;
    if !score.is_finite() {
        return Err(Error::NonFinite(format!("score of prompt `{text}`")));
    }
    Ok(PromptCandidate {
        text: text.to_string(),
        iter_added,
        score: Some(score),
    })
}

fn check_batch(texts: &[String], k: usize) -> Result<()> {
    if texts.len() != k {
        return Err(Error::Protocol(format!("generator returned {} prompts, expected {k}", texts.len())));
    }
    for t in texts {
        validate_prompt(t).map_err(|e| Error::Protocol(e.to_string()))?;
    }
    Ok(())
}

/// Run the closed loop.
///
/// Seeds are scored at iteration 0. Each iteration asks the generator for
/// `candidates_per_iter` prompts, scores the ones never seen before and keeps
/// the top `pool_capacity` of pool plus newcomers. A generator failure skips
/// the iteration and is logged in the trace; scoring failures abort.
pub fn ipo_loop<G, S>(
    seeds: &[String],
    generator: &mut G,
    scorer: &S,
    cfg: &GeneratorConfig,
    pool_capacity: usize,
) -> Result<IpoOutcome>
where
    G: PromptGenerator + ?Sized,
    S: PromptScorer + ?Sized,
{
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidInput("IPO needs at least one seed prompt".into()));
    }
    let mut pool = PromptPool::new(pool_capacity)?;
    let mut trace = IPOTrace::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    let mut fresh = Vec::new();
    for s in seeds {
        validate_prompt(s)?;
        if !seen.insert(s.clone()) {
            trace.duplicates.push(DuplicatePrompt {
                iteration: 0,
                prompt: s.clone(),
            });
            continue;
        }
        fresh.push(scored(scorer, s, 0)?);
    }
    record(&mut trace, &fresh, 0);
    pool.select(fresh);
    trace.best_per_iteration.push(pool.best_score().unwrap_or(f64::NEG_INFINITY));

    for it in 1..=cfg.iterations {
        let texts = generator
            .generate(&pool.members, cfg.candidates_per_iter, cfg)
            .and_then(|t| check_batch(&t, cfg.candidates_per_iter).map(|()| t));
        let texts = match texts {
            Ok(t) => t,
            Err(e) => {
                trace.skipped.push(SkippedIteration {
                    iteration: it,
                    error_kind: e.kind().into(),
                    message: e.to_string(),
                });
                trace.best_per_iteration.push(pool.best_score().unwrap_or(f64::NEG_INFINITY));
                continue;
            }
        };
        let mut fresh = Vec::new();
        for t in &texts {
            if !seen.insert(t.clone()) {
                trace.duplicates.push(DuplicatePrompt {
                    iteration: it,
                    prompt: t.clone(),
                });
                continue;
            }
            fresh.push(scored(scorer, t, it)?);
        }
        record(&mut trace, &fresh, it);
        pool.select(fresh);
        trace.best_per_iteration.push(pool.best_score().unwrap_or(f64::NEG_INFINITY));
    }
    let best = pool.best().cloned().expect("pool holds at least one seed");
    Ok(IpoOutcome { best, pool, trace })
}

fn record(trace: &mut IPOTrace, fresh: &[PromptCandidate], iteration: usize) {
    trace.records.extend(fresh.iter().map(|c| TraceRecord {
        prompt: c.text.clone(),
        iter_added: c.iter_added,
        score: c.score.unwrap_or(f64::NAN),
        iteration_evaluated: iteration,
    }));
}

/// Per-prompt scores keyed by text, for callers that replay a trace.
pub fn score_table(trace: &IPOTrace) -> BTreeMap<&str, f64> {
    trace.records.iter().map(|r| (r.prompt.as_str(), r.score)).collect()
}
