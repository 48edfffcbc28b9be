//! End-to-end glue: encode brain samples, project them into the language
//! model's context space, caption them, and score prompts and decoders.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::decoding::{decode, project_tokens, ConditionalLM, DecodeConfig, Projector, ABLATION_GRID};
use crate::encoder::{encode, EncoderConfig, EncoderParams, VisualTokens};
use crate::ipo::PromptScorer;
use crate::metrics::{bleu_n, evaluate_corpus, tokenize, CorpusEval};
use crate::training::{batch_for, Dataset};
use crate::{Error, Matrix, Result};

/// Prompt used to caption the target tokens when building references.
pub const REFERENCE_PROMPT: &str = "Describe what you see in <image> using one short sentence.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl core::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidInput(format!("unknown split `{other}`, expected train, val or test"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub subject: String,
    /// Position within the subject's split.
    pub index: usize,
    pub predicted: VisualTokens,
    pub target: VisualTokens,
}

/// Encode every sample of `split`, subjects in dataset order.
pub fn encode_split(data: &Dataset, params: &EncoderParams, cfg: &EncoderConfig, split: Split) -> Result<Vec<EncodedSample>> {
    let mut out = Vec::new();
    for s in &data.subjects {
        let samples = match split {
            Split::Train => &s.train,
            Split::Val => &s.val,
            Split::Test => &s.test,
        };
        for (i, x) in samples.iter().enumerate() {
            out.push(EncodedSample {
                subject: s.id.clone(),
                index: i,
                predicted: encode(&batch_for(s, &x.signals), params, cfg, None)?,
                target: x.target.clone(),
            });
        }
    }
    Ok(out)
}

/// Project encoder outputs (or targets) into LM context matrices.
pub fn contexts(samples: &[EncodedSample], projector: &Projector, use_target: bool) -> Result<Vec<Matrix>> {
    samples
        .iter()
        .map(|s| project_tokens(if use_target { &s.target } else { &s.predicted }, projector))
        .collect()
}

/// Reference captions per sample: the distinct captions the LM produces for
/// the target tokens under the reference prompt, one per ablation setting.
pub fn reference_captions<L: ConditionalLM + ?Sized>(
    lm: &L,
    target_contexts: &[Matrix],
    max_new_tokens: usize,
) -> Result<Vec<Vec<String>>> {
    let prompt = lm.vocab().encode_prompt(REFERENCE_PROMPT)?;
    let eos = lm.vocab().eos();
    target_contexts
        .iter()
        .map(|ctx| {
            let mut refs: Vec<String> = Vec::new();
            for s in &ABLATION_GRID {
                let r = decode(lm, ctx, &prompt, &s.decode_config(max_new_tokens, eos))?;
                let text = lm.vocab().decode(r.tokens());
                if !refs.contains(&text) {
                    refs.push(text);
                }
            }
            Ok(refs)
        })
        .collect()
}

/// Scores a prompt by corpus BLEU-4 of its captions on a fixed sample set.
pub struct PipelineScorer<'a, L: ConditionalLM + ?Sized> {
    lm: &'a L,
    contexts: Vec<Matrix>,
    references: Vec<Vec<String>>,
    decode_cfg: DecodeConfig,
}

impl<'a, L: ConditionalLM + ?Sized> PipelineScorer<'a, L> {
    pub fn new(lm: &'a L, contexts: Vec<Matrix>, references: Vec<Vec<String>>, decode_cfg: DecodeConfig) -> Result<Self> {
        if contexts.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if contexts.len() != references.len() {
            return Err(Error::InvalidInput(format!(
                "{} contexts but {} reference sets",
                contexts.len(),
                references.len()
            )));
        }
        decode_cfg.validate(lm.vocab())?;
        Ok(PipelineScorer {
            lm,
            contexts,
            references,
            decode_cfg,
        })
    }

    pub fn references(&self) -> &[Vec<String>] {
        &self.references
    }

    /// Top-1 caption for every sample under `prompt`.
    pub fn captions(&self, prompt: &str) -> Result<Vec<String>> {
        let ids = self.lm.vocab().encode_prompt(prompt)?;
        self.contexts
            .iter()
            .enumerate()
            .map(|(i, ctx)| {
                let r = decode(self.lm, ctx, &ids, &self.decode_cfg).map_err(|e| Error::Scoring {
                    sample: i,
                    reason: e.to_string(),
                })?;
                Ok(self.lm.vocab().decode(r.tokens()))
            })
            .collect()
    }

    pub fn evaluate(&self, prompt: &str) -> Result<CorpusEval> {
        evaluate_corpus(&self.captions(prompt)?, &self.references)
    }

    /// Corpus BLEU-4 of the prompt's captions.
    pub fn score_prompt(&self, prompt: &str) -> Result<f64> {
        let cands: Vec<Vec<String>> = self.captions(prompt)?.iter().map(|c| tokenize(c)).collect();
        let refs: Vec<Vec<Vec<String>>> =
            self.references.iter().map(|rs| rs.iter().map(|r| tokenize(r)).collect()).collect();
        bleu_n(&cands, &refs, 4)
    }
}

impl<L: ConditionalLM + ?Sized> PromptScorer for PipelineScorer<'_, L> {
    fn score(&self, prompt: &str) -> Result<f64> {
        self.score_prompt(prompt)
    }
}

/// Per-subject metric rows over captions aligned with `samples`.
pub fn subject_reports(
    samples: &[EncodedSample],
    captions: &[String],
    references: &[Vec<String>],
) -> Result<Vec<(String, CorpusEval)>> {
    if samples.len() != captions.len() || samples.len() != references.len() {
        return Err(Error::InvalidInput("samples, captions and references must align".into()));
    }
    let mut ids: Vec<&str> = Vec::new();
    for s in samples {
        if !ids.contains(&s.subject.as_str()) {
            ids.push(&s.subject);
        }
    }
    ids.iter()
        .map(|id| {
            let idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].subject == *id).collect();
            let c: Vec<String> = idx.iter().map(|&i| captions[i].clone()).collect();
            let r: Vec<Vec<String>> = idx.iter().map(|&i| references[i].clone()).collect();
            Ok((id.to_string(), evaluate_corpus(&c, &r)?))
        })
        .collect()
}
