//! Constrained beam search over a pluggable conditional language model.

mod lm;

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

pub use lm::{
    checked_logprobs, ConditionalLM, ToyConditionalLM, ToyLmConfig, TokenId, Vocab, DEFAULT_CAPTION_WORDS, EOS_WORD,
    IMAGE_PLACEHOLDER, LOGPROB_TOLERANCE,
};

use crate::encoder::VisualTokens;
use crate::metrics::{evaluate_corpus, CorpusEval};
use crate::rng::{self, seeded};
use crate::{Error, Matrix, Result};

/// Recorded with every run so scores are self-describing.
pub const LENGTH_NORMALIZATION: &str = "cum_logprob / len^length_penalty";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub num_beams: usize,
    /// 0 and 1 disable the constraint.
    pub no_repeat_ngram_size: usize,
    pub length_penalty: f64,
    pub max_new_tokens: usize,
    pub eos_token: TokenId,
}

impl DecodeConfig {
    pub fn new(num_beams: usize, no_repeat_ngram_size: usize, length_penalty: f64) -> Self {
        DecodeConfig {
            num_beams,
            no_repeat_ngram_size,
            length_penalty,
            ..DecodeConfig::default()
        }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.num_beams == 0 || self.max_new_tokens == 0 {
            return Err(Error::InvalidInput("num_beams and max_new_tokens must be >= 1".into()));
        }
        if !self.length_penalty.is_finite() {
            return Err(Error::InvalidInput("length_penalty must be finite".into()));
        }
        if self.eos_token as usize >= vocab.len() {
            return Err(Error::InvalidInput(format!(
                "eos_token {} outside vocabulary of {}",
                self.eos_token,
                vocab.len()
            )));
        }
        Ok(())
    }
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            num_beams: 6,
            no_repeat_ngram_size: 3,
            length_penalty: 0.1,
            max_new_tokens: 16,
            eos_token: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub cum_logprob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredHypothesis {
    pub hypothesis: BeamHypothesis,
    pub norm_score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Sorted by normalized score, best first.
    pub hypotheses: Vec<ScoredHypothesis>,
    /// Some hypothesis had every token banned and was closed with `<eos>`.
    pub fallback_used: bool,
}

impl DecodeResult {
    pub fn best(&self) -> &ScoredHypothesis {
        &self.hypotheses[0]
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.best().hypothesis.tokens
    }
}

/// `cum_logprob / len^p`, with `len` counting generated tokens (at least 1).
pub fn normalized_score(cum_logprob: f64, len: usize, length_penalty: f64) -> f64 {
    cum_logprob / libm::pow(len.max(1) as f64, length_penalty)
}

/// Tokens whose emission would repeat an `n`-gram already in `tokens`.
pub fn banned_tokens(tokens: &[TokenId], n: usize) -> BTreeSet<TokenId> {
    let mut banned = BTreeSet::new();
    if n < 2 || tokens.len() < n - 1 {
        return banned;
    }
    let prefix = &tokens[tokens.len() - (n - 1)..];
    for w in tokens.windows(n) {
        if &w[..n - 1] == prefix {
            banned.insert(w[n - 1]);
        }
    }
    banned
}

fn rank_order(a: &(f64, Vec<TokenId>), b: &(f64, Vec<TokenId>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

fn extended(tokens: &[TokenId], t: TokenId) -> Vec<TokenId> {
    let mut v = Vec::with_capacity(tokens.len() + 1);
    v.extend_from_slice(tokens);
    v.push(t);
    v
}

fn finalize(mut done: Vec<BeamHypothesis>, cfg: &DecodeConfig, fallback_used: bool) -> DecodeResult {
    let mut scored: Vec<ScoredHypothesis> = done
        .drain(..)
        .map(|h| ScoredHypothesis {
            norm_score: normalized_score(h.cum_logprob, h.tokens.len(), cfg.length_penalty),
            hypothesis: h,
        })
        .collect();
    scored.sort_by(|a, b| {
        b.norm_score
            .total_cmp(&a.norm_score)
            .then_with(|| a.hypothesis.tokens.cmp(&b.hypothesis.tokens))
    });
    DecodeResult {
        hypotheses: scored,
        fallback_used,
    }
}

/// Argmax decoding; ties go to the lowest token id. `num_beams` is ignored.
pub fn greedy_decode<L: ConditionalLM + ?Sized>(
    lm: &L,
    context: &Matrix,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate(lm.vocab())?;
    let mut tokens = Vec::new();
    let mut cum = 0.0;
    let mut fallback = false;
    for _ in 0..cfg.max_new_tokens {
        let lp = checked_logprobs(lm, context, prompt, &tokens)?;
        let banned = banned_tokens(&tokens, cfg.no_repeat_ngram_size);
        let mut best: Option<(TokenId, f64)> = None;
        for (t, &l) in lp.iter().enumerate() {
            let t = t as TokenId;
            if l == f64::NEG_INFINITY || banned.contains(&t) {
                continue;
            }
            if best.is_none_or(|(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let Some((t, l)) = best else {
            fallback = true;
            tokens.push(cfg.eos_token);
            break;
        };
        tokens.push(t);
        cum += l;
        if t == cfg.eos_token {
            break;
        }
    }
    let hyp = BeamHypothesis {
        tokens,
        cum_logprob: cum,
        finished: true,
    };
    Ok(finalize(alloc::vec![hyp], cfg, fallback))
}

/// Beam search with no-repeat n-gram masking and length-normalized ranking.
///
/// Each step ranks all expansions by cumulative log-probability (ties by
/// token sequence). An `<eos>` expansion is kept as finished only if it ranks
/// within the top `num_beams`; the best non-`<eos>` expansions refill the
/// beam. Search stops once `num_beams` hypotheses have finished or after
/// `max_new_tokens` steps, when the surviving beams are closed as they are.
pub fn beam_decode<L: ConditionalLM + ?Sized>(
    lm: &L,
    context: &Matrix,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate(lm.vocab())?;
    let eos = cfg.eos_token;
    let mut live = alloc::vec![BeamHypothesis {
        tokens: Vec::new(),
        cum_logprob: 0.0,
        finished: false,
    }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    let mut fallback = false;
    let mut exhausted = true;

    for _ in 0..cfg.max_new_tokens {
        let mut candidates: Vec<(f64, Vec<TokenId>)> = Vec::new();
        for h in &live {
            let lp = checked_logprobs(lm, context, prompt, &h.tokens)?;
            let banned = banned_tokens(&h.tokens, cfg.no_repeat_ngram_size);
            let before = candidates.len();
            for (t, &l) in lp.iter().enumerate() {
                let t = t as TokenId;
                if l != f64::NEG_INFINITY && !banned.contains(&t) {
                    candidates.push((h.cum_logprob + l, extended(&h.tokens, t)));
                }
            }
            if candidates.len() == before {
                fallback = true;
                done.push(BeamHypothesis {
                    tokens: extended(&h.tokens, eos),
                    cum_logprob: h.cum_logprob,
                    finished: true,
                });
            }
        }
        candidates.sort_by(rank_order);

        let mut next = Vec::with_capacity(cfg.num_beams);
        for (rank, (cum, tokens)) in candidates.into_iter().enumerate() {
            if rank >= cfg.num_beams && next.len() == cfg.num_beams {
                break;
            }
            if tokens.last() == Some(&eos) {
                if rank < cfg.num_beams {
                    done.push(BeamHypothesis {
                        tokens,
                        cum_logprob: cum,
                        finished: true,
                    });
                }
            } else if next.len() < cfg.num_beams {
                next.push(BeamHypothesis {
                    tokens,
                    cum_logprob: cum,
                    finished: false,
                });
            }
        }
        live = next;
        if done.len() >= cfg.num_beams || live.is_empty() {
            exhausted = false;
            break;
        }
    }
    if exhausted {
        done.extend(live.into_iter().map(|h| BeamHypothesis { finished: true, ..h }));
    }
    Ok(finalize(done, cfg, fallback))
}

/// Greedy for a single beam, beam search otherwise.
pub fn decode<L: ConditionalLM + ?Sized>(
    lm: &L,
    context: &Matrix,
    prompt: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    if cfg.num_beams == 1 {
        greedy_decode(lm, context, prompt, cfg)
    } else {
        beam_decode(lm, context, prompt, cfg)
    }
}

/// Affine map from encoder tokens into the language model's context space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Projector {
    pub fn random(d_in: usize, d_out: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let scale = 1.0 / libm::sqrt(d_in as f64);
        Projector {
            weight: Matrix::from_fn(d_in, d_out, |_, _| scale * rng::normal(&mut rng)),
            bias: Matrix::zeros(1, d_out),
        }
    }

    pub fn identity(d: usize) -> Self {
        Projector {
            weight: Matrix::identity(d),
            bias: Matrix::zeros(1, d),
        }
    }
}

/// Row-wise `z W + b`.
pub fn project_tokens(z: &VisualTokens, projector: &Projector) -> Result<Matrix> {
    let m = z.matrix();
    if m.cols() != projector.weight.rows() || projector.bias.shape() != (1, projector.weight.cols()) {
        return Err(Error::shape(
            "project_tokens",
            format!("tokens with {} columns", projector.weight.rows()),
            format!("{:?}", m.shape()),
        ));
    }
    let mut out = m.matmul(&projector.weight);
    out.add_row_broadcast(&projector.bias);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationSetting {
    pub name: &'static str,
    pub num_beams: usize,
    pub no_repeat_ngram_size: usize,
    pub length_penalty: f64,
}

impl AblationSetting {
    pub fn decode_config(&self, max_new_tokens: usize, eos_token: TokenId) -> DecodeConfig {
        DecodeConfig {
            num_beams: self.num_beams,
            no_repeat_ngram_size: self.no_repeat_ngram_size,
            length_penalty: self.length_penalty,
            max_new_tokens,
            eos_token,
        }
    }
}

const fn setting(name: &'static str, num_beams: usize, no_repeat_ngram_size: usize, length_penalty: f64) -> AblationSetting {
    AblationSetting {
        name,
        num_beams,
        no_repeat_ngram_size,
        length_penalty,
    }
}

/// The five decoding configurations compared in the ablation.
pub const ABLATION_GRID: [AblationSetting; 5] = [
    setting("Greedy", 1, 0, 1.0),
    setting("Beam Only", 6, 0, 1.0),
    setting("Beam + no_repeat", 6, 3, 1.0),
    setting("Beam + length_penalty", 6, 0, 0.1),
    setting("Full constraints", 6, 3, 0.1),
];

/// One decoded caption as persisted in generation dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub sample_id: usize,
    pub config_name: String,
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub norm_score: f64,
    pub fallback_used: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub eval: CorpusEval,
    pub generations: Vec<Generation>,
}

/// Decode every context under `cfg` and collect the top-1 captions.
pub fn generate_captions<L: ConditionalLM + ?Sized>(
    lm: &L,
    contexts: &[Matrix],
    prompt: &[TokenId],
    cfg: &DecodeConfig,
    config_name: &str,
) -> Result<Vec<Generation>> {
    contexts
        .iter()
        .enumerate()
        .map(|(i, ctx)| {
            let result = decode(lm, ctx, prompt, cfg)?;
            let best = result.best();
            Ok(Generation {
                sample_id: i,
                config_name: config_name.into(),
                tokens: best.hypothesis.tokens.clone(),
                text: lm.vocab().decode(&best.hypothesis.tokens),
                norm_score: best.norm_score,
                fallback_used: result.fallback_used,
            })
        })
        .collect()
}

/// Run the five ablation settings and score each against the references.
pub fn run_ablation_grid<L: ConditionalLM + ?Sized>(
    lm: &L,
    contexts: &[Matrix],
    prompt: &[TokenId],
    references: &[Vec<String>],
    max_new_tokens: usize,
) -> Result<Vec<AblationRow>> {
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
    let eos = lm.vocab().eos();
    ABLATION_GRID
        .iter()
        .map(|s| {
            let generations = generate_captions(lm, contexts, prompt, &s.decode_config(max_new_tokens, eos), s.name)?;
            let texts: Vec<String> = generations.iter().map(|g| g.text.clone()).collect();
            Ok(AblationRow {
                setting: *s,
                eval: evaluate_corpus(&texts, references)?,
                generations,
            })
        })
        .collect()
}
