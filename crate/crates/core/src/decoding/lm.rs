use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::metrics::tokenize;
use crate::rng::{self, seeded};
use crate::tensor::log_sum_exp;
use crate::{Error, Matrix, Result};

pub type TokenId = u32;

/// Marker that stands for the injected visual tokens inside a prompt.
pub const IMAGE_PLACEHOLDER: &str = "<image>";
pub const EOS_WORD: &str = "<eos>";

/// Tolerance on `logsumexp(next_logprobs) = 0`.
pub const LOGPROB_TOLERANCE: f64 = 1e-6;

/// Output vocabulary plus the prompt-side id space.
///
/// Ids `0..len()` are emittable words with `<eos>` at 0. Prompt words outside
/// the vocabulary hash into `n_buckets` extra ids, followed by one id for the
/// image placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, TokenId>,
    n_buckets: usize,
}

pub const DEFAULT_CAPTION_WORDS: &[&str] = &[
    "a", "an", "the", "two", "man", "woman", "people", "dog", "cat", "bus", "train", "boat", "pizza", "plate",
    "table", "street", "field", "water", "kitchen", "room", "bike", "is", "are", "sitting", "standing", "riding",
    "holding", "playing", "on", "in", "with", "of", "near", "next", "to", "red", "white", "large", "small", "green",
];

impl Vocab {
    pub fn new<S: AsRef<str>>(words: &[S], n_buckets: usize) -> Result<Self> {
        let mut all = alloc::vec![EOS_WORD.to_string()];
        all.extend(words.iter().map(|w| w.as_ref().to_string()));
        let mut index = BTreeMap::new();
        for (i, w) in all.iter().enumerate() {
            if i > 0 && (tokenize(w).as_slice() != core::slice::from_ref(w)) {
                return Err(Error::InvalidInput(format!("vocabulary word `{w}` is not a normalized token")));
            }
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidInput(format!("duplicate vocabulary word `{w}`")));
            }
        }
        Ok(Vocab {
            words: all,
            index,
            n_buckets,
        })
    }

    pub fn default_captions() -> Self {
        Vocab::new(DEFAULT_CAPTION_WORDS, 16).expect("built-in vocabulary is valid")
    }

    /// Number of emittable tokens, `<eos>` included.
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn eos(&self) -> TokenId {
        0
    }

    pub fn image_token(&self) -> TokenId {
        (self.words.len() + self.n_buckets) as TokenId
    }

    /// Size of the id space a prompt may use.
    pub fn prompt_space(&self) -> usize {
        self.words.len() + self.n_buckets + 1
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied().filter(|&i| i != 0)
    }

    fn bucket(&self, word: &str) -> TokenId {
        // FNV-1a, stable across platforms and runs
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in word.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        let bucket = if self.n_buckets == 0 { 0 } else { (h % self.n_buckets as u64) as usize };
        (self.words.len() + bucket) as TokenId
    }

    /// Tokenize a prompt; it must contain the image placeholder exactly once.
    pub fn encode_prompt(&self, prompt: &str) -> Result<Vec<TokenId>> {
        let count = prompt.matches(IMAGE_PLACEHOLDER).count();
        if count != 1 {
            return Err(Error::InvalidInput(format!(
                "prompt must contain `{IMAGE_PLACEHOLDER}` exactly once, found {count}"
            )));
        }
        let (before, after) = prompt.split_once(IMAGE_PLACEHOLDER).expect("placeholder present");
        let mut ids = Vec::new();
        let push_words = |text: &str, ids: &mut Vec<TokenId>| {
            for w in tokenize(text) {
                let id = match self.id(&w) {
                    Some(id) => id,
                    None if self.n_buckets > 0 => self.bucket(&w),
                    None => continue,
                };
                ids.push(id);
            }
        };
        push_words(before, &mut ids);
        ids.push(self.image_token());
        push_words(after, &mut ids);
        Ok(ids)
    }

    /// Space-joined words of a generated sequence, `<eos>` dropped.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens.iter().filter(|&&t| t != self.eos()) {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.word(t).unwrap_or("<unk>"));
        }
        out
    }
}

/// A conditional next-token model over a fixed vocabulary.
pub trait ConditionalLM {
    fn vocab(&self) -> &Vocab;

    /// Log-probabilities of every vocabulary token following `prompt`, the
    /// visual `context` and the tokens `generated` so far.
    fn next_logprobs(&self, context: &Matrix, prompt: &[TokenId], generated: &[TokenId]) -> Result<Vec<f64>>;
}

/// Query the model and verify it returned a normalized distribution.
pub fn checked_logprobs<L: ConditionalLM + ?Sized>(
    lm: &L,
    context: &Matrix,
    prompt: &[TokenId],
    generated: &[TokenId],
) -> Result<Vec<f64>> {
    let lp = lm.next_logprobs(context, prompt, generated)?;
    let v = lm.vocab().len();
    if lp.len() != v {
        return Err(Error::LmContract(format!("expected {v} log-probabilities, got {}", lp.len())));
    }
    if let Some(i) = lp.iter().position(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::LmContract(format!("log-probability of token {i} is {}", lp[i])));
    }
    let total = log_sum_exp(&lp);
    if total.is_nan() || total.abs() > LOGPROB_TOLERANCE {
        return Err(Error::LmContract(format!("log-probabilities sum to exp({total}), not 1")));
    }
    Ok(lp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub ctx_dim: usize,
    pub temperature: f64,
    /// Extra logit on `<eos>`; controls typical caption length.
    pub eos_bias: f64,
    /// When false the prompt is ignored entirely.
    pub use_prompt: bool,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            ctx_dim: 16,
            temperature: 1.0,
            eos_bias: -1.0,
            use_prompt: true,
            seed: 7,
        }
    }
}

/// Seeded stand-in for a frozen multimodal LM.
///
/// Logits for the next token are
/// `b + c̄U + M₁[p₁] + M₂[p₂] + c̄T[p₁] + mean_w P[w]`, divided by the
/// temperature, where `c̄` is the mean context row, `p₁`, `p₂` are the last
/// two tokens of prompt ++ generated (padded with a start id) and `w` ranges
/// over the prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyConditionalLM {
    vocab: Vocab,
    cfg: ToyLmConfig,
    bias: Vec<f64>,
    context_w: Matrix,
    prev1: Matrix,
    prev2: Matrix,
    bilinear: Vec<Matrix>,
    prompt_w: Matrix,
}

impl ToyConditionalLM {
    pub fn new(vocab: Vocab, cfg: ToyLmConfig) -> Result<Self> {
        if cfg.ctx_dim == 0 {
            return Err(Error::InvalidInput("ctx_dim must be >= 1".into()));
        }
        if !cfg.temperature.is_finite() || cfg.temperature <= 0.0 {
            return Err(Error::InvalidInput(format!("temperature must be positive, got {}", cfg.temperature)));
        }
        let mut rng = seeded(cfg.seed);
        let v = vocab.len();
        // prompt ids plus one start-of-sequence row
        let rows = vocab.prompt_space() + 1;
        let mut gauss = |r: usize, c: usize, s: f64| Matrix::from_fn(r, c, |_, _| s * rng::normal(&mut rng));
        let mut bias = gauss(1, v, 0.5).into_vec();
        bias[vocab.eos() as usize] += cfg.eos_bias;
        let context_w = gauss(cfg.ctx_dim, v, 1.0 / libm::sqrt(cfg.ctx_dim as f64));
        let prev1 = gauss(rows, v, 1.5);
        let prev2 = gauss(rows, v, 1.0);
        let bilinear = (0..rows).map(|_| gauss(cfg.ctx_dim, v, 0.5 / libm::sqrt(cfg.ctx_dim as f64))).collect();
        let prompt_w = gauss(rows, v, 1.5);
        Ok(ToyConditionalLM {
            vocab,
            cfg,
            bias,
            context_w,
            prev1,
            prev2,
            bilinear,
            prompt_w,
        })
    }

    pub fn config(&self) -> &ToyLmConfig {
        &self.cfg
    }

    fn start_id(&self) -> usize {
        self.vocab.prompt_space()
    }
}

impl ConditionalLM for ToyConditionalLM {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_logprobs(&self, context: &Matrix, prompt: &[TokenId], generated: &[TokenId]) -> Result<Vec<f64>> {
        if context.cols() != self.cfg.ctx_dim || context.rows() == 0 {
            return Err(Error::shape(
                "toy LM context",
                format!("L x {}", self.cfg.ctx_dim),
                format!("{:?}", context.shape()),
            ));
        }
        if let Some(t) = prompt.iter().find(|&&t| t as usize >= self.vocab.prompt_space()) {
            return Err(Error::InvalidInput(format!("prompt token {t} outside the prompt id space")));
        }
        if let Some(t) = generated.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(Error::InvalidInput(format!("generated token {t} outside the vocabulary")));
        }
        let mut summary = context.col_sums();
        summary.scale(1.0 / context.rows() as f64);

        let history: Vec<usize> = if self.cfg.use_prompt { prompt } else { &[][..] }
            .iter()
            .chain(generated)
            .map(|&t| t as usize)
            .collect();
        let last = |k: usize| history.len().checked_sub(k).map_or(self.start_id(), |i| history[i]);
        let (p1, p2) = (last(1), last(2));

        let mut logits = summary.matmul(&self.context_w);
        logits.add_assign(&summary.matmul(&self.bilinear[p1]));
        let mut logits = logits.into_vec();
        for (j, l) in logits.iter_mut().enumerate() {
            *l += self.bias[j] + self.prev1.get(p1, j) + self.prev2.get(p2, j);
        }
        if self.cfg.use_prompt && !prompt.is_empty() {
            let inv = 1.0 / prompt.len() as f64;
            for &w in prompt {
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += inv * self.prompt_w.get(w as usize, j);
                }
            }
        }
        for l in logits.iter_mut() {
            *l /= self.cfg.temperature;
        }
        let norm = log_sum_exp(&logits);
        Ok(logits.into_iter().map(|l| l - norm).collect())
    }
}
