use brainroi_core::decoding::{
    ConditionalLM, DecodeConfig, Projector, ToyConditionalLM, ToyLmConfig, TokenId, Vocab,
};
use brainroi_core::encoder::{EncoderConfig, EncoderParams};
use brainroi_core::ipo::{ipo_loop, GeneratorConfig, MockGenerator, DEFAULT_SEED_PROMPTS};
use brainroi_core::pipeline::{contexts, encode_split, reference_captions, subject_reports, PipelineScorer, Split, REFERENCE_PROMPT};
use brainroi_core::training::{generate_synthetic_dataset, Dataset, SyntheticDatasetSpec};
use brainroi_core::{Error, Matrix, Result};

struct Fixture {
    data: Dataset,
    params: EncoderParams,
    ecfg: EncoderConfig,
    projector: Projector,
}

fn fixture() -> Fixture {
    let data = generate_synthetic_dataset(&SyntheticDatasetSpec::default()).unwrap();
    let ecfg = EncoderConfig::default();
    let params = EncoderParams::init(&ecfg, &data.atlas_columns(), 42).unwrap();
    let projector = Projector::random(ecfg.d_out, ToyLmConfig::default().ctx_dim, 5);
    Fixture {
        data,
        params,
        ecfg,
        projector,
    }
}

fn seeds() -> Vec<String> {
    DEFAULT_SEED_PROMPTS.iter().map(|s| s.to_string()).collect()
}

#[test]
fn reference_prompt_steers_the_lm_and_ipo_finds_it() {
    let f = fixture();
    let lm = ToyConditionalLM::new(Vocab::default_captions(), ToyLmConfig::default()).unwrap();
    let val = encode_split(&f.data, &f.params, &f.ecfg, Split::Val).unwrap();
    assert_eq!(val.len(), 4 * 8);
    let targets = contexts(&val, &f.projector, true).unwrap();
    let refs = reference_captions(&lm, &targets, 16).unwrap();
    assert!(refs.iter().all(|r| !r.is_empty() && r.len() <= 5));

    let scorer = PipelineScorer::new(&lm, targets, refs, DecodeConfig::default()).unwrap();
    assert_eq!(scorer.score_prompt(REFERENCE_PROMPT).unwrap(), 1.0);
    for s in &DEFAULT_SEED_PROMPTS[1..] {
        assert!(scorer.score_prompt(s).unwrap() < 1.0, "{s}");
    }
    assert_eq!(DEFAULT_SEED_PROMPTS[0], REFERENCE_PROMPT);

    // start without the steering prompt: IPO has to keep a lesser seed
    let out = ipo_loop(&seeds()[1..], &mut MockGenerator::new(42), &scorer, &GeneratorConfig::default(), 5).unwrap();
    assert!(out.best.score.unwrap() < 1.0);
    // with it among the seeds, it wins
    let out = ipo_loop(&seeds(), &mut MockGenerator::new(42), &scorer, &GeneratorConfig::default(), 5).unwrap();
    assert_eq!(out.best.text, REFERENCE_PROMPT);
    assert_eq!(out.best.score, Some(1.0));
}

#[test]
fn prompt_blind_lm_scores_all_prompts_equally() {
    let f = fixture();
    let cfg = ToyLmConfig {
        use_prompt: false,
        ..ToyLmConfig::default()
    };
    let lm = ToyConditionalLM::new(Vocab::default_captions(), cfg).unwrap();
    let val = encode_split(&f.data, &f.params, &f.ecfg, Split::Val).unwrap();
    let refs = reference_captions(&lm, &contexts(&val, &f.projector, true).unwrap(), 16).unwrap();
    let scorer = PipelineScorer::new(&lm, contexts(&val, &f.projector, false).unwrap(), refs, DecodeConfig::default()).unwrap();
    let scores: Vec<f64> = DEFAULT_SEED_PROMPTS.iter().map(|p| scorer.score_prompt(p).unwrap()).collect();
    assert!(scores.iter().all(|&s| s == scores[0]), "{scores:?}");
}

#[test]
fn empty_validation_set_is_rejected() {
    let lm = ToyConditionalLM::new(Vocab::default_captions(), ToyLmConfig::default()).unwrap();
    let err = PipelineScorer::new(&lm, vec![], vec![], DecodeConfig::default()).err().unwrap();
    assert_eq!(err, Error::EmptyCorpus);
}

#[test]
fn decode_failure_names_the_sample() {
    let lm = ToyConditionalLM::new(Vocab::default_captions(), ToyLmConfig::default()).unwrap();
    let good = Matrix::zeros(2, 16);
    let ctxs = vec![good.clone(), good.clone(), Matrix::zeros(2, 3)];
    let refs = vec![vec!["a dog".to_string()]; 3];
    let scorer = PipelineScorer::new(&lm, ctxs, refs, DecodeConfig::default()).unwrap();
    match scorer.score_prompt(REFERENCE_PROMPT).unwrap_err() {
        Error::Scoring { sample, .. } => assert_eq!(sample, 2),
        other => panic!("unexpected {other}"),
    }
    assert_eq!(scorer.score_prompt("no marker").unwrap_err().kind(), "invalid-input");
}

#[test]
fn subject_reports_cover_every_subject() {
    let f = fixture();
    let lm = ToyConditionalLM::new(Vocab::default_captions(), ToyLmConfig::default()).unwrap();
    let test = encode_split(&f.data, &f.params, &f.ecfg, Split::Test).unwrap();
    let refs = reference_captions(&lm, &contexts(&test, &f.projector, true).unwrap(), 16).unwrap();
    let scorer = PipelineScorer::new(&lm, contexts(&test, &f.projector, false).unwrap(), refs.clone(), DecodeConfig::default()).unwrap();
    let caps = scorer.captions(REFERENCE_PROMPT).unwrap();
    let rows = subject_reports(&test, &caps, &refs).unwrap();
    let ids: Vec<&str> = rows.iter().map(|(id, _)| id.as_str()).collect();
    assert_eq!(ids, ["subj01", "subj02", "subj03", "subj04"]);
    assert!(subject_reports(&test, &caps[1..], &refs).is_err());
}

/// A model that only emits the words of whichever caption the prompt names.
struct PromptEcho {
    vocab: Vocab,
}

impl ConditionalLM for PromptEcho {
    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn next_logprobs(&self, _: &Matrix, prompt: &[TokenId], generated: &[TokenId]) -> Result<Vec<f64>> {
        let words: Vec<TokenId> = prompt.iter().copied().filter(|&t| (t as usize) < self.vocab.len()).collect();
        let next = words.get(generated.len()).copied().unwrap_or(self.vocab.eos());
        let mut lp = vec![-50.0; self.vocab.len()];
        lp[next as usize] = 0.0;
        let m = lp.iter().map(|x: &f64| x.exp()).sum::<f64>().ln();
        Ok(lp.into_iter().map(|x| x - m).collect())
    }
}

#[test]
fn scorer_rewards_the_prompt_that_names_the_reference() {
    let lm = PromptEcho {
        vocab: Vocab::default_captions(),
    };
    let ctxs = vec![Matrix::zeros(1, 1); 2];
    let refs = vec![vec!["a man riding a bike".to_string()]; 2];
    let scorer = PipelineScorer::new(&lm, ctxs, refs, DecodeConfig::default()).unwrap();
    let exact = scorer.score_prompt("a man riding a bike <image>").unwrap();
    let partial = scorer.score_prompt("a man riding a red bike <image>").unwrap();
    assert_eq!(exact, 1.0);
    assert!(partial < exact);
}
