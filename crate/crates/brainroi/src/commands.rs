//! Subcommand implementations. Each returns a short human-readable summary;
//! artifacts are written under the configured paths.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use brainroi_core::atlas::{
    build_global_label_space, build_membership_matrix, extract_mask_voxels, resample_nearest, LabelVolume, SubjectMask,
    VoxelIndexList,
};
use brainroi_core::decoding::{
    generate_captions, run_ablation_grid, ConditionalLM, Projector, ToyConditionalLM, Vocab, LENGTH_NORMALIZATION,
};
use brainroi_core::encoder::EncoderParams;
use brainroi_core::ipo::{ipo_loop, IPOTrace, MockGenerator, PromptGenerator, SkippedIteration, DuplicatePrompt, PromptCandidate};
use brainroi_core::metrics::{evaluate_corpus, format_metric_table, format_table, CorpusEval, TOKENIZER_VERSION};
use brainroi_core::pipeline::{contexts, encode_split, reference_captions, subject_reports, PipelineScorer, Split};
use brainroi_core::training::{generate_synthetic_dataset, run_stage, Dataset, StageResult};
use serde::Serialize;

use crate::config::{Backend, RunConfig};
use crate::error::{CliError, CliResult};
use crate::formats::{
    decode_checkpoint, decode_label_volume, decode_mask, encode_checkpoint, encode_label_volume, encode_mask,
    encode_membership, encode_voxels, jsonl, loss_csv, read_with, sha256_hex, write_outputs, CheckpointHeader,
    RunStamp,
};
use crate::http::HttpGenerator;

pub const BEST_PROMPT_FILE: &str = "best_prompt.txt";

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("reports serialize");
    v.push(b'\n');
    v
}

fn file_stem(path: &Path) -> CliResult<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.split('.').next())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .ok_or_else(|| CliError::format(path, "cannot derive an identifier from the file name"))
}

pub fn print_config(cfg: &RunConfig) -> String {
    format!("{}\n", cfg.to_json())
}

/// Write the synthetic template atlases and subject masks as grid volumes.
fn write_synthetic_volumes(cfg: &RunConfig, stamp: &RunStamp) -> CliResult<(Vec<PathBuf>, Vec<PathBuf>)> {
    let data = generate_synthetic_dataset(&cfg.data)?;
    let dir = cfg.paths.dataset.join("volumes");
    let mut files = Vec::new();
    let mut atlases = Vec::new();
    for (a, t) in data.templates.iter().enumerate() {
        let name = format!("atlases/atlas{a}.gridvol");
        files.push((name.clone(), encode_label_volume(t, Some(stamp)).map_err(|r| CliError::format(dir.join(&name), r))?));
        atlases.push(dir.join(name));
    }
    let mut masks = Vec::new();
    for s in &data.subjects {
        let mut member = vec![false; s.grid.len()];
        for &c in s.voxels.coords() {
            member[s.grid.linear_index(c)] = true;
        }
        let mask = SubjectMask::new(s.grid, member)?;
        let name = format!("masks/{}.gridvol", s.id);
        files.push((name.clone(), encode_mask(&mask, Some(stamp))));
        masks.push(dir.join(name));
    }
    write_outputs(&dir, "volumes", stamp, &files)?;
    Ok((atlases, masks))
}

/// Resample every atlas onto every subject's grid and write voxel-index and
/// membership files. Without explicit inputs the synthetic volumes are
/// written first and used.
pub fn atlas_build(cfg: &RunConfig, atlases: &[PathBuf], masks: &[PathBuf]) -> CliResult<String> {
    let stamp = cfg.stamp();
    let (atlases, masks) = match (atlases.is_empty(), masks.is_empty()) {
        (true, true) => write_synthetic_volumes(cfg, &stamp)?,
        (false, false) => (atlases.to_vec(), masks.to_vec()),
        _ => return Err(CliError::Config("--atlas and --mask must be given together".into())),
    };
    let atlas_vols: Vec<(String, LabelVolume)> = atlases
        .iter()
        .map(|p| Ok((file_stem(p)?, read_with(p, decode_label_volume)?)))
        .collect::<CliResult<_>>()?;
    let mut subjects: Vec<(String, SubjectMask, VoxelIndexList, Vec<LabelVolume>)> = Vec::new();
    for p in &masks {
        let mask = read_with(p, decode_mask)?;
        let voxels = extract_mask_voxels(&mask).map_err(|source| CliError::InFile { path: p.clone(), source })?;
        let resampled = atlas_vols
            .iter()
            .map(|(_, v)| resample_nearest(v, &mask.grid))
            .collect::<brainroi_core::Result<Vec<_>>>()?;
        subjects.push((file_stem(p)?, mask, voxels, resampled));
    }
    let ids: BTreeSet<&str> = subjects.iter().map(|s| s.0.as_str()).collect();
    if ids.len() != subjects.len() {
        return Err(CliError::Config("mask file names must be distinct subject ids".into()));
    }

    let mut files = Vec::new();
    for (a, (atlas_id, _)) in atlas_vols.iter().enumerate() {
        let sets = subjects
            .iter()
            .map(|(_, _, vox, vols)| vols[a].labels_within(vox))
            .collect::<brainroi_core::Result<Vec<_>>>()?;
        let space = build_global_label_space(atlas_id, &sets)?;
        for (id, _, vox, vols) in &subjects {
            let m = build_membership_matrix(&vols[a], vox, &space)?;
            files.push((format!("{id}/{atlas_id}.memb"), encode_membership(&m, &space, Some(&stamp))));
        }
    }
    for (id, _, vox, _) in &subjects {
        let bytes = encode_voxels(vox.coords(), Some(&stamp)).map_err(|r| CliError::format(id, r))?;
        files.push((format!("{id}/voxels.vidx"), bytes));
    }
    files.sort_by(|a, b| a.0.cmp(&b.0));
    write_outputs(&cfg.paths.dataset, "atlas-build", &stamp, &files)?;
    Ok(format!(
        "atlas-build: {} subjects x {} atlases -> {}\n",
        subjects.len(),
        atlas_vols.len(),
        cfg.paths.dataset.display()
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageChoice {
    One,
    Two,
    Both,
}

pub fn checkpoint_path(cfg: &RunConfig, stage: u8) -> PathBuf {
    cfg.paths.checkpoints.join(format!("stage{stage}.ckpt"))
}

pub fn load_checkpoint(cfg: &RunConfig, stage: u8) -> CliResult<(CheckpointHeader, EncoderParams)> {
    let path = checkpoint_path(cfg, stage);
    if !path.exists() {
        return Err(CliError::Missing {
            what: if stage == 1 { "stage-1 checkpoint" } else { "stage-2 checkpoint" },
            path,
            hint: "run `brainroi train` first",
        });
    }
    read_with(&path, decode_checkpoint)
}

#[derive(Serialize)]
struct StageMeta<'a> {
    config_hash: &'a str,
    seed: u64,
    preset: &'a str,
    train: &'a brainroi_core::training::TrainConfig,
    initial_macro_val_mse: f64,
    best_epoch: usize,
    best_macro_val_mse: f64,
    final_macro_val_mse: f64,
}

fn save_stage(
    cfg: &RunConfig,
    stamp: &RunStamp,
    data: &Dataset,
    tcfg: &brainroi_core::training::TrainConfig,
    result: &StageResult,
) -> CliResult<String> {
    let stage = tcfg.stage;
    let header = CheckpointHeader {
        magic: String::new(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        stage,
        epoch: result.best.epoch,
        macro_val_mse: result.best.macro_val_mse,
        encoder: cfg.encoder.clone(),
        atlas_columns: data.atlas_columns(),
        tensors: Vec::new(),
    };
    let ids: Vec<String> = data.subjects.iter().map(|s| s.id.clone()).collect();
    let initial = result.curve[0].macro_val_mse;
    let last = result.curve.last().expect("curve holds epoch 0").macro_val_mse;
    let meta = StageMeta {
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        preset: cfg.preset.as_str(),
        train: tcfg,
        initial_macro_val_mse: initial,
        best_epoch: result.best.epoch,
        best_macro_val_mse: result.best.macro_val_mse,
        final_macro_val_mse: last,
    };
    let files = vec![
        (format!("stage{stage}.ckpt"), encode_checkpoint(&header, &result.best.params)),
        (format!("loss_stage{stage}.csv"), loss_csv(&result.curve, &ids).into_bytes()),
        (format!("stage{stage}.meta.json"), json_bytes(&meta)),
    ];
    write_outputs(&cfg.paths.checkpoints, &format!("train-stage{stage}"), stamp, &files)?;
    Ok(format!(
        "stage {stage}: best epoch {} of {}, macro val MSE {:.6e} (initial {:.6e})\n",
        result.best.epoch, tcfg.epochs, result.best.macro_val_mse, initial
    ))
}

/// Run stage 1, stage 2 (from the saved stage-1 checkpoint) or both.
pub fn train(cfg: &RunConfig, which: StageChoice) -> CliResult<String> {
    let stamp = cfg.stamp();
    let (s1, s2) = cfg.stages();
    let mut summary = String::new();
    // check the prerequisite before paying for data generation
    if which == StageChoice::Two {
        load_checkpoint(cfg, 1)?;
    }
    let data = generate_synthetic_dataset(&cfg.data)?;
    if which != StageChoice::Two {
        let init = EncoderParams::init(&cfg.encoder, &data.atlas_columns(), cfg.seed)?;
        let r = run_stage(&s1, &cfg.encoder, &data, init)?;
        summary += &save_stage(cfg, &stamp, &data, &s1, &r)?;
    }
    if which != StageChoice::One {
        let (_, init) = load_checkpoint(cfg, 1)?;
        let r = run_stage(&s2, &cfg.encoder, &data, init)?;
        summary += &save_stage(cfg, &stamp, &data, &s2, &r)?;
    }
    Ok(summary)
}

/// Everything the captioning stage needs.
struct Stage3 {
    data: Dataset,
    params: EncoderParams,
    lm: ToyConditionalLM,
    projector: Projector,
}

fn stage3(cfg: &RunConfig) -> CliResult<Stage3> {
    let (_, params) = load_checkpoint(cfg, 2)?;
    let data = generate_synthetic_dataset(&cfg.data)?;
    let lm = ToyConditionalLM::new(Vocab::default_captions(), cfg.lm)?;
    let projector = Projector::random(cfg.encoder.d_out, cfg.lm.ctx_dim, cfg.projector_seed);
    Ok(Stage3 {
        data,
        params,
        lm,
        projector,
    })
}

#[derive(Serialize)]
struct IpoMeta<'a> {
    config_hash: &'a str,
    seed: u64,
    backend: Backend,
    endpoint: Option<&'a str>,
    generator: &'a brainroi_core::ipo::GeneratorConfig,
    pool_capacity: usize,
    validation_samples: usize,
    best: &'a PromptCandidate,
    best_per_iteration: &'a [f64],
    skipped: &'a [SkippedIteration],
    duplicates: &'a [DuplicatePrompt],
    final_pool: Vec<String>,
    trace_sha256: String,
}

/// Optimize the prompt on the validation split.
pub fn ipo(cfg: &RunConfig) -> CliResult<String> {
    let stamp = cfg.stamp();
    let s = stage3(cfg)?;
    let val = encode_split(&s.data, &s.params, &cfg.encoder, Split::Val)?;
    let refs = reference_captions(&s.lm, &contexts(&val, &s.projector, true)?, cfg.decode.max_new_tokens)?;
    let scorer = PipelineScorer::new(&s.lm, contexts(&val, &s.projector, false)?, refs, cfg.decode)?;
    let mut generator: Box<dyn PromptGenerator> = match cfg.ipo.backend {
        Backend::Mock => Box::new(MockGenerator::new(cfg.seed)),
        Backend::Http => Box::new(HttpGenerator::new(
            cfg.ipo.endpoint.clone().unwrap_or_default(),
            cfg.ipo.instruction.clone(),
            Duration::from_millis(cfg.ipo.timeout_ms),
        )),
    };
    let out = ipo_loop(&cfg.ipo.seeds, generator.as_mut(), &scorer, &cfg.ipo.generator, cfg.ipo.pool_capacity)?;
    let trace = jsonl(&out.trace.records).into_bytes();
    let meta = ipo_meta(cfg, &stamp, &out.trace, &out.best, out.pool.texts(), val.len(), &trace);
    let files = vec![
        ("ipo_trace.jsonl".to_string(), trace),
        (BEST_PROMPT_FILE.to_string(), format!("{}\n", out.best.text).into_bytes()),
        ("ipo_meta.json".to_string(), json_bytes(&meta)),
    ];
    write_outputs(&cfg.paths.traces, "ipo", &stamp, &files)?;
    let mut summary = format!(
        "ipo: best prompt {:?} (BLEU-4 {:.4}, iteration {})\n",
        out.best.text,
        out.best.score.unwrap_or(f64::NAN),
        out.best.iter_added
    );
    for sk in &out.trace.skipped {
        let _ = writeln!(summary, "ipo: iteration {} skipped: {}", sk.iteration, sk.message);
    }
    Ok(summary)
}

fn ipo_meta<'a>(
    cfg: &'a RunConfig,
    stamp: &'a RunStamp,
    trace: &'a IPOTrace,
    best: &'a PromptCandidate,
    final_pool: Vec<String>,
    validation_samples: usize,
    trace_bytes: &[u8],
) -> IpoMeta<'a> {
    IpoMeta {
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        backend: cfg.ipo.backend,
        endpoint: cfg.ipo.endpoint.as_deref(),
        generator: &cfg.ipo.generator,
        pool_capacity: cfg.ipo.pool_capacity,
        validation_samples,
        best,
        best_per_iteration: &trace.best_per_iteration,
        skipped: &trace.skipped,
        duplicates: &trace.duplicates,
        final_pool,
        trace_sha256: sha256_hex(trace_bytes),
    }
}

/// Explicit prompt, else the optimized prompt, else the first seed.
pub fn resolve_prompt(cfg: &RunConfig, explicit: Option<&str>) -> CliResult<String> {
    if let Some(p) = explicit {
        brainroi_core::ipo::validate_prompt(p)?;
        return Ok(p.to_string());
    }
    let best = cfg.paths.traces.join(BEST_PROMPT_FILE);
    if best.exists() {
        let text = String::from_utf8(crate::formats::read_file(&best)?)
            .map_err(|_| CliError::format(&best, "not UTF-8"))?;
        let text = text.trim_end_matches('\n').to_string();
        brainroi_core::ipo::validate_prompt(&text).map_err(|source| CliError::InFile { path: best, source })?;
        return Ok(text);
    }
    Ok(cfg.ipo.seeds[0].clone())
}

#[derive(Serialize)]
struct DecodeMeta<'a> {
    config_hash: &'a str,
    seed: u64,
    prompt: &'a str,
    split: Split,
    decode: &'a brainroi_core::decoding::DecodeConfig,
    length_normalization: &'static str,
    samples: usize,
    fallback_count: usize,
}

/// Caption one split with the configured decoder.
pub fn decode(cfg: &RunConfig, prompt: Option<&str>, split: Split) -> CliResult<String> {
    let stamp = cfg.stamp();
    let prompt = resolve_prompt(cfg, prompt)?;
    let s = stage3(cfg)?;
    let samples = encode_split(&s.data, &s.params, &cfg.encoder, split)?;
    let ids = s.lm.vocab().encode_prompt(&prompt)?;
    let gens = generate_captions(&s.lm, &contexts(&samples, &s.projector, false)?, &ids, &cfg.decode, "decode")?;
    let name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    let meta = DecodeMeta {
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        prompt: &prompt,
        split,
        decode: &cfg.decode,
        length_normalization: LENGTH_NORMALIZATION,
        samples: gens.len(),
        fallback_count: gens.iter().filter(|g| g.fallback_used).count(),
    };
    let files = vec![
        (format!("generations_{name}.jsonl"), jsonl(&gens).into_bytes()),
        (format!("decode_{name}.meta.json"), json_bytes(&meta)),
    ];
    write_outputs(&cfg.paths.reports, "decode", &stamp, &files)?;
    Ok(format!("decode: {} captions for the {name} split\n", gens.len()))
}

#[derive(Serialize)]
struct AblationEntry<'a> {
    name: &'a str,
    num_beams: usize,
    no_repeat_ngram_size: usize,
    length_penalty: f64,
    #[serde(flatten)]
    eval: CorpusEval,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    config_hash: &'a str,
    seed: u64,
    prompt: &'a str,
    split: Split,
    tokenizer_version: &'static str,
    length_normalization: &'static str,
    max_new_tokens: usize,
    ablation: Vec<AblationEntry<'a>>,
    subject_decode: &'a brainroi_core::decoding::DecodeConfig,
    subjects: Vec<(String, CorpusEval)>,
}

/// Ablation grid and per-subject metrics on the test split.
pub fn eval(cfg: &RunConfig, prompt: Option<&str>) -> CliResult<String> {
    let stamp = cfg.stamp();
    let prompt = resolve_prompt(cfg, prompt)?;
    let s = stage3(cfg)?;
    let test = encode_split(&s.data, &s.params, &cfg.encoder, Split::Test)?;
    let refs = reference_captions(&s.lm, &contexts(&test, &s.projector, true)?, cfg.decode.max_new_tokens)?;
    let ctxs = contexts(&test, &s.projector, false)?;
    let ids = s.lm.vocab().encode_prompt(&prompt)?;
    let grid = run_ablation_grid(&s.lm, &ctxs, &ids, &refs, cfg.decode.max_new_tokens)?;

    let subject_gens = generate_captions(&s.lm, &ctxs, &ids, &cfg.decode, "subjects")?;
    let captions: Vec<String> = subject_gens.iter().map(|g| g.text.clone()).collect();
    let subjects = subject_reports(&test, &captions, &refs)?;
    let overall = evaluate_corpus(&captions, &refs)?;

    let ablation_rows: Vec<(String, CorpusEval)> = grid.iter().map(|r| (r.setting.name.to_string(), r.eval)).collect();
    let mut subject_rows = subjects.clone();
    subject_rows.push(("Average".into(), overall));
    let generations: Vec<_> = grid.iter().flat_map(|r| r.generations.iter().cloned()).collect();
    let report = EvalReport {
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        prompt: &prompt,
        split: Split::Test,
        tokenizer_version: TOKENIZER_VERSION,
        length_normalization: LENGTH_NORMALIZATION,
        max_new_tokens: cfg.decode.max_new_tokens,
        ablation: grid
            .iter()
            .map(|r| AblationEntry {
                name: r.setting.name,
                num_beams: r.setting.num_beams,
                no_repeat_ngram_size: r.setting.no_repeat_ngram_size,
                length_penalty: r.setting.length_penalty,
                eval: r.eval,
            })
            .collect(),
        subject_decode: &cfg.decode,
        subjects: subject_rows.clone(),
    };
    let ablation_md = format_table("Method", &ablation_rows);
    let subjects_md = format_metric_table("Subject", &subject_rows, false);
    let files = vec![
        ("ablation.md".to_string(), ablation_md.clone().into_bytes()),
        ("subjects.md".to_string(), subjects_md.clone().into_bytes()),
        ("eval_report.json".to_string(), json_bytes(&report)),
        ("ablation_generations.jsonl".to_string(), jsonl(&generations).into_bytes()),
    ];
    write_outputs(&cfg.paths.reports, "eval", &stamp, &files)?;
    Ok(format!("{ablation_md}\n{subjects_md}"))
}
