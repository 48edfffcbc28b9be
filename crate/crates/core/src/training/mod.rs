//! Two-stage training of the encoder on multi-subject data.

mod optim;
mod synth;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use optim::{adamw_step, adamw_update, one_cycle_lr, AdamWConfig, OptimizerState};
pub use synth::{generate_synthetic_dataset, validation_count, Dataset, Sample, SubjectData, SyntheticDatasetSpec};

use crate::encoder::{alignment_loss, encode, subject_loss_and_grad, EncoderConfig, EncoderParams, SampleRef, SubjectBatch};
use crate::rng::{self, derived};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Leading epochs of stage 1 that run with dropout enabled.
    pub warmup_dropout_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.stage, 1 | 2) {
            return Err(Error::InvalidInput(format!("stage must be 1 or 2, got {}", self.stage)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidInput("epochs and batch_size must be >= 1".into()));
        }
        if !self.max_lr.is_finite() || self.max_lr < 0.0 {
            return Err(Error::InvalidInput(format!("max_lr must be finite and >= 0, got {}", self.max_lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !self.weight_decay.is_finite() {
            return Err(Error::InvalidInput("weight_decay must be finite".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    fn dropout_active(&self, epoch: usize) -> bool {
        self.stage == 1 && epoch < self.warmup_dropout_epochs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }

    /// Stage 1 and stage 2 configurations.
    pub fn stages(self, seed: u64) -> (TrainConfig, TrainConfig) {
        let base = |stage, epochs, batch_size, max_lr, warmup| TrainConfig {
            stage,
            epochs,
            batch_size,
            max_lr,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            warmup_dropout_epochs: warmup,
            seed,
        };
        match self {
            Preset::Desk => (base(1, 40, 8, 1e-2, 3), base(2, 30, 8, 3e-3, 0)),
            Preset::Paper => (base(1, 180, 32, 3e-4, 3), base(2, 200, 32, 1e-4, 0)),
        }
    }
}

impl core::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::InvalidInput(format!("unknown preset `{other}` (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 is the state before any update.
    pub epoch: usize,
    pub stage: u8,
    pub train_mse: f64,
    /// Ordered like the dataset's subjects.
    pub val_mse: Vec<f64>,
    pub macro_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub stage: u8,
    pub epoch: usize,
    pub macro_val_mse: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageResult {
    pub best: Checkpoint,
    pub last: EncoderParams,
    pub curve: Vec<EpochRecord>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// Encoder input for one sample of a subject.
pub fn batch_for<'a>(subject: &'a SubjectData, signals: &'a [f64]) -> SubjectBatch<'a> {
    SubjectBatch {
        coords: &subject.coords,
        signals,
        memberships: &subject.memberships,
    }
}

/// Mean alignment loss over a sample set, dropout off.
pub fn evaluate_mse(subject: &SubjectData, samples: &[Sample], params: &EncoderParams, cfg: &EncoderConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidInput(format!("subject {} has no samples to evaluate", subject.id)));
    }
    let mut total = 0.0;
    for s in samples {
        let z = encode(&batch_for(subject, &s.signals), params, cfg, None)?;
        total += alignment_loss(&z, &s.target)?;
    }
    Ok(total / samples.len() as f64)
}

/// Per-subject and macro-averaged validation MSE.
pub fn validation_losses(data: &Dataset, params: &EncoderParams, cfg: &EncoderConfig) -> Result<(Vec<f64>, f64)> {
    let per: Vec<f64> = data
        .subjects
        .iter()
        .map(|s| evaluate_mse(s, &s.val, params, cfg))
        .collect::<Result<_>>()?;
    let order = canonical_order(data);
    let macro_avg = mean(order.iter().map(|&i| per[i]));
    Ok((per, macro_avg))
}

/// Subject indices sorted by id, so results do not depend on input order.
fn canonical_order(data: &Dataset) -> Vec<usize> {
    let mut order: Vec<usize> = (0..data.subjects.len()).collect();
    order.sort_by(|&a, &b| data.subjects[a].id.cmp(&data.subjects[b].id));
    order
}

fn check_dataset(data: &Dataset, params: &EncoderParams, cfg: &EncoderConfig) -> Result<()> {
    if data.subjects.is_empty() {
        return Err(Error::InvalidInput("dataset has no subjects".into()));
    }
    params.check_against(cfg)?;
    if data.atlas_columns() != params.roi_tables.iter().map(|t| t.rows()).collect::<Vec<_>>() {
        return Err(Error::InvalidInput("dataset label spaces do not match the encoder ROI tables".into()));
    }
    for s in &data.subjects {
        if s.train.is_empty() || s.val.is_empty() {
            return Err(Error::InvalidInput(format!("subject {} needs training and validation samples", s.id)));
        }
        for sample in s.train.iter().chain(&s.val) {
            if sample.target.0.shape() != (cfg.n_tokens, cfg.d_out) {
                return Err(Error::shape(
                    "training target",
                    format!("{:?}", (cfg.n_tokens, cfg.d_out)),
                    format!("{:?}", sample.target.0.shape()),
                ));
            }
        }
    }
    Ok(())
}

/// Run one training stage from `init`.
///
/// Batches hold samples of a single subject; their order is reshuffled every
/// epoch. The best checkpoint is the epoch (from 1) with the lowest
/// macro-average validation MSE, ties resolved to the earliest epoch.
pub fn run_stage(
    tcfg: &TrainConfig,
    ecfg: &EncoderConfig,
    data: &Dataset,
    init: EncoderParams,
) -> Result<StageResult> {
    tcfg.validate()?;
    ecfg.validate()?;
    check_dataset(data, &init, ecfg)?;
    let order = canonical_order(data);
    let mut params = init;
    let mut state = OptimizerState::new(&params);
    let adamw = tcfg.adamw();

    let batches_per_epoch: usize = data.subjects.iter().map(|s| s.train.len().div_ceil(tcfg.batch_size)).sum();
    let total_steps = batches_per_epoch * tcfg.epochs;
    let stage_stream = u64::from(tcfg.stage) << 32;
    let mut shuffle_rng = derived(tcfg.seed, stage_stream | 1);
    let mut dropout_rng = derived(tcfg.seed, stage_stream | 2);

    let initial_train = mean(order.iter().map(|&i| {
        let s = &data.subjects[i];
        evaluate_mse(s, &s.train, &params, ecfg).unwrap_or(f64::NAN)
    }));
    let (val, macro_val) = validation_losses(data, &params, ecfg)?;
    let mut curve = alloc::vec![EpochRecord {
        epoch: 0,
        stage: tcfg.stage,
        train_mse: initial_train,
        val_mse: val,
        macro_val_mse: macro_val,
    }];
    let mut best: Option<Checkpoint> = None;
    let mut step = 0;

    for epoch in 0..tcfg.epochs {
        let mut batches: Vec<(usize, Vec<usize>)> = Vec::with_capacity(batches_per_epoch);
        for &s in &order {
            let mut idx: Vec<usize> = (0..data.subjects[s].train.len()).collect();
            rng::shuffle(&mut shuffle_rng, &mut idx);
            batches.extend(idx.chunks(tcfg.batch_size).map(|c| (s, c.to_vec())));
        }
        rng::shuffle(&mut shuffle_rng, &mut batches);

        let dropout = tcfg.dropout_active(epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for (s, idx) in &batches {
            let subject = &data.subjects[*s];
            let samples: Vec<SampleRef<'_>> = idx
                .iter()
                .map(|&i| SampleRef {
                    signals: &subject.train[i].signals,
                    target: &subject.train[i].target,
                })
                .collect();
            let mut grad = params.zeros_like();
            let loss = subject_loss_and_grad(
                &subject.coords,
                &subject.memberships,
                &samples,
                &params,
                ecfg,
                &mut grad,
                dropout.then_some(&mut dropout_rng),
            )?;
            let inv = 1.0 / samples.len() as f64;
            for (_, g) in grad.tensors_mut() {
                g.scale(inv);
            }
            let lr = one_cycle_lr(step, total_steps, tcfg.max_lr)?;
            adamw_step(&mut params, &grad, &mut state, lr, &adamw)?;
            step += 1;
            epoch_loss += loss;
            epoch_samples += samples.len();
        }
        params.check_finite()?;

        let (val, macro_val) = validation_losses(data, &params, ecfg)?;
        if best.as_ref().is_none_or(|b| macro_val < b.macro_val_mse) {
            best = Some(Checkpoint {
                params: params.clone(),
                stage: tcfg.stage,
                epoch: epoch + 1,
                macro_val_mse: macro_val,
            });
        }
        curve.push(EpochRecord {
            epoch: epoch + 1,
            stage: tcfg.stage,
            train_mse: epoch_loss / epoch_samples as f64,
            val_mse: val,
            macro_val_mse: macro_val,
        });
    }
    Ok(StageResult {
        best: best.expect("epochs >= 1"),
        last: params,
        curve,
    })
}
