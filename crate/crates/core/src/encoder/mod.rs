//! Soft-ROI cross-subject encoder.
//!
//! Voxels of any subject are turned into keys built from a Fourier-feature
//! coordinate code and per-atlas ROI embeddings (fused by concatenation, a
//! global atlas gate, or a voxel-wise atlas gate), values lifted from the
//! voxel signal, and a fixed set of learnable queries that cross-attend over
//! them. The output is always `L × D_out`, whatever the subject's voxel count.
//!
//! Forward passes keep their intermediates so that [`loss_and_grad`] can
//! return exact gradients for every parameter tensor.

mod attention;
mod keys;
mod params;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use params::{EncoderParams, Mlp, FROZEN_TENSORS};

use crate::atlas::{MembershipMatrix, VoxelGrid, VoxelIndexList};
use crate::rng::Rng;
use crate::{Error, Matrix, Result};
use attention::AttentionStage;
use keys::KeyStage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Concat,
    Gate,
    VoxelGate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Coordinate-code width; must equal `d_k`.
    pub d_c: usize,
    pub d_roi: usize,
    pub d_k: usize,
    pub d_v: usize,
    /// Reduction width inside the voxel-wise gate.
    pub d_red: usize,
    /// Number of output tokens `L`.
    pub n_tokens: usize,
    pub d_out: usize,
    pub n_rff: usize,
    pub rff_sigma: f64,
    pub coord_hidden: usize,
    pub gate_hidden: usize,
    /// Stacked cross-attention blocks.
    pub n_blocks: usize,
    pub fusion_mode: FusionMode,
    pub attn_dropout: f64,
    pub ffn_dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let d_roi = 16;
        EncoderConfig {
            d_c: 32,
            d_roi,
            d_k: 32,
            d_v: 32,
            d_red: default_reduction(d_roi),
            n_tokens: 8,
            d_out: 64,
            n_rff: 16,
            rff_sigma: 1.0,
            coord_hidden: 32,
            gate_hidden: 16,
            n_blocks: 1,
            fusion_mode: FusionMode::VoxelGate,
            attn_dropout: 0.5,
            ffn_dropout: 0.15,
        }
    }
}

/// `max(4, d_roi / 4)`
pub fn default_reduction(d_roi: usize) -> usize {
    (d_roi / 4).max(4)
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_c", self.d_c),
            ("d_roi", self.d_roi),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("d_red", self.d_red),
            ("n_tokens", self.n_tokens),
            ("d_out", self.d_out),
            ("n_rff", self.n_rff),
            ("coord_hidden", self.coord_hidden),
            ("gate_hidden", self.gate_hidden),
            ("n_blocks", self.n_blocks),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidInput(format!("encoder dimension `{name}` must be >= 1")));
        }
        if self.d_c != self.d_k {
            return Err(Error::InvalidInput(format!("d_c ({}) must equal d_k ({})", self.d_c, self.d_k)));
        }
        for (name, p) in [("attn_dropout", self.attn_dropout), ("ffn_dropout", self.ffn_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::InvalidInput(format!("{name} must lie in [0, 1), got {p}")));
            }
        }
        if self.rff_sigma.is_nan() || self.rff_sigma < 0.0 {
            return Err(Error::InvalidInput("rff_sigma must be non-negative".into()));
        }
        Ok(())
    }

    /// Width of the vector fed to the key projection.
    pub fn key_input_width(&self, n_atlases: usize) -> usize {
        match self.fusion_mode {
            FusionMode::Concat => self.d_c + n_atlases * self.d_roi,
            FusionMode::Gate | FusionMode::VoxelGate => self.d_c + self.d_roi,
        }
    }

    pub fn with_fusion(mut self, mode: FusionMode) -> Self {
        self.fusion_mode = mode;
        self
    }
}

/// One encoder input: a subject's voxels and one sample's activations.
#[derive(Debug, Clone, Copy)]
pub struct SubjectBatch<'a> {
    /// `N_s × 3`, normalized to `[−1, 1]`.
    pub coords: &'a Matrix,
    pub signals: &'a [f64],
    pub memberships: &'a [MembershipMatrix],
}

/// Fixed-length `L × D_out` token matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualTokens(pub Matrix);

impl VisualTokens {
    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Map grid indices affinely to `[−1, 1]` per axis; a length-1 axis maps to 0.
pub fn normalize_coords(voxels: &VoxelIndexList, grid: &VoxelGrid) -> Result<Matrix> {
    if voxels.is_empty() {
        return Err(Error::InvalidInput("no voxels to normalize".into()));
    }
    let mut out = Matrix::zeros(voxels.len(), 3);
    for (r, c) in voxels.coords().iter().enumerate() {
        for axis in 0..3 {
            let n = grid.dims[axis];
            if c[axis] >= n {
                return Err(Error::InvalidInput(format!("voxel {c:?} outside grid {:?}", grid.dims)));
            }
            let v = if n == 1 { 0.0 } else { 2.0 * c[axis] as f64 / (n - 1) as f64 - 1.0 };
            out.set(r, axis, v);
        }
    }
    Ok(out)
}

/// Coordinate code `C = MLP([sin 2πFp; cos 2πFp])`, `N × d_c`.
pub fn encode_coords(coords: &Matrix, params: &EncoderParams) -> Result<Matrix> {
    if coords.cols() != 3 {
        return Err(Error::shape("encode_coords", "N x 3", format!("{:?}", coords.shape())));
    }
    let (_, phi) = keys::fourier_features(coords, &params.rff_freqs);
    Ok(params.coord_mlp.forward(&phi))
}

/// `E^(a) = R^(a,s) W_a` via row lookup.
pub fn embed_roi(membership: &MembershipMatrix, table: &Matrix) -> Result<Matrix> {
    keys::embed(membership, table)
}

/// `K = [C; E^(1); …; E^(A)] W_k`
pub fn fuse_concat(coord_code: &Matrix, embeds: &[Matrix], key_proj: &Matrix) -> Result<Matrix> {
    let input = keys::concat_input(coord_code, embeds)?;
    if input.cols() != key_proj.rows() {
        return Err(Error::shape("fuse_concat", format!("W_k with {} rows", input.cols()), format!("{}", key_proj.rows())));
    }
    Ok(input.matmul(key_proj))
}

fn gated_keys(coord_code: &Matrix, fused: &Matrix, key_proj: &Matrix) -> Result<Matrix> {
    if coord_code.cols() + fused.cols() != key_proj.rows() {
        return Err(Error::shape(
            "gated fusion",
            format!("W_k with {} rows", coord_code.cols() + fused.cols()),
            format!("{}", key_proj.rows()),
        ));
    }
    Ok(Matrix::hconcat(&[coord_code, fused]).matmul(key_proj))
}

fn check_embeds(coord_code: &Matrix, embeds: &[Matrix], params: &EncoderParams) -> Result<()> {
    if embeds.is_empty() {
        return Err(Error::InvalidInput("at least one atlas embedding is required".into()));
    }
    if let Some(e) = embeds.iter().find(|e| e.rows() != coord_code.rows() || e.cols() != params.gate_mlp.w1.rows()) {
        return Err(Error::shape("fusion input", format!("{} x {}", coord_code.rows(), params.gate_mlp.w1.rows()), format!("{:?}", e.shape())));
    }
    Ok(())
}

/// Global atlas gate. Returns the keys and the `A` atlas weights.
pub fn fuse_gate(coord_code: &Matrix, embeds: &[Matrix], params: &EncoderParams) -> Result<(Matrix, Vec<f64>)> {
    check_embeds(coord_code, embeds, params)?;
    let (fused, alpha, _) = keys::gate_forward(embeds, params, None);
    Ok((gated_keys(coord_code, &fused, &params.key_proj)?, alpha))
}

/// Voxel-wise atlas gate. Returns the keys and the `N × A` weights.
pub fn fuse_voxel_gate(coord_code: &Matrix, embeds: &[Matrix], params: &EncoderParams) -> Result<(Matrix, Matrix)> {
    check_embeds(coord_code, embeds, params)?;
    let (fused, alpha, _, _) = keys::voxel_gate_forward(embeds, params, None);
    Ok((gated_keys(coord_code, &fused, &params.key_proj)?, alpha))
}

/// Affine lift `v_n = w_v x_n + b_v`, `N × d_v`.
pub fn project_values(signals: &[f64], params: &EncoderParams) -> Result<Matrix> {
    if let Some(i) = signals.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("signals[{i}]")));
    }
    Ok(attention::values(signals, params))
}

fn check_batch(batch: &SubjectBatch<'_>, params: &EncoderParams, cfg: &EncoderConfig) -> Result<()> {
    cfg.validate()?;
    params.check_against(cfg)?;
    if batch.coords.rows() == 0 {
        return Err(Error::InvalidInput("N_s = 0: subject has no voxels".into()));
    }
    if batch.signals.len() != batch.coords.rows() {
        return Err(Error::shape("signals", format!("{}", batch.coords.rows()), format!("{}", batch.signals.len())));
    }
    if let Some(i) = batch.signals.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("signals[{i}]")));
    }
    Ok(())
}

/// Full forward pass. Dropout is applied only when an RNG is supplied.
pub fn encode(
    batch: &SubjectBatch<'_>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    mut dropout: Option<&mut Rng>,
) -> Result<VisualTokens> {
    check_batch(batch, params, cfg)?;
    let stage = KeyStage::forward(batch.coords, batch.memberships, params, cfg, dropout.as_deref_mut())?;
    let attn = AttentionStage::forward(&stage.keys, batch.signals, params, cfg, dropout);
    Ok(VisualTokens(attn.tokens))
}

/// Mean squared error over all `L · D_out` entries.
pub fn alignment_loss(z_fmri: &VisualTokens, z_clip: &VisualTokens) -> Result<f64> {
    let (a, b) = (z_fmri.matrix(), z_clip.matrix());
    if a.shape() != b.shape() {
        return Err(Error::shape("alignment_loss", format!("{:?}", b.shape()), format!("{:?}", a.shape())));
    }
    let n = a.as_slice().len();
    if n == 0 {
        return Err(Error::InvalidInput("empty token matrices".into()));
    }
    let sum: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / n as f64)
}

/// Attention and gate weights of one forward pass, for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionReport {
    pub tokens: VisualTokens,
    /// Query × voxel attention of the first block.
    pub attention: Matrix,
    pub gate_alpha: Option<Vec<f64>>,
    pub voxel_alpha: Option<Matrix>,
}

pub fn inspect(batch: &SubjectBatch<'_>, params: &EncoderParams, cfg: &EncoderConfig) -> Result<FusionReport> {
    check_batch(batch, params, cfg)?;
    let stage = KeyStage::forward(batch.coords, batch.memberships, params, cfg, None)?;
    let attn = AttentionStage::forward(&stage.keys, batch.signals, params, cfg, None);
    let code = stage.coord_code();
    let embeds = batch
        .memberships
        .iter()
        .zip(&params.roi_tables)
        .map(|(m, t)| keys::embed(m, t))
        .collect::<Result<Vec<_>>>()?;
    let (gate_alpha, voxel_alpha) = match cfg.fusion_mode {
        FusionMode::Concat => (None, None),
        FusionMode::Gate => (Some(fuse_gate(code, &embeds, params)?.1), None),
        FusionMode::VoxelGate => (None, Some(fuse_voxel_gate(code, &embeds, params)?.1)),
    };
    Ok(FusionReport {
        tokens: VisualTokens(attn.tokens.clone()),
        attention: attn.attention(0).clone(),
        gate_alpha,
        voxel_alpha,
    })
}

/// One sample of a subject: its activations and alignment target.
#[derive(Debug, Clone, Copy)]
pub struct SampleRef<'a> {
    pub signals: &'a [f64],
    pub target: &'a VisualTokens,
}

/// Summed alignment loss and gradients over samples sharing one subject's
/// voxels. The key stage runs once per call, so dropout masks on the
/// coordinate and gating perceptrons are shared by those samples.
pub fn subject_loss_and_grad(
    coords: &Matrix,
    memberships: &[MembershipMatrix],
    samples: &[SampleRef<'_>],
    params: &EncoderParams,
    cfg: &EncoderConfig,
    grad: &mut EncoderParams,
    mut dropout: Option<&mut Rng>,
) -> Result<f64> {
    let stage = KeyStage::forward(coords, memberships, params, cfg, dropout.as_deref_mut())?;
    let mut d_keys = Matrix::zeros(stage.keys.rows(), stage.keys.cols());
    let mut total = 0.0;
    for sample in samples {
        let batch = SubjectBatch {
            coords,
            signals: sample.signals,
            memberships,
        };
        check_batch(&batch, params, cfg)?;
        let attn = AttentionStage::forward(&stage.keys, sample.signals, params, cfg, dropout.as_deref_mut());
        let target = sample.target.matrix();
        if attn.tokens.shape() != target.shape() {
            return Err(Error::shape("target tokens", format!("{:?}", attn.tokens.shape()), format!("{:?}", target.shape())));
        }
        let n = target.as_slice().len() as f64;
        let mut d_tokens = attn.tokens.clone();
        let mut loss = 0.0;
        for (d, t) in d_tokens.as_mut_slice().iter_mut().zip(target.as_slice()) {
            let diff = *d - t;
            loss += diff * diff;
            *d = 2.0 * diff / n;
        }
        total += loss / n;
        d_keys.add_assign(&attn.backward(&stage.keys, &d_tokens, params, cfg, grad));
    }
    stage.backward(&d_keys, params, cfg, grad);
    Ok(total)
}

/// Alignment loss and its exact gradient for every parameter tensor.
pub fn loss_and_grad(
    batch: &SubjectBatch<'_>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    z_clip: &VisualTokens,
    dropout: Option<&mut Rng>,
) -> Result<(f64, EncoderParams)> {
    check_batch(batch, params, cfg)?;
    let mut grad = params.zeros_like();
    let sample = SampleRef {
        signals: batch.signals,
        target: z_clip,
    };
    let loss = subject_loss_and_grad(batch.coords, batch.memberships, &[sample], params, cfg, &mut grad, dropout)?;
    Ok((loss, grad))
}

/// Gradient of the alignment loss with dropout disabled.
pub fn backward(
    batch: &SubjectBatch<'_>,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    z_clip: &VisualTokens,
) -> Result<EncoderParams> {
    loss_and_grad(batch, params, cfg, z_clip, None).map(|(_, g)| g)
}
