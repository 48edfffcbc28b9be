//! Subject-level half of the encoder: everything that depends only on voxel
//! positions and ROI memberships, ending in the attention keys `K`.

use alloc::format;
use alloc::vec::Vec;
use core::f64::consts::TAU;

use super::params::{EncoderParams, MlpCache};
use super::{EncoderConfig, FusionMode};
use crate::atlas::MembershipMatrix;
use crate::rng::Rng;
use crate::tensor::{dot, softmax_in_place};
use crate::{Error, Matrix, Result};

pub(crate) enum FusionCache {
    Concat,
    Gate {
        gate: MlpCache,
        alpha: Vec<f64>,
    },
    VoxelGate {
        gate: MlpCache,
        reduce_input: Matrix,
        /// `N × A` voxel-wise atlas weights.
        alpha: Matrix,
    },
}

pub(crate) struct KeyStage {
    coords: Matrix,
    theta: Matrix,
    coord_cache: MlpCache,
    coord_code: Matrix,
    embeds: Vec<Matrix>,
    columns: Vec<Vec<i32>>,
    fusion: FusionCache,
    fused_input: Matrix,
    pub keys: Matrix,
}

/// `[sin(2πFp); cos(2πFp)]` rows for every coordinate. Returns `(θ, φ)`.
pub(crate) fn fourier_features(coords: &Matrix, freqs: &Matrix) -> (Matrix, Matrix) {
    let mut theta = coords.matmul_t(freqs);
    theta.scale(TAU);
    let n_rff = freqs.rows();
    let phi = Matrix::from_fn(theta.rows(), 2 * n_rff, |r, c| {
        if c < n_rff {
            libm::sin(theta.get(r, c))
        } else {
            libm::cos(theta.get(r, c - n_rff))
        }
    });
    (theta, phi)
}

pub(crate) fn embed(membership: &MembershipMatrix, table: &Matrix) -> Result<Matrix> {
    if membership.cols() != table.rows() {
        return Err(Error::shape(
            "embed_roi",
            format!("table with {} rows", membership.cols()),
            format!("{} rows", table.rows()),
        ));
    }
    let mut out = Matrix::zeros(membership.rows(), table.cols());
    for r in 0..membership.rows() {
        if let Some(c) = membership.column(r) {
            out.row_mut(r).copy_from_slice(table.row(c));
        }
    }
    Ok(out)
}

fn check_rows(c: &Matrix, embeds: &[Matrix]) -> Result<()> {
    if embeds.is_empty() {
        return Err(Error::InvalidInput("at least one atlas embedding is required".into()));
    }
    if let Some(e) = embeds.iter().find(|e| e.rows() != c.rows()) {
        return Err(Error::shape("fusion", format!("{} rows", c.rows()), format!("{}", e.rows())));
    }
    Ok(())
}

/// Concatenate `C` with every `E^(a)`.
pub(crate) fn concat_input(c: &Matrix, embeds: &[Matrix]) -> Result<Matrix> {
    check_rows(c, embeds)?;
    let mut blocks = Vec::with_capacity(embeds.len() + 1);
    blocks.push(c);
    blocks.extend(embeds.iter());
    Ok(Matrix::hconcat(&blocks))
}

/// Global atlas weights from mean-pooled embeddings.
pub(crate) fn gate_forward(
    embeds: &[Matrix],
    params: &EncoderParams,
    dropout: Option<(f64, &mut Rng)>,
) -> (Matrix, Vec<f64>, MlpCache) {
    let n = embeds[0].rows();
    let d_roi = embeds[0].cols();
    let mut summaries = Matrix::zeros(embeds.len(), d_roi);
    for (a, e) in embeds.iter().enumerate() {
        let mean = e.col_sums();
        for (s, m) in summaries.row_mut(a).iter_mut().zip(mean.as_slice()) {
            *s = m / n as f64;
        }
    }
    let (scores, cache) = params.gate_mlp.forward_cached(summaries, dropout);
    let mut alpha: Vec<f64> = scores.as_slice().to_vec();
    softmax_in_place(&mut alpha);
    let mut fused = Matrix::zeros(n, d_roi);
    for (e, &w) in embeds.iter().zip(&alpha) {
        for (f, v) in fused.as_mut_slice().iter_mut().zip(e.as_slice()) {
            *f += w * v;
        }
    }
    (fused, alpha, cache)
}

/// Per-voxel atlas weights from reduced embeddings.
pub(crate) fn voxel_gate_forward(
    embeds: &[Matrix],
    params: &EncoderParams,
    dropout: Option<(f64, &mut Rng)>,
) -> (Matrix, Matrix, Matrix, MlpCache) {
    let n = embeds[0].rows();
    let d_roi = embeds[0].cols();
    let n_atlas = embeds.len();
    // row n·A + a holds E_n^(a)
    let stacked = Matrix::from_fn(n * n_atlas, d_roi, |r, c| embeds[r % n_atlas].get(r / n_atlas, c));
    let mut reduced = stacked.matmul(&params.vg_reduce_w);
    reduced.add_row_broadcast(&params.vg_reduce_b);
    let (scores, cache) = params.vg_gate.forward_cached(reduced, dropout);
    let mut alpha = Matrix::from_vec(n, n_atlas, scores.into_vec()).expect("N·A scores");
    for r in 0..n {
        softmax_in_place(alpha.row_mut(r));
    }
    let mut fused = Matrix::zeros(n, d_roi);
    for r in 0..n {
        for (a, e) in embeds.iter().enumerate() {
            let w = alpha.get(r, a);
            for (f, v) in fused.row_mut(r).iter_mut().zip(e.row(r)) {
                *f += w * v;
            }
        }
    }
    (fused, alpha, stacked, cache)
}

impl KeyStage {
    pub(crate) fn forward(
        coords: &Matrix,
        memberships: &[MembershipMatrix],
        params: &EncoderParams,
        cfg: &EncoderConfig,
        mut rng: Option<&mut Rng>,
    ) -> Result<Self> {
        if coords.cols() != 3 {
            return Err(Error::shape("coords", "N x 3", format!("{:?}", coords.shape())));
        }
        if coords.rows() == 0 {
            return Err(Error::InvalidInput("subject has no voxels".into()));
        }
        if memberships.len() != params.n_atlases() {
            return Err(Error::shape("memberships", format!("{} atlases", params.n_atlases()), format!("{}", memberships.len())));
        }
        if let Some(m) = memberships.iter().find(|m| m.rows() != coords.rows()) {
            return Err(Error::shape("membership rows", format!("{}", coords.rows()), format!("{}", m.rows())));
        }
        let ffn_p = cfg.ffn_dropout;
        let (theta, phi) = fourier_features(coords, &params.rff_freqs);
        let (coord_code, coord_cache) = params
            .coord_mlp
            .forward_cached(phi, rng.as_deref_mut().map(|r| (ffn_p, r)));
        let embeds = memberships
            .iter()
            .zip(&params.roi_tables)
            .map(|(m, t)| embed(m, t))
            .collect::<Result<Vec<_>>>()?;
        let (fusion, fused_input) = match cfg.fusion_mode {
            FusionMode::Concat => (FusionCache::Concat, concat_input(&coord_code, &embeds)?),
            FusionMode::Gate => {
                let (fused, alpha, gate) = gate_forward(&embeds, params, rng.as_deref_mut().map(|r| (ffn_p, r)));
                (FusionCache::Gate { gate, alpha }, Matrix::hconcat(&[&coord_code, &fused]))
            }
            FusionMode::VoxelGate => {
                let (fused, alpha, reduce_input, gate) =
                    voxel_gate_forward(&embeds, params, rng.map(|r| (ffn_p, r)));
                (
                    FusionCache::VoxelGate { gate, reduce_input, alpha },
                    Matrix::hconcat(&[&coord_code, &fused]),
                )
            }
        };
        let keys = fused_input.matmul(&params.key_proj);
        Ok(KeyStage {
            coords: coords.clone(),
            theta,
            coord_cache,
            coord_code,
            embeds,
            columns: memberships.iter().map(|m| m.column_indices().to_vec()).collect(),
            fusion,
            fused_input,
            keys,
        })
    }

    /// Backpropagate `dK` into `grad`.
    pub(crate) fn backward(&self, d_keys: &Matrix, params: &EncoderParams, cfg: &EncoderConfig, grad: &mut EncoderParams) {
        grad.key_proj.add_assign(&self.fused_input.t_matmul(d_keys));
        let d_input = d_keys.matmul_t(&params.key_proj);
        let d_c = cfg.d_c;
        let d_roi = cfg.d_roi;
        let n = self.coords.rows();
        let n_atlas = self.embeds.len();
        let d_code = d_input.col_slice(0, d_c);

        let mut d_embeds: Vec<Matrix> = match &self.fusion {
            FusionCache::Concat => (0..n_atlas).map(|a| d_input.col_slice(d_c + a * d_roi, d_roi)).collect(),
            FusionCache::Gate { gate, alpha } => {
                let d_fused = d_input.col_slice(d_c, d_roi);
                let d_alpha: Vec<f64> = self.embeds.iter().map(|e| dot(e.as_slice(), d_fused.as_slice())).collect();
                let mut d_embeds: Vec<Matrix> = alpha
                    .iter()
                    .map(|&w| {
                        let mut m = d_fused.clone();
                        m.scale(w);
                        m
                    })
                    .collect();
                let d_scores = softmax_backward(alpha, &d_alpha);
                let d_scores = Matrix::from_vec(n_atlas, 1, d_scores).expect("A scores");
                let d_summaries = params.gate_mlp.backward(gate, &d_scores, &mut grad.gate_mlp);
                for (a, de) in d_embeds.iter_mut().enumerate() {
                    let share = d_summaries.row(a);
                    for r in 0..n {
                        for (d, s) in de.row_mut(r).iter_mut().zip(share) {
                            *d += s / n as f64;
                        }
                    }
                }
                d_embeds
            }
            FusionCache::VoxelGate { gate, reduce_input, alpha } => {
                let d_fused = d_input.col_slice(d_c, d_roi);
                let mut d_embeds: Vec<Matrix> = (0..n_atlas).map(|_| Matrix::zeros(n, d_roi)).collect();
                let mut d_scores = Matrix::zeros(n * n_atlas, 1);
                for r in 0..n {
                    let w = alpha.row(r);
                    let d_alpha: Vec<f64> = self.embeds.iter().map(|e| dot(e.row(r), d_fused.row(r))).collect();
                    for (a, de) in d_embeds.iter_mut().enumerate() {
                        for (d, g) in de.row_mut(r).iter_mut().zip(d_fused.row(r)) {
                            *d += w[a] * g;
                        }
                    }
                    for (a, ds) in softmax_backward(w, &d_alpha).into_iter().enumerate() {
                        d_scores.set(r * n_atlas + a, 0, ds);
                    }
                }
                let d_reduced = params.vg_gate.backward(gate, &d_scores, &mut grad.vg_gate);
                grad.vg_reduce_w.add_assign(&reduce_input.t_matmul(&d_reduced));
                grad.vg_reduce_b.add_assign(&d_reduced.col_sums());
                let d_stacked = d_reduced.matmul_t(&params.vg_reduce_w);
                for row in 0..n * n_atlas {
                    let (r, a) = (row / n_atlas, row % n_atlas);
                    for (d, s) in d_embeds[a].row_mut(r).iter_mut().zip(d_stacked.row(row)) {
                        *d += s;
                    }
                }
                d_embeds
            }
        };

        for ((de, cols), gt) in d_embeds.iter_mut().zip(&self.columns).zip(grad.roi_tables.iter_mut()) {
            for (r, &c) in cols.iter().enumerate() {
                if c >= 0 {
                    for (g, d) in gt.row_mut(c as usize).iter_mut().zip(de.row(r)) {
                        *g += d;
                    }
                }
            }
        }

        let d_phi = params.coord_mlp.backward(&self.coord_cache, &d_code, &mut grad.coord_mlp);
        let n_rff = params.rff_freqs.rows();
        let d_theta = Matrix::from_fn(n, n_rff, |r, c| {
            let t = self.theta.get(r, c);
            libm::cos(t) * d_phi.get(r, c) - libm::sin(t) * d_phi.get(r, c + n_rff)
        });
        let mut d_freqs = d_theta.t_matmul(&self.coords);
        d_freqs.scale(TAU);
        grad.rff_freqs.add_assign(&d_freqs);
    }

    pub(crate) fn coord_code(&self) -> &Matrix {
        &self.coord_code
    }
}

/// Vector-Jacobian product of softmax: `w ⊙ (g − ⟨w, g⟩)`.
pub(crate) fn softmax_backward(w: &[f64], g: &[f64]) -> Vec<f64> {
    let inner = dot(w, g);
    w.iter().zip(g).map(|(wi, gi)| wi * (gi - inner)).collect()
}
