//! Sample-level half of the encoder: values from the voxel signal, query
//! cross-attention over the voxel keys, and the output projection.

use alloc::vec::Vec;

use super::keys::softmax_backward;
use super::params::{apply_mask, dropout_mask, EncoderParams};
use super::EncoderConfig;
use crate::rng::Rng;
use crate::tensor::softmax_in_place;
use crate::Matrix;

struct BlockCache {
    latents: Matrix,
    attn: Matrix,
    mask: Option<Matrix>,
    output: Matrix,
}

pub(crate) struct AttentionStage {
    signals: Vec<f64>,
    values: Matrix,
    blocks: Vec<BlockCache>,
    pub tokens: Matrix,
}

pub(crate) fn values(signals: &[f64], params: &EncoderParams) -> Matrix {
    let w = params.value_w.as_slice();
    let b = params.value_b.as_slice();
    Matrix::from_fn(signals.len(), w.len(), |r, c| w[c] * signals[r] + b[c])
}

fn attention_weights(latents: &Matrix, keys: &Matrix, scale: f64) -> Matrix {
    let mut scores = latents.matmul_t(keys);
    scores.scale(scale);
    for r in 0..scores.rows() {
        softmax_in_place(scores.row_mut(r));
    }
    scores
}

impl AttentionStage {
    pub(crate) fn forward(
        keys: &Matrix,
        signals: &[f64],
        params: &EncoderParams,
        cfg: &EncoderConfig,
        mut rng: Option<&mut Rng>,
    ) -> Self {
        let scale = 1.0 / libm::sqrt(cfg.d_k as f64);
        let values = values(signals, params);
        let mut latents = params.queries.clone();
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for b in 0..cfg.n_blocks {
            let attn = attention_weights(&latents, keys, scale);
            let mask = match rng.as_deref_mut() {
                Some(r) if cfg.attn_dropout > 0.0 => Some(dropout_mask(attn.rows(), attn.cols(), cfg.attn_dropout, r)),
                _ => None,
            };
            let output = apply_mask(&attn, mask.as_ref()).matmul(&values);
            let next = (b + 1 < cfg.n_blocks).then(|| {
                let mut h = latents.clone();
                h.add_assign(&output.matmul(&params.latent_proj[b]));
                h
            });
            blocks.push(BlockCache {
                latents: core::mem::replace(&mut latents, Matrix::zeros(0, 0)),
                attn,
                mask,
                output,
            });
            if let Some(h) = next {
                latents = h;
            }
        }
        let mut tokens = blocks.last().expect("n_blocks >= 1").output.matmul(&params.out_w);
        tokens.add_row_broadcast(&params.out_b);
        AttentionStage {
            signals: signals.to_vec(),
            values,
            blocks,
            tokens,
        }
    }

    /// Backpropagate `dZ`; accumulates into `grad` and returns `dK`.
    pub(crate) fn backward(
        &self,
        keys: &Matrix,
        d_tokens: &Matrix,
        params: &EncoderParams,
        cfg: &EncoderConfig,
        grad: &mut EncoderParams,
    ) -> Matrix {
        let scale = 1.0 / libm::sqrt(cfg.d_k as f64);
        let last = self.blocks.len() - 1;
        grad.out_w.add_assign(&self.blocks[last].output.t_matmul(d_tokens));
        grad.out_b.add_assign(&d_tokens.col_sums());
        let mut d_output = d_tokens.matmul_t(&params.out_w);
        let mut d_values = Matrix::zeros(self.values.rows(), self.values.cols());
        let mut d_keys = Matrix::zeros(keys.rows(), keys.cols());
        // gradient w.r.t. the latents entering the block after the current one
        let mut d_latents = Matrix::zeros(params.queries.rows(), params.queries.cols());

        for b in (0..self.blocks.len()).rev() {
            let block = &self.blocks[b];
            if b < last {
                grad.latent_proj[b].add_assign(&block.output.t_matmul(&d_latents));
                d_output = d_latents.matmul_t(&params.latent_proj[b]);
            }
            let dropped = apply_mask(&block.attn, block.mask.as_ref());
            d_values.add_assign(&dropped.t_matmul(&d_output));
            let mut d_attn = d_output.matmul_t(&self.values);
            if let Some(mask) = &block.mask {
                for (d, m) in d_attn.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                    *d *= m;
                }
            }
            let mut d_scores = Matrix::zeros(d_attn.rows(), d_attn.cols());
            for r in 0..d_attn.rows() {
                let row = softmax_backward(block.attn.row(r), d_attn.row(r));
                for (d, v) in d_scores.row_mut(r).iter_mut().zip(row) {
                    *d = v * scale;
                }
            }
            // residual path carries d_latents straight through
            d_latents.add_assign(&d_scores.matmul(keys));
            d_keys.add_assign(&d_scores.t_matmul(&block.latents));
        }
        grad.queries.add_assign(&d_latents);

        let mut dw = Matrix::zeros(1, d_values.cols());
        for (r, &x) in self.signals.iter().enumerate() {
            for (g, d) in dw.as_mut_slice().iter_mut().zip(d_values.row(r)) {
                *g += x * d;
            }
        }
        grad.value_w.add_assign(&dw);
        grad.value_b.add_assign(&d_values.col_sums());
        d_keys
    }

    pub(crate) fn attention(&self, block: usize) -> &Matrix {
        &self.blocks[block].attn
    }
}
