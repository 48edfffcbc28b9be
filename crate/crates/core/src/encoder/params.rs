use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, FusionMode};
use crate::rng::{self, Rng};
use crate::{Error, Matrix, Result};

/// Two-layer perceptron `in → hidden → out` with a SiLU hidden activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

pub(crate) struct MlpCache {
    input: Matrix,
    pre: Matrix,
    hidden: Matrix,
    /// Inverted-dropout multipliers on the hidden layer.
    mask: Option<Matrix>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub(crate) fn dropout_mask(rows: usize, cols: usize, p: f64, rng: &mut Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    Matrix::from_fn(rows, cols, |_, _| if rng::bernoulli(rng, p) { 0.0 } else { keep })
}

impl Mlp {
    pub fn init(input: usize, hidden: usize, output: usize, rng: &mut Rng) -> Self {
        let (w1, b1) = linear_init(input, hidden, rng);
        let (w2, b2) = linear_init(hidden, output, rng);
        Mlp { w1, b1, w2, b2 }
    }

    pub fn zeros_like(&self) -> Self {
        Mlp {
            w1: zeros_like(&self.w1),
            b1: zeros_like(&self.b1),
            w2: zeros_like(&self.w2),
            b2: zeros_like(&self.b2),
        }
    }

    pub fn forward(&self, input: &Matrix) -> Matrix {
        self.forward_cached(input.clone(), None).0
    }

    pub(crate) fn forward_cached(&self, input: Matrix, dropout: Option<(f64, &mut Rng)>) -> (Matrix, MlpCache) {
        let mut pre = input.matmul(&self.w1);
        pre.add_row_broadcast(&self.b1);
        let mut hidden = pre.clone();
        hidden.as_mut_slice().iter_mut().for_each(|v| *v = silu(*v));
        let mask = match dropout {
            Some((p, rng)) if p > 0.0 => Some(dropout_mask(hidden.rows(), hidden.cols(), p, rng)),
            _ => None,
        };
        let dropped = apply_mask(&hidden, mask.as_ref());
        let mut out = dropped.matmul(&self.w2);
        out.add_row_broadcast(&self.b2);
        (
            out,
            MlpCache {
                input,
                pre,
                hidden,
                mask,
            },
        )
    }

    /// Accumulates parameter gradients into `grad` and returns d(input).
    pub(crate) fn backward(&self, cache: &MlpCache, d_out: &Matrix, grad: &mut Mlp) -> Matrix {
        let dropped = apply_mask(&cache.hidden, cache.mask.as_ref());
        grad.w2.add_assign(&dropped.t_matmul(d_out));
        grad.b2.add_assign(&d_out.col_sums());
        let mut d_hidden = d_out.matmul_t(&self.w2);
        if let Some(mask) = &cache.mask {
            for (d, m) in d_hidden.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *d *= m;
            }
        }
        for (d, &x) in d_hidden.as_mut_slice().iter_mut().zip(cache.pre.as_slice()) {
            *d *= silu_grad(x);
        }
        grad.w1.add_assign(&cache.input.t_matmul(&d_hidden));
        grad.b1.add_assign(&d_hidden.col_sums());
        d_hidden.matmul_t(&self.w1)
    }
}

pub(crate) fn apply_mask(m: &Matrix, mask: Option<&Matrix>) -> Matrix {
    match mask {
        None => m.clone(),
        Some(mask) => {
            let mut out = m.clone();
            for (v, k) in out.as_mut_slice().iter_mut().zip(mask.as_slice()) {
                *v *= k;
            }
            out
        }
    }
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

/// Uniform fan-in scaled weight and bias, `U(−1/√fan_in, 1/√fan_in)`.
fn linear_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> (Matrix, Matrix) {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    let w = Matrix::from_fn(fan_in, fan_out, |_, _| rng::uniform(rng, bound));
    let b = Matrix::from_fn(1, fan_out, |_, _| rng::uniform(rng, bound));
    (w, b)
}

fn weight_init(fan_in: usize, rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let bound = 1.0 / libm::sqrt(fan_in as f64);
    Matrix::from_fn(rows, cols, |_, _| rng::uniform(rng, bound))
}

/// Every learnable tensor of the encoder. Gradients use the same type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// Random Fourier frequencies, `n_rff × 3`. Frozen after init.
    pub rff_freqs: Matrix,
    pub coord_mlp: Mlp,
    /// `W_a` per atlas, `K_a × d_roi`.
    pub roi_tables: Vec<Matrix>,
    pub gate_mlp: Mlp,
    pub vg_reduce_w: Matrix,
    pub vg_reduce_b: Matrix,
    pub vg_gate: Mlp,
    /// `W_k`, `(fused feature width) × d_k`.
    pub key_proj: Matrix,
    pub value_w: Matrix,
    pub value_b: Matrix,
    /// Learnable queries, `L × d_k`.
    pub queries: Matrix,
    /// Residual latent updates between stacked attention blocks, `d_v × d_k`.
    pub latent_proj: Vec<Matrix>,
    pub out_w: Matrix,
    pub out_b: Matrix,
}

pub const FROZEN_TENSORS: &[&str] = &["rff_freqs"];

impl EncoderParams {
    /// Seeded initialization for the given per-atlas column counts `K_a`.
    pub fn init(cfg: &EncoderConfig, atlas_columns: &[usize], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if atlas_columns.is_empty() || atlas_columns.contains(&0) {
            return Err(Error::InvalidInput("every atlas needs at least one column".into()));
        }
        let mut rng = rng::seeded(seed);
        let rff_freqs = Matrix::from_fn(cfg.n_rff, 3, |_, _| cfg.rff_sigma * rng::normal(&mut rng));
        let coord_mlp = Mlp::init(2 * cfg.n_rff, cfg.coord_hidden, cfg.d_c, &mut rng);
        let roi_tables = atlas_columns
            .iter()
            .map(|&k| weight_init(k, k, cfg.d_roi, &mut rng))
            .collect();
        let gate_mlp = Mlp::init(cfg.d_roi, cfg.gate_hidden, 1, &mut rng);
        let (vg_reduce_w, vg_reduce_b) = linear_init(cfg.d_roi, cfg.d_red, &mut rng);
        let vg_gate = Mlp::init(cfg.d_red, cfg.gate_hidden, 1, &mut rng);
        let key_in = cfg.key_input_width(atlas_columns.len());
        let key_proj = weight_init(key_in, key_in, cfg.d_k, &mut rng);
        let (value_w, value_b) = linear_init(1, cfg.d_v, &mut rng);
        let queries = weight_init(cfg.d_k, cfg.n_tokens, cfg.d_k, &mut rng);
        let latent_proj = (1..cfg.n_blocks)
            .map(|_| weight_init(cfg.d_v, cfg.d_v, cfg.d_k, &mut rng))
            .collect();
        let (out_w, out_b) = linear_init(cfg.d_v, cfg.d_out, &mut rng);
        Ok(EncoderParams {
            rff_freqs,
            coord_mlp,
            roi_tables,
            gate_mlp,
            vg_reduce_w,
            vg_reduce_b,
            vg_gate,
            key_proj,
            value_w,
            value_b,
            queries,
            latent_proj,
            out_w,
            out_b,
        })
    }

    pub fn n_atlases(&self) -> usize {
        self.roi_tables.len()
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// All tensors with stable names, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = Vec::new();
        out.push(("rff_freqs".into(), &self.rff_freqs));
        push_mlp(&mut out, "coord_mlp", &self.coord_mlp);
        for (a, t) in self.roi_tables.iter().enumerate() {
            out.push((format!("roi_tables.{a}"), t));
        }
        push_mlp(&mut out, "gate_mlp", &self.gate_mlp);
        out.push(("vg_reduce.w".into(), &self.vg_reduce_w));
        out.push(("vg_reduce.b".into(), &self.vg_reduce_b));
        push_mlp(&mut out, "vg_gate", &self.vg_gate);
        out.push(("key_proj".into(), &self.key_proj));
        out.push(("value_proj.w".into(), &self.value_w));
        out.push(("value_proj.b".into(), &self.value_b));
        out.push(("queries".into(), &self.queries));
        for (b, t) in self.latent_proj.iter().enumerate() {
            out.push((format!("latent_proj.{b}"), t));
        }
        out.push(("out_proj.w".into(), &self.out_w));
        out.push(("out_proj.b".into(), &self.out_b));
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> = Vec::new();
        out.push(("rff_freqs".into(), &mut self.rff_freqs));
        push_mlp_mut(&mut out, "coord_mlp", &mut self.coord_mlp);
        for (a, t) in self.roi_tables.iter_mut().enumerate() {
            out.push((format!("roi_tables.{a}"), t));
        }
        push_mlp_mut(&mut out, "gate_mlp", &mut self.gate_mlp);
        out.push(("vg_reduce.w".into(), &mut self.vg_reduce_w));
        out.push(("vg_reduce.b".into(), &mut self.vg_reduce_b));
        push_mlp_mut(&mut out, "vg_gate", &mut self.vg_gate);
        out.push(("key_proj".into(), &mut self.key_proj));
        out.push(("value_proj.w".into(), &mut self.value_w));
        out.push(("value_proj.b".into(), &mut self.value_b));
        out.push(("queries".into(), &mut self.queries));
        for (b, t) in self.latent_proj.iter_mut().enumerate() {
            out.push((format!("latent_proj.{b}"), t));
        }
        out.push(("out_proj.w".into(), &mut self.out_w));
        out.push(("out_proj.b".into(), &mut self.out_b));
        out
    }

    /// Rebuild from named tensors, checking each shape against a freshly
    /// initialized template.
    pub fn from_named(cfg: &EncoderConfig, atlas_columns: &[usize], named: &[(String, Matrix)]) -> Result<Self> {
        let mut params = EncoderParams::init(cfg, atlas_columns, 0)?;
        let mut slots = params.tensors_mut();
        if slots.len() != named.len() {
            return Err(Error::shape("EncoderParams::from_named", format!("{} tensors", slots.len()), format!("{}", named.len())));
        }
        for ((slot_name, slot), (name, value)) in slots.iter_mut().zip(named) {
            if slot_name != name {
                return Err(Error::InvalidInput(format!("expected tensor `{slot_name}`, found `{name}`")));
            }
            if slot.shape() != value.shape() {
                return Err(Error::shape("EncoderParams::from_named", format!("{name} {:?}", slot.shape()), format!("{:?}", value.shape())));
            }
            **slot = value.clone();
        }
        drop(slots);
        params.check_finite()?;
        Ok(params)
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.tensors().into_iter().find(|(_, t)| !t.is_finite()) {
            Some((name, _)) => Err(Error::NonFinite(name)),
            None => Ok(()),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.as_slice().len()).sum()
    }

    /// Width of the key projection input implied by these parameters.
    pub(crate) fn check_against(&self, cfg: &EncoderConfig) -> Result<()> {
        let expected = cfg.key_input_width(self.n_atlases());
        if self.key_proj.shape() != (expected, cfg.d_k) {
            return Err(Error::shape(
                "key_proj",
                format!("{expected}x{} for {:?}", cfg.d_k, cfg.fusion_mode),
                format!("{:?}", self.key_proj.shape()),
            ));
        }
        if self.queries.shape() != (cfg.n_tokens, cfg.d_k) || self.out_w.shape() != (cfg.d_v, cfg.d_out) {
            return Err(Error::shape("encoder params", "shapes from config", "mismatched queries/out_proj"));
        }
        if self.latent_proj.len() + 1 != cfg.n_blocks {
            return Err(Error::shape("latent_proj", format!("{}", cfg.n_blocks - 1), format!("{}", self.latent_proj.len())));
        }
        Ok(())
    }
}

fn push_mlp<'a>(out: &mut Vec<(String, &'a Matrix)>, prefix: &str, mlp: &'a Mlp) {
    out.push((format!("{prefix}.w1"), &mlp.w1));
    out.push((format!("{prefix}.b1"), &mlp.b1));
    out.push((format!("{prefix}.w2"), &mlp.w2));
    out.push((format!("{prefix}.b2"), &mlp.b2));
}

fn push_mlp_mut<'a>(out: &mut Vec<(String, &'a mut Matrix)>, prefix: &str, mlp: &'a mut Mlp) {
    out.push((format!("{prefix}.w1"), &mut mlp.w1));
    out.push((format!("{prefix}.b1"), &mut mlp.b1));
    out.push((format!("{prefix}.w2"), &mut mlp.w2));
    out.push((format!("{prefix}.b2"), &mut mlp.b2));
}

impl FusionMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::Gate => "gate",
            FusionMode::VoxelGate => "voxel_gate",
        }
    }
}
