//! Seeded multi-subject synthetic data.
//!
//! Every sample draws a latent `z`. The alignment target has rows
//! `(b_{j(l)} · z) u + c`, where `b_j` is a per-ROI readout vector of the
//! first atlas, `j(l) = l mod K`, and `u`, `c` are fixed vectors. Voxel `n`
//! of subject `s` reads `x_n = h_{s,n} · z + ε` with
//! `h_{s,n} = b_{roi(n)} + δ_{s,n}`: the ROI readout plus subject-specific
//! jitter (background voxels get the jitter alone). The targets are therefore
//! reachable by queries that attend to one ROI each.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::atlas::{
    build_global_label_space, build_membership_matrix, extract_mask_voxels, resample_nearest, GlobalLabelSpace,
    LabelVolume, MembershipMatrix, SubjectMask, VoxelGrid, VoxelIndexList,
};
use crate::encoder::{normalize_coords, VisualTokens};
use crate::rng::{self, derived, Rng};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticDatasetSpec {
    pub n_subjects: usize,
    /// One entry per subject; unequal counts exercise the variable-`N_s` path.
    pub voxels_per_subject: Vec<usize>,
    pub n_atlases: usize,
    pub labels_per_atlas: usize,
    /// Training plus validation samples; the last 20% are validation.
    pub samples_per_subject: usize,
    pub test_samples_per_subject: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    /// Standard deviation of the subject-specific readout perturbation.
    pub readout_jitter: f64,
    pub template_dims: [usize; 3],
    pub n_tokens: usize,
    pub d_out: usize,
    pub seed: u64,
}

impl Default for SyntheticDatasetSpec {
    fn default() -> Self {
        SyntheticDatasetSpec {
            n_subjects: 4,
            voxels_per_subject: alloc::vec![300, 360, 420, 480],
            n_atlases: 2,
            labels_per_atlas: 6,
            samples_per_subject: 40,
            test_samples_per_subject: 10,
            latent_dim: 8,
            noise_sigma: 0.0,
            readout_jitter: 0.1,
            template_dims: [14, 14, 14],
            n_tokens: 8,
            d_out: 64,
            seed: 42,
        }
    }
}

impl SyntheticDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_subjects", self.n_subjects),
            ("n_atlases", self.n_atlases),
            ("labels_per_atlas", self.labels_per_atlas),
            ("latent_dim", self.latent_dim),
            ("n_tokens", self.n_tokens),
            ("d_out", self.d_out),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidInput(format!("`{name}` must be >= 1")));
        }
        if self.samples_per_subject < 2 {
            return Err(Error::InvalidInput("samples_per_subject must be >= 2 (train and validation)".into()));
        }
        if self.voxels_per_subject.len() != self.n_subjects {
            return Err(Error::InvalidInput(format!(
                "voxels_per_subject has {} entries for {} subjects",
                self.voxels_per_subject.len(),
                self.n_subjects
            )));
        }
        if self.voxels_per_subject.contains(&0) {
            return Err(Error::InvalidInput("every subject needs at least one voxel".into()));
        }
        if [self.noise_sigma, self.readout_jitter].iter().any(|s| s.is_nan() || *s < 0.0) {
            return Err(Error::InvalidInput("noise_sigma and readout_jitter must be non-negative".into()));
        }
        VoxelGrid::unit(self.template_dims)?;
        for s in 0..self.n_subjects {
            let grid = subject_grid(self.template_dims, s)?;
            if self.voxels_per_subject[s] > grid.len() {
                return Err(Error::InvalidInput(format!(
                    "subject {s} asks for {} voxels but its grid holds {}",
                    self.voxels_per_subject[s],
                    grid.len()
                )));
            }
        }
        Ok(())
    }

    /// Number of validation samples per subject.
    pub fn n_val(&self) -> usize {
        validation_count(self.samples_per_subject)
    }
}

/// Last 20% (at least one, leaving at least one for training).
pub fn validation_count(samples: usize) -> usize {
    ((samples as f64 * 0.2).round() as usize).clamp(1, samples.saturating_sub(1).max(1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub signals: Vec<f64>,
    pub target: VisualTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub id: String,
    pub grid: VoxelGrid,
    pub voxels: VoxelIndexList,
    /// Normalized voxel coordinates, `N_s × 3`.
    pub coords: Matrix,
    pub memberships: Vec<MembershipMatrix>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl SubjectData {
    pub fn n_voxels(&self) -> usize {
        self.coords.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<SubjectData>,
    pub label_spaces: Vec<GlobalLabelSpace>,
    /// Template-space atlases the subject volumes were resampled from.
    pub templates: Vec<LabelVolume>,
}

impl Dataset {
    pub fn atlas_columns(&self) -> Vec<usize> {
        self.label_spaces.iter().map(GlobalLabelSpace::len).collect()
    }

    pub fn target_shape(&self) -> Option<(usize, usize)> {
        self.subjects.iter().flat_map(|s| s.train.first()).map(|x| x.target.0.shape()).next()
    }
}

/// Subject grids cover the template extent at progressively coarser spacing.
fn subject_grid(template: [usize; 3], subject: usize) -> Result<VoxelGrid> {
    let sp = 1.0 + 0.1 * subject as f64;
    let dims = template.map(|n| libm::floor((n - 1) as f64 / sp) as usize + 1);
    VoxelGrid::new(dims, [sp; 3])
}

/// Voronoi parcellation with `k` labelled cells plus one background cell.
fn voronoi_atlas(grid: VoxelGrid, k: usize, rng: &mut Rng) -> Result<LabelVolume> {
    let seeds: Vec<[f64; 3]> = (0..=k)
        .map(|_| {
            let mut p = [0.0; 3];
            for (axis, v) in p.iter_mut().enumerate() {
                *v = (rng::uniform(rng, 0.5) + 0.5) * (grid.dims[axis] - 1) as f64;
            }
            p
        })
        .collect();
    let labels = (0..grid.len())
        .map(|linear| {
            let c = grid.coord(linear);
            let mut best = (f64::INFINITY, 0);
            for (i, s) in seeds.iter().enumerate() {
                let d: f64 = (0..3).map(|a| (c[a] as f64 - s[a]) * (c[a] as f64 - s[a])).sum();
                if d < best.0 {
                    best = (d, i);
                }
            }
            // the extra seed is the background cell
            if best.1 == k { 0 } else { best.1 as u32 + 1 }
        })
        .collect();
    LabelVolume::new(grid, labels)
}

fn random_mask(grid: VoxelGrid, count: usize, rng: &mut Rng) -> Result<SubjectMask> {
    let mut order: Vec<usize> = (0..grid.len()).collect();
    rng::shuffle(rng, &mut order);
    let mut member = alloc::vec![false; grid.len()];
    for &i in &order[..count] {
        member[i] = true;
    }
    SubjectMask::new(grid, member)
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng::normal(rng))
}

struct Generative {
    roi_readout: Matrix,
    direction: Vec<f64>,
    offset: Vec<f64>,
}

impl Generative {
    fn target(&self, z: &[f64], n_tokens: usize) -> VisualTokens {
        let k = self.roi_readout.rows();
        let d_out = self.direction.len();
        let scores: Vec<f64> = (0..n_tokens).map(|l| crate::tensor::dot(self.roi_readout.row(l % k), z)).collect();
        VisualTokens(Matrix::from_fn(n_tokens, d_out, |l, d| scores[l] * self.direction[d] + self.offset[d]))
    }
}

pub fn generate_synthetic_dataset(spec: &SyntheticDatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let template_grid = VoxelGrid::unit(spec.template_dims)?;
    let mut atlas_rng = derived(spec.seed, 1);
    let templates = (0..spec.n_atlases)
        .map(|_| voronoi_atlas(template_grid, spec.labels_per_atlas, &mut atlas_rng))
        .collect::<Result<Vec<_>>>()?;

    struct Anatomy {
        grid: VoxelGrid,
        voxels: VoxelIndexList,
        volumes: Vec<LabelVolume>,
    }
    let mut anatomy = Vec::with_capacity(spec.n_subjects);
    for s in 0..spec.n_subjects {
        let grid = subject_grid(spec.template_dims, s)?;
        let mask = random_mask(grid, spec.voxels_per_subject[s], &mut derived(spec.seed, 100 + s as u64))?;
        let voxels = extract_mask_voxels(&mask)?;
        let volumes = templates.iter().map(|t| resample_nearest(t, &grid)).collect::<Result<Vec<_>>>()?;
        anatomy.push(Anatomy { grid, voxels, volumes });
    }

    let mut label_spaces = Vec::with_capacity(spec.n_atlases);
    for a in 0..spec.n_atlases {
        let sets = anatomy
            .iter()
            .map(|an| an.volumes[a].labels_within(&an.voxels))
            .collect::<Result<Vec<BTreeSet<u32>>>>()?;
        label_spaces.push(build_global_label_space(&format!("atlas{a}"), &sets)?);
    }

    let mut gen_rng = derived(spec.seed, 2);
    let k0 = label_spaces[0].len();
    let generative = Generative {
        roi_readout: gaussian(k0, spec.latent_dim, 1.0 / libm::sqrt(spec.latent_dim as f64), &mut gen_rng),
        direction: gaussian(1, spec.d_out, 0.5, &mut gen_rng).into_vec(),
        offset: gaussian(1, spec.d_out, 0.5, &mut gen_rng).into_vec(),
    };

    let n_val = spec.n_val();
    let mut subjects = Vec::with_capacity(spec.n_subjects);
    for (s, an) in anatomy.into_iter().enumerate() {
        let memberships = an
            .volumes
            .iter()
            .zip(&label_spaces)
            .map(|(v, space)| build_membership_matrix(v, &an.voxels, space))
            .collect::<Result<Vec<_>>>()?;
        let n = an.voxels.len();
        let mut rng = derived(spec.seed, 1000 + s as u64);
        let jitter = gaussian(n, spec.latent_dim, spec.readout_jitter, &mut rng);
        let readout = Matrix::from_fn(n, spec.latent_dim, |r, c| {
            let base = memberships[0].column(r).map_or(0.0, |j| generative.roi_readout.get(j, c));
            base + jitter.get(r, c)
        });
        let draw = |rng: &mut Rng| {
            let z: Vec<f64> = (0..spec.latent_dim).map(|_| rng::normal(rng)).collect();
            let signals = (0..n)
                .map(|r| {
                    let clean = crate::tensor::dot(readout.row(r), &z);
                    if spec.noise_sigma > 0.0 {
                        clean + spec.noise_sigma * rng::normal(rng)
                    } else {
                        clean
                    }
                })
                .collect();
            Sample {
                signals,
                target: generative.target(&z, spec.n_tokens),
            }
        };
        let mut train: Vec<Sample> = (0..spec.samples_per_subject).map(|_| draw(&mut rng)).collect();
        let val = train.split_off(spec.samples_per_subject - n_val);
        let mut test_rng = derived(spec.seed, 2000 + s as u64);
        let test = (0..spec.test_samples_per_subject).map(|_| draw(&mut test_rng)).collect();
        subjects.push(SubjectData {
            id: format!("subj{:02}", s + 1),
            grid: an.grid,
            coords: normalize_coords(&an.voxels, &an.grid)?,
            voxels: an.voxels,
            memberships,
            train,
            val,
            test,
        });
    }
    Ok(Dataset {
        subjects,
        label_spaces,
        templates,
    })
}
