//! Cross-subject ROI membership construction.
//!
//! Every atlas is resampled onto a subject's reference grid, the subject's
//! in-mask voxels are enumerated in lexicographic `(i, j, k)` order, and each
//! voxel's label is one-hot encoded against a label space shared by all
//! subjects of that atlas. Rows therefore mean the same voxel in every file
//! and columns mean the same ROI in every subject.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub dims: [usize; 3],
    /// Millimetres per voxel along each axis.
    pub spacing: [f64; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        let grid = VoxelGrid { dims, spacing };
        grid.validate()?;
        Ok(grid)
    }

    /// Grid with unit spacing.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::InvalidInput(format!("degenerate grid dims {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !s.is_finite() || s <= 0.0) {
            return Err(Error::InvalidInput(format!("non-positive grid spacing {:?}", self.spacing)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn linear_index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn coord(&self, linear: usize) -> [usize; 3] {
        let k = linear % self.dims[2];
        let ij = linear / self.dims[2];
        [ij / self.dims[1], ij % self.dims[1], k]
    }

    pub fn contains(&self, c: [usize; 3]) -> bool {
        c.iter().zip(&self.dims).all(|(x, d)| x < d)
    }
}

/// Integer label per voxel, row-major over `(i, j, k)`; 0 is background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelVolume {
    pub grid: VoxelGrid,
    pub labels: Vec<u32>,
}

impl LabelVolume {
    pub fn new(grid: VoxelGrid, labels: Vec<u32>) -> Result<Self> {
        grid.validate()?;
        if labels.len() != grid.len() {
            return Err(Error::shape("LabelVolume", format!("{} voxels", grid.len()), format!("{}", labels.len())));
        }
        Ok(LabelVolume { grid, labels })
    }

    pub fn label_at(&self, c: [usize; 3]) -> Option<u32> {
        self.grid.contains(c).then(|| self.labels[self.grid.linear_index(c)])
    }

    /// Distinct non-zero labels found at the given voxels.
    pub fn labels_within(&self, voxels: &VoxelIndexList) -> Result<BTreeSet<u32>> {
        let mut set = BTreeSet::new();
        for &c in voxels.coords() {
            let label = self
                .label_at(c)
                .ok_or_else(|| Error::InvalidInput(format!("voxel {c:?} outside volume {:?}", self.grid.dims)))?;
            if label != 0 {
                set.insert(label);
            }
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMask {
    pub grid: VoxelGrid,
    pub member: Vec<bool>,
}

impl SubjectMask {
    pub fn new(grid: VoxelGrid, member: Vec<bool>) -> Result<Self> {
        grid.validate()?;
        if member.len() != grid.len() {
            return Err(Error::shape("SubjectMask", format!("{} voxels", grid.len()), format!("{}", member.len())));
        }
        Ok(SubjectMask { grid, member })
    }

    /// Voxels whose reference-volume value equals exactly 1.
    pub fn from_reference(volume: &LabelVolume) -> Result<Self> {
        Self::new(volume.grid, volume.labels.iter().map(|&v| v == 1).collect())
    }

    pub fn count(&self) -> usize {
        self.member.iter().filter(|&&m| m).count()
    }
}

/// In-mask voxel coordinates in strictly increasing lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoxelIndexList {
    coords: Vec<[usize; 3]>,
}

impl VoxelIndexList {
    /// Validates ordering and bounds.
    pub fn new(coords: Vec<[usize; 3]>, grid: &VoxelGrid) -> Result<Self> {
        if let Some(c) = coords.iter().find(|c| !grid.contains(**c)) {
            return Err(Error::InvalidInput(format!("voxel {c:?} outside grid {:?}", grid.dims)));
        }
        if coords.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("voxel indices must be strictly increasing".into()));
        }
        Ok(VoxelIndexList { coords })
    }

    pub fn coords(&self) -> &[[usize; 3]] {
        &self.coords
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GlobalLabelSpace {
    pub atlas_id: String,
    label_ids: Vec<u32>,
}

impl GlobalLabelSpace {
    pub fn label_ids(&self) -> &[u32] {
        &self.label_ids
    }

    /// K_a, the number of shared columns.
    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }

    pub fn column_of(&self, label: u32) -> Option<usize> {
        self.label_ids.binary_search(&label).ok()
    }

    /// Rebuild from a stored, already-sorted label list.
    pub fn from_sorted(atlas_id: impl Into<String>, label_ids: Vec<u32>) -> Result<Self> {
        let atlas_id = atlas_id.into();
        if label_ids.is_empty() {
            return Err(Error::EmptyLabelSpace(atlas_id));
        }
        if label_ids[0] == 0 || label_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidInput("label ids must be positive and strictly increasing".into()));
        }
        Ok(GlobalLabelSpace { atlas_id, label_ids })
    }
}

/// One-hot voxel × ROI indicator stored as a column index per row (−1 for
/// an all-zero row).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MembershipMatrix {
    pub atlas_id: String,
    cols: usize,
    columns: Vec<i32>,
}

impl MembershipMatrix {
    pub fn new(atlas_id: impl Into<String>, cols: usize, columns: Vec<i32>) -> Result<Self> {
        if let Some(&bad) = columns.iter().find(|&&c| c < -1 || c >= cols as i32) {
            return Err(Error::InvalidInput(format!("column index {bad} outside [-1, {cols})")));
        }
        Ok(MembershipMatrix {
            atlas_id: atlas_id.into(),
            cols,
            columns,
        })
    }

    pub fn rows(&self) -> usize {
        self.columns.len()
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Raw per-row column indices with the −1 sentinel.
    pub fn column_indices(&self) -> &[i32] {
        &self.columns
    }

    pub fn column(&self, row: usize) -> Option<usize> {
        let c = self.columns[row];
        (c >= 0).then_some(c as usize)
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.rows(), self.cols);
        for (r, c) in self.columns.iter().enumerate() {
            if *c >= 0 {
                m.set(r, *c as usize, 1.0);
            }
        }
        m
    }
}

/// Nearest-neighbour label resampling onto `dst_grid`.
///
/// Voxel centres sit at `index · spacing`. Ties go to the lower source index
/// and positions past the source extent clamp to the edge voxel, so the output
/// never contains a label absent from the input.
pub fn resample_nearest(src: &LabelVolume, dst_grid: &VoxelGrid) -> Result<LabelVolume> {
    src.grid.validate()?;
    dst_grid.validate()?;
    if src.grid == *dst_grid {
        return Ok(src.clone());
    }
    let axis_map = |axis: usize| -> Vec<usize> {
        let n_src = src.grid.dims[axis];
        (0..dst_grid.dims[axis])
            .map(|i| {
                let f = i as f64 * dst_grid.spacing[axis] / src.grid.spacing[axis];
                let nearest = libm::ceil(f - 0.5);
                if nearest <= 0.0 {
                    0
                } else {
                    (nearest as usize).min(n_src - 1)
                }
            })
            .collect()
    };
    let (mi, mj, mk) = (axis_map(0), axis_map(1), axis_map(2));
    let mut labels = Vec::with_capacity(dst_grid.len());
    for &si in &mi {
        for &sj in &mj {
            for &sk in &mk {
                labels.push(src.labels[src.grid.linear_index([si, sj, sk])]);
            }
        }
    }
    LabelVolume::new(*dst_grid, labels)
}

pub fn extract_mask_voxels(mask: &SubjectMask) -> Result<VoxelIndexList> {
    let coords: Vec<[usize; 3]> = mask
        .member
        .iter()
        .enumerate()
        .filter(|(_, &m)| m)
        .map(|(linear, _)| mask.grid.coord(linear))
        .collect();
    if coords.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(VoxelIndexList { coords })
}

/// Sorted, deduplicated union of the non-zero labels of every subject.
pub fn build_global_label_space<'a, I>(atlas_id: &str, per_subject: I) -> Result<GlobalLabelSpace>
where
    I: IntoIterator<Item = &'a BTreeSet<u32>>,
{
    let mut union = BTreeSet::new();
    let mut subjects = 0usize;
    for set in per_subject {
        subjects += 1;
        union.extend(set.iter().copied().filter(|&l| l != 0));
    }
    if subjects == 0 {
        return Err(Error::InvalidInput("at least one subject label set is required".into()));
    }
    if union.is_empty() {
        return Err(Error::EmptyLabelSpace(atlas_id.into()));
    }
    Ok(GlobalLabelSpace {
        atlas_id: atlas_id.into(),
        label_ids: union.into_iter().collect(),
    })
}

pub fn build_membership_matrix(
    vol: &LabelVolume,
    voxels: &VoxelIndexList,
    space: &GlobalLabelSpace,
) -> Result<MembershipMatrix> {
    let mut columns = Vec::with_capacity(voxels.len());
    for &c in voxels.coords() {
        let label = vol
            .label_at(c)
            .ok_or_else(|| Error::InvalidInput(format!("voxel {c:?} outside volume {:?}", vol.grid.dims)))?;
        let col = if label == 0 { None } else { space.column_of(label) };
        columns.push(col.map_or(-1, |j| j as i32));
    }
    Ok(MembershipMatrix {
        atlas_id: space.atlas_id.clone(),
        cols: space.len(),
        columns,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn line(labels: Vec<u32>, spacing: f64) -> LabelVolume {
        let n = labels.len();
        LabelVolume::new(VoxelGrid::new([n, 1, 1], [spacing, 1.0, 1.0]).unwrap(), labels).unwrap()
    }

    #[test]
    fn resample_identity_grid() {
        let v = LabelVolume::new(VoxelGrid::unit([2, 3, 2]).unwrap(), (0..12).collect()).unwrap();
        assert_eq!(resample_nearest(&v, &v.grid).unwrap(), v);
    }

    #[test]
    fn resample_half_spacing_upsamples() {
        let src = line(vec![3, 7], 1.0);
        let dst = VoxelGrid::new([4, 1, 1], [0.5, 1.0, 1.0]).unwrap();
        assert_eq!(resample_nearest(&src, &dst).unwrap().labels, vec![3, 3, 7, 7]);
    }

    #[test]
    fn resample_background_stays_background() {
        let src = LabelVolume::new(VoxelGrid::unit([3, 3, 3]).unwrap(), vec![0; 27]).unwrap();
        let dst = VoxelGrid::new([5, 2, 4], [0.7, 1.6, 0.9]).unwrap();
        assert!(resample_nearest(&src, &dst).unwrap().labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn degenerate_grids_are_rejected() {
        assert!(VoxelGrid::unit([0, 1, 1]).is_err());
        let src = line(vec![1], 1.0);
        let bad = VoxelGrid { dims: [2, 0, 1], spacing: [1.0; 3] };
        assert!(matches!(resample_nearest(&src, &bad), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn mask_extraction_orders_lexicographically() {
        let grid = VoxelGrid::unit([2, 2, 1]).unwrap();
        let full = SubjectMask::new(grid, vec![true; 4]).unwrap();
        assert_eq!(
            extract_mask_voxels(&full).unwrap().coords(),
            &[[0, 0, 0], [0, 1, 0], [1, 0, 0], [1, 1, 0]]
        );
        let single = SubjectMask::new(grid, vec![true, false, false, false]).unwrap();
        let v = extract_mask_voxels(&single).unwrap();
        assert_eq!(v.coords(), &[[0, 0, 0]]);
        assert_eq!(v.len(), 1);
        let empty = SubjectMask::new(grid, vec![false; 4]).unwrap();
        assert_eq!(extract_mask_voxels(&empty), Err(Error::EmptyMask));
    }

    #[test]
    fn label_space_is_sorted_union() {
        let a: BTreeSet<u32> = [1, 3].into();
        let b: BTreeSet<u32> = [3, 5].into();
        assert_eq!(build_global_label_space("x", [&a, &b]).unwrap().label_ids(), &[1, 3, 5]);
        assert_eq!(build_global_label_space("x", [&b, &a]).unwrap().label_ids(), &[1, 3, 5]);
        let two: BTreeSet<u32> = [2].into();
        assert_eq!(build_global_label_space("x", [&two]).unwrap().label_ids(), &[2]);
        let bg: BTreeSet<u32> = [0].into();
        assert!(matches!(build_global_label_space("x", [&bg]), Err(Error::EmptyLabelSpace(_))));
        assert!(build_global_label_space("x", core::iter::empty()).is_err());
    }

    #[test]
    fn membership_rows_follow_global_columns() {
        let vol = line(vec![3, 0, 5, 9], 1.0);
        let grid = vol.grid;
        let voxels = VoxelIndexList::new(vec![[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0]], &grid).unwrap();
        let space = GlobalLabelSpace::from_sorted("a", vec![3, 5]).unwrap();
        let m = build_membership_matrix(&vol, &voxels, &space).unwrap();
        // label 9 is outside the shared space and yields a zero row, not an error
        assert_eq!(m.column_indices(), &[0, -1, 1, -1]);
        assert_eq!((m.rows(), m.cols()), (4, 2));
        let dense = m.to_dense();
        assert_eq!(dense.row(0), &[1.0, 0.0]);
        assert_eq!(dense.row(1), &[0.0, 0.0]);
        assert_eq!(dense.row(2), &[0.0, 1.0]);
    }

    #[test]
    fn membership_all_background_is_zero() {
        let vol = line(vec![0, 0, 0], 1.0);
        let voxels = VoxelIndexList::new(vec![[0, 0, 0], [2, 0, 0]], &vol.grid).unwrap();
        let space = GlobalLabelSpace::from_sorted("a", vec![1, 2]).unwrap();
        let m = build_membership_matrix(&vol, &voxels, &space).unwrap();
        assert!(m.column_indices().iter().all(|&c| c == -1));
    }

    #[test]
    fn membership_rejects_out_of_volume_voxels() {
        let small = line(vec![1, 2], 1.0);
        let big_grid = VoxelGrid::unit([5, 1, 1]).unwrap();
        let voxels = VoxelIndexList::new(vec![[4, 0, 0]], &big_grid).unwrap();
        let space = GlobalLabelSpace::from_sorted("a", vec![1, 2]).unwrap();
        assert!(matches!(build_membership_matrix(&small, &voxels, &space), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn index_list_validation() {
        let grid = VoxelGrid::unit([2, 2, 2]).unwrap();
        assert!(VoxelIndexList::new(vec![[0, 1, 0], [0, 0, 1]], &grid).is_err());
        assert!(VoxelIndexList::new(vec![[0, 0, 0], [0, 0, 0]], &grid).is_err());
        assert!(VoxelIndexList::new(vec![[2, 0, 0]], &grid).is_err());
    }

    proptest! {
        #[test]
        fn resampling_preserves_label_subset(
            dims in prop::array::uniform3(1usize..6),
            dst_dims in prop::array::uniform3(1usize..8),
            spacing in prop::array::uniform3(0.3f64..3.0),
            seed in any::<u64>(),
        ) {
            let grid = VoxelGrid::unit(dims).unwrap();
            let labels: Vec<u32> = (0..grid.len()).map(|i| ((seed >> (i % 60)) as u32 ^ i as u32) % 5).collect();
            let vol = LabelVolume::new(grid, labels).unwrap();
            let dst = VoxelGrid::new(dst_dims, spacing).unwrap();
            let out = resample_nearest(&vol, &dst).unwrap();
            let input: BTreeSet<u32> = vol.labels.iter().copied().collect();
            prop_assert!(out.labels.iter().all(|l| input.contains(l)));
            prop_assert_eq!(out.labels.len(), dst.len());
            prop_assert_eq!(resample_nearest(&out, &dst).unwrap(), out);
        }

        #[test]
        fn extraction_matches_nested_scan(dims in prop::array::uniform3(1usize..6), bits in any::<u128>()) {
            let grid = VoxelGrid::unit(dims).unwrap();
            let member: Vec<bool> = (0..grid.len()).map(|i| (bits >> (i % 128)) & 1 == 1).collect();
            let mask = SubjectMask::new(grid, member.clone()).unwrap();
            let mut expected = Vec::new();
            for i in 0..dims[0] {
                for j in 0..dims[1] {
                    for k in 0..dims[2] {
                        if member[grid.linear_index([i, j, k])] {
                            expected.push([i, j, k]);
                        }
                    }
                }
            }
            match extract_mask_voxels(&mask) {
                Ok(list) => {
                    prop_assert_eq!(list.len(), mask.count());
                    prop_assert_eq!(list.coords(), &expected[..]);
                }
                Err(e) => {
                    prop_assert!(expected.is_empty());
                    prop_assert_eq!(e, Error::EmptyMask);
                }
            }
        }
    }
}
