//! On-disk formats. Binary files are a single JSON header line followed by a
//! little-endian payload; every header can carry the producing run's config
//! hash and seed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use brainroi_core::atlas::{GlobalLabelSpace, LabelVolume, MembershipMatrix, SubjectMask, VoxelGrid};
use brainroi_core::encoder::{EncoderConfig, EncoderParams};
use brainroi_core::training::EpochRecord;
use brainroi_core::Matrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStamp {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    I32,
    U8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridVolHeader {
    pub magic: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: Dtype,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MembershipHeader {
    pub magic: String,
    pub rows: usize,
    pub cols: usize,
    pub atlas_id: String,
    pub label_ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoxelIndexHeader {
    pub magic: String,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub magic: String,
    pub config_hash: String,
    pub seed: u64,
    pub stage: u8,
    pub epoch: usize,
    pub macro_val_mse: f64,
    pub encoder: EncoderConfig,
    pub atlas_columns: Vec<usize>,
    pub tensors: Vec<TensorEntry>,
}

pub const GRIDVOL_MAGIC: &str = "gridvol1";
pub const MEMBERSHIP_MAGIC: &str = "memb1";
pub const VOXEL_INDEX_MAGIC: &str = "vidx1";
pub const CHECKPOINT_MAGIC: &str = "ckpt1";

type Parse<T> = Result<T, String>;

fn with_header<H: Serialize>(header: &H, payload: Vec<u8>) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("headers serialize");
    out.push(b'\n');
    out.extend(payload);
    out
}

fn split_header<'a, H: DeserializeOwned>(bytes: &'a [u8], magic: &str) -> Parse<(H, &'a [u8])> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or("missing header line")?;
    let raw: serde_json::Value = serde_json::from_slice(&bytes[..nl]).map_err(|e| format!("bad header: {e}"))?;
    match raw.get("magic").and_then(|m| m.as_str()) {
        Some(m) if m == magic => {}
        other => return Err(format!("expected magic `{magic}`, found {other:?}")),
    }
    let header = serde_json::from_value(raw).map_err(|e| format!("bad header: {e}"))?;
    Ok((header, &bytes[nl + 1..]))
}

fn i32_payload(payload: &[u8], count: usize) -> Parse<Vec<i32>> {
    if payload.len() != 4 * count {
        return Err(format!("payload has {} bytes, expected {}", payload.len(), 4 * count));
    }
    Ok(payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn i32_bytes(values: impl IntoIterator<Item = i32>) -> Vec<u8> {
    values.into_iter().flat_map(i32::to_le_bytes).collect()
}

fn stamp_fields(stamp: Option<&RunStamp>) -> (Option<String>, Option<u64>) {
    stamp.map_or((None, None), |s| (Some(s.config_hash.clone()), Some(s.seed)))
}

pub fn encode_label_volume(vol: &LabelVolume, stamp: Option<&RunStamp>) -> Parse<Vec<u8>> {
    let values = vol
        .labels
        .iter()
        .map(|&l| i32::try_from(l).map_err(|_| format!("label {l} does not fit in i32")))
        .collect::<Parse<Vec<i32>>>()?;
    let (config_hash, seed) = stamp_fields(stamp);
    let header = GridVolHeader {
        magic: GRIDVOL_MAGIC.into(),
        dims: vol.grid.dims,
        spacing: vol.grid.spacing,
        dtype: Dtype::I32,
        config_hash,
        seed,
    };
    Ok(with_header(&header, i32_bytes(values)))
}

pub fn encode_mask(mask: &SubjectMask, stamp: Option<&RunStamp>) -> Vec<u8> {
    let (config_hash, seed) = stamp_fields(stamp);
    let header = GridVolHeader {
        magic: GRIDVOL_MAGIC.into(),
        dims: mask.grid.dims,
        spacing: mask.grid.spacing,
        dtype: Dtype::U8,
        config_hash,
        seed,
    };
    with_header(&header, mask.member.iter().map(|&m| u8::from(m)).collect())
}

/// Header plus voxel values widened to `i64`.
pub fn decode_gridvol(bytes: &[u8]) -> Parse<(GridVolHeader, VoxelGrid, Vec<i64>)> {
    let (header, payload): (GridVolHeader, _) = split_header(bytes, GRIDVOL_MAGIC)?;
    let grid = VoxelGrid::new(header.dims, header.spacing).map_err(|e| e.to_string())?;
    let values = match header.dtype {
        Dtype::I32 => i32_payload(payload, grid.len())?.into_iter().map(i64::from).collect(),
        Dtype::U8 => {
            if payload.len() != grid.len() {
                return Err(format!("payload has {} bytes, expected {}", payload.len(), grid.len()));
            }
            payload.iter().map(|&b| i64::from(b)).collect()
        }
    };
    Ok((header, grid, values))
}

pub fn decode_label_volume(bytes: &[u8]) -> Parse<LabelVolume> {
    let (_, grid, values) = decode_gridvol(bytes)?;
    let labels = values
        .into_iter()
        .map(|v| u32::try_from(v).map_err(|_| format!("negative label {v}")))
        .collect::<Parse<Vec<u32>>>()?;
    LabelVolume::new(grid, labels).map_err(|e| e.to_string())
}

/// A voxel belongs to the mask when its value is exactly 1.
pub fn decode_mask(bytes: &[u8]) -> Parse<SubjectMask> {
    let (_, grid, values) = decode_gridvol(bytes)?;
    SubjectMask::new(grid, values.into_iter().map(|v| v == 1).collect()).map_err(|e| e.to_string())
}

pub fn encode_membership(m: &MembershipMatrix, space: &GlobalLabelSpace, stamp: Option<&RunStamp>) -> Vec<u8> {
    let (config_hash, seed) = stamp_fields(stamp);
    let header = MembershipHeader {
        magic: MEMBERSHIP_MAGIC.into(),
        rows: m.rows(),
        cols: m.cols(),
        atlas_id: m.atlas_id.clone(),
        label_ids: space.label_ids().to_vec(),
        config_hash,
        seed,
    };
    with_header(&header, i32_bytes(m.column_indices().iter().copied()))
}

pub fn decode_membership(bytes: &[u8]) -> Parse<(MembershipMatrix, GlobalLabelSpace)> {
    let (h, payload): (MembershipHeader, _) = split_header(bytes, MEMBERSHIP_MAGIC)?;
    if h.label_ids.len() != h.cols {
        return Err(format!("{} label ids for {} columns", h.label_ids.len(), h.cols));
    }
    let columns = i32_payload(payload, h.rows)?;
    let space = GlobalLabelSpace::from_sorted(h.atlas_id.clone(), h.label_ids).map_err(|e| e.to_string())?;
    let m = MembershipMatrix::new(h.atlas_id, h.cols, columns).map_err(|e| e.to_string())?;
    Ok((m, space))
}

pub fn encode_voxels(coords: &[[usize; 3]], stamp: Option<&RunStamp>) -> Parse<Vec<u8>> {
    let (config_hash, seed) = stamp_fields(stamp);
    let header = VoxelIndexHeader {
        magic: VOXEL_INDEX_MAGIC.into(),
        count: coords.len(),
        config_hash,
        seed,
    };
    let values = coords
        .iter()
        .flatten()
        .map(|&v| i32::try_from(v).map_err(|_| format!("index {v} does not fit in i32")))
        .collect::<Parse<Vec<i32>>>()?;
    Ok(with_header(&header, i32_bytes(values)))
}

/// Voxel triples; bounds are checked by the caller against its grid.
pub fn decode_voxels(bytes: &[u8]) -> Parse<Vec<[usize; 3]>> {
    let (h, payload): (VoxelIndexHeader, _) = split_header(bytes, VOXEL_INDEX_MAGIC)?;
    let flat = i32_payload(payload, 3 * h.count)?;
    flat.chunks_exact(3)
        .map(|c| {
            let idx = |v: i32| usize::try_from(v).map_err(|_| format!("negative voxel index {v}"));
            Ok([idx(c[0])?, idx(c[1])?, idx(c[2])?])
        })
        .collect()
}

pub fn encode_checkpoint(header: &CheckpointHeader, params: &EncoderParams) -> Vec<u8> {
    let tensors = params.tensors();
    let mut header = header.clone();
    header.magic = CHECKPOINT_MAGIC.into();
    header.tensors = tensors
        .iter()
        .map(|(name, t)| TensorEntry {
            name: name.clone(),
            shape: [t.rows(), t.cols()],
        })
        .collect();
    let payload = tensors.iter().flat_map(|(_, t)| t.as_slice().iter().flat_map(|v| v.to_le_bytes())).collect();
    with_header(&header, payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Parse<(CheckpointHeader, EncoderParams)> {
    let (h, payload): (CheckpointHeader, _) = split_header(bytes, CHECKPOINT_MAGIC)?;
    let expected: usize = h.tensors.iter().map(|t| 8 * t.shape[0] * t.shape[1]).sum();
    if payload.len() != expected {
        return Err(format!("payload has {} bytes, expected {expected}", payload.len()));
    }
    let mut offset = 0;
    let mut named = Vec::with_capacity(h.tensors.len());
    for t in &h.tensors {
        let n = t.shape[0] * t.shape[1];
        let data = payload[offset..offset + 8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 8 * n;
        named.push((t.name.clone(), Matrix::from_vec(t.shape[0], t.shape[1], data).map_err(|e| e.to_string())?));
    }
    let params = EncoderParams::from_named(&h.encoder, &h.atlas_columns, &named).map_err(|e| e.to_string())?;
    Ok((h, params))
}

/// Loss curve: `epoch,stage,train_mse,val_mse_<subject>...,macro_val_mse`.
pub fn loss_csv(records: &[EpochRecord], subject_ids: &[String]) -> String {
    let mut out = String::from("epoch,stage,train_mse");
    for id in subject_ids {
        let _ = write!(out, ",val_mse_{id}");
    }
    out.push_str(",macro_val_mse\n");
    for r in records {
        let _ = write!(out, "{},{},{}", r.epoch, r.stage, r.train_mse);
        for v in &r.val_mse {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", r.macro_val_mse);
    }
    out
}

/// One compact JSON document per line.
pub fn jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Parse a file with one of the decoders above, tagging errors with the path.
pub fn read_with<T>(path: &Path, decode: impl FnOnce(&[u8]) -> Parse<T>) -> CliResult<T> {
    let bytes = read_file(path)?;
    decode(&bytes).map_err(|reason| CliError::format(path, reason))
}

/// Per-command index of written files with their digests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// File name to SHA-256.
    pub files: BTreeMap<String, String>,
}

/// Write `files` into `dir` together with `<command>.manifest.json`.
pub fn write_outputs(dir: &Path, command: &str, stamp: &RunStamp, files: &[(String, Vec<u8>)]) -> CliResult<Manifest> {
    let mut manifest = Manifest {
        command: command.into(),
        config_hash: stamp.config_hash.clone(),
        seed: stamp.seed,
        files: BTreeMap::new(),
    };
    for (name, bytes) in files {
        write_file(&dir.join(name), bytes)?;
        manifest.files.insert(name.clone(), sha256_hex(bytes));
    }
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_file(&dir.join(format!("{command}.manifest.json")), &json)?;
    Ok(manifest)
}
