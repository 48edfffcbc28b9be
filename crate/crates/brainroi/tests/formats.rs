use brainroi::formats::{
    decode_checkpoint, decode_gridvol, decode_label_volume, decode_mask, decode_membership, decode_voxels,
    encode_checkpoint, encode_label_volume, encode_mask, encode_membership, encode_voxels, jsonl, loss_csv,
    sha256_hex, CheckpointHeader, Dtype, RunStamp,
};
use brainroi_core::atlas::{GlobalLabelSpace, LabelVolume, MembershipMatrix, SubjectMask, VoxelGrid};
use brainroi_core::encoder::{EncoderConfig, EncoderParams};
use brainroi_core::training::EpochRecord;
use proptest::prelude::*;

fn le(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn with_line(header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = header.as_bytes().to_vec();
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

#[test]
fn label_volume_bytes_are_pinned() {
    let grid = VoxelGrid::new([2, 1, 2], [1.0, 2.0, 0.5]).unwrap();
    let vol = LabelVolume::new(grid, vec![3, 0, 7, 1]).unwrap();
    let expected = with_line(
        r#"{"magic":"gridvol1","dims":[2,1,2],"spacing":[1.0,2.0,0.5],"dtype":"i32"}"#,
        &le(&[3, 0, 7, 1]),
    );
    assert_eq!(encode_label_volume(&vol, None).unwrap(), expected);
    assert_eq!(decode_label_volume(&expected).unwrap(), vol);
}

#[test]
fn stamped_headers_carry_hash_and_seed() {
    let stamp = RunStamp {
        config_hash: "ab12".into(),
        seed: 9,
    };
    let mask = SubjectMask::new(VoxelGrid::unit([3, 1, 1]).unwrap(), vec![true, false, true]).unwrap();
    let bytes = encode_mask(&mask, Some(&stamp));
    let expected = with_line(
        r#"{"magic":"gridvol1","dims":[3,1,1],"spacing":[1.0,1.0,1.0],"dtype":"u8","config_hash":"ab12","seed":9}"#,
        &[1, 0, 1],
    );
    assert_eq!(bytes, expected);
    let (h, _, values) = decode_gridvol(&bytes).unwrap();
    assert_eq!(h.dtype, Dtype::U8);
    assert_eq!((h.config_hash.as_deref(), h.seed), (Some("ab12"), Some(9)));
    assert_eq!(values, vec![1, 0, 1]);
}

#[test]
fn mask_membership_requires_value_one() {
    let bytes = with_line(r#"{"magic":"gridvol1","dims":[4,1,1],"spacing":[1,1,1],"dtype":"u8"}"#, &[0, 1, 2, 1]);
    let mask = decode_mask(&bytes).unwrap();
    assert_eq!(mask.member, vec![false, true, false, true]);
    // an i32 volume with label values works as a mask too
    let bytes = with_line(r#"{"magic":"gridvol1","dims":[2,1,1],"spacing":[1,1,1],"dtype":"i32"}"#, &le(&[1, 5]));
    assert_eq!(decode_mask(&bytes).unwrap().member, vec![true, false]);
}

#[test]
fn membership_and_voxel_bytes_are_pinned() {
    let m = MembershipMatrix::new("aal", 2, vec![1, -1, 0]).unwrap();
    let space = GlobalLabelSpace::from_sorted("aal", vec![4, 9]).unwrap();
    let expected = with_line(
        r#"{"magic":"memb1","rows":3,"cols":2,"atlas_id":"aal","label_ids":[4,9]}"#,
        &le(&[1, -1, 0]),
    );
    assert_eq!(encode_membership(&m, &space, None), expected);
    let (m2, s2) = decode_membership(&expected).unwrap();
    assert_eq!((m2, s2), (m, space));

    let coords = [[0, 1, 2], [3, 0, 1]];
    let expected = with_line(r#"{"magic":"vidx1","count":2}"#, &le(&[0, 1, 2, 3, 0, 1]));
    assert_eq!(encode_voxels(&coords, None).unwrap(), expected);
    assert_eq!(decode_voxels(&expected).unwrap(), coords.to_vec());
}

#[test]
fn corrupt_inputs_are_rejected() {
    let good = with_line(r#"{"magic":"vidx1","count":1}"#, &le(&[0, 0, 0]));
    assert!(decode_voxels(&good).is_ok());
    let cases: Vec<(&str, Vec<u8>)> = vec![
        ("no newline", br#"{"magic":"vidx1","count":1}"#.to_vec()),
        ("wrong magic", with_line(r#"{"magic":"memb1","count":1}"#, &le(&[0, 0, 0]))),
        ("short payload", with_line(r#"{"magic":"vidx1","count":2}"#, &le(&[0, 0, 0]))),
        ("negative index", with_line(r#"{"magic":"vidx1","count":1}"#, &le(&[0, -2, 0]))),
        ("not json", with_line("vidx1 1", &le(&[0, 0, 0]))),
    ];
    for (what, bytes) in cases {
        assert!(decode_voxels(&bytes).is_err(), "{what}");
    }
    let bad_labels = with_line(r#"{"magic":"memb1","rows":1,"cols":2,"atlas_id":"a","label_ids":[1]}"#, &le(&[0]));
    assert!(decode_membership(&bad_labels).unwrap_err().contains("label ids"));
    let negative = with_line(r#"{"magic":"gridvol1","dims":[1,1,1],"spacing":[1,1,1],"dtype":"i32"}"#, &le(&[-1]));
    assert!(decode_label_volume(&negative).is_err());
    let zero_dim = with_line(r#"{"magic":"gridvol1","dims":[0,1,1],"spacing":[1,1,1],"dtype":"u8"}"#, &[]);
    assert!(decode_gridvol(&zero_dim).is_err());
}

fn checkpoint_fixture() -> (CheckpointHeader, EncoderParams) {
    let cfg = EncoderConfig::default();
    let params = EncoderParams::init(&cfg, &[4, 6], 3).unwrap();
    let header = CheckpointHeader {
        magic: String::new(),
        config_hash: "feed".into(),
        seed: 42,
        stage: 2,
        epoch: 17,
        macro_val_mse: 0.125,
        encoder: cfg,
        atlas_columns: vec![4, 6],
        tensors: Vec::new(),
    };
    (header, params)
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (header, params) = checkpoint_fixture();
    let bytes = encode_checkpoint(&header, &params);
    let (h, p) = decode_checkpoint(&bytes).unwrap();
    assert_eq!(p, params);
    assert_eq!(h.magic, "ckpt1");
    assert_eq!((h.stage, h.epoch, h.seed, h.config_hash.as_str()), (2, 17, 42, "feed"));
    assert_eq!(h.tensors.len(), params.tensors().len());
    let payload: usize = h.tensors.iter().map(|t| t.shape[0] * t.shape[1]).sum();
    assert_eq!(payload, params.parameter_count());
    // re-encoding the decoded pair reproduces the bytes
    assert_eq!(encode_checkpoint(&h, &p), bytes);
}

#[test]
fn checkpoint_rejects_truncation_and_shape_drift() {
    let (header, params) = checkpoint_fixture();
    let bytes = encode_checkpoint(&header, &params);
    assert!(decode_checkpoint(&bytes[..bytes.len() - 8]).is_err());
    let (mut h, _) = decode_checkpoint(&bytes).unwrap();
    h.atlas_columns = vec![4, 7];
    let drifted = encode_checkpoint(&h, &params);
    assert!(decode_checkpoint(&drifted).is_err());
}

#[test]
fn loss_csv_layout() {
    let rec = |epoch, val: Vec<f64>| EpochRecord {
        epoch,
        stage: 1,
        train_mse: 0.5,
        macro_val_mse: val.iter().sum::<f64>() / val.len() as f64,
        val_mse: val,
    };
    let csv = loss_csv(&[rec(0, vec![1.0, 3.0]), rec(1, vec![0.25, 0.75])], &["s1".into(), "s2".into()]);
    assert_eq!(
        csv,
        "epoch,stage,train_mse,val_mse_s1,val_mse_s2,macro_val_mse\n0,1,0.5,1,3,2\n1,1,0.5,0.25,0.75,0.5\n"
    );
}

#[test]
fn jsonl_and_digest() {
    #[derive(serde::Serialize)]
    struct R {
        a: u8,
    }
    assert_eq!(jsonl(&[R { a: 1 }, R { a: 2 }]), "{\"a\":1}\n{\"a\":2}\n");
    assert_eq!(sha256_hex(b"abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

proptest! {
    #[test]
    fn label_volumes_round_trip(dims in prop::array::uniform3(1usize..5), seed in any::<u64>()) {
        let grid = VoxelGrid::unit(dims).unwrap();
        let labels = (0..grid.len()).map(|i| ((seed >> (i % 48)) as u32 ^ i as u32) % 1000).collect();
        let vol = LabelVolume::new(grid, labels).unwrap();
        prop_assert_eq!(decode_label_volume(&encode_label_volume(&vol, None).unwrap()).unwrap(), vol);
    }

    #[test]
    fn masks_round_trip(dims in prop::array::uniform3(1usize..5), bits in any::<u64>()) {
        let grid = VoxelGrid::unit(dims).unwrap();
        let member = (0..grid.len()).map(|i| (bits >> (i % 64)) & 1 == 1).collect();
        let mask = SubjectMask::new(grid, member).unwrap();
        prop_assert_eq!(decode_mask(&encode_mask(&mask, None)).unwrap(), mask);
    }

    #[test]
    fn memberships_round_trip(cols in 1usize..6, rows in prop::collection::vec(-1i32..6, 1..40)) {
        let rows: Vec<i32> = rows.into_iter().map(|c| if c >= cols as i32 { -1 } else { c }).collect();
        let m = MembershipMatrix::new("x", cols, rows).unwrap();
        let space = GlobalLabelSpace::from_sorted("x", (1..=cols as u32).map(|l| 2 * l).collect()).unwrap();
        let (m2, s2) = decode_membership(&encode_membership(&m, &space, None)).unwrap();
        prop_assert_eq!(m2, m);
        prop_assert_eq!(s2, space);
    }
}
