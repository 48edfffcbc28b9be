mod common;

use std::path::Path;

use brainroi::formats::{decode_checkpoint, decode_membership, decode_voxels, sha256_hex, Manifest};
use brainroi::RunConfig;
use brainroi_core::training::{generate_synthetic_dataset, SyntheticDatasetSpec};
use common::*;

fn le(values: &[i32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn with_line(header: &str, payload: &[u8]) -> Vec<u8> {
    let mut out = header.as_bytes().to_vec();
    out.push(b'\n');
    out.extend_from_slice(payload);
    out
}

/// Every file a manifest lists exists and matches its digest.
fn check_manifest(dir: &Path, command: &str) -> Manifest {
    let m: Manifest = serde_json::from_slice(&read(dir.join(format!("{command}.manifest.json")))).unwrap();
    assert_eq!(m.command, command);
    assert_eq!(m.config_hash.len(), 64);
    for (name, digest) in &m.files {
        assert_eq!(&sha256_hex(&read(dir.join(name))), digest, "{name}");
    }
    m
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), read(&p)));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = brainroi(dir.path(), &["--help"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("atlas-build"));
    let o = brainroi(dir.path(), &["train", "--stage", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error[usage]:"), "{}", stderr(&o));
    let o = brainroi(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn print_config_round_trips_and_applies_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = brainroi(dir.path(), &["--seed", "7", "print-config"]);
    assert!(o.status.success());
    let path = dir.path().join("printed.json");
    std::fs::write(&path, &o.stdout).unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(cfg.paths.checkpoints, dir.path().join("checkpoints"));
    assert!(stderr(&o).contains(&cfg.hash()));
}

#[test]
fn config_errors_are_reported_with_kind() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"ipo": {"pool_capacity": 0}}"#).unwrap();
    let o = brainroi(dir.path(), &["--config", bad.to_str().unwrap(), "print-config"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));

    std::fs::write(&bad, "{not json").unwrap();
    let o = brainroi(dir.path(), &["--config", bad.to_str().unwrap(), "print-config"]);
    assert!(stderr(&o).starts_with("error[config]:"));

    let o = brainroi(dir.path(), &["ipo", "--generator", "http"]);
    assert!(stderr(&o).starts_with("error[config]:") && stderr(&o).contains("endpoint"));
}

#[test]
fn stage_two_and_captioning_need_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["train", "--stage", "2"][..], &["ipo"], &["decode"], &["eval"]] {
        let o = brainroi(dir.path(), args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        let err = stderr(&o);
        assert!(err.starts_with("error[missing-artifact]:"), "{args:?}: {err}");
        assert!(err.contains("brainroi train"));
    }
    assert!(!dir.path().join("checkpoints").exists());
}

#[test]
fn synthetic_atlas_build_matches_dataset_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["atlas-build"]);
    let ds = dir.path().join("dataset");
    let manifest = check_manifest(&ds, "atlas-build");
    check_manifest(&ds.join("volumes"), "volumes");
    assert_eq!(manifest.files.len(), 4 * 3);
    assert_eq!(manifest.config_hash, RunConfig::default().hash());

    let data = generate_synthetic_dataset(&SyntheticDatasetSpec::default()).unwrap();
    for s in &data.subjects {
        for (a, expected) in s.memberships.iter().enumerate() {
            let bytes = read(ds.join(&s.id).join(format!("atlas{a}.memb")));
            let (m, space) = decode_membership(&bytes).unwrap();
            assert_eq!(&m, expected, "{} atlas{a}", s.id);
            assert_eq!(space, data.label_spaces[a]);
        }
        let coords = decode_voxels(&read(ds.join(&s.id).join("voxels.vidx"))).unwrap();
        assert_eq!(coords, s.voxels.coords());
    }

    let first = snapshot(dir.path());
    ok(dir.path(), &["atlas-build"]);
    assert_eq!(snapshot(dir.path()), first);
}

#[test]
fn fixture_volumes_give_known_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path().join("vols");
    std::fs::create_dir_all(&v).unwrap();
    let grid = |dims: &str, spacing: &str, dtype: &str| {
        format!(r#"{{"magic":"gridvol1","dims":{dims},"spacing":{spacing},"dtype":"{dtype}"}}"#)
    };
    std::fs::write(v.join("lobes.gridvol"), with_line(&grid("[2,2,1]", "[1,1,1]", "i32"), &le(&[1, 2, 0, 2]))).unwrap();
    // same grid as the atlas
    std::fs::write(v.join("subjA.gridvol"), with_line(&grid("[2,2,1]", "[1,1,1]", "u8"), &[1, 1, 0, 1])).unwrap();
    // half spacing along x: resampled labels are [1, 1, 0, 0]
    std::fs::write(v.join("subjB.gridvol"), with_line(&grid("[4,1,1]", "[0.5,1,1]", "u8"), &[0, 1, 1, 0])).unwrap();
    let p = |n: &str| v.join(n).to_str().unwrap().to_string();
    let args = ["atlas-build", "--atlas", &p("lobes.gridvol"), "--mask", &p("subjA.gridvol"), "--mask", &p("subjB.gridvol")];
    ok(dir.path(), &args);

    let hash = RunConfig::default().hash();
    let stamp = format!(r#","config_hash":"{hash}","seed":42}}"#);
    let memb = |rows: usize| format!(r#"{{"magic":"memb1","rows":{rows},"cols":2,"atlas_id":"lobes","label_ids":[1,2]{stamp}"#);
    let vidx = |count: usize| format!(r#"{{"magic":"vidx1","count":{count}{stamp}"#);
    let ds = dir.path().join("dataset");
    let expected = [
        ("subjA/lobes.memb", with_line(&memb(3), &le(&[0, 1, 1]))),
        ("subjB/lobes.memb", with_line(&memb(2), &le(&[0, -1]))),
        ("subjA/voxels.vidx", with_line(&vidx(3), &le(&[0, 0, 0, 0, 1, 0, 1, 1, 0]))),
        ("subjB/voxels.vidx", with_line(&vidx(2), &le(&[1, 0, 0, 2, 0, 0]))),
    ];
    let manifest = check_manifest(&ds, "atlas-build");
    assert_eq!(manifest.files.len(), expected.len());
    for (name, bytes) in expected {
        assert_eq!(read(ds.join(name)), bytes, "{name}");
        assert_eq!(manifest.files[name], sha256_hex(&bytes));
    }
}

#[test]
fn atlas_build_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let v = dir.path();
    let header = r#"{"magic":"gridvol1","dims":[2,1,1],"spacing":[1,1,1],"dtype":"u8"}"#;
    std::fs::write(v.join("atlas.gridvol"), with_line(&header.replace("u8", "i32"), &le(&[1, 2]))).unwrap();
    std::fs::write(v.join("empty.gridvol"), with_line(header, &[0, 0])).unwrap();
    std::fs::write(v.join("broken.gridvol"), with_line(header, &[1])).unwrap();
    let p = |n: &str| v.join(n).to_str().unwrap().to_string();

    let o = brainroi(v, &["atlas-build", "--atlas", &p("atlas.gridvol"), "--mask", &p("empty.gridvol")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[empty-mask]:") && stderr(&o).contains("empty.gridvol"), "{}", stderr(&o));

    let o = brainroi(v, &["atlas-build", "--atlas", &p("atlas.gridvol"), "--mask", &p("broken.gridvol")]);
    assert!(stderr(&o).starts_with("error[format]:") && stderr(&o).contains("broken.gridvol"));

    let o = brainroi(v, &["atlas-build", "--atlas", &p("atlas.gridvol"), "--mask", &p("absent.gridvol")]);
    assert!(stderr(&o).starts_with("error[io]:"));

    let o = brainroi(v, &["atlas-build", "--atlas", &p("atlas.gridvol")]);
    assert!(stderr(&o).starts_with("error[config]:"));
    assert!(!v.join("dataset").exists());
}

#[test]
fn quick_pipeline_outputs_and_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = quick_trained(root);
    let c = cfg.to_str().unwrap();
    let ck = root.join("checkpoints");
    let m1 = check_manifest(&ck, "train-stage1");
    check_manifest(&ck, "train-stage2");
    assert_eq!(m1.seed, 42);

    let csv = String::from_utf8(read(ck.join("loss_stage1.csv"))).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "epoch,stage,train_mse,val_mse_subj01,val_mse_subj02,val_mse_subj03,val_mse_subj04,macro_val_mse"
    );
    assert_eq!(lines.len(), 1 + 4);
    let meta = read_json(ck.join("stage2.meta.json"));
    assert_eq!(meta["seed"], 42);
    assert_eq!(meta["config_hash"], m1.config_hash.as_str());
    let (h, _) = decode_checkpoint(&read(ck.join("stage2.ckpt"))).unwrap();
    assert_eq!((h.stage, h.seed), (2, 42));
    assert_eq!(h.config_hash, m1.config_hash);

    ok(root, &["--config", c, "ipo"]);
    ok(root, &["--config", c, "decode", "--split", "val"]);
    ok(root, &["--config", c, "eval"]);
    let rp = root.join("reports");
    check_manifest(&rp, "decode");
    check_manifest(&rp, "eval");
    let gens = String::from_utf8(read(rp.join("generations_val.jsonl"))).unwrap();
    assert_eq!(gens.lines().count(), 4 * 8);
    let best = String::from_utf8(read(root.join("traces/best_prompt.txt"))).unwrap();
    assert_eq!(read_json(rp.join("decode_val.meta.json"))["prompt"], best.trim_end());
    let subjects = String::from_utf8(read(rp.join("subjects.md"))).unwrap();
    assert!(subjects.starts_with("| Subject | BLEU-1 | BLEU-2 | BLEU-3 | BLEU-4 | ROUGE-L | CIDEr |\n"));
    assert_eq!(subjects.lines().count(), 2 + 4 + 1);

    let first = snapshot(root);
    ok(root, &["--config", c, "train"]);
    ok(root, &["--config", c, "ipo"]);
    ok(root, &["--config", c, "decode", "--split", "val"]);
    ok(root, &["--config", c, "eval"]);
    assert_eq!(snapshot(root), first);

    // training stage 2 alone reuses the saved stage-1 checkpoint
    ok(root, &["--config", c, "train", "--stage", "2"]);
    assert_eq!(read(ck.join("stage2.ckpt")), first.iter().find(|(n, _)| n == "checkpoints/stage2.ckpt").unwrap().1);
}

#[test]
fn prompt_flags_are_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_trained(dir.path());
    let c = cfg.to_str().unwrap();
    let o = brainroi(dir.path(), &["--config", c, "decode", "--prompt", "no marker"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[invalid-input]:"), "{}", stderr(&o));

    let out = ok(dir.path(), &["--config", c, "decode", "--prompt", "Write a brief caption for <image>.", "--num-beams", "1"]);
    assert!(out.contains("40 captions"));
    let meta = read_json(dir.path().join("reports/decode_test.meta.json"));
    assert_eq!(meta["decode"]["num_beams"], 1);
    assert_eq!(meta["prompt"], "Write a brief caption for <image>.");

    let o = brainroi(dir.path(), &["--config", c, "decode", "--num-beams", "0"]);
    assert_eq!(o.status.code(), Some(1));
}
