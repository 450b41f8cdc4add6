use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hpvd_cli::{build_evals, evaluate, EvalConfig, EvalMode};
use hpvd_core::io::{self, read_detections, StudyDetections};
use hpvd_core::{Detection, DetectionKind, LesionKind, PhaseSet};
use tempfile::TempDir;

fn hpvd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hpvd")).args(args).output().expect("spawn hpvd")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "hpvd failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantom(dir: &Path, splits: &[&str], seed: u64) -> PathBuf {
    let seed = seed.to_string();
    let mut args = vec!["phantom", "--seed", &seed, "--out", s(dir)];
    for sp in splits {
        args.extend(["--split", sp]);
    }
    ok(&hpvd(&args));
    dir.join("index.json")
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

const TINY_TRAIN: &str = r#"{"train": {"batches": 5, "batch_size": 2, "crop": [16, 16, 8]}}"#;

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, TINY_TRAIN).unwrap();
    p
}

#[test]
fn phantom_writes_the_requested_studies_reproducibly() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let idx = phantom(&a, &["train=8:8"], 1);
    phantom(&b, &["train=8:8"], 1);
    let index = io::read_index(&idx).unwrap();
    assert_eq!(index.split("train").count(), 16);
    let studies = io::load_split(&idx, "train").unwrap();
    assert_eq!(studies.iter().filter(|s| s.is_target()).count(), 8);
    assert_eq!(tree_bytes(&a), tree_bytes(&b));
}

#[test]
fn phantom_into_an_unwritable_path_fails() {
    let tmp = TempDir::new().unwrap();
    let file = tmp.path().join("plain_file");
    fs::write(&file, b"x").unwrap();
    let out = hpvd(&["phantom", "--split", "t=1:1", "--out", s(&file.join("sub"))]);
    assert_ne!(code(&out), 0);
    assert!(!out.stderr.is_empty());
}

#[test]
fn usage_and_config_errors_exit_with_code_two() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&hpvd(&["phantom", "--split", "nonsense"])), 2);
    assert_eq!(code(&hpvd(&["frobnicate"])), 2);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, r#"{"train": {"batchez": 3}}"#).unwrap();
    let out = hpvd(&["phantom", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = hpvd(&["infer", "--index", "x", "--checkpoint", "y", "--phases", "NC+XX"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = hpvd(&["train", "--index", s(&tmp.path().join("nope.json")), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn divergence_exits_with_code_four() {
    let tmp = TempDir::new().unwrap();
    let idx = phantom(&tmp.path().join("ds"), &["train=2:2"], 3);
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"train": {"batches": 2, "batch_size": 2, "crop": [16, 16, 8], "divergence_threshold": 1e-9}}"#).unwrap();
    let out = hpvd(&["train", "--index", s(&idx), "--config", s(&cfg), "--out", s(&tmp.path().join("m"))]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn train_infer_eval_compare_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let root = tmp.path();
    let idx = phantom(&root.join("ds"), &["train=3:3", "test=3:3", "empty=0:0"], 4);
    let cfg = tiny_config(root);

    let model = root.join("model");
    ok(&hpvd(&["train", "--seed", "9", "--index", s(&idx), "--config", s(&cfg), "--out", s(&model)]));
    let log = fs::read_to_string(model.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("batch,loss,lr,phase_subset"));
    assert_eq!(log.lines().count(), 1 + 5);
    let model2 = root.join("model2");
    ok(&hpvd(&["train", "--seed", "9", "--index", s(&idx), "--config", s(&cfg), "--out", s(&model2)]));
    assert_eq!(fs::read(model.join("checkpoint.json")).unwrap(), fs::read(model2.join("checkpoint.json")).unwrap());

    // one test study loses its NC phase: it must be reported, not abort the run
    let index = io::read_index(&idx).unwrap();
    let victim = index.split("test").next().unwrap().clone();
    let vdir = root.join("ds").join(&victim.dir);
    let reduced = io::load_study(&vdir).unwrap().select_phases("AP+VP+DP".parse().unwrap()).unwrap();
    fs::remove_dir_all(&vdir).unwrap();
    io::save_study(&reduced, &vdir, io::Dtype::Int16Le).unwrap();

    let ckpt = model.join("checkpoint.json");
    let inf = root.join("inf_nc");
    ok(&hpvd(&["infer", "--index", s(&idx), "--checkpoint", s(&ckpt), "--phases", "NC", "--out", s(&inf)]));
    let raw = read_detections(&inf.join("detections_raw.json")).unwrap();
    let fin = read_detections(&inf.join("detections.json")).unwrap();
    let errors: serde_json::Value = serde_json::from_slice(&fs::read(inf.join("errors.json")).unwrap()).unwrap();
    assert_eq!(errors.as_array().unwrap().len(), 1);
    assert_eq!(errors[0]["study_id"], victim.id.as_str());
    assert_eq!(errors[0]["code"], "missing_phase");
    assert_eq!(raw.len(), 5);
    for (r, f) in raw.iter().zip(&fin) {
        assert_eq!(r.study_id, f.study_id);
        assert!(r.detections.len() >= f.detections.len());
        assert!(f.detections.iter().all(|d| d.kind == DetectionKind::Hcc));
    }

    let inf_all = root.join("inf_all");
    ok(&hpvd(&["infer", "--index", s(&idx), "--checkpoint", s(&ckpt), "--phases", "AP,VP", "--out", s(&inf_all)]));
    let inf_empty = root.join("inf_empty");
    ok(&hpvd(&["infer", "--index", s(&idx), "--split", "empty", "--checkpoint", s(&ckpt), "--out", s(&inf_empty)]));
    assert!(read_detections(&inf_empty.join("detections.json")).unwrap().is_empty());

    let ev = root.join("eval");
    ok(&hpvd(&["eval", "--index", s(&idx), "--detections", s(&inf_all.join("detections.json")), "--out", s(&ev)]));
    let evals = build_evals(&idx, "test", read_detections(&inf_all.join("detections.json")).unwrap()).unwrap();
    let (report, froc_csv, lroc_csv) = evaluate(&evals, &EvalConfig::default(), EvalMode::Both).unwrap();
    assert_eq!(fs::read_to_string(ev.join("froc.csv")).unwrap(), froc_csv.unwrap());
    assert_eq!(fs::read_to_string(ev.join("lroc.csv")).unwrap(), lroc_csv.unwrap());
    let mut expected = serde_json::to_string_pretty(&report).unwrap();
    expected.push('\n');
    assert_eq!(fs::read_to_string(ev.join("auc.json")).unwrap(), expected);

    let det_path = inf_all.join("detections.json");
    let cmp = root.join("cmp");
    ok(&hpvd(&["compare", "--index", s(&idx), "--a", s(&det_path), "--b", s(&det_path), "--m", "3", "--out", s(&cmp)]));
    let c: serde_json::Value = serde_json::from_slice(&fs::read(cmp.join("comparison.json")).unwrap()).unwrap();
    assert_eq!(c["p"], 1.0);
    assert_eq!(c["delta"], 0.0);
    assert_eq!(c["p_bonferroni"], 1.0);

    // the NC run lacks one study; the paired comparison must refuse it
    let out = hpvd(&["compare", "--index", s(&idx), "--a", s(&det_path), "--b", s(&inf.join("detections.json")), "--out", s(&cmp)]);
    assert_eq!(code(&out), 3);
}

/// Writes detections that hit every HCC lesion with the top score and put a
/// weaker miss in every control.
fn perfect_detections(idx: &Path, split: &str) -> Vec<StudyDetections> {
    io::load_split(idx, split)
        .unwrap()
        .iter()
        .map(|st| {
            let mut dets: Vec<Detection> = st
                .lesion_boxes(LesionKind::Hcc)
                .into_iter()
                .map(|b| Detection::new(b, 0.9, DetectionKind::Hcc).unwrap())
                .collect();
            if dets.is_empty() {
                let b = hpvd_core::Box3::new([0.0; 3], [2.0, 2.0, 1.0]).unwrap();
                dets.push(Detection::new(b, 0.2, DetectionKind::Hcc).unwrap());
            }
            StudyDetections { study_id: st.id().to_string(), detections: dets }
        })
        .collect()
}

#[test]
fn perfect_detections_give_unit_auc_and_bonferroni_scales_p() {
    let tmp = TempDir::new().unwrap();
    let idx = phantom(&tmp.path().join("ds"), &["test=4:4"], 8);
    let perfect = perfect_detections(&idx, "test");
    let a = tmp.path().join("a.json");
    io::write_detections(&a, &perfect).unwrap();
    let ev = tmp.path().join("ev");
    ok(&hpvd(&["eval", "--index", s(&idx), "--detections", s(&a), "--mode", "lroc", "--out", s(&ev)]));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("auc.json")).unwrap()).unwrap();
    assert_eq!(r["lroc"]["auc"], 1.0);
    assert!(!ev.join("froc.csv").exists());

    ok(&hpvd(&["eval", "--index", s(&idx), "--detections", s(&a), "--mode", "froc", "--out", s(&ev)]));
    let froc = fs::read_to_string(ev.join("froc.csv")).unwrap();
    assert_eq!(froc.lines().next(), Some("threshold,fps_per_study,sensitivity"));

    // drop the lesion hits of half the targets in B
    let mut weaker = perfect.clone();
    let mut dropped = 0;
    for sd in &mut weaker {
        if sd.detections[0].score == 0.9 && dropped < 2 {
            sd.detections.iter_mut().for_each(|d| d.score = 0.1);
            dropped += 1;
        }
    }
    let b = tmp.path().join("b.json");
    io::write_detections(&b, &weaker).unwrap();
    let read = |m: &str| {
        let out = tmp.path().join(format!("cmp{m}"));
        ok(&hpvd(&["compare", "--index", s(&idx), "--a", s(&a), "--b", s(&b), "--m", m, "--out", s(&out)]));
        serde_json::from_slice::<serde_json::Value>(&fs::read(out.join("comparison.json")).unwrap()).unwrap()
    };
    let (one, three) = (read("1"), read("3"));
    let p = one["p"].as_f64().unwrap();
    assert!(p > 0.0 && p < 1.0 / 3.0, "p = {p}");
    assert_eq!(three["p_bonferroni"].as_f64().unwrap(), p * 3.0);
    assert_eq!(one["p_bonferroni"].as_f64().unwrap(), p);
}

#[test]
fn eval_rejects_detections_for_unknown_studies() {
    let tmp = TempDir::new().unwrap();
    let idx = phantom(&tmp.path().join("ds"), &["test=2:2"], 2);
    let mut dets = perfect_detections(&idx, "test");
    dets.push(StudyDetections { study_id: "ghost".into(), detections: vec![] });
    let p = tmp.path().join("d.json");
    io::write_detections(&p, &dets).unwrap();
    let out = hpvd(&["eval", "--index", s(&idx), "--detections", s(&p), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 3);
}

#[test]
fn phase_selector_limits_inference_to_the_requested_phases() {
    let tmp = TempDir::new().unwrap();
    let idx = phantom(&tmp.path().join("ds"), &["train=2:2", "test=1:0"], 6);
    let cfg = tiny_config(tmp.path());
    let model = tmp.path().join("m");
    ok(&hpvd(&["train", "--index", s(&idx), "--config", s(&cfg), "--out", s(&model)]));
    let ckpt = hpvd_net::Checkpoint::load(&model.join("checkpoint.json")).unwrap();
    let study = &io::load_split(&idx, "test").unwrap()[0];
    let nc: PhaseSet = "NC".parse().unwrap();
    let run_cfg = hpvd_cli::RunConfig::default();
    let (raw_full_study, _) = hpvd_cli::detect_study(study, &ckpt, nc, &run_cfg).unwrap();
    let (raw_nc_only, _) = hpvd_cli::detect_study(&study.select_phases(nc).unwrap(), &ckpt, nc, &run_cfg).unwrap();
    assert_eq!(raw_full_study, raw_nc_only);
    let out = tmp.path().join("inf");
    ok(&hpvd(&["infer", "--index", s(&idx), "--checkpoint", s(&model.join("checkpoint.json")), "--phases", "NC", "--out", s(&out)]));
    assert_eq!(read_detections(&out.join("detections_raw.json")).unwrap()[0].detections, raw_nc_only);
}
