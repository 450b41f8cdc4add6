use hpvd_core::io::{load_split, read_index};
use hpvd_core::metrics::{auc_lroc, froc, sensitivity_at, StudyEval};
use hpvd_core::phantom::{generate_dataset, write_dataset, PhantomConfig, SplitRequest};
use hpvd_core::postprocess::{pipeline, PostprocessConfig};
use hpvd_core::{Detection, DetectionKind, LesionKind, PhaseSet};
use tempfile::TempDir;

fn dataset() -> hpvd_core::phantom::Dataset {
    generate_dataset(&PhantomConfig::default(), &[SplitRequest::new("a", 5, 5), SplitRequest::new("b", 3, 2)], 12).unwrap()
}

#[test]
fn written_dataset_loads_back_identically() {
    let ds = dataset();
    let tmp = TempDir::new().unwrap();
    write_dataset(tmp.path(), &ds).unwrap();
    let idx_path = tmp.path().join("index.json");
    let idx = read_index(&idx_path).unwrap();
    assert_eq!(idx.studies.len(), 15);
    for split in ["a", "b"] {
        let loaded = load_split(&idx_path, split).unwrap();
        let original: Vec<_> = ds.split(split).into_iter().cloned().collect();
        assert_eq!(loaded, original);
    }
    assert!(load_split(&idx_path, "missing").unwrap().is_empty());
}

#[test]
fn ground_truth_as_detections_survives_the_pipeline_and_scores_perfectly() {
    let ds = dataset();
    let cfg = PostprocessConfig::default();
    let evals: Vec<StudyEval> = ds
        .split("a")
        .into_iter()
        .map(|s| {
            let dets: Vec<Detection> = s
                .lesions()
                .iter()
                .map(|l| Detection::new(l.bbox, if l.kind == LesionKind::Hcc { 0.9 } else { 0.95 }, DetectionKind::Unfiltered).unwrap())
                .collect();
            let out = pipeline(&dets, s, &cfg).unwrap();
            assert_eq!(out.hcc.len(), s.lesion_boxes(LesionKind::Hcc).len(), "{}", s.id());
            assert_eq!(out.tace.len(), s.lesion_boxes(LesionKind::Tace).len(), "{}", s.id());
            StudyEval {
                study_id: s.id().into(),
                gt_hcc: s.lesion_boxes(LesionKind::Hcc),
                gt_tace: s.lesion_boxes(LesionKind::Tace),
                detections: out.hcc,
            }
        })
        .collect();
    let auc = auc_lroc(&evals, 0.3).unwrap();
    assert_eq!(auc.auc, 1.0);
    let curve = froc(&evals, 0.3).unwrap();
    assert_eq!(sensitivity_at(&curve, 0.0), 1.0);
}

#[test]
fn phase_restriction_keeps_annotations_and_grid() {
    let ds = dataset();
    let s = ds.split("b")[0];
    let nc = s.select_phases("NC".parse::<PhaseSet>().unwrap()).unwrap();
    assert_eq!(nc.phases(), "NC".parse().unwrap());
    assert_eq!(nc.lesions(), s.lesions());
    assert_eq!(nc.dims(), s.dims());
    assert!(s.select_phases(PhaseSet::FULL).unwrap().volume(hpvd_core::Phase::DP).is_some());
}
