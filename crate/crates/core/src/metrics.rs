//! FROC and LROC analysis with nonparametric LROC-AUC inference.
//!
//! The LROC AUC estimator is
//! `A = 1/(n_t n_c) * sum_i sum_j L_i * psi(s_i, s_j)` over target studies `i`
//! and control studies `j`, where `s` is the score of the top-1 finding,
//! `L_i` says whether that finding localizes a lesion and `psi` is the
//! Mann-Whitney kernel (1, 1/2, 0). Its variance comes from the per-study
//! structural components `v_i` and `w_j`, which pair naturally across two
//! readers for the correlated comparison.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::geometry::{flag_match, iobb3, Box3, Detection};

/// Per-study inputs to the evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyEval {
    pub study_id: String,
    pub gt_hcc: Vec<Box3>,
    pub gt_tace: Vec<Box3>,
    /// Post-pipeline detections.
    pub detections: Vec<Detection>,
}

impl StudyEval {
    pub fn is_target(&self) -> bool {
        !self.gt_hcc.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchLabel {
    /// Flags the HCC lesion with this index (highest IoBB among those it flags).
    TruePositive(usize),
    FalsePositive,
    /// Flags only TACE-treated lesions; neither TP nor FP.
    TaceIgnored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyMatch {
    pub labels: Vec<MatchLabel>,
    pub lesion_detected: Vec<bool>,
}

pub fn match_study(e: &StudyEval, tau_iobb: f64) -> StudyMatch {
    let mut lesion_detected = vec![false; e.gt_hcc.len()];
    let labels = e
        .detections
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (li, gt) in e.gt_hcc.iter().enumerate() {
                if flag_match(&d.bbox, gt, tau_iobb) {
                    lesion_detected[li] = true;
                    let o = iobb3(&d.bbox, gt);
                    if best.is_none_or(|(_, b)| o > b) {
                        best = Some((li, o));
                    }
                }
            }
            match best {
                Some((li, _)) => MatchLabel::TruePositive(li),
                None if e.gt_tace.iter().any(|gt| flag_match(&d.bbox, gt, tau_iobb)) => MatchLabel::TaceIgnored,
                None => MatchLabel::FalsePositive,
            }
        })
        .collect();
    StudyMatch { labels, lesion_detected }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrocPoint {
    pub threshold: f64,
    pub fps_per_study: f64,
    pub sensitivity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrocCurve {
    /// One point per distinct detection score, threshold descending.
    pub points: Vec<FrocPoint>,
    pub n_lesions: usize,
    pub n_studies: usize,
}

impl FrocCurve {
    pub fn within_fps(&self, max_fps: f64) -> impl Iterator<Item = &FrocPoint> {
        self.points.iter().filter(move |p| p.fps_per_study <= max_fps)
    }

    pub fn to_csv(&self, max_fps: f64) -> String {
        let mut s = String::from("threshold,fps_per_study,sensitivity\n");
        for p in self.within_fps(max_fps) {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.fps_per_study, p.sensitivity);
        }
        s
    }
}

fn distinct_desc(mut scores: Vec<f64>) -> Vec<f64> {
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    scores
}

pub fn froc(evals: &[StudyEval], tau_iobb: f64) -> Result<FrocCurve> {
    if evals.is_empty() {
        return Err(Error::EmptyCohort("no studies".into()));
    }
    let n_lesions: usize = evals.iter().map(|e| e.gt_hcc.len()).sum();
    if n_lesions == 0 {
        return Err(Error::EmptyCohort("no HCC lesions".into()));
    }
    // for each lesion, the best score among detections that flag it
    let mut lesion_scores = Vec::new();
    let mut fp_scores = Vec::new();
    let mut all_scores = Vec::new();
    for e in evals {
        let m = match_study(e, tau_iobb);
        for gt in &e.gt_hcc {
            let best = e
                .detections
                .iter()
                .filter(|d| flag_match(&d.bbox, gt, tau_iobb))
                .map(|d| d.score)
                .fold(f64::NEG_INFINITY, f64::max);
            lesion_scores.push(best);
        }
        for (d, label) in e.detections.iter().zip(&m.labels) {
            if *label == MatchLabel::FalsePositive {
                fp_scores.push(d.score);
            }
            all_scores.push(d.score);
        }
    }
    let n_studies = evals.len();
    let points = distinct_desc(all_scores)
        .into_iter()
        .map(|t| FrocPoint {
            threshold: t,
            fps_per_study: fp_scores.iter().filter(|s| **s >= t).count() as f64 / n_studies as f64,
            sensitivity: lesion_scores.iter().filter(|s| **s >= t).count() as f64 / n_lesions as f64,
        })
        .collect();
    Ok(FrocCurve { points, n_lesions, n_studies })
}

/// Step-function reading: the best sensitivity among thresholds whose
/// FPs/study does not exceed `fps_target`; 0 when none qualifies.
pub fn sensitivity_at(curve: &FrocCurve, fps_target: f64) -> f64 {
    curve
        .within_fps(fps_target)
        .map(|p| p.sensitivity)
        .fold(0.0, f64::max)
}

/// Top-1 finding of a study for LROC analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopFinding {
    pub is_target: bool,
    /// `-inf` when the study has no detections.
    pub score: f64,
    pub localized: bool,
}

/// Highest-scoring detection per study (ties: earliest in the list).
pub fn top_findings(evals: &[StudyEval], tau_iobb: f64) -> Vec<TopFinding> {
    evals
        .iter()
        .map(|e| {
            let top = e
                .detections
                .iter()
                .fold(None::<&Detection>, |best, d| match best {
                    Some(b) if b.score >= d.score => Some(b),
                    _ => Some(d),
                });
            match top {
                Some(d) => TopFinding {
                    is_target: e.is_target(),
                    score: d.score,
                    localized: e.gt_hcc.iter().any(|gt| flag_match(&d.bbox, gt, tau_iobb)),
                },
                None => TopFinding { is_target: e.is_target(), score: f64::NEG_INFINITY, localized: false },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrocPoint {
    pub threshold: f64,
    pub one_minus_specificity: f64,
    pub tplr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrocCurve {
    /// From `(0, 0)` at `+inf` to `(1, max TPLR)` at `-inf`.
    pub points: Vec<LrocPoint>,
    pub n_target: usize,
    pub n_control: usize,
}

impl LrocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].one_minus_specificity - w[0].one_minus_specificity) * 0.5 * (w[0].tplr + w[1].tplr))
            .sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,one_minus_specificity,tplr\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.threshold, p.one_minus_specificity, p.tplr);
        }
        s
    }
}

fn cohort_sizes(tops: &[TopFinding]) -> Result<(usize, usize)> {
    let n_t = tops.iter().filter(|t| t.is_target).count();
    let n_c = tops.len() - n_t;
    if n_t == 0 || n_c == 0 {
        return Err(Error::EmptyCohort(format!("{n_t} targets, {n_c} controls")));
    }
    Ok((n_t, n_c))
}

pub fn lroc_from_top(tops: &[TopFinding]) -> Result<LrocCurve> {
    let (n_t, n_c) = cohort_sizes(tops)?;
    let point = |t: f64| {
        let tp = tops.iter().filter(|f| f.is_target && f.localized && f.score >= t).count();
        let fp = tops.iter().filter(|f| !f.is_target && f.score >= t).count();
        LrocPoint { threshold: t, one_minus_specificity: fp as f64 / n_c as f64, tplr: tp as f64 / n_t as f64 }
    };
    let finite: Vec<f64> = tops.iter().map(|f| f.score).filter(|s| s.is_finite()).collect();
    let mut points = vec![point(f64::INFINITY)];
    points.extend(distinct_desc(finite).into_iter().map(point));
    points.push(point(f64::NEG_INFINITY));
    Ok(LrocCurve { points, n_target: n_t, n_control: n_c })
}

pub fn lroc(evals: &[StudyEval], tau_iobb: f64) -> Result<LrocCurve> {
    lroc_from_top(&top_findings(evals, tau_iobb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AucEstimate {
    pub auc: f64,
    #[serde(rename = "var")]
    pub variance: f64,
    pub ci95: (f64, f64),
    #[serde(rename = "n_t")]
    pub n_target: usize,
    #[serde(rename = "n_c")]
    pub n_control: usize,
}

fn psi(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// AUC plus structural components: `v` per target, `w` per control.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralComponents {
    pub auc: f64,
    pub v: Vec<f64>,
    pub w: Vec<f64>,
}

pub fn structural_components(tops: &[TopFinding]) -> Result<StructuralComponents> {
    let (n_t, n_c) = cohort_sizes(tops)?;
    let targets: Vec<&TopFinding> = tops.iter().filter(|t| t.is_target).collect();
    let controls: Vec<&TopFinding> = tops.iter().filter(|t| !t.is_target).collect();
    let kernel = |t: &TopFinding, c: &TopFinding| if t.localized { psi(t.score, c.score) } else { 0.0 };
    let v: Vec<f64> = targets
        .iter()
        .map(|t| controls.iter().map(|c| kernel(t, c)).sum::<f64>() / n_c as f64)
        .collect();
    let w: Vec<f64> = controls
        .iter()
        .map(|c| targets.iter().map(|t| kernel(t, c)).sum::<f64>() / n_t as f64)
        .collect();
    // one rounding: the kernel sum is a multiple of 0.5 and exact
    let total: f64 = targets.iter().flat_map(|t| controls.iter().map(move |c| kernel(t, c))).sum();
    let auc = total / (n_t * n_c) as f64;
    Ok(StructuralComponents { auc, v, w })
}

fn sample_variance(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

fn require_variance_sizes(n_target: usize, n_control: usize) -> Result<()> {
    if n_target < 2 || n_control < 2 {
        return Err(Error::DegenerateCohort { n_target, n_control });
    }
    Ok(())
}

pub fn auc_from_top(tops: &[TopFinding]) -> Result<AucEstimate> {
    let sc = structural_components(tops)?;
    let (n_t, n_c) = (sc.v.len(), sc.w.len());
    require_variance_sizes(n_t, n_c)?;
    let variance = sample_variance(&sc.v) / n_t as f64 + sample_variance(&sc.w) / n_c as f64;
    let half = 1.96 * variance.sqrt();
    Ok(AucEstimate {
        auc: sc.auc,
        variance,
        ci95: ((sc.auc - half).max(0.0), (sc.auc + half).min(1.0)),
        n_target: n_t,
        n_control: n_c,
    })
}

pub fn auc_lroc(evals: &[StudyEval], tau_iobb: f64) -> Result<AucEstimate> {
    auc_from_top(&top_findings(evals, tau_iobb))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub delta: f64,
    pub z: f64,
    pub p: f64,
}

/// Two-sided p-value of a standard normal statistic.
pub fn two_sided_p(z: f64) -> f64 {
    if z.is_nan() {
        return 1.0;
    }
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Paired comparison on the same studies; A − B.
pub fn compare_from_top(a: &[TopFinding], b: &[TopFinding]) -> Result<Comparison> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.is_target != y.is_target) {
        return Err(Error::MismatchedStudies("cohort membership differs".into()));
    }
    let sa = structural_components(a)?;
    let sb = structural_components(b)?;
    let (n_t, n_c) = (sa.v.len(), sa.w.len());
    require_variance_sizes(n_t, n_c)?;
    let dv: Vec<f64> = sa.v.iter().zip(&sb.v).map(|(x, y)| x - y).collect();
    let dw: Vec<f64> = sa.w.iter().zip(&sb.w).map(|(x, y)| x - y).collect();
    let var = sample_variance(&dv) / n_t as f64 + sample_variance(&dw) / n_c as f64;
    let delta = sa.auc - sb.auc;
    let z = if delta == 0.0 {
        0.0
    } else if var > 0.0 {
        delta / var.sqrt()
    } else {
        delta.signum() * f64::INFINITY
    };
    Ok(Comparison { delta, z, p: two_sided_p(z) })
}

pub fn compare_auc_paired(a: &[StudyEval], b: &[StudyEval], tau_iobb: f64) -> Result<Comparison> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.study_id != y.study_id) {
        return Err(Error::MismatchedStudies("study ids or order differ".into()));
    }
    compare_from_top(&top_findings(a, tau_iobb), &top_findings(b, tau_iobb))
}

pub fn bonferroni(p_values: &[f64], m: usize) -> Result<Vec<f64>> {
    if m < p_values.len() || m == 0 {
        return Err(Error::InvalidConfig(format!(
            "bonferroni factor {m} is smaller than the {} tests",
            p_values.len()
        )));
    }
    p_values
        .iter()
        .map(|&p| {
            if p.is_finite() && (0.0..=1.0).contains(&p) {
                Ok((p * m as f64).min(1.0))
            } else {
                Err(Error::InvalidProbability(p))
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::DetectionKind;

    fn b(lo: f64, hi: f64) -> Box3 {
        Box3::new([lo; 3], [hi; 3]).unwrap()
    }

    fn det(bx: Box3, s: f64) -> Detection {
        Detection::new(bx, s, DetectionKind::Hcc).unwrap()
    }

    fn study(id: &str, gt: Vec<Box3>, dets: Vec<Detection>) -> StudyEval {
        StudyEval { study_id: id.into(), gt_hcc: gt, gt_tace: vec![], detections: dets }
    }

    fn top(is_target: bool, score: f64, localized: bool) -> TopFinding {
        TopFinding { is_target, score, localized }
    }

    #[test]
    fn matching_examples() {
        let e = study("a", vec![b(0.0, 10.0)], vec![]);
        let m = match_study(&e, 0.3);
        assert_eq!(m.lesion_detected, vec![false]);
        assert!(m.labels.is_empty());

        let e = study("a", vec![b(0.0, 10.0)], vec![det(b(0.0, 10.0), 0.9)]);
        let m = match_study(&e, 0.3);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive(0)]);
        assert_eq!(m.lesion_detected, vec![true]);

        let e = study("a", vec![b(0.0, 10.0)], vec![det(b(0.0, 10.0), 0.9), det(b(2.0, 8.0), 0.4)]);
        let m = match_study(&e, 0.3);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive(0), MatchLabel::TruePositive(0)]);
        assert_eq!(m.lesion_detected, vec![true]);
    }

    #[test]
    fn tace_matches_are_ignored() {
        let mut e = study("a", vec![b(0.0, 4.0)], vec![det(b(20.0, 24.0), 0.8), det(b(40.0, 44.0), 0.7)]);
        e.gt_tace = vec![b(20.0, 24.0)];
        let m = match_study(&e, 0.3);
        assert_eq!(m.labels, vec![MatchLabel::TaceIgnored, MatchLabel::FalsePositive]);
    }

    #[test]
    fn tp_goes_to_highest_iobb_lesion() {
        let gt_a = Box3::new([0.0, 0.0, 0.0], [10.0, 10.0, 10.0]).unwrap();
        let gt_b = Box3::new([4.0, 0.0, 0.0], [20.0, 10.0, 10.0]).unwrap();
        let pred = Box3::new([5.0, 0.0, 0.0], [11.0, 10.0, 10.0]).unwrap();
        let e = study("a", vec![gt_a, gt_b], vec![det(pred, 0.5)]);
        let m = match_study(&e, 0.3);
        assert_eq!(m.labels, vec![MatchLabel::TruePositive(1)]);
        assert_eq!(m.lesion_detected, vec![true, true]);
    }

    #[test]
    fn froc_perfect_and_empty() {
        let evals = vec![
            study("a", vec![b(0.0, 10.0)], vec![det(b(0.0, 10.0), 0.9)]),
            study("c", vec![], vec![]),
        ];
        let c = froc(&evals, 0.3).unwrap();
        assert_eq!(c.points, vec![FrocPoint { threshold: 0.9, fps_per_study: 0.0, sensitivity: 1.0 }]);
        assert_eq!(sensitivity_at(&c, 0.0), 1.0);
        assert_eq!(sensitivity_at(&c, 0.125), 1.0);

        let empty = vec![study("a", vec![b(0.0, 10.0)], vec![]), study("c", vec![], vec![])];
        let c = froc(&empty, 0.3).unwrap();
        assert!(c.points.iter().all(|p| p.sensitivity == 0.0));
        assert_eq!(sensitivity_at(&c, 0.125), 0.0);
        assert!(froc(&[study("c", vec![], vec![])], 0.3).is_err());
        assert!(froc(&[], 0.3).is_err());
    }

    #[test]
    fn froc_step_reading() {
        let c = FrocCurve {
            points: vec![
                FrocPoint { threshold: 0.8, fps_per_study: 0.0, sensitivity: 0.4 },
                FrocPoint { threshold: 0.5, fps_per_study: 0.25, sensitivity: 0.7 },
            ],
            n_lesions: 10,
            n_studies: 4,
        };
        assert_eq!(sensitivity_at(&c, 0.125), 0.4);
        assert_eq!(sensitivity_at(&c, 0.25), 0.7);
    }

    #[test]
    fn lroc_examples() {
        let tops = vec![top(true, 0.9, true), top(true, 0.4, false), top(false, 0.5, false), top(false, 0.2, false)];
        let c = lroc_from_top(&tops).unwrap();
        let got: Vec<(f64, f64)> = c.points.iter().map(|p| (p.one_minus_specificity, p.tplr)).collect();
        // thresholds: +inf, 0.9, 0.5, 0.4, 0.2, -inf
        assert_eq!(got, vec![(0.0, 0.0), (0.0, 0.5), (0.5, 0.5), (0.5, 0.5), (1.0, 0.5), (1.0, 0.5)]);
        let a = auc_from_top(&tops).unwrap();
        assert_eq!(a.auc, 0.5);
        assert_eq!(c.area(), 0.5);

        let perfect = vec![top(true, 0.9, true), top(true, 0.8, true), top(false, 0.3, false), top(false, 0.1, false)];
        assert_eq!(auc_from_top(&perfect).unwrap().auc, 1.0);
        let c = lroc_from_top(&perfect).unwrap();
        assert!(c.points.iter().any(|p| p.one_minus_specificity == 0.0 && p.tplr == 1.0));

        let none = vec![top(true, 0.9, false), top(true, 0.8, false), top(false, 0.3, false), top(false, 0.1, false)];
        assert!(lroc_from_top(&none).unwrap().points.iter().all(|p| p.tplr == 0.0));

        let tied = vec![top(true, 0.5, true), top(true, 0.5, true), top(false, 0.5, false), top(false, 0.5, false)];
        assert_eq!(auc_from_top(&tied).unwrap().auc, 0.5);
    }

    #[test]
    fn missing_detections_sort_below_everything() {
        let tops = vec![top(true, 0.1, true), top(true, f64::NEG_INFINITY, false), top(false, f64::NEG_INFINITY, false), top(false, 0.05, false)];
        let a = auc_from_top(&tops).unwrap();
        assert_eq!(a.auc, 0.5);
        assert_eq!(lroc_from_top(&tops).unwrap().area(), 0.5);
    }

    #[test]
    fn auc_degenerate_cohorts() {
        assert!(matches!(
            auc_from_top(&[top(true, 0.9, true), top(false, 0.1, false)]),
            Err(Error::DegenerateCohort { .. })
        ));
        assert!(matches!(auc_from_top(&[top(true, 0.9, true)]), Err(Error::EmptyCohort(_))));
    }

    #[test]
    fn compare_examples() {
        let a = vec![top(true, 0.9, true), top(true, 0.6, true), top(true, 0.3, false), top(false, 0.5, false), top(false, 0.2, false), top(false, 0.1, false)];
        let same = compare_from_top(&a, &a).unwrap();
        assert_eq!((same.delta, same.z, same.p), (0.0, 0.0, 1.0));
        let b = vec![top(true, 0.4, true), top(true, 0.6, false), top(true, 0.3, false), top(false, 0.5, false), top(false, 0.2, false), top(false, 0.1, false)];
        let ab = compare_from_top(&a, &b).unwrap();
        let ba = compare_from_top(&b, &a).unwrap();
        assert!(ab.delta > 0.0 && ab.z > 0.0);
        assert_eq!(ab.delta, -ba.delta);
        assert_eq!(ab.z, -ba.z);
        assert_eq!(ab.p, ba.p);
        assert!(compare_from_top(&a, &b[..5]).is_err());
    }

    #[test]
    fn compare_rejects_different_ids() {
        let a = vec![study("a", vec![b(0.0, 1.0)], vec![]), study("b", vec![], vec![])];
        let b2 = vec![study("a", vec![b(0.0, 1.0)], vec![]), study("x", vec![], vec![])];
        assert!(matches!(compare_auc_paired(&a, &b2, 0.3), Err(Error::MismatchedStudies(_))));
    }

    #[test]
    fn bonferroni_examples() {
        assert_eq!(bonferroni(&[0.01], 3).unwrap(), vec![0.03]);
        assert_eq!(bonferroni(&[0.5], 3).unwrap(), vec![1.0]);
        assert!((bonferroni(&[0.0167], 3).unwrap()[0] - 0.0501).abs() < 1e-12);
        assert!(bonferroni(&[1.2], 3).is_err());
        assert!(bonferroni(&[0.1, 0.2], 1).is_err());
    }

    #[test]
    fn p_value_reference_points() {
        let p = two_sided_p(1.959963984540054);
        assert!((p - 0.05).abs() < 1e-9, "{p}");
        assert_eq!(two_sided_p(0.0), 1.0);
        assert_eq!(two_sided_p(f64::INFINITY), 0.0);
    }

    fn arb_tops() -> impl Strategy<Value = Vec<TopFinding>> {
        (
            prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..12),
            prop::collection::vec(0.0f64..1.0, 2..12),
        )
            .prop_map(|(t, c)| {
                t.into_iter()
                    .map(|(s, l)| top(true, s, l))
                    .chain(c.into_iter().map(|s| top(false, s, false)))
                    .collect()
            })
    }

    proptest! {
        #[test]
        fn auc_equals_trapezoid(tops in arb_tops()) {
            let a = auc_from_top(&tops).unwrap();
            let c = lroc_from_top(&tops).unwrap();
            prop_assert!((a.auc - c.area()).abs() < 1e-12);
            prop_assert!(a.ci95.0 <= a.auc && a.auc <= a.ci95.1);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(tops in arb_tops()) {
            let t: Vec<TopFinding> = tops.iter().map(|f| TopFinding { score: (3.0 * f.score).exp() - 7.0, ..*f }).collect();
            prop_assert_eq!(auc_from_top(&tops).unwrap().auc, auc_from_top(&t).unwrap().auc);
        }

        #[test]
        fn low_control_never_lowers_auc(tops in arb_tops()) {
            let before = auc_from_top(&tops).unwrap().auc;
            let mut more = tops.clone();
            more.push(top(false, -1.0, false));
            prop_assert!(auc_from_top(&more).unwrap().auc >= before - 1e-15);
        }

        #[test]
        fn lroc_curve_monotone(tops in arb_tops()) {
            let c = lroc_from_top(&tops).unwrap();
            for w in c.points.windows(2) {
                prop_assert!(w[1].one_minus_specificity >= w[0].one_minus_specificity);
                prop_assert!(w[1].tplr >= w[0].tplr);
            }
        }
    }
}
