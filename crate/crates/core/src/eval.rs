//! Acc@threshold scoring of predictions against a manifest.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{slot_correct, BBox, GtSlot, Modality};
use crate::sample::{MigSample, PredictionRecord};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("sample {sample_id}: {predicted} predicted boxes for {expected} frames")]
    LengthMismatch {
        sample_id: String,
        expected: usize,
        predicted: usize,
    },
}

/// Fraction of frames whose prediction clears `threshold` (IoU strictly greater).
pub fn acc_at_threshold(
    pred: &PredictionRecord,
    sample: &MigSample,
    threshold: f64,
) -> Result<f64, EvalError> {
    frame_accuracy(&pred.boxes, &sample.ground_truth, threshold).ok_or_else(|| EvalError::LengthMismatch {
        sample_id: sample.sample_id.clone(),
        expected: sample.ground_truth.len(),
        predicted: pred.boxes.len(),
    })
}

/// Slice form of [`acc_at_threshold`]; `None` on empty or mismatched input.
pub fn frame_accuracy(pred: &[BBox], gt: &[GtSlot], threshold: f64) -> Option<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return None;
    }
    let correct = pred.iter().zip(gt).filter(|(p, g)| slot_correct(p, g, threshold)).count();
    Some(correct as f64 / gt.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub threshold: f64,
    /// When set, samples without a usable prediction score 0 instead of being
    /// dropped from the means.
    pub strict: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            strict: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReportIssue {
    /// A prediction whose sample id is not in the manifest.
    UnresolvedPrediction { sample_id: String },
    /// A manifest sample that received no prediction.
    MissingPrediction { sample_id: String },
    /// Prediction list length differs from the number of frames.
    Structural {
        sample_id: String,
        expected: usize,
        predicted: usize,
    },
    /// More than one prediction for the same sample; the first one is scored.
    DuplicatePrediction { sample_id: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub sample_id: String,
    pub subset: String,
    pub modality: Modality,
    /// Percentage in [0, 100].
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub mean: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub strict: bool,
    pub per_sample: Vec<SampleScore>,
    pub per_subset: BTreeMap<String, GroupScore>,
    pub per_modality: BTreeMap<Modality, GroupScore>,
    /// Unweighted mean over every scored sample.
    pub overall: GroupScore,
    /// Unweighted mean over subsets.
    pub subset_average: f64,
    pub issues: Vec<ReportIssue>,
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

pub fn evaluate_manifest(
    samples: &[MigSample],
    preds: &[PredictionRecord],
    options: EvalOptions,
) -> EvalReport {
    let index: HashMap<&str, &MigSample> =
        samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
    let mut issues = Vec::new();
    let mut by_id: HashMap<&str, &PredictionRecord> = HashMap::new();
    for p in preds {
        if !index.contains_key(p.sample_id.as_str()) {
            issues.push(ReportIssue::UnresolvedPrediction {
                sample_id: p.sample_id.clone(),
            });
            continue;
        }
        if by_id.contains_key(p.sample_id.as_str()) {
            issues.push(ReportIssue::DuplicatePrediction {
                sample_id: p.sample_id.clone(),
            });
            continue;
        }
        by_id.insert(p.sample_id.as_str(), p);
    }

    let mut per_sample = Vec::with_capacity(samples.len());
    for s in samples {
        let score = match by_id.get(s.sample_id.as_str()) {
            Some(p) => match acc_at_threshold(p, s, options.threshold) {
                Ok(acc) => Some(acc * 100.0),
                Err(EvalError::LengthMismatch {
                    expected,
                    predicted,
                    ..
                }) => {
                    issues.push(ReportIssue::Structural {
                        sample_id: s.sample_id.clone(),
                        expected,
                        predicted,
                    });
                    Some(0.0)
                }
            },
            None => {
                issues.push(ReportIssue::MissingPrediction {
                    sample_id: s.sample_id.clone(),
                });
                options.strict.then_some(0.0)
            }
        };
        if let Some(score) = score {
            per_sample.push(SampleScore {
                sample_id: s.sample_id.clone(),
                subset: s.subset.clone(),
                modality: s.x_modality(),
                score,
            });
        }
    }

    let mut subsets: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut modalities: BTreeMap<Modality, Vec<f64>> = BTreeMap::new();
    for s in &per_sample {
        subsets.entry(s.subset.clone()).or_default().push(s.score);
        modalities.entry(s.modality).or_default().push(s.score);
    }
    let group = |v: &Vec<f64>| GroupScore {
        mean: mean(v),
        count: v.len(),
    };
    let per_subset: BTreeMap<_, _> = subsets.iter().map(|(k, v)| (k.clone(), group(v))).collect();
    let per_modality: BTreeMap<_, _> = modalities.iter().map(|(k, v)| (*k, group(v))).collect();
    let all: Vec<f64> = per_sample.iter().map(|s| s.score).collect();
    let subset_means: Vec<f64> = per_subset.values().map(|g| g.mean).collect();

    EvalReport {
        threshold: options.threshold,
        strict: options.strict,
        overall: GroupScore {
            mean: mean(&all),
            count: all.len(),
        },
        subset_average: mean(&subset_means),
        per_sample,
        per_subset,
        per_modality,
        issues,
    }
}

impl EvalReport {
    /// Plain-text table: one row per run, one column per subset plus the average.
    pub fn render_table(&self, run_name: &str) -> String {
        render_runs(&[(run_name, self)])
    }
}

/// Renders several runs side by side, aligned on the union of their subsets.
pub fn render_runs(runs: &[(&str, &EvalReport)]) -> String {
    let mut subsets: Vec<&str> = runs
        .iter()
        .flat_map(|(_, r)| r.per_subset.keys().map(String::as_str))
        .collect();
    subsets.sort_unstable();
    subsets.dedup();
    let name_w = runs.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let col_w = subsets.iter().map(|s| s.len()).max().unwrap_or(0).max(7);

    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "Method");
    for s in &subsets {
        let _ = write!(out, " | {s:>col_w$}");
    }
    let _ = writeln!(out, " | {:>col_w$}", "AVG.");
    let width = out.trim_end().len();
    let _ = writeln!(out, "{}", "-".repeat(width));
    for (name, report) in runs {
        let _ = write!(out, "{name:<name_w$}");
        for s in &subsets {
            match report.per_subset.get(*s) {
                Some(g) => {
                    let _ = write!(out, " | {:>col_w$.2}", g.mean);
                }
                None => {
                    let _ = write!(out, " | {:>col_w$}", "-");
                }
            }
        }
        let _ = writeln!(out, " | {:>col_w$.2}", report.subset_average);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{BBox, GtSlot};
    use crate::sample::testing::sample;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn pred(id: &str, boxes: Vec<BBox>) -> PredictionRecord {
        PredictionRecord {
            sample_id: id.into(),
            boxes,
            modality_guess: None,
            think_text: None,
        }
    }

    /// A prediction whose IoU with (0,0,10,10) is `w / 10`.
    fn box_with_iou(w: f64) -> BBox {
        b(0., 0., w, 10.)
    }

    #[test]
    fn mixed_frames_with_absent_slot() {
        let g = b(0., 0., 10., 10.);
        let mut s = sample("s", vec![GtSlot::Box(g); 4]);
        s.ground_truth[3] = GtSlot::ABSENT;
        let p = pred(
            "s",
            vec![box_with_iou(6.), box_with_iou(4.), box_with_iou(9.), g],
        );
        // Frames: 0.6 ok, 0.4 miss, 0.9 ok, absent with non-sentinel miss.
        assert_eq!(acc_at_threshold(&p, &s, 0.5).unwrap(), 0.5);
    }

    #[test]
    fn per_frame_hand_count() {
        let ious = [0.6, 0.4, 0.9];
        let g = b(0., 0., 10., 10.);
        let hits = ious
            .iter()
            .filter(|&&v| slot_correct(&box_with_iou(v * 10.), &GtSlot::Box(g), 0.5))
            .count();
        assert_eq!(hits as f64 / 3.0, 2.0 / 3.0);
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let g = b(0., 0., 10., 10.);
        let s = sample("s", vec![GtSlot::Box(g); 6]);
        assert_eq!(acc_at_threshold(&pred("s", vec![g; 6]), &s, 0.5).unwrap(), 1.0);
        assert!(matches!(
            acc_at_threshold(&pred("s", vec![]), &s, 0.5),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn absent_frames_need_sentinel() {
        let g = b(0., 0., 10., 10.);
        let mut gt = vec![GtSlot::Box(g); 4];
        gt[1] = GtSlot::ABSENT;
        let s = sample("s", gt);
        let ok = pred("s", vec![g, BBox::SENTINEL, g, g]);
        assert_eq!(acc_at_threshold(&ok, &s, 0.5).unwrap(), 1.0);
        let miss = pred("s", vec![g, g, g, g]);
        assert_eq!(acc_at_threshold(&miss, &s, 0.5).unwrap(), 0.75);
    }

    #[test]
    fn manifest_means() {
        let g = b(0., 0., 10., 10.);
        let miss = b(50., 50., 60., 60.);
        let s1 = sample("a", vec![GtSlot::Box(g); 6]);
        let s2 = sample("b", vec![GtSlot::Box(g); 6]);
        let p1 = pred("a", vec![g, g, miss, miss, miss, miss]);
        let p2 = pred("b", vec![g, g, g, g, miss, miss]);
        let r = evaluate_manifest(&[s1, s2], &[p1, p2], EvalOptions::default());
        assert!((r.per_subset["lasher"].mean - 50.0).abs() < 1e-9);
        assert!((r.overall.mean - 50.0).abs() < 1e-9);
        assert!(r.issues.is_empty());
    }

    #[test]
    fn perfect_single_sample_is_100() {
        let g = b(0., 0., 10., 10.);
        let s = sample("a", vec![GtSlot::Box(g); 6]);
        let r = evaluate_manifest(&[s], &[pred("a", vec![g; 6])], EvalOptions::default());
        assert_eq!(r.per_subset["lasher"].mean, 100.0);
        assert_eq!(r.per_modality[&Modality::Thermal].mean, 100.0);
    }

    #[test]
    fn unresolved_and_missing_predictions() {
        let g = b(0., 0., 10., 10.);
        let s1 = sample("a", vec![GtSlot::Box(g); 6]);
        let s2 = sample("b", vec![GtSlot::Box(g); 6]);
        let preds = [pred("a", vec![g; 6]), pred("zzz", vec![g; 6])];
        let strict = evaluate_manifest(&[s1.clone(), s2.clone()], &preds, EvalOptions::default());
        assert!(strict.issues.contains(&ReportIssue::UnresolvedPrediction {
            sample_id: "zzz".into()
        }));
        assert!(strict.issues.contains(&ReportIssue::MissingPrediction {
            sample_id: "b".into()
        }));
        assert_eq!(strict.overall.mean, 50.0);

        let lenient = evaluate_manifest(
            &[s1, s2],
            &preds,
            EvalOptions {
                strict: false,
                ..Default::default()
            },
        );
        assert_eq!(lenient.overall.mean, 100.0);
        assert_eq!(lenient.overall.count, 1);
    }

    #[test]
    fn structural_errors_score_zero() {
        let g = b(0., 0., 10., 10.);
        let s = sample("a", vec![GtSlot::Box(g); 6]);
        let r = evaluate_manifest(&[s], &[pred("a", vec![g; 2])], EvalOptions::default());
        assert_eq!(r.overall.mean, 0.0);
        assert!(matches!(r.issues[0], ReportIssue::Structural { .. }));
    }

    #[test]
    fn table_lists_subsets() {
        let g = b(0., 0., 10., 10.);
        let s = sample("a", vec![GtSlot::Box(g); 6]);
        let r = evaluate_manifest(&[s], &[pred("a", vec![g; 6])], EvalOptions::default());
        let t = r.render_table("run-1");
        assert!(t.contains("lasher"));
        assert!(t.contains("100.00"));
    }
}
