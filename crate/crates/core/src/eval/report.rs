//! Assembles the evaluation report from localization output, annotations and
//! pooled actor features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::cluster::{confusion_matrix, homogeneity, hungarian_map, kmeans};
use super::{average_recall, tube_iou, video_map, RankMode, VideoScore};
use crate::error::{Error, Result};
use crate::io::VideoSequence;
use crate::localizer::{BoundingBox, LocalizationRecord};

/// Overlap thresholds reported for mAP and recall.
pub const SIGMAS: [f64; 4] = [0.1, 0.2, 0.3, 0.5];

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub label: Option<i32>,
    pub boxes: BTreeMap<usize, Vec<BoundingBox>>,
}

impl GroundTruth {
    pub fn from_sequence(seq: &VideoSequence) -> Self {
        Self {
            video_id: seq.video_id.clone(),
            label: seq.label,
            boxes: seq
                .frames
                .iter()
                .filter(|f| !f.gt_boxes.is_empty())
                .map(|f| (f.index, f.gt_boxes.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Cluster count; defaults to the number of ground-truth classes.
    pub k: Option<usize>,
    /// Also scan `k_gt..=3 k_gt` and report the best.
    pub scan_k: bool,
    pub seed: u64,
    pub rank_mode: RankMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            k: None,
            scan_k: false,
            seed: 0,
            rank_mode: RankMode::Margin,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRow {
    pub video_id: String,
    pub gt_label: Option<i32>,
    pub cluster: Option<usize>,
    pub mapped_label: Option<i32>,
    pub mean_tube_iou: f64,
    pub margin: Option<f64>,
    pub frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos_evaluated: usize,
    pub rank_mode: RankMode,
    pub k_gt: Option<usize>,
    pub k: Option<usize>,
    /// Keyed by sigma, e.g. `"0.5"`.
    pub map: Option<BTreeMap<String, f64>>,
    pub recall: BTreeMap<String, f64>,
    pub accuracy: Option<f64>,
    pub homogeneity: Option<f64>,
    pub k_opt: Option<usize>,
    pub map_k_opt: Option<BTreeMap<String, f64>>,
    /// Predicted videos without annotation; excluded from every average.
    pub missing_ground_truth: Vec<String>,
    /// Annotated videos without predictions; scored with an empty tube.
    pub missing_predictions: Vec<String>,
    /// Labelled videos without a pooled feature; excluded from recognition.
    pub missing_features: Vec<String>,
    pub warnings: usize,
    pub videos: Vec<VideoRow>,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("video_id,gt_label,cluster,mapped_label,mean_tube_iou,margin,frames\n");
        let opt = |v: Option<String>| v.unwrap_or_default();
        for r in &self.videos {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.video_id,
                opt(r.gt_label.map(|v| v.to_string())),
                opt(r.cluster.map(|v| v.to_string())),
                opt(r.mapped_label.map(|v| v.to_string())),
                r.mean_tube_iou,
                opt(r.margin.map(|v| v.to_string())),
                r.frames
            );
        }
        out
    }
}

fn sigma_key(s: f64) -> String {
    format!("{s:.1}")
}

struct Recognition {
    clusters: Vec<usize>,
    mapped: Vec<i32>,
    margins: Vec<f64>,
    accuracy: f64,
    homogeneity: f64,
}

fn recognize(features: &[&Vec<f64>], labels: &[i32], k: usize, seed: u64) -> Result<Recognition> {
    let classes: Vec<i32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let label_idx: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is in class list"))
        .collect();
    let points: Vec<Vec<f64>> = features.iter().map(|f| (*f).clone()).collect();
    let km = kmeans(&points, k, seed)?;
    let confusion = confusion_matrix(&km.assignments, &label_idx, k, classes.len())?;
    let mapping = hungarian_map(&confusion)?;
    let mapped: Vec<i32> = km.assignments.iter().map(|&c| classes[mapping.mapping[c]]).collect();
    let correct = mapped.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(Recognition {
        homogeneity: homogeneity(&km.assignments, labels)?,
        accuracy: correct as f64 / labels.len() as f64,
        clusters: km.assignments,
        mapped,
        margins: km.margins,
    })
}

fn map_table(scores: &[VideoScore], mode: RankMode) -> Result<BTreeMap<String, f64>> {
    SIGMAS
        .iter()
        .map(|&s| Ok((sigma_key(s), video_map(scores, s, mode)?)))
        .collect()
}

/// Computes every metric. Videos are processed in id order.
pub fn evaluate(
    predictions: &[LocalizationRecord],
    ground_truth: &[GroundTruth],
    features: Option<&BTreeMap<String, Vec<f64>>>,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let mut gt: BTreeMap<&str, &GroundTruth> = BTreeMap::new();
    for g in ground_truth {
        if gt.insert(g.video_id.as_str(), g).is_some() {
            return Err(Error::InvalidArgument(format!("duplicate ground truth for {}", g.video_id)));
        }
    }
    let mut tubes: BTreeMap<&str, BTreeMap<usize, BoundingBox>> = BTreeMap::new();
    for r in predictions {
        if let Some(b) = r.top_box() {
            tubes.entry(r.video_id.as_str()).or_default().insert(r.frame, b);
        } else {
            tubes.entry(r.video_id.as_str()).or_default();
        }
    }
    let missing_ground_truth: Vec<String> =
        tubes.keys().filter(|id| !gt.contains_key(*id)).map(|s| s.to_string()).collect();
    let missing_predictions: Vec<String> =
        gt.keys().filter(|id| !tubes.contains_key(*id)).map(|s| s.to_string()).collect();

    let empty = BTreeMap::new();
    let mut scores: Vec<VideoScore> = gt
        .values()
        .map(|g| {
            let pred = tubes.get(g.video_id.as_str()).unwrap_or(&empty);
            let t = tube_iou(pred, &g.boxes);
            VideoScore {
                video_id: g.video_id.clone(),
                gt_label: g.label,
                predicted_label: None,
                mapped_label: None,
                mean_tube_iou: t.mean,
                per_frame_iou: t.per_frame,
                margin: 0.0,
            }
        })
        .collect();
    let recall = SIGMAS.iter().map(|&s| (sigma_key(s), average_recall(&scores, s))).collect();

    let mut missing_features = Vec::new();
    let mut report_k = None;
    let mut k_gt = None;
    let mut map = None;
    let mut accuracy = None;
    let mut homog = None;
    let mut k_opt = None;
    let mut map_k_opt = None;
    if let Some(features) = features {
        let mut members = Vec::new();
        for (idx, s) in scores.iter().enumerate() {
            let Some(label) = s.gt_label else { continue };
            match features.get(&s.video_id) {
                Some(f) => members.push((idx, f, label)),
                None => missing_features.push(s.video_id.clone()),
            }
        }
        if !members.is_empty() {
            let feats: Vec<&Vec<f64>> = members.iter().map(|m| m.1).collect();
            let labels: Vec<i32> = members.iter().map(|m| m.2).collect();
            let classes = labels.iter().collect::<BTreeSet<_>>().len();
            let k = options.k.unwrap_or(classes);
            let rec = recognize(&feats, &labels, k, options.seed)?;
            let mut subset = Vec::with_capacity(members.len());
            for (m, &(idx, _, _)) in members.iter().enumerate() {
                let s = &mut scores[idx];
                s.predicted_label = Some(rec.clusters[m]);
                s.mapped_label = Some(rec.mapped[m]);
                s.margin = rec.margins[m];
                subset.push(s.clone());
            }
            map = Some(map_table(&subset, options.rank_mode)?);
            accuracy = Some(rec.accuracy);
            homog = Some(rec.homogeneity);
            report_k = Some(k);
            k_gt = Some(classes);

            if options.scan_k {
                let mut best: Option<(usize, f64, BTreeMap<String, f64>)> = None;
                for k in classes..=(3 * classes).min(members.len()) {
                    let r = recognize(&feats, &labels, k, options.seed)?;
                    let scan: Vec<VideoScore> = subset
                        .iter()
                        .enumerate()
                        .map(|(m, s)| VideoScore {
                            predicted_label: Some(r.clusters[m]),
                            mapped_label: Some(r.mapped[m]),
                            margin: r.margins[m],
                            ..s.clone()
                        })
                        .collect();
                    let table = map_table(&scan, options.rank_mode)?;
                    let mean = table.values().sum::<f64>() / table.len() as f64;
                    if best.as_ref().is_none_or(|b| mean > b.1) {
                        best = Some((k, mean, table));
                    }
                }
                if let Some((k, _, table)) = best {
                    k_opt = Some(k);
                    map_k_opt = Some(table);
                }
            }
        }
    }

    let videos = scores
        .iter()
        .map(|s| VideoRow {
            video_id: s.video_id.clone(),
            gt_label: s.gt_label,
            cluster: s.predicted_label,
            mapped_label: s.mapped_label,
            mean_tube_iou: s.mean_tube_iou,
            margin: s.predicted_label.map(|_| s.margin),
            frames: s.per_frame_iou.len(),
        })
        .collect();
    let warnings = missing_ground_truth.len() + missing_predictions.len() + missing_features.len();
    Ok(EvalReport {
        videos_evaluated: scores.len(),
        rank_mode: options.rank_mode,
        k_gt,
        k: report_k,
        map,
        recall,
        accuracy,
        homogeneity: homog,
        k_opt,
        map_k_opt,
        missing_ground_truth,
        missing_predictions,
        missing_features,
        warnings,
        videos,
    })
}
