//! Localization metrics and the unsupervised recognition protocol.

mod cluster;
mod report;

pub use cluster::{
    confusion_matrix, homogeneity, hungarian_map, kmeans, min_cost_assignment, pool_video_feature, KMeansResult,
    LabelMapping,
};
pub use report::{evaluate, EvalOptions, EvalReport, GroundTruth, VideoRow, SIGMAS};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localizer::BoundingBox;

/// Intersection over union of two boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Spatio-temporal overlap of a predicted tube with the annotated one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TubeIou {
    pub mean: f64,
    /// `(frame, iou)` over the union of annotated and predicted frames.
    pub per_frame: Vec<(usize, f64)>,
}

/// Mean per-frame IoU over the union of frames that carry a prediction or an
/// annotation. Frames present on one side only count as zero; with several
/// annotated boxes the best match counts.
pub fn tube_iou(pred: &BTreeMap<usize, BoundingBox>, gt: &BTreeMap<usize, Vec<BoundingBox>>) -> TubeIou {
    let frames: BTreeSet<usize> = pred
        .keys()
        .copied()
        .chain(gt.iter().filter(|(_, b)| !b.is_empty()).map(|(f, _)| *f))
        .collect();
    let per_frame: Vec<(usize, f64)> = frames
        .into_iter()
        .map(|f| {
            let v = match (pred.get(&f), gt.get(&f)) {
                (Some(p), Some(g)) => g.iter().map(|b| iou(p, b)).fold(0.0, f64::max),
                _ => 0.0,
            };
            (f, v)
        })
        .collect();
    let mean = if per_frame.is_empty() {
        0.0
    } else {
        per_frame.iter().map(|(_, v)| v).sum::<f64>() / per_frame.len() as f64
    };
    TubeIou { mean, per_frame }
}

/// How videos are ordered when accumulating precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RankMode {
    /// Distance gap between the nearest and second-nearest centroid.
    #[default]
    Margin,
    /// Mean tube IoU; uses ground truth, so diagnostic only.
    TubeIou,
    /// No ranking: per-class fraction of videos that are hits.
    Unranked,
}

/// Per-video inputs to the localization metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub video_id: String,
    pub gt_label: Option<i32>,
    /// Cluster id.
    pub predicted_label: Option<usize>,
    pub mapped_label: Option<i32>,
    pub mean_tube_iou: f64,
    pub per_frame_iou: Vec<(usize, f64)>,
    /// Clustering margin used by [`RankMode::Margin`].
    pub margin: f64,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sigma must lie in (0, 1], got {sigma}")))
    }
}

/// Non-interpolated average precision over a ranked hit list.
pub fn average_precision(ranked_hits: &[bool], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &hit) in ranked_hits.iter().enumerate() {
        if hit {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Video-level mean average precision at overlap `sigma`.
///
/// A video is a hit for class `c` when both its mapped and true labels are
/// `c` and its tube IoU reaches `sigma`. Classes are those present in the
/// ground truth.
pub fn video_map(scores: &[VideoScore], sigma: f64, mode: RankMode) -> Result<f64> {
    check_sigma(sigma)?;
    let mut labelled = Vec::with_capacity(scores.len());
    for s in scores {
        match (s.gt_label, s.mapped_label) {
            (Some(g), Some(m)) => labelled.push((s, g, m)),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "video {} lacks a ground-truth or mapped label",
                    s.video_id
                )))
            }
        }
    }
    let classes: BTreeSet<i32> = labelled.iter().map(|(_, g, _)| *g).collect();
    if classes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &c in &classes {
        let positives = labelled.iter().filter(|(_, g, _)| *g == c).count();
        let mut detections: Vec<&(&VideoScore, i32, i32)> = labelled.iter().filter(|(_, _, m)| *m == c).collect();
        let hit = |d: &(&VideoScore, i32, i32)| d.1 == c && d.0.mean_tube_iou >= sigma;
        total += match mode {
            RankMode::Unranked => detections.iter().filter(|d| hit(d)).count() as f64 / positives as f64,
            RankMode::Margin | RankMode::TubeIou => {
                let key = |s: &VideoScore| match mode {
                    RankMode::Margin => s.margin,
                    _ => s.mean_tube_iou,
                };
                detections.sort_by(|a, b| key(b.0).total_cmp(&key(a.0)).then(a.0.video_id.cmp(&b.0.video_id)));
                let hits: Vec<bool> = detections.iter().map(|d| hit(d)).collect();
                average_precision(&hits, positives)
            }
        };
    }
    Ok(total / classes.len() as f64)
}

/// Fraction of videos whose tube IoU reaches `sigma`; class-agnostic.
pub fn average_recall(scores: &[VideoScore], sigma: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().filter(|s| s.mean_tube_iou >= sigma).count() as f64 / scores.len() as f64
}
