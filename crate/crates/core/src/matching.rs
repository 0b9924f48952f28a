//! Pairing predicted boxes with ground-truth boxes.
//!
//! Box-wise residuals only exist for matched pairs, so the matching rule is
//! part of the calibration procedure and is recorded in every artifact.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::hungarian::max_weight_assignment;

/// A single detector output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    /// Detector confidence in `[0, 1]`.
    pub objectness: f64,
    #[serde(default)]
    pub class_id: u32,
}

impl Detection {
    pub fn new(bbox: BBox, objectness: f64) -> Self {
        Detection {
            bbox,
            objectness,
            class_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt_index: usize,
    pub pred_index: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingStrategy {
    /// Accept pairs by descending IoU while both members are unused.
    #[default]
    Greedy,
    /// Maximum total IoU assignment over pairs at or above the threshold.
    Hungarian,
}

impl MatchingStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            MatchingStrategy::Greedy => "greedy",
            MatchingStrategy::Hungarian => "hungarian",
        }
    }
}

impl std::str::FromStr for MatchingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(MatchingStrategy::Greedy),
            "hungarian" => Ok(MatchingStrategy::Hungarian),
            other => Err(format!("unknown matching strategy {other:?}")),
        }
    }
}

/// Keeps detections with `objectness >= threshold` (and the given class), in order.
pub fn filter_detections(
    dets: &[Detection],
    objectness_threshold: f64,
    class_id: Option<u32>,
) -> Vec<Detection> {
    dets.iter()
        .filter(|d| d.objectness >= objectness_threshold)
        .filter(|d| class_id.is_none_or(|c| d.class_id == c))
        .copied()
        .collect()
}

/// One-to-one partial matching of `gts` to `preds`.
///
/// Every returned pair has `iou >= iou_threshold`; pairs are sorted by
/// `gt_index`. Ties are broken by `(gt_index, pred_index)`.
pub fn match_image(
    gts: &[BBox],
    preds: &[BBox],
    iou_threshold: f64,
    strategy: MatchingStrategy,
) -> Vec<MatchedPair> {
    if gts.is_empty() || preds.is_empty() {
        return Vec::new();
    }
    let ious: Vec<Vec<f64>> = gts
        .iter()
        .map(|g| preds.iter().map(|p| iou(g, p)).collect())
        .collect();

    let mut pairs = match strategy {
        MatchingStrategy::Greedy => greedy(&ious, iou_threshold),
        MatchingStrategy::Hungarian => {
            // Sub-threshold pairs get zero weight so the optimum is taken over
            // admissible pairs only.
            let masked: Vec<Vec<f64>> = ious
                .iter()
                .map(|row| {
                    row.iter()
                        .map(|&v| if v >= iou_threshold { v } else { 0.0 })
                        .collect()
                })
                .collect();
            max_weight_assignment(&masked)
                .into_iter()
                .enumerate()
                .filter_map(|(g, p)| p.map(|p| (g, p)))
                .filter(|&(g, p)| ious[g][p] >= iou_threshold)
                .map(|(g, p)| MatchedPair {
                    gt_index: g,
                    pred_index: p,
                    iou: ious[g][p],
                })
                .collect()
        }
    };
    pairs.sort_by_key(|p| p.gt_index);
    pairs
}

fn greedy(ious: &[Vec<f64>], threshold: f64) -> Vec<MatchedPair> {
    let mut candidates: Vec<MatchedPair> = ious
        .iter()
        .enumerate()
        .flat_map(|(g, row)| {
            row.iter().enumerate().map(move |(p, &v)| MatchedPair {
                gt_index: g,
                pred_index: p,
                iou: v,
            })
        })
        .filter(|c| c.iou >= threshold && c.iou > 0.0)
        .collect();
    candidates.sort_by(|a, b| match b.iou.total_cmp(&a.iou) {
        Ordering::Equal => (a.gt_index, a.pred_index).cmp(&(b.gt_index, b.pred_index)),
        other => other,
    });

    let mut gt_used = vec![false; ious.len()];
    let mut pred_used = vec![false; ious.first().map_or(0, Vec::len)];
    let mut out = Vec::new();
    for c in candidates {
        if !gt_used[c.gt_index] && !pred_used[c.pred_index] {
            gt_used[c.gt_index] = true;
            pred_used[c.pred_index] = true;
            out.push(c);
        }
    }
    out
}

/// Counts of unmatched ground truths (false negatives) and unmatched
/// predictions (false positives).
pub fn unmatched_counts(n_gts: usize, n_preds: usize, pairs: &[MatchedPair]) -> (usize, usize) {
    (n_gts - pairs.len(), n_preds - pairs.len())
}
