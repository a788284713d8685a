//! VOC-style detection evaluation: matching, AP, and mAP.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MetricsError;
use crate::detection::{iou, BoundingBox, Detection};

/// VOC matching threshold.
pub const DEFAULT_MATCH_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

/// Ground truth for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: String,
    pub annotations: Vec<Annotation>,
}

impl GroundTruth {
    pub fn from_json(text: &str) -> Result<Self, MetricsError> {
        let gt: GroundTruth = serde_json::from_str(text).map_err(|e| MetricsError::Format(e.to_string()))?;
        for a in &gt.annotations {
            let b = &a.bbox;
            if ![b.cx, b.cy, b.w, b.h].iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(MetricsError::Format(format!(
                    "annotation box of {} is not normalized to [0, 1]",
                    gt.image_id
                )));
            }
        }
        Ok(gt)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("ground truth serializes")
    }

    /// Reads every `*.json` file in `dir`, sorted by file name.
    pub fn read_dir(dir: &Path) -> Result<Vec<Self>, MetricsError> {
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| MetricsError::Io(format!("{}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text =
                    std::fs::read_to_string(p).map_err(|e| MetricsError::Io(format!("{}: {e}", p.display())))?;
                Self::from_json(&text)
            })
            .collect()
    }
}

/// Per-detection outcome of matching one image and class.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    /// `(score, is_true_positive)` in descending score order.
    pub scored: Vec<(f64, bool)>,
    pub n_gt: usize,
}

impl MatchOutcome {
    pub fn flags(&self) -> Vec<bool> {
        self.scored.iter().map(|(_, tp)| *tp).collect()
    }
}

/// Greedy VOC matching for one image and one class.
///
/// Detections are visited by descending score (stable for ties). Each takes
/// the still-unmatched ground-truth box with the highest IoU, lowest index on
/// ties, and is a true positive when that IoU reaches `iou_threshold`.
pub fn match_detections(detections: &[Detection], ground_truth: &[BoundingBox], iou_threshold: f64) -> MatchOutcome {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score));
    let mut taken = vec![false; ground_truth.len()];
    let mut scored = Vec::with_capacity(detections.len());
    for i in order {
        let d = &detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] {
                continue;
            }
            let o = iou(&d.bbox, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        let tp = match best {
            Some((g, o)) if o >= iou_threshold => {
                taken[g] = true;
                true
            }
            _ => false,
        };
        scored.push((d.score, tp));
    }
    MatchOutcome {
        scored,
        n_gt: ground_truth.len(),
    }
}

/// All-point interpolated AP of flags given in descending score order.
///
/// Returns `None` when the class has neither ground truth nor detections,
/// and `Some(0.0)` when it has detections but no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (i, &hit) in flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    Some(ap)
}

/// Arithmetic mean over the classes whose AP is defined.
pub fn mean_ap(per_class: &[Option<f64>]) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::NoDefinedClasses);
    }
    // sum / n is not exact for repeated values (0.1 * 3 / 3 != 0.1)
    if defined.iter().all(|&v| v == defined[0]) {
        return Ok(defined[0]);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub per_class: BTreeMap<usize, Option<f64>>,
    pub map: f64,
}

/// Evaluates detections for a whole corpus. Matching is per image and class;
/// outcomes are then pooled across images by score before computing AP.
/// Images without an entry in `detections` count as having no detections.
pub fn evaluate_map(
    detections: &BTreeMap<String, Vec<Detection>>,
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
) -> Result<MapReport, MetricsError> {
    let mut classes = BTreeSet::new();
    for gt in ground_truth {
        classes.extend(gt.annotations.iter().map(|a| a.class_id));
    }
    for dets in detections.values() {
        classes.extend(dets.iter().map(|d| d.class_id));
    }
    let empty = Vec::new();
    let mut images: BTreeSet<&str> = ground_truth.iter().map(|g| g.image_id.as_str()).collect();
    images.extend(detections.keys().map(String::as_str));
    let gt_by_image: BTreeMap<&str, &GroundTruth> =
        ground_truth.iter().map(|g| (g.image_id.as_str(), g)).collect();

    let mut per_class = BTreeMap::new();
    for &class in &classes {
        let mut pooled: Vec<(f64, bool)> = Vec::new();
        let mut n_gt = 0;
        for &image in &images {
            let gts: Vec<BoundingBox> = gt_by_image
                .get(image)
                .map(|g| g.annotations.iter().filter(|a| a.class_id == class).map(|a| a.bbox).collect())
                .unwrap_or_default();
            let dets: Vec<Detection> = detections
                .get(image)
                .unwrap_or(&empty)
                .iter()
                .filter(|d| d.class_id == class)
                .cloned()
                .collect();
            let m = match_detections(&dets, &gts, iou_threshold);
            n_gt += m.n_gt;
            pooled.extend(m.scored);
        }
        pooled.sort_by(|a, b| b.0.total_cmp(&a.0));
        let flags: Vec<bool> = pooled.iter().map(|p| p.1).collect();
        per_class.insert(class, average_precision(&flags, n_gt));
    }
    let values: Vec<Option<f64>> = per_class.values().copied().collect();
    Ok(MapReport {
        map: mean_ap(&values)?,
        per_class,
    })
}
