//! Grid-tensor decoding head.
//!
//! A detector emits an `S×S×(5+k)` tensor. Each cell carries one box:
//! `[confidence, cx, cy, w, h, p_0 .. p_{k-1}]`, with box coordinates
//! normalized to the whole image. This module turns such tensors into
//! [`Detection`]s, computes IoU, and runs greedy per-class non-maximum
//! suppression.
//!
//! Everything here is a pure function over immutable inputs.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Score threshold applied by [`decode`] when none is configured.
pub const DEFAULT_SCORE_THRESHOLD: f64 = 0.25;
/// IoU threshold applied by [`nms`] when none is configured.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.45;

#[derive(Debug, Error, PartialEq)]
pub enum DetectionError {
    #[error("grid side and class count must both be >= 1 (got s={side}, k={num_classes})")]
    InvalidSpec { side: usize, num_classes: usize },
    #[error("expected {expected} cells, found {found}")]
    CellCount { expected: usize, found: usize },
    #[error("cell ({row}, {col}) is malformed: {reason}")]
    InvalidCell { row: usize, col: usize, reason: String },
    #[error("detections {first} and {second} both map to cell ({row}, {col})")]
    CellConflict {
        row: usize,
        col: usize,
        first: usize,
        second: usize,
    },
    #[error("{name} must lie in [0, 1], got {value}")]
    ThresholdOutOfRange { name: &'static str, value: f64 },
    #[error("grid fixture line {line}: {reason}")]
    Fixture { line: usize, reason: String },
    #[error("reading grid fixture: {0}")]
    Io(String),
}

/// Grid geometry: `side` cells per axis, `num_classes` class scores per cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridSpec {
    side: usize,
    num_classes: usize,
}

impl GridSpec {
    pub fn new(side: usize, num_classes: usize) -> Result<Self, DetectionError> {
        if side == 0 || num_classes == 0 {
            return Err(DetectionError::InvalidSpec { side, num_classes });
        }
        Ok(Self { side, num_classes })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn cell_count(&self) -> usize {
        self.side * self.side
    }

    /// Length of one serialized cell vector, `5 + k`.
    pub fn cell_len(&self) -> usize {
        5 + self.num_classes
    }

    /// Total scalar count of the tensor, `S·S·(5+k)`.
    pub fn element_count(&self) -> usize {
        self.cell_count() * self.cell_len()
    }

    /// Cell `(row, col)` containing a normalized center point.
    pub fn cell_of(&self, cx: f64, cy: f64) -> (usize, usize) {
        let clamp = |v: f64| ((v * self.side as f64).floor() as usize).min(self.side - 1);
        (clamp(cy), clamp(cx))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub confidence: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_probs: Vec<f64>,
}

impl CellPrediction {
    pub fn zeroed(num_classes: usize) -> Self {
        Self {
            confidence: 0.0,
            cx: 0.0,
            cy: 0.0,
            w: 0.0,
            h: 0.0,
            class_probs: vec![0.0; num_classes],
        }
    }

    /// Serialized order: `[confidence, cx, cy, w, h, p_0 .. p_{k-1}]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(5 + self.class_probs.len());
        v.extend_from_slice(&[self.confidence, self.cx, self.cy, self.w, self.h]);
        v.extend_from_slice(&self.class_probs);
        v
    }

    pub fn from_vector(values: &[f64]) -> Option<Self> {
        if values.len() < 6 {
            return None;
        }
        Some(Self {
            confidence: values[0],
            cx: values[1],
            cy: values[2],
            w: values[3],
            h: values[4],
            class_probs: values[5..].to_vec(),
        })
    }

    /// Best class and its probability; ties go to the lowest index.
    pub fn best_class(&self) -> (usize, f64) {
        let mut best = (0, self.class_probs[0]);
        for (i, &p) in self.class_probs.iter().enumerate().skip(1) {
            if p > best.1 {
                best = (i, p);
            }
        }
        best
    }

    fn check(&self, num_classes: usize) -> Result<(), String> {
        if self.class_probs.len() != num_classes {
            return Err(format!(
                "expected {num_classes} class probabilities, found {}",
                self.class_probs.len()
            ));
        }
        let named = [
            ("confidence", self.confidence),
            ("cx", self.cx),
            ("cy", self.cy),
            ("w", self.w),
            ("h", self.h),
        ];
        for (name, v) in named {
            if !v.is_finite() {
                return Err(format!("{name} is not finite ({v})"));
            }
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [0, 1]"));
            }
        }
        for (i, &p) in self.class_probs.iter().enumerate() {
            if !p.is_finite() {
                return Err(format!("class_probs[{i}] is not finite ({p})"));
            }
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("class_probs[{i}] = {p} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Row-major `S×S` grid of cell predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridTensor {
    spec: GridSpec,
    cells: Vec<CellPrediction>,
}

impl GridTensor {
    /// Builds a tensor, validating cell count and every cell's values.
    pub fn new(spec: GridSpec, cells: Vec<CellPrediction>) -> Result<Self, DetectionError> {
        let tensor = Self { spec, cells };
        tensor.validate()?;
        Ok(tensor)
    }

    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            cells: vec![CellPrediction::zeroed(spec.num_classes); spec.cell_count()],
        }
    }

    pub fn spec(&self) -> GridSpec {
        self.spec
    }

    pub fn cells(&self) -> &[CellPrediction] {
        &self.cells
    }

    pub fn cell(&self, row: usize, col: usize) -> &CellPrediction {
        &self.cells[row * self.spec.side + col]
    }

    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut CellPrediction {
        &mut self.cells[row * self.spec.side + col]
    }

    pub fn validate(&self) -> Result<(), DetectionError> {
        let expected = self.spec.cell_count();
        if self.cells.len() != expected {
            return Err(DetectionError::CellCount {
                expected,
                found: self.cells.len(),
            });
        }
        for (idx, cell) in self.cells.iter().enumerate() {
            cell.check(self.spec.num_classes)
                .map_err(|reason| DetectionError::InvalidCell {
                    row: idx / self.spec.side,
                    col: idx % self.spec.side,
                    reason,
                })?;
        }
        Ok(())
    }

    /// Parses the text sidecar format: a `S K` line followed by `S·S` lines
    /// of `5+K` space-separated floats in row-major cell order.
    pub fn from_fixture_str(text: &str) -> Result<Self, DetectionError> {
        let mut lines = text.lines().enumerate();
        let (_, first) = lines.next().ok_or_else(|| DetectionError::Fixture {
            line: 1,
            reason: "empty file".into(),
        })?;
        let dims: Vec<&str> = first.split(' ').collect();
        let parse_dim = |s: &str| {
            s.parse::<usize>().map_err(|_| DetectionError::Fixture {
                line: 1,
                reason: format!("expected a base-10 integer, found {s:?}"),
            })
        };
        if dims.len() != 2 {
            return Err(DetectionError::Fixture {
                line: 1,
                reason: format!("expected \"S K\", found {first:?}"),
            });
        }
        let spec = GridSpec::new(parse_dim(dims[0])?, parse_dim(dims[1])?)?;

        let mut cells = Vec::with_capacity(spec.cell_count());
        for (idx, line) in lines {
            let line_no = idx + 1;
            if cells.len() == spec.cell_count() {
                if line.is_empty() {
                    continue;
                }
                return Err(DetectionError::Fixture {
                    line: line_no,
                    reason: "trailing data after the last cell".into(),
                });
            }
            let values = line
                .split(' ')
                .map(|tok| {
                    tok.parse::<f64>().map_err(|_| DetectionError::Fixture {
                        line: line_no,
                        reason: format!("invalid float {tok:?}"),
                    })
                })
                .collect::<Result<Vec<_>, _>>()?;
            if values.len() != spec.cell_len() {
                return Err(DetectionError::Fixture {
                    line: line_no,
                    reason: format!("expected {} values, found {}", spec.cell_len(), values.len()),
                });
            }
            cells.push(CellPrediction::from_vector(&values).expect("length checked"));
        }
        Self::new(spec, cells)
    }

    pub fn to_fixture_string(&self) -> String {
        let mut out = format!("{} {}\n", self.spec.side, self.spec.num_classes);
        for cell in &self.cells {
            let mut first = true;
            for v in cell.to_vector() {
                if !first {
                    out.push(' ');
                }
                first = false;
                write!(out, "{v}").expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }

    pub fn read_fixture(path: &Path) -> Result<Self, DetectionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DetectionError::Io(format!("{}: {e}", path.display())))?;
        Self::from_fixture_str(&text)
    }
}

/// Box in normalized image coordinates, stored as center and size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    #[serde(flatten)]
    pub bbox: BoundingBox,
}

impl Detection {
    pub fn new(class_id: usize, score: f64, bbox: BoundingBox) -> Self {
        Self {
            class_id,
            score,
            bbox,
        }
    }
}

/// Decode thresholds carried by a worker's configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub score: f64,
    pub iou: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            score: DEFAULT_SCORE_THRESHOLD,
            iou: DEFAULT_IOU_THRESHOLD,
        }
    }
}

fn check_unit(name: &'static str, value: f64) -> Result<(), DetectionError> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(DetectionError::ThresholdOutOfRange { name, value })
    }
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal)
}

/// Turns every cell into one candidate (`score = confidence × max p`,
/// `class = argmax p`) and keeps those with `score >= score_threshold`.
///
/// Output is sorted by descending score; equal scores keep row-major order.
pub fn decode(tensor: &GridTensor, score_threshold: f64) -> Result<Vec<Detection>, DetectionError> {
    check_unit("score_threshold", score_threshold)?;
    tensor.validate()?;
    let mut out: Vec<Detection> = tensor
        .cells
        .iter()
        .filter_map(|cell| {
            let (class_id, p) = cell.best_class();
            let score = cell.confidence * p;
            (score >= score_threshold).then(|| {
                Detection::new(class_id, score, BoundingBox::new(cell.cx, cell.cy, cell.w, cell.h))
            })
        })
        .collect();
    // stable: ties stay in row-major order
    out.sort_by(by_score_desc);
    Ok(out)
}

/// Intersection over union of two boxes.
///
/// Zero-area boxes give 1 when their corners coincide and 0 otherwise.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return if a.corners() == b.corners() { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy per-class non-maximum suppression.
///
/// Walks detections by descending score and drops any whose IoU with an
/// already-kept box of the same class is `>= iou_threshold`.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>, DetectionError> {
    check_unit("iou_threshold", iou_threshold)?;
    let mut sorted = detections.to_vec();
    sorted.sort_by(by_score_desc);

    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for det in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == det.class_id && iou(&k.bbox, &det.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(det);
        }
    }
    Ok(kept)
}

/// Builds a tensor that decodes back to `detections`.
///
/// Each detection lands in the cell containing its center with
/// `confidence = score` and a one-hot class vector.
pub fn encode(detections: &[Detection], spec: GridSpec) -> Result<GridTensor, DetectionError> {
    let mut tensor = GridTensor::zeros(spec);
    let mut owner: Vec<Option<usize>> = vec![None; spec.cell_count()];
    for (i, det) in detections.iter().enumerate() {
        if det.class_id >= spec.num_classes {
            return Err(DetectionError::InvalidCell {
                row: 0,
                col: 0,
                reason: format!(
                    "detection {i} has class {} but the grid has {} classes",
                    det.class_id, spec.num_classes
                ),
            });
        }
        let (row, col) = spec.cell_of(det.bbox.cx, det.bbox.cy);
        let slot = &mut owner[row * spec.side + col];
        if let Some(first) = *slot {
            return Err(DetectionError::CellConflict {
                row,
                col,
                first,
                second: i,
            });
        }
        *slot = Some(i);
        let cell = tensor.cell_mut(row, col);
        cell.confidence = det.score;
        cell.cx = det.bbox.cx;
        cell.cy = det.bbox.cy;
        cell.w = det.bbox.w;
        cell.h = det.bbox.h;
        cell.class_probs[det.class_id] = 1.0;
    }
    tensor.validate()?;
    Ok(tensor)
}
