//! Reference implementations used as test oracles.
//!
//! Boxes here live on a 1/16 grid and are stored as integer corners, so all
//! overlap arithmetic is exact. The library works in floats; these oracles
//! do not share any code with it.

#![allow(dead_code)]

pub mod frames;

use fogdetect::detection::{BoundingBox, Detection};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRID: i64 = 16;

/// Corners `[x1, y1, x2, y2]` in units of 1/GRID.
pub type IBox = [i64; 4];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_bbox(b: IBox) -> BoundingBox {
    let g = GRID as f64;
    BoundingBox::from_corners(b[0] as f64 / g, b[1] as f64 / g, b[2] as f64 / g, b[3] as f64 / g)
}

pub fn random_ibox(r: &mut ChaCha8Rng) -> IBox {
    let x1 = r.random_range(0..GRID);
    let y1 = r.random_range(0..GRID);
    let x2 = r.random_range(x1 + 1..=GRID);
    let y2 = r.random_range(y1 + 1..=GRID);
    [x1, y1, x2, y2]
}

/// Exact `(intersection, union)` areas in units of 1/GRID².
pub fn overlap(a: IBox, b: IBox) -> (i64, i64) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0);
    let inter = iw * ih;
    let area = |x: IBox| (x[2] - x[0]) * (x[3] - x[1]);
    (inter, area(a) + area(b) - inter)
}

/// `IoU(a, b) >= num/den`, decided in integers.
pub fn iou_at_least(a: IBox, b: IBox, num: i64, den: i64) -> bool {
    let (i, u) = overlap(a, b);
    i * den >= num * u
}

/// Compares IoU(a, x) with IoU(b, y) exactly.
pub fn iou_cmp(a: (IBox, IBox), b: (IBox, IBox)) -> std::cmp::Ordering {
    let (ia, ua) = overlap(a.0, a.1);
    let (ib, ub) = overlap(b.0, b.1);
    (ia * ub).cmp(&(ib * ua))
}

#[derive(Debug, Clone, Copy)]
pub struct IDet {
    pub class_id: usize,
    pub score: f64,
    pub corners: IBox,
}

impl IDet {
    pub fn to_detection(self) -> Detection {
        Detection::new(self.class_id, self.score, to_bbox(self.corners))
    }
}

/// Stable order of indices by descending score.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // insertion sort keeps equal scores in input order
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && scores[idx[j - 1]] < scores[idx[j]] {
            idx.swap(j - 1, j);
            j -= 1;
        }
    }
    idx
}

/// Suppression over a precomputed n×n conflict matrix: a box survives when no
/// surviving box ranked above it conflicts with it.
pub fn nms_oracle(dets: &[IDet], num: i64, den: i64) -> Vec<usize> {
    let n = dets.len();
    let mut conflict = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            conflict[i][j] =
                dets[i].class_id == dets[j].class_id && iou_at_least(dets[i].corners, dets[j].corners, num, den);
        }
    }
    let order = score_order(&dets.iter().map(|d| d.score).collect::<Vec<_>>());
    let mut alive = vec![false; n];
    let mut kept = Vec::new();
    for (rank, &i) in order.iter().enumerate() {
        let beaten = order[..rank].iter().any(|&j| alive[j] && conflict[i][j]);
        if !beaten {
            alive[i] = true;
            kept.push(i);
        }
    }
    kept
}

/// Flags (descending score order) from enumerating every partial injective
/// assignment of detections to ground truths and keeping the one that
/// satisfies the greedy rule at every step. Panics unless exactly one does.
pub fn match_oracle(dets: &[(f64, IBox)], gts: &[IBox], num: i64, den: i64) -> Vec<bool> {
    let order = score_order(&dets.iter().map(|d| d.0).collect::<Vec<_>>());
    let choices = gts.len() + 1;
    let total = choices.pow(dets.len() as u32);
    let mut found: Vec<Vec<Option<usize>>> = Vec::new();
    for code in 0..total {
        let mut c = code;
        let mut assign = Vec::with_capacity(dets.len());
        for _ in 0..dets.len() {
            let v = c % choices;
            c /= choices;
            assign.push(if v == 0 { None } else { Some(v - 1) });
        }
        let mut used = vec![false; gts.len()];
        let mut injective = true;
        for g in assign.iter().flatten() {
            if used[*g] {
                injective = false;
            }
            used[*g] = true;
        }
        if !injective {
            continue;
        }
        let mut ok = true;
        let mut taken = vec![false; gts.len()];
        for &d in &order {
            let b = dets[d].1;
            let mut best: Option<usize> = None;
            for g in 0..gts.len() {
                if taken[g] {
                    continue;
                }
                best = match best {
                    None => Some(g),
                    Some(h) if iou_cmp((b, gts[g]), (b, gts[h])).is_gt() => Some(g),
                    keep => keep,
                };
            }
            let expected = best.filter(|&g| iou_at_least(b, gts[g], num, den));
            if assign[d] != expected {
                ok = false;
                break;
            }
            if let Some(g) = expected {
                taken[g] = true;
            }
        }
        if ok {
            found.push(assign);
        }
    }
    assert_eq!(found.len(), 1, "greedy rule must pick exactly one assignment");
    order.iter().map(|&d| found[0][d].is_some()).collect()
}

/// AP as a sum over ground-truth steps: the k-th true positive adds
/// `1/n_gt` times the best precision seen at or after reaching k hits.
pub fn ap_step_sum(flags: &[bool], n_gt: usize) -> f64 {
    let mut prec_at_hits: Vec<(usize, f64)> = Vec::new();
    let mut tp = 0;
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        prec_at_hits.push((tp, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    for k in 1..=n_gt {
        let best = prec_at_hits
            .iter()
            .filter(|(hits, _)| *hits >= k)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += best / n_gt as f64;
    }
    ap
}

use fogdetect::harness::{LinkModel, PayloadSpec, Scenario, WorkerSpec};
use fogdetect::master::SchedulerConfig;
use fogdetect::metrics::NodePower;
use fogdetect::preprocess::Mode;
use fogdetect::protocol::Tier;
use fogdetect::worker::{DetectorSpec, LatencyModel};

pub const FOG_POWER: NodePower = NodePower {
    idle_watts: 12.0,
    busy_watts: 20.0,
};

pub fn mock_worker(id: &str, latency: LatencyModel, link: LinkModel) -> WorkerSpec {
    WorkerSpec {
        id: id.into(),
        tier: Tier::Fog,
        slots: 1,
        detector: DetectorSpec::Mock {
            latency,
            seed: 0,
            detections: Vec::new(),
        },
        link,
        power: FOG_POWER,
        fail_at_s: None,
        stall: None,
    }
}

pub fn fixed(ms: f64) -> LatencyModel {
    LatencyModel::Fixed { ms }
}

/// Accuracy-mode scenario over a small synthetic PPM and a LAN client link.
pub fn scenario(name: &str, rate_per_min: f64, duration_s: f64, workers: Vec<WorkerSpec>) -> Scenario {
    Scenario {
        name: name.into(),
        topology: name.into(),
        mode: Mode::HighAccuracy,
        rate_per_min,
        duration_s,
        seed: 1,
        client_rescale: false,
        warmup_s: 1.0,
        payload: PayloadSpec::Synthetic { width: 64, height: 48 },
        client_link: LinkModel::LAN,
        master: SchedulerConfig::default(),
        master_power: NodePower {
            idle_watts: 10.0,
            busy_watts: 10.0,
        },
        workers,
        ground_truth: None,
    }
}

use fogdetect::metrics::{Annotation, GroundTruth};
use std::collections::BTreeMap;

/// `images` images with one annotation per class in 0..20 spread across
/// them, plus detections identical to every annotation.
pub fn perfect_corpus(images: usize, seed: u64) -> (Vec<GroundTruth>, BTreeMap<String, Vec<Detection>>) {
    let mut r = rng(seed);
    let mut gts = Vec::new();
    let mut dets = BTreeMap::new();
    for i in 0..images {
        let image_id = format!("img-{i:05}");
        let mut annotations = Vec::new();
        let mut found = Vec::new();
        // every class appears somewhere and every image has a box
        for class_id in (0..20).filter(|&c| c % images == i || c == i % 20) {
            let bbox = to_bbox(random_ibox(&mut r));
            annotations.push(Annotation { class_id, bbox });
            found.push(Detection::new(class_id, r.random_range(0.3..1.0), bbox));
        }
        gts.push(GroundTruth { image_id: image_id.clone(), annotations });
        dets.insert(image_id, found);
    }
    (gts, dets)
}
