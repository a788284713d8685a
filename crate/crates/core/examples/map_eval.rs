//! Pascal VOC style evaluation: matches detections to ground truth, prints
//! per-class AP and the mean.
//!
//!     cargo run --example map_eval [ground_truth_dir]
//!
//! With a directory, every `<image_id>.json` in it is loaded and scored
//! against an empty detection set; otherwise a small built-in corpus is used.

use std::collections::BTreeMap;

use fogdetect::detection::{BoundingBox, Detection};
use fogdetect::metrics::{average_precision, evaluate_map, match_detections, Annotation, GroundTruth, DEFAULT_MATCH_IOU};

fn ann(class_id: usize, cx: f64, cy: f64, w: f64, h: f64) -> Annotation {
    Annotation {
        class_id,
        bbox: BoundingBox::new(cx, cy, w, h),
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (ground_truth, detections) = match std::env::args().nth(1) {
        Some(dir) => (GroundTruth::read_dir(std::path::Path::new(&dir))?, BTreeMap::new()),
        None => {
            let gts = vec![
                GroundTruth {
                    image_id: "street".into(),
                    annotations: vec![ann(14, 0.3, 0.5, 0.2, 0.6), ann(6, 0.7, 0.7, 0.4, 0.3)],
                },
                GroundTruth {
                    image_id: "park".into(),
                    annotations: vec![ann(14, 0.5, 0.5, 0.2, 0.5), ann(11, 0.2, 0.8, 0.2, 0.2)],
                },
            ];
            let mut dets = BTreeMap::new();
            dets.insert(
                "street".to_string(),
                vec![
                    Detection::new(14, 0.9, BoundingBox::new(0.31, 0.5, 0.2, 0.58)),
                    Detection::new(6, 0.4, BoundingBox::new(0.2, 0.2, 0.1, 0.1)),
                ],
            );
            dets.insert(
                "park".to_string(),
                vec![
                    Detection::new(14, 0.7, BoundingBox::new(0.5, 0.52, 0.2, 0.5)),
                    Detection::new(11, 0.8, BoundingBox::new(0.21, 0.79, 0.2, 0.2)),
                ],
            );
            (gts, dets)
        }
    };

    for gt in &ground_truth {
        let dets = detections.get(&gt.image_id).cloned().unwrap_or_default();
        let boxes: Vec<BoundingBox> = gt.annotations.iter().map(|a| a.bbox).collect();
        let m = match_detections(&dets, &boxes, DEFAULT_MATCH_IOU);
        println!("{}: {} detections, hits {:?} (class-agnostic)", gt.image_id, dets.len(), m.flags());
    }

    let report = evaluate_map(&detections, &ground_truth, DEFAULT_MATCH_IOU)?;
    for (class, ap) in &report.per_class {
        match ap {
            Some(ap) => println!("class {class:2}: AP {ap:.3}"),
            None => println!("class {class:2}: no ground truth"),
        }
    }
    println!("mAP {:.4}", report.map);
    println!("one hit after one miss: AP {:?}", average_precision(&[false, true], 1));
    Ok(())
}
