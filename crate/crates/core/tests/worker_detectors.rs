mod common;

use common::{nms_oracle, random_ibox, rng, IDet};
use fogdetect::detection::{encode, CellPrediction, Detection, GridSpec, GridTensor, Thresholds};
use fogdetect::worker::{fixture_path, TensorFileDetector};
use rand::Rng;

fn write(dir: &std::path::Path, image_id: &str, t: &GridTensor) {
    std::fs::write(fixture_path(dir, image_id), t.to_fixture_string()).unwrap();
}

fn cell(conf: f64, probs: Vec<f64>) -> CellPrediction {
    CellPrediction {
        confidence: conf,
        cx: 0.5,
        cy: 0.5,
        w: 0.2,
        h: 0.2,
        class_probs: probs,
    }
}

#[test]
fn single_cell_fixture_yields_one_detection() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = GridTensor::zeros(GridSpec::new(2, 2).unwrap());
    *t.cell_mut(0, 0) = cell(0.9, vec![0.7, 0.3]);
    write(dir.path(), "img-1", &t);
    let det = TensorFileDetector::new(dir.path(), Thresholds::default()).unwrap();
    let out = det.tensor_file_detect("img-1").unwrap();
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].class_id, 0);
    assert!((out[0].score - 0.63).abs() < 1e-12);
}

#[test]
fn coincident_boxes_collapse_to_the_stronger() {
    // boxes are image-normalized, so two cells can carry the same box
    let dir = tempfile::tempdir().unwrap();
    let mut t = GridTensor::zeros(GridSpec::new(2, 1).unwrap());
    *t.cell_mut(0, 0) = cell(0.9, vec![1.0]);
    *t.cell_mut(1, 1) = cell(0.8, vec![1.0]);
    write(dir.path(), "pair", &t);
    let out = TensorFileDetector::new(dir.path(), Thresholds::default())
        .unwrap()
        .tensor_file_detect("pair")
        .unwrap();
    assert_eq!(out.len(), 1);
    assert!((out[0].score - 0.9).abs() < 1e-12);
}

#[test]
fn detector_output_matches_nms_oracle() {
    let spec = GridSpec::new(common::GRID as usize, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let det = TensorFileDetector::new(dir.path(), Thresholds { score: 1.0 / 128.0, iou: 0.45 }).unwrap();
    let mut r = rng(77);
    for trial in 0..200 {
        // one detection per grid cell, scores distinct multiples of 1/64
        let mut used = std::collections::BTreeSet::new();
        let mut dets = Vec::new();
        for _ in 0..r.random_range(1..10) {
            let d = IDet {
                class_id: r.random_range(0..3),
                score: f64::from(r.random_range(1..64u32)) / 64.0,
                corners: random_ibox(&mut r),
            };
            let b = d.to_detection().bbox;
            if dets.iter().all(|o: &IDet| o.score != d.score) && used.insert(spec.cell_of(b.cx, b.cy)) {
                dets.push(d);
            }
        }
        let image_id = format!("trial-{trial}");
        let as_dets: Vec<Detection> = dets.iter().map(|d| d.to_detection()).collect();
        write(dir.path(), &image_id, &encode(&as_dets, spec).unwrap());
        let got = det.tensor_file_detect(&image_id).unwrap();
        let want: Vec<Detection> = nms_oracle(&dets, 45, 100).into_iter().map(|i| dets[i].to_detection()).collect();
        assert_eq!(got.len(), want.len(), "trial {trial}\n{got:?}\n{want:?}");
        for (g, w) in got.iter().zip(&want) {
            assert_eq!(g.class_id, w.class_id);
            assert!((g.score - w.score).abs() < 1e-9);
            for (a, b) in g.bbox.corners().iter().zip(w.bbox.corners()) {
                assert!((a - b).abs() < 1e-9, "trial {trial}");
            }
        }
    }
}
