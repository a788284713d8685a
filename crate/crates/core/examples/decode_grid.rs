//! Builds a 7x7x20 detector grid, writes it as a fixture, reads it back,
//! and runs the decode head (threshold, then per-class NMS).
//!
//!     cargo run --example decode_grid [fixture.grid]

use fogdetect::detection::{decode, encode, nms, BoundingBox, CellPrediction, Detection, GridSpec, GridTensor};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = GridSpec::new(7, 20)?;
    println!("grid {}x{} with {} classes: {} values", spec.side(), spec.side(), spec.num_classes(), spec.element_count());

    // A person and a dog, each placed in the cell holding its center.
    let mut tensor = encode(
        &[
            Detection::new(14, 0.88, BoundingBox::new(0.30, 0.55, 0.22, 0.70)),
            Detection::new(11, 0.74, BoundingBox::new(0.68, 0.72, 0.30, 0.28)),
        ],
        spec,
    )?;
    // A second, weaker person box in a neighbouring cell. NMS removes it.
    let mut probs = vec![0.0; 20];
    probs[14] = 0.9;
    *tensor.cell_mut(3, 1) = CellPrediction {
        confidence: 0.6,
        cx: 0.31,
        cy: 0.52,
        w: 0.2,
        h: 0.66,
        class_probs: probs,
    };

    let text = tensor.to_fixture_string();
    if let Some(path) = std::env::args().nth(1) {
        std::fs::write(&path, &text)?;
        println!("fixture written to {path}");
    }
    let tensor = GridTensor::from_fixture_str(&text)?;

    let candidates = decode(&tensor, 0.25)?;
    println!("\n{} candidates above score 0.25:", candidates.len());
    for d in &candidates {
        println!("  class {:2} score {:.3} box {:?}", d.class_id, d.score, d.bbox);
    }
    let kept = nms(&candidates, 0.45)?;
    println!("\n{} after NMS at IoU 0.45:", kept.len());
    for d in &kept {
        println!("  class {:2} score {:.3} box {:?}", d.class_id, d.score, d.bbox);
    }
    Ok(())
}
