//! Low-latency pre-processing: nearest-neighbour downscale of a PPM to a
//! 200-pixel long side.
//!
//!     cargo run --example rescale_ppm [in.ppm [out.ppm]]
//!
//! Without arguments a 4000x2192 gradient stands in for a camera frame.

use fogdetect::preprocess::{prepare, rescale_dims, ImagePayload, Mode, PpmImage, DEFAULT_TARGET_LONG_SIDE};

fn gradient(width: u32, height: u32) -> PpmImage {
    let mut pixels = Vec::with_capacity((width * height * 3) as usize);
    for y in 0..height {
        for x in 0..width {
            pixels.extend([(x * 255 / width) as u8, (y * 255 / height) as u8, ((x ^ y) & 0xff) as u8]);
        }
    }
    PpmImage::new(width, height, pixels)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let bytes = match args.first() {
        Some(path) => std::fs::read(path)?,
        None => gradient(4000, 2192).to_bytes(),
    };
    let original = ImagePayload::ppm("frame", bytes)?;
    println!(
        "input  {}x{}, {} bytes; target {:?}",
        original.width,
        original.height,
        original.byte_len(),
        rescale_dims(original.width, original.height, DEFAULT_TARGET_LONG_SIDE)
    );

    let accurate = prepare(&original, Mode::HighAccuracy, DEFAULT_TARGET_LONG_SIDE)?;
    println!("accuracy mode: {}x{}, {} bytes (unchanged)", accurate.width, accurate.height, accurate.byte_len());

    let fast = prepare(&original, Mode::LowLatency, DEFAULT_TARGET_LONG_SIDE)?;
    println!(
        "latency mode:  {}x{}, {} bytes ({:.1}x smaller)",
        fast.width,
        fast.height,
        fast.byte_len(),
        original.byte_len() as f64 / fast.byte_len() as f64
    );
    if let Some(out) = args.get(1) {
        std::fs::write(out, &fast.bytes)?;
        println!("wrote {out}");
    }
    Ok(())
}
