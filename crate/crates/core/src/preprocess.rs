//! Mode-dependent image preparation.
//!
//! High-accuracy mode forwards the submitted bytes untouched. Low-latency
//! mode shrinks the image so its long side equals a target length, using
//! nearest-neighbor sampling on binary PPM (P6) data.

use std::fmt;
use std::str::FromStr;

use bytes::Bytes;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Long-side length used by low-latency mode when none is configured.
pub const DEFAULT_TARGET_LONG_SIDE: u32 = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "accuracy")]
    HighAccuracy,
    #[serde(rename = "latency")]
    LowLatency,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::HighAccuracy => "accuracy",
            Mode::LowLatency => "latency",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "accuracy" => Ok(Mode::HighAccuracy),
            "latency" => Ok(Mode::LowLatency),
            other => Err(PreprocessError::UnknownMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ImageFormat {
    #[serde(rename = "ppm")]
    PpmP6,
    #[serde(rename = "opaque")]
    Opaque,
}

impl ImageFormat {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImageFormat::PpmP6 => "ppm",
            ImageFormat::Opaque => "opaque",
        }
    }
}

impl fmt::Display for ImageFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageFormat {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ppm" => Ok(ImageFormat::PpmP6),
            "opaque" => Ok(ImageFormat::Opaque),
            other => Err(PreprocessError::UnknownFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PreprocessError {
    #[error("PPM parse error at byte {offset}: {reason}")]
    Parse { offset: usize, reason: String },
    #[error("cannot resample {0} images; only ppm supports low-latency rescaling")]
    UnsupportedFormat(ImageFormat),
    #[error("declared size {declared_w}x{declared_h} does not match PPM header {actual_w}x{actual_h}")]
    DimensionMismatch {
        declared_w: u32,
        declared_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("image dimensions and target must be >= 1")]
    ZeroDimension,
    #[error("unknown mode {0:?} (expected \"accuracy\" or \"latency\")")]
    UnknownMode(String),
    #[error("unknown image format {0:?} (expected \"ppm\" or \"opaque\")")]
    UnknownFormat(String),
}

/// Raw 8-bit RGB raster backed by a P6 file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PpmImage {
    pub width: u32,
    pub height: u32,
    /// `width * height * 3` bytes, row-major RGB.
    pub pixels: Vec<u8>,
}

impl PpmImage {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width as usize * height as usize * 3);
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Serializes as `P6\n<w> <h>\n255\n` followed by the raster.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = format!("P6\n{} {}\n255\n", self.width, self.height);
        let mut out = Vec::with_capacity(header.len() + self.pixels.len());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn parse(data: &[u8]) -> Result<Self, PreprocessError> {
        let mut pos = 0usize;
        let err = |offset: usize, reason: &str| PreprocessError::Parse {
            offset,
            reason: reason.to_string(),
        };

        if data.len() < 2 || &data[..2] != b"P6" {
            return Err(err(0, "missing P6 magic number"));
        }
        pos += 2;

        let mut fields = [0u32; 3];
        for (i, field) in fields.iter_mut().enumerate() {
            // at least one whitespace separator, comments allowed
            let start = pos;
            skip_whitespace_and_comments(data, &mut pos);
            if pos == start {
                return Err(err(pos, "expected whitespace"));
            }
            let digits_start = pos;
            while pos < data.len() && data[pos].is_ascii_digit() {
                pos += 1;
            }
            if pos == digits_start {
                return Err(err(pos, ["expected width", "expected height", "expected maxval"][i]));
            }
            let text = std::str::from_utf8(&data[digits_start..pos]).expect("ascii digits");
            *field = text
                .parse()
                .map_err(|_| err(digits_start, "header value out of range"))?;
        }
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(err(pos, "zero image dimension"));
        }
        if maxval != 255 {
            return Err(err(pos, "only maxval 255 is supported"));
        }
        if pos >= data.len() || !data[pos].is_ascii_whitespace() {
            return Err(err(pos, "expected a single whitespace byte before the raster"));
        }
        pos += 1;

        let needed = width as usize * height as usize * 3;
        let available = data.len() - pos;
        if available < needed {
            return Err(err(data.len(), "raster is truncated"));
        }
        if available > needed {
            return Err(err(pos + needed, "trailing bytes after the raster"));
        }
        Ok(Self::new(width, height, data[pos..].to_vec()))
    }

    /// Nearest-neighbor resample; destination index `i` reads source index
    /// `floor((i + 0.5) * src / dst)`.
    pub fn resize_nearest(&self, width: u32, height: u32) -> PpmImage {
        let xs: Vec<usize> = (0..width)
            .map(|i| nearest_source_index(i, self.width, width))
            .collect();
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for j in 0..height {
            let sy = nearest_source_index(j, self.height, height);
            let row = &self.pixels[sy * self.width as usize * 3..];
            for &sx in &xs {
                pixels.extend_from_slice(&row[sx * 3..sx * 3 + 3]);
            }
        }
        PpmImage::new(width, height, pixels)
    }
}

fn nearest_source_index(i: u32, src: u32, dst: u32) -> usize {
    // floor((i + 0.5) * src / dst) in exact integer arithmetic
    let idx = ((2 * i as u64 + 1) * src as u64) / (2 * dst as u64);
    idx.min(src as u64 - 1) as usize
}

fn skip_whitespace_and_comments(data: &[u8], pos: &mut usize) {
    while *pos < data.len() {
        match data[*pos] {
            b'#' => {
                while *pos < data.len() && data[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            c if c.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

/// Dimensions whose long side equals `target_long_side`, with the short side
/// scaled by the same factor (rounded half up, at least 1).
pub fn rescale_dims(width: u32, height: u32, target_long_side: u32) -> (u32, u32) {
    let (long, short) = if width >= height {
        (width, height)
    } else {
        (height, width)
    };
    let (long, short, target) = (long.max(1) as u64, short.max(1) as u64, target_long_side.max(1) as u64);
    let scaled = ((2 * short * target + long) / (2 * long)).max(1) as u32;
    let target = target as u32;
    if width >= height {
        (target, scaled)
    } else {
        (scaled, target)
    }
}

/// An image as submitted by a gateway.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePayload {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub format: ImageFormat,
    pub bytes: Bytes,
}

impl ImagePayload {
    /// Wraps a P6 file, checking that it parses and matches the declared size.
    pub fn ppm(image_id: impl Into<String>, bytes: impl Into<Bytes>) -> Result<Self, PreprocessError> {
        let bytes = bytes.into();
        let img = PpmImage::parse(&bytes)?;
        Ok(Self {
            image_id: image_id.into(),
            width: img.width,
            height: img.height,
            format: ImageFormat::PpmP6,
            bytes,
        })
    }

    pub fn opaque(image_id: impl Into<String>, width: u32, height: u32, bytes: impl Into<Bytes>) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            format: ImageFormat::Opaque,
            bytes: bytes.into(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.bytes.len()
    }

    /// Checks the format invariants; PPM payloads must parse with the
    /// declared dimensions.
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.format == ImageFormat::PpmP6 {
            let img = PpmImage::parse(&self.bytes)?;
            if (img.width, img.height) != (self.width, self.height) {
                return Err(PreprocessError::DimensionMismatch {
                    declared_w: self.width,
                    declared_h: self.height,
                    actual_w: img.width,
                    actual_h: img.height,
                });
            }
        }
        Ok(())
    }
}

/// Applies the mode's pre-processing.
///
/// High-accuracy returns the payload as is (sharing the same buffer).
/// Low-latency resamples PPM data; opaque codecs are rejected.
pub fn prepare(payload: &ImagePayload, mode: Mode, target_long_side: u32) -> Result<ImagePayload, PreprocessError> {
    match mode {
        Mode::HighAccuracy => Ok(payload.clone()),
        Mode::LowLatency => {
            if payload.format != ImageFormat::PpmP6 {
                return Err(PreprocessError::UnsupportedFormat(payload.format));
            }
            if target_long_side == 0 {
                return Err(PreprocessError::ZeroDimension);
            }
            payload.validate()?;
            let img = PpmImage::parse(&payload.bytes)?;
            let (w, h) = rescale_dims(img.width, img.height, target_long_side);
            let bytes = if (w, h) == (img.width, img.height) {
                payload.bytes.clone()
            } else {
                Bytes::from(img.resize_nearest(w, h).to_bytes())
            };
            Ok(ImagePayload {
                image_id: payload.image_id.clone(),
                width: w,
                height: h,
                format: ImageFormat::PpmP6,
                bytes,
            })
        }
    }
}
