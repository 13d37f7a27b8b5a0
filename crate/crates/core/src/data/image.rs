use std::io::Cursor;
use std::path::Path;

use chrono::NaiveDate;
use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::CANONICAL_SIZE;

/// A grayscale radiograph with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CxrImage {
    pub pixels: Grid,
    pub source_id: String,
    pub capture_date: Option<NaiveDate>,
}

impl CxrImage {
    pub fn new(pixels: Grid, source_id: impl Into<String>) -> Self {
        CxrImage {
            pixels,
            source_id: source_id.into(),
            capture_date: None,
        }
    }

    pub fn with_capture_date(mut self, date: Option<NaiveDate>) -> Self {
        self.capture_date = date;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Preprocessed {
    pub pixels: Grid,
    /// Input had zero variance and was mapped to all zeros.
    pub constant_input: bool,
}

/// Canonicalizes a raw intensity grid at the standard 512x512 resolution.
pub fn preprocess(raw: &Grid) -> Result<Preprocessed> {
    preprocess_to(raw, CANONICAL_SIZE)
}

/// Centre-pads to square, resizes bilinearly to `size x size` and min-max
/// normalizes to `[0, 1]`. Already-canonical inputs come back bitwise equal.
pub fn preprocess_to(raw: &Grid, size: usize) -> Result<Preprocessed> {
    if raw.is_empty() {
        return Err(Error::InvalidInput("image has no pixels".into()));
    }
    if raw.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("image contains non-finite values".into()));
    }
    let resized = raw.pad_to_square().resize_bilinear(size, size);
    Ok(match resized.normalized() {
        Some(pixels) => Preprocessed {
            pixels,
            constant_input: false,
        },
        None => {
            log::warn!("constant_input: zero-variance image normalized to zeros");
            Preprocessed {
                pixels: Grid::zeros(size, size),
                constant_input: true,
            }
        }
    })
}

/// Converts a decoded image to luminance scaled by its bit depth.
pub fn grid_from_dynamic(img: &DynamicImage) -> Grid {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.as_raw().iter().map(|&v| v as f64 / 255.0).collect(),
        DynamicImage::ImageLuma16(b) => b.as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
        DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            img.to_luma8().as_raw().iter().map(|&v| v as f64 / 255.0).collect()
        }
        _ => img.to_luma16().as_raw().iter().map(|&v| v as f64 / 65535.0).collect(),
    };
    Grid::new(h, w, data).expect("decoded buffer matches its dimensions")
}

/// Decodes PNG or JPEG bytes into a raw intensity grid.
pub fn decode_image(bytes: &[u8]) -> Result<Grid> {
    let format = image::guess_format(bytes)?;
    if !matches!(format, ImageFormat::Png | ImageFormat::Jpeg) {
        return Err(Error::InvalidInput(format!("unsupported image format {format:?}")));
    }
    let img = image::load_from_memory_with_format(bytes, format)?;
    Ok(grid_from_dynamic(&img))
}

pub fn read_image(path: &Path) -> Result<Grid> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 16-bit grayscale PNG bytes of a `[0, 1]` grid.
pub fn encode_png16(grid: &Grid) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(
        grid.width() as u32,
        grid.height() as u32,
        grid.data().iter().map(|&v| to_u16(v)).collect(),
    )
    .expect("buffer size matches grid");
    let mut out = Vec::new();
    DynamicImage::ImageLuma16(buf).write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

/// 8-bit grayscale PNG bytes of a `[0, 1]` grid.
pub fn encode_png8(grid: &Grid) -> Result<Vec<u8>> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_raw(
        grid.width() as u32,
        grid.height() as u32,
        grid.data().iter().map(|&v| to_u8(v)).collect(),
    )
    .expect("buffer size matches grid");
    let mut out = Vec::new();
    DynamicImage::ImageLuma8(buf).write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}
