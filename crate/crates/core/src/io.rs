//! PNG/JPEG decoding and 8-bit encoding.
//!
//! Samples map to and from `[0, 1]` as `v / 255` and `round(v * 255)` with
//! clamping.

use std::io::Cursor;
use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::image::ImageF;

#[inline]
pub fn to_u8(v: f32) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

fn from_dynamic(img: DynamicImage) -> ImageF {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
    ImageF::from_vec(h as usize, w as usize, 3, data).expect("rgb buffer length")
}

/// Decodes PNG or JPEG bytes into a 3-channel image.
pub fn decode_image(bytes: &[u8]) -> Result<ImageF> {
    let img = image::load_from_memory(bytes)?;
    Ok(from_dynamic(img))
}

/// Reads the dimensions `(height, width)` from an encoded header without
/// decoding pixel data.
pub fn peek_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let reader = image::ImageReader::new(Cursor::new(bytes)).with_guessed_format()?;
    let (w, h) = reader.into_dimensions()?;
    Ok((h as usize, w as usize))
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let bytes = std::fs::read(path)?;
    decode_image(&bytes).map_err(|e| Error::Codec(format!("{}: {e}", path.display())))
}

/// Quantizes to 8 bits per sample; accepts 1- or 3-channel images.
pub fn to_dynamic(img: &ImageF) -> Result<DynamicImage> {
    let (h, w, c) = img.shape();
    let raw: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    match c {
        1 => Ok(DynamicImage::ImageLuma8(
            GrayImage::from_raw(w as u32, h as u32, raw).expect("gray buffer length"),
        )),
        3 => Ok(DynamicImage::ImageRgb8(
            RgbImage::from_raw(w as u32, h as u32, raw).expect("rgb buffer length"),
        )),
        n => Err(Error::invalid(format!("cannot encode a {n}-channel image"))),
    }
}

pub fn encode_png(img: &ImageF) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    to_dynamic(img)?.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

pub fn save_png(img: &ImageF, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}
