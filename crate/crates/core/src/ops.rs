//! Per-pixel and rearrangement primitives.

use crate::error::{Error, Result};
use crate::image::{Image, ImageF, Scalar};

/// Per-pixel maximum over the three color channels.
pub fn bright_channel<T: Scalar>(img: &Image<T>) -> Result<Image<T>> {
    if img.channels() != 3 {
        return Err(Error::invalid(format!(
            "bright_channel expects 3 channels, got {}",
            img.channels()
        )));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| p[0].max(p[1]).max(p[2]))
        .collect();
    Image::from_vec(img.height(), img.width(), 1, data)
}

/// `1 - img`, the inverted image used for over-exposure handling.
pub fn invert<T: Scalar>(img: &Image<T>) -> Image<T> {
    img.map(|v| T::one() - v)
}

/// Packs each `factor`x`factor` block into channels in raster order
/// (top-left, top-right, bottom-left, bottom-right for factor 2).
pub fn space_to_depth<T: Scalar>(img: &Image<T>, factor: usize) -> Result<Image<T>> {
    let (h, w, c) = img.shape();
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::invalid(format!(
            "space_to_depth: {h}x{w} is not divisible by {factor}"
        )));
    }
    let (oh, ow) = (h / factor, w / factor);
    let oc = c * factor * factor;
    let mut out = Vec::with_capacity(h * w * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for dy in 0..factor {
                for dx in 0..factor {
                    out.extend_from_slice(img.pixel(oy * factor + dy, ox * factor + dx));
                }
            }
        }
    }
    Image::from_vec(oh, ow, oc, out)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space<T: Scalar>(img: &Image<T>, factor: usize) -> Result<Image<T>> {
    let (h, w, c) = img.shape();
    let block = factor * factor;
    if factor == 0 || c % block != 0 {
        return Err(Error::invalid(format!(
            "depth_to_space: {c} channels not divisible by {block}"
        )));
    }
    let oc = c / block;
    let mut out = Image::zeros(h * factor, w * factor, oc);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            for dy in 0..factor {
                for dx in 0..factor {
                    let k = (dy * factor + dx) * oc;
                    for ch in 0..oc {
                        out.set(y * factor + dy, x * factor + dx, ch, p[k + ch]);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Box-averages non-overlapping `factor`x`factor` blocks; trailing partial
/// blocks average whatever samples they contain.
pub fn box_downsample(img: &ImageF, factor: usize) -> ImageF {
    let (h, w, c) = img.shape();
    let oh = h.div_ceil(factor);
    let ow = w.div_ceil(factor);
    let mut out = ImageF::zeros(oh, ow, c);
    for oy in 0..oh {
        for ox in 0..ow {
            let ys = oy * factor..((oy + 1) * factor).min(h);
            let xs = ox * factor..((ox + 1) * factor).min(w);
            let n = (ys.len() * xs.len()) as f32;
            for ch in 0..c {
                let mut s = 0.0f32;
                for y in ys.clone() {
                    for x in xs.clone() {
                        s += img.get(y, x, ch);
                    }
                }
                out.set(oy, ox, ch, s / n);
            }
        }
    }
    out
}

/// Rec. 601 luma of an RGB image.
pub fn luma(img: &ImageF) -> Result<ImageF> {
    if img.channels() != 3 {
        return Err(Error::invalid("luma expects 3 channels"));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect();
    ImageF::from_vec(img.height(), img.width(), 1, data)
}
