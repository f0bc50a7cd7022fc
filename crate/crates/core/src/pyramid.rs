//! Burt–Adelson Gaussian and Laplacian pyramids with a 5-tap binomial kernel
//! and clamped borders.

use crate::error::{Error, Result};
use crate::image::ImageF;

const KERNEL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PyramidKind {
    Gaussian,
    Laplacian,
}

#[derive(Clone, Debug)]
pub struct Pyramid {
    pub kind: PyramidKind,
    pub levels: Vec<ImageF>,
}

/// Deepest pyramid possible for an image: halve until both sides are 1.
pub fn max_levels(height: usize, width: usize) -> usize {
    let mut n = height.max(width).max(1);
    let mut levels = 1;
    while n > 1 {
        n = n.div_ceil(2);
        levels += 1;
    }
    levels
}

fn check_levels(img: &ImageF, levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::invalid("pyramid needs at least one level"));
    }
    if img.is_empty() {
        return Err(Error::invalid("pyramid of an empty image"));
    }
    let max = max_levels(img.height(), img.width());
    if levels > max {
        return Err(Error::invalid(format!(
            "{levels} pyramid levels requested but a {}x{} image supports at most {max}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

/// Blurs with the binomial kernel and keeps every other sample.
pub fn downsample(img: &ImageF) -> ImageF {
    let (h, w, c) = img.shape();
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    // horizontal pass evaluated only at even columns
    let mut tmp = ImageF::zeros(h, ow, c);
    for y in 0..h {
        for ox in 0..ow {
            let x = (2 * ox) as isize;
            for ch in 0..c {
                let mut s = 0.0;
                for (k, wk) in KERNEL.iter().enumerate() {
                    s += wk * img.get_clamped(y as isize, x + k as isize - 2, ch);
                }
                tmp.set(y, ox, ch, s);
            }
        }
    }
    let mut out = ImageF::zeros(oh, ow, c);
    for oy in 0..oh {
        let y = (2 * oy) as isize;
        for x in 0..ow {
            for ch in 0..c {
                let mut s = 0.0;
                for (k, wk) in KERNEL.iter().enumerate() {
                    s += wk * tmp.get_clamped(y + k as isize - 2, x as isize, ch);
                }
                out.set(oy, x, ch, s);
            }
        }
    }
    out
}

// 1-D expand tap: zero-insertion followed by the binomial kernel (gain 2).
#[inline]
fn expand_taps(i: usize, len: usize) -> [(usize, f32); 3] {
    let clamp = |j: isize| j.clamp(0, len as isize - 1) as usize;
    let half = (i / 2) as isize;
    if i % 2 == 0 {
        [
            (clamp(half - 1), 1.0 / 8.0),
            (clamp(half), 6.0 / 8.0),
            (clamp(half + 1), 1.0 / 8.0),
        ]
    } else {
        [(clamp(half), 0.5), (clamp(half + 1), 0.5), (0, 0.0)]
    }
}

/// Upsamples a coarse level to `height x width`.
pub fn expand(img: &ImageF, height: usize, width: usize) -> ImageF {
    let (h, w, c) = img.shape();
    let mut tmp = ImageF::zeros(h, width, c);
    for y in 0..h {
        for x in 0..width {
            let taps = expand_taps(x, w);
            for ch in 0..c {
                let s = taps.iter().map(|&(j, wt)| wt * img.get(y, j, ch)).sum();
                tmp.set(y, x, ch, s);
            }
        }
    }
    let mut out = ImageF::zeros(height, width, c);
    for y in 0..height {
        let taps = expand_taps(y, h);
        for x in 0..width {
            for ch in 0..c {
                let s = taps.iter().map(|&(j, wt)| wt * tmp.get(j, x, ch)).sum();
                out.set(y, x, ch, s);
            }
        }
    }
    out
}

pub fn gaussian_pyramid(img: &ImageF, levels: usize) -> Result<Pyramid> {
    check_levels(img, levels)?;
    let mut out = Vec::with_capacity(levels);
    out.push(img.clone());
    for _ in 1..levels {
        let next = downsample(out.last().expect("non-empty"));
        out.push(next);
    }
    Ok(Pyramid {
        kind: PyramidKind::Gaussian,
        levels: out,
    })
}

pub fn laplacian_pyramid(img: &ImageF, levels: usize) -> Result<Pyramid> {
    let gauss = gaussian_pyramid(img, levels)?;
    let mut out = Vec::with_capacity(levels);
    for k in 0..levels - 1 {
        let fine = &gauss.levels[k];
        let up = expand(&gauss.levels[k + 1], fine.height(), fine.width());
        out.push(fine.zip_map(&up, |a, b| a - b)?);
    }
    out.push(gauss.levels[levels - 1].clone());
    Ok(Pyramid {
        kind: PyramidKind::Laplacian,
        levels: out,
    })
}

/// Collapses a Laplacian pyramid back into an image.
pub fn reconstruct(pyr: &Pyramid) -> Result<ImageF> {
    if pyr.kind != PyramidKind::Laplacian {
        return Err(Error::invalid("reconstruct expects a Laplacian pyramid"));
    }
    let mut acc = pyr
        .levels
        .last()
        .ok_or_else(|| Error::invalid("empty pyramid"))?
        .clone();
    for level in pyr.levels.iter().rev().skip(1) {
        let up = expand(&acc, level.height(), level.width());
        acc = level.zip_map(&up, |a, b| a + b)?;
    }
    Ok(acc)
}
