//! Procedural test scenes: piecewise-smooth reflectance under a smooth,
//! non-uniform illumination field.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::ImageF;

/// Width in pixels of the anti-aliased ramp at shape boundaries.
const EDGE_SOFTNESS: f32 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exposure {
    /// Mostly dark with a few lit regions.
    Under,
    /// Mostly blown out.
    Over,
    /// Dark and bright regions side by side.
    Mixed,
}

/// Reflectance: colored rectangles and discs over a low-frequency texture.
pub fn reflectance(seed: u64, height: usize, width: usize) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_gray = rng.gen_range(0.35..0.7);
    let base: [f32; 3] = [0, 1, 2].map(|_| base_gray + rng.gen_range(-0.08..0.08));
    let fx = rng.gen_range(1.0..4.0f32);
    let fy = rng.gen_range(1.0..4.0f32);
    let mut img = ImageF::from_fn(height, width, 3, |y, x, c| {
        let t = ((x as f32 / width as f32 * fx * 6.28).sin() * (y as f32 / height as f32 * fy * 6.28).cos())
            * 0.08;
        (base[c] + t).clamp(0.0, 1.0)
    });
    let shapes = rng.gen_range(4..10);
    for _ in 0..shapes {
        // natural surfaces are far less saturated than uniform RGB draws
        let gray: f32 = rng.gen();
        let color: [f32; 3] = [0, 1, 2].map(|_| (gray + 0.3 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0));
        let cy = rng.gen_range(0.0..height as f32);
        let cx = rng.gen_range(0.0..width as f32);
        let ry = rng.gen_range(0.08..0.35) * height as f32;
        let rx = rng.gen_range(0.08..0.35) * width as f32;
        let disc = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let dy = y as f32 - cy;
                let dx = x as f32 - cx;
                // signed distance (pixels) outside the shape boundary
                let dist = if disc {
                    ((dx / rx).powi(2) + (dy / ry).powi(2)).sqrt().mul_add(1.0, -1.0) * rx.min(ry)
                } else {
                    (dx.abs() - rx).max(dy.abs() - ry)
                };
                let cover = (0.5 - dist / EDGE_SOFTNESS).clamp(0.0, 1.0);
                if cover > 0.0 {
                    for (c, v) in color.iter().enumerate() {
                        let old = img.get(y, x, c);
                        img.set(y, x, c, old + cover * (0.1 + 0.85 * v - old));
                    }
                }
            }
        }
    }
    img
}

/// Smooth illumination field in `(0, 1.6]` for the requested exposure.
pub fn illumination(seed: u64, height: usize, width: usize, exposure: Exposure) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let (lo, hi) = match exposure {
        Exposure::Under => (0.05, rng.gen_range(0.3..0.6)),
        Exposure::Over => (rng.gen_range(0.9..1.2), 1.6),
        Exposure::Mixed => (0.08, 1.5),
    };
    let angle = rng.gen_range(0.0..std::f32::consts::TAU);
    let (ca, sa) = (angle.cos(), angle.sin());
    let spot_y = rng.gen_range(0.2..0.8) * height as f32;
    let spot_x = rng.gen_range(0.2..0.8) * width as f32;
    let spot_r = rng.gen_range(0.15..0.4) * height.max(width) as f32;
    ImageF::from_fn(height, width, 1, |y, x, _| {
        let u = ((x as f32 / width.max(1) as f32 - 0.5) * ca + (y as f32 / height.max(1) as f32 - 0.5) * sa + 0.5)
            .clamp(0.0, 1.0);
        let d2 = ((y as f32 - spot_y).powi(2) + (x as f32 - spot_x).powi(2)) / (spot_r * spot_r);
        let spot = (-d2).exp();
        let t = (0.7 * u + 0.3 * spot).clamp(0.0, 1.0);
        lo + (hi - lo) * t
    })
}

/// A full scene, clipped to `[0, 1]`.
pub fn scene(seed: u64, height: usize, width: usize, exposure: Exposure) -> ImageF {
    let r = reflectance(seed, height, width);
    let l = illumination(seed, height, width, exposure);
    let mut out = r;
    for (px, &lv) in out.data_mut().chunks_exact_mut(3).zip(l.data()) {
        for v in px {
            *v = (*v * lv).clamp(0.0, 1.0);
        }
    }
    out
}

/// Cycles through exposures so small sets cover all lighting conditions.
pub fn scene_set(seed: u64, count: usize, height: usize, width: usize) -> Vec<ImageF> {
    let kinds = [Exposure::Under, Exposure::Mixed, Exposure::Over, Exposure::Under];
    (0..count)
        .map(|i| scene(seed.wrapping_add(i as u64 * 7919), height, width, kinds[i % kinds.len()]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exposures_differ_in_brightness() {
        let under = scene(1, 32, 32, Exposure::Under);
        let over = scene(1, 32, 32, Exposure::Over);
        assert!(under.mean() < 0.3);
        assert!(over.mean() > under.mean() + 0.2);
        assert!(under.is_finite() && over.is_finite());
    }

    #[test]
    fn deterministic() {
        assert_eq!(scene(5, 16, 24, Exposure::Mixed), scene(5, 16, 24, Exposure::Mixed));
    }
}
