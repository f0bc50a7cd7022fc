//! Sensor-noise and compression degradation.

use jpeg_encoder::{ColorType, Encoder, SamplingFactor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::io;

const GAMMA: f32 = 2.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeParams {
    /// Signal-dependent (shot) noise scale in linear space.
    pub sigma_s: f32,
    /// Signal-independent (read) noise standard deviation in linear space.
    pub sigma_c: f32,
    pub jpeg_quality: u8,
    pub seed: u64,
}

impl DegradeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("sigma_s", self.sigma_s), ("sigma_c", self.sigma_c)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        check_quality(self.jpeg_quality)
    }
}

/// Closed ranges the per-image degradation parameters are drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradeRanges {
    pub sigma_s: (f32, f32),
    pub sigma_c: (f32, f32),
    pub jpeg_quality: (u8, u8),
    pub seed: u64,
}

impl Default for DegradeRanges {
    fn default() -> Self {
        Self {
            sigma_s: (0.0, 0.03),
            sigma_c: (0.0, 0.06),
            jpeg_quality: (60, 95),
            seed: 0,
        }
    }
}

impl DegradeRanges {
    /// No noise and maximum JPEG quality.
    pub fn none(seed: u64) -> Self {
        Self {
            sigma_s: (0.0, 0.0),
            sigma_c: (0.0, 0.0),
            jpeg_quality: (100, 100),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f32, f32)| lo >= 0.0 && lo <= hi && hi.is_finite();
        if !ok(self.sigma_s) || !ok(self.sigma_c) {
            return Err(Error::invalid("noise ranges must satisfy 0 <= lo <= hi"));
        }
        let (qlo, qhi) = self.jpeg_quality;
        check_quality(qlo)?;
        check_quality(qhi)?;
        if qlo > qhi {
            return Err(Error::invalid("jpeg quality range must satisfy lo <= hi"));
        }
        Ok(())
    }

    /// Draws the parameters of one pair; `index` selects the pair seed
    /// `seed ^ index`.
    pub fn sample(&self, index: u64) -> DegradeParams {
        let seed = self.seed ^ index;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |(lo, hi): (f32, f32)| if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let sigma_s = draw(self.sigma_s);
        let sigma_c = draw(self.sigma_c);
        let (qlo, qhi) = self.jpeg_quality;
        let jpeg_quality = if qhi > qlo { rng.gen_range(qlo..=qhi) } else { qlo };
        DegradeParams {
            sigma_s,
            sigma_c,
            jpeg_quality,
            seed,
        }
    }
}

fn check_quality(q: u8) -> Result<()> {
    if (1..=100).contains(&q) {
        Ok(())
    } else {
        Err(Error::invalid(format!("jpeg quality {q} outside [1,100]")))
    }
}

/// Heteroscedastic Gaussian noise applied in gamma-linearized space:
/// variance `sigma_s * x + sigma_c^2` for linear intensity `x`.
pub fn add_realistic_noise(img: &ImageF, p: &DegradeParams) -> Result<ImageF> {
    p.validate()?;
    if p.sigma_s == 0.0 && p.sigma_c == 0.0 {
        return Ok(img.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let read_var = p.sigma_c * p.sigma_c;
    let mut out = img.clone();
    for v in out.data_mut() {
        let lin = v.clamp(0.0, 1.0).powf(GAMMA);
        let std = (p.sigma_s * lin + read_var).sqrt();
        let n: f32 = StandardNormal.sample(&mut rng);
        *v = (lin + std * n).clamp(0.0, 1.0).powf(1.0 / GAMMA);
    }
    Ok(out)
}

/// Baseline JPEG with 4:2:0 chroma subsampling and the standard tables
/// scaled by `quality`.
pub fn encode_jpeg(img: &ImageF, quality: u8) -> Result<Vec<u8>> {
    check_quality(quality)?;
    if img.channels() != 3 {
        return Err(Error::invalid("jpeg encoding expects an RGB image"));
    }
    let (h, w) = (img.height(), img.width());
    if h == 0 || w == 0 || h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::invalid(format!("cannot jpeg-encode a {h}x{w} image")));
    }
    let raw: Vec<u8> = img.data().iter().map(|&v| io::to_u8(v)).collect();
    let mut out = Vec::new();
    let mut enc = Encoder::new(&mut out, quality);
    enc.set_sampling_factor(SamplingFactor::F_2_2);
    enc.encode(&raw, w as u16, h as u16, ColorType::Rgb)
        .map_err(|e| Error::Codec(e.to_string()))?;
    Ok(out)
}

/// Encode-decode round trip through JPEG.
pub fn jpeg_degrade(img: &ImageF, quality: u8) -> Result<ImageF> {
    io::decode_image(&encode_jpeg(img, quality)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::psnr;
    use crate::synth;

    fn params(sigma_s: f32, sigma_c: f32, seed: u64) -> DegradeParams {
        DegradeParams {
            sigma_s,
            sigma_c,
            jpeg_quality: 90,
            seed,
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let img = synth::scene(1, 16, 16, synth::Exposure::Mixed);
        let out = add_realistic_noise(&img, &params(0.0, 0.0, 3)).unwrap();
        assert!(img.max_abs_diff(&out) <= 1e-6);
    }

    #[test]
    fn noise_is_seeded() {
        let img = synth::scene(2, 16, 16, synth::Exposure::Under);
        let a = add_realistic_noise(&img, &params(0.02, 0.05, 9)).unwrap();
        let b = add_realistic_noise(&img, &params(0.02, 0.05, 9)).unwrap();
        let c = add_realistic_noise(&img, &params(0.02, 0.05, 10)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.shape(), img.shape());
    }

    #[test]
    fn read_noise_variance_in_linear_space() {
        let img = ImageF::filled(256, 256, 1, 0.5);
        let out = add_realistic_noise(&img, &params(0.0, 0.1, 17)).unwrap();
        let base = 0.5f64.powf(2.2);
        let res: Vec<f64> = out.data().iter().map(|&v| (v as f64).powf(2.2) - base).collect();
        let mean = res.iter().sum::<f64>() / res.len() as f64;
        let var = res.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (res.len() - 1) as f64;
        assert!((var - 0.01).abs() <= 0.001, "variance {var}");
    }

    #[test]
    fn jpeg_quality_range_checked() {
        let img = ImageF::filled(8, 8, 3, 0.5);
        assert!(jpeg_degrade(&img, 0).is_err());
        assert!(jpeg_degrade(&img, 101).is_err());
        assert!(jpeg_degrade(&img, 1).is_ok());
    }

    // Below roughly q40 the scaled DC quantizer step alone exceeds 0.02.
    #[test]
    fn flat_image_survives_jpeg() {
        for q in [40, 50, 75, 95, 100] {
            for k in 0..=20 {
                let v = k as f32 / 20.0;
                let color = [v, 0.5, 1.0 - v];
                let img = ImageF::from_fn(24, 40, 3, |_, _, c| color[c]);
                let out = jpeg_degrade(&img, q).unwrap();
                assert_eq!(out.shape(), img.shape());
                assert!(img.max_abs_diff(&out) < 0.02, "q={q} v={v}");
            }
        }
    }

    fn natural(h: usize, w: usize) -> ImageF {
        ImageF::from_fn(h, w, 3, |y, x, c| {
            let t = x as f32 / w as f32 * 3.0 + (y as f32 / 20.0).sin();
            let grain = 1.0 + 0.04 * ((x * 7 + y * 3) % 5) as f32;
            (0.5 + 0.3 * (t + c as f32).sin() * grain).clamp(0.0, 1.0)
        })
    }

    #[test]
    fn jpeg_quality_trend() {
        let img = natural(64, 64);
        let hi = psnr(&img, &jpeg_degrade(&img, 95).unwrap()).unwrap();
        let q90 = psnr(&img, &jpeg_degrade(&img, 90).unwrap()).unwrap();
        let q10 = psnr(&img, &jpeg_degrade(&img, 10).unwrap()).unwrap();
        assert!(hi > 35.0, "q95 psnr {hi}");
        assert!(q10 < q90);
    }

    #[test]
    fn sampled_params_stay_in_range() {
        let r = DegradeRanges::default();
        for i in 0..50 {
            let p = r.sample(i);
            assert!((0.0..=0.03).contains(&p.sigma_s));
            assert!((0.0..=0.06).contains(&p.sigma_c));
            assert!((60..=95).contains(&p.jpeg_quality));
            assert_eq!(p.seed, i);
        }
        assert_eq!(r.sample(3), r.sample(3));
    }
}
