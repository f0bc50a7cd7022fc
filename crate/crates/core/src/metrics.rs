//! Full-reference (PSNR, SSIM) and order-based (LOE) quality metrics.

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::ops;
use crate::ssim::{self, SsimConfig};

/// Longer side of the lightness plane LOE compares.
pub const LOE_MAX_SIDE: usize = 100;

/// Peak signal-to-noise ratio for unit dynamic range. Identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &ImageF, b: &ImageF) -> Result<f64> {
    a.ensure_same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(Error::invalid("psnr of empty images"));
    }
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((*x as f64) - (*y as f64)).powi(2))
        .sum::<f64>()
        / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

/// Mean windowed SSIM (11x11 Gaussian window, sigma 1.5).
pub fn ssim(a: &ImageF, b: &ImageF) -> Result<f64> {
    ssim::ssim_with(a, b, &SsimConfig::default())
}

fn lightness(img: &ImageF) -> Result<ImageF> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => ops::bright_channel(img),
        n => Err(Error::invalid(format!("loe: unsupported channel count {n}"))),
    }
}

fn nearest_downsample(plane: &ImageF, max_side: usize) -> ImageF {
    let (h, w) = (plane.height(), plane.width());
    let longer = h.max(w);
    if longer <= max_side {
        return plane.clone();
    }
    let scale = max_side as f64 / longer as f64;
    let dh = ((h as f64 * scale).floor() as usize).max(1);
    let dw = ((w as f64 * scale).floor() as usize).max(1);
    ImageF::from_fn(dh, dw, 1, |y, x, _| {
        let sy = (((y as f64 + 0.5) * h as f64 / dh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / dw as f64) as usize).min(w - 1);
        plane.get(sy, sx, 0)
    })
}

/// Lightness order error of `enhanced` relative to `original`: the number
/// of pixel pairs whose relative lightness order flips, divided by the pixel
/// count of the (downsampled) lightness plane. Not symmetric.
pub fn loe(original: &ImageF, enhanced: &ImageF) -> Result<f64> {
    original.ensure_same_shape(enhanced, "loe")?;
    if original.is_empty() {
        return Err(Error::invalid("loe of empty images"));
    }
    let l = nearest_downsample(&lightness(original)?, LOE_MAX_SIDE);
    let e = nearest_downsample(&lightness(enhanced)?, LOE_MAX_SIDE);
    let (l, e) = (l.data(), e.data());
    let m = l.len();
    let mut flips: u64 = 0;
    for i in 0..m {
        let (li, ei) = (l[i], e[i]);
        flips += l
            .iter()
            .zip(e)
            .filter(|(&lj, &ej)| (li > lj) != (ei > ej))
            .count() as u64;
    }
    Ok(flips as f64 / m as f64)
}

fn serialize_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str("inf")
    }
}

fn deserialize_psnr<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Repr::Str(s) => Err(serde::de::Error::custom(format!("bad psnr value {s:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub input: String,
    pub target: String,
    /// dB; identical images serialize as `"inf"`.
    #[serde(serialize_with = "serialize_psnr", deserialize_with = "deserialize_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub loe: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub entries: Vec<MetricEntry>,
    /// Mean over entries with finite PSNR.
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_loe: f64,
}

impl MetricReport {
    pub fn from_entries(entries: Vec<MetricEntry>) -> Self {
        let finite: Vec<f64> = entries.iter().map(|e| e.psnr).filter(|p| p.is_finite()).collect();
        let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| {
            if n == 0 {
                0.0
            } else {
                v.sum::<f64>() / n as f64
            }
        };
        let n = entries.len();
        Self {
            mean_psnr: mean(&mut finite.iter().copied(), finite.len()),
            mean_ssim: mean(&mut entries.iter().map(|e| e.ssim), n),
            mean_loe: mean(&mut entries.iter().map(|e| e.loe), n),
            entries,
        }
    }
}

/// PSNR and SSIM of `enhanced` against `target`, LOE against `original`.
pub fn evaluate_pair(
    original: &ImageF,
    enhanced: &ImageF,
    target: &ImageF,
    input_name: &str,
    target_name: &str,
) -> Result<MetricEntry> {
    Ok(MetricEntry {
        input: input_name.to_string(),
        target: target_name.to_string(),
        psnr: psnr(enhanced, target)?,
        ssim: ssim(enhanced, target)?,
        loe: loe(original, enhanced)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(h: usize, w: usize, c: usize, seed: u64, lo: f32, hi: f32) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageF::from_fn(h, w, c, |_, _, _| rng.gen_range(lo..hi))
    }

    #[test]
    fn psnr_identical_is_infinite() {
        let a = random(8, 8, 3, 1, 0.0, 1.0);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
    }

    #[test]
    fn psnr_uniform_offset() {
        let a = random(16, 16, 3, 2, 0.0, 0.9);
        let b = a.map(|v| v + 0.1);
        let p = psnr(&a, &b).unwrap();
        assert!((p - 20.0).abs() < 0.01, "{p}");
    }

    #[test]
    fn psnr_matches_loop() {
        let a = random(7, 9, 3, 3, 0.0, 1.0);
        let b = random(7, 9, 3, 4, 0.0, 1.0);
        let mut se = 0.0f64;
        for y in 0..7 {
            for x in 0..9 {
                for c in 0..3 {
                    se += (a.get(y, x, c) as f64 - b.get(y, x, c) as f64).powi(2);
                }
            }
        }
        let expected = 10.0 * (1.0 / (se / (7.0 * 9.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_flat_closed_form() {
        let a = random(16, 16, 3, 5, 0.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let p = ImageF::filled(16, 16, 1, 0.5);
        let q = ImageF::filled(16, 16, 1, 0.6);
        let expected = (2.0 * 0.3 + 1e-4) / (0.61 + 1e-4);
        assert!((ssim(&p, &q).unwrap() - expected).abs() < 1e-6);
        assert!((expected - 0.9836).abs() < 1e-4);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random(16, 20, 3, 6, 0.0, 1.0);
        let b = random(16, 20, 3, 7, 0.0, 1.0);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loe_zero_for_monotone_maps() {
        let a = random(30, 40, 3, 8, 0.0, 1.0);
        assert_eq!(loe(&a, &a).unwrap(), 0.0);
        let toned = a.map(|v| v.sqrt() * 0.9 + 0.05);
        assert_eq!(loe(&a, &toned).unwrap(), 0.0);
    }

    #[test]
    fn loe_downsamples_large_planes() {
        let a = random(50, 240, 1, 9, 0.0, 1.0);
        let d = nearest_downsample(&a, LOE_MAX_SIDE);
        assert_eq!((d.height(), d.width()), (20, 100));
        assert_eq!(loe(&a, &a.map(|v| v * v)).unwrap(), 0.0);
    }

    #[test]
    fn report_means_skip_infinite_psnr() {
        let e = |p: f64| MetricEntry {
            input: "i".into(),
            target: "t".into(),
            psnr: p,
            ssim: 0.5,
            loe: 1.0,
        };
        let r = MetricReport::from_entries(vec![e(20.0), e(f64::INFINITY), e(30.0)]);
        assert_eq!(r.mean_psnr, 25.0);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.entries[1].psnr, f64::INFINITY);
    }
}
