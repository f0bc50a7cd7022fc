//! Edge-preserving L0 gradient smoothing and Mertens exposure fusion.

use serde::{Deserialize, Serialize};

use crate::dct::DctPlan;
use crate::error::{Error, Result};
use crate::image::ImageF;
use crate::ops;
use crate::pyramid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothParams {
    pub lambda: f32,
    pub kappa: f32,
    pub beta_max: f32,
}

impl SmoothParams {
    pub fn new(lambda: f32) -> Self {
        Self {
            lambda,
            kappa: 2.0,
            beta_max: 1e5,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::invalid(format!(
                "smoothing lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.kappa > 1.0) {
            return Err(Error::invalid(format!("kappa must exceed 1, got {}", self.kappa)));
        }
        if !(self.beta_max > 0.0) {
            return Err(Error::invalid("beta_max must be positive"));
        }
        Ok(())
    }
}

/// L0 gradient minimization by alternating hard thresholding and a DCT
/// Poisson solve, with `beta` growing geometrically.
pub fn l0_smooth(img: &ImageF, p: SmoothParams) -> Result<ImageF> {
    l0_smooth_traced(img, p).map(|(out, _)| out)
}

/// Energies of one outer iteration at a fixed `beta`.
///
/// With `C` counting pixels whose gradient (over all channels) is nonzero and
/// `E_b(S, g) = |S - I|^2 + lambda C(g) + b |grad S - g|^2`:
/// `entering = E_b(S, grad S)` is the plain L0 objective of the incoming
/// iterate, `after_threshold = E_b(S, g*)` and `after_solve = E_b(S', g*)`.
/// Each half-step is an exact minimization, so the three never increase.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct L0Step {
    pub beta: f64,
    pub entering: f64,
    pub after_threshold: f64,
    pub after_solve: f64,
}

fn forward_diff(plane: &[f32], w: usize, h: usize, i: usize) -> (f32, f32) {
    let (y, x) = (i / w, i % w);
    let gx = if x + 1 < w { plane[i + 1] - plane[i] } else { 0.0 };
    let gy = if y + 1 < h { plane[i + w] - plane[i] } else { 0.0 };
    (gx, gy)
}

fn coupling(s: &[Vec<f32>], dh: &[Vec<f32>], dv: &[Vec<f32>], w: usize, h: usize) -> f64 {
    let mut acc = 0.0f64;
    for ch in 0..s.len() {
        for i in 0..w * h {
            let (gx, gy) = forward_diff(&s[ch], w, h, i);
            acc += ((gx - dh[ch][i]) as f64).powi(2) + ((gy - dv[ch][i]) as f64).powi(2);
        }
    }
    acc
}

fn residual(s: &[Vec<f32>], input: &[Vec<f32>]) -> f64 {
    s.iter()
        .zip(input)
        .flat_map(|(a, b)| a.iter().zip(b))
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum()
}

/// Like [`l0_smooth`], also returning the energy bookkeeping of every outer
/// iteration.
pub fn l0_smooth_traced(img: &ImageF, p: SmoothParams) -> Result<(ImageF, Vec<L0Step>)> {
    p.validate()?;
    if p.lambda == 0.0 || img.is_empty() {
        return Ok((img.clone(), Vec::new()));
    }
    let (h, w, c) = img.shape();
    let plan = DctPlan::new(h, w);
    let pi = std::f32::consts::PI;
    // eigenvalues of the Neumann difference operators in the DCT basis
    let eig_x: Vec<f32> = (0..w).map(|k| 2.0 - 2.0 * (pi * k as f32 / w as f32).cos()).collect();
    let eig_y: Vec<f32> = (0..h).map(|k| 2.0 - 2.0 * (pi * k as f32 / h as f32).cos()).collect();

    let input: Vec<Vec<f32>> = (0..c).map(|ch| img.channel(ch).into_data()).collect();
    let input_hat: Vec<Vec<f32>> = input
        .iter()
        .map(|plane| {
            let mut v = plane.clone();
            plan.forward(&mut v);
            v
        })
        .collect();
    let mut s = input.clone();
    let mut dh = vec![vec![0.0f32; h * w]; c];
    let mut dv = vec![vec![0.0f32; h * w]; c];
    let mut energies = Vec::new();

    let mut beta = 2.0 * p.lambda;
    while beta < p.beta_max {
        // auxiliary gradients, hard-thresholded jointly over channels
        let thresh = p.lambda / beta;
        let data_before = residual(&s, &input);
        let mut nnz = 0usize;
        let mut nonzero_grad = 0usize;
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let mut mag = 0.0f32;
                for ch in 0..c {
                    let (gx, gy) = forward_diff(&s[ch], w, h, i);
                    dh[ch][i] = gx;
                    dv[ch][i] = gy;
                    mag += gx * gx + gy * gy;
                }
                if mag > 0.0 {
                    nonzero_grad += 1;
                }
                if mag < thresh {
                    for ch in 0..c {
                        dh[ch][i] = 0.0;
                        dv[ch][i] = 0.0;
                    }
                } else {
                    nnz += 1;
                }
            }
        }

        let lam = p.lambda as f64;
        let b = beta as f64;
        let entering = data_before + lam * nonzero_grad as f64;
        let after_threshold = data_before + lam * nnz as f64 + b * coupling(&s, &dh, &dv, w, h);

        // S = argmin |S - I|^2 + beta |D S - (h, v)|^2, solved in the DCT basis
        for ch in 0..c {
            let mut rhs = vec![0.0f32; h * w];
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let mut div = 0.0;
                    if x >= 1 {
                        div += dh[ch][i - 1];
                    }
                    if x + 1 < w {
                        div -= dh[ch][i];
                    }
                    if y >= 1 {
                        div += dv[ch][i - w];
                    }
                    if y + 1 < h {
                        div -= dv[ch][i];
                    }
                    rhs[i] = beta * div;
                }
            }
            plan.forward(&mut rhs);
            for u in 0..h {
                for v in 0..w {
                    let i = u * w + v;
                    rhs[i] = (input_hat[ch][i] + rhs[i]) / (1.0 + beta * (eig_x[v] + eig_y[u]));
                }
            }
            plan.inverse(&mut rhs);
            s[ch] = rhs;
        }
        energies.push(L0Step {
            beta: b,
            entering,
            after_threshold,
            after_solve: residual(&s, &input) + lam * nnz as f64 + b * coupling(&s, &dh, &dv, w, h),
        });
        beta *= p.kappa;
    }

    let planes: Vec<ImageF> = s
        .into_iter()
        .map(|d| ImageF::from_vec(h, w, 1, d).expect("plane size"))
        .collect();
    Ok((ImageF::from_channels(&planes)?.clamp01(), energies))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub w_contrast: f32,
    pub w_saturation: f32,
    pub w_exposedness: f32,
    pub sigma_e: f32,
    /// Pyramid depth; 0 picks the deepest pyramid the image supports.
    pub levels: usize,
}

impl Default for FusionParams {
    fn default() -> Self {
        Self {
            w_contrast: 1.0,
            w_saturation: 1.0,
            w_exposedness: 1.0,
            sigma_e: 0.2,
            levels: 0,
        }
    }
}

impl FusionParams {
    pub fn validate(&self) -> Result<()> {
        let exps = [self.w_contrast, self.w_saturation, self.w_exposedness];
        if exps.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
            return Err(Error::invalid("fusion exponents must be finite and >= 0"));
        }
        if exps.iter().all(|e| *e == 0.0) {
            return Err(Error::invalid("at least one fusion exponent must be positive"));
        }
        if !(self.sigma_e > 0.0) {
            return Err(Error::invalid("sigma_e must be positive"));
        }
        Ok(())
    }
}

/// Per-pixel Mertens quality measure: contrast^wc * saturation^ws * wellexp^we.
pub fn exposedness_weights(img: &ImageF, p: &FusionParams) -> Result<ImageF> {
    let (h, w, c) = img.shape();
    let gray = if c == 3 { ops::luma(img)? } else { img.channel(0) };
    let two_s2 = 2.0 * p.sigma_e * p.sigma_e;
    let mut out = ImageF::zeros(h, w, 1);
    for y in 0..h {
        for x in 0..w {
            let (yi, xi) = (y as isize, x as isize);
            let lap = gray.get_clamped(yi - 1, xi, 0)
                + gray.get_clamped(yi + 1, xi, 0)
                + gray.get_clamped(yi, xi - 1, 0)
                + gray.get_clamped(yi, xi + 1, 0)
                - 4.0 * gray.get(y, x, 0);
            let contrast = lap.abs();
            let px = img.pixel(y, x);
            let mean = px.iter().sum::<f32>() / c as f32;
            let saturation = (px.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / c as f32).sqrt();
            let wellexp: f32 = px
                .iter()
                .map(|v| (-(v - 0.5).powi(2) / two_s2).exp())
                .product();
            out.set(
                y,
                x,
                0,
                contrast.powf(p.w_contrast)
                    * saturation.powf(p.w_saturation)
                    * wellexp.powf(p.w_exposedness),
            );
        }
    }
    Ok(out)
}

fn check_sequence(seq: &[ImageF]) -> Result<()> {
    let first = seq
        .first()
        .ok_or_else(|| Error::invalid("fusion needs at least one image"))?;
    if first.is_empty() {
        return Err(Error::invalid("fusion of empty images"));
    }
    for (i, img) in seq.iter().enumerate() {
        if !img.same_shape(first) {
            return Err(Error::invalid(format!(
                "fusion input {i} has shape {:?}, expected {:?}",
                img.shape(),
                first.shape()
            )));
        }
    }
    Ok(())
}

/// Quality weights normalized to sum to one at every pixel.
pub fn normalized_weights(seq: &[ImageF], p: &FusionParams) -> Result<Vec<ImageF>> {
    check_sequence(seq)?;
    p.validate()?;
    let mut weights = seq
        .iter()
        .map(|img| exposedness_weights(img, p).map(|w| w.map(|v| v + 1e-12)))
        .collect::<Result<Vec<_>>>()?;
    let n = weights[0].len();
    for i in 0..n {
        let total: f32 = weights.iter().map(|w| w.data()[i]).sum();
        for w in &mut weights {
            w.data_mut()[i] /= total;
        }
    }
    Ok(weights)
}

/// Multi-resolution exposure fusion of an aligned image sequence.
pub fn mertens_fuse(seq: &[ImageF], p: &FusionParams) -> Result<ImageF> {
    let weights = normalized_weights(seq, p)?;
    let (h, w, c) = seq[0].shape();
    let levels = if p.levels == 0 {
        pyramid::max_levels(h, w)
    } else {
        p.levels
    };
    let mut blended: Option<Vec<ImageF>> = None;
    for (img, wt) in seq.iter().zip(&weights) {
        let lap = pyramid::laplacian_pyramid(img, levels)?;
        let gw = pyramid::gaussian_pyramid(wt, levels)?;
        let acc = blended.get_or_insert_with(|| {
            lap.levels
                .iter()
                .map(|l| ImageF::zeros(l.height(), l.width(), c))
                .collect()
        });
        for ((dst, band), gl) in acc.iter_mut().zip(&lap.levels).zip(&gw.levels) {
            let out = dst.data_mut();
            for (i, (b, &wv)) in band.data().chunks_exact(c).zip(gl.data()).enumerate() {
                for (ch, &v) in b.iter().enumerate() {
                    out[i * c + ch] += wv * v;
                }
            }
        }
    }
    let pyr = pyramid::Pyramid {
        kind: pyramid::PyramidKind::Laplacian,
        levels: blended.expect("non-empty sequence"),
    };
    Ok(pyramid::reconstruct(&pyr)?.clamp01())
}
