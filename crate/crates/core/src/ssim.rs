//! Gaussian-windowed SSIM with its exact gradient.
//!
//! Local moments are taken over every window that fits entirely inside the
//! image ("valid" placement), per channel, and the SSIM map is averaged over
//! all windows and channels. Accumulation happens in `f64`.

use crate::error::{Error, Result};
use crate::image::ImageF;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub c1: f64,
    pub c2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            c1: 0.01 * 0.01,
            c2: 0.03 * 0.03,
        }
    }
}

impl SsimConfig {
    fn kernel(&self) -> Vec<f64> {
        let r = (self.window as f64 - 1.0) / 2.0;
        let k: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    }
}

struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

// valid separable correlation
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let n = k.len();
    let (oh, ow) = (p.h + 1 - n, p.w + 1 - n);
    let mut tmp = vec![0.0; p.h * ow];
    for y in 0..p.h {
        let row = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut s = 0.0;
            for (j, kj) in k.iter().enumerate() {
                s += kj * tmp[(y + j) * ow + x];
            }
            out[y * ow + x] = s;
        }
    }
    Plane { h: oh, w: ow, data: out }
}

// adjoint of `filter_valid`: scatter window values back onto the pixel grid
fn filter_valid_adjoint(p: &Plane, k: &[f64], h: usize, w: usize) -> Vec<f64> {
    let n = k.len();
    let ow = p.w;
    let mut tmp = vec![0.0; h * ow];
    for y in 0..p.h {
        for x in 0..ow {
            let v = p.data[y * ow + x];
            for (j, kj) in k.iter().enumerate() {
                tmp[(y + j) * ow + x] += kj * v;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            let row = &mut out[y * w + x..y * w + x + n];
            for (o, kj) in row.iter_mut().zip(k) {
                *o += kj * v;
            }
        }
    }
    out
}

fn check(a: &ImageF, b: &ImageF, cfg: &SsimConfig) -> Result<()> {
    a.ensure_same_shape(b, "ssim")?;
    if a.height() < cfg.window || a.width() < cfg.window {
        return Err(Error::invalid(format!(
            "ssim window {} exceeds image {}x{}",
            cfg.window,
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Mean SSIM and, when requested, its gradient with respect to `a`.
pub fn ssim_and_grad(
    a: &ImageF,
    b: &ImageF,
    cfg: &SsimConfig,
    want_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    check(a, b, cfg)?;
    let (h, w, c) = a.shape();
    let k = cfg.kernel();
    let n_win = (h + 1 - cfg.window) * (w + 1 - cfg.window);
    let norm = 1.0 / (n_win * c) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| vec![0.0f64; h * w * c]);

    for ch in 0..c {
        let xa: Vec<f64> = a.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let yb: Vec<f64> = b.data().iter().skip(ch).step_by(c).map(|&v| v as f64).collect();
        let plane = |d: Vec<f64>| Plane { h, w, data: d };
        let mx = filter_valid(&plane(xa.clone()), &k);
        let my = filter_valid(&plane(yb.clone()), &k);
        let exx = filter_valid(&plane(xa.iter().map(|v| v * v).collect()), &k);
        let eyy = filter_valid(&plane(yb.iter().map(|v| v * v).collect()), &k);
        let exy = filter_valid(&plane(xa.iter().zip(&yb).map(|(p, q)| p * q).collect()), &k);

        let m = mx.data.len();
        let mut d_m = vec![0.0; m];
        let mut d_xx = vec![0.0; m];
        let mut d_xy = vec![0.0; m];
        for i in 0..m {
            let (ux, uy) = (mx.data[i], my.data[i]);
            let sxx = exx.data[i] - ux * ux;
            let syy = eyy.data[i] - uy * uy;
            let sxy = exy.data[i] - ux * uy;
            let a1 = 2.0 * ux * uy + cfg.c1;
            let b1 = ux * ux + uy * uy + cfg.c1;
            let a2 = 2.0 * sxy + cfg.c2;
            let b2 = sxx + syy + cfg.c2;
            let s = a1 * a2 / (b1 * b2);
            total += s;
            if want_grad {
                // partials w.r.t. (mu_x, sigma_x^2, sigma_xy)
                let ds_dux = 2.0 * uy * a2 / (b1 * b2) - 2.0 * ux * s / b1;
                let ds_dsxx = -s / b2;
                let ds_dsxy = 2.0 * a1 / (b1 * b2);
                // re-expressed w.r.t. (mu_x, E[x^2], E[xy])
                d_m[i] = ds_dux - 2.0 * ux * ds_dsxx - uy * ds_dsxy;
                d_xx[i] = ds_dsxx;
                d_xy[i] = ds_dsxy;
            }
        }
        if let Some(g) = grad.as_mut() {
            let wrap = |d: Vec<f64>| Plane { h: mx.h, w: mx.w, data: d };
            let gm = filter_valid_adjoint(&wrap(d_m), &k, h, w);
            let gxx = filter_valid_adjoint(&wrap(d_xx), &k, h, w);
            let gxy = filter_valid_adjoint(&wrap(d_xy), &k, h, w);
            for q in 0..h * w {
                g[q * c + ch] = norm * (gm[q] + 2.0 * xa[q] * gxx[q] + yb[q] * gxy[q]);
            }
        }
    }
    Ok((total * norm, grad))
}

pub fn ssim_with(a: &ImageF, b: &ImageF, cfg: &SsimConfig) -> Result<f64> {
    ssim_and_grad(a, b, cfg, false).map(|(v, _)| v)
}
