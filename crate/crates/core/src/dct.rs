//! Orthonormal 2-D DCT-II and its inverse, computed as separable row and
//! column passes.

use std::sync::Arc;

use rustdct::{DctPlanner, TransformType2And3};

use crate::error::{Error, Result};
use crate::image::ImageF;

/// Precomputed 1-D transforms for a fixed `height x width` plane.
pub struct DctPlan {
    height: usize,
    width: usize,
    rows: Arc<dyn TransformType2And3<f32>>,
    cols: Arc<dyn TransformType2And3<f32>>,
}

impl DctPlan {
    pub fn new(height: usize, width: usize) -> Self {
        let mut planner = DctPlanner::new();
        Self {
            height,
            width,
            rows: planner.plan_dct2(width),
            cols: planner.plan_dct2(height),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// In-place forward transform of a row-major plane.
    pub fn forward(&self, plane: &mut [f32]) {
        assert_eq!(plane.len(), self.height * self.width);
        for row in plane.chunks_exact_mut(self.width) {
            self.rows.process_dct2(row);
            orthonormalize(row);
        }
        let mut col = vec![0.0f32; self.height];
        for x in 0..self.width {
            for (y, v) in col.iter_mut().enumerate() {
                *v = plane[y * self.width + x];
            }
            self.cols.process_dct2(&mut col);
            orthonormalize(&mut col);
            for (y, v) in col.iter().enumerate() {
                plane[y * self.width + x] = *v;
            }
        }
    }

    /// In-place inverse transform; exact inverse of [`DctPlan::forward`].
    pub fn inverse(&self, plane: &mut [f32]) {
        assert_eq!(plane.len(), self.height * self.width);
        let mut col = vec![0.0f32; self.height];
        for x in 0..self.width {
            for (y, v) in col.iter_mut().enumerate() {
                *v = plane[y * self.width + x];
            }
            denormalize(&mut col);
            self.cols.process_dct3(&mut col);
            for (y, v) in col.iter().enumerate() {
                plane[y * self.width + x] = *v;
            }
        }
        for row in plane.chunks_exact_mut(self.width) {
            denormalize(row);
            self.rows.process_dct3(row);
        }
    }
}

// rustdct computes the unscaled DCT-II sum; scale to the orthonormal basis.
fn orthonormalize(v: &mut [f32]) {
    let n = v.len() as f32;
    let s0 = (1.0 / n).sqrt();
    let sk = (2.0 / n).sqrt();
    v[0] *= s0;
    for x in &mut v[1..] {
        *x *= sk;
    }
}

// DCT-III in rustdct halves the DC term, hence the factor 2 on coefficient 0.
fn denormalize(v: &mut [f32]) {
    let n = v.len() as f32;
    let s0 = (1.0 / n).sqrt();
    let sk = (2.0 / n).sqrt();
    v[0] *= 2.0 * s0;
    for x in &mut v[1..] {
        *x *= sk;
    }
}

fn require_single_channel(img: &ImageF, op: &str) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::invalid(format!(
            "{op} expects a single-channel plane, got {} channels",
            img.channels()
        )));
    }
    if img.is_empty() {
        return Err(Error::invalid(format!("{op} on an empty plane")));
    }
    Ok(())
}

/// Orthonormal DCT-II of a single-channel plane.
pub fn dct2(img: &ImageF) -> Result<ImageF> {
    require_single_channel(img, "dct2")?;
    let plan = DctPlan::new(img.height(), img.width());
    let mut out = img.clone();
    plan.forward(out.data_mut());
    Ok(out)
}

/// Inverse of [`dct2`].
pub fn idct2(coeffs: &ImageF) -> Result<ImageF> {
    require_single_channel(coeffs, "idct2")?;
    let plan = DctPlan::new(coeffs.height(), coeffs.width());
    let mut out = coeffs.clone();
    plan.inverse(out.data_mut());
    Ok(out)
}
