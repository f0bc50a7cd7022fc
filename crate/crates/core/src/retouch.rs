//! Classical dual-exposure retouching used to render training targets.
//!
//! Under-exposed regions are lifted by dividing by a smoothed bright-channel
//! illumination raised to a gamma; over-exposed regions get the same
//! treatment on the inverted image. The resulting sequences are fused with
//! the original by exposure fusion, then details are amplified.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::{self, FusionParams, SmoothParams};
use crate::image::ImageF;
use crate::ops;

pub const DEFAULT_EPSILON: f32 = 1e-4;

fn default_epsilon() -> f32 {
    DEFAULT_EPSILON
}

/// Coefficients of one retouching pass. Serialized as a flat JSON object:
///
/// ```json
/// {"theta1":[0.01,0.01],"gamma1":[0.4,0.8],"theta2":[0.01,0.01],"gamma2":[0.4,0.8],
///  "w_contrast":1.0,"w_saturation":1.0,"w_exposedness":1.0,"sigma_e":0.2,"levels":0,
///  "theta4":0.02,"alpha":0.3,"epsilon":0.0001}
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetouchCoefficients {
    /// Smoothing strengths of the under-exposure sequence.
    pub theta1: Vec<f32>,
    /// Gamma exponents of the under-exposure sequence.
    pub gamma1: Vec<f32>,
    /// Smoothing strengths of the over-exposure sequence.
    pub theta2: Vec<f32>,
    /// Gamma exponents of the over-exposure sequence.
    pub gamma2: Vec<f32>,
    #[serde(flatten)]
    pub theta3: FusionParams,
    /// Smoothing strength used to extract the detail layer.
    pub theta4: f32,
    /// Detail gain.
    pub alpha: f32,
    #[serde(default = "default_epsilon")]
    pub epsilon: f32,
}

impl Default for RetouchCoefficients {
    fn default() -> Self {
        Self {
            theta1: vec![0.01, 0.01],
            gamma1: vec![0.4, 0.8],
            theta2: vec![0.01, 0.01],
            gamma2: vec![0.4, 0.8],
            theta3: FusionParams::default(),
            theta4: 0.02,
            alpha: 0.3,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl RetouchCoefficients {
    /// Coefficients whose output approximates the input: zero gammas, no
    /// detail gain.
    pub fn identity() -> Self {
        Self {
            gamma1: vec![0.0, 0.0],
            gamma2: vec![0.0, 0.0],
            alpha: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.theta1.is_empty() || self.theta1.len() != self.gamma1.len() {
            return bad(format!(
                "theta1/gamma1 must be non-empty and equally long ({} vs {})",
                self.theta1.len(),
                self.gamma1.len()
            ));
        }
        if self.theta2.is_empty() || self.theta2.len() != self.gamma2.len() {
            return bad(format!(
                "theta2/gamma2 must be non-empty and equally long ({} vs {})",
                self.theta2.len(),
                self.gamma2.len()
            ));
        }
        for g in self.gamma1.iter().chain(&self.gamma2) {
            if !(0.0..=1.0).contains(g) {
                return bad(format!("gamma {g} outside [0,1]"));
            }
        }
        for t in self.theta1.iter().chain(&self.theta2).chain(std::iter::once(&self.theta4)) {
            if !(*t >= 0.0) || !t.is_finite() {
                return bad(format!("smoothing strength {t} must be finite and >= 0"));
            }
        }
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return bad(format!("alpha {} must be finite and >= 0", self.alpha));
        }
        if !(self.epsilon > 0.0) {
            return bad(format!("epsilon {} must be positive", self.epsilon));
        }
        self.theta3.validate()
    }
}

/// `clamp(img / (S(max(img), theta)^gamma + eps))`, broadcast per channel.
pub fn under_branch(img: &ImageF, theta: f32, gamma: f32, eps: f32) -> Result<ImageF> {
    let bright = ops::bright_channel(img)?;
    let illum = filters::l0_smooth(&bright, SmoothParams::new(theta))?;
    let c = img.channels();
    let mut out = img.clone();
    for (px, &l) in out.data_mut().chunks_exact_mut(c).zip(illum.data()) {
        let denom = l.powf(gamma) + eps;
        for v in px {
            *v = (*v / denom).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

/// `1 - under_branch(1 - img)`.
pub fn over_branch(img: &ImageF, theta: f32, gamma: f32, eps: f32) -> Result<ImageF> {
    Ok(ops::invert(&under_branch(&ops::invert(img), theta, gamma, eps)?))
}

/// The fusion stack: original, under-exposure sequence, over-exposure sequence.
pub fn enhancement_sequence(img: &ImageF, c: &RetouchCoefficients) -> Result<Vec<ImageF>> {
    c.validate()?;
    let mut seq = Vec::with_capacity(1 + c.theta1.len() + c.theta2.len());
    seq.push(img.clone());
    for (&t, &g) in c.theta1.iter().zip(&c.gamma1) {
        seq.push(under_branch(img, t, g, c.epsilon)?);
    }
    for (&t, &g) in c.theta2.iter().zip(&c.gamma2) {
        seq.push(over_branch(img, t, g, c.epsilon)?);
    }
    Ok(seq)
}

/// `R + alpha * (R - S(R, theta4))`, clamped.
pub fn amplify_details(fused: &ImageF, theta4: f32, alpha: f32) -> Result<ImageF> {
    if alpha == 0.0 {
        return Ok(fused.clone());
    }
    let base = filters::l0_smooth(fused, SmoothParams::new(theta4))?;
    fused.zip_map(&base, |r, b| (r + alpha * (r - b)).clamp(0.0, 1.0))
}

pub fn retouch(img: &ImageF, c: &RetouchCoefficients) -> Result<ImageF> {
    if img.channels() != 3 {
        return Err(Error::invalid("retouch expects an RGB image"));
    }
    let seq = enhancement_sequence(img, c)?;
    let fused = filters::mertens_fuse(&seq, &c.theta3)?;
    amplify_details(&fused, c.theta4, c.alpha)
}
