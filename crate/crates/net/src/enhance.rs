//! Inference: dual illumination estimation, three-way fusion, restoration,
//! the interactive variant and exposure-stack fusion.

use std::path::Path;
use std::time::Instant;

use lwe_core::bilateral::GridSpec;
use lwe_core::dct::{dct2, idct2};
use lwe_core::ops::{box_downsample, bright_channel, invert};
use lwe_core::ImageF;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::nets::{fusion_net, illumination_net, restoration_net};
use crate::nn::{self, NetworkGraph, WeightStore};

/// Division guard for the illumination quotients.
pub const EPSILON: f32 = 1e-4;

/// Side lengths the networks need to be divisible by.
pub const ALIGN: usize = 4;

/// The three graphs and one weight store covering all of them.
#[derive(Clone, Debug)]
pub struct EnhanceModel {
    pub illumination: NetworkGraph,
    pub fusion: NetworkGraph,
    pub restoration: NetworkGraph,
    pub weights: WeightStore<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Graphs {
    pub illumination: NetworkGraph,
    pub fusion: NetworkGraph,
    pub restoration: NetworkGraph,
}

pub fn graphs() -> Result<Graphs> {
    Ok(Graphs {
        illumination: illumination_net(GridSpec::default())?,
        fusion: fusion_net()?,
        restoration: restoration_net()?,
    })
}

impl EnhanceModel {
    /// Freshly initialized weights.
    pub fn new(seed: u64) -> Result<Self> {
        let g = graphs()?;
        let mut weights = WeightStore::new();
        for graph in [&g.illumination, &g.fusion, &g.restoration] {
            weights.init_graph(graph, seed)?;
        }
        Self::from_weights(weights)
    }

    pub fn from_weights(weights: WeightStore<f32>) -> Result<Self> {
        let g = graphs()?;
        for graph in [&g.illumination, &g.fusion, &g.restoration] {
            weights.check_graph(graph).map_err(|e| Error::CorruptWeights(e.to_string()))?;
        }
        if !weights.is_finite() {
            return Err(Error::CorruptWeights("non-finite parameter".into()));
        }
        Ok(Self {
            illumination: g.illumination,
            fusion: g.fusion,
            restoration: g.restoration,
            weights,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(WeightStore::load(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_weights(WeightStore::from_bytes(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.weights.save(path)
    }

    /// Low-resolution and full-resolution illumination of a bright channel.
    pub fn illumination_maps(&self, bright: &ImageF) -> Result<(ImageF, ImageF)> {
        let mut out = nn::infer(&self.illumination, &self.weights, &[bright])?;
        let full = out.pop().expect("two outputs").1;
        let low = out.pop().expect("two outputs").1;
        Ok((low, full))
    }

    /// Per-pixel weights for `(I, I_U, I_O)`, in that channel order.
    pub fn fusion_weights(&self, img: &ImageF, under: &ImageF, over: &ImageF) -> Result<ImageF> {
        let stack = ImageF::concat_channels(&[img, under, over])?;
        Ok(nn::infer(&self.fusion, &self.weights, &[&stack])?.remove(0).1)
    }

    /// Restoration residual for an input already scaled to `[-1, 1]`.
    pub fn residual(&self, centered: &ImageF) -> Result<ImageF> {
        Ok(nn::infer(&self.restoration, &self.weights, &[centered])?.remove(0).1)
    }
}

/// Interactive controls, each in `[0, 1]`; `(1, 1, 1)` is the automatic
/// pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnhanceParams {
    pub gamma1: f32,
    pub gamma2: f32,
    pub gamma3: f32,
}

impl Default for EnhanceParams {
    fn default() -> Self {
        Self {
            gamma1: 1.0,
            gamma2: 1.0,
            gamma3: 1.0,
        }
    }
}

impl EnhanceParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma1", self.gamma1), ("gamma2", self.gamma2), ("gamma3", self.gamma3)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} is outside the valid range [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct StageTimings {
    pub illumination_ms: f64,
    pub fusion_ms: f64,
    pub restoration_ms: f64,
    pub total_ms: f64,
}

/// Intermediates of one enhancement, cropped to the input size.
#[derive(Clone, Debug)]
pub struct EnhanceTrace {
    pub l_fwd: ImageF,
    pub l_inv: ImageF,
    pub under: ImageF,
    pub over: ImageF,
    /// Channels `(w_I, w_U, w_O)`.
    pub fusion_weights: ImageF,
    pub fused: ImageF,
    /// Residual added to the fused image, in `[0, 1]` units.
    pub noise: ImageF,
    pub timings: StageTimings,
}

fn check_input(img: &ImageF) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Config(format!("expected an RGB image, got {} channels", img.channels())));
    }
    if img.is_empty() {
        return Err(Error::Config("empty image".into()));
    }
    if !img.is_finite() {
        return Err(Error::Config("image contains non-finite values".into()));
    }
    Ok(())
}

fn pad_to(img: &ImageF, align: usize) -> ImageF {
    let ph = img.height().next_multiple_of(align) - img.height();
    let pw = img.width().next_multiple_of(align) - img.width();
    if ph == 0 && pw == 0 {
        img.clone()
    } else {
        img.pad_reflect(ph, pw)
    }
}

fn crop(img: ImageF, h: usize, w: usize) -> ImageF {
    if img.height() == h && img.width() == w {
        img
    } else {
        img.crop(0, 0, h, w).expect("crop inside padded image")
    }
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// `X / (L^g + eps)` clamped, per channel.
pub fn brighten(img: &ImageF, l: &ImageF, gamma: f32) -> ImageF {
    let mut out = img.clone();
    for (px, &lv) in out.data_mut().chunks_exact_mut(3).zip(l.data()) {
        let d = lv.powf(gamma) + EPSILON;
        px.iter_mut().for_each(|v| *v = (*v / d).clamp(0.0, 1.0));
    }
    out
}

/// `1 - (1 - X) / (L^g + eps)` clamped, per channel.
pub fn darken(img: &ImageF, l_inv: &ImageF, gamma: f32) -> ImageF {
    invert(&brighten(&invert(img), l_inv, gamma))
}

/// `sum_k W_k X_k` over `(I, I_U, I_O)`.
pub fn blend(weights: &ImageF, img: &ImageF, under: &ImageF, over: &ImageF) -> ImageF {
    ImageF::from_fn(img.height(), img.width(), 3, |y, x, c| {
        let w = weights.pixel(y, x);
        w[0] * img.get(y, x, c) + w[1] * under.get(y, x, c) + w[2] * over.get(y, x, c)
    })
}

/// Zeroes DCT coefficients whose normalized index `(u/H + v/W)/2` is below
/// `1 - gamma3`.
pub fn highpass_keep(coeffs: &ImageF, gamma3: f32) -> ImageF {
    let (h, w, _) = coeffs.shape();
    let cut = 1.0 - gamma3 as f64;
    let mut out = coeffs.clone();
    for u in 0..h {
        for v in 0..w {
            let r = (u as f64 / h as f64 + v as f64 / w as f64) / 2.0;
            if r < cut {
                for c in 0..out.channels() {
                    out.set(u, v, c, 0.0);
                }
            }
        }
    }
    out
}

fn filter_noise(noise: &ImageF, gamma3: f32) -> Result<ImageF> {
    if gamma3 >= 1.0 {
        return Ok(noise.clone());
    }
    let planes = (0..noise.channels())
        .map(|c| idct2(&highpass_keep(&dct2(&noise.channel(c))?, gamma3)))
        .collect::<lwe_core::Result<Vec<_>>>()?;
    Ok(ImageF::from_channels(&planes)?)
}

// None runs the automatic pipeline, Some the controllable one
fn run(img: &ImageF, model: &EnhanceModel, params: Option<EnhanceParams>) -> Result<(ImageF, EnhanceTrace)> {
    check_input(img)?;
    if let Some(p) = params {
        p.validate()?;
    }
    let total = Instant::now();
    let (h, w, _) = img.shape();
    let x = pad_to(img, ALIGN);
    let (g1, g2) = params.map_or((1.0, 1.0), |p| (p.gamma1, p.gamma2));

    let t = Instant::now();
    let (_, l_fwd) = model.illumination_maps(&bright_channel(&x)?)?;
    let (_, l_inv) = model.illumination_maps(&bright_channel(&invert(&x))?)?;
    let under = brighten(&x, &l_fwd, g1);
    let over = darken(&x, &l_inv, g2);
    let illumination_ms = ms(t);

    let t = Instant::now();
    let weights = model.fusion_weights(&x, &under, &over)?;
    let fused = blend(&weights, &x, &under, &over);
    let fusion_ms = ms(t);

    let t = Instant::now();
    let gamma3 = params.map_or(1.0, |p| p.gamma3);
    let noise = if gamma3 > 0.0 {
        let raw = model.residual(&fused.map(|v| 2.0 * v - 1.0))?.map(|v| 0.5 * v);
        match params {
            Some(_) => filter_noise(&raw, gamma3)?,
            None => raw,
        }
    } else {
        ImageF::zeros(x.height(), x.width(), 3)
    };
    let out = fused.zip_map(&noise, |a, b| (a + b).clamp(0.0, 1.0))?;
    let restoration_ms = ms(t);

    let trace = EnhanceTrace {
        l_fwd: crop(l_fwd, h, w),
        l_inv: crop(l_inv, h, w),
        under: crop(under, h, w),
        over: crop(over, h, w),
        fusion_weights: crop(weights, h, w),
        fused: crop(fused, h, w),
        noise: crop(noise, h, w),
        timings: StageTimings {
            illumination_ms,
            fusion_ms,
            restoration_ms,
            total_ms: ms(total),
        },
    };
    Ok((crop(out, h, w), trace))
}

/// Fully automatic enhancement of an RGB image in `[0, 1]`.
pub fn enhance(img: &ImageF, model: &EnhanceModel) -> Result<(ImageF, EnhanceTrace)> {
    run(img, model, None)
}

/// Enhancement with user exponents on both illumination maps and a
/// frequency gate on the restoration residual.
pub fn interactive_enhance(img: &ImageF, model: &EnhanceModel, params: EnhanceParams) -> Result<ImageF> {
    run(img, model, Some(params)).map(|(out, _)| out)
}

/// Same as [`interactive_enhance`] but also returns the intermediates.
pub fn interactive_enhance_traced(
    img: &ImageF,
    model: &EnhanceModel,
    params: EnhanceParams,
) -> Result<(ImageF, EnhanceTrace)> {
    run(img, model, Some(params))
}

/// Fuses an aligned exposure stack with the fusion network.
///
/// Images are ordered by mean intensity. Starting from the darkest as the
/// accumulator, each step fuses `(I = mid, I_U = next, I_O = accumulator)`,
/// where `mid` is the next image in line and `next` the one after it; when
/// only one image remains, `mid` is the average of the accumulator and it.
pub fn fuse_exposures(stack: &[ImageF], model: &EnhanceModel) -> Result<ImageF> {
    if stack.len() < 2 {
        return Err(Error::Config("exposure fusion needs at least two images".into()));
    }
    for img in stack {
        check_input(img)?;
        img.ensure_same_shape(&stack[0], "exposure stack")?;
    }
    let (h, w, _) = stack[0].shape();
    let mut order: Vec<usize> = (0..stack.len()).collect();
    order.sort_by(|&a, &b| stack[a].mean().total_cmp(&stack[b].mean()));
    let padded: Vec<ImageF> = order.iter().map(|&i| pad_to(&stack[i], ALIGN)).collect();
    let mut acc = padded[0].clone();
    let mut rest = &padded[1..];
    while !rest.is_empty() {
        let (mid, next) = if rest.len() >= 2 {
            let pair = (rest[0].clone(), &rest[1]);
            rest = &rest[2..];
            pair
        } else {
            let avg = acc.zip_map(&rest[0], |a, b| 0.5 * (a + b))?;
            let pair = (avg, &rest[0]);
            rest = &rest[1..];
            pair
        };
        let weights = model.fusion_weights(&mid, next, &acc)?;
        acc = blend(&weights, &mid, next, &acc).clamp01();
    }
    Ok(crop(acc, h, w))
}

/// Box-downsampled bright channel at the illumination network's output
/// resolution; the guide for the smoothness term.
pub fn smoothness_guide(bright: &ImageF) -> ImageF {
    box_downsample(bright, ALIGN)
}
