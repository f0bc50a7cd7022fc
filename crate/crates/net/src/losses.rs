//! Training objectives with exact gradients.
//!
//! Every loss takes `f32` images, accumulates in `f64` and returns the
//! scalar together with its gradient with respect to the prediction (and
//! the illumination maps where they enter).

use lwe_core::ssim::{ssim_and_grad, SsimConfig};
use lwe_core::{Image, ImageF};

use crate::error::{Error, Result};
use crate::nn::{self, GraphBuilder, NetworkGraph, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub delta: f64,
    pub omega_i: f64,
    pub lambda_g: f64,
    pub omega_g: f64,
    pub ssim: SsimConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            delta: 0.5,
            omega_i: 0.002,
            lambda_g: 10.0,
            omega_g: 1e-4,
            ssim: SsimConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be > 0, got {}", self.delta)));
        }
        for (name, v) in [("omega_i", self.omega_i), ("lambda_g", self.lambda_g), ("omega_g", self.omega_g)] {
            if !(v >= 0.0) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &ImageF, b: &ImageF, what: &str) -> Result<()> {
    Ok(a.ensure_same_shape(b, what)?)
}

fn to_image(shape: (usize, usize, usize), data: Vec<f64>) -> ImageF {
    let (h, w, c) = shape;
    ImageF::from_vec(h, w, c, data.into_iter().map(|v| v as f32).collect()).expect("shape preserved")
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean Huber penalty; `|e| = delta` falls on the linear branch.
pub fn huber(pred: &ImageF, target: &ImageF, delta: f64) -> Result<(f64, ImageF)> {
    same_shape(pred, target, "huber")?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let e = p as f64 - t as f64;
            if e.abs() < delta {
                total += 0.5 * e * e;
                e / n
            } else {
                total += delta * (e.abs() - 0.5 * delta);
                delta * sign(e) / n
            }
        })
        .collect();
    Ok((total / n, to_image(pred.shape(), grad)))
}

/// `1 - SSIM`, averaged over windows and channels.
pub fn ssim_loss(pred: &ImageF, target: &ImageF, cfg: &SsimConfig) -> Result<(f64, ImageF)> {
    same_shape(pred, target, "ssim")?;
    let (s, g) = ssim_and_grad(pred, target, cfg, true)?;
    let g = g.expect("gradient requested");
    Ok((1.0 - s, to_image(pred.shape(), g.into_iter().map(|v| -v).collect())))
}

/// A differentiable feature map used by the perceptual term.
pub trait FeatureExtractor: Send + Sync {
    fn features(&self, img: &ImageF) -> Result<Image<f64>>;

    /// Vector-Jacobian product: input gradient for a feature gradient.
    fn backward(&self, img: &ImageF, grad: &Image<f64>) -> Result<ImageF>;
}

/// `phi(x) = x`.
#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, img: &ImageF) -> Result<Image<f64>> {
        Ok(img.cast())
    }

    fn backward(&self, _img: &ImageF, grad: &Image<f64>) -> Result<ImageF> {
        Ok(grad.cast())
    }
}

/// Two fixed, randomly initialized 3x3 conv + ReLU layers (3 -> 8 -> 8).
/// A stand-in for a pretrained backbone, with the same interface.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    graph: NetworkGraph,
    weights: WeightStore<f64>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Result<Self> {
        let mut b = GraphBuilder::new("features");
        let x = b.input("rgb", 3);
        let a = b.conv_relu("conv1", x, 3, 8, 1)?;
        let y = b.conv_relu("conv2", a, 3, 8, 1)?;
        b.output("features", y)?;
        let graph = b.build()?;
        let mut weights = WeightStore::new();
        weights.init_graph(&graph, seed)?;
        Ok(Self { graph, weights })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, img: &ImageF) -> Result<Image<f64>> {
        let x = img.cast::<f64>();
        let mut out = nn::infer(&self.graph, &self.weights, &[&x])?;
        Ok(out.remove(0).1)
    }

    fn backward(&self, img: &ImageF, grad: &Image<f64>) -> Result<ImageF> {
        let x = img.cast::<f64>();
        let pass = nn::forward(&self.graph, &self.weights, &[&x])?;
        let g = nn::backward(&self.graph, &self.weights, &pass, &[("features", grad)])?;
        let dx = g.inputs.into_iter().next().flatten().unwrap_or_else(|| Image::zeros(x.height(), x.width(), 3));
        Ok(dx.cast())
    }
}

/// Mean absolute feature difference.
pub fn perceptual_loss(extractor: &dyn FeatureExtractor, pred: &ImageF, target: &ImageF) -> Result<(f64, ImageF)> {
    same_shape(pred, target, "perceptual")?;
    let fp = extractor.features(pred)?;
    let ft = extractor.features(target)?;
    if fp.shape() != ft.shape() {
        return Err(Error::Config("feature extractor returned inconsistent shapes".into()));
    }
    let n = fp.len().max(1) as f64;
    let mut total = 0.0;
    let gf: Vec<f64> = fp
        .data()
        .iter()
        .zip(ft.data())
        .map(|(a, b)| {
            total += (a - b).abs();
            sign(a - b) / n
        })
        .collect();
    let (h, w, c) = fp.shape();
    let gf = Image::from_vec(h, w, c, gf)?;
    Ok((total / n, extractor.backward(pred, &gf)?))
}

// sum over forward differences of |dL| * weight, accumulating d/dL into grad
fn weighted_tv(l: &ImageF, wx: &[f64], wy: &[f64], grad: &mut [f64]) -> f64 {
    let (h, w, _) = l.shape();
    let d = l.data();
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let e = d[i + 1] as f64 - d[i] as f64;
                let k = wx[y * (w - 1) + x];
                total += k * e.abs();
                grad[i + 1] += k * sign(e);
                grad[i] -= k * sign(e);
            }
            if y + 1 < h {
                let e = d[i + w] as f64 - d[i] as f64;
                let k = wy[y * w + x];
                total += k * e.abs();
                grad[i + w] += k * sign(e);
                grad[i] -= k * sign(e);
            }
        }
    }
    total
}

/// Structure-aware smoothness of both illumination maps.
///
/// Each forward difference of `L` is weighted by `exp(-lambda_g |dG|)` of
/// the guide at the same position; `|d(1 - G)| = |dG|`, so the inverted map
/// shares the weights. The sum is divided by the pixel count.
pub fn illumination_smoothness(
    l_fwd: &ImageF,
    l_inv: &ImageF,
    guide: &ImageF,
    lambda_g: f64,
) -> Result<(f64, ImageF, ImageF)> {
    if l_fwd.channels() != 1 || guide.channels() != 1 {
        return Err(Error::Config("illumination smoothness expects single-channel maps".into()));
    }
    same_shape(l_fwd, l_inv, "illumination maps")?;
    same_shape(l_fwd, guide, "illumination guide")?;
    let (h, w, _) = guide.shape();
    let g = guide.data();
    let wx: Vec<f64> = (0..h)
        .flat_map(|y| (0..w.saturating_sub(1)).map(move |x| (y, x)))
        .map(|(y, x)| (-lambda_g * (g[y * w + x + 1] as f64 - g[y * w + x] as f64).abs()).exp())
        .collect();
    let wy: Vec<f64> = (0..h.saturating_sub(1) * w)
        .map(|i| (-lambda_g * (g[i + w] as f64 - g[i] as f64).abs()).exp())
        .collect();
    let n = (h * w) as f64;
    let mut gf = vec![0.0; h * w];
    let mut gi = vec![0.0; h * w];
    let total = weighted_tv(l_fwd, &wx, &wy, &mut gf) + weighted_tv(l_inv, &wx, &wy, &mut gi);
    let scale = |v: Vec<f64>| to_image((h, w, 1), v.into_iter().map(|x| x / n).collect());
    Ok((total / n, scale(gf), scale(gi)))
}

/// Mean absolute forward difference over both axes and all channels.
pub fn tv_global(img: &ImageF) -> (f64, ImageF) {
    let (h, w, c) = img.shape();
    let n = img.len().max(1) as f64;
    let d = img.data();
    let mut grad = vec![0.0; d.len()];
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let i = (y * w + x) * c + ch;
                for (ok, j) in [(x + 1 < w, i + c), (y + 1 < h, i + w * c)] {
                    if ok {
                        let e = d[j] as f64 - d[i] as f64;
                        total += e.abs();
                        grad[j] += sign(e) / n;
                        grad[i] -= sign(e) / n;
                    }
                }
            }
        }
    }
    (total / n, to_image(img.shape(), grad))
}

/// Unweighted term values of a composite loss.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub huber: f64,
    pub ssim: f64,
    pub perceptual: f64,
    /// Illumination smoothness (stage 1) or global TV (stage 2).
    pub regularizer: f64,
    /// Weighted sum.
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct EnhancementLoss {
    pub terms: LossTerms,
    pub grad_pred: ImageF,
    pub grad_l_fwd: ImageF,
    pub grad_l_inv: ImageF,
}

fn fidelity(
    pred: &ImageF,
    target: &ImageF,
    cfg: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(LossTerms, ImageF)> {
    let (h, mut grad) = huber(pred, target, cfg.delta)?;
    let (s, gs) = ssim_loss(pred, target, &cfg.ssim)?;
    grad.add_assign(&gs);
    let mut p = 0.0;
    if let Some(e) = extractor {
        let (v, gp) = perceptual_loss(e, pred, target)?;
        p = v;
        grad.add_assign(&gp);
    }
    Ok((
        LossTerms {
            huber: h,
            ssim: s,
            perceptual: p,
            regularizer: 0.0,
            total: h + s + p,
        },
        grad,
    ))
}

/// Huber + SSIM + perceptual on the fused image, plus `omega_i` times the
/// smoothness of the low-resolution illumination maps against `guide`.
pub fn enhancement_loss(
    pred: &ImageF,
    target: &ImageF,
    l_fwd: &ImageF,
    l_inv: &ImageF,
    guide: &ImageF,
    cfg: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<EnhancementLoss> {
    let (mut terms, grad_pred) = fidelity(pred, target, cfg, extractor)?;
    let (sm, mut gf, mut gi) = illumination_smoothness(l_fwd, l_inv, guide, cfg.lambda_g)?;
    let k = cfg.omega_i as f32;
    gf.map_inplace(|v| v * k);
    gi.map_inplace(|v| v * k);
    terms.regularizer = sm;
    terms.total += cfg.omega_i * sm;
    Ok(EnhancementLoss {
        terms,
        grad_pred,
        grad_l_fwd: gf,
        grad_l_inv: gi,
    })
}

/// Huber + SSIM + perceptual plus `omega_g` times global TV of `pred`.
pub fn restoration_loss(
    pred: &ImageF,
    target: &ImageF,
    cfg: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<(LossTerms, ImageF)> {
    let (mut terms, mut grad) = fidelity(pred, target, cfg, extractor)?;
    let (tv, gt) = tv_global(pred);
    let k = cfg.omega_g as f32;
    grad = grad.zip_map(&gt, |a, b| a + k * b)?;
    terms.regularizer = tv;
    terms.total += cfg.omega_g * tv;
    Ok((terms, grad))
}
