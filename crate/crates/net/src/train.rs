//! Two-stage training: illumination + fusion networks end to end, then the
//! restoration network on top of the frozen first stage.
//!
//! Per-sample gradients are computed in parallel and reduced in sample order
//! in `f64`, so results do not depend on the thread count.

use std::time::Instant;

use lwe_core::ops::{bright_channel, invert};
use lwe_core::{ImageF, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::enhance::{blend, brighten, darken, smoothness_guide, EnhanceModel, ALIGN, EPSILON};
use crate::error::{Error, Result};
use crate::losses::{enhancement_loss, restoration_loss, FeatureExtractor, LossConfig, LossTerms, RandomConvExtractor};
use crate::nn::nets::{FUSION, ILLUMINATION, RESTORATION};
use crate::nn::{self, WeightStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            alpha: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update with learning rate `lr`.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[f64], state: &mut AdamState, lr: f64, cfg: &AdamConfig) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let step = lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
        *p = T::of_f64(p.as_f64() - step);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub patch: usize,
    /// Passes over the data; ignored when `iterations` is set.
    pub epochs: usize,
    /// Hard cap on optimizer steps.
    pub iterations: Option<usize>,
    pub decay: f64,
    pub plateau_factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Random crops, flips and quarter turns.
    pub augment: bool,
    /// Adds the perceptual term with a fixed random conv extractor.
    pub perceptual: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            batch_size: 8,
            patch: 64,
            epochs: 10,
            iterations: None,
            decay: 0.98,
            plateau_factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
            augment: true,
            perceptual: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if !(a.alpha > 0.0 && a.eps > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be > 0".into()));
        }
        if self.patch < 12 || self.patch % ALIGN != 0 {
            return Err(Error::Config(format!(
                "patch must be a multiple of {ALIGN} and at least 12, got {}",
                self.patch
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0 && self.plateau_factor > 0.0 && self.plateau_factor <= 1.0) {
            return Err(Error::Config("decay and plateau_factor must be in (0, 1]".into()));
        }
        if !(self.min_lr > 0.0) {
            return Err(Error::Config("min_lr must be > 0".into()));
        }
        Ok(())
    }
}

/// `alpha * decay^epoch * factor^plateaus`, floored at `min_lr`.
pub fn schedule_lr(epoch: usize, plateaus: usize, cfg: &TrainConfig) -> f64 {
    let lr = cfg.adam.alpha * cfg.decay.powi(epoch as i32) * cfg.plateau_factor.powi(plateaus as i32);
    lr.max(cfg.min_lr)
}

/// Fires when the best loss has not improved by at least `min_rel` for
/// `patience` consecutive observations.
#[derive(Clone, Debug)]
pub struct PlateauDetector {
    pub patience: usize,
    pub min_rel: f64,
    best: f64,
    stale: usize,
    pub fired: usize,
}

impl PlateauDetector {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_rel: 1e-3,
            best: f64::INFINITY,
            stale: 0,
            fired: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - self.min_rel) {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.best = self.best.min(loss);
        self.stale += 1;
        if self.patience > 0 && self.stale >= self.patience {
            self.stale = 0;
            self.fired += 1;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss.
    pub mean_loss: f64,
    /// Objective on the fixed evaluation crops at the end of the epoch.
    pub eval_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: u8,
    pub iterations: usize,
    /// Objective on fixed center crops of every pair, before and after.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub iteration_losses: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    pub weights_path: Option<String>,
}

/// The same random geometric transform for input and target.
pub fn augment_pair(input: &ImageF, target: &ImageF, patch: usize, rng: &mut ChaCha8Rng) -> Result<(ImageF, ImageF)> {
    let (ph, pw) = patch_dims(input, patch)?;
    let y0 = rng.gen_range(0..=input.height() - ph);
    let x0 = rng.gen_range(0..=input.width() - pw);
    let flip_h: bool = rng.gen();
    let flip_v: bool = rng.gen();
    let turns = rng.gen_range(0..4);
    let apply = |img: &ImageF| -> Result<ImageF> {
        let mut out = img.crop(y0, x0, ph, pw)?;
        if flip_h {
            out = out.flip_horizontal();
        }
        if flip_v {
            out = out.flip_vertical();
        }
        for _ in 0..turns {
            out = out.rotate90();
        }
        Ok(out)
    };
    Ok((apply(input)?, apply(target)?))
}

fn patch_dims(img: &ImageF, patch: usize) -> Result<(usize, usize)> {
    let ph = patch.min(img.height()) / ALIGN * ALIGN;
    let pw = patch.min(img.width()) / ALIGN * ALIGN;
    if ph < 12 || pw < 12 {
        return Err(Error::Config(format!(
            "training image {}x{} is too small for a {ALIGN}-aligned patch of at least 12 px",
            img.height(),
            img.width()
        )));
    }
    Ok((ph, pw))
}

fn center_crop(input: &ImageF, target: &ImageF, patch: usize) -> Result<(ImageF, ImageF)> {
    let (ph, pw) = patch_dims(input, patch)?;
    let y0 = (input.height() - ph) / 2;
    let x0 = (input.width() - pw) / 2;
    Ok((input.crop(y0, x0, ph, pw)?, target.crop(y0, x0, ph, pw)?))
}

fn check_pairs(pairs: &[(ImageF, ImageF)]) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Config("no training pairs".into()));
    }
    for (i, (a, b)) in pairs.iter().enumerate() {
        if a.shape() != b.shape() || a.channels() != 3 {
            return Err(Error::Config(format!("pair {i}: input {:?} and target {:?}", a.shape(), b.shape())));
        }
    }
    Ok(())
}

/// Loss and full-store gradient for one sample.
pub struct SampleGrad {
    pub terms: LossTerms,
    pub grads: WeightStore<f32>,
}

/// Stage-1 objective on one `(input, target)` patch, with gradients for the
/// illumination and fusion parameters.
pub fn stage1_sample(
    model: &EnhanceModel,
    input: &ImageF,
    target: &ImageF,
    loss: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<SampleGrad> {
    let (w, il, fu) = (&model.weights, &model.illumination, &model.fusion);
    let bright = bright_channel(input)?;
    let pass_f = nn::forward(il, w, &[&bright])?;
    let inv = invert(input);
    let pass_i = nn::forward(il, w, &[&bright_channel(&inv)?])?;
    let l = pass_f.output(il, "illum")?;
    let li = pass_i.output(il, "illum")?;
    let under = brighten(input, l, 1.0);
    let over = darken(input, li, 1.0);
    let stack = ImageF::concat_channels(&[input, &under, &over])?;
    let pass_w = nn::forward(fu, w, &[&stack])?;
    let weights = pass_w.output(fu, "weights")?;
    let fused = blend(weights, input, &under, &over);

    let e = enhancement_loss(
        &fused,
        target,
        pass_f.output(il, "illum_low")?,
        pass_i.output(il, "illum_low")?,
        &smoothness_guide(&bright),
        loss,
        extractor,
    )?;

    // through the convex combination
    let g = &e.grad_pred;
    let (h, wd, _) = input.shape();
    let mut d_w = ImageF::zeros(h, wd, 3);
    let mut d_under = ImageF::zeros(h, wd, 3);
    let mut d_over = ImageF::zeros(h, wd, 3);
    for y in 0..h {
        for x in 0..wd {
            let wp = weights.pixel(y, x);
            let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
            for ch in 0..3 {
                let gv = g.get(y, x, ch);
                a += gv * input.get(y, x, ch);
                b += gv * under.get(y, x, ch);
                c += gv * over.get(y, x, ch);
                d_under.set(y, x, ch, gv * wp[1]);
                d_over.set(y, x, ch, gv * wp[2]);
            }
            d_w.set(y, x, 0, a);
            d_w.set(y, x, 1, b);
            d_w.set(y, x, 2, c);
        }
    }
    let gw = nn::backward(fu, w, &pass_w, &[("weights", &d_w)])?;
    let mut grads = gw.params;
    if let Some(ds) = &gw.inputs[0] {
        d_under.add_assign(&ds.slice_channels(3, 3));
        d_over.add_assign(&ds.slice_channels(6, 3));
    }

    // through the quotients; clamped samples pass no gradient
    let mut d_l = ImageF::zeros(h, wd, 1);
    let mut d_li = ImageF::zeros(h, wd, 1);
    for y in 0..h {
        for x in 0..wd {
            let dl = l.get(y, x, 0) + EPSILON;
            let dli = li.get(y, x, 0) + EPSILON;
            let (mut a, mut b) = (0.0f32, 0.0f32);
            for ch in 0..3 {
                let xv = input.get(y, x, ch);
                if xv / dl < 1.0 {
                    a -= d_under.get(y, x, ch) * xv / (dl * dl);
                }
                let q = (1.0 - xv) / dli;
                if q < 1.0 {
                    b += d_over.get(y, x, ch) * (1.0 - xv) / (dli * dli);
                }
            }
            d_l.set(y, x, 0, a);
            d_li.set(y, x, 0, b);
        }
    }
    for (pass, d_full, d_low) in [(&pass_f, &d_l, &e.grad_l_fwd), (&pass_i, &d_li, &e.grad_l_inv)] {
        let gi = nn::backward(il, w, pass, &[("illum", d_full), ("illum_low", d_low)])?;
        grads.add_assign(&gi.params);
    }
    Ok(SampleGrad { terms: e.terms, grads })
}

/// Output of the frozen first stage on one image.
pub fn stage1_output(model: &EnhanceModel, input: &ImageF) -> Result<ImageF> {
    let (_, l) = model.illumination_maps(&bright_channel(input)?)?;
    let (_, li) = model.illumination_maps(&bright_channel(&invert(input))?)?;
    let under = brighten(input, &l, 1.0);
    let over = darken(input, &li, 1.0);
    let w = model.fusion_weights(input, &under, &over)?;
    Ok(blend(&w, input, &under, &over))
}

/// Stage-2 objective: `R = R1 + N/2` with `N` the restoration output on
/// `2 R1 - 1`, compared with the target in `[0, 1]` units.
pub fn stage2_sample(
    model: &EnhanceModel,
    fused: &ImageF,
    target: &ImageF,
    loss: &LossConfig,
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<SampleGrad> {
    let re = &model.restoration;
    let z = fused.map(|v| 2.0 * v - 1.0);
    let pass = nn::forward(re, &model.weights, &[&z])?;
    let n = pass.output(re, "residual")?;
    let pred = fused.zip_map(n, |a, b| a + 0.5 * b)?;
    let (terms, g) = restoration_loss(&pred, target, loss, extractor)?;
    let g = g.map(|v| 0.5 * v);
    let grads = nn::backward(re, &model.weights, &pass, &[("residual", &g)])?.params;
    Ok(SampleGrad { terms, grads })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stage {
    One,
    Two,
}

impl Stage {
    fn prefixes(self) -> &'static [&'static str] {
        match self {
            Stage::One => &[ILLUMINATION, FUSION],
            Stage::Two => &[RESTORATION],
        }
    }

    fn number(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

fn trainable(store: &WeightStore<f32>, stage: Stage) -> Vec<usize> {
    store
        .tensors()
        .iter()
        .enumerate()
        .filter(|(_, t)| stage.prefixes().iter().any(|p| t.name.split('.').next() == Some(p)))
        .map(|(i, _)| i)
        .collect()
}

struct Trainer<'a> {
    stage: Stage,
    cfg: &'a TrainConfig,
    loss: LossConfig,
    extractor: Option<RandomConvExtractor>,
    // stage-1 inputs, or the frozen stage-1 output for stage 2
    inputs: Vec<ImageF>,
    targets: Vec<&'a ImageF>,
}

impl Trainer<'_> {
    fn sample(&self, model: &EnhanceModel, input: &ImageF, target: &ImageF) -> Result<SampleGrad> {
        let ex = self.extractor.as_ref().map(|e| e as &dyn FeatureExtractor);
        match self.stage {
            Stage::One => stage1_sample(model, input, target, &self.loss, ex),
            Stage::Two => stage2_sample(model, input, target, &self.loss, ex),
        }
    }

    fn evaluate(&self, model: &EnhanceModel) -> Result<f64> {
        let losses = (0..self.inputs.len())
            .into_par_iter()
            .map(|i| {
                let (x, t) = center_crop(&self.inputs[i], self.targets[i], self.cfg.patch)?;
                Ok(self.sample(model, &x, &t)?.terms.total)
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    fn run(&self, mut model: EnhanceModel) -> Result<(EnhanceModel, TrainReport)> {
        let cfg = self.cfg;
        let n = self.inputs.len();
        let per_epoch = n.div_ceil(cfg.batch_size).max(1);
        let total = cfg.iterations.unwrap_or(cfg.epochs * per_epoch);
        let params = trainable(&model.weights, self.stage);
        let n_params: usize = params.iter().map(|&i| model.weights.tensors()[i].data.len()).sum();
        let mut adam = AdamState::new(n_params);
        let mut plateau = PlateauDetector::new(cfg.patience);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let initial_loss = self.evaluate(&model)?;

        let mut iteration_losses = Vec::with_capacity(total);
        let mut epochs = Vec::new();
        let mut epoch_start = Instant::now();
        let mut epoch_sum = 0.0;
        let mut epoch_count = 0;
        for it in 0..total {
            let epoch = it / per_epoch;
            let lr = schedule_lr(epoch, plateau.fired, cfg);
            let batch: Vec<(usize, u64)> = (0..cfg.batch_size).map(|_| (rng.gen_range(0..n), rng.gen())).collect();
            let results = batch
                .par_iter()
                .map(|&(i, s)| {
                    let (x, t) = if cfg.augment {
                        augment_pair(&self.inputs[i], self.targets[i], cfg.patch, &mut ChaCha8Rng::seed_from_u64(s))?
                    } else {
                        center_crop(&self.inputs[i], self.targets[i], cfg.patch)?
                    };
                    self.sample(&model, &x, &t)
                })
                .collect::<Result<Vec<SampleGrad>>>()?;

            let mut g = vec![0.0f64; n_params];
            let mut loss = 0.0;
            for r in &results {
                loss += r.terms.total;
                let mut off = 0;
                for &ti in &params {
                    for (acc, v) in g[off..].iter_mut().zip(&r.grads.tensors()[ti].data) {
                        *acc += *v as f64;
                    }
                    off += r.grads.tensors()[ti].data.len();
                }
            }
            let b = results.len() as f64;
            loss /= b;
            g.iter_mut().for_each(|v| *v /= b);
            if !loss.is_finite() || g.iter().any(|v| !v.is_finite()) {
                let t = results.iter().find(|r| !r.terms.total.is_finite()).map(|r| r.terms);
                return Err(Error::NonFinite(format!(
                    "stage {} iteration {it}: batch loss {loss}, first non-finite sample terms {t:?}",
                    self.stage.number()
                )));
            }

            let mut flat: Vec<f32> = params
                .iter()
                .flat_map(|&ti| model.weights.tensors()[ti].data.iter().copied())
                .collect();
            adam_step(&mut flat, &g, &mut adam, lr, &cfg.adam);
            if flat.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "stage {} iteration {it}: update produced non-finite weights",
                    self.stage.number()
                )));
            }
            let mut off = 0;
            for &ti in &params {
                let t = &mut model.weights.tensors_mut()[ti];
                let len = t.data.len();
                t.data.copy_from_slice(&flat[off..off + len]);
                off += len;
            }

            iteration_losses.push(loss);
            epoch_sum += loss;
            epoch_count += 1;
            if (it + 1) % per_epoch == 0 || it + 1 == total {
                let mean_loss = epoch_sum / epoch_count as f64;
                // minibatch means over random crops are too noisy to detect a
                // plateau; the fixed-crop objective is not
                let eval_loss = self.evaluate(&model)?;
                epochs.push(EpochStats {
                    epoch,
                    mean_loss,
                    eval_loss,
                    lr,
                    wall_ms: epoch_start.elapsed().as_secs_f64() * 1e3,
                });
                plateau.observe(eval_loss);
                epoch_sum = 0.0;
                epoch_count = 0;
                epoch_start = Instant::now();
            }
        }
        let final_loss = match epochs.last() {
            Some(e) => e.eval_loss,
            None => initial_loss,
        };
        Ok((
            model,
            TrainReport {
                stage: self.stage.number(),
                iterations: total,
                initial_loss,
                final_loss,
                iteration_losses,
                epochs,
                weights_path: None,
            },
        ))
    }
}

fn trainer<'a>(stage: Stage, pairs: &'a [(ImageF, ImageF)], inputs: Vec<ImageF>, cfg: &'a TrainConfig) -> Result<Trainer<'a>> {
    Ok(Trainer {
        stage,
        cfg,
        loss: LossConfig::default(),
        extractor: if cfg.perceptual { Some(RandomConvExtractor::new(cfg.seed)?) } else { None },
        inputs,
        targets: pairs.iter().map(|(_, t)| t).collect(),
    })
}

/// Trains the illumination and fusion networks of `model` jointly.
pub fn train_stage1(
    pairs: &[(ImageF, ImageF)],
    model: EnhanceModel,
    cfg: &TrainConfig,
) -> Result<(EnhanceModel, TrainReport)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let inputs = pairs.iter().map(|(x, _)| x.clone()).collect();
    trainer(Stage::One, pairs, inputs, cfg)?.run(model)
}

/// Trains only the restoration network; the first stage stays frozen and
/// its outputs are recomputed from the inputs once.
pub fn train_stage2(
    pairs: &[(ImageF, ImageF)],
    model: EnhanceModel,
    cfg: &TrainConfig,
) -> Result<(EnhanceModel, TrainReport)> {
    cfg.validate()?;
    check_pairs(pairs)?;
    let inputs = pairs
        .par_iter()
        .map(|(x, _)| {
            // align so the networks see the same geometry as at inference
            let (h, w) = (x.height() / ALIGN * ALIGN, x.width() / ALIGN * ALIGN);
            stage1_output(&model, &x.crop(0, 0, h, w)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<(ImageF, ImageF)> = pairs
        .iter()
        .zip(&inputs)
        .map(|((_, t), r)| Ok((r.clone(), t.crop(0, 0, r.height(), r.width())?)))
        .collect::<Result<_>>()?;
    // targets must outlive the trainer, so build it over the cropped copies
    let t = trainer(Stage::Two, &targets, inputs, cfg)?;
    t.run(model)
}

/// Helper for tests and tools: the same patch crop the evaluator uses.
pub fn eval_crop(input: &ImageF, target: &ImageF, patch: usize) -> Result<(ImageF, ImageF)> {
    center_crop(input, target, patch)
}
