//! Central finite-difference checks shared by the gradient tests and the
//! acceptance runner.
//!
//! A coordinate whose `+h` and `-h` evaluations land on different sides of
//! a kink (Huber knee, `|x|` at zero, a ReLU switching) is skipped: the
//! central difference is meaningless there. Everything else is compared
//! with the norm-wise relative error `|a - f| / |f|`.

#![allow(dead_code)]

use lwe_core::bilateral::GridSpec;
use lwe_core::ssim::SsimConfig;
use lwe_core::{Image, ImageF};
use lwe_net::losses::{self, FeatureExtractor, IdentityExtractor};
use lwe_net::nn::{self, nets, NetworkGraph, WeightStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOLERANCE: f64 = 1e-3;
pub const MIN_COVERAGE: f64 = 0.95;

#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub rel_err: f64,
}

impl Check {
    pub fn coverage(&self) -> f64 {
        self.checked as f64 / (self.checked + self.skipped).max(1) as f64
    }

    pub fn passes(&self) -> bool {
        self.checked > 0 && self.coverage() >= MIN_COVERAGE && self.rel_err < TOLERANCE
    }
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: rel err {:.2e}, {} checked, {} skipped at kinks",
            self.name, self.rel_err, self.checked, self.skipped
        )
    }
}

struct Tally {
    diff2: f64,
    ref2: f64,
    checked: usize,
    skipped: usize,
}

impl Tally {
    fn new() -> Self {
        Self { diff2: 0.0, ref2: 0.0, checked: 0, skipped: 0 }
    }

    fn push(&mut self, analytic: f64, numeric: Option<f64>) {
        match numeric {
            Some(f) => {
                self.diff2 += (analytic - f).powi(2);
                self.ref2 += f * f;
                self.checked += 1;
            }
            None => self.skipped += 1,
        }
    }

    fn finish(self, name: impl Into<String>) -> Check {
        let rel_err = if self.ref2 > 0.0 {
            (self.diff2 / self.ref2).sqrt()
        } else {
            self.diff2.sqrt()
        };
        Check { name: name.into(), checked: self.checked, skipped: self.skipped, rel_err }
    }
}

pub fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageF {
    ImageF::from_fn(h, w, c, |_, _, _| rng.gen_range(0.05..0.95))
}

fn random_f64(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Image<f64> {
    Image::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0))
}

/// Checks `grad` against central differences of `loss` over every element
/// of `x` (an `f32` image). The step actually taken after rounding is the
/// denominator, so `f32` representation error does not leak in.
fn check_f32(
    name: &str,
    x: &ImageF,
    grad: &ImageF,
    h: f32,
    loss: impl Fn(&ImageF) -> f64,
    kinks: impl Fn(&ImageF) -> Vec<i8>,
) -> Check {
    let mut tally = Tally::new();
    let mut probe = x.clone();
    for i in 0..x.len() {
        let base = x.data()[i];
        let (up, down) = (base + h, base - h);
        probe.data_mut()[i] = up;
        let (fp, kp) = (loss(&probe), kinks(&probe));
        probe.data_mut()[i] = down;
        let (fm, km) = (loss(&probe), kinks(&probe));
        probe.data_mut()[i] = base;
        let numeric = (kp == km).then(|| (fp - fm) / (up as f64 - down as f64));
        tally.push(grad.data()[i] as f64, numeric);
    }
    tally.finish(name)
}

fn signs(v: impl Iterator<Item = f64>) -> Vec<i8> {
    v.map(|d| if d > 0.0 { 1 } else if d < 0.0 { -1 } else { 0 }).collect()
}

fn forward_diffs(img: &ImageF) -> Vec<f64> {
    let (h, w, c) = img.shape();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = img.get(y, x, ch) as f64;
                if x + 1 < w {
                    out.push(img.get(y, x + 1, ch) as f64 - v);
                }
                if y + 1 < h {
                    out.push(img.get(y + 1, x, ch) as f64 - v);
                }
            }
        }
    }
    out
}

/// A smooth extractor for the perceptual term: a fixed 1x1 channel mix
/// followed by `tanh`.
pub struct TanhMixExtractor {
    mix: [[f64; 3]; 4],
}

impl TanhMixExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mix = [[0.0; 3]; 4];
        for row in &mut mix {
            for v in row.iter_mut() {
                *v = rng.gen_range(-2.0..2.0);
            }
        }
        Self { mix }
    }

    fn pre(&self, px: &[f32]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, row) in out.iter_mut().zip(&self.mix) {
            *o = row.iter().zip(px).map(|(m, &p)| m * p as f64).sum();
        }
        out
    }
}

impl FeatureExtractor for TanhMixExtractor {
    fn features(&self, img: &ImageF) -> lwe_net::Result<Image<f64>> {
        Ok(Image::from_fn(img.height(), img.width(), 4, |y, x, k| {
            self.pre(img.pixel(y, x))[k].tanh()
        }))
    }

    fn backward(&self, img: &ImageF, grad: &Image<f64>) -> lwe_net::Result<ImageF> {
        Ok(ImageF::from_fn(img.height(), img.width(), 3, |y, x, c| {
            let pre = self.pre(img.pixel(y, x));
            (0..4)
                .map(|k| grad.get(y, x, k) * (1.0 - pre[k].tanh().powi(2)) * self.mix[k][c])
                .sum::<f64>() as f32
        }))
    }
}

/// Every training loss at 16x12 with seeded random inputs.
pub fn loss_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (16, 12);
    let h_step = 1e-3;
    let pred = random_image(&mut rng, h, w, 3);
    let target = random_image(&mut rng, h, w, 3);
    let mut out = Vec::new();

    let delta = 0.25;
    let (_, g) = losses::huber(&pred, &target, delta).unwrap();
    out.push(check_f32(
        "huber",
        &pred,
        &g,
        h_step,
        |p| losses::huber(p, &target, delta).unwrap().0,
        |p| signs(p.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64).abs() - delta)),
    ));

    let cfg = SsimConfig::default();
    let (_, g) = losses::ssim_loss(&pred, &target, &cfg).unwrap();
    out.push(check_f32(
        "ssim",
        &pred,
        &g,
        h_step,
        |p| losses::ssim_loss(p, &target, &cfg).unwrap().0,
        |_| Vec::new(),
    ));

    let l_fwd = random_image(&mut rng, h, w, 1);
    let l_inv = random_image(&mut rng, h, w, 1);
    let guide = random_image(&mut rng, h, w, 1);
    let lambda = 10.0;
    let (_, gf, gi) = losses::illumination_smoothness(&l_fwd, &l_inv, &guide, lambda).unwrap();
    out.push(check_f32(
        "illumination smoothness (forward map)",
        &l_fwd,
        &gf,
        h_step,
        |l| losses::illumination_smoothness(l, &l_inv, &guide, lambda).unwrap().0,
        |l| signs(forward_diffs(l).into_iter()),
    ));
    out.push(check_f32(
        "illumination smoothness (inverse map)",
        &l_inv,
        &gi,
        h_step,
        |l| losses::illumination_smoothness(&l_fwd, l, &guide, lambda).unwrap().0,
        |l| signs(forward_diffs(l).into_iter()),
    ));

    let (_, g) = losses::tv_global(&pred);
    out.push(check_f32(
        "global tv",
        &pred,
        &g,
        h_step,
        |p| losses::tv_global(p).0,
        |p| signs(forward_diffs(p).into_iter()),
    ));

    let extractors: [(&str, Box<dyn FeatureExtractor>); 2] = [
        ("perceptual (identity features)", Box::new(IdentityExtractor)),
        ("perceptual (tanh test features)", Box::new(TanhMixExtractor::new(seed))),
    ];
    for (name, e) in &extractors {
        let ft = e.features(&target).unwrap();
        let (_, g) = losses::perceptual_loss(e.as_ref(), &pred, &target).unwrap();
        out.push(check_f32(
            name,
            &pred,
            &g,
            h_step,
            |p| losses::perceptual_loss(e.as_ref(), p, &target).unwrap().0,
            |p| {
                let fp = e.features(p).unwrap();
                signs(fp.data().iter().zip(ft.data()).map(|(a, b)| a - b))
            },
        ));
    }
    out
}

/// Sign pattern of every intermediate value; a ReLU switching changes it.
fn activation_pattern(pass: &nn::ForwardPass<f64>) -> Vec<bool> {
    pass.values.iter().flat_map(|v| v.data().iter().map(|&x| x == 0.0)).collect()
}

/// `L = sum_o <out_o, R_o>` for fixed random projections `R_o`.
fn projected(graph: &NetworkGraph, pass: &nn::ForwardPass<f64>, proj: &[(String, Image<f64>)]) -> f64 {
    proj.iter()
        .map(|(name, r)| {
            let o = pass.output(graph, name).unwrap();
            o.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>()
        })
        .sum()
}

/// Weight gradients, and input gradients for the inputs listed in
/// `differentiable_inputs`, of one network in `f64`.
pub fn network_check(
    graph: &NetworkGraph,
    inputs: &[Image<f64>],
    differentiable_inputs: &[usize],
    seed: u64,
) -> Vec<Check> {
    let h_step = 1e-5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let mut weights = WeightStore::<f32>::new();
    weights.init_graph(graph, seed).unwrap();
    let mut weights: WeightStore<f64> = weights.cast();
    // nonzero biases so that no unit starts exactly at a kink by construction
    for t in weights.tensors_mut() {
        if t.name.ends_with(".bias") {
            for v in &mut t.data {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
    }
    let refs: Vec<&Image<f64>> = inputs.iter().collect();
    let pass = nn::forward(graph, &weights, &refs).unwrap();
    let proj: Vec<(String, Image<f64>)> = graph
        .outputs
        .iter()
        .map(|(name, v)| {
            let (h, w, c) = pass.values[*v].shape();
            (name.clone(), Image::from_fn(h, w, c, |_, _, _| rng.gen_range(-1.0..1.0)))
        })
        .collect();
    let seeds: Vec<(&str, &Image<f64>)> = proj.iter().map(|(n, r)| (n.as_str(), r)).collect();
    let grads = nn::backward(graph, &weights, &pass, &seeds).unwrap();

    let eval = |w: &WeightStore<f64>, ins: &[&Image<f64>]| {
        let p = nn::forward(graph, w, ins).unwrap();
        (projected(graph, &p, &proj), activation_pattern(&p))
    };

    let mut out = Vec::new();
    let mut tally = Tally::new();
    let mut probe = weights.clone();
    for (ti, t) in weights.tensors().iter().enumerate() {
        let g = grads.params.get(&t.name).unwrap();
        for i in 0..t.data.len() {
            let base = t.data[i];
            probe.tensors_mut()[ti].data[i] = base + h_step;
            let (fp, kp) = eval(&probe, &refs);
            probe.tensors_mut()[ti].data[i] = base - h_step;
            let (fm, km) = eval(&probe, &refs);
            probe.tensors_mut()[ti].data[i] = base;
            tally.push(g.data[i], (kp == km).then(|| (fp - fm) / (2.0 * h_step)));
        }
    }
    out.push(tally.finish(format!("{} weights", graph.name)));

    for &k in differentiable_inputs {
        let g = grads.inputs[k].clone().expect("input gradient");
        let mut tally = Tally::new();
        let mut probe: Vec<Image<f64>> = inputs.to_vec();
        for i in 0..inputs[k].len() {
            let base = inputs[k].data()[i];
            probe[k].data_mut()[i] = base + h_step;
            let (fp, kp) = eval(&weights, &probe.iter().collect::<Vec<_>>());
            probe[k].data_mut()[i] = base - h_step;
            let (fm, km) = eval(&weights, &probe.iter().collect::<Vec<_>>());
            probe[k].data_mut()[i] = base;
            tally.push(g.data()[i], (kp == km).then(|| (fp - fm) / (2.0 * h_step)));
        }
        out.push(tally.finish(format!("{} input {}", graph.name, graph.value_name(k))));
    }
    out
}

/// All three sub-networks on small random inputs.
///
/// The bright channel feeding the illumination net also guides its
/// bilateral slice, which is piecewise constant in the guide, so only its
/// weights are checked.
pub fn net_checks(seed: u64) -> Vec<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let il = nets::illumination_net(GridSpec::default()).unwrap();
    out.extend(network_check(&il, &[random_f64(&mut rng, 16, 12, 1)], &[], seed));
    let fu = nets::fusion_net().unwrap();
    out.extend(network_check(&fu, &[random_f64(&mut rng, 12, 10, 9)], &[0], seed));
    let re = nets::restoration_net().unwrap();
    let centered = random_f64(&mut rng, 11, 9, 3).map(|v| 2.0 * v - 1.0);
    out.extend(network_check(&re, &[centered], &[0], seed));
    out
}
