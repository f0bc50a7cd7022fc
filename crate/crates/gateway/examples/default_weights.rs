//! Regenerates `assets/default.lwe`, the weights compiled into the `lwe`
//! binary: synthetic scenes, retouched with the default coefficients,
//! degraded, then both training stages.
//!
//! cargo run --release -p lwe-gateway --example default_weights -- assets/default.lwe

use std::collections::BTreeMap;

use lwe_core::dataset::{build_pairs, cluster, histograms, BuildConfig, DegradeRanges};
use lwe_core::synth::scene_set;
use lwe_core::RetouchCoefficients;
use lwe_net::train::{train_stage1, train_stage2, TrainConfig};
use lwe_net::EnhanceModel;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "assets/default.lwe".into());
    let sources: Vec<_> = scene_set(2024, 24, 128, 128)
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("scene{i:02}"), img))
        .collect();
    let clusters = cluster(&histograms(&sources)?, 4, 7)?;
    let coeffs: BTreeMap<_, _> = (0..4).map(|k| (k, RetouchCoefficients::default())).collect();
    let build = BuildConfig {
        variants_per_image: 4,
        crop: Some((96, 96)),
        degrade: DegradeRanges { seed: 5, ..DegradeRanges::default() },
    };
    let dir = tempfile::tempdir()?;
    let pairs = build_pairs(&sources, &clusters, &coeffs, &build, dir.path())?.load_pairs(dir.path())?;

    let cfg = TrainConfig { iterations: Some(600), ..TrainConfig::default() };
    let (m1, r1) = train_stage1(&pairs, EnhanceModel::new(0)?, &cfg)?;
    println!("stage 1: {:.4} -> {:.4}", r1.initial_loss, r1.final_loss);
    let (m2, r2) = train_stage2(&pairs, m1, &cfg)?;
    println!("stage 2: {:.4} -> {:.4}", r2.initial_loss, r2.final_loss);
    m2.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
