use lwe_core::ops::{bright_channel, invert};
use lwe_core::synth::{scene, Exposure};
use lwe_core::ImageF;
use lwe_net::enhance::{interactive_enhance_traced, EPSILON};
use lwe_net::{enhance, fuse_exposures, interactive_enhance, EnhanceModel, EnhanceParams, Error};

fn model() -> EnhanceModel {
    EnhanceModel::new(21).unwrap()
}

fn params(g1: f32, g2: f32, g3: f32) -> EnhanceParams {
    EnhanceParams { gamma1: g1, gamma2: g2, gamma3: g3 }
}

// Every stage rebuilt from the sub-network entry points and written-out
// per-pixel formulas.
#[test]
fn automatic_pipeline_matches_staged_oracle() {
    let m = model();
    let img = scene(4, 32, 24, Exposure::Mixed);
    let (out, trace) = enhance(&img, &m).unwrap();

    let (_, l) = m.illumination_maps(&bright_channel(&img).unwrap()).unwrap();
    let (_, li) = m.illumination_maps(&bright_channel(&invert(&img)).unwrap()).unwrap();
    let under = ImageF::from_fn(32, 24, 3, |y, x, c| (img.get(y, x, c) / (l.get(y, x, 0) + EPSILON)).min(1.0));
    let over = ImageF::from_fn(32, 24, 3, |y, x, c| {
        1.0 - ((1.0 - img.get(y, x, c)) / (li.get(y, x, 0) + EPSILON)).min(1.0)
    });
    assert!(under.max_abs_diff(&trace.under) < 1e-6);
    assert!(over.max_abs_diff(&trace.over) < 1e-6);

    let w = m.fusion_weights(&img, &under, &over).unwrap();
    let fused = ImageF::from_fn(32, 24, 3, |y, x, c| {
        w.get(y, x, 0) * img.get(y, x, c) + w.get(y, x, 1) * under.get(y, x, c) + w.get(y, x, 2) * over.get(y, x, c)
    });
    assert!(fused.max_abs_diff(&trace.fused) < 1e-5);

    let n = m.residual(&fused.map(|v| 2.0 * v - 1.0)).unwrap();
    let expected = ImageF::from_fn(32, 24, 3, |y, x, c| (fused.get(y, x, c) + 0.5 * n.get(y, x, c)).clamp(0.0, 1.0));
    assert!(expected.max_abs_diff(&out) < 1e-5);
    assert_eq!(out.shape(), img.shape());
}

#[test]
fn odd_sizes_come_back_unchanged_in_shape() {
    let m = model();
    for (h, w) in [(17, 9), (5, 6), (1, 1)] {
        let img = scene(h as u64, h, w, Exposure::Under);
        let (out, trace) = enhance(&img, &m).unwrap();
        assert_eq!(out.shape(), (h, w, 3));
        assert_eq!(trace.fusion_weights.shape(), (h, w, 3));
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn zero_exposure_controls_leave_the_image_nearly_alone() {
    let m = model();
    for exposure in [Exposure::Under, Exposure::Over, Exposure::Mixed] {
        let img = scene(9, 40, 32, exposure);
        let out = interactive_enhance(&img, &m, params(0.0, 0.0, 0.0)).unwrap();
        assert!(out.mean_abs_diff(&img) < 0.02, "{exposure:?}: {}", out.mean_abs_diff(&img));
    }
}

#[test]
fn gamma3_zero_is_the_fusion_result() {
    let m = model();
    let img = scene(2, 24, 28, Exposure::Under);
    let (out, trace) = interactive_enhance_traced(&img, &m, params(0.7, 0.3, 0.0)).unwrap();
    assert_eq!(out, trace.fused.clamp01());
    assert!(trace.noise.data().iter().all(|&v| v == 0.0));
}

#[test]
fn full_controls_match_automatic_pipeline() {
    let m = model();
    let img = scene(6, 32, 32, Exposure::Mixed);
    let a = enhance(&img, &m).unwrap().0;
    let b = interactive_enhance(&img, &m, EnhanceParams::default()).unwrap();
    assert!(a.mean_abs_diff(&b) < 1e-3);
}

#[test]
fn partial_gamma3_only_changes_the_residual() {
    let m = model();
    let img = scene(6, 32, 32, Exposure::Mixed);
    let (out, trace) = interactive_enhance_traced(&img, &m, params(1.0, 1.0, 0.5)).unwrap();
    let expected = trace.fused.zip_map(&trace.noise, |a, b| (a + b).clamp(0.0, 1.0)).unwrap();
    assert_eq!(out, expected);
    // low frequencies removed: the residual has (near) zero mean per channel
    for c in 0..3 {
        assert!(trace.noise.channel(c).mean().abs() < 1e-5);
    }
}

#[test]
fn rejects_bad_inputs() {
    let m = model();
    let img = scene(1, 8, 8, Exposure::Under);
    let err = interactive_enhance(&img, &m, params(1.5, 0.0, 0.0)).unwrap_err();
    assert!(err.to_string().contains("[0,1]"), "{err}");
    assert!(interactive_enhance(&img, &m, params(0.5, -0.1, 0.0)).is_err());
    assert!(interactive_enhance(&img, &m, params(0.5, 0.5, f32::NAN)).is_err());
    assert!(matches!(enhance(&ImageF::zeros(8, 8, 1), &m), Err(Error::Config(_))));
    let mut nan = img.clone();
    nan.set(0, 0, 0, f32::NAN);
    assert!(enhance(&nan, &m).is_err());
}

// (mid, next, acc) after sorting by mean, written out for three and two
// images.
#[test]
fn exposure_fusion_fold_matches_manual_reduction() {
    let m = model();
    let dark = scene(3, 20, 16, Exposure::Under);
    let mid = scene(3, 20, 16, Exposure::Mixed);
    let bright = scene(3, 20, 16, Exposure::Over);
    assert!(dark.mean() < mid.mean() && mid.mean() < bright.mean());
    let blend = |mid: &ImageF, next: &ImageF, acc: &ImageF| {
        let w = m.fusion_weights(mid, next, acc).unwrap();
        ImageF::from_fn(20, 16, 3, |y, x, c| {
            (w.get(y, x, 0) * mid.get(y, x, c) + w.get(y, x, 1) * next.get(y, x, c) + w.get(y, x, 2) * acc.get(y, x, c))
                .clamp(0.0, 1.0)
        })
    };

    let three = fuse_exposures(&[bright.clone(), dark.clone(), mid.clone()], &m).unwrap();
    assert!(three.max_abs_diff(&blend(&mid, &bright, &dark)) < 1e-5);

    let two = fuse_exposures(&[bright.clone(), dark.clone()], &m).unwrap();
    let avg = dark.zip_map(&bright, |a, b| 0.5 * (a + b)).unwrap();
    assert!(two.max_abs_diff(&blend(&avg, &bright, &dark)) < 1e-5);

    assert!(fuse_exposures(&[dark.clone()], &m).is_err());
    assert!(fuse_exposures(&[dark, scene(3, 20, 12, Exposure::Over)], &m).is_err());
}

#[test]
fn model_round_trips_through_bytes() {
    let m = model();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.lwe");
    m.save(&path).unwrap();
    let back = EnhanceModel::load(&path).unwrap();
    assert_eq!(back.weights, m.weights);
    let img = scene(5, 16, 16, Exposure::Under);
    assert_eq!(enhance(&img, &back).unwrap().0, enhance(&img, &m).unwrap().0);
    let bytes = std::fs::read(&path).unwrap();
    assert!(EnhanceModel::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
