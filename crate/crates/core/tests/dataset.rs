use std::collections::BTreeMap;
use std::fs;

use lwe_core::dataset::{
    add_realistic_noise, build_pairs, cluster, histogram, histograms, jpeg_degrade, BuildConfig, DatasetManifest,
    DegradeParams, DegradeRanges, LumaHistogram, MANIFEST_FILE,
};
use lwe_core::metrics::{loe, psnr};
use lwe_core::{io, synth, Error, ImageF, RetouchCoefficients};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sources(n: usize, h: usize, w: usize) -> Vec<(String, ImageF)> {
    synth::scene_set(40, n, h, w)
        .into_iter()
        .enumerate()
        .map(|(i, img)| (format!("src{i:02}.png"), img))
        .collect()
}

fn coeffs_for(k: usize, c: RetouchCoefficients) -> BTreeMap<usize, RetouchCoefficients> {
    (0..k).map(|i| (i, c.clone())).collect()
}

#[test]
fn ten_images_two_clusters() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = sources(10, 24, 32);
    let model = cluster(&histograms(&imgs).unwrap(), 2, 5).unwrap();
    let manifest = build_pairs(
        &imgs,
        &model,
        &coeffs_for(2, RetouchCoefficients::default()),
        &BuildConfig::default(),
        dir.path(),
    )
    .unwrap();
    assert_eq!(manifest.entries.len(), 10);
    manifest.verify(dir.path()).unwrap();
    for (e, (id, _)) in manifest.entries.iter().zip(&imgs) {
        assert_eq!(&e.source, id);
        assert_eq!(e.cluster_id, model.assignments[id]);
        assert!(e.cluster_id < 2);
        assert!((60..=95).contains(&e.degrade.jpeg_quality));
    }
    let on_disk = DatasetManifest::load(dir.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(on_disk, manifest);
}

#[test]
fn near_identity_pipeline_keeps_pairs_close() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = sources(4, 32, 32);
    let model = cluster(&histograms(&imgs).unwrap(), 2, 1).unwrap();
    let cfg = BuildConfig {
        degrade: DegradeRanges::none(3),
        ..BuildConfig::default()
    };
    let manifest = build_pairs(&imgs, &model, &coeffs_for(2, RetouchCoefficients::identity()), &cfg, dir.path()).unwrap();
    for (input, target) in manifest.load_pairs(dir.path()).unwrap() {
        let p = psnr(&input, &target).unwrap();
        assert!(p > 35.0, "pair psnr {p}");
    }
}

#[test]
fn rebuild_is_deterministic() {
    let imgs = sources(6, 40, 40);
    let model = cluster(&histograms(&imgs).unwrap(), 3, 2).unwrap();
    let cfg = BuildConfig {
        variants_per_image: 2,
        crop: Some((24, 24)),
        degrade: DegradeRanges {
            seed: 77,
            ..DegradeRanges::default()
        },
    };
    let coeffs = coeffs_for(3, RetouchCoefficients::default());
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ma = build_pairs(&imgs, &model, &coeffs, &cfg, a.path()).unwrap();
    build_pairs(&imgs, &model, &coeffs, &cfg, b.path()).unwrap();
    assert_eq!(ma.entries.len(), 12);
    assert_eq!(
        fs::read(a.path().join(MANIFEST_FILE)).unwrap(),
        fs::read(b.path().join(MANIFEST_FILE)).unwrap()
    );
    for e in &ma.entries {
        assert_eq!(e.degrade.seed, 77 ^ e.input_path[7..12].parse::<u64>().unwrap());
        for rel in [&e.input_path, &e.target_path] {
            assert_eq!(fs::read(a.path().join(rel)).unwrap(), fs::read(b.path().join(rel)).unwrap());
        }
        let img = io::load_image(a.path().join(&e.target_path)).unwrap();
        assert_eq!(img.shape(), (24, 24, 3));
    }
}

#[test]
fn missing_coefficients_name_the_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = sources(6, 16, 16);
    let model = cluster(&histograms(&imgs).unwrap(), 3, 0).unwrap();
    let mut coeffs = coeffs_for(3, RetouchCoefficients::default());
    let dropped = model.assignments[&imgs[0].0];
    coeffs.remove(&dropped);
    match build_pairs(&imgs, &model, &coeffs, &BuildConfig::default(), dir.path()) {
        Err(Error::Config(msg)) => assert!(msg.contains(&dropped.to_string()), "{msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
    assert!(!dir.path().join(MANIFEST_FILE).exists());
}

#[test]
fn manifest_round_trip_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let imgs = sources(3, 16, 16);
    let model = cluster(&histograms(&imgs).unwrap(), 1, 0).unwrap();
    build_pairs(&imgs, &model, &coeffs_for(1, RetouchCoefficients::default()), &BuildConfig::default(), dir.path())
        .unwrap();
    let path = dir.path().join(MANIFEST_FILE);
    let first = fs::read_to_string(&path).unwrap();
    let again = DatasetManifest::from_json(&first).unwrap().to_json().unwrap();
    assert_eq!(first, again);
}

#[test]
fn separated_groups_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let centers = [20usize, 128, 230];
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for i in 0..20 {
        let g = i % 3;
        let mut bins = vec![0.0; 256];
        for _ in 0..200 {
            let b = (centers[g] as i64 + rng.gen_range(-8..=8)) as usize;
            bins[b] += 1.0;
        }
        let s: f64 = bins.iter().sum();
        items.push((format!("h{i:02}"), LumaHistogram { bins: bins.iter().map(|b| b / s).collect() }));
        labels.push(g);
    }
    let m = cluster(&items, 3, 9).unwrap();
    for i in 0..20 {
        for j in 0..20 {
            let same_truth = labels[i] == labels[j];
            let same_found = m.assignments[&items[i].0] == m.assignments[&items[j].0];
            assert_eq!(same_truth, same_found);
        }
    }
}

#[test]
fn loe_two_by_two_matches_enumeration() {
    let orig = ImageF::from_vec(2, 2, 1, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    let enh = ImageF::from_vec(2, 2, 1, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    let (l, e) = (orig.data(), enh.data());
    let mut flips = 0;
    for x in 0..4 {
        for y in 0..4 {
            if (l[x] > l[y]) != (e[x] > e[y]) {
                flips += 1;
            }
        }
    }
    assert_eq!(flips, 12);
    assert_eq!(loe(&orig, &enh).unwrap(), flips as f64 / 4.0);
}

fn random(h: usize, w: usize, seed: u64) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageF::from_fn(h, w, 3, |_, _, _| rng.gen())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inertia_is_non_increasing(n in 2usize..16, k in 1usize..6, seed in any::<u64>()) {
        let k = k.min(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items: Vec<_> = (0..n)
            .map(|i| {
                let img = ImageF::from_fn(6, 6, 3, |_, _, _| rng.gen::<f32>().powf(rng.gen_range(0.3..3.0)));
                (i.to_string(), histogram(&img).unwrap())
            })
            .collect();
        let m = cluster(&items, k, seed).unwrap();
        for w in m.inertia_trace.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        for (id, h) in &items {
            let c = m.assignments[id];
            prop_assert!(c < k);
            let d = h.distance2(&m.centroids[c].bins);
            prop_assert!(m.centroids.iter().all(|other| d <= h.distance2(&other.bins) + 1e-12));
        }
    }

    #[test]
    fn histograms_sum_to_one(h in 1usize..20, w in 1usize..20, seed in any::<u64>()) {
        let s: f64 = histogram(&random(h, w, seed)).unwrap().bins.iter().sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn degradation_preserves_dimensions(
        h in 1usize..40, w in 1usize..40, sigma_s in 0.0f32..0.05, sigma_c in 0.0f32..0.1,
        q in 1u8..=100, seed in any::<u64>()
    ) {
        let img = random(h, w, seed);
        let p = DegradeParams { sigma_s, sigma_c, jpeg_quality: q, seed };
        let noisy = add_realistic_noise(&img, &p).unwrap();
        prop_assert_eq!(noisy.shape(), img.shape());
        prop_assert!(noisy.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(jpeg_degrade(&noisy, q).unwrap().shape(), img.shape());
    }

    #[test]
    fn loe_ignores_increasing_remaps(h in 1usize..12, w in 1usize..12, gamma in 0.2f32..4.0, seed in any::<u64>()) {
        let orig = random(h, w, seed);
        let enh = random(h, w, seed ^ 3);
        let remapped = enh.map(|v| v.powf(gamma));
        prop_assert_eq!(loe(&orig, &enh).unwrap(), loe(&orig, &remapped).unwrap());
    }
}
