use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use lwe_core::dataset::{cluster, histograms, DatasetManifest};
use lwe_core::retouch::retouch;
use lwe_core::synth::{scene, Exposure};
use lwe_core::{io, ImageF, RetouchCoefficients};
use lwe_gateway::jobs::{JobKind, JobRecord, JobState};
use lwe_gateway::server::{router, AppState, ClusterInfo, DEFAULT_MAX_PIXELS};
use lwe_net::{interactive_enhance, EnhanceModel, EnhanceParams};
use serde_json::Value;
use tower::ServiceExt;

fn model() -> EnhanceModel {
    EnhanceModel::new(1).unwrap()
}

/// Six source images under `images/` and a two-cluster model.
fn workdir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let exposures = [Exposure::Under, Exposure::Over, Exposure::Mixed];
    let named: Vec<(String, ImageF)> = (0..6)
        .map(|k| (format!("img{k}.png"), scene(k, 40, 48, exposures[k as usize % 3])))
        .collect();
    for (name, img) in &named {
        io::save_png(img, images.join(name)).unwrap();
    }
    // cluster what the service will read back: the quantized PNGs
    let decoded: Vec<(String, ImageF)> = named
        .iter()
        .map(|(n, _)| (n.clone(), io::load_image(images.join(n)).unwrap()))
        .collect();
    let clusters = cluster(&histograms(&decoded).unwrap(), 2, 3).unwrap();
    std::fs::write(dir.path().join("clusters.json"), serde_json::to_vec(&clusters).unwrap()).unwrap();
    dir
}

fn app(dir: &Path, max_pixels: usize) -> Router {
    router(Arc::new(AppState::new(dir, model(), max_pixels).unwrap()))
}

async fn send(app: &Router, method: Method, uri: &str, content_type: Option<&str>, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if let Some(ct) = content_type {
        req = req.header(header::CONTENT_TYPE, ct);
    }
    let resp = app.clone().oneshot(req.body(Body::from(body)).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Method::GET, uri, None, Vec::new()).await
}

fn json(body: &[u8]) -> Value {
    serde_json::from_slice(body).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(body)))
}

fn test_png() -> (ImageF, Vec<u8>) {
    let png = io::encode_png(&scene(8, 36, 44, Exposure::Mixed)).unwrap();
    (io::decode_image(&png).unwrap(), png)
}

#[tokio::test]
async fn health_reports_ok_and_version() {
    let dir = tempfile::tempdir().unwrap();
    let (status, body) = get(&app(dir.path(), DEFAULT_MAX_PIXELS), "/api/health").await;
    assert_eq!(status, StatusCode::OK);
    let v = json(&body);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
}

#[tokio::test]
async fn zero_gammas_pass_the_image_through() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let (input, png) = test_png();
    let (status, body) = send(&app, Method::POST, "/api/enhance?g1=0&g2=0&g3=0", Some("image/png"), png).await;
    assert_eq!(status, StatusCode::OK);
    let out = io::decode_image(&body).unwrap();
    assert_eq!(out.shape(), input.shape());
    assert!(out.mean_abs_diff(&input) < 0.02, "{}", out.mean_abs_diff(&input));
}

#[tokio::test]
async fn enhance_matches_the_library_call_for_raw_and_multipart_bodies() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let (input, png) = test_png();
    let params = EnhanceParams { gamma1: 0.5, gamma2: 1.0, gamma3: 0.25 };
    let expected = io::encode_png(&interactive_enhance(&input, &model(), params).unwrap()).unwrap();

    let (status, raw) = send(&app, Method::POST, "/api/enhance?g1=0.5&g3=0.25", Some("image/png"), png.clone()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(raw, expected);

    let boundary = "XyZboundary";
    let mut form = format!(
        "--{boundary}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"a.png\"\r\nContent-Type: image/png\r\n\r\n"
    )
    .into_bytes();
    form.extend_from_slice(&png);
    form.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
    let ct = format!("multipart/form-data; boundary={boundary}");
    let (status, multi) = send(&app, Method::POST, "/api/enhance?g1=0.5&g3=0.25", Some(&ct), form).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(multi, expected);

    // default gammas: the full pipeline, and the same bytes every time
    let (_, a) = send(&app, Method::POST, "/api/enhance", None, png.clone()).await;
    let (_, b) = send(&app, Method::POST, "/api/enhance", None, png).await;
    assert_eq!(a, b);
    let full = interactive_enhance(&input, &model(), EnhanceParams::default()).unwrap();
    assert_eq!(a, io::encode_png(&full).unwrap());
}

#[tokio::test]
async fn enhance_rejects_bad_requests() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let (_, png) = test_png();
    let (status, body) = send(&app, Method::POST, "/api/enhance?g1=1.5", None, png.clone()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(json(&body)["error"].as_str().unwrap().contains("[0,1]"));
    for uri in ["/api/enhance?g2=abc", "/api/enhance?g3=-0.1", "/api/enhance?gain=1"] {
        assert_eq!(send(&app, Method::POST, uri, None, png.clone()).await.0, StatusCode::BAD_REQUEST, "{uri}");
    }
    assert_eq!(send(&app, Method::POST, "/api/enhance", None, b"not an image".to_vec()).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(send(&app, Method::POST, "/api/enhance", None, Vec::new()).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_images_get_413() {
    let dir = tempfile::tempdir().unwrap();
    let (_, png) = test_png();
    let small = app(dir.path(), 36 * 44 - 1);
    let (status, body) = send(&small, Method::POST, "/api/enhance", None, png.clone()).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(json(&body)["error"].as_str().unwrap().contains(&(36 * 44 - 1).to_string()));
    assert_eq!(send(&app(dir.path(), 36 * 44), Method::POST, "/api/enhance", None, png).await.0, StatusCode::OK);
}

#[tokio::test]
async fn clusters_list_sizes_and_representatives() {
    let dir = workdir();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let (status, body) = get(&app, "/api/clusters").await;
    assert_eq!(status, StatusCode::OK);
    let list: Vec<ClusterInfo> = serde_json::from_slice(&body).unwrap();
    assert_eq!(list.iter().map(|c| c.id).collect::<Vec<_>>(), [0, 1]);
    assert_eq!(list.iter().map(|c| c.size).sum::<usize>(), 6);
    for c in &list {
        let url = c.representative.as_ref().unwrap();
        let (status, png) = get(&app, url).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(io::decode_image(&png).unwrap().shape(), (40, 48, 3));
    }

    let empty = tempfile::tempdir().unwrap();
    let (_, body) = get(&self::app(empty.path(), DEFAULT_MAX_PIXELS), "/api/clusters").await;
    assert_eq!(json(&body), serde_json::json!([]));
}

/// The member nearest its centroid, found by scanning every member.
fn representative(dir: &Path, cluster_id: usize) -> ImageF {
    let model: lwe_core::dataset::ClusterModel =
        serde_json::from_slice(&std::fs::read(dir.join("clusters.json")).unwrap()).unwrap();
    let centroid = &model.centroids[cluster_id].bins;
    let best = model
        .members(cluster_id)
        .into_iter()
        .map(|id| {
            let img = io::load_image(dir.join("images").join(id)).unwrap();
            let h = lwe_core::dataset::histogram(&img).unwrap();
            let d: f64 = h.bins.iter().zip(centroid).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, img)
        })
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    best.1
}

#[tokio::test]
async fn saved_coefficients_drive_the_preview() {
    let dir = workdir();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let rep = representative(dir.path(), 1);

    // nothing saved yet: defaults
    let (status, png) = get(&app, "/api/clusters/1/preview").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(png, io::encode_png(&retouch(&rep, &RetouchCoefficients::default()).unwrap()).unwrap());

    let coeffs = RetouchCoefficients {
        gamma1: vec![0.3, 0.6, 0.9],
        theta1: vec![0.01, 0.02, 0.04],
        alpha: 0.5,
        ..RetouchCoefficients::default()
    };
    let body = serde_json::to_vec(&coeffs).unwrap();
    let (status, _) = send(&app, Method::PUT, "/api/clusters/1/coefficients", Some("application/json"), body).await;
    assert_eq!(status, StatusCode::OK);
    let on_disk: RetouchCoefficients =
        serde_json::from_slice(&std::fs::read(dir.path().join("coeffs/1.json")).unwrap()).unwrap();
    assert_eq!(on_disk, coeffs);
    let (_, stored) = get(&app, "/api/clusters/1/coefficients").await;
    assert_eq!(serde_json::from_slice::<RetouchCoefficients>(&stored).unwrap(), coeffs);

    let direct = io::encode_png(&retouch(&rep, &coeffs).unwrap()).unwrap();
    let (status, preview) = get(&app, "/api/clusters/1/preview").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(preview, direct);

    // query values override the stored ones for this request only
    let tweaked = RetouchCoefficients { gamma2: vec![0.1, 0.2], alpha: 0.0, ..coeffs.clone() };
    let (status, preview) = get(&app, "/api/clusters/1/preview?gamma2=0.1,0.2&alpha=0").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(preview, io::encode_png(&retouch(&rep, &tweaked).unwrap()).unwrap());
    assert_eq!(get(&app, "/api/clusters/1/preview").await.1, direct);
}

#[tokio::test]
async fn identity_coefficients_preview_the_original() {
    let dir = workdir();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let rep = representative(dir.path(), 0);
    let (status, png) = get(&app, "/api/clusters/0/preview?gamma1=0,0&gamma2=0,0&alpha=0").await;
    assert_eq!(status, StatusCode::OK);
    let out = io::decode_image(&png).unwrap();
    assert!(out.mean_abs_diff(&rep) < 0.02, "{}", out.mean_abs_diff(&rep));
}

#[tokio::test]
async fn coefficient_errors_are_400_and_unknown_clusters_404() {
    let dir = workdir();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    for q in ["gamma1=2,0.5", "gamma1=x", "alpha=-1", "bogus=1", "levels=1.5", "theta1=0.01"] {
        let (status, _) = get(&app, &format!("/api/clusters/0/preview?{q}")).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{q}");
    }
    let put = |body: &'static str| send(&app, Method::PUT, "/api/clusters/0/coefficients", None, body.as_bytes().to_vec());
    assert_eq!(put("{not json").await.0, StatusCode::BAD_REQUEST);
    let mut bad = serde_json::to_value(RetouchCoefficients::default()).unwrap();
    bad["gamma2"] = serde_json::json!([0.5, 1.5]);
    let (status, _) = send(&app, Method::PUT, "/api/clusters/0/coefficients", None, bad.to_string().into_bytes()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(!dir.path().join("coeffs/0.json").exists());

    for uri in ["/api/clusters/2/preview", "/api/clusters/abc/preview", "/api/clusters/7/coefficients", "/api/clusters/9/representative"] {
        assert_eq!(get(&app, uri).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
    let body = serde_json::to_vec(&RetouchCoefficients::default()).unwrap();
    assert_eq!(send(&app, Method::PUT, "/api/clusters/5/coefficients", None, body).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn unknown_jobs_are_404() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    for uri in ["/api/jobs/unknown", "/api/jobs/1", "/api/jobs/-3"] {
        assert_eq!(get(&app, uri).await.0, StatusCode::NOT_FOUND, "{uri}");
    }
}

async fn wait_for(app: &Router, id: u64) -> JobRecord {
    let start = Instant::now();
    let mut last_progress = 0.0;
    loop {
        let (status, body) = get(app, &format!("/api/jobs/{id}")).await;
        assert_eq!(status, StatusCode::OK);
        let r: JobRecord = serde_json::from_slice(&body).unwrap();
        assert!(r.progress >= last_progress);
        last_progress = r.progress;
        if r.state == JobState::Done || r.state == JobState::Failed {
            return r;
        }
        assert!(start.elapsed() < Duration::from_secs(120), "job {id} stuck: {r:?}");
        std::thread::sleep(Duration::from_millis(20));
    }
}

async fn submit(app: &Router, uri: &str, body: &str) -> (StatusCode, Value) {
    let (status, body) = send(app, Method::POST, uri, Some("application/json"), body.as_bytes().to_vec()).await;
    (status, json(&body))
}

#[tokio::test]
async fn dataset_build_job_uses_saved_coefficients() {
    let dir = workdir();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    let saved = RetouchCoefficients { alpha: 0.1, ..RetouchCoefficients::default() };
    let body = serde_json::to_vec(&saved).unwrap();
    assert_eq!(send(&app, Method::PUT, "/api/clusters/0/coefficients", None, body).await.0, StatusCode::OK);

    let (status, rec) = submit(&app, "/api/dataset/build", r#"{"crop":[32,32],"seed":3,"variants_per_image":2}"#).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    let rec: JobRecord = serde_json::from_value(rec).unwrap();
    assert_eq!((rec.kind, rec.state), (JobKind::DatasetBuild, JobState::Queued));
    let build_id = rec.id;
    let done = wait_for(&app, build_id).await;
    assert_eq!((done.state, done.progress), (JobState::Done, 1.0), "{}", done.message);

    let out = dir.path().join(format!("datasets/{}", rec.id));
    let manifest = DatasetManifest::load(out.join("manifest.json")).unwrap();
    assert_eq!(manifest.entries.len(), 12);
    manifest.verify(&out).unwrap();
    let used: BTreeMap<usize, RetouchCoefficients> = manifest
        .entries
        .iter()
        .map(|e| (e.cluster_id, serde_json::from_slice(&std::fs::read(out.join(&e.coefficients_ref)).unwrap()).unwrap()))
        .collect();
    assert_eq!(used[&0], saved);
    if let Some(c) = used.get(&1) {
        assert_eq!(*c, RetouchCoefficients::default());
    }

    // a crop larger than the images fails mid-build: no manifest appears
    let (_, rec) = submit(&app, "/api/dataset/build", r#"{"crop":[400,400]}"#).await;
    let failed = wait_for(&app, rec["id"].as_u64().unwrap()).await;
    assert_eq!(failed.state, JobState::Failed);
    assert!(failed.message.contains("crop"), "{}", failed.message);
    assert!(!dir.path().join(format!("datasets/{}/manifest.json", failed.id)).exists());

    // training on the built set goes through the same worker
    let req = format!(r#"{{"stage":1,"manifest":"datasets/{build_id}/manifest.json","iterations":2,"batch_size":2,"patch":32}}"#);
    let (status, rec) = submit(&app, "/api/train", &req).await;
    assert_eq!(status, StatusCode::ACCEPTED);
    assert_eq!(rec["kind"], "train");
    let trained = wait_for(&app, rec["id"].as_u64().unwrap()).await;
    assert_eq!(trained.state, JobState::Done, "{}", trained.message);
    EnhanceModel::load(dir.path().join(format!("weights/{}.lwe", trained.id))).unwrap();
}

#[tokio::test]
async fn job_requests_are_validated_up_front() {
    let dir = workdir();
    let app = app(dir.path(), DEFAULT_MAX_PIXELS);
    for body in [r#"{"jpeg_quality":[90,10]}"#, r#"{"variants_per_image":0}"#, r#"{"nope":1}"#, "[1,"] {
        assert_eq!(submit(&app, "/api/dataset/build", body).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
    for body in [r#"{"stage":3,"manifest":"x"}"#, r#"{"stage":1,"manifest":"missing.json"}"#] {
        assert_eq!(submit(&app, "/api/train", body).await.0, StatusCode::BAD_REQUEST, "{body}");
    }
    let empty = tempfile::tempdir().unwrap();
    let (status, _) = submit(&self::app(empty.path(), DEFAULT_MAX_PIXELS), "/api/dataset/build", "").await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/api/jobs/1").await.0, StatusCode::NOT_FOUND);
}
