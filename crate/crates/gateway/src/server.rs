//! HTTP service.
//!
//! Enhancement and previews are stateless per request and run on the
//! blocking pool; dataset builds and training go through the single job
//! worker.

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use lwe_core::dataset::{build_pairs, load_image_dir, BuildConfig, DegradeRanges, MANIFEST_FILE};
use lwe_core::{io, ImageF, RetouchCoefficients};
use lwe_net::train::{train_stage1, train_stage2, TrainConfig};
use lwe_net::{interactive_enhance, EnhanceModel, EnhanceParams};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::jobs::{JobKind, JobQueue, JobRecord, Progress};
use crate::workdir::{load_coefficient_source, ClusterState, Workdir};

pub const DEFAULT_MAX_PIXELS: usize = 8_000_000;

pub struct AppState {
    pub model: Arc<EnhanceModel>,
    pub workdir: Workdir,
    pub max_pixels: usize,
    pub clusters: Option<Arc<ClusterState>>,
    pub jobs: JobQueue,
}

impl AppState {
    /// Creates the workdir if needed and reads its cluster model, if any.
    pub fn new(workdir: impl Into<PathBuf>, model: EnhanceModel, max_pixels: usize) -> crate::Result<Self> {
        let workdir = Workdir::new(workdir);
        std::fs::create_dir_all(workdir.root())?;
        let clusters = ClusterState::load(&workdir)?.map(Arc::new);
        Ok(Self {
            model: Arc::new(model),
            workdir,
            max_pixels,
            clusters,
            jobs: JobQueue::start(),
        })
    }
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }

    fn internal(message: impl std::fmt::Display) -> Self {
        eprintln!("internal error: {message}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Largest request body accepted: enough for an uncompressed image at the
/// pixel limit.
fn body_limit(max_pixels: usize) -> usize {
    max_pixels.saturating_mul(4).max(1 << 20) + (64 << 10)
}

pub fn router(state: Arc<AppState>) -> Router {
    let limit = body_limit(state.max_pixels);
    Router::new()
        .route("/api/health", get(health))
        .route("/api/enhance", post(enhance))
        .route("/api/clusters", get(list_clusters))
        .route("/api/clusters/{id}/representative", get(representative))
        .route("/api/clusters/{id}/preview", get(preview))
        .route("/api/clusters/{id}/coefficients", get(get_coefficients).put(put_coefficients))
        .route("/api/dataset/build", post(dataset_build))
        .route("/api/train", post(train))
        .route("/api/jobs/{id}", get(job))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until Ctrl-C.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn health() -> Json<Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

fn png_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

/// Gamma controls from `g1`, `g2`, `g3`; absent ones default to 1.
pub fn parse_gammas(query: &[(String, String)]) -> ApiResult<EnhanceParams> {
    let mut p = EnhanceParams::default();
    for (k, v) in query {
        let slot = match k.as_str() {
            "g1" => &mut p.gamma1,
            "g2" => &mut p.gamma2,
            "g3" => &mut p.gamma3,
            _ => return Err(ApiError::bad_request(format!("unknown parameter {k:?}"))),
        };
        *slot = v
            .parse()
            .map_err(|_| ApiError::bad_request(format!("{k} = {v:?} is not a number")))?;
    }
    p.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(p)
}

/// Raw PNG/JPEG body, or the `image` (or first file) field of a multipart
/// form.
async fn image_bytes(req: Request) -> ApiResult<Bytes> {
    let multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("multipart/form-data"));
    let bytes = if multipart {
        let mut form = Multipart::from_request(req, &())
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?;
        let mut found = None;
        while let Some(field) = form.next_field().await.map_err(|e| ApiError::new(e.status(), e.body_text()))? {
            if field.name() == Some("image") || field.file_name().is_some() {
                found = Some(field.bytes().await.map_err(|e| ApiError::new(e.status(), e.body_text()))?);
                break;
            }
        }
        found.ok_or_else(|| ApiError::bad_request("multipart body has no image field"))?
    } else {
        Bytes::from_request(req, &())
            .await
            .map_err(|e| ApiError::new(e.status(), e.body_text()))?
    };
    if bytes.is_empty() {
        return Err(ApiError::bad_request("empty image body"));
    }
    Ok(bytes)
}

fn decode_checked(bytes: &[u8], max_pixels: usize) -> ApiResult<ImageF> {
    let (h, w) = io::peek_dimensions(bytes).map_err(|e| ApiError::bad_request(format!("unreadable image: {e}")))?;
    if h.saturating_mul(w) > max_pixels {
        return Err(ApiError::new(
            StatusCode::PAYLOAD_TOO_LARGE,
            format!("image is {w}x{h} = {} pixels; the limit is {max_pixels}", h * w),
        ));
    }
    io::decode_image(bytes).map_err(|e| ApiError::bad_request(format!("unreadable image: {e}")))
}

async fn enhance(
    State(s): State<Arc<AppState>>,
    Query(query): Query<Vec<(String, String)>>,
    req: Request,
) -> ApiResult<Response> {
    let params = parse_gammas(&query)?;
    let bytes = image_bytes(req).await?;
    let img = decode_checked(&bytes, s.max_pixels)?;
    let model = s.model.clone();
    let png = blocking(move || {
        let out = interactive_enhance(&img, &model, params).map_err(ApiError::internal)?;
        io::encode_png(&out).map_err(ApiError::internal)
    })
    .await?;
    Ok(png_response(png))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub id: usize,
    pub size: usize,
    /// URL of the member closest to the centroid; absent for empty clusters.
    pub representative: Option<String>,
}

async fn list_clusters(State(s): State<Arc<AppState>>) -> Json<Vec<ClusterInfo>> {
    let list = match &s.clusters {
        None => Vec::new(),
        Some(c) => c
            .model
            .sizes()
            .into_iter()
            .enumerate()
            .map(|(id, size)| ClusterInfo {
                id,
                size,
                representative: c.representatives[id]
                    .as_ref()
                    .map(|_| format!("/api/clusters/{id}/representative")),
            })
            .collect(),
    };
    Json(list)
}

fn cluster_id(s: &AppState, raw: &str) -> ApiResult<(Arc<ClusterState>, usize)> {
    let unknown = || ApiError::not_found(format!("unknown cluster {raw:?}"));
    let id: usize = raw.parse().map_err(|_| unknown())?;
    match &s.clusters {
        Some(c) if c.contains(id) => Ok((c.clone(), id)),
        _ => Err(unknown()),
    }
}

async fn representative_image(c: Arc<ClusterState>, id: usize) -> ApiResult<ImageF> {
    blocking(move || c.representative_image(id).map_err(ApiError::internal))
        .await?
        .ok_or_else(|| ApiError::not_found(format!("cluster {id} has no members")))
}

async fn representative(State(s): State<Arc<AppState>>, Path(raw): Path<String>) -> ApiResult<Response> {
    let (c, id) = cluster_id(&s, &raw)?;
    let img = representative_image(c, id).await?;
    Ok(png_response(io::encode_png(&img).map_err(ApiError::internal)?))
}

/// Overrides fields of `base` from flattened query pairs: vector fields as
/// comma-separated numbers (`gamma1=0.4,0.8`), scalars as plain numbers.
pub fn apply_coefficient_query(base: &RetouchCoefficients, query: &[(String, String)]) -> ApiResult<RetouchCoefficients> {
    let mut v = serde_json::to_value(base).map_err(ApiError::internal)?;
    let obj = v.as_object_mut().expect("coefficients serialize to an object");
    for (k, raw) in query {
        let number = |s: &str| -> ApiResult<Value> {
            s.trim()
                .parse::<f64>()
                .ok()
                .and_then(|x| serde_json::Number::from_f64(x).map(Value::Number))
                .ok_or_else(|| ApiError::bad_request(format!("{k}: {s:?} is not a finite number")))
        };
        let slot = obj
            .get_mut(k)
            .ok_or_else(|| ApiError::bad_request(format!("unknown coefficient {k:?}")))?;
        *slot = match slot {
            Value::Array(_) => Value::Array(raw.split(',').map(number).collect::<ApiResult<_>>()?),
            _ => number(raw)?,
        };
    }
    let c: RetouchCoefficients = serde_json::from_value(v).map_err(|e| ApiError::bad_request(e.to_string()))?;
    c.validate().map_err(|e| ApiError::bad_request(e.to_string()))?;
    Ok(c)
}

async fn preview(
    State(s): State<Arc<AppState>>,
    Path(raw): Path<String>,
    Query(query): Query<Vec<(String, String)>>,
) -> ApiResult<Response> {
    let (c, id) = cluster_id(&s, &raw)?;
    let stored = s.workdir.coefficients(id).map_err(ApiError::internal)?;
    let coeffs = apply_coefficient_query(&stored, &query)?;
    let img = representative_image(c, id).await?;
    let png = blocking(move || {
        let out = lwe_core::retouch::retouch(&img, &coeffs).map_err(ApiError::internal)?;
        io::encode_png(&out).map_err(ApiError::internal)
    })
    .await?;
    Ok(png_response(png))
}

async fn get_coefficients(
    State(s): State<Arc<AppState>>,
    Path(raw): Path<String>,
) -> ApiResult<Json<RetouchCoefficients>> {
    let (_, id) = cluster_id(&s, &raw)?;
    Ok(Json(s.workdir.coefficients(id).map_err(ApiError::internal)?))
}

async fn put_coefficients(
    State(s): State<Arc<AppState>>,
    Path(raw): Path<String>,
    body: Bytes,
) -> ApiResult<Json<RetouchCoefficients>> {
    let (_, id) = cluster_id(&s, &raw)?;
    let c: RetouchCoefficients =
        serde_json::from_slice(&body).map_err(|e| ApiError::bad_request(format!("bad coefficients: {e}")))?;
    c.validate()
        .map_err(|e| ApiError::bad_request(format!("bad coefficients: {e}")))?;
    s.workdir.save_coefficients(id, &c).map_err(ApiError::internal)?;
    Ok(Json(c))
}

/// Optional overrides for a build job; everything else takes the library
/// defaults.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildRequest {
    pub sigma_s: Option<(f32, f32)>,
    pub sigma_c: Option<(f32, f32)>,
    pub jpeg_quality: Option<(u8, u8)>,
    pub seed: Option<u64>,
    pub variants_per_image: Option<usize>,
    /// `(height, width)`
    pub crop: Option<(usize, usize)>,
}

impl BuildRequest {
    pub fn config(&self) -> Result<BuildConfig, String> {
        let d = DegradeRanges::default();
        let degrade = DegradeRanges {
            sigma_s: self.sigma_s.unwrap_or(d.sigma_s),
            sigma_c: self.sigma_c.unwrap_or(d.sigma_c),
            jpeg_quality: self.jpeg_quality.unwrap_or(d.jpeg_quality),
            seed: self.seed.unwrap_or(d.seed),
        };
        degrade.validate().map_err(|e| e.to_string())?;
        let variants_per_image = self.variants_per_image.unwrap_or(1);
        if variants_per_image == 0 {
            return Err("variants_per_image must be at least 1".into());
        }
        if self.crop.is_some_and(|(h, w)| h == 0 || w == 0) {
            return Err("crop must be non-empty".into());
        }
        Ok(BuildConfig {
            degrade,
            variants_per_image,
            crop: self.crop,
        })
    }
}

fn json_body<T: for<'de> Deserialize<'de> + Default>(body: &[u8]) -> ApiResult<T> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("bad request body: {e}")))
}

async fn dataset_build(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let cfg = json_body::<BuildRequest>(&body)?
        .config()
        .map_err(ApiError::bad_request)?;
    let clusters = s
        .clusters
        .clone()
        .ok_or_else(|| ApiError::bad_request("the workdir has no clusters.json"))?;
    let workdir = s.workdir.clone();
    let record = s.jobs.submit(
        JobKind::DatasetBuild,
        Box::new(move |p| run_build(p, &workdir, &clusters, &cfg).map_err(|e| e.to_string())),
    );
    Ok((StatusCode::ACCEPTED, Json(record)))
}

fn run_build(p: &Progress, workdir: &Workdir, clusters: &ClusterState, cfg: &BuildConfig) -> crate::Result<String> {
    let images = load_image_dir(&clusters.images_dir)?;
    p.report(0.2, format!("loaded {} images", images.len()));
    let coeffs = load_coefficient_source(&workdir.coeffs_dir(), clusters.model.k)?;
    let rel = format!("datasets/{}", p.id());
    let out = workdir.root().join(&rel);
    // build_pairs writes the manifest last, so a failed build never leaves
    // one behind
    let manifest = build_pairs(&images, &clusters.model, &coeffs, cfg, &out)?;
    Ok(format!("{} pairs in {rel}/{MANIFEST_FILE}", manifest.entries.len()))
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRequest {
    pub stage: u8,
    /// Relative to the workdir.
    pub manifest: String,
    /// Starting weights relative to the workdir; the served model if absent.
    pub init: Option<String>,
    pub iterations: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patch: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
}

impl TrainRequest {
    pub fn config(&self) -> Result<TrainConfig, String> {
        if !matches!(self.stage, 1 | 2) {
            return Err(format!("stage must be 1 or 2, got {}", self.stage));
        }
        let d = TrainConfig::default();
        let mut cfg = TrainConfig {
            iterations: self.iterations.or(d.iterations),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            patch: self.patch.unwrap_or(d.patch),
            seed: self.seed.unwrap_or(d.seed),
            ..d
        };
        if let Some(lr) = self.lr {
            cfg.adam.alpha = lr;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

async fn train(State(s): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<JobRecord>)> {
    let req: TrainRequest = json_body(&body)?;
    let cfg = req.config().map_err(ApiError::bad_request)?;
    let manifest = s.workdir.root().join(&req.manifest);
    if req.manifest.is_empty() || !manifest.is_file() {
        return Err(ApiError::bad_request(format!("manifest {:?} not found in the workdir", req.manifest)));
    }
    let init = req.init.as_ref().map(|p| s.workdir.root().join(p));
    let (model, workdir, stage) = (s.model.clone(), s.workdir.clone(), req.stage);
    let record = s.jobs.submit(
        JobKind::Train,
        Box::new(move |p| {
            let start = match &init {
                Some(path) => crate::load_model(Some(path)).map_err(|e| e.to_string())?,
                None => (*model).clone(),
            };
            run_train(p, &workdir, &manifest, start, stage, &cfg).map_err(|e| e.to_string())
        }),
    );
    Ok((StatusCode::ACCEPTED, Json(record)))
}

fn run_train(
    p: &Progress,
    workdir: &Workdir,
    manifest: &std::path::Path,
    model: EnhanceModel,
    stage: u8,
    cfg: &TrainConfig,
) -> crate::Result<String> {
    let m = lwe_core::dataset::DatasetManifest::load(manifest)?;
    let pairs = m.load_pairs(manifest.parent().unwrap_or(workdir.root()))?;
    p.report(0.1, format!("training stage {stage} on {} pairs", pairs.len()));
    let (trained, report) = match stage {
        1 => train_stage1(&pairs, model, cfg)?,
        _ => train_stage2(&pairs, model, cfg)?,
    };
    let rel = format!("weights/{}.lwe", p.id());
    std::fs::create_dir_all(workdir.weights_dir())?;
    trained.save(workdir.root().join(&rel))?;
    Ok(format!(
        "stage {stage}: loss {:.4} -> {:.4}; weights in {rel}",
        report.initial_loss, report.final_loss
    ))
}

async fn job(State(s): State<Arc<AppState>>, Path(raw): Path<String>) -> ApiResult<Json<JobRecord>> {
    raw.parse()
        .ok()
        .and_then(|id| s.jobs.get(id))
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("unknown job {raw:?}")))
}
