//! HTTP session API under `/v1`.
//!
//! A session holds one image (letterboxed to the model input size), an
//! optional ground truth, the prompts applied so far and the latest
//! probability map. Prompt coordinates are in model-input pixels; the
//! transform returned on creation maps them back to the uploaded image.
//!
//! Requests for one session are serialised by a per-session async mutex held
//! across the forward pass. Different sessions run in parallel; the weights
//! are shared read-only.

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Mutex;
use vpu_core::interact::{compute_iou, prompt_seed, should_switch, ProtocolConfig, Segmenter};
use vpu_core::model::{ModelConfig, ModelParams};
use vpu_core::pue::{EncoderConfig, Geometry, Prompt, PromptKind};
use vpu_core::train::ModelSegmenter;
use vpu_core::{BinaryMask, ImagePlane, ProbMap};

use crate::pngio;

/// Read-only model shared by all sessions.
#[derive(Debug)]
pub struct ServedModel {
    pub params: ModelParams,
    pub model: ModelConfig,
    pub encoder: EncoderConfig,
    /// Supplies θ and the minimum improvement for the switch hint.
    pub protocol: ProtocolConfig,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub max_sessions: usize,
    /// Directory served under `/` when present.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { max_sessions: 256, static_dir: None }
    }
}

/// Maps uploaded-image pixels to model-input pixels:
/// `model = source · scale + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Letterbox {
    pub scale: f64,
    pub offset_x: f64,
    pub offset_y: f64,
    pub source_width: usize,
    pub source_height: usize,
}

#[derive(Debug, Clone, Serialize)]
struct StepView {
    kind: PromptKind,
    positive: bool,
    geometry: Geometry,
    iou: Option<f64>,
    request_id: String,
}

#[derive(Debug)]
struct Session {
    image: ImagePlane,
    gt: Option<BinaryMask>,
    prompts: Vec<(Prompt, u64)>,
    steps: Vec<StepView>,
    prob: ProbMap,
    request_ids: HashSet<String>,
    transform: Letterbox,
    created_at: u64,
}

pub struct AppState {
    model: Arc<ServedModel>,
    cfg: ServiceConfig,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    pub fn new(model: ServedModel, cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Self { model: Arc::new(model), cfg, sessions: RwLock::new(HashMap::new()) })
    }

    fn session(&self, id: &str) -> Option<Arc<Mutex<Session>>> {
        self.sessions.read().expect("session map poisoned").get(id).cloned()
    }
}

/// JSON error body `{"error": {"code", "message"}}`.
#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": {"code": self.code, "message": self.message}}))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/v1/health", get(health))
        .route("/v1/sessions", post(create_session))
        .route("/v1/sessions/:id", get(get_session).delete(delete_session))
        .route("/v1/sessions/:id/prompts", post(apply_prompt));
    let api = match &state.cfg.static_dir {
        Some(dir) if dir.is_dir() => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        _ => api,
    };
    api.with_state(state)
}

async fn health() -> Json<Value> {
    Json(json!({"status": "ok", "version": env!("CARGO_PKG_VERSION")}))
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let value: Value = serde_json::from_slice(body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()))?;
    serde_json::from_value(value).map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_schema", e.to_string()))
}

#[derive(Debug, Deserialize)]
struct CreateRequest {
    image_png_b64: String,
    #[serde(default)]
    gt_png_b64: Option<String>,
}

fn decode_b64_png(field: &str, text: &str) -> ApiResult<Vec<u8>> {
    B64.decode(text.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_base64", format!("{field}: {e}")))
}

fn sample_bilinear(img: &ImagePlane, x: f64, y: f64, c: usize) -> f64 {
    let (w, h) = (img.width(), img.height());
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let p = |xx, yy| img.pixel(xx, yy)[c];
    (p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx) * (1.0 - fy) + (p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx) * fy
}

/// Scales the longer side to `size` and centres the result on black padding.
/// Masks use nearest-neighbour sampling.
pub fn letterbox(img: &ImagePlane, gt: Option<&BinaryMask>, size: usize) -> (ImagePlane, Option<BinaryMask>, Letterbox) {
    let (w, h) = (img.width(), img.height());
    let scale = size as f64 / w.max(h) as f64;
    let (nw, nh) = (((w as f64 * scale).round() as usize).max(1), ((h as f64 * scale).round() as usize).max(1));
    let (ox, oy) = ((size - nw) / 2, (size - nh) / 2);
    let t = Letterbox { scale, offset_x: ox as f64, offset_y: oy as f64, source_width: w, source_height: h };
    if w == size && h == size {
        return (img.clone(), gt.cloned(), t);
    }
    let inside = |x: usize, y: usize| x >= ox && x < ox + nw && y >= oy && y < oy + nh;
    // source coordinate of a destination pixel centre
    let src = |x: usize, y: usize| (((x - ox) as f64 + 0.5) / scale - 0.5, ((y - oy) as f64 + 0.5) / scale - 0.5);
    let mut data = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            if inside(x, y) {
                let (sx, sy) = src(x, y);
                for c in 0..3 {
                    data[(y * size + x) * 3 + c] = sample_bilinear(img, sx, sy, c).clamp(0.0, 1.0);
                }
            }
        }
    }
    let image = ImagePlane::new(size, size, 3, data).expect("letterboxed values stay in range");
    let gt = gt.map(|m| {
        BinaryMask::from_fn(size, size, |x, y| {
            if !inside(x, y) {
                return false;
            }
            let (sx, sy) = src(x, y);
            let (mx, my) = ((sx.round().max(0.0) as usize).min(w - 1), (sy.round().max(0.0) as usize).min(h - 1));
            m.get(mx, my)
        })
    });
    (image, gt, t)
}

async fn create_session(State(st): State<Arc<AppState>>, body: Bytes) -> ApiResult<(StatusCode, Json<Value>)> {
    let req: CreateRequest = parse_json(&body)?;
    let bad_png = |e: crate::error::AppError| ApiError::new(StatusCode::BAD_REQUEST, "invalid_png", e.to_string());
    let image = pngio::decode_image(&decode_b64_png("image_png_b64", &req.image_png_b64)?).map_err(bad_png)?;
    let gt = match &req.gt_png_b64 {
        Some(text) => Some(pngio::decode_mask(&decode_b64_png("gt_png_b64", text)?).map_err(bad_png)?),
        None => None,
    };
    if let Some(g) = &gt {
        if g.width() != image.width() || g.height() != image.height() {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, "gt_size_mismatch", "gt and image differ in size"));
        }
    }
    let size = st.model.model.input_size;
    let (image, gt, transform) = letterbox(&image, gt.as_ref(), size);
    let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let session = Session {
        image,
        gt,
        prompts: Vec::new(),
        steps: Vec::new(),
        prob: ProbMap::zeros(size, size),
        request_ids: HashSet::new(),
        transform,
        created_at,
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    {
        let mut map = st.sessions.write().expect("session map poisoned");
        if map.len() >= st.cfg.max_sessions {
            return Err(ApiError::new(StatusCode::TOO_MANY_REQUESTS, "capacity_exceeded", "too many open sessions"));
        }
        map.insert(id.clone(), Arc::new(Mutex::new(session)));
    }
    Ok((StatusCode::CREATED, Json(json!({"session_id": id, "transform": transform}))))
}

#[derive(Debug, Deserialize)]
struct PromptRequest {
    kind: PromptKind,
    positive: bool,
    geometry: Value,
    request_id: String,
}

#[derive(Deserialize)]
struct ClickGeom {
    x: usize,
    y: usize,
}

#[derive(Deserialize)]
struct BoxGeom {
    cx: usize,
    cy: usize,
    w: usize,
    h: usize,
}

#[derive(Deserialize)]
struct ScribbleGeom {
    points: Vec<(usize, usize)>,
}

fn geometry_error(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid_geometry", e.to_string())
}

fn to_prompt(req: &PromptRequest) -> ApiResult<Prompt> {
    let g = req.geometry.clone();
    Ok(match req.kind {
        PromptKind::Click => {
            let c: ClickGeom = serde_json::from_value(g).map_err(geometry_error)?;
            Prompt::click(c.x, c.y, req.positive)
        }
        PromptKind::Box => {
            let b: BoxGeom = serde_json::from_value(g).map_err(geometry_error)?;
            Prompt::bbox(b.cx, b.cy, b.w, b.h, req.positive)
        }
        PromptKind::Scribble => {
            let s: ScribbleGeom = serde_json::from_value(g).map_err(geometry_error)?;
            Prompt::scribble(s.points, req.positive)
        }
    })
}

#[derive(Debug, Serialize)]
struct ProbStats {
    min: f64,
    max: f64,
    mean: f64,
    foreground_fraction: f64,
}

fn prob_stats(p: &ProbMap) -> ProbStats {
    let d = p.data();
    let n = d.len() as f64;
    ProbStats {
        min: d.iter().copied().fold(f64::INFINITY, f64::min),
        max: d.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean: d.iter().sum::<f64>() / n,
        foreground_fraction: d.iter().filter(|&&v| v > 0.5).count() as f64 / n,
    }
}

async fn apply_prompt(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<Value>> {
    let session = st.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let req: PromptRequest = parse_json(&body)?;
    let prompt = to_prompt(&req)?;
    let mut s = session.lock().await;
    if s.request_ids.contains(&req.request_id) {
        return Err(ApiError::new(StatusCode::CONFLICT, "duplicate_request", format!("request {} already applied", req.request_id)));
    }
    prompt.validate(s.image.width(), s.image.height()).map_err(geometry_error)?;

    let mut prompts = s.prompts.clone();
    prompts.push((prompt.clone(), prompt_seed(0, prompts.len())));
    let image = s.image.clone();
    let prev = s.prob.clone();
    let model = Arc::clone(&st.model);
    let prompts_for_model = prompts.clone();
    let prob = tokio::task::spawn_blocking(move || {
        let seg = ModelSegmenter { params: &model.params, model: &model.model, encoder: &model.encoder };
        seg.segment(&image, &prev, &prompts_for_model)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "worker_failed", e.to_string()))?
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "model_failed", e.to_string()))?;

    let mask = prob.threshold();
    let iou = match &s.gt {
        Some(gt) => Some(compute_iou(&mask, gt).map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "iou_failed", e.to_string()))?),
        None => None,
    };
    s.prompts = prompts;
    s.request_ids.insert(req.request_id.clone());
    s.steps.push(StepView { kind: prompt.kind(), positive: prompt.positive, geometry: prompt.geometry, iou, request_id: req.request_id });
    let history: Vec<f64> = s.steps.iter().filter_map(|x| x.iou).collect();
    let switch = iou.is_some() && should_switch(&history, &st.model.protocol);
    let encode_err = |e: crate::error::AppError| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode_failed", e.to_string());
    let mask_png = pngio::encode_mask(&mask).map_err(encode_err)?;
    let prob_png = pngio::encode_prob(&prob).map_err(encode_err)?;
    let stats = prob_stats(&prob);
    s.prob = prob;
    Ok(Json(json!({
        "step_index": s.steps.len(),
        "width": mask.width(),
        "height": mask.height(),
        "mask_png_b64": B64.encode(mask_png),
        "prob_png_b64": B64.encode(prob_png),
        "prob_stats": stats,
        "iou": iou,
        "switch_suggested": switch,
    })))
}

async fn get_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = st.session(&id).ok_or_else(|| ApiError::not_found(&id))?;
    let s = session.lock().await;
    let reached: Option<HashMap<String, Option<usize>>> = s.gt.as_ref().map(|_| {
        st.model
            .protocol
            .targets
            .iter()
            .map(|&t| {
                let k = s.steps.iter().position(|x| x.iou.is_some_and(|v| v >= t)).map(|i| i + 1);
                (vpu_core::interact::target_key(t), k)
            })
            .collect()
    });
    Ok(Json(json!({
        "session_id": id,
        "seed": 0,
        "has_gt": s.gt.is_some(),
        "created_at": s.created_at,
        "transform": s.transform,
        "steps": s.steps,
        "reached": reached,
    })))
}

async fn delete_session(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    match st.sessions.write().expect("session map poisoned").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::not_found(&id)),
    }
}

/// Binds `addr` and serves until Ctrl-C.
pub async fn serve(state: Arc<AppState>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
