#![allow(dead_code)]

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vpu::pngio;
use vpu::service::{router, AppState, ServedModel, ServiceConfig};
use vpu_core::interact::ProtocolConfig;
use vpu_core::model::{ModelConfig, ModelParams};
use vpu_core::pue::EncoderConfig;
use vpu_core::synth::generate_instance;

/// A 64-pixel model small enough for fast request tests.
pub fn small_model_config() -> ModelConfig {
    ModelConfig { d_model: 8, ffn_hidden: 16, dma_layers: 1, decoder_scales: vec![4], max_prompts: 8, ..ModelConfig::default() }
}

pub fn served_model(seed: u64) -> ServedModel {
    let model = small_model_config();
    ServedModel {
        params: ModelParams::init(&model, seed).unwrap(),
        model,
        encoder: EncoderConfig::default(),
        protocol: ProtocolConfig::default(),
    }
}

pub fn app(max_sessions: usize) -> Router {
    router(AppState::new(served_model(3), ServiceConfig { max_sessions, static_dir: None }))
}

pub async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, bytes) = call_raw(app, method, uri, body.map(|v| v.to_string().into_bytes())).await;
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

pub async fn call_raw(app: &Router, method: Method, uri: &str, body: Option<Vec<u8>>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    if body.is_some() {
        req = req.header("content-type", "application/json");
    }
    let req = req.body(body.map(Body::from).unwrap_or_else(Body::empty)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

/// Image and gt of synthetic instance `seed`, base64 PNG.
pub fn instance_b64(seed: u64) -> (String, String) {
    let s = generate_instance(seed).unwrap();
    (B64.encode(pngio::encode_image(&s.image).unwrap()), B64.encode(pngio::encode_mask(&s.gt).unwrap()))
}

pub async fn create(app: &Router, seed: u64, with_gt: bool) -> String {
    let (img, gt) = instance_b64(seed);
    let body = if with_gt { json!({"image_png_b64": img, "gt_png_b64": gt}) } else { json!({"image_png_b64": img}) };
    let (status, v) = call(app, Method::POST, "/v1/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

pub fn click(x: usize, y: usize, positive: bool, request_id: &str) -> Value {
    json!({"kind": "click", "positive": positive, "geometry": {"x": x, "y": y}, "request_id": request_id})
}
