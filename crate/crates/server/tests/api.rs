use axum::body::{to_bytes, Body};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::Engine;
use pallor_core::imaging::{decode_image, encode_png, encode_ppm, RgbImage, Roi};
use pallor_core::neuralnet::{content_id, save_weights, NetworkSpec, Network};
use pallor_core::pipeline::{PredictMeta, PredictResponse};
use pallor_core::segmentation::SegmenterKind;
use pallor_core::synthdata::{generate_sample, inverse_map_network, sample_rng, SynthConfig, CARD_WHITE_ROI};
use pallor_server::{predict_image, router, AppState, ModelsInfo, ServerConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "pallor-test-boundary";

struct Fixture {
    _dir: tempfile::TempDir,
    config: ServerConfig,
}

impl Fixture {
    fn with_oracle() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("regressor.bin");
        save_weights(&inverse_map_network(), &path).unwrap();
        let config = ServerConfig { regressor_weights: Some(path), ..Default::default() };
        Self { _dir: dir, config }
    }

    fn state(&self) -> AppState {
        AppState::load(&self.config).unwrap()
    }

    fn app(&self) -> Router {
        router(self.state(), self.config.max_body_bytes, false)
    }
}

fn multipart(image: &[u8], meta: &Value) -> Request<Body> {
    let mut body = Vec::new();
    body.extend_from_slice(
        format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"meta\"\r\nContent-Type: application/json\r\n\r\n{meta}\r\n")
            .as_bytes(),
    );
    body.extend_from_slice(
        format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"image\"; filename=\"eye\"\r\nContent-Type: application/octet-stream\r\n\r\n")
            .as_bytes(),
    );
    body.extend_from_slice(image);
    body.extend_from_slice(format!("\r\n--{BOUNDARY}--\r\n").as_bytes());
    Request::post("/v1/predict")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap()
}

fn json_request(image: &[u8], meta: &Value) -> Request<Body> {
    let mut body = meta.clone();
    body["image"] = Value::String(base64::engine::general_purpose::STANDARD.encode(image));
    Request::post("/v1/predict")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn classical_meta(card: Roi) -> Value {
    json!({ "card_roi": card, "segmenter": "classical" })
}

/// Clean sample whose conjunctiva red value is the integer `r`, so the
/// 8-bit file encoding is lossless and recovery is exact.
fn integer_sample(r: f64, seed: u64) -> (RgbImage, f64) {
    let hb = 9.0 + 10.0 * (r / 80.0).log10();
    let cfg = SynthConfig { noise_sigma: 0.0, gain_range: [1.0, 1.0], ..Default::default() };
    (generate_sample(hb, &cfg, &mut sample_rng(seed, 0)).unwrap().image, hb)
}

fn strip_timings(mut v: Value) -> Value {
    v.as_object_mut().unwrap().remove("timings");
    v
}

#[tokio::test]
async fn clean_sample_recovers_gold_hb() {
    let fx = Fixture::with_oracle();
    let app = fx.app();
    for (i, r) in [64.0, 80.0, 100.0, 120.0, 150.0].into_iter().enumerate() {
        let (image, gold) = integer_sample(r, i as u64);
        let (status, body) = send(&app, multipart(&encode_ppm(&image), &classical_meta(CARD_WHITE_ROI))).await;
        assert_eq!(status, StatusCode::OK, "{body}");
        let hb = body["hb"].as_f64().unwrap();
        assert!((hb - gold).abs() < 0.01, "{gold} → {hb}");
        let decisions = body["decisions"].as_object().unwrap();
        assert_eq!(decisions.len(), 3);
        for (cut, anemic) in decisions {
            assert_eq!(anemic.as_bool().unwrap(), hb < cut.parse::<f64>().unwrap());
        }
    }
}

#[tokio::test]
async fn responses_equal_library_calls() {
    let fx = Fixture::with_oracle();
    let state = fx.state();
    let app = fx.app();
    // Gains above 255/200 would saturate the 8-bit card white.
    let cfg = SynthConfig { image_size: [128, 128], gain_range: [0.5, 1.25], ..Default::default() };
    for i in 0..6u64 {
        let mut rng = sample_rng(99, i);
        let sample = generate_sample(8.0 + i as f64, &cfg, &mut rng).unwrap();
        let bytes = if i % 2 == 0 { encode_ppm(&sample.image) } else { encode_png(&sample.image).unwrap() };
        let meta = PredictMeta { segmenter: Some(SegmenterKind::Classical), ..PredictMeta::new(sample.card_roi) };
        let expected = predict_image(&state, &decode_image(&bytes).unwrap(), &meta).unwrap();
        let (status, body) = send(&app, multipart(&bytes, &serde_json::to_value(&meta).unwrap())).await;
        assert_eq!(status, StatusCode::OK);
        let got: PredictResponse = serde_json::from_value(body).unwrap();
        assert_eq!(got.hb.to_bits(), expected.hb.to_bits());
        assert_eq!(got.features.ei.to_bits(), expected.features.ei.to_bits());
        assert_eq!(got.mask_rle, expected.mask_rle);
        assert_eq!(got.model_id, expected.model_id);
    }
}

#[tokio::test]
async fn base64_json_matches_multipart() {
    let fx = Fixture::with_oracle();
    let app = fx.app();
    let (image, _) = integer_sample(100.0, 7);
    let bytes = encode_png(&image).unwrap();
    let meta = json!({ "card_roi": CARD_WHITE_ROI, "segmenter": "classical", "cutoffs": [10.5] });
    let (s1, a) = send(&app, multipart(&bytes, &meta)).await;
    let (s2, b) = send(&app, json_request(&bytes, &meta)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(strip_timings(a.clone()), strip_timings(b));
    assert_eq!(a["decisions"].as_object().unwrap().keys().collect::<Vec<_>>(), ["10.5"]);

    // data-URL prefix is accepted
    let mut body = meta.clone();
    body["image"] = format!("data:image/png;base64,{}", base64::engine::general_purpose::STANDARD.encode(&bytes)).into();
    let req = Request::post("/v1/predict").header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    assert_eq!(send(&app, req).await.0, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let fx = Fixture::with_oracle();
    let app = fx.app();
    let (image, _) = integer_sample(120.0, 3);
    let bytes = encode_ppm(&image);
    let meta = classical_meta(CARD_WHITE_ROI);
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (app, req) = (app.clone(), multipart(&bytes, &meta));
            tokio::spawn(async move { send(&app, req).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        let (status, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        bodies.push(strip_timings(body));
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
}

fn assert_error(status: StatusCode, body: &Value, want_status: StatusCode, want_code: &str) {
    assert_eq!(status, want_status, "{body}");
    assert_eq!(body["error_code"], want_code, "{body}");
    assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test]
async fn error_paths_return_documented_codes() {
    let fx = Fixture::with_oracle();
    let app = fx.app();
    let (image, _) = integer_sample(100.0, 1);
    let ppm = encode_ppm(&image);

    let (s, b) = send(&app, multipart(&ppm, &classical_meta(Roi::new(250, 250, 40, 40)))).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "roi_out_of_bounds");

    let meta = json!({ "card_roi": CARD_WHITE_ROI, "segmenter": "classical", "conjunctiva_roi": {"x": 0, "y": 0, "w": 999, "h": 4} });
    let (s, b) = send(&app, multipart(&ppm, &meta)).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "roi_out_of_bounds");

    let gray = encode_ppm(&RgbImage::filled(64, 64, [128.0; 3]).unwrap());
    let (s, b) = send(&app, multipart(&gray, &classical_meta(Roi::new(0, 0, 8, 8)))).await;
    assert_error(s, &b, StatusCode::UNPROCESSABLE_ENTITY, "segmentation_failed");
    assert_eq!(b["details"]["mask_area"], 0);
    assert_eq!(b["details"]["min_area"], 50);

    let (s, b) = send(&app, multipart(b"GIF89a....", &classical_meta(CARD_WHITE_ROI))).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "unsupported_format");

    let (s, b) = send(&app, multipart(&ppm, &json!({ "segmenter": "classical" }))).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "malformed_request");

    let (s, b) = send(&app, multipart(&ppm, &json!({ "card_roi": CARD_WHITE_ROI, "cutoffs": [0] , "segmenter": "classical"}))).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "invalid_config");

    let req = Request::post("/v1/predict").header(header::CONTENT_TYPE, "text/plain").body(Body::from("hi")).unwrap();
    let (s, b) = send(&app, req).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "malformed_request");

    let req = Request::post("/v1/predict")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({ "image": "!!!", "card_roi": CARD_WHITE_ROI }).to_string()))
        .unwrap();
    let (s, b) = send(&app, req).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "malformed_request");

    // missing image part
    let body = format!("--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"meta\"\r\n\r\n{{}}\r\n--{BOUNDARY}--\r\n");
    let req = Request::post("/v1/predict")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(body))
        .unwrap();
    let (s, b) = send(&app, req).await;
    assert_error(s, &b, StatusCode::BAD_REQUEST, "malformed_request");

    // cnn requested but no segmenter weights configured
    let (s, b) = send(&app, multipart(&ppm, &json!({ "card_roi": CARD_WHITE_ROI }))).await;
    assert_error(s, &b, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded");

    let (s, b) = send(&app, Request::get("/v2/nothing").body(Body::empty()).unwrap()).await;
    assert_error(s, &b, StatusCode::NOT_FOUND, "not_found");
    let (s, b) = send(&app, Request::get("/v1/predict").body(Body::empty()).unwrap()).await;
    assert_error(s, &b, StatusCode::METHOD_NOT_ALLOWED, "method_not_allowed");
}

#[tokio::test]
async fn oversized_payloads_are_rejected() {
    let fx = Fixture::with_oracle();
    let app = router(fx.state(), 4096, false);
    let (image, _) = integer_sample(100.0, 2);
    let ppm = encode_ppm(&image);
    let (s, b) = send(&app, multipart(&ppm, &classical_meta(CARD_WHITE_ROI))).await;
    assert_error(s, &b, StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large");
    let (s, b) = send(&app, json_request(&ppm, &classical_meta(CARD_WHITE_ROI))).await;
    assert_error(s, &b, StatusCode::PAYLOAD_TOO_LARGE, "payload_too_large");
}

#[tokio::test]
async fn health_reports_model_hash() {
    let fx = Fixture::with_oracle();
    let (s, b) = send(&fx.app(), Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b["status"], "ok");
    let file = std::fs::read(fx.config.regressor_weights.as_ref().unwrap()).unwrap();
    assert_eq!(b["model_id"], content_id(&file));
    assert!(b["uptime"].as_f64().unwrap() >= 0.0);
}

#[tokio::test]
async fn unloaded_service_returns_503() {
    let config = ServerConfig { regressor_weights: Some("/nonexistent/weights.bin".into()), ..Default::default() };
    let app = router(AppState::load(&config).unwrap(), config.max_body_bytes, false);
    let (s, b) = send(&app, Request::get("/v1/health").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(b["status"], "unavailable");
    let (s, b) = send(&app, Request::get("/v1/model").body(Body::empty()).unwrap()).await;
    assert_error(s, &b, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded");
    let (image, _) = integer_sample(100.0, 0);
    let (s, b) = send(&app, multipart(&encode_ppm(&image), &classical_meta(CARD_WHITE_ROI))).await;
    assert_error(s, &b, StatusCode::SERVICE_UNAVAILABLE, "model_not_loaded");
}

#[tokio::test]
async fn corrupt_weights_fail_startup() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.bin");
    std::fs::write(&path, b"PALLOR-NN garbage").unwrap();
    let config = ServerConfig { regressor_weights: Some(path), ..Default::default() };
    assert!(AppState::load(&config).is_err());
}

#[tokio::test]
async fn model_endpoint_mirrors_weights() {
    let dir = tempfile::tempdir().unwrap();
    let reg_path = dir.path().join("reg.json");
    let mut net = Network::init(NetworkSpec::regressor(5)).unwrap();
    net.standardization = Some(pallor_core::neuralnet::Standardization::identity(3));
    save_weights(&net, &reg_path).unwrap();
    let seg_path = dir.path().join("seg.bin");
    save_weights(&Network::init(NetworkSpec::segmenter(32, &[4, 4], 1)).unwrap(), &seg_path).unwrap();
    let config = ServerConfig { regressor_weights: Some(reg_path.clone()), segmenter_weights: Some(seg_path), ..Default::default() };
    let app = router(AppState::load(&config).unwrap(), config.max_body_bytes, true);

    let (s, b) = send(&app, Request::get("/v1/model").body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let info: ModelsInfo = serde_json::from_value(b.clone()).unwrap();
    assert_eq!(info.regressor.layers, ["3→16 relu", "16→8 relu", "8→1 linear"]);
    assert_eq!(&info.regressor.spec, net.spec());
    assert_eq!(info.regressor.standardization, net.standardization);
    assert_eq!(info.regressor.model_id, content_id(&std::fs::read(&reg_path).unwrap()));
    assert_eq!(info.segmenter.unwrap().spec.learnable_layers(), 5);

    // same weights loaded twice give identical JSON
    let app2 = router(AppState::load(&config).unwrap(), config.max_body_bytes, true);
    assert_eq!(send(&app2, Request::get("/v1/model").body(Body::empty()).unwrap()).await.1, b);

    let resp = app
        .clone()
        .oneshot(Request::get("/v1/health").header(header::ORIGIN, "http://ui.example").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert!(resp.headers().contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));
}

#[test]
fn config_defaults() {
    let c = ServerConfig::default();
    assert_eq!(c.listen.to_string(), "127.0.0.1:8080");
    assert_eq!(c.max_body_bytes, 16 * 1024 * 1024);
    assert_eq!(c.default_cutoffs, [9.0, 10.0, 11.0]);
    assert!(!c.cors);
}
