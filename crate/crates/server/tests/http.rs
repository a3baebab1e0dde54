use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use promptseg::model::{Model, ModelConfig};
use promptseg::preprocess::model_input;
use promptseg::{Click, Mask, PromptSet, Rle};
use promptseg_server::{router, AppState, CreatedSession, Health, MaskResponse, ServiceConfig};
use serde_json::Value;
use tower::ServiceExt;

fn tiny() -> ModelConfig {
    ModelConfig {
        input_size: 64,
        patch_size: 8,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        pyramid_dims: [16; 4],
        decoder_dim: 16,
        text_dim: 8,
        ..ModelConfig::default()
    }
}

fn model() -> Model {
    let mut m = Model::new(tiny()).unwrap();
    // Move off the zero-initialized prompt path so prompts change the mask.
    m.perturb(0.05, 3);
    m
}

fn state(cache_bytes: usize) -> AppState {
    AppState::new(model(), "test-fingerprint", cache_bytes)
}

fn png(h: u32, w: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 5 % 256) as u8, 90]));
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn mask_png(m: &Mask) -> Vec<u8> {
    let img = image::GrayImage::from_fn(m.width() as u32, m.height() as u32, |c, r| {
        image::Luma([if m.get(r as usize, c as usize) { 255 } else { 0 }])
    });
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

async fn call(app: &Router, method: &str, uri: &str, body: Vec<u8>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, image: Vec<u8>) -> CreatedSession {
    let (status, v) = call(app, "POST", "/sessions", image).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

async fn submit(app: &Router, id: &str, p: &PromptSet) -> MaskResponse {
    let (status, v) = call(app, "POST", &format!("/sessions/{id}/prompts"), p.to_json().into_bytes()).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_reports_fingerprint() {
    let app = router(state(1 << 20));
    let (status, v) = call(&app, "GET", "/healthz", vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let h: Health = serde_json::from_value(v).unwrap();
    assert_eq!(h.status, "ok");
    assert_eq!(h.fingerprint, "test-fingerprint");
    assert!(!h.config_fingerprint.is_empty());

    let none = router(AppState::unloaded(1 << 20));
    assert_eq!(call(&none, "GET", "/healthz", vec![]).await.0, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(call(&none, "POST", "/sessions", png(8, 8)).await.0, StatusCode::SERVICE_UNAVAILABLE);
}

#[tokio::test]
async fn session_lifecycle() {
    let app = router(state(1 << 20));
    let image = png(64, 64);
    let a = create(&app, image.clone()).await;
    let b = create(&app, image).await;
    assert_ne!(a.id, b.id);
    assert_eq!((a.height, a.width, a.model_size), (64, 64, 64));
    assert!(a.encode_ms > 0.0);

    let (status, _) = call(&app, "GET", &format!("/sessions/{}/mask", a.id), vec![]).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let empty = submit(&app, &a.id, &PromptSet::default()).await;
    assert_eq!(empty.mask.size, [64, 64]);
    assert!(empty.iou.is_none());

    let p = PromptSet::from_clicks([Click::positive(20, 30)]);
    let first = submit(&app, &a.id, &p).await;
    let again = submit(&app, &a.id, &p).await;
    assert_eq!(first.mask, again.mask);
    assert_eq!(again.prompts, p);

    let (status, v) = call(&app, "GET", &format!("/sessions/{}/mask", a.id), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    let got: MaskResponse = serde_json::from_value(v).unwrap();
    assert_eq!(got, again);

    let (status, _) = call(&app, "DELETE", &format!("/sessions/{}", a.id), vec![]).await;
    assert_eq!(status, StatusCode::OK);
    for (m, uri) in [("GET", format!("/sessions/{}/mask", a.id)), ("DELETE", format!("/sessions/{}", a.id))] {
        assert_eq!(call(&app, m, &uri, vec![]).await.0, StatusCode::NOT_FOUND);
    }
    let (status, _) = call(&app, "POST", "/sessions/nope/prompts", b"{}".to_vec()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn bad_inputs_get_4xx_with_reason() {
    let app = router(state(1 << 20));
    let (status, v) = call(&app, "POST", "/sessions", b"not an image".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("image decode failed"), "{v}");

    let s = create(&app, png(40, 80)).await;
    let uri = format!("/sessions/{}/prompts", s.id);
    let outside = PromptSet::from_clicks([Click::positive(1, 1), Click::negative(39, 80)]);
    let (status, v) = call(&app, "POST", &uri, outside.to_json().into_bytes()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("clicks[1]"), "{v}");

    let (status, v) = call(&app, "POST", &uri, b"{\"clicks\": 3}".to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");

    let bad_box = r#"{"boxes": [{"r0": 10, "c0": 10, "r1": 2, "c1": 12}]}"#;
    let (status, v) = call(&app, "POST", &uri, bad_box.as_bytes().to_vec()).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(v["error"].as_str().unwrap().contains("boxes[0]"), "{v}");
}

#[tokio::test]
async fn served_mask_equals_offline_forward() {
    let st = state(1 << 20);
    let app = router(st.clone());
    let bytes = png(96, 48);
    let s = create(&app, bytes.clone()).await;
    let model = st.model().unwrap();
    let input = model_input(&promptseg::preprocess::decode_image(&bytes).unwrap(), 64).unwrap();

    // Original-space prompt and its model-space image under round-half-up.
    let p = PromptSet {
        clicks: vec![Click::positive(45, 20), Click::negative(3, 47)],
        boxes: vec![promptseg::BoxPrompt { r0: 10, c0: 5, r1: 60, c1: 40 }],
        ..Default::default()
    };
    let scaled = PromptSet {
        clicks: vec![Click::positive(30, 27), Click::negative(2, 63)],
        boxes: vec![promptseg::BoxPrompt { r0: 7, c0: 7, r1: 40, c1: 53 }],
        ..Default::default()
    };
    let served = submit(&app, &s.id, &p).await;
    let offline = model.forward(&input, &scaled).unwrap().to_mask();
    assert_eq!(served.mask.decode().unwrap(), offline);
    assert_eq!(served.mask, offline.to_rle());

    // Mask feedback through the query flag matches an explicit mask prompt.
    let fb = {
        let (status, v) =
            call(&app, "POST", &format!("/sessions/{}/prompts?feedback=true", s.id), p.to_json().into_bytes()).await;
        assert_eq!(status, StatusCode::OK);
        serde_json::from_value::<MaskResponse>(v).unwrap()
    };
    let with_mask = PromptSet { mask: Some(offline), ..scaled };
    assert_eq!(fb.mask.decode().unwrap(), model.forward(&input, &with_mask).unwrap().to_mask());
}

#[tokio::test]
async fn gt_upload_enables_iou() {
    let app = router(state(1 << 20));
    let s = create(&app, png(32, 32)).await;
    let gt = Mask::from_fn(32, 32, |r, c| r < 16 && c < 20);
    let (status, _) = call(&app, "PUT", &format!("/sessions/{}/gt", s.id), mask_png(&gt)).await;
    assert_eq!(status, StatusCode::OK);
    let r = submit(&app, &s.id, &PromptSet::from_clicks([Click::positive(5, 5)])).await;
    let served = r.mask.decode().unwrap();
    let want = promptseg::eval::iou(&served, &gt.resize_nearest(64, 64)).unwrap();
    assert_eq!(r.iou, Some(want));

    let (status, _) = call(&app, "PUT", &format!("/sessions/{}/gt", s.id), mask_png(&Mask::empty(5, 5))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn eviction_reencodes_bitwise() {
    // Room for exactly one embedding: 8×8 tokens × 32 dims × 4 bytes.
    let st = state(64 * 32 * 4);
    let app = router(st.clone());
    let a = create(&app, png(64, 64)).await;
    let before = st.embedding(&a.id).await.unwrap();
    let b = create(&app, png(50, 70)).await;
    assert!(!st.is_cached(&a.id));
    assert!(st.is_cached(&b.id));
    assert_eq!(st.cache_stats().2, 1);

    let p = PromptSet::from_clicks([Click::positive(10, 10)]);
    let served = submit(&app, &a.id, &p).await;
    assert_eq!(st.reencodes(), 1);
    let after = st.embedding(&a.id).await.unwrap();
    assert_eq!(*before, *after);
    let model = st.model().unwrap();
    assert_eq!(served.mask, model.predict(&before, &p).unwrap().to_mask().to_rle());

    // Re-encoding `a` pushed `b` out in turn.
    assert!(!st.is_cached(&b.id));
    let r1 = submit(&app, &b.id, &p).await;
    assert_eq!(st.reencodes(), 2);
    assert!(st.evict(&b.id));
    let r2 = submit(&app, &b.id, &p).await;
    assert_eq!(st.reencodes(), 3);
    assert_eq!(r1.mask, r2.mask);
}

#[tokio::test]
async fn concurrent_sessions() {
    let st = state(1 << 20);
    let app = router(st.clone());
    let mut ids = Vec::new();
    for i in 0..4 {
        ids.push(create(&app, png(40 + i, 60)).await.id);
    }
    let p = PromptSet::from_clicks([Click::positive(12, 30)]);
    let tasks: Vec<_> = ids
        .iter()
        .cycle()
        .take(16)
        .map(|id| {
            let (app, id, p) = (app.clone(), id.clone(), p.clone());
            tokio::spawn(async move { submit(&app, &id, &p).await })
        })
        .collect();
    let mut by_id: std::collections::HashMap<usize, Rle> = Default::default();
    for (i, t) in tasks.into_iter().enumerate() {
        let r = t.await.unwrap();
        let prev = by_id.entry(i % 4).or_insert_with(|| r.mask.clone());
        assert_eq!(*prev, r.mask);
    }
    assert_eq!(st.session_count(), 4);
}

#[test]
fn config_file_and_env_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("serve.toml");
    std::fs::write(&path, "ckpt = \"model.ckpt\"\naddr = \"0.0.0.0:9000\"\n").unwrap();
    let cfg = ServiceConfig::from_toml(&std::fs::read_to_string(&path).unwrap()).unwrap();
    assert_eq!(cfg.addr, "0.0.0.0:9000");
    assert_eq!(cfg.cache_bytes, promptseg_server::config::DEFAULT_CACHE_BYTES);

    let mut over = cfg.clone();
    over.apply_overrides(|k| match k {
        "PROMPTSEG_ADDR" => Some("127.0.0.1:1".into()),
        "PROMPTSEG_CACHE_BYTES" => Some("1024".into()),
        _ => None,
    })
    .unwrap();
    assert_eq!((over.addr.as_str(), over.cache_bytes), ("127.0.0.1:1", 1024));
    assert_eq!(over.ckpt, cfg.ckpt);

    let mut bad = cfg;
    assert!(bad.apply_overrides(|k| (k == "PROMPTSEG_CACHE_BYTES").then(|| "lots".into())).is_err());
    assert!(ServiceConfig::from_toml("port = 3").is_err());
}

#[test]
fn checkpoint_state_hashes_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = model();
    promptseg::model::save_checkpoint(&path, &m, None).unwrap();
    let st = AppState::from_checkpoint(&path, 1 << 20).unwrap();
    use sha2::Digest;
    assert_eq!(st.fingerprint(), hex::encode(sha2::Sha256::digest(std::fs::read(&path).unwrap())));
    assert_eq!(st.model().unwrap().params(), m.params());
    assert!(AppState::from_checkpoint(&dir.path().join("missing"), 1).is_err());
}
