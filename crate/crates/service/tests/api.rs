use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use magicmix_core::io::image::encode_png;
use magicmix_core::io::shapes::{generate_shapes, shapes_vocabulary, ShapeKind, ShapesSpec, Texture};
use magicmix_core::magicmix::{conditional_from_k_max, layout_noises_from_image, MixConfig};
use magicmix_core::model::checkpoint::TrainingMeta;
use magicmix_core::model::unet::{perturbed_params, UNet, UNetConfig};
use magicmix_core::model::ModelCheckpoint;
use magicmix_core::par::Execution;
use magicmix_core::schedule::{NoiseSchedule, ScheduleFamily};
use magicmix_core::Prompt;
use magicmix_service::registry::{LoadedModel, Registry};
use magicmix_service::{build, ServiceConfig};

const SIZE: usize = 16;

fn spec() -> ShapesSpec {
    ShapesSpec {
        shapes: vec![ShapeKind::Circle, ShapeKind::Square],
        textures: vec![Texture::Solid, Texture::Striped],
        count_per_class: 2,
        seed: 3,
        image_size: SIZE,
    }
}

/// A tiny randomly initialized model: fast, and its outputs still depend on
/// every input, which is all the API contract needs.
fn write_model(dir: &Path) -> std::path::PathBuf {
    let vocab = shapes_vocabulary();
    let sched = NoiseSchedule::new(100, ScheduleFamily::Cosine).unwrap();
    let cfg = UNetConfig::tiny(vocab.len(), SIZE);
    let mut model = UNet::new(&cfg, sched, vocab, 1).unwrap();
    let p = perturbed_params(model.layout(), 2, 0.3);
    model.params_mut().copy_from_slice(&p);
    let path = dir.join("tiny.ckpt");
    ModelCheckpoint::from_model(&model, TrainingMeta::default()).save(&path).unwrap();
    path
}

struct Harness {
    app: Router,
    _dir: tempfile::TempDir,
}

fn config(data_dir: &Path, queue: usize) -> ServiceConfig {
    ServiceConfig {
        data_dir: data_dir.to_path_buf(),
        workers: 1,
        queue_capacity: queue,
        exec: Execution::Auto,
    }
}

fn registry(dir: &Path) -> Registry {
    let model = LoadedModel::load("tiny", &dir.join("tiny.ckpt")).unwrap();
    let data = generate_shapes(&spec(), Execution::Auto).unwrap();
    Registry::new(vec![model], vec![("toy".into(), data)], dir.join("data/uploads")).unwrap()
}

fn harness(queue: usize) -> Harness {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path());
    let (app, _) = build(registry(dir.path()), config(&dir.path().join("data"), queue)).unwrap();
    Harness { app, _dir: dir }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(serde_json::to_vec(&b).unwrap())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_done(app: &Router, id: &str) -> Value {
    for _ in 0..600 {
        let (s, v) = call_json(app, "GET", &format!("/v1/jobs/{id}"), None).await;
        assert_eq!(s, StatusCode::OK);
        match v["state"].as_str() {
            Some("done") => return v,
            Some("failed") => panic!("job failed: {v}"),
            _ => tokio::time::sleep(Duration::from_millis(20)).await,
        }
    }
    panic!("job {id} did not finish");
}

async fn submit(app: &Router, kind: &str, body: Value) -> String {
    let (s, v) = call_json(app, "POST", &format!("/v1/jobs/{kind}"), Some(body)).await;
    assert!(s == StatusCode::ACCEPTED || s == StatusCode::OK, "{s} {v}");
    v["id"].as_str().unwrap().to_string()
}

fn mix_body(nu: f64, k_min: f64) -> Value {
    json!({
        "layout": {"dataset_index": 0},
        "content": "striped",
        "config": {"nu": nu, "k_min_frac": k_min, "k_max_frac": 0.6, "steps": 10, "seed": 5},
    })
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_models_datasets() {
    let h = harness(4);
    let (s, v) = call_json(&h.app, "GET", "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert!(v["version"].is_string());
    let (_, v) = call_json(&h.app, "GET", "/v1/models", None).await;
    assert_eq!(v["models"][0]["name"], "tiny");
    assert_eq!(v["models"][0]["sample_shape"], json!([1, SIZE, SIZE]));
    let (_, v) = call_json(&h.app, "GET", "/v1/datasets", None).await;
    assert_eq!(v["datasets"][0]["count"], 8);
    let (s, png) = call(&h.app, "GET", "/v1/datasets/toy/images/3", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png.starts_with(b"\x89PNG"));
    let (s, _) = call(&h.app, "GET", "/v1/datasets/toy/images/99", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&h.app, "GET", "/v1/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn nu_one_is_pure_conditional_generation() {
    let h = harness(8);
    let a = submit(&h.app, "mix", mix_body(1.0, 0.3)).await;
    // At nu = 1 the window's lower edge is irrelevant: every step inside it
    // keeps the conditionally denoised state.
    let b = submit(&h.app, "mix", mix_body(1.0, 0.0)).await;
    assert_ne!(a, b);
    wait_done(&h.app, &a).await;
    wait_done(&h.app, &b).await;
    let (_, img_a) = call(&h.app, "GET", &format!("/v1/jobs/{a}/result/0"), None).await;
    let (_, img_b) = call(&h.app, "GET", &format!("/v1/jobs/{b}/result/0"), None).await;
    assert_eq!(img_a, img_b);

    // And both equal plain conditional denoising from the layout state at K_max.
    let dir = tempfile::tempdir().unwrap();
    let model = LoadedModel::load("tiny", &write_model(dir.path())).unwrap();
    let data = generate_shapes(&spec(), Execution::Auto).unwrap();
    let cfg: MixConfig = serde_json::from_value(mix_body(1.0, 0.3)["config"].clone()).unwrap();
    let y = Prompt::parse("striped", model.vocabulary()).unwrap();
    let layout = layout_noises_from_image(None, model.denoiser().schedule(), &data.images[0], None, &cfg).unwrap();
    let direct = conditional_from_k_max(model.denoiser(), &layout, &y, &cfg).unwrap();
    assert_eq!(img_a, encode_png(&direct).unwrap());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn sweep_cells_in_row_major_order() {
    let h = harness(4);
    let body = json!({
        "layout": {"prompt": "circle solid"},
        "content": "square",
        "config": {"steps": 8, "seed": 11},
        "grid": {"nu": [0.2, 0.5, 0.8], "k_max_frac": [0.5, 0.7, 0.9]},
    });
    let id = submit(&h.app, "sweep", body.clone()).await;
    let rec = wait_done(&h.app, &id).await;
    assert_eq!((rec["rows"].as_u64(), rec["cols"].as_u64()), (Some(3), Some(3)));
    let cells = rec["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 9);
    for (i, c) in cells.iter().enumerate() {
        assert_eq!(c["index"], i);
        assert_eq!(c["row"], i / 3);
        assert_eq!(c["col"], i % 3);
        assert_eq!(c["nu"], [0.2, 0.5, 0.8][i / 3]);
        assert_eq!(c["k_max_frac"], [0.5, 0.7, 0.9][i % 3]);
        assert_eq!(c["seed"], 11 + i as u64);
        let (s, png) = call(&h.app, "GET", &format!("/v1/jobs/{id}/result/{i}"), None).await;
        assert_eq!(s, StatusCode::OK);
        assert!(png.starts_with(b"\x89PNG"));
        assert_eq!(c["sha256"], magicmix_core::io::sha256_hex(&png));
    }
    let (s, _) = call(&h.app, "GET", &format!("/v1/jobs/{id}/result/9"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, png) = call(&h.app, "GET", &format!("/v1/jobs/{id}/result/montage"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(png.starts_with(b"\x89PNG"));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resubmission_is_idempotent_and_survives_restart() {
    let dir = tempfile::tempdir().unwrap();
    write_model(dir.path());
    let data_dir = dir.path().join("data");
    let body = mix_body(0.5, 0.3);
    let (id, first) = {
        let (app, _) = build(registry(dir.path()), config(&data_dir, 4)).unwrap();
        let id = submit(&app, "mix", body.clone()).await;
        wait_done(&app, &id).await;
        let (s, v) = call_json(&app, "POST", "/v1/jobs/mix", Some(body.clone())).await;
        assert_eq!(s, StatusCode::OK);
        assert_eq!(v["id"], id.as_str());
        assert_eq!(v["created"], false);
        let (_, img) = call(&app, "GET", &format!("/v1/jobs/{id}/result/0"), None).await;
        (id, img)
    };
    // A fresh service over the same directory serves the stored result, and
    // recomputing from scratch in a new directory gives the same bytes.
    let (app, _) = build(registry(dir.path()), config(&data_dir, 4)).unwrap();
    let rec = wait_done(&app, &id).await;
    assert_eq!(rec["request"]["config"]["nu"], 0.5);
    let (_, again) = call(&app, "GET", &format!("/v1/jobs/{id}/result/0"), None).await;
    assert_eq!(again, first);
    let (fresh, _) = build(registry(dir.path()), config(&dir.path().join("other"), 4)).unwrap();
    let id2 = submit(&fresh, "mix", body).await;
    assert_eq!(id2, id);
    wait_done(&fresh, &id2).await;
    let (_, recomputed) = call(&fresh, "GET", &format!("/v1/jobs/{id}/result/0"), None).await;
    assert_eq!(recomputed, first);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn invalid_requests_get_field_errors() {
    let h = harness(4);
    let (s, v) = call_json(
        &h.app,
        "POST",
        "/v1/jobs/mix",
        Some(json!({"layout": {"prompt": "blob"}, "content": "striped", "config": {"nu": 1.5}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let fields: Vec<&str> = v["error"]["fields"].as_array().unwrap().iter().map(|f| f["field"].as_str().unwrap()).collect();
    assert_eq!(fields, ["config.nu", "layout.prompt"]);

    let (s, v) = call_json(&h.app, "POST", "/v1/jobs/mix", Some(json!({"content": "striped"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"]["fields"][0]["field"], "body");

    let (s, _) = call_json(&h.app, "POST", "/v1/jobs/mix", Some(json!({"layout": {"dataset_index": 99}, "content": "striped"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call_json(&h.app, "POST", "/v1/jobs/mix", Some(json!({"layout": {"image_path": "/etc/passwd"}, "content": "striped"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = call_json(&h.app, "POST", "/v1/jobs/mix", Some(json!({"model": "nope", "layout": {"dataset_index": 0}, "content": "striped"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(&h.app, "GET", "/v1/jobs/0000", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call_json(
        &h.app,
        "POST",
        "/v1/jobs/sweep",
        Some(json!({"layout": {"dataset_index": 0}, "content": "striped", "grid": {"nu": []}})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn uploads_feed_mix_jobs() {
    let h = harness(4);
    let data = generate_shapes(&spec(), Execution::Auto).unwrap();
    let png = encode_png(&data.images[1]).unwrap();
    let req = Request::builder().method("POST").uri("/v1/uploads").body(Body::from(png.clone())).unwrap();
    let resp = h.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::CREATED);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    let upload = v["id"].as_str().unwrap().to_string();
    let by_upload = submit(&h.app, "mix", json!({"layout": {"upload": upload}, "content": "striped", "config": {"steps": 6}})).await;
    let inline = base64::engine::general_purpose::STANDARD.encode(&png);
    let by_inline = submit(&h.app, "mix", json!({"layout": {"png_base64": inline}, "content": "striped", "config": {"steps": 6}})).await;
    wait_done(&h.app, &by_upload).await;
    wait_done(&h.app, &by_inline).await;
    let (_, a) = call(&h.app, "GET", &format!("/v1/jobs/{by_upload}/result/0"), None).await;
    let (_, b) = call(&h.app, "GET", &format!("/v1/jobs/{by_inline}/result/0"), None).await;
    assert_eq!(a, b);
    let req = Request::builder().method("POST").uri("/v1/uploads").body(Body::from("not a png")).unwrap();
    assert_eq!(h.app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn full_queue_rejects_with_conflict() {
    let h = harness(1);
    let mut statuses = Vec::new();
    for seed in 0..6 {
        let body = json!({
            "layout": {"prompt": "circle solid"},
            "content": "square",
            "config": {"steps": 40, "seed": seed},
            "grid": {"nu": [0.1, 0.3, 0.5, 0.7, 0.9]},
        });
        let (s, _) = call_json(&h.app, "POST", "/v1/jobs/sweep", Some(body)).await;
        statuses.push(s);
    }
    assert!(statuses.contains(&StatusCode::CONFLICT), "{statuses:?}");
    assert_eq!(statuses[0], StatusCode::ACCEPTED);
    let (_, v) = call_json(&h.app, "GET", "/v1/health", None).await;
    assert!(v["queued"].as_u64().unwrap() <= 1);
    assert!(v["running"].as_u64().unwrap() <= 1);
}
