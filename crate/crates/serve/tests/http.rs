mod common;

use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use radfield::mask::{mask_file_name, MaskSet};
use radfield::pipeline::{JobPhase, JobStatus, ProviderConfig};
use radfield_serve::http::{router, AppState};
use radfield_serve::ops::{load_field, maskset_id, scene_cameras};
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{argv, fixture, RECT};

fn app(workdir: &std::path::Path) -> Router {
    let f = fixture();
    let field = load_field(&f.ckpt).unwrap();
    let (cameras, dataset) = scene_cameras(Some(&f.data), 0, 0).unwrap();
    let state = AppState::new(
        field,
        cameras,
        dataset,
        workdir.to_path_buf(),
        ProviderConfig::default().providers().unwrap(),
    );
    router(Arc::new(state))
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Option<String>, Vec<u8>) {
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let ctype = res
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let body = to_bytes(res.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, ctype, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn json_body(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

fn assert_api_error(status: StatusCode, body: &[u8], want: StatusCode, code: &str) {
    assert_eq!(status, want, "{}", String::from_utf8_lossy(body));
    let v = json_body(body);
    assert_eq!(v["code"], code);
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(v.get("detail").is_some());
}

#[tokio::test]
async fn views_render_png_or_base64() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    for kind in ["rgb", "feature_pca", "depth"] {
        let (status, ctype, body) = send(&app, get(&format!("/views?i=1&kind={kind}"))).await;
        assert_eq!(status, StatusCode::OK, "{kind}");
        assert_eq!(ctype.as_deref(), Some("image/png"));
        assert_eq!(&body[1..4], b"PNG");
    }
    let req = Request::get("/views?i=0&kind=rgb")
        .header("accept", "application/json")
        .body(Body::empty())
        .unwrap();
    let (status, _, body) = send(&app, req).await;
    assert_eq!(status, StatusCode::OK);
    let png = B64.decode(json_body(&body)["png_b64"].as_str().unwrap()).unwrap();
    assert_eq!(&png[1..4], b"PNG");

    let (status, _, body) = send(&app, get("/views?i=0&kind=xray")).await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
    let (status, _, body) = send(&app, get("/views?i=99&kind=rgb")).await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
    let (status, _, body) = send(&app, get("/views?kind=rgb")).await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
    let (status, _, body) = send(&app, get("/views?i=0&kind=mask")).await;
    assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
}

#[tokio::test]
async fn mask_preview_matches_cli_bytes() {
    let f = fixture();
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let cli_out = work.path().join("cli_masks");
    let rect = RECT.map(|v| v.to_string()).join(",");
    let code = radfield_serve::cli::run(argv(&[
        "mask",
        "--ckpt",
        f.ckpt.to_str().unwrap(),
        "--data",
        f.data.to_str().unwrap(),
        "--view",
        "0",
        "--rect",
        &rect,
        "--alpha",
        "0.85",
        "--out",
        cli_out.to_str().unwrap(),
    ]));
    assert_eq!(code, 0);
    let cli_png = std::fs::read(cli_out.join(mask_file_name(0))).unwrap();

    let sel = json!({ "view": 0, "rect": RECT, "alpha": 0.85 });
    let started = Instant::now();
    let (status, _, body) = send(&app, post("/mask/preview", sel.clone())).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let first = started.elapsed();
    let v = json_body(&body);
    let http_png = B64.decode(v["mask_png_b64"].as_str().unwrap()).unwrap();
    assert_eq!(http_png, cli_png);
    let cli_set = MaskSet::load(&cli_out).unwrap();
    assert_eq!(v["pixel_count"], cli_set.masks[0].count());
    let hist: Vec<u64> = serde_json::from_value(v["sim_histogram"].clone()).unwrap();
    assert_eq!(hist.iter().sum::<u64>() as usize, common::RES * common::RES);

    // Second call is served from the feature cache.
    let started = Instant::now();
    let (status, _, _) = send(&app, post("/mask/preview", sel.clone())).await;
    assert_eq!(status, StatusCode::OK);
    assert!(started.elapsed() < Duration::from_secs(2), "cached preview took {:?} (first {first:?})", started.elapsed());

    // Commit stores the same masks the CLI wrote, under the same id.
    let (status, _, body) = send(&app, post("/mask/commit", sel)).await;
    assert_eq!(status, StatusCode::OK);
    let id = json_body(&body)["maskset_id"].as_str().unwrap().to_string();
    assert_eq!(id, maskset_id(&cli_set));
    let committed = work.path().join("masksets").join(&id);
    for i in 0..cli_set.masks.len() {
        assert_eq!(
            std::fs::read(committed.join(mask_file_name(i))).unwrap(),
            std::fs::read(cli_out.join(mask_file_name(i))).unwrap()
        );
    }
    let (status, _, body) = send(&app, get("/masksets")).await;
    assert_eq!(status, StatusCode::OK);
    let list = json_body(&body);
    assert_eq!(list["masksets"][0]["maskset_id"], id.as_str());
    let (status, ctype, _) = send(&app, get("/views?i=2&kind=mask")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
}

#[tokio::test]
async fn bad_selections_are_rejected() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let (status, _, body) = send(&app, post("/mask/preview", json!({ "view": 0, "rect": [5, 5, 5, 9] }))).await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
    let (status, _, body) = send(&app, post("/mask/preview", json!({ "view": 7, "rect": [1, 1, 3, 3] }))).await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
    let req = Request::post("/mask/preview").body(Body::from("{not json")).unwrap();
    let (status, _, body) = send(&app, req).await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
}

#[tokio::test]
async fn unknown_routes_and_jobs_are_not_found() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let (status, _, body) = send(&app, get("/job/job-9999")).await;
    assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
    let (status, _, body) = send(&app, get("/job/job-9999/preview")).await;
    assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
    let (status, _, body) = send(&app, get("/nowhere")).await;
    assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
    let (status, _, body) = send(&app, Request::delete("/prompts").body(Body::empty()).unwrap()).await;
    assert_api_error(status, &body, StatusCode::METHOD_NOT_ALLOWED, "bad_request");
}

#[tokio::test]
async fn prompts_list_the_toy_registry() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let (status, _, body) = send(&app, get("/prompts")).await;
    assert_eq!(status, StatusCode::OK);
    let v = json_body(&body);
    let prompts: Vec<&str> = v["prompts"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["prompt"].as_str().unwrap())
        .collect();
    assert!(prompts.contains(&"a blue sphere on leaves"));
    assert!(prompts.contains(&"a small blue sphere"));
    assert!(v["palettes"].as_array().unwrap().iter().any(|p| p == "leaves"));
}

async fn status_of(app: &Router, id: &str) -> JobStatus {
    let (status, _, body) = send(app, get(&format!("/job/{id}"))).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_slice(&body).unwrap()
}

async fn commit(app: &Router) -> String {
    let (status, _, body) = send(app, post("/mask/commit", json!({ "view": 0, "rect": RECT, "alpha": 0.85 }))).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    json_body(&body)["maskset_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn edit_job_lifecycle() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let ms = commit(&app).await;
    let req = json!({
        "maskset_id": ms,
        "prompt": "a blue sphere on leaves",
        "bgt": "leaves",
        "lambdas": { "unmask": 100.0, "clip": 1.0 },
        "steps": 12,
        "pretrain_steps": 4,
        "status_every": 2,
        "n_samples": 16,
        "seed": 3,
    });
    let (status, _, body) = send(&app, post("/edit", req)).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    let id = json_body(&body)["job_id"].as_str().unwrap().to_string();

    let mut steps = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(300);
    let last = loop {
        let s = status_of(&app, &id).await;
        steps.push(s.step);
        if s.phase.is_terminal() {
            break s;
        }
        assert!(Instant::now() < deadline, "job did not finish");
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(last.phase, JobPhase::Done, "{:?}", last.message);
    assert_eq!(last.step, 16);
    assert_eq!(last.total_steps, 16);
    assert!(steps.windows(2).all(|w| w[0] <= w[1]), "{steps:?}");
    let dir = work.path().join("jobs").join(&id);
    assert!(dir.join("final.rpck").exists());
    assert!(dir.join("loss.csv").exists());
    assert!(std::fs::read_dir(dir.join("previews")).unwrap().count() > 0);
    let (status, ctype, body) = send(&app, get(&format!("/job/{id}/preview"))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(&body[1..4], b"PNG");
}

#[tokio::test]
async fn second_edit_while_running_conflicts() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let ms = commit(&app).await;
    let long = json!({
        "maskset_id": ms,
        "prompt": "a green sphere",
        "steps": 400,
        "pretrain_steps": 0,
        "n_samples": 16,
    });
    let (status, _, body) = send(&app, post("/edit", long.clone())).await;
    assert_eq!(status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&body));
    let first = json_body(&body)["job_id"].as_str().unwrap().to_string();
    let (status, _, body) = send(&app, post("/edit", long)).await;
    assert_api_error(status, &body, StatusCode::CONFLICT, "conflict");
    assert_eq!(json_body(&body)["detail"]["running"], first.as_str());
    // Status reads stay available while the job runs.
    let s = status_of(&app, &first).await;
    assert_eq!(s.job_id, first);
}

#[tokio::test]
async fn edit_requests_are_validated() {
    let work = tempfile::tempdir().unwrap();
    let app = app(work.path());
    let ms = commit(&app).await;
    let (status, _, body) = send(&app, post("/edit", json!({ "maskset_id": ms, "prompt": "a castle" }))).await;
    assert_api_error(status, &body, StatusCode::UNPROCESSABLE_ENTITY, "config");
    let (status, _, body) = send(
        &app,
        post("/edit", json!({ "maskset_id": "ms-missing", "prompt": "a green sphere" })),
    )
    .await;
    assert_api_error(status, &body, StatusCode::NOT_FOUND, "not_found");
    let (status, _, body) = send(
        &app,
        post("/edit", json!({ "maskset_id": "../etc", "prompt": "a green sphere" })),
    )
    .await;
    assert_api_error(status, &body, StatusCode::BAD_REQUEST, "bad_request");
    let (status, _, body) = send(
        &app,
        post(
            "/edit",
            json!({ "maskset_id": ms, "prompt": "a green sphere", "lambdas": { "unmask": -1.0 } }),
        ),
    )
    .await;
    assert_api_error(status, &body, StatusCode::UNPROCESSABLE_ENTITY, "config");
}
