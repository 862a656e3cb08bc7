use std::collections::HashSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use bridgelab::feedback::PreferenceEntry;
use bridgelab::sampler::{candidate_id, Candidate, CandidateInfo, CandidateInput};
use bridgelab::Image;
use bridgelab_service::hub::{MatchupView, StatusView};
use bridgelab_service::server::{router, AppState};
use bridgelab_service::{export_prefs, CandidateStore, Hub};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// `groups` groups with `per_group` flat candidates each; candidate `c` has
/// pixel value `0.05 * (c + 1)`.
fn make_store(dir: &Path, groups: u32, per_group: u32) -> Arc<CandidateStore> {
    let mut inputs = Vec::new();
    let mut cands = Vec::new();
    for g in 0..groups {
        inputs.push(CandidateInput {
            z0: Image::from_fn(8, 8, |x, y| 0.01 * (x + y + g as usize) as f64),
            subject: 10 + g,
            slice: 3,
        });
        for c in 0..per_group {
            cands.push(Candidate {
                info: CandidateInfo {
                    id: candidate_id(10 + g, 3, c, 0),
                    subject: 10 + g,
                    slice: 3,
                    input: g as usize,
                    checkpoint: c,
                    scale: 1.0,
                    seed: 0,
                },
                image: Image::filled(8, 8, 0.05 * (c + 1) as f64),
            });
        }
    }
    Arc::new(CandidateStore::create(dir, &inputs, &cands).unwrap())
}

fn app(dir: &Path) -> (Router, AppState) {
    let store = Arc::new(CandidateStore::open(dir).unwrap());
    let state = AppState::new(Hub::open(store, 5).unwrap());
    (router(state.clone()), state)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn post_choice(body: Value) -> Request<Body> {
    Request::post("/api/choice")
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn next(app: &Router, rater: &str) -> Option<MatchupView> {
    let (status, body) = call(app, get(&format!("/api/next?rater={rater}"))).await;
    match status {
        StatusCode::OK => Some(serde_json::from_slice(&body).unwrap()),
        StatusCode::NO_CONTENT => None,
        s => panic!("unexpected status {s}"),
    }
}

fn id_from_url(url: &str) -> &str {
    url.strip_prefix("/img/").unwrap().strip_suffix(".png").unwrap()
}

/// Picks the side with the lower checkpoint index (darker image).
fn darker(view: &MatchupView) -> &'static str {
    let ck = |url: &str| -> u32 { id_from_url(url).rsplit("_c").next().unwrap().split('_').next().unwrap().parse().unwrap() };
    if ck(&view.left_png_url) < ck(&view.right_png_url) {
        "left"
    } else {
        "right"
    }
}

#[tokio::test]
async fn four_candidate_tournament_takes_three_choices() {
    let dir = tempfile::tempdir().unwrap();
    make_store(dir.path(), 1, 4);
    let (app, _) = app(dir.path());
    let mut choices = 0;
    while let Some(view) = next(&app, "alice").await {
        assert_eq!(view.group, "s10_z3");
        assert!((0.0..1.0).contains(&view.progress));
        let (status, _) = call(
            &app,
            post_choice(json!({"matchup_id": view.matchup_id, "winner": darker(&view), "rater": "alice"})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        choices += 1;
    }
    assert_eq!(choices, 3);
    let (status, body) = call(&app, get("/api/status")).await;
    assert_eq!(status, StatusCode::OK);
    let st: StatusView = serde_json::from_slice(&body).unwrap();
    assert_eq!(st.completed, 1);
    assert!(st.groups[0].complete);
    assert_eq!(st.groups[0].pool_size, 1);
    assert_eq!(st.groups[0].winner.as_deref(), Some("s10_z3_c0_w0"));

    let store = CandidateStore::open(dir.path()).unwrap();
    let text = std::fs::read_to_string(store.prefs_path()).unwrap();
    let entry: PreferenceEntry = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(entry.r, 0);
    assert_eq!(entry.winner.id, "s10_z3_c0_w0");
    let pairs = export_prefs(&store.prefs_path(), &store).unwrap();
    assert_eq!(pairs.len(), 1);
    // z0 comes back bit-identical to the stored input.
    let stored = bridgelab::imageio::load_sbim(store.input_path(0)).unwrap();
    assert_eq!(pairs[0].z0, stored);
}

#[tokio::test]
async fn duplicate_choice_is_409_and_unknown_is_404() {
    let dir = tempfile::tempdir().unwrap();
    make_store(dir.path(), 1, 3);
    let (app, _) = app(dir.path());
    let view = next(&app, "bob").await.unwrap();
    let body = json!({"matchup_id": view.matchup_id, "winner": "left", "rater": "bob"});
    assert_eq!(call(&app, post_choice(body.clone())).await.0, StatusCode::OK);
    assert_eq!(call(&app, post_choice(body)).await.0, StatusCode::CONFLICT);
    let unknown = json!({"matchup_id": "s99_z9_m0", "winner": "left", "rater": "bob"});
    assert_eq!(call(&app, post_choice(unknown)).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn malformed_requests_are_400() {
    let dir = tempfile::tempdir().unwrap();
    make_store(dir.path(), 1, 3);
    let (app, _) = app(dir.path());
    assert_eq!(call(&app, get("/api/next")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&app, get("/api/next?rater=")).await.0, StatusCode::BAD_REQUEST);
    let bad = [
        json!({"matchup_id": "s10_z3_m0", "winner": "up", "rater": "x"}),
        json!({"matchup_id": "s10_z3_m0", "winner": "left"}),
        json!({"matchup_id": "s10_z3_m0", "winner": "left", "rater": " "}),
    ];
    for b in bad {
        assert_eq!(call(&app, post_choice(b)).await.0, StatusCode::BAD_REQUEST);
    }
    let raw = Request::post("/api/choice").body(Body::from("not json")).unwrap();
    assert_eq!(call(&app, raw).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn images_render_as_png() {
    let dir = tempfile::tempdir().unwrap();
    make_store(dir.path(), 1, 2);
    let (app, _) = app(dir.path());
    let view = next(&app, "carol").await.unwrap();
    let resp = app.clone().oneshot(get(&view.left_png_url)).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/png");
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&bytes[..8], b"\x89PNG\r\n\x1a\n");
    assert_eq!(call(&app, get("/img/nope.png")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/img/s10_z3_c0_w0.jpg")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(call(&app, get("/img/..%2Findex.png")).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_raters_never_share_a_matchup() {
    let dir = tempfile::tempdir().unwrap();
    make_store(dir.path(), 6, 5);
    let (app, _) = app(dir.path());
    let mut tasks = Vec::new();
    for k in 0..6 {
        let app = app.clone();
        tasks.push(tokio::spawn(async move {
            let rater = format!("r{k}");
            let mut seen = Vec::new();
            while let Some(view) = next(&app, &rater).await {
                seen.push(view.matchup_id.clone());
                let (status, _) = call(
                    &app,
                    post_choice(json!({"matchup_id": view.matchup_id, "winner": darker(&view), "rater": rater})),
                )
                .await;
                assert_eq!(status, StatusCode::OK, "{rater} lost {}", view.matchup_id);
            }
            seen
        }));
    }
    let mut all = Vec::new();
    for t in tasks {
        all.extend(t.await.unwrap());
    }
    let unique: HashSet<&String> = all.iter().collect();
    assert_eq!(unique.len(), all.len(), "a matchup was dispatched twice");
    assert_eq!(all.len(), 6 * 4);
    let (_, body) = call(&app, get("/api/status")).await;
    let st: StatusView = serde_json::from_slice(&body).unwrap();
    assert_eq!(st.completed, 6);
    assert!(st.groups.iter().all(|g| g.winner.as_deref().is_some_and(|w| w.ends_with("_c0_w0"))));
}

#[tokio::test]
async fn restart_resumes_from_the_log() {
    let dir = tempfile::tempdir().unwrap();
    make_store(dir.path(), 2, 4);
    let (first, _) = app(dir.path());
    let mut decided = Vec::new();
    for _ in 0..3 {
        let view = next(&first, "dan").await.unwrap();
        let (status, _) = call(
            &first,
            post_choice(json!({"matchup_id": view.matchup_id, "winner": darker(&view), "rater": "dan"})),
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        decided.push(view.matchup_id);
    }
    let in_flight = next(&first, "dan").await.unwrap();
    let (_, before) = call(&first, get("/api/status")).await;
    drop(first);

    let (second, _) = app(dir.path());
    let (_, after) = call(&second, get("/api/status")).await;
    assert_eq!(before, after);
    // Re-posting a decision from before the restart is still rejected.
    let replay = json!({"matchup_id": decided[0], "winner": "left", "rater": "dan"});
    assert_eq!(call(&second, post_choice(replay)).await.0, StatusCode::CONFLICT);
    // The in-flight matchup is offered again, unchanged.
    let mut offered = Vec::new();
    for rater in ["e1", "e2"] {
        offered.extend(next(&second, rater).await);
    }
    assert!(offered.contains(&in_flight));
    // Finish everything; the total count of decisions matches pool sizes.
    let mut more = 0;
    for v in offered {
        call(&second, post_choice(json!({"matchup_id": v.matchup_id, "winner": darker(&v), "rater": "e"}))).await;
        more += 1;
    }
    while let Some(v) = next(&second, "e").await {
        call(&second, post_choice(json!({"matchup_id": v.matchup_id, "winner": darker(&v), "rater": "e"}))).await;
        more += 1;
    }
    assert_eq!(decided.len() + more, 2 * 3);
    let log = std::fs::read_to_string(dir.path().join("matchups.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 6);
}
