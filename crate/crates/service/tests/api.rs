use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::routing::post;
use axum::{Json, Router};
use http_body_util::BodyExt;
use icr_core::bench::{Benchmark, BenchmarkSpec, DimensionSpec};
use icr_core::memory::ProgressMemoryLong;
use icr_core::reasoner::{IntentReply, QuestionReply, Reasoner, ReasonerRequest, ReflectionReply};
use icr_core::reflection::Satisfaction;
use icr_core::session::{EngineContext, SessionTrace};
use icr_core::channels::ChannelConfig;
use icr_service::{router, AppState, HttpReasoner, ServiceConfig};
use serde_json::{json, Value};
use tower::ServiceExt;

fn bench() -> Benchmark {
    Benchmark::generate(&BenchmarkSpec {
        gallery_size: 80,
        dimensions: vec![
            DimensionSpec { name: "category".into(), cardinality: 4 },
            DimensionSpec { name: "color".into(), cardinality: 4 },
            DimensionSpec { name: "scene".into(), cardinality: 4 },
            DimensionSpec { name: "lighting".into(), cardinality: 2 },
        ],
        query_count: 5,
        ..BenchmarkSpec::default()
    })
    .unwrap()
}

fn context(b: &Benchmark) -> EngineContext {
    let g = Arc::new(b.gallery.clone());
    let pm_l = Arc::new(ProgressMemoryLong::build(&g));
    EngineContext::synthetic(g, pm_l, &ChannelConfig::default())
}

fn app_with(ctx: EngineContext, config: ServiceConfig) -> (Router, Arc<AppState>) {
    let state = Arc::new(AppState::new(config).with_gallery("synthetic", ctx));
    (router(state.clone()), state)
}

fn app() -> (Router, Arc<AppState>, Benchmark) {
    let b = bench();
    let (r, s) = app_with(context(&b), ServiceConfig::default());
    (r, s, b)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
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

fn create_body(b: &Benchmark) -> Value {
    let q = &b.queries[0];
    json!({
        "gallery_ref": "synthetic",
        "reference_item_id": q.reference_id,
        "u0_edit": q.initial_edit,
    })
}

/// A modify that names one goal value the presented item lacks.
fn modify_toward(b: &Benchmark, view: &Value) -> Value {
    let target = b.gallery.get(&b.queries[0].target_id).unwrap();
    let shown = view["top_k"][0]["attributes"].as_object().unwrap();
    let (dim, value) = target
        .attributes
        .iter()
        .find(|(d, v)| shown.get(*d).and_then(Value::as_str) != Some(v.as_str()))
        .unwrap_or_else(|| target.attributes.iter().next().unwrap());
    json!({ "action": "modify", "payload_positive": [{ "dimension": dim, "value": value }] })
}

#[tokio::test]
async fn health_and_galleries() {
    let (app, _, b) = app();
    let (s, v) = call_json(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["reasoner"], false);
    let (s, v) = call_json(&app, "GET", "/galleries", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v[0]["gallery_ref"], "synthetic");
    assert_eq!(v[0]["items"], b.gallery.len());
    assert_eq!(v[0]["values"]["lighting"].as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn three_turn_session_then_found() {
    let (app, _, b) = app();
    let (s, view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    assert_eq!(s, StatusCode::OK, "{view}");
    assert_eq!(view["turn"], 0);
    assert_eq!(view["state"], "active");
    assert_eq!(view["max_turns"], 5);
    assert_eq!(view["top_k"].as_array().unwrap().len(), 10);
    assert!(view["top_k"][0]["caption"].as_str().unwrap().contains("category="));
    assert!(view.get("goal").is_none());
    let id = view["session_id"].as_str().unwrap().to_string();

    let mut last = view;
    for turn in 1..=3 {
        let fb = modify_toward(&b, &last);
        let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb)).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        assert_eq!(v["turn"], turn);
        last = v;
    }

    let (s, raw) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(s, StatusCode::OK);
    let trace: SessionTrace = serde_json::from_slice(&raw).unwrap();
    assert_eq!(trace.turns.len(), 4);
    assert_eq!(trace.turns.iter().filter(|t| t.feedback.is_some()).count(), 3);
    assert_eq!(serde_json::to_vec(&trace).unwrap(), raw);

    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/found"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "found");

    let fb = modify_toward(&b, &last);
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb)).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "terminated");
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/found"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn budget_exhausts_session() {
    let b = bench();
    let mut config = ServiceConfig::default();
    config.engine.max_turns = 2;
    let (app, _) = app_with(context(&b), config);
    let (_, mut view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let id = view["session_id"].as_str().unwrap().to_string();
    for _ in 0..2 {
        let fb = modify_toward(&b, &view);
        view = call_json(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb)).await.1;
    }
    assert_eq!(view["state"], "exhausted");
    let fb = modify_toward(&b, &view);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb)).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn error_statuses() {
    let (app, _, b) = app();
    let (s, v) = call_json(&app, "POST", "/sessions/nope/feedback", Some(json!({"action": "rewrite"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unknown_session");
    let (s, _) = call(&app, "GET", "/sessions/nope/history", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, _) = call(&app, "POST", "/sessions", Some(json!({"gallery_ref": "synthetic"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut unknown = create_body(&b);
    unknown["reference_item_id"] = json!("missing");
    let (s, _) = call(&app, "POST", "/sessions", Some(unknown)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut other = create_body(&b);
    other["gallery_ref"] = json!("elsewhere");
    let (s, _) = call(&app, "POST", "/sessions", Some(other)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let mut empty = create_body(&b);
    empty["u0_edit"] = json!({});
    let (s, _) = call(&app, "POST", "/sessions", Some(empty)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let id = view["session_id"].as_str().unwrap();
    let uri = format!("/sessions/{id}/feedback");
    for bad in [
        json!({"action": "shout"}),
        json!({"action": "answer", "payload_positive": [{"dimension": "color", "value": "x"}]}),
        json!({"action": "accept", "payload_positive": [{"dimension": "color", "value": "x"}]}),
        json!({"action": "modify", "raw_text": "make it red"}),
    ] {
        let (s, v) = call_json(&app, "POST", &uri, Some(bad.clone())).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{bad} -> {v}");
    }
    let req = Request::builder()
        .method("POST")
        .uri(&uri)
        .body(Body::from("{not json"))
        .unwrap();
    assert_eq!(app.clone().oneshot(req).await.unwrap().status(), StatusCode::BAD_REQUEST);
    // a rejected request leaves the session usable
    assert_eq!(call_json(&app, "GET", &format!("/sessions/{id}/history"), None).await.1["turns"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn goal_only_in_sim_replay() {
    let (app, _, b) = app();
    let target = b.queries[0].target_id.clone();
    let mut human = create_body(&b);
    human["target_item_id"] = json!(target);
    let (s, _) = call(&app, "POST", "/sessions", Some(human)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut missing = create_body(&b);
    missing["mode"] = json!("sim_replay");
    let (s, _) = call(&app, "POST", "/sessions", Some(missing)).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let mut replay = create_body(&b);
    replay["mode"] = json!("sim_replay");
    replay["target_item_id"] = json!(target);
    let (s, v) = call_json(&app, "POST", "/sessions", Some(replay)).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["mode"], "sim_replay");
    assert_eq!(v["goal"]["item_id"], target);

    let (_, raw) = call(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let v: Value = serde_json::from_slice(&raw).unwrap();
    assert_eq!(v["mode"], "human");
    assert!(v.get("goal").is_none());
}

#[tokio::test]
async fn idle_sessions_are_evicted() {
    let b = bench();
    let config = ServiceConfig {
        idle_timeout: Duration::from_secs(3600),
        ..ServiceConfig::default()
    };
    let (app, state) = app_with(context(&b), config);
    let (_, view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let id = view["session_id"].as_str().unwrap();
    assert_eq!(state.evict_idle(Instant::now()), 0);
    assert_eq!(state.evict_idle(Instant::now() + Duration::from_secs(3601)), 1);
    let (s, _) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

struct SlowReasoner(Duration);

impl Reasoner for SlowReasoner {
    fn decompose(&self, _: &ReasonerRequest) -> icr_core::Result<IntentReply> {
        std::thread::sleep(self.0);
        Err(icr_core::Error::Invalid("offline".into()))
    }

    fn reflect(&self, _: &ReasonerRequest) -> icr_core::Result<ReflectionReply> {
        Err(icr_core::Error::Invalid("offline".into()))
    }

    fn ask(&self, _: &ReasonerRequest) -> icr_core::Result<QuestionReply> {
        Err(icr_core::Error::Invalid("offline".into()))
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_feedback_gets_conflict() {
    let b = bench();
    let ctx = context(&b).with_reasoner(Arc::new(SlowReasoner(Duration::from_millis(400))));
    let (app, _) = app_with(ctx, ServiceConfig::default());
    let (_, view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let id = view["session_id"].as_str().unwrap().to_string();
    let mut fb = modify_toward(&b, &view);
    fb["raw_text"] = json!("closer to the goal please");
    let uri = format!("/sessions/{id}/feedback");
    let (a, c) = tokio::join!(
        call(&app, "POST", &uri, Some(fb.clone())),
        async {
            tokio::time::sleep(Duration::from_millis(100)).await;
            call(&app, "POST", &uri, Some(fb.clone())).await
        }
    );
    let mut statuses = [a.0, c.0];
    statuses.sort();
    assert_eq!(statuses, [StatusCode::OK, StatusCode::CONFLICT]);
    let (_, hist) = call_json(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    assert_eq!(hist["turns"].as_array().unwrap().len(), 2);
}

async fn mock_reasoner(delay: Duration, lighting: String) -> String {
    let app = Router::new()
        .route(
            "/decompose",
            post(move |Json(req): Json<ReasonerRequest>| async move {
                tokio::time::sleep(delay).await;
                assert_eq!(req.turn, 1);
                let token = format!("lighting={lighting}");
                Json(json!({
                    "reasoning": "user wants the lighting changed",
                    "is_answer_to_prev_question": false,
                    "has_edit_intent": true,
                    "search_query_info": token,
                    "edit_query_info": token,
                }))
            }),
        )
        .route(
            "/reflect",
            post(|| async {
                Json(json!({
                    "reasoning": "not this one",
                    "satisfaction_level": "negative",
                    "positive_constraints": [],
                    "negative_constraints": [],
                }))
            }),
        )
        .route("/ask", post(|| async { Json(json!({"reasoning_brief": "b", "question": "Which lighting?"})) }));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    format!("http://{addr}")
}

fn lighting_value(b: &Benchmark, index: usize) -> String {
    let mut values: Vec<&String> = b.gallery.items().iter().map(|it| &it.attributes["lighting"]).collect();
    values.sort();
    values.dedup();
    values[index].clone()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn http_reasoner_drives_a_turn() {
    let b = bench();
    let wanted = lighting_value(&b, 1);
    let base = mock_reasoner(Duration::ZERO, wanted.clone()).await;
    let reasoner = HttpReasoner::new(base, Duration::from_secs(5)).unwrap();
    let ctx = context(&b).with_reasoner(Arc::new(reasoner));
    let (app, _) = app_with(ctx, ServiceConfig::default());
    let (s, v) = call_json(&app, "GET", "/health", None).await;
    assert_eq!((s, v["reasoner"].clone()), (StatusCode::OK, json!(true)));
    let (_, view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let id = view["session_id"].as_str().unwrap().to_string();
    let fb = json!({"action": "modify", "raw_text": "switch the lighting"});
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb)).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let (_, raw) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let trace: SessionTrace = serde_json::from_slice(&raw).unwrap();
    let turn = &trace.turns[1];
    assert_eq!(turn.search.as_ref().unwrap().positive().get("lighting"), Some(&wanted), "{wanted}");
    assert_eq!(turn.satisfaction, Some(Satisfaction::Negative));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn reasoner_timeout_falls_back_to_rules() {
    let b = bench();
    let base = mock_reasoner(Duration::from_secs(3), lighting_value(&b, 0)).await;
    let reasoner = HttpReasoner::new(base, Duration::from_millis(200)).unwrap();
    let ctx = context(&b).with_reasoner(Arc::new(reasoner));
    let (app, _) = app_with(ctx, ServiceConfig::default());
    let (_, view) = call_json(&app, "POST", "/sessions", Some(create_body(&b))).await;
    let id = view["session_id"].as_str().unwrap().to_string();
    let mut fb = modify_toward(&b, &view);
    fb["raw_text"] = json!("closer please");
    let started = Instant::now();
    let (s, v) = call_json(&app, "POST", &format!("/sessions/{id}/feedback"), Some(fb.clone())).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert!(started.elapsed() < Duration::from_secs(3));
    let (_, raw) = call(&app, "GET", &format!("/sessions/{id}/history"), None).await;
    let trace: SessionTrace = serde_json::from_slice(&raw).unwrap();
    let c = &fb["payload_positive"][0];
    let search = trace.turns[1].search.as_ref().unwrap();
    assert_eq!(
        search.positive().get(c["dimension"].as_str().unwrap()).map(String::as_str),
        c["value"].as_str()
    );
}
