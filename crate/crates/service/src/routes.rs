use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use icr_core::intent::Question;
use icr_core::session::{Session, SessionState};
use icr_core::{EditInstruction, FeedbackMessage, Gallery};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::ApiError;
use crate::state::{AppState, Mode, SessionSlot};

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/galleries", get(galleries))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/found", post(found))
        .route("/sessions/{id}/history", get(history))
        .with_state(state)
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateSession {
    pub gallery_ref: String,
    pub reference_item_id: String,
    pub u0_edit: EditInstruction,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub target_item_id: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ItemCard {
    pub item_id: String,
    pub caption: String,
    pub attributes: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thumbnail: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RankedCard {
    pub rank: u32,
    pub score: f64,
    #[serde(flatten)]
    pub item: ItemCard,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub created_at: u64,
    pub mode: Mode,
    pub gallery_ref: String,
    pub state: SessionState,
    pub turn: u32,
    pub max_turns: u32,
    pub reference: ItemCard,
    pub presented: Option<String>,
    pub top_k: Vec<RankedCard>,
    pub question: Option<Question>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub goal: Option<ItemCard>,
}

fn card(gallery: &Gallery, id: &str) -> Result<ItemCard, ApiError> {
    let item = gallery
        .get(id)
        .ok_or_else(|| ApiError::Internal(format!("item `{id}` vanished from its gallery")))?;
    Ok(ItemCard {
        item_id: item.id.clone(),
        caption: item.caption(gallery.schema()),
        attributes: item.attributes.clone(),
        thumbnail: item.thumbnail.clone(),
    })
}

fn view(state: &AppState, slot: &SessionSlot, session: &Session) -> Result<SessionView, ApiError> {
    let gallery = &state.gallery(&slot.gallery_ref)?.gallery;
    let out = session.output();
    let top_k = out
        .fused
        .entries
        .iter()
        .take(state.config.top_k)
        .map(|e| {
            Ok(RankedCard {
                rank: e.rank,
                score: e.score,
                item: card(gallery, &e.item_id)?,
            })
        })
        .collect::<Result<_, ApiError>>()?;
    let goal = match (slot.mode, &slot.target) {
        (Mode::SimReplay, Some(t)) => Some(card(gallery, t)?),
        _ => None,
    };
    Ok(SessionView {
        session_id: slot.id.clone(),
        created_at: slot.created_at,
        mode: slot.mode,
        gallery_ref: slot.gallery_ref.clone(),
        state: out.state,
        turn: out.turn,
        max_turns: session.config().max_turns,
        reference: card(gallery, &session.memory().reference_item)?,
        presented: out.presented,
        top_k,
        question: out.question,
        goal,
    })
}

fn parse<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn health(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    Json(json!({
        "status": "ok",
        "sessions": state.session_count(),
        "reasoner": state.has_reasoner(),
    }))
}

async fn galleries(State(state): State<Arc<AppState>>) -> impl IntoResponse {
    let list: Vec<_> = state
        .galleries()
        .iter()
        .map(|(name, ctx)| {
            let g = &ctx.gallery;
            let mut values: BTreeMap<&str, std::collections::BTreeSet<&str>> = BTreeMap::new();
            for it in g.items() {
                for (d, v) in &it.attributes {
                    values.entry(d.as_str()).or_default().insert(v.as_str());
                }
            }
            json!({
                "gallery_ref": name,
                "items": g.len(),
                "seed": g.seed(),
                "content_hash": g.content_hash(),
                "dimensions": g.schema().dims(),
                "values": values,
                "reasoner": ctx.reasoner.is_some(),
            })
        })
        .collect();
    Json(list)
}

async fn create_session(State(state): State<Arc<AppState>>, body: Bytes) -> Result<Json<SessionView>, ApiError> {
    let req: CreateSession = parse(&body)?;
    let ctx = state.gallery(&req.gallery_ref)?.clone();
    let target = match (req.mode, req.target_item_id) {
        (Mode::SimReplay, Some(t)) => {
            ctx.gallery.require(&t)?;
            Some(t)
        }
        (Mode::SimReplay, None) => {
            return Err(ApiError::BadRequest("sim_replay mode needs `target_item_id`".into()))
        }
        (Mode::Human, Some(_)) => {
            return Err(ApiError::BadRequest("`target_item_id` is only accepted in sim_replay mode".into()))
        }
        (Mode::Human, None) => None,
    };
    let engine = state.config.engine.clone();
    blocking(move || {
        let session = Session::start(ctx, engine, &req.reference_item_id, req.u0_edit)?;
        let slot = state.insert(&req.gallery_ref, req.mode, target, session);
        let guard = slot.try_session()?;
        Ok(Json(view(&state, &slot, &guard)?))
    })
    .await
}

async fn feedback(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    let slot = state.get(&id)?;
    let msg: FeedbackMessage = parse(&body)?;
    blocking(move || {
        let mut session = slot.try_session()?;
        session.step(&msg)?;
        Ok(Json(view(&state, &slot, &session)?))
    })
    .await
}

async fn found(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let slot = state.get(&id)?;
    blocking(move || {
        let mut session = slot.try_session()?;
        session.accept()?;
        Ok(Json(view(&state, &slot, &session)?))
    })
    .await
}

async fn history(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    let slot = state.get(&id)?;
    let body = blocking(move || {
        let session = slot.try_session()?;
        serde_json::to_vec(&session.trace()).map_err(|e| ApiError::Internal(e.to_string()))
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "application/json")], body))
}
