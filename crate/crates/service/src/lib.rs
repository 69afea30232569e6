//! HTTP API over a trained outfit embedder.
//!
//! | method | path | purpose |
//! |---|---|---|
//! | GET | `/items` | catalogue listing (`type`, `offset`, `limit`) |
//! | GET | `/items/{id}/neighbors` | nearest items in style space |
//! | POST | `/outfits/score` | score an outfit |
//! | POST | `/outfits/complete` | complete an outfit from a hero |
//! | GET | `/projection` | 2-D map of item embeddings (`method=pca|tsne`) |
//! | POST | `/ratings` | record a rating |
//! | GET | `/abtest/results` | random-effects analysis of the ratings |
//! | GET | `/evaluation/next` | next outfit for a rater (`user`) |
//!
//! Errors are JSON `{"error": ...}` with 400 for malformed requests, 404 for
//! unknown ids and 422 for requests that are well formed but cannot be served.

pub mod error;
pub mod ratings;
pub mod state;

use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use outfit_core::analysis::{ab_report, nearest_in_style, project_2d, Group, Projection, RatingRecord, Roles};
use outfit_core::catalog::{validate_outfit, Violation};
use outfit_core::generator::{beam_search, instance_from_embeddings, most_frequent, BeamOptions, DEFAULT_BEAM_WIDTH};
use outfit_core::scorer::{outfit_logit, pairwise_dots, sigmoid};
use outfit_core::{Item, Label, Outfit, OutfitSource, OutfitTemplate};

pub use crate::error::{ApiError, ApiResult};
pub use crate::ratings::RatingStore;
pub use crate::state::{AppState, EvaluationSet, Snapshot};

type Shared = Arc<AppState>;

pub fn router(state: Shared) -> Router {
    Router::new()
        .route("/items", get(list_items))
        .route("/items/{id}/neighbors", get(neighbors))
        .route("/outfits/score", post(score))
        .route("/outfits/complete", post(complete))
        .route("/projection", get(projection))
        .route("/ratings", post(rate))
        .route("/abtest/results", get(abtest_results))
        .route("/evaluation/next", get(evaluation_next))
        .with_state(state)
}

pub async fn serve(state: Shared, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}

/// Any body or query that fails to parse is a 400.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("malformed body: {e}")))
}

fn query<T>(q: Result<Query<T>, QueryRejection>) -> ApiResult<T> {
    q.map(|Query(v)| v).map_err(|e| ApiError::BadRequest(e.body_text()))
}

#[derive(Debug, Deserialize)]
struct ItemsQuery {
    #[serde(rename = "type")]
    product_type: Option<String>,
    #[serde(default)]
    offset: usize,
    limit: Option<usize>,
}

async fn list_items(State(state): State<Shared>, q: Result<Query<ItemsQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let snap = state.snapshot();
    let matching: Vec<&Item> = snap
        .catalog
        .items()
        .iter()
        .filter(|it| q.product_type.as_deref().is_none_or(|t| it.product_type == t))
        .collect();
    let page: Vec<&Item> = matching
        .iter()
        .skip(q.offset)
        .take(q.limit.unwrap_or(usize::MAX))
        .copied()
        .collect();
    Ok(Json(json!({ "total": matching.len(), "items": page })))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Hero,
    Styling,
}

#[derive(Debug, Deserialize)]
struct NeighborsQuery {
    k: Option<usize>,
    #[serde(rename = "type")]
    product_type: Option<String>,
    query_role: Option<Role>,
    candidate_role: Option<Role>,
}

async fn neighbors(
    State(state): State<Shared>,
    Path(id): Path<String>,
    q: Result<Query<NeighborsQuery>, QueryRejection>,
) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let snap = state.snapshot();
    let k = q.k.unwrap_or(10);
    if k == 0 {
        return Err(ApiError::BadRequest("k must be at least 1".into()));
    }
    let roles = Roles {
        query_hero: q.query_role.unwrap_or(Role::Hero) == Role::Hero,
        candidates_hero: q.candidate_role.unwrap_or(Role::Styling) == Role::Hero,
    };
    let found = nearest_in_style(&id, roles, q.product_type.as_deref(), k, &snap.catalog, &snap.embeddings)?;
    let neighbors: Vec<Value> = found
        .into_iter()
        .map(|(nid, dot)| {
            let item = snap.catalog.get(&nid).expect("neighbor from catalogue");
            json!({ "id": nid, "product_type": item.product_type, "category": item.category, "dot": dot })
        })
        .collect();
    Ok(Json(json!({ "id": id, "neighbors": neighbors })))
}

#[derive(Debug, Deserialize)]
pub struct ScoreRequest {
    pub hero: String,
    pub styling: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub a: String,
    pub b: String,
    pub dot: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logit: f64,
    pub score: f64,
    pub pairs: Vec<PairScore>,
}

fn check_outfit(outfit: &Outfit, snap: &Snapshot) -> ApiResult<()> {
    let violations = validate_outfit(outfit, &snap.catalog);
    if let Some(Violation::UnknownItem(id)) = violations.iter().find(|v| matches!(v, Violation::UnknownItem(_))) {
        return Err(ApiError::NotFound { kind: "item", id: id.clone() });
    }
    if !violations.is_empty() {
        let all: Vec<String> = violations.iter().map(ToString::to_string).collect();
        return Err(ApiError::Unprocessable(all.join("; ")));
    }
    Ok(())
}

/// Scores with the snapshot's cached embeddings.
pub fn score_with(snap: &Snapshot, outfit: &Outfit) -> ApiResult<ScoreResponse> {
    check_outfit(outfit, snap)?;
    let z = snap.embeddings.outfit(&snap.catalog, outfit)?;
    let logit = outfit_logit(&z)?;
    let ids: Vec<&str> = outfit.item_ids().collect();
    let pairs = pairwise_dots(&z)
        .into_iter()
        .map(|(i, j, dot)| PairScore {
            a: ids[i].to_string(),
            b: ids[j].to_string(),
            dot,
        })
        .collect();
    Ok(ScoreResponse {
        logit,
        score: sigmoid(logit),
        pairs,
    })
}

async fn score(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<ScoreResponse>> {
    let req: ScoreRequest = parse_body(&body)?;
    let outfit = Outfit::positive(req.hero, req.styling);
    Ok(Json(score_with(&state.snapshot(), &outfit)?))
}

#[derive(Debug, Deserialize)]
pub struct CompleteRequest {
    pub hero: String,
    /// Styling product types; omitted means the hero type's most frequent template.
    pub template: Option<Vec<String>>,
    pub beam_width: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompleteResponse {
    pub outfit: Outfit,
    pub template: OutfitTemplate,
    pub logit: f64,
    pub score: f64,
}

pub fn complete_with(snap: &Snapshot, req: &CompleteRequest) -> ApiResult<CompleteResponse> {
    let beam_width = req.beam_width.unwrap_or(DEFAULT_BEAM_WIDTH);
    if beam_width == 0 {
        return Err(ApiError::BadRequest("beam_width must be at least 1".into()));
    }
    let hero = snap.catalog.get(&req.hero).ok_or_else(|| ApiError::NotFound {
        kind: "item",
        id: req.hero.clone(),
    })?;
    let template = match &req.template {
        Some(types) => OutfitTemplate::new(hero.product_type.clone(), types.iter().cloned())?,
        None => {
            most_frequent(&snap.templates, &hero.product_type)
                .ok_or_else(|| {
                    ApiError::Unprocessable(format!(
                        "no outfit template is known for hero type {:?}; pass one explicitly",
                        hero.product_type
                    ))
                })?
                .0
        }
    };
    let instance = instance_from_embeddings(&req.hero, &template, &snap.catalog, &snap.pool, &snap.embeddings)?;
    let best = beam_search(
        &instance,
        BeamOptions {
            beam_width,
            ..BeamOptions::default()
        },
    )?;
    Ok(CompleteResponse {
        outfit: best.outfit,
        template,
        logit: best.logit,
        score: best.score,
    })
}

async fn complete(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<CompleteResponse>> {
    let req: CompleteRequest = parse_body(&body)?;
    let snap = state.snapshot();
    let out = tokio::task::spawn_blocking(move || complete_with(&snap, &req))
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
struct ProjectionQuery {
    method: Option<String>,
    #[serde(rename = "type")]
    product_type: Option<String>,
    limit: Option<usize>,
    role: Option<Role>,
    perplexity: Option<f64>,
    iterations: Option<usize>,
    #[serde(default)]
    seed: u64,
}

const DEFAULT_TSNE_POINTS: usize = 500;

async fn projection(State(state): State<Shared>, q: Result<Query<ProjectionQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    let (method, default_limit) = match q.method.as_deref().unwrap_or("pca") {
        "pca" => (Projection::Pca, usize::MAX),
        "tsne" => {
            let Projection::Tsne { perplexity, iterations } = Projection::tsne() else {
                unreachable!()
            };
            (
                Projection::Tsne {
                    perplexity: q.perplexity.unwrap_or(perplexity),
                    iterations: q.iterations.unwrap_or(iterations),
                },
                DEFAULT_TSNE_POINTS,
            )
        }
        other => return Err(ApiError::BadRequest(format!("unknown projection method {other:?}; use pca or tsne"))),
    };
    let snap = state.snapshot();
    let out = tokio::task::spawn_blocking(move || -> ApiResult<Value> {
        let hero = q.role == Some(Role::Hero);
        let chosen: Vec<(usize, &Item)> = snap
            .catalog
            .items()
            .iter()
            .enumerate()
            .filter(|(_, it)| q.product_type.as_deref().is_none_or(|t| it.product_type == t))
            .take(q.limit.unwrap_or(default_limit))
            .collect();
        let points: Vec<Vec<f64>> = chosen.iter().map(|(i, _)| snap.embeddings.get(*i, hero).to_vec()).collect();
        let xy = project_2d(&points, method, q.seed)?;
        let points: Vec<Value> = chosen
            .iter()
            .zip(xy)
            .map(|((_, it), [x, y])| json!({ "id": it.id, "product_type": it.product_type, "x": x, "y": y }))
            .collect();
        Ok(json!({ "method": method, "points": points }))
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct RatingRequest {
    pub user: String,
    pub outfit: String,
    pub rating: u8,
    /// Optional; must agree with the evaluation set when given.
    pub group: Option<Group>,
}

fn now_millis() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

async fn rate(State(state): State<Shared>, body: Bytes) -> ApiResult<Json<Value>> {
    let req: RatingRequest = parse_body(&body)?;
    if req.user.trim().is_empty() {
        return Err(ApiError::BadRequest("user must not be empty".into()));
    }
    let shown = state.evaluation.get(&req.outfit).ok_or_else(|| ApiError::NotFound {
        kind: "outfit",
        id: req.outfit.clone(),
    })?;
    if req.rating > 1 {
        return Err(ApiError::Unprocessable(format!("rating must be 0 or 1, got {}", req.rating)));
    }
    if req.group.is_some_and(|g| g != shown.group) {
        return Err(ApiError::Unprocessable(format!("outfit {} is not in that group", req.outfit)));
    }
    let record = RatingRecord {
        user: req.user,
        outfit: req.outfit,
        group: shown.group,
        rating: req.rating,
        timestamp: now_millis(),
        template: Some(shown.template.to_string()),
    };
    let recorded = state
        .ratings
        .lock()
        .expect("rating lock")
        .record(record)
        .map_err(|e| ApiError::Internal(e.to_string()))?;
    Ok(Json(json!({ "observations": recorded.observations, "overwritten": recorded.overwritten })))
}

async fn abtest_results(State(state): State<Shared>) -> ApiResult<Json<Value>> {
    let records = state.ratings.lock().expect("rating lock").records().to_vec();
    let segments = ab_report(&records)?;
    let segments: Vec<Value> = segments
        .into_iter()
        .map(|s| match s.result {
            Ok(r) => json!({ "name": s.name, "result": r }),
            Err(e) => json!({ "name": s.name, "error": e }),
        })
        .collect();
    Ok(Json(json!({ "ratings": records.len(), "segments": segments })))
}

#[derive(Debug, Deserialize)]
struct NextQuery {
    user: String,
}

async fn evaluation_next(State(state): State<Shared>, q: Result<Query<NextQuery>, QueryRejection>) -> ApiResult<Json<Value>> {
    let q = query(q)?;
    if q.user.trim().is_empty() {
        return Err(ApiError::BadRequest("user must not be empty".into()));
    }
    let order = state.evaluation.order_for(&q.user);
    let total = order.len();
    let ratings = state.ratings.lock().expect("rating lock");
    let next = order
        .into_iter()
        .enumerate()
        .find(|(_, o)| !ratings.has_rated(&q.user, &o.id));
    drop(ratings);
    let Some((position, shown)) = next else {
        return Ok(Json(json!({ "done": true, "total": total })));
    };
    let snap = state.snapshot();
    let items: Vec<Option<&Item>> = shown.outfit.item_ids().map(|id| snap.catalog.get(id)).collect();
    // The group stays hidden from raters.
    let outfit = Outfit {
        label: Label::Positive,
        source: OutfitSource::Generated,
        ..shown.outfit.clone()
    };
    Ok(Json(json!({
        "done": false,
        "position": position + 1,
        "total": total,
        "outfit_id": shown.id,
        "outfit": { "hero": outfit.hero_id, "styling": outfit.styling_ids },
        "items": items,
    })))
}
