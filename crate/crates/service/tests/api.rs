use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use outfit_core::embedder::{Arch, FeatureMask};
use outfit_core::generator::{
    ab_test_outfits, complete_outfit_beam, default_pool, exhaustive_complete, score_outfit, template_frequencies, AbPlan,
    BeamOptions, EmbeddingCache, DEFAULT_EXHAUSTIVE_CAP,
};
use outfit_core::sampler::build_styling_distribution;
use outfit_core::synth::{generate_synthetic_dataset, SynthConfig, SynthDataset};
use outfit_core::trainer::{train, TrainingConfig};
use outfit_core::{EmbedderParams, Outfit, OutfitTemplate};
use outfit_service::{router, AppState, EvaluationSet, RatingStore, Snapshot};

fn dataset() -> SynthDataset {
    let config = SynthConfig {
        outfit_counts_by_size: [40, 30, 0, 0],
        templates: vec![
            OutfitTemplate::new("Dresses", ["Tops"]).unwrap(),
            OutfitTemplate::new("Dresses", ["Tops", "Jeans"]).unwrap(),
            OutfitTemplate::new("Tops", ["Jeans", "Dresses"]).unwrap(),
            OutfitTemplate::new("Jeans", ["Tops"]).unwrap(),
        ],
        ..SynthConfig::small(4, 24, 3)
    };
    generate_synthetic_dataset(&config).unwrap()
}

fn untrained(seed: u64) -> EmbedderParams {
    EmbedderParams::init(Arch {
        seed,
        ..Arch::with_widths(8, 8, 4, 8)
    })
    .unwrap()
}

/// A briefly trained model, so scores are away from saturation.
fn params() -> EmbedderParams {
    static TRAINED: OnceLock<EmbedderParams> = OnceLock::new();
    TRAINED
        .get_or_init(|| {
            let data = dataset();
            let dist = build_styling_distribution(&data.outfits, &data.catalog).unwrap();
            let config = TrainingConfig {
                epochs: 20,
                batch_size: 8,
                ..TrainingConfig::default()
            };
            train(&config, &data.catalog, &data.outfits, &dist, untrained(1).arch, None).unwrap().0
        })
        .clone()
}

fn state_with(ratings: RatingStore) -> (Arc<AppState>, SynthDataset) {
    let data = dataset();
    let snapshot = Snapshot::build(data.catalog.clone(), params(), &data.outfits, FeatureMask::ALL).unwrap();
    let plan = AbPlan {
        templates: 2,
        outfits_per_template: 3,
        beam: BeamOptions::default(),
        seed: 4,
    };
    let ab = ab_test_outfits(plan, &snapshot.catalog, &snapshot.pool, &snapshot.embeddings, &snapshot.templates).unwrap();
    let state = Arc::new(AppState::new(snapshot, EvaluationSet::new(ab, 11), ratings));
    (state, data)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

fn first_of(data: &SynthDataset, product_type: &str) -> String {
    data.catalog.items().iter().find(|i| i.product_type == product_type).unwrap().id.clone()
}

#[tokio::test]
async fn items_listing_and_filters() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let (status, body) = call(&app, "GET", "/items", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["total"], data.catalog.len());
    let (_, body) = call(&app, "GET", "/items?type=Jeans&limit=5&offset=2", None).await;
    assert_eq!(body["total"], 24);
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), 5);
    assert!(items.iter().all(|i| i["product_type"] == "Jeans"));
    let (status, _) = call(&app, "GET", "/items?limit=minus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn score_matches_the_library() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let outfit = Outfit::positive(first_of(&data, "Dresses"), [first_of(&data, "Tops"), first_of(&data, "Jeans")]);
    let payload = json!({ "hero": outfit.hero_id, "styling": outfit.styling_ids }).to_string();
    let (status, body) = call(&app, "POST", "/outfits/score", Some(&payload)).await;
    assert_eq!(status, StatusCode::OK);
    let score = body["score"].as_f64().unwrap();
    assert!(score > 0.0 && score < 1.0);
    assert_eq!(body["pairs"].as_array().unwrap().len(), 3);

    let p = params();
    let mut cache = EmbeddingCache::new(&p, &data.catalog);
    let direct = score_outfit(&outfit, &data.catalog, &mut cache).unwrap();
    assert_eq!(body["logit"].as_f64().unwrap(), direct.logit);
    assert_eq!(score, direct.score);
    let pair_sum: f64 = body["pairs"].as_array().unwrap().iter().map(|p| p["dot"].as_f64().unwrap()).sum();
    assert!((pair_sum / 6.0 - direct.logit).abs() < 1e-12);

    let (_, again) = call(&app, "POST", "/outfits/score", Some(&payload)).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn score_errors_use_standard_statuses() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let hero = first_of(&data, "Dresses");
    let (status, body) = call(&app, "POST", "/outfits/score", Some(&json!({ "hero": hero, "styling": ["QQ"] }).to_string())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["id"], "QQ");
    let (status, _) = call(&app, "POST", "/outfits/score", Some("{not json")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/outfits/score", Some(&json!({ "hero": hero }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/outfits/score", Some(&json!({ "hero": hero, "styling": [] }).to_string())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let tops = first_of(&data, "Tops");
    let dup = json!({ "hero": hero, "styling": [tops, tops] }).to_string();
    let (status, _) = call(&app, "POST", "/outfits/score", Some(&dup)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn complete_uses_the_most_frequent_template() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let hero = first_of(&data, "Dresses");
    let (status, body) = call(&app, "POST", "/outfits/complete", Some(&json!({ "hero": hero }).to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");

    let freq = template_frequencies(&data.outfits, &data.catalog).unwrap();
    let (template, _) = outfit_core::generator::most_frequent(&freq, "Dresses").unwrap();
    assert_eq!(body["template"], serde_json::to_value(&template).unwrap());
    let pool = default_pool(&data.catalog);
    let direct = complete_outfit_beam(&hero, &template, &data.catalog, &pool, &params(), BeamOptions::default()).unwrap();
    assert_eq!(body["outfit"], serde_json::to_value(&direct.outfit).unwrap());
    assert_eq!(body["logit"].as_f64().unwrap(), direct.logit);
}

#[tokio::test]
async fn complete_with_explicit_template_and_widths() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let hero = first_of(&data, "Dresses");
    let logit_at = |width: usize| {
        let app = app.clone();
        let hero = hero.clone();
        async move {
            let req = json!({ "hero": hero, "template": ["Tops", "Jeans"], "beam_width": width }).to_string();
            let (status, body) = call(&app, "POST", "/outfits/complete", Some(&req)).await;
            assert_eq!(status, StatusCode::OK, "{body}");
            body["logit"].as_f64().unwrap()
        }
    };
    let narrow = logit_at(1).await;
    // A beam at least as wide as every pool keeps all partial outfits.
    let full = logit_at(1000).await;
    assert!(full >= narrow);
    let template = OutfitTemplate::new("Dresses", ["Tops", "Jeans"]).unwrap();
    let pool = default_pool(&data.catalog);
    let exact = exhaustive_complete(&hero, &template, &data.catalog, &pool, &params(), DEFAULT_EXHAUSTIVE_CAP).unwrap();
    assert_eq!(full, exact.logit);

    let (status, _) = call(&app, "POST", "/outfits/complete", Some(&json!({ "hero": hero, "beam_width": 0 }).to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "POST", "/outfits/complete", Some(&json!({ "hero": "QQ" }).to_string())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn complete_without_template_data_is_unprocessable() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let skirt = first_of(&data, "Skirts");
    let (status, body) = call(&app, "POST", "/outfits/complete", Some(&json!({ "hero": skirt }).to_string())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].as_str().unwrap().contains("Skirts"));
}

#[tokio::test]
async fn neighbors_are_ranked() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let id = first_of(&data, "Dresses");
    let (status, body) = call(&app, "GET", &format!("/items/{id}/neighbors?k=5&type=Tops"), None).await;
    assert_eq!(status, StatusCode::OK);
    let n = body["neighbors"].as_array().unwrap();
    assert_eq!(n.len(), 5);
    assert!(n.iter().all(|x| x["product_type"] == "Tops"));
    assert!(n.windows(2).all(|w| w[0]["dot"].as_f64() >= w[1]["dot"].as_f64()));
    let (status, _) = call(&app, "GET", "/items/QQ/neighbors", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", &format!("/items/{id}/neighbors?k=0"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn projections() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state);
    let (status, body) = call(&app, "GET", "/projection?method=pca", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["points"].as_array().unwrap().len(), data.catalog.len());
    let (status, body) = call(&app, "GET", "/projection?method=tsne&limit=30&iterations=50&seed=2", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let points = body["points"].as_array().unwrap();
    assert_eq!(points.len(), 30);
    assert!(points.iter().all(|p| p["x"].as_f64().unwrap().is_finite()));
    let (status, _) = call(&app, "GET", "/projection?method=umap", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/projection?method=pca&type=Coats", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn ratings_count_and_overwrite() {
    let (state, _) = state_with(RatingStore::in_memory());
    let app = router(state.clone());
    let outfit = state.evaluation.order_for("anyone")[0].id.clone();
    let rate = |user: &str, rating: u8| json!({ "user": user, "outfit": outfit, "rating": rating }).to_string();
    let (status, body) = call(&app, "POST", "/ratings", Some(&rate("u1", 1))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, json!({ "observations": 1, "overwritten": false }));
    let (_, body) = call(&app, "POST", "/ratings", Some(&rate("u1", 0))).await;
    assert_eq!(body, json!({ "observations": 1, "overwritten": true }));
    assert_eq!(state.ratings.lock().unwrap().records()[0].rating, 0);

    let (status, _) = call(&app, "POST", "/ratings", Some(&json!({ "user": "u1", "outfit": "nope", "rating": 1 }).to_string())).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "POST", "/ratings", Some(&rate("u1", 3))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, "POST", "/ratings", Some(r#"{"user": "u1"}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let group = state.evaluation.get(&outfit).unwrap().group;
    let other = if group == outfit_core::analysis::Group::Test { "control" } else { "test" };
    let wrong = json!({ "user": "u1", "outfit": outfit, "rating": 1, "group": other }).to_string();
    let (status, _) = call(&app, "POST", "/ratings", Some(&wrong)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn abtest_results_after_enough_ratings() {
    let (state, _) = state_with(RatingStore::in_memory());
    let app = router(state.clone());
    let (status, _) = call(&app, "GET", "/abtest/results", None).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let order = state.evaluation.order_for("x");
    for (u, user) in ["ann", "bo", "cy"].iter().enumerate() {
        for (k, o) in order.iter().enumerate() {
            let rating = u8::from((k + u) % 3 != 0 && o.group == outfit_core::analysis::Group::Test || (k + u) % 4 == 0);
            let body = json!({ "user": user, "outfit": o.id, "rating": rating }).to_string();
            let (status, _) = call(&app, "POST", "/ratings", Some(&body)).await;
            assert_eq!(status, StatusCode::OK);
        }
    }
    let (status, body) = call(&app, "GET", "/abtest/results", None).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["ratings"], 3 * order.len());
    assert_eq!(body["segments"][0]["name"], "overall");
    let overall = &body["segments"][0]["result"];
    assert_eq!(overall["control"]["observations"], 3 * order.len() / 2);
    assert!(overall["test"]["mean"].as_f64().unwrap() >= 0.0);
    // One segment per template on top of the overall one.
    assert_eq!(body["segments"].as_array().unwrap().len(), 3);
}

#[tokio::test]
async fn evaluation_order_is_per_user_and_advances() {
    let (state, _) = state_with(RatingStore::in_memory());
    let app = router(state.clone());
    let (status, _) = call(&app, "GET", "/evaluation/next", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let ids = |user: &str| state.evaluation.order_for(user).iter().map(|o| o.id.clone()).collect::<Vec<_>>();
    assert_eq!(ids("ann"), ids("ann"));
    assert!((0..5).any(|k| ids(&format!("user{k}")) != ids("ann")));

    let total = state.evaluation.len();
    for step in 0..total {
        let (status, body) = call(&app, "GET", "/evaluation/next?user=ann", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body["done"], false);
        assert_eq!(body["position"], step + 1);
        assert_eq!(body["outfit_id"], ids("ann")[step].as_str());
        assert!(body.get("group").is_none());
        assert!(body["items"].as_array().unwrap().iter().all(|i| i.is_object()));
        let rate = json!({ "user": "ann", "outfit": body["outfit_id"], "rating": 1 }).to_string();
        call(&app, "POST", "/ratings", Some(&rate)).await;
    }
    let (_, body) = call(&app, "GET", "/evaluation/next?user=ann", None).await;
    assert_eq!(body, json!({ "done": true, "total": total }));
}

#[tokio::test]
async fn rating_log_survives_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ratings.jsonl");
    let (state, _) = state_with(RatingStore::open(&path).unwrap());
    let app = router(state.clone());
    let order = state.evaluation.order_for("u");
    for (user, o, r) in [("u", &order[0], 1), ("v", &order[1], 0), ("u", &order[0], 0)] {
        let body = json!({ "user": user, "outfit": o.id, "rating": r }).to_string();
        assert_eq!(call(&app, "POST", "/ratings", Some(&body)).await.0, StatusCode::OK);
    }
    let before = state.ratings.lock().unwrap().records().to_vec();
    let reopened = RatingStore::open(&path).unwrap();
    assert_eq!(reopened.records(), &before[..]);
    assert_eq!(before.len(), 2);
}

#[tokio::test]
async fn reload_swaps_the_model() {
    let (state, data) = state_with(RatingStore::in_memory());
    let app = router(state.clone());
    let payload = json!({ "hero": first_of(&data, "Dresses"), "styling": [first_of(&data, "Tops")] }).to_string();
    let (_, before) = call(&app, "POST", "/outfits/score", Some(&payload)).await;
    state.reload(Snapshot::build(data.catalog.clone(), untrained(2), &data.outfits, FeatureMask::ALL).unwrap());
    let (_, after) = call(&app, "POST", "/outfits/score", Some(&payload)).await;
    assert_ne!(before["logit"], after["logit"]);
}
