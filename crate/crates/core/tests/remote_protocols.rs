mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

use chronoline::embedding::{remote_embedding_provider, EmbeddingCache, EmbeddingProvider, RemoteConfig};
use chronoline::reward::{remote_lm, LmScorer};
use chronoline::summarise::{remote_policy, PolicyContract};
use chronoline::Error;

fn quick() -> RemoteConfig {
    RemoteConfig {
        timeout: Duration::from_secs(5),
        retries: 2,
        batch_size: 2,
        max_concurrency: 2,
    }
}

/// Encoder returning `[len, word count]` per sentence.
fn encoder(calls: Arc<AtomicUsize>) -> Router {
    Router::new().route(
        "/embed",
        post(move |Json(body): Json<Value>| {
            let calls = calls.clone();
            async move {
                calls.fetch_add(1, Ordering::SeqCst);
                let vectors: Vec<Vec<f64>> = body["sentences"]
                    .as_array()
                    .unwrap()
                    .iter()
                    .map(|s| {
                        let s = s.as_str().unwrap();
                        vec![s.len() as f64, s.split_whitespace().count() as f64]
                    })
                    .collect();
                Json(json!({ "vectors": vectors }))
            }
        }),
    )
}

#[test]
fn embed_batches_and_caches() {
    let calls = Arc::new(AtomicUsize::new(0));
    let base = common::spawn(encoder(calls.clone()));
    let dir = tempfile::tempdir().unwrap();
    let cache_path = dir.path().join("cache.jsonl");
    let p = remote_embedding_provider(&base, 2, quick(), EmbeddingCache::open(&cache_path).unwrap()).unwrap();
    let out = p.embed_batch(&["a b", "ccc", "a b", "dd ee ff", "g"]).unwrap();
    assert_eq!(out[0].as_slice(), &[3.0, 2.0]);
    assert_eq!(out[2], out[0]);
    assert_eq!(out[3].as_slice(), &[8.0, 3.0]);
    // Four distinct texts in batches of two.
    assert_eq!(calls.load(Ordering::SeqCst), 2);
    assert_eq!(p.embed_sentence("ccc").unwrap().as_slice(), &[3.0, 1.0]);
    assert_eq!(calls.load(Ordering::SeqCst), 2);

    // The cache persists across providers.
    let again = remote_embedding_provider(&base, 2, quick(), EmbeddingCache::open(&cache_path).unwrap()).unwrap();
    assert_eq!(again.cache().len(), 4);
    again.embed_sentence("g").unwrap();
    assert_eq!(calls.load(Ordering::SeqCst), 2);
}

#[test]
fn embed_dimension_mismatch_is_a_contract_error() {
    let base = common::spawn(encoder(Arc::new(AtomicUsize::new(0))));
    let p = remote_embedding_provider(&base, 3, quick(), EmbeddingCache::in_memory()).unwrap();
    assert!(matches!(p.embed_sentence("x"), Err(Error::Contract(_))));
}

#[test]
fn server_errors_are_retried() {
    let calls = Arc::new(AtomicUsize::new(0));
    let c = calls.clone();
    let router = Router::new().route(
        "/loss",
        post(move |Json(body): Json<Value>| {
            let c = c.clone();
            async move {
                if c.fetch_add(1, Ordering::SeqCst) < 2 {
                    return Err(StatusCode::SERVICE_UNAVAILABLE);
                }
                let n = body["text"].as_str().unwrap().split_whitespace().count();
                Ok(Json(json!({ "loss": n as f64 * 0.5 })))
            }
        }),
    );
    let base = common::spawn(router);
    let lm = remote_lm(&base, &quick()).unwrap();
    assert_eq!(lm.loss("one two three").unwrap(), 1.5);
    assert_eq!(calls.load(Ordering::SeqCst), 3);
}

#[test]
fn exhausted_retries_are_provider_errors() {
    let router = Router::new().route("/loss", post(|| async { StatusCode::INTERNAL_SERVER_ERROR }));
    let base = common::spawn(router);
    let lm = remote_lm(&base, &quick()).unwrap();
    assert!(matches!(lm.loss("x"), Err(Error::Provider(_))));
}

#[test]
fn invalid_loss_is_a_contract_error() {
    let router = Router::new().route("/loss", post(|| async { Json(json!({ "loss": -1.0 })) }));
    let lm = remote_lm(&common::spawn(router), &quick()).unwrap();
    assert!(matches!(lm.loss("x"), Err(Error::Contract(_))));
}

#[test]
fn policy_endpoints_round_trip_and_are_checked() {
    let router = Router::new()
        .route(
            "/sample",
            post(|Json(body): Json<Value>| async move {
                let k = body["max_tokens"].as_u64().unwrap() as usize;
                let seed = body["seed"].as_u64().unwrap();
                let words: Vec<String> = body["source"]
                    .as_str()
                    .unwrap()
                    .split_whitespace()
                    .take(k)
                    .map(|w| format!("{w}{seed}"))
                    .collect();
                let lp = vec![-0.5; words.len()];
                Json(json!({ "tokens": words, "log_probs": lp }))
            }),
        )
        .route(
            "/greedy",
            post(|Json(body): Json<Value>| async move {
                // Ignores max_tokens so the client has to notice.
                let words: Vec<&str> = body["source"].as_str().unwrap().split_whitespace().collect();
                Json(json!({ "tokens": words }))
            }),
        );
    let p = remote_policy(&common::spawn(router), &quick()).unwrap();
    let (tokens, lp) = p.sample("storm hits coast", 7, 2).unwrap();
    assert_eq!(tokens, vec!["storm7", "hits7"]);
    assert_eq!(lp, vec![-0.5, -0.5]);
    assert_eq!(p.greedy("storm hits", 5).unwrap(), vec!["storm", "hits"]);
    assert!(matches!(p.greedy("storm hits coast", 2), Err(Error::Contract(_))));
    assert!(!p.log_prob_grad());
}

#[test]
fn mismatched_log_probs_are_rejected() {
    let router = Router::new().route(
        "/sample",
        post(|| async { Json(json!({ "tokens": ["a", "b"], "log_probs": [-0.1] })) }),
    );
    let p = remote_policy(&common::spawn(router), &quick()).unwrap();
    assert!(matches!(p.sample("a b", 0, 5), Err(Error::Contract(_))));
}

#[test]
fn unreachable_endpoint_is_a_provider_error() {
    let cfg = RemoteConfig {
        timeout: Duration::from_millis(300),
        retries: 0,
        ..quick()
    };
    let p = remote_embedding_provider("http://127.0.0.1:9", 2, cfg, EmbeddingCache::in_memory()).unwrap();
    assert!(matches!(p.embed_sentence("x"), Err(Error::Provider(_))));
}
