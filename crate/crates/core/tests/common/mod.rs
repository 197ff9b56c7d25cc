#![allow(dead_code)]

use std::path::{Path, PathBuf};

use axum::Router;

use chronoline::pipeline::PipelineConfig;

pub fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

/// Serves `router` on an ephemeral local port from a background thread.
pub fn spawn(router: Router) -> String {
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        let rt = tokio::runtime::Runtime::new().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            tx.send(listener.local_addr().unwrap()).unwrap();
            axum::serve(listener, router).await.unwrap();
        });
    });
    format!("http://{}", rx.recv().unwrap())
}

/// Small, fast configuration over the planted fixture.
pub fn toy_config(root: &Path, seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        seed,
        runs_root: root.to_owned(),
        corpus: Some(data("planted.jsonl")),
        ..PipelineConfig::default()
    };
    cfg.train.episodes_per_cluster = 40;
    cfg.train.actor_lr = 1e-2;
    cfg.train.checkpoint_every = 7;
    cfg
}
