//! Reward scoring service: NDJSON over stdio and an optional HTTP endpoint.

use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::mpsc;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use mixup_core::embed::{EmbeddingProvider, HashingEmbedder};
use mixup_core::reward::{AlignmentParams, Scorer};
use mixup_core::sha256_hex;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use crate::config::PipelineConfig;
use crate::error::CliError;
use crate::stages::quality_scorer;

/// Lines scored together when more input is already waiting.
const MAX_BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Health {
    pub status: &'static str,
    pub index_sha256: String,
    pub stm_sha256: String,
    pub index_rows: usize,
}

fn file_hash(path: &Path) -> Result<String, CliError> {
    std::fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|e| CliError::stage("serve", format!("{}: {e}", path.display())))
}

/// Loads both artifacts into a scorer whose embedder matches the index
/// dimension, so requests may carry text instead of vectors.
pub fn load_scorer(
    cfg: &PipelineConfig,
    index: &Path,
    stm: &Path,
) -> Result<(Scorer, Health), CliError> {
    let quality = quality_scorer(cfg, "serve", index, stm)?;
    let health = Health {
        status: "ok",
        index_sha256: file_hash(index)?,
        stm_sha256: file_hash(stm)?,
        index_rows: quality.index.len(),
    };
    let embedder: Arc<dyn EmbeddingProvider> = Arc::new(HashingEmbedder::new(quality.index.dim()));
    let alignment =
        AlignmentParams::new(cfg.scoring.tau).map_err(|e| CliError::Config(e.to_string()))?;
    let scorer = Scorer::new(quality, cfg.scoring.weights, alignment, Some(embedder))
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((scorer, health))
}

/// One response line per request line, in order. Lines already buffered are
/// scored as one parallel batch; a lone line is answered immediately.
pub fn serve_ndjson<R, W>(scorer: &Scorer, input: R, mut output: W) -> io::Result<usize>
where
    R: BufRead + Send,
    W: Write,
{
    let (tx, rx) = mpsc::sync_channel::<io::Result<String>>(MAX_BATCH * 2);
    std::thread::scope(|scope| {
        scope.spawn(move || {
            for line in input.lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut served = 0;
        while let Ok(first) = rx.recv() {
            let mut batch = vec![first?];
            while batch.len() < MAX_BATCH {
                match rx.try_recv() {
                    Ok(line) => batch.push(line?),
                    Err(_) => break,
                }
            }
            batch.retain(|l| !l.trim().is_empty());
            let out: Vec<String> = batch.par_iter().map(|l| scorer.score_line(l)).collect();
            for line in &out {
                output.write_all(line.as_bytes())?;
                output.write_all(b"\n")?;
            }
            output.flush()?;
            served += out.len();
        }
        Ok(served)
    })
}

#[derive(Clone)]
struct AppState {
    scorer: Arc<Scorer>,
    health: Arc<Health>,
}

async fn healthz(State(s): State<AppState>) -> Json<Health> {
    Json((*s.health).clone())
}

async fn score(
    State(s): State<AppState>,
    Json(body): Json<Value>,
) -> Result<Json<Value>, (StatusCode, String)> {
    let Value::Array(items) = body else {
        return Err((
            StatusCode::BAD_REQUEST,
            "body must be a JSON array of requests".into(),
        ));
    };
    let scorer = s.scorer.clone();
    let responses = tokio::task::spawn_blocking(move || scorer.score_values(&items))
        .await
        .map_err(|e| (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    Ok(Json(
        serde_json::to_value(responses).expect("responses serialize"),
    ))
}

pub fn router(scorer: Scorer, health: Health) -> Router {
    Router::new()
        .route("/score", post(score))
        .route("/healthz", get(healthz))
        .with_state(AppState {
            scorer: Arc::new(scorer),
            health: Arc::new(health),
        })
}

/// Serves until interrupted.
pub async fn serve_http(scorer: Scorer, health: Health, addr: &str) -> Result<(), CliError> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Config(format!("cannot bind {addr}: {e}")))?;
    tracing::info!(addr = %listener.local_addr().map(|a| a.to_string()).unwrap_or_default(), "listening");
    axum::serve(listener, router(scorer, health))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::stage("serve", e))
}
