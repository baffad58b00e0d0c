//! Batch-edit HTTP service.
//!
//! `POST /v1/edit` with `{"profile_id", "layer", "vectors": [[f32]]}`
//! returns the edited vectors. Profiles are loaded once at startup and
//! shared read-only between requests.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::Router;
use chameleon_core::editing::{apply_profile, ActivationBatch, EditError, SteeringProfile};
use serde::{Deserialize, Serialize};

use crate::error::precondition;

pub type Profiles = Arc<BTreeMap<String, SteeringProfile>>;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditRequest {
    pub profile_id: String,
    pub layer: u32,
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct EditResponse {
    pub layer: u32,
    pub profile_id: String,
    pub vectors: Vec<Vec<f32>>,
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    let body = serde_json::to_string(&ErrorBody { error: message.into() }).expect("error body serializes");
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

/// Every `*.json` file in `dir`, keyed by file stem.
pub fn load_profiles(dir: &Path) -> Result<BTreeMap<String, SteeringProfile>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))? {
        let path = entry.with_context(|| format!("reading {}", dir.display()))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("json") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let profile = SteeringProfile::read(&path).with_context(|| format!("loading profile {}", path.display()))?;
        out.insert(id.to_owned(), profile);
    }
    if out.is_empty() {
        return Err(precondition(format!("no profile JSON files in {}", dir.display())));
    }
    Ok(out)
}

/// Edits `vectors` as layer `layer` activations, through the same path as
/// the `edit` command.
pub fn edit_vectors(profile: &SteeringProfile, layer: u32, vectors: &[Vec<f32>]) -> Result<Vec<Vec<f32>>, String> {
    let dim = vectors.first().map(Vec::len).ok_or("vectors must not be empty")?;
    if let Some((i, v)) = vectors.iter().enumerate().find(|(_, v)| v.len() != dim) {
        return Err(format!("vector {i} has length {} but vector 0 has length {dim}", v.len()));
    }
    let flat: Vec<f32> = vectors.iter().flatten().copied().collect();
    let batch = ActivationBatch::from_f32(layer, vectors.len(), dim, &flat).map_err(|e| e.to_string())?;
    let edited = apply_profile(std::slice::from_ref(&batch), profile).map_err(|e: EditError| e.to_string())?;
    Ok(edited[0].to_f32().chunks(dim).map(<[f32]>::to_vec).collect())
}

async fn handle_edit(State(profiles): State<Profiles>, body: Bytes) -> Response {
    let req: EditRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}")),
    };
    let Some(profile) = profiles.get(&req.profile_id) else {
        return error(StatusCode::NOT_FOUND, format!("unknown profile_id {:?}", req.profile_id));
    };
    let profile = profile.clone();
    let EditRequest { profile_id, layer, vectors } = req;
    let result = tokio::task::spawn_blocking(move || edit_vectors(&profile, layer, &vectors)).await;
    match result {
        Ok(Ok(vectors)) => {
            let body = serde_json::to_string(&EditResponse {
                layer,
                profile_id,
                vectors,
            })
            .expect("response serializes");
            ([(header::CONTENT_TYPE, "application/json")], body).into_response()
        }
        Ok(Err(msg)) => error(StatusCode::BAD_REQUEST, msg),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()),
    }
}

pub fn router(profiles: Profiles) -> Router {
    Router::new().route("/v1/edit", post(handle_edit)).with_state(profiles)
}

/// Binds `host:port`, prints the bound address on stdout and serves until
/// the process ends.
pub fn serve(dir: &Path, host: &str, port: u16) -> Result<()> {
    let profiles = Arc::new(load_profiles(dir)?);
    log::info!("loaded {} profiles: {:?}", profiles.len(), profiles.keys().collect::<Vec<_>>());
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .with_context(|| format!("binding {host}:{port}"))?;
        let addr = listener.local_addr()?;
        let mut stdout = std::io::stdout().lock();
        writeln!(stdout, "listening on http://{addr}")?;
        stdout.flush()?;
        drop(stdout);
        axum::serve(listener, router(profiles)).await?;
        Ok(())
    })
}
