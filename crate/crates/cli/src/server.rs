//! Listening-test HTTP service.
//!
//! ```text
//! GET  /api/trials/next?respondent=<token>
//! POST /api/trials/{trial_id}/response
//! GET  /api/results/winrate?question=overall|vocal
//! GET  /api/results/agreement
//! GET  /audio/{track_id}.wav?mode=mixture|vocals
//! ```
//!
//! Errors are JSON bodies `{"error": <code>, "detail": <message>}`.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use vocalsim::audio::{encode_wav, seconds_to_samples, WavFormat};
use vocalsim::corpus::mixture;
use vocalsim::eval::InputMode;
use vocalsim::retrieval::{
    agreement_matrix, read_response_log, winrate_matrix, AgreementMatrix, Choice, Question,
    ResponseStore, RetrievalIndex, Tally, Trial, TrialPool, TrialResponse, WinrateMatrix,
};
use vocalsim::{Corpus, Error};

const MAX_TOKEN_LEN: usize = 128;

struct LiveLog {
    store: ResponseStore,
    tally: Tally,
}

/// Everything the service needs: trials, audio, precomputed agreement and
/// the response log with its running tallies.
pub struct Study {
    pool: TrialPool,
    trials: BTreeMap<String, Trial>,
    corpus: Corpus,
    agreement: Option<BTreeMap<String, AgreementMatrix>>,
    audio_window_s: Option<f64>,
    log: Mutex<LiveLog>,
}

impl Study {
    /// Opens the response log at `responses` (creating it if missing) and
    /// folds any existing responses into the tallies.
    pub fn open(
        pool: TrialPool,
        corpus: Corpus,
        indexes: Option<(RetrievalIndex, RetrievalIndex)>,
        responses: &Path,
        audio_window_s: Option<f64>,
    ) -> anyhow::Result<Self> {
        let trials: BTreeMap<String, Trial> = pool
            .trials()
            .map(|t| (t.trial_id.clone(), t.clone()))
            .collect();
        for t in trials.values() {
            for id in [&t.query_track, &t.recommendation_a, &t.recommendation_b] {
                if corpus.track(id).is_none() {
                    anyhow::bail!("trial {} references track {id} missing from the corpus", t.trial_id);
                }
            }
        }
        let store = ResponseStore::open(responses)
            .with_context(|| format!("retrieval::ResponseStore::open({})", responses.display()))?;
        let mut tally = Tally::default();
        for r in store.responses() {
            let t = trials
                .get(&r.trial_id)
                .with_context(|| format!("logged response to unknown trial {}", r.trial_id))?;
            tally.record(t, r)?;
        }
        let agreement = indexes
            .map(|(mix, voc)| -> anyhow::Result<_> {
                let mut out = BTreeMap::new();
                for ix in [mix, voc] {
                    let queries = ix.common_tracks();
                    let m = agreement_matrix(&ix, &pool.models, &queries)
                        .context("retrieval::agreement_matrix")?;
                    out.insert(ix.input_mode.name().to_string(), m);
                }
                Ok(out)
            })
            .transpose()?;
        log::info!(
            "study: {} trials in {} sessions, {} logged responses",
            trials.len(),
            pool.sessions.len(),
            store.responses().len()
        );
        Ok(Self {
            pool,
            trials,
            corpus,
            agreement,
            audio_window_s,
            log: Mutex::new(LiveLog { store, tally }),
        })
    }

    pub fn pool(&self) -> &TrialPool {
        &self.pool
    }

    pub fn response_log_path(&self) -> PathBuf {
        self.lock().store.path().to_owned()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LiveLog> {
        // A panic while holding the lock cannot leave the log half-updated:
        // the tally is only touched after a successful append.
        self.log.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Winrates from the in-memory tallies.
    pub fn live_winrate(&self, question: Question) -> WinrateMatrix {
        self.lock().tally.matrix(&self.pool.models, question)
    }

    /// Winrates recomputed from the persisted log.
    pub fn replay_winrate(&self, question: Question) -> vocalsim::Result<WinrateMatrix> {
        let path = self.response_log_path();
        let responses = read_response_log(&path)?;
        winrate_matrix(&self.pool, &responses, question)
    }

    pub fn agreement(&self) -> Option<&BTreeMap<String, AgreementMatrix>> {
        self.agreement.as_ref()
    }
}

fn error(status: StatusCode, code: &str, detail: impl Into<String>) -> Response {
    (status, Json(json!({ "error": code, "detail": detail.into() }))).into_response()
}

fn bad_request(detail: impl Into<String>) -> Response {
    error(StatusCode::BAD_REQUEST, "bad_request", detail)
}

fn check_token(token: &str) -> Result<(), Response> {
    let ok = !token.is_empty()
        && token.len() <= MAX_TOKEN_LEN
        && token
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b"-_.".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(bad_request(format!(
            "respondent token must be 1-{MAX_TOKEN_LEN} characters of [A-Za-z0-9._-]"
        )))
    }
}

fn audio_url(track: &str, mode: InputMode) -> String {
    format!("/audio/{track}.wav?mode={}", mode.name())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NextTrial {
    pub trial_id: String,
    pub mode: InputMode,
    pub query_url: String,
    pub candidate_a_url: String,
    pub candidate_b_url: String,
    /// 1-based position in the respondent's session.
    pub position: usize,
    pub total: usize,
}

async fn next_trial(
    State(study): State<Arc<Study>>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> Response {
    let Ok(Query(params)) = query else {
        return bad_request("malformed query string");
    };
    let Some(token) = params.get("respondent") else {
        return bad_request("missing respondent parameter");
    };
    if let Err(r) = check_token(token) {
        return r;
    }
    let session = study.pool.session(token);
    let log = study.lock();
    let next = session
        .iter()
        .enumerate()
        .find(|(_, t)| !log.store.contains(&t.trial_id, token));
    match next {
        None => StatusCode::NO_CONTENT.into_response(),
        Some((k, t)) => Json(NextTrial {
            trial_id: t.trial_id.clone(),
            mode: t.input_mode,
            query_url: audio_url(&t.query_track, t.input_mode),
            candidate_a_url: audio_url(&t.recommendation_a, t.input_mode),
            candidate_b_url: audio_url(&t.recommendation_b, t.input_mode),
            position: k + 1,
            total: session.len(),
        })
        .into_response(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseBody {
    pub respondent: String,
    pub overall_choice: Choice,
    pub vocal_choice: Choice,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

async fn post_response(
    State(study): State<Arc<Study>>,
    UrlPath(trial_id): UrlPath<String>,
    body: Bytes,
) -> Response {
    let Some(trial) = study.trials.get(&trial_id) else {
        return error(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("unknown trial {trial_id}"),
        );
    };
    let body: ResponseBody = match serde_json::from_slice(&body) {
        Ok(b) => b,
        Err(e) => return bad_request(format!("invalid response body: {e}")),
    };
    if let Err(r) = check_token(&body.respondent) {
        return r;
    }
    if !study
        .pool
        .session(&body.respondent)
        .iter()
        .any(|t| t.trial_id == trial_id)
    {
        return bad_request(format!(
            "trial {trial_id} was not served to respondent {}",
            body.respondent
        ));
    }
    let response = TrialResponse {
        trial_id: trial_id.clone(),
        respondent_id: body.respondent.clone(),
        overall_choice: body.overall_choice,
        vocal_choice: body.vocal_choice,
        timestamp: now_ms(),
    };
    let mut log = study.lock();
    match log.store.append(response.clone()) {
        Ok(()) => {}
        Err(Error::Duplicate(d)) => return error(StatusCode::CONFLICT, "duplicate", d),
        Err(e) => {
            log::error!("appending response: {e}");
            return error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
        }
    }
    if let Err(e) = log.tally.record(trial, &response) {
        log::error!("tallying response: {e}");
        return error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string());
    }
    (
        StatusCode::CREATED,
        Json(json!({ "trial_id": trial_id, "respondent": body.respondent })),
    )
        .into_response()
}

async fn winrate(
    State(study): State<Arc<Study>>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> Response {
    let Ok(Query(params)) = query else {
        return bad_request("malformed query string");
    };
    let question = match params.get("question").map(|q| q.parse::<Question>()) {
        None => Question::Overall,
        Some(Ok(q)) => q,
        Some(Err(e)) => return bad_request(e.to_string()),
    };
    Json(study.live_winrate(question)).into_response()
}

async fn agreement(State(study): State<Arc<Study>>) -> Response {
    match study.agreement() {
        Some(a) => Json(a).into_response(),
        None => error(
            StatusCode::NOT_FOUND,
            "unavailable",
            "the service was started without retrieval indexes",
        ),
    }
}

async fn audio(
    State(study): State<Arc<Study>>,
    UrlPath(file): UrlPath<String>,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> Response {
    let Ok(Query(params)) = query else {
        return bad_request("malformed query string");
    };
    let mode = match params.get("mode").map(|m| m.parse::<InputMode>()) {
        None => InputMode::Mixture,
        Some(Ok(m)) => m,
        Some(Err(e)) => return bad_request(e.to_string()),
    };
    let Some(track) = file
        .strip_suffix(".wav")
        .and_then(|id| study.corpus.track(id))
    else {
        return error(StatusCode::NOT_FOUND, "not_found", format!("no audio {file}"));
    };
    let buffer = match mode {
        InputMode::Vocals => Ok(track.vocals.clone()),
        InputMode::Mixture => mixture(track),
    };
    let buffer = buffer.and_then(|b| match study.audio_window_s {
        Some(w) => b.slice(0, seconds_to_samples(w).min(b.len())),
        None => Ok(b),
    });
    match buffer.and_then(|b| encode_wav(&b, WavFormat::Pcm16)) {
        Ok(bytes) => ([(header::CONTENT_TYPE, "audio/wav")], bytes).into_response(),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
    }
}

pub fn router(study: Arc<Study>) -> Router {
    Router::new()
        .route("/api/trials/next", get(next_trial))
        .route("/api/trials/{trial_id}/response", post(post_response))
        .route("/api/results/winrate", get(winrate))
        .route("/api/results/agreement", get(agreement))
        .route("/audio/{file}", get(audio))
        .with_state(study)
}

pub async fn serve(study: Arc<Study>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(study)).await?;
    Ok(())
}
