//! Listening-test service driven in-process through the router.

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;
use vocalsim::corpus::{build_synthetic_corpus, SynthParams};
use vocalsim::eval::InputMode;
use vocalsim::retrieval::{generate_pool, Question, RetrievalIndex, TrialConfig, TrialPool};
use vocalsim::Corpus;
use vocalsim_cli::server::{router, Study};

const MODELS: [(&str, usize); 3] = [("a", 1), ("b", 5), ("c", 7)];

fn corpus() -> Corpus {
    let params = SynthParams {
        duration_s: 5.0,
        ..SynthParams::default()
    };
    build_synthetic_corpus(6, 4, 11, &params).unwrap()
}

/// Tracks on a circle in a model-specific order (`k · p mod n`), so the
/// three models mostly disagree on nearest neighbours.
fn indexes(corpus: &Corpus) -> (RetrievalIndex, RetrievalIndex) {
    let ids: Vec<&str> = corpus.tracks().iter().map(|t| t.track_id.as_str()).collect();
    let n = ids.len();
    let mut mix = RetrievalIndex::new(InputMode::Mixture);
    let mut voc = RetrievalIndex::new(InputMode::Vocals);
    for (m, p) in MODELS {
        for (k, id) in ids.iter().enumerate() {
            let x = ((k * p) % n) as f64 / n as f64 * std::f64::consts::TAU;
            mix.insert(id, m, &[x.cos(), x.sin()]).unwrap();
            voc.insert(id, m, &[x.sin(), 2.0 * x.cos()]).unwrap();
        }
    }
    (mix, voc)
}

struct Fixture {
    _dir: tempfile::TempDir,
    log: std::path::PathBuf,
    pool: TrialPool,
    corpus: Corpus,
    indexes: (RetrievalIndex, RetrievalIndex),
}

fn fixture() -> Fixture {
    let corpus = corpus();
    let (mix, voc) = indexes(&corpus);
    let queries = mix.common_tracks();
    let models: Vec<String> = MODELS.iter().map(|(m, _)| m.to_string()).collect();
    let (pool, _) =
        generate_pool(&mix, &voc, &queries, &models, &TrialConfig::default(), 4, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Fixture {
        log: dir.path().join("responses.jsonl"),
        _dir: dir,
        pool,
        corpus,
        indexes: (mix, voc),
    }
}

impl Fixture {
    fn study(&self, with_indexes: bool) -> Arc<Study> {
        let ix = with_indexes.then(|| self.indexes.clone());
        Arc::new(Study::open(self.pool.clone(), self.corpus.clone(), ix, &self.log, None).unwrap())
    }
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ctype)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = call(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    let v = if b.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&b).unwrap()
    };
    (s, v)
}

async fn post(app: &Router, trial: &str, body: String) -> (StatusCode, Value) {
    let req = Request::post(format!("/api/trials/{trial}/response"))
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let (s, b, _) = call(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn answer(respondent: &str, overall: &str, vocal: &str) -> String {
    json!({ "respondent": respondent, "overall_choice": overall, "vocal_choice": vocal })
        .to_string()
}

#[tokio::test]
async fn next_trial_contract_and_audio() {
    let f = fixture();
    let app = router(f.study(false));
    let (s, v) = get(&app, "/api/trials/next?respondent=alice").await;
    assert_eq!(s, StatusCode::OK);
    let session = f.pool.session("alice");
    assert_eq!(v["trial_id"], session[0].trial_id.as_str());
    assert_eq!(v["position"], 1);
    assert_eq!(v["total"], session.len());
    assert!(v.get("model_a").is_none(), "model ids must stay hidden");
    for key in ["query_url", "candidate_a_url", "candidate_b_url"] {
        let url = v[key].as_str().unwrap();
        let (s, body, ctype) = call(&app, Request::get(url).body(Body::empty()).unwrap()).await;
        assert_eq!(s, StatusCode::OK, "{url}");
        assert_eq!(ctype.as_deref(), Some("audio/wav"));
        assert_eq!(&body[..4], b"RIFF");
        assert_eq!(u32::from_le_bytes(body[24..28].try_into().unwrap()), 16_000);
        assert_eq!(u16::from_le_bytes(body[22..24].try_into().unwrap()), 1);
    }
}

#[tokio::test]
async fn audio_errors_and_window() {
    let f = fixture();
    let app = router(f.study(false));
    let id = &f.corpus.tracks()[0].track_id;
    let (s, _) = get(&app, &format!("/audio/{id}.mp3")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get(&app, "/audio/nope.wav").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, v) = get(&app, &format!("/audio/{id}.wav?mode=drums")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");

    let windowed = Arc::new(
        Study::open(f.pool.clone(), f.corpus.clone(), None, &f.log, Some(1.0)).unwrap(),
    );
    let app = router(windowed);
    let uri = format!("/audio/{id}.wav?mode=vocals");
    let (s, body, _) = call(&app, Request::get(uri).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    // 44-byte header plus one second of 16-bit samples.
    assert_eq!(body.len(), 44 + 2 * 16_000);
}

#[tokio::test]
async fn respondent_token_validation() {
    let f = fixture();
    let app = router(f.study(false));
    let long = "x".repeat(129);
    for uri in [
        "/api/trials/next".to_string(),
        "/api/trials/next?respondent=".to_string(),
        "/api/trials/next?respondent=a%20b".to_string(),
        format!("/api/trials/next?respondent={long}"),
    ] {
        let (s, v) = get(&app, &uri).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{uri}");
        assert!(v["detail"].is_string());
    }
}

#[tokio::test]
async fn response_submission_rules() {
    let f = fixture();
    let app = router(f.study(false));
    let trial = f.pool.session("bob")[0].trial_id.clone();

    let (s, v) = post(&app, "no-such-trial", answer("bob", "A", "B")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "not_found");
    let (s, _) = post(&app, &trial, "{not json".into()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app, &trial, answer("bob", "C", "A")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&app, &trial, answer("b o b", "A", "A")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    // A trial from a session other than the respondent's is refused.
    let other = f
        .pool
        .trials()
        .find(|t| !f.pool.session("bob").contains(t))
        .unwrap();
    let (s, _) = post(&app, &other.trial_id, answer("bob", "A", "A")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (s, _) = post(&app, &trial, answer("bob", "A", "B")).await;
    assert_eq!(s, StatusCode::CREATED);
    let (s, v) = post(&app, &trial, answer("bob", "B", "B")).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"], "duplicate");

    let log = std::fs::read_to_string(&f.log).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(log.ends_with('\n'));

    let (_, v) = get(&app, "/api/trials/next?respondent=bob").await;
    assert_eq!(v["position"], 2);
}

#[tokio::test]
async fn finished_session_returns_no_content_and_resumes_after_restart() {
    let f = fixture();
    let app = router(f.study(false));
    let session = f.pool.session("carol").to_vec();
    for t in &session[..3] {
        let (s, _) = post(&app, &t.trial_id, answer("carol", "A", "A")).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    // A fresh service over the same log resumes at the first unanswered trial.
    let app = router(f.study(false));
    let (_, v) = get(&app, "/api/trials/next?respondent=carol").await;
    assert_eq!(v["trial_id"], session[3].trial_id.as_str());
    for t in &session[3..] {
        let (s, _) = post(&app, &t.trial_id, answer("carol", "B", "A")).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    let (s, v) = get(&app, "/api/trials/next?respondent=carol").await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    assert_eq!(v, Value::Null);
}

#[tokio::test]
async fn winrate_endpoint_questions() {
    let f = fixture();
    let app = router(f.study(false));
    let (s, v) = get(&app, "/api/results/winrate").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["question"], "overall");
    assert_eq!(v["models"], json!(["a", "b", "c"]));
    let (s, v) = get(&app, "/api/results/winrate?question=vocal").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["question"], "vocal");
    let (s, v) = get(&app, "/api/results/winrate?question=tempo").await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");
}

#[tokio::test]
async fn agreement_endpoint() {
    let f = fixture();
    let (s, v) = get(&router(f.study(false)), "/api/results/agreement").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "unavailable");
    let (s, v) = get(&router(f.study(true)), "/api/results/agreement").await;
    assert_eq!(s, StatusCode::OK);
    for mode in ["mixture", "vocals"] {
        let cells = v[mode]["cells"].as_array().unwrap();
        assert_eq!(cells.len(), 3);
        for i in 0..3 {
            assert_eq!(cells[i][i], 100.0);
            for j in 0..3 {
                assert_eq!(cells[i][j], cells[j][i]);
            }
        }
    }
}

/// 200 responses over HTTP, then the matrices served live must equal those
/// recomputed from the persisted log, before and after a restart.
#[tokio::test]
async fn replay_matches_live_tallies() {
    let f = fixture();
    let study = f.study(true);
    let app = router(study.clone());
    let mut posted = 0;
    let mut r = 0;
    while posted < 200 {
        let who = format!("resp-{r:03}");
        r += 1;
        loop {
            let (s, v) = get(&app, &format!("/api/trials/next?respondent={who}")).await;
            if s == StatusCode::NO_CONTENT || posted == 200 {
                break;
            }
            let id = v["trial_id"].as_str().unwrap().to_string();
            let h = (r * 31 + posted * 17) % 7;
            let (o, voc) = (if h < 4 { "A" } else { "B" }, if h % 2 == 0 { "A" } else { "B" });
            let (s, _) = post(&app, &id, answer(&who, o, voc)).await;
            assert_eq!(s, StatusCode::CREATED);
            posted += 1;
        }
    }
    let text = std::fs::read_to_string(&f.log).unwrap();
    assert_eq!(text.lines().count(), 200);

    let restarted = f.study(true);
    for q in [Question::Overall, Question::Vocal] {
        let live = study.live_winrate(q);
        assert_eq!(live, study.replay_winrate(q).unwrap());
        assert_eq!(live, restarted.live_winrate(q));
        let served: Value = get(&app, &format!("/api/results/winrate?question={}", q.name()))
            .await
            .1;
        assert_eq!(served, serde_json::to_value(&live).unwrap());
        let mut with_data = 0;
        for i in 0..3 {
            for j in 0..3 {
                if i != j && live.comparisons[i][j] > 0 {
                    with_data += 1;
                    let sum = live.cells[i][j].unwrap() + live.cells[j][i].unwrap();
                    assert_eq!(sum, 100.0);
                }
            }
        }
        assert!(with_data > 0);
    }
    assert_eq!(study.agreement(), restarted.agreement());
}
