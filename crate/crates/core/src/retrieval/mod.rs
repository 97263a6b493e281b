//! Cosine retrieval over clip embeddings and the listening-test machinery
//! built on it: trials, the response log and winrate / agreement matrices.

mod responses;
mod trials;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use responses::{
    read_response_log, winrate_matrix, Choice, ModelTotal, Question, ResponseStore, Tally,
    TrialResponse, WinrateMatrix,
};
pub use trials::{generate_pool, generate_trials, session_for, Trial, TrialConfig, TrialPool};

use crate::audio::ACTIVITY_THRESHOLD;
use crate::corpus::Diagnostic;
use crate::corpus::{sha256_hex, Corpus, Partition};
use crate::error::{Error, Result};
use crate::eval::{dot, embed_clip, normalized_mean, EvalModel, InputMode};

/// How clips are turned into index entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    pub excerpt_len_s: f64,
    pub activity_threshold: f64,
    /// Only the first `window_s` seconds of excerpts represent a clip; the
    /// whole clip when unset.
    pub window_s: Option<f64>,
    /// Tracks of this partition only; every track when unset.
    pub partition: Option<Partition>,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            excerpt_len_s: 1.0,
            activity_threshold: ACTIVITY_THRESHOLD,
            window_s: None,
            partition: Some(Partition::Test),
        }
    }
}

/// Unit-norm clip embeddings keyed by model id, then track id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub input_mode: InputMode,
    entries: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
}

impl RetrievalIndex {
    pub fn new(input_mode: InputMode) -> Self {
        Self {
            input_mode,
            entries: BTreeMap::new(),
        }
    }

    /// Adds `embedding` (normalized here) for `(track_id, model_id)`.
    pub fn insert(&mut self, track_id: &str, model_id: &str, embedding: &[f64]) -> Result<()> {
        if embedding.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("index embedding"));
        }
        let norm = dot(embedding, embedding).sqrt();
        if norm == 0.0 {
            return Err(Error::Config(format!(
                "zero embedding for track {track_id} under model {model_id}"
            )));
        }
        let model = self.entries.entry(model_id.to_owned()).or_default();
        if let Some(d) = model.values().next().map(Vec::len) {
            if d != embedding.len() {
                return Err(Error::Dimension {
                    what: "index embedding",
                    expected: d,
                    got: embedding.len(),
                });
            }
        }
        if model.contains_key(track_id) {
            return Err(Error::Duplicate(format!(
                "index entry ({track_id}, {model_id})"
            )));
        }
        model.insert(
            track_id.to_owned(),
            embedding.iter().map(|v| v / norm).collect(),
        );
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn models(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    /// Track ids indexed under `model_id`, sorted.
    pub fn tracks(&self, model_id: &str) -> Vec<String> {
        self.entries
            .get(model_id)
            .map(|m| m.keys().cloned().collect())
            .unwrap_or_default()
    }

    pub fn embedding(&self, model_id: &str, track_id: &str) -> Option<&[f64]> {
        self.entries
            .get(model_id)
            .and_then(|m| m.get(track_id))
            .map(Vec::as_slice)
    }

    /// All `(track_id, model_id, embedding)` triples in key order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, &[f64])> + '_ {
        self.entries.iter().flat_map(|(m, tracks)| {
            tracks
                .iter()
                .map(move |(t, e)| (t.as_str(), m.as_str(), e.as_slice()))
        })
    }

    /// The `k` entries of `model_id` most similar to `query_track` (itself
    /// excluded), by descending cosine similarity then track id.
    pub fn query_top_k(
        &self,
        model_id: &str,
        query_track: &str,
        k: usize,
    ) -> Result<Vec<(String, f64)>> {
        let model = self
            .entries
            .get(model_id)
            .ok_or_else(|| Error::NotFound(format!("model {model_id} in index")))?;
        let q = model.get(query_track).ok_or_else(|| {
            Error::NotFound(format!("query {query_track} under model {model_id}"))
        })?;
        let mut scored: Vec<(String, f64)> = model
            .iter()
            .filter(|(t, _)| t.as_str() != query_track)
            .map(|(t, e)| (t.clone(), dot(q, e)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Most similar other track under `model_id`. Exact ties go to the
    /// lexicographically smallest track id.
    pub fn query_top1(&self, model_id: &str, query_track: &str) -> Result<String> {
        self.query_top_k(model_id, query_track, 1)?
            .pop()
            .map(|(t, _)| t)
            .ok_or_else(|| {
                Error::InsufficientData(format!(
                    "no candidates besides {query_track} under model {model_id}"
                ))
            })
    }

    /// Tracks indexed under every model.
    pub fn common_tracks(&self) -> Vec<String> {
        let mut it = self.entries.values();
        let Some(first) = it.next() else {
            return Vec::new();
        };
        let rest: Vec<_> = it.collect();
        first
            .keys()
            .filter(|t| rest.iter().all(|m| m.contains_key(*t)))
            .cloned()
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let index: RetrievalIndex = serde_json::from_slice(bytes)?;
        for (t, m, e) in index.entries() {
            let n = dot(e, e).sqrt();
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::Config(format!(
                    "index entry ({t}, {m}) has norm {n}, expected 1"
                )));
            }
        }
        Ok(index)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

/// Indexes every clip of `corpus` (restricted per `config`) under each of
/// `models`. Clips without vocal activity are skipped with a diagnostic.
pub fn build_index(
    corpus: &Corpus,
    models: &[(String, &EvalModel)],
    input_mode: InputMode,
    config: &IndexConfig,
) -> Result<(RetrievalIndex, Vec<Diagnostic>)> {
    if corpus.is_empty() {
        return Err(Error::InsufficientData(
            "cannot index an empty corpus".into(),
        ));
    }
    if let Some(w) = config.window_s {
        if !(w >= config.excerpt_len_s) {
            return Err(Error::Config(format!(
                "query window {w} s is shorter than one {} s excerpt",
                config.excerpt_len_s
            )));
        }
    }
    let mut index = RetrievalIndex::new(input_mode);
    let mut diagnostics = Vec::new();
    for (model_id, model) in models {
        for track in corpus.tracks() {
            if config
                .partition
                .is_some_and(|p| corpus.partition_of(&track.track_id) != Some(p))
            {
                continue;
            }
            let clip = match embed_clip(
                track,
                &model.state,
                input_mode,
                config.excerpt_len_s,
                config.activity_threshold,
            ) {
                Ok(c) => c,
                Err(Error::NoActiveVocals { .. }) => {
                    let d = Diagnostic {
                        track_id: Some(track.track_id.clone()),
                        message: format!("no vocal-active excerpt, not indexed for {model_id}"),
                    };
                    log::warn!("{d}");
                    diagnostics.push(d);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let embedding = match config.window_s {
                Some(w) => {
                    let n = ((w / config.excerpt_len_s + 1e-9).floor() as usize).max(1);
                    let n = n.min(clip.excerpt_embeddings.len());
                    normalized_mean(&clip.excerpt_embeddings[..n])
                }
                None => clip.mean_embedding,
            };
            index.insert(&track.track_id, model_id, &embedding)?;
        }
    }
    if index.is_empty() {
        return Err(Error::InsufficientData("no clip could be indexed".into()));
    }
    Ok((index, diagnostics))
}

/// Pairwise percentage of queries for which two models return the same
/// top-1 recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub input_mode: InputMode,
    pub models: Vec<String>,
    pub queries: usize,
    pub cells: Vec<Vec<f64>>,
}

pub fn agreement_matrix(
    index: &RetrievalIndex,
    models: &[String],
    queries: &[String],
) -> Result<AgreementMatrix> {
    if queries.is_empty() {
        return Err(Error::InsufficientData(
            "agreement needs at least one query".into(),
        ));
    }
    let recs = models
        .iter()
        .map(|m| {
            queries
                .iter()
                .map(|q| index.query_top1(m, q))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let k = models.len();
    let mut cells = vec![vec![100.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let same = recs[i].iter().zip(&recs[j]).filter(|(a, b)| a == b).count();
            let pct = 100.0 * same as f64 / queries.len() as f64;
            cells[i][j] = pct;
            cells[j][i] = pct;
        }
    }
    Ok(AgreementMatrix {
        input_mode: index.input_mode,
        models: models.to_vec(),
        queries: queries.len(),
        cells,
    })
}
