//! Listening-test trials: a query plus the top-1 recommendations of two
//! different models.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RetrievalIndex;
use crate::corpus::sha256_hex;
use crate::corpus::Diagnostic;
use crate::error::{Error, Result};
use crate::eval::InputMode;
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub trial_id: String,
    pub query_track: String,
    pub model_a: String,
    pub model_b: String,
    pub recommendation_a: String,
    pub recommendation_b: String,
    pub input_mode: InputMode,
}

impl Trial {
    /// Both models recommended the same track; such trials are kept only as
    /// attention checks and never counted in winrates.
    pub fn is_control(&self) -> bool {
        self.recommendation_a == self.recommendation_b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrialConfig {
    pub n_per_respondent: usize,
    /// Probability of keeping a trial whose two recommendations coincide.
    pub control_fraction: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        Self {
            n_per_respondent: 20,
            control_fraction: 0.05,
        }
    }
}

impl TrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_respondent == 0 {
            return Err(Error::Config("n_per_respondent must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.control_fraction) {
            return Err(Error::Config(format!(
                "control_fraction {} outside [0, 1]",
                self.control_fraction
            )));
        }
        Ok(())
    }
}

fn check_models(models: &[String]) -> Result<()> {
    let distinct: BTreeSet<&String> = models.iter().collect();
    if distinct.len() < 2 || distinct.len() != models.len() {
        return Err(Error::Config(format!(
            "trials need at least 2 distinct models, got {models:?}"
        )));
    }
    Ok(())
}

/// One respondent's trials: the first half (rounded up) in mixture mode and
/// the rest in vocals mode, then shuffled. Each query is used at most once
/// per mode. Ids are `{id_prefix}{k:02}`.
pub fn generate_trials<R: Rng>(
    mixture: &RetrievalIndex,
    vocals: &RetrievalIndex,
    queries: &[String],
    models: &[String],
    config: &TrialConfig,
    id_prefix: &str,
    rng: &mut R,
) -> Result<(Vec<Trial>, Vec<Diagnostic>)> {
    config.validate()?;
    check_models(models)?;
    if mixture.input_mode != InputMode::Mixture || vocals.input_mode != InputMode::Vocals {
        return Err(Error::Config(
            "trial generation needs one mixture index and one vocals index".into(),
        ));
    }
    let n = config.n_per_respondent;
    let quotas = [(mixture, n - n / 2), (vocals, n / 2)];
    let mut trials = Vec::with_capacity(n);
    let mut diagnostics = Vec::new();
    for (index, quota) in quotas {
        let mut qs = queries.to_vec();
        qs.shuffle(rng);
        let mut got = 0;
        for q in qs {
            if got == quota {
                break;
            }
            let a = rng.random_range(0..models.len());
            let mut b = rng.random_range(0..models.len() - 1);
            if b >= a {
                b += 1;
            }
            let trial = Trial {
                trial_id: String::new(),
                recommendation_a: index.query_top1(&models[a], &q)?,
                recommendation_b: index.query_top1(&models[b], &q)?,
                query_track: q,
                model_a: models[a].clone(),
                model_b: models[b].clone(),
                input_mode: index.input_mode,
            };
            if trial.is_control() && rng.random::<f64>() >= config.control_fraction {
                continue;
            }
            trials.push(trial);
            got += 1;
        }
        if got < quota {
            let d = Diagnostic {
                track_id: None,
                message: format!(
                    "query pool exhausted: {got} of {quota} {} trials for {id_prefix}",
                    index.input_mode.name()
                ),
            };
            log::warn!("{d}");
            diagnostics.push(d);
        }
    }
    trials.shuffle(rng);
    for (k, t) in trials.iter_mut().enumerate() {
        t.trial_id = format!("{id_prefix}{k:02}");
    }
    Ok((trials, diagnostics))
}

/// Pre-generated sessions; a respondent is served the session picked by
/// [`session_for`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialPool {
    pub seed: u64,
    pub config: TrialConfig,
    pub models: Vec<String>,
    pub sessions: Vec<Vec<Trial>>,
}

impl TrialPool {
    pub fn trial(&self, trial_id: &str) -> Option<&Trial> {
        self.sessions
            .iter()
            .flatten()
            .find(|t| t.trial_id == trial_id)
    }

    pub fn trials(&self) -> impl Iterator<Item = &Trial> + '_ {
        self.sessions.iter().flatten()
    }

    pub fn session(&self, respondent: &str) -> &[Trial] {
        &self.sessions[session_for(respondent, self.sessions.len())]
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(self)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let pool: TrialPool = serde_json::from_slice(bytes)?;
        if pool.sessions.is_empty() {
            return Err(Error::Config("trial pool has no sessions".into()));
        }
        let mut ids = BTreeSet::new();
        for t in pool.trials() {
            if !ids.insert(t.trial_id.as_str()) {
                return Err(Error::Duplicate(format!("trial id {}", t.trial_id)));
            }
        }
        Ok(pool)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(sha256_hex(&self.to_bytes()?))
    }
}

/// Stable session slot for a respondent token.
pub fn session_for(respondent: &str, n_sessions: usize) -> usize {
    let digest = Sha256::digest(respondent.as_bytes());
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(head) % n_sessions.max(1) as u64) as usize
}

/// Generates `n_sessions` independent sessions; session `s` draws from
/// the stream `(seed, "trials", s)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_pool(
    mixture: &RetrievalIndex,
    vocals: &RetrievalIndex,
    queries: &[String],
    models: &[String],
    config: &TrialConfig,
    n_sessions: usize,
    seed: u64,
) -> Result<(TrialPool, Vec<Diagnostic>)> {
    if n_sessions == 0 {
        return Err(Error::Config("need at least one session".into()));
    }
    let mut sessions = Vec::with_capacity(n_sessions);
    let mut diagnostics = Vec::new();
    for s in 0..n_sessions {
        let mut rng = seeding::stream(seed, &[seeding::label("trials"), s as u64]);
        let (trials, d) = generate_trials(
            mixture,
            vocals,
            queries,
            models,
            config,
            &format!("s{s:03}-t"),
            &mut rng,
        )?;
        sessions.push(trials);
        diagnostics.extend(d);
    }
    Ok((
        TrialPool {
            seed,
            config: config.clone(),
            models: models.to_vec(),
            sessions,
        },
        diagnostics,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// 30 tracks on a circle, placed at `i · p mod 30` for a model-specific
    /// `p` coprime to 30, so models with different `p` never share a
    /// nearest neighbour.
    fn indexes(models: &[(&str, usize)]) -> (RetrievalIndex, RetrievalIndex, Vec<String>) {
        let mut mix = RetrievalIndex::new(InputMode::Mixture);
        let mut voc = RetrievalIndex::new(InputMode::Vocals);
        let tracks: Vec<String> = (0..30).map(|i| format!("t{i:02}")).collect();
        for (m, p) in models {
            for (i, t) in tracks.iter().enumerate() {
                let x = ((i * p) % 30) as f64 / 30.0 * std::f64::consts::TAU;
                mix.insert(t, m, &[x.cos(), x.sin()]).unwrap();
                voc.insert(t, m, &[x.sin(), x.cos()]).unwrap();
            }
        }
        (mix, voc, tracks)
    }

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn quota_split_and_invariants() {
        let (mix, voc, q) = indexes(&[("a", 1), ("b", 7), ("c", 11)]);
        let mut rng = seeding::stream(3, &[]);
        let cfg = TrialConfig {
            control_fraction: 0.0,
            ..TrialConfig::default()
        };
        let (trials, diags) =
            generate_trials(&mix, &voc, &q, &ids(&["a", "b", "c"]), &cfg, "r-", &mut rng).unwrap();
        assert!(diags.is_empty());
        assert_eq!(trials.len(), 20);
        let n_mix = trials
            .iter()
            .filter(|t| t.input_mode == InputMode::Mixture)
            .count();
        assert_eq!(n_mix, 10);
        for t in &trials {
            assert_ne!(t.model_a, t.model_b);
            assert_ne!(t.recommendation_a, t.query_track);
            assert_ne!(t.recommendation_b, t.query_track);
            assert!(!t.is_control());
        }
        let unique: BTreeSet<_> = trials.iter().map(|t| &t.trial_id).collect();
        assert_eq!(unique.len(), 20);
    }

    #[test]
    fn identical_models_yield_no_trials_without_controls() {
        let (mix, voc, q) = indexes(&[("a", 1), ("a2", 1)]);
        let cfg = TrialConfig {
            control_fraction: 0.0,
            ..TrialConfig::default()
        };
        let mut rng = seeding::stream(1, &[]);
        let (trials, diags) =
            generate_trials(&mix, &voc, &q, &ids(&["a", "a2"]), &cfg, "r-", &mut rng).unwrap();
        assert!(trials.is_empty());
        assert_eq!(diags.len(), 2);
        let cfg = TrialConfig {
            control_fraction: 1.0,
            ..TrialConfig::default()
        };
        let (trials, _) =
            generate_trials(&mix, &voc, &q, &ids(&["a", "a2"]), &cfg, "r-", &mut rng).unwrap();
        assert_eq!(trials.len(), 20);
        assert!(trials.iter().all(Trial::is_control));
    }

    #[test]
    fn single_model_rejected() {
        let (mix, voc, q) = indexes(&[("a", 1)]);
        let mut rng = seeding::stream(1, &[]);
        let cfg = TrialConfig::default();
        assert!(generate_trials(&mix, &voc, &q, &ids(&["a"]), &cfg, "r-", &mut rng).is_err());
        assert!(generate_trials(&mix, &voc, &q, &ids(&["a", "a"]), &cfg, "r-", &mut rng).is_err());
        assert!(generate_trials(&voc, &mix, &q, &ids(&["a"]), &cfg, "r-", &mut rng).is_err());
    }

    #[test]
    fn short_query_pool_gives_shorter_list() {
        let (mix, voc, q) = indexes(&[("a", 1), ("b", 7)]);
        let mut rng = seeding::stream(1, &[]);
        let cfg = TrialConfig {
            control_fraction: 1.0,
            ..TrialConfig::default()
        };
        let (trials, diags) =
            generate_trials(&mix, &voc, &q[..4], &ids(&["a", "b"]), &cfg, "r-", &mut rng).unwrap();
        assert_eq!(trials.len(), 8);
        assert_eq!(diags.len(), 2);
    }

    #[test]
    fn pool_is_deterministic_and_round_trips() {
        let (mix, voc, q) = indexes(&[("a", 1), ("b", 7), ("c", 11)]);
        let m = ids(&["a", "b", "c"]);
        let cfg = TrialConfig::default();
        let (p1, _) = generate_pool(&mix, &voc, &q, &m, &cfg, 4, 9).unwrap();
        let (p2, _) = generate_pool(&mix, &voc, &q, &m, &cfg, 4, 9).unwrap();
        assert_eq!(p1.hash().unwrap(), p2.hash().unwrap());
        let (p3, _) = generate_pool(&mix, &voc, &q, &m, &cfg, 4, 10).unwrap();
        assert_ne!(p1.hash().unwrap(), p3.hash().unwrap());
        let back = TrialPool::from_bytes(&p1.to_bytes().unwrap()).unwrap();
        assert_eq!(back, p1);
        let s = p1.session("alice");
        assert_eq!(s, p1.session("alice"));
        assert_eq!(p1.trial(&s[3].trial_id), Some(&s[3]));
        assert!(p1.trial("nope").is_none());
    }
}
