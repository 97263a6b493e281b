//! Listening-test responses: the append-only log and the winrate tallies
//! folded from it.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Trial, TrialPool};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialResponse {
    pub trial_id: String,
    pub respondent_id: String,
    pub overall_choice: Choice,
    pub vocal_choice: Choice,
    /// Milliseconds since the Unix epoch, as recorded by the server.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Question {
    Overall,
    Vocal,
}

impl Question {
    pub fn name(self) -> &'static str {
        match self {
            Question::Overall => "overall",
            Question::Vocal => "vocal",
        }
    }
}

impl FromStr for Question {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "overall" => Ok(Question::Overall),
            "vocal" | "vocals" => Ok(Question::Vocal),
            other => Err(Error::Config(format!(
                "unknown question {other:?} (expected overall or vocal)"
            ))),
        }
    }
}

/// Pairwise win counts keyed by `(winner, loser)`, one map per question.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Tally {
    overall: BTreeMap<(String, String), usize>,
    vocal: BTreeMap<(String, String), usize>,
}

impl Tally {
    /// Counts `response` to `trial`; control trials are ignored.
    pub fn record(&mut self, trial: &Trial, response: &TrialResponse) -> Result<()> {
        if trial.trial_id != response.trial_id {
            return Err(Error::Config(format!(
                "response for {} recorded against trial {}",
                response.trial_id, trial.trial_id
            )));
        }
        if trial.is_control() {
            return Ok(());
        }
        let pair = |c: Choice| match c {
            Choice::A => (trial.model_a.clone(), trial.model_b.clone()),
            Choice::B => (trial.model_b.clone(), trial.model_a.clone()),
        };
        *self
            .overall
            .entry(pair(response.overall_choice))
            .or_default() += 1;
        *self.vocal.entry(pair(response.vocal_choice)).or_default() += 1;
        Ok(())
    }

    fn wins(&self, question: Question) -> &BTreeMap<(String, String), usize> {
        match question {
            Question::Overall => &self.overall,
            Question::Vocal => &self.vocal,
        }
    }

    pub fn matrix(&self, models: &[String], question: Question) -> WinrateMatrix {
        let wins = self.wins(question);
        let w = |i: usize, j: usize| {
            wins.get(&(models[i].clone(), models[j].clone()))
                .copied()
                .unwrap_or(0)
        };
        let k = models.len();
        let mut cells = vec![vec![None; k]; k];
        let mut comparisons = vec![vec![0; k]; k];
        for i in 0..k {
            for j in i + 1..k {
                let (wij, wji) = (w(i, j), w(j, i));
                let n = wij + wji;
                comparisons[i][j] = n;
                comparisons[j][i] = n;
                if n == 0 {
                    continue;
                }
                // The larger share is computed and the other is its exact
                // complement, so each pair of cells sums to exactly 100.
                let hi = 100.0 * wij.max(wji) as f64 / n as f64;
                let (cij, cji) = if wij >= wji {
                    (hi, 100.0 - hi)
                } else {
                    (100.0 - hi, hi)
                };
                cells[i][j] = Some(cij);
                cells[j][i] = Some(cji);
            }
        }
        let totals = models
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let wins: usize = (0..k).filter(|&j| j != i).map(|j| w(i, j)).sum();
                let losses: usize = (0..k).filter(|&j| j != i).map(|j| w(j, i)).sum();
                ModelTotal {
                    model: m.clone(),
                    wins,
                    losses,
                    winrate: (wins + losses > 0)
                        .then(|| 100.0 * wins as f64 / (wins + losses) as f64),
                }
            })
            .collect();
        WinrateMatrix {
            question,
            models: models.to_vec(),
            cells,
            comparisons,
            totals,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTotal {
    pub model: String,
    pub wins: usize,
    pub losses: usize,
    /// Percentage of comparisons won; `None` without comparisons.
    pub winrate: Option<f64>,
}

/// `cells[i][j]` is the percentage of comparisons between models `i` and
/// `j` in which `i` was chosen; `None` on the diagonal and without data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinrateMatrix {
    pub question: Question,
    pub models: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
    pub comparisons: Vec<Vec<usize>>,
    pub totals: Vec<ModelTotal>,
}

/// Folds `responses` into a winrate matrix over `pool.models`.
pub fn winrate_matrix(
    pool: &TrialPool,
    responses: &[TrialResponse],
    question: Question,
) -> Result<WinrateMatrix> {
    let trials: BTreeMap<&str, &Trial> = pool.trials().map(|t| (t.trial_id.as_str(), t)).collect();
    let mut tally = Tally::default();
    for r in responses {
        let t = trials
            .get(r.trial_id.as_str())
            .ok_or_else(|| Error::NotFound(format!("trial {}", r.trial_id)))?;
        tally.record(t, r)?;
    }
    Ok(tally.matrix(&pool.models, question))
}

fn parse_log(path: &Path, text: &str) -> Result<(Vec<TrialResponse>, usize)> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut good_len = 0;
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        offset += line.len();
        let complete = line.ends_with('\n');
        let body = line.trim_end_matches(['\n', '\r']);
        if body.trim().is_empty() {
            good_len = offset;
            continue;
        }
        // A final line without its newline was cut off mid-write.
        if !complete {
            log::warn!(
                "{}: ignoring truncated final line {}",
                path.display(),
                n + 1
            );
            break;
        }
        let r: TrialResponse = serde_json::from_str(body).map_err(|e| Error::ResponseLog {
            path: path.to_owned(),
            line: n + 1,
            message: e.to_string(),
        })?;
        if !seen.insert((r.trial_id.clone(), r.respondent_id.clone())) {
            return Err(Error::ResponseLog {
                path: path.to_owned(),
                line: n + 1,
                message: format!(
                    "duplicate response to {} by {}",
                    r.trial_id, r.respondent_id
                ),
            });
        }
        out.push(r);
        good_len = offset;
    }
    Ok((out, good_len))
}

/// Reads every complete response in the log at `path`.
pub fn read_response_log(path: &Path) -> Result<Vec<TrialResponse>> {
    let text = std::fs::read_to_string(path)?;
    Ok(parse_log(path, &text)?.0)
}

/// Append-only JSON-lines response log. Each append is flushed and synced
/// before it returns.
#[derive(Debug)]
pub struct ResponseStore {
    path: PathBuf,
    file: File,
    responses: Vec<TrialResponse>,
    seen: BTreeSet<(String, String)>,
}

impl ResponseStore {
    /// Opens (creating if needed) the log at `path` and loads its contents.
    /// A truncated final line left by a crash is cut off.
    pub fn open(path: &Path) -> Result<Self> {
        let text = match std::fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(e.into()),
        };
        let (responses, good_len) = parse_log(path, &text)?;
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        if good_len < text.len() {
            file.set_len(good_len as u64)?;
        }
        let seen = responses
            .iter()
            .map(|r| (r.trial_id.clone(), r.respondent_id.clone()))
            .collect();
        Ok(Self {
            path: path.to_owned(),
            file,
            responses,
            seen,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn responses(&self) -> &[TrialResponse] {
        &self.responses
    }

    pub fn contains(&self, trial_id: &str, respondent_id: &str) -> bool {
        self.seen
            .contains(&(trial_id.to_owned(), respondent_id.to_owned()))
    }

    /// Durably appends `response`; a second response by the same respondent
    /// to the same trial is rejected.
    pub fn append(&mut self, response: TrialResponse) -> Result<()> {
        let key = (response.trial_id.clone(), response.respondent_id.clone());
        if self.seen.contains(&key) {
            return Err(Error::Duplicate(format!(
                "response to {} by {}",
                key.0, key.1
            )));
        }
        let mut line = serde_json::to_vec(&response)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        self.file.flush()?;
        self.file.sync_data()?;
        self.seen.insert(key);
        self.responses.push(response);
        Ok(())
    }
}
