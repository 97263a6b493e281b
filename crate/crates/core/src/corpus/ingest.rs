//! Stem directory layout:
//!
//! ```text
//! <root>/manifest.json               { "<track_id>": { "artist_id": "...", "gender": "male" }, ... }
//! <root>/<track_id>/vocals.wav
//! <root>/<track_id>/accompaniment.wav
//! ```
//!
//! Broken tracks are skipped with a diagnostic; loading continues.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusSource, Gender, StemTrack};
use crate::audio::{read_wav, write_wav, WavFormat};
use crate::error::Result;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCALS_FILE: &str = "vocals.wav";
pub const ACCOMPANIMENT_FILE: &str = "accompaniment.wav";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub artist_id: String,
    #[serde(default = "unknown_gender")]
    pub gender: Gender,
}

fn unknown_gender() -> Gender {
    Gender::Unknown
}

/// A non-fatal problem found while loading.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub track_id: Option<String>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.track_id {
            Some(id) => write!(f, "track {id}: {}", self.message),
            None => f.write_str(&self.message),
        }
    }
}

fn diag(track_id: Option<&str>, message: impl Into<String>) -> Diagnostic {
    let d = Diagnostic {
        track_id: track_id.map(str::to_owned),
        message: message.into(),
    };
    log::warn!("{d}");
    d
}

/// Loads every valid track under `root`. Tracks land in the training
/// partition; apply [`super::artist_disjoint_split`] afterwards.
pub fn load_stem_directory(root: &Path) -> Result<(Corpus, Vec<Diagnostic>)> {
    let mut diagnostics = Vec::new();
    let manifest_path = root.join(MANIFEST_FILE);
    let manifest: BTreeMap<String, ManifestRecord> = if manifest_path.is_file() {
        serde_json::from_slice(&std::fs::read(&manifest_path)?)?
    } else {
        diagnostics.push(diag(
            None,
            format!("{} has no {MANIFEST_FILE}", root.display()),
        ));
        BTreeMap::new()
    };

    let mut dirs: Vec<String> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    dirs.sort();

    let mut tracks = Vec::new();
    for track_id in dirs {
        let Some(record) = manifest.get(&track_id) else {
            diagnostics.push(diag(Some(&track_id), "not listed in manifest, skipped"));
            continue;
        };
        let dir = root.join(&track_id);
        let load = |file: &str| -> std::result::Result<_, String> {
            let p = dir.join(file);
            if !p.is_file() {
                return Err(format!("missing {file}"));
            }
            read_wav(&p).map_err(|e| e.to_string())
        };
        let stems = load(VOCALS_FILE).and_then(|v| load(ACCOMPANIMENT_FILE).map(|a| (v, a)));
        match stems.and_then(|(v, a)| {
            StemTrack::new(&track_id, &record.artist_id, record.gender, v, a)
                .map_err(|e| e.to_string())
        }) {
            Ok(t) => tracks.push(t),
            Err(msg) => diagnostics.push(diag(Some(&track_id), format!("{msg}, skipped"))),
        }
    }
    for id in manifest.keys() {
        if !root.join(id).is_dir() {
            diagnostics.push(diag(Some(id), "listed in manifest but directory missing"));
        }
    }
    if tracks.is_empty() {
        diagnostics.push(diag(
            None,
            format!("no usable tracks under {}", root.display()),
        ));
    }
    let corpus = Corpus::new(
        tracks,
        CorpusSource::Directory {
            path: root.display().to_string(),
        },
    )?;
    Ok((corpus, diagnostics))
}

/// Writes a corpus in the stem directory layout.
pub fn write_stem_directory(corpus: &Corpus, root: &Path, format: WavFormat) -> Result<()> {
    std::fs::create_dir_all(root)?;
    let mut manifest = BTreeMap::new();
    for t in corpus.tracks() {
        let dir = root.join(&t.track_id);
        std::fs::create_dir_all(&dir)?;
        write_wav(&dir.join(VOCALS_FILE), &t.vocals, format)?;
        write_wav(&dir.join(ACCOMPANIMENT_FILE), &t.accompaniment, format)?;
        manifest.insert(
            t.track_id.clone(),
            ManifestRecord {
                artist_id: t.artist_id.clone(),
                gender: t.gender,
            },
        );
    }
    std::fs::write(
        root.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}
