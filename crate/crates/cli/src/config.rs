//! Config file overrides and corpus loading.
//!
//! A config file is a JSON object with optional sections, each deserialized
//! over the defaults of the matching core type:
//!
//! ```json
//! { "synth": {...}, "split": {...}, "train": {...}, "sampler": {...},
//!   "eval": {...}, "index": {...}, "trials": {...} }
//! ```
//!
//! Command-line flags are applied on top.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use vocalsim::corpus::{
    artist_disjoint_split, build_synthetic_corpus, load_stem_directory, SynthParams,
};
use vocalsim::Corpus;

pub const CORPUS_FORMAT: &str = "vocalsim-corpus";

#[derive(Debug, Clone, Default)]
pub struct ConfigFile {
    root: serde_json::Map<String, serde_json::Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        let serde_json::Value::Object(root) = value else {
            bail!("config {} must be a JSON object", path.display());
        };
        const KNOWN: [&str; 7] = ["synth", "split", "train", "sampler", "eval", "index", "trials"];
        if let Some(k) = root.keys().find(|k| !KNOWN.contains(&k.as_str())) {
            bail!("config {}: unknown section {k:?} (known: {KNOWN:?})", path.display());
        }
        Ok(Self { root })
    }

    /// The `name` section over `T::default()`.
    pub fn section<T: DeserializeOwned + Default>(&self, name: &str) -> Result<T> {
        match self.root.get(name) {
            Some(v) => serde_json::from_value(v.clone())
                .with_context(|| format!("config section {name:?}")),
            None => Ok(T::default()),
        }
    }
}

/// Artist-disjoint split applied when a corpus is loaded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusRecipe {
    Synthetic {
        n_artists: usize,
        tracks_per_artist: usize,
        seed: u64,
        params: SynthParams,
    },
    Directory {
        path: String,
    },
}

/// `corpus.json`: how to rebuild a corpus, and the manifest hash it must
/// reproduce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub format: String,
    pub recipe: CorpusRecipe,
    pub split: SplitSpec,
    pub manifest_hash: String,
}

impl CorpusSpec {
    pub fn build(&self) -> Result<Corpus> {
        let corpus = match &self.recipe {
            CorpusRecipe::Synthetic {
                n_artists,
                tracks_per_artist,
                seed,
                params,
            } => build_synthetic_corpus(*n_artists, *tracks_per_artist, *seed, params)
                .context("corpus::build_synthetic_corpus")?,
            CorpusRecipe::Directory { path } => load_directory(Path::new(path))?,
        };
        artist_disjoint_split(corpus, self.split.ratios, self.split.seed)
            .context("corpus::artist_disjoint_split")
    }
}

fn load_directory(path: &Path) -> Result<Corpus> {
    let (corpus, diagnostics) = load_stem_directory(path)
        .with_context(|| format!("corpus::load_stem_directory({})", path.display()))?;
    for d in &diagnostics {
        log::warn!("{d}");
    }
    if corpus.is_empty() {
        bail!("corpus::load_stem_directory: no usable tracks under {}", path.display());
    }
    Ok(corpus)
}

/// Loads `path`, either a `corpus.json` written by `synth-corpus` or a stem
/// directory (split with `split`).
pub fn load_corpus(path: &Path, split: &SplitSpec) -> Result<(Corpus, CorpusSpec)> {
    if path.is_dir() {
        let spec = CorpusSpec {
            format: CORPUS_FORMAT.into(),
            recipe: CorpusRecipe::Directory {
                path: path.display().to_string(),
            },
            split: split.clone(),
            manifest_hash: String::new(),
        };
        let corpus = spec.build()?;
        let spec = CorpusSpec {
            manifest_hash: corpus.manifest_hash(),
            ..spec
        };
        return Ok((corpus, spec));
    }
    let bytes =
        std::fs::read(path).with_context(|| format!("reading corpus {}", path.display()))?;
    let spec: CorpusSpec = serde_json::from_slice(&bytes)
        .with_context(|| format!("parsing corpus {}", path.display()))?;
    if spec.format != CORPUS_FORMAT {
        bail!("{}: format {:?}, expected {CORPUS_FORMAT:?}", path.display(), spec.format);
    }
    let corpus = spec.build()?;
    if corpus.manifest_hash() != spec.manifest_hash {
        bail!(
            "corpus {} rebuilt with manifest hash {}, recorded {}",
            path.display(),
            corpus.manifest_hash(),
            spec.manifest_hash
        );
    }
    Ok((corpus, spec))
}

/// Parses `"1,2.5,5"`.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .with_context(|| format!("not a number: {x:?}"))
        })
        .collect()
}
