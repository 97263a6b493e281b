//! Stem-level datasets: tracks with vocal and accompaniment stems, mixture
//! construction, artist-disjoint splits and provenance hashing.

mod ingest;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::{seconds_to_samples, AudioBuffer, SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::seeding;

pub use ingest::{load_stem_directory, write_stem_directory, Diagnostic, ManifestRecord};
pub use synth::{
    build_synthetic_corpus, synth_track, synthetic_profiles, ArtistProfile, SynthParams,
    GENDER_BOUNDARY_HZ,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Male,
    Female,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Valid,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Valid, Partition::Test];
}

/// One song: its separated vocal and accompaniment stems plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct StemTrack {
    pub track_id: String,
    pub artist_id: String,
    pub gender: Gender,
    pub vocals: AudioBuffer,
    pub accompaniment: AudioBuffer,
}

impl StemTrack {
    pub fn new(
        track_id: impl Into<String>,
        artist_id: impl Into<String>,
        gender: Gender,
        vocals: AudioBuffer,
        accompaniment: AudioBuffer,
    ) -> Result<Self> {
        let artist_id = artist_id.into();
        if artist_id.is_empty() {
            return Err(Error::Config("artist_id must be non-empty".into()));
        }
        if vocals.len() != accompaniment.len() {
            return Err(Error::LengthMismatch {
                left: vocals.len(),
                right: accompaniment.len(),
            });
        }
        Ok(Self {
            track_id: track_id.into(),
            artist_id,
            gender,
            vocals,
            accompaniment,
        })
    }

    pub fn len(&self) -> usize {
        self.vocals.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn duration(&self) -> f64 {
        self.vocals.duration()
    }

    /// Number of whole 5 s segments.
    pub fn segment_count(&self) -> usize {
        self.len() / seconds_to_samples(SEGMENT_SECONDS)
    }

    /// Mixture of `len` samples starting at `start`.
    pub fn mixture_slice(&self, start: usize, len: usize) -> Result<AudioBuffer> {
        let v = &self.vocals.samples()[start..start + len];
        let a = &self.accompaniment.samples()[start..start + len];
        Ok(mix_slices(v, a))
    }
}

/// Samplewise sum hard-clamped to `[-1, 1]`. Slices must have equal length.
pub(crate) fn mix_slices(a: &[f32], b: &[f32]) -> AudioBuffer {
    debug_assert_eq!(a.len(), b.len());
    let samples = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x + y).clamp(-1.0, 1.0))
        .collect();
    AudioBuffer::new(samples).expect("clamped sum of valid buffers is valid")
}

/// Full-length mixture of a track's stems.
pub fn mixture(track: &StemTrack) -> Result<AudioBuffer> {
    mix_buffers(&track.vocals, &track.accompaniment)
}

pub(crate) fn mix_buffers(a: &AudioBuffer, b: &AudioBuffer) -> Result<AudioBuffer> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    Ok(mix_slices(a.samples(), b.samples()))
}

/// Where a corpus came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic {
        n_artists: usize,
        tracks_per_artist: usize,
        seed: u64,
        duration_s: f64,
    },
    Directory {
        path: String,
    },
    Custom,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub track_id: String,
    pub artist_id: String,
    pub gender: Gender,
    pub samples: usize,
    pub audio_sha256: String,
}

/// Content manifest of a corpus; its hash identifies the audio and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub source: CorpusSource,
    pub tracks: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn hash(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("manifest serializes"))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn audio_digest(track: &StemTrack) -> String {
    let mut h = Sha256::new();
    for s in track.vocals.samples() {
        h.update(s.to_le_bytes());
    }
    for s in track.accompaniment.samples() {
        h.update(s.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// An immutable set of tracks with a total train/valid/test assignment.
#[derive(Debug, Clone)]
pub struct Corpus {
    tracks: Vec<StemTrack>,
    split: BTreeMap<String, Partition>,
    manifest: CorpusManifest,
}

impl Corpus {
    /// Builds a corpus with every track in the training partition.
    pub fn new(tracks: Vec<StemTrack>, source: CorpusSource) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for t in &tracks {
            if !seen.insert(t.track_id.clone()) {
                return Err(Error::Duplicate(format!("track id {}", t.track_id)));
            }
        }
        let manifest = CorpusManifest {
            source,
            tracks: tracks
                .iter()
                .map(|t| ManifestEntry {
                    track_id: t.track_id.clone(),
                    artist_id: t.artist_id.clone(),
                    gender: t.gender,
                    samples: t.len(),
                    audio_sha256: audio_digest(t),
                })
                .collect(),
        };
        let split = tracks
            .iter()
            .map(|t| (t.track_id.clone(), Partition::Train))
            .collect();
        Ok(Self {
            tracks,
            split,
            manifest,
        })
    }

    pub fn tracks(&self) -> &[StemTrack] {
        &self.tracks
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn track(&self, track_id: &str) -> Option<&StemTrack> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    pub fn split(&self) -> &BTreeMap<String, Partition> {
        &self.split
    }

    pub fn partition_of(&self, track_id: &str) -> Option<Partition> {
        self.split.get(track_id).copied()
    }

    pub fn manifest(&self) -> &CorpusManifest {
        &self.manifest
    }

    /// Hash of the audio content and labels (independent of the split).
    pub fn manifest_hash(&self) -> String {
        self.manifest.hash()
    }

    /// Hash of content plus split assignment.
    pub fn fingerprint(&self) -> String {
        let split = serde_json::to_vec(&self.split).expect("split serializes");
        sha256_hex(&[self.manifest_hash().as_bytes(), &split].concat())
    }

    /// Tracks of one partition, in corpus order.
    pub fn partition(&self, part: Partition) -> impl Iterator<Item = &StemTrack> + '_ {
        self.tracks
            .iter()
            .filter(move |t| self.split.get(&t.track_id) == Some(&part))
    }

    /// Sorted distinct artist ids, optionally restricted to one partition.
    pub fn artists(&self, part: Option<Partition>) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .tracks
            .iter()
            .filter(|t| part.is_none_or(|p| self.split.get(&t.track_id) == Some(&p)))
            .map(|t| t.artist_id.as_str())
            .collect();
        set.into_iter().map(str::to_owned).collect()
    }

    /// Replaces the split. It must cover every track exactly once.
    pub fn with_split(mut self, split: BTreeMap<String, Partition>) -> Result<Self> {
        if split.len() != self.tracks.len()
            || self.tracks.iter().any(|t| !split.contains_key(&t.track_id))
        {
            return Err(Error::Config(
                "split must assign every track exactly once".into(),
            ));
        }
        self.split = split;
        Ok(self)
    }

    /// True when no artist has tracks in two partitions.
    pub fn is_artist_disjoint(&self) -> bool {
        let mut owner: BTreeMap<&str, Partition> = BTreeMap::new();
        for t in &self.tracks {
            let p = self.split[&t.track_id];
            if *owner.entry(&t.artist_id).or_insert(p) != p {
                return false;
            }
        }
        true
    }
}

/// Largest-remainder apportionment of `n` items over `ratios`, giving every
/// positive-ratio bucket at least one item when `n` allows it.
pub fn apportion(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    let total: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| *r < 0.0 || !r.is_finite()) || total <= 0.0 {
        return Err(Error::Config(format!("invalid split ratios {ratios:?}")));
    }
    let positive = ratios.iter().filter(|r| **r > 0.0).count();
    if n < positive {
        return Err(Error::InsufficientData(format!(
            "{n} items cannot fill {positive} partitions"
        )));
    }
    let quotas: Vec<f64> = ratios.iter().map(|r| r / total * n as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    // Stable: larger remainder first, then lower index.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if ratios[i] > 0.0 {
            counts[i] += 1;
            left -= 1;
        }
    }
    // Top up empty positive buckets from the largest one.
    for i in 0..counts.len() {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..counts.len())
                .max_by_key(|&j| (counts[j], usize::MAX - j))
                .unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    Ok(counts)
}

/// Partitions artists (not tracks) into train/valid/test by `ratios`; all of
/// an artist's tracks land in one partition.
pub fn artist_disjoint_split(corpus: Corpus, ratios: [f64; 3], seed: u64) -> Result<Corpus> {
    let mut artists = corpus.artists(None);
    if artists.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "{} artists cannot fill 3 partitions",
            artists.len()
        )));
    }
    let counts = apportion(artists.len(), &ratios)?;
    artists.shuffle(&mut seeding::stream(
        seed,
        &[seeding::label("artist-split")],
    ));
    let mut assignment = BTreeMap::new();
    let mut cursor = 0;
    for (part, &count) in Partition::ALL.iter().zip(&counts) {
        for artist in &artists[cursor..cursor + count] {
            assignment.insert(artist.clone(), *part);
        }
        cursor += count;
    }
    let split = corpus
        .tracks
        .iter()
        .map(|t| (t.track_id.clone(), assignment[&t.artist_id]))
        .collect();
    corpus.with_split(split)
}
