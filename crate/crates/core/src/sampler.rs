//! Contrastive pair sampling strategies.
//!
//! | strategy   | anchor                                   | positive                     |
//! |------------|------------------------------------------|------------------------------|
//! | `cola`     | mixture excerpt                          | other mixture excerpt, same 5 s segment |
//! | `mscol`    | mixture excerpt                          | vocals over the same span    |
//! | `cvsm-a`   | vocals + accompaniment of another track  | the same vocal excerpt       |
//! | `cvsm-ah`  | `cvsm-a` with probability p, else `mscol`| (per pair)                   |
//! | `cvsm-af`  | `cvsm-a` before the stage switch, then `mscol` |                        |
//! | `cvsm-art` | mixture excerpt of artist X              | vocal excerpt of artist X    |
//! | `cola-art` | mixture excerpt of artist X              | mixture excerpt of artist X  |
//!
//! Vocal positives must pass the activity gate; draws are retried up to
//! [`SamplerConfig::retry_bound`] times.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::{
    is_active_slice, seconds_to_samples, AudioBuffer, ACTIVITY_THRESHOLD, SEGMENT_SECONDS,
};
use crate::corpus::{mix_buffers, mix_slices, Corpus, Partition, StemTrack};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "cola")]
    Cola,
    #[serde(rename = "mscol")]
    Mscol,
    #[serde(rename = "cvsm-a")]
    CvsmA,
    #[serde(rename = "cvsm-ah")]
    CvsmAh,
    #[serde(rename = "cvsm-af")]
    CvsmAf,
    #[serde(rename = "cvsm-art")]
    CvsmArt,
    #[serde(rename = "cola-art")]
    ColaArt,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Cola,
        Strategy::Mscol,
        Strategy::CvsmA,
        Strategy::CvsmAh,
        Strategy::CvsmAf,
        Strategy::CvsmArt,
        Strategy::ColaArt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Cola => "cola",
            Strategy::Mscol => "mscol",
            Strategy::CvsmA => "cvsm-a",
            Strategy::CvsmAh => "cvsm-ah",
            Strategy::CvsmAf => "cvsm-af",
            Strategy::CvsmArt => "cvsm-art",
            Strategy::ColaArt => "cola-art",
        }
    }

    /// Whether positives are isolated vocal excerpts.
    pub fn pairs_against_vocals(self) -> bool {
        !matches!(self, Strategy::Cola | Strategy::ColaArt)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    /// Probability of an artificial anchor under `cvsm-ah`.
    pub p_artificial: f64,
    /// Fraction of total steps trained on artificial anchors under `cvsm-af`.
    pub stage_switch_fraction: f64,
    pub excerpt_len_s: f64,
    pub activity_threshold: f64,
    pub retry_bound: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::CvsmAh,
            p_artificial: 0.5,
            stage_switch_fraction: 0.75,
            excerpt_len_s: 1.0,
            activity_threshold: ACTIVITY_THRESHOLD,
            retry_bound: 32,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn new(strategy: Strategy, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_artificial) {
            return Err(Error::Config(format!(
                "p_artificial {} not in [0, 1]",
                self.p_artificial
            )));
        }
        if !(self.stage_switch_fraction > 0.0 && self.stage_switch_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "stage_switch_fraction {} not in (0, 1]",
                self.stage_switch_fraction
            )));
        }
        if !(self.excerpt_len_s > 0.0 && self.excerpt_len_s < SEGMENT_SECONDS) {
            return Err(Error::Config(format!(
                "excerpt length {} s must be within one segment",
                self.excerpt_len_s
            )));
        }
        if self.retry_bound == 0 {
            return Err(Error::Config("retry_bound must be positive".into()));
        }
        Ok(())
    }

    pub fn excerpt_samples(&self) -> usize {
        seconds_to_samples(self.excerpt_len_s)
    }

    /// First step index at which `cvsm-af` stops using artificial anchors.
    pub fn switch_step(&self, total_steps: usize) -> usize {
        (self.stage_switch_fraction * total_steps as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Real,
    Artificial,
}

/// Where an excerpt was cut from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExcerptSource {
    pub track_id: String,
    pub artist_id: String,
    /// First sample of the excerpt within the track.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    pub anchor: AudioBuffer,
    pub positive: AudioBuffer,
    pub anchor_kind: AnchorKind,
    pub anchor_source: ExcerptSource,
    pub positive_source: ExcerptSource,
    /// Track the foreign accompaniment came from (artificial anchors only).
    pub accompaniment_source: Option<ExcerptSource>,
}

/// Tracks of one partition, indexed for sampling.
pub struct SamplingPool<'a> {
    tracks: Vec<&'a StemTrack>,
    artists: Vec<(String, Vec<usize>)>,
    partition: Partition,
}

impl<'a> SamplingPool<'a> {
    /// Tracks of `partition` with at least one whole segment.
    pub fn new(corpus: &'a Corpus, partition: Partition) -> Result<Self> {
        let tracks: Vec<&StemTrack> = corpus
            .partition(partition)
            .filter(|t| t.segment_count() > 0)
            .collect();
        if tracks.is_empty() {
            return Err(Error::InsufficientData(format!(
                "{partition:?} partition has no track with a whole {SEGMENT_SECONDS} s segment"
            )));
        }
        let mut artists: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, t) in tracks.iter().enumerate() {
            match artists.iter_mut().find(|(a, _)| *a == t.artist_id) {
                Some((_, v)) => v.push(i),
                None => artists.push((t.artist_id.clone(), vec![i])),
            }
        }
        artists.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(Self {
            tracks,
            artists,
            partition,
        })
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }
}

struct Draw<'p, 'a> {
    pool: &'p SamplingPool<'a>,
    cfg: &'p SamplerConfig,
    seg: usize,
    len: usize,
}

impl<'p, 'a> Draw<'p, 'a> {
    fn new(pool: &'p SamplingPool<'a>, cfg: &'p SamplerConfig) -> Self {
        Self {
            pool,
            cfg,
            seg: seconds_to_samples(SEGMENT_SECONDS),
            len: cfg.excerpt_samples(),
        }
    }

    fn track(&self, i: usize) -> &'a StemTrack {
        self.pool.tracks[i]
    }

    /// Uniform segment, then uniform excerpt offset inside it.
    fn location<R: Rng>(&self, rng: &mut R, track: usize) -> usize {
        let segs = self.track(track).segment_count();
        let seg = rng.random_range(0..segs);
        seg * self.seg + rng.random_range(0..=self.seg - self.len)
    }

    fn source(&self, track: usize, start: usize) -> ExcerptSource {
        let t = self.track(track);
        ExcerptSource {
            track_id: t.track_id.clone(),
            artist_id: t.artist_id.clone(),
            start,
        }
    }

    fn vocals(&self, track: usize, start: usize) -> &'a [f32] {
        &self.track(track).vocals.samples()[start..start + self.len]
    }

    fn mixture(&self, track: usize, start: usize) -> AudioBuffer {
        self.track(track)
            .mixture_slice(start, self.len)
            .expect("location within track")
    }

    /// Uniform track from `candidates` and location whose vocals are active.
    fn active_vocal<R: Rng>(
        &self,
        rng: &mut R,
        candidates: &[usize],
        context: impl FnOnce() -> String,
    ) -> Result<(usize, usize)> {
        for _ in 0..self.cfg.retry_bound {
            let t = candidates[rng.random_range(0..candidates.len())];
            let start = self.location(rng, t);
            if is_active_slice(self.vocals(t, start), self.cfg.activity_threshold) {
                return Ok((t, start));
            }
        }
        Err(Error::NoActiveVocals {
            retries: self.cfg.retry_bound,
            context: context(),
        })
    }

    fn all_tracks(&self) -> Vec<usize> {
        (0..self.pool.len()).collect()
    }

    fn mscol<R: Rng>(&self, rng: &mut R) -> Result<ContrastivePair> {
        let (t, start) = self.active_vocal(rng, &self.all_tracks(), || {
            format!("mscol over {} tracks", self.pool.len())
        })?;
        Ok(ContrastivePair {
            anchor: self.mixture(t, start),
            positive: AudioBuffer::new(self.vocals(t, start).to_vec())?,
            anchor_kind: AnchorKind::Real,
            anchor_source: self.source(t, start),
            positive_source: self.source(t, start),
            accompaniment_source: None,
        })
    }

    fn artificial<R: Rng>(&self, rng: &mut R) -> Result<ContrastivePair> {
        if self.pool.len() < 2 {
            return Err(Error::InsufficientData(
                "artificial mixtures need at least two tracks".into(),
            ));
        }
        let (t, start) = self.active_vocal(rng, &self.all_tracks(), || {
            format!("artificial mixtures over {} tracks", self.pool.len())
        })?;
        // Uniform over the other tracks.
        let mut other = rng.random_range(0..self.pool.len() - 1);
        if other >= t {
            other += 1;
        }
        let acc_start = self.location(rng, other);
        let vocal = self.vocals(t, start);
        let acc = &self.track(other).accompaniment.samples()[acc_start..acc_start + self.len];
        Ok(ContrastivePair {
            anchor: mix_slices(vocal, acc),
            positive: AudioBuffer::new(vocal.to_vec())?,
            anchor_kind: AnchorKind::Artificial,
            anchor_source: self.source(t, start),
            positive_source: self.source(t, start),
            accompaniment_source: Some(self.source(other, acc_start)),
        })
    }

    fn cola<R: Rng>(&self, rng: &mut R) -> Result<ContrastivePair> {
        let t = rng.random_range(0..self.pool.len());
        let segs = self.track(t).segment_count();
        let base = rng.random_range(0..segs) * self.seg;
        let span = self.seg - self.len;
        let a = rng.random_range(0..=span);
        let mut b = rng.random_range(0..span);
        if b >= a {
            b += 1;
        }
        Ok(ContrastivePair {
            anchor: self.mixture(t, base + a),
            positive: self.mixture(t, base + b),
            anchor_kind: AnchorKind::Real,
            anchor_source: self.source(t, base + a),
            positive_source: self.source(t, base + b),
            accompaniment_source: None,
        })
    }

    fn artist<R: Rng>(&self, rng: &mut R) -> &'p (String, Vec<usize>) {
        &self.pool.artists[rng.random_range(0..self.pool.artists.len())]
    }

    fn cvsm_art<R: Rng>(&self, rng: &mut R) -> Result<ContrastivePair> {
        let (artist, tracks) = self.artist(rng);
        let ta = tracks[rng.random_range(0..tracks.len())];
        let sa = self.location(rng, ta);
        let (tp, sp) = self.active_vocal(rng, tracks, || format!("artist {artist}"))?;
        Ok(ContrastivePair {
            anchor: self.mixture(ta, sa),
            positive: AudioBuffer::new(self.vocals(tp, sp).to_vec())?,
            anchor_kind: AnchorKind::Real,
            anchor_source: self.source(ta, sa),
            positive_source: self.source(tp, sp),
            accompaniment_source: None,
        })
    }

    fn cola_art<R: Rng>(&self, rng: &mut R) -> Result<ContrastivePair> {
        let (_, tracks) = self.artist(rng);
        let ta = tracks[rng.random_range(0..tracks.len())];
        let sa = self.location(rng, ta);
        let tp = tracks[rng.random_range(0..tracks.len())];
        let sp = self.location(rng, tp);
        Ok(ContrastivePair {
            anchor: self.mixture(ta, sa),
            positive: self.mixture(tp, sp),
            anchor_kind: AnchorKind::Real,
            anchor_source: self.source(ta, sa),
            positive_source: self.source(tp, sp),
            accompaniment_source: None,
        })
    }
}

/// Superimposes a vocal excerpt and a foreign accompaniment excerpt.
pub fn make_artificial_mixture(
    vocal: &AudioBuffer,
    foreign_accompaniment: &AudioBuffer,
) -> Result<AudioBuffer> {
    mix_buffers(vocal, foreign_accompaniment)
}

/// Draws one pair under `config.strategy` for training step `step_index`.
pub fn sample_pair<R: Rng>(
    config: &SamplerConfig,
    pool: &SamplingPool<'_>,
    step_index: usize,
    total_steps: usize,
    rng: &mut R,
) -> Result<ContrastivePair> {
    let draw = Draw::new(pool, config);
    match config.strategy {
        Strategy::Cola => draw.cola(rng),
        Strategy::Mscol => draw.mscol(rng),
        Strategy::CvsmA => draw.artificial(rng),
        Strategy::CvsmAh => {
            if rng.random::<f64>() < config.p_artificial {
                draw.artificial(rng)
            } else {
                draw.mscol(rng)
            }
        }
        Strategy::CvsmAf => {
            if step_index < config.switch_step(total_steps) {
                draw.artificial(rng)
            } else {
                draw.mscol(rng)
            }
        }
        Strategy::CvsmArt => draw.cvsm_art(rng),
        Strategy::ColaArt => draw.cola_art(rng),
    }
}

/// RNG for one pair slot. Each (step, minibatch, slot) has its own stream.
pub fn pair_rng(seed: u64, step: usize, minibatch: usize, slot: usize) -> seeding::Rng {
    seeding::stream(
        seed,
        &[
            seeding::label("pair"),
            step as u64,
            minibatch as u64,
            slot as u64,
        ],
    )
}

/// `batch_size` independent pairs for one minibatch of one step.
pub fn sample_batch(
    config: &SamplerConfig,
    pool: &SamplingPool<'_>,
    batch_size: usize,
    step_index: usize,
    minibatch: usize,
    total_steps: usize,
) -> Result<Vec<ContrastivePair>> {
    (0..batch_size)
        .map(|slot| {
            let mut rng = pair_rng(config.seed, step_index, minibatch, slot);
            sample_pair(config, pool, step_index, total_steps, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_synthetic_corpus, CorpusSource, Gender, SynthParams};

    fn small_corpus() -> Corpus {
        build_synthetic_corpus(
            4,
            2,
            3,
            &SynthParams {
                duration_s: 10.0,
                ..SynthParams::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
            assert_eq!(
                serde_json::to_string(&s).unwrap(),
                format!("\"{}\"", s.name())
            );
        }
        assert_eq!("CVSM_AH".parse::<Strategy>().unwrap(), Strategy::CvsmAh);
        assert!("simclr".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = SamplerConfig::default();
        c.validate().unwrap();
        c.p_artificial = 1.5;
        assert!(c.validate().is_err());
        let mut c = SamplerConfig::default();
        c.stage_switch_fraction = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(SamplerConfig::default().switch_step(8000), 6000);
        assert_eq!(SamplerConfig::default().switch_step(10), 8);
    }

    #[test]
    fn artificial_mixture_cases() {
        let v = AudioBuffer::new(vec![0.2, -0.3, 0.1]).unwrap();
        let s = AudioBuffer::silence(3);
        assert_eq!(make_artificial_mixture(&v, &s).unwrap(), v);
        assert_eq!(make_artificial_mixture(&s, &v).unwrap(), v);
        let c = AudioBuffer::new(vec![0.7; 5]).unwrap();
        let m = make_artificial_mixture(&c, &c).unwrap();
        assert!(m.samples().iter().all(|&x| x == 1.0));
        assert!(make_artificial_mixture(&v, &c).is_err());
    }

    #[test]
    fn every_strategy_produces_well_formed_pairs() {
        let corpus = small_corpus();
        let pool = SamplingPool::new(&corpus, Partition::Train).unwrap();
        for s in Strategy::ALL {
            let cfg = SamplerConfig::new(s, 1);
            let batch = sample_batch(&cfg, &pool, 16, 0, 0, 10).unwrap();
            assert_eq!(batch.len(), 16);
            for p in &batch {
                assert_eq!(p.anchor.len(), 16_000);
                assert_eq!(p.positive.len(), 16_000);
                if s.pairs_against_vocals() {
                    assert!(crate::audio::is_vocal_active(
                        &p.positive,
                        ACTIVITY_THRESHOLD
                    ));
                }
            }
        }
    }

    #[test]
    fn silent_vocals_exhaust_retries() {
        let tracks = (0..2)
            .map(|i| {
                StemTrack::new(
                    format!("t{i}"),
                    "mute",
                    Gender::Unknown,
                    AudioBuffer::silence(80_000),
                    AudioBuffer::new(vec![0.1; 80_000]).unwrap(),
                )
                .unwrap()
            })
            .collect();
        let corpus = Corpus::new(tracks, CorpusSource::Custom).unwrap();
        let pool = SamplingPool::new(&corpus, Partition::Train).unwrap();
        let cfg = SamplerConfig::new(Strategy::CvsmArt, 0);
        let err = sample_batch(&cfg, &pool, 1, 0, 0, 1).unwrap_err();
        assert!(err.to_string().contains("artist mute"), "{err}");
        let cfg = SamplerConfig::new(Strategy::Cola, 0);
        assert!(sample_batch(&cfg, &pool, 4, 0, 0, 1).is_ok());
    }
}
