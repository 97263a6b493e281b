//! Deterministic synthetic stems for desk-scale experiments.
//!
//! Vocals are a band-limited sawtooth source with vibrato, gliding between
//! notes drawn from the artist's F0 range, shaped by the artist's three
//! formant resonances and broken into phrases by silent gaps. Each phrase
//! sings one vowel from a table shared by all artists, which moves the
//! formants around the artist's centers, and each track may be transposed by a
//! random interval. The accompaniment is band-limited noise bursts and
//! percussive clicks, optionally joined by a sustained chord with its own
//! root, quality and tremolo. Every accompaniment parameter is drawn
//! independently of the artist, so artist identity is carried only by the
//! vocal stem.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Corpus, CorpusSource, Gender, StemTrack};
use crate::audio::{seconds_to_samples, AudioBuffer, SAMPLE_RATE, SEGMENT_SECONDS};
use crate::error::{Error, Result};
use crate::seeding;

/// Artists whose F0 range tops out below this are male.
pub const GENDER_BOUNDARY_HZ: f64 = 165.0;

const FS: f64 = SAMPLE_RATE as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtistProfile {
    pub artist_id: String,
    /// Lowest and highest fundamental frequency sung, Hz.
    pub f0_range: (f64, f64),
    pub formant_centers: [f64; 3],
    pub vibrato_rate: f64,
}

impl ArtistProfile {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.f0_range;
        if !(80.0..=400.0).contains(&lo) || !(80.0..=400.0).contains(&hi) || lo >= hi {
            return Err(Error::Config(format!(
                "artist {}: f0 range {lo}..{hi} Hz must be increasing within [80, 400]",
                self.artist_id
            )));
        }
        let [f1, f2, f3] = self.formant_centers;
        if !(f1 > 0.0 && f1 < f2 && f2 < f3 && f3 < FS / 2.0) {
            return Err(Error::Config(format!(
                "artist {}: formants {:?} must be strictly increasing below Nyquist",
                self.artist_id, self.formant_centers
            )));
        }
        if !(self.vibrato_rate > 0.0 && self.vibrato_rate < 20.0) {
            return Err(Error::Config(format!(
                "artist {}: vibrato rate {} Hz out of range",
                self.artist_id, self.vibrato_rate
            )));
        }
        if self.artist_id.is_empty() {
            return Err(Error::Config("artist id must be non-empty".into()));
        }
        Ok(())
    }

    pub fn gender(&self) -> Gender {
        if self.f0_range.1 < GENDER_BOUNDARY_HZ {
            Gender::Male
        } else {
            Gender::Female
        }
    }
}

/// Generator knobs shared by every track of a corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub duration_s: f64,
    /// Mean absolute amplitude of the vocal stem while singing.
    pub vocal_level: f64,
    /// Mean absolute amplitude of the accompaniment.
    pub accompaniment_level: f64,
    /// Relative per-note formant jitter.
    pub formant_jitter: f64,
    /// How far the vowel table moves the formants: 0 keeps every phrase on
    /// the artist's centers, 1 applies the full vowel ratios.
    pub vowel_spread: f64,
    /// Scale of between-artist differences in F0 range and formant centers
    /// around the per-gender means.
    pub artist_spread: f64,
    /// Each track is transposed by a uniform interval in ±this many semitones.
    pub transpose_semitones: f64,
    /// Snap note pitches to the equal-tempered semitone grid, so that pitch
    /// content repeats across artists of the same register.
    pub note_grid: bool,
    /// Share of the accompaniment taken by a sustained per-track chord, the
    /// rest being percussive noise.
    pub accompaniment_tonal: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            duration_s: 30.0,
            vocal_level: 0.08,
            accompaniment_level: 0.16,
            formant_jitter: 0.06,
            vowel_spread: 1.0,
            artist_spread: 0.5,
            transpose_semitones: 0.0,
            note_grid: true,
            accompaniment_tonal: 0.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.duration_s.is_finite()
            && self.vocal_level > 0.0
            && self.vocal_level < 1.0
            && self.accompaniment_level >= 0.0
            && self.accompaniment_level < 1.0
            && (0.0..0.5).contains(&self.formant_jitter)
            && (0.0..=1.0).contains(&self.vowel_spread)
            && (0.0..=1.0).contains(&self.artist_spread)
            && (0.0..=6.0).contains(&self.transpose_semitones)
            && (0.0..=1.0).contains(&self.accompaniment_tonal);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "synthesis parameters out of range: {self:?}"
            )))
        }
    }
}

/// Formant ratios (F1, F2, F3) of the shared vowel table.
const VOWELS: [[f64; 3]; 5] = [
    [1.30, 0.90, 1.00],
    [0.55, 1.50, 1.10],
    [0.65, 0.65, 0.92],
    [0.90, 1.30, 1.04],
    [0.95, 0.72, 0.96],
];

/// Deterministic artist profiles; even indices are male, odd are female.
/// `spread` scales the between-artist variation (1 is the widest).
pub fn synthetic_profiles(n_artists: usize, seed: u64, spread: f64) -> Vec<ArtistProfile> {
    let around =
        |rng: &mut seeding::Rng, mid: f64, half: f64| mid + spread * half * uniform_noise(rng);
    (0..n_artists)
        .map(|i| {
            let mut rng = seeding::stream(seed, &[seeding::label("profile"), i as u64]);
            let male = i % 2 == 0;
            let (lo, hi) = if male {
                let lo = around(&mut rng, 100.0, 15.0);
                (lo, lo * around(&mut rng, 1.32, 0.07))
            } else {
                let lo = around(&mut rng, 207.0, 32.0);
                (lo, lo * around(&mut rng, 1.37, 0.12))
            };
            let scale = if male { 1.0 } else { 1.12 };
            let formant_centers = [
                around(&mut rng, 575.0, 225.0) * scale,
                around(&mut rng, 1450.0, 550.0) * scale,
                around(&mut rng, 2700.0, 500.0) * scale,
            ];
            ArtistProfile {
                artist_id: format!("artist{i:03}"),
                f0_range: (lo, hi),
                formant_centers,
                vibrato_rate: rng.random_range(4.0..7.5),
            }
        })
        .collect()
}

/// Two-pole resonator with unit-ish peak gain.
#[derive(Clone, Copy, Default)]
struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn tune(&mut self, center: f64, bandwidth: f64) {
        let r = (-PI * bandwidth / FS).exp();
        self.a1 = 2.0 * r * (2.0 * PI * center / FS).cos();
        self.a2 = r * r;
        self.b0 = 1.0 - r;
    }

    #[inline]
    fn process(&mut self, x: f64) -> f64 {
        let y = self.b0 * x + self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

#[inline]
fn poly_blep(t: f64, dt: f64) -> f64 {
    if t < dt {
        let x = t / dt;
        x + x - x * x - 1.0
    } else if t > 1.0 - dt {
        let x = (t - 1.0) / dt;
        x * x + x + x + 1.0
    } else {
        0.0
    }
}

fn uniform_noise<R: Rng>(rng: &mut R) -> f64 {
    rng.random::<f64>() * 2.0 - 1.0
}

/// Rescales `samples` so the mean |x| over the `mask`ed samples equals
/// `target`, then clamps.
fn normalize_level(samples: &mut [f64], mask: Option<&[bool]>, target: f64) {
    let (sum, count) = samples
        .iter()
        .enumerate()
        .filter(|(i, _)| mask.is_none_or(|m| m[*i]))
        .fold((0.0, 0usize), |(s, c), (_, x)| (s + x.abs(), c + 1));
    if count == 0 || sum == 0.0 {
        return;
    }
    let gain = target / (sum / count as f64);
    for x in samples {
        *x = (*x * gain).clamp(-0.99, 0.99);
    }
}

struct Note {
    start: usize,
    end: usize,
    f0: f64,
    formant_scale: [f64; 3],
}

struct Phrase {
    start: usize,
    end: usize,
}

fn synth_vocals<R: Rng>(
    profile: &ArtistProfile,
    n: usize,
    params: &SynthParams,
    rng: &mut R,
) -> Vec<f64> {
    let shift = 2f64.powf(params.transpose_semitones * uniform_noise(rng) / 12.0);
    let (lo, hi) = (profile.f0_range.0 * shift, profile.f0_range.1 * shift);
    let mut phrases = Vec::new();
    let mut notes = Vec::new();
    let mut t = seconds_to_samples(rng.random_range(0.0..0.5));
    while t < n {
        let end = (t + seconds_to_samples(rng.random_range(1.5..3.5))).min(n);
        phrases.push(Phrase { start: t, end });
        let vowel = VOWELS[rng.random_range(0..VOWELS.len())];
        let mut s = t;
        while s < end {
            let e = (s + seconds_to_samples(rng.random_range(0.25..0.7))).min(end);
            let mut f0 = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
            if params.note_grid {
                f0 = 440.0 * 2f64.powf((12.0 * (f0 / 440.0).log2()).round() / 12.0);
            }
            let j = params.formant_jitter;
            let formant_scale = vowel
                .map(|v| (1.0 + params.vowel_spread * (v - 1.0)) * (1.0 + j * uniform_noise(rng)));
            notes.push(Note {
                start: s,
                end: e,
                f0,
                formant_scale,
            });
            s = e;
        }
        t = end + seconds_to_samples(rng.random_range(0.25..0.9));
    }

    let mut out = vec![0.0; n];
    let mut voiced = vec![false; n];
    let glide = 1.0 - (-1.0 / (0.03 * FS)).exp();
    let ramp = 0.04 * FS;
    let vib_phase0 = rng.random_range(0.0..2.0 * PI);
    let vib_depth = 0.02;
    let gains = [1.0, 0.6, 0.35];
    let mut resonators = [Resonator::default(); 3];
    let mut phase = 0.0f64;
    let mut log_f0 = notes.first().map_or(lo.ln(), |n| n.f0.ln());
    let mut note_iter = notes.iter().peekable();
    for phrase in &phrases {
        for i in phrase.start..phrase.end {
            while note_iter.peek().is_some_and(|nt| nt.end <= i) {
                note_iter.next();
            }
            let Some(note) = note_iter.peek() else { break };
            if i == note.start {
                for (k, r) in resonators.iter_mut().enumerate() {
                    let c = profile.formant_centers[k] * note.formant_scale[k];
                    r.tune(c, 50.0 + 0.08 * c);
                }
            }
            log_f0 += (note.f0.ln() - log_f0) * glide;
            let vib = 1.0
                + vib_depth * (2.0 * PI * profile.vibrato_rate * i as f64 / FS + vib_phase0).sin();
            let f = log_f0.exp() * vib;
            let dt = f / FS;
            phase += dt;
            if phase >= 1.0 {
                phase -= 1.0;
            }
            let saw = 2.0 * phase - 1.0 - poly_blep(phase, dt);
            let env = ((i - phrase.start) as f64 / ramp)
                .min((phrase.end - i) as f64 / ramp)
                .min(1.0);
            let src = env * (saw + 0.05 * uniform_noise(rng));
            out[i] = resonators
                .iter_mut()
                .zip(gains)
                .map(|(r, g)| g * r.process(src))
                .sum();
            voiced[i] = true;
        }
    }
    let level = params.vocal_level * rng.random_range(0.8..1.2);
    normalize_level(&mut out, Some(&voiced), level);
    out
}

fn synth_accompaniment<R: Rng>(n: usize, params: &SynthParams, rng: &mut R) -> Vec<f64> {
    let beat = seconds_to_samples(60.0 / rng.random_range(80.0..160.0));
    let low_center = (rng.random_range(150f64.ln()..600f64.ln())).exp();
    let high_center = (rng.random_range(800f64.ln()..5000f64.ln())).exp();
    let mut low = Resonator::default();
    low.tune(low_center, 0.3 * low_center);
    let mut high = Resonator::default();
    high.tune(high_center, 0.3 * high_center);
    let burst_prob = rng.random_range(0.5..0.9);
    let offbeat_prob = rng.random_range(0.0..0.5);
    let click_decay = (-1.0 / (0.008 * FS)).exp();

    let mut env_low = vec![0.0; n];
    let mut env_high = vec![0.0; n];
    let mut click_env = vec![0.0; n];
    let mut start = 0;
    let mut k = 0usize;
    while start < n {
        if rng.random::<f64>() < burst_prob {
            let len = (beat as f64 * rng.random_range(0.4..0.9)) as usize;
            let env = if k % 2 == 0 {
                &mut env_low
            } else {
                &mut env_high
            };
            let decay = (-3.0 / len.max(1) as f64).exp();
            let mut g = 1.0;
            for e in env.iter_mut().skip(start).take(len) {
                *e = g;
                g *= decay;
            }
        }
        let mut place_click = |at: usize| {
            let mut g = 1.0;
            for e in click_env.iter_mut().skip(at).take(seconds_to_samples(0.05)) {
                *e = g;
                g *= click_decay;
            }
        };
        place_click(start);
        if rng.random::<f64>() < offbeat_prob {
            place_click(start + beat / 2);
        }
        start += beat;
        k += 1;
    }

    let mut out = vec![0.0; n];
    for i in 0..n {
        let nl = low.process(uniform_noise(rng));
        let nh = high.process(uniform_noise(rng));
        let click = uniform_noise(rng);
        out[i] = 4.0 * (env_low[i] * nl + env_high[i] * nh) + 0.5 * click_env[i] * click;
    }
    if params.accompaniment_tonal > 0.0 {
        let mut chord = sustained_chord(n, rng);
        normalize_level(&mut out, None, 1.0 - params.accompaniment_tonal);
        normalize_level(&mut chord, None, params.accompaniment_tonal);
        for (o, c) in out.iter_mut().zip(chord) {
            *o += c;
        }
    }
    let level = params.accompaniment_level * rng.random_range(0.7..1.3);
    normalize_level(&mut out, None, level);
    out
}

/// A held triad on a random root with a random spectral tilt and slow
/// tremolo.
fn sustained_chord<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let root = (rng.random_range(70f64.ln()..280f64.ln())).exp();
    let third = if rng.random::<bool>() { 1.2599 } else { 1.1892 };
    let tilt = rng.random_range(0.5..2.0);
    let rate = rng.random_range(0.5..4.0);
    let partials: Vec<(f64, f64)> = [1.0, third, 1.4983]
        .iter()
        .flat_map(|r| (1..=6).map(move |h| (root * r * h as f64, (h as f64).powf(-tilt))))
        .filter(|(f, _)| *f < 0.45 * FS)
        .collect();
    (0..n)
        .map(|i| {
            let t = i as f64 / FS;
            let trem = 1.0 + 0.3 * (2.0 * PI * rate * t).sin();
            trem * partials
                .iter()
                .map(|(f, a)| a * (2.0 * PI * f * t).sin())
                .sum::<f64>()
        })
        .collect()
}

fn to_buffer(samples: Vec<f64>) -> AudioBuffer {
    AudioBuffer::clamped(samples.into_iter().map(|s| s as f32).collect())
        .expect("synthesized audio is finite")
}

/// Synthesizes one track for `profile`, deterministic in `seed`.
pub fn synth_track(
    profile: &ArtistProfile,
    track_id: &str,
    params: &SynthParams,
    seed: u64,
) -> Result<StemTrack> {
    profile.validate()?;
    params.validate()?;
    if params.duration_s < SEGMENT_SECONDS {
        return Err(Error::Config(format!(
            "track duration {} s is shorter than one {SEGMENT_SECONDS} s segment",
            params.duration_s
        )));
    }
    let n = seconds_to_samples(params.duration_s);
    let mut vocal_rng = seeding::stream(seed, &[seeding::label("vocals")]);
    let mut accomp_rng = seeding::stream(seed, &[seeding::label("accompaniment")]);
    let vocals = synth_vocals(profile, n, params, &mut vocal_rng);
    let accompaniment = synth_accompaniment(n, params, &mut accomp_rng);
    StemTrack::new(
        track_id,
        profile.artist_id.clone(),
        profile.gender(),
        to_buffer(vocals),
        to_buffer(accompaniment),
    )
}

/// Synthetic corpus of `n_artists × tracks_per_artist` tracks (all in the
/// training partition; split with [`super::artist_disjoint_split`]).
pub fn build_synthetic_corpus(
    n_artists: usize,
    tracks_per_artist: usize,
    seed: u64,
    params: &SynthParams,
) -> Result<Corpus> {
    if n_artists < 3 || tracks_per_artist < 2 {
        return Err(Error::Config(format!(
            "synthetic corpus needs >= 3 artists and >= 2 tracks each, got {n_artists} x {tracks_per_artist}"
        )));
    }
    params.validate()?;
    let profiles = synthetic_profiles(n_artists, seed, params.artist_spread);
    let mut tracks = Vec::with_capacity(n_artists * tracks_per_artist);
    for (a, profile) in profiles.iter().enumerate() {
        for t in 0..tracks_per_artist {
            let track_seed =
                seeding::derive_seed(seed, &[seeding::label("track"), a as u64, t as u64]);
            tracks.push(synth_track(
                profile,
                &format!("a{a:03}_t{t:02}"),
                params,
                track_seed,
            )?);
        }
    }
    Corpus::new(
        tracks,
        CorpusSource::Synthetic {
            n_artists,
            tracks_per_artist,
            seed,
            duration_s: params.duration_s,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{is_active_slice, mean_amplitude, ACTIVITY_THRESHOLD};

    fn short() -> SynthParams {
        SynthParams {
            duration_s: 10.0,
            ..SynthParams::default()
        }
    }

    #[test]
    fn profiles_are_valid_and_alternate_gender() {
        let profiles = synthetic_profiles(20, 11, 1.0);
        for (i, p) in profiles.iter().enumerate() {
            p.validate().unwrap();
            let expected = if i % 2 == 0 {
                Gender::Male
            } else {
                Gender::Female
            };
            assert_eq!(p.gender(), expected);
        }
    }

    #[test]
    fn degenerate_profile_rejected() {
        let mut p = synthetic_profiles(1, 0, 1.0).remove(0);
        p.formant_centers = [900.0, 800.0, 2500.0];
        assert!(synth_track(&p, "t", &short(), 1).is_err());
        let mut p = synthetic_profiles(1, 0, 1.0).remove(0);
        p.f0_range = (60.0, 120.0);
        assert!(synth_track(&p, "t", &short(), 1).is_err());
        let p = synthetic_profiles(1, 0, 1.0).remove(0);
        let too_short = SynthParams {
            duration_s: 4.0,
            ..short()
        };
        assert!(synth_track(&p, "t", &too_short, 1).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let p = synthetic_profiles(2, 5, 1.0).remove(1);
        let a = synth_track(&p, "t", &short(), 42).unwrap();
        let b = synth_track(&p, "t", &short(), 42).unwrap();
        assert_eq!(a, b);
        let c = synth_track(&p, "t", &short(), 43).unwrap();
        assert_ne!(a.vocals, c.vocals);
    }

    #[test]
    fn vocals_mostly_active() {
        for (i, p) in synthetic_profiles(4, 9, 1.0).iter().enumerate() {
            let t = synth_track(p, "t", &short(), i as u64).unwrap();
            let ex: Vec<bool> = t
                .vocals
                .samples()
                .chunks_exact(16_000)
                .map(|c| is_active_slice(c, ACTIVITY_THRESHOLD))
                .collect();
            let frac = ex.iter().filter(|&&a| a).count() as f64 / ex.len() as f64;
            assert!(frac >= 0.6, "active fraction {frac}");
        }
    }

    #[test]
    fn corpus_counts() {
        let c = build_synthetic_corpus(4, 2, 7, &short()).unwrap();
        assert_eq!(c.len(), 8);
        assert_eq!(c.artists(None).len(), 4);
        assert!(build_synthetic_corpus(2, 2, 7, &short()).is_err());
        assert!(build_synthetic_corpus(3, 1, 7, &short()).is_err());
        let t = &c.tracks()[0];
        assert!(mean_amplitude(&t.vocals) > 0.0);
        assert_eq!(t.vocals.len(), 160_000);
    }
}
