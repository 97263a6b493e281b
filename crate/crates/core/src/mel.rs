//! Log-mel spectrogram frontend: 64 HTK-scale bands over 0–8 kHz, 25 ms
//! periodic Hann window, 10 ms hop, 512-point FFT, `ln(power + 1e-6)`.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::{AudioBuffer, SAMPLE_RATE};
use crate::error::{Error, Result};

pub const N_MELS: usize = 64;
pub const WINDOW_LEN: usize = 400;
pub const HOP_LEN: usize = 160;
pub const FFT_LEN: usize = 512;
pub const N_BINS: usize = FFT_LEN / 2 + 1;
pub const LOG_FLOOR: f64 = 1e-6;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = SAMPLE_RATE as f64 / 2.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of frames produced for `len` samples (0 when shorter than a window).
pub fn frame_count(len: usize) -> usize {
    if len < WINDOW_LEN {
        0
    } else {
        (len - WINDOW_LEN) / HOP_LEN + 1
    }
}

/// `frames × 64` row-major matrix of log-mel values.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFrameMatrix {
    frames: usize,
    values: Vec<f64>,
}

impl MelFrameMatrix {
    pub fn from_values(frames: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != frames * N_MELS {
            return Err(Error::Dimension {
                what: "mel matrix values",
                expected: frames * N_MELS,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mel matrix"));
        }
        Ok(Self { frames, values })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bands(&self) -> usize {
        N_MELS
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.values[frame * N_MELS..(frame + 1) * N_MELS]
    }

    pub fn get(&self, frame: usize, band: usize) -> f64 {
        self.values[frame * N_MELS + band]
    }
}

/// One triangular filter, stored sparsely from `start_bin`.
#[derive(Debug, Clone)]
pub struct MelFilter {
    pub start_bin: usize,
    pub weights: Vec<f64>,
    pub center_hz: f64,
}

/// Unnormalized triangular HTK filterbank spanning `F_MIN..F_MAX`.
pub fn mel_filterbank() -> Vec<MelFilter> {
    let mel_lo = hz_to_mel(F_MIN);
    let mel_hi = hz_to_mel(F_MAX);
    let edges: Vec<f64> = (0..N_MELS + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (N_MELS + 1) as f64))
        .collect();
    let bin_hz = SAMPLE_RATE as f64 / FFT_LEN as f64;
    (0..N_MELS)
        .map(|m| {
            let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            let mut start_bin = None;
            let mut weights = Vec::new();
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let w = if f > lo && f <= center {
                    (f - lo) / (center - lo)
                } else if f > center && f < hi {
                    (hi - f) / (hi - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    start_bin.get_or_insert(k);
                    weights.push(w);
                } else if start_bin.is_some() {
                    break;
                }
            }
            MelFilter {
                start_bin: start_bin.unwrap_or(0),
                weights,
                center_hz: center,
            }
        })
        .collect()
}

/// Periodic Hann window of `len` samples.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos())
        .collect()
}

/// Precomputed window, FFT plan and filterbank. Cheap to share across threads.
pub struct MelFrontend {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
}

impl Default for MelFrontend {
    fn default() -> Self {
        Self::new()
    }
}

impl MelFrontend {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(FFT_LEN),
            window: hann_window(WINDOW_LEN),
            filters: mel_filterbank(),
        }
    }

    /// Process-wide shared instance.
    pub fn shared() -> &'static MelFrontend {
        static SHARED: OnceLock<MelFrontend> = OnceLock::new();
        SHARED.get_or_init(MelFrontend::new)
    }

    pub fn filters(&self) -> &[MelFilter] {
        &self.filters
    }

    /// Mel-filtered power spectrum (before log compression), `frames × 64`.
    pub fn mel_power(&self, samples: &[f32]) -> Result<Vec<f64>> {
        let frames = frame_count(samples.len());
        if frames == 0 {
            return Err(Error::TooShort {
                samples: samples.len(),
                required: WINDOW_LEN,
            });
        }
        let mut out = vec![0.0; frames * N_MELS];
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_LEN];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0.0; N_BINS];
        for (t, row) in out.chunks_exact_mut(N_MELS).enumerate() {
            let frame = &samples[t * HOP_LEN..t * HOP_LEN + WINDOW_LEN];
            for (slot, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                *slot = Complex::new(s as f64 * w, 0.0);
            }
            for slot in &mut buf[WINDOW_LEN..] {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf[..N_BINS]) {
                *p = c.norm_sqr();
            }
            for (m, filter) in self.filters.iter().enumerate() {
                row[m] = filter
                    .weights
                    .iter()
                    .zip(&power[filter.start_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
            }
        }
        Ok(out)
    }

    pub fn compute(&self, samples: &[f32]) -> Result<MelFrameMatrix> {
        let mut values = self.mel_power(samples)?;
        for v in &mut values {
            *v = (*v + LOG_FLOOR).ln();
        }
        MelFrameMatrix::from_values(frame_count(samples.len()), values)
    }
}

/// Log-mel spectrogram of an excerpt using the shared frontend.
pub fn mel_spectrogram(excerpt: &AudioBuffer) -> Result<MelFrameMatrix> {
    MelFrontend::shared().compute(excerpt.samples())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_second_shape() {
        let m = mel_spectrogram(&AudioBuffer::silence(16_000)).unwrap();
        assert_eq!((m.frames(), m.bands()), (98, 64));
    }

    #[test]
    fn silence_hits_floor() {
        let m = mel_spectrogram(&AudioBuffer::silence(4_000)).unwrap();
        let floor = LOG_FLOOR.ln();
        assert!(m.values().iter().all(|&v| v == floor));
    }

    #[test]
    fn too_short_is_error() {
        assert!(matches!(
            mel_spectrogram(&AudioBuffer::silence(399)),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn filterbank_shape() {
        let filters = mel_filterbank();
        assert_eq!(filters.len(), N_MELS);
        for pair in filters.windows(2) {
            assert!(pair[0].center_hz < pair[1].center_hz);
        }
        for f in &filters {
            assert!(f.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
            assert!(f.start_bin + f.weights.len() <= N_BINS);
        }
        assert!((hz_to_mel(mel_to_hz(1234.5)) - 1234.5).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn frame_count_formula(len in 400usize..20_000) {
            let samples = vec![0.0f32; len];
            let m = MelFrontend::shared().compute(&samples).unwrap();
            prop_assert_eq!(m.frames(), (len - 400) / 160 + 1);
        }

        #[test]
        fn trailing_samples_beyond_last_window_are_ignored(
            len in 400usize..4_000,
            seed in any::<u64>(),
        ) {
            let mut state = seed | 1;
            let mut next = || {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                ((state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32 * 0.5
            };
            let frames = frame_count(len);
            let used = (frames - 1) * HOP_LEN + WINDOW_LEN;
            let mut samples: Vec<f32> = (0..used).map(|_| next()).collect();
            let base = MelFrontend::shared().compute(&samples).unwrap();
            // Pad up to (but excluding) the sample that would complete another frame.
            let extra = HOP_LEN - 1;
            samples.extend((0..extra).map(|_| next()));
            let padded = MelFrontend::shared().compute(&samples).unwrap();
            prop_assert_eq!(base, padded);
        }

        #[test]
        fn gain_never_decreases_energy(gain in 1.0f32..4.0, seed in any::<u64>()) {
            let mut state = seed | 1;
            let samples: Vec<f32> = (0..2_000).map(|_| {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                ((state >> 11) as f64 / (1u64 << 53) as f64 * 0.5 - 0.25) as f32
            }).collect();
            let louder: Vec<f32> = samples.iter().map(|s| s * gain).collect();
            let a = MelFrontend::shared().compute(&samples).unwrap();
            let b = MelFrontend::shared().compute(&louder).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                prop_assert!(y >= x);
            }
        }
    }
}
