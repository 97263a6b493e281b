//! Mono 16 kHz audio buffers, segmenting, excerpt cropping, the vocal
//! activity gate and WAV input/output.

use std::io::{Cursor, Read, Seek};
use std::path::Path;

use crate::error::{Error, Result};

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE: u32 = 16_000;

/// Mean absolute amplitude below which a vocal excerpt counts as silent.
pub const ACTIVITY_THRESHOLD: f64 = 0.01;

/// Default segment length used to slice clips before excerpt cropping.
pub const SEGMENT_SECONDS: f64 = 5.0;

/// Default network input length.
pub const EXCERPT_SECONDS: f64 = 1.0;

/// Converts a duration in seconds to a whole number of samples.
pub fn seconds_to_samples(seconds: f64) -> usize {
    (seconds * SAMPLE_RATE as f64).round() as usize
}

/// A non-empty mono buffer of finite samples in `[-1, 1]` at 16 kHz.
#[derive(Clone, PartialEq)]
pub struct AudioBuffer {
    samples: Vec<f32>,
}

impl std::fmt::Debug for AudioBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AudioBuffer")
            .field("len", &self.samples.len())
            .field("duration_s", &self.duration())
            .finish()
    }
}

impl AudioBuffer {
    pub fn new(samples: Vec<f32>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidAudio("empty buffer".into()));
        }
        if let Some((i, s)) = samples
            .iter()
            .enumerate()
            .find(|(_, s)| !s.is_finite() || s.abs() > 1.0)
        {
            return Err(Error::InvalidAudio(format!(
                "sample {i} = {s} is not a finite value in [-1, 1]"
            )));
        }
        Ok(Self { samples })
    }

    /// Builds a buffer, hard-clamping every sample into `[-1, 1]`.
    ///
    /// Non-finite samples are still rejected.
    pub fn clamped(mut samples: Vec<f32>) -> Result<Self> {
        for s in &mut samples {
            *s = s.clamp(-1.0, 1.0);
        }
        Self::new(samples)
    }

    pub fn silence(len: usize) -> Self {
        assert!(len > 0, "silence of zero length");
        Self {
            samples: vec![0.0; len],
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Always false; kept for API symmetry with slices.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    /// Duration in seconds.
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }

    /// Copies `len` samples starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Result<AudioBuffer> {
        if len == 0 || start + len > self.samples.len() {
            return Err(Error::OutOfBounds {
                offset_s: start as f64 / SAMPLE_RATE as f64,
                len_s: len as f64 / SAMPLE_RATE as f64,
                duration_s: self.duration(),
            });
        }
        Ok(AudioBuffer {
            samples: self.samples[start..start + len].to_vec(),
        })
    }
}

/// Splits a buffer into consecutive non-overlapping segments of
/// `segment_len` seconds. The trailing remainder is dropped; a buffer shorter
/// than one segment yields an empty list.
pub fn frame_segments(buffer: &AudioBuffer, segment_len: f64) -> Vec<AudioBuffer> {
    let seg = seconds_to_samples(segment_len);
    if seg == 0 {
        return Vec::new();
    }
    buffer
        .samples
        .chunks_exact(seg)
        .map(|c| AudioBuffer {
            samples: c.to_vec(),
        })
        .collect()
}

/// Crops `excerpt_len` seconds starting `offset` seconds into `segment`.
pub fn crop_excerpt(segment: &AudioBuffer, offset: f64, excerpt_len: f64) -> Result<AudioBuffer> {
    if offset < 0.0 || excerpt_len <= 0.0 {
        return Err(Error::OutOfBounds {
            offset_s: offset,
            len_s: excerpt_len,
            duration_s: segment.duration(),
        });
    }
    segment
        .slice(seconds_to_samples(offset), seconds_to_samples(excerpt_len))
        .map_err(|_| Error::OutOfBounds {
            offset_s: offset,
            len_s: excerpt_len,
            duration_s: segment.duration(),
        })
}

/// Mean of absolute sample values, or `None` for an empty slice.
pub fn mean_abs(samples: &[f32]) -> Option<f64> {
    if samples.is_empty() {
        return None;
    }
    let sum: f64 = samples.iter().map(|s| s.abs() as f64).sum();
    Some(sum / samples.len() as f64)
}

pub fn mean_amplitude(buffer: &AudioBuffer) -> f64 {
    mean_abs(buffer.samples()).expect("AudioBuffer is never empty")
}

/// Vocal activity gate: true iff the mean amplitude reaches `threshold`.
pub fn is_vocal_active(buffer: &AudioBuffer, threshold: f64) -> bool {
    mean_amplitude(buffer) >= threshold
}

/// Slice form of [`is_vocal_active`]; empty slices are never active.
pub fn is_active_slice(samples: &[f32], threshold: f64) -> bool {
    mean_abs(samples).is_some_and(|m| m >= threshold)
}

/// Reads a mono 16 kHz WAV file with 16-bit integer or 32-bit float samples.
pub fn read_wav(path: &Path) -> Result<AudioBuffer> {
    let file = std::fs::File::open(path)?;
    decode_wav(std::io::BufReader::new(file), path)
}

/// Decodes WAV bytes; `origin` is only used in diagnostics.
pub fn decode_wav<R: Read + Seek>(reader: R, origin: &Path) -> Result<AudioBuffer> {
    let unsupported = |reason: String| Error::UnsupportedWav {
        path: origin.to_path_buf(),
        reason,
    };
    let mut reader = hound::WavReader::new(reader)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE {
        return Err(unsupported(format!(
            "sample rate {} Hz (expected {SAMPLE_RATE} Hz)",
            spec.sample_rate
        )));
    }
    if spec.channels != 1 {
        return Err(unsupported(format!(
            "{} channels (expected mono)",
            spec.channels
        )));
    }
    let samples: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(unsupported(format!(
                "{bits}-bit {fmt:?} samples (expected 16-bit int or 32-bit float)"
            )))
        }
    };
    AudioBuffer::new(samples).map_err(|e| unsupported(e.to_string()))
}

/// Sample encoding used when writing WAV files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_spec(format: WavFormat) -> hound::WavSpec {
    match format {
        WavFormat::Pcm16 => hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        },
        WavFormat::Float32 => hound::WavSpec {
            channels: 1,
            sample_rate: SAMPLE_RATE,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        },
    }
}

fn write_samples<W: std::io::Write + Seek>(
    writer: &mut hound::WavWriter<W>,
    buffer: &AudioBuffer,
    format: WavFormat,
) -> Result<()> {
    for &s in buffer.samples() {
        match format {
            WavFormat::Pcm16 => writer.write_sample((s * 32767.0).round() as i16)?,
            WavFormat::Float32 => writer.write_sample(s)?,
        }
    }
    Ok(())
}

pub fn write_wav(path: &Path, buffer: &AudioBuffer, format: WavFormat) -> Result<()> {
    let mut writer = hound::WavWriter::create(path, wav_spec(format))?;
    write_samples(&mut writer, buffer, format)?;
    writer.finalize()?;
    Ok(())
}

/// Encodes a buffer as an in-memory WAV file.
pub fn encode_wav(buffer: &AudioBuffer, format: WavFormat) -> Result<Vec<u8>> {
    let mut cursor = Cursor::new(Vec::new());
    {
        let mut writer = hound::WavWriter::new(&mut cursor, wav_spec(format))?;
        write_samples(&mut writer, buffer, format)?;
        writer.finalize()?;
    }
    Ok(cursor.into_inner())
}
