//! Waveform container and WAV file I/O.
//!
//! Audio is carried everywhere as `f64` samples in `[-1, 1]`. Files are
//! 16-bit PCM mono WAV, the one interchange format the toolkit reads and
//! writes.

use std::path::Path;

use crate::error::{Error, Result};

/// A mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    /// Builds a clip, validating that every sample is finite and in `[-1, 1]`.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        for (i, &s) in samples.iter().enumerate() {
            if !s.is_finite() || !(-1.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!(
                    "sample {i} out of range: {s} (expected finite value in [-1, 1])"
                )));
            }
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Writes the clip as 16-bit PCM mono WAV.
    pub fn save_wav(&self, path: impl AsRef<Path>) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path.as_ref(), spec)
            .map_err(|e| wav_err(path.as_ref(), e))?;
        for &s in &self.samples {
            let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
            writer.write_sample(v).map_err(|e| wav_err(path.as_ref(), e))?;
        }
        writer.finalize().map_err(|e| wav_err(path.as_ref(), e))?;
        Ok(())
    }

    /// Reads a 16-bit PCM mono WAV file, scaling samples to `[-1, 1]`.
    pub fn load_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("expected mono audio, got {} channels", spec.channels),
            });
        }
        if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!(
                    "expected 16-bit PCM, got {}-bit {:?}",
                    spec.bits_per_sample, spec.sample_format
                ),
            });
        }
        let samples: std::result::Result<Vec<i16>, _> = reader.samples::<i16>().collect();
        let samples = samples.map_err(|e| wav_err(path, e))?;
        let scaled = samples.iter().map(|&v| v as f64 / 32768.0).collect();
        AudioClip::new(scaled, spec.sample_rate)
    }
}

fn wav_err(path: &Path, e: hound::Error) -> Error {
    Error::Format {
        path: path.display().to_string(),
        reason: e.to_string(),
    }
}
