//! Log-mel spectrum extraction.
//!
//! Frames the waveform (no padding: frame count is
//! `floor((len - window) / hop) + 1`), applies a Hann window, takes the
//! magnitude spectrum, and projects onto an 80-band triangular mel
//! filterbank spanning 0..Nyquist. The result is log-compressed with a
//! floor of 1e-5.

use ndarray::Array2;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::features::MelSpectrogram;

pub const MEL_BANDS: usize = 80;
const LOG_FLOOR: f64 = 1e-5;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filterbank matrix of shape (n_bins, MEL_BANDS) where
/// n_bins = n_fft/2 + 1.
fn mel_filterbank(n_fft: usize, sample_rate: u32) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let f_max = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(f_max);
    // Band edges: MEL_BANDS + 2 points equally spaced on the mel scale.
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    let mut fb = Array2::zeros((n_bins, MEL_BANDS));
    for b in 0..MEL_BANDS {
        let (lo, center, hi) = (edges[b], edges[b + 1], edges[b + 2]);
        for bin in 0..n_bins {
            let f = bin as f64 * bin_hz;
            let w = if f >= lo && f <= center && center > lo {
                (f - lo) / (center - lo)
            } else if f > center && f <= hi && hi > center {
                (hi - f) / (hi - center)
            } else {
                0.0
            };
            fb[[bin, b]] = w;
        }
    }
    fb
}

/// Converts a duration in milliseconds to a whole number of samples.
pub fn ms_to_samples(ms: f64, sample_rate: u32) -> usize {
    (ms * sample_rate as f64 / 1000.0).round() as usize
}

/// Number of analysis frames for the stated framing convention.
pub fn frame_count(n_samples: usize, window: usize, hop: usize) -> usize {
    if n_samples < window {
        0
    } else {
        (n_samples - window) / hop + 1
    }
}

/// Extracts an 80-band log-mel spectrogram.
pub fn extract_mel(clip: &AudioClip, window_ms: f64, hop_ms: f64) -> Result<MelSpectrogram> {
    if clip.is_empty() {
        return Err(Error::invalid("clip is empty"));
    }
    if !(hop_ms > 0.0) || window_ms < hop_ms {
        return Err(Error::invalid(format!(
            "need window_ms >= hop_ms > 0, got window {window_ms} hop {hop_ms}"
        )));
    }
    let window = ms_to_samples(window_ms, clip.sample_rate());
    let hop = ms_to_samples(hop_ms, clip.sample_rate());
    if window == 0 || hop == 0 {
        return Err(Error::invalid("window/hop shorter than one sample"));
    }
    let n_frames = frame_count(clip.len(), window, hop);
    if n_frames == 0 {
        return Err(Error::invalid("clip too short"));
    }

    let n_fft = window.next_power_of_two();
    let n_bins = n_fft / 2 + 1;
    let hann: Vec<f64> = (0..window)
        .map(|i| {
            let x = std::f64::consts::PI * i as f64 / window as f64;
            x.sin() * x.sin()
        })
        .collect();
    let fb = mel_filterbank(n_fft, clip.sample_rate());

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(n_fft);
    let samples = clip.samples();

    let mut frames = Array2::zeros((n_frames, MEL_BANDS));
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut mag = vec![0.0f64; n_bins];
    for t in 0..n_frames {
        let start = t * hop;
        for i in 0..n_fft {
            let v = if i < window {
                samples[start + i] * hann[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        for (i, m) in mag.iter_mut().enumerate() {
            *m = buf[i].norm();
        }
        for b in 0..MEL_BANDS {
            let mut acc = 0.0;
            for (i, &m) in mag.iter().enumerate() {
                acc += m * fb[[i, b]];
            }
            frames[[t, b]] = acc.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(frames, window_ms, hop_ms)
}
