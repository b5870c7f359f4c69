//! WAV to log-mel featurization: 50 ms Hann windows with a 12.5 ms hop at
//! 24 kHz, 128 triangular filters on the Slaney mel scale over 60 Hz-12 kHz.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::melf::{MelSpectrogram, LOG_FLOOR, N_MELS};
use super::CorpusError;

pub const SAMPLE_RATE: u32 = 24_000;
pub const WINDOW: usize = 1200;
pub const HOP: usize = 300;
pub const F_MIN: f64 = 60.0;
pub const F_MAX: f64 = 12_000.0;

const SLANEY_BREAK_HZ: f64 = 1000.0;
const SLANEY_LIN_STEP: f64 = 200.0 / 3.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    let log_step = 6.4f64.ln() / 27.0;
    if hz < SLANEY_BREAK_HZ {
        hz / SLANEY_LIN_STEP
    } else {
        SLANEY_BREAK_HZ / SLANEY_LIN_STEP + (hz / SLANEY_BREAK_HZ).ln() / log_step
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    let log_step = 6.4f64.ln() / 27.0;
    let break_mel = SLANEY_BREAK_HZ / SLANEY_LIN_STEP;
    if mel < break_mel {
        mel * SLANEY_LIN_STEP
    } else {
        SLANEY_BREAK_HZ * ((mel - break_mel) * log_step).exp()
    }
}

/// Edge frequencies of the filterbank: `N_MELS + 2` points evenly spaced in
/// mel. Filter `m` rises from edge `m` to a peak of 1 at edge `m + 1` and
/// falls to zero at edge `m + 2`.
pub fn filter_edges_hz() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Weight of filter `m` at frequency `hz`.
pub fn filter_weight(edges: &[f64], m: usize, hz: f64) -> f64 {
    let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
    if hz <= l || hz >= r {
        0.0
    } else if hz <= c {
        (hz - l) / (c - l)
    } else {
        (r - hz) / (r - c)
    }
}

pub struct Featurizer {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    /// `N_MELS x (WINDOW / 2 + 1)` filter weights.
    filters: Vec<Vec<f64>>,
}

impl Default for Featurizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Featurizer {
    pub fn new() -> Self {
        let fft = FftPlanner::new().plan_fft_forward(WINDOW);
        let window = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        let edges = filter_edges_hz();
        let bin_hz = f64::from(SAMPLE_RATE) / WINDOW as f64;
        let filters = (0..N_MELS)
            .map(|m| {
                (0..=WINDOW / 2)
                    .map(|k| filter_weight(&edges, m, k as f64 * bin_hz))
                    .collect()
            })
            .collect();
        Self {
            fft,
            window,
            filters,
        }
    }

    pub fn frame_count(samples: usize) -> Option<usize> {
        (samples >= WINDOW).then(|| (samples - WINDOW) / HOP + 1)
    }

    pub fn featurize(&self, pcm: &[i16], sample_rate: u32) -> Result<MelSpectrogram, CorpusError> {
        if sample_rate != SAMPLE_RATE {
            return Err(CorpusError::Invalid(format!(
                "sample rate {sample_rate} Hz unsupported, expected {SAMPLE_RATE}"
            )));
        }
        let frames = Self::frame_count(pcm.len()).ok_or_else(|| {
            CorpusError::Invalid(format!(
                "{} samples is shorter than one {WINDOW}-sample window",
                pcm.len()
            ))
        })?;
        let mut out = Vec::with_capacity(frames * N_MELS);
        let mut buf = vec![Complex::new(0.0, 0.0); WINDOW];
        let mut mag = vec![0.0; WINDOW / 2 + 1];
        for f in 0..frames {
            let start = f * HOP;
            for (n, slot) in buf.iter_mut().enumerate() {
                let x = f64::from(pcm[start + n]) / 32768.0;
                *slot = Complex::new(x * self.window[n], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, m) in mag.iter_mut().enumerate() {
                *m = buf[k].norm();
            }
            for filt in &self.filters {
                let e: f64 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        MelSpectrogram::from_f64(N_MELS, &out)
    }
}

/// Convenience wrapper building a fresh [`Featurizer`].
pub fn featurize_wav(pcm: &[i16], sample_rate: u32) -> Result<MelSpectrogram, CorpusError> {
    Featurizer::new().featurize(pcm, sample_rate)
}
