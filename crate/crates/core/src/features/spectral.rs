use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioClip, LogMelPatch, SAMPLE_RATE};
use crate::autodiff::Tensor;
use crate::error::FeatureError;

pub const N_MELS: usize = 128;
pub const LOG_OFFSET: f64 = 1e-6;
pub const WINDOW_MS: f64 = 32.0;
pub const HOP_MS: f64 = 8.0;

/// Samples per window and hop for a given rate.
pub fn frame_geometry(sample_rate: u32, window_ms: f64, hop_ms: f64) -> (usize, usize) {
    let win = (sample_rate as f64 * window_ms / 1000.0).round() as usize;
    let hop = (sample_rate as f64 * hop_ms / 1000.0).round() as usize;
    (win, hop)
}

/// Frames produced by an unpadded STFT that drops the partial final frame.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

/// Periodic Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect()
}

struct Stft {
    win: usize,
    hop: usize,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Stft {
    fn new(win: usize, hop: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(win);
        Stft { win, hop, window: hann(win), fft }
    }

    /// `[frames, win / 2 + 1]` magnitudes.
    fn magnitude(&self, samples: &[f64]) -> Tensor {
        let frames = frame_count(samples.len(), self.win, self.hop);
        let bins = self.win / 2 + 1;
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.win];
        for f in 0..frames {
            let seg = &samples[f * self.hop..f * self.hop + self.win];
            for ((b, &s), &w) in buf.iter_mut().zip(seg).zip(&self.window) {
                *b = Complex::new(s * w, 0.0);
            }
            self.fft.process(&mut buf);
            out.extend(buf[..bins].iter().map(|c| c.norm()));
        }
        Tensor::new(vec![frames, bins], out).unwrap()
    }
}

/// Hann-windowed magnitude spectrogram, FFT size equal to the window length.
pub fn stft_magnitude(clip: &AudioClip, window_ms: f64, hop_ms: f64) -> Result<Tensor, FeatureError> {
    let (win, hop) = frame_geometry(clip.sample_rate, window_ms, hop_ms);
    if clip.samples.len() < win {
        return Err(FeatureError::TooShort { len: clip.samples.len(), window: win });
    }
    Ok(Stft::new(win, hop).magnitude(&clip.samples))
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft / 2 + 1]`.
    pub weights: Tensor,
    /// Fractional FFT-bin position of each filter's peak.
    pub centers: Vec<f64>,
}

impl MelFilterbank {
    /// Each triangle spans its neighbours' centers; each side is at least one
    /// FFT bin wide so narrow low-frequency filters never come out empty.
    pub fn new(n_mels: usize, n_fft: usize, sample_rate: u32, fmin: f64, fmax: f64) -> Self {
        let bins = n_fft / 2 + 1;
        let bin_hz = sample_rate as f64 / n_fft as f64;
        let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
        let points: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64) / bin_hz)
            .collect();
        let mut w = vec![0.0; n_mels * bins];
        for m in 0..n_mels {
            let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
            let down = (center - left).max(1.0);
            let up = (right - center).max(1.0);
            for k in 0..bins {
                let x = k as f64;
                let v = if x <= center { 1.0 - (center - x) / down } else { 1.0 - (x - center) / up };
                w[m * bins + k] = v.max(0.0);
            }
        }
        MelFilterbank {
            weights: Tensor::new(vec![n_mels, bins], w).unwrap(),
            centers: points[1..=n_mels].to_vec(),
        }
    }

    pub fn standard() -> Self {
        let (win, _) = frame_geometry(SAMPLE_RATE, WINDOW_MS, HOP_MS);
        MelFilterbank::new(N_MELS, win, SAMPLE_RATE, 0.0, SAMPLE_RATE as f64 / 2.0)
    }

    pub fn n_mels(&self) -> usize {
        self.weights.shape()[0]
    }

    /// Mel energies `[n_mels, frames]` from a `[frames, bins]` power spectrogram.
    pub fn apply(&self, power: &Tensor) -> Tensor {
        let (frames, bins) = (power.shape()[0], power.shape()[1]);
        let n_mels = self.n_mels();
        let mut out = vec![0.0; n_mels * frames];
        for m in 0..n_mels {
            let wr = &self.weights.data()[m * bins..(m + 1) * bins];
            for f in 0..frames {
                out[m * frames + f] = wr.iter().zip(power.row(f)).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::new(vec![n_mels, frames], out).unwrap()
    }
}

/// Log-Mel extractor for one-second 16 kHz segments.
pub struct LogMel {
    stft: Stft,
    bank: MelFilterbank,
    segment_len: usize,
}

impl Default for LogMel {
    fn default() -> Self {
        let (win, hop) = frame_geometry(SAMPLE_RATE, WINDOW_MS, HOP_MS);
        LogMel {
            stft: Stft::new(win, hop),
            bank: MelFilterbank::standard(),
            segment_len: SAMPLE_RATE as usize,
        }
    }
}

impl LogMel {
    pub fn frames(&self) -> usize {
        frame_count(self.segment_len, self.stft.win, self.stft.hop)
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<LogMelPatch, FeatureError> {
        if clip.samples.len() != self.segment_len || clip.sample_rate != SAMPLE_RATE {
            return Err(FeatureError::WrongLength { expected: self.segment_len, got: clip.samples.len() });
        }
        let mut power = self.stft.magnitude(&clip.samples);
        power.data_mut().iter_mut().for_each(|v| *v *= *v);
        let mut mel = self.bank.apply(&power);
        mel.data_mut().iter_mut().for_each(|v| *v = (*v + LOG_OFFSET).ln());
        Ok(LogMelPatch {
            data: mel,
            source: clip.source.clone(),
            label: clip.label.clone(),
        })
    }
}

/// 128-bin log-Mel patch of a one-second clip: `log(mel_power + 1e-6)`.
pub fn log_mel(clip: &AudioClip) -> Result<LogMelPatch, FeatureError> {
    LogMel::default().compute(clip)
}
