//! WAV ingestion and resampling.

use std::path::{Path, PathBuf};

use super::AudioClip;
use crate::error::FeatureError;

const KAISER_BETA: f64 = 8.0;
const HALF_TAPS: f64 = 16.0;

fn audio_err(path: &Path, e: impl std::fmt::Display) -> FeatureError {
    FeatureError::Audio(format!("{}: {e}", path.display()))
}

/// Read a PCM (8/16/24/32-bit) or float WAV, mixing channels down to mono.
pub fn read_wav(path: &Path, label: &str) -> Result<AudioClip, FeatureError> {
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(path, e))?;
    let spec = reader.spec();
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()
            .map_err(|e| audio_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<Result<_, _>>()
                .map_err(|e| audio_err(path, e))?
        }
    };
    let ch = spec.channels.max(1) as usize;
    let samples: Vec<f64> = interleaved.chunks_exact(ch).map(|c| c.iter().sum::<f64>() / ch as f64).collect();
    let clip = AudioClip::new(samples, spec.sample_rate, path.display().to_string(), label);
    clip.validate()?;
    Ok(clip)
}

/// Write a mono 16-bit PCM WAV; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<(), FeatureError> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| audio_err(path, e))?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| audio_err(path, e))?;
    }
    w.finalize().map_err(|e| audio_err(path, e))
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Kaiser-windowed sinc resampler (beta 8). When downsampling, the cutoff
/// follows the output Nyquist.
pub fn resample(samples: &[f64], from: u32, to: u32) -> Vec<f64> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = to as f64 / from as f64;
    let cutoff = ratio.min(1.0) * 0.97;
    let half = HALF_TAPS / cutoff;
    let norm = bessel_i0(KAISER_BETA);
    let n_out = (samples.len() as f64 * ratio).floor() as usize;
    (0..n_out)
        .map(|i| {
            let x = i as f64 / ratio;
            let lo = (x - half).ceil().max(0.0) as usize;
            let hi = ((x + half).floor() as usize).min(samples.len() - 1);
            (lo..=hi)
                .map(|k| {
                    let d = x - k as f64;
                    let r = d / half;
                    let win = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                    samples[k] * cutoff * sinc(cutoff * d) * win
                })
                .sum()
        })
        .collect()
}

/// Every `<label>/<file>.wav` under `root`, sorted by label then file name.
pub fn wav_files(root: &Path) -> Result<Vec<(String, PathBuf)>, FeatureError> {
    let mut out = Vec::new();
    let dirs = std::fs::read_dir(root).map_err(|e| audio_err(root, e))?;
    for dir in dirs {
        let dir = dir.map_err(|e| audio_err(root, e))?.path();
        if !dir.is_dir() {
            continue;
        }
        let label = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        for f in std::fs::read_dir(&dir).map_err(|e| audio_err(&dir, e))? {
            let f = f.map_err(|e| audio_err(&dir, e))?.path();
            if f.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
                out.push((label.clone(), f));
            }
        }
    }
    out.sort();
    Ok(out)
}

pub fn load_directory(root: &Path) -> Result<Vec<AudioClip>, FeatureError> {
    wav_files(root)?.iter().map(|(label, p)| read_wav(p, label)).collect()
}
