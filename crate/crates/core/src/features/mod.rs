//! Audio preprocessing: silence removal, one-second segmentation and 128-bin
//! log-Mel patches, plus the synthetic instrument generator.

pub mod audio_io;
pub mod cache;
pub mod segment;
pub mod spectral;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::FeatureError;

pub use segment::{remove_silence, segment};
pub use spectral::{log_mel, stft_magnitude, LogMel, MelFilterbank, N_MELS};
pub use synth::{synth_instrument, LeafVariant, SynthFamily, SynthManifest};

pub const SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
    pub source: String,
    pub label: String,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32, source: impl Into<String>, label: impl Into<String>) -> Self {
        AudioClip { samples, sample_rate, source: source.into(), label: label.into() }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.samples.is_empty() || self.sample_rate == 0 {
            return Err(FeatureError::Audio(format!("{}: empty clip", self.source)));
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::Audio(format!("{}: non-finite samples", self.source)));
        }
        Ok(())
    }
}

/// `[n_mels, frames]` log-Mel matrix of one segment.
#[derive(Debug, Clone, PartialEq)]
pub struct LogMelPatch {
    pub data: Tensor,
    pub source: String,
    pub label: String,
}

/// Silence-removal and segmentation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Preprocess {
    pub silence_threshold_db: f64,
    pub min_silence_ms: f64,
    pub segment_s: f64,
    pub hop_s: f64,
}

impl Default for Preprocess {
    fn default() -> Self {
        Preprocess { silence_threshold_db: -60.0, min_silence_ms: 100.0, segment_s: 1.0, hop_s: 0.5 }
    }
}

/// Full chain for one clip: resample, drop silence, cut into segments, log-Mel.
pub fn clip_patches(clip: &AudioClip, pre: &Preprocess, mel: &LogMel) -> Result<Vec<LogMelPatch>, FeatureError> {
    clip.validate()?;
    let clip = if clip.sample_rate != SAMPLE_RATE {
        let mut c = clip.clone();
        c.samples = audio_io::resample(&clip.samples, clip.sample_rate, SAMPLE_RATE);
        c.sample_rate = SAMPLE_RATE;
        std::borrow::Cow::Owned(c)
    } else {
        std::borrow::Cow::Borrowed(clip)
    };
    let mut out = Vec::new();
    for region in remove_silence(&clip, pre.silence_threshold_db, pre.min_silence_ms) {
        for seg in segment(&region, pre.segment_s, pre.hop_s) {
            let patch = mel.compute(&seg)?;
            if !patch.data.is_finite() {
                return Err(FeatureError::Audio(format!("{}: non-finite log-Mel values", clip.source)));
            }
            out.push(patch);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use spectral::{frame_geometry, hann, HOP_MS, LOG_OFFSET, WINDOW_MS};
    use std::f64::consts::PI;

    fn sine(freq: f64, seconds: f64, amp: f64) -> AudioClip {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        let s = (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / SAMPLE_RATE as f64).sin()).collect();
        AudioClip::new(s, SAMPLE_RATE, "sine", "tone")
    }

    fn dft_mag(x: &[f64]) -> Vec<f64> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * (k * t % n) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (re * re + im * im).sqrt()
            })
            .collect()
    }

    #[test]
    fn stft_geometry() {
        assert_eq!(frame_geometry(SAMPLE_RATE, WINDOW_MS, HOP_MS), (512, 128));
        let m = stft_magnitude(&sine(1000.0, 1.0, 0.5), WINDOW_MS, HOP_MS).unwrap();
        assert_eq!(m.shape(), &[122, 257]);
        assert_eq!(LogMel::default().frames(), 122);
    }

    #[test]
    fn sine_peaks_at_expected_bin_and_matches_direct_dft() {
        let clip = sine(1000.0, 0.1, 0.5);
        let m = stft_magnitude(&clip, WINDOW_MS, HOP_MS).unwrap();
        let w = hann(512);
        for f in 0..m.shape()[0] {
            let row = m.row(f);
            let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert_eq!(argmax, 32);
            let frame: Vec<f64> = clip.samples[f * 128..f * 128 + 512].iter().zip(&w).map(|(a, b)| a * b).collect();
            let oracle = dft_mag(&frame);
            for (a, b) in row.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()));
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f64> = (0..4000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clip = AudioClip::new(s, SAMPLE_RATE, "n", "n");
        let m = stft_magnitude(&clip, WINDOW_MS, HOP_MS).unwrap();
        let w = hann(512);
        for f in 0..m.shape()[0] {
            let time: f64 = clip.samples[f * 128..f * 128 + 512].iter().zip(&w).map(|(a, b)| (a * b).powi(2)).sum();
            let row = m.row(f);
            // one-sided spectrum: interior bins count twice
            let spec: f64 = row
                .iter()
                .enumerate()
                .map(|(k, v)| if k == 0 || k == 256 { v * v } else { 2.0 * v * v })
                .sum::<f64>()
                / 512.0;
            assert!((time - spec).abs() <= 1e-9 * time);
        }
    }

    #[test]
    fn zero_clip() {
        let z = AudioClip::new(vec![0.0; 16000], SAMPLE_RATE, "z", "z");
        let m = stft_magnitude(&z, WINDOW_MS, HOP_MS).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let p = log_mel(&z).unwrap();
        assert_eq!(p.data.shape(), &[128, 122]);
        assert!(p.data.data().iter().all(|&v| v == LOG_OFFSET.ln()));
    }

    #[test]
    fn length_errors() {
        let short = AudioClip::new(vec![0.0; 100], SAMPLE_RATE, "s", "s");
        assert!(matches!(stft_magnitude(&short, WINDOW_MS, HOP_MS), Err(FeatureError::TooShort { .. })));
        let long = AudioClip::new(vec![0.0; 16001], SAMPLE_RATE, "l", "l");
        assert!(matches!(log_mel(&long), Err(FeatureError::WrongLength { .. })));
    }

    #[test]
    fn filterbank_shape_properties() {
        let fb = MelFilterbank::standard();
        let bins = 257;
        for m in 0..fb.n_mels() {
            let row = &fb.weights.data()[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0);
            let argmax = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
            assert!((argmax as f64 - fb.centers[m]).abs() <= 1.0, "filter {m}");
        }
        let first = fb.centers[0].ceil() as usize;
        let last = fb.centers[fb.n_mels() - 1].floor() as usize;
        for k in first..=last {
            assert!((0..fb.n_mels()).any(|m| fb.weights.data()[m * bins + k] > 0.0), "bin {k}");
        }
    }

    #[test]
    fn white_noise_energy_tracks_bandwidth() {
        let fb = MelFilterbank::standard();
        let mel = LogMel::default();
        let bins = 257;
        let widths: Vec<f64> = (0..fb.n_mels()).map(|m| fb.weights.data()[m * bins..(m + 1) * bins].iter().sum()).collect();
        let mut mean = vec![0.0; fb.n_mels()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let s: Vec<f64> = (0..16000).map(|_| rng.gen_range(-0.5..0.5)).collect();
            let p = mel.compute(&AudioClip::new(s, SAMPLE_RATE, "w", "w")).unwrap();
            for m in 0..fb.n_mels() {
                let row = &p.data.data()[m * 122..(m + 1) * 122];
                mean[m] += row.iter().map(|v| v.exp()).sum::<f64>() / 122.0 / 100.0;
            }
        }
        // sort filters by total weight; energy must follow the same order
        let mut order: Vec<usize> = (0..fb.n_mels()).collect();
        order.sort_by(|&a, &b| widths[a].total_cmp(&widths[b]));
        let mut violations = 0;
        for pair in order.windows(2) {
            if widths[pair[1]] > 1.05 * widths[pair[0]] && mean[pair[1]] < mean[pair[0]] {
                violations += 1;
            }
        }
        assert_eq!(violations, 0);
        let ratio: Vec<f64> = (0..fb.n_mels()).map(|m| mean[m] / widths[m]).collect();
        let avg = ratio.iter().sum::<f64>() / ratio.len() as f64;
        assert!(ratio.iter().all(|r| (r / avg - 1.0).abs() < 0.1));
    }

    fn tone_with_gap(gap_db: f64) -> AudioClip {
        let mut s = sine(440.0, 0.5, 0.5).samples;
        let quiet = 10f64.powf(gap_db / 20.0) * 2f64.sqrt();
        s.extend(sine(440.0, 0.5, quiet).samples);
        s.extend(sine(440.0, 0.5, 0.5).samples);
        AudioClip::new(s, SAMPLE_RATE, "gap", "tone")
    }

    #[test]
    fn silence_removal_cases() {
        let silent = AudioClip::new(vec![0.0; 16000], SAMPLE_RATE, "s", "s");
        assert!(remove_silence(&silent, -60.0, 100.0).is_empty());
        let loud = sine(440.0, 1.0, 0.5);
        assert_eq!(remove_silence(&loud, -60.0, 100.0), vec![loud.clone()]);

        let parts = remove_silence(&tone_with_gap(-90.0), -60.0, 100.0);
        assert_eq!(parts.len(), 2);
        for p in &parts {
            assert!((p.duration_s() - 0.5).abs() <= 0.025 + 1e-9, "{}", p.duration_s());
        }
        assert_eq!(parts[0].samples[..], tone_with_gap(-90.0).samples[..8000]);
    }

    #[test]
    fn short_silences_are_kept() {
        let mut s = sine(440.0, 0.5, 0.5).samples;
        s.extend(vec![0.0; 800]);
        s.extend(sine(440.0, 0.5, 0.5).samples);
        let clip = AudioClip::new(s, SAMPLE_RATE, "g", "g");
        let parts = remove_silence(&clip, -60.0, 100.0);
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].samples.len(), clip.samples.len());
    }

    #[test]
    fn segment_counts() {
        let count = |sec: f64| segment(&sine(440.0, sec, 0.5), 1.0, 0.5).len();
        assert_eq!(count(1.0), 1);
        assert_eq!(count(2.0), 3);
        assert_eq!(count(0.9), 0);
        assert_eq!(count(2.7), 4);
        let segs = segment(&sine(440.0, 2.0, 0.5), 1.0, 0.5);
        assert!(segs.iter().all(|s| s.samples.len() == 16000));
    }

    #[test]
    fn clip_patches_skip_silent_regions() {
        let mut s = sine(440.0, 1.2, 0.5).samples;
        s.extend(vec![0.0; 16000 * 2]);
        s.extend(sine(880.0, 1.0, 0.5).samples);
        let clip = AudioClip::new(s, SAMPLE_RATE, "c", "tone");
        let patches = clip_patches(&clip, &Preprocess::default(), &LogMel::default()).unwrap();
        assert_eq!(patches.len(), 2);
        for p in &patches {
            // a silent patch would sit at log(1e-6) everywhere
            assert!(p.data.data().iter().cloned().fold(f64::MIN, f64::max) > 0.0);
            assert_eq!(p.label, "tone");
        }
    }

    fn rms_windows(s: &[f64], win: usize) -> Vec<f64> {
        s.chunks_exact(win).map(|c| (c.iter().map(|v| v * v).sum::<f64>() / win as f64).sqrt()).collect()
    }

    fn flatness(s: &[f64]) -> f64 {
        let clip = AudioClip::new(s.to_vec(), SAMPLE_RATE, "f", "f");
        let m = stft_magnitude(&clip, WINDOW_MS, HOP_MS).unwrap();
        let mut total = 0.0;
        for f in 0..m.shape()[0] {
            let p: Vec<f64> = m.row(f).iter().map(|v| v * v + 1e-20).collect();
            let geo = (p.iter().map(|v| v.ln()).sum::<f64>() / p.len() as f64).exp();
            total += geo / (p.iter().sum::<f64>() / p.len() as f64);
        }
        total / m.shape()[0] as f64
    }

    #[test]
    fn synth_is_deterministic_and_shaped() {
        let m = SynthManifest::bundled();
        let leaf = |n: &str| &m.leaves.iter().find(|l| l.name == n).unwrap().params;
        let a = synth_instrument(SynthFamily::Plucked, leaf("synth_guitar"), 1.0, 9).unwrap();
        let b = synth_instrument(SynthFamily::Plucked, leaf("synth_guitar"), 1.0, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_instrument(SynthFamily::Plucked, leaf("synth_guitar"), 1.0, 10).unwrap();
        assert_ne!(a.samples, c.samples);

        for seed in 0..5 {
            let p = synth_instrument(SynthFamily::Plucked, leaf("synth_harp"), 1.0, seed).unwrap();
            let rms = rms_windows(&p.samples, 1600);
            assert!(rms.windows(2).all(|w| w[1] < w[0]), "{rms:?}");
        }

        let bowed = synth_instrument(SynthFamily::Bowed, leaf("synth_cello"), 1.0, 1).unwrap();
        let noise = synth_instrument(SynthFamily::PercussiveNoise, leaf("synth_shaker"), 1.0, 1).unwrap();
        assert!(flatness(&bowed.samples[..4000]) < flatness(&noise.samples[..4000]));
    }

    #[test]
    fn synth_rejects_bad_params() {
        let mut v = SynthManifest::bundled().leaves[0].params.clone();
        v.f0_hz = [500.0, 100.0];
        assert!(matches!(synth_instrument(SynthFamily::Bowed, &v, 1.0, 0), Err(FeatureError::InvalidParams(_))));
        let ok = SynthManifest::bundled().leaves[0].params.clone();
        assert!(synth_instrument(SynthFamily::Bowed, &ok, 0.0, 0).is_err());
    }

    #[test]
    fn manifest_tree_matches_bundled_tree() {
        let m = SynthManifest::bundled();
        m.validate().unwrap();
        let t = m.tree().unwrap();
        let bundled = crate::tree::ClassTree::parse(crate::tree::BUNDLED_SYNTHETIC).unwrap();
        assert_eq!(t.to_value(), bundled.to_value());
        assert_eq!(t.leaf_count(), 20);
    }

    #[test]
    fn rendered_clips_give_finite_patches() {
        let m = SynthManifest::bundled();
        let mel = LogMel::default();
        for leaf in [0, 9, 13, 17] {
            let clip = m.render_clip(leaf, 0).unwrap();
            assert_eq!(clip.samples.len(), 64000);
            assert_eq!(clip, m.render_clip(leaf, 0).unwrap());
            let patches = clip_patches(&clip, &Preprocess::default(), &mel).unwrap();
            assert!(patches.len() >= 4, "{} gave {}", clip.label, patches.len());
            assert!(patches.iter().all(|p| p.data.is_finite()));
        }
    }
}
