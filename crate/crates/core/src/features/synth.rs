//! Synthetic instrument generator used as a desk-scale stand-in for a real
//! multitrack corpus. Five sound-production families, each with leaf variants
//! that shift pitch range, decay, inharmonicity and brightness.

use std::f64::consts::PI;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AudioClip, SAMPLE_RATE};
use crate::error::FeatureError;
use crate::tree::ClassTree;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthFamily {
    /// Sustained harmonic tone with vibrato.
    Bowed,
    /// Exponentially decaying harmonics.
    Plucked,
    /// Inharmonic bell partials.
    Struck,
    /// Harmonics plus filtered breath noise.
    Wind,
    /// Shaped noise bursts with an optional pitched body.
    PercussiveNoise,
}

impl SynthFamily {
    /// Range of note lengths used when assembling clips.
    pub fn note_seconds(self) -> (f64, f64) {
        match self {
            SynthFamily::Bowed | SynthFamily::Wind => (0.6, 1.5),
            SynthFamily::Plucked | SynthFamily::Struck => (0.4, 1.2),
            SynthFamily::PercussiveNoise => (0.15, 0.4),
        }
    }
}

/// Per-leaf parameter ranges; each note draws one value from every range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafVariant {
    pub f0_hz: [f64; 2],
    pub decay_s: [f64; 2],
    pub inharmonicity: [f64; 2],
    pub brightness: [f64; 2],
    #[serde(default)]
    pub noise_mix: [f64; 2],
}

#[derive(Debug, Clone, Copy)]
struct Note {
    f0: f64,
    decay: f64,
    inharm: f64,
    bright: f64,
    noise: f64,
}

impl LeafVariant {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let nyq = SAMPLE_RATE as f64 / 2.0;
        let checks = [
            ("f0_hz", self.f0_hz, 1.0, nyq),
            ("decay_s", self.decay_s, 1e-3, 60.0),
            ("inharmonicity", self.inharmonicity, 0.0, 2.0),
            ("brightness", self.brightness, 0.0, 1.0),
            ("noise_mix", self.noise_mix, 0.0, 1.0),
        ];
        for (name, [lo, hi], min, max) in checks {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= min && hi <= max) {
                return Err(FeatureError::InvalidParams(format!(
                    "{name} range [{lo}, {hi}] must be ordered within [{min}, {max}]"
                )));
            }
        }
        Ok(())
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> Note {
        let mut uni = |[lo, hi]: [f64; 2]| if hi > lo { rng.gen_range(lo..hi) } else { lo };
        let f0 = uni([self.f0_hz[0].ln(), self.f0_hz[1].ln()]).exp();
        Note {
            f0,
            decay: uni(self.decay_s),
            inharm: uni(self.inharmonicity),
            bright: uni(self.brightness),
            noise: uni(self.noise_mix),
        }
    }
}

fn rolloff(k: usize, bright: f64) -> f64 {
    (k as f64).powf(-(3.0 - 2.5 * bright))
}

/// One-pole low-pass filtered white noise.
fn colored_noise(rng: &mut ChaCha8Rng, n: usize, cutoff_hz: f64) -> Vec<f64> {
    let a = (-2.0 * PI * cutoff_hz / SAMPLE_RATE as f64).exp();
    let mut y = 0.0;
    (0..n)
        .map(|_| {
            let x: f64 = rng.gen_range(-1.0..1.0);
            y = (1.0 - a) * x + a * y;
            y
        })
        .collect()
}

fn ramp_envelope(n: usize, attack: usize, release: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let a = if attack > 0 { (i as f64 / attack as f64).min(1.0) } else { 1.0 };
            let r = if release > 0 { ((n - i) as f64 / release as f64).min(1.0) } else { 1.0 };
            a * r
        })
        .collect()
}

/// Render one note of `duration_s` seconds at 16 kHz, peak-normalized to 0.5.
pub fn synth_instrument(
    family: SynthFamily,
    variant: &LeafVariant,
    duration_s: f64,
    seed: u64,
) -> Result<AudioClip, FeatureError> {
    variant.validate()?;
    if !(duration_s.is_finite() && duration_s > 0.0) {
        return Err(FeatureError::InvalidParams(format!("duration {duration_s} must be positive")));
    }
    let sr = SAMPLE_RATE as f64;
    let n = (duration_s * sr).round() as usize;
    if n == 0 {
        return Err(FeatureError::InvalidParams("duration shorter than one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let note = variant.draw(&mut rng);
    let nyq = sr / 2.0 * 0.95;
    let ms = |v: f64| (v * sr / 1000.0) as usize;
    let mut out = vec![0.0; n];

    match family {
        SynthFamily::Bowed | SynthFamily::Wind => {
            let (vib_rate, vib_depth, attack) = if family == SynthFamily::Bowed {
                (rng.gen_range(4.5..6.5), 0.006, ms(80.0))
            } else {
                (rng.gen_range(3.5..5.0), 0.003, ms(40.0))
            };
            let vib_phase = rng.gen_range(0.0..2.0 * PI);
            let mut k = 1;
            loop {
                let ratio = k as f64 * (1.0 + note.inharm * (k * k) as f64).sqrt();
                if ratio * note.f0 * (1.0 + vib_depth) >= nyq {
                    break;
                }
                let amp = rolloff(k, note.bright);
                let mut phase = rng.gen_range(0.0..2.0 * PI);
                for (i, o) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    let f = ratio * note.f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t + vib_phase).sin());
                    *o += amp * phase.sin();
                    phase += 2.0 * PI * f / sr;
                }
                k += 1;
            }
            let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let cutoff = 300.0 + note.bright * 6000.0;
            let noise = colored_noise(&mut rng, n, cutoff);
            let npeak = noise.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let mix = if family == SynthFamily::Bowed { note.noise * 0.3 } else { note.noise };
            for (o, z) in out.iter_mut().zip(noise) {
                *o = (1.0 - mix) * *o / peak + mix * z / npeak;
            }
            let env = ramp_envelope(n, attack, ms(60.0));
            out.iter_mut().zip(env).for_each(|(o, e)| *o *= e);
        }
        SynthFamily::Plucked | SynthFamily::Struck => {
            let partials: Vec<(f64, f64, f64)> = if family == SynthFamily::Plucked {
                (1..)
                    .map(|k: usize| {
                        let ratio = k as f64 * (1.0 + note.inharm * (k * k) as f64).sqrt();
                        (ratio, rolloff(k, note.bright), note.decay / (1.0 + 0.3 * (k - 1) as f64))
                    })
                    .take_while(|p| p.0 * note.f0 < nyq)
                    .collect()
            } else {
                (1..=10)
                    .map(|k: usize| {
                        let detune = rng.gen_range(-0.02..0.02);
                        let ratio = (k as f64).powf(1.0 + note.inharm) * (1.0 + detune);
                        (ratio, rolloff(k, note.bright), note.decay / (1.0 + 0.5 * (k - 1) as f64))
                    })
                    .filter(|p| p.0 * note.f0 < nyq)
                    .collect()
            };
            for (ratio, amp, tau) in partials {
                let w = 2.0 * PI * ratio * note.f0 / sr;
                let phase = rng.gen_range(0.0..2.0 * PI);
                for (i, o) in out.iter_mut().enumerate() {
                    let t = i as f64 / sr;
                    *o += amp * (-t / tau).exp() * (w * i as f64 + phase).sin();
                }
            }
            if note.noise > 0.0 {
                let noise = colored_noise(&mut rng, n, 2000.0 + note.bright * 5000.0);
                let base = out.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
                for (i, (o, z)) in out.iter_mut().zip(noise).enumerate() {
                    let t = i as f64 / sr;
                    *o += note.noise * base * z * (-t / note.decay).exp();
                }
            }
            let env = ramp_envelope(n, ms(3.0), ms(10.0));
            out.iter_mut().zip(env).for_each(|(o, e)| *o *= e);
        }
        SynthFamily::PercussiveNoise => {
            let cutoff = 300.0 + note.bright * 7500.0;
            let noise = colored_noise(&mut rng, n, cutoff.min(nyq));
            let npeak = noise.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
            let mut phase = 0.0f64;
            for (i, (o, z)) in out.iter_mut().zip(noise).enumerate() {
                let t = i as f64 / sr;
                let env = (-t / note.decay).exp();
                let f = note.f0 * (1.0 + note.inharm * (-t / 0.03).exp());
                let body = phase.sin();
                phase += 2.0 * PI * f / sr;
                *o = env * (note.noise * z / npeak + (1.0 - note.noise) * body);
            }
            let env = ramp_envelope(n, ms(1.0), ms(5.0));
            out.iter_mut().zip(env).for_each(|(o, e)| *o *= e);
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: SAMPLE_RATE,
        source: format!("synth-{seed}"),
        label: String::new(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    pub kind: SynthFamily,
    /// Super-family (`sustained` / `decaying` in the bundled manifest).
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LeafSpec {
    pub name: String,
    pub family: String,
    pub params: LeafVariant,
}

/// Description of a synthetic dataset: leaves, their families and parameter
/// ranges, and the global seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthManifest {
    pub name: String,
    pub seed: u64,
    pub clips_per_leaf: usize,
    pub clip_seconds: f64,
    /// Level of the background noise laid under every note.
    pub noise_floor_db: f64,
    /// Chance of a digital-silence rest after each note.
    pub rest_probability: f64,
    pub families: Vec<FamilySpec>,
    pub leaves: Vec<LeafSpec>,
}

pub const BUNDLED_MANIFEST: &str = include_str!("../../data/synthetic_manifest.json");

impl SynthManifest {
    pub fn bundled() -> Self {
        serde_json::from_str(BUNDLED_MANIFEST).expect("bundled manifest parses")
    }

    pub fn load(source: &str) -> Result<Self, FeatureError> {
        if source == "bundled" || source == "bundled:synthetic" {
            return Ok(Self::bundled());
        }
        let text = std::fs::read_to_string(source).map_err(|e| FeatureError::InvalidParams(format!("{source}: {e}")))?;
        let m: SynthManifest =
            serde_json::from_str(&text).map_err(|e| FeatureError::InvalidParams(format!("{source}: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.clips_per_leaf == 0 || !(self.clip_seconds > 0.0) {
            return Err(FeatureError::InvalidParams("clips_per_leaf and clip_seconds must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.rest_probability) {
            return Err(FeatureError::InvalidParams("rest_probability must be in [0, 1)".into()));
        }
        for leaf in &self.leaves {
            self.family(&leaf.family)?;
            leaf.params.validate()?;
        }
        self.tree().map_err(|e| FeatureError::InvalidParams(e.to_string()))?;
        Ok(())
    }

    pub fn family(&self, name: &str) -> Result<&FamilySpec, FeatureError> {
        self.families
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| FeatureError::InvalidParams(format!("unknown family `{name}`")))
    }

    /// `root -> group -> family -> leaf` hierarchy in manifest order.
    pub fn tree(&self) -> Result<ClassTree, crate::error::TreeError> {
        let mut root = serde_json::Map::new();
        for fam in &self.families {
            let leaves: Vec<serde_json::Value> = self
                .leaves
                .iter()
                .filter(|l| l.family == fam.name)
                .map(|l| serde_json::Value::String(l.name.clone()))
                .collect();
            let group = root
                .entry(fam.group.clone())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            group
                .as_object_mut()
                .unwrap()
                .insert(fam.name.clone(), serde_json::Value::Array(leaves));
        }
        let mut doc = serde_json::Map::new();
        doc.insert(self.name.clone(), serde_json::Value::Object(root));
        ClassTree::from_value(&serde_json::Value::Object(doc))
    }

    /// Leaf name -> family name.
    pub fn family_map(&self) -> std::collections::BTreeMap<String, String> {
        self.leaves.iter().map(|l| (l.name.clone(), l.family.clone())).collect()
    }

    /// A clip is a run of notes over a faint noise floor, with occasional
    /// digital-silence rests between notes.
    pub fn render_clip(&self, leaf: usize, clip: usize) -> Result<AudioClip, FeatureError> {
        let spec = &self.leaves[leaf];
        let family = self.family(&spec.family)?.kind;
        let sr = SAMPLE_RATE as f64;
        let total = (self.clip_seconds * sr).round() as usize;
        let seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((leaf as u64) << 20)
            .wrapping_add(clip as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let floor = 10f64.powf(self.noise_floor_db / 20.0);
        let (lo, hi) = family.note_seconds();
        let mut samples = Vec::with_capacity(total);
        while samples.len() < total {
            let dur = rng.gen_range(lo..hi);
            let gain = rng.gen_range(0.6..1.0);
            let note = synth_instrument(family, &spec.params, dur, rng.gen())?;
            samples.extend(note.samples.iter().map(|v| gain * v + floor * rng.gen_range(-1.0..1.0) * 3f64.sqrt()));
            if rng.gen_bool(self.rest_probability) {
                let rest = (rng.gen_range(0.2..0.4) * sr) as usize;
                samples.extend(std::iter::repeat(0.0).take(rest));
            }
        }
        samples.truncate(total);
        Ok(AudioClip {
            samples,
            sample_rate: SAMPLE_RATE,
            source: format!("{}-{clip:03}", spec.name),
            label: spec.name.clone(),
        })
    }
}
