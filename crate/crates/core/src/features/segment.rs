use super::AudioClip;

pub const SILENCE_FRAME_MS: f64 = 25.0;

fn sub_clip(clip: &AudioClip, start: usize, end: usize) -> AudioClip {
    AudioClip {
        samples: clip.samples[start..end].to_vec(),
        sample_rate: clip.sample_rate,
        source: clip.source.clone(),
        label: clip.label.clone(),
    }
}

/// Frame RMS level in dB relative to full scale.
fn frame_dbfs(frame: &[f64]) -> f64 {
    let ms = frame.iter().map(|v| v * v).sum::<f64>() / frame.len() as f64;
    10.0 * ms.max(1e-30).log10()
}

/// Split a clip into its non-silent regions.
///
/// The clip is cut into 25 ms frames; a frame is silent when its RMS is
/// below `threshold_db` dBFS. Runs of silent frames lasting at least
/// `min_region_ms` are removed, shorter runs stay inside the surrounding
/// region. A fully silent clip yields no regions.
pub fn remove_silence(clip: &AudioClip, threshold_db: f64, min_region_ms: f64) -> Vec<AudioClip> {
    let sr = clip.sample_rate as f64;
    let frame = ((sr * SILENCE_FRAME_MS / 1000.0).round() as usize).max(1);
    let min_len = (sr * min_region_ms / 1000.0).round() as usize;
    let n = clip.samples.len();
    let bounds: Vec<(usize, usize)> = (0..n).step_by(frame).map(|s| (s, (s + frame).min(n))).collect();
    let silent: Vec<bool> = bounds
        .iter()
        .map(|&(s, e)| frame_dbfs(&clip.samples[s..e]) < threshold_db)
        .collect();

    // Mark the frames belonging to long-enough silent runs.
    let mut cut = vec![false; bounds.len()];
    let mut i = 0;
    while i < bounds.len() {
        if !silent[i] {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < bounds.len() && silent[j] {
            j += 1;
        }
        if bounds[j - 1].1 - bounds[i].0 >= min_len {
            cut[i..j].iter_mut().for_each(|c| *c = true);
        }
        i = j;
    }

    let mut regions = Vec::new();
    let mut start = None;
    for (k, &(s, e)) in bounds.iter().enumerate() {
        match (cut[k], start) {
            (false, None) => start = Some(s),
            (true, Some(st)) => {
                regions.push(sub_clip(clip, st, s));
                start = None;
            }
            _ => {}
        }
        if k + 1 == bounds.len() {
            if let Some(st) = start {
                regions.push(sub_clip(clip, st, e));
            }
        }
    }
    regions
}

/// Fixed-length windows; a trailing remainder shorter than `length_s` is
/// dropped.
pub fn segment(clip: &AudioClip, length_s: f64, hop_s: f64) -> Vec<AudioClip> {
    let sr = clip.sample_rate as f64;
    let len = (sr * length_s).round() as usize;
    let hop = ((sr * hop_s).round() as usize).max(1);
    let n = clip.samples.len();
    if len == 0 || n < len {
        return Vec::new();
    }
    (0..=(n - len) / hop)
        .map(|i| sub_clip(clip, i * hop, i * hop + len))
        .collect()
}
