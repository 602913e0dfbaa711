//! Render one synthetic clip and run the feature chain on it.
use metaproto::features::spectral::LogMel;
use metaproto::features::{clip_patches, Preprocess, SynthManifest};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let manifest = SynthManifest::bundled();
    let clip = manifest.render_clip(0, 0)?;
    println!("{} ({}): {:.2}s at {} Hz", clip.source, clip.label, clip.duration_s(), clip.sample_rate);

    let patches = clip_patches(&clip, &Preprocess::default(), &LogMel::default())?;
    println!("{} one-second patches after silence removal", patches.len());
    if let Some(p) = patches.first() {
        let d = p.data.data();
        let (lo, hi) = d.iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!("patch shape {:?}, log-Mel range [{lo:.2}, {hi:.2}]", p.data.shape());
    }
    Ok(())
}
