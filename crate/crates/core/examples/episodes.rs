//! Family-balanced split of the synthetic corpus and a few sampled episodes.
use metaproto::episodes::{build_split, episode_stream, EpisodeShape, PatchPool};
use metaproto::features::SynthManifest;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let families = SynthManifest::bundled().family_map();
    let split = build_split(&families, 0.7, 11)?;
    println!("train {:?}", split.train());
    println!("eval  {:?}", split.eval());

    // pretend every eval leaf has 20 patches
    let eval = split.eval();
    let labels: Vec<&String> = eval.iter().flat_map(|l| std::iter::repeat(l).take(20)).collect();
    let pool = PatchPool::from_labels(&labels, &eval.iter().cloned().collect());
    for ep in episode_stream(&pool, EpisodeShape::new(4, 2, 3), 3, 42)? {
        println!("seed {}: {:?}", ep.seed, ep.classes);
        println!("  support {:?}", ep.support);
        println!("  query   {:?}", ep.query);
    }
    Ok(())
}
