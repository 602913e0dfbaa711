//! Prototypes, metaprototypes and per-level predictions on hand-made embeddings.
use metaproto::autodiff::Tensor;
use metaproto::protonet::{classify, Distance, PrototypeHierarchy};
use metaproto::ClassTree;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tree = ClassTree::parse(r#"{"root": {"strings": ["violin", "cello"], "drums": ["snare", "tom"]}}"#)?;
    let ids: Vec<_> = ["violin", "violin", "cello", "cello", "snare", "snare", "tom", "tom"]
        .iter()
        .map(|n| tree.leaf(n).unwrap())
        .collect();
    let support = Tensor::from_rows(&[
        vec![1.0, 0.1], vec![1.2, 0.0],
        vec![0.8, 0.6], vec![1.0, 0.5],
        vec![-1.0, 0.0], vec![-1.1, 0.2],
        vec![-0.7, -0.6], vec![-0.9, -0.4],
    ])?;
    let hier = PrototypeHierarchy::build(&support, &ids, &tree, Distance::SquaredEuclidean)?;
    for (h, level) in hier.levels.iter().enumerate() {
        for (node, proto) in level {
            println!("level {h} {:<8} {proto:.3?}", tree.node(*node).name);
        }
    }
    let query = [0.9, 0.3];
    for (h, dist) in hier.distributions(&query)?.iter().enumerate() {
        let named: Vec<String> = dist.iter().map(|(n, p)| format!("{}={p:.3}", tree.node(*n).name)).collect();
        println!("level {h}: {}", named.join(" "));
    }
    let pred: Vec<&str> = classify(&query, &hier)?.iter().map(|n| tree.node(*n).name.as_str()).collect();
    println!("prediction per level: {pred:?}");
    Ok(())
}
