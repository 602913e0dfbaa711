#![allow(dead_code)]

use metaproto::autodiff::{Graph, Tensor, Var};
use metaproto::tree::ClassTree;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{Map, Value};

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps round-off on vanishing
/// gradients from reading as a large relative error.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Largest relative error between tape gradients and central differences of
/// `build` with respect to every element of every input.
pub fn gradcheck(inputs: &[Tensor], h: f64, build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();

    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).item()
    };
    let mut worst = 0.0f64;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic[i][j], numeric));
        }
    }
    worst
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Random hierarchy with `leaves` leaves and uniform depth `height`.
pub fn random_tree(rng: &mut impl Rng, leaves: usize, height: usize) -> ClassTree {
    let mut names: Vec<String> = (0..leaves).map(|i| format!("leaf{i}")).collect();
    names.shuffle(rng);
    let mut level: Vec<Value> = names.into_iter().map(Value::String).collect();
    for h in 1..=height {
        // group consecutive nodes under fresh parents of random fan-out
        let mut parents = Vec::new();
        let mut i = 0;
        while i < level.len() {
            let take = rng.gen_range(1..=3).min(level.len() - i);
            let kids: Vec<Value> = level[i..i + take].to_vec();
            let name = format!("n{h}_{}", parents.len());
            parents.push((name, kids));
            i += take;
        }
        level = parents
            .into_iter()
            .map(|(name, kids)| {
                let body = if h == 1 {
                    Value::Array(kids)
                } else {
                    let mut m = Map::new();
                    for k in kids {
                        if let Value::Object(o) = k {
                            m.extend(o);
                        }
                    }
                    Value::Object(m)
                };
                let mut m = Map::new();
                m.insert(name, body);
                Value::Object(m)
            })
            .collect();
    }
    let body = if height == 0 {
        Value::Array(level)
    } else {
        let mut m = Map::new();
        for k in level {
            if let Value::Object(o) = k {
                m.extend(o);
            }
        }
        Value::Object(m)
    };
    let mut root = Map::new();
    root.insert("root".into(), body);
    ClassTree::from_value(&Value::Object(root)).unwrap()
}

/// LCA height by explicit ancestor-set intersection.
pub fn brute_lca(tree: &ClassTree, a: metaproto::NodeId, b: metaproto::NodeId) -> usize {
    let up = |mut n: metaproto::NodeId| {
        let mut v = vec![n];
        while let Some(p) = tree.node(n).parent {
            v.push(p);
            n = p;
        }
        v
    };
    let (pa, pb) = (up(a), up(b));
    pa.iter().filter(|n| pb.contains(n)).map(|&n| tree.node(n).level).min().unwrap()
}

/// In-memory corpus of Gaussian clusters over `tree`'s leaves: each leaf's
/// mean is its family's mean plus a smaller leaf offset. Patches are
/// `[rows, cols]`, grouped into 5-patch source clips.
pub fn toy_dataset(tree: ClassTree, per_class: usize, rows: usize, cols: usize, seed: u64) -> metaproto::harness::Dataset {
    use rand_distr::{Distribution, StandardNormal};
    let normal = |rng: &mut rand_chacha::ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dim = rows * cols;
    let mut families = std::collections::BTreeMap::new();
    let mut family_mean: std::collections::BTreeMap<String, Vec<f64>> = Default::default();
    let mut data = metaproto::harness::Dataset {
        patches: Vec::new(),
        shape: [rows, cols],
        labels: Vec::new(),
        sources: Vec::new(),
        tree: tree.clone(),
        families: Default::default(),
    };
    for leaf in tree.leaves() {
        let name = tree.node(leaf).name.clone();
        let fam_id = tree.node(leaf).parent.unwrap();
        let fam = tree.node(fam_id).name.clone();
        families.insert(name.clone(), fam.clone());
        let fm = family_mean
            .entry(fam)
            .or_insert_with(|| (0..dim).map(|_| 1.5 * normal(&mut rng)).collect())
            .clone();
        let lm: Vec<f64> = fm.iter().map(|m| m + 0.8 * normal(&mut rng)).collect();
        for i in 0..per_class {
            data.patches.push(lm.iter().map(|m| m + normal(&mut rng)).collect());
            data.labels.push(name.clone());
            data.sources.push(format!("{name}-{:03}", i / 5));
        }
    }
    data.families = families;
    data
}

/// Small MLP experiment config for the toy corpus.
pub fn toy_config(dim: usize) -> metaproto::harness::ExperimentConfig {
    let mut c = metaproto::harness::ExperimentConfig::default();
    c.model = metaproto::embedding::BackboneConfig::mlp(&[dim, 16, 8], 0);
    c.train.ways = 4;
    c.train.shots = 2;
    c.train.queries = 3;
    c.train.lr = 0.01;
    c.train.max_steps = 40;
    c.train.val_interval = 10;
    c.train.val_episodes = 4;
    c.train.val_queries = 3;
    c.train.patience = 1000;
    c.eval.episodes = 12;
    c.eval.queries = 5;
    c.eval.shots = vec![2];
    c
}
