//! Prototypes, metaprototypes, per-level distributions and the two
//! training losses.
//!
//! Two interfaces share one definition. The graph functions
//! ([`EpisodePlan`], [`prototype_levels`], [`level_logits`],
//! [`hierarchical_loss`], [`flat_bce_loss`], [`protonet_loss`]) run on the
//! autodiff tape for training. The value functions ([`compute_prototypes`],
//! [`aggregate_metaprototypes`], [`level_distribution`], [`classify`]) work
//! on plain vectors for inference and as readable references.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::ProtoError;
use crate::tree::{ClassTree, NodeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SquaredEuclidean,
    Euclidean,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        match self {
            Distance::SquaredEuclidean => sq,
            Distance::Euclidean => sq.sqrt(),
        }
    }
}

/// `e^(-alpha h)` for `h = 0..=height`.
pub fn level_weights(height: usize, alpha: f64) -> Vec<f64> {
    (0..=height).map(|h| (-alpha * h as f64).exp()).collect()
}

pub type LevelMap = BTreeMap<NodeId, Vec<f64>>;

/// Mean support embedding per class.
pub fn compute_prototypes(support: &Tensor, labels: &[NodeId]) -> Result<LevelMap, ProtoError> {
    let shape = support.shape();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(ProtoError::DimensionMismatch { expected: labels.len(), got: shape.first().copied().unwrap_or(0) });
    }
    let d = shape[1];
    let mut sums: BTreeMap<NodeId, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &label) in labels.iter().enumerate() {
        let entry = sums.entry(label).or_insert_with(|| (vec![0.0; d], 0));
        entry.0.iter_mut().zip(support.row(i)).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(ProtoError::NoPrototypes);
    }
    Ok(sums
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect())
}

/// Level-`h` prototypes to level-`h+1` metaprototypes: each parent is the
/// unweighted mean of its children that are present.
pub fn aggregate_metaprototypes(level: &LevelMap, tree: &ClassTree, h: usize) -> Result<LevelMap, ProtoError> {
    if h >= tree.height() {
        return Err(ProtoError::LevelOutOfRange { level: h + 1, height: tree.height() });
    }
    let dim = level.values().next().ok_or(ProtoError::NoPrototypes)?.len();
    let mut groups: BTreeMap<NodeId, Vec<&Vec<f64>>> = BTreeMap::new();
    for (&id, v) in level {
        if id.0 >= tree.nodes().len() || tree.node(id).level != h {
            return Err(ProtoError::UnknownNode(id.0));
        }
        if v.len() != dim {
            return Err(ProtoError::DimensionMismatch { expected: dim, got: v.len() });
        }
        let parent = tree.node(id).parent.ok_or(ProtoError::UnknownNode(id.0))?;
        groups.entry(parent).or_default().push(v);
    }
    Ok(groups
        .into_iter()
        .map(|(p, children)| {
            let mut sum = vec![0.0; dim];
            for c in &children {
                sum.iter_mut().zip(c.iter()).for_each(|(s, v)| *s += v);
            }
            (p, sum.into_iter().map(|v| v / children.len() as f64).collect())
        })
        .collect())
}

/// `softmax(-d(query, c))` over the level's nodes in ascending id order.
pub fn level_distribution(query: &[f64], level: &LevelMap, distance: Distance) -> Result<Vec<(NodeId, f64)>, ProtoError> {
    if level.is_empty() {
        return Err(ProtoError::NoPrototypes);
    }
    let mut logits = Vec::with_capacity(level.len());
    for (&id, c) in level {
        if c.len() != query.len() {
            return Err(ProtoError::DimensionMismatch { expected: c.len(), got: query.len() });
        }
        logits.push((id, -distance.between(query, c)));
    }
    let mx = logits.iter().map(|l| l.1).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l.1 - mx).exp()).sum();
    Ok(logits.into_iter().map(|(id, l)| (id, (l - mx).exp() / z)).collect())
}

/// Prototypes and metaprototypes of one episode, level 0 through `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHierarchy {
    pub levels: Vec<LevelMap>,
    pub distance: Distance,
}

impl PrototypeHierarchy {
    pub fn build(support: &Tensor, labels: &[NodeId], tree: &ClassTree, distance: Distance) -> Result<Self, ProtoError> {
        if let Some(&bad) = labels.iter().find(|l| l.0 >= tree.nodes().len() || !tree.is_leaf(**l)) {
            return Err(ProtoError::UnknownNode(bad.0));
        }
        let mut levels = vec![compute_prototypes(support, labels)?];
        for h in 0..tree.height() {
            let next = aggregate_metaprototypes(&levels[h], tree, h)?;
            levels.push(next);
        }
        let hier = PrototypeHierarchy { levels, distance };
        debug_assert!(hier.levels.iter().flat_map(|l| l.values()).flatten().all(|v| v.is_finite()));
        Ok(hier)
    }

    pub fn height(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn distributions(&self, query: &[f64]) -> Result<Vec<Vec<(NodeId, f64)>>, ProtoError> {
        self.levels.iter().map(|l| level_distribution(query, l, self.distance)).collect()
    }
}

/// Most probable node at each level; ties go to the lowest node id.
/// Levels are decided independently, so the result need not be a tree path.
pub fn classify(query: &[f64], hierarchy: &PrototypeHierarchy) -> Result<Vec<NodeId>, ProtoError> {
    hierarchy
        .distributions(query)?
        .iter()
        .map(|dist| {
            let mut best = dist[0];
            for &(id, p) in &dist[1..] {
                if p > best.1 {
                    best = (id, p);
                }
            }
            Ok(best.0)
        })
        .collect()
}

/// `sum_h e^(-alpha h) CE_h`.
pub fn combine_level_losses(ce: &[f64], alpha: f64) -> f64 {
    ce.iter().zip(level_weights(ce.len().saturating_sub(1), alpha)).map(|(c, w)| w * c).sum()
}

/// Total loss and per-level `-log p(true node)` for one query.
pub fn hierarchical_loss_values(
    distributions: &[Vec<(NodeId, f64)>],
    path: &[NodeId],
    alpha: f64,
) -> Result<(f64, Vec<f64>), ProtoError> {
    if distributions.len() != path.len() {
        return Err(ProtoError::LevelCount { expected: path.len(), got: distributions.len() });
    }
    let ce = distributions
        .iter()
        .zip(path)
        .map(|(dist, node)| {
            dist.iter()
                .find(|(id, _)| id == node)
                .map(|(_, p)| -p.ln())
                .ok_or(ProtoError::MissingScore(node.0))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok((combine_level_losses(&ce, alpha), ce))
}

/// Mean binary cross-entropy of `sigmoid(score)` against a multi-hot target
/// that marks every node on `path`.
pub fn flat_bce_values(scores: &BTreeMap<NodeId, f64>, path: &[NodeId]) -> Result<f64, ProtoError> {
    if let Some(missing) = path.iter().find(|n| !scores.contains_key(n)) {
        return Err(ProtoError::MissingScore(missing.0));
    }
    if scores.is_empty() {
        return Err(ProtoError::NoPrototypes);
    }
    let on: BTreeSet<&NodeId> = path.iter().collect();
    let total: f64 = scores
        .iter()
        .map(|(id, &z)| {
            let y = if on.contains(id) { 1.0 } else { 0.0 };
            z.max(0.0) + (-z.abs()).exp().ln_1p() - z * y
        })
        .sum();
    Ok(total / scores.len() as f64)
}

/// Node layout of one episode: which nodes appear at each level, the
/// averaging matrices that build them, and each query's target per level.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodePlan {
    /// Present nodes per level, ascending id.
    pub nodes: Vec<Vec<NodeId>>,
    /// `averaging[0]` is `[K, support]`, `averaging[h]` is `[n_h, n_{h-1}]`.
    pub averaging: Vec<Tensor>,
    /// `targets[h][q]` indexes `nodes[h]`.
    pub targets: Vec<Vec<usize>>,
}

fn averaging_matrix(rows: &[NodeId], cols_owner: &[NodeId]) -> Tensor {
    let mut m = vec![0.0; rows.len() * cols_owner.len()];
    for (r, node) in rows.iter().enumerate() {
        let count = cols_owner.iter().filter(|o| *o == node).count() as f64;
        for (c, o) in cols_owner.iter().enumerate() {
            if o == node {
                m[r * cols_owner.len() + c] = 1.0 / count;
            }
        }
    }
    Tensor::new(vec![rows.len(), cols_owner.len()], m).unwrap()
}

impl EpisodePlan {
    pub fn new(tree: &ClassTree, support_labels: &[NodeId], query_labels: &[NodeId]) -> Result<Self, ProtoError> {
        if support_labels.is_empty() {
            return Err(ProtoError::NoPrototypes);
        }
        let chain = |id: NodeId| -> Result<Vec<NodeId>, ProtoError> {
            if id.0 >= tree.nodes().len() {
                return Err(ProtoError::UnknownNode(id.0));
            }
            Ok(tree.ancestors(id)?)
        };
        let support_chains = support_labels.iter().map(|&l| chain(l)).collect::<Result<Vec<_>, _>>()?;
        let levels = tree.height() + 1;
        let mut nodes = Vec::with_capacity(levels);
        let mut averaging = Vec::with_capacity(levels);
        for h in 0..levels {
            let present: BTreeSet<NodeId> = support_chains.iter().map(|c| c[h]).collect();
            let row_nodes: Vec<NodeId> = present.into_iter().collect();
            let owners: Vec<NodeId> = if h == 0 {
                support_labels.to_vec()
            } else {
                let below: &Vec<NodeId> = &nodes[h - 1];
                below.iter().map(|&n| tree.node(n).parent.expect("below root")).collect()
            };
            averaging.push(averaging_matrix(&row_nodes, &owners));
            nodes.push(row_nodes);
        }
        let mut targets = vec![Vec::with_capacity(query_labels.len()); levels];
        for &q in query_labels {
            let c = chain(q)?;
            for h in 0..levels {
                let idx = nodes[h].binary_search(&c[h]).map_err(|_| ProtoError::UnknownNode(q.0))?;
                targets[h].push(idx);
            }
        }
        Ok(EpisodePlan { nodes, averaging, targets })
    }

    pub fn levels(&self) -> usize {
        self.nodes.len()
    }

    pub fn queries(&self) -> usize {
        self.targets[0].len()
    }

    /// Multi-hot target over the nodes of every level, `[Q, n_h]` per level.
    pub fn multi_hot(&self, h: usize) -> Vec<f64> {
        let n = self.nodes[h].len();
        let mut t = vec![0.0; self.queries() * n];
        for (q, &idx) in self.targets[h].iter().enumerate() {
            t[q * n + idx] = 1.0;
        }
        t
    }
}

/// `[n_h, D]` prototype matrices on the tape, level 0 through `H`.
pub fn prototype_levels(g: &mut Graph, plan: &EpisodePlan, support: Var) -> Result<Vec<Var>, ProtoError> {
    let mut out: Vec<Var> = Vec::with_capacity(plan.levels());
    for (h, avg) in plan.averaging.iter().enumerate() {
        let a = g.constant(avg.clone());
        let below = if h == 0 { support } else { out[h - 1] };
        out.push(g.matmul(a, below)?);
    }
    Ok(out)
}

/// Negated distances `[Q, n_h]` from each query to each level's prototypes.
pub fn level_logits(g: &mut Graph, query: Var, protos: &[Var], distance: Distance) -> Result<Vec<Var>, ProtoError> {
    protos
        .iter()
        .map(|&p| {
            let mut d = g.squared_difference_sum(query, p)?;
            if distance == Distance::Euclidean {
                d = g.sqrt(d);
            }
            Ok(g.scale(d, -1.0))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    /// Query-averaged cross-entropy per level; a single entry for the flat losses.
    pub per_level: Vec<Var>,
}

/// `sum_h e^(-alpha h) CE_h`, each `CE_h` averaged over the queries.
pub fn hierarchical_loss(g: &mut Graph, logits: &[Var], plan: &EpisodePlan, alpha: f64) -> Result<LossTerms, ProtoError> {
    if logits.len() != plan.levels() {
        return Err(ProtoError::LevelCount { expected: plan.levels(), got: logits.len() });
    }
    let weights = level_weights(plan.levels() - 1, alpha);
    let mut per_level = Vec::with_capacity(logits.len());
    let mut total: Option<Var> = None;
    for (h, &l) in logits.iter().enumerate() {
        let ce = g.softmax_cross_entropy(l, &plan.targets[h])?;
        let ce = g.mean(ce);
        per_level.push(ce);
        let term = g.scale(ce, weights[h]);
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    Ok(LossTerms { total: total.expect("at least one level"), per_level })
}

/// Mean BCE of `sigmoid(-d)` over every (query, node) pair at levels `0..=H`.
pub fn flat_bce_loss(g: &mut Graph, logits: &[Var], plan: &EpisodePlan) -> Result<LossTerms, ProtoError> {
    if logits.len() != plan.levels() {
        return Err(ProtoError::LevelCount { expected: plan.levels(), got: logits.len() });
    }
    let mut sum: Option<Var> = None;
    let mut count = 0;
    for (h, &l) in logits.iter().enumerate() {
        let bce = g.sigmoid_binary_cross_entropy(l, &plan.multi_hot(h))?;
        count += g.value(bce).len();
        let s = g.sum(bce);
        sum = Some(match sum {
            None => s,
            Some(t) => g.add(t, s)?,
        });
    }
    let total = g.scale(sum.expect("at least one level"), 1.0 / count as f64);
    Ok(LossTerms { total, per_level: vec![total] })
}

/// Standard prototypical-network loss: mean cross-entropy against the leaf
/// prototypes only.
pub fn protonet_loss(g: &mut Graph, support: Var, query: Var, plan: &EpisodePlan, distance: Distance) -> Result<LossTerms, ProtoError> {
    let a = g.constant(plan.averaging[0].clone());
    let protos = g.matmul(a, support)?;
    let mut d = g.squared_difference_sum(query, protos)?;
    if distance == Distance::Euclidean {
        d = g.sqrt(d);
    }
    let logits = g.scale(d, -1.0);
    let ce = g.softmax_cross_entropy(logits, &plan.targets[0])?;
    let total = g.mean(ce);
    Ok(LossTerms { total, per_level: vec![total] })
}
