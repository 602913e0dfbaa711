//! Family-balanced train/eval splits and seeded episode sampling.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::EpisodeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Train,
    Eval,
}

/// Leaf-level split. Serialized as JSON for audit and reuse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_fraction: f64,
    pub assignment: BTreeMap<String, Side>,
    pub families: BTreeMap<String, String>,
}

impl SplitPlan {
    fn side(&self, side: Side) -> Vec<String> {
        self.assignment.iter().filter(|(_, s)| **s == side).map(|(l, _)| l.clone()).collect()
    }

    pub fn train(&self) -> Vec<String> {
        self.side(Side::Train)
    }

    pub fn eval(&self) -> Vec<String> {
        self.side(Side::Eval)
    }

    /// `(train, eval)` leaf counts per family.
    pub fn family_counts(&self) -> BTreeMap<String, (usize, usize)> {
        let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for (leaf, fam) in &self.families {
            let e = out.entry(fam.clone()).or_default();
            match self.assignment[leaf] {
                Side::Train => e.0 += 1,
                Side::Eval => e.1 += 1,
            }
        }
        out
    }
}

/// Per-family train counts whose total is `round(fraction * total)`: every
/// family gets `floor(fraction * n)` (kept within `1..n-1`), and the leftover
/// goes to the families with the largest fractional remainders, ties broken
/// by a seeded shuffle.
fn family_quotas(sizes: &[usize], fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let total: usize = sizes.iter().sum();
    let target = (fraction * total as f64 + 0.5).floor() as usize;
    let mut quota: Vec<usize> = sizes
        .iter()
        .map(|&n| ((fraction * n as f64).floor() as usize).clamp(1, n - 1))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(rng);
    let remainder = |i: usize| fraction * sizes[i] as f64 - (fraction * sizes[i] as f64).floor();
    // stable sort keeps the shuffled order among equal remainders
    order.sort_by(|&a, &b| remainder(b).total_cmp(&remainder(a)));
    let mut assigned: usize = quota.iter().sum();
    while assigned < target {
        let Some(&i) = order.iter().find(|&&i| quota[i] < sizes[i] - 1) else { break };
        quota[i] += 1;
        assigned += 1;
        order.retain(|&j| j != i);
        order.push(i);
    }
    while assigned > target {
        let Some(&i) = order.iter().rev().find(|&&i| quota[i] > 1) else { break };
        quota[i] -= 1;
        assigned -= 1;
        order.retain(|&j| j != i);
        order.insert(0, i);
    }
    quota
}

/// Split leaves into train and eval sides, family by family.
pub fn build_split(leaf_families: &BTreeMap<String, String>, train_fraction: f64, seed: u64) -> Result<SplitPlan, EpisodeError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(EpisodeError::BadFraction(train_fraction));
    }
    let mut by_family: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for (leaf, fam) in leaf_families {
        by_family.entry(fam).or_default().push(leaf);
    }
    if let Some((fam, _)) = by_family.iter().find(|(_, l)| l.len() < 2) {
        return Err(EpisodeError::SmallFamily(fam.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = by_family.values().map(|l| l.len()).collect();
    let quotas = family_quotas(&sizes, train_fraction, &mut rng);
    let mut assignment = BTreeMap::new();
    for ((_, leaves), quota) in by_family.iter().zip(quotas) {
        let mut shuffled = leaves.clone();
        shuffled.shuffle(&mut rng);
        for (i, leaf) in shuffled.into_iter().enumerate() {
            assignment.insert(leaf.to_string(), if i < quota { Side::Train } else { Side::Eval });
        }
    }
    Ok(SplitPlan { seed, train_fraction, assignment, families: leaf_families.clone() })
}

/// Patch ids grouped by class label, labels in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPool {
    pub labels: Vec<String>,
    pub members: Vec<Vec<usize>>,
}

impl PatchPool {
    /// Pool over the patches whose label is in `allowed`; patch ids are
    /// positions in `patch_labels`.
    pub fn from_labels<S: AsRef<str>>(patch_labels: &[S], allowed: &BTreeSet<String>) -> Self {
        let mut groups: BTreeMap<String, Vec<usize>> = allowed.iter().map(|l| (l.clone(), Vec::new())).collect();
        for (i, l) in patch_labels.iter().enumerate() {
            if let Some(g) = groups.get_mut(l.as_ref()) {
                g.push(i);
            }
        }
        let (labels, members) = groups.into_iter().unzip();
        PatchPool { labels, members }
    }

    pub fn class_count(&self) -> usize {
        self.labels.len()
    }
}

/// Episode geometry: ways, shots and queries per class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeShape {
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
}

impl EpisodeShape {
    pub fn new(ways: usize, shots: usize, queries: usize) -> Self {
        EpisodeShape { ways, shots, queries }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub seed: u64,
    pub classes: Vec<String>,
    /// `support[c]` holds the shot patch ids of `classes[c]`.
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    /// Support ids, class-major, with the class index of each.
    pub fn support_flat(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.support)
    }

    pub fn query_flat(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.query)
    }
}

fn flatten(groups: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut ids = Vec::new();
    let mut cls = Vec::new();
    for (c, g) in groups.iter().enumerate() {
        ids.extend(g);
        cls.extend(std::iter::repeat(c).take(g.len()));
    }
    (ids, cls)
}

/// Draw `ways` classes, then `shots + queries` patches per class without
/// replacement; the first `shots` become the support set.
pub fn sample_episode(pool: &PatchPool, shape: EpisodeShape, seed: u64) -> Result<Episode, EpisodeError> {
    if pool.class_count() < shape.ways || shape.ways == 0 {
        return Err(EpisodeError::NotEnoughClasses { have: pool.class_count(), need: shape.ways.max(1) });
    }
    let need = shape.shots + shape.queries;
    if let Some(i) = (0..pool.class_count()).find(|&i| pool.members[i].len() < need) {
        return Err(EpisodeError::NotEnoughPatches {
            class: pool.labels[i].clone(),
            have: pool.members[i].len(),
            need,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = sample(&mut rng, pool.class_count(), shape.ways).into_vec();
    chosen.sort_unstable();
    let mut ep = Episode { seed, classes: Vec::new(), support: Vec::new(), query: Vec::new() };
    for c in chosen {
        let members = &pool.members[c];
        let picks: Vec<usize> = sample(&mut rng, members.len(), need).into_iter().map(|j| members[j]).collect();
        ep.classes.push(pool.labels[c].clone());
        ep.support.push(picks[..shape.shots].to_vec());
        ep.query.push(picks[shape.shots..].to_vec());
    }
    Ok(ep)
}

/// Episode `i` uses seed `base_seed + i`.
pub fn episode_stream(pool: &PatchPool, shape: EpisodeShape, count: usize, base_seed: u64) -> Result<Vec<Episode>, EpisodeError> {
    (0..count).map(|i| sample_episode(pool, shape, base_seed.wrapping_add(i as u64))).collect()
}
