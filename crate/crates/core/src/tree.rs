//! Class hierarchy used for metaprototype aggregation, the multi-level loss
//! and mistake-severity scoring.
//!
//! Levels are numbered from the leaves upward: leaf classes sit at level 0 and
//! the coarsest categories at level `H`. The document's top-level key is a
//! container root one level above `H`; it is never a classification level, so
//! a root whose children are all leaves describes a flat (`H = 0`) tree.
//! Two distinct leaves whose only shared ancestor is the root therefore have an
//! LCA height of `H + 1`.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{Map, Value};

use crate::error::TreeError;

/// Dense node index, assigned in document (pre-)order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: NodeId,
    pub name: String,
    /// `height + 1` for the root.
    pub level: usize,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTree {
    nodes: Vec<TreeNode>,
    height: usize,
    leaf_index: BTreeMap<String, NodeId>,
}

/// Intermediate owned form used while building or rewriting trees.
#[derive(Debug, Clone)]
enum Shape {
    Leaf(String),
    Inner(String, Vec<Shape>),
}

impl Shape {
    fn depth(&self) -> usize {
        match self {
            Shape::Leaf(_) => 0,
            Shape::Inner(_, kids) => 1 + kids.iter().map(Shape::depth).max().unwrap_or(0),
        }
    }

    /// Pad shallow leaves with single-child pass-through nodes so that every
    /// leaf ends up exactly `depth` edges below `self`.
    fn normalize(self, depth: usize) -> Shape {
        match self {
            Shape::Leaf(name) => {
                let mut node = Shape::Leaf(name.clone());
                for _ in 0..depth {
                    node = Shape::Inner(format!("~{name}"), vec![node]);
                }
                node
            }
            Shape::Inner(name, kids) => Shape::Inner(
                name,
                kids.into_iter().map(|k| k.normalize(depth - 1)).collect(),
            ),
        }
    }
}

impl ClassTree {
    /// Parse a hierarchy document: a single-key JSON object whose value is a
    /// nested object of internal nodes, bottoming out in arrays of leaf names.
    pub fn parse(document: &str) -> Result<Self, TreeError> {
        let value: Value =
            serde_json::from_str(document).map_err(|e| TreeError::Json(e.to_string()))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &Value) -> Result<Self, TreeError> {
        let obj = value.as_object().ok_or(TreeError::NotAnObject)?;
        if obj.is_empty() {
            return Err(TreeError::Empty);
        }
        if obj.len() != 1 {
            return Err(TreeError::MultipleRoots(obj.len()));
        }
        let (root_name, body) = obj.iter().next().unwrap();
        let mut path = vec![root_name.clone()];
        let kids = parse_children(root_name, body, &mut path)?;
        Self::from_shape(Shape::Inner(root_name.clone(), kids))
    }

    fn from_shape(root: Shape) -> Result<Self, TreeError> {
        let depth = root.depth();
        if depth == 0 {
            return Err(TreeError::Empty);
        }
        let root = root.normalize(depth);
        let height = depth - 1;
        let mut tree = ClassTree {
            nodes: Vec::new(),
            height,
            leaf_index: BTreeMap::new(),
        };
        tree.push(&root, None, height + 1)?;
        tree.check_names()?;
        Ok(tree)
    }

    fn push(&mut self, shape: &Shape, parent: Option<NodeId>, level: usize) -> Result<NodeId, TreeError> {
        let id = NodeId(self.nodes.len());
        let name = match shape {
            Shape::Leaf(n) | Shape::Inner(n, _) => n.clone(),
        };
        self.nodes.push(TreeNode {
            id,
            name: name.clone(),
            level,
            parent,
            children: Vec::new(),
        });
        match shape {
            Shape::Leaf(_) => {
                if self.leaf_index.insert(name.clone(), id).is_some() {
                    return Err(TreeError::DuplicateLeaf(name));
                }
            }
            Shape::Inner(_, kids) => {
                for kid in kids {
                    let child = self.push(kid, Some(id), level - 1)?;
                    self.nodes[id.0].children.push(child);
                }
            }
        }
        Ok(id)
    }

    fn check_names(&self) -> Result<(), TreeError> {
        let mut seen = BTreeSet::new();
        for node in self.nodes.iter().filter(|n| n.level > 0) {
            if !seen.insert((node.level, node.name.as_str())) {
                return Err(TreeError::DuplicateInternal {
                    name: node.name.clone(),
                    level: node.level,
                });
            }
        }
        Ok(())
    }

    fn to_shape(&self, id: NodeId) -> Shape {
        let node = &self.nodes[id.0];
        if node.children.is_empty() {
            Shape::Leaf(node.name.clone())
        } else {
            Shape::Inner(
                node.name.clone(),
                node.children.iter().map(|&c| self.to_shape(c)).collect(),
            )
        }
    }

    /// Serialize back to the hierarchy document format.
    pub fn to_value(&self) -> Value {
        fn body(tree: &ClassTree, id: NodeId) -> Value {
            let node = tree.node(id);
            if node.children.iter().all(|&c| tree.is_leaf(c)) {
                Value::Array(
                    node.children
                        .iter()
                        .map(|&c| Value::String(tree.node(c).name.clone()))
                        .collect(),
                )
            } else {
                let mut map = Map::new();
                for &c in &node.children {
                    map.insert(tree.node(c).name.clone(), body(tree, c));
                }
                Value::Object(map)
            }
        }
        let mut map = Map::new();
        map.insert(self.root().name.clone(), body(self, self.root().id));
        Value::Object(map)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_value()).expect("tree serializes")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn is_flat(&self) -> bool {
        self.height == 0
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(|n| n.level == 0)
    }

    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaf_index.get(name).copied()
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_index.len()
    }

    /// Leaves in node-id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.level == 0).map(|n| n.id).collect()
    }

    pub fn leaf_names(&self) -> Vec<String> {
        self.leaves().into_iter().map(|id| self.nodes[id.0].name.clone()).collect()
    }

    /// All classification nodes (levels `0..=H`) at `level`, in id order.
    pub fn level_nodes(&self, level: usize) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.level == level).map(|n| n.id).collect()
    }

    /// Ancestor chain of a leaf, one entry per level `0..=H`; entry 0 is the
    /// leaf itself. The container root is not included.
    pub fn ancestors(&self, leaf: NodeId) -> Result<Vec<NodeId>, TreeError> {
        if !self.is_leaf(leaf) {
            return Err(TreeError::NotALeaf(leaf.0));
        }
        let mut chain = Vec::with_capacity(self.height + 1);
        let mut cur = leaf;
        for _ in 0..=self.height {
            chain.push(cur);
            cur = self.nodes[cur.0].parent.expect("non-root has a parent");
        }
        Ok(chain)
    }

    /// Level of the lowest common ancestor of two leaves; `0` for the same
    /// leaf and `H + 1` when they only share the root.
    pub fn lca_height(&self, a: NodeId, b: NodeId) -> Result<usize, TreeError> {
        if !self.is_leaf(a) {
            return Err(TreeError::NotALeaf(a.0));
        }
        if !self.is_leaf(b) {
            return Err(TreeError::NotALeaf(b.0));
        }
        let (mut x, mut y) = (a, b);
        let mut level = 0;
        while x != y {
            x = self.nodes[x.0].parent.expect("walk stops at root");
            y = self.nodes[y.0].parent.expect("walk stops at root");
            level += 1;
        }
        Ok(level)
    }

    /// Group the present level-`(h-1)` nodes under their level-`h` parents.
    pub fn level_groups(
        &self,
        h: usize,
        present_leaves: &BTreeSet<NodeId>,
    ) -> Result<BTreeMap<NodeId, BTreeSet<NodeId>>, TreeError> {
        if h == 0 || h > self.height {
            return Err(TreeError::LevelOutOfRange { level: h, height: self.height });
        }
        let mut groups: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for &leaf in present_leaves {
            let chain = self.ancestors(leaf)?;
            groups.entry(chain[h]).or_default().insert(chain[h - 1]);
        }
        Ok(groups)
    }

    /// Repeatedly drop the leaves' parents, reattaching each leaf to its
    /// grandparent, until the tree has height `target`.
    pub fn shorten_to_height(&self, target: usize) -> Result<ClassTree, TreeError> {
        if target > self.height {
            return Err(TreeError::HeightTooLarge { target, height: self.height });
        }
        let mut shape = self.to_shape(self.root().id);
        for _ in target..self.height {
            shape = drop_leaf_parents(shape);
        }
        Self::from_shape(shape)
    }

    /// Permute leaf positions with `swaps_per_leaf * |leaves|` random pairwise
    /// swaps, leaving the internal structure untouched.
    pub fn random_swap_tree(&self, seed: u64, swaps_per_leaf: usize) -> ClassTree {
        let leaves = self.leaves();
        let n = leaves.len();
        let mut names: Vec<String> = leaves.iter().map(|&l| self.nodes[l.0].name.clone()).collect();
        if n >= 2 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..swaps_per_leaf * n {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                names.swap(i, j);
            }
        }
        let mut out = self.clone();
        out.leaf_index.clear();
        for (slot, name) in leaves.iter().zip(names) {
            out.nodes[slot.0].name = name.clone();
            out.leaf_index.insert(name, *slot);
        }
        out
    }
}

fn parse_children(name: &str, body: &Value, path: &mut Vec<String>) -> Result<Vec<Shape>, TreeError> {
    match body {
        Value::Array(items) => {
            if items.is_empty() {
                return Err(TreeError::Childless(name.to_string()));
            }
            items
                .iter()
                .map(|item| match item {
                    Value::String(leaf) => Ok(Shape::Leaf(leaf.clone())),
                    other => Err(TreeError::BadLeaf(other.to_string())),
                })
                .collect()
        }
        Value::Object(map) => {
            if map.is_empty() {
                return Err(TreeError::Childless(name.to_string()));
            }
            let mut kids = Vec::with_capacity(map.len());
            for (child, sub) in map {
                if path.iter().any(|p| p == child) {
                    return Err(TreeError::Cycle(child.clone()));
                }
                path.push(child.clone());
                let grand = parse_children(child, sub, path)?;
                path.pop();
                kids.push(Shape::Inner(child.clone(), grand));
            }
            Ok(kids)
        }
        other => Err(TreeError::BadNode {
            name: name.to_string(),
            found: other.to_string(),
        }),
    }
}

fn drop_leaf_parents(shape: Shape) -> Shape {
    match shape {
        Shape::Leaf(_) => shape,
        Shape::Inner(name, kids) => {
            if kids.iter().all(|k| matches!(k, Shape::Inner(_, g) if g.iter().all(|x| matches!(x, Shape::Leaf(_))))) {
                let leaves = kids
                    .into_iter()
                    .flat_map(|k| match k {
                        Shape::Inner(_, g) => g,
                        Shape::Leaf(_) => unreachable!(),
                    })
                    .collect();
                Shape::Inner(name, leaves)
            } else {
                Shape::Inner(name, kids.into_iter().map(drop_leaf_parents).collect())
            }
        }
    }
}

pub const BUNDLED_SYNTHETIC: &str = include_str!("../data/synthetic_tree.json");
pub const BUNDLED_HORNBOSTEL_SACHS: &str = include_str!("../data/hornbostel_sachs.json");

/// Resolve `bundled:synthetic`, `bundled:hornbostel_sachs` or a file path.
pub fn load_tree(source: &str) -> Result<ClassTree, TreeError> {
    match source {
        "bundled:synthetic" => ClassTree::parse(BUNDLED_SYNTHETIC),
        "bundled:hornbostel_sachs" => ClassTree::parse(BUNDLED_HORNBOSTEL_SACHS),
        path => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| TreeError::Io(format!("{path}: {e}")))?;
            ClassTree::parse(&text)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ClassTree {
        ClassTree::parse(r#"{"root":{"strings":["violin","guitar"],"percussion":["drum"]}}"#).unwrap()
    }

    #[test]
    fn parses_two_level_document() {
        let t = small();
        assert_eq!(t.height(), 1);
        assert_eq!(t.leaf_count(), 3);
        assert_eq!(t.level_nodes(1).len(), 2);
        assert_eq!(t.root().level, 2);
    }

    #[test]
    fn root_over_leaves_is_flat() {
        let t = ClassTree::parse(r#"{"root":["violin"]}"#).unwrap();
        assert!(t.is_flat());
        assert_eq!(t.leaf_count(), 1);
        let v = t.leaf("violin").unwrap();
        assert_eq!(t.ancestors(v).unwrap(), vec![v]);
    }

    #[test]
    fn rejects_bad_documents() {
        let dup = r#"{"root":{"a":["violin"],"b":["violin"]}}"#;
        assert!(matches!(ClassTree::parse(dup), Err(TreeError::DuplicateLeaf(n)) if n == "violin"));
        assert!(matches!(ClassTree::parse("{}"), Err(TreeError::Empty)));
        assert!(matches!(ClassTree::parse(r#"{"root":{"a":[]}}"#), Err(TreeError::Childless(_))));
        assert!(matches!(ClassTree::parse(r#"{"root":{"a":{"a":["x"]}}}"#), Err(TreeError::Cycle(_))));
        assert!(matches!(ClassTree::parse(r#"{"a":["x"],"b":["y"]}"#), Err(TreeError::MultipleRoots(2))));
    }

    #[test]
    fn ragged_leaves_are_padded() {
        let t = ClassTree::parse(r#"{"root":{"strings":{"bowed":["violin"]},"perc":["drum"]}}"#).unwrap();
        assert_eq!(t.height(), 2);
        let drum = t.leaf("drum").unwrap();
        let chain = t.ancestors(drum).unwrap();
        assert_eq!(t.node(chain[1]).name, "~drum");
        assert_eq!(t.node(chain[2]).name, "perc");
        assert!(t.leaves().iter().all(|&l| t.node(l).level == 0));
    }

    #[test]
    fn ancestors_and_lca() {
        let t = ClassTree::parse(r#"{"root":{"chordophones":{"strings":["violin","viola"],"plucked":["guitar"]},"idio":{"struck":["bell"]}}}"#).unwrap();
        let violin = t.leaf("violin").unwrap();
        let viola = t.leaf("viola").unwrap();
        let guitar = t.leaf("guitar").unwrap();
        let bell = t.leaf("bell").unwrap();
        let names: Vec<_> = t.ancestors(violin).unwrap().iter().map(|&n| t.node(n).name.clone()).collect();
        assert_eq!(names, ["violin", "strings", "chordophones"]);
        assert_eq!(t.lca_height(violin, violin).unwrap(), 0);
        assert_eq!(t.lca_height(violin, viola).unwrap(), 1);
        assert_eq!(t.lca_height(violin, guitar).unwrap(), 2);
        assert_eq!(t.lca_height(violin, bell).unwrap(), 3);
        let a = t.ancestors(violin).unwrap();
        let b = t.ancestors(viola).unwrap();
        assert!(a[1..] == b[1..]);
        assert!(matches!(t.lca_height(t.root().id, violin), Err(TreeError::NotALeaf(_))));
        assert!(t.ancestors(a[1]).is_err());
    }

    #[test]
    fn level_groups_partition_present_nodes() {
        let t = small();
        let all: BTreeSet<_> = t.leaves().into_iter().collect();
        let g = t.level_groups(1, &all).unwrap();
        let strings = t.level_nodes(1)[0];
        let perc = t.level_nodes(1)[1];
        assert_eq!(g[&strings], [t.leaf("violin").unwrap(), t.leaf("guitar").unwrap()].into());
        assert_eq!(g[&perc], [t.leaf("drum").unwrap()].into());

        let only: BTreeSet<_> = [t.leaf("violin").unwrap()].into();
        let g = t.level_groups(1, &only).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[&strings], only);
        assert!(t.level_groups(0, &all).is_err());
        assert!(t.level_groups(2, &all).is_err());
    }

    #[test]
    fn shorten_removes_leaf_parents() {
        let t = ClassTree::parse(r#"{"root":{"A":{"a":["a1","a2"]},"B":{"b":["b1"]}}}"#).unwrap();
        assert_eq!(t.height(), 2);
        let s = t.shorten_to_height(1).unwrap();
        assert_eq!(s.height(), 1);
        assert_eq!(s.to_value(), serde_json::json!({"root":{"A":["a1","a2"],"B":["b1"]}}));
        let flat = t.shorten_to_height(0).unwrap();
        assert_eq!(flat.to_value(), serde_json::json!({"root":["a1","a2","b1"]}));
        assert_eq!(t.shorten_to_height(2).unwrap(), t);
        assert!(t.shorten_to_height(3).is_err());
    }

    #[test]
    fn random_swap_keeps_structure() {
        let t = load_tree("bundled:hornbostel_sachs").unwrap();
        let a = t.random_swap_tree(7, 1000);
        let b = t.random_swap_tree(7, 1000);
        assert_eq!(a, b);
        let mut before = t.leaf_names();
        let mut after = a.leaf_names();
        assert_ne!(before, after);
        before.sort();
        after.sort();
        assert_eq!(before, after);
        for (x, y) in t.nodes().iter().zip(a.nodes()) {
            assert_eq!((x.level, x.parent, &x.children), (y.level, y.parent, &y.children));
        }
        let single = ClassTree::parse(r#"{"root":{"a":["x"]}}"#).unwrap();
        assert_eq!(single.random_swap_tree(3, 1000), single);
    }

    #[test]
    fn bundled_trees_have_expected_heights() {
        assert_eq!(load_tree("bundled:hornbostel_sachs").unwrap().height(), 4);
        let syn = load_tree("bundled:synthetic").unwrap();
        assert_eq!(syn.height(), 2);
        assert_eq!(syn.leaf_count(), 20);
        assert_eq!(syn.level_nodes(1).len(), 5);
        assert_eq!(syn.level_nodes(2).len(), 2);
    }
}
