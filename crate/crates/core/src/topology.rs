//! Binary tree topologies and the grow/prune edits that change their size.
//!
//! Node ids are stable: `grow` hands out fresh ids from a monotone counter and
//! `prune` retires ids without renumbering, so per-node parameters survive
//! structural edits unchanged.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopologyError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} is not a leaf")]
    NotALeaf(NodeId),
    #[error("node {0} is not an internal node")]
    NotInternal(NodeId),
    #[error("node {node} cannot be pruned: child {child} is internal")]
    InternalChild { node: NodeId, child: NodeId },
    #[error("malformed topology: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: NodeId,
    pub parent: Option<NodeId>,
    pub left: Option<NodeId>,
    pub right: Option<NodeId>,
    pub depth: usize,
}

impl NodeRecord {
    pub fn is_leaf(&self) -> bool {
        self.left.is_none()
    }

    pub fn children(&self) -> Option<(NodeId, NodeId)> {
        match (self.left, self.right) {
            (Some(l), Some(r)) => Some((l, r)),
            _ => None,
        }
    }
}

/// Ancestors of a node from the root down, with the branch taken at each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathInfo {
    pub ancestors: Vec<NodeId>,
    /// `true` where the path steps to the right child of the matching ancestor.
    pub directions: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "TopologyRepr", try_from = "TopologyRepr")]
pub struct TreeTopology {
    nodes: BTreeMap<NodeId, NodeRecord>,
    root: NodeId,
    next_id: u32,
}

/// Serialized form: the child map, checked on parsing.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TopologyRepr {
    root: NodeId,
    next_id: u32,
    children: BTreeMap<NodeId, Option<(NodeId, NodeId)>>,
}

impl From<TreeTopology> for TopologyRepr {
    fn from(t: TreeTopology) -> Self {
        let children = t.nodes.values().map(|r| (r.id, r.children())).collect();
        TopologyRepr { root: t.root, next_id: t.next_id, children }
    }
}

impl TryFrom<TopologyRepr> for TreeTopology {
    type Error = TopologyError;

    fn try_from(r: TopologyRepr) -> Result<Self, Self::Error> {
        TreeTopology::from_children(r.root, &r.children, r.next_id)
    }
}

impl Default for TreeTopology {
    fn default() -> Self {
        Self::root_only()
    }
}

impl TreeTopology {
    /// A single leaf (`n = 0`, `n_ℓ = 1`).
    pub fn root_only() -> Self {
        let root = NodeId(0);
        let mut nodes = BTreeMap::new();
        nodes.insert(root, NodeRecord { id: root, parent: None, left: None, right: None, depth: 0 });
        Self { nodes, root, next_id: 1 }
    }

    pub fn root(&self) -> NodeId {
        self.root
    }

    /// The id the next `grow` will hand to its left child.
    pub fn next_id(&self) -> u32 {
        self.next_id
    }

    pub fn node(&self, id: NodeId) -> Result<&NodeRecord, TopologyError> {
        self.nodes.get(&id).ok_or(TopologyError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRecord> {
        self.nodes.values()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Internal node ids in ascending id order.
    pub fn internal_nodes(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| !n.is_leaf()).map(|n| n.id).collect()
    }

    /// Leaf ids in ascending id order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.nodes.values().filter(|n| n.is_leaf()).map(|n| n.id).collect()
    }

    /// `n`, the number of internal nodes.
    pub fn n_internal(&self) -> usize {
        self.nodes.values().filter(|n| !n.is_leaf()).count()
    }

    /// `n_ℓ`, the number of leaves.
    pub fn n_leaves(&self) -> usize {
        self.nodes.values().filter(|n| n.is_leaf()).count()
    }

    pub fn is_leaf(&self, id: NodeId) -> Result<bool, TopologyError> {
        Ok(self.node(id)?.is_leaf())
    }

    /// Internal nodes whose children are both leaves, in ascending id order.
    pub fn prunable_nodes(&self) -> Vec<NodeId> {
        self.nodes
            .values()
            .filter_map(|n| {
                let (l, r) = n.children()?;
                (self.nodes[&l].is_leaf() && self.nodes[&r].is_leaf()).then_some(n.id)
            })
            .collect()
    }

    /// `n_f`: the number of prune-eligible internal nodes.
    pub fn prunable_count(&self) -> usize {
        self.prunable_nodes().len()
    }

    /// Convert `leaf` into an internal node with two fresh leaf children.
    pub fn grow(&self, leaf: NodeId) -> Result<TreeTopology, TopologyError> {
        let rec = self.node(leaf)?;
        if !rec.is_leaf() {
            return Err(TopologyError::NotALeaf(leaf));
        }
        let depth = rec.depth + 1;
        let left = NodeId(self.next_id);
        let right = NodeId(self.next_id + 1);
        let mut out = self.clone();
        out.next_id += 2;
        let r = out.nodes.get_mut(&leaf).expect("checked above");
        r.left = Some(left);
        r.right = Some(right);
        for id in [left, right] {
            out.nodes.insert(id, NodeRecord { id, parent: Some(leaf), left: None, right: None, depth });
        }
        Ok(out)
    }

    /// Collapse `internal` (whose children must both be leaves) into a leaf.
    pub fn prune(&self, internal: NodeId) -> Result<TreeTopology, TopologyError> {
        let rec = self.node(internal)?;
        let (l, r) = rec.children().ok_or(TopologyError::NotInternal(internal))?;
        for child in [l, r] {
            if !self.nodes[&child].is_leaf() {
                return Err(TopologyError::InternalChild { node: internal, child });
            }
        }
        let mut out = self.clone();
        out.nodes.remove(&l);
        out.nodes.remove(&r);
        let rec = out.nodes.get_mut(&internal).expect("checked above");
        rec.left = None;
        rec.right = None;
        Ok(out)
    }

    pub fn path_info(&self, node: NodeId) -> Result<PathInfo, TopologyError> {
        let mut ancestors = Vec::new();
        let mut directions = Vec::new();
        let mut cur = self.node(node)?;
        while let Some(p) = cur.parent {
            let parent = &self.nodes[&p];
            ancestors.push(p);
            directions.push(parent.right == Some(cur.id));
            cur = parent;
        }
        ancestors.reverse();
        directions.reverse();
        Ok(PathInfo { ancestors, directions })
    }

    /// Node ids in depth-first pre-order (node, left subtree, right subtree).
    pub fn preorder(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            out.push(id);
            if let Some((l, r)) = self.nodes[&id].children() {
                stack.push(r);
                stack.push(l);
            }
        }
        out
    }

    /// Shape equality ignoring node ids.
    pub fn is_isomorphic(&self, other: &TreeTopology) -> bool {
        fn same(a: &TreeTopology, x: NodeId, b: &TreeTopology, y: NodeId) -> bool {
            match (a.nodes[&x].children(), b.nodes[&y].children()) {
                (None, None) => true,
                (Some((al, ar)), Some((bl, br))) => same(a, al, b, bl) && same(a, ar, b, br),
                _ => false,
            }
        }
        same(self, self.root, other, other.root)
    }

    /// Canonical shape string, e.g. `(.(..))`; leaves are `.`.
    pub fn shape_key(&self) -> String {
        fn go(t: &TreeTopology, id: NodeId, out: &mut String) {
            match t.nodes[&id].children() {
                None => out.push('.'),
                Some((l, r)) => {
                    out.push('(');
                    go(t, l, out);
                    go(t, r, out);
                    out.push(')');
                }
            }
        }
        let mut s = String::new();
        go(self, self.root, &mut s);
        s
    }

    /// Rebuild from an explicit child map, e.g. when parsing a trace.
    ///
    /// `children[id] = Some((left, right))` for internal nodes, `None` for
    /// leaves. Every node reachable from `root` must appear exactly once.
    pub fn from_children(
        root: NodeId,
        children: &BTreeMap<NodeId, Option<(NodeId, NodeId)>>,
        next_id: u32,
    ) -> Result<TreeTopology, TopologyError> {
        let mut nodes = BTreeMap::new();
        let mut stack = vec![(root, None, 0usize)];
        while let Some((id, parent, depth)) = stack.pop() {
            let kids = *children.get(&id).ok_or(TopologyError::UnknownNode(id))?;
            if id.0 >= next_id {
                return Err(TopologyError::Malformed(format!("{id} not below next id {next_id}")));
            }
            let rec = NodeRecord { id, parent, left: kids.map(|k| k.0), right: kids.map(|k| k.1), depth };
            if nodes.insert(id, rec).is_some() {
                return Err(TopologyError::Malformed(format!("{id} visited twice")));
            }
            if let Some((l, r)) = kids {
                stack.push((r, Some(id), depth + 1));
                stack.push((l, Some(id), depth + 1));
            }
        }
        if nodes.len() != children.len() {
            return Err(TopologyError::Malformed("unreachable nodes present".into()));
        }
        Ok(TreeTopology { nodes, root, next_id })
    }

    /// Check every structural invariant; used by tests and trace parsing.
    pub fn validate(&self) -> Result<(), TopologyError> {
        let root = self.node(self.root)?;
        if root.parent.is_some() || root.depth != 0 {
            return Err(TopologyError::Malformed("root has a parent or nonzero depth".into()));
        }
        let order = self.preorder();
        if order.len() != self.nodes.len() {
            return Err(TopologyError::Malformed("not every node reachable from root".into()));
        }
        for rec in self.nodes.values() {
            if rec.left.is_some() != rec.right.is_some() {
                return Err(TopologyError::Malformed(format!("{} has one child", rec.id)));
            }
            if let Some((l, r)) = rec.children() {
                for c in [l, r] {
                    let child = self.node(c)?;
                    if child.parent != Some(rec.id) || child.depth != rec.depth + 1 {
                        return Err(TopologyError::Malformed(format!("bad link {} -> {}", rec.id, c)));
                    }
                }
            } else if rec.id != self.root && rec.parent.is_none() {
                return Err(TopologyError::Malformed(format!("{} orphaned", rec.id)));
            }
        }
        if self.n_leaves() != self.n_internal() + 1 {
            return Err(TopologyError::Malformed("n_leaves != n_internal + 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// The generic five-leaf example tree: root splits into node A (left) and
    /// node B (right); A splits into node C and a leaf; C and B each carry two
    /// leaves. Returns the topology and ids `[η1, η2, η3, η4, ℓ1..ℓ5]`.
    pub(crate) fn example_tree() -> (TreeTopology, [NodeId; 9]) {
        let t = TreeTopology::root_only();
        let eta1 = t.root();
        let t = t.grow(eta1).unwrap();
        let (eta2, eta3) = t.node(eta1).unwrap().children().unwrap();
        let t = t.grow(eta2).unwrap();
        let (eta4, l3) = t.node(eta2).unwrap().children().unwrap();
        let t = t.grow(eta3).unwrap();
        let (l4, l5) = t.node(eta3).unwrap().children().unwrap();
        let t = t.grow(eta4).unwrap();
        let (l1, l2) = t.node(eta4).unwrap().children().unwrap();
        (t, [eta1, eta2, eta3, eta4, l1, l2, l3, l4, l5])
    }

    #[test]
    fn grow_root_only() {
        let t = TreeTopology::root_only();
        assert_eq!((t.n_internal(), t.n_leaves()), (0, 1));
        let g = t.grow(t.root()).unwrap();
        assert_eq!((g.n_internal(), g.n_leaves()), (1, 2));
        g.validate().unwrap();
    }

    #[test]
    fn grow_example_tree_leaf() {
        let (t, ids) = example_tree();
        assert_eq!((t.n_internal(), t.n_leaves()), (4, 5));
        let g = t.grow(ids[4]).unwrap();
        assert_eq!((g.n_internal(), g.n_leaves()), (5, 6));
        for id in t.nodes().map(|n| n.id).filter(|&id| id != ids[4]) {
            assert_eq!(t.node(id).unwrap(), g.node(id).unwrap());
        }
    }

    #[test]
    fn grow_internal_is_error() {
        let (t, ids) = example_tree();
        assert_eq!(t.grow(ids[0]), Err(TopologyError::NotALeaf(ids[0])));
        assert_eq!(t.grow(NodeId(999)), Err(TopologyError::UnknownNode(NodeId(999))));
    }

    #[test]
    fn prune_inverse_of_grow() {
        let t = TreeTopology::root_only().grow(NodeId(0)).unwrap();
        let p = t.prune(NodeId(0)).unwrap();
        assert!(p.is_isomorphic(&TreeTopology::root_only()));
        assert_eq!(p.n_leaves(), 1);

        let (t, ids) = example_tree();
        for leaf in t.leaves() {
            let back = t.grow(leaf).unwrap().prune(leaf).unwrap();
            assert!(back.is_isomorphic(&t));
            assert_eq!(back.leaves(), t.leaves());
        }
        let _ = ids;
    }

    #[test]
    fn prune_with_internal_child_is_error() {
        let (t, ids) = example_tree();
        assert_eq!(
            t.prune(ids[1]),
            Err(TopologyError::InternalChild { node: ids[1], child: ids[3] })
        );
        assert_eq!(t.prune(ids[4]), Err(TopologyError::NotInternal(ids[4])));
    }

    #[test]
    fn prunable_counts() {
        assert_eq!(TreeTopology::root_only().prunable_count(), 0);
        assert_eq!(TreeTopology::root_only().grow(NodeId(0)).unwrap().prunable_count(), 1);
        let (t, ids) = example_tree();
        assert_eq!(t.prunable_nodes(), {
            let mut v = vec![ids[3], ids[2]];
            v.sort();
            v
        });
    }

    #[test]
    fn path_info_examples() {
        let (t, ids) = example_tree();
        let root = t.path_info(ids[0]).unwrap();
        assert!(root.ancestors.is_empty() && root.directions.is_empty());
        let l2 = t.path_info(ids[5]).unwrap();
        assert_eq!(l2.ancestors, vec![ids[0], ids[1], ids[3]]);
        assert_eq!(l2.directions, vec![false, false, true]);
        let l5 = t.path_info(ids[8]).unwrap();
        assert_eq!(l5.ancestors, vec![ids[0], ids[2]]);
        assert_eq!(l5.directions, vec![true, true]);
        assert!(t.path_info(NodeId(77)).is_err());
    }

    #[test]
    fn shape_key_and_rebuild() {
        let (t, _) = example_tree();
        assert_eq!(t.shape_key(), "(((..).)(..))");
        let children: BTreeMap<_, _> = t.nodes().map(|n| (n.id, n.children())).collect();
        let back = TreeTopology::from_children(t.root(), &children, t.next_id()).unwrap();
        assert_eq!(back, t);
    }
}
