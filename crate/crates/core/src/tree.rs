//! Token trees: the branching draft structure verified by the target model in
//! a single batched pass.
//!
//! Nodes are addressed by stable [`NodeId`] handles. A tree is append-only
//! until [`TokenTree::compact`] produces a fresh tree, so handles recorded
//! during construction stay valid for replay. Handle order is always a
//! topological order: a parent's handle is smaller than its children's.
//!
//! Shadow nodes are candidate-set members that were never inserted. They live
//! in the tree (flagged) so pruning can score them alongside real children,
//! but they never have children, never count toward `|T|` or `L_T`, and never
//! appear in a verification layout.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub token: TokenId,
    pub p_draft: f64,
}

/// Top-k draft proposals from one node, sorted by descending probability with
/// ties broken toward the smaller token id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    entries: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(entries: Vec<Candidate>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::contract("candidate set must not be empty"));
        }
        for w in entries.windows(2) {
            let ordered = w[0].p_draft > w[1].p_draft
                || (w[0].p_draft == w[1].p_draft && w[0].token < w[1].token);
            if !ordered {
                return Err(Error::contract(format!(
                    "candidate set not sorted: ({}, {}) before ({}, {})",
                    w[0].token, w[0].p_draft, w[1].token, w[1].p_draft
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for c in &entries {
            if !(0.0..=1.0).contains(&c.p_draft) {
                return Err(Error::contract(format!("probability {} outside [0,1]", c.p_draft)));
            }
            if !seen.insert(c.token) {
                return Err(Error::contract(format!("token {} repeated in candidate set", c.token)));
            }
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.entries.iter().any(|c| c.token == token)
    }

    pub fn tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.entries.iter().map(|c| c.token)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub token: TokenId,
    pub parent: Option<NodeId>,
    pub depth: usize,
    /// Estimated probability that the verification path reaches this node.
    pub reach: f64,
    pub shadow: bool,
    children: Vec<NodeId>,
    /// Set once the node has been expanded by the draft model.
    candidates: Option<CandidateSet>,
}

impl TreeNode {
    /// All children, shadows included, in insertion order.
    pub fn children(&self) -> &[NodeId] {
        &self.children
    }

    pub fn candidates(&self) -> Option<&CandidateSet> {
        self.candidates.as_ref()
    }
}

/// A generated child whose parent is in the tree but which has not been
/// inserted yet.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontierEntry {
    pub parent: NodeId,
    pub token: TokenId,
    pub p_draft: f64,
    pub reach: f64,
}

#[derive(Debug, Clone, Default)]
pub struct Frontier {
    entries: Vec<FrontierEntry>,
}

impl Frontier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: FrontierEntry) {
        self.entries.push(entry);
    }

    pub fn entries(&self) -> &[FrontierEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn take(&mut self, index: usize) -> FrontierEntry {
        self.entries.remove(index)
    }

    pub fn drain(&mut self) -> impl Iterator<Item = FrontierEntry> + '_ {
        self.entries.drain(..)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenTree {
    nodes: Vec<TreeNode>,
    node_count: usize,
    leaf_count: usize,
}

impl TokenTree {
    /// A root-only tree. The root carries the last context token.
    pub fn new(root_token: TokenId) -> Self {
        Self {
            nodes: vec![TreeNode {
                token: root_token,
                parent: None,
                depth: 0,
                reach: 1.0,
                shadow: false,
                children: Vec::new(),
                candidates: None,
            }],
            node_count: 1,
            leaf_count: 1,
        }
    }

    pub fn root(&self) -> NodeId {
        NodeId::ROOT
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id.0]
    }

    pub fn get(&self, id: NodeId) -> Option<&TreeNode> {
        self.nodes.get(id.0)
    }

    /// Number of stored nodes, shadows included.
    pub fn stored_len(&self) -> usize {
        self.nodes.len()
    }

    /// `|T|`: verification rows, i.e. non-shadow nodes including the root.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// `L_T`: non-shadow leaves. A root-only tree has one leaf.
    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.node_count, self.leaf_count)
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> {
        (0..self.nodes.len()).map(NodeId)
    }

    /// Non-shadow node handles in topological order.
    pub fn real_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.ids().filter(move |&id| !self.nodes[id.0].shadow)
    }

    pub fn real_children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[id.0].children.iter().copied().filter(move |c| !self.nodes[c.0].shadow)
    }

    pub fn shadow_children(&self, id: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes[id.0].children.iter().copied().filter(move |c| self.nodes[c.0].shadow)
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        !self.nodes[id.0].shadow && self.real_children(id).next().is_none()
    }

    pub fn child_with_token(&self, id: NodeId, token: TokenId) -> Option<NodeId> {
        self.real_children(id).find(|&c| self.nodes[c.0].token == token)
    }

    /// Draft tokens on the path from the root to `id`, root token excluded.
    pub fn path_tokens(&self, id: NodeId) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.nodes[id.0].depth);
        let mut cur = id;
        while let Some(p) = self.nodes[cur.0].parent {
            out.push(self.nodes[cur.0].token);
            cur = p;
        }
        out.reverse();
        out
    }

    /// `context` followed by the draft path to `id`.
    pub fn prefix_for(&self, context: &[TokenId], id: NodeId) -> Vec<TokenId> {
        let mut prefix = context.to_vec();
        prefix.extend(self.path_tokens(id));
        prefix
    }

    pub fn max_depth(&self) -> usize {
        self.real_ids().map(|id| self.nodes[id.0].depth).max().unwrap_or(0)
    }

    /// Whether `anc` is `id` or one of its ancestors.
    pub fn is_ancestor_or_self(&self, anc: NodeId, id: NodeId) -> bool {
        let mut cur = Some(id);
        while let Some(c) = cur {
            if c == anc {
                return true;
            }
            cur = self.nodes[c.0].parent;
        }
        false
    }

    pub fn set_candidates(&mut self, id: NodeId, set: CandidateSet) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::Structure(format!("node {id} does not exist")))?;
        if node.shadow {
            return Err(Error::Structure(format!("shadow node {id} cannot be expanded")));
        }
        node.candidates = Some(set);
        Ok(())
    }

    /// Inserts the frontier entry at `index` as a real node and removes it
    /// from the frontier.
    pub fn insert_node(&mut self, frontier: &mut Frontier, index: usize) -> Result<NodeId> {
        let entry = *frontier
            .entries
            .get(index)
            .ok_or_else(|| Error::Structure(format!("frontier index {index} out of range")))?;
        let id = self.insert_child(entry.parent, entry.token, entry.reach)?;
        frontier.take(index);
        Ok(id)
    }

    /// Appends a real child under `parent`.
    pub fn insert_child(&mut self, parent: NodeId, token: TokenId, reach: f64) -> Result<NodeId> {
        self.check_parent(parent, token)?;
        let parent_was_leaf = self.is_leaf(parent);
        let id = self.push_node(parent, token, reach, false);
        self.node_count += 1;
        if !parent_was_leaf {
            self.leaf_count += 1;
        }
        Ok(id)
    }

    /// Appends a shadow child under `parent`. Counts are unaffected.
    pub fn add_shadow(&mut self, parent: NodeId, token: TokenId, reach: f64) -> Result<NodeId> {
        self.check_parent(parent, token)?;
        Ok(self.push_node(parent, token, reach, true))
    }

    fn check_parent(&self, parent: NodeId, token: TokenId) -> Result<()> {
        let p = self
            .nodes
            .get(parent.0)
            .ok_or_else(|| Error::Structure(format!("parent {parent} does not exist")))?;
        if p.shadow {
            return Err(Error::Structure(format!("parent {parent} is a shadow node")));
        }
        if p.children.iter().any(|c| self.nodes[c.0].token == token) {
            return Err(Error::DuplicateInsert { parent: parent.0, token });
        }
        Ok(())
    }

    fn push_node(&mut self, parent: NodeId, token: TokenId, reach: f64, shadow: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        let depth = self.nodes[parent.0].depth + 1;
        self.nodes.push(TreeNode {
            token,
            parent: Some(parent),
            depth,
            reach,
            shadow,
            children: Vec::new(),
            candidates: None,
        });
        self.nodes[parent.0].children.push(id);
        id
    }

    /// Recomputes `(|T|, L_T)` from scratch.
    pub fn recount(&self) -> (usize, usize) {
        let nodes = self.real_ids().count();
        let leaves = self.real_ids().filter(|&id| self.is_leaf(id)).count();
        (nodes, leaves)
    }

    /// Builds the batched verification layout.
    pub fn flatten(&self) -> VerifyLayout {
        let rows: Vec<NodeId> = self.real_ids().collect();
        let mut row_of = vec![usize::MAX; self.nodes.len()];
        for (i, id) in rows.iter().enumerate() {
            row_of[id.0] = i;
        }
        let parent_index: Vec<Option<usize>> =
            rows.iter().map(|id| self.nodes[id.0].parent.map(|p| row_of[p.0])).collect();
        let n = rows.len();
        let mut mask = vec![vec![false; n]; n];
        for i in 0..n {
            mask[i][i] = true;
            if let Some(p) = parent_index[i] {
                // parent row precedes i, so its mask row is already complete
                let (done, cur) = mask.split_at_mut(i);
                for (j, &m) in done[p].iter().enumerate().take(p + 1) {
                    if m {
                        cur[0][j] = true;
                    }
                }
            }
        }
        VerifyLayout {
            tokens: rows.iter().map(|id| self.nodes[id.0].token).collect(),
            depths: rows.iter().map(|id| self.nodes[id.0].depth).collect(),
            rows,
            parent_index,
            mask,
        }
    }

    /// Returns a new tree containing exactly `keep`.
    pub fn compact(&self, keep: &BTreeSet<NodeId>) -> Result<TokenTree> {
        self.compact_with_map(keep).map(|c| c.tree)
    }

    pub fn compact_with_map(&self, keep: &BTreeSet<NodeId>) -> Result<Compacted> {
        if !keep.contains(&NodeId::ROOT) {
            return Err(Error::contract("keep set must contain the root"));
        }
        for &id in keep {
            let node = self
                .get(id)
                .ok_or_else(|| Error::contract(format!("keep set names unknown node {id}")))?;
            if let Some(p) = node.parent {
                if !keep.contains(&p) {
                    return Err(Error::contract(format!(
                        "keep set is not ancestor-closed: {id} kept without parent {p}"
                    )));
                }
            }
        }
        let mut old_to_new = vec![None; self.nodes.len()];
        let mut out = TokenTree::new(self.nodes[0].token);
        out.nodes[0].candidates = self.nodes[0].candidates.clone();
        old_to_new[0] = Some(NodeId::ROOT);
        for &id in keep.iter().skip(1) {
            let node = &self.nodes[id.0];
            let parent = old_to_new[node.parent.expect("non-root").0].expect("ancestor-closed");
            let new_id = if node.shadow {
                out.add_shadow(parent, node.token, node.reach)?
            } else {
                out.insert_child(parent, node.token, node.reach)?
            };
            out.nodes[new_id.0].candidates = node.candidates.clone();
            old_to_new[id.0] = Some(new_id);
        }
        Ok(Compacted { tree: out, old_to_new })
    }

    pub fn to_dump(&self) -> TreeDump {
        TreeDump {
            nodes: self
                .ids()
                .map(|id| {
                    let n = &self.nodes[id.0];
                    DumpNode { id: id.0, parent: n.parent.map(|p| p.0), token: n.token, reach: n.reach, shadow: n.shadow }
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.to_dump())?)
    }

    /// Rebuilds a tree from its debug dump. Candidate sets are not part of the
    /// dump and come back empty.
    pub fn from_dump(dump: &TreeDump) -> Result<TokenTree> {
        let first = dump.nodes.first().ok_or_else(|| Error::Structure("empty dump".into()))?;
        if first.id != 0 || first.parent.is_some() || first.shadow {
            return Err(Error::Structure("first dumped node must be the root".into()));
        }
        let mut tree = TokenTree::new(first.token);
        tree.nodes[0].reach = first.reach;
        for (i, n) in dump.nodes.iter().enumerate().skip(1) {
            if n.id != i {
                return Err(Error::Structure(format!("dump ids must be dense, found {} at {i}", n.id)));
            }
            let parent = n.parent.ok_or_else(|| Error::Structure(format!("node {i} has no parent")))?;
            if parent >= i {
                return Err(Error::Structure(format!("node {i} precedes its parent {parent}")));
            }
            if n.shadow {
                tree.add_shadow(NodeId(parent), n.token, n.reach)?;
            } else {
                tree.insert_child(NodeId(parent), n.token, n.reach)?;
            }
        }
        Ok(tree)
    }

    pub fn from_json(s: &str) -> Result<TokenTree> {
        Self::from_dump(&serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone)]
pub struct Compacted {
    pub tree: TokenTree,
    pub old_to_new: Vec<Option<NodeId>>,
}

/// Debug serialization: one record per stored node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeDump {
    pub nodes: Vec<DumpNode>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub token: TokenId,
    pub reach: f64,
    pub shadow: bool,
}

/// Rows of a tree in verification order. `mask[i][j]` is true iff row `j` is
/// an ancestor of row `i` or `i` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifyLayout {
    pub rows: Vec<NodeId>,
    pub tokens: Vec<TokenId>,
    pub depths: Vec<usize>,
    pub parent_index: Vec<Option<usize>>,
    pub mask: Vec<Vec<bool>>,
}

impl VerifyLayout {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}
