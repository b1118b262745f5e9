use serde::{Deserialize, Serialize};

pub type CtxId = u32;
pub type MetricId = u16;
pub type ProfileId = u32;

/// Profile id reserved for the cross-rank summary.
pub const SUMMARY_PROFILE: ProfileId = 0;
/// Parent id written for the root context.
pub const ROOT_PARENT: u32 = u32::MAX;
/// Rank recorded on the summary profile.
pub const SUMMARY_RANK: i32 = -1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Inclusive,
    Exclusive,
}

impl Scope {
    pub fn code(self) -> u8 {
        match self {
            Scope::Inclusive => 0,
            Scope::Exclusive => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Scope::Inclusive),
            1 => Some(Scope::Exclusive),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricDesc {
    pub id: MetricId,
    pub name: String,
    pub scope: Scope,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileDesc {
    pub id: ProfileId,
    pub rank: i32,
    pub thread: i32,
    pub hostname: String,
    pub posix_node_id: u64,
}

impl ProfileDesc {
    pub fn summary() -> Self {
        ProfileDesc {
            id: SUMMARY_PROFILE,
            rank: SUMMARY_RANK,
            thread: -1,
            hostname: String::new(),
            posix_node_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Function,
    Loop,
    Line,
    GpuKernel,
    GpuContext,
}

impl NodeKind {
    pub fn code(self) -> u8 {
        match self {
            NodeKind::Function => 0,
            NodeKind::Loop => 1,
            NodeKind::Line => 2,
            NodeKind::GpuKernel => 3,
            NodeKind::GpuContext => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => NodeKind::Function,
            1 => NodeKind::Loop,
            2 => NodeKind::Line,
            3 => NodeKind::GpuKernel,
            4 => NodeKind::GpuContext,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CctNode {
    pub id: CtxId,
    pub parent: Option<CtxId>,
    pub kind: NodeKind,
    pub name: String,
}

/// Calling context tree with dense ids: node `i` lives at index `i`, the root
/// is id 0 and every parent id is smaller than its child's.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CallingContextTree {
    nodes: Vec<CctNode>,
    depth: Vec<u32>,
}

impl CallingContextTree {
    pub fn new(nodes: Vec<CctNode>) -> Result<Self, String> {
        if nodes.is_empty() {
            return Err("calling context tree has no root".into());
        }
        let mut depth = Vec::with_capacity(nodes.len());
        for (idx, node) in nodes.iter().enumerate() {
            if node.id as usize != idx {
                return Err(format!("context at position {idx} has id {}", node.id));
            }
            match node.parent {
                None if idx == 0 => depth.push(0),
                None => return Err(format!("context {idx} is a second root")),
                Some(_) if idx == 0 => return Err("context 0 must be the root".into()),
                Some(p) if p >= node.id => {
                    return Err(format!("context {idx} has parent {p} not below its own id"))
                }
                Some(p) => depth.push(depth[p as usize] + 1),
            }
        }
        Ok(CallingContextTree { nodes, depth })
    }

    /// A tree holding only a root context.
    pub fn root_only(name: &str) -> Self {
        Self::new(vec![CctNode {
            id: 0,
            parent: None,
            kind: NodeKind::Function,
            name: name.to_string(),
        }])
        .expect("single root is valid")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> CtxId {
        0
    }

    pub fn nodes(&self) -> &[CctNode] {
        &self.nodes
    }

    pub fn get(&self, id: CtxId) -> Option<&CctNode> {
        self.nodes.get(id as usize)
    }

    pub fn contains(&self, id: CtxId) -> bool {
        (id as usize) < self.nodes.len()
    }

    pub fn parent(&self, id: CtxId) -> Option<CtxId> {
        self.nodes.get(id as usize).and_then(|n| n.parent)
    }

    pub fn depth(&self, id: CtxId) -> u32 {
        self.depth[id as usize]
    }

    pub fn name(&self, id: CtxId) -> &str {
        &self.nodes[id as usize].name
    }

    pub fn kind(&self, id: CtxId) -> NodeKind {
        self.nodes[id as usize].kind
    }

    /// Iterates `id` and then each ancestor up to the root.
    pub fn ancestors_inclusive(&self, id: CtxId) -> Ancestors<'_> {
        Ancestors {
            tree: self,
            next: Some(id),
        }
    }

    /// True when `ancestor` lies on the root path of `node` (or equals it).
    pub fn is_ancestor_or_self(&self, ancestor: CtxId, node: CtxId) -> bool {
        let target = self.depth(ancestor);
        let mut cur = node;
        while self.depth(cur) > target {
            cur = self.nodes[cur as usize].parent.expect("non-root has parent");
        }
        cur == ancestor
    }

    /// Membership mask of the subtree rooted at `top`, indexed by ctx id.
    pub fn subtree_mask(&self, top: CtxId) -> Vec<bool> {
        let mut mask = vec![false; self.nodes.len()];
        if !self.contains(top) {
            return mask;
        }
        mask[top as usize] = true;
        for node in &self.nodes[top as usize + 1..] {
            if let Some(p) = node.parent {
                if mask[p as usize] {
                    mask[node.id as usize] = true;
                }
            }
        }
        mask
    }

    pub fn children(&self) -> Vec<Vec<CtxId>> {
        let mut out = vec![Vec::new(); self.nodes.len()];
        for node in &self.nodes {
            if let Some(p) = node.parent {
                out[p as usize].push(node.id);
            }
        }
        out
    }
}

pub struct Ancestors<'a> {
    tree: &'a CallingContextTree,
    next: Option<CtxId>,
}

impl Iterator for Ancestors<'_> {
    type Item = CtxId;

    fn next(&mut self) -> Option<CtxId> {
        let cur = self.next?;
        self.next = self.tree.parent(cur);
        Some(cur)
    }
}

/// Small metadata section: parsed whole on open.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Meta {
    pub metrics: Vec<MetricDesc>,
    pub profiles: Vec<ProfileDesc>,
    pub cct: CallingContextTree,
}

impl Meta {
    pub fn metric(&self, id: MetricId) -> Option<&MetricDesc> {
        self.metrics.iter().find(|m| m.id == id)
    }

    pub fn metric_by_name(&self, name: &str, scope: Scope) -> Option<&MetricDesc> {
        self.metrics
            .iter()
            .find(|m| m.name == name && m.scope == scope)
    }

    pub fn profile(&self, id: ProfileId) -> Option<&ProfileDesc> {
        match self.profiles.binary_search_by_key(&id, |p| p.id) {
            Ok(i) => Some(&self.profiles[i]),
            Err(_) => self.profiles.iter().find(|p| p.id == id),
        }
    }

    /// Non-summary profiles.
    pub fn rank_profiles(&self) -> impl Iterator<Item = &ProfileDesc> {
        self.profiles.iter().filter(|p| p.id != SUMMARY_PROFILE)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub ctx_id: CtxId,
    pub metric_id: MetricId,
    pub value: f64,
}

impl ProfileRecord {
    pub fn key(&self) -> (CtxId, MetricId) {
        (self.ctx_id, self.metric_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TraceEvent {
    pub timestamp_ns: u64,
    pub ctx_id: CtxId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileBody {
    pub profile_id: ProfileId,
    pub records: Vec<ProfileRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceBody {
    pub profile_id: ProfileId,
    pub t_begin_ns: u64,
    pub t_end_ns: u64,
    pub events: Vec<TraceEvent>,
}

/// Complete logical content of a database, as written or as read back.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatabaseImage {
    pub meta: Meta,
    pub profiles: Vec<ProfileBody>,
    pub traces: Vec<TraceBody>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn node(id: u32, parent: Option<u32>) -> CctNode {
        CctNode {
            id,
            parent,
            kind: NodeKind::Function,
            name: format!("n{id}"),
        }
    }

    #[test]
    fn rejects_forward_parent() {
        let err = CallingContextTree::new(vec![node(0, None), node(1, Some(2)), node(2, Some(0))]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_second_root() {
        assert!(CallingContextTree::new(vec![node(0, None), node(1, None)]).is_err());
    }

    #[test]
    fn ancestry_and_masks() {
        let t = CallingContextTree::new(vec![
            node(0, None),
            node(1, Some(0)),
            node(2, Some(1)),
            node(3, Some(0)),
        ])
        .unwrap();
        assert_eq!(t.ancestors_inclusive(2).collect::<Vec<_>>(), vec![2, 1, 0]);
        assert!(t.is_ancestor_or_self(1, 2));
        assert!(!t.is_ancestor_or_self(3, 2));
        assert!(t.is_ancestor_or_self(0, 3));
        assert_eq!(t.subtree_mask(1), vec![false, true, true, false]);
        assert_eq!(t.depth(2), 2);
    }
}
