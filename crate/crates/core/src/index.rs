//! Covering DAG over stored subscriptions.
//!
//! Nodes are kept in the transitive reduction of the covering relation:
//! an edge `a -> b` means `a` covers `b` and no third node sits between
//! them. Matching walks from the roots and only evaluates a node once some
//! parent has matched, since a publication that fails a filter fails every
//! filter it covers.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};

use thiserror::Error;

use crate::filter::{Filter, Publication};
use crate::ids::{FilterId, SubscriberId};

/// Fixed accounting cost of one stored subscription.
pub const NODE_BYTES: u64 = 128;
/// Accounting cost per constraint.
pub const CONSTRAINT_BYTES: u64 = 64;
/// Footprints are rounded up to whole lines.
pub const LINE_BYTES: u64 = 64;

/// Deterministic memory footprint of one subscription:
/// 128 + 64 per constraint + literal bytes, rounded up to 64-byte lines.
pub fn subscription_bytes(f: &Filter) -> u64 {
    let raw = NODE_BYTES + CONSTRAINT_BYTES * f.constraints().len() as u64 + f.literal_bytes() as u64;
    raw.div_ceil(LINE_BYTES) * LINE_BYTES
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subscription {
    pub filter: Filter,
    pub subscriber: SubscriberId,
}

impl Subscription {
    pub fn new(filter: Filter, subscriber: SubscriberId) -> Self {
        Self { filter, subscriber }
    }

    pub fn filter_id(&self) -> FilterId {
        self.filter.id()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IndexError {
    #[error("filter id {0} already stored")]
    DuplicateFilterId(FilterId),
    #[error("filter id {0} not stored")]
    UnknownFilterId(FilterId),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchStats {
    /// Filter evaluations performed (one per node visited).
    pub evaluations: u64,
    /// Matching subscriptions.
    pub matched: u64,
    /// Nodes never evaluated because no parent matched.
    pub pruned: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Match {
    pub subscriber: SubscriberId,
    pub filter_id: FilterId,
}

#[derive(Clone, Debug, Default)]
pub struct MatchResult {
    pub matches: Vec<Match>,
    pub stats: MatchStats,
}

type NodeIdx = u32;

#[derive(Debug)]
struct Node {
    shape: u64,
    /// Sorted by filter id; the first entry anchors the node's order.
    entries: Vec<Subscription>,
    parents: Vec<NodeIdx>,
    /// Sorted by anchor id.
    children: Vec<NodeIdx>,
}

impl Node {
    fn filter(&self) -> &Filter {
        &self.entries[0].filter
    }

    fn anchor(&self) -> FilterId {
        self.entries[0].filter.id()
    }
}

#[derive(Debug, Default)]
pub struct ContainmentIndex {
    nodes: Vec<Option<Node>>,
    free: Vec<NodeIdx>,
    by_filter: HashMap<FilterId, NodeIdx>,
    by_shape: HashMap<u64, Vec<NodeIdx>>,
    /// Sorted by anchor id.
    roots: Vec<NodeIdx>,
    node_count: usize,
    resident: u64,
}

fn shape_hash(f: &Filter) -> u64 {
    let mut h = DefaultHasher::new();
    f.constraints().hash(&mut h);
    h.finish()
}

impl ContainmentIndex {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stored subscriptions.
    pub fn len(&self) -> usize {
        self.by_filter.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_filter.is_empty()
    }

    /// Distinct poset positions.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident
    }

    pub fn contains(&self, id: FilterId) -> bool {
        self.by_filter.contains_key(&id)
    }

    pub fn get(&self, id: FilterId) -> Option<&Subscription> {
        let n = self.node(*self.by_filter.get(&id)?);
        n.entries.iter().find(|s| s.filter_id() == id)
    }

    pub fn subscriptions(&self) -> impl Iterator<Item = &Subscription> {
        self.nodes.iter().flatten().flat_map(|n| n.entries.iter())
    }

    fn node(&self, i: NodeIdx) -> &Node {
        self.nodes[i as usize].as_ref().expect("live node")
    }

    fn node_mut(&mut self, i: NodeIdx) -> &mut Node {
        self.nodes[i as usize].as_mut().expect("live node")
    }

    fn insert_sorted(nodes: &[Option<Node>], list: &mut Vec<NodeIdx>, idx: NodeIdx) {
        let key = nodes[idx as usize].as_ref().unwrap().anchor();
        let pos = list
            .binary_search_by(|&o| nodes[o as usize].as_ref().unwrap().anchor().cmp(&key))
            .unwrap_or_else(|p| p);
        list.insert(pos, idx);
    }

    fn remove_from(list: &mut Vec<NodeIdx>, idx: NodeIdx) {
        if let Some(p) = list.iter().position(|&x| x == idx) {
            list.remove(p);
        }
    }

    fn same_shape(&self, f: &Filter, shape: u64) -> Option<NodeIdx> {
        self.by_shape
            .get(&shape)?
            .iter()
            .copied()
            .find(|&i| self.node(i).filter().same_shape(f))
    }

    /// Re-sorts `idx` inside its parents' child lists (or the root list)
    /// after its anchor changed.
    fn reposition(&mut self, idx: NodeIdx) {
        let parents = self.node(idx).parents.clone();
        if parents.is_empty() {
            let mut roots = std::mem::take(&mut self.roots);
            Self::remove_from(&mut roots, idx);
            Self::insert_sorted(&self.nodes, &mut roots, idx);
            self.roots = roots;
        }
        for p in parents {
            let mut ch = std::mem::take(&mut self.node_mut(p).children);
            Self::remove_from(&mut ch, idx);
            Self::insert_sorted(&self.nodes, &mut ch, idx);
            self.node_mut(p).children = ch;
        }
    }

    /// Nodes covering `f` with no child that also covers `f`.
    fn minimal_covering(&self, f: &Filter) -> Vec<NodeIdx> {
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        let mut memo: HashMap<NodeIdx, bool> = HashMap::new();
        let mut covers = |i: NodeIdx| *memo.entry(i).or_insert_with(|| self.node(i).filter().covers(f));
        let mut stack: Vec<NodeIdx> = self.roots.iter().copied().filter(|&r| covers(r)).collect();
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            let mut deeper = false;
            for &c in &self.node(n).children {
                if covers(c) {
                    deeper = true;
                    stack.push(c);
                }
            }
            if !deeper {
                out.push(n);
            }
        }
        out
    }

    /// Nodes covered by `f` none of whose parents is covered by `f`.
    fn maximal_covered(&self, f: &Filter) -> Vec<NodeIdx> {
        let mut covered = Vec::new();
        let mut seen = HashSet::new();
        let mut stack: Vec<NodeIdx> = self.roots.clone();
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            let node = self.node(n);
            if f.covers(node.filter()) {
                covered.push(n);
            } else if f.intersects(node.filter()) {
                stack.extend_from_slice(&node.children);
            }
        }
        covered.retain(|&c| !self.node(c).parents.iter().any(|&p| f.covers(self.node(p).filter())));
        covered
    }

    pub fn insert(&mut self, sub: Subscription) -> Result<(), IndexError> {
        let id = sub.filter_id();
        if self.by_filter.contains_key(&id) {
            return Err(IndexError::DuplicateFilterId(id));
        }
        let bytes = subscription_bytes(&sub.filter);
        let shape = shape_hash(&sub.filter);

        if let Some(n) = self.same_shape(&sub.filter, shape) {
            let node = self.node_mut(n);
            let pos = node.entries.partition_point(|e| e.filter_id() < id);
            node.entries.insert(pos, sub);
            self.by_filter.insert(id, n);
            self.resident += bytes;
            if pos == 0 {
                self.reposition(n);
            }
            return Ok(());
        }

        let parents = self.minimal_covering(&sub.filter);
        let children = self.maximal_covered(&sub.filter);

        for &p in &parents {
            for &c in &children {
                let had = {
                    let pn = self.node_mut(p);
                    let before = pn.children.len();
                    Self::remove_from(&mut pn.children, c);
                    before != pn.children.len()
                };
                if had {
                    Self::remove_from(&mut self.node_mut(c).parents, p);
                }
            }
        }

        let node = Node { shape, entries: vec![sub], parents: parents.clone(), children: Vec::new() };
        let idx = match self.free.pop() {
            Some(i) => {
                self.nodes[i as usize] = Some(node);
                i
            }
            None => {
                self.nodes.push(Some(node));
                (self.nodes.len() - 1) as NodeIdx
            }
        };

        for &p in &parents {
            let mut ch = std::mem::take(&mut self.node_mut(p).children);
            Self::insert_sorted(&self.nodes, &mut ch, idx);
            self.node_mut(p).children = ch;
        }
        let mut mine = Vec::with_capacity(children.len());
        for &c in &children {
            if self.node(c).parents.is_empty() {
                Self::remove_from(&mut self.roots, c);
            }
            self.node_mut(c).parents.push(idx);
            Self::insert_sorted(&self.nodes, &mut mine, c);
        }
        self.node_mut(idx).children = mine;
        if parents.is_empty() {
            let mut roots = std::mem::take(&mut self.roots);
            Self::insert_sorted(&self.nodes, &mut roots, idx);
            self.roots = roots;
        }

        self.by_filter.insert(id, idx);
        self.by_shape.entry(shape).or_default().push(idx);
        self.node_count += 1;
        self.resident += bytes;
        Ok(())
    }

    pub fn remove(&mut self, id: FilterId) -> Result<Subscription, IndexError> {
        let idx = self.by_filter.remove(&id).ok_or(IndexError::UnknownFilterId(id))?;
        let node = self.node_mut(idx);
        let pos = node.entries.iter().position(|e| e.filter_id() == id).expect("indexed entry");
        let sub = node.entries.remove(pos);
        self.resident -= subscription_bytes(&sub.filter);
        if !self.node(idx).entries.is_empty() {
            if pos == 0 {
                self.reposition(idx);
            }
            return Ok(sub);
        }

        let node = self.nodes[idx as usize].take().expect("live node");
        if let Some(v) = self.by_shape.get_mut(&node.shape) {
            Self::remove_from(v, idx);
            if v.is_empty() {
                self.by_shape.remove(&node.shape);
            }
        }
        for &p in &node.parents {
            Self::remove_from(&mut self.node_mut(p).children, idx);
        }
        for &c in &node.children {
            Self::remove_from(&mut self.node_mut(c).parents, idx);
        }
        if node.parents.is_empty() {
            Self::remove_from(&mut self.roots, idx);
        }
        // Reconnect each former parent to each former child unless some
        // other child of the parent already reaches it.
        for &c in &node.children {
            for &p in &node.parents {
                let reached = self
                    .node(p)
                    .children
                    .iter()
                    .any(|&q| self.node(q).filter().covers(self.node(c).filter()));
                if !reached {
                    let mut ch = std::mem::take(&mut self.node_mut(p).children);
                    Self::insert_sorted(&self.nodes, &mut ch, c);
                    self.node_mut(p).children = ch;
                    self.node_mut(c).parents.push(p);
                }
            }
            if self.node(c).parents.is_empty() {
                let mut roots = std::mem::take(&mut self.roots);
                Self::insert_sorted(&self.nodes, &mut roots, c);
                self.roots = roots;
            }
        }
        self.free.push(idx);
        self.node_count -= 1;
        Ok(sub)
    }

    pub fn match_all(&self, p: &Publication) -> MatchResult {
        self.match_with(p, |_| {})
    }

    /// Like [`match_all`](Self::match_all), calling `on_eval` with the
    /// subscriptions held by each evaluated node, in traversal order.
    pub fn match_with<F: FnMut(&[Subscription])>(&self, p: &Publication, mut on_eval: F) -> MatchResult {
        let mut out = MatchResult::default();
        let mut seen: HashSet<NodeIdx> = HashSet::new();
        let mut stack: Vec<NodeIdx> = self.roots.iter().rev().copied().collect();
        while let Some(n) = stack.pop() {
            if !seen.insert(n) {
                continue;
            }
            let node = self.node(n);
            out.stats.evaluations += 1;
            on_eval(&node.entries);
            if node.filter().matches(p) {
                out.stats.matched += node.entries.len() as u64;
                out.matches.extend(
                    node.entries.iter().map(|s| Match { subscriber: s.subscriber, filter_id: s.filter_id() }),
                );
                stack.extend(node.children.iter().rev().copied());
            }
        }
        out.stats.pruned = self.node_count as u64 - out.stats.evaluations;
        out
    }

    /// Matches a batch of publications against the (read-only) index.
    pub fn match_batch(&self, pubs: &[Publication]) -> Vec<MatchResult> {
        crate::par::map(pubs, |p| self.match_all(p))
    }

    pub fn match_batch_sequential(&self, pubs: &[Publication]) -> Vec<MatchResult> {
        crate::par::map_seq(pubs, |p| self.match_all(p))
    }

    /// Edges as canonical filter text pairs; independent of insertion order.
    pub fn edges(&self) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for n in self.nodes.iter().flatten() {
            for &c in &n.children {
                out.insert((n.filter().render(), self.node(c).filter().render()));
            }
        }
        out
    }

    pub fn roots(&self) -> BTreeSet<String> {
        self.roots.iter().map(|&r| self.node(r).filter().render()).collect()
    }

    /// Graphviz dump; node labels are canonical filter text.
    pub fn to_dot(&self) -> String {
        let mut labels: Vec<(String, usize)> = self
            .nodes
            .iter()
            .flatten()
            .map(|n| (n.filter().render(), n.entries.len()))
            .collect();
        labels.sort();
        let name: HashMap<&str, usize> = labels.iter().enumerate().map(|(i, (t, _))| (t.as_str(), i)).collect();
        let mut out = String::from("digraph covering {\n");
        for (i, (text, subs)) in labels.iter().enumerate() {
            let esc = text.replace('\\', "\\\\").replace('"', "\\\"");
            writeln!(out, "  n{i} [label=\"{esc}\\n({subs})\"];").unwrap();
        }
        for (a, b) in self.edges() {
            writeln!(out, "  n{} -> n{};", name[a.as_str()], name[b.as_str()]).unwrap();
        }
        out.push_str("}\n");
        out
    }

    /// Checks the structural invariants: every edge is a covering pair, the
    /// edge set is the transitive reduction of covering, roots are exactly
    /// the parentless nodes, and the bookkeeping agrees with the node set.
    pub fn validate(&self) -> Result<(), String> {
        let live: Vec<NodeIdx> =
            (0..self.nodes.len() as NodeIdx).filter(|&i| self.nodes[i as usize].is_some()).collect();
        if live.len() != self.node_count {
            return Err("node count mismatch".into());
        }
        let mut bytes = 0;
        for &i in &live {
            let n = self.node(i);
            if n.entries.is_empty() {
                return Err(format!("node {i} has no entries"));
            }
            for e in &n.entries {
                bytes += subscription_bytes(&e.filter);
                if self.by_filter.get(&e.filter_id()) != Some(&i) || !e.filter.same_shape(n.filter()) {
                    return Err(format!("entry {} misindexed", e.filter_id()));
                }
            }
            if !n.entries.windows(2).all(|w| w[0].filter_id() < w[1].filter_id()) {
                return Err(format!("node {i} entries unsorted"));
            }
            if !n.children.windows(2).all(|w| self.node(w[0]).anchor() < self.node(w[1]).anchor()) {
                return Err(format!("node {i} children unsorted"));
            }
            for &c in &n.children {
                if !self.node(c).parents.contains(&i) {
                    return Err(format!("edge {i}->{c} missing back-link"));
                }
                if !n.filter().covers(self.node(c).filter()) {
                    return Err(format!("edge {} -> {} is not a covering pair", n.filter(), self.node(c).filter()));
                }
                if n.children.iter().any(|&q| q != c && self.node(q).filter().covers(self.node(c).filter())) {
                    return Err(format!("edge {} -> {} is redundant", n.filter(), self.node(c).filter()));
                }
            }
            for &p in &n.parents {
                if !self.node(p).children.contains(&i) {
                    return Err(format!("parent link {p}->{i} missing"));
                }
            }
        }
        if bytes != self.resident {
            return Err(format!("resident bytes {} but entries sum to {bytes}", self.resident));
        }
        if self.by_filter.len() != live.iter().map(|&i| self.node(i).entries.len()).sum::<usize>() {
            return Err("filter map size mismatch".into());
        }
        let expect_roots: BTreeSet<NodeIdx> =
            live.iter().copied().filter(|&i| self.node(i).parents.is_empty()).collect();
        if expect_roots != self.roots.iter().copied().collect() || expect_roots.len() != self.roots.len() {
            return Err("root set mismatch".into());
        }
        if !self.roots.windows(2).all(|w| self.node(w[0]).anchor() < self.node(w[1]).anchor()) {
            return Err("roots unsorted".into());
        }
        // Reachability must coincide with strict covering; this also rules
        // out cycles because covering is antisymmetric on distinct shapes.
        for &a in &live {
            let mut reach = HashSet::new();
            let mut stack = self.node(a).children.clone();
            while let Some(x) = stack.pop() {
                if reach.insert(x) {
                    stack.extend_from_slice(&self.node(x).children);
                }
            }
            if reach.contains(&a) {
                return Err(format!("cycle through {}", self.node(a).filter()));
            }
            for &b in &live {
                if a != b && self.node(a).filter().covers(self.node(b).filter()) != reach.contains(&b) {
                    return Err(format!(
                        "reachability disagrees with covering for {} / {}",
                        self.node(a).filter(),
                        self.node(b).filter()
                    ));
                }
            }
        }
        Ok(())
    }
}
