//! Heterogeneous entity/attribute graphs and exact-distance neighborhoods.
//!
//! Entity nodes occupy ids `[0, num_entity_nodes)`; attribute nodes follow.
//! Each distinct `(attribute name, value)` pair maps to exactly one
//! attribute node. Edges are undirected and every node carries a self-loop.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::dataset::{AttributeTable, UNKNOWN};
use crate::error::{Error, Result};
use crate::rng;

/// Largest neighborhood order the index precomputes.
pub const MAX_ORDER: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Entity,
    Attribute,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HeterogeneousGraph {
    num_entity_nodes: usize,
    /// `(name, value)` for attribute node `num_entity_nodes + k`.
    attr_labels: Vec<(String, String)>,
    /// Non-self-loop edges as `(low, high)` pairs.
    edges: BTreeSet<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
}

impl HeterogeneousGraph {
    /// Assemble from parts. Self-loops in `edges` are ignored (they are implicit).
    pub fn from_parts(
        num_entity_nodes: usize,
        attr_labels: Vec<(String, String)>,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let n = num_entity_nodes + attr_labels.len();
        let mut set = BTreeSet::new();
        for (a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::Index(format!("edge ({a}, {b}) outside {n} nodes")));
            }
            if a != b {
                set.insert((a.min(b), a.max(b)));
            }
        }
        let mut adjacency = vec![Vec::new(); n];
        for &(a, b) in &set {
            adjacency[a].push(b);
            adjacency[b].push(a);
        }
        for adj in &mut adjacency {
            adj.sort_unstable();
        }
        Ok(HeterogeneousGraph {
            num_entity_nodes,
            attr_labels,
            edges: set,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_entity_nodes + self.attr_labels.len()
    }

    pub fn num_entity_nodes(&self) -> usize {
        self.num_entity_nodes
    }

    pub fn num_attribute_nodes(&self) -> usize {
        self.attr_labels.len()
    }

    pub fn node_kind(&self, node: usize) -> NodeKind {
        if node < self.num_entity_nodes {
            NodeKind::Entity
        } else {
            NodeKind::Attribute
        }
    }

    pub fn attr_label(&self, node: usize) -> Option<&(String, String)> {
        node.checked_sub(self.num_entity_nodes)
            .and_then(|k| self.attr_labels.get(k))
    }

    /// Non-self-loop edges, each once as `(low, high)`.
    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Every edge including the self-loop on each node.
    pub fn all_edges(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<_> = (0..self.num_nodes()).map(|i| (i, i)).collect();
        out.extend(self.edges.iter().copied());
        out.sort_unstable();
        out
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        a == b && a < self.num_nodes() || self.edges.contains(&(a.min(b), a.max(b)))
    }
}

/// Build a graph whose entity nodes link to one node per distinct known
/// attribute value. Attribute node ids are assigned by schema column, then by
/// sorted value, so the result does not depend on file row order.
pub fn build_heterogeneous_graph(
    num_entities: usize,
    attrs: &AttributeTable,
    attr_schema: &[String],
) -> Result<HeterogeneousGraph> {
    if attrs.len() < num_entities {
        return Err(Error::Shape(format!(
            "attribute table covers {} entities, graph needs {num_entities}",
            attrs.len()
        )));
    }
    if attr_schema.is_empty() {
        log::warn!("empty attribute schema: graph has entity nodes and self-loops only");
    }
    let mut labels = Vec::new();
    let mut edges = Vec::new();
    for name in attr_schema {
        let col = attrs
            .column(name)
            .ok_or_else(|| Error::Config(format!("attribute table has no column `{name}`")))?;
        let mut ids: BTreeMap<&str, usize> = BTreeMap::new();
        for e in 0..num_entities {
            let v = attrs.value(e, col);
            if v != UNKNOWN {
                ids.insert(v, 0);
            }
        }
        for (value, id) in ids.iter_mut() {
            *id = num_entities + labels.len();
            labels.push((name.clone(), value.to_string()));
        }
        for e in 0..num_entities {
            if let Some(&node) = ids.get(attrs.value(e, col)) {
                edges.push((e, node));
            }
        }
    }
    HeterogeneousGraph::from_parts(num_entities, labels, edges)
}

/// Nodes at shortest-path distance exactly `d` from `node`, sorted. The
/// order-1 set also contains `node` itself.
pub fn neighborhood(graph: &HeterogeneousGraph, node: usize, d: usize) -> Result<Vec<usize>> {
    if node >= graph.num_nodes() {
        return Err(Error::Index(format!(
            "node {node} outside graph of {} nodes",
            graph.num_nodes()
        )));
    }
    if d == 0 {
        return Err(Error::Domain("neighborhood order must be at least 1".into()));
    }
    let mut rings = bfs_rings(graph, node, d, &mut vec![usize::MAX; graph.num_nodes()]);
    Ok(rings.pop().unwrap_or_default())
}

/// Rings at distance `1..=depth` from `src`, with `src` folded into ring 1.
/// `dist` is scratch space that must be all `usize::MAX` on entry and is
/// restored before returning.
fn bfs_rings(
    graph: &HeterogeneousGraph,
    src: usize,
    depth: usize,
    dist: &mut [usize],
) -> Vec<Vec<usize>> {
    let mut rings = vec![Vec::new(); depth];
    let mut touched = vec![src];
    let mut queue = VecDeque::from([src]);
    dist[src] = 0;
    while let Some(u) = queue.pop_front() {
        let du = dist[u];
        if du == depth {
            continue;
        }
        for &v in graph.neighbors(u) {
            if dist[v] == usize::MAX {
                dist[v] = du + 1;
                rings[du].push(v);
                touched.push(v);
                queue.push_back(v);
            }
        }
    }
    for t in touched {
        dist[t] = usize::MAX;
    }
    if depth > 0 {
        rings[0].push(src);
    }
    for r in &mut rings {
        r.sort_unstable();
    }
    rings
}

/// Precomputed exact-distance neighborhoods for orders `1..=max_order`,
/// stored as one compressed list per order.
#[derive(Clone, Debug)]
pub struct NeighborhoodIndex {
    num_nodes: usize,
    max_order: usize,
    offsets: Vec<Vec<usize>>,
    members: Vec<Vec<u32>>,
}

impl NeighborhoodIndex {
    pub fn build(graph: &HeterogeneousGraph, max_order: usize) -> Result<Self> {
        if max_order == 0 || max_order > MAX_ORDER {
            return Err(Error::Domain(format!(
                "neighborhood order must lie in [1, {MAX_ORDER}], got {max_order}"
            )));
        }
        let n = graph.num_nodes();
        let mut offsets = vec![vec![0usize]; max_order];
        let mut members: Vec<Vec<u32>> = vec![Vec::new(); max_order];
        let mut scratch = vec![usize::MAX; n];
        for node in 0..n {
            let rings = bfs_rings(graph, node, max_order, &mut scratch);
            for (d, ring) in rings.into_iter().enumerate() {
                members[d].extend(ring.into_iter().map(|v| v as u32));
                offsets[d].push(members[d].len());
            }
        }
        Ok(NeighborhoodIndex {
            num_nodes: n,
            max_order,
            offsets,
            members,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    /// Neighbors of `node` at exact distance `order` (1-based).
    pub fn get(&self, node: usize, order: usize) -> &[u32] {
        let d = order - 1;
        &self.members[d][self.offsets[d][node]..self.offsets[d][node + 1]]
    }

    /// Total number of (node, neighbor) pairs across all orders.
    pub fn pair_count(&self) -> usize {
        self.members.iter().map(Vec::len).sum()
    }
}

/// Replace `floor(ratio * |edges|)` non-self-loop edges with uniformly drawn
/// entity-attribute pairs absent from the original graph. Attribute nodes
/// that lose all their edges remain in the graph with only their self-loop.
pub fn inject_edge_noise(
    graph: &HeterogeneousGraph,
    ratio: f64,
    seed: u64,
) -> Result<HeterogeneousGraph> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Domain(format!("noise ratio must lie in [0, 1), got {ratio}")));
    }
    let original: Vec<(usize, usize)> = graph.edges.iter().copied().collect();
    let count = ((ratio * original.len() as f64) + 1e-9).floor() as usize;
    if count == 0 {
        return Ok(graph.clone());
    }
    let n_ent = graph.num_entity_nodes;
    let n_attr = graph.num_attribute_nodes();
    let capacity = n_ent * n_attr;
    let present = original
        .iter()
        .filter(|&&(a, b)| a < n_ent && b >= n_ent)
        .count();
    let free = capacity - present;
    if count > free {
        return Err(Error::Saturation(format!(
            "{count} replacement edges requested, only {free} entity-attribute pairs free"
        )));
    }
    let mut rng = rng::stream(seed, 0xE06E);
    let mut drop_order: Vec<usize> = (0..original.len()).collect();
    drop_order.shuffle(&mut rng);
    let dropped: HashSet<usize> = drop_order[..count].iter().copied().collect();

    let mut added: HashSet<(usize, usize)> = HashSet::with_capacity(count);
    if free < 4 * count {
        let mut candidates: Vec<(usize, usize)> = (0..n_ent)
            .flat_map(|e| (n_ent..n_ent + n_attr).map(move |a| (e, a)))
            .filter(|p| !graph.edges.contains(p))
            .collect();
        candidates.shuffle(&mut rng);
        added.extend(candidates.into_iter().take(count));
    } else {
        while added.len() < count {
            let e = rng.random_range(0..n_ent);
            let a = n_ent + rng.random_range(0..n_attr);
            if !graph.edges.contains(&(e, a)) {
                added.insert((e, a));
            }
        }
    }
    let kept = original
        .iter()
        .enumerate()
        .filter(|(i, _)| !dropped.contains(i))
        .map(|(_, &e)| e);
    HeterogeneousGraph::from_parts(n_ent, graph.attr_labels.clone(), kept.chain(added))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".nodes");
    PathBuf::from(s)
}

/// Write `u v` lines (self-loops included) plus a `<path>.nodes` sidecar
/// with one `id<TAB>entity` or `id<TAB>attribute<TAB>name<TAB>value` line per node.
pub fn write_edge_list(graph: &HeterogeneousGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut edges = String::new();
    for (a, b) in graph.all_edges() {
        let _ = writeln!(edges, "{a} {b}");
    }
    let mut nodes = String::new();
    for i in 0..graph.num_nodes() {
        match graph.attr_label(i) {
            None => {
                let _ = writeln!(nodes, "{i}\tentity");
            }
            Some((name, value)) => {
                let _ = writeln!(nodes, "{i}\tattribute\t{name}\t{value}");
            }
        }
    }
    fs::write(path, edges).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    let side = sidecar(path);
    fs::write(&side, nodes).map_err(|e| Error::io(format!("writing {}", side.display()), e))
}

pub fn read_edge_list(path: impl AsRef<Path>) -> Result<HeterogeneousGraph> {
    let path = path.as_ref();
    let side = sidecar(path);
    let nodes = fs::read_to_string(&side)
        .map_err(|e| Error::io(format!("reading {}", side.display()), e))?;
    let mut n_ent = 0;
    let mut labels = Vec::new();
    for (i, line) in nodes.lines().enumerate().filter(|(_, l)| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |msg: &str| Error::Parse {
            path: side.clone(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let id: usize = f[0].parse().map_err(|_| bad("invalid node id"))?;
        match f.get(1).copied() {
            Some("entity") if labels.is_empty() && id == n_ent => n_ent += 1,
            Some("attribute") if f.len() == 4 && id == n_ent + labels.len() => {
                labels.push((f[2].to_string(), f[3].to_string()))
            }
            _ => return Err(bad("expected contiguous entity rows then attribute rows")),
        }
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let mut it = line.split_whitespace().map(str::parse::<usize>);
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(a)), Some(Ok(b)), None) => edges.push((a, b)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected `u v`".into(),
                })
            }
        }
    }
    HeterogeneousGraph::from_parts(n_ent, labels, edges)
}
