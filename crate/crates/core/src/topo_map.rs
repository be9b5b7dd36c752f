//! Topological map over offline frames with learned-value edges.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::offline_rl::IqlModels;
use crate::representation::Encoder;

pub const MAP_SCHEMA: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoNode {
    pub id: usize,
    pub z: Vec<f64>,
    pub episode: u32,
    pub step: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TopoEdge {
    pub from: usize,
    pub to: usize,
    pub value: f64,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapMeta {
    pub schema: u32,
    pub node_stride: usize,
    pub edge_threshold: f64,
    /// Hash of the checkpoint whose encoder and V built the map.
    pub checkpoint_hash: String,
    /// Nodes without incoming edges.
    pub isolated: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopoMap {
    pub meta: MapMeta,
    pub nodes: Vec<TopoNode>,
    pub edges: Vec<TopoEdge>,
    #[serde(skip)]
    adjacency: Vec<Vec<usize>>,
    #[serde(skip)]
    latents: Option<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Localization {
    Node { id: usize, value: f64 },
    Lost { best_value: f64 },
}

impl Localization {
    pub fn is_lost(&self) -> bool {
        matches!(self, Localization::Lost { .. })
    }

    pub fn value(&self) -> f64 {
        match *self {
            Localization::Node { value, .. } => value,
            Localization::Lost { best_value } => best_value,
        }
    }
}

impl TopoMap {
    /// Assemble a map from explicit nodes and edges; self-loops are dropped.
    pub fn from_parts(nodes: Vec<TopoNode>, edges: Vec<TopoEdge>, meta: MapMeta) -> Result<Self> {
        let n = nodes.len();
        if let Some(e) = edges.iter().find(|e| e.from >= n || e.to >= n) {
            return Err(Error::UnknownNode(e.from.max(e.to)));
        }
        let edges: Vec<TopoEdge> = edges.into_iter().filter(|e| e.from != e.to).collect();
        let mut has_in = vec![false; n];
        for e in &edges {
            has_in[e.to] = true;
        }
        let mut meta = meta;
        meta.isolated = (0..n).filter(|&i| !has_in[i]).collect();
        let mut map = Self {
            meta,
            nodes,
            edges,
            adjacency: Vec::new(),
            latents: None,
        };
        map.index();
        Ok(map)
    }

    fn index(&mut self) {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (i, e) in self.edges.iter().enumerate() {
            adj[e.from].push(i);
        }
        self.adjacency = adj;
        self.latents = self.nodes.first().map(|n0| {
            let d = n0.z.len();
            Tensor::from_shape_fn((self.nodes.len(), d), |(i, j)| self.nodes[i].z[j])
        });
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn latents(&self) -> &Tensor {
        self.latents.as_ref().expect("non-empty map")
    }

    pub fn out_edges(&self, node: usize) -> impl Iterator<Item = &TopoEdge> {
        self.adjacency[node].iter().map(move |&i| &self.edges[i])
    }

    /// Cheapest edge `from -> to` when several are parallel.
    pub fn edge(&self, from: usize, to: usize) -> Option<&TopoEdge> {
        self.out_edges(from)
            .filter(|e| e.to == to)
            .min_by(|a, b| a.cost.total_cmp(&b.cost))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let s = serde_json::to_string(self).map_err(|e| Error::Malformed(e.to_string()))?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Load a map and check it was built by the checkpoint with `expected_hash`.
    pub fn read(path: impl AsRef<Path>, expected_hash: Option<&str>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map: TopoMap = serde_json::from_str(&s).map_err(|e| Error::Malformed(format!("{}: {e}", path.display())))?;
        if map.meta.schema != MAP_SCHEMA {
            return Err(Error::VersionMismatch {
                found: map.meta.schema,
                expected: MAP_SCHEMA,
            });
        }
        if let Some(h) = expected_hash {
            if h != map.meta.checkpoint_hash {
                return Err(Error::HashMismatch {
                    what: path.display().to_string(),
                    expected: map.meta.checkpoint_hash.clone(),
                    found: h.to_string(),
                });
            }
        }
        let n = map.nodes.len();
        if map.edges.iter().any(|e| e.from >= n || e.to >= n) {
            return Err(Error::Malformed("edge refers to a missing node".into()));
        }
        map.index();
        Ok(map)
    }
}

/// Frames `0, stride, 2·stride, ...` of every episode, as (episode, step) pairs.
pub fn node_frames(d: &Dataset, stride: usize) -> Vec<(usize, usize)> {
    d.episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (0..ep.len()).step_by(stride.max(1)).map(move |s| (e, s)))
        .collect()
}

/// Nodes from every `node_stride`-th frame; directed edges wherever
/// `V(z_i, z_j) ≥ edge_threshold`, with cost `|V|`.
pub fn build_map(
    d: &Dataset,
    encoder: &Encoder,
    iql: &IqlModels,
    node_stride: usize,
    edge_threshold: f64,
    checkpoint_hash: &str,
) -> Result<TopoMap> {
    if d.is_empty() {
        return Err(Error::Empty("cannot build a map from an empty dataset".into()));
    }
    let frames = node_frames(d, node_stride);
    let z = encoder.encode_all(frames.iter().map(|&(e, s)| &d.episodes[e].transitions[s].obs))?;
    let nodes: Vec<TopoNode> = frames
        .iter()
        .enumerate()
        .map(|(id, &(e, s))| TopoNode {
            id,
            z: z.row(id).to_vec(),
            episode: d.episodes[e].id,
            step: s as u32,
        })
        .collect();
    let values = iql.value_matrix(&z, &z);
    let mut edges = Vec::new();
    for i in 0..nodes.len() {
        for j in 0..nodes.len() {
            let v = values[[i, j]];
            if i != j && v >= edge_threshold {
                edges.push(TopoEdge {
                    from: i,
                    to: j,
                    value: v,
                    cost: v.abs(),
                });
            }
        }
    }
    TopoMap::from_parts(
        nodes,
        edges,
        MapMeta {
            schema: MAP_SCHEMA,
            node_stride,
            edge_threshold,
            checkpoint_hash: checkpoint_hash.to_string(),
            isolated: Vec::new(),
        },
    )
}

/// Values `V(z, z_node)` for every node.
pub fn node_values(z: &[f64], map: &TopoMap, iql: &IqlModels) -> Vec<f64> {
    let zt = Tensor::from_shape_vec((1, z.len()), z.to_vec()).expect("row");
    iql.value_matrix(&zt, map.latents()).row(0).to_vec()
}

/// Argmax node by value (lowest id on ties), or `Lost` below `v_loc`.
pub fn localize_values(values: &[f64], v_loc: f64) -> Localization {
    assert!(!values.is_empty(), "localization needs a non-empty map");
    let mut best = (0, values[0]);
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    if best.1 < v_loc {
        Localization::Lost { best_value: best.1 }
    } else {
        Localization::Node { id: best.0, value: best.1 }
    }
}

pub fn localize(z: &[f64], map: &TopoMap, iql: &IqlModels, v_loc: f64) -> Localization {
    localize_values(&node_values(z, map, iql), v_loc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Frontier {
    cost: f64,
    node: usize,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Minimum-cost node sequence from `start` to `goal`; empty when unreachable.
pub fn plan_route(map: &TopoMap, start: usize, goal: usize) -> Result<Vec<usize>> {
    let n = map.len();
    for id in [start, goal] {
        if id >= n {
            return Err(Error::UnknownNode(id));
        }
    }
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = BinaryHeap::new();
    dist[start] = 0.0;
    heap.push(Frontier { cost: 0.0, node: start });
    while let Some(Frontier { cost, node }) = heap.pop() {
        if node == goal {
            break;
        }
        if cost > dist[node] {
            continue;
        }
        for e in map.out_edges(node) {
            let c = cost + e.cost;
            if c < dist[e.to] {
                dist[e.to] = c;
                prev[e.to] = node;
                heap.push(Frontier { cost: c, node: e.to });
            }
        }
    }
    if !dist[goal].is_finite() {
        return Ok(Vec::new());
    }
    let mut route = vec![goal];
    let mut cur = goal;
    while cur != start {
        cur = prev[cur];
        route.push(cur);
    }
    route.reverse();
    Ok(route)
}

/// Sum of edge costs along a route; `None` if a hop is not an edge.
pub fn route_cost(map: &TopoMap, route: &[usize]) -> Option<f64> {
    route
        .windows(2)
        .try_fold(0.0, |acc, w| map.edge(w[0], w[1]).map(|e| acc + e.cost))
}
