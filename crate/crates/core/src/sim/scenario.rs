//! Scenario registry: world layouts, difficulty bands and seeded start/goal
//! sampling. The registry is plain TOML; a default copy is compiled in.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::geometry::{dist, Point, Rect};
use super::{Obstacle, Pose, Variant, World};
use crate::error::{Error, Result};

pub const DEFAULT_REGISTRY: &str = include_str!("../../assets/scenarios.toml");

/// Undirected waypoint graph along the drivable corridors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Roadmap {
    pub nodes: Vec<Point>,
    pub edges: Vec<[usize; 2]>,
}

impl Roadmap {
    fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter_map(move |&[a, b]| {
            if a == i {
                Some(b)
            } else if b == i {
                Some(a)
            } else {
                None
            }
        })
    }

    /// Node sequence of the shortest roadmap path from `from` to `to`.
    pub fn path(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut best = vec![f64::INFINITY; n];
        let mut prev = vec![usize::MAX; n];
        let mut heap = BinaryHeap::new();
        best[from] = 0.0;
        heap.push(HeapItem(0.0, from));
        while let Some(HeapItem(d, u)) = heap.pop() {
            if d > best[u] {
                continue;
            }
            if u == to {
                break;
            }
            for v in self.neighbors(u) {
                let nd = d + dist(self.nodes[u], self.nodes[v]);
                if nd < best[v] {
                    best[v] = nd;
                    prev[v] = u;
                    heap.push(HeapItem(nd, v));
                }
            }
        }
        if !best[to].is_finite() {
            return None;
        }
        let mut out = vec![to];
        while *out.last().unwrap() != from {
            out.push(prev[*out.last().unwrap()]);
        }
        out.reverse();
        Some(out)
    }

    /// Uniformly random point on a random edge, returned with the edge.
    pub fn sample_point<R: Rng>(&self, rng: &mut R) -> (Point, [usize; 2]) {
        let e = self.edges[rng.random_range(0..self.edges.len())];
        let t: f64 = rng.random();
        let (a, b) = (self.nodes[e[0]], self.nodes[e[1]]);
        ([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])], e)
    }

    /// Point sequence from `start` (on edge `se`) to `goal` (on edge `ge`).
    pub fn route(&self, start: Point, se: [usize; 2], goal: Point, ge: [usize; 2]) -> Vec<Point> {
        if se == ge || se == [ge[1], ge[0]] {
            return vec![start, goal];
        }
        let mut best: Option<(f64, Vec<usize>)> = None;
        for &a in &se {
            for &b in &ge {
                if let Some(p) = self.path(a, b) {
                    let len = dist(start, self.nodes[a])
                        + p.windows(2)
                            .map(|w| dist(self.nodes[w[0]], self.nodes[w[1]]))
                            .sum::<f64>()
                        + dist(self.nodes[b], goal);
                    if best.as_ref().is_none_or(|(l, _)| len < *l) {
                        best = Some((len, p));
                    }
                }
            }
        }
        let mut pts = vec![start];
        if let Some((_, p)) = best {
            pts.extend(p.iter().map(|&i| self.nodes[i]));
        }
        pts.push(goal);
        pts.dedup_by(|a, b| dist(*a, *b) < 1e-9);
        pts
    }
}

#[derive(PartialEq)]
struct HeapItem(f64, usize);

impl Eq for HeapItem {}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .partial_cmp(&self.0)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.1.cmp(&self.1))
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct LayoutSpec {
    pub name: String,
    pub bounds: [f64; 4],
    #[serde(default = "default_tile")]
    pub tile: f64,
    #[serde(default)]
    pub walls: Vec<Vec<Point>>,
    #[serde(default)]
    pub pillars: Vec<[f64; 3]>,
    #[serde(default)]
    pub held_out: Vec<[f64; 4]>,
    #[serde(default)]
    pub novel_walls: Vec<Vec<Point>>,
    #[serde(default)]
    pub novel_pillars: Vec<[f64; 3]>,
    #[serde(default)]
    pub roadmap_nodes: Vec<Point>,
    #[serde(default)]
    pub roadmap_edges: Vec<[usize; 2]>,
}

fn default_tile() -> f64 {
    0.25
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct ScenarioSpec {
    pub id: String,
    pub layout: String,
    pub variant: Variant,
    /// Geodesic start–goal distance band in meters.
    pub band: [f64; 2],
    #[serde(default)]
    pub difficulty: String,
    #[serde(default)]
    pub illumination: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
pub struct Registry {
    #[serde(default = "default_clearance")]
    pub clearance: f64,
    pub layouts: Vec<LayoutSpec>,
    pub scenarios: Vec<ScenarioSpec>,
}

fn default_clearance() -> f64 {
    0.5
}

fn rect(b: &[f64; 4]) -> Rect {
    Rect::new(b[0], b[1], b[2], b[3])
}

fn polys(ws: &[Vec<Point>]) -> impl Iterator<Item = Obstacle> + '_ {
    ws.iter().map(|p| Obstacle::Polygon { points: p.clone() })
}

fn circles(ps: &[[f64; 3]]) -> impl Iterator<Item = Obstacle> + '_ {
    ps.iter().map(|c| Obstacle::Circle {
        center: [c[0], c[1]],
        radius: c[2],
    })
}

impl Registry {
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_REGISTRY).expect("bundled scenario registry parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let reg: Registry = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for s in &reg.scenarios {
            if !reg.layouts.iter().any(|l| l.name == s.layout) {
                return Err(Error::Config(format!(
                    "scenario {} references unknown layout {}",
                    s.id, s.layout
                )));
            }
        }
        for l in &reg.layouts {
            let b = rect(&l.bounds);
            for w in l.walls.iter().chain(&l.novel_walls) {
                if !w.iter().all(|p| b.contains(*p)) {
                    return Err(Error::Config(format!("layout {}: wall outside bounds", l.name)));
                }
            }
        }
        Ok(reg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn scenario(&self, id: &str) -> Result<&ScenarioSpec> {
        self.scenarios
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| Error::UnknownScenario(id.to_string()))
    }

    pub fn layout(&self, name: &str) -> Result<&LayoutSpec> {
        self.layouts
            .iter()
            .find(|l| l.name == name)
            .ok_or_else(|| Error::Config(format!("unknown layout {name}")))
    }

    /// The world of a scenario, independent of any seed.
    pub fn world(&self, id: &str) -> Result<World> {
        let s = self.scenario(id)?;
        let l = self.layout(&s.layout)?;
        let obstacles = polys(&l.walls).chain(circles(&l.pillars)).collect();
        let mut w = World::new(rect(&l.bounds), obstacles, l.tile, 1);
        w.held_out = l.held_out.iter().map(rect).collect();
        w.retag_held_out();
        w.roadmap = Roadmap {
            nodes: l.roadmap_nodes.clone(),
            edges: l.roadmap_edges.clone(),
        };
        w.variant = s.variant;
        w.illumination = s.illumination;
        if s.variant == Variant::NovelObstacles {
            let extra = polys(&l.novel_walls).chain(circles(&l.novel_pillars)).collect();
            w.add_obstacles(extra, l.tile);
        }
        Ok(w)
    }

    /// Seeded world, start and goal whose geodesic distance lies in the band.
    pub fn reset(&self, id: &str, seed: u64) -> Result<(World, Pose, Pose)> {
        let spec = self.scenario(id)?;
        let world = self.world(id)?;
        if world.roadmap.edges.is_empty() {
            return Err(Error::Config(format!("scenario {id} has no roadmap")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5CA1_AB1E);
        let [lo, hi] = spec.band;
        for _ in 0..10_000 {
            let (a, ea) = world.roadmap.sample_point(&mut rng);
            let (b, eb) = world.roadmap.sample_point(&mut rng);
            if !world.is_clear(a, self.clearance) || !world.is_clear(b, self.clearance) {
                continue;
            }
            let Some(d) = world.geodesic(a, b, self.clearance) else {
                continue;
            };
            if d < lo || d > hi {
                continue;
            }
            let route = world.roadmap.route(a, ea, b, eb);
            let n = route.len();
            let h0 = heading(route[0], route[1]);
            let h1 = heading(route[n - 2], route[n - 1]);
            return Ok((world, Pose::new(a[0], a[1], h0), Pose::new(b[0], b[1], h1)));
        }
        Err(Error::Config(format!(
            "could not sample a start/goal pair for {id} within band [{lo}, {hi}]"
        )))
    }
}

pub fn heading(a: Point, b: Point) -> f64 {
    (b[1] - a[1]).atan2(b[0] - a[0])
}

/// Seeded scenario reset against the bundled registry.
pub fn reset_scenario(id: &str, seed: u64) -> Result<(World, Pose, Pose)> {
    Registry::builtin().reset(id, seed)
}

/// Occupancy grid for geodesic distances.
#[derive(Debug)]
pub(crate) struct GeoGrid {
    origin: Point,
    cell: f64,
    cols: usize,
    rows: usize,
    free: Vec<bool>,
}

impl GeoGrid {
    pub(crate) fn build(world: &World, cell: f64, clearance: f64) -> Self {
        let b = world.bounds;
        let cols = (b.width() / cell).ceil() as usize;
        let rows = (b.height() / cell).ceil() as usize;
        let mut free = vec![false; cols * rows];
        for r in 0..rows {
            for c in 0..cols {
                let p = [b.min[0] + (c as f64 + 0.5) * cell, b.min[1] + (r as f64 + 0.5) * cell];
                free[r * cols + c] = world.is_clear(p, clearance);
            }
        }
        Self {
            origin: b.min,
            cell,
            cols,
            rows,
            free,
        }
    }

    fn center(&self, i: usize) -> Point {
        let (r, c) = (i / self.cols, i % self.cols);
        [
            self.origin[0] + (c as f64 + 0.5) * self.cell,
            self.origin[1] + (r as f64 + 0.5) * self.cell,
        ]
    }

    fn snap(&self, p: Point) -> Option<usize> {
        let c = ((p[0] - self.origin[0]) / self.cell).floor() as i64;
        let r = ((p[1] - self.origin[1]) / self.cell).floor() as i64;
        let mut best: Option<(f64, usize)> = None;
        for dr in -3..=3 {
            for dc in -3..=3 {
                let (rr, cc) = (r + dr, c + dc);
                if rr < 0 || cc < 0 || rr >= self.rows as i64 || cc >= self.cols as i64 {
                    continue;
                }
                let i = rr as usize * self.cols + cc as usize;
                if self.free[i] {
                    let d = dist(p, self.center(i));
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, i));
                    }
                }
            }
        }
        best.map(|(_, i)| i)
    }

    pub(crate) fn distance(&self, a: Point, b: Point) -> Option<f64> {
        let (s, t) = (self.snap(a)?, self.snap(b)?);
        let mut best = vec![f64::INFINITY; self.free.len()];
        let mut heap = BinaryHeap::new();
        best[s] = 0.0;
        heap.push(HeapItem(0.0, s));
        let diag = std::f64::consts::SQRT_2 * self.cell;
        while let Some(HeapItem(d, u)) = heap.pop() {
            if u == t {
                return Some(d + dist(a, self.center(s)) + dist(b, self.center(t)));
            }
            if d > best[u] {
                continue;
            }
            let (r, c) = ((u / self.cols) as i64, (u % self.cols) as i64);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r + dr, c + dc);
                    if rr < 0 || cc < 0 || rr >= self.rows as i64 || cc >= self.cols as i64 {
                        continue;
                    }
                    let v = rr as usize * self.cols + cc as usize;
                    if !self.free[v] {
                        continue;
                    }
                    if dr != 0 && dc != 0 {
                        // no corner cutting
                        let s1 = r as usize * self.cols + cc as usize;
                        let s2 = rr as usize * self.cols + c as usize;
                        if !self.free[s1] || !self.free[s2] {
                            continue;
                        }
                    }
                    let step = if dr != 0 && dc != 0 { diag } else { self.cell };
                    let nd = d + step;
                    if nd < best[v] {
                        best[v] = nd;
                        heap.push(HeapItem(nd, v));
                    }
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_registry_parses() {
        let r = Registry::builtin();
        assert!(r.scenario("corridor-easy").is_ok());
        assert!(matches!(r.scenario("nope"), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn reset_is_seed_deterministic() {
        let (w1, s1, g1) = reset_scenario("corridor-easy", 7).unwrap();
        let (w2, s2, g2) = reset_scenario("corridor-easy", 7).unwrap();
        assert_eq!(w1, w2);
        assert_eq!((s1, g1), (s2, g2));
    }

    #[test]
    fn roadmap_path_follows_chain() {
        let rm = Roadmap {
            nodes: vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]],
            edges: vec![[0, 1], [1, 2]],
        };
        assert_eq!(rm.path(0, 2), Some(vec![0, 1, 2]));
        assert_eq!(rm.path(2, 2), Some(vec![2]));
    }

    #[test]
    fn malformed_registry_rejected() {
        let bad = r#"
            [[layouts]]
            name = "a"
            bounds = [0.0, 0.0, 1.0, 1.0]
            [[scenarios]]
            id = "x"
            layout = "b"
            variant = "base"
            band = [0.0, 1.0]
        "#;
        assert!(matches!(Registry::parse(bad), Err(Error::Config(_))));
    }
}
