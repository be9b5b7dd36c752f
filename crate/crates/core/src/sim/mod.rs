//! Deterministic 2D world with unicycle dynamics and a forward raycast sensor.

pub mod geometry;
pub mod scenario;

use std::f64::consts::PI;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

pub use geometry::{Circle, Point, Rect, Segment};
pub use scenario::{reset_scenario, Registry, Roadmap, ScenarioSpec};

use geometry::{point_segment_distance, ray_circle, ray_segment, segment_segment_distance};

/// Horizontal field of view of the forward sensor.
pub const FOV_DEG: f64 = 69.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub v_max: f64,
    pub w_max: f64,
    pub rays: usize,
    pub max_range: f64,
    pub robot_radius: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.25,
            v_max: 1.0,
            w_max: 1.5,
            rays: 32,
            max_range: 12.0,
            robot_radius: 0.2,
        }
    }
}

impl SimConfig {
    /// Width of the model-facing feature vector: depths, textures, illumination.
    pub fn obs_dim(&self) -> usize {
        2 * self.rays + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Point {
        [self.x, self.y]
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        geometry::dist(self.position(), other.position())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Action {
    pub v: f64,
    pub w: f64,
}

impl Action {
    pub fn new(v: f64, w: f64) -> Self {
        Self { v, w }
    }

    pub fn clamped(&self, cfg: &SimConfig) -> Self {
        Self {
            v: self.v.clamp(-cfg.v_max, cfg.v_max),
            w: self.w.clamp(-cfg.w_max, cfg.w_max),
        }
    }
}

/// Wrap into (-π, π].
pub fn wrap_angle(theta: f64) -> f64 {
    let t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        PI
    } else {
        t
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Base,
    NovelObstacles,
    IlluminationShift,
}

impl Variant {
    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::NovelObstacles => "novel-obstacles",
            Variant::IlluminationShift => "illumination-shift",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Obstacle {
    Polygon { points: Vec<Point> },
    Circle { center: Point, radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub depths: Vec<f64>,
    pub surface_ids: Vec<u32>,
    pub illumination: f64,
}

impl Observation {
    pub fn rays(&self) -> usize {
        self.depths.len()
    }

    /// Model-facing features: normalized depths, texture brightness shifted by
    /// illumination, and the illumination scalar itself.
    pub fn features(&self, max_range: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(2 * self.rays() + 1);
        f.extend(self.depths.iter().map(|d| d.min(max_range) / max_range));
        f.extend(
            self.surface_ids
                .iter()
                .map(|&id| texture_value(id) + self.illumination),
        );
        f.push(self.illumination);
        f
    }
}

/// Tags at or above this carry an unstructured texture; ordinary walls vary
/// smoothly from one tile to the next.
pub const NOVEL_TAG_BASE: u32 = 1 << 20;

/// Deterministic brightness for a surface tag; tag 0 (no hit) is 0.
///
/// Ordinary tags follow a sum of three slow sinusoids with incommensurate
/// periods, so neighboring tiles look alike while distant walls do not.
/// The result lies in [-0.15, 1.15]. Novel tags hash into [1.3, 2.0), a band
/// ordinary surfaces never reach, so unfamiliar places look unfamiliar.
pub fn texture_value(tag: u32) -> f64 {
    if tag == 0 {
        return 0.0;
    }
    if tag < NOVEL_TAG_BASE {
        let t = tag as f64;
        return 0.5 + 0.25 * (0.11 * t).sin() + 0.2 * (0.033 * t + 1.3).sin() + 0.2 * (0.0091 * t + 0.4).sin();
    }
    let mut z = (tag as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    1.3 + 0.7 * ((z >> 11) as f64 / (1u64 << 53) as f64)
}

#[derive(Debug)]
pub struct World {
    pub bounds: Rect,
    pub unbounded: bool,
    pub obstacles: Vec<Obstacle>,
    pub segments: Vec<Segment>,
    pub circles: Vec<Circle>,
    pub variant: Variant,
    pub illumination: f64,
    /// Regions never visited by the data-collection policies.
    pub held_out: Vec<Rect>,
    pub roadmap: Roadmap,
    pub grid_cell: f64,
    grid: OnceLock<scenario::GeoGrid>,
}

impl Clone for World {
    fn clone(&self) -> Self {
        Self {
            bounds: self.bounds,
            unbounded: self.unbounded,
            obstacles: self.obstacles.clone(),
            segments: self.segments.clone(),
            circles: self.circles.clone(),
            variant: self.variant,
            illumination: self.illumination,
            held_out: self.held_out.clone(),
            roadmap: self.roadmap.clone(),
            grid_cell: self.grid_cell,
            grid: OnceLock::new(),
        }
    }
}

impl PartialEq for World {
    fn eq(&self, other: &Self) -> bool {
        self.bounds == other.bounds
            && self.unbounded == other.unbounded
            && self.obstacles == other.obstacles
            && self.segments == other.segments
            && self.circles == other.circles
            && self.variant == other.variant
            && self.illumination == other.illumination
            && self.held_out == other.held_out
            && self.roadmap == other.roadmap
    }
}

impl World {
    /// Build a world from declared obstacles; surfaces are tiled every `tile`
    /// meters so that each tile carries its own texture tag.
    pub fn new(bounds: Rect, obstacles: Vec<Obstacle>, tile: f64, first_tag: u32) -> Self {
        let mut next = first_tag.max(1);
        let mut segments = geometry::tile_polygon(&bounds.corners(), tile, &mut next);
        let mut circles = Vec::new();
        for o in &obstacles {
            match o {
                Obstacle::Polygon { points } => {
                    segments.extend(geometry::tile_polygon(points, tile, &mut next));
                }
                Obstacle::Circle { center, radius } => {
                    circles.push(Circle {
                        center: *center,
                        radius: *radius,
                        tag: next,
                    });
                    next += 1;
                }
            }
        }
        Self {
            bounds,
            unbounded: false,
            obstacles,
            segments,
            circles,
            variant: Variant::Base,
            illumination: 0.0,
            held_out: Vec::new(),
            roadmap: Roadmap::default(),
            grid_cell: 0.2,
            grid: OnceLock::new(),
        }
    }

    /// A world with no surfaces at all.
    pub fn empty_unbounded() -> Self {
        let mut w = Self::new(Rect::new(-1e6, -1e6, 1e6, 1e6), Vec::new(), 1e7, 1);
        w.segments.clear();
        w.unbounded = true;
        w
    }

    /// Add obstacles after construction. They get unstructured textures,
    /// tagged past every existing tag.
    pub fn add_obstacles(&mut self, extra: Vec<Obstacle>, tile: f64) {
        let mut next = self
            .segments
            .iter()
            .map(|s| s.tag)
            .chain(self.circles.iter().map(|c| c.tag))
            .max()
            .unwrap_or(0)
            .max(NOVEL_TAG_BASE)
            + 1;
        for o in &extra {
            match o {
                Obstacle::Polygon { points } => {
                    self.segments
                        .extend(geometry::tile_polygon(points, tile, &mut next));
                }
                Obstacle::Circle { center, radius } => {
                    self.circles.push(Circle {
                        center: *center,
                        radius: *radius,
                        tag: next,
                    });
                    next += 1;
                }
            }
        }
        self.obstacles.extend(extra);
        self.grid = OnceLock::new();
    }

    /// Distance from a point to the nearest surface.
    pub fn clearance(&self, p: Point) -> f64 {
        let s = self
            .segments
            .iter()
            .map(|s| point_segment_distance(p, s.a, s.b))
            .fold(f64::INFINITY, f64::min);
        let c = self
            .circles
            .iter()
            .map(|c| geometry::dist(p, c.center) - c.radius)
            .fold(f64::INFINITY, f64::min);
        s.min(c)
    }

    /// True when `p` lies inside bounds and outside every obstacle.
    pub fn is_free(&self, p: Point) -> bool {
        if !self.unbounded && !self.bounds.contains(p) {
            return false;
        }
        !self.obstacles.iter().any(|o| match o {
            Obstacle::Polygon { points } => geometry::point_in_polygon(p, points),
            Obstacle::Circle { center, radius } => geometry::dist(p, *center) <= *radius,
        })
    }

    /// Free with at least `margin` meters to every surface.
    pub fn is_clear(&self, p: Point, margin: f64) -> bool {
        self.is_free(p) && self.clearance(p) > margin
    }

    /// Give every surface bordering a held-out region an unstructured texture.
    pub fn retag_held_out(&mut self) {
        let near = |p: Point| {
            self.held_out
                .iter()
                .any(|r| Rect::new(r.min[0] - 0.05, r.min[1] - 0.05, r.max[0] + 0.05, r.max[1] + 0.05).contains(p))
        };
        let hit: Vec<bool> = self
            .segments
            .iter()
            .map(|s| near([(s.a[0] + s.b[0]) / 2.0, (s.a[1] + s.b[1]) / 2.0]))
            .collect();
        for (s, h) in self.segments.iter_mut().zip(hit) {
            if h && s.tag < NOVEL_TAG_BASE {
                s.tag += NOVEL_TAG_BASE;
            }
        }
        let hit: Vec<bool> = self.circles.iter().map(|c| near(c.center)).collect();
        for (c, h) in self.circles.iter_mut().zip(hit) {
            if h && c.tag < NOVEL_TAG_BASE {
                c.tag += NOVEL_TAG_BASE;
            }
        }
    }

    pub fn in_held_out(&self, p: Point) -> bool {
        self.held_out.iter().any(|r| r.contains(p))
    }

    fn sweep_hits(&self, a: Point, b: Point, radius: f64) -> bool {
        self.segments
            .iter()
            .any(|s| segment_segment_distance(a, b, s.a, s.b) < radius)
            || self
                .circles
                .iter()
                .any(|c| point_segment_distance(c.center, a, b) < c.radius + radius)
    }

    /// Shortest collision-free path length between two points (grid Dijkstra
    /// with `clearance` meters of margin), or `None` when disconnected.
    pub fn geodesic(&self, a: Point, b: Point, clearance: f64) -> Option<f64> {
        let grid = self
            .grid
            .get_or_init(|| scenario::GeoGrid::build(self, self.grid_cell, clearance));
        grid.distance(a, b)
    }
}

/// Advance one control period. Motion is cancelled when the swept segment
/// would bring the robot within its radius of a surface.
pub fn step(pose: &Pose, action: &Action, world: &World, cfg: &SimConfig) -> (Pose, bool) {
    assert!(cfg.dt > 0.0, "dt must be positive");
    let a = action.clamped(cfg);
    let nx = pose.x + a.v * pose.theta.cos() * cfg.dt;
    let ny = pose.y + a.v * pose.theta.sin() * cfg.dt;
    let nt = wrap_angle(pose.theta + a.w * cfg.dt);
    let moved = (nx - pose.x).abs() > 0.0 || (ny - pose.y).abs() > 0.0;
    if moved
        && (self_exits(world, [nx, ny]) || world.sweep_hits(pose.position(), [nx, ny], cfg.robot_radius))
    {
        return (*pose, true);
    }
    (Pose { x: nx, y: ny, theta: nt }, false)
}

fn self_exits(world: &World, p: Point) -> bool {
    !world.is_free(p)
}

/// Cast `rays` rays spread over the field of view. Ray k points at
/// `θ + FOV·(k/(R−1) − 1/2)`.
pub fn observe(pose: &Pose, world: &World, rays: usize, max_range: f64) -> Observation {
    assert!(rays >= 3, "need at least three rays");
    let fov = FOV_DEG.to_radians();
    let mut depths = Vec::with_capacity(rays);
    let mut ids = Vec::with_capacity(rays);
    let origin = pose.position();
    for k in 0..rays {
        let bearing = pose.theta + fov * (k as f64 / (rays - 1) as f64 - 0.5);
        let dir = [bearing.cos(), bearing.sin()];
        let mut best = max_range;
        let mut tag = 0;
        for s in &world.segments {
            if let Some(t) = ray_segment(origin, dir, s) {
                if t < best {
                    best = t;
                    tag = s.tag;
                }
            }
        }
        for c in &world.circles {
            if let Some(t) = ray_circle(origin, dir, c) {
                if t < best {
                    best = t;
                    tag = c.tag;
                }
            }
        }
        depths.push(best.max(1e-6));
        ids.push(tag);
    }
    Observation {
        depths,
        surface_ids: ids,
        illumination: world.illumination,
    }
}
