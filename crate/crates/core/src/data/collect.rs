//! Behavior policies for offline data collection.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{reward, Dataset, DatasetMeta, Episode, Transition};
use crate::par;
use crate::sim::geometry::{dist, Point};
use crate::sim::scenario::heading;
use crate::sim::{observe, step, wrap_angle, Action, Pose, SimConfig, World};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PolicySpec {
    NoisyWaypointFollower,
    CollisionSeeker,
    /// Each episode is a collision-seeker run with the given probability.
    Mixed { collision_fraction: f64 },
}

impl PolicySpec {
    pub fn name(&self) -> String {
        match self {
            PolicySpec::NoisyWaypointFollower => "noisy-waypoint-follower".into(),
            PolicySpec::CollisionSeeker => "collision-seeker".into(),
            PolicySpec::Mixed { collision_fraction } => format!("mixed({collision_fraction})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CollectConfig {
    pub max_steps: usize,
    pub seeker_max_steps: usize,
    pub min_route: f64,
    pub max_route: f64,
    pub lateral_jitter: f64,
    pub lookahead: f64,
    pub heading_gain: f64,
    pub angular_noise: f64,
    pub speed_range: [f64; 2],
    pub look_around_prob: f64,
    pub illumination_jitter: f64,
    pub goal_tolerance: f64,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            max_steps: 220,
            seeker_max_steps: 60,
            min_route: 4.0,
            max_route: 30.0,
            lateral_jitter: 0.8,
            lookahead: 1.0,
            heading_gain: 2.0,
            angular_noise: 0.35,
            speed_range: [0.6, 1.0],
            look_around_prob: 0.02,
            illumination_jitter: 0.1,
            goal_tolerance: 0.5,
        }
    }
}

/// Deterministic per-episode generator keyed on (seed, episode index).
pub fn episode_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index + 1);
    rng
}

pub fn collect_episodes(
    world: &World,
    sim: &SimConfig,
    policy: PolicySpec,
    n_episodes: usize,
    seed: u64,
    cfg: &CollectConfig,
    scenario: &str,
) -> Dataset {
    assert!(n_episodes >= 1, "need at least one episode");
    let episodes = par::map_indexed(n_episodes, |i| {
        let mut rng = episode_rng(seed, i as u64);
        let seeker = match policy {
            PolicySpec::NoisyWaypointFollower => false,
            PolicySpec::CollisionSeeker => true,
            PolicySpec::Mixed { collision_fraction } => rng.random::<f64>() < collision_fraction,
        };
        let transitions = if seeker {
            collision_seeker(world, sim, cfg, &mut rng, i as u32)
        } else {
            waypoint_follower(world, sim, cfg, &mut rng, i as u32)
        };
        Episode {
            id: i as u32,
            transitions,
        }
    });
    Dataset {
        meta: DatasetMeta {
            rays: sim.rays,
            obs_dim: sim.obs_dim(),
            max_range: sim.max_range,
            scenario: scenario.to_string(),
            variant: world.variant.as_str().to_string(),
            policy: policy.name(),
            seed,
        },
        episodes,
    }
}

fn jittered_route<R: Rng>(world: &World, route: &[Point], jitter: f64, rng: &mut R) -> Vec<Point> {
    let mut out = Vec::with_capacity(route.len());
    for (i, p) in route.iter().enumerate() {
        if i == 0 || i + 1 == route.len() || jitter <= 0.0 {
            out.push(*p);
            continue;
        }
        let prev = route[i - 1];
        let h = heading(prev, *p) + std::f64::consts::FRAC_PI_2;
        let off = rng.random_range(-jitter..jitter);
        let q = [p[0] + off * h.cos(), p[1] + off * h.sin()];
        out.push(if world.is_clear(q, 0.7) { q } else { *p });
    }
    out
}

fn route_length(pts: &[Point]) -> f64 {
    pts.windows(2).map(|w| dist(w[0], w[1])).sum()
}

/// Point `ahead` meters along the route past the projection of `p`.
fn lookahead_point(route: &[Point], p: Point, ahead: f64, cursor: &mut usize) -> Point {
    // advance the cursor past segments already passed
    while *cursor + 1 < route.len() - 1 && dist(p, route[*cursor + 1]) < ahead {
        *cursor += 1;
    }
    let mut remaining = ahead;
    let mut from = p;
    for i in (*cursor + 1)..route.len() {
        let d = dist(from, route[i]);
        if d >= remaining {
            let t = remaining / d;
            return [from[0] + t * (route[i][0] - from[0]), from[1] + t * (route[i][1] - from[1])];
        }
        remaining -= d;
        from = route[i];
    }
    *route.last().unwrap()
}

struct Recorder<'a> {
    world: &'a World,
    sim: &'a SimConfig,
    illumination: f64,
    episode: u32,
    out: Vec<Transition>,
}

impl Recorder<'_> {
    fn obs(&self, pose: &Pose) -> crate::sim::Observation {
        let mut o = observe(pose, self.world, self.sim.rays, self.sim.max_range);
        o.illumination = self.illumination;
        o
    }

    /// Apply `action`, record the transition, and return the new pose plus
    /// whether the episode must stop.
    fn record(&mut self, pose: Pose, action: Action, goal: Option<(Point, f64)>, last: bool) -> (Pose, bool) {
        let action = action.clamped(self.sim);
        let obs = self.obs(&pose);
        let (next, collided) = step(&pose, &action, self.world, self.sim);
        let reached = !collided && goal.is_some_and(|(g, tol)| dist(next.position(), g) <= tol);
        let done = collided || reached || last;
        self.out.push(Transition {
            obs,
            action,
            reward: reward(reached, collided),
            next_obs: self.obs(&next),
            done,
            collided,
            pose,
            episode_id: self.episode,
            step_index: self.out.len() as u32,
        });
        (next, done)
    }
}

fn waypoint_follower<R: Rng>(world: &World, sim: &SimConfig, cfg: &CollectConfig, rng: &mut R, id: u32) -> Vec<Transition> {
    let rm = &world.roadmap;
    let route = loop {
        let (a, ea) = rm.sample_point(rng);
        let (b, eb) = rm.sample_point(rng);
        if !world.is_clear(a, 0.6) || !world.is_clear(b, 0.6) {
            continue;
        }
        let r = rm.route(a, ea, b, eb);
        let len = route_length(&r);
        if (cfg.min_route..=cfg.max_route).contains(&len) && r.len() >= 2 {
            break jittered_route(world, &r, cfg.lateral_jitter, rng);
        }
    };
    let goal = *route.last().unwrap();
    let noise = Normal::new(0.0, cfg.angular_noise).unwrap();
    let speed = rng.random_range(cfg.speed_range[0]..=cfg.speed_range[1]);
    let mut pose = Pose::new(
        route[0][0],
        route[0][1],
        heading(route[0], route[1]) + rng.random_range(-0.4..0.4),
    );
    let mut rec = Recorder {
        world,
        sim,
        illumination: world.illumination + rng.random_range(-cfg.illumination_jitter..=cfg.illumination_jitter),
        episode: id,
        out: Vec::new(),
    };
    let mut cursor = 0;
    let mut spin: (usize, f64) = (0, 0.0);
    for t in 0..cfg.max_steps {
        let last = t + 1 == cfg.max_steps;
        let action = if spin.0 > 0 {
            spin.0 -= 1;
            Action::new(0.0, spin.1)
        } else if rng.random::<f64>() < cfg.look_around_prob {
            let dir = if rng.random::<bool>() { 1.0 } else { -1.0 };
            spin = (rng.random_range(4..12), dir * rng.random_range(0.8..1.4));
            Action::new(0.0, spin.1)
        } else {
            let target = lookahead_point(&route, pose.position(), cfg.lookahead, &mut cursor);
            let err = wrap_angle(heading(pose.position(), target) - pose.theta);
            let w = cfg.heading_gain * err + noise.sample(rng);
            let v = speed * (0.3 + 0.7 * err.cos().max(0.0)) + rng.random_range(-0.05..0.05);
            Action::new(v, w)
        };
        let (next, done) = rec.record(pose, action, Some((goal, cfg.goal_tolerance)), last);
        pose = next;
        if done {
            break;
        }
    }
    rec.out
}

fn collision_seeker<R: Rng>(world: &World, sim: &SimConfig, cfg: &CollectConfig, rng: &mut R, id: u32) -> Vec<Transition> {
    'attempt: loop {
        let (a, _) = world.roadmap.sample_point(rng);
        if !world.is_clear(a, 0.6) {
            continue;
        }
        let mut pose = Pose::new(a[0], a[1], rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
        let speed = rng.random_range(cfg.speed_range[0]..=cfg.speed_range[1]);
        let mut rec = Recorder {
            world,
            sim,
            illumination: world.illumination + rng.random_range(-cfg.illumination_jitter..=cfg.illumination_jitter),
            episode: id,
            out: Vec::new(),
        };
        for t in 0..cfg.seeker_max_steps {
            let action = Action::new(speed, rng.random_range(-0.2..0.2));
            let last = t + 1 == cfg.seeker_max_steps;
            let (next, done) = rec.record(pose, action, None, last);
            if world.in_held_out(next.position()) {
                continue 'attempt;
            }
            pose = next;
            if done {
                break;
            }
        }
        if rec.out.last().is_some_and(|t| t.collided) {
            return rec.out;
        }
    }
}
