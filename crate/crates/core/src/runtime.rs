//! Deployment loop and evaluation harness.
//!
//! Every control step encodes the observation, localizes it on the map and
//! either follows the route toward the goal's node or, when lost, plans a
//! short anti-novelty recovery and executes its first step.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{Ablation, RunConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::recovery::{recover_step, PlannerModels};
use crate::sim::scenario::Registry;
use crate::sim::{observe, step, wrap_angle, Action, Observation, Pose, World};
use crate::topo_map::{localize, plan_route, Localization, TopoMap};
use crate::train::Models;

pub const METRICS_SCHEMA: u32 = 1;
pub const METRICS_HEADER: &str =
    "suite,scenario,difficulty,variant,ablation,trials,success_rate,mean_dist_until_intervention,mean_recovery_invocations";

/// One navigation trial. `goal = None` asks only to relocalize.
#[derive(Debug, Clone)]
pub struct Task {
    pub scenario: String,
    pub difficulty: String,
    pub world: World,
    pub start: Pose,
    pub goal: Option<Pose>,
    /// Standard deviation of angular-velocity noise added to every command.
    pub drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub scenario_id: String,
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    pub distance_traveled: f64,
    pub distance_until_intervention: f64,
    pub interventions: usize,
    pub recovery_invocations: usize,
    pub final_value: f64,
    /// Novelty when the episode started and when it ended.
    pub novelty_start: f64,
    pub novelty_end: f64,
    pub final_pose: Pose,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub novelty: f64,
    pub localize_value: f64,
    /// Cost of the executed plan; absent while localized.
    pub cost: Option<f64>,
}

/// Models, map and settings for one deployment variant.
pub struct Agent<'a> {
    pub models: &'a Models,
    pub map: &'a TopoMap,
    pub cfg: &'a RunConfig,
    pub ablation: Ablation,
}

/// Latents spaced `stride` frames apart ending at the newest, oldest first.
pub fn strided_history(buf: &[Vec<f64>], stride: usize, len: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = buf.iter().rev().step_by(stride.max(1)).take(len).cloned().collect();
    out.reverse();
    out
}

impl<'a> Agent<'a> {
    pub fn new(models: &'a Models, map: &'a TopoMap, cfg: &'a RunConfig, ablation: Ablation) -> Result<Self> {
        ablation.validate()?;
        if map.meta.checkpoint_hash != models.hash {
            return Err(Error::HashMismatch {
                what: "map vs checkpoint".into(),
                expected: models.hash.clone(),
                found: map.meta.checkpoint_hash.clone(),
            });
        }
        if map.is_empty() {
            return Err(Error::Empty("map has no nodes".into()));
        }
        Ok(Self {
            models,
            map,
            cfg,
            ablation,
        })
    }

    fn planner(&self) -> PlannerModels<'_> {
        PlannerModels {
            affordance: if self.ablation.use_rnn {
                &self.models.affordance
            } else {
                &self.models.affordance_flat
            },
            iql: &self.models.iql,
            rnd: self.ablation.use_rnd.then_some(&self.models.rnd),
            step_dt: self.cfg.plan_step_dt(),
        }
    }

    fn encode(&self, obs: &Observation) -> Result<Vec<f64>> {
        if obs.rays() != self.cfg.sim.rays {
            return Err(Error::DimMismatch {
                what: "observation rays".into(),
                expected: self.cfg.sim.rays,
                found: obs.rays(),
            });
        }
        self.models.encoder.encode(obs)
    }

    /// Next latent to steer toward while localized at `node`. The route is
    /// kept between steps and only replanned when its waypoint looks out of reach.
    fn waypoint(
        &self,
        z: &[f64],
        node: usize,
        goal_node: Option<usize>,
        z_goal: &[f64],
        route: &mut Option<(Vec<usize>, usize)>,
    ) -> Result<Vec<f64>> {
        let rt = &self.cfg.runtime;
        let iql = &self.models.iql;
        if iql.value(z, z_goal) >= rt.goal_value {
            return Ok(z_goal.to_vec());
        }
        let Some(g) = goal_node else {
            return Ok(z_goal.to_vec());
        };
        let v = |i: usize| iql.value(z, &self.map.nodes[i].z);
        let stale = match route {
            Some((r, k)) => r.len() < 2 || !r[*k..].contains(&node) && v(r[*k]) < self.cfg.map.edge_threshold,
            None => true,
        };
        if stale {
            *route = Some((plan_route(self.map, node, g)?, 0));
        }
        let (r, k) = route.as_mut().expect("route planned above");
        if r.len() < 2 {
            return Ok(z_goal.to_vec());
        }
        if let Some(j) = r[*k..].iter().position(|&i| i == node) {
            *k += j + 1;
        }
        while *k + 1 < r.len() && v(r[*k]) >= rt.v_adv {
            *k += 1;
        }
        *k = (*k).min(r.len() - 1);
        Ok(self.map.nodes[r[*k]].z.clone())
    }

    pub fn navigate(&self, task: &Task, seed: u64, mut trace: Option<&mut Vec<TraceRow>>) -> Result<EpisodeResult> {
        let cfg = self.cfg;
        let rt = &cfg.runtime;
        let sim = &cfg.sim;
        let obs_at = |p: &Pose| observe(p, &task.world, sim.rays, sim.max_range);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(11);
        let z_goal = match &task.goal {
            Some(g) => Some(self.encode(&obs_at(g))?),
            None => None,
        };
        let goal_node = match &z_goal {
            Some(zg) => match localize(zg, self.map, &self.models.iql, rt.v_loc) {
                Localization::Node { id, .. } => Some(id),
                Localization::Lost { .. } => None,
            },
            None => None,
        };

        let mut pose = task.start;
        let mut buf: Vec<Vec<f64>> = Vec::new();
        let keep = cfg.affordance.stride * cfg.affordance.history + 1;
        let mut res = EpisodeResult {
            scenario_id: task.scenario.clone(),
            seed,
            success: false,
            steps: 0,
            distance_traveled: 0.0,
            distance_until_intervention: 0.0,
            interventions: 0,
            recovery_invocations: 0,
            final_value: f64::NEG_INFINITY,
            novelty_start: 0.0,
            novelty_end: 0.0,
            final_pose: pose,
        };
        let mut lost_run = 0usize;
        let mut route = None;
        let mut intervened = false;
        for t in 0..=rt.step_budget {
            let z = self.encode(&obs_at(&pose))?;
            let novelty = self.models.rnd.score(&z);
            if t == 0 {
                res.novelty_start = novelty;
            }
            res.novelty_end = novelty;
            buf.push(z.clone());
            if buf.len() > keep {
                buf.remove(0);
            }
            let loc = localize(&z, self.map, &self.models.iql, rt.v_loc);
            res.final_value = loc.value();
            if let Some(goal) = &task.goal {
                if pose.distance(goal) <= rt.goal_radius {
                    res.success = true;
                    break;
                }
            } else if !loc.is_lost() {
                res.success = true;
                break;
            }
            if t == rt.step_budget {
                intervened = true;
                break;
            }
            let (action, cost) = match loc {
                Localization::Lost { .. } => {
                    if !self.ablation.use_affordance || lost_run >= rt.recovery_budget {
                        intervened = true;
                        break;
                    }
                    if lost_run == 0 {
                        res.recovery_invocations += 1;
                        route = None;
                    }
                    lost_run += 1;
                    let history = strided_history(&buf, cfg.affordance.stride, cfg.affordance.history);
                    let d = recover_step(
                        &z,
                        &history,
                        loc,
                        z_goal.as_deref(),
                        &self.planner(),
                        &cfg.recovery,
                        seed ^ (t as u64).wrapping_mul(0x9E37_79B9),
                    );
                    (d.action, Some(d.plan.cost))
                }
                Localization::Node { id, .. } => {
                    lost_run = 0;
                    let target = self.waypoint(&z, id, goal_node, z_goal.as_deref().unwrap_or(&z), &mut route)?;
                    (self.models.iql.act(&z, &target), None)
                }
            };
            if let Some(tr) = trace.as_deref_mut() {
                tr.push(TraceRow {
                    step: t,
                    novelty,
                    localize_value: loc.value(),
                    cost,
                });
            }
            let mut a = action;
            if task.drift > 0.0 {
                let e: f64 = rng.sample(StandardNormal);
                a = Action::new(a.v, a.w + task.drift * e);
            }
            let (next, collided) = step(&pose, &a, &task.world, sim);
            res.distance_traveled += pose.distance(&next);
            pose = next;
            res.steps += 1;
            if collided {
                intervened = true;
                break;
            }
        }
        res.final_pose = pose;
        res.distance_until_intervention = res.distance_traveled;
        if intervened {
            res.interventions = 1;
            res.success = false;
        }
        Ok(res)
    }
}

/// The four failure classes injected by the `fig1-cases` suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fig1Case {
    Deviation,
    CollisionRisk,
    NovelObstacles,
    UnknownStart,
}

impl Fig1Case {
    pub const ALL: [Fig1Case; 4] = [
        Fig1Case::Deviation,
        Fig1Case::CollisionRisk,
        Fig1Case::NovelObstacles,
        Fig1Case::UnknownStart,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            Fig1Case::Deviation => "a-deviation",
            Fig1Case::CollisionRisk => "b-collision-risk",
            Fig1Case::NovelObstacles => "c-novel-obstacles",
            Fig1Case::UnknownStart => "d-unknown-start",
        }
    }
}

pub fn scenario_task(reg: &Registry, id: &str, seed: u64) -> Result<Task> {
    let spec = reg.scenario(id)?;
    let (world, start, goal) = reg.reset(id, seed)?;
    Ok(Task {
        scenario: id.to_string(),
        difficulty: spec.difficulty.clone(),
        world,
        start,
        goal: Some(goal),
        drift: 0.0,
    })
}

/// Free pose in a held-out region with a random heading.
pub fn unmapped_start(world: &World, seed: u64, margin: f64) -> Result<Pose> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xD0_5EED);
    let regions = &world.held_out;
    if regions.is_empty() {
        return Err(Error::Config("world has no held-out region".into()));
    }
    for _ in 0..10_000 {
        let r = regions[rng.random_range(0..regions.len())];
        let p = [
            rng.random_range(r.min[0]..r.max[0]),
            rng.random_range(r.min[1]..r.max[1]),
        ];
        if world.is_clear(p, margin) {
            let th = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            return Ok(Pose::new(p[0], p[1], th));
        }
    }
    Err(Error::Config("no free pose in held-out region".into()))
}

/// Move `start` sideways toward the closer wall and turn it partly toward it.
fn near_obstacle(world: &World, start: Pose, seed: u64, clearance: f64) -> Pose {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB0_0B);
    let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let dir = start.theta + side * std::f64::consts::FRAC_PI_2;
    let mut best = start;
    let mut s = 0.0;
    while s < 3.0 {
        s += 0.05;
        let p = [start.x + s * dir.cos(), start.y + s * dir.sin()];
        if !world.is_clear(p, clearance) {
            break;
        }
        best = Pose::new(p[0], p[1], start.theta);
    }
    let turn = side * rng.random_range(0.3..0.8);
    Pose::new(best.x, best.y, wrap_angle(start.theta + turn))
}

pub fn fig1_task(reg: &Registry, case: Fig1Case, seed: u64, cfg: &RunConfig) -> Result<Task> {
    let mut task = match case {
        Fig1Case::NovelObstacles => scenario_task(reg, "corridor-novel", seed)?,
        _ => scenario_task(reg, "corridor-easy", seed)?,
    };
    task.scenario = format!("fig1-{}", case.label());
    match case {
        Fig1Case::Deviation => task.drift = cfg.runtime.drift_noise,
        Fig1Case::CollisionRisk => {
            task.start = near_obstacle(&task.world, task.start, seed, cfg.sim.robot_radius + 0.15);
        }
        Fig1Case::NovelObstacles => {}
        Fig1Case::UnknownStart => {
            task.start = unmapped_start(&task.world, seed, 0.5)?;
            task.goal = None;
        }
    }
    Ok(task)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub suite: String,
    pub scenario: String,
    pub difficulty: String,
    pub variant: String,
    pub ablation: String,
    pub trials: usize,
    pub success_rate: f64,
    pub mean_dist_until_intervention: f64,
    pub mean_recovery_invocations: f64,
}

impl CellMetrics {
    pub fn from_results(suite: &str, task: &Task, ablation: Ablation, results: &[EpisodeResult]) -> Self {
        let n = results.len().max(1) as f64;
        Self {
            suite: suite.into(),
            scenario: task.scenario.clone(),
            difficulty: task.difficulty.clone(),
            variant: task.world.variant.as_str().into(),
            ablation: ablation.label().into(),
            trials: results.len(),
            success_rate: results.iter().filter(|r| r.success).count() as f64 / n,
            mean_dist_until_intervention: results.iter().map(|r| r.distance_until_intervention).sum::<f64>() / n,
            mean_recovery_invocations: results.iter().map(|r| r.recovery_invocations as f64).sum::<f64>() / n,
        }
    }
}

pub fn metrics_csv(rows: &[CellMetrics]) -> String {
    let mut s = format!("# schema {METRICS_SCHEMA}\n{METRICS_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.4},{:.4},{:.4}",
            r.suite,
            r.scenario,
            r.difficulty,
            r.variant,
            r.ablation,
            r.trials,
            r.success_rate,
            r.mean_dist_until_intervention,
            r.mean_recovery_invocations
        );
    }
    s
}

pub fn write_metrics(rows: &[CellMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, metrics_csv(rows)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Table1,
    Table2,
    Fig1,
}

impl Suite {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "table1-analog" => Ok(Suite::Table1),
            "table2-analog" => Ok(Suite::Table2),
            "fig1-cases" => Ok(Suite::Fig1),
            _ => Err(Error::Config(format!(
                "unknown suite {s}; expected table1-analog, table2-analog or fig1-cases"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Suite::Table1 => "table1-analog",
            Suite::Table2 => "table2-analog",
            Suite::Fig1 => "fig1-cases",
        }
    }
}

pub const TABLE1_SCENARIOS: [&str; 5] = [
    "corridor-easy",
    "corridor-medium",
    "corridor-hard",
    "corridor-novel",
    "corridor-illum",
];

pub const TABLE2_ABLATIONS: [Ablation; 5] = [
    Ablation::FULL,
    Ablation::NO_RND,
    Ablation::NO_RNN,
    Ablation::NO_RNN_NO_RND,
    Ablation::NO_AFFORDANCE,
];

/// Seed of trial `i` in cell `cell`, independent of evaluation order.
pub fn trial_seed(seed: u64, cell: u64, i: u64) -> u64 {
    seed.wrapping_mul(1_000_003)
        .wrapping_add(cell.wrapping_mul(10_007))
        .wrapping_add(i)
}

/// Run `trials` tasks per ablation and return all results, trial-major.
pub fn run_trials(
    models: &Models,
    map: &TopoMap,
    cfg: &RunConfig,
    ablations: &[Ablation],
    tasks: &[Task],
    seeds: &[u64],
) -> Result<Vec<Vec<EpisodeResult>>> {
    let agents = ablations
        .iter()
        .map(|&a| Agent::new(models, map, cfg, a))
        .collect::<Result<Vec<_>>>()?;
    let jobs: Vec<(usize, usize)> = (0..agents.len()).flat_map(|a| (0..tasks.len()).map(move |t| (a, t))).collect();
    let out = par::map(&jobs, |&(a, t)| agents[a].navigate(&tasks[t], seeds[t], None));
    let mut grouped = vec![Vec::with_capacity(tasks.len()); agents.len()];
    for ((a, _), r) in jobs.iter().zip(out) {
        grouped[*a].push(r?);
    }
    Ok(grouped)
}

/// Tasks of the mixed fig1 suite: trials cycle through cases (a)–(d).
pub fn fig1_mix(reg: &Registry, trials: usize, seed: u64, cfg: &RunConfig) -> Result<(Vec<Task>, Vec<u64>)> {
    let mut tasks = Vec::with_capacity(trials);
    let mut seeds = Vec::with_capacity(trials);
    for i in 0..trials {
        let case = Fig1Case::ALL[i % 4];
        let s = trial_seed(seed, 100, i as u64);
        tasks.push(fig1_task(reg, case, s, cfg)?);
        seeds.push(s);
    }
    Ok((tasks, seeds))
}

pub fn run_evaluation(
    suite: Suite,
    trials: usize,
    seed: u64,
    models: &Models,
    map: &TopoMap,
    cfg: &RunConfig,
    reg: &Registry,
) -> Result<Vec<CellMetrics>> {
    if trials == 0 {
        return Err(Error::Config("trials must be >= 1".into()));
    }
    let mut rows = Vec::new();
    let cells: Vec<(Vec<Task>, Vec<u64>, Vec<Ablation>)> = match suite {
        Suite::Table1 => TABLE1_SCENARIOS
            .iter()
            .enumerate()
            .map(|(c, id)| {
                let seeds: Vec<u64> = (0..trials).map(|i| trial_seed(seed, c as u64, i as u64)).collect();
                let tasks = seeds.iter().map(|&s| scenario_task(reg, id, s)).collect::<Result<Vec<_>>>()?;
                Ok((tasks, seeds, vec![Ablation::FULL, Ablation::NO_AFFORDANCE]))
            })
            .collect::<Result<_>>()?,
        Suite::Fig1 => Fig1Case::ALL
            .iter()
            .enumerate()
            .map(|(c, &case)| {
                let seeds: Vec<u64> = (0..trials).map(|i| trial_seed(seed, 50 + c as u64, i as u64)).collect();
                let tasks = seeds.iter().map(|&s| fig1_task(reg, case, s, cfg)).collect::<Result<Vec<_>>>()?;
                Ok((tasks, seeds, vec![Ablation::FULL, Ablation::NO_AFFORDANCE]))
            })
            .collect::<Result<_>>()?,
        Suite::Table2 => {
            let (tasks, seeds) = fig1_mix(reg, trials, seed, cfg)?;
            vec![(tasks, seeds, TABLE2_ABLATIONS.to_vec())]
        }
    };
    for (tasks, seeds, ablations) in &cells {
        let results = run_trials(models, map, cfg, ablations, tasks, seeds)?;
        for (a, r) in ablations.iter().zip(&results) {
            let mut m = CellMetrics::from_results(suite.id(), &tasks[0], *a, r);
            if suite == Suite::Table2 {
                m.scenario = "fig1-mix".into();
                m.difficulty = "mixed".into();
                m.variant = "mixed".into();
            }
            rows.push(m);
        }
    }
    Ok(rows)
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from("step,novelty,localize_value,chosen_cost\n");
    for r in rows {
        let cost = r.cost.map(|c| format!("{c:.6}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.6},{:.6},{}", r.step, r.novelty, r.localize_value, cost);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strided_history_takes_every_stride() {
        let buf: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let h = strided_history(&buf, 3, 3);
        assert_eq!(h, vec![vec![3.0], vec![6.0], vec![9.0]]);
        assert_eq!(strided_history(&buf[..1], 3, 8), vec![vec![0.0]]);
    }

    #[test]
    fn suite_ids_round_trip() {
        for s in [Suite::Table1, Suite::Table2, Suite::Fig1] {
            assert_eq!(Suite::parse(s.id()).unwrap(), s);
        }
        assert!(Suite::parse("nope").is_err());
    }
}
