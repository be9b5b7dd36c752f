mod common;

use scalenav::config::Ablation;
use scalenav::runtime::{
    fig1_task, metrics_csv, run_evaluation, scenario_task, trace_csv, unmapped_start, Agent, Fig1Case, Suite, Task,
    METRICS_HEADER,
};
use scalenav::topo_map::localize;

fn agent(a: Ablation) -> Agent<'static> {
    let f = common::fixture();
    Agent::new(&f.models, &f.map, &f.cfg, a).unwrap()
}

#[test]
fn goal_at_start_succeeds_immediately() {
    let f = common::fixture();
    let mut task = scenario_task(&f.reg, "corridor-easy", 3).unwrap();
    task.goal = Some(task.start);
    let r = agent(Ablation::FULL).navigate(&task, 0, None).unwrap();
    assert!(r.success);
    assert_eq!((r.steps, r.interventions), (0, 0));
    assert_eq!(r.distance_traveled, 0.0);
}

#[test]
fn without_recovery_a_lost_start_is_an_intervention() {
    let f = common::fixture();
    let base = scenario_task(&f.reg, "corridor-easy", 1).unwrap();
    let mut checked = 0;
    for seed in 0..10 {
        let start = unmapped_start(&base.world, seed, 0.5).unwrap();
        let z = f.models.encoder.encode(&scalenav::sim::observe(&start, &base.world, 32, 12.0)).unwrap();
        if !localize(&z, &f.map, &f.models.iql, f.cfg.runtime.v_loc).is_lost() {
            continue;
        }
        let task = Task { start, ..base.clone() };
        let r = agent(Ablation::NO_AFFORDANCE).navigate(&task, seed, None).unwrap();
        assert!(!r.success);
        assert_eq!((r.steps, r.interventions, r.recovery_invocations), (0, 1, 0));
        let full = agent(Ablation::FULL).navigate(&task, seed, None).unwrap();
        assert!(full.recovery_invocations >= 1);
        checked += 1;
    }
    assert!(checked >= 5, "only {checked} held-out starts were lost");
}

#[test]
fn navigation_is_deterministic() {
    let f = common::fixture();
    let task = fig1_task(&f.reg, Fig1Case::Deviation, 4, &f.cfg).unwrap();
    let a = agent(Ablation::FULL);
    let (mut t1, mut t2) = (Vec::new(), Vec::new());
    let r1 = a.navigate(&task, 9, Some(&mut t1)).unwrap();
    let r2 = a.navigate(&task, 9, Some(&mut t2)).unwrap();
    assert_eq!(r1, r2);
    assert_eq!(trace_csv(&t1), trace_csv(&t2));
    assert_eq!(t1.len(), r1.steps);
}

#[test]
fn unknown_start_case_only_asks_to_relocalize() {
    let f = common::fixture();
    let task = fig1_task(&f.reg, Fig1Case::UnknownStart, 2, &f.cfg).unwrap();
    assert!(task.goal.is_none());
    assert!(task.world.held_out.iter().any(|r| r.contains(task.start.position())));
    let mut trace = Vec::new();
    let r = agent(Ablation::FULL).navigate(&task, 2, Some(&mut trace)).unwrap();
    let z = f.models.encoder.encode(&scalenav::sim::observe(&r.final_pose, &task.world, 32, 12.0)).unwrap();
    let lost_at_end = localize(&z, &f.map, &f.models.iql, f.cfg.runtime.v_loc).is_lost();
    assert_eq!(r.success, !lost_at_end);
    // every executed step was a recovery step, since success ends the episode
    assert!(trace.iter().all(|row| row.cost.is_some()));
}

#[test]
fn evaluation_bookkeeping() {
    let f = common::fixture();
    let rows = run_evaluation(Suite::Table1, 2, 5, &f.models, &f.map, &f.cfg, &f.reg).unwrap();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        assert_eq!(r.trials, 2);
        assert!([0.0, 0.5, 1.0].contains(&r.success_rate));
    }
    let csv = metrics_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# schema 1"));
    assert_eq!(lines.next(), Some(METRICS_HEADER));
    assert_eq!(lines.count(), 10);

    let t2 = run_evaluation(Suite::Table2, 4, 5, &f.models, &f.map, &f.cfg, &f.reg).unwrap();
    let labels: Vec<&str> = t2.iter().map(|r| r.ablation.as_str()).collect();
    assert_eq!(labels.len(), 5);
    assert_eq!(labels[0], Ablation::FULL.label());
    assert_eq!(labels[4], Ablation::NO_AFFORDANCE.label());
    assert!(t2.iter().all(|r| r.scenario == "fig1-mix" && r.trials == 4));
    assert!(run_evaluation(Suite::Fig1, 0, 5, &f.models, &f.map, &f.cfg, &f.reg).is_err());
    assert!(Suite::parse("table3").is_err());
}

#[test]
fn map_from_another_checkpoint_is_refused() {
    let f = common::fixture();
    let mut map = f.map.clone();
    map.meta.checkpoint_hash = "0000".into();
    let err = Agent::new(&f.models, &map, &f.cfg, Ablation::FULL).err().unwrap();
    assert!(err.to_string().contains("hash"));
}
