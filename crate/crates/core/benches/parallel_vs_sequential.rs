//! Candidate scoring and episode collection under the current build.
//!
//! The rayon path is a compile-time feature, so run this twice to compare:
//!
//!     cargo bench -p scalenav --bench parallel_vs_sequential
//!     cargo bench -p scalenav --bench parallel_vs_sequential --no-default-features
//!
//! Group names carry the build mode so both runs land side by side in
//! `target/criterion`. Inside one build, `chunked` vs `one-chunk` compares
//! fanning candidates out against scoring them in a single work item.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use scalenav::affordance::{Affordance, AffordanceConfig};
use scalenav::data::{collect_episodes, CollectConfig, PolicySpec};
use scalenav::novelty::{NoveltyConfig, Rnd};
use scalenav::offline_rl::{IqlConfig, IqlModels};
use scalenav::par::is_parallel;
use scalenav::recovery::{evaluate_codes, CodeSampler, PlannerModels, RecoveryConfig};
use scalenav::representation::RepresentationConfig;
use scalenav::sim::scenario::Registry;
use scalenav::sim::SimConfig;

fn mode() -> &'static str {
    if is_parallel() {
        "parallel"
    } else {
        "sequential"
    }
}

fn candidate_scoring(c: &mut Criterion) {
    let d_z = RepresentationConfig::default().d_z;
    let acfg = AffordanceConfig::default();
    let aff = Affordance::new(d_z, &acfg, true, 1);
    let iql = IqlModels::new(d_z, &SimConfig::default(), &IqlConfig::default(), 2);
    let rnd = Rnd::new(d_z, &NoveltyConfig::default(), 3);
    let models = PlannerModels {
        affordance: &aff,
        iql: &iql,
        rnd: Some(&rnd),
        step_dt: 0.75,
    };
    let history: Vec<Vec<f64>> = (0..acfg.history)
        .map(|k| (0..d_z).map(|j| ((k * d_z + j) as f64 * 0.37).sin()).collect())
        .collect();
    let z = history.last().unwrap().clone();
    let cfg = RecoveryConfig::default();
    let codes = CodeSampler::prior(cfg.horizon, acfg.d_u, 1.0, 0).sample(cfg.candidates);

    let mut g = c.benchmark_group(format!("evaluate_codes/{}", mode()));
    g.sample_size(20);
    for (label, chunk) in [("chunked", cfg.chunk), ("one-chunk", cfg.candidates)] {
        let run = RecoveryConfig { chunk, ..cfg };
        g.bench_function(BenchmarkId::new(label, cfg.candidates), |b| {
            b.iter(|| evaluate_codes(&models, &history, &z, None, black_box(&codes), &run))
        });
    }
    g.finish();
}

fn episode_collection(c: &mut Criterion) {
    let world = Registry::builtin().world("corridor-easy").unwrap();
    let sim = SimConfig::default();
    let collect = CollectConfig::default();
    let mut g = c.benchmark_group(format!("collect_episodes/{}", mode()));
    g.sample_size(10);
    g.bench_function("8-episodes", |b| {
        b.iter(|| collect_episodes(&world, &sim, PolicySpec::NoisyWaypointFollower, 8, black_box(0), &collect, "bench"))
    });
    g.finish();
}

criterion_group!(benches, candidate_scoring, episode_collection);
criterion_main!(benches);
