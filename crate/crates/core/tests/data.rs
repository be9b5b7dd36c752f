use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scalenav::data::format::{from_bytes, to_bytes, MAGIC};
use scalenav::data::{
    collect_episodes, read_dataset, relabel, reward, sample_batch, write_dataset, CollectConfig, Dataset, PairSampler,
    PolicySpec, Polarity, SamplerConfig,
};
use scalenav::sim::scenario::Registry;
use scalenav::sim::SimConfig;
use scalenav::Error;

fn collect(policy: PolicySpec, n: usize, seed: u64) -> Dataset {
    let w = Registry::builtin().world("corridor-easy").unwrap();
    collect_episodes(&w, &SimConfig::default(), policy, n, seed, &CollectConfig::default(), "corridor-easy")
}

#[test]
fn reward_table() {
    assert_eq!(reward(true, false), 0.0);
    assert_eq!(reward(false, true), -10.0);
    assert_eq!(reward(false, false), -1.0);
}

#[test]
fn collection_is_counted_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = collect(PolicySpec::NoisyWaypointFollower, 5, 11);
    assert_eq!(d.episodes.len(), 5);
    assert_eq!(d.meta.rays, 32);
    assert_eq!(d.meta.obs_dim, 65);
    let (a, b) = (dir.path().join("a.scn"), dir.path().join("b.scn"));
    write_dataset(&d, &a).unwrap();
    write_dataset(&collect(PolicySpec::NoisyWaypointFollower, 5, 11), &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_dataset(&a).unwrap(), d);
}

#[test]
fn collision_seeker_file_records_collisions() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("seek.scn");
    write_dataset(&collect(PolicySpec::CollisionSeeker, 3, 5), &p).unwrap();
    let d = read_dataset(&p).unwrap();
    assert!(d.iter_transitions().any(|t| t.reward == -10.0 && t.collided));
    for t in d.iter_transitions() {
        assert_eq!(t.reward == -10.0, t.collided);
    }
}

#[test]
fn transitions_chain_within_episodes() {
    let d = collect(PolicySpec::Mixed { collision_fraction: 0.5 }, 6, 2);
    for ep in &d.episodes {
        for (i, w) in ep.transitions.windows(2).enumerate() {
            assert_eq!(w[0].next_obs, w[1].obs);
            assert_eq!(w[0].step_index as usize, i);
            assert!(!w[0].done);
        }
        assert!(ep.transitions.iter().all(|t| t.episode_id == ep.id));
    }
}

#[test]
fn bad_magic_and_missing_file() {
    let d = collect(PolicySpec::NoisyWaypointFollower, 1, 0);
    let mut bytes = to_bytes(&d).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    bytes[3] ^= 0xff;
    assert!(matches!(from_bytes(&bytes, "x".as_ref()), Err(Error::BadMagic(_))));
    let err = read_dataset("/definitely/not/here.scn").unwrap_err();
    assert!(err.to_string().contains("/definitely/not/here.scn"));
}

#[test]
fn unit_d_max_positives_are_one_step() {
    let d = collect(PolicySpec::NoisyWaypointFollower, 4, 3);
    let cfg = SamplerConfig {
        d_max: 1,
        self_goal_prob: 0.0,
        ..SamplerConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let b = sample_batch(&d, &cfg, &mut rng).unwrap();
    for p in &b.positives {
        assert_eq!(p.gap, Some(1));
        assert_eq!(p.goal_state, p.step + 1);
    }
}

#[test]
fn default_batch_split() {
    let d = collect(PolicySpec::NoisyWaypointFollower, 4, 3);
    let cfg = SamplerConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = sample_batch(&d, &cfg, &mut rng).unwrap();
    assert_eq!(b.len(), 128);
    assert_eq!(b.negatives.len(), 32);
    assert!(b.positives.iter().all(|p| p.polarity == Polarity::Positive));
    for n in &b.negatives {
        assert_eq!(n.polarity, Polarity::Negative);
        match n.gap {
            Some(g) => assert!(g > cfg.d_max && n.goal_episode == n.episode),
            None => assert_ne!(n.goal_episode, n.episode),
        }
    }
}

#[test]
fn self_goal_is_terminal_with_zero_reward() {
    let d = collect(PolicySpec::NoisyWaypointFollower, 2, 3);
    let cfg = SamplerConfig {
        self_goal_prob: 1.0,
        ..SamplerConfig::default()
    };
    let s = PairSampler::new(&d, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let p = s.positive(&d, &mut rng);
        assert_eq!((p.gap, p.reward, p.done), (Some(0), 0.0, true));
        assert_eq!(p.goal_obs(&d), p.anchor_obs(&d));
    }
}

#[test]
fn single_short_episode_has_no_negatives() {
    let mut d = collect(PolicySpec::NoisyWaypointFollower, 1, 4);
    d.episodes[0].transitions.truncate(5);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(sample_batch(&d, &SamplerConfig::default(), &mut rng), Err(Error::Empty(_))));
}

fn shared() -> &'static Dataset {
    static D: std::sync::OnceLock<Dataset> = std::sync::OnceLock::new();
    D.get_or_init(|| collect(PolicySpec::NoisyWaypointFollower, 2, 9))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn positive_gaps_respect_bounds(seed in 0u64..500, d_max in 1usize..15) {
        let d = shared();
        let cfg = SamplerConfig { d_max, ..SamplerConfig::default() };
        let s = PairSampler::new(d, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let p = s.positive(d, &mut rng);
            let gap = p.gap.unwrap();
            prop_assert!(gap <= d_max);
            prop_assert!(p.goal_state < d.episodes[p.episode].num_states());
            prop_assert_eq!((p.reward, p.done), relabel(gap, d.episodes[p.episode].transitions[p.step].collided));
        }
    }
}
