use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use scalenav::nn::Tensor;
use scalenav::novelty::{novelty_metric, train_rnd, NoveltyConfig, Rnd};

fn gaussian(n: usize, d: usize, shift: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn((n, d), |_| {
        let x: f64 = StandardNormal.sample(&mut rng);
        x + shift
    })
}

fn quick() -> NoveltyConfig {
    NoveltyConfig {
        hidden: 32,
        steps: 600,
        batch_size: 64,
        lr: 1e-3,
        ..NoveltyConfig::default()
    }
}

#[test]
fn predictor_equal_to_prior_scores_zero() {
    let cfg = NoveltyConfig {
        predictor_extra_layer: false,
        ..NoveltyConfig::default()
    };
    let mut rnd = Rnd::new(6, &cfg, 2);
    rnd.predictor = rnd.prior.clone();
    let z = gaussian(20, 6, 0.0, 1);
    assert!(rnd.score_rows(&z).iter().all(|&t| t == 0.0));
    assert_eq!(novelty_metric(&[1.0, 0.0], &[0.0, 0.0]), 1.0);
    assert_eq!(novelty_metric(&[3.0, -1.0], &[1.0, 1.0]), 8.0);
}

#[test]
fn training_separates_seen_from_unseen() {
    let cfg = quick();
    let train = gaussian(400, 8, 0.0, 3);
    let held_out = gaussian(200, 8, 3.0, 4);
    let mut rnd = Rnd::new(8, &cfg, 5);
    let before = rnd.prior_checksum();
    let log = train_rnd(&train, &mut rnd, &cfg, 6).unwrap();
    assert_eq!(rnd.prior_checksum(), before);
    assert!(log.last().unwrap().1 < log[0].1);
    let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
    let seen = mean(rnd.score_rows(&train));
    let unseen = mean(rnd.score_rows(&held_out));
    assert!(seen < unseen, "seen {seen} unseen {unseen}");
}

#[test]
fn training_is_deterministic() {
    let cfg = NoveltyConfig { steps: 50, ..quick() };
    let z = gaussian(100, 4, 0.0, 0);
    let run = || {
        let mut rnd = Rnd::new(4, &cfg, 1);
        train_rnd(&z, &mut rnd, &cfg, 2).unwrap();
        rnd
    };
    assert_eq!(run(), run());
    let mut rnd = Rnd::new(4, &cfg, 1);
    assert!(train_rnd(&Tensor::zeros((0, 4)), &mut rnd, &cfg, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn novelty_is_non_negative(z in prop::collection::vec(-50.0f64..50.0, 5), seed in 0u64..20) {
        let rnd = Rnd::new(5, &NoveltyConfig::default(), seed);
        let t = rnd.score(&z);
        prop_assert!(t >= 0.0 && t.is_finite());
    }
}
