use ndarray::array;
use proptest::prelude::*;
use scalenav::affordance::{
    estimate_plan_yaw, film_modulate, kl_standard_normal, prior_log_density, Affordance, AffordanceBatch, AffordanceConfig,
};
use scalenav::nn::Tensor;
use scalenav::offline_rl::{IqlConfig, IqlModels};
use scalenav::sim::SimConfig;

fn small() -> AffordanceConfig {
    AffordanceConfig {
        d_u: 3,
        d_h: 6,
        history: 4,
        hidden: 16,
        ..AffordanceConfig::default()
    }
}

fn history(d: usize, n: usize) -> Vec<Vec<f64>> {
    (0..n).map(|k| (0..d).map(|j| ((k * d + j) as f64 * 0.37).sin()).collect()).collect()
}

/// A 1-d policy whose turn rate is `±c` with the sign of `z_goal - z`.
fn mirror_policy(c: f64) -> IqlModels {
    let cfg = IqlConfig {
        hidden: 2,
        ..IqlConfig::default()
    };
    let mut m = IqlModels::new(1, &SimConfig::default(), &cfg, 0);
    let mut set = |name: &str, t: Tensor| {
        let i = m.pi.index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
        assert_eq!(m.pi.get(i).dim(), t.dim(), "{name}");
        *m.pi.get_mut(i) = t;
    };
    // input is [z, z_goal - z]; layer norm maps [d, -d] to [±1, ∓1]
    set("pi.0.w", array![[0.0, 0.0], [1.0, -1.0]]);
    set("pi.0.b", array![[0.0, 0.0]]);
    set("pi.1.w", array![[1.0, 0.0], [0.0, 1.0]]);
    set("pi.1.b", array![[0.0, 0.0]]);
    set("pi.2.w", array![[0.0, c, 0.0, 0.0], [0.0, -c, 0.0, 0.0]]);
    set("pi.2.b", array![[0.0, 0.0, 0.0, 0.0]]);
    m
}

#[test]
fn film_examples() {
    assert_eq!(film_modulate(&[1.0, 1.0], &[0.0, 0.0], &[0.3, -2.0]).unwrap(), vec![0.3, -2.0]);
    assert_eq!(film_modulate(&[0.0, 0.0], &[1.5, -1.0], &[0.3, -2.0]).unwrap(), vec![1.5, -1.0]);
    assert_eq!(film_modulate(&[2.0, -1.0], &[1.0, 1.0], &[1.0, 3.0]).unwrap(), vec![3.0, -2.0]);
    assert!(film_modulate(&[1.0], &[0.0], &[1.0, 2.0]).is_err());
}

#[test]
fn kl_and_prior_examples() {
    assert!(kl_standard_normal(&[0.0, 0.0], &[1.0, 1.0]).abs() < 1e-12);
    assert!((kl_standard_normal(&[1.0], &[1.0]) - 0.5).abs() < 1e-12);
    assert!(kl_standard_normal(&[0.0], &[0.5]) > 0.0);
    let d0 = prior_log_density(&[0.0, 0.0, 0.0]);
    assert!((d0 + 1.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
    assert!(prior_log_density(&[1.0, 0.0, 0.0]) < d0);
}

#[test]
fn gru_with_zero_bias_keeps_zero_state() {
    let mut a = Affordance::new(5, &small(), true, 3);
    for name in ["gru.ih.b", "gru.hh.b"] {
        let i = a.params.index_of(name).unwrap();
        a.params.get_mut(i).fill(0.0);
    }
    let h = a.temporal_encode(&vec![vec![0.0; 5]; 4]).h;
    assert_eq!(h, vec![0.0; 6]);
    let hist = history(5, 6);
    assert_eq!(a.temporal_encode(&hist), a.temporal_encode(&hist));
    assert_ne!(a.temporal_encode(&hist).h, h);
}

#[test]
fn flat_variant_passes_current_latent_through() {
    let a = Affordance::new(5, &small(), false, 3);
    assert!(!a.uses_rnn());
    let hist = history(5, 7);
    let f = a.temporal_encode(&hist);
    assert_eq!(f.h, hist[6]);
    assert_eq!(f.horizon, 4);
}

#[test]
fn short_histories_repeat_the_oldest_entry() {
    let a = Affordance::new(2, &small(), true, 0);
    let hist = history(2, 2);
    let w = a.window(&hist);
    assert_eq!(w.len(), 4);
    assert_eq!(w[0], hist[0].as_slice());
    assert_eq!(w[2], hist[0].as_slice());
    assert_eq!(w[3], hist[1].as_slice());
}

#[test]
fn zero_beta_leaves_reconstruction_only() {
    let cfg = AffordanceConfig {
        beta_vib: 0.0,
        ..small()
    };
    let a = Affordance::new(4, &cfg, true, 1);
    let n = 3;
    let batch = AffordanceBatch {
        history: (0..4).map(|k| Tensor::from_shape_fn((n, 4), |(i, j)| ((i + j + k) as f64 * 0.2).cos())).collect(),
        target: Tensor::from_shape_fn((n, 4), |(i, j)| (i as f64 - j as f64) * 0.1),
        eps: Tensor::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64 * 0.1 - 0.4),
    };
    let l = a.loss(&batch);
    assert!(l.kl > 0.0);
    assert_eq!(l.total, l.recon);
}

#[test]
fn two_step_rollout_composes_one_step_rollouts() {
    let a = Affordance::new(4, &small(), true, 9);
    let hist = history(4, 5);
    let (u1, u2) = (vec![0.5, -0.2, 1.0], vec![-1.0, 0.3, 0.0]);
    let two = a.rollout_latent(&hist, &[u1.clone(), u2.clone()]);
    let first = a.rollout_latent(&hist, std::slice::from_ref(&u1));
    assert_eq!(first[0], two[0]);
    let mut extended = hist.clone();
    extended.push(first[0].clone());
    let second = a.rollout_latent(&extended, &[u2]);
    for (x, y) in second[0].iter().zip(&two[1]) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(two, a.rollout_latent(&hist, &[u1, vec![-1.0, 0.3, 0.0]]));
}

#[test]
fn batched_rollout_matches_single_rollouts() {
    let a = Affordance::new(3, &small(), true, 2);
    let hist = history(3, 4);
    let codes: Vec<Tensor> = (0..3).map(|k| Tensor::from_shape_fn((5, 3), |(i, j)| ((i + 2 * j + k) as f64).sin())).collect();
    let batch = a.rollout_batch(&hist, &codes);
    for i in 0..5 {
        let single: Vec<Vec<f64>> = codes.iter().map(|c| c.row(i).to_vec()).collect();
        let r = a.rollout_latent(&hist, &single);
        for k in 0..3 {
            for (x, y) in r[k].iter().zip(batch[k].row(i)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn yaw_examples() {
    let pi = mirror_policy(0.5);
    let w = pi.act(&[0.0], &[1.0]).w;
    assert!((w - 0.5f64.tanh() * SimConfig::default().w_max).abs() < 1e-3, "turn rate {w}");
    assert!((pi.act(&[0.0], &[-1.0]).w + w).abs() < 1e-12);
    let states = vec![vec![1.0], vec![2.0], vec![3.0]];
    assert!((estimate_plan_yaw(&[0.0], &states, &pi, 0.25) - 3.0 * w * 0.25).abs() < 1e-9);
    assert_eq!(estimate_plan_yaw(&[0.0], &[], &pi, 0.25), 0.0);
}

proptest! {
    #[test]
    fn film_is_affine_in_code(
        g in prop::collection::vec(-2.0f64..2.0, 3),
        d in prop::collection::vec(-2.0f64..2.0, 3),
        u in prop::collection::vec(-2.0f64..2.0, 3),
        v in prop::collection::vec(-2.0f64..2.0, 3),
        a in -2.0f64..2.0,
    ) {
        let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + (1.0 - a) * y).collect();
        let lhs = film_modulate(&g, &d, &mix).unwrap();
        let fu = film_modulate(&g, &d, &u).unwrap();
        let fv = film_modulate(&g, &d, &v).unwrap();
        for i in 0..3 {
            prop_assert!((lhs[i] - (a * fu[i] + (1.0 - a) * fv[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn reversed_plan_flips_yaw(zs in prop::collection::vec(-3.0f64..3.0, 2..8)) {
        let pi = mirror_policy(0.8);
        let fwd = estimate_plan_yaw(&[zs[0]], &zs[1..].iter().map(|z| vec![*z]).collect::<Vec<_>>(), &pi, 0.25);
        let rev: Vec<f64> = zs.iter().rev().copied().collect();
        let back = estimate_plan_yaw(&[rev[0]], &rev[1..].iter().map(|z| vec![*z]).collect::<Vec<_>>(), &pi, 0.25);
        prop_assert!((fwd + back).abs() < 1e-9, "forward {} reversed {}", fwd, back);
    }
}
