use std::collections::VecDeque;
use std::f64::consts::PI;

use proptest::prelude::*;
use scalenav::sim::geometry::{Point, Rect};
use scalenav::sim::scenario::{reset_scenario, Registry};
use scalenav::sim::{observe, step, Action, Obstacle, Pose, SimConfig, World};

fn unit_dt() -> SimConfig {
    SimConfig {
        dt: 1.0,
        w_max: 2.0,
        ..SimConfig::default()
    }
}

#[test]
fn kinematics_examples() {
    let w = World::empty_unbounded();
    let o = Pose::new(0.0, 0.0, 0.0);
    let (p, c) = step(&o, &Action::new(0.0, 0.0), &w, &unit_dt());
    assert_eq!(p, o);
    assert!(!c);
    let (p, c) = step(&o, &Action::new(1.0, 0.0), &w, &unit_dt());
    assert!((p.x - 1.0).abs() < 1e-12 && p.y.abs() < 1e-12 && p.theta == 0.0 && !c);
    let (p, _) = step(&o, &Action::new(0.0, PI / 2.0), &w, &unit_dt());
    assert_eq!((p.x, p.y), (0.0, 0.0));
    assert!((p.theta - PI / 2.0).abs() < 1e-12);
}

#[test]
fn room_center_ray_matches_analytic_depth() {
    // facing +x from the center of a 10 m room, the middle ray meets x = 5
    let room = World::new(Rect::new(-5.0, -5.0, 5.0, 5.0), Vec::new(), 1.0, 1);
    let o = observe(&Pose::new(0.0, 0.0, 0.0), &room, 33, 12.0);
    assert!((o.depths[16] - 5.0).abs() < 1e-12);
    // an off-axis ray meets the same wall at 5 / cos(bearing)
    let fov = scalenav::sim::FOV_DEG.to_radians();
    let bearing = fov * (20.0 / 32.0 - 0.5);
    assert!((o.depths[20] - 5.0 / bearing.cos()).abs() < 1e-9);
    assert_eq!(o, observe(&Pose::new(0.0, 0.0, 0.0), &room, 33, 12.0));
}

#[test]
fn empty_world_reads_max_range() {
    let o = observe(&Pose::new(3.0, -2.0, 1.0), &World::empty_unbounded(), 32, 12.0);
    assert!(o.depths.iter().all(|&d| d == 12.0));
}

#[test]
fn reset_is_seeded() {
    let a = reset_scenario("corridor-easy", 7).unwrap();
    let b = reset_scenario("corridor-easy", 7).unwrap();
    assert_eq!(a.0, b.0);
    assert_eq!((a.1, a.2), (b.1, b.2));
    assert!(reset_scenario("atlantis", 0).is_err());
}

#[test]
fn novel_variant_only_adds_obstacles() {
    let reg = Registry::builtin();
    let base = reg.world("corridor-easy").unwrap();
    let novel = reg.world("corridor-novel").unwrap();
    assert!(novel.obstacles.len() > base.obstacles.len());
    assert_eq!(&novel.obstacles[..base.obstacles.len()], &base.obstacles[..]);
    assert_eq!(&novel.segments[..base.segments.len()], &base.segments[..]);
    assert_eq!(&novel.circles[..base.circles.len()], &base.circles[..]);
    assert_eq!(novel.bounds, base.bounds);
}

/// Shortest-path hop counts on a free-cell grid, 4- and 8-connected.
fn grid_hops(world: &World, a: Point, b: Point, cell: f64, clearance: f64, diagonal: bool) -> Option<usize> {
    let r = world.bounds;
    let cols = (r.width() / cell).ceil() as usize;
    let rows = (r.height() / cell).ceil() as usize;
    let center = |c: usize, rr: usize| [r.min[0] + (c as f64 + 0.5) * cell, r.min[1] + (rr as f64 + 0.5) * cell];
    let free: Vec<bool> = (0..rows * cols).map(|i| world.is_clear(center(i % cols, i / cols), clearance)).collect();
    let snap = |p: Point| {
        let c = ((p[0] - r.min[0]) / cell) as usize;
        let rr = ((p[1] - r.min[1]) / cell) as usize;
        rr * cols + c
    };
    let (s, t) = (snap(a), snap(b));
    let mut hops = vec![usize::MAX; rows * cols];
    let mut q = VecDeque::from([s]);
    hops[s] = 0;
    while let Some(u) = q.pop_front() {
        if u == t {
            return Some(hops[u]);
        }
        let (ur, uc) = ((u / cols) as i64, (u % cols) as i64);
        for (dr, dc) in [(0, 1), (1, 0), (0, -1), (-1, 0), (1, 1), (1, -1), (-1, 1), (-1, -1)] {
            if !diagonal && dr != 0 && dc != 0 {
                continue;
            }
            let (nr, nc) = (ur + dr, uc + dc);
            if nr < 0 || nc < 0 || nr >= rows as i64 || nc >= cols as i64 {
                continue;
            }
            let v = nr as usize * cols + nc as usize;
            if free[v] && hops[v] == usize::MAX {
                hops[v] = hops[u] + 1;
                q.push_back(v);
            }
        }
    }
    None
}

#[test]
fn hard_band_agrees_with_grid_search() {
    // On a grid, 8-connected hop count times the cell size never exceeds the
    // Euclidean geodesic and 4-connected hops never fall short of it, so the
    // band check brackets the true distance from both sides.
    let reg = Registry::builtin();
    let [lo, hi] = reg.scenario("corridor-hard").unwrap().band;
    let cell = 0.1;
    let slack = 4.0 * cell;
    for seed in 0..4 {
        let (w, s, g) = reg.reset("corridor-hard", seed).unwrap();
        let cheb = grid_hops(&w, s.position(), g.position(), cell, 0.45, true).unwrap() as f64 * cell;
        let manh = grid_hops(&w, s.position(), g.position(), cell, 0.45, false).unwrap() as f64 * cell;
        assert!(cheb - slack <= hi, "seed {seed}: lower bound {cheb} above band");
        assert!(manh + slack >= lo, "seed {seed}: upper bound {manh} below band");
        let d = w.geodesic(s.position(), g.position(), reg.clearance).unwrap();
        assert!((lo..=hi).contains(&d));
        assert!(d >= cheb - slack && d <= manh + slack);
    }
}

fn box_world() -> World {
    let pillar = Obstacle::Circle { center: [2.0, 0.0], radius: 0.5 };
    let wall = Obstacle::Polygon {
        points: vec![[-1.0, 2.0], [1.0, 2.0], [1.0, 2.4], [-1.0, 2.4]],
    };
    World::new(Rect::new(-4.0, -4.0, 4.0, 4.0), vec![pillar, wall], 0.5, 1)
}

proptest! {
    #[test]
    fn robot_never_enters_obstacles(
        x in -3.0f64..3.0, y in -3.0f64..3.0, th in -PI..PI,
        actions in prop::collection::vec((-1.0f64..1.0, -1.5f64..1.5), 1..60),
    ) {
        let w = box_world();
        let cfg = SimConfig::default();
        prop_assume!(w.is_clear([x, y], cfg.robot_radius));
        let mut p = Pose::new(x, y, th);
        for (v, om) in actions {
            let (n, collided) = step(&p, &Action::new(v, om), &w, &cfg);
            if collided {
                prop_assert_eq!((n.x, n.y), (p.x, p.y));
            }
            prop_assert!(w.is_clear(n.position(), cfg.robot_radius * 0.999));
            prop_assert!(n.theta > -PI && n.theta <= PI);
            p = n;
        }
    }

    #[test]
    fn depths_stay_in_range(x in -3.0f64..3.0, y in -3.0f64..3.0, th in -PI..PI) {
        let w = box_world();
        let o = observe(&Pose::new(x, y, th), &w, 32, 12.0);
        prop_assert!(o.depths.iter().all(|&d| d > 0.0 && d <= 12.0));
        let f = o.features(12.0);
        prop_assert_eq!(f.len(), 65);
        prop_assert!(f[..32].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
