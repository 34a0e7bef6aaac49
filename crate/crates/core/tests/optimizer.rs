//! Optimizer behavior on geometry-based instances: protocol ordering,
//! finite-difference stability and per-iteration cost scaling.

mod common;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use star_cf::net_config::{build_layout, GeometrySpec, SystemConfig};
use star_cf::pgam::{fd_gradient, pack, pgam_run, unpack, NmseProblem, OptimizerConfig};
use star_cf::spatial_correlation::Kernels;
use star_cf::star_ris::{MsSplit, PassiveBeamforming};

#[test]
fn energy_splitting_beats_mode_switching() {
    for seed in 0..3 {
        let cfg = SystemConfig { m: 16, n_h: 4, n_v: 4, rng_seed: seed, ..Default::default() };
        let layout = build_layout(&cfg, &GeometrySpec::default()).unwrap();
        let kernels = Kernels::from_config(&cfg).unwrap();
        let problem = NmseProblem::new(&layout, &kernels, cfg.p(), cfg.tau);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let es0 = PassiveBeamforming::es_random_phases(cfg.n(), &mut rng);
        let ms0 = PassiveBeamforming::mode_switching(&MsSplit::Interleaved.mask(cfg.n()).unwrap(), es0.theta_t.clone(), es0.theta_r.clone());
        let (_, es) = pgam_run(&problem, &es0, &OptimizerConfig::default()).unwrap();
        let (_, ms) = pgam_run(&problem, &ms0, &OptimizerConfig::default()).unwrap();
        assert!(es.final_objective() <= ms.final_objective(), "seed {seed}: {} vs {}", es.final_objective(), ms.final_objective());
    }
}

#[test]
fn finite_differences_are_step_stable() {
    let inst = common::instance(2, 2, 3, 2, 3, 2, 17);
    let problem = NmseProblem::new(&inst.layout, &inst.kernels, 0.5, 2);
    let x = pack(&inst.pb);
    let grads: Vec<Vec<f64>> = [1e-5, 1e-6, 1e-7]
        .iter()
        .map(|&h| fd_gradient(|y| problem.objective_unconstrained(y), &x, h))
        .collect();
    let norm = grads[1].iter().map(|v| v * v).sum::<f64>().sqrt();
    for g in [&grads[0], &grads[2]] {
        let diff = g.iter().zip(&grads[1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(diff <= 1e-4 * norm, "{diff} vs {norm}");
    }
    // the unconstrained objective agrees with the statistics at a feasible point
    let direct = problem.objective(&unpack(&x, inst.pb.protocol)).unwrap();
    assert!((problem.objective_unconstrained(&x) - direct).abs() <= 1e-12 * direct);
}

/// Median wall time of one objective-plus-gradient evaluation.
fn iteration_seconds(n_h: usize, n_v: usize) -> f64 {
    let cfg = SystemConfig { n_h, n_v, ..Default::default() };
    let layout = build_layout(&cfg, &GeometrySpec::default()).unwrap();
    let kernels = Kernels::from_config(&cfg).unwrap();
    let problem = NmseProblem::new(&layout, &kernels, cfg.p(), cfg.tau);
    let pb = PassiveBeamforming::random(cfg.n(), &mut ChaCha8Rng::seed_from_u64(1));
    let mut samples: Vec<f64> = (0..15)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..20 {
                let stats = problem.stats(&pb).unwrap();
                std::hint::black_box(problem.gradient(&stats, &pb));
            }
            start.elapsed().as_secs_f64()
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    samples[samples.len() / 2]
}

#[test]
fn iteration_cost_at_most_quadratic_in_surface_size() {
    let small = iteration_seconds(8, 8);
    let large = iteration_seconds(16, 8);
    let ratio = large / small;
    assert!(ratio <= 4.8, "doubling N multiplied the iteration time by {ratio:.2}");
}
