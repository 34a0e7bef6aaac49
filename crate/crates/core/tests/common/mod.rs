#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use star_cf::linalg::CMat;
use star_cf::net_config::{assign_pilots, NetworkLayout, PilotPolicy};
use star_cf::spatial_correlation::{ap_correlation, ris_correlation, ApCorrelation, Kernels};
use star_cf::star_ris::{PassiveBeamforming, Region};

pub const LAMBDA: f64 = 0.1578;

/// Small geometry-free instance with O(1) gains and a unit-diagonal sinc
/// kernel, so that traces are of order N.
pub struct Instance {
    pub layout: NetworkLayout,
    pub kernels: Kernels,
    pub pb: PassiveBeamforming,
}

pub fn kernels(n_h: usize, n_v: usize, l: usize) -> Kernels {
    let d = LAMBDA / 4.0;
    Kernels::new(
        ris_correlation(n_h, n_v, d, d, LAMBDA).unwrap().scale(1.0 / (d * d)),
        ap_correlation(l, ApCorrelation::Exponential { rho: 0.5 }).unwrap(),
    )
    .unwrap()
}

/// UEs alternate between the transmission and reflection regions; pilots
/// are reused round-robin over `tau` sequences.
pub fn instance(m: usize, l: usize, n_h: usize, n_v: usize, k: usize, tau: usize, seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let beta_ap = (0..m).map(|_| rng.random_range(0.5..1.5)).collect();
    let beta_ue = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
    let region = (0..k).map(|i| if i % 2 == 0 { Region::T } else { Region::R }).collect();
    let layout =
        NetworkLayout::from_gains(beta_ap, beta_ue, region, assign_pilots(k, tau, &PilotPolicy::RoundRobin).unwrap())
            .unwrap();
    let pb = PassiveBeamforming::random(n_h * n_v, &mut rng);
    Instance { layout, kernels: kernels(n_h, n_v, l), pb }
}

pub fn random_matrix(n: usize, seed: u64) -> CMat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CMat::from_fn(n, n, |_, _| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
}
