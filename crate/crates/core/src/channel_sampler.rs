//! Random channel draws, the uplink pilot phase in projected form and the
//! LMMSE estimates built from it.

use std::f64::consts::FRAC_1_SQRT_2;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::estimation_stats::EstimationStats;
use crate::linalg::{CMat, CVec};
use crate::net_config::NetworkLayout;
use crate::spatial_correlation::Kernels;
use crate::star_ris::{PassiveBeamforming, Region};

/// One `CN(0, 1)` sample.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * FRAC_1_SQRT_2
}

pub fn complex_normal_vec<R: Rng + ?Sized>(n: usize, rng: &mut R) -> CVec {
    CVec::from_fn(n, |_, _| complex_normal(rng))
}

pub fn complex_normal_mat<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> CMat {
    CMat::from_fn(rows, cols, |_, _| complex_normal(rng))
}

/// Everything needed to draw channels for a fixed surface state.
#[derive(Debug, Clone)]
pub struct ChannelModel<'a> {
    layout: &'a NetworkLayout,
    kernels: &'a Kernels,
    /// `Φ_t`, `Φ_r` diagonals.
    coeffs: [Vec<Complex64>; 2],
}

/// One draw of the small-scale fading.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    /// `D_m`, N×L each.
    pub d: Vec<CMat>,
    /// `c_k`, length N each.
    pub c: Vec<CVec>,
    /// `h_mk`, stored row-major over (m, k).
    pub h: Vec<CVec>,
    k: usize,
}

impl ChannelRealization {
    pub fn h(&self, m: usize, k: usize) -> &CVec {
        &self.h[m * self.k + k]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.d.len()
    }
}

impl<'a> ChannelModel<'a> {
    pub fn new(layout: &'a NetworkLayout, kernels: &'a Kernels, pb: &PassiveBeamforming) -> Result<Self> {
        if pb.len() != kernels.n() {
            return Err(Error::Dimension(format!(
                "surface state has {} elements, kernel has {}",
                pb.len(),
                kernels.n()
            )));
        }
        Ok(ChannelModel {
            layout,
            kernels,
            coeffs: [pb.coefficients(Region::T), pb.coefficients(Region::R)],
        })
    }

    pub fn layout(&self) -> &NetworkLayout {
        self.layout
    }

    /// `W_m = √β̃_m R_RIS^{1/2} D_m R_AP^{1/2}`.
    pub fn w(&self, real: &ChannelRealization, m: usize) -> CMat {
        (&self.kernels.ris_sqrt * &real.d[m] * &self.kernels.ap_sqrt).scale(self.layout.beta_ap_ris[m].sqrt())
    }

    /// `q_k = √β̃_k R_RIS^{1/2} c_k`.
    pub fn q(&self, real: &ChannelRealization, k: usize) -> CVec {
        (&self.kernels.ris_sqrt * &real.c[k]).scale(self.layout.beta_ris_ue[k].sqrt())
    }

    pub fn phi(&self, k: usize) -> &[Complex64] {
        &self.coeffs[self.layout.region[k].index()]
    }

    /// Draws `c_k` for every UE, then `D_m` for every AP, and forms the
    /// cascaded channels. Drawing the UE side first makes the draw for the
    /// first `m` APs of a layout a prefix of the draw for the full layout.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> ChannelRealization {
        let (n, l) = (self.kernels.n(), self.kernels.l());
        let c: Vec<CVec> = (0..self.layout.k()).map(|_| complex_normal_vec(n, rng)).collect();
        let d: Vec<CMat> = (0..self.layout.m()).map(|_| complex_normal_mat(n, l, rng)).collect();
        self.assemble(d, c)
    }

    /// Cascaded channels from given fading matrices.
    pub fn assemble(&self, d: Vec<CMat>, c: Vec<CVec>) -> ChannelRealization {
        let s = &self.kernels.ris_sqrt;
        let t = &self.kernels.ap_sqrt;
        let k_count = self.layout.k();
        // v_k = S Φ_k S c_k, so h_mk = √(β̃_m β̃_k) T D_m^H v_k
        let v: Vec<CVec> = (0..k_count)
            .map(|k| {
                let mut sc = s * &c[k];
                for (x, p) in sc.iter_mut().zip(self.phi(k)) {
                    *x *= p;
                }
                s * sc
            })
            .collect();
        let mut h = Vec::with_capacity(d.len() * k_count);
        for (m, dm) in d.iter().enumerate() {
            for (k, vk) in v.iter().enumerate() {
                let scale = (self.layout.beta_ap_ris[m] * self.layout.beta_ris_ue[k]).sqrt();
                h.push((t * dm.ad_mul(vk)).scale(scale));
            }
        }
        ChannelRealization { d, c, h, k: k_count }
    }
}

pub fn sample_channels<R: Rng + ?Sized>(
    layout: &NetworkLayout,
    kernels: &Kernels,
    pb: &PassiveBeamforming,
    rng: &mut R,
) -> Result<ChannelRealization> {
    Ok(ChannelModel::new(layout, kernels, pb)?.sample(rng))
}

/// Projected pilot observations, one per (AP, pilot index). UEs on the same
/// pilot see the same vector.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub y: Vec<Vec<CVec>>,
    pilot_of: Vec<usize>,
}

impl PilotObservation {
    pub fn y(&self, m: usize, k: usize) -> &CVec {
        &self.y[m][self.pilot_of[k]]
    }
}

/// `y_mg = √(pτ) Σ_{l∈g} h_ml + z_mg` with the given noise vectors.
pub fn pilot_observation(
    real: &ChannelRealization,
    layout: &NetworkLayout,
    p_tau: f64,
    noise: Vec<Vec<CVec>>,
) -> PilotObservation {
    let amp = p_tau.sqrt();
    let mut y = noise;
    for (m, ym) in y.iter_mut().enumerate() {
        for (g, ymg) in ym.iter_mut().enumerate() {
            for &l in &layout.pilots.groups[g] {
                *ymg += real.h(m, l).scale(amp);
            }
        }
    }
    PilotObservation {
        y,
        pilot_of: layout.pilots.pilot_of.clone(),
    }
}

/// Draws one `CN(0, I_L)` noise vector per (AP, pilot index) and forms the
/// observations.
pub fn simulate_pilot_phase<R: Rng + ?Sized>(
    real: &ChannelRealization,
    layout: &NetworkLayout,
    p: f64,
    tau: usize,
    rng: &mut R,
) -> PilotObservation {
    let l = real.h.first().map_or(0, |h| h.len());
    let groups = layout.pilots.groups.len();
    let noise = (0..real.m())
        .map(|_| (0..groups).map(|_| complex_normal_vec(l, rng)).collect())
        .collect();
    pilot_observation(real, layout, p * tau as f64, noise)
}

/// Precomputed LMMSE filters `√(pτ) R_AP Q_{m,g}`; the estimate of link
/// (m, k) is `tr(R̃_mk)` times the filter applied to `y_{m,g(k)}`.
#[derive(Debug, Clone)]
pub struct LmmseEstimator {
    filters: Vec<Vec<CMat>>,
    traces: nalgebra::DMatrix<f64>,
    pilot_of: Vec<usize>,
}

impl LmmseEstimator {
    pub fn new(stats: &EstimationStats, kernels: &Kernels) -> Result<Self> {
        let amp = stats.p_tau.sqrt();
        let filters = (0..stats.m())
            .map(|m| {
                (0..stats.groups.len())
                    .map(|g| Ok((&kernels.ap * stats.pilot_gram_inverse(m, g)?).scale(amp)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LmmseEstimator {
            filters,
            traces: stats.traces.clone(),
            pilot_of: stats.pilot_of.clone(),
        })
    }

    pub fn estimate(&self, obs: &PilotObservation, m: usize, k: usize) -> CVec {
        let g = self.pilot_of[k];
        (&self.filters[m][g] * &obs.y[m][g]).scale(self.traces[(m, k)])
    }

    /// All estimates, row-major over (m, k).
    pub fn estimate_all(&self, obs: &PilotObservation) -> Vec<CVec> {
        let k_count = self.pilot_of.len();
        let mut out = Vec::with_capacity(self.filters.len() * k_count);
        for m in 0..self.filters.len() {
            // one filtered observation per pilot, rescaled per UE
            let filtered: Vec<CVec> = (0..self.filters[m].len())
                .map(|g| &self.filters[m][g] * &obs.y[m][g])
                .collect();
            for k in 0..k_count {
                out.push(filtered[self.pilot_of[k]].scale(self.traces[(m, k)]));
            }
        }
        out
    }
}

pub fn lmmse_estimate(obs: &PilotObservation, stats: &EstimationStats, kernels: &Kernels) -> Result<Vec<CVec>> {
    Ok(LmmseEstimator::new(stats, kernels)?.estimate_all(obs))
}
