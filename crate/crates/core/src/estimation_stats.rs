//! Closed-form LMMSE estimation statistics: pilot Gram inverses, estimate
//! covariances and the NMSE objective.
//!
//! Every AP-side matrix here is `R_AP` scaled or passed through a rational
//! function, so all of them share the eigenbasis of `R_AP`. The scalar
//! summaries (`tr Ψ`, NMSE) are evaluated on the spectrum; the explicit
//! matrices are built on request through a Cholesky solve.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{hermitize, hpd_inverse, CMat};
use crate::net_config::NetworkLayout;
use crate::spatial_correlation::{cascaded_traces, Kernels};
use crate::star_ris::PassiveBeamforming;

/// Spectrum of the AP kernel, with the scalar functions of the pilot load
/// `s = Σ_{l∈g} tr(R̃_ml)` used throughout.
#[derive(Debug, Clone)]
pub struct ApSpectrum {
    pub lambda: Vec<f64>,
    pub trace: f64,
}

impl ApSpectrum {
    pub fn new(lambda: Vec<f64>) -> Self {
        let trace = lambda.iter().sum();
        ApSpectrum { lambda, trace }
    }

    /// `pτ tr(R_AP Q R_AP) / tr(R_AP)` with `Q = (pτ s R_AP + I)^{-1}`.
    pub fn phi(&self, p_tau: f64, s: f64) -> f64 {
        let num: f64 = self.lambda.iter().map(|&l| l * l / (1.0 + p_tau * s * l)).sum();
        p_tau * num / self.trace
    }

    /// Derivative of [`phi`](Self::phi) with respect to `s`.
    pub fn dphi(&self, p_tau: f64, s: f64) -> f64 {
        let num: f64 = self
            .lambda
            .iter()
            .map(|&l| {
                let d = 1.0 + p_tau * s * l;
                l * l * l / (d * d)
            })
            .sum();
        -p_tau * p_tau * num / self.trace
    }

    /// Eigenvalues of `Q` for pilot load `s`.
    pub fn q_diag(&self, p_tau: f64, s: f64) -> Vec<f64> {
        self.lambda.iter().map(|&l| 1.0 / (1.0 + p_tau * s * l)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct EstimationStats {
    pub p_tau: f64,
    pub spectrum: ApSpectrum,
    /// `tr(R̃_mk)`, M×K.
    pub traces: DMatrix<f64>,
    /// Pilot load per AP and pilot index, M×τ.
    pub loads: DMatrix<f64>,
    pub pilot_of: Vec<usize>,
    pub groups: Vec<Vec<usize>>,
    /// `tr(Ψ_mk)`, M×K.
    pub psi_trace: DMatrix<f64>,
    pub nmse: DMatrix<f64>,
    /// Links with `tr(R_mk) = 0`.
    pub dark_links: usize,
    ap: CMat,
}

impl EstimationStats {
    pub fn new(
        layout: &NetworkLayout,
        kernels: &Kernels,
        pb: &PassiveBeamforming,
        p: f64,
        tau: usize,
    ) -> Result<Self> {
        if pb.len() != kernels.n() {
            return Err(Error::Dimension(format!(
                "surface state has {} elements, kernel has {}",
                pb.len(),
                kernels.n()
            )));
        }
        let traces = cascaded_traces(layout, kernels, pb);
        Self::from_traces(layout, kernels, traces, p * tau as f64)
    }

    /// Statistics from precomputed link traces.
    pub fn from_traces(
        layout: &NetworkLayout,
        kernels: &Kernels,
        traces: DMatrix<f64>,
        p_tau: f64,
    ) -> Result<Self> {
        if !(p_tau >= 0.0 && p_tau.is_finite()) {
            return Err(Error::Domain(format!("pilot energy must be finite and nonnegative (got {p_tau})")));
        }
        let (m_count, k_count) = (layout.m(), layout.k());
        if traces.nrows() != m_count || traces.ncols() != k_count {
            return Err(Error::Dimension("trace matrix does not match the layout".into()));
        }
        let spectrum = ApSpectrum::new(kernels.ap_eigenvalues.clone());
        let groups = layout.pilots.groups.clone();
        let loads = DMatrix::from_fn(m_count, groups.len(), |m, g| {
            groups[g].iter().map(|&l| traces[(m, l)]).sum()
        });
        let pilot_of = layout.pilots.pilot_of.clone();
        let mut psi_trace = DMatrix::zeros(m_count, k_count);
        let mut nmse = DMatrix::zeros(m_count, k_count);
        let mut dark_links = 0;
        for m in 0..m_count {
            for k in 0..k_count {
                let t = traces[(m, k)];
                let phi = spectrum.phi(p_tau, loads[(m, pilot_of[k])]);
                // tr Ψ = t² pτ tr(R_AP Q R_AP)
                psi_trace[(m, k)] = t * t * phi * spectrum.trace;
                nmse[(m, k)] = if t > 0.0 {
                    (1.0 - t * phi).clamp(0.0, 1.0)
                } else {
                    dark_links += 1;
                    1.0
                };
            }
        }
        if dark_links > 0 {
            log::warn!("{dark_links} link(s) have zero channel energy; their NMSE is set to 1");
        }
        Ok(EstimationStats {
            p_tau,
            spectrum,
            traces,
            loads,
            pilot_of,
            groups,
            psi_trace,
            nmse,
            dark_links,
            ap: kernels.ap.clone(),
        })
    }

    pub fn m(&self) -> usize {
        self.traces.nrows()
    }

    pub fn k(&self) -> usize {
        self.traces.ncols()
    }

    pub fn l(&self) -> usize {
        self.ap.nrows()
    }

    pub fn group_of(&self, k: usize) -> usize {
        self.pilot_of[k]
    }

    /// Pilot load seen by UE `k` at AP `m`.
    pub fn load(&self, m: usize, k: usize) -> f64 {
        self.loads[(m, self.pilot_of[k])]
    }

    /// `R_mk`.
    pub fn r(&self, m: usize, k: usize) -> CMat {
        self.ap.scale(self.traces[(m, k)])
    }

    /// `Q_{m,g} = (pτ Σ_{l∈g} R_ml + I_L)^{-1}`.
    pub fn pilot_gram_inverse(&self, m: usize, group: usize) -> Result<CMat> {
        let l = self.l();
        let gram = self.ap.scale(self.p_tau * self.loads[(m, group)]) + CMat::identity(l, l);
        hpd_inverse(&gram)
    }

    /// `Ψ_mk = pτ R_mk Q_{m,g(k)} R_mk`.
    pub fn estimate_covariance(&self, m: usize, k: usize) -> Result<CMat> {
        let r = self.r(m, k);
        let q = self.pilot_gram_inverse(m, self.group_of(k))?;
        Ok(hermitize(&(&r * q * &r).scale(self.p_tau)))
    }

    pub fn nmse_link(&self, m: usize, k: usize) -> f64 {
        self.nmse[(m, k)]
    }

    /// Sum of the NMSE over all links.
    pub fn total_nmse(&self) -> f64 {
        self.nmse.iter().sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{c, check_psd, identity, max_abs_diff, trace};
    use crate::net_config::{assign_pilots, PilotPolicy};
    use crate::spatial_correlation::{ap_correlation, ris_correlation, ApCorrelation};
    use crate::star_ris::Region;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_setup(c_val: f64, l: usize) -> (NetworkLayout, Kernels) {
        // identity kernels on a one-element surface make tr(R̃) = β̃_m β̃_k β_t²
        let lay = NetworkLayout::from_gains(
            vec![c_val],
            vec![1.0],
            vec![Region::T],
            assign_pilots(1, 1, &PilotPolicy::RoundRobin).unwrap(),
        )
        .unwrap();
        (lay, Kernels::new(identity(1), identity(l)).unwrap())
    }

    fn t_only() -> PassiveBeamforming {
        PassiveBeamforming::mode_switching(&[true], vec![c(1.0)], vec![c(1.0)])
    }

    #[test]
    fn scalar_case() {
        let (lay, kern) = scalar_setup(1.0, 3);
        let st = EstimationStats::new(&lay, &kern, &t_only(), 1.0, 1).unwrap();
        let q = st.pilot_gram_inverse(0, 0).unwrap();
        assert!(max_abs_diff(&q, &identity(3).scale(0.5)) < 1e-15);
        let psi = st.estimate_covariance(0, 0).unwrap();
        assert!(max_abs_diff(&psi, &identity(3).scale(0.5)) < 1e-15);
        assert!((st.psi_trace[(0, 0)] - 1.5).abs() < 1e-15);
        assert!((st.nmse_link(0, 0) - 0.5).abs() < 1e-15);

        let (lay, kern) = scalar_setup(2.0, 2);
        let st = EstimationStats::new(&lay, &kern, &t_only(), 1.0, 1).unwrap();
        assert!((st.psi_trace[(0, 0)] - 2.0 * 4.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn pilot_power_limits() {
        let (lay, kern) = scalar_setup(0.8, 2);
        let off = EstimationStats::new(&lay, &kern, &t_only(), 0.0, 1).unwrap();
        assert_eq!(off.pilot_gram_inverse(0, 0).unwrap(), identity(2));
        assert_eq!(off.nmse_link(0, 0), 1.0);
        let strong = EstimationStats::new(&lay, &kern, &t_only(), 1e6, 1).unwrap();
        let psi = strong.estimate_covariance(0, 0).unwrap();
        let r = strong.r(0, 0);
        assert!(max_abs_diff(&psi, &r) / r.norm() < 1e-4);
        assert!(strong.nmse_link(0, 0) < 1e-5);
    }

    fn random_instance(seed: u64, p: f64) -> EstimationStats {
        let lambda = 0.1578;
        let d = lambda / 4.0;
        let kern = Kernels::new(
            ris_correlation(3, 2, d, d, lambda).unwrap(),
            ap_correlation(3, ApCorrelation::Exponential { rho: 0.6 }).unwrap(),
        )
        .unwrap();
        let lay = NetworkLayout::from_gains(
            vec![1.0, 0.3],
            vec![2.0, 1.0, 0.5],
            vec![Region::T, Region::R, Region::R],
            assign_pilots(3, 2, &PilotPolicy::RoundRobin).unwrap(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pb = PassiveBeamforming::random(6, &mut rng);
        EstimationStats::new(&lay, &kern, &pb, p, 2).unwrap()
    }

    #[test]
    fn gram_residual_and_spectral_path() {
        let st = random_instance(7, 1e5);
        for m in 0..2 {
            for g in 0..2 {
                let q = st.pilot_gram_inverse(m, g).unwrap();
                let gram = st.ap.scale(st.p_tau * st.loads[(m, g)]) + identity(3);
                assert!(max_abs_diff(&(q * gram), &identity(3)) < 1e-10);
            }
            for k in 0..3 {
                let psi = st.estimate_covariance(m, k).unwrap();
                check_psd(&psi, "Ψ").unwrap();
                let tr_r = trace(&st.r(m, k)).re;
                let tr_psi = trace(&psi).re;
                assert!(tr_psi <= tr_r * (1.0 + 1e-12));
                assert!((tr_psi - st.psi_trace[(m, k)]).abs() <= 1e-10 * tr_psi);
                let nmse = 1.0 - tr_psi / tr_r;
                assert!((nmse - st.nmse_link(m, k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn contamination_raises_error() {
        let st = random_instance(8, 1e5);
        // UE 0 and UE 2 share pilot 0; UE 1 is alone
        assert_eq!(st.groups[0], vec![0, 2]);
        assert!(st.load(0, 0) > st.traces[(0, 0)]);
    }

    #[test]
    fn nmse_non_increasing_in_pilot_power() {
        let (lay, kern) = scalar_setup(0.5, 2);
        let mut prev = f64::INFINITY;
        for e in -3..=6 {
            let st = EstimationStats::new(&lay, &kern, &t_only(), 10f64.powi(e), 1).unwrap();
            let v = st.total_nmse();
            assert!((0.0..=1.0).contains(&v));
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn dark_link_counts_as_full_error() {
        let (lay, kern) = scalar_setup(1.0, 2);
        let pb = PassiveBeamforming::mode_switching(&[false], vec![c(1.0)], vec![c(1.0)]);
        let st = EstimationStats::new(&lay, &kern, &pb, 1.0, 1).unwrap();
        assert_eq!(st.dark_links, 1);
        assert_eq!(st.total_nmse(), 1.0);
    }

    #[test]
    fn phi_derivative_matches_difference_quotient() {
        let sp = ApSpectrum::new(vec![0.2, 0.7, 2.1]);
        let (pt, s, h) = (3.0, 0.4, 1e-6);
        let fd = (sp.phi(pt, s + h) - sp.phi(pt, s - h)) / (2.0 * h);
        assert!((fd - sp.dphi(pt, s)).abs() < 1e-8 * fd.abs());
    }
}
