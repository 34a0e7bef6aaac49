//! Projected gradient minimization of the total NMSE over the surface
//! amplitudes and phases, with Armijo backtracking.
//!
//! The objective depends on the surface only through the two region gains
//! `c_w = x_w^H P x_w` (`x_w = β_w ∘ θ_w`, `P_ij = |[R_RIS]_ij|²`), so the
//! gradient is a chain rule through the link traces `t_mk = β̃_m β̃_k c_{w_k}`.
//! With `s_mg` the pilot load of group `g` at AP `m` and `φ_m` as in
//! [`ApSpectrum::phi`], the total NMSE is `Σ_m Σ_k (1 − t_mk φ_m(s_{m,g(k)}))`
//! and
//!
//! ```text
//! ∂f/∂t_ml = −φ_m(s_mg) − φ'_m(s_mg) Σ_{k∈g} t_mk,      g = g(l).
//! ```
//!
//! The second term couples all UEs that share a pilot.

use std::time::Instant;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation_stats::{ApSpectrum, EstimationStats};
use crate::net_config::NetworkLayout;
use crate::spatial_correlation::{cascaded_traces, Kernels};
use crate::star_ris::{project_beta, project_theta, PassiveBeamforming, Protocol, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    ClosedForm,
    FiniteDifference,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub mu0: f64,
    pub kappa: f64,
    pub max_iters: usize,
    /// Stop when the relative objective change falls below this.
    pub tol: f64,
    pub grad_mode: GradMode,
    /// Line-search trials allowed per iteration.
    pub max_trials: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            mu0: 1.0,
            kappa: 0.5,
            max_iters: 500,
            tol: 1e-6,
            grad_mode: GradMode::ClosedForm,
            max_trials: 200,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(Error::Config(format!("kappa must lie in (0,1) (got {})", self.kappa)));
        }
        if !(self.mu0 > 0.0 && self.mu0.is_finite()) {
            return Err(Error::Config(format!("mu0 must be positive (got {})", self.mu0)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::Config(format!("tol must be positive (got {})", self.tol)));
        }
        if self.max_trials == 0 {
            return Err(Error::Config("max_trials must be positive".into()));
        }
        Ok(())
    }
}

/// Gradient of the total NMSE. Phase entries are derivatives with respect to
/// the conjugate phases; amplitude entries are ordinary partial derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub theta_t: Vec<Complex64>,
    pub theta_r: Vec<Complex64>,
    pub beta_t: Vec<f64>,
    pub beta_r: Vec<f64>,
}

impl Gradient {
    pub fn theta(&self, region: Region) -> &[Complex64] {
        match region {
            Region::T => &self.theta_t,
            Region::R => &self.theta_r,
        }
    }

    pub fn beta(&self, region: Region) -> &[f64] {
        match region {
            Region::T => &self.beta_t,
            Region::R => &self.beta_r,
        }
    }

    /// Gradient in real coordinates, ordered as [`pack`].
    pub fn euclidean(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(6 * self.beta_t.len());
        for th in [&self.theta_t, &self.theta_r] {
            out.extend(th.iter().map(|g| 2.0 * g.re));
            out.extend(th.iter().map(|g| 2.0 * g.im));
        }
        out.extend(&self.beta_t);
        out.extend(&self.beta_r);
        out
    }

    fn max_abs(&self, phases_only: bool) -> f64 {
        let th = self.theta_t.iter().chain(&self.theta_r).map(|g| 2.0 * g.norm());
        let mut m = th.fold(0.0f64, f64::max);
        if !phases_only {
            m = self.beta_t.iter().chain(&self.beta_r).fold(m, |a, b| a.max(b.abs()));
        }
        m
    }
}

/// Real coordinates `[Re θ_t, Im θ_t, Re θ_r, Im θ_r, β_t, β_r]`.
pub fn pack(pb: &PassiveBeamforming) -> Vec<f64> {
    let mut out = Vec::with_capacity(6 * pb.len());
    for th in [&pb.theta_t, &pb.theta_r] {
        out.extend(th.iter().map(|z| z.re));
        out.extend(th.iter().map(|z| z.im));
    }
    out.extend(&pb.beta_t);
    out.extend(&pb.beta_r);
    out
}

/// Inverse of [`pack`]; no projection is applied.
pub fn unpack(x: &[f64], protocol: Protocol) -> PassiveBeamforming {
    let n = x.len() / 6;
    let theta = |o: usize| (0..n).map(|i| Complex64::new(x[o + i], x[o + n + i])).collect();
    PassiveBeamforming {
        theta_t: theta(0),
        theta_r: theta(2 * n),
        beta_t: x[4 * n..5 * n].to_vec(),
        beta_r: x[5 * n..].to_vec(),
        protocol,
    }
}

/// Total-NMSE minimization problem for a fixed layout and pilot energy.
#[derive(Debug, Clone)]
pub struct NmseProblem<'a> {
    pub layout: &'a NetworkLayout,
    pub kernels: &'a Kernels,
    pub p_tau: f64,
    spectrum: ApSpectrum,
}

impl<'a> NmseProblem<'a> {
    pub fn new(layout: &'a NetworkLayout, kernels: &'a Kernels, p: f64, tau: usize) -> Self {
        NmseProblem {
            layout,
            kernels,
            p_tau: p * tau as f64,
            spectrum: ApSpectrum::new(kernels.ap_eigenvalues.clone()),
        }
    }

    pub fn stats(&self, pb: &PassiveBeamforming) -> Result<EstimationStats> {
        EstimationStats::from_traces(self.layout, self.kernels, cascaded_traces(self.layout, self.kernels, pb), self.p_tau)
    }

    pub fn objective(&self, pb: &PassiveBeamforming) -> Result<f64> {
        Ok(self.stats(pb)?.total_nmse())
    }

    /// Objective at an arbitrary (not necessarily feasible) real point, with
    /// the region gains evaluated as a full quadratic form. Used by the
    /// finite-difference oracle.
    pub fn objective_unconstrained(&self, x: &[f64]) -> f64 {
        let pb = unpack(x, Protocol::Es);
        let p = &self.kernels.ris_sq;
        let gain = |region: Region| {
            let v = pb.coefficients(region);
            let mut acc = 0.0;
            for i in 0..v.len() {
                for j in 0..v.len() {
                    acc += (v[i].conj() * v[j]).re * p[(i, j)];
                }
            }
            acc
        };
        let gains = [gain(Region::T), gain(Region::R)];
        let lay = self.layout;
        let groups = &lay.pilots.groups;
        let mut total = 0.0;
        for m in 0..lay.m() {
            for g in groups {
                let t: Vec<f64> = g
                    .iter()
                    .map(|&k| lay.beta_ap_ris[m] * lay.beta_ris_ue[k] * gains[lay.region[k].index()])
                    .collect();
                let s: f64 = t.iter().sum();
                let phi = self.spectrum.phi(self.p_tau, s);
                total += t.iter().map(|tk| 1.0 - tk * phi).sum::<f64>();
            }
        }
        total
    }

    /// `∂f/∂c_w` for both regions.
    fn region_sensitivity(&self, stats: &EstimationStats) -> [f64; 2] {
        let lay = self.layout;
        let mut alpha = [0.0; 2];
        for m in 0..lay.m() {
            for (g, members) in stats.groups.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let s = stats.loads[(m, g)];
                let phi = self.spectrum.phi(self.p_tau, s);
                let dphi = self.spectrum.dphi(self.p_tau, s);
                // Σ_{k∈g} t_mk equals the load itself
                let dt = -phi - dphi * s;
                for &l in members {
                    alpha[lay.region[l].index()] += dt * lay.beta_ap_ris[m] * lay.beta_ris_ue[l];
                }
            }
        }
        alpha
    }

    pub fn gradient(&self, stats: &EstimationStats, pb: &PassiveBeamforming) -> Gradient {
        let alpha = self.region_sensitivity(stats);
        let p = &self.kernels.ris_sq;
        let n = pb.len();
        let mut out = Gradient {
            theta_t: vec![Complex64::new(0.0, 0.0); n],
            theta_r: vec![Complex64::new(0.0, 0.0); n],
            beta_t: vec![0.0; n],
            beta_r: vec![0.0; n],
        };
        for region in Region::BOTH {
            let a = alpha[region.index()];
            let x = pb.coefficients(region);
            let beta = pb.beta(region);
            let theta = pb.theta(region);
            let (gt, gb) = match region {
                Region::T => (&mut out.theta_t, &mut out.beta_t),
                Region::R => (&mut out.theta_r, &mut out.beta_r),
            };
            for i in 0..n {
                let mut px = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    px += x[j] * p[(i, j)];
                }
                gt[i] = px * (a * beta[i]);
                gb[i] = 2.0 * a * (theta[i].conj() * px).re;
            }
        }
        out
    }

    /// Gradient by central differences on the unconstrained objective.
    pub fn gradient_fd(&self, pb: &PassiveBeamforming, h: f64) -> Gradient {
        let e = fd_gradient(|x| self.objective_unconstrained(x), &pack(pb), h);
        let n = pb.len();
        let theta = |o: usize| (0..n).map(|i| Complex64::new(e[o + i], e[o + n + i]) * 0.5).collect();
        Gradient {
            theta_t: theta(0),
            theta_r: theta(2 * n),
            beta_t: e[4 * n..5 * n].to_vec(),
            beta_r: e[5 * n..].to_vec(),
        }
    }
}

/// Phase part of the gradient, `(∇_{θ_t}, ∇_{θ_r})`.
pub fn grad_theta(problem: &NmseProblem, stats: &EstimationStats, pb: &PassiveBeamforming) -> (Vec<Complex64>, Vec<Complex64>) {
    let g = problem.gradient(stats, pb);
    (g.theta_t, g.theta_r)
}

/// Amplitude part of the gradient, `(∇_{β_t}, ∇_{β_r})`.
pub fn grad_beta(problem: &NmseProblem, stats: &EstimationStats, pb: &PassiveBeamforming) -> (Vec<f64>, Vec<f64>) {
    let g = problem.gradient(stats, pb);
    (g.beta_t, g.beta_r)
}

/// Central-difference gradient of a real function of real coordinates.
pub fn fd_gradient<F: Fn(&[f64]) -> f64>(objective: F, point: &[f64], h: f64) -> Vec<f64> {
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = objective(&x);
            x[i] = orig - h;
            let down = objective(&x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub step: f64,
    pub trials: usize,
    pub feasibility: f64,
    /// Surrogate value at the accepted point (equal to `objective` for the
    /// starting row).
    pub surrogate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimTrace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    pub seconds: f64,
}

impl OptimTrace {
    /// Accepted iterations (the starting point is not counted).
    pub fn iterations(&self) -> usize {
        self.rows.len().saturating_sub(1)
    }

    pub fn final_objective(&self) -> f64 {
        self.rows.last().map_or(f64::NAN, |r| r.objective)
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["iter", "objective", "step", "trials"])?;
        for r in &self.rows {
            wr.write_record([
                r.iter.to_string(),
                r.objective.to_string(),
                r.step.to_string(),
                r.trials.to_string(),
            ])?;
        }
        wr.flush().map_err(|e| Error::Io { path: "<trace>".into(), source: e })?;
        Ok(())
    }
}

fn take_step(pb: &PassiveBeamforming, g: &Gradient, mu: f64, phases_only: bool) -> PassiveBeamforming {
    let step_theta = |th: &[Complex64], gr: &[Complex64]| {
        let raw: Vec<Complex64> = th.iter().zip(gr).map(|(t, d)| t - d * mu).collect();
        project_theta(&raw)
    };
    let mut out = pb.clone();
    out.theta_t = step_theta(&pb.theta_t, &g.theta_t);
    out.theta_r = step_theta(&pb.theta_r, &g.theta_r);
    if !phases_only {
        let bt: Vec<f64> = pb.beta_t.iter().zip(&g.beta_t).map(|(b, d)| b - mu * d).collect();
        let br: Vec<f64> = pb.beta_r.iter().zip(&g.beta_r).map(|(b, d)| b - mu * d).collect();
        let (bt, br) = project_beta(&bt, &br);
        out.beta_t = bt;
        out.beta_r = br;
    }
    out
}

/// Quadratic upper model around `pb` evaluated at `next`, in the scaled
/// objective units. The penalty weights match the step lengths used for each
/// block, so the unprojected step minimizes the model.
fn surrogate(f: f64, pb: &PassiveBeamforming, next: &PassiveBeamforming, g: &Gradient, mu: f64) -> f64 {
    let mut lin = 0.0;
    let mut quad_theta = 0.0;
    let mut quad_beta = 0.0;
    for region in Region::BOTH {
        for ((a, b), d) in pb.theta(region).iter().zip(next.theta(region)).zip(g.theta(region)) {
            let delta = b - a;
            lin += 2.0 * (d.conj() * delta).re;
            quad_theta += delta.norm_sqr();
        }
        for ((a, b), d) in pb.beta(region).iter().zip(next.beta(region)).zip(g.beta(region)) {
            let delta = b - a;
            lin += d * delta;
            quad_beta += delta * delta;
        }
    }
    f + lin + quad_theta / mu + quad_beta / (2.0 * mu)
}

/// Projected gradient descent with backtracking. Energy splitting updates
/// phases and amplitudes; mode switching keeps its binary amplitudes and
/// updates phases only.
pub fn pgam_run(
    problem: &NmseProblem,
    pb0: &PassiveBeamforming,
    cfg: &OptimizerConfig,
) -> Result<(PassiveBeamforming, OptimTrace)> {
    cfg.validate()?;
    pb0.validate()?;
    let start = Instant::now();
    let phases_only = pb0.protocol == Protocol::Ms;
    let gradient = |pb: &PassiveBeamforming, stats: &EstimationStats| match cfg.grad_mode {
        GradMode::ClosedForm => problem.gradient(stats, pb),
        GradMode::FiniteDifference => problem.gradient_fd(pb, 1e-6),
    };

    let mut pb = pb0.clone();
    let mut stats = problem.stats(&pb)?;
    let mut f = stats.total_nmse();
    if !f.is_finite() {
        return Err(Error::NonFinite(format!("initial objective {f}")));
    }
    let mut grad = gradient(&pb, &stats);
    // Work in units where the largest initial gradient entry is one, so that
    // the default step is meaningful regardless of the path-loss scale.
    let scale = {
        let g = grad.max_abs(phases_only);
        if g > 0.0 && g.is_finite() {
            1.0 / g
        } else {
            1.0
        }
    };
    let mut mu = cfg.mu0;
    let mut trace = OptimTrace::default();
    trace.rows.push(TraceRow {
        iter: 0,
        objective: f,
        step: mu,
        trials: 0,
        feasibility: pb.feasibility_residual(),
        surrogate: f,
    });

    for iter in 1..=cfg.max_iters {
        let scaled = scale_gradient(&grad, scale);
        let mut accepted = None;
        for trial in 1..=cfg.max_trials {
            let next = take_step(&pb, &scaled, mu, phases_only);
            let next_stats = problem.stats(&next)?;
            let f_next = next_stats.total_nmse();
            if !f_next.is_finite() {
                return Err(Error::NonFinite(format!("objective at iteration {iter}")));
            }
            let model = surrogate(f * scale, &pb, &next, &scaled, mu);
            if f_next * scale <= model && f_next <= f {
                accepted = Some((next, next_stats, f_next, trial, model / scale));
                break;
            }
            mu *= cfg.kappa;
        }
        let Some((next, next_stats, f_next, trials, model)) = accepted else {
            // no decrease available at any tried step: stationary to
            // working precision
            trace.converged = true;
            break;
        };
        let change = (f - f_next).abs() / f.abs().max(f64::MIN_POSITIVE);
        pb = next;
        stats = next_stats;
        f = f_next;
        trace.rows.push(TraceRow {
            iter,
            objective: f,
            step: mu,
            trials,
            feasibility: pb.feasibility_residual(),
            surrogate: model,
        });
        if change < cfg.tol {
            trace.converged = true;
            break;
        }
        grad = gradient(&pb, &stats);
    }
    trace.seconds = start.elapsed().as_secs_f64();
    log::debug!(
        "pgam: {} iterations, objective {:.6e} -> {:.6e}",
        trace.iterations(),
        trace.rows[0].objective,
        f
    );
    Ok((pb, trace))
}

fn scale_gradient(g: &Gradient, s: f64) -> Gradient {
    Gradient {
        theta_t: g.theta_t.iter().map(|z| z * s).collect(),
        theta_r: g.theta_r.iter().map(|z| z * s).collect(),
        beta_t: g.beta_t.iter().map(|v| v * s).collect(),
        beta_r: g.beta_r.iter().map(|v| v * s).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::identity;
    use crate::net_config::{assign_pilots, PilotPolicy};
    use crate::spatial_correlation::{ap_correlation, ris_correlation, ApCorrelation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn instance(kernel_identity: bool) -> (NetworkLayout, Kernels) {
        let lambda = 0.1578;
        let d = lambda / 4.0;
        let ris = if kernel_identity {
            identity(6)
        } else {
            ris_correlation(3, 2, d, d, lambda).unwrap().scale(1.0 / (d * d))
        };
        let kern = Kernels::new(ris, ap_correlation(2, ApCorrelation::Exponential { rho: 0.5 }).unwrap()).unwrap();
        let lay = NetworkLayout::from_gains(
            vec![0.9, 0.4],
            vec![0.3, 0.2, 0.5],
            vec![Region::T, Region::R, Region::R],
            assign_pilots(3, 2, &PilotPolicy::RoundRobin).unwrap(),
        )
        .unwrap();
        (lay, kern)
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    #[test]
    fn closed_form_matches_differences() {
        let (lay, kern) = instance(false);
        let prob = NmseProblem::new(&lay, &kern, 0.7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let pb = PassiveBeamforming::random(6, &mut rng);
            let stats = prob.stats(&pb).unwrap();
            assert!((prob.objective_unconstrained(&pack(&pb)) - stats.total_nmse()).abs() < 1e-12);
            let cf = prob.gradient(&stats, &pb).euclidean();
            let fd = prob.gradient_fd(&pb, 1e-6).euclidean();
            assert!(rel_err(&cf, &fd) < 1e-7, "{}", rel_err(&cf, &fd));
        }
    }

    #[test]
    fn dark_region_has_zero_phase_gradient() {
        let (lay, kern) = instance(false);
        let prob = NmseProblem::new(&lay, &kern, 0.7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pb = PassiveBeamforming::mode_switching_random(&[false; 6], &mut rng);
        let stats = prob.stats(&pb).unwrap();
        let (gt, _) = grad_theta(&prob, &stats, &pb);
        assert!(gt.iter().all(|z| *z == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn identity_kernel_phase_step_is_fixed_point() {
        let (lay, kern) = instance(true);
        let prob = NmseProblem::new(&lay, &kern, 0.7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pb = PassiveBeamforming::random(6, &mut rng);
        let stats = prob.stats(&pb).unwrap();
        let g = prob.gradient(&stats, &pb);
        for mu in [0.1, 1.0, 10.0] {
            let next = take_step(&pb, &g, mu, true);
            for (a, b) in next.theta_t.iter().zip(&pb.theta_t) {
                assert!((a - b).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn identity_kernel_amplitude_gradient() {
        // with P = I and θ = 1, ∂c_w/∂β = 2β
        let (lay, kern) = instance(true);
        let prob = NmseProblem::new(&lay, &kern, 0.7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut pb = PassiveBeamforming::random(6, &mut rng);
        pb.theta_t = vec![Complex64::new(1.0, 0.0); 6];
        let stats = prob.stats(&pb).unwrap();
        let alpha = prob.region_sensitivity(&stats);
        let (gbt, _) = grad_beta(&prob, &stats, &pb);
        for (g, b) in gbt.iter().zip(&pb.beta_t) {
            assert!((g - 2.0 * alpha[0] * b).abs() <= 1e-14 * g.abs());
        }
    }

    #[test]
    fn fd_on_simple_functions() {
        let a = [1.0, -2.0, 0.5];
        let g = fd_gradient(|x| x.iter().zip(&a).map(|(xi, ai)| (xi - ai).powi(2)).sum(), &[0.3, 0.1, 2.0], 1e-5);
        for ((gi, xi), ai) in g.iter().zip([0.3, 0.1, 2.0]).zip(a) {
            assert!((gi - 2.0 * (xi - ai)).abs() < 1e-8);
        }
        let lin = fd_gradient(|x| 3.0 * x[0] - x[1], &[1.0, 2.0], 0.5);
        assert_eq!(lin, vec![3.0, -1.0]);
    }

    #[test]
    fn descent_from_random_start() {
        let (lay, kern) = instance(false);
        let prob = NmseProblem::new(&lay, &kern, 0.7, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pb0 = PassiveBeamforming::random(6, &mut rng);
        let (pb, trace) = pgam_run(&prob, &pb0, &OptimizerConfig::default()).unwrap();
        pb.validate().unwrap();
        assert!(trace.final_objective() <= trace.rows[0].objective);
        for w in trace.rows.windows(2) {
            assert!(w[1].objective <= w[0].objective);
            assert!(w[1].objective <= w[1].surrogate);
        }
        assert!(trace.rows.iter().all(|r| r.feasibility <= 1e-10 && r.trials <= 200));
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        OptimTrace::default().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iter,objective,step,trials\n");
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = OptimizerConfig { kappa: 1.0, ..OptimizerConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
