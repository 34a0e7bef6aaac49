//! Monte-Carlo estimators for every expectation that has a closed form in
//! this crate.
//!
//! Trial `t` draws from its own ChaCha stream keyed by `(seed, t)`. Trials are
//! split into a fixed set of contiguous batches that depends only on the
//! trial count; batches run in parallel, each is reduced serially with
//! compensated sums, and batch results are combined in order. Results are
//! therefore bit-identical for any thread count.

use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel_sampler::{complex_normal_vec, simulate_pilot_phase, ChannelModel, LmmseEstimator};
use crate::error::{Error, Result};
use crate::estimation_stats::EstimationStats;
use crate::linalg::{CMat, CVec};
use crate::net_config::NetworkLayout;
use crate::performance::PowerAllocation;
use crate::spatial_correlation::Kernels;
use crate::star_ris::PassiveBeamforming;

/// Upper bound on the number of batches (and jackknife groups).
pub const MAX_BATCHES: usize = 100;

/// Independent random stream for one trial.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Contiguous batches covering `0..trials`.
pub fn batches(trials: usize) -> Vec<Range<usize>> {
    let nb = trials.clamp(1, MAX_BATCHES);
    (0..nb).map(|b| b * trials / nb..(b + 1) * trials / nb).collect()
}

/// Neumaier compensated sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// A fixed-length vector of compensated sums.
#[derive(Debug, Clone, PartialEq)]
pub struct SumVec(Vec<CompensatedSum>);

impl SumVec {
    pub fn zeros(n: usize) -> Self {
        SumVec(vec![CompensatedSum::default(); n])
    }

    pub fn add(&mut self, i: usize, x: f64) {
        self.0[i].add(x);
    }

    pub fn merge(&mut self, other: &SumVec) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.add(b.value());
        }
    }

    pub fn values(&self) -> Vec<f64> {
        self.0.iter().map(CompensatedSum::value).collect()
    }
}

/// Runs `trial` for every trial index and returns one accumulator per batch,
/// in batch order.
pub fn run_batches<F>(trials: usize, width: usize, seed: u64, trial: F) -> Vec<(usize, SumVec)>
where
    F: Fn(&mut ChaCha8Rng, &mut SumVec) + Sync,
{
    batches(trials)
        .into_par_iter()
        .map(|range| {
            let mut acc = SumVec::zeros(width);
            let count = range.len();
            for t in range {
                let mut rng = trial_rng(seed, t as u64);
                trial(&mut rng, &mut acc);
            }
            (count, acc)
        })
        .collect()
}

/// Totals over all batches, combined in batch order.
pub fn combine(parts: &[(usize, SumVec)]) -> (usize, Vec<f64>) {
    let width = parts.first().map_or(0, |p| p.1 .0.len());
    let mut total = SumVec::zeros(width);
    let mut n = 0;
    for (c, s) in parts {
        total.merge(s);
        n += c;
    }
    (n, total.values())
}

/// Delete-one-batch jackknife of a statistic of the per-trial means.
/// Returns `(estimate, std_error)`.
pub fn jackknife<F: Fn(&[f64]) -> f64>(parts: &[(usize, SumVec)], stat: F) -> (f64, f64) {
    let (n, total) = combine(parts);
    let means = |sums: &[f64], count: usize| -> Vec<f64> { sums.iter().map(|s| s / count as f64).collect() };
    let full = stat(&means(&total, n));
    let g = parts.len();
    if g < 2 {
        return (full, f64::NAN);
    }
    let leave_out: Vec<f64> = parts
        .iter()
        .map(|(c, s)| {
            let sums: Vec<f64> = total.iter().zip(s.values()).map(|(t, v)| t - v).collect();
            stat(&means(&sums, n - c))
        })
        .collect();
    let avg = leave_out.iter().sum::<f64>() / g as f64;
    let var = leave_out.iter().map(|v| (v - avg).powi(2)).sum::<f64>() * (g - 1) as f64 / g as f64;
    (full, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub trials: usize,
}

impl McEstimate {
    /// Number of standard errors between the estimate and `reference`.
    pub fn z_score(&self, reference: f64) -> f64 {
        (self.mean - reference).abs() / self.std_error
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McComplexEstimate {
    pub mean: Complex64,
    /// Standard error of the complex mean, `sqrt(var(re) + var(im)) / √T`.
    pub std_error: f64,
    pub trials: usize,
}

impl McComplexEstimate {
    pub fn z_score(&self, reference: Complex64) -> f64 {
        (self.mean - reference).norm() / self.std_error
    }
}

fn check_trials(trials: usize, min: usize) -> Result<()> {
    if trials < min {
        return Err(Error::Config(format!("need at least {min} trials (got {trials})")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Estimation error

#[derive(Debug, Clone, PartialEq)]
pub struct NmseMc {
    /// Ratio-of-means NMSE per link.
    pub per_link: DMatrix<McEstimate>,
    /// Sum of the per-link ratios.
    pub total: McEstimate,
}

/// Ratio-of-means NMSE, `Σ‖ĥ − h‖² / Σ‖h‖²` per link.
pub fn mc_nmse(
    layout: &NetworkLayout,
    kernels: &Kernels,
    pb: &PassiveBeamforming,
    p: f64,
    tau: usize,
    trials: usize,
    seed: u64,
) -> Result<NmseMc> {
    check_trials(trials, 100)?;
    let stats = EstimationStats::new(layout, kernels, pb, p, tau)?;
    let model = ChannelModel::new(layout, kernels, pb)?;
    let est = LmmseEstimator::new(&stats, kernels)?;
    let links = layout.m() * layout.k();
    // per link: Σa, Σb, Σa², Σb², Σab with a = ‖e‖², b = ‖h‖²
    let parts = run_batches(trials, 5 * links, seed, |rng, acc| {
        let real = model.sample(rng);
        let obs = simulate_pilot_phase(&real, layout, p, tau, rng);
        let hat = est.estimate_all(&obs);
        for (idx, (h, hh)) in real.h.iter().zip(&hat).enumerate() {
            let a = (hh - h).norm_squared();
            let b = h.norm_squared();
            let o = 5 * idx;
            acc.add(o, a);
            acc.add(o + 1, b);
            acc.add(o + 2, a * a);
            acc.add(o + 3, b * b);
            acc.add(o + 4, a * b);
        }
    });
    let (n, s) = combine(&parts);
    let nf = n as f64;
    let per_link = DMatrix::from_fn(layout.m(), layout.k(), |m, k| {
        let o = 5 * (m * layout.k() + k);
        let (ma, mb) = (s[o] / nf, s[o + 1] / nf);
        if mb == 0.0 {
            return McEstimate { mean: 1.0, std_error: 0.0, trials: n };
        }
        let r = ma / mb;
        // delta method: var(a − r b) / (T E[b]²)
        let var_a = s[o + 2] / nf - ma * ma;
        let var_b = s[o + 3] / nf - mb * mb;
        let cov = s[o + 4] / nf - ma * mb;
        let var = (var_a - 2.0 * r * cov + r * r * var_b).max(0.0) * nf / (nf - 1.0);
        McEstimate { mean: r, std_error: (var / nf).sqrt() / mb, trials: n }
    });
    let (total, total_se) = jackknife(&parts, |means| {
        (0..links)
            .map(|i| if means[5 * i + 1] > 0.0 { means[5 * i] / means[5 * i + 1] } else { 1.0 })
            .sum()
    });
    Ok(NmseMc {
        per_link,
        total: McEstimate { mean: total, std_error: total_se, trials: n },
    })
}

// ---------------------------------------------------------------------------
// Downlink SINR

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrMc {
    pub ue: usize,
    pub signal: McEstimate,
    /// `ρ_d E|X|²` for the coherent gain `X`; equals signal plus uncertainty.
    pub coherent_power: McEstimate,
    pub beamforming_uncertainty: McEstimate,
    pub interference: Vec<McEstimate>,
    pub gamma: McEstimate,
    pub se: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrMcResult {
    pub per_ue: Vec<SinrMc>,
    pub sum_se: McEstimate,
}

/// Layout of the per-trial accumulator for the SINR estimator:
/// for each (k, i): Re b_ki, Im b_ki, |b_ki|²,
/// where `b_ki = Σ_m √η_mi h_mk^H ĥ_mi`.
fn sinr_index(k_count: usize, k: usize, i: usize) -> usize {
    3 * (k * k_count + i)
}

fn sinr_from_means(means: &[f64], k_count: usize, rho_d: f64, k: usize) -> (f64, f64, Vec<f64>) {
    let o = sinr_index(k_count, k, k);
    let mean_sq = means[o] * means[o] + means[o + 1] * means[o + 1];
    let signal = rho_d * mean_sq;
    let bu = rho_d * (means[o + 2] - mean_sq);
    let ui = (0..k_count)
        .map(|i| if i == k { 0.0 } else { rho_d * means[sinr_index(k_count, k, i) + 2] })
        .collect();
    (signal, bu, ui)
}

fn gamma_of(signal: f64, bu: f64, ui: &[f64]) -> f64 {
    if signal > 0.0 {
        signal / (bu + ui.iter().sum::<f64>() + 1.0)
    } else {
        0.0
    }
}

/// Monte-Carlo estimate of the hardening-bound SINR terms: the desired
/// signal from the sample mean of the coherent gain, the beamforming
/// uncertainty from its sample variance (`1/T` normalization) and each
/// interference term from its sample second moment.
#[allow(clippy::too_many_arguments)]
pub fn mc_sinr(
    layout: &NetworkLayout,
    kernels: &Kernels,
    pb: &PassiveBeamforming,
    stats: &EstimationStats,
    alloc: &PowerAllocation,
    rho_d: f64,
    prelog: f64,
    p: f64,
    tau: usize,
    trials: usize,
    seed: u64,
) -> Result<SinrMcResult> {
    check_trials(trials, 1000)?;
    let model = ChannelModel::new(layout, kernels, pb)?;
    let est = LmmseEstimator::new(stats, kernels)?;
    let (m_count, k_count) = (layout.m(), layout.k());
    let sq_eta: Vec<f64> = alloc.eta.iter().map(|e| e.sqrt()).collect();
    let parts = run_batches(trials, 3 * k_count * k_count, seed, |rng, acc| {
        let real = model.sample(rng);
        let obs = simulate_pilot_phase(&real, layout, p, tau, rng);
        let hat = est.estimate_all(&obs);
        for k in 0..k_count {
            for i in 0..k_count {
                let mut b = Complex64::new(0.0, 0.0);
                for m in 0..m_count {
                    let w = sq_eta[m + i * m_count];
                    if w != 0.0 {
                        b += real.h(m, k).dotc(&hat[m * k_count + i]) * w;
                    }
                }
                let o = sinr_index(k_count, k, i);
                acc.add(o, b.re);
                acc.add(o + 1, b.im);
                acc.add(o + 2, b.norm_sqr());
            }
        }
    });
    let n = combine(&parts).0;
    let est_of = |f: &dyn Fn(&[f64]) -> f64| {
        let (mean, se) = jackknife(&parts, f);
        McEstimate { mean, std_error: se, trials: n }
    };
    let per_ue: Vec<SinrMc> = (0..k_count)
        .map(|k| SinrMc {
            ue: k,
            signal: est_of(&|m| sinr_from_means(m, k_count, rho_d, k).0),
            coherent_power: est_of(&|m| rho_d * m[sinr_index(k_count, k, k) + 2]),
            beamforming_uncertainty: est_of(&|m| sinr_from_means(m, k_count, rho_d, k).1),
            interference: (0..k_count)
                .map(|i| est_of(&|m| sinr_from_means(m, k_count, rho_d, k).2[i]))
                .collect(),
            gamma: est_of(&|m| {
                let (s, b, u) = sinr_from_means(m, k_count, rho_d, k);
                gamma_of(s, b, &u)
            }),
            se: est_of(&|m| {
                let (s, b, u) = sinr_from_means(m, k_count, rho_d, k);
                prelog * (1.0 + gamma_of(s, b, &u)).log2()
            }),
        })
        .collect();
    let sum_se = est_of(&|m| {
        (0..k_count)
            .map(|k| {
                let (s, b, u) = sinr_from_means(m, k_count, rho_d, k);
                prelog * (1.0 + gamma_of(s, b, &u)).log2()
            })
            .sum()
    });
    Ok(SinrMcResult { per_ue, sum_se })
}

// ---------------------------------------------------------------------------
// Moment identities

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MomentKind {
    /// `E|x^H A x|²`, `x ~ CN(0, I_L)`.
    QuadraticFormFourthMoment,
    /// `E{h_mk^H A h_mk}`.
    QuadraticFormMean,
    /// `E{h_mk^H A h_mk h_nk^H B h_nk}`.
    CrossApSameUe,
    /// `E{h_mk^H A h_ml h_nl^H B h_nk}`.
    CrossApTwoUes,
    /// `E|h_mk^H A h_mk|²`.
    QuadraticFormSecondMoment,
    /// `E|h_mk^H A h_ml|²`.
    BilinearFormSecondMoment,
}

impl std::str::FromStr for MomentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Config(format!("unknown moment {s:?}")))
    }
}

/// Indices and matrices of one moment evaluation.
#[derive(Debug, Clone)]
pub struct MomentArgs {
    pub a: CMat,
    pub b: CMat,
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub l: usize,
}

pub fn mc_moment(
    which: MomentKind,
    args: &MomentArgs,
    layout: &NetworkLayout,
    kernels: &Kernels,
    pb: &PassiveBeamforming,
    trials: usize,
    seed: u64,
) -> Result<McComplexEstimate> {
    check_trials(trials, 2)?;
    let model = ChannelModel::new(layout, kernels, pb)?;
    let (a, b) = (&args.a, &args.b);
    let (m, n, k, l) = (args.m, args.n, args.k, args.l);
    let dim = kernels.l();
    if m >= layout.m() || n >= layout.m() || k >= layout.k() || l >= layout.k() {
        return Err(Error::Dimension("moment indices outside the layout".into()));
    }
    let quad = |x: &CVec, mat: &CMat, y: &CVec| x.dotc(&(mat * y));
    let parts = run_batches(trials, 4, seed, |rng, acc| {
        let value = match which {
            MomentKind::QuadraticFormFourthMoment => {
                let x = complex_normal_vec(dim, rng);
                Complex64::new(quad(&x, a, &x).norm_sqr(), 0.0)
            }
            _ => {
                let real = model.sample(rng);
                match which {
                    MomentKind::QuadraticFormMean => quad(real.h(m, k), a, real.h(m, k)),
                    MomentKind::CrossApSameUe => {
                        quad(real.h(m, k), a, real.h(m, k)) * quad(real.h(n, k), b, real.h(n, k))
                    }
                    MomentKind::CrossApTwoUes => {
                        quad(real.h(m, k), a, real.h(m, l)) * quad(real.h(n, l), b, real.h(n, k))
                    }
                    MomentKind::QuadraticFormSecondMoment => {
                        Complex64::new(quad(real.h(m, k), a, real.h(m, k)).norm_sqr(), 0.0)
                    }
                    MomentKind::BilinearFormSecondMoment => {
                        Complex64::new(quad(real.h(m, k), a, real.h(m, l)).norm_sqr(), 0.0)
                    }
                    MomentKind::QuadraticFormFourthMoment => unreachable!(),
                }
            }
        };
        acc.add(0, value.re);
        acc.add(1, value.im);
        acc.add(2, value.re * value.re);
        acc.add(3, value.im * value.im);
    });
    let (t, s) = combine(&parts);
    let tf = t as f64;
    let mean = Complex64::new(s[0] / tf, s[1] / tf);
    let var = (s[2] / tf - mean.re * mean.re) + (s[3] / tf - mean.im * mean.im);
    let var = var.max(0.0) * tf / (tf - 1.0);
    Ok(McComplexEstimate { mean, std_error: (var / tf).sqrt(), trials: t })
}

/// Sample mean and standard error of a real statistic drawn once per trial.
pub fn mc_scalar<F>(trials: usize, seed: u64, draw: F) -> Result<McEstimate>
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    check_trials(trials, 2)?;
    let parts = run_batches(trials, 2, seed, |rng, acc| {
        let v = draw(rng);
        acc.add(0, v);
        acc.add(1, v * v);
    });
    let (t, s) = combine(&parts);
    let tf = t as f64;
    let mean = s[0] / tf;
    let var = (s[1] / tf - mean * mean).max(0.0) * tf / (tf - 1.0);
    Ok(McEstimate { mean, std_error: (var / tf).sqrt(), trials: t })
}

/// Per-AP contributions to the normalized received signal of UE `k` with
/// unit data symbols: entry `m` is `Σ_i √η_mi h_mk^H ĥ_mi`. Summing the
/// first `M'` entries, adding `z_k/√ρ_d` and dividing by `M' N` gives the
/// statistic for the first `M'` APs.
pub fn received_signal_terms(
    real: &crate::channel_sampler::ChannelRealization,
    hat: &[CVec],
    alloc: &PowerAllocation,
    k: usize,
) -> Vec<Complex64> {
    let k_count = real.k();
    (0..real.m())
        .map(|m| {
            (0..k_count)
                .map(|i| real.h(m, k).dotc(&hat[m * k_count + i]) * alloc.eta[(m, i)].sqrt())
                .sum()
        })
        .collect()
}

/// Draws a `CN(0, 1)` receiver-noise sample for the downlink.
pub fn downlink_noise<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    crate::channel_sampler::complex_normal(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_cover_all_trials() {
        for t in [1, 7, 100, 101, 12345] {
            let b = batches(t);
            assert_eq!(b.first().unwrap().start, 0);
            assert_eq!(b.last().unwrap().end, t);
            assert!(b.windows(2).all(|w| w[0].end == w[1].start));
            assert!(b.len() <= MAX_BATCHES);
        }
    }

    #[test]
    fn compensated_sum_beats_naive() {
        let mut s = CompensatedSum::default();
        s.add(1e16);
        for _ in 0..1000 {
            s.add(1.0);
        }
        s.add(-1e16);
        assert_eq!(s.value(), 1000.0);
    }

    #[test]
    fn thread_count_does_not_change_results() {
        let draw = |rng: &mut ChaCha8Rng| rng.random::<f64>().powi(3);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| mc_scalar(5000, 3, draw).unwrap());
        let b = four.install(|| mc_scalar(5000, 3, draw).unwrap());
        assert_eq!(a, b);
        assert!(a.z_score(0.25) < 4.0);
    }

    #[test]
    fn doubling_trials_shrinks_error() {
        let draw = |rng: &mut ChaCha8Rng| rng.random::<f64>();
        let a = mc_scalar(20_000, 1, draw).unwrap();
        let b = mc_scalar(40_000, 1, draw).unwrap();
        let ratio = a.std_error / b.std_error;
        assert!((ratio / 2f64.sqrt() - 1.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn unknown_moment_name() {
        assert!("quadratic_form_mean".parse::<MomentKind>().is_ok());
        assert!(matches!("eq12".parse::<MomentKind>(), Err(Error::Config(_))));
    }

    #[test]
    fn jackknife_of_mean_matches_classic_error() {
        let parts = run_batches(10_000, 2, 9, |rng, acc| {
            let v: f64 = rng.random();
            acc.add(0, v);
            acc.add(1, v * v);
        });
        let (_, se) = jackknife(&parts, |m| m[0]);
        let classic = mc_scalar(10_000, 9, |rng| rng.random::<f64>()).unwrap();
        assert!((se / classic.std_error - 1.0).abs() < 0.3);
    }

    #[test]
    fn too_few_trials() {
        assert!(mc_scalar(1, 0, |_| 0.0).is_err());
    }
}
