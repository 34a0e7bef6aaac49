//! Closed-form downlink performance with maximum-ratio precoding: channel
//! moment identities, equal power allocation, SINR with its term breakdown,
//! spectral efficiency and the large-array limit of the received signal.
//!
//! The SINR is assembled from one cross moment,
//!
//! ```text
//! E_mn(k, i) = E{ h_mk^H ĥ_mi ĥ_ni^H h_nk },
//! ```
//!
//! evaluated exactly for both `m ≠ n` and `m = n`. Writing
//! `C_m = R_mi Q_{m,g(i)}`, it equals `(pτ)² Σ_{l∈g(i)} T_l` plus the
//! pilot-noise term `δ_mn pτ tr(C C^H R_mk)`, where for `m ≠ n`
//!
//! ```text
//! T_l = tr(R_AP C_m) tr(R_AP C_n^H) [tr(R̃_ml R̃_nk) + δ_lk tr R̃_mk tr R̃_nk]
//! ```
//!
//! and for `m = n`
//!
//! ```text
//! T_l = tr(R_AP C R_AP C^H) [tr R̃_mk tr R̃_ml + δ_lk tr R̃_mk²]
//!     + |tr(R_AP C)|²        [tr(R̃_mk R̃_ml) + δ_lk (tr R̃_mk)²].
//! ```

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation_stats::EstimationStats;
use crate::linalg::{trace, trace_product, CMat};
use crate::net_config::NetworkLayout;
use crate::spatial_correlation::{cascaded_covariance, Kernels};
use crate::star_ris::{pb_matrix, PassiveBeamforming, Region};

/// Slack allowed on quantities that are nonnegative in exact arithmetic.
pub const NEG_SLACK: f64 = 1e-9;

// ---------------------------------------------------------------------------
// Moment identities

/// `E{|x^H A x|²} = tr(A A^H) + |tr A|²` for `x ~ CN(0, I)`.
pub fn quadratic_form_fourth_moment(a: &CMat) -> f64 {
    trace_product(a, &a.adjoint()).re + trace(a).norm_sqr()
}

/// Direct (matrix) evaluation of the cascaded-channel statistics needed by
/// the moment identities.
#[derive(Debug, Clone)]
pub struct MomentContext {
    pub ap: CMat,
    rtilde: Vec<Vec<CMat>>,
}

impl MomentContext {
    pub fn new(layout: &NetworkLayout, kernels: &Kernels, pb: &PassiveBeamforming) -> Result<Self> {
        let rtilde = (0..layout.m())
            .map(|m| {
                (0..layout.k())
                    .map(|k| Ok(cascaded_covariance(layout, kernels, pb, m, k)?.rtilde))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MomentContext { ap: kernels.ap.clone(), rtilde })
    }

    pub fn tr(&self, m: usize, k: usize) -> f64 {
        trace(&self.rtilde[m][k]).re
    }

    /// `tr(R̃_mk R̃_nl)`.
    pub fn tr_prod(&self, m: usize, k: usize, n: usize, l: usize) -> f64 {
        trace_product(&self.rtilde[m][k], &self.rtilde[n][l]).re
    }

    fn check_square(&self, a: &CMat) -> Result<()> {
        let l = self.ap.nrows();
        if a.nrows() != l || a.ncols() != l {
            return Err(Error::Dimension(format!("moment matrix must be {l}x{l}")));
        }
        Ok(())
    }
}

/// `E{h_mk^H A h_mk} = tr(A R_mk)`.
pub fn quadratic_form_mean(ctx: &MomentContext, a: &CMat, m: usize, k: usize) -> Result<Complex64> {
    ctx.check_square(a)?;
    Ok(trace_product(a, &ctx.ap) * ctx.tr(m, k))
}

/// `E{h_mk^H A h_mk h_nk^H B h_nk}` for two different APs.
pub fn cross_ap_product_same_ue(
    ctx: &MomentContext,
    a: &CMat,
    b: &CMat,
    m: usize,
    n: usize,
    k: usize,
) -> Result<Complex64> {
    ctx.check_square(a)?;
    ctx.check_square(b)?;
    if m == n {
        return Err(Error::Contract("cross-AP moment needs two different APs".into()));
    }
    let surface = ctx.tr(m, k) * ctx.tr(n, k) + ctx.tr_prod(m, k, n, k);
    Ok(trace_product(&ctx.ap, a) * trace_product(&ctx.ap, b) * surface)
}

/// `E{h_mk^H A h_ml h_nl^H B h_nk}` for two different APs and two
/// different UEs.
pub fn cross_ap_product_two_ues(
    ctx: &MomentContext,
    a: &CMat,
    b: &CMat,
    m: usize,
    n: usize,
    k: usize,
    l: usize,
) -> Result<Complex64> {
    ctx.check_square(a)?;
    ctx.check_square(b)?;
    if m == n {
        return Err(Error::Contract("cross-AP moment needs two different APs".into()));
    }
    if k == l {
        return Err(Error::Contract("two-UE moment needs two different UEs; use the same-UE form".into()));
    }
    Ok(trace_product(&ctx.ap, a) * trace_product(&ctx.ap, b) * ctx.tr_prod(m, k, n, l))
}

/// `E{|h_mk^H A h_mk|²}`, exact.
pub fn quadratic_form_second_moment(ctx: &MomentContext, a: &CMat, m: usize, k: usize) -> Result<f64> {
    ctx.check_square(a)?;
    let (spread, coherent) = ap_factors(&ctx.ap, a);
    let t = ctx.tr(m, k);
    Ok((spread + coherent) * (ctx.tr_prod(m, k, m, k) + t * t))
}

/// Large-surface approximation of [`quadratic_form_second_moment`] that keeps
/// only the `tr(R A R A^H)` factor. It misses `|tr(R A)|²`, which does not
/// vanish with the surface size; kept for comparison only.
pub fn quadratic_form_second_moment_large_n(ctx: &MomentContext, a: &CMat, m: usize, k: usize) -> Result<f64> {
    ctx.check_square(a)?;
    let (spread, _) = ap_factors(&ctx.ap, a);
    let t = ctx.tr(m, k);
    Ok(spread * (ctx.tr_prod(m, k, m, k) + t * t))
}

/// `E{|h_mk^H A h_ml|²}` for two different UEs at the same AP, exact.
pub fn bilinear_form_second_moment(ctx: &MomentContext, a: &CMat, m: usize, k: usize, l: usize) -> Result<f64> {
    ctx.check_square(a)?;
    if k == l {
        return Err(Error::Contract("bilinear moment needs two different UEs".into()));
    }
    let (spread, coherent) = ap_factors(&ctx.ap, a);
    Ok(spread * ctx.tr(m, k) * ctx.tr(m, l) + coherent * ctx.tr_prod(m, k, m, l))
}

/// Large-surface approximation of [`bilinear_form_second_moment`] (drops the
/// product-trace term, which is of lower order in the surface size).
pub fn bilinear_form_second_moment_large_n(
    ctx: &MomentContext,
    a: &CMat,
    m: usize,
    k: usize,
    l: usize,
) -> Result<f64> {
    ctx.check_square(a)?;
    if k == l {
        return Err(Error::Contract("bilinear moment needs two different UEs".into()));
    }
    let (spread, _) = ap_factors(&ctx.ap, a);
    Ok(spread * ctx.tr(m, k) * ctx.tr(m, l))
}

/// `(tr(R A R A^H), |tr(R A)|²)`.
fn ap_factors(r: &CMat, a: &CMat) -> (f64, f64) {
    let ra = r * a;
    (trace_product(&ra, &(r * a.adjoint())).re, trace(&ra).norm_sqr())
}

// ---------------------------------------------------------------------------
// Power allocation

#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation {
    /// M×K power control coefficients.
    pub eta: DMatrix<f64>,
}

impl PowerAllocation {
    /// `Σ_k η_mk tr(Ψ_mk)` per AP.
    pub fn ap_loads(&self, stats: &EstimationStats) -> Vec<f64> {
        (0..stats.m())
            .map(|m| (0..stats.k()).map(|k| self.eta[(m, k)] * stats.psi_trace[(m, k)]).sum())
            .collect()
    }
}

/// `η_mk = 1 / Σ_k' tr(Ψ_mk')`; an AP with no estimated energy gets zeros.
pub fn equal_power_allocation(stats: &EstimationStats) -> PowerAllocation {
    let mut eta = DMatrix::zeros(stats.m(), stats.k());
    let mut dark = 0;
    for m in 0..stats.m() {
        let total: f64 = (0..stats.k()).map(|k| stats.psi_trace[(m, k)]).sum();
        if total > 0.0 {
            for k in 0..stats.k() {
                eta[(m, k)] = 1.0 / total;
            }
        } else {
            dark += 1;
        }
    }
    if dark > 0 {
        log::warn!("{dark} AP(s) have no estimated channel energy; their power is set to zero");
    }
    PowerAllocation { eta }
}

// ---------------------------------------------------------------------------
// SINR

/// Surface-side traces `tr(G_w G_w')` with `G_w = R Φ_w R Φ_w^H`, so that
/// `tr(R̃_mk R̃_nl) = β̃_m β̃_n β̃_k β̃_l tr(G_{w_k} G_{w_l})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceProducts {
    pub pair: [[f64; 2]; 2],
}

impl SurfaceProducts {
    pub fn new(kernels: &Kernels, pb: &PassiveBeamforming) -> Self {
        let g: Vec<CMat> = Region::BOTH
            .iter()
            .map(|&w| {
                let phi = pb_matrix(pb, w);
                &kernels.ris * &phi * &kernels.ris * phi.adjoint()
            })
            .collect();
        let mut pair = [[0.0; 2]; 2];
        for a in 0..2 {
            for b in 0..2 {
                pair[a][b] = trace_product(&g[a], &g[b]).re;
            }
        }
        SurfaceProducts { pair }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinrBreakdown {
    pub ue: usize,
    pub signal: f64,
    pub beamforming_uncertainty: f64,
    /// Interference power from the precoder of each UE `i` (entry `ue` is 0).
    pub interference: Vec<f64>,
    pub gamma: f64,
    pub se: f64,
    /// Individual contributions, keyed by a descriptive tag.
    pub terms: BTreeMap<String, f64>,
}

impl SinrBreakdown {
    pub fn total_interference(&self) -> f64 {
        self.interference.iter().sum()
    }
}

/// Everything needed to evaluate the closed-form SINR of every UE.
#[derive(Debug, Clone)]
pub struct RateModel<'a> {
    pub stats: &'a EstimationStats,
    layout: &'a NetworkLayout,
    products: SurfaceProducts,
    /// Per (m, pilot index): Σλ²q, Σλ³q², Σλ⁴q² on the AP spectrum.
    sums: Vec<Vec<[f64; 3]>>,
}

impl<'a> RateModel<'a> {
    pub fn new(
        layout: &'a NetworkLayout,
        kernels: &Kernels,
        pb: &PassiveBeamforming,
        stats: &'a EstimationStats,
    ) -> Result<Self> {
        if stats.m() != layout.m() || stats.k() != layout.k() {
            return Err(Error::Dimension("statistics do not match the layout".into()));
        }
        let lambda = &stats.spectrum.lambda;
        let sums = (0..stats.m())
            .map(|m| {
                (0..stats.groups.len())
                    .map(|g| {
                        let q = stats.spectrum.q_diag(stats.p_tau, stats.loads[(m, g)]);
                        let mut s = [0.0; 3];
                        for (&l, &qi) in lambda.iter().zip(&q) {
                            s[0] += l * l * qi;
                            s[1] += l * l * l * qi * qi;
                            s[2] += l * l * l * l * qi * qi;
                        }
                        s
                    })
                    .collect()
            })
            .collect();
        Ok(RateModel {
            stats,
            layout,
            products: SurfaceProducts::new(kernels, pb),
            sums,
        })
    }

    fn t(&self, m: usize, k: usize) -> f64 {
        self.stats.traces[(m, k)]
    }

    /// `tr(R̃_mk R̃_nl)`.
    fn tr_prod(&self, m: usize, k: usize, n: usize, l: usize) -> f64 {
        let lay = self.layout;
        lay.beta_ap_ris[m]
            * lay.beta_ap_ris[n]
            * lay.beta_ris_ue[k]
            * lay.beta_ris_ue[l]
            * self.products.pair[lay.region[k].index()][lay.region[l].index()]
    }

    /// Channel and pilot-noise parts of `E_mn(k, i)`.
    pub fn cross_moment(&self, m: usize, n: usize, k: usize, i: usize) -> (f64, f64) {
        let g = self.stats.group_of(i);
        let pt = self.stats.p_tau;
        let mut chan = 0.0;
        if m != n {
            let a_m = self.t(m, i) * self.sums[m][g][0];
            let a_n = self.t(n, i) * self.sums[n][g][0];
            for &l in &self.stats.groups[g] {
                let mut surf = self.tr_prod(m, l, n, k);
                if l == k {
                    surf += self.t(m, k) * self.t(n, k);
                }
                chan += a_m * a_n * surf;
            }
            return (pt * pt * chan, 0.0);
        }
        let ti = self.t(m, i);
        let [s2, s3, s4] = self.sums[m][g];
        let spread = ti * ti * s4;
        let coherent = (ti * s2).powi(2);
        for &l in &self.stats.groups[g] {
            let mut a = self.t(m, k) * self.t(m, l);
            let mut b = self.tr_prod(m, k, m, l);
            if l == k {
                a += self.tr_prod(m, k, m, k);
                b += self.t(m, k).powi(2);
            }
            chan += spread * a + coherent * b;
        }
        let noise = pt * ti * ti * self.t(m, k) * s3;
        (pt * pt * chan, noise)
    }

    /// Closed-form SINR breakdown of UE `k`.
    pub fn sinr(&self, alloc: &PowerAllocation, rho_d: f64, prelog: f64, k: usize) -> SinrBreakdown {
        let stats = self.stats;
        let (m_count, k_count) = (stats.m(), stats.k());
        let sq = |m: usize, i: usize| alloc.eta[(m, i)].sqrt();

        let coherent: f64 = (0..m_count).map(|m| sq(m, k) * stats.psi_trace[(m, k)]).sum();
        let signal = rho_d * coherent * coherent;

        let (mut cross, mut same, mut noise) = (0.0, 0.0, 0.0);
        for m in 0..m_count {
            for n in 0..m_count {
                let w = sq(m, k) * sq(n, k);
                if w == 0.0 {
                    continue;
                }
                let (c, z) = self.cross_moment(m, n, k, k);
                let mean_sq = stats.psi_trace[(m, k)] * stats.psi_trace[(n, k)];
                if m == n {
                    same += w * (c - mean_sq);
                    noise += w * z;
                } else {
                    cross += w * (c - mean_sq);
                }
            }
        }
        let bu = rho_d * (cross + same + noise);

        let mut interference = vec![0.0; k_count];
        let (mut ui_copilot, mut ui_other) = (0.0, 0.0);
        for i in (0..k_count).filter(|&i| i != k) {
            let mut acc = 0.0;
            for m in 0..m_count {
                for n in 0..m_count {
                    let w = sq(m, i) * sq(n, i);
                    if w == 0.0 {
                        continue;
                    }
                    let (c, z) = self.cross_moment(m, n, k, i);
                    acc += w * (c + z);
                }
            }
            interference[i] = rho_d * acc;
            if stats.group_of(i) == stats.group_of(k) {
                ui_copilot += interference[i];
            } else {
                ui_other += interference[i];
            }
        }

        let denom = bu + interference.iter().sum::<f64>() + 1.0;
        let gamma = if signal > 0.0 { signal / denom } else { 0.0 };
        let mut terms = BTreeMap::new();
        terms.insert("desired_signal".to_string(), signal);
        terms.insert("uncertainty_cross_ap".to_string(), rho_d * cross);
        terms.insert("uncertainty_same_ap".to_string(), rho_d * same);
        terms.insert("uncertainty_pilot_noise".to_string(), rho_d * noise);
        terms.insert("interference_copilot".to_string(), ui_copilot);
        terms.insert("interference_other_pilots".to_string(), ui_other);
        terms.insert("receiver_noise".to_string(), 1.0);
        SinrBreakdown {
            ue: k,
            signal,
            beamforming_uncertainty: bu,
            interference,
            gamma,
            se: prelog * (1.0 + gamma).log2(),
            terms,
        }
    }

    pub fn sinr_all(&self, alloc: &PowerAllocation, rho_d: f64, prelog: f64) -> Vec<SinrBreakdown> {
        (0..self.stats.k()).map(|k| self.sinr(alloc, rho_d, prelog, k)).collect()
    }

    /// Deterministic limit of `r_k / (√ρ_d M N)`, the received signal of UE
    /// `k` normalized by the number of APs and surface elements.
    pub fn asymptotic_signal(&self, alloc: &PowerAllocation, n_elements: usize, k: usize) -> f64 {
        let stats = self.stats;
        let g = stats.group_of(k);
        let mut acc = 0.0;
        for m in 0..stats.m() {
            for &i in &stats.groups[g] {
                // tr(R_mi Q R_mk)
                acc += alloc.eta[(m, i)].sqrt() * self.t(m, i) * self.t(m, k) * self.sums[m][g][0];
            }
        }
        stats.p_tau * acc / (stats.m() * n_elements) as f64
    }
}

pub fn sinr_closed_form(
    model: &RateModel,
    alloc: &PowerAllocation,
    rho_d: f64,
    prelog: f64,
    k: usize,
) -> SinrBreakdown {
    model.sinr(alloc, rho_d, prelog, k)
}

/// Sum of the per-UE spectral efficiencies.
pub fn sum_se(breakdowns: &[SinrBreakdown]) -> f64 {
    breakdowns.iter().map(|b| b.se).sum()
}

/// `(1 − τ/τ_c) log₂(1 + γ)`.
pub fn se_from_gamma(gamma: f64, tau: usize, tau_c: usize) -> f64 {
    (1.0 - tau as f64 / tau_c as f64) * (1.0 + gamma).log2()
}
