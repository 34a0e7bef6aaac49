//! Deterministic correlation matrices: the sinc kernel of the surface, the AP
//! array profile and the cascaded covariances built from them.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, check_psd, hermitize, psd_sqrt, trace, CMat};
use crate::net_config::{NetworkLayout, SystemConfig};
use crate::star_ris::{pb_matrix, PassiveBeamforming, Region};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApCorrelation {
    Identity,
    /// `[R]_ij = ρ^|i-j|`.
    Exponential { rho: f64 },
}

impl Default for ApCorrelation {
    fn default() -> Self {
        ApCorrelation::Exponential { rho: 0.5 }
    }
}

impl ApCorrelation {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ApCorrelation::Identity => Ok(()),
            ApCorrelation::Exponential { rho } if rho.abs() < 1.0 => Ok(()),
            ApCorrelation::Exponential { rho } => {
                Err(Error::Config(format!("exponential correlation needs |rho| < 1 (got {rho})")))
            }
        }
    }
}

/// Normalized sinc, `sin(πx)/(πx)`.
pub fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Position of element `n` (zero-based) on a row-major `n_h`-wide grid.
pub fn element_position(n: usize, n_h: usize, d_h: f64, d_v: f64) -> [f64; 2] {
    [(n % n_h) as f64 * d_h, (n / n_h) as f64 * d_v]
}

/// Sinc correlation of a planar surface, `d_H d_V sinc(2‖u_i − u_j‖/λ)`.
pub fn ris_correlation(n_h: usize, n_v: usize, d_h: f64, d_v: f64, lambda: f64) -> Result<CMat> {
    if n_h == 0 || n_v == 0 {
        return Err(Error::Dimension("surface grid must be nonempty".into()));
    }
    if !(d_h > 0.0 && d_v > 0.0 && lambda > 0.0) {
        return Err(Error::Domain("element sizes and wavelength must be positive".into()));
    }
    let n = n_h * n_v;
    let pos: Vec<[f64; 2]> = (0..n).map(|i| element_position(i, n_h, d_h, d_v)).collect();
    Ok(CMat::from_fn(n, n, |i, j| {
        let d = (pos[i][0] - pos[j][0]).hypot(pos[i][1] - pos[j][1]);
        c(d_h * d_v * sinc(2.0 * d / lambda))
    }))
}

pub fn ap_correlation(l: usize, model: ApCorrelation) -> Result<CMat> {
    if l == 0 {
        return Err(Error::Dimension("AP needs at least one antenna".into()));
    }
    model.validate()?;
    Ok(match model {
        ApCorrelation::Identity => CMat::identity(l, l),
        ApCorrelation::Exponential { rho } => {
            CMat::from_fn(l, l, |i, j| c(rho.powi((i as i32 - j as i32).abs())))
        }
    })
}

/// All deterministic kernels of an instance plus the factorizations the rest
/// of the crate needs. One surface kernel is shared by every node and one AP
/// kernel by every AP.
#[derive(Debug, Clone)]
pub struct Kernels {
    pub ris: CMat,
    pub ris_sqrt: CMat,
    /// `|[R_RIS]_ij|²`.
    pub ris_sq: DMatrix<f64>,
    pub ap: CMat,
    pub ap_sqrt: CMat,
    /// Eigenvalues of the AP kernel.
    pub ap_eigenvalues: Vec<f64>,
    /// Eigenvectors of the AP kernel, one per column.
    pub ap_eigenvectors: CMat,
}

impl Kernels {
    pub fn new(ris: CMat, ap: CMat) -> Result<Self> {
        check_psd(&ris, "surface correlation")?;
        check_psd(&ap, "AP correlation")?;
        let ris_sqrt = psd_sqrt(&ris)?;
        let ap_sqrt = psd_sqrt(&ap)?;
        let ris_sq = DMatrix::from_fn(ris.nrows(), ris.ncols(), |i, j| ris[(i, j)].norm_sqr());
        let eig = hermitize(&ap).symmetric_eigen();
        Ok(Kernels {
            ris,
            ris_sqrt,
            ris_sq,
            ap,
            ap_sqrt,
            ap_eigenvalues: eig.eigenvalues.iter().map(|&v| v.max(0.0)).collect(),
            ap_eigenvectors: eig.eigenvectors,
        })
    }

    pub fn from_config(cfg: &SystemConfig) -> Result<Self> {
        let ris = ris_correlation(cfg.n_h, cfg.n_v, cfg.d_h(), cfg.d_v(), cfg.lambda())?;
        let ap = ap_correlation(cfg.l, cfg.ap_correlation)?;
        Self::new(ris, ap)
    }

    pub fn n(&self) -> usize {
        self.ris.nrows()
    }

    pub fn l(&self) -> usize {
        self.ap.nrows()
    }

    pub fn ap_trace(&self) -> f64 {
        trace(&self.ap).re
    }

    /// `tr(R Φ_w R Φ_w^H) = x^H P x` with `x = β ∘ θ`.
    pub fn region_gain(&self, pb: &PassiveBeamforming, region: Region) -> f64 {
        region_quad(&self.ris_sq, pb.beta(region), &pb.coefficients(region))
    }
}

/// `x^H P x` for real symmetric `P` and `x = β ∘ θ` with unit-modulus `θ`.
/// The diagonal uses `β²` directly, so the result does not depend on the
/// phases at all when `P` is diagonal.
pub fn region_quad(p: &DMatrix<f64>, beta: &[f64], x: &[Complex64]) -> f64 {
    let n = x.len();
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..n {
        diag += p[(i, i)] * beta[i] * beta[i];
        let mut row = Complex64::new(0.0, 0.0);
        for j in (i + 1)..n {
            row += x[j] * p[(i, j)];
        }
        off += (x[i].conj() * row).re;
    }
    diag + 2.0 * off
}

/// Surface-side and AP-side covariances of one cascaded link.
///
/// `R Φ R Φ^H` is not Hermitian in general. `rtilde` holds the symmetric
/// form `β̃_mk R^{1/2} Φ R Φ^H R^{1/2}`, which is similar to it, so traces of
/// powers and of products with other links are unchanged.
#[derive(Debug, Clone)]
pub struct CascadedCovariance {
    pub rtilde: CMat,
    /// AP-side covariance `R_mk = tr(R̃_mk) R_AP` (L×L).
    pub r: CMat,
    pub trace: f64,
}

pub fn cascaded_covariance(
    layout: &NetworkLayout,
    kernels: &Kernels,
    pb: &PassiveBeamforming,
    m: usize,
    k: usize,
) -> Result<CascadedCovariance> {
    if pb.len() != kernels.n() {
        return Err(Error::Dimension(format!(
            "surface state has {} elements, kernel has {}",
            pb.len(),
            kernels.n()
        )));
    }
    if m >= layout.m() || k >= layout.k() {
        return Err(Error::Dimension(format!("link ({m},{k}) outside layout")));
    }
    let phi = pb_matrix(pb, layout.region[k]);
    let gain = layout.beta_ap_ris[m] * layout.beta_ris_ue[k];
    let s = &kernels.ris_sqrt;
    let rtilde = hermitize(&(s * &phi * &kernels.ris * phi.adjoint() * s).scale(gain));
    let tr = trace(&rtilde).re;
    Ok(CascadedCovariance {
        r: kernels.ap.scale(tr),
        rtilde,
        trace: tr,
    })
}

/// `tr(R̃_mk)` for every link, as an M×K matrix.
pub fn cascaded_traces(layout: &NetworkLayout, kernels: &Kernels, pb: &PassiveBeamforming) -> DMatrix<f64> {
    let gains = [kernels.region_gain(pb, Region::T), kernels.region_gain(pb, Region::R)];
    DMatrix::from_fn(layout.m(), layout.k(), |m, k| {
        layout.beta_ap_ris[m] * layout.beta_ris_ue[k] * gains[layout.region[k].index()]
    })
}
