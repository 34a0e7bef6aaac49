//! Surface state: per-region amplitudes and phases, protocol constructors and
//! the projections onto the feasible sets used by the optimizer.

use std::f64::consts::{FRAC_1_SQRT_2, FRAC_PI_2, PI};

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{diag, CMat};

/// Feasibility tolerance for unit modulus and energy conservation.
pub const FEAS_TOL: f64 = 1e-12;

/// Points this close to the feasible set are returned unchanged so that the
/// projections are exactly idempotent.
const ROUNDING: f64 = 4.0 * f64::EPSILON;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    /// Transmission side.
    T,
    /// Reflection side.
    R,
}

impl Region {
    pub fn index(self) -> usize {
        match self {
            Region::T => 0,
            Region::R => 1,
        }
    }

    pub const BOTH: [Region; 2] = [Region::T, Region::R];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Protocol {
    /// Energy splitting: every element serves both regions.
    Es,
    /// Mode switching: every element serves exactly one region.
    Ms,
}

/// How mode switching assigns elements to the two regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsSplit {
    /// Even indices transmit, odd indices reflect.
    #[default]
    Interleaved,
    /// The first `n_t` elements transmit, the rest reflect.
    Contiguous { n_t: usize },
}

impl MsSplit {
    /// `true` at transmitting positions.
    pub fn mask(self, n: usize) -> Result<Vec<bool>> {
        match self {
            MsSplit::Interleaved => Ok((0..n).map(|i| i % 2 == 0).collect()),
            MsSplit::Contiguous { n_t } => {
                if n_t > n {
                    return Err(Error::Config(format!("split n_t={n_t} exceeds N={n}")));
                }
                Ok((0..n).map(|i| i < n_t).collect())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassiveBeamforming {
    pub beta_t: Vec<f64>,
    pub beta_r: Vec<f64>,
    pub theta_t: Vec<Complex64>,
    pub theta_r: Vec<Complex64>,
    pub protocol: Protocol,
}

fn random_phases<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<Complex64> {
    (0..n)
        .map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)))
        .collect()
}

impl PassiveBeamforming {
    /// Energy splitting with an even split and the given phases.
    pub fn es_even(theta_t: Vec<Complex64>, theta_r: Vec<Complex64>) -> Self {
        let n = theta_t.len();
        PassiveBeamforming {
            beta_t: vec![FRAC_1_SQRT_2; n],
            beta_r: vec![FRAC_1_SQRT_2; n],
            theta_t,
            theta_r,
            protocol: Protocol::Es,
        }
    }

    /// Energy splitting, even amplitudes and uniformly random phases.
    pub fn es_random_phases<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let theta_t = random_phases(n, rng);
        let theta_r = random_phases(n, rng);
        Self::es_even(theta_t, theta_r)
    }

    /// Energy splitting with random phases and amplitude pairs uniform on the
    /// feasible quarter circle.
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let theta_t = random_phases(n, rng);
        let theta_r = random_phases(n, rng);
        let (beta_t, beta_r) = (0..n)
            .map(|_| {
                let psi: f64 = rng.random_range(0.0..=FRAC_PI_2);
                (psi.cos(), psi.sin())
            })
            .unzip();
        PassiveBeamforming {
            beta_t,
            beta_r,
            theta_t,
            theta_r,
            protocol: Protocol::Es,
        }
    }

    /// Mode switching from a transmit mask.
    pub fn mode_switching(mask: &[bool], theta_t: Vec<Complex64>, theta_r: Vec<Complex64>) -> Self {
        let beta_t = mask.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
        let beta_r = mask.iter().map(|&t| if t { 0.0 } else { 1.0 }).collect();
        PassiveBeamforming {
            beta_t,
            beta_r,
            theta_t,
            theta_r,
            protocol: Protocol::Ms,
        }
    }

    pub fn mode_switching_random<R: Rng + ?Sized>(mask: &[bool], rng: &mut R) -> Self {
        let theta_t = random_phases(mask.len(), rng);
        let theta_r = random_phases(mask.len(), rng);
        Self::mode_switching(mask, theta_t, theta_r)
    }

    pub fn len(&self) -> usize {
        self.beta_t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beta_t.is_empty()
    }

    pub fn beta(&self, region: Region) -> &[f64] {
        match region {
            Region::T => &self.beta_t,
            Region::R => &self.beta_r,
        }
    }

    pub fn theta(&self, region: Region) -> &[Complex64] {
        match region {
            Region::T => &self.theta_t,
            Region::R => &self.theta_r,
        }
    }

    /// Diagonal of the region's coefficient matrix, `β ∘ θ`.
    pub fn coefficients(&self, region: Region) -> Vec<Complex64> {
        self.beta(region)
            .iter()
            .zip(self.theta(region))
            .map(|(&b, &t)| t * b)
            .collect()
    }

    /// Transmit mask recovered from amplitudes (mode switching only).
    pub fn ms_mask(&self) -> Option<Vec<bool>> {
        match self.protocol {
            Protocol::Ms => Some(self.beta_t.iter().map(|&b| b > 0.5).collect()),
            Protocol::Es => None,
        }
    }

    /// Worst violation of the amplitude and phase constraints.
    pub fn feasibility_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for n in 0..self.len() {
            let (bt, br) = (self.beta_t[n], self.beta_r[n]);
            worst = worst.max((bt * bt + br * br - 1.0).abs());
            worst = worst.max((-bt).max(0.0)).max((-br).max(0.0));
            worst = worst.max((self.theta_t[n].norm() - 1.0).abs());
            worst = worst.max((self.theta_r[n].norm() - 1.0).abs());
            if self.protocol == Protocol::Ms {
                let binary = |b: f64| b == 0.0 || b == 1.0;
                if !binary(bt) || !binary(br) {
                    worst = worst.max(bt.min(br));
                }
            }
        }
        worst
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.beta_r.len() != n || self.theta_t.len() != n || self.theta_r.len() != n {
            return Err(Error::Dimension("surface vectors have different lengths".into()));
        }
        if self.beta_t.iter().chain(&self.beta_r).any(|b| !b.is_finite())
            || self.theta_t.iter().chain(&self.theta_r).any(|t| !t.is_finite())
        {
            return Err(Error::NonFinite("surface coefficients".into()));
        }
        let res = self.feasibility_residual();
        if res > FEAS_TOL {
            return Err(Error::Domain(format!("surface state infeasible (residual {res:e})")));
        }
        Ok(())
    }
}

/// Diagonal coefficient matrix of one region.
pub fn pb_matrix(pb: &PassiveBeamforming, region: Region) -> CMat {
    diag(&pb.coefficients(region))
}

/// Radial projection onto the unit circle; zero maps to one.
pub fn project_theta(v: &[Complex64]) -> Vec<Complex64> {
    v.iter()
        .map(|z| {
            let r = z.norm();
            if (r - 1.0).abs() <= ROUNDING {
                *z
            } else if r == 0.0 || !r.is_finite() {
                Complex64::new(1.0, 0.0)
            } else {
                z / r
            }
        })
        .collect()
}

/// Projection of one amplitude pair onto the nonnegative quarter circle.
pub fn project_beta_pair(bt: f64, br: f64) -> (f64, f64) {
    let (t, r) = (bt.max(0.0), br.max(0.0));
    if t == bt && r == br && (t * t + r * r - 1.0).abs() <= ROUNDING {
        return (t, r);
    }
    let norm = t.hypot(r);
    if norm == 0.0 || !norm.is_finite() {
        return (FRAC_1_SQRT_2, FRAC_1_SQRT_2);
    }
    (t / norm, r / norm)
}

pub fn project_beta(bt: &[f64], br: &[f64]) -> (Vec<f64>, Vec<f64>) {
    bt.iter().zip(br).map(|(&t, &r)| project_beta_pair(t, r)).unzip()
}

/// JSON form: amplitudes plus phases in radians.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PbRecord {
    pub protocol: Protocol,
    pub beta_t: Vec<f64>,
    pub beta_r: Vec<f64>,
    pub phase_t: Vec<f64>,
    pub phase_r: Vec<f64>,
}

impl From<&PassiveBeamforming> for PbRecord {
    fn from(pb: &PassiveBeamforming) -> Self {
        PbRecord {
            protocol: pb.protocol,
            beta_t: pb.beta_t.clone(),
            beta_r: pb.beta_r.clone(),
            phase_t: pb.theta_t.iter().map(|t| t.arg()).collect(),
            phase_r: pb.theta_r.iter().map(|t| t.arg()).collect(),
        }
    }
}

impl TryFrom<PbRecord> for PassiveBeamforming {
    type Error = Error;

    fn try_from(rec: PbRecord) -> Result<Self> {
        let pb = PassiveBeamforming {
            beta_t: rec.beta_t,
            beta_r: rec.beta_r,
            theta_t: rec.phase_t.iter().map(|&p| Complex64::from_polar(1.0, p)).collect(),
            theta_r: rec.phase_r.iter().map(|&p| Complex64::from_polar(1.0, p)).collect(),
            protocol: rec.protocol,
        };
        pb.validate()?;
        Ok(pb)
    }
}

impl PassiveBeamforming {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&PbRecord::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: PbRecord = serde_json::from_str(s)?;
        rec.try_into()
    }
}
