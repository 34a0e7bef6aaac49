//! Simulation configuration, geometry and pilot reuse structure.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::spatial_correlation::ApCorrelation;
use crate::star_ris::{MsSplit, Protocol, Region};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// A power ratio in decibels. `-inf` (written as the string `"-inf"` in JSON)
/// is allowed and maps to a linear value of zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Db(pub f64);

impl Db {
    pub fn linear(self) -> f64 {
        if self.0 == f64::NEG_INFINITY {
            0.0
        } else {
            10f64.powf(self.0 / 10.0)
        }
    }
}

impl fmt::Display for Db {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0 == f64::NEG_INFINITY {
            write!(f, "-inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl Serialize for Db {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Db {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Db(v)),
            Raw::Text(t) if t.trim() == "-inf" => Ok(Db(f64::NEG_INFINITY)),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("invalid dB value {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotPolicy {
    /// UE `k` uses pilot `k mod τ`.
    #[default]
    RoundRobin,
    Explicit(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub m: usize,
    pub l: usize,
    pub n_h: usize,
    pub n_v: usize,
    pub k_t: usize,
    pub k_r: usize,
    pub tau_c: usize,
    pub tau: usize,
    /// Uplink pilot SNR.
    pub pilot_snr_db: Db,
    /// Downlink SNR.
    pub downlink_snr_db: Db,
    pub carrier_hz: f64,
    /// Element width; a quarter wavelength when absent.
    pub d_h: Option<f64>,
    /// Element height; a quarter wavelength when absent.
    pub d_v: Option<f64>,
    pub alpha: f64,
    pub protocol: Protocol,
    pub ms_split: MsSplit,
    pub ap_correlation: ApCorrelation,
    pub pilots: PilotPolicy,
    pub rng_seed: u64,
}

/// The end-to-end path gains in this geometry are around 1e-18, so the
/// normalized SNRs that put estimation and rates in their interesting range
/// are large. See the README for how these were chosen.
pub const DEFAULT_PILOT_SNR_DB: f64 = 160.0;
pub const DEFAULT_DOWNLINK_SNR_DB: f64 = 160.0;

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            m: 64,
            l: 4,
            n_h: 8,
            n_v: 8,
            k_t: 4,
            k_r: 3,
            tau_c: 200,
            tau: 5,
            pilot_snr_db: Db(DEFAULT_PILOT_SNR_DB),
            downlink_snr_db: Db(DEFAULT_DOWNLINK_SNR_DB),
            carrier_hz: 1.9e9,
            d_h: None,
            d_v: None,
            alpha: 2.5,
            protocol: Protocol::Es,
            ms_split: MsSplit::Interleaved,
            ap_correlation: ApCorrelation::default(),
            pilots: PilotPolicy::RoundRobin,
            rng_seed: 0,
        }
    }
}

impl SystemConfig {
    pub fn n(&self) -> usize {
        self.n_h * self.n_v
    }

    pub fn k(&self) -> usize {
        self.k_t + self.k_r
    }

    pub fn lambda(&self) -> f64 {
        SPEED_OF_LIGHT / self.carrier_hz
    }

    pub fn d_h(&self) -> f64 {
        self.d_h.unwrap_or(self.lambda() / 4.0)
    }

    pub fn d_v(&self) -> f64 {
        self.d_v.unwrap_or(self.lambda() / 4.0)
    }

    /// Element area, also the path-loss reference gain.
    pub fn element_area(&self) -> f64 {
        self.d_h() * self.d_v()
    }

    pub fn p(&self) -> f64 {
        self.pilot_snr_db.linear()
    }

    pub fn rho_d(&self) -> f64 {
        self.downlink_snr_db.linear()
    }

    /// Fraction of the coherence block left for data.
    pub fn prelog(&self) -> f64 {
        1.0 - self.tau as f64 / self.tau_c as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.m == 0 || self.l == 0 || self.n() == 0 || self.k() == 0 {
            return bad(format!(
                "M, L, N and K must be positive (got {}, {}, {}, {})",
                self.m,
                self.l,
                self.n(),
                self.k()
            ));
        }
        if self.tau == 0 || self.tau >= self.tau_c {
            return bad(format!("need 1 <= tau < tau_c (got tau={}, tau_c={})", self.tau, self.tau_c));
        }
        let p = self.p();
        if !(p > 0.0 && p.is_finite()) {
            return bad(format!("pilot SNR must be positive and finite (got {} dB)", self.pilot_snr_db));
        }
        let rho = self.rho_d();
        if !(rho >= 0.0 && rho.is_finite()) {
            return bad(format!("downlink SNR must be nonnegative and finite (got {} dB)", self.downlink_snr_db));
        }
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            return bad(format!("carrier must be positive (got {})", self.carrier_hz));
        }
        if !(self.d_h() > 0.0 && self.d_v() > 0.0) {
            return bad("element dimensions must be positive".into());
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return bad(format!("path-loss exponent must be positive (got {})", self.alpha));
        }
        if self.protocol == Protocol::Ms {
            self.ms_split.mask(self.n())?;
        }
        self.ap_correlation.validate()?;
        if let PilotPolicy::Explicit(map) = &self.pilots {
            if map.len() != self.k() {
                return bad(format!("explicit pilot map has {} entries for K={}", map.len(), self.k()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometrySpec {
    /// Side of the square AP deployment area centered at the origin.
    pub area_side: f64,
    pub ris_position: [f64; 2],
    /// Length of the reflection-side UE line, centered below the surface.
    pub d1: f64,
    /// Length of the transmission-side UE line, centered above the surface.
    pub d2: f64,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        GeometrySpec {
            area_side: 1500.0,
            ris_position: [50.0, 10.0],
            d1: 20.0,
            d2: 1.0,
        }
    }
}

/// Full configuration document.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemConfig,
    pub geometry: GeometrySpec,
}

impl ConfigFile {
    pub fn from_json(s: &str) -> Result<Self> {
        let cfg: ConfigFile = serde_json::from_str(s)?;
        cfg.system.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PilotAssignment {
    pub tau: usize,
    pub pilot_of: Vec<usize>,
    /// UEs on each pilot index (some may be empty).
    pub groups: Vec<Vec<usize>>,
}

impl PilotAssignment {
    /// Co-pilot set of UE `k`, including `k`.
    pub fn set_of(&self, k: usize) -> &[usize] {
        &self.groups[self.pilot_of[k]]
    }
}

pub fn assign_pilots(k: usize, tau: usize, policy: &PilotPolicy) -> Result<PilotAssignment> {
    if tau == 0 {
        return Err(Error::Config("tau must be at least 1".into()));
    }
    let pilot_of: Vec<usize> = match policy {
        PilotPolicy::RoundRobin => (0..k).map(|i| i % tau).collect(),
        PilotPolicy::Explicit(map) => {
            if map.len() != k {
                return Err(Error::Config(format!("explicit pilot map has {} entries for K={k}", map.len())));
            }
            if let Some(&bad) = map.iter().find(|&&p| p >= tau) {
                return Err(Error::Config(format!("pilot index {bad} out of range for tau={tau}")));
            }
            map.clone()
        }
    };
    let mut groups = vec![Vec::new(); tau];
    for (ue, &p) in pilot_of.iter().enumerate() {
        groups[p].push(ue);
    }
    Ok(PilotAssignment { tau, pilot_of, groups })
}

/// `A d^{-α}`.
pub fn path_loss(d: f64, alpha: f64, area: f64) -> Result<f64> {
    if !(d > 0.0) || !d.is_finite() {
        return Err(Error::Domain(format!("path loss needs a positive distance (got {d})")));
    }
    Ok(area * d.powf(-alpha))
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkLayout {
    pub ap_positions: Vec<[f64; 2]>,
    pub ris_position: [f64; 2],
    pub ue_positions: Vec<[f64; 2]>,
    pub region: Vec<Region>,
    /// AP-surface gains.
    pub beta_ap_ris: Vec<f64>,
    /// Surface-UE gains.
    pub beta_ris_ue: Vec<f64>,
    pub pilots: PilotAssignment,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `count` equally spaced points on a horizontal segment, endpoints included;
/// a single point sits at the center.
fn line_points(center_x: f64, y: f64, length: f64, count: usize) -> Vec<[f64; 2]> {
    match count {
        0 => Vec::new(),
        1 => vec![[center_x, y]],
        _ => (0..count)
            .map(|i| [center_x - length / 2.0 + length * i as f64 / (count - 1) as f64, y])
            .collect(),
    }
}

pub fn build_layout(cfg: &SystemConfig, geometry: &GeometrySpec) -> Result<NetworkLayout> {
    cfg.validate()?;
    if !(geometry.area_side > 0.0) || geometry.d1 < 0.0 || geometry.d2 < 0.0 {
        return Err(Error::Config("geometry lengths must be nonnegative and the area positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let half = geometry.area_side / 2.0;
    let ap_positions: Vec<[f64; 2]> = (0..cfg.m)
        .map(|_| [rng.random_range(-half..half), rng.random_range(-half..half)])
        .collect();
    let ris = geometry.ris_position;
    let mut ue_positions = line_points(ris[0], ris[1] + geometry.d2 / 2.0, geometry.d2, cfg.k_t);
    ue_positions.extend(line_points(ris[0], ris[1] - geometry.d1 / 2.0, geometry.d1, cfg.k_r));
    let region = std::iter::repeat_n(Region::T, cfg.k_t)
        .chain(std::iter::repeat_n(Region::R, cfg.k_r))
        .collect();

    let area = cfg.element_area();
    let beta_ap_ris = ap_positions
        .iter()
        .map(|&p| path_loss(dist(p, ris), cfg.alpha, area))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.with_context("AP-surface link"))?;
    let beta_ris_ue = ue_positions
        .iter()
        .map(|&p| path_loss(dist(p, ris), cfg.alpha, area))
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.with_context("surface-UE link"))?;
    let pilots = assign_pilots(cfg.k(), cfg.tau, &cfg.pilots)?;
    Ok(NetworkLayout {
        ap_positions,
        ris_position: ris,
        ue_positions,
        region,
        beta_ap_ris,
        beta_ris_ue,
        pilots,
    })
}

impl NetworkLayout {
    /// Layout with prescribed gains and no geometry, for analysis and tests.
    pub fn from_gains(
        beta_ap_ris: Vec<f64>,
        beta_ris_ue: Vec<f64>,
        region: Vec<Region>,
        pilots: PilotAssignment,
    ) -> Result<Self> {
        if region.len() != beta_ris_ue.len() || pilots.pilot_of.len() != beta_ris_ue.len() {
            return Err(Error::Dimension("UE gains, regions and pilots disagree in length".into()));
        }
        if beta_ap_ris.iter().chain(&beta_ris_ue).any(|&g| !(g >= 0.0 && g.is_finite())) {
            return Err(Error::Domain("gains must be finite and nonnegative".into()));
        }
        Ok(NetworkLayout {
            ap_positions: vec![[0.0, 0.0]; beta_ap_ris.len()],
            ris_position: [0.0, 0.0],
            ue_positions: vec![[0.0, 0.0]; beta_ris_ue.len()],
            region,
            beta_ap_ris,
            beta_ris_ue,
            pilots,
        })
    }

    pub fn m(&self) -> usize {
        self.beta_ap_ris.len()
    }

    pub fn k(&self) -> usize {
        self.beta_ris_ue.len()
    }

    /// Co-pilot set `P_k`.
    pub fn pilot_set(&self, k: usize) -> &[usize] {
        self.pilots.set_of(k)
    }

    /// Keeps only the first `m` APs.
    pub fn truncate_aps(&self, m: usize) -> NetworkLayout {
        let mut out = self.clone();
        out.ap_positions.truncate(m);
        out.beta_ap_ris.truncate(m);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_robin_with_reuse() {
        let pa = assign_pilots(7, 5, &PilotPolicy::RoundRobin).unwrap();
        assert_eq!(pa.pilot_of, vec![0, 1, 2, 3, 4, 0, 1]);
        assert_eq!(pa.set_of(0), &[0, 5]);
        let reused = pa.groups.iter().filter(|g| g.len() == 2).count();
        assert_eq!(reused, 2);
        assert!(pa.groups.iter().all(|g| g.len() <= 2));
    }

    #[test]
    fn enough_pilots_means_singletons() {
        let pa = assign_pilots(5, 5, &PilotPolicy::RoundRobin).unwrap();
        assert!((0..5).all(|k| pa.set_of(k) == [k]));
        let single = assign_pilots(1, 5, &PilotPolicy::RoundRobin).unwrap();
        assert_eq!(single.set_of(0), &[0]);
    }

    #[test]
    fn explicit_map() {
        let pa = assign_pilots(2, 5, &PilotPolicy::Explicit(vec![0, 0])).unwrap();
        assert_eq!(pa.set_of(0), &[0, 1]);
        assert_eq!(pa.set_of(1), &[0, 1]);
        assert!(matches!(
            assign_pilots(2, 2, &PilotPolicy::Explicit(vec![0, 2])),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn path_loss_examples() {
        assert_eq!(path_loss(1.0, 3.7, 0.25).unwrap(), 0.25);
        assert!((path_loss(10.0, 2.5, 1.0).unwrap() - 10f64.powf(-2.5)).abs() < 1e-18);
        assert!((10f64.powf(-2.5) - 3.1623e-3).abs() < 1e-7);
        assert!(matches!(path_loss(0.0, 2.5, 1.0), Err(Error::Domain(_))));
        assert!(path_loss(-1.0, 2.5, 1.0).is_err());
    }

    #[test]
    fn element_area_at_default_carrier() {
        let cfg = SystemConfig::default();
        assert!((cfg.lambda() - 0.15779).abs() < 1e-5);
        let quarter = SPEED_OF_LIGHT / 1.9e9 / 4.0;
        assert!((cfg.element_area() - quarter * quarter).abs() < 1e-18);
        assert!((cfg.element_area() - 1.5561e-3).abs() < 1e-7);
    }

    #[test]
    fn default_layout_geometry() {
        let cfg = SystemConfig::default();
        let lay = build_layout(&cfg, &GeometrySpec::default()).unwrap();
        assert_eq!(lay.ue_positions.len(), 7);
        // middle reflection-side UE sits 10 m below the surface
        assert_eq!(lay.ue_positions[5], [50.0, 0.0]);
        assert_eq!(lay.region[5], Region::R);
        let expected = cfg.element_area() * 10f64.powf(-2.5);
        assert!((lay.beta_ris_ue[5] - expected).abs() <= 1e-15 * expected);
        assert_eq!(lay.ue_positions[0], [49.5, 10.5]);
        assert_eq!(lay.ue_positions[3], [50.5, 10.5]);
        for p in &lay.ap_positions {
            assert!(p[0].abs() <= 750.0 && p[1].abs() <= 750.0);
        }
    }

    #[test]
    fn ue_on_surface_is_rejected() {
        let cfg = SystemConfig { k_t: 1, k_r: 0, ..SystemConfig::default() };
        let geo = GeometrySpec { d2: 0.0, ..GeometrySpec::default() };
        assert!(build_layout(&cfg, &geo).is_err());
    }

    #[test]
    fn ap_prefixes_are_consistent() {
        let big = build_layout(&SystemConfig { m: 32, ..SystemConfig::default() }, &GeometrySpec::default()).unwrap();
        let small = build_layout(&SystemConfig { m: 8, ..SystemConfig::default() }, &GeometrySpec::default()).unwrap();
        assert_eq!(&big.ap_positions[..8], &small.ap_positions[..]);
    }

    #[test]
    fn config_json_with_negative_infinity() {
        let cfg = ConfigFile::from_json(r#"{"system": {"downlink_snr_db": "-inf", "m": 4}}"#).unwrap();
        assert_eq!(cfg.system.rho_d(), 0.0);
        assert_eq!(cfg.system.m, 4);
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ConfigFile::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn invalid_configs() {
        let base = SystemConfig::default();
        assert!(SystemConfig { tau: 200, ..base.clone() }.validate().is_err());
        assert!(SystemConfig { m: 0, ..base.clone() }.validate().is_err());
        assert!(SystemConfig { d_h: Some(-1.0), ..base.clone() }.validate().is_err());
        assert!(ConfigFile::from_json(r#"{"system": {"bogus": 1}}"#).is_err());
    }

    proptest! {
        #[test]
        fn pilot_sets_symmetric_and_reflexive(k in 1usize..20, tau in 1usize..8) {
            let pa = assign_pilots(k, tau, &PilotPolicy::RoundRobin).unwrap();
            for a in 0..k {
                prop_assert!(pa.set_of(a).contains(&a));
                for b in 0..k {
                    prop_assert_eq!(pa.set_of(a).contains(&b), pa.set_of(b).contains(&a));
                }
            }
            let used = pa.groups.iter().filter(|g| !g.is_empty()).count();
            prop_assert!(used <= tau);
        }

        #[test]
        fn explicit_sets_symmetric(map in proptest::collection::vec(0usize..4, 1..10)) {
            let pa = assign_pilots(map.len(), 4, &PilotPolicy::Explicit(map.clone())).unwrap();
            for a in 0..map.len() {
                for b in 0..map.len() {
                    prop_assert_eq!(pa.set_of(a).contains(&b), map[a] == map[b]);
                }
            }
        }

        #[test]
        fn layout_is_pure_function_of_seed(seed in 0u64..1000) {
            let cfg = SystemConfig { rng_seed: seed, m: 6, ..SystemConfig::default() };
            let a = build_layout(&cfg, &GeometrySpec::default()).unwrap();
            let b = build_layout(&cfg, &GeometrySpec::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn gain_decreases_with_distance(d in 0.01f64..1e4, extra in 1e-3f64..100.0) {
            prop_assert!(path_loss(d + extra, 2.5, 1.5e-3).unwrap() < path_loss(d, 2.5, 1.5e-3).unwrap());
        }
    }
}
