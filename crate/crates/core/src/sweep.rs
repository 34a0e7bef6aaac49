//! Experiment sweeps: one row per (variant, sweep value), with the closed-form
//! metric, its Monte-Carlo counterpart and the optimizer iteration count.
//!
//! SNR sweep values are offsets in dB relative to the SNRs of the system
//! configuration; `"-inf"` switches the swept quantity off.

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation_stats::EstimationStats;
use crate::mc_engine::{mc_nmse, mc_sinr, trial_rng};
use crate::net_config::{build_layout, ConfigFile, Db, SystemConfig};
use crate::performance::{equal_power_allocation, sum_se, RateModel};
use crate::pgam::{pgam_run, NmseProblem, OptimTrace, OptimizerConfig};
use crate::spatial_correlation::Kernels;
use crate::star_ris::{MsSplit, PassiveBeamforming};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Experiment {
    /// Total NMSE against the pilot SNR.
    #[serde(rename = "nmse_vs_snr")]
    NmseVsSnr,
    /// Sum SE against the number of surface elements.
    #[serde(rename = "se_vs_N")]
    SeVsN,
    /// Sum SE against the downlink SNR.
    #[serde(rename = "se_vs_snr")]
    SeVsSnr,
    /// Sum SE against the number of APs.
    #[serde(rename = "se_vs_M")]
    SeVsM,
}

impl Experiment {
    pub fn sweep_var(self) -> &'static str {
        match self {
            Experiment::NmseVsSnr => "pilot_snr_offset_db",
            Experiment::SeVsN => "n",
            Experiment::SeVsSnr => "downlink_snr_offset_db",
            Experiment::SeVsM => "m",
        }
    }

    pub fn default_values(self) -> Vec<Db> {
        match self {
            Experiment::NmseVsSnr | Experiment::SeVsSnr => (-2..=4).map(|i| Db(5.0 * i as f64)).collect(),
            Experiment::SeVsN | Experiment::SeVsM => [16.0, 32.0, 64.0, 128.0].map(Db).to_vec(),
        }
    }

    fn is_count(self) -> bool {
        matches!(self, Experiment::SeVsN | Experiment::SeVsM)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    /// Energy splitting, amplitudes and phases optimized.
    #[serde(rename = "ES_opt")]
    EsOpt,
    /// Mode switching with the configured split, phases optimized.
    #[serde(rename = "MS_opt")]
    MsOpt,
    /// Conventional surface: contiguous transmit-only and reflect-only
    /// halves, phases optimized.
    #[serde(rename = "cRIS")]
    CRis,
    /// Uniformly random phases and amplitudes.
    #[serde(rename = "random_PB")]
    RandomPb,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::EsOpt => "ES_opt",
            Variant::MsOpt => "MS_opt",
            Variant::CRis => "cRIS",
            Variant::RandomPb => "random_PB",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub experiment: Experiment,
    pub variants: Vec<Variant>,
    /// Defaults to the experiment's standard grid.
    #[serde(default)]
    pub values: Option<Vec<Db>>,
    /// Monte-Carlo trials per point; zero skips the Monte-Carlo column.
    #[serde(default)]
    pub trials: usize,
    /// Defaults to the configuration seed.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    /// Transmit-only elements of the conventional surface; `N/2` by default.
    #[serde(default)]
    pub c_ris_transmit: Option<usize>,
    /// Output path, used when the command line gives none.
    #[serde(default)]
    pub out: Option<String>,
}

impl SweepSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        let spec: SweepSpec = serde_json::from_str(s)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn values(&self) -> Vec<Db> {
        self.values.clone().unwrap_or_else(|| self.experiment.default_values())
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("sweep needs at least one variant".into()));
        }
        let values = self.values();
        if values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        for v in &values {
            if self.experiment.is_count() {
                if !(v.0 >= 1.0 && v.0.fract() == 0.0 && v.0 < 1e6) {
                    return Err(Error::Config(format!("{} values must be positive integers (got {v})", self.experiment.sweep_var())));
                }
            } else if self.experiment == Experiment::NmseVsSnr && !v.0.is_finite() {
                return Err(Error::Config("pilot SNR offsets must be finite".into()));
            } else if v.0.is_nan() || v.0 == f64::INFINITY {
                return Err(Error::Config(format!("invalid SNR offset {v}")));
            }
        }
        let min_trials = if self.experiment == Experiment::NmseVsSnr { 100 } else { 1000 };
        if self.trials != 0 && self.trials < min_trials {
            return Err(Error::Config(format!(
                "trials must be 0 or at least {min_trials} (got {})",
                self.trials
            )));
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub sweep_var: String,
    pub sweep_value: Db,
    pub metric_cf: f64,
    pub metric_mc: Option<f64>,
    pub mc_stderr: Option<f64>,
    pub opt_iters: usize,
    pub seed: u64,
}

pub const CSV_HEADER: [&str; 8] = [
    "variant",
    "sweep_var",
    "sweep_value",
    "metric_cf",
    "metric_mc",
    "mc_stderr",
    "opt_iters",
    "seed",
];

/// Everything computed at one (variant, value) point.
#[derive(Debug, Clone)]
pub struct PointDetail {
    /// Position of the sweep value in the grid.
    pub index: usize,
    pub row: SweepRow,
    pub pb: PassiveBeamforming,
    pub trace: OptimTrace,
}

#[derive(Debug, Clone, Default)]
pub struct SweepResult {
    pub points: Vec<PointDetail>,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<SweepRow> {
        self.points.iter().map(|p| p.row.clone()).collect()
    }
}

/// `(n_h, n_v)` for `n` elements: `n_v` is the largest divisor of `n` not
/// above `√n`.
pub fn surface_shape(n: usize) -> (usize, usize) {
    let n_v = (1..=n).take_while(|d| d * d <= n).filter(|d| n % d == 0).last().unwrap_or(1);
    (n / n_v, n_v)
}

fn point_config(base: &SystemConfig, experiment: Experiment, value: Db) -> SystemConfig {
    let mut cfg = base.clone();
    match experiment {
        Experiment::NmseVsSnr => cfg.pilot_snr_db = Db(base.pilot_snr_db.0 + value.0),
        Experiment::SeVsSnr => cfg.downlink_snr_db = Db(base.downlink_snr_db.0 + value.0),
        Experiment::SeVsN => {
            let (n_h, n_v) = surface_shape(value.0 as usize);
            cfg.n_h = n_h;
            cfg.n_v = n_v;
        }
        Experiment::SeVsM => cfg.m = value.0 as usize,
    }
    cfg
}

/// Stream tag for the shared random starting surface.
const INIT_STREAM: u64 = 1 << 40;
/// Stream tag for the Monte-Carlo seed of a (point, variant) pair.
const MC_STREAM: u64 = 2 << 40;

fn evaluate(
    spec: &SweepSpec,
    file: &ConfigFile,
    seed: u64,
    point: usize,
    value: Db,
    variant: Variant,
) -> Result<PointDetail> {
    let mut cfg = point_config(&file.system, spec.experiment, value);
    cfg.rng_seed = seed;
    cfg.validate()?;
    let layout = build_layout(&cfg, &file.geometry)?;
    let kernels = Kernels::from_config(&cfg)?;
    let n = cfg.n();
    let (p, tau) = (cfg.p(), cfg.tau);

    // Every variant at every point starts from the same random surface (up
    // to its length), so curves differ only through the swept quantity.
    let random = PassiveBeamforming::random(n, &mut trial_rng(seed, INIT_STREAM));
    let problem = NmseProblem::new(&layout, &kernels, p, tau);
    let optimize = |start: PassiveBeamforming| pgam_run(&problem, &start, &spec.optimizer);
    let ms_start = |split: MsSplit| -> Result<PassiveBeamforming> {
        let mask = split.mask(n)?;
        Ok(PassiveBeamforming::mode_switching(&mask, random.theta_t.clone(), random.theta_r.clone()))
    };
    let (pb, trace) = match variant {
        Variant::RandomPb => (random.clone(), OptimTrace::default()),
        Variant::EsOpt => optimize(random.clone())?,
        Variant::MsOpt => optimize(ms_start(cfg.ms_split)?)?,
        Variant::CRis => {
            let n_t = spec.c_ris_transmit.unwrap_or(n / 2);
            optimize(ms_start(MsSplit::Contiguous { n_t })?)?
        }
    };

    let variant_index = variant as u64;
    let mc_seed = trial_rng(seed, MC_STREAM + 16 * point as u64 + variant_index).next_u64();
    let stats = EstimationStats::new(&layout, &kernels, &pb, p, tau)?;
    let (metric_cf, mc) = if spec.experiment == Experiment::NmseVsSnr {
        let mc = if spec.trials > 0 {
            Some(mc_nmse(&layout, &kernels, &pb, p, tau, spec.trials, mc_seed)?.total)
        } else {
            None
        };
        (stats.total_nmse(), mc)
    } else {
        let alloc = equal_power_allocation(&stats);
        let model = RateModel::new(&layout, &kernels, &pb, &stats)?;
        let cf = sum_se(&model.sinr_all(&alloc, cfg.rho_d(), cfg.prelog()));
        let mc = if spec.trials > 0 {
            let r = mc_sinr(
                &layout,
                &kernels,
                &pb,
                &stats,
                &alloc,
                cfg.rho_d(),
                cfg.prelog(),
                p,
                tau,
                spec.trials,
                mc_seed,
            )?;
            Some(r.sum_se)
        } else {
            None
        };
        (cf, mc)
    };
    let row = SweepRow {
        variant,
        sweep_var: spec.experiment.sweep_var().to_string(),
        sweep_value: value,
        metric_cf,
        metric_mc: mc.map(|e| e.mean),
        mc_stderr: mc.map(|e| e.std_error),
        opt_iters: trace.iterations(),
        seed,
    };
    Ok(PointDetail { index: point, row, pb, trace })
}

/// Runs every (value, variant) point in parallel. Rows are ordered by sweep
/// value, then by the variant order of the spec.
pub fn run_sweep(spec: &SweepSpec, file: &ConfigFile, seed: Option<u64>) -> Result<SweepResult> {
    spec.validate()?;
    file.system.validate()?;
    let seed = seed.or(spec.seed).unwrap_or(file.system.rng_seed);
    let jobs: Vec<(usize, Db, Variant)> = spec
        .values()
        .into_iter()
        .enumerate()
        .flat_map(|(i, v)| spec.variants.iter().map(move |&var| (i, v, var)))
        .collect();
    let points = jobs
        .into_par_iter()
        .map(|(i, value, variant)| {
            log::info!("{variant} at {}={value}", spec.experiment.sweep_var());
            evaluate(spec, file, seed, i, value, variant)
                .map_err(|e| e.with_context(format!("{variant} at {}={value}", spec.experiment.sweep_var())))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepResult { points })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

fn opt_to_string(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_HEADER)?;
    for r in rows {
        wr.write_record([
            r.variant.to_string(),
            r.sweep_var.clone(),
            r.sweep_value.to_string(),
            r.metric_cf.to_string(),
            opt_to_string(r.metric_mc),
            opt_to_string(r.mc_stderr),
            r.opt_iters.to_string(),
            r.seed.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::Io { path: "<csv>".into(), source: e })?;
    Ok(())
}

pub fn to_json(rows: &[SweepRow]) -> Result<String> {
    Ok(serde_json::to_string_pretty(rows)?)
}

pub fn rows_from_json(s: &str) -> Result<Vec<SweepRow>> {
    Ok(serde_json::from_str(s)?)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::Io { path: path.to_path_buf(), source: e }
}

/// Writes the rows to `path` in the requested format.
pub fn emit(rows: &[SweepRow], format: Format, path: &Path) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err(path))?);
    match format {
        Format::Csv => write_csv(rows, &mut file).map_err(|e| match e {
            Error::Io { source, .. } => Error::Io { path: path.to_path_buf(), source },
            other => other,
        })?,
        Format::Json => {
            file.write_all(to_json(rows)?.as_bytes()).map_err(io_err(path))?;
            file.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    file.flush().map_err(io_err(path))
}

/// Writes the surface configuration and optimizer trace of every point to
/// `dir` as `<variant>_<index>.pb.json` and `<variant>_<index>.trace.csv`.
pub fn emit_artifacts(result: &SweepResult, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for p in &result.points {
        let stem = format!("{}_{}", p.row.variant, p.index);
        let pb_path = dir.join(format!("{stem}.pb.json"));
        std::fs::write(&pb_path, p.pb.to_json()?).map_err(io_err(&pb_path))?;
        let trace_path = dir.join(format!("{stem}.trace.csv"));
        let f = std::fs::File::create(&trace_path).map_err(io_err(&trace_path))?;
        p.trace.write_csv(f)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn surface_shapes() {
        assert_eq!(surface_shape(16), (4, 4));
        assert_eq!(surface_shape(32), (8, 4));
        assert_eq!(surface_shape(64), (8, 8));
        assert_eq!(surface_shape(128), (16, 8));
        assert_eq!(surface_shape(7), (7, 1));
    }

    #[test]
    fn spec_parsing() {
        let spec = SweepSpec::from_json(
            r#"{"experiment":"se_vs_snr","variants":["ES_opt","random_PB"],"values":["-inf",0,10]}"#,
        )
        .unwrap();
        assert_eq!(spec.values()[0], Db(f64::NEG_INFINITY));
        assert!(SweepSpec::from_json(r#"{"experiment":"se_vs_N","variants":[],"values":[16]}"#).is_err());
        assert!(SweepSpec::from_json(r#"{"experiment":"se_vs_N","variants":["cRIS"],"values":[16.5]}"#).is_err());
        assert!(SweepSpec::from_json(r#"{"experiment":"se_vs_M","variants":["cRIS"],"values":[]}"#).is_err());
        assert!(SweepSpec::from_json(r#"{"experiment":"se_vs_M","variants":["cRIS"],"trials":10}"#).is_err());
    }

    #[test]
    fn csv_layout() {
        let row = SweepRow {
            variant: Variant::CRis,
            sweep_var: "m".into(),
            sweep_value: Db(16.0),
            metric_cf: 1.5,
            metric_mc: None,
            mc_stderr: None,
            opt_iters: 3,
            seed: 7,
        };
        let mut buf = Vec::new();
        write_csv(&[row], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "variant,sweep_var,sweep_value,metric_cf,metric_mc,mc_stderr,opt_iters,seed\ncRIS,m,16,1.5,,,3,7\n"
        );
    }
}
