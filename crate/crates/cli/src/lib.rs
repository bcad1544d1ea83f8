//! Configuration loading, threshold sweeps and design dumps for the `iscap` binary.
//!
//! Thresholds are given in dB / dBm at this boundary and converted to linear
//! SI units once, when the scenario is built.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use iscap_core::ao_driver::{compare_schemes, scheme_scenario, AoOptions, DesignResult, DesignStatus, SchemeId, TrialMode};
use iscap_core::design::{HybridDesign, ProblemData};
use iscap_core::onoff_control::PsSchedule;
use iscap_core::power_models::ACTIVATION_TOL;
use iscap_core::scenario::{
    generate_scenario, Dimensions, Geometry, HardwareConstants, Scenario, ScenarioError, Thresholds, DESK_CRB_MAX, DESK_EH_DBM,
    RNG_ALGORITHM,
};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("i/o on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("{scheme} returned no design ({status}): {message}")]
    NoDesign { scheme: SchemeId, status: &'static str, message: String },
}

impl CliError {
    /// Process exit code: 1 usage, 2 infeasible, 3 solver failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) | CliError::Scenario(_) => 1,
            CliError::NoDesign { status, .. } if *status == DesignStatus::SolverFailure.name() => 3,
            CliError::NoDesign { .. } => 2,
            CliError::Io { .. } | CliError::Csv(_) => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

/// Threshold triple in interface units.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfig {
    #[serde(default = "default_sinr_db")]
    pub sinr_db: f64,
    #[serde(default = "default_crb_max")]
    pub crb_max: f64,
    #[serde(default = "default_eh_dbm")]
    pub eh_dbm: f64,
}

fn default_sinr_db() -> f64 {
    6.0
}
fn default_crb_max() -> f64 {
    DESK_CRB_MAX
}
fn default_eh_dbm() -> f64 {
    DESK_EH_DBM
}
fn default_rician_k_db() -> f64 {
    3.0
}
fn default_true() -> bool {
    true
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self { sinr_db: default_sinr_db(), crb_max: default_crb_max(), eh_dbm: default_eh_dbm() }
    }
}

/// Everything needed to generate one instance apart from its seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "Dimensions::desk")]
    pub dimensions: Dimensions,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    #[serde(default)]
    pub geometry: Geometry,
    #[serde(default = "default_rician_k_db")]
    pub rician_k_db: f64,
    #[serde(default)]
    pub hardware: HardwareConstants,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dimensions: Dimensions::desk(),
            thresholds: ThresholdConfig::default(),
            geometry: Geometry::default(),
            rician_k_db: default_rician_k_db(),
            hardware: HardwareConstants::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn build(&self, seed: u64, thresholds: &ThresholdConfig) -> Result<Scenario, CliError> {
        let mut scn = generate_scenario(seed, &self.dimensions, &self.geometry, self.rician_k_db)?;
        scn.thresholds = Thresholds::uniform(&self.dimensions, thresholds.sinr_db, thresholds.crb_max, thresholds.eh_dbm);
        scn.hw = self.hardware.clone();
        scn.validate()?;
        Ok(scn)
    }
}

/// Solver knobs exposed in the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    #[serde(default)]
    pub trial_mode: TrialMode,
    #[serde(default = "default_true")]
    pub polish: bool,
    #[serde(default)]
    pub ps_schedule: PsSchedule,
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_ao_rel_tol")]
    pub ao_rel_tol: f64,
    #[serde(default = "default_samples")]
    pub randomization_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_outer() -> usize {
    20
}
fn default_ao_rel_tol() -> f64 {
    1e-4
}
fn default_samples() -> usize {
    200
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            trial_mode: TrialMode::default(),
            polish: true,
            ps_schedule: PsSchedule::default(),
            max_outer: default_max_outer(),
            ao_rel_tol: default_ao_rel_tol(),
            randomization_samples: default_samples(),
            seed: 0,
        }
    }
}

impl SolverConfig {
    pub fn ao_options(&self) -> AoOptions {
        let mut o = AoOptions {
            max_outer: self.max_outer,
            rel_tol: self.ao_rel_tol,
            trial_mode: self.trial_mode,
            polish: self.polish,
            ps_schedule: self.ps_schedule,
            seed: self.seed,
            ..AoOptions::default()
        };
        o.analog.n_samples = self.randomization_samples;
        o
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    SinrDb,
    CrbMax,
    EhDbm,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::SinrDb => "sinr_db",
            Axis::CrbMax => "crb_max",
            Axis::EhDbm => "eh_dbm",
        }
    }

    /// `true` when a larger value is a stricter requirement.
    pub fn increasing_is_tighter(self) -> bool {
        !matches!(self, Axis::CrbMax)
    }

    pub fn apply(self, base: &ThresholdConfig, value: f64) -> ThresholdConfig {
        let mut t = *base;
        match self {
            Axis::SinrDb => t.sinr_db = value,
            Axis::CrbMax => t.crb_max = value,
            Axis::EhDbm => t.eh_dbm = value,
        }
        t
    }
}

/// One threshold sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
    pub schemes: Vec<SchemeId>,
    pub seeds: Vec<u64>,
    /// Offer each cell's design to the next looser cell of the same seed and scheme.
    #[serde(default = "default_true")]
    pub continuation: bool,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.schemes.is_empty() {
            return Err(CliError::Usage("the sweep needs at least one scheme".into()));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Usage("the sweep needs at least one seed".into()));
        }
        if self.values.is_empty() {
            return Err(CliError::Usage("the sweep needs at least one axis value".into()));
        }
        let inc = self.values.windows(2).all(|w| w[1] > w[0]);
        let dec = self.values.windows(2).all(|w| w[1] < w[0]);
        if !(inc || dec) || self.values.iter().any(|v| !v.is_finite()) {
            return Err(CliError::Usage("axis values must be finite and strictly monotone".into()));
        }
        if self.axis == Axis::CrbMax && self.values.iter().any(|&v| v <= 0.0) {
            return Err(CliError::Usage("crb_max values must be positive".into()));
        }
        Ok(())
    }
}

/// Top-level config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    pub sweep: Option<SweepSpec>,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }
}

/// Antennas whose radiated power is at most [`ACTIVATION_TOL`] watts.
pub fn zero_power_antennas(design: &HybridDesign) -> usize {
    design.per_antenna_power().iter().filter(|&&p| p <= ACTIVATION_TOL).count()
}

/// One (axis value, scheme, seed) cell.
#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: f64,
    pub scheme: SchemeId,
    pub seed: u64,
    pub result: DesignResult,
    /// The design came from the next tighter cell.
    pub carried: bool,
    /// Mean total over seeds at this value and scheme; `None` if any seed failed.
    pub mean_total_w: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub axis: Axis,
    /// In the order of `values`, then `schemes`, then `seeds`.
    pub rows: Vec<SweepRow>,
}

impl SweepOutcome {
    pub fn feasible_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.result.status.is_feasible()).count()
    }

    /// Exit code for the whole sweep: 0 if any cell succeeded.
    pub fn exit_code(&self) -> i32 {
        if self.feasible_rows() > 0 {
            0
        } else if self.rows.iter().any(|r| r.result.status == DesignStatus::SolverFailure) {
            3
        } else {
            2
        }
    }

    /// Mean total per value for one scheme, in the order of the sweep values.
    pub fn mean_curve(&self, scheme: SchemeId) -> Vec<(f64, Option<f64>)> {
        let mut out: Vec<(f64, Option<f64>)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.scheme == scheme) {
            if out.last().is_none_or(|(v, _)| *v != r.value) {
                out.push((r.value, r.mean_total_w));
            }
        }
        out
    }

    pub const CSV_HEADER: [&'static str; 20] = [
        "axis",
        "value",
        "scheme",
        "seed",
        "status",
        "p_pa_w",
        "p_rf_w",
        "p_ps_w",
        "p_sw_w",
        "p_static_w",
        "total_w",
        "rf_on",
        "ps_on",
        "zero_power_antennas",
        "worst_slack",
        "binding",
        "outer_iterations",
        "candidates",
        "carried",
        "mean_total_w",
    ];

    /// Write the CSV body. The first line is a `#` comment holding the timestamp.
    pub fn write_csv<W: Write>(&self, mut out: W, generated_at: u64) -> Result<(), CliError> {
        writeln!(out, "# iscap sweep axis={} generated_at={generated_at} rng={RNG_ALGORITHM}", self.axis.name())
            .map_err(io_err(Path::new("<sweep output>")))?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::CSV_HEADER)?;
        let e = |x: f64| format!("{x:.9e}");
        for r in &self.rows {
            let res = &r.result;
            let p = res.power.as_ref();
            let cols = |f: fn(&iscap_core::power_models::PowerBreakdown) -> f64| p.map_or(String::new(), |p| e(f(p)));
            let (rf_on, ps_on) = res.design.as_ref().map_or((String::new(), String::new()), |d| {
                (d.rf_on().iter().filter(|&&b| b).count().to_string(), d.ps_on_count().to_string())
            });
            let zeros = res.design.as_ref().map_or(String::new(), |d| zero_power_antennas(d).to_string());
            w.write_record([
                self.axis.name().to_string(),
                format!("{}", r.value),
                r.scheme.to_string(),
                r.seed.to_string(),
                res.status.name().to_string(),
                cols(|p| p.p_pa),
                cols(|p| p.p_rf),
                cols(|p| p.p_ps),
                cols(|p| p.p_sw),
                cols(|p| p.p_static),
                cols(|p| p.total),
                rf_on,
                ps_on,
                zeros,
                res.report.as_ref().map_or(String::new(), |rep| e(rep.worst())),
                res.binding.map_or(String::new(), |c| c.to_string()),
                res.trace.len().saturating_sub(1).to_string(),
                res.candidates.len().to_string(),
                r.carried.to_string(),
                r.mean_total_w.map_or(String::new(), e),
            ])?;
        }
        w.flush().map_err(io_err(Path::new("<sweep output>")))?;
        Ok(())
    }
}

fn abs_weights(design: &HybridDesign) -> DMatrix<f64> {
    DMatrix::from_fn(design.n_tx(), design.n_rf(), |i, j| design.f[(i, j)].norm())
}

/// Solve every cell of the sweep. Cells run on the rayon pool; the result order is fixed.
pub fn solve_sweep(spec: &SweepSpec, base: &ScenarioConfig, opts: &AoOptions) -> Result<SweepOutcome, CliError> {
    spec.validate()?;
    let cells: Vec<(usize, u64)> = (0..spec.values.len()).flat_map(|v| spec.seeds.iter().map(move |&s| (v, s))).collect();
    let scenarios: Vec<Scenario> = cells
        .iter()
        .map(|&(v, seed)| base.build(seed, &spec.axis.apply(&base.thresholds, spec.values[v])))
        .collect::<Result<_, _>>()?;
    let solved: Vec<Vec<DesignResult>> = scenarios.par_iter().map(|scn| compare_schemes(scn, &spec.schemes, opts)).collect();

    // grid[v][seed index][scheme index]
    let n_seeds = spec.seeds.len();
    let mut grid: Vec<Vec<Vec<(DesignResult, bool)>>> = vec![Vec::new(); spec.values.len()];
    for (c, results) in solved.into_iter().enumerate() {
        grid[c / n_seeds].push(results.into_iter().map(|r| (r, false)).collect());
    }

    if spec.continuation {
        let mut order: Vec<usize> = (0..spec.values.len()).collect();
        let ascending = spec.values.len() < 2 || spec.values[1] > spec.values[0];
        if ascending == spec.axis.increasing_is_tighter() {
            order.reverse();
        }
        for si in 0..n_seeds {
            for (ki, &scheme) in spec.schemes.iter().enumerate() {
                for pair in order.windows(2) {
                    let (tight, loose) = (pair[0], pair[1]);
                    let Some(design) = grid[tight][si][ki].0.design.clone() else { continue };
                    let carried_total = grid[tight][si][ki].0.total_w();
                    let own_total = grid[loose][si][ki].0.total_w();
                    if carried_total.is_none() || own_total.is_some_and(|o| o <= carried_total.unwrap()) {
                        continue;
                    }
                    let scn = scheme_scenario(&scenarios[loose * n_seeds + si], scheme);
                    let Ok(data) = ProblemData::new(&scn) else { continue };
                    let prev = &grid[tight][si][ki].0;
                    let r = DesignResult::from_design(
                        scheme,
                        &data,
                        design.clone(),
                        &abs_weights(&design),
                        prev.status,
                        prev.trace.clone(),
                        prev.candidates.clone(),
                    );
                    if r.status.is_feasible() && r.total_w().is_some_and(|t| own_total.is_none_or(|o| t < o)) {
                        grid[loose][si][ki] = (r, true);
                    }
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (v, &value) in spec.values.iter().enumerate() {
        for (ki, &scheme) in spec.schemes.iter().enumerate() {
            let totals: Option<Vec<f64>> = (0..n_seeds).map(|si| grid[v][si][ki].0.total_w()).collect();
            let mean = totals.map(|t| t.iter().sum::<f64>() / t.len() as f64);
            for (si, &seed) in spec.seeds.iter().enumerate() {
                let (result, carried) = grid[v][si][ki].clone();
                rows.push(SweepRow { value, scheme, seed, result, carried, mean_total_w: mean });
            }
        }
    }
    Ok(SweepOutcome { axis: spec.axis, rows })
}

fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Solve the sweep and write it as CSV to `out_path`.
pub fn run_sweep(spec: &SweepSpec, base: &ScenarioConfig, opts: &AoOptions, out_path: &Path) -> Result<SweepOutcome, CliError> {
    let outcome = solve_sweep(spec, base, opts)?;
    let file = fs::File::create(out_path).map_err(io_err(out_path))?;
    outcome.write_csv(std::io::BufWriter::new(file), unix_now())?;
    Ok(outcome)
}

/// Paths written by [`dump_design`].
#[derive(Clone, Debug, PartialEq)]
pub struct DumpFiles {
    pub antennas_csv: PathBuf,
    pub mask_grid: PathBuf,
    /// Mask, power breakdown, constraint slacks, objective trace and search candidates.
    pub report_json: PathBuf,
}

impl DumpFiles {
    pub fn for_prefix(prefix: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        Self { antennas_csv: with(".antennas.csv"), mask_grid: with(".mask.txt"), report_json: with(".report.json") }
    }
}

/// Solve one scheme and write per-antenna radiated power, the phase-shifter grid and a JSON report.
///
/// Nothing is written when the scheme returns no feasible design.
pub fn dump_design(scn: &Scenario, scheme: SchemeId, opts: &AoOptions, prefix: &Path) -> Result<(DesignResult, DumpFiles), CliError> {
    let result = compare_schemes(scn, &[scheme], opts).remove(0);
    let (Some(design), Some(mask)) = (result.design.as_ref(), result.mask.as_ref()) else {
        return Err(CliError::NoDesign {
            scheme,
            status: result.status.name(),
            message: result.message.clone().unwrap_or_default(),
        });
    };
    if !result.status.is_feasible() {
        return Err(CliError::NoDesign { scheme, status: result.status.name(), message: result.message.clone().unwrap_or_default() });
    }
    let files = DumpFiles::for_prefix(prefix);
    let mut w = csv::Writer::from_path(&files.antennas_csv)?;
    w.write_record(["antenna", "p_out_w", "active"])?;
    for (n, p) in design.per_antenna_power().iter().enumerate() {
        w.write_record([n.to_string(), format!("{p:.9e}"), (*p > ACTIVATION_TOL).to_string()])?;
    }
    w.flush().map_err(io_err(&files.antennas_csv))?;
    fs::write(&files.mask_grid, mask.to_grid()).map_err(io_err(&files.mask_grid))?;
    let json = serde_json::to_string_pretty(&result).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&files.report_json, json + "\n").map_err(io_err(&files.report_json))?;
    Ok((result, files))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(values: Vec<f64>) -> SweepSpec {
        SweepSpec { axis: Axis::SinrDb, values, schemes: vec![SchemeId::Joint], seeds: vec![0], continuation: true }
    }

    #[test]
    fn sweep_spec_validation() {
        assert!(spec(vec![0.0, 2.0, 4.0]).validate().is_ok());
        assert!(spec(vec![4.0, 2.0]).validate().is_ok());
        assert!(matches!(spec(vec![0.0, 0.0]).validate(), Err(CliError::Usage(_))));
        assert!(matches!(spec(vec![0.0, 2.0, 1.0]).validate(), Err(CliError::Usage(_))));
        let mut s = spec(vec![0.0]);
        s.schemes.clear();
        let err = s.validate().unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let mut s = spec(vec![0.0]);
        s.seeds.clear();
        assert!(s.validate().is_err());
        let s = SweepSpec { axis: Axis::CrbMax, ..spec(vec![1e-6, 0.0]) };
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_defaults_and_parsing() {
        let c = Config::from_toml("").unwrap();
        assert_eq!(c.scenario.dimensions, Dimensions::desk());
        assert_eq!(c.scenario.thresholds, ThresholdConfig::default());
        assert!(c.sweep.is_none());
        let text = r#"
            [scenario.thresholds]
            sinr_db = 4.0
            [solver]
            trial_mode = "full_ao"
            [sweep]
            axis = "eh_dbm"
            values = [-130.0, -125.0]
            schemes = ["joint", "no_onoff"]
            seeds = [1, 2]
        "#;
        let c = Config::from_toml(text).unwrap();
        assert_eq!(c.scenario.thresholds.sinr_db, 4.0);
        assert_eq!(c.scenario.thresholds.eh_dbm, DESK_EH_DBM);
        assert_eq!(c.solver.trial_mode, TrialMode::FullAo);
        let s = c.sweep.unwrap();
        assert_eq!(s.axis, Axis::EhDbm);
        assert_eq!(s.schemes, vec![SchemeId::Joint, SchemeId::NoOnoff]);
        assert!(s.continuation);
        assert!(matches!(Config::from_toml("bogus = 1"), Err(CliError::Config(_))));
        assert!(matches!(Config::from_toml("[sweep]\naxis = \"power\"\nvalues=[1.0]\nschemes=[\"joint\"]\nseeds=[0]"), Err(CliError::Config(_))));
    }

    #[test]
    fn axis_tightening_direction() {
        let base = ThresholdConfig::default();
        assert_eq!(Axis::SinrDb.apply(&base, 9.0).sinr_db, 9.0);
        assert_eq!(Axis::CrbMax.apply(&base, 1e-7).crb_max, 1e-7);
        assert_eq!(Axis::EhDbm.apply(&base, -100.0).eh_dbm, -100.0);
        assert!(Axis::SinrDb.increasing_is_tighter());
        assert!(Axis::EhDbm.increasing_is_tighter());
        assert!(!Axis::CrbMax.increasing_is_tighter());
    }

    #[test]
    fn scenario_uses_interface_units() {
        let cfg = ScenarioConfig::default();
        let t = ThresholdConfig { sinr_db: 10.0, crb_max: 1e-6, eh_dbm: -100.0 };
        let scn = cfg.build(3, &t).unwrap();
        assert!((scn.thresholds.sinr_min[0] - 10.0).abs() < 1e-12);
        assert!((scn.thresholds.eh_dc_min[0] - 1e-13).abs() < 1e-25);
        assert_eq!(scn.thresholds.crb_max, 1e-6);
    }

    #[test]
    fn dump_paths_share_prefix() {
        let f = DumpFiles::for_prefix(Path::new("/tmp/out/beta05"));
        assert_eq!(f.antennas_csv, PathBuf::from("/tmp/out/beta05.antennas.csv"));
        assert_eq!(f.mask_grid, PathBuf::from("/tmp/out/beta05.mask.txt"));
        assert_eq!(f.report_json, PathBuf::from("/tmp/out/beta05.report.json"));
    }
}
