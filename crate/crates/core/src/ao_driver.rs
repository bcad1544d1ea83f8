//! Alternating optimisation between the digital and analog stages, the on/off
//! searches on top of it, and the benchmark schemes.
//!
//! All hybrid schemes share one baseline: the alternating optimisation run
//! with every element switched on. The schemes differ only in which searches
//! they run from there, so `joint` sees every configuration the partial schemes
//! see and can never end up above them.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analog_stage::{optimize_analog, AnalogOptions};
use crate::design::{
    canonicalize, constraint_report, rescale_to_feasible, Architecture, ConstraintClass, ConstraintReport, HybridDesign,
    ProblemData,
};
use crate::digital_stage::{optimize_digital, DigitalContext};
use crate::linalg::{CMatrix, C64};
use crate::onoff_control::{ps_onoff_search, rf_onoff_search, CandidateRecord, OnOffMask, PsSchedule, TrialOutcome};
use crate::power_models::{total_power, ObjectiveTerms, PowerBreakdown};
use crate::scenario::Scenario;
use crate::sca::{ScaOptions, ScaTrace, StageError};

/// Worst relative violation tolerated in a returned design.
pub const FEASIBILITY_RTOL: f64 = 1e-6;

/// Extra randomization rounds, each with twice the samples, before an analog stage gives up.
pub const RANDOMIZATION_RETRIES: usize = 2;

/// Stream of the ChaCha8 generator used for the initial analog matrix.
const INIT_STREAM: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeId {
    Joint,
    NoOnoff,
    PsOnly,
    RfOnly,
    DigitalFull,
    FixedPa,
}

impl SchemeId {
    pub const ALL: [SchemeId; 6] =
        [SchemeId::Joint, SchemeId::NoOnoff, SchemeId::PsOnly, SchemeId::RfOnly, SchemeId::DigitalFull, SchemeId::FixedPa];

    pub fn name(self) -> &'static str {
        match self {
            SchemeId::Joint => "joint",
            SchemeId::NoOnoff => "no_onoff",
            SchemeId::PsOnly => "ps_only",
            SchemeId::RfOnly => "rf_only",
            SchemeId::DigitalFull => "digital_full",
            SchemeId::FixedPa => "fixed_pa",
        }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SchemeId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| format!("unknown scheme {s:?}; expected one of joint, no_onoff, ps_only, rf_only, digital_full, fixed_pa"))
    }
}

/// How each on/off trial configuration is re-optimised.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    /// Digital stage only, warm started from the rescaled incumbent when possible.
    #[default]
    Digital,
    /// Full alternating optimisation.
    FullAo,
}

#[derive(Clone, Debug)]
pub struct AoOptions {
    pub max_outer: usize,
    /// Stop when the relaxed objective falls by less than this fraction.
    pub rel_tol: f64,
    pub digital: ScaOptions,
    pub analog: AnalogOptions,
    pub trial_mode: TrialMode,
    /// Re-run the alternating optimisation on the configuration a search selects.
    pub polish: bool,
    pub ps_schedule: PsSchedule,
    /// Salt for the initial analog matrix and the randomization draws.
    pub seed: u64,
}

impl Default for AoOptions {
    fn default() -> Self {
        Self {
            max_outer: 20,
            rel_tol: 1e-4,
            digital: ScaOptions::default(),
            analog: AnalogOptions { sca: ScaOptions { max_iter: 10, rel_tol: 1e-3, ..ScaOptions::default() }, ..AnalogOptions::default() },
            trial_mode: TrialMode::Digital,
            polish: true,
            ps_schedule: PsSchedule::Geometric,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignStatus {
    Converged,
    MaxIter,
    Infeasible,
    RandomizationFailed,
    SolverFailure,
}

impl DesignStatus {
    pub fn name(self) -> &'static str {
        match self {
            DesignStatus::Converged => "converged",
            DesignStatus::MaxIter => "max_iter",
            DesignStatus::Infeasible => "infeasible",
            DesignStatus::RandomizationFailed => "randomization_failed",
            DesignStatus::SolverFailure => "solver_failure",
        }
    }

    pub fn is_feasible(self) -> bool {
        matches!(self, DesignStatus::Converged | DesignStatus::MaxIter)
    }
}

/// One alternating optimisation run.
#[derive(Clone, Debug)]
pub struct AoRun {
    pub design: HybridDesign,
    /// Relaxed objective after the first digital stage and after every outer iteration.
    pub objectives: Vec<f64>,
    pub digital_traces: Vec<ScaTrace>,
    pub analog_traces: Vec<ScaTrace>,
    pub status: DesignStatus,
    /// `|F̄|` of the last analog extraction, or `|F|` if no analog stage ran.
    pub ps_weights: DMatrix<f64>,
}

/// Where an alternating optimisation run starts.
#[derive(Clone, Debug)]
pub enum AoStart {
    /// Digital stage from scratch under this analog matrix.
    Cold(CMatrix),
    /// A feasible design; the analog stage goes first.
    Warm(HybridDesign),
}

fn mix(a: u64, b: u64) -> u64 {
    // SplitMix64 finaliser over the pair.
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full-on analog matrix with uniformly random phases.
pub fn random_analog(n_tx: usize, n_rf: usize, scenario_seed: u64, salt: u64) -> CMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(scenario_seed, salt));
    rng.set_stream(INIT_STREAM);
    let m = 1.0 / (n_tx as f64).sqrt();
    CMatrix::from_fn(n_tx, n_rf, |_, _| C64::from_polar(m, rng.random_range(0.0..std::f64::consts::TAU)))
}

fn abs_weights(f: &CMatrix) -> DMatrix<f64> {
    DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| f[(i, j)].norm())
}

/// Alternate digital and analog stages until the relaxed objective stalls.
pub fn run_ao(data: &ProblemData, start: AoStart, arch: Architecture, allow_masking: bool, opts: &AoOptions, salt: u64) -> Result<AoRun, StageError> {
    let mut digital_traces = Vec::new();
    let mut analog_traces = Vec::new();
    let mut design = match start {
        AoStart::Cold(f) => {
            let ctx = DigitalContext::connected(data, &f, arch);
            let out = optimize_digital(&ctx, None, &opts.digital)?;
            digital_traces.push(out.trace);
            out.design
        }
        AoStart::Warm(d) => d,
    };
    let mut ps_weights = abs_weights(&design.f);
    let mut objectives = vec![data.objective(&design)];
    let mut status = DesignStatus::MaxIter;
    if arch == Architecture::FullyDigital {
        return Ok(AoRun { design, objectives, digital_traces, analog_traces, status: DesignStatus::Converged, ps_weights });
    }
    for outer in 0..opts.max_outer {
        let mut analog_opts = AnalogOptions { allow_masking, seed: mix(mix(data.scn.seed, opts.seed ^ salt), outer as u64), ..opts.analog.clone() };
        let mut attempt = 0;
        let analog = loop {
            match optimize_analog(data, &design, &analog_opts) {
                Err(StageError::RandomizationFailure { best_violation }) if attempt < RANDOMIZATION_RETRIES => {
                    log::warn!("randomization found no feasible candidate (worst violation {best_violation:e}); retrying with more samples");
                    attempt += 1;
                    analog_opts.n_samples *= 2;
                    analog_opts.seed = mix(analog_opts.seed, attempt as u64);
                }
                other => break other,
            }
        };
        match analog {
            Ok(out) => {
                analog_traces.push(out.trace);
                ps_weights = abs_weights(&out.extraction.sample);
                design = out.extraction.design;
            }
            Err(StageError::RandomizationFailure { best_violation }) => {
                log::warn!("randomization failed after {RANDOMIZATION_RETRIES} retries (worst violation {best_violation:e})");
                status = DesignStatus::RandomizationFailed;
                break;
            }
            Err(e) => return Err(e),
        }
        let ctx = DigitalContext::connected(data, &design.f, arch);
        let init = ctx.restrict(&design);
        let out = optimize_digital(&ctx, Some(init), &opts.digital)?;
        digital_traces.push(out.trace);
        design = out.design;
        let prev = *objectives.last().unwrap();
        let obj = data.objective(&design);
        objectives.push(obj);
        if prev - obj <= opts.rel_tol * obj.abs() {
            status = DesignStatus::Converged;
            break;
        }
    }
    Ok(AoRun { design, objectives, digital_traces, analog_traces, status, ps_weights })
}

/// Exact evaluation of a design; `None` if it violates a constraint.
pub fn evaluate(data: &ProblemData, design: &HybridDesign) -> Option<TrialOutcome> {
    if !constraint_report(&data.scn, design).satisfied(FEASIBILITY_RTOL) {
        return None;
    }
    let power = total_power(design, &data.scn).ok()?;
    Some(TrialOutcome { design: design.clone(), total_w: power.total })
}

/// Re-optimise the digital part under a new analog matrix.
pub fn reoptimize_digital(data: &ProblemData, f: &CMatrix, incumbent: &HybridDesign, opts: &AoOptions) -> Option<HybridDesign> {
    let ctx = DigitalContext::connected(data, f, incumbent.arch);
    if ctx.n() == 0 {
        return None;
    }
    let mut warm = HybridDesign { f: f.clone(), ..incumbent.clone() };
    canonicalize(&mut warm);
    let init = rescale_to_feasible(data, &warm, FEASIBILITY_RTOL).ok().map(|d| ctx.restrict(&d));
    match optimize_digital(&ctx, init, &opts.digital) {
        Ok(out) => Some(out.design),
        Err(e) => {
            log::debug!("trial configuration rejected: {e}");
            None
        }
    }
}

/// Everything a scheme reports.
#[derive(Clone, Debug, Serialize)]
pub struct DesignResult {
    pub scheme: SchemeId,
    pub status: DesignStatus,
    #[serde(skip)]
    pub design: Option<HybridDesign>,
    pub mask: Option<OnOffMask>,
    pub power: Option<PowerBreakdown>,
    pub report: Option<ConstraintReport>,
    /// Relaxed objective of the returned design.
    pub relaxed_objective: Option<f64>,
    /// Relaxed objective over the outer iterations of the baseline run.
    pub trace: Vec<f64>,
    pub candidates: Vec<CandidateRecord>,
    pub binding: Option<ConstraintClass>,
    pub message: Option<String>,
}

impl DesignResult {
    pub fn total_w(&self) -> Option<f64> {
        self.power.as_ref().map(|p| p.total)
    }

    fn failed(scheme: SchemeId, err: &StageError, trace: Vec<f64>) -> Self {
        let (status, binding) = match err {
            StageError::Infeasible(c) => (DesignStatus::Infeasible, *c),
            StageError::RandomizationFailure { .. } => (DesignStatus::RandomizationFailed, None),
            StageError::Solver(_) | StageError::DegenerateRecovery(_) | StageError::Dimension(_) => (DesignStatus::SolverFailure, None),
        };
        Self {
            scheme,
            status,
            design: None,
            mask: None,
            power: None,
            report: None,
            relaxed_objective: None,
            trace,
            candidates: Vec::new(),
            binding,
            message: Some(err.to_string()),
        }
    }

    /// Exact evaluation of a finished design; failures are reported in `status`.
    pub fn from_design(
        scheme: SchemeId,
        data: &ProblemData,
        design: HybridDesign,
        weights: &DMatrix<f64>,
        status: DesignStatus,
        trace: Vec<f64>,
        candidates: Vec<CandidateRecord>,
    ) -> Self {
        let report = constraint_report(&data.scn, &design);
        if !report.satisfied(FEASIBILITY_RTOL) {
            let worst = report.slacks.iter().min_by(|a, b| a.relative_slack.total_cmp(&b.relative_slack)).map(|s| s.class);
            return Self {
                message: Some(format!("returned design violates constraints by {:e}", -report.worst())),
                binding: worst,
                report: Some(report),
                ..Self::failed(scheme, &StageError::Solver(crate::conic::SolveStatus::NumericalFailure), trace)
            };
        }
        match total_power(&design, &data.scn) {
            Ok(power) => Self {
                scheme,
                status,
                mask: Some(OnOffMask::from_design(&design, Some(weights))),
                power: Some(power),
                report: Some(report),
                relaxed_objective: Some(data.objective(&design)),
                design: Some(design),
                trace,
                candidates,
                binding: None,
                message: None,
            },
            Err(e) => Self { message: Some(e.to_string()), ..Self::failed(scheme, &StageError::Infeasible(Some(ConstraintClass::Power)), trace) },
        }
    }

    pub const CSV_HEADER: &'static str = "scheme,status,p_pa_w,p_rf_w,p_ps_w,p_sw_w,p_static_w,total_w,rf_on,ps_on,worst_slack";

    /// One CSV row; power columns are empty when no design was found.
    pub fn csv_row(&self) -> String {
        let power = self.power.as_ref().map_or_else(|| ",,,,,".to_string(), |p| p.csv_row());
        let (rf, ps) = self.mask.as_ref().map_or((String::new(), String::new()), |m| {
            ((m.rf_on.len() - m.rf_off_count()).to_string(), (m.ps_on.iter().flatten().filter(|&&b| b).count()).to_string())
        });
        let worst = self.report.as_ref().map_or(String::new(), |r| format!("{:.6e}", r.worst()));
        format!("{},{},{},{},{},{}", self.scheme, self.status.name(), power, rf, ps, worst)
    }
}

/// Outcome of the shared hybrid pipeline for one scenario.
struct Pipeline<'a> {
    data: ProblemData,
    opts: &'a AoOptions,
    baseline: Result<(AoRun, TrialOutcome), StageError>,
}

impl<'a> Pipeline<'a> {
    fn new(scn: &Scenario, opts: &'a AoOptions) -> Result<Self, StageError> {
        let data = ProblemData::new(scn).map_err(|e| StageError::Dimension(e.to_string()))?;
        let f0 = random_analog(scn.dims.n_tx, scn.dims.n_rf, scn.seed, opts.seed);
        let baseline = run_ao(&data, AoStart::Cold(f0), Architecture::Hybrid, false, opts, 0).and_then(|run| {
            let design = match evaluate(&data, &run.design) {
                Some(_) => run.design.clone(),
                None => rescale_to_feasible(&data, &run.design, FEASIBILITY_RTOL)
                    .map_err(|_| StageError::Solver(crate::conic::SolveStatus::NumericalFailure))?,
            };
            let outcome = evaluate(&data, &design).ok_or(StageError::Infeasible(Some(ConstraintClass::Power)))?;
            Ok((run, outcome))
        });
        Ok(Self { data, opts, baseline })
    }

    fn trial(&self, f: &CMatrix, incumbent: &HybridDesign, allow_masking: bool, salt: u64) -> Option<TrialOutcome> {
        match self.opts.trial_mode {
            TrialMode::Digital => evaluate(&self.data, &reoptimize_digital(&self.data, f, incumbent, self.opts)?),
            TrialMode::FullAo => {
                let first = reoptimize_digital(&self.data, f, incumbent, self.opts)?;
                let run = run_ao(&self.data, AoStart::Warm(first.clone()), Architecture::Hybrid, allow_masking, self.opts, salt);
                let last = run.ok().map_or(first.clone(), |r| r.design);
                match (evaluate(&self.data, &first), evaluate(&self.data, &last)) {
                    (Some(a), Some(b)) => Some(pick(a, b)),
                    (a, b) => a.or(b),
                }
            }
        }
    }

    /// Alternating optimisation from the selected configuration; kept only if it lowers the exact total.
    fn polish(&self, best: TrialOutcome, start: &TrialOutcome, allow_masking: bool, salt: u64) -> TrialOutcome {
        if !self.opts.polish || best.design == start.design {
            return best;
        }
        match run_ao(&self.data, AoStart::Warm(best.design.clone()), Architecture::Hybrid, allow_masking, self.opts, salt) {
            Ok(run) => match evaluate(&self.data, &run.design) {
                Some(p) if p.total_w < best.total_w => p,
                _ => best,
            },
            Err(_) => best,
        }
    }

    fn rf_search(&self, from: &TrialOutcome, log: &mut Vec<CandidateRecord>) -> TrialOutcome {
        let k = self.data.scn.dims.k_ir;
        let best = rf_onoff_search(from, k, |f| self.trial(f, &from.design, false, 11), log);
        self.polish(best, from, false, 12)
    }

    fn ps_search(&self, from: &TrialOutcome, weights: &DMatrix<f64>, log: &mut Vec<CandidateRecord>, salt: u64) -> TrialOutcome {
        let k = self.data.scn.dims.k_ir;
        let best = ps_onoff_search(from, weights, self.opts.ps_schedule, k, |f| self.trial(f, &from.design, true, salt), log);
        self.polish(best, from, true, salt + 1)
    }
}

fn pick(a: TrialOutcome, b: TrialOutcome) -> TrialOutcome {
    if b.total_w < a.total_w {
        b
    } else {
        a
    }
}

fn hybrid_results(scn: &Scenario, schemes: &[SchemeId], opts: &AoOptions, label: Option<SchemeId>) -> Vec<DesignResult> {
    let pipe = match Pipeline::new(scn, opts) {
        Ok(p) => p,
        Err(e) => return schemes.iter().map(|&s| DesignResult::failed(label.unwrap_or(s), &e, Vec::new())).collect(),
    };
    let (run, base) = match &pipe.baseline {
        Ok(b) => b,
        Err(e) => return schemes.iter().map(|&s| DesignResult::failed(label.unwrap_or(s), e, Vec::new())).collect(),
    };
    let trace = run.objectives.clone();
    let status = run.status;
    let weights = &run.ps_weights;
    let needs = |s: SchemeId| schemes.contains(&s);

    let mut rf_log = Vec::new();
    let mut ps_log = Vec::new();
    let rf = (needs(SchemeId::RfOnly) || needs(SchemeId::Joint)).then(|| pipe.rf_search(base, &mut rf_log));
    let ps = (needs(SchemeId::PsOnly) || needs(SchemeId::Joint)).then(|| pipe.ps_search(base, weights, &mut ps_log, 21));

    let mut out = Vec::new();
    for &s in schemes {
        let id = label.unwrap_or(s);
        let (chosen, log) = match s {
            SchemeId::NoOnoff => (base.clone(), Vec::new()),
            SchemeId::RfOnly => (rf.clone().unwrap(), rf_log.clone()),
            SchemeId::PsOnly => (ps.clone().unwrap(), ps_log.clone()),
            SchemeId::Joint => {
                let rf_best = rf.clone().unwrap();
                let mut log = rf_log.clone();
                log.extend(ps_log.iter().cloned());
                let after = pipe.ps_search(&rf_best, weights, &mut log, 31);
                let best = pick(pick(pick(base.clone(), rf_best), ps.clone().unwrap()), after);
                (best, log)
            }
            SchemeId::DigitalFull | SchemeId::FixedPa => unreachable!("handled separately"),
        };
        out.push(DesignResult::from_design(id, &pipe.data, chosen.design, weights, status, trace.clone(), log));
    }
    out
}

fn digital_full_result(scn: &Scenario, opts: &AoOptions) -> DesignResult {
    let id = SchemeId::DigitalFull;
    let mut data = match ProblemData::new(scn) {
        Ok(d) => d,
        Err(e) => return DesignResult::failed(id, &StageError::Dimension(e.to_string()), Vec::new()),
    };
    data.terms = ObjectiveTerms { rf: true, ps: false };
    let n = scn.dims.n_tx;
    let f = CMatrix::identity(n, n);
    let run = match run_ao(&data, AoStart::Cold(f), Architecture::FullyDigital, false, opts, 0) {
        Ok(r) => r,
        Err(e) => return DesignResult::failed(id, &e, Vec::new()),
    };
    let Some(base) = evaluate(&data, &run.design) else {
        return DesignResult::failed(id, &StageError::Solver(crate::conic::SolveStatus::NumericalFailure), run.objectives);
    };
    let mut log = Vec::new();
    let best = rf_onoff_search(
        &base,
        scn.dims.k_ir,
        |f| evaluate(&data, &reoptimize_digital(&data, f, &base.design, opts)?),
        &mut log,
    );
    let weights = abs_weights(&best.design.f);
    DesignResult::from_design(id, &data, best.design, &weights, run.status, run.objectives, log)
}

/// The scenario a scheme is actually evaluated on.
pub fn scheme_scenario(scn: &Scenario, scheme: SchemeId) -> Scenario {
    match scheme {
        SchemeId::FixedPa => scn.with_beta_pa(0.0),
        _ => scn.clone(),
    }
}

/// Run several schemes on one scenario, sharing the hybrid baseline.
pub fn compare_schemes(scn: &Scenario, schemes: &[SchemeId], opts: &AoOptions) -> Vec<DesignResult> {
    let hybrid: Vec<SchemeId> =
        schemes.iter().copied().filter(|s| matches!(s, SchemeId::Joint | SchemeId::NoOnoff | SchemeId::PsOnly | SchemeId::RfOnly)).collect();
    let mut by_scheme: Vec<(SchemeId, DesignResult)> = Vec::new();
    if !hybrid.is_empty() {
        for r in hybrid_results(scn, &hybrid, opts, None) {
            by_scheme.push((r.scheme, r));
        }
    }
    if schemes.contains(&SchemeId::FixedPa) {
        let fixed = scheme_scenario(scn, SchemeId::FixedPa);
        let r = hybrid_results(&fixed, &[SchemeId::Joint], opts, Some(SchemeId::FixedPa)).remove(0);
        by_scheme.push((SchemeId::FixedPa, r));
    }
    if schemes.contains(&SchemeId::DigitalFull) {
        by_scheme.push((SchemeId::DigitalFull, digital_full_result(scn, opts)));
    }
    schemes
        .iter()
        .map(|s| by_scheme.iter().find(|(id, _)| id == s).map(|(_, r)| r.clone()).expect("every requested scheme is computed"))
        .collect()
}

/// Run one scheme.
pub fn solve_instance(scn: &Scenario, scheme: SchemeId, opts: &AoOptions) -> DesignResult {
    compare_schemes(scn, &[scheme], opts).remove(0)
}
