//! Analog beamforming for fixed digital weights.
//!
//! The analog matrix is vectorised as `f = vec(Fᵀ)` (entry `(i, j)` sits at
//! `i·N_RF + j`) and lifted to `R_f = f f^H`. Every quantity that is linear in
//! the transmit covariance `F Q F^H` is then linear in `R_f`: a term `tr(A F Q F^H)`
//! equals `tr((A ⊗ Qᵀ) R_f)`. Only switched-on phase shifters are kept as
//! coordinates of `R_f`; the others are identically zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::conic::schur::schur_crb_blocks;
use crate::conic::{AffineExpr, ConicProgram, SolveStatus, VarId, VarKind};
use crate::design::{canonicalize, rescale_to_feasible, ConstraintClass, HybridDesign, ProblemData};
use crate::linalg::{c64, herm_eigen, hermitian_part, outer, CMatrix, CVector, C64};
use crate::power_models::{pa_single, relaxed_onoff_power};
use crate::scenario::cn01;
use crate::sca::{run_sca, ScaOptions, ScaTrace, StageError};

/// Diagonal entries of the relaxed lift below this (times `1/N_T`) are always switched off.
pub const PS_MASK_REL: f64 = 1e-9;
/// Masking levels (times `1/N_T`) tried for every draw when masking is allowed.
pub const MASK_LEVELS: [f64; 3] = [PS_MASK_REL, 1e-2, 1e-1];
/// Worst relative constraint violation accepted for an extracted design.
pub const CANDIDATE_RTOL: f64 = 1e-6;

/// Analog matrix together with its vectorisation and switched-on elements.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalogState {
    pub f_mat: CMatrix,
    /// Switched-on elements `(antenna, chain)` in vectorisation order.
    pub active: Vec<(usize, usize)>,
}

impl AnalogState {
    /// State whose active set is the nonzero pattern of `f_mat`.
    pub fn from_matrix(f_mat: &CMatrix) -> Self {
        let active = (0..f_mat.nrows())
            .flat_map(|i| (0..f_mat.ncols()).map(move |j| (i, j)))
            .filter(|&(i, j)| f_mat[(i, j)] != C64::new(0.0, 0.0))
            .collect();
        Self { f_mat: f_mat.clone(), active }
    }

    /// `vec(Fᵀ)`, full length `N_T·N_RF`.
    pub fn vec(&self) -> CVector {
        vectorize(&self.f_mat)
    }

    /// Entries of `f` on the active set.
    pub fn active_vec(&self) -> CVector {
        CVector::from_iterator(self.active.len(), self.active.iter().map(|&(i, j)| self.f_mat[(i, j)]))
    }

    /// Lift `f f^H` restricted to the active set.
    pub fn lift(&self) -> CMatrix {
        outer(&self.active_vec())
    }
}

/// `vec(Fᵀ)`.
pub fn vectorize(f: &CMatrix) -> CVector {
    let n_rf = f.ncols();
    CVector::from_fn(f.nrows() * n_rf, |k, _| f[(k / n_rf, k % n_rf)])
}

/// Inverse of [`vectorize`].
pub fn unvectorize(v: &CVector, n_tx: usize, n_rf: usize) -> CMatrix {
    CMatrix::from_fn(n_tx, n_rf, |i, j| v[i * n_rf + j])
}

/// Positive part of the eigen-decomposition of a sensing covariance.
#[derive(Clone, Debug)]
pub struct SensingEigen {
    pub lambda: Vec<f64>,
    pub q: Vec<CVector>,
}

impl SensingEigen {
    /// Keeps eigenpairs with eigenvalue above `1e-14` times the largest.
    pub fn new(s: &CMatrix) -> Self {
        let (values, vectors) = herm_eigen(s);
        let top = values.last().copied().unwrap_or(0.0).max(0.0);
        let mut lambda = Vec::new();
        let mut q = Vec::new();
        for (c, &v) in values.iter().enumerate() {
            if v > 1e-14 * top && v > 0.0 {
                lambda.push(v);
                q.push(vectors.column(c).into_owned());
            }
        }
        Self { lambda, q }
    }

    pub fn reconstruct(&self, n: usize) -> CMatrix {
        let mut s = CMatrix::zeros(n, n);
        for (l, q) in self.lambda.iter().zip(&self.q) {
            s += outer(q) * c64(*l, 0.0);
        }
        s
    }
}

/// Linear maps from the full lift `R_f` (size `N_T·N_RF`) to per-beam and sensing covariances.
#[derive(Clone, Debug)]
pub struct LiftMaps {
    /// `P_k` with `F w_k = P_k f`.
    pub beams: Vec<CMatrix>,
    /// `(λ_i, P_i)` with `F q_i = P_i f`.
    pub sensing: Vec<(f64, CMatrix)>,
}

/// `P_w = E (I ⊗ diag(w))`, the `N_T × N_T·N_RF` matrix with `F w = P_w vec(Fᵀ)`.
pub fn selection_product(w: &CVector, n_tx: usize) -> CMatrix {
    let n_rf = w.len();
    let mut p = CMatrix::zeros(n_tx, n_tx * n_rf);
    for n in 0..n_tx {
        for j in 0..n_rf {
            p[(n, n * n_rf + j)] = w[j];
        }
    }
    p
}

pub fn lift_maps(w: &[CVector], se: &SensingEigen, n_tx: usize, n_rf: usize) -> Result<LiftMaps, StageError> {
    if w.iter().chain(&se.q).any(|v| v.len() != n_rf) {
        return Err(StageError::Dimension(format!("digital vectors must have length {n_rf}")));
    }
    Ok(LiftMaps {
        beams: w.iter().map(|v| selection_product(v, n_tx)).collect(),
        sensing: se.lambda.iter().zip(&se.q).map(|(&l, q)| (l, selection_product(q, n_tx))).collect(),
    })
}

impl LiftMaps {
    /// `R̄_k = P_k R_f P_k^H`.
    pub fn beam(&self, k: usize, r_f: &CMatrix) -> CMatrix {
        &self.beams[k] * r_f * self.beams[k].adjoint()
    }

    /// `R_S = Σ λ_i P_i R_f P_i^H`.
    pub fn sensing(&self, r_f: &CMatrix) -> CMatrix {
        let n = self.beams.first().or(self.sensing.first().map(|t| &t.1)).map_or(0, |p| p.nrows());
        let mut out = CMatrix::zeros(n, n);
        for (l, p) in &self.sensing {
            out += p * r_f * p.adjoint() * c64(*l, 0.0);
        }
        out
    }
}

/// Coefficient of `tr(A F Q F^H)` over the active lift: `(A ⊗ Qᵀ)` restricted.
pub fn lifted_coefficient(a: &CMatrix, q: &CMatrix, active: &[(usize, usize)]) -> CMatrix {
    let n = active.len();
    CMatrix::from_fn(n, n, |p, r| {
        let (ip, jp) = active[p];
        let (ir, jr) = active[r];
        a[(ip, ir)] * q[(jr, jp)]
    })
}

/// Options of the analog stage.
#[derive(Clone, Debug)]
pub struct AnalogOptions {
    pub sca: ScaOptions,
    pub n_samples: usize,
    /// Whether randomization may switch off elements whose relaxed diagonal vanishes.
    pub allow_masking: bool,
    pub seed: u64,
}

impl Default for AnalogOptions {
    fn default() -> Self {
        Self { sca: ScaOptions::default(), n_samples: 200, allow_masking: true, seed: 0 }
    }
}

/// Fixed digital part and the active analog set.
#[derive(Clone, Debug)]
pub struct AnalogContext<'a> {
    pub data: &'a ProblemData,
    pub incumbent: HybridDesign,
    pub active: Vec<(usize, usize)>,
    /// Total baseband covariance `Σ w w^H + S`.
    q: CMatrix,
    /// Per-antenna power coefficient blocks, as sparse entries.
    antenna: Vec<Vec<(usize, usize, C64)>>,
}

impl<'a> AnalogContext<'a> {
    pub fn new(data: &'a ProblemData, incumbent: &HybridDesign) -> Self {
        let state = AnalogState::from_matrix(&incumbent.f);
        let q = incumbent.baseband_covariance();
        let n_tx = incumbent.n_tx();
        let mut antenna = vec![Vec::new(); n_tx];
        for (p, &(ip, jp)) in state.active.iter().enumerate() {
            for (r, &(ir, jr)) in state.active.iter().enumerate() {
                if ip == ir {
                    antenna[ip].push((p, r, q[(jr, jp)]));
                }
            }
        }
        Self { data, incumbent: incumbent.clone(), active: state.active, q, antenna }
    }

    pub fn n(&self) -> usize {
        self.active.len()
    }

    fn n_tx(&self) -> usize {
        self.incumbent.n_tx()
    }

    /// Per-antenna output powers for a lift.
    pub fn antenna_powers(&self, r_f: &CMatrix) -> Vec<f64> {
        self.antenna
            .iter()
            .map(|e| e.iter().map(|&(p, r, c)| (c * r_f[(r, p)]).re).sum::<f64>().max(0.0))
            .collect()
    }

    /// Relaxed objective as a function of the lift.
    pub fn objective(&self, r_f: &CMatrix) -> f64 {
        let hw = &self.data.scn.hw;
        let pa: f64 = self.antenna_powers(r_f).into_iter().map(|p| pa_single(p, hw)).sum();
        let terms = self.data.terms;
        let rf = if terms.rf { crate::power_models::rf_power_relaxed(&self.incumbent.chain_power(), hw) } else { 0.0 };
        let ps = if terms.ps {
            let d: Vec<f64> = (0..r_f.nrows()).map(|p| r_f[(p, p)].re).collect();
            relaxed_onoff_power(&d, hw.p_ps, hw.eps_indicator)
        } else {
            0.0
        };
        pa + rf + ps
    }

    /// Design with the given analog matrix and the incumbent digital part.
    pub fn with_analog(&self, f: CMatrix) -> HybridDesign {
        let mut d = HybridDesign { f, ..self.incumbent.clone() };
        canonicalize(&mut d);
        d
    }
}

/// Build the convex surrogate around `local`.
pub fn build_analog_sdr(ctx: &AnalogContext<'_>, local: &CMatrix) -> Result<(ConicProgram, VarId), StageError> {
    let n = ctx.n();
    if local.nrows() != n || local.ncols() != n {
        return Err(StageError::Dimension(format!("local point must be {n}×{n}")));
    }
    let data = ctx.data;
    let scn = &data.scn;
    let n_tx = ctx.n_tx() as f64;
    let mut prog = ConicProgram::new();
    let rf = prog.add_var("Rf", VarKind::HermitianPsd(n));
    let coef = |a: &CMatrix, q: &CMatrix| AffineExpr::trace(rf, lifted_coefficient(a, q, &ctx.active));

    let w = &ctx.incumbent.w;
    for k in 0..scn.dims.k_ir {
        let gamma = scn.thresholds.sinr_min[k];
        let mut qk = outer(&w[k]);
        let mut interf = ctx.incumbent.s.clone();
        for (i, wi) in w.iter().enumerate() {
            if i != k {
                interf += outer(wi);
            }
        }
        qk -= interf * c64(gamma, 0.0);
        let a = outer(&scn.h[k]) * c64(1.0 / scn.noise_ir[k], 0.0);
        prog.add_nonneg(coef(&a, &qk).plus_const(-gamma), ConstraintClass::Sinr, &format!("sinr[{k}]"));
    }

    if let Some((coeffs, balance)) = &data.fim {
        let fim: Vec<AffineExpr> = coeffs.iter().map(|c| coef(c, &ctx.q)).collect();
        schur_crb_blocks(&mut prog, &fim, data.n_fim(), balance, scn.thresholds.crb_max);
    }

    for (j, d) in scn.d.iter().enumerate() {
        let a = outer(d) * c64(1.0 / data.eh_rf_target[j], 0.0);
        prog.add_nonneg(coef(&a, &ctx.q).plus_const(-1.0), ConstraintClass::Eh, &format!("eh[{j}]"));
    }

    let hw = &scn.hw;
    let local_p = ctx.antenna_powers(local);
    let mut objective = AffineExpr::zero();
    for (idx, entries) in ctx.antenna.iter().enumerate() {
        if entries.is_empty() {
            continue;
        }
        let expr = AffineExpr { herm: vec![(rf, crate::conic::HermCoeff::Entries(entries.clone()))], ..AffineExpr::zero() };
        prog.add_nonneg(expr.clone().scaled(-1.0 / hw.p_ant_max).plus_const(1.0), ConstraintClass::Power, &format!("antenna[{idx}]"));
        let c_n = hw.p_ant_max.powf(hw.beta_pa) / hw.eta_max;
        if hw.beta_pa > 0.0 {
            let pj = local_p[idx].max(crate::digital_stage::TANGENT_FLOOR_REL * hw.p_ant_max);
            let slope = c_n * (1.0 - hw.beta_pa) * pj.powf(-hw.beta_pa);
            objective = objective.plus(expr.scaled(slope)).plus_const(c_n * pj.powf(1.0 - hw.beta_pa) - slope * pj);
        } else {
            objective = objective.plus(expr.scaled(1.0 / hw.eta_max));
        }
    }

    let ps_norm = (1.0 / hw.eps_indicator).ln_1p();
    for p in 0..n {
        prog.add_nonneg(AffineExpr::entry(rf, p, p, c64(-n_tx, 0.0)).plus_const(1.0), ConstraintClass::Modulus, &format!("modulus[{p}]"));
        if data.terms.ps {
            let x = local[(p, p)].re.max(0.0);
            let slope = hw.p_ps / ps_norm / (x + hw.eps_indicator);
            objective = objective
                .plus(AffineExpr::entry(rf, p, p, c64(slope, 0.0)))
                .plus_const(hw.p_ps / ps_norm * (x / hw.eps_indicator).ln_1p() - slope * x);
        }
    }
    if data.terms.rf {
        objective = objective.plus_const(crate::power_models::rf_power_relaxed(&ctx.incumbent.chain_power(), hw));
    }
    prog.set_objective(objective);
    Ok((prog, rf))
}

fn solve_step(ctx: &AnalogContext<'_>, local: &CMatrix, opts: &ScaOptions) -> Result<CMatrix, StageError> {
    let (prog, rf) = build_analog_sdr(ctx, local)?;
    let sol = prog.solve(&opts.solver).map_err(|e| StageError::Dimension(e.to_string()))?;
    match sol.status {
        SolveStatus::Optimal => Ok(hermitian_part(sol.herm(rf))),
        SolveStatus::Infeasible => Err(StageError::Infeasible(sol.binding_class())),
        other => Err(StageError::Solver(other)),
    }
}

/// SCA over the analog surrogate starting from `init` (the incumbent's lift if `None`).
pub fn sca_analog(ctx: &AnalogContext<'_>, init: Option<CMatrix>, opts: &ScaOptions) -> (CMatrix, ScaTrace) {
    let start = init.unwrap_or_else(|| AnalogState::from_matrix(&ctx.incumbent.f).lift());
    run_sca(start, opts, |loc| solve_step(ctx, loc, opts), |x| ctx.objective(x))
}

/// Outcome of Gaussian randomization.
#[derive(Clone, Debug)]
pub struct Extraction {
    pub design: HybridDesign,
    /// Pre-projection sample of the selected candidate, as an `N_T × N_RF` matrix.
    pub sample: CMatrix,
    pub objective: f64,
    /// Index of the selected draw; `None` when the incumbent won.
    pub draw: Option<usize>,
    pub feasible_draws: usize,
}

/// Sampling factor `L` with `L L^H ≈ R`; eigenvalues below `1e-12` of the largest
/// are roundoff and dropped, so a rank-one input yields exactly collinear draws.
pub fn sampling_factor(r: &CMatrix) -> CMatrix {
    let (values, mut vectors) = herm_eigen(r);
    let top = values.last().copied().unwrap_or(0.0).max(0.0);
    for (c, &v) in values.iter().enumerate() {
        let s = if v > 1e-12 * top { v.sqrt() } else { 0.0 };
        vectors.column_mut(c).scale_mut(s);
    }
    vectors
}

/// Draw candidates from `N(0, R̄_f)`, project to constant modulus and keep the
/// feasible one with the smallest relaxed objective. The incumbent competes too.
pub fn gaussian_randomize(ctx: &AnalogContext<'_>, r_bar: &CMatrix, opts: &AnalogOptions) -> Result<Extraction, StageError> {
    randomize_path(ctx, std::slice::from_ref(r_bar), opts)
}

/// Gaussian randomization spread over several relaxed points (the SCA iterates).
///
/// The last point receives the remainder of the sample budget. Every draw is
/// projected once per masking level. The returned sample belongs to the
/// selected draw, or to the least violating draw of the last point when the
/// incumbent is kept.
pub fn randomize_path(ctx: &AnalogContext<'_>, points: &[CMatrix], opts: &AnalogOptions) -> Result<Extraction, StageError> {
    let n_tx = ctx.n_tx();
    let n_rf = ctx.incumbent.n_rf();
    let modulus = 1.0 / (n_tx as f64).sqrt();
    let levels: &[f64] = if opts.allow_masking { &MASK_LEVELS } else { &[] };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);

    let mut best: Option<Extraction> = None;
    let mut best_violation = f64::INFINITY;
    let mut fallback: Option<(f64, CMatrix)> = None;
    let mut feasible_draws = 0;

    if let Ok(d) = rescale_to_feasible(ctx.data, &ctx.incumbent, CANDIDATE_RTOL) {
        let objective = ctx.data.objective(&d);
        best = Some(Extraction { design: d, sample: ctx.incumbent.f.clone(), objective, draw: None, feasible_draws: 0 });
    }

    let per_point = (opts.n_samples / points.len().max(1)).max(1);
    let mut draw = 0;
    for (k, r_bar) in points.iter().enumerate() {
        let count = if k + 1 == points.len() { opts.n_samples.saturating_sub(per_point * k).max(1) } else { per_point };
        let factor = sampling_factor(r_bar);
        let diag: Vec<f64> = (0..ctx.n()).map(|p| r_bar[(p, p)].re * n_tx as f64).collect();
        for _ in 0..count {
            let z = CVector::from_fn(ctx.n(), |_, _| cn01(&mut rng));
            let xi = &factor * z;
            let mut sample = CMatrix::zeros(n_tx, n_rf);
            for (p, &(i, j)) in ctx.active.iter().enumerate() {
                sample[(i, j)] = xi[p];
            }
            let mut any_feasible = false;
            let mut previous: Option<CMatrix> = None;
            for &level in levels.iter().chain(if levels.is_empty() { &[-1.0][..] } else { &[][..] }) {
                let mut f = CMatrix::zeros(n_tx, n_rf);
                for (p, &(i, j)) in ctx.active.iter().enumerate() {
                    if diag[p] > level {
                        let phase = if xi[p].norm() > 0.0 { xi[p].arg() } else { 0.0 };
                        f[(i, j)] = C64::from_polar(modulus, phase);
                    }
                }
                if previous.as_ref() == Some(&f) {
                    continue;
                }
                previous = Some(f.clone());
                match rescale_to_feasible(ctx.data, &ctx.with_analog(f), CANDIDATE_RTOL) {
                    Ok(d) => {
                        any_feasible = true;
                        let objective = ctx.data.objective(&d);
                        if best.as_ref().is_none_or(|b| objective < b.objective) {
                            best = Some(Extraction { design: d, sample: sample.clone(), objective, draw: Some(draw), feasible_draws: 0 });
                        }
                    }
                    Err(v) => {
                        best_violation = best_violation.min(v);
                        if k + 1 == points.len() && fallback.as_ref().is_none_or(|f| v < f.0) {
                            fallback = Some((v, sample.clone()));
                        }
                    }
                }
            }
            if any_feasible {
                feasible_draws += 1;
            }
            draw += 1;
        }
    }
    match best {
        Some(mut e) => {
            e.feasible_draws = feasible_draws;
            if e.draw.is_none() {
                if let Some((_, s)) = fallback {
                    e.sample = s;
                }
            }
            Ok(e)
        }
        None => Err(StageError::RandomizationFailure { best_violation }),
    }
}

/// Result of one analog stage pass.
#[derive(Clone, Debug)]
pub struct AnalogOutcome {
    pub relaxed: CMatrix,
    pub relaxed_objective: f64,
    pub extraction: Extraction,
    pub trace: ScaTrace,
}

/// SCA from the incumbent's lift followed by Gaussian randomization over the iterates.
pub fn optimize_analog(data: &ProblemData, incumbent: &HybridDesign, opts: &AnalogOptions) -> Result<AnalogOutcome, StageError> {
    let ctx = AnalogContext::new(data, incumbent);
    if ctx.n() == 0 {
        return Err(StageError::Infeasible(None));
    }
    let path = std::cell::RefCell::new(Vec::new());
    let start = AnalogState::from_matrix(&incumbent.f).lift();
    let (relaxed, trace) = run_sca(
        start,
        &opts.sca,
        |loc| {
            let next = solve_step(&ctx, loc, &opts.sca);
            if let Ok(x) = &next {
                path.borrow_mut().push(x.clone());
            }
            next
        },
        |x| ctx.objective(x),
    );
    let relaxed_objective = ctx.objective(&relaxed);
    let mut points = path.into_inner();
    // Iterates rejected by the monotonicity guard are not used.
    points.truncate(trace.objectives.len() - 1);
    if points.is_empty() {
        points.push(relaxed.clone());
    }
    let extraction = randomize_path(&ctx, &points, opts)?;
    Ok(AnalogOutcome { relaxed, relaxed_objective, extraction, trace })
}
