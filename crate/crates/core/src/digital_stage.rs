//! Digital beamforming for a fixed analog network.
//!
//! The rank-one covariances `w_k w_k^H` are lifted to PSD matrices `R_k`, the
//! concave amplifier and RF-chain costs are replaced by tangent upper bounds
//! around the current point, and the convex surrogate is solved repeatedly.
//! A rank-one digital design with the same total covariance is then read off
//! the relaxed solution.

use crate::array_sensing::packed_index;
use crate::conic::schur::schur_crb_blocks;
use crate::conic::{AffineExpr, ConicProgram, SolveStatus, VarId, VarKind};
use crate::design::{Architecture, ConstraintClass, HybridDesign, ProblemData};
use crate::linalg::{c64, hermitian_part, min_eigenvalue, outer, quad_form, trace_re, CMatrix, CVector};
use crate::power_models::relaxed_onoff_power;
use crate::sca::{run_sca, ScaOptions, ScaTrace, StageError};

/// Floor on the local per-antenna power used in amplifier tangents, relative to `P_max`.
pub const TANGENT_FLOOR_REL: f64 = 1e-14;

/// Digital covariances over the chain space.
#[derive(Clone, Debug, PartialEq)]
pub struct TxCovariances {
    pub r: Vec<CMatrix>,
    pub s: CMatrix,
    /// Beamformers after rank-one recovery; empty before.
    pub w: Vec<CVector>,
}

impl TxCovariances {
    pub fn total(&self) -> CMatrix {
        let mut q = self.s.clone();
        for r in &self.r {
            q += r;
        }
        q
    }

    pub fn from_beams(w: &[CVector], s: &CMatrix) -> Self {
        Self { r: w.iter().map(outer).collect(), s: s.clone(), w: w.to_vec() }
    }
}

/// Surrogate flavour.
#[derive(Clone, Debug)]
pub enum Surrogate<'a> {
    /// Convex start-up problem: fixed amplifier efficiency, no RF-chain term.
    Startup,
    /// Tangent upper bound around the given point.
    Tangent(&'a TxCovariances),
}

/// Variables of a digital program.
#[derive(Clone, Debug)]
pub struct DigitalVars {
    pub r: Vec<VarId>,
    pub s: VarId,
}

/// Fixed analog network restricted to the active chains.
#[derive(Clone, Debug)]
pub struct DigitalContext<'a> {
    pub data: &'a ProblemData,
    pub f: CMatrix,
    pub arch: Architecture,
    /// Chains taking part in the optimisation.
    pub active: Vec<usize>,
    fa: CMatrix,
}

impl<'a> DigitalContext<'a> {
    pub fn new(data: &'a ProblemData, f: &CMatrix, arch: Architecture, active: Vec<usize>) -> Self {
        let fa = CMatrix::from_fn(f.nrows(), active.len(), |i, j| f[(i, active[j])]);
        Self { data, f: f.clone(), arch, active, fa }
    }

    /// Context over every chain whose analog column is not all zero.
    pub fn connected(data: &'a ProblemData, f: &CMatrix, arch: Architecture) -> Self {
        let active = (0..f.ncols()).filter(|&j| f.column(j).iter().any(|z| z.norm() != 0.0)).collect();
        Self::new(data, f, arch, active)
    }

    pub fn n(&self) -> usize {
        self.active.len()
    }

    /// `F_a^H A F_a`.
    fn phi(&self, a: &CMatrix) -> CMatrix {
        hermitian_part(&(self.fa.adjoint() * a * &self.fa))
    }

    fn antenna_rows(&self) -> Vec<(usize, CVector)> {
        (0..self.fa.nrows())
            .filter_map(|n| {
                let row: CVector = self.fa.row(n).adjoint();
                (row.norm() > 0.0).then_some((n, row))
            })
            .collect()
    }

    /// Expand chain-space covariances to a full design.
    pub fn expand(&self, cov: &TxCovariances) -> HybridDesign {
        let n_rf = self.f.ncols();
        let lift = |v: &CVector| {
            let mut out = CVector::zeros(n_rf);
            for (a, &j) in self.active.iter().enumerate() {
                out[j] = v[a];
            }
            out
        };
        let mut s = CMatrix::zeros(n_rf, n_rf);
        for (a, &i) in self.active.iter().enumerate() {
            for (b, &j) in self.active.iter().enumerate() {
                s[(i, j)] = cov.s[(a, b)];
            }
        }
        HybridDesign { f: self.f.clone(), w: cov.w.iter().map(lift).collect(), s, arch: self.arch }
    }

    /// Restrict a full design's digital part to the active chains.
    pub fn restrict(&self, design: &HybridDesign) -> TxCovariances {
        let w: Vec<CVector> = design
            .w
            .iter()
            .map(|v| CVector::from_fn(self.n(), |a, _| v[self.active[a]]))
            .collect();
        let s = CMatrix::from_fn(self.n(), self.n(), |a, b| design.s[(self.active[a], self.active[b])]);
        TxCovariances::from_beams(&w, &s)
    }

    /// Relaxed objective of chain-space covariances.
    pub fn objective(&self, cov: &TxCovariances) -> f64 {
        // The objective depends on the total covariance only; carry it in S.
        let lumped = TxCovariances { r: Vec::new(), s: cov.total(), w: Vec::new() };
        self.data.objective(&self.expand(&lumped))
    }
}

/// Build the convex surrogate for the given analog network.
pub fn build_digital_sdr(ctx: &DigitalContext<'_>, surrogate: &Surrogate<'_>) -> Result<(ConicProgram, DigitalVars), StageError> {
    let data = ctx.data;
    let scn = &data.scn;
    let n = ctx.n();
    let k_ir = scn.dims.k_ir;
    let mut prog = ConicProgram::new();
    let r: Vec<VarId> = (0..k_ir).map(|k| prog.add_var(&format!("R{k}"), VarKind::HermitianPsd(n))).collect();
    let s = prog.add_var("S", VarKind::HermitianPsd(n));
    let vars = DigitalVars { r: r.clone(), s };

    let total = |c: &CMatrix| -> AffineExpr {
        let mut e = AffineExpr::trace(s, c.clone());
        for &rk in &r {
            e = e.plus(AffineExpr::trace(rk, c.clone()));
        }
        e
    };

    for k in 0..k_ir {
        let g = ctx.fa.adjoint() * &scn.h[k] * c64(1.0 / scn.noise_ir[k].sqrt(), 0.0);
        let gg = outer(&g);
        let gamma = scn.thresholds.sinr_min[k];
        let mut e = AffineExpr::trace(r[k], gg.clone()).plus_const(-gamma);
        for (i, &ri) in r.iter().enumerate() {
            if i != k {
                e = e.plus(AffineExpr::trace(ri, gg.clone()).scaled(-gamma));
            }
        }
        e = e.plus(AffineExpr::trace(s, gg).scaled(-gamma));
        prog.add_nonneg(e, ConstraintClass::Sinr, &format!("sinr[{k}]"));
    }

    if let Some((coeffs, balance)) = &data.fim {
        let p = data.n_fim();
        let fim: Vec<AffineExpr> = (0..coeffs.len()).map(|i| total(&ctx.phi(&coeffs[i]))).collect();
        debug_assert_eq!(fim.len(), packed_index(p - 1, p - 1, p) + 1);
        schur_crb_blocks(&mut prog, &fim, p, balance, scn.thresholds.crb_max);
    }

    for (j, d) in scn.d.iter().enumerate() {
        let c = ctx.phi(&outer(d)) * c64(1.0 / data.eh_rf_target[j], 0.0);
        prog.add_nonneg(total(&c).plus_const(-1.0), ConstraintClass::Eh, &format!("eh[{j}]"));
    }

    let hw = &scn.hw;
    let rows = ctx.antenna_rows();
    let local_q = match surrogate {
        Surrogate::Tangent(loc) => Some(loc.total()),
        Surrogate::Startup => None,
    };
    let mut obj_c = CMatrix::zeros(n, n);
    let mut obj_const = 0.0;
    for (idx, row) in &rows {
        let e_n = outer(row);
        prog.add_nonneg(
            total(&e_n).scaled(-1.0 / hw.p_ant_max).plus_const(1.0),
            ConstraintClass::Power,
            &format!("antenna[{idx}]"),
        );
        let c_n = hw.p_ant_max.powf(hw.beta_pa) / hw.eta_max;
        match &local_q {
            Some(q) if hw.beta_pa > 0.0 => {
                let pj = quad_form(q, row).max(TANGENT_FLOOR_REL * hw.p_ant_max);
                let slope = c_n * (1.0 - hw.beta_pa) * pj.powf(-hw.beta_pa);
                obj_c += &e_n * c64(slope, 0.0);
                obj_const += c_n * pj.powf(1.0 - hw.beta_pa) - slope * pj;
            }
            _ => obj_c += &e_n * c64(1.0 / hw.eta_max, 0.0),
        }
    }
    let terms = data.terms;
    if let (Some(q), true) = (&local_q, terms.rf) {
        let norm = (1.0 / hw.eps_indicator).ln_1p();
        for a in 0..n {
            let v = q[(a, a)].re.max(0.0);
            let slope = hw.p_rf / norm / (v + hw.eps_indicator);
            obj_c[(a, a)] += c64(slope, 0.0);
            obj_const += hw.p_rf / norm * (v / hw.eps_indicator).ln_1p() - slope * v;
        }
    }
    // Constant phase-shifter term, so the surrogate matches the relaxed objective.
    if local_q.is_some() && terms.ps && ctx.arch == Architecture::Hybrid {
        let w: Vec<f64> = ctx.f.iter().map(|z| z.norm_sqr()).collect();
        obj_const += relaxed_onoff_power(&w, hw.p_ps, hw.eps_indicator);
    }
    prog.set_objective(total(&obj_c).plus_const(obj_const));
    Ok((prog, vars))
}

fn solve_program(ctx: &DigitalContext<'_>, surrogate: &Surrogate<'_>, opts: &ScaOptions) -> Result<TxCovariances, StageError> {
    let (prog, vars) = build_digital_sdr(ctx, surrogate)?;
    let sol = prog.solve(&opts.solver).map_err(|e| StageError::Dimension(e.to_string()))?;
    match sol.status {
        SolveStatus::Optimal => Ok(TxCovariances {
            r: vars.r.iter().map(|&v| sol.herm(v).clone()).collect(),
            s: sol.herm(vars.s).clone(),
            w: Vec::new(),
        }),
        SolveStatus::Infeasible => Err(StageError::Infeasible(sol.binding_class())),
        other => Err(StageError::Solver(other)),
    }
}

/// Result of the digital stage.
#[derive(Clone, Debug)]
pub struct DigitalOutcome {
    /// Relaxed solution before recovery.
    pub relaxed: TxCovariances,
    /// Rank-one recovered covariances (in chain space of the context).
    pub recovered: TxCovariances,
    pub design: HybridDesign,
    pub trace: ScaTrace,
}

/// SCA over the digital surrogate, starting from `init` or from the convex start-up problem.
pub fn sca_digital(ctx: &DigitalContext<'_>, init: Option<TxCovariances>, opts: &ScaOptions) -> Result<(TxCovariances, ScaTrace), StageError> {
    if ctx.n() == 0 {
        return Err(StageError::Infeasible(None));
    }
    let start = match init {
        Some(x) => x,
        None => solve_program(ctx, &Surrogate::Startup, opts)?,
    };
    Ok(run_sca(start, opts, |loc| solve_program(ctx, &Surrogate::Tangent(loc), opts), |x| ctx.objective(x)))
}

/// Rank-one designs with the same total covariance and the same useful signal power.
///
/// `f` maps the chain space of the inputs to the antennas.
pub fn recover_rank_one(r_bar: &[CMatrix], s_bar: &CMatrix, f: &CMatrix, h: &[CVector]) -> Result<TxCovariances, StageError> {
    let mut w = Vec::with_capacity(r_bar.len());
    let mut r = Vec::with_capacity(r_bar.len());
    let mut s = s_bar.clone();
    for (k, rk) in r_bar.iter().enumerate() {
        let g = f.adjoint() * &h[k];
        let gain = quad_form(rk, &g);
        let wk = if gain > 0.0 {
            rk * &g * c64(1.0 / gain.sqrt(), 0.0)
        } else if trace_re(rk).abs() <= 1e-300 {
            CVector::zeros(rk.nrows())
        } else {
            return Err(StageError::DegenerateRecovery(k));
        };
        let rank_one = outer(&wk);
        s += rk - &rank_one;
        r.push(rank_one);
        w.push(wk);
    }
    let s = hermitian_part(&s);
    let scale = trace_re(&s).abs().max(r_bar.iter().map(trace_re).sum::<f64>()).max(1e-300);
    let floor = min_eigenvalue(&s);
    if floor < -1e-8 * scale {
        log::warn!("recovered sensing covariance has eigenvalue {floor:e} (scale {scale:e})");
    }
    Ok(TxCovariances { r, s, w })
}

/// Run the digital stage: SCA, then rank-one recovery.
pub fn optimize_digital(ctx: &DigitalContext<'_>, init: Option<TxCovariances>, opts: &ScaOptions) -> Result<DigitalOutcome, StageError> {
    let (relaxed, trace) = sca_digital(ctx, init, opts)?;
    let recovered = recover_rank_one(&relaxed.r, &relaxed.s, &ctx.fa, &ctx.data.scn.h)?;
    let design = ctx.expand(&recovered);
    Ok(DigitalOutcome { relaxed, recovered, design, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{constraint_report, sinr};
    use crate::scenario::{generate_scenario, Dimensions, Geometry};

    fn setup(seed: u64) -> (ProblemData, CMatrix) {
        let dims = Dimensions::desk();
        let scn = generate_scenario(seed, &dims, &Geometry::default(), f64::NEG_INFINITY).unwrap();
        let data = ProblemData::new(&scn).unwrap();
        let n = dims.n_tx;
        let f = CMatrix::from_fn(n, dims.n_rf, |i, j| {
            C64::from_polar(1.0 / (n as f64).sqrt(), 0.7 * (i * (j + 1)) as f64)
        });
        (data, f)
    }

    use crate::conic::VarValue;
    use crate::linalg::C64;

    #[test]
    fn recovery_preserves_total_and_signal() {
        let (data, f) = setup(3);
        let ctx = DigitalContext::connected(&data, &f, Architecture::Hybrid);
        let t = std::time::Instant::now();
        let out = optimize_digital(&ctx, None, &ScaOptions::default()).unwrap();
        eprintln!("digital stage {:?}, {} iterations", t.elapsed(), out.trace.iterations);
        let diff = out.relaxed.total() - out.recovered.total();
        assert!(diff.norm() <= 1e-9 * out.relaxed.total().norm());
        for k in 0..out.recovered.r.len() {
            let g = ctx.fa.adjoint() * &data.scn.h[k];
            let a = quad_form(&out.relaxed.r[k], &g);
            let b = quad_form(&out.recovered.r[k], &g);
            assert!((a - b).abs() <= 1e-9 * a.abs());
        }
        assert!(min_eigenvalue(&out.recovered.s) >= -1e-8 * trace_re(&out.recovered.total()));
        let rep = constraint_report(&data.scn, &out.design);
        assert!(rep.satisfied(1e-5), "{rep:?}");
        let s = sinr(&data.scn, &out.design);
        for (k, v) in s.iter().enumerate() {
            assert!(*v >= data.scn.thresholds.sinr_min[k] * (1.0 - 1e-5));
        }
    }

    #[test]
    fn trace_is_monotone() {
        let (data, f) = setup(5);
        let ctx = DigitalContext::connected(&data, &f, Architecture::Hybrid);
        let (_, trace) = sca_digital(&ctx, None, &ScaOptions::default()).unwrap();
        for w in trace.objectives.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-9));
        }
    }

    #[test]
    fn tangent_surrogate_touches_objective() {
        let (data, f) = setup(7);
        let ctx = DigitalContext::connected(&data, &f, Architecture::Hybrid);
        let (x, _) = sca_digital(&ctx, None, &ScaOptions { max_iter: 1, ..Default::default() }).unwrap();
        let (prog, vars) = build_digital_sdr(&ctx, &Surrogate::Tangent(&x)).unwrap();
        let eval = |c: &TxCovariances| {
            let mut vals = vec![VarValue::Real(Vec::new()); prog.vars.len()];
            for (k, &v) in vars.r.iter().enumerate() {
                vals[v.0] = VarValue::Hermitian(c.r[k].clone());
            }
            vals[vars.s.0] = VarValue::Hermitian(c.s.clone());
            prog.objective().eval(&vals)
        };
        let at = eval(&x);
        let truth = ctx.objective(&x);
        assert!((at - truth).abs() <= 1e-9 * truth, "{at} vs {truth}");
        let other = TxCovariances {
            r: x.r.iter().map(|r| r * c64(0.5, 0.0)).collect(),
            s: &x.s * c64(1.3, 0.0),
            w: Vec::new(),
        };
        assert!(eval(&other) >= ctx.objective(&other) * (1.0 - 1e-12));
    }

    #[test]
    fn recovery_rejects_degenerate_input() {
        let g = CVector::from_vec(vec![c64(1.0, 0.0), c64(0.0, 0.0)]);
        let r = CMatrix::from_diagonal(&CVector::from_vec(vec![c64(0.0, 0.0), c64(1.0, 0.0)]));
        let s = CMatrix::zeros(2, 2);
        let f = CMatrix::identity(2, 2);
        assert_eq!(recover_rank_one(&[r], &s, &f, &[g]), Err(StageError::DegenerateRecovery(0)));
    }
}
