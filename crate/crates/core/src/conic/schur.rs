//! Schur-complement encoding of a trace-CRB bound as linear matrix inequalities.
//!
//! For a FIM `M` that is affine in the design variables, `tr(M⁻¹) ≤ Γ` holds iff
//! there are `t_i` with `Σ t_i ≤ Γ` and `[[M, e_i], [e_iᵀ, t_i]] ⪰ 0` for every
//! parameter `i`. Two changes of variables keep the blocks well conditioned:
//! the FIM is balanced as `M' = D M D` with a fixed positive diagonal `D`, and
//! the slacks are measured in units of `u`, `t_i = u·s_i`. The blocks then read
//! `[[M', (d_i/√u) e_i], [·, s_i]] ⪰ 0`, which is equivalent to the original.

use super::{AffineExpr, ConicProgram, VarId, VarKind};
use crate::array_sensing::packed_index;
use crate::design::ConstraintClass;

/// Handles to the variables added by [`schur_crb_lmis`].
#[derive(Clone, Copy, Debug)]
pub struct SchurCrb {
    /// Balanced FIM entries, packed upper triangle.
    pub m: VarId,
    /// Scaled slacks; `t_i = unit · s_i`.
    pub s: VarId,
    pub unit: f64,
    pub p: usize,
}

/// Add the balanced FIM variables and the `p` Schur blocks.
///
/// `fim` lists the FIM entries as affine expressions in packed upper-triangle order.
pub fn schur_crb_lmis(prog: &mut ConicProgram, fim: &[AffineExpr], p: usize, balance: &[f64], unit: f64) -> SchurCrb {
    assert_eq!(fim.len(), p * (p + 1) / 2, "packed FIM has wrong length");
    assert_eq!(balance.len(), p, "one balancing factor per parameter");
    assert!(unit > 0.0, "slack unit must be positive");
    let m = prog.add_var("fim_balanced", VarKind::RealVector(fim.len()));
    let s = prog.add_var("crb_slack", VarKind::RealVector(p));
    for a in 0..p {
        for b in a..p {
            let k = packed_index(a, b, p);
            let expr = fim[k].clone().scaled(balance[a] * balance[b]).plus(AffineExpr::real(m, k, -1.0));
            prog.add_zero(expr, ConstraintClass::Crb, &format!("fim[{a},{b}]"));
        }
    }
    for i in 0..p {
        let mut entries = Vec::with_capacity(p * (p + 1) / 2 + 2);
        for a in 0..p {
            for b in a..p {
                entries.push((a, b, AffineExpr::real(m, packed_index(a, b, p), 1.0)));
            }
        }
        entries.push((i, p, AffineExpr::constant(balance[i] / unit.sqrt())));
        entries.push((p, p, AffineExpr::real(s, i, 1.0)));
        prog.add_lmi(p + 1, entries, ConstraintClass::Crb, &format!("schur[{i}]"));
    }
    SchurCrb { m, s, unit, p }
}

/// Schur blocks plus the budget `Σ t_i ≤ crb_max`.
pub fn schur_crb_blocks(prog: &mut ConicProgram, fim: &[AffineExpr], p: usize, balance: &[f64], crb_max: f64) -> SchurCrb {
    let h = schur_crb_lmis(prog, fim, p, balance, crb_max);
    let mut budget = AffineExpr::constant(1.0);
    for i in 0..p {
        budget = budget.plus(AffineExpr::real(h.s, i, -1.0));
    }
    prog.add_nonneg(budget, ConstraintClass::Crb, "crb_budget");
    h
}

impl SchurCrb {
    /// `Σ t_i` as an affine expression.
    pub fn total(&self) -> AffineExpr {
        (0..self.p).fold(AffineExpr::zero(), |acc, i| acc.plus(AffineExpr::real(self.s, i, self.unit)))
    }
}
