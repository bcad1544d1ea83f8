//! Solver-agnostic conic programs over Hermitian PSD matrices and real scalars.
//!
//! A [`ConicProgram`] holds variables, affine constraints (equalities,
//! inequalities and linear matrix inequalities) and a linear objective to be
//! minimised. [`ConicProgram::solve`] lowers it to a standard primal form and
//! runs the bundled primal-dual interior-point method in [`ipm`].
//!
//! Hermitian coefficients pair with variables through `Re tr(C X)`.

pub mod ipm;
pub mod schur;

use std::collections::BTreeMap;
use std::io::{self, Write};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::design::ConstraintClass;
use crate::linalg::{c64, hermitian_defect, hermitian_part, min_eigenvalue, re_trace_product, CMatrix, C64};

#[derive(Debug, Error, PartialEq)]
pub enum ConicError {
    #[error("matrix is not Hermitian (defect {0:e})")]
    NotHermitian(f64),
    #[error("malformed program: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(pub usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum VarKind {
    /// Hermitian positive semidefinite `n×n` matrix.
    HermitianPsd(usize),
    /// Free real scalar.
    RealScalar,
    /// Free real vector.
    RealVector(usize),
}

impl VarKind {
    fn real_len(&self) -> usize {
        match self {
            VarKind::HermitianPsd(_) => 0,
            VarKind::RealScalar => 1,
            VarKind::RealVector(n) => *n,
        }
    }
}

#[derive(Clone, Debug)]
pub struct VarDecl {
    pub name: String,
    pub kind: VarKind,
}

/// Coefficient of a Hermitian variable in an affine expression.
#[derive(Clone, Debug)]
pub enum HermCoeff {
    Dense(CMatrix),
    /// Entries `(r, s, c)` contributing `Re(c · X[s, r])`.
    Entries(Vec<(usize, usize, C64)>),
}

impl HermCoeff {
    fn eval(&self, x: &CMatrix) -> f64 {
        match self {
            HermCoeff::Dense(c) => re_trace_product(c, x),
            HermCoeff::Entries(e) => e.iter().map(|&(r, s, c)| (c * x[(s, r)]).re).sum(),
        }
    }

    fn scale(&mut self, a: f64) {
        match self {
            HermCoeff::Dense(c) => *c *= c64(a, 0.0),
            HermCoeff::Entries(e) => e.iter_mut().for_each(|t| t.2 *= a),
        }
    }
}

/// `constant + Σ coef·real_entry + Σ Re tr(C X)`.
#[derive(Clone, Debug, Default)]
pub struct AffineExpr {
    pub constant: f64,
    pub real: Vec<(VarId, usize, f64)>,
    pub herm: Vec<(VarId, HermCoeff)>,
}

impl AffineExpr {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn constant(c: f64) -> Self {
        Self { constant: c, ..Self::default() }
    }

    /// `coef · var[idx]` for a real variable.
    pub fn real(var: VarId, idx: usize, coef: f64) -> Self {
        Self { real: vec![(var, idx, coef)], ..Self::default() }
    }

    /// `Re tr(C X)` for a Hermitian variable `X`.
    pub fn trace(var: VarId, c: CMatrix) -> Self {
        Self { herm: vec![(var, HermCoeff::Dense(c))], ..Self::default() }
    }

    /// `Re(c · X[s, r])`.
    pub fn entry(var: VarId, r: usize, s: usize, c: C64) -> Self {
        Self { herm: vec![(var, HermCoeff::Entries(vec![(r, s, c)]))], ..Self::default() }
    }

    pub fn plus(mut self, other: AffineExpr) -> Self {
        self.constant += other.constant;
        self.real.extend(other.real);
        self.herm.extend(other.herm);
        self
    }

    pub fn plus_const(mut self, c: f64) -> Self {
        self.constant += c;
        self
    }

    pub fn scaled(mut self, a: f64) -> Self {
        self.constant *= a;
        self.real.iter_mut().for_each(|t| t.2 *= a);
        self.herm.iter_mut().for_each(|t| t.1.scale(a));
        self
    }

    pub fn eval(&self, values: &[VarValue]) -> f64 {
        let mut v = self.constant;
        for &(var, idx, coef) in &self.real {
            v += coef * values[var.0].real()[idx];
        }
        for (var, c) in &self.herm {
            v += c.eval(values[var.0].herm());
        }
        v
    }
}

#[derive(Clone, Debug)]
pub enum ConstraintKind {
    /// `expr = 0`.
    Zero(AffineExpr),
    /// `expr ≥ 0`.
    Nonneg(AffineExpr),
    /// Symmetric `dim×dim` matrix of affine entries is PSD; entries listed for `a ≤ b`, missing ones are zero.
    Lmi { dim: usize, entries: Vec<(usize, usize, AffineExpr)> },
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub kind: ConstraintKind,
    pub class: ConstraintClass,
    pub label: String,
}

#[derive(Clone, Debug, Default)]
pub struct ConicProgram {
    pub vars: Vec<VarDecl>,
    pub constraints: Vec<Constraint>,
    pub objective: AffineExpr,
}

#[derive(Clone, Debug, PartialEq)]
pub enum VarValue {
    Hermitian(CMatrix),
    Real(Vec<f64>),
}

impl VarValue {
    pub fn herm(&self) -> &CMatrix {
        match self {
            VarValue::Hermitian(m) => m,
            VarValue::Real(_) => panic!("variable is real, not Hermitian"),
        }
    }

    pub fn real(&self) -> &[f64] {
        match self {
            VarValue::Real(v) => v,
            VarValue::Hermitian(_) => panic!("variable is Hermitian, not real"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    Unbounded,
    NumericalFailure,
    MaxIter,
}

#[derive(Clone, Debug)]
pub struct SolverSettings {
    /// Relative primal/dual residual and gap tolerance of the interior-point loop.
    pub tol: f64,
    /// Largest constraint violation accepted for an optimal status.
    pub feas_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { tol: 1e-9, feas_tol: 1e-7, max_iter: 100 }
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub status: SolveStatus,
    pub values: Vec<VarValue>,
    pub objective_value: f64,
    pub max_violation: f64,
    pub iterations: usize,
    /// For infeasible programs, the share of the Farkas certificate carried by each constraint class.
    pub certificate: Vec<(ConstraintClass, f64)>,
}

impl Solution {
    pub fn herm(&self, v: VarId) -> &CMatrix {
        self.values[v.0].herm()
    }

    pub fn real(&self, v: VarId) -> &[f64] {
        self.values[v.0].real()
    }

    /// Constraint class with the largest certificate weight.
    pub fn binding_class(&self) -> Option<ConstraintClass> {
        self.certificate
            .iter()
            .copied()
            .filter(|(_, w)| *w > 0.0)
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(c, _)| c)
    }
}

/// `[[Re H, −Im H], [Im H, Re H]]`.
pub fn embed_complex(h: &CMatrix) -> Result<DMatrix<f64>, ConicError> {
    let scale = h.iter().map(|z| z.norm()).fold(1.0, f64::max);
    let defect = hermitian_defect(h);
    if defect > 1e-10 * scale {
        return Err(ConicError::NotHermitian(defect));
    }
    let n = h.nrows();
    let mut e = DMatrix::zeros(2 * n, 2 * n);
    for r in 0..n {
        for c in 0..n {
            let z = h[(r, c)];
            e[(r, c)] = z.re;
            e[(r + n, c + n)] = z.re;
            e[(r, c + n)] = -z.im;
            e[(r + n, c)] = z.im;
        }
    }
    Ok(e)
}

/// Inverse of [`embed_complex`] for matrices with the embedded structure.
pub fn extract_complex(e: &DMatrix<f64>) -> CMatrix {
    let n = e.nrows() / 2;
    CMatrix::from_fn(n, n, |r, c| {
        c64(0.5 * (e[(r, c)] + e[(r + n, c + n)]), 0.5 * (e[(r + n, c)] - e[(r, c + n)]))
    })
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_var(&mut self, name: &str, kind: VarKind) -> VarId {
        self.vars.push(VarDecl { name: name.to_string(), kind });
        VarId(self.vars.len() - 1)
    }

    pub fn add_zero(&mut self, expr: AffineExpr, class: ConstraintClass, label: &str) {
        self.push(ConstraintKind::Zero(expr), class, label);
    }

    pub fn add_nonneg(&mut self, expr: AffineExpr, class: ConstraintClass, label: &str) {
        self.push(ConstraintKind::Nonneg(expr), class, label);
    }

    pub fn add_lmi(&mut self, dim: usize, entries: Vec<(usize, usize, AffineExpr)>, class: ConstraintClass, label: &str) {
        self.push(ConstraintKind::Lmi { dim, entries }, class, label);
    }

    pub fn set_objective(&mut self, expr: AffineExpr) {
        self.objective = expr;
    }

    pub fn objective(&self) -> &AffineExpr {
        &self.objective
    }

    fn push(&mut self, kind: ConstraintKind, class: ConstraintClass, label: &str) {
        self.constraints.push(Constraint { kind, class, label: label.to_string() });
    }

    fn check_expr(&self, e: &AffineExpr) -> Result<(), ConicError> {
        let bad = |m: String| Err(ConicError::Malformed(m));
        for &(v, idx, _) in &e.real {
            match self.vars.get(v.0) {
                Some(d) if idx < d.kind.real_len() => {}
                _ => return bad(format!("real term references {:?}[{idx}]", v)),
            }
        }
        for (v, c) in &e.herm {
            let n = match self.vars.get(v.0).map(|d| &d.kind) {
                Some(VarKind::HermitianPsd(n)) => *n,
                _ => return bad(format!("Hermitian term references {:?}", v)),
            };
            match c {
                HermCoeff::Dense(m) if m.nrows() != n || m.ncols() != n => {
                    return bad(format!("coefficient of {:?} is {}x{}, expected {n}", v, m.nrows(), m.ncols()))
                }
                HermCoeff::Entries(es) if es.iter().any(|&(r, s, _)| r >= n || s >= n) => {
                    return bad(format!("entry out of range for {:?}", v))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Check that every term references a declared variable with matching shape.
    pub fn validate(&self) -> Result<(), ConicError> {
        self.check_expr(&self.objective)?;
        for c in &self.constraints {
            match &c.kind {
                ConstraintKind::Zero(e) | ConstraintKind::Nonneg(e) => self.check_expr(e)?,
                ConstraintKind::Lmi { dim, entries } => {
                    for (a, b, e) in entries {
                        if a > b || *b >= *dim {
                            return Err(ConicError::Malformed(format!("LMI entry ({a},{b}) invalid for size {dim}")));
                        }
                        self.check_expr(e)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Largest violation of any constraint or cone membership at `values`.
    pub fn max_violation(&self, values: &[VarValue]) -> f64 {
        let mut worst: f64 = 0.0;
        for (decl, v) in self.vars.iter().zip(values) {
            if let VarKind::HermitianPsd(n) = decl.kind {
                if n > 0 {
                    worst = worst.max(-min_eigenvalue(v.herm()));
                }
            }
        }
        for c in &self.constraints {
            let viol = match &c.kind {
                ConstraintKind::Zero(e) => e.eval(values).abs(),
                ConstraintKind::Nonneg(e) => (-e.eval(values)).max(0.0),
                ConstraintKind::Lmi { dim, entries } => {
                    let mut g = DMatrix::<f64>::zeros(*dim, *dim);
                    for (a, b, e) in entries {
                        let x = e.eval(values);
                        g[(*a, *b)] += x;
                        if a != b {
                            g[(*b, *a)] += x;
                        }
                    }
                    (-g.symmetric_eigenvalues().min()).max(0.0)
                }
            };
            worst = worst.max(viol);
        }
        worst
    }

    pub fn solve(&self, settings: &SolverSettings) -> Result<Solution, ConicError> {
        self.validate()?;
        let lowered = Lowered::new(self);
        let out = ipm::solve(&lowered.form, settings);
        let values = lowered.extract(self, &out.x_blocks, &out.x_free);
        let objective_value = self.objective.eval(&values);
        let max_violation = self.max_violation(&values);
        let mut status = out.status;
        if status == SolveStatus::Optimal && max_violation > settings.feas_tol {
            log::debug!("optimal status downgraded: violation {max_violation:e}");
            status = SolveStatus::NumericalFailure;
        }
        let certificate = if status == SolveStatus::Infeasible {
            lowered.certificate(self, &out.y, &out.row_scale)
        } else {
            Vec::new()
        };
        Ok(Solution { status, values, objective_value, max_violation, iterations: out.iterations, certificate })
    }

    /// Write the program as plain-text sparse triplets.
    ///
    /// Format, one record per line:
    /// `var <id> <name> herm <n>` or `var <id> <name> real <len>`;
    /// `con <id> <zero|nonneg|lmi> <class> <dim> <label>` followed by
    /// `term <a> <b> const <value>`, `term <a> <b> real <var> <idx> <coef>` and
    /// `term <a> <b> herm <var> <r> <s> <value>` lines, where Hermitian terms are
    /// written on the real symmetric embedding `[[Re, −Im], [Im, Re]]` (row and
    /// column indices up to `2n`, upper triangle, value halved so that the
    /// functional is `Σ value · E[r,s]` summed symmetrically); `(a, b)` is the LMI
    /// position and `0 0` for scalar constraints. The objective is `con obj`.
    pub fn write_triplets<W: Write>(&self, mut w: W) -> io::Result<()> {
        for (i, v) in self.vars.iter().enumerate() {
            match v.kind {
                VarKind::HermitianPsd(n) => writeln!(w, "var {i} {} herm {n}", v.name)?,
                ref k => writeln!(w, "var {i} {} real {}", v.name, k.real_len())?,
            }
        }
        let write_expr = |w: &mut W, a: usize, b: usize, e: &AffineExpr| -> io::Result<()> {
            writeln!(w, "term {a} {b} const {:e}", e.constant)?;
            for &(v, idx, coef) in &e.real {
                writeln!(w, "term {a} {b} real {} {idx} {coef:e}", v.0)?;
            }
            for (v, c) in &e.herm {
                for (r, s, val) in embedded_triplets(c, self.herm_dim(*v)) {
                    writeln!(w, "term {a} {b} herm {} {r} {s} {val:e}", v.0)?;
                }
            }
            Ok(())
        };
        writeln!(w, "con obj objective other 1 objective")?;
        write_expr(&mut w, 0, 0, &self.objective)?;
        for (i, c) in self.constraints.iter().enumerate() {
            match &c.kind {
                ConstraintKind::Zero(e) | ConstraintKind::Nonneg(e) => {
                    let kind = if matches!(c.kind, ConstraintKind::Zero(_)) { "zero" } else { "nonneg" };
                    writeln!(w, "con {i} {kind} {} 1 {}", c.class, c.label)?;
                    write_expr(&mut w, 0, 0, e)?;
                }
                ConstraintKind::Lmi { dim, entries } => {
                    writeln!(w, "con {i} lmi {} {dim} {}", c.class, c.label)?;
                    for (a, b, e) in entries {
                        write_expr(&mut w, *a, *b, e)?;
                    }
                }
            }
        }
        Ok(())
    }

    fn herm_dim(&self, v: VarId) -> usize {
        match self.vars[v.0].kind {
            VarKind::HermitianPsd(n) => n,
            _ => 0,
        }
    }
}

/// Upper-triangle triplets of the real embedding of a Hermitian coefficient, such that
/// `Re tr(C X) = ½ Σ_{r,s} E[r,s] X̂[r,s]` over the embedded variable `X̂`.
fn embedded_triplets(c: &HermCoeff, n: usize) -> Vec<(usize, usize, f64)> {
    let dense = dense_hermitian(c, n);
    let e = embed_complex(&dense).unwrap_or_else(|_| DMatrix::zeros(2 * n, 2 * n));
    let mut out = Vec::new();
    for r in 0..2 * n {
        for s in r..2 * n {
            let v = e[(r, s)];
            if v != 0.0 {
                out.push((r, s, if r == s { 0.5 * v } else { v }));
            }
        }
    }
    out
}

/// Hermitian matrix `A` with `Re tr(A X) = coefficient(X)` for Hermitian `X`.
fn dense_hermitian(c: &HermCoeff, n: usize) -> CMatrix {
    match c {
        HermCoeff::Dense(m) => hermitian_part(m),
        HermCoeff::Entries(es) => {
            let mut m = CMatrix::zeros(n, n);
            for &(r, s, v) in es {
                m[(r, s)] += v * 0.5;
                m[(s, r)] += v.conj() * 0.5;
            }
            m
        }
    }
}

/// Hermitian-completed sparse form of a coefficient, merged by position.
fn sparse_hermitian(es: &[(usize, usize, C64)]) -> Vec<(usize, usize, C64)> {
    let mut map: BTreeMap<(usize, usize), C64> = BTreeMap::new();
    for &(r, s, v) in es {
        *map.entry((r, s)).or_default() += v * 0.5;
        *map.entry((s, r)).or_default() += v.conj() * 0.5;
    }
    map.into_iter().filter(|(_, v)| v.norm() != 0.0).map(|((r, s), v)| (r, s, v)).collect()
}

/// Where each program row came from, for certificate attribution.
struct Lowered {
    form: ipm::StdForm,
    herm_block: Vec<Option<usize>>,
    free_offset: Vec<usize>,
    row_origin: Vec<usize>,
}

impl Lowered {
    fn new(p: &ConicProgram) -> Self {
        let mut blocks = Vec::new();
        let mut herm_block = vec![None; p.vars.len()];
        let mut free_offset = vec![0; p.vars.len()];
        let mut n_free = 0;
        for (i, v) in p.vars.iter().enumerate() {
            match v.kind {
                VarKind::HermitianPsd(n) => {
                    herm_block[i] = Some(blocks.len());
                    blocks.push(ipm::BlockSpec { n, real: false });
                }
                ref k => {
                    free_offset[i] = n_free;
                    n_free += k.real_len();
                }
            }
        }
        let mut rows = Vec::new();
        let mut b = Vec::new();
        let mut row_origin = Vec::new();
        let mut n_lp = 0;

        let herm_dims: Vec<usize> = blocks.iter().map(|b: &ipm::BlockSpec| b.n).collect();
        let lower_expr = |e: &AffineExpr, row: &mut ipm::Row| {
            let mut per_block: BTreeMap<usize, Vec<&HermCoeff>> = BTreeMap::new();
            for (v, c) in &e.herm {
                per_block.entry(herm_block[v.0].expect("Hermitian variable")).or_default().push(c);
            }
            for (blk, coeffs) in per_block {
                let n = herm_dims[blk];
                let nnz: usize = coeffs
                    .iter()
                    .map(|c| match c {
                        HermCoeff::Dense(_) => n * n,
                        HermCoeff::Entries(es) => 2 * es.len(),
                    })
                    .sum();
                let coeff = if nnz * 4 > n * n {
                    let mut m = CMatrix::zeros(n, n);
                    for c in coeffs {
                        m += dense_hermitian(c, n);
                    }
                    ipm::BlockCoeff::Dense(m)
                } else {
                    let mut es = Vec::new();
                    for c in coeffs {
                        if let HermCoeff::Entries(e) = c {
                            es.extend_from_slice(e);
                        }
                    }
                    ipm::BlockCoeff::Sparse(sparse_hermitian(&es))
                };
                row.blocks.push((blk, coeff));
            }
            let mut free: BTreeMap<usize, f64> = BTreeMap::new();
            for &(v, idx, coef) in &e.real {
                *free.entry(free_offset[v.0] + idx).or_default() += coef;
            }
            row.free = free.into_iter().collect();
        };

        let mut c_row = ipm::Row::default();
        lower_expr(&p.objective, &mut c_row);

        for (ci, c) in p.constraints.iter().enumerate() {
            match &c.kind {
                ConstraintKind::Zero(e) => {
                    let mut row = ipm::Row::default();
                    lower_expr(e, &mut row);
                    rows.push(row);
                    b.push(-e.constant);
                    row_origin.push(ci);
                }
                ConstraintKind::Nonneg(e) => {
                    let mut row = ipm::Row::default();
                    lower_expr(e, &mut row);
                    row.lp.push((n_lp, -1.0));
                    n_lp += 1;
                    rows.push(row);
                    b.push(-e.constant);
                    row_origin.push(ci);
                }
                ConstraintKind::Lmi { dim, entries } => {
                    let blk = blocks.len();
                    blocks.push(ipm::BlockSpec { n: *dim, real: true });
                    let mut map: BTreeMap<(usize, usize), &AffineExpr> = BTreeMap::new();
                    for (a, bb, e) in entries {
                        map.insert((*a, *bb), e);
                    }
                    for a in 0..*dim {
                        for bb in a..*dim {
                            let mut row = ipm::Row::default();
                            let mut constant = 0.0;
                            if let Some(e) = map.get(&(a, bb)) {
                                lower_expr(e, &mut row);
                                constant = e.constant;
                            }
                            let slack = if a == bb {
                                vec![(a, a, c64(-1.0, 0.0))]
                            } else {
                                vec![(a, bb, c64(-0.5, 0.0)), (bb, a, c64(-0.5, 0.0))]
                            };
                            row.blocks.push((blk, ipm::BlockCoeff::Sparse(slack)));
                            rows.push(row);
                            b.push(-constant);
                            row_origin.push(ci);
                        }
                    }
                }
            }
        }

        let mut c_blocks: Vec<Option<ipm::BlockCoeff>> = vec![None; blocks.len()];
        for (blk, coeff) in c_row.blocks {
            c_blocks[blk] = Some(coeff);
        }
        let mut c_free = vec![0.0; n_free];
        for (i, v) in c_row.free {
            c_free[i] += v;
        }
        let form = ipm::StdForm {
            blocks,
            n_lp,
            n_free,
            rows,
            b: DVector::from_vec(b),
            c_blocks,
            c_lp: DVector::zeros(n_lp),
            c_free: DVector::from_vec(c_free),
        };
        Self { form, herm_block, free_offset, row_origin }
    }

    fn extract(&self, p: &ConicProgram, x_blocks: &[CMatrix], x_free: &DVector<f64>) -> Vec<VarValue> {
        p.vars
            .iter()
            .enumerate()
            .map(|(i, v)| match v.kind {
                VarKind::HermitianPsd(_) => VarValue::Hermitian(hermitian_part(&x_blocks[self.herm_block[i].unwrap()])),
                ref k => {
                    let o = self.free_offset[i];
                    VarValue::Real((0..k.real_len()).map(|j| x_free[o + j]).collect())
                }
            })
            .collect()
    }

    fn certificate(&self, p: &ConicProgram, y: &DVector<f64>, row_scale: &[f64]) -> Vec<(ConstraintClass, f64)> {
        let mut acc: Vec<(ConstraintClass, f64)> = Vec::new();
        for (i, &ci) in self.row_origin.iter().enumerate() {
            let w = (self.form.b[i] * row_scale[i] * y[i]).max(0.0);
            let class = p.constraints[ci].class;
            match acc.iter_mut().find(|(c, _)| *c == class) {
                Some(e) => e.1 += w,
                None => acc.push((class, w)),
            }
        }
        let total: f64 = acc.iter().map(|e| e.1).sum();
        if total > 0.0 {
            acc.iter_mut().for_each(|e| e.1 /= total);
        }
        acc
    }
}
