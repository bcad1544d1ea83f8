//! Infeasible primal-dual interior-point method for block semidefinite programs.
//!
//! Standard form:
//!
//! ```text
//! minimise   Σ_b Re tr(C_b X_b) + c_lᵀ x_l + c_fᵀ x_f
//! subject to Σ_b Re tr(A_ib X_b) + a_liᵀ x_l + a_fiᵀ x_f = b_i
//!            X_b ⪰ 0 (Hermitian), x_l ≥ 0, x_f free
//! ```
//!
//! Search directions use the HKM scaling with a Mehrotra predictor-corrector.
//! Free variables enter through an augmented Schur system solved by LU.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{SolveStatus, SolverSettings};
use crate::linalg::{c64, hermitian_part, re_trace_product, CMatrix, C64};

#[derive(Clone, Debug)]
pub struct BlockSpec {
    pub n: usize,
    /// Data and iterates are real symmetric.
    pub real: bool,
}

/// Hermitian coefficient of one row on one block; sparse entries are Hermitian-complete.
#[derive(Clone, Debug)]
pub enum BlockCoeff {
    Dense(CMatrix),
    Sparse(Vec<(usize, usize, C64)>),
}

impl BlockCoeff {
    fn inner(&self, x: &CMatrix) -> f64 {
        match self {
            BlockCoeff::Dense(a) => re_trace_product(a, x),
            BlockCoeff::Sparse(es) => es.iter().map(|&(r, s, a)| (a * x[(s, r)]).re).sum(),
        }
    }

    fn add_to(&self, acc: &mut CMatrix, y: f64) {
        match self {
            BlockCoeff::Dense(a) => acc.zip_apply(a, |s, v| *s += v * y),
            BlockCoeff::Sparse(es) => es.iter().for_each(|&(r, s, a)| acc[(r, s)] += a * y),
        }
    }

    fn norm_sq(&self) -> f64 {
        match self {
            BlockCoeff::Dense(a) => a.iter().map(|z| z.norm_sqr()).sum(),
            BlockCoeff::Sparse(es) => es.iter().map(|e| e.2.norm_sqr()).sum(),
        }
    }

    fn scale(&mut self, s: f64) {
        match self {
            BlockCoeff::Dense(a) => *a *= c64(s, 0.0),
            BlockCoeff::Sparse(es) => es.iter_mut().for_each(|e| e.2 *= s),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct Row {
    pub blocks: Vec<(usize, BlockCoeff)>,
    pub lp: Vec<(usize, f64)>,
    pub free: Vec<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct StdForm {
    pub blocks: Vec<BlockSpec>,
    pub n_lp: usize,
    pub n_free: usize,
    pub rows: Vec<Row>,
    pub b: DVector<f64>,
    pub c_blocks: Vec<Option<BlockCoeff>>,
    pub c_lp: DVector<f64>,
    pub c_free: DVector<f64>,
}

pub struct IpmOutput {
    pub status: SolveStatus,
    pub x_blocks: Vec<CMatrix>,
    pub x_free: DVector<f64>,
    /// Dual multipliers of the (row-normalised) equality constraints.
    pub y: DVector<f64>,
    /// Factor applied to each row by the internal normalisation.
    pub row_scale: Vec<f64>,
    pub iterations: usize,
}

struct Iterate {
    x: Vec<CMatrix>,
    xl: DVector<f64>,
    xf: DVector<f64>,
    y: DVector<f64>,
    z: Vec<CMatrix>,
    zl: DVector<f64>,
}

struct Direction {
    dx: Vec<CMatrix>,
    dxl: DVector<f64>,
    dxf: DVector<f64>,
    dy: DVector<f64>,
    dz: Vec<CMatrix>,
    dzl: DVector<f64>,
}

/// Per-block row lists: `(row index, coefficient)`.
type BlockRows<'a> = Vec<Vec<(usize, &'a BlockCoeff)>>;

struct Problem<'a> {
    f: &'a StdForm,
    by_block: BlockRows<'a>,
    lp_rows: Vec<Vec<(usize, f64)>>,
}

impl<'a> Problem<'a> {
    fn new(f: &'a StdForm) -> Self {
        let mut by_block: BlockRows<'a> = vec![Vec::new(); f.blocks.len()];
        let mut lp_rows = vec![Vec::new(); f.n_lp];
        for (i, row) in f.rows.iter().enumerate() {
            for (blk, c) in &row.blocks {
                by_block[*blk].push((i, c));
            }
            for &(j, a) in &row.lp {
                lp_rows[j].push((i, a));
            }
        }
        Self { f, by_block, lp_rows }
    }

    fn m(&self) -> usize {
        self.f.rows.len()
    }

    /// `A(X) + A_l x_l + A_f x_f`.
    fn apply(&self, x: &[CMatrix], xl: &DVector<f64>, xf: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.m());
        for (i, row) in self.f.rows.iter().enumerate() {
            let mut v = 0.0;
            for (blk, c) in &row.blocks {
                v += c.inner(&x[*blk]);
            }
            for &(j, a) in &row.lp {
                v += a * xl[j];
            }
            for &(j, a) in &row.free {
                v += a * xf[j];
            }
            out[i] = v;
        }
        out
    }

    /// `(Aᵀy)` split by block, LP part and free part.
    fn adjoint(&self, y: &DVector<f64>) -> (Vec<CMatrix>, DVector<f64>, DVector<f64>) {
        let mut blocks: Vec<CMatrix> = self.f.blocks.iter().map(|b| CMatrix::zeros(b.n, b.n)).collect();
        let mut lp = DVector::zeros(self.f.n_lp);
        let mut free = DVector::zeros(self.f.n_free);
        for (i, row) in self.f.rows.iter().enumerate() {
            if y[i] == 0.0 {
                continue;
            }
            for (blk, c) in &row.blocks {
                c.add_to(&mut blocks[*blk], y[i]);
            }
            for &(j, a) in &row.lp {
                lp[j] += a * y[i];
            }
            for &(j, a) in &row.free {
                free[j] += a * y[i];
            }
        }
        (blocks, lp, free)
    }

    fn c_block(&self, b: usize) -> CMatrix {
        let n = self.f.blocks[b].n;
        let mut m = CMatrix::zeros(n, n);
        if let Some(c) = &self.f.c_blocks[b] {
            c.add_to(&mut m, 1.0);
        }
        m
    }

    /// Schur complement `M_ij = Σ_b Re tr(A_ib X_b A_jb Z_b⁻¹) + Σ_l a_li a_lj x_l/z_l`.
    fn schur(&self, x: &[CMatrix], zinv: &[CMatrix], xl: &DVector<f64>, zl: &DVector<f64>) -> DMatrix<f64> {
        let m = self.m();
        let mut s = DMatrix::<f64>::zeros(m, m);
        for (b, rows) in self.by_block.iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xb = &x[b];
            let zi = &zinv[b];
            // G_j = X A_j Z⁻¹ for dense rows.
            let g: Vec<Option<CMatrix>> = rows
                .iter()
                .map(|(_, c)| match c {
                    BlockCoeff::Dense(a) => Some(xb * a * zi),
                    BlockCoeff::Sparse(_) => None,
                })
                .collect();
            for p in 0..rows.len() {
                let (i, ci) = rows[p];
                for q in p..rows.len() {
                    let (j, cj) = rows[q];
                    let v = if let Some(gj) = &g[q] {
                        ci.inner(gj)
                    } else if let Some(gi) = &g[p] {
                        cj.inner(gi)
                    } else {
                        sparse_pair(ci, cj, xb, zi)
                    };
                    s[(i, j)] += v;
                    if i != j {
                        s[(j, i)] += v;
                    }
                }
            }
        }
        for (l, rows) in self.lp_rows.iter().enumerate() {
            let d = xl[l] / zl[l];
            for &(i, a) in rows {
                for &(j, b) in rows {
                    s[(i, j)] += a * b * d;
                }
            }
        }
        s
    }
}

fn sparse_pair(ci: &BlockCoeff, cj: &BlockCoeff, x: &CMatrix, zi: &CMatrix) -> f64 {
    let (BlockCoeff::Sparse(ei), BlockCoeff::Sparse(ej)) = (ci, cj) else { unreachable!() };
    let mut v = 0.0;
    for &(r, s, a) in ei {
        for &(p, q, b) in ej {
            v += (a * x[(s, p)] * b * zi[(q, r)]).re;
        }
    }
    v
}

fn herm_inverse(z: &CMatrix) -> Option<CMatrix> {
    if z.nrows() == 0 {
        return Some(z.clone());
    }
    Cholesky::new(hermitian_part(z)).map(|c| c.inverse())
}

/// Largest `α` keeping `X + α dX ⪰ 0` (infinite if `dX ⪰ 0`); `None` if `X` is not PD.
fn max_step_psd(x: &CMatrix, dx: &CMatrix) -> Option<f64> {
    if x.nrows() == 0 {
        return Some(f64::INFINITY);
    }
    let chol = Cholesky::new(hermitian_part(x))?;
    let l = chol.l();
    let a = l.solve_lower_triangular(dx)?;
    let w = l.solve_lower_triangular(&a.adjoint())?;
    let min = hermitian_part(&w).symmetric_eigenvalues().min();
    Some(if min >= 0.0 { f64::INFINITY } else { -1.0 / min })
}

fn max_step_lp(x: &DVector<f64>, dx: &DVector<f64>) -> f64 {
    x.iter().zip(dx.iter()).filter(|(_, d)| **d < 0.0).map(|(v, d)| -v / d).fold(f64::INFINITY, f64::min)
}

fn cnorm_sq(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum()
}

fn realify(m: &mut CMatrix) {
    m.iter_mut().for_each(|z| z.im = 0.0);
}

/// `(K + K^H)/2` of `X dZ Z⁻¹`-type products.
fn sym_prod(a: &CMatrix, b: &CMatrix, c: &CMatrix) -> CMatrix {
    hermitian_part(&(a * b * c))
}

enum Kkt {
    Chol(Cholesky<f64, nalgebra::Dyn>),
    Lu(nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>),
}

impl Kkt {
    fn solve(&self, m: usize, rhs: &DVector<f64>, rd_f: &DVector<f64>) -> Option<(DVector<f64>, DVector<f64>)> {
        match self {
            Kkt::Chol(c) => Some((c.solve(rhs), DVector::zeros(0))),
            Kkt::Lu(lu) => {
                let mut full = DVector::zeros(m + rd_f.len());
                full.rows_mut(0, m).copy_from(rhs);
                full.rows_mut(m, rd_f.len()).copy_from(rd_f);
                let sol = lu.solve(&full)?;
                Some((sol.rows(0, m).into_owned(), sol.rows(m, rd_f.len()).into_owned()))
            }
        }
    }
}

pub fn solve(form: &StdForm, settings: &SolverSettings) -> IpmOutput {
    // Row normalisation: every equality gets unit coefficient norm.
    let mut f = form.clone();
    let mut row_scale = vec![1.0; f.rows.len()];
    for (i, row) in f.rows.iter_mut().enumerate() {
        let nrm = (row.blocks.iter().map(|(_, c)| c.norm_sq()).sum::<f64>()
            + row.lp.iter().map(|e| e.1 * e.1).sum::<f64>()
            + row.free.iter().map(|e| e.1 * e.1).sum::<f64>())
        .sqrt();
        if nrm > 0.0 {
            let s = 1.0 / nrm;
            row.blocks.iter_mut().for_each(|(_, c)| c.scale(s));
            row.lp.iter_mut().for_each(|e| e.1 *= s);
            row.free.iter_mut().for_each(|e| e.1 *= s);
            f.b[i] *= s;
            row_scale[i] = s;
        }
    }
    let mut out = run(&Problem::new(&f), settings);
    out.row_scale = row_scale;
    out
}

fn run(p: &Problem<'_>, settings: &SolverSettings) -> IpmOutput {
    let f = p.f;
    let m = p.m();
    let nb = f.blocks.len();
    let nu: f64 = f.blocks.iter().map(|b| b.n as f64).sum::<f64>() + f.n_lp as f64;

    let c_blocks: Vec<CMatrix> = (0..nb).map(|b| p.c_block(b)).collect();
    let norm_b = f.b.norm();
    let norm_c = (c_blocks.iter().map(cnorm_sq).sum::<f64>() + f.c_lp.norm_squared() + f.c_free.norm_squared()).sqrt();

    // Starting point in the spirit of SDPT3's infeasible start.
    let mut it = {
        let x = f
            .blocks
            .iter()
            .enumerate()
            .map(|(b, spec)| {
                let n = spec.n as f64;
                let mut xi = 10f64.max(n.sqrt());
                let mut eta = 10f64.max(n.sqrt()).max(cnorm_sq(&c_blocks[b]).sqrt());
                for &(i, c) in &p.by_block[b] {
                    let na = c.norm_sq().sqrt();
                    xi = xi.max(n * (1.0 + f.b[i].abs()) / (1.0 + na));
                    eta = eta.max(na);
                }
                (CMatrix::identity(spec.n, spec.n) * c64(xi, 0.0), CMatrix::identity(spec.n, spec.n) * c64(eta, 0.0))
            })
            .collect::<Vec<_>>();
        let (x, z): (Vec<_>, Vec<_>) = x.into_iter().unzip();
        let mut xi_l: f64 = 10.0;
        let mut eta_l: f64 = 10f64.max(f.c_lp.amax());
        for rows in &p.lp_rows {
            for &(i, a) in rows {
                xi_l = xi_l.max((1.0 + f.b[i].abs()) / (1.0 + a.abs()));
                eta_l = eta_l.max(a.abs());
            }
        }
        Iterate {
            x,
            xl: DVector::from_element(f.n_lp, xi_l),
            xf: DVector::zeros(f.n_free),
            y: DVector::zeros(m),
            z,
            zl: DVector::from_element(f.n_lp, eta_l),
        }
    };

    let mut status = SolveStatus::MaxIter;
    let mut iterations = 0;
    let mut best: Option<(f64, Vec<CMatrix>, DVector<f64>, DVector<f64>)> = None;
    let mut stall = 0;

    for iter in 0..settings.max_iter {
        iterations = iter + 1;
        let ax = p.apply(&it.x, &it.xl, &it.xf);
        let rp = &f.b - &ax;
        let (aty, aty_l, aty_f) = p.adjoint(&it.y);
        let rd: Vec<CMatrix> = (0..nb).map(|b| &c_blocks[b] - &aty[b] - &it.z[b]).collect();
        let rd_l = &f.c_lp - &aty_l - &it.zl;
        let rd_f = &f.c_free - &aty_f;

        let xz: f64 = (0..nb).map(|b| re_trace_product(&it.x[b], &it.z[b])).sum::<f64>() + it.xl.dot(&it.zl);
        let mu = xz / nu.max(1.0);
        let pobj: f64 = (0..nb).map(|b| re_trace_product(&c_blocks[b], &it.x[b])).sum::<f64>()
            + f.c_lp.dot(&it.xl)
            + f.c_free.dot(&it.xf);
        let dobj = f.b.dot(&it.y);
        let pinf = rp.norm() / (1.0 + norm_b);
        let rd_norm = (rd.iter().map(cnorm_sq).sum::<f64>() + rd_l.norm_squared() + rd_f.norm_squared()).sqrt();
        let dinf = rd_norm / (1.0 + norm_c);
        let gap = xz.abs().max((pobj - dobj).abs()) / (1.0 + pobj.abs() + dobj.abs());
        log::trace!("ipm {iter}: pobj {pobj:e} dobj {dobj:e} pinf {pinf:e} dinf {dinf:e} gap {gap:e}");

        let merit = pinf.max(dinf).max(gap);
        if best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, it.x.clone(), it.xf.clone(), it.y.clone()));
        }
        if pinf <= settings.tol && dinf <= settings.tol && gap <= settings.tol {
            status = SolveStatus::Optimal;
            break;
        }
        // Farkas certificates.
        if dobj > 0.0 {
            let cert = ((0..nb).map(|b| cnorm_sq(&(&aty[b] + &it.z[b]))).sum::<f64>()
                + (&aty_l + &it.zl).norm_squared()
                + aty_f.norm_squared())
            .sqrt();
            if cert / dobj < 1e-8 && pinf > settings.tol {
                status = SolveStatus::Infeasible;
                break;
            }
        }
        if pobj < 0.0 {
            if ax.norm() / (-pobj) < 1e-8 && dinf > settings.tol {
                status = SolveStatus::Unbounded;
                break;
            }
        }

        let mut zinv = Vec::with_capacity(nb);
        for z in &it.z {
            match herm_inverse(z) {
                Some(zi) => zinv.push(zi),
                None => {
                    status = SolveStatus::NumericalFailure;
                    break;
                }
            }
        }
        if zinv.len() != nb {
            break;
        }
        let schur = p.schur(&it.x, &zinv, &it.xl, &it.zl);
        let kkt = if f.n_free == 0 {
            match Cholesky::new(schur.clone()) {
                Some(c) => Kkt::Chol(c),
                None => Kkt::Lu(schur.lu()),
            }
        } else {
            let k = m + f.n_free;
            let mut aug = DMatrix::<f64>::zeros(k, k);
            aug.view_mut((0, 0), (m, m)).copy_from(&schur);
            for (i, row) in f.rows.iter().enumerate() {
                for &(j, a) in &row.free {
                    aug[(i, m + j)] += a;
                    aug[(m + j, i)] += a;
                }
            }
            Kkt::Lu(aug.lu())
        };

        let x_rd_zinv: Vec<CMatrix> = (0..nb).map(|b| &it.x[b] * &rd[b] * &zinv[b]).collect();
        let solve_dir = |r_blocks: &[CMatrix], r_l: &DVector<f64>| -> Option<Direction> {
            let mut rhs = rp.clone();
            for (i, row) in f.rows.iter().enumerate() {
                let mut v = 0.0;
                for (blk, c) in &row.blocks {
                    v += c.inner(&(&r_blocks[*blk] - &x_rd_zinv[*blk]));
                }
                for &(j, a) in &row.lp {
                    v += a * (r_l[j] - it.xl[j] / it.zl[j] * rd_l[j]);
                }
                rhs[i] -= v;
            }
            let (dy, dxf) = kkt.solve(m, &rhs, &rd_f)?;
            if dy.iter().any(|v| !v.is_finite()) {
                return None;
            }
            let (atdy, atdy_l, _) = p.adjoint(&dy);
            let dz: Vec<CMatrix> = (0..nb)
                .map(|b| {
                    let mut d = hermitian_part(&(&rd[b] - &atdy[b]));
                    if f.blocks[b].real {
                        realify(&mut d);
                    }
                    d
                })
                .collect();
            let dzl = &rd_l - &atdy_l;
            let dx: Vec<CMatrix> = (0..nb)
                .map(|b| {
                    let mut d = &r_blocks[b] - sym_prod(&it.x[b], &dz[b], &zinv[b]);
                    d = hermitian_part(&d);
                    if f.blocks[b].real {
                        realify(&mut d);
                    }
                    d
                })
                .collect();
            let dxl = DVector::from_fn(f.n_lp, |j, _| r_l[j] - it.xl[j] / it.zl[j] * dzl[j]);
            Some(Direction { dx, dxl, dxf: if f.n_free == 0 { DVector::zeros(0) } else { dxf }, dy, dz, dzl })
        };
        let steps = |d: &Direction| -> Option<(f64, f64)> {
            let mut ap = max_step_lp(&it.xl, &d.dxl);
            let mut ad = max_step_lp(&it.zl, &d.dzl);
            for b in 0..nb {
                ap = ap.min(max_step_psd(&it.x[b], &d.dx[b])?);
                ad = ad.min(max_step_psd(&it.z[b], &d.dz[b])?);
            }
            Some((ap, ad))
        };

        // Predictor.
        let r_aff: Vec<CMatrix> = it.x.iter().map(|x| -x).collect();
        let rl_aff = -&it.xl;
        let Some(aff) = solve_dir(&r_aff, &rl_aff) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let Some((ap, ad)) = steps(&aff) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let xz_aff: f64 = (0..nb)
            .map(|b| re_trace_product(&(&it.x[b] + &aff.dx[b] * c64(ap, 0.0)), &(&it.z[b] + &aff.dz[b] * c64(ad, 0.0))))
            .sum::<f64>()
            + (&it.xl + &aff.dxl * ap).dot(&(&it.zl + &aff.dzl * ad));
        let sigma = if xz > 0.0 { (xz_aff / xz).clamp(0.0, 1.0).powi(3) } else { 0.0 };
        let target = sigma * mu;

        // Corrector.
        let r_cor: Vec<CMatrix> = (0..nb)
            .map(|b| &zinv[b] * c64(target, 0.0) - &it.x[b] - sym_prod(&aff.dx[b], &aff.dz[b], &zinv[b]))
            .collect();
        let rl_cor = DVector::from_fn(f.n_lp, |j, _| (target - aff.dxl[j] * aff.dzl[j]) / it.zl[j] - it.xl[j]);
        let Some(dir) = solve_dir(&r_cor, &rl_cor) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let Some((ap_max, ad_max)) = steps(&dir) else {
            status = SolveStatus::NumericalFailure;
            break;
        };
        let gamma = 0.9 + 0.09 * ap_max.min(ad_max).min(1.0);
        let ap = (gamma * ap_max).min(1.0);
        let ad = (gamma * ad_max).min(1.0);

        for b in 0..nb {
            it.x[b] += &dir.dx[b] * c64(ap, 0.0);
            it.z[b] += &dir.dz[b] * c64(ad, 0.0);
            it.x[b] = hermitian_part(&it.x[b]);
            it.z[b] = hermitian_part(&it.z[b]);
        }
        it.xl += &dir.dxl * ap;
        it.zl += &dir.dzl * ad;
        it.xf += &dir.dxf * ap;
        it.y += &dir.dy * ad;

        if ap.max(ad) < 1e-10 {
            stall += 1;
            if stall >= 3 {
                status = SolveStatus::NumericalFailure;
                break;
            }
        } else {
            stall = 0;
        }
    }

    if status == SolveStatus::NumericalFailure || status == SolveStatus::MaxIter {
        // Fall back to the best iterate seen; the caller re-checks feasibility.
        if let Some((merit, x, xf, y)) = best {
            if merit <= 1e-6 {
                log::debug!("ipm stopped early ({status:?}), best merit {merit:e}");
                return IpmOutput { status: SolveStatus::Optimal, x_blocks: x, x_free: xf, y, row_scale: Vec::new(), iterations };
            }
            return IpmOutput { status, x_blocks: x, x_free: xf, y, row_scale: Vec::new(), iterations };
        }
    }
    IpmOutput { status, x_blocks: it.x, x_free: it.xf, y: it.y, row_scale: Vec::new(), iterations }
}
