//! Uniform linear array responses, the Fisher information matrix for target
//! angles and reflection coefficients, and the trace-CRB.
//!
//! The FIM is ordered `[θ_1..θ_K, Re β_1..Re β_K, Im β_1..Im β_K]`.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::linalg::{c64, CMatrix, CVector, C64, J};
use crate::scenario::Scenario;

#[derive(Debug, Error, PartialEq)]
pub enum SensingError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("unidentifiable parameters: FIM is singular (min eigenvalue {min_eig:e}, max {max_eig:e})")]
    Unidentifiable { min_eig: f64, max_eig: f64 },
}

/// Relative eigenvalue floor below which a FIM counts as singular.
pub const SINGULAR_REL_TOL: f64 = 1e-10;

fn offset(m: usize, n: usize) -> f64 {
    m as f64 - (n as f64 - 1.0) / 2.0
}

/// Half-wavelength ULA response with the array centre as phase reference.
pub fn steering(theta: f64, n: usize) -> CVector {
    let s = std::f64::consts::PI * theta.sin();
    CVector::from_fn(n, |m, _| C64::from_polar(1.0, offset(m, n) * s))
}

/// Derivative of [`steering`] with respect to `theta`.
pub fn steering_derivative(theta: f64, n: usize) -> CVector {
    let v = steering(theta, n);
    let c = std::f64::consts::PI * theta.cos();
    CVector::from_fn(n, |m, _| J * (offset(m, n) * c) * v[m])
}

/// Steering matrices for all targets.
#[derive(Clone, Debug)]
pub struct SteeringSet {
    pub a: CMatrix,
    pub v: CMatrix,
    pub a_dot: CMatrix,
    pub v_dot: CMatrix,
    pub b: CMatrix,
}

impl SteeringSet {
    pub fn new(theta: &[f64], beta: &[C64], n_tx: usize, n_rx: usize) -> Self {
        let k = theta.len();
        let cols = |f: &dyn Fn(f64) -> CVector, n: usize| {
            let mut m = CMatrix::zeros(n, k);
            for (i, &t) in theta.iter().enumerate() {
                m.set_column(i, &f(t));
            }
            m
        };
        Self {
            a: cols(&|t| steering(t, n_rx), n_rx),
            v: cols(&|t| steering(t, n_tx), n_tx),
            a_dot: cols(&|t| steering_derivative(t, n_rx), n_rx),
            v_dot: cols(&|t| steering_derivative(t, n_tx), n_tx),
            b: CMatrix::from_diagonal(&CVector::from_column_slice(beta)),
        }
    }

    pub fn from_scenario(scn: &Scenario) -> Self {
        Self::new(&scn.theta, &scn.beta_coeff, scn.dims.n_tx, scn.dims.n_rx)
    }

    pub fn k(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_tx(&self) -> usize {
        self.v.nrows()
    }
}

/// Real symmetric FIM, already scaled by `2/σ_S²`.
#[derive(Clone, Debug, PartialEq)]
pub struct FimMatrix {
    pub m: DMatrix<f64>,
}

fn hadamard(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.component_mul(b)
}

/// Assemble the FIM for transmit covariance `rx`.
pub fn build_fim(ss: &SteeringSet, rx: &CMatrix, dwell: usize, sigma_s2: f64) -> Result<FimMatrix, SensingError> {
    let n = ss.n_tx();
    if rx.nrows() != n || rx.ncols() != n {
        return Err(SensingError::DimensionMismatch(format!(
            "covariance is {}x{}, array has {} elements",
            rx.nrows(),
            rx.ncols(),
            n
        )));
    }
    let k = ss.k();
    let l = c64(dwell as f64, 0.0);
    let rc = rx.map(|z| z.conj());
    let bc = ss.b.map(|z| z.conj());
    let (a, ad, v, vd, b) = (&ss.a, &ss.a_dot, &ss.v, &ss.v_dot, &ss.b);

    let adh_ad = ad.adjoint() * ad;
    let adh_a = ad.adjoint() * a;
    let ah_ad = a.adjoint() * ad;
    let ah_a = a.adjoint() * a;
    let vh_r_v = v.adjoint() * &rc * v;
    let vh_r_vd = v.adjoint() * &rc * vd;
    let vdh_r_v = vd.adjoint() * &rc * v;
    let vdh_r_vd = vd.adjoint() * &rc * vd;

    let m11 = (hadamard(&adh_ad, &(&bc * &vh_r_v * b))
        + hadamard(&adh_a, &(&bc * &vh_r_vd * b))
        + hadamard(&ah_ad, &(&bc * &vdh_r_v * b))
        + hadamard(&ah_a, &(&bc * &vdh_r_vd * b)))
        * l;
    let m12 = (hadamard(&adh_a, &(&bc * &vh_r_v)) + hadamard(&ah_a, &(&bc * &vdh_r_v))) * l;
    let m22 = hadamard(&ah_a, &vh_r_v) * l;

    let scale = 2.0 / sigma_s2;
    let mut m = DMatrix::<f64>::zeros(3 * k, 3 * k);
    for i in 0..k {
        for j in 0..k {
            m[(i, j)] = m11[(i, j)].re;
            m[(i, k + j)] = m12[(i, j)].re;
            m[(i, 2 * k + j)] = -m12[(i, j)].im;
            m[(k + i, j)] = m12[(j, i)].re;
            m[(k + i, k + j)] = m22[(i, j)].re;
            m[(k + i, 2 * k + j)] = -m22[(i, j)].im;
            m[(2 * k + i, j)] = -m12[(j, i)].im;
            m[(2 * k + i, k + j)] = -m22[(j, i)].im;
            m[(2 * k + i, 2 * k + j)] = m22[(i, j)].re;
        }
    }
    let m = (&m + m.transpose()) * (0.5 * scale);
    Ok(FimMatrix { m })
}

/// `tr(M⁻¹)`, refusing singular matrices.
///
/// Parameters live on very different scales, so singularity is judged on the
/// Jacobi-balanced matrix `D M D` with `D = diag(M)^(-1/2)`.
pub fn crb_trace(fim: &FimMatrix) -> Result<f64, SensingError> {
    let n = fim.m.nrows();
    if n == 0 {
        return Ok(0.0);
    }
    let diag: Vec<f64> = (0..n).map(|i| fim.m[(i, i)]).collect();
    if diag.iter().any(|&d| !(d > 0.0)) {
        let min_eig = diag.iter().copied().fold(f64::INFINITY, f64::min);
        let max_eig = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        return Err(SensingError::Unidentifiable { min_eig, max_eig });
    }
    let d: Vec<f64> = diag.iter().map(|v| 1.0 / v.sqrt()).collect();
    let balanced = DMatrix::from_fn(n, n, |i, j| fim.m[(i, j)] * d[i] * d[j]);
    let eig = SymmetricEigen::new(balanced);
    let max_eig = eig.eigenvalues.max();
    let min_eig = eig.eigenvalues.min();
    if !(max_eig > 0.0) || min_eig < SINGULAR_REL_TOL * max_eig {
        return Err(SensingError::Unidentifiable { min_eig, max_eig });
    }
    // tr(M⁻¹) = Σ_i d_i² [(DMD)⁻¹]_ii.
    let mut total = 0.0;
    for (l, v) in eig.eigenvalues.iter().zip(eig.eigenvectors.column_iter()) {
        total += v.iter().zip(&d).map(|(x, di)| (x * di).powi(2)).sum::<f64>() / l;
    }
    Ok(total)
}

/// Index of entry `(a, b)`, `a <= b`, in the packed upper triangle of a `p×p` matrix.
pub fn packed_index(a: usize, b: usize, p: usize) -> usize {
    let (a, b) = if a <= b { (a, b) } else { (b, a) };
    a * p - a * (a + 1) / 2 + b
}

/// Hermitian matrices `C_ab` with `M_ab(R_x) = tr(C_ab R_x)` for every Hermitian `R_x`,
/// returned in packed upper-triangle order (see [`packed_index`]).
///
/// The FIM is real-linear in `R_x`, so probing it on a Hermitian basis recovers
/// the coefficients exactly.
pub fn fim_coefficients(ss: &SteeringSet, dwell: usize, sigma_s2: f64) -> Vec<CMatrix> {
    let n = ss.n_tx();
    let p = 3 * ss.k();
    let mut coeffs = vec![CMatrix::zeros(n, n); p * (p + 1) / 2];
    let mut probe = |rx: &CMatrix, mut put: Box<dyn FnMut(&mut CMatrix, f64) + '_>| {
        let fim = build_fim(ss, rx, dwell, sigma_s2).expect("probe has matching size");
        for a in 0..p {
            for b in a..p {
                put(&mut coeffs[packed_index(a, b, p)], fim.m[(a, b)]);
            }
        }
    };
    for m in 0..n {
        let mut e = CMatrix::zeros(n, n);
        e[(m, m)] = c64(1.0, 0.0);
        probe(&e, Box::new(move |c, val| c[(m, m)] = c64(val, 0.0)));
        for q in (m + 1)..n {
            let mut e = CMatrix::zeros(n, n);
            e[(m, q)] = c64(1.0, 0.0);
            e[(q, m)] = c64(1.0, 0.0);
            probe(&e, Box::new(move |c, val| c[(m, q)].re = val / 2.0));
            let mut e = CMatrix::zeros(n, n);
            e[(m, q)] = J;
            e[(q, m)] = -J;
            probe(&e, Box::new(move |c, val| c[(m, q)].im = val / 2.0));
        }
    }
    for c in coeffs.iter_mut() {
        for m in 0..n {
            for q in (m + 1)..n {
                c[(q, m)] = c[(m, q)].conj();
            }
        }
    }
    coeffs
}

/// Diagonal scaling `d_a = 1/√M_aa` of the FIM at `R_x = I`, used to balance
/// the CRB constraint whose entries otherwise span many orders of magnitude.
pub fn fim_balancing(ss: &SteeringSet, dwell: usize, sigma_s2: f64) -> Vec<f64> {
    let n = ss.n_tx();
    let fim = build_fim(ss, &CMatrix::identity(n, n), dwell, sigma_s2).expect("square identity");
    (0..fim.m.nrows())
        .map(|a| {
            let v = fim.m[(a, a)];
            if v > 0.0 {
                1.0 / v.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

pub use crate::conic::schur::{schur_crb_blocks, schur_crb_lmis, SchurCrb};
