//! Dense linear-algebra kernels: matrix exponential and the continuous
//! Lyapunov equation. Both are exercised on small matrices (n <= 20), so
//! direct methods are used throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Order thresholds for the scaling-and-squaring Pade evaluation
/// (Higham 2005, Table 2.3). theta[i] bounds the 1-norm admissible for
/// Pade order {3, 5, 7, 9, 13}.
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.539398330063230e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(m: &DMatrix<f64>) -> f64 {
    let mut best = 0.0f64;
    for j in 0..m.ncols() {
        let s: f64 = m.column(j).iter().map(|v| v.abs()).sum();
        best = best.max(s);
    }
    best
}

/// Evaluate the [m/m] Pade approximant r(A) = (V - U)^{-1} (V + U) for the
/// diagonal orders 3, 5, 7 and 9, where U collects odd and V even powers.
fn pade_low(a: &DMatrix<f64>, b: &[f64]) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let a2 = a * a;
    // Even powers a^0, a^2, a^4, ...
    let mut evens = vec![ident.clone()];
    while evens.len() * 2 < b.len() {
        let last = evens.last().unwrap() * &a2;
        evens.push(last);
    }
    let mut u_inner = DMatrix::<f64>::zeros(n, n);
    let mut v = DMatrix::<f64>::zeros(n, n);
    for (k, even) in evens.iter().enumerate() {
        u_inner += even * b[2 * k + 1];
        v += even * b[2 * k];
    }
    let u = a * u_inner;
    solve_pade(&u, &v)
}

/// Pade order 13 with the factored polynomial evaluation of Higham.
fn pade13(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    let ident = DMatrix::<f64>::identity(n, n);
    let b = &B13;
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a2 * &a4;
    let u_high = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u_low = &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1];
    let u = a * (u_high + u_low);
    let v_high = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = v_high + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    solve_pade(&u, &v)
}

fn solve_pade(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lhs = v - u;
    let rhs = v + u;
    lhs.lu().solve(&rhs).ok_or_else(|| Error::Numerical {
        context: "Pade solve in matrix exponential".into(),
        condition: f64::INFINITY,
    })
}

/// Matrix exponential exp(M) by scaling and squaring with diagonal Pade
/// approximants. Accurate to close to machine precision for the small,
/// moderately normed matrices used here.
pub fn matexp(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() != m.ncols() {
        return Err(Error::NonSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite entry in matexp input".into()));
    }
    let norm = one_norm(m);
    if norm <= THETA[0] {
        return pade_low(m, &B3);
    }
    if norm <= THETA[1] {
        return pade_low(m, &B5);
    }
    if norm <= THETA[2] {
        return pade_low(m, &B7);
    }
    if norm <= THETA[3] {
        return pade_low(m, &B9);
    }
    if norm <= THETA[4] {
        return pade13(m);
    }
    let s = ((norm / THETA[4]).log2().ceil() as i32).max(1);
    let scaled = m / 2f64.powi(s);
    let mut r = pade13(&scaled)?;
    for _ in 0..s {
        r = &r * &r;
    }
    Ok(r)
}

/// Solve the continuous Lyapunov equation A X + X A^T = Q by Kronecker
/// vectorization: (I (x) A + A (x) I) vec(X) = vec(Q). Direct dense solve,
/// adequate for n <= 20 (the system is n^2 x n^2).
///
/// The result is symmetrized and checked for positive semidefiniteness when
/// Q is itself symmetric PSD and A is Hurwitz; callers enforce those
/// preconditions.
pub fn solve_lyapunov(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::NonSquare {
            rows: a.nrows(),
            cols: a.ncols(),
        });
    }
    if q.nrows() != n || q.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.nrows(),
        });
    }
    let ident = DMatrix::<f64>::identity(n, n);
    // vec(AX) = (I (x) A) vec(X), vec(X A^T) = (A (x) I) vec(X), column-major.
    let big = ident.kronecker(a) + a.kronecker(&ident);
    let rhs = DVector::from_column_slice(q.as_slice());
    let lu = big.clone().lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        let condition = condition_estimate(&big);
        Error::Numerical {
            context: "Lyapunov Kronecker solve (singular system)".into(),
            condition,
        }
    })?;
    let x = DMatrix::from_column_slice(n, n, sol.as_slice());
    // Symmetrize: the exact solution is symmetric for symmetric Q.
    let x = (&x + x.transpose()) * 0.5;
    // Residual guard against a badly conditioned solve.
    let resid = a * &x + &x * a.transpose() - q;
    let scale = one_norm(q).max(1e-300);
    if one_norm(&resid) / scale > 1e-8 {
        return Err(Error::Numerical {
            context: format!(
                "Lyapunov solve residual {:.3e} relative to |Q|",
                one_norm(&resid) / scale
            ),
            condition: condition_estimate(&big),
        });
    }
    Ok(x)
}

fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    match m.clone().try_inverse() {
        Some(inv) => one_norm(m) * one_norm(&inv),
        None => f64::INFINITY,
    }
}

/// Symmetric PSD check with a relative eigenvalue floor: eigenvalues below
/// -tol * max(trace, floor) reject the matrix.
pub fn check_psd(m: &DMatrix<f64>, rel_tol: f64) -> Result<()> {
    let asym = one_norm(&(m - m.transpose()));
    let scale = one_norm(m).max(1e-300);
    if asym / scale > 1e-10 {
        return Err(Error::NotSymmetric { asym: asym / scale });
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigenvalues();
    let min_eig = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let trace = m.trace();
    let floor = trace.abs().max(scale).max(1e-12);
    if min_eig < -rel_tol * floor {
        return Err(Error::NotPsd { min_eig, trace });
    }
    Ok(())
}

/// Factor a symmetric PSD matrix as L L^T with L of shape n x r, keeping only
/// eigendirections above a relative cutoff. Handles rank-deficient noise
/// covariances (e.g. a single driven coordinate).
pub fn psd_factor(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_psd(m, 1e-10)?;
    let sym = (m + m.transpose()) * 0.5;
    let n = sym.nrows();
    let eig = sym.symmetric_eigen();
    let max_eig = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = max_eig * 1e-14;
    let mut cols: Vec<DVector<f64>> = Vec::new();
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            cols.push(eig.eigenvectors.column(i) * lam.sqrt());
        }
    }
    if cols.is_empty() {
        return Ok(DMatrix::zeros(n, 0));
    }
    let mut l = DMatrix::zeros(n, cols.len());
    for (j, c) in cols.iter().enumerate() {
        l.set_column(j, c);
    }
    Ok(l)
}
