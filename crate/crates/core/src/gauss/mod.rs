//! Linear-Gaussian machinery for Ornstein-Uhlenbeck dynamics.
//!
//! A stable linear SDE  dxi/dt = -A xi + eta,  <eta eta'> = Q delta(t-t'),
//! has a zero-mean Gaussian stationary law whose covariance solves the
//! Lyapunov equation A Sigma + Sigma A^T = Q, and lagged cross-covariance
//! Cov(xi_tau, xi_0) = exp(-A tau) Sigma. Everything needed downstream
//! (conditional variances, regression coefficients, KL divergences, Fisher
//! curvatures) follows from Gaussian conditioning on the stacked vector
//! (xi_0, xi_tau).

mod linalg;

pub use linalg::{check_psd, matexp, psd_factor, solve_lyapunov};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Maximum state dimension accepted by the dense solvers.
pub const MAX_DIM: usize = 20;

/// A stable linear model dxi/dt = -A xi + eta with <eta eta'> = Q delta,
/// plus the designation of the source coordinate x and target coordinate y.
/// Remaining coordinates act as observed confounders and are always part of
/// the conditioning set.
#[derive(Debug, Clone)]
pub struct LinearModel {
    a: DMatrix<f64>,
    q: DMatrix<f64>,
    x_index: usize,
    y_index: usize,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, q: DMatrix<f64>, x_index: usize, y_index: usize) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::NonSquare {
                rows: a.nrows(),
                cols: a.ncols(),
            });
        }
        if n == 0 || n > MAX_DIM {
            return Err(Error::InvalidConfig(format!(
                "state dimension {n} outside supported range 1..={MAX_DIM}"
            )));
        }
        if q.nrows() != n || q.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: q.nrows(),
            });
        }
        check_psd(&q, 1e-10)?;
        let eigs = a.complex_eigenvalues();
        let min_real = eigs.iter().map(|c| c.re).fold(f64::INFINITY, f64::min);
        if !(min_real > 0.0) {
            return Err(Error::NotHurwitz { min_real });
        }
        if x_index >= n || y_index >= n {
            return Err(Error::InvalidConfig(format!(
                "variable index out of range for dimension {n}"
            )));
        }
        if n > 1 && x_index == y_index {
            return Err(Error::InvalidConfig(
                "source and target coordinates must differ".into(),
            ));
        }
        Ok(Self {
            a,
            q,
            x_index,
            y_index,
        })
    }

    /// Two-variable hierarchy: dx/dt = -x/t_r + eta, dy/dt = alpha x - beta y,
    /// with <eta eta'> = q delta. Only x is noise-driven.
    pub fn hierarchical(t_r: f64, q: f64, alpha: f64, beta: f64) -> Result<Self> {
        if t_r <= 0.0 || beta <= 0.0 || q < 0.0 {
            return Err(Error::InvalidConfig(
                "hierarchical model needs t_r > 0, beta > 0, q >= 0".into(),
            ));
        }
        let a = DMatrix::from_row_slice(2, 2, &[1.0 / t_r, 0.0, -alpha, beta]);
        let qm = DMatrix::from_row_slice(2, 2, &[q, 0.0, 0.0, 0.0]);
        Self::new(a, qm, 0, 1)
    }

    /// Default parameterization of the two-variable hierarchy used across
    /// the figures: t_r = 10, q = 0.1, alpha = 0.5, beta = 0.2.
    pub fn hierarchical_default() -> Self {
        Self::hierarchical(10.0, 0.1, 0.5, 0.2).expect("default parameters are valid")
    }

    /// Scalar OU process with relaxation rate a and noise intensity q.
    pub fn scalar(a: f64, q: f64) -> Result<Self> {
        Self::new(
            DMatrix::from_element(1, 1, a),
            DMatrix::from_element(1, 1, q),
            0,
            0,
        )
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }

    pub fn x_index(&self) -> usize {
        self.x_index
    }

    pub fn y_index(&self) -> usize {
        self.y_index
    }

    /// Indices of the confounder block (everything but x).
    pub fn conditioning_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| i != self.x_index).collect()
    }

    /// Stationary covariance from the Lyapunov equation.
    pub fn stationary_cov(&self) -> Result<DMatrix<f64>> {
        let sigma = solve_lyapunov(&self.a, &self.q)?;
        check_psd(&sigma, 1e-10)?;
        Ok(sigma)
    }

    /// Relaxation timescales 1/Re(lambda) of the drift spectrum.
    pub fn timescales(&self) -> (f64, f64) {
        let eigs = self.a.complex_eigenvalues();
        let mut slow = 0.0f64;
        let mut fast = f64::INFINITY;
        for c in eigs.iter() {
            let t = 1.0 / c.re;
            slow = slow.max(t);
            fast = fast.min(t);
        }
        (slow, fast)
    }
}

/// A multivariate Gaussian with explicit mean and covariance.
#[derive(Debug, Clone)]
pub struct GaussianDist {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianDist {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() {
            return Err(Error::NonSquare {
                rows: cov.nrows(),
                cols: cov.ncols(),
            });
        }
        if mean.len() != cov.nrows() {
            return Err(Error::DimensionMismatch {
                expected: cov.nrows(),
                got: mean.len(),
            });
        }
        check_psd(&cov, 1e-10)?;
        let cov = (&cov + cov.transpose()) * 0.5;
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Marginal over the given coordinate subset.
    pub fn marginal(&self, indices: &[usize]) -> Result<Self> {
        for &i in indices {
            if i >= self.dim() {
                return Err(Error::InvalidConfig(format!(
                    "marginal index {i} out of range"
                )));
            }
        }
        let mean = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.mean[i]));
        let mut cov = DMatrix::zeros(indices.len(), indices.len());
        for (r, &i) in indices.iter().enumerate() {
            for (c, &j) in indices.iter().enumerate() {
                cov[(r, c)] = self.cov[(i, j)];
            }
        }
        GaussianDist::new(mean, cov)
    }

    /// Draw one sample using an eigenvalue square root of the covariance
    /// (works for PSD, including rank-deficient, covariances).
    pub fn sampler(&self) -> Result<GaussianSampler> {
        let factor = psd_factor(&self.cov)?;
        Ok(GaussianSampler {
            mean: self.mean.clone(),
            factor,
        })
    }

    /// Log density; requires a strictly positive definite covariance.
    pub fn log_pdf(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        let chol = Cholesky::new(self.cov.clone()).ok_or_else(|| Error::SingularCovariance {
            context: "log_pdf".into(),
        })?;
        let d = self.dim() as f64;
        let diff = DVector::from_row_slice(x) - &self.mean;
        let solved = chol.solve(&diff);
        let quad = diff.dot(&solved);
        let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d * (2.0 * std::f64::consts::PI).ln() + log_det + quad))
    }
}

/// Reusable sampling factor for a Gaussian distribution.
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> DVector<f64> {
        let r = self.factor.ncols();
        let z = DVector::from_iterator(r, (0..r).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + &self.factor * z
    }
}

/// Joint law of (xi_0, xi_tau) for a linear model: dimension 2n, block
/// covariance [[Sigma, Sigma e^{-A^T tau}], [e^{-A tau} Sigma, Sigma]].
#[derive(Debug, Clone)]
pub struct LaggedJoint {
    pub tau: f64,
    pub n: usize,
    pub dist: GaussianDist,
    pub propagator: DMatrix<f64>,
}

/// Build the stationary joint law of the state at times 0 and tau >= 0.
/// tau = 0 degenerates to duplicated blocks (rank n), which conditioning
/// handles as long as the conditioning subset itself is nondegenerate.
pub fn lagged_joint(model: &LinearModel, tau: f64) -> Result<LaggedJoint> {
    if !(tau >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lagged joint requires tau >= 0, got {tau}"
        )));
    }
    let n = model.dim();
    let sigma = model.stationary_cov()?;
    let propagator = matexp(&(model.a() * -tau))?;
    let cross = &propagator * &sigma; // Cov(xi_tau, xi_0)
    let mut cov = DMatrix::zeros(2 * n, 2 * n);
    cov.view_mut((0, 0), (n, n)).copy_from(&sigma);
    cov.view_mut((n, n), (n, n)).copy_from(&sigma);
    cov.view_mut((n, 0), (n, n)).copy_from(&cross);
    cov.view_mut((0, n), (n, n)).copy_from(&cross.transpose());
    // The stacked covariance is PSD by construction; numerical asymmetry is
    // removed inside GaussianDist. The PSD check tolerates the tau = 0
    // rank-deficient case.
    let dist = GaussianDist::new(DVector::zeros(2 * n), cov)?;
    Ok(LaggedJoint {
        tau,
        n,
        dist,
        propagator,
    })
}

/// Gaussian conditional p(target | given) as an affine map: mean =
/// offset + coeffs * given, with constant residual covariance.
#[derive(Debug, Clone)]
pub struct ConditionalGaussianSpec {
    pub target: Vec<usize>,
    pub given: Vec<usize>,
    pub coeffs: DMatrix<f64>,
    pub resid_cov: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl ConditionalGaussianSpec {
    pub fn mean_given(&self, g: &[f64]) -> DVector<f64> {
        &self.offset + &self.coeffs * DVector::from_row_slice(g)
    }
}

/// Condition a joint Gaussian on a subset of coordinates:
/// B = S_tg S_gg^{-1}, R = S_tt - S_tg S_gg^{-1} S_gt.
/// Index sets must be disjoint; a singular S_gg is reported with the
/// offending indices.
pub fn condition(
    joint: &GaussianDist,
    target: &[usize],
    given: &[usize],
) -> Result<ConditionalGaussianSpec> {
    let dim = joint.dim();
    for &i in target.iter().chain(given.iter()) {
        if i >= dim {
            return Err(Error::InvalidConfig(format!(
                "conditioning index {i} out of range for dimension {dim}"
            )));
        }
    }
    if target.is_empty() || given.is_empty() {
        return Err(Error::InvalidConfig(
            "target and given sets must be nonempty".into(),
        ));
    }
    for &t in target {
        if given.contains(&t) {
            return Err(Error::InvalidConfig(format!(
                "index {t} appears in both target and given sets"
            )));
        }
    }
    let cov = joint.cov();
    let take = |rows: &[usize], cols: &[usize]| {
        let mut m = DMatrix::zeros(rows.len(), cols.len());
        for (r, &i) in rows.iter().enumerate() {
            for (c, &j) in cols.iter().enumerate() {
                m[(r, c)] = cov[(i, j)];
            }
        }
        m
    };
    let s_gg = take(given, given);
    let s_tg = take(target, given);
    let s_tt = take(target, target);
    let chol = Cholesky::<f64, Dyn>::new(s_gg.clone()).ok_or(Error::SingularConditioning {
        indices: given.to_vec(),
    })?;
    // coeffs = S_tg S_gg^{-1} solved as S_gg X^T = S_gt.
    let coeffs = chol.solve(&s_tg.transpose()).transpose();
    let resid = &s_tt - &coeffs * s_tg.transpose();
    let resid = (&resid + resid.transpose()) * 0.5;
    // Clamp the tiny negative eigenvalues a nearly-degenerate conditioning
    // (e.g. tau = 0 self-conditioning) can produce.
    let resid = clamp_psd(resid)?;
    let mean_t = DVector::from_iterator(target.len(), target.iter().map(|&i| joint.mean()[i]));
    let mean_g = DVector::from_iterator(given.len(), given.iter().map(|&i| joint.mean()[i]));
    let offset = &mean_t - &coeffs * mean_g;
    Ok(ConditionalGaussianSpec {
        target: target.to_vec(),
        given: given.to_vec(),
        coeffs,
        resid_cov: resid,
        offset,
    })
}

fn clamp_psd(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let scale = m.trace().abs().max(m.amax()).max(1e-12);
    let eig = m.clone().symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min_eig < -1e-10 * scale {
        return Err(Error::NotPsd {
            min_eig,
            trace: m.trace(),
        });
    }
    if min_eig >= 0.0 {
        return Ok(m);
    }
    let vals = eig.eigenvalues.map(|v| v.max(0.0));
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose())
}

/// Closed-form KL divergence between Gaussians p and q (both strictly PD):
/// KL = 1/2 [ tr(Sq^{-1} Sp) + (mq-mp)^T Sq^{-1} (mq-mp) - k + ln det Sq/det Sp ].
pub fn gaussian_kl(p: &GaussianDist, q: &GaussianDist) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let k = p.dim() as f64;
    let chol_q = Cholesky::new(q.cov().clone()).ok_or_else(|| Error::SingularCovariance {
        context: "gaussian_kl second argument".into(),
    })?;
    let chol_p = Cholesky::new(p.cov().clone()).ok_or_else(|| Error::SingularCovariance {
        context: "gaussian_kl first argument".into(),
    })?;
    let log_det_q = 2.0 * chol_q.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let log_det_p = 2.0 * chol_p.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let trace = chol_q.solve(p.cov()).trace();
    let dm = q.mean() - p.mean();
    let quad = dm.dot(&chol_q.solve(&dm));
    let kl = 0.5 * (trace + quad - k + log_det_q - log_det_p);
    // Exact KL is nonnegative; tiny negative values are roundoff.
    Ok(kl.max(0.0))
}

/// The two Fisher curvatures whose ratio is the information response:
/// response curvature <d^2/dx0^2 ln p(y_tau | x0, y0, z0)> = -b^2 / var(y_tau | xi_0)
/// and perturbation curvature <d^2/dx0^2 ln p(x0 | y0, z0)> = -1 / var(x0 | y0, z0),
/// where b is the regression coefficient of y_tau on x0 given the rest.
#[derive(Debug, Clone, Copy)]
pub struct FisherTerms {
    pub response_curvature: f64,
    pub perturbation_curvature: f64,
}

impl FisherTerms {
    /// Ratio of curvatures: the small-perturbation information response.
    pub fn ratio(&self) -> f64 {
        self.response_curvature / self.perturbation_curvature
    }
}

pub fn fisher_terms(model: &LinearModel, tau: f64) -> Result<FisherTerms> {
    if !(tau > 0.0) {
        return Err(Error::Degenerate(format!(
            "Fisher curvatures need tau > 0, got {tau}"
        )));
    }
    let geo = ModelGeometry::new(model, tau)?;
    Ok(FisherTerms {
        response_curvature: -geo.b_x * geo.b_x / geo.var_y_full,
        perturbation_curvature: -1.0 / geo.var_x_given_rest,
    })
}

/// Conditional-variance geometry of (xi_0, xi_tau) shared by the analytic
/// measures: regression coefficient of y_tau on x0, the three conditional
/// variances and the stationary variance of y.
#[derive(Debug, Clone)]
pub(crate) struct ModelGeometry {
    /// d<y_tau | xi_0>/dx0.
    pub b_x: f64,
    /// var(y_tau | x0, y0, z0).
    pub var_y_full: f64,
    /// var(y_tau | y0, z0).
    pub var_y_reduced: f64,
    /// var(x0 | y0, z0).
    pub var_x_given_rest: f64,
    /// Stationary var(y).
    pub var_y: f64,
    /// Regression coefficients of x0 on the conditioning block (y0, z0).
    pub x_on_rest: ConditionalGaussianSpec,
}

impl ModelGeometry {
    pub fn new(model: &LinearModel, tau: f64) -> Result<Self> {
        let n = model.dim();
        let joint = lagged_joint(model, tau)?;
        let all0: Vec<usize> = (0..n).collect();
        let rest0 = model.conditioning_indices();
        let target = vec![n + model.y_index()];
        let full = condition(&joint.dist, &target, &all0)?;
        let b_x = full.coeffs[(0, model.x_index())];
        let var_y_full = full.resid_cov[(0, 0)];
        let reduced = if rest0.is_empty() {
            None
        } else {
            Some(condition(&joint.dist, &target, &rest0)?)
        };
        let sigma = model.stationary_cov()?;
        let var_y = sigma[(model.y_index(), model.y_index())];
        let var_y_reduced = match &reduced {
            Some(c) => c.resid_cov[(0, 0)],
            // With no confounders and x = y (scalar model) the reduced
            // conditioning set is empty: the reduced law is the marginal.
            None => var_y,
        };
        let stationary = GaussianDist::new(DVector::zeros(n), sigma.clone())?;
        let x_on_rest = if rest0.is_empty() {
            ConditionalGaussianSpec {
                target: vec![model.x_index()],
                given: vec![],
                coeffs: DMatrix::zeros(1, 0),
                resid_cov: DMatrix::from_element(1, 1, sigma[(0, 0)]),
                offset: DVector::zeros(1),
            }
        } else {
            condition(&stationary, &[model.x_index()], &rest0)?
        };
        let var_x_given_rest = x_on_rest.resid_cov[(0, 0)];
        Ok(Self {
            b_x,
            var_y_full,
            var_y_reduced,
            var_x_given_rest,
            var_y,
            x_on_rest,
        })
    }
}
