//! Monte-Carlo measurement pipeline: every response measure estimated from
//! simulated ensembles, with no access to closed forms.
//!
//! The estimation scheme shared by the response ratios: measure a divergence
//! at several perturbation sizes, fit val(eps) = K eps^2 through the origin
//! by inverse-variance weighted least squares, and take ratios of the fitted
//! curvatures. Compared ensembles always carry independent noise (the
//! divergences compare distributions, not paths); common random numbers are
//! used only for paired mean responses, never inside a KL estimate.
//!
//! Seed discipline: every ensemble inside one computation draws from
//! `derive_seed(cfg.seed, purpose-tag)`, so no two ensembles share streams
//! and the whole pipeline is reproducible bit-for-bit.

use std::io::Write;

use crate::analytic::{MeasureKind, MeasureResult};
use crate::error::{Error, Result};
use crate::estimators::{kernel_regression, kl_knn, KlEstimate, SampleSet, STDERR_BLOCKS};
use crate::sde::{
    derive_seed, simulate_conditional, simulate_from_states, stationary_pool, Ensemble,
    SdeModel, SimConfig, StateBlock,
};
use serde::Serialize;

/// Perturbation sizes for curvature extraction, strictly ascending.
#[derive(Debug, Clone)]
pub struct EpsilonProtocol {
    pub epsilons: Vec<f64>,
}

impl EpsilonProtocol {
    pub fn new(epsilons: Vec<f64>) -> Result<Self> {
        if epsilons.len() < 3 {
            return Err(Error::InvalidConfig(
                "need at least 3 epsilon values to extract a curvature".into(),
            ));
        }
        let mut prev = 0.0;
        for &e in &epsilons {
            if !(e > prev) || !e.is_finite() {
                return Err(Error::InvalidConfig(
                    "epsilon ladder must be finite, positive and strictly ascending".into(),
                ));
            }
            prev = e;
        }
        Ok(Self { epsilons })
    }

    /// Default ladder for conditional (local) divergences, as fractions of
    /// the conditional spread of the perturbed coordinate.
    pub fn default_local(x_scale: f64) -> Self {
        Self {
            epsilons: [0.1, 0.15, 0.25, 0.4].iter().map(|f| f * x_scale).collect(),
        }
    }

    /// Enlarged ladder for ensemble-level divergences on linear models.
    /// These divergences are far smaller than their conditional
    /// counterparts at equal eps (most of the shift is absorbed by the
    /// stationary spread), and for linear dynamics they are exactly
    /// quadratic in eps at any amplitude, so the rungs can sit well above
    /// estimator noise without regime error. Nonlinear models must stay
    /// on the small default ladder instead.
    pub fn default_ensemble(x_scale: f64) -> Self {
        Self {
            epsilons: [0.5, 1.0, 1.5, 2.0].iter().map(|f| f * x_scale).collect(),
        }
    }
}

/// Sample-size and estimator knobs for the empirical pipeline.
#[derive(Debug, Clone)]
pub struct EmpiricalConfig {
    /// Stratified stationary conditions for conditional averaging.
    pub n_conditions: usize,
    /// Trajectories per conditional ensemble.
    pub n_conditional: usize,
    /// Total pooled stationary samples (split into halves internally).
    pub n_stationary: usize,
    /// Chains in the stationary pool.
    pub chains: usize,
    /// Neighbor count for the divergence estimators.
    pub k: usize,
    pub dt: f64,
    pub seed: u64,
}

impl EmpiricalConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            n_conditions: 64,
            n_conditional: 10_000,
            n_stationary: 300_000,
            chains: 64,
            k: crate::estimators::DEFAULT_K,
            seed,
            dt: 0.01,
        }
    }

    /// Reduced sizes for fast smoke runs; statistical tolerances widen
    /// accordingly.
    pub fn reduced(seed: u64) -> Self {
        Self {
            n_conditions: 24,
            n_conditional: 3_000,
            n_stationary: 60_000,
            chains: 48,
            k: crate::estimators::DEFAULT_K,
            seed,
            dt: 0.01,
        }
    }

    fn sim(&self, model: &SdeModel, seed: u64) -> SimConfig {
        let mut cfg = SimConfig::new(model, seed);
        cfg.dt = self.dt;
        cfg
    }
}

/// One rung of the epsilon ladder: conditional divergence mean and the
/// perturbation cost, with standard errors.
#[derive(Debug, Clone, Serialize)]
pub struct LadderPoint {
    pub epsilon: f64,
    pub d_mean: f64,
    pub d_stderr: f64,
    pub c: f64,
    pub c_stderr: f64,
}

/// Write ladder diagnostics as CSV with a '#' parameter echo.
pub fn write_ladder_csv<W: Write>(
    w: &mut W,
    points: &[LadderPoint],
    meta: &[(String, String)],
) -> Result<()> {
    for (key, val) in meta {
        writeln!(w, "# {key} = {val}")?;
    }
    writeln!(w, "epsilon,d_mean,d_stderr,c,c_stderr")?;
    for p in points {
        writeln!(
            w,
            "{},{},{},{},{}",
            p.epsilon, p.d_mean, p.d_stderr, p.c, p.c_stderr
        )?;
    }
    Ok(())
}

/// A fitted quadratic curvature with its standard error.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct FitCoefficient {
    pub value: f64,
    pub stderr: f64,
}

/// Empirical response ratio: the measure plus full fit diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct GammaEstimate {
    pub measure: MeasureResult,
    pub numerator: FitCoefficient,
    pub denominator: FitCoefficient,
    pub ladder: Vec<LadderPoint>,
}

/// Weighted least-squares fit of val = K eps^2 through the origin.
/// Rejects ladders that visibly depart from the quadratic regime.
fn fit_quadratic_origin(points: &[(f64, f64, f64)]) -> Result<FitCoefficient> {
    let mut swx = 0.0; // sum w * eps^2 * val
    let mut sww = 0.0; // sum w * eps^4
    for &(e, v, se) in points {
        if !(se > 0.0) {
            return Err(Error::Estimator("non-positive stderr in ladder fit".into()));
        }
        let w = 1.0 / (se * se);
        swx += w * e * e * v;
        sww += w * e * e * e * e;
    }
    if !(sww > 0.0) {
        return Err(Error::Estimator("degenerate epsilon ladder".into()));
    }
    let k = swx / sww;
    let stderr = (1.0 / sww).sqrt();
    let chi2: f64 = points
        .iter()
        .map(|&(e, v, se)| ((v - k * e * e) / se).powi(2))
        .sum();
    let dof = (points.len() - 1) as f64;
    if chi2 / dof > 25.0 {
        return Err(Error::Estimator(format!(
            "epsilon ladder departs from the quadratic regime (chi2/dof = {:.1}); use smaller epsilons",
            chi2 / dof
        )));
    }
    Ok(FitCoefficient { value: k, stderr })
}

/// Linear coefficient of a 2-parameter WLS fit val = a eps + K eps^2;
/// returns (a, stderr_a). Used to confirm the leading order is quadratic.
pub fn ladder_linear_coefficient(points: &[(f64, f64, f64)]) -> Result<(f64, f64)> {
    let (mut s11, mut s12, mut s22, mut b1, mut b2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(e, v, se) in points {
        if !(se > 0.0) {
            return Err(Error::Estimator("non-positive stderr in ladder fit".into()));
        }
        let w = 1.0 / (se * se);
        s11 += w * e * e;
        s12 += w * e * e * e;
        s22 += w * e * e * e * e;
        b1 += w * e * v;
        b2 += w * e * e * v;
    }
    let det = s11 * s22 - s12 * s12;
    if det.abs() < 1e-300 {
        return Err(Error::Estimator("singular ladder design".into()));
    }
    let a = (s22 * b1 - s12 * b2) / det;
    let var_a = s22 / det;
    Ok((a, var_a.sqrt()))
}

fn require_positive_lag(tau: f64) -> Result<()> {
    if tau == 0.0 {
        return Err(Error::Degenerate(
            "tau = 0: the response target coincides with the conditioning state".into(),
        ));
    }
    if !tau.is_finite() {
        return Err(Error::InvalidConfig(format!("non-finite tau {tau}")));
    }
    Ok(())
}

fn zero_kl(method: &str) -> KlEstimate {
    KlEstimate {
        value: 0.0,
        stderr: 0.0,
        method: method.into(),
        k: 0,
        n_p: 0,
        n_q: 0,
        jittered: false,
    }
}

/// KL[p(x + shift) || q] between two independent sample sets, the shift
/// applied to the first. The sets must come from independent halves; feeding
/// the same samples twice makes every perturbed point coincide with an
/// unperturbed one at shift zero.
pub fn shift_divergence(
    a: &SampleSet,
    b: &SampleSet,
    shift: &[f64],
    k: usize,
) -> Result<KlEstimate> {
    if shift.len() != a.dim {
        return Err(Error::DimensionMismatch {
            expected: a.dim,
            got: shift.len(),
        });
    }
    let mut shifted = a.clone();
    for i in 0..shifted.len() {
        for (j, s) in shift.iter().enumerate() {
            shifted.data[i * shifted.dim + j] += s;
        }
    }
    kl_knn(&shifted, b, k)
}

/// Chain-aligned halves of a pooled ensemble: row ranges (start, end) that
/// never split a chain, so the halves are statistically independent.
fn pool_halves(pool: &Ensemble) -> ((usize, usize), (usize, usize)) {
    let n = pool.len();
    let per_chain = pool.chain_len.unwrap_or(1).max(1);
    let half_chains = n / per_chain / 2;
    let half = (half_chains * per_chain).max(1);
    ((0, half), (half, (2 * half).min(n)))
}

fn block_column(block: &StateBlock, coord: usize, range: (usize, usize)) -> Vec<f64> {
    (range.0..range.1)
        .map(|i| block.row(i)[coord])
        .collect()
}

fn block_rows(block: &StateBlock, range: (usize, usize)) -> SampleSet {
    SampleSet {
        dim: block.dim,
        data: block.data[range.0 * block.dim..range.1 * block.dim].to_vec(),
    }
}

/// Residual standard deviation of coordinate `target` regressed (with
/// intercept) on all other coordinates; the empirical stand-in for the
/// conditional spread sigma_{x0|y0,z0}.
fn ols_residual_sd(block: &StateBlock, target: usize) -> Result<f64> {
    use nalgebra::{Cholesky, DMatrix, DVector};
    let n = block.len();
    let d = block.dim;
    if n < d + 2 {
        return Err(Error::Estimator("too few samples for a residual scale".into()));
    }
    let preds: Vec<usize> = (0..d).filter(|&j| j != target).collect();
    let p = preds.len() + 1;
    let mut m = DMatrix::<f64>::zeros(p, p);
    let mut v = DVector::<f64>::zeros(p);
    let mut s = 0.0;
    let mut row = vec![0.0; p];
    for i in 0..n {
        let r = block.row(i);
        row[0] = 1.0;
        for (a, &j) in preds.iter().enumerate() {
            row[a + 1] = r[j];
        }
        let t = r[target];
        for a in 0..p {
            for c in a..p {
                m[(a, c)] += row[a] * row[c];
            }
            v[a] += row[a] * t;
        }
        s += t * t;
    }
    for a in 0..p {
        for c in 0..a {
            m[(a, c)] = m[(c, a)];
        }
    }
    let chol = Cholesky::new(m)
        .ok_or_else(|| Error::Estimator("degenerate state pool for residual scale".into()))?;
    let beta = chol.solve(&v);
    let rss = s - v.dot(&beta);
    if !(rss > 0.0) {
        return Err(Error::Estimator("zero conditional spread in pool".into()));
    }
    Ok((rss / n as f64).sqrt())
}

/// Stratified draw of stationary conditions: rank the pool by the perturbed
/// coordinate, cut into equal-count bins, and take one seeded member per
/// bin. Covers the stationary range evenly without losing randomness.
pub fn stratified_conditions(
    initial: &StateBlock,
    x_index: usize,
    n_conditions: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let n = initial.len();
    if n < n_conditions {
        return Err(Error::InvalidConfig(format!(
            "pool of {n} cannot stratify {n_conditions} conditions"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        initial.row(a)[x_index]
            .total_cmp(&initial.row(b)[x_index])
            .then(a.cmp(&b))
    });
    let mut out = Vec::with_capacity(n_conditions);
    for b in 0..n_conditions {
        let lo = b * n / n_conditions;
        let hi = (b + 1) * n / n_conditions;
        let pick = lo + (derive_seed(seed, &format!("strat-{b}")) as usize) % (hi - lo);
        out.push(initial.row(order[pick]).to_vec());
    }
    Ok(out)
}

/// Shared stationary pool with the lag recorded, plus the ladder scale.
struct PoolContext {
    pool: Ensemble,
    a: (usize, usize),
    b: (usize, usize),
    x_scale: f64,
}

fn build_pool(model: &SdeModel, tau: Option<f64>, cfg: &EmpiricalConfig, tag: &str) -> Result<PoolContext> {
    let mut sim = cfg.sim(model, derive_seed(cfg.seed, tag));
    sim.n_trajectories = cfg.n_stationary;
    if let Some(t) = tau {
        sim.lags = vec![t];
    }
    let pool = stationary_pool(model, &sim, cfg.chains, None)?;
    let (a, b) = pool_halves(&pool);
    let x_scale = ols_residual_sd(&pool.initial, model.x_index)?;
    Ok(PoolContext { pool, a, b, x_scale })
}

/// KL from the perturbed to the natural conditional prediction of the
/// target at lag tau, for one measured condition. Exactly zero for tau < 0;
/// the two ensembles carry independent noise.
pub fn local_response_divergence(
    model: &SdeModel,
    condition: &[f64],
    epsilon: f64,
    tau: f64,
    cfg: &EmpiricalConfig,
) -> Result<KlEstimate> {
    if tau < 0.0 {
        return Ok(zero_kl("zero (response precedes perturbation)"));
    }
    require_positive_lag(tau)?;
    let mut sim = cfg.sim(model, derive_seed(cfg.seed, "local-natural"));
    sim.n_trajectories = cfg.n_conditional;
    sim.lags = vec![tau];
    let natural = simulate_conditional(model, condition, &sim)?;
    let mut pert_cond = condition.to_vec();
    pert_cond[model.x_index] += epsilon;
    sim.seed = derive_seed(cfg.seed, "local-perturbed");
    let perturbed = simulate_conditional(model, &pert_cond, &sim)?;
    let nat_y = SampleSet::from_column(&natural.at_lag[0].column(model.y_index));
    let pert_y = SampleSet::from_column(&perturbed.at_lag[0].column(model.y_index));
    kl_knn(&pert_y, &nat_y, cfg.k)
}

/// Information cost of the shift x -> x + epsilon of the stationary state:
/// KL between the shifted and the natural stationary distribution, from
/// independent pool halves.
pub fn perturbation_divergence(
    model: &SdeModel,
    epsilon: f64,
    cfg: &EmpiricalConfig,
) -> Result<KlEstimate> {
    let ctx = build_pool(model, None, cfg, "cx-pool")?;
    let a = block_rows(&ctx.pool.initial, ctx.a);
    let b = block_rows(&ctx.pool.initial, ctx.b);
    let mut shift = vec![0.0; model.dim()];
    shift[model.x_index] = epsilon;
    shift_divergence(&a, &b, &shift, cfg.k)
}

/// Conditional-route information response: the ratio of fitted quadratic
/// curvatures of <d(eps)> (averaged over stratified stationary conditions)
/// and c_x(eps).
pub fn information_response_empirical(
    model: &SdeModel,
    tau: f64,
    protocol: Option<&EpsilonProtocol>,
    cfg: &EmpiricalConfig,
) -> Result<GammaEstimate> {
    if tau < 0.0 {
        return Ok(zero_gamma(MeasureKind::Gamma, tau));
    }
    require_positive_lag(tau)?;
    let ctx = build_pool(model, None, cfg, "gamma-pool")?;
    let ladder = match protocol {
        Some(p) => p.clone(),
        None => EpsilonProtocol::default_local(ctx.x_scale),
    };
    let conditions = stratified_conditions(
        &ctx.pool.initial,
        model.x_index,
        cfg.n_conditions,
        derive_seed(cfg.seed, "conditions"),
    )?;

    // d_ij: one natural ensemble per condition, shared across the ladder.
    let n_eps = ladder.epsilons.len();
    let mut d_values = vec![Vec::with_capacity(conditions.len()); n_eps];
    for (i, cond) in conditions.iter().enumerate() {
        let mut sim = cfg.sim(model, derive_seed(cfg.seed, &format!("d-nat-{i}")));
        sim.n_trajectories = cfg.n_conditional;
        sim.lags = vec![tau];
        let natural = simulate_conditional(model, cond, &sim)?;
        let nat_y = SampleSet::from_column(&natural.at_lag[0].column(model.y_index));
        for (j, &eps) in ladder.epsilons.iter().enumerate() {
            let mut pert_cond = cond.clone();
            pert_cond[model.x_index] += eps;
            sim.seed = derive_seed(cfg.seed, &format!("d-pert-{i}-{j}"));
            let perturbed = simulate_conditional(model, &pert_cond, &sim)?;
            let pert_y = SampleSet::from_column(&perturbed.at_lag[0].column(model.y_index));
            d_values[j].push(kl_knn(&pert_y, &nat_y, cfg.k)?.value);
        }
    }

    let a_rows = block_rows(&ctx.pool.initial, ctx.a);
    let b_rows = block_rows(&ctx.pool.initial, ctx.b);
    let mut points = Vec::with_capacity(n_eps);
    for (j, &eps) in ladder.epsilons.iter().enumerate() {
        let vals = &d_values[j];
        let c = vals.len() as f64;
        let d_mean = vals.iter().sum::<f64>() / c;
        let d_var = vals.iter().map(|v| (v - d_mean).powi(2)).sum::<f64>() / (c - 1.0);
        let d_stderr = (d_var / c).sqrt();
        let mut shift = vec![0.0; model.dim()];
        shift[model.x_index] = eps;
        let cx = shift_divergence(&a_rows, &b_rows, &shift, cfg.k)?;
        points.push(LadderPoint {
            epsilon: eps,
            d_mean,
            d_stderr,
            c: cx.value,
            c_stderr: cx.stderr,
        });
    }
    assemble_gamma(MeasureKind::Gamma, tau, points, cfg, &ladder)
}

/// Ensemble-route information response: the numerator divergence compares
/// the lag-tau marginal of a shifted stationary ensemble (half A, initial x
/// shifted, continued with fresh noise) against the natural lag-tau marginal
/// recorded in the independent half B.
pub fn ensemble_information_response_empirical(
    model: &SdeModel,
    tau: f64,
    protocol: Option<&EpsilonProtocol>,
    cfg: &EmpiricalConfig,
) -> Result<GammaEstimate> {
    if tau < 0.0 {
        return Ok(zero_gamma(MeasureKind::GammaEnsemble, tau));
    }
    require_positive_lag(tau)?;
    let ctx = build_pool(model, Some(tau), cfg, "ens-pool")?;
    let ladder = match protocol {
        Some(p) => p.clone(),
        // Large rungs are only safe where the divergence is exactly
        // quadratic; nonlinear models stay in the small-eps regime.
        None if model.as_linear().is_some() => EpsilonProtocol::default_ensemble(ctx.x_scale),
        None => EpsilonProtocol::default_local(ctx.x_scale),
    };
    let nat_y = SampleSet::from_column(&block_column(&ctx.pool.at_lag[0], model.y_index, ctx.b));
    let a_init = block_rows(&ctx.pool.initial, ctx.a);
    let b_init = block_rows(&ctx.pool.initial, ctx.b);

    let mut points = Vec::with_capacity(ladder.epsilons.len());
    for (j, &eps) in ladder.epsilons.iter().enumerate() {
        let mut shifted = StateBlock {
            dim: ctx.pool.initial.dim,
            data: ctx.pool.initial.data
                [ctx.a.0 * ctx.pool.initial.dim..ctx.a.1 * ctx.pool.initial.dim]
                .to_vec(),
        };
        for i in 0..shifted.len() {
            shifted.data[i * shifted.dim + model.x_index] += eps;
        }
        let mut sim = cfg.sim(model, derive_seed(cfg.seed, &format!("ens-cont-{j}")));
        sim.lags = vec![tau];
        let cont = simulate_from_states(model, &shifted, &sim)?;
        let cont_y = SampleSet::from_column(&cont.at_lag[0].column(model.y_index));
        let d = kl_knn(&cont_y, &nat_y, cfg.k)?;
        let mut shift = vec![0.0; model.dim()];
        shift[model.x_index] = eps;
        let cx = shift_divergence(&a_init, &b_init, &shift, cfg.k)?;
        points.push(LadderPoint {
            epsilon: eps,
            d_mean: d.value,
            d_stderr: d.stderr,
            c: cx.value,
            c_stderr: cx.stderr,
        });
    }
    assemble_gamma(MeasureKind::GammaEnsemble, tau, points, cfg, &ladder)
}

fn zero_gamma(kind: MeasureKind, tau: f64) -> GammaEstimate {
    let mut measure = MeasureResult::empirical(kind, 0.0, tau, 0.0);
    measure.meta.insert(
        "note".into(),
        "tau < 0: response is exactly zero; nothing simulated".into(),
    );
    GammaEstimate {
        measure,
        numerator: FitCoefficient { value: 0.0, stderr: 0.0 },
        denominator: FitCoefficient { value: 0.0, stderr: 0.0 },
        ladder: Vec::new(),
    }
}

fn assemble_gamma(
    kind: MeasureKind,
    tau: f64,
    points: Vec<LadderPoint>,
    cfg: &EmpiricalConfig,
    ladder: &EpsilonProtocol,
) -> Result<GammaEstimate> {
    let d_pts: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|p| (p.epsilon, p.d_mean, p.d_stderr))
        .collect();
    let c_pts: Vec<(f64, f64, f64)> = points
        .iter()
        .map(|p| (p.epsilon, p.c, p.c_stderr))
        .collect();
    let numerator = fit_quadratic_origin(&d_pts)?;
    let denominator = fit_quadratic_origin(&c_pts)?;
    if !(denominator.value > 0.0) {
        return Err(Error::Estimator(
            "perturbation cost curvature is not positive; enlarge the sample or the ladder".into(),
        ));
    }
    let value = numerator.value / denominator.value;
    let rel = ((numerator.stderr / numerator.value).powi(2)
        + (denominator.stderr / denominator.value).powi(2))
    .sqrt();
    let stderr = (value * rel).abs();
    let mut measure = MeasureResult::empirical(kind, value, tau, stderr);
    measure.meta.insert("k".into(), cfg.k.to_string());
    measure
        .meta
        .insert("n_conditions".into(), cfg.n_conditions.to_string());
    measure
        .meta
        .insert("n_conditional".into(), cfg.n_conditional.to_string());
    measure
        .meta
        .insert("n_stationary".into(), cfg.n_stationary.to_string());
    measure.meta.insert(
        "epsilons".into(),
        ladder
            .epsilons
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    );
    Ok(GammaEstimate {
        measure,
        numerator,
        denominator,
        ladder: points,
    })
}

/// Outcome of the generalized-profile response.
#[derive(Debug, Clone)]
pub struct GeneralizedOutcome {
    pub measure: MeasureResult,
    /// True when the profile failed the <h> = 0 precondition and was
    /// recentered before use.
    pub recentered: bool,
}

/// Response to a general perturbation profile h(state at time 0):
/// Gamma[h] = <m(y_tau)^2> / <h^2> with m the regression of h on y_tau.
/// h must be centered; profiles off by more than 3 standard errors are
/// recentered with a warning, constants are rejected.
pub fn generalized_response<F>(
    model: &SdeModel,
    h: F,
    tau: f64,
    cfg: &EmpiricalConfig,
) -> Result<GeneralizedOutcome>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    if tau < 0.0 {
        let mut measure = MeasureResult::empirical(MeasureKind::GeneralizedResponse, 0.0, tau, 0.0);
        measure
            .meta
            .insert("note".into(), "tau < 0: response is exactly zero".into());
        return Ok(GeneralizedOutcome {
            measure,
            recentered: false,
        });
    }
    require_positive_lag(tau)?;
    let ctx = build_pool(model, Some(tau), cfg, "gen-pool")?;
    let n = ctx.pool.len();
    let mut h_vals: Vec<f64> = (0..n).map(|i| h(ctx.pool.initial.row(i))).collect();
    if h_vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Estimator("perturbation profile produced non-finite values".into()));
    }
    let mean_h = h_vals.iter().sum::<f64>() / n as f64;
    let var_h = h_vals.iter().map(|v| (v - mean_h).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var_h > 1e-300) {
        return Err(Error::Degenerate(
            "perturbation profile is constant on the stationary ensemble".into(),
        ));
    }
    // Center check by chain-blocked standard error of the mean.
    let blocks = STDERR_BLOCKS;
    let mut bm = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let (lo, hi) = (b * n / blocks, (b + 1) * n / blocks);
        bm.push(h_vals[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
    }
    let gmean = bm.iter().sum::<f64>() / blocks as f64;
    let bvar = bm.iter().map(|v| (v - gmean).powi(2)).sum::<f64>() / (blocks - 1) as f64;
    let se_mean = (bvar / blocks as f64).sqrt();
    let recentered = mean_h.abs() > 3.0 * se_mean;
    if recentered {
        for v in h_vals.iter_mut() {
            *v -= mean_h;
        }
    }

    let y_tau: Vec<f64> = ctx.pool.at_lag[0].column(model.y_index);
    let y_set = SampleSet::from_column(&y_tau);
    // Regression evaluated on a stride-subsample of the same y points;
    // the subsample preserves chain order, so blocks stay chain-aligned.
    let eval_count = n.min(20_000);
    let stride = n / eval_count;
    let eval_idx: Vec<usize> = (0..eval_count).map(|e| e * stride).collect();
    let eval_set =
        SampleSet::from_column(&eval_idx.iter().map(|&i| y_tau[i]).collect::<Vec<_>>());
    let reg = kernel_regression(&y_set, &h_vals, &eval_set)?;
    let m2: Vec<f64> = reg.values.iter().map(|v| v * v).collect();

    let h2_mean = h_vals.iter().map(|v| v * v).sum::<f64>() / n as f64;
    let ratio = |mm: f64| mm / h2_mean;
    let m2_mean = m2.iter().sum::<f64>() / m2.len() as f64;
    let value = ratio(m2_mean);
    // Block jackknife over the eval subsample; the h^2 denominator has far
    // smaller relative noise and is held fixed.
    let mut reps = Vec::with_capacity(blocks);
    let ne = m2.len();
    for b in 0..blocks {
        let (lo, hi) = (b * ne / blocks, (b + 1) * ne / blocks);
        let sum: f64 = m2.iter().sum::<f64>() - m2[lo..hi].iter().sum::<f64>();
        reps.push(ratio(sum / (ne - (hi - lo)) as f64));
    }
    let rmean = reps.iter().sum::<f64>() / blocks as f64;
    let rvar =
        reps.iter().map(|v| (v - rmean).powi(2)).sum::<f64>() * (blocks as f64 - 1.0) / blocks as f64;
    let stderr = rvar.sqrt();

    let mut measure = MeasureResult::empirical(MeasureKind::GeneralizedResponse, value, tau, stderr);
    if recentered {
        measure.meta.insert(
            "warning".into(),
            format!("profile mean {mean_h:.3e} exceeded 3 standard errors; recentered"),
        );
    }
    Ok(GeneralizedOutcome { measure, recentered })
}

/// One rung of the fluctuation-response bound table.
#[derive(Debug, Clone, Serialize)]
pub struct DechantRow {
    pub epsilon: f64,
    /// |mean response of y_tau| under the shifted ensemble.
    pub response: f64,
    /// sigma_{y_tau} sqrt(2 (d + 4 stderr)): the bound with its estimator
    /// uncertainty folded in, since the inequality is tight (an equality)
    /// for linear models and any downward noise in d would otherwise
    /// produce false violations.
    pub bound: f64,
    pub divergence: f64,
    pub divergence_stderr: f64,
    pub pass: bool,
}

/// Classical fluctuation-response verification at lag tau.
#[derive(Debug, Clone, Serialize)]
pub struct FrtReport {
    pub tau: f64,
    /// Response slope d<y_tau>/d eps from common-random-number twins.
    pub slope: f64,
    pub slope_stderr: f64,
    /// The stationary correlation -<y_tau d/dx0 ln p(state_0)>, analytic
    /// for linear models, kernel-score based otherwise.
    pub correlation: f64,
    pub correlation_stderr: f64,
    pub relative_gap: f64,
    pub dechant: Vec<DechantRow>,
    pub pass: bool,
}

/// Compare the ensemble response slope against the stationary correlation
/// predicted by linear response theory, and check the response bound
/// |response| <= sigma_y sqrt(2 d~) on every ladder rung. The bound is a
/// leading-order statement, so the default rungs stay on the small ladder
/// for every model; large perturbations of skewed nonlinear ensembles can
/// exceed the variance-based form legitimately.
pub fn classical_frt_check(
    model: &SdeModel,
    tau: f64,
    protocol: Option<&EpsilonProtocol>,
    cfg: &EmpiricalConfig,
) -> Result<FrtReport> {
    require_positive_lag(tau)?;
    if tau < 0.0 {
        return Err(Error::InvalidConfig("response check needs tau > 0".into()));
    }
    let ctx = build_pool(model, Some(tau), cfg, "frt-pool")?;
    let ladder = match protocol {
        Some(p) => p.clone(),
        None => EpsilonProtocol::default_local(ctx.x_scale),
    };
    let nat_y_b: Vec<f64> = block_column(&ctx.pool.at_lag[0], model.y_index, ctx.b);
    let sigma_y = {
        let m = nat_y_b.iter().sum::<f64>() / nat_y_b.len() as f64;
        (nat_y_b.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (nat_y_b.len() - 1) as f64).sqrt()
    };
    let a_init = block_rows(&ctx.pool.initial, ctx.a);
    let nat_y_set = SampleSet::from_column(&nat_y_b);

    // (a) Paired response per rung: natural and shifted continuations share
    // seeds (common random numbers), so the difference isolates the mean
    // response; (b) an independently seeded shifted continuation feeds the
    // divergence for the bound.
    let mut slopes = Vec::with_capacity(ladder.epsilons.len());
    let mut dechant = Vec::with_capacity(ladder.epsilons.len());
    for (j, &eps) in ladder.epsilons.iter().enumerate() {
        let base = StateBlock {
            dim: a_init.dim,
            data: a_init.data.clone(),
        };
        let mut shifted = base.clone();
        for i in 0..shifted.len() {
            shifted.data[i * shifted.dim + model.x_index] += eps;
        }
        let mut sim = cfg.sim(model, derive_seed(cfg.seed, &format!("frt-crn-{j}")));
        sim.lags = vec![tau];
        let nat = simulate_from_states(model, &base, &sim)?;
        let pert = simulate_from_states(model, &shifted, &sim)?;
        let ny = nat.at_lag[0].column(model.y_index);
        let py = pert.at_lag[0].column(model.y_index);
        let diffs: Vec<f64> = ny.iter().zip(&py).map(|(a, b)| b - a).collect();
        let nd = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / nd;
        let var = diffs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nd - 1.0);
        let se = (var / nd).sqrt();
        slopes.push((mean / eps, se / eps));

        sim.seed = derive_seed(cfg.seed, &format!("frt-div-{j}"));
        let cont = simulate_from_states(model, &shifted, &sim)?;
        let cont_y = SampleSet::from_column(&cont.at_lag[0].column(model.y_index));
        let div = kl_knn(&cont_y, &nat_y_set, cfg.k)?;
        let response = mean.abs();
        let bound_sq = 2.0 * sigma_y * sigma_y * (div.value + 4.0 * div.stderr).max(0.0);
        let bound = bound_sq.sqrt();
        dechant.push(DechantRow {
            epsilon: eps,
            response,
            bound,
            divergence: div.value,
            divergence_stderr: div.stderr,
            pass: response * response <= bound_sq,
        });
    }
    // Inverse-variance combination of the per-rung slopes. Perfectly paired
    // linear twins leave near-zero spread; floor the weights to stay finite.
    let mut wsum = 0.0;
    let mut vsum = 0.0;
    for &(s, se) in &slopes {
        let w = 1.0 / se.max(1e-12).powi(2);
        wsum += w;
        vsum += w * s;
    }
    let slope = vsum / wsum;
    let slope_stderr = (1.0 / wsum).sqrt();

    let (correlation, correlation_stderr) = match model.as_linear() {
        Some(lin) => {
            let prop = crate::gauss::matexp(&(lin.a() * -tau))?;
            (prop[(lin.y_index(), lin.x_index())], 0.0)
        }
        None => {
            // -<y_tau d/dx ln p(state_0)> over a stride-subsample of the
            // pool, with the score from a kernel density estimate.
            let n = ctx.pool.len();
            let eval_count = n.min(20_000);
            let stride = n / eval_count;
            let idx: Vec<usize> = (0..eval_count).map(|e| e * stride).collect();
            let init_all = block_rows(&ctx.pool.initial, (0, n));
            let eval = {
                let mut data = Vec::with_capacity(idx.len() * init_all.dim);
                for &i in &idx {
                    data.extend_from_slice(init_all.row(i));
                }
                SampleSet {
                    dim: init_all.dim,
                    data,
                }
            };
            let score = crate::estimators::kde_score(&init_all, &eval, model.x_index)?;
            let y_all = ctx.pool.at_lag[0].column(model.y_index);
            let terms: Vec<f64> = idx
                .iter()
                .zip(&score)
                .map(|(&i, &s)| -y_all[i] * s)
                .collect();
            let m = terms.iter().sum::<f64>() / terms.len() as f64;
            let blocks = STDERR_BLOCKS;
            let ne = terms.len();
            let mut bm = Vec::with_capacity(blocks);
            for b in 0..blocks {
                let (lo, hi) = (b * ne / blocks, (b + 1) * ne / blocks);
                bm.push(terms[lo..hi].iter().sum::<f64>() / (hi - lo) as f64);
            }
            let gm = bm.iter().sum::<f64>() / blocks as f64;
            let bv = bm.iter().map(|v| (v - gm).powi(2)).sum::<f64>() / (blocks - 1) as f64;
            (m, (bv / blocks as f64).sqrt())
        }
    };
    let relative_gap = (slope - correlation).abs() / correlation.abs().max(1e-12);
    let pass = dechant.iter().all(|r| r.pass);
    Ok(FrtReport {
        tau,
        slope,
        slope_stderr,
        correlation,
        correlation_stderr,
        relative_gap,
        dechant,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytic;
    use crate::gauss::{condition, lagged_joint, LinearModel};

    fn ou2() -> SdeModel {
        SdeModel::hierarchical_default()
    }

    /// Conditional variance of y_tau given the full time-0 state.
    fn var_y_full(m: &LinearModel, tau: f64) -> f64 {
        let j = lagged_joint(m, tau).unwrap();
        let n = j.n;
        let given: Vec<usize> = (0..n).collect();
        let spec = condition(&j.dist, &[n + m.y_index()], &given).unwrap();
        spec.resid_cov[(0, 0)]
    }

    #[test]
    fn local_divergence_zero_epsilon_is_zero() {
        let model = ou2();
        let mut cfg = EmpiricalConfig::reduced(41);
        cfg.n_conditional = 4_000;
        let e = local_response_divergence(&model, &[0.0, 0.0], 0.0, 3.0, &cfg).unwrap();
        assert!(
            e.value.abs() < 3.0 * e.stderr,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn local_divergence_matches_shifted_gaussian_kl() {
        // d = eps^2 b^2 / (2 var(y_tau | x0, y0)) exactly for the linear
        // model; the estimate must agree within noise plus a small
        // discretization allowance.
        let model = ou2();
        let lin = model.as_linear().unwrap();
        let tau = 3.0;
        let eps = 0.25;
        let b = crate::gauss::matexp(&(lin.a() * -tau)).unwrap()[(1, 0)];
        let expected = eps * eps * b * b / (2.0 * var_y_full(&lin, tau));
        let mut cfg = EmpiricalConfig::reduced(43);
        cfg.n_conditional = 10_000;
        cfg.dt = 0.005;
        let e = local_response_divergence(&model, &[0.0, 0.0], eps, tau, &cfg).unwrap();
        assert!(
            (e.value - expected).abs() < 3.0 * e.stderr + 0.01 * expected,
            "value {} expected {expected} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn local_divergence_independent_of_condition_for_linear() {
        let model = ou2();
        let mut cfg = EmpiricalConfig::reduced(47);
        cfg.n_conditional = 8_000;
        let at_origin = local_response_divergence(&model, &[0.0, 0.0], 0.25, 3.0, &cfg).unwrap();
        cfg.seed = 48;
        let off_center = local_response_divergence(&model, &[1.0, -1.0], 0.25, 3.0, &cfg).unwrap();
        let combined = (at_origin.stderr.powi(2) + off_center.stderr.powi(2)).sqrt();
        assert!(
            (at_origin.value - off_center.value).abs() < 3.0 * combined,
            "{} vs {} (combined stderr {combined})",
            at_origin.value,
            off_center.value
        );
    }

    #[test]
    fn local_divergence_negative_lag_is_exactly_zero() {
        let model = ou2();
        let cfg = EmpiricalConfig::reduced(49);
        let e = local_response_divergence(&model, &[0.0, 0.0], 0.25, -2.0, &cfg).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(e.stderr, 0.0);
        assert!(local_response_divergence(&model, &[0.0, 0.0], 0.25, 0.0, &cfg).is_err());
    }

    #[test]
    fn perturbation_cost_zero_epsilon_is_zero() {
        let model = SdeModel::scalar_default();
        let mut cfg = EmpiricalConfig::reduced(53);
        cfg.n_stationary = 40_000;
        let e = perturbation_divergence(&model, 0.0, &cfg).unwrap();
        assert!(
            e.value.abs() < 3.0 * e.stderr,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn perturbation_cost_matches_gaussian_shift() {
        // 1D OU with stationary variance 0.5: c(0.25) = 0.0625/1.0 = 0.0625.
        let model = SdeModel::scalar_default();
        let mut cfg = EmpiricalConfig::reduced(59);
        cfg.n_stationary = 80_000;
        let e = perturbation_divergence(&model, 0.25, &cfg).unwrap();
        assert!(
            (e.value - 0.0625).abs() < 3.0 * e.stderr + 0.002,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn gamma_empirical_agrees_with_analytic_on_linear_model() {
        let model = ou2();
        let lin = model.as_linear().unwrap();
        let tau = 3.0;
        let truth = analytic::information_response(&lin, tau).unwrap().value;
        let cfg = EmpiricalConfig::reduced(61);
        let est = information_response_empirical(&model, tau, None, &cfg).unwrap();
        let tol = 3.0 * est.measure.stderr.unwrap() + 0.05 * truth;
        assert!(
            (est.measure.value - truth).abs() < tol,
            "empirical {} vs analytic {truth} (stderr {:?})",
            est.measure.value,
            est.measure.stderr
        );
        assert_eq!(est.ladder.len(), 4);
    }

    #[test]
    fn gamma_empirical_zero_for_decoupled_model() {
        // x never enters y's drift, and y keeps its own noise so the
        // conditional variance stays positive. The response must vanish.
        let a = nalgebra::DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.2]);
        let q = nalgebra::DMatrix::from_row_slice(2, 2, &[0.1, 0.0, 0.0, 0.05]);
        let lin = LinearModel::new(a, q, 0, 1).unwrap();
        let model = SdeModel::linear_ou("decoupled", &lin).unwrap();
        let cfg = EmpiricalConfig::reduced(83);
        let est = information_response_empirical(&model, 3.0, None, &cfg).unwrap();
        let se = est.measure.stderr.unwrap();
        assert!(
            est.measure.value.abs() < 3.0 * se + 1e-3,
            "decoupled response {} (stderr {se})",
            est.measure.value
        );
    }

    #[test]
    fn gamma_empirical_negative_lag_is_zero() {
        let model = ou2();
        let cfg = EmpiricalConfig::reduced(67);
        let est = information_response_empirical(&model, -3.0, None, &cfg).unwrap();
        assert_eq!(est.measure.value, 0.0);
        assert!(est.ladder.is_empty());
    }

    #[test]
    fn ladder_has_no_linear_component() {
        // The divergences are even in eps to leading order; the fitted
        // linear coefficient must be consistent with zero.
        let model = ou2();
        let cfg = EmpiricalConfig::reduced(71);
        let est = information_response_empirical(&model, 3.0, None, &cfg).unwrap();
        let pts: Vec<(f64, f64, f64)> = est
            .ladder
            .iter()
            .map(|p| (p.epsilon, p.d_mean, p.d_stderr))
            .collect();
        let (a, se_a) = ladder_linear_coefficient(&pts).unwrap();
        assert!(a.abs() < 3.0 * se_a, "linear coefficient {a} (se {se_a})");
    }

    #[test]
    fn gamma_ensemble_agrees_with_analytic_on_linear_model() {
        let model = ou2();
        let lin = model.as_linear().unwrap();
        let tau = 3.0;
        let truth = analytic::ensemble_information_response(&lin, tau)
            .unwrap()
            .value;
        let mut cfg = EmpiricalConfig::reduced(73);
        cfg.n_stationary = 120_000;
        let est = ensemble_information_response_empirical(&model, tau, None, &cfg).unwrap();
        let tol = 3.0 * est.measure.stderr.unwrap() + 0.05 * truth;
        assert!(
            (est.measure.value - truth).abs() < tol,
            "empirical {} vs analytic {truth} (stderr {:?})",
            est.measure.value,
            est.measure.stderr
        );
    }

    #[test]
    fn ensemble_response_stays_below_conditional_response() {
        let model = ou2();
        let mut cfg = EmpiricalConfig::reduced(79);
        cfg.n_stationary = 120_000;
        let gamma = information_response_empirical(&model, 3.0, None, &cfg).unwrap();
        let gamma_ens = ensemble_information_response_empirical(&model, 3.0, None, &cfg).unwrap();
        let combined = (gamma.measure.stderr.unwrap().powi(2)
            + gamma_ens.measure.stderr.unwrap().powi(2))
        .sqrt();
        assert!(
            gamma_ens.measure.value <= gamma.measure.value + 3.0 * combined,
            "ensemble {} conditional {}",
            gamma_ens.measure.value,
            gamma.measure.value
        );
    }

    #[test]
    fn gamma_invariant_under_target_rescaling() {
        // y -> 3.7 y is a similarity transform of the drift and noise; the
        // divergence ratio must not move beyond noise.
        let model = ou2();
        let lin = model.as_linear().unwrap();
        let s = 3.7;
        let a = lin.a();
        let mut a2 = a.clone();
        a2[(1, 0)] = a[(1, 0)] * s;
        a2[(0, 1)] = a[(0, 1)] / s;
        let mut q2 = lin.q().clone();
        q2[(1, 1)] *= s * s;
        q2[(0, 1)] *= s;
        q2[(1, 0)] *= s;
        let lin2 = LinearModel::new(a2, q2, 0, 1).unwrap();
        let scaled = SdeModel::linear_ou("ou2-scaled", &lin2).unwrap();
        let cfg = EmpiricalConfig::reduced(83);
        let g1 = information_response_empirical(&model, 3.0, None, &cfg).unwrap();
        let g2 = information_response_empirical(&scaled, 3.0, None, &cfg).unwrap();
        let combined = (g1.measure.stderr.unwrap().powi(2) + g2.measure.stderr.unwrap().powi(2))
            .sqrt();
        assert!(
            (g1.measure.value - g2.measure.value).abs() < 3.0 * combined,
            "{} vs {} (combined {combined})",
            g1.measure.value,
            g2.measure.value
        );
    }

    #[test]
    fn generalized_profile_reproduces_ensemble_response() {
        // h(x0, y0) = (x0 - <x0|y0>) / var(x0|y0) is the profile whose
        // generalized response equals the ensemble information response.
        let model = ou2();
        let lin = model.as_linear().unwrap();
        let joint = lagged_joint(&lin, 3.0).unwrap();
        let spec = condition(&joint.dist, &[0], &[1]).unwrap();
        let slope = spec.coeffs[(0, 0)];
        let var = spec.resid_cov[(0, 0)];
        let truth = analytic::ensemble_information_response(&lin, 3.0).unwrap().value;
        let mut cfg = EmpiricalConfig::reduced(89);
        cfg.n_stationary = 120_000;
        let out = generalized_response(
            &model,
            move |s: &[f64]| (s[0] - slope * s[1]) / var,
            3.0,
            &cfg,
        )
        .unwrap();
        assert!(
            (out.measure.value - truth).abs() < 0.1 * truth + 3.0 * out.measure.stderr.unwrap(),
            "generalized {} vs ensemble {truth}",
            out.measure.value
        );
        assert!(!out.recentered);
    }

    #[test]
    fn generalized_profile_orthogonal_by_symmetry_is_zero() {
        // The quadratic model is invariant under x -> -x, so h = x0 cannot
        // be predicted from y_tau at all.
        let model = SdeModel::quadratic_default();
        let mut cfg = EmpiricalConfig::reduced(97);
        cfg.n_stationary = 60_000;
        let out = generalized_response(&model, |s: &[f64]| s[0], 3.0, &cfg).unwrap();
        assert!(
            out.measure.value.abs() < 3.0 * out.measure.stderr.unwrap() + 0.005,
            "value {} stderr {:?}",
            out.measure.value,
            out.measure.stderr
        );
    }

    #[test]
    fn generalized_constant_profile_is_rejected() {
        let model = ou2();
        let cfg = EmpiricalConfig::reduced(101);
        assert!(generalized_response(&model, |_: &[f64]| 2.5, 3.0, &cfg).is_err());
    }

    #[test]
    fn frt_linear_slope_matches_analytic_correlation() {
        let model = ou2();
        let mut cfg = EmpiricalConfig::reduced(103);
        cfg.n_stationary = 60_000;
        let rep = classical_frt_check(&model, 3.0, None, &cfg).unwrap();
        assert!(
            rep.relative_gap < 0.05,
            "slope {} correlation {} gap {}",
            rep.slope,
            rep.correlation,
            rep.relative_gap
        );
        assert!(rep.pass, "response bound rows failed: {:?}", rep.dechant);
    }

    #[test]
    fn frt_bound_holds_for_nonlinear_model() {
        let model = SdeModel::quadratic_default();
        let mut cfg = EmpiricalConfig::reduced(107);
        cfg.n_stationary = 60_000;
        let rep = classical_frt_check(&model, 3.0, None, &cfg).unwrap();
        assert!(rep.pass, "response bound rows failed: {:?}", rep.dechant);
    }

    #[test]
    fn stratified_conditions_cover_the_range() {
        let model = ou2();
        let cfg = EmpiricalConfig::reduced(109);
        let ctx = build_pool(&model, None, &cfg, "test-pool").unwrap();
        let conds = stratified_conditions(&ctx.pool.initial, 0, 16, 5).unwrap();
        assert_eq!(conds.len(), 16);
        let xs: Vec<f64> = conds.iter().map(|c| c[0]).collect();
        for w in xs.windows(2) {
            assert!(w[0] <= w[1], "stratified conditions must ascend in x");
        }
        assert!(xs[0] < -0.5 && xs[15] > 0.5, "range not covered: {xs:?}");
    }

    #[test]
    fn protocol_validation() {
        assert!(EpsilonProtocol::new(vec![0.1, 0.2]).is_err());
        assert!(EpsilonProtocol::new(vec![0.2, 0.1, 0.3]).is_err());
        assert!(EpsilonProtocol::new(vec![0.0, 0.1, 0.2]).is_err());
        assert!(EpsilonProtocol::new(vec![0.1, 0.2, 0.4]).is_ok());
    }
}
