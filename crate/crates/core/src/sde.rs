//! Euler-Maruyama simulation engine with additive noise.
//!
//! One step of dX = f(X) dt + L dW (with L L^T = Q constant) is
//! X += f(X) dt + sqrt(dt) L z, z ~ N(0, I). Means of linear systems follow
//! the drift recursion exactly; weak error is O(dt) in general.
//!
//! Determinism contract: trajectory i draws from a counter-based stream
//! derived from (seed, i), so results are bit-reproducible for a given seed
//! and independent of thread scheduling or trajectory count.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gauss::{psd_factor, LinearModel};

/// Drift families known to the engine. An enum (rather than closures) keeps
/// models cloneable, nameable from the CLI and trivially thread-safe.
#[derive(Debug, Clone)]
pub enum Drift {
    /// dxi/dt = -A xi.
    Linear { a: DMatrix<f64> },
    /// dx/dt = -x/t_rel, dy/dt = alpha x^2 - beta y.
    QuadraticCoupling { t_rel: f64, alpha: f64, beta: f64 },
}

/// A Langevin model the engine can integrate. `x_index`/`y_index` name the
/// source and target coordinates for response measurements.
#[derive(Debug, Clone)]
pub struct SdeModel {
    pub name: String,
    dim: usize,
    drift: Drift,
    noise_cov: DMatrix<f64>,
    noise_factor: DMatrix<f64>,
    pub x_index: usize,
    pub y_index: usize,
    pub slowest_timescale: f64,
    pub fastest_timescale: f64,
}

impl SdeModel {
    pub fn linear_ou(name: &str, model: &LinearModel) -> Result<Self> {
        let (slow, fast) = model.timescales();
        Ok(Self {
            name: name.to_string(),
            dim: model.dim(),
            drift: Drift::Linear { a: model.a().clone() },
            noise_cov: model.q().clone(),
            noise_factor: psd_factor(model.q())?,
            x_index: model.x_index(),
            y_index: model.y_index(),
            slowest_timescale: slow,
            fastest_timescale: fast,
        })
    }

    /// The linear view of this model, when the drift is linear.
    pub fn as_linear(&self) -> Option<LinearModel> {
        match &self.drift {
            Drift::Linear { a } => {
                LinearModel::new(a.clone(), self.noise_cov.clone(), self.x_index, self.y_index).ok()
            }
            Drift::QuadraticCoupling { .. } => None,
        }
    }

    /// Scalar OU benchmark: relaxation rate 0.1, noise intensity 0.1.
    pub fn scalar_default() -> Self {
        let m = LinearModel::scalar(0.1, 0.1).expect("valid");
        Self::linear_ou("ou1", &m).expect("valid")
    }

    /// Two-variable linear hierarchy with the default parameters.
    pub fn hierarchical_default() -> Self {
        Self::linear_ou("ou2", &LinearModel::hierarchical_default()).expect("valid")
    }

    /// Quadratic coupling dy/dt = alpha x^2 - beta y driven by an OU source.
    pub fn quadratic(t_rel: f64, q: f64, alpha: f64, beta: f64) -> Result<Self> {
        if t_rel <= 0.0 || beta <= 0.0 || q < 0.0 {
            return Err(Error::InvalidConfig(
                "quadratic model needs t_rel > 0, beta > 0, q >= 0".into(),
            ));
        }
        let noise_cov = DMatrix::from_row_slice(2, 2, &[q, 0.0, 0.0, 0.0]);
        Ok(Self {
            name: "quad".into(),
            dim: 2,
            drift: Drift::QuadraticCoupling { t_rel, alpha, beta },
            noise_factor: psd_factor(&noise_cov)?,
            noise_cov,
            x_index: 0,
            y_index: 1,
            slowest_timescale: t_rel.max(1.0 / beta),
            fastest_timescale: t_rel.min(1.0 / beta),
        })
    }

    /// Default quadratic model: t_rel = 10, q = 0.1, alpha = 0.5, beta = 0.2.
    pub fn quadratic_default() -> Self {
        Self::quadratic(10.0, 0.1, 0.5, 0.2).expect("valid")
    }

    /// Builtin registry used by the CLI.
    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "ou1" => Some(Self::scalar_default()),
            "ou2" => Some(Self::hierarchical_default()),
            "quad" => Some(Self::quadratic_default()),
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.drift, Drift::Linear { .. })
    }

    #[inline]
    fn drift_into(&self, s: &[f64], out: &mut [f64]) {
        match &self.drift {
            Drift::Linear { a } => {
                for i in 0..self.dim {
                    let mut acc = 0.0;
                    for j in 0..self.dim {
                        acc -= a[(i, j)] * s[j];
                    }
                    out[i] = acc;
                }
            }
            Drift::QuadraticCoupling { t_rel, alpha, beta } => {
                out[0] = -s[0] / t_rel;
                out[1] = alpha * s[0] * s[0] - beta * s[1];
            }
        }
    }
}

/// Simulation parameters shared by the ensemble operations.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub dt: f64,
    pub burn_in: f64,
    pub n_trajectories: usize,
    pub seed: u64,
    /// Recording lags, strictly ascending, each a multiple of dt.
    pub lags: Vec<f64>,
}

impl SimConfig {
    pub fn new(model: &SdeModel, seed: u64) -> Self {
        Self {
            dt: 0.01,
            burn_in: 10.0 * model.slowest_timescale,
            n_trajectories: 10_000,
            seed,
            lags: Vec::new(),
        }
    }

    pub fn with_lags(mut self, lags: &[f64]) -> Self {
        self.lags = lags.to_vec();
        self
    }

    pub fn with_trajectories(mut self, n: usize) -> Self {
        self.n_trajectories = n;
        self
    }

    /// Validate against a model; returns warnings (non-fatal advisories).
    pub fn validate(&self, model: &SdeModel) -> Result<Vec<String>> {
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.burn_in < 0.0 {
            return Err(Error::InvalidConfig("negative burn-in".into()));
        }
        if self.n_trajectories == 0 {
            return Err(Error::InvalidConfig("need at least one trajectory".into()));
        }
        let mut prev = 0.0;
        for &lag in &self.lags {
            if !(lag > prev) {
                return Err(Error::InvalidConfig(
                    "lags must be strictly ascending and positive".into(),
                ));
            }
            let steps = (lag / self.dt).round();
            if (steps * self.dt - lag).abs() > 1e-9 * lag.max(1.0) {
                return Err(Error::InvalidConfig(format!(
                    "lag {lag} is not a multiple of dt {}",
                    self.dt
                )));
            }
            prev = lag;
        }
        let mut warnings = Vec::new();
        if self.dt > 0.05 * model.fastest_timescale {
            warnings.push(format!(
                "dt = {} exceeds 5% of the fastest timescale {}; discretization bias may be visible",
                self.dt, model.fastest_timescale
            ));
        }
        Ok(warnings)
    }
}

/// Flat row-major storage for n states of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBlock {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl StateBlock {
    pub fn with_capacity(dim: usize, n: usize) -> Self {
        Self {
            dim,
            data: Vec::with_capacity(dim * n),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.len()).map(|i| self.data[i * self.dim + j]).collect()
    }

    pub fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.data.extend_from_slice(row);
    }
}

/// A perturbation x0 -> x0 + epsilon of one coordinate at time zero.
#[derive(Debug, Clone, Copy)]
pub struct PerturbationSpec {
    pub variable: usize,
    pub epsilon: f64,
}

/// Recorded ensemble: initial states (t = 0 after burn-in) plus the state at
/// each requested lag, one row per trajectory.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub model: String,
    pub dim: usize,
    pub lags: Vec<f64>,
    pub initial: StateBlock,
    pub at_lag: Vec<StateBlock>,
    pub seed: u64,
    pub perturbation: Option<PerturbationSpec>,
    /// Samples per chain for pooled sampling (contiguous chain-major
    /// layout); None when every trajectory is independent.
    pub chain_len: Option<usize>,
}

impl Ensemble {
    pub fn len(&self) -> usize {
        self.initial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.initial.is_empty()
    }

    pub fn lag_index(&self, tau: f64) -> Option<usize> {
        self.lags
            .iter()
            .position(|&l| (l - tau).abs() <= 1e-9 * tau.abs().max(1.0))
    }

    /// CSV export: '#' parameter echo, then one row per trajectory with the
    /// initial state and the state at every recorded lag.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "# model = {}", self.model)?;
        writeln!(w, "# seed = {}", self.seed)?;
        if let Some(p) = &self.perturbation {
            writeln!(w, "# perturbation = s{}+{}", p.variable, p.epsilon)?;
        }
        let mut header = Vec::new();
        for j in 0..self.dim {
            header.push(format!("s{j}_t0"));
        }
        for lag in &self.lags {
            for j in 0..self.dim {
                header.push(format!("s{j}_tau{lag}"));
            }
        }
        writeln!(w, "{}", header.join(","))?;
        for i in 0..self.len() {
            let mut row: Vec<String> = self.initial.row(i).iter().map(|v| v.to_string()).collect();
            for block in &self.at_lag {
                row.extend(block.row(i).iter().map(|v| v.to_string()));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive an independent sub-seed for a named purpose, so distinct ensembles
/// inside one computation never share streams. SplitMix64 finalizer over the
/// base seed xored with an FNV-1a hash of the tag.
pub fn derive_seed(base: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct Stepper<'a> {
    model: &'a SdeModel,
    dt: f64,
    sqrt_dt: f64,
    drift: Vec<f64>,
    z: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(model: &'a SdeModel, dt: f64) -> Self {
        Self {
            model,
            dt,
            sqrt_dt: dt.sqrt(),
            drift: vec![0.0; model.dim()],
            z: vec![0.0; model.noise_factor.ncols()],
        }
    }

    #[inline]
    fn step(&mut self, state: &mut [f64], rng: &mut ChaCha12Rng) {
        self.model.drift_into(state, &mut self.drift);
        let r = self.z.len();
        for zj in self.z.iter_mut() {
            *zj = rng.sample(StandardNormal);
        }
        let l = &self.model.noise_factor;
        for i in 0..state.len() {
            let mut acc = state[i] + self.drift[i] * self.dt;
            for j in 0..r {
                acc += l[(i, j)] * self.z[j] * self.sqrt_dt;
            }
            state[i] = acc;
        }
    }

    fn advance(&mut self, state: &mut [f64], steps: usize, rng: &mut ChaCha12Rng) {
        for _ in 0..steps {
            self.step(state, rng);
        }
    }
}

fn check_finite(state: &[f64], trajectory: usize, time: f64) -> Result<()> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { trajectory, time });
    }
    Ok(())
}

fn lag_steps(cfg: &SimConfig) -> Vec<usize> {
    let mut steps = Vec::with_capacity(cfg.lags.len());
    let mut prev = 0.0;
    for &lag in &cfg.lags {
        steps.push(((lag - prev) / cfg.dt).round() as usize);
        prev = lag;
    }
    steps
}

fn assemble(
    model: &SdeModel,
    cfg: &SimConfig,
    rows: Vec<(Vec<f64>, Vec<Vec<f64>>)>,
    perturbation: Option<PerturbationSpec>,
    chain_len: Option<usize>,
) -> Ensemble {
    let n = rows.len();
    let mut initial = StateBlock::with_capacity(model.dim(), n);
    let mut at_lag: Vec<StateBlock> = cfg
        .lags
        .iter()
        .map(|_| StateBlock::with_capacity(model.dim(), n))
        .collect();
    for (init, lagged) in rows {
        initial.push_row(&init);
        for (k, row) in lagged.into_iter().enumerate() {
            at_lag[k].push_row(&row);
        }
    }
    Ensemble {
        model: model.name.clone(),
        dim: model.dim(),
        lags: cfg.lags.clone(),
        initial,
        at_lag,
        seed: cfg.seed,
        perturbation,
        chain_len,
    }
}

/// Independent stationary trajectories: each burns in from the origin for
/// cfg.burn_in, defines t = 0, and records the state at every lag.
pub fn simulate_stationary(model: &SdeModel, cfg: &SimConfig) -> Result<Ensemble> {
    cfg.validate(model)?;
    let burn_steps = (cfg.burn_in / cfg.dt).round() as usize;
    let steps = lag_steps(cfg);
    let rows: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> = (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut stepper = Stepper::new(model, cfg.dt);
            let mut state = vec![0.0; model.dim()];
            stepper.advance(&mut state, burn_steps, &mut rng);
            check_finite(&state, i, 0.0)?;
            let init = state.clone();
            let mut lagged = Vec::with_capacity(steps.len());
            for (k, &s) in steps.iter().enumerate() {
                stepper.advance(&mut state, s, &mut rng);
                check_finite(&state, i, cfg.lags[k])?;
                lagged.push(state.clone());
            }
            Ok((init, lagged))
        })
        .collect();
    let rows: Result<Vec<_>> = rows.into_iter().collect();
    Ok(assemble(model, cfg, rows?, None, None))
}

/// Conditional ensemble: every trajectory starts exactly at `initial_state`
/// (no burn-in) and records the state at every lag.
pub fn simulate_conditional(
    model: &SdeModel,
    initial_state: &[f64],
    cfg: &SimConfig,
) -> Result<Ensemble> {
    cfg.validate(model)?;
    if initial_state.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: initial_state.len(),
        });
    }
    if cfg.lags.is_empty() {
        return Err(Error::InvalidConfig(
            "conditional simulation needs at least one recording lag".into(),
        ));
    }
    let steps = lag_steps(cfg);
    let rows: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> = (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut stepper = Stepper::new(model, cfg.dt);
            let mut state = initial_state.to_vec();
            let init = state.clone();
            let mut lagged = Vec::with_capacity(steps.len());
            for (k, &s) in steps.iter().enumerate() {
                stepper.advance(&mut state, s, &mut rng);
                check_finite(&state, i, cfg.lags[k])?;
                lagged.push(state.clone());
            }
            Ok((init, lagged))
        })
        .collect();
    let rows: Result<Vec<_>> = rows.into_iter().collect();
    Ok(assemble(model, cfg, rows?, None, None))
}

/// Continue one trajectory from each provided initial state (no burn-in),
/// recording the state at every lag. Trajectory i draws from stream i of
/// cfg.seed; cfg.n_trajectories is ignored in favor of the state count.
pub fn simulate_from_states(
    model: &SdeModel,
    initial: &StateBlock,
    cfg: &SimConfig,
) -> Result<Ensemble> {
    cfg.validate(model)?;
    if initial.dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: initial.dim,
        });
    }
    if cfg.lags.is_empty() {
        return Err(Error::InvalidConfig(
            "continuation needs at least one recording lag".into(),
        ));
    }
    let steps = lag_steps(cfg);
    let rows: Vec<Result<(Vec<f64>, Vec<Vec<f64>>)>> = (0..initial.len())
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut stepper = Stepper::new(model, cfg.dt);
            let mut state = initial.row(i).to_vec();
            let init = state.clone();
            let mut lagged = Vec::with_capacity(steps.len());
            for (k, &s) in steps.iter().enumerate() {
                stepper.advance(&mut state, s, &mut rng);
                check_finite(&state, i, cfg.lags[k])?;
                lagged.push(state.clone());
            }
            Ok((init, lagged))
        })
        .collect();
    let rows: Result<Vec<_>> = rows.into_iter().collect();
    Ok(assemble(model, cfg, rows?, None, None))
}

/// Natural and perturbed ensembles with common random numbers: trajectory i
/// of both ensembles shares its stationary initial condition and its noise
/// path; the perturbed copy starts at x0 + epsilon. With epsilon = 0 the two
/// ensembles are bit-identical.
pub fn simulate_twin(
    model: &SdeModel,
    cfg: &SimConfig,
    pert: PerturbationSpec,
) -> Result<(Ensemble, Ensemble)> {
    cfg.validate(model)?;
    if pert.variable >= model.dim() {
        return Err(Error::InvalidConfig(format!(
            "perturbed variable {} out of range",
            pert.variable
        )));
    }
    if cfg.lags.is_empty() {
        return Err(Error::InvalidConfig(
            "twin simulation needs at least one recording lag".into(),
        ));
    }
    let burn_steps = (cfg.burn_in / cfg.dt).round() as usize;
    let steps = lag_steps(cfg);
    type TwinRow = ((Vec<f64>, Vec<Vec<f64>>), (Vec<f64>, Vec<Vec<f64>>));
    let rows: Vec<Result<TwinRow>> = (0..cfg.n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut stepper = Stepper::new(model, cfg.dt);
            let mut state = vec![0.0; model.dim()];
            stepper.advance(&mut state, burn_steps, &mut rng);
            check_finite(&state, i, 0.0)?;
            let mut twin_rng = rng.clone();
            let nat_init = state.clone();
            let mut pert_state = state.clone();
            pert_state[pert.variable] += pert.epsilon;
            let pert_init = pert_state.clone();
            let mut nat_lagged = Vec::with_capacity(steps.len());
            let mut pert_lagged = Vec::with_capacity(steps.len());
            for (k, &s) in steps.iter().enumerate() {
                stepper.advance(&mut state, s, &mut rng);
                check_finite(&state, i, cfg.lags[k])?;
                nat_lagged.push(state.clone());
            }
            let mut twin_stepper = Stepper::new(model, cfg.dt);
            for (k, &s) in steps.iter().enumerate() {
                twin_stepper.advance(&mut pert_state, s, &mut twin_rng);
                check_finite(&pert_state, i, cfg.lags[k])?;
                pert_lagged.push(pert_state.clone());
            }
            Ok(((nat_init, nat_lagged), (pert_init, pert_lagged)))
        })
        .collect();
    let mut nat_rows = Vec::with_capacity(cfg.n_trajectories);
    let mut pert_rows = Vec::with_capacity(cfg.n_trajectories);
    for r in rows {
        let (n, p) = r?;
        nat_rows.push(n);
        pert_rows.push(p);
    }
    let natural = assemble(model, cfg, nat_rows, None, None);
    let perturbed = assemble(model, cfg, pert_rows, Some(pert), None);
    Ok((natural, perturbed))
}

/// Pooled stationary sampling: a few long chains emit many samples each,
/// spaced `spacing` apart (default 3 slowest timescales) so successive
/// samples are weakly correlated. Burn-in is paid once per chain, which is
/// far cheaper than one burn-in per sample. Samples are chain-major and
/// contiguous; `chain_len` allows chain-disjoint partitioning downstream.
pub fn stationary_pool(
    model: &SdeModel,
    cfg: &SimConfig,
    chains: usize,
    spacing: Option<f64>,
) -> Result<Ensemble> {
    cfg.validate(model)?;
    if chains == 0 {
        return Err(Error::InvalidConfig("need at least one chain".into()));
    }
    let spacing = spacing.unwrap_or(3.0 * model.slowest_timescale);
    if !(spacing > 0.0) {
        return Err(Error::InvalidConfig("pool spacing must be positive".into()));
    }
    let total = cfg.n_trajectories;
    let per_chain = total.div_ceil(chains);
    let burn_steps = (cfg.burn_in / cfg.dt).round() as usize;
    let gap_steps = (spacing / cfg.dt).round().max(1.0) as usize;
    let steps = lag_steps(cfg);
    type ChainRows = Vec<(Vec<f64>, Vec<Vec<f64>>)>;
    let chain_rows: Vec<Result<ChainRows>> = (0..chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(cfg.seed, c as u64);
            let mut stepper = Stepper::new(model, cfg.dt);
            let mut state = vec![0.0; model.dim()];
            stepper.advance(&mut state, burn_steps, &mut rng);
            let mut rows = Vec::with_capacity(per_chain);
            for s_idx in 0..per_chain {
                check_finite(&state, c, s_idx as f64)?;
                let init = state.clone();
                let mut lagged = Vec::with_capacity(steps.len());
                // Walk a disposable copy through the lags, then advance the
                // chain itself by the decorrelation gap from the anchor.
                let mut probe = state.clone();
                let mut probe_rng = rng.clone();
                for (k, &s) in steps.iter().enumerate() {
                    stepper.advance(&mut probe, s, &mut probe_rng);
                    check_finite(&probe, c, cfg.lags[k])?;
                    lagged.push(probe.clone());
                }
                // Continue the chain along the probe's path up to the last
                // lag, then decorrelate: reuse the probe state and RNG so no
                // random numbers are wasted.
                state = probe;
                rng = probe_rng;
                stepper.advance(&mut state, gap_steps, &mut rng);
                rows.push((init, lagged));
            }
            Ok(rows)
        })
        .collect();
    let mut rows = Vec::with_capacity(chains * per_chain);
    for cr in chain_rows {
        rows.extend(cr?);
    }
    rows.truncate(total);
    Ok(assemble(model, cfg, rows, None, Some(per_chain)))
}

/// Single recorded path (for illustration output): states every
/// `record_every` steps from `initial` over `t_end`.
pub fn simulate_path(
    model: &SdeModel,
    initial: &[f64],
    t_end: f64,
    dt: f64,
    record_every: usize,
    seed: u64,
    stream: u64,
) -> Result<(Vec<f64>, StateBlock)> {
    if initial.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: initial.len(),
        });
    }
    let mut rng = stream_rng(seed, stream);
    let mut stepper = Stepper::new(model, dt);
    let mut state = initial.to_vec();
    let n_steps = (t_end / dt).round() as usize;
    let mut times = vec![0.0];
    let mut block = StateBlock::with_capacity(model.dim(), n_steps / record_every + 1);
    block.push_row(&state);
    for s in 1..=n_steps {
        stepper.step(&mut state, &mut rng);
        if s % record_every == 0 {
            check_finite(&state, 0, s as f64 * dt)?;
            times.push(s as f64 * dt);
            block.push_row(&state);
        }
    }
    Ok((times, block))
}

/// Underdamped Brownian particle in velocity form:
/// m dv = -lambda v dt + F(t) dt + sqrt(2 lambda T) dW,
/// with a rectangular force pulse F = f / pulse_duration on [0, pulse_duration].
#[derive(Debug, Clone, Copy)]
pub struct BrownianParams {
    pub mass: f64,
    pub friction: f64,
    pub temperature: f64,
    /// Total impulse delivered by the pulse.
    pub impulse: f64,
    pub pulse_duration: f64,
}

impl Default for BrownianParams {
    fn default() -> Self {
        Self {
            mass: 1.0,
            friction: 1.0,
            temperature: 1.0,
            impulse: 0.5,
            pulse_duration: 1e-3,
        }
    }
}

impl BrownianParams {
    pub fn validate(&self) -> Result<()> {
        if self.mass <= 0.0 || self.friction < 0.0 || self.temperature <= 0.0 {
            return Err(Error::InvalidConfig(
                "brownian particle needs mass > 0, friction >= 0, temperature > 0".into(),
            ));
        }
        if self.pulse_duration <= 0.0 {
            return Err(Error::InvalidConfig("pulse duration must be positive".into()));
        }
        Ok(())
    }

    /// Velocity kick delivered by the pulse: f / m.
    pub fn velocity_kick(&self) -> f64 {
        self.impulse / self.mass
    }
}

/// Per-trajectory record of the pulse experiment.
#[derive(Debug, Clone)]
pub struct BrownianRun {
    pub params: BrownianParams,
    pub seed: u64,
    pub v0: Vec<f64>,
    pub v_end: Vec<f64>,
    /// Work done by the external force on each trajectory.
    pub work: Vec<f64>,
}

impl BrownianRun {
    pub fn mean_work(&self) -> f64 {
        self.work.iter().sum::<f64>() / self.work.len() as f64
    }

    pub fn var_work(&self) -> f64 {
        let m = self.mean_work();
        self.work.iter().map(|w| (w - m).powi(2)).sum::<f64>() / (self.work.len() - 1) as f64
    }
}

/// Simulate the pulse: equilibrium initial velocities v0 ~ N(0, T/m), then
/// Euler-Maruyama over the pulse window with the work accumulated by the
/// trapezoid rule W += F (v_before + v_after)/2 dt.
pub fn simulate_brownian_particle(
    params: &BrownianParams,
    n_trajectories: usize,
    dt: f64,
    seed: u64,
) -> Result<BrownianRun> {
    params.validate()?;
    if !(dt > 0.0) || dt > params.pulse_duration {
        return Err(Error::InvalidConfig(format!(
            "dt must lie in (0, pulse_duration], got {dt}"
        )));
    }
    let n_steps = (params.pulse_duration / dt).round().max(1.0) as usize;
    let force = params.impulse / params.pulse_duration;
    let sigma_v0 = (params.temperature / params.mass).sqrt();
    let noise = (2.0 * params.friction * params.temperature).sqrt() / params.mass;
    let sqrt_dt = dt.sqrt();
    let rows: Vec<Result<(f64, f64, f64)>> = (0..n_trajectories)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let v0 = sigma_v0 * rng.sample::<f64, _>(StandardNormal);
            let mut v = v0;
            let mut work = 0.0;
            for _ in 0..n_steps {
                let v_before = v;
                let z: f64 = rng.sample(StandardNormal);
                v += (-params.friction * v + force) / params.mass * dt + noise * sqrt_dt * z;
                work += force * 0.5 * (v_before + v) * dt;
            }
            if !v.is_finite() || !work.is_finite() {
                return Err(Error::Divergence {
                    trajectory: i,
                    time: params.pulse_duration,
                });
            }
            Ok((v0, v, work))
        })
        .collect();
    let mut v0 = Vec::with_capacity(n_trajectories);
    let mut v_end = Vec::with_capacity(n_trajectories);
    let mut work = Vec::with_capacity(n_trajectories);
    for r in rows {
        let (a, b, w) = r?;
        v0.push(a);
        v_end.push(b);
        work.push(w);
    }
    Ok(BrownianRun {
        params: *params,
        seed,
        v0,
        v_end,
        work,
    })
}

/// Exact equilibrium velocity samples v ~ N(0, T/m) (for perturbation
/// divergence checks on the particle).
pub fn equilibrium_velocities(params: &BrownianParams, n: usize, seed: u64) -> Vec<f64> {
    let sigma = (params.temperature / params.mass).sqrt();
    (0..n)
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            sigma * rng.sample::<f64, _>(StandardNormal)
        })
        .collect()
}

/// Metadata echo for CSV/report headers.
pub fn config_echo(model: &SdeModel, cfg: &SimConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("model".into(), model.name.clone());
    m.insert("dt".into(), cfg.dt.to_string());
    m.insert("burn_in".into(), cfg.burn_in.to_string());
    m.insert("n_trajectories".into(), cfg.n_trajectories.to_string());
    m.insert("seed".into(), cfg.seed.to_string());
    m.insert(
        "lags".into(),
        cfg.lags
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(";"),
    );
    m
}
