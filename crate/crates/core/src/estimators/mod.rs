//! Nonparametric estimators over sample sets: k-NN Kullback-Leibler
//! divergence, k-NN conditional mutual information, Gaussian-kernel density
//! and regression, and a linear (Granger) transfer-entropy estimator.
//!
//! Everything here is deterministic for fixed input bytes: standard errors
//! come from contiguous-block resampling (no internal randomness), k-NN ties
//! break on point indices, and parallel loops reduce in input order.

pub mod kdtree;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sde::StateBlock;
use kdtree::{KdTree, Metric};

/// Number of contiguous blocks used for every resampled standard error.
pub const STDERR_BLOCKS: usize = 20;

/// Default neighbor count for the k-NN estimators.
pub const DEFAULT_K: usize = 5;

/// Flat row-major collection of d-dimensional points.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl SampleSet {
    pub fn from_rows(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim.max(1),
                got: data.len(),
            });
        }
        Ok(Self { dim, data })
    }

    pub fn from_column(col: &[f64]) -> Self {
        Self {
            dim: 1,
            data: col.to_vec(),
        }
    }

    /// Zip equal-length columns into rows.
    pub fn from_columns(cols: &[&[f64]]) -> Result<Self> {
        let dim = cols.len();
        if dim == 0 {
            return Err(Error::InvalidConfig("no columns given".into()));
        }
        let n = cols[0].len();
        if cols.iter().any(|c| c.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: cols.iter().map(|c| c.len()).max().unwrap_or(0),
            });
        }
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for c in cols {
                data.push(c[i]);
            }
        }
        Ok(Self { dim, data })
    }

    /// Select coordinates out of simulator output.
    pub fn from_state_block(block: &StateBlock, coords: &[usize]) -> Result<Self> {
        if coords.iter().any(|&c| c >= block.dim) {
            return Err(Error::InvalidConfig("coordinate out of range".into()));
        }
        let n = block.len();
        let mut data = Vec::with_capacity(n * coords.len());
        for i in 0..n {
            let row = block.row(i);
            for &c in coords {
                data.push(row[c]);
            }
        }
        Ok(Self {
            dim: coords.len(),
            data,
        })
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

    /// Concatenate coordinates of equal-length sets (joint space).
    pub fn join(parts: &[&SampleSet]) -> Result<Self> {
        let n = parts
            .first()
            .ok_or_else(|| Error::InvalidConfig("no parts given".into()))?
            .len();
        if parts.iter().any(|p| p.len() != n) {
            return Err(Error::Estimator("joint sets must have equal length".into()));
        }
        let dim: usize = parts.iter().map(|p| p.dim).sum();
        let mut data = Vec::with_capacity(n * dim);
        for i in 0..n {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self { dim, data })
    }

    fn column_scales(&self) -> Vec<f64> {
        let n = self.len() as f64;
        (0..self.dim)
            .map(|j| {
                let mean = (0..self.len()).map(|i| self.row(i)[j]).sum::<f64>() / n;
                let var = (0..self.len())
                    .map(|i| (self.row(i)[j] - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let sd = var.sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect()
    }
}

/// Divergence (or information) estimate with a resampled standard error.
#[derive(Debug, Clone, Serialize)]
pub struct KlEstimate {
    pub value: f64,
    pub stderr: f64,
    pub method: String,
    pub k: usize,
    pub n_p: usize,
    pub n_q: usize,
    /// True when deterministic jitter was applied to break exact duplicates.
    pub jittered: bool,
}

fn hash01(tag: u64, i: u64, j: u64) -> f64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in [tag, i, j] {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn row_bits(row: &[f64]) -> Vec<u64> {
    row.iter().map(|v| v.to_bits()).collect()
}

/// Count within-P duplicate copies and P-rows that coincide with a Q-row;
/// those are exactly the configurations that zero a k-NN radius.
fn duplicate_count(p: &SampleSet, q: Option<&SampleSet>) -> usize {
    use std::collections::BTreeMap;
    let mut seen: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
    for i in 0..p.len() {
        *seen.entry(row_bits(p.row(i))).or_insert(0) += 1;
    }
    let mut dup: usize = seen.values().map(|&c| c - 1).sum();
    if let Some(q) = q {
        use std::collections::BTreeSet;
        let qset: BTreeSet<Vec<u64>> = (0..q.len()).map(|i| row_bits(q.row(i))).collect();
        dup += (0..p.len())
            .filter(|&i| qset.contains(&row_bits(p.row(i))))
            .count();
    }
    dup
}

/// Deterministic additive jitter of relative size 1e-12 per column.
fn jitter(set: &SampleSet, scales: &[f64], tag: u64) -> SampleSet {
    let mut out = set.clone();
    let d = set.dim;
    for i in 0..set.len() {
        for j in 0..d {
            let u = hash01(tag, i as u64, j as u64) - 0.5;
            out.data[i * d + j] += 2.0e-12 * scales[j] * u;
        }
    }
    out
}

fn block_bounds(n: usize, blocks: usize) -> Vec<(usize, usize)> {
    (0..blocks)
        .map(|b| (b * n / blocks, (b + 1) * n / blocks))
        .collect()
}

/// Kullback-Leibler divergence KL(P || Q) from samples, by the ratio of
/// k-th nearest-neighbor radii:
///   D = (d/n) sum_i ln(nu_k(i)/rho_k(i)) + ln(m/(n-1)),
/// rho_k within P (self excluded), nu_k to Q, Euclidean metric. The raw
/// value is reported unclamped; finite-sample estimates of small
/// divergences may be negative. The standard error is the spread of
/// estimates over 20 contiguous subsample folds of P (each against the full
/// Q), scaled by 1/sqrt(20); contiguous folds respect block structure when
/// the input comes from correlated chains.
pub fn kl_knn(p: &SampleSet, q: &SampleSet, k: usize) -> Result<KlEstimate> {
    if p.dim != q.dim {
        return Err(Error::DimensionMismatch {
            expected: p.dim,
            got: q.dim,
        });
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let (n, m) = (p.len(), q.len());
    if n < (k + 1).max(STDERR_BLOCKS * 2) || m < k + 1 {
        return Err(Error::Estimator(format!(
            "need at least {} P-samples and {} Q-samples for k = {k}",
            (k + 1).max(STDERR_BLOCKS * 2),
            k + 1
        )));
    }

    let dup = duplicate_count(p, Some(q));
    let jittered = dup > 0;
    if dup * 100 > n {
        return Err(Error::Estimator(format!(
            "{dup} duplicate points out of {n} exceed the 1% jitter budget"
        )));
    }
    let (pj, qj);
    let (p, q) = if jittered {
        let mut scales = p.column_scales();
        let qs = q.column_scales();
        for (s, t) in scales.iter_mut().zip(&qs) {
            *s = s.max(*t);
        }
        pj = jitter(p, &scales, 1);
        qj = jitter(q, &scales, 2);
        (&pj, &qj)
    } else {
        (p, q)
    };

    let q_tree = KdTree::build(&q.data, q.dim, Metric::Euclidean)?;
    let value = kl_knn_core(p, 0, n, &q_tree, m, k)?;

    let folds = block_bounds(n, STDERR_BLOCKS);
    let fold_vals: Vec<Result<f64>> = folds
        .par_iter()
        .map(|&(lo, hi)| kl_knn_core(p, lo, hi, &q_tree, m, k))
        .collect();
    let mut vals = Vec::with_capacity(STDERR_BLOCKS);
    for v in fold_vals {
        vals.push(v?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
    let stderr = (var / vals.len() as f64).sqrt();

    Ok(KlEstimate {
        value,
        stderr,
        method: format!("knn_kl k={k}"),
        k,
        n_p: n,
        n_q: m,
        jittered,
    })
}

/// Core estimator over the P-rows [lo, hi) of `p`, against the full Q tree.
fn kl_knn_core(
    p: &SampleSet,
    lo: usize,
    hi: usize,
    q_tree: &KdTree,
    m: usize,
    k: usize,
) -> Result<f64> {
    let n = hi - lo;
    if n < k + 1 {
        return Err(Error::Estimator("fold too small for k".into()));
    }
    let sub = &p.data[lo * p.dim..hi * p.dim];
    let p_tree = KdTree::build(sub, p.dim, Metric::Euclidean)?;
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = &sub[i * p.dim..(i + 1) * p.dim];
            let rho = p_tree.kth_distance(x, k, Some(i as u32));
            let nu = q_tree.kth_distance(x, k, None);
            if rho <= 0.0 || nu <= 0.0 {
                return f64::NAN;
            }
            (nu / rho).ln()
        })
        .collect();
    if terms.iter().any(|t| t.is_nan()) {
        return Err(Error::Estimator(
            "zero k-NN radius survived jitter; inputs contain heavy duplication".into(),
        ));
    }
    let sum: f64 = terms.iter().sum();
    Ok(p.dim as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln())
}

/// Conditional mutual information I(X;Y | Z) by neighbor counting:
///   I = psi(k) + < psi(n_z+1) - psi(n_xz+1) - psi(n_yz+1) >,
/// with the k-th neighbor radius taken in the joint (X,Y,Z) space under the
/// Chebyshev metric and strict-inequality counts in the marginal spaces.
/// Standard error: block spread of the per-sample terms over 20 contiguous
/// blocks.
pub fn knn_cmi(x: &SampleSet, y: &SampleSet, z: &SampleSet, k: usize) -> Result<KlEstimate> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let joint = SampleSet::join(&[x, y, z])?;
    let n = joint.len();
    if n < (k + 1).max(STDERR_BLOCKS * 2) {
        return Err(Error::Estimator(format!(
            "need at least {} samples for k = {k}",
            (k + 1).max(STDERR_BLOCKS * 2)
        )));
    }
    let dup = duplicate_count(&joint, None);
    let jittered = dup > 0;
    if dup * 100 > n {
        return Err(Error::Estimator(format!(
            "{dup} duplicate joint points out of {n} exceed the 1% jitter budget"
        )));
    }
    let joint = if jittered {
        let scales = joint.column_scales();
        jitter(&joint, &scales, 3)
    } else {
        joint
    };
    // Slice the (possibly jittered) joint back into marginals so that all
    // spaces see identical coordinates.
    let cols: Vec<Vec<f64>> = (0..joint.dim).map(|j| joint.column(j)).collect();
    let take = |range: std::ops::Range<usize>| -> Result<SampleSet> {
        let slices: Vec<&[f64]> = cols[range].iter().map(|c| c.as_slice()).collect();
        SampleSet::from_columns(&slices)
    };
    let xz = {
        let mut slices: Vec<&[f64]> = cols[0..x.dim].iter().map(|c| c.as_slice()).collect();
        slices.extend(cols[x.dim + y.dim..].iter().map(|c| c.as_slice()));
        SampleSet::from_columns(&slices)?
    };
    let yz = take(x.dim..joint.dim)?;
    let zz = take(x.dim + y.dim..joint.dim)?;

    let joint_tree = KdTree::build(&joint.data, joint.dim, Metric::Chebyshev)?;
    let xz_tree = KdTree::build(&xz.data, xz.dim, Metric::Chebyshev)?;
    let yz_tree = KdTree::build(&yz.data, yz.dim, Metric::Chebyshev)?;
    let z_tree = KdTree::build(&zz.data, zz.dim, Metric::Chebyshev)?;

    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let eps = joint_tree.kth_distance(joint.row(i), k, Some(i as u32));
            if eps <= 0.0 {
                return f64::NAN;
            }
            let n_xz = xz_tree.count_within(xz.row(i), eps, Some(i as u32));
            let n_yz = yz_tree.count_within(yz.row(i), eps, Some(i as u32));
            let n_z = z_tree.count_within(zz.row(i), eps, Some(i as u32));
            digamma(k as f64) + digamma(n_z as f64 + 1.0)
                - digamma(n_xz as f64 + 1.0)
                - digamma(n_yz as f64 + 1.0)
        })
        .collect();
    if terms.iter().any(|t| t.is_nan()) {
        return Err(Error::Estimator(
            "zero joint k-NN radius survived jitter".into(),
        ));
    }
    let value = terms.iter().sum::<f64>() / n as f64;
    let blocks = block_bounds(n, STDERR_BLOCKS);
    let means: Vec<f64> = blocks
        .iter()
        .map(|&(lo, hi)| terms[lo..hi].iter().sum::<f64>() / (hi - lo) as f64)
        .collect();
    let bm = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    let stderr = (var / means.len() as f64).sqrt();

    Ok(KlEstimate {
        value,
        stderr,
        method: format!("knn_cmi k={k}"),
        k,
        n_p: n,
        n_q: n,
        jittered,
    })
}

/// Mutual information I(X;Y) by the joint k-NN radius method:
/// I = psi(k) + psi(n) - < psi(n_x + 1) + psi(n_y + 1) >,
/// with n_x, n_y counted strictly inside the joint kth-neighbor radius.
/// Same duplicate/jitter policy and blocked standard error as `knn_cmi`.
pub fn knn_mi(x: &SampleSet, y: &SampleSet, k: usize) -> Result<KlEstimate> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let joint = SampleSet::join(&[x, y])?;
    let n = joint.len();
    if n < (k + 1).max(STDERR_BLOCKS * 2) {
        return Err(Error::Estimator(format!(
            "need at least {} samples for k = {k}",
            (k + 1).max(STDERR_BLOCKS * 2)
        )));
    }
    let dup = duplicate_count(&joint, None);
    let jittered = dup > 0;
    if dup * 100 > n {
        return Err(Error::Estimator(format!(
            "{dup} duplicate joint points out of {n} exceed the 1% jitter budget"
        )));
    }
    let joint = if jittered {
        let scales = joint.column_scales();
        jitter(&joint, &scales, 4)
    } else {
        joint
    };
    let cols: Vec<Vec<f64>> = (0..joint.dim).map(|j| joint.column(j)).collect();
    let xs = {
        let slices: Vec<&[f64]> = cols[0..x.dim].iter().map(|c| c.as_slice()).collect();
        SampleSet::from_columns(&slices)?
    };
    let ys = {
        let slices: Vec<&[f64]> = cols[x.dim..].iter().map(|c| c.as_slice()).collect();
        SampleSet::from_columns(&slices)?
    };

    let joint_tree = KdTree::build(&joint.data, joint.dim, Metric::Chebyshev)?;
    let x_tree = KdTree::build(&xs.data, xs.dim, Metric::Chebyshev)?;
    let y_tree = KdTree::build(&ys.data, ys.dim, Metric::Chebyshev)?;

    let psi_k_n = digamma(k as f64) + digamma(n as f64);
    let terms: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let eps = joint_tree.kth_distance(joint.row(i), k, Some(i as u32));
            if eps <= 0.0 {
                return f64::NAN;
            }
            let n_x = x_tree.count_within(xs.row(i), eps, Some(i as u32));
            let n_y = y_tree.count_within(ys.row(i), eps, Some(i as u32));
            psi_k_n - digamma(n_x as f64 + 1.0) - digamma(n_y as f64 + 1.0)
        })
        .collect();
    if terms.iter().any(|t| t.is_nan()) {
        return Err(Error::Estimator(
            "zero joint k-NN radius survived jitter".into(),
        ));
    }
    let value = terms.iter().sum::<f64>() / n as f64;
    let blocks = block_bounds(n, STDERR_BLOCKS);
    let means: Vec<f64> = blocks
        .iter()
        .map(|&(lo, hi)| terms[lo..hi].iter().sum::<f64>() / (hi - lo) as f64)
        .collect();
    let bm = means.iter().sum::<f64>() / means.len() as f64;
    let var = means.iter().map(|v| (v - bm).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
    let stderr = (var / means.len() as f64).sqrt();

    Ok(KlEstimate {
        value,
        stderr,
        method: format!("knn_mi k={k}"),
        k,
        n_p: n,
        n_q: n,
        jittered,
    })
}

/// Digamma function for positive arguments: upward recurrence into the
/// asymptotic region, then the Stirling series.
pub fn digamma(mut x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let mut acc = 0.0;
    // Recurse upward until the truncated Stirling tail is below 1e-12.
    while x < 12.0 {
        acc -= 1.0 / x;
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    acc + x.ln() - 0.5 * inv
        - inv2 * (1.0 / 12.0 - inv2 * (1.0 / 120.0 - inv2 * (1.0 / 252.0 - inv2 / 240.0)))
}

/// Per-dimension Silverman bandwidths: h_j = sigma_j (4/((d+2) n))^(1/(d+4)).
pub fn silverman_bandwidth(samples: &SampleSet) -> Result<Vec<f64>> {
    let n = samples.len();
    if n < 30 {
        return Err(Error::Estimator("need at least 30 samples for a density".into()));
    }
    let d = samples.dim as f64;
    let factor = (4.0 / ((d + 2.0) * n as f64)).powf(1.0 / (d + 4.0));
    let mut out = Vec::with_capacity(samples.dim);
    for j in 0..samples.dim {
        let col = samples.column(j);
        let mean = col.iter().sum::<f64>() / n as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        if !(var > 0.0) {
            return Err(Error::Estimator(format!(
                "dimension {j} has zero variance; no bandwidth exists"
            )));
        }
        out.push(var.sqrt() * factor);
    }
    Ok(out)
}

/// Gaussian product-kernel density estimate at each eval point.
pub fn kde_density(samples: &SampleSet, eval: &SampleSet) -> Result<Vec<f64>> {
    if samples.dim != eval.dim {
        return Err(Error::DimensionMismatch {
            expected: samples.dim,
            got: eval.dim,
        });
    }
    let h = silverman_bandwidth(samples)?;
    let d = samples.dim;
    let n = samples.len();
    let norm = 1.0
        / (n as f64
            * h.iter().product::<f64>()
            * (2.0 * std::f64::consts::PI).powf(d as f64 / 2.0));
    let vals: Vec<f64> = (0..eval.len())
        .into_par_iter()
        .map(|e| {
            let t = eval.row(e);
            let mut sum = 0.0;
            for i in 0..n {
                let s = samples.row(i);
                let mut u2 = 0.0;
                for j in 0..d {
                    let u = (t[j] - s[j]) / h[j];
                    u2 += u * u;
                }
                sum += (-0.5 * u2).exp();
            }
            sum * norm
        })
        .collect();
    Ok(vals)
}

/// d/dx_axis of ln(density) at each eval point, from the same kernel
/// estimate. Errors when an eval point carries essentially no kernel mass.
pub fn kde_score(samples: &SampleSet, eval: &SampleSet, axis: usize) -> Result<Vec<f64>> {
    if samples.dim != eval.dim {
        return Err(Error::DimensionMismatch {
            expected: samples.dim,
            got: eval.dim,
        });
    }
    if axis >= samples.dim {
        return Err(Error::InvalidConfig("score axis out of range".into()));
    }
    let h = silverman_bandwidth(samples)?;
    let d = samples.dim;
    let n = samples.len();
    let scores: Vec<f64> = (0..eval.len())
        .into_par_iter()
        .map(|e| {
            let t = eval.row(e);
            let mut wsum = 0.0;
            let mut grad = 0.0;
            for i in 0..n {
                let s = samples.row(i);
                let mut u2 = 0.0;
                for j in 0..d {
                    let u = (t[j] - s[j]) / h[j];
                    u2 += u * u;
                }
                let w = (-0.5 * u2).exp();
                wsum += w;
                grad += w * (s[axis] - t[axis]);
            }
            if wsum < 1e-12 {
                f64::NAN
            } else {
                grad / (wsum * h[axis] * h[axis])
            }
        })
        .collect();
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Estimator(
            "score evaluation in a region with no kernel mass".into(),
        ));
    }
    Ok(scores)
}

/// Kernel-regression output; `extrapolated[i]` marks eval points carrying
/// fewer than ~5 effective neighbors, where the value is unreliable.
#[derive(Debug, Clone)]
pub struct Regression {
    pub values: Vec<f64>,
    pub extrapolated: Vec<bool>,
}

/// Nadaraya-Watson conditional expectation <response | x = eval point> with
/// the Silverman bandwidth. At eval points with zero kernel mass the global
/// response mean is reported (and flagged).
pub fn kernel_regression(x: &SampleSet, response: &[f64], eval: &SampleSet) -> Result<Regression> {
    if x.len() != response.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: response.len(),
        });
    }
    if x.dim != eval.dim {
        return Err(Error::DimensionMismatch {
            expected: x.dim,
            got: eval.dim,
        });
    }
    if x.len() < 100 {
        return Err(Error::Estimator("need at least 100 samples for regression".into()));
    }
    let h = silverman_bandwidth(x)?;
    let d = x.dim;
    let n = x.len();
    let fallback = response.iter().sum::<f64>() / n as f64;
    let out: Vec<(f64, bool)> = (0..eval.len())
        .into_par_iter()
        .map(|e| {
            let t = eval.row(e);
            let mut wsum = 0.0;
            let mut vsum = 0.0;
            for i in 0..n {
                let s = x.row(i);
                let mut u2 = 0.0;
                for j in 0..d {
                    let u = (t[j] - s[j]) / h[j];
                    u2 += u * u;
                }
                let w = (-0.5 * u2).exp();
                wsum += w;
                vsum += w * response[i];
            }
            // Fewer than ~5 effective unit-weight neighbors: extrapolation.
            let extrapolated = wsum < 5.0;
            if wsum <= 0.0 {
                (fallback, true)
            } else {
                (vsum / wsum, extrapolated)
            }
        })
        .collect();
    Ok(Regression {
        values: out.iter().map(|&(v, _)| v).collect(),
        extrapolated: out.iter().map(|&(_, f)| f).collect(),
    })
}

/// Transfer entropy by nested least squares (Granger): regress the target
/// on all predictors plus an intercept, then drop `drop_col`, and report
/// T = ln(sigma_reduced / sigma_full). Valid as a transfer-entropy estimator
/// for linear-Gaussian data only; the method string says so. Standard error
/// by delete-one-block jackknife over 20 contiguous blocks, computed from
/// downdated moment matrices.
pub fn granger_te(predictors: &SampleSet, target: &[f64], drop_col: usize) -> Result<KlEstimate> {
    use nalgebra::{Cholesky, DMatrix, DVector};
    let n = predictors.len();
    let d = predictors.dim;
    if target.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: target.len(),
        });
    }
    if drop_col >= d {
        return Err(Error::InvalidConfig("drop column out of range".into()));
    }
    if n < 1000 {
        return Err(Error::Estimator("need at least 1000 samples for regression".into()));
    }
    let p = d + 1; // intercept first
    let phi = |i: usize, out: &mut Vec<f64>| {
        out.clear();
        out.push(1.0);
        out.extend_from_slice(predictors.row(i));
    };

    // Per-block moment accumulations; the full moments are their sum, and
    // each jackknife replicate is a cheap downdate.
    let bounds = block_bounds(n, STDERR_BLOCKS);
    let mut block_m = vec![DMatrix::<f64>::zeros(p, p); STDERR_BLOCKS];
    let mut block_v = vec![DVector::<f64>::zeros(p); STDERR_BLOCKS];
    let mut block_s = vec![0.0f64; STDERR_BLOCKS];
    let mut row = Vec::with_capacity(p);
    for (b, &(lo, hi)) in bounds.iter().enumerate() {
        for i in lo..hi {
            phi(i, &mut row);
            for a in 0..p {
                for c in a..p {
                    block_m[b][(a, c)] += row[a] * row[c];
                }
                block_v[b][a] += row[a] * target[i];
            }
            block_s[b] += target[i] * target[i];
        }
        for a in 0..p {
            for c in 0..a {
                block_m[b][(a, c)] = block_m[b][(c, a)];
            }
        }
    }
    let mut m_full = DMatrix::<f64>::zeros(p, p);
    let mut v_full = DVector::<f64>::zeros(p);
    let mut s_full = 0.0;
    for b in 0..STDERR_BLOCKS {
        m_full += &block_m[b];
        v_full += &block_v[b];
        s_full += block_s[b];
    }

    let keep: Vec<usize> = (0..p).filter(|&c| c != drop_col + 1).collect();
    let te_from = |m: &DMatrix<f64>, v: &DVector<f64>, s: f64| -> Result<f64> {
        let rss = |idx: &[usize]| -> Result<f64> {
            let mm = DMatrix::from_fn(idx.len(), idx.len(), |a, c| m[(idx[a], idx[c])]);
            let vv = DVector::from_fn(idx.len(), |a, _| v[idx[a]]);
            let chol = Cholesky::new(mm)
                .ok_or_else(|| Error::Estimator("rank-deficient design matrix".into()))?;
            let beta = chol.solve(&vv);
            Ok(s - vv.dot(&beta))
        };
        let all: Vec<usize> = (0..p).collect();
        let rss_full = rss(&all)?;
        let rss_red = rss(&keep)?;
        if rss_full <= 0.0 || rss_red <= 0.0 {
            return Err(Error::Estimator("degenerate residual in regression".into()));
        }
        Ok(0.5 * (rss_red / rss_full).ln())
    };

    let value = te_from(&m_full, &v_full, s_full)?;
    let mut reps = Vec::with_capacity(STDERR_BLOCKS);
    for b in 0..STDERR_BLOCKS {
        let m = &m_full - &block_m[b];
        let v = &v_full - &block_v[b];
        let s = s_full - block_s[b];
        reps.push(te_from(&m, &v, s)?);
    }
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let bf = reps.len() as f64;
    let var = reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() * (bf - 1.0) / bf;
    let stderr = var.sqrt();

    Ok(KlEstimate {
        value,
        stderr,
        method: "granger (linear-only)".into(),
        k: 0,
        n_p: n,
        n_q: n,
        jittered: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss::{gaussian_kl, lagged_joint, GaussianDist, LinearModel};
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn normal_samples(n: usize, mean: f64, var: f64, seed: u64) -> SampleSet {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let sd = var.sqrt();
        SampleSet::from_column(
            &(0..n)
                .map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<_>>(),
        )
    }

    #[test]
    fn digamma_reference_values() {
        // psi(1) = -gamma, psi(1/2) = -gamma - 2 ln 2, psi(5) = H_4 - gamma.
        assert!((digamma(1.0) + 0.5772156649015329).abs() < 1e-12);
        assert!((digamma(0.5) + 1.9635100260214235).abs() < 1e-12);
        assert!((digamma(5.0) - 1.5061176684318005).abs() < 1e-12);
    }

    #[test]
    fn kl_same_distribution_is_zero() {
        let p = normal_samples(10_000, 0.0, 1.0, 1);
        let q = normal_samples(10_000, 0.0, 1.0, 2);
        let e = kl_knn(&p, &q, DEFAULT_K).unwrap();
        assert!(
            e.value.abs() < 3.0 * e.stderr,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn kl_mean_shift_matches_closed_form() {
        // KL(N(0.25, 0.5) || N(0, 0.5)) = 0.25^2 / (2 * 0.5) = 0.0625.
        let p = normal_samples(100_000, 0.25, 0.5, 3);
        let q = normal_samples(100_000, 0.0, 0.5, 4);
        let e = kl_knn(&p, &q, DEFAULT_K).unwrap();
        assert!(
            (e.value - 0.0625).abs() < 3.0 * e.stderr,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
        assert!(e.stderr < 0.1 * 0.0625, "stderr {} too large", e.stderr);
    }

    #[test]
    fn kl_variance_ratio_matches_closed_form() {
        // KL(N(0,2) || N(0,1)) = (2 - 1 - ln 2)/2 = 0.153426.
        let truth = 0.5 * (2.0 - 1.0 - 2.0f64.ln());
        let p = normal_samples(100_000, 0.0, 2.0, 5);
        let q = normal_samples(100_000, 0.0, 1.0, 6);
        let e = kl_knn(&p, &q, DEFAULT_K).unwrap();
        assert!(
            (e.value - truth).abs() < 3.0 * e.stderr,
            "value {} stderr {} truth {}",
            e.value,
            e.stderr,
            truth
        );
        assert!(e.stderr < 0.1 * truth);
    }

    #[test]
    fn kl_bias_shrinks_with_sample_size() {
        let truth = 0.5 * (2.0 - 1.0 - 2.0f64.ln());
        let mut errs = Vec::new();
        for &n in &[1_000usize, 10_000, 100_000] {
            let mut acc = 0.0;
            let reps = 8;
            for r in 0..reps {
                let p = normal_samples(n, 0.0, 2.0, 100 + 2 * r);
                let q = normal_samples(n, 0.0, 1.0, 101 + 2 * r);
                acc += (kl_knn(&p, &q, DEFAULT_K).unwrap().value - truth).abs();
            }
            errs.push(acc / reps as f64);
        }
        assert!(
            errs[0] > errs[1] && errs[1] > errs[2],
            "errors not shrinking: {errs:?}"
        );
    }

    #[test]
    fn kl_invariant_under_common_affine_map() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 20_000;
        let draw = |rng: &mut ChaCha12Rng, shift: f64| -> Vec<f64> {
            let mut out = Vec::with_capacity(2 * n);
            for _ in 0..n {
                let a: f64 = rng.sample(StandardNormal);
                let b: f64 = rng.sample(StandardNormal);
                out.push(a + shift);
                out.push(0.6 * a + 0.8 * b);
            }
            out
        };
        let p = SampleSet::from_rows(2, draw(&mut rng, 0.4)).unwrap();
        let q = SampleSet::from_rows(2, draw(&mut rng, 0.0)).unwrap();
        let before = kl_knn(&p, &q, DEFAULT_K).unwrap();
        // Common invertible affine map: shear, scale, shift.
        let map = |s: &SampleSet| {
            let mut t = s.clone();
            for i in 0..t.len() {
                let x = t.data[2 * i];
                let y = t.data[2 * i + 1];
                t.data[2 * i] = 2.0 * x + 0.5 * y - 1.0;
                t.data[2 * i + 1] = 0.7 * y + 3.0;
            }
            t
        };
        let after = kl_knn(&map(&p), &map(&q), DEFAULT_K).unwrap();
        let combined = (before.stderr.powi(2) + after.stderr.powi(2)).sqrt();
        assert!(
            (before.value - after.value).abs() < 3.0 * combined,
            "before {} after {} combined stderr {}",
            before.value,
            after.value,
            combined
        );
    }

    #[test]
    fn kl_jitters_sparse_duplicates_and_rejects_heavy_ones() {
        let mut p = normal_samples(1_000, 0.0, 1.0, 8);
        // Two exact duplicates: 0.2% of the set, inside the jitter budget.
        p.data[1] = p.data[0];
        p.data[2] = p.data[0];
        let q = normal_samples(1_000, 0.0, 1.0, 9);
        let e = kl_knn(&p, &q, DEFAULT_K).unwrap();
        assert!(e.jittered);
        assert!(e.value.is_finite());

        let mut heavy = normal_samples(1_000, 0.0, 1.0, 10);
        for i in 0..100 {
            heavy.data[i] = 1.5;
        }
        assert!(kl_knn(&heavy, &q, DEFAULT_K).is_err());
    }

    #[test]
    fn cmi_zero_for_conditionally_independent_triplet() {
        // X = Z + noise, Y = Z + independent noise: I(X;Y|Z) = 0.
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let n = 20_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            xs.push(z + rng.sample::<f64, _>(StandardNormal));
            ys.push(z + rng.sample::<f64, _>(StandardNormal));
            zs.push(z);
        }
        let e = knn_cmi(
            &SampleSet::from_column(&xs),
            &SampleSet::from_column(&ys),
            &SampleSet::from_column(&zs),
            DEFAULT_K,
        )
        .unwrap();
        assert!(
            e.value.abs() < 3.0 * e.stderr + 0.01,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn cmi_matches_gaussian_closed_form() {
        // X = Z + U, Y = Z + 0.8 U + V with U, V, Z independent standard
        // normals: I(X;Y|Z) = -ln(1 - rho^2)/2 with rho^2 = 0.64/1.64.
        let truth = -0.5 * (1.0f64 - 0.64 / 1.64).ln();
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let n = 50_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            xs.push(z + u);
            ys.push(z + 0.8 * u + v);
            zs.push(z);
        }
        let e = knn_cmi(
            &SampleSet::from_column(&xs),
            &SampleSet::from_column(&ys),
            &SampleSet::from_column(&zs),
            DEFAULT_K,
        )
        .unwrap();
        assert!(
            (e.value - truth).abs() < 0.02,
            "value {} truth {truth}",
            e.value
        );
    }

    #[test]
    fn mi_zero_for_independent_pair() {
        let xs = normal_samples(20_000, 0.0, 1.0, 14);
        let ys = normal_samples(20_000, 0.5, 2.0, 15);
        let e = knn_mi(&xs, &ys, DEFAULT_K).unwrap();
        assert!(
            e.value.abs() < 3.0 * e.stderr + 0.01,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn mi_matches_gaussian_closed_form() {
        // (X, Y) jointly normal with correlation rho: I = -ln(1 - rho^2)/2.
        let rho: f64 = 0.6;
        let truth = -0.5 * (1.0 - rho * rho).ln();
        let mut rng = ChaCha12Rng::seed_from_u64(16);
        let n = 50_000;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.sample(StandardNormal);
            let v: f64 = rng.sample(StandardNormal);
            xs.push(u);
            ys.push(rho * u + (1.0 - rho * rho).sqrt() * v);
        }
        let e = knn_mi(
            &SampleSet::from_column(&xs),
            &SampleSet::from_column(&ys),
            DEFAULT_K,
        )
        .unwrap();
        assert!(
            (e.value - truth).abs() < 0.02,
            "value {} truth {truth}",
            e.value
        );
    }

    #[test]
    fn kde_standard_normal_at_origin() {
        let s = normal_samples(100_000, 0.0, 1.0, 13);
        let eval = SampleSet::from_column(&[0.0]);
        let d = kde_density(&s, &eval).unwrap()[0];
        let truth = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((d / truth - 1.0).abs() < 0.05, "kde {d} vs {truth}");
    }

    #[test]
    fn kde_integrates_to_one() {
        let s = normal_samples(20_000, 0.0, 1.0, 14);
        let grid: Vec<f64> = (0..=400).map(|i| -5.0 + i as f64 * 0.025).collect();
        let vals = kde_density(&s, &SampleSet::from_column(&grid)).unwrap();
        let mut integral = 0.0;
        for i in 1..grid.len() {
            integral += 0.5 * (vals[i] + vals[i - 1]) * (grid[i] - grid[i - 1]);
        }
        assert!((integral - 1.0).abs() < 0.02, "integral {integral}");
    }

    #[test]
    fn kde_peaks_at_tight_cluster() {
        let mut rng = ChaCha12Rng::seed_from_u64(15);
        let pts: Vec<f64> = (0..500)
            .map(|_| 2.0 + 1e-3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let s = SampleSet::from_column(&pts);
        let eval = SampleSet::from_column(&[1.0, 2.0, 3.0]);
        let v = kde_density(&s, &eval).unwrap();
        assert!(v[1] > v[0] && v[1] > v[2]);
    }

    #[test]
    fn kde_rejects_zero_variance_dimension() {
        let s = SampleSet::from_column(&vec![1.0; 100]);
        assert!(kde_density(&s, &SampleSet::from_column(&[1.0])).is_err());
    }

    #[test]
    fn regression_of_constant_is_constant() {
        let x = normal_samples(1_000, 0.0, 1.0, 16);
        let resp = vec![std::f64::consts::E; 1_000];
        let eval = SampleSet::from_column(&[-1.0, 0.0, 1.0]);
        let r = kernel_regression(&x, &resp, &eval).unwrap();
        for v in r.values {
            assert!((v - std::f64::consts::E).abs() < 1e-12);
        }
    }

    #[test]
    fn regression_recovers_linear_slope() {
        // y = 2x + noise; compare the (f(0.5)-f(-0.5)) difference quotient
        // against the least-squares slope as an independent oracle.
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 2.0 * x + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let ols = sxy / sxx;
        let x = SampleSet::from_column(&xs);
        let eval = SampleSet::from_column(&[-0.5, 0.5]);
        let r = kernel_regression(&x, &ys, &eval).unwrap();
        let slope = r.values[1] - r.values[0];
        assert!(
            (slope / ols - 1.0).abs() < 0.05,
            "kernel slope {slope} vs ols {ols}"
        );
        assert!(!r.extrapolated[0] && !r.extrapolated[1]);
    }

    #[test]
    fn regression_flags_extrapolation() {
        let x = normal_samples(1_000, 0.0, 1.0, 18);
        let resp: Vec<f64> = x.data.clone();
        let eval = SampleSet::from_column(&[100.0]);
        let r = kernel_regression(&x, &resp, &eval).unwrap();
        assert!(r.extrapolated[0]);
    }

    #[test]
    fn granger_pure_noise_is_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(19);
        let n = 5_000;
        let mut rows = Vec::with_capacity(2 * n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            let y0: f64 = rng.sample(StandardNormal);
            rows.push(x);
            rows.push(y0);
            target.push(0.5 * y0 + rng.sample::<f64, _>(StandardNormal));
        }
        let preds = SampleSet::from_rows(2, rows).unwrap();
        let e = granger_te(&preds, &target, 0).unwrap();
        assert!(
            e.value.abs() < 3.0 * e.stderr + 1e-4,
            "value {} stderr {}",
            e.value,
            e.stderr
        );
    }

    #[test]
    fn granger_matches_analytic_te_on_exact_gaussian_draws() {
        // Sampling the exact lagged joint law removes integrator bias, so
        // the regression estimate must match the closed form within noise.
        let model = LinearModel::hierarchical_default();
        let joint = lagged_joint(&model, 3.0).unwrap();
        let sampler = joint.dist.sampler().unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let n = 200_000;
        let mut rows = Vec::with_capacity(2 * n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let s = sampler.sample(&mut rng);
            rows.push(s[0]);
            rows.push(s[1]);
            target.push(s[3]);
        }
        let preds = SampleSet::from_rows(2, rows).unwrap();
        let e = granger_te(&preds, &target, 0).unwrap();
        let t = crate::analytic::transfer_entropy(&model, 3.0).unwrap().value;
        assert!(
            (e.value - t).abs() < 3.0 * e.stderr,
            "granger {} vs analytic {} (stderr {})",
            e.value,
            t,
            e.stderr
        );
    }

    #[test]
    fn granger_rejects_collinear_design() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let n = 2_000;
        let mut rows = Vec::with_capacity(2 * n);
        let mut target = Vec::with_capacity(n);
        for _ in 0..n {
            let x: f64 = rng.sample(StandardNormal);
            rows.push(x);
            rows.push(2.0 * x);
            target.push(x + rng.sample::<f64, _>(StandardNormal));
        }
        let preds = SampleSet::from_rows(2, rows).unwrap();
        assert!(granger_te(&preds, &target, 0).is_err());
    }

    #[test]
    fn kl_estimate_is_deterministic() {
        let p = normal_samples(5_000, 0.1, 1.0, 22);
        let q = normal_samples(5_000, 0.0, 1.0, 23);
        let a = kl_knn(&p, &q, DEFAULT_K).unwrap();
        let b = kl_knn(&p, &q, DEFAULT_K).unwrap();
        assert_eq!(a.value.to_bits(), b.value.to_bits());
        assert_eq!(a.stderr.to_bits(), b.stderr.to_bits());
    }

    #[test]
    fn gaussian_kl_oracle_agrees_with_sampled_estimate() {
        // Cross-check the estimator against the closed form on a 2D pair
        // with both mean and covariance differences.
        let p_dist = GaussianDist::new(
            DVector::from_row_slice(&[0.3, -0.2]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]),
        )
        .unwrap();
        let q_dist = GaussianDist::new(
            DVector::from_row_slice(&[0.0, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.2, 0.0, 0.0, 1.0]),
        )
        .unwrap();
        let truth = gaussian_kl(&p_dist, &q_dist).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let ps = p_dist.sampler().unwrap();
        let qs = q_dist.sampler().unwrap();
        let n = 50_000;
        let mut pd = Vec::with_capacity(2 * n);
        let mut qd = Vec::with_capacity(2 * n);
        for _ in 0..n {
            pd.extend_from_slice(ps.sample(&mut rng).as_slice());
            qd.extend_from_slice(qs.sample(&mut rng).as_slice());
        }
        let e = kl_knn(
            &SampleSet::from_rows(2, pd).unwrap(),
            &SampleSet::from_rows(2, qd).unwrap(),
            DEFAULT_K,
        )
        .unwrap();
        assert!(
            (e.value - truth).abs() < 3.0 * e.stderr + 0.01,
            "estimate {} truth {truth} stderr {}",
            e.value,
            e.stderr
        );
    }
}
