//! KD-tree over an index permutation of a flat row-major point buffer.
//!
//! The tree owns no points: it sorts a `u32` index array into implicit
//! balanced-tree order (median at the middle of each segment, axes cycling
//! with depth). Ties break on the point index, so construction and every
//! query are deterministic for identical input bytes.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Euclidean,
    Chebyshev,
}

const LEAF_SIZE: usize = 16;

pub struct KdTree<'a> {
    data: &'a [f64],
    dim: usize,
    metric: Metric,
    idx: Vec<u32>,
}

impl<'a> KdTree<'a> {
    pub fn build(data: &'a [f64], dim: usize, metric: Metric) -> Result<Self> {
        if dim == 0 || data.len() % dim != 0 {
            return Err(Error::DimensionMismatch {
                expected: dim.max(1),
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Estimator("non-finite coordinate in sample set".into()));
        }
        let n = data.len() / dim;
        if n > u32::MAX as usize {
            return Err(Error::Estimator("sample set too large for index type".into()));
        }
        let mut idx: Vec<u32> = (0..n as u32).collect();
        let mut tree = Self {
            data,
            dim,
            metric,
            idx: Vec::new(),
        };
        tree.partition(&mut idx, 0);
        tree.idx = idx;
        Ok(tree)
    }

    pub fn len(&self) -> usize {
        self.idx.len()
    }

    pub fn is_empty(&self) -> bool {
        self.idx.is_empty()
    }

    #[inline]
    fn point(&self, i: u32) -> &[f64] {
        let i = i as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Distance in the tree metric, except Euclidean reports the squared
    /// distance internally (monotone, saves the sqrt until the API edge).
    #[inline]
    fn key_dist(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.metric {
            Metric::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum(),
            Metric::Chebyshev => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        }
    }

    fn partition(&self, idx: &mut [u32], depth: usize) {
        if idx.len() <= LEAF_SIZE {
            return;
        }
        let axis = depth % self.dim;
        let mid = idx.len() / 2;
        idx.select_nth_unstable_by(mid, |&a, &b| {
            self.point(a)[axis]
                .total_cmp(&self.point(b)[axis])
                .then(a.cmp(&b))
        });
        let (lo, rest) = idx.split_at_mut(mid);
        self.partition(lo, depth + 1);
        self.partition(&mut rest[1..], depth + 1);
    }

    /// Distance from `query` to its k-th nearest point, optionally excluding
    /// one index (the query itself when it belongs to this set).
    pub fn kth_distance(&self, query: &[f64], k: usize, exclude: Option<u32>) -> f64 {
        debug_assert!(k >= 1);
        debug_assert!(self.len() >= k + exclude.map_or(0, |_| 1));
        // Bounded max-heap of the k best key-distances, as a sorted vec
        // (k is small, insertion shift beats heap overhead).
        let mut best: Vec<f64> = Vec::with_capacity(k);
        self.search_knn(&mut best, k, query, exclude, 0, self.idx.len(), 0);
        let worst = best[k - 1];
        match self.metric {
            Metric::Euclidean => worst.sqrt(),
            Metric::Chebyshev => worst,
        }
    }

    fn search_knn(
        &self,
        best: &mut Vec<f64>,
        k: usize,
        query: &[f64],
        exclude: Option<u32>,
        lo: usize,
        hi: usize,
        depth: usize,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.idx[lo..hi] {
                if exclude == Some(i) {
                    continue;
                }
                Self::offer(best, k, self.key_dist(query, self.point(i)));
            }
            return;
        }
        let axis = depth % self.dim;
        let mid = lo + (hi - lo) / 2;
        let pivot = self.idx[mid];
        if exclude != Some(pivot) {
            Self::offer(best, k, self.key_dist(query, self.point(pivot)));
        }
        let diff = query[axis] - self.point(pivot)[axis];
        let plane_key = match self.metric {
            Metric::Euclidean => diff * diff,
            Metric::Chebyshev => diff.abs(),
        };
        let (near_lo, near_hi, far_lo, far_hi) = if diff <= 0.0 {
            (lo, mid, mid + 1, hi)
        } else {
            (mid + 1, hi, lo, mid)
        };
        self.search_knn(best, k, query, exclude, near_lo, near_hi, depth + 1);
        if best.len() < k || plane_key < best[k - 1] {
            self.search_knn(best, k, query, exclude, far_lo, far_hi, depth + 1);
        }
    }

    #[inline]
    fn offer(best: &mut Vec<f64>, k: usize, d: f64) {
        if best.len() < k {
            let pos = best.partition_point(|&b| b <= d);
            best.insert(pos, d);
        } else if d < best[k - 1] {
            let pos = best.partition_point(|&b| b <= d);
            best.insert(pos, d);
            best.pop();
        }
    }

    /// Number of points at distance strictly less than `radius` from
    /// `query`, optionally excluding one index.
    pub fn count_within(&self, query: &[f64], radius: f64, exclude: Option<u32>) -> usize {
        let key_radius = match self.metric {
            Metric::Euclidean => radius * radius,
            Metric::Chebyshev => radius,
        };
        self.count_range(query, radius, key_radius, exclude, 0, self.idx.len(), 0)
    }

    #[allow(clippy::too_many_arguments)]
    fn count_range(
        &self,
        query: &[f64],
        radius: f64,
        key_radius: f64,
        exclude: Option<u32>,
        lo: usize,
        hi: usize,
        depth: usize,
    ) -> usize {
        if hi - lo <= LEAF_SIZE {
            return self.idx[lo..hi]
                .iter()
                .filter(|&&i| exclude != Some(i) && self.key_dist(query, self.point(i)) < key_radius)
                .count();
        }
        let axis = depth % self.dim;
        let mid = lo + (hi - lo) / 2;
        let pivot = self.idx[mid];
        let mut count = usize::from(
            exclude != Some(pivot) && self.key_dist(query, self.point(pivot)) < key_radius,
        );
        let diff = query[axis] - self.point(pivot)[axis];
        // A subtree on the far side of the plane can only contain points at
        // distance >= |diff| from the query.
        if diff - radius < 0.0 {
            count += self.count_range(query, radius, key_radius, exclude, lo, mid, depth + 1);
        }
        if diff + radius > 0.0 {
            count += self.count_range(query, radius, key_radius, exclude, mid + 1, hi, depth + 1);
        }
        count
    }
}
