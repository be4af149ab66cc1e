//! Simplex arithmetic, Bregman generators, dual coordinates and the
//! closed-form KL projections used throughout the crate.
//!
//! Joint tables are stored row-major with the last axis varying fastest.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math;

/// Smallest entry accepted as "interior".
pub const MIN_ENTRY: f64 = 1e-300;
/// Sums within this distance of one are accepted as-is.
pub const SUM_TOL: f64 = 1e-12;
/// Sums within this distance of one are silently renormalized; beyond it we refuse.
pub const RENORM_WINDOW: f64 = 1e-9;

/// A strictly positive probability vector over an ordered finite outcome set.
#[derive(Debug, Clone, PartialEq)]
pub struct DistVec {
    probs: Vec<f64>,
}

impl DistVec {
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty);
        }
        for (index, &value) in probs.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if value < MIN_ENTRY {
                return Err(Error::NonPositiveEntry { index, value });
            }
        }
        let sum: f64 = probs.iter().sum();
        let drift = math::abs(sum - 1.0);
        if drift > RENORM_WINDOW {
            return Err(Error::NotNormalized { sum });
        }
        if drift > SUM_TOL {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Ok(Self { probs })
    }

    /// Normalizes strictly positive weights of arbitrary scale.
    pub fn normalize(weights: &[f64]) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Empty);
        }
        for (index, &value) in weights.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::NonFinite { index });
            }
            if value <= 0.0 {
                return Err(Error::NonPositiveEntry { index, value });
            }
        }
        let sum: f64 = weights.iter().sum();
        if !sum.is_finite() {
            return Self::from_log_weights(
                &weights.iter().map(|w| math::ln(*w)).collect::<Vec<_>>(),
            );
        }
        Self::new(weights.iter().map(|w| w / sum).collect())
    }

    /// Softmax of log-weights, shifted by the maximum before exponentiation.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(Error::Empty);
        }
        if let Some(index) = log_weights.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let lse = math::log_sum_exp(log_weights);
        Self::new(log_weights.iter().map(|x| math::exp(x - lse)).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n > 0, "uniform distribution over an empty set");
        Self {
            probs: vec![1.0 / n as f64; n],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| math::ln(*p)).collect()
    }
}

impl core::ops::Index<usize> for DistVec {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.probs[i]
    }
}

/// Support-restricted distribution: hard zeros outside `support`, interior on it.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportDist {
    len: usize,
    support: Vec<usize>,
    dist: DistVec,
}

impl SupportDist {
    /// Builds from nonnegative weights; entries equal to zero leave the support.
    pub fn from_weights(weights: &[f64]) -> Result<Self> {
        let mut support = Vec::new();
        let mut kept = Vec::new();
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NonPositiveEntry { index: i, value: w });
            }
            if w > 0.0 {
                support.push(i);
                kept.push(w);
            }
        }
        if kept.is_empty() {
            return Err(Error::Empty);
        }
        Ok(Self {
            len: weights.len(),
            support,
            dist: DistVec::normalize(&kept)?,
        })
    }

    pub fn full(dist: DistVec) -> Self {
        Self {
            len: dist.len(),
            support: (0..dist.len()).collect(),
            dist,
        }
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    /// The interior distribution on the support.
    pub fn restricted(&self) -> &DistVec {
        &self.dist
    }

    pub fn is_full(&self) -> bool {
        self.support.len() == self.len
    }

    /// Dense vector over the full outcome set, zeros off the support.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.len];
        for (&i, &p) in self.support.iter().zip(self.dist.probs()) {
            out[i] = p;
        }
        out
    }
}

/// Dual (log) coordinates `θ_i = 1 + ln p_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogCoords {
    pub values: Vec<f64>,
}

/// Symmetric positive-definite matrix for the Mahalanobis generator `½ pᵀ M p`.
#[derive(Debug, Clone)]
pub struct Metric {
    matrix: DMatrix<f64>,
    cholesky: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl Metric {
    /// `rows` is row-major, `dim × dim`.
    pub fn new(dim: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: rows.len(),
            });
        }
        if let Some(index) = rows.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        let matrix = DMatrix::from_row_slice(dim, dim, rows);
        for i in 0..dim {
            for j in 0..i {
                let (a, b) = (matrix[(i, j)], matrix[(j, i)]);
                if math::abs(a - b) > 1e-12 * f64::max(1.0, math::abs(a)) {
                    return Err(Error::NotSymmetric);
                }
            }
        }
        let cholesky = matrix
            .clone()
            .cholesky()
            .ok_or(Error::NotPositiveDefinite)?;
        Ok(Self { matrix, cholesky })
    }

    pub fn identity(dim: usize) -> Self {
        let matrix = DMatrix::identity(dim, dim);
        let cholesky = matrix.clone().cholesky().expect("identity is SPD");
        Self { matrix, cholesky }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// `M x`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (&self.matrix * DVector::from_column_slice(x))
            .as_slice()
            .to_vec()
    }

    /// `M⁻¹ b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.cholesky
            .solve(&DVector::from_column_slice(b))
            .as_slice()
            .to_vec()
    }

    /// `½ dᵀ M d`.
    pub fn half_quadratic(&self, d: &[f64]) -> f64 {
        let md = self.apply(d);
        0.5 * d.iter().zip(&md).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Strictly convex generator of a Bregman divergence.
#[derive(Debug, Clone)]
pub enum Generator {
    NegativeEntropy,
    Mahalanobis(Metric),
}

impl Generator {
    /// `∇f(p)`.
    pub fn grad(&self, p: &[f64]) -> Vec<f64> {
        match self {
            Generator::NegativeEntropy => p.iter().map(|x| 1.0 + math::ln(*x)).collect(),
            Generator::Mahalanobis(m) => m.apply(p),
        }
    }

    /// `∇f*(θ)`; softmax for negative entropy.
    pub fn grad_conj(&self, theta: &[f64]) -> Result<Vec<f64>> {
        match self {
            Generator::NegativeEntropy => Ok(DistVec::from_log_weights(theta)?.into_vec()),
            Generator::Mahalanobis(m) => Ok(m.solve(theta)),
        }
    }

    /// `D_f(r, q)` on raw vectors. For negative entropy `r` may contain zeros.
    pub fn divergence_raw(&self, r: &[f64], q: &[f64]) -> Result<f64> {
        if r.len() != q.len() {
            return Err(Error::DimensionMismatch {
                expected: q.len(),
                found: r.len(),
            });
        }
        match self {
            Generator::NegativeEntropy => {
                let mut acc = 0.0;
                for (i, (&ri, &qi)) in r.iter().zip(q).enumerate() {
                    if qi <= 0.0 {
                        return Err(Error::NonPositiveEntry {
                            index: i,
                            value: qi,
                        });
                    }
                    if ri > 0.0 {
                        acc += ri * math::ln(ri / qi);
                    }
                }
                Ok(f64::max(acc, 0.0))
            }
            Generator::Mahalanobis(m) => {
                if m.dim() != r.len() {
                    return Err(Error::DimensionMismatch {
                        expected: m.dim(),
                        found: r.len(),
                    });
                }
                let d: Vec<f64> = r.iter().zip(q).map(|(a, b)| a - b).collect();
                Ok(f64::max(m.half_quadratic(&d), 0.0))
            }
        }
    }
}

/// `D_f(r, q)`; KL(r‖q) in nats for negative entropy.
pub fn divergence(generator: &Generator, r: &DistVec, q: &DistVec) -> Result<f64> {
    generator.divergence_raw(r.probs(), q.probs())
}

pub fn kl(r: &[f64], q: &[f64]) -> Result<f64> {
    Generator::NegativeEntropy.divergence_raw(r, q)
}

pub fn to_dual(p: &DistVec) -> LogCoords {
    LogCoords {
        values: Generator::NegativeEntropy.grad(p.probs()),
    }
}

pub fn from_dual(theta: &LogCoords) -> Result<DistVec> {
    DistVec::from_log_weights(&theta.values)
}

/// Axis sizes of a joint table plus the replica groups tying axes that copy one variable.
///
/// Groups are normalized to partition every axis (ungrouped axes become singletons)
/// and are ordered by their smallest axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointShape {
    axes: Vec<usize>,
    groups: Vec<Vec<usize>>,
}

impl JointShape {
    pub fn new(axes: Vec<usize>, groups: Vec<Vec<usize>>) -> Result<Self> {
        if axes.contains(&0) {
            return Err(Error::Invalid("zero-sized axis".into()));
        }
        let mut seen = vec![false; axes.len()];
        let mut normalized: Vec<Vec<usize>> = Vec::new();
        for g in groups {
            if g.is_empty() {
                continue;
            }
            let mut g = g;
            g.sort_unstable();
            for &a in &g {
                if a >= axes.len() {
                    return Err(Error::Invalid("replica group names a missing axis".into()));
                }
                if seen[a] {
                    return Err(Error::Invalid("axis appears in two replica groups".into()));
                }
                if axes[a] != axes[g[0]] {
                    return Err(Error::Invalid("replicas with different alphabets".into()));
                }
                seen[a] = true;
            }
            normalized.push(g);
        }
        for (a, s) in seen.iter().enumerate() {
            if !s {
                normalized.push(vec![a]);
            }
        }
        normalized.sort_by_key(|g| g[0]);
        Ok(Self {
            axes,
            groups: normalized,
        })
    }

    /// Plain product space, no replication.
    pub fn product(axes: Vec<usize>) -> Result<Self> {
        Self::new(axes, Vec::new())
    }

    pub fn axes(&self) -> &[usize] {
        &self.axes
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn size(&self) -> usize {
        self.axes.iter().product()
    }

    pub fn strides(&self) -> Vec<usize> {
        strides(&self.axes)
    }

    /// Alphabet size of each replica group (the axes of the diagonal space).
    pub fn diagonal_axes(&self) -> Vec<usize> {
        self.groups.iter().map(|g| self.axes[g[0]]).collect()
    }

    /// Full-table index of each diagonal outcome, in row-major order over groups.
    pub fn diagonal_indices(&self) -> Vec<usize> {
        let strides = self.strides();
        let group_strides: Vec<usize> = self
            .groups
            .iter()
            .map(|g| g.iter().map(|&a| strides[a]).sum())
            .collect();
        let dims = self.diagonal_axes();
        let total: usize = dims.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut digits = vec![0usize; dims.len()];
        let mut idx = 0usize;
        for _ in 0..total {
            out.push(idx);
            for k in (0..dims.len()).rev() {
                digits[k] += 1;
                idx += group_strides[k];
                if digits[k] < dims[k] {
                    break;
                }
                idx -= dims[k] * group_strides[k];
                digits[k] = 0;
            }
        }
        out
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.size() {
            return Err(Error::DimensionMismatch {
                expected: self.size(),
                found: n,
            });
        }
        Ok(())
    }
}

pub(crate) fn strides(axes: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; axes.len()];
    for i in (0..axes.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * axes[i + 1];
    }
    s
}

/// Calls `f(full_index, block_indices)` for every cell of the table, where
/// `block_indices[b]` is the row-major index of the cell restricted to block `b`.
pub(crate) fn for_each_block_index(
    axes: &[usize],
    blocks: &[Vec<usize>],
    mut f: impl FnMut(usize, &[usize]),
) {
    let mut owner = vec![usize::MAX; axes.len()];
    let mut bstride = vec![0usize; axes.len()];
    for (b, block) in blocks.iter().enumerate() {
        let sizes: Vec<usize> = block.iter().map(|&a| axes[a]).collect();
        let st = strides(&sizes);
        for (k, &a) in block.iter().enumerate() {
            owner[a] = b;
            bstride[a] = st[k];
        }
    }
    let total: usize = axes.iter().product();
    let mut digits = vec![0usize; axes.len()];
    let mut bidx = vec![0usize; blocks.len()];
    for full in 0..total {
        f(full, &bidx);
        for a in (0..axes.len()).rev() {
            digits[a] += 1;
            if owner[a] != usize::MAX {
                bidx[owner[a]] += bstride[a];
            }
            if digits[a] < axes[a] {
                break;
            }
            if owner[a] != usize::MAX {
                bidx[owner[a]] -= axes[a] * bstride[a];
            }
            digits[a] = 0;
        }
    }
}

pub(crate) fn check_partition(n_axes: usize, blocks: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; n_axes];
    for &a in blocks.iter().flatten() {
        if a >= n_axes || seen[a] {
            return Err(Error::Invalid("blocks do not partition the axes".into()));
        }
        seen[a] = true;
    }
    if seen.iter().any(|s| !s) {
        return Err(Error::Invalid("blocks do not cover every axis".into()));
    }
    Ok(())
}

/// Marginal table of `q` over each block of axes.
pub fn block_marginals(q: &[f64], axes: &[usize], blocks: &[Vec<usize>]) -> Vec<Vec<f64>> {
    let mut margs: Vec<Vec<f64>> = blocks
        .iter()
        .map(|b| vec![0.0; b.iter().map(|&a| axes[a]).product()])
        .collect();
    for_each_block_index(axes, blocks, |full, bidx| {
        let v = q[full];
        if v != 0.0 {
            for (m, &i) in margs.iter_mut().zip(bidx) {
                m[i] += v;
            }
        }
    });
    margs
}

/// Outer product of per-block tables laid out over `axes`.
pub fn block_product(tables: &[Vec<f64>], axes: &[usize], blocks: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; axes.iter().product()];
    for_each_block_index(axes, blocks, |full, bidx| {
        out[full] = tables.iter().zip(bidx).map(|(t, &i)| t[i]).product();
    });
    out
}

/// Reverse-KL projection of `q` onto the family of distributions that factor
/// across `blocks`: the outer product of the block marginals. `q` may carry
/// hard zeros (e.g. a face-supported vector); the result is interior whenever
/// every block marginal is.
pub fn m_project_blocks(q: &[f64], axes: &[usize], blocks: &[Vec<usize>]) -> Result<Vec<f64>> {
    check_partition(axes.len(), blocks)?;
    let expected: usize = axes.iter().product();
    if q.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            found: q.len(),
        });
    }
    let margs = block_marginals(q, axes, blocks);
    Ok(block_product(&margs, axes, blocks))
}

/// I-projection onto the diagonal face: zero the off-diagonal mass and renormalize.
/// The result is indexed by the diagonal outcomes.
pub fn i_project_diagonal(q: &DistVec, shape: &JointShape) -> Result<DistVec> {
    let restricted = diagonal_restrict(q.probs(), shape)?;
    DistVec::new(restricted)
}

/// Diagonal entries of `q`, renormalized. Works on nonnegative raw tables.
pub fn diagonal_restrict(q: &[f64], shape: &JointShape) -> Result<Vec<f64>> {
    shape.check_len(q.len())?;
    let diag: Vec<f64> = shape.diagonal_indices().iter().map(|&i| q[i]).collect();
    let mass: f64 = diag.iter().sum();
    if !(mass > 0.0) || !mass.is_finite() {
        return Err(Error::ZeroDiagonalMass);
    }
    Ok(diag.into_iter().map(|x| x / mass).collect())
}

/// Reverse-KL projection onto the product of per-axis marginals.
pub fn m_project_product(q: &DistVec, shape: &JointShape) -> Result<DistVec> {
    shape.check_len(q.len())?;
    let blocks: Vec<Vec<usize>> = (0..shape.axes().len()).map(|a| vec![a]).collect();
    DistVec::new(m_project_blocks(q.probs(), shape.axes(), &blocks)?)
}

/// `argmin_r Σ_k KL(r‖q_k)`: the normalized elementwise geometric mean.
pub fn consensus_geomean(tables: &[DistVec]) -> Result<DistVec> {
    let first = tables.first().ok_or(Error::Empty)?;
    let n = first.len();
    let mut acc = vec![0.0; n];
    for t in tables {
        if t.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: t.len(),
            });
        }
        for (a, p) in acc.iter_mut().zip(t.probs()) {
            *a += math::ln(*p);
        }
    }
    let k = tables.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    DistVec::from_log_weights(&acc)
}

/// Mahalanobis (`½ (r−y)ᵀ M (r−y)`) projection onto the affine hull of the
/// diagonal face: off-diagonal entries zero, entries summing to one.
pub fn metric_face_projection(metric: &Metric, y: &[f64], diag: &[usize]) -> Result<Vec<f64>> {
    let n = y.len();
    if metric.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: metric.dim(),
            found: n,
        });
    }
    let d = diag.len();
    let m = metric.matrix();
    let my = metric.apply(y);
    let mdd = DMatrix::from_fn(d, d, |i, j| m[(diag[i], diag[j])]);
    let b = DVector::from_iterator(d, diag.iter().map(|&i| my[i]));
    let chol = mdd.cholesky().ok_or(Error::NotPositiveDefinite)?;
    let ones = DVector::from_element(d, 1.0);
    let v0 = chol.solve(&b);
    let w = chol.solve(&ones);
    let lambda = (v0.sum() - 1.0) / w.sum();
    let v = v0 - w * lambda;
    let mut out = vec![0.0; n];
    for (k, &i) in diag.iter().enumerate() {
        out[i] = v[k];
    }
    Ok(out)
}

/// Mahalanobis right projection onto the set whose dual image is the
/// block-additive subspace `{θ : θ(x) = Σ_b h_b(x_b)}`: returns
/// `M⁻¹ B c` with `c` minimizing `½ (Bc − My)ᵀ M⁻¹ (Bc − My)`.
pub fn metric_additive_projection(
    metric: &Metric,
    y: &[f64],
    axes: &[usize],
    blocks: &[Vec<usize>],
) -> Result<Vec<f64>> {
    check_partition(axes.len(), blocks)?;
    let n = y.len();
    if metric.dim() != n || axes.iter().product::<usize>() != n {
        return Err(Error::DimensionMismatch {
            expected: metric.dim(),
            found: n,
        });
    }
    let block_sizes: Vec<usize> = blocks
        .iter()
        .map(|b| b.iter().map(|&a| axes[a]).product())
        .collect();
    let offsets: Vec<usize> = block_sizes
        .iter()
        .scan(0, |acc, s| {
            let o = *acc;
            *acc += s;
            Some(o)
        })
        .collect();
    let cols: usize = block_sizes.iter().sum();
    let mut basis = DMatrix::<f64>::zeros(n, cols);
    for_each_block_index(axes, blocks, |full, bidx| {
        for (b, &i) in bidx.iter().enumerate() {
            basis[(full, offsets[b] + i)] = 1.0;
        }
    });
    // M⁻¹ B, column by column.
    let mut minv_b = DMatrix::<f64>::zeros(n, cols);
    for j in 0..cols {
        let col: Vec<f64> = basis.column(j).iter().copied().collect();
        let s = metric.solve(&col);
        for i in 0..n {
            minv_b[(i, j)] = s[i];
        }
    }
    let gram = basis.transpose() * &minv_b;
    let rhs = basis.transpose() * DVector::from_column_slice(y);
    let pinv = gram
        .pseudo_inverse(1e-12)
        .map_err(|_| Error::Invalid("additive Gram system is singular".into()))?;
    let c = pinv * rhs;
    Ok((minv_b * c).as_slice().to_vec())
}
