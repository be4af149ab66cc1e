//! Empirical Lipschitz check of the map from log-evidence to marginals.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::{downward_pass, raw_marginals, upward_pass, Evidence, SpnCircuit};
use crate::error::{Error, Result};
use crate::gen::Rng;
use crate::math;

/// Per-(variable, state) bounds on `u = ln λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogBox {
    pub lo: Vec<Vec<f64>>,
    pub hi: Vec<Vec<f64>>,
}

impl LogBox {
    pub fn uniform(cards: &[usize], lo: f64, hi: f64) -> Self {
        Self {
            lo: cards.iter().map(|&k| vec![lo; k]).collect(),
            hi: cards.iter().map(|&k| vec![hi; k]).collect(),
        }
    }

    fn check(&self, cards: &[usize]) -> Result<()> {
        for (lh, k) in [(&self.lo, cards), (&self.hi, cards)] {
            if lh.len() != k.len() {
                return Err(Error::DimensionMismatch {
                    expected: k.len(),
                    found: lh.len(),
                });
            }
            for (row, &k) in lh.iter().zip(k) {
                if row.len() != k {
                    return Err(Error::DimensionMismatch {
                        expected: k,
                        found: row.len(),
                    });
                }
            }
        }
        let flat = self.lo.iter().flatten().zip(self.hi.iter().flatten());
        for (i, (lo, hi)) in flat.enumerate() {
            if !lo.is_finite() || !hi.is_finite() {
                return Err(Error::NonFinite { index: i });
            }
            if lo > hi {
                return Err(Error::Invalid(alloc::format!(
                    "bound {i}: lower {lo} above upper {hi}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LipschitzReport {
    /// Largest spectral norm of the finite-difference Jacobian over the samples.
    pub l_hat: f64,
    /// `max ‖p(u)−p(u′)‖ / (L_hat ‖u−u′‖)` over pairs with `u ≠ u′`.
    pub worst_ratio: f64,
    pub pairs: usize,
    /// Every pair satisfies `‖p(u)−p(u′)‖ ≤ 1.05 L_hat ‖u−u′‖`.
    pub pass: bool,
}

fn marginals_at(c: &SpnCircuit, u: &[f64]) -> Result<Vec<f64>> {
    let mut lambda = Vec::with_capacity(c.n_vars());
    let mut k = 0;
    for &card in c.cards() {
        lambda.push(u[k..k + card].iter().map(|&x| math::exp(x)).collect());
        k += card;
    }
    let e = Evidence { lambda };
    let v = upward_pass(c, &e)?;
    let a = downward_pass(c, &v);
    Ok(raw_marginals(c, &e, &v, &a)?
        .into_iter()
        .flatten()
        .collect())
}

fn jacobian_norm(c: &SpnCircuit, u: &[f64]) -> Result<f64> {
    let n = u.len();
    let mut cols = Vec::with_capacity(n);
    let mut x = u.to_vec();
    for j in 0..n {
        let h = 1e-5 * math::abs(u[j]).max(1.0);
        x[j] = u[j] + h;
        let plus = marginals_at(c, &x)?;
        x[j] = u[j] - h;
        let minus = marginals_at(c, &x)?;
        x[j] = u[j];
        cols.push(
            plus.iter()
                .zip(&minus)
                .map(|(p, m)| (p - m) / (2.0 * h))
                .collect::<Vec<_>>(),
        );
    }
    let jac = DMatrix::from_fn(n, n, |i, j| cols[j][i]);
    Ok(jac.singular_values().max())
}

pub fn lipschitz_probe(
    c: &SpnCircuit,
    bounds: &LogBox,
    n_samples: usize,
    seed: u64,
) -> Result<LipschitzReport> {
    bounds.check(c.cards())?;
    let lo: Vec<f64> = bounds.lo.iter().flatten().copied().collect();
    let hi: Vec<f64> = bounds.hi.iter().flatten().copied().collect();
    let mut rng = Rng::new(seed);
    let points: Vec<Vec<f64>> = (0..n_samples)
        .map(|_| lo.iter().zip(&hi).map(|(&a, &b)| rng.range(a, b)).collect())
        .collect();
    let mut l_hat: f64 = 0.0;
    let mut values = Vec::with_capacity(points.len());
    for u in &points {
        l_hat = l_hat.max(jacobian_norm(c, u)?);
        values.push(marginals_at(c, u)?);
    }
    let mut worst_ratio: f64 = 0.0;
    let mut pairs = 0;
    let mut pass = true;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let du: Vec<f64> = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| a - b)
                .collect();
            let dp: Vec<f64> = values[i]
                .iter()
                .zip(&values[j])
                .map(|(a, b)| a - b)
                .collect();
            let (nu, np) = (math::l2_norm(&du), math::l2_norm(&dp));
            pairs += 1;
            if np > 1.05 * l_hat * nu {
                pass = false;
            }
            if nu > 0.0 && l_hat > 0.0 {
                worst_ratio = worst_ratio.max(np / (l_hat * nu));
            }
        }
    }
    Ok(LipschitzReport {
        l_hat,
        worst_ratio,
        pairs,
        pass,
    })
}
