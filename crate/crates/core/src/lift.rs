//! Replicated-variable lift of a factor graph, the two-step consensus/product
//! operator and the Dykstra-like hybrid projection iteration.
//!
//! One replica axis is created per (variable, factor) incidence, in factor
//! order then slot order, so each factor owns a contiguous run of axes.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::factor_graph::{FactorGraph, MessageState};
use crate::geometry::{
    block_marginals, block_product, diagonal_restrict, m_project_blocks,
    metric_additive_projection, metric_face_projection, DistVec, Generator, JointShape,
};
use crate::math;

pub const LIFT_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone)]
pub struct ReplicatedSpace {
    fg: FactorGraph,
    shape: JointShape,
    blocks: Vec<Vec<usize>>,
    diag: Vec<usize>,
    /// Replica axis read off for each variable's belief (its first incidence).
    first_axis: Vec<Option<usize>>,
    q_init: DistVec,
}

pub fn replicate_lift(fg: &FactorGraph) -> Result<ReplicatedSpace> {
    replicate_lift_with_budget(fg, LIFT_BUDGET)
}

pub fn replicate_lift_with_budget(fg: &FactorGraph, budget: usize) -> Result<ReplicatedSpace> {
    let axes: Vec<usize> = fg.edges().iter().map(|e| fg.cards()[e.var]).collect();
    let size = axes
        .iter()
        .try_fold(1usize, |acc, &a| acc.checked_mul(a))
        .unwrap_or(usize::MAX);
    if size > budget {
        return Err(Error::BudgetExceeded { size, budget });
    }
    let groups: Vec<Vec<usize>> = (0..fg.n_vars()).map(|v| fg.var_edges(v).to_vec()).collect();
    let shape = JointShape::new(axes, groups)?;
    let blocks: Vec<Vec<usize>> = (0..fg.factors().len())
        .map(|f| fg.factor_edges(f).to_vec())
        .collect();
    let tables: Vec<Vec<f64>> = fg
        .factors()
        .iter()
        .map(|f| Ok(DistVec::normalize(&f.table)?.into_vec()))
        .collect::<Result<_>>()?;
    let q_init = DistVec::new(block_product(&tables, shape.axes(), &blocks))?;
    let first_axis = (0..fg.n_vars())
        .map(|v| fg.var_edges(v).first().copied())
        .collect();
    let diag = shape.diagonal_indices();
    Ok(ReplicatedSpace {
        fg: fg.clone(),
        shape,
        blocks,
        diag,
        first_axis,
        q_init,
    })
}

impl ReplicatedSpace {
    pub fn shape(&self) -> &JointShape {
        &self.shape
    }

    pub fn graph(&self) -> &FactorGraph {
        &self.fg
    }

    /// Axis partition of the product family, one block per factor.
    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn diagonal_indices(&self) -> &[usize] {
        &self.diag
    }

    pub fn q_init(&self) -> &DistVec {
        &self.q_init
    }

    pub fn size(&self) -> usize {
        self.shape.size()
    }

    fn embed(&self, diag_weights: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.size()];
        for (&i, &w) in self.diag.iter().zip(diag_weights) {
            out[i] = w;
        }
        out
    }

    /// Per-variable marginal read on its first replica axis. Variables with no
    /// factor are uniform.
    pub fn replica_marginals(&self, q: &[f64]) -> Vec<Vec<f64>> {
        let axes = self.shape.axes();
        let singles: Vec<Vec<usize>> = (0..axes.len()).map(|a| vec![a]).collect();
        let margs = block_marginals(q, axes, &singles);
        self.first_axis
            .iter()
            .enumerate()
            .map(|(v, a)| match a {
                Some(a) => margs[*a].clone(),
                None => vec![1.0 / self.fg.cards()[v] as f64; self.fg.cards()[v]],
            })
            .collect()
    }

    /// Joint over the replicas assembled from factor beliefs: `∝ ∏_a b_a(x_a)`.
    pub fn joint_from_factor_beliefs(&self, factor_beliefs: &[Vec<f64>]) -> Result<DistVec> {
        if factor_beliefs.len() != self.blocks.len() {
            return Err(Error::DimensionMismatch {
                expected: self.blocks.len(),
                found: factor_beliefs.len(),
            });
        }
        DistVec::normalize(&block_product(
            factor_beliefs,
            self.shape.axes(),
            &self.blocks,
        ))
    }

    /// Joint from a message state: factor beliefs from the messages, then their product.
    pub fn joint_from_messages(&self, msgs: &MessageState) -> Result<DistVec> {
        let fb = crate::factor_graph::bp_factor_beliefs(&self.fg, msgs)?;
        self.joint_from_factor_beliefs(&fb)
    }
}

fn check_len(space: &ReplicatedSpace, n: usize) -> Result<()> {
    if n != space.size() {
        return Err(Error::DimensionMismatch {
            expected: space.size(),
            found: n,
        });
    }
    Ok(())
}

/// Consensus first (I-projection onto the diagonal face), then product
/// structure (M-projection onto the per-factor product family).
pub fn t_proj(q: &DistVec, space: &ReplicatedSpace) -> Result<DistVec> {
    check_len(space, q.len())?;
    let r = diagonal_restrict(q.probs(), &space.shape)?;
    DistVec::new(m_project_blocks(
        &space.embed(&r),
        space.shape.axes(),
        &space.blocks,
    )?)
}

/// `‖t_proj(q) − q‖∞`.
pub fn t_proj_residual(q: &DistVec, space: &ReplicatedSpace) -> Result<f64> {
    Ok(math::max_abs_diff(t_proj(q, space)?.probs(), q.probs()))
}

/// Iterate of the hybrid scheme. `r` is stored embedded in the full space
/// (zeros off the diagonal for the entropic generator).
#[derive(Debug, Clone)]
pub struct WrState {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub r: Vec<f64>,
    pub sigma: Vec<f64>,
    pub tau: Vec<f64>,
    pub generator: Generator,
    /// Number of completed steps; 0 means the state holds `q_{-1}`.
    pub iteration: usize,
}

impl WrState {
    /// `q = q_{-1}`, `σ = τ = 0`.
    pub fn init(space: &ReplicatedSpace, generator: Generator) -> Result<Self> {
        if let Generator::Mahalanobis(m) = &generator {
            if m.dim() != space.size() {
                return Err(Error::DimensionMismatch {
                    expected: space.size(),
                    found: m.dim(),
                });
            }
        }
        let q = space.q_init.probs().to_vec();
        let n = q.len();
        let r = space.embed(&diagonal_restrict(&q, &space.shape)?);
        Ok(Self {
            k: q.clone(),
            q,
            r,
            sigma: vec![0.0; n],
            tau: vec![0.0; n],
            generator,
            iteration: 0,
        })
    }

    /// `ζ = ∇f(q)`.
    pub fn zeta(&self) -> Vec<f64> {
        self.generator.grad(&self.q)
    }

    pub fn beliefs(&self, space: &ReplicatedSpace) -> Vec<Vec<f64>> {
        space.replica_marginals(&self.q)
    }

    /// Diagonal weights of `r` indexed by the diagonal outcomes.
    pub fn r_diagonal(&self, space: &ReplicatedSpace) -> Vec<f64> {
        space.diag.iter().map(|&i| self.r[i]).collect()
    }
}

fn right_projection(gen: &Generator, y: &[f64], space: &ReplicatedSpace) -> Result<Vec<f64>> {
    match gen {
        Generator::NegativeEntropy => m_project_blocks(y, space.shape.axes(), &space.blocks),
        Generator::Mahalanobis(m) => {
            metric_additive_projection(m, y, space.shape.axes(), &space.blocks)
        }
    }
}

fn left_projection(gen: &Generator, y: &[f64], space: &ReplicatedSpace) -> Result<Vec<f64>> {
    match gen {
        Generator::NegativeEntropy => Ok(space.embed(&diagonal_restrict(y, &space.shape)?)),
        Generator::Mahalanobis(m) => metric_face_projection(m, y, &space.diag),
    }
}

fn conj(gen: &Generator, theta: &[f64]) -> Result<Vec<f64>> {
    match gen {
        // Plain softmax: tiny entries are fine here, the projections that follow
        // only need a nonnegative table with positive mass.
        Generator::NegativeEntropy => {
            let lse = math::log_sum_exp(theta);
            Ok(theta.iter().map(|t| math::exp(t - lse)).collect())
        }
        Generator::Mahalanobis(_) => gen.grad_conj(theta),
    }
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn check_finite(v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(index) => Err(Error::NonFinite { index }),
        None => Ok(()),
    }
}

/// One pass of the hybrid scheme:
/// `k = P(∇f*(∇f(q) + σ))`, `σ' = ∇f(q) + σ − ∇f(k)`,
/// `r = Q(∇f*(∇f(k) + τ))`, `q' = P(r)`, `τ' = ∇f(k) + τ − ∇f(q')`,
/// with `P` the right projection onto the product family and `Q` the left
/// projection onto the consensus face.
pub fn wr_step(state: &WrState, space: &ReplicatedSpace) -> Result<WrState> {
    check_len(space, state.q.len())?;
    let gen = &state.generator;
    let grad_q = gen.grad(&state.q);
    let k = right_projection(gen, &conj(gen, &add(&grad_q, &state.sigma))?, space)?;
    let grad_k = gen.grad(&k);
    let sigma: Vec<f64> = grad_q
        .iter()
        .zip(&state.sigma)
        .zip(&grad_k)
        .map(|((a, b), c)| a + b - c)
        .collect();
    check_finite(&sigma)?;
    let r = left_projection(gen, &conj(gen, &add(&grad_k, &state.tau))?, space)?;
    let q = right_projection(gen, &r, space)?;
    let grad_qn = gen.grad(&q);
    let tau: Vec<f64> = grad_k
        .iter()
        .zip(&state.tau)
        .zip(&grad_qn)
        .map(|((a, b), c)| a + b - c)
        .collect();
    check_finite(&tau)?;
    check_finite(&q)?;
    Ok(WrState {
        q,
        k,
        r,
        sigma,
        tau,
        generator: gen.clone(),
        iteration: state.iteration + 1,
    })
}

#[derive(Debug, Clone)]
pub struct WrRun {
    pub state: WrState,
    pub iterations: usize,
    /// `‖ζ_{n+1} − ζ_n‖₂` at the last step.
    pub step_norm: f64,
    pub converged: bool,
}

/// Iterates until the Euclidean change in `ζ` drops below `tol`.
pub fn wr_run(
    space: &ReplicatedSpace,
    generator: Generator,
    tol: f64,
    max_iter: usize,
) -> Result<WrRun> {
    let mut state = WrState::init(space, generator)?;
    let mut zeta = state.zeta();
    let mut step_norm = f64::INFINITY;
    for it in 1..=max_iter {
        state = wr_step(&state, space)?;
        let next = state.zeta();
        step_norm = math::l2_norm(
            &next
                .iter()
                .zip(&zeta)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        zeta = next;
        if step_norm < tol {
            return Ok(WrRun {
                state,
                iterations: it,
                step_norm,
                converged: true,
            });
        }
    }
    Ok(WrRun {
        state,
        iterations: max_iter,
        step_norm,
        converged: false,
    })
}

/// Euclidean distance from `ζ` to the block-additive subspace
/// `{Σ_b h_b(x_b)}`, via `Pf = Σ_b E[f | x_b] − (B − 1) E[f]` under the
/// uniform measure.
pub fn dist_to_additive(zeta: &[f64], axes: &[usize], blocks: &[Vec<usize>]) -> Result<f64> {
    let n: usize = axes.iter().product();
    if zeta.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            found: zeta.len(),
        });
    }
    let sums = block_marginals(zeta, axes, blocks);
    let means: Vec<Vec<f64>> = sums
        .iter()
        .map(|s| {
            let per = (n / s.len()) as f64;
            s.iter().map(|x| x / per).collect()
        })
        .collect();
    let grand = zeta.iter().sum::<f64>() / n as f64;
    let proj = block_product_sum(&means, axes, blocks);
    let offset = (blocks.len() as f64 - 1.0) * grand;
    Ok(math::sqrt(
        zeta.iter()
            .zip(&proj)
            .map(|(z, p)| (z - (p - offset)) * (z - (p - offset)))
            .sum(),
    ))
}

fn block_product_sum(tables: &[Vec<f64>], axes: &[usize], blocks: &[Vec<usize>]) -> Vec<f64> {
    let mut out = vec![0.0; axes.iter().product()];
    crate::geometry::for_each_block_index(axes, blocks, |full, bidx| {
        out[full] = tables.iter().zip(bidx).map(|(t, &i)| t[i]).sum();
    });
    out
}

/// Distance of the lift's initial dual point `∇f(q_{-1})` to the additive subspace.
pub fn initial_dual_distance(space: &ReplicatedSpace) -> Result<f64> {
    let zeta = Generator::NegativeEntropy.grad(space.q_init.probs());
    dist_to_additive(&zeta, space.shape.axes(), &space.blocks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factor_graph::{bp_run_loopy, bp_run_tree, LOOPY_MAX_ITER, LOOPY_TOL};
    use crate::geometry::Metric;
    use crate::testutil::{brute_marginals, fac, random_tree};
    use proptest::prelude::*;

    fn cycle3() -> FactorGraph {
        FactorGraph::new(
            vec![2, 2, 2],
            vec![
                fac(&[0, 1], &[2.0, 1.0, 1.0, 2.0]),
                fac(&[1, 2], &[1.5, 0.5, 0.7, 1.2]),
                fac(&[2, 0], &[1.0, 3.0, 2.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn lift_construction() {
        let fg = FactorGraph::new(vec![2], vec![fac(&[0], &[3.0, 1.0])]).unwrap();
        let sp = replicate_lift(&fg).unwrap();
        assert_eq!(sp.shape().axes(), &[2]);
        assert_eq!(sp.q_init().probs(), &[0.75, 0.25]);

        let fg = FactorGraph::new(
            vec![2],
            vec![fac(&[0], &[3.0, 1.0]), fac(&[0], &[1.0, 1.0])],
        )
        .unwrap();
        let sp = replicate_lift(&fg).unwrap();
        assert_eq!(sp.shape().groups(), &[vec![0, 1]]);
    }

    #[test]
    fn chain_init_is_tensor_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.5, 1.5, 2.5, 3.5, 0.1, 0.9];
        let fg = FactorGraph::new(vec![2, 2, 3], vec![fac(&[0, 1], &a), fac(&[1, 2], &b)]).unwrap();
        let sp = replicate_lift(&fg).unwrap();
        let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
        let q = sp.q_init().probs();
        for i in 0..4 {
            for j in 0..6 {
                assert!((q[i * 6 + j] - a[i] * b[j] / (sa * sb)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn budget_enforced() {
        let fg = cycle3();
        assert!(matches!(
            replicate_lift_with_budget(&fg, 32),
            Err(Error::BudgetExceeded { size: 64, .. })
        ));
    }

    #[test]
    fn t_proj_two_replicas() {
        let fg = FactorGraph::new(
            vec![2],
            vec![fac(&[0], &[1.0, 1.0]), fac(&[0], &[1.0, 1.0])],
        )
        .unwrap();
        let sp = replicate_lift(&fg).unwrap();
        let q = DistVec::new(vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = t_proj(&q, &sp).unwrap();
        // Product over the two replica axes of the consensus weights [0.2, 0.8].
        let want = [0.04, 0.16, 0.16, 0.64];
        assert!(math::max_abs_diff(out.probs(), &want) < 1e-15);
        for m in sp.replica_marginals(out.probs()) {
            assert!(math::max_abs_diff(&m, &[0.2, 0.8]) < 1e-15);
        }
        let u = DistVec::uniform(4);
        assert!(math::max_abs_diff(t_proj(&u, &sp).unwrap().probs(), u.probs()) < 1e-15);
    }

    #[test]
    fn t_proj_fixes_consistent_product_tables() {
        // No variable is shared, so the diagonal is the whole space.
        let fg = FactorGraph::new(
            vec![2, 3],
            vec![fac(&[0], &[1.0, 3.0]), fac(&[1], &[1.0, 2.0, 5.0])],
        )
        .unwrap();
        let sp = replicate_lift(&fg).unwrap();
        let q = sp.q_init().clone();
        assert!(t_proj_residual(&q, &sp).unwrap() < 1e-15);
    }

    #[test]
    fn first_step_and_fixed_point() {
        let sp = replicate_lift(&cycle3()).unwrap();
        let s0 = WrState::init(&sp, Generator::NegativeEntropy).unwrap();
        let s1 = wr_step(&s0, &sp).unwrap();
        // k_0 is the product-family projection of q_{-1}, which already factors.
        assert!(math::max_abs_diff(&s1.k, sp.q_init().probs()) < 1e-15);
        let s2 = wr_step(&s1, &sp).unwrap();
        let s3 = wr_step(&s2, &sp).unwrap();
        assert!(math::max_abs_diff(&s3.q, &s2.q) < 1e-10);
        assert!(math::max_abs_diff(&s3.sigma, &s2.sigma) < 1e-10);
        assert!(math::max_abs_diff(&s3.tau, &s2.tau) < 1e-10);
    }

    #[test]
    fn initial_dual_is_additive() {
        let sp = replicate_lift(&cycle3()).unwrap();
        assert!(initial_dual_distance(&sp).unwrap() < 1e-10);
        let z: Vec<f64> = (0..4).map(|i| if i == 3 { 1.0 } else { 0.0 }).collect();
        let d = dist_to_additive(&z, &[2, 2], &[vec![0], vec![1]]).unwrap();
        // Interaction component of e_{11}: ±1/4 in every cell.
        assert!((d - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loopy_fixed_point_residual_is_measured() {
        let fg = cycle3();
        let sp = replicate_lift(&fg).unwrap();
        let run = bp_run_loopy(&fg, 0.0, LOOPY_TOL, LOOPY_MAX_ITER).unwrap();
        assert!(run.converged);
        let q = sp.joint_from_messages(&run.messages).unwrap();
        let res = t_proj_residual(&q, &sp).unwrap();
        assert!(res.is_finite() && res >= 0.0);
    }

    #[test]
    fn mahalanobis_iterates_settle() {
        let sp = replicate_lift(&cycle3()).unwrap();
        let n = sp.size();
        let mut rows = vec![0.0; n * n];
        for i in 0..n {
            rows[i * n + i] = 1.0 + 0.01 * (i % 5) as f64;
            if i + 1 < n {
                rows[i * n + i + 1] = 0.05;
                rows[(i + 1) * n + i] = 0.05;
            }
        }
        let g = Generator::Mahalanobis(Metric::new(n, &rows).unwrap());
        let run = wr_run(&sp, g, 1e-8, 5000).unwrap();
        assert!(run.converged, "step norm {}", run.step_norm);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn one_outer_iteration_is_exact_on_trees(fg in random_tree(5, 3)) {
            let sp = replicate_lift(&fg).unwrap();
            let s1 = wr_step(&WrState::init(&sp, Generator::NegativeEntropy).unwrap(), &sp).unwrap();
            let exact = brute_marginals(&fg);
            let tree = bp_run_tree(&fg).unwrap().beliefs;
            for ((w, b), e) in s1.beliefs(&sp).iter().zip(&tree).zip(&exact) {
                prop_assert!(math::max_abs_diff(w, e) < 1e-10);
                prop_assert!(math::max_abs_diff(b, e) < 1e-10);
            }
            let s2 = wr_step(&s1, &sp).unwrap();
            for (a, b) in s2.beliefs(&sp).iter().zip(s1.beliefs(&sp).iter()) {
                prop_assert!(math::max_abs_diff(a, b) < 1e-12);
            }
        }
    }
}
