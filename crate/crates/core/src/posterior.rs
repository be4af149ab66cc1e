//! Posterior-expected sensitivities for discrete priors on grids.
//!
//! The score is additive, `z(x, θ) = Σ_i z_i(x_i, θ)`, with each `z_i` a
//! computation graph whose inputs are `x_i` and some components of `θ`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::dag::{backward_adjoints, forward_eval, seed_score, CompGraph, Node, Op, OutputFactor};
use crate::error::{Error, Result};
use crate::factor_graph::{bp_run_tree, Factor, FactorGraph};
use crate::geometry::DistVec;
use crate::math;

pub const ENUM_BUDGET: usize = 1_000_000;

/// One additive term `z_i(x_i, θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTerm {
    pub graph: CompGraph,
    /// Input node receiving `x_i`.
    pub x_node: usize,
    /// `(θ index, input node)` pairs.
    pub theta: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePriorModel {
    pub grids: Vec<Vec<f64>>,
    pub priors: Vec<DistVec>,
    pub theta: Vec<f64>,
    pub terms: Vec<ScoreTerm>,
    pub likelihood: OutputFactor,
}

/// `z_i` and `∂_θ z_i` on every grid point.
struct TermTable {
    z: Vec<f64>,
    dz: Vec<Vec<f64>>,
}

impl DiscretePriorModel {
    pub fn new(
        grids: Vec<Vec<f64>>,
        priors: Vec<DistVec>,
        theta: Vec<f64>,
        terms: Vec<ScoreTerm>,
        likelihood: OutputFactor,
    ) -> Result<Self> {
        let m = grids.len();
        for (len, what) in [(priors.len(), m), (terms.len(), m)] {
            if len != what {
                return Err(Error::DimensionMismatch {
                    expected: what,
                    found: len,
                });
            }
        }
        for (g, p) in grids.iter().zip(&priors) {
            if g.is_empty() {
                return Err(Error::Empty);
            }
            if g.len() != p.len() {
                return Err(Error::DimensionMismatch {
                    expected: g.len(),
                    found: p.len(),
                });
            }
        }
        for (i, t) in terms.iter().enumerate() {
            let mut wired: Vec<usize> = t.theta.iter().map(|&(_, n)| n).collect();
            wired.push(t.x_node);
            wired.sort_unstable();
            if t.graph.input_nodes() != wired {
                return Err(Error::Invalid(alloc::format!(
                    "term {i}: inputs are not exactly x and θ wires"
                )));
            }
            if let Some(&(k, _)) = t.theta.iter().find(|&&(k, _)| k >= theta.len()) {
                return Err(Error::Invalid(alloc::format!(
                    "term {i}: θ index {k} out of range"
                )));
            }
        }
        likelihood.validate()?;
        Ok(Self {
            grids,
            priors,
            theta,
            terms,
            likelihood,
        })
    }

    pub fn n_inputs(&self) -> usize {
        self.grids.len()
    }

    /// The same model with the prior collapsed onto the grid point `x_star`.
    pub fn dirac(&self, x_star: &[usize]) -> Result<Self> {
        if x_star.len() != self.n_inputs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_inputs(),
                found: x_star.len(),
            });
        }
        let grids = self
            .grids
            .iter()
            .zip(x_star)
            .map(|(g, &k)| {
                g.get(k)
                    .map(|&v| vec![v])
                    .ok_or(Error::Invalid(alloc::format!("grid index {k}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let priors = vec![DistVec::uniform(1); self.n_inputs()];
        Ok(Self {
            grids,
            priors,
            ..self.clone()
        })
    }

    fn term_inputs(&self, i: usize, x: f64, theta: &[f64]) -> BTreeMap<usize, f64> {
        let t = &self.terms[i];
        let mut inputs: BTreeMap<usize, f64> =
            t.theta.iter().map(|&(k, n)| (n, theta[k])).collect();
        inputs.insert(t.x_node, x);
        inputs
    }

    fn tables(&self, theta: &[f64]) -> Result<Vec<TermTable>> {
        if theta.len() != self.theta.len() {
            return Err(Error::DimensionMismatch {
                expected: self.theta.len(),
                found: theta.len(),
            });
        }
        let unit = OutputFactor::ExpScale(1.0);
        (0..self.n_inputs())
            .map(|i| {
                let t = &self.terms[i];
                let mut z = Vec::with_capacity(self.grids[i].len());
                let mut dz = Vec::with_capacity(self.grids[i].len());
                for &x in &self.grids[i] {
                    let trace = forward_eval(&t.graph, &self.term_inputs(i, x, theta))?;
                    let adj = backward_adjoints(&t.graph, &trace, &unit)?;
                    let mut d = vec![0.0; theta.len()];
                    for &(k, n) in &t.theta {
                        d[k] += adj.s[n];
                    }
                    z.push(trace.output(&t.graph));
                    dz.push(d);
                }
                Ok(TermTable { z, dz })
            })
            .collect()
    }

    fn configurations(&self, budget: usize) -> Result<usize> {
        let mut size = 1usize;
        for g in &self.grids {
            size = size.saturating_mul(g.len());
        }
        if size > budget {
            return Err(Error::BudgetExceeded { size, budget });
        }
        Ok(size)
    }

    /// Visits every grid configuration with its log prior weight, `z` and `∂_θ z`.
    fn enumerate(
        &self,
        theta: &[f64],
        budget: usize,
        mut f: impl FnMut(f64, f64, &[f64]),
    ) -> Result<()> {
        let total = self.configurations(budget)?;
        let tables = self.tables(theta)?;
        let m = self.n_inputs();
        let mut x = vec![0usize; m];
        let mut dz = vec![0.0; theta.len()];
        for _ in 0..total {
            let mut lp = 0.0;
            let mut z = 0.0;
            dz.iter_mut().for_each(|d| *d = 0.0);
            for i in 0..m {
                lp += math::ln(self.priors[i][x[i]]);
                z += tables[i].z[x[i]];
                dz.iter_mut()
                    .zip(&tables[i].dz[x[i]])
                    .for_each(|(a, b)| *a += b);
            }
            f(lp, z, &dz);
            for i in (0..m).rev() {
                x[i] += 1;
                if x[i] < self.grids[i].len() {
                    break;
                }
                x[i] = 0;
            }
        }
        Ok(())
    }
}

/// `Σ_x ℓ(z(x, θ)) p(x)` by enumeration.
pub fn marginal_likelihood(model: &DiscretePriorModel, theta: &[f64]) -> Result<f64> {
    log_marginal_likelihood(model, theta, ENUM_BUDGET).map(math::exp)
}

pub fn log_marginal_likelihood(
    model: &DiscretePriorModel,
    theta: &[f64],
    budget: usize,
) -> Result<f64> {
    let mut terms = Vec::new();
    model.enumerate(theta, budget, |lp, z, _| {
        terms.push(lp + model.likelihood.log_phi(z))
    })?;
    Ok(math::log_sum_exp(&terms))
}

/// `∏_i Σ_{x_i} p_i(x_i) e^{α z_i(x_i, θ)}`; exponential likelihood only.
pub fn marginal_likelihood_factorized(model: &DiscretePriorModel, theta: &[f64]) -> Result<f64> {
    let alpha = exp_scale(model)?;
    let tables = model.tables(theta)?;
    let mut log_total = 0.0;
    for (t, p) in tables.iter().zip(&model.priors) {
        let terms: Vec<f64> =
            t.z.iter()
                .zip(p.probs())
                .map(|(z, p)| math::ln(*p) + alpha * z)
                .collect();
        log_total += math::log_sum_exp(&terms);
    }
    Ok(math::exp(log_total))
}

fn exp_scale(model: &DiscretePriorModel) -> Result<f64> {
    match model.likelihood {
        OutputFactor::ExpScale(a) => Ok(a),
        _ => Err(Error::Unsupported(
            "factorized path needs an exponential likelihood".into(),
        )),
    }
}

/// `E[s(z) ∂_θ z | y]` under the enumerated posterior.
pub fn posterior_grad_enum(model: &DiscretePriorModel, theta: &[f64]) -> Result<Vec<f64>> {
    posterior_grad_enum_with_budget(model, theta, ENUM_BUDGET)
}

pub fn posterior_grad_enum_with_budget(
    model: &DiscretePriorModel,
    theta: &[f64],
    budget: usize,
) -> Result<Vec<f64>> {
    let mut logw = Vec::new();
    let mut contrib = Vec::new();
    model.enumerate(theta, budget, |lp, z, dz| {
        logw.push(lp + model.likelihood.log_phi(z));
        let s = seed_score(&model.likelihood, z);
        contrib.push(dz.iter().map(|d| s * d).collect::<Vec<f64>>());
    })?;
    let post = DistVec::from_log_weights(&logw)?;
    let mut g = vec![0.0; theta.len()];
    for (w, c) in post.probs().iter().zip(&contrib) {
        g.iter_mut().zip(c).for_each(|(a, b)| *a += w * b);
    }
    Ok(g)
}

/// Posterior marginals `q_i ∝ p_i e^{α z_i}` from one tree pass over the
/// induced model, then `α Σ_i E_{q_i}[∂_θ z_i]`.
pub fn posterior_grad_bp(model: &DiscretePriorModel, theta: &[f64]) -> Result<Vec<f64>> {
    let alpha = exp_scale(model)?;
    let tables = model.tables(theta)?;
    let cards: Vec<usize> = model.grids.iter().map(Vec::len).collect();
    let factors = tables
        .iter()
        .zip(&model.priors)
        .enumerate()
        .map(|(i, (t, p))| {
            let logs: Vec<f64> =
                t.z.iter()
                    .zip(p.probs())
                    .map(|(z, p)| math::ln(*p) + alpha * z)
                    .collect();
            Ok(Factor {
                vars: vec![i],
                table: DistVec::from_log_weights(&logs)?.into_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let run = bp_run_tree(&FactorGraph::new(cards, factors)?)?;
    let mut g = vec![0.0; theta.len()];
    for (q, t) in run.beliefs.iter().zip(&tables) {
        for (w, d) in q.iter().zip(&t.dz) {
            g.iter_mut().zip(d).for_each(|(a, b)| *a += alpha * w * b);
        }
    }
    Ok(g)
}

/// The full score as one graph: every term wired to shared θ inputs and
/// summed. Returns the graph, its x input nodes and its θ input nodes.
pub fn assemble_score_graph(
    model: &DiscretePriorModel,
) -> Result<(CompGraph, Vec<usize>, Vec<usize>)> {
    let mut nodes: Vec<Node> = Vec::new();
    let theta_nodes: Vec<usize> = (0..model.theta.len())
        .map(|_| {
            nodes.push(Node {
                op: Op::Input,
                inputs: vec![],
            });
            nodes.len() - 1
        })
        .collect();
    let mut x_nodes = Vec::new();
    let mut outputs = Vec::new();
    for t in &model.terms {
        let mut map = vec![usize::MAX; t.graph.nodes().len()];
        for &(k, n) in &t.theta {
            map[n] = theta_nodes[k];
        }
        nodes.push(Node {
            op: Op::Input,
            inputs: vec![],
        });
        map[t.x_node] = nodes.len() - 1;
        x_nodes.push(nodes.len() - 1);
        for &i in t.graph.topo_order() {
            if map[i] != usize::MAX {
                continue;
            }
            let node = &t.graph.nodes()[i];
            nodes.push(Node {
                op: node.op,
                inputs: node.inputs.iter().map(|&j| map[j]).collect(),
            });
            map[i] = nodes.len() - 1;
        }
        outputs.push(map[t.graph.output()]);
    }
    let mut acc = outputs[0];
    for &o in &outputs[1..] {
        nodes.push(Node {
            op: Op::Add,
            inputs: vec![acc, o],
        });
        acc = nodes.len() - 1;
    }
    Ok((CompGraph::new(nodes, acc)?, x_nodes, theta_nodes))
}

/// `(posterior gradient under δ_{x*}, s(z*) ∂_θ z(x*, θ) from one reverse sweep
/// over the assembled score graph seeded by the likelihood)`.
pub fn dirac_limit_check(
    model: &DiscretePriorModel,
    theta: &[f64],
    x_star: &[usize],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let left = posterior_grad_enum(&model.dirac(x_star)?, theta)?;
    let (g, x_nodes, theta_nodes) = assemble_score_graph(model)?;
    let mut inputs: BTreeMap<usize, f64> = theta_nodes
        .iter()
        .zip(theta)
        .map(|(&n, &v)| (n, v))
        .collect();
    for (i, &n) in x_nodes.iter().enumerate() {
        inputs.insert(n, model.grids[i][x_star[i]]);
    }
    let trace = forward_eval(&g, &inputs)?;
    let adj = backward_adjoints(&g, &trace, &model.likelihood)?;
    let right = theta_nodes.iter().map(|&n| adj.s[n]).collect();
    Ok((left, right))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dag::Loss;
    use crate::gen::{random_model, ModelParams};
    use proptest::prelude::*;

    /// `z_0 = θ_0 x`, `z_1 = tanh(θ_1 + x)`.
    fn small(likelihood: OutputFactor) -> DiscretePriorModel {
        let mul = CompGraph::new(
            vec![
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Mul,
                    inputs: vec![0, 1],
                },
            ],
            2,
        )
        .unwrap();
        let th = CompGraph::new(
            vec![
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Input,
                    inputs: vec![],
                },
                Node {
                    op: Op::Add,
                    inputs: vec![0, 1],
                },
                Node {
                    op: Op::Tanh,
                    inputs: vec![2],
                },
            ],
            3,
        )
        .unwrap();
        DiscretePriorModel::new(
            vec![vec![-1.0, 0.5, 2.0], vec![0.0, 1.0]],
            vec![
                DistVec::normalize(&[1.0, 2.0, 1.0]).unwrap(),
                DistVec::normalize(&[3.0, 1.0]).unwrap(),
            ],
            vec![0.3, -0.2],
            vec![
                ScoreTerm {
                    graph: mul,
                    x_node: 1,
                    theta: vec![(0, 0)],
                },
                ScoreTerm {
                    graph: th,
                    x_node: 1,
                    theta: vec![(1, 0)],
                },
            ],
            likelihood,
        )
        .unwrap()
    }

    fn fd(model: &DiscretePriorModel, theta: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|k| {
                let h = crate::dag::fd_step(theta[k]);
                let mut p = theta.to_vec();
                p[k] += h;
                let up = log_marginal_likelihood(model, &p, ENUM_BUDGET).unwrap();
                p[k] -= 2.0 * h;
                let down = log_marginal_likelihood(model, &p, ENUM_BUDGET).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let d = math::l2_norm(&a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>());
        d / math::l2_norm(b).max(1.0)
    }

    #[test]
    fn likelihood_special_cases() {
        let m = small(OutputFactor::ExpScale(0.0));
        assert!((marginal_likelihood(&m, &m.theta).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(posterior_grad_enum(&m, &m.theta).unwrap(), vec![0.0, 0.0]);

        let m = small(OutputFactor::ExpScale(1.3));
        let a = marginal_likelihood(&m, &m.theta).unwrap();
        let b = marginal_likelihood_factorized(&m, &m.theta).unwrap();
        assert!((a - b).abs() <= 1e-12 * b);

        let d = m.dirac(&[2, 1]).unwrap();
        let z = 0.3 * 2.0 + libm::tanh(-0.2 + 1.0);
        assert!((marginal_likelihood(&d, &d.theta).unwrap() - libm::exp(1.3 * z)).abs() < 1e-12);
    }

    #[test]
    fn gradients_agree() {
        for lik in [
            OutputFactor::ExpScale(0.7),
            OutputFactor::NegLossTemp {
                loss: Loss::SquaredError { target: 0.4 },
                temperature: 0.5,
            },
            OutputFactor::NegLossTemp {
                loss: Loss::Logistic { label: 1.0 },
                temperature: 2.0,
            },
        ] {
            let m = small(lik);
            let g = posterior_grad_enum(&m, &m.theta).unwrap();
            assert!(rel(&g, &fd(&m, &m.theta)) < 1e-6, "{lik:?}");
            let (l, r) = dirac_limit_check(&m, &m.theta, &[0, 1]).unwrap();
            assert!(math::max_abs_diff(&l, &r) < 1e-10);
        }
        let m = small(OutputFactor::ExpScale(0.7));
        let bp = posterior_grad_bp(&m, &m.theta).unwrap();
        assert!(math::max_abs_diff(&bp, &posterior_grad_enum(&m, &m.theta).unwrap()) < 1e-10);
        let m = small(OutputFactor::NegLossTemp {
            loss: Loss::Logistic { label: 0.0 },
            temperature: 1.0,
        });
        assert!(matches!(
            posterior_grad_bp(&m, &m.theta),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn single_input_ratio() {
        let m = small(OutputFactor::ExpScale(0.7));
        let one = DiscretePriorModel::new(
            vec![m.grids[0].clone()],
            vec![m.priors[0].clone()],
            vec![0.3],
            vec![m.terms[0].clone()],
            m.likelihood,
        )
        .unwrap();
        let (num, den) =
            one.grids[0]
                .iter()
                .zip(one.priors[0].probs())
                .fold((0.0, 0.0), |(n, d), (&x, &p)| {
                    let w = p * libm::exp(0.7 * 0.3 * x);
                    (n + w * 0.7 * x, d + w)
                });
        let g = posterior_grad_bp(&one, &one.theta).unwrap();
        assert!((g[0] - num / den).abs() < 1e-14);
    }

    #[test]
    fn loss_minimum_gives_zero() {
        let z = 0.3 * 0.5 + libm::tanh(-0.2);
        let m = small(OutputFactor::NegLossTemp {
            loss: Loss::SquaredError { target: z },
            temperature: 1.0,
        });
        let (l, r) = dirac_limit_check(&m, &m.theta, &[1, 0]).unwrap();
        assert!(l.iter().chain(&r).all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn budget_and_wiring_errors() {
        let m = small(OutputFactor::ExpScale(1.0));
        assert!(matches!(
            posterior_grad_enum_with_budget(&m, &m.theta, 5),
            Err(Error::BudgetExceeded { size: 6, budget: 5 })
        ));
        let mut terms = m.terms.clone();
        terms[0].theta.clear();
        assert!(DiscretePriorModel::new(
            m.grids.clone(),
            m.priors.clone(),
            m.theta.clone(),
            terms,
            m.likelihood
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn random_models(seed in any::<u64>(), exp in any::<bool>()) {
            let p = ModelParams { inputs: 3, grid: 4, theta: 3, exp_scale: exp };
            let m = random_model(p, seed).unwrap();
            let g = posterior_grad_enum(&m, &m.theta).unwrap();
            prop_assert!(rel(&g, &fd(&m, &m.theta)) < 1e-6);
            if exp {
                let bp = posterior_grad_bp(&m, &m.theta).unwrap();
                prop_assert!(math::max_abs_diff(&bp, &g) < 1e-10);
                let a = marginal_likelihood(&m, &m.theta).unwrap();
                let b = marginal_likelihood_factorized(&m, &m.theta).unwrap();
                prop_assert!((a - b).abs() <= 1e-10 * b);
            }
            let x: Vec<usize> = (0..m.n_inputs()).map(|i| (seed as usize >> i) % m.grids[i].len()).collect();
            let (l, r) = dirac_limit_check(&m, &m.theta, &x).unwrap();
            prop_assert!(math::max_abs_diff(&l, &r) < 1e-10);
        }
    }
}
