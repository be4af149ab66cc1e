//! Seeded random instances: circuits, factor graphs, computation DAGs and
//! grid models.
//!
//! Every generator is a pure function of its size parameters and seed.

use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::dag::{CompGraph, Loss, Node, Op, OutputFactor};
use crate::error::{Error, Result};
use crate::factor_graph::{Factor, FactorGraph};
use crate::geometry::DistVec;
use crate::posterior::{DiscretePriorModel, ScoreTerm};
use crate::spn::{Evidence, SpnCircuit, SpnNode};

pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn unit(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        (self.0.next_u64() % n as u64) as usize
    }

    /// Uniform integer in `lo..=hi`.
    pub fn between(&mut self, lo: usize, hi: usize) -> usize {
        lo + self.below(hi - lo + 1)
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn shuffle<T>(&mut self, v: &mut [T]) {
        for i in (1..v.len()).rev() {
            v.swap(i, self.below(i + 1));
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpnParams {
    pub vars: usize,
    pub states: usize,
    pub max_nodes: usize,
    /// Allow shared single-variable sub-circuits (DAG instead of tree).
    pub share: bool,
}

struct SpnBuilder<'a> {
    rng: &'a mut Rng,
    cards: Vec<usize>,
    nodes: Vec<SpnNode>,
    share: bool,
    branch: usize,
    shared: Vec<Option<usize>>,
}

impl SpnBuilder<'_> {
    fn push(&mut self, n: SpnNode) -> usize {
        self.nodes.push(n);
        self.nodes.len() - 1
    }

    fn weight(&mut self) -> f64 {
        self.rng.range(0.1, 2.0)
    }

    fn univariate(&mut self, v: usize) -> usize {
        if self.share {
            if let Some(n) = self.shared[v] {
                if self.rng.coin(0.5) {
                    return n;
                }
            }
        }
        let n = if self.cards[v] == 1 {
            self.push(SpnNode::Leaf { var: v, state: 0 })
        } else {
            let mut states: Vec<usize> = (0..self.cards[v]).collect();
            self.rng.shuffle(&mut states);
            let leaves: Vec<usize> = states
                .iter()
                .map(|&t| self.push(SpnNode::Leaf { var: v, state: t }))
                .collect();
            let children = leaves.into_iter().map(|l| (l, self.weight())).collect();
            self.push(SpnNode::Sum { children })
        };
        self.shared[v] = Some(n);
        n
    }

    fn product(&mut self, scope: &[usize]) -> usize {
        let mut scope = scope.to_vec();
        self.rng.shuffle(&mut scope);
        let k = self.rng.between(2, self.branch.min(scope.len()).max(2));
        // Cut the shuffled scope into k non-empty runs.
        let mut cuts: Vec<usize> = (1..scope.len()).collect();
        self.rng.shuffle(&mut cuts);
        let mut cuts: Vec<usize> = cuts.into_iter().take(k - 1).collect();
        cuts.sort_unstable();
        cuts.push(scope.len());
        let mut start = 0;
        let mut children = Vec::new();
        for c in cuts {
            let mut block = scope[start..c].to_vec();
            block.sort_unstable();
            children.push(self.sum(&block));
            start = c;
        }
        self.push(SpnNode::Product { children })
    }

    fn sum(&mut self, scope: &[usize]) -> usize {
        if scope.len() == 1 {
            return self.univariate(scope[0]);
        }
        let k = self.rng.between(1, self.branch);
        let children: Vec<(usize, f64)> = (0..k)
            .map(|_| {
                let p = self.product(scope);
                (p, self.weight())
            })
            .collect();
        if children.len() == 1 && self.rng.coin(0.5) {
            return children[0].0;
        }
        self.push(SpnNode::Sum { children })
    }
}

/// Random complete, decomposable circuit alternating sum and product layers
/// over random scope partitions, with positive soft evidence in `[0.1, 1]`.
pub fn random_spn(params: SpnParams, seed: u64) -> Result<(SpnCircuit, Evidence)> {
    if params.vars == 0 || params.states == 0 {
        return Err(Error::Invalid(
            "need at least one variable and one state".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let cards: Vec<usize> = (0..params.vars)
        .map(|_| rng.between(1, params.states))
        .collect();
    for branch in (2..=3).rev() {
        for _ in 0..16 {
            let mut b = SpnBuilder {
                rng: &mut rng,
                cards: cards.clone(),
                nodes: Vec::new(),
                share: params.share,
                branch,
                shared: vec![None; params.vars],
            };
            let all: Vec<usize> = (0..params.vars).collect();
            let root = b.sum(&all);
            if b.nodes.len() <= params.max_nodes {
                let nodes = b.nodes;
                // Put the root first so ids read top-down.
                let (nodes, root) = reorder_root_first(nodes, root);
                let c = SpnCircuit::new(nodes, root, cards.clone())?;
                let lambda = cards
                    .iter()
                    .map(|&k| (0..k).map(|_| rng.range(0.1, 1.0)).collect())
                    .collect();
                return Ok((c, Evidence { lambda }));
            }
        }
    }
    Err(Error::Invalid("no circuit fits the node budget".into()))
}

fn reorder_root_first(nodes: Vec<SpnNode>, root: usize) -> (Vec<SpnNode>, usize) {
    let n = nodes.len();
    // Reverse creation order puts parents before children.
    let new_id = |i: usize| n - 1 - i;
    let out = nodes
        .into_iter()
        .rev()
        .map(|node| match node {
            SpnNode::Sum { children } => SpnNode::Sum {
                children: children.into_iter().map(|(c, w)| (new_id(c), w)).collect(),
            },
            SpnNode::Product { children } => SpnNode::Product {
                children: children.into_iter().map(new_id).collect(),
            },
            leaf => leaf,
        })
        .collect();
    (out, new_id(root))
}

/// Random tree factor graph: a unary on each variable plus one pairwise
/// factor per edge of a random tree. Entries in `[0.1, 3]`.
pub fn random_tree_fg(vars: usize, max_card: usize, seed: u64) -> Result<FactorGraph> {
    let mut rng = Rng::new(seed);
    let cards: Vec<usize> = (0..vars).map(|_| rng.between(1, max_card)).collect();
    let mut factors = Vec::new();
    let table = |rng: &mut Rng, n: usize| (0..n).map(|_| rng.range(0.1, 3.0)).collect::<Vec<f64>>();
    for v in 0..vars {
        factors.push(Factor {
            vars: vec![v],
            table: table(&mut rng, cards[v]),
        });
    }
    for child in 1..vars {
        let parent = rng.below(child);
        let vs = if rng.coin(0.5) {
            vec![parent, child]
        } else {
            vec![child, parent]
        };
        let t = table(&mut rng, cards[parent] * cards[child]);
        factors.push(Factor { vars: vs, table: t });
    }
    FactorGraph::new(cards, factors)
}

/// Three binary variables on a cycle with random pairwise and unary tables.
pub fn random_cycle_fg(seed: u64) -> Result<FactorGraph> {
    let mut rng = Rng::new(seed);
    let mut factors = Vec::new();
    for (a, b) in [(0, 1), (1, 2), (2, 0)] {
        factors.push(Factor {
            vars: vec![a, b],
            table: (0..4).map(|_| rng.range(0.2, 3.0)).collect(),
        });
    }
    for v in 0..3 {
        factors.push(Factor {
            vars: vec![v],
            table: (0..2).map(|_| rng.range(0.2, 3.0)).collect(),
        });
    }
    FactorGraph::new(vec![2, 2, 2], factors)
}

/// Random DAG over the C¹ primitives whose output depends on every input.
/// Domain-sensitive ops are guarded so the graph evaluates on any input in
/// `[-2, 2]`: `log` and fractional `pow` see `softplus(·) + 0.1`, `div` sees
/// `exp(·)` in the denominator.
pub fn random_dag(inputs: usize, max_nodes: usize, seed: u64) -> Result<CompGraph> {
    if inputs == 0 || max_nodes < 2 * inputs + 1 {
        return Err(Error::Invalid("node budget too small".into()));
    }
    let mut rng = Rng::new(seed);
    let mut target = rng.between(inputs + 1, max_nodes);
    loop {
        let g = dag_attempt(&mut rng, inputs, target)?;
        if g.nodes().len() <= max_nodes {
            return Ok(g);
        }
        if target == inputs + 1 {
            return Err(Error::Invalid("node budget too small".into()));
        }
        target -= 1;
    }
}

fn dag_attempt(rng: &mut Rng, inputs: usize, target: usize) -> Result<CompGraph> {
    let mut nodes: Vec<Node> = (0..inputs)
        .map(|_| Node {
            op: Op::Input,
            inputs: vec![],
        })
        .collect();
    let push = |nodes: &mut Vec<Node>, op: Op, ins: Vec<usize>| {
        nodes.push(Node { op, inputs: ins });
        nodes.len() - 1
    };
    while nodes.len() < target {
        let pick = |rng: &mut Rng, n: usize| n - 1 - rng.below(n.min(6));
        let a = pick(rng, nodes.len());
        let b = rng.below(nodes.len());
        match rng.below(12) {
            0 => push(&mut nodes, Op::Add, vec![a, b]),
            1 => push(&mut nodes, Op::Sub, vec![a, b]),
            2 => push(&mut nodes, Op::Mul, vec![a, b]),
            3 => {
                let t = push(&mut nodes, Op::Tanh, vec![a]);
                let e = push(&mut nodes, Op::Exp, vec![t]);
                push(&mut nodes, Op::Div, vec![b, e])
            }
            4 => {
                let t = push(&mut nodes, Op::Tanh, vec![a]);
                push(&mut nodes, Op::Exp, vec![t])
            }
            5 => {
                let s = push(&mut nodes, Op::Softplus, vec![a]);
                let c = push(&mut nodes, Op::Constant(0.1), vec![]);
                let g = push(&mut nodes, Op::Add, vec![s, c]);
                push(&mut nodes, Op::Log, vec![g])
            }
            6 => push(&mut nodes, Op::Sigmoid, vec![a]),
            7 => push(&mut nodes, Op::Tanh, vec![a]),
            8 => push(&mut nodes, Op::Softplus, vec![a]),
            9 => {
                let t = push(&mut nodes, Op::Tanh, vec![a]);
                push(&mut nodes, Op::Pow(rng.between(2, 3) as f64), vec![t])
            }
            10 => {
                let s = push(&mut nodes, Op::Softplus, vec![a]);
                let c = push(&mut nodes, Op::Constant(0.1), vec![]);
                let g = push(&mut nodes, Op::Add, vec![s, c]);
                push(&mut nodes, Op::Pow(0.5), vec![g])
            }
            _ => {
                let c = push(&mut nodes, Op::Constant(rng.range(-1.5, 1.5)), vec![]);
                push(&mut nodes, Op::Mul, vec![a, c])
            }
        };
    }
    // Fold every node without children (and every input) into the output so
    // nothing is dead and every input matters.
    let mut has_child = vec![false; nodes.len()];
    for n in &nodes {
        for &i in &n.inputs {
            has_child[i] = true;
        }
    }
    let mut live: Vec<usize> = (0..nodes.len())
        .filter(|&i| !has_child[i] && !matches!(nodes[i].op, Op::Constant(_)))
        .collect();
    for i in 0..inputs {
        if !live.contains(&i) {
            live.push(i);
        }
    }
    let mut acc = live[0];
    for &i in &live[1..] {
        acc = push(&mut nodes, Op::Add, vec![acc, i]);
    }
    let out = push(&mut nodes, Op::Tanh, vec![acc]);
    CompGraph::new(nodes, out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub inputs: usize,
    /// Largest grid size.
    pub grid: usize,
    pub theta: usize,
    /// Exponential likelihood instead of a random loss-based one.
    pub exp_scale: bool,
}

/// Random grid model: each term is a random DAG on `x_i` and one or two
/// components of `θ`; grids in `[-1.5, 1.5]`, priors and `θ` random.
pub fn random_model(params: ModelParams, seed: u64) -> Result<DiscretePriorModel> {
    if params.inputs == 0 || params.grid == 0 || params.theta == 0 {
        return Err(Error::Invalid(
            "model needs inputs, grid points and parameters".into(),
        ));
    }
    let mut rng = Rng::new(seed);
    let mut grids = Vec::new();
    let mut priors = Vec::new();
    let mut terms = Vec::new();
    for _ in 0..params.inputs {
        let n = rng.between(1, params.grid);
        grids.push((0..n).map(|_| rng.range(-1.5, 1.5)).collect::<Vec<f64>>());
        priors.push(DistVec::normalize(
            &(0..n).map(|_| rng.range(0.1, 1.0)).collect::<Vec<f64>>(),
        )?);
        let k = rng.between(1, params.theta.min(2));
        let mut idx: Vec<usize> = (0..params.theta).collect();
        rng.shuffle(&mut idx);
        let graph = random_dag(1 + k, 16, rng.0.next_u64())?;
        let theta = idx[..k]
            .iter()
            .enumerate()
            .map(|(j, &t)| (t, j + 1))
            .collect();
        terms.push(ScoreTerm {
            graph,
            x_node: 0,
            theta,
        });
    }
    let theta = (0..params.theta).map(|_| rng.range(-1.0, 1.0)).collect();
    let likelihood = if params.exp_scale {
        OutputFactor::ExpScale(rng.range(-2.0, 2.0))
    } else if rng.coin(0.5) {
        OutputFactor::NegLossTemp {
            loss: Loss::SquaredError {
                target: rng.range(-1.0, 1.0),
            },
            temperature: rng.range(0.5, 2.0),
        }
    } else {
        let label = if rng.coin(0.5) { 1.0 } else { 0.0 };
        OutputFactor::NegLossTemp {
            loss: Loss::Logistic { label },
            temperature: rng.range(0.5, 2.0),
        }
    };
    DiscretePriorModel::new(grids, priors, theta, terms, likelihood)
}
