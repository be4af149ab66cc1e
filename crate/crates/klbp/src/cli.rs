//! Command-line front end.
//!
//! Exit codes: 0 all checks pass, 1 unreadable or unwritable file, 2 schema
//! violation or bad arguments, 3 structural validation failure, 4 a check
//! failed, 5 the operation itself failed.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use klbp_core::dag::forward_eval;
use klbp_core::factor_graph::{bp_run_loopy, bp_run_tree, LOOPY_MAX_ITER, LOOPY_TOL};
use klbp_core::gen::{self, ModelParams, Rng, SpnParams};
use klbp_core::geometry::{DistVec, Generator, JointShape};
use klbp_core::lift::{replicate_lift, t_proj_residual, wr_run};
use klbp_core::posterior::dirac_limit_check;
use klbp_core::spn::{
    downward_pass, gate_report, kkt_multipliers, lipschitz_probe, region_two_step, upward_pass,
    validate_spn, variable_marginals_log, Evidence, LogBox,
};

use crate::checks;
use crate::formats::{
    self, DagJson, EvidenceJson, FactorGraphJson, FamilyJson, LoadedSpn, ModelJson, ProjectionJson,
    SpnJson,
};
use crate::oracle::{self, ConstraintSpec};
use crate::report::{to_json_string, Check, RunReport};
use crate::FormatError;

#[derive(Debug, Parser)]
#[command(
    name = "klbp",
    version,
    about = "Belief propagation, backpropagation and circuit inference with oracle checks"
)]
struct Cli {
    /// Write the report (or generated instance) here instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Add wall-clock time to the report. Reports are then no longer byte-stable.
    #[arg(long, global = true)]
    timing: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Sum-product network passes.
    #[command(subcommand)]
    Spn(SpnCmd),
    /// Factor-graph message passing, lifts and projections.
    #[command(subcommand)]
    Fg(FgCmd),
    /// Computation-graph evaluation and adjoints.
    #[command(subcommand)]
    Dag(DagCmd),
    /// Parameter gradients of discrete-prior models.
    #[command(subcommand)]
    Posterior(PosteriorCmd),
    /// Batch comparisons against brute-force references.
    #[command(subcommand)]
    Oracle(OracleCmd),
    /// Random instance generation.
    #[command(subcommand)]
    Gen(GenCmd),
}

#[derive(Debug, Args)]
struct CircuitArgs {
    #[arg(long)]
    circuit: PathBuf,
    /// Indicator values per variable; all ones when omitted.
    #[arg(long)]
    evidence: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum SpnCmd {
    /// Completeness and decomposability checks.
    Validate {
        #[arg(long)]
        circuit: PathBuf,
    },
    /// Circuit value and per-node derivatives.
    Eval(CircuitArgs),
    /// Posterior marginals from one upward and one downward pass.
    Marginals {
        #[command(flatten)]
        input: CircuitArgs,
        /// Use the log-domain passes.
        #[arg(long)]
        log: bool,
    },
    /// Local gate beliefs and the visit-probability factorization.
    Gates(CircuitArgs),
    /// Visit probabilities, edge flows and multiplier identities.
    Kkt(CircuitArgs),
    /// Two-step region consensus over single-variable groups.
    Region(CircuitArgs),
    /// Sampled Lipschitz bound of the marginal map on a log-indicator box.
    Lipschitz {
        #[command(flatten)]
        input: CircuitArgs,
        /// Lower bound of every log-indicator coordinate.
        #[arg(long, default_value_t = -std::f64::consts::LN_2, allow_hyphen_values = true)]
        lo: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        hi: f64,
        #[arg(long, default_value_t = 200)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum GeneratorArg {
    Kl,
    Mahalanobis,
}

#[derive(Debug, Subcommand)]
enum FgCmd {
    /// Sum-product BP, exact on trees and iterated on loopy graphs.
    Bp {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        damping: f64,
        #[arg(long, default_value_t = LOOPY_TOL)]
        tol: f64,
        #[arg(long, default_value_t = LOOPY_MAX_ITER)]
        max_iter: usize,
    },
    /// Alternating projections on the replicated lift.
    Wr {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_enum, default_value_t = GeneratorArg::Kl)]
        generator: GeneratorArg,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long, default_value_t = 5000)]
        max_iter: usize,
    },
    /// Closed-form projection checked against the numeric solver.
    Project {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct DagArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Input values as `id=value,id=value`.
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    at: String,
}

#[derive(Debug, Subcommand)]
enum DagCmd {
    /// Forward values.
    Eval(DagArgs),
    /// Reverse-mode belief adjoints.
    Adjoints {
        #[command(flatten)]
        input: DagArgs,
        /// `exp:α`, `sq:target:T` or `logistic:label:T`.
        #[arg(long, allow_hyphen_values = true)]
        factor: String,
    },
    /// Belief slopes under random gauge shifts of the output factor.
    Gauge {
        #[command(flatten)]
        input: DagArgs,
        #[arg(long, allow_hyphen_values = true)]
        factor: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum PosteriorCmd {
    /// Log marginal likelihood gradient by enumeration and message passing.
    Grad {
        #[arg(long)]
        model: PathBuf,
    },
    /// Gradient at a point-mass prior against the direct derivative.
    Dirac {
        #[arg(long)]
        model: PathBuf,
        /// Grid index per input, comma separated.
        #[arg(long)]
        at: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Kind {
    Spn,
    Fg,
    Dag,
    Posterior,
}

#[derive(Debug, Subcommand)]
enum OracleCmd {
    /// Random instances of one kind (or all) against the oracles.
    Compare {
        #[arg(long, value_enum, required_unless_present = "all")]
        kind: Option<Kind>,
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum GenCmd {
    /// Random valid circuit.
    Spn {
        #[arg(long, default_value_t = 3)]
        vars: usize,
        /// Largest alphabet size.
        #[arg(long, default_value_t = 2)]
        states: usize,
        #[arg(long, default_value_t = 25)]
        nodes: usize,
        /// Allow shared sub-circuits.
        #[arg(long)]
        shared: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the generated indicator values here.
        #[arg(long)]
        evidence: Option<PathBuf>,
    },
    /// Random tree or 3-cycle factor graph.
    Fg {
        #[arg(long, default_value_t = 4)]
        vars: usize,
        #[arg(long, default_value_t = 3)]
        card: usize,
        /// A binary 3-cycle instead of a tree.
        #[arg(long)]
        cycle: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random computation graph.
    Dag {
        #[arg(long, default_value_t = 2)]
        inputs: usize,
        #[arg(long, default_value_t = 16)]
        nodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Random discrete-prior model.
    Posterior {
        #[arg(long, default_value_t = 2)]
        inputs: usize,
        #[arg(long, default_value_t = 5)]
        grid: usize,
        #[arg(long, default_value_t = 2)]
        theta: usize,
        #[arg(long)]
        exp_scale: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Schema(String),
    Structure(Vec<String>),
    Op(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Io(_) => 1,
            Failure::Schema(_) => 2,
            Failure::Structure(_) => 3,
            Failure::Op(_) => 5,
        }
    }
}

impl From<FormatError> for Failure {
    fn from(e: FormatError) -> Self {
        match e {
            FormatError::Schema(m) => Failure::Schema(m),
            FormatError::Structure(v) => Failure::Structure(v),
        }
    }
}

impl From<klbp_core::Error> for Failure {
    fn from(e: klbp_core::Error) -> Self {
        Failure::Op(e.to_string())
    }
}

type Outcome<T> = Result<T, Failure>;

enum Output {
    Report(RunReport),
    Files(Vec<(Option<PathBuf>, String)>),
}

/// Runs one invocation; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return e.exit_code();
        }
    };
    let echo: Vec<String> = args
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    let start = Instant::now();
    let mut report = RunReport::new(echo.clone());
    let result = dispatch(&cli, &mut report);
    let (output, code) = match result {
        Ok(Output::Report(mut r)) => {
            if cli.timing {
                r.wall_time_s = Some(start.elapsed().as_secs_f64());
            }
            let code = if r.pass { 0 } else { 4 };
            (Output::Report(r), code)
        }
        Ok(files) => (files, 0),
        Err(Failure::Structure(issues)) => {
            let _ = writeln!(stderr, "invalid structure:");
            for i in &issues {
                let _ = writeln!(stderr, "  {i}");
            }
            let mut r = RunReport::new(echo);
            r.inputs = report.inputs;
            r.outputs = json!({ "valid": false, "violations": issues });
            r.pass = false;
            (Output::Report(r), 3)
        }
        Err(e) => {
            let msg = match &e {
                Failure::Io(m) | Failure::Schema(m) | Failure::Op(m) => m.clone(),
                Failure::Structure(_) => unreachable!(),
            };
            let _ = writeln!(stderr, "error: {msg}");
            return e.code();
        }
    };
    let files = match output {
        Output::Report(r) => vec![(cli.out.clone(), r.to_json())],
        Output::Files(f) => f,
    };
    for (path, text) in files {
        let written = match path {
            Some(p) => std::fs::write(&p, text).map_err(|e| format!("{}: {e}", p.display())),
            None => stdout.write_all(text.as_bytes()).map_err(|e| e.to_string()),
        };
        if let Err(m) = written {
            let _ = writeln!(stderr, "error: {m}");
            return 1;
        }
    }
    code
}

fn dispatch(cli: &Cli, r: &mut RunReport) -> Outcome<Output> {
    match &cli.command {
        Command::Spn(c) => spn(c, r).map(|()| Output::Report(r.clone())),
        Command::Fg(c) => fg(c, r).map(|()| Output::Report(r.clone())),
        Command::Dag(c) => dag(c, r).map(|()| Output::Report(r.clone())),
        Command::Posterior(c) => posterior(c, r).map(|()| Output::Report(r.clone())),
        Command::Oracle(OracleCmd::Compare {
            kind,
            all,
            count,
            seed,
        }) => {
            let kinds = if *all {
                vec![Kind::Spn, Kind::Fg, Kind::Dag, Kind::Posterior]
            } else {
                kind.iter().copied().collect()
            };
            compare(&kinds, *count, *seed, r)?;
            Ok(Output::Report(r.clone()))
        }
        Command::Gen(c) => generate(c, cli.out.clone()),
    }
}

// ---------------------------------------------------------------- input helpers

fn read(path: &Path, r: &mut RunReport) -> Outcome<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    r.add_input(&path.display().to_string(), &bytes);
    Ok(bytes)
}

fn parse<T: DeserializeOwned>(path: &Path, r: &mut RunReport) -> Outcome<T> {
    let bytes = read(path, r)?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Schema(format!("{}: {e}", path.display())))
}

fn load_circuit(input: &CircuitArgs, r: &mut RunReport) -> Outcome<(LoadedSpn, Evidence)> {
    let json: SpnJson = parse(&input.circuit, r)?;
    let ev: Option<EvidenceJson> = input.evidence.as_deref().map(|p| parse(p, r)).transpose()?;
    let (spn, e) = formats::load_spn(&json, ev.as_ref())?;
    let e = e.unwrap_or_else(|| Evidence::ones(spn.circuit.cards()));
    Ok((spn, e))
}

fn per_var(spn: &LoadedSpn, rows: &[Vec<f64>]) -> Value {
    Value::Array(
        rows.iter()
            .enumerate()
            .map(|(i, m)| json!({ "var": spn.var_label(i), "values": m }))
            .collect(),
    )
}

fn node_id(spn: &LoadedSpn, n: usize) -> String {
    spn.node_ids[n].to_string()
}

fn enum_budget() -> usize {
    checks::budget(oracle::ENUM_BUDGET)
}

// ---------------------------------------------------------------- spn

fn spn(cmd: &SpnCmd, r: &mut RunReport) -> Outcome<()> {
    match cmd {
        SpnCmd::Validate { circuit } => {
            let json: SpnJson = parse(circuit, r)?;
            let (spn, _) = formats::load_spn(&json, None)?;
            let c = &spn.circuit;
            let report = validate_spn(c);
            r.outputs = json!({
                "valid": report.is_valid(),
                "nodes": c.nodes().len(),
                "sum_nodes": checks::sum_nodes(c),
                "variables": (0..c.n_vars()).map(|i| spn.var_label(i)).collect::<Vec<_>>(),
                "cardinalities": c.cards(),
                "tree": c.is_tree(),
                "depth": c.depth(),
            });
            r.check(Check::holds("complete and decomposable", report.is_valid()));
        }
        SpnCmd::Eval(input) => {
            let (spn, e) = load_circuit(input, r)?;
            let c = &spn.circuit;
            let v = upward_pass(c, &e)?;
            let adj = downward_pass(c, &v);
            let cmp = checks::compare_spn(c, &e, enum_budget())?;
            let s_enum = oracle::enumerate_spn_value(c, &e, enum_budget())?;
            r.outputs = json!({
                "s_e": cmp.s_e,
                "nodes": (0..c.nodes().len())
                    .map(|n| json!({ "id": node_id(&spn, n), "value": v.s[n], "derivative": adj.d[n] }))
                    .collect::<Vec<_>>(),
                "indicator_derivatives": per_var(&spn, &klbp_core::spn::derivative_sums(c, &adj)),
            });
            r.check(Check::new(
                "S(e) vs enumeration (rel)",
                checks::rel_err(cmp.s_e, s_enum),
                checks::ORACLE_TOL,
            ));
            r.check(Check::new(
                "Euler identity (rel)",
                cmp.euler_rel,
                checks::ORACLE_TOL,
            ));
        }
        SpnCmd::Marginals { input, log } => {
            let (spn, e) = load_circuit(input, r)?;
            let c = &spn.circuit;
            let cmp = checks::compare_spn(c, &e, enum_budget())?;
            let marginals = if *log {
                variable_marginals_log(c, &e)?
            } else {
                cmp.marginals.clone()
            };
            let want = oracle::enumerate_spn_marginals(c, &e, enum_budget())?;
            r.outputs = json!({ "s_e": cmp.s_e, "marginals": per_var(&spn, &marginals) });
            r.check(Check::new(
                "marginals vs enumeration",
                checks::max_abs(&marginals, &want),
                checks::ORACLE_TOL,
            ));
            r.check(Check::new(
                "normalization",
                cmp.normalization_err,
                checks::EXACT_TOL,
            ));
            r.check(Check::new(
                "Euler identity (rel)",
                cmp.euler_rel,
                checks::ORACLE_TOL,
            ));
            r.check(Check::holds("positivity", cmp.positive));
            r.check(Check::new(
                "d log S / d log lambda vs finite differences",
                cmp.fd_err,
                checks::FD_TOL,
            ));
        }
        SpnCmd::Gates(input) => {
            let (spn, e) = load_circuit(input, r)?;
            let c = &spn.circuit;
            let v = upward_pass(c, &e)?;
            let adj = downward_pass(c, &v);
            let gates = gate_report(c, &v, &adj);
            let cmp = checks::compare_gates(c, &e, enum_budget())?;
            r.outputs = json!({
                "gates": gates.iter().map(|g| json!({
                    "node": node_id(&spn, g.node),
                    "local": g.local,
                    "visit": g.visit,
                    "global": g.global,
                })).collect::<Vec<_>>(),
            });
            r.check(Check::new(
                "global = visit x local",
                cmp.factorization_err,
                checks::EXACT_TOL,
            ));
            r.check(Check::new(
                "root visit = 1",
                cmp.root_err,
                checks::EXACT_TOL,
            ));
            if let (Some(a), Some(b)) = (cmp.fg_err, cmp.fg_oracle_err) {
                r.check(Check::new(
                    "circuit vs activation-graph BP",
                    a,
                    checks::ORACLE_TOL,
                ));
                r.check(Check::new(
                    "activation-graph BP vs enumeration",
                    b,
                    checks::ORACLE_TOL,
                ));
            }
        }
        SpnCmd::Kkt(input) => {
            let (spn, e) = load_circuit(input, r)?;
            let c = &spn.circuit;
            let v = upward_pass(c, &e)?;
            let adj = downward_pass(c, &v);
            let k = kkt_multipliers(c, &v, &adj);
            let cmp = checks::compare_kkt(c, &e)?;
            r.outputs = json!({
                "visits": k.visit.iter().map(|&(n, p)| json!({ "node": node_id(&spn, n), "pi": p })).collect::<Vec<_>>(),
                "product_edges": k.edges.iter().map(|m| json!({
                    "parent": node_id(&spn, m.parent),
                    "child": node_id(&spn, m.child),
                    "mu": m.mu,
                })).collect::<Vec<_>>(),
            });
            r.check(Check::new(
                "D(s)/S(e) = pi(s)/S(s)",
                cmp.sum_residual,
                checks::EXACT_TOL,
            ));
            r.check(Check::new(
                "edge multipliers",
                cmp.edge_residual,
                checks::EXACT_TOL,
            ));
            r.check(Check::holds("pi in (0, 1]", cmp.visits_in_range));
            r.check(Check::holds("mu > 0", cmp.multipliers_positive));
        }
        SpnCmd::Region(input) => {
            let (spn, e) = load_circuit(input, r)?;
            let c = &spn.circuit;
            let fam = region_two_step(c, &e)?;
            let want = oracle::enumerate_spn_marginals(c, &e, enum_budget())?;
            let present: Vec<usize> = (0..c.n_vars())
                .filter(|&i| !fam.marginals[i].is_empty())
                .collect();
            let gap = present
                .iter()
                .map(|&i| checks::max_abs(&[fam.marginals[i].clone()], &[want[i].clone()]))
                .fold(0.0, f64::max);
            r.outputs = json!({
                "groups": fam.groups.iter().map(|g| g.iter().map(|&n| node_id(&spn, n)).collect::<Vec<_>>()).collect::<Vec<_>>(),
                "regions": fam.regions.iter().map(|reg| json!({
                    "node": node_id(&spn, reg.node),
                    "scope": reg.scope.iter().map(|&v| spn.var_label(v)).collect::<Vec<_>>(),
                    "table": reg.table,
                })).collect::<Vec<_>>(),
                "marginals": per_var(&spn, &fam.marginals),
                "root_marginals": fam.root_marginals,
                "max_gap_to_enumeration": gap,
            });
        }
        SpnCmd::Lipschitz {
            input,
            lo,
            hi,
            samples,
            seed,
        } => {
            let (spn, _) = load_circuit(input, r)?;
            let c = &spn.circuit;
            let rep = lipschitz_probe(c, &LogBox::uniform(c.cards(), *lo, *hi), *samples, *seed)?;
            r.outputs =
                json!({ "l_hat": rep.l_hat, "worst_ratio": rep.worst_ratio, "pairs": rep.pairs });
            r.check(Check::holds("all pairs within 1.05 L_hat", rep.pass));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- factor graphs

fn fg(cmd: &FgCmd, r: &mut RunReport) -> Outcome<()> {
    match cmd {
        FgCmd::Bp {
            graph,
            damping,
            tol,
            max_iter,
        } => {
            let json: FactorGraphJson = parse(graph, r)?;
            let loaded = formats::load_fg(&json)?;
            let g = &loaded.graph;
            let labels: Vec<String> = loaded.var_ids.iter().map(|i| i.to_string()).collect();
            let want = oracle::enumerate_fg_marginals(g, enum_budget())?;
            let (mode, beliefs, extra) = if g.is_forest() {
                ("tree", bp_run_tree(g)?.beliefs, json!({}))
            } else {
                let run = bp_run_loopy(g, *damping, *tol, *max_iter)?;
                let b = klbp_core::factor_graph::bp_beliefs(g, &run.messages)?;
                r.check(Check::holds("loopy BP converged", run.converged));
                (
                    "loopy",
                    b,
                    json!({ "iterations": run.iterations, "residual": run.residual }),
                )
            };
            let gap = checks::max_abs(&beliefs, &want);
            r.outputs = json!({
                "mode": mode,
                "beliefs": labels.iter().zip(&beliefs).map(|(l, b)| json!({ "var": l, "values": b })).collect::<Vec<_>>(),
                "run": extra,
                "max_gap_to_enumeration": gap,
            });
            if mode == "tree" {
                r.check(Check::new(
                    "tree BP vs enumeration",
                    gap,
                    checks::ORACLE_TOL,
                ));
            }
        }
        FgCmd::Wr {
            graph,
            generator,
            tol,
            max_iter,
        } => {
            let json: FactorGraphJson = parse(graph, r)?;
            let loaded = formats::load_fg(&json)?;
            let g = &loaded.graph;
            let space = replicate_lift(g)?;
            let gen = match generator {
                GeneratorArg::Kl => Generator::NegativeEntropy,
                GeneratorArg::Mahalanobis => {
                    Generator::Mahalanobis(checks::banded_metric(space.size())?)
                }
            };
            let run = wr_run(&space, gen, *tol, *max_iter)?;
            let beliefs = run.state.beliefs(&space);
            let labels: Vec<String> = loaded.var_ids.iter().map(|i| i.to_string()).collect();
            let residual = match generator {
                GeneratorArg::Kl => Some(t_proj_residual(
                    &DistVec::new(run.state.q.clone())?,
                    &space,
                )?),
                GeneratorArg::Mahalanobis => None,
            };
            r.outputs = json!({
                "iterations": run.iterations,
                "step_norm": run.step_norm,
                "converged": run.converged,
                "beliefs": labels.iter().zip(&beliefs).map(|(l, b)| json!({ "var": l, "values": b })).collect::<Vec<_>>(),
                "t_proj_residual": residual,
            });
            r.check(Check::holds("iterates settled", run.converged));
            if matches!(generator, GeneratorArg::Kl) && g.is_forest() {
                let want = oracle::enumerate_fg_marginals(g, enum_budget())?;
                r.check(Check::new(
                    "beliefs vs enumeration",
                    checks::max_abs(&beliefs, &want),
                    checks::ORACLE_TOL,
                ));
            }
        }
        FgCmd::Project { input, seed } => {
            let p: ProjectionJson = parse(input, r)?;
            let spec = projection_spec(&p)?;
            let cmp = checks::compare_projection(&spec, &p.q, *seed)?;
            r.outputs = json!({
                "closed_form": cmp.closed_form,
                "numeric": cmp.numeric,
                "multistart_spread": cmp.spread,
            });
            r.check(Check::new(
                "closed form vs numeric",
                cmp.err,
                checks::FD_TOL,
            ));
            r.check(Check::new(
                "multi-start agreement",
                cmp.spread,
                checks::SPREAD_TOL,
            ));
            if let Some(e) = cmp.pythagorean_err {
                r.check(Check::new("Pythagorean identity", e, checks::ORACLE_TOL));
            }
        }
    }
    Ok(())
}

fn projection_spec(p: &ProjectionJson) -> Outcome<ConstraintSpec> {
    let shape = |groups: Vec<Vec<usize>>| {
        if p.axes.is_empty() {
            return Err(Failure::Schema(
                "\"axes\" is required for this family".into(),
            ));
        }
        JointShape::new(p.axes.clone(), groups).map_err(|e| Failure::Structure(vec![e.to_string()]))
    };
    Ok(match p.family {
        FamilyJson::Diagonal => {
            let groups = if p.groups.is_empty() {
                vec![(0..p.axes.len()).collect()]
            } else {
                p.groups.clone()
            };
            ConstraintSpec::DiagonalFace(shape(groups)?)
        }
        FamilyJson::Product => ConstraintSpec::ProductFamily(shape(Vec::new())?),
        FamilyJson::Copies => ConstraintSpec::EqualCopies(
            p.count
                .ok_or_else(|| Failure::Schema("\"count\" is required for copies".into()))?,
        ),
    })
}

// ---------------------------------------------------------------- computation graphs

fn parse_at(json: &DagJson, at: &str) -> Outcome<BTreeMap<usize, f64>> {
    let mut out = BTreeMap::new();
    for part in at.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (id, v) = part
            .split_once('=')
            .ok_or_else(|| Failure::Schema(format!("expected id=value, got {part:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Failure::Schema(format!("bad number in {part:?}")))?;
        out.insert(json.resolve(id.trim())?, v);
    }
    Ok(out)
}

fn dag(cmd: &DagCmd, r: &mut RunReport) -> Outcome<()> {
    let (input, factor) = match cmd {
        DagCmd::Eval(a) => (a, None),
        DagCmd::Adjoints { input, factor } | DagCmd::Gauge { input, factor, .. } => {
            (input, Some(factor))
        }
    };
    let json: DagJson = parse(&input.graph, r)?;
    let g = formats::load_dag(&json)?;
    let at = parse_at(&json, &input.at)?;
    let ids = json.node_ids();
    let factor = factor.map(|f| formats::parse_factor(f)).transpose()?;
    match cmd {
        DagCmd::Eval(_) => {
            let t = forward_eval(&g, &at)?;
            r.outputs = json!({
                "z": t.output(&g),
                "nodes": ids.iter().zip(&t.values).map(|(i, v)| json!({ "id": i.to_string(), "value": v })).collect::<Vec<_>>(),
            });
        }
        DagCmd::Adjoints { .. } => {
            let cmp = checks::compare_dag(&g, &at, factor.as_ref().expect("factor parsed"))?;
            r.outputs = json!({
                "z": cmp.z,
                "seed": cmp.seed,
                "adjoints": ids.iter().zip(&cmp.adjoints).map(|(i, s)| json!({ "id": i.to_string(), "s": s })).collect::<Vec<_>>(),
            });
            r.check(Check::new(
                "adjoints vs tape accumulator (rel)",
                cmp.tape_rel,
                checks::EXACT_TOL,
            ));
            r.check(Check::new(
                "adjoints vs finite differences (rel)",
                cmp.fd_rel,
                checks::FD_TOL,
            ));
        }
        DagCmd::Gauge { seed, .. } => {
            let cmp =
                checks::compare_gauge(&g, &at, factor.as_ref().expect("factor parsed"), *seed)?;
            r.outputs = json!({
                "slopes": cmp.slopes.iter().map(|&(v, a, b)| json!({
                    "id": ids[v].to_string(),
                    "slope": a,
                    "rescaled_slope": b,
                })).collect::<Vec<_>>(),
            });
            r.check(Check::new(
                "slopes unchanged by message rescaling",
                cmp.max_change,
                checks::EXACT_TOL,
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- posterior

fn posterior(cmd: &PosteriorCmd, r: &mut RunReport) -> Outcome<()> {
    match cmd {
        PosteriorCmd::Grad { model } => {
            let json: ModelJson = parse(model, r)?;
            let m = formats::load_model(&json)?;
            let cmp = checks::compare_posterior(&m, &m.theta, enum_budget())?;
            r.outputs = json!({
                "log_marginal_likelihood": cmp.log_ml,
                "grad_enum": cmp.grad_enum,
                "grad_bp": cmp.grad_bp,
            });
            r.check(Check::new(
                "enumeration vs finite differences (rel)",
                cmp.fd_rel,
                checks::FD_TOL,
            ));
            if let Some(e) = cmp.bp_err {
                r.check(Check::new(
                    "message passing vs enumeration",
                    e,
                    checks::ORACLE_TOL,
                ));
            }
        }
        PosteriorCmd::Dirac { model, at } => {
            let json: ModelJson = parse(model, r)?;
            let m = formats::load_model(&json)?;
            let x: Vec<usize> = at
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Failure::Schema(format!("bad grid index {s:?}")))
                })
                .collect::<Outcome<_>>()?;
            let (left, right) = dirac_limit_check(&m, &m.theta, &x)?;
            let err = left
                .iter()
                .zip(&right)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            r.outputs = json!({ "collapsed_gradient": left, "adjoint_gradient": right });
            r.check(Check::new("Dirac limit", err, checks::ORACLE_TOL));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- oracle compare

#[derive(Default)]
struct Worst(BTreeMap<&'static str, f64>);

impl Worst {
    fn put(&mut self, k: &'static str, v: f64) {
        let e = self.0.entry(k).or_insert(0.0);
        // NaN sticks.
        if !(v <= *e) {
            *e = v;
        }
    }
}

fn compare(kinds: &[Kind], count: usize, seed: u64, r: &mut RunReport) -> Outcome<()> {
    let budget = enum_budget();
    let mut outputs = serde_json::Map::new();
    for &kind in kinds {
        let mut w = Worst::default();
        let mut failures = 0usize;
        for k in 0..count {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(k as u64);
            let mut rng = Rng::new(s ^ 0x5eed);
            let ok = match kind {
                Kind::Spn => {
                    let params = SpnParams {
                        vars: rng.between(1, 4),
                        states: 3,
                        max_nodes: 25,
                        share: k % 2 == 1,
                    };
                    let (c, e) = gen::random_spn(params, s)?;
                    let cmp = checks::compare_spn(&c, &e, budget)?;
                    w.put("marginals vs enumeration", cmp.oracle_err);
                    w.put("Euler identity (rel)", cmp.euler_rel);
                    w.put("finite differences", cmp.fd_err);
                    let g = checks::compare_gates(&c, &e, budget)?;
                    w.put("gate factorization", g.factorization_err);
                    w.put("root visit", g.root_err);
                    if let (Some(a), Some(b)) = (g.fg_err, g.fg_oracle_err) {
                        w.put("activation-graph BP", a.max(b));
                    }
                    let kkt = checks::compare_kkt(&c, &e)?;
                    w.put("KKT identities", kkt.sum_residual.max(kkt.edge_residual));
                    cmp.positive && kkt.visits_in_range && kkt.multipliers_positive
                }
                Kind::Fg => {
                    let fg = gen::random_tree_fg(rng.between(1, 6), 3, s)?;
                    w.put(
                        "tree BP vs enumeration",
                        checks::compare_fg_tree(&fg, budget)?,
                    );
                    true
                }
                Kind::Dag => {
                    let inputs = rng.between(1, 3);
                    let g = gen::random_dag(inputs, 20, s)?;
                    let at: BTreeMap<usize, f64> = g
                        .input_nodes()
                        .into_iter()
                        .map(|v| (v, rng.range(-1.0, 1.0)))
                        .collect();
                    let alpha = rng.range(-2.0, 2.0);
                    let cmp = checks::compare_dag(
                        &g,
                        &at,
                        &klbp_core::dag::OutputFactor::ExpScale(alpha),
                    )?;
                    w.put("adjoints vs tape (rel)", cmp.tape_rel);
                    w.put("adjoints vs finite differences (rel)", cmp.fd_rel);
                    true
                }
                Kind::Posterior => {
                    let params = ModelParams {
                        inputs: rng.between(1, 3),
                        grid: 5,
                        theta: 2,
                        exp_scale: k % 2 == 0,
                    };
                    let m = gen::random_model(params, s)?;
                    let cmp = checks::compare_posterior(&m, &m.theta, budget)?;
                    w.put("enumeration vs finite differences (rel)", cmp.fd_rel);
                    if let Some(e) = cmp.bp_err {
                        w.put("message passing vs enumeration", e);
                    }
                    true
                }
            };
            failures += usize::from(!ok);
        }
        let name = match kind {
            Kind::Spn => "spn",
            Kind::Fg => "fg",
            Kind::Dag => "dag",
            Kind::Posterior => "posterior",
        };
        for (&check, &err) in &w.0 {
            let tol = if check.contains("finite differences") {
                checks::FD_TOL
            } else if matches!(
                check,
                "gate factorization" | "root visit" | "KKT identities" | "adjoints vs tape (rel)"
            ) {
                checks::EXACT_TOL
            } else {
                checks::ORACLE_TOL
            };
            r.check(Check::new(format!("{name}: {check}"), err, tol));
        }
        r.check(Check::holds(
            format!("{name}: sign conditions"),
            failures == 0,
        ));
        outputs.insert(
            name.to_string(),
            json!({ "instances": count, "worst": w.0 }),
        );
    }
    r.outputs = Value::Object(outputs);
    Ok(())
}

// ---------------------------------------------------------------- generation

fn instance<T: Serialize>(v: &T) -> String {
    to_json_string(v)
}

fn generate(cmd: &GenCmd, out: Option<PathBuf>) -> Outcome<Output> {
    let files = match cmd {
        GenCmd::Spn {
            vars,
            states,
            nodes,
            shared,
            seed,
            evidence,
        } => {
            let (c, e) = gen::random_spn(
                SpnParams {
                    vars: *vars,
                    states: *states,
                    max_nodes: *nodes,
                    share: *shared,
                },
                *seed,
            )?;
            let mut f = vec![(out, instance(&formats::spn_to_json(&c)))];
            if let Some(p) = evidence {
                f.push((Some(p.clone()), instance(&formats::evidence_to_json(&e))));
            }
            f
        }
        GenCmd::Fg {
            vars,
            card,
            cycle,
            seed,
        } => {
            let fg = if *cycle {
                gen::random_cycle_fg(*seed)?
            } else {
                gen::random_tree_fg(*vars, *card, *seed)?
            };
            vec![(out, instance(&formats::fg_to_json(&fg)))]
        }
        GenCmd::Dag {
            inputs,
            nodes,
            seed,
        } => {
            vec![(
                out,
                instance(&formats::dag_to_json(&gen::random_dag(
                    *inputs, *nodes, *seed,
                )?)),
            )]
        }
        GenCmd::Posterior {
            inputs,
            grid,
            theta,
            exp_scale,
            seed,
        } => {
            let m = gen::random_model(
                ModelParams {
                    inputs: *inputs,
                    grid: *grid,
                    theta: *theta,
                    exp_scale: *exp_scale,
                },
                *seed,
            )?;
            vec![(out, instance(&formats::model_to_json(&m)))]
        }
    };
    Ok(Output::Files(files))
}
