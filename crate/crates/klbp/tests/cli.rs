use std::path::PathBuf;
use std::process::Command;

use serde_json::Value;

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
        .display()
        .to_string()
}

fn run(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut argv = vec!["klbp"];
    argv.extend_from_slice(args);
    let code = klbp::cli::run(argv, &mut out, &mut err);
    (
        code,
        String::from_utf8(out).unwrap(),
        String::from_utf8(err).unwrap(),
    )
}

fn report(args: &[&str]) -> (i32, Value) {
    let (code, out, err) = run(args);
    let v = serde_json::from_str(&out).unwrap_or_else(|e| panic!("{e}: {out} {err}"));
    (code, v)
}

fn check_named<'a>(r: &'a Value, name: &str) -> &'a Value {
    r["checks"]
        .as_array()
        .unwrap()
        .iter()
        .find(|c| c["name"] == name)
        .unwrap_or_else(|| panic!("no check {name}"))
}

#[test]
fn e1_marginals() {
    let (code, r) = report(&[
        "spn",
        "marginals",
        "--circuit",
        &data("e1.json"),
        "--evidence",
        &data("e1_lambda.json"),
    ]);
    assert_eq!(code, 0);
    assert_eq!(r["schema"], "v1");
    let x = &r["outputs"]["marginals"][0];
    assert_eq!(x["var"], "X");
    assert!((x["values"][0].as_f64().unwrap() - 0.7894737).abs() < 1e-7);
    assert!(
        check_named(&r, "marginals vs enumeration")["error"]
            .as_f64()
            .unwrap()
            <= 1e-10
    );
    assert_eq!(r["inputs"].as_array().unwrap().len(), 2);
}

#[test]
fn e1_log_domain_marginals_agree() {
    let (code, r) = report(&[
        "spn",
        "marginals",
        "--log",
        "--circuit",
        &data("e1.json"),
        "--evidence",
        &data("e1_lambda.json"),
    ]);
    assert_eq!(code, 0);
    assert!(
        (r["outputs"]["marginals"][1]["values"][1].as_f64().unwrap() - 0.16 / 0.76).abs() < 1e-12
    );
}

#[test]
fn logistic_adjoints() {
    let (code, r) = report(&[
        "dag",
        "adjoints",
        "--graph",
        &data("logistic.json"),
        "--factor",
        "exp:2",
        "--at",
        "w=0,x=1",
    ]);
    assert_eq!(code, 0);
    let adj = r["outputs"]["adjoints"].as_array().unwrap();
    assert_eq!(adj[0]["id"], "w");
    assert_eq!(adj[0]["s"].as_f64().unwrap(), 0.5);
    assert_eq!(adj[1]["s"].as_f64().unwrap(), 0.0);
}

#[test]
fn gauge_and_other_circuit_reports_pass() {
    let (code, _) = report(&[
        "dag",
        "gauge",
        "--graph",
        &data("logistic.json"),
        "--factor",
        "sq:1:0.5",
        "--at",
        "w=0.3,x=-1.2",
    ]);
    assert_eq!(code, 0);
    for cmd in ["eval", "gates", "kkt", "lipschitz"] {
        let (code, r) = report(&[
            "spn",
            cmd,
            "--circuit",
            &data("e1.json"),
            "--evidence",
            &data("e1_lambda.json"),
        ]);
        assert_eq!(code, 0, "{cmd}: {r}");
        assert_eq!(r["pass"], true);
    }
}

#[test]
fn non_decomposable_circuit_exits_3() {
    let (code, r) = report(&["spn", "validate", "--circuit", &data("bad.json")]);
    assert_eq!(code, 3);
    assert_eq!(r["outputs"]["valid"], false);
    assert!(!r["outputs"]["violations"].as_array().unwrap().is_empty());
}

#[test]
fn error_codes() {
    let (code, _, err) = run(&["spn", "validate", "--circuit", "/nonexistent/c.json"]);
    assert_eq!(code, 1);
    assert!(err.contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.json");
    std::fs::write(&junk, "{\"nodes\": 3}").unwrap();
    assert_eq!(
        run(&["spn", "validate", "--circuit", junk.to_str().unwrap()]).0,
        2
    );

    // Each single-variable group of E1 puts its mass on a different state.
    let (code, _, err) = run(&[
        "spn",
        "region",
        "--circuit",
        &data("e1.json"),
        "--evidence",
        &data("e1_lambda.json"),
    ]);
    assert_eq!(code, 5);
    assert!(err.contains("common support"));

    assert_eq!(run(&["spn", "frobnicate"]).0, 2);
}

#[test]
fn reports_are_byte_stable() {
    let args = [
        "spn",
        "gates",
        "--circuit",
        &data("e1.json"),
        "--evidence",
        &data("e1_lambda.json"),
    ];
    let a = run(&args).1;
    assert_eq!(a, run(&args).1);
    assert!(!a.contains("wall_time_s"));
    let mut timed = vec!["--timing"];
    timed.extend_from_slice(&args);
    assert!(run(&timed).1.contains("wall_time_s"));
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r.json");
    let (code, stdout, _) = run(&[
        "--out",
        out.to_str().unwrap(),
        "spn",
        "validate",
        "--circuit",
        &data("e1.json"),
    ]);
    assert_eq!(code, 0);
    assert!(stdout.is_empty());
    let r: Value = serde_json::from_str(&std::fs::read_to_string(out).unwrap()).unwrap();
    assert_eq!(r["outputs"]["tree"], true);
}

#[test]
fn generation_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    for path in ["a.json", "b.json"] {
        let ev = p(&format!("ev_{path}"));
        assert_eq!(
            run(&[
                "gen",
                "spn",
                "--vars",
                "3",
                "--states",
                "2",
                "--seed",
                "1",
                "--out",
                &p(path),
                "--evidence",
                &ev
            ])
            .0,
            0
        );
    }
    assert_eq!(
        std::fs::read(p("a.json")).unwrap(),
        std::fs::read(p("b.json")).unwrap()
    );
    assert_eq!(
        std::fs::read(p("ev_a.json")).unwrap(),
        std::fs::read(p("ev_b.json")).unwrap()
    );
    assert_eq!(run(&["spn", "validate", "--circuit", &p("a.json")]).0, 0);
    assert_eq!(
        run(&[
            "spn",
            "marginals",
            "--circuit",
            &p("a.json"),
            "--evidence",
            &p("ev_a.json")
        ])
        .0,
        0
    );

    let kinds: [(&str, &[&str]); 4] = [
        ("fg", &["--vars", "5"]),
        ("fg", &["--cycle"]),
        ("dag", &["--inputs", "2"]),
        ("posterior", &["--exp-scale"]),
    ];
    for (kind, extra) in kinds {
        let mut args = vec!["gen", kind, "--seed", "4"];
        args.extend_from_slice(extra);
        let (c1, o1, _) = run(&args);
        let (c2, o2, _) = run(&args);
        assert_eq!((c1, c2), (0, 0));
        assert_eq!(o1, o2, "{kind}");
    }
}

#[test]
fn generated_instances_pass_their_checks() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    run(&[
        "gen",
        "fg",
        "--vars",
        "5",
        "--seed",
        "9",
        "--out",
        &p("fg.json"),
    ]);
    assert_eq!(run(&["fg", "bp", "--graph", &p("fg.json")]).0, 0);
    assert_eq!(run(&["fg", "wr", "--graph", &p("fg.json")]).0, 0);

    run(&[
        "gen",
        "dag",
        "--inputs",
        "1",
        "--seed",
        "9",
        "--out",
        &p("dag.json"),
    ]);
    assert_eq!(
        run(&[
            "dag",
            "adjoints",
            "--graph",
            &p("dag.json"),
            "--factor",
            "exp:-1.5",
            "--at",
            "0=0.4"
        ])
        .0,
        0
    );

    run(&[
        "gen",
        "posterior",
        "--inputs",
        "2",
        "--grid",
        "4",
        "--seed",
        "9",
        "--out",
        &p("m.json"),
    ]);
    assert_eq!(run(&["posterior", "grad", "--model", &p("m.json")]).0, 0);
}

#[test]
fn projection_examples() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        r#"{"q":[0.1,0.2,0.3,0.4],"family":"product","axes":[2,2]}"#,
        r#"{"q":[0.5,0.5,0.9,0.1],"family":"copies","count":2}"#,
        r#"{"q":[0.3,0.1,0.1,0.5],"family":"diagonal","axes":[2,2]}"#,
    ];
    let want = [
        vec![0.12, 0.18, 0.28, 0.42],
        vec![0.75, 0.25],
        vec![0.375, 0.0, 0.0, 0.625],
    ];
    for (i, (case, want)) in cases.iter().zip(&want).enumerate() {
        let path = dir.path().join(format!("{i}.json"));
        std::fs::write(&path, case).unwrap();
        let (code, r) = report(&["fg", "project", "--input", path.to_str().unwrap()]);
        assert_eq!(code, 0, "{r}");
        let got: Vec<f64> = r["outputs"]["closed_form"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        assert!(
            got.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12),
            "{got:?}"
        );
    }
}

#[test]
fn loopy_graph_reports_residual() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("cycle.json").display().to_string();
    run(&["gen", "fg", "--cycle", "--seed", "2", "--out", &g]);
    let (code, r) = report(&["fg", "bp", "--graph", &g]);
    assert_eq!(code, 0);
    assert_eq!(r["outputs"]["mode"], "loopy");
    let (code, r) = report(&["fg", "wr", "--graph", &g, "--generator", "mahalanobis"]);
    assert_eq!(code, 0);
    assert_eq!(r["outputs"]["converged"], true);
}

#[test]
fn oracle_compare_small_batch() {
    for kind in ["spn", "fg", "dag", "posterior"] {
        let (code, r) = report(&[
            "oracle", "compare", "--kind", kind, "--count", "8", "--seed", "3",
        ]);
        assert_eq!(code, 0, "{r}");
        assert_eq!(r["outputs"][kind]["instances"], 8);
    }
}

#[test]
fn budget_override_from_environment() {
    let out = Command::new(env!("CARGO_BIN_EXE_klbp"))
        .args(["spn", "marginals", "--circuit", &data("e1.json")])
        .env("KLBP_BUDGET", "2")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(5));
    assert!(String::from_utf8_lossy(&out.stderr).contains("budget"));
    let ok = Command::new(env!("CARGO_BIN_EXE_klbp"))
        .args(["spn", "marginals", "--circuit", &data("e1.json")])
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
}
