use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use coreplan::features::{compute_core_residual, CoreSetFile, FeatureFile, WitnessFile};
use coreplan::mdp::MdpFile;
use coreplan::{CoreSet, FeatureMap, LinearMdpWitness, Mdp};
use serde_json::Value;

fn coreplan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coreplan"))
        .args(args)
        .env("COREPLAN_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = coreplan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn gen(dir: &Path, states: &str, actions: &str, dim: &str, seed: &str) {
    ok(&[
        "gen",
        "--out",
        s(dir),
        "--states",
        states,
        "--actions",
        actions,
        "--dim",
        dim,
        "--seed",
        seed,
    ]);
}

const INSTANCE_FILES: [&str; 4] = ["mdp.json", "features.json", "coreset.json", "witness.json"];

#[test]
fn gen_writes_reloadable_deterministic_instances() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), "10", "3", "4", "1");
    gen(b.path(), "10", "3", "4", "1");
    for f in INSTANCE_FILES {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }

    let read = |f: &str| fs::read_to_string(a.path().join(f)).unwrap();
    let mdp = Mdp::from_file(serde_json::from_str::<MdpFile>(&read("mdp.json")).unwrap()).unwrap();
    let phi = FeatureMap::from_file(serde_json::from_str::<FeatureFile>(&read("features.json")).unwrap()).unwrap();
    let core = CoreSet::from_file(
        serde_json::from_str::<CoreSetFile>(&read("coreset.json")).unwrap(),
        &phi,
    )
    .unwrap();
    let witness =
        LinearMdpWitness::from_file(serde_json::from_str::<WitnessFile>(&read("witness.json")).unwrap(), 10).unwrap();
    assert_eq!((mdp.num_states(), mdp.num_actions(), phi.dim()), (10, 3, 4));
    let check = compute_core_residual(&phi, core.core_indices(), core.interp().clone()).unwrap();
    assert!(check.eps_core().amax() <= 1e-12);
    let (p, r) = witness.residuals(&mdp, &phi).unwrap();
    assert!(p <= 1e-12 && r <= 1e-12);

    let meta = &json(&a.path().join("mdp.json"))["meta"];
    assert_eq!(meta["instance_hash"].as_str().unwrap().len(), 64);
    assert_eq!(meta["config"]["seed"], 1);
    assert!(meta["version"].as_str().unwrap().starts_with('v'));
}

#[test]
fn gen_rejects_dimension_above_pair_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = coreplan(&[
        "gen",
        "--out",
        s(dir.path()),
        "--dim",
        "100",
        "--states",
        "5",
        "--actions",
        "3",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("X*A"), "{err}");
    assert!(!dir.path().join("mdp.json").exists());
}

#[test]
fn explicit_schedule_reports_query_count() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "10", "3", "4", "1");
    let stdout = ok(&[
        "plan",
        "--out",
        s(dir.path()),
        "--T",
        "100",
        "--K",
        "10",
        "--seeds",
        "4",
    ]);
    assert!(stdout.contains("transition_queries=1100"), "{stdout}");
    let result = json(&dir.path().join("run/seed-4/result.json"));
    assert_eq!(result["transition_queries"], 1100);
    assert_eq!(result["T"], 100);
    assert_eq!(result["K"], 10);
    assert_eq!(result["theta_cum"].as_array().unwrap().len(), 4);
    assert!(dir.path().join("run/seed-4/trace.csv").exists());
}

#[test]
fn epsilon_schedule_follows_inner_loop_rule() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "6", "2", "3", "2");
    ok(&["plan", "--out", s(dir.path()), "--epsilon", "2.0", "--no-trace"]);
    let result = json(&dir.path().join("run/seed-0/result.json"));
    let m = json(&dir.path().join("coreset.json"))["core_indices"]
        .as_array()
        .unwrap()
        .len() as f64;
    let t = result["T"].as_u64().unwrap() as f64;
    let k = result["K"].as_u64().unwrap() as f64;
    assert_eq!(k, (t / (m * m * (m * 2.0).ln())).ceil());
    assert_eq!(result["epsilon"], 2.0);
    assert_eq!(result["transition_queries"].as_f64().unwrap(), t * (k + 1.0));
}

#[test]
fn rerun_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "8", "2", "3", "3");
    let args = |run: &str| {
        ok(&[
            "plan",
            "--out",
            s(dir.path()),
            "--T",
            "60",
            "--seeds",
            "1,2",
            "--run-dir",
            run,
        ]);
    };
    args("a");
    args("b");
    for seed in ["seed-1", "seed-2"] {
        for f in ["result.json", "trace.csv"] {
            let a = fs::read_to_string(dir.path().join("a").join(seed).join(f)).unwrap();
            let b = fs::read_to_string(dir.path().join("b").join(seed).join(f)).unwrap();
            // the config echo names the run directory; everything else matches
            assert_eq!(a.replace("\"a\"", "\"b\""), b, "{seed}/{f}");
        }
    }
}

#[test]
fn contradictory_plan_flags_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "4", "2", "2", "0");
    let out = coreplan(&["plan", "--out", s(dir.path()), "--epsilon", "0.5", "--T", "10"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--epsilon"));
    let out = coreplan(&["plan", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = coreplan(&["plan", "--out", s(dir.path()), "--T", "10", "--seeds", "1,1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn audit_of_linear_run_matches_suboptimality() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "6", "2", "3", "5");
    ok(&["plan", "--out", s(dir.path()), "--T", "40", "--seeds", "7"]);
    let stdout = ok(&["audit", "--out", s(dir.path()), "--run", "run/seed-7"]);
    assert!(stdout.contains("certificate: PASS"), "{stdout}");
    let report = json(&dir.path().join("run/seed-7/report.json"));
    let gap = report["gap"].as_f64().unwrap();
    let subopt = report["mean_subopt"].as_f64().unwrap();
    assert!((gap - subopt).abs() <= 1e-8, "{gap} vs {subopt}");
    assert!(report["decomposition_residual"].as_f64().unwrap() <= 1e-10);
    assert_eq!(report["comparator"], "witness");
    let cert = &report["certificate"];
    assert_eq!(cert["passed"], true);
    for key in ["primal_residual", "dual_residual", "objective_gap"] {
        assert!(cert[key].as_f64().unwrap() <= 1e-8, "{key}: {}", cert[key]);
    }
    assert!(report["eps_approx_bound"].as_f64().unwrap() >= 0.0);

    let csv = fs::read_to_string(dir.path().join("run/seed-7/audit.csv")).unwrap();
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("t,L_left,L_right,subopt_t"));
    assert_eq!(lines.count(), 40);
    assert!(csv.starts_with("# version: v"));
}

#[test]
fn audit_refuses_foreign_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    gen(a.path(), "6", "2", "3", "1");
    gen(b.path(), "6", "2", "3", "2");
    ok(&["plan", "--out", s(a.path()), "--T", "20"]);
    let run = a.path().join("run/seed-0");
    let out = coreplan(&["audit", "--out", s(b.path()), "--run", s(&run)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("instance hash mismatch"));

    // a trace whose preamble was rewritten is refused as well
    let trace = run.join("trace.csv");
    let text = fs::read_to_string(&trace).unwrap();
    let hash = json(&a.path().join("mdp.json"))["meta"]["instance_hash"]
        .as_str()
        .unwrap()
        .to_string();
    fs::write(&trace, text.replace(&hash, &"0".repeat(64))).unwrap();
    let out = coreplan(&["audit", "--out", s(a.path()), "--run", "run/seed-0"]);
    assert_eq!(out.status.code(), Some(3));
}

fn summary_rows(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("epsilon,T,K,queries,subopt_mean,gap,seed"));
    lines.map(|l| l.split(',').map(str::to_string).collect()).collect()
}

#[test]
fn tuned_query_counts_scale_as_inverse_fourth_power() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "10", "3", "4", "1");
    ok(&["sweep", "--out", s(dir.path()), "--epsilons", "0.4,0.2", "--tune-only"]);
    let rows = summary_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 2);
    let q: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    let ratio = q[1] / q[0];
    assert!((14.0..=18.0).contains(&ratio), "ratio {ratio}");
    assert!(rows.iter().all(|r| r[4].is_empty() && r[5].is_empty()));
}

#[test]
fn longer_horizon_lowers_median_suboptimality_on_toggle() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["gen", "--out", s(dir.path()), "--toggle", "--gamma", "0.5"]);
    ok(&[
        "sweep",
        "--out",
        s(dir.path()),
        "--T",
        "1000,10000",
        "--seeds",
        "0,1,2,3,4,5,6,7,8,9",
    ]);
    let rows = summary_rows(&dir.path().join("sweep.csv"));
    assert_eq!(rows.len(), 20);
    let median = |t: &str| {
        let mut v: Vec<f64> = rows
            .iter()
            .filter(|r| r[1] == t)
            .map(|r| r[4].parse().unwrap())
            .collect();
        v.sort_by(f64::total_cmp);
        (v[4] + v[5]) / 2.0
    };
    let (short, long) = (median("1000"), median("10000"));
    assert!(long < short, "{long} !< {short}");
    // exact linear instance: the gap column equals the suboptimality column
    for r in &rows {
        let (sub, gap): (f64, f64) = (r[4].parse().unwrap(), r[5].parse().unwrap());
        assert!((sub - gap).abs() <= 1e-8);
    }
}

#[test]
fn empty_sweep_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    gen(dir.path(), "4", "2", "2", "0");
    let out = coreplan(&["sweep", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let out = coreplan(&["sweep", "--out", s(dir.path()), "--epsilons", ""]);
    assert_eq!(out.status.code(), Some(2));
}
