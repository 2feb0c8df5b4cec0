use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    [env!("CARGO_MANIFEST_DIR"), "examples", "configs", name].iter().collect()
}

fn mfbsde(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfbsde")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap()
}

#[test]
fn check_exit_codes() {
    let scalar = config("scalar_game.json");
    let out = mfbsde(&["check", path_str(&scalar)]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["h2"]["pass"], true);

    let ex3 = config("example3.json");
    let out = mfbsde(&["check", path_str(&ex3)]);
    assert_eq!(code(&out), 2);
    let r = json(&out);
    assert!(r["h2"]["eta1"].is_null());
    assert_eq!(r["h2"]["norm_d"], 1.0);
    assert_eq!(r["h2"]["d_condition"], false);

    let affine = config("h1prime.json");
    let out = mfbsde(&["check", path_str(&affine), "--probes", "500"]);
    assert_eq!(code(&out), 0);
    assert_eq!(json(&out)["smallness"]["pass"], true);

    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(&ex3).unwrap();
    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    let out = mfbsde(&["check", path_str(&truncated)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn solve_exit_codes_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let affine = config("h1prime.json");
    let out = mfbsde(&["solve", path_str(&affine), "--out", path_str(dir.path())]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let diag = std::fs::read_to_string(dir.path().join("diagnostics.jsonl")).unwrap();
    let gaps: Vec<f64> = diag
        .lines()
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            v["gap_XT"].as_f64().unwrap() + v["gap_U"].as_f64().unwrap()
        })
        .collect();
    assert!(gaps.len() >= 2 && gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    let moments = std::fs::read_to_string(dir.path().join("moments.csv")).unwrap();
    assert_eq!(moments.lines().count(), 1 + 51);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["converged"], true);

    let out = mfbsde(&["solve", path_str(&affine), "--max-outer", "0"]);
    assert_eq!(code(&out), 1);

    let ex3 = config("example3.json");
    let out = mfbsde(&["solve", path_str(&ex3), "--particles", "1000"]);
    assert_eq!(code(&out), 3);
    assert_eq!(json(&out)["converged"], false);
}

#[test]
fn threads_flag_and_env() {
    let affine = config("h1prime.json");
    let args = ["solve", path_str(&affine), "--particles", "200", "--steps", "10"];
    let out = Command::new(env!("CARGO_BIN_EXE_mfbsde")).args(args).env("MFBSDE_THREADS", "1").output().unwrap();
    assert_eq!(code(&out), 0);
    let out = Command::new(env!("CARGO_BIN_EXE_mfbsde")).args(args).env("MFBSDE_THREADS", "many").output().unwrap();
    assert_eq!(code(&out), 1);
    let mut with_flag = args.to_vec();
    with_flag.extend(["--threads", "0"]);
    assert_eq!(code(&mfbsde(&with_flag)), 1);
}

#[test]
fn game_exit_codes() {
    let scalar = config("scalar_game.json");
    let out = mfbsde(&["game", path_str(&scalar)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("J_0 = "));
    let r = json(&out);
    assert_eq!(r["deviation_pass"], true);
    assert_eq!(r["deviations"][0]["outcomes"].as_array().unwrap().len(), 20);

    let out = mfbsde(&["game", path_str(&scalar), "--corrupt-control", "0.5"]);
    assert_eq!(code(&out), 4);

    let dir = tempfile::tempdir().unwrap();
    let mut cfg: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&scalar).unwrap()).unwrap();
    cfg["problem"]["game"].as_object_mut().unwrap().remove("players");
    let missing = dir.path().join("missing.json");
    std::fs::write(&missing, cfg.to_string()).unwrap();
    let out = mfbsde(&["game", path_str(&missing)]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("players"));

    let affine = config("h1prime.json");
    assert_eq!(code(&mfbsde(&["game", path_str(&affine)])), 1);
}

#[test]
fn counterexample_command() {
    let out = mfbsde(&["counterexample", "--T", "0.5"]);
    assert_eq!(code(&out), 0);
    let r = json(&out);
    assert_eq!(r["outcome"], "solution");
    assert!((r["det"].as_f64().unwrap() - 1.25).abs() < 1e-9);
    let y: Vec<f64> = r["terminal_mean"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert!((y[0] - 2.8).abs() < 1e-9 && (y[1] - 3.2).abs() < 1e-9, "{y:?}");

    let out = mfbsde(&["counterexample", "--T", "1.0"]);
    assert_eq!(code(&out), 0);
    let r = json(&out);
    assert_eq!(r["outcome"], "nonexistence");
    assert!(r["det"].as_f64().unwrap().abs() < 1e-9);

    let out = mfbsde(&["counterexample", "--T-sweep", "0:2:0.1"]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<(f64, f64)> = text
        .lines()
        .skip(1)
        .map(|l| {
            let (t, d) = l.split_once(',').unwrap();
            (t.parse().unwrap(), d.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 21);
    for (t, d) in &rows {
        assert!((d - (1.0 - t) * (1.0 + 3.0 * t)).abs() < 1e-9, "T={t}");
    }
    // the root at T = 1 may land on either side of zero; count sign flips away from it
    let signs: Vec<bool> = rows.iter().filter(|(_, d)| d.abs() > 1e-9).map(|(_, d)| *d > 0.0).collect();
    assert_eq!(signs.windows(2).filter(|w| w[0] != w[1]).count(), 1);

    assert_eq!(code(&mfbsde(&["counterexample", "--T", "0"])), 1);
    assert_eq!(code(&mfbsde(&["counterexample", "--T", "-2"])), 1);
    assert_eq!(code(&mfbsde(&["counterexample"])), 1);
}
