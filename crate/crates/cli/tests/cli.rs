use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name)
}

fn hamavg(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hamavg"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .env_remove("HAMAVG_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn graph_of_double_well_has_three_edges() {
    let tmp = tempfile::tempdir().unwrap();
    let h2 = config("h2.toml");
    let out = hamavg(&["graph", "--config", h2.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let g: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(tmp.path().join("graph.json")).unwrap()).unwrap();
    assert_eq!(g["edges"].as_array().unwrap().len(), 3);
    let m = manifest(tmp.path());
    assert_eq!(m["outputs"], serde_json::json!(["graph.json"]));
    assert_eq!(m["seed"], 7);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn check_passes_on_single_well() {
    let tmp = tempfile::tempdir().unwrap();
    let h1 = config("h1.toml");
    let out = hamavg(&["check", "--config", h1.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!String::from_utf8_lossy(&out.stdout).contains("FAIL"));
    assert_eq!(manifest(tmp.path())["verdict"], "PASS");
}

#[test]
fn failing_check_exits_with_two() {
    // next to the four-fold saddle of H3 the derivative residual exceeds 1e-3
    let tmp = tempfile::tempdir().unwrap();
    let h2 = config("h2.toml");
    let out = hamavg(&["check", "--config", h2.to_str().unwrap(), "--set", "system.builtin=H3"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(manifest(tmp.path())["verdict"], "FAIL");
}

#[test]
fn step_beyond_horizon_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    let h1 = config("h1.toml");
    let out = hamavg(&["sim2d", "--config", h1.to_str().unwrap(), "--set", "sde.dt=2.0"], &dir);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[sde]"));
    assert!(!dir.exists(), "nothing is written before validation passes");
}

#[test]
fn unknown_keys_and_missing_sections_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let h1 = config("h1.toml");
    let out = hamavg(&["graph", "--config", h1.to_str().unwrap(), "--set", "system.colour=red"], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    let out = hamavg(&["study", "--config", h1.to_str().unwrap()], tmp.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[study]"));
}

#[test]
fn same_seed_gives_identical_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let h2 = config("h2.toml");
    let run = |sub: &str, dir: &str, seed: &str| {
        let d = tmp.path().join(dir);
        let args = [sub, "--config", h2.to_str().unwrap(), "--seed", seed, "--set", "sde.n_paths=50", "--set", "graph_sde.n_paths=50"];
        let out = hamavg(&args, &d);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        std::fs::read(d.join(format!("{sub}.csv"))).unwrap()
    };
    for sub in ["sim2d", "simgraph"] {
        let a = run(sub, &format!("{sub}-a"), "5");
        let b = run(sub, &format!("{sub}-b"), "5");
        let c = run(sub, &format!("{sub}-c"), "6");
        assert_eq!(a, b, "{sub} not reproducible");
        assert_ne!(a, c, "{sub} ignores the seed");
    }
    let header = String::from_utf8(run("sim2d", "hdr", "1")).unwrap();
    assert!(header.starts_with("path,t,x1,x2,H,edge_id,vertex_id,m\n"));
}

#[test]
fn study_writes_one_row_per_alpha_and_time() {
    let tmp = tempfile::tempdir().unwrap();
    let h2 = config("h2.toml");
    let args = ["study", "--config", h2.to_str().unwrap(), "--set", "study.n_paths=200", "--set", "study.alphas=[0.5, 0.1]"];
    let out = hamavg(&args, tmp.path());
    assert!(matches!(out.status.code(), Some(0 | 2)), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(tmp.path().join("study.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "alpha,t,W1,KS,noise_floor");
    assert_eq!(lines.len(), 1 + 2 * 2);
    let m = manifest(tmp.path());
    assert_eq!(m["outputs"], serde_json::json!(["study.csv", "study.json"]));
}
