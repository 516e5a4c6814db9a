use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use hamavg::forms::{identity_suite, IdentityCheck, SuiteOptions};
use hamavg::graph_diffusion::{build_tables, default_rules, simulate_graph, EdgeTable, GraphInitial};
use hamavg::harness::{convergence_study, Verdict};
use hamavg::reeb::{build_reeb_graph, GraphPoint, ReebGraph};
use hamavg::sde::{project_trajectory, simulate_paths, InitialLaw};
use hamavg::Vec2;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{self, RunConfig, Validated};
use crate::{Cli, Command};

pub enum Status {
    Success,
    Failed,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    config_hash: String,
    seed: u64,
    versions: BTreeMap<&'a str, &'a str>,
    threads: usize,
    started_unix: u64,
    timings: Vec<(String, f64)>,
    outputs: Vec<String>,
    verdict: Option<String>,
    notes: Vec<String>,
}

/// Output directory plus the list of files written into it.
struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        serde_json::to_writer_pretty(f, value)?;
        Ok(())
    }

    fn csv(&mut self, name: &str) -> Result<csv::Writer<File>> {
        let path = self.path(name);
        csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))
    }
}

struct Timer {
    last: Instant,
    laps: Vec<(String, f64)>,
}

impl Timer {
    fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.laps.push((name.to_string(), (now - self.last).as_secs_f64()));
        self.last = now;
    }
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out_dir
        .clone()
        .or_else(|| std::env::var_os("HAMAVG_OUT_DIR").map(PathBuf::from))
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("hamavg-out"))
}

fn config_hash(cfg: &RunConfig) -> Result<String> {
    let digest = Sha256::digest(serde_json::to_vec(cfg)?);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn execute(cli: &Cli) -> Result<Status> {
    let started = Instant::now();
    let mut cfg = config::load(&cli.config, &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let valid = cfg.validate(cli.command)?;

    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| anyhow!("--threads: {e}"))?;
    }
    let dir = out_dir(cli, &cfg);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut out = Outputs { dir, files: Vec::new() };
    let mut timer = Timer { last: started, laps: Vec::new() };
    timer.lap("validate");

    let mut notes = Vec::new();
    let verdict = match cli.command {
        Command::Graph => graph_cmd(&cfg, &valid, &mut out, &mut timer)?,
        Command::Coeffs => coeffs_cmd(&cfg, &valid, &mut out, &mut timer)?,
        Command::Check => check_cmd(&cfg, &valid, &mut out, &mut timer)?,
        Command::Sim2d => sim2d_cmd(&cfg, &valid, &mut out, &mut timer, &mut notes)?,
        Command::Simgraph => simgraph_cmd(&cfg, &valid, &mut out, &mut timer, &mut notes)?,
        Command::Study => study_cmd(&cfg, &valid, &mut out, &mut timer, &mut notes)?,
    };

    let manifest = Manifest {
        command: cli.command.name(),
        config_hash: config_hash(&cfg)?,
        seed: cfg.seed,
        versions: BTreeMap::from([("hamavg", hamavg::VERSION), ("hamavg-cli", env!("CARGO_PKG_VERSION"))]),
        threads: rayon::current_num_threads(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        timings: timer.laps,
        outputs: out.files.clone(),
        verdict: verdict.map(|v| if v { "PASS" } else { "FAIL" }.to_string()),
        notes,
    };
    let path = out.dir.join("manifest.json");
    serde_json::to_writer_pretty(File::create(&path).with_context(|| format!("creating {}", path.display()))?, &manifest)?;
    println!("wrote {} and {}", out.files.join(", "), display(&path));
    Ok(if verdict == Some(false) { Status::Failed } else { Status::Success })
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn build_graph(cfg: &RunConfig, v: &Validated, timer: &mut Timer) -> Result<ReebGraph> {
    let g = build_reeb_graph(&v.system, v.domain, cfg.system.h_max, cfg.system.resolution)?;
    timer.lap("graph");
    Ok(g)
}

fn build_all(cfg: &RunConfig, v: &Validated, timer: &mut Timer) -> Result<(ReebGraph, Vec<EdgeTable>)> {
    let g = build_graph(cfg, v, timer)?;
    let tables = build_tables(&g, &v.system, cfg.system.table_levels, cfg.system.step)?;
    timer.lap("tables");
    Ok((g, tables))
}

fn graph_cmd(cfg: &RunConfig, v: &Validated, out: &mut Outputs, timer: &mut Timer) -> Result<Option<bool>> {
    let g = build_graph(cfg, v, timer)?;
    out.json("graph.json", &g)?;
    println!("{}: {} vertices, {} edges", g.system, g.vertices.len(), g.edges.len());
    Ok(None)
}

fn coeffs_cmd(cfg: &RunConfig, v: &Validated, out: &mut Outputs, timer: &mut Timer) -> Result<Option<bool>> {
    let (_, tables) = build_all(cfg, v, timer)?;
    let mut w = out.csv("coeffs.csv")?;
    w.write_record(["edge_id", "m", "T", "S2", "B0", "B1", "a", "b", "c", "d"])?;
    for t in &tables {
        for s in &t.samples {
            let row = [s.m, s.period, s.s2, s.b0, s.b1, s.a, s.b, s.c, s.d];
            let mut rec = vec![t.edge_id.to_string()];
            rec.extend(row.iter().map(f64::to_string));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    out.json("coeffs.json", &tables)?;
    Ok(None)
}

fn check_cmd(cfg: &RunConfig, v: &Validated, out: &mut Outputs, timer: &mut Timer) -> Result<Option<bool>> {
    let (g, tables) = build_all(cfg, v, timer)?;
    let opts = SuiteOptions { step: cfg.system.step, ..Default::default() };
    let report = identity_suite(&v.system, &Arc::new(g), &tables, &opts)?;
    timer.lap("identities");
    let rows: [(&str, IdentityCheck); 7] = [
        ("ibp", report.ibp),
        ("pullback", report.pullback),
        ("alpha_indep", report.alpha_indep),
        ("bprime_eq_c", report.bprime_eq_c),
        ("flux", report.flux),
        ("derivative_lemma", report.derivative_lemma),
        ("mass", report.mass),
    ];
    for (name, c) in rows {
        println!("{:<17} {}  residual {:.3e}  tolerance {:.1e}", name, if c.pass { "PASS" } else { "FAIL" }, c.residual, c.tolerance);
    }
    out.json("check.json", &report)?;
    Ok(Some(report.all_pass()))
}

fn graph_columns(p: Option<&GraphPoint>) -> [String; 2] {
    match p {
        Some(GraphPoint::Edge { edge, .. }) => [edge.to_string(), String::new()],
        Some(GraphPoint::Vertex { vertex }) => [String::new(), vertex.to_string()],
        None => [String::new(), String::new()],
    }
}

fn sim2d_cmd(
    cfg: &RunConfig,
    v: &Validated,
    out: &mut Outputs,
    timer: &mut Timer,
    notes: &mut Vec<String>,
) -> Result<Option<bool>> {
    let sde = v.sde.as_ref().expect("validated");
    let init = cfg.initial.as_ref().expect("validated");
    let g = build_graph(cfg, v, timer)?;
    let law = match (init.point, init.edge, init.level) {
        (Some([x, y]), _, _) => InitialLaw::Point(Vec2::new(x, y)),
        (None, Some(edge), Some(level)) => {
            let seed = g.edge_seed(&v.system, edge, level).map_err(|e| anyhow!("[initial] {e}"))?;
            InitialLaw::level_set(&v.system, seed, cfg.system.step, true)?
        }
        _ => unreachable!("validated"),
    };
    let ens = simulate_paths(&v.system, sde, &law)?;
    timer.lap("simulate");
    let proj = project_trajectory(&g, &v.system, &ens);
    timer.lap("project");
    notes.push(format!("{} breaches of h_max, {} projection anomalies", ens.breaches, proj.anomalies));

    let mut w = out.csv("sim2d.csv")?;
    w.write_record(["path", "t", "x1", "x2", "H", "edge_id", "vertex_id", "m"])?;
    for (p, states) in ens.states.iter().enumerate() {
        for (k, x) in states.iter().enumerate() {
            let gp = proj.paths[p].get(k);
            let [edge, vertex] = graph_columns(gp);
            let m = gp.map(|q| g.level(*q).to_string()).unwrap_or_default();
            let h = v.system.energy(*x);
            w.write_record([p.to_string(), ens.times[k].to_string(), x.x.to_string(), x.y.to_string(), h.to_string(), edge, vertex, m])?;
        }
    }
    w.flush()?;
    timer.lap("write");
    Ok(None)
}

fn simgraph_cmd(
    cfg: &RunConfig,
    v: &Validated,
    out: &mut Outputs,
    timer: &mut Timer,
    notes: &mut Vec<String>,
) -> Result<Option<bool>> {
    let (gcfg, frac) = v.graph_sde.as_ref().expect("validated");
    let init = cfg.initial.as_ref().expect("validated");
    let (g, tables) = build_all(cfg, v, timer)?;
    let start = match (init.point, init.edge, init.level) {
        (Some([x, y]), _, _) => g.project_point(&v.system, Vec2::new(x, y)).map_err(|e| anyhow!("[initial] {e}"))?,
        (None, Some(edge), Some(m)) => {
            let e = g.edge(edge).map_err(|e| anyhow!("[initial] {e}"))?;
            if !e.contains_level(m) {
                return Err(anyhow!("[initial] level {m} is outside edge {edge} = [{}, {}]", e.lo, e.hi));
            }
            GraphPoint::Edge { edge, m }
        }
        _ => unreachable!("validated"),
    };
    let rules = default_rules(&g, &tables, *frac);
    let ens = simulate_graph(&g, &tables, &rules, gcfg, &GraphInitial::Point(start))?;
    timer.lap("simulate");
    notes.push(format!("{} step rejections", ens.step_rejections));

    let mut w = out.csv("simgraph.csv")?;
    w.write_record(["path", "t", "edge_id", "vertex_id", "m"])?;
    for (p, path) in ens.paths.iter().enumerate() {
        for (k, q) in path.iter().enumerate() {
            let [edge, vertex] = graph_columns(Some(q));
            w.write_record([p.to_string(), ens.times[k].to_string(), edge, vertex, g.level(*q).to_string()])?;
        }
    }
    w.flush()?;
    timer.lap("write");
    Ok(None)
}

fn study_cmd(
    cfg: &RunConfig,
    v: &Validated,
    out: &mut Outputs,
    timer: &mut Timer,
    notes: &mut Vec<String>,
) -> Result<Option<bool>> {
    let (scfg, alphas, frac) = v.study.as_ref().expect("validated");
    let (g, tables) = build_all(cfg, v, timer)?;
    let rules = default_rules(&g, &tables, *frac);
    let report = convergence_study(&v.system, &g, &tables, &rules, alphas, scfg)?;
    timer.lap("study");

    let mut w = out.csv("study.csv")?;
    w.write_record(["alpha", "t", "W1", "KS", "noise_floor"])?;
    for r in &report.rows {
        w.write_record([r.alpha, r.t, r.w1, r.ks, r.noise_floor].map(|x| x.to_string()))?;
        println!("alpha {:<8} t {:<6} W1 {:.5}  KS {:.5}  floor {:.5}", r.alpha, r.t, r.w1, r.ks, r.noise_floor);
    }
    w.flush()?;
    out.json("study.json", &report)?;
    notes.extend(report.reasons.iter().cloned());
    let verdict = match report.verdict {
        Verdict::Pass => "PASS",
        Verdict::Fail => "FAIL",
        Verdict::Na => "N/A",
    };
    println!("verdict {verdict}");
    for r in &report.reasons {
        println!("  {r}");
    }
    Ok(match report.verdict {
        Verdict::Pass => Some(true),
        Verdict::Fail => Some(false),
        Verdict::Na => None,
    })
}
