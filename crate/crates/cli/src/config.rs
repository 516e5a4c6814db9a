//! Run configuration: one TOML file, optional `--set` overrides, and
//! validation of every section a subcommand needs before it starts.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use hamavg::graph_diffusion::GraphSdeConfig;
use hamavg::harness::{StudyConfig, DEFAULT_COALESCE_TOL};
use hamavg::levelset::DEFAULT_STEP;
use hamavg::model::{make_builtin, Builtin, DensitySpec, DriftSpec, HamiltonianSystem};
use hamavg::sde::{Scheme, SdeConfig, DEFAULT_SUBSTEP_CAP};
use hamavg::Rect;
use serde::{Deserialize, Serialize};

use crate::Command;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed shared by every simulator.
    #[serde(default)]
    pub seed: u64,
    pub system: SystemSection,
    pub sde: Option<SdeSection>,
    pub initial: Option<InitialSection>,
    pub graph_sde: Option<GraphSdeSection>,
    pub study: Option<StudySection>,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub builtin: String,
    #[serde(default = "default_drift")]
    pub drift: String,
    #[serde(default = "default_density")]
    pub density: String,
    pub epsilon: f64,
    /// `[x0, x1, y0, y1]`
    #[serde(default = "default_domain")]
    pub domain: [f64; 4],
    pub h_max: f64,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_table_levels")]
    pub table_levels: usize,
    #[serde(default = "default_step")]
    pub step: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SdeSection {
    pub alpha: f64,
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_cap")]
    pub fast_substeps_cap: usize,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
}

/// Starting law: a point of the plane, or the Liouville law on one level
/// curve of an edge.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub point: Option<[f64; 2]>,
    pub edge: Option<usize>,
    pub level: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSdeSection {
    pub dt: f64,
    pub t_end: f64,
    pub n_paths: usize,
    #[serde(default)]
    pub snapshot_times: Vec<f64>,
    #[serde(default = "default_delta_v_frac")]
    pub delta_v_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub alphas: Vec<f64>,
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub sde_dt: f64,
    pub graph_dt: f64,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_cap")]
    pub fast_substeps_cap: usize,
    pub initial_edge: usize,
    pub initial_level: f64,
    #[serde(default = "default_coalesce")]
    pub coalesce_tol: f64,
    #[serde(default = "default_delta_v_frac")]
    pub delta_v_frac: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

fn default_drift() -> String {
    "zero".into()
}
fn default_density() -> String {
    "lebesgue".into()
}
fn default_domain() -> [f64; 4] {
    [-3.0, 3.0, -3.0, 3.0]
}
fn default_resolution() -> usize {
    256
}
fn default_table_levels() -> usize {
    32
}
fn default_step() -> f64 {
    DEFAULT_STEP
}
fn default_scheme() -> String {
    "splitting".into()
}
fn default_cap() -> usize {
    DEFAULT_SUBSTEP_CAP
}
fn default_delta_v_frac() -> f64 {
    1e-3
}
fn default_coalesce() -> f64 {
    DEFAULT_COALESCE_TOL
}

/// Parses `text`, applies `key.path=value` overrides and deserializes.
pub fn parse(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut table: toml::Table = toml::from_str(text).context("config is not valid TOML")?;
    for item in overrides {
        let (key, raw) = item.split_once('=').ok_or_else(|| anyhow!("override `{item}` is not key=value"))?;
        let value = parse_value(raw.trim());
        set_path(&mut table, key.trim(), value).with_context(|| format!("override `{item}`"))?;
    }
    toml::Value::Table(table).try_into::<RunConfig>().map_err(|e| anyhow!("invalid config: {e}"))
}

pub fn load(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text, overrides)
}

/// A TOML literal when the text parses as one, a bare string otherwise.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| anyhow!("empty key"))?;
    let mut cur = table;
    for p in parts {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| anyhow!("`{p}` is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Everything a subcommand needs, checked up front.
pub struct Validated {
    pub system: HamiltonianSystem,
    pub domain: Rect,
    pub sde: Option<SdeConfig>,
    pub graph_sde: Option<(GraphSdeConfig, f64)>,
    pub study: Option<(StudyConfig, Vec<f64>, f64)>,
}

fn positive(section: &str, key: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x.is_finite()) {
        bail!("[{section}] {key} must be positive and finite, got {x}");
    }
    Ok(())
}

impl RunConfig {
    fn require<'a, T>(section: &'a Option<T>, name: &str, cmd: Command) -> Result<&'a T> {
        section.as_ref().ok_or_else(|| anyhow!("`{}` needs a [{name}] section", cmd.name()))
    }

    pub fn validate(&self, cmd: Command) -> Result<Validated> {
        let s = &self.system;
        let builtin = Builtin::from_str(&s.builtin).map_err(|e| anyhow!("[system] builtin: {e}"))?;
        let drift = DriftSpec::from_str(&s.drift).map_err(|e| anyhow!("[system] drift: {e}"))?;
        if drift == DriftSpec::Custom {
            bail!("[system] drift: `custom` needs callbacks and cannot come from a config file");
        }
        let density = DensitySpec::from_str(&s.density).map_err(|e| anyhow!("[system] density: {e}"))?;
        positive("system", "epsilon", s.epsilon)?;
        positive("system", "h_max", s.h_max)?;
        positive("system", "step", s.step)?;
        let [x0, x1, y0, y1] = s.domain;
        let domain = Rect::new(x0, x1, y0, y1);
        if !domain.is_valid() {
            bail!("[system] domain must satisfy x0 < x1 and y0 < y1, got {:?}", s.domain);
        }
        if s.resolution < 16 {
            bail!("[system] resolution must be at least 16, got {}", s.resolution);
        }
        if s.table_levels < 8 {
            bail!("[system] table_levels must be at least 8, got {}", s.table_levels);
        }
        let system = make_builtin(builtin, drift, density, s.epsilon).map_err(|e| anyhow!("[system] {e}"))?;

        let mut out = Validated { system, domain, sde: None, graph_sde: None, study: None };
        match cmd {
            Command::Sim2d => {
                let sec = Self::require(&self.sde, "sde", cmd)?;
                let mut cfg = SdeConfig::new(sec.alpha, sec.dt, sec.t_end, sec.n_paths, self.seed);
                cfg.scheme = Scheme::from_str(&sec.scheme).map_err(|e| anyhow!("[sde] scheme: {e}"))?;
                cfg.fast_substeps_cap = sec.fast_substeps_cap;
                cfg.h_max = s.h_max;
                cfg.snapshot_times = sec.snapshot_times.clone();
                cfg.validate().map_err(|e| anyhow!("[sde] {e}"))?;
                self.validate_initial(cmd)?;
                out.sde = Some(cfg);
            }
            Command::Simgraph => {
                let sec = Self::require(&self.graph_sde, "graph_sde", cmd)?;
                let cfg = GraphSdeConfig {
                    dt: sec.dt,
                    t_end: sec.t_end,
                    n_paths: sec.n_paths,
                    seed: self.seed,
                    snapshot_times: sec.snapshot_times.clone(),
                };
                cfg.validate().map_err(|e| anyhow!("[graph_sde] {e}"))?;
                positive("graph_sde", "delta_v_frac", sec.delta_v_frac)?;
                self.validate_initial(cmd)?;
                out.graph_sde = Some((cfg, sec.delta_v_frac));
            }
            Command::Study => {
                let sec = Self::require(&self.study, "study", cmd)?;
                if sec.alphas.is_empty() || sec.times.is_empty() {
                    bail!("[study] alphas and times must be non-empty");
                }
                for &a in &sec.alphas {
                    positive("study", "alphas", a)?;
                }
                positive("study", "sde_dt", sec.sde_dt)?;
                positive("study", "graph_dt", sec.graph_dt)?;
                positive("study", "delta_v_frac", sec.delta_v_frac)?;
                if sec.n_paths < 2 {
                    bail!("[study] n_paths must be at least 2, got {}", sec.n_paths);
                }
                let t_end = sec.times.iter().copied().fold(0.0, f64::max);
                for (name, dt) in [("sde_dt", sec.sde_dt), ("graph_dt", sec.graph_dt)] {
                    if dt > t_end {
                        bail!("[study] {name} = {dt} exceeds the last time {t_end}");
                    }
                }
                if sec.times.windows(2).any(|w| w[1] <= w[0]) || sec.times[0] < 0.0 {
                    bail!("[study] times must be non-negative and strictly increasing");
                }
                let cfg = StudyConfig {
                    times: sec.times.clone(),
                    n_paths: sec.n_paths,
                    seed: self.seed,
                    sde_dt: sec.sde_dt,
                    graph_dt: sec.graph_dt,
                    scheme: Scheme::from_str(&sec.scheme).map_err(|e| anyhow!("[study] scheme: {e}"))?,
                    fast_substeps_cap: sec.fast_substeps_cap,
                    initial_edge: sec.initial_edge,
                    initial_level: sec.initial_level,
                    coalesce_tol: sec.coalesce_tol,
                };
                out.study = Some((cfg, sec.alphas.clone(), sec.delta_v_frac));
            }
            Command::Graph | Command::Coeffs | Command::Check => {}
        }
        Ok(out)
    }

    fn validate_initial(&self, cmd: Command) -> Result<()> {
        let init = Self::require(&self.initial, "initial", cmd)?;
        match (init.point, init.edge, init.level) {
            (Some(_), None, None) | (None, Some(_), Some(_)) => Ok(()),
            _ => bail!("[initial] give either `point` or both `edge` and `level`"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
[system]
builtin = "H2"
epsilon = 0.25
h_max = 3.0
[sde]
alpha = 0.1
dt = 0.01
t_end = 1.0
n_paths = 10
[initial]
edge = 2
level = 0.5
"#;

    #[test]
    fn overrides_reach_nested_keys() {
        let cfg = parse(BASE, &["sde.dt=0.02".into(), "system.density=gibbs".into(), "seed=9".into()]).unwrap();
        assert_eq!(cfg.sde.unwrap().dt, 0.02);
        assert_eq!(cfg.system.density, "gibbs");
        assert_eq!(cfg.seed, 9);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse(BASE, &["sde.bogus=1".into()]).unwrap_err();
        assert!(format!("{err:#}").contains("bogus"), "{err:#}");
    }

    #[test]
    fn step_longer_than_horizon_rejected() {
        let cfg = parse(BASE, &["sde.dt=2.0".into()]).unwrap();
        let err = cfg.validate(Command::Sim2d).err().unwrap();
        assert!(err.to_string().starts_with("[sde]"), "{err}");
    }

    #[test]
    fn missing_section_named() {
        let cfg = parse(BASE, &[]).unwrap();
        let err = cfg.validate(Command::Simgraph).err().unwrap();
        assert!(err.to_string().contains("[graph_sde]"), "{err}");
    }
}
