//! Loading of scenario, batch, bounds, parameter and environment files.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{od_library, DemandSpec, HistorySource};
use crate::evm::ControllerParams;
use crate::network::{Edge, NetworkModel, Node, NodeId, NodeKind};
use crate::rng::derive_seed;
use crate::sim::{SimConfig, SimError};
use crate::tuner::{realize_scenario, Bounds, EnvVector, Scenario, TuneError, OD_STRUCTURES, PROBE_COUNT};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Syntax { path: String, line: usize, column: usize, message: String },
    #[error("{path}:{line}: {message}", line = line.map_or("-".to_string(), |l| l.to_string()))]
    Invalid { path: String, line: Option<usize>, message: String },
}

impl ConfigError {
    fn invalid(path: &Path, line: Option<usize>, message: impl ToString) -> Self {
        ConfigError::Invalid { path: path.display().to_string(), line, message: message.to_string() }
    }
}

fn read(path: &Path) -> Result<String, ConfigError> {
    fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
}

fn parse<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T, ConfigError> {
    serde_json::from_str(text).map_err(|e| {
        let mut message = e.to_string();
        if let Some(i) = message.rfind(" at line ") {
            message.truncate(i);
        }
        ConfigError::Syntax { path: path.display().to_string(), line: e.line(), column: e.column(), message }
    })
}

/// Reads and parses a JSON file without further validation.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    parse(path, &read(path)?)
}

/// 1-based line of the first occurrence of `"key"`.
fn line_of_key(text: &str, key: &str) -> Option<usize> {
    let at = text.find(&format!("\"{key}\""))?;
    Some(text[..at].matches('\n').count() + 1)
}

/// 1-based line where row `index` of the nested array under `"key"` opens.
fn line_of_row(text: &str, key: &str, index: usize) -> Option<usize> {
    let start = text.find(&format!("\"{key}\""))?;
    let mut depth = 0;
    let mut rows = 0;
    let mut line = text[..start].matches('\n').count() + 1;
    for ch in text[start..].chars() {
        match ch {
            '\n' => line += 1,
            '[' => {
                depth += 1;
                if depth == 2 {
                    if rows == index {
                        return Some(line);
                    }
                    rows += 1;
                }
            }
            ']' => {
                depth -= 1;
                if depth == 0 {
                    return None;
                }
            }
            _ => {}
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub network: NetworkSpec,
    pub demand: DemandSpec,
    pub sim: SimConfig,
    #[serde(default)]
    pub history: HistorySource,
}

/// A validated scenario file.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub net: Arc<NetworkModel<f64>>,
    pub demand: DemandSpec,
    pub sim: SimConfig,
    pub history: HistorySource,
}

impl LoadedScenario {
    pub fn scenario(&self, id: usize) -> Scenario {
        Scenario {
            id,
            env: None,
            net: Arc::clone(&self.net),
            demand: self.demand.clone(),
            sim: self.sim.clone(),
            history: self.history,
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<LoadedScenario, ConfigError> {
    let text = read(path)?;
    let file: ScenarioFile = parse(path, &text)?;
    let net = NetworkModel::build(file.network.nodes, file.network.edges)
        .map_err(|e| ConfigError::invalid(path, line_of_key(&text, "network"), e))?;
    file.demand.validate(&net).map_err(|e| {
        let line = match &e {
            SimError::InvalidDemand { station, reason, .. }
                if reason.contains("rate") && !reason.contains("OD row") =>
            {
                line_of_key(&text, "rates")
            }
            SimError::InvalidDemand { station, .. } => {
                line_of_row(&text, "od_matrix", *station).or_else(|| line_of_key(&text, "od_matrix"))
            }
            _ => line_of_key(&text, "demand"),
        };
        ConfigError::invalid(path, line, e)
    })?;
    file.sim.validate().map_err(|e| ConfigError::invalid(path, line_of_key(&text, "sim"), e))?;
    let berths = net.total_berths();
    if file.sim.fleet_size as u64 > berths {
        let e = SimError::FleetExceedsBerths { fleet: file.sim.fleet_size, berths };
        return Err(ConfigError::invalid(path, line_of_key(&text, "fleet_size"), e));
    }
    if let HistorySource::ObservedWindow { window } = file.history {
        if !(window.is_finite() && window > 0.0) {
            return Err(ConfigError::invalid(
                path,
                line_of_key(&text, "history"),
                format!("history window {window} must be positive"),
            ));
        }
    }
    Ok(LoadedScenario { net: Arc::new(net), demand: file.demand, sim: file.sim, history: file.history })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchFile {
    /// Scenario file supplying the network and base simulation settings,
    /// relative to the batch file.
    pub scenario: PathBuf,
    pub probes: [usize; PROBE_COUNT],
    /// Attractor of the hub-and-spoke structure; defaults to the first probe.
    #[serde(default)]
    pub hub: Option<usize>,
    /// JSON file holding four OD matrices; the shipped structures are used
    /// when absent.
    #[serde(default)]
    pub od_library: Option<PathBuf>,
    pub envs: Vec<EnvVector>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub base: LoadedScenario,
    pub probes: [NodeId; PROBE_COUNT],
    pub od_library: Vec<Vec<Vec<f64>>>,
    pub envs: Vec<EnvVector>,
    pub files: Vec<PathBuf>,
}

impl Batch {
    /// Realizes every environment; scenario `i` runs under `derive_seed(seed, i)`.
    pub fn scenarios(&self, seed: u64) -> Result<Vec<Scenario>, TuneError> {
        self.envs
            .iter()
            .enumerate()
            .map(|(i, env)| {
                realize_scenario(
                    env,
                    Arc::clone(&self.base.net),
                    &self.base.sim,
                    &self.od_library,
                    &self.probes,
                    i,
                    derive_seed(seed, i as u64),
                )
            })
            .collect()
    }
}

fn resolve(relative_to: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        relative_to.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn load_batch(path: &Path) -> Result<Batch, ConfigError> {
    let text = read(path)?;
    let file: BatchFile = parse(path, &text)?;
    if file.envs.is_empty() {
        return Err(ConfigError::invalid(path, line_of_key(&text, "envs"), "batch lists no environments"));
    }
    for (i, env) in file.envs.iter().enumerate() {
        env.validate()
            .map_err(|e| ConfigError::invalid(path, line_of_row_object(&text, "envs", i), format!("env {i}: {e}")))?;
    }
    let scenario_path = resolve(path, &file.scenario);
    let base = load_scenario(&scenario_path)?;
    let net = &base.net;
    let station = |id: usize, what: &str| -> Result<NodeId, ConfigError> {
        if id < net.len() && net.node(NodeId(id)).kind == NodeKind::Station {
            Ok(NodeId(id))
        } else {
            Err(ConfigError::invalid(path, line_of_key(&text, what), format!("{what} {id} is not a station")))
        }
    };
    let mut probes = [NodeId(0); PROBE_COUNT];
    for (slot, &p) in probes.iter_mut().zip(&file.probes) {
        *slot = station(p, "probes")?;
    }
    let hub = station(file.hub.unwrap_or(file.probes[0]), "hub")?;
    let mut files = vec![path.to_path_buf(), scenario_path];
    let od_library = match &file.od_library {
        Some(p) => {
            let lib_path = resolve(path, p);
            let lib: Vec<Vec<Vec<f64>>> = load_json(&lib_path)?;
            if lib.len() != OD_STRUCTURES {
                return Err(ConfigError::invalid(
                    &lib_path,
                    None,
                    format!("{} matrices, expected {OD_STRUCTURES}", lib.len()),
                ));
            }
            for (k, od) in lib.iter().enumerate() {
                let probe = DemandSpec::silent(net, od.clone());
                probe.validate(net).map_err(|e| ConfigError::invalid(&lib_path, None, format!("matrix {k}: {e}")))?;
            }
            files.push(lib_path);
            lib
        }
        None => od_library(net, hub),
    };
    Ok(Batch { base, probes, od_library, envs: file.envs, files })
}

/// 1-based line where element `index` of the object array under `"key"` opens.
fn line_of_row_object(text: &str, key: &str, index: usize) -> Option<usize> {
    let start = text.find(&format!("\"{key}\""))?;
    let mut depth = 0;
    let mut seen = 0;
    let mut line = text[..start].matches('\n').count() + 1;
    for ch in text[start..].chars() {
        match ch {
            '\n' => line += 1,
            '[' | '{' => {
                depth += 1;
                if depth == 2 && ch == '{' {
                    if seen == index {
                        return Some(line);
                    }
                    seen += 1;
                }
            }
            ']' | '}' => {
                depth -= 1;
                if depth == 0 {
                    return None;
                }
            }
            _ => {}
        }
    }
    None
}

pub fn load_bounds(path: &Path) -> Result<Bounds, ConfigError> {
    let bounds: Bounds = load_json(path)?;
    bounds.validate().map_err(|e| ConfigError::invalid(path, None, e))?;
    Ok(bounds)
}

pub fn load_params(path: &Path) -> Result<ControllerParams<f64>, ConfigError> {
    let params: ControllerParams<f64> = load_json(path)?;
    params.validate().map_err(|e| ConfigError::invalid(path, None, e))?;
    Ok(params)
}

pub fn load_env(path: &Path) -> Result<EnvVector, ConfigError> {
    let env: EnvVector = load_json(path)?;
    env.validate().map_err(|e| ConfigError::invalid(path, None, e))?;
    Ok(env)
}
