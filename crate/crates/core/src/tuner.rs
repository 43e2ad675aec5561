//! Training-mode search: realize operating conditions as scenarios, search the
//! dispatch parameter space per scenario and collect the labelled dataset.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand::{DemandMode, DemandSpec, HistorySource};
use crate::evm::{ControllerParams, EvmParams, Half};
use crate::network::{NetworkModel, NodeId, NodeKind};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::sim::{run_simulation, EvmController, SimConfig, SimError};

pub const ENV_DIM: usize = 11;
pub const PARAM_DIM: usize = 18;
pub const PROBE_COUNT: usize = 4;
pub const OD_STRUCTURES: usize = 4;

#[derive(Debug, Error)]
pub enum TuneError {
    #[error("invalid environment vector: {0}")]
    InvalidEnv(String),
    #[error("empty search bounds: {0}")]
    EmptyBounds(String),
    #[error("invalid search settings: {0}")]
    InvalidSettings(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Operating conditions of one scenario: fleet, speed, demand levels and the
/// origin-destination structure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvVector {
    pub fleet_size: u32,
    /// Meters per second.
    pub max_velocity: f64,
    /// Passenger groups per hour over the whole network.
    pub total_demand: f64,
    /// Groups per hour at the four probe stations.
    pub station_demand: [f64; PROBE_COUNT],
    /// One-hot selector over the shipped OD structures.
    pub od_structure: [f64; OD_STRUCTURES],
}

impl EnvVector {
    pub fn validate(&self) -> Result<(), TuneError> {
        let bad = |m: String| Err(TuneError::InvalidEnv(m));
        if self.fleet_size == 0 {
            return bad("fleet_size must be >= 1".into());
        }
        if !(self.max_velocity.is_finite() && self.max_velocity > 0.0) {
            return bad(format!("max_velocity must be positive, got {}", self.max_velocity));
        }
        if !(self.total_demand.is_finite() && self.total_demand >= 0.0) {
            return bad(format!("total_demand must be >= 0, got {}", self.total_demand));
        }
        if let Some(d) = self.station_demand.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
            return bad(format!("station demand must be >= 0, got {d}"));
        }
        let probe_sum: f64 = self.station_demand.iter().sum();
        if probe_sum > self.total_demand * (1.0 + 1e-12) {
            return bad(format!("station demand {probe_sum} exceeds total demand {}", self.total_demand));
        }
        let ones = self.od_structure.iter().filter(|&&v| v == 1.0).count();
        let zeros = self.od_structure.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != OD_STRUCTURES - 1 {
            return bad(format!("od_structure must be one-hot, got {:?}", self.od_structure));
        }
        Ok(())
    }

    pub fn od_index(&self) -> usize {
        self.od_structure.iter().position(|&v| v == 1.0).unwrap_or(0)
    }

    pub fn to_array(&self) -> [f64; ENV_DIM] {
        let mut out = [0.0; ENV_DIM];
        out[0] = self.fleet_size as f64;
        out[1] = self.max_velocity;
        out[2] = self.total_demand;
        out[3..7].copy_from_slice(&self.station_demand);
        out[7..11].copy_from_slice(&self.od_structure);
        out
    }

    pub fn from_array(v: &[f64]) -> Result<Self, TuneError> {
        if v.len() != ENV_DIM {
            return Err(TuneError::InvalidEnv(format!("expected {ENV_DIM} values, got {}", v.len())));
        }
        if v[0] < 1.0 || v[0].fract() != 0.0 || v[0] > u32::MAX as f64 {
            return Err(TuneError::InvalidEnv(format!("fleet_size must be a positive integer, got {}", v[0])));
        }
        let env = EnvVector {
            fleet_size: v[0] as u32,
            max_velocity: v[1],
            total_demand: v[2],
            station_demand: [v[3], v[4], v[5], v[6]],
            od_structure: [v[7], v[8], v[9], v[10]],
        };
        env.validate()?;
        Ok(env)
    }

    /// Index of the one-hot block inside [`EnvVector::to_array`].
    pub fn one_hot_range() -> std::ops::Range<usize> {
        7..11
    }
}

/// Everything one simulation needs.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub id: usize,
    pub env: Option<EnvVector>,
    pub net: Arc<NetworkModel<f64>>,
    pub demand: DemandSpec,
    pub sim: SimConfig,
    pub history: HistorySource,
}

impl Scenario {
    pub fn controller(&self, params: ControllerParams<f64>) -> EvmController {
        EvmController { params, history: self.history }
    }
}

/// Turns an environment vector into demand and simulation settings on `net`.
pub fn realize_scenario(
    env: &EnvVector,
    net: Arc<NetworkModel<f64>>,
    base: &SimConfig,
    od_library: &[Vec<Vec<f64>>],
    probes: &[NodeId; PROBE_COUNT],
    id: usize,
    seed: u64,
) -> Result<Scenario, TuneError> {
    env.validate()?;
    if od_library.len() != OD_STRUCTURES {
        return Err(TuneError::InvalidEnv(format!("OD library has {} matrices", od_library.len())));
    }
    for (k, p) in probes.iter().enumerate() {
        if p.0 >= net.len() || net.node(*p).kind != NodeKind::Station {
            return Err(TuneError::InvalidEnv(format!("probe {k} ({p}) is not a station")));
        }
        if probes[..k].contains(p) {
            return Err(TuneError::InvalidEnv(format!("probe {p} listed twice")));
        }
    }

    let mut rates = vec![0.0; net.len()];
    for (p, d) in probes.iter().zip(env.station_demand) {
        rates[p.0] = d / 3600.0;
    }
    let remainder = (env.total_demand - env.station_demand.iter().sum::<f64>()).max(0.0);
    let others: Vec<NodeId> = net.stations().filter(|s| !probes.contains(s)).collect();
    if remainder > 0.0 {
        if others.is_empty() {
            return Err(TuneError::InvalidEnv(format!("{remainder} groups/h left over but every station is a probe")));
        }
        let each = remainder / others.len() as f64 / 3600.0;
        for s in &others {
            rates[s.0] = each;
        }
    }
    let od_matrix = od_library[env.od_index()].clone();
    // Stations without outgoing trips in this structure cannot generate demand.
    for (i, row) in od_matrix.iter().enumerate() {
        if rates[i] > 0.0 && row.iter().all(|&p| p == 0.0) {
            return Err(TuneError::InvalidEnv(format!("station {i} has demand but no destinations")));
        }
    }
    let demand = DemandSpec { rates, od_matrix, mode: DemandMode::FiniteDemand };
    demand.validate(&net)?;
    let sim = SimConfig { fleet_size: env.fleet_size, max_velocity: env.max_velocity, seed, ..base.clone() };
    sim.validate()?;
    Ok(Scenario { id, env: Some(*env), net, demand, sim, history: HistorySource::ScenarioPrior })
}

/// Mean censored passenger wait over `replications` seeded runs, in seconds.
pub fn evaluate(scenario: &Scenario, params: &ControllerParams<f64>, replications: u32) -> Result<f64, TuneError> {
    if replications == 0 {
        return Err(TuneError::InvalidSettings("replications must be >= 1".into()));
    }
    let controller = scenario.controller(*params);
    let mut total = 0.0;
    for rep in 0..replications {
        let config = SimConfig { seed: derive_seed(scenario.sim.seed, rep as u64), ..scenario.sim.clone() };
        let m = run_simulation(&scenario.net, &scenario.demand, &config, &controller)?;
        total += m.censored_mean_wait.unwrap_or(0.0);
    }
    Ok(total / replications as f64)
}

/// Closed interval for one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Range { lo, hi }
    }

    fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

/// Search ranges for the nine values of one parameter set; both halves share them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub f_q: Range,
    pub f_eb: Range,
    pub f_nd: Range,
    pub f_ai: Range,
    pub t_q: Range,
    pub t_eb: Range,
    pub t_ev: Range,
    pub t_nd: Range,
    pub t_total: Range,
}

impl Default for Bounds {
    fn default() -> Self {
        let w = Range::new(0.0, 10.0);
        let c = Range::new(0.0, 5.0);
        Bounds {
            f_q: w,
            f_eb: w,
            f_nd: w,
            f_ai: w,
            t_q: c,
            t_eb: c,
            t_ev: c,
            t_nd: Range::new(0.0, 3.0),
            t_total: Range::new(0.0, 50.0),
        }
    }
}

impl Bounds {
    fn ranges(&self) -> [(&'static str, Range, bool); 9] {
        [
            ("f_q", self.f_q, false),
            ("f_eb", self.f_eb, false),
            ("f_nd", self.f_nd, false),
            ("f_ai", self.f_ai, false),
            ("t_q", self.t_q, true),
            ("t_eb", self.t_eb, true),
            ("t_ev", self.t_ev, true),
            ("t_nd", self.t_nd, false),
            ("t_total", self.t_total, false),
        ]
    }

    pub fn validate(&self) -> Result<(), TuneError> {
        for (name, r, integral) in self.ranges() {
            if !(r.lo.is_finite() && r.hi.is_finite()) || r.lo > r.hi || r.lo < 0.0 {
                return Err(TuneError::EmptyBounds(format!("{name}: [{}, {}]", r.lo, r.hi)));
            }
            if integral && r.lo.ceil() > r.hi.floor() {
                return Err(TuneError::EmptyBounds(format!("{name} holds no integer: [{}, {}]", r.lo, r.hi)));
            }
        }
        Ok(())
    }

    pub fn contains(&self, p: &EvmParams<f64>) -> bool {
        self.ranges().iter().zip(p.to_array()).all(|((_, r, _), v)| r.contains(v))
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> EvmParams<f64> {
        let mut v = [0.0; 9];
        for (slot, (_, r, integral)) in v.iter_mut().zip(self.ranges()) {
            *slot = if integral {
                rng.random_range(r.lo.ceil() as u64..=r.hi.floor() as u64) as f64
            } else if r.lo == r.hi {
                r.lo
            } else {
                r.lo + (r.hi - r.lo) * rng.random::<f64>()
            };
        }
        EvmParams::from_slice(&v).expect("sampled values lie in validated bounds")
    }
}

/// Incumbent objective after one stage of a search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// 0 for the initial search, then the refinement round number.
    pub round: usize,
    /// `None` when both halves were searched.
    pub active: Option<Half>,
    pub objective: f64,
    pub improved: bool,
    /// Incumbent after the stage.
    pub params: ControllerParams<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub scenario_id: usize,
    pub best_params: ControllerParams<f64>,
    /// Mean censored wait of `best_params`, seconds.
    pub objective: f64,
    /// Candidate evaluations spent (each runs `replications` simulations).
    pub evals: usize,
    /// Mean censored wait with dispatch switched off, seconds.
    pub baseline_objective: f64,
    pub trace: Vec<StageRecord>,
}

/// Evaluates candidates concurrently and returns objectives in candidate order.
fn evaluate_all(
    scenario: &Scenario,
    candidates: &[ControllerParams<f64>],
    replications: u32,
) -> Result<Vec<f64>, TuneError> {
    candidates.par_iter().map(|c| evaluate(scenario, c, replications)).collect()
}

/// First index holding the smallest value.
fn argmin(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Candidate list for one search: the switched-off set, unit weights when
/// they fit the bounds, then uniform samples; `active` restricts which half varies.
fn candidates(
    base: &ControllerParams<f64>,
    active: Option<Half>,
    budget: usize,
    bounds: &Bounds,
    seed: u64,
) -> Vec<ControllerParams<f64>> {
    let mut rng = stream_rng(seed, Stream::Search);
    let halves: &[Half] = match active {
        Some(Half::Calling) => &[Half::Calling],
        Some(Half::Balancing) => &[Half::Balancing],
        None => &[Half::Calling, Half::Balancing],
    };
    let with = |f: &mut dyn FnMut() -> EvmParams<f64>| {
        let mut c = *base;
        for &h in halves {
            *c.half_mut(h) = f();
        }
        c
    };
    let mut out = Vec::with_capacity(budget);
    out.push(with(&mut EvmParams::disabled));
    if bounds.contains(&EvmParams::unit()) {
        out.push(with(&mut EvmParams::unit));
    }
    out.truncate(budget);
    while out.len() < budget {
        out.push(with(&mut || bounds.sample(&mut rng)));
    }
    out
}

/// Uniform random search over both halves. Candidate 0 is always dispatch-off.
pub fn random_search(
    scenario: &Scenario,
    budget: usize,
    bounds: &Bounds,
    seed: u64,
    replications: u32,
) -> Result<TuneResult, TuneError> {
    if budget == 0 {
        return Err(TuneError::InvalidSettings("budget must be >= 1".into()));
    }
    bounds.validate()?;
    let pool = candidates(&ControllerParams::disabled(), None, budget, bounds, seed);
    let objectives = evaluate_all(scenario, &pool, replications)?;
    let best = argmin(&objectives);
    Ok(TuneResult {
        scenario_id: scenario.id,
        best_params: pool[best],
        objective: objectives[best],
        evals: pool.len(),
        baseline_objective: objectives[0],
        trace: vec![StageRecord {
            round: 0,
            active: None,
            objective: objectives[best],
            improved: best != 0,
            params: pool[best],
        }],
    })
}

/// Alternating refinement: odd rounds search the calling half with balancing
/// frozen, even rounds the reverse. The incumbent moves only on strict improvement.
#[allow(clippy::too_many_arguments)]
pub fn alternating_refine(
    scenario: &Scenario,
    start: &ControllerParams<f64>,
    rounds: usize,
    per_round_budget: usize,
    bounds: &Bounds,
    seed: u64,
    replications: u32,
) -> Result<TuneResult, TuneError> {
    if rounds == 0 {
        return Err(TuneError::InvalidSettings("rounds must be >= 1".into()));
    }
    bounds.validate()?;
    let start_objective = evaluate(scenario, start, replications)?;
    let baseline = evaluate(scenario, &ControllerParams::disabled(), replications)?;
    let initial = TuneResult {
        scenario_id: scenario.id,
        best_params: *start,
        objective: start_objective,
        evals: 2,
        baseline_objective: baseline,
        trace: Vec::new(),
    };
    refine(scenario, initial, rounds, per_round_budget, bounds, seed, replications)
}

fn refine(
    scenario: &Scenario,
    mut result: TuneResult,
    rounds: usize,
    per_round_budget: usize,
    bounds: &Bounds,
    seed: u64,
    replications: u32,
) -> Result<TuneResult, TuneError> {
    for round in 1..=rounds {
        let half = if round % 2 == 1 { Half::Calling } else { Half::Balancing };
        let pool =
            candidates(&result.best_params, Some(half), per_round_budget, bounds, derive_seed(seed, round as u64));
        let objectives = evaluate_all(scenario, &pool, replications)?;
        result.evals += pool.len();
        let mut improved = false;
        if !objectives.is_empty() {
            let best = argmin(&objectives);
            if objectives[best] < result.objective {
                result.best_params = pool[best];
                result.objective = objectives[best];
                improved = true;
            }
        }
        result.trace.push(StageRecord {
            round,
            active: Some(half),
            objective: result.objective,
            improved,
            params: result.best_params,
        });
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSettings {
    /// Candidate evaluations per scenario, split between the initial random
    /// search and the refinement rounds.
    pub budget: usize,
    pub rounds: usize,
    pub replications: u32,
    pub bounds: Bounds,
    pub seed: u64,
}

impl SearchSettings {
    /// `(initial budget, per-round budget)`.
    pub fn split(&self) -> (usize, usize) {
        let per_round = if self.rounds == 0 { 0 } else { self.budget / (2 * self.rounds) };
        (self.budget - per_round * self.rounds, per_round)
    }
}

/// Full per-scenario search: random search, then alternating refinement.
pub fn tune_scenario(scenario: &Scenario, settings: &SearchSettings) -> Result<TuneResult, TuneError> {
    let (initial, per_round) = settings.split();
    let seed = derive_seed(settings.seed, scenario.id as u64);
    let start = random_search(scenario, initial, &settings.bounds, seed, settings.replications)?;
    if settings.rounds == 0 || per_round == 0 {
        return Ok(start);
    }
    refine(scenario, start, settings.rounds, per_round, &settings.bounds, seed, settings.replications)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetRow {
    pub scenario_id: usize,
    pub env: [f64; ENV_DIM],
    pub params: [f64; PARAM_DIM],
    pub objective: f64,
    pub baseline: f64,
}

/// One tuned row per scenario, ordered by scenario id.
pub fn build_dataset(scenarios: &[Scenario], settings: &SearchSettings) -> Result<Vec<DatasetRow>, TuneError> {
    if scenarios.is_empty() {
        return Err(TuneError::InvalidSettings("no scenarios".into()));
    }
    let mut rows = scenarios
        .par_iter()
        .map(|s| {
            let env = s.env.ok_or_else(|| TuneError::InvalidEnv(format!("scenario {} has no env vector", s.id)))?;
            let r = tune_scenario(s, settings)?;
            Ok(DatasetRow {
                scenario_id: s.id,
                env: env.to_array(),
                params: r.best_params.to_array(),
                objective: r.objective,
                baseline: r.baseline_objective,
            })
        })
        .collect::<Result<Vec<_>, TuneError>>()?;
    rows.sort_by_key(|r| r.scenario_id);
    Ok(rows)
}

pub fn dataset_header() -> Vec<String> {
    let mut h = vec!["scenario_id".to_string()];
    h.extend((0..ENV_DIM).map(|i| format!("env_{i}")));
    h.extend((0..PARAM_DIM).map(|i| format!("p_{i}")));
    h.push("objective_s".into());
    h.push("baseline_s".into());
    h
}

pub fn write_dataset<W: Write>(rows: &[DatasetRow], out: W) -> Result<(), TuneError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(dataset_header())?;
    for r in rows {
        let mut rec = vec![r.scenario_id.to_string()];
        rec.extend(r.env.iter().map(f64::to_string));
        rec.extend(r.params.iter().map(f64::to_string));
        rec.push(r.objective.to_string());
        rec.push(r.baseline.to_string());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| TuneError::Dataset(e.to_string()))?;
    Ok(())
}

pub fn read_dataset<R: Read>(input: R) -> Result<Vec<DatasetRow>, TuneError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    if header != dataset_header() {
        return Err(TuneError::Dataset(format!(
            "unexpected header; expected {} columns scenario_id, env_0..env_10, p_0..p_17, objective_s, baseline_s",
            dataset_header().len()
        )));
    }
    let mut rows = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, TuneError> {
            rec[i].trim().parse::<f64>().map_err(|e| TuneError::Dataset(format!("row {}: column {i}: {e}", line + 2)))
        };
        let scenario_id = rec[0]
            .trim()
            .parse::<usize>()
            .map_err(|e| TuneError::Dataset(format!("row {}: scenario_id: {e}", line + 2)))?;
        let mut env = [0.0; ENV_DIM];
        for (k, slot) in env.iter_mut().enumerate() {
            *slot = num(1 + k)?;
        }
        let mut params = [0.0; PARAM_DIM];
        for (k, slot) in params.iter_mut().enumerate() {
            *slot = num(1 + ENV_DIM + k)?;
        }
        rows.push(DatasetRow {
            scenario_id,
            env,
            params,
            objective: num(1 + ENV_DIM + PARAM_DIM)?,
            baseline: num(2 + ENV_DIM + PARAM_DIM)?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::od_library;
    use crate::network::{Edge, Node};

    fn net5() -> Arc<NetworkModel<f64>> {
        let nodes = (0..5).map(|i| Node::station(i, 3, format!("S{i}"))).collect();
        let mut edges: Vec<Edge<f64>> = (0..5).map(|i| Edge::new(i, (i + 1) % 5, 200.0)).collect();
        edges.extend((0..5).map(|i| Edge::new((i + 1) % 5, i, 200.0)));
        Arc::new(NetworkModel::build(nodes, edges).unwrap())
    }

    fn base() -> SimConfig {
        SimConfig {
            horizon: 1800.0,
            warmup: None,
            dwell_time: 10.0,
            max_velocity: 10.0,
            fleet_size: 4,
            evm_epoch: 10.0,
            seed: 0,
        }
    }

    fn env(od: usize) -> EnvVector {
        let mut one_hot = [0.0; 4];
        one_hot[od] = 1.0;
        EnvVector {
            fleet_size: 5,
            max_velocity: 10.0,
            total_demand: 120.0,
            station_demand: [30.0, 20.0, 20.0, 20.0],
            od_structure: one_hot,
        }
    }

    const PROBES: [NodeId; 4] = [NodeId(0), NodeId(1), NodeId(2), NodeId(3)];

    fn scenario(od: usize) -> Scenario {
        let net = net5();
        let lib = od_library(&net, NodeId(0));
        realize_scenario(&env(od), net, &base(), &lib, &PROBES, 0, 11).unwrap()
    }

    #[test]
    fn remainder_goes_to_non_probe_stations() {
        let s = scenario(0);
        assert!((s.demand.rates[4] - 30.0 / 3600.0).abs() < 1e-15);
        assert!((s.demand.rates[0] - 30.0 / 3600.0).abs() < 1e-15);
        assert_eq!(s.sim.fleet_size, 5);
        let mut e = env(0);
        e.total_demand = 90.0;
        let net = net5();
        let lib = od_library(&net, NodeId(0));
        let s = realize_scenario(&e, net, &base(), &lib, &PROBES, 0, 1).unwrap();
        assert_eq!(s.demand.rates[4], 0.0);
    }

    #[test]
    fn selector_picks_library_matrix() {
        let net = net5();
        let lib = od_library(&net, NodeId(0));
        for k in 0..4 {
            let s = realize_scenario(&env(k), net.clone(), &base(), &lib, &PROBES, 0, 1).unwrap();
            assert_eq!(s.demand.od_matrix, lib[k]);
        }
    }

    #[test]
    fn invalid_envs_are_rejected() {
        let net = net5();
        let lib = od_library(&net, NodeId(0));
        let mut e = env(0);
        e.station_demand[0] = 500.0;
        assert!(matches!(
            realize_scenario(&e, net.clone(), &base(), &lib, &PROBES, 0, 1),
            Err(TuneError::InvalidEnv(_))
        ));
        let mut e = env(0);
        e.od_structure = [1.0, 1.0, 0.0, 0.0];
        assert!(e.validate().is_err());
        assert!(EnvVector::from_array(&[5.0, 10.0, 120.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
        assert_eq!(EnvVector::from_array(&env(2).to_array()).unwrap(), env(2));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let s = scenario(1);
        let a = evaluate(&s, &ControllerParams::unit(), 1).unwrap();
        let b = evaluate(&s, &ControllerParams::unit(), 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn budget_one_returns_the_baseline() {
        let s = scenario(1);
        let r = random_search(&s, 1, &Bounds::default(), 3, 1).unwrap();
        assert_eq!(r.best_params, ControllerParams::disabled());
        assert_eq!(r.objective, r.baseline_objective);
        assert_eq!(r.evals, 1);
    }

    #[test]
    fn best_so_far_is_monotone_in_budget() {
        let s = scenario(1);
        let objs: Vec<f64> =
            [1, 2, 4, 8].iter().map(|&b| random_search(&s, b, &Bounds::default(), 5, 1).unwrap().objective).collect();
        assert!(objs.windows(2).all(|w| w[1] <= w[0]), "{objs:?}");
    }

    #[test]
    fn point_bounds_give_point_or_baseline() {
        let s = scenario(1);
        let p =
            EvmParams { f_q: 2.0, f_eb: 0.5, f_nd: 1.0, f_ai: 0.0, t_q: 1, t_eb: 1, t_ev: 1, t_nd: 0.2, t_total: 3.0 };
        let pt = |v: f64| Range::new(v, v);
        let bounds = Bounds {
            f_q: pt(2.0),
            f_eb: pt(0.5),
            f_nd: pt(1.0),
            f_ai: pt(0.0),
            t_q: pt(1.0),
            t_eb: pt(1.0),
            t_ev: pt(1.0),
            t_nd: pt(0.2),
            t_total: pt(3.0),
        };
        let r = random_search(&s, 6, &bounds, 1, 1).unwrap();
        let point = ControllerParams { calling: p, balancing: p };
        assert!(r.best_params == point || r.best_params == ControllerParams::disabled());
    }

    #[test]
    fn empty_bounds_are_rejected() {
        let s = scenario(0);
        let b = Bounds { t_q: Range::new(1.2, 1.8), ..Bounds::default() };
        assert!(matches!(random_search(&s, 3, &b, 1, 1), Err(TuneError::EmptyBounds(_))));
        let b = Bounds { f_q: Range::new(3.0, 2.0), ..Bounds::default() };
        assert!(matches!(random_search(&s, 3, &b, 1, 1), Err(TuneError::EmptyBounds(_))));
    }

    #[test]
    fn refinement_freezes_the_inactive_half() {
        let s = scenario(1);
        let start = ControllerParams::unit();
        let r = alternating_refine(&s, &start, 1, 6, &Bounds::default(), 2, 1).unwrap();
        assert_eq!(r.best_params.balancing, start.balancing);
        assert!(r.objective <= evaluate(&s, &start, 1).unwrap());
    }

    #[test]
    fn refinement_without_improvement_returns_start() {
        let s = scenario(1);
        // A zero budget per round can never improve.
        let start = ControllerParams::unit();
        let r = alternating_refine(&s, &start, 3, 0, &Bounds::default(), 2, 1).unwrap();
        assert_eq!(r.best_params, start);
        assert!(r.trace.iter().all(|t| !t.improved));
    }

    #[test]
    fn dataset_round_trips_through_csv() {
        let scenarios = vec![scenario(0), {
            let mut s = scenario(2);
            s.id = 1;
            s
        }];
        let settings = SearchSettings { budget: 4, rounds: 1, replications: 1, bounds: Bounds::default(), seed: 9 };
        let rows = build_dataset(&scenarios, &settings).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.objective <= r.baseline));
        let mut buf = Vec::new();
        write_dataset(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap().split(',').count(), 32);
        assert_eq!(read_dataset(buf.as_slice()).unwrap(), rows);
    }
}
