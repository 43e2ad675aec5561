//! Passenger demand: arrival rates, origin-destination matrices and the
//! demand-history estimate fed to the dispatch scoring.

use serde::{Deserialize, Serialize};

use crate::network::{NetworkModel, NodeId, NodeKind};
use crate::sim::SimError;

/// Mean inter-arrival time assigned to nodes that saw no arrivals, in seconds.
pub const AI_CEILING: f64 = 1e6;

const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DemandMode {
    /// Poisson arrivals at the configured rates.
    #[default]
    FiniteDemand,
    /// Every station with outgoing demand always has a group ready to board.
    InfiniteQueues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DemandSpec {
    /// Passenger groups per second, one entry per node.
    pub rates: Vec<f64>,
    /// Row-stochastic destination probabilities with a zero diagonal. A row of
    /// zeros marks a node that generates no trips.
    pub od_matrix: Vec<Vec<f64>>,
    #[serde(default)]
    pub mode: DemandMode,
}

impl DemandSpec {
    pub fn validate(&self, net: &NetworkModel<f64>) -> Result<(), SimError> {
        let n = net.len();
        let bad = |station: usize, reason: String| {
            let name = net.nodes().get(station).map(|n| n.name.clone()).unwrap_or_default();
            SimError::InvalidDemand { station, name, reason }
        };
        if self.rates.len() != n {
            return Err(bad(0, format!("{} rates for {n} nodes", self.rates.len())));
        }
        if self.od_matrix.len() != n {
            return Err(bad(0, format!("{} OD rows for {n} nodes", self.od_matrix.len())));
        }
        for (i, (row, &rate)) in self.od_matrix.iter().zip(&self.rates).enumerate() {
            if row.len() != n {
                return Err(bad(i, format!("OD row has {} entries, expected {n}", row.len())));
            }
            if !rate.is_finite() || rate < 0.0 {
                return Err(bad(i, format!("arrival rate {rate} must be finite and >= 0")));
            }
            if let Some(p) = row.iter().find(|p| !p.is_finite() || **p < 0.0) {
                return Err(bad(i, format!("OD entry {p} must be finite and >= 0")));
            }
            if row[i] != 0.0 {
                return Err(bad(i, format!("OD diagonal must be 0, got {}", row[i])));
            }
            let sum: f64 = row.iter().sum();
            let is_zero_row = sum == 0.0;
            match net.nodes()[i].kind {
                NodeKind::Capacitor => {
                    if rate != 0.0 || !is_zero_row {
                        return Err(bad(i, "capacitors carry no demand".into()));
                    }
                }
                NodeKind::Station => {
                    if is_zero_row {
                        if rate != 0.0 {
                            return Err(bad(i, format!("rate {rate} > 0 but OD row is all zero")));
                        }
                    } else if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(bad(i, format!("OD row sums to {sum}, expected 1")));
                    }
                    if let Some(j) = row
                        .iter()
                        .enumerate()
                        .find(|(j, p)| **p > 0.0 && net.nodes()[*j].kind == NodeKind::Capacitor)
                        .map(|(j, _)| j)
                    {
                        return Err(bad(i, format!("OD row sends passengers to capacitor {j}")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Whether node `i` generates trips.
    pub fn has_outgoing(&self, i: usize) -> bool {
        self.od_matrix[i].iter().any(|&p| p > 0.0)
    }

    /// Same spec with every rate set to zero (no arrivals).
    pub fn silent(net: &NetworkModel<f64>, od_matrix: Vec<Vec<f64>>) -> Self {
        DemandSpec { rates: vec![0.0; net.len()], od_matrix, mode: DemandMode::FiniteDemand }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum HistorySource {
    /// Mean inter-arrival `1 / rate` from the demand spec.
    #[default]
    ScenarioPrior,
    /// Mean inter-arrival measured over the trailing window (seconds).
    ObservedWindow { window: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DemandHistory {
    /// Mean inter-arrival time per node, seconds.
    pub ai: Vec<f64>,
    pub source: HistorySource,
}

impl DemandHistory {
    pub fn from_prior(demand: &DemandSpec) -> Self {
        let ai = demand.rates.iter().map(|&r| if r > 0.0 { (1.0 / r).min(AI_CEILING) } else { AI_CEILING }).collect();
        DemandHistory { ai, source: HistorySource::ScenarioPrior }
    }

    /// Builds the estimate from per-node counts over a window of `window` seconds.
    pub fn from_counts(counts: &[usize], window: f64) -> Self {
        let ai =
            counts.iter().map(|&c| if c == 0 { AI_CEILING } else { (window / c as f64).min(AI_CEILING) }).collect();
        DemandHistory { ai, source: HistorySource::ObservedWindow { window } }
    }
}

/// The four shipped origin-destination structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdStructure {
    Uniform,
    /// Every station sends most trips to one attractor station.
    HubAndSpoke,
    /// Stations split in two halves that mostly exchange with each other.
    Commuter,
    /// Destination probability halves with every downstream hop.
    RingFollowing,
}

impl OdStructure {
    pub const ALL: [OdStructure; 4] =
        [OdStructure::Uniform, OdStructure::HubAndSpoke, OdStructure::Commuter, OdStructure::RingFollowing];

    /// Weight of the hub relative to any other destination.
    const HUB_WEIGHT: f64 = 4.0;
    /// Share of trips that cross to the other half in the commuter structure.
    const CROSS_SHARE: f64 = 0.8;

    /// Builds the matrix over all nodes; capacitor rows and columns are zero.
    pub fn build(self, net: &NetworkModel<f64>, hub: NodeId) -> Vec<Vec<f64>> {
        let n = net.len();
        let stations: Vec<usize> = net.stations().map(|s| s.0).collect();
        let half = stations.len() / 2;
        let side = |s: usize| stations.iter().position(|&x| x == s).map(|p| p >= half);
        let mut od = vec![vec![0.0; n]; n];
        for &i in &stations {
            let hops = net.hops(NodeId(i));
            let weights: Vec<(usize, f64)> = stations
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| {
                    let w = match self {
                        OdStructure::Uniform => 1.0,
                        OdStructure::HubAndSpoke => {
                            if j == hub.0 {
                                Self::HUB_WEIGHT
                            } else {
                                1.0
                            }
                        }
                        OdStructure::Commuter => 0.0,
                        OdStructure::RingFollowing => 0.5f64.powi(hops[j].saturating_sub(1) as i32),
                    };
                    (j, w)
                })
                .collect();
            let weights = if self == OdStructure::Commuter {
                let same: Vec<usize> = weights.iter().map(|w| w.0).filter(|&j| side(j) == side(i)).collect();
                let other: Vec<usize> = weights.iter().map(|w| w.0).filter(|&j| side(j) != side(i)).collect();
                let (cross, stay) = match (other.is_empty(), same.is_empty()) {
                    (false, false) => (Self::CROSS_SHARE, 1.0 - Self::CROSS_SHARE),
                    (false, true) => (1.0, 0.0),
                    (true, _) => (0.0, 1.0),
                };
                weights
                    .iter()
                    .map(|&(j, _)| {
                        let w = if side(j) == side(i) { stay / same.len() as f64 } else { cross / other.len() as f64 };
                        (j, w)
                    })
                    .collect()
            } else {
                weights
            };
            let total: f64 = weights.iter().map(|w| w.1).sum();
            for (j, w) in weights {
                od[i][j] = w / total;
            }
        }
        od
    }
}

/// The four structures in canonical order, as used by the one-hot selector.
pub fn od_library(net: &NetworkModel<f64>, hub: NodeId) -> Vec<Vec<Vec<f64>>> {
    OdStructure::ALL.iter().map(|s| s.build(net, hub)).collect()
}
