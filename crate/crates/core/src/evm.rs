//! Empty-vehicle management: the calling and balancing decision functions.
//!
//! Both functions share one structure. A move of an idle empty vehicle from
//! `src` to `dst` is considered only when every threshold gate passes; its
//! score is then the weighted sum of the target's effective queue, empty
//! berths, the normalized inverse distance of the pair and the target's
//! demand intensity (inverse mean inter-arrival time). A score below the
//! total threshold rejects the move.

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::network::{NetworkModel, NodeId, NodeKind};
use crate::scalar::Scalar;

/// One weight/threshold set. The calling and balancing functions each own one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvmParams<T> {
    /// Weight per queued group at the target.
    pub f_q: T,
    /// Weight per empty berth at the target.
    pub f_eb: T,
    /// Weight per unit of normalized inverse distance.
    pub f_nd: T,
    /// Weight per unit of demand intensity (1 / mean inter-arrival seconds).
    pub f_ai: T,
    /// Minimum effective queue at the target.
    pub t_q: u32,
    /// Minimum empty berths at the target.
    pub t_eb: u32,
    /// Minimum idle empty vehicles at the source.
    pub t_ev: u32,
    /// Minimum normalized inverse distance; the inverse of the dispatch horizon.
    pub t_nd: T,
    /// Minimum total score. `+inf` switches the function off.
    pub t_total: T,
}

impl<T: Scalar> EvmParams<T> {
    /// Function switched off: no move can ever reach an infinite total threshold.
    pub fn disabled() -> Self {
        EvmParams {
            f_q: T::zero(),
            f_eb: T::zero(),
            f_nd: T::zero(),
            f_ai: T::zero(),
            t_q: 0,
            t_eb: 0,
            t_ev: 0,
            t_nd: T::zero(),
            t_total: T::infinity(),
        }
    }

    /// Unit weights, every gate open.
    pub fn unit() -> Self {
        EvmParams {
            f_q: T::one(),
            f_eb: T::one(),
            f_nd: T::one(),
            f_ai: T::one(),
            t_q: 0,
            t_eb: 0,
            t_ev: 0,
            t_nd: T::zero(),
            t_total: T::zero(),
        }
    }

    pub fn is_disabled(&self) -> bool {
        self.t_total == T::infinity()
    }

    pub fn validate(&self) -> Result<(), EvmError> {
        let weights = [("f_q", self.f_q), ("f_eb", self.f_eb), ("f_nd", self.f_nd), ("f_ai", self.f_ai)];
        for (name, w) in weights {
            if !(w >= T::zero()) || !w.is_finite() {
                return Err(EvmError::InvalidParams(format!("{name} must be finite and >= 0, got {w}")));
            }
        }
        if !(self.t_nd >= T::zero()) || !self.t_nd.is_finite() {
            return Err(EvmError::InvalidParams(format!("t_nd must be finite and >= 0, got {}", self.t_nd)));
        }
        if self.t_total.is_nan() || self.t_total == T::neg_infinity() {
            return Err(EvmError::InvalidParams(format!("t_total must be finite or +inf, got {}", self.t_total)));
        }
        Ok(())
    }

    /// Multiplies the four weights and the total threshold by `c`.
    pub fn rescaled(&self, c: T) -> Self {
        EvmParams {
            f_q: self.f_q * c,
            f_eb: self.f_eb * c,
            f_nd: self.f_nd * c,
            f_ai: self.f_ai * c,
            t_total: self.t_total * c,
            ..*self
        }
    }

    pub fn to_array(&self) -> [T; 9] {
        [
            self.f_q,
            self.f_eb,
            self.f_nd,
            self.f_ai,
            T::from_u32(self.t_q).unwrap(),
            T::from_u32(self.t_eb).unwrap(),
            T::from_u32(self.t_ev).unwrap(),
            self.t_nd,
            self.t_total,
        ]
    }

    /// Inverse of [`EvmParams::to_array`]. Count thresholds are rounded to the
    /// nearest non-negative integer; negative weights are clamped to zero.
    pub fn from_slice(v: &[T]) -> Result<Self, EvmError> {
        if v.len() != 9 {
            return Err(EvmError::InvalidParams(format!("expected 9 values, got {}", v.len())));
        }
        let count = |x: T| -> Result<u32, EvmError> {
            if x.is_nan() {
                return Err(EvmError::InvalidParams("count threshold is NaN".into()));
            }
            Ok(x.max(T::zero()).round().min(T::of(u32::MAX as f64)).to_u32().unwrap_or(u32::MAX))
        };
        let nonneg = |x: T| x.max(T::zero());
        let p = EvmParams {
            f_q: nonneg(v[0]),
            f_eb: nonneg(v[1]),
            f_nd: nonneg(v[2]),
            f_ai: nonneg(v[3]),
            t_q: count(v[4])?,
            t_eb: count(v[5])?,
            t_ev: count(v[6])?,
            t_nd: nonneg(v[7]),
            t_total: v[8],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> EvmParams<U> {
        let c = |v: T| U::of(v.as_f64());
        EvmParams {
            f_q: c(self.f_q),
            f_eb: c(self.f_eb),
            f_nd: c(self.f_nd),
            f_ai: c(self.f_ai),
            t_q: self.t_q,
            t_eb: self.t_eb,
            t_ev: self.t_ev,
            t_nd: c(self.t_nd),
            t_total: c(self.t_total),
        }
    }
}

/// Key order of the flat parameter representation; also the column order of
/// `p_0..p_17` in dataset files.
pub const PARAM_KEYS: [&str; 18] = [
    "c_f_q",
    "c_f_eb",
    "c_f_nd",
    "c_f_ai",
    "c_t_q",
    "c_t_eb",
    "c_t_ev",
    "c_t_nd",
    "c_t_total",
    "b_f_q",
    "b_f_eb",
    "b_f_nd",
    "b_f_ai",
    "b_t_q",
    "b_t_eb",
    "b_t_ev",
    "b_t_nd",
    "b_t_total",
];

/// Which half of a [`ControllerParams`] a search is allowed to touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Half {
    Calling,
    Balancing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams<T> {
    pub calling: EvmParams<T>,
    pub balancing: EvmParams<T>,
}

impl<T: Scalar> ControllerParams<T> {
    /// Both functions off.
    pub fn disabled() -> Self {
        ControllerParams { calling: EvmParams::disabled(), balancing: EvmParams::disabled() }
    }

    pub fn unit() -> Self {
        ControllerParams { calling: EvmParams::unit(), balancing: EvmParams::unit() }
    }

    pub fn validate(&self) -> Result<(), EvmError> {
        self.calling.validate()?;
        self.balancing.validate()
    }

    pub fn half(&self, half: Half) -> &EvmParams<T> {
        match half {
            Half::Calling => &self.calling,
            Half::Balancing => &self.balancing,
        }
    }

    pub fn half_mut(&mut self, half: Half) -> &mut EvmParams<T> {
        match half {
            Half::Calling => &mut self.calling,
            Half::Balancing => &mut self.balancing,
        }
    }

    pub fn to_array(&self) -> [T; 18] {
        let mut out = [T::zero(); 18];
        out[..9].copy_from_slice(&self.calling.to_array());
        out[9..].copy_from_slice(&self.balancing.to_array());
        out
    }

    pub fn from_slice(v: &[T]) -> Result<Self, EvmError> {
        if v.len() != 18 {
            return Err(EvmError::InvalidParams(format!("expected 18 values, got {}", v.len())));
        }
        Ok(ControllerParams { calling: EvmParams::from_slice(&v[..9])?, balancing: EvmParams::from_slice(&v[9..])? })
    }

    pub fn cast<U: Scalar>(&self) -> ControllerParams<U> {
        ControllerParams { calling: self.calling.cast(), balancing: self.balancing.cast() }
    }
}

impl<T: Scalar> Default for ControllerParams<T> {
    fn default() -> Self {
        Self::disabled()
    }
}

impl<T: Scalar> Serialize for ControllerParams<T> {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(18))?;
        for (i, (key, value)) in PARAM_KEYS.iter().zip(self.to_array()).enumerate() {
            let v = value.as_f64();
            let counts = matches!(i % 9, 4..=6);
            if v.is_infinite() {
                map.serialize_entry(key, "inf")?;
            } else if counts {
                map.serialize_entry(key, &(v as u64))?;
            } else {
                map.serialize_entry(key, &v)?;
            }
        }
        map.end()
    }
}

impl<'de, T: Scalar> Deserialize<'de> for ControllerParams<T> {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Value {
            Number(f64),
            Text(String),
        }

        struct ParamsVisitor<T>(std::marker::PhantomData<T>);

        impl<'de, T: Scalar> Visitor<'de> for ParamsVisitor<T> {
            type Value = ControllerParams<T>;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                write!(f, "an object with the 18 keys c_f_q .. b_t_total")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<Self::Value, A::Error> {
                let mut values: [Option<f64>; 18] = [None; 18];
                while let Some(key) = access.next_key::<String>()? {
                    let Some(slot) = PARAM_KEYS.iter().position(|k| *k == key) else {
                        return Err(de::Error::unknown_field(&key, &PARAM_KEYS));
                    };
                    let v = match access.next_value::<Value>()? {
                        Value::Number(v) => v,
                        Value::Text(s) => match s.as_str() {
                            "inf" | "+inf" | "Infinity" | "infinity" => f64::INFINITY,
                            other => {
                                return Err(de::Error::custom(format!(
                                    "{key}: expected a number or \"inf\", got {other:?}"
                                )))
                            }
                        },
                    };
                    if values[slot].replace(v).is_some() {
                        return Err(de::Error::duplicate_field(PARAM_KEYS[slot]));
                    }
                }
                let mut flat = [T::zero(); 18];
                for (i, v) in values.iter().enumerate() {
                    let v = v.ok_or_else(|| de::Error::missing_field(PARAM_KEYS[i]))?;
                    if matches!(i % 9, 4..=6) && (v < 0.0 || v.fract() != 0.0) {
                        return Err(de::Error::custom(format!(
                            "{} must be a non-negative integer, got {v}",
                            PARAM_KEYS[i]
                        )));
                    }
                    flat[i] = T::of(v);
                }
                let params = ControllerParams::from_slice(&flat).map_err(de::Error::custom)?;
                // from_slice clamps; reject negative inputs outright instead.
                if params.to_array().iter().zip(flat).any(|(a, b)| *a != b) {
                    return Err(de::Error::custom("weights and t_nd must be >= 0"));
                }
                Ok(params)
            }
        }

        deserializer.deserialize_map(ParamsVisitor(std::marker::PhantomData))
    }
}

/// What one node looks like at decision time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationView<T> {
    pub node: NodeId,
    pub kind: NodeKind,
    /// Waiting passenger groups.
    pub queue_len: u32,
    /// Berths neither occupied nor reserved.
    pub empty_berths: u32,
    /// Idle empty vehicles parked in berths.
    pub empty_vehicles: u32,
    /// Empty vehicles already travelling here.
    pub inbound_empties: u32,
    /// Mean passenger-group inter-arrival time in seconds.
    pub ai: T,
}

impl<T: Scalar> StationView<T> {
    /// Queue not already covered by inbound empty vehicles.
    pub fn effective_queue(&self) -> u32 {
        self.queue_len.saturating_sub(self.inbound_empties)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gate {
    QueueThreshold,
    EmptyBerthThreshold,
    EmptyVehicleThreshold,
    HorizonThreshold,
    TotalThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict<T> {
    Accepted(T),
    Rejected(Gate),
}

impl<T: Copy> Verdict<T> {
    pub fn score(&self) -> Option<T> {
        match self {
            Verdict::Accepted(s) => Some(*s),
            Verdict::Rejected(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveKind {
    Call,
    Balance,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MoveCandidate<T> {
    pub source: NodeId,
    pub target: NodeId,
    pub score: T,
    pub kind: MoveKind,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvmError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("source and target are the same node ({0})")]
    SameNode(NodeId),
    #[error("inconsistent station views: {0}")]
    InconsistentViews(String),
}

/// Counts how often the weighted sum was actually computed.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ScoreProbe {
    pub gated: u64,
    pub computed: u64,
}

/// Scores moving one idle empty vehicle from `src` to `dst`.
pub fn score_move<T: Scalar>(
    p: &EvmParams<T>,
    net: &NetworkModel<T>,
    src: &StationView<T>,
    dst: &StationView<T>,
) -> Result<Verdict<T>, EvmError> {
    score_move_probed(p, net, src, dst, &mut ScoreProbe::default())
}

pub fn score_move_probed<T: Scalar>(
    p: &EvmParams<T>,
    net: &NetworkModel<T>,
    src: &StationView<T>,
    dst: &StationView<T>,
    probe: &mut ScoreProbe,
) -> Result<Verdict<T>, EvmError> {
    if src.node == dst.node {
        return Err(EvmError::SameNode(src.node));
    }
    Ok(gated_score(p, net, src, dst, probe))
}

fn gated_score<T: Scalar>(
    p: &EvmParams<T>,
    net: &NetworkModel<T>,
    src: &StationView<T>,
    dst: &StationView<T>,
    probe: &mut ScoreProbe,
) -> Verdict<T> {
    let queue = dst.effective_queue();
    let nd = net.nd_raw(src.node, dst.node);
    let gate = if queue < p.t_q {
        Some(Gate::QueueThreshold)
    } else if dst.empty_berths < p.t_eb {
        Some(Gate::EmptyBerthThreshold)
    } else if src.empty_vehicles < p.t_ev {
        Some(Gate::EmptyVehicleThreshold)
    } else if nd < p.t_nd {
        Some(Gate::HorizonThreshold)
    } else {
        None
    };
    if let Some(gate) = gate {
        probe.gated += 1;
        return Verdict::Rejected(gate);
    }
    probe.computed += 1;
    let score = p.f_q * T::from_u32(queue).unwrap()
        + p.f_eb * T::from_u32(dst.empty_berths).unwrap()
        + p.f_nd * nd
        + p.f_ai * dst.ai.recip();
    if score < p.t_total {
        Verdict::Rejected(Gate::TotalThreshold)
    } else {
        Verdict::Accepted(score)
    }
}

/// Nodes `j` whose normalized inverse distance from `center` is at least `t_nd`.
pub fn horizon_filter<'a, T: Scalar>(
    views: &'a [StationView<T>],
    t_nd: T,
    net: &NetworkModel<T>,
    center: NodeId,
) -> Vec<&'a StationView<T>> {
    views.iter().filter(|v| v.node != center && net.nd_raw(center, v.node) >= t_nd).collect()
}

fn check_views<T: Scalar>(net: &NetworkModel<T>, views: &[StationView<T>]) -> Result<(), EvmError> {
    if views.len() != net.len() {
        return Err(EvmError::InconsistentViews(format!("{} views for {} nodes", views.len(), net.len())));
    }
    for (i, v) in views.iter().enumerate() {
        if v.node.0 != i {
            return Err(EvmError::InconsistentViews(format!("view {i} describes node {}", v.node)));
        }
        if v.kind != net.node(v.node).kind {
            return Err(EvmError::InconsistentViews(format!("node {i} kind mismatch")));
        }
        if v.kind == NodeKind::Capacitor && v.queue_len > 0 {
            return Err(EvmError::InconsistentViews(format!("capacitor {i} has a queue")));
        }
        if !(v.ai > T::zero()) {
            return Err(EvmError::InconsistentViews(format!("node {i} has non-positive ai")));
        }
    }
    Ok(())
}

/// Restriction applied by [`decision_round`] on which targets one source may
/// consider. `Global` lets every source see every node; `Horizon` limits each
/// source to its own horizon, as a station that only talks to neighbours would.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Visibility {
    Global,
    Horizon,
}

/// One EVM round: greedy calling, then greedy balancing.
///
/// Each phase repeatedly commits the best accepted move until none remains.
/// Ties on score go to the shorter trip, then to the smaller `(source, target)`.
/// A move also needs an idle vehicle at the source and, for calling, an
/// uncovered waiting group at the target; for balancing, a free berth at the
/// target (which the move reserves).
pub fn decision_round<T: Scalar>(
    cp: &ControllerParams<T>,
    net: &NetworkModel<T>,
    views: &[StationView<T>],
) -> Result<Vec<MoveCandidate<T>>, EvmError> {
    round(cp, net, views, Visibility::Global, &mut ScoreProbe::default())
}

/// [`decision_round`] where every source only sees targets inside its own
/// horizon. Produces the same moves; exists to check that the decision is local.
pub fn decision_round_local<T: Scalar>(
    cp: &ControllerParams<T>,
    net: &NetworkModel<T>,
    views: &[StationView<T>],
) -> Result<Vec<MoveCandidate<T>>, EvmError> {
    round(cp, net, views, Visibility::Horizon, &mut ScoreProbe::default())
}

pub fn decision_round_probed<T: Scalar>(
    cp: &ControllerParams<T>,
    net: &NetworkModel<T>,
    views: &[StationView<T>],
    probe: &mut ScoreProbe,
) -> Result<Vec<MoveCandidate<T>>, EvmError> {
    round(cp, net, views, Visibility::Global, probe)
}

fn round<T: Scalar>(
    cp: &ControllerParams<T>,
    net: &NetworkModel<T>,
    views: &[StationView<T>],
    visibility: Visibility,
    probe: &mut ScoreProbe,
) -> Result<Vec<MoveCandidate<T>>, EvmError> {
    cp.validate()?;
    check_views(net, views)?;
    let mut state = views.to_vec();
    let mut out = Vec::new();
    for (kind, params) in [(MoveKind::Call, &cp.calling), (MoveKind::Balance, &cp.balancing)] {
        if params.is_disabled() {
            continue;
        }
        while let Some(best) = best_move(kind, params, net, &state, visibility, probe) {
            let (s, d) = (best.source.0, best.target.0);
            state[s].empty_vehicles = state[s]
                .empty_vehicles
                .checked_sub(1)
                .ok_or_else(|| EvmError::InconsistentViews(format!("node {s} ran out of empty vehicles")))?;
            state[d].inbound_empties += 1;
            if kind == MoveKind::Balance {
                state[d].empty_berths = state[d]
                    .empty_berths
                    .checked_sub(1)
                    .ok_or_else(|| EvmError::InconsistentViews(format!("node {d} ran out of empty berths")))?;
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn best_move<T: Scalar>(
    kind: MoveKind,
    params: &EvmParams<T>,
    net: &NetworkModel<T>,
    state: &[StationView<T>],
    visibility: Visibility,
    probe: &mut ScoreProbe,
) -> Option<MoveCandidate<T>> {
    let mut best: Option<(T, T, MoveCandidate<T>)> = None;
    for src in state.iter().filter(|v| v.empty_vehicles > 0) {
        let targets: Vec<&StationView<T>> = match visibility {
            Visibility::Global => state.iter().filter(|v| v.node != src.node).collect(),
            Visibility::Horizon => horizon_filter(state, params.t_nd, net, src.node),
        };
        for dst in targets {
            let feasible = match kind {
                MoveKind::Call => dst.kind == NodeKind::Station && dst.effective_queue() > 0,
                MoveKind::Balance => dst.empty_berths > 0,
            };
            if !feasible {
                continue;
            }
            let Verdict::Accepted(score) = gated_score(params, net, src, dst, probe) else {
                continue;
            };
            let dist = net.dist(src.node, dst.node);
            let better = match &best {
                None => true,
                Some((bs, bd, _)) => score > *bs || (score == *bs && dist < *bd),
            };
            if better {
                best = Some((score, dist, MoveCandidate { source: src.node, target: dst.node, score, kind }));
            }
        }
    }
    best.map(|(_, _, m)| m)
}
