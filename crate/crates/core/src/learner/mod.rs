//! Parameter-set clustering, the environment classifier and its evaluation.

mod kmeans;
mod mlp;
mod scaler;

use std::io::{Read, Write};
use std::ops::Range;

use rand::RngExt;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use kmeans::{fit_clusters, lloyd, nearest, ClusterModel, MAX_ITERATIONS};
pub use mlp::{argmax, fit, neuron_forward, softmax, Activation, Gradients, Hyperparams, Layer, MlpModel, Topology};
pub use scaler::Scaler;

use crate::evm::{ControllerParams, EvmError};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::tuner::{evaluate, DatasetRow, EnvVector, Scenario, TuneError, ENV_DIM, PARAM_DIM};

/// Stand-in for an infinite `t_total` so disabled halves can be clustered.
pub const DISABLED_PROXY: f64 = 1e6;

/// Parameter slots holding integer count thresholds.
const COUNT_SLOTS: [usize; 6] = [4, 5, 6, 13, 14, 15];

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few rows: {rows} given, {needed} needed")]
    TooFewRows { rows: usize, needed: usize },
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("layer {layer} uses a step activation, which has no gradient")]
    UntrainableActivation { layer: usize },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyperparams(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error(transparent)]
    Evm(#[from] EvmError),
    #[error(transparent)]
    Tune(#[from] TuneError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("labeled dataset: {0}")]
    Dataset(String),
}

/// Environment features of one scenario with the cluster of its tuned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledRow<T> {
    pub scenario_id: usize,
    pub env: Vec<T>,
    pub cluster: usize,
}

/// Parameter columns of a tuned dataset, with infinite thresholds replaced by
/// [`DISABLED_PROXY`].
pub fn param_rows<T: Scalar>(rows: &[DatasetRow]) -> Vec<Vec<T>> {
    rows.iter()
        .map(|r| r.params.iter().map(|&v| T::of(if v.is_infinite() { DISABLED_PROXY } else { v })).collect())
        .collect()
}

/// Labels each row with the cluster nearest its parameter set. Environment
/// columns are returned unscaled; scaling is fitted on the training split.
pub fn label_dataset<T: Scalar>(rows: &[DatasetRow], cm: &ClusterModel<T>) -> Result<Vec<LabeledRow<T>>, LearnError> {
    if cm.dim() != PARAM_DIM {
        return Err(LearnError::ModelMismatch(format!(
            "cluster model has {} dimensions, dataset has {PARAM_DIM}",
            cm.dim()
        )));
    }
    rows.iter()
        .zip(param_rows::<T>(rows))
        .map(|(r, p)| {
            Ok(LabeledRow {
                scenario_id: r.scenario_id,
                env: r.env.iter().map(|&v| T::of(v)).collect(),
                cluster: cm.assign(&p)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterRate {
    pub cluster: usize,
    pub correct: usize,
    pub total: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub final_loss: f64,
    pub test_accuracy: f64,
    pub per_cluster: Vec<ClusterRate>,
    pub split_seed: u64,
    pub train_rows: usize,
    pub test_rows: usize,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: MlpModel<T>,
    pub scaler: Scaler<T>,
    pub report: TrainReport,
    pub loss_trace: Vec<T>,
    /// Row indices of the training split.
    pub train: Vec<usize>,
    /// Row indices of the held-out split.
    pub test: Vec<usize>,
}

/// Stratified split: every represented cluster puts at least one row on each side.
pub fn stratified_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>), LearnError> {
    use rand::seq::SliceRandom;
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_cluster = vec![Vec::new(); k];
    for (i, &c) in labels.iter().enumerate() {
        by_cluster[c].push(i);
    }
    let mut rng = stream_rng(seed, Stream::Split);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, mut members) in by_cluster.into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(LearnError::DegenerateSplit(format!("cluster {c} has a single row")));
        }
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * fraction).round() as usize).clamp(1, members.len() - 1);
        test.extend_from_slice(&members[n_train..]);
        members.truncate(n_train);
        train.extend(members);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

/// Per-cluster and overall accuracy of `predict` on `rows`.
fn score_rows<T: Scalar>(
    model: &MlpModel<T>,
    scaler: &Scaler<T>,
    rows: &[&LabeledRow<T>],
) -> Result<(f64, Vec<ClusterRate>), LearnError> {
    let mut rates: Vec<ClusterRate> = Vec::new();
    let mut correct = 0;
    for r in rows {
        let hit = model.predict(&scaler.transform(&r.env)?)? == r.cluster;
        correct += hit as usize;
        match rates.iter_mut().find(|c| c.cluster == r.cluster) {
            Some(c) => {
                c.total += 1;
                c.correct += hit as usize;
            }
            None => rates.push(ClusterRate { cluster: r.cluster, correct: hit as usize, total: 1, success_rate: 0.0 }),
        }
    }
    rates.sort_by_key(|c| c.cluster);
    for c in &mut rates {
        c.success_rate = c.correct as f64 / c.total as f64;
    }
    Ok((correct as f64 / rows.len() as f64, rates))
}

/// Splits, scales and trains a `dim -> hidden -> k` classifier, then scores it
/// on the held-out rows.
pub fn train_mlp<T: Scalar>(
    rows: &[LabeledRow<T>],
    k: usize,
    topology: &Topology<T>,
    hyper: &Hyperparams,
) -> Result<TrainOutcome<T>, LearnError> {
    hyper.validate()?;
    let dim = rows.first().ok_or(LearnError::TooFewRows { rows: 0, needed: 2 })?.env.len();
    for r in rows {
        if r.env.len() != dim {
            return Err(LearnError::DimensionMismatch { expected: dim, got: r.env.len() });
        }
        if r.cluster >= k {
            return Err(LearnError::ModelMismatch(format!("label {} for {k} clusters", r.cluster)));
        }
    }
    if !topology.hidden_activation.is_trainable() {
        return Err(LearnError::UntrainableActivation { layer: 0 });
    }
    if !topology.output_activation.is_trainable() {
        return Err(LearnError::UntrainableActivation { layer: 1 });
    }
    let labels: Vec<usize> = rows.iter().map(|r| r.cluster).collect();
    let (train, test) = stratified_split(&labels, hyper.train_fraction, hyper.seed)?;
    let train_env: Vec<Vec<T>> = train.iter().map(|&i| rows[i].env.clone()).collect();
    let scaler = Scaler::fit(&train_env)?;
    let xs: Vec<Vec<T>> = train_env.iter().map(|e| scaler.transform(e)).collect::<Result<_, _>>()?;
    let ys: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let mut model =
        MlpModel::new(&[dim, topology.hidden, k], topology.hidden_activation, topology.output_activation, hyper.seed)?;
    let loss_trace = fit(&mut model, &xs, &ys, hyper)?;
    let test_rows: Vec<&LabeledRow<T>> = test.iter().map(|&i| &rows[i]).collect();
    let (test_accuracy, per_cluster) = score_rows(&model, &scaler, &test_rows)?;
    let final_loss = match loss_trace.last() {
        Some(l) => l.as_f64(),
        None => model.loss(&xs, &ys)?.as_f64(),
    };
    let report = TrainReport {
        epochs: loss_trace.len(),
        final_loss,
        test_accuracy,
        per_cluster,
        split_seed: hyper.seed,
        train_rows: train.len(),
        test_rows: test.len(),
    };
    Ok(TrainOutcome { model, scaler, report, loss_trace, train, test })
}

/// Everything needed to map an environment to controller parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar", deny_unknown_fields)]
pub struct ParamSelector<T> {
    pub env_scaler: Scaler<T>,
    pub param_scaler: Scaler<T>,
    /// Cluster centroids in scaled parameter coordinates.
    pub centroids: Vec<Vec<T>>,
    pub mlp: MlpModel<T>,
    /// Environment columns holding a one-hot selector, re-projected after noise.
    pub one_hot: Option<Range<usize>>,
    pub seed: u64,
}

impl<T: Scalar> ParamSelector<T> {
    pub fn new(cm: &ClusterModel<T>, outcome: &TrainOutcome<T>, one_hot: Option<Range<usize>>, seed: u64) -> Self {
        ParamSelector {
            env_scaler: outcome.scaler.clone(),
            param_scaler: cm.scaler.clone(),
            centroids: cm.centroids.clone(),
            mlp: outcome.model.clone(),
            one_hot,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        self.mlp.validate()?;
        let bad = |s: String| Err(LearnError::ModelMismatch(s));
        if self.env_scaler.dim() != self.mlp.input_dim() {
            return bad(format!(
                "scaler has {} features, network takes {}",
                self.env_scaler.dim(),
                self.mlp.input_dim()
            ));
        }
        if self.env_scaler.maxes.len() != self.env_scaler.dim()
            || self.param_scaler.maxes.len() != self.param_scaler.dim()
        {
            return bad("scaler mins and maxes differ in length".into());
        }
        if self.centroids.len() != self.mlp.output_dim() {
            return bad(format!("{} centroids for {} outputs", self.centroids.len(), self.mlp.output_dim()));
        }
        if let Some(c) = self.centroids.iter().find(|c| c.len() != self.param_scaler.dim()) {
            return bad(format!("centroid has {} values, parameter scaler {}", c.len(), self.param_scaler.dim()));
        }
        if let Some(r) = &self.one_hot {
            if r.start >= r.end || r.end > self.env_scaler.dim() {
                return bad(format!("one-hot columns {r:?} outside {} features", self.env_scaler.dim()));
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    /// Cluster predicted for already-scaled environment features.
    pub fn classify_scaled(&self, x: &[T]) -> Result<usize, LearnError> {
        self.mlp.predict(x)
    }

    pub fn classify(&self, env: &[T]) -> Result<usize, LearnError> {
        self.classify_scaled(&self.env_scaler.transform(env)?)
    }

    /// Centroid of cluster `c` in parameter units.
    pub fn centroid_params(&self, c: usize) -> Result<ControllerParams<T>, LearnError> {
        let centroid =
            self.centroids.get(c).ok_or_else(|| LearnError::ModelMismatch(format!("cluster {c} of {}", self.k())))?;
        let raw = self.param_scaler.inverse_transform(centroid)?;
        let proxy = T::of(DISABLED_PROXY);
        let v: Vec<T> = raw.into_iter().map(|x| if x >= proxy { T::infinity() } else { x }).collect();
        Ok(ControllerParams::from_slice(&v)?)
    }

    pub fn predict_params(&self, env: &EnvVector) -> Result<ControllerParams<T>, LearnError> {
        env.validate()?;
        let x: Vec<T> = env.to_array().iter().map(|&v| T::of(v)).collect();
        self.centroid_params(self.classify(&x)?)
    }
}

/// One point of a success-rate curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub cluster: usize,
    pub sigma: f64,
    pub success_rate: f64,
    pub trials: usize,
}

fn reproject_one_hot<T: Scalar>(x: &mut [T], cols: &Range<usize>) {
    let hot = cols.start + argmax(&x[cols.clone()]);
    for (j, v) in x.iter_mut().enumerate().take(cols.end).skip(cols.start) {
        *v = if j == hot { T::one() } else { T::zero() };
    }
}

/// Success rate per true cluster when each test row's scaled features are
/// perturbed by Gaussian noise of every level in `sigmas`. The same unit
/// draws are reused across levels.
pub fn noise_success_curve<T: Scalar>(
    selector: &ParamSelector<T>,
    rows: &[LabeledRow<T>],
    sigmas: &[f64],
    trials: usize,
    seed: u64,
) -> Result<Vec<CurvePoint>, LearnError> {
    if rows.is_empty() {
        return Err(LearnError::TooFewRows { rows: 0, needed: 1 });
    }
    if trials == 0 {
        return Err(LearnError::InvalidHyperparams("trials must be >= 1".into()));
    }
    if let Some(s) = sigmas.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(LearnError::InvalidHyperparams(format!("noise level {s} must be finite and >= 0")));
    }
    let scaled: Vec<Vec<T>> = rows.iter().map(|r| selector.env_scaler.transform(&r.env)).collect::<Result<_, _>>()?;
    let hits: Vec<Vec<usize>> = scaled
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = stream_rng(derive_seed(seed, i as u64), Stream::Noise);
            let draws: Vec<f64> = (0..trials * x.len()).map(|_| rng.sample(StandardNormal)).collect();
            sigmas
                .iter()
                .map(|&sigma| {
                    let mut count = 0;
                    for z in draws.chunks(x.len()) {
                        let mut noisy: Vec<T> = x.iter().zip(z).map(|(&v, &e)| v + T::of(sigma * e)).collect();
                        if let Some(cols) = &selector.one_hot {
                            reproject_one_hot(&mut noisy, cols);
                        }
                        count += (selector.classify_scaled(&noisy)? == rows[i].cluster) as usize;
                    }
                    Ok(count)
                })
                .collect::<Result<Vec<usize>, LearnError>>()
        })
        .collect::<Result<_, _>>()?;
    let mut clusters: Vec<usize> = rows.iter().map(|r| r.cluster).collect();
    clusters.sort_unstable();
    clusters.dedup();
    let mut out = Vec::with_capacity(clusters.len() * sigmas.len());
    for &c in &clusters {
        let members: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].cluster == c).collect();
        for (s, &sigma) in sigmas.iter().enumerate() {
            let successes: usize = members.iter().map(|&i| hits[i][s]).sum();
            out.push(CurvePoint {
                cluster: c,
                sigma,
                success_rate: successes as f64 / (members.len() * trials) as f64,
                trials,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneResult {
    pub params: ControllerParams<f64>,
    pub objective: f64,
    /// Incumbent objective before the first and after every iteration.
    pub trace: Vec<f64>,
    pub accepted: usize,
}

/// Hill climbing from `incumbent`: each iteration moves one uniformly chosen
/// parameter by plus or minus its step and keeps the move only on strict
/// improvement.
pub fn online_finetune(
    incumbent: &ControllerParams<f64>,
    scenario: &Scenario,
    steps: &[f64; PARAM_DIM],
    iterations: usize,
    seed: u64,
    replications: u32,
) -> Result<FinetuneResult, LearnError> {
    incumbent.validate()?;
    if let Some(s) = steps.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
        return Err(LearnError::InvalidHyperparams(format!("step size {s} must be finite and >= 0")));
    }
    let mut rng = stream_rng(seed, Stream::Finetune);
    let mut best = *incumbent;
    let mut best_obj = evaluate(scenario, &best, replications)?;
    let mut trace = vec![best_obj];
    let mut accepted = 0;
    for _ in 0..iterations {
        let slot = rng.random_range(0..PARAM_DIM);
        let up = rng.random::<bool>();
        let mut values = best.to_array();
        let v = values[slot];
        let step = if COUNT_SLOTS.contains(&slot) { steps[slot].round() } else { steps[slot] };
        let moved = if up { v + step } else { (v - step).max(0.0) };
        if v.is_finite() && moved != v {
            values[slot] = moved;
            let candidate = ControllerParams::from_slice(&values)?;
            let obj = evaluate(scenario, &candidate, replications)?;
            if obj < best_obj {
                best = candidate;
                best_obj = obj;
                accepted += 1;
            }
        }
        trace.push(best_obj);
    }
    Ok(FinetuneResult { params: best, objective: best_obj, trace, accepted })
}

/// Default hill-climbing steps: 0.5 for weights, 1 for counts, 0.25 for the
/// horizon threshold and 2 for the total threshold.
pub fn default_steps() -> [f64; PARAM_DIM] {
    let half = [0.5, 0.5, 0.5, 0.5, 1.0, 1.0, 1.0, 0.25, 2.0];
    let mut s = [0.0; PARAM_DIM];
    s[..9].copy_from_slice(&half);
    s[9..].copy_from_slice(&half);
    s
}

pub fn labeled_header(dim: usize) -> Vec<String> {
    std::iter::once("scenario_id".to_string())
        .chain((0..dim).map(|i| format!("env_{i}")))
        .chain(std::iter::once("cluster".to_string()))
        .collect()
}

pub fn write_labeled<W: Write>(rows: &[LabeledRow<f64>], out: W) -> Result<(), LearnError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(labeled_header(rows.first().map_or(ENV_DIM, |r| r.env.len())))?;
    for r in rows {
        let mut rec = vec![r.scenario_id.to_string()];
        rec.extend(r.env.iter().map(|v| v.to_string()));
        rec.push(r.cluster.to_string());
        w.write_record(rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_labeled<R: Read>(input: R) -> Result<Vec<LabeledRow<f64>>, LearnError> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let dim = header.len().saturating_sub(2);
    if header != labeled_header(dim) || dim == 0 {
        return Err(LearnError::Dataset(format!("unexpected header {}", header.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let int = |j: usize| {
            field(j).parse::<usize>().map_err(|_| {
                LearnError::Dataset(format!("line {line}: column {} is not a count: {:?}", header[j], field(j)))
            })
        };
        let env = (1..=dim)
            .map(|j| match field(j).parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(LearnError::Dataset(format!(
                    "line {line}: column {} is not a number: {:?}",
                    header[j],
                    field(j)
                ))),
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(LabeledRow { scenario_id: int(0)?, env, cluster: int(dim + 1)? });
    }
    Ok(rows)
}

/// Clusters the tuned parameters, labels the rows and trains the classifier.
pub fn train_selector(
    dataset: &[DatasetRow],
    k: usize,
    topology: &Topology<f64>,
    hyper: &Hyperparams,
) -> Result<(ParamSelector<f64>, TrainOutcome<f64>, Vec<LabeledRow<f64>>), LearnError> {
    let cm = fit_clusters(&param_rows::<f64>(dataset), k, hyper.seed)?;
    let labeled = label_dataset(dataset, &cm)?;
    let outcome = train_mlp(&labeled, k, topology, hyper)?;
    let selector = ParamSelector::new(&cm, &outcome, Some(EnvVector::one_hot_range()), hyper.seed);
    Ok((selector, outcome, labeled))
}
