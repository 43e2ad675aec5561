//! Feed-forward classifier with softmax readout trained by minibatch
//! gradient descent.

use rand::seq::SliceRandom;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LearnError;
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound = "T: Scalar")]
pub enum Activation<T> {
    /// `f(s) = a * s`.
    Linear {
        a: T,
    },
    /// 1 when `s > threshold`, else 0. Not trainable.
    Step {
        threshold: T,
    },
    Tanh,
    Sigmoid,
    Relu,
}

impl<T: Scalar> Activation<T> {
    pub fn identity() -> Self {
        Activation::Linear { a: T::one() }
    }

    pub fn apply(&self, s: T) -> T {
        match *self {
            Activation::Linear { a } => a * s,
            Activation::Step { threshold } => {
                if s > threshold {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => s.tanh(),
            Activation::Sigmoid => T::one() / (T::one() + (-s).exp()),
            Activation::Relu => s.max(T::zero()),
        }
    }

    /// Derivative at pre-activation `s` with output `y = f(s)`.
    fn derivative(&self, s: T, y: T) -> T {
        match *self {
            Activation::Linear { a } => a,
            Activation::Step { .. } => T::zero(),
            Activation::Tanh => T::one() - y * y,
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Relu => {
                if s > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn is_trainable(&self) -> bool {
        !matches!(self, Activation::Step { .. })
    }

    pub fn cast<U: Scalar>(&self) -> Activation<U> {
        match *self {
            Activation::Linear { a } => Activation::Linear { a: U::of(a.as_f64()) },
            Activation::Step { threshold } => Activation::Step { threshold: U::of(threshold.as_f64()) },
            Activation::Tanh => Activation::Tanh,
            Activation::Sigmoid => Activation::Sigmoid,
            Activation::Relu => Activation::Relu,
        }
    }
}

/// Output of one neuron: `f(sum x_i * w_i)`.
pub fn neuron_forward<T: Scalar>(x: &[T], w: &[T], activation: &Activation<T>) -> Result<T, LearnError> {
    if x.len() != w.len() {
        return Err(LearnError::DimensionMismatch { expected: w.len(), got: x.len() });
    }
    let s: T = x.iter().zip(w).map(|(&a, &b)| a * b).sum();
    Ok(activation.apply(s))
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let m = z.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = z.iter().map(|&v| (v - m).exp()).collect();
    let total: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Layer<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation<T>,
    /// Row-major `outputs x inputs`.
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Layer<T> {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation<T>) -> Self {
        Layer {
            inputs,
            outputs,
            activation,
            weights: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    /// Uniform Xavier initialisation; biases start at zero.
    fn xavier(inputs: usize, outputs: usize, activation: Activation<T>, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs).map(|_| T::of(rng.random_range(-limit..limit))).collect();
        Layer { inputs, outputs, activation, weights, bias: vec![T::zero(); outputs] }
    }

    pub fn weight(&self, out: usize, inp: usize) -> T {
        self.weights[out * self.inputs + inp]
    }

    fn pre_activation(&self, x: &[T]) -> Vec<T> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                row.iter().zip(x).map(|(&w, &v)| w * v).sum::<T>() + self.bias[o]
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct MlpModel<T> {
    pub layers: Vec<Layer<T>>,
    pub dropout_rate: T,
}

/// Gradients with the same shapes as the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<Vec<T>>,
    pub bias: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros(model: &MlpModel<T>) -> Self {
        Gradients {
            weights: model.layers.iter().map(|l| vec![T::zero(); l.weights.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![T::zero(); l.bias.len()]).collect(),
        }
    }

    fn scale(&mut self, c: T) {
        for v in self.weights.iter_mut().chain(self.bias.iter_mut()) {
            for g in v.iter_mut() {
                *g = *g * c;
            }
        }
    }
}

struct Trace<T> {
    /// Input fed to each layer (after dropout for hidden layers).
    inputs: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    /// Activation before dropout.
    post: Vec<Vec<T>>,
    /// Per-unit multiplier applied by dropout (0 or 1/(1-rate)).
    masks: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> MlpModel<T> {
    /// Builds a network with layer widths `dims` (input first, output last).
    pub fn new(dims: &[usize], hidden: Activation<T>, output: Activation<T>, seed: u64) -> Result<Self, LearnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(LearnError::ModelMismatch(format!("invalid layer widths {dims:?}")));
        }
        let mut rng = stream_rng(seed, Stream::WeightInit);
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::xavier(w[0], w[1], if i == last { output } else { hidden }, &mut rng))
            .collect();
        Ok(MlpModel { layers, dropout_rate: T::zero() })
    }

    pub fn from_layers(layers: Vec<Layer<T>>, dropout_rate: T) -> Result<Self, LearnError> {
        let m = MlpModel { layers, dropout_rate };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |s: String| Err(LearnError::ModelMismatch(s));
        if self.layers.is_empty() {
            return bad("model has no layers".into());
        }
        if !(self.dropout_rate >= T::zero() && self.dropout_rate < T::one()) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.bias.len() != l.outputs {
                return bad(format!("layer {i} arrays do not match {}x{}", l.outputs, l.inputs));
            }
            if i > 0 && self.layers[i - 1].outputs != l.inputs {
                return bad(format!(
                    "layer {i} expects {} inputs, previous layer gives {}",
                    l.inputs,
                    self.layers[i - 1].outputs
                ));
            }
            if l.weights.iter().chain(&l.bias).any(|v| !v.is_finite()) {
                return bad(format!("layer {i} holds non-finite weights"));
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    /// Inference-mode output layer values (before softmax).
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, LearnError> {
        if x.len() != self.input_dim() {
            return Err(LearnError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        let mut a = x.to_vec();
        for l in &self.layers {
            a = l.pre_activation(&a).into_iter().map(|s| l.activation.apply(s)).collect();
        }
        Ok(a)
    }

    pub fn predict_proba(&self, x: &[T]) -> Result<Vec<T>, LearnError> {
        Ok(softmax(&self.forward(x)?))
    }

    pub fn predict(&self, x: &[T]) -> Result<usize, LearnError> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Training-mode pass. With `dropout` set, hidden activations are masked
    /// and rescaled by `1 / (1 - rate)`.
    fn trace(&self, x: &[T], dropout: Option<(T, &mut ChaCha8Rng)>) -> Trace<T> {
        let n = self.layers.len();
        let mut t = Trace { inputs: Vec::with_capacity(n), pre: Vec::new(), post: Vec::new(), masks: Vec::new() };
        let mut dropout = dropout;
        let mut a = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let z = l.pre_activation(&a);
            let y: Vec<T> = z.iter().map(|&s| l.activation.apply(s)).collect();
            t.inputs.push(std::mem::take(&mut a));
            let mask = match dropout.as_mut() {
                Some((rate, rng)) if i + 1 < n => {
                    let keep = T::one() / (T::one() - *rate);
                    let r = rate.as_f64();
                    Some(
                        (0..y.len())
                            .map(|_| if rng.random::<f64>() >= r { keep } else { T::zero() })
                            .collect::<Vec<T>>(),
                    )
                }
                _ => None,
            };
            a = match &mask {
                Some(m) => y.iter().zip(m).map(|(&v, &k)| v * k).collect(),
                None => y.clone(),
            };
            t.pre.push(z);
            t.post.push(y);
            t.masks.push(mask);
        }
        t.inputs.push(a);
        t
    }

    /// Adds the gradient of one row's cross-entropy to `g`; returns the loss.
    fn backprop(&self, t: &Trace<T>, label: usize, g: &mut Gradients<T>) -> T {
        let n = self.layers.len();
        let logits = &t.inputs[n];
        let p = softmax(logits);
        let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = m + logits.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        let loss = lse - logits[label];
        // dL/d(output activation)
        let mut da: Vec<T> = p;
        da[label] = da[label] - T::one();
        for li in (0..n).rev() {
            let l = &self.layers[li];
            if let Some(mask) = &t.masks[li] {
                for (d, &k) in da.iter_mut().zip(mask) {
                    *d = *d * k;
                }
            }
            let dz: Vec<T> = da
                .iter()
                .zip(t.pre[li].iter().zip(&t.post[li]))
                .map(|(&d, (&s, &y))| d * l.activation.derivative(s, y))
                .collect();
            let input = &t.inputs[li];
            for o in 0..l.outputs {
                g.bias[li][o] = g.bias[li][o] + dz[o];
                let row = &mut g.weights[li][o * l.inputs..(o + 1) * l.inputs];
                for (gw, &x) in row.iter_mut().zip(input) {
                    *gw = *gw + dz[o] * x;
                }
            }
            if li > 0 {
                da = (0..l.inputs).map(|i| (0..l.outputs).map(|o| l.weights[o * l.inputs + i] * dz[o]).sum()).collect();
            }
        }
        loss
    }

    /// Mean softmax cross-entropy over the rows and its exact gradient, in
    /// inference mode.
    pub fn loss_and_gradients(&self, xs: &[Vec<T>], labels: &[usize]) -> Result<(T, Gradients<T>), LearnError> {
        self.check_batch(xs, labels)?;
        let mut g = Gradients::zeros(self);
        let mut loss = T::zero();
        for (x, &y) in xs.iter().zip(labels) {
            loss = loss + self.backprop(&self.trace(x, None), y, &mut g);
        }
        let inv = T::one() / T::of_usize(xs.len());
        g.scale(inv);
        Ok((loss * inv, g))
    }

    /// Mean cross-entropy in inference mode.
    pub fn loss(&self, xs: &[Vec<T>], labels: &[usize]) -> Result<T, LearnError> {
        self.check_batch(xs, labels)?;
        let mut total = T::zero();
        for (x, &y) in xs.iter().zip(labels) {
            let z = self.forward(x)?;
            let m = z.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + z.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            total = total + lse - z[y];
        }
        Ok(total / T::of_usize(xs.len()))
    }

    fn check_batch(&self, xs: &[Vec<T>], labels: &[usize]) -> Result<(), LearnError> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(LearnError::TooFewRows { rows: xs.len().min(labels.len()), needed: 1 });
        }
        if let Some(x) = xs.iter().find(|x| x.len() != self.input_dim()) {
            return Err(LearnError::DimensionMismatch { expected: self.input_dim(), got: x.len() });
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= self.output_dim()) {
            return Err(LearnError::ModelMismatch(format!("label {y} for {} outputs", self.output_dim())));
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> MlpModel<U> {
        let c = |v: &Vec<T>| v.iter().map(|x| U::of(x.as_f64())).collect();
        MlpModel {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    inputs: l.inputs,
                    outputs: l.outputs,
                    activation: l.activation.cast(),
                    weights: c(&l.weights),
                    bias: c(&l.bias),
                })
                .collect(),
            dropout_rate: U::of(self.dropout_rate.as_f64()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Topology<T> {
    pub hidden: usize,
    pub hidden_activation: Activation<T>,
    pub output_activation: Activation<T>,
}

impl<T: Scalar> Default for Topology<T> {
    fn default() -> Self {
        Topology { hidden: 16, hidden_activation: Activation::Tanh, output_activation: Activation::identity() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// `None` disables dropout entirely.
    pub dropout_rate: Option<f64>,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 300,
            batch_size: 16,
            dropout_rate: None,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<(), LearnError> {
        let bad = |s: String| Err(LearnError::InvalidHyperparams(s));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be finite and >= 0", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if let Some(r) = self.dropout_rate {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("dropout rate {r} outside [0, 1)"));
            }
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("split fraction {} outside (0, 1)", self.train_fraction));
        }
        Ok(())
    }
}

/// Runs minibatch gradient descent with momentum over already-scaled rows and
/// returns the mean training loss after every epoch.
pub fn fit<T: Scalar>(
    model: &mut MlpModel<T>,
    xs: &[Vec<T>],
    labels: &[usize],
    hyper: &Hyperparams,
) -> Result<Vec<T>, LearnError> {
    hyper.validate()?;
    model.validate()?;
    model.check_batch(xs, labels)?;
    if let Some(i) = model.layers.iter().position(|l| !l.activation.is_trainable()) {
        return Err(LearnError::UntrainableActivation { layer: i });
    }
    let rate = hyper.dropout_rate.map(T::of);
    model.dropout_rate = rate.unwrap_or_else(T::zero);
    let mut shuffle = stream_rng(hyper.seed, Stream::Shuffle);
    let mut drop_rng = stream_rng(hyper.seed, Stream::Dropout);
    let lr = T::of(hyper.learning_rate);
    let mu = T::of(hyper.momentum);
    let mut velocity = Gradients::zeros(model);
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut losses = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(hyper.batch_size) {
            let mut g = Gradients::zeros(model);
            for &i in batch {
                let t = model.trace(&xs[i], rate.map(|r| (r, &mut drop_rng)));
                model.backprop(&t, labels[i], &mut g);
            }
            g.scale(T::one() / T::of_usize(batch.len()));
            for (li, layer) in model.layers.iter_mut().enumerate() {
                let params = layer.weights.iter_mut().zip(velocity.weights[li].iter_mut().zip(&g.weights[li]));
                let biases = layer.bias.iter_mut().zip(velocity.bias[li].iter_mut().zip(&g.bias[li]));
                for (p, (v, &gr)) in params.chain(biases) {
                    *v = mu * *v - lr * gr;
                    *p = *p + *v;
                }
            }
        }
        losses.push(model.loss(xs, labels)?);
    }
    Ok(losses)
}
