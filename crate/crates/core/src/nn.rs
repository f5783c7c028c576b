//! Dense layers with exact manual backpropagation.
//!
//! A model part (bottom or top of a split model) is a plain slice of
//! [`DenseLayer`]s. [`forward`] returns the output together with a [`Tape`]
//! holding everything [`backward`] needs to apply the chain rule exactly.
//!
//! Weights are row-major with shape `(out_dim, in_dim)`.

use rand::distributions::{Distribution, Uniform};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `y`.
    #[inline]
    fn derivative(self, z: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Marks parameters that the optimizer must leave untouched.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrozenMask {
    pub weights: Vec<bool>,
    pub bias: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
    frozen: Option<FrozenMask>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dims must be > 0".into()));
        }
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit);
        let weights = (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect();
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias: vec![0.0; out_dim],
            activation,
            frozen: None,
        })
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dims must be > 0".into()));
        }
        if weights.len() != in_dim * out_dim {
            return Err(Error::Dimension {
                expected: in_dim * out_dim,
                actual: weights.len(),
            });
        }
        if bias.len() != out_dim {
            return Err(Error::Dimension {
                expected: out_dim,
                actual: bias.len(),
            });
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("layer parameters must be finite".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            activation,
            frozen: None,
        })
    }

    /// Square layer with the given diagonal. Off-diagonal weights and the
    /// bias are zero and frozen, so only the diagonal ever trains.
    pub fn diagonal(diag: &[f64], activation: Activation) -> Result<Self> {
        let d = diag.len();
        let mut weights = vec![0.0; d * d];
        let mut frozen_w = vec![true; d * d];
        for (i, &w) in diag.iter().enumerate() {
            weights[i * d + i] = w;
            frozen_w[i * d + i] = false;
        }
        let mut layer = Self::from_parts(d, d, weights, vec![0.0; d], activation)?;
        layer.frozen = Some(FrozenMask {
            weights: frozen_w,
            bias: vec![true; d],
        });
        Ok(layer)
    }

    pub fn with_frozen(mut self, mask: FrozenMask) -> Result<Self> {
        if mask.weights.len() != self.weights.len() || mask.bias.len() != self.bias.len() {
            return Err(Error::Config("frozen mask shape does not match layer".into()));
        }
        self.frozen = Some(mask);
        Ok(self)
    }

    /// Freezes every parameter of the layer.
    pub fn frozen_all(self) -> Self {
        let mask = FrozenMask {
            weights: vec![true; self.weights.len()],
            bias: vec![true; self.bias.len()],
        };
        Self {
            frozen: Some(mask),
            ..self
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn frozen(&self) -> Option<&FrozenMask> {
        self.frozen.as_ref()
    }

    /// Weight `(row, col)`, i.e. from input `col` to output `row`.
    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.in_dim + col]
    }

    fn pre_activation(&self, input: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.in_dim)
                .zip(&self.bias)
                .map(|(row, b)| b + dot(row, input)),
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    output: Vec<f64>,
}

/// Per-layer values cached by [`forward`] for the matching [`backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    caches: Vec<LayerCache>,
}

impl Tape {
    pub fn input(&self) -> &[f64] {
        &self.caches[0].input
    }

    pub fn output(&self) -> &[f64] {
        &self.caches[self.caches.len() - 1].output
    }
}

fn check_part(part: &[DenseLayer]) -> Result<()> {
    if part.is_empty() {
        return Err(Error::Config("model part has no layers".into()));
    }
    for pair in part.windows(2) {
        if pair[0].out_dim != pair[1].in_dim {
            return Err(Error::Dimension {
                expected: pair[0].out_dim,
                actual: pair[1].in_dim,
            });
        }
    }
    Ok(())
}

pub fn forward(part: &[DenseLayer], input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    check_part(part)?;
    if input.len() != part[0].in_dim {
        return Err(Error::Dimension {
            expected: part[0].in_dim,
            actual: input.len(),
        });
    }
    let mut caches = Vec::with_capacity(part.len());
    let mut current = input.to_vec();
    for layer in part {
        let mut pre = Vec::with_capacity(layer.out_dim);
        layer.pre_activation(&current, &mut pre);
        let output: Vec<f64> = pre.iter().map(|&z| layer.activation.apply(z)).collect();
        caches.push(LayerCache {
            input: std::mem::replace(&mut current, output.clone()),
            pre,
            output,
        });
    }
    Ok((current, Tape { caches }))
}

/// Forward pass without recording a tape.
pub fn predict(part: &[DenseLayer], input: &[f64]) -> Result<Vec<f64>> {
    check_part(part)?;
    if input.len() != part[0].in_dim {
        return Err(Error::Dimension {
            expected: part[0].in_dim,
            actual: input.len(),
        });
    }
    let mut current = input.to_vec();
    let mut pre = Vec::new();
    for layer in part {
        layer.pre_activation(&current, &mut pre);
        current.clear();
        current.extend(pre.iter().map(|&z| layer.activation.apply(z)));
    }
    Ok(current)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerGrads {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: vec![0.0; layer.weights.len()],
            bias: vec![0.0; layer.bias.len()],
        }
    }
}

pub fn zero_grads(part: &[DenseLayer]) -> Vec<LayerGrads> {
    part.iter().map(LayerGrads::zeros_like).collect()
}

pub fn backward(
    part: &[DenseLayer],
    tape: &Tape,
    grad_output: &[f64],
) -> Result<(Vec<LayerGrads>, Vec<f64>)> {
    let mut grads = zero_grads(part);
    let grad_input = backward_accumulate(part, tape, grad_output, &mut grads)?;
    Ok((grads, grad_input))
}

/// Like [`backward`], but adds the parameter gradients into `grads`.
pub fn backward_accumulate(
    part: &[DenseLayer],
    tape: &Tape,
    grad_output: &[f64],
    grads: &mut [LayerGrads],
) -> Result<Vec<f64>> {
    if tape.caches.len() != part.len() || grads.len() != part.len() {
        return Err(Error::Usage("tape does not belong to this model part".into()));
    }
    for ((layer, cache), g) in part.iter().zip(&tape.caches).zip(grads.iter()) {
        if cache.input.len() != layer.in_dim
            || cache.pre.len() != layer.out_dim
            || g.weights.len() != layer.weights.len()
        {
            return Err(Error::Usage("tape does not belong to this model part".into()));
        }
    }
    let last = &part[part.len() - 1];
    if grad_output.len() != last.out_dim {
        return Err(Error::Dimension {
            expected: last.out_dim,
            actual: grad_output.len(),
        });
    }

    let mut upstream = grad_output.to_vec();
    for ((layer, cache), g) in part.iter().zip(&tape.caches).zip(grads.iter_mut()).rev() {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(cache.pre.iter().zip(&cache.output))
            .map(|(&u, (&z, &y))| u * layer.activation.derivative(z, y))
            .collect();
        let mut grad_input = vec![0.0; layer.in_dim];
        for ((&dz, row), (gw, gb)) in delta
            .iter()
            .zip(layer.weights.chunks_exact(layer.in_dim))
            .zip(g.weights.chunks_exact_mut(layer.in_dim).zip(g.bias.iter_mut()))
        {
            if dz == 0.0 {
                continue;
            }
            *gb += dz;
            for (w, &x) in gw.iter_mut().zip(&cache.input) {
                *w += dz * x;
            }
            for (gi, &w) in grad_input.iter_mut().zip(row) {
                *gi += dz * w;
            }
        }
        upstream = grad_input;
    }
    Ok(upstream)
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, and its gradient
/// `softmax(logits) - one_hot(label)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Config(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("non-finite logits".into()));
    }
    let (argmax, &max) = logits
        .iter()
        .enumerate()
        .fold((0, &f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best });
    // log-sum-exp as max + ln(1 + rest) keeps precision for near-certain predictions
    let rest: f64 = logits
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != argmax)
        .map(|(_, &z)| (z - max).exp())
        .sum();
    let loss = (max - logits[label]) + rest.ln_1p();
    let mut grad = softmax(logits);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Sum of squared errors and its gradient with respect to `output`.
pub fn squared_error(output: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if output.len() != target.len() {
        return Err(Error::Dimension {
            expected: target.len(),
            actual: output.len(),
        });
    }
    let loss = output.iter().zip(target).map(|(y, t)| (y - t) * (y - t)).sum();
    let grad = output.iter().zip(target).map(|(y, t)| 2.0 * (y - t)).collect();
    Ok((loss, grad))
}

/// Loss computed by the label owner on the top model output.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    SoftmaxCrossEntropy,
    /// Squared error against a fixed target vector per class; prediction is
    /// the class with the nearest target.
    SquaredError { targets: Vec<Vec<f64>> },
}

impl Loss {
    pub fn evaluate(&self, output: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
        match self {
            Loss::SoftmaxCrossEntropy => softmax_cross_entropy(output, label),
            Loss::SquaredError { targets } => {
                let target = targets.get(label).ok_or_else(|| {
                    Error::Config(format!("label {label} has no squared-error target"))
                })?;
                squared_error(output, target)
            }
        }
    }

    pub fn predict(&self, output: &[f64]) -> usize {
        match self {
            Loss::SoftmaxCrossEntropy => argmax(output),
            Loss::SquaredError { targets } => {
                let dists: Vec<f64> = targets
                    .iter()
                    .map(|t| -t.iter().zip(output).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                    .collect();
                argmax(&dists)
            }
        }
    }
}

/// Index of the first maximum.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = momentum * v + grad + weight_decay * p`, `p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<LayerGrads>,
}

impl Sgd {
    pub fn new(part: &[DenseLayer], lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {lr}")));
        }
        if !(momentum >= 0.0 && weight_decay >= 0.0) {
            return Err(Error::Config("momentum and weight decay must be >= 0".into()));
        }
        Ok(Self {
            lr,
            momentum,
            weight_decay,
            velocity: zero_grads(part),
        })
    }

    /// Applies one update. On a non-finite result the parameters are left
    /// partially updated and training is expected to stop.
    pub fn step(&mut self, part: &mut [DenseLayer], grads: &[LayerGrads]) -> Result<()> {
        if grads.len() != part.len() || self.velocity.len() != part.len() {
            return Err(Error::Usage("gradient list does not match model part".into()));
        }
        let (lr, momentum, wd) = (self.lr, self.momentum, self.weight_decay);
        let mut finite = true;
        for ((layer, g), v) in part.iter_mut().zip(grads).zip(&mut self.velocity) {
            if g.weights.len() != layer.weights.len() || g.bias.len() != layer.bias.len() {
                return Err(Error::Usage("gradient shape does not match layer".into()));
            }
            let (fw, fb) = match &layer.frozen {
                Some(mask) => (Some(&mask.weights[..]), Some(&mask.bias[..])),
                None => (None, None),
            };
            finite &= update(&mut layer.weights, &g.weights, &mut v.weights, fw, lr, momentum, wd);
            finite &= update(&mut layer.bias, &g.bias, &mut v.bias, fb, lr, momentum, wd);
        }
        if finite {
            Ok(())
        } else {
            Err(Error::Numeric("non-finite parameter after SGD step".into()))
        }
    }
}

fn update(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    frozen: Option<&[bool]>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> bool {
    let mut finite = true;
    for (i, ((p, &g), v)) in params.iter_mut().zip(grads).zip(velocity.iter_mut()).enumerate() {
        if frozen.is_some_and(|f| f[i]) {
            continue;
        }
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
        finite &= p.is_finite();
    }
    finite
}

/// Builds a layer stack through the given widths. Hidden layers use
/// `hidden`; the last layer uses `last`.
pub fn build_stack<R: Rng + ?Sized>(
    widths: &[usize],
    hidden: Activation,
    last: Activation,
    rng: &mut R,
) -> Result<Vec<DenseLayer>> {
    if widths.len() < 2 {
        return Err(Error::Config("a stack needs at least two widths".into()));
    }
    let n = widths.len() - 1;
    (0..n)
        .map(|i| {
            let act = if i + 1 == n { last } else { hidden };
            DenseLayer::xavier(widths[i], widths[i + 1], act, rng)
        })
        .collect()
}

/// Bottom and top halves of a model split at the cut layer.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitModel {
    pub bottom: Vec<DenseLayer>,
    pub top: Vec<DenseLayer>,
}

impl SplitModel {
    pub fn new(bottom: Vec<DenseLayer>, top: Vec<DenseLayer>) -> Result<Self> {
        check_part(&bottom)?;
        check_part(&top)?;
        let cut = bottom[bottom.len() - 1].out_dim;
        if cut != top[0].in_dim {
            return Err(Error::Dimension {
                expected: cut,
                actual: top[0].in_dim,
            });
        }
        Ok(Self { bottom, top })
    }

    pub fn cut_dim(&self) -> usize {
        self.bottom[self.bottom.len() - 1].out_dim
    }

    pub fn input_dim(&self) -> usize {
        self.bottom[0].in_dim
    }

    pub fn n_outputs(&self) -> usize {
        self.top[self.top.len() - 1].out_dim
    }
}

/// Feature vectors with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::Config(format!(
                "batch needs equal, non-zero numbers of inputs and labels ({} vs {})",
                inputs.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Config(format!("label {bad} >= {n_classes} classes")));
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}
