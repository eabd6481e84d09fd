//! Dense two-layer classifier with hand-written backpropagation.
//!
//! Weights are `f64`, stored row-major as `[outputs × inputs]`. Inputs are
//! anything implementing [`InputRow`]; CO-VV bit vectors feed the network
//! directly without being materialized as floats.

mod adam;
mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covv::CovvVector;
use crate::error::{Error, Result};
use crate::oracle::GROUP_COUNT;

pub use adam::{Adam, AdamConfig};
pub use loss::{softmax, weighted_cross_entropy, ClassWeights};

pub const HIDDEN_LAYER_SIZE: usize = 30;
pub const CLASSES_COUNT: usize = GROUP_COUNT;

/// An input vector as seen by the first layer.
pub trait InputRow {
    fn width(&self) -> usize;

    /// Calls `f(column, value)` for every non-zero entry in ascending column
    /// order.
    fn for_each_nonzero<F: FnMut(usize, f64)>(&self, f: F);
}

impl InputRow for [f64] {
    fn width(&self) -> usize {
        self.len()
    }

    fn for_each_nonzero<F: FnMut(usize, f64)>(&self, mut f: F) {
        for (j, &x) in self.iter().enumerate() {
            if x != 0.0 {
                f(j, x);
            }
        }
    }
}

impl InputRow for Vec<f64> {
    fn width(&self) -> usize {
        self.len()
    }

    fn for_each_nonzero<F: FnMut(usize, f64)>(&self, f: F) {
        self.as_slice().for_each_nonzero(f)
    }
}

impl InputRow for CovvVector {
    fn width(&self) -> usize {
        self.len()
    }

    fn for_each_nonzero<F: FnMut(usize, f64)>(&self, mut f: F) {
        for j in self.ones() {
            f(j, 1.0);
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Identity,
    Relu,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// Row-major `[outputs × inputs]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    /// Frozen layers are skipped by the optimizer.
    pub frozen: bool,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            frozen: false,
        }
    }

    /// Uniform in `±1/sqrt(inputs)`, zero bias.
    pub fn uniform(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        DenseLayer {
            weights,
            ..DenseLayer::zeros(inputs, outputs)
        }
    }

    pub fn from_parts(inputs: usize, outputs: usize, weights: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if weights.len() != inputs * outputs {
            return Err(Error::Dimension {
                expected: inputs * outputs,
                got: weights.len(),
            });
        }
        if bias.len() != outputs {
            return Err(Error::Dimension {
                expected: outputs,
                got: bias.len(),
            });
        }
        Ok(DenseLayer {
            inputs,
            outputs,
            weights,
            bias,
            frozen: false,
        })
    }

    pub fn weight(&self, out: usize, input: usize) -> f64 {
        self.weights[out * self.inputs + input]
    }

    fn forward_sparse<R: InputRow + ?Sized>(&self, x: &R, out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        let n = self.inputs;
        x.for_each_nonzero(|j, v| {
            for (o, acc) in out.iter_mut().enumerate() {
                *acc += self.weights[o * n + j] * v;
            }
        });
    }

    fn forward_dense(&self, x: &[f64], out: &mut [f64]) {
        for (o, acc) in out.iter_mut().enumerate() {
            let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
            *acc = self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Appends `extra` zero columns on the right of every weight row.
    fn pad_inputs(&mut self, extra: usize) {
        if extra == 0 {
            return;
        }
        let old = self.inputs;
        let new = old + extra;
        let mut weights = vec![0.0; new * self.outputs];
        for o in 0..self.outputs {
            weights[o * new..o * new + old].copy_from_slice(&self.weights[o * old..(o + 1) * old]);
        }
        self.weights = weights;
        self.inputs = new;
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Intermediates kept from the forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Parameter gradients, shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    /// Column count of `w1`.
    pub inputs: usize,
}

impl Gradients {
    pub fn zeros_like(model: &TwoLayerClassifier) -> Self {
        Gradients {
            w1: vec![0.0; model.layer1.weights.len()],
            b1: vec![0.0; model.layer1.bias.len()],
            w2: vec![0.0; model.layer2.weights.len()],
            b2: vec![0.0; model.layer2.bias.len()],
            inputs: model.layer1.inputs,
        }
    }

    /// Scales column `j` of the first-layer weight gradient by `m[j]`.
    /// The first-layer bias gradient is left alone.
    pub fn apply_column_multipliers(&mut self, m: &GradientMultipliers) -> Result<()> {
        if m.len() != self.inputs {
            return Err(Error::Dimension {
                expected: self.inputs,
                got: m.len(),
            });
        }
        for row in self.w1.chunks_mut(self.inputs) {
            for (g, s) in row.iter_mut().zip(&m.0) {
                *g *= s;
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|&g| g == 0.0)
    }
}

/// Per-input-column factors applied to the first-layer weight gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMultipliers(Vec<f64>);

impl GradientMultipliers {
    /// `[rate] × pretrained ++ [1.0] × new`.
    pub fn transfer(pretrained: usize, new: usize, rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!(
                "pretrained gradient rate must lie in [0, 1], got {rate}"
            )));
        }
        let mut v = vec![rate; pretrained];
        v.resize(pretrained + new, 1.0);
        Ok(GradientMultipliers(v))
    }

    pub fn uniform(len: usize) -> Self {
        GradientMultipliers(vec![1.0; len])
    }

    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        if let Some(bad) = v.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Config(format!("gradient multiplier {bad} outside [0, 1]")));
        }
        Ok(GradientMultipliers(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `features → hidden → classes` dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerClassifier {
    pub layer1: DenseLayer,
    pub layer2: DenseLayer,
    pub activation: Activation,
}

impl TwoLayerClassifier {
    /// Seeded `features_count → 30 → 26` model.
    pub fn new(features_count: usize, seed: u64, activation: Activation) -> Result<Self> {
        Self::with_dims(features_count, HIDDEN_LAYER_SIZE, CLASSES_COUNT, seed, activation)
    }

    pub fn with_dims(
        features: usize,
        hidden: usize,
        classes: usize,
        seed: u64,
        activation: Activation,
    ) -> Result<Self> {
        if features == 0 {
            return Err(Error::Config("features_count must be at least 1".into()));
        }
        if hidden == 0 || classes == 0 {
            return Err(Error::Config("hidden and class counts must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer1 = DenseLayer::uniform(features, hidden, &mut rng);
        let layer2 = DenseLayer::uniform(hidden, classes, &mut rng);
        Ok(TwoLayerClassifier {
            layer1,
            layer2,
            activation,
        })
    }

    pub fn from_layers(layer1: DenseLayer, layer2: DenseLayer, activation: Activation) -> Result<Self> {
        if layer1.outputs != layer2.inputs {
            return Err(Error::Dimension {
                expected: layer1.outputs,
                got: layer2.inputs,
            });
        }
        Ok(TwoLayerClassifier {
            layer1,
            layer2,
            activation,
        })
    }

    pub fn features_count(&self) -> usize {
        self.layer1.inputs
    }

    pub fn hidden_size(&self) -> usize {
        self.layer1.outputs
    }

    pub fn classes(&self) -> usize {
        self.layer2.outputs
    }

    pub fn is_finite(&self) -> bool {
        self.layer1.is_finite() && self.layer2.is_finite()
    }

    fn check_width<R: InputRow + ?Sized>(&self, x: &R) -> Result<()> {
        if x.width() != self.features_count() {
            return Err(Error::Dimension {
                expected: self.features_count(),
                got: x.width(),
            });
        }
        Ok(())
    }

    pub fn forward_cached<R: InputRow + ?Sized>(&self, x: &R) -> Result<ForwardCache> {
        self.check_width(x)?;
        let mut hidden_pre = vec![0.0; self.hidden_size()];
        self.layer1.forward_sparse(x, &mut hidden_pre);
        let hidden: Vec<f64> = hidden_pre.iter().map(|&h| self.activation.apply(h)).collect();
        let mut logits = vec![0.0; self.classes()];
        self.layer2.forward_dense(&hidden, &mut logits);
        Ok(ForwardCache {
            hidden_pre,
            hidden,
            logits,
        })
    }

    /// `W2 · act(W1 · x + b1) + b2`.
    pub fn forward<R: InputRow + ?Sized>(&self, x: &R) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.logits)
    }

    /// Index of the largest logit; ties go to the lowest index.
    pub fn predict<R: InputRow + ?Sized>(&self, x: &R) -> Result<usize> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Accumulates analytic gradients for a batch, given `dLoss/dLogits` per
    /// sample. Freezing is not consulted here.
    pub fn backward<R: InputRow>(
        &self,
        inputs: &[&R],
        caches: &[ForwardCache],
        dlogits: &[Vec<f64>],
    ) -> Result<Gradients> {
        if inputs.len() != caches.len() || inputs.len() != dlogits.len() {
            return Err(Error::Dimension {
                expected: inputs.len(),
                got: caches.len().min(dlogits.len()),
            });
        }
        let mut g = Gradients::zeros_like(self);
        let hidden = self.hidden_size();
        let n_in = self.features_count();
        let mut dh = vec![0.0; hidden];
        for ((x, cache), dz) in inputs.iter().zip(caches).zip(dlogits) {
            self.check_width(*x)?;
            dh.iter_mut().for_each(|v| *v = 0.0);
            for (k, &dzk) in dz.iter().enumerate() {
                g.b2[k] += dzk;
                let row = &self.layer2.weights[k * hidden..(k + 1) * hidden];
                for h in 0..hidden {
                    g.w2[k * hidden + h] += dzk * cache.hidden[h];
                    dh[h] += row[h] * dzk;
                }
            }
            for ((d, &pre), b) in dh.iter_mut().zip(&cache.hidden_pre).zip(&mut g.b1) {
                *d *= self.activation.derivative(pre);
                *b += *d;
            }
            x.for_each_nonzero(|j, v| {
                for (h, &d) in dh.iter().enumerate() {
                    g.w1[h * n_in + j] += d * v;
                }
            });
        }
        Ok(g)
    }

    /// Weighted cross-entropy loss and its parameter gradients for a batch.
    pub fn loss_and_gradients<R: InputRow>(
        &self,
        inputs: &[&R],
        labels: &[usize],
        weights: &ClassWeights,
    ) -> Result<(f64, Gradients)> {
        let caches = inputs
            .iter()
            .map(|x| self.forward_cached(*x))
            .collect::<Result<Vec<_>>>()?;
        let logits: Vec<Vec<f64>> = caches.iter().map(|c| c.logits.clone()).collect();
        let (loss, dlogits) = weighted_cross_entropy(&logits, labels, weights)?;
        let grads = self.backward(inputs, &caches, &dlogits)?;
        Ok((loss, grads))
    }

    /// Parameter tensors in optimizer order: `w1, b1, w2, b2`.
    pub fn parameters_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.layer1.weights,
            &mut self.layer1.bias,
            &mut self.layer2.weights,
            &mut self.layer2.bias,
        ]
    }

    pub fn frozen_flags(&self) -> [bool; 4] {
        [
            self.layer1.frozen,
            self.layer1.frozen,
            self.layer2.frozen,
            self.layer2.frozen,
        ]
    }

    /// One optimizer update; frozen layers are left untouched.
    pub fn apply_gradients(&mut self, adam: &mut Adam, grads: &Gradients) -> Result<()> {
        let frozen = self.frozen_flags();
        let g: [&[f64]; 4] = [&grads.w1, &grads.b1, &grads.w2, &grads.b2];
        adam.step(&mut self.parameters_mut(), &g, &frozen)
    }

    /// Zero-pads the first layer to `new_features` inputs. Hidden width and
    /// the second layer are untouched, so logits for old inputs padded with
    /// zeros are unchanged bit for bit.
    pub fn extend_inputs(&mut self, new_features: usize) -> Result<()> {
        let current = self.features_count();
        if new_features < current {
            return Err(Error::Shrink {
                current,
                requested: new_features,
            });
        }
        self.layer1.pad_inputs(new_features - current);
        Ok(())
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
