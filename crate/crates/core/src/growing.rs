//! Input-layer growth, transfer training with the epoch-0 gate, and the
//! fully-retrained baseline.
//!
//! A [`GrowingModel`] wraps a [`TwoLayerClassifier`] together with its seed
//! and extension history and persists as versioned JSON (see
//! `docs/model_format.md`). Optimizer state is never persisted.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covv::CovvVector;
use crate::error::{Error, Result};
use crate::evalkit::{evaluate, Metrics, SplitData};
use crate::exec::Execution;
use crate::neural::{Activation, Adam, AdamConfig, ClassWeights, DenseLayer, GradientMultipliers, TwoLayerClassifier};
use crate::trace::DatasetSnapshot;

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Extension {
    pub step_time: u64,
    pub old_count: usize,
    pub new_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowingModel {
    pub classifier: TwoLayerClassifier,
    pub seed: u64,
    pub extension_history: Vec<Extension>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerState {
    /// Row-major `[outputs × inputs]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelState {
    format_version: u32,
    features_count: usize,
    hidden: usize,
    classes: usize,
    activation: Activation,
    layer1: LayerState,
    layer2: LayerState,
    seed: u64,
    extension_history: Vec<Extension>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl GrowingModel {
    pub fn new(features_count: usize, seed: u64, activation: Activation) -> Result<Self> {
        Ok(GrowingModel {
            classifier: TwoLayerClassifier::new(features_count, seed, activation)?,
            seed,
            extension_history: Vec::new(),
        })
    }

    pub fn features_count(&self) -> usize {
        self.classifier.features_count()
    }

    /// Zero-pads the input layer; equal counts are a no-op.
    pub fn extend_input_layer(&mut self, new_count: usize, step_time: u64) -> Result<()> {
        let old_count = self.features_count();
        if new_count == old_count {
            return Ok(());
        }
        self.classifier.extend_inputs(new_count)?;
        self.extension_history.push(Extension {
            step_time,
            old_count,
            new_count,
        });
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let c = &self.classifier;
        let state = ModelState {
            format_version: MODEL_FORMAT_VERSION,
            features_count: c.features_count(),
            hidden: c.hidden_size(),
            classes: c.classes(),
            activation: c.activation,
            layer1: LayerState {
                weights: c.layer1.weights.clone(),
                bias: c.layer1.bias.clone(),
            },
            layer2: LayerState {
                weights: c.layer2.weights.clone(),
                bias: c.layer2.bias.clone(),
            },
            seed: self.seed,
            extension_history: self.extension_history.clone(),
        };
        Ok(serde_json::to_string_pretty(&state)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: probe.format_version,
                expected: MODEL_FORMAT_VERSION,
            });
        }
        let s: ModelState = serde_json::from_str(text)?;
        let shape = |what: &str, e: Error| Error::ModelState(format!("{what}: {e}"));
        let layer1 = DenseLayer::from_parts(s.features_count, s.hidden, s.layer1.weights, s.layer1.bias)
            .map_err(|e| shape("layer1", e))?;
        let layer2 = DenseLayer::from_parts(s.hidden, s.classes, s.layer2.weights, s.layer2.bias)
            .map_err(|e| shape("layer2", e))?;
        if s.features_count == 0 {
            return Err(Error::ModelState("features_count must be positive".into()));
        }
        let classifier = TwoLayerClassifier::from_layers(layer1, layer2, s.activation)?;
        if !classifier.is_finite() {
            return Err(Error::ModelState("non-finite parameter".into()));
        }
        let mut last = None;
        for e in &s.extension_history {
            if e.new_count <= e.old_count || last.is_some_and(|l| e.old_count < l) || e.new_count > s.features_count {
                return Err(Error::ModelState("extension history is not monotone".into()));
            }
            last = Some(e.new_count);
        }
        Ok(GrowingModel {
            classifier,
            seed: s.seed,
            extension_history: s.extension_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub group0_weight: f64,
    pub pretrained_gradient_rate: f64,
    pub epochs_limit: u32,
    pub accepted_accuracy: f64,
    pub accepted_group0_f1: f64,
    pub max_attempts: u32,
    pub batch_size: usize,
    pub freeze_layer2_on_transfer: bool,
    pub seed: u64,
    pub activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            group0_weight: 200.0,
            pretrained_gradient_rate: 0.1,
            epochs_limit: 100,
            accepted_accuracy: 0.95,
            accepted_group0_f1: 0.9,
            max_attempts: 10,
            batch_size: 64,
            freeze_layer2_on_transfer: true,
            seed: 0,
            activation: Activation::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.group0_weight > 0.0 && self.group0_weight.is_finite()) {
            return bad("group0_weight must be positive");
        }
        if !(0.0..=1.0).contains(&self.pretrained_gradient_rate) {
            return bad("pretrained_gradient_rate must lie in [0, 1]");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    pub fn accepts(&self, m: &Metrics) -> bool {
        m.accuracy > self.accepted_accuracy && m.group0_f1().is_none_or(|f| f > self.accepted_group0_f1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// The extended model met the gate.
    Grown,
    /// A fresh initialization met the gate.
    FullyRetrained,
    /// No attempt met the gate.
    Failed,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Grown => "grown",
            TrainMode::FullyRetrained => "fully_retrained",
            TrainMode::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub mode: TrainMode,
    /// Epochs summed over every attempt.
    pub epochs_used: u32,
    pub attempts_used: u32,
    pub accuracy: f64,
    pub group0_f1: Option<f64>,
    pub wall_time: Duration,
}

struct AttemptResult {
    epochs: u32,
    metrics: Metrics,
    accepted: bool,
}

/// How one training attempt treats the parameters.
pub struct AttemptPlan<'a> {
    pub multipliers: &'a GradientMultipliers,
    pub freeze_layer2: bool,
    pub shuffle_seed: u64,
}

/// Gate check on the test set, then up to `epochs_limit` epochs of minibatch
/// Adam with a gate check after each epoch. Returns the epochs run.
fn run_attempt(
    model: &mut TwoLayerClassifier,
    split: &SplitData,
    cfg: &TrainConfig,
    plan: &AttemptPlan<'_>,
    exec: Execution,
) -> Result<AttemptResult> {
    let metrics = evaluate(model, &split.test, exec)?;
    if cfg.accepts(&metrics) {
        return Ok(AttemptResult {
            epochs: 0,
            metrics,
            accepted: true,
        });
    }
    let prev_frozen = model.layer2.frozen;
    model.layer2.frozen = plan.freeze_layer2;
    let mut adam = Adam::new(cfg.adam());
    let weights = ClassWeights::group0(cfg.group0_weight);
    let mut result = AttemptResult {
        epochs: 0,
        metrics,
        accepted: false,
    };
    for epoch in 1..=cfg.epochs_limit {
        train_epoch(model, &split.train, &mut adam, &weights, plan, cfg.batch_size, epoch)?;
        result.epochs = epoch;
        result.metrics = evaluate(model, &split.test, exec)?;
        if cfg.accepts(&result.metrics) {
            result.accepted = true;
            break;
        }
    }
    model.layer2.frozen = prev_frozen;
    Ok(result)
}

/// One shuffled pass over the training rows.
pub fn train_epoch(
    model: &mut TwoLayerClassifier,
    train: &DatasetSnapshot,
    adam: &mut Adam,
    weights: &ClassWeights,
    plan: &AttemptPlan<'_>,
    batch_size: usize,
    epoch: u32,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("no training rows"));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(plan.shuffle_seed ^ u64::from(epoch).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    for batch in order.chunks(batch_size) {
        let rows: Vec<&CovvVector> = batch.iter().map(|&i| &train.rows[i]).collect();
        let labels: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
        let (_, mut grads) = model.loss_and_gradients(&rows, &labels, weights)?;
        grads.apply_column_multipliers(plan.multipliers)?;
        model.apply_gradients(adam, &grads)?;
    }
    if !model.is_finite() {
        return Err(Error::ModelState("training produced a non-finite parameter".into()));
    }
    Ok(())
}

fn check_split(split: &SplitData, features: usize) -> Result<()> {
    if split.train.is_empty() || split.test.is_empty() {
        return Err(Error::EmptyDataset("train and test sets must be non-empty"));
    }
    for s in [&split.train, &split.test] {
        if s.features_count != features {
            return Err(Error::Dimension {
                expected: features,
                got: s.features_count,
            });
        }
    }
    Ok(())
}

/// Fresh-initialization attempts with seeds `base_seed + k`, `k` in
/// `first..cfg.max_attempts`.
fn fresh_attempts(
    features: usize,
    split: &SplitData,
    cfg: &TrainConfig,
    base_seed: u64,
    first: u32,
    exec: Execution,
    outcome: &mut TrainOutcome,
) -> Result<Option<TwoLayerClassifier>> {
    let unit = GradientMultipliers::uniform(features);
    let mut last = None;
    for k in first..cfg.max_attempts {
        let seed = base_seed.wrapping_add(u64::from(k));
        let mut fresh = TwoLayerClassifier::new(features, seed, cfg.activation)?;
        let plan = AttemptPlan {
            multipliers: &unit,
            freeze_layer2: false,
            shuffle_seed: seed,
        };
        let r = run_attempt(&mut fresh, split, cfg, &plan, exec)?;
        outcome.epochs_used += r.epochs;
        outcome.attempts_used += 1;
        outcome.accuracy = r.metrics.accuracy;
        outcome.group0_f1 = r.metrics.group0_f1();
        if r.accepted {
            outcome.mode = TrainMode::FullyRetrained;
            return Ok(Some(fresh));
        }
        last = Some(fresh);
    }
    Ok(last)
}

/// Transfer-trains an already extended model. The first attempt keeps the
/// pretrained weights, scales gradients of the first `pretrained_features`
/// input columns by the pretrained rate and freezes the second layer. If it
/// misses the gate, later attempts start from fresh initializations with
/// every parameter trainable. On failure the model holds the last attempt.
pub fn train_growing(
    model: &mut GrowingModel,
    pretrained_features: usize,
    split: &SplitData,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let features = model.features_count();
    check_split(split, features)?;
    if pretrained_features > features {
        return Err(Error::Shrink {
            current: features,
            requested: pretrained_features,
        });
    }
    let start = Instant::now();
    let multipliers = GradientMultipliers::transfer(
        pretrained_features,
        features - pretrained_features,
        cfg.pretrained_gradient_rate,
    )?;
    let plan = AttemptPlan {
        multipliers: &multipliers,
        freeze_layer2: cfg.freeze_layer2_on_transfer,
        shuffle_seed: cfg.seed,
    };
    let r = run_attempt(&mut model.classifier, split, cfg, &plan, exec)?;
    let mut outcome = TrainOutcome {
        mode: if r.accepted {
            TrainMode::Grown
        } else {
            TrainMode::Failed
        },
        epochs_used: r.epochs,
        attempts_used: 1,
        accuracy: r.metrics.accuracy,
        group0_f1: r.metrics.group0_f1(),
        wall_time: Duration::ZERO,
    };
    if !r.accepted {
        if let Some(c) = fresh_attempts(features, split, cfg, cfg.seed, 1, exec, &mut outcome)? {
            model.classifier = c;
        }
    }
    outcome.wall_time = start.elapsed();
    Ok(outcome)
}

/// Trains from scratch with up to `max_attempts` fresh initializations.
pub fn train_full(
    features: usize,
    split: &SplitData,
    cfg: &TrainConfig,
    exec: Execution,
) -> Result<(GrowingModel, TrainOutcome)> {
    cfg.validate()?;
    check_split(split, features)?;
    let start = Instant::now();
    let mut outcome = TrainOutcome {
        mode: TrainMode::Failed,
        epochs_used: 0,
        attempts_used: 0,
        accuracy: 0.0,
        group0_f1: None,
        wall_time: Duration::ZERO,
    };
    let classifier =
        fresh_attempts(features, split, cfg, cfg.seed, 0, exec, &mut outcome)?.expect("max_attempts is at least 1");
    outcome.wall_time = start.elapsed();
    let model = GrowingModel {
        classifier,
        seed: cfg.seed.wrapping_add(u64::from(outcome.attempts_used - 1)),
        extension_history: Vec::new(),
    };
    Ok((model, outcome))
}
