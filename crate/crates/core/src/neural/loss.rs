use crate::error::{Error, Result};
use crate::oracle::GROUP_COUNT;

/// Per-class loss weights. The default weighs group 0 at 200 and every
/// other group at 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights(Vec<f64>);

impl Default for ClassWeights {
    fn default() -> Self {
        ClassWeights::group0(200.0)
    }
}

impl ClassWeights {
    pub fn group0(weight: f64) -> Self {
        let mut w = vec![1.0; GROUP_COUNT];
        w[0] = weight;
        ClassWeights(w)
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    pub fn from_vec(w: Vec<f64>) -> Result<Self> {
        if w.iter().any(|x| !x.is_finite() || *x <= 0.0) {
            return Err(Error::Config("class weights must be positive and finite".into()));
        }
        Ok(ClassWeights(w))
    }

    pub fn get(&self, class: usize) -> f64 {
        self.0[class]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], class: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits[class] - lse
}

/// Weighted mean cross-entropy `Σ w_y ℓ / Σ w_y` and its gradient with
/// respect to each sample's logits.
pub fn weighted_cross_entropy(
    logits: &[Vec<f64>],
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if logits.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if logits.len() != labels.len() {
        return Err(Error::Dimension {
            expected: logits.len(),
            got: labels.len(),
        });
    }
    let classes = weights.len();
    let mut total_weight = 0.0;
    for (z, &y) in logits.iter().zip(labels) {
        if z.len() != classes {
            return Err(Error::Dimension {
                expected: classes,
                got: z.len(),
            });
        }
        if y >= classes {
            return Err(Error::LabelOutOfRange { label: y, classes });
        }
        total_weight += weights.get(y);
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let w = weights.get(y);
        loss -= w * log_softmax_at(z, y);
        let mut dz = softmax(z);
        dz[y] -= 1.0;
        let scale = w / total_weight;
        dz.iter_mut().for_each(|g| *g *= scale);
        grads.push(dz);
    }
    Ok((loss / total_weight, grads))
}
