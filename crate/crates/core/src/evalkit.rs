//! Train/test splitting, classification metrics and per-step reports.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::neural::TwoLayerClassifier;
use crate::oracle::GROUP_COUNT;
use crate::trace::DatasetSnapshot;

/// Fewest rows a snapshot needs before it can be split.
pub const MIN_SPLIT_ROWS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test_fraction: 0.25,
            stratified: true,
            seed: 0,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.test_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SplitData {
    pub train: DatasetSnapshot,
    pub test: DatasetSnapshot,
    /// False when stratification was requested but some class had a single
    /// sample, so a plain random split was used instead.
    pub stratified: bool,
}

/// Seeded split into disjoint train and test subsets, both non-empty.
pub fn split(data: &DatasetSnapshot, cfg: &SplitConfig) -> Result<SplitData> {
    cfg.validate()?;
    let n = data.len();
    if n < MIN_SPLIT_ROWS {
        return Err(Error::EmptyDataset("too few rows to split"));
    }
    let n_test = ((n as f64 * cfg.test_fraction).ceil() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let counts = data.class_counts();
    let can_stratify = counts.iter().all(|&c| c == 0 || c >= 2);

    let mut test_idx = Vec::with_capacity(n_test);
    let stratified = cfg.stratified && can_stratify;
    if stratified {
        let quotas = stratified_quotas(&counts, n, n_test);
        let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); GROUP_COUNT];
        for (i, &l) in data.labels.iter().enumerate() {
            by_class[l].push(i);
        }
        for (members, quota) in by_class.iter_mut().zip(quotas) {
            members.shuffle(&mut rng);
            test_idx.extend_from_slice(&members[..quota]);
        }
    } else {
        if cfg.stratified {
            log::warn!("a class has a single sample; using a plain random split");
        }
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        test_idx.extend_from_slice(&all[..n_test]);
    }
    test_idx.sort_unstable();
    let mut in_test = vec![false; n];
    test_idx.iter().for_each(|&i| in_test[i] = true);
    let train_idx: Vec<usize> = (0..n).filter(|&i| !in_test[i]).collect();
    Ok(SplitData {
        train: data.subset(&train_idx),
        test: data.subset(&test_idx),
        stratified,
    })
}

/// Per-class test counts: proportional floor, largest remainders, then
/// clamped so every present class lands on both sides.
fn stratified_quotas(counts: &[usize; GROUP_COUNT], n: usize, n_test: usize) -> [usize; GROUP_COUNT] {
    let mut quotas = [0usize; GROUP_COUNT];
    let mut remainders = Vec::new();
    for (c, &nc) in counts.iter().enumerate() {
        if nc == 0 {
            continue;
        }
        let exact = nc * n_test;
        quotas[c] = exact / n;
        remainders.push((exact % n, c));
    }
    let assigned: usize = quotas.iter().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, c) in remainders.iter().take(n_test - assigned) {
        quotas[c] += 1;
    }
    for (c, &nc) in counts.iter().enumerate() {
        if nc > 0 {
            quotas[c] = quotas[c].clamp(1, nc - 1);
        }
    }
    quotas
}

/// Confusion-matrix based metrics over the 26 groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub support: Vec<u64>,
    /// `None` when nothing was predicted as that class.
    pub precision: Vec<Option<f64>>,
    /// `None` when the class has no support.
    pub recall: Vec<Option<f64>>,
    /// `None` when the class has no support.
    pub f1: Vec<Option<f64>>,
    /// Mean F1 over classes with support.
    pub macro_f1: f64,
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], classes: usize) -> Result<Metrics> {
        if truth.is_empty() {
            return Err(Error::EmptyDataset("no samples to evaluate"));
        }
        if truth.len() != predicted.len() {
            return Err(Error::Dimension {
                expected: truth.len(),
                got: predicted.len(),
            });
        }
        let mut confusion = vec![vec![0u64; classes]; classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= classes || p >= classes {
                return Err(Error::LabelOutOfRange {
                    label: t.max(p),
                    classes,
                });
            }
            confusion[t][p] += 1;
        }
        let correct: u64 = (0..classes).map(|k| confusion[k][k]).sum();
        let support: Vec<u64> = confusion.iter().map(|row| row.iter().sum()).collect();
        let predicted_count: Vec<u64> = (0..classes).map(|k| confusion.iter().map(|row| row[k]).sum()).collect();
        let mut precision = Vec::with_capacity(classes);
        let mut recall = Vec::with_capacity(classes);
        let mut f1 = Vec::with_capacity(classes);
        for k in 0..classes {
            let tp = confusion[k][k] as f64;
            let p = (predicted_count[k] > 0).then(|| tp / predicted_count[k] as f64);
            let r = (support[k] > 0).then(|| tp / support[k] as f64);
            let f = r.map(|r| {
                let p = p.unwrap_or(0.0);
                if p + r == 0.0 {
                    0.0
                } else {
                    2.0 * p * r / (p + r)
                }
            });
            precision.push(p);
            recall.push(r);
            f1.push(f);
        }
        let present: Vec<f64> = f1.iter().flatten().copied().collect();
        let macro_f1 = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Metrics {
            accuracy: correct as f64 / truth.len() as f64,
            confusion,
            support,
            precision,
            recall,
            f1,
            macro_f1,
        })
    }

    pub fn group0_f1(&self) -> Option<f64> {
        self.f1[0]
    }
}

pub fn predict_all(model: &TwoLayerClassifier, data: &DatasetSnapshot, exec: Execution) -> Result<Vec<usize>> {
    exec::map(exec, &data.rows, |r| model.predict(r)).into_iter().collect()
}

pub fn evaluate(model: &TwoLayerClassifier, data: &DatasetSnapshot, exec: Execution) -> Result<Metrics> {
    let predicted = predict_all(model, data, exec)?;
    Metrics::from_predictions(&data.labels, &predicted, model.classes())
}

/// One row of the per-step training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step_time: u64,
    pub features_count: usize,
    /// `"growing"` or `"fully_retrain"`.
    pub model: String,
    pub epochs: u32,
    pub attempts: u32,
    pub accuracy: f64,
    /// Empty in CSV and `null` in JSON when the test set has no group 0.
    pub group0_f1: Option<f64>,
    pub stratified: bool,
    /// `grown`, `fully_retrained` or `failed`.
    pub mode: String,
}

pub fn write_reports_csv<W: Write>(reports: &[StepReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in reports {
        w.serialize(r)?;
    }
    if reports.is_empty() {
        w.write_record([
            "step_time",
            "features_count",
            "model",
            "epochs",
            "attempts",
            "accuracy",
            "group0_f1",
            "stratified",
            "mode",
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_reports_csv<R: std::io::Read>(input: R) -> Result<Vec<StepReport>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covv::CovvVector;

    fn snapshot(labels: &[usize]) -> DatasetSnapshot {
        DatasetSnapshot {
            rows: labels.iter().map(|_| CovvVector::zeros(3)).collect(),
            labels: labels.to_vec(),
            task_ids: (0..labels.len() as u64).collect(),
            features_count: 3,
            step_time: 0,
        }
    }

    #[test]
    fn stratified_split_keeps_every_class_on_both_sides() {
        let mut labels = vec![0; 3];
        labels.extend(vec![1; 40]);
        labels.extend(vec![5; 17]);
        let s = split(&snapshot(&labels), &SplitConfig::default()).unwrap();
        assert!(s.stratified);
        assert_eq!(s.train.len() + s.test.len(), 60);
        assert_eq!(s.test.len(), 15);
        for c in [0, 1, 5] {
            assert!(s.train.class_counts()[c] >= 1);
            assert!(s.test.class_counts()[c] >= 1);
        }
        let mut ids: Vec<u64> = s.train.task_ids.iter().chain(&s.test.task_ids).copied().collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..60).collect::<Vec<_>>());
    }

    #[test]
    fn singleton_class_falls_back() {
        let mut labels = vec![1; 10];
        labels.push(0);
        let s = split(&snapshot(&labels), &SplitConfig::default()).unwrap();
        assert!(!s.stratified);
        assert_eq!(s.test.len(), 3);
        assert!(split(&snapshot(&[1, 1, 1]), &SplitConfig::default()).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        let a = split(&snapshot(&labels), &SplitConfig::default()).unwrap();
        let b = split(&snapshot(&labels), &SplitConfig::default()).unwrap();
        assert_eq!(a.test.task_ids, b.test.task_ids);
        let c = split(
            &snapshot(&labels),
            &SplitConfig {
                seed: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.test.task_ids, c.test.task_ids);
    }

    #[test]
    fn hand_computed_metrics() {
        // truth 0 0 1 1 1 2, predicted 0 1 1 1 0 1
        let m = Metrics::from_predictions(&[0, 0, 1, 1, 1, 2], &[0, 1, 1, 1, 0, 1], 4).unwrap();
        assert!((m.accuracy - 0.5).abs() < 1e-12);
        assert_eq!(m.support, vec![2, 3, 1, 0]);
        // class 0: p = 1/2, r = 1/2
        assert!((m.f1[0].unwrap() - 0.5).abs() < 1e-12);
        // class 1: p = 2/4, r = 2/3 -> f1 = 4/7
        assert!((m.f1[1].unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert_eq!(m.precision[2], None);
        assert_eq!(m.f1[2], Some(0.0));
        assert_eq!(m.f1[3], None);
        assert!((m.macro_f1 - (0.5 + 4.0 / 7.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn csv_round_trip_with_missing_f1() {
        let reports = vec![
            StepReport {
                step_time: 10,
                features_count: 42,
                model: "growing".into(),
                epochs: 3,
                attempts: 1,
                accuracy: 0.97,
                group0_f1: None,
                stratified: true,
                mode: "grown".into(),
            },
            StepReport {
                step_time: 20,
                features_count: 50,
                model: "fully_retrain".into(),
                epochs: 7,
                attempts: 2,
                accuracy: 0.5,
                group0_f1: Some(0.25),
                stratified: false,
                mode: "failed".into(),
            },
        ];
        let mut buf = Vec::new();
        write_reports_csv(&reports, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step_time,features_count,model,epochs,attempts,accuracy,group0_f1,stratified,mode\n"));
        assert!(text.contains("10,42,growing,3,1,0.97,,true,grown"));
        assert_eq!(read_reports_csv(buf.as_slice()).unwrap(), reports);
    }
}
