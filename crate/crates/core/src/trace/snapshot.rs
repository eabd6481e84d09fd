use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::covv::{align, encode_task_frozen, CovvVector, FeatureRegistry, TaskConstraintSet};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::oracle::{count_suitable, group_label, GroupingConfig, NodeInventory, GROUP_COUNT};

/// Encoded, labeled rows for one retraining step. Every row has
/// `features_count` columns; unschedulable tasks are never present.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetSnapshot {
    pub rows: Vec<CovvVector>,
    pub labels: Vec<usize>,
    pub task_ids: Vec<u64>,
    pub features_count: usize,
    pub step_time: u64,
}

impl DatasetSnapshot {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> DatasetSnapshot {
        DatasetSnapshot {
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            task_ids: indices.iter().map(|&i| self.task_ids[i]).collect(),
            features_count: self.features_count,
            step_time: self.step_time,
        }
    }

    /// The same rows restricted to the first `features` columns, i.e. the
    /// view an older, smaller registry would have produced.
    pub fn truncated(&self, features: usize) -> DatasetSnapshot {
        let features = features.min(self.features_count);
        DatasetSnapshot {
            rows: self.rows.iter().map(|r| r.truncated(features)).collect(),
            features_count: features,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let file = SnapshotFile {
            features_count: self.features_count,
            step_time: self.step_time,
            rows: (0..self.len())
                .map(|i| RowRecord {
                    task_id: self.task_ids[i],
                    label: self.labels[i],
                    ones: self.rows[i].ones().collect(),
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: SnapshotFile = serde_json::from_str(text)?;
        let mut snap = DatasetSnapshot {
            features_count: file.features_count,
            step_time: file.step_time,
            ..Default::default()
        };
        for r in file.rows {
            if r.label >= GROUP_COUNT {
                return Err(Error::LabelOutOfRange {
                    label: r.label,
                    classes: GROUP_COUNT,
                });
            }
            let mut v = CovvVector::zeros(file.features_count);
            for j in r.ones {
                if j >= file.features_count {
                    return Err(Error::Dimension {
                        expected: file.features_count,
                        got: j + 1,
                    });
                }
                v.set(j);
            }
            snap.rows.push(v);
            snap.labels.push(r.label);
            snap.task_ids.push(r.task_id);
        }
        Ok(snap)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::file(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn class_counts(&self) -> [usize; GROUP_COUNT] {
        let mut counts = [0; GROUP_COUNT];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// On-disk form: set-bit positions per row.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SnapshotFile {
    features_count: usize,
    step_time: u64,
    rows: Vec<RowRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowRecord {
    task_id: u64,
    label: usize,
    ones: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SnapshotBuild {
    pub snapshot: DatasetSnapshot,
    /// Tasks with zero suitable nodes, excluded from the snapshot.
    pub dropped_unschedulable: usize,
}

/// Encodes and labels `tasks` against the current registry and inventory.
///
/// Operands are registered first (a no-op when the replay already did so),
/// after which encoding and oracle labeling run against a frozen view.
pub fn build_snapshot(
    tasks: &[TaskConstraintSet],
    registry: &mut FeatureRegistry,
    inventory: &NodeInventory,
    grouping: &GroupingConfig,
    step_time: u64,
    exec: Execution,
) -> SnapshotBuild {
    for t in tasks {
        registry.register_task(t);
    }
    let registry: &FeatureRegistry = registry;
    let labeled = exec::map(exec, tasks, |t| {
        let label = group_label(count_suitable(inventory, t), grouping).group()?;
        let row = align(&encode_task_frozen(t, registry), registry).expect("encoded at registry length");
        Some((row, label, t.task_id))
    });
    let mut snapshot = DatasetSnapshot {
        features_count: registry.len(),
        step_time,
        ..Default::default()
    };
    let mut dropped = 0;
    for item in labeled {
        match item {
            Some((row, label, id)) => {
                snapshot.rows.push(row);
                snapshot.labels.push(label);
                snapshot.task_ids.push(id);
            }
            None => dropped += 1,
        }
    }
    if dropped > 0 {
        log::warn!("step at t={step_time}: dropped {dropped} unschedulable task(s)");
    }
    SnapshotBuild {
        snapshot,
        dropped_unschedulable: dropped,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covv::{AttributeKey, Constraint};
    use crate::oracle::NodeId;

    fn cluster() -> (NodeInventory, FeatureRegistry) {
        let mut inv = NodeInventory::new();
        let mut reg = FeatureRegistry::new();
        let am = AttributeKey::new("AM").unwrap();
        let host = AttributeKey::new("host").unwrap();
        for n in 0..30u64 {
            inv.apply_machine_event(&mut reg, NodeId(n), &am, Some(&(n % 10).to_string().into()));
            inv.apply_machine_event(&mut reg, NodeId(n), &host, Some(&format!("h{n}").into()));
        }
        (inv, reg)
    }

    #[test]
    fn empty_window() {
        let (inv, mut reg) = cluster();
        let b = build_snapshot(
            &[],
            &mut reg,
            &inv,
            &GroupingConfig::default(),
            5,
            Execution::Sequential,
        );
        assert!(b.snapshot.is_empty());
        assert_eq!(b.snapshot.features_count, reg.len());
    }

    #[test]
    fn unconstrained_window() {
        let (inv, mut reg) = cluster();
        let tasks: Vec<_> = (0..5).map(TaskConstraintSet::unconstrained).collect();
        let g = GroupingConfig::new(4).unwrap();
        let b = build_snapshot(&tasks, &mut reg, &inv, &g, 0, Execution::Parallel);
        assert!(b.snapshot.rows.iter().all(|r| r.count_ones() == 0));
        // ceil(30 / 4) = 8
        assert!(b.snapshot.labels.iter().all(|&l| l == 8));
    }

    #[test]
    fn single_node_task_and_drops() {
        let (inv, mut reg) = cluster();
        let tasks = vec![
            TaskConstraintSet::new(1, vec![Constraint::parse("host", "EQ", &["h7"]).unwrap()]),
            TaskConstraintSet::new(2, vec![Constraint::parse("AM", "GT", &["50"]).unwrap()]),
            TaskConstraintSet::unconstrained(3),
        ];
        let before = reg.len();
        let b = build_snapshot(
            &tasks,
            &mut reg,
            &inv,
            &GroupingConfig::default(),
            0,
            Execution::Sequential,
        );
        // "50" is an operand-only value and gains a column
        assert_eq!(reg.len(), before + 1);
        assert_eq!(b.dropped_unschedulable, 1);
        assert_eq!(b.snapshot.labels, vec![0, 1]);
        assert_eq!(b.snapshot.task_ids, vec![1, 3]);
        assert!(b.snapshot.rows.iter().all(|r| r.len() == reg.len()));
    }

    #[test]
    fn json_round_trip() {
        let (inv, mut reg) = cluster();
        let tasks = vec![
            TaskConstraintSet::new(1, vec![Constraint::parse("AM", "LT", &["4"]).unwrap()]),
            TaskConstraintSet::unconstrained(2),
        ];
        let b = build_snapshot(
            &tasks,
            &mut reg,
            &inv,
            &GroupingConfig::new(3).unwrap(),
            9,
            Execution::Sequential,
        );
        let back = DatasetSnapshot::from_json(&b.snapshot.to_json().unwrap()).unwrap();
        assert_eq!(back, b.snapshot);
        assert!(DatasetSnapshot::from_json(
            r#"{"features_count":2,"step_time":0,"rows":[{"task_id":1,"label":0,"ones":[2]}]}"#
        )
        .is_err());
    }
}
