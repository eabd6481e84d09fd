//! End-to-end continuous-training run over a trace.
//!
//! The trace is replayed in time order. Whenever the feature registry grows
//! during a timestamp and tasks have arrived since the previous step, a
//! retraining step fires: the current window plus the previous
//! `history_windows` windows are relabeled against the current inventory,
//! split, and handed to every configured arm. A last step flushes the window
//! left over at the end of the trace.

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::covv::{FeatureRegistry, TaskConstraintSet};
use crate::error::{Error, Result};
use crate::evalkit::{split, write_reports_csv, SplitConfig, SplitData, StepReport, MIN_SPLIT_ROWS};
use crate::exec::{self, Execution};
use crate::growing::{train_full, train_growing, GrowingModel, TrainConfig, TrainMode, TrainOutcome};
use crate::oracle::{GroupingConfig, NodeInventory};
use crate::schedsim::SchedulerConfig;
use crate::trace::{
    build_snapshot, generate_events, read_trace_file, DatasetSnapshot, EventBody, SyntheticTraceConfig, TraceEvent,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Growing,
    FullyRetrain,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Growing => "growing",
            Arm::FullyRetrain => "fully_retrain",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "growing" => Ok(Arm::Growing),
            "fully_retrain" | "full" => Ok(Arm::FullyRetrain),
            other => Err(Error::Config(format!("unknown arm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Replay this JSONL trace instead of generating one.
    pub trace_path: Option<PathBuf>,
    pub arms: Vec<Arm>,
    /// Previous windows added to each step's snapshot.
    pub history_windows: usize,
    /// A step adding more features than this is logged as bulk growth.
    pub bulk_growth_limit: usize,
    /// Extend and train the growing arm in sub-steps of at most
    /// `bulk_growth_limit` features.
    pub split_bulk_steps: bool,
    pub execution: Execution,
    pub trace: SyntheticTraceConfig,
    pub grouping: GroupingConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    pub scheduler: SchedulerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            trace_path: None,
            arms: vec![Arm::Growing, Arm::FullyRetrain],
            history_windows: 3,
            bulk_growth_limit: 40,
            split_bulk_steps: false,
            execution: Execution::default(),
            trace: SyntheticTraceConfig::desk_scale(7),
            grouping: GroupingConfig { increment: 20 },
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            scheduler: SchedulerConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale defaults with every seed derived from `seed`.
    pub fn with_seed(seed: u64) -> Self {
        RunConfig {
            seed,
            trace: SyntheticTraceConfig::desk_scale(seed),
            ..RunConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.bulk_growth_limit == 0 {
            return Err(Error::Config("bulk_growth_limit must be at least 1".into()));
        }
        if self.arms.is_empty() {
            return Err(Error::Config("at least one arm is required".into()));
        }
        if self.trace_path.is_none() {
            self.trace.validate()?;
        }
        self.grouping.validate()?;
        self.train.validate()?;
        self.split.validate()?;
        self.scheduler.validate()
    }

    /// SHA-256 over the canonical JSON form of the configuration.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn load_events(&self) -> Result<Vec<TraceEvent>> {
        match &self.trace_path {
            Some(p) => read_trace_file(p),
            None => generate_events(&self.trace),
        }
    }
}

/// SplitMix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub const REPORT_CSV: &str = "step_reports.csv";
pub const REPORT_JSON: &str = "step_reports.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub steps: usize,
    pub total_epochs: u64,
    pub failed_steps: usize,
    /// Unweighted mean over steps.
    pub mean_accuracy: f64,
    /// Mean over steps whose test set contains group 0.
    pub mean_group0_f1: Option<f64>,
    pub accuracy_pass_rate: f64,
    /// Over steps whose test set contains group 0; `None` if there are none.
    pub group0_f1_pass_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config_hash: String,
    pub events: usize,
    pub final_features_count: usize,
    pub steps: usize,
    pub skipped_steps: usize,
    /// Relative to the output directory.
    pub report_paths: Vec<String>,
    pub summaries: Vec<ArmSummary>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub reports: Vec<StepReport>,
    pub models: Vec<(Arm, GrowingModel)>,
    pub manifest: Manifest,
    pub last_snapshot: Option<DatasetSnapshot>,
}

impl RunOutput {
    pub fn reports_for(&self, arm: Arm) -> impl Iterator<Item = &StepReport> {
        self.reports.iter().filter(move |r| r.model == arm.name())
    }

    pub fn summary(&self, arm: Arm) -> Option<&ArmSummary> {
        self.manifest.summaries.iter().find(|s| s.arm == arm)
    }

    /// Writes `step_reports.csv`, `step_reports.json`, `manifest.json`,
    /// `config.toml`, `models/<arm>.json` and `last_snapshot.json`.
    pub fn write(&self, cfg: &RunConfig, out_dir: &Path) -> Result<()> {
        let models = out_dir.join("models");
        std::fs::create_dir_all(&models).map_err(|e| Error::file(&models, e))?;
        let csv_path = out_dir.join(REPORT_CSV);
        let f = std::fs::File::create(&csv_path).map_err(|e| Error::file(&csv_path, e))?;
        write_reports_csv(&self.reports, std::io::BufWriter::new(f))?;
        write_text(
            &out_dir.join(REPORT_JSON),
            &serde_json::to_string_pretty(&self.reports)?,
        )?;
        write_text(
            &out_dir.join("manifest.json"),
            &serde_json::to_string_pretty(&self.manifest)?,
        )?;
        write_text(&out_dir.join("config.toml"), &cfg.to_toml_string()?)?;
        for (arm, m) in &self.models {
            m.save(&models.join(format!("{}.json", arm.name())))?;
        }
        if let Some(s) = &self.last_snapshot {
            s.save(&out_dir.join("last_snapshot.json"))?;
        }
        Ok(())
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

struct ArmState {
    arm: Arm,
    model: Option<GrowingModel>,
}

fn train_arm(
    state: &mut ArmState,
    split: &SplitData,
    train: &TrainConfig,
    bulk_limit: Option<usize>,
    exec: Execution,
) -> Result<TrainOutcome> {
    let features = split.train.features_count;
    match (state.arm, state.model.as_mut()) {
        (Arm::Growing, Some(model)) => {
            let mut total: Option<TrainOutcome> = None;
            loop {
                let pretrained = model.features_count();
                let target = match bulk_limit {
                    Some(limit) => features.min(pretrained + limit),
                    None => features,
                };
                model.extend_input_layer(target, split.train.step_time)?;
                let part = if target == features {
                    train_growing(model, pretrained, split, train, exec)?
                } else {
                    let view = SplitData {
                        train: split.train.truncated(target),
                        test: split.test.truncated(target),
                        stratified: split.stratified,
                    };
                    train_growing(model, pretrained, &view, train, exec)?
                };
                total = Some(match total {
                    None => part,
                    Some(t) => TrainOutcome {
                        epochs_used: t.epochs_used + part.epochs_used,
                        attempts_used: t.attempts_used + part.attempts_used,
                        wall_time: t.wall_time + part.wall_time,
                        ..part
                    },
                });
                if target == features {
                    return Ok(total.expect("at least one sub-step"));
                }
            }
        }
        _ => {
            let (model, outcome) = train_full(features, split, train, exec)?;
            state.model = Some(model);
            Ok(outcome)
        }
    }
}

fn report(arm: Arm, split: &SplitData, o: &TrainOutcome) -> StepReport {
    StepReport {
        step_time: split.train.step_time,
        features_count: split.train.features_count,
        model: arm.name().to_string(),
        epochs: o.epochs_used,
        attempts: o.attempts_used,
        accuracy: o.accuracy,
        group0_f1: o.group0_f1,
        stratified: split.stratified,
        mode: o.mode.name().to_string(),
    }
}

struct Replay<'a> {
    cfg: &'a RunConfig,
    registry: FeatureRegistry,
    inventory: NodeInventory,
    window: Vec<TaskConstraintSet>,
    history: VecDeque<Vec<TaskConstraintSet>>,
    last_step_features: usize,
    step_index: u64,
    skipped: usize,
    arms: Vec<ArmState>,
    reports: Vec<StepReport>,
    last_snapshot: Option<DatasetSnapshot>,
}

impl Replay<'_> {
    fn step(&mut self, time: u64) -> Result<()> {
        let mut tasks: Vec<TaskConstraintSet> = self.history.iter().flatten().cloned().collect();
        tasks.extend(self.window.iter().cloned());
        let window = std::mem::take(&mut self.window);
        self.history.push_back(window);
        while self.history.len() > self.cfg.history_windows {
            self.history.pop_front();
        }

        let exec = self.cfg.execution;
        let build = build_snapshot(
            &tasks,
            &mut self.registry,
            &self.inventory,
            &self.cfg.grouping,
            time,
            exec,
        );
        let features = self.registry.len();
        let added = features - self.last_step_features;
        if self.last_step_features > 0 && added > self.cfg.bulk_growth_limit {
            log::warn!("step at t={time}: bulk growth of {added} features");
        }
        if build.snapshot.len() < MIN_SPLIT_ROWS {
            log::warn!("step at t={time}: only {} labeled rows, skipping", build.snapshot.len());
            self.skipped += 1;
            return Ok(());
        }
        self.step_index += 1;
        let split_cfg = SplitConfig {
            seed: mix_seed(self.cfg.seed, 2 * self.step_index),
            ..self.cfg.split
        };
        let data = split(&build.snapshot, &split_cfg)?;
        let train = TrainConfig {
            seed: mix_seed(self.cfg.seed, 2 * self.step_index + 1),
            ..self.cfg.train
        };
        let bulk = self.cfg.split_bulk_steps.then_some(self.cfg.bulk_growth_limit);
        let outcomes = match self.arms.as_mut_slice() {
            [a, b] => {
                let (ra, rb) = exec::join(
                    exec,
                    || train_arm(a, &data, &train, bulk, exec),
                    || train_arm(b, &data, &train, bulk, exec),
                );
                vec![ra?, rb?]
            }
            arms => arms
                .iter_mut()
                .map(|a| train_arm(a, &data, &train, bulk, exec))
                .collect::<Result<Vec<_>>>()?,
        };
        for (a, o) in self.arms.iter().zip(&outcomes) {
            log::info!(
                "t={time} features={features} {}: {} after {} epoch(s), {} attempt(s), acc {:.4} ({:?})",
                a.arm.name(),
                o.mode.name(),
                o.epochs_used,
                o.attempts_used,
                o.accuracy,
                o.wall_time
            );
            self.reports.push(report(a.arm, &data, o));
        }
        self.last_step_features = features;
        self.last_snapshot = Some(build.snapshot);
        Ok(())
    }
}

fn summarize(arm: Arm, reports: &[StepReport], cfg: &TrainConfig) -> ArmSummary {
    let mine: Vec<&StepReport> = reports.iter().filter(|r| r.model == arm.name()).collect();
    let steps = mine.len();
    let acc_pass = mine.iter().filter(|r| r.accuracy > cfg.accepted_accuracy).count();
    let with_g0: Vec<f64> = mine.iter().filter_map(|r| r.group0_f1).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let accuracies: Vec<f64> = mine.iter().map(|r| r.accuracy).collect();
    let g0_pass = with_g0.iter().filter(|&&f| f > cfg.accepted_group0_f1).count();
    ArmSummary {
        arm,
        steps,
        total_epochs: mine.iter().map(|r| u64::from(r.epochs)).sum(),
        failed_steps: mine.iter().filter(|r| r.mode == TrainMode::Failed.name()).count(),
        mean_accuracy: mean(&accuracies).unwrap_or(0.0),
        mean_group0_f1: mean(&with_g0),
        accuracy_pass_rate: if steps == 0 {
            0.0
        } else {
            acc_pass as f64 / steps as f64
        },
        group0_f1_pass_rate: (!with_g0.is_empty()).then(|| g0_pass as f64 / with_g0.len() as f64),
    }
}

/// Replays `events` and trains every arm at every step.
pub fn run_events(cfg: &RunConfig, events: &[TraceEvent]) -> Result<RunOutput> {
    cfg.validate()?;
    let mut arms: Vec<Arm> = cfg.arms.clone();
    arms.sort();
    arms.dedup();
    let mut r = Replay {
        cfg,
        registry: FeatureRegistry::new(),
        inventory: NodeInventory::new(),
        window: Vec::new(),
        history: VecDeque::new(),
        last_step_features: 0,
        step_index: 0,
        skipped: 0,
        arms: arms.iter().map(|&arm| ArmState { arm, model: None }).collect(),
        reports: Vec::new(),
        last_snapshot: None,
    };

    let mut i = 0;
    while i < events.len() {
        let time = events[i].time;
        let before = r.registry.len();
        while i < events.len() && events[i].time == time {
            match &events[i].body {
                EventBody::Machine { node, attribute, value } => {
                    r.inventory
                        .apply_machine_event(&mut r.registry, *node, attribute, value.as_ref())
                }
                EventBody::Task { task, .. } => {
                    r.registry.register_task(task);
                    r.window.push(task.clone());
                }
            }
            i += 1;
        }
        if r.registry.len() > before && !r.window.is_empty() {
            r.step(time)?;
        }
    }
    if !r.window.is_empty() {
        let end = events.last().map_or(0, |e| e.time);
        r.step(end)?;
    }

    let summaries = arms.iter().map(|&a| summarize(a, &r.reports, &cfg.train)).collect();
    let manifest = Manifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: cfg.hash()?,
        events: events.len(),
        final_features_count: r.registry.len(),
        steps: r.step_index as usize,
        skipped_steps: r.skipped,
        report_paths: vec![REPORT_CSV.to_string(), REPORT_JSON.to_string()],
        summaries,
    };
    Ok(RunOutput {
        reports: r.reports,
        models: r.arms.into_iter().filter_map(|a| a.model.map(|m| (a.arm, m))).collect(),
        manifest,
        last_snapshot: r.last_snapshot,
    })
}

pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let events = cfg.load_events()?;
    run_events(cfg, &events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::GrowthInjection;

    fn small(seed: u64) -> RunConfig {
        let mut cfg = RunConfig::with_seed(seed);
        cfg.trace.node_count = 40;
        cfg.trace.task_count = 1200;
        cfg.trace.span_us = 1_200_000_000;
        cfg.trace.template_count = 20;
        cfg.trace.growth_schedule = (1..=3)
            .map(|g| GrowthInjection {
                time: g * 300_000_000,
                count: 1,
            })
            .collect();
        cfg.grouping = GroupingConfig { increment: 5 };
        cfg.train.epochs_limit = 20;
        cfg.train.max_attempts = 2;
        cfg
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let cfg = small(3);
        let text = cfg.to_toml_string().unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
        assert_ne!(RunConfig::with_seed(4).hash().unwrap(), cfg.hash().unwrap());
        assert!(RunConfig::from_toml_str("bogus = 1").is_err());
        let partial = RunConfig::from_toml_str("seed = 9\n[train]\nepochs_limit = 5\n").unwrap();
        assert_eq!(partial.train.epochs_limit, 5);
        assert_eq!(partial.train.lr, 0.05);
    }

    #[test]
    fn steps_fire_on_growth_plus_final_flush() {
        let cfg = small(3);
        let out = run(&cfg).unwrap();
        // three injections and the final flush
        assert_eq!(out.manifest.steps + out.manifest.skipped_steps, 4);
        assert_eq!(out.reports.len(), 2 * out.manifest.steps);
        let growing: Vec<_> = out.reports_for(Arm::Growing).collect();
        assert!(growing.windows(2).all(|w| w[0].features_count <= w[1].features_count));
        assert_eq!(out.models.len(), 2);
    }

    #[test]
    fn execution_policy_does_not_change_results() {
        let mut cfg = small(5);
        cfg.execution = Execution::Sequential;
        let a = run(&cfg).unwrap();
        cfg.execution = Execution::Parallel;
        let b = run(&cfg).unwrap();
        assert_eq!(a.reports, b.reports);
    }

    #[test]
    fn bulk_steps_split_into_sub_steps() {
        let mut cfg = small(3);
        cfg.arms = vec![Arm::Growing];
        cfg.bulk_growth_limit = 1;
        cfg.split_bulk_steps = true;
        let out = run(&cfg).unwrap();
        let model = &out.models[0].1;
        assert!(model.extension_history.iter().all(|e| e.new_count - e.old_count <= 1));
        assert_eq!(out.reports.len(), out.manifest.steps);
    }

    #[test]
    fn zero_growth_gives_one_step() {
        let mut cfg = small(2);
        cfg.trace.growth_schedule.clear();
        let out = run(&cfg).unwrap();
        assert_eq!(out.manifest.steps, 1);
    }

    #[test]
    fn seeds_mix() {
        assert_ne!(mix_seed(1, 0), mix_seed(1, 1));
        assert_ne!(mix_seed(1, 0), mix_seed(2, 0));
        assert_eq!(mix_seed(1, 5), mix_seed(1, 5));
    }
}
