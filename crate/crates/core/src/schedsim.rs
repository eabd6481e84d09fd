//! Discrete-time scheduling simulator.
//!
//! Nodes expose a fixed number of slots. Each tick applies machine events and
//! arrivals, releases finished tasks, then dispatches up to `dispatch_rate`
//! queue heads onto the lowest-id suitable node with a free slot. Under
//! [`Policy::CoAnalyzer`] tasks classified at or below the priority threshold
//! enter a high-priority queue that is always served first. Dispatch is
//! strict head-of-line: a head whose suitable nodes are all busy ends the
//! tick.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::covv::{align, encode_task_frozen, FeatureRegistry, TaskConstraintSet};
use crate::error::{Error, Result};
use crate::neural::TwoLayerClassifier;
use crate::oracle::{count_suitable, group_label, node_satisfies, GroupingConfig, NodeId, NodeInventory, GROUP_COUNT};
use crate::trace::{EventBody, TraceEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Fifo,
    CoAnalyzer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub policy: Policy,
    /// Groups `<=` this go to the high-priority queue.
    pub priority_threshold: usize,
    pub slots_per_node: u32,
    /// Dispatches per tick.
    pub dispatch_rate: u32,
    /// Tick length in microseconds.
    pub tick_us: u64,
    /// Ticks between a classifier update becoming ready and taking effect.
    pub retrain_delay_ticks: u64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            policy: Policy::CoAnalyzer,
            priority_threshold: 0,
            slots_per_node: 4,
            dispatch_rate: 8,
            tick_us: 1_000_000,
            retrain_delay_ticks: 0,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.slots_per_node == 0 || self.dispatch_rate == 0 || self.tick_us == 0 {
            return Err(Error::Config(
                "slots_per_node, dispatch_rate and tick_us must be positive".into(),
            ));
        }
        if self.priority_threshold >= GROUP_COUNT {
            return Err(Error::Config(format!("priority_threshold must be below {GROUP_COUNT}")));
        }
        Ok(())
    }
}

/// Predicts a task's group at arrival time.
pub trait TaskClassifier {
    fn classify(
        &self,
        task: &TaskConstraintSet,
        inventory: &NodeInventory,
        registry: &FeatureRegistry,
    ) -> Result<usize>;
}

/// Ground-truth classifier backed by the brute-force count.
pub struct OracleClassifier {
    pub grouping: GroupingConfig,
}

impl TaskClassifier for OracleClassifier {
    fn classify(&self, task: &TaskConstraintSet, inv: &NodeInventory, _: &FeatureRegistry) -> Result<usize> {
        // unschedulable tasks never reach a queue, so any group will do
        Ok(group_label(count_suitable(inv, task), &self.grouping)
            .group()
            .unwrap_or(0))
    }
}

pub struct ModelClassifier<'a> {
    model: &'a TwoLayerClassifier,
}

impl<'a> ModelClassifier<'a> {
    /// The model's input width must equal the registry length.
    pub fn new(model: &'a TwoLayerClassifier, registry: &FeatureRegistry) -> Result<Self> {
        if model.features_count() != registry.len() {
            return Err(Error::ClassifierMismatch {
                model: model.features_count(),
                registry: registry.len(),
            });
        }
        Ok(ModelClassifier { model })
    }
}

impl TaskClassifier for ModelClassifier<'_> {
    fn classify(&self, task: &TaskConstraintSet, _: &NodeInventory, registry: &FeatureRegistry) -> Result<usize> {
        let row = align(&encode_task_frozen(task, registry), registry)?;
        self.model.predict(&row)
    }
}

/// Registry with every machine value and task operand of the trace, in
/// trace order.
pub fn replay_registry(events: &[TraceEvent]) -> FeatureRegistry {
    let mut registry = FeatureRegistry::new();
    let mut inventory = NodeInventory::new();
    for e in events {
        match &e.body {
            EventBody::Machine { node, attribute, value } => {
                inventory.apply_machine_event(&mut registry, *node, attribute, value.as_ref())
            }
            EventBody::Task { task, .. } => registry.register_task(task),
        }
    }
    registry
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub count: usize,
    /// Seconds from arrival to dispatch.
    pub mean: Option<f64>,
    pub median: Option<f64>,
    pub p95: Option<f64>,
}

impl LatencyStats {
    pub fn from_samples(mut samples: Vec<f64>) -> Self {
        if samples.is_empty() {
            return LatencyStats::default();
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len();
        let nearest_rank = |q: f64| samples[((q * n as f64).ceil() as usize).clamp(1, n) - 1];
        LatencyStats {
            count: n,
            mean: Some(samples.iter().sum::<f64>() / n as f64),
            median: Some(nearest_rank(0.5)),
            p95: Some(nearest_rank(0.95)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupLatency {
    pub group: usize,
    #[serde(flatten)]
    pub stats: LatencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub tick: u64,
    pub high: usize,
    pub normal: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySample {
    pub task_id: u64,
    pub true_group: usize,
    /// `None` when no classifier was consulted.
    pub predicted_group: Option<usize>,
    pub submit_tick: u64,
    pub placement_tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: Policy,
    pub submitted: usize,
    pub placed: usize,
    /// Tasks with no suitable node when they reached a queue head.
    pub unplaced: usize,
    /// Tasks whose predicted group differs from the oracle group.
    pub misclassified: usize,
    pub overall: LatencyStats,
    /// Latency by oracle group, for groups with at least one placed task.
    pub per_group: Vec<GroupLatency>,
    pub final_tick: u64,
    /// Queue lengths, recorded whenever they change.
    pub queue_trace: Vec<QueueSample>,
    /// One per placed task, in dispatch order.
    pub samples: Vec<LatencySample>,
}

impl SimResult {
    pub fn group(&self, g: usize) -> Option<&LatencyStats> {
        self.per_group.iter().find(|x| x.group == g).map(|x| &x.stats)
    }
}

struct Pending {
    task: TaskConstraintSet,
    arrival: u64,
    duration_ticks: u64,
    true_group: usize,
    predicted: Option<usize>,
}

/// A classifier that becomes available at `ready_tick`.
#[derive(Clone, Copy)]
pub struct ClassifierSnapshot<'a> {
    pub ready_tick: u64,
    pub classifier: &'a dyn TaskClassifier,
}

/// Writes the queue-length trace as `tick,high,normal` rows.
pub fn write_queue_trace_csv<W: std::io::Write>(trace: &[QueueSample], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tick", "high", "normal"])?;
    for q in trace {
        w.write_record([q.tick.to_string(), q.high.to_string(), q.normal.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

enum HeadOutcome {
    Placed(NodeId),
    Blocked,
    Unplaceable,
}

fn try_place(task: &TaskConstraintSet, inv: &NodeInventory, free: &BTreeMap<NodeId, u32>) -> HeadOutcome {
    let mut any_suitable = false;
    for (id, attrs) in inv.iter() {
        if node_satisfies(attrs, task) {
            any_suitable = true;
            if free.get(&id).copied().unwrap_or(0) > 0 {
                return HeadOutcome::Placed(id);
            }
        }
    }
    if any_suitable {
        HeadOutcome::Blocked
    } else {
        HeadOutcome::Unplaceable
    }
}

/// Runs the trace to completion with a single classifier; every task is
/// either dispatched or counted unplaced. `registry` should come from
/// [`replay_registry`] on the same trace. `Fifo` may run without a
/// classifier.
pub fn simulate(
    events: &[TraceEvent],
    cfg: &SchedulerConfig,
    classifier: Option<&dyn TaskClassifier>,
    registry: &FeatureRegistry,
    grouping: &GroupingConfig,
) -> Result<SimResult> {
    let snapshots: Vec<ClassifierSnapshot<'_>> = classifier
        .map(|classifier| ClassifierSnapshot {
            ready_tick: 0,
            classifier,
        })
        .into_iter()
        .collect();
    simulate_with_updates(events, cfg, &snapshots, registry, grouping)
}

/// Like [`simulate`], with a sequence of classifier snapshots. The first is
/// active from the start; each later one answers from
/// `ready_tick + retrain_delay_ticks` onwards. Swapping snapshots never
/// delays dispatch.
pub fn simulate_with_updates(
    events: &[TraceEvent],
    cfg: &SchedulerConfig,
    snapshots: &[ClassifierSnapshot<'_>],
    registry: &FeatureRegistry,
    grouping: &GroupingConfig,
) -> Result<SimResult> {
    cfg.validate()?;
    grouping.validate()?;
    if cfg.policy == Policy::CoAnalyzer && snapshots.is_empty() {
        return Err(Error::Config("the co_analyzer policy needs a classifier".into()));
    }
    let mut scratch_registry = FeatureRegistry::new();
    let mut inventory = NodeInventory::new();
    let mut free: BTreeMap<NodeId, u32> = BTreeMap::new();
    let mut running: BinaryHeap<Reverse<(u64, NodeId)>> = BinaryHeap::new();
    let mut high: VecDeque<Pending> = VecDeque::new();
    let mut normal: VecDeque<Pending> = VecDeque::new();
    let mut latencies: Vec<Vec<f64>> = vec![Vec::new(); GROUP_COUNT];
    let mut all = Vec::new();
    let mut samples = Vec::new();
    let (mut submitted, mut placed, mut unplaced, mut misclassified) = (0, 0, 0, 0);
    let mut queue_trace = Vec::new();
    let tick_of = |t: u64| t / cfg.tick_us;
    let seconds = cfg.tick_us as f64 / 1e6;
    let active_at = |tick: u64| {
        snapshots
            .iter()
            .enumerate()
            .rev()
            .find(|(i, s)| *i == 0 || s.ready_tick.saturating_add(cfg.retrain_delay_ticks) <= tick)
            .map(|(_, s)| s.classifier)
    };

    let mut next_event = 0;
    let mut tick = events.first().map_or(0, |e| tick_of(e.time));
    let mut arrivals: Vec<Pending> = Vec::new();
    loop {
        let classifier = active_at(tick);
        while next_event < events.len() && tick_of(events[next_event].time) <= tick {
            match &events[next_event].body {
                EventBody::Machine { node, attribute, value } => {
                    inventory.apply_machine_event(&mut scratch_registry, *node, attribute, value.as_ref());
                    free.entry(*node).or_insert(cfg.slots_per_node);
                }
                EventBody::Task { task, duration } => {
                    submitted += 1;
                    let true_group = group_label(count_suitable(&inventory, task), grouping).group();
                    let Some(true_group) = true_group else {
                        unplaced += 1;
                        next_event += 1;
                        continue;
                    };
                    let predicted = match classifier {
                        Some(c) => Some(c.classify(task, &inventory, registry)?),
                        None => None,
                    };
                    if predicted.is_some_and(|p| p != true_group) {
                        misclassified += 1;
                    }
                    arrivals.push(Pending {
                        task: task.clone(),
                        arrival: tick,
                        duration_ticks: duration.div_ceil(cfg.tick_us).max(1),
                        true_group,
                        predicted,
                    });
                }
            }
            next_event += 1;
        }
        arrivals.sort_by_key(|p| p.task.task_id);
        for p in arrivals.drain(..) {
            let urgent = p.predicted.is_some_and(|g| g <= cfg.priority_threshold);
            if cfg.policy == Policy::CoAnalyzer && urgent {
                high.push_back(p);
            } else {
                normal.push_back(p);
            }
        }
        while let Some(&Reverse((end, node))) = running.peek() {
            if end > tick {
                break;
            }
            running.pop();
            *free.entry(node).or_insert(0) += 1;
        }

        let mut budget = cfg.dispatch_rate;
        let mut blocked = false;
        while budget > 0 {
            let queue = if !high.is_empty() { &mut high } else { &mut normal };
            let Some(head) = queue.front() else { break };
            match try_place(&head.task, &inventory, &free) {
                HeadOutcome::Placed(node) => {
                    let p = queue.pop_front().expect("head exists");
                    *free.get_mut(&node).expect("free slot") -= 1;
                    running.push(Reverse((tick + p.duration_ticks, node)));
                    let wait = (tick - p.arrival) as f64 * seconds;
                    latencies[p.true_group].push(wait);
                    all.push(wait);
                    samples.push(LatencySample {
                        task_id: p.task.task_id,
                        true_group: p.true_group,
                        predicted_group: p.predicted,
                        submit_tick: p.arrival,
                        placement_tick: tick,
                    });
                    placed += 1;
                    budget -= 1;
                }
                HeadOutcome::Unplaceable => {
                    queue.pop_front();
                    unplaced += 1;
                }
                HeadOutcome::Blocked => {
                    blocked = true;
                    break;
                }
            }
        }
        if queue_trace
            .last()
            .is_none_or(|q: &QueueSample| q.high != high.len() || q.normal != normal.len())
        {
            queue_trace.push(QueueSample {
                tick,
                high: high.len(),
                normal: normal.len(),
            });
        }

        let queued = !high.is_empty() || !normal.is_empty();
        let event_tick = events.get(next_event).map(|e| tick_of(e.time));
        let completion_tick = running.peek().map(|Reverse((t, _))| *t);
        tick = if queued && !blocked {
            tick + 1
        } else if queued {
            match (event_tick, completion_tick) {
                (Some(a), Some(b)) => a.min(b),
                (a, b) => a
                    .or(b)
                    .ok_or_else(|| Error::ModelState("queue head blocked with no running tasks".into()))?,
            }
        } else {
            match event_tick {
                Some(t) => t,
                None => break,
            }
        };
    }

    let per_group = latencies
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(group, v)| GroupLatency {
            group,
            stats: LatencyStats::from_samples(v),
        })
        .collect();
    Ok(SimResult {
        policy: cfg.policy,
        submitted,
        placed,
        unplaced,
        misclassified,
        overall: LatencyStats::from_samples(all),
        per_group,
        final_tick: tick,
        queue_trace,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covv::{AttributeKey, Constraint};
    use crate::trace::parse_events;

    const S: u64 = 1_000_000;

    fn machine(t: u64, node: u64, attr: &str, val: &str) -> TraceEvent {
        TraceEvent {
            time: t * S,
            body: EventBody::Machine {
                node: NodeId(node),
                attribute: AttributeKey::new(attr).unwrap(),
                value: Some(val.into()),
            },
        }
    }

    fn task(t: u64, id: u64, dur: u64, cons: Vec<Constraint>) -> TraceEvent {
        TraceEvent {
            time: t * S,
            body: EventBody::Task {
                task: TaskConstraintSet::new(id, cons),
                duration: dur * S,
            },
        }
    }

    fn cfg(policy: Policy) -> SchedulerConfig {
        SchedulerConfig {
            policy,
            slots_per_node: 1,
            dispatch_rate: 10,
            tick_us: S,
            ..Default::default()
        }
    }

    /// Two nodes; a backlog of long unconstrained tasks, then one task that
    /// fits only on node 1.
    fn adversarial() -> Vec<TraceEvent> {
        let mut ev = vec![machine(0, 0, "host", "a"), machine(0, 1, "host", "b")];
        for i in 0..6 {
            ev.push(task(1, i, 10, vec![]));
        }
        ev.push(task(1, 99, 1, vec![Constraint::parse("host", "EQ", &["b"]).unwrap()]));
        ev
    }

    #[test]
    fn fifo_versus_priority_routing() {
        let ev = adversarial();
        let reg = replay_registry(&ev);
        let g = GroupingConfig::new(1).unwrap();
        let oracle = OracleClassifier { grouping: g };
        let fifo = simulate(&ev, &cfg(Policy::Fifo), Some(&oracle), &reg, &g).unwrap();
        let co = simulate(&ev, &cfg(Policy::CoAnalyzer), Some(&oracle), &reg, &g).unwrap();
        assert_eq!(fifo.placed, 7);
        assert_eq!(co.placed, 7);
        // FIFO: three waves of two on two nodes, the group-0 task goes last
        // at tick 31 after arriving at tick 1.
        assert_eq!(fifo.group(0).unwrap().mean, Some(30.0));
        // priority: dispatched first, at arrival
        assert_eq!(co.group(0).unwrap().mean, Some(0.0));
        assert_eq!(fifo.misclassified + co.misclassified, 0);
    }

    #[test]
    fn unplaceable_head_does_not_consume_dispatch() {
        let mut ev = vec![machine(0, 0, "host", "a")];
        ev.push(task(1, 1, 5, vec![Constraint::parse("host", "EQ", &["zz"]).unwrap()]));
        ev.push(task(1, 2, 5, vec![]));
        let reg = replay_registry(&ev);
        let g = GroupingConfig::default();
        let oracle = OracleClassifier { grouping: g };
        let c = SchedulerConfig {
            dispatch_rate: 1,
            ..cfg(Policy::Fifo)
        };
        let r = simulate(&ev, &c, Some(&oracle), &reg, &g).unwrap();
        assert_eq!((r.placed, r.unplaced), (1, 1));
        assert_eq!(r.overall.mean, Some(0.0));
    }

    #[test]
    fn lowest_node_id_wins_and_slots_free_up() {
        let text = r#"{"t":0,"kind":"machine","node":5,"attr":"AM","val":"1"}
{"t":0,"kind":"machine","node":3,"attr":"AM","val":"1"}
{"t":2000000,"kind":"task","id":1,"dur":3000000,"cons":[]}
{"t":2000000,"kind":"task","id":2,"dur":3000000,"cons":[]}
{"t":2000000,"kind":"task","id":3,"dur":1000000,"cons":[]}
"#;
        let ev = parse_events(text.as_bytes()).unwrap();
        let reg = replay_registry(&ev);
        let g = GroupingConfig::default();
        let r = simulate(&ev, &cfg(Policy::Fifo), None, &reg, &g).unwrap();
        assert_eq!(r.placed, 3);
        // third task waits until tick 5
        assert_eq!(r.overall.p95, Some(3.0));
    }

    #[test]
    fn model_classifier_width_must_match() {
        let ev = adversarial();
        let reg = replay_registry(&ev);
        let m = TwoLayerClassifier::new(reg.len() + 1, 0, Default::default()).unwrap();
        assert!(matches!(
            ModelClassifier::new(&m, &reg),
            Err(Error::ClassifierMismatch { .. })
        ));
        let m = TwoLayerClassifier::new(reg.len(), 0, Default::default()).unwrap();
        let mc = ModelClassifier::new(&m, &reg).unwrap();
        let g = GroupingConfig::new(1).unwrap();
        let r = simulate(&ev, &cfg(Policy::CoAnalyzer), Some(&mc), &reg, &g).unwrap();
        assert_eq!(r.placed, 7);
    }

    struct Always(usize);

    impl TaskClassifier for Always {
        fn classify(&self, _: &TaskConstraintSet, _: &NodeInventory, _: &FeatureRegistry) -> Result<usize> {
            Ok(self.0)
        }
    }

    #[test]
    fn never_urgent_classifier_matches_fifo() {
        let ev = adversarial();
        let reg = replay_registry(&ev);
        let g = GroupingConfig::new(1).unwrap();
        let fifo = simulate(&ev, &cfg(Policy::Fifo), None, &reg, &g).unwrap();
        let co = simulate(&ev, &cfg(Policy::CoAnalyzer), Some(&Always(25)), &reg, &g).unwrap();
        assert_eq!(
            fifo.samples.iter().map(|s| s.placement_tick).collect::<Vec<_>>(),
            co.samples.iter().map(|s| s.placement_tick).collect::<Vec<_>>()
        );
        assert_eq!(fifo.per_group, co.per_group);
        assert!(simulate(&ev, &cfg(Policy::CoAnalyzer), None, &reg, &g).is_err());
    }

    #[test]
    fn delayed_update_changes_routing_not_dispatch_ticks() {
        let ev = adversarial();
        let reg = replay_registry(&ev);
        let g = GroupingConfig::new(1).unwrap();
        let oracle = OracleClassifier { grouping: g };
        let lazy = Always(25);
        let snaps = [
            ClassifierSnapshot {
                ready_tick: 0,
                classifier: &lazy,
            },
            ClassifierSnapshot {
                ready_tick: 0,
                classifier: &oracle,
            },
        ];
        let now = simulate_with_updates(&ev, &cfg(Policy::CoAnalyzer), &snaps, &reg, &g).unwrap();
        assert_eq!(now.group(0).unwrap().mean, Some(0.0));
        let delayed = SchedulerConfig {
            retrain_delay_ticks: 100,
            ..cfg(Policy::CoAnalyzer)
        };
        let late = simulate_with_updates(&ev, &delayed, &snaps, &reg, &g).unwrap();
        assert_eq!(late.group(0).unwrap().mean, Some(30.0));
        assert_eq!(late.placed, now.placed);
    }

    #[test]
    fn queue_trace_csv() {
        let mut buf = Vec::new();
        write_queue_trace_csv(
            &[QueueSample {
                tick: 3,
                high: 1,
                normal: 2,
            }],
            &mut buf,
        )
        .unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "tick,high,normal\n3,1,2\n");
    }

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_samples(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.mean, Some(3.0));
        assert_eq!(s.median, Some(3.0));
        assert_eq!(s.p95, Some(5.0));
        assert_eq!(LatencyStats::from_samples(vec![]).mean, None);
    }
}
