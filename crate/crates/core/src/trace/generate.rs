use std::collections::BTreeSet;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::{write_events, EventBody, TraceEvent};
use crate::covv::{AttributeKey, Constraint, ConstraintOp, FeatureRegistry, TaskConstraintSet, ValueToken};
use crate::error::{Error, Result};
use crate::oracle::{count_suitable, NodeId, NodeInventory};

/// Attribute that carries a value unique to each node; restrictive tasks pin
/// themselves to one node through it.
pub const HOST_ATTRIBUTE: &str = "hostname";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrowthInjection {
    /// Microseconds since trace start.
    pub time: u64,
    /// New attribute values introduced at `time`.
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTraceConfig {
    pub node_count: usize,
    pub attribute_count: usize,
    /// Distinct values per attribute at bootstrap; also the per-step cap on
    /// injected values.
    pub values_per_attribute: usize,
    pub task_count: usize,
    /// Share of tasks carrying constraints (restrictive tasks included).
    pub constrained_fraction: f64,
    /// Expected single-node tasks per 10,000.
    pub restrictive_rate: f64,
    pub growth_schedule: Vec<GrowthInjection>,
    pub mean_duration_us: u64,
    /// Task submissions are spread evenly over `(0, span_us]`.
    pub span_us: u64,
    /// Probability that a node carries a given (non-host) attribute.
    pub attribute_presence: f64,
    /// Size of the initial catalog of constraint templates.
    pub template_count: usize,
    /// Templates matching fewer nodes than this at creation are rejected.
    pub min_template_nodes: usize,
    pub seed: u64,
}

impl Default for SyntheticTraceConfig {
    fn default() -> Self {
        SyntheticTraceConfig::desk_scale(7)
    }
}

impl SyntheticTraceConfig {
    /// 200 nodes, 20 growth injections, ~40k tasks.
    pub fn desk_scale(seed: u64) -> Self {
        let task_count = 40_000;
        let span_us = task_count as u64 * 1_000_000;
        let steps = 20u64;
        let growth_schedule = (0..steps)
            .map(|g| GrowthInjection {
                time: span_us * (g + 1) / (steps + 1),
                count: 1 + (g as usize % 3),
            })
            .collect();
        SyntheticTraceConfig {
            node_count: 200,
            attribute_count: 8,
            values_per_attribute: 12,
            task_count,
            constrained_fraction: 0.40,
            restrictive_rate: 15.0,
            growth_schedule,
            mean_duration_us: 300_000_000,
            span_us,
            attribute_presence: 0.85,
            template_count: 60,
            min_template_nodes: 4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.node_count == 0 || self.attribute_count == 0 || self.values_per_attribute == 0 {
            return bad("node_count, attribute_count and values_per_attribute must be positive".into());
        }
        if self.task_count == 0 || self.span_us == 0 || self.mean_duration_us == 0 {
            return bad("task_count, span_us and mean_duration_us must be positive".into());
        }
        for (name, v) in [
            ("constrained_fraction", self.constrained_fraction),
            ("attribute_presence", self.attribute_presence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if !(0.0..=10_000.0).contains(&self.restrictive_rate) {
            return bad(format!(
                "restrictive_rate is per 10,000 tasks and must lie in [0, 10000], got {}",
                self.restrictive_rate
            ));
        }
        if self.template_count == 0 {
            return bad("template_count must be positive".into());
        }
        for g in &self.growth_schedule {
            if g.count == 0 {
                return bad(format!("growth injection at t={} adds no values", g.time));
            }
            if g.count > self.values_per_attribute {
                return bad(format!(
                    "growth injection at t={} adds {} values, more than values_per_attribute ({})",
                    g.time, g.count, self.values_per_attribute
                ));
            }
        }
        Ok(())
    }
}

pub fn attribute_name(index: usize) -> String {
    let hi = (b'A' + (index / 26 % 26) as u8) as char;
    let lo = (b'A' + (index % 26) as u8) as char;
    if index < 26 * 26 {
        format!("{hi}{lo}")
    } else {
        format!("{hi}{lo}{}", index / (26 * 26))
    }
}

pub fn host_value(node: u64) -> String {
    format!("host-{node:05}")
}

struct Template {
    constraints: Vec<Constraint>,
    weight: f64,
}

struct Generator {
    cfg: SyntheticTraceConfig,
    rng: ChaCha8Rng,
    inventory: NodeInventory,
    registry: FeatureRegistry,
    attributes: Vec<AttributeKey>,
    host: AttributeKey,
    next_value: Vec<usize>,
    templates: Vec<Template>,
    events: Vec<TraceEvent>,
}

impl Generator {
    fn set(&mut self, time: u64, node: u64, attribute: AttributeKey, value: String) {
        let value = ValueToken::new(value);
        self.inventory
            .apply_machine_event(&mut self.registry, NodeId(node), &attribute, Some(&value));
        self.events.push(TraceEvent {
            time,
            body: EventBody::Machine {
                node: NodeId(node),
                attribute,
                value: Some(value),
            },
        });
    }

    fn bootstrap(&mut self) {
        let weights: Vec<f64> = (0..self.cfg.values_per_attribute)
            .map(|i| 1.0 / (i as f64 + 1.0))
            .collect();
        let dist = rand::distr::weighted::WeightedIndex::new(&weights).expect("positive weights");
        for node in 1..=self.cfg.node_count as u64 {
            self.set(0, node, self.host.clone(), host_value(node));
            for a in 0..self.attributes.len() {
                if self.rng.random_bool(self.cfg.attribute_presence) {
                    let v = dist.sample(&mut self.rng);
                    self.set(0, node, self.attributes[a].clone(), v.to_string());
                }
            }
        }
    }

    /// Values of `attribute` currently held by at least one node, ascending.
    fn values_in_use(&self, attribute: &AttributeKey) -> Vec<ValueToken> {
        let set: BTreeSet<i64> = self
            .inventory
            .iter()
            .filter_map(|(_, attrs)| attrs.get(attribute).and_then(ValueToken::numeric))
            .collect();
        set.into_iter().map(|v| ValueToken::new(v.to_string())).collect()
    }

    fn random_constraint(&mut self, attribute: &AttributeKey, anchor: Option<&ValueToken>) -> Constraint {
        const OPS: [(ConstraintOp, u32); 10] = [
            (ConstraintOp::Equal, 6),
            (ConstraintOp::NotEqual, 2),
            (ConstraintOp::LessThan, 2),
            (ConstraintOp::LessOrEqual, 2),
            (ConstraintOp::GreaterThan, 2),
            (ConstraintOp::GreaterOrEqual, 3),
            (ConstraintOp::InSet, 4),
            (ConstraintOp::NotInSet, 2),
            (ConstraintOp::Present, 2),
            (ConstraintOp::Absent, 1),
        ];
        let values = self.values_in_use(attribute);
        let op = OPS.choose_weighted(&mut self.rng, |(_, w)| *w).unwrap().0;
        let pick = |rng: &mut ChaCha8Rng| -> ValueToken {
            match anchor {
                Some(a) => a.clone(),
                None => values.choose(rng).cloned().unwrap_or_else(|| ValueToken::new("0")),
            }
        };
        let operands = match op {
            ConstraintOp::Present | ConstraintOp::Absent => Vec::new(),
            ConstraintOp::InSet | ConstraintOp::NotInSet => {
                let k = self.rng.random_range(2..=3).min(values.len().max(1));
                let mut set: Vec<ValueToken> = vec![pick(&mut self.rng)];
                for v in values.choose_multiple(&mut self.rng, k) {
                    if set.len() < k && !set.contains(v) {
                        set.push(v.clone());
                    }
                }
                set
            }
            _ => vec![pick(&mut self.rng)],
        };
        Constraint::new(attribute.clone(), op, operands).expect("arity matches operator")
    }

    /// Draws a template; `anchor` forces one constraint to reference a value.
    fn new_template(&mut self, anchor: Option<(&AttributeKey, &ValueToken)>, weight: f64) -> bool {
        for _ in 0..200 {
            let mut constraints = Vec::new();
            if let Some((attr, value)) = anchor {
                constraints.push(self.random_constraint(attr, Some(value)));
            }
            let extra = if anchor.is_some() {
                usize::from(self.rng.random_bool(0.25))
            } else if self.rng.random_bool(0.3) {
                2
            } else {
                1
            };
            for _ in 0..extra {
                let attr = self.attributes.choose(&mut self.rng).unwrap().clone();
                if constraints.iter().any(|c: &Constraint| c.attribute() == &attr) {
                    continue;
                }
                constraints.push(self.random_constraint(&attr, None));
            }
            let task = TaskConstraintSet::new(0, constraints);
            let n = count_suitable(&self.inventory, &task);
            if n >= self.cfg.min_template_nodes.max(2) {
                self.templates.push(Template {
                    constraints: task.constraints,
                    weight,
                });
                return true;
            }
        }
        false
    }

    fn inject(&mut self, time: u64, count: usize) {
        let median_weight = {
            let mut w: Vec<f64> = self.templates.iter().map(|t| t.weight).collect();
            w.sort_by(f64::total_cmp);
            w.get(w.len() / 2).copied().unwrap_or(1.0)
        };
        let nodes: Vec<u64> = (1..=self.cfg.node_count as u64).collect();
        for _ in 0..count {
            let a = self.rng.random_range(0..self.attributes.len());
            let attr = self.attributes[a].clone();
            let value = self.next_value[a].to_string();
            self.next_value[a] += 1;
            let lo = (self.cfg.node_count / 40).max(2).min(self.cfg.node_count);
            let hi = (self.cfg.node_count / 10).max(lo);
            let m = self.rng.random_range(lo..=hi);
            let mut chosen: Vec<u64> = nodes.choose_multiple(&mut self.rng, m).copied().collect();
            chosen.sort_unstable();
            for node in chosen {
                self.set(time, node, attr.clone(), value.clone());
            }
            let token = ValueToken::new(value);
            for _ in 0..2 {
                self.new_template(Some((&attr, &token)), median_weight);
            }
        }
    }

    fn task(&mut self, id: u64, time: u64, duration: &Exp<f64>) {
        let r: f64 = self.rng.random();
        let constraints = if r < self.cfg.restrictive_rate / 10_000.0 {
            let node = self.rng.random_range(1..=self.cfg.node_count as u64);
            vec![Constraint::new(
                self.host.clone(),
                ConstraintOp::Equal,
                vec![ValueToken::new(host_value(node))],
            )
            .expect("EQ has one operand")]
        } else if r < self.cfg.constrained_fraction {
            let t = self
                .templates
                .choose_weighted(&mut self.rng, |t| t.weight)
                .expect("template catalog is non-empty");
            t.constraints.clone()
        } else {
            Vec::new()
        };
        let dur = duration.sample(&mut self.rng).round().max(1.0) as u64;
        self.events.push(TraceEvent {
            time,
            body: EventBody::Task {
                task: TaskConstraintSet::new(id, constraints),
                duration: dur,
            },
        });
    }
}

/// Deterministic synthetic trace: machine bootstrap at t=0, then task
/// submissions interleaved with the growth injections.
pub fn generate_events(cfg: &SyntheticTraceConfig) -> Result<Vec<TraceEvent>> {
    cfg.validate()?;
    let attributes: Vec<AttributeKey> = (0..cfg.attribute_count)
        .map(|a| AttributeKey::new(attribute_name(a)).expect("generated names are valid"))
        .collect();
    let mut g = Generator {
        cfg: cfg.clone(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        inventory: NodeInventory::new(),
        registry: FeatureRegistry::new(),
        host: AttributeKey::new(HOST_ATTRIBUTE).expect("valid"),
        next_value: vec![cfg.values_per_attribute; attributes.len()],
        attributes,
        templates: Vec::new(),
        events: Vec::new(),
    };
    g.bootstrap();
    for rank in 0..cfg.template_count {
        let weight = 1.0 / (rank as f64 + 1.0).powf(0.7);
        g.new_template(None, weight);
    }
    if g.templates.is_empty() {
        return Err(Error::Config(
            "no constraint template matches min_template_nodes nodes".into(),
        ));
    }

    let mut schedule = cfg.growth_schedule.clone();
    schedule.sort_by_key(|s| s.time);
    let mut pending = schedule.into_iter().peekable();
    let duration = Exp::new(1.0 / cfg.mean_duration_us as f64)
        .map_err(|e| Error::Config(format!("duration distribution: {e}")))?;
    for i in 0..cfg.task_count as u64 {
        let time = 1 + i * cfg.span_us / cfg.task_count as u64;
        while let Some(inj) = pending.next_if(|inj| inj.time <= time) {
            g.inject(inj.time, inj.count);
        }
        g.task(i + 1, time, &duration);
    }
    for inj in pending {
        g.inject(inj.time, inj.count);
    }
    // keep the sequence sorted even if an injection precedes t=0 bootstrap
    g.events.sort_by_key(|e| e.time);
    Ok(g.events)
}

/// [`generate_events`] rendered as JSONL bytes.
pub fn generate_trace(cfg: &SyntheticTraceConfig) -> Result<Vec<u8>> {
    let events = generate_events(cfg)?;
    let mut out = Vec::new();
    write_events(&events, &mut out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_events;

    fn small(seed: u64) -> SyntheticTraceConfig {
        SyntheticTraceConfig {
            node_count: 40,
            task_count: 2_000,
            span_us: 2_000_000_000,
            growth_schedule: vec![GrowthInjection {
                time: 1_000_000_000,
                count: 3,
            }],
            template_count: 20,
            seed,
            ..SyntheticTraceConfig::desk_scale(seed)
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_trace(&small(3)).unwrap();
        let b = generate_trace(&small(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_trace(&small(4)).unwrap());
    }

    #[test]
    fn round_trips_through_parser() {
        let events = generate_events(&small(5)).unwrap();
        let bytes = generate_trace(&small(5)).unwrap();
        assert_eq!(parse_events(bytes.as_slice()).unwrap(), events);
    }

    #[test]
    fn rejects_oversized_injection() {
        let mut cfg = small(1);
        cfg.growth_schedule[0].count = cfg.values_per_attribute + 1;
        assert!(matches!(generate_events(&cfg), Err(Error::Config(_))));
        let mut cfg = small(1);
        cfg.constrained_fraction = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn attribute_names_are_stable() {
        assert_eq!(attribute_name(0), "AA");
        assert_eq!(attribute_name(27), "BB");
    }
}
