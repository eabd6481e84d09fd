//! Cluster node-attribute state and the brute-force labeling oracle.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::covv::{token_satisfies, AttributeKey, AttributeValue, FeatureRegistry, TaskConstraintSet, ValueToken};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};

/// Largest group index; counts beyond the last increment clamp here.
pub const MAX_GROUP: usize = 25;
/// Number of output classes (groups 0 through 25).
pub const GROUP_COUNT: usize = MAX_GROUP + 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u64);

/// Attributes carried by one node. A missing key reads as `UNSET`.
pub type NodeAttributes = BTreeMap<AttributeKey, ValueToken>;

#[derive(Debug, Clone, Default)]
pub struct NodeInventory {
    nodes: BTreeMap<NodeId, NodeAttributes>,
}

impl NodeInventory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeAttributes> {
        self.nodes.get(&id)
    }

    /// Nodes in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &NodeAttributes)> {
        self.nodes.iter().map(|(id, attrs)| (*id, attrs))
    }

    /// Sets (`Some`) or removes (`None`) one attribute on one node and
    /// registers concrete values as feature columns.
    pub fn apply_machine_event(
        &mut self,
        registry: &mut FeatureRegistry,
        node: NodeId,
        attribute: &AttributeKey,
        value: Option<&ValueToken>,
    ) {
        match value {
            Some(v) => {
                registry.register_observation(attribute, &AttributeValue::Value(v.clone()));
                self.nodes.entry(node).or_default().insert(attribute.clone(), v.clone());
            }
            None => {
                if let Some(attrs) = self.nodes.get_mut(&node) {
                    attrs.remove(attribute);
                }
            }
        }
    }

    /// One JSON object per `(node, attribute, value)` triple.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for (id, attrs) in &self.nodes {
            for (attr, val) in attrs {
                let line = InventoryLine {
                    node: id.0,
                    attr: attr.as_str().to_string(),
                    val: val.as_str().to_string(),
                };
                serde_json::to_writer(&mut out, &line)?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut inv = NodeInventory::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: InventoryLine = serde_json::from_str(&line).map_err(|e| Error::Trace {
                line: i + 1,
                message: e.to_string(),
            })?;
            inv.nodes
                .entry(NodeId(rec.node))
                .or_default()
                .insert(AttributeKey::new(rec.attr)?, ValueToken::new(rec.val));
        }
        Ok(inv)
    }
}

#[derive(Serialize, Deserialize)]
struct InventoryLine {
    node: u64,
    attr: String,
    val: String,
}

/// True iff every constraint holds, reading `UNSET` for missing attributes.
pub fn node_satisfies(attrs: &NodeAttributes, task: &TaskConstraintSet) -> bool {
    task.constraints
        .iter()
        .all(|c| token_satisfies(c, attrs.get(c.attribute())))
}

/// Exhaustive scan over the inventory.
pub fn count_suitable(inv: &NodeInventory, task: &TaskConstraintSet) -> usize {
    inv.nodes.values().filter(|attrs| node_satisfies(attrs, task)).count()
}

/// [`count_suitable`] for many tasks against one frozen inventory.
pub fn count_suitable_batch(inv: &NodeInventory, tasks: &[TaskConstraintSet], exec: Execution) -> Vec<usize> {
    exec::map(exec, tasks, |t| count_suitable(inv, t))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupLabel {
    Group(u8),
    Unschedulable,
}

impl GroupLabel {
    pub fn group(self) -> Option<usize> {
        match self {
            GroupLabel::Group(g) => Some(g as usize),
            GroupLabel::Unschedulable => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroupingConfig {
    /// Suitable-node width of each group above group 0.
    pub increment: u32,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig { increment: 500 }
    }
}

impl GroupingConfig {
    pub fn new(increment: u32) -> Result<Self> {
        let cfg = GroupingConfig { increment };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.increment == 0 {
            return Err(Error::Config("grouping increment must be at least 1".into()));
        }
        Ok(())
    }
}

/// 0 nodes → unschedulable, 1 node → group 0, otherwise
/// `min(25, ceil(count / increment))`.
pub fn group_label(count: usize, cfg: &GroupingConfig) -> GroupLabel {
    match count {
        0 => GroupLabel::Unschedulable,
        1 => GroupLabel::Group(0),
        n => {
            let inc = cfg.increment.max(1) as usize;
            GroupLabel::Group(n.div_ceil(inc).min(MAX_GROUP) as u8)
        }
    }
}
