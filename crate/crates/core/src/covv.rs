//! Constraint operators and their CO-VV ("constraint operators as value
//! vectors") encoding.
//!
//! Every known `(attribute, value)` pair is a column in an append-only
//! [`FeatureRegistry`]. A task's constraints are rendered as a bit vector over
//! those columns where a `1` marks a value the task cannot accept and a `0`
//! marks an acceptable one. Each attribute also owns an `UNSET` column that
//! stands for nodes which do not carry the attribute at all.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Name of a machine attribute. Case-sensitive, non-empty, no whitespace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AttributeKey(String);

impl AttributeKey {
    pub fn new(name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(Error::InvalidAttribute(name));
        }
        Ok(AttributeKey(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for AttributeKey {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        AttributeKey::new(value)
    }
}

impl From<AttributeKey> for String {
    fn from(key: AttributeKey) -> Self {
        key.0
    }
}

impl fmt::Display for AttributeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A concrete attribute value. The decimal-integer reading is cached so
/// comparisons in the labeling hot loop never re-parse.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(from = "String", into = "String")]
pub struct ValueToken {
    text: String,
    numeric: Option<i64>,
}

impl ValueToken {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let numeric = text.parse::<i64>().ok();
        ValueToken { text, numeric }
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn numeric(&self) -> Option<i64> {
        self.numeric
    }

    /// Numeric when both sides are decimal integers, byte-lexicographic
    /// otherwise.
    pub fn compare(&self, other: &ValueToken) -> Ordering {
        match (self.numeric, other.numeric) {
            (Some(a), Some(b)) => a.cmp(&b),
            _ => self.text.as_bytes().cmp(other.text.as_bytes()),
        }
    }
}

impl PartialEq for ValueToken {
    fn eq(&self, other: &Self) -> bool {
        self.text == other.text
    }
}

impl Eq for ValueToken {}

impl std::hash::Hash for ValueToken {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.text.hash(state);
    }
}

impl From<String> for ValueToken {
    fn from(text: String) -> Self {
        ValueToken::new(text)
    }
}

impl From<&str> for ValueToken {
    fn from(text: &str) -> Self {
        ValueToken::new(text)
    }
}

impl From<ValueToken> for String {
    fn from(token: ValueToken) -> Self {
        token.text
    }
}

impl fmt::Display for ValueToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

/// The value a node holds for an attribute. `Unset` is never equal to a
/// concrete value.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AttributeValue {
    Unset,
    Value(ValueToken),
}

impl AttributeValue {
    pub fn value(text: impl Into<String>) -> Self {
        AttributeValue::Value(ValueToken::new(text))
    }
}

impl fmt::Display for AttributeValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttributeValue::Unset => f.write_str("UNSET"),
            AttributeValue::Value(v) => v.fmt(f),
        }
    }
}

/// Node-affinity operators. Ranges are written as two comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ConstraintOp {
    #[serde(rename = "EQ")]
    Equal,
    #[serde(rename = "NE")]
    NotEqual,
    #[serde(rename = "LT")]
    LessThan,
    #[serde(rename = "LE")]
    LessOrEqual,
    #[serde(rename = "GT")]
    GreaterThan,
    #[serde(rename = "GE")]
    GreaterOrEqual,
    #[serde(rename = "IN")]
    InSet,
    #[serde(rename = "NOT_IN")]
    NotInSet,
    #[serde(rename = "PRESENT")]
    Present,
    #[serde(rename = "ABSENT")]
    Absent,
}

impl ConstraintOp {
    pub const ALL: [ConstraintOp; 10] = [
        ConstraintOp::Equal,
        ConstraintOp::NotEqual,
        ConstraintOp::LessThan,
        ConstraintOp::LessOrEqual,
        ConstraintOp::GreaterThan,
        ConstraintOp::GreaterOrEqual,
        ConstraintOp::InSet,
        ConstraintOp::NotInSet,
        ConstraintOp::Present,
        ConstraintOp::Absent,
    ];

    /// Wire name used in trace files.
    pub fn name(self) -> &'static str {
        match self {
            ConstraintOp::Equal => "EQ",
            ConstraintOp::NotEqual => "NE",
            ConstraintOp::LessThan => "LT",
            ConstraintOp::LessOrEqual => "LE",
            ConstraintOp::GreaterThan => "GT",
            ConstraintOp::GreaterOrEqual => "GE",
            ConstraintOp::InSet => "IN",
            ConstraintOp::NotInSet => "NOT_IN",
            ConstraintOp::Present => "PRESENT",
            ConstraintOp::Absent => "ABSENT",
        }
    }

    fn check_arity(self, got: usize) -> Result<()> {
        let (ok, expected) = match self {
            ConstraintOp::Present | ConstraintOp::Absent => (got == 0, "0"),
            ConstraintOp::InSet | ConstraintOp::NotInSet => (got >= 1, "at least 1"),
            _ => (got == 1, "1"),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OperandArity {
                op: self.name(),
                expected,
                got,
            })
        }
    }
}

impl FromStr for ConstraintOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ConstraintOp::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::UnknownOperator(s.to_string()))
    }
}

impl fmt::Display for ConstraintOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One predicate over one attribute. Construct through [`Constraint::new`] so
/// operand arity always matches the operator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Constraint {
    attribute: AttributeKey,
    op: ConstraintOp,
    operands: Vec<ValueToken>,
}

impl Constraint {
    pub fn new(attribute: AttributeKey, op: ConstraintOp, operands: Vec<ValueToken>) -> Result<Self> {
        op.check_arity(operands.len())?;
        Ok(Constraint {
            attribute,
            op,
            operands,
        })
    }

    /// Shorthand for tests and examples: `Constraint::parse("AM", "GE", &["5"])`.
    pub fn parse(attribute: &str, op: &str, operands: &[&str]) -> Result<Self> {
        Constraint::new(
            AttributeKey::new(attribute)?,
            op.parse()?,
            operands.iter().map(|s| ValueToken::new(*s)).collect(),
        )
    }

    pub fn attribute(&self) -> &AttributeKey {
        &self.attribute
    }

    pub fn op(&self) -> ConstraintOp {
        self.op
    }

    pub fn operands(&self) -> &[ValueToken] {
        &self.operands
    }
}

/// Wire shape: `{"attr": .., "op": .., "operands": [..]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintRecord {
    pub attr: String,
    pub op: String,
    pub operands: Vec<String>,
}

impl From<&Constraint> for ConstraintRecord {
    fn from(c: &Constraint) -> Self {
        ConstraintRecord {
            attr: c.attribute.as_str().to_string(),
            op: c.op.name().to_string(),
            operands: c.operands.iter().map(|v| v.as_str().to_string()).collect(),
        }
    }
}

impl TryFrom<ConstraintRecord> for Constraint {
    type Error = Error;

    fn try_from(record: ConstraintRecord) -> Result<Self> {
        Constraint::new(
            AttributeKey::new(record.attr)?,
            record.op.parse()?,
            record.operands.into_iter().map(ValueToken::new).collect(),
        )
    }
}

/// A task's conjunction of constraints. Empty means unconstrained.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskConstraintSet {
    pub task_id: u64,
    pub constraints: Vec<Constraint>,
}

impl TaskConstraintSet {
    pub fn new(task_id: u64, constraints: Vec<Constraint>) -> Self {
        TaskConstraintSet { task_id, constraints }
    }

    pub fn unconstrained(task_id: u64) -> Self {
        TaskConstraintSet::new(task_id, Vec::new())
    }

    pub fn is_constrained(&self) -> bool {
        !self.constraints.is_empty()
    }
}

/// Whether a node holding `value` for `c.attribute()` satisfies `c`.
///
/// `Unset` satisfies only `NE`, `NOT_IN` and `ABSENT`.
pub fn value_satisfies(c: &Constraint, value: &AttributeValue) -> bool {
    match value {
        AttributeValue::Unset => token_satisfies(c, None),
        AttributeValue::Value(v) => token_satisfies(c, Some(v)),
    }
}

/// Borrowing form of [`value_satisfies`]; `None` reads as `UNSET`.
pub fn token_satisfies(c: &Constraint, value: Option<&ValueToken>) -> bool {
    let Some(v) = value else {
        return matches!(
            c.op,
            ConstraintOp::NotEqual | ConstraintOp::NotInSet | ConstraintOp::Absent
        );
    };
    let first = || v.compare(&c.operands[0]);
    match c.op {
        ConstraintOp::Equal => first() == Ordering::Equal,
        ConstraintOp::NotEqual => first() != Ordering::Equal,
        ConstraintOp::LessThan => first() == Ordering::Less,
        ConstraintOp::LessOrEqual => first() != Ordering::Greater,
        ConstraintOp::GreaterThan => first() == Ordering::Greater,
        ConstraintOp::GreaterOrEqual => first() != Ordering::Less,
        ConstraintOp::InSet => c.operands.iter().any(|o| v.compare(o) == Ordering::Equal),
        ConstraintOp::NotInSet => c.operands.iter().all(|o| v.compare(o) != Ordering::Equal),
        ConstraintOp::Present => true,
        ConstraintOp::Absent => false,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Column {
    pub attribute: AttributeKey,
    pub value: AttributeValue,
}

impl fmt::Display for Column {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{{}}}:{}", self.attribute, self.value)
    }
}

/// Append-only catalog of `(attribute, value)` columns.
///
/// Positions are dense and never move. The first time an attribute is seen
/// its `UNSET` column is appended before any concrete value.
#[derive(Debug, Clone, Default)]
pub struct FeatureRegistry {
    columns: Vec<Column>,
    index: HashMap<AttributeKey, HashMap<AttributeValue, usize>>,
    by_attribute: HashMap<AttributeKey, Vec<usize>>,
}

impl FeatureRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn position(&self, attribute: &AttributeKey, value: &AttributeValue) -> Option<usize> {
        self.index.get(attribute)?.get(value).copied()
    }

    /// Column positions belonging to `attribute`, in registration order.
    pub fn attribute_columns(&self, attribute: &AttributeKey) -> &[usize] {
        self.by_attribute.get(attribute).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Idempotent: returns the existing position or appends a new column.
    pub fn register_observation(&mut self, attribute: &AttributeKey, value: &AttributeValue) -> usize {
        if let Some(pos) = self.position(attribute, value) {
            return pos;
        }
        if !self.index.contains_key(attribute) {
            self.push(attribute.clone(), AttributeValue::Unset);
            if *value == AttributeValue::Unset {
                return self.columns.len() - 1;
            }
        }
        self.push(attribute.clone(), value.clone())
    }

    /// Registers every operand of `c` (and the attribute's `UNSET` column).
    pub fn register_constraint(&mut self, c: &Constraint) {
        if c.operands.is_empty() {
            self.register_observation(&c.attribute, &AttributeValue::Unset);
        }
        for operand in &c.operands {
            self.register_observation(&c.attribute, &AttributeValue::Value(operand.clone()));
        }
    }

    pub fn register_task(&mut self, task: &TaskConstraintSet) {
        for c in &task.constraints {
            self.register_constraint(c);
        }
    }

    fn push(&mut self, attribute: AttributeKey, value: AttributeValue) -> usize {
        let pos = self.columns.len();
        self.index
            .entry(attribute.clone())
            .or_default()
            .insert(value.clone(), pos);
        self.by_attribute.entry(attribute.clone()).or_default().push(pos);
        self.columns.push(Column { attribute, value });
        pos
    }
}

/// Fixed-length bit vector; bit `1` marks an unacceptable column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct CovvVector {
    words: Vec<u64>,
    len: usize,
}

impl CovvVector {
    pub fn zeros(len: usize) -> Self {
        CovvVector {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn from_bits(bits: &[u8]) -> Self {
        let mut v = CovvVector::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b != 0 {
                v.set(i);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn set(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Positions of set bits in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(wi, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(wi * 64 + tz)
            })
        })
    }

    /// Element-wise OR; the result takes the longer length.
    pub fn or_assign(&mut self, other: &CovvVector) {
        if other.len > self.len {
            self.words.resize(other.words.len(), 0);
            self.len = other.len;
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= *b;
        }
    }

    /// Right-pads with zeros to `len`.
    pub fn padded(&self, len: usize) -> Result<CovvVector> {
        if len < self.len {
            return Err(Error::Align {
                vector: self.len,
                registry: len,
            });
        }
        let mut out = self.clone();
        out.words.resize(len.div_ceil(64), 0);
        out.len = len;
        Ok(out)
    }

    /// Keeps only the first `len` columns.
    pub fn truncated(&self, len: usize) -> CovvVector {
        let len = len.min(self.len);
        let mut words: Vec<u64> = self.words[..len.div_ceil(64)].to_vec();
        if !len.is_multiple_of(64) {
            if let Some(last) = words.last_mut() {
                *last &= (1u64 << (len % 64)) - 1;
            }
        }
        CovvVector { words, len }
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }

    pub fn to_dense(&self) -> Vec<f64> {
        (0..self.len).map(|i| if self.get(i) { 1.0 } else { 0.0 }).collect()
    }
}

impl fmt::Display for CovvVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            if i > 0 {
                f.write_str(" ")?;
            }
            f.write_str(if self.get(i) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Registers the constraint's operands, then encodes it.
pub fn encode_constraint(c: &Constraint, registry: &mut FeatureRegistry) -> CovvVector {
    registry.register_constraint(c);
    encode_constraint_frozen(c, registry)
}

/// Encodes against a registry without modifying it. Operand values that were
/// never registered simply have no column.
pub fn encode_constraint_frozen(c: &Constraint, registry: &FeatureRegistry) -> CovvVector {
    let mut v = CovvVector::zeros(registry.len());
    mark_rejected(c, registry, &mut v);
    v
}

fn mark_rejected(c: &Constraint, registry: &FeatureRegistry, v: &mut CovvVector) {
    for &pos in registry.attribute_columns(&c.attribute) {
        if !value_satisfies(c, &registry.columns[pos].value) {
            v.set(pos);
        }
    }
}

/// OR of the per-constraint encodings; registers operands first.
pub fn encode_task(task: &TaskConstraintSet, registry: &mut FeatureRegistry) -> CovvVector {
    registry.register_task(task);
    encode_task_frozen(task, registry)
}

pub fn encode_task_frozen(task: &TaskConstraintSet, registry: &FeatureRegistry) -> CovvVector {
    let mut v = CovvVector::zeros(registry.len());
    for c in &task.constraints {
        mark_rejected(c, registry, &mut v);
    }
    v
}

/// Zero-pads an older vector to the registry's current length. Columns added
/// since encoding were unknown to the task and are therefore acceptable.
pub fn align(v: &CovvVector, registry: &FeatureRegistry) -> Result<CovvVector> {
    v.padded(registry.len())
}
