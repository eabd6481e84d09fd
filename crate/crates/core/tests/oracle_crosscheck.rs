use std::collections::HashMap;

use growsched_core::covv::{
    encode_task, AttributeKey, AttributeValue, Constraint, ConstraintOp, FeatureRegistry, TaskConstraintSet, ValueToken,
};
use growsched_core::oracle::{
    count_suitable, count_suitable_batch, group_label, GroupLabel, GroupingConfig, NodeId, NodeInventory,
};
use growsched_core::Execution;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ATTRS: [&str; 4] = ["cpu", "os", "zone", "gpu"];

type Plain = Vec<HashMap<&'static str, i64>>;

fn random_cluster(rng: &mut ChaCha8Rng, nodes: usize) -> (Plain, NodeInventory, FeatureRegistry) {
    let mut plain = Vec::new();
    let mut inv = NodeInventory::new();
    let mut reg = FeatureRegistry::new();
    for n in 0..nodes {
        let mut attrs = HashMap::new();
        inv.apply_machine_event(
            &mut reg,
            NodeId(n as u64),
            &AttributeKey::new("host").unwrap(),
            Some(&ValueToken::new(format!("h{n}"))),
        );
        for a in ATTRS {
            if rng.random_bool(0.8) {
                let v = rng.random_range(0..12i64);
                attrs.insert(a, v);
                inv.apply_machine_event(
                    &mut reg,
                    NodeId(n as u64),
                    &AttributeKey::new(a).unwrap(),
                    Some(&ValueToken::new(v.to_string())),
                );
            }
        }
        plain.push(attrs);
    }
    (plain, inv, reg)
}

fn random_task(rng: &mut ChaCha8Rng, id: u64) -> TaskConstraintSet {
    let k = rng.random_range(0..=3);
    let cons = (0..k)
        .map(|_| {
            let a = ATTRS[rng.random_range(0..ATTRS.len())];
            let op = ConstraintOp::ALL[rng.random_range(0..ConstraintOp::ALL.len())];
            let n = match op {
                ConstraintOp::Present | ConstraintOp::Absent => 0,
                ConstraintOp::InSet | ConstraintOp::NotInSet => rng.random_range(1..=3),
                _ => 1,
            };
            let operands = (0..n)
                .map(|_| ValueToken::new(rng.random_range(0..14i64).to_string()))
                .collect();
            Constraint::new(AttributeKey::new(a).unwrap(), op, operands).unwrap()
        })
        .collect();
    TaskConstraintSet::new(id, cons)
}

fn holds(c: &Constraint, v: Option<i64>) -> bool {
    let ops: Vec<i64> = c.operands().iter().map(|o| o.as_str().parse().unwrap()).collect();
    match (c.op(), v) {
        (ConstraintOp::Absent, v) => v.is_none(),
        (ConstraintOp::Present, v) => v.is_some(),
        (ConstraintOp::NotEqual | ConstraintOp::NotInSet, None) => true,
        (_, None) => false,
        (ConstraintOp::Equal, Some(v)) => v == ops[0],
        (ConstraintOp::NotEqual, Some(v)) => v != ops[0],
        (ConstraintOp::LessThan, Some(v)) => v < ops[0],
        (ConstraintOp::LessOrEqual, Some(v)) => v <= ops[0],
        (ConstraintOp::GreaterThan, Some(v)) => v > ops[0],
        (ConstraintOp::GreaterOrEqual, Some(v)) => v >= ops[0],
        (ConstraintOp::InSet, Some(v)) => ops.contains(&v),
        (ConstraintOp::NotInSet, Some(v)) => !ops.contains(&v),
    }
}

fn brute_count(plain: &Plain, t: &TaskConstraintSet) -> usize {
    plain
        .iter()
        .filter(|node| {
            t.constraints
                .iter()
                .all(|c| holds(c, node.get(c.attribute().as_str()).copied()))
        })
        .count()
}

fn brute_group(n: usize, inc: usize) -> Option<usize> {
    match n {
        0 => None,
        1 => Some(0),
        _ => Some(n.div_ceil(inc).min(25)),
    }
}

#[test]
fn oracle_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (plain, inv, _) = random_cluster(&mut rng, 200);
    let g = GroupingConfig::new(7).unwrap();
    let tasks: Vec<_> = (0..1000).map(|i| random_task(&mut rng, i)).collect();
    let counts = count_suitable_batch(&inv, &tasks, Execution::Parallel);
    for (t, &n) in tasks.iter().zip(&counts) {
        assert_eq!(n, brute_count(&plain, t), "task {t:?}");
        assert_eq!(group_label(n, &g).group(), brute_group(n, 7));
    }
    assert_eq!(counts, count_suitable_batch(&inv, &tasks, Execution::Sequential));
}

#[test]
fn label_boundaries() {
    let g = GroupingConfig::new(500).unwrap();
    assert_eq!(group_label(0, &g), GroupLabel::Unschedulable);
    assert_eq!(group_label(1, &g), GroupLabel::Group(0));
    assert_eq!(group_label(2, &g), GroupLabel::Group(1));
    assert_eq!(group_label(500, &g), GroupLabel::Group(1));
    assert_eq!(group_label(501, &g), GroupLabel::Group(2));
    assert_eq!(group_label(12_500, &g), GroupLabel::Group(25));
    assert_eq!(group_label(1_000_000, &g), GroupLabel::Group(25));
}

/// A node satisfies a task exactly when none of its columns is marked
/// unacceptable in the task's encoding.
#[test]
fn encoding_agrees_with_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (plain, _, mut reg) = random_cluster(&mut rng, 60);
    for i in 0..300 {
        let t = random_task(&mut rng, i);
        let v = encode_task(&t, &mut reg);
        for node in &plain {
            let via_bits = t.constraints.iter().all(|c| {
                let value = match node.get(c.attribute().as_str()) {
                    Some(x) => AttributeValue::value(x.to_string()),
                    None => AttributeValue::Unset,
                };
                !v.get(reg.position(c.attribute(), &value).unwrap())
            });
            let direct = t
                .constraints
                .iter()
                .all(|c| holds(c, node.get(c.attribute().as_str()).copied()));
            assert_eq!(via_bits, direct);
        }
    }
}

proptest! {
    #[test]
    fn labels_are_monotone(a in 0usize..20_000, b in 0usize..20_000, inc in 1u32..1000) {
        let g = GroupingConfig::new(inc).unwrap();
        let (lo, hi) = (a.min(b), a.max(b));
        let gl = group_label(lo, &g).group();
        let gh = group_label(hi, &g).group();
        if lo > 0 {
            prop_assert!(gl.unwrap() <= gh.unwrap());
        }
    }

    #[test]
    fn extra_constraint_never_adds_nodes(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, inv, _) = random_cluster(&mut rng, 40);
        let t = random_task(&mut rng, 0);
        let extra = random_task(&mut rng, 1);
        let mut both = t.constraints.clone();
        both.extend(extra.constraints);
        prop_assert!(count_suitable(&inv, &TaskConstraintSet::new(2, both)) <= count_suitable(&inv, &t));
    }
}
