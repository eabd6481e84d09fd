use growsched_core::covv::{
    encode_task, encode_task_frozen, AttributeKey, AttributeValue, Constraint, ConstraintOp, CovvVector,
    FeatureRegistry, TaskConstraintSet, ValueToken,
};
use proptest::prelude::*;

const ATTRS: [&str; 3] = ["a0", "a1", "a2"];

/// Constraints as `(op, operand)` on one attribute, and the expected bits.
type EncodingRow = (&'static [(&'static str, &'static str)], [u8; 11]);

fn constraint() -> impl Strategy<Value = Constraint> {
    (
        0..ATTRS.len(),
        0..ConstraintOp::ALL.len(),
        prop::collection::vec(0u8..8, 1..4),
    )
        .prop_map(|(a, o, vals)| {
            let op = ConstraintOp::ALL[o];
            let operands: Vec<ValueToken> = match op {
                ConstraintOp::Present | ConstraintOp::Absent => vec![],
                ConstraintOp::InSet | ConstraintOp::NotInSet => vals.iter().map(|v| v.to_string().into()).collect(),
                _ => vec![vals[0].to_string().into()],
            };
            Constraint::new(AttributeKey::new(ATTRS[a]).unwrap(), op, operands).unwrap()
        })
}

fn task() -> impl Strategy<Value = TaskConstraintSet> {
    prop::collection::vec(constraint(), 0..4).prop_map(|cs| TaskConstraintSet::new(1, cs))
}

/// Independent reading of one constraint against one column value.
fn acceptable(c: &Constraint, value: &AttributeValue) -> bool {
    let v = match value {
        AttributeValue::Unset => {
            return matches!(
                c.op(),
                ConstraintOp::NotEqual | ConstraintOp::NotInSet | ConstraintOp::Absent
            )
        }
        AttributeValue::Value(v) => v.as_str().parse::<i64>().unwrap(),
    };
    let ops: Vec<i64> = c.operands().iter().map(|o| o.as_str().parse().unwrap()).collect();
    match c.op() {
        ConstraintOp::Equal => v == ops[0],
        ConstraintOp::NotEqual => v != ops[0],
        ConstraintOp::LessThan => v < ops[0],
        ConstraintOp::LessOrEqual => v <= ops[0],
        ConstraintOp::GreaterThan => v > ops[0],
        ConstraintOp::GreaterOrEqual => v >= ops[0],
        ConstraintOp::InSet => ops.contains(&v),
        ConstraintOp::NotInSet => !ops.contains(&v),
        ConstraintOp::Present => true,
        ConstraintOp::Absent => false,
    }
}

fn seeded_registry(observed: &[(usize, u8)]) -> FeatureRegistry {
    let mut r = FeatureRegistry::new();
    for &(a, v) in observed {
        r.register_observation(
            &AttributeKey::new(ATTRS[a]).unwrap(),
            &AttributeValue::value(v.to_string()),
        );
    }
    r
}

fn observations() -> impl Strategy<Value = Vec<(usize, u8)>> {
    prop::collection::vec((0..ATTRS.len(), 0u8..10), 0..20)
}

#[test]
fn single_attribute_rows() {
    let am = AttributeKey::new("AM").unwrap();
    let mut r = FeatureRegistry::new();
    for v in 0..10 {
        r.register_observation(&am, &AttributeValue::value(v.to_string()));
    }
    let rows: [EncodingRow; 3] = [
        (&[("GE", "5")], [1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0]),
        (&[("GT", "0")], [1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]),
        (&[("GT", "0"), ("LT", "3")], [1, 1, 0, 0, 1, 1, 1, 1, 1, 1, 1]),
    ];
    for (cons, expected) in rows {
        let t = TaskConstraintSet::new(
            0,
            cons.iter()
                .map(|(op, v)| Constraint::parse("AM", op, &[v]).unwrap())
                .collect(),
        );
        assert_eq!(encode_task(&t, &mut r).to_bits(), expected.to_vec());
    }
}

proptest! {
    #[test]
    fn contradiction_completeness(obs in observations(), t in task()) {
        let mut r = seeded_registry(&obs);
        let v = encode_task(&t, &mut r);
        prop_assert_eq!(v.len(), r.len());
        for (pos, col) in r.columns().iter().enumerate() {
            let rejected = t
                .constraints
                .iter()
                .filter(|c| c.attribute() == &col.attribute)
                .any(|c| !acceptable(c, &col.value));
            prop_assert_eq!(v.get(pos), rejected, "column {}", col);
        }
    }

    #[test]
    fn constraint_order_is_irrelevant(obs in observations(), t in task(), rot in 0usize..4) {
        let mut r = seeded_registry(&obs);
        r.register_task(&t);
        let a = encode_task_frozen(&t, &r);
        let mut cs = t.constraints.clone();
        if !cs.is_empty() {
            let k = rot % cs.len();
            cs.rotate_left(k);
        }
        cs.reverse();
        let b = encode_task_frozen(&TaskConstraintSet::new(1, cs), &r);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn task_is_or_of_constraints(obs in observations(), t in task()) {
        let mut r = seeded_registry(&obs);
        r.register_task(&t);
        let mut acc = encode_task_frozen(&TaskConstraintSet::unconstrained(0), &r);
        for c in &t.constraints {
            acc.or_assign(&encode_task_frozen(&TaskConstraintSet::new(0, vec![c.clone()]), &r));
        }
        prop_assert_eq!(acc, encode_task_frozen(&t, &r));
    }

    #[test]
    fn registry_is_append_only(obs in observations(), tasks in prop::collection::vec(task(), 1..6)) {
        let mut r = seeded_registry(&obs);
        let mut seen: Vec<(String, String)> = Vec::new();
        let mut earlier: Vec<(CovvVector, TaskConstraintSet)> = Vec::new();
        for t in &tasks {
            let v = encode_task(t, &mut r);
            for (pos, col) in r.columns().iter().enumerate() {
                let key = (col.attribute.to_string(), col.value.to_string());
                match seen.get(pos) {
                    Some(prev) => prop_assert_eq!(prev, &key),
                    None => seen.push(key),
                }
            }
            for (old, t_old) in &earlier {
                let now = encode_task_frozen(t_old, &r);
                prop_assert_eq!(&now.truncated(old.len()), old);
            }
            earlier.push((v, t.clone()));
        }
    }

    #[test]
    fn unset_column_precedes_values(obs in observations()) {
        let r = seeded_registry(&obs);
        for a in ATTRS {
            let key = AttributeKey::new(a).unwrap();
            if let Some(&first) = r.attribute_columns(&key).first() {
                prop_assert_eq!(&r.columns()[first].value, &AttributeValue::Unset);
            }
        }
    }
}
