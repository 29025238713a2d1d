use serde_json::{Map, Value};

/// Fields of a site clinical record that may be shared, as dotted paths. `[]` descends into
/// every element of an array.
pub const DEFAULT_WHITELIST: &[&str] = &[
    "pseudonym",
    "episodes[].episode_ref",
    "episodes[].study_uid",
    "episodes[].study_date",
    "episodes[].modality",
    "episodes[].outcome",
    "episodes[].outcome_date",
    "episodes[].revised_from",
    "demographics_allowed.year_of_birth",
];

#[derive(Default)]
struct Node {
    leaf: bool,
    array: bool,
    children: std::collections::BTreeMap<String, Node>,
}

fn build(paths: &[String]) -> Node {
    let mut root = Node::default();
    for p in paths {
        let mut n = &mut root;
        for seg in p.split('.') {
            let (name, array) = match seg.strip_suffix("[]") {
                Some(s) => (s, true),
                None => (seg, false),
            };
            n = n.children.entry(name.to_string()).or_default();
            n.array |= array;
        }
        n.leaf = true;
    }
    root
}

fn prune(v: &Value, node: &Node) -> Option<Value> {
    if node.leaf {
        return Some(v.clone());
    }
    match v {
        Value::Array(items) if node.array => Some(Value::Array(
            items.iter().filter_map(|i| prune_object(i, node)).collect(),
        )),
        Value::Object(_) if !node.array => prune_object(v, node),
        _ => None,
    }
}

fn prune_object(v: &Value, node: &Node) -> Option<Value> {
    let Value::Object(obj) = v else { return None };
    let mut out = Map::new();
    for (k, child) in &node.children {
        if let Some(x) = obj.get(k).and_then(|x| prune(x, child)) {
            out.insert(k.clone(), x);
        }
    }
    Some(Value::Object(out))
}

/// Keeps only whitelisted paths. Anything not named (including unexpected fields a site
/// adds) is dropped.
pub fn filter_record(record: &Value, whitelist: &[String]) -> Value {
    prune_object(record, &build(whitelist)).unwrap_or(Value::Object(Map::new()))
}
