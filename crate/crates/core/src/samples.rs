//! Bundled flows used by tests, examples and the CLI.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::flow::{parse_flow, Condition, DialogFlow, EntityDef, FlowEdge, FlowNode, NodeKind, SCHEMA_VERSION};

/// Two questions in series about font size.
pub const FONTS_MINI: &str = include_str!("../flows/fonts-mini.json");

/// Three support topics behind a shared "did that help" question that loops back.
pub const SUPPORT: &str = include_str!("../flows/support.json");

pub fn fonts_mini() -> DialogFlow {
    parse_flow(FONTS_MINI.as_bytes()).expect("bundled flow is valid")
}

pub fn support() -> DialogFlow {
    parse_flow(SUPPORT.as_bytes()).expect("bundled flow is valid")
}

/// A random valid flow of at most `max_nodes` nodes (at least 2), for
/// property tests. Messages have one `always` edge and questions ask their own
/// enum entity with `option` edges. Forward edges run to a later node a few
/// steps ahead, and the last node is an end, so every node can finish. With
/// `cyclic`, some questions get an extra `again` option back to an earlier
/// node. Nodes unreachable from the start are dropped.
pub fn random_flow(seed: u64, max_nodes: usize, cyclic: bool) -> DialogFlow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(2..=max_nodes.max(2));
    let name = |i: usize| format!("n{i:02}");
    let near = |rng: &mut ChaCha8Rng, i: usize| rng.gen_range(i + 1..=(i + 3).min(n - 1));
    let mut kinds = Vec::new();
    let mut entities = Vec::new();
    let mut edges = Vec::new();
    for i in 0..n {
        if i == n - 1 || (i > 0 && rng.gen_bool(0.08)) {
            kinds.push(NodeKind::End);
            continue;
        }
        if rng.gen_bool(0.6) {
            let entity = format!("e{i}");
            let mut values: Vec<String> = (0..rng.gen_range(2..=3)).map(|v| format!("v{v}")).collect();
            let mut answered = false;
            for value in &values {
                if rng.gen_bool(0.8) || (!answered && value == values.last().unwrap()) {
                    let to = near(&mut rng, i);
                    edges.push(FlowEdge::new(name(i), name(to), Condition::option(&entity, value)));
                    answered = true;
                }
            }
            if cyclic && i > 0 && rng.gen_bool(0.3) {
                let to = rng.gen_range(0..i);
                edges.push(FlowEdge::new(name(i), name(to), Condition::option(&entity, "again")));
                values.push("again".into());
            }
            kinds.push(NodeKind::Question { text: format!("Question {seed}.{i}?"), entity: entity.clone() });
            entities.push(EntityDef::enumeration(entity, values));
        } else {
            let to = near(&mut rng, i);
            edges.push(FlowEdge::new(name(i), name(to), Condition::Always));
            kinds.push(NodeKind::Message { text: format!("Message {seed}.{i}.") });
        }
    }
    let mut reachable = BTreeSet::from([name(0)]);
    let mut queue = vec![name(0)];
    while let Some(from) = queue.pop() {
        for e in edges.iter().filter(|e| e.from == from) {
            if reachable.insert(e.to.clone()) {
                queue.push(e.to.clone());
            }
        }
    }
    let nodes = kinds
        .into_iter()
        .enumerate()
        .map(|(i, kind)| FlowNode { id: name(i), kind })
        .filter(|node| reachable.contains(&node.id))
        .collect();
    edges.retain(|e| reachable.contains(&e.from));
    entities.retain(|d| reachable.contains(&format!("n{:0>2}", &d.name[1..])));
    DialogFlow {
        name: format!("random-{seed}"),
        schema_version: SCHEMA_VERSION,
        start: name(0),
        entities,
        nodes,
        edges,
    }
}
