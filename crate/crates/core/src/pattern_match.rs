//! Enumeration of chain-pattern embeddings into an operator graph.

use serde::{Deserialize, Serialize};

use crate::model_ir::{Graph, TensorKind};
use crate::platform::{pattern_supports, Pattern, Platform};

/// One embedding of a catalogue pattern: the operators it covers, in chain order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Match {
    pub id: usize,
    pub pattern: String,
    pub device: String,
    pub nodes: Vec<String>,
}

impl Match {
    pub fn anchor(&self) -> &str {
        &self.nodes[0]
    }

    pub fn covers(&self, op: &str) -> bool {
        self.nodes.iter().any(|n| n == op)
    }
}

/// Follows the unique consumer chain from `anchor` for `len` operators.
///
/// Each interior tensor must be an intermediate with exactly one consumer, and
/// every later chain member must be elementwise over the same tile axis and
/// tile count as the anchor, so one tile range of the anchor maps onto the
/// same range of the whole chain.
fn chain_from(g: &Graph, anchor: usize, len: usize) -> Option<Vec<usize>> {
    let ops = g.operators();
    let head = &ops[anchor];
    let mut chain = vec![anchor];
    while chain.len() < len {
        let last = &ops[*chain.last().expect("non-empty")];
        let out = g.tensor(last.output())?;
        if out.kind != TensorKind::Intermediate {
            return None;
        }
        let consumers = g.consumers(&out.name);
        if consumers.len() != 1 {
            return None;
        }
        let next = &ops[consumers[0]];
        let aligned = next.op_type().is_elementwise()
            && next.tile_axis == head.tile_axis
            && next.tile_extent == head.tile_extent
            && next.tile_count == head.tile_count;
        if !aligned {
            return None;
        }
        chain.push(consumers[0]);
    }
    Some(chain)
}

fn embed(g: &Graph, p: &Pattern, anchor: usize) -> Option<Vec<usize>> {
    let chain = chain_from(g, anchor, p.len())?;
    let ops: Vec<_> = chain.iter().map(|&i| &g.operators()[i]).collect();
    pattern_supports(p, &ops, g).then_some(chain)
}

/// Every embedding of every catalogue pattern, ordered by pattern name then
/// anchor operator name; ids are positions in that order.
pub fn enumerate_matches(g: &Graph, plat: &Platform) -> Vec<Match> {
    let mut patterns: Vec<&Pattern> = plat.patterns.iter().collect();
    patterns.sort_by(|a, b| a.name.cmp(&b.name));
    let mut anchors: Vec<usize> = (0..g.operators().len()).collect();
    anchors.sort_by(|&a, &b| g.operators()[a].name.cmp(&g.operators()[b].name));

    let mut out = Vec::new();
    for p in patterns {
        for &a in &anchors {
            if let Some(chain) = embed(g, p, a) {
                out.push(Match {
                    id: out.len(),
                    pattern: p.name.clone(),
                    device: p.device.clone(),
                    nodes: chain.iter().map(|&i| g.operators()[i].name.clone()).collect(),
                });
            }
        }
    }
    out
}

/// Matches whose image contains `op`.
pub fn matches_covering<'a>(matches: &'a [Match], op: &str) -> Vec<&'a Match> {
    matches.iter().filter(|m| m.covers(op)).collect()
}
