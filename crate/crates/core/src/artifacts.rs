//! JSON artifacts exchanged between pipeline stages and the command line.
//! Every document carries `schema` and `version` fields.

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::device_map::Mapping;
use crate::error::{Error, Result};
use crate::model_ir::{Graph, TileConfig};
use crate::pattern_match::Match;
use crate::rational;
use crate::rewrite::{load_tiled, RewriteReport, TiledGraph};
use crate::sched_mem::{Plan, ValidationReport};
use crate::sim_exec::Timeline;
use crate::tile_alloc::TileAssignment;

pub const ASSIGNMENT_SCHEMA: &str = "matcha-assignment/1";
pub const PLAN_SCHEMA: &str = "matcha-plan/1";
pub const TIMELINE_SCHEMA: &str = "matcha-timeline/1";
pub const MATCHES_SCHEMA: &str = "matcha-matches/1";
pub const MAPPING_SCHEMA: &str = "matcha-mapping/1";
pub const REPORT_SCHEMA: &str = "matcha-report/1";

/// Adds `schema` and `version` to a JSON object.
pub fn stamp(schema: &str, value: Value) -> Value {
    let mut obj = match value {
        Value::Object(m) => m,
        other => {
            let mut m = Map::new();
            m.insert("data".into(), other);
            m
        }
    };
    obj.insert("schema".into(), Value::String(schema.to_string()));
    obj.insert("version".into(), Value::String(crate::VERSION.to_string()));
    Value::Object(obj)
}

/// Pretty-printed JSON with a trailing newline.
pub fn render(value: &Value) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("JSON values serialize");
    s.push('\n');
    s
}

fn check_schema(v: &Value, expected: &'static str) -> Result<()> {
    match v.get("schema").and_then(Value::as_str) {
        Some(s) if s == expected => Ok(()),
        other => Err(Error::Schema { found: other.unwrap_or("<missing>").to_string(), expected }),
    }
}

fn load_stamped<T: DeserializeOwned>(text: &str, schema: &'static str) -> Result<T> {
    let v: Value = serde_json::from_str(text)?;
    check_schema(&v, schema)?;
    serde_json::from_value(v).map_err(|e| Error::Parse(format!("{schema}: {e}")))
}

fn to_value<T: Serialize>(x: &T) -> Value {
    serde_json::to_value(x).expect("artifact serializes")
}

pub fn matches_json(matches: &[Match]) -> Value {
    stamp(MATCHES_SCHEMA, json!({ "matches": matches }))
}

pub fn assignment_json(g: &Graph, tiles: &TileConfig, matches: &[Match], a: &TileAssignment) -> Value {
    let entries: Vec<Value> = matches
        .iter()
        .map(|m| {
            json!({
                "id": m.id,
                "pattern": m.pattern,
                "device": m.device,
                "nodes": m.nodes,
                "tiles": a.tiles[m.id],
            })
        })
        .collect();
    let loads: Map<String, Value> = a
        .per_device_load
        .iter()
        .map(|(d, l)| (d.clone(), json!({ "cycles": rational::to_f64(l), "exact": rational::exact_string(l) })))
        .collect();
    let op_tiles: Map<String, Value> = g.operators().iter().map(|o| (o.name.clone(), json!(o.tile_count))).collect();
    stamp(
        ASSIGNMENT_SCHEMA,
        json!({
            "objective_cycles": rational::to_f64(&a.objective),
            "objective_exact": rational::exact_string(&a.objective),
            "proof": a.proof,
            "per_device_load": loads,
            "tile_config": tiles,
            "operator_tiles": op_tiles,
            "matches": entries,
        }),
    )
}

/// Tile counts per operator and per match id from an assignment artifact.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentDoc {
    pub operator_tiles: Vec<(String, usize)>,
    pub matches: Vec<(usize, String, Vec<String>, usize)>,
}

pub fn load_assignment(text: &str) -> Result<AssignmentDoc> {
    let v: Value = serde_json::from_str(text)?;
    check_schema(&v, ASSIGNMENT_SCHEMA)?;
    let bad = |what: &str| Error::Parse(format!("{ASSIGNMENT_SCHEMA}: malformed {what}"));
    let operator_tiles = v
        .get("operator_tiles")
        .and_then(Value::as_object)
        .ok_or_else(|| bad("operator_tiles"))?
        .iter()
        .map(|(k, t)| Ok((k.clone(), t.as_u64().ok_or_else(|| bad("operator_tiles"))? as usize)))
        .collect::<Result<_>>()?;
    let matches = v
        .get("matches")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("matches"))?
        .iter()
        .map(|m| {
            let id = m.get("id").and_then(Value::as_u64).ok_or_else(|| bad("match id"))? as usize;
            let pattern = m.get("pattern").and_then(Value::as_str).ok_or_else(|| bad("match pattern"))?.to_string();
            let nodes: Vec<String> = serde_json::from_value(m.get("nodes").cloned().unwrap_or(Value::Null)).map_err(|_| bad("match nodes"))?;
            let tiles = m.get("tiles").and_then(Value::as_u64).ok_or_else(|| bad("match tiles"))? as usize;
            Ok((id, pattern, nodes, tiles))
        })
        .collect::<Result<_>>()?;
    Ok(AssignmentDoc { operator_tiles, matches })
}

pub fn tiled_json(tg: &TiledGraph) -> Value {
    let mut v = tg.to_json_value();
    v["version"] = Value::String(crate::VERSION.to_string());
    v
}

pub fn load_tiled_graph(text: &str) -> Result<TiledGraph> {
    load_tiled(text)
}

pub fn plan_json(p: &Plan) -> Value {
    stamp(PLAN_SCHEMA, to_value(p))
}

pub fn load_plan(text: &str) -> Result<Plan> {
    load_stamped(text, PLAN_SCHEMA)
}

pub fn timeline_json(t: &Timeline) -> Value {
    stamp(TIMELINE_SCHEMA, to_value(t))
}

pub fn load_timeline(text: &str) -> Result<Timeline> {
    load_stamped(text, TIMELINE_SCHEMA)
}

pub fn mappings_json(ms: &[Mapping]) -> Value {
    stamp(MAPPING_SCHEMA, json!({ "mappings": ms }))
}

pub fn report_json(validation: &ValidationReport, rewrite: Option<&RewriteReport>, passed: bool) -> Value {
    stamp(
        REPORT_SCHEMA,
        json!({
            "passed": passed,
            "validation": validation,
            "rewrite": rewrite.map(RewriteReport::to_json_value),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{run_end_to_end, RunConfig};
    use crate::platform::reference_platform;
    use crate::model_ir::{DType, GraphBuilder, OpAttrs, TensorKind};

    #[test]
    fn artifacts_round_trip_with_schema_and_version() {
        let g = GraphBuilder::new()
            .tensor("x", &[4, 32], DType::F32, TensorKind::Input)
            .tensor("w", &[32, 16], DType::F32, TensorKind::Weight)
            .tensor("y", &[4, 16], DType::F32, TensorKind::Output)
            .op("fc", OpAttrs::Dense, &["x", "w"], "y")
            .build()
            .unwrap();
        let out = run_end_to_end(&g, &reference_platform(), &RunConfig::default()).unwrap();
        let pj = plan_json(&out.plan);
        assert_eq!(pj["schema"], PLAN_SCHEMA);
        assert_eq!(pj["version"], crate::VERSION);
        assert_eq!(load_plan(&render(&pj)).unwrap(), out.plan);
        let tj = timeline_json(&out.timeline);
        assert_eq!(load_timeline(&render(&tj)).unwrap(), out.timeline);
        let tg = load_tiled_graph(&render(&tiled_json(&out.tiled))).unwrap();
        assert_eq!(tg, out.tiled);
        let aj = assignment_json(&out.graph, &RunConfig::default().tiles, &out.matches, &out.assignment);
        let doc = load_assignment(&render(&aj)).unwrap();
        assert_eq!(doc.matches.len(), out.matches.len());
        assert!(load_plan(&render(&tj)).is_err());
    }
}
