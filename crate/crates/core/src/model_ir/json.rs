use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};

use super::{
    ConcatAttrs, Conv2dAttrs, Graph, OpAttrs, OpType, OperatorSpec, Pool2dAttrs, SliceAttrs, TensorInfo,
};

pub const MODEL_SCHEMA: &str = "matcha-model/1";

#[derive(Deserialize)]
struct ModelDoc {
    schema: Option<String>,
    tensors: Vec<TensorInfo>,
    operators: Vec<OperatorDoc>,
}

#[derive(Serialize, Deserialize)]
struct OperatorDoc {
    name: String,
    op_type: String,
    #[serde(default)]
    attrs: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tiles: Option<usize>,
}

fn attrs_from<T: for<'de> Deserialize<'de>>(op: &str, attrs: &Value) -> Result<T> {
    let value = if attrs.is_null() { Value::Object(Map::new()) } else { attrs.clone() };
    serde_json::from_value(value).map_err(|e| Error::Parse(format!("attrs of `{op}`: {e}")))
}

fn no_attrs(op: &str, attrs: &Value) -> Result<()> {
    match attrs {
        Value::Null => Ok(()),
        Value::Object(m) if m.is_empty() => Ok(()),
        other => Err(Error::Parse(format!("attrs of `{op}`: unexpected attributes {other}"))),
    }
}

fn parse_attrs(op: &OperatorDoc) -> Result<OpAttrs> {
    let ty = OpType::parse(&op.op_type).ok_or_else(|| Error::UnknownOpType(op.op_type.clone()))?;
    Ok(match ty {
        OpType::Conv2d => OpAttrs::Conv2d(attrs_from::<Conv2dAttrs>(&op.name, &op.attrs)?),
        OpType::Dense => {
            no_attrs(&op.name, &op.attrs)?;
            OpAttrs::Dense
        }
        OpType::Add => {
            no_attrs(&op.name, &op.attrs)?;
            OpAttrs::Add
        }
        OpType::Relu => {
            no_attrs(&op.name, &op.attrs)?;
            OpAttrs::Relu
        }
        OpType::MaxPool2d => OpAttrs::MaxPool2d(attrs_from::<Pool2dAttrs>(&op.name, &op.attrs)?),
        OpType::Slice => OpAttrs::Slice(attrs_from::<SliceAttrs>(&op.name, &op.attrs)?),
        OpType::Concat => OpAttrs::Concat(attrs_from::<ConcatAttrs>(&op.name, &op.attrs)?),
    })
}

fn attrs_value(attrs: &OpAttrs) -> Value {
    let v = match attrs {
        OpAttrs::Conv2d(a) => serde_json::to_value(a),
        OpAttrs::MaxPool2d(a) => serde_json::to_value(a),
        OpAttrs::Slice(a) => serde_json::to_value(a),
        OpAttrs::Concat(a) => serde_json::to_value(a),
        OpAttrs::Dense | OpAttrs::Add | OpAttrs::Relu => Ok(json!({})),
    };
    v.expect("attribute structs serialize")
}

/// Parses and validates a model document.
pub fn load_model(text: &str) -> Result<Graph> {
    let doc: ModelDoc = serde_json::from_str(text)?;
    match doc.schema.as_deref() {
        Some(MODEL_SCHEMA) => {}
        other => {
            return Err(Error::Schema { found: other.unwrap_or("<missing>").to_string(), expected: MODEL_SCHEMA })
        }
    }
    let specs = doc
        .operators
        .iter()
        .map(|op| {
            Ok(OperatorSpec {
                name: op.name.clone(),
                attrs: parse_attrs(op)?,
                inputs: op.inputs.clone(),
                outputs: op.outputs.clone(),
                tiles: op.tiles,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Graph::new(doc.tensors, specs)
}

impl Graph {
    /// Canonical JSON form: every attribute key is written, tile counts only
    /// when different from one.
    pub fn to_json_value(&self) -> Value {
        let operators: Vec<Value> = self
            .operators()
            .iter()
            .map(|op| {
                let doc = OperatorDoc {
                    name: op.name.clone(),
                    op_type: op.op_type().as_str().to_string(),
                    attrs: attrs_value(&op.attrs),
                    inputs: op.inputs.clone(),
                    outputs: op.outputs.clone(),
                    tiles: (op.tile_count != 1).then_some(op.tile_count),
                };
                serde_json::to_value(doc).expect("operator serializes")
            })
            .collect();
        json!({
            "schema": MODEL_SCHEMA,
            "tensors": self.tensors(),
            "operators": operators,
        })
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(&self.to_json_value()).expect("graph serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CONV_RELU: &str = r#"{
      "schema": "matcha-model/1",
      "tensors": [
        {"name": "x", "shape": [1, 8, 8, 16], "dtype": "f32", "kind": "input"},
        {"name": "w", "shape": [3, 3, 16, 32], "dtype": "f32", "kind": "weight"},
        {"name": "y", "shape": [1, 8, 8, 32], "dtype": "f32", "kind": "intermediate"},
        {"name": "z", "shape": [1, 8, 8, 32], "dtype": "f32", "kind": "output"}
      ],
      "operators": [
        {"name": "conv", "op_type": "conv2d",
         "attrs": {"kernel_h": 3, "kernel_w": 3, "stride_h": 1, "stride_w": 1,
                   "pad_t": 1, "pad_b": 1, "pad_l": 1, "pad_r": 1, "groups": 1},
         "inputs": ["x", "w"], "outputs": ["y"]},
        {"name": "relu", "op_type": "relu", "attrs": {}, "inputs": ["y"], "outputs": ["z"]}
      ]
    }"#;

    #[test]
    fn loads_and_derives() {
        let g = load_model(CONV_RELU).unwrap();
        assert_eq!(g.operators().len(), 2);
        assert_eq!(g.op("conv").unwrap().ops_count, 589_824);
        assert_eq!(g.op("relu").unwrap().ops_count, 2048);
        assert_eq!(g.op("conv").unwrap().tile_axis, super::super::TileAxis::OutputRows);
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let g = load_model(CONV_RELU).unwrap();
        let text = g.to_json_string();
        let g2 = load_model(&text).unwrap();
        assert_eq!(g, g2);
        assert_eq!(text, g2.to_json_string());
    }

    #[test]
    fn schema_is_required() {
        let text = CONV_RELU.replace("\"schema\": \"matcha-model/1\",", "");
        assert!(matches!(load_model(&text), Err(Error::Schema { .. })));
    }

    #[test]
    fn unknown_op_type() {
        let text = CONV_RELU.replace("\"op_type\": \"relu\"", "\"op_type\": \"gelu\"");
        assert_eq!(load_model(&text).unwrap_err(), Error::UnknownOpType("gelu".into()));
    }

    #[test]
    fn unknown_attr_key_rejected() {
        let text = CONV_RELU.replace("\"groups\": 1", "\"groups\": 1, \"dilation\": 2");
        assert!(matches!(load_model(&text), Err(Error::Parse(_))));
    }

    #[test]
    fn malformed_json_is_parse_error() {
        assert!(matches!(load_model("{not json"), Err(Error::Parse(_))));
    }

    #[test]
    fn empty_operator_list() {
        let text = r#"{"schema":"matcha-model/1","tensors":[],"operators":[]}"#;
        assert_eq!(load_model(text).unwrap_err(), Error::EmptyGraph);
    }
}
