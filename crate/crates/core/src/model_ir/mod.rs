//! Operator-graph IR: tensors, operators, validation and work/tile derivations.
//!
//! Activations are NHWC (or `[N, features]` for dense layers); convolution
//! weights are HWIO, dense weights `[IN, OUT]`. Every validated operator
//! carries its arithmetic operation count and its tile count.

mod json;
mod shape;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use json::{load_model, MODEL_SCHEMA};
pub use shape::{infer_output_shape, op_count};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    /// Half precision. Occupies two bytes in device memory; the interpreter
    /// stores and computes it as `f32`.
    F16,
    I32,
    I8,
}

impl DType {
    pub fn width(self) -> u64 {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F16 => 2,
            DType::I8 => 1,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F16)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Input,
    Weight,
    Intermediate,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub kind: TensorKind,
}

impl TensorInfo {
    pub fn new(name: impl Into<String>, shape: &[usize], dtype: DType, kind: TensorKind) -> Self {
        TensorInfo { name: name.into(), shape: shape.to_vec(), dtype, kind }
    }

    pub fn numel(&self) -> u64 {
        self.shape.iter().map(|&e| e as u64).product()
    }

    pub fn size_bytes(&self) -> u64 {
        self.numel() * self.dtype.width()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OpType {
    Conv2d,
    Dense,
    Add,
    Relu,
    MaxPool2d,
    Slice,
    Concat,
}

impl OpType {
    pub const ALL: [OpType; 7] = [
        OpType::Conv2d,
        OpType::Dense,
        OpType::Add,
        OpType::Relu,
        OpType::MaxPool2d,
        OpType::Slice,
        OpType::Concat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpType::Conv2d => "conv2d",
            OpType::Dense => "dense",
            OpType::Add => "add",
            OpType::Relu => "relu",
            OpType::MaxPool2d => "maxpool2d",
            OpType::Slice => "slice",
            OpType::Concat => "concat",
        }
    }

    pub fn parse(s: &str) -> Option<OpType> {
        OpType::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Row-local operators: output row `r` depends only on input row `r`.
    pub fn is_elementwise(self) -> bool {
        matches!(self, OpType::Add | OpType::Relu)
    }
}

impl std::fmt::Display for OpType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv2dAttrs {
    pub kernel_h: usize,
    pub kernel_w: usize,
    #[serde(default = "one")]
    pub stride_h: usize,
    #[serde(default = "one")]
    pub stride_w: usize,
    #[serde(default)]
    pub pad_t: usize,
    #[serde(default)]
    pub pad_b: usize,
    #[serde(default)]
    pub pad_l: usize,
    #[serde(default)]
    pub pad_r: usize,
    #[serde(default = "one")]
    pub groups: usize,
}

impl Conv2dAttrs {
    pub fn square(kernel: usize, stride: usize, pad: usize) -> Self {
        Conv2dAttrs {
            kernel_h: kernel,
            kernel_w: kernel,
            stride_h: stride,
            stride_w: stride,
            pad_t: pad,
            pad_b: pad,
            pad_l: pad,
            pad_r: pad,
            groups: 1,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pool2dAttrs {
    pub window: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceAttrs {
    pub axis: usize,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatAttrs {
    pub axis: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum OpAttrs {
    Conv2d(Conv2dAttrs),
    Dense,
    Add,
    Relu,
    MaxPool2d(Pool2dAttrs),
    Slice(SliceAttrs),
    Concat(ConcatAttrs),
}

impl OpAttrs {
    pub fn op_type(&self) -> OpType {
        match self {
            OpAttrs::Conv2d(_) => OpType::Conv2d,
            OpAttrs::Dense => OpType::Dense,
            OpAttrs::Add => OpType::Add,
            OpAttrs::Relu => OpType::Relu,
            OpAttrs::MaxPool2d(_) => OpType::MaxPool2d,
            OpAttrs::Slice(_) => OpType::Slice,
            OpAttrs::Concat(_) => OpType::Concat,
        }
    }
}

/// The axis along which an operator is split into tiles. Both variants refer
/// to dimension 1 of the output: rows of an NHWC map, or neurons of `[N, OUT]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TileAxis {
    OutputRows,
    OutputNeurons,
    None,
}

impl TileAxis {
    pub fn dim(self) -> Option<usize> {
        match self {
            TileAxis::None => None,
            _ => Some(1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operator {
    pub name: String,
    pub attrs: OpAttrs,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Arithmetic operation count (two per multiply-accumulate).
    pub ops_count: u64,
    /// Number of tiles the operator is split into for allocation.
    pub tile_count: usize,
    pub tile_axis: TileAxis,
    /// Extent of the tile axis (1 when untileable).
    pub tile_extent: usize,
}

impl Operator {
    pub fn op_type(&self) -> OpType {
        self.attrs.op_type()
    }

    pub fn output(&self) -> &str {
        &self.outputs[0]
    }

    /// Output-axis range `[begin, end)` covered by tiles `[first, last)`.
    pub fn tile_span(&self, first: usize, last: usize) -> (usize, usize) {
        tile_span(self.tile_extent, self.tile_count, first, last)
    }
}

/// Balanced integer split: tile `i` of `tiles` covers `[i*E/T, (i+1)*E/T)`.
pub fn tile_span(extent: usize, tiles: usize, first: usize, last: usize) -> (usize, usize) {
    (first * extent / tiles, last * extent / tiles)
}

/// Default tile axis for an operator given its output rank.
pub fn default_tile_axis(op_type: OpType, out_rank: usize) -> TileAxis {
    match op_type {
        OpType::Conv2d | OpType::MaxPool2d => TileAxis::OutputRows,
        OpType::Dense => TileAxis::OutputNeurons,
        OpType::Add | OpType::Relu => match out_rank {
            4 => TileAxis::OutputRows,
            2 => TileAxis::OutputNeurons,
            _ => TileAxis::None,
        },
        OpType::Slice | OpType::Concat => TileAxis::None,
    }
}

/// Clamps a requested tile count to the operator's tile-axis extent.
pub fn tile_count(op: &Operator, requested: usize) -> Result<usize> {
    let requested = requested.max(1);
    match op.tile_axis {
        TileAxis::None if requested > 1 => Err(Error::NotTileable(op.name.clone())),
        TileAxis::None => Ok(1),
        _ => Ok(requested.min(op.tile_extent)),
    }
}

/// Per-run tile configuration: a default `T` for every tileable operator
/// plus per-operator overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileConfig {
    pub default_tiles: usize,
    #[serde(default)]
    pub overrides: BTreeMap<String, usize>,
}

impl Default for TileConfig {
    fn default() -> Self {
        TileConfig { default_tiles: 16, overrides: BTreeMap::new() }
    }
}

impl TileConfig {
    pub fn uniform(tiles: usize) -> Self {
        TileConfig { default_tiles: tiles, overrides: BTreeMap::new() }
    }

    pub fn with_override(mut self, op: &str, tiles: usize) -> Self {
        self.overrides.insert(op.to_string(), tiles);
        self
    }
}

/// Construction input for one operator; derived fields are filled in by
/// [`Graph::new`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OperatorSpec {
    pub name: String,
    pub attrs: OpAttrs,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub tiles: Option<usize>,
}

impl OperatorSpec {
    pub fn new(name: &str, attrs: OpAttrs, inputs: &[&str], outputs: &[&str]) -> Self {
        OperatorSpec {
            name: name.to_string(),
            attrs,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
            tiles: None,
        }
    }

    pub fn tiles(mut self, tiles: usize) -> Self {
        self.tiles = Some(tiles);
        self
    }
}

impl From<&Operator> for OperatorSpec {
    fn from(op: &Operator) -> Self {
        OperatorSpec {
            name: op.name.clone(),
            attrs: op.attrs.clone(),
            inputs: op.inputs.clone(),
            outputs: op.outputs.clone(),
            tiles: (op.tile_count != 1).then_some(op.tile_count),
        }
    }
}

/// A validated, immutable operator graph.
#[derive(Debug, Clone)]
pub struct Graph {
    tensors: Vec<TensorInfo>,
    tensor_index: HashMap<String, usize>,
    operators: Vec<Operator>,
    op_index: HashMap<String, usize>,
    producer: HashMap<String, usize>,
    consumers: HashMap<String, Vec<usize>>,
    topo: Vec<usize>,
    stage: Vec<usize>,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.tensors == other.tensors && self.operators == other.operators
    }
}

impl Graph {
    /// Validates and derives edges, operation counts, tile axes and stages.
    /// Operators without an explicit tile request get one tile.
    pub fn new(tensors: Vec<TensorInfo>, specs: Vec<OperatorSpec>) -> Result<Graph> {
        if specs.is_empty() {
            return Err(Error::EmptyGraph);
        }
        let mut tensor_index = HashMap::new();
        for (i, t) in tensors.iter().enumerate() {
            if t.name.is_empty() {
                return Err(Error::InvalidModel("tensor with empty name".into()));
            }
            if t.shape.is_empty() || t.shape.contains(&0) {
                return Err(Error::InvalidModel(format!(
                    "tensor `{}` has invalid shape {:?}",
                    t.name, t.shape
                )));
            }
            if tensor_index.insert(t.name.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate tensor `{}`", t.name)));
            }
        }

        let mut op_index = HashMap::new();
        let mut producer = HashMap::new();
        let mut consumers: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, spec) in specs.iter().enumerate() {
            if op_index.insert(spec.name.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate operator `{}`", spec.name)));
            }
            for name in spec.inputs.iter().chain(&spec.outputs) {
                if !tensor_index.contains_key(name) {
                    return Err(Error::DanglingTensor { op: spec.name.clone(), tensor: name.clone() });
                }
            }
            if spec.outputs.len() != 1 {
                return Err(Error::InvalidModel(format!(
                    "operator `{}` must have exactly one output",
                    spec.name
                )));
            }
            for out in &spec.outputs {
                if producer.insert(out.clone(), i).is_some() {
                    return Err(Error::InvalidModel(format!("tensor `{out}` has more than one producer")));
                }
            }
            for inp in &spec.inputs {
                let list = consumers.entry(inp.clone()).or_default();
                if !list.contains(&i) {
                    list.push(i);
                }
            }
        }
        for t in &tensors {
            let produced = producer.contains_key(&t.name);
            match t.kind {
                TensorKind::Input | TensorKind::Weight if produced => {
                    return Err(Error::InvalidModel(format!(
                        "{:?} tensor `{}` must not have a producer",
                        t.kind, t.name
                    )))
                }
                TensorKind::Intermediate | TensorKind::Output if !produced => {
                    return Err(Error::InvalidModel(format!("tensor `{}` has no producer", t.name)))
                }
                _ => {}
            }
        }

        let topo = topo_sort(&specs, &producer)?;

        let mut operators = Vec::with_capacity(specs.len());
        for spec in &specs {
            let shapes: Vec<&TensorInfo> = spec.inputs.iter().map(|n| &tensors[tensor_index[n]]).collect();
            let out = &tensors[tensor_index[&spec.outputs[0]]];
            let expected = infer_output_shape(&spec.name, &spec.attrs, &shapes)?;
            if expected != out.shape {
                return Err(Error::Shape {
                    op: spec.name.clone(),
                    detail: format!("output `{}` declared {:?}, expected {:?}", out.name, out.shape, expected),
                });
            }
            if let Some(t) = shapes.iter().find(|t| t.dtype != out.dtype) {
                return Err(Error::Shape {
                    op: spec.name.clone(),
                    detail: format!("dtype of `{}` differs from output dtype", t.name),
                });
            }
            let ops_count = op_count(&spec.attrs, &shapes, &out.shape);
            let tile_axis = default_tile_axis(spec.attrs.op_type(), out.shape.len());
            let tile_extent = tile_axis.dim().map_or(1, |d| out.shape[d]);
            let mut op = Operator {
                name: spec.name.clone(),
                attrs: spec.attrs.clone(),
                inputs: spec.inputs.clone(),
                outputs: spec.outputs.clone(),
                ops_count,
                tile_count: 1,
                tile_axis,
                tile_extent,
            };
            op.tile_count = tile_count(&op, spec.tiles.unwrap_or(1))?;
            operators.push(op);
        }

        let mut stage = vec![0usize; operators.len()];
        for &i in &topo {
            let level = operators[i]
                .inputs
                .iter()
                .filter_map(|t| producer.get(t))
                .map(|&p| stage[p] + 1)
                .max()
                .unwrap_or(0);
            stage[i] = level;
        }

        Ok(Graph { tensors, tensor_index, operators, op_index, producer, consumers, topo, stage })
    }

    /// Returns a copy with tile counts taken from `cfg` (clamped per operator).
    /// Untileable operators keep one tile unless an override asks for more.
    pub fn with_tiles(&self, cfg: &TileConfig) -> Result<Graph> {
        let specs = self
            .operators
            .iter()
            .map(|op| {
                let mut spec = OperatorSpec::from(op);
                spec.tiles = Some(match cfg.overrides.get(&op.name) {
                    Some(&t) => t,
                    None if op.tile_axis == TileAxis::None => 1,
                    None => cfg.default_tiles,
                });
                spec
            })
            .collect();
        Graph::new(self.tensors.clone(), specs)
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorInfo> {
        self.tensor_index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn operators(&self) -> &[Operator] {
        &self.operators
    }

    pub fn op(&self, name: &str) -> Option<&Operator> {
        self.op_index.get(name).map(|&i| &self.operators[i])
    }

    pub fn op_position(&self, name: &str) -> Option<usize> {
        self.op_index.get(name).copied()
    }

    /// Index of the operator producing `tensor`, if any.
    pub fn producer(&self, tensor: &str) -> Option<usize> {
        self.producer.get(tensor).copied()
    }

    /// Indices of operators reading `tensor`.
    pub fn consumers(&self, tensor: &str) -> &[usize] {
        self.consumers.get(tensor).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Operator indices in a topological order (stable w.r.t. declaration order).
    pub fn topo_order(&self) -> &[usize] {
        &self.topo
    }

    /// Longest-path level of an operator: 0 for operators fed only by graph inputs.
    pub fn stage(&self, op: usize) -> usize {
        self.stage[op]
    }

    pub fn num_stages(&self) -> usize {
        self.stage.iter().max().map_or(0, |s| s + 1)
    }

    /// Producer → consumer edges with the tensor carried.
    pub fn edges(&self) -> Vec<(usize, usize, &str)> {
        let mut edges = Vec::new();
        for (ci, op) in self.operators.iter().enumerate() {
            for t in &op.inputs {
                if let Some(&pi) = self.producer.get(t) {
                    if !edges.iter().any(|&(p, c, n)| p == pi && c == ci && n == t.as_str()) {
                        edges.push((pi, ci, t.as_str()));
                    }
                }
            }
        }
        edges
    }

    pub fn input_tensors(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.iter().filter(|t| t.kind == TensorKind::Input)
    }

    pub fn weight_tensors(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.iter().filter(|t| t.kind == TensorKind::Weight)
    }

    pub fn output_tensors(&self) -> impl Iterator<Item = &TensorInfo> {
        self.tensors.iter().filter(|t| t.kind == TensorKind::Output)
    }

    pub fn total_ops(&self) -> u64 {
        self.operators.iter().map(|o| o.ops_count).sum()
    }

    pub fn specs(&self) -> Vec<OperatorSpec> {
        self.operators.iter().map(OperatorSpec::from).collect()
    }
}

fn topo_sort(specs: &[OperatorSpec], producer: &HashMap<String, usize>) -> Result<Vec<usize>> {
    let n = specs.len();
    let mut indegree = vec![0usize; n];
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, spec) in specs.iter().enumerate() {
        let mut preds: Vec<usize> = spec.inputs.iter().filter_map(|t| producer.get(t).copied()).collect();
        preds.sort_unstable();
        preds.dedup();
        indegree[i] = preds.len();
        for p in preds {
            succ[p].push(i);
        }
    }
    // Kahn's algorithm, always releasing the lowest declared index first.
    let mut ready: BTreeSet<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &s in &succ[i] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.insert(s);
            }
        }
    }
    if order.len() != n {
        let stuck = (0..n).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(Error::Cycle(specs[stuck].name.clone()));
    }
    Ok(order)
}

/// Small fluent helper for assembling graphs in code.
#[derive(Debug, Default, Clone)]
pub struct GraphBuilder {
    tensors: Vec<TensorInfo>,
    specs: Vec<OperatorSpec>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tensor(mut self, name: &str, shape: &[usize], dtype: DType, kind: TensorKind) -> Self {
        self.tensors.push(TensorInfo::new(name, shape, dtype, kind));
        self
    }

    pub fn op(mut self, name: &str, attrs: OpAttrs, inputs: &[&str], output: &str) -> Self {
        self.specs.push(OperatorSpec::new(name, attrs, inputs, &[output]));
        self
    }

    pub fn build(self) -> Result<Graph> {
        Graph::new(self.tensors, self.specs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv_graph() -> Graph {
        GraphBuilder::new()
            .tensor("x", &[1, 8, 8, 16], DType::F32, TensorKind::Input)
            .tensor("w", &[3, 3, 16, 32], DType::F32, TensorKind::Weight)
            .tensor("y", &[1, 8, 8, 32], DType::F32, TensorKind::Intermediate)
            .tensor("z", &[1, 8, 8, 32], DType::F32, TensorKind::Output)
            .op("conv", OpAttrs::Conv2d(Conv2dAttrs::square(3, 1, 1)), &["x", "w"], "y")
            .op("relu", OpAttrs::Relu, &["y"], "z")
            .build()
            .unwrap()
    }

    #[test]
    fn conv_ops_count_is_twice_macs() {
        let g = conv_graph();
        assert_eq!(g.op("conv").unwrap().ops_count, 2 * (3 * 3 * 16 * 32 * 8 * 8));
        assert_eq!(g.op("conv").unwrap().ops_count, 589_824);
    }

    #[test]
    fn relu_counts_one_op_per_element_and_one_edge() {
        let g = conv_graph();
        assert_eq!(g.op("relu").unwrap().ops_count, 2048);
        assert_eq!(g.edges(), vec![(0, 1, "y")]);
        assert_eq!(g.stage(0), 0);
        assert_eq!(g.stage(1), 1);
    }

    #[test]
    fn size_bytes_uses_dtype_width() {
        let t = TensorInfo::new("t", &[2, 3, 4], DType::F16, TensorKind::Input);
        assert_eq!(t.size_bytes(), 48);
        let t = TensorInfo::new("t", &[5], DType::I8, TensorKind::Input);
        assert_eq!(t.size_bytes(), 5);
    }

    #[test]
    fn empty_graph_rejected() {
        assert_eq!(Graph::new(vec![], vec![]).unwrap_err(), Error::EmptyGraph);
    }

    #[test]
    fn cycle_detected() {
        let err = GraphBuilder::new()
            .tensor("a", &[1, 4], DType::F32, TensorKind::Intermediate)
            .tensor("b", &[1, 4], DType::F32, TensorKind::Intermediate)
            .op("r1", OpAttrs::Relu, &["b"], "a")
            .op("r2", OpAttrs::Relu, &["a"], "b")
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Cycle(_)));
    }

    #[test]
    fn dangling_reference_detected() {
        let err = GraphBuilder::new()
            .tensor("a", &[1, 4], DType::F32, TensorKind::Input)
            .op("r1", OpAttrs::Relu, &["missing"], "a")
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::DanglingTensor { .. }));
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let err = GraphBuilder::new()
            .tensor("x", &[1, 8, 8, 8], DType::F32, TensorKind::Input)
            .tensor("w", &[3, 3, 16, 32], DType::F32, TensorKind::Weight)
            .tensor("y", &[1, 8, 8, 32], DType::F32, TensorKind::Output)
            .op("conv", OpAttrs::Conv2d(Conv2dAttrs::square(3, 1, 1)), &["x", "w"], "y")
            .build()
            .unwrap_err();
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn tile_count_clamps_and_rejects_untileable() {
        let g = conv_graph().with_tiles(&TileConfig::uniform(16)).unwrap();
        let conv = g.op("conv").unwrap();
        assert_eq!(conv.tile_count, 8); // only 8 output rows
        assert_eq!(tile_count(conv, 16).unwrap(), 8);
        assert_eq!(tile_count(conv, 3).unwrap(), 3);

        let g = GraphBuilder::new()
            .tensor("x", &[1, 16, 4, 4], DType::F32, TensorKind::Input)
            .tensor("s", &[1, 8, 4, 4], DType::F32, TensorKind::Output)
            .op("sl", OpAttrs::Slice(SliceAttrs { axis: 1, begin: 0, end: 8 }), &["x"], "s")
            .build()
            .unwrap();
        let sl = g.op("sl").unwrap();
        assert_eq!(tile_count(sl, 1).unwrap(), 1);
        assert_eq!(tile_count(sl, 4).unwrap_err(), Error::NotTileable("sl".into()));
    }

    #[test]
    fn balanced_tile_spans_partition_the_extent() {
        for extent in 1..30 {
            for tiles in 1..=extent {
                let mut next = 0;
                for i in 0..tiles {
                    let (lo, hi) = tile_span(extent, tiles, i, i + 1);
                    assert_eq!(lo, next);
                    assert!(hi > lo);
                    next = hi;
                }
                assert_eq!(next, extent);
            }
        }
    }
}
