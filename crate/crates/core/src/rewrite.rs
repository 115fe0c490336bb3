//! Graph rewriting according to a tile assignment: per-match tile ranges,
//! fused supernodes, halo-aware input slices, and output reassembly.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model_ir::{
    load_model, ConcatAttrs, DType, Graph, OpAttrs, OpType, OperatorSpec, SliceAttrs, TensorInfo, TensorKind,
};
use crate::pattern_match::Match;
use crate::sim_exec::{interpret, TensorValue};

/// Rows (or neurons) of one original operator executed by a supernode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpRange {
    pub op: String,
    pub tiled_op: String,
    pub begin: usize,
    pub end: usize,
}

/// One contiguous tile run of an instantiated match.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuperNode {
    pub name: String,
    pub match_id: usize,
    pub pattern: String,
    pub device: String,
    /// Tile indices `[first, last)` on the tile axis of every covered operator.
    pub tile_range: (usize, usize),
    pub ranges: Vec<OpRange>,
    /// Operators of the tiled graph executed by this supernode, in chain order.
    pub inner_ops: Vec<String>,
    /// Tensors read from outside the supernode (weights included).
    pub inputs: Vec<String>,
    /// Tensors produced for consumers outside the supernode or as graph outputs.
    pub outputs: Vec<String>,
}

/// A slice or concat inserted by the rewrite.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Helper {
    pub op: String,
    pub kind: OpType,
    /// Views along the neuron axis move no data.
    pub alias: bool,
    pub bytes: u64,
}

/// A weight slice laid out offline: `source[.., begin..end]` along `axis`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DerivedWeight {
    pub name: String,
    pub source: String,
    pub axis: usize,
    pub begin: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TiledGraph {
    pub graph: Graph,
    pub supernodes: Vec<SuperNode>,
    pub helpers: Vec<Helper>,
    pub derived_weights: Vec<DerivedWeight>,
}

#[derive(Serialize, Deserialize)]
struct Provenance {
    supernodes: Vec<SuperNode>,
    helpers: Vec<Helper>,
    derived_weights: Vec<DerivedWeight>,
}

impl TiledGraph {
    pub fn supernode(&self, name: &str) -> Option<&SuperNode> {
        self.supernodes.iter().find(|s| s.name == name)
    }

    pub fn helper(&self, op: &str) -> Option<&Helper> {
        self.helpers.iter().find(|h| h.op == op)
    }

    /// Model-schema JSON plus a `provenance` block.
    pub fn to_json_value(&self) -> Value {
        let mut v = self.graph.to_json_value();
        let prov = Provenance {
            supernodes: self.supernodes.clone(),
            helpers: self.helpers.clone(),
            derived_weights: self.derived_weights.clone(),
        };
        v["provenance"] = serde_json::to_value(prov).expect("provenance serializes");
        v
    }

    /// Adds the derived weight slices to a weight map keyed by original names.
    pub fn expand_weights(&self, weights: &BTreeMap<String, TensorValue>) -> Result<BTreeMap<String, TensorValue>> {
        let mut out = weights.clone();
        for d in &self.derived_weights {
            let src = weights.get(&d.source).ok_or_else(|| Error::MissingInput(d.source.clone()))?;
            out.insert(d.name.clone(), src.slice(d.axis, d.begin, d.end)?);
        }
        Ok(out)
    }
}

/// Parses a tiled-graph artifact.
pub fn load_tiled(text: &str) -> Result<TiledGraph> {
    let graph = load_model(text)?;
    let v: Value = serde_json::from_str(text)?;
    let prov: Provenance = serde_json::from_value(v.get("provenance").cloned().unwrap_or(Value::Null))
        .map_err(|e| Error::Parse(format!("provenance: {e}")))?;
    let tg = TiledGraph {
        graph,
        supernodes: prov.supernodes,
        helpers: prov.helpers,
        derived_weights: prov.derived_weights,
    };
    let mut owned: HashSet<&str> = HashSet::new();
    for s in &tg.supernodes {
        for op in &s.inner_ops {
            if tg.graph.op(op).is_none() || !owned.insert(op) {
                return Err(Error::InvalidModel(format!("supernode `{}` lists bad operator `{op}`", s.name)));
            }
        }
    }
    for h in &tg.helpers {
        if tg.graph.op(&h.op).is_none() || !owned.insert(&h.op) {
            return Err(Error::InvalidModel(format!("bad helper operator `{}`", h.op)));
        }
    }
    if owned.len() != tg.graph.operators().len() {
        return Err(Error::InvalidModel("operators missing from provenance".into()));
    }
    Ok(tg)
}

fn axis_len(t: &TensorInfo) -> usize {
    if t.shape.len() >= 2 {
        t.shape[1]
    } else {
        1
    }
}

fn with_axis(shape: &[usize], len: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[1] = len;
    s
}

struct Builder<'g> {
    g: &'g Graph,
    tensors: Vec<TensorInfo>,
    tensor_pos: HashMap<String, usize>,
    specs: Vec<OperatorSpec>,
    /// Produced original tensor -> pieces `(begin, end, tiled name)` sorted by begin.
    pieces: HashMap<String, Vec<(usize, usize, String)>>,
    cache: HashMap<(String, usize, usize), String>,
    helpers: Vec<Helper>,
    derived: Vec<DerivedWeight>,
}

impl<'g> Builder<'g> {
    fn original(&self, name: &str) -> &'g TensorInfo {
        self.g.tensor(name).expect("validated graph")
    }

    fn use_original(&mut self, name: &str) -> String {
        if !self.tensor_pos.contains_key(name) {
            self.tensor_pos.insert(name.to_string(), self.tensors.len());
            self.tensors.push(self.original(name).clone());
        }
        name.to_string()
    }

    fn new_tensor(&mut self, name: String, shape: Vec<usize>, dtype: DType, kind: TensorKind) -> Result<String> {
        if self.tensor_pos.contains_key(&name) {
            return Err(Error::InvalidModel(format!("generated tensor name `{name}` collides")));
        }
        self.tensor_pos.insert(name.clone(), self.tensors.len());
        self.tensors.push(TensorInfo::new(name.clone(), &shape, dtype, kind));
        Ok(name)
    }

    fn tensor(&self, name: &str) -> &TensorInfo {
        &self.tensors[self.tensor_pos[name]]
    }

    fn helper_op(&mut self, kind: OpType, attrs: OpAttrs, inputs: Vec<String>, out: &str) {
        let info = self.tensor(out);
        let alias = info.shape.len() == 2;
        let bytes = info.size_bytes();
        let name = format!("{}:{out}", kind.as_str());
        self.specs.push(OperatorSpec { name: name.clone(), attrs, inputs, outputs: vec![out.to_string()], tiles: None });
        self.helpers.push(Helper { op: name, kind, alias, bytes });
    }

    fn slice(&mut self, src: &str, begin: usize, end: usize, out: String) -> Result<String> {
        let info = self.tensor(src).clone();
        let out = self.new_tensor(out, with_axis(&info.shape, end - begin), info.dtype, TensorKind::Intermediate)?;
        self.helper_op(OpType::Slice, OpAttrs::Slice(SliceAttrs { axis: 1, begin, end }), vec![src.to_string()], &out);
        Ok(out)
    }

    fn piece_name(t: &str, lo: usize, hi: usize) -> String {
        format!("{t}#r{lo}_{hi}")
    }

    /// Tiled tensor holding rows `[lo, hi)` of original tensor `t`.
    fn provide(&mut self, t: &str, lo: usize, hi: usize) -> Result<String> {
        let key = (t.to_string(), lo, hi);
        if let Some(n) = self.cache.get(&key) {
            return Ok(n.clone());
        }
        let info = self.original(t);
        let extent = axis_len(info);
        let pieces = match self.pieces.get(t) {
            Some(p) => p.clone(),
            None => vec![(0, extent, self.use_original(t))],
        };
        let name = if let Some((_, _, n)) = pieces.iter().find(|p| p.0 == lo && p.1 == hi) {
            n.clone()
        } else if let Some((plo, _, n)) = pieces.iter().find(|p| p.0 <= lo && hi <= p.1) {
            self.slice(&n.clone(), lo - plo, hi - plo, Self::piece_name(t, lo, hi))?
        } else {
            let mut parts = Vec::new();
            for (plo, phi, _) in pieces.iter().filter(|p| p.0 < hi && lo < p.1) {
                parts.push(self.provide(t, lo.max(*plo), hi.min(*phi))?);
            }
            let (out, kind) = if (lo, hi) == (0, extent) {
                (t.to_string(), info.kind)
            } else {
                (Self::piece_name(t, lo, hi), TensorKind::Intermediate)
            };
            let out = self.new_tensor(out, with_axis(&info.shape, hi - lo), info.dtype, kind)?;
            self.helper_op(OpType::Concat, OpAttrs::Concat(ConcatAttrs { axis: 1 }), parts, &out);
            out
        };
        self.cache.insert(key, name.clone());
        Ok(name)
    }

    fn derived_weight(&mut self, w: &str, lo: usize, hi: usize) -> Result<String> {
        let name = format!("{w}#c{lo}_{hi}");
        if !self.tensor_pos.contains_key(&name) {
            let info = self.original(w);
            self.new_tensor(name.clone(), with_axis(&info.shape, hi - lo), info.dtype, TensorKind::Weight)?;
            self.derived.push(DerivedWeight { name: name.clone(), source: w.to_string(), axis: 1, begin: lo, end: hi });
        }
        Ok(name)
    }

    /// Emits operator `u` restricted to output rows `[lo, hi)`; returns the tiled op name.
    fn emit(&mut self, u: usize, lo: usize, hi: usize, first: usize, last: usize) -> Result<String> {
        let op = &self.g.operators()[u];
        let full = (lo, hi) == (0, op.tile_extent) || op.tile_count == 1;
        let (name, out_name) = if full {
            (op.name.clone(), op.output().to_string())
        } else {
            (format!("{}#t{first}_{last}", op.name), Self::piece_name(op.output(), lo, hi))
        };
        let out_info = self.original(op.output());
        let mut attrs = op.attrs.clone();
        let inputs = match &op.attrs {
            _ if full => {
                let mut v = Vec::new();
                for t in &op.inputs {
                    let e = axis_len(self.original(t));
                    v.push(self.provide(t, 0, e)?);
                }
                v
            }
            OpAttrs::Conv2d(a) => {
                let x = self.original(&op.inputs[0]);
                let h = x.shape[1] as isize;
                let start = (lo * a.stride_h) as isize - a.pad_t as isize;
                let end = ((hi - 1) * a.stride_h) as isize - a.pad_t as isize + a.kernel_h as isize;
                let (in_lo, in_hi) = (start.max(0), end.min(h));
                if in_lo >= in_hi {
                    return Err(Error::InvalidModel(format!("tile of `{}` reads only padding", op.name)));
                }
                let mut b = a.clone();
                b.pad_t = (in_lo - start) as usize;
                b.pad_b = (end - in_hi) as usize;
                attrs = OpAttrs::Conv2d(b);
                vec![self.provide(&op.inputs[0], in_lo as usize, in_hi as usize)?, self.use_original(&op.inputs[1])]
            }
            OpAttrs::MaxPool2d(a) => {
                let x = self.original(&op.inputs[0]);
                let in_hi = ((hi - 1) * a.stride + a.window).min(x.shape[1]);
                vec![self.provide(&op.inputs[0], lo * a.stride, in_hi)?]
            }
            OpAttrs::Dense => {
                let e = axis_len(self.original(&op.inputs[0]));
                vec![self.provide(&op.inputs[0], 0, e)?, self.derived_weight(&op.inputs[1], lo, hi)?]
            }
            OpAttrs::Add | OpAttrs::Relu => {
                let mut v = Vec::new();
                for t in &op.inputs {
                    v.push(self.provide(t, lo, hi)?);
                }
                v
            }
            OpAttrs::Slice(_) | OpAttrs::Concat(_) => return Err(Error::NotTileable(op.name.clone())),
        };
        let out = if full {
            self.use_original(&out_name)
        } else {
            self.new_tensor(out_name, with_axis(&out_info.shape, hi - lo), out_info.dtype, TensorKind::Intermediate)?
        };
        let (lo, hi) = if full { (0, axis_len(out_info)) } else { (lo, hi) };
        self.pieces.entry(op.output().to_string()).or_default().push((lo, hi, out.clone()));
        self.specs.push(OperatorSpec { name: name.clone(), attrs, inputs, outputs: vec![out], tiles: None });
        Ok(name)
    }
}

/// Rewrites `g` for the tile counts `tiles` (indexed by match id).
pub fn apply_assignment(g: &Graph, matches: &[Match], tiles: &[usize]) -> Result<TiledGraph> {
    if tiles.len() != matches.len() {
        return Err(Error::UnknownMatch(tiles.len().min(matches.len())));
    }
    let ops = g.operators();
    let mut nodes: Vec<Vec<usize>> = Vec::with_capacity(matches.len());
    for m in matches {
        let idx = m
            .nodes
            .iter()
            .map(|n| g.op_position(n).ok_or_else(|| Error::InvalidModel(format!("match {} names unknown op `{n}`", m.id))))
            .collect::<Result<Vec<_>>>()?;
        nodes.push(idx);
    }
    let mut covering: Vec<Vec<usize>> = vec![Vec::new(); ops.len()];
    for (id, ns) in nodes.iter().enumerate() {
        if tiles[id] > 0 {
            for &u in ns {
                covering[u].push(id);
            }
        }
    }
    for (u, op) in ops.iter().enumerate() {
        let assigned: usize = covering[u].iter().map(|&m| tiles[m]).sum();
        if assigned != op.tile_count {
            return Err(Error::Conservation { op: op.name.clone(), assigned, expected: op.tile_count });
        }
    }

    // Tile indices per match, fixed at its first operator in topological order.
    let mut taken: Vec<Vec<bool>> = ops.iter().map(|op| vec![false; op.tile_count]).collect();
    let mut indices: Vec<Option<Vec<usize>>> = vec![None; matches.len()];
    for &u in g.topo_order() {
        let mut fresh: Vec<usize> = covering[u].iter().copied().filter(|&m| indices[m].is_none()).collect();
        fresh.sort_by_key(|&m| (std::cmp::Reverse(nodes[m].len()), m));
        for m in fresh {
            let free: Vec<usize> =
                (0..ops[u].tile_count).filter(|&i| nodes[m].iter().all(|&w| !taken[w][i])).take(tiles[m]).collect();
            if free.len() < tiles[m] {
                return Err(Error::Infeasible(format!("cannot align tile ranges of match {}", matches[m].id)));
            }
            for &w in &nodes[m] {
                for &i in &free {
                    taken[w][i] = true;
                }
            }
            indices[m] = Some(free);
        }
    }

    let runs = |idx: &[usize]| -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for &i in idx {
            match out.last_mut() {
                Some(r) if r.1 == i => r.1 = i + 1,
                _ => out.push((i, i + 1)),
            }
        }
        out
    };

    let mut b = Builder {
        g,
        tensors: Vec::new(),
        tensor_pos: HashMap::new(),
        specs: Vec::new(),
        pieces: HashMap::new(),
        cache: HashMap::new(),
        helpers: Vec::new(),
        derived: Vec::new(),
    };
    let mut supernodes: Vec<SuperNode> = Vec::new();
    let mut sn_index: HashMap<(usize, usize), usize> = HashMap::new();
    for &u in g.topo_order() {
        let op = &ops[u];
        let mut work: Vec<(usize, usize, usize)> = Vec::new();
        for &m in &covering[u] {
            for (first, last) in runs(indices[m].as_deref().expect("assigned above")) {
                work.push((first, last, m));
            }
        }
        work.sort();
        for (first, last, m) in work {
            let (lo, hi) = op.tile_span(first, last);
            let tiled = b.emit(u, lo, hi, first, last)?;
            let range = OpRange { op: op.name.clone(), tiled_op: tiled.clone(), begin: lo, end: hi };
            let key = (m, first);
            match sn_index.get(&key) {
                Some(&s) => {
                    supernodes[s].inner_ops.push(tiled);
                    supernodes[s].ranges.push(range);
                }
                None => {
                    let mt = &matches[m];
                    let whole = (first, last) == (0, op.tile_count);
                    let name = if whole {
                        format!("{}:{}", mt.pattern, mt.anchor())
                    } else {
                        format!("{}:{}#t{first}_{last}", mt.pattern, mt.anchor())
                    };
                    sn_index.insert(key, supernodes.len());
                    supernodes.push(SuperNode {
                        name,
                        match_id: mt.id,
                        pattern: mt.pattern.clone(),
                        device: mt.device.clone(),
                        tile_range: (first, last),
                        ranges: vec![range],
                        inner_ops: vec![tiled],
                        inputs: Vec::new(),
                        outputs: Vec::new(),
                    });
                }
            }
        }
    }
    for t in g.output_tensors() {
        b.provide(&t.name, 0, axis_len(t))?;
    }

    let graph = Graph::new(b.tensors, b.specs)?;
    for s in &mut supernodes {
        let inner: HashSet<usize> = s.inner_ops.iter().map(|n| graph.op_position(n).expect("emitted")).collect();
        let mut produced = Vec::new();
        for &i in &inner {
            produced.push(graph.operators()[i].output().to_string());
        }
        for n in &s.inner_ops {
            for t in &graph.op(n).expect("emitted").inputs {
                let internal = graph.producer(t).is_some_and(|p| inner.contains(&p));
                if !internal && !s.inputs.contains(t) {
                    s.inputs.push(t.clone());
                }
            }
        }
        for n in &s.inner_ops {
            let t = graph.op(n).expect("emitted").output();
            let cons = graph.consumers(t);
            let external = cons.is_empty()
                || cons.iter().any(|c| !inner.contains(c))
                || graph.tensor(t).is_some_and(|i| i.kind == TensorKind::Output);
            if external {
                s.outputs.push(t.to_string());
            }
        }
    }
    Ok(TiledGraph { graph, supernodes, helpers: b.helpers, derived_weights: b.derived })
}

/// Element-wise comparison of one output tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputDiff {
    pub name: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteReport {
    pub outputs: Vec<OutputDiff>,
}

impl RewriteReport {
    /// Integer outputs must match exactly; float outputs within `rel_tol`.
    pub fn passes(&self, g: &Graph, rel_tol: f64) -> bool {
        self.outputs.iter().all(|o| {
            let float = g.tensor(&o.name).is_some_and(|t| t.dtype.is_float());
            if float {
                o.max_rel <= rel_tol
            } else {
                o.identical
            }
        })
    }

    pub fn to_json_value(&self) -> Value {
        json!({ "outputs": self.outputs })
    }
}

/// Runs both graphs on the same inputs and reports per-output differences.
pub fn verify_rewrite(
    original: &Graph,
    tiled: &TiledGraph,
    inputs: &BTreeMap<String, TensorValue>,
    weights: &BTreeMap<String, TensorValue>,
) -> Result<RewriteReport> {
    let want = interpret(original, inputs, weights)?;
    let got = interpret(&tiled.graph, inputs, &tiled.expand_weights(weights)?)?;
    let mut outputs = Vec::new();
    for (name, a) in &want {
        let b = got.get(name).ok_or_else(|| Error::Interp(format!("tiled graph lacks output `{name}`")))?;
        if a.shape != b.shape {
            return Err(Error::Interp(format!("output `{name}` shape {:?} vs {:?}", a.shape, b.shape)));
        }
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (x, y) in a.data.iter().zip(&b.data) {
            let d = (x - y).abs();
            max_abs = max_abs.max(d);
            let scale = x.abs().max(y.abs());
            if scale > 0.0 {
                max_rel = max_rel.max(d / scale);
            }
        }
        outputs.push(OutputDiff { name: name.clone(), max_abs, max_rel, identical: a.data == b.data });
    }
    Ok(RewriteReport { outputs })
}
