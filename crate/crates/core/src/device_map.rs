//! Per-supernode L1 mapping: loop tiling and ordering search with an
//! analytic reuse-based DMA cost model.
//!
//! A mapping tiles every loop dimension by a divisor of its extent and orders
//! the loops that iterate more than once. A tensor tile is re-fetched each time
//! any loop at or outside its innermost relevant loop advances; outputs are
//! written back on every visit and re-read on every revisit (partial sums).

use std::collections::BTreeMap;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{Graph, OpAttrs, TensorKind};
use crate::platform::{Device, Platform};
use crate::rational::{self, Rational};
use crate::rewrite::{SuperNode, TiledGraph};

const MAX_TILE_CANDIDATES: usize = 64;

/// How a tensor's tile size follows from the loop tile sizes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Footprint {
    /// Product of the tile sizes of the listed dimensions.
    Product(Vec<usize>),
    /// Sliding-window input: rows `(t_oy-1)*sy + t_fy`, cols `(t_ox-1)*sx + t_fx`,
    /// times channels `t_c * ceil(t_k / k_per_group)` (or `t_c` when `k` is absent).
    Window { oy: usize, ox: usize, fy: usize, fx: usize, c: usize, k: Option<(usize, usize)>, sy: usize, sx: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Input,
    Output,
    /// Operand of a fused elementwise successor, read once per output tile.
    Extra,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorModel {
    pub name: String,
    pub role: Role,
    /// Bit `d` set iff the tensor's index depends on dimension `d`.
    pub relevant: u32,
    pub footprint: Footprint,
    pub width: u64,
}

/// Loop dimensions and tensors of one supernode's anchor operator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NestModel {
    pub dims: Vec<(String, usize)>,
    pub tensors: Vec<TensorModel>,
    pub work: u64,
}

fn tile_of(tiles: &[usize], d: usize) -> u64 {
    tiles[d] as u64
}

impl NestModel {
    pub fn trips(&self, tiles: &[usize]) -> Vec<u64> {
        self.dims.iter().zip(tiles).map(|((_, e), t)| (*e / *t) as u64).collect()
    }

    pub fn footprint_elems(&self, t: &TensorModel, tiles: &[usize]) -> u64 {
        match &t.footprint {
            Footprint::Product(ds) => ds.iter().map(|&d| tile_of(tiles, d)).product(),
            Footprint::Window { oy, ox, fy, fx, c, k, sy, sx } => {
                let rows = (tile_of(tiles, *oy) - 1) * *sy as u64 + tile_of(tiles, *fy);
                let cols = (tile_of(tiles, *ox) - 1) * *sx as u64 + tile_of(tiles, *fx);
                let groups = k.map_or(1, |(kd, per)| tile_of(tiles, kd).div_ceil(per as u64));
                rows * cols * tile_of(tiles, *c) * groups
            }
        }
    }

    /// Bytes resident in L1 for one tile of every tensor.
    pub fn working_set(&self, tiles: &[usize]) -> u64 {
        self.tensors.iter().map(|t| self.footprint_elems(t, tiles) * t.width).sum()
    }

    /// Loops that iterate more than once, in dimension order.
    pub fn tiled_loops(&self, tiles: &[usize]) -> Vec<usize> {
        let trips = self.trips(tiles);
        (0..self.dims.len()).filter(|&d| trips[d] > 1).collect()
    }

    /// Analytic L2<->L1 traffic for tile sizes `tiles` and loop order `order`
    /// (outer to inner, covering exactly the loops with more than one trip).
    pub fn dma_bytes(&self, tiles: &[usize], order: &[usize]) -> u64 {
        let trips = self.trips(tiles);
        let visits = |mask: u32| -> u64 {
            match order.iter().rposition(|&d| mask & (1 << d) != 0) {
                Some(r) => order[..=r].iter().map(|&d| trips[d]).product(),
                None => 1,
            }
        };
        let distinct = |mask: u32| -> u64 { (0..self.dims.len()).filter(|d| mask & (1 << d) != 0).map(|d| trips[d]).product() };
        let out_mask = self.tensors.iter().find(|t| t.role == Role::Output).map_or(0, |t| t.relevant);
        self.tensors
            .iter()
            .map(|t| {
                let bytes = self.footprint_elems(t, tiles) * t.width;
                let count = match t.role {
                    Role::Input => visits(t.relevant),
                    Role::Output => 2 * visits(t.relevant) - distinct(t.relevant),
                    Role::Extra => distinct(out_mask),
                };
                bytes * count
            })
            .sum()
    }

    /// Least traffic over all orders of the tiled loops, by dynamic programming
    /// over the set of loops placed innermost.
    fn best_order_cost(&self, tiles: &[usize]) -> u64 {
        let trips = self.trips(tiles);
        let loops = self.tiled_loops(tiles);
        let m = loops.len();
        let total: u64 = loops.iter().map(|&d| trips[d]).product();
        let loop_mask = loops.iter().fold(0u32, |a, &d| a | (1 << d));
        let out_mask = self.tensors.iter().find(|t| t.role == Role::Output).map_or(0, |t| t.relevant);
        let mut constant: u64 = 0;
        let mut weighted: Vec<(u32, u64)> = Vec::new();
        for t in &self.tensors {
            let bytes = self.footprint_elems(t, tiles) * t.width;
            match t.role {
                Role::Extra => {
                    let d: u64 = loops.iter().filter(|&&l| out_mask & (1 << l) != 0).map(|&l| trips[l]).product();
                    constant += bytes * d;
                }
                Role::Input | Role::Output => {
                    let k = if t.role == Role::Output { 2 } else { 1 };
                    if t.relevant & loop_mask == 0 {
                        constant += k * bytes;
                    } else {
                        weighted.push((t.relevant & loop_mask, k * bytes));
                    }
                    if t.role == Role::Output {
                        let d: u64 = loops.iter().filter(|&&l| t.relevant & (1 << l) != 0).map(|&l| trips[l]).product();
                        constant = constant.wrapping_sub(bytes * d);
                    }
                }
            }
        }
        let full = (1usize << m) - 1;
        let mut f = vec![u64::MAX; full + 1];
        let mut prod = vec![1u64; full + 1];
        f[0] = 0;
        for q in 0..=full {
            if f[q] == u64::MAX {
                continue;
            }
            let qmask = (0..m).filter(|i| q & (1 << i) != 0).fold(0u32, |a, i| a | (1 << loops[i]));
            for (i, &l) in loops.iter().enumerate().take(m) {
                if q & (1 << i) != 0 {
                    continue;
                }
                let add: u64 = weighted
                    .iter()
                    .filter(|(mask, _)| mask & (1 << l) != 0 && mask & qmask == 0)
                    .map(|(_, w)| w * (total / prod[q]))
                    .sum();
                let nq = q | (1 << i);
                prod[nq] = prod[q] * trips[l];
                f[nq] = f[nq].min(f[q] + add);
            }
        }
        f[full].wrapping_add(constant)
    }
}

/// Builds the loop-nest model of a supernode from its anchor operator.
pub fn nest_model(node: &SuperNode, g: &Graph) -> Result<NestModel> {
    let anchor = g
        .op(&node.inner_ops[0])
        .ok_or_else(|| Error::InvalidModel(format!("supernode `{}` has unknown operator", node.name)))?;
    let last = g.op(node.inner_ops.last().expect("non-empty")).expect("listed");
    let tensor = |n: &str| g.tensor(n).ok_or_else(|| Error::InvalidModel(format!("unknown tensor `{n}`")));
    let out = tensor(last.output())?;
    let width = out.dtype.width();
    let work: u64 = node.inner_ops.iter().filter_map(|n| g.op(n)).map(|o| o.ops_count).sum();
    let dims_of = |names: &[(&str, usize)]| names.iter().map(|(n, e)| (n.to_string(), *e)).collect::<Vec<_>>();
    let bit = |ds: &[usize]| ds.iter().fold(0u32, |a, &d| a | (1 << d));
    let mut tensors = Vec::new();
    let dims;
    let out_dims: Vec<usize>;
    match &anchor.attrs {
        OpAttrs::Conv2d(a) => {
            let x = tensor(&anchor.inputs[0])?;
            let y = tensor(anchor.output())?;
            let (n, oy, ox, k) = (y.shape[0], y.shape[1], y.shape[2], y.shape[3]);
            let cg = x.shape[3] / a.groups;
            // K, C, OY, OX, FY, FX
            dims = dims_of(&[("K", k), ("C", cg), ("OY", n * oy), ("OX", ox), ("FY", a.kernel_h), ("FX", a.kernel_w)]);
            let grouped = a.groups > 1;
            let mut in_rel = vec![1, 2, 3, 4, 5];
            if grouped {
                in_rel.push(0);
            }
            tensors.push(TensorModel {
                name: x.name.clone(),
                role: Role::Input,
                relevant: bit(&in_rel),
                footprint: Footprint::Window {
                    oy: 2,
                    ox: 3,
                    fy: 4,
                    fx: 5,
                    c: 1,
                    k: grouped.then_some((0, k / a.groups)),
                    sy: a.stride_h,
                    sx: a.stride_w,
                },
                width,
            });
            let w = tensor(&anchor.inputs[1])?;
            tensors.push(TensorModel {
                name: w.name.clone(),
                role: Role::Input,
                relevant: bit(&[0, 1, 4, 5]),
                footprint: Footprint::Product(vec![0, 1, 4, 5]),
                width,
            });
            out_dims = vec![0, 2, 3];
        }
        OpAttrs::MaxPool2d(a) => {
            let x = tensor(&anchor.inputs[0])?;
            let y = tensor(anchor.output())?;
            dims = dims_of(&[("K", y.shape[3]), ("OY", y.shape[0] * y.shape[1]), ("OX", y.shape[2]), ("FY", a.window), ("FX", a.window)]);
            tensors.push(TensorModel {
                name: x.name.clone(),
                role: Role::Input,
                relevant: bit(&[0, 1, 2, 3, 4]),
                footprint: Footprint::Window { oy: 1, ox: 2, fy: 3, fx: 4, c: 0, k: None, sy: a.stride, sx: a.stride },
                width,
            });
            out_dims = vec![0, 1, 2];
        }
        OpAttrs::Dense => {
            let x = tensor(&anchor.inputs[0])?;
            let w = tensor(&anchor.inputs[1])?;
            dims = dims_of(&[("OY", x.shape[0]), ("IN", x.shape[1]), ("OUT", w.shape[1])]);
            tensors.push(TensorModel { name: x.name.clone(), role: Role::Input, relevant: bit(&[0, 1]), footprint: Footprint::Product(vec![0, 1]), width });
            tensors.push(TensorModel { name: w.name.clone(), role: Role::Input, relevant: bit(&[1, 2]), footprint: Footprint::Product(vec![1, 2]), width });
            out_dims = vec![0, 2];
        }
        OpAttrs::Add | OpAttrs::Relu | OpAttrs::Slice(_) | OpAttrs::Concat(_) => {
            let y = tensor(anchor.output())?;
            let (oy, ox, k) = match y.shape.len() {
                4 => (y.shape[0] * y.shape[1], y.shape[2], y.shape[3]),
                2 => (y.shape[0], 1, y.shape[1]),
                _ => (1, 1, y.numel() as usize),
            };
            dims = dims_of(&[("OY", oy), ("OX", ox), ("K", k)]);
            let mut seen = Vec::new();
            for n in &anchor.inputs {
                if seen.contains(n) {
                    continue;
                }
                seen.push(n.clone());
                tensors.push(TensorModel {
                    name: n.clone(),
                    role: Role::Input,
                    relevant: bit(&[0, 1, 2]),
                    footprint: Footprint::Product(vec![0, 1, 2]),
                    width,
                });
            }
            out_dims = vec![0, 1, 2];
        }
    }
    // Operands of fused successors that come from outside the chain.
    let produced: Vec<&str> = node.inner_ops.iter().filter_map(|n| g.op(n)).map(|o| o.output()).collect();
    for n in &node.inner_ops[1..] {
        for t in &g.op(n).expect("listed").inputs {
            let already = tensors.iter().any(|m| &m.name == t);
            if !produced.contains(&t.as_str()) && !already && tensor(t)?.kind != TensorKind::Weight {
                tensors.push(TensorModel {
                    name: t.clone(),
                    role: Role::Extra,
                    relevant: bit(&out_dims),
                    footprint: Footprint::Product(out_dims.clone()),
                    width,
                });
            }
        }
    }
    tensors.push(TensorModel {
        name: out.name.clone(),
        role: Role::Output,
        relevant: bit(&out_dims),
        footprint: Footprint::Product(out_dims.clone()),
        width,
    });
    Ok(NestModel { dims, tensors, work })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Loop {
    pub dim: String,
    pub extent: usize,
    pub tile: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopNest {
    pub loops: Vec<Loop>,
    /// Dimensions iterated more than once, outer to inner.
    pub ordering: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MappingCost {
    #[serde(with = "rational::serde_num")]
    pub compute_cycles: Rational,
    pub dma_bytes: u64,
    #[serde(with = "rational::serde_num")]
    pub dma_cycles: Rational,
    #[serde(with = "rational::serde_num")]
    pub total_cycles: Rational,
    pub l1_peak_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mapping {
    pub node: String,
    pub device: String,
    pub nest: LoopNest,
    pub cost: MappingCost,
}

fn divisors(n: usize) -> Vec<usize> {
    let mut d: Vec<usize> = (1..=n).filter(|k| n.is_multiple_of(*k)).collect();
    if d.len() > MAX_TILE_CANDIDATES {
        let half = MAX_TILE_CANDIDATES / 2;
        let tail = d.split_off(d.len() - half);
        d.truncate(half);
        d.extend(tail);
    }
    d
}

fn cost_of(model: &NestModel, dev: &Device, eta: Rational, tiles: &[usize], order: &[usize]) -> MappingCost {
    let compute = rational::int(model.work as i128) * dev.alpha / eta;
    let bytes = model.dma_bytes(tiles, order);
    let dma = rational::int(bytes as i128) / dev.dma_bw_bytes_per_cycle;
    MappingCost {
        compute_cycles: compute,
        dma_bytes: bytes,
        dma_cycles: dma,
        total_cycles: compute + dma,
        l1_peak_bytes: model.working_set(tiles),
    }
}

fn nest_of(model: &NestModel, tiles: &[usize], order: &[usize]) -> LoopNest {
    LoopNest {
        loops: model.dims.iter().zip(tiles).map(|((d, e), t)| Loop { dim: d.clone(), extent: *e, tile: *t }).collect(),
        ordering: order.iter().map(|&d| model.dims[d].0.clone()).collect(),
    }
}

/// Evaluates one explicit mapping; `None` when it exceeds L1.
pub fn evaluate(model: &NestModel, dev: &Device, eta: Rational, tiles: &[usize], order: &[usize]) -> Option<MappingCost> {
    let c = cost_of(model, dev, eta, tiles, order);
    (c.l1_peak_bytes <= dev.l1_bytes).then_some(c)
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let Some(i) = (0..v.len() - 1).rev().find(|&i| v[i] < v[i + 1]) else { return false };
    let j = (i + 1..v.len()).rev().find(|&j| v[j] > v[i]).expect("exists");
    v.swap(i, j);
    v[i + 1..].reverse();
    true
}

/// Minimum-traffic mapping of `model` on `dev`, ties broken by the
/// lexicographically smallest (tile sizes, ordering).
pub fn search_model(model: &NestModel, node: &str, dev: &Device, eta: Rational) -> Result<Mapping> {
    let full: Vec<usize> = model.dims.iter().map(|(_, e)| *e).collect();
    if dev.l1_bytes == 0 {
        let compute = rational::int(model.work as i128) * dev.alpha / eta;
        return Ok(Mapping {
            node: node.to_string(),
            device: dev.name.clone(),
            nest: nest_of(model, &full, &[]),
            cost: MappingCost {
                compute_cycles: compute,
                dma_bytes: 0,
                dma_cycles: Rational::zero(),
                total_cycles: compute,
                l1_peak_bytes: 0,
            },
        });
    }
    if model.working_set(&full) <= dev.l1_bytes {
        let cost = cost_of(model, dev, eta, &full, &[]);
        return Ok(Mapping { node: node.to_string(), device: dev.name.clone(), nest: nest_of(model, &full, &[]), cost });
    }
    let ones = vec![1; model.dims.len()];
    if model.working_set(&ones) > dev.l1_bytes {
        return Err(Error::L1Exceeded {
            node: node.to_string(),
            device: dev.name.clone(),
            bytes: model.working_set(&ones),
            capacity: dev.l1_bytes,
        });
    }
    let cands: Vec<Vec<usize>> = full.iter().map(|&e| divisors(e)).collect();
    let mut idx = vec![0usize; cands.len()];
    let mut best: Option<(u64, Vec<usize>)> = None;
    loop {
        let tiles: Vec<usize> = idx.iter().zip(&cands).map(|(&i, c)| c[i]).collect();
        if model.working_set(&tiles) <= dev.l1_bytes {
            let cost = model.best_order_cost(&tiles);
            if best.as_ref().is_none_or(|b| cost < b.0) {
                best = Some((cost, tiles));
            }
        }
        let mut d = cands.len();
        loop {
            if d == 0 {
                break;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < cands[d].len() {
                break;
            }
            idx[d] = 0;
            if d == 0 {
                d = usize::MAX;
                break;
            }
        }
        if d == usize::MAX {
            break;
        }
    }
    let (target, tiles) = best.expect("the all-ones tiling fits");
    let mut order = model.tiled_loops(&tiles);
    loop {
        if model.dma_bytes(&tiles, &order) == target {
            break;
        }
        if !next_permutation(&mut order) {
            unreachable!("dynamic program and enumeration disagree");
        }
    }
    let cost = cost_of(model, dev, eta, &tiles, &order);
    Ok(Mapping { node: node.to_string(), device: dev.name.clone(), nest: nest_of(model, &tiles, &order), cost })
}

/// Searches the mapping of one supernode on its device.
pub fn search_mapping(node: &SuperNode, tg: &TiledGraph, plat: &Platform) -> Result<Mapping> {
    let dev = plat
        .device(&node.device)
        .ok_or_else(|| Error::UnknownDevice { pattern: node.pattern.clone(), device: node.device.clone() })?;
    let pattern = plat
        .pattern(&node.pattern)
        .ok_or_else(|| Error::InvalidModel(format!("supernode `{}` names unknown pattern", node.name)))?;
    let model = nest_model(node, &tg.graph)?;
    search_model(&model, &node.name, dev, pattern.eta)
}

/// Per-node cycle estimates used by the scheduler.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Latencies {
    /// Supernode name -> kernel cycles (mapping total plus per-invocation overhead).
    pub nodes: BTreeMap<String, u64>,
    /// Helper operator name -> host cycles (zero for views).
    pub helpers: BTreeMap<String, u64>,
    pub mappings: Vec<Mapping>,
}

/// Refines every supernode's latency with the mapping search and costs helpers.
pub fn refine_latencies(tg: &TiledGraph, plat: &Platform) -> Result<Latencies> {
    let mut lat = Latencies::default();
    for s in &tg.supernodes {
        let m = search_mapping(s, tg, plat)?;
        let delta = plat.pattern(&s.pattern).map_or(0, |p| p.delta_cycles);
        let cycles = rational::ceil_u64(&(m.cost.total_cycles + rational::int(delta as i128)));
        lat.nodes.insert(s.name.clone(), cycles);
        lat.mappings.push(m);
    }
    for h in &tg.helpers {
        let cycles = if h.alias {
            0
        } else {
            rational::ceil_u64(&(rational::int(h.bytes as i128) * plat.helper_cost_per_byte))
        };
        lat.helpers.insert(h.op.clone(), cycles);
    }
    Ok(lat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;

    fn conv_model(c: usize, k: usize, oy: usize, ox: usize) -> NestModel {
        NestModel {
            dims: vec![
                ("K".into(), k),
                ("C".into(), c),
                ("OY".into(), oy),
                ("OX".into(), ox),
                ("FY".into(), 3),
                ("FX".into(), 3),
            ],
            tensors: vec![
                TensorModel {
                    name: "x".into(),
                    role: Role::Input,
                    relevant: 0b111110,
                    footprint: Footprint::Window { oy: 2, ox: 3, fy: 4, fx: 5, c: 1, k: None, sy: 1, sx: 1 },
                    width: 1,
                },
                TensorModel {
                    name: "w".into(),
                    role: Role::Input,
                    relevant: 0b110011,
                    footprint: Footprint::Product(vec![0, 1, 4, 5]),
                    width: 1,
                },
                TensorModel {
                    name: "y".into(),
                    role: Role::Output,
                    relevant: 0b001101,
                    footprint: Footprint::Product(vec![0, 2, 3]),
                    width: 1,
                },
            ],
            work: (2 * c * k * oy * ox * 9) as u64,
        }
    }

    fn device(l1: u64) -> Device {
        Device::new("acc", Rational::one(), l1, rational::int(4), false)
    }

    #[test]
    fn fitting_node_loads_everything_once() {
        let m = conv_model(16, 32, 8, 8);
        let map = search_model(&m, "n", &device(1 << 20), Rational::one()).unwrap();
        let once = 10 * 10 * 16 + 9 * 16 * 32 + 8 * 8 * 32;
        assert_eq!(map.cost.dma_bytes, once);
        assert!(map.nest.ordering.is_empty());
    }

    #[test]
    fn weights_resident_rows_streamed() {
        // Weights (4608 B) stay resident while output rows stream by one row.
        let m = conv_model(16, 32, 8, 8);
        let tiles = [32, 16, 1, 8, 3, 3];
        let bytes = m.dma_bytes(&tiles, &[2]);
        let weights = 9 * 16 * 32;
        let input_rows = 8 * (3 * 10 * 16);
        let outputs = 8 * 8 * 32;
        assert_eq!(bytes, weights + input_rows + outputs);
    }

    #[test]
    fn host_costs_compute_only() {
        let m = conv_model(4, 4, 4, 4);
        let host = Device::new("host", rational::int(2), 0, Rational::one(), true);
        let map = search_model(&m, "n", &host, Rational::one()).unwrap();
        assert_eq!(map.cost.dma_cycles, Rational::zero());
        assert_eq!(map.cost.total_cycles, rational::int(2 * m.work as i128));
    }

    #[test]
    fn too_small_l1_is_an_error() {
        let m = conv_model(4, 4, 4, 4);
        let err = search_model(&m, "n", &device(2), Rational::one()).unwrap_err();
        assert!(err.to_string().contains("operator exceeds L1 at minimum tile"));
    }

    #[test]
    fn search_respects_l1_and_matches_order_dp() {
        let m = conv_model(16, 32, 16, 16);
        let dev = device(4096);
        let map = search_model(&m, "n", &dev, Rational::one()).unwrap();
        assert!(map.cost.l1_peak_bytes <= dev.l1_bytes);
        let tiles: Vec<usize> = map.nest.loops.iter().map(|l| l.tile).collect();
        assert_eq!(map.cost.dma_bytes, m.best_order_cost(&tiles));
    }

    #[test]
    fn divisor_candidates_are_capped() {
        assert_eq!(divisors(12), vec![1, 2, 3, 4, 6, 12]);
        assert!(divisors(720720).len() <= MAX_TILE_CANDIDATES);
    }
}
