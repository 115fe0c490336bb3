//! Instance generators and brute-force oracles shared by integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use matcha_core::device_map::{Footprint, NestModel, Role};
use matcha_core::model_ir::{
    Conv2dAttrs, DType, Graph, OpAttrs, OpType, OperatorSpec, Pool2dAttrs, TensorInfo, TensorKind, TileConfig,
};
use matcha_core::pattern_match::enumerate_matches;
use matcha_core::platform::{Device, MemoryHierarchy, Pattern, Platform};
use matcha_core::rational::{int, Rational};
use matcha_core::rewrite::{apply_assignment, TiledGraph};
use matcha_core::tile_alloc::{build_problem, ProblemBuilder, TileProblem};
use num_traits::{One, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// Tile problems

/// Raw coefficients of a tile problem, kept so the oracle can price
/// candidates without the library's derived fields.
#[derive(Debug, Clone)]
pub struct RawProblem {
    pub dispatch: u64,
    /// Cycles per operation, per device.
    pub alpha: Vec<Rational>,
    /// `(tiles, ops_count, stage, helper_cycles)` per operator.
    pub ops: Vec<(usize, i128, usize, Rational)>,
    /// `(device, eta, delta, nodes)` per match.
    pub matches: Vec<(usize, Rational, u64, Vec<usize>)>,
}

impl RawProblem {
    pub fn build(&self) -> TileProblem {
        let mut b = ProblemBuilder::new(self.dispatch);
        for (i, a) in self.alpha.iter().enumerate() {
            b.device(&format!("d{i}"), *a);
        }
        for (i, (tiles, ops, stage, helper)) in self.ops.iter().enumerate() {
            b.op(&format!("op{i}"), *tiles, int(*ops), *stage, *helper);
        }
        for (i, (dev, eta, delta, nodes)) in self.matches.iter().enumerate() {
            b.add_match(&format!("m{i}"), *dev, *eta, *delta, nodes);
        }
        b.build().expect("generated problem is well formed")
    }

    /// Modeled makespan of `t`, or `None` when `t` breaks conservation.
    pub fn objective(&self, t: &[usize]) -> Option<Rational> {
        let mut assigned = vec![0usize; self.ops.len()];
        let mut instances = vec![0usize; self.ops.len()];
        for (m, (_, _, _, nodes)) in self.matches.iter().enumerate() {
            for &u in nodes {
                assigned[u] += t[m];
                instances[u] += usize::from(t[m] > 0);
            }
        }
        if assigned.iter().zip(&self.ops).any(|(a, o)| *a != o.0) {
            return None;
        }
        let stages = self.ops.iter().map(|o| o.2 + 1).max().unwrap_or(0);
        let mut load = vec![vec![Rational::zero(); self.alpha.len()]; stages];
        for (m, (dev, eta, delta, nodes)) in self.matches.iter().enumerate() {
            if t[m] == 0 {
                continue;
            }
            let per_tile: Rational = nodes.iter().map(|&u| Rational::new(self.ops[u].1, self.ops[u].0 as i128)).sum();
            let lat = per_tile * int(t[m] as i128) * self.alpha[*dev] / *eta + int((*delta + self.dispatch) as i128);
            load[self.ops[nodes[0]].2][*dev] += lat;
        }
        let mut total: Rational = load.iter().map(|row| row.iter().copied().max().unwrap_or_default()).sum();
        for (u, op) in self.ops.iter().enumerate() {
            if instances[u] >= 2 {
                total += op.3;
            }
        }
        Some(total)
    }

    /// Upper estimate of the number of candidate vectors.
    pub fn search_space(&self) -> f64 {
        let mut space = 1.0;
        for (u, op) in self.ops.iter().enumerate() {
            let k = self.matches.iter().filter(|m| m.3[0] == u).count() as f64;
            let n = op.0 as f64;
            // C(n + k - 1, k - 1)
            let mut c = 1.0;
            for i in 1..k as usize {
                c = c * (n + i as f64) / i as f64;
            }
            space *= c;
        }
        space
    }

    /// Exhaustive minimum over every conserving vector.
    pub fn brute_force_min(&self) -> Option<Rational> {
        let n = self.matches.len();
        let last_cover: Vec<usize> = (0..self.ops.len())
            .map(|u| (0..n).filter(|&m| self.matches[m].3.contains(&u)).max().expect("covered"))
            .collect();
        let mut t = vec![0; n];
        let mut used = vec![0; self.ops.len()];
        let mut best: Option<Rational> = None;
        self.enumerate(0, &mut t, &mut used, &last_cover, &mut best);
        best
    }

    fn enumerate(&self, m: usize, t: &mut Vec<usize>, used: &mut Vec<usize>, last: &[usize], best: &mut Option<Rational>) {
        if m == self.matches.len() {
            if let Some(v) = self.objective(t) {
                if best.is_none_or(|b| v < b) {
                    *best = Some(v);
                }
            }
            return;
        }
        let nodes = &self.matches[m].3;
        let cap = nodes.iter().map(|&u| self.ops[u].0 - used[u]).min().unwrap_or(0);
        for v in 0..=cap {
            for &u in nodes {
                used[u] += v;
            }
            if nodes.iter().all(|&u| last[u] != m || used[u] == self.ops[u].0) {
                t[m] = v;
                self.enumerate(m + 1, t, used, last, best);
                t[m] = 0;
            }
            for &u in nodes {
                used[u] -= v;
            }
        }
    }
}

/// Random problem with at most `max_ops` operators, 2..=`max_devices`
/// devices (device 0 is a slow host covering everything) and `T <= max_tiles`.
pub fn random_problem(r: &mut ChaCha8Rng, max_ops: usize, max_devices: usize, max_tiles: usize) -> RawProblem {
    let nd = r.gen_range(2..=max_devices);
    let no = r.gen_range(1..=max_ops);
    let mut alpha = vec![int(r.gen_range(4..=16))];
    for _ in 1..nd {
        alpha.push(Rational::new(r.gen_range(1..=8), r.gen_range(1..=4)));
    }
    let mut ops = Vec::new();
    let mut stage = 0;
    for i in 0..no {
        if i > 0 && r.gen_bool(0.6) {
            stage += 1;
        }
        let helper = if r.gen_bool(0.5) { Rational::zero() } else { int(r.gen_range(0..=400)) };
        ops.push((r.gen_range(1..=max_tiles), r.gen_range(100..=4000i128), stage, helper));
    }
    let mut matches = Vec::new();
    for u in 0..no {
        matches.push((0, Rational::one(), r.gen_range(0..=50), vec![u]));
        for d in 1..nd {
            if r.gen_bool(0.7) {
                matches.push((d, Rational::new(r.gen_range(1..=10), 10), r.gen_range(0..=200), vec![u]));
            }
        }
        if u + 1 < no && ops[u].0 == ops[u + 1].0 && r.gen_bool(0.4) {
            let d = r.gen_range(1..nd);
            matches.push((d, Rational::new(r.gen_range(5..=10), 10), r.gen_range(0..=200), vec![u, u + 1]));
        }
    }
    RawProblem { dispatch: r.gen_range(0..=20), alpha, ops, matches }
}

/// Random problem whose candidate space is small enough to enumerate.
pub fn enumerable_problem(r: &mut ChaCha8Rng, limit: f64) -> RawProblem {
    loop {
        let p = random_problem(r, 6, 3, 8);
        if p.search_space() <= limit {
            return p;
        }
    }
}

/// Random conserving vector: per operator in order, the remaining tiles are
/// spread over matches anchored there; the host match absorbs the rest.
pub fn random_conserving(p: &TileProblem, r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut t = vec![0; p.matches.len()];
    let mut used = vec![0; p.ops.len()];
    for u in 0..p.ops.len() {
        let mut anchored: Vec<usize> = p.matches.iter().filter(|m| m.nodes[0] == u).map(|m| m.id).collect();
        anchored.shuffle(r);
        let mut left = p.ops[u].tiles.saturating_sub(used[u]);
        for &m in &anchored {
            if left == 0 {
                break;
            }
            let cap = p.matches[m].nodes.iter().map(|&w| p.ops[w].tiles - used[w]).min().unwrap_or(0).min(left);
            let v = r.gen_range(0..=cap);
            t[m] += v;
            for &w in &p.matches[m].nodes {
                used[w] += v;
            }
            left -= v;
        }
        if left > 0 {
            let single = *anchored.iter().find(|&&m| p.matches[m].nodes.len() == 1).expect("single-node match");
            t[single] += left;
            used[u] += left;
        }
    }
    t
}

// ---------------------------------------------------------------------------
// Graphs and platforms

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Spatial,
    Dense,
}

struct GraphGen<'r> {
    r: &'r mut ChaCha8Rng,
    tensors: Vec<TensorInfo>,
    specs: Vec<OperatorSpec>,
    dtype: DType,
}

impl GraphGen<'_> {
    fn tensor(&mut self, shape: Vec<usize>, kind: TensorKind) -> String {
        let name = format!("t{}", self.tensors.len());
        self.tensors.push(TensorInfo::new(name.clone(), &shape, self.dtype, kind));
        name
    }

    fn shape(&self, name: &str) -> Vec<usize> {
        self.tensors.iter().find(|t| t.name == name).expect("known").shape.clone()
    }

    fn op(&mut self, attrs: OpAttrs, inputs: &[&str], out_shape: Vec<usize>) -> String {
        let out = self.tensor(out_shape, TensorKind::Intermediate);
        let name = format!("op{}", self.specs.len());
        self.specs.push(OperatorSpec::new(&name, attrs, inputs, &[&out]));
        out
    }

    fn conv(&mut self, x: &str, k_out: Option<usize>) -> String {
        let s = self.shape(x);
        let (h, w, c) = (s[1], s[2], s[3]);
        let kernel = if h >= 3 && w >= 3 && self.r.gen_bool(0.6) { 3 } else { 1 };
        let stride = if h >= 4 && w >= 4 && self.r.gen_bool(0.25) { 2 } else { 1 };
        let pad = if kernel == 3 && self.r.gen_bool(0.7) { 1 } else { 0 };
        let depthwise = k_out.is_none() && c > 1 && self.r.gen_bool(0.2);
        let (groups, k) = if depthwise { (c, c) } else { (1, k_out.unwrap_or_else(|| [2, 3, 4, 8][self.r.gen_range(0..4)])) };
        let wt = self.tensor(vec![kernel, kernel, c / groups, k], TensorKind::Weight);
        let oh = (h + 2 * pad - kernel) / stride + 1;
        let ow = (w + 2 * pad - kernel) / stride + 1;
        let attrs = OpAttrs::Conv2d(Conv2dAttrs::square(kernel, stride, pad).with_groups(groups));
        self.op(attrs, &[x, &wt], vec![s[0], oh, ow, k])
    }

    fn dense(&mut self, x: &str, n_out: Option<usize>) -> String {
        let s = self.shape(x);
        let n = n_out.unwrap_or_else(|| self.r.gen_range(2..=8));
        let wt = self.tensor(vec![s[1], n], TensorKind::Weight);
        self.op(OpAttrs::Dense, &[x, &wt], vec![s[0], n])
    }
}

/// Random operator chain with skip connections and parallel branches.
pub fn random_graph(r: &mut ChaCha8Rng, family: Family, max_ops: usize) -> Graph {
    let dtype = if r.gen_bool(0.5) { DType::I8 } else { DType::F32 };
    let mut g = GraphGen { r, tensors: Vec::new(), specs: Vec::new(), dtype };
    let input_shape = match family {
        Family::Spatial => vec![1, g.r.gen_range(3..=8), g.r.gen_range(3..=7), g.r.gen_range(1..=4)],
        Family::Dense => vec![g.r.gen_range(1..=3), g.r.gen_range(2..=8)],
    };
    let x = g.tensor(input_shape, TensorKind::Input);
    let mut last = x.clone();
    // Tensors with the same shape as `last` that an add may reuse.
    let mut history: Vec<String> = vec![x];
    let target = g.r.gen_range(1..=max_ops);
    while g.specs.len() < target {
        let choice = g.r.gen_range(0..10);
        let s = g.shape(&last);
        let next = match (family, choice) {
            (_, 0..=1) => g.op(OpAttrs::Relu, &[&last], s.clone()),
            (_, 2..=3) => {
                let partner = history.iter().rev().skip(1).find(|t| g.shape(t) == s).cloned();
                match partner {
                    Some(p) => g.op(OpAttrs::Add, &[&last, &p], s.clone()),
                    None => g.op(OpAttrs::Relu, &[&last], s.clone()),
                }
            }
            (Family::Spatial, 4) if s[1] >= 2 && s[2] >= 2 => {
                let (oh, ow) = ((s[1] - 2) / 2 + 1, (s[2] - 2) / 2 + 1);
                g.op(OpAttrs::MaxPool2d(Pool2dAttrs { window: 2, stride: 2 }), &[&last], vec![s[0], oh, ow, s[3]])
            }
            (Family::Spatial, 5) => {
                let k = [2, 4][g.r.gen_range(0..2)];
                let a = g.conv(&last, Some(k));
                let b = g.conv(&last, Some(k));
                if g.shape(&a) == g.shape(&b) {
                    let sa = g.shape(&a);
                    g.op(OpAttrs::Add, &[&a, &b], sa)
                } else {
                    let sa = g.shape(&a);
                    let sb = g.shape(&b);
                    let axis = 3;
                    let mut out = sa.clone();
                    out[axis] = sa[axis] + sb[axis];
                    if sa[1] == sb[1] && sa[2] == sb[2] {
                        g.op(OpAttrs::Concat(matcha_core::model_ir::ConcatAttrs { axis }), &[&a, &b], out)
                    } else {
                        g.op(OpAttrs::Relu, &[&b], sb);
                        a
                    }
                }
            }
            (Family::Spatial, _) => g.conv(&last, None),
            (Family::Dense, 5) => {
                let n = g.r.gen_range(2..=8);
                let a = g.dense(&last, Some(n));
                let b = g.dense(&last, Some(n));
                g.op(OpAttrs::Add, &[&a, &b], vec![s[0], n])
            }
            (Family::Dense, _) => g.dense(&last, None),
        };
        last = next;
        history.push(last.clone());
    }
    // Every intermediate tensor nobody reads becomes a graph output.
    let read: HashSet<String> = g.specs.iter().flat_map(|s| s.inputs.clone()).collect();
    for t in &mut g.tensors {
        if t.kind == TensorKind::Intermediate && !read.contains(&t.name) {
            t.kind = TensorKind::Output;
        }
    }
    Graph::new(g.tensors, g.specs).expect("generated graph is valid")
}

/// Host plus `accels` accelerators, each with a random subset of single-op
/// and fused patterns.
pub fn random_platform(r: &mut ChaCha8Rng, accels: usize, l2_bytes: u64) -> Platform {
    let mut devices = vec![Device::new("host", int(r.gen_range(2..=6)), 0, Rational::one(), true)];
    let mut patterns = Vec::new();
    let singles = [OpType::Conv2d, OpType::Dense, OpType::Add, OpType::Relu, OpType::MaxPool2d];
    let chains: [&[OpType]; 4] = [
        &[OpType::Conv2d, OpType::Relu],
        &[OpType::Conv2d, OpType::Add],
        &[OpType::Dense, OpType::Relu],
        &[OpType::Conv2d, OpType::Add, OpType::Relu],
    ];
    for i in 0..accels {
        let name = format!("acc{i}");
        let alpha = Rational::new(r.gen_range(1..=4), r.gen_range(1..=4));
        devices.push(Device::new(&name, alpha, 1 << 20, int(r.gen_range(1..=8)), false));
        for (j, op) in singles.iter().enumerate() {
            if j < 2 || r.gen_bool(0.5) {
                let eta = Rational::new(r.gen_range(3..=10), 10);
                patterns.push(Pattern::new(&format!("{name}_{}", op.as_str()), &[*op], &name, eta, r.gen_range(0..=100)));
            }
        }
        for chain in chains {
            if r.gen_bool(0.5) {
                let label: Vec<&str> = chain.iter().map(|o| o.as_str()).collect();
                let eta = Rational::new(r.gen_range(3..=10), 10);
                patterns.push(Pattern::new(&format!("{name}_{}", label.join("_")), chain, &name, eta, r.gen_range(0..=100)));
            }
        }
    }
    Platform::new(
        devices,
        MemoryHierarchy { l2_bytes, l3_bytes: 1 << 30, l2_l3_bw_bytes_per_cycle: int(r.gen_range(1..=8)) },
        patterns,
        r.gen_range(0..=50),
        Rational::new(r.gen_range(0..=4), 4),
    )
    .expect("generated platform is valid")
}

/// Random graph, platform and conserving split, rewritten.
pub fn random_deployment(r: &mut ChaCha8Rng, family: Family, max_ops: usize, max_tiles: usize, l2_bytes: u64) -> (Graph, Platform, TiledGraph) {
    let g = random_graph(r, family, max_ops);
    let accels = r.gen_range(1..=2);
    let plat = random_platform(r, accels, l2_bytes);
    let g = g.with_tiles(&TileConfig::uniform(r.gen_range(1..=max_tiles))).expect("valid tile counts");
    let ms = enumerate_matches(&g, &plat);
    let p = build_problem(&g, &ms, &plat).expect("wildcard covers everything");
    let t = random_conserving(&p, r);
    let tg = apply_assignment(&g, &ms, &t).expect("conserving split rewrites");
    (g, plat, tg)
}

// ---------------------------------------------------------------------------
// Loop-nest replay

fn footprint(f: &Footprint, tiles: &[usize]) -> u64 {
    match f {
        Footprint::Product(ds) => ds.iter().map(|&d| tiles[d] as u64).product(),
        Footprint::Window { oy, ox, fy, fx, c, k, sy, sx } => {
            let rows = (tiles[*oy] as u64 - 1) * *sy as u64 + tiles[*fy] as u64;
            let cols = (tiles[*ox] as u64 - 1) * *sx as u64 + tiles[*fx] as u64;
            let groups = k.map_or(1, |(kd, per)| (tiles[kd] as u64).div_ceil(per as u64));
            rows * cols * tiles[*c] as u64 * groups
        }
    }
}

/// L2<->L1 bytes moved by literally executing the tiled loops of `order`
/// (outer to inner). An input tile is fetched whenever the tile it needs
/// changes. An output tile is written back whenever the loop moves away from
/// it and fetched again when a partially accumulated tile is revisited. Extra
/// operands are fetched once per distinct output tile.
pub fn replay_dma(model: &NestModel, tiles: &[usize], order: &[usize]) -> u64 {
    let trips: Vec<usize> = model.dims.iter().zip(tiles).map(|((_, e), t)| e / t).collect();
    let key = |mask: u32, idx: &[usize]| -> Vec<usize> {
        order.iter().enumerate().filter(|(_, &d)| mask & (1 << d) != 0).map(|(i, _)| idx[i]).collect()
    };
    let mut current: Vec<Option<Vec<usize>>> = vec![None; model.tensors.len()];
    let mut seen_out: HashSet<Vec<usize>> = HashSet::new();
    let mut bytes = 0u64;
    let mut idx = vec![0usize; order.len()];
    loop {
        for (i, t) in model.tensors.iter().enumerate() {
            let size = footprint(&t.footprint, tiles) * t.width;
            let k = key(t.relevant, &idx);
            if current[i].as_ref() == Some(&k) {
                continue;
            }
            match t.role {
                Role::Input => bytes += size,
                Role::Output => {
                    if current[i].is_some() {
                        bytes += size;
                    }
                    if !seen_out.insert(k.clone()) {
                        bytes += size;
                    }
                }
                Role::Extra => {}
            }
            current[i] = Some(k);
        }
        // Advance the odometer, innermost loop fastest.
        let mut pos = order.len();
        loop {
            if pos == 0 {
                let mut total = bytes;
                for (i, t) in model.tensors.iter().enumerate() {
                    let size = footprint(&t.footprint, tiles) * t.width;
                    match t.role {
                        Role::Output if current[i].is_some() => total += size,
                        Role::Extra => {
                            let distinct = seen_out.len().max(1) as u64;
                            total += size * distinct;
                        }
                        _ => {}
                    }
                }
                return total;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < trips[order[pos]] {
                break;
            }
            idx[pos] = 0;
        }
    }
}
