//! Joint pattern selection, tile allocation and device assignment.
//!
//! Every match `m` gets an integer tile count `t_m`. Per operator the counts of
//! all covering matches must add up to its tile total, a match's latency is
//! affine in `t_m`, and the objective is a stage-wise makespan model.

mod search;

use std::collections::BTreeMap;

use num_traits::Zero;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::{Graph, TensorKind, TileAxis};
use crate::pattern_match::Match;
use crate::platform::Platform;
use crate::rational::{self, Rational};

pub use search::{baseline_assignment, greedy, solve, solve_with, SolveOptions};

/// Operator-side data of a tile problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemOp {
    pub name: String,
    pub tiles: usize,
    pub ops_count: Rational,
    pub stage: usize,
    /// Host cycles charged to the stage when the operator's tiles are split
    /// across two or more instantiated matches.
    pub helper_cycles: Rational,
}

/// Match-side coefficients: latency is `slope * t + fixed` for `t > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProblemMatch {
    pub id: usize,
    pub pattern: String,
    pub device: usize,
    /// Covered operators (indices into `TileProblem::ops`) in chain order.
    pub nodes: Vec<usize>,
    pub work_per_tile: Rational,
    pub slope: Rational,
    /// Per-invocation overhead plus dispatch overhead.
    pub fixed: Rational,
    /// Largest admissible `t`: the smallest tile total among covered operators.
    pub bound: usize,
    /// Stage of the anchor operator; the match's load is charged there.
    pub stage: usize,
    /// Per covered node, cycles one tile of that node costs inside this match.
    pub node_cost: Vec<Rational>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileProblem {
    pub devices: Vec<String>,
    pub ops: Vec<ProblemOp>,
    pub matches: Vec<ProblemMatch>,
    /// Per operator, the ids of covering matches.
    pub covering: Vec<Vec<usize>>,
    pub num_stages: usize,
}

/// How the solver's result was obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Proof {
    Optimal,
    /// Search stopped early; `gap` is incumbent minus the best lower bound.
    Feasible {
        #[serde(with = "rational::serde_num")]
        gap: Rational,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMode {
    Exact,
    Greedy,
}

impl std::str::FromStr for SolveMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "exact" => Ok(SolveMode::Exact),
            "greedy" => Ok(SolveMode::Greedy),
            other => Err(format!("unknown mode `{other}` (expected exact or greedy)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TileAssignment {
    /// `t` per match id.
    pub tiles: Vec<usize>,
    pub objective: Rational,
    pub per_device_load: BTreeMap<String, Rational>,
    pub proof: Proof,
}

impl TileAssignment {
    pub fn instantiated(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tiles.iter().copied().enumerate().filter(|&(_, t)| t > 0)
    }
}

impl TileProblem {
    /// Evaluates a candidate vector and packages it as an assignment.
    pub fn assignment(&self, tiles: Vec<usize>, proof: Proof) -> Result<TileAssignment> {
        let objective = makespan_model(self, &tiles)?;
        let mut per_device_load: BTreeMap<String, Rational> =
            self.devices.iter().map(|d| (d.clone(), Rational::zero())).collect();
        for m in &self.matches {
            *per_device_load.get_mut(&self.devices[m.device]).expect("device listed") +=
                latency_of(m, tiles[m.id]);
        }
        Ok(TileAssignment { tiles, objective, per_device_load, proof })
    }

    /// Operators whose tiles are spread over two or more instantiated matches.
    pub fn split_ops(&self, tiles: &[usize]) -> Vec<usize> {
        (0..self.ops.len())
            .filter(|&u| self.covering[u].iter().filter(|&&m| tiles[m] > 0).count() >= 2)
            .collect()
    }

    pub fn check_conservation(&self, tiles: &[usize]) -> Result<()> {
        if tiles.len() != self.matches.len() {
            return Err(Error::InvalidModel(format!(
                "assignment has {} entries for {} matches",
                tiles.len(),
                self.matches.len()
            )));
        }
        for m in &self.matches {
            if tiles[m.id] > m.bound {
                return Err(Error::TileBound { match_id: m.id, tiles: tiles[m.id], bound: m.bound });
            }
        }
        for (u, op) in self.ops.iter().enumerate() {
            let assigned: usize = self.covering[u].iter().map(|&m| tiles[m]).sum();
            if assigned != op.tiles {
                return Err(Error::Conservation { op: op.name.clone(), assigned, expected: op.tiles });
            }
        }
        Ok(())
    }
}

fn latency_of(m: &ProblemMatch, t: usize) -> Rational {
    if t == 0 {
        Rational::zero()
    } else {
        m.slope * rational::int(t as i128) + m.fixed
    }
}

/// Modeled latency of match `id` running `t` tiles.
pub fn match_latency(p: &TileProblem, id: usize, t: usize) -> Result<Rational> {
    let m = p.matches.get(id).ok_or(Error::UnknownMatch(id))?;
    if t > m.bound {
        return Err(Error::TileBound { match_id: id, tiles: t, bound: m.bound });
    }
    Ok(latency_of(m, t))
}

/// Sum over stages of the slowest device's load plus the stage's helper time.
pub fn makespan_model(p: &TileProblem, tiles: &[usize]) -> Result<Rational> {
    p.check_conservation(tiles)?;
    Ok(stage_times(p, tiles).into_iter().sum())
}

/// Per-stage modeled time of a conserving candidate.
pub fn stage_times(p: &TileProblem, tiles: &[usize]) -> Vec<Rational> {
    let mut load = vec![vec![Rational::zero(); p.devices.len()]; p.num_stages];
    for m in &p.matches {
        load[m.stage][m.device] += latency_of(m, tiles[m.id]);
    }
    let mut times: Vec<Rational> =
        load.iter().map(|row| row.iter().copied().max().unwrap_or_else(Rational::zero)).collect();
    for u in p.split_ops(tiles) {
        times[p.ops[u].stage] += p.ops[u].helper_cycles;
    }
    times
}

/// Bytes the host moves when operator `u` is split: row-tiled operators slice
/// their activation inputs and concatenate their output; neuron-tiled
/// operators slice weights offline and concatenate in place.
pub fn helper_bytes(g: &Graph, op: usize) -> u64 {
    let op = &g.operators()[op];
    match op.tile_axis {
        TileAxis::OutputRows => {
            let inputs: u64 = op
                .inputs
                .iter()
                .filter_map(|t| g.tensor(t))
                .filter(|t| t.kind != TensorKind::Weight)
                .map(|t| t.size_bytes())
                .sum();
            inputs + g.tensor(op.output()).map_or(0, |t| t.size_bytes())
        }
        TileAxis::OutputNeurons | TileAxis::None => 0,
    }
}

/// Builds the problem for a graph whose tile counts are already set.
pub fn build_problem(g: &Graph, matches: &[Match], plat: &Platform) -> Result<TileProblem> {
    let mut b = ProblemBuilder::new(plat.dispatch_overhead_cycles);
    let devices: Vec<usize> = plat.devices.iter().map(|d| b.device(&d.name, d.alpha)).collect();
    for (i, op) in g.operators().iter().enumerate() {
        let helper = rational::int(helper_bytes(g, i) as i128) * plat.helper_cost_per_byte;
        b.op(&op.name, op.tile_count, rational::int(op.ops_count as i128), g.stage(i), helper);
    }
    for m in matches {
        let pattern = plat
            .pattern(&m.pattern)
            .ok_or_else(|| Error::InvalidModel(format!("match {} names unknown pattern `{}`", m.id, m.pattern)))?;
        let device = plat
            .device_index(&pattern.device)
            .ok_or_else(|| Error::UnknownDevice { pattern: pattern.name.clone(), device: pattern.device.clone() })?;
        let nodes = m
            .nodes
            .iter()
            .map(|n| g.op_position(n).ok_or_else(|| Error::InvalidModel(format!("match {} names unknown op `{n}`", m.id))))
            .collect::<Result<Vec<_>>>()?;
        b.add_match(&m.pattern, devices[device], pattern.eta, pattern.delta_cycles, &nodes);
    }
    b.build()
}

/// Assembles a [`TileProblem`] from raw coefficients.
#[derive(Debug, Clone)]
pub struct ProblemBuilder {
    dispatch: u64,
    devices: Vec<(String, Rational)>,
    ops: Vec<ProblemOp>,
    matches: Vec<(String, usize, Rational, u64, Vec<usize>)>,
}

impl ProblemBuilder {
    pub fn new(dispatch_overhead_cycles: u64) -> Self {
        ProblemBuilder { dispatch: dispatch_overhead_cycles, devices: Vec::new(), ops: Vec::new(), matches: Vec::new() }
    }

    /// Adds a device with speed `alpha` (cycles per operation); returns its index.
    pub fn device(&mut self, name: &str, alpha: Rational) -> usize {
        self.devices.push((name.to_string(), alpha));
        self.devices.len() - 1
    }

    pub fn op(&mut self, name: &str, tiles: usize, ops_count: Rational, stage: usize, helper_cycles: Rational) -> usize {
        self.ops.push(ProblemOp { name: name.to_string(), tiles, ops_count, stage, helper_cycles });
        self.ops.len() - 1
    }

    pub fn add_match(&mut self, pattern: &str, device: usize, eta: Rational, delta: u64, nodes: &[usize]) -> usize {
        self.matches.push((pattern.to_string(), device, eta, delta, nodes.to_vec()));
        self.matches.len() - 1
    }

    pub fn build(self) -> Result<TileProblem> {
        let num_stages = self.ops.iter().map(|o| o.stage + 1).max().unwrap_or(0);
        let mut covering = vec![Vec::new(); self.ops.len()];
        let mut matches = Vec::with_capacity(self.matches.len());
        for (id, (pattern, device, eta, delta, nodes)) in self.matches.into_iter().enumerate() {
            if nodes.is_empty() || device >= self.devices.len() || nodes.iter().any(|&u| u >= self.ops.len()) {
                return Err(Error::InvalidModel(format!("malformed match {id}")));
            }
            if eta <= Rational::zero() {
                return Err(Error::Efficiency { pattern, value: rational::exact_string(&eta) });
            }
            let alpha = self.devices[device].1;
            let node_cost: Vec<Rational> = nodes
                .iter()
                .map(|&u| {
                    let op = &self.ops[u];
                    op.ops_count / rational::int(op.tiles as i128) * alpha / eta
                })
                .collect();
            let work_per_tile: Rational =
                nodes.iter().map(|&u| self.ops[u].ops_count / rational::int(self.ops[u].tiles as i128)).sum();
            for &u in &nodes {
                covering[u].push(id);
            }
            matches.push(ProblemMatch {
                id,
                pattern,
                device,
                bound: nodes.iter().map(|&u| self.ops[u].tiles).min().expect("non-empty"),
                stage: self.ops[nodes[0]].stage,
                slope: work_per_tile * alpha / eta,
                work_per_tile,
                fixed: rational::int(delta as i128 + self.dispatch as i128),
                nodes,
                node_cost,
            });
        }
        for (u, cov) in covering.iter().enumerate() {
            if cov.is_empty() {
                return Err(Error::Infeasible(format!("operator `{}` is not covered by any match", self.ops[u].name)));
            }
        }
        Ok(TileProblem {
            devices: self.devices.into_iter().map(|d| d.0).collect(),
            ops: self.ops,
            matches,
            covering,
            num_stages,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_traits::One;

    fn r(n: i128) -> Rational {
        rational::int(n)
    }

    /// conv (64000 ops) -> add (2048 ops), both T = 16.
    fn fig3(alpha1: Rational, eta1: Rational, delta1: u64) -> TileProblem {
        let mut b = ProblemBuilder::new(0);
        let host = b.device("host", Rational::one());
        let d1 = b.device("dev1", alpha1);
        let d2 = b.device("dev2", Rational::one());
        let conv = b.op("conv", 16, r(64000), 0, Rational::zero());
        let add = b.op("add", 16, r(2048), 1, Rational::zero());
        b.add_match("conv", d1, eta1, delta1, &[conv]);
        b.add_match("conv_add", d2, Rational::one(), 0, &[conv, add]);
        b.add_match("wildcard", host, Rational::one(), 0, &[add]);
        b.add_match("wildcard", host, Rational::one(), 0, &[conv]);
        b.build().unwrap()
    }

    #[test]
    fn fused_work_per_tile() {
        let p = fig3(Rational::one(), Rational::one(), 0);
        assert_eq!(p.matches[1].work_per_tile, r(4128));
        assert_eq!(p.matches[2].slope, r(128));
    }

    #[test]
    fn latency_examples() {
        let p = fig3(Rational::new(1, 2), Rational::new(4, 5), 100);
        assert_eq!(match_latency(&p, 0, 6).unwrap(), r(15100));
        assert_eq!(match_latency(&p, 0, 0).unwrap(), r(0));
        assert_eq!(match_latency(&p, 3, 16).unwrap(), r(64000));
        assert!(matches!(match_latency(&p, 0, 17), Err(Error::TileBound { .. })));
        assert_eq!(match_latency(&p, 9, 1), Err(Error::UnknownMatch(9)));
    }

    #[test]
    fn single_tile_work_is_total() {
        let mut b = ProblemBuilder::new(0);
        let d = b.device("host", Rational::one());
        let u = b.op("relu", 1, r(777), 0, Rational::zero());
        b.add_match("wildcard", d, Rational::one(), 0, &[u]);
        assert_eq!(b.build().unwrap().matches[0].work_per_tile, r(777));
    }

    fn two_identical(helper: Rational) -> TileProblem {
        let mut b = ProblemBuilder::new(0);
        let host = b.device("host", r(100));
        let a = b.device("a", Rational::one());
        let c = b.device("b", Rational::one());
        let conv = b.op("conv", 16, r(32000), 0, helper);
        b.add_match("pa", a, Rational::one(), 0, &[conv]);
        b.add_match("pb", c, Rational::one(), 0, &[conv]);
        b.add_match("wildcard", host, Rational::one(), 0, &[conv]);
        b.build().unwrap()
    }

    #[test]
    fn balanced_split_halves_stage_time() {
        let p = two_identical(Rational::zero());
        assert_eq!(makespan_model(&p, &[16, 0, 0]).unwrap(), r(32000));
        assert_eq!(makespan_model(&p, &[8, 8, 0]).unwrap(), r(16000));
    }

    #[test]
    fn helper_cost_charged_only_when_split() {
        let p = two_identical(r(20000));
        assert_eq!(makespan_model(&p, &[16, 0, 0]).unwrap(), r(32000));
        assert_eq!(makespan_model(&p, &[8, 8, 0]).unwrap(), r(36000));
    }

    #[test]
    fn conservation_violation_rejected() {
        let p = two_identical(Rational::zero());
        assert_eq!(
            makespan_model(&p, &[8, 7, 0]).unwrap_err(),
            Error::Conservation { op: "conv".into(), assigned: 15, expected: 16 }
        );
    }
}
