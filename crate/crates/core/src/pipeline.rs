//! End-to-end composition: load, match, solve, rewrite, refine, plan,
//! simulate and verify.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::device_map::{refine_latencies, Latencies};
use crate::error::{Error, Result};
use crate::model_ir::{Graph, TileConfig};
use crate::pattern_match::{enumerate_matches, Match};
use crate::platform::Platform;
use crate::rewrite::{apply_assignment, verify_rewrite, RewriteReport, TiledGraph};
use crate::sched_mem::{plan_with, Plan, PlanOptions};
use crate::sim_exec::{random_tensors, simulate, Timeline};
use crate::tile_alloc::{baseline_assignment, build_problem, solve_with, Proof, SolveMode, SolveOptions, TileAssignment, TileProblem};

/// Search nodes explored by exact mode when no other limit is given.
pub const DEFAULT_NODE_LIMIT: u64 = 50_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    /// Tiled, fused and asynchronous multi-device execution.
    Optimized,
    /// Asynchronous multi-device execution without splitting operators.
    LayerAsync,
    /// Each operator whole on its fastest device, one kernel at a time.
    SequentialBaseline,
}

impl Approach {
    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Optimized => "optimized",
            Approach::LayerAsync => "layer_async",
            Approach::SequentialBaseline => "sequential_baseline",
        }
    }
}

impl std::str::FromStr for Approach {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "optimized" => Ok(Approach::Optimized),
            "layer_async" => Ok(Approach::LayerAsync),
            "sequential_baseline" => Ok(Approach::SequentialBaseline),
            other => Err(format!("unknown approach `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub tiles: TileConfig,
    pub mode: SolveMode,
    pub budget: Option<Duration>,
    pub node_limit: Option<u64>,
    pub seed: u64,
    pub approach: Approach,
    /// Check rewrite equivalence numerically.
    pub verify: bool,
    /// With `Approach::Optimized`, also plan the unsplit candidates and keep
    /// the shortest makespan.
    pub fallback: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tiles: TileConfig::default(),
            mode: SolveMode::Exact,
            budget: None,
            node_limit: Some(DEFAULT_NODE_LIMIT),
            seed: 0,
            approach: Approach::Optimized,
            verify: true,
            fallback: true,
        }
    }
}

impl RunConfig {
    pub fn with_approach(mut self, approach: Approach) -> Self {
        self.approach = approach;
        self
    }
}

/// Artifacts of every stage.
#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Input graph with the run's tile counts.
    pub graph: Graph,
    pub tiles: TileConfig,
    pub matches: Vec<Match>,
    pub problem: TileProblem,
    pub assignment: TileAssignment,
    pub tiled: TiledGraph,
    pub latencies: Latencies,
    pub plan: Plan,
    pub timeline: Timeline,
    pub report: Option<RewriteReport>,
    /// Exact search stopped at its budget; the assignment is the incumbent.
    pub budget_exhausted: bool,
    /// Candidate whose plan was kept.
    pub selected: Approach,
    /// Makespan of every planned candidate, in planning order.
    pub candidates: Vec<(Approach, u64)>,
}

/// Tile configuration with per-operator counts stored in the model taking
/// precedence over the run default.
pub fn effective_tiles(g: &Graph, cfg: &TileConfig) -> TileConfig {
    let mut out = cfg.clone();
    for op in g.operators() {
        if op.tile_count > 1 {
            out.overrides.entry(op.name.clone()).or_insert(op.tile_count);
        }
    }
    out
}

/// Tile configuration used by `cfg.approach`.
pub fn run_tiles(g: &Graph, cfg: &RunConfig) -> TileConfig {
    match cfg.approach {
        Approach::Optimized => effective_tiles(g, &cfg.tiles),
        Approach::LayerAsync | Approach::SequentialBaseline => TileConfig::uniform(1),
    }
}

/// Loads the tile configuration, enumerates matches and solves the tile problem.
pub fn assign(g: &Graph, plat: &Platform, cfg: &RunConfig) -> Result<(Graph, Vec<Match>, TileProblem, TileAssignment)> {
    let g = g.with_tiles(&run_tiles(g, cfg))?;
    let matches = enumerate_matches(&g, plat);
    let problem = build_problem(&g, &matches, plat)?;
    let assignment = match cfg.approach {
        Approach::SequentialBaseline => {
            let t = baseline_assignment(&problem)
                .ok_or_else(|| Error::Infeasible("no unsplit cover of the graph exists".into()))?;
            problem.assignment(t, Proof::Optimal)?
        }
        _ => solve_with(&problem, &SolveOptions { mode: cfg.mode, budget: cfg.budget, node_limit: cfg.node_limit })?,
    };
    Ok((g, matches, problem, assignment))
}

struct Candidate {
    graph: Graph,
    tiles: TileConfig,
    matches: Vec<Match>,
    problem: TileProblem,
    assignment: TileAssignment,
    tiled: TiledGraph,
    latencies: Latencies,
    plan: Plan,
}

fn candidate(g: &Graph, plat: &Platform, cfg: &RunConfig, approach: Approach) -> Result<Candidate> {
    let cfg = RunConfig { approach, ..cfg.clone() };
    let (graph, matches, problem, assignment) = assign(g, plat, &cfg)?;
    let tiled = apply_assignment(&graph, &matches, &assignment.tiles)?;
    let latencies = refine_latencies(&tiled, plat)?;
    let opts = PlanOptions { sequential: approach == Approach::SequentialBaseline, exhaustive: false };
    let plan = plan_with(&tiled, &latencies, plat, &opts)?;
    Ok(Candidate { graph, tiles: run_tiles(g, &cfg), matches, problem, assignment, tiled, latencies, plan })
}

/// Runs every stage. Rewrite equivalence is checked on seeded random tensors
/// when `cfg.verify` is set.
pub fn run_end_to_end(g: &Graph, plat: &Platform, cfg: &RunConfig) -> Result<RunOutput> {
    let first = candidate(g, plat, cfg, cfg.approach)?;
    let budget_exhausted = cfg.approach != Approach::SequentialBaseline
        && cfg.mode == SolveMode::Exact
        && matches!(first.assignment.proof, Proof::Feasible { .. });
    let mut candidates = vec![(cfg.approach, first.plan.makespan_cycles)];
    let mut best = (cfg.approach, first);
    if cfg.approach == Approach::Optimized && cfg.fallback {
        for approach in [Approach::LayerAsync, Approach::SequentialBaseline] {
            let c = match candidate(g, plat, cfg, approach) {
                Ok(c) => c,
                Err(e) if e.is_infeasible() => continue,
                Err(e) => return Err(e),
            };
            candidates.push((approach, c.plan.makespan_cycles));
            if c.plan.makespan_cycles < best.1.plan.makespan_cycles {
                best = (approach, c);
            }
        }
    }
    let (selected, c) = best;
    let timeline = simulate(&c.plan, plat)?;
    let report = if cfg.verify {
        let (weights, inputs) = random_tensors(&c.graph, cfg.seed);
        Some(verify_rewrite(&c.graph, &c.tiled, &inputs, &weights)?)
    } else {
        None
    };
    Ok(RunOutput {
        graph: c.graph,
        tiles: c.tiles,
        matches: c.matches,
        problem: c.problem,
        assignment: c.assignment,
        tiled: c.tiled,
        latencies: c.latencies,
        plan: c.plan,
        timeline,
        report,
        budget_exhausted,
        selected,
        candidates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model_ir::{Conv2dAttrs, DType, GraphBuilder, OpAttrs, TensorKind};
    use crate::platform::reference_platform;

    fn residual() -> Graph {
        GraphBuilder::new()
            .tensor("x", &[1, 16, 16, 16], DType::I8, TensorKind::Input)
            .tensor("w1", &[3, 3, 16, 16], DType::I8, TensorKind::Weight)
            .tensor("w2", &[3, 3, 16, 16], DType::I8, TensorKind::Weight)
            .tensor("a", &[1, 16, 16, 16], DType::I8, TensorKind::Intermediate)
            .tensor("b", &[1, 16, 16, 16], DType::I8, TensorKind::Intermediate)
            .tensor("y", &[1, 16, 16, 16], DType::I8, TensorKind::Output)
            .op("c1", OpAttrs::Conv2d(Conv2dAttrs::square(3, 1, 1)), &["x", "w1"], "a")
            .op("c2", OpAttrs::Conv2d(Conv2dAttrs::square(3, 1, 1)), &["a", "w2"], "b")
            .op("add", OpAttrs::Add, &["b", "x"], "y")
            .build()
            .unwrap()
    }

    #[test]
    fn all_approaches_produce_consistent_plans() {
        let plat = reference_platform();
        let g = residual();
        for approach in [Approach::Optimized, Approach::LayerAsync, Approach::SequentialBaseline] {
            let out = run_end_to_end(&g, &plat, &RunConfig::default().with_approach(approach)).unwrap();
            assert_eq!(out.timeline.makespan_cycles, out.plan.makespan_cycles, "{approach:?}");
            assert!(out.timeline.divergent_tasks.is_empty());
            assert!(out.report.as_ref().unwrap().passes(&out.graph, 1e-5));
            assert!(!out.budget_exhausted);
        }
    }

    #[test]
    fn fallback_never_loses_to_the_unsplit_candidates() {
        let plat = reference_platform();
        let out = run_end_to_end(&residual(), &plat, &RunConfig::default()).unwrap();
        assert_eq!(out.candidates.len(), 3);
        let best = out.candidates.iter().map(|c| c.1).min().unwrap();
        assert_eq!(out.plan.makespan_cycles, best);
        let raw = run_end_to_end(&residual(), &plat, &RunConfig { fallback: false, ..RunConfig::default() }).unwrap();
        assert_eq!(raw.candidates.len(), 1);
        assert_eq!(raw.selected, Approach::Optimized);
    }

    #[test]
    fn model_tile_counts_override_the_default() {
        let mut specs = residual().specs();
        specs[0].tiles = Some(4);
        let g = Graph::new(residual().tensors().to_vec(), specs).unwrap();
        let t = effective_tiles(&g, &TileConfig::uniform(8));
        assert_eq!(t.overrides.get("c1"), Some(&4));
        let gt = g.with_tiles(&t).unwrap();
        assert_eq!(gt.op("c1").unwrap().tile_count, 4);
        assert_eq!(gt.op("c2").unwrap().tile_count, 8);
    }
}
