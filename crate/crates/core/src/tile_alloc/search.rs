//! Solvers over a [`TileProblem`]: water-filling greedy, the unsplit
//! per-operator baseline cover, and exact branch-and-bound.

use std::collections::HashMap;
use std::time::{Duration, Instant};

use num_integer::Integer;

use super::{Proof, SolveMode, TileAssignment, TileProblem};
use crate::error::{Error, Result};
use crate::rational::Rational;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolveOptions {
    pub mode: SolveMode,
    /// Wall-clock limit for exact search.
    pub budget: Option<Duration>,
    /// Limit on explored search nodes for exact search (deterministic budget).
    pub node_limit: Option<u64>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { mode: SolveMode::Exact, budget: None, node_limit: None }
    }
}

/// Solves with a wall-clock budget; see [`solve_with`].
pub fn solve(p: &TileProblem, budget: Option<Duration>, mode: SolveMode) -> Result<TileAssignment> {
    solve_with(p, &SolveOptions { mode, budget, node_limit: None })
}

/// Exact mode returns a proven optimum unless a budget stops the search, in
/// which case the incumbent is returned with its optimality gap. Greedy mode
/// returns the better of water-filling and the unsplit baseline cover.
pub fn solve_with(p: &TileProblem, opts: &SolveOptions) -> Result<TileAssignment> {
    let ctx = Ctx::new(p);
    let incumbent = ctx.greedy();
    match opts.mode {
        SolveMode::Greedy => match incumbent {
            Some(t) => {
                let gap = ctx.gap_of(&ctx.objective(&t), ctx.root_bound());
                p.assignment(t, Proof::Feasible { gap })
            }
            None => {
                let mut s = Search::new(&ctx, None, opts, true);
                s.run();
                match s.best {
                    Some((_, _, t)) => {
                        let gap = ctx.gap_of(&ctx.objective(&t), ctx.root_bound());
                        p.assignment(t, Proof::Feasible { gap })
                    }
                    None => Err(Error::Infeasible("no assignment satisfies tile conservation".into())),
                }
            }
        },
        SolveMode::Exact => {
            let seed = incumbent.map(|t| (ctx.objective(&t), count(&t), t));
            let mut s = Search::new(&ctx, seed, opts, false);
            s.run();
            let stopped = s.stopped;
            match s.best {
                Some((obj, _, t)) => {
                    let proof = if stopped { Proof::Feasible { gap: ctx.gap_of(&obj, ctx.root_bound()) } } else { Proof::Optimal };
                    p.assignment(t, proof)
                }
                None if stopped => Err(Error::Infeasible("budget exhausted before a feasible assignment was found".into())),
                None => Err(Error::Infeasible("no assignment satisfies tile conservation".into())),
            }
        }
    }
}

/// Better of water-filling and the baseline cover, if either exists.
pub fn greedy(p: &TileProblem) -> Option<Vec<usize>> {
    Ctx::new(p).greedy()
}

/// Unsplit cover with the least sequential latency sum: every operator runs
/// all of its tiles in exactly one match (layer-to-device assignment).
pub fn baseline_assignment(p: &TileProblem) -> Option<Vec<usize>> {
    Ctx::new(p).baseline()
}

fn count(t: &[usize]) -> usize {
    t.iter().filter(|&&v| v > 0).count()
}

/// Problem coefficients scaled to integers by a common denominator.
struct Ctx<'a> {
    p: &'a TileProblem,
    scale: i128,
    slope: Vec<i128>,
    fixed: Vec<i128>,
    helper: Vec<i128>,
    /// Per op, the cheapest per-tile cost among covering matches.
    min_cost: Vec<i128>,
    /// Per op, the stage every covering match loads, if they agree.
    pool: Vec<Option<usize>>,
    /// Per device, an upper bound on cheapest-cost work done per cycle,
    /// in units of `1 / EFFICIENCY_SCALE`.
    efficiency: Vec<i128>,
    /// Per stage, the summed efficiency of devices over ops confined to it.
    stage_efficiency: Vec<Vec<i128>>,
    /// Ops in processing order: by stage, then index.
    order: Vec<usize>,
    /// Per position in `order`, matches whose earliest node sits there.
    new_at: Vec<Vec<usize>>,
    /// Per position in `order`, matches anchored at or after it.
    anchored_from: Vec<Vec<usize>>,
    /// Per position in `order`, whether it starts a new stage.
    boundary: Vec<bool>,
}

impl<'a> Ctx<'a> {
    fn new(p: &'a TileProblem) -> Self {
        let mut scale: i128 = 1;
        let mut note = |r: &Rational| scale = scale.lcm(r.denom());
        for m in &p.matches {
            note(&m.slope);
            note(&m.fixed);
            m.node_cost.iter().for_each(&mut note);
        }
        p.ops.iter().for_each(|o| note(&o.helper_cycles));
        let s = |r: &Rational| (r * Rational::from_integer(scale)).to_integer();
        let mut min_cost = vec![i128::MAX; p.ops.len()];
        for m in &p.matches {
            for (k, &u) in m.nodes.iter().enumerate() {
                min_cost[u] = min_cost[u].min(s(&m.node_cost[k]));
            }
        }
        let mut stages: Vec<Vec<usize>> = vec![Vec::new(); p.ops.len()];
        for m in &p.matches {
            for &u in &m.nodes {
                if !stages[u].contains(&m.stage) {
                    stages[u].push(m.stage);
                }
            }
        }
        let mut dev_cost = vec![vec![i128::MAX; p.ops.len()]; p.devices.len()];
        for m in &p.matches {
            for (k, &u) in m.nodes.iter().enumerate() {
                dev_cost[m.device][u] = dev_cost[m.device][u].min(s(&m.node_cost[k]));
            }
        }
        let pool: Vec<Option<usize>> = stages.iter().map(|v| if v.len() == 1 { Some(v[0]) } else { None }).collect();
        let eff_over = |keep: &dyn Fn(usize) -> bool| -> Vec<i128> {
            dev_cost
                .iter()
                .map(|costs| {
                    costs
                        .iter()
                        .enumerate()
                        .filter(|&(u, &c)| c != i128::MAX && keep(u))
                        .map(|(u, &c)| {
                            if c == 0 {
                                EFFICIENCY_SCALE
                            } else {
                                Integer::div_ceil(&(min_cost[u] * EFFICIENCY_SCALE), &c)
                            }
                        })
                        .max()
                        .unwrap_or(0)
                })
                .collect()
        };
        let efficiency = eff_over(&|_| true);
        let stage_efficiency = (0..p.num_stages).map(|st| eff_over(&|u| pool[u] == Some(st))).collect();
        let mut order: Vec<usize> = (0..p.ops.len()).collect();
        order.sort_by_key(|&u| (p.ops[u].stage, u));
        let mut pos = vec![0; p.ops.len()];
        for (k, &u) in order.iter().enumerate() {
            pos[u] = k;
        }
        let mut new_at = vec![Vec::new(); p.ops.len()];
        for m in &p.matches {
            let first = m.nodes.iter().map(|&u| pos[u]).min().expect("non-empty");
            new_at[first].push(m.id);
        }
        for (k, list) in new_at.iter_mut().enumerate() {
            let u = order[k];
            let cost_at = |m: usize| {
                let pm = &p.matches[m];
                let i = pm.nodes.iter().position(|&w| w == u).unwrap_or(0);
                s(&pm.node_cost[i])
            };
            list.sort_by_key(|&m| (cost_at(m), m));
        }
        Ctx {
            p,
            scale,
            slope: p.matches.iter().map(|m| s(&m.slope)).collect(),
            fixed: p.matches.iter().map(|m| s(&m.fixed)).collect(),
            helper: p.ops.iter().map(|o| s(&o.helper_cycles)).collect(),
            min_cost,
            pool,
            efficiency,
            stage_efficiency,
            anchored_from: (0..p.ops.len()).map(|k| new_at[k..].iter().flatten().copied().collect()).collect(),
            boundary: (0..p.ops.len()).map(|k| k > 0 && p.ops[order[k]].stage != p.ops[order[k - 1]].stage).collect(),
            order,
            new_at,
        }
    }

    fn unscale(&self, v: i128) -> Rational {
        Rational::new(v, self.scale)
    }

    fn latency(&self, m: usize, t: usize) -> i128 {
        if t == 0 {
            0
        } else {
            self.slope[m] * t as i128 + self.fixed[m]
        }
    }

    /// Scaled stage-wise makespan of a conserving vector.
    fn objective(&self, t: &[usize]) -> i128 {
        let p = self.p;
        let mut load = vec![vec![0i128; p.devices.len()]; p.num_stages];
        for m in &p.matches {
            load[m.stage][m.device] += self.latency(m.id, t[m.id]);
        }
        let mut total: i128 = load.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum();
        for u in p.split_ops(t) {
            total += self.helper[u];
        }
        total
    }

    fn root_bound(&self) -> i128 {
        let s = Search::new(self, None, &SolveOptions::default(), false);
        let (b, e) = s.bound();
        (b / e).max(s.confined_bound())
    }

    fn gap_of(&self, obj: &i128, bound: i128) -> Rational {
        self.unscale((obj - bound).max(0))
    }

    /// Lower objective, then fewer instantiated matches, then tiles placed on
    /// lower match ids.
    fn better(&self, a: &(i128, usize, Vec<usize>), b: &(i128, usize, Vec<usize>)) -> bool {
        (a.0, a.1, std::cmp::Reverse(&a.2)) < (b.0, b.1, std::cmp::Reverse(&b.2))
    }

    fn greedy(&self) -> Option<Vec<usize>> {
        let cands: Vec<Vec<usize>> = [self.water_fill(), self.baseline()].into_iter().flatten().collect();
        cands
            .into_iter()
            .map(|t| (self.objective(&t), count(&t), t))
            .reduce(|a, b| if self.better(&b, &a) { b } else { a })
            .map(|x| self.polish(x.2))
    }

    /// Conserving moves of `k` tiles out of match `from`: into one match with
    /// the same nodes, or into one single-node match per node.
    fn moves(&self, from: usize) -> Vec<Vec<usize>> {
        let p = self.p;
        let nodes = &p.matches[from].nodes;
        let mut out: Vec<Vec<usize>> = p
            .matches
            .iter()
            .filter(|m| m.id != from && &m.nodes == nodes)
            .map(|m| vec![m.id])
            .collect();
        if nodes.len() > 1 {
            let singles: Vec<Vec<usize>> = nodes
                .iter()
                .map(|&u| p.matches.iter().filter(|m| m.nodes == [u]).map(|m| m.id).collect())
                .collect();
            let mut combos: Vec<Vec<usize>> = vec![Vec::new()];
            for opts in &singles {
                combos = combos.iter().flat_map(|c| opts.iter().map(move |&m| [c.clone(), vec![m]].concat())).collect();
            }
            out.extend(combos);
        }
        out
    }

    /// First-improvement hill climbing over tile transfers until no move yields
    /// a better candidate in the `(objective, matches used, vector)` order.
    fn polish(&self, mut t: Vec<usize>) -> Vec<usize> {
        let p = self.p;
        let mut cur = (self.objective(&t), count(&t), t.clone());
        let moves: Vec<Vec<Vec<usize>>> = (0..p.matches.len()).map(|m| self.moves(m)).collect();
        let mut rounds = 0;
        loop {
            rounds += 1;
            let mut improved = false;
            for from in 0..p.matches.len() {
                for dest in &moves[from] {
                    for forward in [true, false] {
                        let avail = if forward { t[from] } else { dest.iter().map(|&m| t[m]).min().unwrap_or(0) };
                        let mut k = avail;
                        while k > 0 {
                            let mut cand = t.clone();
                            if forward {
                                cand[from] -= k;
                                dest.iter().for_each(|&m| cand[m] += k);
                            } else {
                                cand[from] += k;
                                dest.iter().for_each(|&m| cand[m] -= k);
                            }
                            if p.matches[from].bound >= cand[from] && dest.iter().all(|&m| cand[m] <= p.matches[m].bound) {
                                let c = (self.objective(&cand), count(&cand), cand);
                                if self.better(&c, &cur) {
                                    t = c.2.clone();
                                    cur = c;
                                    improved = true;
                                    break;
                                }
                            }
                            k /= 2;
                        }
                    }
                }
            }
            if !improved || rounds >= 1000 {
                return t;
            }
        }
    }

    /// Per operator in stage order, hands out remaining tiles one at a time to
    /// the newly anchored match whose stage/device load grows least.
    fn water_fill(&self) -> Option<Vec<usize>> {
        let p = self.p;
        let mut t = vec![0usize; p.matches.len()];
        let mut used = vec![0usize; p.ops.len()];
        let mut load = vec![vec![0i128; p.devices.len()]; p.num_stages];
        for (k, &u) in self.order.iter().enumerate() {
            let mut r = p.ops[u].tiles.checked_sub(used[u])?;
            while r > 0 {
                let pick = self.new_at[k]
                    .iter()
                    .copied()
                    .filter(|&m| p.matches[m].nodes.iter().all(|&w| used[w] < p.ops[w].tiles))
                    .min_by_key(|&m| {
                        let pm = &p.matches[m];
                        let extra = self.slope[m] + if t[m] == 0 { self.fixed[m] } else { 0 };
                        (load[pm.stage][pm.device] + extra, m)
                    })?;
                let pm = &p.matches[pick];
                load[pm.stage][pm.device] += self.slope[pick] + if t[pick] == 0 { self.fixed[pick] } else { 0 };
                t[pick] += 1;
                for &w in &pm.nodes {
                    used[w] += 1;
                }
                r -= 1;
            }
        }
        p.check_conservation(&t).ok().map(|_| t)
    }

    fn baseline(&self) -> Option<Vec<usize>> {
        let p = self.p;
        // Whole-match options per op: every node carries the same tile total.
        let mut options: Vec<Vec<usize>> = vec![Vec::new(); p.ops.len()];
        for m in &p.matches {
            let tiles = p.ops[m.nodes[0]].tiles;
            if m.nodes.iter().all(|&w| p.ops[w].tiles == tiles) {
                for &w in &m.nodes {
                    options[w].push(m.id);
                }
            }
        }
        let cost = |m: usize| self.latency(m, p.matches[m].bound);
        let mut share = vec![i128::MAX; p.ops.len()];
        for (w, opts) in options.iter_mut().enumerate() {
            opts.sort_by_key(|&m| (cost(m) / p.matches[m].nodes.len() as i128, m));
            for &m in opts.iter() {
                share[w] = share[w].min(cost(m) / p.matches[m].nodes.len() as i128);
            }
            if opts.is_empty() {
                return None;
            }
        }
        struct Cover<'c> {
            order: &'c [usize],
            options: &'c [Vec<usize>],
            share: &'c [i128],
            covered: Vec<bool>,
            chosen: Vec<usize>,
            best: Option<(i128, Vec<usize>)>,
            nodes: u64,
        }
        impl Cover<'_> {
            fn dfs(&mut self, ctx: &Ctx, k: usize, cost: i128) {
                self.nodes += 1;
                if self.nodes > 200_000 && self.best.is_some() {
                    return;
                }
                let Some(pos) = (k..self.order.len()).find(|&i| !self.covered[self.order[i]]) else {
                    if self.best.as_ref().is_none_or(|b| cost < b.0) {
                        self.best = Some((cost, self.chosen.clone()));
                    }
                    return;
                };
                let rest: i128 =
                    self.order[pos..].iter().filter(|&&w| !self.covered[w]).map(|&w| self.share[w]).sum();
                if self.best.as_ref().is_some_and(|b| cost + rest >= b.0) {
                    return;
                }
                let u = self.order[pos];
                for i in 0..self.options[u].len() {
                    let m = self.options[u][i];
                    let nodes = &ctx.p.matches[m].nodes;
                    if nodes.iter().any(|&w| self.covered[w]) {
                        continue;
                    }
                    nodes.iter().for_each(|&w| self.covered[w] = true);
                    self.chosen.push(m);
                    self.dfs(ctx, pos + 1, cost + ctx.latency(m, ctx.p.matches[m].bound));
                    self.chosen.pop();
                    ctx.p.matches[m].nodes.iter().for_each(|&w| self.covered[w] = false);
                }
            }
        }
        let mut c = Cover {
            order: &self.order,
            options: &options,
            share: &share,
            covered: vec![false; p.ops.len()],
            chosen: Vec::new(),
            best: None,
            nodes: 0,
        };
        c.dfs(self, 0, 0);
        let (_, chosen) = c.best?;
        let mut t = vec![0usize; p.matches.len()];
        for m in chosen {
            t[m] = p.matches[m].bound;
        }
        p.check_conservation(&t).ok().map(|_| t)
    }
}

type Best = (i128, usize, Vec<usize>);

const EFFICIENCY_SCALE: i128 = 1 << 20;

struct Search<'c, 'a> {
    ctx: &'c Ctx<'a>,
    t: Vec<usize>,
    used: Vec<usize>,
    inst: Vec<u32>,
    load: Vec<Vec<i128>>,
    /// Least remaining work per stage, for ops confined to one stage.
    stage_work: Vec<i128>,
    /// Least remaining work of ops whose matches span stages.
    float_work: i128,
    helper_total: i128,
    best: Option<Best>,
    explored: u64,
    deadline: Option<Instant>,
    node_limit: Option<u64>,
    stop_at_first: bool,
    stopped: bool,
    memo: HashMap<Vec<u32>, Completion>,
}

/// What is known about the completions from a stage-boundary state.
enum Completion {
    /// Least completion cost and the nonzero tile counts achieving it.
    Exact(i128, Vec<(usize, usize)>),
    /// Every completion costs at least this much.
    AtLeast(i128),
}

const MEMO_LIMIT: usize = 1 << 20;

impl<'c, 'a> Search<'c, 'a> {
    fn new(ctx: &'c Ctx<'a>, seed: Option<Best>, opts: &SolveOptions, stop_at_first: bool) -> Self {
        let p = ctx.p;
        Search {
            ctx,
            t: vec![0; p.matches.len()],
            used: vec![0; p.ops.len()],
            inst: vec![0; p.ops.len()],
            load: vec![vec![0; p.devices.len()]; p.num_stages],
            stage_work: {
                let mut w = vec![0; p.num_stages];
                for (u, op) in p.ops.iter().enumerate() {
                    if let Some(s) = ctx.pool[u] {
                        w[s] += op.tiles as i128 * ctx.min_cost[u];
                    }
                }
                w
            },
            float_work: (0..p.ops.len())
                .filter(|&u| ctx.pool[u].is_none())
                .map(|u| p.ops[u].tiles as i128 * ctx.min_cost[u])
                .sum(),
            helper_total: 0,
            best: seed,
            explored: 0,
            deadline: opts.budget.map(|b| Instant::now() + b),
            node_limit: opts.node_limit,
            stop_at_first,
            stopped: false,
            memo: HashMap::new(),
        }
    }

    fn run(&mut self) {
        self.op_level(0);
    }

    fn out_of_budget(&mut self) -> bool {
        if self.stopped {
            return true;
        }
        self.explored += 1;
        let over_nodes = self.node_limit.is_some_and(|n| self.explored > n);
        let over_time = self.explored.is_multiple_of(1024) && self.deadline.is_some_and(|d| Instant::now() >= d);
        self.stopped = over_nodes || over_time;
        self.stopped
    }

    fn stage_sum(&self) -> i128 {
        self.load.iter().map(|row| row.iter().copied().max().unwrap_or(0)).sum()
    }

    /// Lower bound on the objective of any completion, as `(value * e, e)`.
    /// A stage lasting `T` lets device `d` finish at most `e_d * (T - load_d)`
    /// further cheapest-cost work, so each stage needs at least its current
    /// maximum and enough time for its confined work; floating work first
    /// fills leftover capacity.
    fn bound(&self) -> (i128, i128) {
        let eff = &self.ctx.efficiency;
        let e: i128 = eff.iter().sum::<i128>().max(1);
        let mut total = 0;
        let mut free = 0;
        for (row, &w) in self.load.iter().zip(&self.stage_work) {
            let max = row.iter().copied().max().unwrap_or(0);
            let filled = row.iter().zip(eff).map(|(&l, &q)| l * q).sum::<i128>() + w * EFFICIENCY_SCALE;
            let need = (e * max).max(filled);
            total += need;
            free += need - filled;
        }
        let spill = (self.float_work * EFFICIENCY_SCALE - free).max(0);
        (total + spill + e * self.helper_total, e)
    }

    /// Lower bound from stage-confined work alone, using each stage's own
    /// device efficiencies.
    fn confined_bound(&self) -> i128 {
        let mut total = self.helper_total;
        for ((row, &w), eff) in self.load.iter().zip(&self.stage_work).zip(&self.ctx.stage_efficiency) {
            let max = row.iter().copied().max().unwrap_or(0);
            let e: i128 = eff.iter().sum();
            let spread = if e == 0 {
                0
            } else {
                let filled = row.iter().zip(eff).map(|(&l, &q)| l * q).sum::<i128>() + w * EFFICIENCY_SCALE;
                Integer::div_ceil(&filled, &e)
            };
            total += max.max(spread);
        }
        total
    }

    /// True when no completion of the current partial vector can beat the incumbent.
    fn pruned(&self) -> bool {
        let Some(best) = &self.best else { return false };
        let (b, e) = self.bound();
        b >= e * best.0 || self.confined_bound() >= best.0
    }

    fn take_work(&mut self, w: usize, delta: i128) {
        match self.ctx.pool[w] {
            Some(s) => self.stage_work[s] += delta,
            None => self.float_work += delta,
        }
    }

    fn apply(&mut self, m: usize, v: usize) {
        if v == 0 {
            return;
        }
        let ctx = self.ctx;
        let pm = &ctx.p.matches[m];
        self.t[m] = v;
        for &w in &pm.nodes {
            self.used[w] += v;
            self.take_work(w, -(v as i128 * ctx.min_cost[w]));
            self.inst[w] += 1;
            if self.inst[w] == 2 {
                self.helper_total += ctx.helper[w];
            }
        }
        self.load[pm.stage][pm.device] += ctx.latency(m, v);
    }

    fn undo(&mut self, m: usize, v: usize) {
        if v == 0 {
            return;
        }
        let ctx = self.ctx;
        let pm = &ctx.p.matches[m];
        self.t[m] = 0;
        for &w in &pm.nodes {
            self.used[w] -= v;
            self.take_work(w, v as i128 * ctx.min_cost[w]);
            if self.inst[w] == 2 {
                self.helper_total -= ctx.helper[w];
            }
            self.inst[w] -= 1;
        }
        self.load[pm.stage][pm.device] -= ctx.latency(m, v);
    }

    fn capacity(&self, m: usize) -> usize {
        let p = self.ctx.p;
        p.matches[m].nodes.iter().map(|&w| p.ops[w].tiles - self.used[w]).min().unwrap_or(0)
    }

    fn op_level(&mut self, k: usize) {
        if self.stopped || (self.stop_at_first && self.best.is_some()) {
            return;
        }
        if k == self.ctx.order.len() {
            let sum = self.stage_sum();
            let cand = (sum + self.helper_total, count(&self.t), self.t.clone());
            if self.best.as_ref().is_none_or(|b| self.ctx.better(&cand, b)) {
                self.best = Some(cand);
            }
            return;
        }
        let u = self.ctx.order[k];
        let tiles = self.ctx.p.ops[u].tiles;
        if self.used[u] > tiles {
            return;
        }
        if self.stop_at_first || !self.ctx.boundary[k] {
            self.assign_in(k, 0, tiles - self.used[u]);
            return;
        }
        // At a stage boundary every later stage is still empty, so the best
        // completion depends only on what earlier fused matches claimed.
        let key = self.state_key(k);
        let prefix = self.stage_sum() + self.helper_total;
        match self.memo.get(&key) {
            Some(Completion::Exact(value, suffix)) => {
                let (value, suffix) = (*value, suffix.clone());
                suffix.iter().for_each(|&(m, v)| self.t[m] = v);
                let cand = (prefix + value, count(&self.t), self.t.clone());
                suffix.iter().for_each(|&(m, _)| self.t[m] = 0);
                if self.best.as_ref().is_none_or(|b| self.ctx.better(&cand, b)) {
                    self.best = Some(cand);
                }
                return;
            }
            Some(Completion::AtLeast(bound)) if self.best.as_ref().is_some_and(|b| prefix + bound >= b.0) => return,
            _ => {}
        }
        let before = self.best.as_ref().map(|b| b.0);
        self.assign_in(k, 0, tiles - self.used[u]);
        if self.stopped || self.memo.len() >= MEMO_LIMIT {
            return;
        }
        let entry = match &self.best {
            Some(b) if before != Some(b.0) => {
                let suffix = self.ctx.anchored_from[k].iter().filter(|&&m| b.2[m] > 0).map(|&m| (m, b.2[m])).collect();
                Completion::Exact(b.0 - prefix, suffix)
            }
            Some(b) => Completion::AtLeast(b.0 - prefix),
            None => Completion::AtLeast(i128::MAX / 4),
        };
        self.memo.insert(key, entry);
    }

    fn state_key(&self, k: usize) -> Vec<u32> {
        let rest = &self.ctx.order[k..];
        let mut key = Vec::with_capacity(1 + 2 * rest.len());
        key.push(k as u32);
        key.extend(rest.iter().map(|&w| self.used[w] as u32));
        key.extend(rest.iter().map(|&w| self.inst[w]));
        key
    }

    fn assign_in(&mut self, k: usize, j: usize, r: usize) {
        let list = &self.ctx.new_at[k];
        if j == list.len() {
            if r == 0 {
                self.op_level(k + 1);
            }
            return;
        }
        let m = list[j];
        let cap = self.capacity(m).min(r);
        let later: usize = list[j + 1..].iter().map(|&x| self.capacity(x)).sum();
        let lo = r.saturating_sub(later);
        if lo > cap {
            return;
        }
        for v in (lo..=cap).rev() {
            if self.out_of_budget() {
                return;
            }
            self.apply(m, v);
            if !self.pruned() {
                self.assign_in(k, j + 1, r - v);
            }
            self.undo(m, v);
            if self.stopped || (self.stop_at_first && self.best.is_some()) {
                return;
            }
        }
    }
}
