use std::cmp::Reverse;
use std::collections::{BTreeMap, VecDeque};

use super::{
    memory_model, Allocation, GroupClass, Level, MemoryModel, Plan, ScheduledTask, Strategy, TaskKind, DMA_RESOURCE,
};
use crate::device_map::Latencies;
use crate::error::{Error, Result};
use crate::platform::Platform;
use crate::rational;
use crate::rewrite::TiledGraph;

const EXHAUSTIVE_MAX_JOBS: usize = 8;
const ROUND_LIMIT: usize = 10_000_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlanOptions {
    /// Run one job at a time (dispatch, kernel or helper), as a sequential runtime would.
    pub sequential: bool,
    /// Try every job priority order (at most 8 jobs) and keep the shortest plan.
    pub exhaustive: bool,
}

pub fn plan(tg: &TiledGraph, lat: &Latencies, plat: &Platform) -> Result<Plan> {
    plan_with(tg, lat, plat, &PlanOptions::default())
}

pub fn plan_with(tg: &TiledGraph, lat: &Latencies, plat: &Platform, opts: &PlanOptions) -> Result<Plan> {
    let mm = memory_model(tg, &plat.host().name)?;
    let inst = Instance::new(&mm, lat, plat)?;
    let n = mm.jobs.len();
    if opts.exhaustive && n <= EXHAUSTIVE_MAX_JOBS {
        let mut order: Vec<usize> = (0..n).collect();
        let mut best: Option<Plan> = None;
        let mut first_err = None;
        loop {
            let mut rank = vec![0; n];
            for (i, &j) in order.iter().enumerate() {
                rank[j] = i;
            }
            match Scheduler::new(&inst, rank, opts.sequential).run() {
                Ok(p) => {
                    if best.as_ref().is_none_or(|b| p.makespan_cycles < b.makespan_cycles) {
                        best = Some(p);
                    }
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
            if !next_permutation(&mut order) {
                break;
            }
        }
        return best.ok_or_else(|| first_err.expect("at least one order was tried"));
    }
    Scheduler::new(&inst, inst.default_rank(), opts.sequential).run()
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

/// Static data of one planning problem.
struct Instance<'a> {
    mm: &'a MemoryModel,
    plat: &'a Platform,
    host: String,
    dispatch: u64,
    main_dur: Vec<u64>,
    preds: Vec<Vec<usize>>,
    succs: Vec<Vec<usize>>,
    users: Vec<Vec<usize>>,
    is_static: Vec<bool>,
    est: Vec<u64>,
    bl: Vec<u64>,
    topo_pos: Vec<usize>,
}

impl<'a> Instance<'a> {
    fn new(mm: &'a MemoryModel, lat: &Latencies, plat: &'a Platform) -> Result<Self> {
        let n = mm.jobs.len();
        let l2 = plat.memory.l2_bytes;
        for g in &mm.groups {
            if g.size > l2 {
                return Err(Error::TensorTooLarge { tensor: g.name.clone(), bytes: g.size, capacity: l2 });
            }
        }
        let mut main_dur = Vec::with_capacity(n);
        for j in &mm.jobs {
            let d = if j.is_helper { lat.helpers.get(&j.node) } else { lat.nodes.get(&j.node) };
            main_dur.push(*d.ok_or_else(|| Error::InvalidModel(format!("no latency for `{}`", j.node)))?);
        }
        let mut producers = vec![Vec::new(); mm.groups.len()];
        let mut users = vec![Vec::new(); mm.groups.len()];
        for (j, job) in mm.jobs.iter().enumerate() {
            for &g in &job.writes {
                producers[g].push(j);
            }
            for g in job.touched() {
                users[g].push(j);
            }
        }
        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (j, job) in mm.jobs.iter().enumerate() {
            let mut p: Vec<usize> = job.reads.iter().flat_map(|&g| producers[g].iter().copied()).filter(|&q| q != j).collect();
            p.sort_unstable();
            p.dedup();
            for &q in &p {
                succs[q].push(j);
            }
            preds[j] = p;
        }
        let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&j| indeg[j] == 0).collect();
        let mut topo = Vec::with_capacity(n);
        while let Some(j) = queue.pop_front() {
            topo.push(j);
            for &s in &succs[j] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    queue.push_back(s);
                }
            }
        }
        if topo.len() != n {
            let stuck = (0..n).find(|&j| indeg[j] > 0).expect("some job is stuck");
            return Err(Error::Cycle(mm.jobs[stuck].node.clone()));
        }
        let dispatch = plat.dispatch_overhead_cycles;
        let total = |j: usize| main_dur[j] + if mm.jobs[j].is_helper { 0 } else { dispatch };
        let mut est = vec![0u64; n];
        for &j in &topo {
            est[j] = preds[j].iter().map(|&p| est[p] + total(p)).max().unwrap_or(0);
        }
        let mut bl = vec![0u64; n];
        for &j in topo.iter().rev() {
            bl[j] = total(j) + succs[j].iter().map(|&s| bl[s]).max().unwrap_or(0);
        }
        let mut topo_pos = vec![0; n];
        for (i, &j) in topo.iter().enumerate() {
            topo_pos[j] = i;
        }

        let total_bytes: u64 = mm.groups.iter().map(|g| g.size).sum();
        let class_bytes = |c: GroupClass| -> u64 { mm.groups.iter().filter(|g| g.class == c).map(|g| g.size).sum() };
        let all_static = total_bytes <= l2;
        let io = class_bytes(GroupClass::Io);
        let ws = |j: &super::JobInfo, incl_weights: bool| -> u64 {
            j.touched()
                .iter()
                .map(|&g| &mm.groups[g])
                .filter(|g| g.class == GroupClass::Intermediate || (incl_weights && g.class == GroupClass::Weight))
                .map(|g| g.size)
                .sum()
        };
        let max_inter = mm.jobs.iter().map(|j| ws(j, false)).max().unwrap_or(0);
        let static_weights = io + class_bytes(GroupClass::Weight) + max_inter <= l2;
        let is_static: Vec<bool> = mm
            .groups
            .iter()
            .map(|g| all_static || g.class == GroupClass::Io || (g.class == GroupClass::Weight && static_weights))
            .collect();
        let static_bytes: u64 = mm.groups.iter().zip(&is_static).filter(|(_, s)| **s).map(|(g, _)| g.size).sum();
        if static_bytes > l2 {
            return Err(Error::Infeasible(format!(
                "graph inputs and outputs need {static_bytes} bytes of L2, capacity is {l2}"
            )));
        }
        for j in &mm.jobs {
            let need: u64 = j.touched().iter().filter(|&&g| !is_static[g]).map(|&g| mm.groups[g].size).sum();
            if static_bytes + need > l2 {
                return Err(Error::Infeasible(format!(
                    "working set of `{}` ({need} bytes) does not fit beside {static_bytes} static bytes in L2 of {l2}",
                    j.node
                )));
            }
        }
        Ok(Instance {
            mm,
            plat,
            host: plat.host().name.clone(),
            dispatch,
            main_dur,
            preds,
            succs,
            users,
            is_static,
            est,
            bl,
            topo_pos,
        })
    }

    /// Longest remaining path first, then topological position.
    fn default_rank(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.main_dur.len()).collect();
        order.sort_by_key(|&j| (Reverse(self.bl[j]), self.topo_pos[j]));
        let mut rank = vec![0; order.len()];
        for (i, &j) in order.iter().enumerate() {
            rank[j] = i;
        }
        rank
    }

    fn dma_cycles(&self, bytes: u64) -> u64 {
        rational::ceil_u64(&(rational::int(bytes as i128) / self.plat.memory.l2_l3_bw_bytes_per_cycle))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum GState {
    /// No data and no space yet.
    Empty,
    Resident,
    Loading,
    Evicting,
    InL3,
    Freed,
}

#[derive(Debug, Clone)]
struct GroupRt {
    state: GState,
    alloc: Option<usize>,
    pins: usize,
    pending: usize,
    dirty: bool,
    load_op: Option<usize>,
    last_store: Option<usize>,
    has_l3_copy: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum JState {
    Waiting,
    Ready,
    Prepared,
    Dispatching,
    Dispatched,
    Running,
    Done,
}

#[derive(Debug, Clone)]
struct JobRt {
    state: JState,
    preds_left: usize,
    loads: Vec<usize>,
    dispatch: Option<usize>,
    main: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Meta {
    Dispatch(usize),
    Main(usize),
    Load(usize),
    Store(usize),
}

#[derive(Debug, Clone)]
struct DmaOp {
    group: usize,
    load: bool,
    task: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
struct Block {
    addr: u64,
    size: u64,
    group: usize,
}

enum Prepare {
    Done,
    Evicted,
    Wait,
}

struct Scheduler<'a> {
    inst: &'a Instance<'a>,
    rank: Vec<usize>,
    sequential: bool,
    t: u64,
    tasks: Vec<ScheduledTask>,
    meta: Vec<Meta>,
    active: Vec<usize>,
    allocations: Vec<Allocation>,
    groups: Vec<GroupRt>,
    jobs: Vec<JobRt>,
    jobs_done: usize,
    blocks: Vec<Block>,
    ops: Vec<DmaOp>,
    dma_queue: VecDeque<usize>,
    busy: BTreeMap<String, u64>,
    last_on: BTreeMap<String, usize>,
    l3_top: u64,
}

impl<'a> Scheduler<'a> {
    fn new(inst: &'a Instance<'a>, rank: Vec<usize>, sequential: bool) -> Self {
        let mm = inst.mm;
        let groups = mm
            .groups
            .iter()
            .enumerate()
            .map(|(g, _)| GroupRt {
                state: GState::Empty,
                alloc: None,
                pins: 0,
                pending: inst.users[g].len(),
                dirty: false,
                load_op: None,
                last_store: None,
                has_l3_copy: false,
            })
            .collect();
        let jobs = (0..mm.jobs.len())
            .map(|j| JobRt {
                state: if inst.preds[j].is_empty() { JState::Ready } else { JState::Waiting },
                preds_left: inst.preds[j].len(),
                loads: Vec::new(),
                dispatch: None,
                main: None,
            })
            .collect();
        Scheduler {
            inst,
            rank,
            sequential,
            t: 0,
            tasks: Vec::new(),
            meta: Vec::new(),
            active: Vec::new(),
            allocations: Vec::new(),
            groups,
            jobs,
            jobs_done: 0,
            blocks: Vec::new(),
            ops: Vec::new(),
            dma_queue: VecDeque::new(),
            busy: BTreeMap::new(),
            last_on: BTreeMap::new(),
            l3_top: 0,
        }
    }

    fn alloc(&mut self, g: usize, level: Level, address: u64, strategy: Strategy) -> usize {
        let info = &self.inst.mm.groups[g];
        self.allocations.push(Allocation {
            tensor: info.name.clone(),
            members: info.members.clone(),
            level,
            address,
            size_bytes: info.size,
            start_cycle: self.t,
            end_cycle: u64::MAX,
            strategy,
            loaded_by: None,
        });
        self.allocations.len() - 1
    }

    fn l3_alloc(&mut self, g: usize, strategy: Strategy) -> Result<()> {
        let size = self.inst.mm.groups[g].size;
        if self.l3_top + size > self.inst.plat.memory.l3_bytes {
            return Err(Error::Infeasible(format!(
                "L3 cannot hold `{}` ({size} bytes)",
                self.inst.mm.groups[g].name
            )));
        }
        self.alloc(g, Level::L3, self.l3_top, strategy);
        self.l3_top += size;
        self.groups[g].has_l3_copy = true;
        Ok(())
    }

    fn init_memory(&mut self) -> Result<()> {
        let mut addr = 0;
        for g in 0..self.groups.len() {
            if self.inst.is_static[g] {
                self.alloc(g, Level::L2, addr, Strategy::StaticResident);
                let size = self.inst.mm.groups[g].size;
                self.blocks.push(Block { addr, size, group: g });
                addr += size;
                self.groups[g].state = GState::Resident;
            } else if self.inst.mm.groups[g].class == GroupClass::Weight {
                self.l3_alloc(g, Strategy::PlannedLoad)?;
                self.groups[g].state = GState::InL3;
            }
        }
        Ok(())
    }

    fn first_fit(&self, excluded: &[usize], need: &[(usize, u64)]) -> Option<Vec<(usize, u64)>> {
        let cap = self.inst.plat.memory.l2_bytes;
        let mut occupied: Vec<(u64, u64)> = self
            .blocks
            .iter()
            .filter(|b| !excluded.contains(&b.group))
            .map(|b| (b.addr, b.addr + b.size))
            .collect();
        occupied.sort_unstable();
        let mut out = Vec::with_capacity(need.len());
        for &(g, size) in need {
            let mut candidates: Vec<u64> = std::iter::once(0).chain(occupied.iter().map(|o| o.1)).collect();
            candidates.sort_unstable();
            let addr = candidates
                .into_iter()
                .find(|&a| a + size <= cap && occupied.iter().all(|&(s, e)| a + size <= s || e <= a))?;
            occupied.push((addr, addr + size));
            occupied.sort_unstable();
            out.push((g, addr));
        }
        Some(out)
    }

    fn release(&mut self, g: usize, state: GState) {
        if let Some(a) = self.groups[g].alloc.take() {
            self.allocations[a].end_cycle = self.t;
        }
        self.blocks.retain(|b| b.group != g);
        self.groups[g].state = state;
    }

    fn start_task(&mut self, kind: TaskKind, resource: &str, name: String, dur: u64, mut deps: Vec<usize>, meta: Meta) -> usize {
        deps.sort_unstable();
        deps.dedup();
        let natural = deps
            .iter()
            .map(|&d| self.tasks[d].end_cycle)
            .chain(self.last_on.get(resource).map(|&p| self.tasks[p].end_cycle))
            .max()
            .unwrap_or(0);
        if self.t > natural {
            let trigger = self.tasks.iter().find(|x| x.end_cycle == self.t).expect("time only advances to task ends").id;
            deps.push(trigger);
            deps.sort_unstable();
        }
        let id = self.tasks.len();
        let (node, tensor, bytes) = match meta {
            Meta::Dispatch(j) | Meta::Main(j) => (Some(self.inst.mm.jobs[j].node.clone()), None, 0),
            Meta::Load(op) | Meta::Store(op) => {
                let g = &self.inst.mm.groups[self.ops[op].group];
                (None, Some(g.name.clone()), g.size)
            }
        };
        self.tasks.push(ScheduledTask {
            id,
            name,
            kind,
            resource: resource.to_string(),
            node,
            tensor,
            bytes,
            start_cycle: self.t,
            end_cycle: self.t + dur,
            depends_on: deps,
        });
        self.meta.push(meta);
        self.active.push(id);
        self.busy.insert(resource.to_string(), self.t + dur);
        self.last_on.insert(resource.to_string(), id);
        id
    }

    fn idle(&self, resource: &str) -> bool {
        self.busy.get(resource).is_none_or(|&b| b <= self.t)
    }

    fn complete_due(&mut self) -> bool {
        let mut due: Vec<usize> = self.active.iter().copied().filter(|&id| self.tasks[id].end_cycle <= self.t).collect();
        if due.is_empty() {
            return false;
        }
        due.sort_unstable();
        self.active.retain(|id| !due.contains(id));
        for id in due {
            match self.meta[id] {
                Meta::Dispatch(j) => self.jobs[j].state = JState::Dispatched,
                Meta::Main(j) => self.finish_job(j),
                Meta::Load(op) => self.groups[self.ops[op].group].state = GState::Resident,
                Meta::Store(op) => {
                    let g = self.ops[op].group;
                    self.release(g, GState::InL3);
                    self.groups[g].dirty = false;
                    self.groups[g].last_store = Some(id);
                }
            }
        }
        true
    }

    fn finish_job(&mut self, j: usize) {
        self.jobs[j].state = JState::Done;
        self.jobs_done += 1;
        let job = &self.inst.mm.jobs[j];
        for &g in &job.writes {
            if !self.inst.is_static[g] {
                self.groups[g].dirty = true;
            }
        }
        for g in job.touched() {
            let rt = &mut self.groups[g];
            rt.pins -= 1;
            rt.pending -= 1;
            if rt.pending == 0 && !self.inst.is_static[g] {
                self.release(g, GState::Freed);
            }
        }
        for &s in &self.inst.succs[j] {
            self.jobs[s].preds_left -= 1;
            if self.jobs[s].preds_left == 0 {
                self.jobs[s].state = JState::Ready;
            }
        }
    }

    fn start_dma(&mut self) -> Result<bool> {
        if !self.idle(DMA_RESOURCE) {
            return Ok(false);
        }
        let Some(op) = self.dma_queue.pop_front() else { return Ok(false) };
        let g = self.ops[op].group;
        let size = self.inst.mm.groups[g].size;
        let dur = self.inst.dma_cycles(size);
        let name = &self.inst.mm.groups[g].name;
        let id = if self.ops[op].load {
            let deps = self.groups[g].last_store.into_iter().collect();
            let id = self.start_task(TaskKind::DmaL3ToL2, DMA_RESOURCE, format!("load:{name}"), dur, deps, Meta::Load(op));
            if let Some(a) = self.groups[g].alloc {
                self.allocations[a].loaded_by = Some(id);
            }
            id
        } else {
            if !self.groups[g].has_l3_copy {
                self.l3_alloc(g, Strategy::Swapped)?;
            }
            let name = name.clone();
            self.start_task(TaskKind::DmaL2ToL3, DMA_RESOURCE, format!("store:{name}"), dur, Vec::new(), Meta::Store(op))
        };
        self.ops[op].task = Some(id);
        Ok(true)
    }

    fn by_rank(&self, states: &[JState]) -> Vec<usize> {
        let mut v: Vec<usize> = (0..self.jobs.len()).filter(|&j| states.contains(&self.jobs[j].state)).collect();
        v.sort_by_key(|&j| self.rank[j]);
        v
    }

    fn loads_done(&self, j: usize) -> Option<Vec<usize>> {
        self.jobs[j]
            .loads
            .iter()
            .map(|&op| self.ops[op].task.filter(|&id| !self.active.contains(&id)))
            .collect()
    }

    fn start_prepared(&mut self) -> bool {
        let mut changed = false;
        for j in self.by_rank(&[JState::Prepared, JState::Dispatched]) {
            let job = &self.inst.mm.jobs[j];
            let pred_tasks: Vec<usize> = self.inst.preds[j].iter().map(|&p| self.jobs[p].main.expect("predecessor done")).collect();
            let host = self.inst.host.as_str();
            match (job.is_helper, self.jobs[j].state) {
                (false, JState::Prepared) if self.idle(host) => {
                    let name = format!("dispatch:{}", job.node);
                    let id = self.start_task(TaskKind::Dispatch, host, name, self.inst.dispatch, pred_tasks, Meta::Dispatch(j));
                    self.jobs[j].dispatch = Some(id);
                    self.jobs[j].state = JState::Dispatching;
                    changed = true;
                }
                (false, JState::Dispatched) if self.idle(&job.resource) => {
                    if let Some(mut deps) = self.loads_done(j) {
                        deps.push(self.jobs[j].dispatch.expect("dispatched"));
                        let id = self.start_task(TaskKind::Kernel, &job.resource, job.node.clone(), self.inst.main_dur[j], deps, Meta::Main(j));
                        self.jobs[j].main = Some(id);
                        self.jobs[j].state = JState::Running;
                        changed = true;
                    }
                }
                (true, JState::Prepared) if self.idle(host) => {
                    if let Some(mut deps) = self.loads_done(j) {
                        deps.extend(pred_tasks);
                        let id = self.start_task(TaskKind::Helper, host, job.node.clone(), self.inst.main_dur[j], deps, Meta::Main(j));
                        self.jobs[j].main = Some(id);
                        self.jobs[j].state = JState::Running;
                        changed = true;
                    }
                }
                _ => {}
            }
        }
        changed
    }

    fn in_flight(&self) -> bool {
        self.jobs
            .iter()
            .any(|j| matches!(j.state, JState::Prepared | JState::Dispatching | JState::Dispatched | JState::Running))
    }

    fn prepare_ready(&mut self) -> Result<bool> {
        let mut changed = false;
        for j in self.by_rank(&[JState::Ready]) {
            if self.sequential && self.in_flight() {
                break;
            }
            match self.try_prepare(j) {
                Prepare::Done | Prepare::Evicted => changed = true,
                Prepare::Wait => {}
            }
        }
        Ok(changed)
    }

    fn needs(&self, touched: &[usize]) -> Vec<(usize, u64)> {
        let mut need: Vec<(usize, u64)> = touched
            .iter()
            .filter(|&&g| matches!(self.groups[g].state, GState::Empty | GState::InL3))
            .map(|&g| (g, self.inst.mm.groups[g].size))
            .collect();
        need.sort_by_key(|&(g, s)| (Reverse(s), g));
        need
    }

    fn commit(&mut self, j: usize, touched: &[usize], placed: Vec<(usize, u64)>) {
        for (g, addr) in placed {
            let from_l3 = self.groups[g].state == GState::InL3;
            let strategy = match (from_l3, self.inst.mm.groups[g].class) {
                (false, _) => Strategy::Dynamic,
                (true, GroupClass::Weight) => Strategy::PlannedLoad,
                (true, _) => Strategy::Swapped,
            };
            let a = self.alloc(g, Level::L2, addr, strategy);
            self.groups[g].alloc = Some(a);
            self.blocks.push(Block { addr, size: self.inst.mm.groups[g].size, group: g });
            if from_l3 {
                self.ops.push(DmaOp { group: g, load: true, task: None });
                let op = self.ops.len() - 1;
                self.dma_queue.push_back(op);
                self.groups[g].load_op = Some(op);
                self.groups[g].state = GState::Loading;
            } else {
                self.groups[g].state = GState::Resident;
            }
        }
        let loads = touched.iter().filter(|&&g| self.groups[g].state == GState::Loading).map(|&g| self.groups[g].load_op.expect("loading")).collect();
        for &g in touched {
            self.groups[g].pins += 1;
        }
        self.jobs[j].loads = loads;
        self.jobs[j].state = JState::Prepared;
    }

    fn next_use(&self, g: usize) -> u64 {
        self.inst.users[g].iter().filter(|&&u| self.jobs[u].state != JState::Done).map(|&u| self.inst.est[u]).min().unwrap_or(u64::MAX)
    }

    /// Whether finishing job `j` releases some L2 residency.
    fn frees_memory(&self, j: usize) -> bool {
        self.inst.mm.jobs[j].touched().iter().any(|&g| {
            !self.inst.is_static[g] && matches!(self.groups[g].state, GState::Resident | GState::Loading) && self.groups[g].pending == 1
        })
    }

    /// Earliest known time at which L2 space is released.
    fn release_time(&self) -> Option<u64> {
        let running = self.active.iter().filter_map(|&id| match self.meta[id] {
            Meta::Main(j) if self.frees_memory(j) => Some(self.tasks[id].end_cycle),
            Meta::Store(_) => Some(self.tasks[id].end_cycle),
            _ => None,
        });
        let pending = (0..self.jobs.len()).filter_map(|j| {
            let rest = match self.jobs[j].state {
                JState::Prepared => self.inst.dispatch + self.inst.main_dur[j],
                JState::Dispatched => self.inst.main_dur[j],
                _ => return None,
            };
            self.frees_memory(j).then_some(self.t + rest)
        });
        running.chain(pending).min()
    }

    fn try_prepare(&mut self, j: usize) -> Prepare {
        let touched = self.inst.mm.jobs[j].touched();
        if touched.iter().any(|&g| self.groups[g].state == GState::Evicting) {
            return Prepare::Wait;
        }
        let need = self.needs(&touched);
        if let Some(placed) = self.first_fit(&[], &need) {
            self.commit(j, &touched, placed);
            return Prepare::Done;
        }
        let mut candidates: Vec<usize> = (0..self.groups.len())
            .filter(|&g| {
                let rt = &self.groups[g];
                rt.state == GState::Resident && rt.pins == 0 && !self.inst.is_static[g] && !touched.contains(&g)
            })
            .collect();
        candidates.sort_by_key(|&g| (Reverse(self.next_use(g)), Reverse(self.inst.mm.groups[g].size), g));
        let mut victims = Vec::new();
        let mut fits = false;
        for c in candidates {
            victims.push(c);
            if self.first_fit(&victims, &need).is_some() {
                fits = true;
                break;
            }
        }
        if !fits {
            return Prepare::Wait;
        }
        let swap_cost: u64 = victims
            .iter()
            .map(|&g| self.inst.dma_cycles(self.inst.mm.groups[g].size) * if self.groups[g].dirty { 2 } else { 1 })
            .sum();
        if self.release_time().is_some_and(|e| swap_cost >= e - self.t) {
            return Prepare::Wait;
        }
        let mut all_clean = true;
        for g in victims {
            if self.groups[g].dirty {
                all_clean = false;
                self.groups[g].state = GState::Evicting;
                self.ops.push(DmaOp { group: g, load: false, task: None });
                self.dma_queue.push_back(self.ops.len() - 1);
            } else {
                self.release(g, GState::InL3);
            }
        }
        if all_clean {
            let need = self.needs(&touched);
            let placed = self.first_fit(&[], &need).expect("victims released enough space");
            self.commit(j, &touched, placed);
            return Prepare::Done;
        }
        Prepare::Evicted
    }

    fn run(mut self) -> Result<Plan> {
        self.init_memory()?;
        let n = self.jobs.len();
        loop {
            let mut rounds = 0;
            loop {
                let mut changed = self.complete_due();
                changed |= self.start_dma()?;
                changed |= self.start_prepared();
                changed |= self.prepare_ready()?;
                if !changed {
                    break;
                }
                rounds += 1;
                if rounds > ROUND_LIMIT {
                    return Err(Error::Infeasible("memory planner made no progress".into()));
                }
            }
            if self.jobs_done == n && self.active.is_empty() && self.dma_queue.is_empty() {
                break;
            }
            let next = self.active.iter().map(|&id| self.tasks[id].end_cycle).filter(|&e| e > self.t).min();
            match next {
                Some(e) => self.t = e,
                None => {
                    let stuck = self.by_rank(&[JState::Ready]).first().map_or_else(String::new, |&j| self.inst.mm.jobs[j].node.clone());
                    return Err(Error::Infeasible(format!("cannot fit the working set of `{stuck}` in L2")));
                }
            }
        }
        let makespan = self.tasks.iter().map(|t| t.end_cycle).max().unwrap_or(0);
        for a in &mut self.allocations {
            if a.end_cycle == u64::MAX {
                a.end_cycle = makespan;
            }
        }
        let mut util = BTreeMap::new();
        for d in &self.inst.plat.devices {
            let busy: u64 = self.tasks.iter().filter(|t| t.resource == d.name).map(|t| t.end_cycle - t.start_cycle).sum();
            util.insert(d.name.clone(), if makespan == 0 { 0.0 } else { busy as f64 / makespan as f64 });
        }
        Ok(Plan {
            tasks: self.tasks,
            allocations: self.allocations,
            makespan_cycles: makespan,
            per_device_utilization: util,
            l2_bytes: self.inst.plat.memory.l2_bytes,
            l3_bytes: self.inst.plat.memory.l3_bytes,
        })
    }
}
