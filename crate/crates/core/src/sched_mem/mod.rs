//! Execution schedule and L2/L3 memory plan.
//!
//! Jobs are supernodes (a host dispatch followed by a kernel on the assigned
//! device) and copying helper operators (on the host). A list scheduler
//! advances time event by event; before a job starts, every tensor it touches
//! must hold an L2 address. When L2 is full the planner waits for running jobs
//! to release memory or evicts the resident tensor with the furthest next use,
//! whichever is estimated cheaper. Every task records, besides its data
//! dependencies, the task whose completion released it, so replaying
//! dependencies and per-resource order reproduces the planned times exactly.

mod schedule;
mod validate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_ir::TensorKind;
use crate::rewrite::TiledGraph;

pub use schedule::{plan, plan_with, PlanOptions};
pub use validate::{peak_usage, validate_plan, CheckResult, ValidationReport};

/// Resource name of the serialized L2<->L3 DMA engine.
pub const DMA_RESOURCE: &str = "system-dma";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Dispatch,
    Kernel,
    Helper,
    DmaL3ToL2,
    DmaL2ToL3,
}

impl TaskKind {
    pub fn is_dma(self) -> bool {
        matches!(self, TaskKind::DmaL3ToL2 | TaskKind::DmaL2ToL3)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledTask {
    pub id: usize,
    pub name: String,
    pub kind: TaskKind,
    pub resource: String,
    /// Supernode (kernel, dispatch) or helper operator (helper) executed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    /// Tensor group moved by a DMA task.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tensor: Option<String>,
    #[serde(default)]
    pub bytes: u64,
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub depends_on: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level {
    L2,
    L3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fixed address for the whole execution.
    StaticResident,
    /// Intermediate allocated at its first producer, released after its last reader.
    Dynamic,
    /// Intermediate evicted to L3 (L3 copy) or brought back (L2 copy).
    Swapped,
    /// Weight fetched from L3 on demand.
    PlannedLoad,
}

/// One residency of a tensor group at a fixed address over `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Allocation {
    /// Representative tensor of the alias group.
    pub tensor: String,
    pub members: Vec<String>,
    pub level: Level,
    pub address: u64,
    pub size_bytes: u64,
    pub start_cycle: u64,
    pub end_cycle: u64,
    pub strategy: Strategy,
    /// DMA task that filled this residency.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loaded_by: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub tasks: Vec<ScheduledTask>,
    pub allocations: Vec<Allocation>,
    pub makespan_cycles: u64,
    pub per_device_utilization: BTreeMap<String, f64>,
    pub l2_bytes: u64,
    pub l3_bytes: u64,
}

impl Plan {
    pub fn task(&self, id: usize) -> Option<&ScheduledTask> {
        self.tasks.get(id).filter(|t| t.id == id).or_else(|| self.tasks.iter().find(|t| t.id == id))
    }

    pub fn count(&self, kind: TaskKind) -> usize {
        self.tasks.iter().filter(|t| t.kind == kind).count()
    }
}

/// Class of an alias group, deciding its allocation policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum GroupClass {
    /// Contains a graph input or output: always statically resident.
    Io,
    Weight,
    Intermediate,
}

#[derive(Debug, Clone)]
pub(crate) struct GroupInfo {
    pub name: String,
    pub members: Vec<String>,
    pub size: u64,
    pub class: GroupClass,
}

#[derive(Debug, Clone)]
pub(crate) struct JobInfo {
    /// Supernode name or helper operator name.
    pub node: String,
    pub is_helper: bool,
    pub resource: String,
    pub reads: Vec<usize>,
    pub writes: Vec<usize>,
}

impl JobInfo {
    pub fn touched(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.reads.iter().chain(&self.writes).copied().collect();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Tensors that need L2 space, grouped by buffer sharing, and the jobs touching them.
#[derive(Debug, Clone)]
pub(crate) struct MemoryModel {
    pub groups: Vec<GroupInfo>,
    pub jobs: Vec<JobInfo>,
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

pub(crate) fn memory_model(tg: &TiledGraph, host: &str) -> Result<MemoryModel> {
    let g = &tg.graph;
    let mut names: BTreeSet<String> = BTreeSet::new();
    for s in &tg.supernodes {
        names.extend(s.inputs.iter().cloned());
        names.extend(s.outputs.iter().cloned());
    }
    for h in &tg.helpers {
        let op = g.op(&h.op).ok_or_else(|| Error::InvalidModel(format!("unknown helper `{}`", h.op)))?;
        names.extend(op.inputs.iter().cloned());
        names.extend(op.outputs.iter().cloned());
    }
    names.extend(g.input_tensors().map(|t| t.name.clone()));
    names.extend(g.output_tensors().map(|t| t.name.clone()));
    let names: Vec<String> = names.into_iter().collect();
    let index: BTreeMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut parent: Vec<usize> = (0..names.len()).collect();
    for h in tg.helpers.iter().filter(|h| h.alias) {
        let op = g.op(&h.op).expect("checked above");
        let out = index[op.output()];
        for i in &op.inputs {
            let (a, b) = (find(&mut parent, index[i.as_str()]), find(&mut parent, out));
            if a != b {
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..names.len() {
        let r = find(&mut parent, i);
        by_root.entry(r).or_default().push(i);
    }
    let mut groups = Vec::new();
    let mut group_of = BTreeMap::new();
    for members in by_root.values() {
        let infos: Vec<_> = members
            .iter()
            .map(|&i| g.tensor(&names[i]).ok_or_else(|| Error::InvalidModel(format!("unknown tensor `{}`", names[i]))))
            .collect::<Result<_>>()?;
        let rep = infos.iter().max_by(|a, b| a.size_bytes().cmp(&b.size_bytes()).then(b.name.cmp(&a.name))).expect("non-empty");
        let class = if infos.iter().any(|t| matches!(t.kind, TensorKind::Input | TensorKind::Output)) {
            GroupClass::Io
        } else if infos.iter().all(|t| t.kind == TensorKind::Weight) {
            GroupClass::Weight
        } else {
            GroupClass::Intermediate
        };
        for &i in members {
            group_of.insert(names[i].clone(), groups.len());
        }
        groups.push(GroupInfo {
            name: rep.name.clone(),
            members: members.iter().map(|&i| names[i].clone()).collect(),
            size: rep.size_bytes(),
            class,
        });
    }
    let groups_of = |ts: &[String]| -> Vec<usize> {
        let mut v: Vec<usize> = ts.iter().map(|t| group_of[t]).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let mut jobs = Vec::new();
    for s in &tg.supernodes {
        jobs.push(JobInfo {
            node: s.name.clone(),
            is_helper: false,
            resource: s.device.clone(),
            reads: groups_of(&s.inputs),
            writes: groups_of(&s.outputs),
        });
    }
    for h in tg.helpers.iter().filter(|h| !h.alias) {
        let op = g.op(&h.op).expect("checked above");
        jobs.push(JobInfo {
            node: h.op.clone(),
            is_helper: true,
            resource: host.to_string(),
            reads: groups_of(&op.inputs),
            writes: groups_of(&op.outputs),
        });
    }
    Ok(MemoryModel { groups, jobs })
}
