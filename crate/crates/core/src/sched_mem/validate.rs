use std::collections::BTreeMap;

use serde::Serialize;

use super::{memory_model, Level, Plan, ScheduledTask, TaskKind, DMA_RESOURCE};
use crate::platform::Platform;
use crate::rewrite::TiledGraph;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub violations: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn result(name: &str, violations: Vec<String>) -> CheckResult {
    CheckResult { name: name.to_string(), passed: violations.is_empty(), violations }
}

fn overlaps_in_order(tasks: &[&ScheduledTask]) -> Vec<String> {
    let mut sorted: Vec<&ScheduledTask> = tasks.to_vec();
    sorted.sort_by_key(|t| (t.start_cycle, t.end_cycle, t.id));
    sorted
        .windows(2)
        .filter(|w| w[1].start_cycle < w[0].end_cycle)
        .map(|w| format!("`{}` [{}, {}) overlaps `{}` [{}, {}) on {}", w[0].name, w[0].start_cycle, w[0].end_cycle, w[1].name, w[1].start_cycle, w[1].end_cycle, w[0].resource))
        .collect()
}

/// Peak bytes allocated at any cycle in `level`.
pub fn peak_usage(plan: &Plan, level: Level) -> u64 {
    let mut events: Vec<(u64, i128)> = Vec::new();
    for a in plan.allocations.iter().filter(|a| a.level == level && a.start_cycle < a.end_cycle) {
        events.push((a.start_cycle, a.size_bytes as i128));
        events.push((a.end_cycle, -(a.size_bytes as i128)));
    }
    events.sort();
    let (mut cur, mut peak) = (0i128, 0i128);
    for (_, d) in events {
        cur += d;
        peak = peak.max(cur);
    }
    peak as u64
}

/// Checks precedence, device exclusivity, DMA serialization, 2D packing and
/// residency of a plan against the tiled graph it schedules.
pub fn validate_plan(plan: &Plan, tg: &TiledGraph, plat: &Platform) -> ValidationReport {
    let mm = match memory_model(tg, &plat.host().name) {
        Ok(m) => m,
        Err(e) => {
            return ValidationReport { checks: vec![result("model", vec![e.to_string()])] };
        }
    };
    let by_id: BTreeMap<usize, &ScheduledTask> = plan.tasks.iter().map(|t| (t.id, t)).collect();
    let mut main_of: BTreeMap<&str, Vec<&ScheduledTask>> = BTreeMap::new();
    let mut dispatch_of: BTreeMap<&str, &ScheduledTask> = BTreeMap::new();
    for t in &plan.tasks {
        match (t.kind, t.node.as_deref()) {
            (TaskKind::Kernel | TaskKind::Helper, Some(n)) => main_of.entry(n).or_default().push(t),
            (TaskKind::Dispatch, Some(n)) => {
                dispatch_of.insert(n, t);
            }
            _ => {}
        }
    }
    let l2_allocs: Vec<_> = plan.allocations.iter().filter(|a| a.level == Level::L2).collect();
    let covering = |group: &str, t: &ScheduledTask| {
        l2_allocs.iter().find(|a| a.tensor == group && a.start_cycle <= t.start_cycle && a.end_cycle >= t.end_cycle).copied()
    };

    // (1) precedence
    let mut prec = Vec::new();
    for t in &plan.tasks {
        for d in &t.depends_on {
            match by_id.get(d) {
                Some(dt) if dt.end_cycle <= t.start_cycle => {}
                Some(dt) => prec.push(format!("`{}` starts at {} before dependency `{}` ends at {}", t.name, t.start_cycle, dt.name, dt.end_cycle)),
                None => prec.push(format!("`{}` depends on unknown task {d}", t.name)),
            }
        }
    }
    let mut producers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (j, job) in mm.jobs.iter().enumerate() {
        for &g in &job.writes {
            producers.entry(g).or_default().push(j);
        }
    }
    for (j, job) in mm.jobs.iter().enumerate() {
        let mains = main_of.get(job.node.as_str()).cloned().unwrap_or_default();
        if mains.len() != 1 {
            prec.push(format!("`{}` is executed {} times", job.node, mains.len()));
            continue;
        }
        let t = mains[0];
        if !job.is_helper {
            match dispatch_of.get(job.node.as_str()) {
                Some(d) if d.end_cycle <= t.start_cycle => {}
                Some(d) => prec.push(format!("`{}` starts before its dispatch ends at {}", t.name, d.end_cycle)),
                None => prec.push(format!("`{}` has no dispatch", t.name)),
            }
        }
        for &g in &job.reads {
            for &p in producers.get(&g).map(Vec::as_slice).unwrap_or(&[]) {
                if p == j {
                    continue;
                }
                if let Some(pt) = main_of.get(mm.jobs[p].node.as_str()).and_then(|v| v.first()) {
                    if pt.end_cycle > t.start_cycle {
                        prec.push(format!("`{}` starts at {} before producer `{}` ends at {}", t.name, t.start_cycle, pt.name, pt.end_cycle));
                    }
                }
            }
        }
        for g in job.touched() {
            if let Some(load) = covering(&mm.groups[g].name, t).and_then(|a| a.loaded_by).and_then(|id| by_id.get(&id)) {
                if load.end_cycle > t.start_cycle {
                    prec.push(format!("`{}` starts before load `{}` completes", t.name, load.name));
                }
            }
        }
    }

    // (2) device exclusivity, (3) DMA serialization
    let mut per_resource: BTreeMap<&str, Vec<&ScheduledTask>> = BTreeMap::new();
    let mut excl = Vec::new();
    let mut dma = Vec::new();
    for t in &plan.tasks {
        if t.kind.is_dma() != (t.resource == DMA_RESOURCE) {
            dma.push(format!("`{}` of kind {:?} runs on {}", t.name, t.kind, t.resource));
        }
        if t.resource != DMA_RESOURCE && plat.device(&t.resource).is_none() {
            excl.push(format!("`{}` runs on unknown device {}", t.name, t.resource));
        }
        per_resource.entry(t.resource.as_str()).or_default().push(t);
    }
    for (r, ts) in &per_resource {
        let v = overlaps_in_order(ts);
        if *r == DMA_RESOURCE {
            dma.extend(v);
        } else {
            excl.extend(v);
        }
    }

    // (4) 2D packing and capacity
    let mut pack = Vec::new();
    for (level, cap) in [(Level::L2, plat.memory.l2_bytes), (Level::L3, plat.memory.l3_bytes)] {
        let allocs: Vec<_> = plan.allocations.iter().filter(|a| a.level == level).collect();
        for a in &allocs {
            if a.address + a.size_bytes > cap {
                pack.push(format!("`{}` at {} + {} exceeds {level:?} capacity {cap}", a.tensor, a.address, a.size_bytes));
            }
            if a.start_cycle > a.end_cycle {
                pack.push(format!("`{}` has a reversed interval", a.tensor));
            }
        }
        for (i, a) in allocs.iter().enumerate() {
            for b in &allocs[i + 1..] {
                let space = a.address < b.address + b.size_bytes && b.address < a.address + a.size_bytes;
                let time = a.start_cycle < b.end_cycle && b.start_cycle < a.end_cycle;
                if space && time && a.size_bytes > 0 && b.size_bytes > 0 {
                    pack.push(format!(
                        "{level:?} allocations `{}` [{}, {}) @{} and `{}` [{}, {}) @{} overlap",
                        a.tensor, a.start_cycle, a.end_cycle, a.address, b.tensor, b.start_cycle, b.end_cycle, b.address
                    ));
                }
            }
        }
    }

    // (5) residency
    let mut res = Vec::new();
    for job in &mm.jobs {
        let Some(t) = main_of.get(job.node.as_str()).and_then(|v| v.first()) else { continue };
        for g in job.touched() {
            if covering(&mm.groups[g].name, t).is_none() {
                res.push(format!("`{}` is not L2-resident during `{}` [{}, {})", mm.groups[g].name, t.name, t.start_cycle, t.end_cycle));
            }
        }
    }

    ValidationReport {
        checks: vec![
            result("precedence", prec),
            result("device_exclusivity", excl),
            result("dma_serialization", dma),
            result("memory_packing", pack),
            result("residency", res),
        ],
    }
}
