//! Event-driven replay of a plan and its Gantt renderings.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::platform::Platform;
use crate::sched_mem::{Plan, TaskKind, DMA_RESOURCE};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Interval {
    pub task: usize,
    pub name: String,
    pub kind: TaskKind,
    pub start: u64,
    pub end: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub resource: String,
    pub intervals: Vec<Interval>,
}

/// Cycles of one resource by category; the fields sum to the makespan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Breakdown {
    pub kernel: u64,
    pub dma: u64,
    pub helper: u64,
    pub dispatch: u64,
    pub idle: u64,
}

impl Breakdown {
    pub fn total(&self) -> u64 {
        self.kernel + self.dma + self.helper + self.dispatch + self.idle
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub rows: Vec<Row>,
    pub makespan_cycles: u64,
    pub utilization: BTreeMap<String, f64>,
    pub breakdown: BTreeMap<String, Breakdown>,
    /// Tasks whose replayed start differs from the planned start.
    pub divergent_tasks: Vec<usize>,
}

/// Replays `plan`: each task starts once its dependencies and the previous
/// task on its resource (in planned order) have finished, and lasts as long as planned.
pub fn simulate(plan: &Plan, plat: &Platform) -> Result<Timeline> {
    let n = plan.tasks.len();
    let pos: BTreeMap<usize, usize> = plan.tasks.iter().enumerate().map(|(i, t)| (t.id, i)).collect();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, t) in plan.tasks.iter().enumerate() {
        for d in &t.depends_on {
            let &p = pos
                .get(d)
                .ok_or_else(|| Error::InvalidModel(format!("task `{}` depends on unknown task {d}", t.name)))?;
            preds[i].push(p);
        }
        if t.end_cycle < t.start_cycle {
            return Err(Error::InvalidModel(format!("task `{}` ends before it starts", t.name)));
        }
    }
    let mut by_resource: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in plan.tasks.iter().enumerate() {
        by_resource.entry(t.resource.as_str()).or_default().push(i);
    }
    for order in by_resource.values_mut() {
        order.sort_by_key(|&i| (plan.tasks[i].start_cycle, plan.tasks[i].id));
        for w in order.windows(2) {
            preds[w[1]].push(w[0]);
        }
    }
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, ps) in preds.iter().enumerate() {
        for &p in ps {
            succs[p].push(i);
        }
    }
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut queue: VecDeque<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut start = vec![0u64; n];
    let mut end = vec![0u64; n];
    let mut seen = 0;
    while let Some(i) = queue.pop_front() {
        seen += 1;
        let t = &plan.tasks[i];
        start[i] = preds[i].iter().map(|&p| end[p]).max().unwrap_or(0);
        end[i] = start[i] + (t.end_cycle - t.start_cycle);
        for &s in &succs[i] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                queue.push_back(s);
            }
        }
    }
    if seen < n {
        return Err(Error::Deadlock(wait_cycle(plan, &preds, &indeg)));
    }

    let makespan = end.iter().copied().max().unwrap_or(0);
    let mut resources: Vec<String> = plat.devices.iter().map(|d| d.name.clone()).collect();
    resources.push(DMA_RESOURCE.to_string());
    for r in by_resource.keys() {
        if !resources.iter().any(|x| x == r) {
            resources.push(r.to_string());
        }
    }
    let mut rows = Vec::new();
    let mut utilization = BTreeMap::new();
    let mut breakdown = BTreeMap::new();
    for r in resources {
        let mut intervals: Vec<Interval> = by_resource
            .get(r.as_str())
            .map(|v| v.as_slice())
            .unwrap_or(&[])
            .iter()
            .map(|&i| Interval {
                task: plan.tasks[i].id,
                name: plan.tasks[i].name.clone(),
                kind: plan.tasks[i].kind,
                start: start[i],
                end: end[i],
            })
            .collect();
        intervals.sort_by_key(|iv| (iv.start, iv.task));
        let mut b = Breakdown::default();
        for iv in &intervals {
            let d = iv.end - iv.start;
            match iv.kind {
                TaskKind::Kernel => b.kernel += d,
                TaskKind::Helper => b.helper += d,
                TaskKind::Dispatch => b.dispatch += d,
                TaskKind::DmaL3ToL2 | TaskKind::DmaL2ToL3 => b.dma += d,
            }
        }
        let busy = b.total();
        b.idle = makespan - busy;
        if r != DMA_RESOURCE {
            utilization.insert(r.clone(), if makespan == 0 { 0.0 } else { busy as f64 / makespan as f64 });
        }
        breakdown.insert(r.clone(), b);
        rows.push(Row { resource: r, intervals });
    }
    let divergent_tasks = plan
        .tasks
        .iter()
        .enumerate()
        .filter(|(i, t)| start[*i] != t.start_cycle)
        .map(|(_, t)| t.id)
        .collect();
    Ok(Timeline { rows, makespan_cycles: makespan, utilization, breakdown, divergent_tasks })
}

/// Names of tasks along one circular wait among the unfinished tasks.
fn wait_cycle(plan: &Plan, preds: &[Vec<usize>], indeg: &[usize]) -> Vec<String> {
    let stuck = |i: usize| indeg[i] > 0;
    let mut cur = (0..preds.len()).find(|&i| stuck(i)).expect("some task is stuck");
    let mut path: Vec<usize> = Vec::new();
    loop {
        if let Some(p) = path.iter().position(|&x| x == cur) {
            let mut cycle: Vec<String> = path[p..].iter().rev().map(|&i| plan.tasks[i].name.clone()).collect();
            cycle.push(cycle[0].clone());
            return cycle;
        }
        path.push(cur);
        cur = *preds[cur].iter().find(|&&p| stuck(p)).expect("a stuck task waits on a stuck task");
    }
}

fn kind_char(kind: TaskKind) -> char {
    match kind {
        TaskKind::Kernel => 'K',
        TaskKind::Dispatch => 'd',
        TaskKind::Helper => 'H',
        TaskKind::DmaL3ToL2 => 'L',
        TaskKind::DmaL2ToL3 => 'S',
    }
}

/// Fixed-width Gantt chart, one row per resource.
pub fn gantt_text(tl: &Timeline, width: usize) -> String {
    let label = tl.rows.iter().map(|r| r.resource.len()).max().unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{:label$} |makespan {} cycles; K kernel, d dispatch, H helper, L load, S store", "", tl.makespan_cycles);
    for row in &tl.rows {
        let mut bar = vec!['.'; width];
        if tl.makespan_cycles > 0 {
            let m = tl.makespan_cycles as u128;
            for iv in &row.intervals {
                let a = (iv.start as u128 * width as u128 / m) as usize;
                let b = (iv.end as u128 * width as u128).div_ceil(m) as usize;
                for c in bar.iter_mut().take(b.min(width)).skip(a) {
                    *c = kind_char(iv.kind);
                }
            }
        } else {
            bar.clear();
        }
        let _ = writeln!(out, "{:label$} |{}|", row.resource, bar.into_iter().collect::<String>());
    }
    out
}

fn color(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Kernel => "#4878d0",
        TaskKind::Dispatch => "#d0d0d0",
        TaskKind::Helper => "#ee854a",
        TaskKind::DmaL3ToL2 => "#6acc64",
        TaskKind::DmaL2ToL3 => "#d65f5f",
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// SVG Gantt chart, one row per resource.
pub fn gantt_svg(tl: &Timeline) -> String {
    let (label_w, chart_w, row_h) = (120u64, 800u64, 24u64);
    let height = row_h * (tl.rows.len() as u64 + 1);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{height}\" font-family=\"monospace\" font-size=\"11\">",
        label_w + chart_w + 10
    );
    for (r, row) in tl.rows.iter().enumerate() {
        let y = r as u64 * row_h;
        let _ = writeln!(s, "<text x=\"2\" y=\"{}\">{}</text>", y + 16, escape(&row.resource));
        let _ = writeln!(s, "<rect x=\"{label_w}\" y=\"{}\" width=\"{chart_w}\" height=\"{}\" fill=\"#f7f7f7\"/>", y + 2, row_h - 4);
        if tl.makespan_cycles == 0 {
            continue;
        }
        for iv in &row.intervals {
            let x = label_w + iv.start * chart_w / tl.makespan_cycles;
            let w = ((iv.end - iv.start) * chart_w / tl.makespan_cycles).max(1);
            let _ = writeln!(
                s,
                "<rect x=\"{x}\" y=\"{}\" width=\"{w}\" height=\"{}\" fill=\"{}\"><title>{} [{}, {})</title></rect>",
                y + 2,
                row_h - 4,
                color(iv.kind),
                escape(&iv.name),
                iv.start,
                iv.end
            );
        }
    }
    let _ = writeln!(
        s,
        "<text x=\"{label_w}\" y=\"{}\">0 .. {} cycles</text>",
        height - 6,
        tl.makespan_cycles
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sched_mem::ScheduledTask;
    use num_traits::One;

    fn plat() -> Platform {
        let one = crate::Rational::one();
        Platform::new(
            vec![
                crate::platform::Device::new("host", one, 0, one, true),
                crate::platform::Device::new("a", one, 1024, one, false),
                crate::platform::Device::new("b", one, 1024, one, false),
            ],
            crate::platform::MemoryHierarchy { l2_bytes: 1024, l3_bytes: 4096, l2_l3_bw_bytes_per_cycle: one },
            Vec::new(),
            0,
            one,
        )
        .unwrap()
    }

    fn task(id: usize, res: &str, start: u64, end: u64, deps: &[usize]) -> ScheduledTask {
        ScheduledTask {
            id,
            name: format!("t{id}"),
            kind: TaskKind::Kernel,
            resource: res.into(),
            node: None,
            tensor: None,
            bytes: 0,
            start_cycle: start,
            end_cycle: end,
            depends_on: deps.to_vec(),
        }
    }

    fn plan_of(tasks: Vec<ScheduledTask>) -> Plan {
        let makespan = tasks.iter().map(|t| t.end_cycle).max().unwrap_or(0);
        Plan {
            tasks,
            allocations: Vec::new(),
            makespan_cycles: makespan,
            per_device_utilization: BTreeMap::new(),
            l2_bytes: 1024,
            l3_bytes: 4096,
        }
    }

    #[test]
    fn independent_devices_overlap() {
        let tl = simulate(&plan_of(vec![task(0, "a", 0, 100, &[]), task(1, "b", 0, 70, &[])]), &plat()).unwrap();
        assert_eq!(tl.makespan_cycles, 100);
        assert!(tl.divergent_tasks.is_empty());
        assert_eq!(tl.breakdown["b"], Breakdown { kernel: 70, idle: 30, ..Default::default() });
    }

    #[test]
    fn one_device_serializes() {
        let tl = simulate(&plan_of(vec![task(0, "a", 0, 100, &[]), task(1, "a", 0, 70, &[])]), &plat()).unwrap();
        assert_eq!(tl.makespan_cycles, 170);
        assert_eq!(tl.divergent_tasks, vec![1]);
        assert_eq!(tl.utilization["a"], 1.0);
    }

    #[test]
    fn circular_wait_is_a_deadlock() {
        let err = simulate(&plan_of(vec![task(0, "a", 0, 10, &[1]), task(1, "b", 0, 10, &[0])]), &plat()).unwrap_err();
        match err {
            Error::Deadlock(cycle) => {
                assert_eq!(cycle.first(), cycle.last());
                assert!(cycle.contains(&"t0".to_string()) && cycle.contains(&"t1".to_string()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn empty_plan_has_empty_gantt() {
        let tl = simulate(&plan_of(Vec::new()), &plat()).unwrap();
        assert_eq!(tl.makespan_cycles, 0);
        let text = gantt_text(&tl, 20);
        assert_eq!(text.lines().count(), 1 + tl.rows.len());
        assert!(text.lines().skip(1).all(|l| l.ends_with("||")));
        assert!(gantt_svg(&tl).starts_with("<svg"));
    }

    #[test]
    fn text_gantt_has_one_row_per_resource() {
        let tl = simulate(&plan_of(vec![task(0, "a", 0, 50, &[]), task(1, "b", 50, 100, &[0])]), &plat()).unwrap();
        let text = gantt_text(&tl, 10);
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        assert!(rows[1].ends_with("|KKKKK.....|"));
        assert!(rows[2].ends_with("|.....KKKKK|"));
    }
}
