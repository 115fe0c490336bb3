mod support;

use matcha_core::device_map::refine_latencies;
use matcha_core::error::Error;
use matcha_core::platform::Platform;
use matcha_core::rewrite::TiledGraph;
use matcha_core::sched_mem::{plan, validate_plan, Plan, Strategy};
use matcha_core::sim_exec::simulate;
use support::{random_deployment, rng, Family};

fn static_demand(tg: &TiledGraph) -> u64 {
    tg.graph.tensors().iter().map(|t| t.size_bytes()).sum()
}

fn check_plan(p: &Plan, tg: &TiledGraph, plat: &Platform) {
    let report = validate_plan(p, tg, plat);
    assert!(report.passed(), "{report:?}");
    let tl = simulate(p, plat).unwrap();
    assert_eq!(tl.makespan_cycles, p.makespan_cycles);
    assert!(tl.divergent_tasks.is_empty(), "replay diverges at {:?}", tl.divergent_tasks);
    for (res, b) in &tl.breakdown {
        assert_eq!(b.total(), tl.makespan_cycles, "breakdown of {res}");
    }
}

#[test]
fn random_plans_validate_and_replay_identically() {
    let mut r = rng(31);
    for i in 0..40 {
        let family = if i % 3 == 0 { Family::Dense } else { Family::Spatial };
        let (_, plat, tg) = random_deployment(&mut r, family, 6, 4, 1 << 24);
        let lat = refine_latencies(&tg, &plat).unwrap();
        let p = plan(&tg, &lat, &plat).unwrap();
        check_plan(&p, &tg, &plat);
    }
}

/// Starts at 60% of the unaliased demand and grows L2 until a plan exists.
#[test]
fn constrained_memory_plans_stay_valid() {
    let mut r = rng(32);
    let mut constrained = 0;
    for i in 0..40 {
        let family = if i % 3 == 0 { Family::Dense } else { Family::Spatial };
        let (_, mut plat, tg) = random_deployment(&mut r, family, 8, 4, 1 << 24);
        let lat = refine_latencies(&tg, &plat).unwrap();
        let demand = static_demand(&tg);
        let mut l2 = demand * 6 / 10;
        let p = loop {
            plat.memory.l2_bytes = l2;
            match plan(&tg, &lat, &plat) {
                Ok(p) => break p,
                Err(Error::TensorTooLarge { .. } | Error::Infeasible(_) | Error::Deadlock(_)) => {
                    assert!(l2 < demand, "a plan must exist once every tensor fits side by side");
                    l2 = (l2 * 5 / 4).max(l2 + 1);
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        };
        if p.allocations.iter().any(|a| matches!(a.strategy, Strategy::Swapped | Strategy::PlannedLoad)) {
            constrained += 1;
        }
        check_plan(&p, &tg, &plat);
    }
    assert!(constrained >= 10, "only {constrained} instances swapped or loaded on demand");
}
