mod support;

use matcha_core::model_ir::{Conv2dAttrs, DType, GraphBuilder, OpAttrs, OpType, TensorKind, TileConfig};
use matcha_core::pattern_match::enumerate_matches;
use matcha_core::platform::{Device, MemoryHierarchy, Pattern, Platform};
use matcha_core::rational::{int, Rational};
use matcha_core::tile_alloc::{
    baseline_assignment, build_problem, makespan_model, solve, solve_with, Proof, SolveMode, SolveOptions,
};
use num_traits::{One, Zero};
use proptest::prelude::*;
use support::{enumerable_problem, random_problem, rng};

#[test]
fn exact_matches_exhaustive_enumeration() {
    let mut r = rng(11);
    for case in 0..25 {
        let raw = enumerable_problem(&mut r, 2e4);
        let p = raw.build();
        let want = raw.brute_force_min().expect("a host cover always exists");
        let got = solve(&p, None, SolveMode::Exact).unwrap();
        assert_eq!(got.proof, Proof::Optimal, "case {case}");
        assert_eq!(got.objective, want, "case {case}: {raw:?}");
        assert_eq!(raw.objective(&got.tiles), Some(want), "case {case}");
    }
}

#[test]
fn objective_agrees_with_independent_pricing() {
    let mut r = rng(12);
    for _ in 0..100 {
        let raw = random_problem(&mut r, 6, 3, 8);
        let p = raw.build();
        let t = support::random_conserving(&p, &mut r);
        assert_eq!(Some(makespan_model(&p, &t).unwrap()), raw.objective(&t));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn solver_outputs_conserve_tiles(seed in any::<u64>(), greedy in any::<bool>()) {
        let raw = random_problem(&mut rng(seed), 6, 3, 8);
        let p = raw.build();
        let mode = if greedy { SolveMode::Greedy } else { SolveMode::Exact };
        let opts = SolveOptions { mode, budget: None, node_limit: Some(200_000) };
        let a = solve_with(&p, &opts).unwrap();
        prop_assert!(p.check_conservation(&a.tiles).is_ok());
        prop_assert_eq!(raw.objective(&a.tiles), Some(a.objective));
    }

    #[test]
    fn exact_dominates_greedy_dominates_baseline(seed in any::<u64>()) {
        let raw = random_problem(&mut rng(seed), 5, 3, 6);
        let p = raw.build();
        let e = solve_with(&p, &SolveOptions { mode: SolveMode::Exact, budget: None, node_limit: Some(2_000_000) }).unwrap();
        let g = solve(&p, None, SolveMode::Greedy).unwrap();
        let b = baseline_assignment(&p).unwrap();
        prop_assert!(e.objective <= g.objective);
        prop_assert!(g.objective <= makespan_model(&p, &b).unwrap());
    }

    #[test]
    fn two_identical_devices_halve_within_one_tile(tiles in 1usize..=16, work in 1i128..100_000) {
        let mut b = matcha_core::tile_alloc::ProblemBuilder::new(0);
        let host = b.device("host", int(1000));
        let d0 = b.device("a", Rational::one());
        let d1 = b.device("b", Rational::one());
        let op = b.op("conv", tiles, int(work), 0, Rational::zero());
        b.add_match("pa", d0, Rational::one(), 0, &[op]);
        b.add_match("pb", d1, Rational::one(), 0, &[op]);
        b.add_match("wildcard", host, Rational::one(), 0, &[op]);
        let p = b.build().unwrap();
        let a = solve(&p, None, SolveMode::Exact).unwrap();
        let single = int(work);
        let ratio = a.objective / single;
        // Best split puts ceil(T/2) tiles on one device.
        prop_assert_eq!(ratio, Rational::new(tiles.div_ceil(2) as i128, tiles as i128));
        prop_assert!(ratio >= Rational::new(1, 2));
        prop_assert!(ratio <= Rational::new(1, 2) + Rational::new(1, tiles as i128));
    }
}

/// Depthwise layer on two accelerators; helpers cost `helper` cycles per byte.
fn depthwise_problem(helper: Rational) -> (matcha_core::tile_alloc::TileProblem, Vec<usize>) {
    let g = GraphBuilder::new()
        .tensor("x", &[1, 16, 16, 32], DType::I8, TensorKind::Input)
        .tensor("w", &[3, 3, 1, 32], DType::I8, TensorKind::Weight)
        .tensor("y", &[1, 16, 16, 32], DType::I8, TensorKind::Output)
        .op("dw", OpAttrs::Conv2d(Conv2dAttrs::square(3, 1, 1).with_groups(32)), &["x", "w"], "y")
        .build()
        .unwrap()
        .with_tiles(&TileConfig::uniform(8))
        .unwrap();
    let one = Rational::one();
    let plat = Platform::new(
        vec![
            Device::new("host", int(8), 0, one, true),
            Device::new("a", one, 1 << 20, int(8), false),
            Device::new("b", one, 1 << 20, int(8), false),
        ],
        MemoryHierarchy { l2_bytes: 1 << 20, l3_bytes: 1 << 24, l2_l3_bw_bytes_per_cycle: int(8) },
        vec![Pattern::new("a_conv", &[OpType::Conv2d], "a", one, 10), Pattern::new("b_conv", &[OpType::Conv2d], "b", one, 10)],
        10,
        helper,
    )
    .unwrap();
    let ms = enumerate_matches(&g, &plat);
    let p = build_problem(&g, &ms, &plat).unwrap();
    let base = baseline_assignment(&p).unwrap();
    (p, base)
}

#[test]
fn depthwise_splits_when_helpers_are_cheap_and_not_when_they_dominate() {
    let (p, _) = depthwise_problem(Rational::zero());
    let cheap = solve(&p, None, SolveMode::Exact).unwrap();
    assert!(cheap.instantiated().count() >= 2);

    // The helpers move input + output = 16 KiB while a perfect split saves at
    // most half the compute, so a per-byte cost of ops / 16 KiB makes every
    // split lose.
    let per_byte = p.ops[0].ops_count / int(16 * 1024);
    let (p, base) = depthwise_problem(per_byte);
    let heavy = solve(&p, None, SolveMode::Exact).unwrap();
    assert_eq!(heavy.tiles, base);
    assert_eq!(heavy.instantiated().count(), 1);
}
