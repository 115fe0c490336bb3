mod support;

use matcha_core::device_map::{evaluate, nest_model, refine_latencies, search_model, NestModel};
use matcha_core::platform::Device;
use matcha_core::rational::{ceil_u64, int, Rational};
use num_traits::One;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use support::{random_deployment, replay_dma, rng, Family};

const MAX_REPLAY_TRIPS: u64 = 50_000;

fn nests(r: &mut ChaCha8Rng, count: usize) -> Vec<NestModel> {
    let mut out = Vec::new();
    while out.len() < count {
        let family = if r.gen_bool(0.7) { Family::Spatial } else { Family::Dense };
        let (_, _, tg) = random_deployment(r, family, 5, 4, 1 << 24);
        for s in &tg.supernodes {
            let m = nest_model(s, &tg.graph).expect("every supernode has a nest");
            if m.dims.iter().all(|(_, e)| *e <= 8) {
                out.push(m);
            }
        }
    }
    out.truncate(count);
    out
}

fn random_tiles(m: &NestModel, r: &mut ChaCha8Rng) -> Vec<usize> {
    m.dims
        .iter()
        .map(|(_, e)| {
            let divs: Vec<usize> = (1..=*e).filter(|d| e % d == 0).collect();
            *divs.choose(r).expect("extent is positive")
        })
        .collect()
}

fn random_order(m: &NestModel, tiles: &[usize], r: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order = m.tiled_loops(tiles);
    order.shuffle(r);
    order
}

fn accelerator(l1: u64, bw: i128) -> Device {
    Device::new("acc", Rational::one(), l1, int(bw), false)
}

#[test]
fn analytic_traffic_matches_loop_replay() {
    let mut r = rng(21);
    let mut checked = 0;
    for m in nests(&mut r, 60) {
        for _ in 0..8 {
            let tiles = random_tiles(&m, &mut r);
            if m.trips(&tiles).iter().product::<u64>() > MAX_REPLAY_TRIPS {
                continue;
            }
            let order = random_order(&m, &tiles, &mut r);
            let bw = r.gen_range(1..=16);
            let cost = evaluate(&m, &accelerator(u64::MAX, bw), Rational::one(), &tiles, &order).expect("unbounded L1");
            let want = replay_dma(&m, &tiles, &order);
            assert_eq!(cost.dma_bytes, want, "{m:?} tiles {tiles:?} order {order:?}");
            assert_eq!(cost.dma_cycles, int(want as i128) / int(bw));
            checked += 1;
        }
    }
    assert!(checked >= 200, "only {checked} mappings replayed");
}

#[test]
fn searched_mapping_is_never_beaten_by_random_feasible_mappings() {
    let mut r = rng(22);
    for m in nests(&mut r, 40) {
        let full: Vec<usize> = m.dims.iter().map(|(_, e)| *e).collect();
        let ones = vec![1; full.len()];
        let lo = m.working_set(&ones);
        let hi = m.working_set(&full);
        let l1 = if hi > lo { r.gen_range(lo..hi) } else { hi };
        let dev = accelerator(l1, 4);
        let best = search_model(&m, "n", &dev, Rational::one()).expect("all-ones tiling fits");
        assert!(best.cost.l1_peak_bytes <= l1);
        for _ in 0..100 {
            let tiles = random_tiles(&m, &mut r);
            let order = random_order(&m, &tiles, &mut r);
            if let Some(c) = evaluate(&m, &dev, Rational::one(), &tiles, &order) {
                assert!(best.cost.dma_bytes <= c.dma_bytes, "{m:?}: {tiles:?} {order:?} beats search");
            }
        }
    }
}

#[test]
fn refined_latency_never_undercuts_compute() {
    let mut r = rng(23);
    for _ in 0..30 {
        let family = if r.gen_bool(0.5) { Family::Spatial } else { Family::Dense };
        let (_, plat, tg) = random_deployment(&mut r, family, 6, 4, 1 << 24);
        let lat = refine_latencies(&tg, &plat).unwrap();
        for (s, m) in tg.supernodes.iter().zip(&lat.mappings) {
            assert_eq!(m.node, s.name);
            assert!(lat.nodes[&s.name] >= ceil_u64(&m.cost.compute_cycles));
            assert!(m.cost.total_cycles >= m.cost.compute_cycles);
        }
    }
}
