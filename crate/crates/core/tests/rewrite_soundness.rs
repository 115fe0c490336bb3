mod support;

use matcha_core::rewrite::verify_rewrite;
use matcha_core::sim_exec::random_tensors;
use proptest::prelude::*;
use support::{random_deployment, rng, Family};

const REL_TOL: f64 = 1e-5;

fn check(seed: u64, family: Family) {
    let mut r = rng(seed);
    let (g, _, tg) = random_deployment(&mut r, family, 6, 4, 1 << 24);
    let (weights, inputs) = random_tensors(&g, seed);
    let report = verify_rewrite(&g, &tg, &inputs, &weights).unwrap();
    assert!(!report.outputs.is_empty());
    assert!(report.passes(&g, REL_TOL), "seed {seed}: {report:?}");
    for o in &report.outputs {
        if !g.tensor(&o.name).unwrap().dtype.is_float() {
            assert!(o.identical, "seed {seed}: integer output `{}` differs", o.name);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn spatial_rewrites_preserve_outputs(seed in any::<u64>()) {
        check(seed, Family::Spatial);
    }

    #[test]
    fn dense_rewrites_preserve_outputs(seed in any::<u64>()) {
        check(seed, Family::Dense);
    }
}
