//! Sample inputs for the benchmarks.

use std::fs;
use std::path::{Path, PathBuf};

use matcha_core::model_ir::load_model;
use matcha_core::platform::load_platform;
use matcha_core::{Graph, Platform};

fn data(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").join(rel)
}

/// Loads `data/models/<name>.json` and the two-accelerator platform.
pub fn sample(name: &str) -> (Graph, Platform) {
    let model = fs::read_to_string(data(&format!("models/{name}.json"))).expect("sample model exists");
    let plat = fs::read_to_string(data("platform_two_accel.json")).expect("sample platform exists");
    (load_model(&model).expect("sample model parses"), load_platform(&plat).expect("sample platform parses"))
}
