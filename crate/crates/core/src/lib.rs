//! Deployment planning for DNN inference on heterogeneous multi-accelerator SoCs.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! 1. [`model_ir`]: load and validate the operator graph.
//! 2. [`platform`]: devices, memory hierarchy and the kernel pattern catalogue.
//! 3. [`pattern_match`]: enumerate chain-pattern embeddings into the graph.
//! 4. [`tile_alloc`]: choose how many tiles of each operator every match executes.
//! 5. [`rewrite`]: split and fuse the graph according to that choice.
//! 6. [`device_map`]: refine per-kernel latency with an L1 loop-nest search.
//! 7. [`sched_mem`]: list-schedule kernels and DMA with an L2/L3 memory plan.
//! 8. [`sim_exec`]: replay the plan and execute graphs numerically.
//!
//! [`pipeline`] composes the stages and [`artifacts`] serializes their outputs.

pub mod artifacts;
pub mod device_map;
pub mod error;
pub mod model_ir;
pub mod pattern_match;
pub mod pipeline;
pub mod platform;
pub mod rational;
pub mod rewrite;
pub mod sched_mem;
pub mod sim_exec;
pub mod tile_alloc;

pub use error::{Error, Result};
pub use model_ir::{DType, Graph, OpAttrs, OpType, Operator, TensorInfo, TensorKind, TileAxis, TileConfig};
pub use pattern_match::{enumerate_matches, matches_covering, Match};
pub use platform::{Device, MemoryHierarchy, Pattern, Platform};
pub use rational::Rational;
pub use rewrite::{apply_assignment, SuperNode, TiledGraph};
pub use sched_mem::{plan, validate_plan, Plan};
pub use sim_exec::{interpret, simulate, TensorValue, Timeline};
pub use tile_alloc::{build_problem, solve, SolveMode, TileAssignment, TileProblem};

/// Version stamped into every emitted artifact.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
