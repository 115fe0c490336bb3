//! Plan replay on the modeled SoC and a reference interpreter for graphs.

mod interp;
mod timeline;

pub use interp::{cast, interpret, random_tensors, TensorValue};
pub use timeline::{gantt_svg, gantt_text, simulate, Breakdown, Interval, Row, Timeline};
