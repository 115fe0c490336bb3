//! Target SoC description: devices, memory hierarchy, and the kernel pattern catalogue.

use std::collections::HashSet;

use num_traits::{One, Zero};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::model_ir::{DType, Graph, OpAttrs, OpType, Operator};
use crate::rational::{self, Rational};

pub const PLATFORM_SCHEMA: &str = "matcha-platform/1";
pub const WILDCARD_NAME: &str = "wildcard";
pub const DEFAULT_DISPATCH_OVERHEAD: u64 = 200;
pub const DEFAULT_WILDCARD_DELTA: u64 = 0;

pub fn default_helper_cost_per_byte() -> Rational {
    Rational::new(1, 4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Device {
    pub name: String,
    /// Cycles per arithmetic operation at peak.
    #[serde(with = "rational::serde_num")]
    pub alpha: Rational,
    /// Local scratchpad capacity; zero means the device works directly from L2.
    pub l1_bytes: u64,
    /// L2 <-> L1 transfer rate.
    #[serde(with = "rational::serde_num", default = "Rational::one")]
    pub dma_bw_bytes_per_cycle: Rational,
    #[serde(default)]
    pub is_host: bool,
}

impl Device {
    pub fn new(name: &str, alpha: Rational, l1_bytes: u64, dma_bw: Rational, is_host: bool) -> Self {
        Device { name: name.to_string(), alpha, l1_bytes, dma_bw_bytes_per_cycle: dma_bw, is_host }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemoryHierarchy {
    pub l2_bytes: u64,
    pub l3_bytes: u64,
    #[serde(with = "rational::serde_num")]
    pub l2_l3_bw_bytes_per_cycle: Rational,
}

/// Per-node predicates a pattern imposes on every operator it covers.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatternConstraints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtypes: Option<Vec<DType>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<Vec<usize>>,
    /// `Some(true)`: convolutions must be depthwise; `Some(false)`: must not be.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depthwise: Option<bool>,
}

impl PatternConstraints {
    pub fn is_empty(&self) -> bool {
        *self == PatternConstraints::default()
    }

    fn holds(&self, op: &Operator, g: &Graph) -> bool {
        if let Some(dtypes) = &self.dtypes {
            let ok = op
                .inputs
                .iter()
                .chain(&op.outputs)
                .filter_map(|t| g.tensor(t))
                .all(|t| dtypes.contains(&t.dtype));
            if !ok {
                return false;
            }
        }
        if let Some(max) = self.max_channels {
            if channel_count(op, g) > max {
                return false;
            }
        }
        if let Some(strides) = &self.strides {
            let ok = match &op.attrs {
                OpAttrs::Conv2d(a) => strides.contains(&a.stride_h) && strides.contains(&a.stride_w),
                OpAttrs::MaxPool2d(a) => strides.contains(&a.stride),
                _ => true,
            };
            if !ok {
                return false;
            }
        }
        if let (Some(want), OpAttrs::Conv2d(a)) = (self.depthwise, &op.attrs) {
            let channels = g.tensor(&op.inputs[0]).map_or(0, |t| t.shape[3]);
            let is_dw = a.groups > 1 && a.groups == channels;
            if is_dw != want {
                return false;
            }
        }
        true
    }
}

fn channel_count(op: &Operator, g: &Graph) -> usize {
    let last = |name: &String| g.tensor(name).and_then(|t| t.shape.last().copied()).unwrap_or(0);
    let inputs = match op.op_type() {
        OpType::Conv2d | OpType::Dense => last(&op.inputs[0]),
        _ => 0,
    };
    inputs.max(last(&op.outputs[0]))
}

/// A fusible chain of operator types executed by one device kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Pattern {
    pub name: String,
    /// Operator types along the chain; empty for the wildcard.
    pub ops: Vec<OpType>,
    pub device: String,
    /// Kernel efficiency in (0, 1].
    pub eta: Rational,
    /// Fixed per-invocation overhead in cycles.
    pub delta_cycles: u64,
    pub constraints: PatternConstraints,
    pub is_wildcard: bool,
}

impl Pattern {
    pub fn new(name: &str, ops: &[OpType], device: &str, eta: Rational, delta_cycles: u64) -> Self {
        Pattern {
            name: name.to_string(),
            ops: ops.to_vec(),
            device: device.to_string(),
            eta,
            delta_cycles,
            constraints: PatternConstraints::default(),
            is_wildcard: false,
        }
    }

    pub fn wildcard(host: &str, delta_cycles: u64) -> Self {
        Pattern {
            name: WILDCARD_NAME.to_string(),
            ops: Vec::new(),
            device: host.to_string(),
            eta: Rational::one(),
            delta_cycles,
            constraints: PatternConstraints::default(),
            is_wildcard: true,
        }
    }

    pub fn with_constraints(mut self, c: PatternConstraints) -> Self {
        self.constraints = c;
        self
    }

    /// Chain length (1 for the wildcard).
    pub fn len(&self) -> usize {
        if self.is_wildcard {
            1
        } else {
            self.ops.len()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// True iff `ops` (in chain order) satisfy the pattern's types and predicates.
pub fn pattern_supports(p: &Pattern, ops: &[&Operator], g: &Graph) -> bool {
    if p.is_wildcard {
        return ops.len() == 1;
    }
    ops.len() == p.ops.len()
        && ops.iter().zip(&p.ops).all(|(op, ty)| op.op_type() == *ty && p.constraints.holds(op, g))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Platform {
    pub devices: Vec<Device>,
    pub memory: MemoryHierarchy,
    pub patterns: Vec<Pattern>,
    pub dispatch_overhead_cycles: u64,
    /// Host cycles per byte moved by slice/concat helpers.
    pub helper_cost_per_byte: Rational,
}

impl Platform {
    /// Validates the description and synthesizes a host wildcard when the
    /// catalogue has none.
    pub fn new(
        devices: Vec<Device>,
        memory: MemoryHierarchy,
        mut patterns: Vec<Pattern>,
        dispatch_overhead_cycles: u64,
        helper_cost_per_byte: Rational,
    ) -> Result<Platform> {
        let mut names = HashSet::new();
        for d in &devices {
            if !names.insert(d.name.as_str()) {
                return Err(Error::DuplicateDevice(d.name.clone()));
            }
            if d.alpha <= Rational::zero() {
                return Err(Error::InvalidPlatform(format!("device `{}`: alpha must be > 0", d.name)));
            }
            if d.l1_bytes > 0 && d.dma_bw_bytes_per_cycle <= Rational::zero() {
                return Err(Error::InvalidPlatform(format!("device `{}`: dma bandwidth must be > 0", d.name)));
            }
        }
        let hosts: Vec<&Device> = devices.iter().filter(|d| d.is_host).collect();
        let host = match hosts.len() {
            0 => return Err(Error::NoHost),
            1 => hosts[0].name.clone(),
            _ => return Err(Error::MultipleHosts),
        };
        if memory.l2_bytes == 0 || memory.l3_bytes == 0 {
            return Err(Error::InvalidPlatform("memory capacities must be > 0".into()));
        }
        if memory.l3_bytes < memory.l2_bytes {
            return Err(Error::InvalidPlatform("l3_bytes must be >= l2_bytes".into()));
        }
        if memory.l2_l3_bw_bytes_per_cycle <= Rational::zero() {
            return Err(Error::InvalidPlatform("l2_l3 bandwidth must be > 0".into()));
        }
        if helper_cost_per_byte < Rational::zero() {
            return Err(Error::InvalidPlatform("helper_cost_per_byte must be >= 0".into()));
        }
        let mut pattern_names = HashSet::new();
        for p in &patterns {
            if !pattern_names.insert(p.name.as_str()) {
                return Err(Error::InvalidPlatform(format!("duplicate pattern `{}`", p.name)));
            }
            if !names.contains(p.device.as_str()) {
                return Err(Error::UnknownDevice { pattern: p.name.clone(), device: p.device.clone() });
            }
            if p.eta <= Rational::zero() || p.eta > Rational::one() {
                return Err(Error::Efficiency { pattern: p.name.clone(), value: rational::exact_string(&p.eta) });
            }
            if !p.is_wildcard && p.ops.is_empty() {
                return Err(Error::InvalidPlatform(format!("pattern `{}` has an empty chain", p.name)));
            }
        }
        match patterns.iter().filter(|p| p.is_wildcard).count() {
            0 => {
                if pattern_names.contains(WILDCARD_NAME) {
                    return Err(Error::InvalidPlatform(format!("pattern name `{WILDCARD_NAME}` is reserved")));
                }
                patterns.push(Pattern::wildcard(&host, DEFAULT_WILDCARD_DELTA));
            }
            1 => {
                let w = patterns.iter().find(|p| p.is_wildcard).expect("counted");
                if w.device != host {
                    return Err(Error::InvalidPlatform("the wildcard pattern must run on the host".into()));
                }
            }
            _ => return Err(Error::InvalidPlatform("more than one wildcard pattern".into())),
        }
        Ok(Platform { devices, memory, patterns, dispatch_overhead_cycles, helper_cost_per_byte })
    }

    pub fn host(&self) -> &Device {
        self.devices.iter().find(|d| d.is_host).expect("validated: one host")
    }

    pub fn device(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name == name)
    }

    pub fn device_index(&self, name: &str) -> Option<usize> {
        self.devices.iter().position(|d| d.name == name)
    }

    pub fn pattern(&self, name: &str) -> Option<&Pattern> {
        self.patterns.iter().find(|p| p.name == name)
    }

    pub fn wildcard(&self) -> &Pattern {
        self.patterns.iter().find(|p| p.is_wildcard).expect("validated: one wildcard")
    }

    /// Copy restricted to the given devices (host always kept); patterns on
    /// removed devices are dropped.
    pub fn restricted_to(&self, keep: &[&str]) -> Result<Platform> {
        let devices: Vec<Device> =
            self.devices.iter().filter(|d| d.is_host || keep.contains(&d.name.as_str())).cloned().collect();
        let patterns =
            self.patterns.iter().filter(|p| devices.iter().any(|d| d.name == p.device)).cloned().collect();
        Platform::new(devices, self.memory.clone(), patterns, self.dispatch_overhead_cycles, self.helper_cost_per_byte)
    }

    pub fn with_l2_bytes(&self, l2_bytes: u64) -> Platform {
        let mut p = self.clone();
        p.memory.l2_bytes = l2_bytes;
        p
    }

    pub fn to_json_value(&self) -> Value {
        let patterns: Vec<Value> = self
            .patterns
            .iter()
            .map(|p| {
                let ops: Vec<&str> = if p.is_wildcard { vec!["*"] } else { p.ops.iter().map(|o| o.as_str()).collect() };
                let mut v = json!({
                    "name": p.name,
                    "device": p.device,
                    "ops": ops,
                    "eta": rational::to_f64(&p.eta),
                    "delta_cycles": p.delta_cycles,
                });
                if !p.constraints.is_empty() {
                    v["constraints"] = serde_json::to_value(&p.constraints).expect("constraints serialize");
                }
                v
            })
            .collect();
        json!({
            "schema": PLATFORM_SCHEMA,
            "devices": self.devices,
            "memory": self.memory,
            "dispatch_overhead_cycles": self.dispatch_overhead_cycles,
            "helper_cost_per_byte": rational::to_f64(&self.helper_cost_per_byte),
            "patterns": patterns,
        })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PatternDoc {
    name: String,
    device: String,
    ops: Vec<String>,
    #[serde(with = "rational::serde_num", default = "Rational::one")]
    eta: Rational,
    #[serde(default)]
    delta_cycles: u64,
    #[serde(default)]
    constraints: PatternConstraints,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlatformDoc {
    schema: Option<String>,
    #[serde(default)]
    version: Option<String>,
    devices: Vec<Device>,
    memory: MemoryHierarchy,
    #[serde(default)]
    dispatch_overhead_cycles: Option<u64>,
    #[serde(default, with = "rational::serde_opt")]
    helper_cost_per_byte: Option<Rational>,
    #[serde(default)]
    patterns: Vec<PatternDoc>,
}

/// Parses and validates a platform document.
pub fn load_platform(text: &str) -> Result<Platform> {
    let doc: PlatformDoc = serde_json::from_str(text)?;
    let _ = doc.version;
    match doc.schema.as_deref() {
        Some(PLATFORM_SCHEMA) => {}
        other => {
            return Err(Error::Schema {
                found: other.unwrap_or("<missing>").to_string(),
                expected: PLATFORM_SCHEMA,
            })
        }
    }
    let patterns = doc
        .patterns
        .into_iter()
        .map(|p| {
            let is_wildcard = p.ops.len() == 1 && p.ops[0] == "*";
            let ops = if is_wildcard {
                Vec::new()
            } else {
                p.ops
                    .iter()
                    .map(|o| OpType::parse(o).ok_or_else(|| Error::UnknownOpType(o.clone())))
                    .collect::<Result<Vec<_>>>()?
            };
            Ok(Pattern {
                name: p.name,
                ops,
                device: p.device,
                eta: p.eta,
                delta_cycles: p.delta_cycles,
                constraints: p.constraints,
                is_wildcard,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Platform::new(
        doc.devices,
        doc.memory,
        patterns,
        doc.dispatch_overhead_cycles.unwrap_or(DEFAULT_DISPATCH_OVERHEAD),
        doc.helper_cost_per_byte.unwrap_or_else(default_helper_cost_per_byte),
    )
}

/// Two-accelerator reference SoC: an 8-core cluster, a vector cluster and a
/// dual-core host sharing a 1 MiB L2.
pub const REFERENCE_PLATFORM_JSON: &str = include_str!("../../../data/platform_two_accel.json");

pub fn reference_platform() -> Platform {
    load_platform(REFERENCE_PLATFORM_JSON).expect("bundled platform is valid")
}
