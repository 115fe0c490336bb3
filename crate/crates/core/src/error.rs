use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unsupported schema {found:?} (expected {expected:?})")]
    Schema { found: String, expected: &'static str },
    #[error("empty graph")]
    EmptyGraph,
    #[error("dangling tensor reference `{tensor}` in operator `{op}`")]
    DanglingTensor { op: String, tensor: String },
    #[error("cycle detected through operator `{0}`")]
    Cycle(String),
    #[error("unknown op_type `{0}`")]
    UnknownOpType(String),
    #[error("shape inconsistency at `{op}`: {detail}")]
    Shape { op: String, detail: String },
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("operator `{0}` not tileable")]
    NotTileable(String),

    #[error("platform has no host device")]
    NoHost,
    #[error("platform has more than one host device")]
    MultipleHosts,
    #[error("duplicate device name `{0}`")]
    DuplicateDevice(String),
    #[error("pattern `{pattern}` references unknown device `{device}`")]
    UnknownDevice { pattern: String, device: String },
    #[error("pattern `{pattern}`: efficiency must be in (0,1], got {value}")]
    Efficiency { pattern: String, value: String },
    #[error("invalid platform: {0}")]
    InvalidPlatform(String),

    #[error("unknown match id {0}")]
    UnknownMatch(usize),
    #[error("tile conservation violated for `{op}`: assigned {assigned}, expected {expected}")]
    Conservation { op: String, assigned: usize, expected: usize },
    #[error("match {match_id}: {tiles} tiles exceeds the bound {bound}")]
    TileBound { match_id: usize, tiles: usize, bound: usize },

    #[error("operator exceeds L1 at minimum tile: `{node}` needs {bytes} bytes, device `{device}` has {capacity}")]
    L1Exceeded { node: String, device: String, bytes: u64, capacity: u64 },

    #[error("tensor cannot fit L2: `{tensor}` is {bytes} bytes, L2 has {capacity}")]
    TensorTooLarge { tensor: String, bytes: u64, capacity: u64 },
    #[error("infeasible memory plan: {0}")]
    Infeasible(String),

    #[error("deadlock in plan replay: {}", .0.join(" -> "))]
    Deadlock(Vec<String>),
    #[error("interpreter: {0}")]
    Interp(String),
    #[error("missing value for tensor `{0}`")]
    MissingInput(String),
}

impl Error {
    /// Errors caused by malformed or inconsistent inputs.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Parse(_)
                | Error::Schema { .. }
                | Error::EmptyGraph
                | Error::DanglingTensor { .. }
                | Error::Cycle(_)
                | Error::UnknownOpType(_)
                | Error::Shape { .. }
                | Error::InvalidModel(_)
                | Error::NotTileable(_)
                | Error::NoHost
                | Error::MultipleHosts
                | Error::DuplicateDevice(_)
                | Error::UnknownDevice { .. }
                | Error::Efficiency { .. }
                | Error::InvalidPlatform(_)
                | Error::MissingInput(_)
        )
    }

    /// Errors raised when a valid input admits no deployment.
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::L1Exceeded { .. } | Error::TensorTooLarge { .. } | Error::Infeasible(_)
        )
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}
