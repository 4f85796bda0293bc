use thiserror::Error;

/// Errors raised across the pricing pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("missing table `{0}` in case file")]
    MissingTable(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: usize, reason: String },
    #[error("unsupported cost model {model} in gencost row {row}")]
    UnsupportedCostModel { row: usize, model: String },
    #[error("invalid case data: {0}")]
    InvalidCase(String),
    #[error("bus {0} is islanded from the in-service AC network")]
    IslandedBus(usize),
    #[error("branch {0} has negative series resistance")]
    NegativeResistance(usize),
    #[error("unsupported grid schema version {found} (expected {expected})")]
    SchemaVersionMismatch { found: u64, expected: u64 },
    #[error("json: {0}")]
    Json(String),
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("parallel branches between buses {from} and {to} have different phase shifts")]
    IncompatibleShifts { from: usize, to: usize },
    #[error("anti-parallel branches between buses {from} and {to} include an off-nominal transformer")]
    AntiParallelTransformer { from: usize, to: usize },
    #[error("unknown branch index {0}")]
    UnknownBranch(usize),
    #[error("AC subgraph is disconnected")]
    Disconnected,
    #[error("branch {0} has zero series impedance")]
    ZeroImpedanceBranch(usize),
    #[error("branch {0} has an angle bound outside (-pi/2, pi/2)")]
    AngleRangeOutOfDomain(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dual reconstruction residual {0:.3e} exceeds threshold")]
    DualReconstructionMismatch(f64),
    #[error("strong duality violated: primal {primal}, dual {dual}")]
    StrongDualityViolation { primal: f64, dual: f64 },
    #[error("semidefinite relaxation limited to {cap} buses, grid has {n}")]
    TooLarge { n: usize, cap: usize },
    #[error("no strictly feasible point found: {0}")]
    NoStrictPoint(String),
    #[error("problem is infeasible")]
    Infeasible,
    #[error("solver failed: {0}")]
    SolverFailure(String),
    #[error("voltage recovery needs a connected AC subgraph")]
    DisconnectedAcSubgraph,
    #[error("degenerate voltage product on branch {0}")]
    ZeroDenominator(usize),
    #[error("certificate inconsistency on branch {branch}: {reason}")]
    CertificateInconsistency { branch: usize, reason: String },
    #[error("generator {gen} violates the subdifferential condition by {gap:.3e}")]
    SubdifferentialViolation { gen: usize, gap: f64 },
    #[error("base instance is infeasible")]
    BaseInfeasible,
    #[error("operation requires an optimal solution")]
    NotOptimal,
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e.to_string())
    }
}
