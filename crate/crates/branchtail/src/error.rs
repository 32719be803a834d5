//! Error type shared by all toolkit modules.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Config text does not satisfy the schema; `path` names the offending field.
    #[error("invalid config at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    /// The law puts all mass on Q = 0, so the fixed-point equation degenerates.
    #[error("degenerate Q: P(Q != 0) must be positive")]
    DegenerateQ,

    /// A per-sample tree exceeded the node cap (supercritical laws grow exponentially).
    #[error("tree too large: {nodes} nodes exceeds cap {cap}")]
    TreeTooLarge { nodes: u64, cap: u64 },

    #[error("contractivity violated: rho_beta = {rho} >= 1")]
    ContractivityViolated { rho: f64 },

    #[error("cannot bound truncation: no beta in (0, 1] with rho_beta < 1")]
    NoContractiveBeta,

    #[error("no root in bracket [{lo}, {hi}]")]
    NoRootInBracket { lo: f64, hi: f64 },

    /// A root of rho_alpha = 1 was found, but it is a down-crossing (mu <= 0),
    /// where the tail theory does not apply.
    #[error("root has mu <= 0: alpha = {alpha}, mu = {mu}")]
    RootHasNonpositiveMu { alpha: f64, mu: f64 },

    #[error("MC noise exceeds tol: alpha uncertainty {noise:.3e} > {tol:.3e} at alpha = {alpha}")]
    McNoiseExceedsTol { alpha: f64, noise: f64, tol: f64 },

    #[error("{side} tail empty: {available} positive samples, need {needed}")]
    TailEmpty {
        side: &'static str,
        available: usize,
        needed: usize,
    },

    /// All top order statistics coincide, so the Hill log-spacings vanish.
    #[error("zero log-spacings in top order statistics")]
    ZeroLogSpacings,

    #[error("grid too coarse: {len} point(s)")]
    GridTooCoarse { len: usize },

    #[error("integral not converged: residual {residual:.3e} exceeds 25% of integral {integral:.3e}")]
    IntegralNotConverged { residual: f64, integral: f64 },

    #[error("not normalized at alpha: rho_alpha = {rho}")]
    NotNormalizedAtAlpha { rho: f64 },

    #[error("incompatible grids: {0}")]
    IncompatibleGrids(String),

    #[error("not a lattice law: {0}")]
    NotLattice(String),

    #[error("not finite-discrete: {0}")]
    NotFiniteDiscrete(String),

    #[error("enumeration too large; reduce depth ({size} > cap {cap})")]
    EnumerationTooLarge { size: u64, cap: u64 },

    #[error("measure support too wide: {points} points exceeds cap {cap}")]
    SupportTooWide { points: u64, cap: u64 },

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("mu must be positive, got {mu}")]
    NonpositiveMu { mu: f64 },
}

impl Error {
    pub fn invalid_config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            path: path.into(),
            message: message.into(),
        }
    }
}
