//! Postprocessing toolkit for gridded ensemble weather forecasts.
//!
//! Two correction methods share one pipeline: a self-attentive ensemble
//! transformer that corrects every member over all lead times at once, and a
//! classical member-by-member (MBM) regression with additive/multiplicative
//! spread scaling. Both are fitted by CRPS minimization and assessed with
//! bias, spread, spread-error ratio and rank-histogram diagnostics. A
//! synthetic gridded-ensemble generator makes the whole pipeline runnable
//! without any external dataset.

// Validation guards use negated comparisons on purpose: `!(x > 0.0)` also
// rejects NaN, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod mbm;
pub mod model;
pub mod scoring;
pub mod seeds;
pub mod tensor;
pub mod verification;

pub use error::{Error, Result};

/// Distributional family assumed for the postprocessed variable.
///
/// Temperature-like targets use a normal predictive distribution; wind-like
/// targets are non-negative and are handled distribution-free.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VariableKind {
    GaussianTarget,
    NonnegativeTarget,
}

impl VariableKind {
    pub fn as_u32(self) -> u32 {
        match self {
            VariableKind::GaussianTarget => 0,
            VariableKind::NonnegativeTarget => 1,
        }
    }

    pub fn from_u32(v: u32) -> Result<Self> {
        match v {
            0 => Ok(VariableKind::GaussianTarget),
            1 => Ok(VariableKind::NonnegativeTarget),
            other => Err(Error::InvalidArgument(format!(
                "unknown variable kind code {other}"
            ))),
        }
    }
}

impl std::str::FromStr for VariableKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_target" => Ok(VariableKind::GaussianTarget),
            "nonnegative_target" => Ok(VariableKind::NonnegativeTarget),
            other => Err(Error::InvalidArgument(format!(
                "unknown variable kind '{other}' (expected gaussian_target or nonnegative_target)"
            ))),
        }
    }
}

impl std::fmt::Display for VariableKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            VariableKind::GaussianTarget => write!(f, "gaussian_target"),
            VariableKind::NonnegativeTarget => write!(f, "nonnegative_target"),
        }
    }
}
