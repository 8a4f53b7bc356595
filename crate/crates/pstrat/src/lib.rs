//! Bayesian analysis of cluster randomized trials with two-level partial
//! compliance.
//!
//! # The problem this crate solves
//!
//! Clusters (clinics, schools, villages) are randomized to a treatment arm
//! (`W = 1`) or a control arm (`W = 0`), but randomization only creates the
//! *offer* of an intervention. A treated cluster may implement the
//! intervention with anything from token to full effort, and an individual
//! inside a treated cluster may or may not actually take the intervention up.
//! Compliance is one-sided: control clusters have no access, so cluster
//! implementation effort and individual uptake are observed on the treated
//! arm and counterfactual (latent) on the control arm.
//!
//! Comparing outcomes among observed compliers to outcomes among controls is
//! biased whenever the kind of cluster that complies well also differs in
//! outcome-relevant ways. This crate instead models compliance behaviour
//! jointly with outcomes and reports effects for *principal strata* — latent
//! cluster classes defined by how a cluster would comply if offered treatment,
//! a quantity that exists independently of the arm the cluster landed in.
//!
//! # Model
//!
//! Each cluster `i` carries a latent class `S_i ∈ {1, …, K}`:
//!
//! ```text
//! S_i                ~ Categorical(π)
//! (C_i, Z_i) | S_i=k ~ MVN(μ_k^S, Σ)              cluster compliance measure
//!                                                  and cluster covariates
//! D_ij | S_i=k       ~ Bernoulli(Φ(X_ij α_k + μ_k^D + φ_i^D))
//!                                                  individual uptake under
//!                                                  treatment, φ_i^D ~ N(0, τ_D²)
//! Y_ij(w) | S_i=k    ~ N(m_ijk(w), σ_k²)          potential outcome in arm w
//! ```
//!
//! with the outcome mean built from a common covariate effect, a complier
//! shift in each arm, and a treated-complier covariate interaction:
//!
//! ```text
//! m_ijk(w) = μ_k^Y + X_ij β_0k + (1-w) D_ij δ_0k
//!          + w D_ij (X_ij β_1k + δ_1k) + φ_i^Y ,    φ_i^Y ~ N(0, τ_Y²)
//! ```
//!
//! `D_ij` is the uptake the individual *would* show under treatment, so it
//! enters the control-arm mean too: `δ_0k` captures how would-be compliers
//! differ at baseline, and the complier average causal effect in class `k`
//! becomes `X β_1k + (δ_1k - δ_0k)`.
//!
//! Inference is by a data-augmented Gibbs sampler that alternates between
//! latent quantities (class labels, counterfactual uptake, random effects,
//! probit utilities, missing covariates and outcomes) and model parameters,
//! each from its exact full conditional. Estimands (intention-to-treat and
//! complier effects, overall and per class, for the sample in hand or the
//! population it was drawn from) are computed per retained draw so that the
//! reported intervals carry full posterior uncertainty.
//!
//! # Crate layout
//!
//! | module | contents |
//! |---|---|
//! | [`data`] | trial dataset containers, CSV input/output, validation |
//! | [`model`] | model configuration, parameter state, priors, joint density |
//! | [`gibbs`] | the sampler: full-conditional updates, chains, label handling |
//! | [`impute`] | completed-data construction and synthetic-data generation |
//! | [`estimands`] | effect definitions, closed forms, posterior summaries |
//! | [`simulate`] | benchmark trial generator and replication studies |
//! | [`diagnostics`] | convergence checks and posterior-predictive model checks |
//! | [`draws`] | posterior draw storage and persistence |
//! | [`special`] | scalar special functions (Φ, ln Φ, Φ⁻¹, ln Γ, P(a,x)) |
//! | [`dist`] | samplers and densities for the distributions the model uses |
//! | [`rng`] | seeded random streams for exact reproducibility |
//!
//! # Reproducibility
//!
//! Every stochastic routine takes an explicit [`rng::RngStream`], a counter
//! RNG addressed by `(seed, stream)`. Identical inputs and seeds give
//! bit-identical output on every platform; independent sources of variation
//! live on separate streams so that, for example, regenerating a trial under
//! a different outcome configuration reuses the same simulated individuals.

pub mod data;
pub mod diagnostics;
pub mod dist;
pub mod draws;
pub mod estimands;
pub mod gibbs;
pub mod impute;
pub mod model;
pub mod rng;
pub mod simulate;
pub mod special;

pub use data::{load_trial, summarize, write_trial, TrialDataset};
pub use draws::PosteriorDraws;
pub use gibbs::{run_chain, ChainOptions, GibbsSampler};
pub use model::{ModelConfig, OutcomeFamily, ParameterState, PriorSpec};
pub use rng::RngStream;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors reported by this crate.
///
/// The split mirrors how callers should react: [`Error::Data`] and
/// [`Error::Config`] mean the input needs fixing, [`Error::Domain`] means a
/// routine was called with arguments outside its contract, and
/// [`Error::Numeric`] means a computation failed for a reason only visible at
/// run time (a singular matrix, a non-finite intermediate).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument fell outside the domain a routine is defined on.
    #[error("domain error: {0}")]
    Domain(String),

    /// Input data is malformed or inconsistent. `row` is the 1-based record
    /// number within the offending file (excluding the header) and `column`
    /// the header name, when they are known.
    #[error("data error{}: {message}", fmt_location(.row, .column))]
    Data {
        message: String,
        row: Option<usize>,
        column: Option<String>,
    },

    /// A run configuration was rejected before any computation started.
    #[error("config error: {0}")]
    Config(String),

    /// A numeric computation could not be completed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An underlying I/O operation failed.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A CSV file could not be parsed at all (structural failure, as opposed
    /// to a well-formed file with invalid contents, which is [`Error::Data`]).
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Data error with no location information.
    pub fn data(message: impl Into<String>) -> Self {
        Error::Data {
            message: message.into(),
            row: None,
            column: None,
        }
    }

    /// Data error pinned to a record and column of the input file.
    pub fn data_at(
        message: impl Into<String>,
        row: impl Into<Option<usize>>,
        column: impl Into<Option<String>>,
    ) -> Self {
        Error::Data {
            message: message.into(),
            row: row.into(),
            column: column.into(),
        }
    }
}

fn fmt_location(row: &Option<usize>, column: &Option<String>) -> String {
    match (row, column) {
        (Some(r), Some(c)) => format!(" (row {r}, column `{c}`)"),
        (Some(r), None) => format!(" (row {r})"),
        (None, Some(c)) => format!(" (column `{c}`)"),
        (None, None) => String::new(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_error_formats_location() {
        let e = Error::data_at("compliance must be 0 or 1", 17, "D".to_string());
        assert_eq!(
            e.to_string(),
            "data error (row 17, column `D`): compliance must be 0 or 1"
        );
        let e = Error::data("file is empty");
        assert_eq!(e.to_string(), "data error: file is empty");
    }
}
