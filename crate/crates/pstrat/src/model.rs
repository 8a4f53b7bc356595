//! Model parameters, priors, configuration, and the augmented log-joint.
//!
//! The generative model (see the crate docs for the full display):
//!
//! * cluster stratum `S_i ~ Categorical(π)`,
//! * cluster compliance metrics and covariates `(C_i, Z_i) | S_i = k ~
//!   MVN(μ_k^S, Σ)`,
//! * individual uptake `D_ij | S_i = k ~ Bernoulli(Φ(μ_k^D + X_ij α_k +
//!   φ_i^D))` with cluster effects `φ_i^D ~ N(0, τ_D²)`,
//! * outcomes `Y_ij(w) ~ N(m_ijk(w), σ_k²)` (or a probit success
//!   probability `Φ(m_ijk(w))` for binary outcomes) with
//!   `m_ijk(w) = μ_k^Y + X β_0k + (1−w) D δ_0k + w D (X β_1k + δ_1k) +
//!   φ_i^Y` and `φ_i^Y ~ N(0, τ_Y²)`.
//!
//! `D` here is always the uptake *type* — what the individual would do if
//! offered — so it is well-defined in both arms; in the control arm it
//! enters the mean only through `δ_0k`, which encodes within-cluster
//! spillover onto would-be compliers. Setting `d = 0` makes the two arms'
//! outcome distributions identical (the exclusion restriction), and the
//! stratum-k complier effect is `X β_1k + δ_1k − δ_0k`.
//!
//! Everything in this module is pure: given a dataset, a latent state, a
//! parameter state, priors, and a config, the functions return numbers and
//! never touch an RNG.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LatentState, Observation, TrialDataset};
use crate::dist::MvNormal;
use crate::special::{ln_gamma, ln_normal_cdf, ln_normal_pdf_var, normal_cdf};
use crate::{Error, Result};

/// Outcome likelihood family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeFamily {
    /// Continuous outcomes, `Y ~ N(mean, σ_k²)`.
    Gaussian,
    /// Binary outcomes through a probit link; the outcome variance is fixed
    /// at 1 and [`ParameterState::outcome_mean`] is the linear predictor.
    BinaryProbit,
}

/// Which empirical covariate distribution population-level estimands
/// average over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateDistribution {
    /// The pooled empirical distribution of all observed individuals.
    Pooled,
    /// Per-stratum empirical distributions, restricted to individuals in
    /// clusters currently labeled with that stratum.
    ByStratum,
}

/// Whether a regression coefficient block is stratum-specific or shared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefficientScope {
    /// A separate coefficient vector per stratum (the default).
    ByStratum,
    /// One coefficient vector common to all strata. Stratum-level
    /// intercepts (μ_k^D, μ_k^Y) and effects (δ_0k, δ_1k) stay per-stratum.
    Shared,
}

/// Structural choices of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of latent compliance strata K ≥ 1.
    pub n_strata: usize,
    pub outcome_family: OutcomeFamily,
    pub covariate_distribution: CovariateDistribution,
    /// Scope of the uptake slope vectors α.
    pub compliance_coefficients: CoefficientScope,
    /// Scope of the outcome slope vectors β₀, β₁.
    pub outcome_coefficients: CoefficientScope,
}

impl ModelConfig {
    /// Gaussian outcomes, pooled covariate distribution, stratum-specific
    /// coefficients.
    pub fn new(n_strata: usize) -> Self {
        ModelConfig {
            n_strata,
            outcome_family: OutcomeFamily::Gaussian,
            covariate_distribution: CovariateDistribution::Pooled,
            compliance_coefficients: CoefficientScope::ByStratum,
            outcome_coefficients: CoefficientScope::ByStratum,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_strata == 0 {
            return Err(Error::Config("n_strata must be at least 1".into()));
        }
        Ok(())
    }
}

/// Hyperparameters of every prior block.
///
/// Slope-vector priors are mean-zero sphericals, so a variance scalar per
/// block suffices. The cluster-effect variances τ_D², τ_Y² carry
/// "uniform on the standard-deviation scale" priors truncated at
/// `√u_tau_d_sq`, `√u_tau_y_sq`, i.e. densities ∝ (τ²)^(−1/2) on (0, U).
#[derive(Debug, Clone, PartialEq)]
pub struct PriorSpec {
    /// Dirichlet concentration for π, length K.
    pub dirichlet_weight: Vec<f64>,
    /// MVN prior location for each μ_k^S, length ℓ+P.
    pub strata_mean_loc: DVector<f64>,
    /// MVN prior covariance for each μ_k^S.
    pub strata_mean_cov: DMatrix<f64>,
    /// Inverse-Wishart scale matrix for Σ.
    pub sigma_scale: DMatrix<f64>,
    /// Inverse-Wishart degrees of freedom; must exceed (ℓ+P) − 1.
    pub sigma_dof: f64,
    /// Variance of the N(0, ·) prior on each μ_k^D.
    pub v_mu_d_sq: f64,
    /// Variance of the spherical prior on each α vector.
    pub v_alpha_sq: f64,
    /// Truncation bound: τ_D² < u_tau_d_sq.
    pub u_tau_d_sq: f64,
    /// Variance of the N(0, ·) prior on each μ_k^Y.
    pub v_mu_y_sq: f64,
    /// Variance of the spherical prior on β₀, β₁ vectors and on δ_1k.
    pub v_beta_sq: f64,
    /// Variance of the N(0, ·) prior on δ_0k (deliberately separate: the
    /// spillover effect is the parameter analysts most often want to
    /// shrink, sometimes all the way to an exclusion restriction).
    pub v_delta0_sq: f64,
    /// Truncation bound: τ_Y² < u_tau_y_sq.
    pub u_tau_y_sq: f64,
    /// Inverse-Gamma shape for each σ_k².
    pub sigma_sq_shape: f64,
    /// Inverse-Gamma rate for each σ_k².
    pub sigma_sq_rate: f64,
}

impl PriorSpec {
    /// The diffuse defaults used by the simulation studies: Dir(5,…,5),
    /// μ_k^S ~ MVN(0, 100·I), Σ ~ IW(0.01·I, ℓ+P+3), μ_k^D ~ N(0, 100),
    /// α ~ MVN(0, 1000·I), τ_D² < 25, regression blocks N(0, 1000),
    /// τ_Y² < 625, σ_k² ~ IG(1, 1).
    pub fn diffuse(n_strata: usize, cz_dim: usize) -> Self {
        PriorSpec {
            dirichlet_weight: vec![5.0; n_strata],
            strata_mean_loc: DVector::zeros(cz_dim),
            strata_mean_cov: DMatrix::identity(cz_dim, cz_dim) * 100.0,
            sigma_scale: DMatrix::identity(cz_dim, cz_dim) * 0.01,
            sigma_dof: cz_dim as f64 + 3.0,
            v_mu_d_sq: 100.0,
            v_alpha_sq: 1000.0,
            u_tau_d_sq: 25.0,
            v_mu_y_sq: 1000.0,
            v_beta_sq: 1000.0,
            v_delta0_sq: 1000.0,
            u_tau_y_sq: 625.0,
            sigma_sq_shape: 1.0,
            sigma_sq_rate: 1.0,
        }
    }

    /// Same defaults with a custom δ₀ prior variance (e.g. 16 for a weakly
    /// informative spillover prior, or values near zero to approximate a
    /// hard exclusion restriction).
    pub fn with_delta0_variance(mut self, v: f64) -> Self {
        self.v_delta0_sq = v;
        self
    }

    pub fn validate(&self, config: &ModelConfig, cz_dim: usize) -> Result<()> {
        if self.dirichlet_weight.len() != config.n_strata {
            return Err(Error::Config(format!(
                "dirichlet_weight has length {}, expected K = {}",
                self.dirichlet_weight.len(),
                config.n_strata
            )));
        }
        if self.dirichlet_weight.iter().any(|&l| !(l > 0.0)) {
            return Err(Error::Config(
                "dirichlet weights must be positive".into(),
            ));
        }
        if self.strata_mean_loc.len() != cz_dim
            || self.strata_mean_cov.nrows() != cz_dim
            || self.strata_mean_cov.ncols() != cz_dim
            || self.sigma_scale.nrows() != cz_dim
            || self.sigma_scale.ncols() != cz_dim
        {
            return Err(Error::Config(format!(
                "strata-mean / Σ prior dimensions must all be ℓ+P = {cz_dim}"
            )));
        }
        if !(self.sigma_dof > cz_dim as f64 - 1.0) {
            return Err(Error::Config(format!(
                "sigma_dof must exceed ℓ+P−1 = {}",
                cz_dim as f64 - 1.0
            )));
        }
        for (name, v) in [
            ("v_mu_d_sq", self.v_mu_d_sq),
            ("v_alpha_sq", self.v_alpha_sq),
            ("u_tau_d_sq", self.u_tau_d_sq),
            ("v_mu_y_sq", self.v_mu_y_sq),
            ("v_beta_sq", self.v_beta_sq),
            ("v_delta0_sq", self.v_delta0_sq),
            ("u_tau_y_sq", self.u_tau_y_sq),
            ("sigma_sq_shape", self.sigma_sq_shape),
            ("sigma_sq_rate", self.sigma_sq_rate),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// The full parameter vector θ of one chain state.
///
/// Vectors indexed by stratum always have length K even under a `Shared`
/// coefficient scope; the shared variants simply keep all K entries equal
/// (the Gibbs update draws once and broadcasts), which keeps every formula
/// downstream scope-agnostic.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterState {
    /// Stratum probabilities π, a K-simplex.
    pub pi: Vec<f64>,
    /// Mixture component means μ_k^S, each of length ℓ+P.
    pub strata_means: Vec<DVector<f64>>,
    /// Common mixture covariance Σ, SPD of size ℓ+P.
    pub sigma: DMatrix<f64>,
    /// Uptake intercepts μ_k^D.
    pub mu_d: Vec<f64>,
    /// Uptake slopes α_k, each of length M.
    pub alpha: Vec<Vec<f64>>,
    /// Uptake cluster-effect variance τ_D².
    pub tau_d_sq: f64,
    /// Uptake cluster effects φ_i^D, one per cluster.
    pub phi_d: Vec<f64>,
    /// Outcome intercepts μ_k^Y.
    pub mu_y: Vec<f64>,
    /// Baseline outcome slopes β_0k, each of length M.
    pub beta0: Vec<Vec<f64>>,
    /// Treatment-arm complier slopes β_1k, each of length M.
    pub beta1: Vec<Vec<f64>>,
    /// Treatment-arm complier intercept shifts δ_1k.
    pub delta1: Vec<f64>,
    /// Control-arm would-be-complier (spillover) shifts δ_0k.
    pub delta0: Vec<f64>,
    /// Outcome variances σ_k² (all fixed at 1 for binary outcomes).
    pub sigma_sq: Vec<f64>,
    /// Outcome cluster-effect variance τ_Y².
    pub tau_y_sq: f64,
    /// Outcome cluster effects φ_i^Y, one per cluster.
    pub phi_y: Vec<f64>,
}

impl ParameterState {
    /// A neutral state to start chains from: uniform π, zero means and
    /// coefficients, unit variances (σ², Σ), cluster effects at zero, and
    /// cluster-effect variances at their truncated-prior means U/3.
    pub fn neutral(
        config: &ModelConfig,
        priors: &PriorSpec,
        cz_dim: usize,
        n_x: usize,
        n_clusters: usize,
    ) -> Self {
        let k = config.n_strata;
        ParameterState {
            pi: vec![1.0 / k as f64; k],
            strata_means: vec![DVector::zeros(cz_dim); k],
            sigma: DMatrix::identity(cz_dim, cz_dim),
            mu_d: vec![0.0; k],
            alpha: vec![vec![0.0; n_x]; k],
            tau_d_sq: priors.u_tau_d_sq / 3.0,
            phi_d: vec![0.0; n_clusters],
            mu_y: vec![0.0; k],
            beta0: vec![vec![0.0; n_x]; k],
            beta1: vec![vec![0.0; n_x]; k],
            delta1: vec![0.0; k],
            delta0: vec![0.0; k],
            sigma_sq: vec![1.0; k],
            tau_y_sq: priors.u_tau_y_sq / 3.0,
            phi_y: vec![0.0; n_clusters],
        }
    }

    pub fn n_strata(&self) -> usize {
        self.pi.len()
    }

    /// Check every structural invariant against the model shape.
    pub fn validate(
        &self,
        config: &ModelConfig,
        priors: &PriorSpec,
        cz_dim: usize,
        n_x: usize,
        n_clusters: usize,
    ) -> Result<()> {
        let k = config.n_strata;
        let dim_ok = self.pi.len() == k
            && self.strata_means.len() == k
            && self.strata_means.iter().all(|m| m.len() == cz_dim)
            && self.sigma.nrows() == cz_dim
            && self.sigma.ncols() == cz_dim
            && self.mu_d.len() == k
            && self.alpha.len() == k
            && self.alpha.iter().all(|a| a.len() == n_x)
            && self.phi_d.len() == n_clusters
            && self.mu_y.len() == k
            && self.beta0.len() == k
            && self.beta0.iter().all(|b| b.len() == n_x)
            && self.beta1.len() == k
            && self.beta1.iter().all(|b| b.len() == n_x)
            && self.delta1.len() == k
            && self.delta0.len() == k
            && self.sigma_sq.len() == k
            && self.phi_y.len() == n_clusters;
        if !dim_ok {
            return Err(Error::Domain(
                "parameter state dimensions do not match the model shape".into(),
            ));
        }
        let pi_sum: f64 = self.pi.iter().sum();
        if self.pi.iter().any(|&p| !(p >= 0.0)) || (pi_sum - 1.0).abs() > 1e-8 {
            return Err(Error::Domain(format!(
                "pi must be a probability simplex (sums to {pi_sum})"
            )));
        }
        if self.sigma.clone().cholesky().is_none() {
            return Err(Error::Domain(
                "mixture covariance must be symmetric positive definite".into(),
            ));
        }
        if !(self.tau_d_sq > 0.0 && self.tau_d_sq <= priors.u_tau_d_sq) {
            return Err(Error::Domain(format!(
                "tau_d_sq = {} outside (0, {}]",
                self.tau_d_sq, priors.u_tau_d_sq
            )));
        }
        if !(self.tau_y_sq > 0.0 && self.tau_y_sq <= priors.u_tau_y_sq) {
            return Err(Error::Domain(format!(
                "tau_y_sq = {} outside (0, {}]",
                self.tau_y_sq, priors.u_tau_y_sq
            )));
        }
        if self.sigma_sq.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Domain("sigma_sq entries must be positive".into()));
        }
        if config.outcome_family == OutcomeFamily::BinaryProbit
            && self.sigma_sq.iter().any(|&v| v != 1.0)
        {
            return Err(Error::Domain(
                "binary outcomes fix all sigma_sq at 1".into(),
            ));
        }
        if let CoefficientScope::Shared = config.compliance_coefficients {
            if self.alpha.iter().any(|a| a != &self.alpha[0]) {
                return Err(Error::Domain(
                    "shared compliance scope requires equal alpha vectors".into(),
                ));
            }
        }
        if let CoefficientScope::Shared = config.outcome_coefficients {
            if self.beta0.iter().any(|b| b != &self.beta0[0])
                || self.beta1.iter().any(|b| b != &self.beta1[0])
            {
                return Err(Error::Domain(
                    "shared outcome scope requires equal beta vectors".into(),
                ));
            }
        }
        Ok(())
    }

    /// Uptake linear predictor μ_k^D + x·α_k + φ_i^D.
    pub fn compliance_lp(&self, x: &[f64], k: usize, cluster: usize) -> f64 {
        self.compliance_lp_core(x, k) + self.phi_d[cluster]
    }

    /// Uptake linear predictor without any cluster effect (for fresh,
    /// exchangeable clusters whose effect is drawn separately).
    pub fn compliance_lp_core(&self, x: &[f64], k: usize) -> f64 {
        self.mu_d[k] + dot(x, &self.alpha[k])
    }

    /// Probability that an individual with covariates `x` in cluster
    /// `cluster` of stratum `k` takes up treatment when offered.
    pub fn compliance_prob(&self, x: &[f64], k: usize, cluster: usize) -> f64 {
        normal_cdf(self.compliance_lp(x, k, cluster))
    }

    /// Uptake probability with the cluster effect integrated out:
    /// Φ((μ_k^D + x·α_k) / √(τ_D² + 1)).
    pub fn marginal_compliance_prob(&self, x: &[f64], k: usize) -> f64 {
        let lp = self.mu_d[k] + dot(x, &self.alpha[k]);
        normal_cdf(lp / (self.tau_d_sq + 1.0).sqrt())
    }

    /// Potential-outcome mean (Gaussian) or probit linear predictor
    /// (binary) for arm `treated`, uptake type `d`, covariates `x`,
    /// stratum `k`, cluster `cluster`.
    pub fn outcome_mean(
        &self,
        treated: bool,
        d: bool,
        x: &[f64],
        k: usize,
        cluster: usize,
    ) -> f64 {
        self.outcome_mean_core(treated, d, x, k) + self.phi_y[cluster]
    }

    /// Potential-outcome mean without any cluster effect (for fresh,
    /// exchangeable clusters whose effect is drawn separately).
    pub fn outcome_mean_core(&self, treated: bool, d: bool, x: &[f64], k: usize) -> f64 {
        let base = self.mu_y[k] + dot(x, &self.beta0[k]);
        let uptake_shift = match (d, treated) {
            (false, _) => 0.0,
            (true, true) => dot(x, &self.beta1[k]) + self.delta1[k],
            (true, false) => self.delta0[k],
        };
        base + uptake_shift
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The additive pieces of the augmented log-joint. `prior` collects every
/// data-free parameter density plus the hierarchical cluster-effect terms;
/// the other three are the likelihood portion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogJointParts {
    /// Parameter priors and φ | τ² terms.
    pub prior: f64,
    /// Σ_i [ ln π_{S_i} + ln MVN((C_i, Z_i); μ_{S_i}^S, Σ) ].
    pub mixture: f64,
    /// Σ_ij ln Bernoulli(D_ij; Φ(linear predictor)).
    pub compliance: f64,
    /// Σ_ij ln outcome density at observed Y_ij (missing outcomes
    /// contribute nothing; they are imputed separately for estimation).
    pub outcome: f64,
}

impl LogJointParts {
    pub fn total(&self) -> f64 {
        self.prior + self.mixture + self.compliance + self.outcome
    }

    /// The data-dependent portion (everything except `prior`).
    pub fn likelihood(&self) -> f64 {
        self.mixture + self.compliance + self.outcome
    }
}

/// Log of the unnormalized augmented posterior, split into its additive
/// parts. Finite for any structurally possible state; −∞ only when the
/// state is impossible (a cluster assigned to a zero-probability stratum,
/// τ² outside its truncation bound, a non-binary outcome under the probit
/// family, …).
pub fn log_joint_parts(
    data: &TrialDataset,
    latent: &LatentState,
    theta: &ParameterState,
    priors: &PriorSpec,
    config: &ModelConfig,
) -> Result<LogJointParts> {
    let k_strata = config.n_strata;
    let cz_dim = data.cz_dim();
    debug_assert!(latent.conforms_to(data, k_strata));

    // --- prior portion -----------------------------------------------------
    let mut prior = ln_dirichlet_pdf(&theta.pi, &priors.dirichlet_weight)?;

    let strata_mean_prior = MvNormal::new(
        priors.strata_mean_loc.clone(),
        priors.strata_mean_cov.clone(),
    )?;
    for m in &theta.strata_means {
        prior += strata_mean_prior.ln_pdf(m);
    }

    prior += ln_inv_wishart_pdf(&theta.sigma, &priors.sigma_scale, priors.sigma_dof)?;

    for k in 0..k_strata {
        prior += ln_normal_pdf_var(theta.mu_d[k], 0.0, priors.v_mu_d_sq);
        prior += ln_normal_pdf_var(theta.mu_y[k], 0.0, priors.v_mu_y_sq);
        prior += ln_normal_pdf_var(theta.delta1[k], 0.0, priors.v_beta_sq);
        prior += ln_normal_pdf_var(theta.delta0[k], 0.0, priors.v_delta0_sq);
    }
    // Shared slope vectors are one parameter: their prior counts once.
    let alpha_blocks: &[Vec<f64>] = match config.compliance_coefficients {
        CoefficientScope::ByStratum => &theta.alpha,
        CoefficientScope::Shared => &theta.alpha[..1],
    };
    for a in alpha_blocks {
        prior += ln_spherical_normal_pdf(a, priors.v_alpha_sq);
    }
    let (beta0_blocks, beta1_blocks): (&[Vec<f64>], &[Vec<f64>]) =
        match config.outcome_coefficients {
            CoefficientScope::ByStratum => (&theta.beta0, &theta.beta1),
            CoefficientScope::Shared => (&theta.beta0[..1], &theta.beta1[..1]),
        };
    for b in beta0_blocks.iter().chain(beta1_blocks) {
        prior += ln_spherical_normal_pdf(b, priors.v_beta_sq);
    }

    prior += ln_truncated_sd_uniform_pdf(theta.tau_d_sq, priors.u_tau_d_sq);
    prior += ln_truncated_sd_uniform_pdf(theta.tau_y_sq, priors.u_tau_y_sq);

    if config.outcome_family == OutcomeFamily::Gaussian {
        for &s in &theta.sigma_sq {
            prior += ln_inv_gamma_pdf(s, priors.sigma_sq_shape, priors.sigma_sq_rate);
        }
    }

    for i in 0..data.n_clusters() {
        prior += ln_normal_pdf_var(theta.phi_d[i], 0.0, theta.tau_d_sq);
        prior += ln_normal_pdf_var(theta.phi_y[i], 0.0, theta.tau_y_sq);
    }

    // --- mixture portion ---------------------------------------------------
    let mixture_dist: Vec<MvNormal> = theta
        .strata_means
        .iter()
        .map(|m| MvNormal::new(m.clone(), theta.sigma.clone()))
        .collect::<Result<_>>()?;
    let mut mixture = 0.0;
    let mut cz = DVector::zeros(cz_dim);
    for i in 0..data.n_clusters() {
        let k = latent.strata[i];
        mixture += theta.pi[k].ln();
        for (slot, v) in cz
            .iter_mut()
            .zip(latent.c[i].iter().chain(data.standardized_z(i).iter()))
        {
            *slot = *v;
        }
        mixture += mixture_dist[k].ln_pdf(&cz);
    }

    // --- compliance and outcome portions ------------------------------------
    let mut compliance = 0.0;
    let mut outcome = 0.0;
    for (j, ind) in data.individuals().iter().enumerate() {
        let i = ind.cluster_index;
        let k = latent.strata[i];
        let treated = data.clusters()[i].treated;
        let x = data.standardized_x(j);
        let d = latent.d[j];

        let lp = theta.compliance_lp(&x, k, i);
        compliance += if d { ln_normal_cdf(lp) } else { ln_normal_cdf(-lp) };

        if let Observation::Observed(y) = ind.outcome {
            let mean = theta.outcome_mean(treated, d, &x, k, i);
            outcome += match config.outcome_family {
                OutcomeFamily::Gaussian => ln_normal_pdf_var(y, mean, theta.sigma_sq[k]),
                OutcomeFamily::BinaryProbit => {
                    if y == 1.0 {
                        ln_normal_cdf(mean)
                    } else if y == 0.0 {
                        ln_normal_cdf(-mean)
                    } else {
                        f64::NEG_INFINITY
                    }
                }
            };
        }
    }

    Ok(LogJointParts {
        prior,
        mixture,
        compliance,
        outcome,
    })
}

/// Total augmented log-joint (see [`log_joint_parts`]).
pub fn log_joint(
    data: &TrialDataset,
    latent: &LatentState,
    theta: &ParameterState,
    priors: &PriorSpec,
    config: &ModelConfig,
) -> Result<f64> {
    Ok(log_joint_parts(data, latent, theta, priors, config)?.total())
}

/// ln Dirichlet(p; λ), including the normalizer.
fn ln_dirichlet_pdf(p: &[f64], lambda: &[f64]) -> Result<f64> {
    if p.len() != lambda.len() {
        return Err(Error::Domain(
            "dirichlet dimension mismatch in log density".into(),
        ));
    }
    let mut ln_norm = ln_gamma(lambda.iter().sum());
    let mut ln_kernel = 0.0;
    for (&pi, &li) in p.iter().zip(lambda) {
        ln_norm -= ln_gamma(li);
        ln_kernel += (li - 1.0) * pi.ln();
    }
    Ok(ln_norm + ln_kernel)
}

/// ln N(coefficients; 0, v·I).
fn ln_spherical_normal_pdf(coef: &[f64], v: f64) -> f64 {
    coef.iter().map(|&c| ln_normal_pdf_var(c, 0.0, v)).sum()
}

/// Log density of the "uniform on the SD scale" truncated prior for a
/// variance: τ ~ Uniform(0, √u) so p(τ²) = (2 √(u τ²))^{-1} on (0, u).
fn ln_truncated_sd_uniform_pdf(tau_sq: f64, u: f64) -> f64 {
    if tau_sq <= 0.0 || tau_sq >= u {
        return f64::NEG_INFINITY;
    }
    -(2.0 * (u * tau_sq).sqrt()).ln()
}

/// ln Inverse-Gamma(x; shape a, rate b).
fn ln_inv_gamma_pdf(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

/// ln Inverse-Wishart(Σ; scale Ψ, dof ν), including the normalizer.
fn ln_inv_wishart_pdf(sigma: &DMatrix<f64>, scale: &DMatrix<f64>, dof: f64) -> Result<f64> {
    let d = sigma.nrows();
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("covariance not SPD in inverse-Wishart density".into()))?;
    let scale_chol = scale
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Domain("inverse-Wishart scale not SPD".into()))?;
    let ln_det_sigma: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ln_det_scale: f64 = 2.0
        * scale_chol
            .l()
            .diagonal()
            .iter()
            .map(|v| v.ln())
            .sum::<f64>();
    let trace = chol.solve(scale).trace();
    let ln_multigamma: f64 = (0..d)
        .map(|j| ln_gamma((dof - j as f64) / 2.0))
        .sum::<f64>()
        + (d * (d - 1)) as f64 / 4.0 * std::f64::consts::PI.ln();
    Ok(0.5 * dof * ln_det_scale
        - 0.5 * dof * (d as f64) * std::f64::consts::LN_2
        - ln_multigamma
        - 0.5 * (dof + d as f64 + 1.0) * ln_det_sigma
        - 0.5 * trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ClusterRecord, IndividualRecord, MissingKind};
    use crate::rng::RngStream;
    use approx::assert_relative_eq;

    fn tiny_config() -> ModelConfig {
        ModelConfig::new(2)
    }

    /// One treated + one control cluster, two individuals each, ℓ=1, P=1,
    /// M=1.
    fn tiny_dataset() -> TrialDataset {
        let clusters = vec![
            ClusterRecord {
                id: "t".into(),
                treated: true,
                z: vec![0.4],
                compliance: Observation::Observed(vec![0.7]),
                n_individuals: 0,
            },
            ClusterRecord {
                id: "c".into(),
                treated: false,
                z: vec![-0.3],
                compliance: Observation::Missing(MissingKind::Structural),
                n_individuals: 0,
            },
        ];
        let ind = |cid: &str, x: f64, d: Observation<bool>, y: Observation<f64>| {
            IndividualRecord {
                cluster_id: cid.into(),
                cluster_index: 0,
                x: vec![x],
                uptake: d,
                outcome: y,
            }
        };
        let structural = Observation::Missing(MissingKind::Structural);
        let individuals = vec![
            ind("t", 0.2, Observation::Observed(true), Observation::Observed(3.1)),
            ind("t", -0.5, Observation::Observed(false), Observation::Observed(1.2)),
            ind("c", 0.9, structural, Observation::Observed(0.4)),
            ind("c", -0.1, structural, Observation::Missing(MissingKind::Incidental)),
        ];
        TrialDataset::from_parts(clusters, individuals, 1, 1, 1).unwrap()
    }

    fn tiny_latent() -> LatentState {
        LatentState {
            strata: vec![0, 1],
            c: vec![vec![0.7], vec![-0.2]],
            d: vec![true, false, true, false],
            u: vec![0.0; 4],
            y_mis: vec![None; 4],
        }
    }

    fn tiny_theta(config: &ModelConfig, priors: &PriorSpec) -> ParameterState {
        let mut theta = ParameterState::neutral(config, priors, 2, 1, 2);
        theta.pi = vec![0.6, 0.4];
        theta.strata_means = vec![
            DVector::from_vec(vec![0.5, 0.1]),
            DVector::from_vec(vec![-0.4, 0.2]),
        ];
        theta.sigma = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        theta.mu_d = vec![0.3, -0.2];
        theta.alpha = vec![vec![0.5], vec![-0.1]];
        theta.tau_d_sq = 0.5;
        theta.phi_d = vec![0.15, -0.05];
        theta.mu_y = vec![2.0, 1.0];
        theta.beta0 = vec![vec![1.0], vec![0.5]];
        theta.beta1 = vec![vec![2.0], vec![0.7]];
        theta.delta1 = vec![5.5, 4.0];
        theta.delta0 = vec![1.0, 0.5];
        theta.sigma_sq = vec![2.0, 1.5];
        theta.tau_y_sq = 1.1;
        theta.phi_y = vec![0.3, -0.2];
        theta
    }

    #[test]
    fn compliance_prob_known_values() {
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let mut theta = tiny_theta(&config, &priors);
        theta.mu_d = vec![0.0, 0.0];
        theta.alpha = vec![vec![0.0], vec![0.0]];
        theta.phi_d = vec![0.0, 0.0];
        assert_eq!(theta.compliance_prob(&[1.0], 0, 0), 0.5);

        // Exact cancellation of intercept and slope terms.
        theta.mu_d[0] = 0.5;
        theta.alpha[0] = vec![-0.5];
        assert_eq!(theta.compliance_prob(&[1.0], 0, 0), 0.5);

        // μ = 0.3, x·α = 0.2, φ = 0.1.
        theta.mu_d[0] = 0.3;
        theta.alpha[0] = vec![0.2];
        theta.phi_d[0] = 0.1;
        let p = theta.compliance_prob(&[1.0], 0, 0);
        assert_eq!(p, normal_cdf(0.6));
        assert_relative_eq!(p, 0.7257, epsilon = 5e-5);
    }

    #[test]
    fn marginal_compliance_prob_matches_quadrature() {
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let mut theta = tiny_theta(&config, &priors);
        theta.phi_d = vec![0.0, 0.0];

        // τ² = 0 degenerates to the conditional probability.
        theta.tau_d_sq = 0.0;
        theta.mu_d[0] = 0.4;
        theta.alpha[0] = vec![0.3];
        let x = [2.0];
        assert_relative_eq!(
            theta.marginal_compliance_prob(&x, 0),
            theta.compliance_prob(&x, 0, 0),
            epsilon = 1e-15
        );

        // Zero linear predictor stays 1/2 under any spread.
        theta.mu_d[0] = 0.0;
        theta.alpha[0] = vec![0.0];
        for tau_sq in [0.0, 0.25, 4.0, 25.0] {
            theta.tau_d_sq = tau_sq;
            assert_eq!(theta.marginal_compliance_prob(&x, 0), 0.5);
        }

        // lp = 1, τ² = 0.25 → Φ(1/√1.25), and this equals the integral
        // ∫ Φ(1 + φ) N(φ; 0, 0.25) dφ (Simpson's rule over ±8 SD).
        theta.mu_d[0] = 1.0;
        theta.tau_d_sq = 0.25;
        let p = theta.marginal_compliance_prob(&x, 0);
        assert_relative_eq!(p, normal_cdf(1.0 / 1.25f64.sqrt()), epsilon = 1e-15);
        assert_relative_eq!(p, 0.8144, epsilon = 1e-4);
        let quad = simpson(-4.0, 4.0, 20_000, |phi| {
            // N(φ; 0, 0.25) density, SD = 0.5.
            normal_cdf(1.0 + phi) * crate::special::normal_pdf(phi / 0.5) / 0.5
        });
        assert_relative_eq!(p, quad, epsilon = 1e-4);
    }

    #[test]
    fn marginal_compliance_prob_matches_monte_carlo() {
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let mut theta = tiny_theta(&config, &priors);
        theta.tau_d_sq = 0.49;
        theta.alpha[0] = vec![1.0];
        theta.phi_d = vec![0.0, 0.0];
        let mut rng = RngStream::new(401);
        let n = 1_000_000usize;
        for lp in [-3.0, -1.5, 0.0, 1.5, 3.0] {
            theta.mu_d[0] = lp;
            let x = [0.0];
            let exact = theta.marginal_compliance_prob(&x, 0);
            let mut sum = 0.0;
            let mut sum_sq = 0.0;
            for _ in 0..n {
                let phi = crate::dist::sample_normal(&mut rng, 0.0, theta.tau_d_sq.sqrt());
                let p = normal_cdf(lp + phi);
                sum += p;
                sum_sq += p * p;
            }
            let mean = sum / n as f64;
            let var = (sum_sq / n as f64 - mean * mean).max(0.0);
            let se = (var / n as f64).sqrt();
            assert!(
                (exact - mean).abs() <= 3.0 * se.max(1e-9),
                "lp = {lp}: exact {exact} vs MC {mean} ± {se}"
            );
        }
    }

    fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn outcome_mean_exclusion_restriction_and_contrast() {
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let theta = tiny_theta(&config, &priors);
        let x = [0.8];
        for k in 0..2 {
            for cluster in 0..2 {
                // d = 0: both arms produce the same mean, exactly.
                assert_eq!(
                    theta.outcome_mean(true, false, &x, k, cluster),
                    theta.outcome_mean(false, false, &x, k, cluster)
                );
                // d = 1 contrast: Xβ₁ + δ₁ − δ₀.
                let contrast = theta.outcome_mean(true, true, &x, k, cluster)
                    - theta.outcome_mean(false, true, &x, k, cluster);
                let expected = dot(&x, &theta.beta1[k]) + theta.delta1[k] - theta.delta0[k];
                assert_relative_eq!(contrast, expected, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn outcome_mean_spot_value() {
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let mut theta = tiny_theta(&config, &priors);
        theta.mu_y[0] = 2.0;
        theta.beta0[0] = vec![1.5];
        theta.beta1[0] = vec![2.0];
        theta.delta1[0] = 5.5;
        theta.phi_y[0] = 0.3;
        assert_relative_eq!(
            theta.outcome_mean(true, true, &[1.0], 0, 0),
            11.3,
            epsilon = 1e-12
        );
    }

    #[test]
    fn log_joint_matches_hand_composed_sum() {
        // Single cluster, single individual, K = 1: every term is simple
        // enough to compose by hand from the scalar densities.
        let clusters = vec![ClusterRecord {
            id: "t".into(),
            treated: true,
            z: vec![0.4],
            compliance: Observation::Observed(vec![0.7]),
            n_individuals: 0,
        }];
        let individuals = vec![IndividualRecord {
            cluster_id: "t".into(),
            cluster_index: 0,
            x: vec![0.2],
            uptake: Observation::Observed(true),
            outcome: Observation::Observed(3.1),
        }];
        let data = TrialDataset::from_parts(clusters, individuals, 1, 1, 1).unwrap();
        let config = ModelConfig::new(1);
        let priors = PriorSpec::diffuse(1, 2);
        let mut theta = ParameterState::neutral(&config, &priors, 2, 1, 1);
        theta.strata_means = vec![DVector::from_vec(vec![0.5, 0.1])];
        theta.sigma = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        theta.mu_d = vec![0.3];
        theta.alpha = vec![vec![0.5]];
        theta.tau_d_sq = 0.5;
        theta.phi_d = vec![0.15];
        theta.mu_y = vec![2.0];
        theta.beta0 = vec![vec![1.0]];
        theta.beta1 = vec![vec![2.0]];
        theta.delta1 = vec![5.5];
        theta.delta0 = vec![1.0];
        theta.sigma_sq = vec![2.0];
        theta.tau_y_sq = 1.1;
        theta.phi_y = vec![0.3];
        let latent = LatentState {
            strata: vec![0],
            c: vec![vec![0.7]],
            d: vec![true],
            u: vec![0.0],
            y_mis: vec![None],
        };

        let parts = log_joint_parts(&data, &latent, &theta, &priors, &config).unwrap();

        // K = 1: Dirichlet over a 1-simplex has density Γ(λ)/Γ(λ) = 1 at
        // π = (1), so its log vanishes.
        let mvn_prior = MvNormal::new(
            priors.strata_mean_loc.clone(),
            priors.strata_mean_cov.clone(),
        )
        .unwrap();
        let expected_prior = mvn_prior.ln_pdf(&theta.strata_means[0])
            + ln_inv_wishart_pdf(&theta.sigma, &priors.sigma_scale, priors.sigma_dof).unwrap()
            + ln_normal_pdf_var(0.3, 0.0, priors.v_mu_d_sq)
            + ln_normal_pdf_var(2.0, 0.0, priors.v_mu_y_sq)
            + ln_normal_pdf_var(5.5, 0.0, priors.v_beta_sq)
            + ln_normal_pdf_var(1.0, 0.0, priors.v_delta0_sq)
            + ln_normal_pdf_var(0.5, 0.0, priors.v_alpha_sq)
            + ln_normal_pdf_var(1.0, 0.0, priors.v_beta_sq)
            + ln_normal_pdf_var(2.0, 0.0, priors.v_beta_sq)
            + ln_truncated_sd_uniform_pdf(0.5, 25.0)
            + ln_truncated_sd_uniform_pdf(1.1, 625.0)
            + ln_inv_gamma_pdf(2.0, 1.0, 1.0)
            + ln_normal_pdf_var(0.15, 0.0, 0.5)
            + ln_normal_pdf_var(0.3, 0.0, 1.1);
        assert_relative_eq!(parts.prior, expected_prior, epsilon = 1e-12);

        let mix = MvNormal::new(theta.strata_means[0].clone(), theta.sigma.clone()).unwrap();
        let expected_mixture = 0.0 + mix.ln_pdf(&DVector::from_vec(vec![0.7, 0.4]));
        assert_relative_eq!(parts.mixture, expected_mixture, epsilon = 1e-12);

        // D = 1 with lp = 0.3 + 0.2·0.5 + 0.15.
        let expected_compliance = ln_normal_cdf(0.55);
        assert_relative_eq!(parts.compliance, expected_compliance, epsilon = 1e-12);

        // Y = 3.1 with treated complier mean 2 + 0.2 + (0.4 + 5.5) + 0.3.
        let expected_outcome = ln_normal_pdf_var(3.1, 8.4, 2.0);
        assert_relative_eq!(parts.outcome, expected_outcome, epsilon = 1e-12);
    }

    #[test]
    fn prior_and_likelihood_terms_separate() {
        let data = tiny_dataset();
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let theta = tiny_theta(&config, &priors);
        let latent = tiny_latent();
        let base = log_joint_parts(&data, &latent, &theta, &priors, &config).unwrap();

        let mut scaled = priors.clone();
        scaled.v_beta_sq = 500.0;
        scaled.sigma_sq_rate = 3.0;
        let moved = log_joint_parts(&data, &latent, &theta, &scaled, &config).unwrap();
        assert_ne!(base.prior, moved.prior);
        assert_eq!(base.mixture, moved.mixture);
        assert_eq!(base.compliance, moved.compliance);
        assert_eq!(base.outcome, moved.outcome);
    }

    #[test]
    fn duplicating_the_dataset_doubles_the_likelihood() {
        let data = tiny_dataset();
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let mut theta = tiny_theta(&config, &priors);
        let latent = tiny_latent();
        let base = log_joint_parts(&data, &latent, &theta, &priors, &config).unwrap();

        // Duplicate every cluster (fresh ids) and every individual.
        let mut clusters = data.clusters().to_vec();
        clusters.extend(data.clusters().iter().map(|c| {
            let mut c2 = c.clone();
            c2.id = format!("{}-copy", c.id);
            c2
        }));
        let mut individuals = data.individuals().to_vec();
        individuals.extend(data.individuals().iter().map(|ind| {
            let mut i2 = ind.clone();
            i2.cluster_id = format!("{}-copy", ind.cluster_id);
            i2
        }));
        let doubled = TrialDataset::from_parts(clusters, individuals, 1, 1, 1).unwrap();
        let latent2 = LatentState {
            strata: [latent.strata.clone(), latent.strata.clone()].concat(),
            c: [latent.c.clone(), latent.c.clone()].concat(),
            d: [latent.d.clone(), latent.d.clone()].concat(),
            u: [latent.u.clone(), latent.u.clone()].concat(),
            y_mis: [latent.y_mis.clone(), latent.y_mis.clone()].concat(),
        };
        theta.phi_d = [theta.phi_d.clone(), theta.phi_d.clone()].concat();
        theta.phi_y = [theta.phi_y.clone(), theta.phi_y.clone()].concat();
        let big = log_joint_parts(&doubled, &latent2, &theta, &priors, &config).unwrap();
        assert_relative_eq!(big.likelihood(), 2.0 * base.likelihood(), epsilon = 1e-12);
    }

    #[test]
    fn log_joint_changes_locally_with_single_field_edits() {
        let data = tiny_dataset();
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let theta = tiny_theta(&config, &priors);
        let latent = tiny_latent();
        let base = log_joint_parts(&data, &latent, &theta, &priors, &config).unwrap();

        // Move one observed outcome: only that record's outcome term moves.
        let mut clusters = data.clusters().to_vec();
        let mut individuals = data.individuals().to_vec();
        let old_y = 3.1;
        let new_y = 2.4;
        individuals[0].outcome = Observation::Observed(new_y);
        let edited = TrialDataset::from_parts(clusters.clone(), individuals, 1, 1, 1).unwrap();
        let moved = log_joint_parts(&edited, &latent, &theta, &priors, &config).unwrap();
        let k = latent.strata[0];
        let mean = theta.outcome_mean(true, true, &[0.2], k, 0);
        let expected_delta =
            ln_normal_pdf_var(new_y, mean, theta.sigma_sq[k]) - ln_normal_pdf_var(old_y, mean, theta.sigma_sq[k]);
        assert_relative_eq!(moved.outcome - base.outcome, expected_delta, epsilon = 1e-12);
        assert_eq!(moved.mixture, base.mixture);
        assert_eq!(moved.compliance, base.compliance);
        assert_eq!(moved.prior, base.prior);

        // Move one cluster covariate: only that cluster's mixture term moves.
        clusters[1].z = vec![0.6];
        let edited = TrialDataset::from_parts(clusters, data.individuals().to_vec(), 1, 1, 1)
            .unwrap();
        let moved = log_joint_parts(&edited, &latent, &theta, &priors, &config).unwrap();
        let k = latent.strata[1];
        let mix = MvNormal::new(theta.strata_means[k].clone(), theta.sigma.clone()).unwrap();
        let expected_delta = mix.ln_pdf(&DVector::from_vec(vec![-0.2, 0.6]))
            - mix.ln_pdf(&DVector::from_vec(vec![-0.2, -0.3]));
        assert_relative_eq!(moved.mixture - base.mixture, expected_delta, epsilon = 1e-12);
        assert_eq!(moved.outcome, base.outcome);
        assert_eq!(moved.compliance, base.compliance);
    }

    #[test]
    fn log_joint_is_minus_infinity_only_for_impossible_states() {
        let data = tiny_dataset();
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let mut theta = tiny_theta(&config, &priors);
        let latent = tiny_latent();
        let v = log_joint(&data, &latent, &theta, &priors, &config).unwrap();
        assert!(v.is_finite());

        // A cluster assigned to a zero-probability stratum.
        theta.pi = vec![1.0, 0.0];
        let v = log_joint(&data, &latent, &theta, &priors, &config).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);

        // τ² beyond its truncation bound.
        let mut theta = tiny_theta(&config, &priors);
        theta.tau_d_sq = 26.0;
        let v = log_joint(&data, &latent, &theta, &priors, &config).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
    }

    #[test]
    fn binary_family_uses_probit_outcome_terms() {
        let clusters = vec![ClusterRecord {
            id: "t".into(),
            treated: true,
            z: vec![],
            compliance: Observation::Observed(vec![0.7]),
            n_individuals: 0,
        }];
        let mk = |y: f64| IndividualRecord {
            cluster_id: "t".into(),
            cluster_index: 0,
            x: vec![],
            uptake: Observation::Observed(true),
            outcome: Observation::Observed(y),
        };
        let data =
            TrialDataset::from_parts(clusters, vec![mk(1.0), mk(0.0)], 1, 0, 0).unwrap();
        let mut config = ModelConfig::new(1);
        config.outcome_family = OutcomeFamily::BinaryProbit;
        let priors = PriorSpec::diffuse(1, 1);
        let mut theta = ParameterState::neutral(&config, &priors, 1, 0, 1);
        theta.mu_y = vec![0.4];
        theta.delta1 = vec![0.3];
        let latent = LatentState {
            strata: vec![0],
            c: vec![vec![0.7]],
            d: vec![true, true],
            u: vec![0.0; 2],
            y_mis: vec![None; 2],
        };
        let parts = log_joint_parts(&data, &latent, &theta, &priors, &config).unwrap();
        let lp = 0.7;
        assert_relative_eq!(
            parts.outcome,
            ln_normal_cdf(lp) + ln_normal_cdf(-lp),
            epsilon = 1e-13
        );

        // A non-binary outcome value is structurally impossible here.
        let data_bad = {
            let clusters = data.clusters().to_vec();
            TrialDataset::from_parts(clusters, vec![mk(1.0), mk(0.5)], 1, 0, 0).unwrap()
        };
        let parts = log_joint_parts(&data_bad, &latent, &theta, &priors, &config).unwrap();
        assert_eq!(parts.outcome, f64::NEG_INFINITY);
    }

    #[test]
    fn validation_catches_broken_invariants() {
        let config = tiny_config();
        let priors = PriorSpec::diffuse(2, 2);
        let good = tiny_theta(&config, &priors);
        assert!(good.validate(&config, &priors, 2, 1, 2).is_ok());

        let mut bad = good.clone();
        bad.pi = vec![0.7, 0.7];
        assert!(bad.validate(&config, &priors, 2, 1, 2).is_err());

        let mut bad = good.clone();
        bad.sigma = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(bad.validate(&config, &priors, 2, 1, 2).is_err());

        let mut bad = good.clone();
        bad.tau_y_sq = 1e9;
        assert!(bad.validate(&config, &priors, 2, 1, 2).is_err());

        let mut bad = good.clone();
        bad.sigma_sq = vec![2.0, -1.0];
        assert!(bad.validate(&config, &priors, 2, 1, 2).is_err());

        // Shared scope demands equal coefficient vectors across strata.
        let mut shared_config = config;
        shared_config.compliance_coefficients = CoefficientScope::Shared;
        assert!(good.validate(&shared_config, &priors, 2, 1, 2).is_err());
        let mut equalized = good.clone();
        equalized.alpha = vec![vec![0.5], vec![0.5]];
        assert!(equalized.validate(&shared_config, &priors, 2, 1, 2).is_ok());
    }

    #[test]
    fn prior_spec_validation() {
        let config = tiny_config();
        let good = PriorSpec::diffuse(2, 3);
        assert!(good.validate(&config, 3).is_ok());

        let mut bad = good.clone();
        bad.sigma_dof = 1.5;
        assert!(bad.validate(&config, 3).is_err());

        let mut bad = good.clone();
        bad.v_delta0_sq = 0.0;
        assert!(bad.validate(&config, 3).is_err());

        let mut bad = good.clone();
        bad.dirichlet_weight = vec![5.0];
        assert!(bad.validate(&config, 3).is_err());

        assert!(PriorSpec::diffuse(2, 3)
            .with_delta0_variance(16.0)
            .validate(&config, 3)
            .is_ok());
    }

    #[test]
    fn shared_scope_counts_slope_priors_once() {
        let data = tiny_dataset();
        let priors = PriorSpec::diffuse(2, 2);
        let config = tiny_config();
        let mut shared_config = config;
        shared_config.compliance_coefficients = CoefficientScope::Shared;
        shared_config.outcome_coefficients = CoefficientScope::Shared;

        let mut theta = tiny_theta(&config, &priors);
        theta.alpha = vec![vec![0.5], vec![0.5]];
        theta.beta0 = vec![vec![1.0], vec![1.0]];
        theta.beta1 = vec![vec![2.0], vec![2.0]];
        let latent = tiny_latent();

        let by_stratum = log_joint_parts(&data, &latent, &theta, &priors, &config).unwrap();
        let shared = log_joint_parts(&data, &latent, &theta, &priors, &shared_config).unwrap();
        // Same state, but the shared config counts each slope prior once
        // instead of twice.
        let double_count = ln_normal_pdf_var(0.5, 0.0, priors.v_alpha_sq)
            + ln_normal_pdf_var(1.0, 0.0, priors.v_beta_sq)
            + ln_normal_pdf_var(2.0, 0.0, priors.v_beta_sq);
        assert_relative_eq!(
            by_stratum.prior - shared.prior,
            double_count,
            epsilon = 1e-12
        );
        assert_eq!(by_stratum.likelihood(), shared.likelihood());
    }
}
