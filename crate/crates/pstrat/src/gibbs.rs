//! The data-augmented Gibbs sampler.
//!
//! One sweep updates, in a fixed order, (a) the mixture component means,
//! (b) the mixture covariance, (c) the stratum probabilities, (d) the
//! probit uptake coefficients via truncated-normal utilities, (e) the
//! uptake cluster-effect variance, (f) the uptake cluster effects, (g) the
//! outcome regression blocks, (h) the outcome variances, (i) the outcome
//! cluster-effect variance, (j) the outcome cluster effects — then the
//! latent stratum labels, the control-arm compliance metrics, the
//! control-arm uptake types, and finally any incidentally missing treated
//! uptake and missing outcomes. Every update draws from its exact full
//! conditional, so the sweep leaves the augmented posterior invariant.
//!
//! Each update is exposed individually, along with a `*_conditional`
//! helper returning the conditional's parameters, so tests can verify the
//! algebra of every block against the independent [`log_joint`] surface
//! (gradients, Hessians, and two-point log-density differences) and
//! against quadrature.
//!
//! [`log_joint`]: crate::model::log_joint
//!
//! Utilities (the truncated-normal augmentation variables `U`, and their
//! binary-outcome counterparts) are redrawn from scratch at the start of
//! the step that consumes them, conditional on the current state; the
//! stratum/uptake updates use the marginal Bernoulli likelihood, which
//! together forms a valid partially collapsed sweep.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{LatentState, MissingKind, Observation, TrialDataset};
use crate::data::{ClusterRecord, IndividualRecord};
use crate::dist::{
    sample_bernoulli, sample_categorical_ln, sample_dirichlet, sample_gamma_rate,
    sample_inv_wishart, sample_normal, sample_std_normal, sample_truncated_inv_gamma,
    sample_truncated_normal, MvNormal,
};
use crate::draws::{DrawsMeta, ParameterDims, PosteriorDraws};
use crate::model::{CoefficientScope, ModelConfig, OutcomeFamily, ParameterState, PriorSpec};
use crate::special::{ln_normal_cdf, ln_normal_pdf_var, normal_cdf, normal_quantile};
use crate::{Error, Result};

/// How a chain's starting state is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Initialization {
    /// Cluster the observed-or-predicted compliance metrics and cluster
    /// covariates with k-means to seed the stratum labels, component means,
    /// and covariance; start uptake types at the observed treated rate.
    DataDriven,
    /// Round-robin stratum labels and a neutral parameter state.
    Spread,
}

/// Deterministic identifiability rule applied to retained draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelabelPolicy {
    /// Order strata by the first compliance-metric component mean,
    /// descending (stratum 1 = highest observed compliance).
    ComplianceMeanDescending,
    /// Same key, ascending.
    ComplianceMeanAscending,
    /// Keep raw labels.
    None,
}

/// Chain run configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainOptions {
    /// Total sweeps.
    pub n_iterations: usize,
    /// Sweeps discarded before retention starts.
    pub burn_in: usize,
    /// Keep every `thin`-th post-burn-in sweep.
    pub thin: usize,
    /// Stream seed; identical seeds reproduce the chain bit for bit.
    pub seed: u64,
    pub init: Initialization,
    pub relabel: RelabelPolicy,
    /// Retain latent-state snapshots alongside parameters (needed for
    /// finite-population estimands and posterior-predictive checks).
    pub keep_latents: bool,
}

impl ChainOptions {
    pub fn new(n_iterations: usize, burn_in: usize, seed: u64) -> Self {
        ChainOptions {
            n_iterations,
            burn_in,
            thin: 1,
            seed,
            init: Initialization::DataDriven,
            relabel: RelabelPolicy::ComplianceMeanDescending,
            keep_latents: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thin == 0 {
            return Err(Error::Config("thinning interval must be at least 1".into()));
        }
        if self.n_iterations > 0 && self.burn_in >= self.n_iterations {
            return Err(Error::Config(format!(
                "burn_in ({}) must be smaller than n_iterations ({})",
                self.burn_in, self.n_iterations
            )));
        }
        Ok(())
    }
}

/// Precomputed covariate arrays and index maps for the hot loops.
struct Context {
    n: usize,
    n_clusters: usize,
    m: usize,
    l: usize,
    p: usize,
    /// Standardized individual covariates, row-major n × m.
    x: Vec<f64>,
    /// Standardized cluster covariates, row-major I × p.
    z: Vec<f64>,
    /// Observed outcomes (NaN where missing).
    y: Vec<f64>,
    y_observed: Vec<bool>,
    treated: Vec<bool>,
    cluster_of: Vec<usize>,
    spans: Vec<Range<usize>>,
    /// Observed uptake; None for control-arm and incidentally missing cells.
    d_observed: Vec<Option<bool>>,
}

impl Context {
    fn build(data: &TrialDataset) -> Self {
        let n = data.n_individuals();
        let n_clusters = data.n_clusters();
        let m = data.n_individual_covariates();
        let p = data.n_cluster_covariates();
        let mut x = Vec::with_capacity(n * m);
        let mut y = Vec::with_capacity(n);
        let mut y_observed = Vec::with_capacity(n);
        let mut cluster_of = Vec::with_capacity(n);
        let mut d_observed = Vec::with_capacity(n);
        for (j, ind) in data.individuals().iter().enumerate() {
            x.extend(data.standardized_x(j));
            match ind.outcome {
                Observation::Observed(v) => {
                    y.push(v);
                    y_observed.push(true);
                }
                Observation::Missing(_) => {
                    y.push(f64::NAN);
                    y_observed.push(false);
                }
            }
            cluster_of.push(ind.cluster_index);
            d_observed.push(ind.uptake.value());
        }
        let mut z = Vec::with_capacity(n_clusters * p);
        for i in 0..n_clusters {
            z.extend(data.standardized_z(i));
        }
        Context {
            n,
            n_clusters,
            m,
            l: data.n_compliance_metrics(),
            p,
            x,
            z,
            y,
            y_observed,
            treated: data.clusters().iter().map(|c| c.treated).collect(),
            cluster_of,
            spans: (0..n_clusters).map(|i| data.span(i)).collect(),
            d_observed,
        }
    }

    #[inline]
    fn x_row(&self, j: usize) -> &[f64] {
        &self.x[j * self.m..(j + 1) * self.m]
    }

    #[inline]
    fn z_row(&self, i: usize) -> &[f64] {
        &self.z[i * self.p..(i + 1) * self.p]
    }
}

/// One chain's sampler: the dataset view, the current parameter and latent
/// state, and the transient augmentation variables.
pub struct GibbsSampler<'a> {
    data: &'a TrialDataset,
    config: ModelConfig,
    priors: PriorSpec,
    ctx: Context,
    pub theta: ParameterState,
    pub latent: LatentState,
    /// Binary-family outcome augmentation values (unused for Gaussian).
    y_star: Vec<f64>,
}

impl<'a> GibbsSampler<'a> {
    /// Build a sampler with a freshly initialized state.
    pub fn new(
        data: &'a TrialDataset,
        config: ModelConfig,
        priors: PriorSpec,
        init: Initialization,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        priors.validate(&config, data.cz_dim())?;
        if data.n_clusters() < 2 {
            return Err(Error::Config(
                "the sampler needs at least two clusters".into(),
            ));
        }
        if config.outcome_family == OutcomeFamily::BinaryProbit {
            for ind in data.individuals() {
                if let Observation::Observed(y) = ind.outcome {
                    if y != 0.0 && y != 1.0 {
                        return Err(Error::Config(format!(
                            "binary outcome family requires 0/1 outcomes, found {y}"
                        )));
                    }
                }
            }
        }
        let ctx = Context::build(data);
        let (theta, latent) = initialize(data, &ctx, &config, &priors, init, rng)?;
        Ok(GibbsSampler {
            data,
            config,
            priors,
            ctx,
            theta,
            latent,
            y_star: vec![0.0; data.n_individuals()],
        })
    }

    /// Build a sampler from an explicit state (validated for shape).
    pub fn from_state(
        data: &'a TrialDataset,
        config: ModelConfig,
        priors: PriorSpec,
        theta: ParameterState,
        latent: LatentState,
    ) -> Result<Self> {
        config.validate()?;
        priors.validate(&config, data.cz_dim())?;
        theta.validate(
            &config,
            &priors,
            data.cz_dim(),
            data.n_individual_covariates(),
            data.n_clusters(),
        )?;
        if !latent.conforms_to(data, config.n_strata) {
            return Err(Error::Domain(
                "latent state does not conform to the dataset".into(),
            ));
        }
        let ctx = Context::build(data);
        Ok(GibbsSampler {
            data,
            config,
            priors,
            ctx,
            theta,
            latent,
            y_star: vec![0.0; data.n_individuals()],
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn priors(&self) -> &PriorSpec {
        &self.priors
    }

    pub fn data(&self) -> &TrialDataset {
        self.data
    }

    /// The completed (C, Z) vector of cluster `i`.
    fn cz_vector(&self, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(self.ctx.l + self.ctx.p);
        for (slot, val) in v
            .iter_mut()
            .zip(self.latent.c[i].iter().chain(self.ctx.z_row(i)))
        {
            *slot = *val;
        }
        v
    }

    /// One full sweep in the fixed update order.
    pub fn sweep(&mut self, rng: &mut impl Rng) -> Result<()> {
        self.update_strata_means(rng)?;
        self.update_sigma(rng)?;
        self.update_pi(rng)?;
        self.update_compliance_coefficients(rng)?;
        self.update_tau_d(rng)?;
        self.update_phi_d(rng)?;
        self.update_outcome_utilities(rng)?;
        self.update_outcome_coefficients(rng)?;
        self.update_sigma_sq(rng)?;
        self.update_tau_y(rng)?;
        self.update_phi_y(rng)?;
        self.update_strata(rng)?;
        self.update_c_mis(rng)?;
        self.update_d_mis(rng)?;
        self.impute_incidental(rng)?;
        Ok(())
    }

    // --- (a) mixture component means ---------------------------------------

    /// Conditional (mean, covariance) of μ_k^S given Σ, S, and completed
    /// (C, Z): precision V⁻¹ + n_k Σ⁻¹, mean Ω (V⁻¹ m + Σ⁻¹ Σ_i (C,Z)_i).
    pub fn strata_means_conditional(&self, k: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let d = self.ctx.l + self.ctx.p;
        let v_inv = spd_inverse(&self.priors.strata_mean_cov, "strata-mean prior covariance")?;
        let sigma_inv = spd_inverse(&self.theta.sigma, "mixture covariance")?;
        let mut sum = DVector::zeros(d);
        let mut n_k = 0.0;
        for i in 0..self.ctx.n_clusters {
            if self.latent.strata[i] == k {
                sum += self.cz_vector(i);
                n_k += 1.0;
            }
        }
        let precision = &v_inv + &sigma_inv * n_k;
        let cov = spd_inverse(&precision, "strata-mean conditional precision")?;
        let mean = &cov * (&v_inv * &self.priors.strata_mean_loc + &sigma_inv * sum);
        Ok((mean, cov))
    }

    pub fn update_strata_means(&mut self, rng: &mut impl Rng) -> Result<()> {
        for k in 0..self.config.n_strata {
            let (mean, cov) = self.strata_means_conditional(k)?;
            self.theta.strata_means[k] = MvNormal::new(mean, cov)?.sample(rng);
        }
        Ok(())
    }

    // --- (b) mixture covariance ---------------------------------------------

    /// Conditional inverse-Wishart (scale, dof) of Σ: prior scale plus the
    /// residual outer-product sum, prior dof plus the cluster count.
    pub fn sigma_conditional(&self) -> (DMatrix<f64>, f64) {
        let mut scale = self.priors.sigma_scale.clone();
        for i in 0..self.ctx.n_clusters {
            let r = self.cz_vector(i) - &self.theta.strata_means[self.latent.strata[i]];
            scale.syger(1.0, &r, &r, 1.0);
        }
        // syger fills the lower triangle; mirror it.
        let d = scale.nrows();
        for r in 0..d {
            for c in (r + 1)..d {
                scale[(r, c)] = scale[(c, r)];
            }
        }
        (scale, self.priors.sigma_dof + self.ctx.n_clusters as f64)
    }

    pub fn update_sigma(&mut self, rng: &mut impl Rng) -> Result<()> {
        let (scale, dof) = self.sigma_conditional();
        self.theta.sigma = sample_inv_wishart(rng, &scale, dof)?;
        Ok(())
    }

    // --- (c) stratum probabilities ------------------------------------------

    /// Conditional Dirichlet concentration: λ_k + #\{i : S_i = k\}.
    pub fn pi_concentration(&self) -> Vec<f64> {
        let mut conc = self.priors.dirichlet_weight.clone();
        for &s in &self.latent.strata {
            conc[s] += 1.0;
        }
        conc
    }

    pub fn update_pi(&mut self, rng: &mut impl Rng) -> Result<()> {
        self.theta.pi = sample_dirichlet(rng, &self.pi_concentration())?;
        Ok(())
    }

    // --- (d) uptake coefficients via utility augmentation --------------------

    /// Redraw every utility U_ij ~ TN(linear predictor, 1) constrained to
    /// the half-line that matches the current uptake type.
    pub fn update_utilities(&mut self, rng: &mut impl Rng) -> Result<()> {
        for j in 0..self.ctx.n {
            let i = self.ctx.cluster_of[j];
            let k = self.latent.strata[i];
            let lp = self.theta.compliance_lp(self.ctx.x_row(j), k, i);
            self.latent.u[j] = if self.latent.d[j] {
                sample_truncated_normal(rng, lp, 1.0, 0.0, f64::INFINITY)?
            } else {
                sample_truncated_normal(rng, lp, 1.0, f64::NEG_INFINITY, 0.0)?
            };
        }
        Ok(())
    }

    /// Conditional (mean, covariance) blocks for the uptake coefficients
    /// given current utilities: one `[μ_k^D, α_k]` block per stratum, or a
    /// single `[μ_1^D … μ_K^D, α]` block under the shared scope. Ridge form
    /// with targets U − φ.
    pub fn compliance_coef_conditional(&self) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let m = self.ctx.m;
        let k_strata = self.config.n_strata;
        match self.config.compliance_coefficients {
            CoefficientScope::ByStratum => {
                let q = 1 + m;
                let mut out = Vec::with_capacity(k_strata);
                for k in 0..k_strata {
                    let mut precision = DMatrix::zeros(q, q);
                    precision[(0, 0)] = 1.0 / self.priors.v_mu_d_sq;
                    for j in 1..q {
                        precision[(j, j)] = 1.0 / self.priors.v_alpha_sq;
                    }
                    let mut b = DVector::zeros(q);
                    let mut g = DVector::zeros(q);
                    for j in 0..self.ctx.n {
                        let i = self.ctx.cluster_of[j];
                        if self.latent.strata[i] != k {
                            continue;
                        }
                        g[0] = 1.0;
                        g.rows_mut(1, m).copy_from_slice(self.ctx.x_row(j));
                        let t = self.latent.u[j] - self.theta.phi_d[i];
                        precision.syger(1.0, &g, &g, 1.0);
                        b.axpy(t, &g, 1.0);
                    }
                    mirror_lower(&mut precision);
                    let cov = spd_inverse(&precision, "uptake coefficient precision")?;
                    let mean = &cov * b;
                    out.push((mean, cov));
                }
                Ok(out)
            }
            CoefficientScope::Shared => {
                let q = k_strata + m;
                let mut precision = DMatrix::zeros(q, q);
                for k in 0..k_strata {
                    precision[(k, k)] = 1.0 / self.priors.v_mu_d_sq;
                }
                for j in k_strata..q {
                    precision[(j, j)] = 1.0 / self.priors.v_alpha_sq;
                }
                let mut b = DVector::zeros(q);
                let mut g = DVector::zeros(q);
                for j in 0..self.ctx.n {
                    let i = self.ctx.cluster_of[j];
                    let k = self.latent.strata[i];
                    g.fill(0.0);
                    g[k] = 1.0;
                    g.rows_mut(k_strata, m).copy_from_slice(self.ctx.x_row(j));
                    let t = self.latent.u[j] - self.theta.phi_d[i];
                    precision.syger(1.0, &g, &g, 1.0);
                    b.axpy(t, &g, 1.0);
                }
                mirror_lower(&mut precision);
                let cov = spd_inverse(&precision, "uptake coefficient precision")?;
                let mean = &cov * b;
                Ok(vec![(mean, cov)])
            }
        }
    }

    /// Step (d): redraw utilities, then the uptake coefficient blocks.
    pub fn update_compliance_coefficients(&mut self, rng: &mut impl Rng) -> Result<()> {
        self.update_utilities(rng)?;
        let blocks = self.compliance_coef_conditional()?;
        let m = self.ctx.m;
        match self.config.compliance_coefficients {
            CoefficientScope::ByStratum => {
                for (k, (mean, cov)) in blocks.into_iter().enumerate() {
                    let draw = MvNormal::new(mean, cov)?.sample(rng);
                    self.theta.mu_d[k] = draw[0];
                    self.theta.alpha[k].copy_from_slice(draw.rows(1, m).as_slice());
                }
            }
            CoefficientScope::Shared => {
                let (mean, cov) = blocks.into_iter().next().unwrap();
                let draw = MvNormal::new(mean, cov)?.sample(rng);
                let k_strata = self.config.n_strata;
                let alpha: Vec<f64> = draw.rows(k_strata, m).iter().copied().collect();
                for k in 0..k_strata {
                    self.theta.mu_d[k] = draw[k];
                    self.theta.alpha[k].copy_from_slice(&alpha);
                }
            }
        }
        Ok(())
    }

    // --- (e) uptake cluster-effect variance ----------------------------------

    /// Conditional truncated-inverse-gamma (shape, rate, upper bound) for
    /// τ_D²: shape (I−1)/2 from the uniform-on-SD prior, rate ½Σφ² (guarded
    /// away from exact zero).
    pub fn tau_d_conditional(&self) -> (f64, f64, f64) {
        let shape = (self.ctx.n_clusters as f64 - 1.0) / 2.0;
        let rate = 0.5 * self.theta.phi_d.iter().map(|p| p * p).sum::<f64>();
        (shape, rate.max(1e-12), self.priors.u_tau_d_sq)
    }

    pub fn update_tau_d(&mut self, rng: &mut impl Rng) -> Result<()> {
        let (shape, rate, upper) = self.tau_d_conditional();
        self.theta.tau_d_sq = sample_truncated_inv_gamma(rng, shape, rate, upper)?;
        Ok(())
    }

    // --- (f) uptake cluster effects ------------------------------------------

    /// Conditional (mean, variance) of φ_i^D given the utilities:
    /// variance (n_i + 1/τ_D²)⁻¹, mean = variance · Σ_j (U_ij − μ^D − Xα).
    pub fn phi_d_conditional(&self, i: usize) -> (f64, f64) {
        let k = self.latent.strata[i];
        let span = self.ctx.spans[i].clone();
        let n_i = span.len() as f64;
        let var = 1.0 / (n_i + 1.0 / self.theta.tau_d_sq);
        let mut resid = 0.0;
        for j in span {
            let lp_no_phi =
                self.theta.compliance_lp(self.ctx.x_row(j), k, i) - self.theta.phi_d[i];
            resid += self.latent.u[j] - lp_no_phi;
        }
        (var * resid, var)
    }

    pub fn update_phi_d(&mut self, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.ctx.n_clusters {
            let (mean, var) = self.phi_d_conditional(i);
            self.theta.phi_d[i] = sample_normal(rng, mean, var.sqrt());
        }
        Ok(())
    }

    // --- binary-family outcome augmentation ----------------------------------

    /// For binary outcomes, redraw the latent outcome utilities
    /// Y*_ij ~ TN(linear predictor, 1) sign-matched to the observed Y.
    /// No-op under the Gaussian family.
    pub fn update_outcome_utilities(&mut self, rng: &mut impl Rng) -> Result<()> {
        if self.config.outcome_family != OutcomeFamily::BinaryProbit {
            return Ok(());
        }
        for j in 0..self.ctx.n {
            if !self.ctx.y_observed[j] {
                continue;
            }
            let i = self.ctx.cluster_of[j];
            let k = self.latent.strata[i];
            let lp = self.theta.outcome_mean(
                self.ctx.treated[i],
                self.latent.d[j],
                self.ctx.x_row(j),
                k,
                i,
            );
            self.y_star[j] = if self.ctx.y[j] == 1.0 {
                sample_truncated_normal(rng, lp, 1.0, 0.0, f64::INFINITY)?
            } else {
                sample_truncated_normal(rng, lp, 1.0, f64::NEG_INFINITY, 0.0)?
            };
        }
        Ok(())
    }

    /// The regression target for individual `j` in the outcome blocks:
    /// the observed outcome (Gaussian) or its augmentation value (binary).
    #[inline]
    fn outcome_target(&self, j: usize) -> f64 {
        match self.config.outcome_family {
            OutcomeFamily::Gaussian => self.ctx.y[j],
            OutcomeFamily::BinaryProbit => self.y_star[j],
        }
    }

    // --- (g) outcome regression blocks ----------------------------------------

    /// Write the outcome design row for individual `j` into `g` (stratum
    /// layout: `[1, X, (1−W)D, W·D·X, W·D]`).
    fn outcome_row_by_stratum(&self, j: usize, g: &mut DVector<f64>) {
        let m = self.ctx.m;
        let i = self.ctx.cluster_of[j];
        let w = self.ctx.treated[i];
        let d = self.latent.d[j];
        let df = if d { 1.0 } else { 0.0 };
        let x = self.ctx.x_row(j);
        g[0] = 1.0;
        g.rows_mut(1, m).copy_from_slice(x);
        g[1 + m] = if w { 0.0 } else { df };
        let wd = if w { df } else { 0.0 };
        for (slot, &xv) in g.rows_mut(2 + m, m).iter_mut().zip(x) {
            *slot = wd * xv;
        }
        g[2 + 2 * m] = wd;
    }

    /// Conditional (mean, covariance) blocks of the outcome regression:
    /// one `[μ_k^Y, β_0k, δ_0k, β_1k, δ_1k]` block per stratum, or a single
    /// block with per-stratum intercepts/shifts and shared slopes. Rows
    /// with missing outcomes carry no information and are skipped.
    pub fn outcome_coef_conditional(&self) -> Result<Vec<(DVector<f64>, DMatrix<f64>)>> {
        let m = self.ctx.m;
        let k_strata = self.config.n_strata;
        let pr = &self.priors;
        match self.config.outcome_coefficients {
            CoefficientScope::ByStratum => {
                let q = 2 * m + 3;
                let mut out = Vec::with_capacity(k_strata);
                for k in 0..k_strata {
                    let mut precision = DMatrix::zeros(q, q);
                    precision[(0, 0)] = 1.0 / pr.v_mu_y_sq;
                    for j in 0..m {
                        precision[(1 + j, 1 + j)] = 1.0 / pr.v_beta_sq;
                        precision[(2 + m + j, 2 + m + j)] = 1.0 / pr.v_beta_sq;
                    }
                    precision[(1 + m, 1 + m)] = 1.0 / pr.v_delta0_sq;
                    precision[(2 + 2 * m, 2 + 2 * m)] = 1.0 / pr.v_beta_sq;
                    let mut b = DVector::zeros(q);
                    let mut g = DVector::zeros(q);
                    let inv_s2 = 1.0 / self.theta.sigma_sq[k];
                    for j in 0..self.ctx.n {
                        let i = self.ctx.cluster_of[j];
                        if self.latent.strata[i] != k || !self.ctx.y_observed[j] {
                            continue;
                        }
                        self.outcome_row_by_stratum(j, &mut g);
                        let t = self.outcome_target(j) - self.theta.phi_y[i];
                        precision.syger(inv_s2, &g, &g, 1.0);
                        b.axpy(t * inv_s2, &g, 1.0);
                    }
                    mirror_lower(&mut precision);
                    let cov = spd_inverse(&precision, "outcome coefficient precision")?;
                    let mean = &cov * b;
                    out.push((mean, cov));
                }
                Ok(out)
            }
            CoefficientScope::Shared => {
                // Layout: [μ_1..μ_K | β0 (m) | δ0_1..δ0_K | β1 (m) | δ1_1..δ1_K].
                let q = 3 * k_strata + 2 * m;
                let mut precision = DMatrix::zeros(q, q);
                for k in 0..k_strata {
                    precision[(k, k)] = 1.0 / pr.v_mu_y_sq;
                    precision[(k_strata + m + k, k_strata + m + k)] = 1.0 / pr.v_delta0_sq;
                    let d1 = 2 * k_strata + 2 * m + k;
                    precision[(d1, d1)] = 1.0 / pr.v_beta_sq;
                }
                for j in 0..m {
                    precision[(k_strata + j, k_strata + j)] = 1.0 / pr.v_beta_sq;
                    let b1 = 2 * k_strata + m + j;
                    precision[(b1, b1)] = 1.0 / pr.v_beta_sq;
                }
                let mut b = DVector::zeros(q);
                let mut g = DVector::zeros(q);
                for j in 0..self.ctx.n {
                    if !self.ctx.y_observed[j] {
                        continue;
                    }
                    let i = self.ctx.cluster_of[j];
                    let k = self.latent.strata[i];
                    let w = self.ctx.treated[i];
                    let d = self.latent.d[j];
                    let df = if d { 1.0 } else { 0.0 };
                    let x = self.ctx.x_row(j);
                    g.fill(0.0);
                    g[k] = 1.0;
                    g.rows_mut(k_strata, m).copy_from_slice(x);
                    g[k_strata + m + k] = if w { 0.0 } else { df };
                    let wd = if w { df } else { 0.0 };
                    for (slot, &xv) in g.rows_mut(2 * k_strata + m, m).iter_mut().zip(x) {
                        *slot = wd * xv;
                    }
                    g[2 * k_strata + 2 * m + k] = wd;
                    let inv_s2 = 1.0 / self.theta.sigma_sq[k];
                    let t = self.outcome_target(j) - self.theta.phi_y[i];
                    precision.syger(inv_s2, &g, &g, 1.0);
                    b.axpy(t * inv_s2, &g, 1.0);
                }
                mirror_lower(&mut precision);
                let cov = spd_inverse(&precision, "outcome coefficient precision")?;
                let mean = &cov * b;
                Ok(vec![(mean, cov)])
            }
        }
    }

    pub fn update_outcome_coefficients(&mut self, rng: &mut impl Rng) -> Result<()> {
        let blocks = self.outcome_coef_conditional()?;
        let m = self.ctx.m;
        let k_strata = self.config.n_strata;
        match self.config.outcome_coefficients {
            CoefficientScope::ByStratum => {
                for (k, (mean, cov)) in blocks.into_iter().enumerate() {
                    let draw = MvNormal::new(mean, cov)?.sample(rng);
                    self.theta.mu_y[k] = draw[0];
                    self.theta.beta0[k].copy_from_slice(draw.rows(1, m).as_slice());
                    self.theta.delta0[k] = draw[1 + m];
                    self.theta.beta1[k].copy_from_slice(draw.rows(2 + m, m).as_slice());
                    self.theta.delta1[k] = draw[2 + 2 * m];
                }
            }
            CoefficientScope::Shared => {
                let (mean, cov) = blocks.into_iter().next().unwrap();
                let draw = MvNormal::new(mean, cov)?.sample(rng);
                let beta0: Vec<f64> = draw.rows(k_strata, m).iter().copied().collect();
                let beta1: Vec<f64> = draw.rows(2 * k_strata + m, m).iter().copied().collect();
                for k in 0..k_strata {
                    self.theta.mu_y[k] = draw[k];
                    self.theta.delta0[k] = draw[k_strata + m + k];
                    self.theta.delta1[k] = draw[2 * k_strata + 2 * m + k];
                    self.theta.beta0[k].copy_from_slice(&beta0);
                    self.theta.beta1[k].copy_from_slice(&beta1);
                }
            }
        }
        Ok(())
    }

    // --- (h) outcome variances -------------------------------------------------

    /// Conditional inverse-gamma (shape, rate) for σ_k²: shape a + n_k/2,
    /// rate b + ½·SSR over observed-outcome rows in stratum k.
    pub fn sigma_k_conditional(&self, k: usize) -> (f64, f64) {
        let mut n_k = 0.0;
        let mut ssr = 0.0;
        for j in 0..self.ctx.n {
            let i = self.ctx.cluster_of[j];
            if self.latent.strata[i] != k || !self.ctx.y_observed[j] {
                continue;
            }
            let mean = self.theta.outcome_mean(
                self.ctx.treated[i],
                self.latent.d[j],
                self.ctx.x_row(j),
                k,
                i,
            );
            let r = self.ctx.y[j] - mean;
            n_k += 1.0;
            ssr += r * r;
        }
        (
            self.priors.sigma_sq_shape + 0.5 * n_k,
            self.priors.sigma_sq_rate + 0.5 * ssr,
        )
    }

    /// Gaussian family only; the binary family keeps σ_k² = 1.
    pub fn update_sigma_sq(&mut self, rng: &mut impl Rng) -> Result<()> {
        if self.config.outcome_family != OutcomeFamily::Gaussian {
            return Ok(());
        }
        for k in 0..self.config.n_strata {
            let (shape, rate) = self.sigma_k_conditional(k);
            self.theta.sigma_sq[k] = 1.0 / sample_gamma_rate(rng, shape, rate)?;
        }
        Ok(())
    }

    // --- (i) outcome cluster-effect variance -------------------------------------

    pub fn tau_y_conditional(&self) -> (f64, f64, f64) {
        let shape = (self.ctx.n_clusters as f64 - 1.0) / 2.0;
        let rate = 0.5 * self.theta.phi_y.iter().map(|p| p * p).sum::<f64>();
        (shape, rate.max(1e-12), self.priors.u_tau_y_sq)
    }

    pub fn update_tau_y(&mut self, rng: &mut impl Rng) -> Result<()> {
        let (shape, rate, upper) = self.tau_y_conditional();
        self.theta.tau_y_sq = sample_truncated_inv_gamma(rng, shape, rate, upper)?;
        Ok(())
    }

    // --- (j) outcome cluster effects ----------------------------------------------

    /// Conditional (mean, variance) of φ_i^Y over the cluster's
    /// observed-outcome rows: variance σ_k²τ_Y²/(n_i τ_Y² + σ_k²).
    pub fn phi_y_conditional(&self, i: usize) -> (f64, f64) {
        let k = self.latent.strata[i];
        let s2 = self.theta.sigma_sq[k];
        let tau2 = self.theta.tau_y_sq;
        let mut n_i = 0.0;
        let mut resid = 0.0;
        for j in self.ctx.spans[i].clone() {
            if !self.ctx.y_observed[j] {
                continue;
            }
            let mean_no_phi = self.theta.outcome_mean(
                self.ctx.treated[i],
                self.latent.d[j],
                self.ctx.x_row(j),
                k,
                i,
            ) - self.theta.phi_y[i];
            resid += self.outcome_target(j) - mean_no_phi;
            n_i += 1.0;
        }
        let var = s2 * tau2 / (n_i * tau2 + s2);
        let mean = (resid / s2) * var;
        (mean, var)
    }

    pub fn update_phi_y(&mut self, rng: &mut impl Rng) -> Result<()> {
        for i in 0..self.ctx.n_clusters {
            let (mean, var) = self.phi_y_conditional(i);
            self.theta.phi_y[i] = sample_normal(rng, mean, var.sqrt());
        }
        Ok(())
    }

    // --- latent stratum labels ------------------------------------------------------

    fn mixture_dists(&self) -> Result<Vec<MvNormal>> {
        self.theta
            .strata_means
            .iter()
            .map(|m| MvNormal::new(m.clone(), self.theta.sigma.clone()))
            .collect()
    }

    fn stratum_log_weights_with(&self, i: usize, dists: &[MvNormal], out: &mut [f64]) {
        let cz = self.cz_vector(i);
        let w = self.ctx.treated[i];
        for (k, lw) in out.iter_mut().enumerate() {
            let mut acc = self.theta.pi[k].ln() + dists[k].ln_pdf(&cz);
            for j in self.ctx.spans[i].clone() {
                let x = self.ctx.x_row(j);
                let lp = self.theta.compliance_lp(x, k, i);
                acc += if self.latent.d[j] {
                    ln_normal_cdf(lp)
                } else {
                    ln_normal_cdf(-lp)
                };
                if self.ctx.y_observed[j] {
                    let mean = self.theta.outcome_mean(w, self.latent.d[j], x, k, i);
                    acc += match self.config.outcome_family {
                        OutcomeFamily::Gaussian => {
                            ln_normal_pdf_var(self.ctx.y[j], mean, self.theta.sigma_sq[k])
                        }
                        OutcomeFamily::BinaryProbit => {
                            if self.ctx.y[j] == 1.0 {
                                ln_normal_cdf(mean)
                            } else {
                                ln_normal_cdf(-mean)
                            }
                        }
                    };
                }
            }
            *lw = acc;
        }
    }

    /// Unnormalized log conditional weights of cluster `i`'s stratum label.
    pub fn stratum_log_weights(&self, i: usize) -> Result<Vec<f64>> {
        let dists = self.mixture_dists()?;
        let mut out = vec![0.0; self.config.n_strata];
        self.stratum_log_weights_with(i, &dists, &mut out);
        Ok(out)
    }

    pub fn update_strata(&mut self, rng: &mut impl Rng) -> Result<()> {
        let dists = self.mixture_dists()?;
        let mut lw = vec![0.0; self.config.n_strata];
        for i in 0..self.ctx.n_clusters {
            self.stratum_log_weights_with(i, &dists, &mut lw);
            self.latent.strata[i] = sample_categorical_ln(rng, &lw)?;
        }
        Ok(())
    }

    // --- control-arm compliance metrics ------------------------------------------------

    /// Conditional (mean, covariance) of cluster `i`'s compliance metrics
    /// given its covariates and stratum (Gaussian conditioning of the
    /// mixture component).
    pub fn c_mis_conditional(&self, i: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let k = self.latent.strata[i];
        let l = self.ctx.l;
        let p = self.ctx.p;
        if p == 0 {
            return Ok((self.theta.strata_means[k].clone(), self.theta.sigma.clone()));
        }
        let full = MvNormal::new(self.theta.strata_means[k].clone(), self.theta.sigma.clone())?;
        let z = DVector::from_column_slice(self.ctx.z_row(i));
        let cond = full.condition_on_tail(l, &z)?;
        Ok((cond.mean().clone(), cond.cov().clone()))
    }

    pub fn update_c_mis(&mut self, rng: &mut impl Rng) -> Result<()> {
        let l = self.ctx.l;
        let p = self.ctx.p;
        // The conditional covariance (and the regression map from Z to C)
        // depends only on Σ, so factor it once per sweep.
        let sig = &self.theta.sigma;
        let sigma_cc = sig.view((0, 0), (l, l)).into_owned();
        let (gain, cond_cov) = if p == 0 {
            (DMatrix::zeros(l, 0), sigma_cc)
        } else {
            let sigma_cz = sig.view((0, l), (l, p)).into_owned();
            let sigma_zz = sig.view((l, l), (p, p)).into_owned();
            let chol = sigma_zz
                .cholesky()
                .ok_or_else(|| Error::Domain("covariate block of Σ not SPD".into()))?;
            // gainᵀ = Σ_ZZ⁻¹ Σ_ZC.
            let gain_t = chol.solve(&sigma_cz.transpose());
            let gain = gain_t.transpose();
            let mut cov = &sigma_cc - &gain * sigma_cz.transpose();
            symmetrize(&mut cov);
            (gain, cov)
        };
        let chol = cond_cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Domain("conditional compliance covariance not SPD".into()))?;
        let lmat = chol.l();
        for i in 0..self.ctx.n_clusters {
            if self.ctx.treated[i] {
                continue;
            }
            let k = self.latent.strata[i];
            let mu = &self.theta.strata_means[k];
            let mut mean = mu.rows(0, l).into_owned();
            if p > 0 {
                let zres = DVector::from_column_slice(self.ctx.z_row(i)) - mu.rows(l, p);
                mean += &gain * zres;
            }
            let noise = DVector::from_fn(l, |_, _| sample_std_normal(rng));
            let draw = mean + &lmat * noise;
            self.latent.c[i].copy_from_slice(draw.as_slice());
        }
        Ok(())
    }

    // --- uptake types -------------------------------------------------------------------

    /// Conditional probability that individual `j`'s uptake type is 1,
    /// combining the probit prior with the outcome density of the
    /// individual's own arm (Bayes rule over the two-point support).
    pub fn uptake_conditional_prob(&self, j: usize) -> f64 {
        let i = self.ctx.cluster_of[j];
        let k = self.latent.strata[i];
        let w = self.ctx.treated[i];
        let x = self.ctx.x_row(j);
        let lp = self.theta.compliance_lp(x, k, i);
        let mut lw1 = ln_normal_cdf(lp);
        let mut lw0 = ln_normal_cdf(-lp);
        if self.ctx.y_observed[j] {
            let mean1 = self.theta.outcome_mean(w, true, x, k, i);
            let mean0 = self.theta.outcome_mean(w, false, x, k, i);
            match self.config.outcome_family {
                OutcomeFamily::Gaussian => {
                    let s2 = self.theta.sigma_sq[k];
                    lw1 += ln_normal_pdf_var(self.ctx.y[j], mean1, s2);
                    lw0 += ln_normal_pdf_var(self.ctx.y[j], mean0, s2);
                }
                OutcomeFamily::BinaryProbit => {
                    if self.ctx.y[j] == 1.0 {
                        lw1 += ln_normal_cdf(mean1);
                        lw0 += ln_normal_cdf(mean0);
                    } else {
                        lw1 += ln_normal_cdf(-mean1);
                        lw0 += ln_normal_cdf(-mean0);
                    }
                }
            }
        }
        1.0 / (1.0 + (lw0 - lw1).exp())
    }

    /// Redraw the structurally missing control-arm uptake types.
    pub fn update_d_mis(&mut self, rng: &mut impl Rng) -> Result<()> {
        for j in 0..self.ctx.n {
            if self.ctx.treated[self.ctx.cluster_of[j]] {
                continue;
            }
            let p = self.uptake_conditional_prob(j);
            self.latent.d[j] = sample_bernoulli(rng, p);
        }
        Ok(())
    }

    /// Redraw incidentally missing treated-arm uptake, then fill missing
    /// outcomes from the current outcome model (the latter feed estimation,
    /// not the likelihood).
    pub fn impute_incidental(&mut self, rng: &mut impl Rng) -> Result<()> {
        for j in 0..self.ctx.n {
            let i = self.ctx.cluster_of[j];
            if !self.ctx.treated[i] || self.ctx.d_observed[j].is_some() {
                continue;
            }
            let p = self.uptake_conditional_prob(j);
            self.latent.d[j] = sample_bernoulli(rng, p);
        }
        for j in 0..self.ctx.n {
            if self.ctx.y_observed[j] {
                continue;
            }
            let i = self.ctx.cluster_of[j];
            let k = self.latent.strata[i];
            let mean = self.theta.outcome_mean(
                self.ctx.treated[i],
                self.latent.d[j],
                self.ctx.x_row(j),
                k,
                i,
            );
            let draw = match self.config.outcome_family {
                OutcomeFamily::Gaussian => {
                    sample_normal(rng, mean, self.theta.sigma_sq[k].sqrt())
                }
                OutcomeFamily::BinaryProbit => {
                    if sample_bernoulli(rng, normal_cdf(mean)) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            self.latent.y_mis[j] = Some(draw);
        }
        Ok(())
    }
}

/// Mirror the filled lower triangle onto the upper one.
fn mirror_lower(a: &mut DMatrix<f64>) {
    let d = a.nrows();
    for r in 0..d {
        for c in (r + 1)..d {
            a[(r, c)] = a[(c, r)];
        }
    }
}

fn symmetrize(a: &mut DMatrix<f64>) {
    let d = a.nrows();
    for r in 0..d {
        for c in (r + 1)..d {
            let v = 0.5 * (a[(r, c)] + a[(c, r)]);
            a[(r, c)] = v;
            a[(c, r)] = v;
        }
    }
}

/// Inverse of an SPD matrix via Cholesky, with a named error.
fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let mut inv = a
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("{what} is not positive definite")))?
        .inverse();
    symmetrize(&mut inv);
    Ok(inv)
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

fn initialize(
    data: &TrialDataset,
    ctx: &Context,
    config: &ModelConfig,
    priors: &PriorSpec,
    init: Initialization,
    rng: &mut impl Rng,
) -> Result<(ParameterState, LatentState)> {
    let k_strata = config.n_strata;
    let czd = ctx.l + ctx.p;
    let mut theta = ParameterState::neutral(config, priors, czd, ctx.m, ctx.n_clusters);

    // Predict control-arm compliance metrics from Z via least squares on
    // the treated arm (falling back to treated means, then zero).
    let c_init = predict_compliance(data, ctx);

    // Global treated uptake rate for seeding unobserved uptake types.
    let (mut d_obs_n, mut d_obs_ones): (f64, f64) = (0.0, 0.0);
    for j in 0..ctx.n {
        if let Some(d) = ctx.d_observed[j] {
            d_obs_n += 1.0;
            d_obs_ones += if d { 1.0 } else { 0.0 };
        }
    }
    let global_rate = if d_obs_n > 0.0 {
        d_obs_ones / d_obs_n
    } else {
        0.5
    };

    let strata = match init {
        Initialization::Spread => (0..ctx.n_clusters).map(|i| i % k_strata).collect(),
        Initialization::DataDriven => {
            // Feature rows: [compliance metrics ‖ Z], column-scaled.
            let mut feats: Vec<Vec<f64>> = (0..ctx.n_clusters)
                .map(|i| {
                    c_init[i]
                        .iter()
                        .copied()
                        .chain(ctx.z_row(i).iter().copied())
                        .collect()
                })
                .collect();
            for col in 0..czd {
                let mean: f64 =
                    feats.iter().map(|f| f[col]).sum::<f64>() / ctx.n_clusters as f64;
                let var: f64 = feats
                    .iter()
                    .map(|f| (f[col] - mean) * (f[col] - mean))
                    .sum::<f64>()
                    / (ctx.n_clusters as f64 - 1.0).max(1.0);
                let sd = var.sqrt().max(1e-12);
                for f in feats.iter_mut() {
                    f[col] = (f[col] - mean) / sd;
                }
            }
            kmeans_labels(&feats, k_strata, 30, rng)
        }
    };

    if init == Initialization::DataDriven {
        // Component means/covariance from the grouped raw features.
        let raw_feat = |i: usize| {
            DVector::from_iterator(
                czd,
                c_init[i].iter().copied().chain(ctx.z_row(i).iter().copied()),
            )
        };
        let mut counts = vec![0usize; k_strata];
        let mut sums = vec![DVector::zeros(czd); k_strata];
        for i in 0..ctx.n_clusters {
            counts[strata[i]] += 1;
            sums[strata[i]] += raw_feat(i);
        }
        for k in 0..k_strata {
            if counts[k] > 0 {
                theta.strata_means[k] = &sums[k] / counts[k] as f64;
            }
        }
        let mut pooled = DMatrix::zeros(czd, czd);
        for i in 0..ctx.n_clusters {
            let r = raw_feat(i) - &theta.strata_means[strata[i]];
            pooled.syger(1.0, &r, &r, 1.0);
        }
        mirror_lower(&mut pooled);
        pooled /= (ctx.n_clusters as f64 - k_strata as f64).max(1.0);
        for d in 0..czd {
            pooled[(d, d)] += 1e-3;
        }
        if pooled.clone().cholesky().is_some() {
            theta.sigma = pooled;
        }
        for k in 0..k_strata {
            theta.pi[k] = (counts[k] as f64 + 1.0) / (ctx.n_clusters + k_strata) as f64;
        }

        // Per-stratum uptake intercept from the observed treated rates.
        for k in 0..k_strata {
            let (mut n, mut ones): (f64, f64) = (0.0, 0.0);
            for j in 0..ctx.n {
                if strata[ctx.cluster_of[j]] != k {
                    continue;
                }
                if let Some(d) = ctx.d_observed[j] {
                    n += 1.0;
                    ones += if d { 1.0 } else { 0.0 };
                }
            }
            let rate = if n > 0.0 { ones / n } else { global_rate };
            theta.mu_d[k] = normal_quantile(rate.clamp(0.05, 0.95));
        }
    }

    let mut d = Vec::with_capacity(ctx.n);
    for j in 0..ctx.n {
        d.push(match ctx.d_observed[j] {
            Some(v) => v,
            None => sample_bernoulli(rng, global_rate.clamp(0.05, 0.95)),
        });
    }

    let latent = LatentState {
        strata,
        c: c_init,
        d,
        u: vec![0.0; ctx.n],
        y_mis: vec![None; ctx.n],
    };
    Ok((theta, latent))
}

/// Observed compliance metrics for treated clusters; per-metric linear
/// predictions from Z (fit on the treated arm) for control clusters.
fn predict_compliance(data: &TrialDataset, ctx: &Context) -> Vec<Vec<f64>> {
    let l = ctx.l;
    let p = ctx.p;
    let treated_idx: Vec<usize> = (0..ctx.n_clusters).filter(|&i| ctx.treated[i]).collect();
    let q = p + 1;

    // Per-metric ridge fit C_m ~ [1, Z] over treated clusters.
    let mut coefs: Vec<Option<DVector<f64>>> = vec![None; l];
    let mut means = vec![0.0; l];
    if !treated_idx.is_empty() {
        for (mi, mean) in means.iter_mut().enumerate() {
            let mut s = 0.0;
            for &i in &treated_idx {
                s += data.clusters()[i].compliance.observed().unwrap()[mi];
            }
            *mean = s / treated_idx.len() as f64;
        }
        if treated_idx.len() > q {
            let mut gram = DMatrix::zeros(q, q);
            let mut rhs = vec![DVector::zeros(q); l];
            let mut g = DVector::zeros(q);
            for &i in &treated_idx {
                g[0] = 1.0;
                g.rows_mut(1, p).copy_from_slice(ctx.z_row(i));
                gram.syger(1.0, &g, &g, 1.0);
                let c = data.clusters()[i].compliance.observed().unwrap();
                for (mi, r) in rhs.iter_mut().enumerate() {
                    r.axpy(c[mi], &g, 1.0);
                }
            }
            mirror_lower(&mut gram);
            for dd in 0..q {
                gram[(dd, dd)] += 1e-8;
            }
            if let Some(chol) = gram.cholesky() {
                for (mi, r) in rhs.iter().enumerate() {
                    coefs[mi] = Some(chol.solve(r));
                }
            }
        }
    }

    (0..ctx.n_clusters)
        .map(|i| match data.clusters()[i].compliance.observed() {
            Some(c) => c.clone(),
            None => (0..l)
                .map(|mi| match &coefs[mi] {
                    Some(b) => {
                        b[0] + ctx
                            .z_row(i)
                            .iter()
                            .zip(b.iter().skip(1))
                            .map(|(z, b)| z * b)
                            .sum::<f64>()
                    }
                    None => means[mi],
                })
                .collect(),
        })
        .collect()
}

/// Plain k-means with k-means++ seeding; returns per-row labels.
fn kmeans_labels(rows: &[Vec<f64>], k: usize, iters: usize, rng: &mut impl Rng) -> Vec<usize> {
    let n = rows.len();
    if k <= 1 || n <= k {
        return (0..n).map(|i| i % k.max(1)).collect();
    }
    let dim = rows[0].len();
    let dist2 = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
    };

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(k);
    centers.push(rows[rng.random_range(0..n)].clone());
    let mut d2: Vec<f64> = rows.iter().map(|r| dist2(r, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut t = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                t -= w;
                if t <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(rows[idx].clone());
        for (i, r) in rows.iter().enumerate() {
            d2[i] = d2[i].min(dist2(r, centers.last().unwrap()));
        }
    }

    let mut labels = vec![0usize; n];
    for _ in 0..iters {
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let best = (0..k)
                .min_by(|&a, &b| {
                    dist2(r, &centers[a])
                        .partial_cmp(&dist2(r, &centers[b]))
                        .unwrap()
                })
                .unwrap();
            if labels[i] != best {
                labels[i] = best;
                changed = true;
            }
        }
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0; dim]; k];
        for (i, r) in rows.iter().enumerate() {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(r) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                centers[c] = rows[rng.random_range(0..n)].clone();
                changed = true;
            } else {
                for (ctr, s) in centers[c].iter_mut().zip(&sums[c]) {
                    *ctr = s / counts[c] as f64;
                }
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

// ---------------------------------------------------------------------------
// Prior sampling and model-forward generation
// ---------------------------------------------------------------------------

/// Draw a parameter state from the prior.
pub fn sample_prior(
    config: &ModelConfig,
    priors: &PriorSpec,
    cz_dim: usize,
    n_x: usize,
    n_clusters: usize,
    rng: &mut impl Rng,
) -> Result<ParameterState> {
    config.validate()?;
    priors.validate(config, cz_dim)?;
    let k = config.n_strata;
    let mean_prior = MvNormal::new(
        priors.strata_mean_loc.clone(),
        priors.strata_mean_cov.clone(),
    )?;
    let pi = sample_dirichlet(rng, &priors.dirichlet_weight)?;
    let strata_means = (0..k).map(|_| mean_prior.sample(rng)).collect();
    let sigma = sample_inv_wishart(rng, &priors.sigma_scale, priors.sigma_dof)?;
    let mu_d = (0..k)
        .map(|_| sample_normal(rng, 0.0, priors.v_mu_d_sq.sqrt()))
        .collect();
    let alpha = broadcast_if_shared(config.compliance_coefficients, k, rng, |r| {
        draw_iid(r, n_x, priors.v_alpha_sq)
    });
    let tau_d_sq = sample_sd_uniform_variance(rng, priors.u_tau_d_sq);
    let phi_d = (0..n_clusters)
        .map(|_| sample_normal(rng, 0.0, tau_d_sq.sqrt()))
        .collect();
    let mu_y = (0..k)
        .map(|_| sample_normal(rng, 0.0, priors.v_mu_y_sq.sqrt()))
        .collect();
    let beta0 = broadcast_if_shared(config.outcome_coefficients, k, rng, |r| {
        draw_iid(r, n_x, priors.v_beta_sq)
    });
    let beta1 = broadcast_if_shared(config.outcome_coefficients, k, rng, |r| {
        draw_iid(r, n_x, priors.v_beta_sq)
    });
    let delta1 = (0..k)
        .map(|_| sample_normal(rng, 0.0, priors.v_beta_sq.sqrt()))
        .collect();
    let delta0 = (0..k)
        .map(|_| sample_normal(rng, 0.0, priors.v_delta0_sq.sqrt()))
        .collect();
    let sigma_sq = match config.outcome_family {
        OutcomeFamily::Gaussian => (0..k)
            .map(|_| {
                sample_gamma_rate(rng, priors.sigma_sq_shape, priors.sigma_sq_rate)
                    .map(|g| 1.0 / g)
            })
            .collect::<Result<_>>()?,
        OutcomeFamily::BinaryProbit => vec![1.0; k],
    };
    let tau_y_sq = sample_sd_uniform_variance(rng, priors.u_tau_y_sq);
    let phi_y = (0..n_clusters)
        .map(|_| sample_normal(rng, 0.0, tau_y_sq.sqrt()))
        .collect();
    Ok(ParameterState {
        pi,
        strata_means,
        sigma,
        mu_d,
        alpha,
        tau_d_sq,
        phi_d,
        mu_y,
        beta0,
        beta1,
        delta1,
        delta0,
        sigma_sq,
        tau_y_sq,
        phi_y,
    })
}

/// τ ~ Uniform(0, √u) on the SD scale, returned as the variance τ².
fn sample_sd_uniform_variance(rng: &mut impl Rng, u: f64) -> f64 {
    let t = rng.random::<f64>().max(f64::MIN_POSITIVE);
    t * t * u
}

fn draw_iid<R: Rng>(rng: &mut R, n: usize, var: f64) -> Vec<f64> {
    (0..n).map(|_| sample_normal(rng, 0.0, var.sqrt())).collect()
}

fn broadcast_if_shared<R: Rng>(
    scope: CoefficientScope,
    k: usize,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> Vec<f64>,
) -> Vec<Vec<f64>> {
    match scope {
        CoefficientScope::ByStratum => (0..k).map(|_| draw(rng)).collect(),
        CoefficientScope::Shared => {
            let one = draw(rng);
            vec![one; k]
        }
    }
}

/// The fixed skeleton of a trial for model-forward generation: arm
/// assignments, cluster sizes, individual covariates, and which treated-arm
/// cells are marked incidentally missing.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialShape {
    pub treated: Vec<bool>,
    pub cluster_sizes: Vec<usize>,
    /// Individual covariates in cluster order, length Σ sizes, each of
    /// length M.
    pub x: Vec<Vec<f64>>,
    pub n_compliance_metrics: usize,
    pub n_cluster_covariates: usize,
    /// Treated-arm uptake cells to mark incidentally missing.
    pub missing_d: Vec<bool>,
    /// Outcome cells to mark incidentally missing.
    pub missing_y: Vec<bool>,
}

impl TrialShape {
    /// A fully observed shape with the given arms/sizes/covariates.
    pub fn complete(
        treated: Vec<bool>,
        cluster_sizes: Vec<usize>,
        x: Vec<Vec<f64>>,
        n_compliance_metrics: usize,
        n_cluster_covariates: usize,
    ) -> Self {
        let n: usize = cluster_sizes.iter().sum();
        TrialShape {
            treated,
            cluster_sizes,
            x,
            n_compliance_metrics,
            n_cluster_covariates,
            missing_d: vec![false; n],
            missing_y: vec![false; n],
        }
    }

    pub fn n_individuals(&self) -> usize {
        self.cluster_sizes.iter().sum()
    }

    /// The shape of an existing dataset: same arms, cluster sizes,
    /// model-scale individual covariates, and missingness pattern.
    pub fn of_dataset(data: &TrialDataset) -> Self {
        let treated: Vec<bool> = data.clusters().iter().map(|c| c.treated).collect();
        let cluster_sizes: Vec<usize> =
            (0..data.n_clusters()).map(|i| data.span(i).len()).collect();
        let n = data.n_individuals();
        let x = (0..n).map(|j| data.standardized_x(j)).collect();
        let missing_d = data
            .individuals()
            .iter()
            .map(|ind| {
                data.clusters()[ind.cluster_index].treated && !ind.uptake.is_observed()
            })
            .collect();
        let missing_y = data
            .individuals()
            .iter()
            .map(|ind| !ind.outcome.is_observed())
            .collect();
        TrialShape {
            treated,
            cluster_sizes,
            x,
            n_compliance_metrics: data.n_compliance_metrics(),
            n_cluster_covariates: data.n_cluster_covariates(),
            missing_d,
            missing_y,
        }
    }
}

/// Generate a complete trial (dataset + true latent state) from the model
/// at `theta`, conditional on the shape's fixed covariates and using
/// `theta`'s own cluster effects. Cluster covariates and compliance
/// metrics come from the mixture, so only `x` is held fixed.
pub fn generate_trial(
    shape: &TrialShape,
    theta: &ParameterState,
    family: OutcomeFamily,
    rng: &mut impl Rng,
) -> Result<(TrialDataset, LatentState)> {
    let n_clusters = shape.treated.len();
    let n = shape.n_individuals();
    let l = shape.n_compliance_metrics;
    let p = shape.n_cluster_covariates;
    if shape.cluster_sizes.len() != n_clusters
        || shape.x.len() != n
        || shape.missing_d.len() != n
        || shape.missing_y.len() != n
        || theta.phi_d.len() != n_clusters
        || theta.strata_means[0].len() != l + p
    {
        return Err(Error::Domain(
            "trial shape does not match the parameter state".into(),
        ));
    }
    let k_strata = theta.n_strata();
    let dists: Vec<MvNormal> = theta
        .strata_means
        .iter()
        .map(|m| MvNormal::new(m.clone(), theta.sigma.clone()))
        .collect::<Result<_>>()?;
    let ln_pi: Vec<f64> = theta.pi.iter().map(|p| p.ln()).collect();

    let mut clusters = Vec::with_capacity(n_clusters);
    let mut individuals = Vec::with_capacity(n);
    let mut strata = Vec::with_capacity(n_clusters);
    let mut c_lat = Vec::with_capacity(n_clusters);
    let mut d_lat = Vec::with_capacity(n);
    let mut y_mis = vec![None; n];

    let mut j_global = 0usize;
    for i in 0..n_clusters {
        let k = sample_categorical_ln(rng, &ln_pi)?;
        debug_assert!(k < k_strata);
        strata.push(k);
        let cz = dists[k].sample(rng);
        let c: Vec<f64> = cz.as_slice()[..l].to_vec();
        let z: Vec<f64> = cz.as_slice()[l..].to_vec();
        let id = format!("g{}", i + 1);
        let w = shape.treated[i];
        clusters.push(ClusterRecord {
            id: id.clone(),
            treated: w,
            z,
            compliance: if w {
                Observation::Observed(c.clone())
            } else {
                Observation::Missing(MissingKind::Structural)
            },
            n_individuals: 0,
        });
        c_lat.push(c);

        for _ in 0..shape.cluster_sizes[i] {
            let x = shape.x[j_global].clone();
            let d = sample_bernoulli(rng, normal_cdf(theta.compliance_lp(&x, k, i)));
            d_lat.push(d);
            let mean = theta.outcome_mean(w, d, &x, k, i);
            let y = match family {
                OutcomeFamily::Gaussian => {
                    sample_normal(rng, mean, theta.sigma_sq[k].sqrt())
                }
                OutcomeFamily::BinaryProbit => {
                    if sample_bernoulli(rng, normal_cdf(mean)) {
                        1.0
                    } else {
                        0.0
                    }
                }
            };
            let uptake = if !w {
                Observation::Missing(MissingKind::Structural)
            } else if shape.missing_d[j_global] {
                Observation::Missing(MissingKind::Incidental)
            } else {
                Observation::Observed(d)
            };
            let outcome = if shape.missing_y[j_global] {
                y_mis[j_global] = Some(y);
                Observation::Missing(MissingKind::Incidental)
            } else {
                Observation::Observed(y)
            };
            individuals.push(IndividualRecord {
                cluster_id: id.clone(),
                cluster_index: i,
                x,
                uptake,
                outcome,
            });
            j_global += 1;
        }
    }

    let m = shape.x.first().map(|r| r.len()).unwrap_or(0);
    let data = TrialDataset::from_parts(clusters, individuals, l, p, m)?;
    let latent = LatentState {
        strata,
        c: c_lat,
        d: d_lat,
        u: vec![0.0; n],
        y_mis,
    };
    Ok((data, latent))
}

// ---------------------------------------------------------------------------
// Relabeling and chain driver
// ---------------------------------------------------------------------------

/// Apply the identifiability rule to one draw, returning the relabeled
/// copy and the stratum order used (`order[new_label] = old_label`).
pub fn relabel_draw(
    theta: &ParameterState,
    latent: Option<&LatentState>,
    policy: RelabelPolicy,
) -> (ParameterState, Option<LatentState>, Vec<usize>) {
    let k = theta.n_strata();
    let mut order: Vec<usize> = (0..k).collect();
    match policy {
        RelabelPolicy::None => {}
        RelabelPolicy::ComplianceMeanDescending => {
            order.sort_by(|&a, &b| {
                theta.strata_means[b][0]
                    .partial_cmp(&theta.strata_means[a][0])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
        RelabelPolicy::ComplianceMeanAscending => {
            order.sort_by(|&a, &b| {
                theta.strata_means[a][0]
                    .partial_cmp(&theta.strata_means[b][0])
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
        }
    }
    let mut new_theta = theta.clone();
    for (new_k, &old_k) in order.iter().enumerate() {
        new_theta.pi[new_k] = theta.pi[old_k];
        new_theta.strata_means[new_k] = theta.strata_means[old_k].clone();
        new_theta.mu_d[new_k] = theta.mu_d[old_k];
        new_theta.alpha[new_k] = theta.alpha[old_k].clone();
        new_theta.mu_y[new_k] = theta.mu_y[old_k];
        new_theta.beta0[new_k] = theta.beta0[old_k].clone();
        new_theta.beta1[new_k] = theta.beta1[old_k].clone();
        new_theta.delta1[new_k] = theta.delta1[old_k];
        new_theta.delta0[new_k] = theta.delta0[old_k];
        new_theta.sigma_sq[new_k] = theta.sigma_sq[old_k];
    }
    let new_latent = latent.map(|lat| {
        let mut inv = vec![0usize; k];
        for (new_k, &old_k) in order.iter().enumerate() {
            inv[old_k] = new_k;
        }
        let mut l2 = lat.clone();
        for s in &mut l2.strata {
            *s = inv[*s];
        }
        l2
    });
    (new_theta, new_latent, order)
}

/// Run one chain and return the retained draws.
pub fn run_chain(
    data: &TrialDataset,
    config: &ModelConfig,
    priors: &PriorSpec,
    options: &ChainOptions,
) -> Result<PosteriorDraws> {
    options.validate()?;
    let dims = ParameterDims::of(config, data);
    let mut rng = crate::rng::RngStream::new(options.seed);
    let mut params = Vec::new();
    let mut latents = Vec::new();
    let mut perms: Vec<Vec<usize>> = Vec::new();

    if options.n_iterations > 0 {
        let mut sampler = GibbsSampler::new(
            data,
            *config,
            priors.clone(),
            options.init,
            &mut rng,
        )?;
        for sweep_idx in 0..options.n_iterations {
            sampler
                .sweep(&mut rng)
                .map_err(|e| Error::Numeric(format!("sweep {sweep_idx}: {e}")))?;
            if sweep_idx >= options.burn_in
                && (sweep_idx - options.burn_in) % options.thin == 0
            {
                let (theta, latent, order) = relabel_draw(
                    &sampler.theta,
                    options.keep_latents.then_some(&sampler.latent),
                    options.relabel,
                );
                params.push(theta);
                if let Some(l) = latent {
                    latents.push(l);
                }
                perms.push(order);
            }
        }
    }

    let switches = perms
        .windows(2)
        .filter(|w| w[0] != w[1])
        .count();
    let label_switch_rate = if perms.len() > 1 {
        switches as f64 / (perms.len() - 1) as f64
    } else {
        0.0
    };

    Ok(PosteriorDraws {
        params,
        latents,
        meta: DrawsMeta {
            seed: options.seed,
            n_iterations: options.n_iterations,
            burn_in: options.burn_in,
            thin: options.thin,
            config: *config,
            dims,
            relabel_permutations: perms,
            label_switch_rate,
        },
    })
}
