//! Shared cross-check machinery: a small hand-built trial with every kind
//! of missingness, plus three independent verification techniques that never
//! reuse the sampler's own assembly code.
//!
//! * **Exact finite differences** — every Gaussian block's log conditional
//!   is exactly quadratic in its coordinates, so central differences with a
//!   large step recover the gradient and Hessian to machine precision. At
//!   the claimed conditional mean the gradient must vanish, and the negated
//!   Hessian must equal the inverse of the claimed covariance.
//! * **Kernel log-ratios** — for the non-Gaussian blocks (Dirichlet,
//!   inverse-Wishart, inverse-gamma, truncated inverse-gamma) differences
//!   of the joint at two probe values must match differences of the claimed
//!   conditional's log kernel, since the normalizer cancels.
//! * **Sampled moments** — the stochastic updates (latent utilities, uptake
//!   types, incidental imputation) are run many times and their empirical
//!   moments compared with the implied closed forms.
//!
//! Blocks that condition on the probit utilities are checked against the
//! utility-augmented joint: the collapsed uptake term Σ ln Φ(±lp) replaced
//! by Σ ln N(u − lp; 0, 1).

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use pstrat::data::{
    ClusterRecord, IndividualRecord, LatentState, MissingKind, Observation, TrialDataset,
};
use pstrat::gibbs::GibbsSampler;
use pstrat::model::{
    log_joint_parts, CoefficientScope, CovariateDistribution, ModelConfig, OutcomeFamily,
    ParameterState, PriorSpec,
};
use pstrat::rng::RngStream;
use pstrat::special::{normal_cdf, normal_pdf};

const LN_2PI: f64 = 1.837877066409345483_f64;

// ---------------------------------------------------------------------------
// Fixture: 6 clusters × 3 individuals, one compliance metric, one cluster
// covariate, one individual covariate, two strata. Clusters 1–3 treated,
// 4–6 control. Includes an incidentally missing treated uptake (j = 4) and
// two incidentally missing outcomes (j = 1 treated, j = 12 control).
// ---------------------------------------------------------------------------

pub struct Fixture {
    pub data: TrialDataset,
    pub config: ModelConfig,
    pub priors: PriorSpec,
    pub theta: ParameterState,
    pub latent: LatentState,
}

fn cluster(id: &str, treated: bool, z: f64, c: Option<f64>) -> ClusterRecord {
    ClusterRecord {
        id: id.into(),
        treated,
        z: vec![z],
        compliance: match c {
            Some(v) => Observation::Observed(vec![v]),
            None => Observation::Missing(MissingKind::Structural),
        },
        n_individuals: 3,
    }
}

fn person(
    cluster_id: &str,
    x: f64,
    uptake: Observation<bool>,
    outcome: Observation<f64>,
) -> IndividualRecord {
    IndividualRecord {
        cluster_id: cluster_id.into(),
        cluster_index: 0,
        x: vec![x],
        uptake,
        outcome,
    }
}

impl Fixture {
    pub fn gaussian() -> Self {
        Self::build(OutcomeFamily::Gaussian, CoefficientScope::ByStratum)
    }

    pub fn binary() -> Self {
        Self::build(OutcomeFamily::BinaryProbit, CoefficientScope::ByStratum)
    }

    pub fn shared() -> Self {
        Self::build(OutcomeFamily::Gaussian, CoefficientScope::Shared)
    }

    fn build(family: OutcomeFamily, scope: CoefficientScope) -> Self {
        let config = ModelConfig {
            n_strata: 2,
            outcome_family: family,
            covariate_distribution: CovariateDistribution::Pooled,
            compliance_coefficients: scope,
            outcome_coefficients: scope,
        };

        let z = [0.4, -0.2, 0.1, 0.5, -0.3, 0.0];
        let c_obs = [Some(0.8), Some(-0.5), Some(0.3), None, None, None];
        let x: [[f64; 3]; 6] = [
            [0.5, -1.0, 0.0],
            [1.5, 0.25, -0.75],
            [0.0, 1.0, -0.5],
            [0.75, -0.25, 0.5],
            [-1.25, 0.25, 1.0],
            [0.3, -0.6, 0.9],
        ];
        // NaN marks an incidentally missing outcome cell.
        let y: [[f64; 3]; 6] = match family {
            OutcomeFamily::Gaussian => [
                [1.2, f64::NAN, 0.3],
                [2.5, 0.9, -0.6],
                [0.1, 3.2, 1.8],
                [1.0, -0.2, 0.8],
                [f64::NAN, 0.5, 1.4],
                [-0.1, 0.6, 2.0],
            ],
            OutcomeFamily::BinaryProbit => [
                [1.0, f64::NAN, 0.0],
                [1.0, 1.0, 0.0],
                [0.0, 1.0, 1.0],
                [1.0, 0.0, 1.0],
                [f64::NAN, 0.0, 1.0],
                [0.0, 1.0, 1.0],
            ],
        };
        let uptake: [[Observation<bool>; 3]; 3] = [
            [
                Observation::Observed(true),
                Observation::Observed(false),
                Observation::Observed(true),
            ],
            [
                Observation::Observed(true),
                Observation::Missing(MissingKind::Incidental),
                Observation::Observed(false),
            ],
            [
                Observation::Observed(false),
                Observation::Observed(true),
                Observation::Observed(true),
            ],
        ];

        let ids = ["c1", "c2", "c3", "c4", "c5", "c6"];
        let clusters: Vec<ClusterRecord> = (0..6)
            .map(|i| cluster(ids[i], i < 3, z[i], c_obs[i]))
            .collect();
        let mut individuals = Vec::new();
        for i in 0..6 {
            for t in 0..3 {
                let up = if i < 3 {
                    uptake[i][t]
                } else {
                    Observation::Missing(MissingKind::Structural)
                };
                let out = if y[i][t].is_nan() {
                    Observation::Missing(MissingKind::Incidental)
                } else {
                    Observation::Observed(y[i][t])
                };
                individuals.push(person(ids[i], x[i][t], up, out));
            }
        }
        let data = TrialDataset::from_parts(clusters, individuals, 1, 1, 1).unwrap();

        let mut priors = PriorSpec::diffuse(2, 2);
        priors.dirichlet_weight = vec![2.0, 3.0];
        priors.strata_mean_loc = DVector::from_vec(vec![0.3, -0.1]);
        priors.strata_mean_cov = DMatrix::from_row_slice(2, 2, &[4.0, 0.5, 0.5, 2.5]);
        priors.sigma_scale = DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]);
        priors.sigma_dof = 6.0;
        priors.v_mu_d_sq = 5.0;
        priors.v_alpha_sq = 8.0;
        priors.u_tau_d_sq = 9.0;
        priors.v_mu_y_sq = 50.0;
        priors.v_beta_sq = 30.0;
        priors.v_delta0_sq = 12.0;
        priors.u_tau_y_sq = 100.0;
        priors.sigma_sq_shape = 2.0;
        priors.sigma_sq_rate = 3.0;

        let mut theta = ParameterState::neutral(&config, &priors, 2, 1, 6);
        theta.pi = vec![0.4, 0.6];
        theta.strata_means = vec![
            DVector::from_vec(vec![0.5, -0.2]),
            DVector::from_vec(vec![-0.3, 0.4]),
        ];
        theta.sigma = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]);
        theta.mu_d = vec![0.2, -0.1];
        theta.alpha = match scope {
            CoefficientScope::ByStratum => vec![vec![0.3], vec![-0.4]],
            CoefficientScope::Shared => vec![vec![0.3], vec![0.3]],
        };
        theta.tau_d_sq = 0.5;
        theta.phi_d = vec![0.15, -0.2, 0.05, 0.3, -0.1, 0.12];
        theta.mu_y = vec![1.0, 2.0];
        theta.beta0 = match scope {
            CoefficientScope::ByStratum => vec![vec![0.5], vec![-0.2]],
            CoefficientScope::Shared => vec![vec![0.5], vec![0.5]],
        };
        theta.beta1 = match scope {
            CoefficientScope::ByStratum => vec![vec![0.25], vec![0.1]],
            CoefficientScope::Shared => vec![vec![0.25], vec![0.25]],
        };
        theta.delta1 = vec![1.5, 2.5];
        theta.delta0 = vec![0.4, 0.6];
        theta.sigma_sq = match family {
            OutcomeFamily::Gaussian => vec![1.3, 0.9],
            OutcomeFamily::BinaryProbit => vec![1.0, 1.0],
        };
        theta.tau_y_sq = 0.8;
        theta.phi_y = vec![-0.25, 0.1, 0.2, -0.15, 0.05, 0.3];

        let y_fill = match family {
            OutcomeFamily::Gaussian => (0.7, -0.4),
            OutcomeFamily::BinaryProbit => (1.0, 0.0),
        };
        let mut y_mis = vec![None; 18];
        y_mis[1] = Some(y_fill.0);
        y_mis[12] = Some(y_fill.1);
        let latent = LatentState {
            strata: vec![0, 1, 0, 1, 0, 1],
            c: vec![
                vec![0.8],
                vec![-0.5],
                vec![0.3],
                vec![0.6],
                vec![-0.1],
                vec![0.2],
            ],
            d: vec![
                true, false, true, // c1: observed
                true, true, false, // c2: middle entry imputed
                false, true, true, // c3: observed
                true, false, true, // c4: imputed
                false, true, false, // c5: imputed
                true, false, false, // c6: imputed
            ],
            u: vec![
                0.9, -0.4, 1.3, 0.6, 0.2, -1.1, -0.7, 0.8, 1.9, 0.5, -0.9, 0.35, -1.5, 0.45,
                -0.25, 1.1, -0.65, -0.05,
            ],
            y_mis,
        };

        Fixture {
            data,
            config,
            priors,
            theta,
            latent,
        }
    }

    pub fn sampler(&self) -> GibbsSampler<'_> {
        GibbsSampler::from_state(
            &self.data,
            self.config,
            self.priors.clone(),
            self.theta.clone(),
            self.latent.clone(),
        )
        .unwrap()
    }

    /// The model's own joint log density (uptake utilities integrated out).
    pub fn collapsed(&self, theta: &ParameterState, latent: &LatentState) -> f64 {
        log_joint_parts(&self.data, latent, theta, &self.priors, &self.config)
            .unwrap()
            .total()
    }

    /// Joint log density augmented with the probit utilities: the collapsed
    /// uptake term is replaced by Σ_j ln N(u_j − lp_j; 0, 1).
    pub fn augmented(&self, theta: &ParameterState, latent: &LatentState) -> f64 {
        let parts =
            log_joint_parts(&self.data, latent, theta, &self.priors, &self.config).unwrap();
        let mut util = 0.0;
        for (j, ind) in self.data.individuals().iter().enumerate() {
            let i = ind.cluster_index;
            let k = latent.strata[i];
            let lp = theta.compliance_lp(&self.data.standardized_x(j), k, i);
            let r = latent.u[j] - lp;
            util += -0.5 * r * r - 0.5 * LN_2PI;
        }
        parts.total() - parts.compliance + util
    }
}

// ---------------------------------------------------------------------------
// Checkers
// ---------------------------------------------------------------------------

/// Verify that `f` (a log density, exactly quadratic in its coordinates) has
/// a stationary point at `mean` and curvature `−cov⁻¹`. With exact quadratics
/// the step size only affects rounding, so a large step is used.
pub fn check_gaussian_block(
    label: &str,
    f: &dyn Fn(&DVector<f64>) -> f64,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) {
    let q = mean.len();
    let h = 0.25;

    let mut grad = DVector::zeros(q);
    for a in 0..q {
        let mut hi = mean.clone();
        hi[a] += h;
        let mut lo = mean.clone();
        lo[a] -= h;
        grad[a] = (f(&hi) - f(&lo)) / (2.0 * h);
    }
    // cov · ∇f at the claimed mean is the displacement of the true mean.
    let drift = cov * &grad;
    assert!(
        drift.amax() < 1e-6,
        "{label}: claimed mean is off by {} (gradient {:?})",
        drift.amax(),
        grad.as_slice()
    );

    let f0 = f(mean);
    let mut hess = DMatrix::zeros(q, q);
    for a in 0..q {
        let mut hi = mean.clone();
        hi[a] += h;
        let mut lo = mean.clone();
        lo[a] -= h;
        hess[(a, a)] = (f(&hi) + f(&lo) - 2.0 * f0) / (h * h);
        for b in 0..a {
            let mut pp = mean.clone();
            pp[a] += h;
            pp[b] += h;
            let mut pm = mean.clone();
            pm[a] += h;
            pm[b] -= h;
            let mut mp = mean.clone();
            mp[a] -= h;
            mp[b] += h;
            let mut mm = mean.clone();
            mm[a] -= h;
            mm[b] -= h;
            let v = (f(&pp) - f(&pm) - f(&mp) + f(&mm)) / (4.0 * h * h);
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    let precision = cov
        .clone()
        .try_inverse()
        .expect("claimed covariance must be invertible");
    for a in 0..q {
        for b in 0..q {
            let want = precision[(a, b)];
            let got = -hess[(a, b)];
            assert!(
                (got - want).abs() <= 1e-6 * (1.0 + want.abs()),
                "{label}: precision[{a},{b}] from the joint is {got}, claimed {want}"
            );
        }
    }
}

pub fn check_scalar_gaussian(label: &str, f: &dyn Fn(f64) -> f64, mean: f64, var: f64) {
    let g = |v: &DVector<f64>| f(v[0]);
    check_gaussian_block(
        label,
        &g,
        &DVector::from_vec(vec![mean]),
        &DMatrix::from_element(1, 1, var),
    );
}

/// Differences of the joint between probe values must match differences of
/// the claimed conditional's log kernel (normalizers cancel).
pub fn check_log_ratio(
    label: &str,
    f: &dyn Fn(f64) -> f64,
    kernel: &dyn Fn(f64) -> f64,
    probes: &[f64],
) {
    let f0 = f(probes[0]);
    let k0 = kernel(probes[0]);
    for &p in &probes[1..] {
        let lhs = f(p) - f0;
        let rhs = kernel(p) - k0;
        assert!(
            (lhs - rhs).abs() < 1e-6,
            "{label} at probe {p}: joint ratio {lhs}, kernel ratio {rhs}"
        );
    }
}

/// Simpson-rule mean and variance of exp(f) over [lo, hi].
pub fn quadrature_moments(f: &dyn Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> (f64, f64) {
    assert!(n % 2 == 0);
    let h = (hi - lo) / n as f64;
    let logs: Vec<f64> = (0..=n).map(|t| f(lo + h * t as f64)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut w_sum, mut m1, mut m2) = (0.0, 0.0, 0.0);
    for (t, lg) in logs.iter().enumerate() {
        let coef = if t == 0 || t == n {
            1.0
        } else if t % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let w = coef * (lg - max).exp();
        let v = lo + h * t as f64;
        w_sum += w;
        m1 += w * v;
        m2 += w * v * v;
    }
    let mean = m1 / w_sum;
    (mean, m2 / w_sum - mean * mean)
}

/// Mean and variance of N(mu, 1) truncated to the positive (want = true) or
/// negative (want = false) half line.
pub fn truncated_normal_moments(mu: f64, positive: bool) -> (f64, f64) {
    if positive {
        let lambda = normal_pdf(mu) / normal_cdf(mu);
        (mu + lambda, 1.0 - mu * lambda - lambda * lambda)
    } else {
        let delta = normal_pdf(mu) / normal_cdf(-mu);
        (mu - delta, 1.0 + mu * delta - delta * delta)
    }
}

// ---------------------------------------------------------------------------
// Gaussian-block conditionals against the joint
// ---------------------------------------------------------------------------

pub fn stratum_mean_blocks() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    for k in 0..2 {
        let (mean, cov) = s.strata_means_conditional(k).unwrap();
        let f = |v: &DVector<f64>| {
            let mut th = fx.theta.clone();
            th.strata_means[k] = v.clone();
            fx.collapsed(&th, &fx.latent)
        };
        check_gaussian_block(&format!("stratum mean block {k}"), &f, &mean, &cov);
    }
}

pub fn uptake_coefficient_blocks() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let blocks = s.compliance_coef_conditional().unwrap();
    assert_eq!(blocks.len(), 2);
    for (k, (mean, cov)) in blocks.iter().enumerate() {
        assert_eq!(mean.len(), 2);
        let f = |v: &DVector<f64>| {
            let mut th = fx.theta.clone();
            th.mu_d[k] = v[0];
            th.alpha[k][0] = v[1];
            fx.augmented(&th, &fx.latent)
        };
        check_gaussian_block(&format!("uptake coefficient block {k}"), &f, mean, cov);
    }
}

pub fn uptake_coefficient_direct_solve() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let blocks = s.compliance_coef_conditional().unwrap();
    for k in 0..2 {
        let mut prec = DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / fx.priors.v_mu_d_sq,
            1.0 / fx.priors.v_alpha_sq,
        ]));
        let mut b = DVector::zeros(2);
        for (j, ind) in fx.data.individuals().iter().enumerate() {
            let i = ind.cluster_index;
            if fx.latent.strata[i] != k {
                continue;
            }
            let g = DVector::from_vec(vec![1.0, ind.x[0]]);
            let t = fx.latent.u[j] - fx.theta.phi_d[i];
            prec += &g * g.transpose();
            b += g * t;
        }
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * b;
        let (got_mean, got_cov) = &blocks[k];
        for a in 0..2 {
            assert!(
                (got_mean[a] - mean[a]).abs() < 1e-9,
                "uptake block {k} mean[{a}]: {} vs {}",
                got_mean[a],
                mean[a]
            );
            for c in 0..2 {
                assert!(
                    (got_cov[(a, c)] - cov[(a, c)]).abs() < 1e-9,
                    "uptake block {k} cov[{a},{c}]"
                );
            }
        }
    }
}

pub fn shared_uptake_coefficients() {
    let fx = Fixture::shared();
    let s = fx.sampler();
    let blocks = s.compliance_coef_conditional().unwrap();
    assert_eq!(blocks.len(), 1);
    let (mean, cov) = &blocks[0];
    assert_eq!(mean.len(), 3); // [intercept₁, intercept₂, shared slope]
    let f = |v: &DVector<f64>| {
        let mut th = fx.theta.clone();
        th.mu_d[0] = v[0];
        th.mu_d[1] = v[1];
        th.alpha[0][0] = v[2];
        th.alpha[1][0] = v[2];
        fx.augmented(&th, &fx.latent)
    };
    check_gaussian_block("shared uptake coefficient block", &f, mean, cov);
}

pub fn uptake_cluster_effects() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    for i in 0..6 {
        let (mean, var) = s.phi_d_conditional(i);
        let f = |p: f64| {
            let mut th = fx.theta.clone();
            th.phi_d[i] = p;
            fx.augmented(&th, &fx.latent)
        };
        check_scalar_gaussian(&format!("uptake cluster effect {i}"), &f, mean, var);
        if i == 0 || i == 3 {
            let sd = var.sqrt();
            let (qm, qv) = quadrature_moments(&f, mean - 10.0 * sd, mean + 10.0 * sd, 4000);
            assert!(
                (qm - mean).abs() < 1e-6,
                "quadrature mean for cluster {i}: {qm} vs {mean}"
            );
            assert!(
                (qv - var).abs() < 1e-6,
                "quadrature variance for cluster {i}: {qv} vs {var}"
            );
        }
    }
}

pub fn outcome_coefficient_blocks() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let blocks = s.outcome_coef_conditional().unwrap();
    assert_eq!(blocks.len(), 2);
    for (k, (mean, cov)) in blocks.iter().enumerate() {
        assert_eq!(mean.len(), 5); // [intercept, slope, control shift, treated slope, treated shift]
        let f = |v: &DVector<f64>| {
            let mut th = fx.theta.clone();
            th.mu_y[k] = v[0];
            th.beta0[k][0] = v[1];
            th.delta0[k] = v[2];
            th.beta1[k][0] = v[3];
            th.delta1[k] = v[4];
            fx.collapsed(&th, &fx.latent)
        };
        check_gaussian_block(&format!("outcome coefficient block {k}"), &f, mean, cov);
    }
}

pub fn outcome_coefficient_direct_solve() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let blocks = s.outcome_coef_conditional().unwrap();
    let pr = &fx.priors;
    for k in 0..2 {
        let mut prec = DMatrix::from_diagonal(&DVector::from_vec(vec![
            1.0 / pr.v_mu_y_sq,
            1.0 / pr.v_beta_sq,
            1.0 / pr.v_delta0_sq,
            1.0 / pr.v_beta_sq,
            1.0 / pr.v_beta_sq,
        ]));
        let mut b = DVector::zeros(5);
        let inv_s2 = 1.0 / fx.theta.sigma_sq[k];
        for (j, ind) in fx.data.individuals().iter().enumerate() {
            let i = ind.cluster_index;
            if fx.latent.strata[i] != k {
                continue;
            }
            let Some(y) = ind.outcome.value() else {
                continue;
            };
            let w = fx.data.clusters()[i].treated;
            let df = if fx.latent.d[j] { 1.0 } else { 0.0 };
            let x = ind.x[0];
            let g = DVector::from_vec(vec![
                1.0,
                x,
                if w { 0.0 } else { df },
                if w { df * x } else { 0.0 },
                if w { df } else { 0.0 },
            ]);
            let t = y - fx.theta.phi_y[i];
            prec += &g * g.transpose() * inv_s2;
            b += g * (t * inv_s2);
        }
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * b;
        let (got_mean, got_cov) = &blocks[k];
        for a in 0..5 {
            assert!(
                (got_mean[a] - mean[a]).abs() < 1e-9,
                "outcome block {k} mean[{a}]: {} vs {}",
                got_mean[a],
                mean[a]
            );
            for c in 0..5 {
                assert!(
                    (got_cov[(a, c)] - cov[(a, c)]).abs() < 1e-9,
                    "outcome block {k} cov[{a},{c}]"
                );
            }
        }
    }
}

pub fn shared_outcome_coefficients() {
    let fx = Fixture::shared();
    let s = fx.sampler();
    let blocks = s.outcome_coef_conditional().unwrap();
    assert_eq!(blocks.len(), 1);
    let (mean, cov) = &blocks[0];
    // [intercept₁, intercept₂ | base slope | control shift₁, control shift₂ |
    //  treated slope | treated shift₁, treated shift₂]
    assert_eq!(mean.len(), 8);
    let f = |v: &DVector<f64>| {
        let mut th = fx.theta.clone();
        th.mu_y[0] = v[0];
        th.mu_y[1] = v[1];
        th.beta0[0][0] = v[2];
        th.beta0[1][0] = v[2];
        th.delta0[0] = v[3];
        th.delta0[1] = v[4];
        th.beta1[0][0] = v[5];
        th.beta1[1][0] = v[5];
        th.delta1[0] = v[6];
        th.delta1[1] = v[7];
        fx.collapsed(&th, &fx.latent)
    };
    check_gaussian_block("shared outcome coefficient block", &f, mean, cov);
}

pub fn outcome_cluster_effects() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    for i in 0..6 {
        let (mean, var) = s.phi_y_conditional(i);
        let f = |p: f64| {
            let mut th = fx.theta.clone();
            th.phi_y[i] = p;
            fx.collapsed(&th, &fx.latent)
        };
        check_scalar_gaussian(&format!("outcome cluster effect {i}"), &f, mean, var);
    }
}

pub fn control_compliance_conditionals() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    for i in 3..6 {
        let (mean, cov) = s.c_mis_conditional(i).unwrap();
        assert_eq!(mean.len(), 1);
        let f = |c: f64| {
            let mut lat = fx.latent.clone();
            lat.c[i] = vec![c];
            fx.collapsed(&fx.theta, &lat)
        };
        check_scalar_gaussian(
            &format!("control compliance metric {i}"),
            &f,
            mean[0],
            cov[(0, 0)],
        );
    }
}

// ---------------------------------------------------------------------------
// Non-Gaussian conditionals against their kernels
// ---------------------------------------------------------------------------

pub fn mixing_weight_concentration() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let conc = s.pi_concentration();
    // Prior weights (2, 3) plus the 3/3 stratum-label split of the fixture.
    assert_eq!(conc, vec![5.0, 6.0]);
    let f = |p0: f64| {
        let mut th = fx.theta.clone();
        th.pi = vec![p0, 1.0 - p0];
        fx.collapsed(&th, &fx.latent)
    };
    let kernel = |p0: f64| (conc[0] - 1.0) * p0.ln() + (conc[1] - 1.0) * (1.0 - p0).ln();
    check_log_ratio(
        "mixing weights",
        &f,
        &kernel,
        &[0.4, 0.25, 0.55, 0.7, 0.9],
    );
}

pub fn mixture_covariance_conditional() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let (scale, dof) = s.sigma_conditional();
    assert!((dof - (6.0 + 6.0)).abs() < 1e-12); // prior dof + number of clusters
    let probes = [
        DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.3, 0.8]),
        DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 1.0]),
        DMatrix::from_row_slice(2, 2, &[0.9, -0.1, -0.1, 1.4]),
        DMatrix::from_row_slice(2, 2, &[2.0, 0.6, 0.6, 1.1]),
    ];
    let f = |m: &DMatrix<f64>| {
        let mut th = fx.theta.clone();
        th.sigma = m.clone();
        fx.collapsed(&th, &fx.latent)
    };
    let kernel = |m: &DMatrix<f64>| {
        let inv = m.clone().try_inverse().unwrap();
        -(dof + 3.0) / 2.0 * m.determinant().ln() - 0.5 * (&scale * inv).trace()
    };
    let f0 = f(&probes[0]);
    let k0 = kernel(&probes[0]);
    for p in &probes[1..] {
        let lhs = f(p) - f0;
        let rhs = kernel(p) - k0;
        assert!(
            (lhs - rhs).abs() < 1e-6,
            "mixture covariance: joint ratio {lhs}, kernel ratio {rhs}"
        );
    }
}

pub fn uptake_variance_conditional() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let (shape, rate, upper) = s.tau_d_conditional();
    assert_eq!(upper, fx.priors.u_tau_d_sq);
    assert!((shape - 2.5).abs() < 1e-12); // (6 − 1) / 2
    let expect_rate: f64 = 0.5 * fx.theta.phi_d.iter().map(|p| p * p).sum::<f64>();
    assert!((rate - expect_rate).abs() < 1e-12);
    let f = |t: f64| {
        let mut th = fx.theta.clone();
        th.tau_d_sq = t;
        fx.collapsed(&th, &fx.latent)
    };
    let kernel = |t: f64| -(shape + 1.0) * t.ln() - rate / t;
    check_log_ratio("uptake variance", &f, &kernel, &[0.5, 0.3, 1.7, 8.5]);
}

pub fn outcome_heterogeneity_variance_conditional() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    let (shape, rate, upper) = s.tau_y_conditional();
    assert_eq!(upper, fx.priors.u_tau_y_sq);
    let f = |t: f64| {
        let mut th = fx.theta.clone();
        th.tau_y_sq = t;
        fx.collapsed(&th, &fx.latent)
    };
    let kernel = |t: f64| -(shape + 1.0) * t.ln() - rate / t;
    check_log_ratio(
        "outcome heterogeneity variance",
        &f,
        &kernel,
        &[0.8, 0.4, 0.9, 5.0, 60.0],
    );
}

pub fn outcome_variance_conditionals() {
    let fx = Fixture::gaussian();
    let s = fx.sampler();
    for k in 0..2 {
        let (shape, rate) = s.sigma_k_conditional(k);
        let f = |v: f64| {
            let mut th = fx.theta.clone();
            th.sigma_sq[k] = v;
            fx.collapsed(&th, &fx.latent)
        };
        let kernel = |v: f64| -(shape + 1.0) * v.ln() - rate / v;
        check_log_ratio(
            &format!("outcome variance {k}"),
            &f,
            &kernel,
            &[1.0, 0.6, 1.1, 2.3],
        );
    }
}

// ---------------------------------------------------------------------------
// Discrete latent conditionals against joint differences
// ---------------------------------------------------------------------------

fn check_stratum_weights(fx: &Fixture) {
    let s = fx.sampler();
    for i in 0..6 {
        let lw = s.stratum_log_weights(i).unwrap();
        let joint_at = |k: usize| {
            let mut lat = fx.latent.clone();
            lat.strata[i] = k;
            fx.collapsed(&fx.theta, &lat)
        };
        let lhs = lw[1] - lw[0];
        let rhs = joint_at(1) - joint_at(0);
        assert!(
            (lhs - rhs).abs() < 1e-6,
            "stratum weights for cluster {i}: {lhs} vs {rhs}"
        );
    }
}

fn check_uptake_odds(fx: &Fixture) {
    let s = fx.sampler();
    for j in 0..18 {
        let p = s.uptake_conditional_prob(j);
        let joint_at = |d: bool| {
            let mut lat = fx.latent.clone();
            lat.d[j] = d;
            fx.collapsed(&fx.theta, &lat)
        };
        let lhs = (p / (1.0 - p)).ln();
        let rhs = joint_at(true) - joint_at(false);
        assert!(
            (lhs - rhs).abs() < 1e-6,
            "uptake odds for individual {j}: {lhs} vs {rhs}"
        );
    }
}

pub fn stratum_label_weights() {
    check_stratum_weights(&Fixture::gaussian());
}

pub fn uptake_type_probabilities() {
    check_uptake_odds(&Fixture::gaussian());
}

pub fn binary_family_conditionals() {
    let fx = Fixture::binary();
    check_stratum_weights(&fx);
    check_uptake_odds(&fx);

    let s = fx.sampler();
    let blocks = s.compliance_coef_conditional().unwrap();
    for (k, (mean, cov)) in blocks.iter().enumerate() {
        let f = |v: &DVector<f64>| {
            let mut th = fx.theta.clone();
            th.mu_d[k] = v[0];
            th.alpha[k][0] = v[1];
            fx.augmented(&th, &fx.latent)
        };
        check_gaussian_block(&format!("binary uptake coefficient block {k}"), &f, mean, cov);
    }
    for i in 0..6 {
        let (mean, var) = s.phi_d_conditional(i);
        let f = |p: f64| {
            let mut th = fx.theta.clone();
            th.phi_d[i] = p;
            fx.augmented(&th, &fx.latent)
        };
        check_scalar_gaussian(&format!("binary uptake cluster effect {i}"), &f, mean, var);
    }
    for i in 3..6 {
        let (mean, cov) = s.c_mis_conditional(i).unwrap();
        let f = |c: f64| {
            let mut lat = fx.latent.clone();
            lat.c[i] = vec![c];
            fx.collapsed(&fx.theta, &lat)
        };
        check_scalar_gaussian(
            &format!("binary control compliance {i}"),
            &f,
            mean[0],
            cov[(0, 0)],
        );
    }
}

pub fn imputed_outcomes_ignored() {
    let fx = Fixture::gaussian();
    let base = fx.collapsed(&fx.theta, &fx.latent);
    let mut lat = fx.latent.clone();
    lat.y_mis[1] = Some(99.0);
    lat.y_mis[12] = None;
    assert_eq!(fx.collapsed(&fx.theta, &lat), base);
}

// ---------------------------------------------------------------------------
// Sampled updates against implied moments
// ---------------------------------------------------------------------------

pub fn utility_redraws() {
    let fx = Fixture::gaussian();
    let mut s = fx.sampler();
    let mut rng = RngStream::new(0x7E57_0001);
    let monitored = [0usize, 1, 9];
    let r = 20_000usize;
    let mut sums = [0.0f64; 3];
    let mut sq = [0.0f64; 3];
    for _ in 0..r {
        s.update_utilities(&mut rng).unwrap();
        for (t, &j) in monitored.iter().enumerate() {
            let u = s.latent.u[j];
            let d = fx.latent.d[j];
            assert!(if d { u > 0.0 } else { u < 0.0 }, "utility sign for {j}");
            sums[t] += u;
            sq[t] += u * u;
        }
    }
    for (t, &j) in monitored.iter().enumerate() {
        let i = fx.data.individuals()[j].cluster_index;
        let k = fx.latent.strata[i];
        let lp = fx
            .theta
            .compliance_lp(&fx.data.standardized_x(j), k, i);
        let (want_mean, want_var) = truncated_normal_moments(lp, fx.latent.d[j]);
        let mean = sums[t] / r as f64;
        let var = sq[t] / r as f64 - mean * mean;
        let mean_tol = 4.0 * (want_var / r as f64).sqrt();
        assert!(
            (mean - want_mean).abs() < mean_tol,
            "utility mean for {j}: {mean} vs {want_mean} (tol {mean_tol})"
        );
        assert!(
            (var - want_var).abs() < 0.05 * want_var,
            "utility variance for {j}: {var} vs {want_var}"
        );
    }
}

pub fn control_uptake_redraws() {
    let fx = Fixture::gaussian();
    let mut s = fx.sampler();
    let monitored = [9usize, 13, 17];
    let probs: Vec<f64> = monitored
        .iter()
        .map(|&j| s.uptake_conditional_prob(j))
        .collect();
    let mut rng = RngStream::new(0x7E57_0002);
    let r = 20_000usize;
    let mut hits = [0usize; 3];
    for _ in 0..r {
        s.update_d_mis(&mut rng).unwrap();
        for (t, &j) in monitored.iter().enumerate() {
            if s.latent.d[j] {
                hits[t] += 1;
            }
        }
    }
    // Treated-arm types (observed or incidentally missing) are never touched.
    for j in 0..9 {
        assert_eq!(s.latent.d[j], fx.latent.d[j], "treated type {j} changed");
    }
    for (t, &j) in monitored.iter().enumerate() {
        let p = probs[t];
        let freq = hits[t] as f64 / r as f64;
        let tol = 4.0 * (p * (1.0 - p) / r as f64).sqrt() + 1e-9;
        assert!(
            (freq - p).abs() < tol,
            "uptake frequency for {j}: {freq} vs {p} (tol {tol})"
        );
    }
}

pub fn incidental_imputation() {
    let fx = Fixture::gaussian();
    let mut s = fx.sampler();
    let p4 = s.uptake_conditional_prob(4);
    let mut rng = RngStream::new(0x7E57_0003);
    let r = 20_000usize;
    let (mut sum1, mut sq1) = (0.0f64, 0.0f64);
    let (mut sum12, mut sq12) = (0.0f64, 0.0f64);
    let mut hits4 = 0usize;
    for _ in 0..r {
        s.impute_incidental(&mut rng).unwrap();
        let y1 = s.latent.y_mis[1].unwrap();
        let y12 = s.latent.y_mis[12].unwrap();
        sum1 += y1;
        sq1 += y1 * y1;
        sum12 += y12;
        sq12 += y12 * y12;
        if s.latent.d[4] {
            hits4 += 1;
        }
        // Observed types are never redrawn, imputed control types untouched.
        assert!(!s.latent.d[1]);
        assert!(!s.latent.d[12]);
    }

    let freq = hits4 as f64 / r as f64;
    let tol = 4.0 * (p4 * (1.0 - p4) / r as f64).sqrt() + 1e-9;
    assert!(
        (freq - p4).abs() < tol,
        "incidental uptake frequency: {freq} vs {p4}"
    );

    let checks = [
        (1usize, 0usize, sum1, sq1),
        (12usize, 4usize, sum12, sq12),
    ];
    for (j, i, sum, sqsum) in checks {
        let k = fx.latent.strata[i];
        let w = fx.data.clusters()[i].treated;
        let want_mean = fx.theta.outcome_mean(
            w,
            fx.latent.d[j],
            &fx.data.standardized_x(j),
            k,
            i,
        );
        let want_sd = fx.theta.sigma_sq[k].sqrt();
        let mean = sum / r as f64;
        let sd = (sqsum / r as f64 - mean * mean).sqrt();
        let mean_tol = 4.0 * want_sd / (r as f64).sqrt();
        assert!(
            (mean - want_mean).abs() < mean_tol,
            "imputed outcome mean for {j}: {mean} vs {want_mean}"
        );
        assert!(
            (sd - want_sd).abs() < 0.05 * want_sd,
            "imputed outcome spread for {j}: {sd} vs {want_sd}"
        );
    }
}

/// Run every conditional cross-check in sequence, panicking on the first
/// failure with that check's own message.
pub fn run_all_conditional_checks() {
    stratum_mean_blocks();
    uptake_coefficient_blocks();
    uptake_coefficient_direct_solve();
    shared_uptake_coefficients();
    uptake_cluster_effects();
    outcome_coefficient_blocks();
    outcome_coefficient_direct_solve();
    shared_outcome_coefficients();
    outcome_cluster_effects();
    control_compliance_conditionals();
    mixing_weight_concentration();
    mixture_covariance_conditional();
    uptake_variance_conditional();
    outcome_heterogeneity_variance_conditional();
    outcome_variance_conditionals();
    stratum_label_weights();
    uptake_type_probabilities();
    binary_family_conditionals();
    imputed_outcomes_ignored();
    utility_redraws();
    control_uptake_redraws();
    incidental_imputation();
}
