//! Cross-checks of every Gibbs full conditional against the joint density
//! itself, on a small hand-built trial with every kind of missingness. The
//! fixture and checking techniques live in `support`; each test here names
//! one conditional and delegates to its check.

mod support;

#[test]
fn stratum_mean_blocks_match_the_joint() {
    support::stratum_mean_blocks();
}

#[test]
fn uptake_coefficient_blocks_match_the_augmented_joint() {
    support::uptake_coefficient_blocks();
}

#[test]
fn uptake_coefficient_blocks_match_a_direct_solve() {
    support::uptake_coefficient_direct_solve();
}

#[test]
fn shared_uptake_coefficients_pool_slopes_across_strata() {
    support::shared_uptake_coefficients();
}

#[test]
fn uptake_cluster_effects_match_the_augmented_joint_and_quadrature() {
    support::uptake_cluster_effects();
}

#[test]
fn outcome_coefficient_blocks_match_the_joint() {
    support::outcome_coefficient_blocks();
}

#[test]
fn outcome_coefficient_blocks_match_a_direct_solve() {
    support::outcome_coefficient_direct_solve();
}

#[test]
fn shared_outcome_coefficients_pool_slopes_across_strata() {
    support::shared_outcome_coefficients();
}

#[test]
fn outcome_cluster_effects_match_the_joint() {
    support::outcome_cluster_effects();
}

#[test]
fn control_compliance_conditionals_match_the_joint() {
    support::control_compliance_conditionals();
}

#[test]
fn mixing_weight_concentration_matches_dirichlet_kernel() {
    support::mixing_weight_concentration();
}

#[test]
fn mixture_covariance_conditional_matches_inverse_wishart_kernel() {
    support::mixture_covariance_conditional();
}

#[test]
fn uptake_variance_conditional_matches_its_kernel_and_bound() {
    support::uptake_variance_conditional();
}

#[test]
fn outcome_heterogeneity_variance_conditional_matches_its_kernel() {
    support::outcome_heterogeneity_variance_conditional();
}

#[test]
fn outcome_variance_conditionals_match_their_kernels() {
    support::outcome_variance_conditionals();
}

#[test]
fn stratum_label_weights_match_joint_differences() {
    support::stratum_label_weights();
}

#[test]
fn uptake_type_probabilities_match_joint_odds() {
    support::uptake_type_probabilities();
}

#[test]
fn binary_family_conditionals_match_the_joint() {
    support::binary_family_conditionals();
}

#[test]
fn collapsed_joint_ignores_imputed_outcomes() {
    support::imputed_outcomes_ignored();
}

#[test]
fn utility_redraws_match_truncated_normal_moments() {
    support::utility_redraws();
}

#[test]
fn control_uptake_redraws_match_their_conditional_probability() {
    support::control_uptake_redraws();
}

#[test]
fn incidental_imputation_follows_the_outcome_model() {
    support::incidental_imputation();
}
