//! Potential-outcome completion.
//!
//! Two generators turn one posterior draw (θ, latent state) into complete
//! potential-outcome data:
//!
//! * [`impute_y_mis`] completes the *study* units: every individual gets
//!   both arms' outcomes, with the unobserved arm drawn from its model
//!   conditional. The draw never conditions on the unit's own observed
//!   outcome — the two arms are linked only through θ and the latent
//!   state, so imputation cannot contaminate across treatments.
//! * [`generate_superpop`] draws fresh, exchangeable clusters from θ —
//!   stratum, cluster covariates, uptake, then both potential outcomes —
//!   with brand-new cluster effects, approximating the super-population
//!   the study clusters came from. Individual covariates are resampled
//!   from the study's empirical distribution (pooled, or restricted to
//!   clusters sharing the sampled stratum label).
//!
//! Both produce a [`CompletedDataset`], the input to the plug-in estimand
//! computations.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::data::{LatentState, Observation, TrialDataset};
use crate::dist::{sample_bernoulli, sample_categorical_ln, sample_normal, MvNormal};
use crate::model::{CovariateDistribution, ModelConfig, OutcomeFamily, ParameterState};
use crate::special::normal_cdf;
use crate::{Error, Result};

/// Complete potential-outcome data: both arms' outcomes for every
/// individual, uptake types for everyone, and stratum labels plus
/// compliance metrics for every cluster. `*_imputed` flags record which
/// values were drawn rather than observed.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletedDataset {
    /// Per cluster.
    pub treated: Vec<bool>,
    pub strata: Vec<usize>,
    pub compliance: Vec<Vec<f64>>,
    pub compliance_imputed: Vec<bool>,
    /// Per individual.
    pub cluster_of: Vec<usize>,
    pub uptake: Vec<bool>,
    pub uptake_imputed: Vec<bool>,
    /// Outcome under assignment to treatment, Y(1, D).
    pub y_treated: Vec<f64>,
    /// Outcome under assignment to control, Y(0, D).
    pub y_control: Vec<f64>,
    pub y_treated_imputed: Vec<bool>,
    pub y_control_imputed: Vec<bool>,
}

impl CompletedDataset {
    pub fn n_clusters(&self) -> usize {
        self.treated.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.uptake.len()
    }

    /// Y(1, D) − Y(0, D) for individual `j`.
    pub fn treatment_effect(&self, j: usize) -> f64 {
        self.y_treated[j] - self.y_control[j]
    }

    /// Write the completed data as two CSV tables mirroring the input
    /// schemas, with provenance columns marking imputed values. Covariates
    /// are taken from the source dataset, so this is only valid for a
    /// completion of `data` itself (not for stacked synthetic replicates).
    pub fn write_dir(&self, data: &TrialDataset, dir: &Path) -> Result<()> {
        if self.n_clusters() != data.n_clusters()
            || self.n_individuals() != data.n_individuals()
        {
            return Err(Error::Domain(
                "completed data does not match the source dataset".into(),
            ));
        }
        std::fs::create_dir_all(dir)?;
        let prov = |imputed: bool| if imputed { "imputed" } else { "observed" };

        let mut w = BufWriter::new(File::create(dir.join("completed_clusters.csv"))?);
        write!(w, "cluster_id,W")?;
        for p in 0..data.n_cluster_covariates() {
            write!(w, ",Z{}", p + 1)?;
        }
        for l in 0..data.n_compliance_metrics() {
            write!(w, ",C{}", l + 1)?;
        }
        writeln!(w, ",S,provenance_c")?;
        for (i, c) in data.clusters().iter().enumerate() {
            write!(w, "{},{}", c.id, if c.treated { 1 } else { 0 })?;
            for z in &c.z {
                write!(w, ",{z}")?;
            }
            for v in &self.compliance[i] {
                write!(w, ",{v}")?;
            }
            writeln!(
                w,
                ",{},{}",
                self.strata[i] + 1,
                prov(self.compliance_imputed[i])
            )?;
        }
        w.flush()?;

        let mut w = BufWriter::new(File::create(dir.join("completed_individuals.csv"))?);
        write!(w, "cluster_id")?;
        for m in 0..data.n_individual_covariates() {
            write!(w, ",X{}", m + 1)?;
        }
        writeln!(
            w,
            ",D,provenance_d,Y1,provenance_y1,Y0,provenance_y0"
        )?;
        for (j, ind) in data.individuals().iter().enumerate() {
            write!(w, "{}", ind.cluster_id)?;
            for x in &ind.x {
                write!(w, ",{x}")?;
            }
            writeln!(
                w,
                ",{},{},{},{},{},{}",
                if self.uptake[j] { 1 } else { 0 },
                prov(self.uptake_imputed[j]),
                self.y_treated[j],
                prov(self.y_treated_imputed[j]),
                self.y_control[j],
                prov(self.y_control_imputed[j]),
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Draw one outcome value from the family's observation model.
fn draw_outcome(
    family: OutcomeFamily,
    mean: f64,
    sigma_sq: f64,
    rng: &mut impl Rng,
) -> f64 {
    match family {
        OutcomeFamily::Gaussian => sample_normal(rng, mean, sigma_sq.sqrt()),
        OutcomeFamily::BinaryProbit => {
            if sample_bernoulli(rng, normal_cdf(mean)) {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Complete the study units at one posterior draw: every individual's
/// unobserved arm is drawn from N(mean structure of that arm, σ_k²) (or
/// the probit equivalent), using the draw's stratum labels, uptake types,
/// and cluster effects. Observed values are carried over exactly.
pub fn impute_y_mis(
    theta: &ParameterState,
    latent: &LatentState,
    data: &TrialDataset,
    config: &ModelConfig,
    rng: &mut impl Rng,
) -> Result<CompletedDataset> {
    if !latent.conforms_to(data, config.n_strata) {
        return Err(Error::Domain(
            "latent state does not conform to the dataset".into(),
        ));
    }
    let n = data.n_individuals();
    let i_n = data.n_clusters();
    let family = config.outcome_family;

    let mut out = CompletedDataset {
        treated: data.clusters().iter().map(|c| c.treated).collect(),
        strata: latent.strata.clone(),
        compliance: latent.c.clone(),
        compliance_imputed: data
            .clusters()
            .iter()
            .map(|c| !c.compliance.is_observed())
            .collect(),
        cluster_of: data.individuals().iter().map(|d| d.cluster_index).collect(),
        uptake: latent.d.clone(),
        uptake_imputed: data
            .individuals()
            .iter()
            .map(|d| !d.uptake.is_observed())
            .collect(),
        y_treated: vec![0.0; n],
        y_control: vec![0.0; n],
        y_treated_imputed: vec![false; n],
        y_control_imputed: vec![false; n],
    };
    debug_assert_eq!(out.treated.len(), i_n);

    for (j, ind) in data.individuals().iter().enumerate() {
        let i = ind.cluster_index;
        let k = latent.strata[i];
        let d = latent.d[j];
        let x = data.standardized_x(j);
        let w = data.clusters()[i].treated;

        // The unit's own arm: the observed outcome, or the chain's imputed
        // value for an incidentally missing one.
        let (own, own_imputed) = match ind.outcome {
            Observation::Observed(y) => (y, false),
            Observation::Missing(_) => {
                let y = match latent.y_mis[j] {
                    Some(v) => v,
                    None => {
                        let mean = theta.outcome_mean(w, d, &x, k, i);
                        draw_outcome(family, mean, theta.sigma_sq[k], rng)
                    }
                };
                (y, true)
            }
        };
        // The opposite arm: always drawn from its conditional. The mean
        // uses the opposite arm's structure with the same uptake type —
        // never the unit's own observed outcome.
        let opp_mean = theta.outcome_mean(!w, d, &x, k, i);
        let opp = draw_outcome(family, opp_mean, theta.sigma_sq[k], rng);

        if w {
            out.y_treated[j] = own;
            out.y_treated_imputed[j] = own_imputed;
            out.y_control[j] = opp;
            out.y_control_imputed[j] = true;
        } else {
            out.y_control[j] = own;
            out.y_control_imputed[j] = own_imputed;
            out.y_treated[j] = opp;
            out.y_treated_imputed[j] = true;
        }
    }
    Ok(out)
}

/// `R` stacked synthetic trials of fresh clusters drawn at a fixed θ.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperPopReplicate {
    pub n_replicates: usize,
    /// All replicates stacked: clusters `r·I .. (r+1)·I` form replicate `r`.
    pub completed: CompletedDataset,
    /// Replicate index of each synthetic cluster.
    pub replicate_of: Vec<usize>,
    /// Study individual whose covariates each synthetic individual reuses.
    pub source_x: Vec<usize>,
}

/// Draw `r_reps` synthetic copies of the study design from θ. Per cluster:
/// stratum from π, cluster covariates from the stratum's mixture
/// component, fresh cluster effects from N(0, τ²), then per individual a
/// resampled covariate row, an uptake type from the probit model, and both
/// potential outcomes.
pub fn generate_superpop(
    theta: &ParameterState,
    latent: Option<&LatentState>,
    data: &TrialDataset,
    config: &ModelConfig,
    r_reps: usize,
    rng: &mut impl Rng,
) -> Result<SuperPopReplicate> {
    if r_reps == 0 {
        return Err(Error::Domain(
            "at least one super-population replicate is required".into(),
        ));
    }
    let i_n = data.n_clusters();
    let n = data.n_individuals();
    let family = config.outcome_family;
    let k_strata = config.n_strata;
    let l = data.n_compliance_metrics();

    // Covariate pools: indices of study individuals, pooled or one pool
    // per stratum label of the draw.
    let stratum_pools: Option<Vec<Vec<usize>>> = match config.covariate_distribution {
        CovariateDistribution::Pooled => None,
        CovariateDistribution::ByStratum => {
            let latent = latent.ok_or_else(|| {
                Error::Config(
                    "stratum-specific covariate resampling needs the draw's latent state"
                        .into(),
                )
            })?;
            let mut pools = vec![Vec::new(); k_strata];
            for (j, ind) in data.individuals().iter().enumerate() {
                pools[latent.strata[ind.cluster_index]].push(j);
            }
            Some(pools)
        }
    };
    let x_rows: Vec<Vec<f64>> = (0..n).map(|j| data.standardized_x(j)).collect();

    let dists: Vec<MvNormal> = theta
        .strata_means
        .iter()
        .map(|m| MvNormal::new(m.clone(), theta.sigma.clone()))
        .collect::<Result<_>>()?;
    let ln_pi: Vec<f64> = theta.pi.iter().map(|p| p.ln()).collect();
    let sizes: Vec<usize> = (0..i_n).map(|i| data.span(i).len()).collect();
    let study_treated: Vec<bool> = data.clusters().iter().map(|c| c.treated).collect();

    let total_clusters = r_reps * i_n;
    let total_n = r_reps * n;
    let mut out = CompletedDataset {
        treated: Vec::with_capacity(total_clusters),
        strata: Vec::with_capacity(total_clusters),
        compliance: Vec::with_capacity(total_clusters),
        compliance_imputed: vec![true; total_clusters],
        cluster_of: Vec::with_capacity(total_n),
        uptake: Vec::with_capacity(total_n),
        uptake_imputed: vec![true; total_n],
        y_treated: Vec::with_capacity(total_n),
        y_control: Vec::with_capacity(total_n),
        y_treated_imputed: vec![true; total_n],
        y_control_imputed: vec![true; total_n],
    };
    let mut replicate_of = Vec::with_capacity(total_clusters);
    let mut source_x = Vec::with_capacity(total_n);

    for r in 0..r_reps {
        for i in 0..i_n {
            let cluster_index = r * i_n + i;
            let k = sample_categorical_ln(rng, &ln_pi)?;
            let cz = dists[k].sample(rng);
            let phi_d = sample_normal(rng, 0.0, theta.tau_d_sq.sqrt());
            let phi_y = sample_normal(rng, 0.0, theta.tau_y_sq.sqrt());

            out.treated.push(study_treated[i]);
            out.strata.push(k);
            out.compliance.push(cz.as_slice()[..l].to_vec());
            replicate_of.push(r);

            let pool: &[usize] = match &stratum_pools {
                Some(pools) if !pools[k].is_empty() => &pools[k],
                _ => &[],
            };
            for _ in 0..sizes[i] {
                let j_src = if pool.is_empty() {
                    rng.random_range(0..n)
                } else {
                    pool[rng.random_range(0..pool.len())]
                };
                let x = &x_rows[j_src];
                let d = sample_bernoulli(
                    rng,
                    normal_cdf(theta.compliance_lp_core(x, k) + phi_d),
                );
                let y1 = draw_outcome(
                    family,
                    theta.outcome_mean_core(true, d, x, k) + phi_y,
                    theta.sigma_sq[k],
                    rng,
                );
                let y0 = draw_outcome(
                    family,
                    theta.outcome_mean_core(false, d, x, k) + phi_y,
                    theta.sigma_sq[k],
                    rng,
                );
                out.cluster_of.push(cluster_index);
                out.uptake.push(d);
                out.y_treated.push(y1);
                out.y_control.push(y0);
                source_x.push(j_src);
            }
        }
    }

    Ok(SuperPopReplicate {
        n_replicates: r_reps,
        completed: out,
        replicate_of,
        source_x,
    })
}
