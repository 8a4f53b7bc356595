//! Treatment-effect estimands and their posterior summaries.
//!
//! Three per-draw computations, one summarizer:
//!
//! * [`finite_sample_estimands`] — plug-in averages of Y(1)−Y(0) over a
//!   completed dataset's index sets (everyone; per stratum; compliers;
//!   compliers per stratum). Used for finite-population estimands on the
//!   study units and, applied to stacked synthetic replicates, as the
//!   Monte-Carlo super-population evaluator.
//! * [`closed_form_superpop`] — the Gaussian-family super-population
//!   estimands written directly as functions of θ, marginalizing the
//!   cluster effect out of the compliance probit analytically and
//!   averaging covariates over the study's empirical distribution.
//! * [`montecarlo_superpop`] — the simulation counterpart: draw synthetic
//!   replicates at θ and average; works for both outcome families.
//! * [`summarize_posterior`] — per-estimand posterior mean / SD / central
//!   and highest-density 95% intervals across draws, with undefined draws
//!   (empty complier sets) counted and excluded.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;

use crate::data::{LatentState, TrialDataset};
use crate::impute::{generate_superpop, CompletedDataset};
use crate::model::{CovariateDistribution, ModelConfig, OutcomeFamily, ParameterState};
use crate::special::normal_cdf;
use crate::{Error, Result};

/// Mean outcome under each assignment for one estimand's conditioning set.
/// The reported treatment effect is the difference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmMeans {
    pub treated: f64,
    pub control: f64,
}

impl ArmMeans {
    pub fn effect(&self) -> f64 {
        self.treated - self.control
    }
}

/// One draw's estimand values. `None` marks an estimand whose conditioning
/// set is empty for this draw (e.g. a stratum with no compliers).
#[derive(Debug, Clone, PartialEq)]
pub struct DrawEstimands {
    pub itt: Option<ArmMeans>,
    pub itt_k: Vec<Option<ArmMeans>>,
    pub cace: Option<ArmMeans>,
    pub cace_k: Vec<Option<ArmMeans>>,
}

impl DrawEstimands {
    pub fn n_strata(&self) -> usize {
        self.itt_k.len()
    }
}

fn mean_pair(sum1: f64, sum0: f64, count: f64) -> Option<ArmMeans> {
    (count > 0.0).then(|| ArmMeans {
        treated: sum1 / count,
        control: sum0 / count,
    })
}

/// Plug-in averages of the completed potential outcomes: intention-to-treat
/// over everyone and per stratum, complier effects over the uptake-positive
/// units and per stratum. Empty conditioning sets yield `None`.
pub fn finite_sample_estimands(completed: &CompletedDataset, n_strata: usize) -> DrawEstimands {
    let mut all = (0.0, 0.0, 0.0);
    let mut all_c = (0.0, 0.0, 0.0);
    let mut per_k = vec![(0.0, 0.0, 0.0); n_strata];
    let mut per_k_c = vec![(0.0, 0.0, 0.0); n_strata];

    for j in 0..completed.n_individuals() {
        let k = completed.strata[completed.cluster_of[j]];
        let y1 = completed.y_treated[j];
        let y0 = completed.y_control[j];
        let add = |acc: &mut (f64, f64, f64)| {
            acc.0 += y1;
            acc.1 += y0;
            acc.2 += 1.0;
        };
        add(&mut all);
        add(&mut per_k[k]);
        if completed.uptake[j] {
            add(&mut all_c);
            add(&mut per_k_c[k]);
        }
    }

    DrawEstimands {
        itt: mean_pair(all.0, all.1, all.2),
        itt_k: per_k.iter().map(|a| mean_pair(a.0, a.1, a.2)).collect(),
        cace: mean_pair(all_c.0, all_c.1, all_c.2),
        cace_k: per_k_c.iter().map(|a| mean_pair(a.0, a.1, a.2)).collect(),
    }
}

/// Gaussian-family super-population estimands as explicit functions of θ.
///
/// For each study individual the cluster effect is integrated out of the
/// compliance probit, giving p_jk = Φ((μ_k^D + xα_k) / √(τ_D² + 1)); the
/// arm-specific outcome expectations then average over the covariate rows
/// and mix over strata with weights π. With stratum-restricted covariates
/// the stratum-k averages run over individuals in clusters the draw labels
/// k (falling back to the pooled rows when a stratum has none), which
/// requires the draw's latent state.
pub fn closed_form_superpop(
    theta: &ParameterState,
    latent: Option<&LatentState>,
    data: &TrialDataset,
    config: &ModelConfig,
) -> Result<DrawEstimands> {
    if config.outcome_family != OutcomeFamily::Gaussian {
        return Err(Error::Config(
            "closed-form super-population estimands require the Gaussian outcome family; \
             use the Monte-Carlo evaluator"
                .into(),
        ));
    }
    let k_strata = config.n_strata;
    let n = data.n_individuals();
    if n == 0 {
        return Err(Error::Domain("no individuals in the dataset".into()));
    }
    let x_rows: Vec<Vec<f64>> = (0..n).map(|j| data.standardized_x(j)).collect();
    let all_rows: Vec<usize> = (0..n).collect();
    let stratum_rows: Option<Vec<Vec<usize>>> = match config.covariate_distribution {
        CovariateDistribution::Pooled => None,
        CovariateDistribution::ByStratum => {
            let latent = latent.ok_or_else(|| {
                Error::Config(
                    "stratum-restricted covariate averaging needs the draw's latent state"
                        .into(),
                )
            })?;
            let mut rows = vec![Vec::new(); k_strata];
            for (j, ind) in data.individuals().iter().enumerate() {
                rows[latent.strata[ind.cluster_index]].push(j);
            }
            Some(rows)
        }
    };

    let scale = (theta.tau_d_sq + 1.0).sqrt();
    let dot = |x: &[f64], b: &[f64]| x.iter().zip(b).map(|(a, c)| a * c).sum::<f64>();

    // Per-stratum averages over the stratum's covariate rows.
    let mut itt_k = Vec::with_capacity(k_strata);
    let mut cace_k = Vec::with_capacity(k_strata);
    // Accumulators for the overall mixtures.
    let mut y1_mix = 0.0;
    let mut y0_mix = 0.0;
    let mut c1_mix = 0.0;
    let mut c0_mix = 0.0;
    let mut mass_mix = 0.0;

    for k in 0..k_strata {
        let rows: &[usize] = match &stratum_rows {
            Some(rows) if !rows[k].is_empty() => &rows[k],
            _ => &all_rows,
        };
        let n_k = rows.len() as f64;
        // Averages over the stratum's covariate distribution:
        //   base_k   = mean of μ_k + xβ₀k          (shared by both arms)
        //   p̄_k      = mean of p_jk                 (complier probability)
        //   pb1_k    = mean of p_jk · xβ₁k
        //   pb0_k    = mean of p_jk · xβ₀k          (for complier arm means)
        let mut base = 0.0;
        let mut p_bar = 0.0;
        let mut pb1 = 0.0;
        let mut pb0 = 0.0;
        for &j in rows {
            let x = &x_rows[j];
            let p = normal_cdf((theta.mu_d[k] + dot(x, &theta.alpha[k])) / scale);
            let xb0 = dot(x, &theta.beta0[k]);
            let xb1 = dot(x, &theta.beta1[k]);
            base += theta.mu_y[k] + xb0;
            p_bar += p;
            pb1 += p * xb1;
            pb0 += p * xb0;
        }
        base /= n_k;
        p_bar /= n_k;
        pb1 /= n_k;
        pb0 /= n_k;

        // Arm-specific expectations for a random unit of stratum k.
        let y1 = base + pb1 + p_bar * theta.delta1[k];
        let y0 = base + p_bar * theta.delta0[k];
        itt_k.push(Some(ArmMeans {
            treated: y1,
            control: y0,
        }));

        // Complier-conditional arm expectations within stratum k.
        if p_bar > 0.0 && p_bar.is_finite() {
            let c1 = theta.mu_y[k] + (pb0 + pb1) / p_bar + theta.delta1[k];
            let c0 = theta.mu_y[k] + pb0 / p_bar + theta.delta0[k];
            cace_k.push(Some(ArmMeans {
                treated: c1,
                control: c0,
            }));
            let w = theta.pi[k] * p_bar;
            c1_mix += w * c1;
            c0_mix += w * c0;
            mass_mix += w;
        } else {
            cace_k.push(None);
        }

        y1_mix += theta.pi[k] * y1;
        y0_mix += theta.pi[k] * y0;
    }

    let cace = (mass_mix > 0.0).then(|| ArmMeans {
        treated: c1_mix / mass_mix,
        control: c0_mix / mass_mix,
    });

    Ok(DrawEstimands {
        itt: Some(ArmMeans {
            treated: y1_mix,
            control: y0_mix,
        }),
        itt_k,
        cace,
        cace_k,
    })
}

/// Super-population estimands by simulation: draw `r_reps` synthetic copies
/// of the study at θ and apply the plug-in averages to the stacked result.
/// Works for both outcome families.
pub fn montecarlo_superpop(
    theta: &ParameterState,
    latent: Option<&LatentState>,
    data: &TrialDataset,
    config: &ModelConfig,
    r_reps: usize,
    rng: &mut impl Rng,
) -> Result<DrawEstimands> {
    let rep = generate_superpop(theta, latent, data, config, r_reps, rng)?;
    Ok(finite_sample_estimands(&rep.completed, config.n_strata))
}

/// Posterior summary of one estimand across draws.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarSummary {
    /// Posterior means of the per-arm outcome levels.
    pub treated_mean: f64,
    pub control_mean: f64,
    /// Posterior mean and SD of the treatment effect.
    pub mean: f64,
    pub sd: f64,
    /// Central 95% interval (2.5% and 97.5% quantiles).
    pub central: (f64, f64),
    /// 95% highest-density interval (shortest window of sorted draws).
    pub hdi: (f64, f64),
    /// Draws the estimand was defined for / undefined for.
    pub n_draws: usize,
    pub n_undefined: usize,
}

/// Posterior estimand report: one summary per estimand plus between-strata
/// contrasts. Rows are `None` when fewer than two draws define them.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimandReport {
    pub itt: Option<ScalarSummary>,
    pub itt_k: Vec<Option<ScalarSummary>>,
    pub cace: Option<ScalarSummary>,
    pub cace_k: Vec<Option<ScalarSummary>>,
    /// Effect differences between strata pairs (a, b), a < b, as labeled
    /// contrasts ITT_a − ITT_b and CACE_a − CACE_b.
    pub itt_contrasts: Vec<(usize, usize, Option<ScalarSummary>)>,
    pub cace_contrasts: Vec<(usize, usize, Option<ScalarSummary>)>,
    pub n_draws: usize,
    /// Attached when the draw count is too small for stable intervals.
    pub warning: Option<String>,
}

/// Interpolated quantile (continuous, type-7) of pre-sorted values.
fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 >= n {
        sorted[n - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Shortest window containing ⌈0.95·n⌉ of the sorted draws.
fn hdi_sorted(sorted: &[f64]) -> (f64, f64) {
    let n = sorted.len();
    let w = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    let mut best = (sorted[0], sorted[n - 1]);
    let mut best_width = f64::INFINITY;
    for i in 0..=(n - w) {
        let width = sorted[i + w - 1] - sorted[i];
        if width < best_width {
            best_width = width;
            best = (sorted[i], sorted[i + w - 1]);
        }
    }
    best
}

/// Summarize one estimand's defined draws; `None` if fewer than two.
fn summarize_scalar(values: &[ArmMeans], n_undefined: usize) -> Option<ScalarSummary> {
    let n = values.len();
    if n < 2 {
        return None;
    }
    let effects: Vec<f64> = values.iter().map(|v| v.effect()).collect();
    let mean = effects.iter().sum::<f64>() / n as f64;
    let var = effects.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let mut sorted = effects;
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Some(ScalarSummary {
        treated_mean: values.iter().map(|v| v.treated).sum::<f64>() / n as f64,
        control_mean: values.iter().map(|v| v.control).sum::<f64>() / n as f64,
        mean,
        sd: var.sqrt(),
        central: (
            quantile_sorted(&sorted, 0.025),
            quantile_sorted(&sorted, 0.975),
        ),
        hdi: hdi_sorted(&sorted),
        n_draws: n,
        n_undefined,
    })
}

fn collect_row<'a>(
    draws: impl Iterator<Item = &'a Option<ArmMeans>>,
) -> (Vec<ArmMeans>, usize) {
    let mut defined = Vec::new();
    let mut undefined = 0;
    for d in draws {
        match d {
            Some(v) => defined.push(*v),
            None => undefined += 1,
        }
    }
    (defined, undefined)
}

/// Summarize per-draw estimand values into a posterior report with
/// between-strata contrasts. Requires at least two draws; attaches a
/// warning below twenty.
pub fn summarize_posterior(draws: &[DrawEstimands]) -> Result<EstimandReport> {
    if draws.len() < 2 {
        return Err(Error::Domain(
            "posterior summaries need at least two draws".into(),
        ));
    }
    let k_strata = draws[0].n_strata();
    if draws.iter().any(|d| d.n_strata() != k_strata) {
        return Err(Error::Domain(
            "draws disagree on the number of strata".into(),
        ));
    }

    let row = |it: &mut dyn Iterator<Item = &Option<ArmMeans>>| {
        let (defined, undefined) = collect_row(it);
        summarize_scalar(&defined, undefined)
    };
    let itt = row(&mut draws.iter().map(|d| &d.itt));
    let cace = row(&mut draws.iter().map(|d| &d.cace));
    let itt_k: Vec<_> = (0..k_strata)
        .map(|k| row(&mut draws.iter().map(|d| &d.itt_k[k])))
        .collect();
    let cace_k: Vec<_> = (0..k_strata)
        .map(|k| row(&mut draws.iter().map(|d| &d.cace_k[k])))
        .collect();

    // Contrasts: per draw, effect_a − effect_b where both are defined. The
    // difference is reported through the effect field; arm levels carry the
    // per-arm differences so the report renders consistently.
    let contrast = |field: &dyn Fn(&DrawEstimands) -> &Vec<Option<ArmMeans>>| {
        let mut out = Vec::new();
        for a in 0..k_strata {
            for b in (a + 1)..k_strata {
                let (defined, undefined) = collect_row(
                    &mut draws
                        .iter()
                        .map(|d| {
                            match (&field(d)[a], &field(d)[b]) {
                                (Some(x), Some(y)) => Some(ArmMeans {
                                    treated: x.treated - y.treated,
                                    control: x.control - y.control,
                                }),
                                _ => None,
                            }
                        })
                        .collect::<Vec<_>>()
                        .iter(),
                );
                out.push((a, b, summarize_scalar(&defined, undefined)));
            }
        }
        out
    };
    let itt_contrasts = contrast(&|d: &DrawEstimands| &d.itt_k);
    let cace_contrasts = contrast(&|d: &DrawEstimands| &d.cace_k);

    let warning = (draws.len() < 20).then(|| {
        format!(
            "only {} posterior draws: interval estimates are unstable",
            draws.len()
        )
    });

    Ok(EstimandReport {
        itt,
        itt_k,
        cace,
        cace_k,
        itt_contrasts,
        cace_contrasts,
        n_draws: draws.len(),
        warning,
    })
}

impl EstimandReport {
    fn rows(&self) -> Vec<(String, &Option<ScalarSummary>)> {
        let mut rows = vec![("ITT".to_string(), &self.itt)];
        for (k, s) in self.itt_k.iter().enumerate() {
            rows.push((format!("ITT_{}", k + 1), s));
        }
        rows.push(("CACE".to_string(), &self.cace));
        for (k, s) in self.cace_k.iter().enumerate() {
            rows.push((format!("CACE_{}", k + 1), s));
        }
        for (a, b, s) in &self.itt_contrasts {
            rows.push((format!("ITT_{}-ITT_{}", a + 1, b + 1), s));
        }
        for (a, b, s) in &self.cace_contrasts {
            rows.push((format!("CACE_{}-CACE_{}", a + 1, b + 1), s));
        }
        rows
    }

    /// Write the report as CSV (one row per estimand).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(
            w,
            "estimand,treated,control,effect,sd,central_lower,central_upper,\
             hdi_lower,hdi_upper,n_draws,n_undefined"
        )?;
        for (name, s) in self.rows() {
            match s {
                Some(s) => writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{}",
                    name,
                    s.treated_mean,
                    s.control_mean,
                    s.mean,
                    s.sd,
                    s.central.0,
                    s.central.1,
                    s.hdi.0,
                    s.hdi.1,
                    s.n_draws,
                    s.n_undefined
                )?,
                None => writeln!(w, "{name},,,,,,,,,0,{}", self.n_draws)?,
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Render the report as an aligned text table (treatment and control
    /// levels, effect, and the 95% highest-density interval).
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16}{:>10}{:>10}{:>10}  {:<20}\n",
            "Estimand", "Treated", "Control", "Effect", "95% HDI"
        ));
        for (name, s) in self.rows() {
            match s {
                Some(s) => out.push_str(&format!(
                    "{:<16}{:>10.3}{:>10.3}{:>10.3}  ({:.3}, {:.3})\n",
                    name, s.treated_mean, s.control_mean, s.mean, s.hdi.0, s.hdi.1
                )),
                None => out.push_str(&format!(
                    "{:<16}{:>10}{:>10}{:>10}  undefined in all draws\n",
                    name, "-", "-", "-"
                )),
            }
        }
        if let Some(warn) = &self.warning {
            out.push_str(&format!("note: {warn}\n"));
        }
        out
    }
}
