//! Convergence and model-fit diagnostics.
//!
//! * [`gelman_rubin`] — the potential-scale-reduction statistic over
//!   parallel chains of one scalar.
//! * [`detect_label_switching`] — flags retained iterations whose stratum
//!   ordering (by the first compliance-metric mean) departs from the
//!   chain's modal ordering.
//! * [`pppv`] — posterior predictive p-values for the within-stratum
//!   complier signal, noise, and signal-to-noise discrepancies: per
//!   retained draw, the study data completed under that draw is compared
//!   against a fresh replicate of the same design generated at the draw's
//!   parameters.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::TrialDataset;
use crate::draws::{flatten_parameters, ParameterDims, PosteriorDraws};
use crate::gibbs::{generate_trial, TrialShape};
use crate::impute::{impute_y_mis, CompletedDataset};
use crate::model::ModelConfig;
use crate::rng::RngStream;
use crate::{Error, Result};

/// Potential scale reduction over parallel chains of one scalar quantity.
///
/// Uses the classic between/within variance form, floored at 1 so that
/// identical chains report exactly 1.0 (the raw statistic dips below one
/// when the between-chain variance underestimates). Chains that are all
/// constant and offset from each other return infinity.
pub fn gelman_rubin(chains: &[Vec<f64>]) -> Result<f64> {
    let m = chains.len();
    if m < 2 {
        return Err(Error::Domain(
            "the scale-reduction statistic needs at least two chains".into(),
        ));
    }
    let n = chains[0].len();
    if n < 10 {
        return Err(Error::Domain(
            "chains must have at least 10 draws".into(),
        ));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Domain("chains must have equal lengths".into()));
    }

    let chain_means: Vec<f64> = chains
        .iter()
        .map(|c| c.iter().sum::<f64>() / n as f64)
        .collect();
    let grand = chain_means.iter().sum::<f64>() / m as f64;
    let within = chains
        .iter()
        .zip(&chain_means)
        .map(|(c, mu)| c.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (n - 1) as f64)
        .sum::<f64>()
        / m as f64;
    let between = chain_means
        .iter()
        .map(|mu| (mu - grand).powi(2))
        .sum::<f64>()
        * n as f64
        / (m - 1) as f64;

    if within == 0.0 {
        return if between == 0.0 {
            Err(Error::Domain(
                "all chains are constant: scale reduction is undefined".into(),
            ))
        } else {
            Ok(f64::INFINITY)
        };
    }
    let pooled = (n - 1) as f64 / n as f64 * within + between / n as f64;
    Ok((pooled / within).sqrt().max(1.0))
}

/// Label-switch report for one chain.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainLabelReport {
    /// The chain's most frequent stratum ordering (ascending first
    /// compliance-metric mean): `modal[r]` is the stratum holding rank `r`.
    pub modal_permutation: Vec<usize>,
    /// Retained iterations whose ordering differs from the modal one.
    pub flagged: Vec<usize>,
    pub n_iterations: usize,
}

impl ChainLabelReport {
    pub fn switch_rate(&self) -> f64 {
        if self.n_iterations == 0 {
            0.0
        } else {
            self.flagged.len() as f64 / self.n_iterations as f64
        }
    }
}

/// Label-switch report across chains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSwitchReport {
    pub per_chain: Vec<ChainLabelReport>,
}

impl LabelSwitchReport {
    /// Fraction of all retained iterations flagged, pooled over chains.
    pub fn overall_rate(&self) -> f64 {
        let total: usize = self.per_chain.iter().map(|c| c.n_iterations).sum();
        if total == 0 {
            return 0.0;
        }
        let flagged: usize = self.per_chain.iter().map(|c| c.flagged.len()).sum();
        flagged as f64 / total as f64
    }
}

/// Ascending order of the stratum means at one iteration.
fn ordering(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(std::cmp::Ordering::Equal));
    idx
}

/// Detect label switching from per-iteration stratum-mean trajectories:
/// `chains[c][t][k]` is stratum k's first compliance-metric mean at
/// retained iteration t of chain c. An iteration is flagged when its
/// stratum ordering differs from the chain's most frequent ordering.
pub fn detect_label_switching(chains: &[Vec<Vec<f64>>]) -> LabelSwitchReport {
    let per_chain = chains
        .iter()
        .map(|traj| {
            let orders: Vec<Vec<usize>> = traj.iter().map(|v| ordering(v)).collect();
            // Modal ordering by counting exact matches.
            let mut reps: Vec<(Vec<usize>, usize)> = Vec::new();
            for o in &orders {
                match reps.iter_mut().find(|(r, _)| r == o) {
                    Some((_, c)) => *c += 1,
                    None => reps.push((o.clone(), 1)),
                }
            }
            let modal = reps
                .iter()
                .max_by_key(|(_, c)| *c)
                .map(|(r, _)| r.clone())
                .unwrap_or_default();
            let flagged: Vec<usize> = orders
                .iter()
                .enumerate()
                .filter(|(_, o)| **o != modal)
                .map(|(t, _)| t)
                .collect();
            ChainLabelReport {
                modal_permutation: modal,
                flagged,
                n_iterations: traj.len(),
            }
        })
        .collect();
    LabelSwitchReport { per_chain }
}

/// Which within-stratum complier discrepancy to compute.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiscrepancyKind {
    /// |mean Y(1) − mean Y(0)| over the stratum's compliers.
    Signal,
    /// √(s₁²/N + s₀²/N) over the same units.
    Noise,
    /// Signal / Noise.
    SignalToNoise,
}

impl DiscrepancyKind {
    pub fn label(&self) -> &'static str {
        match self {
            DiscrepancyKind::Signal => "SI",
            DiscrepancyKind::Noise => "NO",
            DiscrepancyKind::SignalToNoise => "SINO",
        }
    }
}

/// A discrepancy measure: one kind evaluated on one stratum's compliers.
/// The conditioning set spans both arms — a complier's treated-arm value
/// is observed for treated units and completed for control units, and
/// vice versa, so the measure needs completed data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscrepancyMeasure {
    pub kind: DiscrepancyKind,
    pub stratum: usize,
}

impl DiscrepancyMeasure {
    /// Evaluate on completed data; `None` when the stratum has fewer than
    /// two compliers or (for the ratio) the noise term vanishes.
    pub fn compute(&self, completed: &CompletedDataset) -> Option<f64> {
        let mut y1 = Vec::new();
        let mut y0 = Vec::new();
        for j in 0..completed.n_individuals() {
            if completed.uptake[j]
                && completed.strata[completed.cluster_of[j]] == self.stratum
            {
                y1.push(completed.y_treated[j]);
                y0.push(completed.y_control[j]);
            }
        }
        let n = y1.len();
        if n < 2 {
            return None;
        }
        let nf = n as f64;
        let m1 = y1.iter().sum::<f64>() / nf;
        let m0 = y0.iter().sum::<f64>() / nf;
        let signal = (m1 - m0).abs();
        if self.kind == DiscrepancyKind::Signal {
            return Some(signal);
        }
        let s1 = y1.iter().map(|y| (y - m1).powi(2)).sum::<f64>() / (nf - 1.0);
        let s0 = y0.iter().map(|y| (y - m0).powi(2)).sum::<f64>() / (nf - 1.0);
        let noise = (s1 / nf + s0 / nf).sqrt();
        match self.kind {
            DiscrepancyKind::Noise => Some(noise),
            DiscrepancyKind::SignalToNoise => {
                (noise > 0.0 && noise.is_finite()).then(|| signal / noise)
            }
            DiscrepancyKind::Signal => unreachable!(),
        }
    }
}

/// Result of a posterior predictive check for one measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PppvResult {
    /// Fraction of usable draws with T_rep strictly greater than T_obs.
    pub p_value: f64,
    pub n_draws_used: usize,
    /// Draws skipped because the measure was undefined on either side.
    pub n_draws_skipped: usize,
}

/// Strict-inequality aggregation of (observed, replicated) discrepancy
/// pairs: ties count as not-greater.
pub fn pppv_from_pairs(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return f64::NAN;
    }
    pairs.iter().filter(|(obs, rep)| rep > obs).count() as f64 / pairs.len() as f64
}

/// 64-bit FNV-1a over the draw's parameter scalars, mixing in a caller
/// seed. Keying each draw's replicate generator to the draw's content (not
/// its position) makes the p-value invariant to permuting the draws.
fn draw_seed(base: u64, scalars: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ base;
    for v in scalars {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Posterior predictive p-value of one discrepancy measure.
///
/// Per retained draw: complete the study data under the draw's latent
/// state and parameters and evaluate T_obs; generate a replicate of the
/// same design (same assignment, sizes, covariates, missingness pattern,
/// and the draw's cluster effects) from the parameters, complete it, and
/// evaluate T_rep; return the fraction of draws with T_rep > T_obs.
/// Requires the chain to have retained latent states.
pub fn pppv(
    draws: &PosteriorDraws,
    data: &TrialDataset,
    config: &ModelConfig,
    measure: DiscrepancyMeasure,
    seed: u64,
) -> Result<PppvResult> {
    if draws.params.is_empty() {
        return Err(Error::Domain("no retained draws".into()));
    }
    if draws.latents.len() != draws.params.len() {
        return Err(Error::Config(
            "posterior predictive checks need retained latent states \
             (run the chain with keep_latents)"
                .into(),
        ));
    }
    if measure.stratum >= config.n_strata {
        return Err(Error::Config(format!(
            "stratum {} out of range for {} strata",
            measure.stratum, config.n_strata
        )));
    }
    let shape = TrialShape::of_dataset(data);
    let dims = ParameterDims::of(config, data);

    let outcomes: Vec<Result<Option<(f64, f64)>>> = draws
        .params
        .par_iter()
        .zip(draws.latents.par_iter())
        .map(|(theta, latent)| {
            let scalars = flatten_parameters(theta, &dims);
            let mut rng = RngStream::new(draw_seed(seed, &scalars));
            let obs_completed = impute_y_mis(theta, latent, data, config, &mut rng)?;
            let t_obs = measure.compute(&obs_completed);
            let (rep_data, rep_latent) =
                generate_trial(&shape, theta, config.outcome_family, &mut rng)?;
            let rep_completed =
                impute_y_mis(theta, &rep_latent, &rep_data, config, &mut rng)?;
            let t_rep = measure.compute(&rep_completed);
            Ok(match (t_obs, t_rep) {
                (Some(o), Some(r)) => Some((o, r)),
                _ => None,
            })
        })
        .collect();

    let mut pairs = Vec::with_capacity(draws.params.len());
    let mut skipped = 0usize;
    for o in outcomes {
        match o? {
            Some(pair) => pairs.push(pair),
            None => skipped += 1,
        }
    }
    if pairs.is_empty() {
        return Err(Error::Numeric(format!(
            "the discrepancy was undefined in all {} draws",
            draws.params.len()
        )));
    }
    Ok(PppvResult {
        p_value: pppv_from_pairs(&pairs),
        n_draws_used: pairs.len(),
        n_draws_skipped: skipped,
    })
}

/// One row of the posterior predictive table.
#[derive(Debug, Clone, PartialEq)]
pub struct PppvRow {
    pub measure: DiscrepancyKind,
    pub stratum: usize,
    pub result: PppvResult,
}

/// Evaluate all three measures for every stratum.
pub fn pppv_table(
    draws: &PosteriorDraws,
    data: &TrialDataset,
    config: &ModelConfig,
    seed: u64,
) -> Result<Vec<PppvRow>> {
    let mut rows = Vec::with_capacity(3 * config.n_strata);
    for kind in [
        DiscrepancyKind::Signal,
        DiscrepancyKind::Noise,
        DiscrepancyKind::SignalToNoise,
    ] {
        for stratum in 0..config.n_strata {
            let result = pppv(draws, data, config, DiscrepancyMeasure { kind, stratum }, seed)?;
            rows.push(PppvRow {
                measure: kind,
                stratum,
                result,
            });
        }
    }
    Ok(rows)
}

/// Write the posterior predictive rows as CSV.
pub fn write_pppv_csv(rows: &[PppvRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "measure,stratum,pppv,n_draws_used,n_draws_skipped")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{}",
            r.measure.label(),
            r.stratum + 1,
            r.result.p_value,
            r.result.n_draws_used,
            r.result.n_draws_skipped
        )?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::sample_std_normal;
    use crate::gibbs::{run_chain, ChainOptions};
    use crate::model::{OutcomeFamily, ParameterState, PriorSpec};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    #[test]
    fn identical_chains_report_exactly_one() {
        let mut rng = RngStream::new(60);
        let chain: Vec<f64> = (0..50).map(|_| sample_std_normal(&mut rng)).collect();
        let r = gelman_rubin(&[chain.clone(), chain.clone(), chain]).unwrap();
        assert!((r - 1.0).abs() < 1e-10, "R was {r}");
    }

    #[test]
    fn separated_chains_blow_up_the_statistic() {
        let mut rng = RngStream::new(61);
        let a: Vec<f64> = (0..200).map(|_| sample_std_normal(&mut rng)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + 100.0).collect();
        let r = gelman_rubin(&[a, b]).unwrap();
        assert!(r > 10.0, "R was {r}");
    }

    #[test]
    fn iid_chains_converge_to_one() {
        let mut rng = RngStream::new(62);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..10_000).map(|_| sample_std_normal(&mut rng)).collect())
            .collect();
        let r = gelman_rubin(&chains).unwrap();
        assert!(r < 1.01, "R was {r}");
    }

    #[test]
    fn scale_reduction_is_affinely_invariant() {
        let mut rng = RngStream::new(63);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..100).map(|_| sample_std_normal(&mut rng)).collect())
            .collect();
        let moved: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|x| -7.5 * x + 1234.0).collect())
            .collect();
        let r0 = gelman_rubin(&chains).unwrap();
        let r1 = gelman_rubin(&moved).unwrap();
        assert_relative_eq!(r0, r1, epsilon = 1e-10);
    }

    #[test]
    fn degenerate_chains_are_rejected_or_infinite() {
        // All chains constant at the same value: undefined.
        assert!(gelman_rubin(&[vec![2.0; 20], vec![2.0; 20]]).is_err());
        // Constant but different: infinite separation.
        let r = gelman_rubin(&[vec![0.0; 20], vec![1.0; 20]]).unwrap();
        assert!(r.is_infinite());
        // Structural errors.
        assert!(gelman_rubin(&[vec![1.0; 20]]).is_err());
        assert!(gelman_rubin(&[vec![1.0; 5], vec![2.0; 5]]).is_err());
        assert!(gelman_rubin(&[vec![1.0; 20], vec![2.0; 19]]).is_err());
    }

    #[test]
    fn well_separated_trajectories_never_flag() {
        let mut rng = RngStream::new(64);
        let traj: Vec<Vec<f64>> = (0..500)
            .map(|_| {
                vec![
                    -2.0 + 0.05 * sample_std_normal(&mut rng),
                    2.0 + 0.05 * sample_std_normal(&mut rng),
                ]
            })
            .collect();
        let report = detect_label_switching(&[traj]);
        assert_eq!(report.per_chain[0].flagged.len(), 0);
        assert_eq!(report.overall_rate(), 0.0);
        assert_eq!(report.per_chain[0].modal_permutation, vec![0, 1]);
    }

    #[test]
    fn exchangeable_trajectories_flag_often() {
        // Equal stratum means: the ordering is a coin flip each iteration,
        // so roughly half the iterations depart from the modal ordering.
        let mut rng = RngStream::new(65);
        let traj: Vec<Vec<f64>> = (0..2000)
            .map(|_| vec![sample_std_normal(&mut rng), sample_std_normal(&mut rng)])
            .collect();
        let report = detect_label_switching(&[traj]);
        let rate = report.per_chain[0].switch_rate();
        assert!(rate > 0.35 && rate < 0.65, "rate was {rate}");
    }

    #[test]
    fn label_detection_is_equivariant_to_relabeling() {
        let mut rng = RngStream::new(66);
        let traj: Vec<Vec<f64>> = (0..300)
            .map(|_| {
                vec![
                    sample_std_normal(&mut rng),
                    0.3 + sample_std_normal(&mut rng),
                    5.0 + 0.01 * sample_std_normal(&mut rng),
                ]
            })
            .collect();
        // Apply the fixed relabeling σ: new label 0 ← old 2, 1 ← old 0, 2 ← old 1.
        let perm = [2usize, 0, 1];
        let permuted: Vec<Vec<f64>> = traj
            .iter()
            .map(|v| perm.iter().map(|&old| v[old]).collect())
            .collect();
        let a = detect_label_switching(&[traj]);
        let b = detect_label_switching(&[permuted]);
        // The same iterations are flagged either way.
        assert_eq!(a.per_chain[0].flagged, b.per_chain[0].flagged);
        // The modal ordering maps through the relabeling: if old stratum s
        // held rank r, the new stratum holding rank r is σ⁻¹(s).
        let inv = |s: usize| perm.iter().position(|&o| o == s).unwrap();
        let mapped: Vec<usize> = a.per_chain[0]
            .modal_permutation
            .iter()
            .map(|&s| inv(s))
            .collect();
        assert_eq!(mapped, b.per_chain[0].modal_permutation);
    }

    #[test]
    fn ties_contribute_nothing_under_strict_inequality() {
        let pairs = vec![(1.0, 1.0); 50];
        assert_eq!(pppv_from_pairs(&pairs), 0.0);
        let mixed = vec![(1.0, 2.0), (1.0, 1.0), (1.0, 0.5), (1.0, 3.0)];
        assert_eq!(pppv_from_pairs(&mixed), 0.5);
    }

    fn demo_theta(n_clusters: usize) -> ParameterState {
        let config = ModelConfig::new(2);
        let priors = PriorSpec::diffuse(2, 2);
        let mut t = ParameterState::neutral(&config, &priors, 2, 1, n_clusters);
        t.strata_means = vec![
            DVector::from_column_slice(&[-2.0, -2.0]),
            DVector::from_column_slice(&[2.0, 2.0]),
        ];
        t.mu_d = vec![0.3, 0.6];
        t.alpha = vec![vec![-0.25], vec![-0.5]];
        t.tau_d_sq = 0.25;
        t.mu_y = vec![2.0, 4.0];
        t.beta0 = vec![vec![1.0], vec![2.0]];
        t.beta1 = vec![vec![1.0], vec![2.0]];
        t.delta0 = vec![1.0, 2.0];
        t.delta1 = vec![5.5, 7.5];
        t.sigma_sq = vec![4.0, 4.0];
        t.tau_y_sq = 1.0;
        t
    }

    fn model_generated_fit(seed: u64, sweeps: usize, burn: usize) -> (TrialDataset, PosteriorDraws) {
        let theta = demo_theta(10);
        let mut rng = RngStream::new(seed);
        let shape = TrialShape::complete(
            (0..10).map(|i| i % 2 == 0).collect(),
            vec![8; 10],
            (0..80).map(|_| vec![sample_std_normal(&mut rng)]).collect(),
            1,
            1,
        );
        let (data, _) =
            generate_trial(&shape, &theta, OutcomeFamily::Gaussian, &mut rng).unwrap();
        let config = ModelConfig::new(2);
        let priors = PriorSpec::diffuse(2, 2);
        let mut options = ChainOptions::new(sweeps, burn, seed ^ 0xABCD);
        options.keep_latents = true;
        let draws = run_chain(&data, &config, &priors, &options).unwrap();
        (data, draws)
    }

    #[test]
    fn sino_is_signal_over_noise_per_draw() {
        let (data, draws) = model_generated_fit(70, 40, 20);
        let config = ModelConfig::new(2);
        let theta = &draws.params[3];
        let latent = &draws.latents[3];
        let mut rng = RngStream::new(71);
        let completed = impute_y_mis(theta, latent, &data, &config, &mut rng).unwrap();
        for stratum in 0..2 {
            let si = DiscrepancyMeasure {
                kind: DiscrepancyKind::Signal,
                stratum,
            }
            .compute(&completed);
            let no = DiscrepancyMeasure {
                kind: DiscrepancyKind::Noise,
                stratum,
            }
            .compute(&completed);
            let sino = DiscrepancyMeasure {
                kind: DiscrepancyKind::SignalToNoise,
                stratum,
            }
            .compute(&completed);
            if let (Some(si), Some(no), Some(sino)) = (si, no, sino) {
                assert_relative_eq!(sino, si / no, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empty_complier_sets_are_undefined() {
        let completed = CompletedDataset {
            treated: vec![true, false],
            strata: vec![0, 1],
            compliance: vec![vec![0.0], vec![0.0]],
            compliance_imputed: vec![false, true],
            cluster_of: vec![0, 0, 1, 1],
            uptake: vec![false, false, true, true],
            uptake_imputed: vec![false; 4],
            y_treated: vec![1.0, 2.0, 3.0, 4.0],
            y_control: vec![0.0, 0.0, 0.0, 0.0],
            y_treated_imputed: vec![false; 4],
            y_control_imputed: vec![false; 4],
        };
        // Stratum 0 has no compliers; stratum 1 has two.
        assert!(DiscrepancyMeasure {
            kind: DiscrepancyKind::Signal,
            stratum: 0
        }
        .compute(&completed)
        .is_none());
        assert!(DiscrepancyMeasure {
            kind: DiscrepancyKind::Signal,
            stratum: 1
        }
        .compute(&completed)
        .is_some());
    }

    #[test]
    fn model_generated_data_yields_moderate_p_values() {
        let (data, draws) = model_generated_fit(72, 160, 60);
        let config = ModelConfig::new(2);
        let rows = pppv_table(&draws, &data, &config, 73).unwrap();
        assert_eq!(rows.len(), 6);
        for row in &rows {
            assert!(
                row.result.p_value > 0.005 && row.result.p_value < 0.995,
                "{} stratum {} p = {}",
                row.measure.label(),
                row.stratum,
                row.result.p_value
            );
            assert_eq!(
                row.result.n_draws_used + row.result.n_draws_skipped,
                draws.params.len()
            );
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pppv.csv");
        write_pppv_csv(&rows, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("SINO"));
    }

    #[test]
    fn p_values_are_invariant_to_draw_order() {
        let (data, draws) = model_generated_fit(74, 60, 30);
        let config = ModelConfig::new(2);
        let measure = DiscrepancyMeasure {
            kind: DiscrepancyKind::Signal,
            stratum: 1,
        };
        let forward = pppv(&draws, &data, &config, measure, 75).unwrap();
        let mut reversed_params = draws.params.clone();
        let mut reversed_latents = draws.latents.clone();
        reversed_params.reverse();
        reversed_latents.reverse();
        let reversed = PosteriorDraws {
            params: reversed_params,
            latents: reversed_latents,
            meta: draws.meta.clone(),
        };
        let backward = pppv(&reversed, &data, &config, measure, 75).unwrap();
        assert_eq!(forward.p_value, backward.p_value);
        assert_eq!(forward.n_draws_used, backward.n_draws_used);
    }

    #[test]
    fn chains_without_latents_are_rejected() {
        let (data, draws) = model_generated_fit(76, 30, 15);
        let config = ModelConfig::new(2);
        let stripped = PosteriorDraws {
            params: draws.params.clone(),
            latents: Vec::new(),
            meta: draws.meta.clone(),
        };
        let measure = DiscrepancyMeasure {
            kind: DiscrepancyKind::Signal,
            stratum: 0,
        };
        assert!(pppv(&stripped, &data, &config, measure, 77).is_err());
    }
}
