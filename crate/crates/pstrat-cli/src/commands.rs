//! The four subcommand pipelines.
//!
//! Each command is a thin orchestration layer over the library: it loads
//! inputs, dispatches chains or replications to a worker pool, and writes
//! machine-readable outputs plus a reproducibility manifest into the output
//! directory. Progress goes to standard error only, so stdout stays clean
//! for shell composition and every artifact lands in a file.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use pstrat::data::{load_trial, write_trial, TrialDataset};
use pstrat::diagnostics::{detect_label_switching, gelman_rubin, pppv_table, write_pppv_csv};
use pstrat::draws::{flatten_parameters, PosteriorDraws};
use pstrat::estimands::{
    closed_form_superpop, montecarlo_superpop, summarize_posterior, DrawEstimands,
};
use pstrat::gibbs::run_chain;
use pstrat::model::{ModelConfig, OutcomeFamily};
use pstrat::rng::RngStream;
use pstrat::simulate::{
    generate_case_study, run_replication_study, true_estimands, CaseStudySpec,
    ReplicationOptions,
};
use pstrat::{Error, Result};

use crate::config::{EstimandMode, EstimandSection, Manifest, RunConfig};

/// Fit the model and write report, diagnostics, and draw files.
pub fn cmd_analyze(
    cfg: &RunConfig,
    clusters: &Path,
    individuals: &Path,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let data = load_trial(clusters, individuals)?;
    eprintln!(
        "loaded {} clusters / {} individuals",
        data.n_clusters(),
        data.n_individuals()
    );

    let model = cfg.model.to_model_config();
    model.validate()?;
    let priors = cfg.priors.to_prior_spec(model.n_strata, data.cz_dim());
    priors.validate(&model, data.cz_dim())?;
    if cfg.chain.n_chains == 0 {
        return Err(Error::Config("n_chains must be at least 1".into()));
    }

    eprintln!(
        "running {} chain(s): {} sweeps, burn-in {}, thin {}",
        cfg.chain.n_chains, cfg.chain.n_iterations, cfg.chain.burn_in, cfg.chain.thin
    );
    let chains: Vec<PosteriorDraws> = in_pool(cfg.jobs, || {
        (0..cfg.chain.n_chains)
            .into_par_iter()
            .map(|i| {
                let opts = cfg.chain.to_chain_options(cfg.seed, i);
                let draws = run_chain(&data, &model, &priors, &opts)?;
                eprintln!(
                    "chain {}: {} retained draws (label-switch rate {:.3})",
                    i + 1,
                    draws.len(),
                    draws.meta.label_switch_rate
                );
                Ok(draws)
            })
            .collect()
    })?;

    let per_chain_est = all_chain_estimands(&chains, &data, &model, &cfg.estimands, cfg.seed)?;
    let pooled: Vec<DrawEstimands> = per_chain_est.iter().flatten().cloned().collect();
    let report = summarize_posterior(&pooled)?;
    report.write_csv(&out.join("report.csv"))?;
    std::fs::write(out.join("report.txt"), report.render_table())?;
    eprint!("{}", report.render_table());

    let rhat = rhat_rows(&chains, &per_chain_est);
    write_rhat_csv(&rhat, &out.join("rhat.csv"))?;
    if let Some(m) = max_rhat(&rhat) {
        eprintln!("largest R-hat: {m:.4} across {} quantities", rhat.len());
    }

    write_label_switch_csv(&chains, &out.join("label_switching.csv"))?;

    if chains.iter().all(|c| !c.latents.is_empty()) {
        let merged = merge_chains(&chains);
        let rows = pppv_table(&merged, &data, &model, cfg.seed)?;
        write_pppv_csv(&rows, &out.join("pppv.csv"))?;
    }

    for (i, ch) in chains.iter().enumerate() {
        ch.write_dir(out.join(format!("chain_{}", i + 1)), &data)?;
    }
    let inputs = vec![display(clusters), display(individuals)];
    Manifest::new("analyze", inputs, cfg)?.write(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Generate a synthetic benchmark trial plus its ground-truth tables.
pub fn cmd_simulate(cfg: &RunConfig, case: u8, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let spec = CaseStudySpec::case(case)?;
    let sim = generate_case_study(spec, cfg.seed)?;
    write_trial(
        &sim.data,
        &out.join("clusters.csv"),
        &out.join("individuals.csv"),
    )?;
    let truth_dir = out.join("truth");
    sim.truth.write_dir(&sim.data, &truth_dir)?;

    // The dispersion matrix actually drawn for this dataset, for reference.
    let mut w = BufWriter::new(File::create(truth_dir.join("cz_covariance.csv"))?);
    for r in 0..sim.cz_cov.nrows() {
        let row: Vec<String> = (0..sim.cz_cov.ncols())
            .map(|c| format!("{}", sim.cz_cov[(r, c)]))
            .collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;

    Manifest::new("simulate", vec![format!("case={case}")], cfg)?.write(out)?;
    eprintln!(
        "case {case}, seed {}: wrote {} clusters / {} individuals to {}",
        cfg.seed,
        sim.data.n_clusters(),
        sim.data.n_individuals(),
        out.display()
    );
    Ok(())
}

/// Measure operating characteristics over repeated simulated trials.
pub fn cmd_replicate(cfg: &RunConfig, case: u8, reps: usize, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)?;
    eprintln!(
        "evaluating ground truth over {} synthetic clusters",
        cfg.replicate.truth_replicates
    );
    let truth = true_estimands(case, cfg.replicate.truth_replicates, cfg.seed)?;
    write_truth_csv(&truth, &out.join("truth.csv"))?;

    eprintln!(
        "running {} replications ({} sweeps, burn-in {}, thin {})",
        reps, cfg.chain.n_iterations, cfg.chain.burn_in, cfg.chain.thin
    );
    let options = ReplicationOptions {
        n_reps: reps,
        n_iterations: cfg.chain.n_iterations,
        burn_in: cfg.chain.burn_in,
        thin: cfg.chain.thin,
        seed: cfg.seed,
        jobs: (cfg.jobs > 0).then_some(cfg.jobs),
    };
    let oc = run_replication_study(case, &options, &truth)?;
    oc.write_csv(&out.join("oc.csv"))?;
    for r in &oc.rows {
        eprintln!(
            "  {:<8} coverage {:5.1}%  bias {:+.3}  rmse {:.3}",
            r.estimand, r.coverage_pct, r.bias, r.rmse
        );
    }
    let inputs = vec![format!("case={case}"), format!("reps={reps}")];
    Manifest::new("replicate", inputs, cfg)?.write(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

/// Recompute convergence and calibration diagnostics from stored draws.
pub fn cmd_diagnose(
    cfg: &RunConfig,
    draws_dir: &Path,
    clusters: &Path,
    individuals: &Path,
    out: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let data = load_trial(clusters, individuals)?;
    let dirs = find_chain_dirs(draws_dir)?;
    eprintln!("reading {} chain(s) under {}", dirs.len(), draws_dir.display());
    let chains: Vec<PosteriorDraws> = dirs
        .iter()
        .map(|d| PosteriorDraws::read_dir(d, &data))
        .collect::<Result<_>>()?;
    let model = chains[0].meta.config;
    if chains.iter().any(|c| c.meta.config != model) {
        return Err(Error::data(
            "chain directories disagree on the model configuration",
        ));
    }

    let per_chain_est = all_chain_estimands(&chains, &data, &model, &cfg.estimands, cfg.seed)?;
    let rhat = rhat_rows(&chains, &per_chain_est);
    write_rhat_csv(&rhat, &out.join("rhat.csv"))?;
    match max_rhat(&rhat) {
        Some(m) => eprintln!("largest R-hat: {m:.4} across {} quantities", rhat.len()),
        None => eprintln!("R-hat undefined (need at least two chains with varying draws)"),
    }

    write_label_switch_csv(&chains, &out.join("label_switching.csv"))?;

    if chains.iter().all(|c| !c.latents.is_empty()) {
        let merged = merge_chains(&chains);
        let rows = pppv_table(&merged, &data, &model, cfg.seed)?;
        write_pppv_csv(&rows, &out.join("pppv.csv"))?;
    } else {
        eprintln!("draws were stored without latent snapshots; skipping predictive checks");
    }

    let inputs = vec![display(draws_dir), display(clusters), display(individuals)];
    Manifest::new("diagnose", inputs, cfg)?.write(out)?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

/// Run `f` on the global worker pool (`jobs == 0`) or on a dedicated pool of
/// `jobs` threads.
fn in_pool<T, F>(jobs: usize, f: F) -> Result<T>
where
    T: Send,
    F: FnOnce() -> Result<T> + Send,
{
    if jobs == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("cannot build a {jobs}-thread worker pool: {e}")))?;
    pool.install(f)
}

/// Population-level estimands for every retained draw of one chain.
///
/// `Auto` routes Gaussian outcomes to the closed forms and binary outcomes
/// to simulated replicate populations; forcing `closed_form` on a binary
/// model is rejected by the library. Simulation draws get a deterministic
/// stream per (chain, draw) so reruns reproduce the report bit for bit.
fn draw_estimands_for_chain(
    chain: &PosteriorDraws,
    chain_index: usize,
    data: &TrialDataset,
    model: &ModelConfig,
    est: &EstimandSection,
    seed: u64,
) -> Result<Vec<DrawEstimands>> {
    let use_closed = match est.mode {
        EstimandMode::Auto => model.outcome_family == OutcomeFamily::Gaussian,
        EstimandMode::ClosedForm => true,
        EstimandMode::Montecarlo => false,
    };
    if !use_closed && est.monte_carlo_replicates == 0 {
        return Err(Error::Config(
            "monte_carlo_replicates must be at least 1".into(),
        ));
    }
    let base = RngStream::new(seed);
    chain
        .params
        .iter()
        .enumerate()
        .map(|(t, theta)| {
            let latent = chain.latents.get(t);
            if use_closed {
                closed_form_superpop(theta, latent, data, model)
            } else {
                let id = 0xE571_0000_0000_0000_u64
                    | ((chain_index as u64) << 32)
                    | (t as u64 & 0xFFFF_FFFF);
                let mut rng = base.substream(id);
                montecarlo_superpop(
                    theta,
                    latent,
                    data,
                    model,
                    est.monte_carlo_replicates,
                    &mut rng,
                )
            }
        })
        .collect()
}

fn all_chain_estimands(
    chains: &[PosteriorDraws],
    data: &TrialDataset,
    model: &ModelConfig,
    est: &EstimandSection,
    seed: u64,
) -> Result<Vec<Vec<DrawEstimands>>> {
    chains
        .iter()
        .enumerate()
        .map(|(c, ch)| draw_estimands_for_chain(ch, c, data, model, est, seed))
        .collect()
}

/// One potential-scale-reduction entry; `value` is `None` where the
/// statistic is undefined (single chain, or a quantity constant within and
/// across chains, e.g. a variance pinned by the binary family).
pub struct RhatRow {
    pub quantity: String,
    pub value: Option<f64>,
}

/// Estimand row labels in report order.
fn estimand_labels(n_strata: usize) -> Vec<String> {
    let mut v = vec!["ITT".to_string()];
    v.extend((1..=n_strata).map(|k| format!("ITT_{k}")));
    v.push("CACE".to_string());
    v.extend((1..=n_strata).map(|k| format!("CACE_{k}")));
    v
}

/// Effect value of estimand row `idx` (in [`estimand_labels`] order).
fn effect_at(d: &DrawEstimands, idx: usize, n_strata: usize) -> Option<f64> {
    let arm = if idx == 0 {
        d.itt.as_ref()
    } else if idx <= n_strata {
        d.itt_k[idx - 1].as_ref()
    } else if idx == n_strata + 1 {
        d.cace.as_ref()
    } else {
        d.cace_k[idx - n_strata - 2].as_ref()
    };
    arm.map(|a| a.effect())
}

/// R-hat for every scalar parameter and every estimand.
fn rhat_rows(chains: &[PosteriorDraws], ests: &[Vec<DrawEstimands>]) -> Vec<RhatRow> {
    let dims = &chains[0].meta.dims;
    let names = dims.scalar_names();
    let flat: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|ch| {
            ch.params
                .iter()
                .map(|p| flatten_parameters(p, dims))
                .collect()
        })
        .collect();

    let mut rows = Vec::with_capacity(names.len() + 2 * chains[0].meta.config.n_strata + 2);
    for (j, name) in names.iter().enumerate() {
        let series: Vec<Vec<f64>> = flat
            .iter()
            .map(|m| m.iter().map(|r| r[j]).collect())
            .collect();
        rows.push(RhatRow {
            quantity: name.clone(),
            value: gelman_rubin(&series).ok(),
        });
    }

    let k = chains[0].meta.config.n_strata;
    for (idx, label) in estimand_labels(k).into_iter().enumerate() {
        let series: Option<Vec<Vec<f64>>> = ests
            .iter()
            .map(|chain_est| {
                chain_est
                    .iter()
                    .map(|d| effect_at(d, idx, k))
                    .collect::<Option<Vec<f64>>>()
            })
            .collect();
        let value = series.and_then(|s| gelman_rubin(&s).ok());
        rows.push(RhatRow {
            quantity: label,
            value,
        });
    }
    rows
}

fn max_rhat(rows: &[RhatRow]) -> Option<f64> {
    rows.iter()
        .filter_map(|r| r.value)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

fn write_rhat_csv(rows: &[RhatRow], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "quantity,rhat")?;
    for r in rows {
        match r.value {
            Some(v) => writeln!(w, "{},{v}", r.quantity)?,
            None => writeln!(w, "{},", r.quantity)?,
        }
    }
    w.flush()?;
    Ok(())
}

/// Per-chain label-stability report: the switch rate recorded while the
/// chain ran (over raw labels) and a re-detection over the stored,
/// relabeled stratum-mean trajectories (0 unless relabeling was disabled or
/// ties defeated the ordering).
fn write_label_switch_csv(chains: &[PosteriorDraws], path: &Path) -> Result<()> {
    let trajectories: Vec<Vec<Vec<f64>>> = chains
        .iter()
        .map(|ch| {
            ch.params
                .iter()
                .map(|p| p.strata_means.iter().map(|m| m[0]).collect())
                .collect()
        })
        .collect();
    let detected = detect_label_switching(&trajectories);

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "chain,relabel_rate,post_relabel_rate,modal_permutation")?;
    for (i, (ch, rep)) in chains.iter().zip(&detected.per_chain).enumerate() {
        let perm: Vec<String> = rep.modal_permutation.iter().map(|x| x.to_string()).collect();
        writeln!(
            w,
            "{},{},{},{}",
            i + 1,
            ch.meta.label_switch_rate,
            rep.switch_rate(),
            perm.join(" ")
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Pool chains into one draw set (for predictive checks, which treat draws
/// as an unordered sample).
fn merge_chains(chains: &[PosteriorDraws]) -> PosteriorDraws {
    PosteriorDraws {
        params: chains.iter().flat_map(|c| c.params.clone()).collect(),
        latents: chains.iter().flat_map(|c| c.latents.clone()).collect(),
        meta: chains[0].meta.clone(),
    }
}

fn write_truth_csv(truth: &pstrat::simulate::TrueEstimands, path: &Path) -> Result<()> {
    let labels = estimand_labels(truth.itt_k.len());
    let values = truth.row_values();
    let mut ses = vec![truth.itt_se];
    ses.extend(&truth.itt_k_se);
    ses.push(truth.cace_se);
    ses.extend(&truth.cace_k_se);

    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "estimand,value,mc_se")?;
    for ((l, v), s) in labels.iter().zip(&values).zip(&ses) {
        writeln!(w, "{l},{v},{s}")?;
    }
    w.flush()?;
    Ok(())
}

/// Locate chain directories: either `root` itself holds draw tables, or its
/// `chain_*` subdirectories do.
fn find_chain_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join("params.csv").is_file() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_dir()
                && p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("chain_"))
                && p.join("params.csv").is_file()
        })
        .collect();
    // Numeric-friendly order for chain_1 … chain_10.
    dirs.sort_by_key(|p| {
        (
            p.file_name().map_or(0, |n| n.len()),
            p.as_os_str().to_os_string(),
        )
    });
    if dirs.is_empty() {
        return Err(Error::data(format!(
            "no draw tables found under {} (expected params.csv or chain_*/params.csv)",
            root.display()
        )));
    }
    Ok(dirs)
}
