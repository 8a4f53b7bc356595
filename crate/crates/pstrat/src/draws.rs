//! Containers and on-disk persistence for retained posterior draws.
//!
//! A chain run produces one [`PosteriorDraws`]: the retained parameter
//! states, optionally the matching latent states (needed for
//! finite-population estimands and posterior-predictive checks), and
//! metadata describing how the run was configured. Persistence writes a
//! columnar CSV per table — one row per retained draw, one column per
//! scalar — plus a JSON sidecar with the seed, configuration, burn-in,
//! thinning, and relabeling record, so a stored run can be reloaded or
//! diagnosed without the original invocation.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{LatentState, Observation, TrialDataset};
use crate::model::{ModelConfig, ParameterState};
use crate::{Error, Result};

/// Shape information needed to flatten/unflatten a [`ParameterState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterDims {
    /// Number of strata K.
    pub n_strata: usize,
    /// Mixture dimension ℓ + P.
    pub cz_dim: usize,
    /// Number of individual covariates M.
    pub n_x: usize,
    /// Number of clusters I.
    pub n_clusters: usize,
}

impl ParameterDims {
    pub fn of(config: &ModelConfig, data: &TrialDataset) -> Self {
        ParameterDims {
            n_strata: config.n_strata,
            cz_dim: data.cz_dim(),
            n_x: data.n_individual_covariates(),
            n_clusters: data.n_clusters(),
        }
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        let k = self.n_strata;
        let d = self.cz_dim;
        let m = self.n_x;
        let i = self.n_clusters;
        k + k * d + d * d + k + k * m + 1 + i + k + 2 * k * m + k + k + k + 1 + i
    }

    /// Column names matching [`flatten_parameters`], 1-based indices.
    pub fn scalar_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.n_scalars());
        for k in 1..=self.n_strata {
            names.push(format!("pi[{k}]"));
        }
        for k in 1..=self.n_strata {
            for j in 1..=self.cz_dim {
                names.push(format!("mu_s[{k}][{j}]"));
            }
        }
        for r in 1..=self.cz_dim {
            for c in 1..=self.cz_dim {
                names.push(format!("sigma[{r}][{c}]"));
            }
        }
        for k in 1..=self.n_strata {
            names.push(format!("mu_d[{k}]"));
        }
        for k in 1..=self.n_strata {
            for j in 1..=self.n_x {
                names.push(format!("alpha[{k}][{j}]"));
            }
        }
        names.push("tau_d_sq".to_string());
        for i in 1..=self.n_clusters {
            names.push(format!("phi_d[{i}]"));
        }
        for k in 1..=self.n_strata {
            names.push(format!("mu_y[{k}]"));
        }
        for k in 1..=self.n_strata {
            for j in 1..=self.n_x {
                names.push(format!("beta0[{k}][{j}]"));
            }
        }
        for k in 1..=self.n_strata {
            for j in 1..=self.n_x {
                names.push(format!("beta1[{k}][{j}]"));
            }
        }
        for k in 1..=self.n_strata {
            names.push(format!("delta1[{k}]"));
        }
        for k in 1..=self.n_strata {
            names.push(format!("delta0[{k}]"));
        }
        for k in 1..=self.n_strata {
            names.push(format!("sigma_sq[{k}]"));
        }
        names.push("tau_y_sq".to_string());
        for i in 1..=self.n_clusters {
            names.push(format!("phi_y[{i}]"));
        }
        names
    }
}

/// Flatten a parameter state into one scalar row (order matches
/// [`ParameterDims::scalar_names`]).
pub fn flatten_parameters(theta: &ParameterState, dims: &ParameterDims) -> Vec<f64> {
    let mut row = Vec::with_capacity(dims.n_scalars());
    row.extend_from_slice(&theta.pi);
    for m in &theta.strata_means {
        row.extend(m.iter().copied());
    }
    for r in 0..dims.cz_dim {
        for c in 0..dims.cz_dim {
            row.push(theta.sigma[(r, c)]);
        }
    }
    row.extend_from_slice(&theta.mu_d);
    for a in &theta.alpha {
        row.extend_from_slice(a);
    }
    row.push(theta.tau_d_sq);
    row.extend_from_slice(&theta.phi_d);
    row.extend_from_slice(&theta.mu_y);
    for b in &theta.beta0 {
        row.extend_from_slice(b);
    }
    for b in &theta.beta1 {
        row.extend_from_slice(b);
    }
    row.extend_from_slice(&theta.delta1);
    row.extend_from_slice(&theta.delta0);
    row.extend_from_slice(&theta.sigma_sq);
    row.push(theta.tau_y_sq);
    row.extend_from_slice(&theta.phi_y);
    debug_assert_eq!(row.len(), dims.n_scalars());
    row
}

/// Rebuild a parameter state from one scalar row.
pub fn unflatten_parameters(row: &[f64], dims: &ParameterDims) -> Result<ParameterState> {
    if row.len() != dims.n_scalars() {
        return Err(Error::Data {
            message: format!(
                "parameter row has {} scalars, expected {}",
                row.len(),
                dims.n_scalars()
            ),
            row: None,
            column: None,
        });
    }
    let mut it = row.iter().copied();
    let mut take = |n: usize| -> Vec<f64> { it.by_ref().take(n).collect() };
    let k = dims.n_strata;
    let d = dims.cz_dim;
    let m = dims.n_x;
    let i = dims.n_clusters;
    let pi = take(k);
    let strata_means = (0..k).map(|_| DVector::from_vec(take(d))).collect();
    let sigma = DMatrix::from_row_slice(d, d, &take(d * d));
    let mu_d = take(k);
    let alpha = (0..k).map(|_| take(m)).collect();
    let tau_d_sq = take(1)[0];
    let phi_d = take(i);
    let mu_y = take(k);
    let beta0 = (0..k).map(|_| take(m)).collect();
    let beta1 = (0..k).map(|_| take(m)).collect();
    let delta1 = take(k);
    let delta0 = take(k);
    let sigma_sq = take(k);
    let tau_y_sq = take(1)[0];
    let phi_y = take(i);
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

/// Run description stored alongside the draws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrawsMeta {
    pub seed: u64,
    pub n_iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub config: ModelConfig,
    pub dims: ParameterDims,
    /// Stratum permutation applied to each retained draw by the relabeling
    /// rule (`perm[old_label] = new_label`).
    pub relabel_permutations: Vec<Vec<usize>>,
    /// Share of consecutive retained draws whose relabeling permutation
    /// changed — 0 for a chain whose component labeling never flips.
    pub label_switch_rate: f64,
}

/// Retained draws of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub params: Vec<ParameterState>,
    /// Latent snapshots matching `params`; empty when the chain was run
    /// with `keep_latents = false`.
    pub latents: Vec<LatentState>,
    pub meta: DrawsMeta,
}

impl PosteriorDraws {
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// One named scalar's trajectory across draws. Errors on unknown names.
    pub fn scalar_series(&self, name: &str) -> Result<Vec<f64>> {
        let names = self.meta.dims.scalar_names();
        let idx = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Domain(format!("unknown parameter column `{name}`")))?;
        Ok(self
            .params
            .iter()
            .map(|p| flatten_parameters(p, &self.meta.dims)[idx])
            .collect())
    }

    /// Write the draw tables and metadata sidecar into `dir`:
    /// `params.csv`, `strata.csv`, `imputed_c.csv`, `imputed_d.csv`,
    /// `imputed_y.csv` (latent tables only when latents were kept), and
    /// `meta.json`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, data: &TrialDataset) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;

        let dims = &self.meta.dims;
        let mut w = csv::Writer::from_path(dir.join("params.csv"))?;
        w.write_record(dims.scalar_names())?;
        for p in &self.params {
            let row = flatten_parameters(p, dims);
            w.write_record(row.iter().map(|v| format!("{v}")))?;
        }
        w.flush()?;

        if !self.latents.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("strata.csv"))?;
            w.write_record(
                data.clusters()
                    .iter()
                    .map(|c| format!("S[{}]", c.id)),
            )?;
            for l in &self.latents {
                // 1-based stratum labels in the file, matching column names.
                w.write_record(l.strata.iter().map(|s| format!("{}", s + 1)))?;
            }
            w.flush()?;

            let control: Vec<usize> = (0..data.n_clusters())
                .filter(|&i| !data.clusters()[i].treated)
                .collect();
            let mut w = csv::Writer::from_path(dir.join("imputed_c.csv"))?;
            let mut header = Vec::new();
            for &i in &control {
                for l in 1..=data.n_compliance_metrics() {
                    header.push(format!("C[{}][{}]", data.clusters()[i].id, l));
                }
            }
            w.write_record(&header)?;
            for lat in &self.latents {
                let mut row = Vec::with_capacity(header.len());
                for &i in &control {
                    row.extend(lat.c[i].iter().map(|v| format!("{v}")));
                }
                w.write_record(&row)?;
            }
            w.flush()?;

            let unobserved_d: Vec<usize> = (0..data.n_individuals())
                .filter(|&j| !data.individuals()[j].uptake.is_observed())
                .collect();
            let mut w = csv::Writer::from_path(dir.join("imputed_d.csv"))?;
            w.write_record(unobserved_d.iter().map(|j| format!("D[{}]", j + 1)))?;
            for lat in &self.latents {
                w.write_record(
                    unobserved_d
                        .iter()
                        .map(|&j| if lat.d[j] { "1" } else { "0" }.to_string()),
                )?;
            }
            w.flush()?;

            let missing_y: Vec<usize> = (0..data.n_individuals())
                .filter(|&j| !data.individuals()[j].outcome.is_observed())
                .collect();
            let mut w = csv::Writer::from_path(dir.join("imputed_y.csv"))?;
            w.write_record(missing_y.iter().map(|j| format!("Y[{}]", j + 1)))?;
            for lat in &self.latents {
                w.write_record(missing_y.iter().map(|&j| match lat.y_mis[j] {
                    Some(y) => format!("{y}"),
                    None => String::new(),
                }))?;
            }
            w.flush()?;
        }

        let meta = serde_json::to_string_pretty(&self.meta)
            .map_err(|e| Error::Domain(format!("cannot serialize run metadata: {e}")))?;
        std::fs::write(dir.join("meta.json"), meta)?;
        Ok(())
    }

    /// Reload draws written by [`write_dir`]. Latent tables are restored
    /// when present; the dataset supplies the observed values that latent
    /// states carry unchanged.
    ///
    /// [`write_dir`]: PosteriorDraws::write_dir
    pub fn read_dir(dir: impl AsRef<Path>, data: &TrialDataset) -> Result<Self> {
        let dir = dir.as_ref();
        let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
        let meta: DrawsMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Domain(format!("cannot parse run metadata: {e}")))?;

        let mut params = Vec::new();
        let mut r = csv::Reader::from_path(dir.join("params.csv"))?;
        for rec in r.records() {
            let rec = rec?;
            let row: Vec<f64> = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>().map_err(|_| Error::Data {
                        message: format!("bad parameter value `{f}`"),
                        row: Some(params.len() + 1),
                        column: None,
                    })
                })
                .collect::<Result<_>>()?;
            params.push(unflatten_parameters(&row, &meta.dims)?);
        }

        let mut latents = Vec::new();
        let strata_path = dir.join("strata.csv");
        if strata_path.exists() {
            let strata_rows = read_table(&strata_path)?;
            let c_rows = read_table(dir.join("imputed_c.csv"))?;
            let d_rows = read_table(dir.join("imputed_d.csv"))?;
            let y_rows = read_table(dir.join("imputed_y.csv"))?;
            let control: Vec<usize> = (0..data.n_clusters())
                .filter(|&i| !data.clusters()[i].treated)
                .collect();
            let unobserved_d: Vec<usize> = (0..data.n_individuals())
                .filter(|&j| !data.individuals()[j].uptake.is_observed())
                .collect();
            let missing_y: Vec<usize> = (0..data.n_individuals())
                .filter(|&j| !data.individuals()[j].outcome.is_observed())
                .collect();
            for t in 0..strata_rows.len() {
                let strata: Vec<usize> = strata_rows[t]
                    .iter()
                    .map(|v| *v as usize - 1)
                    .collect();
                let mut c: Vec<Vec<f64>> = (0..data.n_clusters())
                    .map(|i| match data.clusters()[i].compliance.observed() {
                        Some(v) => v.clone(),
                        None => vec![0.0; data.n_compliance_metrics()],
                    })
                    .collect();
                for (slot, &i) in control.iter().enumerate() {
                    let l = data.n_compliance_metrics();
                    c[i].copy_from_slice(&c_rows[t][slot * l..(slot + 1) * l]);
                }
                let mut d: Vec<bool> = data
                    .individuals()
                    .iter()
                    .map(|ind| ind.uptake.value().unwrap_or(false))
                    .collect();
                for (slot, &j) in unobserved_d.iter().enumerate() {
                    d[j] = d_rows[t][slot] != 0.0;
                }
                let mut y_mis = vec![None; data.n_individuals()];
                for (slot, &j) in missing_y.iter().enumerate() {
                    let v = y_rows[t][slot];
                    y_mis[j] = if v.is_nan() { None } else { Some(v) };
                }
                latents.push(LatentState {
                    strata,
                    c,
                    d,
                    u: vec![0.0; data.n_individuals()],
                    y_mis,
                });
            }
        }

        // Sanity-check observed bits against the dataset.
        for lat in &latents {
            for (j, ind) in data.individuals().iter().enumerate() {
                if let Observation::Observed(d) = ind.uptake {
                    if lat.d[j] != d {
                        return Err(Error::Domain(
                            "stored latent state contradicts observed uptake".into(),
                        ));
                    }
                }
            }
        }

        Ok(PosteriorDraws {
            params,
            latents,
            meta,
        })
    }
}

/// Read a headed CSV of floats; blank cells become NaN.
fn read_table(path: impl AsRef<Path>) -> Result<Vec<Vec<f64>>> {
    let mut rows = Vec::new();
    let mut r = csv::Reader::from_path(path.as_ref())?;
    for rec in r.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|f| {
                    if f.is_empty() {
                        Ok(f64::NAN)
                    } else {
                        f.parse::<f64>().map_err(|_| Error::Data {
                            message: format!("bad numeric value `{f}`"),
                            row: Some(rows.len() + 1),
                            column: None,
                        })
                    }
                })
                .collect::<Result<_>>()?,
        );
    }
    Ok(rows)
}
