//! Trial data containers, CSV ingestion, validation, and summaries.
//!
//! The data are two-level: clusters carry the randomized assignment `W`,
//! cluster covariates `Z`, and — in the treated arm only — a vector of
//! observed compliance metrics `C`; individuals carry baseline covariates
//! `X`, a binary uptake indicator `D` (treated arm only), and an outcome
//! `Y`. Compliance is one-sided, so `C` and `D` are *structurally* missing
//! in the control arm: the control counterfactuals exist in the model, not
//! in the file. A blank `D` or `Y` cell in the treated arm is *incidental*
//! missingness (it should have been observed); the two kinds are kept apart
//! by [`Observation`] so downstream code never has to guess which imputation
//! pathway applies.
//!
//! # File formats
//!
//! ```text
//! clusters.csv     cluster_id,W,Z1..ZP,C1..Cl     (C blank on W=0 rows)
//! individuals.csv  cluster_id,X1..XM,D,Y          (D blank on control rows)
//! ```
//!
//! UTF-8, comma-delimited, `.` decimal separator, blank cell = missing.
//! Loading validates every invariant and reports the 1-based data row and
//! column name of the first violation.
//!
//! Covariates (`Z` and `X`, never `C` or `Y`) get standardizing transforms
//! computed at load time from moments pooled over both arms. Records keep
//! their file-scale values — so writing a dataset back out reproduces the
//! input bit for bit — and modeling code obtains centered/scaled columns
//! through [`TrialDataset::standardized_z`] / [`TrialDataset::standardized_x`],
//! with the transforms retained for mapping results back to raw units.
//! Datasets built in memory by the simulation code are already on the
//! model's scale and carry identity transforms.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Why a value is absent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MissingKind {
    /// Absent by design: the counterfactual quantity is never observable in
    /// this arm (compliance data in the control arm).
    Structural,
    /// Absent although it should have been observed (a blank treated-arm
    /// uptake or outcome cell).
    Incidental,
}

/// An observed-or-missing value with the reason for its absence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Observation<T> {
    Observed(T),
    Missing(MissingKind),
}

impl<T> Observation<T> {
    pub fn observed(&self) -> Option<&T> {
        match self {
            Observation::Observed(v) => Some(v),
            Observation::Missing(_) => None,
        }
    }

    pub fn is_observed(&self) -> bool {
        matches!(self, Observation::Observed(_))
    }

    pub fn is_missing(&self) -> bool {
        !self.is_observed()
    }
}

impl<T: Copy> Observation<T> {
    pub fn value(&self) -> Option<T> {
        self.observed().copied()
    }
}

/// One cluster: assignment, cluster covariates, and (treated arm) observed
/// compliance metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterRecord {
    /// Identifier as written in the input file.
    pub id: String,
    /// Randomized assignment: true = offered the intervention.
    pub treated: bool,
    /// Cluster covariates, length P, on the scale of the input file.
    pub z: Vec<f64>,
    /// Compliance metrics, length ℓ; observed iff treated, structurally
    /// missing in the control arm.
    pub compliance: Observation<Vec<f64>>,
    /// Number of individuals belonging to this cluster.
    pub n_individuals: usize,
}

/// One individual: covariates, uptake, outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct IndividualRecord {
    /// Identifier of the cluster this individual belongs to.
    pub cluster_id: String,
    /// Index of that cluster within the dataset's cluster list.
    pub cluster_index: usize,
    /// Individual covariates, length M, on the scale of the input file.
    pub x: Vec<f64>,
    /// Uptake under treatment: observed in the treated arm (unless
    /// incidentally missing), structurally missing in the control arm.
    pub uptake: Observation<bool>,
    /// Observed outcome; incidental missingness allowed in either arm.
    pub outcome: Observation<f64>,
}

/// Affine column transform: `standardized = (raw − center) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AffineTransform {
    pub center: f64,
    pub scale: f64,
}

impl AffineTransform {
    pub const IDENTITY: AffineTransform = AffineTransform {
        center: 0.0,
        scale: 1.0,
    };

    pub fn apply(&self, raw: f64) -> f64 {
        (raw - self.center) / self.scale
    }

    pub fn invert(&self, standardized: f64) -> f64 {
        self.center + self.scale * standardized
    }
}

/// Per-column covariate transforms recorded at load time.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Standardization {
    /// Transforms for the cluster covariates Z, length P.
    pub z: Vec<AffineTransform>,
    /// Transforms for the individual covariates X, length M.
    pub x: Vec<AffineTransform>,
}

impl Standardization {
    pub fn identity(p: usize, m: usize) -> Self {
        Standardization {
            z: vec![AffineTransform::IDENTITY; p],
            x: vec![AffineTransform::IDENTITY; m],
        }
    }

    pub fn is_identity(&self) -> bool {
        self.z.iter().chain(self.x.iter()).all(|t| *t == AffineTransform::IDENTITY)
    }
}

/// A validated two-level trial dataset.
///
/// Immutable after construction; individuals are stored grouped by cluster
/// (clusters keep their input order, individuals keep their input order
/// within a cluster), so per-cluster slices are contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    clusters: Vec<ClusterRecord>,
    individuals: Vec<IndividualRecord>,
    spans: Vec<Range<usize>>,
    n_compliance_metrics: usize,
    n_cluster_covariates: usize,
    n_individual_covariates: usize,
    standardization: Standardization,
}

impl TrialDataset {
    /// Assemble and validate a dataset from in-memory records. Individuals
    /// may arrive in any order; they are grouped by cluster. The data are
    /// taken to be on the model's scale already (identity transforms).
    pub fn from_parts(
        clusters: Vec<ClusterRecord>,
        individuals: Vec<IndividualRecord>,
        n_compliance_metrics: usize,
        n_cluster_covariates: usize,
        n_individual_covariates: usize,
    ) -> Result<Self> {
        Self::assemble(
            clusters,
            individuals,
            n_compliance_metrics,
            n_cluster_covariates,
            n_individual_covariates,
            Standardization::identity(n_cluster_covariates, n_individual_covariates),
        )
    }

    fn assemble(
        mut clusters: Vec<ClusterRecord>,
        mut individuals: Vec<IndividualRecord>,
        l: usize,
        p: usize,
        m: usize,
        standardization: Standardization,
    ) -> Result<Self> {
        if l == 0 {
            return Err(Error::data(
                "a dataset needs at least one compliance metric column",
            ));
        }
        if clusters.is_empty() {
            return Err(Error::data("no cluster records"));
        }

        let mut index_of: HashMap<&str, usize> = HashMap::with_capacity(clusters.len());
        for (i, c) in clusters.iter().enumerate() {
            if index_of.insert(c.id.as_str(), i).is_some() {
                return Err(Error::data_at(
                    format!("duplicate cluster id `{}`", c.id),
                    i + 1,
                    "cluster_id".to_string(),
                ));
            }
        }

        // Validate cluster-level invariants.
        for (i, c) in clusters.iter().enumerate() {
            if c.z.len() != p {
                return Err(Error::data_at(
                    format!(
                        "cluster `{}` has {} cluster covariates, expected {p}",
                        c.id,
                        c.z.len()
                    ),
                    i + 1,
                    None,
                ));
            }
            match (&c.compliance, c.treated) {
                (Observation::Observed(v), true) => {
                    if v.len() != l {
                        return Err(Error::data_at(
                            format!(
                                "cluster `{}` has {} compliance metrics, expected {l}",
                                c.id,
                                v.len()
                            ),
                            i + 1,
                            None,
                        ));
                    }
                }
                (Observation::Observed(_), false) => {
                    return Err(Error::data_at(
                        format!(
                            "cluster `{}` is in the control arm but carries compliance metrics",
                            c.id
                        ),
                        i + 1,
                        "C1".to_string(),
                    ));
                }
                (Observation::Missing(_), true) => {
                    return Err(Error::data_at(
                        format!(
                            "treated cluster `{}` is missing its compliance metrics",
                            c.id
                        ),
                        i + 1,
                        "C1".to_string(),
                    ));
                }
                (Observation::Missing(_), false) => {}
            }
            if let Some(bad) = c.z.iter().find(|v| !v.is_finite()) {
                return Err(Error::data_at(
                    format!("cluster `{}` has non-finite covariate {bad}", c.id),
                    i + 1,
                    None,
                ));
            }
            if let Some(v) = c.compliance.observed() {
                if let Some(bad) = v.iter().find(|v| !v.is_finite()) {
                    return Err(Error::data_at(
                        format!("cluster `{}` has non-finite compliance metric {bad}", c.id),
                        i + 1,
                        None,
                    ));
                }
            }
        }

        // Resolve cluster indices and validate individual-level invariants.
        for (j, ind) in individuals.iter_mut().enumerate() {
            let Some(&ci) = index_of.get(ind.cluster_id.as_str()) else {
                return Err(Error::data_at(
                    format!(
                        "individual references unknown cluster `{}`",
                        ind.cluster_id
                    ),
                    j + 1,
                    "cluster_id".to_string(),
                ));
            };
            ind.cluster_index = ci;
            let treated = clusters[ci].treated;
            if ind.x.len() != m {
                return Err(Error::data_at(
                    format!("individual has {} covariates, expected {m}", ind.x.len()),
                    j + 1,
                    None,
                ));
            }
            if let Some(bad) = ind.x.iter().find(|v| !v.is_finite()) {
                return Err(Error::data_at(
                    format!("individual has non-finite covariate {bad}"),
                    j + 1,
                    None,
                ));
            }
            match &ind.uptake {
                Observation::Observed(_) if !treated => {
                    return Err(Error::data_at(
                        format!(
                            "individual in control cluster `{}` has an observed uptake value",
                            ind.cluster_id
                        ),
                        j + 1,
                        "D".to_string(),
                    ));
                }
                Observation::Missing(MissingKind::Structural) if treated => {
                    return Err(Error::data_at(
                        "treated-arm uptake can be incidentally missing, not structurally"
                            .to_string(),
                        j + 1,
                        "D".to_string(),
                    ));
                }
                Observation::Missing(MissingKind::Incidental) if !treated => {
                    return Err(Error::data_at(
                        "control-arm uptake is structurally missing, not incidentally"
                            .to_string(),
                        j + 1,
                        "D".to_string(),
                    ));
                }
                _ => {}
            }
            if let Some(y) = ind.outcome.value() {
                if !y.is_finite() {
                    return Err(Error::data_at(
                        format!("non-finite outcome {y}"),
                        j + 1,
                        "Y".to_string(),
                    ));
                }
            }
            if matches!(ind.outcome, Observation::Missing(MissingKind::Structural)) {
                return Err(Error::data_at(
                    "outcomes are observable in both arms; missing outcomes are incidental"
                        .to_string(),
                    j + 1,
                    "Y".to_string(),
                ));
            }
        }

        // Group individuals by cluster, preserving their relative order.
        individuals.sort_by_key(|ind| ind.cluster_index);
        let mut spans = Vec::with_capacity(clusters.len());
        let mut start = 0usize;
        for ci in 0..clusters.len() {
            let end = start
                + individuals[start..]
                    .iter()
                    .take_while(|ind| ind.cluster_index == ci)
                    .count();
            spans.push(start..end);
            clusters[ci].n_individuals = end - start;
            start = end;
        }

        Ok(TrialDataset {
            clusters,
            individuals,
            spans,
            n_compliance_metrics: l,
            n_cluster_covariates: p,
            n_individual_covariates: m,
            standardization,
        })
    }

    pub fn clusters(&self) -> &[ClusterRecord] {
        &self.clusters
    }

    pub fn individuals(&self) -> &[IndividualRecord] {
        &self.individuals
    }

    /// The individuals of cluster `i`, contiguous.
    pub fn individuals_of(&self, i: usize) -> &[IndividualRecord] {
        &self.individuals[self.spans[i].clone()]
    }

    /// Index range of cluster `i`'s individuals within [`individuals`].
    ///
    /// [`individuals`]: TrialDataset::individuals
    pub fn span(&self, i: usize) -> Range<usize> {
        self.spans[i].clone()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_individuals(&self) -> usize {
        self.individuals.len()
    }

    /// ℓ: number of compliance metrics.
    pub fn n_compliance_metrics(&self) -> usize {
        self.n_compliance_metrics
    }

    /// P: number of cluster covariates.
    pub fn n_cluster_covariates(&self) -> usize {
        self.n_cluster_covariates
    }

    /// M: number of individual covariates.
    pub fn n_individual_covariates(&self) -> usize {
        self.n_individual_covariates
    }

    /// ℓ + P: dimension of the joint (C, Z) vector the mixture models.
    pub fn cz_dim(&self) -> usize {
        self.n_compliance_metrics + self.n_cluster_covariates
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    /// Cluster `i`'s covariates on the standardized scale.
    pub fn standardized_z(&self, i: usize) -> Vec<f64> {
        self.clusters[i]
            .z
            .iter()
            .zip(&self.standardization.z)
            .map(|(v, t)| t.apply(*v))
            .collect()
    }

    /// Individual `j`'s covariates on the standardized scale.
    pub fn standardized_x(&self, j: usize) -> Vec<f64> {
        self.individuals[j]
            .x
            .iter()
            .zip(&self.standardization.x)
            .map(|(v, t)| t.apply(*v))
            .collect()
    }

    /// Compute pooled-moment transforms for Z and X. Constant columns are
    /// centered but left unscaled.
    fn compute_standardization(&mut self) {
        let z = (0..self.n_cluster_covariates)
            .map(|c| column_transform(self.clusters.iter().map(|r| r.z[c])))
            .collect();
        let x = (0..self.n_individual_covariates)
            .map(|c| column_transform(self.individuals.iter().map(|r| r.x[c])))
            .collect();
        self.standardization = Standardization { z, x };
    }
}

/// Mean/SD transform for one column (sample SD; a zero-variance column gets
/// scale 1 so the transform stays invertible).
fn column_transform(values: impl Iterator<Item = f64> + Clone) -> AffineTransform {
    let n = values.clone().count();
    if n == 0 {
        return AffineTransform::IDENTITY;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let scale = if n < 2 {
        1.0
    } else {
        let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
        let sd = (ss / (n as f64 - 1.0)).sqrt();
        if sd > 0.0 {
            sd
        } else {
            1.0
        }
    };
    AffineTransform {
        center: mean,
        scale,
    }
}

/// Per-chain latent state: everything the sampler augments the data with.
///
/// `c` and `d` are *completed* working values — observed where the data has
/// them, current imputations where it does not (which entries are imputed
/// follows from the dataset: `c[i]` for control clusters, `d[j]` for
/// individuals whose uptake is not observed). `y_mis` is only populated when
/// missing outcomes are drawn for a retained draw; the sampler itself leaves
/// missing outcomes out of the likelihood.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// Stratum index per cluster, 0-based, in 0..K.
    pub strata: Vec<usize>,
    /// Completed compliance metric vectors, one length-ℓ vector per cluster.
    pub c: Vec<Vec<f64>>,
    /// Completed uptake-under-treatment per individual.
    pub d: Vec<bool>,
    /// Probit augmentation utilities per individual.
    pub u: Vec<f64>,
    /// Imputed outcomes for incidentally missing cells (None elsewhere).
    pub y_mis: Vec<Option<f64>>,
}

impl LatentState {
    /// Shape-consistency against a dataset (used by debug assertions and
    /// validation in entry points).
    pub fn conforms_to(&self, data: &TrialDataset, n_strata: usize) -> bool {
        self.strata.len() == data.n_clusters()
            && self.strata.iter().all(|&s| s < n_strata)
            && self.c.len() == data.n_clusters()
            && self
                .c
                .iter()
                .all(|v| v.len() == data.n_compliance_metrics())
            && self.d.len() == data.n_individuals()
            && self.u.len() == data.n_individuals()
            && self.y_mis.len() == data.n_individuals()
    }
}

/// Deterministic dataset summary (raw covariate units).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_clusters: usize,
    pub n_treated_clusters: usize,
    pub n_control_clusters: usize,
    pub n_individuals: usize,
    pub n_treated_individuals: usize,
    pub n_control_individuals: usize,
    /// Mean of each cluster covariate over all clusters.
    pub z_means: Vec<f64>,
    /// Mean of each individual covariate over all individuals.
    pub x_means: Vec<f64>,
    /// Mean of each compliance metric over treated clusters.
    pub compliance_means: Vec<f64>,
    /// Share of D = 1 among treated individuals with observed uptake.
    pub observed_uptake_rate: Option<f64>,
    /// Incidentally missing uptake / outcome cell counts.
    pub n_missing_uptake: usize,
    pub n_missing_outcome: usize,
}

/// Compute the summary record for a dataset.
pub fn summarize(data: &TrialDataset) -> DatasetSummary {
    let n_treated_clusters = data.clusters().iter().filter(|c| c.treated).count();
    let treated_individuals = data
        .individuals()
        .iter()
        .filter(|ind| data.clusters()[ind.cluster_index].treated)
        .count();

    let p = data.n_cluster_covariates();
    let m = data.n_individual_covariates();
    let l = data.n_compliance_metrics();

    let mut z_means = vec![0.0; p];
    for c in data.clusters() {
        for (acc, v) in z_means.iter_mut().zip(&c.z) {
            *acc += *v;
        }
    }
    for v in &mut z_means {
        *v /= data.n_clusters() as f64;
    }

    let mut x_means = vec![0.0; m];
    if data.n_individuals() > 0 {
        for ind in data.individuals() {
            for (acc, v) in x_means.iter_mut().zip(&ind.x) {
                *acc += *v;
            }
        }
        for v in &mut x_means {
            *v /= data.n_individuals() as f64;
        }
    }

    let mut compliance_means = vec![0.0; l];
    if n_treated_clusters > 0 {
        for c in data.clusters() {
            if let Some(metrics) = c.compliance.observed() {
                for (acc, v) in compliance_means.iter_mut().zip(metrics) {
                    *acc += *v;
                }
            }
        }
        for v in &mut compliance_means {
            *v /= n_treated_clusters as f64;
        }
    }

    let (mut d_obs, mut d_ones, mut d_missing, mut y_missing) = (0usize, 0usize, 0usize, 0usize);
    for ind in data.individuals() {
        match &ind.uptake {
            Observation::Observed(d) => {
                d_obs += 1;
                d_ones += *d as usize;
            }
            Observation::Missing(MissingKind::Incidental) => d_missing += 1,
            Observation::Missing(MissingKind::Structural) => {}
        }
        if matches!(ind.outcome, Observation::Missing(MissingKind::Incidental)) {
            y_missing += 1;
        }
    }

    DatasetSummary {
        n_clusters: data.n_clusters(),
        n_treated_clusters,
        n_control_clusters: data.n_clusters() - n_treated_clusters,
        n_individuals: data.n_individuals(),
        n_treated_individuals: treated_individuals,
        n_control_individuals: data.n_individuals() - treated_individuals,
        z_means,
        x_means,
        compliance_means,
        observed_uptake_rate: if d_obs > 0 {
            Some(d_ones as f64 / d_obs as f64)
        } else {
            None
        },
        n_missing_uptake: d_missing,
        n_missing_outcome: y_missing,
    }
}

// ---------------------------------------------------------------------------
// CSV input/output
// ---------------------------------------------------------------------------

/// Parse the clusters header, returning (P, ℓ).
fn parse_cluster_header(headers: &csv::StringRecord) -> Result<(usize, usize)> {
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"cluster_id") || cols.get(1) != Some(&"W") {
        return Err(Error::data(
            "clusters file must start with header columns `cluster_id,W`",
        ));
    }
    let mut idx = 2;
    let mut p = 0usize;
    while idx < cols.len() && cols[idx] == format!("Z{}", p + 1) {
        p += 1;
        idx += 1;
    }
    let mut l = 0usize;
    while idx < cols.len() && cols[idx] == format!("C{}", l + 1) {
        l += 1;
        idx += 1;
    }
    if idx != cols.len() {
        return Err(Error::data_at(
            format!(
                "unexpected clusters column `{}`; header must be cluster_id,W,Z1..ZP,C1..Cl",
                cols[idx]
            ),
            None,
            cols[idx].to_string(),
        ));
    }
    if l == 0 {
        return Err(Error::data(
            "clusters file needs at least one compliance metric column C1",
        ));
    }
    Ok((p, l))
}

/// Parse the individuals header, returning M.
fn parse_individual_header(headers: &csv::StringRecord) -> Result<usize> {
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"cluster_id") {
        return Err(Error::data(
            "individuals file must start with header column `cluster_id`",
        ));
    }
    let mut idx = 1;
    let mut m = 0usize;
    while idx < cols.len() && cols[idx] == format!("X{}", m + 1) {
        m += 1;
        idx += 1;
    }
    if cols.get(idx) != Some(&"D") || cols.get(idx + 1) != Some(&"Y") || idx + 2 != cols.len() {
        return Err(Error::data(
            "individuals header must be cluster_id,X1..XM,D,Y",
        ));
    }
    Ok(m)
}

fn parse_f64(field: &str, row: usize, col: &str) -> Result<f64> {
    let v: f64 = field.trim().parse().map_err(|_| {
        Error::data_at(
            format!("cannot parse `{field}` as a number"),
            row,
            col.to_string(),
        )
    })?;
    if !v.is_finite() {
        return Err(Error::data_at(
            format!("value `{field}` is not finite"),
            row,
            col.to_string(),
        ));
    }
    Ok(v)
}

fn parse_binary(field: &str, row: usize, col: &str) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::data_at(
            format!("`{col}` must be 0 or 1, got `{other}`"),
            row,
            col.to_string(),
        )),
    }
}

/// Load and validate a trial from its two CSV files, computing pooled-moment
/// standardizing transforms for the covariates (retained on the dataset).
pub fn load_trial(
    clusters_path: impl AsRef<Path>,
    individuals_path: impl AsRef<Path>,
) -> Result<TrialDataset> {
    let mut cluster_reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(clusters_path.as_ref())?;
    let (p, l) = parse_cluster_header(cluster_reader.headers()?)?;

    let mut clusters = Vec::new();
    for (i, rec) in cluster_reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let id = rec.get(0).unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::data_at(
                "cluster_id is blank".to_string(),
                row,
                "cluster_id".to_string(),
            ));
        }
        let treated = parse_binary(rec.get(1).unwrap_or(""), row, "W")?;
        let mut z = Vec::with_capacity(p);
        for c in 0..p {
            let col = format!("Z{}", c + 1);
            let field = rec.get(2 + c).unwrap_or("");
            if field.trim().is_empty() {
                return Err(Error::data_at(
                    "cluster covariates cannot be missing".to_string(),
                    row,
                    col,
                ));
            }
            z.push(parse_f64(field, row, &col)?);
        }
        let c_fields: Vec<&str> = (0..l).map(|c| rec.get(2 + p + c).unwrap_or("")).collect();
        let blank = c_fields.iter().filter(|f| f.trim().is_empty()).count();
        let compliance = if blank == l {
            Observation::Missing(MissingKind::Structural)
        } else if blank == 0 {
            let mut v = Vec::with_capacity(l);
            for (c, field) in c_fields.iter().enumerate() {
                v.push(parse_f64(field, row, &format!("C{}", c + 1))?);
            }
            Observation::Observed(v)
        } else {
            return Err(Error::data_at(
                "compliance metrics must be all present or all blank".to_string(),
                row,
                format!("C{}", c_fields.iter().position(|f| f.trim().is_empty()).unwrap() + 1),
            ));
        };
        // Arm/compliance consistency is checked with full context in
        // `assemble`; here only the shape is settled.
        clusters.push(ClusterRecord {
            id,
            treated,
            z,
            compliance,
            n_individuals: 0,
        });
    }

    let mut individual_reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_path(individuals_path.as_ref())?;
    let m = parse_individual_header(individual_reader.headers()?)?;

    let treated_of: HashMap<String, bool> = clusters
        .iter()
        .map(|c| (c.id.clone(), c.treated))
        .collect();

    let mut individuals = Vec::new();
    for (i, rec) in individual_reader.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let cluster_id = rec.get(0).unwrap_or("").trim().to_string();
        if cluster_id.is_empty() {
            return Err(Error::data_at(
                "cluster_id is blank".to_string(),
                row,
                "cluster_id".to_string(),
            ));
        }
        let mut x = Vec::with_capacity(m);
        for c in 0..m {
            let col = format!("X{}", c + 1);
            let field = rec.get(1 + c).unwrap_or("");
            if field.trim().is_empty() {
                return Err(Error::data_at(
                    "individual covariates cannot be missing".to_string(),
                    row,
                    col,
                ));
            }
            x.push(parse_f64(field, row, &col)?);
        }
        let d_field = rec.get(1 + m).unwrap_or("").trim();
        let y_field = rec.get(2 + m).unwrap_or("").trim();
        // Blank D is structural in the control arm, incidental in the
        // treated arm; the arm is known from the cluster file.
        let treated = treated_of.get(&cluster_id).copied();
        let uptake = if d_field.is_empty() {
            match treated {
                Some(true) => Observation::Missing(MissingKind::Incidental),
                // Unknown cluster ids are reported by `assemble` with this row.
                _ => Observation::Missing(MissingKind::Structural),
            }
        } else {
            Observation::Observed(parse_binary(d_field, row, "D")?)
        };
        let outcome = if y_field.is_empty() {
            Observation::Missing(MissingKind::Incidental)
        } else {
            Observation::Observed(parse_f64(y_field, row, "Y")?)
        };
        individuals.push(IndividualRecord {
            cluster_id,
            cluster_index: usize::MAX,
            x,
            uptake,
            outcome,
        });
    }

    let mut data = TrialDataset::assemble(
        clusters,
        individuals,
        l,
        p,
        m,
        Standardization::identity(p, m),
    )?;
    data.compute_standardization();
    Ok(data)
}

/// Write a dataset to the two CSV files. Values are written exactly as
/// stored (shortest round-trip float formatting), so
/// `load_trial(write_trial(d)) == d` for any valid dataset.
pub fn write_trial(
    data: &TrialDataset,
    clusters_path: impl AsRef<Path>,
    individuals_path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(clusters_path.as_ref())?;
    let mut header = vec!["cluster_id".to_string(), "W".to_string()];
    header.extend((0..data.n_cluster_covariates()).map(|c| format!("Z{}", c + 1)));
    header.extend((0..data.n_compliance_metrics()).map(|c| format!("C{}", c + 1)));
    w.write_record(&header)?;
    for c in data.clusters() {
        let mut rec = vec![c.id.clone(), if c.treated { "1" } else { "0" }.to_string()];
        for v in &c.z {
            rec.push(format!("{v}"));
        }
        match c.compliance.observed() {
            Some(v) => rec.extend(v.iter().map(|x| format!("{x}"))),
            None => rec.extend(std::iter::repeat_n(String::new(), data.n_compliance_metrics())),
        }
        w.write_record(&rec)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(individuals_path.as_ref())?;
    let mut header = vec!["cluster_id".to_string()];
    header.extend((0..data.n_individual_covariates()).map(|c| format!("X{}", c + 1)));
    header.push("D".to_string());
    header.push("Y".to_string());
    w.write_record(&header)?;
    for ind in data.individuals() {
        let mut rec = vec![ind.cluster_id.clone()];
        for v in &ind.x {
            rec.push(format!("{v}"));
        }
        rec.push(match ind.uptake.value() {
            Some(d) => if d { "1" } else { "0" }.to_string(),
            None => String::new(),
        });
        rec.push(match ind.outcome.value() {
            Some(y) => format!("{y}"),
            None => String::new(),
        });
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
