//! Per-replicate small area estimators: direct (Horvitz–Thompson), a
//! modified GREG with pooled coefficients, and two EBLUPs — area-level
//! (Fay–Herriot) and unit-level nested-error (Battese–Harter–Fuller).
//!
//! All four produce one [`EstimateRecord`] per domain: point estimate,
//! MSE estimate, and a 95% normal interval. The EBLUPs fit variance
//! components by REML (Fisher scoring, truncation at zero, moment
//! fallback) and report Prasad–Rao g1+g2+2g3 MSEs.

mod bhf;
mod direct;
mod fh;

pub use bhf::bhf_estimate;
pub use direct::{greg_estimate, ht_estimate};
pub use fh::fh_estimate;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datamodel::{fmt_value, ArtificialPopulation};
use crate::error::{Error, Result};
use crate::sampler::SampleReplicate;

/// Normal multiplier for the 95% intervals.
pub const CI_Z: f64 = 1.96;

/// REML stopping rule: relative tolerance on variance parameters.
pub const REML_TOL: f64 = 1e-8;
/// REML iteration cap before the moment fallback kicks in.
pub const REML_MAX_ITER: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Ht,
    Greg,
    Fh,
    Bhf,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Ht => "ht",
            EstimatorKind::Greg => "greg",
            EstimatorKind::Fh => "fh",
            EstimatorKind::Bhf => "bhf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ht" => Some(EstimatorKind::Ht),
            "greg" => Some(EstimatorKind::Greg),
            "fh" => Some(EstimatorKind::Fh),
            "bhf" => Some(EstimatorKind::Bhf),
            _ => None,
        }
    }
}

/// One (estimator, domain, replicate) result. `estimate` is `None` when the
/// domain produced no usable record (e.g. empty domain for a direct
/// estimator); reasons go in `flags`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRecord {
    pub rep_index: usize,
    pub estimator: EstimatorKind,
    pub domain: String,
    pub n_d: usize,
    pub estimate: Option<f64>,
    pub mse_hat: Option<f64>,
    pub ci_low: Option<f64>,
    pub ci_high: Option<f64>,
    pub flags: Vec<String>,
}

impl EstimateRecord {
    fn empty(rep_index: usize, estimator: EstimatorKind, domain: &str, flag: &str) -> Self {
        Self {
            rep_index,
            estimator,
            domain: domain.to_string(),
            n_d: 0,
            estimate: None,
            mse_hat: None,
            ci_low: None,
            ci_high: None,
            flags: vec![flag.to_string()],
        }
    }

    /// Fill in mse and the 1.96-interval around an existing estimate.
    fn set_mse(&mut self, mse: f64) {
        let est = self.estimate.expect("estimate before mse");
        let half = CI_Z * mse.max(0.0).sqrt();
        self.mse_hat = Some(mse.max(0.0));
        self.ci_low = Some(est - half);
        self.ci_high = Some(est + half);
    }
}

/// Census domain summaries the model-assisted and model-based estimators
/// need: unit counts and mean auxiliary vectors over in-scope units.
#[derive(Debug, Clone)]
pub struct PopulationMoments {
    pub domains: Vec<String>,
    pub counts: Vec<usize>,
    pub x_names: Vec<String>,
    /// `xbar[d][j]` = population mean of `x_names[j]` over domain `d`.
    pub xbar: Vec<Vec<f64>>,
}

impl PopulationMoments {
    pub fn from_population(pop: &ArtificialPopulation, x_names: &[String]) -> Result<Self> {
        let cols: Vec<&[f64]> = x_names
            .iter()
            .map(|n| pop.aux.x_column(n))
            .collect::<Result<_>>()?;
        let n_dom = pop.aux.domain.n_levels();
        let mut counts = vec![0usize; n_dom];
        let mut sums = vec![vec![0.0; x_names.len()]; n_dom];
        for i in 0..pop.n_rows() {
            if !pop.aux.in_scope[i] {
                continue;
            }
            let d = pop.aux.domain.code(i) as usize;
            counts[d] += 1;
            for (j, col) in cols.iter().enumerate() {
                sums[d][j] += col[i];
            }
        }
        let xbar = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| s.iter().map(|v| v / (n.max(1) as f64)).collect())
            .collect();
        Ok(Self {
            domains: pop.aux.domain.levels().to_vec(),
            counts,
            x_names: x_names.to_vec(),
            xbar,
        })
    }

    pub fn n_domains(&self) -> usize {
        self.domains.len()
    }
}

/// One replicate's sample, unpacked for fitting: response, covariate rows,
/// and the domain index of each unit (into `PopulationMoments::domains`).
#[derive(Debug, Clone)]
pub struct SampleData {
    pub rep_index: usize,
    pub y: Vec<f64>,
    /// Row-major, `x[i]` parallel to `y`; no intercept column.
    pub x: Vec<Vec<f64>>,
    pub domain: Vec<usize>,
}

impl SampleData {
    pub fn from_replicate(
        pop: &ArtificialPopulation,
        rep: &SampleReplicate,
        x_names: &[String],
        y_name: &str,
    ) -> Result<Self> {
        let cols: Vec<&[f64]> = x_names
            .iter()
            .map(|n| pop.aux.x_column(n))
            .collect::<Result<_>>()?;
        let y_col = pop.y_column(y_name)?;
        let mut y = Vec::with_capacity(rep.rows.len());
        let mut x = Vec::with_capacity(rep.rows.len());
        let mut domain = Vec::with_capacity(rep.rows.len());
        for &row in &rep.rows {
            y.push(y_col[row]);
            x.push(cols.iter().map(|c| c[row]).collect());
            domain.push(pop.aux.domain.code(row) as usize);
        }
        Ok(Self {
            rep_index: rep.rep_index,
            y,
            x,
            domain,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn n_xvars(&self) -> usize {
        self.x.first().map_or(0, |r| r.len())
    }

    /// Per-domain sample sizes, indexed like `PopulationMoments::domains`.
    pub fn domain_sizes(&self, n_domains: usize) -> Vec<usize> {
        let mut sizes = vec![0usize; n_domains];
        for &d in &self.domain {
            sizes[d] += 1;
        }
        sizes
    }
}

/// Variance-component fit summary for the EBLUPs.
#[derive(Debug, Clone, Serialize)]
pub struct MixedModelFit {
    pub estimator: EstimatorKind,
    pub beta: Vec<f64>,
    pub sigma2_v: f64,
    /// Unit-level error variance; BHF only.
    pub sigma2_e: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// True when the moment fallback replaced a non-converged REML fit.
    pub used_fallback: bool,
    /// Asymptotic covariance of the variance parameters (inverse REML
    /// information): 1x1 for FH, 2x2 for BHF. Feeds the g3 term.
    pub vcov: Vec<Vec<f64>>,
}

/// Run the requested estimators on one replicate. The Fay–Herriot fit
/// consumes Horvitz–Thompson records from the same replicate, so HT runs
/// whenever FH is requested even if not listed.
pub fn run_estimators(
    sample: &SampleData,
    moments: &PopulationMoments,
    which: &[EstimatorKind],
) -> Result<Vec<EstimateRecord>> {
    let mut out = Vec::new();
    let needs_ht = which.contains(&EstimatorKind::Ht) || which.contains(&EstimatorKind::Fh);
    let ht = if needs_ht {
        Some(ht_estimate(sample, moments)?)
    } else {
        None
    };
    for kind in which {
        match kind {
            EstimatorKind::Ht => out.extend(ht.clone().unwrap()),
            EstimatorKind::Greg => out.extend(greg_estimate(sample, moments)?),
            EstimatorKind::Fh => {
                let (records, _) = fh_estimate(ht.as_ref().unwrap(), moments, sample.rep_index)?;
                out.extend(records);
            }
            EstimatorKind::Bhf => {
                let (records, _) = bhf_estimate(sample, moments)?;
                out.extend(records);
            }
        }
    }
    Ok(out)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_value).unwrap_or_default()
}

pub fn emit_estimates(records: &[EstimateRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "rep_index",
        "estimator",
        "domain_id",
        "n_d",
        "estimate",
        "mse_hat",
        "ci_low",
        "ci_high",
        "flags",
    ])?;
    for r in records {
        w.write_record([
            r.rep_index.to_string(),
            r.estimator.as_str().to_string(),
            r.domain.clone(),
            r.n_d.to_string(),
            fmt_opt(r.estimate),
            fmt_opt(r.mse_hat),
            fmt_opt(r.ci_low),
            fmt_opt(r.ci_high),
            r.flags.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_estimates(path: &Path) -> Result<Vec<EstimateRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let parse_opt = |s: &str, row: usize, col: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>().map(Some).map_err(|_| Error::ParseFailure {
                row,
                column: col.to_string(),
                value: s.to_string(),
            })
        }
    };
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let field = |j: usize| rec.get(j).unwrap_or("");
        let estimator = EstimatorKind::parse(field(1)).ok_or_else(|| Error::ParseFailure {
            row: i,
            column: "estimator".into(),
            value: field(1).to_string(),
        })?;
        out.push(EstimateRecord {
            rep_index: field(0).parse().map_err(|_| Error::ParseFailure {
                row: i,
                column: "rep_index".into(),
                value: field(0).to_string(),
            })?,
            estimator,
            domain: field(2).to_string(),
            n_d: field(3).parse().map_err(|_| Error::ParseFailure {
                row: i,
                column: "n_d".into(),
                value: field(3).to_string(),
            })?,
            estimate: parse_opt(field(4), i, "estimate")?,
            mse_hat: parse_opt(field(5), i, "mse_hat")?,
            ci_low: parse_opt(field(6), i, "ci_low")?,
            ci_high: parse_opt(field(7), i, "ci_high")?,
            flags: if field(8).is_empty() {
                Vec::new()
            } else {
                field(8).split(';').map(str::to_string).collect()
            },
        });
    }
    Ok(out)
}

/// Per-domain mean and n-1 variance of a slice of values; used by both the
/// direct estimator and the GREG residual variance.
pub(crate) fn group_stats(
    values: &[f64],
    domain: &[usize],
    n_domains: usize,
) -> (Vec<usize>, Vec<f64>, Vec<f64>) {
    let mut n = vec![0usize; n_domains];
    let mut sum = vec![0.0; n_domains];
    for (&v, &d) in values.iter().zip(domain) {
        n[d] += 1;
        sum[d] += v;
    }
    let mean: Vec<f64> = sum
        .iter()
        .zip(&n)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let mut ss = vec![0.0; n_domains];
    for (&v, &d) in values.iter().zip(domain) {
        let dv = v - mean[d];
        ss[d] += dv * dv;
    }
    let var = ss
        .iter()
        .zip(&n)
        .map(|(s, &c)| if c > 1 { s / (c - 1) as f64 } else { f64::NAN })
        .collect();
    (n, mean, var)
}

/// Design matrix with a leading intercept column.
pub(crate) fn design_matrix(x: &[Vec<f64>]) -> nalgebra::DMatrix<f64> {
    let n = x.len();
    let p = x.first().map_or(0, |r| r.len());
    nalgebra::DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] })
}

/// Least squares via the normal equations; errors on a rank-deficient
/// design (Cholesky of X'X fails).
pub(crate) fn ols(
    xmat: &nalgebra::DMatrix<f64>,
    y: &nalgebra::DVector<f64>,
) -> Result<nalgebra::DVector<f64>> {
    let xtx = xmat.transpose() * xmat;
    let xty = xmat.transpose() * y;
    let chol = xtx.cholesky().ok_or(Error::RankDeficientDesign)?;
    Ok(chol.solve(&xty))
}

/// Tally how many records each estimator produced, for run summaries.
pub fn count_by_estimator(records: &[EstimateRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry(r.estimator.as_str().to_string()).or_insert(0) += 1;
    }
    counts
}
