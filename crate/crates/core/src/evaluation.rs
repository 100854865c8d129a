//! Replicate aggregation and population diagnostics.
//!
//! Metrics: per (estimator, domain) relative bias, empirical MSE, the
//! MSE-estimator-to-empirical-MSE ratio, and 95% interval coverage, all
//! against the artificial population's domain truth. Diagnostics: eCDF
//! pairs, per-domain SD agreement, donor usage, and the donor-domain by
//! recipient-domain crosstab.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datamodel::{fmt_value, ArtificialPopulation, SurveyFrame};
use crate::error::{Error, Result};
use crate::estimators::{EstimateRecord, EstimatorKind};
use crate::imputer::DomainTruth;

// ---------------------------------------------------------------------------
// scalar metric operations

/// (mean(estimates) - truth) / truth.
pub fn relative_bias(estimates: &[f64], truth: f64) -> Result<f64> {
    if truth == 0.0 {
        return Err(Error::ZeroTruth(String::new()));
    }
    let mean = estimates.iter().sum::<f64>() / estimates.len() as f64;
    Ok((mean - truth) / truth)
}

/// Mean squared deviation from truth over replicates.
pub fn empirical_mse(estimates: &[f64], truth: f64) -> f64 {
    estimates.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / estimates.len() as f64
}

/// mean(mse_hat) / empirical MSE.
pub fn mse_ratio(estimates: &[f64], mse_hats: &[f64], truth: f64) -> Result<f64> {
    let emp = empirical_mse(estimates, truth);
    if emp == 0.0 {
        return Err(Error::DegenerateMse {
            estimator: String::new(),
            domain: String::new(),
        });
    }
    Ok(mse_hats.iter().sum::<f64>() / mse_hats.len() as f64 / emp)
}

/// Share of intervals containing the truth.
pub fn ci_coverage(intervals: &[(f64, f64)], truth: f64) -> f64 {
    let hits = intervals
        .iter()
        .filter(|(lo, hi)| *lo <= truth && truth <= *hi)
        .count();
    hits as f64 / intervals.len() as f64
}

// ---------------------------------------------------------------------------
// aggregation

/// One (estimator, domain) row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricCell {
    pub estimator: EstimatorKind,
    pub domain: String,
    /// Replicates with a complete record (estimate, mse, CI).
    pub k_used: usize,
    /// Replicates where the estimator produced no usable record.
    pub k_excluded: usize,
    pub truth: f64,
    pub relative_bias: f64,
    /// Standard error of the replicate mean; |relative_bias| below
    /// ~3 se_mean/truth is indistinguishable from zero bias.
    pub se_mean: f64,
    pub empirical_mse: f64,
    /// `None` when the empirical MSE is exactly zero.
    pub mse_ratio: Option<f64>,
    pub coverage_95: f64,
    pub zero_proportion: f64,
}

/// Share of exactly-zero response values among in-scope units, per domain.
pub fn zero_proportion(pop: &ArtificialPopulation, y_name: &str) -> Result<BTreeMap<String, f64>> {
    let y = pop.y_column(y_name)?;
    let mut zeros: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for i in 0..pop.n_rows() {
        if !pop.aux.in_scope[i] {
            continue;
        }
        let entry = zeros
            .entry(pop.aux.domain.label(i).to_string())
            .or_insert((0, 0));
        entry.1 += 1;
        if y[i] == 0.0 {
            entry.0 += 1;
        }
    }
    Ok(zeros
        .into_iter()
        .map(|(d, (z, n))| (d, z as f64 / n as f64))
        .collect())
}

/// Aggregate estimate records into metric cells against the population
/// truth for one response. A record counts toward K only when it carries
/// the full triple (estimate, mse_hat, CI); partial records — singleton
/// domains, empty domains — are tallied as exclusions.
pub fn summarize_metrics(
    records: &[EstimateRecord],
    truth: &DomainTruth,
    y_name: &str,
    zero_prop: &BTreeMap<String, f64>,
) -> Result<Vec<MetricCell>> {
    let mut cells: BTreeMap<(&'static str, String), (Vec<&EstimateRecord>, usize)> =
        BTreeMap::new();
    for rec in records {
        let key = (rec.estimator.as_str(), rec.domain.clone());
        let entry = cells.entry(key).or_default();
        if rec.estimate.is_some() && rec.mse_hat.is_some() && rec.ci_low.is_some() {
            entry.0.push(rec);
        } else {
            entry.1 += 1;
        }
    }
    let mut out = Vec::new();
    for ((est_name, domain), (recs, excluded)) in cells {
        let estimator = EstimatorKind::parse(est_name).unwrap();
        if recs.is_empty() {
            continue;
        }
        let mu = truth
            .mean(y_name, &domain)
            .ok_or_else(|| Error::MissingVariable(format!("truth for domain `{domain}`")))?;
        if mu == 0.0 {
            return Err(Error::ZeroTruth(domain));
        }
        let estimates: Vec<f64> = recs.iter().map(|r| r.estimate.unwrap()).collect();
        let mse_hats: Vec<f64> = recs.iter().map(|r| r.mse_hat.unwrap()).collect();
        let intervals: Vec<(f64, f64)> = recs
            .iter()
            .map(|r| (r.ci_low.unwrap(), r.ci_high.unwrap()))
            .collect();
        let k = estimates.len();
        let mean = estimates.iter().sum::<f64>() / k as f64;
        let var_est = if k > 1 {
            estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1) as f64
        } else {
            0.0
        };
        let emp = empirical_mse(&estimates, mu);
        out.push(MetricCell {
            estimator,
            domain: domain.clone(),
            k_used: k,
            k_excluded: excluded,
            truth: mu,
            relative_bias: (mean - mu) / mu,
            se_mean: (var_est / k as f64).sqrt(),
            empirical_mse: emp,
            mse_ratio: mse_ratio(&estimates, &mse_hats, mu).ok(),
            coverage_95: ci_coverage(&intervals, mu),
            zero_proportion: zero_prop.get(&domain).copied().unwrap_or(0.0),
        });
    }
    Ok(out)
}

pub fn emit_metrics(cells: &[MetricCell], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "estimator",
        "domain_id",
        "k_used",
        "k_excluded",
        "truth",
        "relative_bias",
        "se_mean",
        "empirical_mse",
        "mse_ratio",
        "coverage_95",
        "zero_proportion",
    ])?;
    for c in cells {
        w.write_record([
            c.estimator.as_str().to_string(),
            c.domain.clone(),
            c.k_used.to_string(),
            c.k_excluded.to_string(),
            fmt_value(c.truth),
            fmt_value(c.relative_bias),
            fmt_value(c.se_mean),
            fmt_value(c.empirical_mse),
            c.mse_ratio.map(fmt_value).unwrap_or_default(),
            fmt_value(c.coverage_95),
            fmt_value(c.zero_proportion),
        ])?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// diagnostics

/// Empirical CDF as a step table: sorted distinct values and cumulative
/// proportions.
#[derive(Debug, Clone, PartialEq)]
pub struct EcdfTable {
    pub values: Vec<f64>,
    pub cum: Vec<f64>,
}

pub fn ecdf(values: &[f64]) -> EcdfTable {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let mut out_v = Vec::new();
    let mut out_c = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        if i + 1 < sorted.len() && sorted[i + 1] == v {
            continue; // keep only the last occurrence: full step height
        }
        out_v.push(v);
        out_c.push((i + 1) as f64 / n);
    }
    EcdfTable {
        values: out_v,
        cum: out_c,
    }
}

impl EcdfTable {
    /// F(x): proportion of mass at or below x.
    pub fn at(&self, x: f64) -> f64 {
        match self.values.partition_point(|v| *v <= x) {
            0 => 0.0,
            i => self.cum[i - 1],
        }
    }
}

/// Two-sample Kolmogorov–Smirnov distance: sup |F1 - F2| over the pooled
/// support.
pub fn ks_distance(a: &EcdfTable, b: &EcdfTable) -> f64 {
    let mut d: f64 = 0.0;
    for x in a.values.iter().chain(&b.values) {
        d = d.max((a.at(*x) - b.at(*x)).abs());
    }
    d
}

/// Donor-sample vs artificial-population marginal comparison for one
/// response variable.
#[derive(Debug, Clone)]
pub struct MarginalDiag {
    pub variable: String,
    pub survey: EcdfTable,
    pub population: EcdfTable,
    pub ks: f64,
}

pub fn diag_marginals(
    survey: &SurveyFrame,
    pop: &ArtificialPopulation,
    variable: &str,
) -> Result<MarginalDiag> {
    let sv = ecdf(survey.y_column(variable)?);
    let pop_col = pop.y_column(variable)?;
    let in_scope: Vec<f64> = (0..pop.n_rows())
        .filter(|&i| pop.aux.in_scope[i])
        .map(|i| pop_col[i])
        .collect();
    let pv = ecdf(&in_scope);
    let ks = ks_distance(&sv, &pv);
    Ok(MarginalDiag {
        variable: variable.to_string(),
        survey: sv,
        population: pv,
        ks,
    })
}

pub fn emit_marginals(diag: &MarginalDiag, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["source", "value", "cum_prop"])?;
    for (v, c) in diag.survey.values.iter().zip(&diag.survey.cum) {
        w.write_record(["survey", &fmt_value(*v), &fmt_value(*c)])?;
    }
    for (v, c) in diag.population.values.iter().zip(&diag.population.cum) {
        w.write_record(["population", &fmt_value(*v), &fmt_value(*c)])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-domain SD agreement between the donor sample and the artificial
/// population, for one response.
#[derive(Debug, Clone)]
pub struct DomainSdDiag {
    pub variable: String,
    pub domains: Vec<String>,
    /// Sample SD (n-1) over survey units of the domain; missing below 2.
    pub sd_survey: Vec<Option<f64>>,
    pub sd_population: Vec<Option<f64>>,
    /// Pearson correlation of the SD pairs across domains with both sides
    /// present; missing with fewer than two such domains.
    pub correlation: Option<f64>,
}

fn sd_by_group(values: &[f64], labels: &[String]) -> BTreeMap<String, (usize, f64)> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (v, l) in values.iter().zip(labels) {
        acc.entry(l.clone()).or_default().push(*v);
    }
    acc.into_iter()
        .map(|(l, vs)| {
            let n = vs.len();
            let mean = vs.iter().sum::<f64>() / n as f64;
            let sd = if n > 1 {
                (vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                f64::NAN
            };
            (l, (n, sd))
        })
        .collect()
}

pub fn diag_domain_sd(
    survey: &SurveyFrame,
    pop: &ArtificialPopulation,
    variable: &str,
) -> Result<DomainSdDiag> {
    let sv_vals = survey.y_column(variable)?;
    let sv_labels: Vec<String> = (0..survey.n_rows())
        .map(|i| survey.domain.label(i).to_string())
        .collect();
    let sv_sd = sd_by_group(sv_vals, &sv_labels);

    let pop_col = pop.y_column(variable)?;
    let mut pop_vals = Vec::new();
    let mut pop_labels = Vec::new();
    for i in 0..pop.n_rows() {
        if pop.aux.in_scope[i] {
            pop_vals.push(pop_col[i]);
            pop_labels.push(pop.aux.domain.label(i).to_string());
        }
    }
    let pop_sd = sd_by_group(&pop_vals, &pop_labels);

    let mut domains: Vec<String> = sv_sd.keys().chain(pop_sd.keys()).cloned().collect();
    domains.sort();
    domains.dedup();

    let take = |map: &BTreeMap<String, (usize, f64)>, d: &String| -> Option<f64> {
        map.get(d)
            .and_then(|(n, sd)| if *n > 1 { Some(*sd) } else { None })
    };
    let sd_survey: Vec<Option<f64>> = domains.iter().map(|d| take(&sv_sd, d)).collect();
    let sd_population: Vec<Option<f64>> = domains.iter().map(|d| take(&pop_sd, d)).collect();

    let pairs: Vec<(f64, f64)> = sd_survey
        .iter()
        .zip(&sd_population)
        .filter_map(|(a, b)| a.zip(*b))
        .collect();
    let correlation = if pairs.len() >= 2 {
        let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = crate::preprocess::pearson(&a, &b);
        r.is_finite().then_some(r)
    } else {
        None
    };
    Ok(DomainSdDiag {
        variable: variable.to_string(),
        domains,
        sd_survey,
        sd_population,
        correlation,
    })
}

pub fn emit_domain_sd(diag: &DomainSdDiag, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["domain_id", "sd_survey", "sd_population"])?;
    for (d, (a, b)) in diag
        .domains
        .iter()
        .zip(diag.sd_survey.iter().zip(&diag.sd_population))
    {
        w.write_record([
            d.clone(),
            a.map(fmt_value).unwrap_or_default(),
            b.map(fmt_value).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-donor pool membership and actual-usage counts.
#[derive(Debug, Clone)]
pub struct DonorUsageDiag {
    pub donor_id: Vec<i64>,
    pub stratum: Vec<String>,
    pub usage_count: Vec<u64>,
    /// Present only when the population retained its neighbor pools.
    pub pool_count: Option<Vec<u64>>,
    pub never_in_pool: Vec<i64>,
    pub pooled_never_used: Vec<i64>,
}

pub fn diag_donor_usage(
    pop: &ArtificialPopulation,
    survey: &SurveyFrame,
) -> Result<DonorUsageDiag> {
    let any_imputed = (0..pop.n_rows()).any(|i| pop.aux.in_scope[i] && pop.donor_id[i] >= 0);
    if !any_imputed {
        return Err(Error::ProvenanceMissing);
    }
    let index: BTreeMap<i64, usize> = survey
        .plot_id
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let mut usage = vec![0u64; survey.n_rows()];
    for i in 0..pop.n_rows() {
        if pop.aux.in_scope[i] && pop.donor_id[i] >= 0 {
            if let Some(&j) = index.get(&pop.donor_id[i]) {
                usage[j] += 1;
            }
        }
    }
    let pool_count = pop.neighbor_pools.as_ref().map(|pools| {
        let mut counts = vec![0u64; survey.n_rows()];
        for pool in pools {
            for id in pool {
                if let Some(&j) = index.get(id) {
                    counts[j] += 1;
                }
            }
        }
        counts
    });
    let never_in_pool = pool_count
        .as_ref()
        .map(|pc| {
            (0..survey.n_rows())
                .filter(|&j| pc[j] == 0)
                .map(|j| survey.plot_id[j])
                .collect()
        })
        .unwrap_or_default();
    let pooled_never_used = pool_count
        .as_ref()
        .map(|pc| {
            (0..survey.n_rows())
                .filter(|&j| pc[j] > 0 && usage[j] == 0)
                .map(|j| survey.plot_id[j])
                .collect()
        })
        .unwrap_or_default();
    Ok(DonorUsageDiag {
        donor_id: survey.plot_id.clone(),
        stratum: (0..survey.n_rows())
            .map(|i| survey.stratum.label(i).to_string())
            .collect(),
        usage_count: usage,
        pool_count,
        never_in_pool,
        pooled_never_used,
    })
}

pub fn emit_donor_usage(diag: &DonorUsageDiag, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["donor_id", "stratum", "usage_count", "pool_count"])?;
    for j in 0..diag.donor_id.len() {
        w.write_record([
            diag.donor_id[j].to_string(),
            diag.stratum[j].clone(),
            diag.usage_count[j].to_string(),
            diag.pool_count
                .as_ref()
                .map(|pc| pc[j].to_string())
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Donor-domain by recipient-domain contingency table.
#[derive(Debug, Clone)]
pub struct CrosstabDiag {
    /// Row labels: donor (survey) domains. Column labels: recipient
    /// (population) domains.
    pub donor_domains: Vec<String>,
    pub recipient_domains: Vec<String>,
    pub counts: Vec<Vec<u64>>,
    pub total: u64,
    /// Share of recipients whose donor came from their own domain.
    pub same_domain_share: f64,
}

pub fn diag_donor_crosstab(
    pop: &ArtificialPopulation,
    survey: &SurveyFrame,
) -> Result<CrosstabDiag> {
    let index: BTreeMap<i64, usize> = survey
        .plot_id
        .iter()
        .enumerate()
        .map(|(i, &id)| (id, i))
        .collect();
    let donor_domains: Vec<String> = survey.domain.levels().to_vec();
    let recipient_domains: Vec<String> = pop.aux.domain.levels().to_vec();
    let mut counts = vec![vec![0u64; recipient_domains.len()]; donor_domains.len()];
    let mut total = 0u64;
    let mut same = 0u64;
    for i in 0..pop.n_rows() {
        if !pop.aux.in_scope[i] || pop.donor_id[i] < 0 {
            continue;
        }
        let j = *index
            .get(&pop.donor_id[i])
            .ok_or(Error::ProvenanceMissing)?;
        let dr = survey.domain.code(j) as usize;
        let rc = pop.aux.domain.code(i) as usize;
        counts[dr][rc] += 1;
        total += 1;
        if survey.domain.label(j) == pop.aux.domain.label(i) {
            same += 1;
        }
    }
    if total == 0 {
        return Err(Error::ProvenanceMissing);
    }
    Ok(CrosstabDiag {
        donor_domains,
        recipient_domains,
        counts,
        total,
        same_domain_share: same as f64 / total as f64,
    })
}

pub fn emit_donor_crosstab(diag: &CrosstabDiag, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["donor_domain".to_string()];
    header.extend(diag.recipient_domains.iter().cloned());
    w.write_record(&header)?;
    for (d, row) in diag.donor_domains.iter().zip(&diag.counts) {
        let mut rec = vec![d.clone()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
