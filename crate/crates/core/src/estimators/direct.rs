//! Direct and model-assisted estimators: domain sample means with the
//! with-replacement variance approximation, and a GREG whose regression
//! coefficients are pooled over the full replicate sample.

use nalgebra::DVector;

use super::{design_matrix, group_stats, ols, EstimateRecord, EstimatorKind, PopulationMoments, SampleData};
use crate::error::Result;

/// Horvitz–Thompson under the self-weighting design: domain sample mean,
/// mse_hat = s2_d / n_d. Domains with one unit get a point estimate but no
/// variance; empty domains get a missing record.
pub fn ht_estimate(
    sample: &SampleData,
    moments: &PopulationMoments,
) -> Result<Vec<EstimateRecord>> {
    let (n, mean, var) = group_stats(&sample.y, &sample.domain, moments.n_domains());
    let mut out = Vec::with_capacity(moments.n_domains());
    for d in 0..moments.n_domains() {
        let domain = &moments.domains[d];
        if n[d] == 0 {
            out.push(EstimateRecord::empty(
                sample.rep_index,
                EstimatorKind::Ht,
                domain,
                "no_sample",
            ));
            continue;
        }
        let mut rec = EstimateRecord {
            rep_index: sample.rep_index,
            estimator: EstimatorKind::Ht,
            domain: domain.clone(),
            n_d: n[d],
            estimate: Some(mean[d]),
            mse_hat: None,
            ci_low: None,
            ci_high: None,
            flags: Vec::new(),
        };
        if n[d] < 2 {
            rec.flags.push("domain_too_small".into());
        } else {
            rec.set_mse(var[d] / n[d] as f64);
        }
        out.push(rec);
    }
    Ok(out)
}

/// Modified GREG: one OLS fit over the whole sample, then per-domain
/// estimate X̄_d'β̂ plus the domain mean residual. mse_hat is the domain
/// residual variance over n_d.
pub fn greg_estimate(
    sample: &SampleData,
    moments: &PopulationMoments,
) -> Result<Vec<EstimateRecord>> {
    let xmat = design_matrix(&sample.x);
    let y = DVector::from_column_slice(&sample.y);
    let beta = ols(&xmat, &y)?;
    let resid = y - &xmat * &beta;
    let resid_slice: Vec<f64> = resid.iter().copied().collect();
    let (n, mean_resid, var_resid) =
        group_stats(&resid_slice, &sample.domain, moments.n_domains());
    let mut out = Vec::with_capacity(moments.n_domains());
    for d in 0..moments.n_domains() {
        let domain = &moments.domains[d];
        if n[d] == 0 {
            out.push(EstimateRecord::empty(
                sample.rep_index,
                EstimatorKind::Greg,
                domain,
                "no_sample",
            ));
            continue;
        }
        let synthetic = beta[0]
            + moments.xbar[d]
                .iter()
                .zip(beta.iter().skip(1))
                .map(|(x, b)| x * b)
                .sum::<f64>();
        let mut rec = EstimateRecord {
            rep_index: sample.rep_index,
            estimator: EstimatorKind::Greg,
            domain: domain.clone(),
            n_d: n[d],
            estimate: Some(synthetic + mean_resid[d]),
            mse_hat: None,
            ci_low: None,
            ci_high: None,
            flags: Vec::new(),
        };
        if n[d] < 2 {
            rec.flags.push("domain_too_small".into());
        } else {
            rec.set_mse(var_resid[d] / n[d] as f64);
        }
        out.push(rec);
    }
    Ok(out)
}
