//! Area-level EBLUP: direct estimates regressed on population domain
//! means, area-effect variance by REML, shrinkage toward the synthetic
//! regression prediction, Prasad–Rao MSE.

use nalgebra::{DMatrix, DVector};

use super::{
    design_matrix, ols, EstimateRecord, EstimatorKind, MixedModelFit, PopulationMoments,
    REML_MAX_ITER, REML_TOL,
};
use crate::error::{Error, Result};

struct FhData {
    /// Domain index (into moments) of each fitted area.
    idx: Vec<usize>,
    yhat: Vec<f64>,
    psi: Vec<f64>,
    /// m x p design: intercept + population mean auxiliaries.
    x: DMatrix<f64>,
}

/// GLS pieces at a given sigma2_v: weights, X'WX inverse, beta, residuals.
struct GlsState {
    w: Vec<f64>,
    tinv: DMatrix<f64>,
    beta: DVector<f64>,
    resid: Vec<f64>,
}

fn gls_at(data: &FhData, theta: f64) -> Result<GlsState> {
    let m = data.yhat.len();
    let p = data.x.ncols();
    let w: Vec<f64> = data.psi.iter().map(|psi| 1.0 / (theta + psi)).collect();
    let mut t = DMatrix::zeros(p, p);
    let mut u = DVector::zeros(p);
    for d in 0..m {
        let row = data.x.row(d).transpose();
        t += w[d] * &row * row.transpose();
        u += w[d] * data.yhat[d] * &row;
    }
    let tinv = t
        .clone()
        .cholesky()
        .ok_or(Error::RankDeficientDesign)?
        .inverse();
    let beta = &tinv * u;
    let resid: Vec<f64> = (0..m)
        .map(|d| data.yhat[d] - data.x.row(d).transpose().dot(&beta))
        .collect();
    Ok(GlsState { w, tinv, beta, resid })
}

/// REML score and expected information for sigma2_v, via the projection
/// matrix identities tr(P) = tr(W) - tr(T^-1 X'W^2 X) and
/// tr(P^2) = tr(W^2) - 2 tr(T^-1 X'W^3 X) + tr((T^-1 X'W^2 X)^2).
fn score_info(data: &FhData, state: &GlsState) -> (f64, f64) {
    let m = data.yhat.len();
    let p = data.x.ncols();
    let mut a2 = DMatrix::zeros(p, p); // X'W^2 X
    let mut a3 = DMatrix::zeros(p, p); // X'W^3 X
    for d in 0..m {
        let row = data.x.row(d).transpose();
        let outer = &row * row.transpose();
        a2 += state.w[d] * state.w[d] * &outer;
        a3 += state.w[d] * state.w[d] * state.w[d] * outer;
    }
    let tr_p = state.w.iter().sum::<f64>() - (&state.tinv * &a2).trace();
    let py_sq: f64 = state
        .resid
        .iter()
        .zip(&state.w)
        .map(|(r, w)| (w * r) * (w * r))
        .sum();
    let ta = &state.tinv * &a2;
    let tr_p2 = state.w.iter().map(|w| w * w).sum::<f64>()
        - 2.0 * (&state.tinv * &a3).trace()
        + (&ta * &ta).trace();
    let score = 0.5 * (py_sq - tr_p);
    let info = 0.5 * tr_p2;
    (score, info)
}

/// Prasad–Rao moment estimator, the fallback when Fisher scoring fails:
/// sigma2_v = [RSS_ols - sum psi_d (1 - h_d)] / (m - p), truncated at 0.
fn moment_estimate(data: &FhData) -> Result<f64> {
    let m = data.yhat.len();
    let p = data.x.ncols();
    let y = DVector::from_column_slice(&data.yhat);
    let beta = ols(&data.x, &y)?;
    let xtx_inv = (data.x.transpose() * &data.x)
        .cholesky()
        .ok_or(Error::RankDeficientDesign)?
        .inverse();
    let mut rss = 0.0;
    let mut adj = 0.0;
    for d in 0..m {
        let row = data.x.row(d).transpose();
        let r = data.yhat[d] - row.dot(&beta);
        rss += r * r;
        let h = (row.transpose() * &xtx_inv * &row)[(0, 0)];
        adj += data.psi[d] * (1.0 - h);
    }
    Ok(((rss - adj) / (m - p) as f64).max(0.0))
}

/// Fay–Herriot EBLUP from one replicate's direct (HT) records.
///
/// Domains whose direct estimate carries a positive variance enter the
/// model fit. Empty domains get synthetic-only predictions flagged
/// `out_of_sample`; singleton domains (no variance) get the synthetic
/// prediction flagged `psi_missing`.
pub fn fh_estimate(
    direct: &[EstimateRecord],
    moments: &PopulationMoments,
    rep_index: usize,
) -> Result<(Vec<EstimateRecord>, MixedModelFit)> {
    let by_domain: Vec<Option<&EstimateRecord>> = moments
        .domains
        .iter()
        .map(|dom| direct.iter().find(|r| &r.domain == dom))
        .collect();

    let mut idx = Vec::new();
    let mut yhat = Vec::new();
    let mut psi = Vec::new();
    for (d, rec) in by_domain.iter().enumerate() {
        if let Some(r) = rec {
            if let (Some(est), Some(mse)) = (r.estimate, r.mse_hat) {
                if mse > 0.0 && mse.is_finite() {
                    idx.push(d);
                    yhat.push(est);
                    psi.push(mse);
                }
            }
        }
    }
    let p = moments.x_names.len() + 1;
    if yhat.len() < p + 2 {
        return Err(Error::TooFewDomains {
            have: yhat.len(),
            need: p + 2,
        });
    }
    let rows: Vec<Vec<f64>> = idx.iter().map(|&d| moments.xbar[d].clone()).collect();
    let data = FhData {
        idx,
        yhat,
        psi,
        x: design_matrix(&rows),
    };

    // Fisher scoring from the truncated moment start.
    let psi_mean = data.psi.iter().sum::<f64>() / data.psi.len() as f64;
    let mut theta = moment_estimate(&data)?;
    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=REML_MAX_ITER {
        iterations = it;
        let state = gls_at(&data, theta)?;
        let (score, info) = score_info(&data, &state);
        if !(info.is_finite() && info > 0.0) {
            break;
        }
        let next = (theta + score / info).max(0.0);
        let delta = (next - theta).abs();
        theta = next;
        if delta <= REML_TOL * theta.max(1e-10 * psi_mean) {
            converged = true;
            break;
        }
    }
    let mut used_fallback = false;
    if !converged {
        theta = moment_estimate(&data)?;
        used_fallback = true;
    }

    let state = gls_at(&data, theta)?;
    // Asymptotic variance of the REML sigma2_v: inverse expected information.
    let (_, info) = score_info(&data, &state);
    let vbar = if info > 0.0 { 1.0 / info } else { 0.0 };

    let synthetic = |d: usize| -> f64 {
        state.beta[0]
            + moments.xbar[d]
                .iter()
                .zip(state.beta.iter().skip(1))
                .map(|(x, b)| x * b)
                .sum::<f64>()
    };
    let quad = |d: usize| -> f64 {
        let mut row = DVector::zeros(moments.x_names.len() + 1);
        row[0] = 1.0;
        for (j, &x) in moments.xbar[d].iter().enumerate() {
            row[j + 1] = x;
        }
        (row.transpose() * &state.tinv * &row)[(0, 0)]
    };

    let mut records = Vec::with_capacity(moments.n_domains());
    for d in 0..moments.n_domains() {
        let domain = moments.domains[d].clone();
        let fit_pos = data.idx.iter().position(|&i| i == d);
        let mut rec = EstimateRecord {
            rep_index,
            estimator: EstimatorKind::Fh,
            domain,
            n_d: by_domain[d].map_or(0, |r| r.n_d),
            estimate: None,
            mse_hat: None,
            ci_low: None,
            ci_high: None,
            flags: Vec::new(),
        };
        if used_fallback {
            rec.flags.push("reml_fallback".into());
        }
        match fit_pos {
            Some(i) => {
                let psi_d = data.psi[i];
                let gamma = theta / (theta + psi_d);
                rec.estimate = Some(gamma * data.yhat[i] + (1.0 - gamma) * synthetic(d));
                let g1 = gamma * psi_d;
                let g2 = (1.0 - gamma) * (1.0 - gamma) * quad(d);
                let g3 = psi_d * psi_d / (theta + psi_d).powi(3) * vbar;
                rec.set_mse(g1 + g2 + 2.0 * g3);
            }
            None => match by_domain[d].and_then(|r| r.estimate.zip(r.mse_hat)) {
                // psi = 0 is the gamma -> 1 limit: no shrinkage at all.
                Some((est, _)) => {
                    rec.estimate = Some(est);
                    rec.set_mse(0.0);
                    rec.flags.push("zero_psi".into());
                }
                // No usable direct variance: synthetic prediction. The
                // prediction error is the area effect plus the regression
                // uncertainty.
                None => {
                    rec.estimate = Some(synthetic(d));
                    rec.set_mse(theta + quad(d));
                    let flag = match by_domain[d].and_then(|r| r.estimate) {
                        Some(_) => "psi_missing",
                        None => "out_of_sample",
                    };
                    rec.flags.push(flag.into());
                }
            },
        }
        records.push(rec);
    }

    let fit = MixedModelFit {
        estimator: EstimatorKind::Fh,
        beta: state.beta.iter().copied().collect(),
        sigma2_v: theta,
        sigma2_e: None,
        iterations,
        converged,
        used_fallback,
        vcov: vec![vec![vbar]],
    };
    Ok((records, fit))
}
