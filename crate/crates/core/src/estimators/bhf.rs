//! Unit-level nested-error EBLUP. The covariance of each domain block is
//! sigma2_e I + sigma2_v J, so its inverse lives in span{I, J}:
//!
//!   V_d^-1 = (1/sigma2_e) [ I - (gamma_d / n_d) J ],
//!   gamma_d = n_d sigma2_v / (n_d sigma2_v + sigma2_e).
//!
//! Every GLS and REML quantity then reduces to per-domain sufficient
//! statistics (X'X, X'1, X'y, 1'y, y'y), which keeps the fit O(n p^2)
//! regardless of domain sizes.

use nalgebra::{DMatrix, DVector, Matrix2, Vector2};

use super::{
    EstimateRecord, EstimatorKind, MixedModelFit, PopulationMoments, SampleData, REML_MAX_ITER,
    REML_TOL,
};
use crate::error::{Error, Result};

/// Sufficient statistics of one occupied domain; design rows include the
/// intercept, so `t[0] = n` and `s[0][0] = n`.
struct DomStat {
    n: f64,
    s: DMatrix<f64>,
    t: DVector<f64>,
    q: DVector<f64>,
    u: f64,
    yy: f64,
}

struct Blocks {
    p: usize,
    /// Moments index of each occupied domain, parallel to `doms`.
    idx: Vec<usize>,
    doms: Vec<DomStat>,
}

fn collect_blocks(sample: &SampleData, n_domains: usize) -> Blocks {
    let p = sample.n_xvars() + 1;
    let mut slots: Vec<Option<DomStat>> = (0..n_domains).map(|_| None).collect();
    let mut row = DVector::zeros(p);
    for i in 0..sample.n() {
        row[0] = 1.0;
        for (j, &x) in sample.x[i].iter().enumerate() {
            row[j + 1] = x;
        }
        let y = sample.y[i];
        let st = slots[sample.domain[i]].get_or_insert_with(|| DomStat {
            n: 0.0,
            s: DMatrix::zeros(p, p),
            t: DVector::zeros(p),
            q: DVector::zeros(p),
            u: 0.0,
            yy: 0.0,
        });
        st.n += 1.0;
        st.s += &row * row.transpose();
        st.t += &row;
        st.q += y * &row;
        st.u += y;
        st.yy += y * y;
    }
    let mut idx = Vec::new();
    let mut doms = Vec::new();
    for (d, slot) in slots.into_iter().enumerate() {
        if let Some(st) = slot {
            idx.push(d);
            doms.push(st);
        }
    }
    Blocks { p, idx, doms }
}

/// GLS state at fixed variance components.
struct Gls {
    tinv: DMatrix<f64>,
    beta: DVector<f64>,
    /// e'e per domain, e = y - X beta.
    ee: Vec<f64>,
    /// 1'e per domain.
    se1: Vec<f64>,
}

fn gamma_of(n: f64, sv: f64, se: f64) -> f64 {
    if sv <= 0.0 {
        0.0
    } else {
        n * sv / (n * sv + se)
    }
}

fn gls_at(blocks: &Blocks, sv: f64, se: f64) -> Result<Gls> {
    let a = 1.0 / se;
    let mut t = DMatrix::zeros(blocks.p, blocks.p);
    let mut rhs = DVector::zeros(blocks.p);
    for st in &blocks.doms {
        let b = -a * gamma_of(st.n, sv, se) / st.n;
        t += a * &st.s + b * &st.t * st.t.transpose();
        rhs += a * &st.q + b * st.u * &st.t;
    }
    let tinv = t.cholesky().ok_or(Error::RankDeficientDesign)?.inverse();
    let beta = &tinv * rhs;
    let mut ee = Vec::with_capacity(blocks.doms.len());
    let mut se1 = Vec::with_capacity(blocks.doms.len());
    for st in &blocks.doms {
        let bq = beta.dot(&st.q);
        let bsb = (beta.transpose() * &st.s * &beta)[(0, 0)];
        ee.push(st.yy - 2.0 * bq + bsb);
        se1.push(st.u - st.t.dot(&beta));
    }
    Ok(Gls { tinv, beta, ee, se1 })
}

/// REML score vector and expected information for (sigma2_v, sigma2_e),
/// from trace identities in the {I, J} block algebra. With W = V^-1 per
/// domain, c = (1 - gamma)/sigma2_e satisfies WJ = cJ and WJW = c^2 J.
fn score_info(blocks: &Blocks, gls: &Gls, sv: f64, se: f64) -> (Vector2<f64>, Matrix2<f64>) {
    let p = blocks.p;
    let a = 1.0 / se;
    let mut a1 = DMatrix::zeros(p, p); // X' WJW X          = sum c^2 t t'
    let mut a2 = DMatrix::zeros(p, p); // X' W^2 X
    let mut b_vv = DMatrix::zeros(p, p); // X' WJWJW X      = sum c^3 n t t'
    let mut b_ve = DMatrix::zeros(p, p); // X' WJW.W X      = sum c^3 t t'
    let mut b_ee = DMatrix::zeros(p, p); // X' W^3 X
    let (mut tr_wj, mut tr_w, mut tr_wjwj, mut tr_wjw, mut tr_ww) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut q_v, mut q_e) = (0.0, 0.0);
    for (i, st) in blocks.doms.iter().enumerate() {
        let n = st.n;
        let g = gamma_of(n, sv, se);
        let b = -a * g / n;
        let c = a * (1.0 - g);
        let w2 = 2.0 * a * b + b * b * n; // J-coefficient of W^2
        let w3 = 3.0 * a * a * b + 3.0 * a * b * b * n + b.powi(3) * n * n; // of W^3
        let outer = &st.t * st.t.transpose();
        a1 += c * c * &outer;
        a2 += a * a * &st.s + w2 * &outer;
        b_vv += c.powi(3) * n * &outer;
        b_ve += c.powi(3) * &outer;
        b_ee += a.powi(3) * &st.s + w3 * &outer;
        tr_wj += n * c;
        tr_w += n * (a + b);
        tr_wjwj += c * c * n * n;
        tr_wjw += c * c * n;
        tr_ww += n * (a * a + w2);
        q_v += c * c * gls.se1[i] * gls.se1[i];
        q_e += a * a * gls.ee[i] + w2 * gls.se1[i] * gls.se1[i];
    }
    let ta1 = &gls.tinv * &a1;
    let ta2 = &gls.tinv * &a2;
    let score_v = 0.5 * (q_v - (tr_wj - ta1.trace()));
    let score_e = 0.5 * (q_e - (tr_w - ta2.trace()));
    let i_vv = 0.5 * (tr_wjwj - 2.0 * (&gls.tinv * &b_vv).trace() + (&ta1 * &ta1).trace());
    let i_ve = 0.5 * (tr_wjw - 2.0 * (&gls.tinv * &b_ve).trace() + (&ta1 * &ta2).trace());
    let i_ee = 0.5 * (tr_ww - 2.0 * (&gls.tinv * &b_ee).trace() + (&ta2 * &ta2).trace());
    (
        Vector2::new(score_v, score_e),
        Matrix2::new(i_vv, i_ve, i_ve, i_ee),
    )
}

/// ANOVA-style moment fallback: unit variance from within-domain centered
/// residuals, area variance from the between-domain mean square of pooled
/// OLS residuals. Approximate, but always finite; flagged when used.
fn moment_estimate(sample: &SampleData, blocks: &Blocks) -> Result<(f64, f64)> {
    let n = sample.n() as f64;
    let m = blocks.doms.len() as f64;
    let px = sample.n_xvars();

    // Within-domain regression on centered data (no intercept).
    let mut xc = DMatrix::zeros(sample.n(), px.max(1));
    let mut yc = DVector::zeros(sample.n());
    let means: Vec<(Vec<f64>, f64)> = blocks
        .doms
        .iter()
        .map(|st| {
            let xm: Vec<f64> = (0..px).map(|j| st.t[j + 1] / st.n).collect();
            (xm, st.u / st.n)
        })
        .collect();
    let pos_of: std::collections::BTreeMap<usize, usize> =
        blocks.idx.iter().enumerate().map(|(i, &d)| (d, i)).collect();
    for i in 0..sample.n() {
        let pos = pos_of[&sample.domain[i]];
        let (xm, ym) = &means[pos];
        yc[i] = sample.y[i] - ym;
        for j in 0..px {
            xc[(i, j)] = sample.x[i][j] - xm[j];
        }
    }
    let within_df = n - m - px as f64;
    if within_df <= 0.0 {
        return Err(Error::TooFewDomains {
            have: blocks.doms.len(),
            need: px + 2,
        });
    }
    let resid_w = if px == 0 {
        yc.clone()
    } else {
        // SVD least squares tolerates collinear centered covariates.
        let svd = xc.clone().svd(true, true);
        match svd.solve(&yc, 1e-12) {
            Ok(beta_w) => &yc - &xc * beta_w,
            Err(_) => yc.clone(),
        }
    };
    let sigma2_e = resid_w.dot(&resid_w) / within_df;

    // Between-domain component from pooled OLS residual means.
    let xmat = super::design_matrix(&sample.x);
    let y = DVector::from_column_slice(&sample.y);
    let beta = super::ols(&xmat, &y)?;
    let resid = &y - &xmat * beta;
    let mut dom_sum = vec![0.0; blocks.doms.len()];
    for i in 0..sample.n() {
        dom_sum[pos_of[&sample.domain[i]]] += resid[i];
    }
    let msb: f64 = dom_sum
        .iter()
        .zip(&blocks.doms)
        .map(|(s, st)| s * s / st.n)
        .sum::<f64>()
        / (m - 1.0).max(1.0);
    let nbar = (n - blocks.doms.iter().map(|st| st.n * st.n).sum::<f64>() / n) / (m - 1.0).max(1.0);
    let sigma2_v = ((msb - sigma2_e) / nbar.max(1.0)).max(0.0);
    Ok((sigma2_v, sigma2_e))
}

/// Battese–Harter–Fuller EBLUP for one replicate.
pub fn bhf_estimate(
    sample: &SampleData,
    moments: &PopulationMoments,
) -> Result<(Vec<EstimateRecord>, MixedModelFit)> {
    let blocks = collect_blocks(sample, moments.n_domains());
    let p = blocks.p;
    if blocks.doms.len() < 2 {
        return Err(Error::TooFewDomains {
            have: blocks.doms.len(),
            need: 2,
        });
    }
    if sample.n() < p + 2 {
        return Err(Error::RankDeficientDesign);
    }

    // Start from the pooled OLS residual variance, split 1:3 between the
    // area and unit components.
    let xmat = super::design_matrix(&sample.x);
    let y = DVector::from_column_slice(&sample.y);
    let beta0 = super::ols(&xmat, &y)?;
    let resid0 = &y - &xmat * beta0;
    let s2 = resid0.dot(&resid0) / (sample.n() - p).max(1) as f64;
    let se_floor = (s2 * 1e-12).max(1e-300);
    let mut sv = 0.25 * s2;
    let mut se = (0.75 * s2).max(se_floor);

    let mut converged = false;
    let mut iterations = 0;
    for it in 1..=REML_MAX_ITER {
        iterations = it;
        let gls = gls_at(&blocks, sv, se)?;
        let (score, info) = score_info(&blocks, &gls, sv, se);
        let step = match info.try_inverse() {
            Some(inv) => inv * score,
            None => break,
        };
        if !(step[0].is_finite() && step[1].is_finite()) {
            break;
        }
        // Halve the step until the unit variance stays positive.
        let mut scale = 1.0;
        let (mut next_sv, mut next_se) = (sv, se);
        for _ in 0..40 {
            next_sv = (sv + scale * step[0]).max(0.0);
            next_se = se + scale * step[1];
            if next_se > se_floor {
                break;
            }
            scale *= 0.5;
        }
        next_se = next_se.max(se_floor);
        let delta = (next_sv - sv).abs().max((next_se - se).abs());
        sv = next_sv;
        se = next_se;
        if delta <= REML_TOL * sv.max(se).max(1e-10 * s2.max(1e-300)) {
            converged = true;
            break;
        }
    }
    let mut used_fallback = false;
    if !converged {
        let (mv, me) = moment_estimate(sample, &blocks)?;
        sv = mv;
        se = me.max(se_floor);
        used_fallback = true;
    }

    let gls = gls_at(&blocks, sv, se)?;
    let (_, info) = score_info(&blocks, &gls, sv, se);
    let vcov = info.try_inverse().unwrap_or_else(Matrix2::zeros);

    let pop_row = |d: usize| -> DVector<f64> {
        let mut row = DVector::zeros(p);
        row[0] = 1.0;
        for (j, &x) in moments.xbar[d].iter().enumerate() {
            row[j + 1] = x;
        }
        row
    };

    let mut records = Vec::with_capacity(moments.n_domains());
    for d in 0..moments.n_domains() {
        let mut rec = EstimateRecord {
            rep_index: sample.rep_index,
            estimator: EstimatorKind::Bhf,
            domain: moments.domains[d].clone(),
            n_d: 0,
            estimate: None,
            mse_hat: None,
            ci_low: None,
            ci_high: None,
            flags: Vec::new(),
        };
        if used_fallback {
            rec.flags.push("reml_fallback".into());
        }
        let xbar_pop = pop_row(d);
        let synthetic = xbar_pop.dot(&gls.beta);
        match blocks.idx.iter().position(|&i| i == d) {
            Some(pos) => {
                let st = &blocks.doms[pos];
                let n_d = st.n;
                rec.n_d = n_d as usize;
                let gamma = gamma_of(n_d, sv, se);
                let xbar_s = &st.t / n_d;
                let ybar_s = st.u / n_d;
                rec.estimate = Some(synthetic + gamma * (ybar_s - xbar_s.dot(&gls.beta)));
                let g1 = gamma * se / n_d;
                let md = &xbar_pop - gamma * &xbar_s;
                let g2 = (md.transpose() * &gls.tinv * &md)[(0, 0)];
                // g3 = n^-2 (sv + se/n)^-3 [se^2 Vvv - 2 sv se Vve + sv^2 Vee]
                let denom = (sv + se / n_d).powi(3) * n_d * n_d;
                let g3 = (se * se * vcov[(0, 0)] - 2.0 * sv * se * vcov[(0, 1)]
                    + sv * sv * vcov[(1, 1)])
                    / denom;
                rec.set_mse(g1 + g2 + 2.0 * g3.max(0.0));
            }
            None => {
                rec.estimate = Some(synthetic);
                rec.set_mse(sv + (xbar_pop.transpose() * &gls.tinv * &xbar_pop)[(0, 0)]);
                rec.flags.push("out_of_sample".into());
            }
        }
        records.push(rec);
    }

    let fit = MixedModelFit {
        estimator: EstimatorKind::Bhf,
        beta: gls.beta.iter().copied().collect(),
        sigma2_v: sv,
        sigma2_e: Some(se),
        iterations,
        converged,
        used_fallback,
        vcov: vec![
            vec![vcov[(0, 0)], vcov[(0, 1)]],
            vec![vcov[(1, 0)], vcov[(1, 1)]],
        ],
    };
    Ok((records, fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn normals(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u1: f64 = rng.gen_range(1e-12..1.0);
                let u2: f64 = rng.gen::<f64>();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    fn moments(xbar: &[f64]) -> PopulationMoments {
        PopulationMoments {
            domains: (0..xbar.len()).map(|d| format!("d{d}")).collect(),
            counts: vec![500; xbar.len()],
            x_names: vec!["x1".into()],
            xbar: xbar.iter().map(|&v| vec![v]).collect(),
        }
    }

    /// Nested-error data: y = 1 + 2x + v_d + e, per-domain sizes given.
    fn nested_data(seed: u64, sizes: &[usize], sv: f64, se: f64) -> SampleData {
        let n: usize = sizes.iter().sum();
        let zv = normals(seed, sizes.len());
        let ze = normals(seed + 1, n);
        let zx = normals(seed + 2, n);
        let mut y = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n);
        let mut domain = Vec::with_capacity(n);
        let mut i = 0;
        for (d, &nd) in sizes.iter().enumerate() {
            for _ in 0..nd {
                let xv = 3.0 + zx[i];
                y.push(1.0 + 2.0 * xv + sv.sqrt() * zv[d] + se.sqrt() * ze[i]);
                x.push(vec![xv]);
                domain.push(d);
                i += 1;
            }
        }
        SampleData { rep_index: 1, y, x, domain }
    }

    #[test]
    fn gamma_shrinkage_limits() {
        assert_eq!(gamma_of(10.0, 0.0, 4.0), 0.0);
        // gamma increases in n_d and approaches 1
        let gs: Vec<f64> = [1.0, 5.0, 50.0, 5000.0]
            .iter()
            .map(|&n| gamma_of(n, 1.0, 4.0))
            .collect();
        for w in gs.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(gs[3] > 0.999);
        assert_relative_eq!(gamma_of(4.0, 1.0, 4.0), 0.5);
    }

    #[test]
    fn reml_recovers_both_components() {
        let sizes = vec![10; 30];
        let s = nested_data(5, &sizes, 1.0, 4.0);
        let m = moments(&(0..30).map(|d| 2.0 + 0.1 * d as f64).collect::<Vec<_>>());
        let (recs, fit) = bhf_estimate(&s, &m).unwrap();
        assert!(fit.converged && !fit.used_fallback, "iters {}", fit.iterations);
        assert!((fit.sigma2_v - 1.0).abs() < 0.6, "sigma2_v {}", fit.sigma2_v);
        assert!((fit.sigma2_e.unwrap() - 4.0).abs() < 1.0, "sigma2_e {:?}", fit.sigma2_e);
        assert!((fit.beta[1] - 2.0).abs() < 0.3);
        for rec in &recs {
            assert!(rec.mse_hat.unwrap() >= 0.0);
            assert!(rec.ci_low.unwrap() <= rec.estimate.unwrap());
        }
    }

    #[test]
    fn zero_domain_effects_shrink_to_synthetic() {
        // residual means exactly zero in every domain: REML truncates at 0
        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut domain = Vec::new();
        for d in 0..8 {
            for (j, e) in [-1.0, 1.0, -2.0, 2.0].iter().enumerate() {
                let xv = (d * 4 + j) as f64 * 0.3;
                y.push(0.5 + 1.2 * xv + e);
                x.push(vec![xv]);
                domain.push(d);
            }
        }
        let s = SampleData { rep_index: 1, y, x, domain };
        let m = moments(&(0..8).map(|d| d as f64).collect::<Vec<_>>());
        let (recs, fit) = bhf_estimate(&s, &m).unwrap();
        assert_eq!(fit.sigma2_v, 0.0);
        for (d, rec) in recs.iter().enumerate() {
            let synthetic = fit.beta[0] + fit.beta[1] * m.xbar[d][0];
            assert_relative_eq!(rec.estimate.unwrap(), synthetic, epsilon = 1e-8);
        }
    }

    #[test]
    fn predictor_is_convex_combination() {
        let sizes = vec![6; 10];
        let s = nested_data(9, &sizes, 2.0, 1.0);
        let m = moments(&(0..10).map(|d| 3.0 + 0.2 * d as f64).collect::<Vec<_>>());
        let (recs, fit) = bhf_estimate(&s, &m).unwrap();
        let blocks = collect_blocks(&s, m.n_domains());
        let beta = DVector::from_column_slice(&fit.beta);
        for (pos, &d) in blocks.idx.iter().enumerate() {
            let st = &blocks.doms[pos];
            let synthetic = fit.beta[0] + fit.beta[1] * m.xbar[d][0];
            // the "survey regression" endpoint: gamma = 1
            let endpoint = synthetic + (st.u / st.n - (&st.t / st.n).dot(&beta));
            let est = recs[d].estimate.unwrap();
            let lo = synthetic.min(endpoint) - 1e-9;
            let hi = synthetic.max(endpoint) + 1e-9;
            assert!(est >= lo && est <= hi);
        }
    }

    #[test]
    fn out_of_sample_domain_gets_synthetic() {
        let sizes = vec![8; 6];
        let s = nested_data(13, &sizes, 1.0, 2.0);
        // moments carry a 7th domain never sampled
        let m = moments(&[3.0, 3.1, 3.2, 3.3, 3.4, 3.5, 9.0]);
        let (recs, fit) = bhf_estimate(&s, &m).unwrap();
        let rec = &recs[6];
        assert!(rec.flags.iter().any(|f| f == "out_of_sample"));
        assert_eq!(rec.n_d, 0);
        assert_relative_eq!(
            rec.estimate.unwrap(),
            fit.beta[0] + fit.beta[1] * 9.0,
            epsilon = 1e-9
        );
        assert!(rec.mse_hat.unwrap() >= fit.sigma2_v);
    }

    #[test]
    fn location_scale_equivariance() {
        let sizes = vec![7; 8];
        let s = nested_data(17, &sizes, 1.5, 2.5);
        let m = moments(&(0..8).map(|d| 2.5 + 0.3 * d as f64).collect::<Vec<_>>());
        let (base, _) = bhf_estimate(&s, &m).unwrap();
        let (a, sc) = (-6.0, 2.5);
        let mut shifted = s.clone();
        shifted.y.iter_mut().for_each(|v| *v += a);
        let mut scaled = s.clone();
        scaled.y.iter_mut().for_each(|v| *v *= sc);
        let (recs_sh, _) = bhf_estimate(&shifted, &m).unwrap();
        let (recs_sc, _) = bhf_estimate(&scaled, &m).unwrap();
        for ((b, sh), sl) in base.iter().zip(&recs_sh).zip(&recs_sc) {
            assert_relative_eq!(sh.estimate.unwrap(), b.estimate.unwrap() + a, epsilon = 1e-6);
            assert_relative_eq!(sh.mse_hat.unwrap(), b.mse_hat.unwrap(), max_relative = 1e-5);
            assert_relative_eq!(sl.estimate.unwrap(), b.estimate.unwrap() * sc, max_relative = 1e-6);
            assert_relative_eq!(
                sl.mse_hat.unwrap(),
                b.mse_hat.unwrap() * sc * sc,
                max_relative = 1e-5
            );
        }
    }

    #[test]
    fn too_few_domains_rejected() {
        let s = nested_data(19, &[12], 1.0, 1.0);
        let m = moments(&[3.0]);
        assert!(matches!(
            bhf_estimate(&s, &m),
            Err(Error::TooFewDomains { .. })
        ));
    }
}
