//! Independent recomputation of all four estimators on a small fixture.
//!
//! The library computes GLS/REML quantities through per-domain closed
//! forms; this oracle builds the full dense covariance and projection
//! matrices instead and grinds through the textbook formulas directly.
//! Same stopping rules, disjoint algebra — agreement to 1e-8 relative is
//! the bar.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use simpop::estimators::{
    bhf_estimate, fh_estimate, greg_estimate, ht_estimate, EstimateRecord, PopulationMoments,
    SampleData, REML_MAX_ITER, REML_TOL,
};

pub const N_DOM: usize = 5;
pub const N_PER: usize = 10;

pub fn normals(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen::<f64>();
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect()
}

/// 5 domains x 10 units, two covariates, real area effects.
pub fn fixture() -> (SampleData, PopulationMoments) {
    let n = N_DOM * N_PER;
    let zx1 = normals(101, n);
    let zx2 = normals(102, n);
    let zv = normals(103, N_DOM);
    let ze = normals(104, n);
    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut domain = Vec::new();
    for d in 0..N_DOM {
        for j in 0..N_PER {
            let i = d * N_PER + j;
            let x1 = 2.0 + zx1[i];
            let x2 = -1.0 + 0.5 * zx2[i];
            y.push(3.0 + 1.5 * x1 - 0.8 * x2 + 0.9 * zv[d] + 1.2 * ze[i]);
            x.push(vec![x1, x2]);
            domain.push(d);
        }
    }
    let moments = PopulationMoments {
        domains: (0..N_DOM).map(|d| format!("d{d}")).collect(),
        counts: vec![400; N_DOM],
        x_names: vec!["x1".into(), "x2".into()],
        xbar: (0..N_DOM)
            .map(|d| vec![2.0 + 0.1 * d as f64, -1.0 + 0.04 * (d * d) as f64])
            .collect(),
    };
    (
        SampleData {
            rep_index: 1,
            y,
            x,
            domain,
        },
        moments,
    )
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1e-12)
}

fn assert_record(rec: &EstimateRecord, est: f64, mse: f64, label: &str) {
    assert!(
        rel_close(rec.estimate.unwrap(), est, 1e-8),
        "{label} estimate: {} vs oracle {est}",
        rec.estimate.unwrap()
    );
    assert!(
        rel_close(rec.mse_hat.unwrap(), mse, 1e-8),
        "{label} mse: {} vs oracle {mse}",
        rec.mse_hat.unwrap()
    );
}

fn design(sample: &SampleData) -> DMatrix<f64> {
    DMatrix::from_fn(sample.n(), 3, |i, j| {
        if j == 0 {
            1.0
        } else {
            sample.x[i][j - 1]
        }
    })
}

fn pop_row(moments: &PopulationMoments, d: usize) -> DVector<f64> {
    DVector::from_vec(vec![1.0, moments.xbar[d][0], moments.xbar[d][1]])
}

pub fn check_ht_oracle() {
    let (sample, moments) = fixture();
    let recs = ht_estimate(&sample, &moments).unwrap();
    for d in 0..N_DOM {
        let ys: Vec<f64> = (0..sample.n())
            .filter(|&i| sample.domain[i] == d)
            .map(|i| sample.y[i])
            .collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let s2 = ys.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_record(&recs[d], mean, s2 / n, "ht");
    }
}

pub fn check_greg_oracle() {
    let (sample, moments) = fixture();
    let recs = greg_estimate(&sample, &moments).unwrap();
    let xmat = design(&sample);
    let y = DVector::from_column_slice(&sample.y);
    let beta = (xmat.transpose() * &xmat).try_inverse().unwrap() * xmat.transpose() * &y;
    let resid = &y - &xmat * &beta;
    for d in 0..N_DOM {
        let rs: Vec<f64> = (0..sample.n())
            .filter(|&i| sample.domain[i] == d)
            .map(|i| resid[i])
            .collect();
        let n = rs.len() as f64;
        let rbar = rs.iter().sum::<f64>() / n;
        let s2 = rs.iter().map(|v| (v - rbar).powi(2)).sum::<f64>() / (n - 1.0);
        let est = pop_row(&moments, d).dot(&beta) + rbar;
        assert_record(&recs[d], est, s2 / n, "greg");
    }
}

/// Dense FH REML: full m x m V, P = V^-1 - V^-1 X (X'V^-1X)^-1 X'V^-1.
pub fn check_fh_oracle() {
    let (sample, moments) = fixture();
    let directs = ht_estimate(&sample, &moments).unwrap();
    let (recs, fit) = fh_estimate(&directs, &moments, 1).unwrap();

    let m = N_DOM;
    let yhat = DVector::from_iterator(m, directs.iter().map(|r| r.estimate.unwrap()));
    let psi: Vec<f64> = directs.iter().map(|r| r.mse_hat.unwrap()).collect();
    let x = DMatrix::from_fn(m, 3, |d, j| pop_row(&moments, d)[j]);

    let p_of = |theta: f64| -> DMatrix<f64> {
        let vinv = DMatrix::from_diagonal(&DVector::from_iterator(
            m,
            psi.iter().map(|ps| 1.0 / (theta + ps)),
        ));
        let t = x.transpose() * &vinv * &x;
        &vinv - &vinv * &x * t.try_inverse().unwrap() * x.transpose() * &vinv
    };
    // moment start: [RSS - sum psi (1-h)] / (m - p), truncated
    let hat = &x * (x.transpose() * &x).try_inverse().unwrap() * x.transpose();
    let resid_ols = &yhat - &hat * &yhat;
    let adj: f64 = (0..m).map(|d| psi[d] * (1.0 - hat[(d, d)])).sum();
    let moment = ((resid_ols.dot(&resid_ols) - adj) / (m - 3) as f64).max(0.0);
    let psi_mean = psi.iter().sum::<f64>() / m as f64;

    let mut theta = moment;
    let mut converged = false;
    for _ in 0..REML_MAX_ITER {
        let p = p_of(theta);
        let py = &p * &yhat;
        let score = 0.5 * (py.dot(&py) - p.trace());
        let info = 0.5 * (&p * &p).trace();
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
    assert!(converged);
    assert!(
        rel_close(fit.sigma2_v, theta, 1e-8),
        "sigma2_v {} vs {}",
        fit.sigma2_v,
        theta
    );

    let vinv = DMatrix::from_diagonal(&DVector::from_iterator(
        m,
        psi.iter().map(|ps| 1.0 / (theta + ps)),
    ));
    let tinv = (x.transpose() * &vinv * &x).try_inverse().unwrap();
    let beta = &tinv * x.transpose() * &vinv * &yhat;
    let p = p_of(theta);
    let vbar = 1.0 / (0.5 * (&p * &p).trace());
    for d in 0..m {
        let gamma = theta / (theta + psi[d]);
        let xr = pop_row(&moments, d);
        let est = gamma * yhat[d] + (1.0 - gamma) * xr.dot(&beta);
        let g1 = gamma * psi[d];
        let g2 = (1.0 - gamma).powi(2) * (xr.transpose() * &tinv * &xr)[(0, 0)];
        let g3 = psi[d].powi(2) / (theta + psi[d]).powi(3) * vbar;
        assert_record(&recs[d], est, g1 + g2 + 2.0 * g3, "fh");
    }
}

/// Dense BHF REML: the full 50x50 covariance sigma2_e I + sigma2_v ZZ'.
pub fn check_bhf_oracle() {
    let (sample, moments) = fixture();
    let (recs, fit) = bhf_estimate(&sample, &moments).unwrap();

    let n = sample.n();
    let x = design(&sample);
    let y = DVector::from_column_slice(&sample.y);
    let z = DMatrix::from_fn(n, N_DOM, |i, d| {
        if sample.domain[i] == d {
            1.0
        } else {
            0.0
        }
    });
    let zzt = &z * z.transpose();
    let eye = DMatrix::<f64>::identity(n, n);

    let p_of = |sv: f64, se: f64| -> DMatrix<f64> {
        let v = se * &eye + sv * &zzt;
        let vinv = v.try_inverse().unwrap();
        let t = x.transpose() * &vinv * &x;
        &vinv - &vinv * &x * t.try_inverse().unwrap() * x.transpose() * &vinv
    };

    // same start: pooled OLS residual variance split 1:3
    let beta0 = (x.transpose() * &x).try_inverse().unwrap() * x.transpose() * &y;
    let resid0 = &y - &x * beta0;
    let s2 = resid0.dot(&resid0) / (n - 3) as f64;
    let se_floor = (s2 * 1e-12).max(1e-300);
    let (mut sv, mut se) = (0.25 * s2, (0.75 * s2).max(se_floor));
    let mut converged = false;
    for _ in 0..REML_MAX_ITER {
        let p = p_of(sv, se);
        let py = &p * &y;
        let score_v = 0.5 * ((py.transpose() * &zzt * &py)[(0, 0)] - (&p * &zzt).trace());
        let score_e = 0.5 * (py.dot(&py) - p.trace());
        let pz = &p * &zzt;
        let i_vv = 0.5 * (&pz * &pz).trace();
        let i_ve = 0.5 * (&pz * &p).trace();
        let i_ee = 0.5 * (&p * &p).trace();
        let info = nalgebra::Matrix2::new(i_vv, i_ve, i_ve, i_ee);
        let score = nalgebra::Vector2::new(score_v, score_e);
        let step = info.try_inverse().unwrap() * score;
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
    assert!(converged);
    assert!(
        rel_close(fit.sigma2_v, sv, 1e-8),
        "sigma2_v {} vs {}",
        fit.sigma2_v,
        sv
    );
    assert!(
        rel_close(fit.sigma2_e.unwrap(), se, 1e-8),
        "sigma2_e {:?} vs {}",
        fit.sigma2_e,
        se
    );

    let v = se * &eye + sv * &zzt;
    let vinv = v.try_inverse().unwrap();
    let tinv = (x.transpose() * &vinv * &x).try_inverse().unwrap();
    let beta = &tinv * x.transpose() * &vinv * &y;
    // dense info inverse at the fit for g3
    let p = p_of(sv, se);
    let pz = &p * &zzt;
    let info = nalgebra::Matrix2::new(
        0.5 * (&pz * &pz).trace(),
        0.5 * (&pz * &p).trace(),
        0.5 * (&pz * &p).trace(),
        0.5 * (&p * &p).trace(),
    );
    let vcov = info.try_inverse().unwrap();

    for d in 0..N_DOM {
        let rows: Vec<usize> = (0..n).filter(|&i| sample.domain[i] == d).collect();
        let nd = rows.len() as f64;
        let gamma = nd * sv / (nd * sv + se);
        let ybar = rows.iter().map(|&i| sample.y[i]).sum::<f64>() / nd;
        let mut xbar_s = DVector::zeros(3);
        for &i in &rows {
            xbar_s += x.row(i).transpose();
        }
        xbar_s /= nd;
        let xr = pop_row(&moments, d);
        let est = xr.dot(&beta) + gamma * (ybar - xbar_s.dot(&beta));
        let g1 = gamma * se / nd;
        let md = &xr - gamma * &xbar_s;
        let g2 = (md.transpose() * &tinv * &md)[(0, 0)];
        let g3 = (se * se * vcov[(0, 0)] - 2.0 * sv * se * vcov[(0, 1)]
            + sv * sv * vcov[(1, 1)])
            / ((sv + se / nd).powi(3) * nd * nd);
        assert_record(&recs[d], est, g1 + g2 + 2.0 * g3.max(0.0), "bhf");
    }
}
