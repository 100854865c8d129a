//! Self-contained synthetic inputs: a clustered unit population with
//! auxiliary variables, generative responses (linear mean, domain effect,
//! noise, optional zero inflation), and a one-per-cluster survey drawn
//! from it. Stands in for real census + survey inputs in tests, sweeps,
//! and demos; the generative truth stays available for calibration runs.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    emit_auxiliary, emit_survey, AuxiliaryFrame, Categorical, SurveyFrame,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub population_size: usize,
    pub clusters: usize,
    pub domains: usize,
    pub strata: usize,
    pub seed: u64,
    /// Mean model for y1: intercept + coefficients on x1..x3.
    pub beta: [f64; 4],
    /// Variance of the shared domain effect.
    pub sigma2_domain: f64,
    /// Unit noise variance.
    pub sigma2_noise: f64,
    /// Top of the zero-share ramp: domain d zeroes out responses with
    /// probability `zero_inflation * d / (domains - 1)`, so per-domain
    /// zero shares span [0, zero_inflation].
    pub zero_inflation: f64,
    /// Share of units marked out of scope.
    pub out_of_scope_share: f64,
}

impl FixtureSpec {
    /// The large benchmark layout: 100k units, 500 clusters, 10 domains,
    /// 2 strata.
    pub fn standard(seed: u64) -> Self {
        Self {
            population_size: 100_000,
            clusters: 500,
            domains: 10,
            strata: 2,
            seed,
            beta: [10.0, 1.5, -0.8, 0.5],
            sigma2_domain: 1.0,
            sigma2_noise: 4.0,
            zero_inflation: 0.0,
            out_of_scope_share: 0.0,
        }
    }

    /// Small layout for fast tests: 4k units, 100 clusters, 5 domains.
    pub fn desk(seed: u64) -> Self {
        Self {
            population_size: 4_000,
            clusters: 100,
            domains: 5,
            strata: 2,
            seed,
            ..Self::standard(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.population_size == 0 || self.clusters == 0 || self.domains == 0 || self.strata == 0
        {
            return Err(Error::Config("fixture sizes must be >= 1".into()));
        }
        if self.clusters > self.population_size {
            return Err(Error::Config("more clusters than units".into()));
        }
        if self.domains > self.clusters {
            return Err(Error::Config("more domains than clusters".into()));
        }
        for (name, p) in [
            ("zero_inflation", self.zero_inflation),
            ("out_of_scope_share", self.out_of_scope_share),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}

/// Generated inputs plus the generative ground truth.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub aux: AuxiliaryFrame,
    pub survey: SurveyFrame,
    pub y_names: Vec<String>,
    /// True responses of every population unit, column-major like
    /// `SurveyFrame::y`; the survey rows are exact copies of theirs.
    pub y_true: Vec<Vec<f64>>,
}

impl Fixture {
    /// Brute-force per-domain means of the true responses over in-scope
    /// units: what a perfect estimator would target.
    pub fn true_domain_means(&self, y_name: &str) -> Result<std::collections::BTreeMap<String, f64>> {
        let j = self
            .y_names
            .iter()
            .position(|n| n == y_name)
            .ok_or_else(|| Error::MissingVariable(y_name.to_string()))?;
        let mut acc: std::collections::BTreeMap<String, (f64, f64)> = Default::default();
        for i in 0..self.aux.n_rows() {
            if self.aux.in_scope[i] {
                let e = acc.entry(self.aux.domain.label(i).to_string()).or_default();
                e.0 += self.y_true[j][i];
                e.1 += 1.0;
            }
        }
        Ok(acc.into_iter().map(|(d, (s, n))| (d, s / n)).collect())
    }
}

/// Build the fixture. Clusters partition the unit range contiguously;
/// each cluster belongs to one domain, so a one-per-cluster design yields
/// roughly `clusters / domains` sampled units per domain. Strata alternate
/// by cluster.
pub fn make_fixture(spec: &FixtureSpec) -> Result<Fixture> {
    spec.validate()?;
    let n = spec.population_size;

    let mut domain_effect = Vec::with_capacity(spec.domains);
    let mut domain_effect2 = Vec::with_capacity(spec.domains);
    for d in 0..spec.domains {
        let mut r = rng::stream(spec.seed, "fixture-domain", &[d as u64]);
        let z: f64 = r.sample(StandardNormal);
        let z2: f64 = r.sample(StandardNormal);
        domain_effect.push(spec.sigma2_domain.sqrt() * z);
        domain_effect2.push(spec.sigma2_domain.sqrt() * 0.5 * z2);
    }

    let mut unit_id = Vec::with_capacity(n);
    let mut cluster_id = Vec::with_capacity(n);
    let mut domain = Categorical::new();
    let mut stratum = Categorical::new();
    let mut in_scope = Vec::with_capacity(n);
    let mut x1 = Vec::with_capacity(n);
    let mut x2 = Vec::with_capacity(n);
    let mut x3 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y2 = Vec::with_capacity(n);

    let zero_ramp = |d: usize| -> f64 {
        if spec.domains < 2 {
            spec.zero_inflation
        } else {
            spec.zero_inflation * d as f64 / (spec.domains - 1) as f64
        }
    };

    for i in 0..n {
        let cluster = i * spec.clusters / n;
        let d = cluster * spec.domains / spec.clusters;
        let mut r = rng::stream(spec.seed, "fixture-unit", &[i as u64]);
        // stratum is a unit attribute (a donation class), not a cluster
        // one: mixing strata within clusters keeps one-per-cluster samples
        // from being implicitly stratified
        let s = r.gen_range(0..spec.strata);
        let z1: f64 = r.sample(StandardNormal);
        let z2: f64 = r.sample(StandardNormal);
        let z3: f64 = r.sample(StandardNormal);
        let e1: f64 = r.sample(StandardNormal);
        let e2: f64 = r.sample(StandardNormal);

        // domain-shifted, mutually correlated auxiliaries; the 4-sigma
        // steps on x1 keep small neighbor pools inside the recipient's own
        // domain, so domain-level response structure survives imputation
        // until k outgrows the per-domain donor pool
        let shift = 4.0 * d as f64;
        let xv1 = 5.0 + shift + z1;
        let xv2 = 2.0 + 0.6 * z1 + 0.8 * z2;
        let xv3 = 0.25 * shift + 0.5 * z3;

        // noise grows across domains, giving per-domain SDs a ramp the
        // SD-agreement diagnostic can latch onto
        let nsd = spec.sigma2_noise.sqrt()
            * (0.5 + d as f64 / (spec.domains.saturating_sub(1).max(1)) as f64);
        let lin1 = spec.beta[0]
            + spec.beta[1] * xv1
            + spec.beta[2] * xv2
            + spec.beta[3] * xv3
            + domain_effect[d]
            + nsd * e1;
        let lin2 = 2.0 + 0.3 * xv1 + 0.1 * xv3 + domain_effect2[d] + 0.5 * nsd * e2;
        // responses are nonnegative; the clamp floor keeps "no zero
        // inflation" populations strictly positive
        let mut yv1 = lin1.max(0.01);
        let mut yv2 = lin2.max(0.01);
        if spec.zero_inflation > 0.0 && r.gen::<f64>() < zero_ramp(d) {
            yv1 = 0.0;
            yv2 = 0.0;
        }
        let scoped = spec.out_of_scope_share == 0.0 || r.gen::<f64>() >= spec.out_of_scope_share;

        unit_id.push(i as i64 + 1);
        cluster_id.push(cluster as i64 + 1);
        domain.push(&format!("d{d:02}"));
        stratum.push(&format!("s{s}"));
        in_scope.push(scoped);
        x1.push(xv1);
        x2.push(xv2);
        x3.push(xv3);
        y1.push(yv1);
        y2.push(yv2);
    }

    let aux = AuxiliaryFrame {
        unit_id,
        cluster_id,
        domain,
        stratum,
        in_scope,
        x_names: vec!["x1".into(), "x2".into(), "x3".into()],
        x: vec![x1, x2, x3],
    };

    // survey: one in-scope unit per cluster, uniformly
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); spec.clusters];
    for i in 0..n {
        if aux.in_scope[i] {
            members[(aux.cluster_id[i] - 1) as usize].push(i);
        }
    }
    let mut plot_id = Vec::new();
    let mut s_domain = Categorical::new();
    let mut s_stratum = Categorical::new();
    let mut s_x: Vec<Vec<f64>> = vec![Vec::new(); 3];
    let mut s_y: Vec<Vec<f64>> = vec![Vec::new(); 2];
    for (c, rows) in members.iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let mut r = rng::stream(spec.seed, "fixture-survey", &[c as u64]);
        let pick = rows[r.gen_range(0..rows.len())];
        plot_id.push(aux.unit_id[pick]);
        s_domain.push(aux.domain.label(pick));
        s_stratum.push(aux.stratum.label(pick));
        for j in 0..3 {
            s_x[j].push(aux.x[j][pick]);
        }
        s_y[0].push(y1[pick]);
        s_y[1].push(y2[pick]);
    }
    let survey = SurveyFrame {
        plot_id,
        domain: s_domain,
        stratum: s_stratum,
        x_names: aux.x_names.clone(),
        x: s_x,
        y_names: vec!["y1".into(), "y2".into()],
        y: s_y,
    };

    Ok(Fixture {
        aux,
        survey,
        y_names: vec!["y1".into(), "y2".into()],
        y_true: vec![y1, y2],
    })
}

/// Write `auxiliary.csv` and `survey.csv` under `dir`; also
/// `truth.csv` (unit_id + true responses) for calibration work.
pub fn emit_fixture(fix: &Fixture, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    emit_auxiliary(&fix.aux, &dir.join("auxiliary.csv"))?;
    emit_survey(&fix.survey, &dir.join("survey.csv"))?;
    let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
    let mut header = vec!["unit_id".to_string()];
    header.extend(fix.y_names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..fix.aux.n_rows() {
        let mut rec = vec![fix.aux.unit_id[i].to_string()];
        for col in &fix.y_true {
            rec.push(crate::datamodel::fmt_value(col[i]));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
