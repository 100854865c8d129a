//! Declarative runs: one TOML config drives generate → sample → estimate
//! → evaluate → diagnose into an artifact directory.
//!
//! Stages cache on content hashes of the config sections that feed them,
//! chained so that editing an upstream section invalidates everything
//! downstream. `summary.json` holds only run-deterministic facts; wall
//! times and cache hits go to `timings.json`, which is the one file
//! allowed to differ between identical runs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{
    emit_population, emit_survey, load_auxiliary_frame, load_population, load_survey_frame,
    validate_auxiliary, validate_cross_frames, validate_survey, ArtificialPopulation, AuxSchema,
    SurveyFrame, SurveySchema,
};
use crate::error::{Error, Result};
use crate::estimators::{
    bhf_estimate, emit_estimates, fh_estimate, greg_estimate, ht_estimate, EstimateRecord,
    EstimatorKind, PopulationMoments, SampleData,
};
use crate::evaluation::{
    diag_domain_sd, diag_donor_crosstab, diag_donor_usage, diag_marginals, emit_domain_sd,
    emit_donor_crosstab, emit_donor_usage, emit_marginals, emit_metrics, summarize_metrics,
    zero_proportion,
};
use crate::fixture::{emit_fixture, make_fixture, FixtureSpec};
use crate::imputer::{domain_truth, generate_population, ImputationConfig, ImputationMethod};
use crate::preprocess::{apply_transforms, fit_scaling, MatchingColumns, TransformSpec};
use crate::sampler::{draw_replicates, emit_replicates, load_replicates, DesignSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputsConfig {
    pub auxiliary: PathBuf,
    pub survey: PathBuf,
    pub x_vars: Vec<String>,
    pub y_vars: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct MatchingConfig {
    pub variables: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatorsConfig {
    pub list: Vec<EstimatorKind>,
    /// Auxiliary subset used by GREG/FH/BHF.
    pub x_vars: Vec<String>,
    /// Response evaluated across replicates; defaults to the first y.
    #[serde(default)]
    pub y_var: Option<String>,
}

/// The whole run, as parsed from TOML. Inputs come either from files
/// (`[inputs]`) or a generated fixture (`[fixture]`), never both.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub inputs: Option<InputsConfig>,
    #[serde(default)]
    pub fixture: Option<FixtureSpec>,
    #[serde(default)]
    pub transforms: Vec<TransformSpec>,
    pub matching: MatchingConfig,
    pub imputation: ImputationConfig,
    pub design: DesignSpec,
    pub estimators: EstimatorsConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("parse {path:?}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn x_vars(&self) -> Vec<String> {
        match (&self.inputs, &self.fixture) {
            (Some(inp), _) => inp.x_vars.clone(),
            (None, Some(_)) => vec!["x1".into(), "x2".into(), "x3".into()],
            _ => Vec::new(),
        }
    }

    pub fn y_vars(&self) -> Vec<String> {
        match (&self.inputs, &self.fixture) {
            (Some(inp), _) => inp.y_vars.clone(),
            (None, Some(_)) => vec!["y1".into(), "y2".into()],
            _ => Vec::new(),
        }
    }

    pub fn y_var(&self) -> String {
        self.estimators
            .y_var
            .clone()
            .unwrap_or_else(|| self.y_vars().first().cloned().unwrap_or_default())
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.inputs, &self.fixture) {
            (Some(_), Some(_)) => {
                return Err(Error::Config("config has both [inputs] and [fixture]".into()))
            }
            (None, None) => {
                return Err(Error::Config("config needs [inputs] or [fixture]".into()))
            }
            (None, Some(f)) => f.validate()?,
            _ => {}
        }
        let x_vars = self.x_vars();
        let subset = |name: &str, vars: &[String]| -> Result<()> {
            for v in vars {
                if !x_vars.contains(v) {
                    return Err(Error::Config(format!(
                        "{name} variable `{v}` is not an auxiliary column"
                    )));
                }
            }
            Ok(())
        };
        if self.matching.variables.is_empty() {
            return Err(Error::Config("matching variable list is empty".into()));
        }
        subset("matching", &self.matching.variables)?;
        subset("estimator", &self.estimators.x_vars)?;
        for t in &self.transforms {
            if !self.matching.variables.contains(&t.variable) {
                return Err(Error::Config(format!(
                    "transform on `{}` which is not a matching variable",
                    t.variable
                )));
            }
        }
        if self.estimators.list.is_empty() {
            return Err(Error::Config("estimator list is empty".into()));
        }
        if let Some(y) = &self.estimators.y_var {
            if !self.y_vars().contains(y) {
                return Err(Error::Config(format!("unknown response `{y}`")));
            }
        }
        self.imputation.validate()?;
        self.design.validate()?;
        Ok(())
    }
}

fn hash_json<T: Serialize>(parts: &[&str], value: &T) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    h.update(serde_json::to_vec(value).expect("serializable config"));
    format!("{:x}", h.finalize())
}

/// True when `path` exists and `<path>.hash` matches `hash`.
fn cache_valid(path: &Path, hash: &str) -> bool {
    path.exists()
        && std::fs::read_to_string(hash_path(path))
            .map(|h| h.trim() == hash)
            .unwrap_or(false)
}

fn hash_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".hash");
    PathBuf::from(os)
}

fn write_hash(path: &Path, hash: &str) -> Result<()> {
    std::fs::write(hash_path(path), hash)?;
    Ok(())
}

/// Run-deterministic facts: what was computed and from which inputs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub stage_hashes: BTreeMap<String, String>,
    pub imputation_seed: u64,
    pub design_seed: u64,
    pub population_rows: usize,
    pub in_scope_rows: usize,
    pub survey_rows: usize,
    pub replicates: usize,
    pub estimators: Vec<String>,
    pub y_var: String,
    pub estimate_records: usize,
    /// Per-estimator count of replicates where the fit itself failed.
    pub estimator_failures: BTreeMap<String, usize>,
    pub metric_rows: usize,
    pub same_domain_share: f64,
    /// KS distance survey-vs-population per response.
    pub ks_by_response: BTreeMap<String, f64>,
    /// Per-domain SD correlation per response (missing when undefined).
    pub sd_correlation_by_response: BTreeMap<String, Option<f64>>,
}

/// Wall-clock per stage plus cache hits; deliberately not part of the
/// deterministic artifact set.
#[derive(Debug, Clone, Serialize)]
pub struct RunTimings {
    pub stages: BTreeMap<String, StageTiming>,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageTiming {
    pub seconds: f64,
    pub cached: bool,
}

/// Pipeline stages in execution order; used to stop a run early.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageName {
    Generate,
    Sample,
    Estimate,
    Evaluate,
    Diagnose,
}

impl StageName {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "generate" => StageName::Generate,
            "sample" => StageName::Sample,
            "estimate" => StageName::Estimate,
            "evaluate" => StageName::Evaluate,
            "diagnose" => StageName::Diagnose,
            _ => return None,
        })
    }
}

fn write_timings(out_dir: &Path, timings: &RunTimings) -> Result<()> {
    let tj = serde_json::to_string_pretty(timings).expect("serializable timings");
    std::fs::write(out_dir.join("timings.json"), tj + "\n")?;
    Ok(())
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: stage.to_string(),
            source: Box::new(e),
        },
    }
}

/// Execute the full pipeline into `out_dir`. On failure a `FAILED` marker
/// naming the stage is left next to whatever partial outputs exist.
pub fn run_pipeline(cfg: &RunConfig, out_dir: &Path) -> Result<RunSummary> {
    Ok(run_pipeline_upto(cfg, out_dir, StageName::Diagnose)?.expect("full run yields a summary"))
}

/// Like [`run_pipeline`] but stops after `upto`; only a run that reaches
/// the final stage produces a summary.
pub fn run_pipeline_upto(
    cfg: &RunConfig,
    out_dir: &Path,
    upto: StageName,
) -> Result<Option<RunSummary>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let marker = out_dir.join("FAILED");
    let _ = std::fs::remove_file(&marker);
    match run_stages(cfg, out_dir, upto) {
        Ok(summary) => Ok(summary),
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => "config".into(),
            };
            let _ = std::fs::write(&marker, format!("{stage}\n"));
            Err(e)
        }
    }
}

fn run_stages(cfg: &RunConfig, out_dir: &Path, upto: StageName) -> Result<Option<RunSummary>> {
    let mut timings = RunTimings {
        stages: BTreeMap::new(),
    };
    let mut stage_hashes = BTreeMap::new();
    let config_hash = hash_json(&["config"], cfg);

    // -- generate ----------------------------------------------------------
    let gen_hash = hash_json(
        &["generate"],
        &(
            &cfg.inputs,
            &cfg.fixture,
            &cfg.transforms,
            &cfg.matching,
            &cfg.imputation,
        ),
    );
    stage_hashes.insert("generate".to_string(), gen_hash.clone());
    let pop_path = out_dir.join("population.csv");
    let survey_path = out_dir.join("survey.csv");
    let t0 = Instant::now();
    let gen_cached = cache_valid(&pop_path, &gen_hash) && cache_valid(&survey_path, &gen_hash);
    let (pop, survey) = (|| -> Result<(ArtificialPopulation, SurveyFrame)> {
        let survey_schema = SurveySchema::with_vars(cfg.x_vars(), cfg.y_vars());
        if gen_cached {
            let pop = load_population(&pop_path)?;
            let survey = load_survey_frame(&survey_path, &survey_schema)?;
            return Ok((pop, survey));
        }
        let (aux, survey) = match (&cfg.inputs, &cfg.fixture) {
            (Some(inp), None) => {
                let aux_schema = AuxSchema::with_x_vars(inp.x_vars.clone());
                let aux = load_auxiliary_frame(&inp.auxiliary, &aux_schema)?;
                let survey = load_survey_frame(&inp.survey, &survey_schema)?;
                (aux, survey)
            }
            (None, Some(spec)) => {
                let fix = make_fixture(spec)?;
                emit_fixture(&fix, &out_dir.join("fixture"))?;
                (fix.aux, fix.survey)
            }
            _ => unreachable!("validated"),
        };
        validate_auxiliary(&aux).into_result()?;
        validate_survey(&survey).into_result()?;
        validate_cross_frames(&aux, &survey, cfg.imputation.k).into_result()?;

        let mut pop_cols =
            MatchingColumns::extract(&cfg.matching.variables, &aux.x_names, &aux.x)?;
        apply_transforms(&mut pop_cols, &cfg.transforms)?;
        let scaling = fit_scaling(&pop_cols, &aux.stratum)?;

        let pop = generate_population(
            &aux,
            &survey,
            &cfg.imputation,
            &scaling,
            &cfg.transforms,
            &cfg.matching.variables,
        )?;
        emit_population(&pop, &pop_path)?;
        write_hash(&pop_path, &gen_hash)?;
        emit_survey(&survey, &survey_path)?;
        write_hash(&survey_path, &gen_hash)?;
        Ok((pop, survey))
    })()
    .map_err(|e| stage_err("generate", e))?;
    timings.stages.insert(
        "generate".into(),
        StageTiming {
            seconds: t0.elapsed().as_secs_f64(),
            cached: gen_cached,
        },
    );
    if upto == StageName::Generate {
        write_timings(out_dir, &timings)?;
        return Ok(None);
    }

    // -- sample ------------------------------------------------------------
    let sample_hash = hash_json(&["sample", &gen_hash], &cfg.design);
    stage_hashes.insert("sample".to_string(), sample_hash.clone());
    let reps_path = out_dir.join("replicates.csv");
    let t0 = Instant::now();
    let sample_cached = cache_valid(&reps_path, &sample_hash);
    let replicates = (|| -> Result<_> {
        if sample_cached {
            return load_replicates(&reps_path, &pop);
        }
        let reps = draw_replicates(&pop, &cfg.design)?;
        emit_replicates(&reps, &reps_path)?;
        write_hash(&reps_path, &sample_hash)?;
        Ok(reps)
    })()
    .map_err(|e| stage_err("sample", e))?;
    timings.stages.insert(
        "sample".into(),
        StageTiming {
            seconds: t0.elapsed().as_secs_f64(),
            cached: sample_cached,
        },
    );
    if upto == StageName::Sample {
        write_timings(out_dir, &timings)?;
        return Ok(None);
    }

    // -- estimate ----------------------------------------------------------
    let est_hash = hash_json(&["estimate", &sample_hash], &cfg.estimators);
    stage_hashes.insert("estimate".to_string(), est_hash.clone());
    let est_path = out_dir.join("estimates.csv");
    let t0 = Instant::now();
    let est_cached = cache_valid(&est_path, &est_hash);
    let (records, failures) = (|| {
        if est_cached {
            // failure counts are re-derivable from the summary only; a
            // cached estimate stage reloads records and recounts nothing
            return Ok((crate::estimators::load_estimates(&est_path)?, BTreeMap::new()));
        }
        let out = estimate_all(cfg, &pop, &replicates)?;
        emit_estimates(&out.0, &est_path)?;
        write_hash(&est_path, &est_hash)?;
        Ok(out)
    })()
    .map_err(|e: Error| stage_err("estimate", e))?;
    timings.stages.insert(
        "estimate".into(),
        StageTiming {
            seconds: t0.elapsed().as_secs_f64(),
            cached: est_cached,
        },
    );
    if upto == StageName::Estimate {
        write_timings(out_dir, &timings)?;
        return Ok(None);
    }

    // -- evaluate ----------------------------------------------------------
    let eval_hash = hash_json(&["evaluate", &est_hash], &());
    stage_hashes.insert("evaluate".to_string(), eval_hash.clone());
    let metrics_path = out_dir.join("metrics.csv");
    let t0 = Instant::now();
    let y_var = cfg.y_var();
    let eval_cached = cache_valid(&metrics_path, &eval_hash);
    let metric_rows = (|| -> Result<usize> {
        let truth = domain_truth(&pop);
        let zp = zero_proportion(&pop, &y_var)?;
        let cells = summarize_metrics(&records, &truth, &y_var, &zp)?;
        if !eval_cached {
            emit_metrics(&cells, &metrics_path)?;
            write_hash(&metrics_path, &eval_hash)?;
        }
        Ok(cells.len())
    })()
    .map_err(|e| stage_err("evaluate", e))?;
    timings.stages.insert(
        "evaluate".into(),
        StageTiming {
            seconds: t0.elapsed().as_secs_f64(),
            cached: eval_cached,
        },
    );
    if upto == StageName::Evaluate {
        write_timings(out_dir, &timings)?;
        return Ok(None);
    }

    // -- diagnose ----------------------------------------------------------
    let diag_hash = hash_json(&["diagnose", &gen_hash], &());
    stage_hashes.insert("diagnose".to_string(), diag_hash.clone());
    let diag_dir = out_dir.join("diagnostics");
    let t0 = Instant::now();
    let mut ks_by_response = BTreeMap::new();
    let mut sd_corr = BTreeMap::new();
    let same_share = (|| -> Result<f64> {
        std::fs::create_dir_all(&diag_dir)?;
        for y in cfg.y_vars() {
            let marg = diag_marginals(&survey, &pop, &y)?;
            emit_marginals(&marg, &diag_dir.join(format!("marginal_ecdf_{y}.csv")))?;
            ks_by_response.insert(y.clone(), marg.ks);
            let sd = diag_domain_sd(&survey, &pop, &y)?;
            emit_domain_sd(&sd, &diag_dir.join(format!("domain_sd_{y}.csv")))?;
            sd_corr.insert(y.clone(), sd.correlation);
        }
        let usage = diag_donor_usage(&pop, &survey)?;
        emit_donor_usage(&usage, &diag_dir.join("donor_usage.csv"))?;
        let crosstab = diag_donor_crosstab(&pop, &survey)?;
        emit_donor_crosstab(&crosstab, &diag_dir.join("donor_crosstab.csv"))?;
        Ok(crosstab.same_domain_share)
    })()
    .map_err(|e| stage_err("diagnose", e))?;
    timings.stages.insert(
        "diagnose".into(),
        StageTiming {
            seconds: t0.elapsed().as_secs_f64(),
            cached: false,
        },
    );

    let summary = RunSummary {
        config_hash,
        stage_hashes,
        imputation_seed: cfg.imputation.master_seed,
        design_seed: cfg.design.master_seed,
        population_rows: pop.n_rows(),
        in_scope_rows: pop.aux.in_scope.iter().filter(|s| **s).count(),
        survey_rows: survey.n_rows(),
        replicates: cfg.design.replicates,
        estimators: cfg
            .estimators
            .list
            .iter()
            .map(|e| e.as_str().to_string())
            .collect(),
        y_var,
        estimate_records: records.len(),
        estimator_failures: failures,
        metric_rows,
        same_domain_share: same_share,
        ks_by_response,
        sd_correlation_by_response: sd_corr,
    };
    let json = serde_json::to_string_pretty(&summary).expect("serializable summary");
    std::fs::write(out_dir.join("summary.json"), json + "\n")?;
    write_timings(out_dir, &timings)?;
    Ok(Some(summary))
}

/// Fit every configured estimator on every replicate. A fit error skips
/// that (estimator, replicate) pair and counts it as a failure; errors in
/// the direct estimators are structural and propagate.
fn estimate_all(
    cfg: &RunConfig,
    pop: &ArtificialPopulation,
    replicates: &[crate::sampler::SampleReplicate],
) -> Result<(Vec<EstimateRecord>, BTreeMap<String, usize>)> {
    use rayon::prelude::*;

    let moments = PopulationMoments::from_population(pop, &cfg.estimators.x_vars)?;
    let y_var = cfg.y_var();
    let wants = |k: EstimatorKind| cfg.estimators.list.contains(&k);
    let needs_ht = wants(EstimatorKind::Ht) || wants(EstimatorKind::Fh);

    let per_rep: Vec<(Vec<EstimateRecord>, Vec<&'static str>)> = replicates
        .par_iter()
        .map(|rep| -> Result<_> {
            let sample = SampleData::from_replicate(pop, rep, &cfg.estimators.x_vars, &y_var)?;
            let mut records = Vec::new();
            let mut failed = Vec::new();
            let ht = if needs_ht {
                Some(ht_estimate(&sample, &moments)?)
            } else {
                None
            };
            for kind in &cfg.estimators.list {
                match kind {
                    EstimatorKind::Ht => records.extend(ht.clone().unwrap()),
                    EstimatorKind::Greg => match greg_estimate(&sample, &moments) {
                        Ok(r) => records.extend(r),
                        Err(_) => failed.push("greg"),
                    },
                    EstimatorKind::Fh => {
                        match fh_estimate(ht.as_ref().unwrap(), &moments, rep.rep_index) {
                            Ok((r, _)) => records.extend(r),
                            Err(_) => failed.push("fh"),
                        }
                    }
                    EstimatorKind::Bhf => match bhf_estimate(&sample, &moments) {
                        Ok((r, _)) => records.extend(r),
                        Err(_) => failed.push("bhf"),
                    },
                }
            }
            Ok((records, failed))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::new();
    let mut failures: BTreeMap<String, usize> = BTreeMap::new();
    for (recs, failed) in per_rep {
        records.extend(recs);
        for f in failed {
            *failures.entry(f.to_string()).or_insert(0) += 1;
        }
    }
    Ok((records, failures))
}

/// One row of the sweep table: an imputation method at a pool size and
/// the per-domain SD correlation it achieved.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub method: String,
    pub k: usize,
    pub sd_correlation: Option<f64>,
}

/// Re-generate the population under single-NN, KBAABB (config k), and
/// uniform-kNN at each requested k, reporting the SD-agreement diagnostic
/// for the evaluated response each time. Sampling and estimation do not
/// run; this isolates the imputer.
pub fn sensitivity_sweep(cfg: &RunConfig, ks: &[usize], out_dir: &Path) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let (aux, survey) = match (&cfg.inputs, &cfg.fixture) {
        (Some(inp), None) => {
            let aux = load_auxiliary_frame(&inp.auxiliary, &AuxSchema::with_x_vars(inp.x_vars.clone()))?;
            let survey =
                load_survey_frame(&inp.survey, &SurveySchema::with_vars(cfg.x_vars(), cfg.y_vars()))?;
            (aux, survey)
        }
        (None, Some(spec)) => {
            let fix = make_fixture(spec)?;
            (fix.aux, fix.survey)
        }
        _ => unreachable!("validated"),
    };
    let mut pop_cols = MatchingColumns::extract(&cfg.matching.variables, &aux.x_names, &aux.x)?;
    apply_transforms(&mut pop_cols, &cfg.transforms)?;
    let scaling = fit_scaling(&pop_cols, &aux.stratum)?;
    let y_var = cfg.y_var();

    let mut runs: Vec<(ImputationMethod, usize)> =
        vec![(ImputationMethod::SingleNn, 1), (ImputationMethod::Kbaabb, cfg.imputation.k)];
    runs.extend(ks.iter().map(|&k| (ImputationMethod::UniformKnn, k)));

    let mut rows = Vec::new();
    for (method, k) in runs {
        let imp = ImputationConfig {
            method,
            k,
            master_seed: cfg.imputation.master_seed,
            retain_neighbor_pools: false,
        };
        let pop = generate_population(
            &aux,
            &survey,
            &imp,
            &scaling,
            &cfg.transforms,
            &cfg.matching.variables,
        )?;
        let sd = diag_domain_sd(&survey, &pop, &y_var)?;
        rows.push(SweepRow {
            method: method.as_str().to_string(),
            k,
            sd_correlation: sd.correlation,
        });
    }

    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    w.write_record(["method", "k", "sd_correlation"])?;
    for r in &rows {
        w.write_record([
            r.method.clone(),
            r.k.to_string(),
            r.sd_correlation
                .map(crate::datamodel::fmt_value)
                .unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(rows)
}
