//! Core frames and their on-disk formats.
//!
//! All files are delimited text: comma separator, header row, UTF-8, `.`
//! decimal point, empty field = missing. Frames are immutable after load
//! and safe to share read-only across parallel workers.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interned categorical column: one code per row, a label table shared
/// across rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Categorical {
    labels: Vec<String>,
    codes: Vec<u32>,
}

impl Categorical {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, label: &str) -> u32 {
        match self.labels.iter().position(|l| l == label) {
            Some(i) => {
                let code = i as u32;
                self.codes.push(code);
                code
            }
            None => {
                let code = self.labels.len() as u32;
                self.labels.push(label.to_string());
                self.codes.push(code);
                code
            }
        }
    }

    pub fn from_labels<I: IntoIterator<Item = S>, S: AsRef<str>>(iter: I) -> Self {
        let mut c = Self::new();
        for s in iter {
            c.push(s.as_ref());
        }
        c
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, row: usize) -> u32 {
        self.codes[row]
    }

    pub fn codes(&self) -> &[u32] {
        &self.codes
    }

    pub fn label(&self, row: usize) -> &str {
        &self.labels[self.codes[row] as usize]
    }

    pub fn label_of_code(&self, code: u32) -> &str {
        &self.labels[code as usize]
    }

    pub fn levels(&self) -> &[String] {
        &self.labels
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }

    pub fn code_of_label(&self, label: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == label).map(|i| i as u32)
    }
}

/// Column mapping for the auxiliary (full population) file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuxSchema {
    pub unit_id: String,
    pub cluster_id: String,
    pub domain_id: String,
    pub stratum: String,
    /// Absent column means every unit is in scope.
    pub in_scope: Option<String>,
    pub x_vars: Vec<String>,
}

impl AuxSchema {
    pub fn with_x_vars(x_vars: Vec<String>) -> Self {
        Self {
            unit_id: "unit_id".into(),
            cluster_id: "cluster_id".into(),
            domain_id: "domain_id".into(),
            stratum: "stratum".into(),
            in_scope: Some("in_scope".into()),
            x_vars,
        }
    }
}

/// Column mapping for the survey (donor) file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurveySchema {
    pub plot_id: String,
    pub domain_id: String,
    pub stratum: String,
    pub x_vars: Vec<String>,
    pub y_vars: Vec<String>,
}

impl SurveySchema {
    pub fn with_vars(x_vars: Vec<String>, y_vars: Vec<String>) -> Self {
        Self {
            plot_id: "plot_id".into(),
            domain_id: "domain_id".into(),
            stratum: "stratum".into(),
            x_vars,
            y_vars,
        }
    }
}

/// Full-population unit records: complete auxiliary data, no responses.
#[derive(Debug, Clone, Default)]
pub struct AuxiliaryFrame {
    pub unit_id: Vec<i64>,
    pub cluster_id: Vec<i64>,
    pub domain: Categorical,
    pub stratum: Categorical,
    pub in_scope: Vec<bool>,
    pub x_names: Vec<String>,
    /// Column-major: `x[j][row]` is variable `x_names[j]` at `row`.
    pub x: Vec<Vec<f64>>,
}

impl AuxiliaryFrame {
    pub fn n_rows(&self) -> usize {
        self.unit_id.len()
    }

    pub fn x_column(&self, name: &str) -> Result<&[f64]> {
        let j = self
            .x_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingVariable(name.to_string()))?;
        Ok(&self.x[j])
    }
}

/// Donor records: auxiliary columns plus observed responses.
#[derive(Debug, Clone, Default)]
pub struct SurveyFrame {
    pub plot_id: Vec<i64>,
    pub domain: Categorical,
    pub stratum: Categorical,
    pub x_names: Vec<String>,
    pub x: Vec<Vec<f64>>,
    pub y_names: Vec<String>,
    pub y: Vec<Vec<f64>>,
}

impl SurveyFrame {
    pub fn n_rows(&self) -> usize {
        self.plot_id.len()
    }

    pub fn x_column(&self, name: &str) -> Result<&[f64]> {
        let j = self
            .x_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingVariable(name.to_string()))?;
        Ok(&self.x[j])
    }

    pub fn y_column(&self, name: &str) -> Result<&[f64]> {
        let j = self
            .y_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingVariable(name.to_string()))?;
        Ok(&self.y[j])
    }
}

/// How a generated population came to be: method, pool size, seed, and the
/// rank-selection weight vector. Written as a JSON sidecar next to the CSV.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub method: String,
    pub k: usize,
    pub master_seed: u64,
    pub weights: Vec<f64>,
}

/// AuxiliaryFrame joined with imputed responses and donor provenance.
///
/// Out-of-scope rows carry no imputation: `y_imputed` is NaN, `donor_id`
/// is -1, `donor_rank` is 0, and the CSV emits empty fields for them.
#[derive(Debug, Clone)]
pub struct ArtificialPopulation {
    pub aux: AuxiliaryFrame,
    pub y_names: Vec<String>,
    pub y_imputed: Vec<Vec<f64>>,
    pub donor_id: Vec<i64>,
    pub donor_rank: Vec<u32>,
    /// Donor pools (the k neighbor ids per recipient), retained only when
    /// diagnostics ask for them; costs ~k times the population footprint.
    pub neighbor_pools: Option<Vec<Vec<i64>>>,
    pub provenance: Provenance,
}

impl ArtificialPopulation {
    pub fn n_rows(&self) -> usize {
        self.aux.n_rows()
    }

    pub fn y_column(&self, name: &str) -> Result<&[f64]> {
        let j = self
            .y_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::MissingVariable(name.to_string()))?;
        Ok(&self.y_imputed[j])
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Violation {
    pub row: Option<usize>,
    pub column: String,
    pub message: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct ColumnSummary {
    pub column: String,
    pub count: usize,
    pub min: Option<f64>,
    pub max: Option<f64>,
    pub missing: usize,
}

/// Validation outcome; empty `errors` means the frame is accepted.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SchemaReport {
    pub errors: Vec<Violation>,
    pub warnings: Vec<String>,
    pub column_summary: Vec<ColumnSummary>,
}

impl SchemaReport {
    pub fn accepted(&self) -> bool {
        self.errors.is_empty()
    }

    /// Ok when accepted, otherwise the first violation as an error.
    pub fn into_result(self) -> Result<()> {
        if self.accepted() {
            Ok(())
        } else {
            self.reject()
        }
    }

    fn reject<T>(self) -> Result<T> {
        let first = self
            .errors
            .first()
            .map(|v| v.message.clone())
            .unwrap_or_default();
        Err(Error::SchemaRejected(self.errors.len(), first))
    }
}

fn summarize_column(name: &str, values: &[f64]) -> ColumnSummary {
    let mut min = None;
    let mut max = None;
    let mut missing = 0usize;
    for &v in values {
        if v.is_nan() {
            missing += 1;
            continue;
        }
        min = Some(min.map_or(v, |m: f64| m.min(v)));
        max = Some(max.map_or(v, |m: f64| m.max(v)));
    }
    ColumnSummary {
        column: name.to_string(),
        count: values.len(),
        min,
        max,
        missing,
    }
}

struct HeaderMap {
    index: HashMap<String, usize>,
}

impl HeaderMap {
    fn new(headers: &csv::StringRecord) -> Self {
        let index = headers
            .iter()
            .enumerate()
            .map(|(i, h)| (h.trim().to_string(), i))
            .collect();
        Self { index }
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    fn optional(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }
}

fn parse_i64(record: &csv::StringRecord, col: usize, name: &str, row: usize) -> Result<i64> {
    let raw = record.get(col).unwrap_or("").trim();
    raw.parse().map_err(|_| Error::ParseFailure {
        row,
        column: name.to_string(),
        value: raw.to_string(),
    })
}

fn parse_f64(record: &csv::StringRecord, col: usize, name: &str, row: usize) -> Result<f64> {
    let raw = record.get(col).unwrap_or("").trim();
    if raw.is_empty() {
        return Ok(f64::NAN);
    }
    raw.parse().map_err(|_| Error::ParseFailure {
        row,
        column: name.to_string(),
        value: raw.to_string(),
    })
}

fn parse_bool(record: &csv::StringRecord, col: usize, name: &str, row: usize) -> Result<bool> {
    let raw = record.get(col).unwrap_or("").trim();
    match raw {
        "" | "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::ParseFailure {
            row,
            column: name.to_string(),
            value: other.to_string(),
        }),
    }
}

/// Load and validate an auxiliary file. Row order preserved as file order.
pub fn load_auxiliary_frame(path: &Path, schema: &AuxSchema) -> Result<AuxiliaryFrame> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = HeaderMap::new(reader.headers()?);
    let c_unit = headers.require(&schema.unit_id)?;
    let c_cluster = headers.require(&schema.cluster_id)?;
    let c_domain = headers.require(&schema.domain_id)?;
    let c_stratum = headers.require(&schema.stratum)?;
    let c_scope = schema.in_scope.as_deref().and_then(|n| headers.optional(n));
    let c_x: Vec<usize> = schema
        .x_vars
        .iter()
        .map(|n| headers.require(n))
        .collect::<Result<_>>()?;

    let mut frame = AuxiliaryFrame {
        x_names: schema.x_vars.clone(),
        x: vec![Vec::new(); schema.x_vars.len()],
        ..Default::default()
    };
    let mut seen = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let unit = parse_i64(&record, c_unit, &schema.unit_id, row)?;
        if let Some(prev) = seen.insert(unit, row) {
            let _ = prev;
            return Err(Error::DuplicateUnitId(unit));
        }
        frame.unit_id.push(unit);
        frame
            .cluster_id
            .push(parse_i64(&record, c_cluster, &schema.cluster_id, row)?);
        frame.domain.push(record.get(c_domain).unwrap_or("").trim());
        frame.stratum.push(record.get(c_stratum).unwrap_or("").trim());
        frame.in_scope.push(match c_scope {
            Some(c) => parse_bool(&record, c, schema.in_scope.as_deref().unwrap(), row)?,
            None => true,
        });
        for (j, &c) in c_x.iter().enumerate() {
            let v = parse_f64(&record, c, &schema.x_vars[j], row)?;
            if v.is_nan() {
                // complete auxiliary data is assumed; missing is a hard parse error
                return Err(Error::ParseFailure {
                    row,
                    column: schema.x_vars[j].clone(),
                    value: String::new(),
                });
            }
            frame.x[j].push(v);
        }
    }
    let report = validate_auxiliary(&frame);
    if !report.accepted() {
        return report.reject();
    }
    Ok(frame)
}

/// Load and validate a survey (donor) file.
pub fn load_survey_frame(path: &Path, schema: &SurveySchema) -> Result<SurveyFrame> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = HeaderMap::new(reader.headers()?);
    let c_plot = headers.require(&schema.plot_id)?;
    let c_domain = headers.require(&schema.domain_id)?;
    let c_stratum = headers.require(&schema.stratum)?;
    let c_x: Vec<usize> = schema
        .x_vars
        .iter()
        .map(|n| headers.require(n))
        .collect::<Result<_>>()?;
    let c_y: Vec<usize> = schema
        .y_vars
        .iter()
        .map(|n| headers.require(n))
        .collect::<Result<_>>()?;

    let mut frame = SurveyFrame {
        x_names: schema.x_vars.clone(),
        x: vec![Vec::new(); schema.x_vars.len()],
        y_names: schema.y_vars.clone(),
        y: vec![Vec::new(); schema.y_vars.len()],
        ..Default::default()
    };
    let mut seen = HashMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let plot = parse_i64(&record, c_plot, &schema.plot_id, row)?;
        if seen.insert(plot, row).is_some() {
            return Err(Error::DuplicateUnitId(plot));
        }
        frame.plot_id.push(plot);
        frame.domain.push(record.get(c_domain).unwrap_or("").trim());
        frame.stratum.push(record.get(c_stratum).unwrap_or("").trim());
        for (j, &c) in c_x.iter().enumerate() {
            let v = parse_f64(&record, c, &schema.x_vars[j], row)?;
            if v.is_nan() {
                return Err(Error::ParseFailure {
                    row,
                    column: schema.x_vars[j].clone(),
                    value: String::new(),
                });
            }
            frame.x[j].push(v);
        }
        for (j, &c) in c_y.iter().enumerate() {
            frame.y[j].push(parse_f64(&record, c, &schema.y_vars[j], row)?);
        }
    }
    let report = validate_survey(&frame);
    if !report.accepted() {
        return report.reject();
    }
    Ok(frame)
}

pub fn validate_auxiliary(frame: &AuxiliaryFrame) -> SchemaReport {
    let mut report = SchemaReport::default();
    for (j, name) in frame.x_names.iter().enumerate() {
        report.column_summary.push(summarize_column(name, &frame.x[j]));
        for (row, &v) in frame.x[j].iter().enumerate() {
            if !v.is_finite() {
                report.errors.push(Violation {
                    row: Some(row + 1),
                    column: name.clone(),
                    message: format!("non-finite value in `{name}` at row {}", row + 1),
                });
            }
        }
    }
    report
}

pub fn validate_survey(frame: &SurveyFrame) -> SchemaReport {
    let mut report = SchemaReport::default();
    for (j, name) in frame.x_names.iter().enumerate() {
        report.column_summary.push(summarize_column(name, &frame.x[j]));
    }
    for (j, name) in frame.y_names.iter().enumerate() {
        report.column_summary.push(summarize_column(name, &frame.y[j]));
        for (row, &v) in frame.y[j].iter().enumerate() {
            if v.is_nan() {
                report.errors.push(Violation {
                    row: Some(row + 1),
                    column: name.clone(),
                    message: format!("missing response `{name}` at row {}", row + 1),
                });
            } else if v < 0.0 {
                report.errors.push(Violation {
                    row: Some(row + 1),
                    column: name.clone(),
                    message: format!("negative response `{name}` at row {}", row + 1),
                });
            }
        }
    }
    report
}

/// Cross-frame consistency: equal x column sets, survey strata known to the
/// population, and every recipient stratum backed by at least `k` donors.
pub fn validate_cross_frames(aux: &AuxiliaryFrame, survey: &SurveyFrame, k: usize) -> SchemaReport {
    let mut report = SchemaReport::default();
    let mut aux_x = aux.x_names.clone();
    let mut survey_x = survey.x_names.clone();
    aux_x.sort();
    survey_x.sort();
    if aux_x != survey_x {
        report.errors.push(Violation {
            row: None,
            column: String::new(),
            message: format!(
                "x column sets differ: auxiliary {:?} vs survey {:?}",
                aux_x, survey_x
            ),
        });
    }
    for level in survey.stratum.levels() {
        if aux.stratum.code_of_label(level).is_none() {
            report
                .warnings
                .push(format!("survey stratum `{level}` absent from auxiliary frame"));
        }
    }
    for level in aux.stratum.levels() {
        let donors = survey
            .stratum
            .codes()
            .iter()
            .filter(|&&c| survey.stratum.label_of_code(c) == level)
            .count();
        if donors < k {
            report.errors.push(Violation {
                row: None,
                column: String::new(),
                message: format!(
                    "insufficient donors: stratum `{level}` has {donors} donors, need {k}"
                ),
            });
        }
    }
    report
}

/// Canonical float formatting: shortest decimal that round-trips; NaN emits
/// an empty field.
pub fn fmt_value(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

pub fn emit_auxiliary(frame: &AuxiliaryFrame, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("unit_id,cluster_id,domain_id,stratum,in_scope");
    for name in &frame.x_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..frame.n_rows() {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            frame.unit_id[i],
            frame.cluster_id[i],
            frame.domain.label(i),
            frame.stratum.label(i),
            frame.in_scope[i]
        );
        for col in &frame.x {
            let _ = write!(out, ",{}", fmt_value(col[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn emit_survey(frame: &SurveyFrame, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("plot_id,domain_id,stratum");
    for name in frame.x_names.iter().chain(&frame.y_names) {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..frame.n_rows() {
        let _ = write!(
            out,
            "{},{},{}",
            frame.plot_id[i],
            frame.domain.label(i),
            frame.stratum.label(i)
        );
        for col in frame.x.iter().chain(&frame.y) {
            let _ = write!(out, ",{}", fmt_value(col[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Emit the population CSV plus its JSON provenance sidecar
/// (`<path>.provenance.json`).
pub fn emit_population(pop: &ArtificialPopulation, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("unit_id,cluster_id,domain_id,stratum,in_scope");
    for name in &pop.aux.x_names {
        let _ = write!(out, ",{name}");
    }
    out.push_str(",donor_id,donor_rank");
    for name in &pop.y_names {
        let _ = write!(out, ",{name}");
    }
    out.push('\n');
    for i in 0..pop.n_rows() {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            pop.aux.unit_id[i],
            pop.aux.cluster_id[i],
            pop.aux.domain.label(i),
            pop.aux.stratum.label(i),
            pop.aux.in_scope[i]
        );
        for col in &pop.aux.x {
            let _ = write!(out, ",{}", fmt_value(col[i]));
        }
        if pop.aux.in_scope[i] {
            let _ = write!(out, ",{},{}", pop.donor_id[i], pop.donor_rank[i]);
        } else {
            out.push_str(",,");
        }
        for col in &pop.y_imputed {
            let _ = write!(out, ",{}", fmt_value(col[i]));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    let sidecar = path.with_extension("provenance.json");
    let json = serde_json::to_string_pretty(&pop.provenance)
        .map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(sidecar, json)?;
    Ok(())
}

/// Load a population CSV emitted by [`emit_population`]. Column roles are
/// inferred from the fixed header layout: x columns sit between `in_scope`
/// and `donor_id`, y columns follow `donor_rank`.
pub fn load_population(path: &Path) -> Result<ArtificialPopulation> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let fixed = ["unit_id", "cluster_id", "domain_id", "stratum", "in_scope"];
    for (i, name) in fixed.iter().enumerate() {
        if headers.get(i).map(String::as_str) != Some(*name) {
            return Err(Error::MissingColumn(name.to_string()));
        }
    }
    let donor_pos = headers
        .iter()
        .position(|h| h == "donor_id")
        .ok_or_else(|| Error::MissingColumn("donor_id".into()))?;
    if headers.get(donor_pos + 1).map(String::as_str) != Some("donor_rank") {
        return Err(Error::MissingColumn("donor_rank".into()));
    }
    let x_names: Vec<String> = headers[fixed.len()..donor_pos].to_vec();
    let y_names: Vec<String> = headers[donor_pos + 2..].to_vec();

    let mut aux = AuxiliaryFrame {
        x_names: x_names.clone(),
        x: vec![Vec::new(); x_names.len()],
        ..Default::default()
    };
    let mut y_imputed = vec![Vec::new(); y_names.len()];
    let mut donor_id = Vec::new();
    let mut donor_rank = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        aux.unit_id.push(parse_i64(&record, 0, "unit_id", row)?);
        aux.cluster_id.push(parse_i64(&record, 1, "cluster_id", row)?);
        aux.domain.push(record.get(2).unwrap_or("").trim());
        aux.stratum.push(record.get(3).unwrap_or("").trim());
        let in_scope = parse_bool(&record, 4, "in_scope", row)?;
        aux.in_scope.push(in_scope);
        for (j, col) in aux.x.iter_mut().enumerate() {
            col.push(parse_f64(&record, fixed.len() + j, &x_names[j], row)?);
        }
        if in_scope {
            donor_id.push(parse_i64(&record, donor_pos, "donor_id", row)?);
            donor_rank.push(parse_i64(&record, donor_pos + 1, "donor_rank", row)? as u32);
        } else {
            donor_id.push(-1);
            donor_rank.push(0);
        }
        for (j, col) in y_imputed.iter_mut().enumerate() {
            col.push(parse_f64(&record, donor_pos + 2 + j, &y_names[j], row)?);
        }
    }
    let sidecar = path.with_extension("provenance.json");
    let provenance = if sidecar.exists() {
        serde_json::from_str(&std::fs::read_to_string(&sidecar)?)
            .map_err(|e| Error::Config(e.to_string()))?
    } else {
        Provenance {
            method: "unknown".into(),
            k: 0,
            master_seed: 0,
            weights: Vec::new(),
        }
    };
    Ok(ArtificialPopulation {
        aux,
        y_names,
        y_imputed,
        donor_id,
        donor_rank,
        neighbor_pools: None,
        provenance,
    })
}
