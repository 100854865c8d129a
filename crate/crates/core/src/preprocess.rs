//! Matching-space preparation: skew transforms, per-stratum center/scale
//! with population-derived constants, and a correlation audit.
//!
//! Transformed and scaled values are used only to define "nearest" in the
//! donor search; original values stay on the frames for reporting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::datamodel::Categorical;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkewDirection {
    Right,
    Left,
    None,
}

/// One variable's symmetrizing transform: `log(c + x)` for right skew,
/// `log(c - x)` for left skew.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TransformSpec {
    pub variable: String,
    pub direction: SkewDirection,
    /// Offset constant `c`, in the variable's own units.
    #[serde(default)]
    pub offset: f64,
}

/// Matching columns pulled off a frame: a mutable working copy.
#[derive(Debug, Clone)]
pub struct MatchingColumns {
    pub names: Vec<String>,
    pub data: Vec<Vec<f64>>,
}

impl MatchingColumns {
    pub fn extract(names: &[String], all_names: &[String], all_data: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(names.len());
        for name in names {
            let j = all_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::MissingVariable(name.clone()))?;
            data.push(all_data[j].clone());
        }
        Ok(Self {
            names: names.to_vec(),
            data,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    fn column_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        let j = self.names.iter().position(|n| n == name)?;
        Some(&mut self.data[j])
    }
}

/// Apply skew transforms in place. Errors if any log argument is
/// non-positive on this data.
pub fn apply_transforms(columns: &mut MatchingColumns, specs: &[TransformSpec]) -> Result<()> {
    for spec in specs {
        if spec.direction == SkewDirection::None {
            continue;
        }
        let col = columns
            .column_mut(&spec.variable)
            .ok_or_else(|| Error::MissingVariable(spec.variable.clone()))?;
        for (row, v) in col.iter_mut().enumerate() {
            let arg = match spec.direction {
                SkewDirection::Right => spec.offset + *v,
                SkewDirection::Left => spec.offset - *v,
                SkewDirection::None => unreachable!(),
            };
            if arg <= 0.0 {
                return Err(Error::NonPositiveLogArgument {
                    variable: spec.variable.clone(),
                    row: row + 1,
                });
            }
            *v = arg.ln();
        }
    }
    Ok(())
}

/// Suggested offset guaranteeing positive log arguments: `1 - min(x)` for
/// right skew, `1 + max(x)` for left skew.
pub fn suggest_offset(values: &[f64], direction: SkewDirection) -> f64 {
    match direction {
        SkewDirection::Right => 1.0 - values.iter().copied().fold(f64::INFINITY, f64::min),
        SkewDirection::Left => 1.0 + values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        SkewDirection::None => 0.0,
    }
}

/// Sample skewness (standardized third moment), to inform which variables
/// a user should declare transforms for.
pub fn sample_skewness(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m2 = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let m3 = values.iter().map(|v| (v - mean).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

/// Per-(stratum, variable) centering and scaling constants, computed on the
/// full-population auxiliary frame. The frame is the population, so the
/// population standard deviation (divide by n) is used.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScalingConstants {
    /// stratum label -> variable -> constants
    pub by_stratum: BTreeMap<String, BTreeMap<String, MeanSd>>,
}

impl ScalingConstants {
    pub fn get(&self, stratum: &str, variable: &str) -> Result<MeanSd> {
        self.by_stratum
            .get(stratum)
            .and_then(|m| m.get(variable))
            .copied()
            .ok_or_else(|| Error::MissingConstants {
                stratum: stratum.to_string(),
                variable: variable.to_string(),
            })
    }
}

/// Fit per-stratum means and SDs on the (transformed) population columns.
pub fn fit_scaling(columns: &MatchingColumns, stratum: &Categorical) -> Result<ScalingConstants> {
    let mut constants = ScalingConstants::default();
    for (level_code, level) in stratum.levels().iter().enumerate() {
        let rows: Vec<usize> = stratum
            .codes()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c as usize == level_code)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            continue;
        }
        let mut per_var = BTreeMap::new();
        for (j, name) in columns.names.iter().enumerate() {
            let n = rows.len() as f64;
            let mean = rows.iter().map(|&i| columns.data[j][i]).sum::<f64>() / n;
            let var = rows
                .iter()
                .map(|&i| (columns.data[j][i] - mean).powi(2))
                .sum::<f64>()
                / n;
            let sd = var.sqrt();
            if sd <= 0.0 {
                return Err(Error::ZeroVariance {
                    stratum: level.clone(),
                    variable: name.clone(),
                });
            }
            per_var.insert(name.clone(), MeanSd { mean, sd });
        }
        constants.by_stratum.insert(level.clone(), per_var);
    }
    Ok(constants)
}

/// Scale columns in place with previously fitted constants. The survey
/// frame must use the population's constants, so its scaled means will
/// generally not be zero.
pub fn apply_scaling(
    columns: &mut MatchingColumns,
    stratum: &Categorical,
    constants: &ScalingConstants,
) -> Result<()> {
    let n = columns.n_rows();
    // resolve constants per (stratum level, variable) once
    let mut lookup: Vec<Vec<MeanSd>> = Vec::with_capacity(stratum.n_levels());
    for level in stratum.levels() {
        let mut per_var = Vec::with_capacity(columns.names.len());
        for name in &columns.names {
            per_var.push(constants.get(level, name)?);
        }
        lookup.push(per_var);
    }
    for j in 0..columns.names.len() {
        for i in 0..n {
            let ms = lookup[stratum.code(i) as usize][j];
            columns.data[j][i] = (columns.data[j][i] - ms.mean) / ms.sd;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationFlag {
    pub stratum: String,
    pub var_a: String,
    pub var_b: String,
    pub r: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrelationReport {
    /// Per stratum: full symmetric correlation matrix in `names` order.
    pub strata: BTreeMap<String, Vec<Vec<f64>>>,
    pub names: Vec<String>,
    pub threshold: f64,
    pub flagged: Vec<CorrelationFlag>,
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

/// Pairwise Pearson correlations per stratum, flagging pairs with
/// `|r| > threshold`. Run on the scaled matching columns.
pub fn correlation_audit(
    columns: &MatchingColumns,
    stratum: &Categorical,
    threshold: f64,
) -> CorrelationReport {
    let p = columns.names.len();
    let mut report = CorrelationReport {
        strata: BTreeMap::new(),
        names: columns.names.clone(),
        threshold,
        flagged: Vec::new(),
    };
    for (level_code, level) in stratum.levels().iter().enumerate() {
        let rows: Vec<usize> = stratum
            .codes()
            .iter()
            .enumerate()
            .filter(|(_, &c)| c as usize == level_code)
            .map(|(i, _)| i)
            .collect();
        if rows.len() < 2 {
            continue;
        }
        let sub: Vec<Vec<f64>> = (0..p)
            .map(|j| rows.iter().map(|&i| columns.data[j][i]).collect())
            .collect();
        let mut matrix = vec![vec![1.0; p]; p];
        for a in 0..p {
            for b in (a + 1)..p {
                let r = pearson(&sub[a], &sub[b]);
                matrix[a][b] = r;
                matrix[b][a] = r;
                if r.abs() > threshold {
                    report.flagged.push(CorrelationFlag {
                        stratum: level.clone(),
                        var_a: columns.names[a].clone(),
                        var_b: columns.names[b].clone(),
                        r,
                    });
                }
            }
        }
        report.strata.insert(level.clone(), matrix);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn cols(names: &[&str], data: Vec<Vec<f64>>) -> MatchingColumns {
        MatchingColumns {
            names: names.iter().map(|s| s.to_string()).collect(),
            data,
        }
    }

    #[test]
    fn right_transform_values() {
        let mut c = cols(&["v"], vec![vec![0.0, std::f64::consts::E - 1.0]]);
        apply_transforms(
            &mut c,
            &[TransformSpec {
                variable: "v".into(),
                direction: SkewDirection::Right,
                offset: 1.0,
            }],
        )
        .unwrap();
        assert_relative_eq!(c.data[0][0], 0.0);
        assert_relative_eq!(c.data[0][1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn left_transform_reverses_order() {
        let mut c = cols(&["v"], vec![vec![100.0, 50.0]]);
        apply_transforms(
            &mut c,
            &[TransformSpec {
                variable: "v".into(),
                direction: SkewDirection::Left,
                offset: 101.0,
            }],
        )
        .unwrap();
        assert_relative_eq!(c.data[0][0], 0.0); // log(101 - 100) = log 1
        assert_relative_eq!(c.data[0][1], 51f64.ln());
        assert!(c.data[0][0] < c.data[0][1], "left transform reverses order");
    }

    #[test]
    fn transform_monotonicity() {
        // log(c + x) strictly increasing, log(c - x) strictly decreasing
        let xs: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let mut right = cols(&["v"], vec![xs.clone()]);
        apply_transforms(
            &mut right,
            &[TransformSpec {
                variable: "v".into(),
                direction: SkewDirection::Right,
                offset: 1.0,
            }],
        )
        .unwrap();
        assert!(right.data[0].windows(2).all(|w| w[0] < w[1]));
        let mut left = cols(&["v"], vec![xs]);
        apply_transforms(
            &mut left,
            &[TransformSpec {
                variable: "v".into(),
                direction: SkewDirection::Left,
                offset: 50.0,
            }],
        )
        .unwrap();
        assert!(left.data[0].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn non_positive_log_argument() {
        let mut c = cols(&["v"], vec![vec![0.0, -1.0]]);
        match apply_transforms(
            &mut c,
            &[TransformSpec {
                variable: "v".into(),
                direction: SkewDirection::Right,
                offset: 1.0,
            }],
        ) {
            Err(Error::NonPositiveLogArgument { row: 2, .. }) => {}
            other => panic!("expected NonPositiveLogArgument at row 2, got {other:?}"),
        }
    }

    #[test]
    fn fit_scaling_hand_case() {
        // stratum values {1,2,3}: mean 2, population sd 1, scaled {-1,0,1}
        let mut c = cols(&["v"], vec![vec![1.0, 2.0, 3.0]]);
        let stratum = Categorical::from_labels(["s", "s", "s"]);
        let constants = fit_scaling(&c, &stratum).unwrap();
        let ms = constants.get("s", "v").unwrap();
        assert_relative_eq!(ms.mean, 2.0);
        assert_relative_eq!(ms.sd, (2.0f64 / 3.0).sqrt());
        apply_scaling(&mut c, &stratum, &constants).unwrap();
        let sd = (2.0f64 / 3.0).sqrt();
        assert_relative_eq!(c.data[0][0], -1.0 / sd);
        assert_relative_eq!(c.data[0][1], 0.0);
        assert_relative_eq!(c.data[0][2], 1.0 / sd);
    }

    #[test]
    fn constant_column_is_zero_variance() {
        let c = cols(&["v"], vec![vec![5.0, 5.0, 5.0]]);
        let stratum = Categorical::from_labels(["s", "s", "s"]);
        match fit_scaling(&c, &stratum) {
            Err(Error::ZeroVariance { .. }) => {}
            other => panic!("expected ZeroVariance, got {other:?}"),
        }
    }

    #[test]
    fn strata_scaled_independently_to_mean_zero_sd_one() {
        let mut c = cols(&["v"], vec![vec![1.0, 3.0, 10.0, 30.0, 2.0, 20.0]]);
        let stratum = Categorical::from_labels(["a", "a", "b", "b", "a", "b"]);
        let constants = fit_scaling(&c, &stratum).unwrap();
        apply_scaling(&mut c, &stratum, &constants).unwrap();
        for (code, _) in stratum.levels().iter().enumerate() {
            let vals: Vec<f64> = stratum
                .codes()
                .iter()
                .enumerate()
                .filter(|(_, &s)| s as usize == code)
                .map(|(i, _)| c.data[0][i])
                .collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(var, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn rescaling_scaled_data_yields_identity_constants() {
        let mut c = cols(&["v"], vec![(0..100).map(|i| (i as f64).sin() * 3.0 + 7.0).collect()]);
        let stratum = Categorical::from_labels(vec!["s"; 100]);
        let constants = fit_scaling(&c, &stratum).unwrap();
        apply_scaling(&mut c, &stratum, &constants).unwrap();
        let again = fit_scaling(&c, &stratum).unwrap();
        let ms = again.get("s", "v").unwrap();
        assert_relative_eq!(ms.mean, 0.0, epsilon = 1e-12);
        assert_relative_eq!(ms.sd, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn unseen_stratum_is_missing_constants() {
        let mut c = cols(&["v"], vec![vec![1.0]]);
        let stratum = Categorical::from_labels(["new"]);
        let constants = {
            let base = cols(&["v"], vec![vec![1.0, 2.0]]);
            fit_scaling(&base, &Categorical::from_labels(["old", "old"])).unwrap()
        };
        match apply_scaling(&mut c, &stratum, &constants) {
            Err(Error::MissingConstants { stratum, .. }) => assert_eq!(stratum, "new"),
            other => panic!("expected MissingConstants, got {other:?}"),
        }
    }

    #[test]
    fn scaling_constants_serialization_round_trip() {
        let base = cols(&["v", "w"], vec![vec![1.0, 2.0, 5.0], vec![0.1, 0.7, 0.3]]);
        let stratum = Categorical::from_labels(["a", "a", "a"]);
        let constants = fit_scaling(&base, &stratum).unwrap();
        let json = serde_json::to_string(&constants).unwrap();
        let back: ScalingConstants = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn correlation_perfect_pair_flagged() {
        let vals: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let c = cols(&["a", "b"], vec![vals.clone(), vals]);
        let stratum = Categorical::from_labels(vec!["s"; 20]);
        let report = correlation_audit(&c, &stratum, 0.9);
        assert_eq!(report.flagged.len(), 1);
        assert_relative_eq!(report.flagged[0].r, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn correlation_independent_columns_small() {
        let mut rng = crate::rng::stream(11, "test-corr", &[]);
        let n = 100_000;
        let a: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let c = cols(&["a", "b"], vec![a, b]);
        let stratum = Categorical::from_labels(vec!["s"; n]);
        let report = correlation_audit(&c, &stratum, 0.02);
        assert!(report.flagged.is_empty(), "|r| should be < 0.02 for independent columns");
    }

    #[test]
    fn orthogonal_design_zero_flags() {
        let c = cols(
            &["a", "b"],
            vec![vec![1.0, 1.0, -1.0, -1.0], vec![1.0, -1.0, 1.0, -1.0]],
        );
        let stratum = Categorical::from_labels(vec!["s"; 4]);
        let report = correlation_audit(&c, &stratum, 0.5);
        assert!(report.flagged.is_empty());
    }

    #[test]
    fn skewness_signs() {
        // exponential quantiles are right-skewed with skewness near 2
        let right: Vec<f64> = (0..1000).map(|i| -(1.0 - (i as f64 + 0.5) / 1000.0).ln()).collect();
        assert!(sample_skewness(&right) > 1.0);
        let sym: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert!(sample_skewness(&sym).abs() < 0.1);
    }
}
