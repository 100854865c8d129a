//! Replicate sampling under the quasi-systematic one-unit-per-cluster
//! design, with optional out-of-scope dropout.
//!
//! Each cluster contributes at most one unit per replicate: one slot is
//! drawn uniformly over the cluster's in-scope units plus its declared
//! out-of-scope slots, and drawing an out-of-scope slot leaves the cluster
//! empty for that replicate. Draws are keyed by
//! `(master_seed, "sample", rep_index, cluster_id)`, so replicates and
//! clusters are independent and schedule-order free.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::ArtificialPopulation;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignSpec {
    /// Replicate count R.
    pub replicates: usize,
    pub master_seed: u64,
    /// Per-cluster out-of-scope slot counts; clusters not listed get 0.
    #[serde(default)]
    pub out_of_scope_slots: BTreeMap<i64, u32>,
}

impl DesignSpec {
    pub fn new(replicates: usize, master_seed: u64) -> Self {
        Self {
            replicates,
            master_seed,
            out_of_scope_slots: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicate count must be >= 1".into()));
        }
        Ok(())
    }
}

/// One design-based draw.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleReplicate {
    pub rep_index: usize,
    /// Selected unit ids, in ascending cluster order.
    pub selected: Vec<i64>,
    /// Population row index of each selected unit, parallel to `selected`.
    pub rows: Vec<usize>,
    /// Sample size per domain label.
    pub domain_sizes: BTreeMap<String, usize>,
}

/// In-scope population rows grouped by cluster, sorted by cluster id.
/// Built once and shared across replicates.
#[derive(Debug, Clone)]
pub struct ClusterLayout {
    clusters: Vec<(i64, Vec<usize>)>,
}

impl ClusterLayout {
    pub fn from_population(pop: &ArtificialPopulation) -> Self {
        let mut map: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
        for i in 0..pop.n_rows() {
            if pop.aux.in_scope[i] {
                map.entry(pop.aux.cluster_id[i]).or_default().push(i);
            }
        }
        // order members by unit id so draws do not depend on row order
        let mut clusters: Vec<(i64, Vec<usize>)> = map.into_iter().collect();
        for (_, members) in &mut clusters {
            members.sort_by_key(|&row| pop.aux.unit_id[row]);
        }
        Self { clusters }
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// E[n_d] per domain: sum over clusters of (in-scope units of d in the
    /// cluster) / (total slots of the cluster).
    pub fn expected_domain_sizes(
        &self,
        pop: &ArtificialPopulation,
        design: &DesignSpec,
    ) -> BTreeMap<String, f64> {
        let mut expected = BTreeMap::new();
        for (cluster_id, rows) in &self.clusters {
            let out = design.out_of_scope_slots.get(cluster_id).copied().unwrap_or(0);
            let slots = rows.len() as f64 + out as f64;
            for &row in rows {
                *expected
                    .entry(pop.aux.domain.label(row).to_string())
                    .or_insert(0.0) += 1.0 / slots;
            }
        }
        expected
    }
}

/// Draw replicate `rep_index` (1-based). Reproducible in isolation: the
/// draw depends only on the design seed, the replicate index, and each
/// cluster's id and in-scope membership.
pub fn draw_replicate(
    pop: &ArtificialPopulation,
    layout: &ClusterLayout,
    design: &DesignSpec,
    rep_index: usize,
) -> Result<SampleReplicate> {
    design.validate()?;
    let mut selected = Vec::with_capacity(layout.n_clusters());
    let mut rows = Vec::with_capacity(layout.n_clusters());
    let mut domain_sizes = BTreeMap::new();
    for (cluster_id, members) in &layout.clusters {
        let out = design.out_of_scope_slots.get(cluster_id).copied().unwrap_or(0) as usize;
        let slots = members.len() + out;
        if slots == 0 {
            return Err(Error::EmptyCluster(*cluster_id));
        }
        let mut rng = crate::rng::stream(
            design.master_seed,
            "sample",
            &[rep_index as u64, *cluster_id as u64],
        );
        let slot = rng.gen_range(0..slots);
        if slot < members.len() {
            let row = members[slot];
            selected.push(pop.aux.unit_id[row]);
            rows.push(row);
            *domain_sizes
                .entry(pop.aux.domain.label(row).to_string())
                .or_insert(0) += 1;
        }
        // otherwise the cluster fell on an out-of-scope slot: no unit this rep
    }
    Ok(SampleReplicate {
        rep_index,
        selected,
        rows,
        domain_sizes,
    })
}

/// All R replicates, drawn in parallel. Element r equals
/// `draw_replicate(.., r + 1)` exactly.
pub fn draw_replicates(
    pop: &ArtificialPopulation,
    design: &DesignSpec,
) -> Result<Vec<SampleReplicate>> {
    design.validate()?;
    let layout = ClusterLayout::from_population(pop);
    (1..=design.replicates)
        .into_par_iter()
        .map(|r| draw_replicate(pop, &layout, design, r))
        .collect()
}

/// Emit replicates as `rep_index,unit_id` rows.
pub fn emit_replicates(replicates: &[SampleReplicate], path: &std::path::Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::from("rep_index,unit_id\n");
    for rep in replicates {
        for &unit in &rep.selected {
            let _ = writeln!(out, "{},{}", rep.rep_index, unit);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Load replicates emitted by [`emit_replicates`], rebuilding row indices
/// against the given population.
pub fn load_replicates(
    path: &std::path::Path,
    pop: &ArtificialPopulation,
) -> Result<Vec<SampleReplicate>> {
    let mut row_of_unit = std::collections::HashMap::with_capacity(pop.n_rows());
    for i in 0..pop.n_rows() {
        row_of_unit.insert(pop.aux.unit_id[i], i);
    }
    let mut reader = csv::Reader::from_path(path)?;
    let mut reps: BTreeMap<usize, SampleReplicate> = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let rep_index: usize = record
            .get(0)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::ParseFailure {
                row: row_no,
                column: "rep_index".into(),
                value: record.get(0).unwrap_or("").to_string(),
            })?;
        let unit: i64 = record
            .get(1)
            .unwrap_or("")
            .trim()
            .parse()
            .map_err(|_| Error::ParseFailure {
                row: row_no,
                column: "unit_id".into(),
                value: record.get(1).unwrap_or("").to_string(),
            })?;
        let row = *row_of_unit
            .get(&unit)
            .ok_or_else(|| Error::Config(format!("replicate references unknown unit id {unit}")))?;
        let rep = reps.entry(rep_index).or_insert_with(|| SampleReplicate {
            rep_index,
            selected: Vec::new(),
            rows: Vec::new(),
            domain_sizes: BTreeMap::new(),
        });
        rep.selected.push(unit);
        rep.rows.push(row);
        *rep.domain_sizes
            .entry(pop.aux.domain.label(row).to_string())
            .or_insert(0) += 1;
    }
    Ok(reps.into_values().collect())
}
