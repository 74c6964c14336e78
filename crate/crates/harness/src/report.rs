//! Report and summary tables.
//!
//! `report.csv` holds one row per (training cohort, test cohort, patient,
//! seed) followed by aggregate rows whose metric cells read `mean(SD)` over
//! all patients and seeds. `summary.csv` condenses seen-cohort population
//! results per method, topology and inactive ratio across seeds.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use gluadfl::metrics::{mean_sd, summarize, MetricsReport};
use serde::Deserialize;

use crate::manifest::Manifest;
use crate::plan::{GroupKey, Method};
use crate::HarnessError;

pub const REPORT_HEADER: [&str; 18] = [
    "train_cohort",
    "test_cohort",
    "method",
    "topology",
    "rho",
    "learning_rate",
    "hidden_size",
    "model",
    "seed",
    "patient_id",
    "seen",
    "rmse",
    "mard",
    "mae",
    "grmse",
    "time_lag",
    "n_samples",
    "grmse_variant",
];

/// Which parameters were evaluated.
pub const MODEL_POPULATION: &str = "population";
pub const MODEL_PERSONALIZED: &str = "personalized";
pub const MODEL_PERSONAL_ONLY: &str = "personal_only";

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub train_cohort: String,
    pub test_cohort: String,
    pub method: String,
    pub topology: String,
    pub rho: f64,
    pub learning_rate: f64,
    pub hidden_size: usize,
    pub model: String,
    pub seed: u64,
    pub patient_id: String,
    pub metrics: MetricsReport,
}

impl ReportRow {
    fn seen(&self) -> bool {
        self.train_cohort == self.test_cohort
    }

    fn aggregate_key(&self) -> (String, String, String, String, String, String, usize, String) {
        (
            self.train_cohort.clone(),
            self.test_cohort.clone(),
            self.method.clone(),
            self.topology.clone(),
            self.rho.to_string(),
            format!("{:e}", self.learning_rate),
            self.hidden_size,
            self.model.clone(),
        )
    }
}

/// Writes per-patient rows in the given order, then one aggregate row per
/// (cohorts, method, topology, ratio, hyperparameters, model) in order of
/// first appearance.
pub fn write_report<W: Write>(writer: W, rows: &[ReportRow], grmse_variant: &str) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(REPORT_HEADER)?;
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.train_cohort.clone(),
            r.test_cohort.clone(),
            r.method.clone(),
            r.topology.clone(),
            r.rho.to_string(),
            format!("{:e}", r.learning_rate),
            r.hidden_size.to_string(),
            r.model.clone(),
            r.seed.to_string(),
            r.patient_id.clone(),
            r.seen().to_string(),
            format!("{:.6}", m.rmse),
            format!("{:.6}", m.mard),
            format!("{:.6}", m.mae),
            format!("{:.6}", m.grmse),
            format!("{:.1}", m.time_lag),
            m.n_samples.to_string(),
            grmse_variant.to_owned(),
        ])?;
    }

    let mut order = Vec::new();
    let mut groups: BTreeMap<_, Vec<&ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = r.aggregate_key();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    for key in order {
        let members = &groups[&key];
        let reports: Vec<MetricsReport> = members.iter().map(|r| r.metrics).collect();
        let (mean, sd) = summarize(&reports).expect("groups are non-empty");
        let first = members[0];
        w.write_record([
            first.train_cohort.clone(),
            first.test_cohort.clone(),
            first.method.clone(),
            first.topology.clone(),
            first.rho.to_string(),
            format!("{:e}", first.learning_rate),
            first.hidden_size.to_string(),
            first.model.clone(),
            "ALL".into(),
            "ALL".into(),
            first.seen().to_string(),
            mean_sd(mean.rmse, sd.rmse),
            mean_sd(mean.mard, sd.mard),
            mean_sd(mean.mae, sd.mae),
            mean_sd(mean.grmse, sd.grmse),
            mean_sd(mean.time_lag, sd.time_lag),
            mean.n_samples.to_string(),
            grmse_variant.to_owned(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Deserialize)]
struct RawRow {
    train_cohort: String,
    test_cohort: String,
    method: String,
    topology: String,
    rho: f64,
    model: String,
    seed: String,
    rmse: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub cohort: String,
    pub method: String,
    pub topology: String,
    pub rho: f64,
    pub n_seeds: usize,
    /// Mean and population SD across seeds of the per-seed mean patient RMSE.
    pub rmse_mean: Option<f64>,
    pub rmse_sd: Option<f64>,
    /// Mean over shared seeds of `rmse - rmse(random, same ratio)`.
    pub delta_vs_random: Option<f64>,
    pub flag: String,
}

/// Per-seed mean patient RMSE of seen-cohort population models, keyed by
/// group and seed.
fn seen_population_rmse(report: &Path) -> Result<BTreeMap<GroupKey, BTreeMap<u64, f64>>, HarnessError> {
    let mut sums: BTreeMap<(GroupKey, u64), (f64, usize)> = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(report)?;
    for row in rdr.deserialize() {
        let row: RawRow = row?;
        if row.seed == "ALL" || row.model != MODEL_POPULATION || row.train_cohort != row.test_cohort {
            continue;
        }
        let seed: u64 = row
            .seed
            .parse()
            .map_err(|_| HarnessError::Config(format!("report: bad seed `{}`", row.seed)))?;
        let rmse: f64 = row
            .rmse
            .parse()
            .map_err(|_| HarnessError::Config(format!("report: bad rmse `{}`", row.rmse)))?;
        let method = serde_json::from_value(serde_json::Value::String(row.method.clone()))
            .map_err(|_| HarnessError::Config(format!("report: unknown method `{}`", row.method)))?;
        let key = GroupKey {
            cohort: row.train_cohort,
            method,
            topology: row.topology,
            rho_millis: (row.rho * 1000.0).round() as u32,
        };
        let e = sums.entry((key, seed)).or_insert((0.0, 0));
        e.0 += rmse;
        e.1 += 1;
    }
    let mut out: BTreeMap<GroupKey, BTreeMap<u64, f64>> = BTreeMap::new();
    for ((key, seed), (sum, n)) in sums {
        out.entry(key).or_default().insert(seed, sum / n as f64);
    }
    Ok(out)
}

/// Summary over the groups the plan defines. Groups with no results (for
/// example because every cell diverged) are reported as NA.
pub fn compare_report(artifacts: &Path) -> Result<Vec<SummaryRow>, HarnessError> {
    let manifest = Manifest::load(&artifacts.join("manifest.json"))?;
    let results = seen_population_rmse(&artifacts.join("report.csv"))?;
    let mut groups: Vec<GroupKey> = Vec::new();
    for cell in manifest.plan.cells() {
        let g = cell.group();
        if !groups.contains(&g) {
            groups.push(g);
        }
    }
    let rows = groups
        .iter()
        .map(|g| {
            let per_seed = results.get(g);
            let values: Vec<f64> = per_seed.map(|m| m.values().copied().collect()).unwrap_or_default();
            let (rmse_mean, rmse_sd) = mean_and_sd(&values);
            let reference = GroupKey {
                cohort: g.cohort.clone(),
                method: Method::Gluadfl,
                topology: "random".into(),
                rho_millis: g.rho_millis,
            };
            let is_reference = *g == reference;
            let delta_vs_random = match (per_seed, results.get(&reference)) {
                (Some(mine), Some(theirs)) => {
                    let deltas: Vec<f64> = mine
                        .iter()
                        .filter_map(|(seed, v)| theirs.get(seed).map(|r| v - r))
                        .collect();
                    mean_and_sd(&deltas).0
                }
                _ => None,
            };
            // Random is expected to beat the other decentralized topologies;
            // the centralized baselines carry no expected ordering.
            let flag = match (delta_vs_random, g.method) {
                _ if is_reference => "reference",
                (None, _) => "NA",
                (Some(_), Method::Fedavg | Method::Pooled) => "baseline",
                (Some(d), Method::Gluadfl) if d < 0.0 => "random_not_best",
                (Some(_), Method::Gluadfl) => "ok",
            };
            SummaryRow {
                cohort: g.cohort.clone(),
                method: g.method.name().into(),
                topology: g.topology.clone(),
                rho: g.rho(),
                n_seeds: values.len(),
                rmse_mean,
                rmse_sd,
                delta_vs_random,
                flag: flag.into(),
            }
        })
        .collect();
    Ok(rows)
}

fn mean_and_sd(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

pub fn write_summary<W: Write>(writer: W, rows: &[SummaryRow]) -> Result<(), HarnessError> {
    let na = |v: Option<f64>| v.map_or_else(|| "NA".to_owned(), |x| format!("{x:.6}"));
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "cohort",
        "method",
        "topology",
        "rho",
        "n_seeds",
        "rmse_mean",
        "rmse_sd",
        "rmse_mean_sd",
        "delta_vs_random",
        "flag",
    ])?;
    for r in rows {
        let mean_sd_cell = match (r.rmse_mean, r.rmse_sd) {
            (Some(m), Some(s)) => mean_sd(m, s),
            _ => "NA".into(),
        };
        w.write_record([
            r.cohort.clone(),
            r.method.clone(),
            r.topology.clone(),
            r.rho.to_string(),
            r.n_seeds.to_string(),
            na(r.rmse_mean),
            na(r.rmse_sd),
            mean_sd_cell,
            na(r.delta_vs_random),
            r.flag.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
