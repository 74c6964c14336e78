//! Executes a plan: trains every grid cell, selects hyperparameters on
//! validation error, evaluates the selected models on every cohort and
//! writes the artifacts.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::Utc;
use gluadfl::cohort::{prepare_cohort, PreparedCohort};
use gluadfl::engine::{
    build_nodes, cross_evaluate, evaluate_patient, personalize, run_fedavg, run_gluadfl, run_pooled_supervised,
    EngineError, EvalOptions, FineTune, RunConfig, RunOutcome, TestCohort, TrainedModel,
};
use gluadfl::learner::{save_checkpoint, LearnerSpec, ParamVector};
use gluadfl::metrics::Penalty;
use gluadfl::timeseries::{generate_synth_cohort, read_csv, SplitFractions};
use gluadfl::topology::{TopologyKind, TopologySpec};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::manifest::{CellRecord, CellStatus, Host, Manifest, MANIFEST_FORMAT, MANIFEST_VERSION};
use crate::plan::{Cell, ExperimentPlan, GroupKey, Method};
use crate::report::{
    compare_report, write_report, write_summary, ReportRow, MODEL_PERSONALIZED, MODEL_PERSONAL_ONLY, MODEL_POPULATION,
};
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Worker threads for independent cells.
    pub jobs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunSummary {
    pub cells: usize,
    pub diverged: usize,
}

/// The hyperparameters chosen for one group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub group: GroupKey,
    pub learning_rate: f64,
    pub hidden_size: usize,
    /// Mean over seeds of the final validation RMSE, mg/dL.
    pub mean_val_rmse: f64,
}

/// Loads and prepares every cohort of the plan, in plan order.
pub fn load_cohorts(plan: &ExperimentPlan) -> Result<Vec<PreparedCohort>, HarnessError> {
    let r = &plan.run;
    let fractions = SplitFractions {
        train: r.train_fraction,
        val: r.val_fraction,
        test: 1.0 - r.train_fraction - r.val_fraction,
    };
    plan.cohorts
        .iter()
        .enumerate()
        .map(|(i, source)| {
            let at = |e: &dyn std::fmt::Display| HarnessError::Config(format!("cohorts[{i}] ({}): {e}", source.name));
            let series = match (&source.synthetic, &source.csv) {
                (Some(spec), _) => generate_synth_cohort(spec).map_err(|e| at(&e))?,
                (None, Some(path)) => {
                    let path = plan.resolve(path);
                    let file = File::open(&path).map_err(|e| at(&format!("{}: {e}", path.display())))?;
                    read_csv(std::io::BufReader::new(file), source.interval_minutes).map_err(|e| at(&e))?
                }
                (None, None) => return Err(at(&"no data source")),
            };
            if series.is_empty() {
                return Err(at(&"cohort has no patients"));
            }
            prepare_cohort(source.name.clone(), &series, fractions, r.window(), r.norm_scope).map_err(|e| at(&e))
        })
        .collect()
}

fn cell_learner(plan: &ExperimentPlan, cell: &Cell) -> LearnerSpec {
    plan.run.learner_spec(cell.hidden_size)
}

fn cell_config(plan: &ExperimentPlan, cell: &Cell) -> RunConfig {
    let r = &plan.run;
    let kind = match cell.method {
        Method::Gluadfl => TopologyKind::from_name(&cell.topology).expect("plan topologies are valid"),
        Method::Fedavg | Method::Pooled => TopologyKind::Star,
    };
    RunConfig {
        rounds: r.rounds,
        learning_rate: cell.learning_rate,
        topology: TopologySpec {
            kind,
            cluster_size: r.cluster_size,
            comm_batch: r.comm_batch,
        },
        learner: cell_learner(plan, cell),
        inactive_ratio: cell.rho,
        seed: cell.seed,
        batch_size: r.batch_size,
        local_steps: r.local_steps,
        grad_at_aggregate: r.grad_at_aggregate,
        eval_every: r.eval_every,
        clip_norm: r.clip_norm,
        weight_by_samples: r.weight_by_samples,
    }
}

fn train_cell(plan: &ExperimentPlan, cohort: &PreparedCohort, cell: &Cell) -> Result<RunOutcome, EngineError> {
    let config = cell_config(plan, cell);
    let nodes = build_nodes(cohort, &config.learner, cell.seed);
    match cell.method {
        Method::Gluadfl => run_gluadfl(&config, nodes),
        Method::Fedavg => run_fedavg(&config, nodes),
        Method::Pooled => run_pooled_supervised(&config, nodes),
    }
}

/// Per group, the (learning rate, hidden size) pair with the lowest mean
/// final validation RMSE over seeds. A pair is only eligible when every one
/// of its seeds finished; ties go to the pair listed first.
pub fn select_hyperparameters(results: &[(Cell, Option<f64>)]) -> (Vec<Selection>, Vec<GroupKey>) {
    // (learning rate bits, hidden size), learning rate, per-seed results
    type Combo = ((u64, usize), f64, Vec<Option<f64>>);
    let mut groups: Vec<GroupKey> = Vec::new();
    let mut combos: BTreeMap<GroupKey, Vec<Combo>> = BTreeMap::new();
    for (cell, val) in results {
        let g = cell.group();
        if !groups.contains(&g) {
            groups.push(g.clone());
        }
        let key = (cell.learning_rate.to_bits(), cell.hidden_size);
        let list = combos.entry(g).or_default();
        match list.iter_mut().find(|c| c.0 == key) {
            Some(c) => c.2.push(*val),
            None => list.push((key, cell.learning_rate, vec![*val])),
        }
    }
    let mut selected = Vec::new();
    let mut unselected = Vec::new();
    for g in groups {
        let mut best: Option<Selection> = None;
        for ((_, hidden_size), lr, vals) in &combos[&g] {
            let Some(vals) = vals.iter().copied().collect::<Option<Vec<f64>>>() else {
                continue;
            };
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            if best.as_ref().is_none_or(|b| mean < b.mean_val_rmse) {
                best = Some(Selection {
                    group: g.clone(),
                    learning_rate: *lr,
                    hidden_size: *hidden_size,
                    mean_val_rmse: mean,
                });
            }
        }
        match best {
            Some(s) => selected.push(s),
            None => unselected.push(g),
        }
    }
    (selected, unselected)
}

fn write_file(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Runs the whole plan and writes `traces/`, `models/`, `report.csv`,
/// `summary.csv` and `manifest.json` under `opts.out_dir`. Divergent cells
/// are recorded and skipped; any other failure aborts the run.
pub fn run_plan(plan: &ExperimentPlan, opts: &RunOptions) -> Result<RunSummary, HarnessError> {
    plan.validate()?;
    if opts.jobs == 0 {
        return Err(HarnessError::Config("jobs must be >= 1".into()));
    }
    let started = Utc::now();
    let clock = Instant::now();
    let cohorts = load_cohorts(plan)?;
    let cohort_index: BTreeMap<&str, &PreparedCohort> = cohorts.iter().map(|c| (c.name.as_str(), c)).collect();
    let cells = plan.cells();
    let out = &opts.out_dir;
    fs::create_dir_all(out.join("models"))?;
    let mut artifacts = Vec::new();

    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build()?;
    let outcomes: Vec<(Result<RunOutcome, EngineError>, f64)> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| {
                let t0 = Instant::now();
                let res = train_cell(plan, cohort_index[cell.cohort.as_str()], cell);
                (res, t0.elapsed().as_secs_f64())
            })
            .collect()
    });

    let mut records = Vec::with_capacity(cells.len());
    let mut populations: Vec<Option<ParamVector>> = Vec::with_capacity(cells.len());
    let mut finals = Vec::with_capacity(cells.len());
    for (cell, (res, seconds)) in cells.iter().zip(outcomes) {
        let id = cell.id();
        let status = match res {
            Ok(outcome) => {
                let rel = format!("traces/{id}.csv");
                outcome
                    .trace
                    .write_csv(write_file(&out.join(&rel))?, &cell.topology, cell.rho, cell.seed)?;
                artifacts.push(rel);
                let val = outcome.trace.final_val_rmse().expect("traces start with round 0");
                populations.push(Some(outcome.population));
                finals.push((cell.clone(), Some(val)));
                CellStatus::Ok { final_val_rmse: val }
            }
            Err(EngineError::Diverged { round, node }) => {
                populations.push(None);
                finals.push((cell.clone(), None));
                CellStatus::Diverged { round, node }
            }
            Err(e) => return Err(HarnessError::Config(format!("cell {id}: {e}"))),
        };
        records.push(CellRecord {
            id,
            cell: cell.clone(),
            status,
            seconds,
        });
    }

    let (selections, unselected) = select_hyperparameters(&finals);
    let test_cohorts: Vec<TestCohort> = cohorts.iter().map(TestCohort::from).collect();
    let eval_opts = EvalOptions {
        penalty: plan.run.penalty,
        negative_lags: plan.run.negative_lags,
        ..EvalOptions::new(plan.run.window())
    };
    let mut rows = Vec::new();
    for sel in &selections {
        let cohort = cohort_index[sel.group.cohort.as_str()];
        for (i, cell) in cells.iter().enumerate() {
            let matches = cell.group() == sel.group
                && cell.learning_rate == sel.learning_rate
                && cell.hidden_size == sel.hidden_size;
            let Some(population) = populations[i].as_ref().filter(|_| matches) else {
                continue;
            };
            let spec = cell_learner(plan, cell);
            let rel = format!("models/{}.json", cell.id());
            save_checkpoint(&out.join(&rel), &spec, population)?;
            artifacts.push(rel);

            let row = |test_cohort: &str, model: &str, patient_id: &str, metrics| ReportRow {
                train_cohort: cell.cohort.clone(),
                test_cohort: test_cohort.to_owned(),
                method: cell.method.name().into(),
                topology: cell.topology.clone(),
                rho: cell.rho,
                learning_rate: cell.learning_rate,
                hidden_size: cell.hidden_size,
                model: model.into(),
                seed: cell.seed,
                patient_id: patient_id.to_owned(),
                metrics,
            };
            let model = TrainedModel {
                train_cohort: cell.cohort.clone(),
                spec: spec.clone(),
                params: population.clone(),
                stats: cohort.stats,
            };
            for col in cross_evaluate(std::slice::from_ref(&model), &test_cohorts, &eval_opts)?.remove(0) {
                for p in &col.patients {
                    rows.push(row(&col.test_cohort, MODEL_POPULATION, &p.patient_id, p.report));
                }
            }

            if let Some(ft) = &plan.personalize {
                let ft = FineTune {
                    learning_rate: ft.learning_rate,
                    steps: ft.steps,
                    batch_size: ft.batch_size,
                    clip_norm: plan.run.clip_norm,
                };
                let nodes = build_nodes(cohort, &spec, cell.seed);
                for (label, from_population) in [(MODEL_PERSONALIZED, true), (MODEL_PERSONAL_ONLY, false)] {
                    for (node, patient) in nodes.iter().zip(&cohort.patients) {
                        let start = if from_population { population } else { &node.params };
                        let params = match personalize(&spec, start, node, &ft) {
                            Ok(p) => p,
                            Err(EngineError::NoTrainingData { .. }) => continue,
                            Err(e) => return Err(e.into()),
                        };
                        if let Some(report) =
                            evaluate_patient(&spec, &params, &patient.test_raw, &node.stats, &eval_opts)?
                        {
                            rows.push(row(&cohort.name, label, &node.patient_id, report));
                        }
                    }
                }
            }
        }
    }

    write_report(write_file(&out.join("report.csv"))?, &rows, &plan.run.penalty.variant())?;
    artifacts.push("report.csv".into());
    artifacts.push("summary.csv".into());
    artifacts.push("manifest.json".into());

    let diverged = records
        .iter()
        .filter(|r| matches!(r.status, CellStatus::Diverged { .. }))
        .count();
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: plan.config_hash(),
        plan: plan.clone(),
        jobs: opts.jobs,
        cells: records,
        selections,
        unselected,
        artifacts,
        started,
        finished: Utc::now(),
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        host: Host::current(),
    };
    let mut w = write_file(&out.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut w, &manifest)?;
    std::io::Write::flush(&mut w)?;
    drop(w);

    let summary = compare_report(out)?;
    write_summary(write_file(&out.join("summary.csv"))?, &summary)?;

    Ok(RunSummary {
        cells: cells.len(),
        diverged,
    })
}

/// Scores a saved model on every cohort of the plan and writes the rows to
/// `out` in the report format. `train_cohort` names the cohort whose
/// normalization the model was trained with.
pub fn evaluate_checkpoint(
    plan: &ExperimentPlan,
    checkpoint: &Path,
    train_cohort: &str,
    out: &Path,
) -> Result<usize, HarnessError> {
    let ckpt = gluadfl::learner::load_checkpoint(checkpoint)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", checkpoint.display())))?;
    let cohorts = load_cohorts(plan)?;
    let Some(home) = cohorts.iter().find(|c| c.name == train_cohort) else {
        return Err(HarnessError::Config(format!("no cohort named `{train_cohort}` in the plan")));
    };
    if ckpt.spec.input_len != plan.run.input_len {
        return Err(HarnessError::Config(format!(
            "checkpoint input length {} does not match run.input_len {}",
            ckpt.spec.input_len, plan.run.input_len
        )));
    }
    let model = TrainedModel {
        train_cohort: train_cohort.to_owned(),
        spec: ckpt.spec,
        params: ckpt.params,
        stats: home.stats,
    };
    let test_cohorts: Vec<TestCohort> = cohorts.iter().map(TestCohort::from).collect();
    let eval_opts = EvalOptions {
        penalty: plan.run.penalty,
        negative_lags: plan.run.negative_lags,
        ..EvalOptions::new(plan.run.window())
    };
    let mut rows = Vec::new();
    for col in cross_evaluate(std::slice::from_ref(&model), &test_cohorts, &eval_opts)?.remove(0) {
        for p in &col.patients {
            rows.push(ReportRow {
                train_cohort: train_cohort.to_owned(),
                test_cohort: col.test_cohort.clone(),
                method: "checkpoint".into(),
                topology: "NA".into(),
                rho: 0.0,
                learning_rate: 0.0,
                hidden_size: model.spec.hidden_size,
                model: MODEL_POPULATION.into(),
                seed: 0,
                patient_id: p.patient_id.clone(),
                metrics: p.report,
            });
        }
    }
    write_report(write_file(out)?, &rows, &plan.run.penalty.variant())?;
    Ok(rows.len())
}
