//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use gluadfl::cohort::{prepare_cohort, NormScope, PreparedCohort, WindowSpec};
use gluadfl::engine::{
    build_nodes, cross_evaluate, personalize, predictions, run_fedavg, run_gluadfl, run_gluadfl_with_order,
    run_pooled_supervised, EvalOptions, FineTune, NodeState, RunConfig, RunOutcome, TestCohort, TrainedModel,
};
use gluadfl::learner::{LearnerSpec, ParamVector};
use gluadfl::metrics::{grmse, mae, mard, rmse, time_lag, GPenaltySpec};
use gluadfl::timeseries::{
    generate_synth_cohort, normalize, split_by_time, windowize, NormStats, SplitFractions, SynthCohortSpec,
};
use gluadfl::topology::{TopologyKind, TopologySpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const NODES: usize = 16;
const DAYS: usize = 14;
const ROUNDS: usize = 500;
const HIDDEN: usize = 8;
const LEARNING_RATE: f64 = 0.1;
const HETEROGENEITY: f64 = 0.5;
const COMM_BATCH: usize = 7;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn synthetic_cohort(seed: u64) -> PreparedCohort {
    let mut spec = SynthCohortSpec::new(NODES, DAYS, 100 + seed);
    spec.heterogeneity = HETEROGENEITY;
    spec.id_prefix = format!("s{seed}_");
    let raw = generate_synth_cohort(&spec).expect("synthetic cohort");
    prepare_cohort(
        format!("synth{seed}"),
        &raw,
        SplitFractions::default(),
        WindowSpec::default(),
        NormScope::Pooled,
    )
    .expect("prepared cohort")
}

fn learner_spec() -> LearnerSpec {
    LearnerSpec::lstm(12, HIDDEN, 0)
}

fn run_config(kind: TopologyKind, rho: f64, seed: u64) -> RunConfig {
    let mut c = RunConfig::new(learner_spec(), TopologySpec::new(kind, COMM_BATCH));
    c.rounds = ROUNDS;
    c.learning_rate = LEARNING_RATE;
    c.inactive_ratio = rho;
    c.seed = seed;
    c.eval_every = 50;
    c
}

/// RMSE over every test window of every patient, mg/dL.
fn pooled_test_rmse(params: &ParamVector, cohort: &PreparedCohort) -> f64 {
    let (mut sse, mut n) = (0.0, 0usize);
    for p in &cohort.patients {
        if let Some(ps) = predictions(&learner_spec(), params, &p.test_raw, &p.stats, cohort.window).unwrap() {
            sse += ps.actual().iter().zip(ps.predicted()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            n += ps.len();
        }
    }
    (sse / n as f64).sqrt()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len().is_multiple_of(2) {
        (v[m - 1] + v[m]) / 2.0
    } else {
        v[m]
    }
}

/// Shared training runs for the empirical criteria.
struct Experiments {
    cohorts: Vec<PreparedCohort>,
    nodes: Vec<Vec<NodeState>>,
    random: Vec<RunOutcome>,
    crit4_seconds: f64,
    fedavg: Vec<f64>,
    pooled: Vec<f64>,
}

impl Experiments {
    fn run() -> Self {
        let start = Instant::now();
        let cohorts: Vec<PreparedCohort> = (0..SEEDS).map(synthetic_cohort).collect();
        let nodes: Vec<Vec<NodeState>> = cohorts
            .iter()
            .zip(0..)
            .map(|(c, seed)| build_nodes(c, &learner_spec(), seed))
            .collect();
        let (mut random, mut fedavg, mut pooled) = (Vec::new(), Vec::new(), Vec::new());
        for seed in 0..SEEDS as usize {
            let cfg = run_config(TopologyKind::Random, 0.0, seed as u64);
            random.push(run_gluadfl(&cfg, nodes[seed].clone()).unwrap());
            let star = run_config(TopologyKind::Star, 0.0, seed as u64);
            let f = run_fedavg(&star, nodes[seed].clone()).unwrap();
            fedavg.push(pooled_test_rmse(&f.population, &cohorts[seed]));
            let p = run_pooled_supervised(&star, nodes[seed].clone()).unwrap();
            pooled.push(pooled_test_rmse(&p.population, &cohorts[seed]));
        }
        Self {
            crit4_seconds: start.elapsed().as_secs_f64(),
            cohorts,
            nodes,
            random,
            fedavg,
            pooled,
        }
    }

    fn random_rmse(&self) -> Vec<f64> {
        self.random
            .iter()
            .zip(&self.cohorts)
            .map(|(r, c)| pooled_test_rmse(&r.population, c))
            .collect()
    }

    fn topology_rmse(&self, kind: TopologyKind, rho: f64) -> Vec<f64> {
        (0..SEEDS as usize)
            .map(|seed| {
                let cfg = run_config(kind, rho, seed as u64);
                let out = run_gluadfl(&cfg, self.nodes[seed].clone()).unwrap();
                pooled_test_rmse(&out.population, &self.cohorts[seed])
            })
            .collect()
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..SEEDS {
        for spec in [LearnerSpec::lstm(12, 8, seed), LearnerSpec::linear(12, seed)] {
            let check = finite_difference_check(&spec, 1000 + seed, 4, 1e-5);
            if check.checked == 0 {
                return outcome(false, format!("no coordinate above the FD floor for seed {seed}"));
            }
            worst = worst.max(check.max_rel_err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 10.0,
        format!("max relative error {worst:.2e}, {secs:.2} s"),
    )
}

fn criterion_2() -> Outcome {
    let cohort = {
        let raw = generate_synth_cohort(&SynthCohortSpec::new(NODES, 2, 7)).unwrap();
        prepare_cohort("fp", &raw, SplitFractions::default(), WindowSpec::default(), NormScope::Pooled).unwrap()
    };
    let start = Instant::now();
    let mut cfg = run_config(TopologyKind::Random, 0.0, 0);
    cfg.topology.comm_batch = NODES - 1;
    cfg.rounds = 1;
    cfg.learning_rate = 0.0;
    let nodes = build_nodes(&cohort, &cfg.learner, 3);
    let len = nodes[0].params.len();
    let target: Vec<f64> = (0..len)
        .map(|i| nodes.iter().map(|n| n.params[i]).sum::<f64>() / NODES as f64)
        .collect();
    let out = run_gluadfl(&cfg, nodes).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let dev = out
        .nodes
        .iter()
        .map(|n| &n.params)
        .chain(std::iter::once(&out.population))
        .flat_map(|p| p.iter().zip(&target).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    outcome(dev < 1e-12 && secs < 1.0, format!("max deviation {dev:.2e}, {secs:.3} s"))
}

fn criterion_3() -> Outcome {
    let cohort = {
        let raw = generate_synth_cohort(&SynthCohortSpec::new(NODES, 3, 8)).unwrap();
        prepare_cohort("det", &raw, SplitFractions::default(), WindowSpec::default(), NormScope::Pooled).unwrap()
    };
    let mut cfg = run_config(TopologyKind::Random, 0.3, 21);
    cfg.rounds = 50;
    cfg.eval_every = 5;
    let nodes = build_nodes(&cohort, &cfg.learner, 21);
    let base = run_gluadfl(&cfg, nodes.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut identical = 0;
    let trials = 3;
    for trial in 0..trials {
        let mut order: Vec<usize> = (0..NODES).collect();
        if trial == 0 {
            order.reverse();
        } else {
            order.shuffle(&mut rng);
        }
        let other = run_gluadfl_with_order(&cfg, nodes.clone(), &order).unwrap();
        let same_params = base
            .population
            .iter()
            .zip(other.population.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        let same_trace = base.trace.records.len() == other.trace.records.len()
            && base
                .trace
                .records
                .iter()
                .zip(&other.trace.records)
                .all(|(a, b)| a.val_rmse.to_bits() == b.val_rmse.to_bits() && a == b);
        if same_params && same_trace {
            identical += 1;
        }
    }
    outcome(
        identical == trials,
        format!("{identical}/{trials} permuted orders bit-identical to the parallel run"),
    )
}

fn criterion_4(ex: &Experiments) -> Outcome {
    let random = ex.random_rmse();
    let mut worst: f64 = 0.0;
    for s in 0..SEEDS as usize {
        worst = worst
            .max((random[s] - ex.fedavg[s]).abs() / ex.fedavg[s])
            .max((random[s] - ex.pooled[s]).abs() / ex.pooled[s]);
    }
    let secs = ex.crit4_seconds;
    outcome(
        worst <= 0.05 && secs < 600.0,
        format!(
            "worst per-seed relative gap {:.2}% (random {:.2}, fedavg {:.2}, pooled {:.2} mean), {secs:.0} s",
            100.0 * worst,
            mean(&random),
            mean(&ex.fedavg),
            mean(&ex.pooled)
        ),
    )
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_5(ex: &Experiments) -> Outcome {
    let random = ex.random_rmse();
    let ring = ex.topology_rmse(TopologyKind::Ring, 0.0);
    let cluster = ex.topology_rmse(TopologyKind::Cluster, 0.0);
    let eps = 0.5;
    let means_ok = mean(&random) <= mean(&cluster) + eps && mean(&random) <= mean(&ring) + eps;
    let best = (0..SEEDS as usize)
        .filter(|&s| random[s] < ring[s] && random[s] < cluster[s])
        .count();
    outcome(
        means_ok && 2 * best > SEEDS as usize,
        format!(
            "mean RMSE random {:.3}, ring {:.3}, cluster {:.3}; random strictly best in {best}/{SEEDS} seeds",
            mean(&random),
            mean(&ring),
            mean(&cluster)
        ),
    )
}

fn criterion_6(ex: &Experiments) -> Outcome {
    let base = ex.random_rmse();
    let degradation = |rho: f64| -> Vec<f64> {
        ex.topology_rmse(TopologyKind::Random, rho)
            .iter()
            .zip(&base)
            .map(|(r, b)| (r - b) / b)
            .collect()
    };
    let d3 = degradation(0.3);
    let d5 = degradation(0.5);
    let d7 = degradation(0.7);
    let d9 = degradation(0.9);
    let ordered = (0..SEEDS as usize).filter(|&s| d5[s] < d9[s]).count();
    let worst_low = d3.iter().chain(&d5).chain(&d7).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    outcome(
        ordered >= 4 && worst_low < 0.10,
        format!(
            "mean degradation rho=0.3 {:.1}%, 0.5 {:.1}%, 0.7 {:.1}%, 0.9 {:.1}%; 0.5 < 0.9 in {ordered}/{SEEDS} seeds; worst at rho<=0.7 {:.1}%",
            100.0 * mean(&d3),
            100.0 * mean(&d5),
            100.0 * mean(&d7),
            100.0 * mean(&d9),
            100.0 * worst_low
        ),
    )
}

fn criterion_7(ex: &Experiments) -> Outcome {
    let ft = FineTune {
        learning_rate: LEARNING_RATE,
        steps: ROUNDS,
        batch_size: 64,
        clip_norm: None,
    };
    let spec = learner_spec();
    let mut wins = 0;
    let mut gaps = Vec::new();
    for s in 0..SEEDS as usize {
        let cohort = &ex.cohorts[s];
        let mut warm = Vec::new();
        let mut cold = Vec::new();
        for (node, patient) in ex.nodes[s].iter().zip(&cohort.patients) {
            let node_rmse = |p: &ParamVector| {
                let ps = predictions(&spec, p, &patient.test_raw, &patient.stats, cohort.window)
                    .unwrap()
                    .unwrap();
                rmse(&ps)
            };
            let from_population = personalize(&spec, &ex.random[s].population, node, &ft).unwrap();
            let from_scratch = personalize(&spec, &node.params, node, &ft).unwrap();
            warm.push(node_rmse(&from_population));
            cold.push(node_rmse(&from_scratch));
        }
        let (w, c) = (median(warm), median(cold));
        gaps.push(c - w);
        if w < c {
            wins += 1;
        }
    }
    outcome(
        wins == SEEDS as usize,
        format!(
            "population warm start wins on median node RMSE in {wins}/{SEEDS} seeds (mean margin {:.2} mg/dL)",
            mean(&gaps)
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let unit = GPenaltySpec {
        penalty_weight: 1.0,
        ..GPenaltySpec::default()
    };
    let mut failures = Vec::new();
    for i in 0..1000 {
        let ps = random_prediction_set(&mut rng);
        if grmse(&ps, &unit).to_bits() != rmse(&ps).to_bits() {
            failures.push(format!("grmse(weight=1) != rmse on set {i}"));
        }
        if !(mae(&ps) <= rmse(&ps) && rmse(&ps) <= grmse(&ps, &GPenaltySpec::default())) {
            failures.push(format!("MAE <= RMSE <= gRMSE violated on set {i}"));
        }
        if !(rel_close(rmse(&ps), brute_rmse(&ps), 1e-12)
            && rel_close(mae(&ps), brute_mae(&ps), 1e-12)
            && rel_close(mard(&ps).unwrap(), brute_mard(&ps), 1e-12))
        {
            failures.push(format!("brute-force mismatch on set {i}"));
        }
    }
    for k in 0..=12 {
        let (actual, predicted) = shifted_pair(&mut rng, 400, k);
        let lag = time_lag(&actual, &predicted, 5, 12).unwrap();
        if lag != 5.0 * k as f64 {
            failures.push(format!("time lag {lag} for shift {k}"));
        }
    }
    match failures.first() {
        None => outcome(true, "1000 random sets and shifts 0..=12 agree with the oracles"),
        Some(f) => outcome(false, format!("{} failures, first: {f}", failures.len())),
    }
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let stats = NormStats::new(150.0, 50.0).unwrap();
    let mut mismatches = 0;
    let mut windows = 0;
    for _ in 0..200 {
        let s = random_gapped_series(&mut rng);
        let input_len = rng.random_range(1..15);
        let horizon = rng.random_range(1..8);
        let got: Vec<(usize, usize)> = windowize(&normalize(&s, &stats), &s, input_len, horizon)
            .iter()
            .map(|w| (w.target_index + 1 - input_len - horizon, w.target_index))
            .collect();
        let want = enumerate_windows(s.values(), input_len, horizon);
        windows += want.len();
        if got != want {
            mismatches += 1;
        }
        let train = rng.random_range(1..98);
        let val = rng.random_range(1..99 - train);
        let fractions = SplitFractions {
            train: train as f64 / 100.0,
            val: val as f64 / 100.0,
            test: (100 - train - val) as f64 / 100.0,
        };
        let split_ok = match split_by_time(&s, fractions) {
            Ok((a, b, c)) => (a.len(), b.len(), c.len()) == enumerate_split(s.len(), fractions.train, fractions.val),
            Err(_) => s.len() < 3,
        };
        if !split_ok {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("200 series, {windows} windows, {mismatches} mismatches"),
    )
}

fn criterion_10(ex: &Experiments) -> Outcome {
    let (a, b) = (0, 1);
    let models: Vec<TrainedModel> = [a, b]
        .iter()
        .map(|&s| TrainedModel {
            train_cohort: ex.cohorts[s].name.clone(),
            spec: learner_spec(),
            params: ex.random[s].population.clone(),
            stats: ex.cohorts[s].stats,
        })
        .collect();
    let tests: Vec<TestCohort> = [a, b].iter().map(|&s| TestCohort::from(&ex.cohorts[s])).collect();
    let matrix = cross_evaluate(&models, &tests, &EvalOptions::new(WindowSpec::default())).unwrap();
    let cell = |r: usize, c: usize| matrix[r][c].mean.expect("scored patients").rmse;
    // For each test cohort, compare the model trained on it with the other one.
    let gap_a = (cell(1, 0) - cell(0, 0)).abs() / cell(0, 0);
    let gap_b = (cell(0, 1) - cell(1, 1)).abs() / cell(1, 1);
    let worst = gap_a.max(gap_b);
    outcome(
        worst < 0.10,
        format!(
            "seen/unseen mean patient RMSE: cohort A {:.2}/{:.2}, cohort B {:.2}/{:.2}; worst gap {:.2}%",
            cell(0, 0),
            cell(1, 0),
            cell(1, 1),
            cell(0, 1),
            100.0 * worst
        ),
    )
}

fn main() -> ExitCode {
    let mut all_pass = true;
    let mut report = |n: usize, o: Outcome| {
        all_pass &= o.pass;
        println!("criterion {n:>2}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    };
    report(1, criterion_1());
    report(2, criterion_2());
    report(3, criterion_3());
    let ex = Experiments::run();
    report(4, criterion_4(&ex));
    report(5, criterion_5(&ex));
    report(6, criterion_6(&ex));
    report(7, criterion_7(&ex));
    report(8, criterion_8());
    report(9, criterion_9());
    report(10, criterion_10(&ex));
    if all_pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
