//! Centralized baselines: FedAvg over a star and plain SGD on pooled data.
//!
//! Both reuse the per-node mini-batch streams of the decentralized runs, so
//! runs built from the same nodes are paired sample-for-sample.

use super::{
    check_nodes, local_sgd, validation_rmse, ActivitySchedule, EngineError, NodeState, RunConfig, RunOutcome,
    RunTrace, TraceRecord,
};
use crate::learner::{LearnerError, ParamVector};
use crate::timeseries::Sample;

fn weighted_mean(vectors: &[(ParamVector, usize)], by_samples: bool) -> Result<ParamVector, EngineError> {
    if !by_samples {
        let refs: Vec<&ParamVector> = vectors.iter().map(|v| &v.0).collect();
        return Ok(ParamVector::mean_of(&refs)?);
    }
    let total: usize = vectors.iter().map(|v| v.1).sum();
    let mut acc = vec![0.0; vectors[0].0.len()];
    for (p, w) in vectors {
        let w = *w as f64 / total as f64;
        for (a, x) in acc.iter_mut().zip(p.iter()) {
            *a += w * x;
        }
    }
    Ok(ParamVector::new(acc)?)
}

fn diverged(round: usize, node: usize) -> impl Fn(LearnerError) -> EngineError {
    move |e| match e {
        LearnerError::NonFinite(_) => EngineError::Diverged { round, node },
        other => other.into(),
    }
}

/// Each round the server broadcasts its model to the active clients, each
/// client trains locally from it, and the server replaces its model with the
/// mean of the returned models. The server starts from the mean of the
/// clients' initial parameters.
pub fn run_fedavg(config: &RunConfig, mut nodes: Vec<NodeState>) -> Result<RunOutcome, EngineError> {
    config.validate()?;
    check_nodes(&nodes, config, 1)?;
    let schedule = ActivitySchedule::new(nodes.len(), config.inactive_ratio, config.seed)?;
    let counts = |nodes: &[NodeState]| -> Vec<(ParamVector, usize)> {
        nodes.iter().map(|n| (n.params.clone(), n.train_samples.len())).collect()
    };
    let mut server = weighted_mean(&counts(&nodes), config.weight_by_samples)?;
    let mut trace = RunTrace::default();
    trace.records.push(TraceRecord {
        t: 0,
        active_nodes: 0,
        links: 0,
        mean_batch_loss: None,
        val_rmse: validation_rmse(&config.learner, &server, &nodes)?,
    });

    for t in 1..=config.rounds {
        let active = schedule.mask(t);
        let mut returned = Vec::new();
        let mut loss_sum = 0.0;
        for node in nodes.iter_mut().filter(|n| active[n.node_id]) {
            let (params, loss) = local_sgd(
                config,
                &node.train_samples,
                node.batch_rng_seed,
                t,
                server.clone(),
                None,
                config.batch_size,
            )
            .map_err(diverged(t, node.node_id))?;
            if !params.is_finite() {
                return Err(EngineError::Diverged { round: t, node: node.node_id });
            }
            node.params = params.clone();
            loss_sum += loss;
            returned.push((params, node.train_samples.len()));
        }
        if !returned.is_empty() {
            server = weighted_mean(&returned, config.weight_by_samples)?;
        }
        if config.is_eval_round(t) {
            trace.records.push(TraceRecord {
                t,
                active_nodes: returned.len(),
                links: 2 * returned.len(),
                mean_batch_loss: (!returned.is_empty()).then(|| loss_sum / returned.len() as f64),
                val_rmse: validation_rmse(&config.learner, &server, &nodes)?,
            });
        }
    }
    Ok(RunOutcome {
        population: server,
        trace,
        nodes,
    })
}

/// A single learner trained on the union of all nodes' training samples,
/// starting from node 0's initial parameters. Each round it takes
/// `local_steps` steps with batches of `batch_size * n_nodes` samples, the
/// per-round sample budget of the whole federation. The activity ratio does
/// not apply. Zero rounds returns the initialization.
pub fn run_pooled_supervised(config: &RunConfig, nodes: Vec<NodeState>) -> Result<RunOutcome, EngineError> {
    config.validate_training()?;
    check_nodes(&nodes, config, 1)?;
    let pooled: Vec<Sample> = nodes.iter().flat_map(|n| n.train_samples.iter().cloned()).collect();
    let batch_size = config.batch_size * nodes.len();
    let seed = nodes[0].batch_rng_seed;
    let mut params = nodes[0].params.clone();
    let mut trace = RunTrace::default();
    trace.records.push(TraceRecord {
        t: 0,
        active_nodes: 0,
        links: 0,
        mean_batch_loss: None,
        val_rmse: validation_rmse(&config.learner, &params, &nodes)?,
    });
    for t in 1..=config.rounds {
        let (next, loss) =
            local_sgd(config, &pooled, seed, t, params, None, batch_size).map_err(diverged(t, 0))?;
        if !next.is_finite() {
            return Err(EngineError::Diverged { round: t, node: 0 });
        }
        params = next;
        if config.is_eval_round(t) {
            trace.records.push(TraceRecord {
                t,
                active_nodes: 1,
                links: 0,
                mean_batch_loss: Some(loss),
                val_rmse: validation_rmse(&config.learner, &params, &nodes)?,
            });
        }
    }
    Ok(RunOutcome {
        population: params,
        trace,
        nodes,
    })
}
