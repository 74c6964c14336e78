//! Asynchronous decentralized rounds.
//!
//! Round `t`: sample the activity mask and the round graph; every active node
//! averages its own round-`t-1` parameters with those of its senders (summed
//! in ascending node id), then
//! takes local SGD steps from the average. Inactive nodes carry their
//! parameters forward. After the last round the population model is the
//! unweighted mean over all nodes.

use rayon::prelude::*;

use super::{
    check_nodes, local_sgd, validation_rmse, ActivitySchedule, EngineCheckpoint, EngineError, NodeState,
    RunConfig, RunOutcome, RunTrace, TraceRecord,
};
use crate::learner::{LearnerError, ParamVector};
use crate::topology::{build_template, sample_round_graph, CommGraph, TopologyKind};

/// Mean of `own` and every received vector, summed with `own` first and then
/// the received vectors in the order given.
pub fn aggregate_neighbors(own: &ParamVector, received: &[&ParamVector]) -> Result<ParamVector, LearnerError> {
    if received.is_empty() {
        return Ok(own.clone());
    }
    let mut all: Vec<&ParamVector> = Vec::with_capacity(received.len() + 1);
    all.push(own);
    all.extend_from_slice(received);
    ParamVector::mean_of(&all)
}

/// Mean of node `n` and its senders, summed in ascending node id.
fn aggregate_by_id(snapshot: &[&ParamVector], n: usize, senders: &[usize]) -> Result<ParamVector, LearnerError> {
    if senders.is_empty() {
        return Ok(snapshot[n].clone());
    }
    let mut ids: Vec<usize> = senders.iter().copied().chain(std::iter::once(n)).collect();
    ids.sort_unstable();
    let all: Vec<&ParamVector> = ids.iter().map(|&m| snapshot[m]).collect();
    ParamVector::mean_of(&all)
}

pub struct GluadflSim<'a> {
    config: &'a RunConfig,
    nodes: Vec<NodeState>,
    template: Option<CommGraph>,
    schedule: ActivitySchedule,
    round: usize,
    trace: RunTrace,
}

impl<'a> GluadflSim<'a> {
    pub fn new(config: &'a RunConfig, nodes: Vec<NodeState>) -> Result<Self, EngineError> {
        config.validate()?;
        check_nodes(&nodes, config, 3)?;
        if config.topology.kind == TopologyKind::Star {
            return Err(EngineError::Config(
                "star topology is reserved for the centralized FedAvg baseline".into(),
            ));
        }
        let template = build_template(&config.topology, nodes.len())?;
        let schedule = ActivitySchedule::new(nodes.len(), config.inactive_ratio, config.seed)?;
        let mut sim = Self {
            config,
            nodes,
            template,
            schedule,
            round: 0,
            trace: RunTrace::default(),
        };
        let val_rmse = validation_rmse(&config.learner, &sim.population()?, &sim.nodes)?;
        sim.trace.records.push(TraceRecord {
            t: 0,
            active_nodes: 0,
            links: 0,
            mean_batch_loss: None,
            val_rmse,
        });
        Ok(sim)
    }

    /// Restores node parameters, round counter and trace from a checkpoint
    /// taken by a simulation with the same config and nodes.
    pub fn resume(config: &'a RunConfig, mut nodes: Vec<NodeState>, ckpt: EngineCheckpoint) -> Result<Self, EngineError> {
        if ckpt.node_params.len() != nodes.len() {
            return Err(EngineError::Config(format!(
                "checkpoint holds {} nodes, run has {}",
                ckpt.node_params.len(),
                nodes.len()
            )));
        }
        if ckpt.round > config.rounds {
            return Err(EngineError::Config("checkpoint is past the configured rounds".into()));
        }
        for (node, params) in nodes.iter_mut().zip(ckpt.node_params) {
            node.params = params;
        }
        let mut sim = Self::new(config, nodes)?;
        sim.round = ckpt.round;
        sim.trace = ckpt.trace;
        Ok(sim)
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn is_done(&self) -> bool {
        self.round >= self.config.rounds
    }

    pub fn nodes(&self) -> &[NodeState] {
        &self.nodes
    }

    pub fn trace(&self) -> &RunTrace {
        &self.trace
    }

    pub fn population(&self) -> Result<ParamVector, EngineError> {
        let params: Vec<&ParamVector> = self.nodes.iter().map(|n| &n.params).collect();
        Ok(ParamVector::mean_of(&params)?)
    }

    pub fn checkpoint(&self) -> EngineCheckpoint {
        EngineCheckpoint::new(
            "gluadfl",
            self.round,
            self.nodes.iter().map(|n| n.params.clone()).collect(),
            self.trace.clone(),
        )
    }

    pub fn round_graph(&self, t: usize) -> (Vec<bool>, CommGraph) {
        let active = self.schedule.mask(t);
        let graph = sample_round_graph(&self.config.topology, self.template.as_ref(), &active, self.config.seed, t);
        (active, graph)
    }

    /// Runs the next round. Nodes are processed in parallel unless `order`
    /// fixes a sequential processing order; the result is the same.
    pub fn step(&mut self, order: Option<&[usize]>) -> Result<(), EngineError> {
        let t = self.round + 1;
        let (active, graph) = self.round_graph(t);
        let snapshot: Vec<&ParamVector> = self.nodes.iter().map(|n| &n.params).collect();
        let config = self.config;
        let nodes = &self.nodes;

        let update = |n: usize| -> Result<(usize, ParamVector, f64), EngineError> {
            let aggregated = aggregate_by_id(&snapshot, n, &graph.in_neighbors[n])?;
            let grad_at = (!config.grad_at_aggregate).then_some(snapshot[n]);
            let node = &nodes[n];
            let (params, loss) = local_sgd(
                config,
                &node.train_samples,
                node.batch_rng_seed,
                t,
                aggregated,
                grad_at,
                config.batch_size,
            )
            .map_err(|e| match e {
                LearnerError::NonFinite(_) => EngineError::Diverged { round: t, node: n },
                other => other.into(),
            })?;
            if !params.is_finite() {
                return Err(EngineError::Diverged { round: t, node: n });
            }
            Ok((n, params, loss))
        };

        let live: Vec<usize> = match order {
            Some(order) => {
                let mut seen = vec![false; nodes.len()];
                if order.len() != nodes.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
                    return Err(EngineError::Config("processing order must be a permutation of node ids".into()));
                }
                order.iter().copied().filter(|&n| active[n]).collect()
            }
            None => (0..nodes.len()).filter(|&n| active[n]).collect(),
        };
        let results: Vec<Result<_, EngineError>> = match order {
            Some(_) => live.iter().map(|&n| update(n)).collect(),
            None => live.par_iter().map(|&n| update(n)).collect(),
        };

        let mut updates = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        updates.sort_unstable_by_key(|u| u.0);
        let mean_loss = (!updates.is_empty()).then(|| updates.iter().map(|u| u.2).sum::<f64>() / updates.len() as f64);
        let active_nodes = updates.len();
        for (n, params, _) in updates {
            self.nodes[n].params = params;
        }
        self.round = t;

        if config.is_eval_round(t) {
            let val_rmse = validation_rmse(&config.learner, &self.population()?, &self.nodes)?;
            self.trace.records.push(TraceRecord {
                t,
                active_nodes,
                links: graph.directed_edges(),
                mean_batch_loss: mean_loss,
                val_rmse,
            });
        }
        Ok(())
    }

    pub fn run_to_end(&mut self, order: Option<&[usize]>) -> Result<(), EngineError> {
        while !self.is_done() {
            self.step(order)?;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<RunOutcome, EngineError> {
        Ok(RunOutcome {
            population: self.population()?,
            trace: self.trace,
            nodes: self.nodes,
        })
    }
}

pub fn run_gluadfl(config: &RunConfig, nodes: Vec<NodeState>) -> Result<RunOutcome, EngineError> {
    let mut sim = GluadflSim::new(config, nodes)?;
    sim.run_to_end(None)?;
    sim.finish()
}

/// Same as [`run_gluadfl`], processing nodes sequentially in `order` every round.
pub fn run_gluadfl_with_order(
    config: &RunConfig,
    nodes: Vec<NodeState>,
    order: &[usize],
) -> Result<RunOutcome, EngineError> {
    let mut sim = GluadflSim::new(config, nodes)?;
    sim.run_to_end(Some(order))?;
    sim.finish()
}
