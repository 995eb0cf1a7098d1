//! Training labels: rollout decisions on random states.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::demand::{sample_minute, DemandModel};
use crate::dynamics::{ArrivalModel, Control, SystemState};
use crate::error::{Error, Result};
use crate::graph::StreetGraph;
use crate::policy::{best_leaf, greedy_control, DecisionContext, OneAtATimeRollout, Greedy, RolloutConfig};
use crate::seeding::{derive_seed, stream, TAG_LABELS};

/// One rollout decision. `preceding` holds the rollout controls of agents
/// `0..agent` at the same state.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub state: SystemState,
    pub agent: usize,
    pub preceding: Vec<Control>,
    pub label: Control,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelConfig {
    /// Number of labels to produce.
    pub samples: usize,
    pub agents: usize,
    pub rollout: RolloutConfig,
    /// Random states evolve under greedy for `0..=max_warmup` minutes before
    /// being labeled, so that requests and busy agents appear.
    pub max_warmup: u32,
    pub seed: u64,
}

impl LabelConfig {
    pub fn new(samples: usize, agents: usize, seed: u64) -> Self {
        Self { samples, agents, rollout: RolloutConfig::desk(), max_warmup: 20, seed }
    }
}

// States are produced in blocks so parallel generation stays ordered.
const BLOCK: usize = 32;

/// Labels random states with one-agent-at-a-time rollout over greedy under
/// `model`. Agents that are busy get no label. Deterministic in the seed.
pub fn generate_training_set(graph: &StreetGraph, model: &DemandModel, config: &LabelConfig) -> Result<Vec<LabeledSample>> {
    if config.agents == 0 {
        return Err(Error::InvalidArgument("at least one agent is needed".into()));
    }
    model.check_graph(graph)?;
    let rollout = OneAtATimeRollout::new(Greedy, config.rollout, ArrivalModel::Stochastic(model.clone()));
    let mut out = Vec::with_capacity(config.samples);
    let mut next_state = 0usize;
    while out.len() < config.samples {
        let block: Vec<Vec<LabeledSample>> = (next_state..next_state + BLOCK)
            .into_par_iter()
            .map(|i| {
                let state = random_state(graph, model, config, i)?;
                let seed = derive_seed(config.seed, &[TAG_LABELS, i as u64, 1]);
                label_state(graph, &rollout, &state, seed)
            })
            .collect::<Result<_>>()?;
        next_state += BLOCK;
        for s in block.into_iter().flatten() {
            if out.len() < config.samples {
                out.push(s);
            }
        }
        if next_state > config.samples.saturating_mul(50) + BLOCK {
            return Err(Error::InvalidArgument("random states yield no free agents to label".into()));
        }
    }
    log::info!("labeled {} decisions from {} states", out.len(), next_state);
    Ok(out)
}

fn random_state(graph: &StreetGraph, model: &DemandModel, config: &LabelConfig, index: usize) -> Result<SystemState> {
    let mut rng = stream(config.seed, &[TAG_LABELS, index as u64, 0]);
    let n = graph.node_count();
    let locations = (0..config.agents).map(|_| rng.gen_range(0..n)).collect();
    let mut state = SystemState::new(locations);
    let warmup = rng.gen_range(0..=config.max_warmup);
    state.outstanding = sample_minute(model, &mut rng, 1)?;
    for _ in 0..warmup {
        let mut controls = Vec::with_capacity(config.agents);
        for j in 0..config.agents {
            let c = greedy_control(&state, j, &controls, graph);
            controls.push(c);
        }
        let arrivals = sample_minute(model, &mut rng, state.minute + 1)?;
        state.apply(&controls, &arrivals, graph)?;
    }
    Ok(state)
}

/// Rollout labels for every free agent of `state`, with an unbounded
/// horizon so every trajectory is truncated.
pub fn label_state(
    graph: &StreetGraph,
    rollout: &OneAtATimeRollout<Greedy>,
    state: &SystemState,
    seed: u64,
) -> Result<Vec<LabeledSample>> {
    let ctx = DecisionContext { graph, state, horizon: u32::MAX - 1, seed };
    let mut preceding = Vec::with_capacity(state.agent_count());
    let mut out = Vec::new();
    for agent in 0..state.agent_count() {
        if let Some(forced) = state.forced_move(agent, graph) {
            preceding.push(forced);
            continue;
        }
        let leaves = rollout.evaluate_candidates(&ctx, agent, &preceding)?;
        let label = best_leaf(&leaves).expect("stay is always feasible");
        out.push(LabeledSample { state: state.clone(), agent, preceding: preceding.clone(), label });
        preceding.push(label);
    }
    Ok(out)
}

/// One JSON record per line.
pub fn save_samples(path: &Path, samples: &[LabeledSample]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let line = serde_json::to_string(s).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_samples(path: &Path) -> Result<Vec<LabeledSample>> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::parse(i + 1, e.to_string()))?);
    }
    Ok(out)
}
