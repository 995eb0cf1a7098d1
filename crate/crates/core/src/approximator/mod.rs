//! Graph neural policy approximator: a pickup net and a move net trained to
//! imitate rollout decisions.

mod features;
mod labels;
mod net;
mod train;
mod weights;

pub use features::{available_pickups, encode, move_targets, tentative_controls, FeatureEncoding};
pub use labels::{generate_training_set, label_state, load_samples, save_samples, LabelConfig, LabeledSample};
pub use net::{softmax_cross_entropy, GraphConvNet, LayerShape, NetKind, NormalizedAdjacency, DEFAULT_HIDDEN};
pub use train::{accuracy, argmax, batch_gradient, build_examples, mean_loss, train, train_net, Adam, Example, TrainConfig, TrainedNets};
pub use weights::{graph_fingerprint, read_weights, write_weights};

use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::dynamics::Control;
use crate::error::{Error, Result};
use crate::graph::StreetGraph;
use crate::policy::{DecisionContext, Policy};

/// Pickup and move nets bound to one graph.
#[derive(Debug, Clone)]
pub struct ApproximatorPolicy {
    pickup: GraphConvNet,
    movement: GraphConvNet,
    adjacency: NormalizedAdjacency,
    fingerprint: u64,
    name: String,
}

impl ApproximatorPolicy {
    pub fn new(graph: &StreetGraph, pickup: GraphConvNet, movement: GraphConvNet) -> Result<Self> {
        if pickup.kind() != NetKind::Pickup || movement.kind() != NetKind::Move {
            return Err(Error::ShapeMismatch("expected a pickup net and a move net".into()));
        }
        let n = graph.node_count();
        if pickup.node_count() != n || movement.node_count() != n {
            return Err(Error::ShapeMismatch(format!("nets are not built for a {n}-node graph")));
        }
        if pickup.agents() != movement.agents() {
            return Err(Error::ShapeMismatch("nets disagree on the agent count".into()));
        }
        Ok(Self {
            pickup,
            movement,
            adjacency: NormalizedAdjacency::new(graph),
            fingerprint: graph_fingerprint(graph),
            name: "gnn".into(),
        })
    }

    pub fn from_trained(graph: &StreetGraph, nets: TrainedNets) -> Result<Self> {
        Self::new(graph, nets.pickup, nets.movement)
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Fingerprint of the graph the nets were bound to.
    pub fn graph_fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn agents(&self) -> usize {
        self.pickup.agents()
    }

    pub fn pickup_net(&self) -> &GraphConvNet {
        &self.pickup
    }

    pub fn move_net(&self) -> &GraphConvNet {
        &self.movement
    }

    pub fn save(&self, path: &Path, graph: &StreetGraph) -> Result<()> {
        let f = std::fs::File::create(path)?;
        write_weights(BufWriter::new(f), graph, &[&self.pickup, &self.movement])
    }

    pub fn load(path: &Path, graph: &StreetGraph) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        let nets = read_weights(BufReader::new(f), graph)?;
        let mut pickup = None;
        let mut movement = None;
        for net in nets {
            match net.kind() {
                NetKind::Pickup => pickup = Some(net),
                NetKind::Move => movement = Some(net),
            }
        }
        match (pickup, movement) {
            (Some(p), Some(m)) => Self::new(graph, p, m),
            _ => Err(Error::Weights("file must hold one pickup and one move net".into())),
        }
    }

    /// Net decision for `agent`. Busy agents follow their forced move. A
    /// pickup is taken when one is available and the pickup net prefers it;
    /// otherwise the move net's best feasible destination is used.
    pub fn approx_control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        let state = ctx.state;
        if let Some(forced) = state.forced_move(agent, ctx.graph) {
            return Ok(forced);
        }
        if ctx.graph.node_count() != self.adjacency.node_count() {
            return Err(Error::ShapeMismatch("policy was built for another graph".into()));
        }
        if state.agent_count() != self.agents() {
            return Err(Error::ShapeMismatch(format!(
                "policy was trained for {} agents, state has {}",
                self.agents(),
                state.agent_count()
            )));
        }
        let tentative = tentative_controls(state, agent, preceding, ctx.graph);
        let enc = encode(state, agent, &tentative, ctx.graph.node_count());
        if available_pickups(state, agent, preceding) > 0 {
            let logits = self.pickup.forward(&self.adjacency, &enc)?;
            if logits[1] > logits[0] {
                return Ok(Control::Pickup);
            }
        }
        let here = state.locations[agent];
        let targets = move_targets(ctx.graph, here);
        let logits = self.movement.logits_at(&self.adjacency, &enc, &targets)?;
        let v = targets[argmax(&logits)];
        Ok(if v == here { Control::Stay } else { Control::Move(v) })
    }
}

impl Policy for ApproximatorPolicy {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        self.approx_control(ctx, agent, preceding)
    }
}
