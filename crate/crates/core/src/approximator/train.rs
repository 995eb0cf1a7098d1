//! Supervised training of the pickup and move nets with Adam.

use rand::seq::SliceRandom;

use super::features::{available_pickups, encode, move_targets, tentative_controls, FeatureEncoding};
use super::labels::LabeledSample;
use super::net::{GraphConvNet, NetKind, NormalizedAdjacency, DEFAULT_HIDDEN};
use crate::dynamics::Control;
use crate::error::{Error, Result};
use crate::graph::{Node, StreetGraph};
use crate::seeding::{derive_seed, stream, TAG_TRAIN};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub pickup_lr: f64,
    pub move_lr: f64,
    pub weight_decay: f64,
    pub hidden: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            pickup_lr: 0.005,
            move_lr: 0.002,
            weight_decay: 1e-5,
            hidden: DEFAULT_HIDDEN,
            seed: 0,
        }
    }
}

/// One supervised example for either net.
#[derive(Debug, Clone)]
pub struct Example {
    pub encoding: FeatureEncoding,
    /// Move destinations; empty for pickup examples.
    pub targets: Vec<Node>,
    pub label: usize,
}

/// Splits labeled decisions into pickup and move examples. The pickup net
/// only sees decisions where a pickup was possible; the move net sees every
/// decision whose label is not a pickup.
pub fn build_examples(graph: &StreetGraph, samples: &[LabeledSample]) -> Result<(Vec<Example>, Vec<Example>)> {
    let n = graph.node_count();
    let mut pickup = Vec::new();
    let mut moves = Vec::new();
    for s in samples {
        s.state.validate(graph)?;
        if s.agent >= s.state.agent_count() || s.preceding.len() != s.agent {
            return Err(Error::InvalidArgument(format!("malformed sample for agent {}", s.agent)));
        }
        let tentative = tentative_controls(&s.state, s.agent, &s.preceding, graph);
        let encoding = encode(&s.state, s.agent, &tentative, n);
        let here = s.state.locations[s.agent];
        if available_pickups(&s.state, s.agent, &s.preceding) > 0 {
            let label = usize::from(s.label == Control::Pickup);
            pickup.push(Example { encoding: encoding.clone(), targets: Vec::new(), label });
        }
        if s.label != Control::Pickup {
            let targets = move_targets(graph, here);
            let dest = s.label.destination(here);
            let label = targets
                .iter()
                .position(|&v| v == dest)
                .ok_or_else(|| Error::infeasible(s.agent, format!("label {} is not a move from {}", s.label, here + 1)))?;
            moves.push(Example { encoding, targets, label });
        }
    }
    Ok((pickup, moves))
}

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize, lr: f64, weight_decay: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for k in 0..params.len() {
            let g = grad[k] + self.weight_decay * params[k];
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
            params[k] -= self.lr * (self.m[k] / c1) / ((self.v[k] / c2).sqrt() + self.eps);
        }
    }
}

/// Summed loss and gradient over `batch`, accumulated in batch order.
pub fn batch_gradient(net: &GraphConvNet, adj: &NormalizedAdjacency, batch: &[&Example]) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; net.param_count()];
    let mut total = 0.0;
    for ex in batch {
        total += net.loss_and_grad(adj, &ex.encoding, &ex.targets, ex.label, &mut grad);
    }
    (total, grad)
}

/// Mean loss over `examples`.
pub fn mean_loss(net: &GraphConvNet, adj: &NormalizedAdjacency, examples: &[Example]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let total: f64 = examples.iter().map(|e| net.loss(adj, &e.encoding, &e.targets, e.label)).sum();
    total / examples.len() as f64
}

/// Fraction of `examples` whose highest logit is the label.
pub fn accuracy(net: &GraphConvNet, adj: &NormalizedAdjacency, examples: &[Example]) -> Result<f64> {
    if examples.is_empty() {
        return Ok(1.0);
    }
    let mut hits = 0usize;
    for e in examples {
        let logits = match net.kind() {
            NetKind::Pickup => net.forward(adj, &e.encoding)?,
            NetKind::Move => net.logits_at(adj, &e.encoding, &e.targets)?,
        };
        if argmax(&logits) == e.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// First index of the largest value.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

/// Trains `net` in place and returns the mean training loss of each epoch.
pub fn train_net(
    net: &mut GraphConvNet,
    adj: &NormalizedAdjacency,
    examples: &[Example],
    lr: f64,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    let mut adam = Adam::new(net.param_count(), lr, config.weight_decay);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let tag = net.kind().tag() as u64;
    for epoch in 0..config.epochs {
        order.shuffle(&mut stream(config.seed, &[TAG_TRAIN, tag, epoch as u64]));
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(config.batch_size.max(1)).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
            let (loss, mut grad) = batch_gradient(net, adj, &batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { net: net.kind().as_str(), epoch, batch: b });
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            adam.step(net.params_mut(), &grad);
            epoch_loss += loss;
        }
        let mean = if examples.is_empty() { 0.0 } else { epoch_loss / examples.len() as f64 };
        log::debug!("{} net epoch {epoch}: loss {mean:.5}", net.kind().as_str());
        curve.push(mean);
    }
    Ok(curve)
}

#[derive(Debug, Clone)]
pub struct TrainedNets {
    pub pickup: GraphConvNet,
    pub movement: GraphConvNet,
    pub pickup_curve: Vec<f64>,
    pub move_curve: Vec<f64>,
}

/// Trains both nets from labeled decisions.
pub fn train(graph: &StreetGraph, samples: &[LabeledSample], config: &TrainConfig) -> Result<TrainedNets> {
    let agents = samples
        .first()
        .map(|s| s.state.agent_count())
        .ok_or_else(|| Error::InvalidArgument("no training samples".into()))?;
    if samples.iter().any(|s| s.state.agent_count() != agents) {
        return Err(Error::InvalidArgument("samples mix agent counts".into()));
    }
    let n = graph.node_count();
    let adj = NormalizedAdjacency::new(graph);
    let (pickup_ex, move_ex) = build_examples(graph, samples)?;
    log::info!("training on {} pickup and {} move examples", pickup_ex.len(), move_ex.len());
    let mut pickup = GraphConvNet::random(NetKind::Pickup, n, agents, config.hidden, derive_seed(config.seed, &[TAG_TRAIN, 10]));
    let mut movement = GraphConvNet::random(NetKind::Move, n, agents, config.hidden, derive_seed(config.seed, &[TAG_TRAIN, 11]));
    let pickup_curve = train_net(&mut pickup, &adj, &pickup_ex, config.pickup_lr, config)?;
    let move_curve = train_net(&mut movement, &adj, &move_ex, config.move_lr, config)?;
    Ok(TrainedNets { pickup, movement, pickup_curve, move_curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{Request, SystemState};

    fn grid_examples(g: &StreetGraph) -> Vec<Example> {
        // The agent is told where to go by the request location: a tiny
        // task a two-layer net must fit exactly.
        let mut out = Vec::new();
        for (here, req, dest) in [(4, 1, 1), (4, 3, 3), (4, 5, 5), (4, 7, 7), (0, 2, 1), (0, 6, 3), (8, 2, 5), (8, 6, 7)] {
            let mut s = SystemState::new(vec![here]);
            s.outstanding.push(Request::new(0, req, 0, 1));
            let enc = encode(&s, 0, &[Control::Stay], 9);
            let targets = move_targets(g, here);
            let label = targets.iter().position(|&v| v == dest).unwrap();
            out.push(Example { encoding: enc, targets, label });
        }
        out
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0, -1.0];
        let mut adam = Adam::new(2, 0.1, 0.0);
        adam.step(&mut p, &[2.0, -3.0]);
        assert!((p[0] - 0.9).abs() < 1e-6);
        assert!((p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn move_net_memorizes_small_set() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let adj = NormalizedAdjacency::new(&g);
        let ex = grid_examples(&g);
        let mut net = GraphConvNet::random(NetKind::Move, 9, 1, 16, 4);
        let cfg = TrainConfig { epochs: 400, batch_size: 8, ..TrainConfig::default() };
        let curve = train_net(&mut net, &adj, &ex, 0.01, &cfg).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        assert_eq!(accuracy(&net, &adj, &ex).unwrap(), 1.0);
    }

    #[test]
    fn copies_of_one_sample_drive_loss_to_zero() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let adj = NormalizedAdjacency::new(&g);
        let mut s = SystemState::new(vec![4, 0]);
        s.outstanding.push(Request::new(0, 4, 8, 1));
        let enc = encode(&s, 0, &[Control::Stay, Control::Move(1)], 9);
        let ex: Vec<Example> = (0..10).map(|_| Example { encoding: enc.clone(), targets: Vec::new(), label: 1 }).collect();
        let mut net = GraphConvNet::random(NetKind::Pickup, 9, 2, 8, 5);
        let cfg = TrainConfig { epochs: 300, batch_size: 10, ..TrainConfig::default() };
        let curve = train_net(&mut net, &adj, &ex, 0.005, &cfg).unwrap();
        assert!(curve[0] > 0.1);
        assert!(mean_loss(&net, &adj, &ex) < 1e-3, "final loss {}", mean_loss(&net, &adj, &ex));
    }

    #[test]
    fn training_is_deterministic() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let adj = NormalizedAdjacency::new(&g);
        let ex = grid_examples(&g);
        let cfg = TrainConfig { epochs: 5, batch_size: 3, ..TrainConfig::default() };
        let run = || {
            let mut net = GraphConvNet::random(NetKind::Move, 9, 1, 8, 4);
            train_net(&mut net, &adj, &ex, 0.01, &cfg).unwrap();
            net
        };
        assert_eq!(run().params(), run().params());
    }

    #[test]
    fn pickup_examples_need_a_colocated_request() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let mut s = SystemState::new(vec![4, 4]);
        s.outstanding.push(Request::new(0, 4, 0, 1));
        let samples = vec![
            LabeledSample { state: s.clone(), agent: 0, preceding: vec![], label: Control::Pickup },
            LabeledSample { state: s, agent: 1, preceding: vec![Control::Pickup], label: Control::Move(1) },
        ];
        let (p, m) = build_examples(&g, &samples).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p[0].label, 1);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].targets[m[0].label], 1);
    }
}
