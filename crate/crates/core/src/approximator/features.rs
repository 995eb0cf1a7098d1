//! State encoding for the policy networks.

use crate::dynamics::{Control, SystemState};
use crate::graph::{Node, StreetGraph};
use crate::policy::greedy_control;

/// Node features `n x (m + 2)` and global features `m` for one deciding
/// agent.
///
/// Agent columns are rotated so that column 0 is the deciding agent and
/// column `c` is agent `(agent + c) % m`; the timer vector is rotated the
/// same way. Column `m` flags nodes targeted by another agent's tentative
/// move, column `m + 1` counts outstanding pickups at the node.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureEncoding {
    pub node_count: usize,
    pub agents: usize,
    pub agent: usize,
    pub agent_node: Node,
    pub node_features: Vec<f64>,
    pub global_features: Vec<f64>,
}

impl FeatureEncoding {
    pub fn width(&self) -> usize {
        self.agents + 2
    }

    pub fn node_row(&self, node: Node) -> &[f64] {
        let w = self.width();
        &self.node_features[node * w..(node + 1) * w]
    }

    /// Applies a node relabeling `perm[old] = new`.
    pub fn permuted(&self, perm: &[Node]) -> Self {
        let w = self.width();
        let mut node_features = vec![0.0; self.node_features.len()];
        for old in 0..self.node_count {
            let new = perm[old];
            node_features[new * w..(new + 1) * w].copy_from_slice(self.node_row(old));
        }
        Self { node_features, agent_node: perm[self.agent_node], ..self.clone() }
    }
}

/// Encodes `state` for `agent`. `tentative[j]` is agent `j`'s tentative
/// control; the entry of the deciding agent itself is ignored.
pub fn encode(state: &SystemState, agent: usize, tentative: &[Control], node_count: usize) -> FeatureEncoding {
    let m = state.agent_count();
    let w = m + 2;
    let mut x = vec![0.0; node_count * w];
    for c in 0..m {
        let j = (agent + c) % m;
        x[state.locations[j] * w + c] = 1.0;
    }
    for (j, c) in tentative.iter().enumerate() {
        if j != agent {
            if let Control::Move(v) = c {
                x[v * w + m] = 1.0;
            }
        }
    }
    for r in &state.outstanding {
        x[r.pickup * w + m + 1] += 1.0;
    }
    let global = (0..m).map(|c| state.timers[(agent + c) % m] as f64).collect();
    FeatureEncoding {
        node_count,
        agents: m,
        agent,
        agent_node: state.locations[agent],
        node_features: x,
        global_features: global,
    }
}

/// Tentative joint control seen by `agent`: the fixed controls of earlier
/// agents, `Stay` as a placeholder for itself, and greedy controls for the
/// later agents.
pub fn tentative_controls(
    state: &SystemState,
    agent: usize,
    preceding: &[Control],
    graph: &StreetGraph,
) -> Vec<Control> {
    let m = state.agent_count();
    let mut out = Vec::with_capacity(m);
    out.extend_from_slice(&preceding[..agent]);
    out.push(Control::Stay);
    for j in agent + 1..m {
        let c = greedy_control(state, j, &out, graph);
        out.push(c);
    }
    out
}

/// Requests at `agent`'s node not already claimed by pickups in `preceding`.
pub fn available_pickups(state: &SystemState, agent: usize, preceding: &[Control]) -> usize {
    let here = state.locations[agent];
    let claimed = preceding
        .iter()
        .enumerate()
        .filter(|&(j, &c)| c == Control::Pickup && state.is_free(j) && state.locations[j] == here)
        .count();
    state.requests_at(here).saturating_sub(claimed)
}

/// Sorted feasible move destinations of a free agent at `node`: its
/// out-neighbors and the node itself (stay).
pub fn move_targets(graph: &StreetGraph, node: Node) -> Vec<Node> {
    let nbrs = graph.neighbors(node);
    let mut out = Vec::with_capacity(nbrs.len() + 1);
    let pos = nbrs.partition_point(|&v| v < node);
    out.extend_from_slice(&nbrs[..pos]);
    out.push(node);
    out.extend_from_slice(&nbrs[pos..]);
    out
}
