//! Policies: the decision interface, the greedy base policy, and
//! one-agent-at-a-time rollout (which, over a learned base policy, is online
//! play).

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::dynamics::{control_set, match_pickups, stage_cost, ArrivalModel, Control, SystemState};
use crate::error::Result;
use crate::graph::{Node, StreetGraph};
use crate::seeding::{derive_seed, StreamRng};
use rand::SeedableRng;

/// Everything a policy sees when deciding at one minute.
#[derive(Clone, Copy)]
pub struct DecisionContext<'a> {
    pub graph: &'a StreetGraph,
    pub state: &'a SystemState,
    /// Last minute of the episode.
    pub horizon: u32,
    /// Seed for any randomness of this decision.
    pub seed: u64,
}

impl<'a> DecisionContext<'a> {
    pub fn with_state(&self, state: &'a SystemState, seed: u64) -> Self {
        Self { state, seed, ..*self }
    }
}

/// A feedback policy, queried agent by agent in index order. `preceding`
/// holds the controls already fixed for agents `0..agent`.
pub trait Policy: Send + Sync {
    fn name(&self) -> String;

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control>;

    fn joint_control(&self, ctx: &DecisionContext<'_>) -> Result<Vec<Control>> {
        let m = ctx.state.agent_count();
        let mut out = Vec::with_capacity(m);
        for agent in 0..m {
            let c = self.control(ctx, agent, &out)?;
            out.push(c);
        }
        Ok(out)
    }
}

impl<P: Policy + ?Sized> Policy for Arc<P> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        (**self).control(ctx, agent, preceding)
    }
    fn joint_control(&self, ctx: &DecisionContext<'_>) -> Result<Vec<Control>> {
        (**self).joint_control(ctx)
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }
    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        (**self).control(ctx, agent, preceding)
    }
    fn joint_control(&self, ctx: &DecisionContext<'_>) -> Result<Vec<Control>> {
        (**self).joint_control(ctx)
    }
}

// ---------------------------------------------------------------------------
// Greedy
// ---------------------------------------------------------------------------

/// Nearest-request routing without coordination.
#[derive(Debug, Clone, Copy, Default)]
pub struct Greedy;

/// Pickup when a request waits at the agent's node, otherwise one hop toward
/// the nearest outstanding request (ties: earliest arrival, then lowest
/// pickup node), otherwise `Stay`. Requests already claimed by pickups in
/// `preceding` are skipped so the joint control stays feasible.
pub fn greedy_control(
    state: &SystemState,
    agent: usize,
    preceding: &[Control],
    graph: &StreetGraph,
) -> Control {
    if let Some(forced) = state.forced_move(agent, graph) {
        return forced;
    }
    let here = state.locations[agent];
    let mut claimed: Vec<(Node, usize)> = Vec::new();
    for (j, &c) in preceding.iter().enumerate() {
        if c == Control::Pickup && state.is_free(j) {
            let node = state.locations[j];
            match claimed.iter_mut().find(|(n, _)| *n == node) {
                Some(e) => e.1 += 1,
                None => claimed.push((node, 1)),
            }
        }
    }
    let mut best: Option<(u32, u32, Node)> = None;
    for r in &state.outstanding {
        if let Some(e) = claimed.iter_mut().find(|(n, k)| *n == r.pickup && *k > 0) {
            e.1 -= 1;
            continue;
        }
        let key = (graph.dist(here, r.pickup), r.arrival, r.pickup);
        if best.map_or(true, |b| key < b) {
            best = Some(key);
        }
    }
    match best {
        None => Control::Stay,
        Some((0, _, _)) => Control::Pickup,
        Some((_, _, target)) => Control::Move(graph.next_hop(here, target)),
    }
}

impl Policy for Greedy {
    fn name(&self) -> String {
        "greedy".into()
    }

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        Ok(greedy_control(ctx.state, agent, preceding, ctx.graph))
    }
}

// ---------------------------------------------------------------------------
// One-agent-at-a-time rollout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RolloutConfig {
    /// Monte-Carlo trajectories per candidate control.
    pub trajectories_per_leaf: usize,
    /// Base-policy steps simulated after the first stage before truncating
    /// with the outstanding-request count as terminal cost.
    pub truncation: u32,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self { trajectories_per_leaf: 5000, truncation: 10 }
    }
}

impl RolloutConfig {
    /// Scale used for tests and desk experiments.
    pub fn desk() -> Self {
        Self { trajectories_per_leaf: 128, truncation: 5 }
    }
}

/// Counters for instrumentation.
#[derive(Debug, Default)]
pub struct RolloutStats {
    pub decisions: AtomicU64,
    pub leaves: AtomicU64,
    pub trajectories: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StatsSnapshot {
    pub decisions: u64,
    pub leaves: u64,
    pub trajectories: u64,
}

impl RolloutStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            decisions: self.decisions.load(Ordering::Relaxed),
            leaves: self.leaves.load(Ordering::Relaxed),
            trajectories: self.trajectories.load(Ordering::Relaxed),
        }
    }
}

/// Cost estimate of one candidate control.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafEstimate {
    pub control: Control,
    /// Summed cost over all trajectories; `None` when the joint control is
    /// infeasible (a pickup with nothing left to claim).
    pub total_cost: Option<u64>,
    /// Seeds of the arrival streams used, one per trajectory.
    pub stream_seeds: Vec<u64>,
}

impl LeafEstimate {
    pub fn mean_cost(&self) -> Option<f64> {
        let n = self.stream_seeds.len().max(1) as f64;
        self.total_cost.map(|c| c as f64 / n)
    }
}

/// One-agent-at-a-time rollout over `base`. With a learned base policy this
/// is online play.
pub struct OneAtATimeRollout<B> {
    base: B,
    config: RolloutConfig,
    arrivals: ArrivalModel,
    name: String,
    stats: Arc<RolloutStats>,
}

impl<B: Policy> OneAtATimeRollout<B> {
    pub fn new(base: B, config: RolloutConfig, arrivals: ArrivalModel) -> Self {
        Self { base, config, arrivals, name: "rollout".into(), stats: Arc::default() }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn stats(&self) -> &Arc<RolloutStats> {
        &self.stats
    }

    pub fn base(&self) -> &B {
        &self.base
    }

    pub fn config(&self) -> RolloutConfig {
        self.config
    }

    /// Seed of trajectory `index` for `agent`'s decision. Identical for every
    /// candidate control of that decision (common random numbers).
    pub fn trajectory_seed(decision_seed: u64, agent: usize, index: usize) -> u64 {
        derive_seed(decision_seed, &[agent as u64, index as u64])
    }

    /// Estimates every candidate in `control_set` order.
    pub fn evaluate_candidates(
        &self,
        ctx: &DecisionContext<'_>,
        agent: usize,
        preceding: &[Control],
    ) -> Result<Vec<LeafEstimate>> {
        let candidates = control_set(ctx.state, agent, ctx.graph);
        self.stats.decisions.fetch_add(1, Ordering::Relaxed);
        self.stats.leaves.fetch_add(candidates.len() as u64, Ordering::Relaxed);
        if candidates.len() == 1 {
            return Ok(vec![LeafEstimate {
                control: candidates[0],
                total_cost: Some(0),
                stream_seeds: Vec::new(),
            }]);
        }
        let seeds: Vec<u64> = (0..self.config.trajectories_per_leaf)
            .map(|i| Self::trajectory_seed(ctx.seed, agent, i))
            .collect();
        let m = ctx.state.agent_count();
        let mut out = Vec::with_capacity(candidates.len());
        let mut joint = Vec::with_capacity(m);
        for &candidate in &candidates {
            joint.clear();
            joint.extend_from_slice(preceding);
            joint.push(candidate);
            for j in agent + 1..m {
                let c = self.base.control(ctx, j, &joint)?;
                joint.push(c);
            }
            if match_pickups(ctx.state, &joint).is_err() {
                out.push(LeafEstimate { control: candidate, total_cost: None, stream_seeds: seeds.clone() });
                continue;
            }
            let mut total = 0u64;
            for &seed in &seeds {
                total += self.simulate(ctx, &joint, seed)?;
            }
            self.stats.trajectories.fetch_add(seeds.len() as u64, Ordering::Relaxed);
            out.push(LeafEstimate { control: candidate, total_cost: Some(total), stream_seeds: seeds.clone() });
        }
        Ok(out)
    }

    /// Cost of one trajectory: the first stage under `joint`, up to
    /// `truncation` base-policy stages (clipped at the horizon), then the
    /// outstanding count as terminal cost if the horizon was not reached.
    fn simulate(&self, ctx: &DecisionContext<'_>, joint: &[Control], seed: u64) -> Result<u64> {
        let horizon = ctx.horizon;
        let mut rng = StreamRng::seed_from_u64(seed);
        let mut state = ctx.state.clone();
        let draw = |minute: u32, rng: &mut StreamRng| {
            if minute <= horizon {
                self.arrivals.draw(minute, rng)
            } else {
                Ok(Vec::new())
            }
        };
        let arrivals = draw(state.minute + 1, &mut rng)?;
        state.apply(joint, &arrivals, ctx.graph)?;
        let mut cost = stage_cost(&state);
        for _ in 0..self.config.truncation {
            if state.minute > horizon {
                break;
            }
            let inner = ctx.with_state(&state, derive_seed(seed, &[state.minute as u64]));
            let controls = self.base.joint_control(&inner)?;
            let arrivals = draw(state.minute + 1, &mut rng)?;
            state.apply(&controls, &arrivals, ctx.graph)?;
            cost += stage_cost(&state);
        }
        if state.minute <= horizon {
            cost += state.outstanding.len() as u64;
        }
        Ok(cost)
    }
}

/// Lowest estimated cost; ties keep the earlier candidate, so the preference
/// is pickup, then the lowest-index move, then stay.
pub fn best_leaf(leaves: &[LeafEstimate]) -> Option<Control> {
    let mut best: Option<(u64, Control)> = None;
    for leaf in leaves {
        if let Some(cost) = leaf.total_cost {
            if best.map_or(true, |(b, _)| cost < b) {
                best = Some((cost, leaf.control));
            }
        }
    }
    best.map(|(_, c)| c)
}

impl<B: Policy> Policy for OneAtATimeRollout<B> {
    fn name(&self) -> String {
        self.name.clone()
    }

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        let leaves = self.evaluate_candidates(ctx, agent, preceding)?;
        // Stay is never infeasible, so some leaf always has a cost.
        Ok(best_leaf(&leaves).expect("stay or forced move is always feasible"))
    }
}

/// Rollout over the greedy base policy.
pub fn rollout_policy(config: RolloutConfig, arrivals: ArrivalModel) -> OneAtATimeRollout<Greedy> {
    OneAtATimeRollout::new(Greedy, config, arrivals)
}

/// Rollout whose base policy (successor agents and truncated continuation)
/// is `approx`.
pub fn online_play_policy<B: Policy>(
    approx: B,
    config: RolloutConfig,
    arrivals: ArrivalModel,
) -> OneAtATimeRollout<B> {
    OneAtATimeRollout::new(approx, config, arrivals).named("online-play")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::{table_i, CategoricalDistribution, DemandModel};
    use crate::dynamics::Request;
    use crate::graph::load_graph_str;

    fn ctx<'a>(g: &'a StreetGraph, s: &'a SystemState, horizon: u32) -> DecisionContext<'a> {
        DecisionContext { graph: g, state: s, horizon, seed: 17 }
    }

    fn silent(n: usize) -> ArrivalModel {
        ArrivalModel::Stochastic(
            DemandModel::with_uniform_locations("none", CategoricalDistribution::point_mass(0), n)
                .unwrap(),
        )
    }

    #[test]
    fn greedy_basics() {
        let g = load_graph_str("1 2\n2 1\n2 3\n3 2\n").unwrap();
        let mut s = SystemState::new(vec![0]);
        assert_eq!(greedy_control(&s, 0, &[], &g), Control::Stay);
        s.outstanding.push(Request::new(0, 2, 0, 1));
        assert_eq!(greedy_control(&s, 0, &[], &g), Control::Move(1));
        s.locations[0] = 2;
        assert_eq!(greedy_control(&s, 0, &[], &g), Control::Pickup);
    }

    #[test]
    fn greedy_tie_breaks() {
        let g = StreetGraph::grid(5, 1).unwrap();
        let mut s = SystemState::new(vec![2]);
        s.minute = 3;
        s.outstanding.push(Request::new(0, 4, 0, 2));
        s.outstanding.push(Request::new(1, 0, 4, 1));
        // Both at distance 2; the earlier arrival (node 0) wins.
        s.outstanding.sort_by_key(|r| r.arrival);
        assert_eq!(greedy_control(&s, 0, &[], &g), Control::Move(1));
    }

    #[test]
    fn greedy_skips_claimed_requests() {
        let g = StreetGraph::grid(3, 1).unwrap();
        let mut s = SystemState::new(vec![0, 0]);
        s.outstanding.push(Request::new(0, 0, 2, 1));
        s.outstanding.push(Request::new(1, 2, 0, 1));
        assert_eq!(greedy_control(&s, 0, &[], &g), Control::Pickup);
        assert_eq!(greedy_control(&s, 1, &[Control::Pickup], &g), Control::Move(1));
    }

    #[test]
    fn busy_agent_spends_no_simulation() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let mut s = SystemState::new(vec![0]);
        s.timers[0] = 2;
        s.busy_targets[0] = Some(2);
        let r = rollout_policy(RolloutConfig::desk(), silent(9));
        let c = r.control(&ctx(&g, &s, 30), 0, &[]).unwrap();
        assert_eq!(c, Control::Move(1));
        assert_eq!(r.stats().snapshot().trajectories, 0);
    }

    #[test]
    fn colocated_request_is_picked_up() {
        let g = load_graph_str("1 2\n2 1\n2 3\n3 2\n").unwrap();
        let mut s = SystemState::new(vec![1]);
        s.outstanding.push(Request::new(0, 1, 0, 1));
        let r = rollout_policy(RolloutConfig { trajectories_per_leaf: 4, truncation: 3 }, silent(3));
        let leaves = r.evaluate_candidates(&ctx(&g, &s, 10), 0, &[]).unwrap();
        assert_eq!(leaves[0].control, Control::Pickup);
        assert_eq!(leaves[0].mean_cost(), Some(0.0));
        for l in &leaves[1..] {
            assert!(l.mean_cost().unwrap() >= 1.0);
        }
        assert_eq!(best_leaf(&leaves), Some(Control::Pickup));
    }

    #[test]
    fn candidates_share_arrival_streams() {
        let g = StreetGraph::grid(4, 4).unwrap();
        let model = DemandModel::with_uniform_locations("m", table_i::medium(), 16).unwrap();
        let mut s = SystemState::new(vec![5, 10]);
        s.outstanding.push(Request::new(0, 15, 0, 1));
        let r = rollout_policy(RolloutConfig { trajectories_per_leaf: 16, truncation: 4 }, ArrivalModel::Stochastic(model));
        let leaves = r.evaluate_candidates(&ctx(&g, &s, 30), 1, &[Control::Stay]).unwrap();
        assert!(leaves.len() > 2);
        for l in &leaves[1..] {
            assert_eq!(l.stream_seeds, leaves[0].stream_seeds);
        }
    }

    #[test]
    fn rollout_is_deterministic() {
        let g = StreetGraph::grid(4, 4).unwrap();
        let model = DemandModel::with_uniform_locations("h", table_i::high(), 16).unwrap();
        let mut s = SystemState::new(vec![0, 15]);
        s.outstanding.push(Request::new(0, 6, 1, 1));
        s.outstanding.push(Request::new(1, 9, 2, 1));
        let cfg = RolloutConfig { trajectories_per_leaf: 32, truncation: 5 };
        let a = rollout_policy(cfg, ArrivalModel::Stochastic(model.clone()));
        let b = rollout_policy(cfg, ArrivalModel::Stochastic(model));
        let c = ctx(&g, &s, 30);
        assert_eq!(a.joint_control(&c).unwrap(), b.joint_control(&c).unwrap());
    }

    #[test]
    fn leaf_count_is_sum_not_product() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let s = SystemState::new(vec![4, 0, 8]);
        let r = rollout_policy(RolloutConfig { trajectories_per_leaf: 2, truncation: 2 }, silent(9));
        r.joint_control(&ctx(&g, &s, 20)).unwrap();
        let expected: usize = (0..3).map(|a| control_set(&s, a, &g).len()).sum();
        assert_eq!(r.stats().snapshot().leaves, expected as u64);
    }
}
