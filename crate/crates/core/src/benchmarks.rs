//! Operations-research comparison policies: instantaneous assignment,
//! two-step stochastic matching, and the full-knowledge oracle.

use std::collections::HashMap;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;

use crate::demand::{sample_minute, DemandModel};
use crate::dynamics::{Control, Request, ScriptedArrivals, SystemState};
use crate::error::{Error, Result};
use crate::graph::{Node, StreetGraph};
use crate::policy::{DecisionContext, Policy};
use crate::seeding::stream;

/// Per-agent target of one minute's plan, as an index into `outstanding`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentPlan {
    pub targets: Vec<Option<usize>>,
}

impl AssignmentPlan {
    /// Pickup when at the target, one hop toward it otherwise, `Stay` when
    /// unassigned; busy agents follow their forced move.
    pub fn controls(&self, state: &SystemState, graph: &StreetGraph) -> Vec<Control> {
        (0..state.agent_count())
            .map(|a| {
                if let Some(forced) = state.forced_move(a, graph) {
                    return forced;
                }
                match self.targets[a] {
                    None => Control::Stay,
                    Some(r) => {
                        let (here, to) = (state.locations[a], state.outstanding[r].pickup);
                        if here == to {
                            Control::Pickup
                        } else {
                            Control::Move(graph.next_hop(here, to))
                        }
                    }
                }
            })
            .collect()
    }
}

/// Minimum-cost maximum-cardinality matching of rows to columns. Returns the
/// total cost and each row's column.
pub fn min_cost_matching(cost: &[Vec<i64>], cols: usize) -> (i64, Vec<Option<usize>>) {
    let rows = cost.len();
    if rows == 0 || cols == 0 {
        return (0, vec![None; rows]);
    }
    if rows <= cols {
        let m = Matrix::from_vec(rows, cols, cost.iter().flat_map(|r| r.iter().map(|&c| -c)).collect())
            .expect("rectangular cost matrix");
        let (total, assign) = kuhn_munkres(&m);
        (-total, assign.into_iter().map(Some).collect())
    } else {
        let m = Matrix::from_vec(cols, rows, (0..cols).flat_map(|c| (0..rows).map(move |r| -cost[r][c])).collect())
            .expect("rectangular cost matrix");
        let (total, assign) = kuhn_munkres(&m);
        let mut out = vec![None; rows];
        for (c, r) in assign.into_iter().enumerate() {
            out[r] = Some(c);
        }
        (-total, out)
    }
}

fn free_agents(state: &SystemState) -> Vec<usize> {
    (0..state.agent_count()).filter(|&a| state.is_free(a)).collect()
}

/// Myopic matching of free agents to outstanding requests by travel time,
/// recomputed every minute.
#[derive(Debug, Clone, Copy, Default)]
pub struct InstantaneousAssignment {
    /// Optimal matching instead of repeated closest-pair selection.
    pub hungarian: bool,
}

impl InstantaneousAssignment {
    pub fn plan(&self, state: &SystemState, graph: &StreetGraph) -> AssignmentPlan {
        let agents = free_agents(state);
        let reqs = &state.outstanding;
        let mut targets = vec![None; state.agent_count()];
        if self.hungarian {
            let cost: Vec<Vec<i64>> = agents
                .iter()
                .map(|&a| reqs.iter().map(|r| graph.dist(state.locations[a], r.pickup) as i64).collect())
                .collect();
            let (_, assign) = min_cost_matching(&cost, reqs.len());
            for (k, &a) in agents.iter().enumerate() {
                targets[a] = assign[k];
            }
        } else {
            let mut agent_open = vec![true; agents.len()];
            let mut req_open = vec![true; reqs.len()];
            loop {
                let mut best: Option<(u32, usize, usize)> = None;
                for (k, &a) in agents.iter().enumerate() {
                    if !agent_open[k] {
                        continue;
                    }
                    for (ri, r) in reqs.iter().enumerate() {
                        if !req_open[ri] {
                            continue;
                        }
                        let d = graph.dist(state.locations[a], r.pickup);
                        if best.map_or(true, |(bd, _, _)| d < bd) {
                            best = Some((d, k, ri));
                        }
                    }
                }
                let Some((_, k, ri)) = best else { break };
                agent_open[k] = false;
                req_open[ri] = false;
                targets[agents[k]] = Some(ri);
            }
        }
        AssignmentPlan { targets }
    }
}

impl Policy for InstantaneousAssignment {
    fn name(&self) -> String {
        if self.hungarian { "inst-assign-hungarian" } else { "inst-assign" }.into()
    }

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, _preceding: &[Control]) -> Result<Control> {
        Ok(self.plan(ctx.state, ctx.graph).controls(ctx.state, ctx.graph)[agent])
    }

    fn joint_control(&self, ctx: &DecisionContext<'_>) -> Result<Vec<Control>> {
        Ok(self.plan(ctx.state, ctx.graph).controls(ctx.state, ctx.graph))
    }
}

/// Two-step stochastic matching: first-stage matchings of free agents to
/// outstanding requests are scored by their travel time plus the expected
/// optimal matching of the still-unmatched agents to sampled next-minute
/// requests.
///
/// Every request left unmatched, now or in a sample, costs `diameter + 1`,
/// more than any travel time, so leaving an agent idle only pays off when
/// the expected future saving covers it.
#[derive(Debug, Clone)]
pub struct Tss {
    pub model: DemandModel,
    pub sample_sets: usize,
    /// Exhaustive enumeration when the smaller side has at most this many
    /// members; otherwise each agent considers only its nearest requests.
    pub exhaustive_limit: usize,
    pub nearest: usize,
}

impl Tss {
    pub fn new(model: DemandModel, sample_sets: usize) -> Result<Self> {
        if sample_sets == 0 {
            return Err(Error::InvalidArgument("at least one sample set is needed".into()));
        }
        Ok(Self { model, sample_sets, exhaustive_limit: 6, nearest: 3 })
    }

    pub fn plan(&self, state: &SystemState, graph: &StreetGraph, seed: u64) -> Result<AssignmentPlan> {
        let agents = free_agents(state);
        let reqs = &state.outstanding;
        let penalty = graph.diameter() as i64 + 1;
        let samples: Vec<Vec<Request>> = (0..self.sample_sets)
            .map(|s| sample_minute(&self.model, &mut stream(seed, &[s as u64]), state.minute + 1))
            .collect::<Result<_>>()?;

        let exhaustive = agents.len().min(reqs.len()) <= self.exhaustive_limit;
        let options: Vec<Vec<usize>> = agents
            .iter()
            .map(|&a| {
                let mut idx: Vec<usize> = (0..reqs.len()).collect();
                if !exhaustive {
                    idx.sort_by_key(|&r| (graph.dist(state.locations[a], reqs[r].pickup), r));
                    idx.truncate(self.nearest);
                    idx.sort_unstable();
                }
                idx
            })
            .collect();

        let mut second: HashMap<u64, f64> = HashMap::new();
        let mut second_stage = |unmatched: u64| -> f64 {
            *second.entry(unmatched).or_insert_with(|| {
                let locs: Vec<Node> =
                    (0..agents.len()).filter(|k| unmatched >> k & 1 == 1).map(|k| state.locations[agents[k]]).collect();
                let mut total = 0i64;
                for sample in &samples {
                    let cost: Vec<Vec<i64>> =
                        locs.iter().map(|&v| sample.iter().map(|r| graph.dist(v, r.pickup) as i64).collect()).collect();
                    let (c, _) = min_cost_matching(&cost, sample.len());
                    total += c + penalty * sample.len().saturating_sub(locs.len()) as i64;
                }
                total as f64 / samples.len() as f64
            })
        };

        let mut best: Option<(f64, Vec<Option<usize>>)> = None;
        let mut current = vec![None; agents.len()];
        let mut used = vec![false; reqs.len()];
        enumerate(0, &options, &mut current, &mut used, &mut |choice| {
            let mut first = 0i64;
            let mut unmatched = 0u64;
            let mut matched = 0usize;
            for (k, c) in choice.iter().enumerate() {
                match c {
                    Some(r) => {
                        first += graph.dist(state.locations[agents[k]], reqs[*r].pickup) as i64;
                        matched += 1;
                    }
                    None => unmatched |= 1 << k,
                }
            }
            first += penalty * (reqs.len() - matched) as i64;
            let score = first as f64 + second_stage(unmatched);
            if best.as_ref().map_or(true, |(b, _)| score < *b) {
                best = Some((score, choice.to_vec()));
            }
        });
        let mut targets = vec![None; state.agent_count()];
        if let Some((_, choice)) = best {
            for (k, &a) in agents.iter().enumerate() {
                targets[a] = choice[k];
            }
        }
        Ok(AssignmentPlan { targets })
    }
}

// Partial matchings in a fixed order: for each agent, unmatched first, then
// its options in ascending request index.
fn enumerate(
    k: usize,
    options: &[Vec<usize>],
    current: &mut Vec<Option<usize>>,
    used: &mut Vec<bool>,
    visit: &mut dyn FnMut(&[Option<usize>]),
) {
    if k == options.len() {
        visit(current);
        return;
    }
    current[k] = None;
    enumerate(k + 1, options, current, used, visit);
    for &r in &options[k] {
        if !used[r] {
            used[r] = true;
            current[k] = Some(r);
            enumerate(k + 1, options, current, used, visit);
            used[r] = false;
        }
    }
    current[k] = None;
}

impl Policy for Tss {
    fn name(&self) -> String {
        "tss".into()
    }

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, _preceding: &[Control]) -> Result<Control> {
        Ok(self.joint_control(ctx)?[agent])
    }

    fn joint_control(&self, ctx: &DecisionContext<'_>) -> Result<Vec<Control>> {
        Ok(self.plan(ctx.state, ctx.graph, ctx.seed)?.controls(ctx.state, ctx.graph))
    }
}

// ---------------------------------------------------------------------------
// Oracle
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleResult {
    /// Total waiting minutes of the best schedule found.
    pub cost: u64,
    /// The search finished, so `cost` is optimal.
    pub exact: bool,
    pub nodes: u64,
}

pub const DEFAULT_NODE_BUDGET: u64 = 20_000_000;

#[derive(Clone, Copy)]
struct Vehicle {
    free_at: u32,
    at: Node,
    active: bool,
}

struct Search<'a> {
    graph: &'a StreetGraph,
    requests: Vec<Request>,
    horizon: u32,
    best: u64,
    nodes: u64,
    budget: u64,
    aborted: bool,
}

impl Search<'_> {
    fn unserved_cost(&self, r: &Request) -> u64 {
        (self.horizon + 1 - r.arrival) as u64
    }

    // Earliest pickup of `r` by `v`, if within the horizon.
    fn pickup_time(&self, v: &Vehicle, r: &Request) -> Option<u32> {
        let p = (v.free_at + self.graph.dist(v.at, r.pickup)).max(r.arrival);
        (p <= self.horizon).then_some(p)
    }

    fn bound(&self, vehicles: &[Vehicle], served: &[bool]) -> u64 {
        let mut total = 0;
        for (r, _) in self.requests.iter().zip(served).filter(|(_, &s)| !s) {
            let best = vehicles
                .iter()
                .filter(|v| v.active)
                .filter_map(|v| self.pickup_time(v, r))
                .min()
                .map_or(self.unserved_cost(r), |p| (p - r.arrival) as u64);
            total += best;
        }
        total
    }

    fn dfs(&mut self, vehicles: &mut Vec<Vehicle>, served: &mut Vec<bool>, accrued: u64) {
        self.nodes += 1;
        if self.nodes > self.budget {
            self.aborted = true;
            return;
        }
        if accrued + self.bound(vehicles, served) >= self.best {
            return;
        }
        let next = (0..vehicles.len()).filter(|&k| vehicles[k].active).min_by_key(|&k| (vehicles[k].free_at, k));
        let Some(k) = next else {
            let rest: u64 =
                self.requests.iter().zip(served.iter()).filter(|(_, &s)| !s).map(|(r, _)| self.unserved_cost(r)).sum();
            self.best = self.best.min(accrued + rest);
            return;
        };
        let v = vehicles[k];
        let mut children: Vec<(u32, usize)> = self
            .requests
            .iter()
            .enumerate()
            .filter(|&(i, _)| !served[i])
            .filter_map(|(i, r)| self.pickup_time(&v, r).map(|p| (p - r.arrival, i)))
            .collect();
        children.sort_unstable();
        for (wait, i) in children {
            let r = self.requests[i];
            let p = r.arrival + wait;
            served[i] = true;
            vehicles[k] = Vehicle { free_at: p + self.graph.dist(r.pickup, r.dropoff) + 1, at: r.dropoff, active: true };
            self.dfs(vehicles, served, accrued + wait as u64);
            vehicles[k] = v;
            served[i] = false;
            if self.aborted {
                return;
            }
        }
        vehicles[k].active = false;
        self.dfs(vehicles, served, accrued);
        vehicles[k] = v;
    }
}

/// Minimum total waiting time over all schedules with full knowledge of
/// `arrivals`, by branch and bound over per-vehicle request sequences.
pub fn oracle_cost(
    initial: &SystemState,
    arrivals: &ScriptedArrivals,
    graph: &StreetGraph,
    horizon: u32,
) -> Result<OracleResult> {
    oracle_cost_with_budget(initial, arrivals, graph, horizon, DEFAULT_NODE_BUDGET)
}

pub fn oracle_cost_with_budget(
    initial: &SystemState,
    arrivals: &ScriptedArrivals,
    graph: &StreetGraph,
    horizon: u32,
    budget: u64,
) -> Result<OracleResult> {
    if initial.minute != 1 {
        return Err(Error::InvalidState("the oracle plans from minute 1".into()));
    }
    initial.validate(graph)?;
    let mut requests: Vec<Request> = initial.outstanding.clone();
    requests.extend(arrivals.requests().filter(|r| r.arrival <= horizon).copied());
    for r in &requests {
        graph.check_node(r.pickup)?;
        graph.check_node(r.dropoff)?;
    }
    let mut vehicles: Vec<Vehicle> = (0..initial.agent_count())
        .map(|a| match initial.busy_targets[a] {
            Some(t) => Vehicle { free_at: 1 + initial.timers[a], at: t, active: true },
            None => Vehicle { free_at: 1, at: initial.locations[a], active: true },
        })
        .collect();
    let mut search = Search { graph, requests, horizon, best: u64::MAX, nodes: 0, budget, aborted: false };
    let all_unserved: u64 = search.requests.iter().map(|r| search.unserved_cost(r)).sum();
    search.best = all_unserved + 1;
    let mut served = vec![false; search.requests.len()];
    search.dfs(&mut vehicles, &mut served, 0);
    Ok(OracleResult { cost: search.best.min(all_unserved), exact: !search.aborted, nodes: search.nodes })
}
