//! System state, per-agent controls, the transition function and stage cost,
//! and the episode simulator.
//!
//! Timing convention: the state at minute `k` already contains the requests
//! arriving at `k`. Controls chosen at `k` may pick those up. The stage cost
//! of minute `k` is the number of requests still outstanding after the
//! pickups of minute `k`, so a request arriving at `a` and picked up at `p`
//! contributes `p - a` minutes, and an unserved one `N + 1 - a`.

use std::fmt;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::demand::{sample_minute, DemandModel, RequestLog};
use crate::error::{Error, Result};
use crate::graph::{Node, StreetGraph};
use crate::policy::{DecisionContext, Policy};
use crate::seeding::{derive_seed, stream, StreamRng, TAG_ARRIVALS, TAG_POLICY};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub pickup: Node,
    pub dropoff: Node,
    pub arrival: u32,
    /// Set once an agent has picked the request up. Outstanding lists only
    /// hold unassigned requests.
    #[serde(default)]
    pub assigned: bool,
}

impl Request {
    pub fn new(id: u64, pickup: Node, dropoff: Node, arrival: u32) -> Self {
        Self { id, pickup, dropoff, arrival, assigned: false }
    }
}

/// One agent's action for one minute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Control {
    /// Pick up the oldest outstanding request at the current node.
    Pickup,
    Move(Node),
    Stay,
}

impl Control {
    /// Node the agent occupies after the control, given its current node.
    pub fn destination(self, at: Node) -> Node {
        match self {
            Control::Move(v) => v,
            Control::Pickup | Control::Stay => at,
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "pickup" => Ok(Control::Pickup),
            "stay" => Ok(Control::Stay),
            _ => text
                .strip_prefix("move:")
                .and_then(|v| v.parse::<usize>().ok())
                .filter(|&v| v > 0)
                .map(|v| Control::Move(v - 1))
                .ok_or_else(|| Error::InvalidArgument(format!("bad control {text:?}"))),
        }
    }
}

impl fmt::Display for Control {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Control::Pickup => f.write_str("pickup"),
            Control::Move(v) => write!(f, "move:{}", v + 1),
            Control::Stay => f.write_str("stay"),
        }
    }
}

/// The DP state: agent locations, remaining trip minutes, outstanding
/// requests (in arrival order) and the dropoff node of each trip in progress.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemState {
    pub minute: u32,
    pub locations: Vec<Node>,
    pub timers: Vec<u32>,
    pub busy_targets: Vec<Option<Node>>,
    pub outstanding: Vec<Request>,
}

impl SystemState {
    /// All agents free at `locations`, minute 1, nothing outstanding.
    pub fn new(locations: Vec<Node>) -> Self {
        let m = locations.len();
        Self {
            minute: 1,
            locations,
            timers: vec![0; m],
            busy_targets: vec![None; m],
            outstanding: Vec::new(),
        }
    }

    pub fn agent_count(&self) -> usize {
        self.locations.len()
    }

    #[inline]
    pub fn is_free(&self, agent: usize) -> bool {
        self.timers[agent] == 0
    }

    /// Outstanding requests whose pickup node is `node`.
    pub fn requests_at(&self, node: Node) -> usize {
        self.outstanding.iter().filter(|r| r.pickup == node).count()
    }

    /// The forced move of a busy agent.
    #[inline]
    pub fn forced_move(&self, agent: usize, graph: &StreetGraph) -> Option<Control> {
        self.busy_targets[agent].map(|t| Control::Move(graph.next_hop(self.locations[agent], t)))
    }

    /// Checks the structural invariants against `graph`.
    pub fn validate(&self, graph: &StreetGraph) -> Result<()> {
        let m = self.locations.len();
        if self.timers.len() != m || self.busy_targets.len() != m {
            return Err(Error::InvalidState("agent vectors differ in length".into()));
        }
        for agent in 0..m {
            graph.check_node(self.locations[agent])?;
            match (self.timers[agent], self.busy_targets[agent]) {
                (0, None) => {}
                (t, Some(target)) if t > 0 => {
                    graph.check_node(target)?;
                    if graph.dist(self.locations[agent], target) != t {
                        return Err(Error::InvalidState(format!(
                            "agent {agent}: timer {t} differs from distance to its dropoff"
                        )));
                    }
                }
                _ => {
                    return Err(Error::InvalidState(format!(
                        "agent {agent}: timer and dropoff target disagree"
                    )))
                }
            }
        }
        for r in &self.outstanding {
            graph.check_node(r.pickup)?;
            graph.check_node(r.dropoff)?;
            if r.pickup == r.dropoff || r.assigned || r.arrival > self.minute {
                return Err(Error::InvalidState(format!("bad outstanding request {r:?}")));
            }
        }
        if self.outstanding.windows(2).any(|w| w[0].arrival > w[1].arrival) {
            return Err(Error::InvalidState("outstanding requests out of arrival order".into()));
        }
        Ok(())
    }

    /// Applies `controls` in place: pickups, moves, then the arrivals of the
    /// next minute. Returns the number of requests serviced.
    pub fn apply(
        &mut self,
        controls: &[Control],
        arrivals: &[Request],
        graph: &StreetGraph,
    ) -> Result<usize> {
        let m = self.agent_count();
        if controls.len() != m {
            return Err(Error::InvalidArgument(format!(
                "{} controls for {m} agents",
                controls.len()
            )));
        }
        let next_minute = self.minute + 1;
        if let Some(r) = arrivals.iter().find(|r| r.arrival != next_minute) {
            return Err(Error::WrongArrivalMinute { expected: next_minute, got: r.arrival });
        }
        for (agent, &c) in controls.iter().enumerate() {
            check_feasible(self, agent, c, graph)?;
        }
        let matched = match_pickups(self, controls)?;

        for (agent, &c) in controls.iter().enumerate() {
            if let Some(target) = self.busy_targets[agent] {
                let hop = graph.next_hop(self.locations[agent], target);
                self.locations[agent] = hop;
                self.timers[agent] -= 1;
                if self.timers[agent] == 0 {
                    self.busy_targets[agent] = None;
                }
                continue;
            }
            match c {
                Control::Move(v) => self.locations[agent] = v,
                Control::Stay => {}
                Control::Pickup => {
                    let req = self.outstanding[matched[agent].expect("matched pickup")];
                    self.busy_targets[agent] = Some(req.dropoff);
                    self.timers[agent] = graph.dist(req.pickup, req.dropoff);
                }
            }
        }
        let serviced = matched.iter().flatten().count();
        if serviced > 0 {
            let mut idx = 0;
            self.outstanding.retain(|_| {
                let keep = !matched.contains(&Some(idx));
                idx += 1;
                keep
            });
        }
        self.outstanding.extend_from_slice(arrivals);
        self.minute = next_minute;
        Ok(serviced)
    }
}

/// Feasible controls of one agent. A busy agent has only its forced move.
/// Otherwise: `Pickup` (if a request waits at its node), neighbor moves in
/// ascending order, then `Stay`. This is also the tie-break preference order.
pub fn control_set(state: &SystemState, agent: usize, graph: &StreetGraph) -> Vec<Control> {
    if let Some(forced) = state.forced_move(agent, graph) {
        return vec![forced];
    }
    let here = state.locations[agent];
    let neighbors = graph.neighbors(here);
    let mut out = Vec::with_capacity(neighbors.len() + 2);
    if state.outstanding.iter().any(|r| r.pickup == here) {
        out.push(Control::Pickup);
    }
    out.extend(neighbors.iter().map(|&v| Control::Move(v)));
    out.push(Control::Stay);
    out
}

/// Per-agent feasibility, ignoring competition between pickups.
pub fn check_feasible(
    state: &SystemState,
    agent: usize,
    control: Control,
    graph: &StreetGraph,
) -> Result<()> {
    let here = state.locations[agent];
    if let Some(forced) = state.forced_move(agent, graph) {
        if control != forced {
            return Err(Error::infeasible(agent, format!("busy agent must {forced}, got {control}")));
        }
        return Ok(());
    }
    match control {
        Control::Move(v) if !graph.has_edge(here, v) => Err(Error::infeasible(
            agent,
            format!("no street from {} to {}", here + 1, v + 1),
        )),
        Control::Pickup if !state.outstanding.iter().any(|r| r.pickup == here) => {
            Err(Error::infeasible(agent, format!("no request waiting at node {}", here + 1)))
        }
        _ => Ok(()),
    }
}

/// Assigns each `Pickup` to the oldest unclaimed request at the agent's node,
/// in agent order. Returns the matched index into `state.outstanding` per
/// agent. A pickup with nothing left to claim is infeasible.
pub fn match_pickups(state: &SystemState, controls: &[Control]) -> Result<Vec<Option<usize>>> {
    let mut matched = vec![None; controls.len()];
    for (agent, &c) in controls.iter().enumerate() {
        if c != Control::Pickup || !state.is_free(agent) {
            continue;
        }
        let here = state.locations[agent];
        let found = state
            .outstanding
            .iter()
            .enumerate()
            .find(|(i, r)| r.pickup == here && !matched.contains(&Some(*i)))
            .map(|(i, _)| i);
        match found {
            Some(i) => matched[agent] = Some(i),
            None => {
                return Err(Error::infeasible(
                    agent,
                    format!("no unclaimed request left at node {}", here + 1),
                ))
            }
        }
    }
    Ok(matched)
}

/// Number of requests the joint control services.
pub fn count_serviced(state: &SystemState, controls: &[Control]) -> Result<usize> {
    Ok(match_pickups(state, controls)?.iter().flatten().count())
}

/// Pure transition: the state of the next minute.
pub fn transition(
    state: &SystemState,
    controls: &[Control],
    new_requests: &[Request],
    graph: &StreetGraph,
) -> Result<SystemState> {
    let mut next = state.clone();
    next.apply(controls, new_requests, graph)?;
    Ok(next)
}

/// Stage cost of the minute that led to `after`: requests that arrived before
/// `after.minute` and are still outstanding.
#[inline]
pub fn stage_cost(after: &SystemState) -> u64 {
    after.outstanding.iter().filter(|r| r.arrival < after.minute).count() as u64
}

// ---------------------------------------------------------------------------
// Arrival sources
// ---------------------------------------------------------------------------

/// A fixed request realization, one list per minute `1..=horizon`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedArrivals {
    by_minute: Vec<Vec<Request>>,
}

impl ScriptedArrivals {
    /// Ids are assigned in arrival order. Requests are grouped by their
    /// `arrival` field.
    pub fn new(horizon: u32, requests: impl IntoIterator<Item = Request>) -> Result<Self> {
        let mut by_minute = vec![Vec::new(); horizon as usize];
        for r in requests {
            if r.arrival == 0 || r.arrival > horizon {
                return Err(Error::MinuteOutOfRange { minute: r.arrival, horizon });
            }
            if r.pickup == r.dropoff {
                return Err(Error::InvalidArgument(format!("zero-length trip {r:?}")));
            }
            by_minute[r.arrival as usize - 1].push(r);
        }
        let mut next_id = 0;
        for r in by_minute.iter_mut().flatten() {
            r.id = next_id;
            r.assigned = false;
            next_id += 1;
        }
        Ok(Self { by_minute })
    }

    /// Draws minutes `1..=horizon` from `model`; minute `k` uses its own
    /// stream derived from `(seed, k)`.
    pub fn sample(model: &DemandModel, horizon: u32, seed: u64) -> Result<Self> {
        let mut all = Vec::new();
        for minute in 1..=horizon {
            let mut rng = stream(seed, &[TAG_ARRIVALS, minute as u64]);
            all.extend(sample_minute(model, &mut rng, minute)?);
        }
        Self::new(horizon, all)
    }

    pub fn from_log(log: &RequestLog, horizon: u32) -> Result<Self> {
        Self::new(
            horizon,
            log.entries().iter().map(|e| Request::new(0, e.pickup, e.dropoff, e.minute)),
        )
    }

    pub fn horizon(&self) -> u32 {
        self.by_minute.len() as u32
    }

    /// Requests entering at `minute` (empty outside the horizon).
    pub fn at(&self, minute: u32) -> &[Request] {
        minute
            .checked_sub(1)
            .and_then(|i| self.by_minute.get(i as usize))
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    pub fn requests(&self) -> impl Iterator<Item = &Request> {
        self.by_minute.iter().flatten()
    }

    pub fn len(&self) -> usize {
        self.by_minute.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Per-minute counts as a request log.
    pub fn to_log(&self) -> RequestLog {
        RequestLog::new(
            self.requests()
                .map(|r| crate::demand::LogEntry {
                    minute: r.arrival,
                    pickup: r.pickup,
                    dropoff: r.dropoff,
                })
                .collect(),
        )
        .expect("arrival minutes are positive")
    }
}

/// Where future requests come from during simulation and lookahead.
#[derive(Debug, Clone)]
pub enum ArrivalModel {
    Stochastic(DemandModel),
    Scripted(ScriptedArrivals),
}

impl ArrivalModel {
    pub fn draw(&self, minute: u32, rng: &mut StreamRng) -> Result<Vec<Request>> {
        match self {
            ArrivalModel::Stochastic(m) => sample_minute(m, rng, minute),
            ArrivalModel::Scripted(s) => Ok(s.at(minute).to_vec()),
        }
    }

    /// True when no request can ever arrive.
    pub fn is_silent(&self) -> bool {
        match self {
            ArrivalModel::Stochastic(m) => m.idle_probability() == 1.0,
            ArrivalModel::Scripted(s) => s.is_empty(),
        }
    }
}

// ---------------------------------------------------------------------------
// Episodes and traces
// ---------------------------------------------------------------------------

/// What happened in one simulated minute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceStep {
    pub minute: u32,
    /// Requests that became visible at this minute.
    pub arrivals: Vec<Request>,
    pub locations: Vec<Node>,
    pub timers: Vec<u32>,
    pub controls: Vec<Control>,
    /// `(agent, request id)` for every pickup of this minute.
    pub pickups: Vec<(usize, u64)>,
    pub outstanding_before: usize,
    pub stage_cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub horizon: u32,
    pub agents: usize,
    pub total_cost: u64,
    pub steps: Vec<TraceStep>,
}

#[derive(Debug, Clone)]
pub struct EpisodeOutcome {
    pub total_cost: u64,
    pub final_state: SystemState,
    pub trace: Trace,
}

/// Simulates minutes `1..=horizon` from `initial` (whose minute must be 1).
///
/// Arrivals of minute `k` come from the stream `(seed, k)` when `arrivals` is
/// stochastic, so every policy run with the same seed faces the same
/// realization. The policy's seed at minute `k` is derived from `(seed, k)`.
pub fn run_episode(
    graph: &StreetGraph,
    initial: &SystemState,
    policy: &dyn Policy,
    arrivals: &ArrivalModel,
    horizon: u32,
    seed: u64,
) -> Result<EpisodeOutcome> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least one minute".into()));
    }
    if initial.minute != 1 {
        return Err(Error::InvalidState("episodes start at minute 1".into()));
    }
    initial.validate(graph)?;

    let draw = |minute: u32| -> Result<Vec<Request>> {
        let mut rng = stream(seed, &[TAG_ARRIVALS, minute as u64]);
        arrivals.draw(minute, &mut rng)
    };
    let mut next_id = initial.outstanding.iter().map(|r| r.id + 1).max().unwrap_or(0);
    let mut assign_ids = |reqs: &mut Vec<Request>| {
        for r in reqs.iter_mut() {
            r.id = next_id;
            next_id += 1;
        }
    };

    let mut state = initial.clone();
    let mut first = draw(1)?;
    assign_ids(&mut first);
    let mut visible: Vec<Request> = state.outstanding.clone();
    visible.extend_from_slice(&first);
    state.outstanding.extend(first);

    let mut steps = Vec::with_capacity(horizon as usize);
    let mut total = 0u64;
    for minute in 1..=horizon {
        let ctx = DecisionContext {
            graph,
            state: &state,
            horizon,
            seed: derive_seed(seed, &[TAG_POLICY, minute as u64]),
        };
        let wrap = |e: Error| Error::Episode { minute, source: Box::new(e) };
        let controls = policy.joint_control(&ctx).map_err(wrap)?;
        let pickups: Vec<(usize, u64)> = match_pickups(&state, &controls)
            .map_err(wrap)?
            .iter()
            .enumerate()
            .filter_map(|(agent, m)| m.map(|i| (agent, state.outstanding[i].id)))
            .collect();
        let mut next = if minute < horizon { draw(minute + 1)? } else { Vec::new() };
        assign_ids(&mut next);

        let locations = state.locations.clone();
        let timers = state.timers.clone();
        let outstanding_before = state.outstanding.len();
        state.apply(&controls, &next, graph).map_err(wrap)?;
        let cost = stage_cost(&state);
        total += cost;
        steps.push(TraceStep {
            minute,
            arrivals: std::mem::replace(&mut visible, next),
            locations,
            timers,
            controls,
            pickups,
            outstanding_before,
            stage_cost: cost,
        });
    }
    Ok(EpisodeOutcome {
        total_cost: total,
        final_state: state,
        trace: Trace { horizon, agents: initial.agent_count(), total_cost: total, steps },
    })
}

impl Trace {
    /// Line-oriented CSV: `H` header, then per minute `A` arrival, `S` agent,
    /// `P` pickup and `K` stage-cost records. Nodes are 1-based.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "H,{},{},{}", self.horizon, self.agents, self.total_cost);
        for s in &self.steps {
            for r in &s.arrivals {
                let _ = writeln!(out, "A,{},{},{},{}", r.arrival, r.id, r.pickup + 1, r.dropoff + 1);
            }
            for agent in 0..s.controls.len() {
                let _ = writeln!(
                    out,
                    "S,{},{},{},{},{}",
                    s.minute,
                    agent + 1,
                    s.locations[agent] + 1,
                    s.timers[agent],
                    s.controls[agent]
                );
            }
            for &(agent, id) in &s.pickups {
                let _ = writeln!(out, "P,{},{},{}", s.minute, agent + 1, id);
            }
            let _ = writeln!(out, "K,{},{}", s.minute, s.stage_cost);
        }
        out
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut trace: Option<Trace> = None;
        let mut current: Option<TraceStep> = None;
        let mut pending_arrivals = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = t.split(',').collect();
            let lineno = idx + 1;
            let num = |i: usize| -> Result<u64> {
                f.get(i)
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::parse(lineno, format!("bad field {i} in {t:?}")))
            };
            let node = |i: usize| -> Result<Node> {
                num(i)?.checked_sub(1).map(|v| v as Node).ok_or_else(|| Error::parse(lineno, "nodes are 1-based"))
            };
            let step_for = |current: &mut Option<TraceStep>, minute: u32, pending: &mut Vec<Request>| {
                if current.as_ref().map(|s| s.minute) != Some(minute) {
                    *current = Some(TraceStep {
                        minute,
                        arrivals: std::mem::take(pending),
                        locations: Vec::new(),
                        timers: Vec::new(),
                        controls: Vec::new(),
                        pickups: Vec::new(),
                        outstanding_before: 0,
                        stage_cost: 0,
                    });
                }
            };
            match f[0] {
                "H" => {
                    trace = Some(Trace {
                        horizon: num(1)? as u32,
                        agents: num(2)? as usize,
                        total_cost: num(3)?,
                        steps: Vec::new(),
                    })
                }
                "A" => pending_arrivals.push(Request::new(num(2)?, node(3)?, node(4)?, num(1)? as u32)),
                "S" => {
                    let minute = num(1)? as u32;
                    step_for(&mut current, minute, &mut pending_arrivals);
                    let step = current.as_mut().expect("step exists");
                    step.locations.push(node(3)?);
                    step.timers.push(num(4)? as u32);
                    let c = f.get(5).ok_or_else(|| Error::parse(lineno, "missing control"))?;
                    step.controls.push(Control::parse(c)?);
                }
                "P" => {
                    let minute = num(1)? as u32;
                    step_for(&mut current, minute, &mut pending_arrivals);
                    let step = current.as_mut().expect("step exists");
                    step.pickups.push((num(2)? as usize - 1, num(3)?));
                }
                "K" => {
                    let minute = num(1)? as u32;
                    step_for(&mut current, minute, &mut pending_arrivals);
                    let mut step = current.take().expect("step exists");
                    step.stage_cost = num(2)?;
                    let tr = trace.as_mut().ok_or_else(|| Error::parse(lineno, "missing H header"))?;
                    tr.steps.push(step);
                }
                other => return Err(Error::parse(lineno, format!("unknown record {other:?}"))),
            }
        }
        trace.ok_or_else(|| Error::parse(0, "empty trace"))
    }
}
