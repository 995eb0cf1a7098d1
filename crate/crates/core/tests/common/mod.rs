//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fleetroute::demand::CategoricalDistribution;
use fleetroute::dynamics::{control_set, match_pickups, stage_cost, Control, ScriptedArrivals, SystemState};
use fleetroute::graph::StreetGraph;
use minilp::{ComparisonOp, OptimizationDirection, Problem};

/// Optimal transport cost between two scalar distributions, solved as a
/// linear program over the full coupling matrix.
pub fn wasserstein_lp(p: &CategoricalDistribution, r: &CategoricalDistribution) -> f64 {
    let mut lp = Problem::new(OptimizationDirection::Minimize);
    let (pa, ra) = (p.atoms(), r.atoms());
    let vars: Vec<Vec<_>> = pa
        .iter()
        .map(|&a| ra.iter().map(|&b| lp.add_var((a as f64 - b as f64).abs(), (0.0, f64::INFINITY))).collect())
        .collect();
    for (i, row) in vars.iter().enumerate() {
        let terms: Vec<_> = row.iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(&terms[..], ComparisonOp::Eq, p.probs()[i]);
    }
    // The last column constraint is implied by the others.
    for j in 0..ra.len().saturating_sub(1) {
        let terms: Vec<_> = vars.iter().map(|row| (row[j], 1.0)).collect();
        lp.add_constraint(&terms[..], ComparisonOp::Eq, r.probs()[j]);
    }
    lp.solve().expect("transport LP is feasible").objective()
}

/// Exhaustive finite-horizon dynamic programming over every feasible joint
/// control, with arrivals known in advance.
pub struct ExactDp<'a> {
    pub graph: &'a StreetGraph,
    pub arrivals: &'a ScriptedArrivals,
    pub horizon: u32,
}

impl ExactDp<'_> {
    pub fn joint_controls(&self, state: &SystemState) -> Vec<Vec<Control>> {
        let mut out: Vec<Vec<Control>> = vec![Vec::new()];
        for agent in 0..state.agent_count() {
            let set = control_set(state, agent, self.graph);
            out = out
                .into_iter()
                .flat_map(|prefix| {
                    set.iter().map(move |&c| {
                        let mut v = prefix.clone();
                        v.push(c);
                        v
                    })
                })
                .collect();
        }
        out.retain(|u| match_pickups(state, u).is_ok());
        out
    }

    /// Cost of applying `u` now and acting optimally afterwards.
    pub fn q_value(&self, state: &SystemState, u: &[Control]) -> u64 {
        let k = state.minute;
        let next_arrivals = if k < self.horizon { self.arrivals.at(k + 1).to_vec() } else { Vec::new() };
        let mut next = state.clone();
        next.apply(u, &next_arrivals, self.graph).expect("enumerated controls are feasible");
        stage_cost(&next) + self.value(&next)
    }

    /// Optimal cost-to-go from `state`.
    pub fn value(&self, state: &SystemState) -> u64 {
        if state.minute > self.horizon {
            return 0;
        }
        self.joint_controls(state).iter().map(|u| self.q_value(state, u)).min().expect("stay is always feasible")
    }
}
