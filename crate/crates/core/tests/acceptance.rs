//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each, and
//! exits non-zero if any fails.

mod common;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fleetroute::ambiguity::{q_valid_radius, select_model, wasserstein1, AmbiguitySet, LogBase};
use fleetroute::approximator::{
    encode, generate_training_set, move_targets, tentative_controls, train, ApproximatorPolicy, GraphConvNet, LabelConfig,
    NetKind, NormalizedAdjacency, TrainConfig, DEFAULT_HIDDEN,
};
use fleetroute::demand::{table_i, CategoricalDistribution, DemandModel};
use fleetroute::dynamics::{
    control_set, match_pickups, run_episode, ArrivalModel, Control, Request, ScriptedArrivals, SystemState,
};
use fleetroute::graph::StreetGraph;
use fleetroute::harness::{
    audit_trace, paired_gap, run_suite, run_switching_experiment, sample_episodes, LibraryEntry, PolicyKind, PolicySuite,
    ResultTable, SwitchingConfig, SwitchingReport,
};
use fleetroute::policy::{rollout_policy, DecisionContext, Greedy, Policy, RolloutConfig};
use fleetroute::benchmarks::InstantaneousAssignment;
use fleetroute::Result;

use common::{wasserstein_lp, ExactDp};

const AGENTS: usize = 2;
const HORIZON: u32 = 30;
const EPISODES: usize = 50;
const LABELS: usize = 20_000;
const SEED: u64 = 2024;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn grid() -> StreetGraph {
    StreetGraph::grid(5, 5).unwrap()
}

fn demand(label: &str, eta: CategoricalDistribution) -> DemandModel {
    DemandModel::with_uniform_locations(label, eta, 25).unwrap()
}

fn trained(graph: &StreetGraph, model: &DemandModel, seed: u64) -> Arc<ApproximatorPolicy> {
    let t = Instant::now();
    let labels = generate_training_set(graph, model, &LabelConfig::new(LABELS, AGENTS, seed)).unwrap();
    let label_secs = t.elapsed().as_secs_f64();
    let cfg = TrainConfig { seed, ..TrainConfig::default() };
    let nets = train(graph, &labels, &cfg).unwrap();
    println!(
        "  trained {} approximator on {} labels ({label_secs:.0}s labeling, {:.0}s total; final loss pickup {:.3}, move {:.3})",
        model.label,
        labels.len(),
        t.elapsed().as_secs_f64(),
        nets.pickup_curve.last().unwrap_or(&f64::NAN),
        nets.move_curve.last().unwrap_or(&f64::NAN)
    );
    Arc::new(ApproximatorPolicy::from_trained(graph, nets).unwrap().named(format!("gnn-{}", model.label)))
}

// --- 4 -----------------------------------------------------------------------

fn random_distribution(rng: &mut ChaCha8Rng) -> CategoricalDistribution {
    let mut atoms: Vec<u32> = (0..=8).collect();
    atoms.shuffle(rng);
    atoms.truncate(rng.gen_range(1..=6));
    atoms.sort_unstable();
    let w: Vec<f64> = atoms.iter().map(|_| rng.gen_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    CategoricalDistribution::new(atoms, w.iter().map(|x| x / s).collect()).unwrap()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (p, r) = (random_distribution(&mut rng), random_distribution(&mut rng));
        worst = worst.max((wasserstein1(&p, &r) - wasserstein_lp(&p, &r)).abs());
    }
    let lm = wasserstein1(&table_i::low(), &table_i::medium());
    let pass = worst <= 1e-9 && (lm - 0.10).abs() <= 1e-12;
    outcome(pass, format!("max |closed form - LP| = {worst:.2e} over 1000 pairs; W1(low, medium) = {lm:.12}"))
}

// --- 5 -----------------------------------------------------------------------

fn criterion_5() -> Outcome {
    let l10 = -(1.0f64 - 0.54).log10() / 5000.0;
    let ln = -(1.0f64 - 0.54).ln() / 5000.0;
    let oracle10 = (6.0 + 0.75) * (l10 + 2.0 * l10.sqrt());
    let oracle_e = (6.0 + 0.75) * (ln + 2.0 * ln.sqrt());
    let r10 = q_valid_radius(0.54, 5000.0, 6.0, LogBase::Ten).unwrap();
    let re = q_valid_radius(0.54, 5000.0, 6.0, LogBase::Natural).unwrap();
    let pass = (r10 - oracle10).abs() <= 1e-6
        && (re - oracle_e).abs() <= 1e-6
        && (r10 - 0.1113).abs() < 5e-5
        && (re - 0.1693).abs() < 5e-5;
    outcome(
        pass,
        format!("base 10: {r10:.6} (oracle {oracle10:.6}); natural: {re:.6} (oracle {oracle_e:.6}); published value 0.114 matches neither"),
    )
}

// --- 8 -----------------------------------------------------------------------

fn criterion_8() -> Outcome {
    // Directed ring with a chord: strongly connected, asymmetric adjacency.
    let g = StreetGraph::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (0, 2), (2, 0)]).unwrap();
    let adj = NormalizedAdjacency::new(&g);
    let mut state = SystemState::new(vec![0, 3]);
    state.outstanding = vec![Request::new(0, 0, 3, 1), Request::new(1, 2, 4, 1), Request::new(2, 2, 1, 1)];
    state.timers = vec![0, 2];
    state.busy_targets = vec![None, Some(0)];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for kind in [NetKind::Pickup, NetKind::Move] {
        for agent in 0..2 {
            let tentative = tentative_controls(&state, agent, &[Control::Stay][..agent], &g);
            let enc = encode(&state, agent, &tentative, 5);
            let mut net = GraphConvNet::random(kind, 5, 2, DEFAULT_HIDDEN, SEED + agent as u64);
            for p in net.params_mut() {
                if *p == 0.0 {
                    *p = rng.gen_range(-0.1..0.1);
                }
            }
            let targets = move_targets(&g, state.locations[agent]);
            let label = 1;
            let mut grad = vec![0.0; net.param_count()];
            net.loss_and_grad(&adj, &enc, &targets, label, &mut grad);
            let h = 1e-5;
            for k in 0..net.param_count() {
                let orig = net.params()[k];
                net.params_mut()[k] = orig + h;
                let up = net.loss(&adj, &enc, &targets, label);
                net.params_mut()[k] = orig - h;
                let down = net.loss(&adj, &enc, &targets, label);
                net.params_mut()[k] = orig;
                let fd = (up - down) / (2.0 * h);
                let rel = (fd - grad[k]).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    outcome(worst < 1e-4, format!("{checked} parameter gradients, worst relative error {worst:.2e}"))
}

// --- 9 -----------------------------------------------------------------------

fn micro_instance(rng: &mut ChaCha8Rng) -> (StreetGraph, ScriptedArrivals, u32, usize) {
    let graphs = [
        StreetGraph::from_edges(2, &[(0, 1), (1, 0)]).unwrap(),
        StreetGraph::from_edges(3, &[(0, 1), (1, 2), (2, 0)]).unwrap(),
        StreetGraph::from_edges(3, &[(0, 1), (1, 0), (1, 2), (2, 1)]).unwrap(),
        StreetGraph::from_edges(3, &[(0, 1), (1, 0), (1, 2), (2, 1), (0, 2), (2, 0)]).unwrap(),
    ];
    let g = graphs[rng.gen_range(0..graphs.len())].clone();
    let n = g.node_count();
    let horizon = rng.gen_range(2..=3);
    let mut reqs = Vec::new();
    for minute in 1..=horizon {
        for _ in 0..rng.gen_range(0..=2) {
            let p = rng.gen_range(0..n);
            let d = (p + rng.gen_range(1..n)) % n;
            reqs.push(Request::new(reqs.len() as u64, p, d, minute));
        }
    }
    let start = rng.gen_range(0..n);
    (g, ScriptedArrivals::new(horizon, reqs).unwrap(), horizon, start)
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut decisions = 0;
    let mut mismatches = Vec::new();
    for instance in 0..20 {
        let (g, arrivals, horizon, start) = micro_instance(&mut rng);
        let dp = ExactDp { graph: &g, arrivals: &arrivals, horizon };
        // One trajectory is the exact expectation under known arrivals; the
        // truncation covers the whole horizon.
        let cfg = RolloutConfig { trajectories_per_leaf: 1, truncation: horizon };
        let rollout = rollout_policy(cfg, ArrivalModel::Scripted(arrivals.clone()));
        let mut state = SystemState::new(vec![start]);
        state.outstanding = arrivals.at(1).to_vec();
        for minute in 1..=horizon {
            let ctx = DecisionContext { graph: &g, state: &state, horizon, seed: minute as u64 };
            let u = rollout.joint_control(&ctx).unwrap();
            let best = dp.value(&state);
            let got = dp.q_value(&state, &u);
            decisions += 1;
            if got != best {
                mismatches.push(format!("instance {instance} minute {minute}: {:?} costs {got}, optimum {best}", u));
            }
            let next = if minute < horizon { arrivals.at(minute + 1).to_vec() } else { Vec::new() };
            state.apply(&u, &next, &g).unwrap();
        }
    }
    let detail = if mismatches.is_empty() {
        format!("rollout attains the exact DP optimum at all {decisions} decisions of 20 instances")
    } else {
        format!("{} of {decisions} decisions suboptimal; first: {}", mismatches.len(), mismatches[0])
    };
    outcome(mismatches.is_empty(), detail)
}

// --- 10 ----------------------------------------------------------------------

/// Uniformly random feasible controls; exercises paths greedy never takes.
struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn control(&self, ctx: &DecisionContext<'_>, agent: usize, preceding: &[Control]) -> Result<Control> {
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed ^ (agent as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut set = control_set(ctx.state, agent, ctx.graph);
        set.shuffle(&mut rng);
        for c in set {
            let mut joint = preceding.to_vec();
            joint.push(c);
            joint.resize(ctx.state.agent_count(), Control::Stay);
            // Later agents are placeholders; only this agent's claim matters.
            for (j, slot) in joint.iter_mut().enumerate().skip(agent + 1) {
                *slot = ctx.state.forced_move(j, ctx.graph).unwrap_or(Control::Stay);
            }
            if match_pickups(ctx.state, &joint).is_ok() {
                return Ok(c);
            }
        }
        Ok(Control::Stay)
    }
}

fn random_graph(rng: &mut ChaCha8Rng) -> StreetGraph {
    if rng.gen_bool(0.4) {
        return StreetGraph::grid(rng.gen_range(1..=4), rng.gen_range(2..=4)).unwrap();
    }
    let n = rng.gen_range(2..=8);
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..rng.gen_range(0..2 * n) {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b && !edges.contains(&(a, b)) {
            edges.push((a, b));
        }
    }
    StreetGraph::from_edges(n, &edges).unwrap()
}

fn check_episode(g: &StreetGraph, rng: &mut ChaCha8Rng, policy: &dyn Policy) -> std::result::Result<(), String> {
    let n = g.node_count();
    let m = rng.gen_range(1..=4);
    let horizon = rng.gen_range(1..=20);
    let eta = match rng.gen_range(0..4) {
        0 => table_i::low(),
        1 => table_i::medium(),
        2 => table_i::high(),
        _ => {
            let w: Vec<f64> = (0..4).map(|_| rng.gen_range(0.01..1.0)).collect();
            let s: f64 = w.iter().sum();
            CategoricalDistribution::over_range(w.iter().map(|x| x / s).collect()).unwrap()
        }
    };
    let model = DemandModel::with_uniform_locations("fuzz", eta, n).unwrap();
    let mut initial = SystemState::new((0..m).map(|_| rng.gen_range(0..n)).collect());
    for k in 0..rng.gen_range(0..3u64) {
        let p = rng.gen_range(0..n);
        initial.outstanding.push(Request::new(k, p, (p + 1) % n, 1));
    }
    let seed = rng.gen();
    let out = run_episode(g, &initial, policy, &ArrivalModel::Stochastic(model), horizon, seed).map_err(|e| e.to_string())?;
    let t = &out.trace;

    // Outstanding-count recursion.
    let mut prev = 0u64;
    let mut arrived = 0usize;
    let mut served = 0usize;
    for s in &t.steps {
        arrived += s.arrivals.len();
        served += s.pickups.len();
        if s.outstanding_before as u64 != prev + s.arrivals.len() as u64 {
            return Err(format!("minute {}: {} outstanding, expected {} + {}", s.minute, s.outstanding_before, prev, s.arrivals.len()));
        }
        if s.stage_cost != (s.outstanding_before - s.pickups.len()) as u64 {
            return Err(format!("minute {}: stage cost {} after {} pickups", s.minute, s.stage_cost, s.pickups.len()));
        }
        prev = s.stage_cost;
    }
    // Conservation.
    if arrived != served + out.final_state.outstanding.len() {
        return Err(format!("{arrived} arrived, {served} served, {} left", out.final_state.outstanding.len()));
    }
    // Busy agents close in on the dropoff one street per minute.
    let dropoff = |id: u64| t.steps.iter().flat_map(|s| &s.arrivals).find(|r| r.id == id).map(|r| r.dropoff).unwrap();
    let mut target: Vec<Option<usize>> = vec![None; m];
    for s in &t.steps {
        for a in 0..m {
            match target[a] {
                Some(d) if s.timers[a] > 0 => {
                    if g.dist(s.locations[a], d) != s.timers[a] {
                        return Err(format!("minute {}: agent {a} is {} from dropoff with timer {}", s.minute, g.dist(s.locations[a], d), s.timers[a]));
                    }
                }
                Some(d) => {
                    if s.locations[a] != d {
                        return Err(format!("minute {}: agent {a} freed away from its dropoff", s.minute));
                    }
                    target[a] = None;
                }
                None if s.timers[a] > 0 => {
                    // Busy from the initial state is not generated here.
                    return Err(format!("minute {}: agent {a} busy without a pickup", s.minute));
                }
                None => {}
            }
        }
        for &(a, id) in &s.pickups {
            target[a] = Some(dropoff(id));
        }
    }
    // Dual accounting.
    let audit = audit_trace(t).map_err(|e| e.to_string())?;
    if audit.total_wait != out.total_cost {
        return Err(format!("audit {} vs simulator {}", audit.total_wait, out.total_cost));
    }
    Ok(())
}

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let policies: [&dyn Policy; 3] = [&Greedy, &RandomPolicy, &InstantaneousAssignment::default()];
    let mut failures = Vec::new();
    let total = 10_000;
    for e in 0..total {
        let g = random_graph(&mut rng);
        if let Err(msg) = check_episode(&g, &mut rng, policies[e % 3]) {
            failures.push(format!("episode {e} ({}): {msg}", policies[e % 3].name()));
        }
    }
    let detail = match failures.first() {
        None => format!("recursion, conservation, busy-path and audit hold on {total} fuzzed episodes"),
        Some(f) => format!("{} of {total} episodes violate an invariant; first: {f}", failures.len()),
    };
    outcome(failures.is_empty(), detail)
}

// --- 11 ----------------------------------------------------------------------

fn criterion_11() -> Outcome {
    let g = grid();
    let model = demand("medium", table_i::medium());
    let mut lines = Vec::new();
    let mut pass = true;
    for m in 1..=4 {
        let mut state = SystemState::new((0..m).map(|a| (a * 7) % 25).collect());
        state.outstanding = vec![Request::new(0, 0, 12, 1), Request::new(1, 7, 3, 1), Request::new(2, 14, 20, 1)];
        let policy = rollout_policy(RolloutConfig { trajectories_per_leaf: 4, truncation: 3 }, ArrivalModel::Stochastic(model.clone()));
        let ctx = DecisionContext { graph: &g, state: &state, horizon: HORIZON, seed: 3 };
        policy.joint_control(&ctx).unwrap();
        let leaves = policy.stats().snapshot().leaves;
        let sizes: Vec<u64> = (0..m).map(|a| control_set(&state, a, &g).len() as u64).collect();
        let sum: u64 = sizes.iter().sum();
        let product: u64 = sizes.iter().product();
        pass &= leaves == sum && (m == 1 || leaves < product);
        lines.push(format!("m={m}: {leaves} leaves (sum {sum}, product {product})"));
    }
    outcome(pass, lines.join("; "))
}

// --- 1, 2, 3 -------------------------------------------------------------------

fn gap_line(t: &ResultTable, a: &str, b: &str) -> String {
    let g = t.gap(a, b).unwrap();
    format!("{a} - {b} = {:.3} (se {:.3})", g.mean, g.std_error)
}

fn criteria_1_to_3(medium_gnn: Arc<ApproximatorPolicy>) -> Vec<(usize, Outcome)> {
    let g = grid();
    let model = demand("medium", table_i::medium());
    let suite = PolicySuite::new(model.clone(), RolloutConfig::desk()).with_approximator(medium_gnn);
    let episodes = sample_episodes(&g, &model, AGENTS, HORIZON, EPISODES, SEED).unwrap();
    let t = Instant::now();
    let table = run_suite(&g, &suite, &PolicyKind::ALL, &episodes, HORIZON).unwrap();
    println!("  medium demand, {EPISODES} paired episodes ({:.0}s):", t.elapsed().as_secs_f64());
    for line in table.summary().lines() {
        println!("    {line}");
    }
    let mean = |n: &str| table.get(n).unwrap().mean;

    let g1 = table.gap("greedy", "rollout").unwrap();
    let c1 = outcome(g1.mean > 2.0 * g1.std_error, gap_line(&table, "greedy", "rollout"));

    let g2 = table.gap("greedy", "online-play").unwrap();
    let c2 = outcome(
        mean("online-play") <= mean("rollout") && g2.mean > 2.0 * g2.std_error,
        format!(
            "online play {:.2} vs rollout {:.2}; {}",
            mean("online-play"),
            mean("rollout"),
            gap_line(&table, "greedy", "online-play")
        ),
    );

    let oracle = &table.get("oracle").unwrap().costs;
    let mut dominated = true;
    for row in &table.rows {
        dominated &= oracle.iter().zip(&row.costs).all(|(o, c)| o <= c);
    }
    let small: Vec<usize> = (0..EPISODES).filter(|&e| episodes[e].arrivals.len() <= 12).collect();
    let oracle_runs = fleetroute::harness::evaluate_oracle(&g, &episodes, HORIZON).unwrap();
    let certified = small.iter().filter(|&&e| oracle_runs[e].exact).count();
    let c3 = outcome(
        dominated && certified == small.len(),
        format!(
            "oracle <= every policy on every episode: {dominated}; certified optimal on {certified}/{} episodes with <= 12 requests",
            small.len()
        ),
    );
    vec![(1, c1), (2, c2), (3, c3)]
}

// --- 6, 7 ----------------------------------------------------------------------

fn criteria_6_and_7(library: Vec<LibraryEntry>) -> Vec<(usize, Outcome)> {
    let g = grid();
    let high = demand("high", table_i::high());
    let schedule = vec![high.clone(), high.clone()];
    let cfg = SwitchingConfig::new(AGENTS, HORIZON, EPISODES, SEED, RolloutConfig::desk());
    let t = Instant::now();
    let report: SwitchingReport = run_switching_experiment(&g, &library, 0, &schedule, &cfg).unwrap();
    println!("  switching experiment ({:.0}s):", t.elapsed().as_secs_f64());
    for line in report.summary().lines() {
        println!("    {line}");
    }
    let hour = &report.hours[0];
    let check = select_model(&library, 0, &table_i::high()).unwrap();
    let gap6 = paired_gap(&report.fixed_costs(), &report.switching_costs());
    let c6 = outcome(
        hour.switched && check.switched && hour.active_after != "low" && gap6.mean > gap6.std_error,
        format!(
            "switched at first check: {} (distance {:.3} > radius {:.4}, now {}); fixed - switching = {:.3} (se {:.3}), relative improvement {:.1}%",
            hour.switched,
            hour.distance,
            library[0].set.radius,
            hour.active_after,
            gap6.mean,
            gap6.std_error,
            100.0 * report.relative_improvement()
        ),
    );

    let distance = wasserstein1(&table_i::low(), &table_i::high());
    let rollout = report.rollout_costs();
    let fixed = report.fixed_costs();
    let adv = paired_gap(&rollout, &fixed);
    let mean = |c: &[u64]| c.iter().sum::<u64>() as f64 / c.len() as f64;
    let c7 = outcome(
        distance >= 0.15 && (mean(&rollout) <= mean(&fixed) || adv.mean < adv.std_error),
        format!(
            "demand distance {distance:.2}; rollout {:.2} vs non-switching online play {:.2}; rollout - online play = {:.3} (se {:.3})",
            mean(&rollout),
            mean(&fixed),
            adv.mean,
            adv.std_error
        ),
    );
    vec![(6, c6), (7, c7)]
}

fn library_entry(label: &str, model: DemandModel, policy: Arc<ApproximatorPolicy>) -> LibraryEntry {
    let set = AmbiguitySet::from_reference(model.eta.clone(), 0.54, 5000.0, LogBase::Ten).unwrap();
    LibraryEntry { label: label.into(), model, policy, set }
}

fn main() {
    let start = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |n: usize, f: &dyn Fn() -> Outcome| {
        let o = f();
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    };
    run(4, &criterion_4);
    run(5, &criterion_5);
    run(8, &criterion_8);
    run(9, &criterion_9);
    run(10, &criterion_10);
    run(11, &criterion_11);

    let g = grid();
    let low = demand("low", table_i::low());
    let medium = demand("medium", table_i::medium());
    let high = demand("high", table_i::high());
    let medium_gnn = trained(&g, &medium, SEED + 1);
    for (n, o) in criteria_1_to_3(medium_gnn.clone()) {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    }
    let low_gnn = trained(&g, &low, SEED + 2);
    let high_gnn = trained(&g, &high, SEED + 3);
    let library = vec![
        library_entry("low", low, low_gnn),
        library_entry("medium", medium, medium_gnn),
        library_entry("high", high, high_gnn),
    ];
    for (n, o) in criteria_6_and_7(library) {
        println!("criterion {n}: {} - {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((n, o));
    }

    results.sort_by_key(|(n, _)| *n);
    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!("acceptance: {}/{} criteria pass in {:.0}s", results.len() - failed.len(), results.len(), start.elapsed().as_secs_f64());
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
