//! Experiment orchestration: paired episodes, policy suites, result tables,
//! the switching experiment, and trace auditing.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::ambiguity::{select_model, wasserstein1, AmbiguitySet, HasAmbiguitySet, LogBase};
use crate::approximator::ApproximatorPolicy;
use crate::benchmarks::{oracle_cost, InstantaneousAssignment, OracleResult, Tss};
use crate::demand::{estimate_eta, load_model, CategoricalDistribution, DemandModel, DEFAULT_MAX_COUNT};
use crate::dynamics::{run_episode, ArrivalModel, ScriptedArrivals, SystemState, Trace};
use crate::error::{Error, Result};
use crate::graph::{load_graph, StreetGraph};
use crate::policy::{online_play_policy, rollout_policy, Greedy, Policy, RolloutConfig};
use crate::seeding::{derive_seed, stream, TAG_HISTORY, TAG_START};

// ---------------------------------------------------------------------------
// Episodes
// ---------------------------------------------------------------------------

/// One paired evaluation episode: every policy starts from `initial` and
/// faces `arrivals`.
#[derive(Debug, Clone)]
pub struct Episode {
    pub index: usize,
    pub seed: u64,
    pub initial: SystemState,
    pub arrivals: ScriptedArrivals,
}

/// Uniform start locations, all agents free, nothing outstanding; arrivals
/// pre-sampled from `model`.
pub fn sample_episodes(
    graph: &StreetGraph,
    model: &DemandModel,
    agents: usize,
    horizon: u32,
    count: usize,
    seed: u64,
) -> Result<Vec<Episode>> {
    if agents == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("need at least one agent and one minute".into()));
    }
    model.check_graph(graph)?;
    (0..count)
        .map(|index| {
            let seed = derive_seed(seed, &[index as u64]);
            let mut rng = stream(seed, &[TAG_START]);
            let locations = (0..agents).map(|_| rng.gen_range(0..graph.node_count())).collect();
            let arrivals = ScriptedArrivals::sample(model, horizon, seed)?;
            Ok(Episode { index, seed, initial: SystemState::new(locations), arrivals })
        })
        .collect()
}

/// Total cost of `policy` on each episode, in episode order.
pub fn evaluate_policy(graph: &StreetGraph, policy: &dyn Policy, episodes: &[Episode], horizon: u32) -> Result<Vec<u64>> {
    episodes
        .par_iter()
        .map(|e| {
            let arrivals = ArrivalModel::Scripted(e.arrivals.clone());
            run_episode(graph, &e.initial, policy, &arrivals, horizon, e.seed).map(|o| o.total_cost)
        })
        .collect()
}

pub fn evaluate_oracle(graph: &StreetGraph, episodes: &[Episode], horizon: u32) -> Result<Vec<OracleResult>> {
    episodes.par_iter().map(|e| oracle_cost(&e.initial, &e.arrivals, graph, horizon)).collect()
}

// ---------------------------------------------------------------------------
// Policies by name
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PolicyKind {
    Greedy,
    Rollout,
    Gnn,
    OnlinePlay,
    InstAssign,
    Tss,
    Oracle,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 7] = [
        PolicyKind::Greedy,
        PolicyKind::Rollout,
        PolicyKind::Gnn,
        PolicyKind::OnlinePlay,
        PolicyKind::InstAssign,
        PolicyKind::Tss,
        PolicyKind::Oracle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Greedy => "greedy",
            PolicyKind::Rollout => "rollout",
            PolicyKind::Gnn => "gnn",
            PolicyKind::OnlinePlay => "online-play",
            PolicyKind::InstAssign => "inst-assign",
            PolicyKind::Tss => "tss",
            PolicyKind::Oracle => "oracle",
        }
    }

    pub fn needs_weights(self) -> bool {
        matches!(self, PolicyKind::Gnn | PolicyKind::OnlinePlay)
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidArgument(format!("unknown policy {s:?}")))
    }
}

pub fn parse_policy_list(text: &str) -> Result<Vec<PolicyKind>> {
    text.split(',').filter(|s| !s.trim().is_empty()).map(PolicyKind::from_str).collect()
}

/// What the named policies are built from.
#[derive(Clone)]
pub struct PolicySuite {
    /// Demand model simulated by lookahead policies.
    pub model: DemandModel,
    pub rollout: RolloutConfig,
    pub tss_samples: usize,
    pub approximator: Option<Arc<ApproximatorPolicy>>,
}

impl PolicySuite {
    pub fn new(model: DemandModel, rollout: RolloutConfig) -> Self {
        Self { model, rollout, tss_samples: 100, approximator: None }
    }

    pub fn with_approximator(mut self, approx: Arc<ApproximatorPolicy>) -> Self {
        self.approximator = Some(approx);
        self
    }

    fn approx(&self, kind: PolicyKind) -> Result<Arc<ApproximatorPolicy>> {
        self.approximator.clone().ok_or_else(|| Error::MissingWeights(kind.name().into()))
    }

    /// The oracle is not a feedback policy; see [`evaluate_oracle`].
    pub fn build(&self, kind: PolicyKind) -> Result<Box<dyn Policy>> {
        let arrivals = ArrivalModel::Stochastic(self.model.clone());
        Ok(match kind {
            PolicyKind::Greedy => Box::new(Greedy),
            PolicyKind::Rollout => Box::new(rollout_policy(self.rollout, arrivals)),
            PolicyKind::Gnn => Box::new(self.approx(kind)?),
            PolicyKind::OnlinePlay => Box::new(online_play_policy(self.approx(kind)?, self.rollout, arrivals)),
            PolicyKind::InstAssign => Box::new(InstantaneousAssignment::default()),
            PolicyKind::Tss => Box::new(Tss::new(self.model.clone(), self.tss_samples)?),
            PolicyKind::Oracle => {
                return Err(Error::InvalidArgument("the oracle is evaluated offline, not as a policy".into()))
            }
        })
    }
}

// ---------------------------------------------------------------------------
// Result tables
// ---------------------------------------------------------------------------

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Standard error of the mean (sample standard deviation over `sqrt(n)`).
pub fn std_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyResult {
    pub name: String,
    pub costs: Vec<u64>,
    pub mean: f64,
    pub std_error: f64,
    /// `None` when every mean is equal.
    pub normalized: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub rows: Vec<PolicyResult>,
    pub min: f64,
    pub max: f64,
    /// Episodes on which the oracle search finished, if the oracle ran.
    pub oracle_exact: Option<usize>,
}

/// Mean of `a - b` over paired episodes and its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedGap {
    pub mean: f64,
    pub std_error: f64,
}

pub fn paired_gap(a: &[u64], b: &[u64]) -> PairedGap {
    let d: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x as f64 - y as f64).collect();
    PairedGap { mean: mean(&d), std_error: std_error(&d) }
}

impl ResultTable {
    /// Min-max normalizes the policy means.
    pub fn new(results: Vec<(String, Vec<u64>)>) -> Self {
        let mut rows: Vec<PolicyResult> = results
            .into_iter()
            .map(|(name, costs)| {
                let xs: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
                PolicyResult { name, mean: mean(&xs), std_error: std_error(&xs), costs, normalized: None }
            })
            .collect();
        let min = rows.iter().map(|r| r.mean).fold(f64::INFINITY, f64::min);
        let max = rows.iter().map(|r| r.mean).fold(f64::NEG_INFINITY, f64::max);
        if max > min {
            for r in &mut rows {
                r.normalized = Some((r.mean - min) / (max - min));
            }
        }
        Self { rows, min, max, oracle_exact: None }
    }

    pub fn get(&self, name: &str) -> Option<&PolicyResult> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn gap(&self, a: &str, b: &str) -> Option<PairedGap> {
        Some(paired_gap(&self.get(a)?.costs, &self.get(b)?.costs))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("policy,mean_minutes,std_error,normalized\n");
        for r in &self.rows {
            let norm = r.normalized.map_or("undefined".to_string(), |v| format!("{v:.4}"));
            let _ = writeln!(out, "{},{:.4},{:.4},{}", r.name, r.mean, r.std_error, norm);
        }
        out
    }

    /// Per-episode costs, one row per episode.
    pub fn episodes_csv(&self) -> String {
        let mut out = String::from("episode");
        for r in &self.rows {
            out.push(',');
            out.push_str(&r.name);
        }
        out.push('\n');
        let n = self.rows.first().map_or(0, |r| r.costs.len());
        for e in 0..n {
            out.push_str(&e.to_string());
            for r in &self.rows {
                let _ = write!(out, ",{}", r.costs[e]);
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<14} {:>10} {:>9} {:>11}", "policy", "mean", "std err", "normalized");
        for r in &self.rows {
            let norm = r.normalized.map_or("undefined".to_string(), |v| format!("{v:.2}"));
            let _ = writeln!(out, "{:<14} {:>10.2} {:>9.2} {:>11}", r.name, r.mean, r.std_error, norm);
        }
        let _ = writeln!(out, "min/max (minutes): {:.2} / {:.2}", self.min, self.max);
        if let Some(k) = self.oracle_exact {
            let n = self.rows.first().map_or(0, |r| r.costs.len());
            let _ = writeln!(out, "oracle optimal on {k}/{n} episodes");
        }
        out
    }
}

/// Runs `kinds` on shared episodes. Policies run one after another; the
/// episodes of each policy run in parallel.
pub fn run_suite(
    graph: &StreetGraph,
    suite: &PolicySuite,
    kinds: &[PolicyKind],
    episodes: &[Episode],
    horizon: u32,
) -> Result<ResultTable> {
    let mut results = Vec::new();
    let mut oracle_exact = None;
    for &kind in kinds {
        let costs = if kind == PolicyKind::Oracle {
            let r = evaluate_oracle(graph, episodes, horizon)?;
            oracle_exact = Some(r.iter().filter(|o| o.exact).count());
            r.iter().map(|o| o.cost).collect()
        } else {
            let policy = suite.build(kind)?;
            evaluate_policy(graph, &*policy, episodes, horizon)?
        };
        log::info!("{}: mean {:.3}", kind.name(), mean(&costs.iter().map(|&c| c as f64).collect::<Vec<_>>()));
        results.push((kind.name().to_string(), costs));
    }
    let mut table = ResultTable::new(results);
    table.oracle_exact = oracle_exact;
    Ok(table)
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Key-value experiment configuration. Lines are `key = value`; `#` starts a
/// comment. Relative paths resolve against the config file's directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub graph: PathBuf,
    pub demand: PathBuf,
    pub policies: Vec<PolicyKind>,
    pub horizon: u32,
    pub agents: usize,
    pub episodes: usize,
    pub seed: u64,
    pub rollout: RolloutConfig,
    pub tss_samples: usize,
    pub weights: Option<PathBuf>,
    pub q: f64,
    pub samples: f64,
    pub log_base: LogBase,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::parse(i + 1, "expected key = value"))?;
            kv.insert(k.trim().to_string(), (i + 1, v.trim().to_string()));
        }
        let path = |v: &str| base.join(v);
        let take = |kv: &mut BTreeMap<String, (usize, String)>, k: &str| kv.remove(k);
        fn num<T: FromStr>(entry: Option<(usize, String)>, default: T) -> Result<T> {
            match entry {
                None => Ok(default),
                Some((line, v)) => v.parse().map_err(|_| Error::parse(line, format!("bad number {v:?}"))),
            }
        }
        let graph = take(&mut kv, "graph").map(|(_, v)| path(&v)).ok_or_else(|| Error::parse(0, "missing key graph"))?;
        let demand = take(&mut kv, "demand").map(|(_, v)| path(&v)).ok_or_else(|| Error::parse(0, "missing key demand"))?;
        let policies = match take(&mut kv, "policies") {
            Some((_, v)) => parse_policy_list(&v)?,
            None => vec![PolicyKind::Greedy, PolicyKind::Rollout],
        };
        let defaults = RolloutConfig::default();
        let cfg = Self {
            graph,
            demand,
            policies,
            horizon: num(take(&mut kv, "horizon"), 60)?,
            agents: num(take(&mut kv, "agents"), 3)?,
            episodes: num(take(&mut kv, "episodes"), 50)?,
            seed: num(take(&mut kv, "seed"), 0)?,
            rollout: RolloutConfig {
                trajectories_per_leaf: num(take(&mut kv, "trajectories"), defaults.trajectories_per_leaf)?,
                truncation: num(take(&mut kv, "truncation"), defaults.truncation)?,
            },
            tss_samples: num(take(&mut kv, "tss_samples"), 1000)?,
            weights: take(&mut kv, "weights").map(|(_, v)| path(&v)),
            q: num(take(&mut kv, "q"), 0.54)?,
            samples: num(take(&mut kv, "samples"), 5000.0)?,
            log_base: match take(&mut kv, "log_base") {
                Some((_, v)) => LogBase::parse(&v)?,
                None => LogBase::default(),
            },
            output: take(&mut kv, "output").map(|(_, v)| path(&v)),
        };
        if let Some((k, (line, _))) = kv.into_iter().next() {
            return Err(Error::parse(line, format!("unknown key {k:?}")));
        }
        if cfg.horizon == 0 || cfg.agents == 0 || cfg.episodes == 0 {
            return Err(Error::InvalidArgument("horizon, agents and episodes must be positive".into()));
        }
        if cfg.rollout.trajectories_per_leaf == 0 || cfg.rollout.truncation == 0 {
            return Err(Error::InvalidArgument("rollout trajectories and truncation must be positive".into()));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

/// Loads the graph, demand model and weights named by `cfg`, runs every
/// policy on shared episodes, and writes `results.csv`, `episodes.csv` and
/// `summary.txt` when an output directory is set.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultTable> {
    let graph = load_graph(open(&cfg.graph)?)?;
    let model = load_model(open(&cfg.demand)?)?;
    let mut suite = PolicySuite::new(model.clone(), cfg.rollout);
    suite.tss_samples = cfg.tss_samples;
    if cfg.policies.iter().any(|k| k.needs_weights()) {
        let path = cfg.weights.as_ref().ok_or_else(|| Error::MissingWeights("gnn / online-play".into()))?;
        suite = suite.with_approximator(Arc::new(ApproximatorPolicy::load(path, &graph)?));
    }
    let episodes = sample_episodes(&graph, &model, cfg.agents, cfg.horizon, cfg.episodes, cfg.seed)?;
    let table = run_suite(&graph, &suite, &cfg.policies, &episodes, cfg.horizon)?;
    if let Some(dir) = &cfg.output {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("results.csv"), table.to_csv())?;
        std::fs::write(dir.join("episodes.csv"), table.episodes_csv())?;
        std::fs::write(dir.join("summary.txt"), table.summary())?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Switching
// ---------------------------------------------------------------------------

/// A trained approximator together with the demand it was trained on.
#[derive(Clone)]
pub struct LibraryEntry {
    pub label: String,
    pub model: DemandModel,
    pub policy: Arc<ApproximatorPolicy>,
    pub set: AmbiguitySet,
}

impl HasAmbiguitySet for LibraryEntry {
    fn ambiguity_set(&self) -> &AmbiguitySet {
        &self.set
    }
}

/// Reads a manifest of `label demand-model-file weights-file` lines.
pub fn load_library(manifest: &Path, graph: &StreetGraph, q: f64, samples: f64, base: LogBase) -> Result<Vec<LibraryEntry>> {
    let text = std::fs::read_to_string(manifest)?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [label, model, weights] = parts[..] else {
            return Err(Error::parse(i + 1, "expected: label demand-model-file weights-file"));
        };
        let model = load_model(open(&dir.join(model))?)?;
        let policy = Arc::new(ApproximatorPolicy::load(&dir.join(weights), graph)?.named(format!("gnn-{label}")));
        let set = AmbiguitySet::from_reference(model.eta.clone(), q, samples, base)?;
        out.push(LibraryEntry { label: label.to_string(), model, policy, set });
    }
    if out.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwitchingConfig {
    pub agents: usize,
    pub horizon: u32,
    pub episodes: usize,
    pub seed: u64,
    pub rollout: RolloutConfig,
    /// Length of the trailing window the current demand is estimated from.
    pub history_minutes: u32,
    pub max_count: u32,
    /// Also evaluate plain rollout each hour.
    pub with_rollout: bool,
}

impl SwitchingConfig {
    pub fn new(agents: usize, horizon: u32, episodes: usize, seed: u64, rollout: RolloutConfig) -> Self {
        Self { agents, horizon, episodes, seed, rollout, history_minutes: 60, max_count: DEFAULT_MAX_COUNT, with_rollout: true }
    }
}

#[derive(Debug, Clone)]
pub struct HourReport {
    pub hour: usize,
    pub estimated_eta: CategoricalDistribution,
    /// Distance from the estimate to the reference of the model active
    /// before the check.
    pub distance: f64,
    pub active_before: String,
    pub active_after: String,
    pub switched: bool,
    pub fixed_label: String,
    pub switching: Vec<u64>,
    pub fixed: Vec<u64>,
    pub rollout: Option<Vec<u64>>,
}

#[derive(Debug, Clone)]
pub struct SwitchingReport {
    pub hours: Vec<HourReport>,
}

impl SwitchingReport {
    fn all(&self, f: impl Fn(&HourReport) -> Option<&Vec<u64>>) -> Vec<u64> {
        self.hours.iter().filter_map(f).flatten().copied().collect()
    }

    pub fn switching_costs(&self) -> Vec<u64> {
        self.all(|h| Some(&h.switching))
    }

    pub fn fixed_costs(&self) -> Vec<u64> {
        self.all(|h| Some(&h.fixed))
    }

    pub fn rollout_costs(&self) -> Vec<u64> {
        self.all(|h| h.rollout.as_ref())
    }

    /// `(fixed - switching) / fixed` over all evaluated episodes.
    pub fn relative_improvement(&self) -> f64 {
        let f: u64 = self.fixed_costs().iter().sum();
        let s: u64 = self.switching_costs().iter().sum();
        if f == 0 {
            0.0
        } else {
            (f as f64 - s as f64) / f as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "hour,distance,active_before,active_after,switched,mean_switching,mean_fixed,mean_rollout\n",
        );
        for h in &self.hours {
            let m = |c: &[u64]| mean(&c.iter().map(|&x| x as f64).collect::<Vec<_>>());
            let r = h.rollout.as_ref().map_or("".to_string(), |c| format!("{:.4}", m(c)));
            let _ = writeln!(
                out,
                "{},{:.4},{},{},{},{:.4},{:.4},{}",
                h.hour,
                h.distance,
                h.active_before,
                h.active_after,
                h.switched,
                m(&h.switching),
                m(&h.fixed),
                r
            );
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for h in &self.hours {
            let _ = writeln!(
                out,
                "hour {}: distance {:.3} from {}; active {}{}",
                h.hour,
                h.distance,
                h.active_before,
                h.active_after,
                if h.switched { " (switched)" } else { "" }
            );
        }
        let f = |c: Vec<u64>| mean(&c.iter().map(|&x| x as f64).collect::<Vec<_>>());
        let _ = writeln!(out, "online play with switching: {:.3}", f(self.switching_costs()));
        let _ = writeln!(out, "online play without switching: {:.3}", f(self.fixed_costs()));
        if !self.rollout_costs().is_empty() {
            let _ = writeln!(out, "rollout: {:.3}", f(self.rollout_costs()));
        }
        let gap = paired_gap(&self.fixed_costs(), &self.switching_costs());
        let _ = writeln!(
            out,
            "relative improvement of switching: {:.1}% (paired gap {:.3} +- {:.3})",
            100.0 * self.relative_improvement(),
            gap.mean,
            gap.std_error
        );
        out
    }
}

/// Online play with and without approximator switching under an hourly
/// demand schedule. `schedule[0]` generates the history before the first
/// evaluated hour; hour `h >= 1` is evaluated under `schedule[h]`.
///
/// At the start of each evaluated hour, the arrival distribution is
/// estimated from a realization of the previous hour (shared by all
/// episodes) and [`select_model`] picks the approximator. Lookahead in every
/// arm simulates the hour's actual demand model, so the arms differ only in
/// the approximator used as base policy.
pub fn run_switching_experiment(
    graph: &StreetGraph,
    library: &[LibraryEntry],
    initial_active: usize,
    schedule: &[DemandModel],
    cfg: &SwitchingConfig,
) -> Result<SwitchingReport> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if schedule.len() < 2 {
        return Err(Error::InvalidArgument("the schedule needs a history hour and at least one evaluated hour".into()));
    }
    let mut active = initial_active;
    let mut hours = Vec::new();
    for h in 1..schedule.len() {
        let history = ScriptedArrivals::sample(&schedule[h - 1], cfg.history_minutes, derive_seed(cfg.seed, &[TAG_HISTORY, h as u64]))?;
        let estimated = estimate_eta(&history.to_log(), cfg.history_minutes, cfg.max_count)?;
        let distance = wasserstein1(&estimated, &library[active].set.reference);
        let sel = select_model(library, active, &estimated)?;
        let before = library[active].label.clone();
        active = sel.index;
        log::info!("hour {h}: distance {distance:.3}, active {} -> {}", before, library[active].label);

        let model = &schedule[h];
        let episodes = sample_episodes(graph, model, cfg.agents, cfg.horizon, cfg.episodes, derive_seed(cfg.seed, &[h as u64]))?;
        let run = |entry: &LibraryEntry| -> Result<Vec<u64>> {
            let p = online_play_policy(entry.policy.clone(), cfg.rollout, ArrivalModel::Stochastic(model.clone()));
            evaluate_policy(graph, &p, &episodes, cfg.horizon)
        };
        let switching = run(&library[active])?;
        let fixed = if active == initial_active { switching.clone() } else { run(&library[initial_active])? };
        let rollout = if cfg.with_rollout {
            let p = rollout_policy(cfg.rollout, ArrivalModel::Stochastic(model.clone()));
            Some(evaluate_policy(graph, &p, &episodes, cfg.horizon)?)
        } else {
            None
        };
        hours.push(HourReport {
            hour: h,
            estimated_eta: estimated,
            distance,
            active_before: before,
            active_after: library[active].label.clone(),
            switched: sel.switched,
            fixed_label: library[initial_active].label.clone(),
            switching,
            fixed,
            rollout,
        });
    }
    Ok(SwitchingReport { hours })
}

// ---------------------------------------------------------------------------
// Trace audit
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuditReport {
    pub requests: usize,
    pub served: usize,
    /// Sum over requests of `pickup - arrival`, or `horizon + 1 - arrival`
    /// when never picked up.
    pub total_wait: u64,
}

/// Recomputes the episode cost from per-request arrival and pickup minutes
/// and checks it minute by minute against the recorded stage costs.
pub fn audit_trace(trace: &Trace) -> Result<AuditReport> {
    let mut arrival: BTreeMap<u64, u32> = BTreeMap::new();
    let mut pickup: BTreeMap<u64, u32> = BTreeMap::new();
    for s in &trace.steps {
        for r in &s.arrivals {
            arrival.insert(r.id, r.arrival);
        }
        for &(_, id) in &s.pickups {
            if pickup.insert(id, s.minute).is_some() {
                return Err(Error::InvalidState(format!("request {id} picked up twice")));
            }
            if !arrival.contains_key(&id) {
                return Err(Error::InvalidState(format!("request {id} picked up before arriving")));
            }
        }
    }
    let end = trace.horizon + 1;
    let mut running_recorded = 0u64;
    let mut running_recomputed = 0u64;
    for s in &trace.steps {
        let k = s.minute;
        let outstanding = arrival
            .iter()
            .filter(|&(id, &a)| a <= k && pickup.get(id).map_or(true, |&p| p > k))
            .count() as u64;
        running_recorded += s.stage_cost;
        running_recomputed += outstanding;
        if running_recorded != running_recomputed {
            return Err(Error::AuditMismatch { minute: k, recomputed: running_recomputed, recorded: running_recorded });
        }
    }
    let total_wait: u64 = arrival
        .iter()
        .map(|(id, &a)| (pickup.get(id).copied().unwrap_or(end).min(end) - a.min(end)) as u64)
        .sum();
    if total_wait != trace.total_cost || running_recorded != trace.total_cost {
        return Err(Error::AuditMismatch { minute: trace.horizon, recomputed: total_wait, recorded: trace.total_cost });
    }
    Ok(AuditReport { requests: arrival.len(), served: pickup.len(), total_wait })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demand::table_i;
    use crate::dynamics::{Control, Request, TraceStep};

    fn medium(n: usize) -> DemandModel {
        DemandModel::with_uniform_locations("medium", table_i::medium(), n).unwrap()
    }

    #[test]
    fn single_policy_has_undefined_normalization() {
        let t = ResultTable::new(vec![("greedy".into(), vec![3, 5])]);
        assert_eq!(t.rows[0].normalized, None);
        assert!(t.to_csv().contains("undefined"));
    }

    #[test]
    fn two_point_normalization() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let episodes = sample_episodes(&g, &medium(9), 2, 15, 6, 4).unwrap();
        let suite = PolicySuite::new(medium(9), RolloutConfig::desk());
        let t = run_suite(&g, &suite, &[PolicyKind::Greedy, PolicyKind::Oracle], &episodes, 15).unwrap();
        let greedy = t.get("greedy").unwrap();
        let oracle = t.get("oracle").unwrap();
        if greedy.mean > oracle.mean {
            assert_eq!(greedy.normalized, Some(1.0));
            assert_eq!(oracle.normalized, Some(0.0));
        }
        for (o, g) in oracle.costs.iter().zip(&greedy.costs) {
            assert!(o <= g);
        }
        assert_eq!(t.oracle_exact, Some(6));
    }

    #[test]
    fn normalized_values_span_unit_interval() {
        let t = ResultTable::new(vec![("a".into(), vec![10, 12]), ("b".into(), vec![4, 6]), ("c".into(), vec![7, 9])]);
        assert_eq!(t.get("a").unwrap().normalized, Some(1.0));
        assert_eq!(t.get("b").unwrap().normalized, Some(0.0));
        assert_eq!(t.get("c").unwrap().normalized, Some(0.5));
        assert_eq!((t.min, t.max), (5.0, 11.0));
    }

    #[test]
    fn missing_weights_are_reported() {
        let suite = PolicySuite::new(medium(9), RolloutConfig::desk());
        assert!(matches!(suite.build(PolicyKind::OnlinePlay), Err(Error::MissingWeights(_))));
        assert!(matches!(suite.build(PolicyKind::Gnn), Err(Error::MissingWeights(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for k in PolicyKind::ALL {
            assert_eq!(k.name().parse::<PolicyKind>().unwrap(), k);
        }
        assert_eq!(
            parse_policy_list("greedy, rollout,oracle").unwrap(),
            vec![PolicyKind::Greedy, PolicyKind::Rollout, PolicyKind::Oracle]
        );
        assert!(parse_policy_list("greedy,mcts").is_err());
    }

    #[test]
    fn paired_episodes_are_deterministic() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let a = sample_episodes(&g, &medium(9), 2, 20, 5, 11).unwrap();
        let b = sample_episodes(&g, &medium(9), 2, 20, 5, 11).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.initial, y.initial);
            assert_eq!(x.arrivals, y.arrivals);
        }
        let suite = PolicySuite::new(medium(9), RolloutConfig { trajectories_per_leaf: 8, truncation: 3 });
        let kinds = [PolicyKind::Greedy, PolicyKind::Rollout, PolicyKind::InstAssign];
        let t1 = run_suite(&g, &suite, &kinds, &a, 20).unwrap();
        let t2 = run_suite(&g, &suite, &kinds, &b, 20).unwrap();
        assert_eq!(t1.to_csv(), t2.to_csv());
        assert_eq!(t1.episodes_csv(), t2.episodes_csv());
    }

    #[test]
    fn config_parses_with_defaults() {
        let cfg = ExperimentConfig::parse(
            "# desk run\ngraph = g.txt\ndemand = m.txt\npolicies = greedy,rollout\nagents = 2\nhorizon = 30\ntrajectories = 128\ntruncation = 5\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(cfg.graph, Path::new("/data/g.txt"));
        assert_eq!(cfg.agents, 2);
        assert_eq!(cfg.episodes, 50);
        assert_eq!(cfg.rollout, RolloutConfig { trajectories_per_leaf: 128, truncation: 5 });
        assert!(ExperimentConfig::parse("graph = g\ndemand = m\nbogus = 1\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("graph = g\ndemand = m\nagents = 0\n", Path::new(".")).is_err());
        assert!(ExperimentConfig::parse("graph = g\n", Path::new(".")).is_err());
    }

    fn step(minute: u32, arrivals: Vec<Request>, pickups: Vec<(usize, u64)>, stage_cost: u64) -> TraceStep {
        TraceStep {
            minute,
            arrivals,
            locations: vec![0],
            timers: vec![0],
            controls: vec![Control::Stay],
            pickups,
            outstanding_before: 0,
            stage_cost,
        }
    }

    #[test]
    fn audit_of_empty_trace_is_zero() {
        let t = Trace { horizon: 3, agents: 1, total_cost: 0, steps: (1..=3).map(|k| step(k, vec![], vec![], 0)).collect() };
        assert_eq!(audit_trace(&t).unwrap().total_wait, 0);
    }

    #[test]
    fn audit_counts_one_request_by_hand() {
        // Arrives at 1, picked up at 3: outstanding after minutes 1 and 2.
        let steps = vec![
            step(1, vec![Request::new(0, 1, 0, 1)], vec![], 1),
            step(2, vec![], vec![], 1),
            step(3, vec![], vec![(0, 0)], 0),
        ];
        let t = Trace { horizon: 3, agents: 1, total_cost: 2, steps };
        let r = audit_trace(&t).unwrap();
        assert_eq!((r.requests, r.served, r.total_wait), (1, 1, 2));
        let mut bad = t.clone();
        bad.steps[1].stage_cost = 0;
        bad.total_cost = 1;
        assert!(matches!(audit_trace(&bad), Err(Error::AuditMismatch { minute: 2, .. })));
    }

    #[test]
    fn simulator_traces_pass_the_audit() {
        let g = StreetGraph::grid(3, 3).unwrap();
        let episodes = sample_episodes(&g, &DemandModel::with_uniform_locations("h", table_i::high(), 9).unwrap(), 2, 25, 10, 2).unwrap();
        for e in &episodes {
            let out = run_episode(&g, &e.initial, &Greedy, &ArrivalModel::Scripted(e.arrivals.clone()), 25, e.seed).unwrap();
            assert_eq!(audit_trace(&out.trace).unwrap().total_wait, out.total_cost);
        }
    }
}
