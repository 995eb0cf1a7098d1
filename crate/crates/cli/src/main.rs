use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fleetroute::ambiguity::{q_valid_radius, wasserstein1, LogBase};
use fleetroute::approximator::{generate_training_set, load_samples, save_samples, train, ApproximatorPolicy, LabelConfig, TrainConfig};
use fleetroute::benchmarks::oracle_cost;
use fleetroute::demand::{estimate_model, load_model, save_model, table_i, CategoricalDistribution, DemandModel, RequestLog};
use fleetroute::dynamics::{run_episode, ArrivalModel, ScriptedArrivals, Trace};
use fleetroute::graph::{load_graph, StreetGraph};
use fleetroute::harness::{
    audit_trace, load_library, run_experiment, run_switching_experiment, sample_episodes, ExperimentConfig, PolicyKind,
    PolicySuite, SwitchingConfig,
};
use fleetroute::policy::RolloutConfig;

#[derive(Parser)]
#[command(name = "fleetroute", version, about = "Multiagent taxi routing with rollout and learned base policies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate a demand model from a request log.
    EstimateDemand {
        #[arg(long)]
        graph: PathBuf,
        /// CSV of minute,pickup,dropoff (1-based).
        #[arg(long)]
        log: PathBuf,
        /// Minutes covered by the log; defaults to the last logged minute.
        #[arg(long)]
        minutes: Option<u32>,
        #[arg(long, default_value_t = 6)]
        max_count: u32,
        #[arg(long, default_value = "estimated")]
        label: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label random states with rollout decisions.
    GenLabels {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        demand: PathBuf,
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train pickup and move nets on labeled decisions.
    Train {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        hidden: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Wasserstein distance between two arrival distributions. Each argument
    /// is a demand model file or one of `low`, `medium`, `high`.
    Wasserstein { a: String, b: String },
    /// Radius of the ambiguity set for confidence q.
    Radius {
        #[arg(long)]
        q: f64,
        #[arg(long, default_value_t = 5000.0)]
        samples: f64,
        #[arg(long, default_value_t = 6.0)]
        diameter: f64,
        #[arg(long, default_value = "10")]
        log_base: String,
    },
    /// Run one episode and write its trace.
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        demand: PathBuf,
        #[arg(long, default_value = "greedy")]
        policy: String,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 60)]
        horizon: u32,
        /// Scripted requests (same CSV as a request log) instead of sampled ones.
        #[arg(long)]
        requests: Option<PathBuf>,
        /// Comma-separated 1-based start nodes; random when omitted.
        #[arg(long)]
        start: Option<String>,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run the policies of an experiment config on paired episodes.
    Evaluate {
        config: PathBuf,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Online play with and without approximator switching under an hourly
    /// demand schedule.
    SwitchEval {
        #[arg(long)]
        graph: PathBuf,
        /// Lines of `label demand-model-file weights-file`.
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated demand model files; the first generates history only.
        #[arg(long)]
        schedule: String,
        /// Label of the initially active model; defaults to the first entry.
        #[arg(long)]
        initial: Option<String>,
        #[arg(long, default_value_t = 0.54)]
        q: f64,
        #[arg(long, default_value_t = 5000.0)]
        samples: f64,
        #[arg(long, default_value = "10")]
        log_base: String,
        #[arg(long, default_value_t = 3)]
        agents: usize,
        #[arg(long, default_value_t = 60)]
        horizon: u32,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[command(flatten)]
        rollout: RolloutArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute a trace's cost from request arrival and pickup minutes.
    Audit { trace: PathBuf },
}

#[derive(Args, Clone, Copy)]
struct RolloutArgs {
    /// Monte Carlo trajectories per candidate control.
    #[arg(long, default_value_t = 128)]
    trajectories: usize,
    /// Lookahead depth of each trajectory, in minutes.
    #[arg(long, default_value_t = 5)]
    truncation: u32,
}

impl From<RolloutArgs> for RolloutConfig {
    fn from(a: RolloutArgs) -> Self {
        RolloutConfig { trajectories_per_leaf: a.trajectories, truncation: a.truncation }
    }
}

fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn graph(path: &Path) -> Result<StreetGraph> {
    load_graph(reader(path)?).with_context(|| format!("reading graph {}", path.display()))
}

fn model(path: &Path) -> Result<DemandModel> {
    load_model(reader(path)?).with_context(|| format!("reading demand model {}", path.display()))
}

fn eta(arg: &str) -> Result<CategoricalDistribution> {
    Ok(match arg {
        "low" => table_i::low(),
        "medium" => table_i::medium(),
        "high" => table_i::high(),
        path => model(Path::new(path))?.eta,
    })
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::EstimateDemand { graph: g, log, minutes, max_count, label, out } => {
            let g = graph(&g)?;
            let log = RequestLog::read(reader(&log)?)?;
            let minutes = minutes.or_else(|| log.entries().last().map(|e| e.minute)).context("empty request log")?;
            let m = estimate_model(&log, &g, minutes, max_count, label)?;
            write_or_print(out.as_deref(), &save_model(&m))?;
        }
        Command::GenLabels { graph: g, demand, samples, agents, rollout, seed, out } => {
            let g = graph(&g)?;
            let m = model(&demand)?;
            let mut cfg = LabelConfig::new(samples, agents, seed);
            cfg.rollout = rollout.into();
            let labels = generate_training_set(&g, &m, &cfg)?;
            save_samples(&out, &labels)?;
            eprintln!("wrote {} labels to {}", labels.len(), out.display());
        }
        Command::Train { graph: g, labels, epochs, hidden, seed, out } => {
            let g = graph(&g)?;
            let samples = load_samples(&labels)?;
            let cfg = TrainConfig { epochs, hidden, seed, ..TrainConfig::default() };
            let nets = train(&g, &samples, &cfg)?;
            let last = |c: &[f64]| c.last().copied().unwrap_or(f64::NAN);
            eprintln!("final loss: pickup {:.4}, move {:.4}", last(&nets.pickup_curve), last(&nets.move_curve));
            ApproximatorPolicy::from_trained(&g, nets)?.save(&out, &g)?;
        }
        Command::Wasserstein { a, b } => {
            println!("{:.6}", wasserstein1(&eta(&a)?, &eta(&b)?));
        }
        Command::Radius { q, samples, diameter, log_base } => {
            println!("{:.6}", q_valid_radius(q, samples, diameter, LogBase::parse(&log_base)?)?);
        }
        Command::Simulate {
            graph: g,
            demand,
            policy,
            agents,
            horizon,
            requests,
            start,
            weights,
            rollout,
            seed,
            trace,
        } => {
            let g = graph(&g)?;
            let m = model(&demand)?;
            let kind: PolicyKind = policy.parse()?;
            let mut episode = sample_episodes(&g, &m, agents, horizon, 1, seed)?.remove(0);
            if let Some(path) = requests {
                let log = RequestLog::read(reader(&path)?)?.window(1, horizon);
                episode.arrivals = ScriptedArrivals::from_log(&log, horizon)?;
            }
            if let Some(s) = start {
                let nodes: Vec<usize> = s
                    .split(',')
                    .map(|t| t.trim().parse::<usize>().ok().and_then(|v| v.checked_sub(1)))
                    .collect::<Option<_>>()
                    .context("start nodes are 1-based integers")?;
                if nodes.len() != agents {
                    bail!("{} start nodes given for {agents} agents", nodes.len());
                }
                episode.initial.locations = nodes;
                episode.initial.validate(&g)?;
            }
            if kind == PolicyKind::Oracle {
                let r = oracle_cost(&episode.initial, &episode.arrivals, &g, horizon)?;
                println!("{} {}", r.cost, if r.exact { "optimal" } else { "upper-bound" });
                return Ok(());
            }
            let mut suite = PolicySuite::new(m, rollout.into());
            if kind.needs_weights() {
                let w = weights.context("gnn and online-play need --weights")?;
                suite = suite.with_approximator(Arc::new(ApproximatorPolicy::load(&w, &g)?));
            }
            let p = suite.build(kind)?;
            let out = run_episode(&g, &episode.initial, &*p, &ArrivalModel::Scripted(episode.arrivals), horizon, episode.seed)?;
            println!("{}", out.total_cost);
            if let Some(path) = trace {
                std::fs::write(&path, out.trace.to_csv())?;
            }
        }
        Command::Evaluate { config, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            print!("{}", run_experiment(&cfg)?.summary());
        }
        Command::SwitchEval {
            graph: g,
            manifest,
            schedule,
            initial,
            q,
            samples,
            log_base,
            agents,
            horizon,
            episodes,
            rollout,
            seed,
            out,
        } => {
            let g = graph(&g)?;
            let library = load_library(&manifest, &g, q, samples, LogBase::parse(&log_base)?)?;
            let schedule: Vec<DemandModel> = schedule.split(',').map(|p| model(Path::new(p.trim()))).collect::<Result<_>>()?;
            let initial = match initial {
                None => 0,
                Some(l) => library.iter().position(|e| e.label == l).with_context(|| format!("no library entry {l:?}"))?,
            };
            let cfg = SwitchingConfig::new(agents, horizon, episodes, seed, rollout.into());
            let report = run_switching_experiment(&g, &library, initial, &schedule, &cfg)?;
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("switching.csv"), report.to_csv())?;
                std::fs::write(dir.join("summary.txt"), report.summary())?;
            }
            print!("{}", report.summary());
        }
        Command::Audit { trace } => {
            let t = Trace::read(reader(&trace)?)?;
            let r = audit_trace(&t)?;
            println!("ok: {} requests, {} served, total wait {} minutes", r.requests, r.served, r.total_wait);
        }
    }
    Ok(())
}
