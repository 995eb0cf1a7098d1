//! Demand models: categorical distributions over requests-per-minute, pickup
//! node and dropoff node, with estimation from request logs, sampling, and a
//! text serialization.

use std::fmt::Write as _;
use std::io::BufRead;

use rand::Rng;

use crate::dynamics::Request;
use crate::error::{Error, Result};
use crate::graph::{Node, StreetGraph};

/// Tolerance on the probability sum.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Default maximum number of requests per minute.
pub const DEFAULT_MAX_COUNT: u32 = 6;

/// Attempts at drawing a dropoff node different from the pickup node.
pub const DROPOFF_ATTEMPTS: usize = 100;

/// Finite distribution over sorted, distinct integer atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDistribution {
    atoms: Vec<u32>,
    probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl CategoricalDistribution {
    pub fn new(atoms: Vec<u32>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("empty support".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        if atoms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidDistribution("atoms must be distinct and sorted".into()));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidDistribution(format!("bad probability {p}")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!("probabilities sum to {total}")));
        }
        let cumulative = probs
            .iter()
            .scan(0.0, |acc, p| {
                *acc += p;
                Some(*acc)
            })
            .collect();
        Ok(Self { atoms, probs, cumulative })
    }

    /// Distribution over `0..probs.len()`.
    pub fn over_range(probs: Vec<f64>) -> Result<Self> {
        Self::new((0..probs.len() as u32).collect(), probs)
    }

    pub fn uniform(size: usize) -> Result<Self> {
        Self::over_range(vec![1.0 / size as f64; size])
    }

    pub fn point_mass(atom: u32) -> Self {
        Self::new(vec![atom], vec![1.0]).expect("single atom with mass one")
    }

    pub fn atoms(&self) -> &[u32] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn prob_of(&self, atom: u32) -> f64 {
        self.atoms.binary_search(&atom).map(|i| self.probs[i]).unwrap_or(0.0)
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(&a, &p)| a as f64 * p).sum()
    }

    /// Largest minus smallest atom of the declared support.
    pub fn diameter(&self) -> u32 {
        self.atoms[self.atoms.len() - 1] - self.atoms[0]
    }

    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        let total = self.cumulative[self.cumulative.len() - 1];
        let u = rng.gen::<f64>() * total;
        let idx = self.cumulative.partition_point(|&c| c <= u);
        self.atoms[idx.min(self.atoms.len() - 1)]
    }
}

/// Three-part demand model: arrivals per minute, pickup node, dropoff node.
#[derive(Debug, Clone, PartialEq)]
pub struct DemandModel {
    pub label: String,
    pub eta: CategoricalDistribution,
    pub pickup: CategoricalDistribution,
    pub dropoff: CategoricalDistribution,
}

impl DemandModel {
    pub fn new(
        label: impl Into<String>,
        eta: CategoricalDistribution,
        pickup: CategoricalDistribution,
        dropoff: CategoricalDistribution,
    ) -> Self {
        Self { label: label.into(), eta, pickup, dropoff }
    }

    /// Arrival distribution `eta` with uniform pickup and dropoff nodes.
    pub fn with_uniform_locations(
        label: impl Into<String>,
        eta: CategoricalDistribution,
        node_count: usize,
    ) -> Result<Self> {
        let uniform = CategoricalDistribution::uniform(node_count)?;
        Ok(Self::new(label, eta, uniform.clone(), uniform))
    }

    /// Same location model, different arrival distribution.
    pub fn with_eta(&self, label: impl Into<String>, eta: CategoricalDistribution) -> Self {
        Self::new(label, eta, self.pickup.clone(), self.dropoff.clone())
    }

    /// Checks that location atoms are nodes of `graph`.
    pub fn check_graph(&self, graph: &StreetGraph) -> Result<()> {
        for dist in [&self.pickup, &self.dropoff] {
            if let Some(&a) = dist.atoms().last() {
                graph.check_node(a as Node)?;
            }
        }
        Ok(())
    }

    /// Probability that a minute has no arrivals.
    pub fn idle_probability(&self) -> f64 {
        self.eta.prob_of(0)
    }
}

/// Draws the requests entering at `minute`: a count from `eta`, then
/// independent pickup and dropoff nodes per request. A dropoff equal to its
/// pickup is redrawn. Returned requests carry `id = 0`.
pub fn sample_minute<R: Rng + ?Sized>(
    model: &DemandModel,
    rng: &mut R,
    minute: u32,
) -> Result<Vec<Request>> {
    let count = model.eta.sample(rng) as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let pickup = model.pickup.sample(rng) as Node;
        let mut dropoff = model.dropoff.sample(rng) as Node;
        let mut attempts = 1;
        while dropoff == pickup {
            if attempts == DROPOFF_ATTEMPTS {
                return Err(Error::DegenerateTrip { pickup: pickup + 1, attempts });
            }
            dropoff = model.dropoff.sample(rng) as Node;
            attempts += 1;
        }
        out.push(Request::new(0, pickup, dropoff, minute));
    }
    Ok(out)
}

/// Arrival-count distributions reported for the three reference demands.
pub mod table_i {
    use super::CategoricalDistribution;

    pub const LOW: [f64; 7] = [0.95, 0.05, 0.0, 0.0, 0.0, 0.0, 0.0];
    pub const MEDIUM: [f64; 7] = [0.85, 0.15, 0.0, 0.0, 0.0, 0.0, 0.0];
    pub const HIGH: [f64; 7] = [0.82, 0.06, 0.06, 0.02, 0.02, 0.0, 0.02];

    pub fn low() -> CategoricalDistribution {
        CategoricalDistribution::over_range(LOW.to_vec()).expect("valid row")
    }

    pub fn medium() -> CategoricalDistribution {
        CategoricalDistribution::over_range(MEDIUM.to_vec()).expect("valid row")
    }

    pub fn high() -> CategoricalDistribution {
        CategoricalDistribution::over_range(HIGH.to_vec()).expect("valid row")
    }
}

// ---------------------------------------------------------------------------
// Request logs and estimation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEntry {
    pub minute: u32,
    pub pickup: Node,
    pub dropoff: Node,
}

/// Historical requests, sorted by minute.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestLog {
    entries: Vec<LogEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocationKind {
    Pickup,
    Dropoff,
}

impl RequestLog {
    pub fn new(mut entries: Vec<LogEntry>) -> Result<Self> {
        if let Some(e) = entries.iter().find(|e| e.minute == 0) {
            return Err(Error::InvalidArgument(format!(
                "log minutes start at 1, found entry {e:?}"
            )));
        }
        entries.sort_by_key(|e| e.minute);
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries of minutes `start..start + len`, re-based so `start` becomes 1.
    pub fn window(&self, start: u32, len: u32) -> RequestLog {
        let entries = self
            .entries
            .iter()
            .filter(|e| e.minute >= start && e.minute < start + len)
            .map(|e| LogEntry { minute: e.minute - start + 1, ..*e })
            .collect();
        RequestLog { entries }
    }

    /// Parses `minute,pickup,dropoff` lines with 1-based nodes. A leading
    /// header line and `#` comments are skipped.
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            if idx == 0 && t.starts_with(|c: char| c.is_ascii_alphabetic()) {
                continue;
            }
            let fields: Vec<&str> = t.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::parse(idx + 1, "expected minute,pickup,dropoff"));
            }
            let num = |s: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::parse(idx + 1, format!("bad number {s:?}")))
            };
            let (minute, pickup, dropoff) = (num(fields[0])?, num(fields[1])?, num(fields[2])?);
            if minute == 0 || pickup == 0 || dropoff == 0 {
                return Err(Error::parse(idx + 1, "minutes and nodes are 1-based"));
            }
            entries.push(LogEntry {
                minute: minute as u32,
                pickup: pickup as Node - 1,
                dropoff: dropoff as Node - 1,
            });
        }
        Self::new(entries)
    }

    pub fn read_str(text: &str) -> Result<Self> {
        Self::read(text.as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("minute,pickup,dropoff\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{}", e.minute, e.pickup + 1, e.dropoff + 1);
        }
        out
    }
}

/// Empirical distribution of the number of arrivals per minute over minutes
/// `1..=horizon`, support `0..=max_count`.
pub fn estimate_eta(log: &RequestLog, horizon: u32, max_count: u32) -> Result<CategoricalDistribution> {
    if horizon == 0 {
        return Err(Error::InvalidArgument("horizon must be at least one minute".into()));
    }
    let mut per_minute = vec![0usize; horizon as usize];
    for e in log.entries() {
        if e.minute < 1 || e.minute > horizon {
            return Err(Error::MinuteOutOfRange { minute: e.minute, horizon });
        }
        per_minute[e.minute as usize - 1] += 1;
    }
    let mut counts = vec![0usize; max_count as usize + 1];
    for (i, &c) in per_minute.iter().enumerate() {
        if c > max_count as usize {
            return Err(Error::TooManyArrivals { minute: i as u32 + 1, count: c, max: max_count });
        }
        counts[c] += 1;
    }
    let probs = counts.iter().map(|&c| c as f64 / horizon as f64).collect();
    CategoricalDistribution::over_range(probs)
}

/// Smoothed location distribution `(s_y + 1/|V|) / (1 + sum_j s_j)`, where
/// `s_y` counts log entries at node `y`. Every node gets positive mass.
pub fn estimate_location_dist(
    log: &RequestLog,
    graph: &StreetGraph,
    which: LocationKind,
) -> Result<CategoricalDistribution> {
    let n = graph.node_count();
    let mut counts = vec![0usize; n];
    for e in log.entries() {
        let node = match which {
            LocationKind::Pickup => e.pickup,
            LocationKind::Dropoff => e.dropoff,
        };
        graph.check_node(node)?;
        counts[node] += 1;
    }
    smoothed_from_counts(&counts)
}

pub(crate) fn smoothed_from_counts(counts: &[usize]) -> Result<CategoricalDistribution> {
    let n = counts.len() as f64;
    let total: usize = counts.iter().sum();
    let denom = 1.0 + total as f64;
    let probs = counts.iter().map(|&s| (s as f64 + 1.0 / n) / denom).collect();
    CategoricalDistribution::over_range(probs)
}

/// Estimates all three distributions from `log`.
pub fn estimate_model(
    log: &RequestLog,
    graph: &StreetGraph,
    horizon: u32,
    max_count: u32,
    label: impl Into<String>,
) -> Result<DemandModel> {
    Ok(DemandModel::new(
        label,
        estimate_eta(log, horizon, max_count)?,
        estimate_location_dist(log, graph, LocationKind::Pickup)?,
        estimate_location_dist(log, graph, LocationKind::Dropoff)?,
    ))
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

fn write_section(out: &mut String, name: &str, dist: &CategoricalDistribution, offset: u32) {
    out.push_str(name);
    out.push('\n');
    for (&a, &p) in dist.atoms().iter().zip(dist.probs()) {
        let _ = writeln!(out, "{} {:.16e}", a + offset, p);
    }
}

/// Serializes a model as labeled `ETA` / `PICKUP` / `DROPOFF` sections of
/// `atom probability` lines. Location atoms are written 1-based.
pub fn save_model(model: &DemandModel) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "LABEL {}", model.label);
    write_section(&mut out, "ETA", &model.eta, 0);
    write_section(&mut out, "PICKUP", &model.pickup, 1);
    write_section(&mut out, "DROPOFF", &model.dropoff, 1);
    out
}

pub fn load_model<R: BufRead>(reader: R) -> Result<DemandModel> {
    #[derive(Clone, Copy, PartialEq)]
    enum Section {
        None,
        Eta,
        Pickup,
        Dropoff,
    }
    let mut label = None;
    let mut section = Section::None;
    let mut data: [(Vec<u32>, Vec<f64>); 3] = Default::default();
    let mut seen = [false; 3];
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        if let Some(rest) = t.strip_prefix("LABEL") {
            label = Some(rest.trim().to_string());
            continue;
        }
        let next = match t {
            "ETA" => Some(Section::Eta),
            "PICKUP" => Some(Section::Pickup),
            "DROPOFF" => Some(Section::Dropoff),
            _ => None,
        };
        if let Some(s) = next {
            section = s;
            let slot = s as usize - 1;
            if seen[slot] {
                return Err(Error::parse(idx + 1, format!("duplicate section {t}")));
            }
            seen[slot] = true;
            continue;
        }
        if section == Section::None {
            return Err(Error::parse(idx + 1, "data line outside a section"));
        }
        let mut parts = t.split_whitespace();
        let (Some(a), Some(p), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::parse(idx + 1, "expected `atom probability`"));
        };
        let atom: u32 = a.parse().map_err(|_| Error::parse(idx + 1, format!("bad atom {a:?}")))?;
        let prob: f64 =
            p.parse().map_err(|_| Error::parse(idx + 1, format!("bad probability {p:?}")))?;
        let atom = if section == Section::Eta {
            atom
        } else {
            atom.checked_sub(1).ok_or_else(|| Error::parse(idx + 1, "nodes are 1-based"))?
        };
        let slot = &mut data[section as usize - 1];
        slot.0.push(atom);
        slot.1.push(prob);
    }
    let [eta, pickup, dropoff] = data;
    let build = |(atoms, probs): (Vec<u32>, Vec<f64>), name: &str| {
        CategoricalDistribution::new(atoms, probs)
            .map_err(|e| Error::InvalidDistribution(format!("{name}: {e}")))
    };
    Ok(DemandModel::new(
        label.unwrap_or_default(),
        build(eta, "ETA")?,
        build(pickup, "PICKUP")?,
        build(dropoff, "DROPOFF")?,
    ))
}

pub fn load_model_str(text: &str) -> Result<DemandModel> {
    load_model(text.as_bytes())
}
