//! Order-1 Wasserstein distance over request-count distributions, ambiguity
//! sets with a confidence-based radius, and approximator switching.

use crate::demand::CategoricalDistribution;
use crate::error::{Error, Result};

/// Closed-form scalar optimal transport: the area between the two CDFs over
/// the merged support.
pub fn wasserstein1(p: &CategoricalDistribution, r: &CategoricalDistribution) -> f64 {
    let mut atoms: Vec<u32> = p.atoms().iter().chain(r.atoms()).copied().collect();
    atoms.sort_unstable();
    atoms.dedup();
    let (mut fp, mut fr) = (0.0, 0.0);
    let mut total = 0.0;
    for w in atoms.windows(2) {
        fp += p.prob_of(w[0]);
        fr += r.prob_of(w[0]);
        total += (fp - fr).abs() * (w[1] - w[0]) as f64;
    }
    total
}

/// Logarithm used inside the radius bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogBase {
    #[default]
    Ten,
    Natural,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Ten => x.log10(),
            LogBase::Natural => x.ln(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim().to_ascii_lowercase().as_str() {
            "10" | "ten" | "log10" => Ok(LogBase::Ten),
            "e" | "ln" | "natural" => Ok(LogBase::Natural),
            other => Err(Error::InvalidArgument(format!("unknown log base {other:?}; use 10 or e"))),
        }
    }
}

/// Smallest radius for which the empirical distribution from `samples`
/// observations lies in the ball with probability at least `q`:
/// `(B + 0.75) (L / X + 2 sqrt(L / X))` with `L = -log(1 - q)`.
///
/// The default base-10 logarithm gives 0.1113 for `(0.54, 5000, 6)`; the
/// published figure for the same inputs is 0.114, and the natural logarithm
/// gives 0.1693.
pub fn q_valid_radius(q: f64, samples: f64, diameter: f64, base: LogBase) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::InvalidArgument(format!("confidence q = {q} must lie in (0, 1)")));
    }
    if !(samples >= 1.0) {
        return Err(Error::InvalidArgument(format!("sample count {samples} must be at least 1")));
    }
    if !(diameter > 0.0) || !diameter.is_finite() {
        return Err(Error::InvalidArgument(format!("support diameter {diameter} must be positive")));
    }
    let l = -base.log(1.0 - q) / samples;
    Ok((diameter + 0.75) * (l + 2.0 * l.sqrt()))
}

/// Wasserstein ball around a reference arrival distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguitySet {
    pub reference: CategoricalDistribution,
    pub radius: f64,
    pub q: f64,
    pub samples: f64,
    pub diameter: f64,
}

impl AmbiguitySet {
    /// Ball whose radius is the bound for `(q, samples, diameter)`.
    pub fn new(reference: CategoricalDistribution, q: f64, samples: f64, diameter: f64, base: LogBase) -> Result<Self> {
        let radius = q_valid_radius(q, samples, diameter, base)?;
        Ok(Self { reference, radius, q, samples, diameter })
    }

    /// Ball with the diameter taken from the reference support.
    pub fn from_reference(reference: CategoricalDistribution, q: f64, samples: f64, base: LogBase) -> Result<Self> {
        let diameter = reference.diameter() as f64;
        Self::new(reference, q, samples, diameter, base)
    }

    /// Replaces the radius.
    pub fn with_radius(mut self, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) {
            return Err(Error::InvalidArgument(format!("radius {radius} must be nonnegative")));
        }
        self.radius = radius;
        Ok(self)
    }

    pub fn distance(&self, current: &CategoricalDistribution) -> f64 {
        wasserstein1(current, &self.reference)
    }

    pub fn in_region(&self, current: &CategoricalDistribution) -> bool {
        self.distance(current) < self.radius
    }
}

/// Library entries expose the ambiguity set of their training demand.
pub trait HasAmbiguitySet {
    fn ambiguity_set(&self) -> &AmbiguitySet;
}

impl HasAmbiguitySet for AmbiguitySet {
    fn ambiguity_set(&self) -> &AmbiguitySet {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    pub index: usize,
    /// Raised whenever the current demand left the active entry's region,
    /// even if the closest entry is the active one.
    pub switched: bool,
}

/// Keeps `active` while `current` lies inside its region; otherwise picks
/// the entry whose reference is closest to `current` (ties by library
/// order).
pub fn select_model<E: HasAmbiguitySet>(library: &[E], active: usize, current: &CategoricalDistribution) -> Result<Selection> {
    if library.is_empty() {
        return Err(Error::EmptyLibrary);
    }
    if active >= library.len() {
        return Err(Error::InvalidArgument(format!("active entry {active} outside a library of {}", library.len())));
    }
    if library[active].ambiguity_set().in_region(current) {
        return Ok(Selection { index: active, switched: false });
    }
    let mut best = (f64::INFINITY, 0);
    for (k, e) in library.iter().enumerate() {
        let d = e.ambiguity_set().distance(current);
        if d < best.0 {
            best = (d, k);
        }
    }
    Ok(Selection { index: best.1, switched: true })
}
