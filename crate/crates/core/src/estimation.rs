//! Offline logs from the behavior measure, count-based simulator fits, and
//! their convergence to the exact behavior-conditional kernel.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::env::{
    derive_seed, rng_from_seed, sample_index, sample_trajectory_with, AgentPolicy, Alphabet, EnvironmentSpec, History,
    Shape, Symbol, Trajectory,
};
use crate::error::{Error, Result};
use crate::labeling::PostHocLabeler;
use crate::simulators::{compose, trajectory_conditioned_kernel, ComposedMeasure, Control, SimulatorKernel};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OfflineRecord {
    pub trajectory: Trajectory,
    pub label: Symbol,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub policy: String,
    pub labeler: String,
    pub seed: u64,
    pub samples: usize,
}

/// `(τ, ẑ)` pairs with `τ ∼ P^{π_b}` and `ẑ ∼ P_L(· | τ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub shape: Shape,
    pub controls: Alphabet,
    pub records: Vec<OfflineRecord>,
    pub provenance: Provenance,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One record per line: comma-joined trajectory symbols, a tab, the label.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}", self.shape.key(r.trajectory.history()), self.controls.name(r.label));
        }
        out
    }

    pub fn from_text(shape: Shape, controls: Alphabet, text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (traj, label) = line
                .split_once('\t')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `<trajectory>\\t<label>`", i + 1)))?;
            let trajectory = shape.parse_trajectory(traj).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))?;
            let label = controls
                .index_of(label.trim())
                .ok_or_else(|| Error::Parse(format!("line {}: unknown label `{label}`", i + 1)))?;
            records.push(OfflineRecord { trajectory, label });
        }
        let samples = records.len();
        Ok(Self {
            shape,
            controls,
            records,
            provenance: Provenance { policy: String::new(), labeler: String::new(), seed: 0, samples },
        })
    }
}

pub fn sample_offline_logs(
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    labeler: &PostHocLabeler,
    samples: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    let mut rng = rng_from_seed(seed);
    let mut records = Vec::with_capacity(samples);
    for _ in 0..samples {
        let trajectory = sample_trajectory_with(spec, behavior, &mut rng)?;
        let label = sample_index(labeler.row(trajectory.history())?, &mut rng);
        records.push(OfflineRecord { trajectory, label });
    }
    Ok(OfflineDataset {
        shape: spec.shape().clone(),
        controls: labeler.controls().clone(),
        records,
        provenance: Provenance {
            policy: behavior.tag().to_string(),
            labeler: labeler.name().to_string(),
            seed,
            samples,
        },
    })
}

/// Per-context user-symbol counts with additive smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedKernel {
    shape: Shape,
    controls: Alphabet,
    alpha: f64,
    counts: HashMap<(Symbol, History), Vec<u64>>,
}

pub fn fit_conditional_kernel(dataset: &OfflineDataset, alpha: f64) -> Result<FittedKernel> {
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Invalid(format!("smoothing must be a finite non-negative number, got {alpha}")));
    }
    let width = dataset.shape.user.len();
    let mut counts: HashMap<(Symbol, History), Vec<u64>> = HashMap::new();
    for r in &dataset.records {
        for t in 1..=r.trajectory.horizon() {
            let h = r.trajectory.history().steps_prefix(t - 1);
            counts.entry((r.label, h)).or_insert_with(|| vec![0; width])[r.trajectory.user(t) as usize] += 1;
        }
    }
    Ok(FittedKernel { shape: dataset.shape.clone(), controls: dataset.controls.clone(), alpha, counts })
}

impl FittedKernel {
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn controls(&self) -> &Alphabet {
        &self.controls
    }

    pub fn counts(&self, z: Symbol, h: &History) -> Option<&[u64]> {
        self.counts.get(&(z, h.clone())).map(Vec::as_slice)
    }

    /// Contexts with at least one observation.
    pub fn seen_contexts(&self) -> usize {
        self.counts.len()
    }

    /// `(count + α) / (Σ counts + α|U|)`.
    pub fn row(&self, z: Symbol, h: &History) -> Result<Vec<f64>> {
        let width = self.shape.user.len();
        let zeros;
        let counts = match self.counts.get(&(z, h.clone())) {
            Some(c) => c.as_slice(),
            None => {
                zeros = vec![0; width];
                &zeros
            }
        };
        let total: u64 = counts.iter().sum();
        if total == 0 && self.alpha == 0.0 {
            return Err(Error::UnseenContext(format!("ẑ={} at [{}]", self.controls.name(z), self.shape.key(h))));
        }
        let denom = total as f64 + self.alpha * width as f64;
        Ok(counts.iter().map(|&c| (c as f64 + self.alpha) / denom).collect())
    }
}

/// Completed pre-step states of a weighting measure with their mass.
fn weighted_contexts(weighting: &ComposedMeasure<'_>) -> Result<Vec<(Symbol, History, f64)>> {
    let horizon = weighting.kernel().shape().horizon;
    Ok(weighting
        .states()?
        .into_iter()
        .filter(|s| !s.history.is_pre_action() && s.history.completed_steps() < horizon)
        .map(|s| (s.control, s.history, s.mass))
        .collect())
}

fn tv_over(fitted: &FittedKernel, exact: &SimulatorKernel, contexts: &[(Symbol, History, f64)]) -> Result<f64> {
    let horizon = exact.shape().horizon as f64;
    let mut total = 0.0;
    for (z, h, mass) in contexts {
        let fit = fitted.row(*z, h).map_err(|e| match e {
            Error::UnseenContext(m) => Error::SupportViolation(format!("fitted kernel has no row for {m}")),
            other => other,
        })?;
        let truth = exact.user_row(*z, h)?;
        let tv: f64 = 0.5 * fit.iter().zip(&truth).map(|(a, b)| (a - b).abs()).sum::<f64>();
        total += mass * tv;
    }
    Ok(total / horizon)
}

/// Mass-weighted row TV, averaged over the horizon so the result lies in `[0, 1]`.
pub fn tv_distance(fitted: &FittedKernel, exact: &SimulatorKernel, weighting: &ComposedMeasure<'_>) -> Result<f64> {
    tv_over(fitted, exact, &weighted_contexts(weighting)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub samples: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub iqr: f64,
    pub per_seed: Vec<f64>,
}

/// Type-7 sample quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and IQR of the TV distance to the exact behavior-conditional
/// kernel at each dataset size. Dataset `(seed, N)` is drawn with
/// `derive_seed(seed, N)`.
pub fn convergence_curve(
    spec: &EnvironmentSpec,
    behavior: &AgentPolicy,
    labeler: &PostHocLabeler,
    ladder: &[usize],
    seeds: &[u64],
    alpha: f64,
) -> Result<Vec<ConvergenceRow>> {
    if ladder.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Invalid("dataset sizes must be strictly increasing".into()));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::Invalid(format!("smoothing must be a finite non-negative number, got {alpha}")));
    }
    if ladder.is_empty() {
        return Ok(Vec::new());
    }
    if seeds.is_empty() {
        return Err(Error::Invalid("at least one seed is required".into()));
    }
    let exact = trajectory_conditioned_kernel(spec, behavior, labeler)?;
    let contexts = weighted_contexts(&compose(&exact, behavior, Control::FromPrior)?)?;
    let mut rows = Vec::new();
    for &n in ladder {
        let per_seed: Vec<f64> = seeds
            .par_iter()
            .map(|&seed| {
                let data = sample_offline_logs(spec, behavior, labeler, n, derive_seed(seed, n as u64))?;
                tv_over(&fit_conditional_kernel(&data, alpha)?, &exact, &contexts)
            })
            .collect::<Result<_>>()?;
        let mut sorted = per_seed.clone();
        sorted.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&sorted, 0.25), quantile(&sorted, 0.75));
        rows.push(ConvergenceRow { samples: n, median: quantile(&sorted, 0.5), q1, q3, iqr: q3 - q1, per_seed });
    }
    Ok(rows)
}
