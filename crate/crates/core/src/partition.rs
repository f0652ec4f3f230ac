//! Initial-state partitioning by k-means.
//!
//! Contexts are the Voronoi cells of `k` centers fitted to sampled initial
//! states. Clustering runs on the coordinates that actually vary across
//! resets; constant coordinates (goal radius, zero velocities, ...) would only
//! add identical offsets to every distance.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{DncError, Result};
use crate::rng::Rng;

/// Dimensions whose sample variance exceeds this are treated as varying.
pub const VARYING_DIM_VARIANCE: f64 = 1e-12;
/// Floor applied by [`Partition::estimate_weights`] before renormalizing.
pub const WEIGHT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    centers: Vec<Vec<f64>>,
    weights: Vec<f64>,
    feature_mask: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Copy)]
pub struct KMeansOptions {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iters: 300,
        }
    }
}

/// Per-restart record of a k-means run, kept for verification.
#[derive(Debug, Clone)]
pub struct RestartTrace {
    /// WCSS after each assignment step.
    pub wcss_history: Vec<f64>,
    pub converged: bool,
    pub centers: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct KMeansTrace {
    pub restarts: Vec<RestartTrace>,
    pub best: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center, ties to the lowest index.
fn nearest(centers: &[Vec<f64>], x: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(c, x);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Within-cluster sum of squares of `samples` under nearest-center
/// assignment.
pub fn wcss(samples: &[Vec<f64>], centers: &[Vec<f64>]) -> f64 {
    samples.iter().map(|s| nearest(centers, s).1).sum()
}

fn kmeans_pp_init(samples: &[Vec<f64>], k: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut centers = vec![samples[rng.index(samples.len())].clone()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let next = match rng.categorical(&d2) {
            Some(i) => i,
            // All remaining mass is zero; the caller guarantees k distinct points.
            None => d2.iter().position(|d| *d > 0.0).unwrap_or(0),
        };
        let c = samples[next].clone();
        for (d, s) in d2.iter_mut().zip(samples) {
            *d = d.min(sq_dist(s, &c));
        }
        centers.push(c);
    }
    centers
}

fn lloyd(samples: &[Vec<f64>], mut centers: Vec<Vec<f64>>, max_iters: usize) -> RestartTrace {
    let k = centers.len();
    let dim = samples[0].len();
    let mut assignments: Vec<usize> = vec![usize::MAX; samples.len()];
    let mut wcss_history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iters {
        let mut changed = false;
        let mut total = 0.0;
        let mut dists = Vec::with_capacity(samples.len());
        for (a, s) in assignments.iter_mut().zip(samples) {
            let (i, d) = nearest(&centers, s);
            if *a != i {
                *a = i;
                changed = true;
            }
            total += d;
            dists.push(d);
        }
        // Empty clusters take the sample farthest from its own center.
        let mut counts = vec![0usize; k];
        assignments.iter().for_each(|&a| counts[a] += 1);
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..samples.len())
                    .filter(|&j| counts[assignments[j]] > 1)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("k <= distinct samples");
                counts[assignments[far]] -= 1;
                counts[c] = 1;
                assignments[far] = c;
                total -= dists[far];
                dists[far] = 0.0;
                centers[c] = samples[far].clone();
                changed = true;
            }
        }
        wcss_history.push(total);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        for (s, &a) in samples.iter().zip(&assignments) {
            sums[a].iter_mut().zip(s).for_each(|(acc, v)| *acc += v);
        }
        for (c, (sum, &n)) in centers.iter_mut().zip(sums.iter().zip(&counts)) {
            *c = sum.iter().map(|v| v / n as f64).collect();
        }
    }
    RestartTrace {
        wcss_history,
        converged,
        centers,
        assignments,
    }
}

/// Lloyd's algorithm with k-means++ seeding, best of `opts.restarts` by WCSS.
pub fn kmeans_with_trace(
    samples: &[Vec<f64>],
    k: usize,
    opts: KMeansOptions,
    rng: &mut Rng,
) -> Result<(Partition, KMeansTrace)> {
    if k == 0 {
        return Err(DncError::Config("k must be at least 1".into()));
    }
    if samples.len() < 10 * k {
        return Err(DncError::Config(format!(
            "k-means needs at least 10·k = {} samples, got {}",
            10 * k,
            samples.len()
        )));
    }
    let dim = samples[0].len();
    if dim == 0 {
        return Err(DncError::Config("k-means samples are zero-dimensional".into()));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(DncError::shape("k-means sample", dim, bad.len()));
    }
    if samples.iter().flatten().any(|v| !v.is_finite()) {
        return Err(DncError::Input("non-finite k-means sample".into()));
    }
    let distinct: HashSet<Vec<u64>> = samples
        .iter()
        .map(|s| s.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(DncError::Config(format!(
            "k = {k} exceeds the {} distinct samples",
            distinct.len()
        )));
    }
    let restarts: Vec<RestartTrace> = (0..opts.restarts.max(1))
        .map(|_| {
            let init = kmeans_pp_init(samples, k, rng);
            lloyd(samples, init, opts.max_iters.max(1))
        })
        .collect();
    let best = (0..restarts.len())
        .min_by(|&a, &b| {
            let (wa, wb) = (restarts[a].wcss_history.last(), restarts[b].wcss_history.last());
            wa.partial_cmp(&wb).expect("finite").then(a.cmp(&b))
        })
        .expect("at least one restart");
    let chosen = &restarts[best];
    let mut counts = vec![0usize; k];
    chosen.assignments.iter().for_each(|&a| counts[a] += 1);
    let n = samples.len() as f64;
    let partition = Partition {
        centers: chosen.centers.clone(),
        weights: counts.iter().map(|&c| c as f64 / n).collect(),
        feature_mask: None,
    };
    Ok((partition, KMeansTrace { restarts, best }))
}

pub fn kmeans(samples: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<Partition> {
    Ok(kmeans_with_trace(samples, k, KMeansOptions::default(), rng)?.0)
}

/// Indices of dimensions with sample variance above [`VARYING_DIM_VARIANCE`].
pub fn varying_dimensions(samples: &[Vec<f64>]) -> Vec<usize> {
    let Some(first) = samples.first() else {
        return Vec::new();
    };
    let n = samples.len() as f64;
    (0..first.len())
        .filter(|&d| {
            let mean = samples.iter().map(|s| s[d]).sum::<f64>() / n;
            let var = samples.iter().map(|s| (s[d] - mean).powi(2)).sum::<f64>() / n;
            var > VARYING_DIM_VARIANCE
        })
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionDoc {
    k: usize,
    feature_mask: Option<Vec<usize>>,
    centers: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

impl Partition {
    pub fn new(centers: Vec<Vec<f64>>, weights: Vec<f64>, feature_mask: Option<Vec<usize>>) -> Result<Self> {
        if centers.is_empty() {
            return Err(DncError::EmptyInput("partition centers"));
        }
        if weights.len() != centers.len() {
            return Err(DncError::shape("partition weights", centers.len(), weights.len()));
        }
        let dim = centers[0].len();
        if centers.iter().any(|c| c.len() != dim) {
            return Err(DncError::Config("partition centers have differing dimensions".into()));
        }
        if let Some(mask) = &feature_mask {
            if mask.len() != dim {
                return Err(DncError::shape("feature mask", dim, mask.len()));
            }
        }
        let total: f64 = weights.iter().sum();
        if weights.iter().any(|w| !(*w > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(DncError::Config(format!(
                "partition weights must be positive and sum to 1, got {weights:?}"
            )));
        }
        Ok(Self {
            centers,
            weights,
            feature_mask,
        })
    }

    /// A single context covering every state.
    pub fn trivial(state_dim: usize) -> Self {
        Self {
            centers: vec![vec![0.0; state_dim]],
            weights: vec![1.0],
            feature_mask: None,
        }
    }

    /// Clusters initial states on their varying coordinates.
    pub fn fit(initial_states: &[Vec<f64>], k: usize, rng: &mut Rng) -> Result<Self> {
        Self::fit_with(initial_states, k, KMeansOptions::default(), rng)
    }

    pub fn fit_with(initial_states: &[Vec<f64>], k: usize, opts: KMeansOptions, rng: &mut Rng) -> Result<Self> {
        let full_dim = initial_states.first().map_or(0, |s| s.len());
        let dims = varying_dimensions(initial_states);
        if dims.is_empty() {
            // Deterministic initial state: one context is all there is.
            if k == 1 {
                return Ok(Self::trivial(full_dim));
            }
            return Err(DncError::Config(format!(
                "k = {k} exceeds the 1 distinct initial state"
            )));
        }
        let projected: Vec<Vec<f64>> = initial_states
            .iter()
            .map(|s| dims.iter().map(|&d| s[d]).collect())
            .collect();
        let (mut p, _) = kmeans_with_trace(&projected, k, opts, rng)?;
        if dims.len() < full_dim {
            p.feature_mask = Some(dims);
        }
        Ok(p)
    }

    pub fn k(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn feature_mask(&self) -> Option<&[usize]> {
        self.feature_mask.as_deref()
    }

    fn project(&self, state: &[f64]) -> Result<Vec<f64>> {
        match &self.feature_mask {
            Some(mask) => mask
                .iter()
                .map(|&d| {
                    state
                        .get(d)
                        .copied()
                        .ok_or_else(|| DncError::shape("masked state", d + 1, state.len()))
                })
                .collect(),
            None => {
                let dim = self.centers[0].len();
                if state.len() != dim {
                    return Err(DncError::shape("partition state", dim, state.len()));
                }
                Ok(state.to_vec())
            }
        }
    }

    /// Context of `state`: nearest center in squared distance, lowest index on
    /// ties.
    pub fn assign(&self, state: &[f64]) -> Result<usize> {
        let x = self.project(state)?;
        Ok(nearest(&self.centers, &x).0)
    }

    /// Assignment frequencies over `samples`, floored at [`WEIGHT_FLOOR`] and
    /// renormalized.
    pub fn estimate_weights(&self, samples: &[Vec<f64>]) -> Result<Vec<f64>> {
        if samples.len() < 100 {
            return Err(DncError::Input(format!(
                "weight estimation needs at least 100 samples, got {}",
                samples.len()
            )));
        }
        let mut counts = vec![0usize; self.k()];
        for s in samples {
            counts[self.assign(s)?] += 1;
        }
        let n = samples.len() as f64;
        let floored: Vec<f64> = counts.iter().map(|&c| (c as f64 / n).max(WEIGHT_FLOOR)).collect();
        let total: f64 = floored.iter().sum();
        Ok(floored.iter().map(|w| w / total).collect())
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        self.weights = weights;
        Self::new(self.centers, self.weights, self.feature_mask)
    }

    /// JSON document `{"k", "feature_mask", "centers", "weights"}` with every
    /// float written to 17 significant digits.
    pub fn to_json(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(", ");
        let mut s = String::new();
        let _ = writeln!(s, "{{");
        let _ = writeln!(s, "  \"k\": {},", self.k());
        match &self.feature_mask {
            Some(m) => {
                let m: Vec<String> = m.iter().map(|d| d.to_string()).collect();
                let _ = writeln!(s, "  \"feature_mask\": [{}],", m.join(", "));
            }
            None => {
                let _ = writeln!(s, "  \"feature_mask\": null,");
            }
        }
        let centers: Vec<String> = self.centers.iter().map(|c| format!("    [{}]", list(c))).collect();
        let _ = writeln!(s, "  \"centers\": [\n{}\n  ],", centers.join(",\n"));
        let _ = writeln!(s, "  \"weights\": [{}]", list(&self.weights));
        s.push_str("}\n");
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PartitionDoc = serde_json::from_str(text)?;
        if doc.k != doc.centers.len() {
            return Err(DncError::Config(format!(
                "k = {} but {} centers",
                doc.k,
                doc.centers.len()
            )));
        }
        Self::new(doc.centers, doc.weights, doc.feature_mask)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| DncError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DncError::io(path, e))?;
        Self::from_json(&text)
    }
}
