//! K-means codebook, unit encoding and duplication pooling.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{data_err, Error, Result};
use crate::seeded;
use crate::synthworld::FeatureSequence;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub n_init: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 64,
            seed: 1,
            max_iters: 100,
            tol: 1e-6,
            n_init: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Array2<f64>,
    pub fit_seed: u64,
    pub inertia: f64,
}

impl Codebook {
    pub fn new(centroids: Array2<f64>, fit_seed: u64, inertia: f64) -> Result<Self> {
        if centroids.nrows() < 2 {
            return Err(data_err("a codebook needs at least two centroids"));
        }
        if !(inertia >= 0.0) {
            return Err(data_err("codebook inertia must be non-negative"));
        }
        Ok(Self {
            centroids,
            fit_seed,
            inertia,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.ncols()
    }

    /// Nearest centroid by squared Euclidean distance, lowest index on ties.
    pub fn nearest(&self, frame: ArrayView1<'_, f64>) -> (usize, f64) {
        nearest(&self.centroids, frame)
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &Array2<f64>, frame: ArrayView1<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.outer_iter().enumerate() {
        let d = sq_dist(frame, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Result of one k-means fit including the per-iteration inertia trace.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Inertia after every assignment step of the winning restart.
    pub history: Vec<f64>,
}

fn count_distinct(frames: &Array2<f64>, stop_at: usize) -> usize {
    let mut seen = HashSet::new();
    for row in frames.outer_iter() {
        seen.insert(row.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        if seen.len() >= stop_at {
            break;
        }
    }
    seen.len()
}

fn kmeans_pp<R: Rng>(frames: &Array2<f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = frames.nrows();
    let mut centroids = Array2::zeros((k, frames.ncols()));
    let first = rng.gen_range(0..n);
    centroids.row_mut(0).assign(&frames.row(first));
    let mut d2: Vec<f64> = frames
        .outer_iter()
        .map(|r| sq_dist(r, frames.row(first)))
        .collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centroids.row_mut(c).assign(&frames.row(pick));
        for (i, r) in frames.outer_iter().enumerate() {
            let d = sq_dist(r, frames.row(pick));
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centroids
}

fn lloyd(frames: &Array2<f64>, mut centroids: Array2<f64>, cfg: &KMeansConfig) -> (Array2<f64>, Vec<f64>) {
    let n = frames.nrows();
    let k = centroids.nrows();
    let mut assign = vec![0usize; n];
    let mut dist = vec![0.0f64; n];
    let mut history = Vec::new();
    for iter in 0..=cfg.max_iters {
        let mut inertia = 0.0;
        for (i, r) in frames.outer_iter().enumerate() {
            let (j, d) = nearest(&centroids, r);
            assign[i] = j;
            dist[i] = d;
            inertia += d;
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| prev - inertia < cfg.tol);
        history.push(inertia);
        if converged || iter == cfg.max_iters {
            break;
        }

        let mut sums = Array2::<f64>::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (i, r) in frames.outer_iter().enumerate() {
            sums.row_mut(assign[i]).scaled_add(1.0, &r);
            counts[assign[i]] += 1;
        }
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                let mean = sums.row(j).mapv(|v| v / counts[j] as f64);
                centroids.row_mut(j).assign(&mean);
            } else {
                // Empty cluster: move it onto the frame farthest from its centroid.
                let far = (0..n)
                    .filter(|i| !taken.contains(i))
                    .fold(None, |best: Option<usize>, i| match best {
                        Some(b) if dist[b] >= dist[i] => Some(b),
                        _ => Some(i),
                    })
                    .expect("more frames than clusters");
                taken.insert(far);
                dist[far] = 0.0;
                centroids.row_mut(j).assign(&frames.row(far));
            }
        }
    }
    (centroids, history)
}

/// Lloyd's algorithm from seeded k-means++ starts.
pub fn fit_kmeans(frames: &Array2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    if cfg.k < 1 {
        return Err(Error::Fit("k must be at least 1".into()));
    }
    let distinct = count_distinct(frames, cfg.k);
    if distinct < cfg.k {
        return Err(Error::Fit(format!(
            "only {distinct} distinct frames for k = {}",
            cfg.k
        )));
    }
    let mut best: Option<(Array2<f64>, Vec<f64>)> = None;
    for restart in 0..cfg.n_init.max(1) {
        let mut rng = seeded!(cfg.seed, "kmeans++", restart);
        let init = kmeans_pp(frames, cfg.k, &mut rng);
        let (centroids, history) = lloyd(frames, init, cfg);
        let better = best
            .as_ref()
            .is_none_or(|(_, h)| history.last() < h.last());
        if better {
            best = Some((centroids, history));
        }
    }
    let (centroids, history) = best.expect("at least one restart");
    let inertia = *history.last().expect("non-empty history");
    Ok(KMeansFit {
        codebook: Codebook {
            centroids,
            fit_seed: cfg.seed,
            inertia,
        },
        history,
    })
}

/// Stacks the frames of many sequences into one pooled matrix.
pub fn pool_frames<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Array2<f64>> {
    let seqs: Vec<_> = seqs.into_iter().collect();
    let views: Vec<_> = seqs.iter().map(|s| s.frames.view()).collect();
    if views.is_empty() {
        return Err(data_err("no frames to pool"));
    }
    ndarray::concatenate(Axis(0), &views).map_err(|e| data_err(format!("frame dimension mismatch: {e}")))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitSequence {
    pub units: Vec<u32>,
    pub utt_id: String,
    pub system_id: String,
}

pub fn encode_units(fs: &FeatureSequence, cb: &Codebook) -> Result<UnitSequence> {
    if fs.dim() != cb.dim() {
        return Err(data_err(format!(
            "{}: frame dimension {} does not match codebook dimension {}",
            fs.utt_id,
            fs.dim(),
            cb.dim()
        )));
    }
    let units = fs
        .frames
        .outer_iter()
        .map(|r| cb.nearest(r).0 as u32)
        .collect();
    Ok(UnitSequence {
        units,
        utt_id: fs.utt_id.clone(),
        system_id: fs.origin.clone(),
    })
}

/// Run-length collapsed units.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReducedUnits {
    pub units: Vec<u32>,
    pub durations: Vec<u32>,
}

impl ReducedUnits {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Wraps a unit string whose durations are unknown (each run counts 1),
    /// collapsing adjacent repeats first.
    pub fn from_units(units: &[u32]) -> Self {
        reduce(units)
    }

    pub fn validate(&self) -> Result<()> {
        if self.units.len() != self.durations.len() {
            return Err(data_err("units and durations differ in length"));
        }
        if let Some(i) = self.durations.iter().position(|&d| d == 0) {
            return Err(data_err(format!("zero duration at position {i}")));
        }
        if self.units.windows(2).any(|w| w[0] == w[1]) {
            return Err(data_err("adjacent duplicate units"));
        }
        Ok(())
    }
}

fn reduce(units: &[u32]) -> ReducedUnits {
    let mut out = ReducedUnits::default();
    for &u in units {
        match (out.units.last(), out.durations.last_mut()) {
            (Some(&last), Some(d)) if last == u => *d += 1,
            _ => {
                out.units.push(u);
                out.durations.push(1);
            }
        }
    }
    out
}

pub fn reduce_units(u: &UnitSequence) -> ReducedUnits {
    reduce(&u.units)
}

pub fn expand_units(r: &ReducedUnits) -> Result<Vec<u32>> {
    r.validate()?;
    Ok(r.units
        .iter()
        .zip(&r.durations)
        .flat_map(|(&u, &d)| std::iter::repeat_n(u, d as usize))
        .collect())
}
