//! Lloyd's k-means with k-means++ seeding and restarts.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Relative WCSS improvement below which a run is considered converged.
    pub tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            restarts: 10,
            max_iter: 100,
            tol: 1e-6,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `k x D`, ordered by descending cluster size.
    pub centroids: Array2<f64>,
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub wcss: f64,
    /// WCSS after each Lloyd iteration of the winning restart.
    pub trace: Vec<f64>,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: ArrayView1<f64>, centroids: &Array2<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn seed_plus_plus(data: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = data.nrows();
    let mut centroids = Array2::zeros((k, data.ncols()));
    centroids.row_mut(0).assign(&data.row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = data.rows().into_iter().map(|r| sq_dist(r, centroids.row(0))).collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.gen_range(0..n),
        };
        centroids.row_mut(j).assign(&data.row(pick));
        for (d, r) in d2.iter_mut().zip(data.rows()) {
            *d = d.min(sq_dist(r, centroids.row(j)));
        }
    }
    centroids
}

struct Run {
    centroids: Array2<f64>,
    labels: Vec<usize>,
    wcss: f64,
    trace: Vec<f64>,
}

fn lloyd(data: ArrayView2<f64>, mut centroids: Array2<f64>, cfg: &KMeansConfig) -> Run {
    let (n, dim) = data.dim();
    let k = centroids.nrows();
    let mut labels = vec![0; n];
    let mut trace = Vec::new();
    let mut prev = f64::INFINITY;
    for _ in 0..cfg.max_iter {
        let mut wcss = 0.0;
        let mut dists = Vec::with_capacity(n);
        for (i, r) in data.rows().into_iter().enumerate() {
            let (j, d) = nearest(r, &centroids);
            labels[i] = j;
            wcss += d;
            dists.push(d);
        }
        trace.push(wcss);
        let mut sums = Array2::<f64>::zeros((k, dim));
        let mut counts = vec![0usize; k];
        for (r, &j) in data.rows().into_iter().zip(&labels) {
            sums.row_mut(j).scaled_add(1.0, &r);
            counts[j] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            } else {
                // revive an empty cluster at the worst-fit point
                let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap();
                centroids.row_mut(j).assign(&data.row(far));
                dists[far] = 0.0;
            }
        }
        let converged = prev.is_finite() && prev - wcss <= cfg.tol * prev.max(f64::MIN_POSITIVE);
        prev = wcss;
        if converged {
            break;
        }
    }
    // final assignment against the last centroid update
    let mut wcss = 0.0;
    for (i, r) in data.rows().into_iter().enumerate() {
        let (j, d) = nearest(r, &centroids);
        labels[i] = j;
        wcss += d;
    }
    if wcss < *trace.last().unwrap_or(&f64::INFINITY) {
        trace.push(wcss);
    }
    Run {
        centroids,
        labels,
        wcss,
        trace,
    }
}

/// Clusters the rows of `data`. Clusters are relabelled by descending size
/// (ties broken by the first member's index).
pub fn kmeans(data: ArrayView2<f64>, cfg: &KMeansConfig) -> Result<KMeansResult> {
    let n = data.nrows();
    if cfg.k == 0 || cfg.restarts == 0 || cfg.max_iter == 0 {
        return Err(Error::invalid("k, restarts and max_iter must be positive"));
    }
    if n < cfg.k {
        return Err(Error::invalid(format!("{n} points cannot form {} clusters", cfg.k)));
    }
    if data.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("k-means input"));
    }
    if cfg.k > 1 {
        let first = data.row(0);
        if data.rows().into_iter().all(|r| r == first) {
            return Err(Error::NoClusterStructure);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Run> = None;
    for _ in 0..cfg.restarts {
        let init = seed_plus_plus(data, cfg.k, &mut rng);
        let run = lloyd(data, init, cfg);
        if best.as_ref().map_or(true, |b| run.wcss < b.wcss) {
            best = Some(run);
        }
    }
    Ok(canonicalize(best.expect("at least one restart")))
}

fn canonicalize(run: Run) -> KMeansResult {
    let k = run.centroids.nrows();
    let mut sizes = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &j) in run.labels.iter().enumerate() {
        sizes[j] += 1;
        first[j] = first[j].min(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(first[a].cmp(&first[b])));
    let mut rank = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    KMeansResult {
        centroids: run.centroids.select(Axis(0), &order),
        labels: run.labels.iter().map(|&j| rank[j]).collect(),
        sizes: order.iter().map(|&j| sizes[j]).collect(),
        wcss: run.wcss,
        trace: run.trace,
    }
}

/// Mean of the rows of `data`, for the single-cluster case.
pub fn centroid(data: ArrayView2<f64>) -> Array1<f64> {
    data.mean_axis(Axis(0)).unwrap_or_else(|| Array1::zeros(data.ncols()))
}
