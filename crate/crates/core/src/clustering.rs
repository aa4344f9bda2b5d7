//! Lloyd's k-means with k-means++ seeding and restarts, plus the conversion
//! from cluster labels to separation masks.
//!
//! Embeddings are unit-norm, so Euclidean distance orders pairs exactly as
//! cosine distance does (`‖a−b‖² = 2 − 2⟨a,b⟩`).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Converged once no centroid moves farther than this.
    pub tol: f64,
    pub n_restarts: usize,
    pub seed: u64,
    /// Process points in a canonical value order instead of row order, which
    /// makes the result equivariant under row permutations.
    pub order_invariant: bool,
}

impl KMeansConfig {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            max_iters: 300,
            tol: 1e-8,
            n_restarts: 10,
            seed: 0,
            order_invariant: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterResult {
    pub labels: Vec<usize>,
    pub centroids: Matrix,
    pub inertia: f64,
    pub iterations: usize,
    /// Inertia after every assignment step of the winning restart.
    pub inertia_trace: Vec<f64>,
    /// Final inertia of every restart, in restart order.
    pub restart_inertias: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist: Vec<f64> = points.iter_rows().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            // every point already coincides with a centroid
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (d, p) in dist.iter_mut().zip(points.iter_rows()) {
            *d = d.min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

struct Run {
    labels: Vec<usize>,
    centroids: Matrix,
    inertia: f64,
    iterations: usize,
    trace: Vec<f64>,
}

fn lloyd(points: &Matrix, cfg: &KMeansConfig, rng: &mut ChaCha8Rng) -> Run {
    let (n, dim) = points.shape();
    let mut centroids = kmeans_pp(points, cfg.k, rng);
    let mut labels = vec![0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    loop {
        let mut inertia = 0.0;
        for (l, p) in labels.iter_mut().zip(points.iter_rows()) {
            let (c, d) = nearest(p, &centroids);
            *l = c;
            inertia += d;
        }
        trace.push(inertia);
        if iterations == cfg.max_iters {
            break;
        }
        iterations += 1;

        let mut sums = Matrix::zeros(cfg.k, dim);
        let mut counts = vec![0usize; cfg.k];
        for (&l, p) in labels.iter().zip(points.iter_rows()) {
            counts[l] += 1;
            for (s, x) in sums.row_mut(l).iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for (c, &count) in counts.iter().enumerate() {
            // an empty cluster keeps its centroid
            if count == 0 {
                continue;
            }
            let inv = 1.0 / count as f64;
            let new: Vec<f64> = sums.row(c).iter().map(|s| s * inv).collect();
            shift = shift.max(sq_dist(&new, centroids.row(c)).sqrt());
            centroids.row_mut(c).copy_from_slice(&new);
        }
        if shift < cfg.tol {
            // final assignment against the settled centroids
            let mut inertia = 0.0;
            for (l, p) in labels.iter_mut().zip(points.iter_rows()) {
                let (c, d) = nearest(p, &centroids);
                *l = c;
                inertia += d;
            }
            trace.push(inertia);
            break;
        }
    }
    let inertia = *trace.last().expect("at least one assignment");
    Run {
        labels,
        centroids,
        inertia,
        iterations,
        trace,
    }
}

/// Row order sorted by the bit patterns of the row values.
fn canonical_order(points: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.rows()).collect();
    order.sort_by(|&a, &b| {
        let ka = points.row(a).iter().map(|x| x.to_bits());
        let kb = points.row(b).iter().map(|x| x.to_bits());
        ka.cmp(kb).then(a.cmp(&b))
    });
    order
}

pub fn kmeans(points: &Matrix, cfg: &KMeansConfig) -> Result<ClusterResult> {
    if cfg.k == 0 || cfg.tol.is_nan() || cfg.tol <= 0.0 || cfg.n_restarts == 0 {
        return Err(Error::invalid("k-means needs k >= 1, tol > 0 and at least one restart"));
    }
    if points.rows() < cfg.k {
        return Err(Error::invalid(format!(
            "k-means with k={} needs at least as many points, got {}",
            cfg.k,
            points.rows()
        )));
    }
    if !points.is_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }

    let order = cfg.order_invariant.then(|| canonical_order(points));
    let reordered;
    let work = match &order {
        Some(o) => {
            reordered = points.select_rows(o);
            &reordered
        }
        None => points,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<Run> = None;
    let mut restart_inertias = Vec::with_capacity(cfg.n_restarts);
    for _ in 0..cfg.n_restarts {
        let run = lloyd(work, cfg, &mut rng);
        restart_inertias.push(run.inertia);
        // strict comparison keeps the earliest restart on ties
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");

    let labels = match &order {
        Some(o) => {
            let mut labels = vec![0; points.rows()];
            for (pos, &row) in o.iter().enumerate() {
                labels[row] = best.labels[pos];
            }
            labels
        }
        None => best.labels,
    };
    Ok(ClusterResult {
        labels,
        centroids: best.centroids,
        inertia: best.inertia,
        iterations: best.iterations,
        inertia_trace: best.trace,
        restart_inertias,
    })
}

/// Binary `T x F` masks from per-kept-bin labels. Bins that were not
/// clustered get `1/k` in every mask.
pub fn labels_to_masks(
    labels: &[usize],
    kept: &[usize],
    n_frames: usize,
    n_freqs: usize,
    k: usize,
) -> Result<Vec<Matrix>> {
    if labels.len() != kept.len() {
        return Err(Error::shape("labels_to_masks", kept.len(), labels.len()));
    }
    if k == 0 {
        return Err(Error::invalid("need at least one mask"));
    }
    let bins = n_frames * n_freqs;
    let fill = 1.0 / k as f64;
    let mut masks = vec![Matrix::from_vec(n_frames, n_freqs, vec![fill; bins])?; k];
    for (&l, &i) in labels.iter().zip(kept) {
        if i >= bins || l >= k {
            return Err(Error::invalid(format!(
                "bin {i} or label {l} out of range ({bins} bins, {k} clusters)"
            )));
        }
        for (c, m) in masks.iter_mut().enumerate() {
            m.as_mut_slice()[i] = if c == l { 1.0 } else { 0.0 };
        }
    }
    Ok(masks)
}
