use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop when inertia improves by less than this fraction.
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 20,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center (lowest index on ties) and its distance.
fn nearest(x: &[f64], centers: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centers.rows() {
        let d = sq_dist(x, centers.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(z: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let n = z.rows();
    let mut centers = Tensor::zeros(k, z.cols());
    centers
        .row_mut(0)
        .copy_from_slice(z.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(z.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
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
            rng.random_range(0..n)
        };
        centers.row_mut(c).copy_from_slice(z.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(z.row(i), centers.row(c)));
        }
    }
    centers
}

fn lloyd(z: &Tensor, mut centers: Tensor, cfg: &KMeansConfig) -> (Vec<usize>, f64) {
    let (n, d) = z.shape();
    let k = centers.rows();
    let mut labels = vec![0; n];
    let mut dists = vec![0.0; n];
    let mut prev = f64::INFINITY;
    let mut inertia = f64::INFINITY;
    for _ in 0..cfg.max_iter.max(1) {
        inertia = 0.0;
        for i in 0..n {
            let (c, dist) = nearest(z.row(i), &centers);
            labels[i] = c;
            dists[i] = dist;
            inertia += dist;
        }
        if prev.is_finite() && prev - inertia <= cfg.tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
        prev = inertia;

        let mut sums = Tensor::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums.row_mut(labels[i]).iter_mut().zip(z.row(i)) {
                *s += v;
            }
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            } else {
                // Empty cluster: move it onto the worst-fit point not yet used.
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap_or(0);
                taken[far] = true;
                dists[far] = 0.0;
                centers.row_mut(c).copy_from_slice(z.row(far));
            }
        }
    }
    (labels, inertia)
}

/// [`kmeans_with`] using the default configuration.
pub fn kmeans(z: &Tensor, k: usize, seed: u64) -> Result<Vec<usize>> {
    kmeans_with(z, k, seed, &KMeansConfig::default())
}

/// k-means++ seeding plus Lloyd iterations, keeping the lowest-inertia run
/// over `cfg.restarts` restarts.
pub fn kmeans_with(z: &Tensor, k: usize, seed: u64, cfg: &KMeansConfig) -> Result<Vec<usize>> {
    let n = z.rows();
    if k == 0 || k > n {
        return Err(Error::Invalid(format!("k-means with k={k} on {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let centers = plus_plus_seed(z, k, &mut rng);
        let (labels, inertia) = lloyd(z, centers, cfg);
        if best.as_ref().is_none_or(|b| inertia < b.1) {
            best = Some((labels, inertia));
        }
    }
    Ok(best.expect("at least one restart").0)
}
