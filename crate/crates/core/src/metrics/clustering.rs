//! Normalized mutual information and seeded k-means.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::Mat;
use crate::error::{shape_err, Error, Result};

/// Restarts used by [`fusion_nmi`].
pub const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 100;

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `I(a; b) / sqrt(H(a) H(b))` in nats from empirical counts. Two
/// single-cluster assignments give 1; exactly one gives 0.
pub fn nmi(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(shape_err(format!("assignments have lengths {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(shape_err("assignments are empty"));
    }
    let n = a.len() as f64;
    let mut ca: BTreeMap<usize, usize> = BTreeMap::new();
    let mut cb: BTreeMap<usize, usize> = BTreeMap::new();
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
        *joint.entry((x, y)).or_default() += 1;
    }
    let ha = entropy(ca.values().copied(), n);
    let hb = entropy(cb.values().copied(), n);
    match (ca.len() == 1, cb.len() == 1) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let mi: f64 = joint
        .iter()
        .map(|(&(x, y), &c)| {
            let pxy = c as f64 / n;
            let px = ca[&x] as f64 / n;
            let py = cb[&y] as f64 / n;
            pxy * (pxy / (px * py)).ln()
        })
        .sum();
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub assignments: Vec<usize>,
    pub centroids: Mat,
    pub inertia: f64,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: ndarray::ArrayView1<f64>, centroids: &Mat) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_once(data: &Mat, k: usize, rng: &mut ChaCha8Rng) -> KMeans {
    let (n, d) = data.dim();
    // k-means++ seeding.
    let mut centroids = Mat::zeros((k, d));
    centroids.row_mut(0).assign(&data.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&data.row(pick));
        for (i, di) in dist.iter_mut().enumerate() {
            *di = di.min(sq_dist(data.row(i), centroids.row(c)));
        }
    }
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut d2 = vec![0.0; n];
        for i in 0..n {
            let (j, dd) = nearest(data.row(i), &centroids);
            d2[i] = dd;
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        let mut sums = Mat::zeros((k, d));
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let j = assignments[i];
            counts[j] += 1;
            let mut row = sums.row_mut(j);
            row += &data.row(i);
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed an empty cluster at the worst-fit point.
                let far = (0..n).max_by(|&a, &b| d2[a].total_cmp(&d2[b]).then(b.cmp(&a))).expect("n > 0");
                centroids.row_mut(j).assign(&data.row(far));
                d2[far] = 0.0;
                changed = true;
            } else {
                centroids.row_mut(j).assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
        if !changed {
            break;
        }
    }
    let mut inertia = 0.0;
    for i in 0..n {
        let (j, dd) = nearest(data.row(i), &centroids);
        assignments[i] = j;
        inertia += dd;
    }
    KMeans {
        assignments,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm with k-means++ seeding; keeps the restart with the
/// lowest inertia.
pub fn kmeans(data: &Mat, k: usize, restarts: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || restarts == 0 {
        return Err(Error::Config("k-means needs k ≥ 1 and at least one restart".into()));
    }
    if data.nrows() < k {
        return Err(Error::Config(format!("{} samples cannot form {k} clusters", data.nrows())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts {
        let run = kmeans_once(data, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("restarts ≥ 1"))
}

/// Clusters both feature sets with `k` clusters and compares the partitions.
pub fn fusion_nmi(fused: &Mat, modal: &Mat, k: usize, seed: u64) -> Result<f64> {
    if k < 2 {
        return Err(Error::Config("fusion NMI needs k ≥ 2".into()));
    }
    if fused.nrows() != modal.nrows() {
        return Err(shape_err("feature sets have different sample counts"));
    }
    let a = kmeans(fused, k, KMEANS_RESTARTS, seed)?;
    let b = kmeans(modal, k, KMEANS_RESTARTS, seed)?;
    nmi(&a.assignments, &b.assignments)
}
