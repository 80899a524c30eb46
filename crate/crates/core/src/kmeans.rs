//! Lloyd's k-means with k-means++ seeding and restarts.

use dcmcs_tensor::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::{rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iter: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            restarts: 50,
            max_iter: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centers: Matrix<f64>,
    /// Sum of squared distances to the assigned centers.
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn plus_plus(x: &Matrix<f64>, k: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = x.rows();
    let mut centers = Matrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from_slice(x.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), centers.row(0))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
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
        centers.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), centers.row(c)));
        }
    }
    centers
}

fn assign(x: &Matrix<f64>, centers: &Matrix<f64>, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let (best, dist) = (0..centers.rows())
            .map(|c| (c, sq_dist(x.row(i), centers.row(c))))
            .fold(
                (0, f64::INFINITY),
                |acc, cur| if cur.1 < acc.1 { cur } else { acc },
            );
        *label = best;
        inertia += dist;
    }
    inertia
}

fn lloyd(x: &Matrix<f64>, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> KMeansResult {
    let (n, d) = x.shape();
    let mut centers = plus_plus(x, k, rng);
    let mut labels = vec![usize::MAX; n];
    let mut inertia = assign(x, &centers, &mut labels);
    for _ in 0..max_iter {
        let mut sums = Matrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // Re-seed an empty cluster at the point farthest from its center.
                let far = (0..n)
                    .map(|i| (i, sq_dist(x.row(i), centers.row(labels[i]))))
                    .fold((0, -1.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc })
                    .0;
                centers.row_mut(c).copy_from_slice(x.row(far));
            } else {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centers.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
        let previous = labels.clone();
        inertia = assign(x, &centers, &mut labels);
        if labels == previous {
            break;
        }
    }
    KMeansResult {
        labels,
        centers,
        inertia,
    }
}

/// Best-of-`restarts` clustering of the rows of `x`; the draw sequence comes
/// from `seed` alone.
pub fn kmeans(x: &Matrix<f64>, k: usize, cfg: &KMeansConfig, seed: u64) -> Result<KMeansResult> {
    if k == 0 || k > x.rows() {
        return Err(Error::Config(format!(
            "k-means with k = {k} on {} points",
            x.rows()
        )));
    }
    if !x.all_finite() {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let mut rng = rng(seed, Stream::KMeans);
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(x, k, cfg.max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separates_obvious_blobs() {
        let x = Matrix::from_fn(30, 2, |i, j| {
            (i % 3) as f64 * 10.0 + 0.01 * (i * (j + 1)) as f64
        });
        let res = kmeans(&x, 3, &KMeansConfig::default(), 4).unwrap();
        for i in 0..30 {
            assert_eq!(res.labels[i], res.labels[i % 3]);
        }
        let mut distinct = res.labels[..3].to_vec();
        distinct.sort();
        distinct.dedup();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn seeded_and_rejects_bad_k() {
        let x = Matrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 5) as f64);
        let cfg = KMeansConfig {
            restarts: 3,
            max_iter: 20,
        };
        assert_eq!(
            kmeans(&x, 2, &cfg, 1).unwrap(),
            kmeans(&x, 2, &cfg, 1).unwrap()
        );
        assert!(kmeans(&x, 13, &cfg, 1).is_err());
        assert!(kmeans(&x, 0, &cfg, 1).is_err());
    }
}
