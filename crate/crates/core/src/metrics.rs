//! External clustering scores: accuracy under the best one-to-one label
//! matching, normalized mutual information and purity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How NMI normalizes mutual information; reported alongside scores.
pub const NMI_NORMALIZATION: &str = "sqrt(H(pred) * H(truth))";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub acc: f64,
    pub nmi: f64,
    pub pur: f64,
}

/// Counts `table[p][t]` of samples with predicted label `p` and true label `t`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: Vec<Vec<usize>>,
    total: usize,
}

impl ContingencyTable {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(Error::Shape(format!(
                "{} predictions for {} labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(Error::Dataset("cannot score an empty labelling".into()));
        }
        let kp = pred.iter().max().map_or(0, |m| m + 1);
        let kt = truth.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0; kt]; kp];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p][t] += 1;
        }
        Ok(Self {
            counts,
            total: pred.len(),
        })
    }

    pub fn counts(&self) -> &[Vec<usize>] {
        &self.counts
    }

    pub fn total(&self) -> usize {
        self.total
    }

    fn n_true(&self) -> usize {
        self.counts.first().map_or(0, Vec::len)
    }

    fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_true()];
        for row in &self.counts {
            for (acc, &c) in s.iter_mut().zip(row) {
                *acc += c;
            }
        }
        s
    }
}

/// Minimum-cost perfect matching on a square cost matrix
/// (shortest augmenting paths with potentials, O(n^3)).
///
/// Returns `assignment[row] = column`.
pub fn min_cost_assignment(cost: &[Vec<i64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    const INF: i64 = i64::MAX / 4;
    // 1-based arrays; column 0 is a virtual source.
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        matched_row[0] = row;
        let mut j0 = 0;
        let mut minv = vec![INF; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = INF;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        if matched_row[j] > 0 {
            assignment[matched_row[j] - 1] = j - 1;
        }
    }
    assignment
}

/// Best matched fraction over one-to-one cluster/class assignments.
pub fn clustering_accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let size = table.counts.len().max(table.n_true());
    let cost: Vec<Vec<i64>> = (0..size)
        .map(|p| {
            (0..size)
                .map(|t| {
                    let c = table.counts.get(p).and_then(|r| r.get(t)).copied();
                    -(c.unwrap_or(0) as i64)
                })
                .collect()
        })
        .collect();
    let assignment = min_cost_assignment(&cost);
    let matched: i64 = assignment
        .iter()
        .enumerate()
        .map(|(p, &t)| -cost[p][t])
        .sum();
    Ok(matched as f64 / table.total as f64)
}

fn entropy(counts: &[usize], total: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Mutual information normalized by the geometric mean of the entropies.
///
/// Two partitions that are both a single cluster score 1; a single-cluster
/// partition against a non-trivial one scores 0.
pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let total = table.total as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let h_pred = entropy(&rows, total);
    let h_truth = entropy(&cols, total);
    if h_pred == 0.0 && h_truth == 0.0 {
        return Ok(1.0);
    }
    if h_pred == 0.0 || h_truth == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (p, row) in table.counts.iter().enumerate() {
        for (t, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let joint = c as f64 / total;
            mi += joint * (c as f64 * total / (rows[p] as f64 * cols[t] as f64)).ln();
        }
    }
    Ok((mi / (h_pred * h_truth).sqrt()).clamp(0.0, 1.0))
}

/// Fraction of samples belonging to their cluster's majority class.
pub fn purity(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let table = ContingencyTable::new(pred, truth)?;
    let majority: usize = table
        .counts
        .iter()
        .map(|r| r.iter().copied().max().unwrap_or(0))
        .sum();
    Ok(majority as f64 / table.total as f64)
}

pub fn score(pred: &[usize], truth: &[usize]) -> Result<Scores> {
    Ok(Scores {
        acc: clustering_accuracy(pred, truth)?,
        nmi: nmi(pred, truth)?,
        pur: purity(pred, truth)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        assert_eq!(
            clustering_accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            clustering_accuracy(&[2, 0, 1, 0], &[0, 1, 2, 1]).unwrap(),
            1.0
        );
        assert_eq!(
            clustering_accuracy(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(),
            0.75
        );
    }

    #[test]
    fn accuracy_with_unequal_cluster_counts() {
        // Three predicted clusters against two classes; one cluster must go unmatched.
        let acc = clustering_accuracy(&[0, 0, 1, 2, 2, 2], &[0, 0, 1, 1, 1, 1]).unwrap();
        assert!((acc - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_examples() {
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
        assert!(nmi(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap().abs() < 1e-12);
    }

    #[test]
    fn purity_examples() {
        assert_eq!(purity(&[0, 1, 1, 2], &[0, 1, 1, 2]).unwrap(), 1.0);
        assert!((purity(&[0; 6], &[0, 1, 2, 0, 1, 2]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(purity(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap(), 0.75);
    }

    #[test]
    fn errors() {
        assert!(clustering_accuracy(&[0, 1], &[0]).is_err());
        assert!(nmi(&[], &[]).is_err());
        assert!(purity(&[0], &[]).is_err());
    }

    #[test]
    fn assignment_small_case() {
        let cost = vec![vec![4, 1, 3], vec![2, 0, 5], vec![3, 2, 2]];
        let a = min_cost_assignment(&cost);
        let total: i64 = a.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
        assert_eq!(total, 5);
    }
}
