//! Bipartite assignment of ground-truth boxes to detection queries.

use serde::{Deserialize, Serialize};

use super::{focal_cost, giou, LossWeights};
use crate::error::{Error, Result};

/// Largest prediction count accepted by [`brute_force_match`].
pub const BRUTE_FORCE_MAX: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `(gt index, prediction index)` pairs sorted by GT index.
    pub pairs: Vec<(usize, usize)>,
    pub cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Assignment {
            pairs: Vec::new(),
            cost: 0.0,
        }
    }

    pub fn matched_predictions(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.1).collect()
    }
}

/// Matching cost `[#GT][#pred]`: classification cost plus weighted
/// `1 − GIoU` and L1 box distance.
pub fn det_cost_matrix(
    probs: &[f64],
    boxes: &[[f64; 4]],
    gt: &[[f64; 4]],
    w: &LossWeights,
) -> Result<Vec<Vec<f64>>> {
    if probs.len() != boxes.len() {
        return Err(Error::shape(
            "matching",
            format!("{} scores for {} boxes", probs.len(), boxes.len()),
        ));
    }
    Ok(gt
        .iter()
        .map(|g| {
            probs
                .iter()
                .zip(boxes)
                .map(|(&p, b)| {
                    let l1: f64 = b.iter().zip(g).map(|(x, y)| (x - y).abs()).sum();
                    w.lambda_cls * focal_cost(p, w.focal_alpha, w.focal_gamma)
                        + w.lambda_iou * (1.0 - giou(b, g))
                        + w.lambda_l1 * l1
                })
                .collect()
        })
        .collect())
}

fn check_costs(cost: &[Vec<f64>]) -> Result<usize> {
    let m = cost.first().map_or(0, Vec::len);
    if cost.iter().any(|r| r.len() != m) {
        return Err(Error::shape("matching", "ragged cost matrix"));
    }
    if cost.len() > m {
        return Err(Error::Matching(format!(
            "{} ground-truth boxes but only {m} queries; increase the query count",
            cost.len()
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Matching("non-finite matching cost".into()));
    }
    Ok(m)
}

fn assignment_from(cost: &[Vec<f64>], mut pairs: Vec<(usize, usize)>) -> Assignment {
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(g, p)| cost[g][p]).sum();
    Assignment { pairs, cost: total }
}

/// Minimum-cost injection of rows into columns (rows ≤ columns), by the
/// shortest augmenting path form of the Hungarian algorithm. O(n²m).
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment::empty());
    }
    let m = check_costs(cost)?;
    // 1-based potentials; column 0 is a virtual source.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut row_of = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
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
            for j in 0..=m {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let pairs = (1..=m)
        .filter(|&j| row_of[j] != 0)
        .map(|j| (row_of[j] - 1, j - 1))
        .collect();
    Ok(assignment_from(cost, pairs))
}

/// Exhaustive minimum over all injections; test oracle for small problems.
pub fn brute_force(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = cost.len();
    if n == 0 {
        return Ok(Assignment::empty());
    }
    let m = check_costs(cost)?;
    if m > BRUTE_FORCE_MAX {
        return Err(Error::Matching(format!(
            "brute force supports at most {BRUTE_FORCE_MAX} predictions, got {m}"
        )));
    }
    fn search(
        cost: &[Vec<f64>],
        row: usize,
        used: &mut [bool],
        acc: f64,
        cur: &mut Vec<usize>,
        best: &mut (f64, Vec<usize>),
    ) {
        if row == cost.len() {
            if acc < best.0 {
                *best = (acc, cur.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                cur.push(j);
                search(cost, row + 1, used, acc + cost[row][j], cur, best);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut best = (f64::INFINITY, Vec::new());
    search(cost, 0, &mut vec![false; m], 0.0, &mut Vec::new(), &mut best);
    let pairs = best.1.into_iter().enumerate().collect();
    Ok(assignment_from(cost, pairs))
}

pub fn hungarian_match(
    probs: &[f64],
    boxes: &[[f64; 4]],
    gt: &[[f64; 4]],
    w: &LossWeights,
) -> Result<Assignment> {
    hungarian(&det_cost_matrix(probs, boxes, gt, w)?)
}

pub fn brute_force_match(
    probs: &[f64],
    boxes: &[[f64; 4]],
    gt: &[[f64; 4]],
    w: &LossWeights,
) -> Result<Assignment> {
    if probs.len() > BRUTE_FORCE_MAX {
        return Err(Error::Matching(format!(
            "brute force supports at most {BRUTE_FORCE_MAX} predictions"
        )));
    }
    brute_force(&det_cost_matrix(probs, boxes, gt, w)?)
}
