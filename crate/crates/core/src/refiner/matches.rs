use std::cmp::Ordering;

use super::MatchProbabilities;
use crate::error::{Error, Result};
use crate::par;

/// One selected patch pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub ground_patch: usize,
    pub aerial_patch: usize,
    pub weight: f64,
}

/// Selection rule for [`extract_matches`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchRule {
    /// Mutual row/column maxima first, padded from the global ranking.
    #[default]
    MutualFirst,
    /// Plain global top-k.
    TopK,
}

/// Higher value first; ties by lowest (row, col).
fn rank(a: &Match, b: &Match) -> Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then(a.ground_patch.cmp(&b.ground_patch))
        .then(a.aerial_patch.cmp(&b.aerial_patch))
}

fn row_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn global_top(p: &[f64], cols: usize, k: usize) -> Vec<Match> {
    let to_match = |flat: usize| Match {
        ground_patch: flat / cols,
        aerial_patch: flat % cols,
        weight: p[flat],
    };
    let mut idx: Vec<usize> = (0..p.len()).collect();
    let cmp = |a: &usize, b: &usize| rank(&to_match(*a), &to_match(*b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable_by(cmp);
    idx.into_iter().map(to_match).collect()
}

/// Picks `k` high-confidence patch pairs from the probability matrix.
///
/// Under [`MatchRule::MutualFirst`] a pair qualifies when it is the argmax of
/// both its row and its column (lowest index wins ties). Qualifying pairs are
/// ranked by probability; if fewer than `k` exist the remainder is filled from
/// the global ranking, skipping pairs already taken.
pub fn extract_matches(p: &MatchProbabilities, k: usize, rule: MatchRule) -> Result<Vec<Match>> {
    let (rows, cols) = p.p.dim();
    let total = rows * cols;
    if k == 0 || k > total {
        return Err(Error::InvalidMatchCount { k, max: total });
    }
    let std = p.p.as_standard_layout();
    let flat = std.as_slice().expect("standard layout");

    let mut picked: Vec<Match> = Vec::with_capacity(k);
    if rule == MatchRule::MutualFirst {
        let row_best = par::map_range(rows, |i| row_argmax(&flat[i * cols..(i + 1) * cols]));
        let mut col_best = vec![0usize; cols];
        for i in 1..rows {
            let row = &flat[i * cols..(i + 1) * cols];
            for (j, &v) in row.iter().enumerate() {
                if v > flat[col_best[j] * cols + j] {
                    col_best[j] = i;
                }
            }
        }
        let mut mutual: Vec<Match> = row_best
            .iter()
            .enumerate()
            .filter(|&(i, &j)| col_best[j] == i)
            .map(|(i, &j)| Match {
                ground_patch: i,
                aerial_patch: j,
                weight: flat[i * cols + j],
            })
            .collect();
        mutual.sort_unstable_by(rank);
        mutual.truncate(k);
        picked = mutual;
    }
    if picked.len() < k {
        let need = k - picked.len();
        let extra = global_top(flat, cols, k);
        let taken: std::collections::HashSet<(usize, usize)> =
            picked.iter().map(|m| (m.ground_patch, m.aerial_patch)).collect();
        picked.extend(
            extra
                .into_iter()
                .filter(|m| !taken.contains(&(m.ground_patch, m.aerial_patch)))
                .take(need),
        );
    }
    Ok(picked)
}
