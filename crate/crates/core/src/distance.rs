//! Hungarian distance between equal-size datasets: the minimum-cost perfect
//! matching under pairwise ℓ2 feature distance.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::dist2;

/// Cost assigned to label-incompatible pairs by the brute-force oracle.
pub const INFEASIBLE_COST: f64 = 1e15;

const BRUTE_FORCE_MAX: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Match on features only.
    #[default]
    Ignore,
    /// Only pair rows with equal labels.
    MustMatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingResult {
    /// `permutation[i]` is the row of the second dataset matched to row `i`
    /// of the first.
    pub permutation: Vec<usize>,
    /// Headline distance `total_cost / n`.
    pub mean_cost: f64,
    pub total_cost: f64,
}

fn check_pair(d1: &Dataset, d2: &Dataset) -> Result<()> {
    if d1.n() != d2.n() {
        return Err(Error::Argument(format!(
            "datasets have {} and {} rows; matching needs equal sizes",
            d1.n(),
            d2.n()
        )));
    }
    if d1.d() != d2.d() {
        return Err(Error::Shape(format!(
            "datasets have {} and {} features",
            d1.d(),
            d2.d()
        )));
    }
    Ok(())
}

fn check_label_counts(d1: &Dataset, d2: &Dataset) -> Result<()> {
    let pos = |d: &Dataset| d.labels().iter().filter(|&&y| y == 1).count();
    if pos(d1) != pos(d2) {
        return Err(Error::Infeasible(format!(
            "label-preserving matching needs equal class counts, got {} vs {} positives",
            pos(d1),
            pos(d2)
        )));
    }
    Ok(())
}

fn finish(d1: &Dataset, d2: &Dataset, permutation: Vec<usize>) -> MatchingResult {
    let total_cost: f64 = permutation
        .iter()
        .enumerate()
        .map(|(i, &j)| dist2(d1.row(i), d2.row(j)))
        .sum();
    MatchingResult {
        mean_cost: total_cost / permutation.len() as f64,
        total_cost,
        permutation,
    }
}

/// Exact minimum-cost assignment on an `n × n` row-major cost matrix using
/// shortest augmenting paths with dual potentials, `O(n³)`. Returns the column
/// assigned to each row.
pub fn solve_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = f64::INFINITY);
        used.iter_mut().for_each(|f| *f = false);
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
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
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of_col[j] - 1] = j - 1;
    }
    assignment
}

fn feature_cost_matrix(d1: &Dataset, d2: &Dataset, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let m = cols.len();
    let mut cost = vec![0.0; rows.len() * m];
    cost.par_chunks_mut(m.max(1))
        .zip(rows.par_iter())
        .for_each(|(out, &i)| {
            let a = d1.row(i);
            for (c, &j) in out.iter_mut().zip(cols) {
                *c = dist2(a, d2.row(j));
            }
        });
    cost
}

/// Optimal matching between `d1` and `d2`.
///
/// With [`LabelMode::MustMatch`] the problem separates into one assignment per
/// class, which gives the same optimum as pricing cross-label pairs at
/// [`INFEASIBLE_COST`] whenever the class counts agree.
pub fn hungarian_distance(d1: &Dataset, d2: &Dataset, mode: LabelMode) -> Result<MatchingResult> {
    check_pair(d1, d2)?;
    let n = d1.n();
    let permutation = match mode {
        LabelMode::Ignore => {
            let all: Vec<usize> = (0..n).collect();
            solve_assignment(&feature_cost_matrix(d1, d2, &all, &all), n)
        }
        LabelMode::MustMatch => {
            check_label_counts(d1, d2)?;
            let mut perm = vec![0usize; n];
            for class in [0u8, 1] {
                let rows: Vec<usize> = (0..n).filter(|&i| d1.labels()[i] == class).collect();
                let cols: Vec<usize> = (0..n).filter(|&j| d2.labels()[j] == class).collect();
                if rows.is_empty() {
                    continue;
                }
                let sub = solve_assignment(&feature_cost_matrix(d1, d2, &rows, &cols), rows.len());
                for (r, c) in sub.into_iter().enumerate() {
                    perm[rows[r]] = cols[c];
                }
            }
            perm
        }
    };
    Ok(finish(d1, d2, permutation))
}

/// Exhaustive minimum over all `n!` matchings, for `n ≤ 8`.
pub fn brute_force_distance(d1: &Dataset, d2: &Dataset, mode: LabelMode) -> Result<MatchingResult> {
    check_pair(d1, d2)?;
    let n = d1.n();
    if n > BRUTE_FORCE_MAX {
        return Err(Error::Argument(format!(
            "brute force is limited to n <= {BRUTE_FORCE_MAX}, got {n}"
        )));
    }
    if mode == LabelMode::MustMatch {
        check_label_counts(d1, d2)?;
    }
    let cost = |i: usize, j: usize| {
        if mode == LabelMode::MustMatch && d1.labels()[i] != d2.labels()[j] {
            INFEASIBLE_COST
        } else {
            dist2(d1.row(i), d2.row(j))
        }
    };
    // Heap's algorithm over permutations of 0..n.
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>();
    let mut best = perm.clone();
    let mut best_cost = total(&perm);
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let t = total(&perm);
            if t < best_cost {
                best_cost = t;
                best.copy_from_slice(&perm);
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    Ok(finish(d1, d2, best))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_d(xs: &[f64], labels: &[u8]) -> Dataset {
        Dataset::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>(), labels.to_vec()).unwrap()
    }

    #[test]
    fn identical_datasets() {
        let a = one_d(&[0.0, 1.0, 5.0], &[0, 1, 0]);
        let r = hungarian_distance(&a, &a, LabelMode::Ignore).unwrap();
        assert_eq!(r.mean_cost, 0.0);
        assert_eq!(r.permutation, vec![0, 1, 2]);
    }

    #[test]
    fn permuted_rows_cost_nothing() {
        let a = one_d(&[0.0, 1.0, 5.0], &[0, 1, 0]);
        let b = one_d(&[5.0, 0.0, 1.0], &[0, 0, 1]);
        let r = hungarian_distance(&a, &b, LabelMode::Ignore).unwrap();
        assert_eq!(r.total_cost, 0.0);
        assert_eq!(r.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn small_one_d_example() {
        let a = one_d(&[0.0, 1.0], &[0, 0]);
        let b = one_d(&[0.9, 0.1], &[0, 0]);
        // brute force by hand: identity costs 0.9 + 0.9, swap costs 0.1 + 0.1
        let r = hungarian_distance(&a, &b, LabelMode::Ignore).unwrap();
        assert_eq!(r.permutation, vec![1, 0]);
        assert!((r.mean_cost - 0.1).abs() < 1e-12);
        assert!((r.total_cost - 0.2).abs() < 1e-12);
    }

    #[test]
    fn must_match_respects_labels() {
        let a = one_d(&[0.0, 1.0], &[0, 1]);
        let b = one_d(&[0.9, 0.1], &[0, 1]);
        let r = hungarian_distance(&a, &b, LabelMode::MustMatch).unwrap();
        assert_eq!(r.permutation, vec![0, 1]);
        assert!((r.mean_cost - 0.9).abs() < 1e-12);
        let bf = brute_force_distance(&a, &b, LabelMode::MustMatch).unwrap();
        assert_eq!(bf.permutation, r.permutation);
    }

    #[test]
    fn errors() {
        let a = one_d(&[0.0, 1.0], &[0, 1]);
        let b = one_d(&[0.0], &[0]);
        assert!(matches!(
            hungarian_distance(&a, &b, LabelMode::Ignore),
            Err(Error::Argument(_))
        ));
        let c = one_d(&[0.0, 1.0], &[1, 1]);
        assert!(matches!(
            hungarian_distance(&a, &c, LabelMode::MustMatch),
            Err(Error::Infeasible(_))
        ));
        let big = one_d(&[0.0; 9], &[0; 9]);
        assert!(brute_force_distance(&big, &big, LabelMode::Ignore).is_err());
    }

    #[test]
    fn brute_force_single_pair() {
        let a = Dataset::from_rows(&[vec![0.0, 0.0]], vec![1]).unwrap();
        let b = Dataset::from_rows(&[vec![3.0, 4.0]], vec![1]).unwrap();
        assert_eq!(brute_force_distance(&a, &b, LabelMode::Ignore).unwrap().total_cost, 5.0);
    }
}
