//! Rectangular linear assignment by shortest augmenting paths.
//!
//! Each row of a `rows x cols` cost matrix is matched to a distinct column
//! when `rows <= cols`; otherwise the problem is solved on the transpose and
//! exactly `cols` rows are matched. The matching minimizes the total cost.

use crate::error::{Error, Result};

/// Minimum-cost matching of a row-major `rows x cols` matrix.
///
/// Returns `(row, col)` pairs sorted by row; `min(rows, cols)` pairs in total.
pub fn linear_sum_assignment(cost: &[f64], rows: usize, cols: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != rows * cols {
        return Err(Error::contract("cost matrix size mismatch"));
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::contract("cost matrix entries must be finite"));
    }
    if rows == 0 || cols == 0 {
        return Ok(Vec::new());
    }
    if rows <= cols {
        let col4row = solve_wide(cost, rows, cols);
        Ok(col4row.into_iter().enumerate().collect())
    } else {
        let mut t = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = cost[i * cols + j];
            }
        }
        let row4col = solve_wide(&t, cols, rows);
        let mut pairs: Vec<(usize, usize)> = row4col.into_iter().enumerate().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Total cost of a set of `(row, col)` pairs.
pub fn assignment_cost(cost: &[f64], cols: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * cols + j]).sum()
}

const NONE: usize = usize::MAX;

struct State {
    u: Vec<f64>,
    v: Vec<f64>,
    shortest: Vec<f64>,
    path: Vec<usize>,
    col4row: Vec<usize>,
    row4col: Vec<usize>,
    row_seen: Vec<bool>,
    col_seen: Vec<bool>,
    remaining: Vec<usize>,
}

/// Requires `rows <= cols` and finite costs; returns the column of each row.
fn solve_wide(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    let mut s = State {
        u: vec![0.0; rows],
        v: vec![0.0; cols],
        shortest: vec![f64::INFINITY; cols],
        path: vec![NONE; cols],
        col4row: vec![NONE; rows],
        row4col: vec![NONE; cols],
        row_seen: vec![false; rows],
        col_seen: vec![false; cols],
        remaining: vec![0; cols],
    };
    for cur_row in 0..rows {
        let (sink, min_val) = augmenting_path(cost, cols, &mut s, cur_row);
        s.u[cur_row] += min_val;
        for i in 0..rows {
            if s.row_seen[i] && i != cur_row {
                s.u[i] += min_val - s.shortest[s.col4row[i]];
            }
        }
        for j in 0..cols {
            if s.col_seen[j] {
                s.v[j] -= min_val - s.shortest[j];
            }
        }
        let mut j = sink;
        loop {
            let i = s.path[j];
            s.row4col[j] = i;
            std::mem::swap(&mut s.col4row[i], &mut j);
            if i == cur_row {
                break;
            }
        }
    }
    s.col4row
}

fn augmenting_path(cost: &[f64], cols: usize, s: &mut State, cur_row: usize) -> (usize, f64) {
    let mut min_val = 0.0;
    let mut num_remaining = cols;
    for (it, r) in s.remaining.iter_mut().enumerate() {
        *r = cols - it - 1;
    }
    s.row_seen.fill(false);
    s.col_seen.fill(false);
    s.shortest.fill(f64::INFINITY);

    let mut sink = NONE;
    let mut i = cur_row;
    while sink == NONE {
        let mut index = NONE;
        let mut lowest = f64::INFINITY;
        s.row_seen[i] = true;
        for it in 0..num_remaining {
            let j = s.remaining[it];
            let r = min_val + cost[i * cols + j] - s.u[i] - s.v[j];
            if r < s.shortest[j] {
                s.path[j] = i;
                s.shortest[j] = r;
            }
            if s.shortest[j] < lowest || (s.shortest[j] == lowest && s.row4col[j] == NONE) {
                lowest = s.shortest[j];
                index = it;
            }
        }
        // finite costs always leave a reachable column
        min_val = lowest;
        let j = s.remaining[index];
        if s.row4col[j] == NONE {
            sink = j;
        } else {
            i = s.row4col[j];
        }
        s.col_seen[j] = true;
        num_remaining -= 1;
        s.remaining[index] = s.remaining[num_remaining];
    }
    (sink, min_val)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Minimum total cost over all injections of the smaller side into the
    /// larger, each injection summed in row order like [`assignment_cost`].
    pub(crate) fn brute_force_min(cost: &[f64], rows: usize, cols: usize) -> f64 {
        fn rec(
            small: usize,
            large: usize,
            r: usize,
            used: &mut Vec<bool>,
            chosen: &mut Vec<usize>,
            out: &mut dyn FnMut(&[usize]),
        ) {
            if r == small {
                out(chosen);
                return;
            }
            for c in 0..large {
                if !used[c] {
                    used[c] = true;
                    chosen.push(c);
                    rec(small, large, r + 1, used, chosen, out);
                    chosen.pop();
                    used[c] = false;
                }
            }
        }
        let (small, large) = (rows.min(cols), rows.max(cols));
        let mut best = f64::INFINITY;
        let mut eval = |chosen: &[usize]| {
            let mut pairs: Vec<(usize, usize)> = chosen
                .iter()
                .enumerate()
                .map(|(a, &b)| if rows <= cols { (a, b) } else { (b, a) })
                .collect();
            pairs.sort_unstable();
            best = best.min(assignment_cost(cost, cols, &pairs));
        };
        rec(small, large, 0, &mut vec![false; large], &mut Vec::new(), &mut eval);
        best
    }

    #[test]
    fn two_by_two_hand_case() {
        let cost = [1.0, 2.0, 3.0, 1.0];
        let pairs = linear_sum_assignment(&cost, 2, 2).unwrap();
        assert_eq!(pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(assignment_cost(&cost, 2, &pairs), 2.0);
    }

    #[test]
    fn single_cell() {
        assert_eq!(linear_sum_assignment(&[4.5], 1, 1).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn tall_matrix_leaves_rows_unmatched() {
        // three rows, one column: the cheapest row wins
        let pairs = linear_sum_assignment(&[5.0, 1.0, 3.0], 3, 1).unwrap();
        assert_eq!(pairs, vec![(1, 0)]);
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(linear_sum_assignment(&[], 0, 3).unwrap().is_empty());
        assert!(linear_sum_assignment(&[1.0, f64::NAN], 1, 2).is_err());
        assert!(linear_sum_assignment(&[1.0], 1, 2).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(rows in 1usize..=6, cols in 1usize..=6, seed in prop::collection::vec(-50i32..50, 36)) {
            let cost: Vec<f64> = seed[..rows * cols].iter().map(|&x| x as f64 * 0.5).collect();
            let pairs = linear_sum_assignment(&cost, rows, cols).unwrap();
            prop_assert_eq!(pairs.len(), rows.min(cols));
            let mut rs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            rs.dedup();
            cs.sort_unstable();
            cs.dedup();
            prop_assert_eq!(rs.len(), pairs.len());
            prop_assert_eq!(cs.len(), pairs.len());
            prop_assert_eq!(assignment_cost(&cost, cols, &pairs), brute_force_min(&cost, rows, cols));
        }
    }
}
