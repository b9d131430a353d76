//! Minimum-cost assignment of every ground-truth column to a distinct query.
//!
//! Shortest augmenting paths with row/column potentials, `O(G²·Q)`. Among
//! optimal assignments the lexicographically smallest sequence of query
//! indices (ordered by ground-truth index) is returned.

use super::{CostMatrix, MatchAssignment};

struct Solution {
    /// `col_of_row[g]` is the query assigned to ground-truth `g`.
    col_of_row: Vec<usize>,
    row_pot: Vec<f64>,
    col_pot: Vec<f64>,
}

/// Solves the rectangular problem with `rows <= cols`, where `cost(r, c)`
/// is the price of assigning row `r` to column `c`.
fn solve(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> Solution {
    debug_assert!(rows <= cols);
    // 1-based bookkeeping; index 0 is the virtual source column.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut row_of_col = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for r in 1..=rows {
        row_of_col[0] = r;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut col_of_row = vec![0; rows];
    for j in 1..=cols {
        if row_of_col[j] != 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    Solution { col_of_row, row_pot: u[1..].to_vec(), col_pot: v[1..].to_vec() }
}

fn total(rows: &[usize], cols: &[usize], assignment: &[usize], cost: &CostMatrix) -> f64 {
    assignment.iter().enumerate().map(|(r, &c)| cost.get(cols[c], rows[r])).sum()
}

/// Optimal assignment with lexicographic tie-breaking.
pub fn hungarian(cost: &CostMatrix) -> MatchAssignment {
    let (q, g) = (cost.queries(), cost.gts());
    if g == 0 {
        return MatchAssignment::new(Vec::new());
    }
    let at = |gt: usize, query: usize| cost.get(query, gt);
    let full = solve(g, q, at);
    let all_rows: Vec<usize> = (0..g).collect();
    let all_cols: Vec<usize> = (0..q).collect();
    let optimum = total(&all_rows, &all_cols, &full.col_of_row, cost);
    let scale = cost.max_abs().max(1.0) * g as f64;
    let tol = 1e-10 * scale;

    let mut chosen = Vec::with_capacity(g);
    let mut fixed_cost = 0.0;
    let mut used = vec![false; q];
    for gt in 0..g {
        let rest_rows: Vec<usize> = (gt + 1..g).collect();
        let mut picked = None;
        for query in 0..q {
            if used[query] {
                continue;
            }
            // complementary slackness: any optimal assignment uses only tight edges
            let reduced = cost.get(query, gt) - full.row_pot[gt] - full.col_pot[query];
            if reduced > tol {
                continue;
            }
            let rest_cols: Vec<usize> = (0..q).filter(|&c| !used[c] && c != query).collect();
            let rest_cost = if rest_rows.is_empty() {
                0.0
            } else {
                let sub = solve(rest_rows.len(), rest_cols.len(), |r, c| cost.get(rest_cols[c], rest_rows[r]));
                total(&rest_rows, &rest_cols, &sub.col_of_row, cost)
            };
            if fixed_cost + cost.get(query, gt) + rest_cost <= optimum + tol {
                picked = Some(query);
                break;
            }
        }
        // numerical fallback: keep the unconstrained optimum's choice
        let query = picked.unwrap_or(full.col_of_row[gt]);
        used[query] = true;
        fixed_cost += cost.get(query, gt);
        chosen.push((query, gt));
    }
    MatchAssignment::new(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(cost: &CostMatrix) -> (f64, Vec<usize>) {
        fn rec(cost: &CostMatrix, gt: usize, used: &mut Vec<bool>, cur: &mut Vec<usize>, best: &mut (f64, Vec<usize>)) {
            if gt == cost.gts() {
                let t: f64 = cur.iter().enumerate().map(|(g, &q)| cost.get(q, g)).sum();
                if t < best.0 {
                    *best = (t, cur.clone());
                }
                return;
            }
            for q in 0..cost.queries() {
                if !used[q] {
                    used[q] = true;
                    cur.push(q);
                    rec(cost, gt + 1, used, cur, best);
                    cur.pop();
                    used[q] = false;
                }
            }
        }
        let mut best = (f64::INFINITY, Vec::new());
        rec(cost, 0, &mut vec![false; cost.queries()], &mut Vec::new(), &mut best);
        best
    }

    fn matrix(rows: &[&[f64]]) -> CostMatrix {
        let q = rows.len();
        let g = rows.first().map_or(0, |r| r.len());
        CostMatrix::from_rows(q, g, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn identity_on_zero_diagonal() {
        let m = matrix(&[&[0.0, 5.0, 5.0], &[5.0, 0.0, 5.0], &[5.0, 5.0, 0.0]]);
        assert_eq!(hungarian(&m).pairs(), &[(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn single_cell() {
        assert_eq!(hungarian(&matrix(&[&[3.5]])).pairs(), &[(0, 0)]);
    }

    #[test]
    fn empty_gt() {
        let m = CostMatrix::from_rows(4, 0, vec![]).unwrap();
        assert!(hungarian(&m).pairs().is_empty());
    }

    #[test]
    fn ties_break_lexicographically() {
        // all assignments cost the same: pick queries 0, 1 in gt order
        let m = matrix(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]);
        assert_eq!(hungarian(&m).pairs(), &[(0, 0), (1, 1)]);
        // two optima: gt0->q1,gt1->q0 and gt0->q2,gt1->q0; the first is smaller
        let m = matrix(&[&[9.0, 0.0], &[1.0, 9.0], &[1.0, 9.0]]);
        assert_eq!(hungarian(&m).pairs(), &[(1, 0), (0, 1)]);
    }

    #[test]
    fn matches_enumeration_on_six_by_four() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let data: Vec<f64> = (0..24).map(|_| rng.random::<f64>()).collect();
            let m = CostMatrix::from_rows(6, 4, data).unwrap();
            let (best, _) = brute_force(&m);
            assert_eq!(hungarian(&m).total_cost(&m), best);
        }
    }

    #[test]
    fn integer_ties_match_lexicographic_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let q = rng.random_range(1..=5);
            let g = rng.random_range(0..=q);
            let data: Vec<f64> = (0..q * g).map(|_| rng.random_range(0..3) as f64).collect();
            let m = CostMatrix::from_rows(q, g, data).unwrap();
            // enumeration visits assignments in lexicographic order and keeps the first strict minimum
            let (best, seq) = brute_force(&m);
            let got = hungarian(&m);
            assert_eq!(got.total_cost(&m), if g == 0 { 0.0 } else { best });
            assert_eq!(got.pairs().iter().map(|p| p.0).collect::<Vec<_>>(), seq);
        }
    }
}
