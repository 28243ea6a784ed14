//! Exact minimum-cost bipartite assignment.
//!
//! [`solve_assignment`] is the shortest-augmenting-path form of Kuhn–Munkres
//! with row/column potentials, `O(r²c)` for `r ≤ c`. Matrices with more rows
//! than columns are transposed first and the pairs mapped back.

use crate::error::{Error, Result};

/// Dense `rows × cols` matrix of finite costs.
#[derive(Clone, Debug, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Empty("cost matrix"));
        }
        if costs.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{rows}x{cols} cost matrix with {} entries",
                costs.len()
            )));
        }
        if let Some(pos) = costs.iter().position(|c| !c.is_finite()) {
            return Err(Error::NonFinite(format!(
                "cost at ({}, {}) is {}",
                pos / cols,
                pos % cols,
                costs[pos]
            )));
        }
        Ok(CostMatrix { rows, cols, costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged cost matrix".into()));
        }
        CostMatrix::new(r, c, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }

    pub fn transpose(&self) -> CostMatrix {
        let mut costs = Vec::with_capacity(self.costs.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                costs.push(self.get(r, c));
            }
        }
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            costs,
        }
    }

    /// Sum of the entries at `pairs`.
    pub fn cost_of(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(r, c)| self.get(r, c)).sum()
    }
}

/// Injective row↔column pairing, sorted by row.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Row matched to `col`, if any.
    pub fn row_for_col(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }
}

/// Minimum-cost assignment covering `min(rows, cols)` pairs.
pub fn solve_assignment(m: &CostMatrix) -> Assignment {
    if m.rows <= m.cols {
        let row_to_col = shortest_augmenting_path(m);
        let pairs: Vec<_> = row_to_col.into_iter().enumerate().collect();
        Assignment {
            total_cost: m.cost_of(&pairs),
            pairs,
        }
    } else {
        let t = m.transpose();
        let col_to_row = shortest_augmenting_path(&t);
        let mut pairs: Vec<_> = col_to_row
            .into_iter()
            .enumerate()
            .map(|(c, r)| (r, c))
            .collect();
        pairs.sort_unstable();
        Assignment {
            total_cost: m.cost_of(&pairs),
            pairs,
        }
    }
}

/// Requires `rows <= cols`. Returns the column assigned to each row.
fn shortest_augmenting_path(m: &CostMatrix) -> Vec<usize> {
    let (n, k) = (m.rows, m.cols);
    debug_assert!(n <= k);
    // 1-based with column 0 as the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; k + 1];
    let mut owner = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; k + 1];
        let mut used = vec![false; k + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=k {
                if used[j] {
                    continue;
                }
                let cur = m.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![usize::MAX; n];
    for j in 1..=k {
        if owner[j] != 0 {
            row_to_col[owner[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Largest `min(rows, cols)` the exhaustive oracle accepts.
pub const BRUTE_FORCE_LIMIT: usize = 8;

/// Exhaustive optimum over every injection of the smaller side into the
/// larger. Ties keep the lexicographically first pair list.
pub fn brute_force_assignment(m: &CostMatrix) -> Result<Assignment> {
    let small = m.rows.min(m.cols);
    if small > BRUTE_FORCE_LIMIT {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to min(rows, cols) <= {BRUTE_FORCE_LIMIT}, got {small}"
        )));
    }
    let transposed = m.rows > m.cols;
    let work = if transposed { m.transpose() } else { m.clone() };
    // every row of `work` picks a distinct column
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    let mut chosen = Vec::with_capacity(work.rows);
    let mut used = vec![false; work.cols];
    enumerate(&work, &mut chosen, &mut used, &mut |cols: &[usize]| {
        let mut pairs: Vec<(usize, usize)> = if transposed {
            cols.iter().enumerate().map(|(r, &c)| (c, r)).collect()
        } else {
            cols.iter().enumerate().map(|(r, &c)| (r, c)).collect()
        };
        pairs.sort_unstable();
        let cost = m.cost_of(&pairs);
        let better = match &best {
            None => true,
            Some((bc, bp)) => cost < *bc || (cost == *bc && pairs < *bp),
        };
        if better {
            best = Some((cost, pairs));
        }
    });
    let (total_cost, pairs) = best.expect("at least one injection");
    Ok(Assignment { pairs, total_cost })
}

fn enumerate(
    m: &CostMatrix,
    chosen: &mut Vec<usize>,
    used: &mut [bool],
    visit: &mut dyn FnMut(&[usize]),
) {
    if chosen.len() == m.rows {
        visit(chosen);
        return;
    }
    for c in 0..m.cols {
        if used[c] {
            continue;
        }
        used[c] = true;
        chosen.push(c);
        enumerate(m, chosen, used, visit);
        chosen.pop();
        used[c] = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mat(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_like() {
        let a = solve_assignment(&mat(&[&[0.0, 1.0], &[1.0, 0.0]]));
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 0.0);
        assert_eq!(
            brute_force_assignment(&mat(&[&[0.0, 1.0], &[1.0, 0.0]]))
                .unwrap()
                .total_cost,
            0.0
        );
    }

    #[test]
    fn three_by_three() {
        let m = mat(&[&[4.0, 1.0, 3.0], &[2.0, 0.0, 5.0], &[3.0, 2.0, 2.0]]);
        let a = solve_assignment(&m);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn wide_matrix() {
        let m = mat(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        let a = solve_assignment(&m);
        assert_eq!(a.total_cost, 4.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn tall_matrix_covers_all_columns() {
        let m = mat(&[&[1.0, 2.0], &[2.0, 4.0], &[3.0, 6.0]]);
        let a = solve_assignment(&m);
        assert_eq!(a.total_cost, 4.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
    }

    #[test]
    fn singleton() {
        let m = mat(&[&[7.0]]);
        assert_eq!(solve_assignment(&m).total_cost, 7.0);
        assert_eq!(brute_force_assignment(&m).unwrap().total_cost, 7.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            CostMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(CostMatrix::new(0, 2, vec![]).is_err());
        let big = CostMatrix::new(9, 9, vec![0.0; 81]).unwrap();
        assert!(brute_force_assignment(&big).is_err());
    }

    #[test]
    fn brute_force_tie_break_is_lexicographic() {
        let m = CostMatrix::new(2, 2, vec![1.0; 4]).unwrap();
        assert_eq!(
            brute_force_assignment(&m).unwrap().pairs,
            vec![(0, 0), (1, 1)]
        );
    }

    fn matrix_strategy() -> impl Strategy<Value = CostMatrix> {
        (1usize..=7, 1usize..=7).prop_flat_map(|(r, c)| {
            prop::collection::vec(-50i32..50, r * c).prop_map(move |v| {
                CostMatrix::new(r, c, v.into_iter().map(f64::from).collect()).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn matches_brute_force(m in matrix_strategy()) {
            let fast = solve_assignment(&m);
            let slow = brute_force_assignment(&m).unwrap();
            prop_assert_eq!(fast.total_cost, slow.total_cost);
            prop_assert_eq!(fast.pairs.len(), m.rows().min(m.cols()));
            let mut rows: Vec<_> = fast.pairs.iter().map(|p| p.0).collect();
            let mut cols: Vec<_> = fast.pairs.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), fast.pairs.len());
            prop_assert_eq!(cols.len(), fast.pairs.len());
        }

        #[test]
        fn row_shift_shifts_cost(m in matrix_strategy(), row in 0usize..7, shift in -20i32..20) {
            // only rows that are always matched keep the shift exact
            prop_assume!(m.rows() <= m.cols());
            let row = row % m.rows();
            let base = solve_assignment(&m);
            let mut costs = Vec::new();
            for r in 0..m.rows() {
                for c in 0..m.cols() {
                    let add = if r == row { f64::from(shift) } else { 0.0 };
                    costs.push(m.get(r, c) + add);
                }
            }
            let shifted = CostMatrix::new(m.rows(), m.cols(), costs).unwrap();
            let after = solve_assignment(&shifted);
            prop_assert_eq!(after.total_cost, base.total_cost + f64::from(shift));
            prop_assert_eq!(shifted.cost_of(&base.pairs), after.total_cost);
        }
    }
}
