//! Bipartite matching between decoder queries and ground-truth targets.
//!
//! [`hungarian_solve`] is an O(n²m) shortest-augmenting-path solver with a
//! lexicographic tie-break pass on top; [`brute_force_assignment`] enumerates
//! every injection and is the test oracle for it.

use thiserror::Error;

use crate::data::PegSampleGT;
use crate::geometry::{box_l1, giou_corners, BoxCXCYWH};
use crate::linalg::{log_sum_exp, Matrix};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignmentError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite cost at ({row}, {col})")]
    NonFiniteCost { row: usize, col: usize },
    #[error("{rows}x{cols} exceeds the brute-force oracle bound")]
    OracleBound { rows: usize, cols: usize },
    #[error("invalid cost weights: {0}")]
    InvalidWeights(String),
}

/// Matching cost coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostWeights {
    pub w_class: f64,
    pub w_bbox: f64,
    pub w_giou: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        Self {
            w_class: 1.0,
            w_bbox: 5.0,
            w_giou: 2.0,
        }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), AssignmentError> {
        for (name, v) in [
            ("w_class", self.w_class),
            ("w_bbox", self.w_bbox),
            ("w_giou", self.w_giou),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(AssignmentError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// One matchable (box, phrase) target.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTarget {
    pub bbox: BoxCXCYWH,
    pub tokens: Vec<usize>,
}

/// A phrase with `k` boxes yields `k` targets sharing the phrase tokens.
pub fn flatten_targets(sample: &PegSampleGT) -> Vec<MatchTarget> {
    sample
        .targets()
        .map(|(b, phrase)| MatchTarget {
            bbox: BoxCXCYWH::from(*b),
            tokens: phrase.tokens().collect(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(query_index, gt_index)` sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    fn empty() -> Self {
        Self {
            pairs: Vec::new(),
            total_cost: 0.0,
        }
    }

    /// Target index matched to each query.
    pub fn target_of(&self, n_queries: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_queries];
        for &(q, g) in &self.pairs {
            out[q] = Some(g);
        }
        out
    }
}

/// Sum of the chosen entries in query order. Both solvers use this so that
/// equal assignments produce bit-equal costs.
fn canonical_cost(cost: &Matrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().fold(0.0, |acc, &(q, g)| acc + cost[(q, g)])
}

/// Mean over the phrase tokens of `-log softmax(logits / tau)`.
pub fn phrase_cost(logits: &[f64], tokens: &[usize], tau: f64) -> f64 {
    let scaled: Vec<f64> = logits.iter().map(|l| l / tau).collect();
    let lse = log_sum_exp(&scaled);
    let total: f64 = tokens.iter().map(|&j| lse - scaled[j]).sum();
    total / tokens.len() as f64
}

/// `cost[q][g] = w_class * C_phrase + w_bbox * L1 - w_giou * GIOU`.
///
/// `phrase_logits` has one row per query over the `n_text + 1` extended
/// positions (the last one is `no_phrase`).
pub fn matching_cost_matrix(
    query_boxes: &[BoxCXCYWH],
    phrase_logits: &Matrix,
    targets: &[MatchTarget],
    weights: CostWeights,
    tau: f64,
) -> Result<Matrix, AssignmentError> {
    weights.validate()?;
    if phrase_logits.rows() != query_boxes.len() {
        return Err(AssignmentError::DimensionMismatch(format!(
            "{} query boxes but {} logit rows",
            query_boxes.len(),
            phrase_logits.rows()
        )));
    }
    if !phrase_logits.is_finite() {
        return Err(AssignmentError::DimensionMismatch(
            "non-finite phrase logits".into(),
        ));
    }
    for t in targets {
        if t.tokens.is_empty() || t.tokens.iter().any(|&j| j + 1 >= phrase_logits.cols()) {
            return Err(AssignmentError::DimensionMismatch(format!(
                "target tokens {:?} outside {} text positions",
                t.tokens,
                phrase_logits.cols().saturating_sub(1)
            )));
        }
    }
    let mut cost = Matrix::zeros(query_boxes.len(), targets.len());
    for (q, qb) in query_boxes.iter().enumerate() {
        let logits = phrase_logits.row(q);
        let q_corners = qb.corners();
        for (g, t) in targets.iter().enumerate() {
            let c_phrase = if weights.w_class == 0.0 {
                0.0
            } else {
                phrase_cost(logits, &t.tokens, tau)
            };
            let c_bbox = box_l1(qb, &t.bbox);
            let c_giou = -giou_corners(&q_corners, &t.bbox.corners());
            cost[(q, g)] =
                weights.w_class * c_phrase + weights.w_bbox * c_bbox + weights.w_giou * c_giou;
        }
    }
    Ok(cost)
}

fn check_finite(cost: &Matrix) -> Result<(), AssignmentError> {
    for r in 0..cost.rows() {
        for c in 0..cost.cols() {
            if !cost[(r, c)].is_finite() {
                return Err(AssignmentError::NonFiniteCost { row: r, col: c });
            }
        }
    }
    Ok(())
}

/// Shortest augmenting path with row/column potentials. Requires
/// `rows <= cols`; returns the column of each row.
fn solve_rows_le_cols(cost: &Matrix) -> Vec<usize> {
    let (n, m) = (cost.rows(), cost.cols());
    debug_assert!(n <= m);
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: 1-based row assigned to column j (0 = none); column 0 is virtual.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
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
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// Optimal pairs for the sub-problem on the given rows and columns.
fn solve_subset(cost: &Matrix, rows: &[usize], cols: &[usize]) -> Vec<(usize, usize)> {
    if rows.is_empty() || cols.is_empty() {
        return Vec::new();
    }
    let mut sub = Matrix::zeros(rows.len(), cols.len());
    for (i, &r) in rows.iter().enumerate() {
        for (j, &c) in cols.iter().enumerate() {
            sub[(i, j)] = cost[(r, c)];
        }
    }
    let mut pairs: Vec<(usize, usize)> = if rows.len() <= cols.len() {
        solve_rows_le_cols(&sub)
            .into_iter()
            .enumerate()
            .map(|(i, j)| (rows[i], cols[j]))
            .collect()
    } else {
        solve_rows_le_cols(&sub.transpose())
            .into_iter()
            .enumerate()
            .map(|(j, i)| (rows[i], cols[j]))
            .collect()
    };
    pairs.sort_unstable();
    pairs
}

/// Minimum-cost assignment of `min(rows, cols)` pairs.
///
/// Among optimal assignments with bit-equal cost the lexicographically
/// smallest `(query, gt)` sequence is returned.
pub fn hungarian_solve(cost: &Matrix) -> Result<Assignment, AssignmentError> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Ok(Assignment::empty());
    }
    check_finite(cost)?;
    let all_rows: Vec<usize> = (0..n).collect();
    let all_cols: Vec<usize> = (0..m).collect();
    let optimum = solve_subset(cost, &all_rows, &all_cols);
    let mut best = canonical_cost(cost, &optimum);

    // Fix pairs one query at a time, taking the smallest column that still
    // admits an optimal completion.
    let k = n.min(m);
    let mut fixed: Vec<(usize, usize)> = Vec::with_capacity(k);
    let mut free_cols = all_cols;
    for q in 0..n {
        if fixed.len() == k {
            break;
        }
        let rest_rows: Vec<usize> = (q + 1..n).collect();
        let mut chosen = None;
        for (ci, &g) in free_cols.iter().enumerate() {
            let mut rest_cols = free_cols.clone();
            rest_cols.remove(ci);
            let needed = k - fixed.len() - 1;
            if rest_rows.len().min(rest_cols.len()) != needed {
                continue;
            }
            let mut candidate = fixed.clone();
            candidate.push((q, g));
            candidate.extend(solve_subset(cost, &rest_rows, &rest_cols));
            let c = canonical_cost(cost, &candidate);
            if c <= best {
                best = c;
                chosen = Some(ci);
                break;
            }
        }
        match chosen {
            Some(ci) => {
                let g = free_cols.remove(ci);
                fixed.push((q, g));
            }
            None => {
                // Skipping q is only possible when more rows than columns remain.
                let remaining_rows = n - q - 1;
                let remaining_cols = k - fixed.len();
                if remaining_rows < remaining_cols {
                    // Rounding disagreement between sub-solves; fall back to the
                    // unrefined optimum.
                    return Ok(Assignment {
                        total_cost: canonical_cost(cost, &optimum),
                        pairs: optimum,
                    });
                }
            }
        }
    }
    Ok(Assignment {
        total_cost: canonical_cost(cost, &fixed),
        pairs: fixed,
    })
}

const ORACLE_MAX_MIN_SIDE: usize = 8;
const ORACLE_MAX_INJECTIONS: u128 = 50_000_000;

/// Exhaustive enumeration of every injection, in lexicographic order; the
/// first strict minimum wins, which gives the same tie-break as
/// [`hungarian_solve`].
pub fn brute_force_assignment(cost: &Matrix) -> Result<Assignment, AssignmentError> {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Ok(Assignment::empty());
    }
    let k = n.min(m);
    let big = n.max(m) as u128;
    let injections: u128 = (0..k as u128).map(|i| big - i).product();
    if k > ORACLE_MAX_MIN_SIDE || injections > ORACLE_MAX_INJECTIONS {
        return Err(AssignmentError::OracleBound { rows: n, cols: m });
    }
    check_finite(cost)?;

    struct Search<'a> {
        cost: &'a Matrix,
        k: usize,
        used: Vec<bool>,
        current: Vec<(usize, usize)>,
        best: Option<(f64, Vec<(usize, usize)>)>,
    }

    impl Search<'_> {
        fn visit(&mut self, q: usize) {
            let n = self.cost.rows();
            if self.current.len() == self.k {
                let c = canonical_cost(self.cost, &self.current);
                if self.best.as_ref().is_none_or(|(b, _)| c < *b) {
                    self.best = Some((c, self.current.clone()));
                }
                return;
            }
            if q == n || n - q < self.k - self.current.len() {
                return;
            }
            for g in 0..self.cost.cols() {
                if self.used[g] {
                    continue;
                }
                self.used[g] = true;
                self.current.push((q, g));
                self.visit(q + 1);
                self.current.pop();
                self.used[g] = false;
            }
            self.visit(q + 1);
        }
    }

    let mut search = Search {
        cost,
        k,
        used: vec![false; m],
        current: Vec::with_capacity(k),
        best: None,
    };
    search.visit(0);
    let (total_cost, pairs) = search.best.expect("at least one injection");
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Matrix {
        Matrix::from_rows(rows)
    }

    #[test]
    fn small_examples() {
        let a = hungarian_solve(&m(&[vec![7.0]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.total_cost, 7.0);

        let a = hungarian_solve(&m(&[vec![1.0, 2.0], vec![2.0, 4.0]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 4.0);

        let id = m(&[
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 1.0],
            vec![1.0, 1.0, 0.0],
        ]);
        let a = brute_force_assignment(&id).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn empty_axes() {
        let a = hungarian_solve(&Matrix::zeros(0, 3)).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.total_cost, 0.0);
        assert!(hungarian_solve(&Matrix::zeros(3, 0))
            .unwrap()
            .pairs
            .is_empty());
    }

    #[test]
    fn rectangular_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (r, c) = if rng.gen_bool(0.5) { (3, 2) } else { (2, 3) };
            let rows: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let cost = m(&rows);
            let h = hungarian_solve(&cost).unwrap();
            let b = brute_force_assignment(&cost).unwrap();
            assert_eq!(h.total_cost, b.total_cost);
            assert_eq!(h.pairs, b.pairs);
            assert_eq!(h.pairs.len(), 2);
        }
    }

    #[test]
    fn ties_break_lexicographically() {
        // All-equal costs: every assignment is optimal.
        let cost = Matrix::filled(3, 4, 1.0);
        let h = hungarian_solve(&cost).unwrap();
        assert_eq!(h.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(h, brute_force_assignment(&cost).unwrap());

        let tall = Matrix::filled(4, 2, 2.0);
        let h = hungarian_solve(&tall).unwrap();
        assert_eq!(h.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(h, brute_force_assignment(&tall).unwrap());

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..300 {
            let r = rng.gen_range(1..=5);
            let c = rng.gen_range(1..=5);
            let rows: Vec<Vec<f64>> = (0..r)
                .map(|_| (0..c).map(|_| rng.gen_range(0..3) as f64).collect())
                .collect();
            let cost = m(&rows);
            assert_eq!(
                hungarian_solve(&cost).unwrap(),
                brute_force_assignment(&cost).unwrap(),
                "{rows:?}"
            );
        }
    }

    #[test]
    fn oracle_bound_and_non_finite() {
        assert!(matches!(
            brute_force_assignment(&Matrix::zeros(9, 9)),
            Err(AssignmentError::OracleBound { .. })
        ));
        let mut cost = Matrix::zeros(2, 2);
        cost[(1, 0)] = f64::NAN;
        assert_eq!(
            hungarian_solve(&cost),
            Err(AssignmentError::NonFiniteCost { row: 1, col: 0 })
        );
    }

    #[test]
    fn perfect_match_cost() {
        let b = BoxCXCYWH::new(0.5, 0.5, 0.2, 0.3).unwrap();
        // Probability ~1 on token 0 of a 2-token caption.
        let logits = m(&[vec![10.0, -10.0, -10.0]]);
        let target = MatchTarget {
            bbox: b,
            tokens: vec![0],
        };
        let cost = matching_cost_matrix(
            &[b],
            &logits,
            std::slice::from_ref(&target),
            CostWeights::default(),
            0.07,
        )
        .unwrap();
        assert!((cost[(0, 0)] + 2.0).abs() < 1e-9, "{}", cost[(0, 0)]);

        let zero = CostWeights {
            w_class: 0.0,
            w_bbox: 0.0,
            w_giou: 0.0,
        };
        let other = BoxCXCYWH::new(0.2, 0.3, 0.1, 0.1).unwrap();
        let cost =
            matching_cost_matrix(&[other], &logits, std::slice::from_ref(&target), zero, 0.07)
                .unwrap();
        assert_eq!(cost[(0, 0)], 0.0);

        assert_eq!(
            CostWeights::default(),
            CostWeights {
                w_class: 1.0,
                w_bbox: 5.0,
                w_giou: 2.0
            }
        );
        assert!(matches!(
            matching_cost_matrix(&[b, b], &logits, &[target], CostWeights::default(), 0.07),
            Err(AssignmentError::DimensionMismatch(_))
        ));
    }

    fn arb_matrix() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (1usize..=5, 1usize..=5).prop_flat_map(|(r, c)| {
            proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, c), r)
        })
    }

    proptest! {
        #[test]
        fn constant_shift_keeps_pairs(rows in arb_matrix(), shift in -10.0..10.0f64) {
            let cost = m(&rows);
            let shifted = m(&rows.iter().map(|r| r.iter().map(|v| v + shift).collect()).collect::<Vec<_>>());
            let a = hungarian_solve(&cost).unwrap();
            let b = hungarian_solve(&shifted).unwrap();
            prop_assert_eq!(a.pairs, b.pairs);
        }

        #[test]
        fn column_permutation_equivariance(rows in arb_matrix(), seed in any::<u64>()) {
            let cost = m(&rows);
            let cols = cost.cols();
            let mut perm: Vec<usize> = (0..cols).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..cols).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            // permuted[:, perm[j]] = cost[:, j]
            let mut permuted = Matrix::zeros(cost.rows(), cols);
            for r in 0..cost.rows() {
                for j in 0..cols {
                    permuted[(r, perm[j])] = cost[(r, j)];
                }
            }
            let a = hungarian_solve(&cost).unwrap();
            let b = hungarian_solve(&permuted).unwrap();
            let mapped: Vec<(usize, usize)> = a.pairs.iter().map(|&(q, g)| (q, perm[g])).collect();
            prop_assert_eq!(mapped, b.pairs);
        }
    }
}
