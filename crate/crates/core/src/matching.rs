//! Ground-truth-to-query assignment: entity and linearized relation costs, an
//! O(N³) Hungarian solver with a deterministic tie-break, an exhaustive oracle
//! for small instances, and the exact quadratic objective as a diagnostic.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{PredictedGraph, SceneGraph};
use crate::losses::giou;

/// Weights for the matching cost terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchCostConfig {
    pub w_class: f64,
    pub w_l1: f64,
    pub w_giou: f64,
    pub w_rel: f64,
}

impl Default for MatchCostConfig {
    fn default() -> Self {
        MatchCostConfig { w_class: 1.0, w_l1: 5.0, w_giou: 2.0, w_rel: 1.0 }
    }
}

impl MatchCostConfig {
    pub fn validate(&self) -> Result<()> {
        let ws = [self.w_class, self.w_l1, self.w_giou, self.w_rel];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("matching weights must be nonnegative".into()));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("at least one matching weight must be positive".into()));
        }
        Ok(())
    }
}

/// A bijection from padded GT rows to query columns with its cost.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Assignment {
    /// sigma[i] is the query assigned to GT row i.
    pub sigma: Vec<usize>,
    pub total_cost: f64,
    pub per_pair_costs: Vec<f64>,
}

fn check_same_size(op: &str, gt: &SceneGraph, pred: &PredictedGraph) -> Result<usize> {
    let n = pred.n_queries();
    if gt.n_entities() != n {
        return Err(Error::shape(op, format!("padded GT has {} nodes, prediction has {n} queries", gt.n_entities())));
    }
    if gt.n_predicates() != pred.relation_scores.shape().2 {
        return Err(Error::shape(
            op,
            format!("GT has {} predicates, prediction has {}", gt.n_predicates(), pred.relation_scores.shape().2),
        ));
    }
    Ok(n)
}

/// Per-(GT row, query) entity cost:
/// 1{c_i≠∅}·(w_class·(1−p̂_a(c_i)) + w_l1·‖b_i−b̂_a‖₁ + w_giou·(1−GIoU)).
/// Dummy rows cost zero everywhere.
pub fn entity_cost(gt: &SceneGraph, pred: &PredictedGraph, cfg: &MatchCostConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n = check_same_size("entity_cost", gt, pred)?;
    let no_object = pred.no_object_id();
    let mut cost = vec![vec![0.0; n]; n];
    for (i, e) in gt.entities.iter().enumerate() {
        if e.class_id == no_object {
            continue;
        }
        if e.class_id >= pred.n_class_cols() {
            return Err(Error::InvalidInput(format!(
                "GT class {} outside prediction class space of {}",
                e.class_id,
                pred.n_class_cols()
            )));
        }
        for a in 0..n {
            let p_class = pred.class_probs[a][e.class_id];
            let l1 = e.bbox.l1_distance(&pred.boxes[a]);
            let g = giou(&e.bbox, &pred.boxes[a])?;
            cost[i][a] = cfg.w_class * (1.0 - p_class) + cfg.w_l1 * l1 + cfg.w_giou * (1.0 - g);
        }
    }
    Ok(cost)
}

/// Linearized relation cost. For each candidate pairing (GT row i → query a),
/// the column index j runs over positions and is used on both sides: GT bits
/// r[i][j] against predicted scores s[a][j]. Real-real pairs pay for missed GT
/// bits, pairs touching a dummy pay for predicted mass.
pub fn relation_cost_linearized(gt: &SceneGraph, pred: &PredictedGraph, cfg: &MatchCostConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let n = check_same_size("relation_cost_linearized", gt, pred)?;
    let p = gt.n_predicates();
    let no_object = pred.no_object_id();
    let real: Vec<bool> = gt.entities.iter().map(|e| e.class_id != no_object).collect();
    let mut cost = vec![vec![0.0; n]; n];
    for i in 0..n {
        for a in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                let r = gt.relations.pair(i, j);
                let s = pred.relation_scores.pair(a, j);
                if real[i] && real[j] {
                    for k in 0..p {
                        acc += (1.0 - s[k]) * r[k];
                    }
                } else {
                    for k in 0..p {
                        acc += s[k] * (1.0 - r[k]);
                    }
                }
            }
            cost[i][a] = cfg.w_rel * acc;
        }
    }
    Ok(cost)
}

fn validate_cost_matrix(op: &str, cost: &[Vec<f64>]) -> Result<usize> {
    let n = cost.len();
    for row in cost {
        if row.len() != n {
            return Err(Error::shape(op, format!("cost matrix is not square: {n} rows, row of width {}", row.len())));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{op} cost matrix")));
        }
    }
    Ok(n)
}

fn assignment_from_sigma(cost: &[Vec<f64>], sigma: Vec<usize>) -> Assignment {
    let per_pair_costs: Vec<f64> = sigma.iter().enumerate().map(|(i, &j)| cost[i][j]).collect();
    let total_cost = per_pair_costs.iter().sum();
    Assignment { sigma, total_cost, per_pair_costs }
}

/// Kuhn-style augmenting path over an adjacency list; returns true when `row`
/// can be matched. `col_of_row`/`row_of_col` use usize::MAX as "free".
fn try_augment(
    adj: &[Vec<usize>],
    row: usize,
    visited: &mut [bool],
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    for &j in &adj[row] {
        if visited[j] {
            continue;
        }
        visited[j] = true;
        if row_of_col[j] == usize::MAX
            || try_augment(adj, row_of_col[j], visited, col_of_row, row_of_col)
        {
            col_of_row[row] = j;
            row_of_col[j] = row;
            return true;
        }
    }
    false
}

fn max_matching_size(adj: &[Vec<usize>], n_rows: usize, n_cols: usize) -> usize {
    let mut col_of_row = vec![usize::MAX; n_rows];
    let mut row_of_col = vec![usize::MAX; n_cols];
    let mut size = 0;
    for r in 0..n_rows {
        let mut visited = vec![false; n_cols];
        if try_augment(adj, r, &mut visited, &mut col_of_row, &mut row_of_col) {
            size += 1;
        }
    }
    size
}

/// Among all minimum-cost assignments, pick the lexicographically smallest σ.
/// Every optimal assignment lives on the tight edges of the optimal dual
/// (reduced cost ≈ 0), so we greedily fix the smallest feasible column per
/// row, re-testing perfect-matchability after each choice.
fn lex_smallest_on_tight_edges(cost: &[Vec<f64>], u: &[f64], v: &[f64], eps: f64) -> Vec<usize> {
    let n = cost.len();
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| cost[i][j] - u[i] - v[j] <= eps).collect())
        .collect();
    let mut sigma = vec![usize::MAX; n];
    let mut used_col = vec![false; n];
    for i in 0..n {
        let mut chosen = usize::MAX;
        for &j in &tight[i] {
            if used_col[j] {
                continue;
            }
            // Feasibility: rows i+1.. must still admit a perfect matching into
            // the remaining columns once (i → j) is fixed.
            let remaining_rows = n - i - 1;
            let adj: Vec<Vec<usize>> = (i + 1..n)
                .map(|r| tight[r].iter().cloned().filter(|&c| !used_col[c] && c != j).collect())
                .collect();
            if max_matching_size(&adj, remaining_rows, n) == remaining_rows {
                chosen = j;
                break;
            }
        }
        debug_assert!(chosen != usize::MAX, "tight graph lost perfect matching");
        sigma[i] = chosen;
        used_col[chosen] = true;
    }
    sigma
}

/// Minimum-cost perfect assignment on a square matrix in O(N³), via the
/// shortest-augmenting-path formulation with dual potentials. Ties are broken
/// toward the lexicographically smallest σ.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = validate_cost_matrix("hungarian", cost)?;
    if n == 0 {
        return Ok(Assignment { sigma: vec![], total_cost: 0.0, per_pair_costs: vec![] });
    }

    // 1-indexed arrays; p[j] is the row matched to column j, p[0] the row
    // currently being inserted.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
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

    let max_abs = cost.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let eps = 1e-9 * (1.0 + max_abs);
    let u0: Vec<f64> = (0..n).map(|i| u[i + 1]).collect();
    let v0: Vec<f64> = (0..n).map(|j| v[j + 1]).collect();
    let sigma = lex_smallest_on_tight_edges(cost, &u0, &v0, eps);
    Ok(assignment_from_sigma(cost, sigma))
}

/// Exhaustive minimum over all N! permutations; refuses N > 9. Same contract
/// as `hungarian`, including the lexicographic tie-break (enumeration order is
/// lexicographic and only strictly better totals replace the incumbent).
pub fn brute_force_match(cost: &[Vec<f64>]) -> Result<Assignment> {
    let n = validate_cost_matrix("brute_force_match", cost)?;
    if n > 9 {
        return Err(Error::InvalidInput(format!("brute_force_match refuses N={n} > 9")));
    }
    if n == 0 {
        return Ok(Assignment { sigma: vec![], total_cost: 0.0, per_pair_costs: vec![] });
    }
    let mut best_sigma: Option<Vec<usize>> = None;
    let mut best_total = f64::INFINITY;
    let mut sigma = vec![usize::MAX; n];
    let mut used = vec![false; n];
    fn rec(
        cost: &[Vec<f64>],
        depth: usize,
        partial: f64,
        sigma: &mut [usize],
        used: &mut [bool],
        best_total: &mut f64,
        best_sigma: &mut Option<Vec<usize>>,
    ) {
        let n = cost.len();
        if depth == n {
            if partial < *best_total {
                *best_total = partial;
                *best_sigma = Some(sigma.to_vec());
            }
            return;
        }
        for j in 0..n {
            if used[j] {
                continue;
            }
            used[j] = true;
            sigma[depth] = j;
            rec(cost, depth + 1, partial + cost[depth][j], sigma, used, best_total, best_sigma);
            used[j] = false;
        }
    }
    rec(cost, 0, 0.0, &mut sigma, &mut used, &mut best_total, &mut best_sigma);
    Ok(assignment_from_sigma(cost, best_sigma.expect("nonempty matrix has a permutation")))
}

fn validate_sigma(n: usize, sigma: &[usize]) -> Result<()> {
    if sigma.len() != n {
        return Err(Error::InvalidInput(format!("sigma has length {}, expected {n}", sigma.len())));
    }
    let mut seen = vec![false; n];
    for &j in sigma {
        if j >= n || seen[j] {
            return Err(Error::InvalidInput("sigma is not a bijection".into()));
        }
        seen[j] = true;
    }
    Ok(())
}

/// Exact quadratic objective at a fixed σ: entity costs along the assignment
/// plus relation costs indexed by σ on both endpoints. Diagnostic only; the
/// shipped matcher minimizes the linearized surrogate.
pub fn quadratic_cost(
    gt: &SceneGraph,
    pred: &PredictedGraph,
    sigma: &[usize],
    cfg: &MatchCostConfig,
) -> Result<f64> {
    cfg.validate()?;
    let n = check_same_size("quadratic_cost", gt, pred)?;
    validate_sigma(n, sigma)?;
    let p = gt.n_predicates();
    let no_object = pred.no_object_id();
    let real: Vec<bool> = gt.entities.iter().map(|e| e.class_id != no_object).collect();

    let ec = entity_cost(gt, pred, cfg)?;
    let mut total: f64 = (0..n).map(|i| ec[i][sigma[i]]).sum();
    for i in 0..n {
        for j in 0..n {
            let r = gt.relations.pair(i, j);
            let s = pred.relation_scores.pair(sigma[i], sigma[j]);
            let mut acc = 0.0;
            if real[i] && real[j] {
                for k in 0..p {
                    acc += (1.0 - s[k]) * r[k];
                }
            } else {
                for k in 0..p {
                    acc += s[k] * (1.0 - r[k]);
                }
            }
            total += cfg.w_rel * acc;
        }
    }
    Ok(total)
}

/// Full matcher: pad GT to the query count, sum entity and linearized
/// relation costs, and solve the assignment.
pub fn match_graphs(gt: &SceneGraph, pred: &PredictedGraph, cfg: &MatchCostConfig) -> Result<Assignment> {
    let n = pred.n_queries();
    let m = gt.n_entities();
    if m > n {
        return Err(Error::GtExceedsQueries { gt: m, queries: n });
    }
    let padded = gt.pad_to(n, pred.no_object_id())?;
    let ec = entity_cost(&padded, pred, cfg)?;
    let rc = relation_cost_linearized(&padded, pred, cfg)?;
    let cost: Vec<Vec<f64>> = ec
        .iter()
        .zip(&rc)
        .map(|(er, rr)| er.iter().zip(rr).map(|(a, b)| a + b).collect())
        .collect();
    hungarian(&cost)
}
