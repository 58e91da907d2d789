//! Exact 1-Wasserstein distance between finite discrete distributions
//! (transportation simplex) and the closed-form 2-Wasserstein distance
//! between diagonal Gaussians.

use ndarray::Array2;

use crate::{Error, Result};

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DiscreteDistribution {
    pub probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "probs[{i}] = {p} is negative or non-finite"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidDistribution(format!("mass sums to {sum}")));
        }
        Ok(Self { probs })
    }

    pub fn delta(index: usize, support: usize) -> Self {
        let mut probs = vec![0.0; support];
        probs[index] = 1.0;
        Self { probs }
    }
}

#[derive(Debug, Clone)]
pub struct TransportPlan {
    pub coupling: Array2<f64>,
    pub value: f64,
}

#[derive(Debug, Clone)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub stddev: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return Err(Error::DimensionMismatch(format!(
                "mean has {} entries, stddev has {}",
                mean.len(),
                stddev.len()
            )));
        }
        for (i, &s) in stddev.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "stddev[{i}] = {s} must be positive and finite"
                )));
            }
        }
        Ok(Self { mean, stddev })
    }
}

/// Closed-form W2 between diagonal Gaussians:
/// sqrt(||mu_a - mu_b||_2^2 + ||sigma_a - sigma_b||_2^2).
pub fn w2_diag_gaussian(a: &DiagGaussian, b: &DiagGaussian) -> Result<f64> {
    if a.mean.len() != b.mean.len() {
        return Err(Error::DimensionMismatch(format!(
            "gaussians have dims {} and {}",
            a.mean.len(),
            b.mean.len()
        )));
    }
    let mut sq = 0.0;
    for k in 0..a.mean.len() {
        let dm = a.mean[k] - b.mean[k];
        let ds = a.stddev[k] - b.stddev[k];
        sq += dm * dm + ds * ds;
    }
    Ok(sq.sqrt())
}

fn check_cost(cost: &Array2<f64>, m: usize, n: usize) -> Result<()> {
    if cost.dim() != (m, n) {
        return Err(Error::DimensionMismatch(format!(
            "cost is {:?}, supports are {m} and {n}",
            cost.dim()
        )));
    }
    for ((i, j), &c) in cost.indexed_iter() {
        if !c.is_finite() || c < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "cost[{i}][{j}] = {c} is negative or non-finite"
            )));
        }
    }
    Ok(())
}

/// Exact earth-mover distance via the transportation simplex: north-west-corner
/// start, MODI improvement, Bland's rule on degenerate pivots.
pub fn w1_discrete(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    cost: &Array2<f64>,
) -> Result<TransportPlan> {
    let m0 = p.probs.len();
    let n0 = q.probs.len();
    check_cost(cost, m0, n0)?;
    // zero-probability support points are pruned before solving
    let rows: Vec<usize> = (0..m0).filter(|&i| p.probs[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n0).filter(|&j| q.probs[j] > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| p.probs[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| q.probs[j]).collect();
    let sub_cost: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| cost[[i, j]]))
        .collect();
    let (flow, value) = transport_simplex(&supply, &demand, &sub_cost)?;
    let mut coupling = Array2::zeros((m0, n0));
    let n = cols.len();
    for (ri, &i) in rows.iter().enumerate() {
        for (cj, &j) in cols.iter().enumerate() {
            coupling[[i, j]] = flow[ri * n + cj];
        }
    }
    Ok(TransportPlan { coupling, value })
}

/// Value-only W1 on raw probability rows against a full ground-cost matrix.
/// Prunes zero support; used by the metric fixed-point inner loop.
pub fn w1_value(p: &[f64], q: &[f64], cost: &Array2<f64>) -> Result<f64> {
    let rows: Vec<usize> = (0..p.len()).filter(|&i| p[i] > 0.0).collect();
    let cols: Vec<usize> = (0..q.len()).filter(|&j| q[j] > 0.0).collect();
    let supply: Vec<f64> = rows.iter().map(|&i| p[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| q[j]).collect();
    let sub_cost: Vec<f64> = rows
        .iter()
        .flat_map(|&i| cols.iter().map(move |&j| cost[[i, j]]))
        .collect();
    let (_, value) = transport_simplex(&supply, &demand, &sub_cost)?;
    Ok(value)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Node {
    Row(usize),
    Col(usize),
}

/// Transportation simplex over positive supplies/demands (sums equal within
/// tolerance). Returns (flow, objective), flow flat row-major m x n.
fn transport_simplex(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<(Vec<f64>, f64)> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 {
        return Err(Error::InvalidDistribution("empty support".into()));
    }
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    if (total_s - total_d).abs() > PROB_SUM_TOL {
        return Err(Error::InvalidDistribution(format!(
            "marginal mismatch: supply {total_s} vs demand {total_d}"
        )));
    }

    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    let mut row_adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut col_adj: Vec<Vec<usize>> = vec![Vec::new(); n];

    // north-west corner start: exactly m + n - 1 basic cells
    {
        let mut a: Vec<f64> = supply.to_vec();
        let mut b: Vec<f64> = demand.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let t = a[i].min(b[j]);
            flow[i * n + j] = t;
            basic[i * n + j] = true;
            row_adj[i].push(j);
            col_adj[j].push(i);
            a[i] -= t;
            b[j] -= t;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if a[i] <= b[j] && i < m - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let max_cost = cost.iter().fold(0.0f64, |acc, &c| acc.max(c.abs()));
    let eps = 1e-12 * (1.0 + max_cost);
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    let max_pivots = 200 * (m + n) * (m + n) + 1000;

    for _pivot in 0..max_pivots {
        // potentials from the basis spanning tree
        let mut u_set = vec![false; m];
        let mut v_set = vec![false; n];
        let mut stack = vec![Node::Row(0)];
        u[0] = 0.0;
        u_set[0] = true;
        while let Some(node) = stack.pop() {
            match node {
                Node::Row(i) => {
                    for &j in &row_adj[i] {
                        if !v_set[j] {
                            v[j] = cost[i * n + j] - u[i];
                            v_set[j] = true;
                            stack.push(Node::Col(j));
                        }
                    }
                }
                Node::Col(j) => {
                    for &i in &col_adj[j] {
                        if !u_set[i] {
                            u[i] = cost[i * n + j] - v[j];
                            u_set[i] = true;
                            stack.push(Node::Row(i));
                        }
                    }
                }
            }
        }

        // entering variable: Bland's rule, lowest flat index with negative
        // reduced cost
        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if !basic[i * n + j] && cost[i * n + j] - u[i] - v[j] < -eps {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let value = flow
                .iter()
                .zip(cost.iter())
                .map(|(&f, &c)| f * c)
                .sum::<f64>();
            return Ok((flow, value));
        };

        // unique tree path from Row(ei) to Col(ej)
        let path = tree_path(m, n, &row_adj, &col_adj, ei, ej);

        // cycle: entering cell (+), then path cells from the Col(ej) end,
        // alternating -, +, ...
        let mut minus_cells: Vec<(usize, usize)> = Vec::new();
        let mut plus_cells: Vec<(usize, usize)> = vec![(ei, ej)];
        for (k, &cell) in path.iter().rev().enumerate() {
            if k % 2 == 0 {
                minus_cells.push(cell);
            } else {
                plus_cells.push(cell);
            }
        }
        let (&(li, lj), theta) = minus_cells
            .iter()
            .map(|cell| (cell, flow[cell.0 * n + cell.1]))
            .min_by(|a, b| {
                a.1.partial_cmp(&b.1)
                    .unwrap()
                    .then((a.0 .0 * n + a.0 .1).cmp(&(b.0 .0 * n + b.0 .1)))
            })
            .expect("cycle has a leaving candidate");

        for &(i, j) in &plus_cells {
            flow[i * n + j] += theta;
        }
        for &(i, j) in &minus_cells {
            flow[i * n + j] = (flow[i * n + j] - theta).max(0.0);
        }

        basic[li * n + lj] = false;
        row_adj[li].retain(|&j| j != lj);
        col_adj[lj].retain(|&i| i != li);
        basic[ei * n + ej] = true;
        row_adj[ei].push(ej);
        col_adj[ej].push(ei);
    }

    Err(Error::NoConvergence {
        iterations: max_pivots,
        residual: f64::NAN,
    })
}

/// Cells along the unique basis-tree path from Row(start_row) to Col(end_col).
fn tree_path(
    m: usize,
    n: usize,
    row_adj: &[Vec<usize>],
    col_adj: &[Vec<usize>],
    start_row: usize,
    end_col: usize,
) -> Vec<(usize, usize)> {
    // parent pointers over bipartite nodes: rows 0..m, cols m..m+n
    let total = m + n;
    let mut parent: Vec<Option<usize>> = vec![None; total];
    let mut visited = vec![false; total];
    let start = start_row;
    let goal = m + end_col;
    visited[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == goal {
            break;
        }
        if node < m {
            for &j in &row_adj[node] {
                let nj = m + j;
                if !visited[nj] {
                    visited[nj] = true;
                    parent[nj] = Some(node);
                    queue.push_back(nj);
                }
            }
        } else {
            for &i in &col_adj[node - m] {
                if !visited[i] {
                    visited[i] = true;
                    parent[i] = Some(node);
                    queue.push_back(i);
                }
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = goal;
    while let Some(p) = parent[node] {
        let (i, j) = if node < m { (node, p - m) } else { (p, node - m) };
        cells.push((i, j));
        node = p;
    }
    cells.reverse();
    cells
}

/// Independent oracle: exact W1 by enumerating the basic feasible solutions
/// (spanning-tree vertices) of the transportation polytope. Supports <= 5.
pub fn brute_force_w1(
    p: &DiscreteDistribution,
    q: &DiscreteDistribution,
    cost: &Array2<f64>,
) -> Result<f64> {
    let m0 = p.probs.len();
    let n0 = q.probs.len();
    check_cost(cost, m0, n0)?;
    let rows: Vec<usize> = (0..m0).filter(|&i| p.probs[i] > 0.0).collect();
    let cols: Vec<usize> = (0..n0).filter(|&j| q.probs[j] > 0.0).collect();
    let m = rows.len();
    let n = cols.len();
    if m > 5 || n > 5 {
        return Err(Error::InvalidArgument(format!(
            "brute force limited to supports of 5 (got {m} x {n})"
        )));
    }
    let supply: Vec<f64> = rows.iter().map(|&i| p.probs[i]).collect();
    let demand: Vec<f64> = cols.iter().map(|&j| q.probs[j]).collect();

    let cells: Vec<(usize, usize)> = (0..m).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    let k = m + n - 1;
    let mut best = f64::INFINITY;
    let mut chosen = Vec::with_capacity(k);
    enumerate_bases(
        &cells,
        0,
        k,
        &mut chosen,
        &mut |basis: &[(usize, usize)]| {
            if let Some(flows) = solve_tree_flows(m, n, basis, &supply, &demand) {
                if flows.iter().all(|&f| f >= -1e-9) {
                    let c: f64 = basis
                        .iter()
                        .zip(flows.iter())
                        .map(|(&(i, j), &f)| f * cost[[rows[i], cols[j]]])
                        .sum();
                    if c < best {
                        best = c;
                    }
                }
            }
        },
    );
    Ok(best)
}

fn enumerate_bases(
    cells: &[(usize, usize)],
    start: usize,
    remaining: usize,
    chosen: &mut Vec<(usize, usize)>,
    visit: &mut impl FnMut(&[(usize, usize)]),
) {
    if remaining == 0 {
        visit(chosen);
        return;
    }
    if cells.len() - start < remaining {
        return;
    }
    for idx in start..cells.len() {
        chosen.push(cells[idx]);
        enumerate_bases(cells, idx + 1, remaining - 1, chosen, visit);
        chosen.pop();
    }
}

/// Solve flows on a candidate basis by leaf elimination; None if the cells do
/// not form a spanning tree of the bipartite supply/demand graph.
fn solve_tree_flows(
    m: usize,
    n: usize,
    basis: &[(usize, usize)],
    supply: &[f64],
    demand: &[f64],
) -> Option<Vec<f64>> {
    let mut a = supply.to_vec();
    let mut b = demand.to_vec();
    let mut alive = vec![true; basis.len()];
    let mut row_deg = vec![0usize; m];
    let mut col_deg = vec![0usize; n];
    for &(i, j) in basis {
        row_deg[i] += 1;
        col_deg[j] += 1;
    }
    if row_deg.iter().any(|&d| d == 0) || col_deg.iter().any(|&d| d == 0) {
        return None;
    }
    let mut flows = vec![0.0; basis.len()];
    for _ in 0..basis.len() {
        let mut leaf = None;
        for (idx, &(i, j)) in basis.iter().enumerate() {
            if alive[idx] && (row_deg[i] == 1 || col_deg[j] == 1) {
                leaf = Some(idx);
                break;
            }
        }
        let idx = leaf?;
        let (i, j) = basis[idx];
        let f = if row_deg[i] == 1 { a[i] } else { b[j] };
        flows[idx] = f;
        a[i] -= f;
        b[j] -= f;
        alive[idx] = false;
        row_deg[i] -= 1;
        col_deg[j] -= 1;
    }
    Some(flows)
}
