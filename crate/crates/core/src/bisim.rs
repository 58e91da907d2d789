//! Exact bisimulation machinery: partition refinement, metric fixed points,
//! epsilon-aggregation, and machine checks of the value/Lipschitz bounds.

use ndarray::{Array2, Array3};
use rayon::prelude::*;
use serde::Serialize;

use crate::mdp::{value_iteration, DiscretePolicy, FiniteMdp};
use crate::ot::w1_value;
use crate::{Error, Result};

/// Symmetric nonnegative state-pair distance matrix with zero diagonal.
#[derive(Debug, Clone)]
pub struct PseudoMetric {
    pub dist: Array2<f64>,
}

impl PseudoMetric {
    pub fn zeros(n: usize) -> Self {
        Self {
            dist: Array2::zeros((n, n)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.dist.nrows()
    }

    pub fn max_distance(&self) -> f64 {
        self.dist.iter().fold(0.0f64, |a, &b| a.max(b))
    }

    /// Check the pseudometric axioms at the stated tolerances.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_states();
        if self.dist.ncols() != n {
            return Err(Error::DimensionMismatch("metric matrix not square".into()));
        }
        for i in 0..n {
            if self.dist[[i, i]] != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "diagonal entry ({i},{i}) = {} is not exactly 0",
                    self.dist[[i, i]]
                )));
            }
            for j in 0..n {
                let d = self.dist[[i, j]];
                if !d.is_finite() || d < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "entry ({i},{j}) = {d} is negative or non-finite"
                    )));
                }
                if (d - self.dist[[j, i]]).abs() > 1e-12 {
                    return Err(Error::InvalidArgument(format!(
                        "asymmetric at ({i},{j}): {d} vs {}",
                        self.dist[[j, i]]
                    )));
                }
            }
        }
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    if self.dist[[i, k]] > self.dist[[i, j]] + self.dist[[j, k]] + 1e-7 {
                        return Err(Error::InvalidArgument(format!(
                            "triangle inequality violated on ({i},{j},{k})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatePartition {
    /// block id per state; ids contiguous from 0 in order of first occurrence
    pub block_id: Vec<usize>,
    pub n_blocks: usize,
}

impl StatePartition {
    fn from_ids(raw: &[usize]) -> Self {
        let mut remap = std::collections::HashMap::new();
        let mut next = 0usize;
        let block_id = raw
            .iter()
            .map(|&b| {
                *remap.entry(b).or_insert_with(|| {
                    let id = next;
                    next += 1;
                    id
                })
            })
            .collect();
        Self {
            block_id,
            n_blocks: next,
        }
    }

    pub fn same_block(&self, i: usize, j: usize) -> bool {
        self.block_id[i] == self.block_id[j]
    }
}

/// How aggregated rewards/transitions are formed from cluster members.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationKind {
    /// uniform average over cluster members
    MemberAverage,
    /// copy the representative state's rows
    Representative,
}

#[derive(Debug, Clone)]
pub struct AggregatedMdp {
    pub cluster_of: Vec<usize>,
    pub representatives: Vec<usize>,
    pub mdp: FiniteMdp,
}

/// Coarsest partition under which blockmates have equal rewards (within tol)
/// and equal block-transition mass (within tol) for every action and block.
/// Iterated splitting until stable.
pub fn bisimulation_partition(mdp: &FiniteMdp, tol: f64) -> StatePartition {
    let n = mdp.n_states;
    let mut block_id = vec![0usize; n];
    let mut n_blocks = 1usize;
    loop {
        // signature of a state: rewards per action, then block mass per
        // (action, block)
        let signatures: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let mut sig = Vec::with_capacity(mdp.n_actions * (1 + n_blocks));
                for a in 0..mdp.n_actions {
                    sig.push(mdp.reward[[s, a]]);
                }
                for a in 0..mdp.n_actions {
                    let mut mass = vec![0.0; n_blocks];
                    for s2 in 0..n {
                        mass[block_id[s2]] += mdp.transition[[a, s, s2]];
                    }
                    sig.extend(mass);
                }
                sig
            })
            .collect();

        let mut new_id = vec![usize::MAX; n];
        let mut next = 0usize;
        // group leaders per old block; a state joins the first leader whose
        // signature matches within tol
        let mut leaders: Vec<Vec<usize>> = vec![Vec::new(); n_blocks];
        for s in 0..n {
            let b = block_id[s];
            let mut assigned = false;
            for &leader in &leaders[b] {
                if signatures[s]
                    .iter()
                    .zip(signatures[leader].iter())
                    .all(|(x, y)| (x - y).abs() <= tol)
                {
                    new_id[s] = new_id[leader];
                    assigned = true;
                    break;
                }
            }
            if !assigned {
                new_id[s] = next;
                next += 1;
                leaders[b].push(s);
            }
        }
        if next == n_blocks {
            return StatePartition::from_ids(&new_id);
        }
        block_id = new_id;
        n_blocks = next;
    }
}

fn metric_iteration_cap(c: f64, tol: f64, reward_gap: f64) -> usize {
    if c == 0.0 || reward_gap <= tol {
        return 4;
    }
    let diameter = reward_gap / (1.0 - c);
    let k = ((tol * (1.0 - c) / diameter).ln() / c.ln()).ceil();
    (k.max(1.0) as usize) + 64
}

fn max_reward_gap(mdp: &FiniteMdp) -> f64 {
    let mut gap = 0.0f64;
    for a in 0..mdp.n_actions {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for s in 0..mdp.n_states {
            lo = lo.min(mdp.reward[[s, a]]);
            hi = hi.max(mdp.reward[[s, a]]);
        }
        gap = gap.max(hi - lo);
    }
    gap
}

/// One application of the max-over-actions metric operator for the pair (i, j).
fn apply_max_operator(mdp: &FiniteMdp, dist: &Array2<f64>, c: f64, i: usize, j: usize) -> f64 {
    let mut best = 0.0f64;
    for a in 0..mdp.n_actions {
        let dr = (mdp.reward[[i, a]] - mdp.reward[[j, a]]).abs();
        let pi = mdp.transition.slice(ndarray::s![a, i, ..]);
        let pj = mdp.transition.slice(ndarray::s![a, j, ..]);
        let w = w1_value(
            pi.as_slice().expect("contiguous row"),
            pj.as_slice().expect("contiguous row"),
            dist,
        )
        .expect("valid transition rows");
        best = best.max((1.0 - c) * dr + c * w);
    }
    best
}

fn solve_fixed_point<F>(n: usize, c: f64, tol: f64, cap: usize, apply: F) -> Result<PseudoMetric>
where
    F: Fn(&Array2<f64>, usize, usize) -> f64 + Sync,
{
    let mut dist = Array2::<f64>::zeros((n, n));
    let pairs: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .collect();
    let mut prev_delta = f64::INFINITY;
    for _ in 0..cap {
        let values: Vec<f64> = pairs.par_iter().map(|&(i, j)| apply(&dist, i, j)).collect();
        let mut next = Array2::<f64>::zeros((n, n));
        let mut delta = 0.0f64;
        for (&(i, j), &v) in pairs.iter().zip(values.iter()) {
            next[[i, j]] = v;
            next[[j, i]] = v;
            delta = delta.max((v - dist[[i, j]]).abs());
        }
        // the operator is a c-contraction in sup norm
        debug_assert!(delta <= c * prev_delta + 1e-9, "contraction violated");
        prev_delta = delta;
        dist = next;
        if delta <= tol {
            return Ok(PseudoMetric { dist });
        }
    }
    Err(Error::NoConvergence {
        iterations: cap,
        residual: prev_delta,
    })
}

/// Least fixed point of
/// d(i,j) = max_a [(1-c)|R_i^a - R_j^a| + c W1(P_i^a, P_j^a; d)],
/// iterated from d = 0 until the sup-norm change is <= tol
/// (scaled error <= tol/(1-c)).
pub fn bisim_metric_max(mdp: &FiniteMdp, c: f64, tol: f64) -> Result<PseudoMetric> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("c = {c} not in [0, 1)")));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol {tol} must be > 0")));
    }
    let cap = metric_iteration_cap(c, tol, max_reward_gap(mdp));
    solve_fixed_point(mdp.n_states, c, tol, cap, |dist, i, j| {
        apply_max_operator(mdp, dist, c, i, j)
    })
}

/// On-policy variant: F(d, pi)(i,j) = (1-c)|R^pi_i - R^pi_j| + c W1(P^pi_i, P^pi_j; d)
/// with policy-averaged rewards and transitions.
pub fn bisim_metric_onpolicy(
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    c: f64,
    tol: f64,
) -> Result<PseudoMetric> {
    if !(0.0..1.0).contains(&c) {
        return Err(Error::InvalidArgument(format!("c = {c} not in [0, 1)")));
    }
    if tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol {tol} must be > 0")));
    }
    if policy.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(Error::DimensionMismatch(format!(
            "policy is {:?}, mdp expects ({}, {})",
            policy.probs.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    let r_pi = mdp.policy_reward(policy);
    let p_pi = mdp.policy_transition(policy);
    let mut gap = 0.0f64;
    for i in 0..mdp.n_states {
        for j in 0..mdp.n_states {
            gap = gap.max((r_pi[i] - r_pi[j]).abs());
        }
    }
    let cap = metric_iteration_cap(c, tol, gap);
    solve_fixed_point(mdp.n_states, c, tol, cap, |dist, i, j| {
        let dr = (r_pi[i] - r_pi[j]).abs();
        let w = w1_value(
            p_pi.row(i).as_slice().expect("contiguous row"),
            p_pi.row(j).as_slice().expect("contiguous row"),
            dist,
        )
        .expect("valid policy-averaged rows");
        (1.0 - c) * dr + c * w
    })
}

/// Greedy epsilon-covering: scan states in index order, join the first cluster
/// whose representative is within eps, else open a new cluster.
pub fn epsilon_aggregate(mdp: &FiniteMdp, metric: &PseudoMetric, eps: f64) -> Result<AggregatedMdp> {
    epsilon_aggregate_with(mdp, metric, eps, AggregationKind::MemberAverage)
}

pub fn epsilon_aggregate_with(
    mdp: &FiniteMdp,
    metric: &PseudoMetric,
    eps: f64,
    kind: AggregationKind,
) -> Result<AggregatedMdp> {
    if eps < 0.0 {
        return Err(Error::InvalidArgument(format!("eps {eps} must be >= 0")));
    }
    if metric.n_states() != mdp.n_states {
        return Err(Error::DimensionMismatch(format!(
            "metric over {} states, mdp has {}",
            metric.n_states(),
            mdp.n_states
        )));
    }
    let n = mdp.n_states;
    let mut representatives: Vec<usize> = Vec::new();
    let mut cluster_of = vec![0usize; n];
    for s in 0..n {
        let mut found = None;
        for (k, &rep) in representatives.iter().enumerate() {
            if metric.dist[[s, rep]] <= eps {
                found = Some(k);
                break;
            }
        }
        cluster_of[s] = match found {
            Some(k) => k,
            None => {
                representatives.push(s);
                representatives.len() - 1
            }
        };
    }
    let k = representatives.len();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for s in 0..n {
        members[cluster_of[s]].push(s);
    }

    let mut transition = Array3::zeros((mdp.n_actions, k, k));
    let mut reward = Array2::zeros((k, mdp.n_actions));
    for g in 0..k {
        let sources: &[usize] = match kind {
            AggregationKind::MemberAverage => &members[g],
            AggregationKind::Representative => std::slice::from_ref(&representatives[g]),
        };
        let w = 1.0 / sources.len() as f64;
        for &s in sources {
            for a in 0..mdp.n_actions {
                reward[[g, a]] += w * mdp.reward[[s, a]];
                for s2 in 0..n {
                    transition[[a, g, cluster_of[s2]]] += w * mdp.transition[[a, s, s2]];
                }
            }
        }
    }
    // renormalize away accumulated rounding so rows pass validation exactly
    for a in 0..mdp.n_actions {
        for g in 0..k {
            let sum: f64 = (0..k).map(|g2| transition[[a, g, g2]]).sum();
            for g2 in 0..k {
                transition[[a, g, g2]] /= sum;
            }
        }
    }
    let agg_mdp = FiniteMdp::new(transition, reward, mdp.discount)?;
    Ok(AggregatedMdp {
        cluster_of,
        representatives,
        mdp: agg_mdp,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueBoundReport {
    pub max_gap: f64,
    pub bound: f64,
    pub holds: bool,
    pub n_clusters: usize,
}

/// Check |V*(s) - Vbar*(phi(s))| <= 2 eps / ((1-gamma)(1-c)) on every state.
pub fn check_value_bound(
    mdp: &FiniteMdp,
    agg: &AggregatedMdp,
    eps: f64,
    c: f64,
    tol: f64,
) -> Result<ValueBoundReport> {
    if agg.cluster_of.len() != mdp.n_states {
        return Err(Error::DimensionMismatch(format!(
            "aggregation covers {} states, mdp has {}",
            agg.cluster_of.len(),
            mdp.n_states
        )));
    }
    let v = value_iteration(mdp, tol.min(1e-9))?;
    let v_bar = value_iteration(&agg.mdp, tol.min(1e-9))?;
    let mut max_gap = 0.0f64;
    for s in 0..mdp.n_states {
        max_gap = max_gap.max((v.values[s] - v_bar.values[agg.cluster_of[s]]).abs());
    }
    let bound = 2.0 * eps / ((1.0 - mdp.discount) * (1.0 - c));
    Ok(ValueBoundReport {
        max_gap,
        bound,
        holds: max_gap <= bound + tol,
        n_clusters: agg.mdp.n_states,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct LipschitzReport {
    pub max_ratio: f64,
    pub holds: bool,
}

/// Check |V*(s_i) - V*(s_j)| <= d(s_i, s_j) / (1-c) for all pairs.
/// Requires c >= gamma.
pub fn check_lipschitz(
    mdp: &FiniteMdp,
    metric: &PseudoMetric,
    c: f64,
    tol: f64,
) -> Result<LipschitzReport> {
    if c < mdp.discount {
        return Err(Error::InvalidArgument(format!(
            "c = {c} must be >= discount {} for the Lipschitz bound",
            mdp.discount
        )));
    }
    if metric.n_states() != mdp.n_states {
        return Err(Error::DimensionMismatch(
            "metric size does not match mdp".into(),
        ));
    }
    let v = value_iteration(mdp, tol.min(1e-9))?;
    let mut max_ratio = 0.0f64;
    let mut holds = true;
    for i in 0..mdp.n_states {
        for j in (i + 1)..mdp.n_states {
            let dv = (v.values[i] - v.values[j]).abs();
            let rhs = metric.dist[[i, j]] / (1.0 - c);
            if dv > rhs + tol {
                holds = false;
            }
            if metric.dist[[i, j]] > 1e-12 {
                max_ratio = max_ratio.max(dv / rhs);
            }
        }
    }
    Ok(LipschitzReport { max_ratio, holds })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentNorm {
    L1,
    L2,
}

fn latent_distance(a: &[f64], b: &[f64], norm: LatentNorm) -> f64 {
    match norm {
        LatentNorm::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        LatentNorm::L2 => a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt(),
    }
}

/// Learning error: sup over state pairs of
/// | ||phi(s_i) - phi(s_j)|| - d(s_i, s_j) |.
pub fn learning_error(
    latents: &[Vec<f64>],
    metric: &PseudoMetric,
    norm: LatentNorm,
) -> Result<f64> {
    if latents.len() != metric.n_states() {
        return Err(Error::DimensionMismatch(format!(
            "{} latents for {} states",
            latents.len(),
            metric.n_states()
        )));
    }
    let mut sup = 0.0f64;
    for i in 0..latents.len() {
        for j in (i + 1)..latents.len() {
            let dz = latent_distance(&latents[i], &latents[j], norm);
            sup = sup.max((dz - metric.dist[[i, j]]).abs());
        }
    }
    Ok(sup)
}

/// CSV export with header `i,j,d` over all ordered pairs i < j.
pub fn metric_to_csv(metric: &PseudoMetric) -> String {
    let mut out = String::from("i,j,d\n");
    let n = metric.n_states();
    for i in 0..n {
        for j in (i + 1)..n {
            out.push_str(&format!("{i},{j},{:.17e}\n", metric.dist[[i, j]]));
        }
    }
    out
}

/// CSV export with header `state,block`.
pub fn partition_to_csv(partition: &StatePartition) -> String {
    let mut out = String::from("state,block\n");
    for (s, b) in partition.block_id.iter().enumerate() {
        out.push_str(&format!("{s},{b}\n"));
    }
    out
}
