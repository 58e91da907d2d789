//! Tabular MDP representation, exact planning, and random MDP generation.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const ROW_SUM_TOL: f64 = 1e-9;

/// A finite MDP (S, A, P, R, gamma) with transition tensor indexed
/// (action, state, next_state) and reward table indexed (state, action).
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub transition: Array3<f64>,
    pub reward: Array2<f64>,
    pub discount: f64,
    pub r_max: f64,
}

impl FiniteMdp {
    pub fn new(transition: Array3<f64>, reward: Array2<f64>, discount: f64) -> Result<Self> {
        let (n_actions, n_states, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(Error::InvalidMdp("empty state or action space".into()));
        }
        if n_next != n_states {
            return Err(Error::InvalidMdp(format!(
                "transition tensor is {n_actions}x{n_states}x{n_next}, expected square in states"
            )));
        }
        if reward.dim() != (n_states, n_actions) {
            return Err(Error::InvalidMdp(format!(
                "reward table is {:?}, expected ({n_states}, {n_actions})",
                reward.dim()
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidMdp(format!(
                "discount {discount} not in [0, 1)"
            )));
        }
        for a in 0..n_actions {
            for s in 0..n_states {
                let mut sum = 0.0;
                for s2 in 0..n_states {
                    let p = transition[[a, s, s2]];
                    if !p.is_finite() || p < 0.0 {
                        return Err(Error::InvalidMdp(format!(
                            "transition[{a}][{s}][{s2}] = {p} is negative or non-finite"
                        )));
                    }
                    sum += p;
                }
                if (sum - 1.0).abs() > ROW_SUM_TOL {
                    return Err(Error::InvalidMdp(format!(
                        "transition row (action {a}, state {s}) sums to {sum}"
                    )));
                }
            }
        }
        let mut r_max: f64 = 0.0;
        for s in 0..n_states {
            for a in 0..n_actions {
                let r = reward[[s, a]];
                if !r.is_finite() {
                    return Err(Error::InvalidMdp(format!(
                        "reward[{s}][{a}] = {r} is non-finite"
                    )));
                }
                r_max = r_max.max(r.abs());
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
            r_max,
        })
    }

    /// Policy-averaged reward vector R^pi(s) = sum_a pi(a|s) R(s,a).
    pub fn policy_reward(&self, policy: &DiscretePolicy) -> Array1<f64> {
        (&self.reward * &policy.probs).sum_axis(Axis(1))
    }

    /// Policy-averaged transition matrix P^pi(s'|s) = sum_a pi(a|s) P(s'|s,a).
    pub fn policy_transition(&self, policy: &DiscretePolicy) -> Array2<f64> {
        let mut p = Array2::zeros((self.n_states, self.n_states));
        for a in 0..self.n_actions {
            for s in 0..self.n_states {
                let w = policy.probs[[s, a]];
                if w == 0.0 {
                    continue;
                }
                for s2 in 0..self.n_states {
                    p[[s, s2]] += w * self.transition[[a, s, s2]];
                }
            }
        }
        p
    }

    fn check_policy(&self, policy: &DiscretePolicy) -> Result<()> {
        if policy.probs.dim() != (self.n_states, self.n_actions) {
            return Err(Error::DimensionMismatch(format!(
                "policy is {:?}, mdp expects ({}, {})",
                policy.probs.dim(),
                self.n_states,
                self.n_actions
            )));
        }
        Ok(())
    }
}

/// Stochastic tabular policy; probs indexed (state, action).
#[derive(Debug, Clone)]
pub struct DiscretePolicy {
    pub probs: Array2<f64>,
}

impl DiscretePolicy {
    pub fn new(probs: Array2<f64>) -> Result<Self> {
        for (s, row) in probs.outer_iter().enumerate() {
            let mut sum = 0.0;
            for (a, &p) in row.iter().enumerate() {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::InvalidPolicy(format!(
                        "probs[{s}][{a}] = {p} is negative or non-finite"
                    )));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::InvalidPolicy(format!(
                    "row for state {s} sums to {sum}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: Array2::from_elem((n_states, n_actions), 1.0 / n_actions as f64),
        }
    }

    /// One-hot policy from a per-state action choice.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let mut probs = Array2::zeros((actions.len(), n_actions));
        for (s, &a) in actions.iter().enumerate() {
            probs[[s, a]] = 1.0;
        }
        Self { probs }
    }

    /// Per-state argmax action (assumes near-deterministic rows).
    pub fn actions(&self) -> Vec<usize> {
        self.probs
            .outer_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction {
    pub values: Array1<f64>,
}

fn q_value(mdp: &FiniteMdp, v: &Array1<f64>, s: usize, a: usize) -> f64 {
    let q = mdp.reward[[s, a]];
    let row = mdp.transition.index_axis(Axis(0), a);
    let mut exp = 0.0;
    for s2 in 0..mdp.n_states {
        exp += row[[s, s2]] * v[s2];
    }
    q + mdp.discount * exp
}

fn bellman_optimality(mdp: &FiniteMdp, v: &Array1<f64>) -> Array1<f64> {
    Array1::from_iter((0..mdp.n_states).map(|s| {
        (0..mdp.n_actions)
            .map(|a| q_value(mdp, v, s, a))
            .fold(f64::NEG_INFINITY, f64::max)
    }))
}

fn sup_norm_diff(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Bellman optimality iteration to a sup-norm residual of tol*(1-gamma)/gamma,
/// so the returned V is within tol of the true optimum.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Result<ValueFunction> {
    if tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol {tol} must be > 0")));
    }
    let gamma = mdp.discount;
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / gamma
    } else {
        tol
    };
    let mut v = Array1::zeros(mdp.n_states);
    // From V=0, reaching delta <= threshold takes about log(threshold/r_max)/log(gamma) sweeps.
    let max_iter = 10_000_000usize;
    for _ in 0..max_iter {
        let next = bellman_optimality(mdp, &v);
        let delta = sup_norm_diff(&next, &v);
        v = next;
        if delta <= threshold {
            return Ok(ValueFunction { values: v });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// Fixed-policy Bellman iteration to the same residual contract as
/// `value_iteration`.
pub fn policy_evaluation(
    mdp: &FiniteMdp,
    policy: &DiscretePolicy,
    tol: f64,
) -> Result<ValueFunction> {
    if tol <= 0.0 {
        return Err(Error::InvalidArgument(format!("tol {tol} must be > 0")));
    }
    mdp.check_policy(policy)?;
    let gamma = mdp.discount;
    let threshold = if gamma > 0.0 {
        tol * (1.0 - gamma) / gamma
    } else {
        tol
    };
    let r_pi = mdp.policy_reward(policy);
    let p_pi = mdp.policy_transition(policy);
    let mut v: Array1<f64> = Array1::zeros(mdp.n_states);
    let max_iter = 10_000_000usize;
    for _ in 0..max_iter {
        let next = &r_pi + &(p_pi.dot(&v) * gamma);
        let delta = sup_norm_diff(&next, &v);
        v = next;
        if delta <= threshold {
            return Ok(ValueFunction { values: v });
        }
    }
    Err(Error::NoConvergence {
        iterations: max_iter,
        residual: f64::NAN,
    })
}

/// One-hot greedy policy w.r.t. Q derived from `v`; argmax ties break to the
/// lowest action index.
pub fn greedy_policy(mdp: &FiniteMdp, v: &ValueFunction) -> Result<DiscretePolicy> {
    if v.values.len() != mdp.n_states {
        return Err(Error::DimensionMismatch(format!(
            "value function has {} entries, mdp has {} states",
            v.values.len(),
            mdp.n_states
        )));
    }
    let actions: Vec<usize> = (0..mdp.n_states)
        .map(|s| {
            let mut best = 0;
            let mut best_q = q_value(mdp, &v.values, s, 0);
            for a in 1..mdp.n_actions {
                let q = q_value(mdp, &v.values, s, a);
                if q > best_q {
                    best_q = q;
                    best = a;
                }
            }
            best
        })
        .collect();
    Ok(DiscretePolicy::deterministic(&actions, mdp.n_actions))
}

/// Random MDP: Dirichlet(1) transition rows, rewards uniform in [0,1).
pub fn random_mdp(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> FiniteMdp {
    assert!(n_states >= 1 && n_actions >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Array3::zeros((n_actions, n_states, n_states));
    for a in 0..n_actions {
        for s in 0..n_states {
            // Normalized Exp(1) draws are Dirichlet(1) on the simplex.
            let mut row = vec![0.0; n_states];
            let mut sum = 0.0;
            for x in row.iter_mut() {
                let u: f64 = rng.random::<f64>();
                *x = -(1.0 - u).ln();
                sum += *x;
            }
            for (s2, x) in row.iter().enumerate() {
                transition[[a, s, s2]] = x / sum;
            }
        }
    }
    let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random::<f64>());
    FiniteMdp::new(transition, reward, discount).expect("generated MDP is valid")
}

#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    /// action-major: transition[a][s][s']
    transition: Vec<Vec<Vec<f64>>>,
    /// state-major: reward[s][a]
    reward: Vec<Vec<f64>>,
}

pub fn to_json(mdp: &FiniteMdp) -> String {
    let json = MdpJson {
        n_states: mdp.n_states,
        n_actions: mdp.n_actions,
        gamma: mdp.discount,
        transition: (0..mdp.n_actions)
            .map(|a| {
                (0..mdp.n_states)
                    .map(|s| (0..mdp.n_states).map(|s2| mdp.transition[[a, s, s2]]).collect())
                    .collect()
            })
            .collect(),
        reward: (0..mdp.n_states)
            .map(|s| (0..mdp.n_actions).map(|a| mdp.reward[[s, a]]).collect())
            .collect(),
    };
    serde_json::to_string_pretty(&json).expect("serializable")
}

pub fn from_json(text: &str) -> Result<FiniteMdp> {
    let json: MdpJson = serde_json::from_str(text)?;
    if json.transition.len() != json.n_actions {
        return Err(Error::InvalidMdp(format!(
            "transition has {} action slices, expected {}",
            json.transition.len(),
            json.n_actions
        )));
    }
    let mut transition = Array3::zeros((json.n_actions, json.n_states, json.n_states));
    for (a, slice) in json.transition.iter().enumerate() {
        if slice.len() != json.n_states {
            return Err(Error::InvalidMdp(format!(
                "transition[{a}] has {} rows, expected {}",
                slice.len(),
                json.n_states
            )));
        }
        for (s, row) in slice.iter().enumerate() {
            if row.len() != json.n_states {
                return Err(Error::InvalidMdp(format!(
                    "transition[{a}][{s}] has {} entries, expected {}",
                    row.len(),
                    json.n_states
                )));
            }
            for (s2, &p) in row.iter().enumerate() {
                transition[[a, s, s2]] = p;
            }
        }
    }
    if json.reward.len() != json.n_states {
        return Err(Error::InvalidMdp(format!(
            "reward has {} rows, expected {}",
            json.reward.len(),
            json.n_states
        )));
    }
    let mut reward = Array2::zeros((json.n_states, json.n_actions));
    for (s, row) in json.reward.iter().enumerate() {
        if row.len() != json.n_actions {
            return Err(Error::InvalidMdp(format!(
                "reward[{s}] has {} entries, expected {}",
                row.len(),
                json.n_actions
            )));
        }
        for (a, &r) in row.iter().enumerate() {
            reward[[s, a]] = r;
        }
    }
    FiniteMdp::new(transition, reward, json.gamma)
}
