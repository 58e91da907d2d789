//! Desk-scale environments with controllable task-irrelevant factors:
//! a tabular grid with a distractor Markov chain, a continuous point-mass
//! with distractor dimensions behind an orthogonal mixing matrix, and a
//! factored causal MDP for ancestor-invariance tests.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mdp::FiniteMdp;
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct StepResult {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// terminal state reached (absorbing goal)
    pub done: bool,
    /// episode cap hit; flagged distinctly and treated as non-terminal for
    /// bootstrapping
    pub truncated: bool,
}

/// Continuous-action environment interface used by the training loop.
/// Tabular environments adapt their discrete actions by binning [-1, 1].
pub trait Env {
    fn obs_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepResult>;
}

fn check_action(action: &[f64], dim: usize) -> Result<()> {
    if action.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "action has {} dims, env expects {dim}",
            action.len()
        )));
    }
    for (i, &a) in action.iter().enumerate() {
        if !a.is_finite() || a.abs() > 1.0 + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "action[{i}] = {a} outside [-1, 1]"
            )));
        }
    }
    Ok(())
}

/// Map a scalar in [-1, 1] onto one of `n` discrete choices by equal bins.
pub fn bin_action(a: f64, n: usize) -> usize {
    let x = (a + 1.0) / 2.0 * n as f64;
    (x.floor() as usize).min(n - 1)
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn dirichlet_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut row: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|x| *x /= s);
    row
}

// ---------------------------------------------------------------------------
// Tabular grid with an independent distractor chain
// ---------------------------------------------------------------------------

/// n x n gridworld with 4 move actions, an absorbing goal cell, and an
/// independent ergodic m-state distractor chain appended to the observation.
#[derive(Debug, Clone)]
pub struct TabularDistractorGrid {
    pub side: usize,
    pub n_distractor: usize,
    pub goal: usize,
    /// distractor chain transition matrix (m x m), action-independent
    pub chain: Array2<f64>,
    pub episode_cap: usize,

    cell: usize,
    distractor: usize,
    t: usize,
    rng: ChaCha8Rng,
}

impl TabularDistractorGrid {
    pub fn new(side: usize, n_distractor: usize, episode_cap: usize, structure_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let m = n_distractor;
        let mut chain = Array2::zeros((m, m));
        for d in 0..m {
            let row = dirichlet_row(&mut rng, m);
            for (d2, &p) in row.iter().enumerate() {
                chain[[d, d2]] = p;
            }
        }
        Self {
            side,
            n_distractor: m,
            goal: side * side - 1,
            chain,
            episode_cap,
            cell: 0,
            distractor: 0,
            t: 0,
            rng,
        }
    }

    pub fn n_cells(&self) -> usize {
        self.side * self.side
    }

    pub fn n_product_states(&self) -> usize {
        self.n_cells() * self.n_distractor
    }

    pub fn n_discrete_actions(&self) -> usize {
        4
    }

    /// Deterministic grid move; walls leave the cell unchanged, the goal is
    /// absorbing.
    pub fn move_cell(&self, cell: usize, action: usize) -> usize {
        if cell == self.goal {
            return cell;
        }
        let (r, c) = (cell / self.side, cell % self.side);
        let (nr, nc) = match action {
            0 => (r.wrapping_sub(1), c),
            1 => (r + 1, c),
            2 => (r, c.wrapping_sub(1)),
            3 => (r, c + 1),
            _ => (r, c),
        };
        if nr < self.side && nc < self.side {
            nr * self.side + nc
        } else {
            cell
        }
    }

    /// Reward on taking `action` in `cell`: 1 when the move lands on the goal.
    pub fn cell_reward(&self, cell: usize, action: usize) -> f64 {
        if self.move_cell(cell, action) == self.goal {
            1.0
        } else {
            0.0
        }
    }

    pub fn product_index(&self, cell: usize, distractor: usize) -> usize {
        cell * self.n_distractor + distractor
    }

    pub fn observation_of(&self, cell: usize, distractor: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.n_cells() + self.n_distractor];
        obs[cell] = 1.0;
        obs[self.n_cells() + distractor] = 1.0;
        obs
    }

    pub fn observation_of_state(&self, state: usize) -> Vec<f64> {
        self.observation_of(state / self.n_distractor, state % self.n_distractor)
    }

    pub fn step_discrete(&mut self, action: usize) -> Result<StepResult> {
        if action >= 4 {
            return Err(Error::InvalidArgument(format!(
                "grid action {action} out of range"
            )));
        }
        let reward = self.cell_reward(self.cell, action);
        self.cell = self.move_cell(self.cell, action);
        let row: Vec<f64> = (0..self.n_distractor)
            .map(|d2| self.chain[[self.distractor, d2]])
            .collect();
        self.distractor = sample_categorical(&mut self.rng, &row);
        self.t += 1;
        let done = self.cell == self.goal;
        let truncated = !done && self.t >= self.episode_cap;
        Ok(StepResult {
            obs: self.observation_of(self.cell, self.distractor),
            reward,
            done,
            truncated,
        })
    }

    /// Exact product MDP over (cell, distractor) pairs.
    pub fn to_finite_mdp(&self, discount: f64) -> Result<FiniteMdp> {
        let n = self.n_product_states();
        let m = self.n_distractor;
        let mut transition = Array3::zeros((4, n, n));
        let mut reward = Array2::zeros((n, 4));
        for cell in 0..self.n_cells() {
            for d in 0..m {
                let s = self.product_index(cell, d);
                for a in 0..4 {
                    reward[[s, a]] = self.cell_reward(cell, a);
                    let cell2 = self.move_cell(cell, a);
                    for d2 in 0..m {
                        transition[[a, s, self.product_index(cell2, d2)]] = self.chain[[d, d2]];
                    }
                }
            }
        }
        FiniteMdp::new(transition, reward, discount)
    }
}

impl Env for TabularDistractorGrid {
    fn obs_dim(&self) -> usize {
        self.n_cells() + self.n_distractor
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        // start anywhere but the goal
        self.cell = self.rng.random_range(0..self.n_cells() - 1);
        self.distractor = self.rng.random_range(0..self.n_distractor);
        self.t = 0;
        self.observation_of(self.cell, self.distractor)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(action, 1)?;
        self.step_discrete(bin_action(action[0], 4))
    }
}

// ---------------------------------------------------------------------------
// Factored causal MDP: s2 -> s1 -> R, s3 isolated
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    S1,
    S2,
    S3,
}

/// Three-factor MDP with reward a function of s1 only, s1 dynamics driven by
/// (s1, s2, action), s2 by (s2, action), and s3 evolving on its own.
#[derive(Debug, Clone)]
pub struct FactoredCausalMdp {
    pub d1: usize,
    pub d2: usize,
    pub d3: usize,
    pub n_actions: usize,
    /// t1[a][(s1, s2)] is a distribution over next s1
    t1: Vec<Vec<Vec<f64>>>,
    /// t2[a][s2] over next s2
    t2: Vec<Vec<Vec<f64>>>,
    /// t3[s3] over next s3
    t3: Vec<Vec<f64>>,
    /// reward per s1 value
    r1: Vec<f64>,
    /// alternative reward table over s3 (variant violating the
    /// ancestor-subset premise; off by default)
    r3: Vec<f64>,
    pub reward_on_s3: bool,
    pub episode_cap: usize,

    s1: usize,
    s2: usize,
    s3: usize,
    t: usize,
    rng: ChaCha8Rng,
}

impl FactoredCausalMdp {
    pub fn new(
        d1: usize,
        d2: usize,
        d3: usize,
        n_actions: usize,
        episode_cap: usize,
        structure_seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let t1 = (0..n_actions)
            .map(|_| {
                (0..d1 * d2)
                    .map(|_| dirichlet_row(&mut rng, d1))
                    .collect()
            })
            .collect();
        let t2 = (0..n_actions)
            .map(|_| (0..d2).map(|_| dirichlet_row(&mut rng, d2)).collect())
            .collect();
        let t3 = (0..d3).map(|_| dirichlet_row(&mut rng, d3)).collect();
        let r1 = (0..d1).map(|_| rng.random::<f64>()).collect();
        let r3 = (0..d3).map(|_| rng.random::<f64>()).collect();
        Self {
            d1,
            d2,
            d3,
            n_actions,
            t1,
            t2,
            t3,
            r1,
            r3,
            reward_on_s3: false,
            episode_cap,
            s1: 0,
            s2: 0,
            s3: 0,
            t: 0,
            rng,
        }
    }

    pub fn n_product_states(&self) -> usize {
        self.d1 * self.d2 * self.d3
    }

    pub fn product_index(&self, s1: usize, s2: usize, s3: usize) -> usize {
        (s1 * self.d2 + s2) * self.d3 + s3
    }

    pub fn factors_of(&self, state: usize) -> (usize, usize, usize) {
        let s3 = state % self.d3;
        let rest = state / self.d3;
        (rest / self.d2, rest % self.d2, s3)
    }

    pub fn observation_of(&self, s1: usize, s2: usize, s3: usize) -> Vec<f64> {
        let mut obs = vec![0.0; self.d1 + self.d2 + self.d3];
        obs[s1] = 1.0;
        obs[self.d1 + s2] = 1.0;
        obs[self.d1 + self.d2 + s3] = 1.0;
        obs
    }

    pub fn observation_of_state(&self, state: usize) -> Vec<f64> {
        let (s1, s2, s3) = self.factors_of(state);
        self.observation_of(s1, s2, s3)
    }

    /// Force a factor to a value, leaving the others untouched.
    pub fn intervene(&mut self, factor: Factor, value: usize) -> Result<()> {
        let domain = match factor {
            Factor::S1 => self.d1,
            Factor::S2 => self.d2,
            Factor::S3 => self.d3,
        };
        if value >= domain {
            return Err(Error::InvalidArgument(format!(
                "value {value} outside factor domain of size {domain}"
            )));
        }
        match factor {
            Factor::S1 => self.s1 = value,
            Factor::S2 => self.s2 = value,
            Factor::S3 => self.s3 = value,
        }
        Ok(())
    }

    /// Reward variant whose reward reads the isolated factor s3; breaks the
    /// ancestor-subset premise by construction.
    pub fn with_s3_reward(mut self) -> Self {
        self.reward_on_s3 = true;
        self
    }

    fn current_reward(&self) -> f64 {
        if self.reward_on_s3 {
            self.r3[self.s3]
        } else {
            self.r1[self.s1]
        }
    }

    pub fn step_discrete(&mut self, action: usize) -> Result<StepResult> {
        if action >= self.n_actions {
            return Err(Error::InvalidArgument(format!(
                "action {action} out of range"
            )));
        }
        let reward = self.current_reward();
        let next1 = sample_categorical(&mut self.rng, &self.t1[action][self.s1 * self.d2 + self.s2]);
        let next2 = sample_categorical(&mut self.rng, &self.t2[action][self.s2]);
        let next3 = sample_categorical(&mut self.rng, &self.t3[self.s3]);
        self.s1 = next1;
        self.s2 = next2;
        self.s3 = next3;
        self.t += 1;
        Ok(StepResult {
            obs: self.observation_of(self.s1, self.s2, self.s3),
            reward,
            done: false,
            truncated: self.t >= self.episode_cap,
        })
    }

    pub fn to_finite_mdp(&self, discount: f64) -> Result<FiniteMdp> {
        let n = self.n_product_states();
        let mut transition = Array3::zeros((self.n_actions, n, n));
        let mut reward = Array2::zeros((n, self.n_actions));
        for s in 0..n {
            let (s1, s2, s3) = self.factors_of(s);
            for a in 0..self.n_actions {
                reward[[s, a]] = if self.reward_on_s3 { self.r3[s3] } else { self.r1[s1] };
                for n1 in 0..self.d1 {
                    let p1 = self.t1[a][s1 * self.d2 + s2][n1];
                    for n2 in 0..self.d2 {
                        let p12 = p1 * self.t2[a][s2][n2];
                        for n3 in 0..self.d3 {
                            transition[[a, s, self.product_index(n1, n2, n3)]] =
                                p12 * self.t3[s3][n3];
                        }
                    }
                }
            }
        }
        FiniteMdp::new(transition, reward, discount)
    }
}

impl Env for FactoredCausalMdp {
    fn obs_dim(&self) -> usize {
        self.d1 + self.d2 + self.d3
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.s1 = self.rng.random_range(0..self.d1);
        self.s2 = self.rng.random_range(0..self.d2);
        self.s3 = self.rng.random_range(0..self.d3);
        self.t = 0;
        self.observation_of(self.s1, self.s2, self.s3)
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(action, 1)?;
        self.step_discrete(bin_action(action[0], self.n_actions))
    }
}

// ---------------------------------------------------------------------------
// Continuous point-mass with mixed-in distractor dimensions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointMassVariant {
    /// reward = -||pos - goal||_2 - lambda_a ||a||_2^2
    ReachGoal,
    /// reward = -||vel - v_target||_2 - lambda_a ||a||_2^2; ignores position
    HoldVelocity,
}

/// 2-D point mass (position, velocity) plus k mean-reverting linear-Gaussian
/// distractor dims; observations are mixed by a fixed random orthogonal matrix.
#[derive(Debug, Clone)]
pub struct ContinuousPointMass {
    pub n_distractor: usize,
    pub dt: f64,
    pub lambda_a: f64,
    pub goal: [f64; 2],
    pub v_target: [f64; 2],
    pub variant: PointMassVariant,
    /// distractor AR(1) coefficient and noise scale
    pub distractor_rho: f64,
    pub distractor_sigma: f64,
    pub episode_cap: usize,
    /// orthogonal mixing matrix, (4+k) x (4+k)
    pub mixing: Array2<f64>,

    pos: [f64; 2],
    vel: [f64; 2],
    distractor: Vec<f64>,
    t: usize,
    rng: ChaCha8Rng,
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Random orthogonal matrix from Gram-Schmidt on a seeded Gaussian matrix.
fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while cols.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        for c in &cols {
            let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= dot * ci;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    Array2::from_shape_fn((dim, dim), |(i, j)| cols[j][i])
}

impl ContinuousPointMass {
    pub fn new(n_distractor: usize, episode_cap: usize, structure_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(structure_seed);
        let dim = 4 + n_distractor;
        let mixing = random_orthogonal(dim, &mut rng);
        Self {
            n_distractor,
            dt: 0.05,
            lambda_a: 0.01,
            goal: [0.0, 0.0],
            v_target: [0.3, 0.0],
            variant: PointMassVariant::ReachGoal,
            distractor_rho: 0.9,
            distractor_sigma: 0.3,
            episode_cap,
            mixing,
            pos: [0.0; 2],
            vel: [0.0; 2],
            distractor: vec![0.0; n_distractor],
            t: 0,
            rng,
        }
    }

    /// Replace the reward function; identical dynamics and observations.
    pub fn with_variant(mut self, variant: PointMassVariant) -> Self {
        self.variant = variant;
        self
    }

    /// Swap distractor-chain parameters (evaluation-time distribution shift).
    pub fn set_distractor_params(&mut self, rho: f64, sigma: f64) {
        self.distractor_rho = rho;
        self.distractor_sigma = sigma;
    }

    pub fn relevant_state(&self) -> [f64; 4] {
        [self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    /// Mix an explicit (relevant, distractor) pair into an observation.
    pub fn observation_of_parts(&self, relevant: &[f64; 4], distractor: &[f64]) -> Vec<f64> {
        assert_eq!(distractor.len(), self.n_distractor);
        let dim = 4 + self.n_distractor;
        let mut raw = Vec::with_capacity(dim);
        raw.extend_from_slice(relevant);
        raw.extend_from_slice(distractor);
        (0..dim)
            .map(|i| (0..dim).map(|j| self.mixing[[i, j]] * raw[j]).sum())
            .collect()
    }

    fn observation(&self) -> Vec<f64> {
        self.observation_of_parts(&self.relevant_state(), &self.distractor)
    }

    fn reward(&self, action: &[f64]) -> f64 {
        let act_cost: f64 = self.lambda_a * action.iter().map(|a| a * a).sum::<f64>();
        match self.variant {
            PointMassVariant::ReachGoal => {
                let dx = self.pos[0] - self.goal[0];
                let dy = self.pos[1] - self.goal[1];
                -(dx * dx + dy * dy).sqrt() - act_cost
            }
            PointMassVariant::HoldVelocity => {
                let dx = self.vel[0] - self.v_target[0];
                let dy = self.vel[1] - self.v_target[1];
                -(dx * dx + dy * dy).sqrt() - act_cost
            }
        }
    }
}

impl Env for ContinuousPointMass {
    fn obs_dim(&self) -> usize {
        4 + self.n_distractor
    }

    fn action_dim(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.pos = [
            self.rng.random::<f64>() * 2.0 - 1.0,
            self.rng.random::<f64>() * 2.0 - 1.0,
        ];
        self.vel = [0.0, 0.0];
        for d in self.distractor.iter_mut() {
            *d = standard_normal(&mut self.rng) * self.distractor_sigma;
        }
        self.t = 0;
        self.observation()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepResult> {
        check_action(action, 2)?;
        // relevant dynamics never read the distractor coordinates
        for i in 0..2 {
            self.vel[i] = (0.95 * self.vel[i] + action[i] * self.dt).clamp(-1.0, 1.0);
            self.pos[i] = (self.pos[i] + self.vel[i] * self.dt).clamp(-2.0, 2.0);
        }
        for d in self.distractor.iter_mut() {
            *d = self.distractor_rho * *d
                + self.distractor_sigma * standard_normal(&mut self.rng);
        }
        self.t += 1;
        let reward = self.reward(action);
        Ok(StepResult {
            obs: self.observation(),
            reward,
            done: false,
            truncated: self.t >= self.episode_cap,
        })
    }
}
