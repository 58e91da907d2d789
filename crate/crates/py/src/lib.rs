//! Python bindings for the bisimulation toolkit: finite MDPs, exact metric
//! solvers, optimal-transport primitives, and a minimal training entry point.

use ndarray::{Array2, Array3};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use bisimkit::bisim;
use bisimkit::config::{EnvSpec, ExperimentConfig};
use bisimkit::dbc::{Algorithm, DbcAgent};
use bisimkit::envs::{Env, FactoredCausalMdp, TabularDistractorGrid};
use bisimkit::harness;
use bisimkit::mdp::{self, DiscretePolicy};
use bisimkit::ot;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix_to_vecs(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

/// A finite MDP with transition[a][s][s'], reward[s][a], and a discount.
#[pyclass(name = "FiniteMdp")]
struct PyFiniteMdp {
    inner: mdp::FiniteMdp,
}

#[pymethods]
impl PyFiniteMdp {
    #[new]
    fn new(transition: Vec<Vec<Vec<f64>>>, reward: Vec<Vec<f64>>, discount: f64) -> PyResult<Self> {
        let n_actions = transition.len();
        let n_states = reward.len();
        let mut t = Array3::zeros((n_actions, n_states, n_states));
        for (a, per_a) in transition.iter().enumerate() {
            if per_a.len() != n_states {
                return Err(err("transition shape must be [n_actions][n_states][n_states]"));
            }
            for (s, row) in per_a.iter().enumerate() {
                if row.len() != n_states {
                    return Err(err("transition rows must have n_states entries"));
                }
                for (s2, &p) in row.iter().enumerate() {
                    t[[a, s, s2]] = p;
                }
            }
        }
        let mut r = Array2::zeros((n_states, n_actions));
        for (s, row) in reward.iter().enumerate() {
            if row.len() != n_actions {
                return Err(err("reward rows must have n_actions entries"));
            }
            for (a, &x) in row.iter().enumerate() {
                r[[s, a]] = x;
            }
        }
        Ok(Self {
            inner: mdp::FiniteMdp::new(t, r, discount).map_err(err)?,
        })
    }

    #[staticmethod]
    fn random(n_states: usize, n_actions: usize, discount: f64, seed: u64) -> Self {
        Self {
            inner: mdp::random_mdp(n_states, n_actions, discount, seed),
        }
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states
    }

    #[getter]
    fn n_actions(&self) -> usize {
        self.inner.n_actions
    }

    #[getter]
    fn discount(&self) -> f64 {
        self.inner.discount
    }

    /// Optimal state values via value iteration.
    fn value_iteration(&self, tol: f64) -> PyResult<Vec<f64>> {
        Ok(mdp::value_iteration(&self.inner, tol).map_err(err)?.values.to_vec())
    }

    /// Pairwise bisimulation metric (max over actions) as a dense matrix.
    fn bisim_metric(&self, c: f64, tol: f64) -> PyResult<Vec<Vec<f64>>> {
        let m = bisim::bisim_metric_max(&self.inner, c, tol).map_err(err)?;
        Ok(matrix_to_vecs(&m.dist))
    }

    /// On-policy bisimulation metric for a deterministic policy given as one
    /// action index per state.
    fn bisim_metric_onpolicy(&self, actions: Vec<usize>, c: f64, tol: f64) -> PyResult<Vec<Vec<f64>>> {
        if actions.len() != self.inner.n_states {
            return Err(err("need one action per state"));
        }
        let policy = DiscretePolicy::deterministic(&actions, self.inner.n_actions);
        let m = bisim::bisim_metric_onpolicy(&self.inner, &policy, c, tol).map_err(err)?;
        Ok(matrix_to_vecs(&m.dist))
    }

    /// Exact bisimulation partition: block id per state.
    fn partition(&self, tol: f64) -> Vec<usize> {
        bisim::bisimulation_partition(&self.inner, tol).block_id
    }

    /// Cluster states whose metric distance is within eps and check the
    /// aggregated-value bound. Returns (max_gap, bound, holds, n_clusters).
    fn value_bound(&self, c: f64, eps: f64, tol: f64) -> PyResult<(f64, f64, bool, usize)> {
        let metric = bisim::bisim_metric_max(&self.inner, c, tol).map_err(err)?;
        let agg = bisim::epsilon_aggregate(&self.inner, &metric, eps).map_err(err)?;
        let report = bisim::check_value_bound(&self.inner, &agg, eps, c, tol).map_err(err)?;
        Ok((report.max_gap, report.bound, report.holds, report.n_clusters))
    }
}

/// Exact Wasserstein-1 distance between two discrete distributions under a
/// dense ground-cost matrix.
#[pyfunction]
fn w1_discrete(p: Vec<f64>, q: Vec<f64>, cost: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = p.len();
    let n = q.len();
    let mut c = Array2::zeros((m, n));
    for (i, row) in cost.iter().enumerate() {
        if row.len() != n {
            return Err(err("cost must be len(p) x len(q)"));
        }
        for (j, &x) in row.iter().enumerate() {
            c[[i, j]] = x;
        }
    }
    let pd = ot::DiscreteDistribution::new(p).map_err(err)?;
    let qd = ot::DiscreteDistribution::new(q).map_err(err)?;
    Ok(ot::w1_discrete(&pd, &qd, &c).map_err(err)?.value)
}

/// Closed-form 2-Wasserstein distance between diagonal Gaussians.
#[pyfunction]
fn w2_diag_gaussian(
    mean_a: Vec<f64>,
    std_a: Vec<f64>,
    mean_b: Vec<f64>,
    std_b: Vec<f64>,
) -> PyResult<f64> {
    let a = ot::DiagGaussian::new(mean_a, std_a).map_err(err)?;
    let b = ot::DiagGaussian::new(mean_b, std_b).map_err(err)?;
    ot::w2_diag_gaussian(&a, &b).map_err(err)
}

/// Largest absolute gap between latent l1 distances and a ground metric.
#[pyfunction]
fn learning_error(latents: Vec<Vec<f64>>, metric: Vec<Vec<f64>>) -> PyResult<f64> {
    let n = metric.len();
    let mut dist = Array2::zeros((n, n));
    for (i, row) in metric.iter().enumerate() {
        if row.len() != n {
            return Err(err("metric must be square"));
        }
        for (j, &x) in row.iter().enumerate() {
            dist[[i, j]] = x;
        }
    }
    bisim::learning_error(&latents, &bisim::PseudoMetric { dist }, bisim::LatentNorm::L1)
        .map_err(err)
}

/// The gridworld-with-distractor environment as a finite MDP.
#[pyfunction]
fn grid_mdp(
    side: usize,
    n_distractor: usize,
    discount: f64,
    structure_seed: u64,
) -> PyResult<PyFiniteMdp> {
    let env = TabularDistractorGrid::new(side, n_distractor, 50, structure_seed);
    Ok(PyFiniteMdp {
        inner: env.to_finite_mdp(discount).map_err(err)?,
    })
}

/// The three-factor causal chain environment as a finite MDP.
#[pyfunction]
fn factored_mdp(
    d1: usize,
    d2: usize,
    d3: usize,
    n_actions: usize,
    discount: f64,
    structure_seed: u64,
) -> PyResult<PyFiniteMdp> {
    let env = FactoredCausalMdp::new(d1, d2, d3, n_actions, 40, structure_seed);
    Ok(PyFiniteMdp {
        inner: env.to_finite_mdp(discount).map_err(err)?,
    })
}

/// Train a small agent on the gridworld and report (pearson, spearman,
/// learning_error) of latent distances against the exact on-policy metric.
/// `algorithm` is one of "dbc", "castro", "reconstruction", "sac_raw".
#[pyfunction]
#[pyo3(signature = (algorithm, steps, seed, latent_dim=8, hidden=32, lr=1e-3))]
fn train_grid(
    algorithm: &str,
    steps: usize,
    seed: u64,
    latent_dim: usize,
    hidden: usize,
    lr: f64,
) -> PyResult<(f64, f64, f64)> {
    let algorithm = match algorithm {
        "dbc" => Algorithm::Dbc,
        "castro" => Algorithm::Castro,
        "reconstruction" => Algorithm::Reconstruction,
        "sac_raw" => Algorithm::SacRaw,
        other => return Err(err(format!("unknown algorithm {other:?}"))),
    };
    let mut cfg = ExperimentConfig::default();
    cfg.env = EnvSpec::Grid {
        side: 4,
        n_distractor: 5,
        episode_cap: 50,
        structure_seed: 0,
    };
    cfg.algorithm = algorithm;
    cfg.metric.c = 0.9;
    cfg.metric.gamma = 0.9;
    cfg.train.total_steps = steps;
    cfg.train.init_steps = (steps / 10).max(1);
    cfg.train.buffer_capacity = 100_000;
    cfg.train.batch_size = 32;
    cfg.train.critic_lr = lr;
    cfg.train.actor_lr = lr;
    cfg.train.encoder_lr = lr;
    cfg.train.model_lr = lr;
    cfg.train.alpha_lr = lr;
    cfg.train.tau_phi = 0.05;
    cfg.train.discount_weight = Some(0.9);
    cfg.train.latent_dim = latent_dim;
    cfg.train.encoder_hidden = vec![hidden];
    cfg.train.model_hidden = vec![hidden];
    cfg.train.sac_hidden = vec![hidden];
    cfg.train.distance_hidden = hidden;
    cfg.train.eval_every = steps.max(1);
    cfg.train.eval_episodes = 1;
    cfg.validate().map_err(err)?;

    let mut env = harness::build_env(&cfg.env);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut agent = DbcAgent::new(
        env.obs_dim(),
        env.action_dim(),
        algorithm,
        cfg.dbc_hyper(),
        cfg.sac_hyper(),
        &cfg.train.sac_hidden,
        &mut rng,
    )
    .map_err(err)?;
    harness::training_run_public(&mut agent, &mut env, &cfg, seed, steps).map_err(err)?;
    let report = harness::eval_correlation_report(&cfg, &agent).map_err(err)?;
    Ok((
        report.pearson_onpolicy,
        report.spearman_onpolicy,
        report.learning_error,
    ))
}

#[pymodule]
fn bisimkit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyFiniteMdp>()?;
    m.add_function(wrap_pyfunction!(w1_discrete, m)?)?;
    m.add_function(wrap_pyfunction!(w2_diag_gaussian, m)?)?;
    m.add_function(wrap_pyfunction!(learning_error, m)?)?;
    m.add_function(wrap_pyfunction!(grid_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(factored_mdp, m)?)?;
    m.add_function(wrap_pyfunction!(train_grid, m)?)?;
    Ok(())
}
