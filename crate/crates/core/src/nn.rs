//! Minimal differentiable-function substrate: MLPs with exact reverse-mode
//! gradients, Adam, and soft (Polyak) target updates.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Identity,
    Tanh,
    /// ln(1 + e^x): smooth nonnegative head
    Softplus,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Widths include the input layer; hidden activations are always relu.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub output_activation: Activation,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, output_activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidArgument(
                "an MLP needs at least input and output widths".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        Ok(Self {
            layer_widths,
            output_activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }
}

#[derive(Debug, Clone)]
struct Layer {
    /// weights indexed (out, in)
    w: Array2<f64>,
    b: Array1<f64>,
    gw: Array2<f64>,
    gb: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    layers: Vec<Layer>,
}

/// Activations cached by `forward` for the matching `backward` call.
pub struct ForwardCache {
    /// input to each layer (post-activation of the previous one)
    inputs: Vec<Array2<f64>>,
    /// pre-activation of each layer
    preacts: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    /// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    pub fn init(spec: MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|lw| {
                let (fan_in, fan_out) = (lw[0], lw[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w = Array2::from_shape_fn((fan_out, fan_in), |_| {
                    (rng.random::<f64>() * 2.0 - 1.0) * bound
                });
                let b =
                    Array1::from_shape_fn(fan_out, |_| (rng.random::<f64>() * 2.0 - 1.0) * bound);
                Layer {
                    gw: Array2::zeros(w.dim()),
                    gb: Array1::zeros(b.len()),
                    w,
                    b,
                }
            })
            .collect();
        Self { spec, layers }
    }

    pub fn zeros(spec: MlpSpec) -> Self {
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|lw| Layer {
                w: Array2::zeros((lw[1], lw[0])),
                b: Array1::zeros(lw[1]),
                gw: Array2::zeros((lw[1], lw[0])),
                gb: Array1::zeros(lw[1]),
            })
            .collect();
        Self { spec, layers }
    }

    /// Batch forward; rows of `input` are samples.
    pub fn forward(&self, input: &Array2<f64>) -> Result<ForwardCache> {
        if input.ncols() != self.spec.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "input width {} does not match spec input {}",
                input.ncols(),
                self.spec.input_dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers);
        let mut x = input.clone();
        for (li, layer) in self.layers.iter().enumerate() {
            let pre = x.dot(&layer.w.t()) + &layer.b;
            inputs.push(x);
            let post = if li + 1 == n_layers {
                match self.spec.output_activation {
                    Activation::Identity => pre.clone(),
                    Activation::Tanh => pre.mapv(f64::tanh),
                    Activation::Softplus => pre.mapv(softplus),
                }
            } else {
                pre.mapv(|v| v.max(0.0))
            };
            preacts.push(pre);
            x = post;
        }
        Ok(ForwardCache {
            inputs,
            preacts,
            output: x,
        })
    }

    /// Reverse-mode pass. Accumulates parameter gradients into the paired
    /// gradient buffers and returns the gradient w.r.t. the input batch.
    pub fn backward(&mut self, cache: &ForwardCache, upstream: &Array2<f64>) -> Result<Array2<f64>> {
        if upstream.dim() != cache.output.dim() {
            return Err(Error::DimensionMismatch(format!(
                "upstream grad is {:?}, output was {:?}",
                upstream.dim(),
                cache.output.dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut delta = match self.spec.output_activation {
            Activation::Identity => upstream.clone(),
            Activation::Tanh => upstream * &cache.output.mapv(|y| 1.0 - y * y),
            // y = softplus(x) => dy/dx = sigmoid(x) = 1 - e^{-y}
            Activation::Softplus => upstream * &cache.output.mapv(|y| 1.0 - (-y).exp()),
        };
        for li in (0..n_layers).rev() {
            if li + 1 != n_layers {
                delta = &delta * &cache.preacts[li].mapv(|p| if p > 0.0 { 1.0 } else { 0.0 });
            }
            let layer = &mut self.layers[li];
            layer.gw += &delta.t().dot(&cache.inputs[li]);
            layer.gb += &delta.sum_axis(Axis(0));
            if li > 0 {
                delta = delta.dot(&layer.w);
            } else {
                return Ok(delta.dot(&layer.w));
            }
        }
        unreachable!("mlp has at least one layer")
    }

    /// Fold an output standardization `y -> (y - shift) * scale` into the
    /// final linear layer. Only valid when the output activation is identity.
    pub fn standardize_output(&mut self, shift: &[f64], scale: &[f64]) {
        let last = self.layers.last_mut().unwrap();
        for (i, mut row) in last.w.outer_iter_mut().enumerate() {
            row.mapv_inplace(|v| v * scale[i]);
        }
        for (i, b) in last.b.iter_mut().enumerate() {
            *b = (*b - shift[i]) * scale[i];
        }
    }

    pub fn zero_grad(&mut self) {
        for layer in &mut self.layers {
            layer.gw.fill(0.0);
            layer.gb.fill(0.0);
        }
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend(layer.w.iter());
            out.extend(layer.b.iter());
        }
        out
    }

    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            out.extend(layer.gw.iter());
            out.extend(layer.gb.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter count mismatch");
        let mut k = 0;
        for layer in &mut self.layers {
            for w in layer.w.iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in layer.b.iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
    }
}

/// target <- tau * online + (1 - tau) * target, elementwise.
pub fn polyak_update(target: &mut Mlp, online: &Mlp, tau: f64) -> Result<()> {
    if target.spec != online.spec {
        return Err(Error::DimensionMismatch(
            "target and online specs differ".into(),
        ));
    }
    for (t, o) in target.layers.iter_mut().zip(online.layers.iter()) {
        t.w.zip_mut_with(&o.w, |tv, &ov| *tv = tau * ov + (1.0 - tau) * *tv);
        t.b.zip_mut_with(&o.b, |tv, &ov| *tv = tau * ov + (1.0 - tau) * *tv);
    }
    Ok(())
}

/// Adam over a flat parameter vector with bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Adam bound to one MLP's flattened parameters.
#[derive(Debug, Clone)]
pub struct MlpOptimizer {
    pub adam: AdamState,
}

impl MlpOptimizer {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Self {
            adam: AdamState::new(mlp.n_params(), lr),
        }
    }

    /// One Adam step from the MLP's accumulated gradient buffers.
    pub fn step(&mut self, mlp: &mut Mlp) {
        let mut params = mlp.flatten_params();
        let grads = mlp.flatten_grads();
        self.adam.step(&mut params, &grads);
        mlp.set_params(&params);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpCheckpoint {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl MlpCheckpoint {
    pub fn of(mlp: &Mlp) -> Self {
        Self {
            spec: mlp.spec.clone(),
            params: mlp.flatten_params(),
        }
    }

    pub fn restore(&self) -> Result<Mlp> {
        let mut mlp = Mlp::zeros(self.spec.clone());
        if self.params.len() != mlp.n_params() {
            return Err(Error::InvalidArgument(format!(
                "checkpoint has {} params, spec needs {}",
                self.params.len(),
                mlp.n_params()
            )));
        }
        mlp.set_params(&self.params);
        Ok(mlp)
    }
}

/// Central-finite-difference gradient check over a flat parameter vector.
/// `loss` must be a pure function of the parameters. Returns the worst
/// per-parameter relative error against `analytic`.
pub fn finite_diff_relative_error(
    params: &[f64],
    analytic: &[f64],
    h: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for k in 0..params.len() {
        let orig = work[k];
        work[k] = orig + h;
        let up = loss(&work);
        work[k] = orig - h;
        let down = loss(&work);
        work[k] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = analytic[k];
        // combined absolute/relative error: tiny gradients are compared
        // absolutely at the 1e-4 scale
        let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-4));
        worst = worst.max(err);
    }
    worst
}
