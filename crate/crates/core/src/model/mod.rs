//! Desk-scale differentiable models with exact derivatives.
//!
//! Three kinds share one interface:
//!
//! - `logistic`: multinomial logistic regression, `layer_dims = [D, K]`.
//! - `mlp`: fully connected network `[D, H₁, …, K]` with tanh or relu
//!   hidden activations and a softmax cross-entropy head.
//! - `quadratic`: `L(θ) = ½θᵀAθ + bᵀθ`, which ignores the batch. Its
//!   per-example data loss is the linear functional `l_x(θ) = xᵀθ`, so
//!   perturbation terms contribute constant gradients.
//!
//! Batch losses are means over the batch; regularisation `½λ‖θ‖²` is added
//! once per [`Model::loss`] call and never to [`Model::data_loss`].
//! Hessian-vector products use the exact R-operator (forward-over-reverse).

mod data;
mod network;

pub use data::{gen_synthetic, DataSplits, Dataset, LabeledExample, Split, SyntheticConfig, SyntheticKind};

use crate::error::{ensure_finite, Error, Result};
use crate::numkit::{axpy, dot, Matrix, Vector};
use network::Network;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::borrow::Borrow;

/// Model parameters θ ∈ ℝᴺ.
pub type ParamVector = Vector;

/// Largest parameter count for which dense Hessians are formed.
pub const FULL_HESSIAN_MAX_DIM: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticForm {
    pub a: Matrix,
    pub b: Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    #[serde(default)]
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub l2_reg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quadratic: Option<QuadraticForm>,
}

impl ModelSpec {
    pub fn logistic(dim: usize, classes: usize, l2_reg: f64) -> Self {
        Self { kind: ModelKind::Logistic, layer_dims: vec![dim, classes], activation: Activation::Tanh, l2_reg, quadratic: None }
    }

    pub fn mlp(layer_dims: Vec<usize>, activation: Activation, l2_reg: f64) -> Self {
        Self { kind: ModelKind::Mlp, layer_dims, activation, l2_reg, quadratic: None }
    }

    pub fn quadratic(a: Matrix, b: Vector) -> Self {
        let n = b.len();
        Self { kind: ModelKind::Quadratic, layer_dims: vec![n], activation: Activation::Tanh, l2_reg: 0.0, quadratic: Some(QuadraticForm { a, b }) }
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("model spec serializes");
        crate::io::sha256_hex(&json)
    }
}

#[derive(Debug, Clone)]
enum Body {
    Network(Network),
    Quadratic(QuadraticForm),
}

/// A validated [`ModelSpec`] ready for evaluation.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    body: Body,
    num_params: usize,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if !(spec.l2_reg >= 0.0 && spec.l2_reg.is_finite()) {
            return Err(Error::BadConfig(format!("l2_reg must be finite and ≥ 0, got {}", spec.l2_reg)));
        }
        let body = match spec.kind {
            ModelKind::Logistic | ModelKind::Mlp => {
                let dims = &spec.layer_dims;
                match spec.kind {
                    ModelKind::Logistic if dims.len() != 2 => {
                        return Err(Error::BadConfig(format!("logistic model needs layer_dims [D, K], got {dims:?}")))
                    }
                    ModelKind::Mlp if dims.len() < 3 => {
                        return Err(Error::BadConfig(format!("mlp needs at least one hidden layer, got {dims:?}")))
                    }
                    _ => {}
                }
                if dims.contains(&0) || dims[dims.len() - 1] < 2 {
                    return Err(Error::BadConfig(format!("layer_dims must be positive with ≥ 2 classes, got {dims:?}")));
                }
                Body::Network(Network::new(dims, spec.activation))
            }
            ModelKind::Quadratic => {
                let q = spec
                    .quadratic
                    .clone()
                    .ok_or_else(|| Error::BadConfig("quadratic model needs a `quadratic` form".into()))?;
                let n = q.b.len();
                if n == 0 || q.a.rows() != n || q.a.cols() != n {
                    return Err(Error::BadConfig(format!(
                        "quadratic form needs an {n}x{n} matrix, got {}x{}",
                        q.a.rows(),
                        q.a.cols()
                    )));
                }
                if q.a.max_asymmetry() > 1e-12 * q.a.frobenius_norm().max(1.0) {
                    return Err(Error::BadConfig("quadratic matrix must be symmetric".into()));
                }
                Body::Quadratic(q)
            }
        };
        let num_params = match &body {
            Body::Network(net) => net.num_params(),
            Body::Quadratic(q) => q.b.len(),
        };
        Ok(Self { spec, body, num_params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.num_params
    }

    pub fn kind(&self) -> ModelKind {
        self.spec.kind
    }

    /// Input dimension expected of example features.
    pub fn input_dim(&self) -> usize {
        match &self.body {
            Body::Network(net) => net.input_dim(),
            Body::Quadratic(q) => q.b.len(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match &self.body {
            Body::Network(net) => net.output_dim(),
            Body::Quadratic(_) => 1,
        }
    }

    /// Seeded initial parameters: Gaussian weights with variance `1/fan_in`,
    /// zero biases. Quadratic models start at the origin.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        match &self.body {
            Body::Quadratic(q) => vec![0.0; q.b.len()],
            Body::Network(net) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut theta = vec![0.0; net.num_params()];
                for layer in net.layers() {
                    let std = (1.0 / layer.d_in as f64).sqrt();
                    let normal = Normal::new(0.0, std).expect("valid std");
                    for w in &mut theta[layer.w_off..layer.w_off + layer.d_in * layer.d_out] {
                        *w = normal.sample(&mut rng);
                    }
                }
                theta
            }
        }
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params {
            return Err(Error::BadInput(format!("θ has dim {} but model has {} parameters", theta.len(), self.num_params)));
        }
        Ok(())
    }

    fn check_batch<B: Borrow<LabeledExample>>(&self, batch: &[B]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::BadInput("empty batch".into()));
        }
        let d = self.input_dim();
        for ex in batch {
            let ex = ex.borrow();
            if ex.features.len() != d {
                return Err(Error::BadInput(format!("example has {} features, model expects {d}", ex.features.len())));
            }
            if matches!(self.body, Body::Network(_)) && ex.label >= self.num_classes() {
                return Err(Error::BadInput(format!("label {} out of range for {} classes", ex.label, self.num_classes())));
            }
        }
        Ok(())
    }

    fn reg_loss(&self, theta: &[f64]) -> f64 {
        if self.spec.l2_reg == 0.0 {
            0.0
        } else {
            0.5 * self.spec.l2_reg * dot(theta, theta)
        }
    }

    /// Mean data loss over the batch, without regularisation.
    ///
    /// Cross-entropy for network kinds; the linear functional `xᵀθ` for the
    /// quadratic kind.
    pub fn data_loss<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B]) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_batch(batch)?;
        let mut total = 0.0;
        for ex in batch {
            let ex = ex.borrow();
            total += match &self.body {
                Body::Network(net) => net.example_loss(theta, ex),
                Body::Quadratic(_) => dot(&ex.features, theta),
            };
        }
        let value = total / batch.len() as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "data loss".into() });
        }
        Ok(value)
    }

    /// Full training loss of a batch (data term plus regularisation).
    pub fn loss<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B]) -> Result<f64> {
        let data = match &self.body {
            Body::Network(_) => self.data_loss(theta, batch)?,
            Body::Quadratic(q) => {
                self.check_theta(theta)?;
                0.5 * dot(theta, &q.a.matvec(theta)) + dot(&q.b, theta)
            }
        };
        let value = data + self.reg_loss(theta);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: "loss".into() });
        }
        Ok(value)
    }

    /// Gradient of [`Model::data_loss`].
    pub fn data_grad<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B]) -> Result<Vector> {
        self.check_theta(theta)?;
        self.check_batch(batch)?;
        let mut g = vec![0.0; self.num_params];
        let w = 1.0 / batch.len() as f64;
        match &self.body {
            Body::Network(net) => {
                for ex in batch {
                    net.accumulate_grad(theta, ex.borrow(), w, &mut g);
                }
            }
            Body::Quadratic(_) => {
                for ex in batch {
                    axpy(w, &ex.borrow().features, &mut g);
                }
            }
        }
        ensure_finite(&g, || "data gradient".into())?;
        Ok(g)
    }

    /// Gradient of [`Model::loss`].
    pub fn grad<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B]) -> Result<Vector> {
        let mut g = match &self.body {
            Body::Network(_) => self.data_grad(theta, batch)?,
            Body::Quadratic(q) => {
                self.check_theta(theta)?;
                let mut g = q.a.matvec(theta);
                axpy(1.0, &q.b, &mut g);
                g
            }
        };
        if self.spec.l2_reg != 0.0 {
            axpy(self.spec.l2_reg, theta, &mut g);
        }
        ensure_finite(&g, || "gradient".into())?;
        Ok(g)
    }

    /// Hessian-vector product of [`Model::data_loss`].
    pub fn data_hvp<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B], v: &[f64]) -> Result<Vector> {
        self.check_theta(theta)?;
        self.check_batch(batch)?;
        self.check_theta(v)?;
        let mut out = vec![0.0; self.num_params];
        if let Body::Network(net) = &self.body {
            let w = 1.0 / batch.len() as f64;
            for ex in batch {
                net.accumulate_hvp(theta, ex.borrow(), v, w, &mut out);
            }
        }
        ensure_finite(&out, || "data Hessian-vector product".into())?;
        Ok(out)
    }

    /// Exact Hessian-vector product `∇²L(θ)·v` of [`Model::loss`].
    pub fn hvp<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B], v: &[f64]) -> Result<Vector> {
        let mut out = match &self.body {
            Body::Network(_) => self.data_hvp(theta, batch, v)?,
            Body::Quadratic(q) => {
                self.check_theta(theta)?;
                self.check_theta(v)?;
                q.a.matvec(v)
            }
        };
        if self.spec.l2_reg != 0.0 {
            axpy(self.spec.l2_reg, v, &mut out);
        }
        ensure_finite(&out, || "Hessian-vector product".into())?;
        Ok(out)
    }

    /// Dense symmetric Hessian of [`Model::loss`], one HVP per column.
    pub fn full_hessian<B: Borrow<LabeledExample>>(&self, theta: &[f64], batch: &[B]) -> Result<Matrix> {
        let n = self.num_params;
        if n > FULL_HESSIAN_MAX_DIM {
            return Err(Error::DimTooLarge { dim: n, max: FULL_HESSIAN_MAX_DIM });
        }
        let mut h = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            let col = self.hvp(theta, batch, &e)?;
            h.set_column(j, &col);
            e[j] = 0.0;
        }
        debug_assert!(h.max_asymmetry() <= 1e-8 * h.frobenius_norm().max(1.0));
        h.symmetrize();
        Ok(h)
    }

    /// Class logits for one input (network kinds only).
    pub fn logits(&self, theta: &[f64], features: &[f64]) -> Result<Vector> {
        match &self.body {
            Body::Network(net) => {
                self.check_theta(theta)?;
                Ok(net.logits(theta, features))
            }
            Body::Quadratic(_) => Err(Error::BadInput("quadratic models do not produce logits".into())),
        }
    }

    /// Arg-max class; ties resolve to the lowest index.
    pub fn predict(&self, theta: &[f64], features: &[f64]) -> Result<usize> {
        let z = self.logits(theta, features)?;
        let mut best = 0;
        for (k, &v) in z.iter().enumerate() {
            if v > z[best] {
                best = k;
            }
        }
        Ok(best)
    }

    pub fn accuracy(&self, theta: &[f64], data: &[LabeledExample]) -> Result<f64> {
        if data.is_empty() {
            return Ok(0.0);
        }
        let mut hits = 0usize;
        for ex in data {
            if self.predict(theta, &ex.features)? == ex.label {
                hits += 1;
            }
        }
        Ok(hits as f64 / data.len() as f64)
    }
}
