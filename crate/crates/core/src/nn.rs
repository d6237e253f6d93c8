//! MLP feature extractor `θ` followed by a linear classifier `φ`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hidden layers use `U(-a, a)` with `a = sqrt(THETA_INIT_GAIN / fan_in)`.
pub const THETA_INIT_GAIN: f64 = 6.0;
/// The classifier uses `a = sqrt(PHI_INIT_GAIN / fan_in)`.
pub const PHI_INIT_GAIN: f64 = 1.0;

/// Layer sizes and class count of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    /// `[input_dim, hidden_1, ..., feature_dim]`. A single entry means the
    /// classifier reads the raw input.
    pub dims: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn new(dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::invalid(format!("invalid layer sizes {dims:?}")));
        }
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        Ok(Self { dims, num_classes })
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.dims.last().expect("dims non-empty")
    }

    pub fn hidden_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Expected shape of each parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        let mut shapes = Vec::new();
        for w in self.dims.windows(2) {
            shapes.push(vec![w[0], w[1]]);
            shapes.push(vec![w[1]]);
        }
        shapes.push(vec![self.feature_dim(), self.num_classes]);
        shapes.push(vec![self.num_classes]);
        shapes
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.hidden_layers() {
            names.push(format!("theta.{i}.weight"));
            names.push(format!("theta.{i}.bias"));
        }
        names.push("phi.weight".into());
        names.push("phi.bias".into());
        names
    }
}

/// Network parameters stored flat as
/// `[θ0.w, θ0.b, θ1.w, θ1.b, …, φ.w, φ.b]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    pub fn from_tensors(arch: Architecture, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = arch.param_shapes();
        if shapes.len() != tensors.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (s, t) in shapes.iter().zip(&tensors) {
            if s.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "model parameters",
                    lhs: s.clone(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn zeros(arch: Architecture) -> Self {
        let tensors = arch.param_shapes().into_iter().map(Tensor::zeros).collect();
        Self { arch, tensors }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        self.tensors
    }

    /// Index of the first classifier tensor.
    pub fn phi_offset(&self) -> usize {
        self.tensors.len() - 2
    }

    pub fn phi_weight(&self) -> &Tensor {
        &self.tensors[self.phi_offset()]
    }

    pub fn phi_bias(&self) -> &Tensor {
        &self.tensors[self.phi_offset() + 1]
    }

    pub fn theta_layer(&self, i: usize) -> (&Tensor, &Tensor) {
        (&self.tensors[2 * i], &self.tensors[2 * i + 1])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Places every parameter on `tape` as a leaf (`trainable`) or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let nodes = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundParams { nodes }
    }

    /// Logits without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xn = tape.constant(x.clone());
        let out = forward(&mut tape, &bound, xn)?;
        Ok(tape.value(out).clone())
    }

    /// Output of the feature extractor `θ(x)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xn = tape.constant(x.clone());
        let out = features(&mut tape, &bound, xn)?;
        Ok(tape.value(out).clone())
    }
}

/// Tape handles for each parameter tensor, in storage order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    pub nodes: Vec<NodeId>,
}

impl BoundParams {
    pub fn phi(&self) -> (NodeId, NodeId) {
        let n = self.nodes.len();
        (self.nodes[n - 2], self.nodes[n - 1])
    }

    pub fn theta(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.nodes[..self.nodes.len() - 2].chunks(2).map(|c| (c[0], c[1]))
    }
}

pub fn init_params(seed: u64, arch: Architecture) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = arch.param_shapes();
    let last = shapes.len() - 2;
    let tensors = shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            if shape.len() == 1 {
                return Tensor::zeros(shape);
            }
            let gain = if i == last { PHI_INIT_GAIN } else { THETA_INIT_GAIN };
            let a = (gain / shape[0] as f64).sqrt();
            let n = shape[0] * shape[1];
            let data = (0..n).map(|_| rng.random_range(-a..a)).collect();
            Tensor::new(shape, data).expect("shape matches data")
        })
        .collect();
    ModelParams { arch, tensors }
}

/// `relu(… relu(x W0 + b0) …)`.
pub fn features(tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
    let mut h = x;
    for (w, b) in params.theta() {
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        h = tape.relu(z)?;
    }
    Ok(h)
}

/// `h W + b`.
pub fn linear(tape: &mut Tape, h: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let z = tape.matmul(h, w)?;
    tape.add(z, b)
}

pub fn forward(tape: &mut Tape, params: &BoundParams, x: NodeId) -> Result<NodeId> {
    let h = features(tape, params, x)?;
    let (w, b) = params.phi();
    linear(tape, h, w, b)
}

fn check_update(params: &[Tensor], grads: &[Tensor], what: &'static str) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::invalid(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::ShapeMismatch {
                op: what,
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.all_finite() {
            return Err(Error::NonFinite(what));
        }
    }
    Ok(())
}

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μv + (g + λw)`, `w ← w − αv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_update(params, grads, "sgd gradient")?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(Tensor::zeros_like).collect();
        }
        for ((w, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let wd = w.data_mut();
            for ((wi, gi), vi) in wd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vi = self.momentum * *vi + (gi + self.weight_decay * *wi);
                *wi -= self.lr * *vi;
            }
        }
        Ok(())
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        check_update(params, grads, "adam gradient")?;
        if self.m.is_empty() {
            self.m = params.iter().map(Tensor::zeros_like).collect();
            self.v = params.iter().map(Tensor::zeros_like).collect();
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((w, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((wi, gi), mi), vi) in w
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
