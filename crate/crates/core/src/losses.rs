//! Training losses and the learnable regularisation hyper-parameters `ω`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound applied to label-smoothing values after each meta update.
pub const LS_MAX: f64 = 0.999;

pub const HYPERPARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HyperKind {
    /// One smoothing factor shared by all classes.
    LsScalar,
    /// One smoothing factor per true class.
    LsVector,
    /// One L2 coefficient per classifier weight and bias.
    L2Unitwise,
}

impl HyperKind {
    pub fn name(self) -> &'static str {
        match self {
            HyperKind::LsScalar => "ls_scalar",
            HyperKind::LsVector => "ls_vector",
            HyperKind::L2Unitwise => "l2_unitwise",
        }
    }

    pub fn is_label_smoothing(self) -> bool {
        matches!(self, HyperKind::LsScalar | HyperKind::LsVector)
    }

    pub fn len(self, num_classes: usize, feature_dim: usize) -> usize {
        match self {
            HyperKind::LsScalar => 1,
            HyperKind::LsVector => num_classes,
            HyperKind::L2Unitwise => feature_dim * num_classes + num_classes,
        }
    }
}

/// Meta-learned hyper-parameters `ω`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    pub version: u32,
    pub kind: HyperKind,
    pub num_classes: usize,
    pub values: Vec<f64>,
}

impl HyperParams {
    pub fn new(kind: HyperKind, num_classes: usize, values: Vec<f64>) -> Result<Self> {
        let hp = Self {
            version: HYPERPARAMS_VERSION,
            kind,
            num_classes,
            values,
        };
        hp.validate()?;
        Ok(hp)
    }

    pub fn zeros(kind: HyperKind, num_classes: usize, feature_dim: usize) -> Self {
        Self {
            version: HYPERPARAMS_VERSION,
            kind,
            num_classes,
            values: vec![0.0; kind.len(num_classes, feature_dim)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != HYPERPARAMS_VERSION {
            return Err(Error::Format(format!(
                "unsupported hyper-parameter version {}",
                self.version
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Format("num_classes must be at least 2".into()));
        }
        let k = self.num_classes;
        let len_ok = match self.kind {
            HyperKind::LsScalar => self.values.len() == 1,
            HyperKind::LsVector => self.values.len() == k,
            HyperKind::L2Unitwise => self.values.len() >= 2 * k && self.values.len().is_multiple_of(k),
        };
        if !len_ok {
            return Err(Error::Format(format!(
                "{:?} with {k} classes cannot hold {} values",
                self.kind,
                self.values.len()
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("hyper-parameters must be finite".into()));
        }
        if self.kind.is_label_smoothing() && self.values.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::Format("label smoothing values must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Feature dimension implied by an L2 parameter vector.
    pub fn feature_dim(&self) -> Option<usize> {
        (self.kind == HyperKind::L2Unitwise).then(|| self.values.len() / self.num_classes - 1)
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::vector(self.values.clone())
    }

    /// Clamps label-smoothing values into `[0, LS_MAX]`.
    pub fn project(&mut self) {
        if self.kind.is_label_smoothing() {
            for v in &mut self.values {
                *v = v.clamp(0.0, LS_MAX);
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let hp: Self = serde_json::from_str(text)?;
        hp.validate()?;
        Ok(hp)
    }
}

/// `y (1 - ω_c) + ω_c / K`, where `ω_c` is the smoothing factor of each
/// sample's true class (`omega` has one entry for scalar smoothing, `K` for
/// per-class smoothing).
pub fn smooth_labels(tape: &mut Tape, labels: &[usize], omega: NodeId, k: usize) -> Result<NodeId> {
    let len = tape.value(omega).len();
    let idx: Vec<usize> = match len {
        1 => vec![0; labels.len()],
        l if l == k => labels.to_vec(),
        l => {
            return Err(Error::ShapeMismatch {
                op: "smooth_labels",
                lhs: vec![k],
                rhs: vec![l],
            })
        }
    };
    let one_hot = Tensor::one_hot(labels, k)?;
    let direction = one_hot.map(|y| 1.0 / k as f64 - y);
    let per_sample = tape.take(omega, &idx)?;
    let w = tape.expand_cols(per_sample, k)?;
    let d = tape.constant(direction);
    let delta = tape.mul(w, d)?;
    let y = tape.constant(one_hot);
    tape.add(y, delta)
}

/// `mean_i -Σ_k t_ik log softmax(z_i)_k`.
pub fn cross_entropy_soft(tape: &mut Tape, logits: NodeId, targets: NodeId) -> Result<NodeId> {
    let (n, _) = tape.value(logits).dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let prod = tape.mul(targets, lsm)?;
    let total = tape.sum(prod, None)?;
    tape.scale(total, -1.0 / n as f64)
}

pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, _) = tape.value(logits).dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let picked = tape.gather_rows(lsm, labels)?;
    let total = tape.sum(picked, None)?;
    tape.scale(total, -1.0 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum FocalMode {
    Fixed {
        gamma: f64,
    },
    /// `γ = 5` below true-class probability 0.2, else `γ = 3`.
    Flsd53,
}

pub const FLSD_THRESHOLD: f64 = 0.2;

/// `mean_i -(1 - p_i)^γ_i log p_i` with `p_i` the true-class probability.
/// Under [`FocalMode::Flsd53`] the choice of `γ_i` is not differentiated.
pub fn focal_loss(tape: &mut Tape, logits: NodeId, labels: &[usize], mode: FocalMode) -> Result<NodeId> {
    let (n, _) = tape.value(logits).dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let lsm = tape.log_softmax_rows(logits)?;
    let logp = tape.gather_rows(lsm, labels)?;
    let gammas: Vec<f64> = match mode {
        FocalMode::Fixed { gamma } => {
            if !(gamma >= 0.0) {
                return Err(Error::invalid(format!("focal gamma must be >= 0, got {gamma}")));
            }
            vec![gamma; n]
        }
        FocalMode::Flsd53 => tape
            .value(logp)
            .data()
            .iter()
            .map(|lp| if lp.exp() < FLSD_THRESHOLD { 5.0 } else { 3.0 })
            .collect(),
    };
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for (i, &g) in gammas.iter().enumerate() {
        match groups.iter_mut().find(|(v, _)| *v == g) {
            Some((_, idx)) => idx.push(i),
            None => groups.push((g, vec![i])),
        }
    }
    let mut total: Option<NodeId> = None;
    for (gamma, idx) in groups {
        let lp = tape.take(logp, &idx)?;
        let term = if gamma == 0.0 {
            lp
        } else {
            let p = tape.exp(lp)?;
            let q = tape.neg(p)?;
            let q = tape.shift(q, 1.0)?;
            let w = tape.powf(q, gamma)?;
            tape.mul(w, lp)?
        };
        let s = tape.sum(term, None)?;
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    let total = total.expect("n >= 1");
    tape.scale(total, -1.0 / n as f64)
}

/// `mean_i Σ_k (p_ik - y_ik)²`.
pub fn brier_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let (n, k) = tape.value(logits).dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let p = tape.softmax_rows(logits)?;
    let y = tape.constant(Tensor::one_hot(labels, k)?);
    let d = tape.sub(p, y)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum(sq, None)?;
    tape.scale(total, 1.0 / n as f64)
}

/// `Σ ω ⊙ φ²` over classifier weights `[d × K]` then biases `[K]`, with
/// `omega` laid out flat in the same order.
pub fn l2_penalty(tape: &mut Tape, phi_w: NodeId, phi_b: NodeId, omega: NodeId) -> Result<NodeId> {
    let (d, k) = tape.value(phi_w).dims2()?;
    let len = tape.value(omega).len();
    if len != d * k + k || tape.value(phi_b).len() != k {
        return Err(Error::ShapeMismatch {
            op: "l2_penalty",
            lhs: vec![d * k + k],
            rhs: vec![len],
        });
    }
    let w_idx: Vec<usize> = (0..d * k).collect();
    let b_idx: Vec<usize> = (d * k..d * k + k).collect();
    let ow = tape.take(omega, &w_idx)?;
    let ow = tape.reshape(ow, vec![d, k])?;
    let ob = tape.take(omega, &b_idx)?;
    let w2 = tape.mul(phi_w, phi_w)?;
    let b2 = tape.mul(phi_b, phi_b)?;
    let pw = tape.mul(ow, w2)?;
    let pb = tape.mul(ob, b2)?;
    let pw = tape.sum(pw, None)?;
    let pb = tape.sum(pb, None)?;
    tape.add(pw, pb)
}
