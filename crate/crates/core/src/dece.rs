//! Differentiable calibration estimators built on the autodiff tape.
//!
//! [`dece`] replaces the two non-differentiable pieces of ECE: hard bin
//! assignment becomes a softmax over bins, and the correctness indicator
//! becomes a soft rank of the true class.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bins whose total soft membership falls below this are skipped.
pub const EMPTY_BIN_EPS: f64 = 1e-12;

/// Default Laplacian kernel width for [`mmce`].
pub const MMCE_KERNEL_WIDTH: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DeceConfig {
    pub bins: usize,
    /// Inverse temperature of the pairwise rank sigmoids.
    pub tau_a: f64,
    /// Temperature of the bin-membership softmax.
    pub tau_b: f64,
}

impl Default for DeceConfig {
    fn default() -> Self {
        Self {
            bins: 15,
            tau_a: 100.0,
            tau_b: 0.01,
        }
    }
}

impl DeceConfig {
    pub fn new(bins: usize, tau_a: f64, tau_b: f64) -> Result<Self> {
        let cfg = Self { bins, tau_a, tau_b };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("dece bins must be at least 1".into()));
        }
        if !(self.tau_a > 0.0 && self.tau_a.is_finite()) {
            return Err(Error::Config(format!("tau_a must be positive, got {}", self.tau_a)));
        }
        if !(self.tau_b > 0.0 && self.tau_b.is_finite()) {
            return Err(Error::Config(format!("tau_b must be positive, got {}", self.tau_b)));
        }
        Ok(())
    }

    /// `w_m = m`.
    pub fn weights(&self) -> Tensor {
        Tensor::vector((1..=self.bins).map(|m| m as f64).collect())
    }

    /// `b_m = -(m - 1) m / (2M)`, placing the decision boundary between bins
    /// `m` and `m + 1` at `m / M`.
    pub fn biases(&self) -> Tensor {
        let big_m = self.bins as f64;
        Tensor::vector(
            (1..=self.bins)
                .map(|m| {
                    let m = m as f64;
                    -(m - 1.0) * m / (2.0 * big_m)
                })
                .collect(),
        )
    }

    /// Bin centres `(2m - 1) / (2M)`.
    pub fn centers(&self) -> Tensor {
        let big_m = self.bins as f64;
        Tensor::vector(
            (1..=self.bins)
                .map(|m| (2.0 * m as f64 - 1.0) / (2.0 * big_m))
                .collect(),
        )
    }
}

/// `softmax((w c + b) / τ_b)` for each confidence in the `[n]` vector `conf`,
/// giving an `[n × M]` membership matrix.
pub fn soft_bin_memberships(tape: &mut Tape, conf: NodeId, cfg: &DeceConfig) -> Result<NodeId> {
    let w = tape.constant(cfg.weights());
    let b = tape.constant(cfg.biases());
    let c = tape.expand_cols(conf, cfg.bins)?;
    let z = tape.mul(c, w)?;
    let z = tape.add(z, b)?;
    let z = tape.scale(z, 1.0 / cfg.tau_b)?;
    tape.softmax_rows(z)
}

/// Per-sample soft correctness `max(0, 2 - R)` where
/// `R = 1 + Σ_{j≠y} σ(τ_a (z_j - z_y))` is the soft rank of the true class.
pub fn soft_accuracy(tape: &mut Tape, logits: NodeId, labels: &[usize], tau_a: f64) -> Result<NodeId> {
    let (_, k) = tape.value(logits).dims2()?;
    let true_logit = tape.gather_rows(logits, labels)?;
    let true_logit = tape.expand_cols(true_logit, k)?;
    let diff = tape.sub(logits, true_logit)?;
    let diff = tape.scale(diff, tau_a)?;
    let sig = tape.sigmoid(diff)?;
    // The j = y term contributes σ(0) = 1/2, so 2 - R = 3/2 - Σ_j σ.
    let total = tape.sum(sig, Some(1))?;
    let acc = tape.neg(total)?;
    let acc = tape.shift(acc, 1.5)?;
    tape.clamp_min(acc, 0.0)
}

/// Maximum softmax probability of each row. The argmax is fixed at the
/// current value; gradients flow through the selected entry.
pub fn confidences(tape: &mut Tape, logits: NodeId) -> Result<NodeId> {
    let probs = tape.softmax_rows(logits)?;
    let pred = tape.value(logits).argmax_rows()?;
    tape.gather_rows(probs, &pred)
}

fn check_batch(tape: &Tape, logits: NodeId, labels: &[usize]) -> Result<usize> {
    let (n, _) = tape.try_value(logits)?.dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::invalid(format!("{} labels for {n} rows", labels.len())));
    }
    Ok(n)
}

/// Weighted gap `Σ_m (S_m / n) |A_m / S_m - C_m / S_m|` over bins whose soft
/// mass `S_m` is at least [`EMPTY_BIN_EPS`]. `acc` and `conf` are `[n × M]`
/// membership-weighted values, `memberships` the raw memberships.
fn aggregate(tape: &mut Tape, memberships: NodeId, acc: NodeId, conf: NodeId, n: usize) -> Result<NodeId> {
    let mass = tape.sum(memberships, Some(0))?;
    let active: Vec<usize> = tape
        .value(mass)
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= EMPTY_BIN_EPS)
        .map(|(m, _)| m)
        .collect();
    let acc_sum = tape.sum(acc, Some(0))?;
    let mass = tape.take(mass, &active)?;
    let acc_sum = tape.take(acc_sum, &active)?;
    let acc_mean = tape.div(acc_sum, mass)?;
    let conf_mean = match tape.value(conf).rank() {
        // Per-bin constants (bin centres) rather than per-sample values.
        1 => tape.take(conf, &active)?,
        _ => {
            let conf_sum = tape.sum(conf, Some(0))?;
            let conf_sum = tape.take(conf_sum, &active)?;
            tape.div(conf_sum, mass)?
        }
    };
    let gap = tape.sub(acc_mean, conf_mean)?;
    let gap = tape.abs(gap)?;
    let weighted = tape.mul(mass, gap)?;
    let total = tape.sum(weighted, None)?;
    tape.scale(total, 1.0 / n as f64)
}

/// Differentiable ECE of a batch of logits.
pub fn dece(tape: &mut Tape, logits: NodeId, labels: &[usize], cfg: &DeceConfig) -> Result<NodeId> {
    let n = check_batch(tape, logits, labels)?;
    let conf = confidences(tape, logits)?;
    let acc = soft_accuracy(tape, logits, labels, cfg.tau_a)?;
    let o = soft_bin_memberships(tape, conf, cfg)?;
    let acc_cols = tape.expand_cols(acc, cfg.bins)?;
    let conf_cols = tape.expand_cols(conf, cfg.bins)?;
    let weighted_acc = tape.mul(o, acc_cols)?;
    let weighted_conf = tape.mul(o, conf_cols)?;
    aggregate(tape, o, weighted_acc, weighted_conf, n)
}

/// Soft-binned ECE using bin centres as the confidence of each bin and hard
/// correctness for accuracy.
pub fn sb_ece(tape: &mut Tape, logits: NodeId, labels: &[usize], cfg: &DeceConfig) -> Result<NodeId> {
    let n = check_batch(tape, logits, labels)?;
    let conf = confidences(tape, logits)?;
    let correct = hard_correctness(tape.value(logits), labels)?;
    let correct = tape.constant(correct);
    let o = soft_bin_memberships(tape, conf, cfg)?;
    let correct_cols = tape.expand_cols(correct, cfg.bins)?;
    let weighted_acc = tape.mul(o, correct_cols)?;
    let centers = tape.constant(cfg.centers());
    aggregate(tape, o, weighted_acc, centers, n)
}

/// `1` where the lowest-index argmax equals the label, else `0`.
pub fn hard_correctness(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let pred = logits.argmax_rows()?;
    if pred.len() != labels.len() {
        return Err(Error::invalid("label count does not match logits"));
    }
    Ok(Tensor::vector(
        pred.iter()
            .zip(labels)
            .map(|(p, y)| if p == y { 1.0 } else { 0.0 })
            .collect(),
    ))
}

/// `sqrt(Σ_ij (r_i r_j k(c_i, c_j)) / n²)` with `r = correct - conf` and
/// Laplacian kernel `k(c, c') = exp(-|c - c'| / width)`.
pub fn mmce(tape: &mut Tape, conf: NodeId, correct: NodeId, width: f64) -> Result<NodeId> {
    if !(width > 0.0) {
        return Err(Error::invalid(format!("kernel width must be positive, got {width}")));
    }
    let n = tape.value(conf).len();
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let rows = tape.expand_cols(conf, n)?;
    let cols = tape.transpose(rows)?;
    let dist = tape.sub(rows, cols)?;
    let dist = tape.abs(dist)?;
    let dist = tape.scale(dist, -1.0 / width)?;
    let kernel = tape.exp(dist)?;
    let r = tape.sub(correct, conf)?;
    let r_rows = tape.expand_cols(r, n)?;
    let r_cols = tape.transpose(r_rows)?;
    let q = tape.mul(r_rows, kernel)?;
    let q = tape.mul(q, r_cols)?;
    let total = tape.sum(q, None)?;
    let total = tape.scale(total, 1.0 / (n * n) as f64)?;
    // Rounding can leave a tiny negative value for a PSD form that is zero.
    let total = tape.clamp_min(total, 0.0)?;
    tape.sqrt(total)
}

/// MMCE of a batch of logits, using max-softmax confidences and hard
/// correctness.
pub fn mmce_logits(tape: &mut Tape, logits: NodeId, labels: &[usize], width: f64) -> Result<NodeId> {
    check_batch(tape, logits, labels)?;
    let conf = confidences(tape, logits)?;
    let correct = hard_correctness(tape.value(logits), labels)?;
    let correct = tape.constant(correct);
    mmce(tape, conf, correct, width)
}

/// Evaluates [`dece`] on plain tensors.
pub fn dece_value(logits: &Tensor, labels: &[usize], cfg: &DeceConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = dece(&mut tape, z, labels, cfg)?;
    tape.value(out).item()
}

/// Evaluates [`sb_ece`] on plain tensors.
pub fn sb_ece_value(logits: &Tensor, labels: &[usize], cfg: &DeceConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = sb_ece(&mut tape, z, labels, cfg)?;
    tape.value(out).item()
}

/// Evaluates [`mmce_logits`] on plain tensors.
pub fn mmce_value(logits: &Tensor, labels: &[usize], width: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(logits.clone());
    let out = mmce_logits(&mut tape, z, labels, width)?;
    tape.value(out).item()
}
