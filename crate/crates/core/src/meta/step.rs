use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::data::Dataset;
use crate::dece::{dece, mmce_logits, DeceConfig};
use crate::error::{Error, Result};
use crate::losses::{
    brier_loss, cross_entropy, cross_entropy_soft, focal_loss, l2_penalty, smooth_labels, FocalMode, HyperKind,
    HyperParams,
};
use crate::meta::config::{LossConfig, LossKind, MetaConfig, MetaObjective, TrainConfig};
use crate::nn::{forward, linear, Adam, ModelParams, SgdMomentum};
use crate::tensor::Tensor;

/// A minibatch of inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Batch {
    pub fn new(x: Tensor, y: Vec<usize>) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if y.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} rows", y.len())));
        }
        Ok(Self { x, y })
    }

    pub fn from_dataset(data: &Dataset, idx: &[usize]) -> Result<Self> {
        Batch::new(data.x().select_rows(idx)?, idx.iter().map(|&i| data.y()[i]).collect())
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// `ω` after a given number of meta updates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryPoint {
    pub iter: u64,
    pub values: Vec<f64>,
}

/// Learned hyper-parameters together with their optimiser. `trajectory`
/// holds `ω` after every meta update.
#[derive(Debug, Clone)]
pub struct MetaState {
    pub omega: HyperParams,
    pub adam: Adam,
    pub trajectory: Vec<TrajectoryPoint>,
    pub updates: u64,
}

impl MetaState {
    pub fn new(omega: HyperParams, lr: f64) -> Self {
        Self {
            omega,
            adam: Adam::new(lr),
            trajectory: Vec::new(),
            updates: 0,
        }
    }
}

/// Classifier weights and biases as tape nodes.
type Phi = (NodeId, NodeId);

/// Training loss on `logits`. With `omega`, this is cross-entropy against
/// smoothed labels or cross-entropy plus the unit-wise L2 penalty on `phi`;
/// otherwise the configured baseline loss.
pub fn training_loss(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    omega: Option<(HyperKind, NodeId)>,
    phi: Phi,
    loss: &LossConfig,
    dece_cfg: &DeceConfig,
    mmce_width: f64,
) -> Result<NodeId> {
    let k = tape.value(logits).dims2()?.1;
    if let Some((kind, om)) = omega {
        return match kind {
            HyperKind::LsScalar | HyperKind::LsVector => {
                let y = smooth_labels(tape, labels, om, k)?;
                cross_entropy_soft(tape, logits, y)
            }
            HyperKind::L2Unitwise => {
                let ce = cross_entropy(tape, logits, labels)?;
                let pen = l2_penalty(tape, phi.0, phi.1, om)?;
                tape.add(ce, pen)
            }
        };
    }
    match loss.kind {
        LossKind::Ce => cross_entropy(tape, logits, labels),
        LossKind::Brier => brier_loss(tape, logits, labels),
        LossKind::Focal => focal_loss(
            tape,
            logits,
            labels,
            FocalMode::Fixed {
                gamma: loss.focal_gamma,
            },
        ),
        LossKind::Flsd53 => focal_loss(tape, logits, labels, FocalMode::Flsd53),
        LossKind::LabelSmoothing => {
            let om = tape.constant(Tensor::vector(vec![loss.ls_value]));
            let y = smooth_labels(tape, labels, om, k)?;
            cross_entropy_soft(tape, logits, y)
        }
        LossKind::CePlusDece => {
            let ce = cross_entropy(tape, logits, labels)?;
            let d = dece(tape, logits, labels, dece_cfg)?;
            let d = tape.scale(d, loss.dece_weight)?;
            tape.add(ce, d)
        }
        LossKind::CePlusMmce => {
            let ce = cross_entropy(tape, logits, labels)?;
            let m = mmce_logits(tape, logits, labels, mmce_width)?;
            let m = tape.scale(m, loss.mmce_weight)?;
            tape.add(ce, m)
        }
    }
}

/// One SGD-with-momentum step on every parameter. `omega`, when given, is
/// held fixed. Returns the loss before the update.
pub fn base_step(
    params: &mut ModelParams,
    sgd: &mut SgdMomentum,
    batch: &Batch,
    cfg: &TrainConfig,
    omega: Option<&HyperParams>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(batch.x.clone());
    let logits = forward(&mut tape, &bound, x)?;
    let om = omega.map(|o| (o.kind, tape.constant(o.tensor())));
    let loss = training_loss(
        &mut tape,
        logits,
        &batch.y,
        om,
        bound.phi(),
        &cfg.loss,
        &cfg.dece,
        cfg.meta.mmce_width,
    )?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    let grads = tape.backward(loss)?;
    let grads: Vec<Tensor> = bound
        .nodes
        .iter()
        .map(|&n| grads.get(n).cloned())
        .collect::<Result<_>>()?;
    sgd.lr = lr;
    sgd.step(params.tensors_mut(), &grads)?;
    Ok(value)
}

/// Outer loss on meta-validation logits with unsmoothed labels.
pub fn meta_objective(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
    meta: &MetaConfig,
    dece_cfg: &DeceConfig,
) -> Result<NodeId> {
    match meta.objective {
        MetaObjective::Dece => dece(tape, logits, labels, dece_cfg),
        MetaObjective::Ce => cross_entropy(tape, logits, labels),
        MetaObjective::Mmce => mmce_logits(tape, logits, labels, meta.mmce_width),
        MetaObjective::DecePlusCe => {
            let d = dece(tape, logits, labels, dece_cfg)?;
            let c = cross_entropy(tape, logits, labels)?;
            let c = tape.scale(c, meta.ce_weight)?;
            tape.add(d, c)
        }
    }
}

/// Classifier after one plain SGD step of size `alpha` on the cross-entropy
/// training loss, written out explicitly so that it stays differentiable in
/// `omega`. `features` are the frozen feature-extractor outputs.
///
/// With `Z = H W + b`, `P = softmax(Z)` and targets `Y(ω)`:
/// `∇_W = Hᵀ (P - Y) / n` and `∇_b = Σ_rows (P - Y) / n`, plus `2 ω ⊙ φ` for
/// the unit-wise L2 penalty.
pub fn simulated_phi_step(
    tape: &mut Tape,
    features: &Tensor,
    labels: &[usize],
    w: &Tensor,
    b: &Tensor,
    omega: (HyperKind, NodeId),
    alpha: f64,
) -> Result<Phi> {
    let (n, _) = features.dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    let k = w.dims2()?.1;
    let h = tape.constant(features.clone());
    let wc = tape.constant(w.clone());
    let bc = tape.constant(b.clone());
    let z = linear(tape, h, wc, bc)?;
    let p = tape.softmax_rows(z)?;
    let (kind, om) = omega;
    let y = if kind.is_label_smoothing() {
        smooth_labels(tape, labels, om, k)?
    } else {
        tape.constant(Tensor::one_hot(labels, k)?)
    };
    let gz = tape.sub(p, y)?;
    let gz = tape.scale(gz, 1.0 / n as f64)?;
    let ht = tape.transpose(h)?;
    let mut gw = tape.matmul(ht, gz)?;
    let mut gb = tape.sum(gz, Some(0))?;
    if kind == HyperKind::L2Unitwise {
        let (d, _) = w.dims2()?;
        let len = tape.value(om).len();
        if len != d * k + k {
            return Err(Error::ShapeMismatch {
                op: "simulated_phi_step",
                lhs: vec![d * k + k],
                rhs: vec![len],
            });
        }
        let ow = tape.take(om, &(0..d * k).collect::<Vec<_>>())?;
        let ow = tape.reshape(ow, vec![d, k])?;
        let ob = tape.take(om, &(d * k..d * k + k).collect::<Vec<_>>())?;
        let rw = tape.mul(ow, wc)?;
        let rw = tape.scale(rw, 2.0)?;
        let rb = tape.mul(ob, bc)?;
        let rb = tape.scale(rb, 2.0)?;
        gw = tape.add(gw, rw)?;
        gb = tape.add(gb, rb)?;
    }
    let step_w = tape.scale(gw, -alpha)?;
    let step_b = tape.scale(gb, -alpha)?;
    let w_new = tape.add(wc, step_w)?;
    let b_new = tape.add(bc, step_b)?;
    Ok((w_new, b_new))
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperGradient {
    pub outer_loss: f64,
    pub grad: Vec<f64>,
}

/// `∇_ω L_o(φ - α ∇_φ L_i(φ, ω))` with the feature extractor frozen.
pub fn hypergradient(
    params: &ModelParams,
    omega: &HyperParams,
    train: &Batch,
    metaval: &Batch,
    alpha: f64,
    meta: &MetaConfig,
    dece_cfg: &DeceConfig,
) -> Result<HyperGradient> {
    let h = params.features(&train.x)?;
    let hv = params.features(&metaval.x)?;
    let mut tape = Tape::new();
    let om = tape.leaf(omega.tensor());
    let (w2, b2) = simulated_phi_step(
        &mut tape,
        &h,
        &train.y,
        params.phi_weight(),
        params.phi_bias(),
        (omega.kind, om),
        alpha,
    )?;
    let hv = tape.constant(hv);
    let logits = linear(&mut tape, hv, w2, b2)?;
    let outer = meta_objective(&mut tape, logits, &metaval.y, meta, dece_cfg)?;
    let outer_loss = tape.value(outer).item()?;
    let grads = tape.backward(outer)?;
    Ok(HyperGradient {
        outer_loss,
        grad: grads.get(om)?.data().to_vec(),
    })
}

/// Meta update of `ω` from the current parameters: hypergradient, Adam step,
/// projection. Returns the outer loss.
pub fn meta_update(
    params: &ModelParams,
    meta: &mut MetaState,
    train: &Batch,
    metaval: &Batch,
    alpha: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let hg = hypergradient(params, &meta.omega, train, metaval, alpha, &cfg.meta, &cfg.dece)?;
    if !hg.outer_loss.is_finite() {
        return Err(Error::NonFinite("meta-validation loss"));
    }
    let mut values = [meta.omega.tensor()];
    meta.adam.step(&mut values, &[Tensor::vector(hg.grad)])?;
    let [values] = values;
    meta.omega.values = values.into_data();
    meta.omega.project();
    meta.trajectory.push(TrajectoryPoint {
        iter: meta.updates,
        values: meta.omega.values.clone(),
    });
    meta.updates += 1;
    Ok(hg.outer_loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub train_loss: f64,
    pub outer_loss: f64,
}

/// One online bilevel iteration: a base update of all parameters with `ω`
/// fixed, then a meta update of `ω` from the updated parameters using fresh
/// training and meta-validation batches.
#[allow(clippy::too_many_arguments)]
pub fn meta_step(
    params: &mut ModelParams,
    sgd: &mut SgdMomentum,
    meta: &mut MetaState,
    train: &Batch,
    fresh_train: &Batch,
    metaval: &Batch,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepOutcome> {
    let train_loss = base_step(params, sgd, train, cfg, Some(&meta.omega), lr)?;
    let outer_loss = meta_update(params, meta, fresh_train, metaval, lr, cfg)?;
    Ok(StepOutcome { train_loss, outer_loss })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypergradReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Outer loss after the simulated step, computed by differentiating the
/// inner loss with the tape instead of the explicit update rule.
fn outer_loss_reference(
    params: &ModelParams,
    omega: &HyperParams,
    train: &Batch,
    metaval: &Batch,
    alpha: f64,
    meta: &MetaConfig,
    dece_cfg: &DeceConfig,
) -> Result<f64> {
    let h = params.features(&train.x)?;
    let mut tape = Tape::new();
    let w = tape.leaf(params.phi_weight().clone());
    let b = tape.leaf(params.phi_bias().clone());
    let hn = tape.constant(h);
    let logits = linear(&mut tape, hn, w, b)?;
    let om = tape.constant(omega.tensor());
    let inner = training_loss(
        &mut tape,
        logits,
        &train.y,
        Some((omega.kind, om)),
        (w, b),
        &LossConfig::default(),
        dece_cfg,
        meta.mmce_width,
    )?;
    let grads = tape.backward(inner)?;
    let step = |p: &Tensor, g: &Tensor| {
        Tensor::new(
            p.shape().to_vec(),
            p.data().iter().zip(g.data()).map(|(p, g)| p - alpha * g).collect(),
        )
    };
    let w2 = step(params.phi_weight(), grads.get(w)?)?;
    let b2 = step(params.phi_bias(), grads.get(b)?)?;

    let hv = params.features(&metaval.x)?;
    let mut tape = Tape::new();
    let hv = tape.constant(hv);
    let w2 = tape.constant(w2);
    let b2 = tape.constant(b2);
    let logits = linear(&mut tape, hv, w2, b2)?;
    let out = meta_objective(&mut tape, logits, &metaval.y, meta, dece_cfg)?;
    tape.value(out).item()
}

/// Compares [`hypergradient`] with central differences of the outer loss in
/// each component of `ω`, using relative error
/// `|a - n| / max(|a|, |n|, floor)`.
#[allow(clippy::too_many_arguments)]
pub fn hypergrad_check(
    params: &ModelParams,
    omega: &HyperParams,
    train: &Batch,
    metaval: &Batch,
    alpha: f64,
    meta: &MetaConfig,
    dece_cfg: &DeceConfig,
    h: f64,
    tol: f64,
    floor: f64,
) -> Result<HypergradReport> {
    let analytic = hypergradient(params, omega, train, metaval, alpha, meta, dece_cfg)?.grad;
    let mut numeric = Vec::with_capacity(analytic.len());
    for i in 0..omega.values.len() {
        let mut plus = omega.clone();
        plus.values[i] += h;
        let mut minus = omega.clone();
        minus.values[i] -= h;
        let fp = outer_loss_reference(params, &plus, train, metaval, alpha, meta, dece_cfg)?;
        let fm = outer_loss_reference(params, &minus, train, metaval, alpha, meta, dece_cfg)?;
        numeric.push((fp - fm) / (2.0 * h));
    }
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    Ok(HypergradReport {
        analytic,
        numeric,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    })
}

#[cfg(test)]
mod tests;
