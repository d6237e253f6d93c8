//! Self-checks shared by the command-line tool and the test suites:
//! finite-difference gradient checks of every tape operation and of DECE,
//! and samplers for synthetic prediction batches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, BinaryOp, GradCheckOptions, NodeId, Tape, UnaryOp};
use crate::data::{gen_blobs, BlobsSpec};
use crate::dece::{dece, DeceConfig};
use crate::error::Result;
use crate::losses::{HyperKind, HyperParams};
use crate::meta::{hypergrad_check, hypergradient, Batch, MetaConfig};
use crate::metrics::softmax;
use crate::nn::{init_params, Architecture};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

fn uniform(shape: Vec<usize>, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Moves entries closer than `margin` to `kink` out to `2 * margin`.
fn away_from(t: &Tensor, kink: f64, margin: f64) -> Tensor {
    t.map(|v| {
        if (v - kink).abs() < margin {
            kink + (2.0 * margin).copysign(v - kink)
        } else {
            v
        }
    })
}

fn weighted_sum(tape: &mut Tape, y: NodeId, w: &Tensor) -> Result<NodeId> {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w)?;
    tape.sum(p, None)
}

struct Suite {
    rng: ChaCha8Rng,
    opts: GradCheckOptions,
    out: Vec<NamedCheck>,
}

impl Suite {
    /// Checks `op(x)` contracted against a random weighting.
    fn run(&mut self, name: String, x: &Tensor, op: impl Fn(&mut Tape, NodeId) -> Result<NodeId>) -> Result<()> {
        let probe = {
            let mut tape = Tape::new();
            let leaf = tape.constant(x.clone());
            let y = op(&mut tape, leaf)?;
            tape.value(y).shape().to_vec()
        };
        let w = uniform(probe, -1.0, 1.0, &mut self.rng);
        let report = grad_check(
            |t, leaf| {
                let y = op(t, leaf)?;
                weighted_sum(t, y, &w)
            },
            x,
            self.opts,
        )?;
        self.out.push(NamedCheck {
            name,
            max_rel_error: report.max_rel_error,
            tol: self.opts.tol,
            passed: report.passed,
        });
        Ok(())
    }
}

/// Finite-difference checks of every tape operation on random inputs kept
/// away from kinks and domain boundaries.
pub fn op_suite(seed: u64, opts: GradCheckOptions) -> Result<Vec<NamedCheck>> {
    let mut s = Suite {
        rng: ChaCha8Rng::seed_from_u64(seed),
        opts,
        out: Vec::new(),
    };
    let x = uniform(vec![3, 4], -2.0, 2.0, &mut s.rng);
    let pos = uniform(vec![3, 4], 0.2, 3.0, &mut s.rng);
    let kinked = away_from(&x, 0.0, 1e-3);
    let unary: [(UnaryOp, &Tensor); 12] = [
        (UnaryOp::Neg, &x),
        (UnaryOp::Exp, &x),
        (UnaryOp::Log, &pos),
        (UnaryOp::Relu, &kinked),
        (UnaryOp::Sigmoid, &x),
        (UnaryOp::Abs, &kinked),
        (UnaryOp::ClampMin(0.0), &kinked),
        (UnaryOp::Sqrt, &pos),
        (UnaryOp::Pow(3.0), &x),
        (UnaryOp::Pow(0.5), &pos),
        (UnaryOp::Scale(-2.5), &x),
        (UnaryOp::Shift(0.7), &x),
    ];
    for (op, input) in unary {
        s.run(format!("{op:?}"), input, |t, v| t.unary(op, v))?;
    }

    let other = [
        ("same", uniform(vec![3, 4], 0.5, 2.0, &mut s.rng)),
        ("row", uniform(vec![4], 0.5, 2.0, &mut s.rng)),
        ("scalar", Tensor::scalar(1.3)),
    ];
    for op in [
        BinaryOp::Add,
        BinaryOp::Sub,
        BinaryOp::Mul,
        BinaryOp::Div,
        BinaryOp::Max,
    ] {
        for (label, rhs) in &other {
            // Keep max away from ties with any right operand.
            let lhs = if op == BinaryOp::Max {
                x.map(|v| if v > 0.0 { v + 2.5 } else { v })
            } else {
                x.clone()
            };
            s.run(format!("{op:?}/lhs/{label}"), &lhs, |t, v| {
                let r = t.constant(rhs.clone());
                t.binary(op, v, r)
            })?;
            s.run(format!("{op:?}/rhs/{label}"), rhs, |t, v| {
                let l = t.constant(lhs.clone());
                t.binary(op, l, v)
            })?;
        }
    }

    let m = uniform(vec![3, 5], -2.0, 2.0, &mut s.rng);
    let w = uniform(vec![5, 2], -1.0, 1.0, &mut s.rng);
    let v = uniform(vec![4], -1.0, 1.0, &mut s.rng);
    s.run("matmul/lhs".into(), &m, |t, x| {
        let c = t.constant(w.clone());
        t.matmul(x, c)
    })?;
    s.run("matmul/rhs".into(), &w, |t, x| {
        let c = t.constant(m.clone());
        t.matmul(c, x)
    })?;
    s.run("transpose".into(), &m, |t, x| t.transpose(x))?;
    for axis in [None, Some(0), Some(1)] {
        s.run(format!("sum/{axis:?}"), &m, |t, x| t.sum(x, axis))?;
        s.run(format!("mean/{axis:?}"), &m, |t, x| t.mean(x, axis))?;
    }
    s.run("softmax_rows".into(), &m, |t, x| t.softmax_rows(x))?;
    s.run("log_softmax_rows".into(), &m, |t, x| t.log_softmax_rows(x))?;
    s.run("gather_rows".into(), &m, |t, x| t.gather_rows(x, &[4, 0, 2]))?;
    s.run("take".into(), &v, |t, x| t.take(x, &[3, 3, 0, 1]))?;
    s.run("expand_cols".into(), &v, |t, x| t.expand_cols(x, 3))?;
    s.run("reshape".into(), &m, |t, x| t.reshape(x, vec![5, 3]))?;
    Ok(s.out)
}

fn top_two_margin(row: &[f64]) -> f64 {
    let mut s = row.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    if s.len() < 2 {
        return f64::INFINITY;
    }
    s[0] - s[1]
}

fn edge_margin(c: f64, bins: usize) -> f64 {
    (0..=bins)
        .map(|k| (c - k as f64 / bins as f64).abs())
        .fold(f64::INFINITY, f64::min)
}

/// Random logits whose confidences are at least `edge` from every bin edge
/// and whose top two logits are at least `margin` apart, with uniform labels.
pub fn margin_batch(
    rng: &mut impl Rng,
    n: usize,
    k: usize,
    bins: usize,
    edge: f64,
    margin: f64,
) -> Result<(Tensor, Vec<usize>)> {
    let mut data = Vec::with_capacity(n * k);
    let mut labels = Vec::with_capacity(n);
    while labels.len() < n {
        let scale = rng.random_range(0.5..6.0);
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
        let conf = softmax(&Tensor::matrix(1, k, row.clone())?)?
            .data()
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        if edge_margin(conf, bins) >= edge && top_two_margin(&row) >= margin {
            data.extend(row);
            labels.push(rng.random_range(0..k));
        }
    }
    Ok((Tensor::matrix(n, k, data)?, labels))
}

/// Logits `z ~ N(0, s²)` with labels drawn from `softmax(z / t)`, for random
/// scale `s` and temperature mismatch `t`, so that batches range from under-
/// to over-confident.
pub fn random_prediction_batch(rng: &mut impl Rng, n: usize, k: usize) -> Result<(Tensor, Vec<usize>)> {
    let scale = rng.random_range(0.5..5.0);
    let temp = rng.random_range(0.5..2.5);
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let logits = Tensor::matrix(n, k, (0..n * k).map(|_| normal.sample(rng)).collect())?;
    let probs = softmax(&logits.map(|v| v / temp))?;
    let labels = probs
        .rows()
        .map(|p| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            p.iter()
                .position(|&q| {
                    acc += q;
                    u < acc
                })
                .unwrap_or(k - 1)
        })
        .collect();
    Ok((logits, labels))
}

/// Finite-difference check of DECE with respect to the logits on a batch
/// that avoids its kinks: argmax ties, bin edges and the soft-accuracy clamp.
pub fn dece_grad_check(seed: u64, cfg: &DeceConfig, opts: GradCheckOptions) -> Result<NamedCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let (logits, labels) = margin_batch(&mut rng, 24, 4, cfg.bins, 1e-3, 0.05)?;
        let mut tape = Tape::new();
        let z = tape.constant(logits.clone());
        let acc = crate::dece::soft_accuracy(&mut tape, z, &labels, cfg.tau_a)?;
        if tape.value(acc).data().iter().any(|&a| a > 0.0 && a < 1e-3) {
            continue;
        }
        let report = grad_check(|t, x| dece(t, x, &labels, cfg), &logits, opts)?;
        return Ok(NamedCheck {
            name: "dece".into(),
            max_rel_error: report.max_rel_error,
            tol: opts.tol,
            passed: report.passed,
        });
    }
}

/// Settings of [`hypergrad_suite`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HypergradSuiteOptions {
    /// Inner learning rate of the simulated step.
    pub alpha: f64,
    pub step: f64,
    pub tol: f64,
    pub floor: f64,
}

impl Default for HypergradSuiteOptions {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            step: 1e-5,
            tol: 1e-3,
            floor: 1e-8,
        }
    }
}

/// Finite-difference checks of the hypergradient for scalar LS, vector LS and
/// unit-wise L2 on a 2-8-4 model, plus the exact-zero check at `alpha = 0`.
pub fn hypergrad_suite(
    seed: u64,
    meta: &MetaConfig,
    dece_cfg: &DeceConfig,
    opts: HypergradSuiteOptions,
) -> Result<Vec<NamedCheck>> {
    let spec = BlobsSpec {
        n: 96,
        ..BlobsSpec::default()
    };
    let data = gen_blobs(seed, &spec)?;
    let params = init_params(seed, Architecture::new(vec![2, 8], 4)?);
    let train = Batch::from_dataset(&data, &(0..48).collect::<Vec<_>>())?;
    let metaval = Batch::from_dataset(&data, &(48..96).collect::<Vec<_>>())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for kind in [HyperKind::LsScalar, HyperKind::LsVector, HyperKind::L2Unitwise] {
        let mut omega = HyperParams::zeros(kind, 4, 8);
        for v in omega.values.iter_mut() {
            *v = rng.random_range(0.02..0.2);
        }
        let r = hypergrad_check(
            &params, &omega, &train, &metaval, opts.alpha, meta, dece_cfg, opts.step, opts.tol, opts.floor,
        )?;
        out.push(NamedCheck {
            name: format!("{}/fd", kind.name()),
            max_rel_error: r.max_rel_error,
            tol: r.tol,
            passed: r.passed,
        });
        let zero = hypergradient(&params, &omega, &train, &metaval, 0.0, meta, dece_cfg)?.grad;
        let worst = zero.iter().fold(0.0, |m: f64, g| m.max(g.abs()));
        out.push(NamedCheck {
            name: format!("{}/alpha0", kind.name()),
            max_rel_error: worst,
            tol: 0.0,
            passed: worst == 0.0,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_op_passes() {
        let checks = op_suite(0, GradCheckOptions::default()).unwrap();
        assert!(checks.len() > 50);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn dece_check_passes() {
        let opts = GradCheckOptions {
            tol: 1e-4,
            ..GradCheckOptions::default()
        };
        let c = dece_grad_check(1, &DeceConfig::default(), opts).unwrap();
        assert!(c.passed, "{}", c.max_rel_error);
    }

    #[test]
    fn hypergrad_suite_passes() {
        let checks = hypergrad_suite(
            4,
            &MetaConfig::default(),
            &DeceConfig::default(),
            HypergradSuiteOptions::default(),
        )
        .unwrap();
        assert_eq!(checks.len(), 6);
        for c in &checks {
            assert!(c.passed, "{}: {}", c.name, c.max_rel_error);
        }
    }

    #[test]
    fn margin_batches_respect_margins() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (logits, labels) = margin_batch(&mut rng, 50, 5, 15, 1e-2, 0.1).unwrap();
        assert_eq!(labels.len(), 50);
        for row in logits.rows() {
            assert!(top_two_margin(row) >= 0.1);
        }
    }

    #[test]
    fn random_batches_vary_in_confidence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let means: Vec<f64> = (0..20)
            .map(|_| {
                let (z, _) = random_prediction_batch(&mut rng, 128, 10).unwrap();
                let p = softmax(&z).unwrap();
                p.rows().map(|r| r.iter().copied().fold(0.0, f64::max)).sum::<f64>() / 128.0
            })
            .collect();
        let lo = means.iter().copied().fold(1.0, f64::min);
        let hi = means.iter().copied().fold(0.0, f64::max);
        assert!(hi - lo > 0.3, "{lo}..{hi}");
    }
}
