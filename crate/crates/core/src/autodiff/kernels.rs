//! Pure forward kernels shared by the tape and by tape replay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Elementwise single-input operations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Relu,
    Sigmoid,
    Abs,
    /// `max(x, c)`; backward passes 1 only where `x > c`.
    ClampMin(f64),
    /// Square root; the derivative at 0 is taken as 0.
    Sqrt,
    /// `x^p` for `p >= 1`, or `x > 0` when `p < 1`.
    Pow(f64),
    /// Multiplication by a constant.
    Scale(f64),
    /// Addition of a constant.
    Shift(f64),
}

/// Elementwise two-input operations with scalar or row broadcasting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    /// Elementwise maximum; ties send the gradient to the left operand.
    Max,
}

/// Divisors smaller than this in magnitude are rejected.
pub const DIV_EPS: f64 = 1e-300;

/// How the two operands of a binary op line up.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    Same,
    /// Right operand is a single value.
    RightScalar,
    /// Left operand is a single value.
    LeftScalar,
    /// Right operand is a row `[k]` repeated over every row of `[n, k]`.
    RightRow,
    /// Left operand is a row `[k]` repeated over every row of `[n, k]`.
    LeftRow,
}

pub(crate) fn broadcast_kind(x: &Tensor, y: &Tensor) -> Result<Broadcast> {
    if x.shape() == y.shape() {
        return Ok(Broadcast::Same);
    }
    if y.is_scalar() {
        return Ok(Broadcast::RightScalar);
    }
    if x.is_scalar() {
        return Ok(Broadcast::LeftScalar);
    }
    match (x.shape(), y.shape()) {
        ([_, k], [k2]) if k == k2 => Ok(Broadcast::RightRow),
        ([k], [_, k2]) if k == k2 => Ok(Broadcast::LeftRow),
        _ => Err(Error::ShapeMismatch {
            op: "binary",
            lhs: x.shape().to_vec(),
            rhs: y.shape().to_vec(),
        }),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_finite(t: Tensor, op: &'static str) -> Result<Tensor> {
    if t.all_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn unary(op: UnaryOp, x: &Tensor) -> Result<Tensor> {
    let out = match op {
        UnaryOp::Neg => x.map(|v| -v),
        UnaryOp::Exp => x.map(f64::exp),
        UnaryOp::Log => {
            if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("argument {bad} is not positive"),
                });
            }
            x.map(f64::ln)
        }
        UnaryOp::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        UnaryOp::Sigmoid => x.map(sigmoid),
        UnaryOp::Abs => x.map(f64::abs),
        UnaryOp::ClampMin(c) => x.map(|v| if v > c { v } else { c }),
        UnaryOp::Sqrt => {
            if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: format!("argument {bad} is negative"),
                });
            }
            x.map(f64::sqrt)
        }
        UnaryOp::Pow(p) => {
            if p < 1.0 {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0) {
                    return Err(Error::Domain {
                        op: "pow",
                        detail: format!("base {bad} must be positive for exponent {p}"),
                    });
                }
            }
            x.map(|v| v.powf(p))
        }
        UnaryOp::Scale(c) => x.map(|v| v * c),
        UnaryOp::Shift(c) => x.map(|v| v + c),
    };
    check_finite(out, "unary")
}

pub fn binary(op: BinaryOp, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let kind = broadcast_kind(x, y)?;
    if op == BinaryOp::Div {
        if let Some(bad) = y.data().iter().find(|v| v.abs() < DIV_EPS) {
            return Err(Error::Domain {
                op: "div",
                detail: format!("divisor {bad} too close to zero"),
            });
        }
    }
    let f = |a: f64, b: f64| match op {
        BinaryOp::Add => a + b,
        BinaryOp::Sub => a - b,
        BinaryOp::Mul => a * b,
        BinaryOp::Div => a / b,
        BinaryOp::Max => {
            if a >= b {
                a
            } else {
                b
            }
        }
    };
    let (shape, data): (Vec<usize>, Vec<f64>) = match kind {
        Broadcast::Same => (
            x.shape().to_vec(),
            x.data().iter().zip(y.data()).map(|(&a, &b)| f(a, b)).collect(),
        ),
        Broadcast::RightScalar => {
            let b = y.data()[0];
            let shape = if x.rank() >= y.rank() { x.shape() } else { y.shape() };
            (shape.to_vec(), x.data().iter().map(|&a| f(a, b)).collect())
        }
        Broadcast::LeftScalar => {
            let a = x.data()[0];
            (y.shape().to_vec(), y.data().iter().map(|&b| f(a, b)).collect())
        }
        Broadcast::RightRow => {
            let k = y.len();
            (
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| f(a, y.data()[i % k]))
                    .collect(),
            )
        }
        Broadcast::LeftRow => {
            let k = x.len();
            (
                y.shape().to_vec(),
                y.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &b)| f(x.data()[i % k], b))
                    .collect(),
            )
        }
    };
    check_finite(Tensor::new(shape, data)?, "binary")
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, k) = a.dims2()?;
    let (k2, m) = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::matrix(n, m, out)
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let d = x.data();
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = d[i * m + j];
        }
    }
    Tensor::matrix(m, n, out)
}

/// Sum over all elements (`axis = None`) or along one axis of a rank-1/2 tensor.
pub fn sum(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    match axis {
        None => {
            if x.is_empty() {
                return Err(Error::EmptyReduction);
            }
            Ok(Tensor::scalar(x.sum()))
        }
        Some(ax) => {
            if ax >= x.rank() {
                return Err(Error::InvalidAxis {
                    axis: ax,
                    rank: x.rank(),
                });
            }
            if x.shape()[ax] == 0 {
                return Err(Error::EmptyReduction);
            }
            match (x.rank(), ax) {
                (1, 0) => Ok(Tensor::scalar(x.sum())),
                (2, 0) => {
                    let (_, m) = x.dims2()?;
                    let mut out = vec![0.0; m];
                    for row in x.rows() {
                        for (o, &v) in out.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    Ok(Tensor::vector(out))
                }
                (2, 1) => Ok(Tensor::vector(x.rows().map(|r| r.iter().sum()).collect())),
                (r, _) => Err(Error::InvalidArgument(format!(
                    "axis reduction unsupported for rank {r}"
                ))),
            }
        }
    }
}

pub(crate) fn reduce_count(shape: &[usize], axis: Option<usize>) -> usize {
    match axis {
        None => shape.iter().product(),
        Some(ax) => shape[ax],
    }
}

pub fn mean(x: &Tensor, axis: Option<usize>) -> Result<Tensor> {
    let count = reduce_count(x.shape(), axis) as f64;
    let s = sum(x, axis)?;
    Ok(s.map(|v| v / count))
}

fn row_max(row: &[f64]) -> f64 {
    row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    if !x.all_finite() {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let mut out = Vec::with_capacity(n * k);
    for row in x.rows() {
        let m = row_max(row);
        let start = out.len();
        let mut z = 0.0;
        for &v in row {
            let e = (v - m).exp();
            z += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= z;
        }
    }
    Tensor::matrix(n, k, out)
}

pub fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    if !x.all_finite() {
        return Err(Error::NonFinite("log_softmax_rows input"));
    }
    let mut out = Vec::with_capacity(n * k);
    for row in x.rows() {
        let m = row_max(row);
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    Tensor::matrix(n, k, out)
}

pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (n, k) = x.dims2()?;
    if idx.len() != n {
        return Err(Error::ShapeMismatch {
            op: "gather_rows",
            lhs: x.shape().to_vec(),
            rhs: vec![idx.len()],
        });
    }
    let mut out = Vec::with_capacity(n);
    for (i, &j) in idx.iter().enumerate() {
        if j >= k {
            return Err(Error::IndexOutOfRange { index: j, size: k });
        }
        out.push(x.data()[i * k + j]);
    }
    Ok(Tensor::vector(out))
}

/// Picks entries of a rank-1 tensor by index (repeats allowed).
pub fn take(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::InvalidArgument(format!(
            "take expects a vector, got shape {:?}",
            x.shape()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(idx.len());
    for &i in idx {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, size: n });
        }
        out.push(x.data()[i]);
    }
    Ok(Tensor::vector(out))
}

/// Repeats a vector `[n]` into the columns of an `[n, cols]` matrix.
pub fn expand_cols(x: &Tensor, cols: usize) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(Error::InvalidArgument(format!(
            "expand_cols expects a vector, got shape {:?}",
            x.shape()
        )));
    }
    let n = x.len();
    let mut out = Vec::with_capacity(n * cols);
    for &v in x.data() {
        out.extend(std::iter::repeat_n(v, cols));
    }
    Tensor::matrix(n, cols, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn unary_examples() {
        let s = unary(UnaryOp::Sigmoid, &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(s.data(), &[0.5]);
        let r = unary(UnaryOp::Relu, &Tensor::vector(vec![-1.0, 2.0])).unwrap();
        assert_eq!(r.data(), &[0.0, 2.0]);
        let e = unary(UnaryOp::Exp, &Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(e.data()[0], 1.0);
        assert_relative_eq!(e.data()[1], std::f64::consts::E, epsilon = 1e-15);
    }

    #[test]
    fn log_of_non_positive_is_an_error() {
        let err = unary(UnaryOp::Log, &Tensor::vector(vec![1.0, 0.0])).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "log", .. }));
        assert!(unary(UnaryOp::Log, &Tensor::vector(vec![-2.0])).is_err());
    }

    #[test]
    fn exp_overflow_is_reported() {
        assert!(matches!(
            unary(UnaryOp::Exp, &Tensor::vector(vec![1000.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn binary_examples() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let b = Tensor::vector(vec![3.0, 4.0]);
        assert_eq!(binary(BinaryOp::Add, &a, &b).unwrap().data(), &[4.0, 6.0]);
        let x = Tensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 9.0]]).unwrap();
        let ones = Tensor::ones_like(&x);
        assert_eq!(binary(BinaryOp::Mul, &x, &ones).unwrap(), x);
        let d = binary(BinaryOp::Div, &Tensor::vector(vec![1.0]), &Tensor::vector(vec![4.0])).unwrap();
        assert_eq!(d.data(), &[0.25]);
    }

    #[test]
    fn binary_broadcasting_rules() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let row = Tensor::vector(vec![10.0, 20.0]);
        let out = binary(BinaryOp::Add, &x, &row).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
        let out = binary(BinaryOp::Sub, &Tensor::scalar(1.0), &x).unwrap();
        assert_eq!(out.shape(), &[2, 2]);
        assert_eq!(out.data(), &[0.0, -1.0, -2.0, -3.0]);
        let bad = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(binary(BinaryOp::Add, &x, &bad).is_err());
    }

    #[test]
    fn division_by_tiny_is_rejected() {
        let err = binary(BinaryOp::Div, &Tensor::vector(vec![1.0]), &Tensor::vector(vec![1e-301])).unwrap_err();
        assert!(matches!(err, Error::Domain { op: "div", .. }));
    }

    #[test]
    fn matmul_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(3), &x).unwrap(), x);
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
        let z = matmul(&Tensor::zeros(vec![2, 3]), &x).unwrap();
        assert_eq!(z, Tensor::zeros(vec![2, 2]));
        assert!(matmul(&x, &x).is_err());
    }

    #[test]
    fn reductions() {
        assert_eq!(sum(&Tensor::vector(vec![1.0, 2.0, 3.0]), None).unwrap().data(), &[6.0]);
        let m = Tensor::from_rows(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap();
        assert_eq!(mean(&m, Some(1)).unwrap().data(), &[2.0, 6.0]);
        assert_eq!(mean(&m, Some(0)).unwrap().data(), &[3.0, 5.0]);
        assert_eq!(sum(&Tensor::zeros(vec![4, 3]), None).unwrap().data(), &[0.0]);
        assert!(matches!(
            sum(&Tensor::zeros(vec![0, 3]), Some(0)),
            Err(Error::EmptyReduction)
        ));
        assert!(matches!(sum(&m, Some(2)), Err(Error::InvalidAxis { axis: 2, rank: 2 })));
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap()).unwrap();
        // e / (1 + e) evaluated independently.
        let e = std::f64::consts::E;
        assert_relative_eq!(s.data()[0], e / (1.0 + e), epsilon = 1e-15);
        assert_relative_eq!(s.data()[0], 0.73106, epsilon = 1e-5);
        assert_relative_eq!(s.data()[1], 0.26894, epsilon = 1e-5);
        let shifted = softmax_rows(&Tensor::from_rows(&[vec![1001.0, 1000.0]]).unwrap()).unwrap();
        assert_relative_eq!(shifted.data()[0], s.data()[0], epsilon = 1e-15);
    }

    #[test]
    fn gather_examples() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(gather_rows(&x, &[0, 1]).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(gather_rows(&x, &[0, 0]).unwrap().data(), &[1.0, 3.0]);
        assert!(matches!(
            gather_rows(&x, &[0, 2]),
            Err(Error::IndexOutOfRange { index: 2, size: 2 })
        ));
    }
}
