//! Reference (non-differentiable) calibration metrics.
//!
//! Everything here is plain `f64` arithmetic with no dependency on the
//! autodiff module, so it can serve as ground truth for the differentiable
//! estimators.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Tolerance on row sums accepted by [`PredictionBatch::new`].
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Predicted class probabilities with their true labels.
#[derive(Debug, Clone)]
pub struct PredictionBatch {
    probs: Tensor,
    labels: Vec<usize>,
}

impl PredictionBatch {
    pub fn new(probs: Tensor, labels: Vec<usize>) -> Result<Self> {
        let (n, k) = probs.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "{} labels for {n} prediction rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::IndexOutOfRange { index: bad, size: k });
        }
        for (i, row) in probs.rows().enumerate() {
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return Err(Error::invalid(format!(
                    "row {i} is not a probability vector (sum {total})"
                )));
            }
        }
        Ok(Self { probs, labels })
    }

    /// Applies a softmax to each row of `logits`.
    pub fn from_logits(logits: &Tensor, labels: Vec<usize>) -> Result<Self> {
        Self::new(softmax(logits)?, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `(confidence, correct)` for each sample. The prediction is the
    /// lowest-index maximum of the row.
    pub fn confidence_and_correctness(&self) -> Vec<(f64, bool)> {
        self.probs
            .rows()
            .zip(&self.labels)
            .map(|(row, &y)| {
                let (pred, conf) = row_argmax(row);
                (conf, pred == y)
            })
            .collect()
    }

    fn permuted(&self, order: &[usize]) -> Self {
        Self {
            probs: self.probs.select_rows(order).expect("valid permutation"),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn row_argmax(row: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    (best, row[best])
}

/// Row-wise softmax of an `[n × K]` matrix.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let (n, k) = logits.dims2()?;
    let mut out = Vec::with_capacity(n * k);
    for row in logits.rows() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        out.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::matrix(n, k, out)
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Statistics of a single confidence bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Fraction correct; 0 for an empty bin.
    pub acc: f64,
    /// Mean confidence; 0 for an empty bin.
    pub conf: f64,
    pub gap: f64,
}

/// Per-bin reliability statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub bins: Vec<Bin>,
}

impl BinStats {
    pub const CSV_HEADER: &'static str = "bin_lo,bin_hi,count,acc,conf,gap";

    pub fn total(&self) -> usize {
        self.bins.iter().map(|b| b.count).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for b in &self.bins {
            let _ = writeln!(s, "{},{},{},{},{},{}", b.lo, b.hi, b.count, b.acc, b.conf, b.gap);
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == Self::CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header `{}`", Self::CSV_HEADER),
                })
            }
        }
        let mut bins = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 6 fields, found {}", fields.len()),
                });
            }
            let float = |s: &str| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("`{s}`: {e}"),
                })
            };
            bins.push(Bin {
                lo: float(fields[0])?,
                hi: float(fields[1])?,
                count: fields[2].parse().map_err(|e| Error::Parse {
                    line: line_no,
                    msg: format!("`{}`: {e}", fields[2]),
                })?,
                acc: float(fields[3])?,
                conf: float(fields[4])?,
                gap: float(fields[5])?,
            });
        }
        Ok(Self { bins })
    }
}

fn edge(m: usize, bins: usize) -> f64 {
    m as f64 / bins as f64
}

/// Zero-based bin of confidence `c` among `bins` equal-width bins, where bin
/// `m` (one-based) covers `((m - 1) / M, m / M]` and `c = 0` goes to the first.
pub fn bin_index(c: f64, bins: usize) -> usize {
    let mut m = ((c * bins as f64).ceil() as usize).clamp(1, bins);
    while m > 1 && c <= edge(m - 1, bins) {
        m -= 1;
    }
    while m < bins && c > edge(m, bins) {
        m += 1;
    }
    m - 1
}

fn aggregate(n: usize, groups: impl Iterator<Item = (f64, f64, Vec<(f64, bool)>)>) -> (f64, Vec<Bin>) {
    let mut ece = 0.0;
    let mut out = Vec::new();
    for (lo, hi, members) in groups {
        let count = members.len();
        let (acc, conf) = if count == 0 {
            (0.0, 0.0)
        } else {
            let mut correct = 0.0;
            let mut conf_sum = 0.0;
            for &(c, ok) in &members {
                conf_sum += c;
                if ok {
                    correct += 1.0;
                }
            }
            (correct / count as f64, conf_sum / count as f64)
        };
        let gap = (acc - conf).abs();
        if count > 0 {
            ece += count as f64 / n as f64 * gap;
        }
        out.push(Bin {
            lo,
            hi,
            count,
            acc,
            conf,
            gap,
        });
    }
    (ece, out)
}

/// Expected calibration error over `bins` equal-width confidence bins.
pub fn ece_with_bins(batch: &PredictionBatch, bins: usize) -> Result<(f64, BinStats)> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut groups: Vec<Vec<(f64, bool)>> = vec![Vec::new(); bins];
    for (c, ok) in batch.confidence_and_correctness() {
        groups[bin_index(c, bins)].push((c, ok));
    }
    let (ece, bins_out) = aggregate(
        batch.len(),
        groups
            .into_iter()
            .enumerate()
            .map(|(m, g)| (edge(m, bins), edge(m + 1, bins), g)),
    );
    Ok((ece, BinStats { bins: bins_out }))
}

pub fn ece(batch: &PredictionBatch, bins: usize) -> Result<f64> {
    ece_with_bins(batch, bins).map(|(e, _)| e)
}

/// Sizes of `bins` contiguous groups covering `n` items, differing by at most one.
pub fn equal_mass_sizes(n: usize, bins: usize) -> Vec<usize> {
    let base = n / bins;
    let extra = n % bins;
    (0..bins).map(|m| base + usize::from(m < extra)).collect()
}

/// Adaptive ECE: equal-mass bins over samples sorted by confidence.
///
/// Ties in confidence keep the original sample order. The reported bin edges
/// are the smallest and largest confidence in each group.
pub fn aece_with_bins(batch: &PredictionBatch, bins: usize) -> Result<(f64, BinStats)> {
    if bins == 0 {
        return Err(Error::invalid("bin count must be positive"));
    }
    let n = batch.len();
    if n < bins {
        return Err(Error::invalid(format!(
            "adaptive binning needs at least {bins} samples, got {n}"
        )));
    }
    let mut samples: Vec<(usize, f64, bool)> = batch
        .confidence_and_correctness()
        .into_iter()
        .enumerate()
        .map(|(i, (c, ok))| (i, c, ok))
        .collect();
    samples.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut start = 0;
    let groups = equal_mass_sizes(n, bins).into_iter().map(|size| {
        let chunk = &samples[start..start + size];
        start += size;
        let lo = chunk.first().map_or(0.0, |s| s.1);
        let hi = chunk.last().map_or(0.0, |s| s.1);
        (lo, hi, chunk.iter().map(|&(_, c, ok)| (c, ok)).collect())
    });
    let (value, bins_out) = aggregate(n, groups);
    Ok((value, BinStats { bins: bins_out }))
}

pub fn aece(batch: &PredictionBatch, bins: usize) -> Result<f64> {
    aece_with_bins(batch, bins).map(|(e, _)| e)
}

/// Proper-scoring and accuracy summaries of a set of logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub nll: f64,
    pub brier: f64,
    pub error_rate: f64,
}

pub fn evaluate_scores(logits: &Tensor, labels: &[usize]) -> Result<Scores> {
    let (n, k) = logits.dims2()?;
    if n == 0 {
        return Err(Error::EmptyBatch);
    }
    if labels.len() != n {
        return Err(Error::invalid("label count does not match logits"));
    }
    let mut nll = 0.0;
    let mut brier = 0.0;
    let mut errors = 0usize;
    for (row, &y) in logits.rows().zip(labels) {
        if y >= k {
            return Err(Error::IndexOutOfRange { index: y, size: k });
        }
        let logp = log_softmax_row(row);
        nll -= logp[y];
        brier += logp
            .iter()
            .enumerate()
            .map(|(j, lp)| {
                let d = lp.exp() - if j == y { 1.0 } else { 0.0 };
                d * d
            })
            .sum::<f64>();
        if row_argmax(row).0 != y {
            errors += 1;
        }
    }
    Ok(Scores {
        nll: nll / n as f64,
        brier: brier / n as f64,
        error_rate: errors as f64 / n as f64,
    })
}

/// Candidate temperatures, evaluated as `start + step * i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureGrid {
    /// Expressed in hundredths to keep grid points exact decimals.
    pub start_centi: u32,
    pub stop_centi: u32,
    pub step_centi: u32,
}

impl Default for TemperatureGrid {
    /// `0.05, 0.06, …, 10.00`.
    fn default() -> Self {
        Self {
            start_centi: 5,
            stop_centi: 1000,
            step_centi: 1,
        }
    }
}

impl TemperatureGrid {
    pub fn points(&self) -> Result<Vec<f64>> {
        if self.start_centi < 5 || self.stop_centi > 1000 || self.step_centi == 0 || self.start_centi > self.stop_centi
        {
            return Err(Error::invalid(format!(
                "temperature grid must lie within [0.05, 10] with a positive step: {self:?}"
            )));
        }
        Ok((self.start_centi..=self.stop_centi)
            .step_by(self.step_centi as usize)
            .map(|c| c as f64 / 100.0)
            .collect())
    }
}

pub fn nll_at_temperature(logits: &Tensor, labels: &[usize], t: f64) -> Result<f64> {
    let scaled = logits.map(|v| v / t);
    Ok(evaluate_scores(&scaled, labels)?.nll)
}

#[derive(Debug, Clone)]
pub struct TemperatureFit {
    pub temperature: f64,
    pub nll: f64,
    pub probs: Tensor,
}

/// Grid search for the temperature minimising NLL of `softmax(logits / T)`.
/// Ties keep the smaller temperature.
pub fn fit_temperature(logits: &Tensor, labels: &[usize], grid: TemperatureGrid) -> Result<TemperatureFit> {
    let mut best: Option<(f64, f64)> = None;
    for t in grid.points()? {
        let nll = nll_at_temperature(logits, labels, t)?;
        if best.is_none_or(|(_, b)| nll < b) {
            best = Some((t, nll));
        }
    }
    let (temperature, nll) = best.expect("grid is never empty");
    Ok(TemperatureFit {
        temperature,
        nll,
        probs: softmax(&logits.map(|v| v / temperature))?,
    })
}

/// Reorders samples; `order` must be a permutation of `0..n`.
#[doc(hidden)]
pub fn permute_batch(batch: &PredictionBatch, order: &[usize]) -> PredictionBatch {
    batch.permuted(order)
}
