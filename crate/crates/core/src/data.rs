//! Synthetic datasets, stratified splits, input corruptions and CSV I/O.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::tensor::Tensor;

/// Upper bound on the class count of any dataset.
pub const MAX_CLASSES: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Tensor,
    y: Vec<usize>,
    num_classes: usize,
    provenance: String,
}

impl Dataset {
    pub fn new(x: Tensor, y: Vec<usize>, num_classes: usize, provenance: impl Into<String>) -> Result<Self> {
        let (n, _) = x.dims2()?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        if y.len() != n {
            return Err(Error::invalid(format!("{} labels for {n} rows", y.len())));
        }
        if num_classes > MAX_CLASSES {
            return Err(Error::invalid(format!(
                "{num_classes} classes exceed the limit of {MAX_CLASSES}"
            )));
        }
        if let Some(&bad) = y.iter().find(|&&l| l >= num_classes) {
            return Err(Error::IndexOutOfRange {
                index: bad,
                size: num_classes,
            });
        }
        if !x.all_finite() {
            return Err(Error::NonFinite("dataset features"));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            provenance: provenance.into(),
        })
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &[usize] {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.y {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.x.select_rows(idx)?,
            idx.iter().map(|&i| self.y[i]).collect(),
            self.num_classes,
            self.provenance.clone(),
        )
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.num_features() != other.num_features() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: self.x.shape().to_vec(),
                rhs: other.x.shape().to_vec(),
            });
        }
        let mut data = self.x.data().to_vec();
        data.extend_from_slice(other.x.data());
        let mut y = self.y.clone();
        y.extend_from_slice(&other.y);
        Dataset::new(
            Tensor::matrix(y.len(), self.num_features(), data)?,
            y,
            self.num_classes.max(other.num_classes),
            format!("{}+{}", self.provenance, other.provenance),
        )
    }

    pub fn with_features(&self, x: Tensor) -> Result<Dataset> {
        if x.shape() != self.x.shape() {
            return Err(Error::ShapeMismatch {
                op: "with_features",
                lhs: self.x.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        Dataset::new(x, self.y.clone(), self.num_classes, self.provenance.clone())
    }

    pub fn to_csv(&self) -> String {
        let d = self.num_features();
        let mut s = String::new();
        for j in 0..d {
            let _ = write!(s, "f{j},");
        }
        s.push_str("label\n");
        for (row, y) in self.x.rows().zip(&self.y) {
            for v in row {
                let _ = write!(s, "{v:?},");
            }
            let _ = writeln!(s, "{y}");
        }
        s
    }

    /// Parses `f0,...,f{d-1},label` rows. The class count is the largest
    /// label plus one.
    pub fn from_csv(text: &str, provenance: impl Into<String>) -> Result<Dataset> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let d = cols.len().saturating_sub(1);
        let header_ok =
            d >= 1 && cols[d] == "label" && cols[..d].iter().enumerate().all(|(j, c)| *c == format!("f{j}"));
        if !header_ok {
            return Err(Error::Parse {
                line: 1,
                msg: "header must be `f0,...,f{d-1},label`".into(),
            });
        }
        let mut data = Vec::new();
        let mut y = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != d + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected {} columns, found {}", d + 1, fields.len()),
                });
            }
            for f in &fields[..d] {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("`{f}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("`{f}` is not finite"),
                    });
                }
                data.push(v);
            }
            let label: usize = fields[d].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("label `{}` is not a non-negative integer", fields[d]),
            })?;
            if label >= MAX_CLASSES {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("label {label} exceeds the class limit {MAX_CLASSES}"),
                });
            }
            y.push(label);
        }
        if y.is_empty() {
            return Err(Error::Parse {
                line: 2,
                msg: "no data rows".into(),
            });
        }
        let k = y.iter().max().map_or(0, |m| m + 1);
        Dataset::new(Tensor::matrix(y.len(), d, data)?, y, k, provenance)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv().as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Dataset> {
        Dataset::from_csv(&read_to_string(path)?, path.display().to_string())
    }
}

/// Gaussian class clusters with means evenly spaced on a circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobsSpec {
    pub num_classes: usize,
    pub n: usize,
    pub dim: usize,
    /// Radius of the circle of class means, in units of the cluster standard
    /// deviation. Smaller values mean more overlap.
    pub separation: f64,
    /// Fraction of labels replaced by a different class.
    pub label_noise: f64,
}

impl Default for BlobsSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            n: 4000,
            dim: 2,
            separation: 2.0,
            label_noise: 0.1,
        }
    }
}

impl BlobsSpec {
    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!("blobs need 2..={MAX_CLASSES} classes")));
        }
        if self.n < self.num_classes {
            return Err(Error::Config(format!(
                "blobs need n >= num_classes ({} < {})",
                self.n, self.num_classes
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config("blobs need at least 2 features".into()));
        }
        if !(self.separation >= 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be finite and >= 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must lie in [0, 0.5)".into()));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize) -> Vec<f64> {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / self.num_classes as f64;
        let mut m = vec![0.0; self.dim];
        m[0] = self.separation * angle.cos();
        m[1] = self.separation * angle.sin();
        m
    }
}

/// Sample `i` belongs to cluster `i mod K`; then exactly
/// `floor(label_noise * n)` randomly chosen labels are moved to a uniformly
/// drawn different class.
pub fn gen_blobs(seed: u64, spec: &BlobsSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_classes;
    let means: Vec<Vec<f64>> = (0..k).map(|c| spec.mean(c)).collect();
    let mut data = Vec::with_capacity(spec.n * spec.dim);
    let mut y = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let c = i % k;
        for m in &means[c] {
            let z: f64 = StandardNormal.sample(&mut rng);
            data.push(m + z);
        }
        y.push(c);
    }
    let flips = (spec.label_noise * spec.n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);
    for &i in &order[..flips] {
        let offset = rng.random_range(1..k);
        y[i] = (y[i] + offset) % k;
    }
    Dataset::new(
        Tensor::matrix(spec.n, spec.dim, data)?,
        y,
        k,
        format!("blobs(seed={seed})"),
    )
}

/// Split sizes by largest remainder; ties go to the earlier split.
fn split_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..fractions.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &s in order.iter().take(n.saturating_sub(assigned)) {
        sizes[s] += 1;
    }
    sizes
}

/// Per-class, per-split counts, each the floor or ceiling of the class's
/// proportional share. Extra units go through a bipartite flow so that split
/// totals match [`split_sizes`] whenever that is achievable.
fn stratified_counts(class_counts: &[usize], fractions: &[f64]) -> Vec<Vec<usize>> {
    let n: usize = class_counts.iter().sum();
    let targets = split_sizes(n, fractions);
    let s_len = fractions.len();
    let mut counts: Vec<Vec<usize>> = Vec::with_capacity(class_counts.len());
    let mut fractional: Vec<Vec<bool>> = Vec::with_capacity(class_counts.len());
    let mut row_need = Vec::with_capacity(class_counts.len());
    for &c in class_counts {
        let q: Vec<f64> = fractions.iter().map(|f| f * c as f64).collect();
        let floors: Vec<usize> = q.iter().map(|v| v.floor() as usize).collect();
        row_need.push(c - floors.iter().sum::<usize>());
        fractional.push(q.iter().zip(&floors).map(|(v, f)| *v > *f as f64).collect());
        counts.push(floors);
    }
    let mut col_need: Vec<usize> = (0..s_len)
        .map(|s| targets[s].saturating_sub(counts.iter().map(|r| r[s]).sum()))
        .collect();

    // Augmenting paths from rows with spare units to splits with spare room,
    // alternating over unused (row → split) and used (split → row) cells.
    let mut used = vec![vec![false; s_len]; class_counts.len()];
    while let Some(start) = (0..class_counts.len()).find(|&k| row_need[k] > 0) {
        let Some(path) = augment(start, &fractional, &used, &col_need) else {
            row_need[start] = 0;
            continue;
        };
        for &(k, s, add) in &path {
            used[k][s] = add;
        }
        let end = path.last().expect("non-empty path").1;
        row_need[start] -= 1;
        col_need[end] -= 1;
    }
    for (k, row) in counts.iter_mut().enumerate() {
        for (s, c) in row.iter_mut().enumerate() {
            if used[k][s] {
                *c += 1;
            }
        }
    }
    // Units the flow could not place go to the first free fractional cell.
    for (k, row) in counts.iter_mut().enumerate() {
        let mut missing = class_counts[k] - row.iter().sum::<usize>();
        for s in 0..s_len {
            if missing > 0 && fractional[k][s] && !used[k][s] {
                row[s] += 1;
                missing -= 1;
            }
        }
    }
    counts
}

/// Breadth-first search for an augmenting path. Returns the cells to flip as
/// `(row, split, new_state)`.
fn augment(
    start: usize,
    fractional: &[Vec<bool>],
    used: &[Vec<bool>],
    col_need: &[usize],
) -> Option<Vec<(usize, usize, bool)>> {
    let rows = fractional.len();
    let cols = col_need.len();
    let mut col_parent: Vec<Option<usize>> = vec![None; cols];
    let mut row_parent: Vec<Option<usize>> = vec![None; rows];
    let mut row_seen = vec![false; rows];
    row_seen[start] = true;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(k) = queue.pop_front() {
        for s in 0..cols {
            if !fractional[k][s] || used[k][s] || col_parent[s].is_some() {
                continue;
            }
            col_parent[s] = Some(k);
            if col_need[s] > 0 {
                let mut path = Vec::new();
                let mut s_cur = s;
                loop {
                    let k_cur = col_parent[s_cur].expect("visited");
                    path.push((k_cur, s_cur, true));
                    match row_parent[k_cur] {
                        Some(s_prev) => {
                            path.push((k_cur, s_prev, false));
                            s_cur = s_prev;
                        }
                        None => break,
                    }
                }
                path.reverse();
                return Some(path);
            }
            for k2 in 0..rows {
                if used[k2][s] && !row_seen[k2] {
                    row_seen[k2] = true;
                    row_parent[k2] = Some(s);
                    queue.push_back(k2);
                }
            }
        }
    }
    None
}

/// Stratified, seed-deterministic partition of `data` into one dataset per
/// fraction.
pub fn split_dataset(data: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() || fractions.iter().any(|f| !(*f > 0.0)) {
        return Err(Error::Config("split fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {total}, not 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes()];
    for (i, &l) in data.y().iter().enumerate() {
        by_class[l].push(i);
    }
    for members in &mut by_class {
        members.shuffle(&mut rng);
    }
    let counts = stratified_counts(&by_class.iter().map(Vec::len).collect::<Vec<_>>(), fractions);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for (members, row) in by_class.iter().zip(&counts) {
        let mut start = 0;
        for (s, &c) in row.iter().enumerate() {
            parts[s].extend_from_slice(&members[start..start + c]);
            start += c;
        }
    }
    parts
        .into_iter()
        .enumerate()
        .map(|(s, mut idx)| {
            if idx.is_empty() {
                return Err(Error::Config(format!("split {s} would receive no samples")));
            }
            idx.shuffle(&mut rng);
            data.subset(&idx)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionFamily {
    GaussNoise,
    Scale,
    Shift,
    FeatureDropout,
}

impl CorruptionFamily {
    pub const ALL: [CorruptionFamily; 4] = [
        CorruptionFamily::GaussNoise,
        CorruptionFamily::Scale,
        CorruptionFamily::Shift,
        CorruptionFamily::FeatureDropout,
    ];

    /// Magnitude at severities 1 to 5.
    pub fn table(self) -> [f64; 5] {
        match self {
            // Noise standard deviation.
            CorruptionFamily::GaussNoise => [0.25, 0.5, 0.75, 1.0, 1.5],
            // Multiplicative factor on every feature.
            CorruptionFamily::Scale => [0.9, 0.8, 0.65, 0.5, 0.35],
            // Length of a constant offset along a seeded random direction.
            CorruptionFamily::Shift => [0.25, 0.5, 1.0, 1.5, 2.0],
            // Probability of zeroing each feature.
            CorruptionFamily::FeatureDropout => [0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    pub family: CorruptionFamily,
    /// 1 to 5; 0 is the identity.
    pub severity: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(family: CorruptionFamily, severity: u8, seed: u64) -> Result<Self> {
        if severity > 5 {
            return Err(Error::Config(format!("severity {severity} outside 0..=5")));
        }
        Ok(Self { family, severity, seed })
    }

    pub fn magnitude(&self) -> f64 {
        match self.severity {
            0 => 0.0,
            s => self.family.table()[(s - 1) as usize],
        }
    }

    pub fn label(&self) -> String {
        let family = match self.family {
            CorruptionFamily::GaussNoise => "gauss_noise",
            CorruptionFamily::Scale => "scale",
            CorruptionFamily::Shift => "shift",
            CorruptionFamily::FeatureDropout => "feature_dropout",
        };
        format!("{family}-{}", self.severity)
    }
}

pub fn corrupt(x: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    if spec.severity > 5 {
        return Err(Error::Config(format!("severity {} outside 0..=5", spec.severity)));
    }
    if spec.severity == 0 {
        return Ok(x.clone());
    }
    let mag = spec.magnitude();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = x.clone();
    match spec.family {
        CorruptionFamily::GaussNoise => {
            for v in out.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += mag * z;
            }
        }
        CorruptionFamily::Scale => {
            for v in out.data_mut() {
                *v *= mag;
            }
        }
        CorruptionFamily::Shift => {
            let mut dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            dir.iter_mut().for_each(|v| *v /= norm);
            for (j, v) in out.data_mut().iter_mut().enumerate() {
                *v += mag * dir[j % d];
            }
        }
        CorruptionFamily::FeatureDropout => {
            for v in out.data_mut() {
                if rng.random::<f64>() < mag {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

/// Corruptions available when training with corrupted meta-validation data.
pub fn training_corruptions() -> Vec<(CorruptionFamily, u8)> {
    let mut out = Vec::new();
    for s in 1..=4 {
        out.push((CorruptionFamily::GaussNoise, s));
        out.push((CorruptionFamily::Scale, s));
    }
    for s in 1..=5 {
        out.push((CorruptionFamily::FeatureDropout, s));
    }
    out
}

/// Held-out test domains, disjoint from [`training_corruptions`].
pub fn test_corruptions() -> Vec<(CorruptionFamily, u8)> {
    let mut out: Vec<_> = (1..=5).map(|s| (CorruptionFamily::Shift, s)).collect();
    out.push((CorruptionFamily::GaussNoise, 5));
    out.push((CorruptionFamily::Scale, 5));
    out
}
