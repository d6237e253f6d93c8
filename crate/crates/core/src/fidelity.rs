//! Agreement between DECE, SB-ECE and the hard-binned ECE over many
//! prediction batches.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dece::{dece_value, sb_ece_value, DeceConfig};
use crate::error::{Error, Result};
use crate::metrics::{ece, PredictionBatch};
use crate::stats::{mean, pearson, spearman};
use crate::tensor::Tensor;

pub const COMPARE_CSV_HEADER: &str = "checkpoint,batch,ece,dece,sbece";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub checkpoint: String,
    pub batch: usize,
    pub ece: f64,
    pub dece: f64,
    pub sbece: f64,
}

/// All three estimators on one batch, using `cfg.bins` for each.
pub fn metric_row(
    checkpoint: &str,
    batch: usize,
    logits: &Tensor,
    labels: &[usize],
    cfg: &DeceConfig,
) -> Result<MetricRow> {
    let preds = PredictionBatch::from_logits(logits, labels.to_vec())?;
    Ok(MetricRow {
        checkpoint: checkpoint.to_string(),
        batch,
        ece: ece(&preds, cfg.bins)?,
        dece: dece_value(logits, labels, cfg)?,
        sbece: sb_ece_value(logits, labels, cfg)?,
    })
}

pub fn rows_to_csv(rows: &[MetricRow]) -> Result<String> {
    let mut out = String::from(COMPARE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        if r.checkpoint.contains([',', '\n', '\r']) {
            return Err(Error::invalid(format!(
                "checkpoint name `{}` is not CSV-safe",
                r.checkpoint
            )));
        }
        let _ = writeln!(
            out,
            "{},{},{:?},{:?},{:?}",
            r.checkpoint, r.batch, r.ece, r.dece, r.sbece
        );
    }
    Ok(out)
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == COMPARE_CSV_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header `{COMPARE_CSV_HEADER}`"),
            })
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad {what} `{s}`"),
            })?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse {
                    line: line_no,
                    msg: format!("{what} is not finite"),
                })
            }
        };
        rows.push(MetricRow {
            checkpoint: fields[0].to_string(),
            batch: fields[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad batch index `{}`", fields[1]),
            })?,
            ece: num(fields[2], "ece")?,
            dece: num(fields[3], "dece")?,
            sbece: num(fields[4], "sbece")?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelitySummary {
    pub count: usize,
    pub mean_ece: f64,
    pub mean_dece: f64,
    pub mean_sbece: f64,
    pub pearson_dece: f64,
    pub spearman_dece: f64,
    pub pearson_sbece: f64,
    pub spearman_sbece: f64,
}

pub fn summarize(rows: &[MetricRow]) -> Result<FidelitySummary> {
    let e: Vec<f64> = rows.iter().map(|r| r.ece).collect();
    let d: Vec<f64> = rows.iter().map(|r| r.dece).collect();
    let s: Vec<f64> = rows.iter().map(|r| r.sbece).collect();
    Ok(FidelitySummary {
        count: rows.len(),
        mean_ece: mean(&e)?,
        mean_dece: mean(&d)?,
        mean_sbece: mean(&s)?,
        pearson_dece: pearson(&d, &e)?,
        spearman_dece: spearman(&d, &e)?,
        pearson_sbece: pearson(&s, &e)?,
        spearman_sbece: spearman(&s, &e)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checks::random_prediction_batch;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(n: usize) -> Vec<MetricRow> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (0..n)
            .map(|i| {
                let (z, y) = random_prediction_batch(&mut rng, 64, 5).unwrap();
                metric_row("random", i, &z, &y, &DeceConfig::default()).unwrap()
            })
            .collect()
    }

    #[test]
    fn csv_round_trip() {
        let rows = rows(5);
        let text = rows_to_csv(&rows).unwrap();
        assert_eq!(rows_from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let text = format!("{COMPARE_CSV_HEADER}\nck,0,0.1,0.1,0.1\nck,1,0.1,oops,0.1\n");
        match rows_from_csv(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(rows_from_csv("wrong,header\n").is_err());
        assert!(rows_from_csv(&format!("{COMPARE_CSV_HEADER}\nck,0,0.1\n")).is_err());
        assert!(rows_from_csv(&format!("{COMPARE_CSV_HEADER}\nck,0,NaN,0.1,0.1\n")).is_err());
        let bad = MetricRow {
            checkpoint: "a,b".into(),
            ..rows(1).remove(0)
        };
        assert!(rows_to_csv(&[bad]).is_err());
    }

    #[test]
    fn dece_tracks_ece() {
        let s = summarize(&rows(60)).unwrap();
        assert_eq!(s.count, 60);
        assert!(s.pearson_dece > 0.9, "{s:?}");
    }
}
