//! Reconstruction quality: PSNR against a fixed dynamic-range peak and
//! aligned PSNR-per-iteration tables.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solvers::SolveTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsnrResult {
    pub mse: f64,
    pub peak: f64,
}

impl PsnrResult {
    /// Identical images have zero error and no finite PSNR.
    pub fn is_infinite(&self) -> bool {
        self.mse == 0.0
    }

    /// Decibels; `f64::INFINITY` when the flag is set.
    pub fn db(&self) -> f64 {
        if self.is_infinite() {
            f64::INFINITY
        } else {
            10.0 * (self.peak * self.peak / self.mse).log10()
        }
    }
}

impl std::fmt::Display for PsnrResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&format_db(self.db()))
    }
}

/// Four decimals, or `inf`.
pub fn format_db(db: f64) -> String {
    if db.is_infinite() && db > 0.0 {
        "inf".to_string()
    } else {
        format!("{db:.4}")
    }
}

pub fn psnr(a: &Array2<f64>, b: &Array2<f64>, peak: f64) -> Result<PsnrResult> {
    if a.dim() != b.dim() {
        return Err(Error::dims("psnr", a.dim(), b.dim()));
    }
    if !(peak > 0.0 && peak.is_finite()) {
        return Err(Error::invalid(format!("psnr peak must be > 0, got {peak}")));
    }
    if a.is_empty() {
        return Err(Error::invalid("psnr of empty images"));
    }
    let sum: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let mse = sum / a.len() as f64;
    if !mse.is_finite() {
        return Err(Error::NonFinite("psnr mean squared error".into()));
    }
    Ok(PsnrResult { mse, peak })
}

/// PSNR per iteration for several solvers, one column each.
///
/// Row `k` holds each trace's PSNR after `k − 1` iterations, so row 1 is the
/// initialization. Rows exist wherever at least one trace recorded a PSNR; a
/// trace without a value at that iteration repeats its latest earlier value
/// (and a finished trace repeats its last).
#[derive(Debug, Clone, PartialEq)]
pub struct QualityTable {
    pub labels: Vec<String>,
    pub rows: Vec<(usize, Vec<f64>)>,
}

impl QualityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iteration");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (k, vals) in &self.rows {
            out.push_str(&k.to_string());
            for v in vals {
                out.push(',');
                out.push_str(&format_db(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn column(&self, label: &str) -> Option<Vec<f64>> {
        let i = self.labels.iter().position(|l| l == label)?;
        Some(self.rows.iter().map(|(_, v)| v[i]).collect())
    }

    pub fn value(&self, label: &str, row: usize) -> Option<f64> {
        let i = self.labels.iter().position(|l| l == label)?;
        self.rows.iter().find(|(k, _)| *k == row).map(|(_, v)| v[i])
    }
}

pub fn quality_curve(traces: &[&SolveTrace], labels: &[&str]) -> Result<QualityTable> {
    if traces.is_empty() {
        return Err(Error::invalid("quality_curve needs at least one trace"));
    }
    if traces.len() != labels.len() {
        return Err(Error::dims("quality_curve labels", traces.len(), labels.len()));
    }
    let points: Vec<Vec<(usize, f64)>> = traces
        .iter()
        .map(|t| t.records.iter().filter_map(|r| r.psnr.map(|p| (r.iteration, p))).collect())
        .collect();
    if let Some(i) = points.iter().position(|p| p.is_empty()) {
        return Err(Error::invalid(format!("trace '{}' has no PSNR values", labels[i])));
    }
    let mut iters: Vec<usize> = points.iter().flatten().map(|(k, _)| *k).collect();
    iters.sort_unstable();
    iters.dedup();
    let rows = iters
        .into_iter()
        .map(|it| {
            let vals = points
                .iter()
                .map(|p| {
                    p.iter()
                        .take_while(|(k, _)| *k <= it)
                        .last()
                        .unwrap_or(&p[0])
                        .1
                })
                .collect();
            (it + 1, vals)
        })
        .collect();
    Ok(QualityTable {
        labels: labels.iter().map(|s| s.to_string()).collect(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solvers::TraceRecord;
    use ndarray::Array2;

    fn trace(psnrs: &[f64]) -> SolveTrace {
        SolveTrace {
            records: psnrs
                .iter()
                .enumerate()
                .map(|(i, p)| TraceRecord {
                    iteration: i,
                    objective: 0.0,
                    psnr: Some(*p),
                    millis: 0.0,
                })
                .collect(),
        }
    }

    #[test]
    fn identical_images_flag_infinite() {
        let a = Array2::from_elem((3, 3), 2.0);
        let r = psnr(&a, &a, 10.0).unwrap();
        assert!(r.is_infinite());
        assert_eq!(r.to_string(), "inf");
    }

    #[test]
    fn unit_difference_at_255() {
        let a = Array2::zeros((4, 4));
        let b = Array2::ones((4, 4));
        let r = psnr(&a, &b, 255.0).unwrap();
        assert!((r.db() - 48.1308).abs() < 1e-4);
        assert!((r.db() - 20.0 * 255f64.log10()).abs() < 1e-12);
    }

    #[test]
    fn half_difference_at_10() {
        let a = Array2::from_elem((5, 7), 3.0);
        let b = Array2::from_elem((5, 7), 3.5);
        let r = psnr(&a, &b, 10.0).unwrap();
        assert!((r.db() - 26.0206).abs() < 1e-4);
    }

    #[test]
    fn psnr_symmetric_and_shift_invariant() {
        let a = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 7 + j * 3) % 10) as f64 * 0.5);
        let b = Array2::from_shape_fn((6, 6), |(i, j)| ((i * 5 + j) % 9) as f64 * 0.5);
        let ab = psnr(&a, &b, 10.0).unwrap().db();
        assert_eq!(ab, psnr(&b, &a, 10.0).unwrap().db());
        let shifted = psnr(&(&a + 0.25), &(&b + 0.25), 10.0).unwrap().db();
        assert!((ab - shifted).abs() < 1e-12);
    }

    #[test]
    fn psnr_errors() {
        let a = Array2::zeros((2, 2));
        assert!(psnr(&a, &Array2::zeros((2, 3)), 1.0).is_err());
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn single_trace_single_row() {
        let t = trace(&[12.5]);
        let tab = quality_curve(&[&t], &["ml"]).unwrap();
        assert_eq!(tab.rows, vec![(1, vec![12.5])]);
    }

    #[test]
    fn unequal_traces_pad_with_last_value() {
        let a = trace(&[10.0, 11.0, 12.0, 12.5]);
        let b = trace(&[10.0, 13.0]);
        let ml = trace(&[9.0]);
        let tab = quality_curve(&[&a, &b, &ml], &["ista", "fista", "ml"]).unwrap();
        assert_eq!(tab.rows.len(), 4);
        assert_eq!(tab.column("ista").unwrap(), vec![10.0, 11.0, 12.0, 12.5]);
        assert_eq!(tab.column("fista").unwrap(), vec![10.0, 13.0, 13.0, 13.0]);
        assert_eq!(tab.column("ml").unwrap(), vec![9.0; 4]);
        assert_eq!(tab.rows[0].0, 1);
        let csv = tab.to_csv();
        assert!(csv.starts_with("iteration,ista,fista,ml\n1,10.0000,10.0000,9.0000\n"));
    }

    #[test]
    fn sparse_checkpoints_align() {
        let mut a = trace(&[1.0, 2.0, 3.0]);
        a.records[1].psnr = None;
        let b = trace(&[5.0, 6.0]);
        let tab = quality_curve(&[&a, &b], &["a", "b"]).unwrap();
        assert_eq!(tab.rows, vec![(1, vec![1.0, 5.0]), (2, vec![1.0, 6.0]), (3, vec![3.0, 6.0])]);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(quality_curve(&[], &[]).is_err());
    }
}
