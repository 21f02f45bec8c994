//! Expected calibration error, Brier score and reliability bins.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub confidence: f64,
    pub correct: bool,
}

impl PredictionRecord {
    pub fn new(confidence: f64, correct: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&confidence) {
            return Err(CmcError::Config(format!("confidence {confidence} outside [0, 1]")));
        }
        Ok(Self { confidence, correct })
    }

    /// A verbalised integer `0..=99` mapped to `c / 100`.
    pub fn from_verbalized(c: u8, correct: bool) -> Result<Self> {
        if c > 99 {
            return Err(CmcError::Config(format!("verbalised confidence {c} outside 0..=99")));
        }
        Self::new(c as f64 / 100.0, correct)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub index: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub brier: f64,
    pub bins: Vec<BinStats>,
    pub n: usize,
}

/// Bin of `c` among `b` equal-width half-open bins; 1.0 goes to the top bin.
pub fn bin_index(c: f64, b: usize) -> usize {
    let mut i = ((c * b as f64).floor() as usize).min(b - 1);
    // guard against products that round just below an edge
    if i + 1 < b && c >= (i + 1) as f64 / b as f64 {
        i += 1;
    }
    if i > 0 && c < i as f64 / b as f64 {
        i -= 1;
    }
    i
}

pub fn reliability_bins(records: &[PredictionRecord], b: usize) -> Result<Vec<BinStats>> {
    if records.is_empty() {
        return Err(CmcError::Empty("prediction records"));
    }
    if b == 0 {
        return Err(CmcError::Config("at least one bin is required".into()));
    }
    let mut count = vec![0usize; b];
    let mut conf = vec![0.0; b];
    let mut hits = vec![0usize; b];
    for r in records {
        let i = bin_index(r.confidence, b);
        count[i] += 1;
        conf[i] += r.confidence;
        hits[i] += r.correct as usize;
    }
    Ok((0..b)
        .map(|i| {
            let n = count[i];
            let (mc, acc) = if n == 0 {
                (0.0, 0.0)
            } else {
                (conf[i] / n as f64, hits[i] as f64 / n as f64)
            };
            BinStats {
                index: i,
                lo: i as f64 / b as f64,
                hi: (i + 1) as f64 / b as f64,
                count: n,
                mean_confidence: mc,
                accuracy: acc,
            }
        })
        .collect())
}

fn ece_from_bins(bins: &[BinStats], n: usize) -> f64 {
    bins.iter()
        .filter(|s| s.count > 0)
        .map(|s| s.count as f64 / n as f64 * (s.accuracy - s.mean_confidence).abs())
        .sum()
}

pub fn ece(records: &[PredictionRecord], b: usize) -> Result<f64> {
    Ok(ece_from_bins(&reliability_bins(records, b)?, records.len()))
}

pub fn brier(records: &[PredictionRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(CmcError::Empty("prediction records"));
    }
    let s: f64 = records
        .iter()
        .map(|r| {
            let y = if r.correct { 1.0 } else { 0.0 };
            (r.confidence - y).powi(2)
        })
        .sum();
    Ok(s / records.len() as f64)
}

pub fn report(records: &[PredictionRecord], b: usize) -> Result<CalibrationReport> {
    let bins = reliability_bins(records, b)?;
    Ok(CalibrationReport {
        ece: ece_from_bins(&bins, records.len()),
        brier: brier(records)?,
        bins,
        n: records.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Improvement {
    /// `None` when the baseline is zero.
    pub ece_pct: Option<f64>,
    pub brier_pct: Option<f64>,
}

pub fn improvement_pct(base: f64, after: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * (base - after) / base)
}

pub fn improvement(base: &CalibrationReport, after: &CalibrationReport) -> Improvement {
    Improvement {
        ece_pct: improvement_pct(base.ece, after.ece),
        brier_pct: improvement_pct(base.brier, after.brier),
    }
}

pub fn write_reliability_csv<W: Write>(bins: &[BinStats], mut w: W) -> Result<()> {
    writeln!(w, "bin_lo,bin_hi,count,mean_conf,accuracy")?;
    for s in bins {
        writeln!(w, "{},{},{},{},{}", s.lo, s.hi, s.count, s.mean_confidence, s.accuracy)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(v: &[(f64, bool)]) -> Vec<PredictionRecord> {
        v.iter().map(|&(c, y)| PredictionRecord::new(c, y).unwrap()).collect()
    }

    #[test]
    fn hand_fixture() {
        let r = recs(&[(0.9, true), (0.9, false), (0.1, false), (0.1, false)]);
        assert!((ece(&r, 10).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn perfect_top_bin() {
        let r = recs(&[(1.0, true); 5]);
        assert_eq!(ece(&r, 10).unwrap(), 0.0);
        assert_eq!(bin_index(1.0, 10), 9);
    }

    #[test]
    fn bin_edges_are_half_open() {
        for k in 0..100u8 {
            let c = k as f64 / 100.0;
            assert_eq!(bin_index(c, 10), k as usize / 10, "{c}");
        }
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.7, 10), 7);
    }

    #[test]
    fn brier_fixtures() {
        assert!((brier(&recs(&[(0.8, true)])).unwrap() - 0.04).abs() < 1e-12);
        assert_eq!(brier(&recs(&[(1.0, true), (0.0, false)])).unwrap(), 0.0);
    }

    #[test]
    fn single_bin_is_global_gap() {
        let r = recs(&[(0.2, true), (0.6, false), (0.9, true)]);
        let e = ece(&r, 1).unwrap();
        let acc = 2.0 / 3.0;
        let mc: f64 = (0.2 + 0.6 + 0.9) / 3.0;
        assert!((e - (acc - mc).abs()).abs() < 1e-12);
        assert_eq!(reliability_bins(&r, 1).unwrap().len(), 1);
    }

    #[test]
    fn improvement_fixtures() {
        let p = improvement_pct(0.492, 0.111).unwrap();
        assert_eq!(format!("{p:.1}"), "77.4");
        assert_eq!(improvement_pct(0.3, 0.3), Some(0.0));
        assert_eq!(format!("{:.1}", improvement_pct(0.265, 0.269).unwrap()), "-1.5");
        assert_eq!(improvement_pct(0.0, 0.1), None);
    }

    #[test]
    fn empty_input_is_an_error() {
        assert!(ece(&[], 10).is_err());
        assert!(brier(&[]).is_err());
        assert!(PredictionRecord::from_verbalized(120, true).is_err());
    }
}
