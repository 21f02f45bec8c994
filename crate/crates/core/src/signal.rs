//! Target-set logit difference, truth-injection pairs and stratification.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::model::{decode_confidence, ToyModel};
use crate::task::{ElicitationRecord, PromptTemplate};
use crate::tensor::Tensor;

/// High- and low-confidence candidate tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateSets {
    high: Vec<u32>,
    low: Vec<u32>,
}

impl Default for CandidateSets {
    fn default() -> Self {
        Self {
            high: vec![70, 75, 80, 85, 90, 99],
            low: vec![0, 10, 15, 20, 25, 30],
        }
    }
}

impl CandidateSets {
    pub fn new(mut high: Vec<u32>, mut low: Vec<u32>) -> Result<Self> {
        high.sort_unstable();
        high.dedup();
        low.sort_unstable();
        low.dedup();
        if high.is_empty() || low.is_empty() {
            return Err(CmcError::Candidates("both sets must be nonempty".into()));
        }
        if let Some(t) = high.iter().find(|t| low.binary_search(t).is_ok()) {
            return Err(CmcError::Candidates(format!("token {t} is in both sets")));
        }
        Ok(Self { high, low })
    }

    pub fn high(&self) -> &[u32] {
        &self.high
    }

    pub fn low(&self) -> &[u32] {
        &self.low
    }

    /// Weights `w` with `tsld(row) == w . row`.
    pub fn loss_weights(&self, vocab: usize) -> Result<Arc<Vec<f64>>> {
        let mut w = vec![0.0; vocab];
        for (set, v) in [(&self.high, 1.0 / self.high.len() as f64), (&self.low, -1.0 / self.low.len() as f64)] {
            for &t in set {
                *w.get_mut(t as usize)
                    .ok_or_else(|| CmcError::Candidates(format!("token {t} outside vocabulary of {vocab}")))? = v;
            }
        }
        Ok(Arc::new(w))
    }
}

/// Mean high-set logit minus mean low-set logit.
pub fn tsld(row: &[f64], sets: &CandidateSets) -> Result<f64> {
    let mean = |set: &[u32]| -> Result<f64> {
        if set.is_empty() {
            return Err(CmcError::Candidates("empty candidate set".into()));
        }
        let mut s = 0.0;
        for &t in set {
            s += row
                .get(t as usize)
                .ok_or_else(|| CmcError::Candidates(format!("token {t} outside logits of length {}", row.len())))?;
        }
        Ok(s / set.len() as f64)
    };
    Ok(mean(&sets.high)? - mean(&sets.low)?)
}

pub fn tsld_at(logits: &Tensor, pos: usize, sets: &CandidateSets) -> Result<f64> {
    tsld(logits.row(pos), sets)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bucket {
    /// Truth injection lowers confidence: the discovery subset.
    Overconfident = 1,
    Raised = 2,
    Neutral = 3,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualPair {
    pub clean: Vec<u32>,
    pub corrupt: Vec<u32>,
    pub pos_end: usize,
    pub tsld_clean: f64,
    pub tsld_corrupt: f64,
    pub delta_tsld: f64,
    pub confidence_clean: u8,
    pub confidence_corrupt: u8,
    pub bucket: Option<Bucket>,
}

impl CounterfactualPair {
    /// Evaluate both sequences. They must differ only in content, not length.
    pub fn evaluate(model: &ToyModel, clean: Vec<u32>, corrupt: Vec<u32>, sets: &CandidateSets) -> Result<Self> {
        if clean.len() != corrupt.len() {
            return Err(CmcError::Template(format!(
                "clean and corrupt lengths differ ({} vs {})",
                clean.len(),
                corrupt.len()
            )));
        }
        let pos_end = clean.len().checked_sub(1).ok_or(CmcError::Empty("prompt"))?;
        let (lc, _) = model.forward(&clean, None)?;
        let (lx, _) = model.forward(&corrupt, None)?;
        let tsld_clean = tsld_at(&lc, pos_end, sets)?;
        let tsld_corrupt = tsld_at(&lx, pos_end, sets)?;
        Ok(Self {
            pos_end,
            tsld_clean,
            tsld_corrupt,
            delta_tsld: tsld_corrupt - tsld_clean,
            confidence_clean: decode_confidence(&lc, pos_end),
            confidence_corrupt: decode_confidence(&lx, pos_end),
            clean,
            corrupt,
            bucket: None,
        })
    }

    pub fn delta_confidence(&self) -> f64 {
        self.confidence_corrupt as f64 - self.confidence_clean as f64
    }
}

/// Clean prompt carries the model's answer; the corrupt prompt substitutes
/// the gold answer in the answer slot and leaves everything else unchanged.
pub fn build_pair(
    model: &ToyModel,
    record: &ElicitationRecord,
    template: &PromptTemplate,
    sets: &CandidateSets,
) -> Result<CounterfactualPair> {
    let (answer, gold) = record.single_answer()?;
    let clean = template.render(&record.question, answer, answer)?;
    let corrupt = template.render(&record.question, gold, answer)?;
    CounterfactualPair::evaluate(model, clean, corrupt, sets)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Strata {
    pub overconfident: Vec<usize>,
    pub raised: Vec<usize>,
    pub neutral: Vec<usize>,
}

pub fn classify(delta: f64, tau: f64) -> Bucket {
    if delta <= -tau {
        Bucket::Overconfident
    } else if delta >= tau {
        Bucket::Raised
    } else {
        Bucket::Neutral
    }
}

/// Assign every pair a bucket and return the index sets.
pub fn stratify(pairs: &mut [CounterfactualPair], tau: f64) -> Result<Strata> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CmcError::Config(format!("tau must be positive, got {tau}")));
    }
    let mut s = Strata::default();
    for (i, p) in pairs.iter_mut().enumerate() {
        let b = classify(p.delta_tsld, tau);
        p.bucket = Some(b);
        match b {
            Bucket::Overconfident => s.overconfident.push(i),
            Bucket::Raised => s.raised.push(i),
            Bucket::Neutral => s.neutral.push(i),
        }
    }
    Ok(s)
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(CmcError::Shape {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(CmcError::Degenerate("correlation needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CmcError::Degenerate("zero variance".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Fraction of index pairs whose signs agree (zero counts as its own sign).
pub fn sign_agreement(x: &[f64], y: &[f64]) -> f64 {
    if x.is_empty() {
        return 1.0;
    }
    let sign = |v: f64| if v > 0.0 { 1 } else if v < 0.0 { -1 } else { 0 };
    let agree = x.iter().zip(y).filter(|(a, b)| sign(**a) == sign(**b)).count();
    agree as f64 / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_zero() {
        assert_eq!(tsld(&[0.3; 128], &CandidateSets::default()).unwrap(), 0.0);
    }

    #[test]
    fn direct_means() {
        let s = CandidateSets::default();
        let mut row = vec![7.0; 128];
        for &t in s.high() {
            row[t as usize] = 2.0;
        }
        for &t in s.low() {
            row[t as usize] = -1.0;
        }
        assert_eq!(tsld(&row, &s).unwrap(), 3.0);
    }

    #[test]
    fn shift_invariance() {
        let s = CandidateSets::default();
        let row: Vec<f64> = (0..128).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = row.iter().map(|v| v + 11.5).collect();
        assert!((tsld(&row, &s).unwrap() - tsld(&shifted, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_weights_match_tsld() {
        let s = CandidateSets::default();
        let row: Vec<f64> = (0..128).map(|i| (i as f64).cos()).collect();
        let w = s.loss_weights(128).unwrap();
        let dot: f64 = w.iter().zip(&row).map(|(a, b)| a * b).sum();
        assert!((dot - tsld(&row, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn overlapping_or_empty_sets_fail() {
        assert!(CandidateSets::new(vec![1, 2], vec![2]).is_err());
        assert!(CandidateSets::new(vec![], vec![2]).is_err());
    }

    #[test]
    fn bucket_thresholds() {
        assert_eq!(classify(-5.0, 1.0), Bucket::Overconfident);
        assert_eq!(classify(5.0, 1.0), Bucket::Raised);
        assert_eq!(classify(0.5, 1.0), Bucket::Neutral);
        assert_eq!(classify(-1.0, 1.0), Bucket::Overconfident);
    }

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y2: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let yn: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &y2).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&x, &yn).unwrap() + 1.0).abs() < 1e-12);
        assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
        assert!(matches!(pearson(&x, &[1.0; 4]), Err(CmcError::Degenerate(_))));
    }
}
