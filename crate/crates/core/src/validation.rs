//! Circuit faithfulness and completeness, and component resample ablation.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{pairwise_sum, PairActivations};
use crate::error::{CmcError, Result};
use crate::graph::{rank_edges, CircuitSpec, EdgeScoreMap, NodeId};
use crate::model::{PatchDirective, PatchPlan, ToyModel};
use crate::signal::{tsld_at, CandidateSets};

fn mean(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(CmcError::Empty("records"));
    }
    Ok(pairwise_sum(v) / v.len() as f64)
}

/// TSLD of the clean prompt with every edge in `corrupted` carrying the
/// corrupt-pass source output at all positions.
pub fn patched_tsld(model: &ToyModel, acts: &PairActivations, corrupted: &CircuitSpec, sets: &CandidateSets) -> Result<f64> {
    let g = model.graph();
    if corrupted.mask().len() != g.len() {
        return Err(CmcError::Unknown("circuit built for a different graph".into()));
    }
    let mut plan = PatchPlan::new();
    for e in corrupted.indices() {
        plan.push(PatchDirective::EdgePatch {
            edge: g.edges()[e],
            replacement: Arc::clone(acts.corrupt.output_at(g.edge_source(e))),
        });
    }
    let (logits, _) = model.forward(&acts.clean_tokens, Some(&plan))?;
    tsld_at(&logits, acts.pos_end, sets)
}

/// Circuit edges clean, all others corrupt.
pub fn circuit_only_tsld(model: &ToyModel, acts: &PairActivations, circuit: &CircuitSpec, sets: &CandidateSets) -> Result<f64> {
    patched_tsld(model, acts, &circuit.complement(), sets)
}

/// Circuit edges corrupt, all others clean.
pub fn ablated_tsld(model: &ToyModel, acts: &PairActivations, circuit: &CircuitSpec, sets: &CandidateSets) -> Result<f64> {
    patched_tsld(model, acts, circuit, sets)
}

pub fn clean_tsld(acts: &PairActivations, sets: &CandidateSets) -> Result<f64> {
    tsld_at(acts.clean.logits(), acts.pos_end, sets)
}

pub fn corrupt_tsld(acts: &PairActivations, sets: &CandidateSets) -> Result<f64> {
    tsld_at(acts.corrupt.logits(), acts.pos_end, sets)
}

/// `(circuit_only - corrupt) / (clean - corrupt) * 100`.
pub fn faithfulness_from_means(clean: f64, corrupt: f64, circuit_only: f64) -> Result<f64> {
    let denom = clean - corrupt;
    if denom.abs() <= 1e-9 {
        return Err(CmcError::Degenerate(format!("clean and corrupt means coincide ({clean} vs {corrupt})")));
    }
    Ok((circuit_only - corrupt) / denom * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Completeness {
    pub baseline: f64,
    pub ablated: f64,
    pub drop: f64,
    pub percentage: f64,
}

pub fn completeness_from_means(baseline: f64, ablated: f64) -> Result<Completeness> {
    if baseline == 0.0 {
        return Err(CmcError::Degenerate("baseline TSLD is zero".into()));
    }
    let drop = baseline - ablated;
    Ok(Completeness {
        baseline,
        ablated,
        drop,
        percentage: drop / baseline * 100.0,
    })
}

/// Clean, corrupt and per-record means reused across circuits.
#[derive(Debug, Clone)]
pub struct PairSet<'a> {
    pub model: &'a ToyModel,
    pub pairs: &'a [PairActivations],
    pub sets: &'a CandidateSets,
    pub mean_clean: f64,
    pub mean_corrupt: f64,
}

impl<'a> PairSet<'a> {
    pub fn new(model: &'a ToyModel, pairs: &'a [PairActivations], sets: &'a CandidateSets) -> Result<Self> {
        let clean = pairs.iter().map(|p| clean_tsld(p, sets)).collect::<Result<Vec<_>>>()?;
        let corrupt = pairs.iter().map(|p| corrupt_tsld(p, sets)).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            model,
            pairs,
            sets,
            mean_clean: mean(&clean)?,
            mean_corrupt: mean(&corrupt)?,
        })
    }

    fn mean_patched(&self, corrupted: &CircuitSpec) -> Result<f64> {
        let v = self
            .pairs
            .par_iter()
            .map(|p| patched_tsld(self.model, p, corrupted, self.sets))
            .collect::<Result<Vec<_>>>()?;
        mean(&v)
    }

    pub fn mean_circuit_only(&self, circuit: &CircuitSpec) -> Result<f64> {
        self.mean_patched(&circuit.complement())
    }

    pub fn faithfulness(&self, circuit: &CircuitSpec) -> Result<f64> {
        faithfulness_from_means(self.mean_clean, self.mean_corrupt, self.mean_circuit_only(circuit)?)
    }

    pub fn completeness(&self, circuit: &CircuitSpec) -> Result<Completeness> {
        completeness_from_means(self.mean_clean, self.mean_patched(circuit)?)
    }

    /// Mean TSLD after jointly resampling `components` at the final position.
    pub fn mean_resampled(&self, components: &[NodeId]) -> Result<f64> {
        let v = self
            .pairs
            .par_iter()
            .map(|p| resampled_tsld(self.model, p, components, self.sets))
            .collect::<Result<Vec<_>>>()?;
        mean(&v)
    }

    /// Mean TSLD after ablating the top 0, 1, ..., `up_to` components jointly.
    pub fn incremental_ablation(&self, ranked: &[NodeId], up_to: usize) -> Result<Vec<f64>> {
        if up_to > ranked.len() {
            return Err(CmcError::Config(format!("up_to {up_to} exceeds {} ranked components", ranked.len())));
        }
        let mut out = vec![self.mean_clean];
        for k in 1..=up_to {
            out.push(self.mean_resampled(&ranked[..k])?);
        }
        Ok(out)
    }

    /// Mean single-component resample effect for each component.
    pub fn single_ablations(&self, components: &[NodeId]) -> Result<Vec<f64>> {
        components
            .iter()
            .map(|c| Ok(self.mean_resampled(std::slice::from_ref(c))? - self.mean_clean))
            .collect()
    }
}

fn resampled_tsld(model: &ToyModel, acts: &PairActivations, components: &[NodeId], sets: &CandidateSets) -> Result<f64> {
    let mut plan = PatchPlan::new();
    for &c in components {
        if !c.is_component() {
            return Err(CmcError::Unknown(format!("{c} is not a component")));
        }
        plan.push(PatchDirective::Overwrite {
            node: c,
            position: acts.pos_end,
            values: acts.corrupt.output(c)?.row(acts.pos_end).to_vec(),
        });
    }
    let (logits, _) = model.forward(&acts.clean_tokens, Some(&plan))?;
    tsld_at(&logits, acts.pos_end, sets)
}

/// `TSLD(clean with the component's final-position output taken from the
/// corrupt pass) - TSLD(clean)`.
pub fn resample_ablate_component(model: &ToyModel, acts: &PairActivations, component: NodeId, sets: &CandidateSets) -> Result<f64> {
    model.graph().node_index(component)?;
    Ok(resampled_tsld(model, acts, &[component], sets)? - clean_tsld(acts, sets)?)
}

/// About `points` geometrically spaced sizes from 1 to `n`, deduplicated.
pub fn geometric_grid(n: usize, points: usize) -> Vec<usize> {
    if n == 0 {
        return vec![];
    }
    let points = points.max(2);
    let mut out: Vec<usize> = (0..points)
        .map(|i| {
            let t = i as f64 / (points - 1) as f64;
            ((n as f64).powf(t).round() as usize).clamp(1, n)
        })
        .collect();
    out.dedup();
    if out.last() != Some(&n) {
        out.push(n);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub k: usize,
    pub faithfulness_pct: f64,
}

/// Faithfulness of the top-`k` circuit for each `k` in `grid`.
pub fn faithfulness_curve(set: &PairSet, scores: &EdgeScoreMap, grid: &[usize]) -> Result<Vec<CurvePoint>> {
    let g = set.model.graph();
    let order = rank_edges(scores);
    grid.iter()
        .map(|&k| {
            if k > g.len() {
                return Err(CmcError::Config(format!("k = {k} exceeds {} edges", g.len())));
            }
            let circuit = CircuitSpec::from_indices(g, order[..k].iter().copied())?;
            Ok(CurvePoint {
                k,
                faithfulness_pct: set.faithfulness(&circuit)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentEffect {
    pub component: String,
    pub delta_tsld: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub records: usize,
    pub mean_clean_tsld: f64,
    pub mean_corrupt_tsld: f64,
    pub circuit_edges: usize,
    pub total_edges: usize,
    pub circuit_faithfulness_pct: f64,
    pub faithfulness: Vec<CurvePoint>,
    pub completeness: Completeness,
    pub single_ablation: Vec<ComponentEffect>,
    pub incremental_components: Vec<String>,
    pub incremental_tsld: Vec<f64>,
}

pub struct ValidationOptions {
    pub circuit_edges: usize,
    pub grid_points: usize,
    pub incremental: usize,
}

pub fn validate(set: &PairSet, scores: &EdgeScoreMap, ranked: &[NodeId], opts: &ValidationOptions) -> Result<ValidationReport> {
    let g = set.model.graph();
    let circuit = crate::graph::top_k_edges(g, scores, opts.circuit_edges)?;
    let grid = geometric_grid(g.len(), opts.grid_points);
    let faithfulness = faithfulness_curve(set, scores, &grid)?;
    let components: Vec<NodeId> = g.components().collect();
    let singles = set.single_ablations(&components)?;
    let up_to = opts.incremental.min(ranked.len());
    Ok(ValidationReport {
        records: set.pairs.len(),
        mean_clean_tsld: set.mean_clean,
        mean_corrupt_tsld: set.mean_corrupt,
        circuit_edges: circuit.len(),
        total_edges: g.len(),
        circuit_faithfulness_pct: set.faithfulness(&circuit)?,
        faithfulness,
        completeness: set.completeness(&circuit)?,
        single_ablation: components
            .iter()
            .zip(singles)
            .map(|(c, d)| ComponentEffect {
                component: c.label(),
                delta_tsld: d,
            })
            .collect(),
        incremental_components: ranked[..up_to].iter().map(|c| c.label()).collect(),
        incremental_tsld: set.incremental_ablation(ranked, up_to)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_fixtures() {
        assert!((faithfulness_from_means(10.0, 2.0, 8.8).unwrap() - 85.0).abs() < 1e-9);
        let c = completeness_from_means(10.05, 2.13).unwrap();
        assert_eq!(format!("{:.2} {:.1}", c.drop, c.percentage), "7.92 78.8");
        let c = completeness_from_means(4.79, 1.23).unwrap();
        assert_eq!(format!("{:.2} {:.1}", c.drop, c.percentage), "3.56 74.3");
        assert!(faithfulness_from_means(1.0, 1.0, 1.0).is_err());
        assert!(completeness_from_means(0.0, 1.0).is_err());
    }

    #[test]
    fn grid_endpoints() {
        let g = geometric_grid(479, 20);
        assert_eq!(g[0], 1);
        assert_eq!(*g.last().unwrap(), 479);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(geometric_grid(1, 20), vec![1]);
    }
}
