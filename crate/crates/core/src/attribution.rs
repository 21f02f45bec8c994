//! Edge attribution: gradient-times-difference (EAP), its integrated
//! gradients variant (EAP-IG), and exact per-edge activation patching.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::graph::{edges_to_components, ComponentRanking, EdgeScoreMap};
use crate::model::{ActivationCache, PatchDirective, PatchPlan, ToyModel};
use crate::signal::{tsld_at, CandidateSets, CounterfactualPair};
use crate::tensor::Tensor;

/// Which interpolation points `corrupt + t (clean - corrupt)` are visited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Interpolation {
    /// `t = k/m` for `k = 1..=m`; the last point is the clean input.
    #[default]
    EndInclusive,
    /// `t = k/m` for `k = 0..m`; the first point is the corrupt input.
    StartInclusive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub steps: usize,
    pub sets: CandidateSets,
    pub interpolation: Interpolation,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            sets: CandidateSets::default(),
            interpolation: Interpolation::EndInclusive,
        }
    }
}

impl AttributionConfig {
    pub fn points(&self) -> Result<Vec<usize>> {
        let m = self.steps;
        if m == 0 {
            return Err(CmcError::Config("integration steps must be at least 1".into()));
        }
        Ok(match self.interpolation {
            Interpolation::EndInclusive => (1..=m).collect(),
            Interpolation::StartInclusive => (0..m).collect(),
        })
    }
}

/// Clean and corrupt caches of one pair plus per-node output differences.
#[derive(Debug, Clone)]
pub struct PairActivations {
    pub clean_tokens: Vec<u32>,
    pub corrupt_tokens: Vec<u32>,
    pub pos_end: usize,
    pub clean: ActivationCache,
    pub corrupt: ActivationCache,
    /// `out(clean) - out(corrupt)` for every output-bearing node.
    pub differences: Vec<Tensor>,
}

impl PairActivations {
    pub fn new(model: &ToyModel, pair: &CounterfactualPair) -> Result<Self> {
        Self::from_tokens(model, &pair.clean, &pair.corrupt)
    }

    pub fn from_tokens(model: &ToyModel, clean_tokens: &[u32], corrupt_tokens: &[u32]) -> Result<Self> {
        if clean_tokens.len() != corrupt_tokens.len() || clean_tokens.is_empty() {
            return Err(CmcError::Template("pair sequences must be nonempty and equally long".into()));
        }
        let (_, clean) = model.forward(clean_tokens, None)?;
        let (_, corrupt) = model.forward(corrupt_tokens, None)?;
        let differences = clean
            .outputs()
            .iter()
            .zip(corrupt.outputs())
            .map(|(a, b)| a.sub(b))
            .collect::<Result<_>>()?;
        Ok(Self {
            clean_tokens: clean_tokens.to_vec(),
            corrupt_tokens: corrupt_tokens.to_vec(),
            pos_end: clean_tokens.len() - 1,
            clean,
            corrupt,
            differences,
        })
    }

    /// Output difference at the final position only.
    pub fn difference_at_end(&self, node_index: usize) -> &[f64] {
        self.differences[node_index].row(self.pos_end)
    }
}

/// Gradient of the TSLD loss with respect to every channel input, at a pass
/// whose embedding output is `input_override` (or the clean embedding).
fn channel_gradients(
    model: &ToyModel,
    acts: &PairActivations,
    sets: &CandidateSets,
    input_override: Option<&Tensor>,
) -> Result<Vec<Tensor>> {
    let mut trace = model.trace(&acts.clean_tokens, None, input_override)?;
    let weights = sets.loss_weights(model.config().vocab_size)?;
    let loss = trace.weighted_logit_loss(acts.pos_end, weights)?;
    let grads = trace.record.gradients(loss)?;
    trace.input_ids.iter().map(|id| grads.get(*id)).collect()
}

fn scores_from_gradients(model: &ToyModel, acts: &PairActivations, grads: &[Tensor]) -> Result<EdgeScoreMap> {
    let g = model.graph();
    let mut scores = vec![0.0; g.len()];
    for (ci, grad) in grads.iter().enumerate() {
        for e in g.channel_edges(ci) {
            scores[e] = acts.differences[g.edge_source(e)].dot(grad)?;
        }
    }
    EdgeScoreMap::new(g, scores)
}

/// `(out_a(clean) - out_a(corrupt)) . dL/d input_b` at the clean input, summed
/// over all positions.
pub fn eap_scores(model: &ToyModel, acts: &PairActivations, sets: &CandidateSets) -> Result<EdgeScoreMap> {
    let grads = channel_gradients(model, acts, sets, None)?;
    scores_from_gradients(model, acts, &grads)
}

/// As [`eap_scores`], with the gradient averaged over embedding-space
/// interpolation points between the corrupt and clean inputs.
pub fn eap_ig_scores(model: &ToyModel, acts: &PairActivations, cfg: &AttributionConfig) -> Result<EdgeScoreMap> {
    let m = cfg.steps;
    let clean_in = acts.clean.output_at(0);
    let corrupt_in = acts.corrupt.output_at(0);
    let delta = clean_in.sub(corrupt_in)?;
    let mut total: Option<Vec<Tensor>> = None;
    for k in cfg.points()? {
        let grads = if k == m {
            channel_gradients(model, acts, &cfg.sets, None)?
        } else {
            let t = k as f64 / m as f64;
            let mut x = (**corrupt_in).clone();
            for (xi, di) in x.data_mut().iter_mut().zip(delta.data()) {
                *xi += t * di;
            }
            channel_gradients(model, acts, &cfg.sets, Some(&x))?
        };
        total = Some(match total {
            None => grads,
            Some(mut acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g);
                }
                acc
            }
        });
    }
    let mut grads = total.expect("at least one point");
    for g in grads.iter_mut() {
        for v in g.data_mut() {
            *v /= m as f64;
        }
    }
    scores_from_gradients(model, acts, &grads)
}

fn loss_of(logits: &Tensor, pos: usize, sets: &CandidateSets) -> Result<f64> {
    tsld_at(logits, pos, sets)
}

/// `L(clean) - L(clean with one edge carrying the corrupt source output)`.
pub fn exact_patch_score(model: &ToyModel, acts: &PairActivations, edge: usize, sets: &CandidateSets) -> Result<f64> {
    let g = model.graph();
    let id = *g
        .edges()
        .get(edge)
        .ok_or_else(|| CmcError::Unknown(format!("edge index {edge}")))?;
    let plan = PatchPlan::new().with(PatchDirective::EdgePatch {
        edge: id,
        replacement: Arc::clone(acts.corrupt.output_at(g.edge_source(edge))),
    });
    let (patched, _) = model.forward(&acts.clean_tokens, Some(&plan))?;
    let base = loss_of(acts.clean.logits(), acts.pos_end, sets)?;
    Ok(base - loss_of(&patched, acts.pos_end, sets)?)
}

/// Exact patching for every edge, in parallel.
pub fn exact_patch_scores(model: &ToyModel, acts: &PairActivations, sets: &CandidateSets) -> Result<EdgeScoreMap> {
    let g = model.graph();
    let scores = (0..g.len())
        .into_par_iter()
        .map(|e| exact_patch_score(model, acts, e, sets))
        .collect::<Result<Vec<_>>>()?;
    EdgeScoreMap::new(g, scores)
}

/// Sum with pairwise (tree) reduction in a fixed order.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    match v.len() {
        0 => 0.0,
        1 => v[0],
        n if n <= 8 => v.iter().sum(),
        n => pairwise_sum(&v[..n / 2]) + pairwise_sum(&v[n / 2..]),
    }
}

/// Per-edge mean of a list of score maps.
pub fn mean_scores(model: &ToyModel, maps: &[EdgeScoreMap]) -> Result<EdgeScoreMap> {
    if maps.is_empty() {
        return Err(CmcError::Empty("score maps"));
    }
    let n = model.graph().len();
    let mut column = vec![0.0; maps.len()];
    let mut out = Vec::with_capacity(n);
    for e in 0..n {
        for (c, m) in column.iter_mut().zip(maps) {
            *c = m.values()[e];
        }
        out.push(pairwise_sum(&column) / maps.len() as f64);
    }
    EdgeScoreMap::new(model.graph(), out)
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    pub scores: EdgeScoreMap,
    pub ranking: ComponentRanking,
    pub per_record: Vec<EdgeScoreMap>,
}

/// EAP-IG over each pair (in parallel), averaged per edge, then ranked by component.
pub fn aggregate(model: &ToyModel, pairs: &[CounterfactualPair], cfg: &AttributionConfig) -> Result<Aggregate> {
    if pairs.is_empty() {
        return Err(CmcError::Empty("bucket-1 records"));
    }
    let per_record = pairs
        .par_iter()
        .map(|p| {
            let acts = PairActivations::new(model, p)?;
            eap_ig_scores(model, &acts, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let scores = mean_scores(model, &per_record)?;
    let ranking = edges_to_components(model.graph(), &scores);
    Ok(Aggregate {
        scores,
        ranking,
        per_record,
    })
}

/// Fractional ranks, ties sharing their average rank.
pub fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    crate::signal::pearson(&average_ranks(x), &average_ranks(y))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 5.0]), vec![2.5, 4.0, 2.5, 1.0]);
    }

    #[test]
    fn spearman_of_monotone_map_is_one() {
        let x = [0.1, 0.5, -2.0, 3.0, 0.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 1.0).collect();
        assert!((spearman(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pairwise_sum_matches_naive_on_integers() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 499500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn zero_steps_rejected() {
        let cfg = AttributionConfig {
            steps: 0,
            ..AttributionConfig::default()
        };
        assert!(cfg.points().is_err());
    }
}
