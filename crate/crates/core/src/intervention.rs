//! Inference-time recalibration: reference-mean ablation and steering.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{pairwise_sum, PairActivations};
use crate::calibration::{improvement, report, CalibrationReport, PredictionRecord};
use crate::error::{CmcError, Result};
use crate::graph::NodeId;
use crate::model::{decode_confidence, PatchDirective, PatchPlan, ToyModel};
use crate::task::{ElicitationRecord, PromptTemplate};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceMean {
    pub component: NodeId,
    pub mean: Vec<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub component: NodeId,
    pub vector: Vec<f64>,
    pub n: usize,
}

fn mean_rows(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut col = vec![0.0; rows.len()];
    (0..d)
        .map(|j| {
            for (c, r) in col.iter_mut().zip(rows) {
                *c = r[j];
            }
            pairwise_sum(&col) / rows.len() as f64
        })
        .collect()
}

/// Mean corrupt-pass output of `component` at the final position.
pub fn compute_reference_mean(pairs: &[PairActivations], component: NodeId) -> Result<ReferenceMean> {
    if pairs.is_empty() {
        return Err(CmcError::Empty("reference records"));
    }
    let rows = pairs
        .iter()
        .map(|p| Ok(p.corrupt.output(component)?.row(p.pos_end).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(ReferenceMean {
        component,
        mean: mean_rows(&rows),
        n: pairs.len(),
    })
}

/// Mean of clean minus corrupt output of `component` at the final position.
pub fn compute_steering_vector(pairs: &[PairActivations], component: NodeId) -> Result<SteeringVector> {
    if pairs.is_empty() {
        return Err(CmcError::Empty("reference records"));
    }
    let rows = pairs
        .iter()
        .map(|p| {
            let i = p.clean.graph().node_index(component)?;
            Ok(p.differences[i].row(p.pos_end).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SteeringVector {
        component,
        vector: mean_rows(&rows),
        n: pairs.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterventionMode {
    MeanAblation,
    Steering,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionTarget {
    pub component: String,
    pub vector: Vec<f64>,
    pub n: usize,
}

/// Serialisable plan: targets carry `mu_ref` (mean ablation) or `v_conf` (steering).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub mode: InterventionMode,
    pub targets: Vec<InterventionTarget>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub alpha: Option<f64>,
}

impl InterventionPlan {
    pub fn mean_ablation(refs: &[ReferenceMean]) -> Self {
        Self {
            mode: InterventionMode::MeanAblation,
            targets: refs
                .iter()
                .map(|r| InterventionTarget {
                    component: r.component.label(),
                    vector: r.mean.clone(),
                    n: r.n,
                })
                .collect(),
            alpha: None,
        }
    }

    pub fn steering(vectors: &[SteeringVector], alpha: f64) -> Result<Self> {
        check_alpha(alpha)?;
        Ok(Self {
            mode: InterventionMode::Steering,
            targets: vectors
                .iter()
                .map(|v| InterventionTarget {
                    component: v.component.label(),
                    vector: v.vector.clone(),
                    n: v.n,
                })
                .collect(),
            alpha: Some(alpha),
        })
    }

    pub fn with_alpha(&self, alpha: f64) -> Result<Self> {
        if self.mode != InterventionMode::Steering {
            return Err(CmcError::Intervention("alpha applies to steering plans only".into()));
        }
        check_alpha(alpha)?;
        Ok(Self {
            alpha: Some(alpha),
            ..self.clone()
        })
    }

    pub fn validate(&self, model: &ToyModel) -> Result<()> {
        match (self.mode, self.alpha) {
            (InterventionMode::Steering, Some(a)) => check_alpha(a)?,
            (InterventionMode::MeanAblation, None) => {}
            _ => return Err(CmcError::Intervention("alpha must be present exactly for steering".into())),
        }
        let d = model.config().d_model;
        for t in &self.targets {
            let node = NodeId::parse(&t.component)?;
            model.graph().node_index(node)?;
            if !node.is_component() {
                return Err(CmcError::Intervention(format!("{node} is not a component")));
            }
            if t.vector.len() != d {
                return Err(CmcError::Intervention(format!(
                    "{} vector has {} entries, model width is {d}",
                    t.component,
                    t.vector.len()
                )));
            }
        }
        Ok(())
    }

    /// Directives acting on every target's output at `pos`.
    pub fn patch_plan(&self, model: &ToyModel, pos: usize) -> Result<PatchPlan> {
        self.validate(model)?;
        let mut plan = PatchPlan::new();
        for t in &self.targets {
            let node = NodeId::parse(&t.component)?;
            plan.push(match self.mode {
                InterventionMode::MeanAblation => PatchDirective::Overwrite {
                    node,
                    position: pos,
                    values: t.vector.clone(),
                },
                InterventionMode::Steering => {
                    let a = self.alpha.expect("validated");
                    PatchDirective::Offset {
                        node,
                        position: pos,
                        delta: t.vector.iter().map(|v| -a * v).collect(),
                    }
                }
            });
        }
        Ok(plan)
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(CmcError::Intervention(format!("alpha {alpha} outside [0, 1]")));
    }
    Ok(())
}

/// Logits of `tokens` with the plan applied at the final position.
pub fn apply_intervention(model: &ToyModel, tokens: &[u32], plan: &InterventionPlan) -> Result<Tensor> {
    let pos = tokens.len().checked_sub(1).ok_or(CmcError::Empty("tokens"))?;
    let patch = plan.patch_plan(model, pos)?;
    Ok(model.forward(tokens, Some(&patch))?.0)
}

/// Confidence pass of each record: the prompt with the model's own answer.
pub fn confidence_prompts(records: &[ElicitationRecord], template: &PromptTemplate) -> Result<Vec<Vec<u32>>> {
    records
        .iter()
        .map(|r| {
            let (a, _) = r.single_answer()?;
            template.render(&r.question, a, a)
        })
        .collect()
}

/// Decode every prompt under `plan` (or none) and score against correctness.
pub fn evaluate(
    model: &ToyModel,
    prompts: &[Vec<u32>],
    correct: &[bool],
    plan: Option<&InterventionPlan>,
    bins: usize,
) -> Result<CalibrationReport> {
    let preds = prompts
        .par_iter()
        .zip(correct)
        .map(|(p, &y)| {
            let logits = match plan {
                Some(plan) => apply_intervention(model, p, plan)?,
                None => model.forward(p, None)?.0,
            };
            PredictionRecord::from_verbalized(decode_confidence(&logits, p.len() - 1), y)
        })
        .collect::<Result<Vec<_>>>()?;
    report(&preds, bins)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub ece: f64,
    pub brier: f64,
    pub ece_improvement_pct: Option<f64>,
    pub brier_improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub baseline: CalibrationReport,
    pub rows: Vec<SweepRow>,
    pub reports: Vec<CalibrationReport>,
}

impl Sweep {
    /// Row with the lowest ECE; ties go to the smaller alpha.
    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().fold(None, |best: Option<&SweepRow>, r| match best {
            Some(b) if b.ece <= r.ece => Some(b),
            _ => Some(r),
        })
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(w, "alpha,ece,brier,ece_improvement_pct,brier_improvement_pct")?;
        writeln!(w, "0,{},{},0,0", self.baseline.ece, self.baseline.brier)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.alpha,
                r.ece,
                r.brier,
                opt(r.ece_improvement_pct),
                opt(r.brier_improvement_pct)
            )?;
        }
        Ok(())
    }
}

/// Steering sweep: `plan` supplies the vectors, each alpha is evaluated on all records.
pub fn alpha_sweep(
    model: &ToyModel,
    records: &[ElicitationRecord],
    template: &PromptTemplate,
    plan: &InterventionPlan,
    alphas: &[f64],
    bins: usize,
) -> Result<Sweep> {
    if alphas.is_empty() {
        return Err(CmcError::Empty("alpha grid"));
    }
    let prompts = confidence_prompts(records, template)?;
    let correct: Vec<bool> = records.iter().map(|r| r.correct).collect();
    let baseline = evaluate(model, &prompts, &correct, None, bins)?;
    let mut rows = Vec::with_capacity(alphas.len());
    let mut reports = Vec::with_capacity(alphas.len());
    for &a in alphas {
        let r = evaluate(model, &prompts, &correct, Some(&plan.with_alpha(a)?), bins)?;
        let imp = improvement(&baseline, &r);
        rows.push(SweepRow {
            alpha: a,
            ece: r.ece,
            brier: r.brier,
            ece_improvement_pct: imp.ece_pct,
            brier_improvement_pct: imp.brier_pct,
        });
        reports.push(r);
    }
    Ok(Sweep { baseline, rows, reports })
}

pub fn default_alpha_grid() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_bounds() {
        let v = SteeringVector {
            component: NodeId::Mlp { layer: 0 },
            vector: vec![0.0; 4],
            n: 1,
        };
        assert!(InterventionPlan::steering(std::slice::from_ref(&v), 1.5).is_err());
        let p = InterventionPlan::steering(&[v], 0.5).unwrap();
        assert!(p.with_alpha(-0.1).is_err());
        let m = InterventionPlan::mean_ablation(&[]);
        assert!(m.with_alpha(0.5).is_err());
    }

    #[test]
    fn grid() {
        let g = default_alpha_grid();
        assert_eq!(g.len(), 10);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[9], 1.0);
    }

    #[test]
    fn plan_json_round_trip() {
        let p = InterventionPlan::steering(
            &[SteeringVector {
                component: NodeId::Head { layer: 1, head: 2 },
                vector: vec![0.5, -1.25],
                n: 3,
            }],
            0.3,
        )
        .unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"mode\":\"steering\""));
        assert!(s.contains("\"a1.h2\""));
        let back: InterventionPlan = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }
}
