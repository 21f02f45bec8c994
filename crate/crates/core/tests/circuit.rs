use std::sync::OnceLock;

use cmc::attribution::{
    aggregate, eap_ig_scores, eap_scores, exact_patch_scores, mean_scores, AttributionConfig, Interpolation, PairActivations,
};
use cmc::graph::{CircuitSpec, NodeId};
use cmc::intervention::{apply_intervention, compute_reference_mean, compute_steering_vector, InterventionPlan, InterventionTarget};
use cmc::model::{decode_confidence, plant_overconfidence_circuit, ModelConfig, PatchDirective, PatchPlan, PlantedCircuit, ToyModel};
use cmc::signal::{build_pair, stratify, tsld_at, CandidateSets, CounterfactualPair};
use cmc::synth::{synthesize_records, SynthOptions};
use cmc::validation::{faithfulness_from_means, PairSet};

struct Planted {
    p: PlantedCircuit,
    pairs: Vec<CounterfactualPair>,
    acts: Vec<PairActivations>,
}

fn planted() -> &'static Planted {
    static P: OnceLock<Planted> = OnceLock::new();
    P.get_or_init(|| {
        let p = plant_overconfidence_circuit(&ModelConfig::default(), 8.0).unwrap();
        let recs = synthesize_records(&p, &SynthOptions::default(), 0).unwrap();
        let sets = CandidateSets::default();
        let mut all: Vec<_> = recs.iter().map(|r| build_pair(&p.model, r, &p.template, &sets).unwrap()).collect();
        let st = stratify(&mut all, 1.0).unwrap();
        let pairs: Vec<_> = st.overconfident.iter().take(32).map(|&i| all[i].clone()).collect();
        let acts = pairs.iter().map(|q| PairActivations::new(&p.model, q).unwrap()).collect();
        Planted { p, pairs, acts }
    })
}

fn random_pair(model: &ToyModel) -> PairActivations {
    let clean = [110, 111, 103, 101, 103, 126, 127];
    let corrupt = [110, 111, 105, 101, 103, 126, 127];
    PairActivations::from_tokens(model, &clean, &corrupt).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn linearized_random_model_eap_is_exact() {
    let model = ToyModel::init_random(ModelConfig { seed: 3, ..ModelConfig::default() })
        .unwrap()
        .linearized();
    let acts = random_pair(&model);
    let sets = CandidateSets::default();
    let exact = exact_patch_scores(&model, &acts, &sets).unwrap();
    let eap = eap_scores(&model, &acts, &sets).unwrap();
    let cfg = AttributionConfig { steps: 7, ..Default::default() };
    let ig = eap_ig_scores(&model, &acts, &cfg).unwrap();
    assert!(max_diff(exact.values(), eap.values()) <= 1e-9);
    assert!(max_diff(exact.values(), ig.values()) <= 1e-9);
    assert!(exact.values().iter().any(|v| v.abs() > 1e-6));
}

#[test]
fn one_step_ig_is_eap() {
    let model = ToyModel::init_random(ModelConfig::default()).unwrap();
    let acts = random_pair(&model);
    let sets = CandidateSets::default();
    let eap = eap_scores(&model, &acts, &sets).unwrap();
    let ig = eap_ig_scores(&model, &acts, &AttributionConfig { steps: 1, ..Default::default() }).unwrap();
    assert_eq!(eap.values(), ig.values());
}

#[test]
fn start_inclusive_one_step_is_gradient_at_corrupt_input() {
    let model = ToyModel::init_random(ModelConfig::default()).unwrap();
    let acts = random_pair(&model);
    let cfg = AttributionConfig {
        steps: 1,
        interpolation: Interpolation::StartInclusive,
        ..Default::default()
    };
    let ig = eap_ig_scores(&model, &acts, &cfg).unwrap();
    let eap = eap_scores(&model, &acts, &cfg.sets).unwrap();
    assert_eq!(ig.len(), eap.len());
    assert!(max_diff(ig.values(), eap.values()) > 0.0);
}

#[test]
fn identical_prompts_score_zero() {
    let model = ToyModel::init_random(ModelConfig::default()).unwrap();
    let t = [110, 111, 103, 101, 103, 126, 127];
    let acts = PairActivations::from_tokens(&model, &t, &t).unwrap();
    let sets = CandidateSets::default();
    for m in [
        eap_scores(&model, &acts, &sets).unwrap(),
        eap_ig_scores(&model, &acts, &AttributionConfig::default()).unwrap(),
        exact_patch_scores(&model, &acts, &sets).unwrap(),
    ] {
        assert!(m.values().iter().all(|v| *v == 0.0));
    }
}

#[test]
fn aggregate_is_split_invariant() {
    let pl = planted();
    let cfg = AttributionConfig::default();
    let all = aggregate(&pl.p.model, &pl.pairs[..12], &cfg).unwrap();
    let a = aggregate(&pl.p.model, &pl.pairs[..4], &cfg).unwrap();
    let b = aggregate(&pl.p.model, &pl.pairs[4..12], &cfg).unwrap();
    let combined: Vec<f64> = a
        .scores
        .values()
        .iter()
        .zip(b.scores.values())
        .map(|(x, y)| (4.0 * x + 8.0 * y) / 12.0)
        .collect();
    assert!(max_diff(all.scores.values(), &combined) <= 1e-12);
    let again = mean_scores(&pl.p.model, &all.per_record).unwrap();
    assert_eq!(again.values(), all.scores.values());
}

#[test]
fn incident_edges_of_planted_components_carry_the_behaviour() {
    let pl = planted();
    let sets = CandidateSets::default();
    let set = PairSet::new(&pl.p.model, &pl.acts, &sets).unwrap();
    let g = pl.p.model.graph();
    let inc = CircuitSpec::incident_to(g, &pl.p.true_components());
    let only = set.mean_circuit_only(&inc).unwrap();
    let rel = (only - set.mean_clean).abs() / set.mean_clean.abs();
    assert!(rel <= 0.15, "{only} vs {}", set.mean_clean);
    // other edges only carry the init noise
    assert!(rel <= 1e-4, "{rel}");
    let f = faithfulness_from_means(set.mean_clean, set.mean_corrupt, only).unwrap();
    assert!((f - 100.0).abs() < 0.01, "{f}");
}

#[test]
fn zeroing_the_planted_mlp_removes_its_write() {
    let pl = planted();
    let sets = CandidateSets::default();
    let d = pl.p.model.config().d_model;
    let mut worst: f64 = 0.0;
    for q in &pl.pairs {
        let plan = PatchPlan::new().with(PatchDirective::Overwrite {
            node: pl.p.mlp,
            position: q.pos_end,
            values: vec![0.0; d],
        });
        let (l, _) = pl.p.model.forward(&q.clean, Some(&plan)).unwrap();
        worst = worst.max(tsld_at(&l, q.pos_end, &sets).unwrap().abs());
    }
    assert!(worst < pl.p.margin / 10.0, "worst |TSLD| {worst}");
}

#[test]
fn non_planted_components_barely_matter() {
    let pl = planted();
    let sets = CandidateSets::default();
    let set = PairSet::new(&pl.p.model, &pl.acts, &sets).unwrap();
    let comps: Vec<NodeId> = pl.p.model.graph().components().collect();
    let singles = set.single_ablations(&comps).unwrap();
    for (c, s) in comps.iter().zip(&singles) {
        if pl.p.true_components().contains(c) {
            assert!(s.abs() > pl.p.margin, "{c} {s}");
        } else {
            assert!(s.abs() < pl.p.margin / 10.0, "{c} {s}");
        }
    }
}

#[test]
fn incremental_ablation_drops_early_and_reaches_corrupt_level() {
    let pl = planted();
    let sets = CandidateSets::default();
    let set = PairSet::new(&pl.p.model, &pl.acts, &sets).unwrap();
    let ranked = aggregate(&pl.p.model, &pl.pairs, &AttributionConfig::default())
        .unwrap()
        .ranking
        .top(5);
    let curve = set.incremental_ablation(&ranked, 5).unwrap();
    let drops: Vec<f64> = curve.windows(2).map(|w| w[0] - w[1]).collect();
    let largest = drops
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    assert!(largest < 2, "{drops:?}");
    let joint = set.mean_resampled(&pl.p.true_components()).unwrap();
    let singles = set.single_ablations(&pl.p.true_components()).unwrap();
    for s in singles {
        assert!(joint - set.mean_clean <= s + 1e-9);
    }
    assert!((joint - set.mean_corrupt).abs() < 0.01 * pl.p.margin, "{joint} vs {}", set.mean_corrupt);
}

#[test]
fn steering_vector_of_planted_mlp_aligns_with_write_direction() {
    let pl = planted();
    let v = compute_steering_vector(&pl.acts, pl.p.mlp).unwrap().vector;
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let cos = v.iter().zip(&pl.p.write_direction).map(|(a, b)| a * b).sum::<f64>() / n;
    assert!(cos > 0.9, "{cos}");
}

#[test]
fn steering_lowers_decoded_confidence() {
    let pl = planted();
    let vs: Vec<_> = pl
        .p
        .true_components()
        .iter()
        .map(|&c| compute_steering_vector(&pl.acts, c).unwrap())
        .collect();
    let plan = InterventionPlan::steering(&vs, 0.5).unwrap();
    let drop = pl
        .pairs
        .iter()
        .map(|q| {
            let l = apply_intervention(&pl.p.model, &q.clean, &plan).unwrap();
            q.confidence_clean as f64 - decode_confidence(&l, q.pos_end) as f64
        })
        .sum::<f64>()
        / pl.pairs.len() as f64;
    assert!(drop >= 30.0, "{drop}");
}

#[test]
fn mean_ablation_pulls_tsld_to_the_reference_level() {
    let pl = planted();
    let sets = CandidateSets::default();
    let refs: Vec<_> = pl
        .p
        .true_components()
        .iter()
        .map(|&c| compute_reference_mean(&pl.acts, c).unwrap())
        .collect();
    let plan = InterventionPlan::mean_ablation(&refs);
    let mean = pl
        .pairs
        .iter()
        .map(|q| tsld_at(&apply_intervention(&pl.p.model, &q.clean, &plan).unwrap(), q.pos_end, &sets).unwrap())
        .sum::<f64>()
        / pl.pairs.len() as f64;
    assert!(mean < pl.p.margin / 5.0, "{mean}");
}

#[test]
fn malformed_plans_are_rejected() {
    let pl = planted();
    let d = pl.p.model.config().d_model;
    let target = |c: &str, n: usize| InterventionTarget {
        component: c.into(),
        vector: vec![0.0; n],
        n: 1,
    };
    let mut plan = InterventionPlan::mean_ablation(&[]);
    plan.targets = vec![target("a9.h0", d)];
    assert!(plan.validate(&pl.p.model).is_err());
    plan.targets = vec![target("logits", d)];
    assert!(plan.validate(&pl.p.model).is_err());
    plan.targets = vec![target("m1", d - 1)];
    assert!(plan.validate(&pl.p.model).is_err());
    plan.targets = vec![target("m1", d)];
    plan.validate(&pl.p.model).unwrap();
    plan.alpha = Some(0.5);
    assert!(plan.validate(&pl.p.model).is_err());
}
