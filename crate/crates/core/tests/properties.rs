use proptest::prelude::*;

use cmc::calibration::{brier, ece, reliability_bins, PredictionRecord};
use cmc::graph::{edge_count, CircuitSpec, ComputationGraph};
use cmc::io::{ingest_str, records_to_jsonl, RawRecord};
use cmc::record::{check_gradients, ComputeRecord};
use cmc::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
enum Op {
    Matmul,
    Gelu,
    LayerNorm,
    Softmax,
    MulSelf,
    AddRow,
    Scale(f64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        Just(Op::Matmul),
        Just(Op::Gelu),
        Just(Op::LayerNorm),
        Just(Op::Softmax),
        Just(Op::MulSelf),
        Just(Op::AddRow),
        (-2.0..2.0f64).prop_map(Op::Scale),
    ]
}

fn values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.5..1.5f64, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reverse_mode_matches_central_differences(
        ops in prop::collection::vec(op(), 1..6),
        x in values(12),
        w in values(16),
        g in values(4),
        b in values(4),
    ) {
        let mut rec = ComputeRecord::new();
        let xi = rec.input(Tensor::matrix(3, 4, x).unwrap());
        let wi = rec.input(Tensor::matrix(4, 4, w).unwrap());
        let gi = rec.input(Tensor::vector(g));
        let bi = rec.input(Tensor::vector(b));
        let mut h = xi;
        for o in &ops {
            h = match *o {
                Op::Matmul => rec.matmul(h, wi).unwrap(),
                Op::Gelu => rec.gelu(h).unwrap(),
                Op::LayerNorm => rec.layer_norm(h, gi, bi).unwrap(),
                Op::Softmax => rec.softmax_last_dim(h).unwrap(),
                Op::MulSelf => rec.mul(h, h).unwrap(),
                Op::AddRow => rec.add_row(h, bi).unwrap(),
                Op::Scale(s) => rec.scale(h, s).unwrap(),
            };
        }
        let loss = rec.sum_all(h).unwrap();
        let worst = check_gradients(&rec, loss, &[xi, wi, gi, bi], 24, 1e-5, 1).unwrap();
        prop_assert!(worst <= 1e-5, "ops {:?} worst {}", ops, worst);
    }

    #[test]
    fn calibration_metrics_are_bounded_and_order_free(
        raw in prop::collection::vec((0.0..=1.0f64, any::<bool>()), 1..200),
        bins in 1usize..20,
        seed in any::<u64>(),
    ) {
        let r: Vec<PredictionRecord> = raw.iter().map(|&(c, y)| PredictionRecord::new(c, y).unwrap()).collect();
        let e = ece(&r, bins).unwrap();
        let s = brier(&r).unwrap();
        prop_assert!((0.0..=1.0).contains(&e));
        prop_assert!((0.0..=1.0).contains(&s));
        let counts: usize = reliability_bins(&r, bins).unwrap().iter().map(|b| b.count).sum();
        prop_assert_eq!(counts, r.len());
        let mut shuffled = r.clone();
        let n = shuffled.len();
        for i in 0..n {
            let j = (seed.wrapping_mul(i as u64 + 1).rotate_left(17) as usize) % n;
            shuffled.swap(i, j);
        }
        prop_assert!((ece(&shuffled, bins).unwrap() - e).abs() <= 1e-12);
        prop_assert!((brier(&shuffled).unwrap() - s).abs() <= 1e-12);
    }

    #[test]
    fn edge_count_matches_enumeration(l in 1usize..7, h in 1usize..7) {
        prop_assert_eq!(ComputationGraph::new(l, h).len(), edge_count(l, h));
    }

    #[test]
    fn complement_is_an_involution(mask in prop::collection::vec(any::<bool>(), 24)) {
        let g = ComputationGraph::new(2, 2);
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        let c = CircuitSpec::from_indices(&g, idx.iter().copied()).unwrap();
        let cc = c.complement();
        prop_assert_eq!(c.len() + cc.len(), g.len());
        prop_assert_eq!(cc.complement(), c);
    }

    #[test]
    fn jsonl_round_trip(
        recs in prop::collection::vec((0u8..100, any::<bool>(), "[a-z ]{0,12}", "[a-z]{1,6}"), 0..20),
    ) {
        let raw: Vec<RawRecord> = recs
            .iter()
            .map(|(c, y, q, a)| RawRecord {
                question: q.clone(),
                model_answer: a.clone(),
                gold_answer: a.clone(),
                correct: *y,
                confidence: *c,
                metadata: Default::default(),
            })
            .collect();
        let text = records_to_jsonl(&raw).unwrap();
        let ds = ingest_str("p", &text).unwrap();
        prop_assert!(ds.errors.is_empty());
        prop_assert_eq!(ds.records, raw);
    }
}
