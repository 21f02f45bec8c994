//! Seeded synthetic elicitation records for the planted model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::model::{decode_confidence, PlantedCircuit};
use crate::task::ElicitationRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthOptions {
    pub records: usize,
    pub p_correct: f64,
    pub question_len: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            records: 200,
            p_correct: 0.4,
            question_len: 2,
        }
    }
}

/// Each record: random question words and gold entity; the model's answer
/// is the gold one with probability `p_correct`, otherwise another entity.
/// The verbalised confidence is the planted model's own decode.
pub fn synthesize_records(planted: &PlantedCircuit, opts: &SynthOptions, seed: u64) -> Result<Vec<ElicitationRecord>> {
    if !(0.0..=1.0).contains(&opts.p_correct) || opts.question_len == 0 {
        return Err(CmcError::Config("p_correct must lie in [0, 1] and questions be nonempty".into()));
    }
    let v = &planted.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(opts.records);
    for _ in 0..opts.records {
        let question: Vec<u32> = (0..opts.question_len)
            .map(|_| v.question(rng.random_range(0..v.n_questions)))
            .collect();
        let gold = rng.random_range(0..v.n_entities);
        let correct = rng.random_bool(opts.p_correct);
        let answer = if correct {
            gold
        } else {
            (gold + rng.random_range(1..v.n_entities)) % v.n_entities
        };
        let (a, g) = (v.entity(answer), v.entity(gold));
        let prompt = planted.prompt(&question, a, a)?;
        let (logits, _) = planted.model.forward(&prompt, None)?;
        out.push(ElicitationRecord {
            question,
            model_answer: vec![a],
            gold_answer: vec![g],
            correct,
            confidence: decode_confidence(&logits, prompt.len() - 1),
        });
    }
    Ok(out)
}
