//! Hand-built overconfidence pathway on top of small random weights.
//!
//! A mid-layer head reads the answer slot and the reference slot from the
//! final position and copies their entity codes into a reserved subspace.
//! When both slots hold the same entity the code adds up on one pair of
//! dimensions. A later MLP thresholds that sum and writes a scalar onto the
//! confidence-write direction, which the unembedding maps to a confidence
//! logit profile.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};
use crate::graph::NodeId;
use crate::signal::{tsld_at, CandidateSets};
use crate::task::{PromptTemplate, TaskVocab};
use crate::tensor::Tensor;

use super::{gaussian_tensors, ModelConfig, ModelWeights, ToyModel, CONFIDENCE_TOKENS};

const KAPPA: usize = 0;
const QUERY_MARK: usize = 2;
const SLOT_MARK: usize = 4;
const WRITE: usize = 6;
const FILL: usize = 8;
const ENTITY_BASE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantingOptions {
    pub margin: f64,
    pub max_logit: f64,
    pub noise_std: f64,
    /// Entity codes run from `code_scale` to `code_scale * (1 + code_spread)`.
    pub code_scale: f64,
    pub code_spread: f64,
    /// Largest clean confidence the readout is tuned to produce.
    pub peak_confidence: f64,
}

impl Default for PlantingOptions {
    fn default() -> Self {
        Self {
            margin: 8.0,
            max_logit: 20.0,
            noise_std: 0.002,
            code_scale: 0.25,
            code_spread: 0.08,
            peak_confidence: 0.96,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PlantedCircuit {
    pub model: ToyModel,
    pub head: NodeId,
    pub mlp: NodeId,
    pub vocab: TaskVocab,
    pub template: PromptTemplate,
    pub margin: f64,
    /// Unit residual direction the MLP writes confidence onto.
    pub write_direction: Vec<f64>,
    pub amplitude: f64,
    pub curvature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedSummary {
    pub components: Vec<String>,
    pub margin: f64,
    pub amplitude: f64,
    pub curvature: f64,
    pub n_entities: usize,
    pub n_questions: usize,
}

impl PlantedCircuit {
    pub fn true_components(&self) -> [NodeId; 2] {
        [self.head, self.mlp]
    }

    pub fn summary(&self) -> PlantedSummary {
        PlantedSummary {
            components: self.true_components().iter().map(|c| c.label()).collect(),
            margin: self.margin,
            amplitude: self.amplitude,
            curvature: self.curvature,
            n_entities: self.vocab.n_entities,
            n_questions: self.vocab.n_questions,
        }
    }

    /// Prompt where the answer slot holds `answer` and the reference slot `reference`.
    pub fn prompt(&self, question: &[u32], answer: u32, reference: u32) -> Result<Vec<u32>> {
        self.template.render(question, answer, reference)
    }

    pub fn default_question(&self) -> Vec<u32> {
        vec![self.vocab.question(0), self.vocab.question(1 % self.vocab.n_questions)]
    }
}

pub fn plant_overconfidence_circuit(config: &ModelConfig, margin: f64) -> Result<PlantedCircuit> {
    plant_with(config, PlantingOptions { margin, ..PlantingOptions::default() })
}

struct Layout {
    n_ent: usize,
    d_base: usize,
    code_base: usize,
    code_pairs: usize,
}

fn pair(row: &mut [f64], dim: usize, v: f64) {
    row[dim] = v;
    row[dim + 1] = -v;
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn plant_with(config: &ModelConfig, opts: PlantingOptions) -> Result<PlantedCircuit> {
    config.validate()?;
    if config.n_layers < 2 || config.n_heads < 2 {
        return Err(CmcError::Planting("needs at least 2 layers and 2 heads".into()));
    }
    if opts.margin.is_nan() || opts.margin <= 0.0 {
        return Err(CmcError::Planting("margin must be positive".into()));
    }
    let d = config.d_model;
    let spare_vocab = config.vocab_size.saturating_sub(CONFIDENCE_TOKENS + 3);
    let n_ent = 10
        .min(config.d_head)
        .min(config.d_mlp)
        .min(d.saturating_sub(ENTITY_BASE + 2) / 4)
        .min(spare_vocab.saturating_sub(1));
    if n_ent < 3 {
        return Err(CmcError::Planting(format!(
            "config leaves room for only {n_ent} entities, need 3"
        )));
    }
    let n_q = 8.min(spare_vocab - n_ent);
    let vocab = TaskVocab::new(config.vocab_size, n_ent, n_q)?;
    let layout = Layout {
        n_ent,
        d_base: ENTITY_BASE + 2 * n_ent,
        code_base: ENTITY_BASE + 4 * n_ent,
        code_pairs: (d - ENTITY_BASE - 4 * n_ent) / 2,
    };
    let lh = (config.n_layers - 1) / 2;
    let hh = config.n_heads / 2;
    let lm = (lh + 1).max(config.n_layers.saturating_sub(2));

    let mut tensors = gaussian_tensors(config, opts.noise_std, config.seed, true);
    let mut w = ModelWeights::from_tensors(config, std::mem::take(&mut tensors))?;
    let code_scale = opts.code_scale;
    let code = |e: usize| code_scale * (1.0 + opts.code_spread * e as f64 / (n_ent - 1) as f64);

    // Embeddings: every row is zero-mean with norm sqrt(d).
    {
        let mut te = Tensor::zeros(&[config.vocab_size, d]);
        let target = d as f64 / 2.0;
        for t in 0..config.vocab_size as u32 {
            let row = te.row_mut(t as usize);
            let mut used = 0.0;
            let mut put = |row: &mut [f64], dim: usize, v: f64| {
                pair(row, dim, v);
                used += v * v;
            };
            if let Some(e) = vocab.entity_index(t) {
                put(row, SLOT_MARK, 0.5);
                put(row, ENTITY_BASE + 2 * e, code(e));
            } else if t == vocab.end() {
                put(row, KAPPA, 1.0);
                put(row, QUERY_MARK, 0.5);
            } else if (t as usize) >= CONFIDENCE_TOKENS && t <= vocab.end() {
                let k = t as usize - CONFIDENCE_TOKENS - n_ent;
                put(row, layout.code_base + 2 * (k % layout.code_pairs), 1.0);
            }
            pair(row, FILL, (target - used).sqrt());
        }
        w.token_embed = Arc::new(te);
    }

    // Designated head.
    {
        let layer = &mut w.layers[lh];
        let head = &mut layer.heads[hh];
        let g = (12.0 * (config.d_head as f64).sqrt()).sqrt();
        let mut wq = (*head.w_q).clone();
        let mut wk = (*head.w_k).clone();
        let mut wv = (*head.w_v).clone();
        let mut wo = (*head.w_o).clone();
        wq.set2(QUERY_MARK, 0, g);
        wq.set2(QUERY_MARK + 1, 0, -g);
        wk.set2(SLOT_MARK, 0, g);
        wk.set2(SLOT_MARK + 1, 0, -g);
        for e in 0..layout.n_ent {
            wv.set2(ENTITY_BASE + 2 * e, e, 0.5 / code_scale);
            wv.set2(ENTITY_BASE + 2 * e + 1, e, -0.5 / code_scale);
            wo.set2(e, layout.d_base + 2 * e, 1.0);
            wo.set2(e, layout.d_base + 2 * e + 1, -1.0);
        }
        head.w_q = Arc::new(wq);
        head.w_k = Arc::new(wk);
        head.w_v = Arc::new(wv);
        head.w_o = Arc::new(wo);
    }

    // Designated MLP: neuron e fires when both slots agree on entity e.
    {
        let (steep, thresh, gain) = (30.0, 0.75, 0.25);
        // centre the written value between the agreeing and disagreeing cases
        let gelu = |x: f64| crate::tensor::gelu(&Tensor::scalar(x)).item();
        let write_low = gain * (gelu(steep * (1.0 - thresh)) + 2.0 * gelu(steep * (0.5 - thresh))) / 2.0;
        let layer = &mut w.layers[lm];
        let mut wi = (*layer.mlp_in).clone();
        let mut bi = (*layer.mlp_in_bias).clone();
        let mut wo = (*layer.mlp_out).clone();
        let mut bo = (*layer.mlp_out_bias).clone();
        for e in 0..layout.n_ent {
            wi.set2(layout.d_base + 2 * e, e, steep / 2.0);
            wi.set2(layout.d_base + 2 * e + 1, e, -steep / 2.0);
            bi.data_mut()[e] = -steep * thresh;
            wo.set2(e, WRITE, gain);
            wo.set2(e, WRITE + 1, -gain);
        }
        bo.data_mut()[WRITE] = -write_low;
        bo.data_mut()[WRITE + 1] = write_low;
        layer.mlp_in = Arc::new(wi);
        layer.mlp_in_bias = Arc::new(bi);
        layer.mlp_out = Arc::new(wo);
        layer.mlp_out_bias = Arc::new(bo);
    }

    let sets = CandidateSets::default();
    let u = |c: u32| c as f64 / 100.0;
    let m_h = |f: &dyn Fn(f64) -> f64| mean(sets.high().iter().map(|&c| f(u(c))));
    let m_l = |f: &dyn Fn(f64) -> f64| mean(sets.low().iter().map(|&c| f(u(c))));
    let lin_gap = m_h(&|x| x) - m_l(&|x| x);
    let ratio = (m_h(&|x| x * x) - m_l(&|x| x * x)) / lin_gap;

    let base_unembed = (*w.unembed).clone();
    let readout = |amp: f64, curv: f64| -> Tensor {
        let mut wu = base_unembed.clone();
        for c in 0..CONFIDENCE_TOKENS {
            let uc = c as f64 / 100.0;
            wu.set2(WRITE, c, amp * uc / 2.0);
            wu.set2(WRITE + 1, c, -amp * uc / 2.0);
            let q = -curv * uc * uc + curv * ratio * uc;
            wu.set2(KAPPA, c, q / 2.0);
            wu.set2(KAPPA + 1, c, -q / 2.0);
        }
        wu
    };

    let template = PromptTemplate::standard(&vocab);
    let question = vec![vocab.question(0), vocab.question(1 % n_q)];
    let build = |w: &ModelWeights, amp: f64, curv: f64| -> Result<ToyModel> {
        let mut w = w.clone();
        w.unembed = Arc::new(readout(amp, curv));
        ToyModel::new(*config, w)
    };
    // prompts[(a, r)]: answer a, reference r
    let prompts: Vec<(usize, usize, Vec<u32>)> = (0..n_ent)
        .flat_map(|a| (0..n_ent).map(move |r| (a, r)))
        .map(|(a, r)| Ok((a, r, template.render(&question, vocab.entity(a), vocab.entity(r))?)))
        .collect::<Result<_>>()?;
    let pos_end = prompts[0].2.len() - 1;
    let tslds = |m: &ToyModel| -> Result<Vec<f64>> {
        prompts
            .iter()
            .map(|(_, _, p)| tsld_at(&m.forward(p, None)?.0, pos_end, &sets))
            .collect()
    };
    // TSLD is affine in the amplitude and independent of the curvature.
    let t0 = tslds(&build(&w, 0.0, 0.0)?)?;
    let t1: Vec<f64> = tslds(&build(&w, 1.0, 0.0)?)?.iter().zip(&t0).map(|(a, b)| a - b).collect();
    let at = |a: usize, r: usize| a * n_ent + r;
    let m = opts.margin;
    let mut amp = 0.0f64;
    let mut need = |offset: f64, slope: f64, target: f64, above: bool| -> Result<()> {
        let (o, s, t) = if above { (offset, slope, target) } else { (-offset, -slope, -target) };
        if s <= 0.0 {
            return Err(CmcError::Planting("construction has the wrong polarity".into()));
        }
        amp = amp.max((t - o) / s);
        Ok(())
    };
    let mut peak_write = 0.0f64;
    for r in 0..n_ent {
        let c = at(r, r);
        need(t0[c], t1[c], 0.55 * m, true)?;
        peak_write = peak_write.max(t1[c] / lin_gap);
        for g in (0..n_ent).filter(|g| *g != r) {
            let x = at(g, r);
            need(t0[x], t1[x], -0.55 * m, false)?;
            need(t0[x] - t0[c], t1[x] - t1[c], -1.1 * m, false)?;
        }
    }
    let curv = amp * peak_write / (2.0 * (opts.peak_confidence - ratio / 2.0));
    let model = build(&w, amp, curv)?;

    let mut worst = 0.0f64;
    for (_, _, p) in &prompts {
        let (logits, _) = model.forward(p, None)?;
        for &v in &logits.row(pos_end)[..CONFIDENCE_TOKENS] {
            worst = worst.max(v.abs());
        }
    }
    if worst > opts.max_logit {
        return Err(CmcError::Planting(format!(
            "margin {m} unachievable: confidence logits reach {worst:.2}, bound is {}",
            opts.max_logit
        )));
    }

    let mut write_direction = vec![0.0; d];
    write_direction[WRITE] = std::f64::consts::FRAC_1_SQRT_2;
    write_direction[WRITE + 1] = -std::f64::consts::FRAC_1_SQRT_2;
    Ok(PlantedCircuit {
        model,
        head: NodeId::Head { layer: lh, head: hh },
        mlp: NodeId::Mlp { layer: lm },
        vocab,
        template,
        margin: m,
        write_direction,
        amplitude: amp,
        curvature: curv,
    })
}
