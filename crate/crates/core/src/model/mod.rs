//! Toy decoder-only transformer with per-head decomposition.

mod forward;
mod planted;
mod snapshot;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use forward::{ActivationCache, ForwardMode, PatchDirective, PatchPlan, Trace};
pub use planted::{plant_overconfidence_circuit, plant_with, PlantedCircuit, PlantedSummary, PlantingOptions};
pub use snapshot::{load_snapshot, read_snapshot, save_snapshot, write_snapshot, SNAPSHOT_MAGIC};

use crate::error::{CmcError, Result};
use crate::graph::ComputationGraph;
use crate::tensor::Tensor;

/// Number of confidence tokens; token `c` verbalises the integer `c`.
pub const CONFIDENCE_TOKENS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            n_heads: 4,
            d_model: 64,
            d_head: 16,
            d_mlp: 128,
            vocab_size: 128,
            max_seq: 32,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CmcError::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_mlp == 0 {
            return fail("layer, head and width counts must be positive".into());
        }
        if self.n_heads * self.d_head != self.d_model {
            return fail(format!(
                "n_heads ({}) x d_head ({}) != d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.vocab_size < CONFIDENCE_TOKENS {
            return fail(format!(
                "vocab_size {} leaves no room for {CONFIDENCE_TOKENS} confidence tokens",
                self.vocab_size
            ));
        }
        if self.max_seq == 0 {
            return fail("max_seq must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadWeights {
    pub w_q: Arc<Tensor>,
    pub w_k: Arc<Tensor>,
    pub w_v: Arc<Tensor>,
    pub w_o: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Arc<Tensor>,
    pub ln1_bias: Arc<Tensor>,
    pub heads: Vec<HeadWeights>,
    pub ln2_gain: Arc<Tensor>,
    pub ln2_bias: Arc<Tensor>,
    pub mlp_in: Arc<Tensor>,
    pub mlp_in_bias: Arc<Tensor>,
    pub mlp_out: Arc<Tensor>,
    pub mlp_out_bias: Arc<Tensor>,
}

/// All parameters. Never mutated after construction.
#[derive(Debug, Clone)]
pub struct ModelWeights {
    pub token_embed: Arc<Tensor>,
    pub pos_embed: Arc<Tensor>,
    pub layers: Vec<LayerWeights>,
    pub final_ln_gain: Arc<Tensor>,
    pub final_ln_bias: Arc<Tensor>,
    pub unembed: Arc<Tensor>,
}

/// Shapes of every weight tensor, in declaration (serialisation) order.
pub(crate) fn weight_shapes(c: &ModelConfig) -> Vec<Vec<usize>> {
    let mut shapes = vec![vec![c.vocab_size, c.d_model], vec![c.max_seq, c.d_model]];
    for _ in 0..c.n_layers {
        shapes.push(vec![c.d_model]);
        shapes.push(vec![c.d_model]);
        for _ in 0..c.n_heads {
            shapes.push(vec![c.d_model, c.d_head]);
            shapes.push(vec![c.d_model, c.d_head]);
            shapes.push(vec![c.d_model, c.d_head]);
            shapes.push(vec![c.d_head, c.d_model]);
        }
        shapes.push(vec![c.d_model]);
        shapes.push(vec![c.d_model]);
        shapes.push(vec![c.d_model, c.d_mlp]);
        shapes.push(vec![c.d_mlp]);
        shapes.push(vec![c.d_mlp, c.d_model]);
        shapes.push(vec![c.d_model]);
    }
    shapes.push(vec![c.d_model]);
    shapes.push(vec![c.d_model]);
    shapes.push(vec![c.d_model, c.vocab_size]);
    shapes
}

impl ModelWeights {
    /// Tensors in declaration order.
    pub fn tensors(&self) -> Vec<&Arc<Tensor>> {
        let mut out = vec![&self.token_embed, &self.pos_embed];
        for l in &self.layers {
            out.push(&l.ln1_gain);
            out.push(&l.ln1_bias);
            for h in &l.heads {
                out.extend([&h.w_q, &h.w_k, &h.w_v, &h.w_o]);
            }
            out.push(&l.ln2_gain);
            out.push(&l.ln2_bias);
            out.extend([&l.mlp_in, &l.mlp_in_bias, &l.mlp_out, &l.mlp_out_bias]);
        }
        out.extend([&self.final_ln_gain, &self.final_ln_bias, &self.unembed]);
        out
    }

    /// Inverse of [`Self::tensors`].
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = weight_shapes(config);
        if tensors.len() != shapes.len() {
            return Err(CmcError::Format(format!(
                "expected {} weight tensors, got {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (t, s) in tensors.iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(CmcError::Shape {
                    op: "weights",
                    left: s.clone(),
                    right: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(CmcError::Format("non-finite weight".into()));
            }
        }
        let mut it = tensors.into_iter().map(Arc::new);
        let mut next = || it.next().expect("count checked");
        let token_embed = next();
        let pos_embed = next();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1_gain = next();
            let ln1_bias = next();
            let heads = (0..config.n_heads)
                .map(|_| HeadWeights {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                    w_o: next(),
                })
                .collect();
            layers.push(LayerWeights {
                ln1_gain,
                ln1_bias,
                heads,
                ln2_gain: next(),
                ln2_bias: next(),
                mlp_in: next(),
                mlp_in_bias: next(),
                mlp_out: next(),
                mlp_out_bias: next(),
            });
        }
        Ok(Self {
            token_embed,
            pos_embed,
            layers,
            final_ln_gain: next(),
            final_ln_bias: next(),
            unembed: next(),
        })
    }
}

/// Gaussian(0, `std`) matrices; layer-norm gains one, biases zero unless `noisy_biases`.
pub(crate) fn gaussian_tensors(config: &ModelConfig, std: f64, seed: u64, noisy_biases: bool) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    let shapes = weight_shapes(config);
    // declaration order: 2 embeddings, then per layer
    // [ln1 g, ln1 b, 4*H head mats, ln2 g, ln2 b, in, in_b, out, out_b], then final g, b, unembed
    let per_layer = 4 + 4 * config.n_heads + 4;
    shapes
        .into_iter()
        .enumerate()
        .map(|(i, shape)| {
            let n: usize = shape.iter().product();
            let kind = classify(i, per_layer, config);
            let data = match kind {
                Slot::Gain => vec![1.0; n],
                Slot::Bias if !noisy_biases => vec![0.0; n],
                Slot::Matrix | Slot::Bias => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            };
            Tensor::new(shape, data).expect("shape product")
        })
        .collect()
}

#[derive(PartialEq)]
enum Slot {
    Gain,
    Bias,
    Matrix,
}

fn classify(i: usize, per_layer: usize, c: &ModelConfig) -> Slot {
    if i < 2 {
        return Slot::Matrix;
    }
    let j = i - 2;
    if j >= c.n_layers * per_layer {
        return match j - c.n_layers * per_layer {
            0 => Slot::Gain,
            1 => Slot::Bias,
            _ => Slot::Matrix,
        };
    }
    let k = j % per_layer;
    let heads_end = 2 + 4 * c.n_heads;
    match k {
        0 => Slot::Gain,
        1 => Slot::Bias,
        _ if k < heads_end => Slot::Matrix,
        _ => match k - heads_end {
            0 => Slot::Gain,
            1 => Slot::Bias,
            2 => Slot::Matrix,
            3 => Slot::Bias,
            4 => Slot::Matrix,
            _ => Slot::Bias,
        },
    }
}

/// Weights, config and the derived computation graph.
#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ModelConfig,
    weights: ModelWeights,
    graph: Arc<ComputationGraph>,
    mode: ForwardMode,
}

impl ToyModel {
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let shapes = weight_shapes(&config);
        for (t, s) in weights.tensors().iter().zip(&shapes) {
            if t.shape() != s.as_slice() {
                return Err(CmcError::Shape {
                    op: "weights",
                    left: s.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            graph: Arc::new(ComputationGraph::new(config.n_layers, config.n_heads)),
            config,
            weights,
            mode: ForwardMode::Standard,
        })
    }

    /// Gaussian initialisation with std 0.02, seeded by `config.seed`.
    pub fn init_random(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = gaussian_tensors(&config, 0.02, config.seed, false);
        let weights = ModelWeights::from_tensors(&config, tensors)?;
        Self::new(config, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn graph(&self) -> &ComputationGraph {
        &self.graph
    }

    pub(crate) fn shared_graph(&self) -> Arc<ComputationGraph> {
        Arc::clone(&self.graph)
    }

    pub fn mode(&self) -> ForwardMode {
        self.mode
    }

    /// Same weights with every nonlinearity removed: identity activation,
    /// affine layer norm, and a fixed uniform causal attention pattern. The
    /// resulting map from embeddings to logits is affine, which makes it an
    /// exact test fixture for first-order attribution.
    pub fn linearized(&self) -> Self {
        Self {
            mode: ForwardMode::Linearized,
            ..self.clone()
        }
    }

    /// SHA-256 of the snapshot encoding, hex.
    pub fn checksum(&self) -> String {
        let mut buf = Vec::new();
        write_snapshot(self, &mut buf).expect("in-memory write");
        hex::encode(Sha256::digest(&buf))
    }
}

/// Argmax over the confidence tokens at `pos`; ties go to the lower integer.
pub fn decode_confidence(logits: &Tensor, pos: usize) -> u8 {
    let row = logits.row(pos);
    let mut best = 0usize;
    for c in 1..CONFIDENCE_TOKENS {
        if row[c] > row[best] {
            best = c;
        }
    }
    best as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = ToyModel::init_random(ModelConfig::default()).unwrap();
        let b = ToyModel::init_random(ModelConfig::default()).unwrap();
        let c = ToyModel::init_random(ModelConfig {
            seed: 1,
            ..ModelConfig::default()
        })
        .unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn mismatched_head_width_is_rejected() {
        let cfg = ModelConfig {
            d_head: 15,
            ..ModelConfig::default()
        };
        assert!(matches!(ToyModel::init_random(cfg), Err(CmcError::Config(_))));
    }

    #[test]
    fn small_vocab_is_rejected() {
        let cfg = ModelConfig {
            vocab_size: 99,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gains_and_biases_are_initialised_exactly() {
        let m = ToyModel::init_random(ModelConfig::default()).unwrap();
        let l = &m.weights().layers[2];
        assert!(l.ln1_gain.data().iter().all(|v| *v == 1.0));
        assert!(l.ln2_bias.data().iter().all(|v| *v == 0.0));
        assert!(l.mlp_in_bias.data().iter().all(|v| *v == 0.0));
        assert!(m.weights().final_ln_gain.data().iter().all(|v| *v == 1.0));
        assert!(l.heads[3].w_o.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn decode_picks_argmax_and_breaks_ties_low() {
        let mut logits = Tensor::zeros(&[1, 128]);
        assert_eq!(decode_confidence(&logits, 0), 0);
        logits.set2(0, 37, 10.0);
        assert_eq!(decode_confidence(&logits, 0), 37);
        logits.set2(0, 120, 50.0);
        assert_eq!(decode_confidence(&logits, 0), 37);
    }
}
