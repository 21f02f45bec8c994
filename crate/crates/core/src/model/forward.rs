use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{CmcError, Result};
use crate::graph::{ComputationGraph, EdgeId, NodeId};
use crate::record::{ComputeRecord, TensorId};
use crate::tensor::Tensor;

use super::ToyModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Standard,
    Linearized,
}

/// One activation-patching instruction.
#[derive(Debug, Clone)]
pub enum PatchDirective {
    /// Replace `edge.source`'s contribution to one destination channel with
    /// `replacement` (`[seq, d_model]`). Other consumers of the source are
    /// untouched.
    EdgePatch { edge: EdgeId, replacement: Arc<Tensor> },
    /// Overwrite a node's output row at `position`.
    Overwrite { node: NodeId, position: usize, values: Vec<f64> },
    /// Add `delta` to a node's output row at `position`, after overwrites.
    Offset { node: NodeId, position: usize, delta: Vec<f64> },
}

#[derive(Debug, Clone, Default)]
pub struct PatchPlan {
    pub directives: Vec<PatchDirective>,
}

impl PatchPlan {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, d: PatchDirective) -> &mut Self {
        self.directives.push(d);
        self
    }

    pub fn with(mut self, d: PatchDirective) -> Self {
        self.directives.push(d);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }
}

/// `(position, values)` rows keyed by node index.
type RowWrites = HashMap<usize, Vec<(usize, Arc<Vec<f64>>)>>;

#[derive(Default)]
struct ResolvedPlan {
    edges: HashMap<usize, Arc<Tensor>>,
    overwrites: RowWrites,
    offsets: HashMap<usize, Vec<(usize, Arc<Tensor>)>>,
}

impl ResolvedPlan {
    fn new(plan: Option<&PatchPlan>, graph: &ComputationGraph, seq: usize, d: usize) -> Result<Self> {
        let mut out = ResolvedPlan::default();
        let Some(plan) = plan else { return Ok(out) };
        let output_node = |node: NodeId| -> Result<usize> {
            if node == NodeId::Logits {
                return Err(CmcError::Patch("logits have no residual output".into()));
            }
            graph.node_index(node)
        };
        let check_row = |position: usize, len: usize| -> Result<()> {
            if position >= seq {
                return Err(CmcError::Patch(format!("position {position} >= sequence length {seq}")));
            }
            if len != d {
                return Err(CmcError::Patch(format!("row of length {len}, expected {d}")));
            }
            Ok(())
        };
        for dir in &plan.directives {
            match dir {
                PatchDirective::EdgePatch { edge, replacement } => {
                    let e = graph.edge_index(edge)?;
                    if replacement.shape() != [seq, d] {
                        return Err(CmcError::Patch(format!(
                            "edge replacement shape {:?}, expected [{seq}, {d}]",
                            replacement.shape()
                        )));
                    }
                    out.edges.insert(e, Arc::clone(replacement));
                }
                PatchDirective::Overwrite { node, position, values } => {
                    let n = output_node(*node)?;
                    check_row(*position, values.len())?;
                    let list = out.overwrites.entry(n).or_default();
                    if list.iter().any(|(p, _)| p == position) {
                        return Err(CmcError::Patch(format!(
                            "second overwrite of {node} at position {position}"
                        )));
                    }
                    list.push((*position, Arc::new(values.clone())));
                }
                PatchDirective::Offset { node, position, delta } => {
                    let n = output_node(*node)?;
                    check_row(*position, delta.len())?;
                    let mut full = Tensor::zeros(&[seq, d]);
                    full.row_mut(*position).copy_from_slice(delta);
                    out.offsets.entry(n).or_default().push((*position, Arc::new(full)));
                }
            }
        }
        Ok(out)
    }
}

/// Per-node outputs and per-channel resolved inputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    graph: Arc<ComputationGraph>,
    outputs: Vec<Arc<Tensor>>,
    inputs: Vec<Arc<Tensor>>,
    logits: Arc<Tensor>,
}

impl ActivationCache {
    pub fn graph(&self) -> &ComputationGraph {
        &self.graph
    }

    pub fn output(&self, node: NodeId) -> Result<&Tensor> {
        let i = self.graph.node_index(node)?;
        self.outputs
            .get(i)
            .map(|t| t.as_ref())
            .ok_or_else(|| CmcError::Unknown(format!("{node} has no output")))
    }

    /// Output of the `i`-th node in topological order.
    pub fn output_at(&self, i: usize) -> &Arc<Tensor> {
        &self.outputs[i]
    }

    pub fn outputs(&self) -> &[Arc<Tensor>] {
        &self.outputs
    }

    pub fn input(&self, channel_index: usize) -> &Tensor {
        &self.inputs[channel_index]
    }

    pub fn inputs(&self) -> &[Arc<Tensor>] {
        &self.inputs
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

/// A recorded forward pass: the compute record plus the identities of every
/// node output and channel input on it.
#[derive(Debug)]
pub struct Trace {
    pub record: ComputeRecord,
    pub cache: ActivationCache,
    pub output_ids: Vec<TensorId>,
    pub input_ids: Vec<TensorId>,
    pub logits_id: TensorId,
}

impl Trace {
    /// Append `sum_v weights[v] * logits[pos, v]` to the record.
    pub fn weighted_logit_loss(&mut self, pos: usize, weights: Arc<Vec<f64>>) -> Result<TensorId> {
        let row = self.record.select_row(self.logits_id, pos)?;
        self.record.dot_const(row, weights)
    }
}

impl ToyModel {
    /// Forward pass with optional patching. Returns logits `[seq, vocab]`
    /// and the activation cache.
    pub fn forward(&self, tokens: &[u32], plan: Option<&PatchPlan>) -> Result<(Tensor, ActivationCache)> {
        let trace = self.run(tokens, plan, None, false)?;
        let logits = trace.cache.logits().clone();
        Ok((logits, trace.cache))
    }

    /// Forward pass with recording on, so that gradients with respect to any
    /// node output or channel input can be taken. `input_override` replaces
    /// the embedding node's output.
    pub fn trace(&self, tokens: &[u32], plan: Option<&PatchPlan>, input_override: Option<&Tensor>) -> Result<Trace> {
        self.run(tokens, plan, input_override, true)
    }

    pub fn run(
        &self,
        tokens: &[u32],
        plan: Option<&PatchPlan>,
        input_override: Option<&Tensor>,
        recording: bool,
    ) -> Result<Trace> {
        let cfg = &self.config;
        let seq = tokens.len();
        if seq == 0 || seq > cfg.max_seq {
            return Err(CmcError::SequenceLength { len: seq, max: cfg.max_seq });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(CmcError::TokenOutOfRange { token: bad, vocab: cfg.vocab_size });
        }
        let d = cfg.d_model;
        let graph = self.shared_graph();
        let plan = ResolvedPlan::new(plan, &graph, seq, d)?;
        let w = &self.weights;
        let mut rec = ComputeRecord::with_recording(recording);
        let linear = self.mode == ForwardMode::Linearized;

        let n_nodes = graph.nodes().len();
        let mut outputs: Vec<Option<TensorId>> = vec![None; n_nodes - 1];
        let mut inputs: Vec<Option<TensorId>> = vec![None; graph.channels().len()];

        // Input node.
        let embed = match input_override {
            Some(t) => {
                if t.shape() != [seq, d] {
                    return Err(CmcError::Shape {
                        op: "input_override",
                        left: vec![seq, d],
                        right: t.shape().to_vec(),
                    });
                }
                rec.input(t.clone())
            }
            None => {
                let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
                let positions: Vec<usize> = (0..seq).collect();
                let te = rec.input(Arc::clone(&w.token_embed));
                let pe = rec.input(Arc::clone(&w.pos_embed));
                let a = rec.embed_lookup(te, &ids)?;
                let b = rec.embed_lookup(pe, &positions)?;
                rec.add(a, b)?
            }
        };
        outputs[0] = Some(apply_node_directives(&mut rec, &plan, 0, embed)?);

        let uniform = linear.then(|| {
            let mut t = Tensor::zeros(&[seq, seq]);
            for i in 0..seq {
                for j in 0..=i {
                    t.set2(i, j, 1.0 / (i + 1) as f64);
                }
            }
            Arc::new(t)
        });

        let resolve_channel = |rec: &mut ComputeRecord, outputs: &[Option<TensorId>], ci: usize| -> Result<TensorId> {
            let mut acc: Option<TensorId> = None;
            for e in graph.channel_edges(ci) {
                let contrib = match plan.edges.get(&e) {
                    Some(t) => rec.input(Arc::clone(t)),
                    None => outputs[graph.edge_source(e)].expect("topological order"),
                };
                acc = Some(match acc {
                    None => contrib,
                    Some(a) => rec.add(a, contrib)?,
                });
            }
            let acc = acc.expect("every channel has a source");
            // Keep a distinct node so the gradient is specific to this channel.
            if graph.channel_edges(ci).len() == 1 {
                rec.scale(acc, 1.0)
            } else {
                Ok(acc)
            }
        };

        let norm = |rec: &mut ComputeRecord, x: TensorId, g: &Arc<Tensor>, b: &Arc<Tensor>| -> Result<TensorId> {
            let gi = rec.input(Arc::clone(g));
            let bi = rec.input(Arc::clone(b));
            if linear {
                let y = rec.mul_row(x, gi)?;
                rec.add_row(y, bi)
            } else {
                rec.layer_norm(x, gi, bi)
            }
        };

        let mut ci = 0usize;
        let mut node = 1usize;
        let inv_sqrt_dh = 1.0 / (cfg.d_head as f64).sqrt();
        for (layer, lw) in w.layers.iter().enumerate() {
            for hw in lw.heads.iter() {
                let mut ch = [None; 3];
                for (k, slot) in ch.iter_mut().enumerate() {
                    let x = resolve_channel(&mut rec, &outputs, ci + k)?;
                    inputs[ci + k] = Some(x);
                    *slot = Some(norm(&mut rec, x, &lw.ln1_gain, &lw.ln1_bias)?);
                }
                ci += 3;
                let [lq, lk, lv] = ch.map(|c| c.expect("set"));
                let wv = rec.input(Arc::clone(&hw.w_v));
                let v = rec.matmul(lv, wv)?;
                let pattern = match &uniform {
                    Some(u) => rec.input(Arc::clone(u)),
                    None => {
                        let wq = rec.input(Arc::clone(&hw.w_q));
                        let wk = rec.input(Arc::clone(&hw.w_k));
                        let q = rec.matmul(lq, wq)?;
                        let k = rec.matmul(lk, wk)?;
                        let kt = rec.transpose(k)?;
                        let s = rec.matmul(q, kt)?;
                        let s = rec.scale(s, inv_sqrt_dh)?;
                        let s = rec.causal_mask(s)?;
                        rec.softmax_last_dim(s)?
                    }
                };
                let z = rec.matmul(pattern, v)?;
                let wo = rec.input(Arc::clone(&hw.w_o));
                let out = rec.matmul(z, wo)?;
                outputs[node] = Some(apply_node_directives(&mut rec, &plan, node, out)?);
                node += 1;
            }
            let x = resolve_channel(&mut rec, &outputs, ci)?;
            inputs[ci] = Some(x);
            ci += 1;
            let h = norm(&mut rec, x, &lw.ln2_gain, &lw.ln2_bias)?;
            let wi = rec.input(Arc::clone(&lw.mlp_in));
            let bi = rec.input(Arc::clone(&lw.mlp_in_bias));
            let h = rec.matmul(h, wi)?;
            let h = rec.add_row(h, bi)?;
            let h = if linear { h } else { rec.gelu(h)? };
            let wo = rec.input(Arc::clone(&lw.mlp_out));
            let bo = rec.input(Arc::clone(&lw.mlp_out_bias));
            let out = rec.matmul(h, wo)?;
            let out = rec.add_row(out, bo)?;
            outputs[node] = Some(apply_node_directives(&mut rec, &plan, node, out)?);
            node += 1;
            debug_assert_eq!(graph.nodes()[node - 1], NodeId::Mlp { layer });
        }

        let x = resolve_channel(&mut rec, &outputs, ci)?;
        inputs[ci] = Some(x);
        let h = norm(&mut rec, x, &w.final_ln_gain, &w.final_ln_bias)?;
        let wu = rec.input(Arc::clone(&w.unembed));
        let logits_id = rec.matmul(h, wu)?;

        let output_ids: Vec<TensorId> = outputs.into_iter().map(|o| o.expect("all nodes run")).collect();
        let input_ids: Vec<TensorId> = inputs.into_iter().map(|o| o.expect("all channels run")).collect();
        let cache = ActivationCache {
            graph: Arc::clone(&graph),
            outputs: output_ids.iter().map(|i| rec.shared_value(*i)).collect::<Result<_>>()?,
            inputs: input_ids.iter().map(|i| rec.shared_value(*i)).collect::<Result<_>>()?,
            logits: rec.shared_value(logits_id)?,
        };
        Ok(Trace {
            record: rec,
            cache,
            output_ids,
            input_ids,
            logits_id,
        })
    }
}

fn apply_node_directives(rec: &mut ComputeRecord, plan: &ResolvedPlan, node: usize, mut out: TensorId) -> Result<TensorId> {
    if let Some(list) = plan.overwrites.get(&node) {
        for (pos, values) in list {
            out = rec.replace_row(out, *pos, Arc::clone(values))?;
        }
    }
    if let Some(list) = plan.offsets.get(&node) {
        for (_, delta) in list {
            let d = rec.input(Arc::clone(delta));
            out = rec.add(out, d)?;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Channel;
    use crate::model::ModelConfig;

    fn model() -> ToyModel {
        ToyModel::init_random(ModelConfig::default()).unwrap()
    }

    const CLEAN: [u32; 7] = [116, 117, 101, 124, 101, 125, 126];
    const CORRUPT: [u32; 7] = [116, 117, 104, 124, 101, 125, 126];

    #[test]
    fn forward_is_deterministic() {
        let m = model();
        let (a, _) = m.forward(&CLEAN, None).unwrap();
        let (b, _) = m.forward(&CLEAN, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn recording_does_not_change_values() {
        let m = model();
        let off = m.run(&CLEAN, None, None, false).unwrap();
        let on = m.run(&CLEAN, None, None, true).unwrap();
        assert_eq!(off.cache.logits(), on.cache.logits());
    }

    #[test]
    fn overwrite_with_own_output_is_noop() {
        let m = model();
        let (base, cache) = m.forward(&CLEAN, None).unwrap();
        let node = NodeId::Mlp { layer: 1 };
        let plan = PatchPlan::new().with(PatchDirective::Overwrite {
            node,
            position: 6,
            values: cache.output(node).unwrap().row(6).to_vec(),
        });
        let (patched, _) = m.forward(&CLEAN, Some(&plan)).unwrap();
        assert!(patched.max_abs_diff(&base) <= 1e-12);
    }

    #[test]
    fn patching_every_logits_edge_reproduces_corrupt_run() {
        let m = model();
        let (_, corrupt) = m.forward(&CORRUPT, None).unwrap();
        let (corrupt_logits, _) = m.forward(&CORRUPT, None).unwrap();
        let g = m.graph();
        let ci = g.channel_index(NodeId::Logits, Channel::Direct).unwrap();
        let mut plan = PatchPlan::new();
        for e in g.channel_edges(ci) {
            plan.push(PatchDirective::EdgePatch {
                edge: g.edges()[e],
                replacement: Arc::clone(corrupt.output_at(g.edge_source(e))),
            });
        }
        let (logits, _) = m.forward(&CLEAN, Some(&plan)).unwrap();
        assert!(logits.max_abs_diff(&corrupt_logits) <= 1e-9);
    }

    #[test]
    fn residual_decomposition_holds() {
        let m = model();
        let (_, cache) = m.forward(&CLEAN, None).unwrap();
        let g = m.graph();
        for ci in 0..g.channels().len() {
            let mut sum = Tensor::zeros(&[7, 64]);
            for e in g.channel_edges(ci) {
                sum.add_assign(cache.output_at(g.edge_source(e)));
            }
            assert!(sum.max_abs_diff(cache.input(ci)) <= 1e-9);
        }
    }

    #[test]
    fn edge_patch_leaves_upstream_untouched() {
        let m = model();
        let (_, clean) = m.forward(&CLEAN, None).unwrap();
        let (_, corrupt) = m.forward(&CORRUPT, None).unwrap();
        let edge = EdgeId {
            source: NodeId::Head { layer: 0, head: 1 },
            destination: NodeId::Head { layer: 2, head: 0 },
            channel: Channel::V,
        };
        let plan = PatchPlan::new().with(PatchDirective::EdgePatch {
            edge,
            replacement: Arc::new(corrupt.output(edge.source).unwrap().clone()),
        });
        let (_, patched) = m.forward(&CLEAN, Some(&plan)).unwrap();
        let g = m.graph();
        let dest = g.node_index(edge.destination).unwrap();
        for i in 0..dest {
            assert_eq!(patched.output_at(i), clean.output_at(i), "node {}", g.nodes()[i]);
        }
        assert_ne!(patched.output_at(dest), clean.output_at(dest));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = model();
        assert!(matches!(m.forward(&[200], None), Err(CmcError::TokenOutOfRange { .. })));
        assert!(m.forward(&[1; 33], None).is_err());
        let plan = PatchPlan::new().with(PatchDirective::Overwrite {
            node: NodeId::Mlp { layer: 9 },
            position: 0,
            values: vec![0.0; 64],
        });
        assert!(m.forward(&CLEAN, Some(&plan)).is_err());
        let plan = PatchPlan::new()
            .with(PatchDirective::Overwrite { node: NodeId::Input, position: 0, values: vec![0.0; 64] })
            .with(PatchDirective::Overwrite { node: NodeId::Input, position: 0, values: vec![1.0; 64] });
        assert!(m.forward(&CLEAN, Some(&plan)).is_err());
    }
}
