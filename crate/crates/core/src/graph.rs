//! Node/edge view of the per-head-decomposed transformer.
//!
//! Nodes are the embedding (`Input`), every attention head, every MLP and the
//! unembedding (`Logits`). A head has three input channels (Q, K, V); every
//! other destination has a single direct channel. An edge is a
//! (source, destination, channel) triple and exists whenever the source
//! writes into the residual stream that the destination channel reads.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{CmcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeId {
    Input,
    Head { layer: usize, head: usize },
    Mlp { layer: usize },
    Logits,
}

impl NodeId {
    /// Component label in the `a{l}.h{h}` / `m{l}` style.
    pub fn label(&self) -> String {
        match self {
            NodeId::Input => "input".into(),
            NodeId::Head { layer, head } => format!("a{layer}.h{head}"),
            NodeId::Mlp { layer } => format!("m{layer}"),
            NodeId::Logits => "logits".into(),
        }
    }

    pub fn parse(label: &str) -> Result<NodeId> {
        let bad = || CmcError::Unknown(format!("node label {label:?}"));
        match label {
            "input" => return Ok(NodeId::Input),
            "logits" => return Ok(NodeId::Logits),
            _ => {}
        }
        if let Some(rest) = label.strip_prefix('m') {
            return Ok(NodeId::Mlp {
                layer: rest.parse().map_err(|_| bad())?,
            });
        }
        let rest = label.strip_prefix('a').ok_or_else(bad)?;
        let (l, h) = rest.split_once(".h").ok_or_else(bad)?;
        Ok(NodeId::Head {
            layer: l.parse().map_err(|_| bad())?,
            head: h.parse().map_err(|_| bad())?,
        })
    }

    pub fn is_component(&self) -> bool {
        matches!(self, NodeId::Head { .. } | NodeId::Mlp { .. })
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Channel {
    Q,
    K,
    V,
    Direct,
}

impl Channel {
    pub fn label(&self) -> &'static str {
        match self {
            Channel::Q => "q",
            Channel::K => "k",
            Channel::V => "v",
            Channel::Direct => "direct",
        }
    }

    pub fn parse(s: &str) -> Result<Channel> {
        Ok(match s {
            "q" => Channel::Q,
            "k" => Channel::K,
            "v" => Channel::V,
            "direct" => Channel::Direct,
            _ => return Err(CmcError::Unknown(format!("channel {s:?}"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EdgeId {
    pub source: NodeId,
    pub destination: NodeId,
    pub channel: Channel,
}

impl fmt::Display for EdgeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}->{}[{}]", self.source, self.destination, self.channel.label())
    }
}

/// An input channel of a destination node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InputChannel {
    pub node: NodeId,
    pub channel: Channel,
}

#[derive(Debug, Clone)]
pub struct ComputationGraph {
    n_layers: usize,
    n_heads: usize,
    /// Topological order: Input, per layer (heads, mlp), Logits.
    nodes: Vec<NodeId>,
    node_index: HashMap<NodeId, usize>,
    channels: Vec<InputChannel>,
    channel_edges: Vec<Range<usize>>,
    edges: Vec<EdgeId>,
    edge_source: Vec<usize>,
    edge_channel: Vec<usize>,
    edge_index: HashMap<EdgeId, usize>,
}

/// Closed-form edge count for a graph with `n_layers` layers of `n_heads`
/// heads.
pub fn edge_count(n_layers: usize, n_heads: usize) -> usize {
    let (l_total, h) = (n_layers, n_heads);
    let into_heads: usize = (0..l_total).map(|l| 1 + l * (h + 1)).sum::<usize>() * 3 * h;
    let into_mlps: usize = (0..l_total).map(|l| 1 + (l + 1) * h + l).sum();
    let into_logits = 1 + l_total * h + l_total;
    into_heads + into_mlps + into_logits
}

impl ComputationGraph {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        let mut nodes = vec![NodeId::Input];
        for layer in 0..n_layers {
            nodes.extend((0..n_heads).map(|head| NodeId::Head { layer, head }));
            nodes.push(NodeId::Mlp { layer });
        }
        nodes.push(NodeId::Logits);
        let node_index: HashMap<NodeId, usize> =
            nodes.iter().enumerate().map(|(i, n)| (*n, i)).collect();

        let mut channels = Vec::new();
        let mut channel_edges = Vec::new();
        let mut edges = Vec::with_capacity(edge_count(n_layers, n_heads));
        let mut edge_source = Vec::with_capacity(edges.capacity());
        let mut edge_channel = Vec::with_capacity(edges.capacity());

        let mut add_channel = |dest: NodeId, channel: Channel, sources: &[usize]| {
            let ci = channels.len();
            channels.push(InputChannel { node: dest, channel });
            let start = edges.len();
            for &s in sources {
                edges.push(EdgeId {
                    source: nodes[s],
                    destination: dest,
                    channel,
                });
                edge_source.push(s);
                edge_channel.push(ci);
            }
            channel_edges.push(start..edges.len());
        };

        let mut upstream: Vec<usize> = vec![0];
        for layer in 0..n_layers {
            for head in 0..n_heads {
                for ch in [Channel::Q, Channel::K, Channel::V] {
                    add_channel(NodeId::Head { layer, head }, ch, &upstream);
                }
            }
            let mut mlp_sources = upstream.clone();
            mlp_sources.extend((0..n_heads).map(|head| node_index[&NodeId::Head { layer, head }]));
            add_channel(NodeId::Mlp { layer }, Channel::Direct, &mlp_sources);
            upstream = mlp_sources;
            upstream.push(node_index[&NodeId::Mlp { layer }]);
        }
        add_channel(NodeId::Logits, Channel::Direct, &upstream);

        let edge_index = edges.iter().enumerate().map(|(i, e)| (*e, i)).collect();
        Self {
            n_layers,
            n_heads,
            nodes,
            node_index,
            channels,
            channel_edges,
            edges,
            edge_source,
            edge_channel,
            edge_index,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    /// Nodes that write to the residual stream, in topological order.
    pub fn output_nodes(&self) -> &[NodeId] {
        &self.nodes[..self.nodes.len() - 1]
    }

    pub fn components(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.iter().copied().filter(NodeId::is_component)
    }

    pub fn node_index(&self, node: NodeId) -> Result<usize> {
        self.node_index
            .get(&node)
            .copied()
            .ok_or_else(|| CmcError::Unknown(format!("node {node}")))
    }

    pub fn channels(&self) -> &[InputChannel] {
        &self.channels
    }

    pub fn channel_index(&self, node: NodeId, channel: Channel) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c.node == node && c.channel == channel)
            .ok_or_else(|| CmcError::Unknown(format!("channel {node}[{}]", channel.label())))
    }

    /// Edge indices feeding channel `ci`, in canonical source order.
    pub fn channel_edges(&self, ci: usize) -> Range<usize> {
        self.channel_edges[ci].clone()
    }

    pub fn edges(&self) -> &[EdgeId] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Index of the source node (into [`Self::nodes`]) of edge `e`.
    pub fn edge_source(&self, e: usize) -> usize {
        self.edge_source[e]
    }

    pub fn edge_channel(&self, e: usize) -> usize {
        self.edge_channel[e]
    }

    pub fn edge_index(&self, edge: &EdgeId) -> Result<usize> {
        self.edge_index
            .get(edge)
            .copied()
            .ok_or_else(|| CmcError::Unknown(format!("edge {edge}")))
    }

    /// Indices of edges touching `node` as source or destination.
    pub fn incident_edges(&self, node: NodeId) -> Vec<usize> {
        self.edges
            .iter()
            .enumerate()
            .filter(|(_, e)| e.source == node || e.destination == node)
            .map(|(i, _)| i)
            .collect()
    }
}

/// One score per graph edge, aligned with [`ComputationGraph::edges`].
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScoreMap {
    scores: Vec<f64>,
}

impl EdgeScoreMap {
    pub fn new(graph: &ComputationGraph, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != graph.len() {
            return Err(CmcError::Shape {
                op: "edge_scores",
                left: vec![graph.len()],
                right: vec![scores.len()],
            });
        }
        Ok(Self { scores })
    }

    pub fn zeros(graph: &ComputationGraph) -> Self {
        Self {
            scores: vec![0.0; graph.len()],
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.scores
    }

    pub fn get(&self, graph: &ComputationGraph, edge: &EdgeId) -> Result<f64> {
        Ok(self.scores[graph.edge_index(edge)?])
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn write_csv<W: Write>(&self, graph: &ComputationGraph, mut w: W) -> Result<()> {
        writeln!(w, "src,dst,channel,score")?;
        for (e, s) in graph.edges().iter().zip(&self.scores) {
            writeln!(w, "{},{},{},{}", e.source, e.destination, e.channel.label(), s)?;
        }
        Ok(())
    }

    pub fn read_csv(graph: &ComputationGraph, text: &str) -> Result<Self> {
        let mut scores = vec![f64::NAN; graph.len()];
        let mut seen = 0usize;
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |what: &str| CmcError::Format(format!("edge csv line {}: {what}", lineno + 1));
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 4 {
                return Err(bad("expected 4 columns"));
            }
            let edge = EdgeId {
                source: NodeId::parse(cols[0])?,
                destination: NodeId::parse(cols[1])?,
                channel: Channel::parse(cols[2])?,
            };
            let i = graph.edge_index(&edge)?;
            if !scores[i].is_nan() {
                return Err(bad("duplicate edge"));
            }
            scores[i] = cols[3].parse().map_err(|_| bad("bad score"))?;
            seen += 1;
        }
        if seen != graph.len() {
            return Err(CmcError::Format(format!(
                "edge csv covers {seen} of {} edges",
                graph.len()
            )));
        }
        Ok(Self { scores })
    }
}

/// A set of graph edges, optionally with an ordered component list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CircuitSpec {
    mask: Vec<bool>,
    pub components: Vec<NodeId>,
}

impl CircuitSpec {
    pub fn empty(graph: &ComputationGraph) -> Self {
        Self {
            mask: vec![false; graph.len()],
            components: Vec::new(),
        }
    }

    pub fn full(graph: &ComputationGraph) -> Self {
        Self {
            mask: vec![true; graph.len()],
            components: Vec::new(),
        }
    }

    pub fn from_indices(graph: &ComputationGraph, edges: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut c = Self::empty(graph);
        for e in edges {
            if e >= graph.len() {
                return Err(CmcError::Unknown(format!("edge index {e}")));
            }
            c.mask[e] = true;
        }
        Ok(c)
    }

    /// Every edge incident to any of `nodes`.
    pub fn incident_to(graph: &ComputationGraph, nodes: &[NodeId]) -> Self {
        let mut c = Self::empty(graph);
        for (i, e) in graph.edges().iter().enumerate() {
            if nodes.contains(&e.source) || nodes.contains(&e.destination) {
                c.mask[i] = true;
            }
        }
        c.components = nodes.to_vec();
        c
    }

    pub fn contains(&self, e: usize) -> bool {
        self.mask[e]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.mask.len()).filter(|&i| self.mask[i]).collect()
    }

    pub fn complement(&self) -> Self {
        Self {
            mask: self.mask.iter().map(|m| !m).collect(),
            components: Vec::new(),
        }
    }
}

/// Edge indices ordered by descending absolute score, ties in canonical
/// edge order.
pub fn rank_edges(scores: &EdgeScoreMap) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .abs()
            .total_cmp(&scores.scores[a].abs())
            .then(a.cmp(&b))
    });
    order
}

/// The `k` edges with the largest absolute score.
pub fn top_k_edges(graph: &ComputationGraph, scores: &EdgeScoreMap, k: usize) -> Result<CircuitSpec> {
    if k > graph.len() {
        return Err(CmcError::Unknown(format!("k = {k} exceeds {} edges", graph.len())));
    }
    CircuitSpec::from_indices(graph, rank_edges(scores).into_iter().take(k))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: NodeId,
    pub score: f64,
}

/// Components sorted by descending score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRanking {
    pub entries: Vec<ComponentScore>,
}

impl ComponentRanking {
    pub fn top(&self, n: usize) -> Vec<NodeId> {
        self.entries.iter().take(n).map(|c| c.component).collect()
    }

    pub fn rank_of(&self, node: NodeId) -> Option<usize> {
        self.entries.iter().position(|c| c.component == node)
    }

    pub fn score_of(&self, node: NodeId) -> Option<f64> {
        self.entries.iter().find(|c| c.component == node).map(|c| c.score)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "rank,component,score")?;
        for (i, c) in self.entries.iter().enumerate() {
            writeln!(w, "{},{},{}", i + 1, c.component, c.score)?;
        }
        Ok(())
    }

    pub fn read_csv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(CmcError::Format(format!("ranking csv line {}", lineno + 1)));
            }
            entries.push(ComponentScore {
                component: NodeId::parse(cols[1])?,
                score: cols[2]
                    .parse()
                    .map_err(|_| CmcError::Format(format!("ranking csv line {}", lineno + 1)))?,
            });
        }
        Ok(Self { entries })
    }
}

/// Per component, the sum of absolute scores over every incident edge.
/// Sorted descending, ties in topological node order.
pub fn edges_to_components(graph: &ComputationGraph, scores: &EdgeScoreMap) -> ComponentRanking {
    let mut totals = vec![0.0; graph.nodes().len()];
    for (i, s) in scores.values().iter().enumerate() {
        let a = s.abs();
        totals[graph.edge_source(i)] += a;
        let dest = graph.channels()[graph.edge_channel(i)].node;
        totals[graph.node_index[&dest]] += a;
    }
    let mut entries: Vec<(usize, ComponentScore)> = graph
        .nodes()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.is_component())
        .map(|(i, n)| {
            (
                i,
                ComponentScore {
                    component: *n,
                    score: totals[i],
                },
            )
        })
        .collect();
    entries.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    ComponentRanking {
        entries: entries.into_iter().map(|(_, c)| c).collect(),
    }
}
