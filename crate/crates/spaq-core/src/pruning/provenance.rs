//! Channel provenance: which output filters must live and die together.
//!
//! Structured pruning removes whole channels, and a channel is rarely owned
//! by a single conv: residual Adds force their producers to share an index
//! space, ConvGRU cells tie the hidden state to every gate, and concats
//! splice several producers into one value. This module computes the
//! equivalence classes of channel "slots" (one slot per channel of every
//! value in the graph) under those constraints, tags each class with the
//! conv rows and norm channels it owns, and marks classes that touch graph
//! inputs or outputs as pinned (never prunable).

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, GRU_GATES};

/// One prunable "row layer": a conv node or a single GRU gate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowLayer {
    /// Plan/profile key: the node id, or `<node>#<gate>` for GRU gates.
    pub key: String,
    /// Owning node id.
    pub node: String,
    /// Gate name for GRU gates, `None` for plain convs.
    pub gate: Option<&'static str>,
    /// Number of output filters (rows).
    pub rows: usize,
    /// Learnable parameters of this layer (weight + bias).
    pub params: usize,
}

/// A pruning equivalence class of channel slots.
#[derive(Debug, Clone, Default)]
pub struct ClassInfo {
    /// Conv/gate rows owned by the class: (row-layer key, row index).
    pub rows: Vec<(String, usize)>,
    /// InstanceNorm affine entries carried along: (norm id, channel).
    pub norms: Vec<(String, usize)>,
    /// True when the class touches a graph input or output; pinned classes
    /// are exempt from pruning to preserve the external interface.
    pub pinned: bool,
}

/// Channel classes for one graph, plus slot lookup tables.
pub struct Provenance {
    classes: Vec<ClassInfo>,
    /// (value id, channel) → class index, for every graph input and node.
    slot_class: HashMap<(String, usize), usize>,
    /// (row-layer key, row) → class index.
    row_class: HashMap<(String, usize), usize>,
    /// Channel count per value (inputs and node outputs).
    channels: HashMap<String, usize>,
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // Deterministic: lower root wins.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Enumerates the graph's row layers in node order (gates in z/r/h order).
pub fn row_layers(graph: &ModelGraph) -> Vec<RowLayer> {
    let mut out = Vec::new();
    for node in &graph.nodes {
        match &node.kind {
            LayerKind::Conv2d(a) => {
                let params: usize = node.params.values().map(|t| t.numel()).sum();
                out.push(RowLayer {
                    key: node.id.clone(),
                    node: node.id.clone(),
                    gate: None,
                    rows: a.out_channels,
                    params,
                });
            }
            LayerKind::ConvGru(a) => {
                for gate in GRU_GATES {
                    let w = node.params[&format!("weight_{gate}")].numel();
                    let b = node.params[&format!("bias_{gate}")].numel();
                    out.push(RowLayer {
                        key: format!("{}#{gate}", node.id),
                        node: node.id.clone(),
                        gate: Some(gate),
                        rows: a.hidden_channels,
                        params: w + b,
                    });
                }
            }
            _ => {}
        }
    }
    out
}

impl Provenance {
    /// Builds channel classes by a single pass over the (topologically
    /// ordered) node list, unifying slots per the layer semantics.
    pub fn build(graph: &ModelGraph) -> Result<Provenance> {
        let shapes = graph.infer_shapes()?;
        let mut channels: HashMap<String, usize> = HashMap::new();
        let mut order: Vec<String> = Vec::new();
        for inp in &graph.inputs {
            channels.insert(inp.name.clone(), inp.channels);
            order.push(inp.name.clone());
        }
        for node in &graph.nodes {
            let (c, _, _) = shapes[&node.id];
            channels.insert(node.id.clone(), c);
            order.push(node.id.clone());
        }

        // Slot layout: contiguous ranges per value, in declaration order.
        let mut base: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for v in &order {
            base.insert(v.clone(), total);
            total += channels[v];
        }
        let slot = |base: &HashMap<String, usize>, v: &str, ch: usize| base[v] + ch;

        let mut uf = UnionFind::new(total);
        for node in &graph.nodes {
            match &node.kind {
                LayerKind::Conv2d(_) => {} // fresh classes for each output row
                LayerKind::InstanceNorm { .. }
                | LayerKind::Relu
                | LayerKind::Sigmoid
                | LayerKind::Tanh => {
                    let src = &node.inputs[0];
                    for k in 0..channels[&node.id] {
                        uf.union(slot(&base, &node.id, k), slot(&base, src, k));
                    }
                }
                LayerKind::Add => {
                    for src in &node.inputs {
                        for k in 0..channels[&node.id] {
                            uf.union(slot(&base, &node.id, k), slot(&base, src, k));
                        }
                    }
                }
                LayerKind::Concat => {
                    let mut off = 0usize;
                    for src in &node.inputs {
                        for k in 0..channels[src] {
                            uf.union(slot(&base, &node.id, off + k), slot(&base, src, k));
                        }
                        off += channels[src];
                    }
                }
                LayerKind::ConvGru(a) => {
                    // h' = (1-z)⊙h + z⊙h̃ is elementwise in the hidden state:
                    // the output channel k is the hidden input channel k.
                    let hidden_src = &node.inputs[0];
                    for k in 0..a.hidden_channels {
                        uf.union(slot(&base, &node.id, k), slot(&base, hidden_src, k));
                    }
                }
            }
        }

        // Collapse roots into dense class indices.
        let mut class_of_root: HashMap<usize, usize> = HashMap::new();
        let mut classes: Vec<ClassInfo> = Vec::new();
        let mut slot_class: HashMap<(String, usize), usize> = HashMap::new();
        for v in &order {
            for k in 0..channels[v] {
                let root = uf.find(slot(&base, v, k));
                let next = classes.len();
                let idx = *class_of_root.entry(root).or_insert_with(|| {
                    classes.push(ClassInfo::default());
                    next
                });
                slot_class.insert((v.clone(), k), idx);
            }
        }

        // Attach row/norm tags and pins.
        let mut row_class: HashMap<(String, usize), usize> = HashMap::new();
        for node in &graph.nodes {
            match &node.kind {
                LayerKind::Conv2d(a) => {
                    for k in 0..a.out_channels {
                        let idx = slot_class[&(node.id.clone(), k)];
                        classes[idx].rows.push((node.id.clone(), k));
                        row_class.insert((node.id.clone(), k), idx);
                    }
                }
                LayerKind::ConvGru(a) => {
                    for k in 0..a.hidden_channels {
                        let idx = slot_class[&(node.id.clone(), k)];
                        for gate in GRU_GATES {
                            let key = format!("{}#{gate}", node.id);
                            classes[idx].rows.push((key.clone(), k));
                            row_class.insert((key, k), idx);
                        }
                    }
                }
                LayerKind::InstanceNorm { channels: c } => {
                    for k in 0..*c {
                        let idx = slot_class[&(node.id.clone(), k)];
                        classes[idx].norms.push((node.id.clone(), k));
                    }
                }
                _ => {}
            }
        }
        for inp in &graph.inputs {
            for k in 0..inp.channels {
                let idx = slot_class[&(inp.name.clone(), k)];
                classes[idx].pinned = true;
            }
        }
        for out in &graph.outputs {
            for k in 0..channels[out] {
                let idx = slot_class[&(out.clone(), k)];
                classes[idx].pinned = true;
            }
        }
        for class in &mut classes {
            class.rows.sort();
            class.norms.sort();
        }

        Ok(Provenance {
            classes,
            slot_class,
            row_class,
            channels,
        })
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class_of_slot(&self, value: &str, ch: usize) -> Result<usize> {
        self.slot_class
            .get(&(value.to_string(), ch))
            .copied()
            .ok_or_else(|| Error::UnknownNode(format!("{value}[{ch}]")))
    }

    pub fn class_of_row(&self, layer: &str, row: usize) -> Result<usize> {
        self.row_class
            .get(&(layer.to_string(), row))
            .copied()
            .ok_or_else(|| Error::InvalidPlan(format!("no filter {row} in layer `{layer}`")))
    }

    pub fn value_channels(&self, value: &str) -> Result<usize> {
        self.channels
            .get(value)
            .copied()
            .ok_or_else(|| Error::UnknownNode(value.to_string()))
    }

    /// A row layer is prunable when every one of its rows sits in an
    /// unpinned class (output heads and input-adjacent rows are exempt).
    pub fn layer_prunable(&self, layer: &RowLayer) -> bool {
        (0..layer.rows).all(|k| {
            self.row_class
                .get(&(layer.key.clone(), k))
                .map(|&c| !self.classes[c].pinned)
                .unwrap_or(false)
        })
    }

    /// Kept channel indices (old positions, ascending) of a value under the
    /// given set of dropped classes.
    pub fn keep_channels(&self, value: &str, dropped: &std::collections::HashSet<usize>) -> Result<Vec<usize>> {
        let n = self.value_channels(value)?;
        Ok((0..n)
            .filter(|&k| !dropped.contains(&self.slot_class[&(value.to_string(), k)]))
            .collect())
    }

    /// Groups unpinned classes by their member-layer signature. Returns, per
    /// group: the sorted member layer keys and the class indices (ordered by
    /// the first member's row index, which is the shared channel index for
    /// aligned producers).
    pub fn coupling_groups(&self) -> BTreeMap<Vec<String>, Vec<usize>> {
        let mut groups: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        for (idx, class) in self.classes.iter().enumerate() {
            if class.pinned || class.rows.is_empty() {
                continue;
            }
            let mut sig: Vec<String> = class.rows.iter().map(|(l, _)| l.clone()).collect();
            sig.sort();
            sig.dedup();
            groups.entry(sig).or_default().push(idx);
        }
        for members in groups.values_mut() {
            members.sort_by_key(|&idx| self.classes[idx].rows[0].1);
        }
        groups
    }
}
