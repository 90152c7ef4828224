//! Structural graph surgery and its zero-masking twin.
//!
//! A pruning plan names the filter rows to remove per layer. Surgery rebuilds
//! the graph with those channels physically gone: producer rows, bias
//! entries, norm affine channels, and every consumer's input slices. Masking
//! zeroes the same weights in place instead, leaving shapes intact — the two
//! must agree on all surviving outputs, which is the correctness oracle for
//! the whole dependency analysis.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph, GRU_GATES};
use crate::tensor::Tensor;

use super::budget::PruningPlan;
use super::provenance::{row_layers, Provenance};

/// Maps the plan's per-layer drop lists to a set of provenance classes,
/// checking index validity, pinning, and coupling consistency (a class must
/// be dropped by all of its member rows or none).
pub(crate) fn dropped_classes(
    graph: &ModelGraph,
    prov: &Provenance,
    drops: &BTreeMap<String, Vec<usize>>,
) -> Result<HashSet<usize>> {
    let layers = row_layers(graph);
    let by_key: HashMap<&str, &super::provenance::RowLayer> =
        layers.iter().map(|l| (l.key.as_str(), l)).collect();
    let mut dropped: HashSet<usize> = HashSet::new();
    let mut listed: HashSet<(String, usize)> = HashSet::new();
    for (layer, rows) in drops {
        let info = by_key
            .get(layer.as_str())
            .ok_or_else(|| Error::InvalidPlan(format!("unknown layer `{layer}`")))?;
        let mut seen = HashSet::new();
        for &k in rows {
            if k >= info.rows {
                return Err(Error::InvalidPlan(format!(
                    "filter {k} out of range for `{layer}` ({} filters)",
                    info.rows
                )));
            }
            if !seen.insert(k) {
                return Err(Error::InvalidPlan(format!(
                    "filter {k} listed twice for `{layer}`"
                )));
            }
            let class = prov.class_of_row(layer, k)?;
            if prov.classes()[class].pinned {
                return Err(Error::InvalidPlan(format!(
                    "filter {k} of `{layer}` feeds a graph input/output and cannot be pruned"
                )));
            }
            dropped.insert(class);
            listed.insert((layer.clone(), k));
        }
    }
    for &class in &dropped {
        for (layer, row) in &prov.classes()[class].rows {
            if !listed.contains(&(layer.clone(), *row)) {
                return Err(Error::InvalidPlan(format!(
                    "coupled filter {row} of `{layer}` missing from the plan"
                )));
            }
        }
    }
    Ok(dropped)
}

/// Kept channel indices per value under the dropped classes; errors if any
/// value loses every channel (the plan would disconnect the graph).
fn keep_maps(
    graph: &ModelGraph,
    prov: &Provenance,
    dropped: &HashSet<usize>,
) -> Result<HashMap<String, Vec<usize>>> {
    let mut keep = HashMap::new();
    for inp in &graph.inputs {
        keep.insert(inp.name.clone(), (0..inp.channels).collect::<Vec<_>>());
    }
    for node in &graph.nodes {
        let kept = prov.keep_channels(&node.id, dropped)?;
        if kept.is_empty() {
            return Err(Error::InvalidPlan(format!(
                "plan would disconnect the graph: `{}` loses all channels",
                node.id
            )));
        }
        keep.insert(node.id.clone(), kept);
    }
    Ok(keep)
}

fn gather_rows(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let per = t.numel() / t.shape()[0];
    let src = t.as_f32()?;
    let mut out = Vec::with_capacity(rows.len() * per);
    for &r in rows {
        out.extend_from_slice(&src[r * per..(r + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = rows.len();
    Tensor::from_f32(shape, out)
}

fn slice_conv_weight(w: &Tensor, rows: &[usize], cols: &[usize]) -> Result<Tensor> {
    let (i, kh, kw) = (w.shape()[1], w.shape()[2], w.shape()[3]);
    let src = w.as_f32()?;
    let mut out = Vec::with_capacity(rows.len() * cols.len() * kh * kw);
    for &r in rows {
        for &c in cols {
            let base = (r * i + c) * kh * kw;
            out.extend_from_slice(&src[base..base + kh * kw]);
        }
    }
    Tensor::from_f32(vec![rows.len(), cols.len(), kh, kw], out)
}

/// Applies a pruning plan, returning the smaller graph. The input graph is
/// left untouched; the result passes full validation.
pub fn apply_plan(graph: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    if graph.quant.is_some() {
        return Err(Error::InvalidConfig("cannot prune a quantized graph".into()));
    }
    let prov = Provenance::build(graph)?;
    let dropped = dropped_classes(graph, &prov, &plan.drops)?;
    let keep = keep_maps(graph, &prov, &dropped)?;

    let mut out = graph.clone();
    for node in &mut out.nodes {
        let in_keep: Vec<Vec<usize>> = node
            .inputs
            .iter()
            .map(|v| keep[v.as_str()].clone())
            .collect();
        match &mut node.kind {
            LayerKind::Conv2d(attrs) => {
                let rows = &keep[node.id.as_str()];
                if rows.is_empty() {
                    return Err(Error::InvalidPlan(format!("`{}` would be emptied", node.id)));
                }
                let cols = &in_keep[0];
                let w = slice_conv_weight(&node.params["weight"], rows, cols)?;
                node.params.insert("weight".to_string(), w);
                if attrs.bias {
                    let b = gather_rows(&node.params["bias"], rows)?;
                    node.params.insert("bias".to_string(), b);
                }
                attrs.out_channels = rows.len();
                attrs.in_channels = cols.len();
            }
            LayerKind::InstanceNorm { channels } => {
                let ch = &in_keep[0];
                for pname in ["gamma", "beta"] {
                    let p = gather_rows(&node.params[pname], ch)?;
                    node.params.insert(pname.to_string(), p);
                }
                *channels = ch.len();
            }
            LayerKind::ConvGru(attrs) => {
                let h_keep = &keep[node.id.as_str()];
                let x_keep = &in_keep[1];
                let h_old = attrs.hidden_channels;
                let mut cols: Vec<usize> = h_keep.clone();
                cols.extend(x_keep.iter().map(|&c| h_old + c));
                for gate in GRU_GATES {
                    let wk = format!("weight_{gate}");
                    let bk = format!("bias_{gate}");
                    let w = slice_conv_weight(&node.params[&wk], h_keep, &cols)?;
                    let b = gather_rows(&node.params[&bk], h_keep)?;
                    node.params.insert(wk, w);
                    node.params.insert(bk, b);
                }
                attrs.hidden_channels = h_keep.len();
                attrs.input_channels = x_keep.len();
            }
            LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Tanh | LayerKind::Add | LayerKind::Concat => {}
        }
    }
    out.validate()?;
    Ok(out)
}

/// Parameter count the graph would have after applying the given drops,
/// computed without touching any tensor data.
pub(crate) fn simulate_params(
    graph: &ModelGraph,
    prov: &Provenance,
    drops: &BTreeMap<String, Vec<usize>>,
) -> Result<usize> {
    let dropped = dropped_classes(graph, prov, drops)?;
    let keep = keep_maps(graph, prov, &dropped)?;
    let mut total = 0usize;
    for node in &graph.nodes {
        match &node.kind {
            LayerKind::Conv2d(attrs) => {
                let rows = keep[node.id.as_str()].len();
                let cols = keep[node.inputs[0].as_str()].len();
                total += rows * cols * attrs.kernel.0 * attrs.kernel.1;
                if attrs.bias {
                    total += rows;
                }
            }
            LayerKind::InstanceNorm { .. } => {
                total += 2 * keep[node.inputs[0].as_str()].len();
            }
            LayerKind::ConvGru(attrs) => {
                let h = keep[node.id.as_str()].len();
                let x = keep[node.inputs[1].as_str()].len();
                total += 3 * (h * (h + x) * attrs.kernel.0 * attrs.kernel.1 + h);
            }
            _ => {}
        }
    }
    Ok(total)
}

fn zero_rows(node: &mut crate::graph::LayerNode, wk: &str, bk: Option<&str>, rows: &[usize]) -> Result<()> {
    let w = node.params.get_mut(wk).unwrap();
    let per = w.numel() / w.shape()[0];
    let data = w.as_f32_mut()?;
    for &r in rows {
        data[r * per..(r + 1) * per].fill(0.0);
    }
    if let Some(bk) = bk {
        if let Some(b) = node.params.get_mut(bk) {
            let data = b.as_f32_mut()?;
            for &r in rows {
                data[r] = 0.0;
            }
        }
    }
    Ok(())
}

fn zero_cols(node: &mut crate::graph::LayerNode, wk: &str, cols: &[usize]) -> Result<()> {
    let w = node.params.get_mut(wk).unwrap();
    let (o, i, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let data = w.as_f32_mut()?;
    for r in 0..o {
        for &c in cols {
            let base = (r * i + c) * kh * kw;
            data[base..base + kh * kw].fill(0.0);
        }
    }
    Ok(())
}

/// Zero-masked twin of [`apply_plan`]: same weights set to zero instead of
/// removed, shapes untouched. Surviving output channels must match surgery
/// exactly (up to float roundoff).
pub fn masked_variant(graph: &ModelGraph, plan: &PruningPlan) -> Result<ModelGraph> {
    let prov = Provenance::build(graph)?;
    let dropped = dropped_classes(graph, &prov, &plan.drops)?;
    let mut out = graph.clone();
    for node in &mut out.nodes {
        let input_drops: Vec<Vec<usize>> = node
            .inputs
            .iter()
            .map(|v| {
                let n = prov.value_channels(v)?;
                Ok((0..n)
                    .filter(|&c| dropped.contains(&prov.class_of_slot(v, c).unwrap()))
                    .collect())
            })
            .collect::<Result<_>>()?;
        match &node.kind {
            LayerKind::Conv2d(_) => {
                let n = prov.value_channels(&node.id)?;
                let rows: Vec<usize> = (0..n)
                    .filter(|&k| dropped.contains(&prov.class_of_slot(&node.id, k).unwrap()))
                    .collect();
                zero_rows(node, "weight", Some("bias"), &rows)?;
                zero_cols(node, "weight", &input_drops[0])?;
            }
            LayerKind::InstanceNorm { .. } => {
                zero_rows(node, "gamma", None, &input_drops[0])?;
                zero_rows(node, "beta", None, &input_drops[0])?;
            }
            LayerKind::ConvGru(attrs) => {
                let rows: Vec<usize> = (0..attrs.hidden_channels)
                    .filter(|&k| dropped.contains(&prov.class_of_slot(&node.id, k).unwrap()))
                    .collect();
                let mut cols: Vec<usize> = input_drops[0].clone();
                cols.extend(input_drops[1].iter().map(|&c| attrs.hidden_channels + c));
                for gate in GRU_GATES {
                    let wk = format!("weight_{gate}");
                    zero_rows(node, &wk, Some(&format!("bias_{gate}")), &rows)?;
                    zero_cols(node, &wk, &cols)?;
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Masks `rows` of a single layer for a sensitivity probe: the rows and
/// their biases go to zero, then exact zero-ness is propagated forward —
/// through norms by zeroing their affine entries, through zero-preserving
/// activations, through Adds only when every input is dead — zeroing
/// consumer input slices along the way. The graph keeps its shape.
pub fn probe_masked(graph: &ModelGraph, layer: &str, rows: &[usize]) -> Result<ModelGraph> {
    let shapes = graph.infer_shapes()?;
    let channel_count = |value: &str| -> Result<usize> {
        if let Some(inp) = graph.input(value) {
            return Ok(inp.channels);
        }
        shapes
            .get(value)
            .map(|&(c, _, _)| c)
            .ok_or_else(|| Error::UnknownNode(value.to_string()))
    };
    let mut out = graph.clone();
    let mut dead: HashMap<String, HashSet<usize>> = HashMap::new();
    let (target_node, target_gate) = match layer.split_once('#') {
        Some((n, g)) => (n.to_string(), Some(g.to_string())),
        None => (layer.to_string(), None),
    };
    // Walk in topological order; the masked layer seeds the dead set.
    for idx in 0..out.nodes.len() {
        let node = &mut out.nodes[idx];
        let in_dead: Vec<HashSet<usize>> = node
            .inputs
            .iter()
            .map(|v| dead.get(v).cloned().unwrap_or_default())
            .collect();
        let mut own_dead: HashSet<usize> = HashSet::new();
        match node.kind.clone() {
            LayerKind::Conv2d(_) => {
                if !in_dead[0].is_empty() {
                    let cols: Vec<usize> = in_dead[0].iter().copied().collect();
                    zero_cols(node, "weight", &cols)?;
                }
                if node.id == target_node && target_gate.is_none() {
                    zero_rows(node, "weight", Some("bias"), rows)?;
                    own_dead = rows.iter().copied().collect();
                }
            }
            LayerKind::InstanceNorm { .. } => {
                if !in_dead[0].is_empty() {
                    let ch: Vec<usize> = in_dead[0].iter().copied().collect();
                    zero_rows(node, "gamma", None, &ch)?;
                    zero_rows(node, "beta", None, &ch)?;
                }
                own_dead = in_dead[0].clone();
            }
            LayerKind::Relu | LayerKind::Tanh => {
                own_dead = in_dead[0].clone();
            }
            LayerKind::Sigmoid => {} // σ(0) = 0.5: zero-ness does not survive
            LayerKind::Add => {
                own_dead = in_dead[0].clone();
                for d in &in_dead[1..] {
                    own_dead = own_dead.intersection(d).copied().collect();
                }
            }
            LayerKind::Concat => {
                let mut off = 0usize;
                for (v, d) in node.inputs.clone().iter().zip(&in_dead) {
                    let c = channel_count(v)?;
                    own_dead.extend(d.iter().map(|&k| off + k));
                    off += c;
                }
            }
            LayerKind::ConvGru(attrs) => {
                let mut cols: Vec<usize> = in_dead[0].iter().copied().collect();
                cols.extend(in_dead[1].iter().map(|&c| attrs.hidden_channels + c));
                if !cols.is_empty() {
                    for gate in GRU_GATES {
                        zero_cols(node, &format!("weight_{gate}"), &cols)?;
                    }
                }
                if node.id == target_node {
                    if let Some(gate) = &target_gate {
                        zero_rows(node, &format!("weight_{gate}"), Some(&format!("bias_{gate}")), rows)?;
                    }
                }
                // A dead hidden channel stays live through the cell: the
                // update gate resets to σ(0) = 0.5 and mixes in h̃.
            }
        }
        if !own_dead.is_empty() {
            dead.insert(node.id.clone(), own_dead);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine;
    use crate::graph::{ConvAttrs, GraphInput, LayerNode};
    use crate::pruning::budget::PruningPlan;
    use crate::zoo;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(name: &str) -> ModelGraph {
        zoo::build(&zoo::ZooSpec::preset(name).unwrap()).unwrap()
    }

    fn plan_of(drops: &[(&str, &[usize])]) -> PruningPlan {
        PruningPlan {
            global_rate: 0.0,
            p_max: 0.8,
            weighting: crate::pruning::budget::Weighting::Direct,
            layer_rates: Vec::new(),
            groups: Vec::new(),
            drops: drops
                .iter()
                .map(|(l, r)| (l.to_string(), r.to_vec()))
                .collect(),
        }
    }

    fn random_inputs(graph: &ModelGraph, seed: u64) -> BTreeMap<String, Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = BTreeMap::new();
        for inp in &graph.inputs {
            let n = inp.channels * inp.height * inp.width;
            let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            m.insert(
                inp.name.clone(),
                Tensor::from_f32(vec![1, inp.channels, inp.height, inp.width], data).unwrap(),
            );
        }
        m
    }

    /// Two-conv chain 8→8: pruning 2 filters from conv1 must shrink conv2's
    /// weight to (8, 6, Kh, Kw).
    #[test]
    fn chain_consumer_loses_input_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mk_w = |o: usize, i: usize| {
            Tensor::from_f32(
                vec![o, i, 3, 3],
                (0..o * i * 9).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
            )
            .unwrap()
        };
        let conv = |id: &str, from: &str, i: usize, o: usize, w: Tensor| LayerNode {
            id: id.into(),
            kind: LayerKind::Conv2d(ConvAttrs {
                in_channels: i,
                out_channels: o,
                kernel: (3, 3),
                stride: (1, 1),
                padding: (1, 1),
                bias: true,
            }),
            inputs: vec![from.into()],
            params: [
                ("weight".to_string(), w),
                ("bias".to_string(), Tensor::zeros(crate::tensor::DType::F32, vec![o])),
            ]
            .into_iter()
            .collect(),
        };
        let g = ModelGraph {
            name: "chain".into(),
            inputs: vec![GraphInput {
                name: "x".into(),
                channels: 3,
                height: 8,
                width: 8,
            }],
            nodes: vec![
                conv("conv1", "x", 3, 8, mk_w(8, 3)),
                conv("conv2", "conv1", 8, 8, mk_w(8, 8)),
            ],
            outputs: vec!["conv2".into()],
            quant: None,
        };
        let pruned = apply_plan(&g, &plan_of(&[("conv1", &[2, 5])])).unwrap();
        let w2 = &pruned.node("conv2").unwrap().params["weight"];
        assert_eq!(w2.shape(), &[8, 6, 3, 3]);
        let w1 = &pruned.node("conv1").unwrap().params["weight"];
        assert_eq!(w1.shape(), &[6, 3, 3, 3]);
    }

    /// Pruning a filter whose weights, bias, and consumer slices are already
    /// zero leaves the forward outputs bit-exactly unchanged.
    #[test]
    fn dead_filter_removal_is_bit_exact() {
        let mut g = toy("toy-residual");
        {
            let node = g.nodes.iter_mut().find(|n| n.id == "stem").unwrap();
            let w = node.params.get_mut("weight").unwrap();
            let per = w.numel() / 4;
            w.as_f32_mut().unwrap()[per..2 * per].fill(0.0);
            node.params.get_mut("bias").unwrap().as_f32_mut().unwrap()[1] = 0.0;
        }
        {
            for id in ["b1.conv1", "b1.proj"] {
                let node = g.nodes.iter_mut().find(|n| n.id == id).unwrap();
                zero_cols(node, "weight", &[1]).unwrap();
            }
        }
        let inputs = random_inputs(&g, 7);
        let base = engine::forward(&g, &inputs).unwrap();
        let pruned = apply_plan(&g, &plan_of(&[("stem", &[1])])).unwrap();
        let after = engine::forward(&pruned, &inputs).unwrap();
        for (k, t) in &base {
            assert_eq!(t.as_f32().unwrap(), after[k].as_f32().unwrap());
        }
    }

    #[test]
    fn coupled_drop_requires_all_members() {
        let g = toy("toy-residual");
        let err = apply_plan(&g, &plan_of(&[("b1.conv2", &[0])])).unwrap_err();
        assert!(matches!(err, Error::InvalidPlan(_)), "{err:?}");
        // Listing both members works.
        let ok = apply_plan(&g, &plan_of(&[("b1.conv2", &[0]), ("b1.proj", &[0])]));
        assert!(ok.is_ok(), "{ok:?}");
    }

    #[test]
    fn pinned_head_rejected() {
        let g = toy("toy-residual");
        let err = apply_plan(&g, &plan_of(&[("head", &[0])])).unwrap_err();
        assert!(matches!(err, Error::InvalidPlan(_)));
    }

    #[test]
    fn emptying_a_layer_is_rejected() {
        let g = toy("toy-residual");
        let err = apply_plan(&g, &plan_of(&[("stem", &[0, 1, 2, 3])])).unwrap_err();
        assert!(matches!(err, Error::InvalidPlan(_)), "{err:?}");
    }

    #[test]
    fn gru_surgery_shrinks_gates_and_attrs() {
        let g = toy("toy-gru");
        // The hidden-state class spans ctx_init and all three gates.
        let gate_rows = [
            ("ctx_init", vec![1usize, 4]),
            ("gru#z", vec![1, 4]),
            ("gru#r", vec![1, 4]),
            ("gru#h", vec![1, 4]),
        ];
        let plan = plan_of(
            &gate_rows
                .iter()
                .map(|(l, r)| (*l, r.as_slice()))
                .collect::<Vec<_>>(),
        );
        let pruned = apply_plan(&g, &plan).unwrap();
        let cell = pruned.node("gru").unwrap();
        match &cell.kind {
            LayerKind::ConvGru(a) => {
                assert_eq!(a.hidden_channels, 4);
                assert_eq!(a.input_channels, 5);
            }
            _ => unreachable!(),
        }
        assert_eq!(cell.params["weight_z"].shape(), &[4, 9, 3, 3]);
        assert_eq!(pruned.node("head").unwrap().params["weight"].shape(), &[2, 4, 3, 3]);
        // Simulated count matches the real count.
        let prov = Provenance::build(&g).unwrap();
        assert_eq!(
            simulate_params(&g, &prov, &plan.drops).unwrap(),
            pruned.param_count()
        );
    }

    /// Structural surgery and zero-masking agree on every surviving output
    /// channel for a mixed plan on the residual toy.
    #[test]
    fn masking_matches_surgery_on_residual_toy() {
        let g = toy("toy-residual");
        let plan = plan_of(&[
            ("stem", &[0, 3]),
            ("b1.conv2", &[2]),
            ("b1.proj", &[2]),
            ("down", &[1, 6]),
        ]);
        let inputs = random_inputs(&g, 11);
        let masked = masked_variant(&g, &plan).unwrap();
        let pruned = apply_plan(&g, &plan).unwrap();
        let ym = engine::forward(&masked, &inputs).unwrap();
        let yp = engine::forward(&pruned, &inputs).unwrap();
        for (k, tp) in &yp {
            let (a, b) = (ym[k].as_f32().unwrap(), tp.as_f32().unwrap());
            assert_eq!(a.len(), b.len(), "outputs are pinned, so shapes must agree");
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-6, "masking vs surgery: {x} vs {y}");
            }
        }
    }

    #[test]
    fn simulate_matches_apply_on_zoo() {
        for name in ["fnet", "updatenet"] {
            let g = toy(name);
            let prov = Provenance::build(&g).unwrap();
            // Drop two stem filters (fnet) / two corr1 filters (updatenet):
            // free classes in both graphs.
            let layer = if name == "fnet" { "stem" } else { "corr1" };
            let plan = plan_of(&[(layer, &[0, 1])]);
            let sim = simulate_params(&g, &prov, &plan.drops).unwrap();
            let real = apply_plan(&g, &plan).unwrap().param_count();
            assert_eq!(sim, real, "{name}");
        }
    }
}
