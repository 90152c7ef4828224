//! L1-norm filter saliency.

use crate::error::{Error, Result};
use crate::graph::{LayerKind, ModelGraph};
use crate::tensor::Tensor;

/// Per-filter saliencies of one conv-like layer, in filter index order.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SaliencyTable {
    pub layer: String,
    pub values: Vec<f64>,
}

impl SaliencyTable {
    /// Indices of the `count` least salient filters, ascending. Ties break
    /// toward the lower filter index, making selections deterministic.
    pub fn least_salient(&self, count: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.values.len()).collect();
        order.sort_by(|&a, &b| {
            self.values[a]
                .partial_cmp(&self.values[b])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut picked: Vec<usize> = order.into_iter().take(count).collect();
        picked.sort_unstable();
        picked
    }
}

fn row_l1(weight: &Tensor, row: usize) -> Result<f64> {
    let per_row = weight.numel() / weight.shape()[0];
    let w = weight.as_f32()?;
    Ok(w[row * per_row..(row + 1) * per_row]
        .iter()
        .map(|&v| f64::from(v).abs())
        .sum())
}

/// Saliency of every output filter of `layer`: the L1 norm of its kernel
/// slice, bias excluded. `layer` is a conv node id or `<node>#<gate>` for
/// one GRU gate.
pub fn saliency(graph: &ModelGraph, layer: &str) -> Result<SaliencyTable> {
    let (node_id, gate) = match layer.split_once('#') {
        Some((n, g)) => (n, Some(g)),
        None => (layer, None),
    };
    let node = graph.node(node_id)?;
    let weight = match (&node.kind, gate) {
        (LayerKind::Conv2d(_), None) => &node.params["weight"],
        (LayerKind::ConvGru(_), Some(g)) => node
            .params
            .get(&format!("weight_{g}"))
            .ok_or_else(|| Error::UnknownNode(format!("{node_id}#{g}")))?,
        _ => {
            return Err(Error::InvalidConfig(format!(
                "layer `{layer}` is {}, not a conv",
                node.kind.name()
            )))
        }
    };
    let rows = weight.shape()[0];
    let mut values = Vec::with_capacity(rows);
    for k in 0..rows {
        values.push(row_l1(weight, k)?);
    }
    Ok(SaliencyTable {
        layer: layer.to_string(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, GraphInput, LayerNode};
    use std::collections::BTreeMap;

    fn conv_graph(weight: Tensor, out_c: usize, in_c: usize, k: usize) -> ModelGraph {
        let mut params = BTreeMap::new();
        params.insert("weight".to_string(), weight);
        ModelGraph {
            name: "t".into(),
            inputs: vec![GraphInput {
                name: "x".into(),
                channels: in_c,
                height: 8,
                width: 8,
            }],
            nodes: vec![LayerNode {
                id: "c".into(),
                kind: LayerKind::Conv2d(ConvAttrs {
                    in_channels: in_c,
                    out_channels: out_c,
                    kernel: (k, k),
                    stride: (1, 1),
                    padding: (k / 2, k / 2),
                    bias: false,
                }),
                inputs: vec!["x".into()],
                params,
            }],
            outputs: vec!["c".into()],
            quant: None,
        }
    }

    /// Filter weights [[1,−1],[2,0]] → saliency 4.
    #[test]
    fn l1_of_small_filter() {
        let w = Tensor::from_f32(vec![1, 1, 2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let g = conv_graph(w, 1, 1, 2);
        let t = saliency(&g, "c").unwrap();
        assert_eq!(t.values, vec![4.0]);
    }

    #[test]
    fn zero_filter_ranks_least_salient() {
        let w = Tensor::from_f32(
            vec![3, 1, 1, 1],
            vec![0.5, 0.0, -0.25],
        )
        .unwrap();
        let g = conv_graph(w, 3, 1, 1);
        let t = saliency(&g, "c").unwrap();
        assert_eq!(t.values[1], 0.0);
        assert_eq!(t.least_salient(1), vec![1]);
        assert_eq!(t.least_salient(2), vec![1, 2]);
    }

    /// Random 8-filter conv: ordering matches an independent recomputation.
    #[test]
    fn ordering_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let data: Vec<f32> = (0..8 * 3 * 3 * 3).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let w = Tensor::from_f32(vec![8, 3, 3, 3], data.clone()).unwrap();
        let g = conv_graph(w, 8, 3, 3);
        let t = saliency(&g, "c").unwrap();

        let per = 3 * 3 * 3;
        let brute: Vec<f64> = (0..8)
            .map(|k| data[k * per..(k + 1) * per].iter().map(|&v| f64::from(v).abs()).sum())
            .collect();
        for (a, b) in t.values.iter().zip(&brute) {
            assert!((a - b).abs() < 1e-12);
        }
        let mut expect: Vec<usize> = (0..8).collect();
        expect.sort_by(|&a, &b| brute[a].partial_cmp(&brute[b]).unwrap().then(a.cmp(&b)));
        assert_eq!(t.least_salient(8), {
            let mut e = expect.clone();
            e.sort_unstable();
            e
        });
        assert_eq!(t.least_salient(3), {
            let mut e = expect[..3].to_vec();
            e.sort_unstable();
            e
        });
    }

    #[test]
    fn ties_break_to_lower_index() {
        let w = Tensor::from_f32(vec![4, 1, 1, 1], vec![1.0, -1.0, 1.0, 1.0]).unwrap();
        let g = conv_graph(w, 4, 1, 1);
        let t = saliency(&g, "c").unwrap();
        assert_eq!(t.least_salient(2), vec![0, 1]);
    }

    #[test]
    fn scaling_weights_scales_saliency() {
        let w = Tensor::from_f32(vec![2, 1, 1, 1], vec![0.5, 2.0]).unwrap();
        let g = conv_graph(w, 2, 1, 1);
        let base = saliency(&g, "c").unwrap();
        let w2 = Tensor::from_f32(vec![2, 1, 1, 1], vec![1.5, 6.0]).unwrap();
        let g2 = conv_graph(w2, 2, 1, 1);
        let scaled = saliency(&g2, "c").unwrap();
        for (a, b) in base.values.iter().zip(&scaled.values) {
            assert!((b - 3.0 * a).abs() < 1e-12);
        }
        assert_eq!(base.least_salient(1), scaled.least_salient(1));
    }

    #[test]
    fn non_conv_layer_is_rejected() {
        let g = crate::zoo::build(&crate::zoo::ZooSpec::preset("toy-residual").unwrap()).unwrap();
        assert!(saliency(&g, "b1.add").is_err());
        assert!(saliency(&g, "nope").is_err());
    }

    #[test]
    fn gru_gates_have_independent_tables() {
        let g = crate::zoo::build(&crate::zoo::ZooSpec::preset("toy-gru").unwrap()).unwrap();
        let z = saliency(&g, "gru#z").unwrap();
        let h = saliency(&g, "gru#h").unwrap();
        assert_eq!(z.values.len(), 6);
        assert_eq!(h.values.len(), 6);
        assert_ne!(z.values, h.values);
    }
}
