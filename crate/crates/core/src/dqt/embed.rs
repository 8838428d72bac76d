//! Deterministic stand-in node featurizer.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::numeric::Tensor;
use crate::rng;
use crate::smiles::MolecularGraph;

/// Hashes (element, degree, aromatic-bond flag) with `seed` into a unit
/// vector per node; atoms with the same local context share a row.
pub fn toy_node_embed(graph: &MolecularGraph, d_node: usize, seed: u64) -> Tensor<f32> {
    let rows: Vec<Vec<f32>> = (0..graph.node_count())
        .map(|i| {
            let key = format!(
                "{}|{}|{}",
                graph.node_elements()[i],
                graph.degree(i),
                u8::from(graph.touches_aromatic(i))
            );
            let mut r = rng::substream(seed, rng::NODE_EMBED, rng::fnv1a(key.as_bytes()));
            let v: Vec<f64> = (0..d_node).map(|_| r.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.iter().map(|x| (x / norm) as f32).collect()
        })
        .collect();
    if rows.is_empty() {
        return Tensor::zeros(&[0, d_node]);
    }
    Tensor::from_rows(&rows).expect("equal widths")
}
