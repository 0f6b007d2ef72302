//! The three modality encoders. Each maps a batch to a `batch × hidden`
//! pooled embedding.

mod batch;
mod geometry;
mod graph;
mod sequence;

use serde::{Deserialize, Serialize};

pub use batch::{
    angle_features, atom_features, distance_basis, Batch, GraphBatch, SequenceBatch, ANGLE_BINS,
    ATOM_FEATURES, BOND_FEATURES, DISTANCE_BASIS,
};
pub use geometry::GeometryEncoder;
pub use graph::GraphEncoder;
pub use sequence::SequenceEncoder;

/// Canonical modality order used by every per-modality list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sequence,
    Graph,
    Geometry,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Sequence, Modality::Graph, Modality::Geometry];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Sequence => "sequence",
            Modality::Graph => "graph",
            Modality::Geometry => "geometry",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{
        embed_conformation, parse_smiles, tokenize_smiles, Conformation, ConformationSource, Molecule,
    };
    use crate::nn::{Mode, ParamStore, Session};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HIDDEN: usize = 16;

    fn session(store: &ParamStore) -> Session<'_> {
        Session::new(store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0))
    }

    fn max_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        assert_eq!(a.dim(), b.dim());
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    fn graph_batch(smiles: &[&str]) -> GraphBatch {
        let gs: Vec<_> = smiles.iter().map(|s| parse_smiles(s).unwrap()).collect();
        let cs: Vec<_> = gs.iter().map(|g| embed_conformation(g, 1)).collect();
        let items: Vec<_> = gs.iter().zip(&cs).collect();
        GraphBatch::new(&items)
    }

    #[test]
    fn single_token_pools_to_its_own_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SequenceEncoder::new(&mut store, &mut rng, HIDDEN, 2, 2, 0.1);
        let t = tokenize_smiles("C").unwrap();
        let batch = SequenceBatch::new(&[&t]).unwrap();
        let mut s = session(&store);
        let pos = enc.positions(&mut s, &batch);
        let pooled = enc.forward(&mut s, &batch);
        assert_eq!(s.tape.value(pos), s.tape.value(pooled));
    }

    #[test]
    fn padding_does_not_change_a_sequence() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SequenceEncoder::new(&mut store, &mut rng, HIDDEN, 2, 2, 0.1);
        let short = tokenize_smiles("CCO").unwrap();
        let long = tokenize_smiles("c1ccccc1CC(=O)O").unwrap();
        let alone = {
            let mut s = session(&store);
            let out = enc.forward(&mut s, &SequenceBatch::new(&[&short]).unwrap());
            s.tape.value(out).clone()
        };
        let mut s = session(&store);
        let out = enc.forward(&mut s, &SequenceBatch::new(&[&long, &short]).unwrap());
        let row = s.tape.value(out).row(1).to_owned().insert_axis(ndarray::Axis(0));
        assert!(max_diff(&alone, &row) < 1e-12);
        assert_eq!(s.tape.shape(out), (2, HIDDEN));
    }

    #[test]
    fn sequence_encoder_is_deterministic_in_eval() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = SequenceEncoder::new(&mut store, &mut rng, HIDDEN, 2, 2, 0.1);
        let t = tokenize_smiles("CC(=O)Nc1ccc(O)cc1").unwrap();
        let batch = SequenceBatch::new(&[&t]).unwrap();
        let run = || {
            let mut s = session(&store);
            let out = enc.forward(&mut s, &batch);
            s.tape.value(out).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lone_atom_sees_no_messages() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = GraphEncoder::new(&mut store, &mut rng, HIDDEN, 3);
        let b = graph_batch(&["O"]);
        let mut s = session(&store);
        let pooled = enc.pooled(&mut s, &b);
        let got = s.tape.value(pooled).clone();

        let lin = |name: &str, x: &Array2<f64>| {
            let w = store.value(store.id(&format!("{name}.weight")).unwrap());
            let bias = store.value(store.id(&format!("{name}.bias")).unwrap());
            (x.dot(w) + bias).mapv(|v| v.max(0.0))
        };
        let mut h = lin("graph.atom_in", &b.atom_features);
        for k in 0..3 {
            let hm = ndarray::concatenate![ndarray::Axis(1), h, Array2::zeros((1, HIDDEN))];
            h = lin(&format!("graph.communicate{k}"), &hm);
        }
        assert!(max_diff(&got, &h) < 1e-12);
    }

    #[test]
    fn disconnected_copies_double_the_pooled_sum() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = GraphEncoder::new(&mut store, &mut rng, HIDDEN, 3);
        let geo = GeometryEncoder::new(&mut store, &mut rng, HIDDEN, 3);
        let one = graph_batch(&["CCO"]);
        let two = graph_batch(&["CCO.CCO"]);
        let mut s = session(&store);
        let a = enc.pooled(&mut s, &one);
        let b = enc.pooled(&mut s, &two);
        let doubled = s.tape.value(a) * 2.0;
        assert!(max_diff(&doubled, s.tape.value(b)) < 1e-9);
        assert!(s.tape.value(a).iter().any(|&v| v > 0.0));

        let g1 = parse_smiles("CCO").unwrap();
        let c1 = embed_conformation(&g1, 1);
        let g2 = parse_smiles("CCO.CCO").unwrap();
        let mut coords = c1.coordinates.clone();
        coords.extend(c1.coordinates.iter().map(|p| [p[0] + 50.0, p[1], p[2]]));
        let c2 = Conformation::new(coords, ConformationSource::Loaded);
        let a = geo.pooled(&mut s, &GraphBatch::new(&[(&g1, &c1)]));
        let b = geo.pooled(&mut s, &GraphBatch::new(&[(&g2, &c2)]));
        let doubled = s.tape.value(a) * 2.0;
        assert!(max_diff(&doubled, s.tape.value(b)) < 1e-9);
    }

    #[test]
    fn graph_pooling_ignores_atom_order() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = GraphEncoder::new(&mut store, &mut rng, HIDDEN, 3);
        let g = parse_smiles("c1ccccc1").unwrap();
        let c = embed_conformation(&g, 0);
        let perm = [3, 1, 5, 0, 2, 4];
        let gp = g.permuted(&perm);
        let cp = c.permuted(&perm);
        let mut s = session(&store);
        let a = enc.forward(&mut s, &GraphBatch::new(&[(&g, &c)]));
        let b = enc.forward(&mut s, &GraphBatch::new(&[(&gp, &cp)]));
        assert!(max_diff(s.tape.value(a), s.tape.value(b)) < 1e-6);
    }

    #[test]
    fn geometry_sees_rigid_motion_but_not_scaling() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = GeometryEncoder::new(&mut store, &mut rng, HIDDEN, 3);
        let m = Molecule::from_smiles("CC(=O)Oc1ccccc1C(=O)O", 0).unwrap();
        let (c, sn) = (0.6f64.cos(), 0.6f64.sin());
        let rot = [[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]];
        let moved = m.conformation.transformed(&rot, [1.0, -2.0, 0.5]);
        let scaled = m.conformation.scaled(2.0);
        let run = |conf| {
            let mut s = session(&store);
            let out = enc.pooled(&mut s, &GraphBatch::new(&[(&m.graph, conf)]));
            s.tape.value(out).clone()
        };
        let base = run(&m.conformation);
        assert!(max_diff(&base, &run(&moved)) < 1e-6);
        assert!(max_diff(&base, &run(&scaled)) > 1e-3);
    }
}
