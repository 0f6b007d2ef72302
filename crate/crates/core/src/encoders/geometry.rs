use rand_chacha::ChaCha8Rng;

use super::batch::{GraphBatch, ANGLE_BINS, ATOM_FEATURES, DISTANCE_BASIS};
use crate::nn::{Linear, ParamStore, Session};
use crate::tape::Var;

/// Message passing over bonded pairs with static distance features on the
/// edges and bond-angle histograms on the nodes. Only interatomic distances
/// and angles enter, so the output is unchanged by rigid motions.
#[derive(Clone, Debug)]
pub struct GeometryEncoder {
    node_in: Linear,
    aggregate: Vec<Linear>,
    combine: Vec<Linear>,
    readout: Linear,
}

impl GeometryEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize, depth: usize) -> Self {
        Self {
            node_in: Linear::new(store, rng, "geom.node_in", ATOM_FEATURES + ANGLE_BINS, hidden),
            aggregate: (0..depth)
                .map(|k| Linear::new(store, rng, &format!("geom.aggregate{k}"), hidden + DISTANCE_BASIS, hidden))
                .collect(),
            combine: (0..depth)
                .map(|k| Linear::new(store, rng, &format!("geom.combine{k}"), 2 * hidden, hidden))
                .collect(),
            readout: Linear::new(store, rng, "geom.readout", hidden, hidden),
        }
    }

    pub fn pooled(&self, s: &mut Session, g: &GraphBatch) -> Var {
        let x = s.tape.constant(g.geometry_nodes.clone());
        let h0 = self.node_in.forward(s, x);
        let mut h = s.tape.relu(h0);
        let dist = (g.num_edges() > 0).then(|| s.tape.constant(g.edge_distances.clone()));
        for (agg, comb) in self.aggregate.iter().zip(&self.combine) {
            let m = match dist {
                Some(dist) => {
                    let hu = s.tape.gather_rows(h, g.edge_src.clone());
                    let inp = s.tape.concat_cols(&[hu, dist]);
                    let msg = agg.forward(s, inp);
                    let msg = s.tape.relu(msg);
                    s.tape.segment_sum(msg, g.edge_dst.clone(), g.num_atoms())
                }
                None => s.tape.constant(ndarray::Array2::zeros(s.tape.shape(h))),
            };
            let hm = s.tape.concat_cols(&[h, m]);
            let hn = comb.forward(s, hm);
            h = s.tape.relu(hn);
        }
        s.tape.segment_sum(h, g.atom_mol.clone(), g.n_mols)
    }

    pub fn forward(&self, s: &mut Session, g: &GraphBatch) -> Var {
        let pooled = self.pooled(s, g);
        let out = self.readout.forward(s, pooled);
        s.tape.relu(out)
    }
}
