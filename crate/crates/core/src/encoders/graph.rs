use rand_chacha::ChaCha8Rng;

use super::batch::{GraphBatch, ATOM_FEATURES, BOND_FEATURES};
use crate::nn::{Linear, ParamStore, Session};
use crate::tape::Var;

/// Directed-edge message passing with node/edge communication.
///
/// Each round sums incoming edge states into a node message, updates the
/// node from `[h_v; m_v]`, and refreshes every directed edge `u→v` from the
/// source message minus the reverse edge `v→u`.
#[derive(Clone, Debug)]
pub struct GraphEncoder {
    atom_in: Linear,
    edge_in: Linear,
    communicate: Vec<Linear>,
    edge_update: Vec<Linear>,
    readout: Linear,
    depth: usize,
}

impl GraphEncoder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, hidden: usize, depth: usize) -> Self {
        Self {
            atom_in: Linear::new(store, rng, "graph.atom_in", ATOM_FEATURES, hidden),
            edge_in: Linear::new(store, rng, "graph.edge_in", ATOM_FEATURES + BOND_FEATURES, hidden),
            communicate: (0..depth)
                .map(|k| Linear::new(store, rng, &format!("graph.communicate{k}"), 2 * hidden, hidden))
                .collect(),
            edge_update: (0..depth.saturating_sub(1))
                .map(|k| Linear::new(store, rng, &format!("graph.edge_update{k}"), hidden, hidden))
                .collect(),
            readout: Linear::new(store, rng, "graph.readout", hidden, hidden),
            depth,
        }
    }

    /// Sum of final node states per molecule, before the readout layer.
    pub fn pooled(&self, s: &mut Session, g: &GraphBatch) -> Var {
        let x = s.tape.constant(g.atom_features.clone());
        let h0 = self.atom_in.forward(s, x);
        let mut h = s.tape.relu(h0);
        if g.num_edges() > 0 {
            let e = s.tape.constant(g.edge_inputs.clone());
            let e0 = self.edge_in.forward(s, e);
            let e0 = s.tape.relu(e0);
            let mut edges = e0;
            for k in 0..self.depth {
                let m = s.tape.segment_sum(edges, g.edge_dst.clone(), g.num_atoms());
                let hm = s.tape.concat_cols(&[h, m]);
                let hn = self.communicate[k].forward(s, hm);
                h = s.tape.relu(hn);
                if k + 1 < self.depth {
                    let m_src = s.tape.gather_rows(m, g.edge_src.clone());
                    let reverse = s.tape.gather_rows(edges, g.edge_rev.clone());
                    let diff = s.tape.sub(m_src, reverse);
                    let upd = self.edge_update[k].forward(s, diff);
                    let sum = s.tape.add(e0, upd);
                    edges = s.tape.relu(sum);
                }
            }
        } else {
            let m = s.tape.constant(ndarray::Array2::zeros(s.tape.shape(h)));
            for k in 0..self.depth {
                let hm = s.tape.concat_cols(&[h, m]);
                let hn = self.communicate[k].forward(s, hm);
                h = s.tape.relu(hn);
            }
        }
        s.tape.segment_sum(h, g.atom_mol.clone(), g.n_mols)
    }

    pub fn forward(&self, s: &mut Session, g: &GraphBatch) -> Var {
        let pooled = self.pooled(s, g);
        let out = self.readout.forward(s, pooled);
        s.tape.relu(out)
    }
}
