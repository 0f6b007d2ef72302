//! Packing molecules into the dense arrays the encoders consume.

use std::rc::Rc;

use ndarray::Array2;

use crate::chem::{Conformation, LabeledMolecule, Molecule, MolecularGraph, TokenSequence, Vocabulary};
use crate::error::{Error, Result};

/// Width of the element one-hot: elements 1..=100 plus an "other" slot.
pub const ELEMENT_SLOTS: usize = 101;
pub const DEGREE_SLOTS: usize = 7;
pub const CHARGE_SLOTS: usize = 5;
pub const ATOM_FEATURES: usize = ELEMENT_SLOTS + DEGREE_SLOTS + CHARGE_SLOTS + 2;
pub const BOND_FEATURES: usize = 5;

pub const DISTANCE_BASIS: usize = 16;
pub const DISTANCE_CUTOFF: f64 = 4.0;
pub const ANGLE_BINS: usize = 8;

pub fn atom_features(graph: &MolecularGraph) -> Array2<f64> {
    let mut x = Array2::zeros((graph.num_atoms(), ATOM_FEATURES));
    for (i, a) in graph.atoms.iter().enumerate() {
        let element = match a.element {
            1..=100 => a.element as usize - 1,
            _ => ELEMENT_SLOTS - 1,
        };
        x[[i, element]] = 1.0;
        x[[i, ELEMENT_SLOTS + (a.degree as usize).min(DEGREE_SLOTS - 1)]] = 1.0;
        let charge = (a.formal_charge.clamp(-2, 2) + 2) as usize;
        x[[i, ELEMENT_SLOTS + DEGREE_SLOTS + charge]] = 1.0;
        x[[i, ATOM_FEATURES - 2]] = a.aromatic as u8 as f64;
        x[[i, ATOM_FEATURES - 1]] = a.in_ring as u8 as f64;
    }
    x
}

fn gaussian_basis(value: f64, lo: f64, hi: f64, count: usize, out: &mut [f64]) {
    let step = (hi - lo) / (count - 1) as f64;
    for (k, o) in out.iter_mut().enumerate() {
        let c = lo + step * k as f64;
        *o += (-0.5 * ((value - c) / step).powi(2)).exp();
    }
}

/// Gaussian expansion of a distance over [`DISTANCE_BASIS`] centres on `[0, 4]`.
pub fn distance_basis(d: f64) -> [f64; DISTANCE_BASIS] {
    let mut out = [0.0; DISTANCE_BASIS];
    gaussian_basis(d, 0.0, DISTANCE_CUTOFF, DISTANCE_BASIS, &mut out);
    out
}

/// Per-atom histogram of bond-angle cosines, softly binned on `[-1, 1]`.
pub fn angle_features(graph: &MolecularGraph, conf: &Conformation) -> Array2<f64> {
    let mut out = Array2::zeros((graph.num_atoms(), ANGLE_BINS));
    let p = &conf.coordinates;
    for (v, nbrs) in graph.adjacency.iter().enumerate() {
        for (i, &(a, _)) in nbrs.iter().enumerate() {
            for &(b, _) in &nbrs[i + 1..] {
                let u: Vec<f64> = (0..3).map(|k| p[a][k] - p[v][k]).collect();
                let w: Vec<f64> = (0..3).map(|k| p[b][k] - p[v][k]).collect();
                let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nw = w.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nu == 0.0 || nw == 0.0 {
                    continue;
                }
                let cos = (u.iter().zip(&w).map(|(x, y)| x * y).sum::<f64>() / (nu * nw)).clamp(-1.0, 1.0);
                let mut row = out.row_mut(v);
                gaussian_basis(cos, -1.0, 1.0, ANGLE_BINS, row.as_slice_mut().unwrap());
            }
        }
    }
    out
}

/// Padded token ids for the recurrent encoder.
#[derive(Clone, Debug)]
pub struct SequenceBatch {
    pub lengths: Vec<usize>,
    pub max_len: usize,
    /// Time-major token ids, `max_len × batch`; pad positions hold `<pad>`.
    pub forward_ids: Rc<[usize]>,
    /// Same layout with each sequence reversed within its own length.
    pub backward_ids: Rc<[usize]>,
}

impl SequenceBatch {
    pub fn new(sequences: &[&TokenSequence]) -> Result<Self> {
        let vocab = Vocabulary::standard().len();
        let b = sequences.len();
        let lengths: Vec<usize> = sequences.iter().map(|s| s.len()).collect();
        let max_len = lengths.iter().copied().max().unwrap_or(0);
        let mut fwd = vec![Vocabulary::PAD; max_len * b];
        let mut bwd = vec![Vocabulary::PAD; max_len * b];
        for (j, s) in sequences.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::Dataset("empty token sequence".into()));
            }
            for (t, &id) in s.tokens.iter().enumerate() {
                if id >= vocab {
                    return Err(Error::Vocab { id, size: vocab });
                }
                fwd[t * b + j] = id;
                bwd[(s.len() - 1 - t) * b + j] = id;
            }
        }
        Ok(Self {
            lengths,
            max_len,
            forward_ids: fwd.into(),
            backward_ids: bwd.into(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn total_tokens(&self) -> usize {
        self.lengths.iter().sum()
    }
}

/// A batch of molecular graphs merged into one disconnected graph.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_mols: usize,
    pub atom_features: Array2<f64>,
    /// Per directed edge: source atom features concatenated with bond features.
    pub edge_inputs: Array2<f64>,
    pub edge_src: Rc<[usize]>,
    pub edge_dst: Rc<[usize]>,
    /// Index of the opposite directed edge.
    pub edge_rev: Rc<[usize]>,
    /// Owning molecule of every atom.
    pub atom_mol: Rc<[usize]>,
    /// Geometry node input: atom features plus the angle histogram.
    pub geometry_nodes: Array2<f64>,
    /// Distance basis of every directed edge.
    pub edge_distances: Array2<f64>,
}

impl GraphBatch {
    pub fn new(items: &[(&MolecularGraph, &Conformation)]) -> Self {
        let n_atoms: usize = items.iter().map(|(g, _)| g.num_atoms()).sum();
        let n_edges: usize = items.iter().map(|(g, _)| 2 * g.num_bonds()).sum();
        let mut atoms = Array2::zeros((n_atoms, ATOM_FEATURES));
        let mut geometry_nodes = Array2::zeros((n_atoms, ATOM_FEATURES + ANGLE_BINS));
        let mut edge_inputs = Array2::zeros((n_edges, ATOM_FEATURES + BOND_FEATURES));
        let mut edge_distances = Array2::zeros((n_edges, DISTANCE_BASIS));
        let mut src = Vec::with_capacity(n_edges);
        let mut dst = Vec::with_capacity(n_edges);
        let mut rev = Vec::with_capacity(n_edges);
        let mut atom_mol = Vec::with_capacity(n_atoms);

        let mut atom_off = 0;
        for (m, (graph, conf)) in items.iter().enumerate() {
            assert_eq!(graph.num_atoms(), conf.num_atoms(), "conformation does not match graph");
            let x = atom_features(graph);
            let angles = angle_features(graph, conf);
            let n = graph.num_atoms();
            atoms.slice_mut(ndarray::s![atom_off..atom_off + n, ..]).assign(&x);
            geometry_nodes
                .slice_mut(ndarray::s![atom_off..atom_off + n, ..ATOM_FEATURES])
                .assign(&x);
            geometry_nodes
                .slice_mut(ndarray::s![atom_off..atom_off + n, ATOM_FEATURES..])
                .assign(&angles);
            atom_mol.extend(std::iter::repeat_n(m, n));

            for bond in &graph.bonds {
                let mut bf = [0.0; BOND_FEATURES];
                bf[bond.order.index()] = 1.0;
                bf[4] = bond.in_ring as u8 as f64;
                let rbf = distance_basis(conf.pairwise_distances[[bond.begin, bond.end]]);
                for (from, to) in [(bond.begin, bond.end), (bond.end, bond.begin)] {
                    let e = src.len();
                    src.push(atom_off + from);
                    dst.push(atom_off + to);
                    rev.push(if from == bond.begin { e + 1 } else { e - 1 });
                    let mut row = edge_inputs.row_mut(e);
                    for k in 0..ATOM_FEATURES {
                        row[k] = x[[from, k]];
                    }
                    for k in 0..BOND_FEATURES {
                        row[ATOM_FEATURES + k] = bf[k];
                    }
                    edge_distances.row_mut(e).assign(&ndarray::ArrayView1::from(&rbf));
                }
            }
            atom_off += n;
        }
        Self {
            n_mols: items.len(),
            atom_features: atoms,
            edge_inputs,
            edge_src: src.into(),
            edge_dst: dst.into(),
            edge_rev: rev.into(),
            atom_mol: atom_mol.into(),
            geometry_nodes,
            edge_distances,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_features.nrows()
    }

    pub fn num_edges(&self) -> usize {
        self.edge_src.len()
    }
}

/// Everything one forward pass needs: three modality inputs and labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub sequences: SequenceBatch,
    pub graphs: GraphBatch,
    /// `batch × n_tasks`; masked cells are zero regardless of the source.
    pub labels: Array2<f64>,
    /// 1.0 where a label is present, else 0.0.
    pub mask: Array2<f64>,
}

impl Batch {
    pub fn from_molecules(mols: &[&Molecule]) -> Result<Self> {
        let seqs: Vec<_> = mols.iter().map(|m| &m.tokens).collect();
        let graphs: Vec<_> = mols.iter().map(|m| (&m.graph, &m.conformation)).collect();
        Ok(Self {
            sequences: SequenceBatch::new(&seqs)?,
            graphs: GraphBatch::new(&graphs),
            labels: Array2::zeros((mols.len(), 0)),
            mask: Array2::zeros((mols.len(), 0)),
        })
    }

    pub fn from_records(records: &[&LabeledMolecule]) -> Result<Self> {
        let mols: Vec<_> = records.iter().map(|r| &r.molecule).collect();
        let mut batch = Self::from_molecules(&mols)?;
        let n_tasks = records.first().map_or(0, |r| r.labels.len());
        let mut labels = Array2::zeros((records.len(), n_tasks));
        let mut mask = Array2::zeros((records.len(), n_tasks));
        for (i, r) in records.iter().enumerate() {
            for k in 0..n_tasks {
                if let Some(y) = r.label(k) {
                    labels[[i, k]] = y;
                    mask[[i, k]] = 1.0;
                }
            }
        }
        batch.labels = labels;
        batch.mask = mask;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.graphs.n_mols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chem::{embed_conformation, parse_smiles, tokenize_smiles};

    #[test]
    fn atom_feature_layout() {
        let g = parse_smiles("C[O-]").unwrap();
        let x = atom_features(&g);
        assert_eq!(x.ncols(), 115);
        assert_eq!(x[[0, 5]], 1.0);
        assert_eq!(x[[1, 7]], 1.0);
        assert_eq!(x[[1, ELEMENT_SLOTS + 1]], 1.0);
        assert_eq!(x[[1, ELEMENT_SLOTS + DEGREE_SLOTS + 1]], 1.0);
        assert_eq!(x.row(0).sum(), 3.0);
    }

    #[test]
    fn distance_basis_peaks_at_centre() {
        let f = distance_basis(4.0 / 15.0 * 3.0);
        let arg = f.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(arg, 3);
        assert!((f[3] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reverse_edges_pair_up() {
        let g = parse_smiles("CC(C)O").unwrap();
        let c = embed_conformation(&g, 0);
        let b = GraphBatch::new(&[(&g, &c), (&g, &c)]);
        assert_eq!(b.num_edges(), 12);
        for e in 0..b.num_edges() {
            let r = b.edge_rev[e];
            assert_eq!(b.edge_rev[r], e);
            assert_eq!(b.edge_src[e], b.edge_dst[r]);
        }
        assert_eq!(b.atom_mol[4], 1);
    }

    #[test]
    fn sequences_are_reversed_within_length() {
        let a = tokenize_smiles("CO").unwrap();
        let b = tokenize_smiles("CCN").unwrap();
        let s = SequenceBatch::new(&[&a, &b]).unwrap();
        let v = Vocabulary::standard();
        let tok = |id: usize| v.token(id).unwrap();
        let bwd: Vec<_> = s.backward_ids.iter().map(|&i| tok(i)).collect();
        assert_eq!(bwd, ["O", "N", "C", "C", "<pad>", "C"]);
    }

    #[test]
    fn out_of_vocabulary_is_rejected() {
        let mut t = tokenize_smiles("CC").unwrap();
        t.tokens[1] = 10_000;
        assert!(matches!(SequenceBatch::new(&[&t]), Err(Error::Vocab { .. })));
    }
}
