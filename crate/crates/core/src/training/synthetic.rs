//! Generated regression data whose label is a function of molecular
//! topology alone, while the token sequence and the coordinates carry
//! label-free nuisance variation of their own.
//!
//! * topology: random acyclic molecules over C, N, O, F and Cl;
//! * label: `n_O + 0.5·n_N − 0.5·n_halogen + 0.3·n_branch`, centred;
//! * sequence nuisance: a random root, random branch order and randomly
//!   bracketed atoms with explicit hydrogens, so equal graphs get
//!   different strings;
//! * geometry nuisance: per-molecule Gaussian jitter of random width and a
//!   random isotropic stretch of the embedded coordinates.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::chem::{Conformation, ConformationSource, Dataset, LabeledMolecule, Molecule, TaskType, Vocabulary};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub molecules: usize,
    pub min_atoms: usize,
    pub max_atoms: usize,
    /// Upper bound of the per-molecule jitter standard deviation (Å).
    pub coordinate_noise: f64,
    /// Stretch factors are drawn from `1 ± scale_jitter`.
    pub scale_jitter: f64,
    /// Probability that an atom is written in bracket form.
    pub bracket_rate: f64,
    /// Probability that an atom token is swapped for another element's
    /// token after tokenisation; the graph is unaffected.
    pub token_corruption: f64,
    /// Probability that an atom's element is swapped in the graph
    /// features; the token sequence is unaffected.
    pub element_corruption: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            molecules: 400,
            min_atoms: 4,
            max_atoms: 12,
            coordinate_noise: 0.4,
            scale_jitter: 0.2,
            bracket_rate: 0.3,
            token_corruption: 0.0,
            element_corruption: 0.0,
            seed: 0,
        }
    }
}

const ELEMENTS: [(&str, u8, u32); 5] = [("C", 4, 10), ("N", 3, 2), ("O", 2, 3), ("F", 1, 1), ("Cl", 1, 1)];

struct Tree {
    /// Index into `ELEMENTS`.
    kind: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
}

impl Tree {
    fn random(rng: &mut ChaCha8Rng, n: usize) -> Tree {
        let total: u32 = ELEMENTS.iter().map(|e| e.2).sum();
        let pick = |rng: &mut ChaCha8Rng, allow_leaf_only: bool| loop {
            let mut r = rng.random_range(0..total);
            let k = ELEMENTS.iter().position(|e| {
                if r < e.2 {
                    true
                } else {
                    r -= e.2;
                    false
                }
            });
            let k = k.unwrap();
            if allow_leaf_only || ELEMENTS[k].1 > 1 {
                return k;
            }
        };
        let mut tree = Tree {
            kind: vec![pick(rng, false)],
            adjacency: vec![Vec::new()],
        };
        while tree.kind.len() < n {
            let open: Vec<usize> = (0..tree.kind.len())
                .filter(|&v| tree.adjacency[v].len() < ELEMENTS[tree.kind[v]].1 as usize)
                .collect();
            let Some(&parent) = open.choose(rng) else { break };
            // Keep at least one open valence so growth can continue.
            let leaf_ok = open.len() > 1 || tree.kind.len() + 1 == n;
            let child = tree.kind.len();
            tree.kind.push(pick(rng, leaf_ok));
            tree.adjacency.push(vec![parent]);
            tree.adjacency[parent].push(child);
        }
        tree
    }

    fn label(&self) -> f64 {
        let mut y = 0.0;
        for (v, &k) in self.kind.iter().enumerate() {
            y += match ELEMENTS[k].0 {
                "O" => 1.0,
                "N" => 0.5,
                "F" | "Cl" => -0.5,
                _ => 0.0,
            };
            if self.adjacency[v].len() >= 3 {
                y += 0.3;
            }
        }
        y
    }

    fn write(&self, rng: &mut ChaCha8Rng, bracket_rate: f64) -> String {
        let root = rng.random_range(0..self.kind.len());
        let mut out = String::new();
        self.write_from(root, usize::MAX, rng, bracket_rate, &mut out);
        out
    }

    fn write_from(&self, v: usize, parent: usize, rng: &mut ChaCha8Rng, bracket_rate: f64, out: &mut String) {
        let (symbol, valence, _) = ELEMENTS[self.kind[v]];
        if rng.random_bool(bracket_rate) {
            let h = valence as usize - self.adjacency[v].len();
            out.push('[');
            out.push_str(symbol);
            match h {
                0 => {}
                1 => out.push('H'),
                _ => out.push_str(&format!("H{h}")),
            }
            out.push(']');
        } else {
            out.push_str(symbol);
        }
        let mut children: Vec<usize> = self.adjacency[v].iter().copied().filter(|&c| c != parent).collect();
        children.shuffle(rng);
        let last = children.pop();
        for c in children {
            out.push('(');
            self.write_from(c, v, rng, bracket_rate, out);
            out.push(')');
        }
        if let Some(c) = last {
            self.write_from(c, v, rng, bracket_rate, out);
        }
    }
}

const ATOMIC_NUMBERS: [u8; 5] = [6, 7, 8, 9, 17];

fn other_index(rng: &mut ChaCha8Rng, current: usize) -> usize {
    let k = rng.random_range(0..ELEMENTS.len() - 1);
    if k >= current {
        k + 1
    } else {
        k
    }
}

fn corrupt_tokens(molecule: &mut Molecule, rate: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 {
        return;
    }
    let vocab = Vocabulary::standard();
    let seq = &mut molecule.tokens;
    for (id, raw) in seq.tokens.iter_mut().zip(seq.raw_tokens.iter_mut()) {
        let Some(k) = ELEMENTS.iter().position(|e| e.0 == raw.as_str()) else { continue };
        if rng.random_bool(rate) {
            *raw = ELEMENTS[other_index(rng, k)].0.to_string();
            *id = vocab.id(raw);
        }
    }
}

fn corrupt_elements(molecule: &mut Molecule, rate: f64, rng: &mut ChaCha8Rng) {
    if rate <= 0.0 {
        return;
    }
    for atom in &mut molecule.graph.atoms {
        let Some(k) = ATOMIC_NUMBERS.iter().position(|&z| z == atom.element) else { continue };
        if rng.random_bool(rate) {
            atom.element = ATOMIC_NUMBERS[other_index(rng, k)];
        }
    }
}

/// Generate the dataset described in the module documentation.
pub fn disentangle_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.molecules);
    let mut labels = Vec::with_capacity(spec.molecules);
    for row in 0..spec.molecules {
        let n = rng.random_range(spec.min_atoms..=spec.max_atoms);
        let tree = Tree::random(&mut rng, n);
        let smiles = tree.write(&mut rng, spec.bracket_rate);
        let mut molecule = Molecule::from_smiles(&smiles, rng.random())?;
        let sigma = rng.random_range(0.0..=spec.coordinate_noise);
        let stretch = rng.random_range(1.0 - spec.scale_jitter..=1.0 + spec.scale_jitter);
        let jitter = Normal::new(0.0, sigma.max(1e-12)).expect("positive width");
        let coords = molecule
            .conformation
            .coordinates
            .iter()
            .map(|p| p.map(|x| stretch * x + jitter.sample(&mut rng)))
            .collect();
        molecule.conformation = Conformation::new(coords, ConformationSource::Loaded);
        corrupt_tokens(&mut molecule, spec.token_corruption, &mut rng);
        corrupt_elements(&mut molecule, spec.element_corruption, &mut rng);
        labels.push(tree.label());
        records.push(LabeledMolecule {
            molecule,
            labels: vec![0.0],
            label_mask: vec![true],
            row,
        });
    }
    let mean = labels.iter().sum::<f64>() / labels.len().max(1) as f64;
    for (r, y) in records.iter_mut().zip(labels) {
        r.labels[0] = y - mean;
    }
    Ok(Dataset {
        name: "synthetic-disentangle".into(),
        task_type: TaskType::Regression,
        n_tasks: 1,
        task_names: vec!["shared_factor".into()],
        records,
        skipped: Vec::new(),
    })
}
