//! SMILES lexing and parsing, fallback conformations and dataset loading.

pub mod conformer;
pub mod dataset;
pub mod elements;
pub mod smiles;
pub mod tokenize;

pub use conformer::{embed_conformation, Conformation, ConformationSource};
pub use dataset::{
    load_dataset, load_dataset_with, split_dataset, split_indices, Dataset, LabeledMolecule, LoadOptions,
    Molecule, SkippedRow, TaskType,
};
pub use smiles::{parse_smiles, AtomFeature, BondFeature, BondOrder, MolecularGraph};
pub use tokenize::{tokenize_smiles, TokenSequence, Vocabulary};
