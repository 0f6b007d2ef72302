//! MoleculeNet-style CSV datasets with missing-label masks.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conformer::{embed_conformation, Conformation, ConformationSource};
use super::smiles::{parse_smiles, MolecularGraph};
use super::tokenize::{tokenize_smiles, TokenSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskType {
    Classification,
    Regression,
}

impl std::str::FromStr for TaskType {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "classification" => Ok(TaskType::Classification),
            "regression" => Ok(TaskType::Regression),
            other => Err(format!("unknown task type {other:?}")),
        }
    }
}

impl std::fmt::Display for TaskType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskType::Classification => "classification",
            TaskType::Regression => "regression",
        })
    }
}

/// The three modality inputs of one molecule.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Molecule {
    pub smiles: String,
    pub tokens: TokenSequence,
    pub graph: MolecularGraph,
    pub conformation: Conformation,
}

impl Molecule {
    /// Parse `smiles` and embed a fallback conformation.
    pub fn from_smiles(smiles: &str, conformer_seed: u64) -> Result<Self> {
        let tokens = tokenize_smiles(smiles)?;
        let graph = parse_smiles(smiles)?;
        let conformation = embed_conformation(&graph, conformer_seed);
        Ok(Self {
            smiles: smiles.to_string(),
            tokens,
            graph,
            conformation,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabeledMolecule {
    pub molecule: Molecule,
    /// Masked entries hold 0.0 and must not be read.
    pub labels: Vec<f64>,
    pub label_mask: Vec<bool>,
    /// Data row index in the source CSV (header excluded).
    pub row: usize,
}

impl LabeledMolecule {
    /// Label `k` if present.
    pub fn label(&self, k: usize) -> Option<f64> {
        self.label_mask[k].then(|| self.labels[k])
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SkippedRow {
    pub row: usize,
    pub smiles: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Dataset {
    pub name: String,
    pub task_type: TaskType,
    pub n_tasks: usize,
    pub task_names: Vec<String>,
    pub records: Vec<LabeledMolecule>,
    pub skipped: Vec<SkippedRow>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// New dataset holding the given records (by index), same metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            task_type: self.task_type,
            n_tasks: self.n_tasks,
            task_names: self.task_names.clone(),
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            skipped: Vec::new(),
        }
    }

    /// Mean of the valid labels of task `k`, if any.
    pub fn label_mean(&self, k: usize) -> Option<f64> {
        let vals: Vec<f64> = self.records.iter().filter_map(|r| r.label(k)).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub smiles_column: String,
    /// Restrict labels to these columns, in this order. `None`: every
    /// non-SMILES column.
    pub label_columns: Option<Vec<String>>,
    /// Optional coordinates file; see [`read_coordinates`].
    pub coordinates: Option<PathBuf>,
    pub conformer_seed: u64,
}

impl LoadOptions {
    pub fn new(smiles_column: impl Into<String>) -> Self {
        Self {
            smiles_column: smiles_column.into(),
            label_columns: None,
            coordinates: None,
            conformer_seed: 0,
        }
    }
}

/// Load a CSV whose `smiles_column` holds SMILES and all other columns hold
/// numeric-or-empty labels.
pub fn load_dataset(path: &Path, task_type: TaskType, smiles_column: &str) -> Result<Dataset> {
    load_dataset_with(path, task_type, &LoadOptions::new(smiles_column))
}

pub fn load_dataset_with(path: &Path, task_type: TaskType, opts: &LoadOptions) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let coords = match &opts.coordinates {
        Some(p) => Some(read_coordinates(p)?),
        None => None,
    };
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_csv(&text, &name, task_type, opts, coords.as_ref())
}

fn parse_csv(
    text: &str,
    name: &str,
    task_type: TaskType,
    opts: &LoadOptions,
    coords: Option<&HashMap<usize, Vec<[f64; 3]>>>,
) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Dataset(format!("cannot read header: {e}")))?
        .clone();
    let smiles_idx = headers
        .iter()
        .position(|h| h == opts.smiles_column)
        .ok_or_else(|| Error::Dataset(format!("missing smiles column {:?}", opts.smiles_column)))?;
    let label_idx: Vec<usize> = match &opts.label_columns {
        Some(cols) => cols
            .iter()
            .map(|c| {
                headers
                    .iter()
                    .position(|h| h == c)
                    .ok_or_else(|| Error::Dataset(format!("missing label column {c:?}")))
            })
            .collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|&i| i != smiles_idx).collect(),
    };
    if label_idx.is_empty() {
        return Err(Error::Dataset("no label columns".into()));
    }
    let task_names: Vec<String> = label_idx.iter().map(|&i| headers[i].to_string()).collect();

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Dataset(format!("row {row}: {e}")))?;
        let smiles = rec[smiles_idx].trim().to_string();
        let mut labels = Vec::with_capacity(label_idx.len());
        let mut mask = Vec::with_capacity(label_idx.len());
        for (k, &ci) in label_idx.iter().enumerate() {
            let cell = rec[ci].trim();
            if cell.is_empty() {
                labels.push(0.0);
                mask.push(false);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Dataset(format!("row {row}, column {:?}: {cell:?} is not numeric", task_names[k]))
            })?;
            if task_type == TaskType::Classification && v != 0.0 && v != 1.0 {
                return Err(Error::Dataset(format!(
                    "row {row}, column {:?}: classification label {v} is not 0/1",
                    task_names[k]
                )));
            }
            labels.push(v);
            mask.push(true);
        }

        let parsed = tokenize_smiles(&smiles).and_then(|t| parse_smiles(&smiles).map(|g| (t, g)));
        let (tokens, graph) = match parsed {
            Ok(x) => x,
            Err(e) => {
                log::warn!("skipping row {row}: {e}");
                skipped.push(SkippedRow {
                    row,
                    smiles,
                    reason: e.to_string(),
                });
                continue;
            }
        };
        let conformation = match coords.and_then(|c| c.get(&row)) {
            Some(xyz) => {
                if xyz.len() != graph.num_atoms() {
                    return Err(Error::Dataset(format!(
                        "row {row}: {} coordinates for {} atoms",
                        xyz.len(),
                        graph.num_atoms()
                    )));
                }
                Conformation::new(xyz.clone(), ConformationSource::Loaded)
            }
            None => embed_conformation(&graph, opts.conformer_seed),
        };
        records.push(LabeledMolecule {
            molecule: Molecule {
                smiles,
                tokens,
                graph,
                conformation,
            },
            labels,
            label_mask: mask,
            row,
        });
    }
    if records.is_empty() {
        return Err(Error::Dataset("zero parseable rows".into()));
    }
    Ok(Dataset {
        name: name.to_string(),
        task_type,
        n_tasks: label_idx.len(),
        task_names,
        records,
        skipped,
    })
}

/// Read a coordinates file.
///
/// ```text
/// # comment
/// molecule 0
/// 0.0 0.0 0.0
/// 1.0 0.0 0.0
/// molecule 3
/// ...
/// ```
///
/// Each `molecule <row>` header names a CSV data row (0-based, header
/// excluded) and is followed by one `x y z` line per heavy atom, in SMILES
/// atom order.
pub fn read_coordinates(path: &Path) -> Result<HashMap<usize, Vec<[f64; 3]>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out: HashMap<usize, Vec<[f64; 3]>> = HashMap::new();
    let mut current: Option<usize> = None;
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| Error::Dataset(format!("{}:{}: {msg}", path.display(), ln + 1));
        if let Some(rest) = line.strip_prefix("molecule") {
            let row: usize = rest.trim().parse().map_err(|_| bad("bad molecule header"))?;
            if out.insert(row, Vec::new()).is_some() {
                return Err(bad("duplicate molecule header"));
            }
            current = Some(row);
            continue;
        }
        let row = current.ok_or_else(|| bad("coordinates before any molecule header"))?;
        let xyz: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("non-numeric coordinate"))?;
        if xyz.len() != 3 {
            return Err(bad("expected three coordinates"));
        }
        out.get_mut(&row).unwrap().push([xyz[0], xyz[1], xyz[2]]);
    }
    Ok(out)
}

/// Partition sizes `floor(r1·n)`, `floor(r2·n)` and the remainder.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Split(format!("ratios must be positive, got {ratios:?}")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("ratios must sum to 1, got {ratios:?}")));
    }
    let a = (ratios[0] * n as f64 + 1e-9).floor() as usize;
    let b = (ratios[1] * n as f64 + 1e-9).floor() as usize;
    let sizes = [a, b, n.saturating_sub(a + b)];
    if sizes.contains(&0) || a + b > n {
        return Err(Error::Split(format!("{n} records give an empty partition {sizes:?}")));
    }
    Ok(sizes)
}

/// Random train/validation/test index partition, deterministic per seed.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let [a, b, _] = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(a + b);
    let valid = order.split_off(a);
    Ok([order, valid, test])
}

pub fn split_dataset(ds: &Dataset, ratios: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [tr, va, te] = split_indices(ds.len(), ratios, seed)?;
    Ok((ds.subset(&tr), ds.subset(&va), ds.subset(&te)))
}
