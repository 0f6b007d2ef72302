//! 3-D coordinates for a molecular graph.
//!
//! Real conformers can be supplied through a coordinates file. Otherwise a
//! deterministic distance-geometry layout is used: a seeded random start
//! refined by gradient descent on bonded-distance, 1-3 distance and
//! short-range repulsion terms.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::smiles::MolecularGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConformationSource {
    Loaded,
    Fallback,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Conformation {
    pub coordinates: Vec<[f64; 3]>,
    #[serde(skip)]
    pub pairwise_distances: Array2<f64>,
    pub source: ConformationSource,
}

pub const REFINE_ITERATIONS: usize = 200;
const STEP: f64 = 0.05;
const ANGLE_TARGET: f64 = 1.732_050_807_568_877_2; // sqrt(3): 120° between unit bonds
const ANGLE_WEIGHT: f64 = 0.5;
const REPULSION_RADIUS: f64 = 1.5;
const REPULSION_WEIGHT: f64 = 0.2;

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

impl Conformation {
    pub fn new(coordinates: Vec<[f64; 3]>, source: ConformationSource) -> Self {
        let n = coordinates.len();
        let pairwise_distances =
            Array2::from_shape_fn((n, n), |(i, j)| if i == j { 0.0 } else { distance(&coordinates[i], &coordinates[j]) });
        Self {
            coordinates,
            pairwise_distances,
            source,
        }
    }

    pub fn num_atoms(&self) -> usize {
        self.coordinates.len()
    }

    /// Apply `x ↦ R x + t` to every coordinate.
    pub fn transformed(&self, rotation: &[[f64; 3]; 3], translation: [f64; 3]) -> Self {
        let coords = self
            .coordinates
            .iter()
            .map(|p| {
                let mut q = translation;
                for (r, row) in rotation.iter().enumerate() {
                    q[r] += row[0] * p[0] + row[1] * p[1] + row[2] * p[2];
                }
                q
            })
            .collect();
        Self::new(coords, self.source)
    }

    pub fn scaled(&self, k: f64) -> Self {
        let coords = self.coordinates.iter().map(|p| [p[0] * k, p[1] * k, p[2] * k]).collect();
        Self::new(coords, self.source)
    }

    /// Reorder to match a permuted graph: new atom `i` is old atom `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self::new(perm.iter().map(|&o| self.coordinates[o]).collect(), self.source)
    }
}

/// Topological distance matrix by BFS; unreachable pairs get `usize::MAX`.
fn hop_counts(graph: &MolecularGraph) -> Vec<Vec<usize>> {
    let n = graph.num_atoms();
    let mut out = vec![vec![usize::MAX; n]; n];
    for (src, row) in out.iter_mut().enumerate() {
        row[src] = 0;
        let mut queue = std::collections::VecDeque::from([src]);
        while let Some(v) = queue.pop_front() {
            for &(u, _) in &graph.adjacency[v] {
                if row[u] == usize::MAX {
                    row[u] = row[v] + 1;
                    queue.push_back(u);
                }
            }
        }
    }
    out
}

/// Deterministic fallback layout for `graph`; same `(graph, seed)` gives
/// bit-identical coordinates. The result is centred on the origin.
pub fn embed_conformation(graph: &MolecularGraph, seed: u64) -> Conformation {
    let n = graph.num_atoms();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = (n as f64).cbrt().max(1.0);
    let mut pos: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.random_range(-half..half),
                rng.random_range(-half..half),
                rng.random_range(-half..half),
            ]
        })
        .collect();

    let hops = hop_counts(graph);
    // (i, j, target, weight, repulsive-only)
    let mut terms = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            match hops[i][j] {
                1 => terms.push((i, j, 1.0, 1.0, false)),
                2 => terms.push((i, j, ANGLE_TARGET, ANGLE_WEIGHT, false)),
                _ => terms.push((i, j, REPULSION_RADIUS, REPULSION_WEIGHT, true)),
            }
        }
    }

    let mut grad = vec![[0.0; 3]; n];
    for _ in 0..REFINE_ITERATIONS {
        grad.iter_mut().for_each(|g| *g = [0.0; 3]);
        for &(i, j, target, weight, repulsive) in &terms {
            let d = distance(&pos[i], &pos[j]);
            if repulsive && d >= target {
                continue;
            }
            if d < 1e-12 {
                continue;
            }
            let coef = 2.0 * weight * (d - target) / d;
            for k in 0..3 {
                let g = coef * (pos[i][k] - pos[j][k]);
                grad[i][k] += g;
                grad[j][k] -= g;
            }
        }
        for (p, g) in pos.iter_mut().zip(&grad) {
            for k in 0..3 {
                p[k] -= STEP * g[k];
            }
        }
    }

    if n > 0 {
        let mut centroid = [0.0; 3];
        for p in &pos {
            for k in 0..3 {
                centroid[k] += p[k];
            }
        }
        for c in centroid.iter_mut() {
            *c /= n as f64;
        }
        for p in pos.iter_mut() {
            for k in 0..3 {
                p[k] -= centroid[k];
            }
        }
    }
    Conformation::new(pos, ConformationSource::Fallback)
}
