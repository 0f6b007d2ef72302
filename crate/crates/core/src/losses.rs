//! Task loss, the five regularisers and their learnable coefficients.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::TaskType;
use crate::disentangle::LatentPair;
use crate::error::{Error, Result};
use crate::nn::{normal_matrix, ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Relative bandwidths of the MMD kernel, multiplied by the median
/// pairwise distance of the reference sample.
pub const MMD_SCALES: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
pub const INITIAL_COEFFICIENT: f64 = 0.1;

/// Masked mean of BCE-with-logits or squared error. Labels in masked
/// cells are replaced by zero before anything reads them.
pub fn task_loss(
    t: &mut Tape,
    predictions: Var,
    labels: &Array2<f64>,
    mask: &Array2<f64>,
    task_type: TaskType,
) -> Result<Var> {
    assert_eq!(t.shape(predictions), labels.dim());
    assert_eq!(labels.dim(), mask.dim());
    let count = mask.iter().filter(|&&m| m > 0.0).count();
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    let y = Rc::new(ndarray::Zip::from(labels).and(mask).map_collect(|&l, &m| if m > 0.0 { l } else { 0.0 }));
    let per_entry = match task_type {
        TaskType::Classification => {
            let sp = t.softplus(predictions);
            let yx = t.mul_const(predictions, y);
            t.sub(sp, yx)
        }
        TaskType::Regression => {
            let target = t.constant((*y).clone());
            let diff = t.sub(predictions, target);
            t.mul(diff, diff)
        }
    };
    let masked = t.mul_const(per_entry, Rc::new(mask.clone()));
    let total = t.sum(masked);
    Ok(t.scale(total, 1.0 / count as f64))
}

/// Closed-form `KL(N(μ, σ²) ‖ N(0, I))`, summed over latent dimensions,
/// averaged over the batch and the modalities.
pub fn kl_shared(t: &mut Tape, latents: &[LatentPair]) -> Var {
    let terms: Vec<Var> = latents
        .iter()
        .map(|lp| gaussian_kl(t, lp.mu_shared, lp.logvar_shared))
        .collect();
    average(t, &terms)
}

pub fn gaussian_kl(t: &mut Tape, mu: Var, logvar: Var) -> Var {
    let batch = t.shape(mu).0 as f64;
    let mu2 = t.mul(mu, mu);
    let var = t.exp(logvar);
    let a = t.add(mu2, var);
    let b = t.sub(a, logvar);
    let c = t.add_scalar(b, -1.0);
    let s = t.sum(c);
    t.scale(s, 0.5 / batch)
}

/// Median of the pairwise Euclidean distances between rows.
pub fn median_distance(x: &Array2<f64>) -> f64 {
    let n = x.nrows();
    let mut d = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d.push(s.sqrt());
        }
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    if m == 0 {
        return 1.0;
    }
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

/// Unbiased MMD² between `samples` and a given reference set, with the
/// multi-scale kernel centred on the reference set's median distance.
pub fn mmd_against(t: &mut Tape, samples: Var, reference: Array2<f64>) -> Var {
    let base = median_distance(&reference);
    let bandwidths = MMD_SCALES.iter().map(|s| s * base).collect();
    t.mmd_unbiased(samples, reference, bandwidths)
}

/// MMD² of every private latent batch against a fresh standard-normal draw,
/// averaged over modalities.
pub fn mmd_private(t: &mut Tape, latents: &[LatentPair], rng: &mut ChaCha8Rng) -> Var {
    let terms: Vec<Var> = latents
        .iter()
        .map(|lp| {
            let (b, d) = t.shape(lp.z_private);
            let prior = normal_matrix(rng, b, d);
            mmd_against(t, lp.z_private, prior)
        })
        .collect();
    average(t, &terms)
}

/// Mean over batch of `‖H − Ĥ‖²`, averaged over modalities.
pub fn recon_loss(t: &mut Tape, embeddings: &[Var], reconstructions: &[Var]) -> Var {
    assert_eq!(embeddings.len(), reconstructions.len());
    let terms: Vec<Var> = embeddings
        .iter()
        .zip(reconstructions)
        .map(|(&h, &r)| {
            let batch = t.shape(h).0 as f64;
            let d = t.sub(h, r);
            let sq = t.mul(d, d);
            let s = t.sum(sq);
            t.scale(s, 1.0 / batch)
        })
        .collect();
    average(t, &terms)
}

/// Symmetric InfoNCE with cosine similarity: every ordered modality pair
/// `(i, j)`, `i ≠ j`, contributes `-mean_b log softmax_b'(cos(z_i^b, z_j^b') / τ)[b]`.
pub fn align_infonce(t: &mut Tape, shared: &[Var], temperature: f64) -> Var {
    assert!(shared.len() >= 2);
    let b = t.shape(shared[0]).0;
    assert!(b >= 2, "InfoNCE needs at least two samples");
    let normed: Vec<Var> = shared.iter().map(|&z| t.normalize_rows(z)).collect();
    let eye = Rc::new(Array2::eye(b));
    let mut terms = Vec::new();
    for i in 0..normed.len() {
        for j in i + 1..normed.len() {
            let nj_t = t.transpose(normed[j]);
            let sim = t.matmul(normed[i], nj_t);
            let logits = t.scale(sim, 1.0 / temperature);
            let logits_t = t.transpose(logits);
            for l in [logits, logits_t] {
                let ls = t.log_softmax_rows(l);
                let diag = t.mul_const(ls, eye.clone());
                let s = t.sum(diag);
                terms.push(t.scale(s, -1.0 / b as f64));
            }
        }
    }
    average(t, &terms)
}

/// Mean absolute cosine between shared and private latents. If widths
/// differ the wider one is truncated to the narrower width.
pub fn ortho_loss(t: &mut Tape, latents: &[LatentPair]) -> Var {
    let terms: Vec<Var> = latents
        .iter()
        .map(|lp| {
            let (b, ds) = t.shape(lp.z_shared);
            let dp = t.shape(lp.z_private).1;
            let w = ds.min(dp);
            let zs = if ds > w { t.slice_cols(lp.z_shared, 0, w) } else { lp.z_shared };
            let zp = if dp > w { t.slice_cols(lp.z_private, 0, w) } else { lp.z_private };
            let a = t.normalize_rows(zs);
            let c = t.normalize_rows(zp);
            let prod = t.mul(a, c);
            let dots = t.row_sums(prod);
            let abs = t.abs(dots);
            let s = t.sum(abs);
            t.scale(s, 1.0 / b as f64)
        })
        .collect();
    average(t, &terms)
}

fn average(t: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &x in &terms[1..] {
        acc = t.add(acc, x);
    }
    t.scale(acc, 1.0 / terms.len() as f64)
}

/// The five regularisers in coefficient order (β, λ, γ, δ, η).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    KlShared,
    MmdPrivate,
    Align,
    Ortho,
    Recon,
}

impl Regularizer {
    pub const ALL: [Regularizer; 5] = [
        Regularizer::KlShared,
        Regularizer::MmdPrivate,
        Regularizer::Align,
        Regularizer::Ortho,
        Regularizer::Recon,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Learnable positive coefficients `softplus(raw)`, one per regulariser.
#[derive(Clone, Copy, Debug)]
pub struct LossCoefficients {
    pub raw: ParamId,
}

impl LossCoefficients {
    pub const NAME: &'static str = "loss.coefficients";

    pub fn new(store: &mut ParamStore) -> Self {
        let raw = inverse_softplus(INITIAL_COEFFICIENT);
        Self {
            raw: store.add(Self::NAME, Array2::from_elem((1, 5), raw)),
        }
    }

    pub fn values(&self, store: &ParamStore) -> [f64; 5] {
        let raw = store.value(self.raw);
        std::array::from_fn(|k| softplus(raw[[0, k]]))
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub label: f64,
    pub kl_shared: f64,
    pub mmd_private: f64,
    pub align: f64,
    pub ortho: f64,
    pub recon: f64,
    /// (β, λ, γ, δ, η); zero for regularisers outside the active set.
    pub coefficients: [f64; 5],
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [self.kl_shared, self.mmd_private, self.align, self.ortho, self.recon]
    }

    /// `label + Σ c_k·term_k`, in the same order as on the tape.
    pub fn recombine(&self) -> f64 {
        let mut total = self.label;
        for (c, x) in self.coefficients.iter().zip(self.terms()) {
            if *c != 0.0 {
                total += c * x;
            }
        }
        total
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean(items: &[LossBreakdown]) -> LossBreakdown {
        let n = items.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for it in items {
            out.label += it.label;
            out.kl_shared += it.kl_shared;
            out.mmd_private += it.mmd_private;
            out.align += it.align;
            out.ortho += it.ortho;
            out.recon += it.recon;
            out.total += it.total;
            for k in 0..5 {
                out.coefficients[k] += it.coefficients[k];
            }
        }
        out.label /= n;
        out.kl_shared /= n;
        out.mmd_private /= n;
        out.align /= n;
        out.ortho /= n;
        out.recon /= n;
        out.total /= n;
        out.coefficients.iter_mut().for_each(|c| *c /= n);
        out
    }

    pub fn is_finite(&self) -> Option<&'static str> {
        let named = [
            ("label", self.label),
            ("kl_shared", self.kl_shared),
            ("mmd_private", self.mmd_private),
            ("align", self.align),
            ("ortho", self.ortho),
            ("recon", self.recon),
            ("total", self.total),
        ];
        named.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }
}

/// Tape nodes of the six terms; `None` when a regulariser was not built.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub label: Var,
    pub regularizers: [Option<Var>; 5],
}

/// Weighted total over the active regularisers. Inactive ones are never
/// connected to the result, and with no active ones the coefficient
/// parameter is not bound at all.
pub fn total_loss(
    t: &mut Tape,
    store: &ParamStore,
    coefficients: &LossCoefficients,
    terms: &LossTerms,
    active: &[Regularizer],
) -> (Var, LossBreakdown) {
    let mut total = terms.label;
    let mut breakdown = LossBreakdown {
        label: t.scalar(terms.label),
        ..Default::default()
    };
    let values: Vec<f64> = terms
        .regularizers
        .iter()
        .map(|v| v.map_or(0.0, |v| t.scalar(v)))
        .collect();
    breakdown.kl_shared = values[0];
    breakdown.mmd_private = values[1];
    breakdown.align = values[2];
    breakdown.ortho = values[3];
    breakdown.recon = values[4];

    if !active.is_empty() {
        let raw = t.param(store, coefficients.raw);
        let coef = t.softplus(raw);
        for r in Regularizer::ALL {
            if !active.contains(&r) {
                continue;
            }
            let term = terms.regularizers[r.index()].expect("active regulariser was not computed");
            let c = t.slice_cols(coef, r.index(), 1);
            breakdown.coefficients[r.index()] = t.scalar(c);
            let weighted = t.mul(c, term);
            total = t.add(total, weighted);
        }
    }
    breakdown.total = t.scalar(total);
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::Modality;
    use ndarray::array;
    use rand::SeedableRng;

    fn pair(t: &mut Tape, zs: Array2<f64>, zp: Array2<f64>) -> LatentPair {
        let zs = t.constant(zs);
        let zp = t.constant(zp);
        LatentPair {
            modality: Modality::Graph,
            mu_shared: zs,
            logvar_shared: zs,
            z_shared: zs,
            mu_private: zp,
            logvar_private: zp,
            z_private: zp,
        }
    }

    fn kl_of(mu: f64, logvar: f64) -> f64 {
        let mut t = Tape::new();
        let m = t.constant(array![[mu]]);
        let l = t.constant(array![[logvar]]);
        let k = gaussian_kl(&mut t, m, l);
        t.scalar(k)
    }

    #[test]
    fn task_loss_examples() {
        let mut t = Tape::new();
        let p = t.constant(array![[0.0], [0.0]]);
        let l = task_loss(&mut t, p, &array![[0.0], [2.0]], &array![[1.0], [1.0]], TaskType::Regression).unwrap();
        assert_eq!(t.scalar(l), 2.0);
        let p = t.constant(array![[0.0]]);
        let l = task_loss(&mut t, p, &array![[1.0]], &array![[1.0]], TaskType::Classification).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
        let p = t.constant(array![[0.5, 1.0]]);
        let l = task_loss(&mut t, p, &array![[0.5, 1.0]], &array![[1.0, 1.0]], TaskType::Regression).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        assert!(matches!(
            task_loss(&mut t, p, &array![[0.5, 1.0]], &array![[0.0, 0.0]], TaskType::Regression),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_of(0.0, 0.0), 0.0);
        assert!((kl_of(1.0, 0.0) - 0.5).abs() < 1e-12);
        assert!((kl_of(0.0, 4f64.ln()) - 0.5 * (3.0 - 4f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn ortho_examples() {
        let cases = [
            (array![[1.0, 0.0]], array![[0.0, 1.0]], 0.0),
            (array![[3.0, 0.0]], array![[3.0, 0.0]], 1.0),
            (array![[1.0, 1.0]], array![[1.0, -1.0]], 0.0),
            (array![[0.0, 0.0]], array![[1.0, 2.0]], 0.0),
        ];
        for (a, b, want) in cases {
            let mut t = Tape::new();
            let lp = pair(&mut t, a, b);
            let o = ortho_loss(&mut t, &[lp]);
            assert!((t.scalar(o) - want).abs() < 1e-12);
        }
        let mut t = Tape::new();
        let lp = pair(&mut t, array![[1.0, 0.0, 5.0]], array![[1.0, 0.0]]);
        let o = ortho_loss(&mut t, &[lp]);
        assert!((t.scalar(o) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recon_examples() {
        let mut t = Tape::new();
        let h = t.constant(array![[1.0, 1.0]]);
        let r = t.constant(array![[0.0, 0.0]]);
        let l = recon_loss(&mut t, &[h], &[r]);
        assert_eq!(t.scalar(l), 2.0);
        let same = recon_loss(&mut t, &[h], &[h]);
        assert_eq!(t.scalar(same), 0.0);
    }

    #[test]
    fn infonce_examples() {
        let mut t = Tape::new();
        let same = t.constant(Array2::from_elem((4, 3), 0.7));
        let l = align_infonce(&mut t, &[same, same, same], 0.1);
        assert!((t.scalar(l) - 4f64.ln()).abs() < 1e-9);

        let a = t.constant(array![[1.0, 0.0], [-1.0, 0.0]]);
        let l = align_infonce(&mut t, &[a, a], 1.0);
        let want = -(1f64.exp() / (1f64.exp() + (-1f64).exp())).ln();
        assert!((t.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn infonce_falls_with_margin() {
        let loss_at = |spread: f64| {
            let mut t = Tape::new();
            let z = Array2::from_shape_fn((8, 8), |(i, j)| if i == j { 1.0 } else { 1.0 - spread });
            let a = t.constant(z);
            let l = align_infonce(&mut t, &[a, a], 0.1);
            t.scalar(l)
        };
        let values: Vec<f64> = [0.1, 0.3, 0.6, 1.0].iter().map(|&s| loss_at(s)).collect();
        assert!(values[0] < 8f64.ln());
        assert!(values.windows(2).all(|w| w[1] < w[0]), "{values:?}");
    }

    #[test]
    fn mmd_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = normal_matrix(&mut rng, 16, 3);
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let m = mmd_against(&mut t, v, x);
        assert_eq!(t.scalar(m), 0.0);
    }

    #[test]
    fn mmd_calibration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = normal_matrix(&mut rng, 256, 4);
            let y = normal_matrix(&mut rng, 256, 4);
            let mut t = Tape::new();
            let v = t.constant(x);
            let m = mmd_against(&mut t, v, y);
            assert!(t.scalar(m).abs() < 0.05);

            let shifted = normal_matrix(&mut rng, 256, 4).mapv(|v| v + 5.0);
            let y = normal_matrix(&mut rng, 256, 4);
            let v = t.constant(shifted);
            let m = mmd_against(&mut t, v, y);
            assert!(t.scalar(m) > 0.5);
        }
    }

    #[test]
    fn coefficients_start_at_one_tenth() {
        let mut store = ParamStore::new();
        let c = LossCoefficients::new(&mut store);
        for v in c.values(&store) {
            assert!((v - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn total_is_exact_linear_combination() {
        let mut store = ParamStore::new();
        let coef = LossCoefficients::new(&mut store);
        let mut t = Tape::new();
        let label = t.scalar_const(1.0);
        let regs = std::array::from_fn(|_| Some(t.scalar_const(1.0)));
        let terms = LossTerms { label, regularizers: regs };
        let (_, b) = total_loss(&mut t, &store, &coef, &terms, &Regularizer::ALL);
        assert!((b.total - 1.5).abs() < 1e-12);
        assert_eq!(b.total, b.recombine());

        let (v, b) = total_loss(&mut t, &store, &coef, &terms, &[]);
        assert_eq!(b.total, 1.0);
        assert_eq!(b.coefficients, [0.0; 5]);
        assert_eq!(v, label);
    }
}
