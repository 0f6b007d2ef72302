//! Per-molecule softmax gating over the shared latents, residual FFN and
//! the prediction head. Private latents have no entry point here.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::nn::{Mlp, ParamStore, Session};
use crate::tape::Var;

/// Tape nodes produced by [`GatedFusion::forward`].
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    /// `batch × M` gate weights.
    pub weights: Var,
    /// `batch × d_s` convex combination of the shared latents.
    pub fused: Var,
    /// `batch × d_s` FFN output over `fused + mean(shared)`.
    pub output: Var,
}

#[derive(Clone, Debug)]
pub struct GatedFusion {
    gate: Mlp,
    ffn: Mlp,
    modalities: usize,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, modalities: usize, d_shared: usize) -> Self {
        assert!(modalities >= 2);
        Self {
            gate: Mlp::new(store, rng, "fusion.gate", modalities * d_shared, d_shared, modalities),
            ffn: Mlp::new(store, rng, "fusion.ffn", d_shared, d_shared, d_shared),
            modalities,
        }
    }

    pub fn gate_weights(&self, s: &mut Session, shared: &[Var]) -> Var {
        assert_eq!(shared.len(), self.modalities);
        let ctx = s.tape.concat_cols(shared);
        let logits = self.gate.forward(s, ctx);
        s.tape.softmax_rows(logits)
    }

    pub fn fuse(&self, s: &mut Session, weights: Var, shared: &[Var]) -> Var {
        let mut acc = None;
        for (i, &z) in shared.iter().enumerate() {
            let w = s.tape.slice_cols(weights, i, 1);
            let term = s.tape.mul_col(z, w);
            acc = Some(match acc {
                None => term,
                Some(a) => s.tape.add(a, term),
            });
        }
        acc.expect("at least one modality")
    }

    pub fn residual_output(&self, s: &mut Session, fused: Var, shared: &[Var]) -> Var {
        let mut sum = shared[0];
        for &z in &shared[1..] {
            sum = s.tape.add(sum, z);
        }
        let mean = s.tape.scale(sum, 1.0 / shared.len() as f64);
        let x = s.tape.add(fused, mean);
        self.ffn.forward(s, x)
    }

    pub fn forward(&self, s: &mut Session, shared: &[Var]) -> GateOutput {
        let weights = self.gate_weights(s, shared);
        let fused = self.fuse(s, weights, shared);
        let output = self.residual_output(s, fused, shared);
        GateOutput { weights, fused, output }
    }
}

/// Plain-array convex combination `Σ w_i z_i` for one molecule.
pub fn fuse_vectors(weights: &[f64], shared: &[&[f64]]) -> Vec<f64> {
    assert_eq!(weights.len(), shared.len());
    let mut out = vec![0.0; shared[0].len()];
    for (w, z) in weights.iter().zip(shared) {
        for (o, v) in out.iter_mut().zip(z.iter()) {
            *o += w * v;
        }
    }
    out
}

/// Two-layer feed-forward prediction head producing raw logits/values.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    mlp: Mlp,
}

impl PredictionHead {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, d_shared: usize, n_tasks: usize) -> Self {
        Self {
            mlp: Mlp::new(store, rng, "predict", d_shared, d_shared, n_tasks),
        }
    }

    pub fn forward(&self, s: &mut Session, output: Var) -> Var {
        self.mlp.forward(s, output)
    }

    /// Overwrite the output bias, e.g. with per-task label means.
    pub fn set_output_bias(&self, store: &mut ParamStore, bias: &[f64]) {
        let b = store.value_mut(self.mlp.second.bias);
        assert_eq!(b.len(), bias.len());
        *b = Array2::from_shape_vec((1, bias.len()), bias.to_vec()).unwrap();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use rand::{Rng, SeedableRng};

    fn setup() -> (ParamStore, GatedFusion, PredictionHead) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = GatedFusion::new(&mut store, &mut rng, 3, 4);
        let p = PredictionHead::new(&mut store, &mut rng, 4, 12);
        (store, f, p)
    }

    fn random_shared(s: &mut Session, rng: &mut ChaCha8Rng, b: usize) -> Vec<Var> {
        (0..3)
            .map(|_| s.tape.constant(Array2::from_shape_fn((b, 4), |_| rng.random_range(-2.0..2.0))))
            .collect()
    }

    #[test]
    fn zero_gate_is_uniform() {
        let (mut store, f, _) = setup();
        store.zero_prefix("fusion.gate");
        let mut s = Session::new(&store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = random_shared(&mut s, &mut rng, 5);
        let w = f.gate_weights(&mut s, &z);
        assert!(s.tape.value(w).iter().all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn gate_rows_lie_on_the_simplex() {
        let (store, f, _) = setup();
        let mut s = Session::new(&store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = random_shared(&mut s, &mut rng, 16);
        let w = f.gate_weights(&mut s, &z);
        for row in s.tape.value(w).rows() {
            assert!(row.iter().all(|&x| x >= 0.0));
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_examples() {
        assert_eq!(fuse_vectors(&[0.5, 0.5], &[&[2.0, 0.0], &[0.0, 2.0]]), vec![1.0, 1.0]);
        let z1 = [0.3, -7.1, 2.5];
        assert_eq!(fuse_vectors(&[1.0, 0.0, 0.0], &[&z1, &[9.0; 3], &[-4.0; 3]]), z1.to_vec());
        let v = [1.5, -2.0];
        let out = fuse_vectors(&[0.2, 0.3, 0.5], &[&v, &v, &v]);
        assert!(out.iter().zip(&v).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn one_hot_gate_selects_on_tape() {
        let (store, f, _) = setup();
        let mut s = Session::new(&store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let z = random_shared(&mut s, &mut rng, 3);
        let w = s.tape.constant(ndarray::array![[0.0, 1.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]]);
        let fused = f.fuse(&mut s, w, &z);
        assert_eq!(s.tape.value(fused), s.tape.value(z[1]));
    }

    #[test]
    fn zero_ffn_and_head_return_biases() {
        let (mut store, f, p) = setup();
        store.zero_prefix("fusion.ffn");
        store.zero_prefix("predict");
        let mut s = Session::new(&store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = random_shared(&mut s, &mut rng, 2);
        let g = f.forward(&mut s, &z);
        assert_eq!(s.tape.shape(g.output), (2, 4));
        assert!(s.tape.value(g.output).iter().all(|&v| v == 0.0));
        let y = p.forward(&mut s, g.output);
        assert_eq!(s.tape.shape(y), (2, 12));
        assert!(s.tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn residual_mean_carries_gradient_past_a_closed_gate() {
        let (store, f, _) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let vals: Vec<Array2<f64>> = (0..3)
            .map(|_| Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0)))
            .collect();
        let mut s = Session::new(&store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let z: Vec<Var> = vals.iter().map(|v| s.tape.input(v.clone())).collect();
        let w = s.tape.constant(ndarray::array![[1.0, 0.0, 0.0]]);
        let fused = f.fuse(&mut s, w, &z);
        let out = f.residual_output(&mut s, fused, &z);
        let total = s.tape.sum(out);
        let g = s.tape.backward(total);
        for &zi in &z[1..] {
            assert!(g.wrt(zi).unwrap().iter().any(|&x| x.abs() > 1e-8));
        }
    }
}
