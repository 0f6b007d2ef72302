//! Variational heads that split a modality embedding into shared and
//! private Gaussian latents, and the decoder used for reconstruction.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use crate::encoders::Modality;
use crate::nn::{normal_matrix, LayerNorm, Linear, Mlp, ParamStore, Session};
use crate::tape::Var;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Shared/private Gaussian parameters and samples for one modality batch.
/// Every field is a `batch × width` node on the session tape.
#[derive(Clone, Copy, Debug)]
pub struct LatentPair {
    pub modality: Modality,
    pub mu_shared: Var,
    pub logvar_shared: Var,
    pub z_shared: Var,
    pub mu_private: Var,
    pub logvar_private: Var,
    pub z_private: Var,
}

/// `μ + exp(½·logvar) ⊙ ε` on plain arrays.
pub fn reparameterize(mu: &Array2<f64>, logvar: &Array2<f64>, eps: &Array2<f64>) -> Array2<f64> {
    mu + &(logvar.mapv(|v| (0.5 * v).exp()) * eps)
}

/// Tape version of [`reparameterize`]. Noise is drawn from the session rng
/// when the mode samples latents, otherwise `ε = 0` and `z = μ`.
pub fn sample_latent(s: &mut Session, mu: Var, logvar: Var) -> Var {
    if !s.mode.sample_latents {
        return mu;
    }
    let (b, d) = s.tape.shape(mu);
    let eps = normal_matrix(&mut s.rng, b, d);
    let half = s.tape.scale(logvar, 0.5);
    let sigma = s.tape.exp(half);
    let noise = s.tape.mul_const(sigma, Rc::new(eps));
    s.tape.add(mu, noise)
}

#[derive(Clone, Debug)]
pub struct VariationalHead {
    pub modality: Modality,
    trunk: Linear,
    norm: LayerNorm,
    mu_shared: Linear,
    logvar_shared: Linear,
    mu_private: Linear,
    logvar_private: Linear,
    decoder: Mlp,
    dropout: f64,
}

impl VariationalHead {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        modality: Modality,
        hidden: usize,
        d_shared: usize,
        d_private: usize,
        dropout: f64,
    ) -> Self {
        let p = format!("vae.{}", modality.name());
        Self {
            modality,
            trunk: Linear::new(store, rng, &format!("{p}.trunk"), hidden, hidden),
            norm: LayerNorm::new(store, &format!("{p}.norm"), hidden),
            mu_shared: Linear::new(store, rng, &format!("{p}.mu_shared"), hidden, d_shared),
            logvar_shared: Linear::new(store, rng, &format!("{p}.logvar_shared"), hidden, d_shared),
            mu_private: Linear::new(store, rng, &format!("{p}.mu_private"), hidden, d_private),
            logvar_private: Linear::new(store, rng, &format!("{p}.logvar_private"), hidden, d_private),
            decoder: Mlp::new(store, rng, &format!("{p}.decoder"), d_shared + d_private, hidden, hidden),
            dropout,
        }
    }

    /// Parameter-name prefix of this head (trunk, latent heads and decoder).
    pub fn prefix(&self) -> String {
        format!("vae.{}", self.modality.name())
    }

    pub fn encode(&self, s: &mut Session, embedding: Var) -> LatentPair {
        let h = self.trunk.forward(s, embedding);
        let h = s.tape.relu(h);
        let h = self.norm.forward(s, h);
        let h = s.dropout(h, self.dropout);

        let mu_shared = self.mu_shared.forward(s, h);
        let raw = self.logvar_shared.forward(s, h);
        let logvar_shared = s.tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);
        let mu_private = self.mu_private.forward(s, h);
        let raw = self.logvar_private.forward(s, h);
        let logvar_private = s.tape.clamp(raw, LOGVAR_MIN, LOGVAR_MAX);

        let z_shared = sample_latent(s, mu_shared, logvar_shared);
        let z_private = sample_latent(s, mu_private, logvar_private);
        LatentPair {
            modality: self.modality,
            mu_shared,
            logvar_shared,
            z_shared,
            mu_private,
            logvar_private,
            z_private,
        }
    }

    /// Reconstruct the embedding from both latents.
    pub fn reconstruct(&self, s: &mut Session, z_shared: Var, z_private: Var) -> Var {
        let z = s.tape.concat_cols(&[z_shared, z_private]);
        self.decoder.forward(s, z)
    }
}
