//! The assembled network: encoders, variational heads, fusion and head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::TaskType;
use crate::disentangle::{LatentPair, VariationalHead};
use crate::encoders::{Batch, GeometryEncoder, GraphEncoder, Modality, SequenceEncoder};
use crate::error::Result;
use crate::fusion::{GateOutput, GatedFusion, PredictionHead};
use crate::losses::{
    align_infonce, kl_shared, mmd_private, ortho_loss, recon_loss, task_loss, total_loss, LossBreakdown,
    LossCoefficients, LossTerms, Regularizer,
};
use crate::nn::{ParamStore, Session};
use crate::tape::Var;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub d_shared: usize,
    pub d_private: usize,
    pub depth: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub n_tasks: usize,
    pub task_type: TaskType,
}

impl ModelConfig {
    pub fn new(hidden_dim: usize, n_tasks: usize, task_type: TaskType) -> Self {
        Self {
            hidden_dim,
            d_shared: hidden_dim / 4,
            d_private: hidden_dim / 4,
            depth: 3,
            attention_layers: 2,
            attention_heads: 2,
            dropout: 0.1,
            temperature: 0.1,
            n_tasks,
            task_type,
        }
    }
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Pooled embedding per modality, in [`Modality::ALL`] order.
    pub embeddings: [Var; 3],
    pub latents: [LatentPair; 3],
    pub gate: GateOutput,
    /// Raw predictions, `batch × n_tasks`.
    pub predictions: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    sequence: SequenceEncoder,
    graph: GraphEncoder,
    geometry: GeometryEncoder,
    heads: [VariationalHead; 3],
    fusion: GatedFusion,
    head: PredictionHead,
    pub coefficients: LossCoefficients,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let sequence = SequenceEncoder::new(
            &mut store,
            &mut rng,
            c.hidden_dim,
            c.attention_layers,
            c.attention_heads,
            c.dropout,
        );
        let graph = GraphEncoder::new(&mut store, &mut rng, c.hidden_dim, c.depth);
        let geometry = GeometryEncoder::new(&mut store, &mut rng, c.hidden_dim, c.depth);
        let heads = Modality::ALL.map(|m| {
            VariationalHead::new(&mut store, &mut rng, m, c.hidden_dim, c.d_shared, c.d_private, c.dropout)
        });
        let fusion = GatedFusion::new(&mut store, &mut rng, 3, c.d_shared);
        let head = PredictionHead::new(&mut store, &mut rng, c.d_shared, c.n_tasks);
        let coefficients = LossCoefficients::new(&mut store);
        Self {
            config,
            store,
            sequence,
            graph,
            geometry,
            heads,
            fusion,
            head,
            coefficients,
        }
    }

    pub fn set_output_bias(&mut self, bias: &[f64]) {
        self.head.set_output_bias(&mut self.store, bias);
    }

    pub fn heads(&self) -> &[VariationalHead; 3] {
        &self.heads
    }

    pub fn embed(&self, s: &mut Session, batch: &Batch) -> [Var; 3] {
        [
            self.sequence.forward(s, &batch.sequences),
            self.graph.forward(s, &batch.graphs),
            self.geometry.forward(s, &batch.graphs),
        ]
    }

    pub fn forward(&self, s: &mut Session, batch: &Batch) -> Forward {
        let embeddings = self.embed(s, batch);
        let latents = [0, 1, 2].map(|m| self.heads[m].encode(s, embeddings[m]));
        let shared = latents.map(|l| l.z_shared);
        let gate = self.fusion.forward(s, &shared);
        let predictions = self.head.forward(s, gate.output);
        Forward {
            embeddings,
            latents,
            gate,
            predictions,
        }
    }

    /// Build the loss terms needed by `active` and their weighted total.
    /// Regularisers outside `active` are still evaluated when `monitor` is
    /// set, but only for reporting; they never feed the returned total.
    pub fn loss(
        &self,
        s: &mut Session,
        batch: &Batch,
        fwd: &Forward,
        active: &[Regularizer],
        monitor: bool,
    ) -> Result<(Var, LossBreakdown)> {
        Ok(self.loss_terms(s, batch, fwd, active, monitor)?.1)
    }

    /// Like [`Model::loss`], also returning the individual term nodes.
    pub fn loss_terms(
        &self,
        s: &mut Session,
        batch: &Batch,
        fwd: &Forward,
        active: &[Regularizer],
        monitor: bool,
    ) -> Result<(LossTerms, (Var, LossBreakdown))> {
        let label = task_loss(
            &mut s.tape,
            fwd.predictions,
            &batch.labels,
            &batch.mask,
            self.config.task_type,
        )?;
        let want = |r: Regularizer| monitor || active.contains(&r);
        let mut regs = [None; 5];
        if want(Regularizer::KlShared) {
            regs[0] = Some(kl_shared(&mut s.tape, &fwd.latents));
        }
        if want(Regularizer::MmdPrivate) && batch.len() >= 2 {
            regs[1] = Some(mmd_private(&mut s.tape, &fwd.latents, &mut s.rng));
        }
        if want(Regularizer::Align) && batch.len() >= 2 {
            let shared = fwd.latents.map(|l| l.z_shared);
            regs[2] = Some(align_infonce(&mut s.tape, &shared, self.config.temperature));
        }
        if want(Regularizer::Ortho) {
            regs[3] = Some(ortho_loss(&mut s.tape, &fwd.latents));
        }
        if want(Regularizer::Recon) {
            let recon: Vec<Var> = (0..3)
                .map(|m| {
                    let lp = fwd.latents[m];
                    self.heads[m].reconstruct(s, lp.z_shared, lp.z_private)
                })
                .collect();
            regs[4] = Some(recon_loss(&mut s.tape, &fwd.embeddings, &recon));
        }
        let active: Vec<Regularizer> = active
            .iter()
            .copied()
            .filter(|r| regs[r.index()].is_some())
            .collect();
        let terms = LossTerms {
            label,
            regularizers: regs,
        };
        let total = total_loss(&mut s.tape, &self.store, &self.coefficients, &terms, &active);
        Ok((terms, total))
    }
}
