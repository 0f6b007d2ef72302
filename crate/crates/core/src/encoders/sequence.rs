use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;

use super::batch::SequenceBatch;
use crate::chem::Vocabulary;
use crate::nn::{uniform_init, LayerNorm, Linear, Mlp, ParamId, ParamStore, Session};
use crate::tape::Var;

#[derive(Clone, Copy, Debug)]
struct LstmDirection {
    input: Linear,
    recurrent: ParamId,
}

#[derive(Clone, Debug)]
struct AttentionLayer {
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
    norm_attn: LayerNorm,
    ffn: Mlp,
    norm_ffn: LayerNorm,
}

/// Token embedding, one bidirectional LSTM layer, a stack of
/// self-attention layers and mean pooling over real positions.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    embedding: ParamId,
    forward: LstmDirection,
    backward: LstmDirection,
    layers: Vec<AttentionLayer>,
    heads: usize,
    hidden: usize,
    dropout: f64,
}

impl SequenceEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        hidden: usize,
        layers: usize,
        heads: usize,
        dropout: f64,
    ) -> Self {
        assert!(hidden.is_multiple_of(2) && hidden.is_multiple_of(heads), "hidden must split into directions and heads");
        let emb = hidden / 2;
        let half = hidden / 2;
        let embedding = store.add(
            "seq.embedding",
            uniform_init(rng, Vocabulary::standard().len(), emb, 1),
        );
        let mut direction = |name: &str| LstmDirection {
            input: Linear::new(store, rng, &format!("seq.lstm.{name}.input"), emb, 4 * half),
            recurrent: store.add(
                format!("seq.lstm.{name}.recurrent"),
                uniform_init(rng, half, 4 * half, half),
            ),
        };
        let forward = direction("fwd");
        let backward = direction("bwd");
        let layers = (0..layers)
            .map(|l| {
                let p = format!("seq.attn{l}");
                AttentionLayer {
                    query: Linear::new(store, rng, &format!("{p}.query"), hidden, hidden),
                    key: Linear::new(store, rng, &format!("{p}.key"), hidden, hidden),
                    value: Linear::new(store, rng, &format!("{p}.value"), hidden, hidden),
                    output: Linear::new(store, rng, &format!("{p}.output"), hidden, hidden),
                    norm_attn: LayerNorm::new(store, &format!("{p}.norm_attn"), hidden),
                    ffn: Mlp::new(store, rng, &format!("{p}.ffn"), hidden, 2 * hidden, hidden),
                    norm_ffn: LayerNorm::new(store, &format!("{p}.norm_ffn"), hidden),
                }
            })
            .collect();
        Self {
            embedding,
            forward,
            backward,
            layers,
            heads,
            hidden,
            dropout,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Run one direction over time-major ids; returns `max_len·B × hidden/2`.
    fn run_lstm(&self, s: &mut Session, dir: &LstmDirection, ids: &Rc<[usize]>, b: usize, steps: usize) -> Var {
        let half = self.hidden / 2;
        let table = s.p(self.embedding);
        let x = s.tape.gather_rows(table, ids.clone());
        let xp = dir.input.forward(s, x);
        let w_h = s.p(dir.recurrent);
        let mut h = s.tape.constant(Array2::zeros((b, half)));
        let mut c = s.tape.constant(Array2::zeros((b, half)));
        let mut outputs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = s.tape.slice_rows(xp, t * b, b);
            let hh = s.tape.matmul(h, w_h);
            let gates = s.tape.add(xt, hh);
            let i = s.tape.slice_cols(gates, 0, half);
            let f = s.tape.slice_cols(gates, half, half);
            let g = s.tape.slice_cols(gates, 2 * half, half);
            let o = s.tape.slice_cols(gates, 3 * half, half);
            let i = s.tape.sigmoid(i);
            let f = s.tape.sigmoid(f);
            let g = s.tape.tanh(g);
            let o = s.tape.sigmoid(o);
            let keep = s.tape.mul(f, c);
            let write = s.tape.mul(i, g);
            c = s.tape.add(keep, write);
            let tc = s.tape.tanh(c);
            h = s.tape.mul(o, tc);
            outputs.push(h);
        }
        s.tape.concat_rows(&outputs)
    }

    fn attention(&self, s: &mut Session, layer: &AttentionLayer, x: Var, lengths: &[usize]) -> Var {
        let q = layer.query.forward(s, x);
        let k = layer.key.forward(s, x);
        let v = layer.value.forward(s, x);
        let dh = self.hidden / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_sample = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &len in lengths {
            let mut per_head = Vec::with_capacity(self.heads);
            for head in 0..self.heads {
                let qs = s.tape.slice_rows(q, start, len);
                let qs = s.tape.slice_cols(qs, head * dh, dh);
                let ks = s.tape.slice_rows(k, start, len);
                let ks = s.tape.slice_cols(ks, head * dh, dh);
                let vs = s.tape.slice_rows(v, start, len);
                let vs = s.tape.slice_cols(vs, head * dh, dh);
                let kt = s.tape.transpose(ks);
                let scores = s.tape.matmul(qs, kt);
                let scores = s.tape.scale(scores, scale);
                let attn = s.tape.softmax_rows(scores);
                per_head.push(s.tape.matmul(attn, vs));
            }
            per_sample.push(s.tape.concat_cols(&per_head));
            start += len;
        }
        let ctx = s.tape.concat_rows(&per_sample);
        let out = layer.output.forward(s, ctx);
        let out = s.dropout(out, self.dropout);
        let y = s.tape.add(x, out);
        let y = layer.norm_attn.forward(s, y);
        let f = layer.ffn.forward(s, y);
        let f = s.dropout(f, self.dropout);
        let z = s.tape.add(y, f);
        layer.norm_ffn.forward(s, z)
    }

    /// Per-position outputs packed sample after sample (`Σ T_b × hidden`).
    pub fn positions(&self, s: &mut Session, batch: &SequenceBatch) -> Var {
        let b = batch.batch_size();
        let steps = batch.max_len;
        let fwd = self.run_lstm(s, &self.forward, &batch.forward_ids, b, steps);
        let bwd = self.run_lstm(s, &self.backward, &batch.backward_ids, b, steps);
        let mut fwd_idx = Vec::with_capacity(batch.total_tokens());
        let mut bwd_idx = Vec::with_capacity(batch.total_tokens());
        for (j, &len) in batch.lengths.iter().enumerate() {
            for p in 0..len {
                fwd_idx.push(p * b + j);
                bwd_idx.push((len - 1 - p) * b + j);
            }
        }
        let fwd = s.tape.gather_rows(fwd, fwd_idx.into());
        let bwd = s.tape.gather_rows(bwd, bwd_idx.into());
        let mut x = s.tape.concat_cols(&[fwd, bwd]);
        for layer in &self.layers {
            x = self.attention(s, layer, x, &batch.lengths);
        }
        x
    }

    /// Mean-pooled sequence embedding, `batch × hidden`.
    pub fn forward(&self, s: &mut Session, batch: &SequenceBatch) -> Var {
        let x = self.positions(s, batch);
        let owner: Vec<usize> = batch
            .lengths
            .iter()
            .enumerate()
            .flat_map(|(j, &len)| std::iter::repeat_n(j, len))
            .collect();
        let sums = s.tape.segment_sum(x, owner.into(), batch.batch_size());
        let inv = Array2::from_shape_fn((batch.batch_size(), 1), |(j, _)| 1.0 / batch.lengths[j] as f64);
        let inv = s.tape.constant(inv);
        s.tape.mul_col(sums, inv)
    }
}
