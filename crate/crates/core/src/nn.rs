//! Named parameters and the small set of layers the model is built from.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};

use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
}

/// Flat, insertion-ordered collection of named parameter matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter {name}");
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value });
        id
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Set every parameter whose name starts with `prefix` to zero.
    pub fn zero_prefix(&mut self, prefix: &str) -> usize {
        let mut n = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.value.fill(0.0);
            n += 1;
        }
        n
    }
}

/// Uniform `±1/sqrt(fan_in)` initialisation.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Array2<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| StandardNormal.sample(rng))
}

/// What the stochastic parts of a forward pass do.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    pub dropout: bool,
    pub sample_latents: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        dropout: true,
        sample_latents: true,
    };
    pub const EVAL: Mode = Mode {
        dropout: false,
        sample_latents: false,
    };
}

/// One forward pass: tape, read-only parameters, mode and randomness.
pub struct Session<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    pub mode: Mode,
    pub rng: ChaCha8Rng,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode, rng: ChaCha8Rng) -> Self {
        Self {
            tape: Tape::new(),
            store,
            mode,
            rng,
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.tape.param(self.store, id)
    }

    /// Inverted dropout; identity when dropout is off or `rate` is zero.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.mode.dropout || rate <= 0.0 {
            return x;
        }
        let (m, n) = self.tape.shape(x);
        let keep = Bernoulli::new(1.0 - rate).expect("dropout rate in [0, 1)");
        let scale = 1.0 / (1.0 - rate);
        let mask = Array2::from_shape_fn((m, n), |_| {
            if keep.sample(&mut self.rng) {
                scale
            } else {
                0.0
            }
        });
        self.tape.mul_const(x, Rc::new(mask))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, fan_in, fan_out, fan_in));
        let bias = store.add(format!("{name}.bias"), uniform_init(rng, 1, fan_out, fan_in));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let w = s.p(self.weight);
        let b = s.p(self.bias);
        let h = s.tape.matmul(x, w);
        s.tape.add_row(h, b)
    }
}

/// Row-wise layer normalisation with learned gain and bias.
#[derive(Clone, Copy, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Array2::ones((1, width)));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, width)));
        Self { gain, bias }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let n = s.tape.layer_norm_rows(x, Self::EPS);
        let g = s.p(self.gain);
        let b = s.p(self.bias);
        let y = s.tape.mul_row(n, g);
        s.tape.add_row(y, b)
    }
}

/// `linear → relu → linear`.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub first: Linear,
    pub second: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Self {
        Self {
            first: Linear::new(store, rng, &format!("{name}.0"), input, hidden),
            second: Linear::new(store, rng, &format!("{name}.1"), hidden, output),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.first.forward(s, x);
        let h = s.tape.relu(h);
        self.second.forward(s, h)
    }
}
