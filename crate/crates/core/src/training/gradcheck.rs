use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{Molecule, TaskType};
use crate::encoders::Batch;
use crate::error::Result;
use crate::losses::Regularizer;
use crate::model::Model;
use crate::nn::{Mode, Session};
use crate::tape::Gradients;

/// Which scalar the harness differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    Total,
    Label,
    Term(Regularizer),
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub tolerance: f64,
    /// Central-difference step.
    pub step: f64,
    /// Entries compared per parameter tensor (all of them if smaller).
    pub max_entries: usize,
    /// Seed of the dropout/latent noise, replayed for every evaluation.
    pub noise_seed: u64,
    pub active: Vec<Regularizer>,
    pub objective: Objective,
    /// Multiply the analytic gradient of every tensor whose name starts
    /// with the given prefix. Used to check that the harness notices.
    pub corrupt: Option<(String, f64)>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-4,
            step: 1e-5,
            max_entries: 6,
            noise_seed: 17,
            active: Regularizer::ALL.to_vec(),
            objective: Objective::Total,
            corrupt: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_abs_gradient: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub objective: Objective,
    pub tolerance: f64,
    pub groups: Vec<GroupCheck>,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn failing(&self) -> impl Iterator<Item = &GroupCheck> {
        self.groups.iter().filter(|g| !g.passed)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }
}

/// Four small molecules with fixed labels, for gradient checks and smoke runs.
pub fn fixture_batch(task_type: TaskType, n_tasks: usize, size: usize) -> Result<Batch> {
    const SMILES: [&str; 4] = ["CCO", "c1cc[nH]c1", "CC(=O)N", "OC1CC1"];
    let mols: Vec<Molecule> = SMILES[..size.clamp(1, 4)]
        .iter()
        .map(|s| Molecule::from_smiles(s, 0))
        .collect::<Result<_>>()?;
    let refs: Vec<&Molecule> = mols.iter().collect();
    let mut batch = Batch::from_molecules(&refs)?;
    batch.labels = ndarray::Array2::from_shape_fn((refs.len(), n_tasks), |(i, k)| match task_type {
        TaskType::Classification => ((i + k) % 2) as f64,
        TaskType::Regression => 0.7 * i as f64 - 0.4 * k as f64 - 0.5,
    });
    batch.mask = ndarray::Array2::ones((refs.len(), n_tasks));
    Ok(batch)
}

fn evaluate(model: &Model, batch: &Batch, opts: &GradCheckOptions, grad: bool) -> Result<(f64, Option<Gradients>)> {
    let mut s = Session::new(&model.store, Mode::TRAIN, ChaCha8Rng::seed_from_u64(opts.noise_seed));
    let fwd = model.forward(&mut s, batch);
    let monitor = !matches!(opts.objective, Objective::Total);
    let (terms, total) = model.loss_terms(&mut s, batch, &fwd, &opts.active, monitor)?;
    let target = match opts.objective {
        Objective::Total => total.0,
        Objective::Label => terms.label,
        Objective::Term(r) => terms.regularizers[r.index()].expect("monitored term is computed"),
    };
    let value = s.tape.scalar(target);
    Ok((value, grad.then(|| s.tape.backward(target))))
}

/// Compare analytic and central finite-difference gradients for every
/// parameter tensor of `model`.
pub fn gradient_check(model: &Model, batch: &Batch, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let (_, grads) = evaluate(model, batch, opts, true)?;
    let grads = grads.expect("gradients requested");
    let mut probe = model.clone();
    let mut pick = ChaCha8Rng::seed_from_u64(opts.noise_seed ^ 0x9e37);
    let mut groups = Vec::new();

    for (id, param) in model.store.iter() {
        let value = &param.value;
        let mut analytic = grads.param_or_zero(id, value);
        if let Some((prefix, factor)) = &opts.corrupt {
            if param.name.starts_with(prefix.as_str()) {
                analytic.mapv_inplace(|g| g * factor);
            }
        }
        let flat: Vec<f64> = analytic.iter().copied().collect();
        let n = flat.len();
        let chosen: Vec<usize> = if n <= opts.max_entries {
            (0..n).collect()
        } else {
            let mut by_size: Vec<usize> = (0..n).collect();
            by_size.sort_by(|&a, &b| flat[b].abs().total_cmp(&flat[a].abs()).then(a.cmp(&b)));
            let top = opts.max_entries / 2;
            let mut chosen: Vec<usize> = by_size[..top].to_vec();
            let rest = &by_size[top..];
            chosen.extend(sample(&mut pick, rest.len(), opts.max_entries - top).into_iter().map(|i| rest[i]));
            chosen
        };

        let cols = value.ncols();
        let mut max_err = 0.0f64;
        for &e in &chosen {
            let (r, c) = (e / cols, e % cols);
            // Retrying with a smaller step separates true errors from
            // differences that straddle a relu or clamp kink.
            let mut best = f64::INFINITY;
            for h in [opts.step, opts.step * 0.1] {
                let orig = value[[r, c]];
                probe.store.value_mut(id)[[r, c]] = orig + h;
                let plus = evaluate(&probe, batch, opts, false)?.0;
                probe.store.value_mut(id)[[r, c]] = orig - h;
                let minus = evaluate(&probe, batch, opts, false)?.0;
                probe.store.value_mut(id)[[r, c]] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = flat[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
                best = best.min(err);
                if best < opts.tolerance {
                    break;
                }
            }
            max_err = max_err.max(best);
        }
        groups.push(GroupCheck {
            name: param.name.clone(),
            entries: chosen.len(),
            max_abs_gradient: flat.iter().fold(0.0, |m, g| m.max(g.abs())),
            max_rel_error: max_err,
            passed: max_err < opts.tolerance,
        });
    }
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradCheckReport {
        objective: opts.objective,
        tolerance: opts.tolerance,
        groups,
        passed,
    })
}

/// Gradients smaller than this are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model() -> Model {
        Model::new(ModelConfig::new(8, 1, TaskType::Regression), 5)
    }

    #[test]
    fn random_init_passes_and_lists_each_tensor_once() {
        let m = model();
        let b = fixture_batch(TaskType::Regression, 1, 2).unwrap();
        let report = gradient_check(&m, &b, &GradCheckOptions::default()).unwrap();
        let worst: Vec<_> = report.failing().collect();
        assert!(report.passed, "{worst:?}");
        assert_eq!(report.groups.len(), m.store.len());
        let mut names: Vec<_> = report.groups.iter().map(|g| g.name.clone()).collect();
        names.dedup();
        assert_eq!(names.len(), m.store.len());
    }

    #[test]
    fn corrupted_group_is_the_only_failure() {
        let m = model();
        let b = fixture_batch(TaskType::Regression, 1, 2).unwrap();
        let opts = GradCheckOptions {
            corrupt: Some(("predict.1.weight".into(), 2.0)),
            ..Default::default()
        };
        let report = gradient_check(&m, &b, &opts).unwrap();
        let failing: Vec<_> = report.failing().map(|g| g.name.as_str()).collect();
        assert_eq!(failing, ["predict.1.weight"]);
    }
}
