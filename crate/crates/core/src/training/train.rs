use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::chem::{split_dataset, Dataset, LabeledMolecule};
use crate::encoders::Batch;
use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::Model;
use crate::nn::{Mode, ParamId, ParamStore, Session};

use super::config::{AblationMode, RunConfig};
use super::metrics::{better, task_metric};
use super::optim::{clip_global_norm, Adam};
use super::schedule::NoamSchedule;

/// Seed of the fixed noise stream used when inference samples latents.
const INFERENCE_NOISE_SEED: u64 = 0x5eed;

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub seed: u64,
    /// 1-based.
    pub epoch: usize,
    pub ablation: AblationMode,
    /// Mean over the epoch's minibatches.
    pub train: LossBreakdown,
    /// Validation ROC-AUC or RMSE; `None` without a validation set.
    pub valid_metric: Option<f64>,
    /// Learning rate of the epoch's last optimizer step.
    pub lr: f64,
    /// Largest pre-clip global gradient norm seen in the epoch.
    pub max_grad_norm: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch, or of the last epoch
    /// when no validation data was given.
    pub model: Model,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
}

fn batches<'a>(records: &'a [LabeledMolecule], order: &[usize], size: usize) -> Vec<Vec<&'a LabeledMolecule>> {
    order
        .chunks(size)
        .map(|chunk| chunk.iter().map(|&i| &records[i]).collect())
        .collect()
}

/// Warmup and decay lengths for a run of `steps_per_epoch · epochs` steps.
pub fn schedule_for(config: &RunConfig, steps_per_epoch: usize) -> Result<NoamSchedule> {
    let total = steps_per_epoch * config.epochs;
    let warmup = config.warmup_steps.unwrap_or(2 * steps_per_epoch).max(1);
    let horizon = total.saturating_sub(warmup).max(1);
    NoamSchedule::new(config.lr_init, config.lr_max, config.lr_final, warmup, horizon)
}

/// Build a model for `train` with the regression head bias at the
/// training-label means.
pub fn init_model(config: &RunConfig, seed: u64, train: &Dataset) -> Model {
    let mut model = Model::new(config.model_config(train.n_tasks), seed);
    if train.task_type == crate::chem::TaskType::Regression {
        let means: Vec<f64> = (0..train.n_tasks).map(|k| train.label_mean(k).unwrap_or(0.0)).collect();
        model.set_output_bias(&means);
    }
    model
}

pub fn train(config: &RunConfig, seed: u64, train: &Dataset, valid: Option<&Dataset>) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut model = init_model(config, master.next_u64(), train);
    let ids: Vec<ParamId> = model.store.ids().collect();
    let steps_per_epoch = train.len().div_ceil(config.batch_size);
    let schedule = schedule_for(config, steps_per_epoch)?;
    let active = config.ablation.active();
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut master);
        let mut breakdowns = Vec::with_capacity(steps_per_epoch);
        let mut lr = 0.0;
        let mut max_norm = 0.0f64;
        for chunk in batches(&train.records, &order, config.batch_size) {
            step += 1;
            let batch = Batch::from_records(&chunk)?;
            let session_rng = ChaCha8Rng::seed_from_u64(master.next_u64());
            let mut grads = {
                let mut s = Session::new(&model.store, Mode::TRAIN, session_rng);
                let fwd = model.forward(&mut s, &batch);
                let (total, lb) = model.loss(&mut s, &batch, &fwd, active, config.monitor_inactive)?;
                if let Some(term) = lb.is_finite() {
                    return Err(Error::Numerical {
                        term: term.into(),
                        epoch,
                        step,
                    });
                }
                breakdowns.push(lb);
                s.tape.backward(total)
            };
            let norm = clip_global_norm(&mut grads, &ids, config.clip_norm);
            if !norm.is_finite() {
                return Err(Error::Numerical {
                    term: "gradient".into(),
                    epoch,
                    step,
                });
            }
            max_norm = max_norm.max(norm);
            lr = schedule.lr(step);
            adam.step(&mut model.store, &grads, lr);
        }

        let valid_metric = match valid {
            Some(v) if !v.is_empty() => Some(evaluate(&model, v, config)?),
            _ => None,
        };
        if let Some(m) = valid_metric {
            let improved = best.as_ref().is_none_or(|(b, _, _)| better(train.task_type, m, *b));
            if improved {
                best = Some((m, epoch, model.store.clone()));
            }
        }
        let record = EpochRecord {
            seed,
            epoch,
            ablation: config.ablation,
            train: LossBreakdown::mean(&breakdowns),
            valid_metric,
            lr,
            max_grad_norm: max_norm,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::debug!(
            "seed {seed} epoch {epoch}: loss {:.5} valid {:?} lr {:.2e}",
            record.train.total,
            record.valid_metric,
            lr
        );
        records.push(record);
    }

    let (best_epoch, best_valid) = match best {
        Some((m, e, store)) => {
            model.store = store;
            (e, Some(m))
        }
        None => (config.epochs, None),
    };
    Ok(TrainOutcome {
        model,
        records,
        best_epoch,
        best_valid,
    })
}

fn inference_mode(config: &RunConfig) -> Mode {
    Mode {
        dropout: false,
        sample_latents: !config.deterministic_inference,
    }
}

/// Raw model outputs (`len × n_tasks`) in dataset order.
pub fn predict(model: &Model, data: &Dataset, config: &RunConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), model.config.n_tasks));
    let order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(INFERENCE_NOISE_SEED);
    let mut row = 0;
    for chunk in batches(&data.records, &order, config.batch_size) {
        let batch = Batch::from_records(&chunk)?;
        let mut s = Session::new(&model.store, inference_mode(config), ChaCha8Rng::seed_from_u64(rng.next_u64()));
        let fwd = model.forward(&mut s, &batch);
        let p = s.tape.value(fwd.predictions);
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..]).assign(p);
        row += chunk.len();
    }
    Ok(out)
}

/// Per-molecule gate weights (`len × 3`) in dataset order.
pub fn gate_weights(model: &Model, data: &Dataset, config: &RunConfig) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((data.len(), 3));
    let order: Vec<usize> = (0..data.len()).collect();
    let mut row = 0;
    for chunk in batches(&data.records, &order, config.batch_size) {
        let batch = Batch::from_records(&chunk)?;
        let mut s = Session::new(&model.store, Mode::EVAL, ChaCha8Rng::seed_from_u64(0));
        let fwd = model.forward(&mut s, &batch);
        out.slice_mut(ndarray::s![row..row + chunk.len(), ..])
            .assign(s.tape.value(fwd.gate.weights));
        row += chunk.len();
    }
    Ok(out)
}

/// ROC-AUC (mean over tasks) or RMSE of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset, config: &RunConfig) -> Result<f64> {
    let preds = predict(model, data, config)?;
    let batch = Batch::from_records(&data.records.iter().collect::<Vec<_>>())?;
    task_metric(&preds, &batch.labels, &batch.mask, data.task_type)
}

/// Result of one seed of the split/train/test protocol.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: TrainOutcome,
    pub test_metric: f64,
    /// Split sizes (train, valid, test).
    pub sizes: [usize; 3],
}

/// Split `data` with `seed`, train on the first part, select on the second
/// and score the third.
pub fn run_seed(config: &RunConfig, data: &Dataset, seed: u64) -> Result<SeedRun> {
    let (tr, va, te) = split_dataset(data, config.split, seed)?;
    let outcome = train(config, seed, &tr, Some(&va))?;
    let test_metric = evaluate(&outcome.model, &te, config)?;
    log::info!(
        "seed {seed} [{}]: best epoch {} valid {:?} test {test_metric:.4}",
        config.ablation,
        outcome.best_epoch,
        outcome.best_valid
    );
    Ok(SeedRun {
        seed,
        outcome,
        test_metric,
        sizes: [tr.len(), va.len(), te.len()],
    })
}

/// Sample mean and standard deviation (n − 1 denominator, 0 for n = 1).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
