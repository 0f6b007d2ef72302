//! Multi-seed runs and their summaries.

use serde::{Deserialize, Serialize};

use crate::chem::{Dataset, TaskType};
use crate::error::Result;

use super::config::{AblationMode, RunConfig};
use super::train::{mean_std, run_seed, EpochRecord, SeedRun};

pub fn metric_name(task_type: TaskType) -> &'static str {
    match task_type {
        TaskType::Classification => "roc_auc",
        TaskType::Regression => "rmse",
    }
}

/// `mean ± std` with three decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ± {std:.3}")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetric {
    pub seed: u64,
    pub test_metric: f64,
    pub best_epoch: usize,
    pub best_valid: Option<f64>,
}

/// Test metrics of one configuration over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub ablation: AblationMode,
    pub per_seed: Vec<SeedMetric>,
    pub mean: f64,
    pub std: f64,
    pub summary: String,
}

impl ModeSummary {
    fn new(ablation: AblationMode, runs: &[SeedRun]) -> Self {
        let per_seed: Vec<SeedMetric> = runs
            .iter()
            .map(|r| SeedMetric {
                seed: r.seed,
                test_metric: r.test_metric,
                best_epoch: r.outcome.best_epoch,
                best_valid: r.outcome.best_valid,
            })
            .collect();
        let values: Vec<f64> = per_seed.iter().map(|s| s.test_metric).collect();
        let (mean, std) = mean_std(&values);
        Self {
            ablation,
            per_seed,
            mean,
            std,
            summary: format_mean_std(mean, std),
        }
    }

    pub fn metrics(&self) -> Vec<f64> {
        self.per_seed.iter().map(|s| s.test_metric).collect()
    }
}

/// Output of a plain multi-seed training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub metric: String,
    pub seeds: Vec<u64>,
    pub result: ModeSummary,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "dataset: {}\nablation: {}\nmetric: {}\n\nseed\ttest\tbest_epoch\n",
            self.dataset, self.result.ablation, self.metric
        );
        for s in &self.result.per_seed {
            out += &format!("{}\t{:.4}\t{}\n", s.seed, s.test_metric, s.best_epoch);
        }
        out += &format!("\n{}: {}\n", self.metric, self.result.summary);
        out
    }
}

/// Train one configuration on every seed of `config.seeds`. The second
/// value holds every epoch record in run order.
pub fn run_seeds(config: &RunConfig, data: &Dataset) -> Result<(RunReport, Vec<SeedRun>)> {
    config.validate()?;
    let runs = config
        .seeds
        .iter()
        .map(|&seed| run_seed(config, data, seed))
        .collect::<Result<Vec<_>>>()?;
    let report = RunReport {
        dataset: data.name.clone(),
        metric: metric_name(data.task_type).into(),
        seeds: config.seeds.clone(),
        result: ModeSummary::new(config.ablation, &runs),
    };
    Ok((report, runs))
}

/// Three-column comparison of LBL, BOT and ALL over shared seeds and splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset: String,
    pub metric: String,
    pub columns: Vec<AblationMode>,
    pub seeds: Vec<u64>,
    /// Every mode ran on exactly `seeds`, with the same splits.
    pub seeds_identical: bool,
    pub modes: Vec<ModeSummary>,
}

impl AblationReport {
    pub fn mode(&self, m: AblationMode) -> &ModeSummary {
        self.modes.iter().find(|s| s.ablation == m).expect("all three modes present")
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dataset: {}\nmetric: {}\nseeds: {:?}\n\n", self.dataset, self.metric, self.seeds);
        let header: Vec<&str> = self.columns.iter().map(|m| m.label()).collect();
        out += &format!("{}\n", header.join("\t\t"));
        let row: Vec<&str> = self.modes.iter().map(|m| m.summary.as_str()).collect();
        out += &format!("{}\n", row.join("\t"));
        out
    }
}

pub struct AblationRun {
    pub report: AblationReport,
    pub records: Vec<EpochRecord>,
}

pub fn run_ablation(config: &RunConfig, data: &Dataset) -> Result<AblationRun> {
    config.validate()?;
    let mut modes = Vec::new();
    let mut records = Vec::new();
    let mut seen_seeds = Vec::new();
    for mode in AblationMode::ORDER {
        let cfg = RunConfig {
            ablation: mode,
            ..config.clone()
        };
        let (report, runs) = run_seeds(&cfg, data)?;
        seen_seeds.push(report.seeds.clone());
        records.extend(runs.into_iter().flat_map(|r| r.outcome.records));
        modes.push(report.result);
    }
    let seeds_identical = seen_seeds.windows(2).all(|w| w[0] == w[1]);
    Ok(AblationRun {
        report: AblationReport {
            dataset: data.name.clone(),
            metric: metric_name(data.task_type).into(),
            columns: AblationMode::ORDER.to_vec(),
            seeds: config.seeds.clone(),
            seeds_identical,
            modes,
        },
        records,
    })
}
