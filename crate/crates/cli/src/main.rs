use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use molvae::chem::{split_dataset, Dataset};
use molvae::model::Model;
use molvae::training::{
    checkpoint, fixture_batch, gate_weights, gradient_check, run_ablation, run_seeds, AblationMode, EpochRecord,
    GradCheckOptions, RunConfig,
};

#[derive(Parser, Debug)]
#[command(name = "molvae", version, about = "Multi-modal molecular property models with disentangled latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable. Applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Single seed; shorthand for `--set seeds=N`.
    #[arg(long, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<AblationMode>,
}

fn parse_ablation(s: &str) -> std::result::Result<AblationMode, String> {
    s.parse()
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Subset {
    Train,
    Valid,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a CSV and write the featurized cache plus a summary.
    Featurize {
        /// CSV file; defaults to the configured dataset.
        csv: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train on every configured seed and report test metrics.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on one split of the configured dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        subset: Subset,
        #[command(flatten)]
        common: Common,
    },
    /// Run LBL, BOT and ALL on shared seeds and splits.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Compare analytic and finite-difference gradients on a fixture batch.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Export per-molecule gate weights of a checkpoint.
    Gates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

/// Defaults, then the config file, then `--set`, then the dedicated flags.
fn resolve(common: &Common, base: RunConfig) -> Result<RunConfig> {
    let mut config = base;
    if let Some(path) = &common.config {
        config.apply_file(path)?;
    }
    let mut overrides = common.overrides.clone();
    if let Some(seed) = common.seed {
        overrides.push(format!("seeds={seed}"));
    }
    if let Some(seeds) = &common.seeds {
        let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
        overrides.push(format!("seeds={}", list.join(",")));
    }
    if let Some(mode) = common.ablation {
        overrides.push(format!("ablation={mode}"));
    }
    config.apply_overrides(&overrides)?;
    config.validate()?;
    Ok(config)
}

fn output_dir(common: &Common) -> Result<&Path> {
    fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))?;
    Ok(&common.out)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))?;
    info!("wrote {}", path.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, text)
}

fn write_metrics(path: &Path, records: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write(path, buf)
}

fn featurize(csv: Option<PathBuf>, common: &Common) -> Result<()> {
    let mut config = resolve(common, RunConfig::default())?;
    if let Some(csv) = csv {
        config.dataset = Some(csv);
    }
    let ds = config.load_dataset()?;
    let out = output_dir(common)?;
    let mut cache = Vec::new();
    for r in &ds.records {
        serde_json::to_writer(
            &mut cache,
            &json!({
                "row": r.row,
                "labels": r.labels,
                "label_mask": r.label_mask,
                "molecule": r.molecule,
            }),
        )?;
        cache.push(b'\n');
    }
    write(&out.join("featurized.jsonl"), cache)?;
    let summary = json!({
        "dataset": ds.name,
        "task_type": ds.task_type,
        "parsed": ds.len(),
        "skipped": ds.skipped.len(),
        "tasks": ds.n_tasks,
        "task_names": ds.task_names,
        "conformer_seed": config.conformer_seed,
        "skipped_rows": ds.skipped,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!("parsed {} rows, skipped {}, {} task(s)", ds.len(), ds.skipped.len(), ds.n_tasks);
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let config = resolve(common, RunConfig::default())?;
    let ds = config.load_dataset()?;
    let out = output_dir(common)?;
    write(&out.join("config.txt"), config.to_text())?;
    let (report, runs) = run_seeds(&config, &ds)?;
    let records: Vec<EpochRecord> = runs.iter().flat_map(|r| r.outcome.records.clone()).collect();
    write_metrics(&out.join("metrics.jsonl"), &records)?;
    for r in &runs {
        let path = out.join(format!("checkpoint-seed{}.bin", r.seed));
        checkpoint::save(&path, &r.outcome.model, &config)?;
        info!("wrote {}", path.display());
    }
    write_json(&out.join("report.json"), &report)?;
    let text = report.to_text();
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn subset_of(ds: &Dataset, config: &RunConfig, seed: u64, subset: Subset) -> Result<Dataset> {
    let (tr, va, te) = split_dataset(ds, config.split, seed)?;
    Ok(match subset {
        Subset::Train => tr,
        Subset::Valid => va,
        Subset::Test => te,
        Subset::All => ds.clone(),
    })
}

/// Checkpoint config with any config file and overrides applied on top.
fn checkpoint_config(path: &Path, common: &Common) -> Result<(Model, RunConfig)> {
    let (model, stored) = checkpoint::load(path)?;
    let config = resolve(common, stored)?;
    Ok((model, config))
}

fn eval(checkpoint_path: &Path, subset: Subset, common: &Common) -> Result<()> {
    let (model, config) = checkpoint_config(checkpoint_path, common)?;
    let ds = config.load_dataset()?;
    let out = output_dir(common)?;
    let seed = config.seeds[0];
    let part = subset_of(&ds, &config, seed, subset)?;
    let metric = molvae::training::evaluate(&model, &part, &config)?;
    let name = molvae::training::report::metric_name(ds.task_type);
    write_json(
        &out.join("eval.json"),
        &json!({
            "checkpoint": checkpoint_path,
            "dataset": ds.name,
            "seed": seed,
            "subset": format!("{subset:?}").to_lowercase(),
            "molecules": part.len(),
            "metric": name,
            "value": metric,
        }),
    )?;
    println!("{name}: {metric:.4}");
    Ok(())
}

fn ablate(common: &Common) -> Result<()> {
    let config = resolve(common, RunConfig::default())?;
    let ds = config.load_dataset()?;
    let out = output_dir(common)?;
    write(&out.join("config.txt"), config.to_text())?;
    let run = run_ablation(&config, &ds)?;
    write_metrics(&out.join("metrics.jsonl"), &run.records)?;
    write_json(&out.join("report.json"), &run.report)?;
    let text = run.report.to_text();
    write(&out.join("report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(common: &Common) -> Result<bool> {
    let config = resolve(common, RunConfig::default())?;
    let out = output_dir(common)?;
    let mut small = config.clone();
    small.hidden_dim = config.gradcheck_hidden;
    small.d_shared = None;
    small.d_private = None;
    small.validate()?;
    let n_tasks = config.label_columns.as_ref().map_or(1, Vec::len).max(1);
    let seed = config.seeds[0];
    let model = Model::new(small.model_config(n_tasks), seed);
    let batch = fixture_batch(config.task_type, n_tasks, 2)?;
    let opts = GradCheckOptions {
        tolerance: config.gradcheck_tolerance,
        noise_seed: seed,
        active: config.ablation.active().to_vec(),
        ..Default::default()
    };
    let report = gradient_check(&model, &batch, &opts)?;
    write_json(&out.join("gradcheck.json"), &json!({ "seed": seed, "report": report }))?;
    let mut stdout = std::io::stdout().lock();
    for g in &report.groups {
        let status = if g.passed { "ok" } else { "FAIL" };
        writeln!(stdout, "{status:4} {:<40} {:.3e}", g.name, g.max_rel_error)?;
    }
    writeln!(
        stdout,
        "{} groups, worst relative error {:.3e}, tolerance {:.1e}: {}",
        report.groups.len(),
        report.worst(),
        report.tolerance,
        if report.passed { "pass" } else { "fail" }
    )?;
    Ok(report.passed)
}

fn gates(checkpoint_path: &Path, common: &Common) -> Result<()> {
    let (model, config) = checkpoint_config(checkpoint_path, common)?;
    let ds = config.load_dataset()?;
    let out = output_dir(common)?;
    let weights = gate_weights(&model, &ds, &config)?;
    let molecules: Vec<_> = ds
        .records
        .iter()
        .zip(weights.rows())
        .map(|(r, w)| {
            json!({
                "row": r.row,
                "smiles": r.molecule.smiles,
                "sequence": w[0],
                "graph": w[1],
                "geometry": w[2],
            })
        })
        .collect();
    let n = weights.nrows().max(1) as f64;
    let mean: Vec<f64> = weights.columns().into_iter().map(|c| c.sum() / n).collect();
    write_json(
        &out.join("gates.json"),
        &json!({
            "checkpoint": checkpoint_path,
            "seed": config.seeds[0],
            "modalities": ["sequence", "graph", "geometry"],
            "mean": mean,
            "molecules": molecules,
        }),
    )?;
    println!(
        "mean gate weights: sequence {:.3}, graph {:.3}, geometry {:.3}",
        mean[0], mean[1], mean[2]
    );
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match &cli.command {
        Command::Featurize { csv, common } => featurize(csv.clone(), common)?,
        Command::Train { common } => train(common)?,
        Command::Eval {
            checkpoint,
            subset,
            common,
        } => eval(checkpoint, *subset, common)?,
        Command::Ablate { common } => ablate(common)?,
        Command::Gradcheck { common } => return gradcheck(common),
        Command::Gates { checkpoint, common } => gates(checkpoint, common)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
