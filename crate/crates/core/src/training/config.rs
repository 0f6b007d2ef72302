use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::chem::{load_dataset_with, Dataset, LoadOptions, TaskType};
use crate::error::{Error, Result};
use crate::losses::Regularizer;
use crate::model::ModelConfig;

/// Which regularisers join the task loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationMode {
    #[serde(rename = "LBL")]
    Lbl,
    #[serde(rename = "BOT")]
    Bot,
    #[serde(rename = "ALL")]
    All,
}

impl AblationMode {
    pub const ORDER: [AblationMode; 3] = [AblationMode::Lbl, AblationMode::Bot, AblationMode::All];

    pub fn active(self) -> &'static [Regularizer] {
        match self {
            AblationMode::Lbl => &[],
            AblationMode::Bot => &[Regularizer::KlShared, Regularizer::MmdPrivate, Regularizer::Recon],
            AblationMode::All => &Regularizer::ALL,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            AblationMode::Lbl => "LBL",
            AblationMode::Bot => "BOT",
            AblationMode::All => "ALL",
        }
    }
}

impl FromStr for AblationMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "LBL" => Ok(AblationMode::Lbl),
            "BOT" => Ok(AblationMode::Bot),
            "ALL" => Ok(AblationMode::All),
            _ => Err(format!("expected LBL, BOT or ALL, got {s:?}")),
        }
    }
}

impl std::fmt::Display for AblationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Every setting of a training run.
///
/// The text form is one `key = value` per line; `#` starts a comment.
/// Unknown keys and malformed values are errors. See [`RunConfig::KEYS`].
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub task_type: TaskType,
    pub smiles_column: String,
    pub label_columns: Option<Vec<String>>,
    pub coordinates: Option<PathBuf>,
    pub conformer_seed: u64,
    /// Keep only the first `n` parsed records (0 keeps all).
    pub limit: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    /// `None`: a quarter of `hidden_dim`.
    pub d_shared: Option<usize>,
    /// `None`: a quarter of `hidden_dim`.
    pub d_private: Option<usize>,
    pub depth: usize,
    pub attention_layers: usize,
    pub attention_heads: usize,
    pub dropout: f64,
    pub temperature: f64,
    pub split: [f64; 3],
    pub seeds: Vec<u64>,
    pub lr_init: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    /// `None`: two epochs' worth of steps.
    pub warmup_steps: Option<usize>,
    pub clip_norm: f64,
    pub ablation: AblationMode,
    pub deterministic_inference: bool,
    /// Evaluate inactive regularisers for the metrics log.
    pub monitor_inactive: bool,
    pub gradcheck_tolerance: f64,
    /// Hidden width of the small model the gradient check builds.
    pub gradcheck_hidden: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            task_type: TaskType::Regression,
            smiles_column: "smiles".into(),
            label_columns: None,
            coordinates: None,
            conformer_seed: 0,
            limit: 0,
            epochs: 200,
            batch_size: 64,
            hidden_dim: 256,
            d_shared: None,
            d_private: None,
            depth: 3,
            attention_layers: 2,
            attention_heads: 2,
            dropout: 0.1,
            temperature: 0.1,
            split: [0.8, 0.1, 0.1],
            seeds: (0..10).collect(),
            lr_init: 1e-3,
            lr_max: 2e-3,
            lr_final: 1e-3,
            warmup_steps: None,
            clip_norm: 5.0,
            ablation: AblationMode::All,
            deterministic_inference: true,
            monitor_inactive: true,
            gradcheck_tolerance: 1e-4,
            gradcheck_hidden: 8,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e: T::Err| Error::config(key, format!("{value:?}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    value
        .split(',')
        .map(|v| parse(key, v.trim()))
        .collect()
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Recognised keys, in the order [`RunConfig::to_text`] writes them.
    pub const KEYS: &'static [&'static str] = &[
        "dataset",
        "task_type",
        "smiles_column",
        "label_columns",
        "coordinates",
        "conformer_seed",
        "limit",
        "epochs",
        "batch_size",
        "hidden_dim",
        "d_shared",
        "d_private",
        "depth",
        "attention_layers",
        "attention_heads",
        "dropout",
        "temperature",
        "split",
        "seeds",
        "lr_init",
        "lr_max",
        "lr_final",
        "warmup_steps",
        "clip_norm",
        "ablation",
        "deterministic_inference",
        "monitor_inactive",
        "gradcheck_tolerance",
        "gradcheck_hidden",
    ];

    /// Desk-scale defaults: hidden width 64 and quarter-width latents.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 64,
            ..Self::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "dataset" => self.dataset = optional_path(v),
            "task_type" => self.task_type = parse(key, v)?,
            "smiles_column" => self.smiles_column = v.to_string(),
            "label_columns" => {
                self.label_columns = (!v.is_empty() && v != "all")
                    .then(|| v.split(',').map(|c| c.trim().to_string()).collect())
            }
            "coordinates" => self.coordinates = optional_path(v),
            "conformer_seed" => self.conformer_seed = parse(key, v)?,
            "limit" => self.limit = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "hidden_dim" => self.hidden_dim = parse(key, v)?,
            "d_shared" => self.d_shared = if v == "auto" { None } else { Some(parse(key, v)?) },
            "d_private" => self.d_private = if v == "auto" { None } else { Some(parse(key, v)?) },
            "depth" => self.depth = parse(key, v)?,
            "attention_layers" => self.attention_layers = parse(key, v)?,
            "attention_heads" => self.attention_heads = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "temperature" => self.temperature = parse(key, v)?,
            "split" => {
                let r: Vec<f64> = parse_list(key, v)?;
                self.split = r
                    .try_into()
                    .map_err(|_| Error::config(key, "expected three comma-separated ratios"))?;
            }
            "seeds" => self.seeds = parse_list(key, v)?,
            "lr_init" => self.lr_init = parse(key, v)?,
            "lr_max" => self.lr_max = parse(key, v)?,
            "lr_final" => self.lr_final = parse(key, v)?,
            "warmup_steps" => self.warmup_steps = if v == "auto" { None } else { Some(parse(key, v)?) },
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "ablation" => self.ablation = parse(key, v)?,
            "deterministic_inference" => self.deterministic_inference = parse(key, v)?,
            "monitor_inactive" => self.monitor_inactive = parse(key, v)?,
            "gradcheck_tolerance" => self.gradcheck_tolerance = parse(key, v)?,
            "gradcheck_hidden" => self.gradcheck_hidden = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply `key = value` lines, logging each change under `origin`.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("{origin}:{}: expected key = value", n + 1)))?;
            self.set_logged(k.trim(), v.trim(), origin)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Apply `KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must be KEY=VALUE"))?;
            self.set_logged(k.trim(), v.trim(), "override")?;
        }
        Ok(())
    }

    fn set_logged(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        let before = self.get(key);
        self.set(key, value)?;
        log::info!("config {key}: {} -> {} ({origin})", before.unwrap_or_default(), self.get(key).unwrap_or_default());
        Ok(())
    }

    /// Text form of one key's current value.
    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        Some(match key {
            "dataset" => path(&self.dataset),
            "task_type" => self.task_type.to_string(),
            "smiles_column" => self.smiles_column.clone(),
            "label_columns" => self.label_columns.as_ref().map_or("all".into(), |c| c.join(",")),
            "coordinates" => path(&self.coordinates),
            "conformer_seed" => self.conformer_seed.to_string(),
            "limit" => self.limit.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "d_shared" => self.d_shared.map_or("auto".into(), |d| d.to_string()),
            "d_private" => self.d_private.map_or("auto".into(), |d| d.to_string()),
            "depth" => self.depth.to_string(),
            "attention_layers" => self.attention_layers.to_string(),
            "attention_heads" => self.attention_heads.to_string(),
            "dropout" => self.dropout.to_string(),
            "temperature" => self.temperature.to_string(),
            "split" => join(&self.split),
            "seeds" => join(&self.seeds),
            "lr_init" => self.lr_init.to_string(),
            "lr_max" => self.lr_max.to_string(),
            "lr_final" => self.lr_final.to_string(),
            "warmup_steps" => self.warmup_steps.map_or("auto".into(), |w| w.to_string()),
            "clip_norm" => self.clip_norm.to_string(),
            "ablation" => self.ablation.to_string(),
            "deterministic_inference" => self.deterministic_inference.to_string(),
            "monitor_inactive" => self.monitor_inactive.to_string(),
            "gradcheck_tolerance" => self.gradcheck_tolerance.to_string(),
            "gradcheck_hidden" => self.gradcheck_hidden.to_string(),
            _ => return None,
        })
    }

    /// Every key in canonical order; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k} = {}", self.get(k).unwrap()).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, "text")?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("hidden_dim", self.hidden_dim),
            ("d_shared", self.latent_dims().0),
            ("d_private", self.latent_dims().1),
            ("depth", self.depth),
            ("attention_heads", self.attention_heads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(2) || !self.hidden_dim.is_multiple_of(self.attention_heads) {
            return Err(Error::config("hidden_dim", "must be even and divisible by attention_heads"));
        }
        if self.split.iter().any(|&r| !(r > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "ratios must be positive and sum to 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed is required"));
        }
        for (k, v) in [("lr_init", self.lr_init), ("lr_max", self.lr_max), ("lr_final", self.lr_final)] {
            if !(v > 0.0) {
                return Err(Error::config(k, "must be positive"));
            }
        }
        if self.lr_init > self.lr_max {
            return Err(Error::config("lr_init", "must not exceed lr_max"));
        }
        if self.lr_final > self.lr_max {
            return Err(Error::config("lr_final", "must not exceed lr_max"));
        }
        if self.warmup_steps == Some(0) {
            return Err(Error::config("warmup_steps", "must be positive or auto"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature", "must be positive"));
        }
        Ok(())
    }

    /// Load `dataset` with the column, coordinate and `limit` settings.
    pub fn load_dataset(&self) -> Result<Dataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::config("dataset", "no dataset path configured"))?;
        let opts = LoadOptions {
            smiles_column: self.smiles_column.clone(),
            label_columns: self.label_columns.clone(),
            coordinates: self.coordinates.clone(),
            conformer_seed: self.conformer_seed,
        };
        let ds = load_dataset_with(path, self.task_type, &opts)?;
        if self.limit > 0 && self.limit < ds.len() {
            return Ok(ds.subset(&(0..self.limit).collect::<Vec<_>>()));
        }
        Ok(ds)
    }

    /// Resolved `(d_shared, d_private)`.
    pub fn latent_dims(&self) -> (usize, usize) {
        let auto = self.hidden_dim / 4;
        (self.d_shared.unwrap_or(auto), self.d_private.unwrap_or(auto))
    }

    pub fn model_config(&self, n_tasks: usize) -> ModelConfig {
        let (d_shared, d_private) = self.latent_dims();
        ModelConfig {
            hidden_dim: self.hidden_dim,
            d_shared,
            d_private,
            depth: self.depth,
            attention_layers: self.attention_layers,
            attention_heads: self.attention_heads,
            dropout: self.dropout,
            temperature: self.temperature,
            n_tasks,
            task_type: self.task_type,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk();
        c.dataset = Some("data/esol.csv".into());
        c.seeds = vec![3, 4];
        c.warmup_steps = Some(17);
        c.label_columns = Some(vec!["a".into(), "b".into()]);
        c.ablation = AblationMode::Bot;
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
        assert_eq!(RunConfig::from_text(&RunConfig::default().to_text()).unwrap(), RunConfig::default());
    }

    #[test]
    fn every_key_is_readable_and_writable() {
        let c = RunConfig::default();
        for k in RunConfig::KEYS {
            let v = c.get(k).unwrap();
            let mut d = RunConfig::default();
            d.set(k, &v).unwrap();
            assert_eq!(d, c, "{k}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        let e = c.apply_overrides(&["epoch=3".into()]).unwrap_err();
        assert!(matches!(e, Error::Config { ref key, .. } if key == "epoch"));
        assert!(RunConfig::from_text("epochs: 3").is_err());
        assert!(RunConfig::from_text("epochs = three").is_err());
    }

    #[test]
    fn precedence_is_defaults_then_file_then_overrides() {
        let mut c = RunConfig::default();
        c.apply_text("epochs = 7\nbatch_size = 8 # small\n", "file").unwrap();
        c.apply_overrides(&["epochs=1".into()]).unwrap();
        assert_eq!((c.epochs, c.batch_size, c.hidden_dim), (1, 8, 256));
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.lr_final = 1.0;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.split = [0.5, 0.3, 0.3];
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.lr_init = 0.5;
        assert!(c.validate().is_err());
    }
}
