//! Run configuration: a plain-text `key = value` file (dotted keys) with
//! programmatic overrides layered on top. Flags win over the file; the
//! `ALCFCN_OUT` environment variable overrides the output root for relative
//! output directories.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synth::Difficulty;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pseudo::FsLossConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossPlug {
    Lcfcn,
    PlFcn,
    Fs,
}

impl LossPlug {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "lcfcn" => Ok(LossPlug::Lcfcn),
            "pl_fcn" => Ok(LossPlug::PlFcn),
            "fs" => Ok(LossPlug::Fs),
            other => Err(Error::config(format!(
                "unknown loss plug {other:?} (expected lcfcn | pl_fcn | fs)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossPlug::Lcfcn => "lcfcn",
            LossPlug::PlFcn => "pl_fcn",
            LossPlug::Fs => "fs",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub preset: String,
    pub model: ModelConfig,
    pub loss: LossPlug,
    pub lr: f64,
    pub lr_grid: Vec<f64>,
    pub epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub overlays: usize,
    /// Directory of exported pseudo-masks overriding the dataset masks.
    pub pseudo_masks: Option<PathBuf>,
    pub fs_loss: FsLossConfig,
    /// Split weighting of the LCFCN split term: points-in-blob (k) or 1.
    pub split_weight_k: bool,
    pub gen_n_train: usize,
    pub gen_n_val: usize,
    pub gen_n_test: usize,
    pub gen_difficulty: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            preset: "toy".to_string(),
            model: ModelConfig::toy(),
            loss: LossPlug::Lcfcn,
            lr: 1e-4,
            lr_grid: vec![1e-4, 1e-5, 1e-6],
            epochs: 200,
            patience: 10,
            seed: 0,
            overlays: 4,
            pseudo_masks: None,
            fs_loss: FsLossConfig::default(),
            split_weight_k: true,
            gen_n_train: 200,
            gen_n_val: 40,
            gen_n_test: 50,
            gen_difficulty: "standard".to_string(),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_triple(key: &str, value: &str) -> Result<(usize, usize, usize)> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("{key} expects three comma-separated widths")));
    }
    Ok((
        parse_num(key, parts[0])?,
        parse_num(key, parts[1])?,
        parse_num(key, parts[2])?,
    ))
}

impl RunConfig {
    /// Applies one dotted-key assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "data.root" => self.data_root = PathBuf::from(value),
            "data.pseudo_masks" => {
                self.pseudo_masks = if value.is_empty() { None } else { Some(PathBuf::from(value)) }
            }
            "out.dir" => self.out_dir = PathBuf::from(value),
            "seed" => self.seed = parse_num(key, value)?,
            "model.preset" => {
                let affinity = self.model.affinity;
                self.model = ModelConfig::preset(value)?;
                self.model.affinity = affinity;
                self.preset = value.to_string();
                if value == "full-width" {
                    // full-scale epoch cap
                    self.epochs = 1000;
                }
            }
            "model.backbone_channels" => self.model.backbone_channels = parse_triple(key, value)?,
            "model.branch_channels" => self.model.branch_channels = parse_triple(key, value)?,
            "model.fuse_channels" => self.model.fuse_channels = parse_num(key, value)?,
            "affinity.radius" => self.model.affinity.radius = parse_num(key, value)?,
            "affinity.include_self" => self.model.affinity.include_self = parse_num(key, value)?,
            "affinity.beta" => self.model.affinity.beta = parse_num(key, value)?,
            "affinity.t" => self.model.affinity.walk_steps = parse_num(key, value)?,
            "loss.plug" => self.loss = LossPlug::parse(value)?,
            "loss.split_weight_k" => self.split_weight_k = parse_num(key, value)?,
            "optimizer.lr" => self.lr = parse_num(key, value)?,
            "optimizer.lr_grid" => {
                self.lr_grid = value
                    .split(',')
                    .map(|v| parse_num("optimizer.lr_grid", v.trim()))
                    .collect::<Result<_>>()?;
            }
            "optimizer.epochs" => self.epochs = parse_num(key, value)?,
            "optimizer.patience" => self.patience = parse_num(key, value)?,
            "eval.overlays" => self.overlays = parse_num(key, value)?,
            "fs.window" => self.fs_loss.window = parse_num(key, value)?,
            "fs.emphasis" => self.fs_loss.emphasis = parse_num(key, value)?,
            "gen.n_train" => self.gen_n_train = parse_num(key, value)?,
            "gen.n_val" => self.gen_n_val = parse_num(key, value)?,
            "gen.n_test" => self.gen_n_test = parse_num(key, value)?,
            "gen.difficulty" => {
                Difficulty::parse(value)?;
                self.gen_difficulty = value.to_string();
            }
            other => return Err(Error::config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses a `key = value` config file ('#' starts a comment).
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Applies a list of `key=value` override strings (CLI flags).
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::config(format!("override {item:?} is not key=value")));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Resolves the output dir against `ALCFCN_OUT` when it is relative.
    pub fn resolve_out_dir(&mut self) {
        if self.out_dir.is_relative() {
            if let Ok(root) = std::env::var("ALCFCN_OUT") {
                if !root.is_empty() {
                    self.out_dir = PathBuf::from(root).join(&self.out_dir);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patience == 0 {
            return Err(Error::config("optimizer.patience must be >= 1".to_string()));
        }
        if self.epochs == 0 {
            return Err(Error::config("optimizer.epochs must be >= 1".to_string()));
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::config(format!("optimizer.lr must be positive, got {}", self.lr)));
        }
        if self.model.affinity.beta < 1.0 {
            return Err(Error::config(format!(
                "affinity.beta must be >= 1, got {}",
                self.model.affinity.beta
            )));
        }
        if self.fs_loss.window.is_multiple_of(2) {
            return Err(Error::config(format!(
                "fs.window must be odd, got {}",
                self.fs_loss.window
            )));
        }
        Ok(())
    }

    pub fn difficulty(&self) -> Result<Difficulty> {
        Difficulty::parse(&self.gen_difficulty)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_overrides_layering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        std::fs::write(
            &path,
            "# a comment\nseed = 7\noptimizer.lr = 1e-3\naffinity.t = 4 # trailing comment\n",
        )
        .unwrap();
        let mut cfg = RunConfig::default();
        cfg.apply_file(&path).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.lr, 1e-3);
        assert_eq!(cfg.model.affinity.walk_steps, 4);

        cfg.apply_overrides(&["optimizer.lr=5e-4".to_string()]).unwrap();
        assert_eq!(cfg.lr, 5e-4, "flags win over the file");
    }

    #[test]
    fn unknown_key_is_config_error() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.apply("nope.key", "1"), Err(Error::Config(_))));
    }

    #[test]
    fn preset_switches_widths_and_epoch_cap() {
        let mut cfg = RunConfig::default();
        cfg.apply("affinity.t", "3").unwrap();
        cfg.apply("model.preset", "full-width").unwrap();
        assert_eq!(cfg.model.branch_channels, (64, 128, 256));
        assert_eq!(cfg.model.fuse_channels, 448);
        assert_eq!(cfg.epochs, 1000);
        // affinity settings survive the preset switch
        assert_eq!(cfg.model.affinity.walk_steps, 3);
    }

    #[test]
    fn default_lr_grid_matches_contract() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_grid, vec![1e-4, 1e-5, 1e-6]);
        assert!(cfg.patience >= 1);
    }

    #[test]
    fn validation_catches_bad_values() {
        let cfg = RunConfig { patience: 0, ..RunConfig::default() };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.apply("fs.window", "4").unwrap();
        assert!(cfg.validate().is_err());
    }
}
