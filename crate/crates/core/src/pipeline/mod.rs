//! End-to-end pipeline: configuration, training, evaluation, pseudo-mask
//! export, and prediction. The CLI is a thin wrapper over this module.

pub mod config;
pub mod eval;
pub mod train;

pub use config::{LossPlug, RunConfig};
pub use eval::{evaluate_model, export_pseudo, predict, EvalReport, EvalSummary};
pub use train::{
    load_model, run_grid, train_full, train_full_with_progress, train_weak,
    train_weak_with_progress, GridReport, TrainLog, TrainOutcome,
};

use serde_json::json;

use crate::data::normalize::normalize_image;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::loss::PointAnnotations;
use crate::model::{AlcfcnModel, FsModel, ModelConfig};
use crate::optim::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A sample made ready for the model: normalized tensor, original size,
/// annotations, and (when available) the binary ground-truth mask.
pub struct PreparedSample {
    pub tensor: Tensor<f32>,
    pub orig: (usize, usize),
    pub points: PointAnnotations,
    pub mask: Option<Vec<bool>>,
    pub index: usize,
}

/// Either trainable model behind one dispatch point.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Weak(AlcfcnModel),
    Full(FsModel),
}

impl AnyModel {
    pub fn init_params(&self, seed: u64) -> Result<ParamStore<f32>> {
        match self {
            AnyModel::Weak(m) => m.init_params(seed),
            AnyModel::Full(m) => m.init_params(seed),
        }
    }

    /// Forward pass returning the `[2,H,W]` probabilities at original size.
    pub fn forward_scores(
        &self,
        tape: &mut Tape<f32>,
        params: &ParamStore<f32>,
        sample: &PreparedSample,
    ) -> Result<Var> {
        match self {
            AnyModel::Weak(m) => Ok(m.forward(tape, params, &sample.tensor, Some(sample.orig))?.s),
            AnyModel::Full(m) => Ok(m.forward(tape, params, &sample.tensor, Some(sample.orig))?.s),
        }
    }

    pub fn checkpoint_meta(&self, cfg: &RunConfig) -> serde_json::Value {
        match self {
            AnyModel::Weak(m) => json!({
                "kind": "alcfcn",
                "model": m.cfg,
                "seed": cfg.seed,
                "loss": cfg.loss.name(),
            }),
            AnyModel::Full(m) => json!({
                "kind": "fs",
                "backbone_channels": m.backbone_channels,
                "seed": cfg.seed,
                "loss": "fs",
            }),
        }
    }

    pub fn from_meta(meta: &serde_json::Value) -> Result<AnyModel> {
        match meta.get("kind").and_then(|k| k.as_str()) {
            Some("alcfcn") => {
                let cfg: ModelConfig = serde_json::from_value(
                    meta.get("model")
                        .cloned()
                        .ok_or_else(|| Error::format("checkpoint meta missing model config".to_string()))?,
                )?;
                Ok(AnyModel::Weak(AlcfcnModel::new(cfg)))
            }
            Some("fs") => {
                let bc: (usize, usize, usize) = serde_json::from_value(
                    meta.get("backbone_channels")
                        .cloned()
                        .ok_or_else(|| Error::format("checkpoint meta missing backbone widths".to_string()))?,
                )?;
                Ok(AnyModel::Full(FsModel::new(bc)))
            }
            other => Err(Error::format(format!("checkpoint meta has unknown kind {other:?}"))),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            AnyModel::Weak(_) => "alcfcn",
            AnyModel::Full(_) => "fs",
        }
    }
}

/// Loads and normalizes every sample of a split (parallel, index order).
///
/// With `use_pseudo` set and `cfg.pseudo_masks` configured, ground-truth
/// masks are replaced by the exported pseudo-masks of the same split.
pub fn prepare_split(
    dataset: &Dataset,
    split: &str,
    cfg: &RunConfig,
    use_pseudo: bool,
) -> Result<Vec<PreparedSample>> {
    let n = dataset.len(split)?;
    let prepared: Vec<Result<PreparedSample>> = crate::par::map_indexed(n, |i| {
        let sample = dataset.load_sample(split, i)?;
        let normalized = normalize_image(&sample.image);
        let mask = match (&cfg.pseudo_masks, use_pseudo) {
            (Some(dir), true) => {
                let path = dir.join(split).join(format!("{i:04}.png"));
                Some(crate::data::load_binary_mask(&path, sample.height(), sample.width())?)
            }
            _ => sample.binary_mask(),
        };
        Ok(PreparedSample {
            tensor: normalized.tensor,
            orig: (normalized.orig_h, normalized.orig_w),
            points: sample.annotations()?,
            mask,
            index: i,
        })
    });
    prepared.into_iter().collect()
}
