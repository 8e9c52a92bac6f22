//! Training loops: weak (point-supervised) and full (mask-supervised), one
//! optimizer step per image, per-epoch validation by mIoU, early stopping,
//! and the learning-rate / ablation grid.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{LossPlug, RunConfig};
use super::eval::{evaluate_model, EvalSummary};
use super::{AnyModel, PreparedSample};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::loss::{lcfcn_loss_configured, lcfcn_structure};
use crate::metrics::argmax_foreground;
use crate::optim::{AdamConfig, ParamStore};
use crate::pseudo::{fs_loss, pl_fcn_loss};
use crate::tape::Tape;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: f64,
    pub val_mae: f64,
    pub wall_s: f64,
    pub is_best: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub loss: LossPlug,
    pub lr: f64,
    pub seed: u64,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub stopped_early: bool,
    pub checkpoint: String,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub log: TrainLog,
}

/// Called after every epoch, e.g. to stream progress to a terminal.
pub type ProgressFn<'a> = &'a mut dyn FnMut(&EpochLog);

/// Trains with the configured loss plug and writes the best checkpoint plus
/// a JSON train log under `cfg.out_dir`.
pub fn train_weak(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_weak_with_progress(cfg, &mut |_| {})
}

pub fn train_weak_with_progress(cfg: &RunConfig, progress: ProgressFn) -> Result<TrainOutcome> {
    if cfg.loss == LossPlug::Fs {
        return Err(Error::config(
            "train-weak uses a point-supervised loss plug (lcfcn | pl_fcn); use train-full for fs"
                .to_string(),
        ));
    }
    train(cfg, cfg.loss, progress)
}

/// Trains the fully-supervised model on dataset masks (or the pseudo-mask
/// override when configured).
pub fn train_full(cfg: &RunConfig) -> Result<TrainOutcome> {
    train_full_with_progress(cfg, &mut |_| {})
}

pub fn train_full_with_progress(cfg: &RunConfig, progress: ProgressFn) -> Result<TrainOutcome> {
    train(cfg, LossPlug::Fs, progress)
}

fn train(cfg: &RunConfig, plug: LossPlug, progress: ProgressFn) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dataset = crate::data::Dataset::load(&cfg.data_root)?;
    let train_set = super::prepare_split(&dataset, "train", cfg, plug == LossPlug::Fs)?;
    let val_set = super::prepare_split(&dataset, "val", cfg, false)?;
    if train_set.is_empty() {
        return Err(Error::contract("training split is empty".to_string()));
    }

    let model = match plug {
        LossPlug::Fs => AnyModel::Full(crate::model::FsModel::new(cfg.model.backbone_channels)),
        _ => AnyModel::Weak(crate::model::AlcfcnModel::new(cfg.model)),
    };
    let mut params: ParamStore<f32> = model.init_params(cfg.seed)?;
    let adam = AdamConfig::with_lr(cfg.lr);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let ckpt_path = cfg.out_dir.join(format!("{}.ckpt", plug.name()));

    let mut log = TrainLog {
        loss: plug,
        lr: cfg.lr,
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_miou: f64::NEG_INFINITY,
        stopped_early: false,
        checkpoint: ckpt_path.display().to_string(),
    };
    let mut since_best = 0usize;

    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0f64;
        for (step, &idx) in order.iter().enumerate() {
            let sample = &train_set[idx];
            let mut tape = Tape::<f32>::new();
            let loss =
                forward_loss(&model, &params, sample, cfg, plug, &mut tape).map_err(|e| match e {
                    Error::Numeric(msg) => Error::numeric(format!(
                        "{msg} at epoch {epoch}, step {step} (sample {idx})"
                    )),
                    other => other,
                })?;
            let value = tape.value(loss)[0] as f64;
            if !value.is_finite() {
                return Err(Error::numeric(format!(
                    "non-finite loss {value} at epoch {epoch}, step {step} (sample {idx})"
                )));
            }
            loss_sum += value;
            tape.backward(loss)?;
            let grads: Vec<(String, Vec<f32>)> = tape
                .named_grads()
                .map(|(name, g)| (name.to_string(), g.to_vec()))
                .collect();
            params.adam_step(&grads, &adam)?;
        }

        let (val_miou, val_mae) = validate(&model, &params, &val_set)?;
        let is_best = val_miou > log.best_val_miou;
        if is_best {
            log.best_val_miou = val_miou;
            log.best_epoch = epoch;
            since_best = 0;
            checkpoint::save(&ckpt_path, &params, model.checkpoint_meta(cfg))?;
        } else {
            since_best += 1;
        }
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_miou,
            val_mae,
            wall_s: started.elapsed().as_secs_f64(),
            is_best,
        };
        progress(&entry);
        log.epochs.push(entry);
        if since_best >= cfg.patience {
            log.stopped_early = true;
            break;
        }
    }

    let log_path = cfg.out_dir.join(format!("trainlog-{}.json", plug.name()));
    std::fs::write(&log_path, serde_json::to_string_pretty(&log)?)?;
    Ok(TrainOutcome { checkpoint: ckpt_path, log })
}

fn forward_loss(
    model: &AnyModel,
    params: &ParamStore<f32>,
    sample: &PreparedSample,
    cfg: &RunConfig,
    plug: LossPlug,
    tape: &mut Tape<f32>,
) -> Result<crate::tape::Var> {
    let s = model.forward_scores(tape, params, sample)?;
    if !tape.value(s).iter().all(|v| v.is_finite()) {
        return Err(Error::numeric("non-finite score map".to_string()));
    }
    match plug {
        LossPlug::Lcfcn => {
            let values = tape.value_tensor(s);
            let structure = lcfcn_structure(&values, &sample.points)?;
            lcfcn_loss_configured(tape, s, &sample.points, &structure, cfg.split_weight_k)
        }
        LossPlug::PlFcn => pl_fcn_loss(tape, s, &sample.points),
        LossPlug::Fs => {
            let mask = sample.mask.as_ref().ok_or_else(|| {
                Error::contract("fully-supervised training needs masks for every sample".to_string())
            })?;
            fs_loss(tape, s, mask, &cfg.fs_loss)
        }
    }
}

/// Validation mIoU and counting MAE over a prepared split (parallel across
/// images, deterministic reduction order).
pub fn validate(
    model: &AnyModel,
    params: &ParamStore<f32>,
    set: &[PreparedSample],
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::contract("validation split is empty".to_string()));
    }
    let per_image: Vec<Result<(crate::metrics::ConfusionCounts, usize, usize)>> =
        crate::par::map_indexed(set.len(), |i| {
            let sample = &set[i];
            let mut tape = Tape::<f32>::new();
            let s = model.forward_scores(&mut tape, params, sample)?;
            let scores = tape.value_tensor(s);
            let pred = argmax_foreground(&scores);
            let mut counts = crate::metrics::ConfusionCounts::default();
            let truth = sample
                .mask
                .as_ref()
                .ok_or_else(|| Error::contract("validation needs ground-truth masks".to_string()))?;
            counts.add_masks(&pred, truth);
            let blobs = crate::metrics::count_blobs(&scores);
            Ok((counts, blobs, sample.points.len()))
        });
    let mut total = crate::metrics::ConfusionCounts::default();
    let mut pred_counts = Vec::with_capacity(set.len());
    let mut true_counts = Vec::with_capacity(set.len());
    for r in per_image {
        let (c, pred, truth) = r?;
        total.merge(&c);
        pred_counts.push(pred);
        true_counts.push(truth);
    }
    Ok((total.miou(), crate::metrics::mae(&pred_counts, &true_counts)?))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridRow {
    pub key: String,
    pub value: String,
    pub best_epoch: usize,
    pub val_miou: f64,
    pub val_mae: f64,
    pub test: EvalSummary,
    pub checkpoint: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridReport {
    pub vary_key: String,
    pub rows: Vec<GridRow>,
    /// Index of the row with the best validation mIoU.
    pub selected: usize,
    pub selected_checkpoint: String,
}

/// Trains once per value of `vary_key`, evaluates each run on val and test,
/// and selects the best row by validation mIoU.
pub fn run_grid(cfg: &RunConfig, vary_key: &str, values: &[String]) -> Result<GridReport> {
    if values.is_empty() {
        return Err(Error::config("grid needs at least one value".to_string()));
    }
    let mut rows = Vec::new();
    for value in values {
        let mut sub = cfg.clone();
        sub.apply(vary_key, value)?;
        let tag = format!("{}_{}", vary_key.replace('.', "-"), value);
        sub.out_dir = cfg.out_dir.join("grid").join(tag);
        sub.validate()?;
        let outcome = if sub.loss == LossPlug::Fs {
            train_full(&sub)?
        } else {
            train_weak(&sub)?
        };
        let test = evaluate_model(&outcome.checkpoint, "test", &sub)?;
        let best = outcome
            .log
            .epochs
            .iter()
            .find(|e| e.epoch == outcome.log.best_epoch)
            .ok_or_else(|| Error::contract("train log lost its best epoch".to_string()))?;
        rows.push(GridRow {
            key: vary_key.to_string(),
            value: value.clone(),
            best_epoch: outcome.log.best_epoch,
            val_miou: best.val_miou,
            val_mae: best.val_mae,
            test: test.summary(),
            checkpoint: outcome.checkpoint.display().to_string(),
        });
    }
    let selected = rows
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| a.val_miou.total_cmp(&b.val_miou))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let report = GridReport {
        vary_key: vary_key.to_string(),
        selected,
        selected_checkpoint: rows[selected].checkpoint.clone(),
        rows,
    };
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join("grid.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(cfg.out_dir.join("grid.txt"), format_grid(&report))?;
    Ok(report)
}

pub fn format_grid(report: &GridReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>10} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        report.vary_key, "val mIoU", "val MAE", "bg IoU", "fg IoU", "mIoU", "MAE"
    ));
    for (i, row) in report.rows.iter().enumerate() {
        let mark = if i == report.selected { "*" } else { " " };
        out.push_str(&format!(
            "{mark}{:<23} {:>10.4} {:>8.3} {:>8.4} {:>8.4} {:>8.4} {:>8.3}\n",
            row.value,
            row.val_miou,
            row.val_mae,
            row.test.iou_background,
            row.test.iou_foreground,
            row.test.miou,
            row.test.mae,
        ));
    }
    out
}

/// Loads a checkpoint back into a model + parameter store.
pub fn load_model(path: &Path) -> Result<(AnyModel, ParamStore<f32>)> {
    let (params, header) = checkpoint::load(path)?;
    let model = AnyModel::from_meta(&header.meta)?;
    Ok((model, params))
}
