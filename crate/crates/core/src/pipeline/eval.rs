//! Evaluation reports, pseudo-mask export, and prediction on raw images.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::train::load_model;
use super::{AnyModel, PreparedSample};
use crate::blobs::label_blobs;
use crate::data::{save_binary_mask, save_overlay, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{
    argmax_foreground, blob_centroids, count_blobs, game, mae, median_count, ConfusionCounts,
};
use crate::optim::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Compact metric block reused by the grid report.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvalSummary {
    pub iou_background: f64,
    pub iou_foreground: f64,
    pub miou: f64,
    pub mae: f64,
    pub game4: f64,
}

/// Full evaluation of one checkpoint on one split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub n_images: usize,
    pub model_kind: String,
    pub counts: ConfusionCounts,
    pub iou_background: f64,
    pub iou_foreground: f64,
    pub miou: f64,
    pub mae: f64,
    pub game4: f64,
    /// predicted blob count -> number of images
    pub blob_histogram: BTreeMap<usize, usize>,
    pub always_median: MedianBaseline,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MedianBaseline {
    pub median: usize,
    pub mae: f64,
}

impl EvalReport {
    pub fn summary(&self) -> EvalSummary {
        EvalSummary {
            iou_background: self.iou_background,
            iou_foreground: self.iou_foreground,
            miou: self.miou,
            mae: self.mae,
            game4: self.game4,
        }
    }
}

/// Text table mirroring the segmentation/counting report layout.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    out.push_str(&format!("split: {} ({} images)\n\n", report.split, report.n_images));
    out.push_str(&format!(
        "{:<16} {:>12} {:>12} {:>8}\n",
        "method", "Background", "Foreground", "mIoU"
    ));
    out.push_str(&format!(
        "{:<16} {:>12.4} {:>12.4} {:>8.4}\n\n",
        report.model_kind, report.iou_background, report.iou_foreground, report.miou
    ));
    out.push_str(&format!("{:<16} {:>8} {:>8}\n", "counting", "MAE", "GAME(4)"));
    out.push_str(&format!(
        "{:<16} {:>8.4} {:>8.4}\n",
        report.model_kind, report.mae, report.game4
    ));
    out.push_str(&format!(
        "{:<16} {:>8.4} {:>8}\n",
        format!("always-median={}", report.always_median.median),
        report.always_median.mae,
        "-"
    ));
    out.push_str("\nblob-count histogram (count: images):\n");
    for (count, images) in &report.blob_histogram {
        out.push_str(&format!("  {count}: {images}\n"));
    }
    out
}

struct ImageEval {
    counts: ConfusionCounts,
    pred_count: usize,
    true_count: usize,
    centroids: Vec<(usize, usize)>,
    true_points: Vec<(usize, usize)>,
    pred_mask: Vec<bool>,
}

fn eval_one(pred_mask: Vec<bool>, sample: &PreparedSample) -> Result<ImageEval> {
    let (h, w) = sample.orig;
    let blobs = label_blobs(&pred_mask, h, w);
    let mut counts = ConfusionCounts::default();
    let truth = sample
        .mask
        .as_ref()
        .ok_or_else(|| Error::contract("evaluation needs ground-truth masks".to_string()))?;
    counts.add_masks(&pred_mask, truth);
    Ok(ImageEval {
        counts,
        pred_count: blobs.count as usize,
        true_count: sample.points.len(),
        centroids: blob_centroids(&blobs),
        true_points: sample.points.points().to_vec(),
        pred_mask,
    })
}

/// Predicted foreground mask of one prepared sample under a model.
pub fn model_scorer(
    model: &AnyModel,
    params: &ParamStore<f32>,
    sample: &PreparedSample,
) -> Result<Vec<bool>> {
    let mut tape = Tape::<f32>::new();
    let s = model.forward_scores(&mut tape, params, sample)?;
    Ok(argmax_foreground(&tape.value_tensor(s)))
}

/// Evaluates a checkpoint on a split; writes `report-<split>.json`, the text
/// table, and the first `cfg.overlays` overlay images under `cfg.out_dir`.
pub fn evaluate_model(ckpt: &Path, split: &str, cfg: &RunConfig) -> Result<EvalReport> {
    let (model, params) = load_model(ckpt)?;
    evaluate_with_scorer(split, cfg, model.kind(), &|sample| {
        model_scorer(&model, &params, sample)
    })
}

/// Evaluation over any per-sample mask predictor (used by tests and by
/// [`evaluate_model`]).
pub fn evaluate_with_scorer(
    split: &str,
    cfg: &RunConfig,
    label: &str,
    scorer: &(dyn Fn(&PreparedSample) -> Result<Vec<bool>> + Sync),
) -> Result<EvalReport> {
    let dataset = Dataset::load(&cfg.data_root)?;
    let set = super::prepare_split(&dataset, split, cfg, false)?;
    if set.is_empty() {
        return Err(Error::contract(format!("split {split:?} is empty")));
    }
    let resolution = dataset.manifest.resolution;

    let per_image: Vec<Result<ImageEval>> =
        crate::par::map_indexed(set.len(), |i| eval_one(scorer(&set[i])?, &set[i]));

    let mut counts = ConfusionCounts::default();
    let mut pred_counts = Vec::new();
    let mut true_counts = Vec::new();
    let mut pred_points = Vec::new();
    let mut true_points = Vec::new();
    let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
    let mut masks_for_overlay = Vec::new();
    for r in per_image {
        let e = r?;
        counts.merge(&e.counts);
        *histogram.entry(e.pred_count).or_insert(0) += 1;
        pred_counts.push(e.pred_count);
        true_counts.push(e.true_count);
        pred_points.push(e.centroids);
        true_points.push(e.true_points);
        if masks_for_overlay.len() < cfg.overlays {
            masks_for_overlay.push(e.pred_mask);
        }
    }

    let train_counts = dataset.counts("train")?;
    let median = median_count(&train_counts)?;
    let median_pred: Vec<usize> = vec![median; true_counts.len()];
    let report = EvalReport {
        split: split.to_string(),
        n_images: set.len(),
        model_kind: label.to_string(),
        counts,
        iou_background: counts.iou_background(),
        iou_foreground: counts.iou_foreground(),
        miou: counts.miou(),
        mae: mae(&pred_counts, &true_counts)?,
        game4: game(&pred_points, &true_points, resolution, 4)?,
        blob_histogram: histogram,
        always_median: MedianBaseline { median, mae: mae(&median_pred, &true_counts)? },
    };

    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(
        cfg.out_dir.join(format!("report-{split}.json")),
        serde_json::to_string_pretty(&report)?,
    )?;
    std::fs::write(cfg.out_dir.join(format!("report-{split}.txt")), format_report(&report))?;
    for (i, mask) in masks_for_overlay.iter().enumerate() {
        let sample = dataset.load_sample(split, i)?;
        let pts: Vec<(usize, usize)> =
            sample.points.iter().map(|p| (p.y as usize, p.x as usize)).collect();
        save_overlay(
            &sample.image,
            mask,
            &pts,
            &cfg.out_dir.join(format!("overlay-{split}-{i:04}.png")),
        )?;
    }
    Ok(report)
}

fn checkpoint_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PseudoProvenance {
    pub checkpoint: String,
    pub checkpoint_sha256: String,
    pub split: String,
    pub n_masks: usize,
}

/// Exports argmax pseudo-masks for a split as 0/255 PNGs plus a provenance
/// record. Re-running with the same checkpoint produces identical files.
pub fn export_pseudo(ckpt: &Path, split: &str, cfg: &RunConfig, out_dir: &Path) -> Result<PseudoProvenance> {
    let (model, params) = load_model(ckpt)?;
    let dataset = Dataset::load(&cfg.data_root)?;
    let set = super::prepare_split(&dataset, split, cfg, false)?;
    let masks: Vec<Result<Vec<bool>>> = crate::par::map_indexed(set.len(), |i| {
        let mut tape = Tape::<f32>::new();
        let s = model.forward_scores(&mut tape, &params, &set[i])?;
        Ok(argmax_foreground(&tape.value_tensor(s)))
    });
    let split_dir = out_dir.join(split);
    std::fs::create_dir_all(&split_dir)?;
    let mut n = 0;
    for (i, m) in masks.into_iter().enumerate() {
        let mask = m?;
        let (h, w) = set[i].orig;
        save_binary_mask(&split_dir.join(format!("{i:04}.png")), &mask, h, w)?;
        n += 1;
    }
    let provenance = PseudoProvenance {
        checkpoint: ckpt.display().to_string(),
        checkpoint_sha256: checkpoint_sha256(ckpt)?,
        split: split.to_string(),
        n_masks: n,
    };
    std::fs::write(
        split_dir.join("provenance.json"),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(provenance)
}

/// Runs a checkpoint on arbitrary PNG images, writing `<stem>_mask.png` and
/// `<stem>_overlay.png` plus a provenance-stamped index.
pub fn predict(ckpt: &Path, images: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    let (model, params) = load_model(ckpt)?;
    std::fs::create_dir_all(out_dir)?;
    let mut outputs = Vec::new();
    for path in images {
        let img = image::open(path)
            .map_err(|e| Error::validation(path, format!("cannot decode image: {e}")))?
            .to_rgb8();
        let normalized = crate::data::normalize::normalize_image(&img);
        let sample = PreparedSample {
            tensor: normalized.tensor,
            orig: (normalized.orig_h, normalized.orig_w),
            points: crate::loss::PointAnnotations::empty(),
            mask: None,
            index: 0,
        };
        let mut tape = Tape::<f32>::new();
        let s = model.forward_scores(&mut tape, &params, &sample)?;
        let scores: Tensor<f32> = tape.value_tensor(s);
        let mask = argmax_foreground(&scores);
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::validation(path, "image path has no stem".to_string()))?;
        let mask_path = out_dir.join(format!("{stem}_mask.png"));
        save_binary_mask(&mask_path, &mask, normalized.orig_h, normalized.orig_w)?;
        save_overlay(&img, &mask, &[], &out_dir.join(format!("{stem}_overlay.png")))?;
        outputs.push(mask_path);
    }
    let provenance = serde_json::json!({
        "checkpoint": ckpt.display().to_string(),
        "checkpoint_sha256": checkpoint_sha256(ckpt)?,
        "outputs": outputs.iter().map(|p| p.display().to_string()).collect::<Vec<_>>(),
    });
    std::fs::write(
        out_dir.join("predictions.json"),
        serde_json::to_string_pretty(&provenance)?,
    )?;
    Ok(outputs)
}

/// Predicted blob count of one raw image (used by behavioral tests).
pub fn predict_count(ckpt: &Path, image_path: &Path) -> Result<usize> {
    let (model, params) = load_model(ckpt)?;
    let img = image::open(image_path)
        .map_err(|e| Error::validation(image_path, format!("cannot decode image: {e}")))?
        .to_rgb8();
    let normalized = crate::data::normalize::normalize_image(&img);
    let sample = PreparedSample {
        tensor: normalized.tensor,
        orig: (normalized.orig_h, normalized.orig_w),
        points: crate::loss::PointAnnotations::empty(),
        mask: None,
        index: 0,
    };
    let mut tape = Tape::<f32>::new();
    let s = model.forward_scores(&mut tape, &params, &sample)?;
    Ok(count_blobs(&tape.value_tensor(s)))
}
