//! Segmentation and counting metrics: per-class IoU/mIoU, count MAE,
//! grid-localized GAME, blob counting, and the always-median baseline.

use crate::blobs::{label_blobs, BlobLabeling};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Argmax foreground mask of a `[2,H,W]` score map; ties go to background.
pub fn argmax_foreground<T: Element>(s: &Tensor<T>) -> Vec<bool> {
    let shape = s.shape();
    debug_assert!(shape.len() == 3 && shape[0] == 2);
    let hw = shape[1] * shape[2];
    (0..hw).map(|i| s.data()[hw + i] > s.data()[i]).collect()
}

/// Pixel confusion counts accumulated over an evaluation set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn add_masks(&mut self, pred: &[bool], truth: &[bool]) {
        debug_assert_eq!(pred.len(), truth.len());
        for (&p, &t) in pred.iter().zip(truth) {
            match (p, t) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => self.tn += 1,
            }
        }
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou_foreground(&self) -> f64 {
        iou(self.tp, self.fp, self.fn_)
    }

    /// Background IoU: swap the positive class.
    pub fn iou_background(&self) -> f64 {
        iou(self.tn, self.fn_, self.fp)
    }

    pub fn miou(&self) -> f64 {
        0.5 * (self.iou_foreground() + self.iou_background())
    }
}

/// `TP / (TP + FP + FN)`; an empty union counts as perfect agreement.
pub fn iou(tp: u64, fp: u64, fn_: u64) -> f64 {
    let union = tp + fp + fn_;
    if union == 0 {
        1.0
    } else {
        tp as f64 / union as f64
    }
}

/// Number of predicted blobs in a `[2,H,W]` score map.
pub fn count_blobs<T: Element>(s: &Tensor<T>) -> usize {
    let mask = argmax_foreground(s);
    let shape = s.shape();
    label_blobs(&mask, shape[1], shape[2]).count as usize
}

/// Mean absolute count error.
pub fn mae(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::dim(format!("{} predictions vs {} truths", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::contract("mae over an empty set".to_string()));
    }
    let total: u64 = pred.iter().zip(truth).map(|(&a, &b)| a.abs_diff(b) as u64).sum();
    Ok(total as f64 / pred.len() as f64)
}

/// Rounded centroid of each blob (row-major blob order).
pub fn blob_centroids(blobs: &BlobLabeling) -> Vec<(usize, usize)> {
    let mut sums = vec![(0u64, 0u64, 0u64); blobs.count as usize];
    for (i, &l) in blobs.labels.iter().enumerate() {
        if l > 0 {
            let e = &mut sums[(l - 1) as usize];
            e.0 += (i / blobs.w) as u64;
            e.1 += (i % blobs.w) as u64;
            e.2 += 1;
        }
    }
    sums.iter()
        .map(|&(sy, sx, n)| {
            let y = ((sy as f64 / n as f64) + 0.5).floor() as usize;
            let x = ((sx as f64 / n as f64) + 0.5).floor() as usize;
            (y.min(blobs.h - 1), x.min(blobs.w - 1))
        })
        .collect()
}

/// Proportional cell boundaries `floor(r * extent / cells)`. These nest as
/// the level grows, which makes GAME monotone in `L`.
fn cell_boundaries(extent: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|r| r * extent / cells).collect()
}

fn cell_of(boundaries: &[usize], coord: usize) -> usize {
    // boundaries are sorted; find r with b[r] <= coord < b[r+1]
    let mut r = boundaries.partition_point(|&b| b <= coord);
    r = r.saturating_sub(1);
    r.min(boundaries.len() - 2)
}

/// Grid Average Mean Absolute Error over a `2^L x 2^L` partition of every
/// image: per-image sum of per-cell count errors, averaged over images.
pub fn game(
    pred_points: &[Vec<(usize, usize)>],
    true_points: &[Vec<(usize, usize)>],
    (h, w): (usize, usize),
    level: u32,
) -> Result<f64> {
    if pred_points.len() != true_points.len() {
        return Err(Error::dim(format!(
            "{} predictions vs {} truths",
            pred_points.len(),
            true_points.len()
        )));
    }
    if pred_points.is_empty() {
        return Err(Error::contract("game over an empty set".to_string()));
    }
    let cells = 1usize << level;
    let rows = cell_boundaries(h, cells);
    let cols = cell_boundaries(w, cells);
    let mut total = 0u64;
    for (pred, truth) in pred_points.iter().zip(true_points) {
        let mut tally = vec![0i64; cells * cells];
        for &(y, x) in pred {
            tally[cell_of(&rows, y) * cells + cell_of(&cols, x)] += 1;
        }
        for &(y, x) in truth {
            tally[cell_of(&rows, y) * cells + cell_of(&cols, x)] -= 1;
        }
        total += tally.iter().map(|&d| d.unsigned_abs()).sum::<u64>();
    }
    Ok(total as f64 / pred_points.len() as f64)
}

/// Lower median of the training counts: the constant always-median baseline.
pub fn median_count(train_counts: &[usize]) -> Result<usize> {
    if train_counts.is_empty() {
        return Err(Error::contract("median of an empty training set".to_string()));
    }
    let mut sorted = train_counts.to_vec();
    sorted.sort_unstable();
    Ok(sorted[(sorted.len() - 1) / 2])
}
