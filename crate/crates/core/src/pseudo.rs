//! Distillation support: pseudo-mask extraction from a trained weak model
//! plus the fully-supervised loss pair (weighted cross-entropy and weighted
//! IoU) and the point-level baseline loss.
//!
//! The per-pixel weights emphasize pixels whose 15x15 neighborhood mean
//! disagrees with them (boundary-heavy weighting):
//! `w(p) = 1 + emphasis * |mean_window(mask) - mask(p)|`, with the window
//! mean taken over in-bounds pixels only. Unit weights reduce both losses to
//! their plain forms.

use crate::error::{Error, Result};
use crate::loss::PointAnnotations;
use crate::tape::{Tape, Var};
use crate::tensor::{el, Element};

/// Window/emphasis knobs for the boundary weighting.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct FsLossConfig {
    pub window: usize,
    pub emphasis: f64,
}

impl Default for FsLossConfig {
    fn default() -> Self {
        FsLossConfig { window: 15, emphasis: 5.0 }
    }
}

/// Boundary-emphasis weights from a binary mask.
pub fn boundary_weights(mask: &[bool], h: usize, w: usize, cfg: &FsLossConfig) -> Vec<f64> {
    debug_assert_eq!(mask.len(), h * w);
    debug_assert!(cfg.window % 2 == 1, "window must be odd");
    let r = cfg.window / 2;
    // integral image over the mask, (h+1) x (w+1)
    let mut integral = vec![0u32; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += mask[y * w + x] as u32;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r + 1).min(h);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r + 1).min(w);
            let sum = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            let area = ((y1 - y0) * (x1 - x0)) as f64;
            let mean = sum as f64 / area;
            let m = mask[y * w + x] as u8 as f64;
            out[y * w + x] = 1.0 + cfg.emphasis * (mean - m).abs();
        }
    }
    out
}

fn check_mask(shape: &[usize], mask: &[bool]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::dim(format!("score map must be [2,H,W], got {shape:?}")));
    }
    if mask.len() != shape[1] * shape[2] {
        return Err(Error::dim(format!(
            "mask has {} pixels for a {}x{} map",
            mask.len(),
            shape[1],
            shape[2]
        )));
    }
    Ok((shape[1], shape[2]))
}

/// Weighted cross-entropy: `sum_p w(p) * -log S_{mask(p)}(p) / sum_p w(p)`.
pub fn weighted_ce_loss<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    mask: &[bool],
    weights: &[f64],
) -> Result<Var> {
    let (h, w) = check_mask(tape.shape(s), mask)?;
    let hw = h * w;
    if weights.len() != hw {
        return Err(Error::dim(format!("{} weights for {hw} pixels", weights.len())));
    }
    let idx: Vec<usize> = (0..hw).map(|p| if mask[p] { hw + p } else { p }).collect();
    let gathered = tape.gather(s, idx)?;
    let logs = tape.log_clamped(gathered);
    let wsum: f64 = weights.iter().sum();
    let weighted = tape.weighted_sum(logs, weights.iter().map(|&x| el(x)).collect())?;
    Ok(tape.affine(weighted, el(-1.0 / wsum), T::zero()))
}

/// Weighted soft-IoU loss on the foreground channel:
/// `1 - (wI + 1) / (wU + 1)` with `wI = sum w*s*m`, `wU = sum w*(s+m-s*m)`.
pub fn weighted_iou_loss<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    mask: &[bool],
    weights: &[f64],
) -> Result<Var> {
    let (h, w) = check_mask(tape.shape(s), mask)?;
    let hw = h * w;
    if weights.len() != hw {
        return Err(Error::dim(format!("{} weights for {hw} pixels", weights.len())));
    }
    let fg = tape.gather(s, (hw..2 * hw).collect())?;
    let wm: Vec<T> = (0..hw).map(|p| el(weights[p] * (mask[p] as u8 as f64))).collect();
    let w_not_m: Vec<T> = (0..hw).map(|p| el(weights[p] * (1.0 - mask[p] as u8 as f64))).collect();
    let wm_total: f64 = (0..hw).map(|p| weights[p] * (mask[p] as u8 as f64)).sum();

    let intersection = tape.weighted_sum(fg, wm)?;
    // union = sum w*(s + m - s*m) = sum w*s*(1-m) + sum w*m
    let union_soft = tape.weighted_sum(fg, w_not_m)?;
    let numer = tape.affine(intersection, T::one(), T::one());
    let denom = tape.affine(union_soft, T::one(), el(wm_total + 1.0));
    let inv = tape.recip(denom);
    let frac = tape.mul(numer, inv)?;
    Ok(tape.affine(frac, -T::one(), T::one()))
}

/// The fully-supervised training loss: weighted CE plus weighted IoU.
pub fn fs_loss<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    mask: &[bool],
    cfg: &FsLossConfig,
) -> Result<Var> {
    let (h, w) = check_mask(tape.shape(s), mask)?;
    let weights = boundary_weights(mask, h, w, cfg);
    let ce = weighted_ce_loss(tape, s, mask, &weights)?;
    let iou = weighted_iou_loss(tape, s, mask, &weights)?;
    tape.add(ce, iou)
}

/// Point-level baseline: cross-entropy at the annotated points, plus an
/// all-background term on images without any point.
pub fn pl_fcn_loss<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    pts: &PointAnnotations,
) -> Result<Var> {
    let shape = tape.shape(s);
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::dim(format!("score map must be [2,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[1], shape[2]);
    pts.check_bounds(h, w)?;
    let hw = h * w;
    let idx: Vec<usize> = if pts.is_empty() {
        (0..hw).collect() // background channel everywhere
    } else {
        pts.points().iter().map(|&(r, c)| hw + r * w + c).collect()
    };
    let g = tape.gather(s, idx)?;
    let logs = tape.log_clamped(g);
    let total = tape.sum_all(logs);
    Ok(tape.neg(total))
}
