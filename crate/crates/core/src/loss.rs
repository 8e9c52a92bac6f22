//! The four-term point-supervision loss over a two-channel score map.
//!
//! `S` is a `[2, H, W]` softmax output: channel 0 background, channel 1
//! foreground. The discrete structure (argmax mask, blobs, watershed
//! boundaries) is computed from the current forward values and held fixed;
//! gradients flow only through the gathered score entries.

use crate::blobs::{label_blobs, BlobLabeling};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};
use crate::watershed::watershed_split;

/// Per-image click annotations: one `(row, col)` per object instance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PointAnnotations {
    points: Vec<(usize, usize)>,
}

impl PointAnnotations {
    /// Builds the annotation list; duplicate coordinates are forbidden.
    pub fn new(points: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for &p in &points {
            if !seen.insert(p) {
                return Err(Error::contract(format!("duplicate annotation point {p:?}")));
            }
        }
        Ok(PointAnnotations { points })
    }

    pub fn empty() -> Self {
        PointAnnotations { points: Vec::new() }
    }

    pub fn points(&self) -> &[(usize, usize)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn check_bounds(&self, h: usize, w: usize) -> Result<()> {
        for &(r, c) in &self.points {
            if r >= h || c >= w {
                return Err(Error::contract(format!(
                    "point ({r},{c}) outside {h}x{w} image"
                )));
            }
        }
        Ok(())
    }
}

/// Discrete structure extracted from the current scores, frozen during
/// gradient computation.
#[derive(Clone, Debug)]
pub struct LcfcnStructure {
    pub h: usize,
    pub w: usize,
    pub fg_mask: Vec<bool>,
    pub blobs: BlobLabeling,
    /// One entry per blob holding >= 2 points: (point count k, boundary pixels).
    pub splits: Vec<(usize, Vec<usize>)>,
    /// Row-major pixels of all blobs containing no point.
    pub fp_pixels: Vec<usize>,
}

fn check_score_map(shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[0] != 2 {
        return Err(Error::dim(format!("score map must be [2,H,W], got {shape:?}")));
    }
    Ok((shape[1], shape[2]))
}

/// Computes the argmax mask, its blobs, per-blob watershed boundaries, and
/// the point-free blob pixels. Ties in the argmax go to background.
pub fn lcfcn_structure<T: Element>(s: &Tensor<T>, pts: &PointAnnotations) -> Result<LcfcnStructure> {
    let (h, w) = check_score_map(s.shape())?;
    pts.check_bounds(h, w)?;
    let hw = h * w;
    let data = s.data();
    let fg_mask: Vec<bool> = (0..hw).map(|i| data[hw + i] > data[i]).collect();
    let blobs = label_blobs(&fg_mask, h, w);

    let mut points_per_blob = vec![Vec::<(usize, usize)>::new(); blobs.count as usize];
    for &(r, c) in pts.points() {
        let l = blobs.label_at(r, c);
        if l > 0 {
            points_per_blob[(l - 1) as usize].push((r, c));
        }
    }

    // watershed surface: flood the most confidently-foreground pixels first
    let surface: Vec<T> = (0..hw).map(|i| -data[hw + i]).collect();
    let mut splits = Vec::new();
    let mut fp_pixels = Vec::new();
    for (blob_idx, blob_points) in points_per_blob.iter().enumerate() {
        let blob_id = blob_idx as u32 + 1;
        if blob_points.len() >= 2 {
            let blob_mask: Vec<bool> = blobs.labels.iter().map(|&l| l == blob_id).collect();
            let ws = watershed_split(&blob_mask, blob_points, &surface, h, w)?;
            splits.push((blob_points.len(), ws.boundary));
        } else if blob_points.is_empty() {
            fp_pixels.extend(blobs.labels.iter().enumerate().filter(|(_, &l)| l == blob_id).map(|(i, _)| i));
        }
    }
    fp_pixels.sort_unstable();
    Ok(LcfcnStructure { h, w, fg_mask, blobs, splits, fp_pixels })
}

fn neg_log_gathered<T: Element>(tape: &mut Tape<T>, s: Var, indices: Vec<usize>) -> Result<Var> {
    let g = tape.gather(s, indices)?;
    let lg = tape.log_clamped(g);
    let total = tape.sum_all(lg);
    Ok(tape.neg(total))
}

/// Image-level term: `-log(max_p S_fg)` when points exist, else
/// `-log(1 - max_p S_fg)`. The subgradient reaches only the argmax pixel.
pub fn loss_image_level<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    pts: &PointAnnotations,
) -> Result<Var> {
    let (h, w) = check_score_map(tape.shape(s))?;
    let hw = h * w;
    let fg = tape.gather(s, (hw..2 * hw).collect())?;
    let max = tape.max_all(fg);
    let prob = if pts.is_empty() {
        tape.affine(max, -T::one(), T::one())
    } else {
        max
    };
    let lg = tape.log_clamped(prob);
    Ok(tape.neg(lg))
}

/// Point-level term: `-sum_{p in pts} log S_fg(p)`.
pub fn loss_point_level<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    pts: &PointAnnotations,
) -> Result<Var> {
    let (h, w) = check_score_map(tape.shape(s))?;
    pts.check_bounds(h, w)?;
    if pts.is_empty() {
        return Ok(tape.scalar_const(T::zero()));
    }
    let hw = h * w;
    let idx: Vec<usize> = pts.points().iter().map(|&(r, c)| hw + r * w + c).collect();
    neg_log_gathered(tape, s, idx)
}

/// Split-level term: for every blob with `k >= 2` points, `k` times the
/// background negative log-likelihood summed over its watershed boundary.
pub fn loss_split_level<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    structure: &LcfcnStructure,
) -> Result<Var> {
    loss_split_level_weighted(tape, s, structure, true)
}

/// [`loss_split_level`] with the per-blob weight switchable between the
/// point count `k` and 1.
pub fn loss_split_level_weighted<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    structure: &LcfcnStructure,
    weight_by_k: bool,
) -> Result<Var> {
    check_score_map(tape.shape(s))?;
    let mut total = tape.scalar_const(T::zero());
    for (k, boundary) in &structure.splits {
        if boundary.is_empty() {
            continue;
        }
        let term = neg_log_gathered(tape, s, boundary.clone())?;
        let weight = if weight_by_k { *k as f64 } else { 1.0 };
        let weighted = tape.affine(term, T::from_f64(weight), T::zero());
        total = tape.add(total, weighted)?;
    }
    Ok(total)
}

/// False-positive term: background negative log-likelihood over every pixel
/// of every point-free blob.
pub fn loss_false_positive<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    structure: &LcfcnStructure,
) -> Result<Var> {
    check_score_map(tape.shape(s))?;
    if structure.fp_pixels.is_empty() {
        return Ok(tape.scalar_const(T::zero()));
    }
    neg_log_gathered(tape, s, structure.fp_pixels.clone())
}

/// The full loss with a caller-provided (frozen) structure.
pub fn lcfcn_loss_with_structure<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    pts: &PointAnnotations,
    structure: &LcfcnStructure,
) -> Result<Var> {
    lcfcn_loss_configured(tape, s, pts, structure, true)
}

/// Full loss with the split-weight switch exposed.
pub fn lcfcn_loss_configured<T: Element>(
    tape: &mut Tape<T>,
    s: Var,
    pts: &PointAnnotations,
    structure: &LcfcnStructure,
    split_weight_k: bool,
) -> Result<Var> {
    let li = loss_image_level(tape, s, pts)?;
    let lp = loss_point_level(tape, s, pts)?;
    let ls = loss_split_level_weighted(tape, s, structure, split_weight_k)?;
    let lf = loss_false_positive(tape, s, structure)?;
    let a = tape.add(li, lp)?;
    let b = tape.add(ls, lf)?;
    tape.add(a, b)
}

/// The full loss, deriving the structure from the current values of `s`.
pub fn lcfcn_loss<T: Element>(tape: &mut Tape<T>, s: Var, pts: &PointAnnotations) -> Result<Var> {
    let values = tape.value_tensor(s);
    let structure = lcfcn_structure(&values, pts)?;
    lcfcn_loss_with_structure(tape, s, pts, &structure)
}
