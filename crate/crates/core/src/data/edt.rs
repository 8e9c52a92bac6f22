//! Exact Euclidean distance transform and point derivation from instance
//! masks.
//!
//! Distances are squared and integer-exact: pass one scans each row for the
//! pixel-count distance to the nearest complement pixel in that row, pass two
//! minimizes `g^2 + dy^2` down each column. Annotation points are the
//! per-instance argmax of the transform (ties broken by smallest row-major
//! index), i.e. the most interior pixel of each instance.

use crate::error::Result;
use crate::loss::PointAnnotations;

/// Sentinel for "no complement pixel anywhere" (instance covers everything).
const FAR: u64 = u64::MAX / 4;

/// Squared distance from every `true` pixel to the nearest `false` pixel
/// within the grid; 0 on `false` pixels.
pub fn squared_edt(mask: &[bool], h: usize, w: usize) -> Vec<u64> {
    debug_assert_eq!(mask.len(), h * w);
    // pass 1: per-row distance (in columns) to the nearest complement pixel
    let far_1d = (h + w) as u64;
    let mut g = vec![0u64; h * w];
    for y in 0..h {
        let row = y * w;
        let mut dist = far_1d;
        for x in 0..w {
            dist = if mask[row + x] { dist.saturating_add(1) } else { 0 };
            g[row + x] = dist;
        }
        dist = far_1d;
        for x in (0..w).rev() {
            dist = if mask[row + x] { dist.saturating_add(1) } else { 0 };
            g[row + x] = g[row + x].min(dist);
        }
    }
    // pass 2: minimize g(y')^2 + (y - y')^2 down each column
    let mut out = vec![0u64; h * w];
    for x in 0..w {
        for y in 0..h {
            if !mask[y * w + x] {
                continue;
            }
            let mut best = FAR;
            for yp in 0..h {
                let gv = g[yp * w + x];
                let dy = y.abs_diff(yp) as u64;
                let cand = if gv >= far_1d { FAR } else { gv * gv + dy * dy };
                if cand < best {
                    best = cand;
                }
            }
            out[y * w + x] = best;
        }
    }
    out
}

/// Brute-force reference: per pixel, the minimum squared distance over all
/// complement pixels. Used by tests as the independent oracle.
pub fn squared_edt_brute_force(mask: &[bool], h: usize, w: usize) -> Vec<u64> {
    let complement: Vec<(usize, usize)> = (0..h * w)
        .filter(|&i| !mask[i])
        .map(|i| (i / w, i % w))
        .collect();
    (0..h * w)
        .map(|i| {
            if !mask[i] {
                return 0;
            }
            let (y, x) = (i / w, i % w);
            complement
                .iter()
                .map(|&(cy, cx)| {
                    let dy = y.abs_diff(cy) as u64;
                    let dx = x.abs_diff(cx) as u64;
                    dy * dy + dx * dx
                })
                .min()
                .unwrap_or(FAR)
        })
        .collect()
}

/// Extracted per-instance points plus any instance ids that had no pixels.
#[derive(Clone, Debug)]
pub struct DerivedPoints {
    /// `(instance_id, (row, col))` sorted by instance id.
    pub points: Vec<(u32, (usize, usize))>,
    /// Ids in `1..=max_id` with no pixels in the mask (skipped).
    pub skipped: Vec<u32>,
}

impl DerivedPoints {
    pub fn annotations(&self) -> Result<PointAnnotations> {
        PointAnnotations::new(self.points.iter().map(|&(_, p)| p).collect())
    }
}

/// For each instance id, the pixel maximizing the distance to the instance's
/// complement; ties go to the smallest row-major index.
pub fn points_from_mask(instance_mask: &[u32], h: usize, w: usize) -> DerivedPoints {
    debug_assert_eq!(instance_mask.len(), h * w);
    let max_id = instance_mask.iter().copied().max().unwrap_or(0);
    let mut points = Vec::new();
    let mut skipped = Vec::new();
    for id in 1..=max_id {
        let mask: Vec<bool> = instance_mask.iter().map(|&v| v == id).collect();
        if !mask.iter().any(|&m| m) {
            skipped.push(id);
            continue;
        }
        let d2 = squared_edt(&mask, h, w);
        let mut best_idx = 0;
        let mut best = 0u64;
        let mut found = false;
        for (i, (&m, &d)) in mask.iter().zip(&d2).enumerate() {
            if m && (!found || d > best) {
                best = d;
                best_idx = i;
                found = true;
            }
        }
        points.push((id, (best_idx / w, best_idx % w)));
    }
    DerivedPoints { points, skipped }
}
