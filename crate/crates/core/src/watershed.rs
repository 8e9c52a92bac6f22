//! Seeded watershed splitting of one blob by priority flood.
//!
//! Regions grow from the seeds over a height surface, lower heights first;
//! equal-priority queue entries pop in insertion order (FIFO), with seeds
//! inserted in annotation order, so the result is fully deterministic. When a
//! pixel is about to be claimed but already touches a different region
//! (4-connectivity), it becomes a boundary pixel and is claimed by neither.
//! Regions never grow through boundary pixels; any pixels sealed off from all
//! seeds this way are folded into the boundary, so every remaining blob pixel
//! lies in a seed-connected region and removing the boundary leaves exactly
//! one seed per component.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::tensor::Element;

/// Region decomposition of one blob.
#[derive(Clone, Debug)]
pub struct WatershedResult {
    /// Per-pixel seed index (annotation order); `None` for pixels outside
    /// the blob and for boundary pixels.
    pub region: Vec<Option<u32>>,
    /// Flat indices of boundary pixels, sorted ascending.
    pub boundary: Vec<usize>,
}

struct Entry {
    height: f64,
    seq: u64,
    pixel: usize,
    region: u32,
}

impl PartialEq for Entry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Entry {}
impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Entry {
    // BinaryHeap is a max-heap: invert so lower height pops first and,
    // within a height, the earliest insertion pops first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .height
            .total_cmp(&self.height)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

const UNASSIGNED: u32 = u32::MAX;
const BOUNDARY: u32 = u32::MAX - 1;

/// Splits `blob` (a mask over the full `h x w` grid) into seed regions by
/// priority flood over `surface`.
pub fn watershed_split<T: Element>(
    blob: &[bool],
    seeds: &[(usize, usize)],
    surface: &[T],
    h: usize,
    w: usize,
) -> Result<WatershedResult> {
    if blob.len() != h * w || surface.len() != h * w {
        return Err(Error::dim(format!(
            "watershed: blob {} / surface {} vs grid {}x{}",
            blob.len(),
            surface.len(),
            h,
            w
        )));
    }
    if seeds.is_empty() {
        return Err(Error::contract("watershed needs at least one seed".to_string()));
    }
    let mut state = vec![UNASSIGNED; h * w];
    for (idx, &(r, c)) in seeds.iter().enumerate() {
        if r >= h || c >= w || !blob[r * w + c] {
            return Err(Error::contract(format!("seed ({r},{c}) lies outside the blob")));
        }
        if state[r * w + c] != UNASSIGNED {
            return Err(Error::contract(format!("duplicate seed at ({r},{c})")));
        }
        state[r * w + c] = idx as u32;
    }

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let neighbors = |i: usize| {
        let (y, x) = (i / w, i % w);
        [
            (y > 0).then(|| i - w),
            (x > 0).then(|| i - 1),
            (x + 1 < w).then(|| i + 1),
            (y + 1 < h).then(|| i + w),
        ]
    };
    let push_frontier = |heap: &mut BinaryHeap<Entry>, seq: &mut u64, state: &[u32], i: usize, region: u32| {
        for n in neighbors(i).into_iter().flatten() {
            if blob[n] && state[n] == UNASSIGNED {
                heap.push(Entry { height: surface[n].as_f64(), seq: *seq, pixel: n, region });
                *seq += 1;
            }
        }
    };

    for (idx, &(r, c)) in seeds.iter().enumerate() {
        push_frontier(&mut heap, &mut seq, &state, r * w + c, idx as u32);
    }

    while let Some(Entry { pixel, region, .. }) = heap.pop() {
        if state[pixel] != UNASSIGNED {
            continue;
        }
        let foreign = neighbors(pixel).into_iter().flatten().any(|n| {
            blob[n] && state[n] != UNASSIGNED && state[n] != BOUNDARY && state[n] != region
        });
        if foreign {
            state[pixel] = BOUNDARY;
        } else {
            state[pixel] = region;
            push_frontier(&mut heap, &mut seq, &state, pixel, region);
        }
    }

    // pixels sealed off by the line join the boundary
    let mut region = vec![None; h * w];
    let mut boundary = Vec::new();
    for i in 0..h * w {
        if !blob[i] {
            continue;
        }
        match state[i] {
            BOUNDARY | UNASSIGNED => boundary.push(i),
            r => region[i] = Some(r),
        }
    }
    Ok(WatershedResult { region, boundary })
}
