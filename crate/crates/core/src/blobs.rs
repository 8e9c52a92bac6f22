//! Connected-component labeling of binary masks (8-connectivity).

/// Labeled foreground components: 0 is background, blob ids run 1..=count in
/// row-major first-encounter order.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobLabeling {
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl BlobLabeling {
    pub fn label_at(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.w + col]
    }

    /// Flat pixel indices of each blob, in row-major order per blob.
    pub fn blob_pixels(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.count as usize];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                out[(l - 1) as usize].push(i);
            }
        }
        out
    }
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let up = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = up;
            x = up;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            // smaller root wins, keeping labels stable under merge order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling of the 8-connected components of `mask`.
pub fn label_blobs(mask: &[bool], h: usize, w: usize) -> BlobLabeling {
    debug_assert_eq!(mask.len(), h * w);
    let mut provisional = vec![0u32; h * w]; // 1-based, 0 = background
    let mut uf = UnionFind::new();

    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !mask[i] {
                continue;
            }
            // already-scanned 8-neighbors: W, NW, N, NE
            let mut label: Option<u32> = None;
            let mut neighbors = [0u32; 4];
            let mut n_count = 0;
            if x > 0 && mask[i - 1] {
                neighbors[n_count] = provisional[i - 1];
                n_count += 1;
            }
            if y > 0 {
                let up = i - w;
                if x > 0 && mask[up - 1] {
                    neighbors[n_count] = provisional[up - 1];
                    n_count += 1;
                }
                if mask[up] {
                    neighbors[n_count] = provisional[up];
                    n_count += 1;
                }
                if x + 1 < w && mask[up + 1] {
                    neighbors[n_count] = provisional[up + 1];
                    n_count += 1;
                }
            }
            for &nl in &neighbors[..n_count] {
                match label {
                    None => label = Some(nl),
                    Some(l) => uf.union(l - 1, nl - 1),
                }
            }
            provisional[i] = match label {
                Some(l) => l,
                None => uf.make() + 1,
            };
        }
    }

    // second pass: map roots to final ids in row-major first-encounter order
    let mut root_to_final = vec![0u32; uf.parent.len()];
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    for i in 0..h * w {
        if provisional[i] == 0 {
            continue;
        }
        let root = uf.find(provisional[i] - 1);
        if root_to_final[root as usize] == 0 {
            count += 1;
            root_to_final[root as usize] = count;
        }
        labels[i] = root_to_final[root as usize];
    }
    BlobLabeling { h, w, labels, count }
}

/// BFS flood-fill reference used by tests and oracles.
pub fn label_blobs_flood_fill(mask: &[bool], h: usize, w: usize) -> BlobLabeling {
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut queue = std::collections::VecDeque::new();
    for start in 0..h * w {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (y, x) = (i / w, i % w);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    let ni = ny as usize * w + nx as usize;
                    if mask[ni] && labels[ni] == 0 {
                        labels[ni] = count;
                        queue.push_back(ni);
                    }
                }
            }
        }
    }
    BlobLabeling { h, w, labels, count }
}
