//! Synthetic underwater-ish scenes: textured noise background with 0-4
//! elliptical fish, exact instance masks, and distance-transform points.
//!
//! Everything is drawn from a per-sample ChaCha stream derived from the
//! dataset seed, split, and index, so generation is byte-identical across
//! runs and thread schedules.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::edt::points_from_mask;
use super::{save_sample, Dataset, DatasetManifest, PointRecord, SplitRecords};
use crate::error::{Error, Result};
use crate::kernels::bilinear_axis;
use crate::par;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    /// Disjoint, high-contrast ellipses on a gentle background.
    Trivial,
    /// Moderate noise and contrast, mild overlap allowed.
    Standard,
    /// Strong noise, low contrast, heavier overlap.
    Hard,
}

impl Difficulty {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trivial" => Ok(Difficulty::Trivial),
            "standard" => Ok(Difficulty::Standard),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::config(format!("unknown difficulty {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Difficulty::Trivial => "trivial",
            Difficulty::Standard => "standard",
            Difficulty::Hard => "hard",
        }
    }

    fn params(&self) -> DifficultyParams {
        match self {
            Difficulty::Trivial => DifficultyParams {
                coarse_amp: 6.0,
                jitter_amp: 3.0,
                contrast: (70.0, 110.0),
                max_overlap: 0.0,
            },
            Difficulty::Standard => DifficultyParams {
                coarse_amp: 13.0,
                jitter_amp: 7.0,
                contrast: (45.0, 95.0),
                max_overlap: 0.3,
            },
            Difficulty::Hard => DifficultyParams {
                coarse_amp: 20.0,
                jitter_amp: 13.0,
                contrast: (25.0, 60.0),
                max_overlap: 0.45,
            },
        }
    }
}

struct DifficultyParams {
    coarse_amp: f64,
    jitter_amp: f64,
    contrast: (f64, f64),
    max_overlap: f64,
}

/// Generation request; sizes must all be positive.
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub difficulty: Difficulty,
    pub resolution: (usize, usize),
}

impl GenSpec {
    pub fn new(n_train: usize, n_val: usize, n_test: usize, seed: u64, difficulty: Difficulty) -> Self {
        GenSpec { n_train, n_val, n_test, seed, difficulty, resolution: (64, 96) }
    }
}

fn sample_seed(base: u64, split: u64, index: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ split.wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ index.wrapping_mul(0x94D0_49BB_1331_11EB)
}

pub struct RenderedSample {
    pub image: image::RgbImage,
    pub mask: Vec<u32>,
    pub points: Vec<PointRecord>,
}

/// Renders one sample from its own RNG stream.
pub fn render_sample(seed: u64, (h, w): (usize, usize), difficulty: Difficulty) -> RenderedSample {
    let p = difficulty.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (h.min(w) as f64 / 64.0).max(0.5);

    // background: base colour + coarse value noise + per-pixel jitter
    let base = [
        rng.gen_range(25.0..70.0),
        rng.gen_range(70.0..130.0),
        rng.gen_range(90.0..150.0),
    ];
    let (gh, gw) = (h / 8 + 2, w / 8 + 2);
    let coarse: Vec<f64> = (0..gh * gw).map(|_| rng.gen_range(-p.coarse_amp..p.coarse_amp)).collect();
    let ys = bilinear_axis(gh, h);
    let xs = bilinear_axis(gw, w);
    let mut luma = vec![0.0f64; h * w];
    for y in 0..h {
        let (y0, y1, fy) = ys[y];
        for x in 0..w {
            let (x0, x1, fx) = xs[x];
            let top = coarse[y0 * gw + x0] * (1.0 - fx) + coarse[y0 * gw + x1] * fx;
            let bot = coarse[y1 * gw + x0] * (1.0 - fx) + coarse[y1 * gw + x1] * fx;
            luma[y * w + x] = top * (1.0 - fy) + bot * fy + rng.gen_range(-p.jitter_amp..p.jitter_amp);
        }
    }

    // fish: rejection-placed rotated ellipses
    let n_fish = rng.gen_range(0..=4usize);
    let mut mask = vec![0u32; h * w];
    let mut placed: Vec<Vec<usize>> = Vec::new();
    struct Fish {
        pixels: Vec<usize>,
        rel: Vec<f64>, // normalized radius per pixel
        shift: f64,
        tint: [f64; 3],
    }
    let mut fishes: Vec<Fish> = Vec::new();
    for _ in 0..n_fish {
        let mut accepted = None;
        for _try in 0..60 {
            let margin = (6.0 * scale).ceil() as usize + 2;
            if h <= 2 * margin || w <= 2 * margin {
                break;
            }
            let cy = rng.gen_range(margin..h - margin) as f64;
            let cx = rng.gen_range(margin..w - margin) as f64;
            let major = rng.gen_range(7.0..15.0) * scale;
            let minor = (major * rng.gen_range(0.35..0.75)).max(3.0 * scale);
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let (sin, cos) = angle.sin_cos();
            let mut pixels = Vec::new();
            let mut rel = Vec::new();
            let reach = major.ceil() as i64 + 1;
            for dy in -reach..=reach {
                for dx in -reach..=reach {
                    let (yy, xx) = (cy as i64 + dy, cx as i64 + dx);
                    if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                        continue;
                    }
                    let (fy, fx) = (yy as f64 - cy, xx as f64 - cx);
                    let u = (fx * cos + fy * sin) / major;
                    let v = (-fx * sin + fy * cos) / minor;
                    let r2 = u * u + v * v;
                    if r2 <= 1.0 {
                        pixels.push(yy as usize * w + xx as usize);
                        rel.push(r2.sqrt());
                    }
                }
            }
            if pixels.is_empty() {
                continue;
            }
            // overlap checks against previously placed instances
            let taken: Vec<usize> = pixels.iter().filter(|&&i| mask[i] != 0).cloned().collect();
            if taken.len() as f64 > p.max_overlap * pixels.len() as f64 {
                continue;
            }
            let steals_too_much = placed.iter().any(|prev| {
                let stolen = prev.iter().filter(|i| pixels.contains(i)).count();
                stolen as f64 > p.max_overlap * prev.len() as f64
            });
            if steals_too_much {
                continue;
            }
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let shift = sign * rng.gen_range(p.contrast.0..p.contrast.1);
            let tint = [rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0), rng.gen_range(-12.0..12.0)];
            accepted = Some(Fish { pixels, rel, shift, tint });
            break;
        }
        if let Some(fish) = accepted {
            let id = fishes.len() as u32 + 1;
            for &px in &fish.pixels {
                mask[px] = id;
            }
            placed.push(fish.pixels.clone());
            fishes.push(fish);
        }
    }

    // rasterize: background first, then fish with a mild interior gradient
    let mut rgb = vec![0u8; h * w * 3];
    for i in 0..h * w {
        for c in 0..3 {
            rgb[i * 3 + c] = (base[c] + luma[i]).clamp(0.0, 255.0) as u8;
        }
    }
    for fish in &fishes {
        for (&px, &r) in fish.pixels.iter().zip(&fish.rel) {
            if mask[px] == 0 {
                continue; // overwritten by a later fish
            }
            let body = 1.0 - 0.35 * r * r;
            for c in 0..3 {
                let v = base[c] + luma[px] + (fish.shift * body) + fish.tint[c];
                rgb[px * 3 + c] = v.clamp(0.0, 255.0) as u8;
            }
        }
    }
    // ownership may have changed under overlaps: recompute per final mask
    let derived = points_from_mask(&mask, h, w);
    let points: Vec<PointRecord> = derived
        .points
        .iter()
        .map(|&(id, (y, x))| PointRecord { y: y as u32, x: x as u32, instance_id: id })
        .collect();

    let image = image::RgbImage::from_vec(w as u32, h as u32, rgb).expect("buffer size");
    RenderedSample { image, mask, points }
}

/// Generates and writes a full dataset under `root`; returns the loaded
/// handle.
pub fn synth_generate(root: &Path, spec: &GenSpec) -> Result<Dataset> {
    if spec.n_train == 0 || spec.n_val == 0 || spec.n_test == 0 {
        return Err(Error::contract(format!(
            "split sizes must be positive, got {}/{}/{}",
            spec.n_train, spec.n_val, spec.n_test
        )));
    }
    let mut manifest = DatasetManifest {
        resolution: spec.resolution,
        seed: spec.seed,
        difficulty: spec.difficulty.name().to_string(),
        splits: Default::default(),
    };
    for (split_id, (split, n)) in [
        ("train", spec.n_train),
        ("val", spec.n_val),
        ("test", spec.n_test),
    ]
    .into_iter()
    .enumerate()
    {
        let rendered = par::map_indexed(n, |i| {
            render_sample(
                sample_seed(spec.seed, split_id as u64 + 1, i as u64),
                spec.resolution,
                spec.difficulty,
            )
        });
        let mut records = Vec::with_capacity(n);
        for (i, r) in rendered.iter().enumerate() {
            records.push(save_sample(root, split, i, &r.image, Some(&r.mask), &r.points)?);
        }
        manifest.splits.insert(split.to_string(), SplitRecords { n, samples: records });
    }
    let manifest_path = root.join("manifest.json");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Dataset::load(root)
}
