//! Dataset generation, the portable on-disk format, and image loading.
//!
//! Layout under a dataset root:
//!
//! ```text
//! root/{train,val,test}/{images,masks,points}/NNNN.{png,json}
//! root/manifest.json
//! ```
//!
//! Images are 8-bit RGB PNG; masks are single-channel PNG of instance ids
//! (8-bit, or 16-bit when an image holds more than 255 instances); points are
//! a JSON list of `{y, x, instance_id}`. All manifest paths are relative to
//! the root.

pub mod edt;
pub mod normalize;
pub mod synth;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::PointAnnotations;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PointRecord {
    pub y: u32,
    pub x: u32,
    pub instance_id: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image: String,
    pub mask: Option<String>,
    pub points: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitRecords {
    pub n: usize,
    pub samples: Vec<SampleRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub resolution: (usize, usize),
    pub seed: u64,
    pub difficulty: String,
    pub splits: BTreeMap<String, SplitRecords>,
}

/// One loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: image::RgbImage,
    /// Row-major instance ids (0 = background), when a mask exists.
    pub instance_mask: Option<Vec<u32>>,
    pub points: Vec<PointRecord>,
    pub split: String,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.image.height() as usize
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn annotations(&self) -> Result<PointAnnotations> {
        PointAnnotations::new(self.points.iter().map(|p| (p.y as usize, p.x as usize)).collect())
    }

    /// Ground-truth foreground mask (any instance id).
    pub fn binary_mask(&self) -> Option<Vec<bool>> {
        self.instance_mask.as_ref().map(|m| m.iter().map(|&v| v > 0).collect())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }
}

/// A dataset root plus its parsed manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Dataset> {
        let manifest_path = root.join("manifest.json");
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| Error::validation(&manifest_path, format!("cannot read manifest: {e}")))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::validation(&manifest_path, format!("bad manifest: {e}")))?;
        // splits must be disjoint on referenced files
        let mut seen = std::collections::HashSet::new();
        for (split, records) in &manifest.splits {
            if records.samples.len() != records.n {
                return Err(Error::validation(
                    &manifest_path,
                    format!("split {split}: n={} but {} records", records.n, records.samples.len()),
                ));
            }
            for rec in &records.samples {
                if !seen.insert(rec.image.clone()) {
                    return Err(Error::validation(
                        &manifest_path,
                        format!("file {} referenced by more than one split", rec.image),
                    ));
                }
            }
        }
        Ok(Dataset { root: root.to_path_buf(), manifest })
    }

    pub fn split(&self, name: &str) -> Result<&SplitRecords> {
        self.manifest
            .splits
            .get(name)
            .ok_or_else(|| Error::config(format!("dataset has no split {name:?}")))
    }

    pub fn len(&self, split: &str) -> Result<usize> {
        Ok(self.split(split)?.n)
    }

    /// Loads and validates one sample.
    pub fn load_sample(&self, split: &str, index: usize) -> Result<Sample> {
        let records = self.split(split)?;
        let rec = records.samples.get(index).ok_or_else(|| {
            Error::config(format!("sample {index} out of range for split {split:?}"))
        })?;
        let image_path = self.root.join(&rec.image);
        let image = image::open(&image_path)
            .map_err(|e| Error::validation(&image_path, format!("cannot decode image: {e}")))?
            .to_rgb8();
        let (h, w) = (image.height() as usize, image.width() as usize);

        let instance_mask = match &rec.mask {
            Some(mask_rel) => {
                let mask_path = self.root.join(mask_rel);
                Some(load_instance_mask(&mask_path, h, w)?)
            }
            None => None,
        };

        let points_path = self.root.join(&rec.points);
        let points = load_points(&points_path)?;
        for p in &points {
            if p.y as usize >= h || p.x as usize >= w {
                return Err(Error::validation(
                    &points_path,
                    format!("point ({},{}) outside {h}x{w} image", p.y, p.x),
                ));
            }
        }
        if let Some(mask) = &instance_mask {
            validate_points_against_mask(&points_path, &points, mask, h, w)?;
        }
        // duplicate coordinates are rejected by the annotation type
        PointAnnotations::new(points.iter().map(|p| (p.y as usize, p.x as usize)).collect())
            .map_err(|e| Error::validation(&points_path, e.to_string()))?;

        Ok(Sample { image, instance_mask, points, split: split.to_string() })
    }

    /// Per-image instance counts of a split (from the point files).
    pub fn counts(&self, split: &str) -> Result<Vec<usize>> {
        let records = self.split(split)?;
        let mut out = Vec::with_capacity(records.n);
        for rec in &records.samples {
            let points = load_points(&self.root.join(&rec.points))?;
            out.push(points.len());
        }
        Ok(out)
    }
}

fn validate_points_against_mask(
    points_path: &Path,
    points: &[PointRecord],
    mask: &[u32],
    h: usize,
    w: usize,
) -> Result<()> {
    if mask.len() != h * w {
        return Err(Error::validation(points_path, "mask size mismatch".to_string()));
    }
    let mut per_instance = BTreeMap::new();
    for p in points {
        let at = mask[p.y as usize * w + p.x as usize];
        if at != p.instance_id {
            return Err(Error::validation(
                points_path,
                format!("point ({},{}) labeled instance {} but mask holds {at}", p.y, p.x, p.instance_id),
            ));
        }
        *per_instance.entry(p.instance_id).or_insert(0usize) += 1;
    }
    for (&id, &n) in &per_instance {
        if n != 1 {
            return Err(Error::validation(
                points_path,
                format!("instance {id} has {n} points (expected exactly 1)"),
            ));
        }
    }
    let mask_ids: std::collections::BTreeSet<u32> =
        mask.iter().copied().filter(|&v| v > 0).collect();
    for id in mask_ids {
        if !per_instance.contains_key(&id) {
            return Err(Error::validation(
                points_path,
                format!("instance {id} present in mask but has no point"),
            ));
        }
    }
    Ok(())
}

fn load_points(path: &Path) -> Result<Vec<PointRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::validation(path, format!("cannot read points: {e}")))?;
    serde_json::from_str(&text).map_err(|e| Error::validation(path, format!("bad points json: {e}")))
}

fn load_instance_mask(path: &Path, h: usize, w: usize) -> Result<Vec<u32>> {
    let img = image::open(path)
        .map_err(|e| Error::validation(path, format!("cannot decode mask: {e}")))?;
    if (img.height() as usize, img.width() as usize) != (h, w) {
        return Err(Error::validation(
            path,
            format!("mask is {}x{} but image is {h}x{w}", img.height(), img.width()),
        ));
    }
    let data = match img {
        DynamicImage::ImageLuma8(m) => m.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(m) => m.into_raw().into_iter().map(u32::from).collect(),
        other => other.to_luma8().into_raw().into_iter().map(u32::from).collect(),
    };
    Ok(data)
}

/// Binary (0/255) single-channel PNG, as written for pseudo-masks.
pub fn load_binary_mask(path: &Path, h: usize, w: usize) -> Result<Vec<bool>> {
    let m = load_instance_mask(path, h, w)?;
    Ok(m.into_iter().map(|v| v > 0).collect())
}

/// Writes one sample's files and returns its manifest record.
pub fn save_sample(
    root: &Path,
    split: &str,
    index: usize,
    image: &image::RgbImage,
    mask: Option<&[u32]>,
    points: &[PointRecord],
) -> Result<SampleRecord> {
    let rel_image = format!("{split}/images/{index:04}.png");
    let rel_points = format!("{split}/points/{index:04}.json");
    let image_path = root.join(&rel_image);
    std::fs::create_dir_all(image_path.parent().unwrap())?;
    image
        .save(&image_path)
        .map_err(|e| Error::format(format!("writing {}: {e}", image_path.display())))?;

    let rel_mask = match mask {
        Some(m) => {
            let rel = format!("{split}/masks/{index:04}.png");
            let path = root.join(&rel);
            std::fs::create_dir_all(path.parent().unwrap())?;
            save_instance_mask(&path, m, image.height() as usize, image.width() as usize)?;
            Some(rel)
        }
        None => None,
    };

    let points_path = root.join(&rel_points);
    std::fs::create_dir_all(points_path.parent().unwrap())?;
    std::fs::write(&points_path, serde_json::to_string(points)?)?;
    Ok(SampleRecord { image: rel_image, mask: rel_mask, points: rel_points })
}

fn save_instance_mask(path: &Path, mask: &[u32], h: usize, w: usize) -> Result<()> {
    let max_id = mask.iter().copied().max().unwrap_or(0);
    if max_id > u16::MAX as u32 {
        return Err(Error::contract(format!("{max_id} instances exceed the 16-bit mask format")));
    }
    if max_id > 255 {
        let buf: Vec<u16> = mask.iter().map(|&v| v as u16).collect();
        let img = image::ImageBuffer::<image::Luma<u16>, _>::from_vec(w as u32, h as u32, buf)
            .expect("mask buffer size");
        img.save(path).map_err(|e| Error::format(format!("writing {}: {e}", path.display())))?;
    } else {
        let buf: Vec<u8> = mask.iter().map(|&v| v as u8).collect();
        let img = image::GrayImage::from_vec(w as u32, h as u32, buf).expect("mask buffer size");
        img.save(path).map_err(|e| Error::format(format!("writing {}: {e}", path.display())))?;
    }
    Ok(())
}

/// Writes a binary prediction mask as 0/255 PNG.
pub fn save_binary_mask(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let img = image::GrayImage::from_vec(w as u32, h as u32, buf).expect("mask buffer size");
    img.save(path).map_err(|e| Error::format(format!("writing {}: {e}", path.display())))
}

/// Blends a predicted mask and the annotation points over the image for
/// qualitative inspection.
pub fn save_overlay(
    image: &image::RgbImage,
    fg_mask: &[bool],
    points: &[(usize, usize)],
    path: &Path,
) -> Result<()> {
    let (h, w) = (image.height() as usize, image.width() as usize);
    debug_assert_eq!(fg_mask.len(), h * w);
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            if fg_mask[y * w + x] {
                let px = out.get_pixel_mut(x as u32, y as u32);
                px.0[0] = ((px.0[0] as u16 + 2 * 255) / 3) as u8;
                px.0[1] = (px.0[1] as u16 / 3 * 2) as u8;
                px.0[2] = (px.0[2] as u16 / 3 * 2) as u8;
            }
        }
    }
    for &(py, px) in points {
        for d in -2i64..=2 {
            for (yy, xx) in [(py as i64 + d, px as i64), (py as i64, px as i64 + d)] {
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out.put_pixel(xx as u32, yy as u32, image::Rgb([0, 255, 0]));
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    out.save(path).map_err(|e| Error::format(format!("writing {}: {e}", path.display())))
}
