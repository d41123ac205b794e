//! Synthetic shapes dataset: rectangles (class 0) and disks (class 1) on a
//! noisy background, with per-class masks.
//!
//! On disk a split is a directory holding `images.bin` and `masks.bin`
//! (tensor framing of [`super::checkpoint`], records `image{i}` `[H,W,3]`
//! and `mask{i}` `[H,W,K]`) plus `annotations.jsonl`, one record per image
//! with boxes in normalized cxcywh.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_tensors, save_tensors};
use crate::error::{Error, Result};
use crate::losses::{BBox, Targets};
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 2;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["rectangle", "disk"];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[H, W, 3]` in [0, 1].
    pub image: Tensor,
    /// Normalized boxes.
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    /// `[H, W, K]` 0/1 masks.
    pub masks: Tensor,
}

impl SyntheticSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }

    pub fn targets(&self) -> Targets {
        Targets { boxes: self.boxes.clone(), classes: self.classes.clone(), masks: Some(self.masks.clone()) }
    }

    /// Mirror image, masks and boxes left to right.
    pub fn hflip(&self) -> SyntheticSample {
        let flip = |t: &Tensor| {
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut out = Tensor::zeros(t.shape());
            for y in 0..h {
                for x in 0..w {
                    for k in 0..c {
                        out.set(&[y, w - 1 - x, k], t.at(&[y, x, k]));
                    }
                }
            }
            out
        };
        SyntheticSample {
            image: flip(&self.image),
            boxes: self.boxes.iter().map(|b| BBox::new(1.0 - b.cx, b.cy, b.w, b.h)).collect(),
            classes: self.classes.clone(),
            masks: flip(&self.masks),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Annotation {
    image_id: usize,
    width: usize,
    height: usize,
    boxes: Vec<[f64; 4]>,
    classes: Vec<usize>,
}

/// Integer pixel box `[x0, x1) × [y0, y1)`.
type PixelBox = (usize, usize, usize, usize);

fn separated(a: &PixelBox, b: &PixelBox) -> bool {
    a.1 < b.0 || b.1 < a.0 || a.3 < b.2 || b.3 < a.2
}

pub fn generate_sample<R: Rng + ?Sized>(size: usize, rng: &mut R) -> SyntheticSample {
    let (lo, hi) = ((size as f64 * 0.1).round().max(2.0) as usize, (size as f64 * 0.45).round() as usize);
    let count = rng.gen_range(1..=3);
    let mut placed: Vec<(PixelBox, usize)> = Vec::new();
    for _ in 0..200 {
        if placed.len() == count {
            break;
        }
        let class = rng.gen_range(0..NUM_CLASSES);
        let w = rng.gen_range(lo..=hi);
        let h = if class == 1 { w } else { rng.gen_range(lo..=hi) };
        let x0 = rng.gen_range(0..=size - w);
        let y0 = rng.gen_range(0..=size - h);
        let b = (x0, x0 + w, y0, y0 + h);
        if placed.iter().all(|(p, _)| separated(p, &b)) {
            placed.push((b, class));
        }
    }

    let background: f64 = rng.gen_range(0.0..0.4);
    let noise = Normal::new(0.0, 0.03).unwrap();
    let mut image = Tensor::zeros(&[size, size, 3]);
    for v in image.data_mut() {
        *v = (background + noise.sample(rng)).clamp(0.0, 1.0);
    }
    let mut masks = Tensor::zeros(&[size, size, NUM_CLASSES]);
    let (mut boxes, mut classes) = (Vec::new(), Vec::new());
    for &((x0, x1, y0, y1), class) in &placed {
        let color: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..1.0));
        let (cx, cy, r) = (0.5 * (x0 + x1) as f64, 0.5 * (y0 + y1) as f64, 0.5 * (x1 - x0) as f64);
        for y in y0..y1 {
            for x in x0..x1 {
                let inside = class == 0 || {
                    let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                    dx * dx + dy * dy <= r * r
                };
                if inside {
                    for (c, v) in color.iter().enumerate() {
                        image.set(&[y, x, c], *v);
                    }
                    masks.set(&[y, x, class], 1.0);
                }
            }
        }
        let s = size as f64;
        boxes.push(BBox::from_corners(x0 as f64 / s, y0 as f64 / s, x1 as f64 / s, y1 as f64 / s));
        classes.push(class);
    }
    SyntheticSample { image, boxes, classes, masks }
}

pub fn generate(n: usize, size: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(Error::Invalid("dataset size must be at least 1".into()));
    }
    if size < 8 {
        return Err(Error::Invalid(format!("image size {size} below 8")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| generate_sample(size, &mut rng)).collect())
}

pub fn save_split(dir: &Path, samples: &[SyntheticSample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let names: Vec<(String, String)> = (0..samples.len()).map(|i| (format!("image{i}"), format!("mask{i}"))).collect();
    let images: Vec<_> = names.iter().zip(samples).map(|((n, _), s)| (n.as_str(), &s.image)).collect();
    save_tensors(&dir.join("images.bin"), &images)?;
    let masks: Vec<_> = names.iter().zip(samples).map(|((_, n), s)| (n.as_str(), &s.masks)).collect();
    save_tensors(&dir.join("masks.bin"), &masks)?;
    let mut ann = BufWriter::new(fs::File::create(dir.join("annotations.jsonl"))?);
    for (i, s) in samples.iter().enumerate() {
        let (height, width) = s.size();
        let rec = Annotation {
            image_id: i,
            width,
            height,
            boxes: s.boxes.iter().map(BBox::as_array).collect(),
            classes: s.classes.clone(),
        };
        serde_json::to_writer(&mut ann, &rec).map_err(|e| Error::Format(e.to_string()))?;
        ann.write_all(b"\n")?;
    }
    ann.flush()?;
    Ok(())
}

pub fn load_split(dir: &Path) -> Result<Vec<SyntheticSample>> {
    let images = load_tensors(&dir.join("images.bin"))?;
    let masks = load_tensors(&dir.join("masks.bin"))?;
    let ann = BufReader::new(fs::File::open(dir.join("annotations.jsonl"))?);
    let mut records = Vec::new();
    for line in ann.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str::<Annotation>(&line).map_err(|e| Error::Format(e.to_string()))?);
        }
    }
    if images.len() != records.len() || masks.len() != records.len() {
        return Err(Error::Format(format!(
            "{} images, {} masks, {} annotations",
            images.len(),
            masks.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::Format(format!("empty split at {}", dir.display())));
    }
    records
        .into_iter()
        .zip(images)
        .zip(masks)
        .map(|((rec, (_, image)), (_, masks))| {
            if rec.boxes.len() != rec.classes.len() || image.shape() != [rec.height, rec.width, 3] {
                return Err(Error::Format(format!("inconsistent record for image {}", rec.image_id)));
            }
            Ok(SyntheticSample {
                image,
                boxes: rec.boxes.iter().map(|b| BBox::new(b[0], b[1], b[2], b[3])).collect(),
                classes: rec.classes,
                masks,
            })
        })
        .collect()
}

/// The validation split is drawn from `seed + VAL_SEED_OFFSET`.
pub const VAL_SEED_OFFSET: u64 = 0x9E37_79B9;

/// In-memory train and validation splits, identical to what
/// [`gen_synthetic_dataset`] writes.
pub fn generate_splits(train: usize, val: usize, size: usize, seed: u64) -> Result<(Vec<SyntheticSample>, Vec<SyntheticSample>)> {
    let val = if val > 0 { generate(val, size, seed.wrapping_add(VAL_SEED_OFFSET))? } else { Vec::new() };
    Ok((generate(train, size, seed)?, val))
}

/// Writes `train/` and `val/` splits under `dir`.
pub fn gen_synthetic_dataset(dir: &Path, train: usize, val: usize, size: usize, seed: u64) -> Result<()> {
    let (train, val) = generate_splits(train, val, size, seed)?;
    save_split(&dir.join("train"), &train)?;
    if !val.is_empty() {
        save_split(&dir.join("val"), &val)?;
    }
    Ok(())
}
