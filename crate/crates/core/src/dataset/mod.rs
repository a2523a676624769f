//! Image time series, annotation masks and pixel populations.

mod manifest;
mod synthetic;

pub use manifest::{load_manifest, save_manifest, LegendEntry, LegendSplit, Manifest, ManifestFrame, ManifestMask};
pub use synthetic::{generate_synthetic, ClassSignature, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{normalize_pixel, Normalization};

/// Co-registered RGB frames, one per timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageTimeSeries {
    width: usize,
    height: usize,
    timestamps: Vec<String>,
    /// Each frame is `height * width * 3` bytes, row-major, RGB interleaved.
    frames: Vec<Vec<u8>>,
}

impl ImageTimeSeries {
    pub fn new(width: usize, height: usize, timestamps: Vec<String>, frames: Vec<Vec<u8>>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Data("an image time series needs at least one frame".into()));
        }
        if timestamps.len() != frames.len() {
            return Err(Error::Data(format!(
                "{} timestamps for {} frames",
                timestamps.len(),
                frames.len()
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Data("frames must have non-zero size".into()));
        }
        if let Some(t) = frames.iter().position(|f| f.len() != width * height * 3) {
            return Err(Error::Data(format!("frame dimension mismatch at frame {t}")));
        }
        Ok(Self { width, height, timestamps, frames })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    /// Number of timestamps `M`.
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn timestamps(&self) -> &[String] {
        &self.timestamps
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        &self.frames[t]
    }

    pub fn pixel(&self, t: usize, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        let f = &self.frames[t];
        [f[o], f[o + 1], f[o + 2]]
    }

    pub fn contains(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }
}

/// Split assignment stored in an annotation mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskSplit {
    None,
    Train,
    Test,
}

/// Per-pixel class labels and train/test assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationMask {
    width: usize,
    height: usize,
    labels: Vec<Option<usize>>,
    split: Vec<MaskSplit>,
    class_names: Vec<String>,
}

impl AnnotationMask {
    pub fn new(
        width: usize,
        height: usize,
        labels: Vec<Option<usize>>,
        split: Vec<MaskSplit>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        let n = width * height;
        if labels.len() != n || split.len() != n {
            return Err(Error::Data(format!("mask arrays do not match {width}x{height}")));
        }
        let c = class_names.len();
        for (i, (l, s)) in labels.iter().zip(&split).enumerate() {
            let (x, y) = (i % width, i / width);
            match l {
                Some(id) if *id >= c => {
                    return Err(Error::Data(format!("class id {id} at ({x}, {y}) but only {c} classes")));
                }
                None if *s != MaskSplit::None => {
                    return Err(Error::Data(format!("unlabeled pixel ({x}, {y}) assigned to a split")));
                }
                _ => {}
            }
        }
        Ok(Self { width, height, labels, split, class_names })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn label(&self, x: usize, y: usize) -> Option<usize> {
        self.labels[y * self.width + x]
    }

    pub fn split_at(&self, x: usize, y: usize) -> MaskSplit {
        self.split[y * self.width + x]
    }

    /// Labeled pixels of one mask split in raster order.
    pub fn pixels(&self, split: MaskSplit) -> Vec<PixelIndex> {
        let as_pixel = match split {
            MaskSplit::Train => PixelSplit::Train,
            MaskSplit::Test => PixelSplit::Test,
            MaskSplit::None => return Vec::new(),
        };
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| (x, y)))
            .filter(|&(x, y)| self.split_at(x, y) == split)
            .map(|(x, y)| PixelIndex { x, y, label: self.label(x, y).unwrap(), split: as_pixel })
            .collect()
    }

    /// Number of labeled pixels per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for l in self.labels.iter().flatten() {
            counts[*l] += 1;
        }
        counts
    }
}

/// A named image time series with its annotation mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub name: String,
    pub series: ImageTimeSeries,
    pub mask: AnnotationMask,
}

impl Dataset {
    pub fn new(name: impl Into<String>, series: ImageTimeSeries, mask: AnnotationMask) -> Result<Self> {
        if series.width() != mask.width() || series.height() != mask.height() {
            return Err(Error::Data(format!(
                "frame dimension mismatch: frames {}x{}, mask {}x{}",
                series.width(),
                series.height(),
                mask.width(),
                mask.height()
            )));
        }
        Ok(Self { name: name.into(), series, mask })
    }
}

/// Population a target pixel belongs to during an experiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelSplit {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelIndex {
    pub x: usize,
    pub y: usize,
    pub label: usize,
    pub split: PixelSplit,
}

/// Holds out `round(fraction * n)` pixels, drawn uniformly without
/// replacement, as validation. Both parts keep the input order.
pub fn split_validation(
    train_pixels: &[PixelIndex],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<PixelIndex>, Vec<PixelIndex>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::config("data.validation_fraction", format!("{fraction} outside (0, 1)")));
    }
    if train_pixels.is_empty() {
        return Err(Error::Data("no training pixels to split".into()));
    }
    let n = train_pixels.len();
    let n_val = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let mut train = Vec::with_capacity(n - n_val);
    let mut validation = Vec::with_capacity(n_val);
    for (p, v) in train_pixels.iter().zip(is_val) {
        if v {
            validation.push(PixelIndex { split: PixelSplit::Validation, ..*p });
        } else {
            train.push(PixelIndex { split: PixelSplit::Train, ..*p });
        }
    }
    Ok((train, validation))
}

/// One row of a pixel's visual rhythm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RhythmRow {
    pub timestamp: String,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "G")]
    pub g: f64,
    #[serde(rename = "B")]
    pub b: f64,
}

/// Channel intensities of one labeled pixel across all timestamps, raw or
/// chromaticity-normalized.
pub fn export_visual_rhythm(
    series: &ImageTimeSeries,
    mask: &AnnotationMask,
    x: usize,
    y: usize,
    normalized: bool,
) -> Result<Vec<RhythmRow>> {
    if x >= mask.width() || y >= mask.height() {
        return Err(Error::Data(format!("pixel ({x}, {y}) outside the image")));
    }
    if mask.label(x, y).is_none() {
        return Err(Error::Data(format!("pixel ({x}, {y}) is unlabeled")));
    }
    let mode = if normalized { Normalization::Chromaticity } else { Normalization::Raw };
    Ok((0..series.len())
        .map(|t| {
            let p = series.pixel(t, x, y);
            let [r, g, b] = normalize_pixel([p[0] as f64, p[1] as f64, p[2] as f64], mode);
            RhythmRow { timestamp: series.timestamps()[t].clone(), r, g, b }
        })
        .collect())
}

/// Writes rhythm rows as CSV with header `timestamp,R,G,B`.
pub fn write_rhythm_csv<W: std::io::Write>(rows: &[RhythmRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Data(format!("csv: {e}")))?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
