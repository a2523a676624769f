use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotationMask, Dataset, ImageTimeSeries, MaskSplit};
use crate::error::{Error, Result};

const PLACEMENT_RETRIES: usize = 500;
/// Minimum number of background pixels between two blobs.
const BLOB_GAP: f64 = 2.0;

/// Temporal signature and spatial layout of one synthetic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub name: String,
    /// Mean intensity as a fraction of full scale.
    pub base: f64,
    /// Seasonal amplitude as a fraction of full scale.
    pub amplitude: f64,
    /// Phase offset, in timestamps.
    pub phase: f64,
    /// Per-channel share of the intensity; sums to one.
    pub chromaticity: [f64; 3],
    pub blob_count: usize,
    pub radius_min: usize,
    pub radius_max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub classes: Vec<ClassSignature>,
    pub timestamps: usize,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of additive per-channel noise, in 0..255 units.
    pub noise_std: f64,
    /// Gray level of unlabeled background as a fraction of full scale.
    pub background_level: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Four classes with phase-shifted seasonal signatures over 13 timestamps.
    pub fn default_four_class(seed: u64) -> Self {
        let class = |name: &str, base, amplitude, phase, chromaticity| ClassSignature {
            name: name.into(),
            base,
            amplitude,
            phase,
            chromaticity,
            blob_count: 4,
            radius_min: 3,
            radius_max: 5,
        };
        Self {
            name: "synthetic-4class".into(),
            classes: vec![
                class("early-green", 0.45, 0.15, 0.0, [0.30, 0.45, 0.25]),
                class("late-green", 0.45, 0.15, 3.25, [0.30, 0.45, 0.25]),
                class("flowering", 0.50, 0.12, 6.5, [0.38, 0.40, 0.22]),
                class("deciduous", 0.40, 0.20, 9.75, [0.33, 0.42, 0.25]),
            ],
            timestamps: 13,
            height: 64,
            width: 64,
            noise_std: 5.0,
            background_level: 0.25,
            seed,
        }
    }

    /// Two classes sharing one chromaticity that differ only in mean
    /// intensity; no seasonal signal.
    pub fn intensity_pair(seed: u64) -> Self {
        let class = |name: &str, base| ClassSignature {
            name: name.into(),
            base,
            amplitude: 0.0,
            phase: 0.0,
            chromaticity: [0.40, 0.40, 0.20],
            blob_count: 4,
            radius_min: 3,
            radius_max: 5,
        };
        Self {
            name: "synthetic-intensity".into(),
            classes: vec![class("dim", 0.3), class("bright", 0.6)],
            timestamps: 13,
            height: 48,
            width: 48,
            noise_std: 2.0,
            background_level: 0.25,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |f: &str| format!("synthetic.{f}");
        if self.classes.is_empty() {
            return Err(Error::config(field("classes"), "at least one class required"));
        }
        if self.timestamps < 2 {
            return Err(Error::config(field("timestamps"), "at least two timestamps required"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config(field("size"), "image must be non-empty"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config(field("noise_std"), "must be non-negative"));
        }
        for c in &self.classes {
            let sum: f64 = c.chromaticity.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || c.chromaticity.iter().any(|v| *v < 0.0) {
                return Err(Error::config(
                    field("chromaticity"),
                    format!("class `{}` chromaticity {:?} must be non-negative and sum to 1", c.name, c.chromaticity),
                ));
            }
            if c.radius_min == 0 || c.radius_min > c.radius_max {
                return Err(Error::config(
                    field("radius"),
                    format!("class `{}` radius range {}..={} is invalid", c.name, c.radius_min, c.radius_max),
                ));
            }
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    r: f64,
    class: usize,
    split: MaskSplit,
}

fn place_blobs(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Blob>> {
    let mut blobs: Vec<Blob> = Vec::new();
    for (c, class) in spec.classes.iter().enumerate() {
        for b in 0..class.blob_count {
            let split = if b % 2 == 0 { MaskSplit::Train } else { MaskSplit::Test };
            let mut placed = false;
            for _ in 0..PLACEMENT_RETRIES {
                let r = rng.random_range(class.radius_min..=class.radius_max);
                if 2 * r + 1 > spec.width || 2 * r + 1 > spec.height {
                    continue;
                }
                let cx = rng.random_range(r..spec.width - r) as f64;
                let cy = rng.random_range(r..spec.height - r) as f64;
                let r = r as f64;
                let clear = blobs.iter().all(|o| {
                    let d2 = (o.cx - cx).powi(2) + (o.cy - cy).powi(2);
                    d2 >= (o.r + r + BLOB_GAP).powi(2)
                });
                if clear {
                    blobs.push(Blob { cx, cy, r, class: c, split });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::Generation(format!(
                    "could not place blob {b} of class `{}` without overlap after {PLACEMENT_RETRIES} tries; \
                     use a smaller radius, fewer blobs or a larger image",
                    class.name
                )));
            }
        }
    }
    Ok(blobs)
}

/// Builds a dataset from `spec`. The output is a pure function of the spec.
///
/// Each class occupies `blob_count` disjoint disks; even-numbered blobs of
/// a class go to the training split and odd-numbered ones to the test
/// split. Channel `ch` of a class pixel at timestamp `t` is
/// `chromaticity[ch] * (base + amplitude * sin(2 pi (t + phase) / M)) * 255`
/// plus Gaussian noise, clamped and rounded to 8 bits.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let blobs = place_blobs(spec, &mut rng)?;

    let (w, h, m) = (spec.width, spec.height, spec.timestamps);
    let mut labels = vec![None; w * h];
    let mut split = vec![MaskSplit::None; w * h];
    for blob in &blobs {
        for y in 0..h {
            for x in 0..w {
                if (x as f64 - blob.cx).powi(2) + (y as f64 - blob.cy).powi(2) <= blob.r * blob.r {
                    labels[y * w + x] = Some(blob.class);
                    split[y * w + x] = blob.split;
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config("synthetic.noise_std", e.to_string()))?;
    let background = [spec.background_level / 3.0; 3];
    let mut frames = Vec::with_capacity(m);
    for t in 0..m {
        // per-class intensity of this timestamp
        let levels: Vec<f64> = spec
            .classes
            .iter()
            .map(|c| c.base + c.amplitude * (2.0 * PI * (t as f64 + c.phase) / m as f64).sin())
            .collect();
        let mut frame = Vec::with_capacity(w * h * 3);
        for label in &labels {
            for ch in 0..3 {
                let mean = match label {
                    Some(c) => spec.classes[*c].chromaticity[ch] * levels[*c] * 255.0,
                    None => background[ch] * 255.0,
                };
                let v = if spec.noise_std > 0.0 { mean + noise.sample(&mut rng) } else { mean };
                frame.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        frames.push(frame);
    }

    let timestamps = (0..m).map(|t| format!("t{t:02}")).collect();
    let series = ImageTimeSeries::new(w, h, timestamps, frames)?;
    let class_names = spec.classes.iter().map(|c| c.name.clone()).collect();
    let mask = AnnotationMask::new(w, h, labels, split, class_names)?;
    Dataset::new(spec.name.clone(), series, mask)
}
