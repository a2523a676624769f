//! Spatio-temporal volume extraction around a target pixel.

use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationMask, ImageTimeSeries, PixelIndex};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Raw,
    Chromaticity,
}

/// Ordering of the per-position temporal vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arrangement {
    /// `[R1, G1, B1, R2, G2, B2, ...]`
    Rgbrgb,
    /// `[R1..RM, G1..GM, B1..BM]`
    Rrggbb,
}

/// What neighbors outside the annotated region contribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    BlackPadding,
    RealValue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowShape {
    Single,
    Cross,
    Square,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowSpec {
    pub shape: WindowShape,
    /// Side length; 1 for single and 3 for cross.
    pub k: usize,
}

impl WindowSpec {
    pub fn single() -> Self {
        Self { shape: WindowShape::Single, k: 1 }
    }

    pub fn cross() -> Self {
        Self { shape: WindowShape::Cross, k: 3 }
    }

    pub fn square(k: usize) -> Result<Self> {
        if k < 3 || k % 2 == 0 {
            return Err(Error::config("sampler.k", format!("square window side {k} must be odd and >= 3")));
        }
        Ok(Self { shape: WindowShape::Square, k })
    }

    pub fn radius(&self) -> usize {
        self.k / 2
    }

    /// `|N_r(p)|`: 1, 5 or `k * k`.
    pub fn positions(&self) -> usize {
        match self.shape {
            WindowShape::Single => 1,
            WindowShape::Cross => 5,
            WindowShape::Square => self.k * self.k,
        }
    }

    /// Index of the target pixel within the raster-ordered neighborhood.
    pub fn center(&self) -> usize {
        self.positions() / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub normalization: Normalization,
    pub arrangement: Arrangement,
    pub boundary: Boundary,
    pub window: WindowSpec,
}

/// One target pixel's volume, stored position-major: position `p` owns
/// the `3 * M` values of its temporal vector in `arrangement` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub timestamps: usize,
    pub positions: usize,
    pub arrangement: Arrangement,
    pub normalization: Normalization,
    pub values: Vec<f64>,
    pub label: usize,
    pub origin: PixelIndex,
}

/// Offset of `(t, ch)` inside a position's temporal vector.
pub fn temporal_offset(arrangement: Arrangement, timestamps: usize, t: usize, ch: usize) -> usize {
    match arrangement {
        Arrangement::Rgbrgb => t * 3 + ch,
        Arrangement::Rrggbb => ch * timestamps + t,
    }
}

impl Sample {
    pub fn value(&self, t: usize, position: usize, ch: usize) -> f64 {
        self.values[position * 3 * self.timestamps + temporal_offset(self.arrangement, self.timestamps, t, ch)]
    }

    pub fn temporal_vector(&self, position: usize) -> &[f64] {
        let len = 3 * self.timestamps;
        &self.values[position * len..(position + 1) * len]
    }
}

/// Raster-ordered (row-major, top-left first) coordinates around `(x, y)`.
/// Coordinates may fall outside the image.
pub fn neighborhood(x: i64, y: i64, window: WindowSpec) -> Vec<(i64, i64)> {
    let r = window.radius() as i64;
    let mut out = Vec::with_capacity(window.positions());
    for dy in -r..=r {
        for dx in -r..=r {
            let keep = match window.shape {
                WindowShape::Single => dx == 0 && dy == 0,
                WindowShape::Cross => dx.abs() + dy.abs() <= 1,
                WindowShape::Square => true,
            };
            if keep {
                out.push((x + dx, y + dy));
            }
        }
    }
    out
}

/// Chromaticity divides each channel by the channel sum; a black pixel
/// stays black.
pub fn normalize_pixel(rgb: [f64; 3], mode: Normalization) -> [f64; 3] {
    match mode {
        Normalization::Raw => rgb,
        Normalization::Chromaticity => {
            let sum = rgb[0] + rgb[1] + rgb[2];
            if sum == 0.0 {
                [0.0; 3]
            } else {
                [rgb[0] / sum, rgb[1] / sum, rgb[2] / sum]
            }
        }
    }
}

/// Builds the volume of a labeled pixel. Neighbors outside the image are
/// always zero; with black padding, unlabeled neighbors are zero too.
pub fn extract(p: &PixelIndex, series: &ImageTimeSeries, mask: &AnnotationMask, cfg: &SamplerConfig) -> Result<Sample> {
    if p.x >= series.width() || p.y >= series.height() {
        return Err(Error::Usage(format!("pixel ({}, {}) outside the image", p.x, p.y)));
    }
    let label = mask
        .label(p.x, p.y)
        .ok_or_else(|| Error::Usage(format!("pixel ({}, {}) is unlabeled", p.x, p.y)))?;
    let m = series.len();
    let coords = neighborhood(p.x as i64, p.y as i64, cfg.window);
    let mut values = vec![0.0; coords.len() * 3 * m];
    for (pos, &(qx, qy)) in coords.iter().enumerate() {
        if !series.contains(qx, qy) {
            continue;
        }
        let (qx, qy) = (qx as usize, qy as usize);
        if cfg.boundary == Boundary::BlackPadding && mask.label(qx, qy).is_none() {
            continue;
        }
        let vec = &mut values[pos * 3 * m..(pos + 1) * 3 * m];
        for t in 0..m {
            let px = series.pixel(t, qx, qy);
            let rgb = normalize_pixel([px[0] as f64, px[1] as f64, px[2] as f64], cfg.normalization);
            for ch in 0..3 {
                vec[temporal_offset(cfg.arrangement, m, t, ch)] = rgb[ch];
            }
        }
    }
    Ok(Sample {
        timestamps: m,
        positions: coords.len(),
        arrangement: cfg.arrangement,
        normalization: cfg.normalization,
        values,
        label,
        origin: *p,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{MaskSplit, PixelSplit};

    #[test]
    fn neighborhoods() {
        assert_eq!(neighborhood(7, 9, WindowSpec::single()), vec![(7, 9)]);
        let cross = neighborhood(4, 4, WindowSpec::cross());
        assert_eq!(cross, vec![(4, 3), (3, 4), (4, 4), (5, 4), (4, 5)]);
        assert_eq!(cross[WindowSpec::cross().center()], (4, 4));
        let sq = neighborhood(4, 4, WindowSpec::square(3).unwrap());
        assert_eq!(sq.len(), 9);
        assert_eq!(sq[0], (3, 3));
        assert_eq!(sq[4], (4, 4));
        assert_eq!(sq[8], (5, 5));
        assert_eq!(neighborhood(0, 0, WindowSpec::square(25).unwrap()).len(), 625);
    }

    #[test]
    fn square_window_validation() {
        assert!(WindowSpec::square(4).is_err());
        assert!(WindowSpec::square(1).is_err());
        assert_eq!(WindowSpec::square(13).unwrap().radius(), 6);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_pixel([100.0, 50.0, 50.0], Normalization::Chromaticity), [0.5, 0.25, 0.25]);
        assert_eq!(normalize_pixel([0.0; 3], Normalization::Chromaticity), [0.0; 3]);
        for c in [1.0, 17.0, 255.0] {
            let n = normalize_pixel([c; 3], Normalization::Chromaticity);
            assert!(n.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        }
        assert_eq!(normalize_pixel([1.0, 2.0, 3.0], Normalization::Raw), [1.0, 2.0, 3.0]);
    }

    /// 3x3 image, 2 frames; only the center column is labeled.
    fn fixture() -> (ImageTimeSeries, AnnotationMask) {
        let frames = (0..2u8)
            .map(|t| (0..9u8).flat_map(|i| [10 * i + t, 100 + i, 200 + t]).collect())
            .collect();
        let series = ImageTimeSeries::new(3, 3, vec!["a".into(), "b".into()], frames).unwrap();
        let labels = (0..9).map(|i| (i % 3 == 1).then_some(0)).collect();
        let split = (0..9).map(|i| if i % 3 == 1 { MaskSplit::Train } else { MaskSplit::None }).collect();
        let mask = AnnotationMask::new(3, 3, labels, split, vec!["c".into()]).unwrap();
        (series, mask)
    }

    fn cfg(window: WindowSpec, boundary: Boundary) -> SamplerConfig {
        SamplerConfig {
            normalization: Normalization::Raw,
            arrangement: Arrangement::Rgbrgb,
            boundary,
            window,
        }
    }

    #[test]
    fn single_window_is_the_pixel_series() {
        let (series, mask) = fixture();
        let p = PixelIndex { x: 1, y: 1, label: 0, split: PixelSplit::Train };
        let s = extract(&p, &series, &mask, &cfg(WindowSpec::single(), Boundary::BlackPadding)).unwrap();
        assert_eq!(s.values, vec![40.0, 104.0, 200.0, 41.0, 104.0, 201.0]);
    }

    #[test]
    fn black_padding_zeroes_off_mask_neighbors() {
        let (series, mask) = fixture();
        let p = PixelIndex { x: 1, y: 0, label: 0, split: PixelSplit::Train };
        let w = WindowSpec::square(3).unwrap();
        let black = extract(&p, &series, &mask, &cfg(w, Boundary::BlackPadding)).unwrap();
        let real = extract(&p, &series, &mask, &cfg(w, Boundary::RealValue)).unwrap();
        let coords = neighborhood(1, 0, w);
        for (pos, &(qx, qy)) in coords.iter().enumerate() {
            let off_image = !series.contains(qx, qy);
            let off_mask = !off_image && mask.label(qx as usize, qy as usize).is_none();
            for t in 0..2 {
                for ch in 0..3 {
                    if off_image {
                        assert_eq!(black.value(t, pos, ch), 0.0);
                        assert_eq!(real.value(t, pos, ch), 0.0);
                    } else if off_mask {
                        assert_eq!(black.value(t, pos, ch), 0.0);
                        let px = series.pixel(t, qx as usize, qy as usize);
                        assert_eq!(real.value(t, pos, ch), px[ch] as f64);
                    } else {
                        assert_eq!(black.value(t, pos, ch), real.value(t, pos, ch));
                    }
                }
            }
        }
    }

    #[test]
    fn unlabeled_pixel_is_rejected() {
        let (series, mask) = fixture();
        let p = PixelIndex { x: 0, y: 0, label: 0, split: PixelSplit::Train };
        let r = extract(&p, &series, &mask, &cfg(WindowSpec::single(), Boundary::RealValue));
        assert!(matches!(r, Err(Error::Usage(_))));
    }
}
