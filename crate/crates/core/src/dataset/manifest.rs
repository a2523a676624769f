use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{AnnotationMask, Dataset, ImageTimeSeries, MaskSplit};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub frames: Vec<ManifestFrame>,
    pub mask: ManifestMask,
    pub unlabeled_color: [u8; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFrame {
    pub timestamp: String,
    pub file: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMask {
    pub file: PathBuf,
    pub legend: Vec<LegendEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendEntry {
    pub color: [u8; 3],
    pub class: String,
    pub split: LegendSplit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LegendSplit {
    Train,
    Test,
}

impl From<LegendSplit> for MaskSplit {
    fn from(s: LegendSplit) -> Self {
        match s {
            LegendSplit::Train => MaskSplit::Train,
            LegendSplit::Test => MaskSplit::Test,
        }
    }
}

fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "missing image file")));
    }
    let img = image::open(path)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.into_raw()))
}

fn write_rgb(path: &Path, width: usize, height: usize, data: &[u8]) -> Result<()> {
    image::save_buffer(path, data, width as u32, height as u32, image::ColorType::Rgb8)
        .map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

/// Reads a dataset manifest (JSON) and every image it references. Relative
/// image paths resolve against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let root = path.parent().unwrap_or_else(|| Path::new("."));

    if manifest.frames.is_empty() {
        return Err(Error::Data("manifest lists no frames".into()));
    }
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut size = None;
    for (t, f) in manifest.frames.iter().enumerate() {
        let (w, h, data) = read_rgb(&root.join(&f.file))?;
        match size {
            None => size = Some((w, h)),
            Some((w0, h0)) if (w0, h0) != (w, h) => {
                return Err(Error::Data(format!(
                    "frame dimension mismatch: frame {t} ({}) is {w}x{h}, expected {w0}x{h0}",
                    f.file.display()
                )));
            }
            _ => {}
        }
        frames.push(data);
    }
    let (width, height) = size.unwrap();
    let timestamps = manifest.frames.iter().map(|f| f.timestamp.clone()).collect();
    let series = ImageTimeSeries::new(width, height, timestamps, frames)?;

    // resolve legend: class ids in order of first appearance
    let mut class_names: Vec<String> = Vec::new();
    let mut by_color: HashMap<[u8; 3], (usize, MaskSplit)> = HashMap::new();
    let mut seen_pairs: HashMap<(String, LegendSplit), ()> = HashMap::new();
    for entry in &manifest.mask.legend {
        if entry.color == manifest.unlabeled_color {
            return Err(Error::Data(format!("legend color {:?} equals the unlabeled color", entry.color)));
        }
        if seen_pairs.insert((entry.class.clone(), entry.split), ()).is_some() {
            return Err(Error::Data(format!(
                "duplicate class name `{}` for split {:?} in legend",
                entry.class, entry.split
            )));
        }
        let id = match class_names.iter().position(|c| *c == entry.class) {
            Some(id) => id,
            None => {
                class_names.push(entry.class.clone());
                class_names.len() - 1
            }
        };
        if by_color.insert(entry.color, (id, entry.split.into())).is_some() {
            return Err(Error::Data(format!("duplicate legend color {:?}", entry.color)));
        }
    }

    let mask_path = root.join(&manifest.mask.file);
    let (mw, mh, mask_rgb) = read_rgb(&mask_path)?;
    if (mw, mh) != (width, height) {
        return Err(Error::Data(format!(
            "frame dimension mismatch: mask is {mw}x{mh}, frames are {width}x{height}"
        )));
    }
    let mut labels = Vec::with_capacity(width * height);
    let mut split = Vec::with_capacity(width * height);
    for (i, px) in mask_rgb.chunks_exact(3).enumerate() {
        let color = [px[0], px[1], px[2]];
        if color == manifest.unlabeled_color {
            labels.push(None);
            split.push(MaskSplit::None);
        } else if let Some(&(id, s)) = by_color.get(&color) {
            labels.push(Some(id));
            split.push(s);
        } else {
            return Err(Error::Data(format!(
                "mask color {color:?} at pixel ({}, {}) is not in the legend",
                i % width,
                i / width
            )));
        }
    }
    let mask = AnnotationMask::new(width, height, labels, split, class_names)?;
    Dataset::new(manifest.name, series, mask)
}

const PALETTE: [[u8; 3]; 12] = [
    [230, 25, 75],
    [245, 130, 48],
    [0, 130, 200],
    [145, 30, 180],
    [70, 240, 240],
    [255, 255, 255],
    [60, 180, 75],
    [255, 225, 25],
    [240, 50, 230],
    [128, 128, 128],
    [170, 110, 40],
    [128, 0, 0],
];

fn legend_color(slot: usize) -> [u8; 3] {
    PALETTE.get(slot).copied().unwrap_or_else(|| {
        let v = slot as u32 + 1;
        [(v >> 16) as u8, (v >> 8) as u8, v as u8 | 1]
    })
}

/// Writes frames and mask as PNG files plus `manifest.json` into `dir` and
/// returns the manifest path.
pub fn save_manifest(dir: impl AsRef<Path>, dataset: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let series = &dataset.series;
    let mask = &dataset.mask;
    let (w, h) = (series.width(), series.height());

    let mut frames = Vec::with_capacity(series.len());
    for t in 0..series.len() {
        let file = PathBuf::from(format!("frame_{t:03}.png"));
        write_rgb(&dir.join(&file), w, h, series.frame(t))?;
        frames.push(ManifestFrame { timestamp: series.timestamps()[t].clone(), file });
    }

    let unlabeled = [0, 0, 0];
    let mut legend = Vec::new();
    for (c, name) in mask.class_names().iter().enumerate() {
        for (k, split) in [LegendSplit::Train, LegendSplit::Test].into_iter().enumerate() {
            legend.push(LegendEntry { color: legend_color(2 * c + k), class: name.clone(), split });
        }
    }
    let mut mask_rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let color = match (mask.label(x, y), mask.split_at(x, y)) {
                (None, _) => unlabeled,
                (Some(c), MaskSplit::Test) => legend_color(2 * c + 1),
                (Some(c), MaskSplit::Train) => legend_color(2 * c),
                // labeled but outside both splits has no legend entry
                (Some(_), MaskSplit::None) => {
                    return Err(Error::Data(format!("pixel ({x}, {y}) is labeled but in no split")));
                }
            };
            mask_rgb.extend_from_slice(&color);
        }
    }
    let mask_file = PathBuf::from("mask.png");
    write_rgb(&dir.join(&mask_file), w, h, &mask_rgb)?;

    let manifest = Manifest {
        name: dataset.name.clone(),
        frames,
        mask: ManifestMask { file: mask_file, legend },
        unlabeled_color: unlabeled,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
