//! Tile datasets on disk: a JSON-lines manifest, a `meta.json` beside it,
//! PPM images and PGM label rasters.

pub mod netpbm;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use netpbm::Raster;
pub use synth::{
    generate_synthetic, ShapeKind, SyntheticSpec, DEFAULT_PALETTE, MAX_SYNTHETIC_CLASSES,
};

pub const IGNORE_LABEL: u8 = 255;
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const META_FILE: &str = "meta.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            _ => Err(Error::Config(format!(
                "unknown split `{s}` (expected train or val)"
            ))),
        }
    }
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub image: String,
    pub label: String,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub num_classes: usize,
    pub ignore_label: u8,
    pub class_names: Vec<String>,
    /// Per-channel normalization applied after scaling to [0, 1].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<[f64; 3]>,
}

impl Meta {
    pub fn normalization(&self) -> Option<([f64; 3], [f64; 3])> {
        if self.mean.is_none() && self.std.is_none() {
            return None;
        }
        Some((self.mean.unwrap_or([0.0; 3]), self.std.unwrap_or([1.0; 3])))
    }
}

pub fn normalize_image(img: &mut Tensor, mean: [f64; 3], std: [f64; 3]) {
    let hw = img.shape()[1] * img.shape()[2];
    for (c, chunk) in img.data_mut().chunks_mut(hw).enumerate() {
        chunk.iter_mut().for_each(|v| *v = (*v - mean[c]) / std[c]);
    }
}

/// A loaded image `(3, h, w)` and its `h·w` label map.
#[derive(Clone, Debug, PartialEq)]
pub struct Tile {
    pub image: Tensor,
    pub label: Vec<u8>,
}

impl Tile {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    pub meta: Meta,
    pub records: Vec<Record>,
}

/// Accept either the manifest file or its directory.
fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

impl Dataset {
    /// Parse the manifest and meta and check that every referenced file exists.
    pub fn open(path: &Path) -> Result<Self> {
        let manifest = manifest_path(path);
        let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let text = fs::read_to_string(&manifest).map_err(|e| {
            Error::Config(format!("cannot read manifest {}: {e}", manifest.display()))
        })?;
        let meta_path = root.join(META_FILE);
        let meta_text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", meta_path.display())))?;
        let meta: Meta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Config(format!("{}: {e}", meta_path.display())))?;
        if meta.num_classes == 0 || meta.num_classes > meta.ignore_label as usize {
            return Err(Error::Config(format!(
                "num_classes {} must be in 1..={}",
                meta.num_classes, meta.ignore_label
            )));
        }
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(line).map_err(|e| {
                Error::Config(format!("{} line {}: {e}", manifest.display(), i + 1))
            })?;
            for p in [&r.image, &r.label] {
                if !root.join(p).is_file() {
                    return Err(Error::Config(format!(
                        "manifest references missing file {p}"
                    )));
                }
            }
            records.push(r);
        }
        Ok(Dataset {
            root,
            meta,
            records,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Normalized with the meta mean and std.
    pub fn load(&self, record: &Record) -> Result<Tile> {
        let mut tile = self.load_raw(record)?;
        if let Some((mean, std)) = self.meta.normalization() {
            normalize_image(&mut tile.image, mean, std);
        }
        Ok(tile)
    }

    /// Pixel values scaled to [0, 1] without normalization.
    pub fn load_raw(&self, record: &Record) -> Result<Tile> {
        let img = netpbm::read(&self.root.join(&record.image))?;
        let lab = netpbm::read(&self.root.join(&record.label))?;
        if img.channels != 3 || lab.channels != 1 {
            return Err(Error::Format(format!(
                "{}: expected an RGB image and a gray label",
                record.image
            )));
        }
        if (img.width, img.height) != (lab.width, lab.height) {
            return Err(Error::Format(format!(
                "{} is {}×{} but its label is {}×{}",
                record.image, img.width, img.height, lab.width, lab.height
            )));
        }
        let n = self.meta.num_classes;
        if let Some(&bad) = lab
            .data
            .iter()
            .find(|&&v| v as usize >= n && v != self.meta.ignore_label)
        {
            return Err(Error::Format(format!(
                "{}: label value {bad} outside {n} classes",
                record.label
            )));
        }
        let (h, w) = (img.height, img.width);
        let image = Tensor::from_fn([3, h, w], |i| {
            let (c, p) = (i / (h * w), i % (h * w));
            img.data[p * 3 + c] as f64 / 255.0
        });
        let label = if self.meta.ignore_label == IGNORE_LABEL {
            lab.data
        } else {
            let ig = self.meta.ignore_label;
            lab.data
                .into_iter()
                .map(|v| if v == ig { IGNORE_LABEL } else { v })
                .collect()
        };
        Ok(Tile { image, label })
    }

    /// Tiles of one split in manifest order.
    pub fn tiles(&self, split: Split) -> impl Iterator<Item = Result<Tile>> + '_ {
        self.split(split).map(move |r| self.load(r))
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Tile>> {
        self.tiles(split).collect()
    }

    pub fn load_split_raw(&self, split: Split) -> Result<Vec<Tile>> {
        self.split(split).map(|r| self.load_raw(r)).collect()
    }
}

/// Write `manifest.jsonl` and `meta.json` into `dir`.
pub fn write_manifest(dir: &Path, meta: &Meta, records: &[Record]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(
        dir.join(META_FILE),
        serde_json::to_string_pretty(meta)? + "\n",
    )?;
    Ok(())
}
