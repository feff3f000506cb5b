//! Synthetic tiles: colored rectangles, disks and stripes on a class-0
//! background, with Gaussian pixel noise.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::netpbm::{self, Raster};
use super::{write_manifest, Meta, Record, Split, IGNORE_LABEL};
use crate::error::{Error, Result};

pub const MAX_SYNTHETIC_CLASSES: usize = 8;

/// Class colors in 8-bit RGB, kept away from 0 and 255 so noise rarely clips.
pub const DEFAULT_PALETTE: [[f64; 3]; MAX_SYNTHETIC_CLASSES] = [
    [90.0, 90.0, 90.0],
    [200.0, 60.0, 60.0],
    [60.0, 180.0, 70.0],
    [60.0, 80.0, 200.0],
    [210.0, 190.0, 60.0],
    [170.0, 70.0, 190.0],
    [60.0, 190.0, 190.0],
    [220.0, 140.0, 90.0],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Rectangle,
    Disk,
    Stripe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_tiles: usize,
    pub tile_size: usize,
    pub num_classes: usize,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<ShapeKind>,
    /// Shapes drawn per tile beyond the guaranteed one.
    #[serde(default = "default_extra_shapes")]
    pub extra_shapes: usize,
    /// Per-class mean color; defaults to [`DEFAULT_PALETTE`].
    #[serde(default)]
    pub class_means: Option<Vec<[f64; 3]>>,
    /// Per-class color std, per pixel and channel.
    #[serde(default)]
    pub class_std: Option<Vec<f64>>,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Leading share of tiles assigned to the train split, rounded up.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    pub seed: u64,
}

fn default_shapes() -> Vec<ShapeKind> {
    vec![ShapeKind::Rectangle, ShapeKind::Disk, ShapeKind::Stripe]
}

fn default_extra_shapes() -> usize {
    2
}

fn default_noise() -> f64 {
    8.0
}

fn default_train_fraction() -> f64 {
    0.8
}

impl SyntheticSpec {
    pub fn new(num_tiles: usize, tile_size: usize, num_classes: usize, seed: u64) -> Self {
        SyntheticSpec {
            num_tiles,
            tile_size,
            num_classes,
            shapes: default_shapes(),
            extra_shapes: default_extra_shapes(),
            class_means: None,
            class_std: None,
            noise_std: default_noise(),
            train_fraction: default_train_fraction(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=MAX_SYNTHETIC_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "synthetic num_classes must be in 2..={MAX_SYNTHETIC_CLASSES}, got {}",
                self.num_classes
            )));
        }
        if self.num_tiles == 0 || self.tile_size < 8 {
            return Err(Error::Config("need at least one tile of size ≥ 8".into()));
        }
        if self.num_tiles < self.num_classes - 1 {
            return Err(Error::Config(format!(
                "{} tiles cannot show all {} foreground classes",
                self.num_tiles,
                self.num_classes - 1
            )));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape vocabulary is empty".into()));
        }
        if let Some(m) = &self.class_means {
            if m.len() != self.num_classes {
                return Err(Error::Config(
                    "class_means needs one entry per class".into(),
                ));
            }
        }
        if let Some(s) = &self.class_std {
            if s.len() != self.num_classes || s.iter().any(|v| *v < 0.0 || !v.is_finite()) {
                return Err(Error::Config(
                    "class_std needs one non-negative entry per class".into(),
                ));
            }
        }
        if self.noise_std < 0.0 || !self.noise_std.is_finite() {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config("train_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn mean(&self, class: usize) -> [f64; 3] {
        self.class_means
            .as_ref()
            .map_or(DEFAULT_PALETTE[class], |m| m[class])
    }

    /// Total per-pixel std of class `class`.
    pub fn pixel_std(&self, class: usize) -> f64 {
        let s = self.class_std.as_ref().map_or(0.0, |s| s[class]);
        (s * s + self.noise_std * self.noise_std).sqrt()
    }

    /// Rounded share of the tiles; a fraction below 1 always leaves at least
    /// one validation tile when there are two or more.
    pub fn num_train(&self) -> usize {
        let n = (self.num_tiles as f64 * self.train_fraction).round() as usize;
        let max = if self.train_fraction < 1.0 && self.num_tiles > 1 {
            self.num_tiles - 1
        } else {
            self.num_tiles
        };
        n.clamp(1, max)
    }
}

fn draw_shape(label: &mut [u8], size: usize, kind: ShapeKind, class: u8, rng: &mut ChaCha8Rng) {
    let s = size as f64;
    match kind {
        ShapeKind::Rectangle => {
            let h = rng.random_range(size / 6..=size / 2);
            let w = rng.random_range(size / 6..=size / 2);
            let y0 = rng.random_range(0..=size - h);
            let x0 = rng.random_range(0..=size - w);
            for y in y0..y0 + h {
                label[y * size + x0..y * size + x0 + w].fill(class);
            }
        }
        ShapeKind::Disk => {
            let r = rng.random_range(s / 8.0..s / 4.0);
            let cy = rng.random_range(r..s - r);
            let cx = rng.random_range(r..s - r);
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        label[y * size + x] = class;
                    }
                }
            }
        }
        ShapeKind::Stripe => {
            let width = rng.random_range(s / 12.0..s / 5.0);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let (ny, nx) = angle.sin_cos();
            let offset = rng.random_range(-s / 4.0..s / 4.0);
            let c = s / 2.0;
            for y in 0..size {
                for x in 0..size {
                    let d = (y as f64 + 0.5 - c) * ny + (x as f64 + 0.5 - c) * nx - offset;
                    if d.abs() <= width / 2.0 {
                        label[y * size + x] = class;
                    }
                }
            }
        }
    }
}

/// Label and RGB bytes for tile `index`; tile `i` always ends with a shape
/// of foreground class `1 + i mod (N − 1)` drawn on top.
fn render_tile(spec: &SyntheticSpec, index: usize) -> (Vec<u8>, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);
    let size = spec.tile_size;
    let fg = spec.num_classes - 1;
    let mut label = vec![0u8; size * size];
    for _ in 0..spec.extra_shapes {
        let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
        let class = rng.random_range(1..=fg) as u8;
        draw_shape(&mut label, size, kind, class, &mut rng);
    }
    let kind = spec.shapes[rng.random_range(0..spec.shapes.len())];
    draw_shape(&mut label, size, kind, (1 + index % fg) as u8, &mut rng);

    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rgb = Vec::with_capacity(size * size * 3);
    for &c in &label {
        let mean = spec.mean(c as usize);
        let std = spec.pixel_std(c as usize);
        for m in mean {
            let v = m + std * noise.sample(&mut rng);
            rgb.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    (label, rgb)
}

/// Write tiles, labels, `manifest.jsonl` and `meta.json` into `out`.
/// The leading `train_fraction` of tiles (rounded up) form the train split.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Meta> {
    spec.validate()?;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("labels"))?;
    let n_train = spec.num_train();
    let mut records = Vec::with_capacity(spec.num_tiles);
    for i in 0..spec.num_tiles {
        let (label, rgb) = render_tile(spec, i);
        let image = format!("images/tile_{i:04}.ppm");
        let lab = format!("labels/tile_{i:04}.pgm");
        let raster = |channels, data| Raster {
            width: spec.tile_size,
            height: spec.tile_size,
            channels,
            data,
        };
        netpbm::write(&out.join(&image), &raster(3, rgb))?;
        netpbm::write(&out.join(&lab), &raster(1, label))?;
        records.push(Record {
            image,
            label: lab,
            split: if i < n_train {
                Split::Train
            } else {
                Split::Val
            },
        });
    }
    let meta = Meta {
        num_classes: spec.num_classes,
        ignore_label: IGNORE_LABEL,
        class_names: (0..spec.num_classes)
            .map(|c| {
                if c == 0 {
                    "background".to_string()
                } else {
                    format!("class{c}")
                }
            })
            .collect(),
        mean: None,
        std: None,
    };
    write_manifest(out, &meta, &records)?;
    Ok(meta)
}
