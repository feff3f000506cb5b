//! Training-time augmentation: photometric distortion, random resize,
//! random crop and horizontal flip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::tensor::{bilinear_coords, Tensor};

/// Crops tried before the last one is accepted regardless of class balance.
pub const CROP_ATTEMPTS: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub photometric: bool,
    /// On the [0, 1] intensity scale.
    pub brightness_delta: f64,
    pub contrast_range: (f64, f64),
    pub saturation_range: (f64, f64),
    pub hue_delta_deg: f64,
    pub ratio_range: (f64, f64),
    pub cat_max_ratio: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            photometric: true,
            brightness_delta: 32.0 / 255.0,
            contrast_range: (0.5, 1.5),
            saturation_range: (0.5, 1.5),
            hue_delta_deg: 18.0,
            ratio_range: (0.5, 2.0),
            cat_max_ratio: 0.75,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every transform disabled; with a crop equal to the input size this is
    /// the identity.
    pub fn none() -> Self {
        AugmentConfig {
            photometric: false,
            ratio_range: (1.0, 1.0),
            flip_prob: 0.0,
            cat_max_ratio: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a.is_finite() && b.is_finite() && a <= b;
        if !ordered(self.contrast_range)
            || !ordered(self.saturation_range)
            || !ordered(self.ratio_range)
        {
            return Err(Error::Config(
                "augmentation ranges must be finite with lo ≤ hi".into(),
            ));
        }
        if self.ratio_range.0 <= 0.0 {
            return Err(Error::Config("resize ratios must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) || !(0.0..=1.0).contains(&self.cat_max_ratio) {
            return Err(Error::Config(
                "flip_prob and cat_max_ratio must lie in [0, 1]".into(),
            ));
        }
        if self.brightness_delta < 0.0 || self.hue_delta_deg < 0.0 {
            return Err(Error::Config(
                "brightness and hue deltas must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let c = v * s;
    let hp = h.rem_euclid(360.0) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    (r + m, g + m, b + m)
}

fn map_hsv(img: &mut Tensor, f: impl Fn(f64, f64, f64) -> (f64, f64, f64)) {
    let hw = img.shape()[1] * img.shape()[2];
    let d = img.data_mut();
    for p in 0..hw {
        let (h, s, v) = rgb_to_hsv(d[p], d[hw + p], d[2 * hw + p]);
        let (h, s, v) = f(h, s, v);
        let (r, g, b) = hsv_to_rgb(h, s, v);
        d[p] = r;
        d[hw + p] = g;
        d[2 * hw + p] = b;
    }
}

fn clip01(img: &mut Tensor) {
    img.data_mut()
        .iter_mut()
        .for_each(|v| *v = v.clamp(0.0, 1.0));
}

/// Brightness, contrast (before or after the color changes), saturation and
/// hue, each applied with probability 1/2, clipping to [0, 1] after each.
pub fn photometric<R: Rng + ?Sized>(img: &mut Tensor, cfg: &AugmentConfig, rng: &mut R) {
    if rng.random_bool(0.5) {
        let delta = uniform(rng, (-cfg.brightness_delta, cfg.brightness_delta));
        img.data_mut().iter_mut().for_each(|v| *v += delta);
        clip01(img);
    }
    let contrast_first = rng.random_bool(0.5);
    let contrast = |img: &mut Tensor, rng: &mut R| {
        if rng.random_bool(0.5) {
            let alpha = uniform(rng, cfg.contrast_range);
            img.data_mut().iter_mut().for_each(|v| *v *= alpha);
            clip01(img);
        }
    };
    if contrast_first {
        contrast(img, rng);
    }
    if rng.random_bool(0.5) {
        let alpha = uniform(rng, cfg.saturation_range);
        map_hsv(img, |h, s, v| (h, (s * alpha).clamp(0.0, 1.0), v));
    }
    if rng.random_bool(0.5) {
        let delta = uniform(rng, (-cfg.hue_delta_deg, cfg.hue_delta_deg));
        map_hsv(img, |h, s, v| (h + delta, s, v));
    }
    if !contrast_first {
        contrast(img, rng);
    }
}

/// Bilinear resize of a `(c, h, w)` image.
pub fn resize_image(img: &Tensor, oh: usize, ow: usize) -> Tensor {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    if (oh, ow) == (h, w) {
        return img.clone();
    }
    let ys = bilinear_coords(h, oh);
    let xs = bilinear_coords(w, ow);
    let src = img.data();
    Tensor::from_fn([c, oh, ow], |i| {
        let (ch, y, x) = (i / (oh * ow), i / ow % oh, i % ow);
        let (y0, y1, ly) = ys[y];
        let (x0, x1, lx) = xs[x];
        let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
        let top = at(y0, x0) + lx * (at(y0, x1) - at(y0, x0));
        let bottom = at(y1, x0) + lx * (at(y1, x1) - at(y1, x0));
        top + ly * (bottom - top)
    })
}

/// Nearest-neighbour resize of an `h × w` label map (half-pixel centres).
pub fn resize_label(label: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let pick = |o: usize, out: usize, inp: usize| {
        (((o as f64 + 0.5) * inp as f64 / out as f64) as usize).min(inp - 1)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = pick(y, oh, h);
        for x in 0..ow {
            out.push(label[sy * w + pick(x, ow, w)]);
        }
    }
    out
}

pub fn flip_horizontal(img: &mut Tensor, label: &mut [u8]) {
    let w = img.shape()[2];
    for row in img.data_mut().chunks_mut(w) {
        row.reverse();
    }
    for row in label.chunks_mut(w) {
        row.reverse();
    }
}

fn balanced(
    label: &[u8],
    w: usize,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
    max_ratio: f64,
) -> bool {
    let mut counts = [0usize; 256];
    for y in y0..y0 + ch {
        for &v in &label[y * w + x0..y * w + x0 + cw] {
            counts[v as usize] += 1;
        }
    }
    counts[IGNORE_LABEL as usize] = 0;
    let total: usize = counts.iter().sum();
    let classes = counts.iter().filter(|&&c| c > 0).count();
    let max = counts.iter().copied().max().unwrap_or(0);
    classes > 1 && (max as f64) < max_ratio * total as f64
}

/// Random crop to at most `crop`, re-drawn while one class dominates, then
/// padded to exactly `crop` (image with 0, label with the ignore value).
pub fn random_crop<R: Rng + ?Sized>(
    img: &Tensor,
    label: &[u8],
    crop: (usize, usize),
    max_ratio: f64,
    rng: &mut R,
) -> (Tensor, Vec<u8>) {
    let [c, h, w] = [img.shape()[0], img.shape()[1], img.shape()[2]];
    let (ch, cw) = (crop.0.min(h), crop.1.min(w));
    let mut origin = (0, 0);
    for attempt in 0..CROP_ATTEMPTS {
        origin = (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw));
        if max_ratio >= 1.0
            || attempt + 1 == CROP_ATTEMPTS
            || balanced(label, w, origin.0, origin.1, ch, cw, max_ratio)
        {
            break;
        }
    }
    let (y0, x0) = origin;
    let (oh, ow) = crop;
    let mut out = Tensor::zeros([c, oh, ow]);
    let mut lab = vec![IGNORE_LABEL; oh * ow];
    for y in 0..ch {
        for k in 0..c {
            let s = (k * h + y0 + y) * w + x0;
            let d = (k * oh + y) * ow;
            out.data_mut()[d..d + cw].copy_from_slice(&img.data()[s..s + cw]);
        }
        lab[y * ow..y * ow + cw].copy_from_slice(&label[(y0 + y) * w + x0..(y0 + y) * w + x0 + cw]);
    }
    (out, lab)
}

/// Photometric distortion (image only), random resize, random crop to
/// `crop` and random horizontal flip, in that order.
pub fn augment<R: Rng + ?Sized>(
    image: &Tensor,
    label: &[u8],
    cfg: &AugmentConfig,
    crop: (usize, usize),
    rng: &mut R,
) -> Result<(Tensor, Vec<u8>)> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::arg(
            "augment",
            format!("expected a (3, h, w) image, got {:?}", image.shape()),
        ));
    };
    if label.len() != h * w {
        return Err(Error::shape("augment", &[h, w], &[label.len()]));
    }
    let mut img = image.clone();
    if cfg.photometric {
        photometric(&mut img, cfg, rng);
    }
    let ratio = uniform(rng, cfg.ratio_range);
    let (rh, rw) = (
        ((h as f64 * ratio).round() as usize).max(1),
        ((w as f64 * ratio).round() as usize).max(1),
    );
    let img = resize_image(&img, rh, rw);
    let lab = resize_label(label, h, w, rh, rw);
    let (mut img, mut lab) = random_crop(&img, &lab, crop, cfg.cat_max_ratio, rng);
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        flip_horizontal(&mut img, &mut lab);
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[
            (0.2, 0.5, 0.9),
            (1.0, 0.0, 0.0),
            (0.3, 0.3, 0.3),
            (0.9, 0.8, 0.1),
        ] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn nearest_label_resize_doubles_pixels() {
        let l = [1u8, 2, 3, 4];
        assert_eq!(
            resize_label(&l, 2, 2, 4, 4),
            vec![1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4]
        );
        assert_eq!(resize_label(&l, 2, 2, 2, 2), l.to_vec());
    }
}
