//! Pyramid adapter over the equal-resolution encoder taps, and the UperNet
//! and FCN segmentation heads.

use serde::{Deserialize, Serialize};

use crate::encoder::TokenMap;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{Conv2dGeom, Tape, Var};

/// Absolute output strides of the four pyramid levels.
pub const PYRAMID_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Upernet,
    Fcn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub head: HeadKind,
    pub channels: usize,
    pub num_classes: usize,
    pub pool_scales: Vec<usize>,
}

impl DecoderConfig {
    pub fn upernet(channels: usize, num_classes: usize) -> Self {
        DecoderConfig {
            head: HeadKind::Upernet,
            channels,
            num_classes,
            pool_scales: vec![1, 2, 3, 6],
        }
    }

    pub fn fcn(channels: usize, num_classes: usize) -> Self {
        DecoderConfig {
            head: HeadKind::Fcn,
            channels,
            num_classes,
            pool_scales: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "decoder channels and num_classes must be positive".into(),
            ));
        }
        if self.num_classes > 255 {
            return Err(Error::Config(
                "at most 255 classes fit beside the ignore label".into(),
            ));
        }
        if self.head == HeadKind::Upernet
            && (self.pool_scales.is_empty() || self.pool_scales.contains(&0))
        {
            return Err(Error::Config(
                "pool scales must be non-empty and positive".into(),
            ));
        }
        Ok(())
    }
}

/// How one tap is brought to its pyramid stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    /// `n` stride-2 transposed convolutions.
    Up(usize),
    Identity,
    /// Max-pool with kernel = stride = factor, ceil mode.
    Pool(usize),
}

impl Resample {
    pub fn for_stride(patch: usize, target: usize) -> Result<Self> {
        if target == patch {
            Ok(Resample::Identity)
        } else if target > patch && target.is_multiple_of(patch) {
            Ok(Resample::Pool(target / patch))
        } else if target < patch
            && patch.is_multiple_of(target)
            && (patch / target).is_power_of_two()
        {
            Ok(Resample::Up((patch / target).trailing_zeros() as usize))
        } else {
            Err(Error::Config(format!(
                "patch size {patch} cannot be resampled to stride {target}"
            )))
        }
    }

    pub fn output_size(self, n: usize) -> usize {
        match self {
            Resample::Up(k) => n << k,
            Resample::Identity => n,
            Resample::Pool(f) => n.div_ceil(f),
        }
    }
}

pub fn adapter_plan(patch: usize) -> Result<[Resample; 4]> {
    let mut plan = [Resample::Identity; 4];
    for (p, &s) in plan.iter_mut().zip(&PYRAMID_STRIDES) {
        *p = Resample::for_stride(patch, s)?;
    }
    Ok(plan)
}

fn conv_specs(name: &str, out: usize, inp: usize, k: usize) -> [ParamSpec; 2] {
    let std = (2.0 / (inp * k * k) as f64).sqrt();
    [
        ParamSpec::new(
            format!("{name}.weight"),
            [out, inp, k, k],
            Init::Normal(std),
        ),
        ParamSpec::new(format!("{name}.bias"), [out], Init::Zeros),
    ]
}

pub fn adapter_specs(embed_dim: usize, patch: usize) -> Result<Vec<ParamSpec>> {
    let d = embed_dim;
    let mut specs = Vec::new();
    for (t, r) in adapter_plan(patch)?.into_iter().enumerate() {
        if let Resample::Up(n) = r {
            for j in 1..=n {
                let name = format!("adapter.tap{}.up{j}", t + 1);
                let std = (2.0 / (4 * d) as f64).sqrt();
                specs.push(ParamSpec::new(
                    format!("{name}.weight"),
                    [d, d, 2, 2],
                    Init::Normal(std),
                ));
                specs.push(ParamSpec::new(format!("{name}.bias"), [d], Init::Zeros));
            }
        }
    }
    Ok(specs)
}

/// Head parameters for features of width `embed_dim`.
pub fn head_specs(cfg: &DecoderConfig, embed_dim: usize) -> Vec<ParamSpec> {
    let (d, c, k) = (embed_dim, cfg.channels, cfg.num_classes);
    let mut specs = Vec::new();
    let classifier = |name: &str| {
        [
            ParamSpec::new(format!("{name}.weight"), [k, c, 1, 1], Init::Normal(0.01)),
            ParamSpec::new(format!("{name}.bias"), [k], Init::Zeros),
        ]
    };
    match cfg.head {
        HeadKind::Upernet => {
            for &s in &cfg.pool_scales {
                specs.extend(conv_specs(&format!("decoder.ppm.scale{s}"), c, d, 1));
            }
            specs.extend(conv_specs(
                "decoder.ppm.bottleneck",
                c,
                d + cfg.pool_scales.len() * c,
                3,
            ));
            for l in 1..=3 {
                specs.extend(conv_specs(&format!("decoder.fpn.lateral{l}"), c, d, 1));
            }
            for l in 1..=3 {
                specs.extend(conv_specs(&format!("decoder.fpn.conv{l}"), c, c, 3));
            }
            specs.extend(conv_specs("decoder.fpn.fuse", c, 4 * c, 3));
            specs.extend(classifier("decoder.classifier"));
        }
        HeadKind::Fcn => {
            specs.extend(conv_specs("decoder.fcn.conv", c, d, 3));
            specs.extend(classifier("decoder.fcn.classifier"));
        }
    }
    specs
}

/// Stride-1 convolution named `name`; 3×3 kernels see replicate padding.
fn conv(tape: &mut Tape, params: &Bound, name: &str, x: Var, relu: bool) -> Result<Var> {
    let w = params.get(&format!("{name}.weight"))?;
    let b = params.get(&format!("{name}.bias"))?;
    let k = tape.shape(w)[2];
    let x = if k > 1 {
        tape.pad_replicate(x, k / 2)?
    } else {
        x
    };
    let y = tape.conv2d(x, w, Some(b), Conv2dGeom::new(1, 0))?;
    Ok(if relu { tape.relu(y) } else { y })
}

fn spatial(tape: &Tape, x: Var) -> (usize, usize) {
    let s = tape.shape(x);
    (s[2], s[3])
}

/// Bring the four taps to strides 4, 8, 16 and 32 as `(batch, d, h, w)` maps.
pub fn build_pyramid(
    tape: &mut Tape,
    params: &Bound,
    taps: &[TokenMap; 4],
    patch: usize,
) -> Result<[Var; 4]> {
    let plan = adapter_plan(patch)?;
    let mut out = Vec::with_capacity(4);
    for (t, (tap, r)) in taps.iter().zip(plan).enumerate() {
        let mut x = tap.to_map(tape)?;
        match r {
            Resample::Identity => {}
            Resample::Pool(f) => x = tape.max_pool2d(x, f, f, true)?,
            Resample::Up(n) => {
                for j in 1..=n {
                    if j > 1 {
                        x = tape.relu(x);
                    }
                    let name = format!("adapter.tap{}.up{j}", t + 1);
                    x = tape.conv2d_transpose(
                        x,
                        params.get(&format!("{name}.weight"))?,
                        Some(params.get(&format!("{name}.bias"))?),
                        Conv2dGeom::new(2, 0),
                    )?;
                }
            }
        }
        out.push(x);
    }
    Ok([out[0], out[1], out[2], out[3]])
}

/// Pyramid pooling: pooled branches projected, upsampled and fused with the
/// input into `channels` maps.
pub fn ppm(tape: &mut Tape, params: &Bound, cfg: &DecoderConfig, x: Var) -> Result<Var> {
    let (h, w) = spatial(tape, x);
    let mut branches = vec![x];
    for &s in &cfg.pool_scales {
        let p = tape.adaptive_avg_pool2d(x, s, s)?;
        let p = conv(tape, params, &format!("decoder.ppm.scale{s}"), p, true)?;
        branches.push(tape.bilinear_resize(p, h, w)?);
    }
    let cat = tape.concat(&branches, 1)?;
    conv(tape, params, "decoder.ppm.bottleneck", cat, true)
}

/// UperNet over a stride-4..32 pyramid, logits resized to `out_size`.
pub fn upernet_head(
    tape: &mut Tape,
    params: &Bound,
    cfg: &DecoderConfig,
    pyramid: &[Var; 4],
    out_size: (usize, usize),
) -> Result<Var> {
    let mut lat = Vec::with_capacity(4);
    for (l, &x) in pyramid[..3].iter().enumerate() {
        lat.push(conv(
            tape,
            params,
            &format!("decoder.fpn.lateral{}", l + 1),
            x,
            true,
        )?);
    }
    lat.push(ppm(tape, params, cfg, pyramid[3])?);
    for l in (1..4).rev() {
        let (h, w) = spatial(tape, lat[l - 1]);
        let up = tape.bilinear_resize(lat[l], h, w)?;
        lat[l - 1] = tape.add(lat[l - 1], up)?;
    }
    let (h, w) = spatial(tape, lat[0]);
    let mut outs = Vec::with_capacity(4);
    for (l, &x) in lat.iter().enumerate() {
        let y = if l < 3 {
            conv(tape, params, &format!("decoder.fpn.conv{}", l + 1), x, true)?
        } else {
            x
        };
        outs.push(tape.bilinear_resize(y, h, w)?);
    }
    let cat = tape.concat(&outs, 1)?;
    let fused = conv(tape, params, "decoder.fpn.fuse", cat, true)?;
    let logits = conv(tape, params, "decoder.classifier", fused, false)?;
    tape.bilinear_resize(logits, out_size.0, out_size.1)
}

/// 3×3 conv + ReLU and a 1×1 classifier on the last tap.
pub fn fcn_head(
    tape: &mut Tape,
    params: &Bound,
    tap: &TokenMap,
    out_size: (usize, usize),
) -> Result<Var> {
    let x = tap.to_map(tape)?;
    let x = conv(tape, params, "decoder.fcn.conv", x, true)?;
    let logits = conv(tape, params, "decoder.fcn.classifier", x, false)?;
    tape.bilinear_resize(logits, out_size.0, out_size.1)
}
