//! Full segmentation model: encoder, pyramid adapter and decoder head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig, HeadKind};
use crate::encoder::{self, EncoderConfig};
use crate::error::{Error, Result};
use crate::params::{Bound, ParamSpec, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

/// Learnable scalar counts per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub stem: usize,
    pub pos_emb: usize,
    pub blocks: usize,
    pub adapter: usize,
    pub head: usize,
}

impl ParamCount {
    pub fn encoder(&self) -> usize {
        self.stem + self.pos_emb + self.blocks
    }

    pub fn decoder(&self) -> usize {
        self.adapter + self.head
    }

    pub fn total(&self) -> usize {
        self.encoder() + self.decoder()
    }
}

impl ModelConfig {
    /// 384-wide 6-6-6-6 encoder with a 512-channel UperNet over 6 classes.
    pub fn reference() -> Self {
        ModelConfig {
            encoder: EncoderConfig::reference(),
            decoder: DecoderConfig::upernet(512, 6),
        }
    }

    /// 8-wide 1-1-1-1 encoder, patch 8, 16-channel UperNet over 3 classes,
    /// positions for 16×16 inputs.
    pub fn tiny() -> Self {
        ModelConfig {
            encoder: EncoderConfig {
                embed_dim: 8,
                depths: [1, 1, 1, 1],
                patch_size: 8,
                expansion: 2,
                in_channels: 3,
                pos_grid: (2, 2),
                num_heads: 1,
                qkv_block_size: 4,
                forget_gate: crate::xlstm::ForgetGate::Exp,
            },
            decoder: DecoderConfig::upernet(16, 3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.head == HeadKind::Upernet {
            decoder::adapter_plan(self.encoder.patch_size)?;
        }
        Ok(())
    }

    fn adapter_specs(&self) -> Result<Vec<ParamSpec>> {
        match self.decoder.head {
            HeadKind::Upernet => {
                decoder::adapter_specs(self.encoder.embed_dim, self.encoder.patch_size)
            }
            HeadKind::Fcn => Ok(Vec::new()),
        }
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        self.validate()?;
        let mut specs = self.encoder.param_specs();
        specs.extend(self.adapter_specs()?);
        specs.extend(decoder::head_specs(&self.decoder, self.encoder.embed_dim));
        Ok(specs)
    }

    /// Counts from the parameter shapes without allocating them.
    pub fn count_parameters(&self) -> Result<ParamCount> {
        self.validate()?;
        let sum = |s: &[ParamSpec]| s.iter().map(ParamSpec::numel).sum::<usize>();
        let e = &self.encoder;
        Ok(ParamCount {
            stem: sum(&e.stem_specs()),
            pos_emb: e.pos_emb_spec().numel(),
            blocks: e.num_blocks() * e.block_num_parameters(),
            adapter: sum(&self.adapter_specs()?),
            head: sum(&decoder::head_specs(&self.decoder, e.embed_dim)),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamStore> {
        ParamStore::from_specs(&self.param_specs()?, rng)
    }

    /// Check a loaded store against this config's names and shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let specs = self.param_specs()?;
        for s in &specs {
            let t = params
                .get(&s.name)
                .ok_or_else(|| Error::MissingParam(s.name.clone()))?;
            if t.shape() != s.shape.as_slice() {
                return Err(Error::ParamShape {
                    name: s.name.clone(),
                    expected: s.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if params.len() != specs.len() {
            let extra = params
                .names()
                .find(|n| !specs.iter().any(|s| s.name == *n))
                .unwrap_or_default();
            return Err(Error::Format(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }

    /// `(batch, C, H, W)` images to `(batch, classes, H, W)` logits.
    pub fn forward(&self, tape: &mut Tape, params: &Bound, images: Var) -> Result<Var> {
        let out = match tape.shape(images) {
            &[_, _, h, w] => (h, w),
            s => {
                return Err(Error::arg(
                    "forward",
                    format!("expected (batch, channels, h, w), got {s:?}"),
                ))
            }
        };
        let taps = encoder::encode(tape, params, &self.encoder, images)?;
        match self.decoder.head {
            HeadKind::Upernet => {
                let pyramid = decoder::build_pyramid(tape, params, &taps, self.encoder.patch_size)?;
                decoder::upernet_head(tape, params, &self.decoder, &pyramid, out)
            }
            HeadKind::Fcn => decoder::fcn_head(tape, params, &taps[3], out),
        }
    }

    /// Inference-only logits.
    pub fn logits(&self, params: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Per-pixel argmax classes, `batch × H × W` in row-major order.
    pub fn predict(&self, params: &ParamStore, images: &Tensor) -> Result<Vec<u8>> {
        let logits = self.logits(params, images)?;
        Ok(argmax_classes(&logits))
    }
}

/// Argmax over axis 1 of a `(batch, K, H, W)` tensor; ties go to the lower class.
pub fn argmax_classes(logits: &Tensor) -> Vec<u8> {
    let &[b, k, h, w] = logits.shape() else {
        panic!("argmax_classes expects a rank-4 tensor");
    };
    let hw = h * w;
    let mut out = vec![0u8; b * hw];
    for n in 0..b {
        let base = &logits.data()[n * k * hw..(n + 1) * k * hw];
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if base[c * hw + p] > base[best * hw + p] {
                    best = c;
                }
            }
            out[n * hw + p] = best as u8;
        }
    }
    out
}
