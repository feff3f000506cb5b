//! Patch stem, ViL blocks and the four-stage isotropic encoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamSpec};
use crate::tensor::{Conv2dGeom, Tape, Var};
use crate::xlstm::{mlstm_layer, ForgetGate, MLstmConfig, MLstmVars, ScanDirection};

pub const LAYERNORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub depths: [usize; 4],
    pub patch_size: usize,
    pub expansion: usize,
    pub in_channels: usize,
    /// Token grid the position embeddings are laid out on.
    pub pos_grid: (usize, usize),
    pub num_heads: usize,
    pub qkv_block_size: usize,
    pub forget_gate: ForgetGate,
}

/// Token sequence `(batch, h·w, d)` in row-major grid order.
#[derive(Clone, Copy, Debug)]
pub struct TokenMap {
    pub tokens: Var,
    pub grid: (usize, usize),
}

impl TokenMap {
    /// `(batch, d, h, w)` view of the tokens.
    pub fn to_map(&self, tape: &mut Tape) -> Result<Var> {
        let &[b, l, d] = tape.shape(self.tokens) else {
            return Err(Error::arg("TokenMap", "tokens must be (batch, L, d)"));
        };
        debug_assert_eq!(l, self.grid.0 * self.grid.1);
        let t = tape.permute(self.tokens, &[0, 2, 1])?;
        tape.reshape(t, &[b, d, self.grid.0, self.grid.1])
    }
}

impl EncoderConfig {
    /// 384-wide, 6-6-6-6, patch 16, positions for 512×512 crops.
    pub fn reference() -> Self {
        EncoderConfig {
            embed_dim: 384,
            depths: [6, 6, 6, 6],
            patch_size: 16,
            expansion: 2,
            in_channels: 3,
            pos_grid: (32, 32),
            num_heads: 1,
            qkv_block_size: 4,
            forget_gate: ForgetGate::Exp,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.depths.iter().sum()
    }

    pub fn inner_dim(&self) -> usize {
        self.expansion * self.embed_dim
    }

    pub fn mlstm(&self) -> MLstmConfig {
        MLstmConfig {
            dim: self.inner_dim(),
            num_heads: self.num_heads,
            qkv_block_size: self.qkv_block_size,
            forget_gate: self.forget_gate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("patch_size", self.patch_size),
            ("expansion", self.expansion),
            ("in_channels", self.in_channels),
            ("pos_grid height", self.pos_grid.0),
            ("pos_grid width", self.pos_grid.1),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if self.num_blocks() == 0 {
            return Err(Error::Config("encoder needs at least one block".into()));
        }
        self.mlstm().validate()
    }

    /// Token grid for an `h × w` input.
    pub fn grid(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let p = self.patch_size;
        if !h.is_multiple_of(p) || !w.is_multiple_of(p) || h == 0 || w == 0 {
            return Err(Error::arg(
                "patchify",
                format!("input {h}×{w} is not a positive multiple of patch size {p}"),
            ));
        }
        Ok((h / p, w / p))
    }

    /// `(stage, global index)` for every block, both 1-based.
    pub fn blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_blocks());
        for (s, &depth) in self.depths.iter().enumerate() {
            for _ in 0..depth {
                out.push((s + 1, out.len() + 1));
            }
        }
        out
    }

    pub fn block_prefix(stage: usize, index: usize) -> String {
        format!("encoder.stage{stage}.block{index}")
    }

    pub fn stem_specs(&self) -> Vec<ParamSpec> {
        let (d, c, p) = (self.embed_dim, self.in_channels, self.patch_size);
        vec![
            ParamSpec::new(
                "stem.weight",
                [d, c, p, p],
                Init::Normal(1.0 / ((c * p * p) as f64).sqrt()),
            ),
            ParamSpec::new("stem.bias", [d], Init::Zeros),
        ]
    }

    pub fn pos_emb_spec(&self) -> ParamSpec {
        let (h, w) = self.pos_grid;
        ParamSpec::new("pos_emb", [h * w, self.embed_dim], Init::Normal(0.02))
    }

    /// Parameters of one block, relative to its prefix.
    pub fn block_specs(&self) -> Vec<ParamSpec> {
        let (d, e) = (self.embed_dim, self.inner_dim());
        let up_std = (2.0 / (5.0 * d as f64)).sqrt();
        let down_std = 2.0 / (self.num_blocks() as f64 * (e as f64).sqrt());
        let mut specs = vec![
            ParamSpec::new("ln.gamma", [d], Init::Ones),
            ParamSpec::new("ln.beta", [d], Init::Zeros),
            ParamSpec::new("up_main", [d, e], Init::Normal(up_std)),
            ParamSpec::new("up_gate", [d, e], Init::Normal(up_std)),
        ];
        specs.extend(
            self.mlstm()
                .param_specs()
                .into_iter()
                .map(|p| p.prefixed("mlstm")),
        );
        specs.push(ParamSpec::new("down", [e, d], Init::Normal(down_std)));
        specs
    }

    pub fn block_num_parameters(&self) -> usize {
        self.block_specs().iter().map(ParamSpec::numel).sum()
    }

    /// Stem, position embeddings and every block, in forward order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.stem_specs();
        specs.push(self.pos_emb_spec());
        for (stage, index) in self.blocks() {
            let prefix = Self::block_prefix(stage, index);
            specs.extend(self.block_specs().into_iter().map(|p| p.prefixed(&prefix)));
        }
        specs
    }
}

/// Stride-`p` patch projection plus position embeddings, bilinearly resized
/// when the token grid differs from the configured one.
pub fn patchify(
    tape: &mut Tape,
    params: &Bound,
    cfg: &EncoderConfig,
    image: Var,
) -> Result<TokenMap> {
    let &[b, c, h, w] = tape.shape(image) else {
        return Err(Error::arg(
            "patchify",
            format!(
                "expected (batch, channels, h, w), got {:?}",
                tape.shape(image)
            ),
        ));
    };
    if c != cfg.in_channels {
        return Err(Error::shape(
            "patchify",
            &[b, c, h, w],
            &[b, cfg.in_channels, h, w],
        ));
    }
    let grid = cfg.grid(h, w)?;
    let d = cfg.embed_dim;
    let x = tape.conv2d(
        image,
        params.get("stem.weight")?,
        Some(params.get("stem.bias")?),
        Conv2dGeom::new(cfg.patch_size, 0),
    )?;
    let x = tape.reshape(x, &[b, d, grid.0 * grid.1])?;
    let x = tape.permute(x, &[0, 2, 1])?;
    let mut pos = params.get("pos_emb")?;
    if grid != cfg.pos_grid {
        let (ph, pw) = cfg.pos_grid;
        let p = tape.transpose(pos)?;
        let p = tape.reshape(p, &[1, d, ph, pw])?;
        let p = tape.bilinear_resize(p, grid.0, grid.1)?;
        let p = tape.reshape(p, &[d, grid.0 * grid.1])?;
        pos = tape.transpose(p)?;
    }
    let tokens = tape.add(x, pos)?;
    Ok(TokenMap { tokens, grid })
}

fn mlstm_vars(params: &Bound, prefix: &str) -> Result<MLstmVars> {
    let names = [
        "q",
        "k",
        "v",
        "igate.weight",
        "igate.bias",
        "fgate.weight",
        "fgate.bias",
        "ogate.weight",
        "ogate.bias",
    ];
    let vars = names
        .iter()
        .map(|n| params.get(&format!("{prefix}.mlstm.{n}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(MLstmVars::from_slice(&vars))
}

/// Main branch of a block: `mlstm(LN(x)·W_up_main)` in the block's scan
/// direction, `(batch, L, inner)`.
pub fn vil_main_branch(
    tape: &mut Tape,
    params: &Bound,
    cfg: &EncoderConfig,
    prefix: &str,
    dir: ScanDirection,
    normed: Var,
) -> Result<Var> {
    let up = tape.matmul(normed, params.get(&format!("{prefix}.up_main"))?)?;
    mlstm_layer(tape, &mlstm_vars(params, prefix)?, &cfg.mlstm(), up, dir)
}

/// Gated-MLP block with mLSTM main branch and residual connection. The
/// global 1-based `index` picks the scan direction.
pub fn vil_block(
    tape: &mut Tape,
    params: &Bound,
    cfg: &EncoderConfig,
    stage: usize,
    index: usize,
    x: TokenMap,
) -> Result<TokenMap> {
    let prefix = EncoderConfig::block_prefix(stage, index);
    let p = |n: &str| params.get(&format!("{prefix}.{n}"));
    let normed = tape.layernorm(x.tokens, p("ln.gamma")?, p("ln.beta")?, LAYERNORM_EPS)?;
    let main = vil_main_branch(
        tape,
        params,
        cfg,
        &prefix,
        ScanDirection::for_block(index),
        normed,
    )?;
    let gate = tape.matmul(normed, p("up_gate")?)?;
    let gate = tape.silu(gate);
    let y = tape.mul(main, gate)?;
    let y = tape.matmul(y, p("down")?)?;
    let tokens = tape.add(x.tokens, y)?;
    Ok(TokenMap {
        tokens,
        grid: x.grid,
    })
}

/// Run every block in order and tap the tokens after each stage's last
/// block. An empty stage repeats the previous tap.
pub fn encode(
    tape: &mut Tape,
    params: &Bound,
    cfg: &EncoderConfig,
    image: Var,
) -> Result<[TokenMap; 4]> {
    cfg.validate()?;
    let mut x = patchify(tape, params, cfg, image)?;
    let mut taps = [x; 4];
    let blocks = cfg.blocks();
    for (s, tap) in taps.iter_mut().enumerate() {
        for &(stage, index) in blocks.iter().filter(|(stage, _)| *stage == s + 1) {
            x = vil_block(tape, params, cfg, stage, index, x)?;
        }
        *tap = x;
    }
    Ok(taps)
}
