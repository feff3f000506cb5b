//! Stabilized mLSTM: exponential-gated matrix memory with a normalizer and a
//! log-domain stabilizer, plus directional scanning over token sequences.
//!
//! Per head of width `d`, with pre-activations `ĩ`, `f̃` (scalars) and the log
//! forget gate `lf = f̃` (or `log σ(f̃)`):
//!
//! ```text
//! m' = max(lf + m, ĩ)
//! i' = exp(ĩ − m'),  f' = exp(lf + m − m')
//! C' = f'·C + i'·v kᵀ,   n' = f'·n + i'·k
//! h  = σ(õ) ⊙ C' q / max(|n'ᵀ q|, exp(−m'))
//! ```
//!
//! `C` and `n` are stored scaled by `exp(−m)`; the unscaled memory is
//! `exp(m)·C`. The `exp(−m')` floor is the unit floor of the unscaled
//! normalizer, so outputs are independent of `m`.

mod layer;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamSpec};
use crate::tensor::Tensor;

pub use layer::{mlstm_layer, MLstmRecurrence, MLstmVars};

/// Initial stabilizer, standing in for −∞.
pub const STABILIZER_INIT: f64 = -1e30;

/// Bound on raw gate pre-activations accepted by [`naive_mlstm_oracle`].
pub const ORACLE_GATE_BOUND: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForgetGate {
    #[default]
    Exp,
    Sigmoid,
}

impl ForgetGate {
    fn log_gate(self, pre: f64) -> f64 {
        match self {
            ForgetGate::Exp => pre,
            ForgetGate::Sigmoid => crate::tensor::Unary::LogSigmoid.eval(pre),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScanDirection {
    Forward,
    Backward,
}

impl ScanDirection {
    /// Forward for odd 1-based block indices, Backward for even ones.
    pub fn for_block(index: usize) -> Self {
        if index % 2 == 1 {
            ScanDirection::Forward
        } else {
            ScanDirection::Backward
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MLstmConfig {
    pub dim: usize,
    pub num_heads: usize,
    /// Width of the diagonal blocks of the q/k/v projections; `dim` is dense.
    pub qkv_block_size: usize,
    pub forget_gate: ForgetGate,
}

impl MLstmConfig {
    pub fn dense(dim: usize) -> Self {
        MLstmConfig {
            dim,
            num_heads: 1,
            qkv_block_size: dim,
            forget_gate: ForgetGate::Exp,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.num_heads
    }

    pub fn num_blocks(&self) -> usize {
        self.dim / self.qkv_block_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_heads == 0 || self.qkv_block_size == 0 {
            return Err(Error::Config("mLSTM dims must be positive".into()));
        }
        if !self.dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "mLSTM dim {} not divisible by {} heads",
                self.dim, self.num_heads
            )));
        }
        if !self.dim.is_multiple_of(self.qkv_block_size) {
            return Err(Error::Config(format!(
                "mLSTM dim {} not divisible by qkv block size {}",
                self.dim, self.qkv_block_size
            )));
        }
        Ok(())
    }

    /// `3·d·b` projection weights, `2·(d·h + h)` for the input and forget
    /// gates and `2·d` for the elementwise output gate.
    pub fn num_parameters(&self) -> usize {
        let (d, h, b) = (self.dim, self.num_heads, self.qkv_block_size);
        3 * d * b + 2 * (d * h + h) + 2 * d
    }

    /// Parameter names (relative to the layer prefix) and shapes.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.param_specs()
            .into_iter()
            .map(|p| (p.name, p.shape))
            .collect()
    }

    /// Parameters with their initializers. The forget-gate bias is spread
    /// over heads so that the effective gate starts between σ(3) and σ(6).
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let (d, h, b) = (self.dim, self.num_heads, self.qkv_block_size);
        let nb = self.num_blocks();
        let std = (2.0 / (5.0 * b as f64)).sqrt();
        let fbias = (0..h)
            .map(|i| {
                let s = if h == 1 {
                    3.0
                } else {
                    3.0 + 3.0 * i as f64 / (h - 1) as f64
                };
                match self.forget_gate {
                    ForgetGate::Sigmoid => s,
                    ForgetGate::Exp => crate::tensor::Unary::LogSigmoid.eval(s),
                }
            })
            .collect();
        vec![
            ParamSpec::new("q", [nb, b, b], Init::Normal(std)),
            ParamSpec::new("k", [nb, b, b], Init::Normal(std)),
            ParamSpec::new("v", [nb, b, b], Init::Normal(std)),
            ParamSpec::new("igate.weight", [d, h], Init::Normal(0.02)),
            ParamSpec::new("igate.bias", [h], Init::Normal(0.1)),
            ParamSpec::new("fgate.weight", [d, h], Init::Normal(0.02)),
            ParamSpec::new("fgate.bias", [h], Init::Values(fbias)),
            ParamSpec::new("ogate.weight", [d], Init::Normal(0.02)),
            ParamSpec::new("ogate.bias", [d], Init::Zeros),
        ]
    }
}

/// mLSTM weights. Projections are block-diagonal, stored as
/// `(blocks, in, out)` so that block `j` maps `x[j·b..]` by `x_j · W_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct MLstmParams {
    pub config: MLstmConfig,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub igate_w: Tensor,
    pub igate_b: Tensor,
    pub fgate_w: Tensor,
    pub fgate_b: Tensor,
    pub ogate_w: Tensor,
    pub ogate_b: Tensor,
}

/// Projections and gate pre-activations for one token.
#[derive(Clone, Debug)]
pub struct Preacts {
    pub q: Vec<f64>,
    /// Already scaled by `1/√head_dim`.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    pub igate: Vec<f64>,
    pub fgate: Vec<f64>,
    pub ogate: Vec<f64>,
}

impl MLstmParams {
    /// Random weights per [`MLstmConfig::param_specs`].
    pub fn init<R: Rng + ?Sized>(config: MLstmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let t = config
            .param_specs()
            .iter()
            .map(|p| p.materialize(rng))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tensors(config, t)
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.igate_w,
            &self.igate_b,
            &self.fgate_w,
            &self.fgate_b,
            &self.ogate_w,
            &self.ogate_b,
        ]
    }

    /// Assemble from tensors in [`MLstmConfig::param_shapes`] order.
    pub fn from_tensors(config: MLstmConfig, t: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if t.len() != shapes.len() {
            return Err(Error::arg("MLstmParams", "wrong tensor count"));
        }
        for ((name, shape), x) in shapes.iter().zip(&t) {
            if x.shape() != shape.as_slice() {
                return Err(Error::ParamShape {
                    name: format!("mlstm.{name}"),
                    expected: shape.clone(),
                    found: x.shape().to_vec(),
                });
            }
        }
        let mut it = t.into_iter();
        let mut next = || it.next().expect("length checked");
        Ok(MLstmParams {
            config,
            w_q: next(),
            w_k: next(),
            w_v: next(),
            igate_w: next(),
            igate_b: next(),
            fgate_w: next(),
            fgate_b: next(),
            ogate_w: next(),
            ogate_b: next(),
        })
    }

    pub fn project(&self, x: &[f64]) -> Result<Preacts> {
        let c = &self.config;
        if x.len() != c.dim {
            return Err(Error::shape("mlstm_step", &[x.len()], &[c.dim]));
        }
        let scale = 1.0 / (c.head_dim() as f64).sqrt();
        let mut k = block_project(&self.w_k, x, c.qkv_block_size);
        k.iter_mut().for_each(|v| *v *= scale);
        let gate = |w: &Tensor, b: &Tensor| -> Vec<f64> {
            (0..c.num_heads)
                .map(|h| {
                    b.data()[h]
                        + (0..c.dim)
                            .map(|j| x[j] * w.data()[j * c.num_heads + h])
                            .sum::<f64>()
                })
                .collect()
        };
        Ok(Preacts {
            q: block_project(&self.w_q, x, c.qkv_block_size),
            k,
            v: block_project(&self.w_v, x, c.qkv_block_size),
            igate: gate(&self.igate_w, &self.igate_b),
            fgate: gate(&self.fgate_w, &self.fgate_b),
            ogate: (0..c.dim)
                .map(|j| x[j] * self.ogate_w.data()[j] + self.ogate_b.data()[j])
                .collect(),
        })
    }
}

fn block_project(w: &Tensor, x: &[f64], b: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for (j, (xb, yb)) in x.chunks(b).zip(y.chunks_mut(b)).enumerate() {
        let wj = &w.data()[j * b * b..(j + 1) * b * b];
        for (r, &xr) in xb.iter().enumerate() {
            for (c, yc) in yb.iter_mut().enumerate() {
                *yc += xr * wj[r * b + c];
            }
        }
    }
    y
}

/// Recurrent state of every head.
#[derive(Clone, Debug, PartialEq)]
pub struct MLstmState {
    head_dim: usize,
    /// `heads × d × d`, scaled by `exp(−m)`.
    memory: Vec<f64>,
    /// `heads × d`, scaled by `exp(−m)`.
    normalizer: Vec<f64>,
    stabilizer: Vec<f64>,
}

impl MLstmState {
    pub fn new(config: &MLstmConfig) -> Self {
        let (h, d) = (config.num_heads, config.head_dim());
        MLstmState {
            head_dim: d,
            memory: vec![0.0; h * d * d],
            normalizer: vec![0.0; h * d],
            stabilizer: vec![STABILIZER_INIT; h],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.stabilizer.len()
    }

    /// Stored (scaled) memory of `head`, row-major `d × d`.
    pub fn memory(&self, head: usize) -> &[f64] {
        let dd = self.head_dim * self.head_dim;
        &self.memory[head * dd..(head + 1) * dd]
    }

    pub fn normalizer(&self, head: usize) -> &[f64] {
        &self.normalizer[head * self.head_dim..(head + 1) * self.head_dim]
    }

    pub fn stabilizer(&self, head: usize) -> f64 {
        self.stabilizer[head]
    }

    /// Unscaled memory `exp(m)·C`.
    pub fn effective_memory(&self, head: usize) -> Vec<f64> {
        let s = self.stabilizer[head].exp();
        self.memory(head).iter().map(|v| v * s).collect()
    }

    /// Unscaled normalizer `exp(m)·n`.
    pub fn effective_normalizer(&self, head: usize) -> Vec<f64> {
        let s = self.stabilizer[head].exp();
        self.normalizer(head).iter().map(|v| v * s).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.memory
            .iter()
            .chain(&self.normalizer)
            .all(|v| v.is_finite())
            && self.stabilizer.iter().all(|v| v.is_finite())
    }
}

/// Scalars of one head update, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StepScalars {
    pub igate: f64,
    pub fgate: f64,
    pub stabilizer: f64,
    pub qn: f64,
    pub denom: f64,
}

/// `C ← f'·C + i'·v kᵀ`, with the same arithmetic as [`head_update`].
pub(crate) fn memory_step(c: &mut [f64], k: &[f64], v: &[f64], ig: f64, fg: f64) {
    for (row, &vr) in c.chunks_exact_mut(k.len()).zip(v) {
        let vr = ig * vr;
        for (cc, &kc) in row.iter_mut().zip(k) {
            *cc = fg * *cc + vr * kc;
        }
    }
}

/// One stabilized head update. Writes `C'q / denom` into `out`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn head_update(
    c: &mut [f64],
    n: &mut [f64],
    m: &mut f64,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    i_pre: f64,
    log_f: f64,
    out: &mut [f64],
) -> StepScalars {
    let d = q.len();
    let m_new = (log_f + *m).max(i_pre);
    let ig = (i_pre - m_new).exp();
    let fg = (log_f + *m - m_new).exp();
    let mut qn = 0.0;
    for j in 0..d {
        n[j] = fg * n[j] + ig * k[j];
        qn += n[j] * q[j];
    }
    let mut denom = qn.abs().max((-m_new).exp());
    if denom == 0.0 {
        denom = f64::MIN_POSITIVE;
    }
    for (r, row) in c.chunks_exact_mut(d).enumerate() {
        let vr = ig * v[r];
        let mut acc = 0.0;
        for ((cc, &kc), &qc) in row.iter_mut().zip(k).zip(q) {
            *cc = fg * *cc + vr * kc;
            acc += *cc * qc;
        }
        out[r] = acc / denom;
    }
    *m = m_new;
    StepScalars {
        igate: ig,
        fgate: fg,
        stabilizer: m_new,
        qn,
        denom,
    }
}

impl MLstmParams {
    /// Advance `state` by one token and return `h_t`.
    pub fn step(&self, state: &mut MLstmState, x: &[f64]) -> Result<Vec<f64>> {
        let c = &self.config;
        if state.num_heads() != c.num_heads || state.head_dim != c.head_dim() {
            return Err(Error::arg(
                "mlstm_step",
                "state does not match the cell config",
            ));
        }
        let p = self.project(x)?;
        let hd = c.head_dim();
        let mut h = vec![0.0; c.dim];
        for head in 0..c.num_heads {
            let s = head * hd..(head + 1) * hd;
            head_update(
                &mut state.memory[head * hd * hd..(head + 1) * hd * hd],
                &mut state.normalizer[s.clone()],
                &mut state.stabilizer[head],
                &p.q[s.clone()],
                &p.k[s.clone()],
                &p.v[s.clone()],
                p.igate[head],
                c.forget_gate.log_gate(p.fgate[head]),
                &mut h[s],
            );
        }
        for (hv, &o) in h.iter_mut().zip(&p.ogate) {
            *hv *= crate::tensor::Unary::Sigmoid.eval(o);
        }
        Ok(h)
    }
}

/// Functional form of [`MLstmParams::step`].
pub fn mlstm_step(
    params: &MLstmParams,
    state: &MLstmState,
    x: &[f64],
) -> Result<(Vec<f64>, MLstmState)> {
    let mut next = state.clone();
    let h = params.step(&mut next, x)?;
    Ok((h, next))
}

fn check_seq(params: &MLstmParams, seq: &Tensor) -> Result<usize> {
    match *seq.shape() {
        [l, d] if d == params.config.dim => Ok(l),
        _ => Err(Error::shape(
            "mlstm_scan",
            seq.shape(),
            &[0, params.config.dim],
        )),
    }
}

/// Run the cell over an `L × d` sequence from the initial state. Backward
/// reverses the sequence, scans forward and reverses the outputs.
pub fn mlstm_scan(params: &MLstmParams, seq: &Tensor, dir: ScanDirection) -> Result<Tensor> {
    let l = check_seq(params, seq)?;
    if dir == ScanDirection::Backward {
        let rev = seq.flip(0)?;
        return mlstm_scan(params, &rev, ScanDirection::Forward)?.flip(0);
    }
    let d = params.config.dim;
    let mut state = MLstmState::new(&params.config);
    let mut out = Vec::with_capacity(l * d);
    for x in seq.data().chunks(d) {
        out.extend(params.step(&mut state, x)?);
    }
    Tensor::new([l, d], out)
}

/// Unstabilized reference: raw exponential gates, unscaled memory and a unit
/// floor on `|nᵀq|`. Rejects pre-activations beyond [`ORACLE_GATE_BOUND`].
pub fn naive_mlstm_oracle(params: &MLstmParams, seq: &Tensor) -> Result<Tensor> {
    let l = check_seq(params, seq)?;
    let cfg = &params.config;
    let (d, heads, hd, b) = (cfg.dim, cfg.num_heads, cfg.head_dim(), cfg.qkv_block_size);
    let mut c = vec![0.0; heads * hd * hd];
    let mut n = vec![0.0; heads * hd];
    let mut out = Vec::with_capacity(l * d);
    let project = |w: &Tensor, x: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|col| {
                let blk = col / b;
                (0..b)
                    .map(|r| x[blk * b + r] * w.data()[(blk * b + r) * b + col % b])
                    .sum()
            })
            .collect()
    };
    for x in seq.data().chunks(d) {
        let q = project(&params.w_q, x);
        let k: Vec<f64> = project(&params.w_k, x)
            .into_iter()
            .map(|v| v / (hd as f64).sqrt())
            .collect();
        let v = project(&params.w_v, x);
        let mut h = vec![0.0; d];
        for head in 0..heads {
            let pre = |w: &Tensor, bias: &Tensor| -> f64 {
                bias.data()[head]
                    + (0..d)
                        .map(|j| x[j] * w.data()[j * heads + head])
                        .sum::<f64>()
            };
            let (ip, fp) = (
                pre(&params.igate_w, &params.igate_b),
                pre(&params.fgate_w, &params.fgate_b),
            );
            if ip.abs() > ORACLE_GATE_BOUND || fp.abs() > ORACLE_GATE_BOUND {
                return Err(Error::Domain {
                    op: "naive_mlstm_oracle",
                    msg: format!("gate pre-activation ({ip}, {fp}) exceeds ±{ORACLE_GATE_BOUND}"),
                });
            }
            let ig = ip.exp();
            let fg = match cfg.forget_gate {
                ForgetGate::Exp => fp.exp(),
                ForgetGate::Sigmoid => 1.0 / (1.0 + (-fp).exp()),
            };
            let o = head * hd;
            let ch = &mut c[head * hd * hd..(head + 1) * hd * hd];
            for r in 0..hd {
                for col in 0..hd {
                    ch[r * hd + col] = fg * ch[r * hd + col] + ig * v[o + r] * k[o + col];
                }
            }
            let mut nq = 0.0;
            for j in 0..hd {
                n[o + j] = fg * n[o + j] + ig * k[o + j];
                nq += n[o + j] * q[o + j];
            }
            let denom = nq.abs().max(1.0);
            for r in 0..hd {
                let cq: f64 = (0..hd).map(|col| ch[r * hd + col] * q[o + col]).sum();
                let og = 1.0
                    / (1.0
                        + (-(x[o + r] * params.ogate_w.data()[o + r]
                            + params.ogate_b.data()[o + r]))
                            .exp());
                h[o + r] = og * cq / denom;
            }
        }
        out.extend(h);
    }
    Tensor::new([l, d], out)
}
