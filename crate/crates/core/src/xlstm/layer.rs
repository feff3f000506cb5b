//! The mLSTM layer on the tape. Projections and gates are ordinary tape ops;
//! the recurrence itself is one fused [`Function`] with a hand-written
//! reverse sweep over time.

use super::{head_update, memory_step, MLstmConfig, ScanDirection, StepScalars};
use crate::error::{Error, Result};
use crate::tensor::{Function, Tape, Tensor, Unary, Var};

/// Tape variables of one mLSTM layer, in [`MLstmConfig::param_shapes`] order.
#[derive(Clone, Copy, Debug)]
pub struct MLstmVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub igate_w: Var,
    pub igate_b: Var,
    pub fgate_w: Var,
    pub fgate_b: Var,
    pub ogate_w: Var,
    pub ogate_b: Var,
}

impl MLstmVars {
    pub fn from_slice(v: &[Var]) -> Self {
        MLstmVars {
            w_q: v[0],
            w_k: v[1],
            w_v: v[2],
            igate_w: v[3],
            igate_b: v[4],
            fgate_w: v[5],
            fgate_b: v[6],
            ogate_w: v[7],
            ogate_b: v[8],
        }
    }
}

fn block_linear(tape: &mut Tape, x: Var, w: Var, cfg: &MLstmConfig) -> Result<Var> {
    let n = tape.shape(x)[0];
    let (nb, b) = (cfg.num_blocks(), cfg.qkv_block_size);
    if nb == 1 {
        let w2 = tape.reshape(w, &[b, b])?;
        return tape.matmul(x, w2);
    }
    let xb = tape.reshape(x, &[n, nb, b])?;
    let xb = tape.permute(xb, &[1, 0, 2])?;
    let y = tape.matmul(xb, w)?;
    let y = tape.permute(y, &[1, 0, 2])?;
    tape.reshape(y, &[n, cfg.dim])
}

/// mLSTM over a `(batch, L, d)` token tensor in direction `dir`.
pub fn mlstm_layer(
    tape: &mut Tape,
    vars: &MLstmVars,
    cfg: &MLstmConfig,
    x: Var,
    dir: ScanDirection,
) -> Result<Var> {
    cfg.validate()?;
    let &[batch, len, d] = tape.shape(x) else {
        return Err(Error::arg(
            "mlstm_layer",
            format!("expected (batch, L, d), got {:?}", tape.shape(x)),
        ));
    };
    if d != cfg.dim {
        return Err(Error::shape(
            "mlstm_layer",
            tape.shape(x),
            &[batch, len, cfg.dim],
        ));
    }
    let x = match dir {
        ScanDirection::Forward => x,
        ScanDirection::Backward => tape.flip_axis(x, 1)?,
    };
    let flat = tape.reshape(x, &[batch * len, d])?;
    let q = block_linear(tape, flat, vars.w_q, cfg)?;
    let k = block_linear(tape, flat, vars.w_k, cfg)?;
    let k = tape.scale(k, 1.0 / (cfg.head_dim() as f64).sqrt());
    let v = block_linear(tape, flat, vars.w_v, cfg)?;
    let ig = tape.matmul(flat, vars.igate_w)?;
    let ig = tape.add(ig, vars.igate_b)?;
    let fg = tape.matmul(flat, vars.fgate_w)?;
    let fg = tape.add(fg, vars.fgate_b)?;
    let lf = match cfg.forget_gate {
        super::ForgetGate::Exp => fg,
        super::ForgetGate::Sigmoid => tape.apply(Unary::LogSigmoid, fg)?,
    };
    let og = tape.mul(flat, vars.ogate_w)?;
    let og = tape.add(og, vars.ogate_b)?;
    let og = tape.sigmoid(og);

    let shape3 = |tape: &mut Tape, v: Var, w: usize| tape.reshape(v, &[batch, len, w]);
    let ins = [
        shape3(tape, q, d)?,
        shape3(tape, k, d)?,
        shape3(tape, v, d)?,
        shape3(tape, ig, cfg.num_heads)?,
        shape3(tape, lf, cfg.num_heads)?,
    ];
    let (out, func) = {
        let vals: Vec<&Tensor> = ins.iter().map(|&v| tape.value(v)).collect();
        MLstmRecurrence::forward(cfg.num_heads, &vals)?
    };
    let h = tape.custom(&ins, out, Box::new(func));
    let h = tape.reshape(h, &[batch * len, d])?;
    let h = tape.mul(h, og)?;
    let h = tape.reshape(h, &[batch, len, d])?;
    match dir {
        ScanDirection::Forward => Ok(h),
        ScanDirection::Backward => tape.flip_axis(h, 1),
    }
}

/// Steps between stored memory snapshots; the reverse sweep recomputes the
/// matrices inside each chunk from its snapshot.
pub const SNAPSHOT_INTERVAL: usize = 16;

/// Fused forward-direction recurrence over `(batch, L, ·)` inputs
/// `[q, k, v, igate, log_fgate]`, producing `C_t q_t / denom_t` per head.
///
/// Memory matrices are kept only every [`SNAPSHOT_INTERVAL`] steps, so
/// storage grows as `batch · heads · (L / 16 + 1) · d²`.
pub struct MLstmRecurrence {
    heads: usize,
    /// `[batch][head][chunk]` scaled memory before the chunk's first step.
    snapshots: Vec<f64>,
    /// `[batch][head][t ∈ 0..=L]` scaled normalizers.
    normalizer: Vec<f64>,
    /// `[batch][head][t ∈ 1..=L]`.
    scalars: Vec<StepScalars>,
}

fn num_chunks(len: usize) -> usize {
    len.div_ceil(SNAPSHOT_INTERVAL)
}

impl MLstmRecurrence {
    pub fn forward(heads: usize, inputs: &[&Tensor]) -> Result<(Tensor, Self)> {
        let [q, k, v, ig, lf] = inputs else {
            return Err(Error::arg(
                "mlstm_recurrence",
                "expected [q, k, v, igate, log_fgate]",
            ));
        };
        let &[batch, len, d] = q.shape() else {
            return Err(Error::arg("mlstm_recurrence", "q must be (batch, L, d)"));
        };
        for t in [k, v] {
            if t.shape() != q.shape() {
                return Err(Error::shape("mlstm_recurrence", q.shape(), t.shape()));
            }
        }
        for t in [ig, lf] {
            if t.shape() != [batch, len, heads] {
                return Err(Error::shape(
                    "mlstm_recurrence",
                    &[batch, len, heads],
                    t.shape(),
                ));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::arg("mlstm_recurrence", "dim not divisible by heads"));
        }
        let hd = d / heads;
        let dd = hd * hd;
        let chains = batch * heads;
        let nc = num_chunks(len);
        let mut snapshots = vec![0.0; chains * nc * dd];
        let mut normalizer = vec![0.0; chains * (len + 1) * hd];
        let mut scalars = Vec::with_capacity(chains * len);
        let mut out = vec![0.0; batch * len * d];
        let mut c = vec![0.0; dd];
        for b in 0..batch {
            for h in 0..heads {
                let chain = b * heads + h;
                let snaps = &mut snapshots[chain * nc * dd..(chain + 1) * nc * dd];
                let nrm = &mut normalizer[chain * (len + 1) * hd..(chain + 1) * (len + 1) * hd];
                c.fill(0.0);
                let mut m = super::STABILIZER_INIT;
                for t in 0..len {
                    if t % SNAPSHOT_INTERVAL == 0 {
                        let j = t / SNAPSHOT_INTERVAL;
                        snaps[j * dd..(j + 1) * dd].copy_from_slice(&c);
                    }
                    let (nprev, nnext) = nrm.split_at_mut((t + 1) * hd);
                    let n = &mut nnext[..hd];
                    n.copy_from_slice(&nprev[t * hd..]);
                    let tok = (b * len + t) * d + h * hd;
                    let gate = (b * len + t) * heads + h;
                    let s = head_update(
                        &mut c,
                        n,
                        &mut m,
                        &q.data()[tok..tok + hd],
                        &k.data()[tok..tok + hd],
                        &v.data()[tok..tok + hd],
                        ig.data()[gate],
                        lf.data()[gate],
                        &mut out[tok..tok + hd],
                    );
                    scalars.push(s);
                }
            }
        }
        Ok((
            Tensor::new([batch, len, d], out)?,
            MLstmRecurrence {
                heads,
                snapshots,
                normalizer,
                scalars,
            },
        ))
    }
}

impl Function for MLstmRecurrence {
    fn name(&self) -> &str {
        "mlstm_recurrence"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (q, k, v) = (inputs[0], inputs[1], inputs[2]);
        let &[batch, len, d] = q.shape() else {
            unreachable!("validated in forward")
        };
        let heads = self.heads;
        let hd = d / heads;
        let dd = hd * hd;
        let mut dq = vec![0.0; q.numel()];
        let mut dk = vec![0.0; q.numel()];
        let mut dv = vec![0.0; q.numel()];
        let mut di = vec![0.0; batch * len * heads];
        let mut dlf = vec![0.0; batch * len * heads];
        let mut dc = vec![0.0; dd];
        let mut dn = vec![0.0; hd];
        let nc = num_chunks(len);
        // C_{start}, …, C_{start+16} of the chunk being swept
        let mut chunk = vec![0.0; (SNAPSHOT_INTERVAL + 1) * dd];
        for b in 0..batch {
            for h in 0..heads {
                let chain = b * heads + h;
                let snaps = &self.snapshots[chain * nc * dd..(chain + 1) * nc * dd];
                let nrm = &self.normalizer[chain * (len + 1) * hd..(chain + 1) * (len + 1) * hd];
                dc.fill(0.0);
                dn.fill(0.0);
                for j in (0..nc).rev() {
                    let start = j * SNAPSHOT_INTERVAL;
                    let end = (start + SNAPSHOT_INTERVAL).min(len);
                    chunk[..dd].copy_from_slice(&snaps[j * dd..(j + 1) * dd]);
                    for t in start..end {
                        let s = self.scalars[chain * len + t];
                        let tok = (b * len + t) * d + h * hd;
                        let (done, rest) = chunk.split_at_mut((t - start + 1) * dd);
                        let next = &mut rest[..dd];
                        next.copy_from_slice(&done[(t - start) * dd..]);
                        memory_step(
                            next,
                            &k.data()[tok..tok + hd],
                            &v.data()[tok..tok + hd],
                            s.igate,
                            s.fgate,
                        );
                    }
                    for t in (start..end).rev() {
                        let s = self.scalars[chain * len + t];
                        let c_t = &chunk[(t - start + 1) * dd..(t - start + 2) * dd];
                        let c_prev = &chunk[(t - start) * dd..(t - start + 1) * dd];
                        let n_t = &nrm[(t + 1) * hd..(t + 2) * hd];
                        let n_prev = &nrm[t * hd..(t + 1) * hd];
                        let tok = (b * len + t) * d + h * hd;
                        let gate = (b * len + t) * heads + h;
                        let (qt, kt, vt) = (
                            &q.data()[tok..tok + hd],
                            &k.data()[tok..tok + hd],
                            &v.data()[tok..tok + hd],
                        );
                        let g = &grad.data()[tok..tok + hd];

                        // out = C_t q / denom, denom = max(|n_tᵀ q|, e^{-m_t});
                        // C_t = f'·C_{t-1} + i'·v kᵀ, n_t = f'·n_{t-1} + i'·k.
                        // One pass over the rows of C_t, C_{t-1} and the running
                        // memory gradient, which ends scaled by f' for step t-1.
                        let dqt = &mut dq[tok..tok + hd];
                        let dkt = &mut dk[tok..tok + hd];
                        let dvt = &mut dv[tok..tok + hd];
                        let inv = 1.0 / s.denom;
                        let mut ga = 0.0;
                        let mut d_ig = 0.0;
                        let mut d_fg = 0.0;
                        for r in 0..hd {
                            let row = &c_t[r * hd..(r + 1) * hd];
                            let prev = &c_prev[r * hd..(r + 1) * hd];
                            let dcr = &mut dc[r * hd..(r + 1) * hd];
                            let dar = g[r] * inv;
                            let vr = vt[r];
                            let iv = s.igate * vr;
                            let mut ar = 0.0;
                            let mut dck = 0.0;
                            for ((((dcc, &cc), &pc), dqc), (&qc, (&kc, dkc))) in dcr
                                .iter_mut()
                                .zip(row)
                                .zip(prev)
                                .zip(dqt.iter_mut())
                                .zip(qt.iter().zip(kt.iter().zip(dkt.iter_mut())))
                            {
                                ar += cc * qc;
                                *dqc += cc * dar;
                                let d = *dcc + dar * qc;
                                dck += d * kc;
                                *dkc += iv * d;
                                d_fg += d * pc;
                                *dcc = d * s.fgate;
                            }
                            ga += g[r] * ar;
                            dvt[r] += s.igate * dck;
                            d_ig += vr * dck;
                        }
                        let dden = -ga * inv * inv;
                        let dqn = if s.qn.abs() >= (-s.stabilizer).exp() {
                            dden * s.qn.signum()
                        } else {
                            0.0
                        };
                        for j in 0..hd {
                            dqt[j] += dqn * n_t[j];
                            let dnj = dn[j] + dqn * qt[j];
                            dkt[j] += s.igate * dnj;
                            d_ig += dnj * kt[j];
                            d_fg += dnj * n_prev[j];
                            dn[j] = dnj * s.fgate;
                        }
                        di[gate] = d_ig * s.igate;
                        dlf[gate] = d_fg * s.fgate;
                    }
                }
            }
        }
        let t3 = |data: Vec<f64>, w: usize| Tensor::new([batch, len, w], data).map(Some);
        Ok(vec![
            t3(dq, d)?,
            t3(dk, d)?,
            t3(dv, d)?,
            t3(di, heads)?,
            t3(dlf, heads)?,
        ])
    }
}
