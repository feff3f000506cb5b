//! Convolutions, pooling and resampling over `(batch, channels, h, w)` maps.

use super::tape::{Op, Tape, Var};
use super::{gemm, Layout, Tensor};
use crate::error::{Error, Result};

/// Stride and zero padding shared by both spatial axes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn new(stride: usize, padding: usize) -> Self {
        Conv2dGeom { stride, padding }
    }
}

fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::arg(
            op,
            format!("expected (batch, channels, h, w), got {:?}", t.shape()),
        )),
    }
}

fn conv_out(op: &'static str, size: usize, k: usize, g: Conv2dGeom) -> Result<usize> {
    let padded = size + 2 * g.padding;
    if g.stride == 0 || padded < k {
        return Err(Error::arg(
            op,
            format!(
                "non-positive output extent (size {size}, kernel {k}, stride {}, padding {})",
                g.stride, g.padding
            ),
        ));
    }
    Ok((padded - k) / g.stride + 1)
}

struct Window {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    g: Conv2dGeom,
}

impl Window {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.g.stride == 1 && self.g.padding == 0
    }

    /// `img (c, h, w)` → `cols (c·kh·kw, ho·wo)`.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.ho * self.wo;
        let (s, pad) = (self.g.stride as isize, self.g.padding as isize);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let ii = oi as isize * s - pad + ki as isize;
                        let line = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, d) in line.iter_mut().enumerate() {
                            let jj = oj as isize * s - pad + kj as isize;
                            *d = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates `cols` into `img`.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.ho * self.wo;
        let (s, pad) = (self.g.stride as isize, self.g.padding as isize);
        for c in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oi in 0..self.ho {
                        let ii = oi as isize * s - pad + ki as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let dst = &mut img[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = oj as isize * s - pad + kj as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias(out: &mut [f64], bias: &[f64], spatial: usize) {
    for (chunk, b) in out.chunks_mut(spatial).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn bias_grad(g: &Tensor, channels: usize) -> Tensor {
    let [_, _, h, w] = dims4("bias", g).expect("rank 4");
    let mut db = vec![0.0; channels];
    for (i, chunk) in g.data().chunks(h * w).enumerate() {
        db[i % channels] += chunk.iter().sum::<f64>();
    }
    Tensor {
        shape: vec![channels],
        data: db,
    }
}

fn conv_window(x: &Tensor, w: &Tensor, geom: Conv2dGeom) -> Result<(Window, usize, usize)> {
    let [_, cin, h, wd] = dims4("conv2d", x)?;
    let [cout, wcin, kh, kw] = dims4("conv2d", w)?;
    if cin != wcin {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    let ho = conv_out("conv2d", h, kh, geom)?;
    let wo = conv_out("conv2d", wd, kw, geom)?;
    Ok((
        Window {
            c: cin,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            g: geom,
        },
        cout,
        cin * kh * kw,
    ))
}

pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: Conv2dGeom,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (win, cout, k) = conv_window(x, w, geom).expect("validated in forward");
    let batch = x.shape()[0];
    let (in_sz, p) = (win.c * win.h * win.w, win.ho * win.wo);
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut cols = vec![0.0; k * p];
    let mut dcols = vec![0.0; k * p];
    for b in 0..batch {
        let xb = &x.data()[b * in_sz..(b + 1) * in_sz];
        let gb = &g.data()[b * cout * p..(b + 1) * cout * p];
        let cols: &[f64] = if win.is_pointwise() {
            xb
        } else {
            win.im2col(xb, &mut cols);
            &cols
        };
        gemm(
            cout,
            p,
            k,
            gb,
            Layout::row_major(p),
            cols,
            Layout::transposed(p),
            1.0,
            &mut dw,
        );
        let dxb = &mut dx[b * in_sz..(b + 1) * in_sz];
        if win.is_pointwise() {
            gemm(
                k,
                cout,
                p,
                w.data(),
                Layout::transposed(k),
                gb,
                Layout::row_major(p),
                0.0,
                dxb,
            );
        } else {
            gemm(
                k,
                cout,
                p,
                w.data(),
                Layout::transposed(k),
                gb,
                Layout::row_major(p),
                0.0,
                &mut dcols,
            );
            win.col2im(&dcols, dxb);
        }
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        Tensor {
            shape: w.shape().to_vec(),
            data: dw,
        },
        bias_grad(g, cout),
    )
}

fn convt_window(x: &Tensor, w: &Tensor, geom: Conv2dGeom) -> Result<(Window, usize, usize)> {
    let [_, cin, h, wd] = dims4("conv2d_transpose", x)?;
    let [wcin, cout, kh, kw] = dims4("conv2d_transpose", w)?;
    if cin != wcin {
        return Err(Error::shape("conv2d_transpose", x.shape(), w.shape()));
    }
    let out = |n: usize, k: usize| -> Result<usize> {
        let full = (n.max(1) - 1) * geom.stride + k;
        if n == 0 || geom.stride == 0 || full <= 2 * geom.padding {
            return Err(Error::arg("conv2d_transpose", "non-positive output extent"));
        }
        Ok(full - 2 * geom.padding)
    };
    let (ho, wo) = (out(h, kh)?, out(wd, kw)?);
    // The transposed conv is the adjoint of a conv from (ho, wo) down to (h, w).
    Ok((
        Window {
            c: cout,
            h: ho,
            w: wo,
            kh,
            kw,
            ho: h,
            wo: wd,
            g: geom,
        },
        cin,
        cout * kh * kw,
    ))
}

pub(crate) fn conv_transpose2d_backward(
    x: &Tensor,
    w: &Tensor,
    geom: Conv2dGeom,
    g: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (win, cin, k) = convt_window(x, w, geom).expect("validated in forward");
    let batch = x.shape()[0];
    let p = win.ho * win.wo;
    let out_sz = win.c * win.h * win.w;
    let mut dx = vec![0.0; x.numel()];
    let mut dw = vec![0.0; w.numel()];
    let mut cols = vec![0.0; k * p];
    for b in 0..batch {
        let gb = &g.data()[b * out_sz..(b + 1) * out_sz];
        win.im2col(gb, &mut cols);
        let xb = &x.data()[b * cin * p..(b + 1) * cin * p];
        gemm(
            cin,
            k,
            p,
            w.data(),
            Layout::row_major(k),
            &cols,
            Layout::row_major(p),
            0.0,
            &mut dx[b * cin * p..(b + 1) * cin * p],
        );
        gemm(
            cin,
            p,
            k,
            xb,
            Layout::row_major(p),
            &cols,
            Layout::transposed(p),
            1.0,
            &mut dw,
        );
    }
    (
        Tensor {
            shape: x.shape().to_vec(),
            data: dx,
        },
        Tensor {
            shape: w.shape().to_vec(),
            data: dw,
        },
        bias_grad(g, win.c),
    )
}

pub(crate) fn pad_replicate_backward(shape: &[usize], pad: usize, g: &Tensor) -> Tensor {
    let (h, w) = (shape[2], shape[3]);
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let planes = shape[0] * shape[1];
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let src = &g.data()[pl * hp * wp..(pl + 1) * hp * wp];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for i in 0..hp {
            let si = i.saturating_sub(pad).min(h - 1);
            for j in 0..wp {
                let sj = j.saturating_sub(pad).min(w - 1);
                dst[si * w + sj] += src[i * wp + j];
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: dx,
    }
}

fn adaptive_bins(input: usize, output: usize) -> Vec<(usize, usize)> {
    (0..output)
        .map(|i| ((i * input) / output, ((i + 1) * input).div_ceil(output)))
        .collect()
}

pub(crate) fn adaptive_avgpool2d_backward(shape: &[usize], g: &Tensor) -> Tensor {
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (rows, cols) = (adaptive_bins(h, oh), adaptive_bins(w, ow));
    let planes = shape[0] * shape[1];
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        for (oi, &(r0, r1)) in rows.iter().enumerate() {
            for (oj, &(c0, c1)) in cols.iter().enumerate() {
                let gv = g.data()[(pl * oh + oi) * ow + oj] / ((r1 - r0) * (c1 - c0)) as f64;
                for i in r0..r1 {
                    for j in c0..c1 {
                        dx[(pl * h + i) * w + j] += gv;
                    }
                }
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: dx,
    }
}

/// Source taps for resizing an axis of length `input` to `output` with
/// half-pixel centres and no corner alignment: output index `o` samples
/// `src = max((o + 0.5)·input/output − 0.5, 0)` and blends `i0 = ⌊src⌋` with
/// `i1 = min(i0 + 1, input − 1)` by `λ = src − i0`.
pub fn bilinear_coords(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub(crate) fn bilinear_backward(shape: &[usize], g: &Tensor) -> Tensor {
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (g.shape()[2], g.shape()[3]);
    let (ry, rx) = (bilinear_coords(h, oh), bilinear_coords(w, ow));
    let planes = shape[0] * shape[1];
    let mut dx = vec![0.0; planes * h * w];
    for pl in 0..planes {
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for (oi, &(y0, y1, ly)) in ry.iter().enumerate() {
            for (oj, &(x0, x1, lx)) in rx.iter().enumerate() {
                let gv = g.data()[(pl * oh + oi) * ow + oj];
                let (top, bot) = (gv * (1.0 - ly), gv * ly);
                dst[y0 * w + x0] += top * (1.0 - lx);
                dst[y0 * w + x1] += top * lx;
                dst[y1 * w + x0] += bot * (1.0 - lx);
                dst[y1 * w + x1] += bot * lx;
            }
        }
    }
    Tensor {
        shape: shape.to_vec(),
        data: dx,
    }
}

impl Tape {
    /// 2-D cross-correlation. `w` is `(out, in, kh, kw)`, `b` is `(out)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (win, cout, k) = conv_window(xt, wt, geom)?;
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv2d", wt.shape(), self.value(b).shape()));
            }
        }
        let batch = xt.shape()[0];
        let (in_sz, p) = (win.c * win.h * win.w, win.ho * win.wo);
        let mut out = vec![0.0; batch * cout * p];
        let mut cols = vec![0.0; if win.is_pointwise() { 0 } else { k * p }];
        for bi in 0..batch {
            let xb = &xt.data()[bi * in_sz..(bi + 1) * in_sz];
            let src: &[f64] = if win.is_pointwise() {
                xb
            } else {
                win.im2col(xb, &mut cols);
                &cols
            };
            gemm(
                cout,
                k,
                p,
                wt.data(),
                Layout::row_major(k),
                src,
                Layout::row_major(p),
                0.0,
                &mut out[bi * cout * p..(bi + 1) * cout * p],
            );
        }
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), p);
        }
        let v = Tensor::new([batch, cout, win.ho, win.wo], out)?;
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }))
    }

    /// Transposed convolution (the adjoint of [`Tape::conv2d`]). `w` is
    /// `(in, out, kh, kw)`; output extent is `(n − 1)·stride − 2·padding + k`.
    pub fn conv2d_transpose(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: Conv2dGeom,
    ) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (win, cin, k) = convt_window(xt, wt, geom)?;
        if let Some(b) = b {
            if self.value(b).shape() != [win.c] {
                return Err(Error::shape(
                    "conv2d_transpose",
                    wt.shape(),
                    self.value(b).shape(),
                ));
            }
        }
        let batch = xt.shape()[0];
        let p = win.ho * win.wo;
        let out_sz = win.c * win.h * win.w;
        let mut out = vec![0.0; batch * out_sz];
        let mut cols = vec![0.0; k * p];
        for bi in 0..batch {
            let xb = &xt.data()[bi * cin * p..(bi + 1) * cin * p];
            gemm(
                k,
                cin,
                p,
                wt.data(),
                Layout::transposed(k),
                xb,
                Layout::row_major(p),
                0.0,
                &mut cols,
            );
            win.col2im(&cols, &mut out[bi * out_sz..(bi + 1) * out_sz]);
        }
        if let Some(b) = b {
            add_bias(&mut out, self.value(b).data(), win.h * win.w);
        }
        let v = Tensor::new([batch, win.c, win.h, win.w], out)?;
        Ok(self.push(v, Op::ConvTranspose2d { x, w, b, geom }))
    }

    /// Pad both spatial axes by `pad`, repeating edge values.
    pub fn pad_replicate(&mut self, x: Var, pad: usize) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = dims4("pad_replicate", t)?;
        if h == 0 || w == 0 {
            return Err(Error::arg("pad_replicate", "empty map"));
        }
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let mut out = Vec::with_capacity(b * c * hp * wp);
        for plane in t.data().chunks(h * w) {
            for i in 0..hp {
                let row = &plane[i.saturating_sub(pad).min(h - 1) * w..][..w];
                for j in 0..wp {
                    out.push(row[j.saturating_sub(pad).min(w - 1)]);
                }
            }
        }
        let v = Tensor::new([b, c, hp, wp], out)?;
        Ok(self.push(v, Op::PadReplicate(x, pad)))
    }

    /// Max pooling without padding. In `ceil_mode` a partial trailing window
    /// is kept, so any non-empty map yields at least one output per axis.
    pub fn max_pool2d(
        &mut self,
        x: Var,
        kernel: usize,
        stride: usize,
        ceil_mode: bool,
    ) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = dims4("maxpool2d", t)?;
        let extent = |n: usize| -> Result<usize> {
            if kernel == 0 || stride == 0 || n == 0 || (!ceil_mode && n < kernel) {
                return Err(Error::arg(
                    "maxpool2d",
                    format!("non-positive output extent for size {n}, kernel {kernel}"),
                ));
            }
            if n <= kernel {
                return Ok(1);
            }
            Ok(if ceil_mode {
                (n - kernel).div_ceil(stride) + 1
            } else {
                (n - kernel) / stride + 1
            })
        };
        let (oh, ow) = (extent(h)?, extent(w)?);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for pl in 0..b * c {
            let base = pl * h * w;
            for oi in 0..oh {
                let (r0, r1) = (oi * stride, (oi * stride + kernel).min(h));
                for oj in 0..ow {
                    let (c0, c1) = (oj * stride, (oj * stride + kernel).min(w));
                    let mut best = (f64::NEG_INFINITY, base + r0 * w + c0);
                    for i in r0..r1 {
                        for j in c0..c1 {
                            let idx = base + i * w + j;
                            if t.data()[idx] > best.0 {
                                best = (t.data()[idx], idx);
                            }
                        }
                    }
                    out.push(best.0);
                    argmax.push(best.1);
                }
            }
        }
        let v = Tensor::new([b, c, oh, ow], out)?;
        Ok(self.push(v, Op::MaxPool2d { x, argmax }))
    }

    /// Average over `out_h × out_w` bins spanning `[⌊i·n/out⌋, ⌈(i+1)·n/out⌉)`.
    pub fn adaptive_avg_pool2d(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = dims4("adaptive_avgpool2d", t)?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::arg(
                "adaptive_avgpool2d",
                "map and target must be at least 1×1",
            ));
        }
        let (rows, cols) = (adaptive_bins(h, out_h), adaptive_bins(w, out_w));
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in t.data().chunks(h * w) {
            for &(r0, r1) in &rows {
                for &(c0, c1) in &cols {
                    let mut s = 0.0;
                    for i in r0..r1 {
                        s += plane[i * w + c0..i * w + c1].iter().sum::<f64>();
                    }
                    out.push(s / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        let v = Tensor::new([b, c, out_h, out_w], out)?;
        Ok(self.push(v, Op::AdaptiveAvgPool2d(x)))
    }

    /// Bilinear resize with half-pixel centres (see [`bilinear_coords`]).
    pub fn bilinear_resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let t = self.value(x);
        let [b, c, h, w] = dims4("bilinear_resize", t)?;
        if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
            return Err(Error::arg(
                "bilinear_resize",
                "map and target must be at least 1×1",
            ));
        }
        if (h, w) == (out_h, out_w) {
            let v = t.clone();
            return Ok(self.push(v, Op::Bilinear(x)));
        }
        let (ry, rx) = (bilinear_coords(h, out_h), bilinear_coords(w, out_w));
        let mut out = Vec::with_capacity(b * c * out_h * out_w);
        for plane in t.data().chunks(h * w) {
            for &(y0, y1, ly) in &ry {
                for &(x0, x1, lx) in &rx {
                    let (a, bb) = (plane[y0 * w + x0], plane[y0 * w + x1]);
                    let (cc, d) = (plane[y1 * w + x0], plane[y1 * w + x1]);
                    let top = a + lx * (bb - a);
                    let bot = cc + lx * (d - cc);
                    out.push(top + ly * (bot - top));
                }
            }
        }
        let v = Tensor::new([b, c, out_h, out_w], out)?;
        Ok(self.push(v, Op::Bilinear(x)))
    }
}
