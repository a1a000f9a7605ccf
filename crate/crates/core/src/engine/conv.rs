//! Cross-correlation kernels used by [`Tape::conv2d`](super::Tape::conv2d).
//!
//! Dense and grouped convolutions lower to im2col + sgemm per image and
//! group. Depthwise convolutions (one input and one output channel per group)
//! take a direct loop, which is much cheaper than a degenerate GEMM.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvConfig {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvConfig {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        ConvConfig {
            stride,
            padding,
            dilation,
            groups,
        }
    }
}

impl Default for ConvConfig {
    fn default() -> Self {
        ConvConfig::new(1, 0, 1, 1)
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub cfg: ConvConfig,
}

/// Output extent of one spatial axis, or `None` when the window does not fit.
pub(crate) fn out_extent(
    size: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * padding;
    if padded < span || stride == 0 {
        return None;
    }
    Some((padded - span) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], cfg: ConvConfig) -> Result<Self> {
        let op = "conv2d";
        if input.len() != 4 {
            return Err(Error::dim(op, format!("input must be [N,C,H,W], got {input:?}")));
        }
        if weight.len() != 4 {
            return Err(Error::dim(
                op,
                format!("weight must be [C_out,C_in/groups,kH,kW], got {weight:?}"),
            ));
        }
        if cfg.groups == 0 || cfg.stride == 0 || cfg.dilation == 0 {
            return Err(Error::dim(op, "stride, dilation and groups must be positive"));
        }
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, cg, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if c_in % cfg.groups != 0 {
            return Err(Error::dim(
                op,
                format!("input channels (axis 1) = {c_in} not divisible by groups = {}", cfg.groups),
            ));
        }
        if c_out % cfg.groups != 0 {
            return Err(Error::dim(
                op,
                format!("output channels (weight axis 0) = {c_out} not divisible by groups = {}", cfg.groups),
            ));
        }
        if cg != c_in / cfg.groups {
            return Err(Error::dim(
                op,
                format!(
                    "weight axis 1 = {cg} but input axis 1 / groups = {}",
                    c_in / cfg.groups
                ),
            ));
        }
        let oh = out_extent(h, kh, cfg.stride, cfg.padding, cfg.dilation).ok_or_else(|| {
            Error::dim(op, format!("input height (axis 2) = {h} too small for kernel height {kh}"))
        })?;
        let ow = out_extent(w, kw, cfg.stride, cfg.padding, cfg.dilation).ok_or_else(|| {
            Error::dim(op, format!("input width (axis 3) = {w} too small for kernel width {kw}"))
        })?;
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            oh,
            ow,
            cfg,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c_out, self.oh, self.ow]
    }

    fn cin_g(&self) -> usize {
        self.c_in / self.cfg.groups
    }

    fn cout_g(&self) -> usize {
        self.c_out / self.cfg.groups
    }

    fn depthwise(&self) -> bool {
        self.cin_g() == 1 && self.cout_g() == 1
    }

    /// 1×1, stride 1, no padding: the input plane already is the column matrix.
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.cfg.stride == 1 && self.cfg.padding == 0
    }

    fn col_rows(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }
}

/// C (m×n) = A (m×k) · B (k×n) + beta·C, with optional transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are at least as long as the strided extents above.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn im2col(g: &ConvGeom, plane: &[f32], col: &mut [f32]) {
    let ConvConfig {
        stride,
        padding,
        dilation,
        ..
    } = g.cfg;
    let p = g.oh * g.ow;
    for ci in 0..g.cin_g() {
        let src = &plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * stride + i * dilation) as isize - padding as isize;
                    let out = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let line = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * stride + j * dilation) as isize - padding as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f32], plane: &mut [f32]) {
    let ConvConfig {
        stride,
        padding,
        dilation,
        ..
    } = g.cfg;
    let p = g.oh * g.ow;
    for ci in 0..g.cin_g() {
        let dst = &mut plane[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (ci * g.kh + i) * g.kw + j;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let iy = (oy * stride + i * dilation) as isize - padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * stride + j * dilation) as isize - padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Calls `f(out_index, in_index)` for every valid tap of a depthwise window.
#[inline]
fn depthwise_taps(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let ConvConfig {
        stride,
        padding,
        dilation,
        ..
    } = g.cfg;
    for i in 0..g.kh {
        for j in 0..g.kw {
            let tap = i * g.kw + j;
            for oy in 0..g.oh {
                let iy = (oy * stride + i * dilation) as isize - padding as isize;
                if iy < 0 || iy >= g.h as isize {
                    continue;
                }
                let iy = iy as usize;
                for ox in 0..g.ow {
                    let ix = (ox * stride + j * dilation) as isize - padding as isize;
                    if ix < 0 || ix >= g.w as isize {
                        continue;
                    }
                    f(tap, oy * g.ow + ox, iy * g.w + ix as usize);
                }
            }
        }
    }
}

pub(crate) fn forward(g: &ConvGeom, x: &[f32], w: &[f32]) -> Vec<f32> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0f32; g.n * g.c_out * out_plane];
    if g.depthwise() {
        let taps = g.kh * g.kw;
        for n in 0..g.n {
            for c in 0..g.c_in {
                let src = &x[(n * g.c_in + c) * in_plane..][..in_plane];
                let dst = &mut out[(n * g.c_out + c) * out_plane..][..out_plane];
                let wk = &w[c * taps..(c + 1) * taps];
                depthwise_taps(g, |t, o, i| dst[o] += wk[t] * src[i]);
            }
        }
        return out;
    }
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; k * out_plane]
    };
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let plane = &x[(n * g.c_in + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dst = &mut out[(n * g.c_out + grp * cout_g) * out_plane..][..cout_g * out_plane];
            let b = if g.pointwise() {
                plane
            } else {
                im2col(g, plane, &mut col);
                &col
            };
            gemm(cout_g, k, out_plane, wg, false, b, false, dst, 0.0);
        }
    }
    out
}

pub(crate) fn backward_input(g: &ConvGeom, dy: &[f32], w: &[f32], dx: &mut [f32]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    if g.depthwise() {
        let taps = g.kh * g.kw;
        for n in 0..g.n {
            for c in 0..g.c_in {
                let src = &dy[(n * g.c_out + c) * out_plane..][..out_plane];
                let dst = &mut dx[(n * g.c_in + c) * in_plane..][..in_plane];
                let wk = &w[c * taps..(c + 1) * taps];
                depthwise_taps(g, |t, o, i| dst[i] += wk[t] * src[o]);
            }
        }
        return;
    }
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut col = vec![0.0f32; k * out_plane];
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let wg = &w[grp * cout_g * k..(grp + 1) * cout_g * k];
            let dyg = &dy[(n * g.c_out + grp * cout_g) * out_plane..][..cout_g * out_plane];
            let plane = &mut dx[(n * g.c_in + grp * cin_g) * in_plane..][..cin_g * in_plane];
            if g.pointwise() {
                gemm(k, cout_g, out_plane, wg, true, dyg, false, plane, 1.0);
            } else {
                gemm(k, cout_g, out_plane, wg, true, dyg, false, &mut col, 0.0);
                col2im(g, &col, plane);
            }
        }
    }
}

pub(crate) fn backward_weight(g: &ConvGeom, dy: &[f32], x: &[f32], dw: &mut [f32]) {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    if g.depthwise() {
        let taps = g.kh * g.kw;
        for n in 0..g.n {
            for c in 0..g.c_in {
                let src = &x[(n * g.c_in + c) * in_plane..][..in_plane];
                let gy = &dy[(n * g.c_out + c) * out_plane..][..out_plane];
                let dk = &mut dw[c * taps..(c + 1) * taps];
                depthwise_taps(g, |t, o, i| dk[t] += gy[o] * src[i]);
            }
        }
        return;
    }
    let (cin_g, cout_g, k) = (g.cin_g(), g.cout_g(), g.col_rows());
    let mut col = if g.pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; k * out_plane]
    };
    for n in 0..g.n {
        for grp in 0..g.cfg.groups {
            let plane = &x[(n * g.c_in + grp * cin_g) * in_plane..][..cin_g * in_plane];
            let dyg = &dy[(n * g.c_out + grp * cout_g) * out_plane..][..cout_g * out_plane];
            let dwg = &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k];
            let b = if g.pointwise() {
                plane
            } else {
                im2col(g, plane, &mut col);
                &col
            };
            gemm(cout_g, out_plane, k, dyg, false, b, true, dwg, 1.0);
        }
    }
}
