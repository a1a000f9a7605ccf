use super::conv::out_extent;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(
        op: &'static str,
        input: &[usize],
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::dim(op, format!("input must be [N,C,H,W], got {input:?}")));
        }
        if k == 0 || stride == 0 || padding >= k {
            return Err(Error::dim(
                op,
                format!("kernel {k}, stride {stride}, padding {padding} is not a valid window"),
            ));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let oh = out_extent(h, k, stride, padding, 1)
            .ok_or_else(|| Error::dim(op, format!("height (axis 2) = {h} smaller than window")))?;
        let ow = out_extent(w, k, stride, padding, 1)
            .ok_or_else(|| Error::dim(op, format!("width (axis 3) = {w} smaller than window")))?;
        Ok(PoolGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            padding,
            oh,
            ow,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }

    /// Clamped input ranges `[y0, y1) × [x0, x1)` covered by output `(oy, ox)`.
    #[inline]
    fn window(&self, oy: usize, ox: usize) -> (usize, usize, usize, usize) {
        let y = (oy * self.stride) as isize - self.padding as isize;
        let x = (ox * self.stride) as isize - self.padding as isize;
        let y0 = y.max(0) as usize;
        let x0 = x.max(0) as usize;
        let y1 = ((y + self.k as isize) as usize).min(self.h);
        let x1 = ((x + self.k as isize) as usize).min(self.w);
        (y0, y1, x0, x1)
    }
}

/// Returns the pooled values and, per output, the flat input index of the max.
pub(crate) fn max_forward(g: &PoolGeom, x: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let mut best = f32::NEG_INFINITY;
                let mut best_i = base + y0 * g.w + x0;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        let i = base + y * g.w + xx;
                        if x[i] > best {
                            best = x[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (out, arg)
}

/// Window mean over in-bounds elements only; padding is not in the divisor.
pub(crate) fn avg_forward(g: &PoolGeom, x: &[f32]) -> Vec<f32> {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let mut s = 0.0f32;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        s += x[base + y * g.w + xx];
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f32);
            }
        }
    }
    out
}

pub(crate) fn avg_backward(g: &PoolGeom, dy: &[f32], dx: &mut [f32]) {
    let planes = g.n * g.c;
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let (y0, y1, x0, x1) = g.window(oy, ox);
                let share = dy[(p * g.oh + oy) * g.ow + ox] / ((y1 - y0) * (x1 - x0)) as f32;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dx[base + y * g.w + xx] += share;
                    }
                }
            }
        }
    }
}
