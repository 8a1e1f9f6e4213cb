//! Spatial resampling, pooling and fixed filtering of `[C, H, W]` values.

use std::rc::Rc;

use crate::{Tensor, Var};

/// Mirror index without repeating the edge (`dcb|abcd|cba`), valid for any
/// offset.
pub fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Per-axis bilinear taps with half-pixel centres (`align_corners = false`).
fn bilinear_taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl<'t> Var<'t> {
    /// Gathers `out[c, y, x] = in[c, rows[y], cols[x]]`.
    ///
    /// Gradients scatter-add back, so repeated source indices (reflection
    /// padding) accumulate.
    pub fn remap_spatial(self, rows: Vec<usize>, cols: Vec<usize>) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let (oh, ow) = (rows.len(), cols.len());
        assert!(
            rows.iter().all(|&r| r < h) && cols.iter().all(|&q| q < w),
            "remap index out of range"
        );
        let mut out = Vec::with_capacity(c * oh * ow);
        for plane in x.data().chunks(h * w) {
            for &r in &rows {
                out.extend(cols.iter().map(|&q| plane[r * w + q]));
            }
        }
        self.tape.op(
            Tensor::from_vec([c, oh, ow], out),
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    for (y, &r) in rows.iter().enumerate() {
                        for (xx, &q) in cols.iter().enumerate() {
                            dplane[r * w + q] += gplane[y * ow + xx];
                        }
                    }
                }
                vec![Some(Tensor::from_vec([c, h, w], dx))]
            }),
        )
    }

    /// Reflection padding by the given margins.
    pub fn pad_reflect(self, top: usize, bottom: usize, left: usize, right: usize) -> Var<'t> {
        let (_, h, w) = self.value().dims3();
        let rows = (0..h + top + bottom)
            .map(|y| reflect_index(y as isize - top as isize, h))
            .collect();
        let cols = (0..w + left + right)
            .map(|x| reflect_index(x as isize - left as isize, w))
            .collect();
        self.remap_spatial(rows, cols)
    }

    /// Spatial window `[y0, y0 + height) x [x0, x0 + width)`.
    pub fn crop(self, y0: usize, x0: usize, height: usize, width: usize) -> Var<'t> {
        self.remap_spatial((y0..y0 + height).collect(), (x0..x0 + width).collect())
    }

    /// Bilinear resize with half-pixel centres and no antialiasing.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let ty = bilinear_taps(h, out_h);
        let tx = bilinear_taps(w, out_w);
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for plane in x.data().chunks(h * w) {
            for &(y0, y1, ly) in &ty {
                for &(x0, x1, lx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - lx) + plane[y0 * w + x1] * lx;
                    let bot = plane[y1 * w + x0] * (1.0 - lx) + plane[y1 * w + x1] * lx;
                    out.push(top * (1.0 - ly) + bot * ly);
                }
            }
        }
        self.tape.op(
            Tensor::from_vec([c, out_h, out_w], out),
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(out_h * out_w)) {
                    for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                            let gv = gplane[oy * out_w + ox];
                            dplane[y0 * w + x0] += gv * (1.0 - ly) * (1.0 - lx);
                            dplane[y0 * w + x1] += gv * (1.0 - ly) * lx;
                            dplane[y1 * w + x0] += gv * ly * (1.0 - lx);
                            dplane[y1 * w + x1] += gv * ly * lx;
                        }
                    }
                }
                vec![Some(Tensor::from_vec([c, h, w], dx))]
            }),
        )
    }

    /// Max pooling with a square window; padded cells never win.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let oh = (h + 2 * padding - kernel) / stride + 1;
        let ow = (w + 2 * padding - kernel) / stride + 1;
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut arg = Vec::with_capacity(c * oh * ow);
        for (ch, plane) in x.data().chunks(h * w).enumerate() {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = (usize::MAX, f64::NEG_INFINITY);
                    for ky in 0..kernel {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kernel {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = iy as usize * w + ix as usize;
                            if plane[idx] > best.1 {
                                best = (idx, plane[idx]);
                            }
                        }
                    }
                    out.push(best.1);
                    arg.push(ch * h * w + best.0);
                }
            }
        }
        self.tape.op(
            Tensor::from_vec([c, oh, ow], out),
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                for (&i, &gv) in arg.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                vec![Some(Tensor::from_vec([c, h, w], dx))]
            }),
        )
    }

    /// Separable filtering of every channel with a fixed 1-D kernel, applied
    /// along rows then columns, keeping only positions where the window fits.
    pub fn filter_valid_separable(self, kernel: Rc<Vec<f64>>) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let k = kernel.len();
        assert!(h >= k && w >= k, "{h}x{w} input is smaller than the {k}-tap window");
        let (oh, ow) = (h - k + 1, w - k + 1);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut tmp = vec![0.0; h * ow];
        for plane in x.data().chunks(h * w) {
            for y in 0..h {
                let row = &plane[y * w..(y + 1) * w];
                for xo in 0..ow {
                    tmp[y * ow + xo] = kernel.iter().zip(&row[xo..xo + k]).map(|(a, b)| a * b).sum();
                }
            }
            for yo in 0..oh {
                for xo in 0..ow {
                    out.push((0..k).map(|i| kernel[i] * tmp[(yo + i) * ow + xo]).sum());
                }
            }
        }
        self.tape.op(
            Tensor::from_vec([c, oh, ow], out),
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = vec![0.0; c * h * w];
                let mut gtmp = vec![0.0; h * ow];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(oh * ow)) {
                    gtmp.iter_mut().for_each(|v| *v = 0.0);
                    for yo in 0..oh {
                        for xo in 0..ow {
                            let gv = gplane[yo * ow + xo];
                            for (i, kv) in kernel.iter().enumerate() {
                                gtmp[(yo + i) * ow + xo] += kv * gv;
                            }
                        }
                    }
                    for y in 0..h {
                        for xo in 0..ow {
                            let gv = gtmp[y * ow + xo];
                            for (j, kv) in kernel.iter().enumerate() {
                                dplane[y * w + xo + j] += kv * gv;
                            }
                        }
                    }
                }
                vec![Some(Tensor::from_vec([c, h, w], dx))]
            }),
        )
    }
}
