//! 2-D convolution via im2col and `dgemm`.

use crate::{Tensor, Var};

/// Stride, zero padding and dilation of a square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Default for ConvOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
        }
    }
}

impl ConvOptions {
    /// Stride 1 with the padding that keeps spatial dims for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn strided(kernel: usize, stride: usize) -> Self {
        Self {
            stride,
            padding: (kernel - 1) / 2,
            dilation: 1,
        }
    }

    fn out_len(&self, input: usize, kernel: usize) -> usize {
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        assert!(padded >= span, "kernel span {span} exceeds padded input {padded}");
        (padded - span) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    opts: ConvOptions,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.opts.stride == 1 && self.opts.padding == 0
    }

    /// For each output coordinate along one axis, the input coordinate read by
    /// kernel tap `k`, or `None` when it falls in the zero padding.
    fn source(&self, out: usize, k: usize, len: usize) -> Option<usize> {
        let pos = (out * self.opts.stride + k * self.opts.dilation) as isize - self.opts.padding as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut cols = vec![0.0; self.rows() * n];
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let src = &plane[iy * self.w..(iy + 1) * self.w];
                        let out_row = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                *o = src[ix];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let n = self.cols();
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for ci in 0..self.cin {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let Some(iy) = self.source(oy, ky, self.h) else {
                            continue;
                        };
                        let dst = &mut plane[iy * self.w..(iy + 1) * self.w];
                        let in_row = &src[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, &v) in in_row.iter().enumerate() {
                            if let Some(ix) = self.source(ox, kx, self.w) {
                                dst[ix] += v;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Row-major `c[m, n] = a[m, k] * b[k, n]` with optional transposes given as
/// strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
) {
    assert!(c.len() >= m * n);
    // SAFETY: every index visited is bounded by the asserted slice lengths for
    // the given strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    /// Cross-correlation of a `[Cin, H, W]` input with `[Cout, Cin, kh, kw]`
    /// weights, zero padded, plus an optional `[Cout]` bias.
    pub fn conv2d(self, weight: Var<'t>, bias: Option<Var<'t>>, opts: ConvOptions) -> Var<'t> {
        let x = self.value();
        let wt = weight.value();
        let (cin, h, w) = x.dims3();
        let (cout, kh, kw) = match *wt.shape() {
            [co, ci, kh, kw] => {
                assert_eq!(ci, cin, "conv weight expects {ci} input channels, got {cin}");
                (co, kh, kw)
            }
            ref s => panic!("conv weight must be [Cout, Cin, kh, kw], got {s:?}"),
        };
        let geo = Geometry {
            cin,
            h,
            w,
            kh,
            kw,
            oh: opts.out_len(h, kh),
            ow: opts.out_len(w, kw),
            opts,
        };
        let (k, n) = (geo.rows(), geo.cols());

        let mut out = vec![0.0; cout * n];
        if geo.is_pointwise() {
            gemm(cout, k, n, wt.data(), (k, 1), x.data(), (n, 1), &mut out);
        } else {
            let cols = geo.im2col(x.data());
            gemm(cout, k, n, wt.data(), (k, 1), &cols, (n, 1), &mut out);
        }
        let b = bias.map(|b| b.value());
        if let Some(b) = &b {
            assert_eq!(b.shape(), [cout], "conv bias must have shape [{cout}]");
            for (plane, &bc) in out.chunks_mut(n).zip(b.data()) {
                plane.iter_mut().for_each(|v| *v += bc);
            }
        }

        let mut parents = vec![self.id, weight.id];
        if let Some(bv) = bias {
            parents.push(bv.id);
        }
        let has_bias = b.is_some();
        self.tape.op(
            Tensor::from_vec([cout, geo.oh, geo.ow], out),
            parents,
            Box::new(move |g, mask| {
                let gd = g.data();
                let dx = mask[0].then(|| {
                    let mut dcols = vec![0.0; k * n];
                    // W^T [k, cout] * g [cout, n]
                    gemm(k, cout, n, wt.data(), (1, k), gd, (n, 1), &mut dcols);
                    let data = if geo.is_pointwise() { dcols } else { geo.col2im(&dcols) };
                    Tensor::from_vec([cin, h, w], data)
                });
                let dw = mask[1].then(|| {
                    let mut dw = vec![0.0; cout * k];
                    // g [cout, n] * cols^T [n, k]
                    if geo.is_pointwise() {
                        gemm(cout, n, k, gd, (n, 1), x.data(), (1, n), &mut dw);
                    } else {
                        let cols = geo.im2col(x.data());
                        gemm(cout, n, k, gd, (n, 1), &cols, (1, n), &mut dw);
                    }
                    Tensor::from_vec([cout, cin, kh, kw], dw)
                });
                let mut grads = vec![dx, dw];
                if has_bias {
                    grads.push(
                        mask[2].then(|| Tensor::from_vec([cout], gd.chunks(n).map(|p| p.iter().sum()).collect())),
                    );
                }
                grads
            }),
        )
    }
}
