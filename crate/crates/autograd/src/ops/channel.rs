//! Reductions and per-channel operations on `[C, H, W]` values.

use crate::{Tensor, Var};

impl<'t> Var<'t> {
    pub fn sum(self) -> Var<'t> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.op(
            Tensor::scalar(x.sum()),
            vec![self.id],
            Box::new(move |g, _| vec![Some(Tensor::full(shape.clone(), g.item()))]),
        )
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Global spatial average, `[C, H, W] -> [C]`.
    pub fn global_avg_pool(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let pooled: Vec<f64> = x.data().chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.tape.op(
            Tensor::from_vec([c], pooled),
            vec![self.id],
            Box::new(move |g, _| {
                let data = g
                    .data()
                    .iter()
                    .flat_map(|&gc| std::iter::repeat_n(gc / hw as f64, hw))
                    .collect();
                vec![Some(Tensor::from_vec([c, h, w], data))]
            }),
        )
    }

    /// Global spatial maximum, `[C, H, W] -> [C]`. Ties route the gradient to
    /// the first maximal position.
    pub fn global_max_pool(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let mut argmax = Vec::with_capacity(c);
        let mut pooled = Vec::with_capacity(c);
        for (ch, plane) in x.data().chunks(hw).enumerate() {
            let (i, v) = plane.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |best, (i, &v)| if v > best.1 { (i, v) } else { best },
            );
            argmax.push(ch * hw + i);
            pooled.push(v);
        }
        self.tape.op(
            Tensor::from_vec([c], pooled),
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros([c, h, w]);
                for (&idx, &gc) in argmax.iter().zip(g.data()) {
                    dx.data_mut()[idx] += gc;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Scales channel `c` of a `[C, H, W]` value by `gate[c]`.
    pub fn mul_channels(self, gate: Var<'t>) -> Var<'t> {
        let x = self.value();
        let s = gate.value();
        let (c, h, w) = x.dims3();
        assert_eq!(s.shape(), [c], "channel gate must have shape [{c}]");
        let hw = h * w;
        let mut out = x.as_ref().clone();
        for (plane, &sc) in out.data_mut().chunks_mut(hw).zip(s.data()) {
            plane.iter_mut().for_each(|v| *v *= sc);
        }
        self.tape.op(
            out,
            vec![self.id, gate.id],
            Box::new(move |g, mask| {
                let dx = mask[0].then(|| {
                    let mut dx = g.clone();
                    for (plane, &sc) in dx.data_mut().chunks_mut(hw).zip(s.data()) {
                        plane.iter_mut().for_each(|v| *v *= sc);
                    }
                    dx
                });
                let ds = mask[1].then(|| {
                    let data = g
                        .data()
                        .chunks(hw)
                        .zip(x.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::from_vec([c], data)
                });
                vec![dx, ds]
            }),
        )
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn add_channels(self, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let b = bias.value();
        let (c, h, w) = x.dims3();
        assert_eq!(b.shape(), [c], "channel bias must have shape [{c}]");
        let hw = h * w;
        let mut out = x.as_ref().clone();
        for (plane, &bc) in out.data_mut().chunks_mut(hw).zip(b.data()) {
            plane.iter_mut().for_each(|v| *v += bc);
        }
        self.tape.op(
            out,
            vec![self.id, bias.id],
            Box::new(move |g, mask| {
                let db = mask[1].then(|| Tensor::from_vec([c], g.data().chunks(hw).map(|p| p.iter().sum()).collect()));
                vec![mask[0].then(|| g.clone()), db]
            }),
        )
    }

    /// Sum over channels, `[C, H, W] -> [1, H, W]`.
    pub fn sum_channels(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let mut out = vec![0.0; hw];
        for plane in x.data().chunks(hw) {
            out.iter_mut().zip(plane).for_each(|(o, v)| *o += v);
        }
        self.tape.op(
            Tensor::from_vec([1, h, w], out),
            vec![self.id],
            Box::new(move |g, _| {
                let data = (0..c).flat_map(|_| g.data().iter().copied()).collect();
                vec![Some(Tensor::from_vec([c, h, w], data))]
            }),
        )
    }

    /// Per-pixel maximum over channels, `[C, H, W] -> [1, H, W]`.
    pub fn max_channels(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let mut out = vec![f64::NEG_INFINITY; hw];
        let mut arg = vec![0usize; hw];
        for (ch, plane) in x.data().chunks(hw).enumerate() {
            for (i, &v) in plane.iter().enumerate() {
                if v > out[i] {
                    out[i] = v;
                    arg[i] = ch;
                }
            }
        }
        self.tape.op(
            Tensor::from_vec([1, h, w], out),
            vec![self.id],
            Box::new(move |g, _| {
                let mut dx = Tensor::zeros([c, h, w]);
                for (i, (&ch, &gv)) in arg.iter().zip(g.data()).enumerate() {
                    dx.data_mut()[ch * hw + i] = gv;
                }
                vec![Some(dx)]
            }),
        )
    }

    /// Divides every channel of `[C, H, W]` by a `[1, H, W]` map.
    pub fn div_spatial(self, denom: Var<'t>) -> Var<'t> {
        let x = self.value();
        let d = denom.value();
        let (_, h, w) = x.dims3();
        assert_eq!(d.shape(), [1, h, w], "divisor must have shape [1, {h}, {w}]");
        let hw = h * w;
        let mut out = x.as_ref().clone();
        for plane in out.data_mut().chunks_mut(hw) {
            plane.iter_mut().zip(d.data()).for_each(|(v, dv)| *v /= dv);
        }
        self.tape.op(
            out,
            vec![self.id, denom.id],
            Box::new(move |g, mask| {
                let dx = mask[0].then(|| {
                    let mut dx = g.clone();
                    for plane in dx.data_mut().chunks_mut(hw) {
                        plane.iter_mut().zip(d.data()).for_each(|(v, dv)| *v /= dv);
                    }
                    dx
                });
                let dd = mask[1].then(|| {
                    let mut acc = vec![0.0; hw];
                    for (gp, xp) in g.data().chunks(hw).zip(x.data().chunks(hw)) {
                        for i in 0..hw {
                            acc[i] += gp[i] * xp[i];
                        }
                    }
                    for (a, dv) in acc.iter_mut().zip(d.data()) {
                        *a = -*a / (dv * dv);
                    }
                    Tensor::from_vec([1, h, w], acc)
                });
                vec![dx, dd]
            }),
        )
    }

    /// Softmax across channels at every pixel.
    pub fn softmax_channels(self) -> Var<'t> {
        let x = self.value();
        let (c, h, w) = x.dims3();
        let hw = h * w;
        let xd = x.data();
        let mut out = vec![0.0; c * hw];
        for i in 0..hw {
            let m = (0..c).map(|ch| xd[ch * hw + i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (xd[ch * hw + i] - m).exp();
                out[ch * hw + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * hw + i] /= z;
            }
        }
        let y = std::rc::Rc::new(Tensor::from_vec([c, h, w], out));
        let y_kept = std::rc::Rc::clone(&y);
        self.tape.op(
            y,
            vec![self.id],
            Box::new(move |g, _| {
                let yd = y_kept.data();
                let gd = g.data();
                let mut dx = vec![0.0; c * hw];
                for i in 0..hw {
                    let dot: f64 = (0..c).map(|ch| gd[ch * hw + i] * yd[ch * hw + i]).sum();
                    for ch in 0..c {
                        let k = ch * hw + i;
                        dx[k] = yd[k] * (gd[k] - dot);
                    }
                }
                vec![Some(Tensor::from_vec([c, h, w], dx))]
            }),
        )
    }

    /// Affine map of a vector: `weight [O, I] * self [I] + bias [O]`.
    pub fn linear(self, weight: Var<'t>, bias: Var<'t>) -> Var<'t> {
        let x = self.value();
        let wt = weight.value();
        let b = bias.value();
        let (o, i) = match wt.shape() {
            &[o, i] => (o, i),
            s => panic!("linear weight must be rank 2, got {s:?}"),
        };
        assert_eq!(x.shape(), [i], "linear input must have shape [{i}]");
        assert_eq!(b.shape(), [o], "linear bias must have shape [{o}]");
        let out: Vec<f64> = (0..o)
            .map(|r| {
                let row = &wt.data()[r * i..(r + 1) * i];
                row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[r]
            })
            .collect();
        self.tape.op(
            Tensor::from_vec([o], out),
            vec![self.id, weight.id, bias.id],
            Box::new(move |g, mask| {
                let dx = mask[0].then(|| {
                    let mut dx = vec![0.0; i];
                    for (r, &gr) in g.data().iter().enumerate() {
                        let row = &wt.data()[r * i..(r + 1) * i];
                        dx.iter_mut().zip(row).for_each(|(d, w)| *d += gr * w);
                    }
                    Tensor::from_vec([i], dx)
                });
                let dw = mask[1].then(|| {
                    let mut dw = Vec::with_capacity(o * i);
                    for &gr in g.data() {
                        dw.extend(x.data().iter().map(|xv| gr * xv));
                    }
                    Tensor::from_vec([o, i], dw)
                });
                vec![dx, dw, mask[2].then(|| g.clone())]
            }),
        )
    }

    /// Concatenates `[C_k, H, W]` values along the channel axis.
    pub fn concat_channels(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<_> = parts.iter().map(Var::value).collect();
        let (_, h, w) = values[0].dims3();
        let mut sizes = Vec::with_capacity(parts.len());
        let mut data = Vec::new();
        for v in &values {
            let (c, vh, vw) = v.dims3();
            assert_eq!((vh, vw), (h, w), "concat needs equal spatial dims");
            sizes.push(c * h * w);
            data.extend_from_slice(v.data());
        }
        let total_c = data.len() / (h * w);
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        tape.op(
            Tensor::from_vec([total_c, h, w], data),
            parts.iter().map(|p| p.id).collect(),
            Box::new(move |g, mask| {
                let mut offset = 0;
                sizes
                    .iter()
                    .zip(&shapes)
                    .zip(mask)
                    .map(|((&n, shape), &wanted)| {
                        let piece =
                            wanted.then(|| Tensor::from_vec(shape.clone(), g.data()[offset..offset + n].to_vec()));
                        offset += n;
                        piece
                    })
                    .collect()
            }),
        )
    }
}
