use std::ops::{Add, Div, Mul, Neg, Sub};
use std::rc::Rc;

use crate::{Tensor, Var};

/// Elementwise combination where either side may be a single value.
fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if b.numel() == 1 {
        let s = b.data()[0];
        a.map(|v| f(v, s))
    } else if a.numel() == 1 {
        let s = a.data()[0];
        b.map(|v| f(s, v))
    } else {
        panic!(
            "incompatible shapes {:?} and {:?} (only single-value broadcasting is supported)",
            a.shape(),
            b.shape()
        )
    }
}

/// Sums a broadcast gradient back down to `target`'s shape.
fn reduce_like(grad: Tensor, target: &Tensor) -> Tensor {
    if grad.shape() == target.shape() {
        grad
    } else {
        Tensor::from_vec(target.shape().to_vec(), vec![grad.sum()])
    }
}

impl<'t> Var<'t> {
    fn binary(
        self,
        other: Var<'t>,
        f: impl Fn(f64, f64) -> f64,
        grads: impl Fn(&Tensor, &Tensor, &Tensor, &[bool]) -> (Option<Tensor>, Option<Tensor>) + 'static,
    ) -> Var<'t> {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
        let a = self.value();
        let b = other.value();
        let out = zip_broadcast(&a, &b, f);
        self.tape.op(
            out,
            vec![self.id, other.id],
            Box::new(move |g, mask| {
                let (ga, gb) = grads(g, &a, &b, mask);
                vec![ga.map(|t| reduce_like(t, &a)), gb.map(|t| reduce_like(t, &b))]
            }),
        )
    }

    pub(crate) fn unary(
        self,
        f: impl Fn(f64) -> f64,
        grad: impl Fn(&Tensor, &Tensor, &Tensor) -> Tensor + 'static,
    ) -> Var<'t> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let y_kept = Rc::clone(&y);
        self.tape
            .op(y, vec![self.id], Box::new(move |g, _| vec![Some(grad(g, &x, &y_kept))]))
    }

    fn add_var(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a + b,
            |g, _, _, m| (m[0].then(|| g.clone()), m[1].then(|| g.clone())),
        )
    }

    fn sub_var(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a - b,
            |g, _, _, m| (m[0].then(|| g.clone()), m[1].then(|| g.scale(-1.0))),
        )
    }

    fn mul_var(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a * b,
            |g, a, b, m| {
                (
                    m[0].then(|| zip_broadcast(g, b, |g, b| g * b)),
                    m[1].then(|| zip_broadcast(g, a, |g, a| g * a)),
                )
            },
        )
    }

    fn div_var(self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| a / b,
            |g, a, b, m| {
                let ga = m[0].then(|| zip_broadcast(g, b, |g, b| g / b));
                let gb = m[1].then(|| {
                    let q = zip_broadcast(a, b, |a, b| a / (b * b));
                    zip_broadcast(g, &q, |g, q| -g * q)
                });
                (ga, gb)
            },
        )
    }

    fn neg_var(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.unary(move |v| v * factor, move |g, _, _| g.scale(factor))
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        self.unary(move |v| v + offset, |g, _, _| g.clone())
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(
            |v| 1.0 / (1.0 + (-v).exp()),
            |g, _, y| g.zip_map(y, |g, y| g * y * (1.0 - y)),
        )
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(f64::tanh, |g, _, y| g.zip_map(y, |g, y| g * (1.0 - y * y)))
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(
            |v| v.max(0.0),
            |g, x, _| g.zip_map(x, |g, x| if x > 0.0 { g } else { 0.0 }),
        )
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(f64::exp, |g, _, y| g.zip_map(y, |g, y| g * y))
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(f64::ln, |g, x, _| g.zip_map(x, |g, x| g / x))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(f64::sqrt, |g, _, y| g.zip_map(y, |g, y| 0.5 * g / y))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(|v| v * v, |g, x, _| g.zip_map(x, |g, x| 2.0 * g * x))
    }

    /// `|x|`; the subgradient at zero is taken as zero.
    pub fn abs(self) -> Var<'t> {
        self.unary(f64::abs, |g, x, _| {
            g.zip_map(x, |g, x| {
                if x > 0.0 {
                    g
                } else if x < 0.0 {
                    -g
                } else {
                    0.0
                }
            })
        })
    }

    /// `x^p` for a fixed real exponent; meant for non-negative bases.
    pub fn powf(self, p: f64) -> Var<'t> {
        self.unary(
            move |v| v.powf(p),
            move |g, x, _| {
                g.zip_map(x, |g, x| {
                    if p == 1.0 {
                        g
                    } else if x == 0.0 {
                        if p > 1.0 {
                            0.0
                        } else {
                            f64::INFINITY * g
                        }
                    } else {
                        g * p * x.powf(p - 1.0)
                    }
                })
            },
        )
    }

    /// Clamp to `[lo, hi]`; gradient passes only where the input is inside.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(
            move |v| v.clamp(lo, hi),
            move |g, x, _| g.zip_map(x, |g, x| if (lo..=hi).contains(&x) { g } else { 0.0 }),
        )
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.add_var(rhs)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.sub_var(rhs)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.mul_var(rhs)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.div_var(rhs)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.neg_var()
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Var<'t> {
        self.add_scalar(rhs)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Var<'t> {
        self.add_scalar(-rhs)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Var<'t> {
        self.scale(rhs)
    }
}
