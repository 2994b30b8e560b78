use super::broadcast::{broadcast_shape, reduce_to, zip_with};
use super::{Ctx, Var};
use crate::error::Result;
use crate::tensor::{Real, Tensor};

fn unary<T: Real>(x: &Var<T>, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<T> {
    let out = x.value().map(f);
    Var::from_op(out, vec![x.clone()], move |g, y, ps| {
        let xv = ps[0].value();
        let data = g.data().iter().zip(xv.data()).zip(y.data()).map(|((&g, &x), &y)| g * df(x, y)).collect();
        vec![Some(Tensor::from_vec(xv.shape().to_vec(), data))]
    })
}

/// Elementwise op gated by a per-element branch decision.
fn piecewise<T: Real>(
    ctx: &Ctx<T>,
    x: &Var<T>,
    branch: impl Fn(T) -> bool,
    f: impl Fn(T, bool) -> T,
    df: impl Fn(T, bool) -> T + 'static,
) -> Var<T> {
    let xv = x.value();
    let mask = ctx.decide(xv.numel(), || xv.data().iter().map(|&v| branch(v)).collect());
    let data = xv.data().iter().zip(&mask).map(|(&v, &m)| f(v, m)).collect();
    let out = Tensor::from_vec(xv.shape().to_vec(), data);
    Var::from_op(out, vec![x.clone()], move |g, _, ps| {
        let xv = ps[0].value();
        let data = g.data().iter().zip(xv.data()).zip(&mask).map(|((&g, &x), &m)| g * df(x, m)).collect();
        vec![Some(Tensor::from_vec(xv.shape().to_vec(), data))]
    })
}

impl<T: Real> Var<T> {
    pub fn add(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = zip_with("add", self.value(), other.value(), |a, b| a + b)?;
        Ok(Var::from_op(out, vec![self.clone(), other.clone()], |g, _, ps| {
            let (a, b) = (ps[0].shape(), ps[1].shape());
            vec![
                ps[0].requires_grad().then(|| reduce_to(g, a, b, |_, _| T::one())),
                ps[1].requires_grad().then(|| reduce_to(g, b, a, |_, _| T::one())),
            ]
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = zip_with("sub", self.value(), other.value(), |a, b| a - b)?;
        Ok(Var::from_op(out, vec![self.clone(), other.clone()], |g, _, ps| {
            let (a, b) = (ps[0].shape(), ps[1].shape());
            vec![
                ps[0].requires_grad().then(|| reduce_to(g, a, b, |_, _| T::one())),
                ps[1].requires_grad().then(|| reduce_to(g, b, a, |_, _| -T::one())),
            ]
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = zip_with("mul", self.value(), other.value(), |a, b| a * b)?;
        Ok(Var::from_op(out, vec![self.clone(), other.clone()], |g, _, ps| {
            let (a, b) = (ps[0].value(), ps[1].value());
            vec![
                ps[0].requires_grad().then(|| reduce_to(g, a.shape(), b.shape(), |_, ib| b.data()[ib])),
                ps[1].requires_grad().then(|| reduce_to(g, b.shape(), a.shape(), |_, ia| a.data()[ia])),
            ]
        }))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Var<T>> {
        let out = zip_with("div", self.value(), other.value(), |a, b| a / b)?;
        Ok(Var::from_op(out, vec![self.clone(), other.clone()], |g, _, ps| {
            let (a, b) = (ps[0].value(), ps[1].value());
            let shape = broadcast_shape("div", a.shape(), b.shape()).expect("checked in forward");
            let mut ga = None;
            if ps[0].requires_grad() {
                ga = Some(reduce_to(g, a.shape(), b.shape(), |_, ib| T::one() / b.data()[ib]));
            }
            let mut gb = None;
            if ps[1].requires_grad() {
                // d(a/b)/db = -a/b^2; walk the output with a's offsets alongside.
                let mut acc = vec![T::zero(); b.numel()];
                super::broadcast::for_each2(&shape, a.shape(), b.shape(), |i, ia, ib| {
                    let bv = b.data()[ib];
                    acc[ib] -= g.data()[i] * a.data()[ia] / (bv * bv);
                });
                gb = Some(Tensor::from_vec(b.shape().to_vec(), acc));
            }
            vec![ga, gb]
        }))
    }

    pub fn neg(&self) -> Var<T> {
        self.scale(-T::one())
    }

    pub fn scale(&self, c: T) -> Var<T> {
        unary(self, move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: T) -> Var<T> {
        unary(self, move |x| x + c, |_, _| T::one())
    }

    pub fn square(&self) -> Var<T> {
        unary(self, |x| x * x, |x, _| x + x)
    }

    pub fn ln(&self) -> Var<T> {
        unary(self, |x| x.ln(), |x, _| T::one() / x)
    }

    /// `max(x, floor)`; gradient passes where `x > floor`.
    pub fn clamp_min(&self, floor: T) -> Var<T> {
        unary(self, move |x| x.max(floor), move |x, _| if x > floor { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Var<T> {
        unary(self, sigmoid, |_, y| y * (T::one() - y))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<T> {
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt2pi = T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let half = T::lit(0.5);
        unary(
            self,
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                cdf + x * inv_sqrt2pi * (-half * x * x).exp()
            },
        )
    }

    /// ELU with alpha = 1.
    pub fn elu(&self) -> Var<T> {
        unary(
            self,
            |x| if x > T::zero() { x } else { x.exp() - T::one() },
            |x, y| if x > T::zero() { T::one() } else { y + T::one() },
        )
    }

    pub fn sum(&self) -> Var<T> {
        let out = Tensor::scalar(self.value().sum());
        Var::from_op(out, vec![self.clone()], |g, _, ps| {
            vec![Some(Tensor::full(ps[0].shape().to_vec(), g.item()))]
        })
    }

    pub fn mean(&self) -> Var<T> {
        let n = T::lit(self.value().numel() as f64);
        self.sum().scale(T::one() / n)
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Ctx<T> {
    pub fn relu(&self, x: &Var<T>) -> Var<T> {
        piecewise(
            self,
            x,
            |v| v > T::zero(),
            |v, on| if on { v } else { T::zero() },
            |_, on| if on { T::one() } else { T::zero() },
        )
    }

    pub fn abs(&self, x: &Var<T>) -> Var<T> {
        piecewise(
            self,
            x,
            |v| v >= T::zero(),
            |v, pos| if pos { v } else { -v },
            |_, pos| if pos { T::one() } else { -T::one() },
        )
    }

    /// Clamp to `[0, 1]`; gradient passes strictly inside the interval.
    pub fn clamp_unit(&self, x: &Var<T>) -> Var<T> {
        let inside = |v: T| v > T::zero() && v < T::one();
        piecewise(
            self,
            x,
            inside,
            |v, ins| if ins { v } else { v.max(T::zero()).min(T::one()) },
            |_, ins| if ins { T::one() } else { T::zero() },
        )
    }
}
