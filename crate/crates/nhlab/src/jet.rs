//! Truncated Taylor series and first-order dual numbers.
//!
//! `Taylor<T>` is a univariate series with coefficients in any `Real`, so
//! `Taylor<Taylor<f64>>` is a bivariate jet and `Taylor<Dual2>` a jet in one
//! variable carrying first derivatives in two parameters. Both implement
//! `Real`, which lets the integrator run on them unchanged.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::numerics::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Taylor<T> {
    pub c: Vec<T>,
}

impl<T: Real> Taylor<T> {
    pub fn constant(x: T, order: usize) -> Self {
        let z = x.zero();
        let mut c = vec![z; order + 1];
        c[0] = x;
        Taylor { c }
    }
    /// x₀ + t.
    pub fn variable(x0: T, order: usize) -> Self {
        let mut j = Self::constant(x0, order);
        if order >= 1 {
            j.c[1] = j.c[0].one();
        }
        j
    }
    pub fn from_coeffs(c: Vec<T>) -> Self {
        assert!(!c.is_empty());
        Taylor { c }
    }
    pub fn order(&self) -> usize {
        self.c.len() - 1
    }
    pub fn value(&self) -> &T {
        &self.c[0]
    }
    pub fn eval(&self, t: &T) -> T {
        let mut acc = self.c[self.order()].clone();
        for k in (0..self.order()).rev() {
            acc = acc * t.clone() + self.c[k].clone();
        }
        acc
    }
    pub fn derivative_at(&self, t: &T) -> T {
        let mut acc = t.zero();
        for k in (1..=self.order()).rev() {
            acc = acc * t.clone() + self.c[k].clone() * (k as f64);
        }
        acc
    }
    fn map(&self, f: impl Fn(&T) -> T) -> Self {
        Taylor { c: self.c.iter().map(f).collect() }
    }
    fn zeros_like(&self) -> Vec<T> {
        vec![self.c[0].zero(); self.c.len()]
    }
    fn recip(&self) -> Self {
        let n = self.c.len();
        let mut q = self.zeros_like();
        q[0] = self.c[0].one() / self.c[0].clone();
        for k in 1..n {
            let mut acc = self.c[0].zero();
            for j in 1..=k {
                acc += self.c[j].clone() * q[k - j].clone();
            }
            q[k] = -(acc * q[0].clone());
        }
        Taylor { c: q }
    }
    fn integrate_from(&self, c0: T) -> Self {
        let n = self.c.len();
        let mut out = self.zeros_like();
        out[0] = c0;
        for k in 1..n {
            out[k] = self.c[k - 1].clone() / (k as f64);
        }
        Taylor { c: out }
    }
    fn deriv(&self) -> Self {
        let n = self.c.len();
        let mut out = self.zeros_like();
        for k in 1..n {
            out[k - 1] = self.c[k].clone() * (k as f64);
        }
        Taylor { c: out }
    }
}

impl<T: Real> Add for Taylor<T> {
    type Output = Self;
    fn add(mut self, o: Self) -> Self {
        for (a, b) in self.c.iter_mut().zip(o.c) {
            *a += b;
        }
        self
    }
}
impl<T: Real> Sub for Taylor<T> {
    type Output = Self;
    fn sub(mut self, o: Self) -> Self {
        for (a, b) in self.c.iter_mut().zip(o.c) {
            *a -= b;
        }
        self
    }
}
impl<T: Real> Mul for Taylor<T> {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let n = self.c.len();
        let mut out = self.zeros_like();
        for i in 0..n {
            for j in 0..(n - i) {
                out[i + j] += self.c[i].clone() * o.c[j].clone();
            }
        }
        Taylor { c: out }
    }
}
impl<T: Real> Div for Taylor<T> {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        self * o.recip()
    }
}
impl<T: Real> Neg for Taylor<T> {
    type Output = Self;
    fn neg(self) -> Self {
        self.map(|x| -x.clone())
    }
}
impl<T: Real> Add<f64> for Taylor<T> {
    type Output = Self;
    fn add(mut self, o: f64) -> Self {
        self.c[0] = self.c[0].clone() + o;
        self
    }
}
impl<T: Real> Sub<f64> for Taylor<T> {
    type Output = Self;
    fn sub(mut self, o: f64) -> Self {
        self.c[0] = self.c[0].clone() - o;
        self
    }
}
impl<T: Real> Mul<f64> for Taylor<T> {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        self.map(|x| x.clone() * o)
    }
}
impl<T: Real> Div<f64> for Taylor<T> {
    type Output = Self;
    fn div(self, o: f64) -> Self {
        self.map(|x| x.clone() / o)
    }
}
impl<T: Real> AddAssign for Taylor<T> {
    fn add_assign(&mut self, o: Self) {
        for (a, b) in self.c.iter_mut().zip(o.c) {
            *a += b;
        }
    }
}
impl<T: Real> SubAssign for Taylor<T> {
    fn sub_assign(&mut self, o: Self) {
        for (a, b) in self.c.iter_mut().zip(o.c) {
            *a -= b;
        }
    }
}
impl<T: Real> MulAssign for Taylor<T> {
    fn mul_assign(&mut self, o: Self) {
        *self = self.clone() * o;
    }
}
impl<T: Real> PartialOrd for Taylor<T> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        self.c[0].partial_cmp(&o.c[0])
    }
}

impl<T: Real> Real for Taylor<T> {
    fn lift(&self, x: f64) -> Self {
        Taylor::constant(self.c[0].lift(x), self.order())
    }
    fn to_f64(&self) -> f64 {
        self.c[0].to_f64()
    }
    fn prec(&self) -> u32 {
        self.c[0].prec()
    }
    fn sin(&self) -> Self {
        self.sin_cos().0
    }
    fn cos(&self) -> Self {
        self.sin_cos().1
    }
    fn sin_cos(&self) -> (Self, Self) {
        let n = self.c.len();
        let mut s = self.zeros_like();
        let mut c = self.zeros_like();
        let (s0, c0) = self.c[0].sin_cos();
        s[0] = s0;
        c[0] = c0;
        for k in 1..n {
            let mut as_ = self.c[0].zero();
            let mut ac = self.c[0].zero();
            for j in 1..=k {
                let jf = self.c[j].clone() * (j as f64);
                as_ += jf.clone() * c[k - j].clone();
                ac += jf * s[k - j].clone();
            }
            s[k] = as_ / (k as f64);
            c[k] = -(ac / (k as f64));
        }
        (Taylor { c: s }, Taylor { c })
    }
    fn sqrt(&self) -> Self {
        let n = self.c.len();
        let mut g = self.zeros_like();
        g[0] = self.c[0].sqrt();
        for k in 1..n {
            let mut acc = self.c[k].clone();
            for j in 1..k {
                acc -= g[j].clone() * g[k - j].clone();
            }
            g[k] = acc / (g[0].clone() * 2.0);
        }
        Taylor { c: g }
    }
    fn exp(&self) -> Self {
        let n = self.c.len();
        let mut e = self.zeros_like();
        e[0] = self.c[0].exp();
        for k in 1..n {
            let mut acc = self.c[0].zero();
            for j in 1..=k {
                acc += self.c[j].clone() * (j as f64) * e[k - j].clone();
            }
            e[k] = acc / (k as f64);
        }
        Taylor { c: e }
    }
    fn ln(&self) -> Self {
        (self.deriv() * self.recip()).integrate_from(self.c[0].ln())
    }
    fn atan(&self) -> Self {
        let den = self.clone() * self.clone() + 1.0;
        (self.deriv() * den.recip()).integrate_from(self.c[0].atan())
    }
    fn tanh(&self) -> Self {
        let e2 = (self.clone() * 2.0).exp();
        -((e2 + 1.0).recip() * 2.0) + 1.0
    }
    fn cosh(&self) -> Self {
        let e = self.exp();
        (e.clone() + e.recip()) / 2.0
    }
    fn abs(&self) -> Self {
        if self.c[0] < self.c[0].zero() {
            -self.clone()
        } else {
            self.clone()
        }
    }
    fn floor(&self) -> Self {
        self.lift(0.0) + self.c[0].floor().to_f64()
    }
    fn pi(&self) -> Self {
        Taylor::constant(self.c[0].pi(), self.order())
    }
}

/// Value with first derivatives in two parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual2 {
    pub v: f64,
    pub d: [f64; 2],
}

impl Dual2 {
    pub fn new(v: f64, d: [f64; 2]) -> Self {
        Dual2 { v, d }
    }
    pub fn cst(v: f64) -> Self {
        Dual2 { v, d: [0.0; 2] }
    }
    fn chain(self, f: f64, df: f64) -> Self {
        Dual2 { v: f, d: [df * self.d[0], df * self.d[1]] }
    }
}

impl Add for Dual2 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Dual2 { v: self.v + o.v, d: [self.d[0] + o.d[0], self.d[1] + o.d[1]] }
    }
}
impl Sub for Dual2 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Dual2 { v: self.v - o.v, d: [self.d[0] - o.d[0], self.d[1] - o.d[1]] }
    }
}
impl Mul for Dual2 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Dual2 {
            v: self.v * o.v,
            d: [self.d[0] * o.v + self.v * o.d[0], self.d[1] * o.v + self.v * o.d[1]],
        }
    }
}
impl Div for Dual2 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let q = self.v / o.v;
        Dual2 { v: q, d: [(self.d[0] - q * o.d[0]) / o.v, (self.d[1] - q * o.d[1]) / o.v] }
    }
}
impl Neg for Dual2 {
    type Output = Self;
    fn neg(self) -> Self {
        Dual2 { v: -self.v, d: [-self.d[0], -self.d[1]] }
    }
}
impl Add<f64> for Dual2 {
    type Output = Self;
    fn add(self, o: f64) -> Self {
        Dual2 { v: self.v + o, ..self }
    }
}
impl Sub<f64> for Dual2 {
    type Output = Self;
    fn sub(self, o: f64) -> Self {
        Dual2 { v: self.v - o, ..self }
    }
}
impl Mul<f64> for Dual2 {
    type Output = Self;
    fn mul(self, o: f64) -> Self {
        Dual2 { v: self.v * o, d: [self.d[0] * o, self.d[1] * o] }
    }
}
impl Div<f64> for Dual2 {
    type Output = Self;
    fn div(self, o: f64) -> Self {
        Dual2 { v: self.v / o, d: [self.d[0] / o, self.d[1] / o] }
    }
}
impl AddAssign for Dual2 {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}
impl SubAssign for Dual2 {
    fn sub_assign(&mut self, o: Self) {
        *self = *self - o;
    }
}
impl MulAssign for Dual2 {
    fn mul_assign(&mut self, o: Self) {
        *self = *self * o;
    }
}
impl PartialOrd for Dual2 {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        self.v.partial_cmp(&o.v)
    }
}

impl Real for Dual2 {
    fn lift(&self, x: f64) -> Self {
        Dual2::cst(x)
    }
    fn to_f64(&self) -> f64 {
        self.v
    }
    fn prec(&self) -> u32 {
        53
    }
    fn sin(&self) -> Self {
        self.chain(self.v.sin(), self.v.cos())
    }
    fn cos(&self) -> Self {
        self.chain(self.v.cos(), -self.v.sin())
    }
    fn sin_cos(&self) -> (Self, Self) {
        let (s, c) = self.v.sin_cos();
        (self.chain(s, c), self.chain(c, -s))
    }
    fn sqrt(&self) -> Self {
        let r = self.v.sqrt();
        self.chain(r, 0.5 / r)
    }
    fn exp(&self) -> Self {
        let e = self.v.exp();
        self.chain(e, e)
    }
    fn ln(&self) -> Self {
        self.chain(self.v.ln(), 1.0 / self.v)
    }
    fn atan(&self) -> Self {
        self.chain(self.v.atan(), 1.0 / (1.0 + self.v * self.v))
    }
    fn tanh(&self) -> Self {
        let t = self.v.tanh();
        self.chain(t, 1.0 - t * t)
    }
    fn cosh(&self) -> Self {
        self.chain(self.v.cosh(), self.v.sinh())
    }
    fn abs(&self) -> Self {
        if self.v < 0.0 {
            -*self
        } else {
            *self
        }
    }
    fn floor(&self) -> Self {
        Dual2::cst(self.v.floor())
    }
    fn pi(&self) -> Self {
        Dual2::cst(std::f64::consts::PI)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sin_cos_series() {
        let t = Taylor::variable(0.3f64, 6);
        let (s, c) = t.sin_cos();
        // derivatives of sin at 0.3 divided by k!
        let d = [0.3f64.sin(), 0.3f64.cos(), -0.3f64.sin() / 2.0, -0.3f64.cos() / 6.0];
        for k in 0..4 {
            assert!((s.c[k] - d[k]).abs() < 1e-15);
        }
        let one = s.clone() * s + c.clone() * c;
        assert!((one.c[0] - 1.0).abs() < 1e-15);
        for k in 1..=6 {
            assert!(one.c[k].abs() < 1e-15);
        }
    }

    #[test]
    fn elementary_series_roundtrip() {
        let t = Taylor::variable(0.7f64, 8);
        let e = t.exp().ln();
        let q = t.sqrt() * t.sqrt();
        let a = (t.atan().sin() / t.atan().cos()).c.clone();
        for k in 0..=8 {
            assert!((e.c[k] - t.c[k]).abs() < 1e-13);
            assert!((q.c[k] - t.c[k]).abs() < 1e-13);
            assert!((a[k] - t.c[k]).abs() < 1e-12);
        }
        let th = t.tanh();
        let ch = t.cosh();
        assert!((th.c[0] - 0.7f64.tanh()).abs() < 1e-15);
        assert!((th.c[1] - 1.0 / 0.7f64.cosh().powi(2)).abs() < 1e-14);
        assert!((ch.c[1] - 0.7f64.sinh()).abs() < 1e-14);
    }

    #[test]
    fn nested_gives_bivariate() {
        // f(s,u) = sin(s + 2u) has coefficient of s·u equal to -2 sin(0)... = -2·sin(0)/1 = 0 at 0; use offset
        let s = Taylor::constant(Taylor::variable(0.2f64, 3), 3);
        let u = Taylor::variable(Taylor::constant(0.0f64, 3), 3);
        let f = (s + u * 2.0).sin();
        // ∂s∂u f = -2 sin(0.2)
        assert!((f.c[1].c[1] + 2.0 * 0.2f64.sin()).abs() < 1e-14);
    }

    #[test]
    fn dual_derivatives() {
        let x = Dual2::new(0.4, [1.0, 0.0]);
        let y = Dual2::new(1.3, [0.0, 1.0]);
        let f = (x * y).sin() / y.exp();
        let h = 1e-6;
        let g = |a: f64, b: f64| (a * b).sin() / b.exp();
        assert!((f.d[0] - (g(0.4 + h, 1.3) - g(0.4 - h, 1.3)) / (2.0 * h)).abs() < 1e-9);
        assert!((f.d[1] - (g(0.4, 1.3 + h) - g(0.4, 1.3 - h)) / (2.0 * h)).abs() < 1e-9);
    }
}
