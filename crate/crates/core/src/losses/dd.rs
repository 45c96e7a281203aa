//! Double-double arithmetic (an unevaluated sum `hi + lo` of two `f64`s,
//! about 106 significant bits).
//!
//! Only what the finite-difference reference evaluator needs: the four
//! operations, `sqrt`, `exp`, `ln` and `softplus`.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Dd {
    hi: f64,
    lo: f64,
}

const LN2: Dd = Dd { hi: std::f64::consts::LN_2, lo: 2.319_046_813_846_299_6e-17 };

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    #[inline]
    pub fn from_f64(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    #[inline]
    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    #[inline]
    fn ldexp(self, k: i32) -> Dd {
        let s = 2f64.powi(k);
        Dd { hi: self.hi * s, lo: self.lo * s }
    }

    pub fn abs(self) -> Dd {
        if self.hi < 0.0 {
            -self
        } else {
            self
        }
    }

    pub fn max(self, other: Dd) -> Dd {
        if self >= other {
            self
        } else {
            other
        }
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let s = self.hi.sqrt();
        let s_dd = Dd::from_f64(s);
        // One Newton step from the f64 root doubles the precision.
        s_dd + (self - s_dd * s_dd) / Dd::from_f64(2.0 * s)
    }

    pub fn exp(self) -> Dd {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        const SQUARINGS: i32 = 10;
        let k = (self.hi / LN2.hi).round();
        let r = (self - LN2 * Dd::from_f64(k)).ldexp(-SQUARINGS);
        // expm1(r) by Taylor series; |r| < 3.4e-4 so a handful of terms is enough.
        let mut term = r;
        let mut sum = r;
        let mut n = 2.0;
        while term.hi.abs() > 1e-36 * sum.hi.abs().max(1e-300) {
            term = term * r / Dd::from_f64(n);
            sum = sum + term;
            n += 1.0;
        }
        // expm1(2x) = expm1(x) * (2 + expm1(x))
        for _ in 0..SQUARINGS {
            sum = sum * (Dd::from_f64(2.0) + sum);
        }
        (Dd::ONE + sum).ldexp(k as i32)
    }

    pub fn ln(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::from_f64(f64::NAN);
        }
        let mut y = Dd::from_f64(self.hi.ln());
        // Newton on exp(y) = x, quadratic convergence.
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn softplus(self) -> Dd {
        let pos = self.max(Dd::ZERO);
        pos + (Dd::ONE + (-self.abs()).exp()).ln()
    }
}

impl Add for Dd {
    type Output = Dd;
    #[inline]
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;
    #[inline]
    fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    #[inline]
    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;
    #[inline]
    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    #[inline]
    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Dd) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi) {
            Some(Ordering::Equal) => self.lo.partial_cmp(&o.lo),
            ord => ord,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_keeps_the_low_word() {
        let one = Dd::ONE;
        let tiny = Dd::from_f64(1e-20);
        let x = one + tiny;
        assert_eq!((x - one).to_f64(), 1e-20);
        let third = one / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0) - one;
        assert!(back.to_f64().abs() < 1e-31);
    }

    #[test]
    fn exp_ln_round_trip() {
        for &x in &[-30.0, -1.5, -1e-7, 0.0, 1e-9, 0.5, 1.0, 12.25, 300.0] {
            let d = Dd::from_f64(x);
            let back = d.exp().ln();
            assert!((back - d).to_f64().abs() <= 1e-29 * x.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn exp_agrees_with_f64() {
        for &x in &[-20.0, -0.3, 0.7, 5.0, 40.0] {
            let e = Dd::from_f64(x).exp().to_f64();
            assert!((e - x.exp()).abs() <= 4.0 * f64::EPSILON * x.exp());
        }
        // e = 2.718281828459045 + 1.4456468917292502e-16
        let e = Dd::ONE.exp();
        assert_eq!(e.hi, std::f64::consts::E);
        assert!((e.lo - 1.445_646_891_729_250_2e-16).abs() < 1e-30);
    }

    #[test]
    fn sqrt_squares_back() {
        let two = Dd::from_f64(2.0);
        let r = two.sqrt();
        assert!((r * r - two).to_f64().abs() < 1e-31);
    }

    #[test]
    fn softplus_matches_f64() {
        for &x in &[-40.0, -2.0, 0.0, 3.0, 50.0] {
            let v = Dd::from_f64(x).softplus().to_f64();
            assert!((v - crate::losses::softplus(x)).abs() <= 1e-15 * (1.0 + v.abs()));
        }
    }
}
