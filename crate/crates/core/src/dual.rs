//! Forward-mode dual numbers for the closed-form point losses.
//!
//! The set loss is a sum of per-prediction terms, each depending on that
//! prediction's five fields only, so a five-component dual gives the exact
//! gradient in a single pass.

use std::ops::{Add, Div, Mul, Neg, Sub};

pub(crate) trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn cst(v: f64) -> Self;
    fn val(self) -> f64;
    fn ln(self) -> Self;

    fn abs(self) -> Self {
        if self.val() < 0.0 {
            -self
        } else {
            self
        }
    }

    fn max(self, other: Self) -> Self {
        if self.val() >= other.val() {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.val() <= other.val() {
            self
        } else {
            other
        }
    }
}

impl Real for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn val(self) -> f64 {
        self
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
}

pub(crate) const DUAL_WIDTH: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub v: f64,
    pub d: [f64; DUAL_WIDTH],
}

impl Dual {
    /// Seeds the `k`-th independent variable.
    pub fn var(v: f64, k: usize) -> Self {
        let mut d = [0.0; DUAL_WIDTH];
        d[k] = 1.0;
        Dual { v, d }
    }

    fn map(self, v: f64, scale: f64) -> Self {
        Dual {
            v,
            d: self.d.map(|x| x * scale),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (x, y) in d.iter_mut().zip(o.d) {
            *x += y;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        self + (-o)
    }
}

impl Neg for Dual {
    type Output = Dual;
    fn neg(self) -> Dual {
        self.map(-self.v, -1.0)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; DUAL_WIDTH];
        for (k, x) in d.iter_mut().enumerate() {
            *x = self.d[k] * o.v + self.v * o.d[k];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let mut d = [0.0; DUAL_WIDTH];
        for (k, x) in d.iter_mut().enumerate() {
            *x = (self.d[k] - self.v * inv * o.d[k]) * inv;
        }
        Dual { v: self.v * inv, d }
    }
}

impl Real for Dual {
    fn cst(v: f64) -> Self {
        Dual {
            v,
            d: [0.0; DUAL_WIDTH],
        }
    }
    fn val(self) -> f64 {
        self.v
    }
    fn ln(self) -> Self {
        self.map(self.v.ln(), 1.0 / self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quotient_rule() {
        let x = Dual::var(2.0, 0);
        let y = Dual::var(3.0, 1);
        let q = x * x / y;
        assert!((q.v - 4.0 / 3.0).abs() < 1e-15);
        assert!((q.d[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((q.d[1] + 4.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn log_and_abs() {
        let x = Dual::var(-0.5, 2);
        let a = x.abs();
        assert_eq!(a.d[2], -1.0);
        let l = a.ln();
        assert!((l.d[2] + 2.0).abs() < 1e-15);
    }
}
