//! Fixed-point reals on top of `BigInt`, 256 fractional bits. Slow and
//! simple; only used as a reference for the f64 code under test.

use std::ops::{Add, Mul, Neg, Sub};

use num_bigint::BigInt;

const FRAC: u32 = 256;

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Hp(BigInt);

impl Hp {
    pub fn zero() -> Self {
        Hp(BigInt::from(0))
    }

    pub fn int(v: i64) -> Self {
        Hp(BigInt::from(v) << FRAC)
    }

    /// Exact conversion of a finite double.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite());
        if x == 0.0 {
            return Self::zero();
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exp = ((bits >> 52) & 0x7ff) as i64;
        let frac = bits & ((1u64 << 52) - 1);
        let (mant, e) = if exp == 0 {
            (frac, -1074)
        } else {
            (frac | (1u64 << 52), exp - 1075)
        };
        let m = BigInt::from(mant) * sign;
        let shift = e + FRAC as i64;
        if shift >= 0 {
            Hp(m << shift as usize)
        } else {
            Hp(m >> (-shift) as usize)
        }
    }

    pub fn to_f64(&self) -> f64 {
        let neg = self.0.sign() == num_bigint::Sign::Minus;
        let mag = if neg { -self.0.clone() } else { self.0.clone() };
        let bits = mag.bits();
        let shift = bits.saturating_sub(62);
        let top = i64::try_from(mag >> shift as usize).unwrap() as f64;
        let v = top * 2f64.powi(shift as i32 - FRAC as i32);
        if neg {
            -v
        } else {
            v
        }
    }

    pub fn is_positive(&self) -> bool {
        self.0.sign() == num_bigint::Sign::Plus
    }

    pub fn div(&self, other: &Hp) -> Hp {
        Hp((&self.0 << FRAC) / &other.0)
    }

    pub fn sqrt(&self) -> Hp {
        assert!(!(self.0.sign() == num_bigint::Sign::Minus));
        Hp((&self.0 << FRAC).sqrt())
    }

    fn ln2() -> Hp {
        atanh_series(&Hp::int(1).div(&Hp::int(3))) * Hp::int(2)
    }

    pub fn ln(&self) -> Hp {
        assert!(self.is_positive(), "ln of a non-positive value");
        // x = 2^k · y with y in [1, 2)
        let k = self.0.bits() as i64 - FRAC as i64 - 1;
        let y = if k >= 0 {
            Hp(&self.0 >> k as usize)
        } else {
            Hp(&self.0 << (-k) as usize)
        };
        let one = Hp::int(1);
        let z = (y.clone() - one.clone()).div(&(y + one));
        atanh_series(&z) * Hp::int(2) + Hp::ln2() * Hp::int(k)
    }

    pub fn exp(&self) -> Hp {
        let ln2 = Hp::ln2();
        let k = (self.to_f64() / std::f64::consts::LN_2).round() as i64;
        let r = self.clone() - ln2 * Hp::int(k);
        let mut term = Hp::int(1);
        let mut sum = Hp::int(1);
        for n in 1..400 {
            term = (term * r.clone()).div(&Hp::int(n));
            if term.0.bits() == 0 {
                break;
            }
            sum = sum + term.clone();
        }
        if k >= 0 {
            Hp(sum.0 << k as usize)
        } else {
            Hp(sum.0 >> (-k) as usize)
        }
    }

    pub fn powf(&self, e: &Hp) -> Hp {
        (e.clone() * self.ln()).exp()
    }
}

fn atanh_series(z: &Hp) -> Hp {
    let z2 = z.clone() * z.clone();
    let mut pow = z.clone();
    let mut sum = Hp::zero();
    let mut n = 1i64;
    while pow.0.bits() > 0 {
        sum = sum + pow.div(&Hp::int(n));
        pow = pow * z2.clone();
        n += 2;
    }
    sum
}

impl Add for Hp {
    type Output = Hp;
    fn add(self, o: Hp) -> Hp {
        Hp(self.0 + o.0)
    }
}

impl Sub for Hp {
    type Output = Hp;
    fn sub(self, o: Hp) -> Hp {
        Hp(self.0 - o.0)
    }
}

impl Mul for Hp {
    type Output = Hp;
    fn mul(self, o: Hp) -> Hp {
        Hp((self.0 * o.0) >> FRAC)
    }
}

impl Neg for Hp {
    type Output = Hp;
    fn neg(self) -> Hp {
        Hp(-self.0)
    }
}

pub fn sum(values: impl IntoIterator<Item = Hp>) -> Hp {
    values.into_iter().fold(Hp::zero(), |a, b| a + b)
}
