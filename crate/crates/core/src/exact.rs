//! Exact floating-point summation.
//!
//! [`ExactSum`] keeps a list of non-overlapping partials whose exact sum is
//! the exact sum of everything added (Shewchuk's algorithm, as in Python's
//! `math.fsum`). Its rounded value depends only on that exact sum, never on
//! the order of additions.

#[derive(Debug, Clone, Default)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn clear(&mut self) {
        self.partials.clear();
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    /// Adds `a·b` exactly (barring underflow) via an error-free product.
    pub fn add_product(&mut self, a: f64, b: f64) {
        let p = a * b;
        let e = a.mul_add(b, -p);
        self.add(p);
        if e != 0.0 {
            self.add(e);
        }
    }

    /// The exact sum, correctly rounded to nearest-even.
    pub fn value(&self) -> f64 {
        let p = &self.partials;
        let mut n = p.len();
        if n == 0 {
            return 0.0;
        }
        n -= 1;
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            let x = hi;
            n -= 1;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

pub fn fsum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut s = ExactSum::new();
    values.into_iter().for_each(|v| s.add(v));
    s.value()
}

/// `Σ wᵢ·xᵢ / Σ wᵢ` for non-negative integer weights, evaluated from the
/// exact numerator and rounded (to within one ulp of correct rounding) in a
/// way that depends only on the multiset of `(wᵢ, xᵢ)` pairs. If every `xᵢ`
/// equals `x`, the result is exactly `x`.
pub fn weighted_mean(pairs: impl IntoIterator<Item = (u64, f64)>) -> f64 {
    let mut num = ExactSum::new();
    let mut total = 0u64;
    for (w, x) in pairs {
        num.add_product(w as f64, x);
        total += w;
    }
    let d = total as f64;
    let q0 = num.value() / d;
    // residual S - q0·D, exactly, then one correction step
    num.add_product(-q0, d);
    q0 + num.value() / d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cancellation() {
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum([0.1; 10]), 1.0);
        assert_eq!(fsum(std::iter::empty()), 0.0);
    }

    #[test]
    fn weighted_mean_cases() {
        assert_eq!(weighted_mean([(3, 0.1), (5, 0.1), (7, 0.1)]), 0.1);
        assert_eq!(weighted_mean([(1, 1.0), (1, 2.0)]), 1.5);
    }

    proptest! {
        #[test]
        fn order_independent(v in prop::collection::vec((1u64..10_000, -1e3f64..1e3), 1..12), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut w = v.clone();
            w.shuffle(&mut crate::rng::stream(seed, &[]));
            prop_assert_eq!(weighted_mean(v.iter().copied()).to_bits(), weighted_mean(w.iter().copied()).to_bits());
        }

        #[test]
        fn fixed_point(x in -1e6f64..1e6, ws in prop::collection::vec(1u64..100_000, 1..20)) {
            prop_assert_eq!(weighted_mean(ws.iter().map(|&w| (w, x))).to_bits(), x.to_bits());
        }
    }
}
