//! Deterministic f64 elementary functions.
//!
//! `exp`, `ln`, `sin` and `cos` routed through system libm are not
//! guaranteed bit-identical across platforms, which would break the
//! engine's reproducibility contract. These implementations use only
//! IEEE add/mul/div on fixed polynomial coefficients, so results match
//! bit for bit everywhere. Accuracy is ~1e-14 relative, far tighter
//! than any tolerance in this crate.

const LN2_HI: f64 = 6.931_471_803_691_238_16e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_70e-10;
const LN2: f64 = std::f64::consts::LN_2;
const FRAC_PI_2_HI: f64 = 1.570_796_326_794_896_56;
const FRAC_PI_2_LO: f64 = 6.123_233_995_736_766e-17;

/// x * 2^k without libm, valid for any k that keeps the result finite
/// or flushes it to zero.
fn scale_pow2(x: f64, mut k: i64) -> f64 {
    fn pow2(k: i64) -> f64 {
        debug_assert!((-1022..=1023).contains(&k));
        f64::from_bits(((1023 + k) as u64) << 52)
    }
    let mut y = x;
    while k > 900 {
        y *= pow2(900);
        k -= 900;
    }
    while k < -900 {
        y *= pow2(-900);
        k += 900;
    }
    y * pow2(k)
}

/// e^x. Underflows to 0 below ~-745, saturates to +inf above ~709.
pub fn exp(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x > 709.8 {
        return f64::INFINITY;
    }
    if x < -746.0 {
        return 0.0;
    }
    // Reduce: x = k*ln2 + r with |r| <= ln2/2, two-part constant for
    // the subtraction.
    let k = (x / LN2).round();
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // Taylor series of e^r, Horner form; |r| <= 0.347 so degree 12
    // truncation error is ~4e-16.
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0
                    + r * (1.0 / 24.0
                        + r * (1.0 / 120.0
                            + r * (1.0 / 720.0
                                + r * (1.0 / 5040.0
                                    + r * (1.0 / 40320.0
                                        + r * (1.0 / 362880.0
                                            + r * (1.0 / 3628800.0
                                                + r * (1.0 / 39916800.0
                                                    + r * (1.0 / 479001600.0))))))))))));
    scale_pow2(p, k as i64)
}

/// Natural log for x > 0. Returns -inf at 0, NaN for negatives.
pub fn ln(x: f64) -> f64 {
    if x.is_nan() || x < 0.0 {
        return f64::NAN;
    }
    if x == 0.0 {
        return f64::NEG_INFINITY;
    }
    if x == f64::INFINITY {
        return f64::INFINITY;
    }
    // Normalize subnormals so the exponent field is usable.
    let (x, pre) = if x < f64::MIN_POSITIVE {
        (x * scale_pow2(1.0, 54), -54i64)
    } else {
        (x, 0)
    };
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7FF) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000F_FFFF_FFFF_FFFF) | (1023u64 << 52));
    // Keep the mantissa in [sqrt(1/2), sqrt(2)) so |t| stays small.
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    // ln(m) = 2 atanh(t), t = (m-1)/(m+1), |t| <= 0.1716.
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    let series = t
        * (2.0
            + t2 * (2.0 / 3.0
                + t2 * (2.0 / 5.0
                    + t2 * (2.0 / 7.0
                        + t2 * (2.0 / 9.0
                            + t2 * (2.0 / 11.0 + t2 * (2.0 / 13.0 + t2 * (2.0 / 15.0))))))));
    let e = e + pre;
    (e as f64) * LN2_HI + ((e as f64) * LN2_LO + series)
}

/// sin(r) for |r| <= pi/4 via Taylor series.
fn sin_poly(r: f64) -> f64 {
    let r2 = r * r;
    r * (1.0
        + r2 * (-1.0 / 6.0
            + r2 * (1.0 / 120.0
                + r2 * (-1.0 / 5040.0
                    + r2 * (1.0 / 362880.0
                        + r2 * (-1.0 / 39916800.0 + r2 * (1.0 / 6227020800.0)))))))
}

/// cos(r) for |r| <= pi/4 via Taylor series.
fn cos_poly(r: f64) -> f64 {
    let r2 = r * r;
    1.0 + r2
        * (-0.5
            + r2 * (1.0 / 24.0
                + r2 * (-1.0 / 720.0
                    + r2 * (1.0 / 40320.0
                        + r2 * (-1.0 / 3628800.0 + r2 * (1.0 / 479001600.0))))))
}

fn reduce_quadrant(x: f64) -> (i64, f64) {
    let n = (x / FRAC_PI_2_HI).round();
    let r = (x - n * FRAC_PI_2_HI) - n * FRAC_PI_2_LO;
    (n as i64, r)
}

/// sin(x). Intended argument range is |x| <= ~1e6 (embedding phases);
/// the two-part reduction stays accurate there.
pub fn sin(x: f64) -> f64 {
    if !x.is_finite() {
        return f64::NAN;
    }
    let (n, r) = reduce_quadrant(x);
    match n.rem_euclid(4) {
        0 => sin_poly(r),
        1 => cos_poly(r),
        2 => -sin_poly(r),
        _ => -cos_poly(r),
    }
}

/// cos(x), same argument range as [`sin`].
pub fn cos(x: f64) -> f64 {
    if !x.is_finite() {
        return f64::NAN;
    }
    let (n, r) = reduce_quadrant(x);
    match n.rem_euclid(4) {
        0 => cos_poly(r),
        1 => -sin_poly(r),
        2 => -cos_poly(r),
        _ => sin_poly(r),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_matches_libm_closely() {
        for i in -200..200 {
            let x = i as f64 * 0.37;
            let want = x.exp();
            let got = exp(x);
            let rel = ((got - want) / want.max(f64::MIN_POSITIVE)).abs();
            assert!(rel < 1e-13, "exp({x}): {got} vs {want}");
        }
        assert_eq!(exp(0.0), 1.0);
        assert_eq!(exp(-800.0), 0.0);
        assert_eq!(exp(800.0), f64::INFINITY);
    }

    #[test]
    fn exp_handles_subnormal_results() {
        let y = exp(-744.0);
        assert!(y > 0.0 && y < f64::MIN_POSITIVE);
    }

    #[test]
    fn ln_matches_libm_closely() {
        for i in 1..400 {
            let x = i as f64 * 0.173;
            let want = x.ln();
            let got = ln(x);
            assert!((got - want).abs() < 1e-13 * want.abs().max(1.0), "ln({x})");
        }
        assert_eq!(ln(1.0), 0.0);
        assert_eq!(ln(0.0), f64::NEG_INFINITY);
        assert!(ln(-1.0).is_nan());
        // Tiny probabilities from softmax underflow territory.
        let want = 1e-300f64.ln();
        assert!((ln(1e-300) - want).abs() < 1e-10);
    }

    #[test]
    fn ln_exp_roundtrip() {
        for i in -50..50 {
            let x = i as f64 * 0.31;
            assert!((ln(exp(x)) - x).abs() < 1e-12, "x={x}");
        }
    }

    #[test]
    fn sin_cos_match_libm_closely() {
        for i in 0..2000 {
            let x = i as f64 * 0.777 - 700.0;
            assert!((sin(x) - x.sin()).abs() < 1e-11, "sin({x})");
            assert!((cos(x) - x.cos()).abs() < 1e-11, "cos({x})");
        }
    }

    #[test]
    fn pythagorean_identity() {
        for i in 0..500 {
            let x = i as f64 * 2.13;
            let s = sin(x);
            let c = cos(x);
            assert!((s * s + c * c - 1.0).abs() < 1e-12);
        }
    }
}
