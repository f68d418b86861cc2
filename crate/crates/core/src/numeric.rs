//! Rounding and integer helpers shared by every kernel.
//!
//! All `⌊·⌉` rounding in the crate is round-half-to-even, both for reals and
//! for integer division.

/// Round to nearest, ties to even, saturating into `i64`.
pub fn round_to_i64(x: f64) -> i64 {
    let r = x.round_ties_even();
    if r >= i64::MAX as f64 {
        i64::MAX
    } else if r <= i64::MIN as f64 {
        i64::MIN
    } else {
        r as i64
    }
}

/// `round(num / den)` with ties to even. `den` must be positive.
pub fn div_round_half_even(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    let q = num.div_euclid(den);
    let r = num.rem_euclid(den);
    match (2 * r).cmp(&den) {
        std::cmp::Ordering::Greater => q + 1,
        std::cmp::Ordering::Equal => q + (q & 1),
        std::cmp::Ordering::Less => q,
    }
}

/// `round(x / 2^n)` with ties to even.
pub fn shift_right_round(x: i128, n: u32) -> i128 {
    if n == 0 {
        return x;
    }
    if n >= 127 {
        return 0;
    }
    div_round_half_even(x, 1i128 << n)
}

/// Floor square root by Newton iteration, starting above the root.
pub fn isqrt(n: u64) -> u64 {
    if n < 2 {
        return n;
    }
    let bits = 64 - n.leading_zeros();
    let mut x: u64 = 1u64 << bits.div_ceil(2);
    loop {
        let y = (x + n / x) / 2;
        if y >= x {
            return x;
        }
        x = y;
    }
}

pub fn clamp_code(v: i64, lo: i64, hi: i64) -> i64 {
    v.clamp(lo, hi)
}
