//! Software precision emulation, reduction orders and seeded hashing.
//!
//! Precision emulation keeps the f64 exponent range and only shortens the
//! significand, rounding to nearest with ties to even. This is enough to make
//! floating-point addition visibly non-associative without depending on any
//! hardware format.

use serde::{Deserialize, Serialize};

/// Significand width used when emulating reduced precision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Precision {
    /// Plain f64 arithmetic.
    #[default]
    Exact,
    /// 8 significand bits (7 stored + implicit), like bfloat16.
    Bf16Like,
    /// 11 significand bits (10 stored + implicit), like IEEE half.
    Fp16Like,
}

impl Precision {
    /// Number of significand bits including the implicit leading one, or
    /// `None` for full f64.
    pub fn significand_bits(self) -> Option<u32> {
        match self {
            Precision::Exact => None,
            Precision::Bf16Like => Some(8),
            Precision::Fp16Like => Some(11),
        }
    }

    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self.significand_bits() {
            None => x,
            Some(bits) => round_significand(x, bits),
        }
    }
}

/// Rounds `x` to `bits` significand bits (implicit bit included) with
/// round-half-to-even. Non-finite values, zeros and `bits >= 53` pass through.
pub fn round_significand(x: f64, bits: u32) -> f64 {
    assert!(bits >= 1, "need at least one significand bit");
    if bits >= 53 || !x.is_finite() || x == 0.0 {
        return x;
    }
    let drop = 53 - bits;
    let raw = x.to_bits();
    let sign = raw & (1 << 63);
    let mag = raw & !(1 << 63);
    let half = 1u64 << (drop - 1);
    let lsb = (mag >> drop) & 1;
    // A carry out of the fraction bumps the exponent, which is the correct
    // result; overflow to the infinity bit pattern is also correct. Subnormals
    // round their stored fraction field at the same position.
    let rounded = (mag + half - 1 + lsb) & !((1u64 << drop) - 1);
    f64::from_bits(sign | rounded)
}

/// Order in which a sum of products is accumulated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReductionOrder {
    /// Left fold: `((a0 + a1) + a2) + ...`
    Sequential,
    /// Balanced binary tree: split at the midpoint and add the halves.
    Pairwise,
}

/// Sums `terms` in the requested order, rounding after every addition.
pub fn reduce(terms: &[f64], order: ReductionOrder, precision: Precision) -> f64 {
    match order {
        ReductionOrder::Sequential => sequential_sum(terms, precision),
        ReductionOrder::Pairwise => pairwise_sum(terms, precision),
    }
}

pub fn sequential_sum(terms: &[f64], precision: Precision) -> f64 {
    let mut it = terms.iter();
    let Some(&first) = it.next() else {
        return 0.0;
    };
    it.fold(precision.round(first), |acc, &x| precision.round(acc + x))
}

pub fn pairwise_sum(terms: &[f64], precision: Precision) -> f64 {
    match terms.len() {
        0 => 0.0,
        1 => precision.round(terms[0]),
        n => {
            let (lo, hi) = terms.split_at(n / 2);
            precision.round(pairwise_sum(lo, precision) + pairwise_sum(hi, precision))
        }
    }
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds a sequence of words into a single hash, order-sensitive.
pub fn hash_words(seed: u64, words: impl IntoIterator<Item = u64>) -> u64 {
    words.into_iter().fold(mix64(seed), |h, w| mix64(h ^ mix64(w.wrapping_add(0x632B_E59B_D9B4_E019))))
}

/// Maps a hash to a uniform value in `[-1, 1]`.
#[inline]
pub fn unit_interval_signed(h: u64) -> f64 {
    // 53 random bits -> [0, 1], then affine to [-1, 1].
    let u = (h >> 11) as f64 / ((1u64 << 53) - 1) as f64;
    2.0 * u - 1.0
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Median of a non-empty slice (mean of the two middle values for even length).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_representable_values() {
        for &x in &[1.0, 1.5, -3.25, 0.0078125, 256.0] {
            assert_eq!(round_significand(x, 8), x);
        }
    }

    #[test]
    fn rounding_ties_to_even() {
        // 1 + 2^-8 is exactly halfway between 1 and 1 + 2^-7 at 8 bits.
        assert_eq!(round_significand(1.0 + 2f64.powi(-8), 8), 1.0);
        // 1 + 3*2^-8 is halfway between 1+2^-7 and 1+2^-6 -> even is 1+2^-6.
        assert_eq!(round_significand(1.0 + 3.0 * 2f64.powi(-8), 8), 1.0 + 2f64.powi(-6));
        // Carry into the exponent.
        assert_eq!(round_significand(2.0 - 2f64.powi(-10), 8), 2.0);
    }

    #[test]
    fn rounding_matches_half_crate_on_f32_inputs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let x: f32 = rng.gen_range(-1000.0f32..1000.0);
            let bf = half::bf16::from_f32(x).to_f32() as f64;
            assert_eq!(round_significand(x as f64, 8), bf, "bf16 {x}");
            let y: f32 = rng.gen_range(-60000.0f32..60000.0);
            if y.abs() > 6.2e-5 {
                let h = half::f16::from_f32(y).to_f32() as f64;
                assert_eq!(round_significand(y as f64, 11), h, "f16 {y}");
            }
        }
    }

    #[test]
    fn non_finite_passthrough() {
        assert!(round_significand(f64::NAN, 8).is_nan());
        assert_eq!(round_significand(f64::INFINITY, 8), f64::INFINITY);
    }

    #[test]
    fn orders_agree_in_exact_small_integer_sums() {
        let terms = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(sequential_sum(&terms, Precision::Exact), 15.0);
        assert_eq!(pairwise_sum(&terms, Precision::Exact), 15.0);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn signed_unit_in_range() {
        for i in 0..1000u64 {
            let u = unit_interval_signed(mix64(i));
            assert!((-1.0..=1.0).contains(&u));
        }
    }
}
