//! Counter-based random number generation.
//!
//! The stream is a pure function of `(seed, counter)`:
//!
//! ```text
//! out(seed, counter) = mix64(seed + (counter + 1) * 0x9E3779B97F4A7C15)
//! ```
//!
//! with `mix64` the splitmix64 finalizer. Draws never touch global state,
//! so callers split work by forking independent streams. Float conversion
//! is pinned: a uniform in [0, 1) takes the top 53 bits, `u = (x >> 11) *
//! 2^-53`. Normals come from Box-Muller on two uniforms; the `ln`, `sin`
//! and `cos` used there are fixed polynomial evaluations (below) built
//! only from IEEE `+ - * /` and `sqrt`, so the whole stream is bit-exact
//! across platforms.

use super::{DenseArray, Scalar};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A value-like RNG position. Copying the state replays the stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    seed: u64,
    counter: u64,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, counter: 0 }
    }

    pub fn with_counter(seed: u64, counter: u64) -> Self {
        Self { seed, counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Derives an independent stream; `tag` selects the child.
    pub fn fork(&self, tag: u64) -> Self {
        Self {
            seed: mix64(self.seed ^ mix64(tag.wrapping_add(GOLDEN))),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let z = self
            .seed
            .wrapping_add(self.counter.wrapping_add(1).wrapping_mul(GOLDEN));
        self.counter += 1;
        mix64(z)
    }

    /// Uniform in [0, 1), 53-bit resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0)
    }

    /// Uniform integer in [0, n) via 128-bit multiply-shift.
    pub fn range(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// One standard-normal pair (Box-Muller). Advances the counter by 2.
    pub fn normal_pair(&mut self) -> (f64, f64) {
        // u1 in (0, 1] so ln is finite; u2 in [0, 1).
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9007199254740992.0);
        let u2 = (self.next_u64() >> 11) as f64 * (1.0 / 9007199254740992.0);
        let r = (-2.0 * portable_ln(u1)).sqrt();
        let (s, c) = portable_sincos(6.283185307179586 * u2);
        (r * c, r * s)
    }
}

/// `n` standard-normal draws from the stream, cast to the target scalar.
pub fn draw_normal<T: Scalar>(rng: &mut RngState, n: usize) -> DenseArray<T> {
    let mut data = Vec::with_capacity(n);
    while data.len() + 2 <= n {
        let (a, b) = rng.normal_pair();
        data.push(T::from(a).expect("normal draw"));
        data.push(T::from(b).expect("normal draw"));
    }
    if data.len() < n {
        let (a, _) = rng.normal_pair();
        data.push(T::from(a).expect("normal draw"));
    }
    DenseArray::new(vec![n], data).expect("draw_normal shape")
}

// ---------------------------------------------------------------------------
// Portable elementary functions. Fixed-order IEEE arithmetic only, so the
// results do not depend on the platform libm. Accuracy ~1e-15 relative,
// far beyond what Box-Muller sampling needs.
// ---------------------------------------------------------------------------

const LN2: f64 = 0.6931471805599453;
const FRAC_PI_2: f64 = 1.5707963267948966;
const FRAC_PI_4: f64 = 0.7853981633974483;

/// Natural log for x > 0 via exponent split and the atanh series
/// ln(m) = 2 (t + t^3/3 + ...) with t = (m-1)/(m+1), m in [sqrt(2)/2, sqrt(2)].
pub(crate) fn portable_ln(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let mut e = ((bits >> 52) & 0x7ff) as i64 - 1023;
    let mut m = f64::from_bits((bits & 0x000f_ffff_ffff_ffff) | (1023u64 << 52));
    if m > std::f64::consts::SQRT_2 {
        m *= 0.5;
        e += 1;
    }
    let t = (m - 1.0) / (m + 1.0);
    let t2 = t * t;
    // 12 odd terms: remainder below 1e-17 for |t| <= 0.1716
    let mut s = 1.0 / 23.0;
    for k in (0..11).rev() {
        s = s * t2 + 1.0 / (2 * k + 1) as f64;
    }
    2.0 * t * s + e as f64 * LN2
}

/// (sin, cos) for theta in [0, 2*pi), quadrant reduction plus Taylor
/// polynomials on [0, pi/4].
pub(crate) fn portable_sincos(theta: f64) -> (f64, f64) {
    debug_assert!((0.0..6.3).contains(&theta));
    let q = (theta / FRAC_PI_2) as u32; // 0..=3 (theta < 2*pi)
    let q = q.min(3);
    let r = theta - q as f64 * FRAC_PI_2;
    let (s, c) = if r <= FRAC_PI_4 {
        (sin_poly(r), cos_poly(r))
    } else {
        let r2 = FRAC_PI_2 - r;
        (cos_poly(r2), sin_poly(r2))
    };
    match q {
        0 => (s, c),
        1 => (c, -s),
        2 => (-s, -c),
        _ => (-c, s),
    }
}

#[inline]
fn sin_poly(r: f64) -> f64 {
    // sin r = r - r^3/3! + ... - r^15/15!, |r| <= pi/4
    let r2 = r * r;
    let mut s = -1.0 / 1_307_674_368_000.0; // -1/15!
    s = s * r2 + 1.0 / 6_227_020_800.0; // 1/13!
    s = s * r2 - 1.0 / 39_916_800.0; // -1/11!
    s = s * r2 + 1.0 / 362_880.0; // 1/9!
    s = s * r2 - 1.0 / 5_040.0; // -1/7!
    s = s * r2 + 1.0 / 120.0; // 1/5!
    s = s * r2 - 1.0 / 6.0; // -1/3!
    r + r * r2 * s
}

#[inline]
fn cos_poly(r: f64) -> f64 {
    // cos r = 1 - r^2/2! + ... + r^16/16!, |r| <= pi/4
    let r2 = r * r;
    let mut s = 1.0 / 20_922_789_888_000.0; // 1/16!
    s = s * r2 - 1.0 / 87_178_291_200.0; // -1/14!
    s = s * r2 + 1.0 / 479_001_600.0; // 1/12!
    s = s * r2 - 1.0 / 3_628_800.0; // -1/10!
    s = s * r2 + 1.0 / 40_320.0; // 1/8!
    s = s * r2 - 1.0 / 720.0; // -1/6!
    s = s * r2 + 1.0 / 24.0; // 1/4!
    1.0 - 0.5 * r2 + r2 * r2 * s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_is_deterministic() {
        let mut a = RngState::new(9001);
        let mut b = RngState::new(9001);
        let xs: Vec<u64> = (0..16).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..16).map(|_| b.next_u64()).collect();
        assert_eq!(xs, ys);
        assert_eq!(a.counter(), 16);
    }

    #[test]
    fn golden_values_match_reference_chain() {
        // Frozen from an independent evaluation of
        // mix64(seed + (c+1)*GOLDEN); counter 0 for seed 42 equals the
        // canonical splitmix64 first output for state 42.
        let mut r = RngState::new(42);
        assert_eq!(r.next_u64(), 0xbdd732262feb6e95);
        assert_eq!(r.next_u64(), 0x28efe333b266f103);
        assert_eq!(r.next_u64(), 0x47526757130f9f52);
        assert_eq!(r.next_u64(), 0x581ce1ff0e4ae394);
        let mut r7 = RngState::new(7);
        assert_eq!(r7.next_u64(), 0x63cbe1e459320dd7);
        assert_eq!(r7.next_u64(), 0x044c3cd7f43c661c);
        let mut ru = RngState::new(42);
        assert!((ru.uniform() - 0.7415648787718233).abs() < 1e-16);
    }

    #[test]
    fn disjoint_counters_differ() {
        let mut a = RngState::with_counter(5, 0);
        let mut b = RngState::with_counter(5, 1000);
        let xs: Vec<u64> = (0..8).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..8).map(|_| b.next_u64()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn forked_streams_are_independent_and_reproducible() {
        let base = RngState::new(123);
        let mut f1 = base.fork(1);
        let mut f2 = base.fork(2);
        let mut f1b = base.fork(1);
        assert_ne!(f1.next_u64(), f2.next_u64());
        let _ = f1b.next_u64();
        assert_eq!(f1.next_u64(), f1b.next_u64());
    }

    #[test]
    fn draw_normal_same_state_identical() {
        let mut a = RngState::new(77);
        let mut b = RngState::new(77);
        let x = draw_normal::<f64>(&mut a, 33);
        let y = draw_normal::<f64>(&mut b, 33);
        assert_eq!(x, y);
        // odd-length draw consumed a full pair at the tail
        assert_eq!(a.counter(), 34);
    }

    #[test]
    fn draw_normal_sample_statistics() {
        let mut rng = RngState::new(2024);
        let xs = draw_normal::<f64>(&mut rng, 100_000);
        let n = xs.len() as f64;
        let mean: f64 = xs.data().iter().sum::<f64>() / n;
        let var: f64 = xs.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn portable_ln_matches_std() {
        let mut x = 1e-16;
        while x <= 1.0 {
            let got = portable_ln(x);
            let want = x.ln();
            assert!(
                (got - want).abs() <= want.abs() * 1e-14 + 1e-15,
                "x={x} got={got} want={want}"
            );
            x *= 1.7;
        }
        assert_eq!(portable_ln(1.0), 0.0);
    }

    #[test]
    fn portable_sincos_matches_std() {
        for i in 0..2000 {
            let theta = i as f64 * (6.283185307179586 / 2000.0);
            let (s, c) = portable_sincos(theta);
            assert!((s - theta.sin()).abs() < 1e-13, "sin at {theta}");
            assert!((c - theta.cos()).abs() < 1e-13, "cos at {theta}");
        }
    }

    #[test]
    fn range_is_unbiasedish_and_in_bounds() {
        let mut rng = RngState::new(5);
        let mut counts = [0usize; 5];
        for _ in 0..5000 {
            let v = rng.range(5);
            assert!(v < 5);
            counts[v] += 1;
        }
        for &c in &counts {
            assert!(c > 700, "counts {counts:?}");
        }
    }
}
