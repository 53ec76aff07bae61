//! One-dimensional integration against the standard Gaussian and reproducible
//! random streams.
//!
//! Every dictionary integrand is a piecewise polynomial times the Gaussian
//! density, so integrals are assembled from per-piece moments
//! `∫ (x - anchor)^k φ(x) dx`. Moments are taken in a local variable anchored
//! at a finite endpoint of each piece; expanding in the global variable would
//! cancel away most significant digits once knots sit far from the origin.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Highest polynomial degree accepted by the moment routines.
pub const MAX_MOMENT_ORDER: usize = 8;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Standard normal density.
pub fn std_normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF Φ.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail 1 - Φ(x), accurate for large positive `x`.
pub fn std_normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

/// Gaussian mass of `[a, b]`, computed on the side of the origin that avoids
/// cancellation.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return 0.0;
    }
    if a >= 0.0 {
        std_normal_sf(a) - std_normal_sf(b)
    } else if b <= 0.0 {
        std_normal_cdf(b) - std_normal_cdf(a)
    } else {
        1.0 - std_normal_cdf(a) - std_normal_sf(b)
    }
}

/// `x^(k-1) φ(x)`, with the limit 0 at ±∞.
fn boundary_term(x: f64, k: usize) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        x.powi(k as i32 - 1) * std_normal_pdf(x)
    }
}

/// All truncated moments `M_k(a, b) = ∫_a^b x^k φ(x) dx` for `k ≤ 8`.
///
/// Uses `M_k = a^{k-1} φ(a) - b^{k-1} φ(b) + (k-1) M_{k-2}`.
pub fn truncated_moments(a: f64, b: f64) -> [f64; MAX_MOMENT_ORDER + 1] {
    let mut m = [0.0; MAX_MOMENT_ORDER + 1];
    if a >= b {
        return m;
    }
    let pa = if a.is_infinite() { 0.0 } else { std_normal_pdf(a) };
    let pb = if b.is_infinite() { 0.0 } else { std_normal_pdf(b) };
    m[0] = normal_mass(a, b);
    m[1] = pa - pb;
    for k in 2..=MAX_MOMENT_ORDER {
        m[k] = boundary_term(a, k) - boundary_term(b, k) + (k - 1) as f64 * m[k - 2];
    }
    m
}

/// Truncated Gaussian moment `∫_a^b x^k φ(x) dx`; infinite bounds allowed.
pub fn truncated_moment(k: usize, a: f64, b: f64) -> Result<f64> {
    if k > MAX_MOMENT_ORDER {
        return Err(Error::Unsupported(format!(
            "moment order {k} exceeds {MAX_MOMENT_ORDER}"
        )));
    }
    if a.is_nan() || b.is_nan() || a > b {
        return Err(Error::Contract(format!("invalid interval [{a}, {b}]")));
    }
    Ok(truncated_moments(a, b)[k])
}

/// Gauss–Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pm1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl24() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(24))
}

/// Panel width for the composite rule behind [`local_moments`].
const PANEL: f64 = 0.5;
/// Distance beyond which the Gaussian weight is dropped for infinite pieces.
const TAIL_REACH: f64 = 40.0;

/// Local moments `∫_lo^hi (x - anchor)^k φ(x) dx` for `k ≤ 8`.
///
/// Composite 24-node Gauss–Legendre on panels of width ≤ 0.5; for these
/// integrands the rule is exact to rounding. Infinite ends are cut where the
/// density underflows relative to anything representable.
pub fn local_moments(anchor: f64, lo: f64, hi: f64) -> [f64; MAX_MOMENT_ORDER + 1] {
    let mut m = [0.0; MAX_MOMENT_ORDER + 1];
    let lo = if lo == f64::NEG_INFINITY { hi.min(0.0) - TAIL_REACH } else { lo };
    let hi = if hi == f64::INFINITY { lo.max(0.0) + TAIL_REACH } else { hi };
    if !(hi > lo) {
        return m;
    }
    let (nodes, weights) = gl24();
    let panels = ((hi - lo) / PANEL).ceil().max(1.0) as usize;
    let width = (hi - lo) / panels as f64;
    for p in 0..panels {
        let a = lo + p as f64 * width;
        let half = 0.5 * width;
        let mid = a + half;
        for (t, w) in nodes.iter().zip(weights) {
            let x = mid + half * t;
            let u = x - anchor;
            let mut acc = w * half * std_normal_pdf(x);
            for mk in m.iter_mut() {
                *mk += acc;
                acc *= u;
            }
        }
    }
    m
}

/// Rewrites `p(x) = Σ c_k x^k` as a polynomial in `u = x - shift`.
pub fn shift_poly(coeffs: &[f64], shift: f64) -> Vec<f64> {
    // Horner-style Taylor shift.
    let mut out = coeffs.to_vec();
    let n = out.len();
    for i in 0..n {
        for j in (i..n.saturating_sub(1)).rev() {
            out[j] += shift * out[j + 1];
        }
    }
    out
}

/// Integral of a piecewise polynomial against the standard Gaussian.
///
/// `knots` has one more entry than `coeffs`; interval `m` is
/// `[knots[m], knots[m+1]]` and carries the coefficients (ascending powers of
/// `x`) in `coeffs[m]`. The outermost knots may be infinite, which is how the
/// tails `(-∞, -R]` and `[R, ∞)` are expressed.
pub fn integrate_piecewise_poly(knots: &[f64], coeffs: &[Vec<f64>]) -> Result<f64> {
    if knots.len() != coeffs.len() + 1 {
        return Err(Error::Contract(format!(
            "{} knots for {} intervals",
            knots.len(),
            coeffs.len()
        )));
    }
    if knots.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(Error::Contract("knots must be nondecreasing".into()));
    }
    let mut total = 0.0;
    for (m, c) in coeffs.iter().enumerate() {
        let degree = c.iter().rposition(|&v| v != 0.0).unwrap_or(0);
        if degree > MAX_MOMENT_ORDER {
            return Err(Error::Unsupported(format!(
                "degree {degree} on interval {m} exceeds {MAX_MOMENT_ORDER}"
            )));
        }
        let (lo, hi) = (knots[m], knots[m + 1]);
        if c.is_empty() || lo == hi {
            continue;
        }
        let anchor = if lo.is_finite() {
            lo
        } else if hi.is_finite() {
            hi
        } else {
            0.0
        };
        let local = shift_poly(&c[..=degree], anchor);
        let mom = if anchor == 0.0 && lo.is_infinite() && hi.is_infinite() {
            truncated_moments(lo, hi)
        } else {
            local_moments(anchor, lo, hi)
        };
        total += local.iter().zip(mom.iter()).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// A reproducible, splittable random stream.
///
/// Backed by ChaCha8 with the 64-bit stream id selecting an independent
/// keystream, so a given `(seed, id)` always produces the same draws no matter
/// which thread consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngStream {
    pub seed: u64,
    pub id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self { seed, id: 0 }
    }

    pub fn with_id(seed: u64, id: u64) -> Self {
        Self { seed, id }
    }

    /// Child stream `k`; children of distinct parents or indices get distinct ids.
    pub fn split(&self, k: u64) -> Self {
        Self {
            seed: self.seed,
            id: splitmix64(self.id ^ splitmix64(k.wrapping_add(0xA5A5_5A5A))),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.id);
        rng
    }
}

/// `n × d` matrix of i.i.d. standard normal draws, filled row by row.
pub fn sample_std_normal(stream: RngStream, n: usize, d: usize) -> DMatrix<f64> {
    let mut rng = stream.rng();
    let mut out = DMatrix::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            out[(r, c)] = rng.sample::<f64, _>(StandardNormal);
        }
    }
    out
}

/// Empirical 1-D W₂ between two equally sized samples (sorted internally).
pub fn w2_1d_empirical(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Contract(format!(
            "sample counts differ: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.is_empty() {
        return Err(Error::Contract("empty samples".into()));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let msq = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    Ok(msq.sqrt())
}
