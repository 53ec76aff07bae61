//! Reference computations for the integration tests. Nothing here calls into
//! the library's numerical routines: integrals use adaptive Simpson
//! quadrature, quadratic programs are solved by enumerating active sets,
//! Monte Carlo draws come from an independent generator.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn phi(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

fn simpson_rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let diff = left + right - whole;
    if depth == 0 || diff.abs() <= 15.0 * tol {
        return left + right + diff / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Adaptive Simpson on `[a, b]`.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let fa = f(a);
    let fb = f(b);
    let fm = f(0.5 * (a + b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 50)
}

/// `E[f(X)]`, `X ~ N(0, 1)`, splitting at `breaks` so that kinks of `f`
/// fall on panel edges.
pub fn gauss_expect(f: &dyn Fn(f64) -> f64, breaks: &[f64]) -> f64 {
    let mut pts = vec![-14.0];
    pts.extend(breaks.iter().copied().filter(|b| b.abs() < 14.0));
    pts.push(14.0);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    let g = |x: f64| f(x) * phi(x);
    pts.windows(2).map(|w| simpson(&g, w[0], w[1], 1e-14)).sum()
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

pub fn normals(rng: &mut ChaCha20Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Sample mean and its standard error.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

/// Empirical `W₂` between equally sized 1-D samples by sorting, with the
/// delta-method standard error of `W₂` obtained from the per-pair squared
/// gaps.
pub fn w2_sorted(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let gaps: Vec<f64> = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).collect();
    let (m, se) = mean_se(&gaps);
    let w = m.max(0.0).sqrt();
    (w, if w > 0.0 { se / (2.0 * w) } else { se.sqrt() })
}

/// `min_{x ≥ 0} (x - η)ᵀQ(x - η)` by trying every support set.
pub fn nnqp_enumerate(q: &DMatrix<f64>, eta: &DVector<f64>) -> DVector<f64> {
    let n = eta.len();
    let c = q * eta;
    let mut best = DVector::zeros(n);
    let mut best_val = f64::INFINITY;
    for mask in 0u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|j| mask & (1 << j) != 0).collect();
        let mut x = DVector::zeros(n);
        if !idx.is_empty() {
            let k = idx.len();
            let sub = DMatrix::from_fn(k, k, |a, b| q[(idx[a], idx[b])]);
            let rhs = DVector::from_fn(k, |a, _| c[idx[a]]);
            let Some(s) = sub.lu().solve(&rhs) else { continue };
            if s.iter().any(|v| *v < 0.0) {
                continue;
            }
            for (a, &j) in idx.iter().enumerate() {
                x[j] = s[a];
            }
        }
        let r = &x - eta;
        let val = (r.transpose() * q * &r)[(0, 0)];
        if val < best_val {
            best_val = val;
            best = x;
        }
    }
    best
}

/// Random symmetric positive definite `n×n` matrix `BBᵀ + εI`.
pub fn random_spd(rng: &mut ChaCha20Rng, n: usize, eps: f64) -> DMatrix<f64> {
    let b = DMatrix::from_vec(n, n, normals(rng, n * n));
    &b * b.transpose() + DMatrix::identity(n, n) * eps
}

/// Central difference of `f` at `x` along coordinate `k`.
pub fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut p = x.to_vec();
    let mut m = x.to_vec();
    p[k] += h;
    m[k] -= h;
    (f(&p) - f(&m)) / (2.0 * h)
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Uncentered dictionary elements written out from their definitions:
/// `(kind, a, δ, x) -> value`, where `kind` is one of
/// `"step" | "quad+" | "quad-" | "cub+" | "cub-"`.
pub fn element(kind: &str, a: f64, delta: f64, x: f64) -> f64 {
    let t = (x - a) / delta;
    match kind {
        "step" => t.clamp(0.0, 1.0),
        "quad+" => {
            if t <= 0.0 {
                0.0
            } else if t <= 1.0 {
                t * t
            } else {
                2.0 * t - 1.0
            }
        }
        "cub+" => {
            let s = t.clamp(0.0, 1.0);
            s * s * (3.0 - 2.0 * s)
        }
        "quad-" => -element("quad+", a, delta, x),
        "cub-" => -element("cub+", a, delta, x),
        _ => panic!("unknown element {kind}"),
    }
}
