//! Constructive approximation of increasing 1-D maps by cone elements, and
//! `L²(ρ₁)` errors of the result.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrate::{gauss_legendre, std_normal_pdf};
use crate::maps1d::{ConeParams, ElementShape, FamilyKind, MapFamily1D};

type Scalar = dyn Fn(f64) -> f64 + Send + Sync;

/// A smooth increasing map `T̄` with its derivatives and declared slope bounds.
#[derive(Clone)]
pub struct MonotoneMap1D {
    pub f: Arc<Scalar>,
    pub df: Arc<Scalar>,
    pub d2f: Option<Arc<Scalar>>,
    pub lower_slope: f64,
    pub upper_slope: f64,
}

impl std::fmt::Debug for MonotoneMap1D {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MonotoneMap1D")
            .field("lower_slope", &self.lower_slope)
            .field("upper_slope", &self.upper_slope)
            .finish()
    }
}

impl MonotoneMap1D {
    pub fn new(
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        df: impl Fn(f64) -> f64 + Send + Sync + 'static,
        lower_slope: f64,
        upper_slope: f64,
    ) -> Self {
        Self { f: Arc::new(f), df: Arc::new(df), d2f: None, lower_slope, upper_slope }
    }

    pub fn with_second(mut self, d2f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        self.d2f = Some(Arc::new(d2f));
        self
    }

    /// `x ↦ a x + b`.
    pub fn affine(a: f64, b: f64) -> Self {
        Self::new(move |x| a * x + b, move |_| a, a, a).with_second(|_| 0.0)
    }

    /// `x ↦ a x + c tanh(x)` with `a, c ≥ 0`.
    pub fn tanh_type(a: f64, c: f64) -> Self {
        Self::new(
            move |x| a * x + c * x.tanh(),
            move |x| a + c / x.cosh().powi(2),
            a,
            a + c,
        )
        .with_second(move |x| -2.0 * c * x.tanh() / x.cosh().powi(2))
    }

    /// `x ↦ x + c x³` with `c ≥ 0` (unbounded slope).
    pub fn cubic(c: f64) -> Self {
        Self::new(move |x| x + c * x.powi(3), move |x| 1.0 + 3.0 * c * x * x, 1.0, f64::INFINITY)
            .with_second(move |x| 6.0 * c * x)
    }

    pub fn eval(&self, x: f64) -> f64 {
        (self.f)(x)
    }

    pub fn slope(&self, x: f64) -> f64 {
        (self.df)(x)
    }

    /// Checks positivity of `T̄'` and the declared bounds on `grid`.
    pub fn validate(&self, grid: &[f64]) -> Result<()> {
        for &x in grid {
            let s = self.slope(x);
            let tol = 1e-12 * (1.0 + s.abs());
            if !(s > 0.0) {
                return Err(Error::Contract(format!("slope {s} ≤ 0 at x = {x}")));
            }
            if s < self.lower_slope - tol || s > self.upper_slope + tol {
                return Err(Error::Contract(format!(
                    "slope {s} at x = {x} outside the declared range [{}, {}]",
                    self.lower_slope, self.upper_slope
                )));
            }
        }
        Ok(())
    }
}

/// Coefficients of a one-dimensional fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit1D {
    pub lambda: DVector<f64>,
    pub v: f64,
}

impl Fit1D {
    pub fn to_params(&self, alpha: f64) -> ConeParams {
        ConeParams {
            alpha,
            lambda: DMatrix::from_row_slice(1, self.lambda.len(), self.lambda.as_slice()),
            v: DVector::from_element(1, self.v),
        }
    }
}

fn offset_at(fam: &MapFamily1D, lambda: &DVector<f64>, x: f64) -> f64 {
    (0..fam.len()).map(|j| lambda[j] * fam.eval(j, x, 0)).sum()
}

/// Piecewise-linear interpolant `α·id + Σ λ_m T_m + v` matching `T̄` at every
/// knot: `λ_m` is the increment of `T̄ - α·id` over sub-interval `m`.
pub fn fit_pw_linear(tbar: &MonotoneMap1D, fam: &MapFamily1D, alpha: f64) -> Result<Fit1D> {
    if fam.kind() != FamilyKind::PwLinear {
        return Err(Error::Contract("fit_pw_linear needs a piecewise-linear family".into()));
    }
    let knots = fam.knots();
    let resid: Vec<f64> = knots.iter().map(|&x| tbar.eval(x) - alpha * x).collect();
    let mut lambda = DVector::zeros(fam.len());
    for m in 0..fam.len() {
        let inc = resid[m + 1] - resid[m];
        let tol = 1e-12 * (1.0 + resid[m].abs() + resid[m + 1].abs());
        if inc < -tol {
            return Err(Error::Contract(format!(
                "T̄ - α·id decreases on sub-interval {m} (increment {inc:e}); slope falls below α"
            )));
        }
        // Increments at rounding level are treated as exact zeros.
        lambda[m] = if inc <= tol { 0.0 } else { inc };
    }
    let r = fam.radius();
    let v = tbar.eval(-r) + alpha * r - offset_at(fam, &lambda, -r);
    Ok(Fit1D { lambda, v })
}

/// Index of `shape` on sub-interval `m` in a full higher-order family.
fn ho_index(m: usize, shape: ElementShape) -> usize {
    1 + 4 * m
        + match shape {
            ElementShape::QuadPlus => 0,
            ElementShape::QuadMinus => 1,
            ElementShape::CubPlus => 2,
            ElementShape::CubMinus => 3,
            _ => unreachable!("not a per-interval element"),
        }
}

/// Higher-order fit: the linear element and signed quadratics make `T̂'`
/// the piecewise-linear interpolant of `T̄'`; a left-to-right scan of signed
/// cubics then restores `T̂ = T̄` at every knot.
pub fn fit_higher_order(tbar: &MonotoneMap1D, fam: &MapFamily1D, alpha: f64) -> Result<Fit1D> {
    if fam.kind() != FamilyKind::HigherOrder || fam.len() != 4 * fam.intervals() + 1 {
        return Err(Error::Contract("fit_higher_order needs the full higher-order family".into()));
    }
    let r = fam.radius();
    let delta = fam.delta();
    let knots = fam.knots();
    let mut lambda = DVector::zeros(fam.len());
    let lin = tbar.slope(-r) - alpha;
    if lin < -1e-12 * (1.0 + alpha) {
        return Err(Error::Contract(format!("T̄'(-R) = {} is below α = {alpha}", tbar.slope(-r))));
    }
    lambda[0] = lin.max(0.0);
    for m in 0..fam.intervals() {
        let jump = tbar.slope(knots[m + 1]) - tbar.slope(knots[m]);
        if jump > 0.0 {
            lambda[ho_index(m, ElementShape::QuadPlus)] = 0.5 * delta * jump;
        } else if jump < 0.0 {
            lambda[ho_index(m, ElementShape::QuadMinus)] = -0.5 * delta * jump;
        }
    }
    let mut v = tbar.eval(-r) + alpha * r - offset_at(fam, &lambda, -r);
    // Cubic elements are flat at both knots, so each correction only shifts
    // values at later knots.
    for m in 0..fam.intervals() {
        let b = knots[m + 1];
        let current = alpha * b + offset_at(fam, &lambda, b) + v;
        let target = tbar.eval(b);
        let err = target - current;
        if err.abs() <= 1e-13 * (1.0 + target.abs()) {
            continue;
        }
        if err > 0.0 {
            lambda[ho_index(m, ElementShape::CubPlus)] = err;
        } else if err < 0.0 {
            let c = -err;
            if 6.0 * c / delta > 0.5 * alpha {
                return Err(Error::Approximation {
                    interval: m,
                    reason: format!(
                        "negative cubic coefficient {c:e} exceeds the cap αδ/12 = {:e}; refine the mesh",
                        alpha * delta / 12.0
                    ),
                });
            }
            lambda[ho_index(m, ElementShape::CubMinus)] = c;
        }
        // Re-anchor v so that the centering offsets of the new cubic do not
        // move the left endpoint.
        let left = alpha * (-r) + offset_at(fam, &lambda, -r) + v;
        v += tbar.eval(-r) - left;
    }
    Ok(Fit1D { lambda, v })
}

/// Whether `λ` lies in the higher-order constraint set for tip `α`:
/// `λ ≥ 0`, `(2/δ) Σ_I (λ^{quad,+} - λ^{quad,-}) + λ^{lin} ≥ 0`, and
/// `6 λ^{cub,-}/δ ≤ α/2` on every sub-interval.
pub fn in_constraint_set(lambda: &DVector<f64>, fam: &MapFamily1D, alpha: f64) -> bool {
    if fam.kind() != FamilyKind::HigherOrder || lambda.len() != fam.len() {
        return false;
    }
    if lambda.iter().any(|l| *l < 0.0) {
        return false;
    }
    let delta = fam.delta();
    let mut quad = 0.0;
    for m in 0..fam.intervals() {
        quad += lambda[ho_index(m, ElementShape::QuadPlus)] - lambda[ho_index(m, ElementShape::QuadMinus)];
        if 6.0 * lambda[ho_index(m, ElementShape::CubMinus)] / delta > 0.5 * alpha {
            return false;
        }
    }
    2.0 / delta * quad + lambda[0] >= 0.0
}

const PANEL_NODES: usize = 16;
const PANEL_WIDTH: f64 = 0.25;
const TAIL_REACH: f64 = 12.0;

/// `∫ f dρ₁` by composite Gauss–Legendre on panels aligned with the knots
/// (so the integrand is smooth on each panel), truncated `TAIL_REACH`
/// beyond `±R`, where the Gaussian mass is below `1e-32`.
fn integrate_against_gaussian(fam: &MapFamily1D, f: impl Fn(f64) -> f64) -> f64 {
    let (t, w) = gauss_legendre(PANEL_NODES);
    let r = fam.radius();
    let mut breaks = vec![-r - TAIL_REACH];
    let mut edges = vec![-r];
    edges.extend(fam.knots().into_iter().skip(1));
    edges.push(r + TAIL_REACH);
    for &e in &edges {
        let last = *breaks.last().unwrap();
        let pieces = ((e - last) / PANEL_WIDTH).ceil().max(1.0) as usize;
        for k in 1..=pieces {
            breaks.push(last + (e - last) * k as f64 / pieces as f64);
        }
    }
    let mut total = 0.0;
    for win in breaks.windows(2) {
        let (a, b) = (win[0], win[1]);
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (ti, wi) in t.iter().zip(&w) {
            let x = mid + half * ti;
            total += wi * half * f(x) * std_normal_pdf(x);
        }
    }
    total
}

/// `(‖T̄ - T̂‖, ‖T̄' - T̂'‖)` in `L²(ρ₁)` for a one-dimensional cone point.
pub fn l2_errors(tbar: &MonotoneMap1D, params: &ConeParams, fam: &MapFamily1D) -> Result<(f64, f64)> {
    if params.dim() != 1 || params.lambda.ncols() != fam.len() {
        return Err(Error::Contract("l2_errors needs one-dimensional parameters for this family".into()));
    }
    let map = integrate_against_gaussian(fam, |x| (tbar.eval(x) - params.coordinate(fam, 0, x)).powi(2));
    let jac = integrate_against_gaussian(fam, |x| {
        (tbar.slope(x) - params.coordinate_derivative(fam, 0, x, 1)).powi(2)
    });
    Ok((map.max(0.0).sqrt(), jac.max(0.0).sqrt()))
}
