//! Compatible one-dimensional map dictionaries and the coordinatewise cone
//! maps they generate.
//!
//! A family lives on the uniform knot grid `-R, -R + δ, …, R`. Each element is
//! a piecewise polynomial on that grid, so its moments against the Gaussian
//! reference (centering offsets, Gram entries, entropy weights) are assembled
//! from per-piece local moments computed once at construction.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::integrate::{gauss_legendre, local_moments, MAX_MOMENT_ORDER};

/// Dictionary flavour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FamilyKind {
    /// Clipped ramps `ψ(t) = 1 ∧ t₊`, one per sub-interval.
    PwLinear,
    /// A global linear element plus signed piecewise quadratics and cubics
    /// per sub-interval.
    HigherOrder,
}

impl std::str::FromStr for FamilyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pw_linear" => Ok(Self::PwLinear),
            "higher_order" => Ok(Self::HigherOrder),
            other => Err(Error::Config(format!("unknown dictionary kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementShape {
    Step,
    Linear,
    QuadPlus,
    QuadMinus,
    CubPlus,
    CubMinus,
}

impl ElementShape {
    fn sign(self) -> f64 {
        match self {
            Self::QuadMinus | Self::CubMinus => -1.0,
            _ => 1.0,
        }
    }

    /// Nondecreasing elements; the rest are nonincreasing.
    pub fn is_increasing(self) -> bool {
        self.sign() > 0.0
    }
}

/// One dictionary element: a shape activated on a sub-interval (the linear
/// element has none).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Element {
    pub shape: ElementShape,
    pub interval: Option<usize>,
}

/// Quadrature rule for the per-coordinate entropy integrals
/// `∫ f(α + Σ_j λ_j T_j'(x)) ρ₁(dx)`.
///
/// Row `q` carries a weight (Gaussian mass) and the derivative of every
/// element at node `q`. Tails are single rows because every derivative is
/// constant outside `[-R, R]`; for the piecewise-linear family the interior
/// rows are one per sub-interval, which makes the rule exact.
#[derive(Debug, Clone)]
pub struct EntropyRule {
    pub weights: DVector<f64>,
    pub derivatives: DMatrix<f64>,
}

const ENTROPY_NODES: usize = 32;

#[derive(Debug, Clone)]
pub struct MapFamily1D {
    kind: FamilyKind,
    radius: f64,
    delta: f64,
    intervals: usize,
    elements: Vec<Element>,
    offsets: Option<Vec<f64>>,
    /// Local moments of each piece: left tail, the sub-intervals, right tail.
    piece_moments: Vec<[f64; MAX_MOMENT_ORDER + 1]>,
    entropy_rule: OnceLock<EntropyRule>,
}

/// Checks that `2R/δ` is a positive integer and returns it.
pub fn interval_count(radius: f64, delta: f64) -> Result<usize> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::Config(format!("radius must be positive, got {radius}")));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::Config(format!("mesh size must be positive, got {delta}")));
    }
    let ratio = 2.0 * radius / delta;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * n.max(1.0) {
        return Err(Error::Config(format!(
            "mesh size {delta} does not divide [-{radius}, {radius}] into whole sub-intervals"
        )));
    }
    Ok(n as usize)
}

impl MapFamily1D {
    /// Builds an uncentered family.
    pub fn build(kind: FamilyKind, radius: f64, delta: f64) -> Result<Self> {
        let intervals = interval_count(radius, delta)?;
        let elements = match kind {
            FamilyKind::PwLinear => (0..intervals)
                .map(|m| Element { shape: ElementShape::Step, interval: Some(m) })
                .collect(),
            FamilyKind::HigherOrder => {
                let mut els = vec![Element { shape: ElementShape::Linear, interval: None }];
                for m in 0..intervals {
                    for shape in [
                        ElementShape::QuadPlus,
                        ElementShape::QuadMinus,
                        ElementShape::CubPlus,
                        ElementShape::CubMinus,
                    ] {
                        els.push(Element { shape, interval: Some(m) });
                    }
                }
                els
            }
        };
        Ok(Self::from_parts(kind, radius, delta, intervals, elements))
    }

    fn from_parts(
        kind: FamilyKind,
        radius: f64,
        delta: f64,
        intervals: usize,
        elements: Vec<Element>,
    ) -> Self {
        let mut piece_moments = Vec::with_capacity(intervals + 2);
        piece_moments.push(local_moments(-radius, f64::NEG_INFINITY, -radius));
        for m in 0..intervals {
            let a = -radius + m as f64 * delta;
            piece_moments.push(local_moments(a, a, a + delta));
        }
        piece_moments.push(local_moments(radius, radius, f64::INFINITY));
        Self {
            kind,
            radius,
            delta,
            intervals,
            elements,
            offsets: None,
            piece_moments,
            entropy_rule: OnceLock::new(),
        }
    }

    /// Builds and centers in one go.
    pub fn build_centered(kind: FamilyKind, radius: f64, delta: f64) -> Result<Self> {
        Ok(Self::build(kind, radius, delta)?.centered())
    }

    /// Returns a copy whose elements have mean zero under the standard
    /// Gaussian. Centering an already centered family is a no-op.
    pub fn centered(&self) -> Self {
        let mut out = self.clone();
        out.offsets = None;
        let offsets: Vec<f64> = (0..out.len())
            .map(|j| {
                (0..out.piece_count())
                    .map(|p| {
                        let c = out.piece_coeffs(Some(j), 0, p);
                        dot4(&c, &out.piece_moments[p])
                    })
                    .sum()
            })
            .collect();
        out.offsets = Some(offsets);
        out.entropy_rule = OnceLock::new();
        out
    }

    /// The sub-dictionary of nondecreasing elements (drops `quad−`, `cub−`).
    ///
    /// Its cone with tip `α·id` has slope at least `α` everywhere, so the
    /// optimizers only need to keep `λ ≥ 0`.
    pub fn increasing_subfamily(&self) -> Self {
        self.subfamily(|s| s.is_increasing())
    }

    /// The smooth nondecreasing steps `{linear, cub+}`.
    ///
    /// Besides being nondecreasing and `C¹`, this set is closed under the
    /// reflection `T ↦ -T(-·)` (which maps `cub+` on one sub-interval to
    /// `cub+` on the mirrored one, up to a constant), so symmetric mixtures
    /// stay symmetric under the particle flows.
    pub fn smooth_step_subfamily(&self) -> Self {
        self.subfamily(|s| matches!(s, ElementShape::Linear | ElementShape::CubPlus))
    }

    /// Elements whose shape passes `keep`, in their original order.
    pub fn subfamily(&self, keep: impl Fn(ElementShape) -> bool) -> Self {
        let elements: Vec<Element> =
            self.elements.iter().copied().filter(|e| keep(e.shape)).collect();
        let mut out =
            Self::from_parts(self.kind, self.radius, self.delta, self.intervals, elements);
        if self.offsets.is_some() {
            out = out.centered();
        }
        out
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }
    pub fn radius(&self) -> f64 {
        self.radius
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    /// Number of sub-intervals of `[-R, R]`.
    pub fn intervals(&self) -> usize {
        self.intervals
    }
    /// Element count `J`.
    pub fn len(&self) -> usize {
        self.elements.len()
    }
    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }
    pub fn elements(&self) -> &[Element] {
        &self.elements
    }
    pub fn offsets(&self) -> Option<&[f64]> {
        self.offsets.as_deref()
    }
    pub fn is_centered(&self) -> bool {
        self.offsets.is_some()
    }

    /// Left endpoint of sub-interval `m`.
    pub fn interval_start(&self, m: usize) -> f64 {
        -self.radius + m as f64 * self.delta
    }

    /// Knot grid `-R, …, R`.
    pub fn knots(&self) -> Vec<f64> {
        (0..=self.intervals).map(|m| self.interval_start(m)).collect()
    }

    /// Whether every element is continuously differentiable (needed for
    /// second derivatives of the cone maps).
    pub fn is_smooth(&self) -> bool {
        self.kind == FamilyKind::HigherOrder
    }

    /// `T_j(x)` (order 0, centered if the family is) or its first/second
    /// derivative. Derivatives are right-continuous at knots; the
    /// piecewise-linear family reports a zero second derivative.
    pub fn eval(&self, j: usize, x: f64, order: u8) -> f64 {
        let e = self.elements[j];
        let raw = match e.interval {
            None => match order {
                0 => x,
                1 => 1.0,
                _ => 0.0,
            },
            Some(m) => {
                let inv = 1.0 / self.delta;
                let t = (x - self.interval_start(m)) * inv;
                let inside = (0.0..1.0).contains(&t);
                match (e.shape, order) {
                    (ElementShape::Step, 0) => t.clamp(0.0, 1.0),
                    (ElementShape::Step, 1) => {
                        if inside {
                            inv
                        } else {
                            0.0
                        }
                    }
                    (ElementShape::Step, _) => 0.0,
                    (ElementShape::QuadPlus | ElementShape::QuadMinus, 0) => {
                        if t <= 0.0 {
                            0.0
                        } else if t < 1.0 {
                            t * t
                        } else {
                            2.0 * t - 1.0
                        }
                    }
                    (ElementShape::QuadPlus | ElementShape::QuadMinus, 1) => {
                        if t < 0.0 {
                            0.0
                        } else if t < 1.0 {
                            2.0 * t * inv
                        } else {
                            2.0 * inv
                        }
                    }
                    (ElementShape::QuadPlus | ElementShape::QuadMinus, _) => {
                        if inside {
                            2.0 * inv * inv
                        } else {
                            0.0
                        }
                    }
                    (ElementShape::CubPlus | ElementShape::CubMinus, 0) => {
                        if t <= 0.0 {
                            0.0
                        } else if t < 1.0 {
                            t * t * (3.0 - 2.0 * t)
                        } else {
                            1.0
                        }
                    }
                    (ElementShape::CubPlus | ElementShape::CubMinus, 1) => {
                        if inside {
                            6.0 * t * (1.0 - t) * inv
                        } else {
                            0.0
                        }
                    }
                    (ElementShape::CubPlus | ElementShape::CubMinus, _) => {
                        if inside {
                            (6.0 - 12.0 * t) * inv * inv
                        } else {
                            0.0
                        }
                    }
                    (ElementShape::Linear, _) => unreachable!("linear element has no interval"),
                }
            }
        };
        let signed = e.shape.sign() * raw;
        match (&self.offsets, order) {
            (Some(c), 0) => signed - c[j],
            _ => signed,
        }
    }

    pub(crate) fn piece_count(&self) -> usize {
        self.intervals + 2
    }

    /// Anchor of piece `p` (the local variable is `u = x - anchor`).
    fn piece_anchor(&self, p: usize) -> f64 {
        if p == 0 {
            -self.radius
        } else if p == self.intervals + 1 {
            self.radius
        } else {
            self.interval_start(p - 1)
        }
    }

    /// Local polynomial (ascending powers of `u = x - anchor`) of element `j`
    /// (or of the identity map when `j` is `None`) on piece `p`.
    pub(crate) fn piece_coeffs(&self, j: Option<usize>, order: u8, p: usize) -> [f64; 4] {
        let anchor = self.piece_anchor(p);
        let Some(j) = j else {
            return match order {
                0 => [anchor, 1.0, 0.0, 0.0],
                1 => [1.0, 0.0, 0.0, 0.0],
                _ => [0.0; 4],
            };
        };
        let e = self.elements[j];
        let mut c = match e.interval {
            None => match order {
                0 => [anchor, 1.0, 0.0, 0.0],
                1 => [1.0, 0.0, 0.0, 0.0],
                _ => [0.0; 4],
            },
            Some(m) => {
                let d = self.delta;
                let before = p <= m; // pieces 0..=m lie left of sub-interval m
                let on = p == m + 1;
                if before {
                    [0.0; 4]
                } else if on {
                    match (e.shape, order) {
                        (ElementShape::Step, 0) => [0.0, 1.0 / d, 0.0, 0.0],
                        (ElementShape::Step, 1) => [1.0 / d, 0.0, 0.0, 0.0],
                        (ElementShape::QuadPlus | ElementShape::QuadMinus, 0) => {
                            [0.0, 0.0, 1.0 / (d * d), 0.0]
                        }
                        (ElementShape::QuadPlus | ElementShape::QuadMinus, 1) => {
                            [0.0, 2.0 / (d * d), 0.0, 0.0]
                        }
                        (ElementShape::CubPlus | ElementShape::CubMinus, 0) => {
                            [0.0, 0.0, 3.0 / (d * d), -2.0 / (d * d * d)]
                        }
                        (ElementShape::CubPlus | ElementShape::CubMinus, 1) => {
                            [0.0, 6.0 / (d * d), -6.0 / (d * d * d), 0.0]
                        }
                        _ => [0.0; 4],
                    }
                } else {
                    // Right of the active sub-interval.
                    match (e.shape, order) {
                        (ElementShape::Step | ElementShape::CubPlus | ElementShape::CubMinus, 0) => {
                            [1.0, 0.0, 0.0, 0.0]
                        }
                        (ElementShape::QuadPlus | ElementShape::QuadMinus, 0) => {
                            let a = self.interval_start(m);
                            [2.0 * (anchor - a) / d - 1.0, 2.0 / d, 0.0, 0.0]
                        }
                        (ElementShape::QuadPlus | ElementShape::QuadMinus, 1) => {
                            [2.0 / d, 0.0, 0.0, 0.0]
                        }
                        _ => [0.0; 4],
                    }
                }
            }
        };
        let s = e.shape.sign();
        for v in c.iter_mut() {
            *v *= s;
        }
        if order == 0 {
            if let Some(off) = &self.offsets {
                c[0] -= off[j];
            }
        }
        c
    }

    /// `∫ f g dρ₁` where `f`, `g` are elements (or the identity for `None`)
    /// differentiated `order_f`/`order_g` times.
    pub fn inner(&self, f: Option<usize>, order_f: u8, g: Option<usize>, order_g: u8) -> f64 {
        let mut total = 0.0;
        for p in 0..self.piece_count() {
            let a = self.piece_coeffs(f, order_f, p);
            let b = self.piece_coeffs(g, order_g, p);
            let mom = &self.piece_moments[p];
            for (i, ai) in a.iter().enumerate() {
                if *ai == 0.0 {
                    continue;
                }
                for (k, bk) in b.iter().enumerate() {
                    total += ai * bk * mom[i + k];
                }
            }
        }
        total
    }

    /// `E_ρ₁[T_j]` of the current (possibly centered) element.
    pub fn mean(&self, j: usize) -> f64 {
        (0..self.piece_count())
            .map(|p| dot4(&self.piece_coeffs(Some(j), 0, p), &self.piece_moments[p]))
            .sum()
    }

    /// Node/weight table for the entropy integrals (built once, cached).
    pub fn entropy_rule(&self) -> &EntropyRule {
        self.entropy_rule.get_or_init(|| self.build_entropy_rule())
    }

    fn build_entropy_rule(&self) -> EntropyRule {
        let r = self.radius;
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        // Tails: every derivative is constant there.
        nodes.push(-r - 1.0);
        weights.push(self.piece_moments[0][0]);
        match self.kind {
            FamilyKind::PwLinear => {
                for m in 0..self.intervals {
                    nodes.push(self.interval_start(m) + 0.5 * self.delta);
                    weights.push(self.piece_moments[m + 1][0]);
                }
            }
            FamilyKind::HigherOrder => {
                let (t, w) = gauss_legendre(ENTROPY_NODES);
                let half = 0.5 * self.delta;
                for m in 0..self.intervals {
                    let mid = self.interval_start(m) + half;
                    for (ti, wi) in t.iter().zip(&w) {
                        let x = mid + half * ti;
                        nodes.push(x);
                        weights.push(wi * half * crate::integrate::std_normal_pdf(x));
                    }
                }
            }
        }
        nodes.push(r + 1.0);
        weights.push(self.piece_moments[self.intervals + 1][0]);
        let derivatives =
            DMatrix::from_fn(nodes.len(), self.len(), |q, j| self.eval(j, nodes[q], 1));
        EntropyRule { weights: DVector::from_vec(weights), derivatives }
    }
}

fn dot4(c: &[f64; 4], mom: &[f64; MAX_MOMENT_ORDER + 1]) -> f64 {
    c.iter().zip(mom).map(|(a, b)| a * b).sum()
}

/// Point `(α, λ, v)` of the augmented pointed cone:
/// `T(x)_i = α x_i + Σ_j λ_{i,j} T_j(x_i) + v_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeParams {
    pub alpha: f64,
    /// `d × J`, nonnegative.
    pub lambda: DMatrix<f64>,
    pub v: DVector<f64>,
}

impl ConeParams {
    pub fn new(alpha: f64, lambda: DMatrix<f64>, v: DVector<f64>) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Contract(format!("alpha must be positive, got {alpha}")));
        }
        if lambda.nrows() != v.len() {
            return Err(Error::Contract(format!(
                "lambda has {} rows but v has {} entries",
                lambda.nrows(),
                v.len()
            )));
        }
        if lambda.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Contract("lambda must be finite and nonnegative".into()));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("v must be finite".into()));
        }
        Ok(Self { alpha, lambda, v })
    }

    /// `α·id` in dimension `d` with `J` zero coefficients per coordinate.
    pub fn identity(d: usize, j: usize, alpha: f64) -> Self {
        Self { alpha, lambda: DMatrix::zeros(d, j), v: DVector::zeros(d) }
    }

    pub fn dim(&self) -> usize {
        self.v.len()
    }

    pub fn n_elements(&self) -> usize {
        self.lambda.ncols()
    }

    fn check_family(&self, fam: &MapFamily1D) -> Result<()> {
        if self.lambda.ncols() != fam.len() {
            return Err(Error::Contract(format!(
                "lambda has {} columns but the family has {} elements",
                self.lambda.ncols(),
                fam.len()
            )));
        }
        Ok(())
    }

    /// Coordinate map `x ↦ T_i(x)`.
    pub fn coordinate(&self, fam: &MapFamily1D, i: usize, x: f64) -> f64 {
        let mut s = self.alpha * x + self.v[i];
        for j in 0..fam.len() {
            let l = self.lambda[(i, j)];
            if l != 0.0 {
                s += l * fam.eval(j, x, 0);
            }
        }
        s
    }

    /// First (`order = 1`) or second (`order = 2`) derivative of `T_i`.
    pub fn coordinate_derivative(&self, fam: &MapFamily1D, i: usize, x: f64, order: u8) -> f64 {
        let mut s = if order == 1 { self.alpha } else { 0.0 };
        for j in 0..fam.len() {
            let l = self.lambda[(i, j)];
            if l != 0.0 {
                s += l * fam.eval(j, x, order);
            }
        }
        s
    }

    /// `T(x)`; coordinate `i` depends on `x_i` only.
    pub fn eval_map(&self, fam: &MapFamily1D, x: &[f64]) -> Result<Vec<f64>> {
        self.check_family(fam)?;
        if x.len() != self.dim() {
            return Err(Error::Contract(format!(
                "point has dimension {} but the map has {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(x.iter().enumerate().map(|(i, &xi)| self.coordinate(fam, i, xi)).collect())
    }

    /// Diagonal of `DT(x)`.
    pub fn jacobian_diag(&self, fam: &MapFamily1D, x: &[f64]) -> Result<Vec<f64>> {
        self.check_family(fam)?;
        if x.len() != self.dim() {
            return Err(Error::Contract("dimension mismatch".into()));
        }
        Ok(x
            .iter()
            .enumerate()
            .map(|(i, &xi)| self.coordinate_derivative(fam, i, xi, 1))
            .collect())
    }

    /// Solves `T_i(x) = y` to `|T_i(x) - y| ≤ tol·(1 + |y|)`.
    ///
    /// Brackets by geometric expansion around the affine guess, bisects, then
    /// polishes with at most five Newton steps kept inside the bracket.
    pub fn invert_coordinate(&self, fam: &MapFamily1D, i: usize, y: f64, tol: f64) -> Result<f64> {
        self.check_family(fam)?;
        if i >= self.dim() {
            return Err(Error::Contract(format!("coordinate {i} out of range")));
        }
        if !y.is_finite() {
            return Err(Error::Contract(format!("cannot invert non-finite value {y}")));
        }
        let f = |x: f64| self.coordinate(fam, i, x) - y;
        let goal = tol * (1.0 + y.abs());
        let guess = (y - self.v[i]) / self.alpha;
        let mut width = 1.0 + fam.radius();
        let (mut lo, mut hi) = (guess - width, guess + width);
        let mut expansions = 0;
        while f(lo) > 0.0 || f(hi) < 0.0 {
            width *= 2.0;
            lo = guess - width;
            hi = guess + width;
            expansions += 1;
            if expansions > 200 {
                return Err(Error::Numerical(format!(
                    "could not bracket T_{i}(x) = {y}; the coordinate map may not be increasing"
                )));
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..200 {
            let fx = f(x);
            if fx.abs() <= goal {
                return Ok(x);
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo <= 1e-3 * (1.0 + x.abs()) {
                break;
            }
            x = 0.5 * (lo + hi);
        }
        for _ in 0..5 {
            let fx = f(x);
            if fx.abs() <= goal {
                return Ok(x);
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            let slope = self.coordinate_derivative(fam, i, x, 1);
            let step = x - fx / slope;
            x = if slope > 0.0 && step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        }
        // Newton may stall on a kink; finish by bisection.
        for _ in 0..200 {
            let fx = f(x);
            if fx.abs() <= goal {
                return Ok(x);
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi <= lo {
                break;
            }
            x = 0.5 * (lo + hi);
        }
        let fx = f(x);
        if fx.abs() <= goal {
            Ok(x)
        } else {
            Err(Error::Numerical(format!(
                "inversion of coordinate {i} at y = {y} stopped at residual {fx:e}"
            )))
        }
    }
}

/// A coordinate map stored as one cubic per piece (left tail, sub-intervals,
/// right tail), for O(1) evaluation and fast inversion.
#[derive(Debug, Clone, PartialEq)]
pub struct CompiledMap {
    radius: f64,
    delta: f64,
    intervals: usize,
    coeffs: Vec<[f64; 4]>,
    alpha: f64,
    shift: f64,
}

impl CompiledMap {
    fn locate(&self, x: f64) -> (usize, f64) {
        if x < -self.radius {
            (0, x + self.radius)
        } else if x >= self.radius {
            (self.intervals + 1, x - self.radius)
        } else {
            let m = (((x + self.radius) / self.delta).floor() as usize).min(self.intervals - 1);
            (m + 1, x - (-self.radius + m as f64 * self.delta))
        }
    }

    /// `T(x)`, `T'(x)` or `T''(x)` for `order` 0, 1, 2.
    pub fn eval(&self, x: f64, order: u8) -> f64 {
        let (p, u) = self.locate(x);
        let c = &self.coeffs[p];
        match order {
            0 => c[0] + u * (c[1] + u * (c[2] + u * c[3])),
            1 => c[1] + u * (2.0 * c[2] + u * 3.0 * c[3]),
            _ => 2.0 * c[2] + 6.0 * c[3] * u,
        }
    }

    /// Solves `T(x) = y` to `|T(x) - y| ≤ tol·(1 + |y|)` by safeguarded Newton.
    pub fn invert(&self, y: f64, tol: f64) -> Result<f64> {
        if !y.is_finite() {
            return Err(Error::Contract(format!("cannot invert non-finite value {y}")));
        }
        let goal = tol * (1.0 + y.abs());
        let f = |x: f64| self.eval(x, 0) - y;
        let mut x = (y - self.shift) / self.alpha;
        let mut fx = f(x);
        if fx.abs() <= goal {
            return Ok(x);
        }
        let mut width = 1.0;
        let (mut lo, mut hi) = if fx > 0.0 { (x - width, x) } else { (x, x + width) };
        let mut expansions = 0;
        while f(lo) > 0.0 || f(hi) < 0.0 {
            width *= 2.0;
            if fx > 0.0 {
                lo = x - width;
            } else {
                hi = x + width;
            }
            expansions += 1;
            if expansions > 200 {
                return Err(Error::Numerical(format!("could not bracket T(x) = {y}")));
            }
        }
        for _ in 0..200 {
            let slope = self.eval(x, 1);
            let newton = x - fx / slope;
            x = if slope > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            fx = f(x);
            if fx.abs() <= goal {
                return Ok(x);
            }
            if fx > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo <= f64::EPSILON * (1.0 + x.abs()) {
                break;
            }
        }
        Err(Error::Numerical(format!(
            "inversion at y = {y} stopped at residual {fx:e}"
        )))
    }
}

impl ConeParams {
    /// Compiles coordinate `i` into per-piece cubics.
    pub fn compile(&self, fam: &MapFamily1D, i: usize) -> CompiledMap {
        let coeffs = (0..fam.piece_count())
            .map(|p| {
                let mut c = fam.piece_coeffs(None, 0, p);
                for v in c.iter_mut() {
                    *v *= self.alpha;
                }
                c[0] += self.v[i];
                for j in 0..fam.len() {
                    let l = self.lambda[(i, j)];
                    if l != 0.0 {
                        let e = fam.piece_coeffs(Some(j), 0, p);
                        for k in 0..4 {
                            c[k] += l * e[k];
                        }
                    }
                }
                c
            })
            .collect();
        CompiledMap {
            radius: fam.radius(),
            delta: fam.delta(),
            intervals: fam.intervals(),
            coeffs,
            alpha: self.alpha,
            shift: self.v[i],
        }
    }
}

/// One-dimensional compatibility test: `f ∘ g⁻¹` strictly increasing on
/// `grid`.
///
/// Both callables must be strictly increasing on the probed range; a
/// decreasing input is reported as a contract violation.
pub fn check_compatibility_1d(
    f: impl Fn(f64) -> f64,
    g: impl Fn(f64) -> f64,
    grid: &[f64],
) -> Result<bool> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Contract("grid must be strictly increasing".into()));
    }
    let lo = grid[0];
    let hi = grid[grid.len() - 1];
    let probe: Vec<f64> = (0..=64).map(|k| lo + (hi - lo) * k as f64 / 64.0).collect();
    for (name, h) in [("f", &f as &dyn Fn(f64) -> f64), ("g", &g)] {
        if probe.windows(2).any(|w| !(h(w[0]) < h(w[1]))) {
            return Err(Error::Contract(format!("{name} is not strictly increasing")));
        }
    }
    // Evaluate f ∘ g⁻¹ on the images g(grid) by bisection inversion of g.
    let invert = |y: f64| {
        let (mut a, mut b) = (lo, hi);
        let mut w = hi - lo + 1.0;
        while g(a) > y {
            a -= w;
            w *= 2.0;
        }
        w = hi - lo + 1.0;
        while g(b) < y {
            b += w;
            w *= 2.0;
        }
        for _ in 0..200 {
            let m = 0.5 * (a + b);
            if g(m) < y {
                a = m;
            } else {
                b = m;
            }
            if b - a <= 1e-15 * (1.0 + m.abs()) {
                break;
            }
        }
        0.5 * (a + b)
    };
    let composed: Vec<f64> = grid.iter().map(|&x| f(invert(g(x)))).collect();
    Ok(composed.windows(2).all(|w| w[0] < w[1]))
}
