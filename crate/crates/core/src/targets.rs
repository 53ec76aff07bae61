//! Target potentials `V` (with `π ∝ e^{-V}`), synthetic data, the Langevin
//! baseline and covariance metrics.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::{Bernoulli, Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::RngStream;

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub enum Potential {
    /// `½ (x - m)ᵀ P (x - m)` with precision `P = Σ⁻¹`.
    Gaussian { mean: DVector<f64>, precision: DMatrix<f64> },
    /// `Σ_i -log Σ_k w_ik exp(-(x_i - m_ik)²/2)`.
    ProductGmm { centers: Vec<Vec<f64>>, weights: Vec<Vec<f64>> },
    /// Logistic regression negative log-likelihood under a flat prior.
    Logistic { x: DMatrix<f64>, y: DVector<f64> },
    Custom { value: Arc<ValueFn>, grad: Arc<GradFn> },
}

impl fmt::Debug for Potential {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian { .. } => f.write_str("Gaussian"),
            Self::ProductGmm { .. } => f.write_str("ProductGmm"),
            Self::Logistic { .. } => f.write_str("Logistic"),
            Self::Custom { .. } => f.write_str("Custom"),
        }
    }
}

/// Closed-form product-Gaussian mean-field solution.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldReference {
    pub means: DVector<f64>,
    pub variances: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct Target {
    pub d: usize,
    pub potential: Potential,
    /// Strong convexity `ℓ_V`, when known.
    pub ell: Option<f64>,
    /// Smoothness `L_V`, when known.
    pub l: Option<f64>,
    pub mf_reference: Option<MeanFieldReference>,
    /// Constant added to `V`; it never changes the target measure.
    pub shift: f64,
}

impl Target {
    pub fn custom(
        d: usize,
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        Self {
            d,
            potential: Potential::Custom { value: Arc::new(value), grad: Arc::new(grad) },
            ell: None,
            l: None,
            mf_reference: None,
            shift: 0.0,
        }
    }

    pub fn with_bounds(mut self, ell: Option<f64>, l: Option<f64>) -> Self {
        self.ell = ell;
        self.l = l;
        self
    }

    /// The same target with `V` replaced by `V + c`.
    pub fn shifted(&self, c: f64) -> Self {
        let mut out = self.clone();
        out.shift += c;
        out
    }

    /// `(mean, precision)` when `V` is quadratic.
    pub fn quadratic(&self) -> Option<(&DVector<f64>, &DMatrix<f64>)> {
        match &self.potential {
            Potential::Gaussian { mean, precision } => Some((mean, precision)),
            _ => None,
        }
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.d);
        let raw = match &self.potential {
            Potential::Gaussian { mean, precision } => {
                let r = DVector::from_iterator(self.d, x.iter().zip(mean.iter()).map(|(a, b)| a - b));
                0.5 * r.dot(&(precision * &r))
            }
            Potential::ProductGmm { centers, weights } => x
                .iter()
                .enumerate()
                .map(|(i, &xi)| gmm_value_1d(xi, &centers[i], &weights[i]))
                .sum(),
            Potential::Logistic { x: data, y } => {
                let mut s = 0.0;
                for r in 0..data.nrows() {
                    let z = row_dot(data, r, x);
                    s += softplus(z) - y[r] * z;
                }
                s
            }
            Potential::Custom { value, .. } => value(x),
        };
        raw + self.shift
    }

    pub fn grad_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.d);
        match &self.potential {
            Potential::Gaussian { mean, precision } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = (0..self.d).map(|k| precision[(i, k)] * (x[k] - mean[k])).sum();
                }
            }
            Potential::ProductGmm { centers, weights } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = gmm_grad_1d(x[i], &centers[i], &weights[i]);
                }
            }
            Potential::Logistic { x: data, y } => {
                out.iter_mut().for_each(|o| *o = 0.0);
                for r in 0..data.nrows() {
                    let z = row_dot(data, r, x);
                    let c = sigmoid(z) - y[r];
                    for (k, o) in out.iter_mut().enumerate() {
                        *o += c * data[(r, k)];
                    }
                }
            }
            Potential::Custom { grad, .. } => grad(x, out),
        }
    }

    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        self.grad_into(x, &mut g);
        g
    }
}

fn row_dot(m: &DMatrix<f64>, r: usize, x: &[f64]) -> f64 {
    x.iter().enumerate().map(|(k, xk)| m[(r, k)] * xk).sum()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn gmm_value_1d(x: f64, centers: &[f64], weights: &[f64]) -> f64 {
    let exps: Vec<f64> = centers
        .iter()
        .zip(weights)
        .map(|(m, w)| w.ln() - 0.5 * (x - m).powi(2))
        .collect();
    let top = exps.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(top + exps.iter().map(|e| (e - top).exp()).sum::<f64>().ln())
}

fn gmm_grad_1d(x: f64, centers: &[f64], weights: &[f64]) -> f64 {
    let logs: Vec<f64> = centers
        .iter()
        .zip(weights)
        .map(|(m, w)| w.ln() - 0.5 * (x - m).powi(2))
        .collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut num = 0.0;
    let mut den = 0.0;
    for (l, m) in logs.iter().zip(centers) {
        let r = (l - top).exp();
        num += r * (x - m);
        den += r;
    }
    num / den
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    let scale = m.amax().max(f64::MIN_POSITIVE);
    m.is_square() && (m - m.transpose()).amax() <= 1e-12 * scale
}

/// Gaussian target `N(mean, Σ)`.
pub fn gaussian_target(mean: DVector<f64>, sigma: &DMatrix<f64>) -> Result<Target> {
    let d = mean.len();
    if sigma.shape() != (d, d) {
        return Err(Error::Config(format!("covariance must be {d}×{d}")));
    }
    if !is_symmetric(sigma) {
        return Err(Error::Config("covariance is not symmetric".into()));
    }
    let chol = sigma
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Config("covariance is not positive definite".into()))?;
    let precision = chol.inverse();
    let precision = (&precision + precision.transpose()) * 0.5;
    let eig = SymmetricEigen::new(precision.clone());
    let ell = eig.eigenvalues.min();
    let l = eig.eigenvalues.max();
    if !(ell > 0.0) {
        return Err(Error::Config("covariance is numerically singular".into()));
    }
    let variances = DVector::from_iterator(d, (0..d).map(|i| 1.0 / precision[(i, i)]));
    Ok(Target {
        d,
        mf_reference: Some(MeanFieldReference { means: mean.clone(), variances }),
        potential: Potential::Gaussian { mean, precision },
        ell: Some(ell),
        l: Some(l),
        shift: 0.0,
    })
}

/// Random covariance `Σ = AAᵀ` with standard normal `A`.
pub fn random_covariance(stream: RngStream, d: usize) -> DMatrix<f64> {
    let a = crate::integrate::sample_std_normal(stream, d, d);
    &a * a.transpose()
}

/// Separable mixture of unit-variance Gaussians, one univariate mixture per
/// coordinate.
pub fn product_gmm_target(centers: Vec<Vec<f64>>, weights: Vec<Vec<f64>>) -> Result<Target> {
    let d = centers.len();
    if d == 0 || weights.len() != d {
        return Err(Error::Config("need one center list and one weight list per coordinate".into()));
    }
    for (i, (c, w)) in centers.iter().zip(&weights).enumerate() {
        if c.is_empty() || c.len() != w.len() {
            return Err(Error::Config(format!("coordinate {i}: centers and weights differ in length")));
        }
        if w.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Config(format!("coordinate {i}: weights must be positive")));
        }
        let s: f64 = w.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("coordinate {i}: weights sum to {s}, not 1")));
        }
    }
    let single = centers.iter().all(|c| c.len() == 1);
    let mf_reference = single.then(|| MeanFieldReference {
        means: DVector::from_iterator(d, centers.iter().map(|c| c[0])),
        variances: DVector::from_element(d, 1.0),
    });
    Ok(Target {
        d,
        potential: Potential::ProductGmm { centers, weights },
        ell: single.then_some(1.0),
        // V_i'' = 1 - Var(component mean | x) ≤ 1.
        l: Some(1.0),
        mf_reference,
        shift: 0.0,
    })
}

/// Logistic regression with flat prior: `V(θ) = Σ log(1 + e^{θᵀX_i}) - Y_i θᵀX_i`.
pub fn blr_target(x: DMatrix<f64>, y: DVector<f64>) -> Result<Target> {
    if x.nrows() != y.len() {
        return Err(Error::Config("design and labels disagree in length".into()));
    }
    if y.iter().any(|v| *v != 0.0 && *v != 1.0) {
        return Err(Error::Config("labels must be 0 or 1".into()));
    }
    let d = x.ncols();
    let gram = x.transpose() * &x;
    let l = SymmetricEigen::new(gram).eigenvalues.max() / 4.0;
    Ok(Target {
        d,
        potential: Potential::Logistic { x, y },
        ell: None,
        l: Some(l),
        mf_reference: None,
        shift: 0.0,
    })
}

/// Label model for synthetic regression data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlrLink {
    Logistic,
    /// `P(Y = 1) = min(1, exp(θᵀX))`.
    ClippedExp,
}

#[derive(Debug, Clone)]
pub struct BlrData {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub theta_star: DVector<f64>,
    /// Fraction of observations whose success probability had to be clipped.
    pub clip_rate: f64,
}

/// `θ* ~ N(0, I)`, Gaussian design rescaled so that `λ_max(XᵀX) = 1`,
/// Bernoulli labels.
pub fn blr_synthesize(stream: RngStream, n: usize, d: usize, link: BlrLink) -> Result<BlrData> {
    if n == 0 || d == 0 {
        return Err(Error::Config("need n, d ≥ 1".into()));
    }
    let theta_star = DVector::from_column_slice(
        crate::integrate::sample_std_normal(stream.split(0), d, 1).as_slice(),
    );
    let mut x = crate::integrate::sample_std_normal(stream.split(1), n, d);
    let top = SymmetricEigen::new(x.transpose() * &x).eigenvalues.max();
    x /= top.sqrt();
    let mut rng = stream.split(2).rng();
    let mut clipped = 0usize;
    let y = DVector::from_iterator(
        n,
        (0..n).map(|r| {
            let z: f64 = (0..d).map(|k| x[(r, k)] * theta_star[k]).sum();
            let p = match link {
                BlrLink::Logistic => sigmoid(z),
                BlrLink::ClippedExp => {
                    let p = z.exp();
                    if p > 1.0 {
                        clipped += 1;
                    }
                    p.min(1.0)
                }
            };
            let b = Bernoulli::new(p).expect("probability in [0, 1]");
            if b.sample(&mut rng) {
                1.0
            } else {
                0.0
            }
        }),
    );
    Ok(BlrData { x, y, theta_star, clip_rate: clipped as f64 / n as f64 })
}

/// Unadjusted Langevin: `x ← x - h∇V(x) + √(2h) ξ`, chains started at `init`.
///
/// Chain `c` draws from `stream.split(c)`, so the result does not depend on
/// the thread schedule.
pub fn lmc_sample_from(
    target: &Target,
    init: &[f64],
    h: f64,
    iters: usize,
    n_chains: usize,
    stream: RngStream,
) -> Result<DMatrix<f64>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("step size must be positive, got {h}")));
    }
    if init.len() != target.d {
        return Err(Error::Contract("initial point has the wrong dimension".into()));
    }
    let d = target.d;
    let noise = (2.0 * h).sqrt();
    let chains: Vec<Result<Vec<f64>>> = (0..n_chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream.split(c as u64).rng();
            let mut x = init.to_vec();
            let mut g = vec![0.0; d];
            for t in 0..iters {
                target.grad_into(&x, &mut g);
                for k in 0..d {
                    let xi: f64 = rng.sample(StandardNormal);
                    x[k] += -h * g[k] + noise * xi;
                }
                if x.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Divergence {
                        iteration: t,
                        reason: format!("Langevin chain {c} left the finite range"),
                    });
                }
            }
            Ok(x)
        })
        .collect();
    let mut out = DMatrix::zeros(n_chains, d);
    for (c, chain) in chains.into_iter().enumerate() {
        let x = chain?;
        for k in 0..d {
            out[(c, k)] = x[k];
        }
    }
    Ok(out)
}

/// Langevin chains started at the origin.
pub fn lmc_sample(
    target: &Target,
    h: f64,
    iters: usize,
    n_chains: usize,
    stream: RngStream,
) -> Result<DMatrix<f64>> {
    lmc_sample_from(target, &vec![0.0; target.d], h, iters, n_chains, stream)
}

/// Gradient descent with step `1/L_V` until `‖∇V‖ ≤ tol`; for a convex
/// potential this is the posterior mode.
pub fn find_mode(target: &Target, start: &[f64], tol: f64, max_iters: usize) -> Result<Vec<f64>> {
    let l = target
        .l
        .filter(|l| *l > 0.0)
        .ok_or_else(|| Error::Config("mode search needs the smoothness constant L".into()))?;
    let mut x = start.to_vec();
    let mut g = vec![0.0; target.d];
    for _ in 0..max_iters {
        target.grad_into(&x, &mut g);
        if g.iter().map(|v| v * v).sum::<f64>().sqrt() <= tol {
            return Ok(x);
        }
        for (xi, gi) in x.iter_mut().zip(&g) {
            *xi -= gi / l;
        }
    }
    Err(Error::Numerical(format!("mode search did not reach ‖∇V‖ ≤ {tol:e} in {max_iters} steps")))
}

/// Squared Bures–Wasserstein distance `tr A + tr B - 2 tr (A^{1/2} B A^{1/2})^{1/2}`.
pub fn bures_wasserstein_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() || !is_symmetric(a) || !is_symmetric(b) {
        return Err(Error::Contract("inputs must be symmetric matrices of equal size".into()));
    }
    let ra = psd_sqrt(a);
    let inner = &ra * b * &ra;
    let cross: f64 = SymmetricEigen::new((&inner + inner.transpose()) * 0.5)
        .eigenvalues
        .iter()
        .map(|e| e.max(0.0).sqrt())
        .sum();
    Ok((a.trace() + b.trace() - 2.0 * cross).max(0.0))
}

fn psd_sqrt(a: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((a + a.transpose()) * 0.5);
    let s = eig.eigenvalues.map(|e| e.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Column means and unbiased covariance of the rows of `samples`.
pub fn empirical_moments(samples: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.nrows() as f64;
    let mean = samples.row_mean().transpose();
    let mut centered = samples.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0).max(1.0);
    (mean, cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_reference_and_constants() {
        let t = gaussian_target(DVector::zeros(2), &DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])))
            .unwrap();
        let r = t.mf_reference.unwrap();
        assert!((r.variances[0] - 1.0).abs() < 1e-14 && (r.variances[1] - 4.0).abs() < 1e-14);
        assert!((t.ell.unwrap() - 0.25).abs() < 1e-14 && (t.l.unwrap() - 1.0).abs() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(gaussian_target(DVector::zeros(2), &bad), Err(Error::Config(_))));
    }

    #[test]
    fn gmm_weights_validated() {
        assert!(product_gmm_target(vec![vec![0.0, 1.0]], vec![vec![0.5, 0.6]]).is_err());
        let t = product_gmm_target(vec![vec![-1.0, 1.0]], vec![vec![0.5, 0.5]]).unwrap();
        assert!(t.grad(&[0.0])[0].abs() < 1e-15);
        assert!(t.ell.is_none());
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, -1.0, 0.5]);
        let y = DVector::from_vec(vec![1.0, 0.0]);
        let t = blr_target(x, y).unwrap();
        let g = t.grad(&[0.0, 0.0]);
        assert!((g[0] - (-0.5 - 0.5)).abs() < 1e-15);
        assert!((g[1] - (-1.0 + 0.25)).abs() < 1e-15);
    }

    #[test]
    fn bures_commuting_case() {
        let a = DMatrix::identity(3, 3) * 4.0;
        let b = DMatrix::identity(3, 3) * 9.0;
        assert!((bures_wasserstein_sq(&a, &b).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(bures_wasserstein_sq(&a, &a).unwrap(), 0.0);
    }
}
