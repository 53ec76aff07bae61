//! Gram matrices of a centered family, the induced Wasserstein metric on
//! cone coefficients, and the regularity constant `Υ`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::maps1d::{ConeParams, MapFamily1D};

/// Gram data for one coordinate; the full metric is `Q = I_d ⊗ Q1` and is
/// never assembled.
#[derive(Debug, Clone)]
pub struct GramData {
    /// `⟨T_j, T_k⟩_{L²(ρ₁)}`.
    pub q1: DMatrix<f64>,
    /// Lower Cholesky factor of `Q1 + jitter·I`.
    pub chol: DMatrix<f64>,
    /// `⟨T_j', T_k'⟩_{L²(ρ₁)}`.
    pub q1jac: DMatrix<f64>,
    pub upsilon: f64,
    /// Diagonal shift used for the factorization (zero when none was needed).
    pub jitter: f64,
}

/// Relative pivot size below which `Q1` is treated as rank-deficient.
const PIVOT_FLOOR: f64 = 1e-13;

/// Builds `Q1`, `Q1jac`, the Cholesky factor and `Υ` from exact piecewise
/// Gaussian moments.
pub fn build_gram(fam: &MapFamily1D) -> Result<GramData> {
    if !fam.is_centered() {
        return Err(Error::Contract("Gram matrices require a centered family".into()));
    }
    let j = fam.len();
    let mut q1 = DMatrix::zeros(j, j);
    let mut q1jac = DMatrix::zeros(j, j);
    for a in 0..j {
        for b in a..j {
            let g = fam.inner(Some(a), 0, Some(b), 0);
            let h = fam.inner(Some(a), 1, Some(b), 1);
            q1[(a, b)] = g;
            q1[(b, a)] = g;
            q1jac[(a, b)] = h;
            q1jac[(b, a)] = h;
        }
    }
    from_matrices(q1, q1jac)
}

/// Factorizes a given pair of Gram matrices (useful for tests and for
/// families assembled outside this crate).
pub fn from_matrices(q1: DMatrix<f64>, q1jac: DMatrix<f64>) -> Result<GramData> {
    let j = q1.nrows();
    if j == 0 || q1.ncols() != j || q1jac.shape() != (j, j) {
        return Err(Error::Contract("Gram matrices must be square and of equal size".into()));
    }
    let q1 = symmetrize(q1);
    let q1jac = symmetrize(q1jac);
    let scale = q1.trace() / j as f64;
    if !(scale > 0.0) {
        return Err(Error::Numerical("Gram matrix has non-positive trace".into()));
    }
    let mut jitter = 0.0;
    let chol = match factor(&q1, scale) {
        Some(l) => l,
        None => {
            jitter = 1e-12 * scale;
            log::warn!("Gram matrix is rank-deficient; factorizing with jitter {jitter:e}");
            let shifted = &q1 + DMatrix::identity(j, j) * jitter;
            factor(&shifted, 0.0).ok_or_else(|| {
                Error::Numerical("Gram matrix is not positive semidefinite".into())
            })?
        }
    };
    let mut gd = GramData { q1, chol, q1jac, upsilon: 0.0, jitter };
    gd.upsilon = estimate_upsilon(&gd);
    Ok(gd)
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

fn factor(m: &DMatrix<f64>, scale: f64) -> Option<DMatrix<f64>> {
    let l = m.clone().cholesky()?.l();
    let min_pivot = l.diagonal().iter().fold(f64::INFINITY, |a, &b| a.min(b * b));
    (min_pivot > PIVOT_FLOOR * scale).then_some(l)
}

/// Largest generalized eigenvalue of `(Q1jac, Q1)`, computed by whitening
/// with the Cholesky factor.
pub fn estimate_upsilon(gd: &GramData) -> f64 {
    let w = whiten(&gd.chol, &gd.q1jac);
    let eig = SymmetricEigen::new(symmetrize(w));
    eig.eigenvalues.iter().cloned().fold(0.0, f64::max)
}

/// `L⁻¹ A L⁻ᵀ`.
fn whiten(l: &DMatrix<f64>, a: &DMatrix<f64>) -> DMatrix<f64> {
    let left = l.solve_lower_triangular(a).expect("factor has a nonzero diagonal");
    let both = l
        .solve_lower_triangular(&left.transpose())
        .expect("factor has a nonzero diagonal");
    both.transpose()
}

impl GramData {
    pub fn len(&self) -> usize {
        self.q1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.q1.nrows() == 0
    }

    /// `Q1⁻¹ g` through the Cholesky factor.
    pub fn solve(&self, g: &DVector<f64>) -> DVector<f64> {
        let y = self.chol.solve_lower_triangular(g).expect("nonzero diagonal");
        self.chol.tr_solve_lower_triangular(&y).expect("nonzero diagonal")
    }

    /// Applies `Q1⁻¹` to each row (coordinate block) of a `d × J` matrix.
    pub fn precondition(&self, g: &DMatrix<f64>) -> DMatrix<f64> {
        let rhs = g.transpose();
        let y = self.chol.solve_lower_triangular(&rhs).expect("nonzero diagonal");
        self.chol.tr_solve_lower_triangular(&y).expect("nonzero diagonal").transpose()
    }

    /// `Σ_i x_iᵀ Q1 x_i` over the rows of a `d × J` matrix.
    pub fn qnorm_sq(&self, x: &DMatrix<f64>) -> f64 {
        let qx = x * &self.q1;
        qx.component_mul(x).sum()
    }

    /// `Σ_i x_iᵀ y_i` over rows, the Euclidean pairing of two blocks.
    pub fn pairing(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
        x.component_mul(y).sum()
    }

    /// Largest eigenvalue of `Q1`.
    pub fn q1_lambda_max(&self) -> f64 {
        SymmetricEigen::new(self.q1.clone()).eigenvalues.iter().cloned().fold(0.0, f64::max)
    }

    /// Scale used by tolerance checks: `tr Q1 / J`.
    pub fn scale(&self) -> f64 {
        self.q1.trace() / self.len() as f64
    }

    /// `Υ` times `Q1` minus `Q1jac`; positive semidefinite by construction.
    pub fn upsilon_certificate(&self) -> f64 {
        let m = &self.q1 * self.upsilon - &self.q1jac;
        SymmetricEigen::new(symmetrize(m))
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }
}

fn check_pair(p1: &ConeParams, p2: &ConeParams) -> Result<()> {
    if p1.alpha != p2.alpha {
        return Err(Error::Contract(format!(
            "points lie on different pointed cones (alpha {} vs {})",
            p1.alpha, p2.alpha
        )));
    }
    if p1.lambda.shape() != p2.lambda.shape() || p1.v.len() != p2.v.len() {
        return Err(Error::Contract("parameter shapes differ".into()));
    }
    Ok(())
}

/// Squared Wasserstein distance between the pushforwards of two cone points,
/// `‖Δλ‖²_Q + ‖Δv‖²`.
pub fn q_dist_sq(p1: &ConeParams, p2: &ConeParams, gd: &GramData) -> Result<f64> {
    check_pair(p1, p2)?;
    if p1.lambda.ncols() != gd.len() {
        return Err(Error::Contract("lambda width does not match the Gram matrix".into()));
    }
    let dl = &p1.lambda - &p2.lambda;
    let dv = &p1.v - &p2.v;
    Ok(gd.qnorm_sq(&dl).max(0.0) + dv.norm_squared())
}

/// Wasserstein distance between the pushforwards of two cone points.
pub fn q_dist(p1: &ConeParams, p2: &ConeParams, gd: &GramData) -> Result<f64> {
    q_dist_sq(p1, p2, gd).map(f64::sqrt)
}

/// Constant-speed geodesic: linear interpolation of `(λ, v)`.
pub fn geodesic(p0: &ConeParams, p1: &ConeParams, t: f64) -> Result<ConeParams> {
    check_pair(p0, p1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Contract(format!("geodesic time {t} outside [0, 1]")));
    }
    let lambda = (&p0.lambda * (1.0 - t) + &p1.lambda * t).map(|x| x.max(0.0));
    let v = &p0.v * (1.0 - t) + &p1.v * t;
    Ok(ConeParams { alpha: p0.alpha, lambda, v })
}
