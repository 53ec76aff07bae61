//! KL surrogate `E_ρ[V∘T] - Σ_i ∫ log ∂_i T_i dρ₁` over the augmented cone
//! and its gradients in `(λ, v)`.
//!
//! The entropy part is evaluated deterministically with the family's
//! entropy rule; the potential part is either a Monte Carlo average or, for
//! quadratic `V`, a closed form.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrate::{sample_std_normal, RngStream};
use crate::maps1d::{ConeParams, MapFamily1D};
use crate::targets::Target;

/// Samples per parallel work unit; partial sums are reduced in chunk order.
const CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradResult {
    pub grad_lambda: DMatrix<f64>,
    pub grad_v: DVector<f64>,
    /// Surrogate value from the same evaluation, when available.
    pub value: Option<f64>,
    /// Monte Carlo batch size (0 for closed-form gradients).
    pub batch_size: usize,
}

fn check_shapes(params: &ConeParams, fam: &MapFamily1D, d: usize) -> Result<()> {
    if params.lambda.ncols() != fam.len() {
        return Err(Error::Contract(format!(
            "lambda has {} columns, family has {} elements",
            params.lambda.ncols(),
            fam.len()
        )));
    }
    if params.dim() != d {
        return Err(Error::Contract(format!(
            "parameters have dimension {}, target has {d}",
            params.dim()
        )));
    }
    Ok(())
}

/// Per-node slopes `α + Σ_j λ_ij T_j'(x_q)` of coordinate `i`.
fn slopes(params: &ConeParams, fam: &MapFamily1D, i: usize) -> Result<DVector<f64>> {
    let rule = fam.entropy_rule();
    let row = params.lambda.row(i).transpose();
    let den = (&rule.derivatives * row).add_scalar(params.alpha);
    if let Some(q) = den.iter().position(|x| !(*x > 0.0)) {
        return Err(Error::Invariant(format!(
            "coordinate {i}: map slope {} ≤ 0 at entropy node {q}",
            den[q]
        )));
    }
    Ok(den)
}

/// `Σ_i ∫ log(α + Σ_j λ_ij T_j'(x)) ρ₁(dx)`.
pub fn entropy_value(params: &ConeParams, fam: &MapFamily1D) -> Result<f64> {
    let w = &fam.entropy_rule().weights;
    let mut total = 0.0;
    for i in 0..params.dim() {
        let den = slopes(params, fam, i)?;
        total += den.iter().zip(w.iter()).map(|(s, wq)| wq * s.ln()).sum::<f64>();
    }
    Ok(total)
}

/// Entropy contribution to `∂KL/∂λ_ij`: `-∫ T_j'(x) / (α + Σ_k λ_ik T_k'(x)) ρ₁(dx)`.
pub fn entropy_grad_lambda(params: &ConeParams, fam: &MapFamily1D) -> Result<DMatrix<f64>> {
    if params.lambda.ncols() != fam.len() {
        return Err(Error::Contract("lambda width does not match the family".into()));
    }
    let rule = fam.entropy_rule();
    let mut out = DMatrix::zeros(params.dim(), fam.len());
    for i in 0..params.dim() {
        let den = slopes(params, fam, i)?;
        let ratio = rule.weights.component_div(&den);
        let g = rule.derivatives.tr_mul(&ratio);
        out.row_mut(i).copy_from(&(-g).transpose());
    }
    Ok(out)
}

struct Partial {
    value: f64,
    grad_lambda: DMatrix<f64>,
    grad_v: DVector<f64>,
}

/// Sums `V(T(x))`, `∂_iV(T(x)) T_j(x_i)` and `∇V(T(x))` over the rows of `xs`.
fn potential_sums(
    params: &ConeParams,
    fam: &MapFamily1D,
    target: &Target,
    xs: &DMatrix<f64>,
    want_grad: bool,
) -> Result<Partial> {
    let (n, d) = xs.shape();
    let j_count = fam.len();
    let chunks: Vec<(usize, usize)> =
        (0..n).step_by(CHUNK).map(|s| (s, (s + CHUNK).min(n))).collect();
    let partials: Vec<Result<Partial>> = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = Partial {
                value: 0.0,
                grad_lambda: DMatrix::zeros(d, if want_grad { j_count } else { 0 }),
                grad_v: DVector::zeros(d),
            };
            let mut elems = vec![0.0; d * j_count];
            let mut y = vec![0.0; d];
            let mut g = vec![0.0; d];
            for r in lo..hi {
                for i in 0..d {
                    let xi = xs[(r, i)];
                    let mut yi = params.alpha * xi + params.v[i];
                    for j in 0..j_count {
                        let e = fam.eval(j, xi, 0);
                        elems[i * j_count + j] = e;
                        yi += params.lambda[(i, j)] * e;
                    }
                    y[i] = yi;
                }
                let val = target.value(&y);
                if !val.is_finite() {
                    return Err(Error::Numerical(format!("V is not finite at sample {r}")));
                }
                acc.value += val;
                if want_grad {
                    target.grad_into(&y, &mut g);
                    if let Some(k) = g.iter().position(|x| !x.is_finite()) {
                        return Err(Error::Numerical(format!(
                            "gradient of V is not finite at sample {r}, coordinate {k}"
                        )));
                    }
                    for i in 0..d {
                        acc.grad_v[i] += g[i];
                        for j in 0..j_count {
                            acc.grad_lambda[(i, j)] += g[i] * elems[i * j_count + j];
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = Partial {
        value: 0.0,
        grad_lambda: DMatrix::zeros(d, if want_grad { j_count } else { 0 }),
        grad_v: DVector::zeros(d),
    };
    for p in partials {
        let p = p?;
        total.value += p.value;
        total.grad_lambda += p.grad_lambda;
        total.grad_v += p.grad_v;
    }
    Ok(total)
}

/// Monte Carlo estimate of the KL surrogate (log-normalizers omitted).
pub fn kl_surrogate(
    params: &ConeParams,
    fam: &MapFamily1D,
    target: &Target,
    n_mc: usize,
    stream: RngStream,
) -> Result<f64> {
    check_shapes(params, fam, target.d)?;
    if n_mc == 0 {
        return Err(Error::Contract("n_mc must be at least 1".into()));
    }
    let xs = sample_std_normal(stream, n_mc, target.d);
    let sums = potential_sums(params, fam, target, &xs, false)?;
    Ok(sums.value / n_mc as f64 - entropy_value(params, fam)?)
}

/// Monte Carlo potential gradient; `value` carries the potential mean only.
pub fn potential_grad(
    params: &ConeParams,
    fam: &MapFamily1D,
    target: &Target,
    batch: usize,
    stream: RngStream,
) -> Result<GradResult> {
    check_shapes(params, fam, target.d)?;
    if batch == 0 {
        return Err(Error::Contract("batch must be at least 1".into()));
    }
    let xs = sample_std_normal(stream, batch, target.d);
    let sums = potential_sums(params, fam, target, &xs, true)?;
    let inv = 1.0 / batch as f64;
    Ok(GradResult {
        grad_lambda: sums.grad_lambda * inv,
        grad_v: sums.grad_v * inv,
        value: Some(sums.value * inv),
        batch_size: batch,
    })
}

/// Full stochastic KL gradient; with `preconditioned`, each coordinate block
/// of `grad_lambda` is replaced by `Q1⁻¹ grad_lambda_i` (the `v` block is
/// never preconditioned).
pub fn kl_grad(
    params: &ConeParams,
    fam: &MapFamily1D,
    gd: &crate::gram::GramData,
    target: &Target,
    batch: usize,
    stream: RngStream,
    preconditioned: bool,
) -> Result<GradResult> {
    let mut g = potential_grad(params, fam, target, batch, stream)?;
    g.grad_lambda += entropy_grad_lambda(params, fam)?;
    let h = entropy_value(params, fam)?;
    g.value = g.value.map(|pv| pv - h);
    if preconditioned {
        g.grad_lambda = gd.precondition(&g.grad_lambda);
    }
    Ok(g)
}

/// A KL surrogate with value and (unpreconditioned) gradient oracles.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn family(&self) -> &MapFamily1D;
    fn value(&self, params: &ConeParams, stream: RngStream) -> Result<f64>;
    fn gradient(&self, params: &ConeParams, stream: RngStream) -> Result<GradResult>;
}

/// Closed-form surrogate for quadratic `V = ½(x - m)ᵀP(x - m)`.
///
/// With centered elements, `E[T_i] = v_i` and
/// `Var T_i = α² + 2α λ_iᵀs + λ_iᵀ Q1 λ_i` with `s_j = E[x T_j(x)]`, so the
/// potential term is `½[(v - m)ᵀP(v - m) + Σ_i P_ii Var T_i]`.
#[derive(Debug, Clone)]
pub struct ExactGaussianObjective {
    fam: MapFamily1D,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    s: DVector<f64>,
    q1: DMatrix<f64>,
}

impl ExactGaussianObjective {
    pub fn new(fam: &MapFamily1D, target: &Target) -> Result<Self> {
        let (mean, precision) = target
            .quadratic()
            .ok_or_else(|| Error::Contract("closed-form objective needs a quadratic target".into()))?;
        if !fam.is_centered() {
            return Err(Error::Contract("closed-form objective needs a centered family".into()));
        }
        let j = fam.len();
        let s = DVector::from_iterator(j, (0..j).map(|k| fam.inner(None, 0, Some(k), 0)));
        let q1 = DMatrix::from_fn(j, j, |a, b| fam.inner(Some(a), 0, Some(b), 0));
        Ok(Self {
            fam: fam.clone(),
            mean: mean.clone(),
            precision: precision.clone(),
            s,
            q1,
        })
    }

    /// `E_ρ[V∘T]` in closed form (without the target's constant shift).
    pub fn potential_value(&self, params: &ConeParams) -> f64 {
        let r = &params.v - &self.mean;
        let mut total = r.dot(&(&self.precision * &r));
        let a = params.alpha;
        for i in 0..params.dim() {
            let l = params.lambda.row(i).transpose();
            let var = a * a + 2.0 * a * l.dot(&self.s) + l.dot(&(&self.q1 * &l));
            total += self.precision[(i, i)] * var;
        }
        0.5 * total
    }
}

impl Objective for ExactGaussianObjective {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn family(&self) -> &MapFamily1D {
        &self.fam
    }

    fn value(&self, params: &ConeParams, _stream: RngStream) -> Result<f64> {
        check_shapes(params, &self.fam, self.dim())?;
        Ok(self.potential_value(params) - entropy_value(params, &self.fam)?)
    }

    fn gradient(&self, params: &ConeParams, _stream: RngStream) -> Result<GradResult> {
        check_shapes(params, &self.fam, self.dim())?;
        let mut grad_lambda = entropy_grad_lambda(params, &self.fam)?;
        for i in 0..params.dim() {
            let l = params.lambda.row(i).transpose();
            let g = (&self.s * params.alpha + &self.q1 * &l) * self.precision[(i, i)];
            let mut row = grad_lambda.row_mut(i);
            row += g.transpose();
        }
        let grad_v = &self.precision * (&params.v - &self.mean);
        let value = self.potential_value(params) - entropy_value(params, &self.fam)?;
        Ok(GradResult { grad_lambda, grad_v, value: Some(value), batch_size: 0 })
    }
}

/// Monte Carlo surrogate. With `common` set, every call reuses that stream
/// (common random numbers), which turns the estimate into a deterministic
/// smooth function of the parameters.
#[derive(Debug, Clone)]
pub struct MonteCarloObjective<'a> {
    pub fam: &'a MapFamily1D,
    pub target: &'a Target,
    pub batch: usize,
    pub common: Option<RngStream>,
}

impl<'a> MonteCarloObjective<'a> {
    pub fn new(fam: &'a MapFamily1D, target: &'a Target, batch: usize) -> Self {
        Self { fam, target, batch, common: None }
    }

    pub fn with_common_stream(mut self, stream: RngStream) -> Self {
        self.common = Some(stream);
        self
    }

    fn pick(&self, stream: RngStream) -> RngStream {
        self.common.unwrap_or(stream)
    }
}

impl Objective for MonteCarloObjective<'_> {
    fn dim(&self) -> usize {
        self.target.d
    }

    fn family(&self) -> &MapFamily1D {
        self.fam
    }

    fn value(&self, params: &ConeParams, stream: RngStream) -> Result<f64> {
        kl_surrogate(params, self.fam, self.target, self.batch, self.pick(stream))
    }

    fn gradient(&self, params: &ConeParams, stream: RngStream) -> Result<GradResult> {
        let mut g = potential_grad(params, self.fam, self.target, self.batch, self.pick(stream))?;
        g.grad_lambda += entropy_grad_lambda(params, self.fam)?;
        let h = entropy_value(params, self.fam)?;
        g.value = g.value.map(|pv| pv - h);
        Ok(g)
    }
}
