//! Accelerated projected, stochastic projected, and Frank–Wolfe methods over
//! cone coefficients, with the `Q1`-norm orthant projection they share.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gram::{q_dist_sq, GramData};
use crate::integrate::RngStream;
use crate::maps1d::ConeParams;
use crate::objective::Objective;
use crate::targets::Target;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Apgd,
    Spgd,
    Fw,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "apgd" => Ok(Self::Apgd),
            "spgd" => Ok(Self::Spgd),
            "fw" => Ok(Self::Fw),
            other => Err(Error::Config(format!("unknown optimizer `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptConfig {
    pub method: Method,
    pub iters: usize,
    /// Step size for `λ` (SPGD).
    pub h: Option<f64>,
    /// Step size for `v`; defaults to the `λ` step.
    pub h_v: Option<f64>,
    /// Strong convexity; `None` or 0 selects the Nesterov-γ branch of APGD.
    pub m: Option<f64>,
    /// Smoothness `M`; APGD steps with `1/M`.
    pub big_m: Option<f64>,
    pub batch: usize,
    /// KKT tolerance of the projection, relative to `tr Q1 / J`.
    pub proj_tol: f64,
    pub seed: u64,
    /// Record wall-clock milliseconds (off keeps traces byte-reproducible).
    pub timing: bool,
}

impl Default for OptConfig {
    fn default() -> Self {
        Self {
            method: Method::Spgd,
            iters: 1000,
            h: None,
            h_v: None,
            m: None,
            big_m: None,
            batch: 2000,
            proj_tol: 1e-10,
            seed: 0,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub value: Option<f64>,
    /// Gradient-mapping norm in `Q ⊕ I` (APGD/SPGD) or the duality gap (FW).
    pub grad_norm: Option<f64>,
    pub w2sq_to_ref: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptTrace {
    pub records: Vec<TraceRecord>,
    pub warnings: Vec<String>,
}

/// `M = L_V + Υ/α²`, when `L_V` is known.
pub fn smoothness_constant(target: &Target, gd: &GramData, alpha: f64) -> Option<f64> {
    target.l.map(|l| l + gd.upsilon / (alpha * alpha))
}

/// Largest KKT violation of `λ` for `min_{λ ≥ 0} (λ - η)ᵀQ(λ - η)`:
/// negativity of `λ`, negativity of the gradient `g = Q(λ - η)`, and
/// complementarity `|λ_j g_j|`.
pub fn kkt_residual(q1: &DMatrix<f64>, eta: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
    let g = q1 * (lambda - eta);
    let mut r: f64 = 0.0;
    for j in 0..lambda.len() {
        r = r.max(-lambda[j]).max(-g[j]).max((lambda[j] * g[j]).abs());
    }
    r
}

fn cholesky_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    if let Some(c) = m.clone().cholesky() {
        return Some(c.solve(b));
    }
    let n = m.nrows();
    let jitter = 1e-12 * m.trace() / n as f64;
    (m + DMatrix::identity(n, n) * jitter).cholesky().map(|c| c.solve(b))
}

/// Solves `Q_PP s_P = c_P` with one step of iterative refinement.
fn solve_passive(q1: &DMatrix<f64>, c: &DVector<f64>, passive: &[usize]) -> Option<DVector<f64>> {
    let k = passive.len();
    let sub = DMatrix::from_fn(k, k, |a, b| q1[(passive[a], passive[b])]);
    let rhs = DVector::from_fn(k, |a, _| c[passive[a]]);
    let mut s = cholesky_solve(&sub, &rhs)?;
    let resid = &rhs - &sub * &s;
    s += cholesky_solve(&sub, &resid)?;
    Some(s)
}

/// Projection of `η` onto the nonnegative orthant in the `Q1` norm.
///
/// Lawson–Hanson active-set iterations on the equivalent nonnegative least
/// squares problem in Gram form; every passive-set system is solved exactly,
/// so the result is accurate to rounding once the active set is identified.
pub fn project_orthant_qnorm(q1: &DMatrix<f64>, eta: &DVector<f64>, tol: f64) -> Result<DVector<f64>> {
    let n = eta.len();
    if q1.shape() != (n, n) {
        return Err(Error::Contract("Q1 and eta have incompatible sizes".into()));
    }
    if eta.iter().all(|x| *x >= 0.0) {
        return Ok(eta.clone());
    }
    let scale = (q1.trace() / n as f64).max(f64::MIN_POSITIVE);
    let c = q1 * eta;
    let wtol = tol * scale * (1.0 + eta.amax());
    let mut x = DVector::zeros(n);
    let mut passive: Vec<usize> = Vec::new();
    let mut in_p = vec![false; n];
    let max_outer = 3 * n + 10;
    for _ in 0..max_outer {
        let w = &c - q1 * &x;
        let cand = (0..n)
            .filter(|&j| !in_p[j] && w[j] > wtol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)));
        let Some(j) = cand else {
            let resid = kkt_residual(q1, eta, &x);
            if resid <= wtol.max(tol * scale) * 10.0 {
                return Ok(x);
            }
            return Err(Error::Numerical(format!(
                "orthant projection stalled with KKT residual {resid:e}"
            )));
        };
        passive.push(j);
        in_p[j] = true;
        loop {
            let s = solve_passive(q1, &c, &passive)
                .ok_or_else(|| Error::Numerical("passive-set system is singular".into()))?;
            if s.iter().all(|v| *v > 0.0) {
                for (a, &p) in passive.iter().enumerate() {
                    x[p] = s[a];
                }
                break;
            }
            // Move toward s until the first passive coordinate hits zero.
            let mut step = 1.0_f64;
            for (a, &p) in passive.iter().enumerate() {
                if s[a] <= 0.0 {
                    let denom = x[p] - s[a];
                    if denom > 0.0 {
                        step = step.min(x[p] / denom);
                    }
                }
            }
            for (a, &p) in passive.iter().enumerate() {
                x[p] += step * (s[a] - x[p]);
            }
            let floor = 1e-15 * (1.0 + x.amax());
            passive.retain(|&p| {
                if x[p] <= floor {
                    x[p] = 0.0;
                    in_p[p] = false;
                    false
                } else {
                    true
                }
            });
            if passive.is_empty() {
                break;
            }
        }
    }
    Err(Error::Numerical(format!(
        "orthant projection hit its iteration cap; KKT residual {:e}",
        kkt_residual(q1, eta, &x)
    )))
}

/// Projects every coordinate block (row) of `eta`.
pub fn project_rows(gd: &GramData, eta: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>> {
    let mut out = eta.clone();
    for i in 0..eta.nrows() {
        let row = eta.row(i).transpose();
        let p = project_orthant_qnorm(&gd.q1, &row, tol)?;
        // Clear any -0.0 so feasibility holds bitwise.
        let p = p.map(|x| if x <= 0.0 { 0.0 } else { x });
        out.row_mut(i).copy_from(&p.transpose());
    }
    Ok(out)
}

struct Recorder<'a> {
    trace: OptTrace,
    gd: &'a GramData,
    reference: Option<&'a ConeParams>,
    start: Option<Instant>,
    initial: Option<f64>,
}

impl<'a> Recorder<'a> {
    fn new(gd: &'a GramData, reference: Option<&'a ConeParams>, timing: bool) -> Self {
        Self {
            trace: OptTrace::default(),
            gd,
            reference,
            start: timing.then(Instant::now),
            initial: None,
        }
    }

    fn push(&mut self, iter: usize, p: &ConeParams, value: Option<f64>, grad_norm: Option<f64>) -> Result<()> {
        if let Some(v) = value {
            let init = *self.initial.get_or_insert(v);
            if !v.is_finite() || v > init + 1e6 {
                return Err(Error::Divergence {
                    iteration: iter,
                    reason: format!("surrogate value {v} (initial {init})"),
                });
            }
        }
        let w2sq_to_ref = match self.reference {
            Some(r) => Some(q_dist_sq(p, r, self.gd)?),
            None => None,
        };
        let wall_ms = self.start.map(|s| s.elapsed().as_secs_f64() * 1e3);
        self.trace.records.push(TraceRecord { iter, value, grad_norm, w2sq_to_ref, wall_ms });
        Ok(())
    }
}

fn check_start(initial: &ConeParams, obj: &dyn Objective, gd: &GramData) -> Result<()> {
    if initial.lambda.ncols() != gd.len() || obj.family().len() != gd.len() {
        return Err(Error::Contract("parameters, family and Gram data disagree on J".into()));
    }
    if initial.dim() != obj.dim() {
        return Err(Error::Contract("parameters and objective disagree on dimension".into()));
    }
    Ok(())
}

/// One preconditioned projected step from `(eta_l, eta_v)` with steps
/// `(h, h_v)`; returns the new point and the gradient-mapping norm.
fn projected_step(
    gd: &GramData,
    alpha: f64,
    eta_l: &DMatrix<f64>,
    eta_v: &DVector<f64>,
    g: &crate::objective::GradResult,
    h: f64,
    h_v: f64,
    tol: f64,
) -> Result<(ConeParams, f64)> {
    let pre = gd.precondition(&g.grad_lambda);
    let lambda = project_rows(gd, &(eta_l - pre * h), tol)?;
    let v = eta_v - &g.grad_v * h_v;
    let dl = eta_l - &lambda;
    let dv = eta_v - &v;
    let norm = (gd.qnorm_sq(&dl).max(0.0) / (h * h) + dv.norm_squared() / (h_v * h_v)).sqrt();
    Ok((ConeParams { alpha, lambda, v }, norm))
}

/// Accelerated projected gradient descent in the `Q ⊕ I` metric.
///
/// With `m > 0` the momentum is `(√κ - 1)/(√κ + 1)`, `κ = M/m`; otherwise
/// the Nesterov sequence `γ_{t+1} = (1 + √(1 + 4γ_t²))/2` is used. The
/// extrapolated `λ` is clamped to the orthant so that every gradient is
/// taken at a valid map.
pub fn apgd(
    initial: &ConeParams,
    obj: &dyn Objective,
    gd: &GramData,
    cfg: &OptConfig,
    reference: Option<&ConeParams>,
) -> Result<(ConeParams, OptTrace)> {
    check_start(initial, obj, gd)?;
    let big_m = cfg
        .big_m
        .filter(|m| *m > 0.0 && m.is_finite())
        .ok_or_else(|| Error::Config("APGD needs a positive smoothness constant M".into()))?;
    let m = cfg.m.unwrap_or(0.0);
    if m < 0.0 || m > big_m {
        return Err(Error::Config(format!("need 0 ≤ m ≤ M, got m = {m}, M = {big_m}")));
    }
    let step = 1.0 / big_m;
    let stream = RngStream::new(cfg.seed);
    let mut rec = Recorder::new(gd, reference, cfg.timing);
    let mut x = initial.clone();
    x.lambda = project_rows(gd, &x.lambda, cfg.proj_tol)?;
    let mut eta_l = x.lambda.clone();
    let mut eta_v = x.v.clone();
    let mut gamma = 1.0_f64;
    let beta_sc = if m > 0.0 {
        let k = (big_m / m).sqrt();
        Some((k - 1.0) / (k + 1.0))
    } else {
        None
    };
    for t in 0..=cfg.iters {
        let value = obj.value(&x, stream.split(2 * t as u64))?;
        let at = if t == cfg.iters {
            x.clone()
        } else {
            ConeParams { alpha: x.alpha, lambda: eta_l.clone(), v: eta_v.clone() }
        };
        let g = obj.gradient(&at, stream.split(2 * t as u64 + 1))?;
        let (next, norm) = projected_step(gd, x.alpha, &at.lambda, &at.v, &g, step, step, cfg.proj_tol)?;
        rec.push(t, &x, Some(value), Some(norm))?;
        if t == cfg.iters {
            break;
        }
        let beta = match beta_sc {
            Some(b) => b,
            None => {
                let next_gamma = 0.5 * (1.0 + (1.0 + 4.0 * gamma * gamma).sqrt());
                let b = (gamma - 1.0) / next_gamma;
                gamma = next_gamma;
                b
            }
        };
        eta_l = (&next.lambda + (&next.lambda - &x.lambda) * beta).map(|z| z.max(0.0));
        eta_v = &next.v + (&next.v - &x.v) * beta;
        x = next;
    }
    Ok((x, rec.trace))
}

/// Stochastic projected gradient descent: `λ ← proj(λ - h Q⁻¹ ĝ_λ)`,
/// `v ← v - h_v ĝ_v`, with batch `t` drawn from `stream.split(t)`.
pub fn spgd(
    initial: &ConeParams,
    obj: &dyn Objective,
    gd: &GramData,
    cfg: &OptConfig,
    stream: RngStream,
    reference: Option<&ConeParams>,
) -> Result<(ConeParams, OptTrace)> {
    spgd_observed(initial, obj, gd, cfg, stream, reference, &mut |_, _| Ok(()))
}

/// Callback invoked with `(iteration, iterate)` before each step and at the end.
pub type Observer<'a> = dyn FnMut(usize, &ConeParams) -> Result<()> + 'a;

/// [`spgd`] with an observer.
pub fn spgd_observed(
    initial: &ConeParams,
    obj: &dyn Objective,
    gd: &GramData,
    cfg: &OptConfig,
    stream: RngStream,
    reference: Option<&ConeParams>,
    observer: &mut Observer<'_>,
) -> Result<(ConeParams, OptTrace)> {
    check_start(initial, obj, gd)?;
    let h = cfg
        .h
        .filter(|h| *h > 0.0 && h.is_finite())
        .ok_or_else(|| Error::Config("SPGD needs a positive step size h".into()))?;
    let h_v = cfg.h_v.unwrap_or(h);
    if !(h_v > 0.0 && h_v.is_finite()) {
        return Err(Error::Config("h_v must be positive".into()));
    }
    let mut rec = Recorder::new(gd, reference, cfg.timing);
    let mut x = initial.clone();
    x.lambda = project_rows(gd, &x.lambda, cfg.proj_tol)?;
    for t in 0..=cfg.iters {
        let g = obj.gradient(&x, stream.split(t as u64))?;
        let (next, norm) = projected_step(gd, x.alpha, &x.lambda, &x.v, &g, h, h_v, cfg.proj_tol)?;
        rec.push(t, &x, g.value, Some(norm))?;
        observer(t, &x)?;
        if t < cfg.iters {
            x = next;
        }
    }
    Ok((x, rec.trace))
}

/// Frank–Wolfe over a product of simplices (one per row of `initial`).
///
/// `grad_fn` returns the objective value and its gradient. The vertex of
/// each row is the lowest-index minimizer of the gradient; the step is
/// `2/(t + 2)`. The trace records the duality gap as `grad_norm`.
pub fn frank_wolfe<F>(initial: &DMatrix<f64>, mut grad_fn: F, iters: usize) -> Result<(DMatrix<f64>, OptTrace)>
where
    F: FnMut(&DMatrix<f64>) -> Result<(f64, DMatrix<f64>)>,
{
    for (i, row) in initial.row_iter().enumerate() {
        if row.iter().any(|x| *x < 0.0) || (row.sum() - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("row {i} of the initial point is not in the simplex")));
        }
    }
    let mut x = initial.clone();
    let mut trace = OptTrace::default();
    let mut initial_value = None;
    for t in 0..=iters {
        let (value, g) = grad_fn(&x)?;
        let init = *initial_value.get_or_insert(value);
        if !value.is_finite() || value > init + 1e6 {
            return Err(Error::Divergence { iteration: t, reason: format!("objective value {value}") });
        }
        let mut gap = 0.0;
        let mut vertices = Vec::with_capacity(x.nrows());
        for i in 0..x.nrows() {
            let j = fw_vertex(g.row(i).iter().copied());
            gap += x.row(i).dot(&g.row(i)) - g[(i, j)];
            vertices.push(j);
        }
        trace.records.push(TraceRecord {
            iter: t,
            value: Some(value),
            grad_norm: Some(gap),
            w2sq_to_ref: None,
            wall_ms: None,
        });
        if t == iters {
            break;
        }
        let a = 2.0 / (t as f64 + 2.0);
        x *= 1.0 - a;
        for (i, &j) in vertices.iter().enumerate() {
            x[(i, j)] += a;
        }
    }
    Ok((x, trace))
}

/// Lowest index attaining the minimum.
pub fn fw_vertex(g: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for (j, v) in g.enumerate() {
        if v < best_val {
            best = j;
            best_val = v;
        }
    }
    best
}

/// Frank–Wolfe on `λ` (rows kept in the simplex) for a cone objective; `v`
/// takes plain gradient steps of size `h_v` alongside.
pub fn frank_wolfe_cone(
    initial: &ConeParams,
    obj: &dyn Objective,
    cfg: &OptConfig,
    stream: RngStream,
) -> Result<(ConeParams, OptTrace)> {
    let h_v = cfg.h_v.or(cfg.h).unwrap_or(0.0);
    let mut v = initial.v.clone();
    let alpha = initial.alpha;
    let mut t = 0u64;
    let (lambda, trace) = frank_wolfe(
        &initial.lambda,
        |lam| {
            let p = ConeParams { alpha, lambda: lam.clone(), v: v.clone() };
            let g = obj.gradient(&p, stream.split(t))?;
            t += 1;
            v -= &g.grad_v * h_v;
            let value = match g.value {
                Some(val) => val,
                None => obj.value(&p, stream.split(t))?,
            };
            Ok((value, g.grad_lambda))
        },
        cfg.iters,
    )?;
    Ok((ConeParams { alpha, lambda, v }, trace))
}

/// Runs the method selected in `cfg`.
pub fn optimize(
    initial: &ConeParams,
    obj: &dyn Objective,
    gd: &GramData,
    cfg: &OptConfig,
    stream: RngStream,
    reference: Option<&ConeParams>,
    observer: &mut Observer<'_>,
) -> Result<(ConeParams, OptTrace)> {
    match cfg.method {
        Method::Apgd => {
            let out = apgd(initial, obj, gd, cfg, reference)?;
            observer(cfg.iters, &out.0)?;
            Ok(out)
        }
        Method::Spgd => spgd_observed(initial, obj, gd, cfg, stream, reference, observer),
        Method::Fw => {
            let out = frank_wolfe_cone(initial, obj, cfg, stream)?;
            observer(cfg.iters, &out.0)?;
            Ok(out)
        }
    }
}
