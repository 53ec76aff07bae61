//! Particle flows over mixtures of cone pushforwards: the Wasserstein
//! gradient flow (equal weights) and the Wasserstein–Fisher–Rao flow
//! (weights evolve too).
//!
//! Expectations over `ρ` use one antithetic sample set per step, shared by
//! all particles, so identical particles see identical estimates and
//! mirrored particles see mirrored ones.
//!
//! `V` enters the weight dynamics only through differences
//! `V(y) - V(0) = ∫₀¹ ∇V(sy)·y ds` evaluated by Gauss–Legendre; the flows
//! never read absolute values of `V`, so adding a constant to `V` leaves
//! them bit-for-bit unchanged.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gram::{build_gram, GramData};
use crate::integrate::{gauss_legendre, sample_std_normal, RngStream};
use crate::maps1d::{CompiledMap, ConeParams, FamilyKind, MapFamily1D};
use crate::optim::project_rows;
use crate::targets::Target;

const INVERT_TOL: f64 = 1e-13;
const LOG_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const LINE_NODES: usize = 8;
const LINE_PANEL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flow {
    Wgf,
    Wfr,
}

impl std::str::FromStr for Flow {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wgf" => Ok(Self::Wgf),
            "wfr" => Ok(Self::Wfr),
            other => Err(Error::Config(format!("unknown flow `{other}`"))),
        }
    }
}

/// `K` weighted particles sharing one smooth nondecreasing family.
#[derive(Debug, Clone)]
pub struct MixtureState {
    fam: MapFamily1D,
    gd: GramData,
    particles: Vec<ConeParams>,
    weights: Vec<f64>,
    compiled: Vec<Vec<CompiledMap>>,
}

impl MixtureState {
    pub fn new(fam: &MapFamily1D, particles: Vec<ConeParams>, weights: Vec<f64>) -> Result<Self> {
        if fam.kind() != FamilyKind::HigherOrder {
            return Err(Error::Config(
                "mixture flows need second derivatives; use a higher_order family".into(),
            ));
        }
        if fam.elements().iter().any(|e| !e.shape.is_increasing()) {
            return Err(Error::Config(
                "mixture families must be nondecreasing (take a subfamily)".into(),
            ));
        }
        let gd = build_gram(fam)?;
        Self::with_gram(fam, gd, particles, weights)
    }

    fn with_gram(
        fam: &MapFamily1D,
        gd: GramData,
        particles: Vec<ConeParams>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if particles.is_empty() || particles.len() != weights.len() {
            return Err(Error::Config("need one weight per particle and at least one particle".into()));
        }
        let alpha = particles[0].alpha;
        let d = particles[0].dim();
        for (k, p) in particles.iter().enumerate() {
            if p.alpha != alpha || p.dim() != d || p.lambda.ncols() != fam.len() {
                return Err(Error::Contract(format!("particle {k} does not match the others")));
            }
            ConeParams::new(p.alpha, p.lambda.clone(), p.v.clone())?;
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("weights sum to {total}, not 1")));
        }
        let compiled = particles
            .iter()
            .map(|p| (0..d).map(|i| p.compile(fam, i)).collect())
            .collect();
        Ok(Self { fam: fam.clone(), gd, particles, weights, compiled })
    }

    /// Equal weights.
    pub fn uniform(fam: &MapFamily1D, particles: Vec<ConeParams>) -> Result<Self> {
        let k = particles.len().max(1);
        Self::new(fam, particles, vec![1.0 / k as f64; k])
    }

    pub fn particles(&self) -> &[ConeParams] {
        &self.particles
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn family(&self) -> &MapFamily1D {
        &self.fam
    }
    pub fn dim(&self) -> usize {
        self.particles[0].dim()
    }
    pub fn len(&self) -> usize {
        self.particles.len()
    }
    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    fn rebuild(&self, particles: Vec<ConeParams>, weights: Vec<f64>) -> Result<Self> {
        Self::with_gram(&self.fam, self.gd.clone(), particles, weights)
    }

    /// `T_k(x)`.
    pub fn push(&self, k: usize, x: &[f64]) -> Vec<f64> {
        self.compiled[k].iter().zip(x).map(|(c, xi)| c.eval(*xi, 0)).collect()
    }

    /// `(log μ_P(y), ∇ log μ_P(y))`.
    pub fn log_density_and_score(&self, y: &[f64]) -> Result<(f64, Vec<f64>)> {
        let d = self.dim();
        if y.len() != d {
            return Err(Error::Contract("point has the wrong dimension".into()));
        }
        let mut logs = Vec::with_capacity(self.len());
        let mut scores = Vec::with_capacity(self.len());
        for (k, maps) in self.compiled.iter().enumerate() {
            if self.weights[k] == 0.0 {
                continue;
            }
            let mut lp = self.weights[k].ln();
            let mut s = vec![0.0; d];
            for (i, map) in maps.iter().enumerate() {
                let x = map.invert(y[i], INVERT_TOL)?;
                let t1 = map.eval(x, 1);
                let t2 = map.eval(x, 2);
                lp += -0.5 * x * x - LOG_SQRT_2PI - t1.ln();
                s[i] = (-x - t2 / t1) / t1;
            }
            logs.push(lp);
            scores.push(s);
        }
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rel: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = rel.iter().sum();
        let mut score = vec![0.0; d];
        for (r, s) in rel.iter().zip(&scores) {
            for i in 0..d {
                score[i] += r / total * s[i];
            }
        }
        Ok((top + total.ln(), score))
    }
}

/// `Σ_k w_k ρ(T_k⁻¹ y) / det DT_k(T_k⁻¹ y)`.
pub fn mixture_density(state: &MixtureState, y: &[f64]) -> Result<f64> {
    Ok(state.log_density_and_score(y)?.0.exp())
}

/// `∇ log μ_P(y)` via inverse-function differentiation of each component.
pub fn grad_log_mixture(state: &MixtureState, y: &[f64]) -> Result<Vec<f64>> {
    Ok(state.log_density_and_score(y)?.1)
}

/// `V(y) - V(0)` as a line integral of `∇V`.
pub fn potential_increment(target: &Target, y: &[f64]) -> f64 {
    let len = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let panels = (len / LINE_PANEL).ceil().max(1.0) as usize;
    let (t, w) = gauss_legendre(LINE_NODES);
    let mut g = vec![0.0; y.len()];
    let mut z = vec![0.0; y.len()];
    let mut total = 0.0;
    for p in 0..panels {
        let a = p as f64 / panels as f64;
        let half = 0.5 / panels as f64;
        for (ti, wi) in t.iter().zip(&w) {
            let s = a + half * (1.0 + ti);
            for (zi, yi) in z.iter_mut().zip(y) {
                *zi = s * yi;
            }
            target.grad_into(&z, &mut g);
            total += wi * half * g.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>();
        }
    }
    total
}

/// Antithetic standard normal samples: rows `r` and `r + n/2` are negatives.
pub fn antithetic_samples(stream: RngStream, n: usize, d: usize) -> DMatrix<f64> {
    let half = n.div_ceil(2);
    let base = sample_std_normal(stream, half, d);
    DMatrix::from_fn(n, d, |r, c| if r < half { base[(r, c)] } else { -base[(r - half, c)] })
}

struct ParticleTerms {
    grad_lambda: DMatrix<f64>,
    grad_v: DVector<f64>,
    /// `E_ρ[log μ_P(T_k x) + V(T_k x) - V(0)]`.
    log_ratio: f64,
}

fn particle_terms(
    state: &MixtureState,
    k: usize,
    target: &Target,
    xs: &DMatrix<f64>,
    want_ratio: bool,
) -> Result<ParticleTerms> {
    let (n, d) = xs.shape();
    let fam = &state.fam;
    let j_count = fam.len();
    let mut grad_lambda = DMatrix::zeros(d, j_count);
    let mut grad_v = DVector::zeros(d);
    let mut log_ratio = 0.0;
    let mut x = vec![0.0; d];
    let mut gv = vec![0.0; d];
    for r in 0..n {
        for i in 0..d {
            x[i] = xs[(r, i)];
        }
        let y = state.push(k, &x);
        let (logp, score) = state.log_density_and_score(&y)?;
        target.grad_into(&y, &mut gv);
        for i in 0..d {
            let g = score[i] + gv[i];
            if !g.is_finite() {
                return Err(Error::Numerical(format!("non-finite flow velocity at sample {r}")));
            }
            grad_v[i] += g;
            for j in 0..j_count {
                grad_lambda[(i, j)] += g * fam.eval(j, x[i], 0);
            }
        }
        if want_ratio {
            log_ratio += logp + potential_increment(target, &y);
        }
    }
    let inv = 1.0 / n as f64;
    Ok(ParticleTerms { grad_lambda: grad_lambda * inv, grad_v: grad_v * inv, log_ratio: log_ratio * inv })
}

fn flow_step(
    state: &MixtureState,
    target: &Target,
    h: f64,
    n_mc: usize,
    stream: RngStream,
    flow: Flow,
) -> Result<(MixtureState, Vec<f64>)> {
    if !(h >= 0.0 && h.is_finite()) {
        return Err(Error::Config(format!("step size must be nonnegative, got {h}")));
    }
    if n_mc == 0 {
        return Err(Error::Config("n_mc must be at least 1".into()));
    }
    if target.d != state.dim() {
        return Err(Error::Contract("target and mixture dimensions differ".into()));
    }
    let xs = antithetic_samples(stream, n_mc, state.dim());
    let want_ratio = flow == Flow::Wfr;
    let terms: Vec<Result<ParticleTerms>> = (0..state.len())
        .into_par_iter()
        .map(|k| particle_terms(state, k, target, &xs, want_ratio))
        .collect();
    let terms: Vec<ParticleTerms> = terms.into_iter().collect::<Result<_>>()?;
    let mut particles = Vec::with_capacity(state.len());
    for (p, t) in state.particles.iter().zip(&terms) {
        let pre = state.gd.precondition(&t.grad_lambda);
        let lambda = project_rows(&state.gd, &(&p.lambda - pre * h), 1e-10)?;
        let v = &p.v - &t.grad_v * h;
        if v.iter().any(|z| !z.is_finite()) {
            return Err(Error::Divergence { iteration: 0, reason: "particle translation diverged".into() });
        }
        particles.push(ConeParams { alpha: p.alpha, lambda, v });
    }
    let ratios: Vec<f64> = terms.iter().map(|t| t.log_ratio).collect();
    let weights = match flow {
        Flow::Wgf => state.weights.clone(),
        Flow::Wfr => {
            // Mean of the per-particle terms, taken relative to the first so
            // that identical particles give exactly zero growth rates.
            let base = ratios[0];
            let mean = base
                + state.weights.iter().zip(&ratios).map(|(w, a)| w * (a - base)).sum::<f64>();
            let r: Vec<f64> = state
                .weights
                .iter()
                .zip(&ratios)
                .map(|(w, a)| {
                    let rk = w.sqrt();
                    (rk - h * (a - mean) * rk).max(0.0)
                })
                .collect();
            let w: Vec<f64> = r.iter().map(|x| x * x).collect();
            let total: f64 = w.iter().sum();
            if !(total > 0.0) {
                return Err(Error::Divergence { iteration: 0, reason: "all weights vanished".into() });
            }
            w.iter().map(|x| x / total).collect()
        }
    };
    Ok((state.rebuild(particles, weights)?, ratios))
}

/// One explicit Euler step of the equal-weight Wasserstein flow; `λ` steps
/// are preconditioned by `Q1⁻¹` and projected in the `Q1` norm.
pub fn wgf_step(state: &MixtureState, target: &Target, h: f64, n_mc: usize, stream: RngStream) -> Result<MixtureState> {
    let first = state.weights[0];
    if state.weights.iter().any(|w| (w - first).abs() > 1e-12) {
        return Err(Error::Contract("the Wasserstein flow keeps equal weights; use wfr_step".into()));
    }
    Ok(flow_step(state, target, h, n_mc, stream, Flow::Wgf)?.0)
}

/// One explicit Euler step of the Wasserstein–Fisher–Rao flow. Returns the
/// new state and the per-particle terms `E_ρ[log(μ_P/π)∘T_k]` (up to a
/// shared constant).
pub fn wfr_step(
    state: &MixtureState,
    target: &Target,
    h: f64,
    n_mc: usize,
    stream: RngStream,
) -> Result<(MixtureState, Vec<f64>)> {
    flow_step(state, target, h, n_mc, stream, Flow::Wfr)
}

/// `KL(μ_P ‖ π)` up to an additive constant, estimated on a fixed sample set.
///
/// Returns the estimate and, per sample row, the summed contribution
/// `Σ_k w_k [log μ_P + V - V(0)](T_k x)`, so that two states evaluated on the
/// same rows can be compared through paired differences.
pub fn kl_estimate(state: &MixtureState, target: &Target, xs: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
    let n = xs.nrows();
    let rows: Vec<Result<f64>> = (0..n)
        .into_par_iter()
        .map(|r| {
            let x: Vec<f64> = xs.row(r).iter().copied().collect();
            let mut acc = 0.0;
            for k in 0..state.len() {
                if state.weights[k] == 0.0 {
                    continue;
                }
                let y = state.push(k, &x);
                let (logp, _) = state.log_density_and_score(&y)?;
                acc += state.weights[k] * (logp + potential_increment(target, &y));
            }
            Ok(acc)
        })
        .collect();
    let rows: Vec<f64> = rows.into_iter().collect::<Result<_>>()?;
    let mean = rows.iter().sum::<f64>() / n as f64;
    Ok((mean, rows))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureRecord {
    pub step: usize,
    pub weights: Vec<f64>,
    pub kl_estimate: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MixtureTrace {
    pub records: Vec<MixtureRecord>,
    pub warnings: Vec<String>,
}

/// Runs `steps` flow steps; step `t` samples from `stream.split(t)`. When
/// `eval` is given, the KL estimate on those rows is recorded at each step.
pub fn run_flow(
    state: &MixtureState,
    target: &Target,
    flow: Flow,
    h: f64,
    n_mc: usize,
    steps: usize,
    stream: RngStream,
    eval: Option<&DMatrix<f64>>,
) -> Result<(MixtureState, MixtureTrace)> {
    let mut trace = MixtureTrace::default();
    let mut cur = state.clone();
    for t in 0..=steps {
        let kl = match eval {
            Some(xs) => Some(kl_estimate(&cur, target, xs)?.0),
            None => None,
        };
        trace.records.push(MixtureRecord { step: t, weights: cur.weights.clone(), kl_estimate: kl });
        if cur.weights.iter().any(|w| *w > 1.0 - 1e-9) && cur.len() > 1 {
            trace.warnings.push(format!("step {t}: weights collapsed onto one particle"));
        }
        if t == steps {
            break;
        }
        let next = match flow {
            Flow::Wgf => wgf_step(&cur, target, h, n_mc, stream.split(t as u64)),
            Flow::Wfr => wfr_step(&cur, target, h, n_mc, stream.split(t as u64)).map(|s| s.0),
        };
        cur = next.map_err(|e| match e {
            Error::Divergence { reason, .. } => Error::Divergence { iteration: t, reason },
            other => other,
        })?;
    }
    Ok((cur, trace))
}
