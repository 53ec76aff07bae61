//! End-to-end experiment drivers shared by the command line and the
//! acceptance suite.
//!
//! Every driver takes a seed and derives its randomness from
//! `RngStream::new(seed)`: `split(1)` drives the optimizer or flow,
//! `split(2)` the evaluation samples, `split(3)` the exported samples and
//! `split(4)` the baseline sampler.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::approx::{fit_higher_order, fit_pw_linear, l2_errors, MonotoneMap1D};
use crate::error::{Error, Result};
use crate::gram::{build_gram, GramData};
use crate::integrate::{sample_std_normal, RngStream};
use crate::maps1d::{ConeParams, FamilyKind, MapFamily1D};
use crate::mixtures::{antithetic_samples, run_flow, Flow, MixtureState, MixtureTrace};
use crate::objective::{ExactGaussianObjective, MonteCarloObjective, Objective};
use crate::optim::{optimize, smoothness_constant, Method, OptConfig, OptTrace};
use crate::targets::{
    blr_synthesize, blr_target, bures_wasserstein_sq, empirical_moments, gaussian_target,
    find_mode, lmc_sample_from, product_gmm_target, random_covariance, BlrData, BlrLink, Target,
};

/// Dictionary choice: kind, truncation radius and mesh.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dictionary {
    pub kind: FamilyKind,
    pub radius: f64,
    pub delta: f64,
}

impl Default for Dictionary {
    /// Piecewise-linear with `J = 28`.
    fn default() -> Self {
        Self { kind: FamilyKind::PwLinear, radius: 3.5, delta: 0.25 }
    }
}

impl Dictionary {
    /// Centered family used by the optimizers; for `higher_order` only the
    /// increasing elements are kept, since the optimizers work on `λ ≥ 0`.
    pub fn optimizer_family(&self) -> Result<MapFamily1D> {
        let fam = MapFamily1D::build_centered(self.kind, self.radius, self.delta)?;
        Ok(match self.kind {
            FamilyKind::PwLinear => fam,
            FamilyKind::HigherOrder => fam.increasing_subfamily(),
        })
    }

    /// Centered family with the first-derivative continuity the mixture
    /// flows require.
    pub fn mixture_family(&self) -> Result<MapFamily1D> {
        if self.kind != FamilyKind::HigherOrder {
            return Err(Error::Config("mixture flows need a higher_order dictionary".into()));
        }
        Ok(MapFamily1D::build_centered(self.kind, self.radius, self.delta)?.smooth_step_subfamily())
    }
}

/// `n` samples of `T_♯ρ`, one per row.
pub fn pushforward_samples(params: &ConeParams, fam: &MapFamily1D, n: usize, stream: RngStream) -> Result<DMatrix<f64>> {
    let d = params.dim();
    let xs = sample_std_normal(stream, n, d);
    let mut out = DMatrix::zeros(n, d);
    let mut x = vec![0.0; d];
    for r in 0..n {
        for i in 0..d {
            x[i] = xs[(r, i)];
        }
        let y = params.eval_map(fam, &x)?;
        for i in 0..d {
            out[(r, i)] = y[i];
        }
    }
    Ok(out)
}

fn starting_point(d: usize, fam: &MapFamily1D, alpha: f64, init_lambda: f64, method: Method) -> Result<ConeParams> {
    let j = fam.len();
    let fill = if method == Method::Fw { 1.0 / j as f64 } else { init_lambda };
    ConeParams::new(alpha, DMatrix::from_element(d, j, fill), DVector::zeros(d))
}

fn default_step(cfg: &mut OptConfig, target: &Target, gd: &GramData, alpha: f64) {
    if cfg.big_m.is_none() {
        cfg.big_m = smoothness_constant(target, gd, alpha);
    }
    if cfg.m.is_none() {
        cfg.m = target.ell;
    }
    if cfg.h.is_none() {
        cfg.h = cfg.big_m.map(|m| 1.0 / m);
    }
}

fn column_se(samples: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let (mean, cov) = empirical_moments(samples);
    let var = cov.diagonal();
    let n = samples.nrows() as f64;
    let se = var.map(|v| (v / n).sqrt());
    (mean, var, se)
}

#[derive(Debug, Clone)]
pub struct GaussianMfConfig {
    pub d: usize,
    /// Seed of the random covariance `Σ = AAᵀ`, fixed apart from the run seed.
    pub sigma_seed: u64,
    pub mean: Option<Vec<f64>>,
    pub dictionary: Dictionary,
    /// `None` selects `1/√L_V`.
    pub alpha: Option<f64>,
    pub init_lambda: f64,
    pub opt: OptConfig,
    /// Iterations between covariance evaluations.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub n_samples: usize,
}

impl Default for GaussianMfConfig {
    fn default() -> Self {
        Self {
            d: 5,
            sigma_seed: 0,
            mean: None,
            dictionary: Dictionary::default(),
            alpha: Some(0.1),
            init_lambda: 1.0,
            opt: OptConfig { iters: 2000, h: Some(1e-4), batch: 2000, ..OptConfig::default() },
            eval_every: 100,
            eval_samples: 10_000,
            n_samples: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GaussianMfReport {
    pub target: Target,
    pub sigma: DMatrix<f64>,
    /// Diagonal of the mean-field covariance, `1/(Σ⁻¹)_{ii}`.
    pub sigma_mf: DVector<f64>,
    pub params: ConeParams,
    pub trace: OptTrace,
    /// `(iteration, BW²(empirical covariance, Σ_MF))`.
    pub bw2: Vec<(usize, f64)>,
    pub final_mean: DVector<f64>,
    pub final_mean_se: DVector<f64>,
    pub samples: DMatrix<f64>,
}

/// Non-isotropic Gaussian target; the iterate is tracked through the
/// Bures–Wasserstein distance of its covariance to the mean-field one.
pub fn gaussian_mf(cfg: &GaussianMfConfig, seed: u64) -> Result<GaussianMfReport> {
    let d = cfg.d;
    if d == 0 {
        return Err(Error::Config("d must be at least 1".into()));
    }
    let root = RngStream::new(seed);
    let sigma = random_covariance(RngStream::new(cfg.sigma_seed), d);
    let mean = match &cfg.mean {
        Some(m) if m.len() != d => return Err(Error::Config(format!("mean must have {d} entries"))),
        Some(m) => DVector::from_column_slice(m),
        None => DVector::zeros(d),
    };
    let target = gaussian_target(mean.clone(), &sigma)?;
    let reference = target.mf_reference.clone().expect("gaussian targets carry a reference");
    let sigma_mf_mat = DMatrix::from_diagonal(&reference.variances);
    let fam = cfg.dictionary.optimizer_family()?;
    let gd = build_gram(&fam)?;
    let alpha = match cfg.alpha {
        Some(a) => a,
        None => 1.0 / target.l.expect("gaussian targets carry L").sqrt(),
    };
    let mut opt = cfg.opt.clone();
    default_step(&mut opt, &target, &gd, alpha);
    let initial = starting_point(d, &fam, alpha, cfg.init_lambda, opt.method)?;

    let eval_stream = root.split(2);
    let every = cfg.eval_every.max(1);
    let mut bw2 = Vec::new();
    let mut observe = |t: usize, p: &ConeParams| -> Result<()> {
        if t % every == 0 || t == opt.iters {
            let s = pushforward_samples(p, &fam, cfg.eval_samples, eval_stream)?;
            let (_, cov) = empirical_moments(&s);
            bw2.push((t, bures_wasserstein_sq(&cov, &sigma_mf_mat)?));
        }
        Ok(())
    };
    let exact = ExactGaussianObjective::new(&fam, &target)?;
    let mc = MonteCarloObjective::new(&fam, &target, opt.batch);
    let obj: &dyn Objective = if opt.method == Method::Apgd { &exact } else { &mc };
    let (params, trace) = optimize(&initial, obj, &gd, &opt, root.split(1), None, &mut observe)?;
    bw2.dedup_by_key(|e| e.0);

    let samples = pushforward_samples(&params, &fam, cfg.n_samples, root.split(3))?;
    let (final_mean, _, final_mean_se) = column_se(&samples);
    Ok(GaussianMfReport {
        target,
        sigma,
        sigma_mf: reference.variances,
        params,
        trace,
        bw2,
        final_mean,
        final_mean_se,
        samples,
    })
}

#[derive(Debug, Clone)]
pub struct ProductGmmConfig {
    /// Component centers per coordinate.
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub dictionary: Dictionary,
    pub alpha: f64,
    pub init_lambda: f64,
    pub opt: OptConfig,
    pub n_samples: usize,
}

impl Default for ProductGmmConfig {
    fn default() -> Self {
        Self {
            centers: vec![vec![2.0, -2.0], vec![2.0, -2.0]],
            weights: vec![vec![0.25, 0.75], vec![0.75, 0.25]],
            dictionary: Dictionary::default(),
            alpha: 0.1,
            init_lambda: 0.0,
            opt: OptConfig { iters: 3000, h: Some(1e-3), batch: 2000, ..OptConfig::default() },
            n_samples: 10_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProductGmmReport {
    pub target: Target,
    pub params: ConeParams,
    pub trace: OptTrace,
    pub samples: DMatrix<f64>,
    /// Per coordinate and center: fraction of samples within distance 1.
    pub mode_mass: Vec<Vec<f64>>,
}

/// Separable Gaussian-mixture target, which is not log-concave.
pub fn product_gmm(cfg: &ProductGmmConfig, seed: u64) -> Result<ProductGmmReport> {
    let target = product_gmm_target(cfg.centers.clone(), cfg.weights.clone())?;
    let d = target.d;
    let root = RngStream::new(seed);
    let fam = cfg.dictionary.optimizer_family()?;
    let gd = build_gram(&fam)?;
    let mut opt = cfg.opt.clone();
    default_step(&mut opt, &target, &gd, cfg.alpha);
    let initial = starting_point(d, &fam, cfg.alpha, cfg.init_lambda, opt.method)?;
    let obj = MonteCarloObjective::new(&fam, &target, opt.batch);
    let (params, trace) = optimize(&initial, &obj, &gd, &opt, root.split(1), None, &mut |_, _| Ok(()))?;
    let samples = pushforward_samples(&params, &fam, cfg.n_samples, root.split(3))?;
    let n = samples.nrows() as f64;
    let mode_mass = cfg
        .centers
        .iter()
        .enumerate()
        .map(|(i, cs)| {
            cs.iter()
                .map(|c| samples.column(i).iter().filter(|y| (*y - c).abs() <= 1.0).count() as f64 / n)
                .collect()
        })
        .collect();
    Ok(ProductGmmReport { target, params, trace, samples, mode_mass })
}

#[derive(Debug, Clone)]
pub struct BlrConfig {
    pub n: usize,
    pub d: usize,
    pub link: BlrLink,
    pub dictionary: Dictionary,
    pub alpha: f64,
    /// `None` selects `1/(J d)`.
    pub init_lambda: Option<f64>,
    pub opt: OptConfig,
    pub lmc_h: f64,
    pub lmc_iters: usize,
    pub lmc_chains: usize,
    pub lmc_start: LmcStart,
    pub n_samples: usize,
}

/// Where the Langevin chains start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LmcStart {
    Origin,
    /// Posterior mode, found by gradient descent.
    Mode,
}

impl std::str::FromStr for LmcStart {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(Self::Origin),
            "mode" => Ok(Self::Mode),
            other => Err(Error::Config(format!("unknown LMC start `{other}`"))),
        }
    }
}

impl Default for BlrConfig {
    fn default() -> Self {
        Self {
            n: 100,
            d: 20,
            link: BlrLink::Logistic,
            dictionary: Dictionary::default(),
            alpha: 0.1,
            init_lambda: None,
            opt: OptConfig { iters: 2000, h: Some(1e-2), h_v: Some(1e-1), batch: 2000, ..OptConfig::default() },
            lmc_h: 1e-2,
            lmc_iters: 5000,
            lmc_chains: 2000,
            lmc_start: LmcStart::Mode,
            n_samples: 2000,
        }
    }
}

/// Marginal comparison for one coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginalRow {
    pub mf_mean: f64,
    pub mf_var: f64,
    pub lmc_mean: f64,
    pub lmc_var: f64,
    /// `|mf_mean - lmc_mean|` in combined standard errors.
    pub z: f64,
}

#[derive(Debug, Clone)]
pub struct BlrReport {
    pub data: BlrData,
    pub target: Target,
    pub params: ConeParams,
    pub trace: OptTrace,
    pub samples: DMatrix<f64>,
    pub lmc: DMatrix<f64>,
    pub marginals: Vec<MarginalRow>,
}

/// Bayesian logistic regression with a flat prior, compared against
/// Langevin Monte Carlo.
pub fn blr(cfg: &BlrConfig, seed: u64) -> Result<BlrReport> {
    let root = RngStream::new(seed);
    let data = blr_synthesize(root.split(5), cfg.n, cfg.d, cfg.link)?;
    let target = blr_target(data.x.clone(), data.y.clone())?;
    let fam = cfg.dictionary.optimizer_family()?;
    let gd = build_gram(&fam)?;
    let mut opt = cfg.opt.clone();
    default_step(&mut opt, &target, &gd, cfg.alpha);
    let init = cfg.init_lambda.unwrap_or(1.0 / (fam.len() * cfg.d) as f64);
    let initial = starting_point(cfg.d, &fam, cfg.alpha, init, opt.method)?;
    let obj = MonteCarloObjective::new(&fam, &target, opt.batch);
    let (params, trace) = optimize(&initial, &obj, &gd, &opt, root.split(1), None, &mut |_, _| Ok(()))?;
    let samples = pushforward_samples(&params, &fam, cfg.n_samples, root.split(3))?;
    let origin = vec![0.0; cfg.d];
    let start = match cfg.lmc_start {
        LmcStart::Origin => origin,
        LmcStart::Mode => find_mode(&target, &origin, 1e-9, 1_000_000)?,
    };
    let lmc = lmc_sample_from(&target, &start, cfg.lmc_h, cfg.lmc_iters, cfg.lmc_chains, root.split(4))?;
    let (mm, mv, mse) = column_se(&samples);
    let (lm, lv, lse) = column_se(&lmc);
    let marginals = (0..cfg.d)
        .map(|i| {
            let se = (mse[i] * mse[i] + lse[i] * lse[i]).sqrt();
            MarginalRow { mf_mean: mm[i], mf_var: mv[i], lmc_mean: lm[i], lmc_var: lv[i], z: (mm[i] - lm[i]).abs() / se }
        })
        .collect();
    Ok(BlrReport { data, target, params, trace, samples, lmc, marginals })
}

/// Built-in increasing maps for the approximation study.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApproxTarget {
    /// `a x + b`.
    Affine { a: f64, b: f64 },
    /// `a x + c tanh x`.
    Tanh { a: f64, c: f64 },
    /// `x + c x³`.
    Cubic { c: f64 },
}

impl ApproxTarget {
    pub fn map(&self) -> MonotoneMap1D {
        match *self {
            Self::Affine { a, b } => MonotoneMap1D::affine(a, b),
            Self::Tanh { a, c } => MonotoneMap1D::tanh_type(a, c),
            Self::Cubic { c } => MonotoneMap1D::cubic(c),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ApproxConfig {
    pub target: ApproxTarget,
    pub kind: FamilyKind,
    pub radius: f64,
    pub deltas: Vec<f64>,
    pub alpha: f64,
}

impl Default for ApproxConfig {
    fn default() -> Self {
        Self {
            target: ApproxTarget::Tanh { a: 1.0, c: 1.0 },
            kind: FamilyKind::PwLinear,
            radius: 4.0,
            deltas: vec![0.4, 0.2, 0.1, 0.05],
            alpha: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateRow {
    pub delta: f64,
    pub map_err: f64,
    pub jac_err: f64,
    /// `log2` of the error ratio against the previous (coarser) mesh.
    pub map_order: Option<f64>,
    pub jac_order: Option<f64>,
}

/// Fits the target on every mesh of the ladder and reports `L²(ρ)` errors.
pub fn approx_rates(cfg: &ApproxConfig) -> Result<Vec<RateRow>> {
    let tbar = cfg.target.map();
    let mut rows: Vec<RateRow> = Vec::with_capacity(cfg.deltas.len());
    for &delta in &cfg.deltas {
        let fam = MapFamily1D::build_centered(cfg.kind, cfg.radius, delta)?;
        let fit = match cfg.kind {
            FamilyKind::PwLinear => fit_pw_linear(&tbar, &fam, cfg.alpha)?,
            FamilyKind::HigherOrder => fit_higher_order(&tbar, &fam, cfg.alpha)?,
        };
        let (map_err, jac_err) = l2_errors(&tbar, &fit.to_params(cfg.alpha), &fam)?;
        let order = |prev: f64, cur: f64, prev_delta: f64| {
            (prev > 0.0 && cur > 0.0).then(|| (prev / cur).ln() / (prev_delta / delta).ln())
        };
        let (map_order, jac_order) = match rows.last() {
            Some(p) => (order(p.map_err, map_err, p.delta), order(p.jac_err, jac_err, p.delta)),
            None => (None, None),
        };
        rows.push(RateRow { delta, map_err, jac_err, map_order, jac_order });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct MixtureConfig {
    pub centers: Vec<Vec<f64>>,
    pub weights: Vec<Vec<f64>>,
    pub dictionary: Dictionary,
    pub alpha: f64,
    /// Initial translation of each particle.
    pub particles: Vec<Vec<f64>>,
    pub flow: Flow,
    pub h: f64,
    pub n_mc: usize,
    pub steps: usize,
    /// Rows of the fixed set on which the KL estimate is tracked (0 disables it).
    pub eval_samples: usize,
    /// Constant added to `V`.
    pub shift: f64,
    pub n_samples: usize,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        Self {
            centers: vec![vec![-2.0, 2.0]],
            weights: vec![vec![0.3, 0.7]],
            dictionary: Dictionary { kind: FamilyKind::HigherOrder, radius: 3.0, delta: 0.5 },
            alpha: 1.0,
            particles: vec![vec![-1.5], vec![1.5]],
            flow: Flow::Wfr,
            h: 1e-3,
            n_mc: 1000,
            steps: 200,
            eval_samples: 0,
            shift: 0.0,
            n_samples: 2000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MixtureReport {
    pub state: MixtureState,
    pub trace: MixtureTrace,
    pub samples: DMatrix<f64>,
}

/// Initial equal-weight mixture of translated identity particles.
pub fn initial_mixture(cfg: &MixtureConfig) -> Result<MixtureState> {
    let fam = cfg.dictionary.mixture_family()?;
    let d = cfg.centers.len();
    let particles = cfg
        .particles
        .iter()
        .map(|v| {
            if v.len() != d {
                return Err(Error::Config(format!("particle translations must have {d} entries")));
            }
            ConeParams::new(cfg.alpha, DMatrix::zeros(d, fam.len()), DVector::from_column_slice(v))
        })
        .collect::<Result<Vec<_>>>()?;
    if particles.is_empty() {
        return Err(Error::Config("need at least one particle".into()));
    }
    MixtureState::uniform(&fam, particles)
}

/// `n` samples from the mixture: a particle drawn by weight, then pushed.
pub fn mixture_samples(state: &MixtureState, n: usize, stream: RngStream) -> DMatrix<f64> {
    let d = state.dim();
    let xs = sample_std_normal(stream.split(0), n, d);
    let mut rng = stream.split(1).rng();
    let mut out = DMatrix::zeros(n, d);
    for r in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut k = state.len() - 1;
        for (i, w) in state.weights().iter().enumerate() {
            acc += w;
            if u < acc {
                k = i;
                break;
            }
        }
        let x: Vec<f64> = xs.row(r).iter().copied().collect();
        for (i, y) in state.push(k, &x).into_iter().enumerate() {
            out[(r, i)] = y;
        }
    }
    out
}

/// Particle flow towards a product Gaussian-mixture target.
pub fn mixtures(cfg: &MixtureConfig, seed: u64) -> Result<MixtureReport> {
    let target = product_gmm_target(cfg.centers.clone(), cfg.weights.clone())?.shifted(cfg.shift);
    let root = RngStream::new(seed);
    let state = initial_mixture(cfg)?;
    let eval = (cfg.eval_samples > 0).then(|| antithetic_samples(root.split(2), cfg.eval_samples, target.d));
    let (state, trace) = run_flow(&state, &target, cfg.flow, cfg.h, cfg.n_mc, cfg.steps, root.split(1), eval.as_ref())?;
    let samples = mixture_samples(&state, cfg.n_samples, root.split(3));
    Ok(MixtureReport { state, trace, samples })
}
