//! Run configuration. One TOML file fully determines a run; unknown keys are
//! rejected and every field is checked before any computation starts.

use std::path::PathBuf;

use serde::Deserialize;

use polymfvi::experiments::{
    ApproxConfig, ApproxTarget, BlrConfig, Dictionary, GaussianMfConfig, LmcStart, MixtureConfig,
    ProductGmmConfig,
};
use polymfvi::mixtures::Flow;
use polymfvi::optim::{Method, OptConfig};
use polymfvi::targets::BlrLink;
use polymfvi::FamilyKind;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Experiment {
    GaussianMf,
    ProductGmm,
    Blr,
    ApproxRates,
    Mixtures,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::GaussianMf => "gaussian_mf",
            Self::ProductGmm => "product_gmm",
            Self::Blr => "blr",
            Self::ApproxRates => "approx_rates",
            Self::Mixtures => "mixtures",
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KindName {
    PwLinear,
    HigherOrder,
}

impl From<KindName> for FamilyKind {
    fn from(k: KindName) -> Self {
        match k {
            KindName::PwLinear => FamilyKind::PwLinear,
            KindName::HigherOrder => FamilyKind::HigherOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodName {
    Apgd,
    Spgd,
    Fw,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkName {
    Logistic,
    ClippedExp,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StartName {
    Origin,
    Mode,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowName {
    Wgf,
    Wfr,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApproxTargetName {
    Affine,
    Tanh,
    Cubic,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionarySection {
    pub kind: Option<KindName>,
    pub radius: Option<f64>,
    pub delta: Option<f64>,
    /// Dictionary size; an alternative to `delta`.
    pub j: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub method: Option<MethodName>,
    pub iters: Option<usize>,
    pub h: Option<f64>,
    pub h_v: Option<f64>,
    pub m: Option<f64>,
    pub big_m: Option<f64>,
    pub batch: Option<usize>,
    pub proj_tol: Option<f64>,
    pub timing: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussianMfSection {
    pub d: Option<usize>,
    pub sigma_seed: Option<u64>,
    pub mean: Option<Vec<f64>>,
    pub alpha: Option<f64>,
    pub init_lambda: Option<f64>,
    pub eval_every: Option<usize>,
    pub eval_samples: Option<usize>,
    pub n_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProductGmmSection {
    pub centers: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<Vec<f64>>>,
    pub alpha: Option<f64>,
    pub init_lambda: Option<f64>,
    pub n_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlrSection {
    pub n: Option<usize>,
    pub d: Option<usize>,
    pub link: Option<LinkName>,
    pub alpha: Option<f64>,
    pub init_lambda: Option<f64>,
    pub lmc_h: Option<f64>,
    pub lmc_iters: Option<usize>,
    pub lmc_chains: Option<usize>,
    pub lmc_start: Option<StartName>,
    pub n_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApproxSection {
    pub target: Option<ApproxTargetName>,
    pub a: Option<f64>,
    pub b: Option<f64>,
    pub c: Option<f64>,
    pub kind: Option<KindName>,
    pub radius: Option<f64>,
    pub deltas: Option<Vec<f64>>,
    pub alpha: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixturesSection {
    pub centers: Option<Vec<Vec<f64>>>,
    pub weights: Option<Vec<Vec<f64>>>,
    pub alpha: Option<f64>,
    pub particles: Option<Vec<Vec<f64>>>,
    pub flow: Option<FlowName>,
    pub h: Option<f64>,
    pub n_mc: Option<usize>,
    pub steps: Option<usize>,
    pub eval_samples: Option<usize>,
    pub shift: Option<f64>,
    pub n_samples: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub dictionary: Option<DictionarySection>,
    pub optimizer: Option<OptimizerSection>,
    pub gaussian_mf: Option<GaussianMfSection>,
    pub product_gmm: Option<ProductGmmSection>,
    pub blr: Option<BlrSection>,
    pub approx: Option<ApproxSection>,
    pub mixtures: Option<MixturesSection>,
}

/// A validated experiment, ready to run.
#[derive(Debug, Clone)]
pub enum Plan {
    GaussianMf(GaussianMfConfig),
    ProductGmm(ProductGmmConfig),
    Blr(BlrConfig),
    Approx(ApproxConfig),
    Mixtures(MixtureConfig),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub experiment: Experiment,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub plan: Plan,
}

fn bad(key: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("`{key}`: {msg}"))
}

fn positive(key: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x > 0.0 && x.is_finite()) => Err(bad(key, format!("must be positive and finite, got {x}"))),
        _ => Ok(()),
    }
}

fn nonnegative(key: &str, v: Option<f64>) -> Result<(), CliError> {
    match v {
        Some(x) if !(x >= 0.0 && x.is_finite()) => Err(bad(key, format!("must be nonnegative and finite, got {x}"))),
        _ => Ok(()),
    }
}

fn at_least_one(key: &str, v: Option<usize>) -> Result<(), CliError> {
    match v {
        Some(0) => Err(bad(key, "must be at least 1")),
        _ => Ok(()),
    }
}

fn finite_rows(key: &str, v: &Option<Vec<Vec<f64>>>) -> Result<(), CliError> {
    if let Some(rows) = v {
        if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
            return Err(bad(key, "must be a non-empty array of non-empty arrays"));
        }
        if rows.iter().flatten().any(|x| !x.is_finite()) {
            return Err(bad(key, "entries must be finite"));
        }
    }
    Ok(())
}

fn dictionary(sec: Option<DictionarySection>, base: Dictionary) -> Result<Dictionary, CliError> {
    let sec = sec.unwrap_or_default();
    positive("dictionary.radius", sec.radius)?;
    positive("dictionary.delta", sec.delta)?;
    let kind = sec.kind.map(FamilyKind::from).unwrap_or(base.kind);
    let radius = sec.radius.unwrap_or(base.radius);
    let delta = match (sec.delta, sec.j) {
        (Some(_), Some(_)) => return Err(bad("dictionary.j", "give either `delta` or `j`, not both")),
        (Some(d), None) => d,
        (None, Some(j)) => {
            let intervals = match kind {
                FamilyKind::PwLinear => j,
                FamilyKind::HigherOrder => {
                    if j < 5 || (j - 1) % 4 != 0 {
                        return Err(bad("dictionary.j", format!("higher_order sizes are 4n + 1, got {j}")));
                    }
                    (j - 1) / 4
                }
            };
            if intervals == 0 {
                return Err(bad("dictionary.j", "must be at least 1"));
            }
            2.0 * radius / intervals as f64
        }
        (None, None) => base.delta,
    };
    let intervals = 2.0 * radius / delta;
    if (intervals - intervals.round()).abs() > 1e-9 * intervals.max(1.0) {
        return Err(bad("dictionary.delta", format!("2·radius / delta = {intervals} is not an integer")));
    }
    Ok(Dictionary { kind, radius, delta })
}

fn optimizer(sec: Option<OptimizerSection>, base: OptConfig, seed: u64) -> Result<OptConfig, CliError> {
    let sec = sec.unwrap_or_default();
    at_least_one("optimizer.iters", sec.iters)?;
    at_least_one("optimizer.batch", sec.batch)?;
    positive("optimizer.h", sec.h)?;
    positive("optimizer.h_v", sec.h_v)?;
    nonnegative("optimizer.m", sec.m)?;
    positive("optimizer.big_m", sec.big_m)?;
    positive("optimizer.proj_tol", sec.proj_tol)?;
    let method = match sec.method {
        Some(MethodName::Apgd) => Method::Apgd,
        Some(MethodName::Spgd) => Method::Spgd,
        Some(MethodName::Fw) => Method::Fw,
        None => base.method,
    };
    Ok(OptConfig {
        method,
        iters: sec.iters.unwrap_or(base.iters),
        h: sec.h.or(base.h),
        h_v: sec.h_v.or(base.h_v),
        m: sec.m.or(base.m),
        big_m: sec.big_m.or(base.big_m),
        batch: sec.batch.unwrap_or(base.batch),
        proj_tol: sec.proj_tol.unwrap_or(base.proj_tol),
        seed,
        timing: sec.timing.unwrap_or(base.timing),
    })
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks every field and builds the experiment. `experiment` may be
    /// omitted when the caller already knows it (the `approx` and
    /// `mixtures` subcommands); a conflicting value is an error.
    pub fn validate(self, implied: Option<Experiment>, seed_override: Option<u64>) -> Result<RunConfig, CliError> {
        let experiment = match (self.experiment, implied) {
            (Some(e), Some(i)) if e != i => {
                return Err(bad("experiment", format!("`{}` cannot be run by this subcommand (expects `{}`)", e.name(), i.name())))
            }
            (Some(e), _) | (None, Some(e)) => e,
            (None, None) => return Err(bad("experiment", "missing")),
        };
        let seed = seed_override.or(self.seed).unwrap_or(0);
        let sections = [
            ("gaussian_mf", self.gaussian_mf.is_some(), Experiment::GaussianMf),
            ("product_gmm", self.product_gmm.is_some(), Experiment::ProductGmm),
            ("blr", self.blr.is_some(), Experiment::Blr),
            ("approx", self.approx.is_some(), Experiment::ApproxRates),
            ("mixtures", self.mixtures.is_some(), Experiment::Mixtures),
        ];
        for (name, present, owner) in sections {
            if present && owner != experiment {
                return Err(bad(name, format!("section does not apply to experiment `{}`", experiment.name())));
            }
        }
        let uses_optimizer = matches!(experiment, Experiment::GaussianMf | Experiment::ProductGmm | Experiment::Blr);
        if self.optimizer.is_some() && !uses_optimizer {
            return Err(bad("optimizer", format!("section does not apply to experiment `{}`", experiment.name())));
        }
        if self.dictionary.is_some() && experiment == Experiment::ApproxRates {
            return Err(bad("dictionary", "approx_rates takes `kind`, `radius` and `deltas` in [approx]"));
        }

        let plan = match experiment {
            Experiment::GaussianMf => {
                let base = GaussianMfConfig::default();
                let s = self.gaussian_mf.unwrap_or_default();
                at_least_one("gaussian_mf.d", s.d)?;
                positive("gaussian_mf.alpha", s.alpha)?;
                nonnegative("gaussian_mf.init_lambda", s.init_lambda)?;
                at_least_one("gaussian_mf.eval_every", s.eval_every)?;
                at_least_one("gaussian_mf.eval_samples", s.eval_samples)?;
                at_least_one("gaussian_mf.n_samples", s.n_samples)?;
                let d = s.d.unwrap_or(base.d);
                if let Some(m) = &s.mean {
                    if m.len() != d {
                        return Err(bad("gaussian_mf.mean", format!("needs {d} entries, got {}", m.len())));
                    }
                }
                Plan::GaussianMf(GaussianMfConfig {
                    d,
                    sigma_seed: s.sigma_seed.unwrap_or(base.sigma_seed),
                    mean: s.mean.or(base.mean),
                    dictionary: dictionary(self.dictionary, base.dictionary)?,
                    alpha: s.alpha.or(base.alpha),
                    init_lambda: s.init_lambda.unwrap_or(base.init_lambda),
                    opt: optimizer(self.optimizer, base.opt, seed)?,
                    eval_every: s.eval_every.unwrap_or(base.eval_every),
                    eval_samples: s.eval_samples.unwrap_or(base.eval_samples),
                    n_samples: s.n_samples.unwrap_or(base.n_samples),
                })
            }
            Experiment::ProductGmm => {
                let base = ProductGmmConfig::default();
                let s = self.product_gmm.unwrap_or_default();
                finite_rows("product_gmm.centers", &s.centers)?;
                finite_rows("product_gmm.weights", &s.weights)?;
                positive("product_gmm.alpha", s.alpha)?;
                nonnegative("product_gmm.init_lambda", s.init_lambda)?;
                at_least_one("product_gmm.n_samples", s.n_samples)?;
                Plan::ProductGmm(ProductGmmConfig {
                    centers: s.centers.unwrap_or(base.centers),
                    weights: s.weights.unwrap_or(base.weights),
                    dictionary: dictionary(self.dictionary, base.dictionary)?,
                    alpha: s.alpha.unwrap_or(base.alpha),
                    init_lambda: s.init_lambda.unwrap_or(base.init_lambda),
                    opt: optimizer(self.optimizer, base.opt, seed)?,
                    n_samples: s.n_samples.unwrap_or(base.n_samples),
                })
            }
            Experiment::Blr => {
                let base = BlrConfig::default();
                let s = self.blr.unwrap_or_default();
                at_least_one("blr.n", s.n)?;
                at_least_one("blr.d", s.d)?;
                positive("blr.alpha", s.alpha)?;
                nonnegative("blr.init_lambda", s.init_lambda)?;
                positive("blr.lmc_h", s.lmc_h)?;
                at_least_one("blr.lmc_iters", s.lmc_iters)?;
                at_least_one("blr.lmc_chains", s.lmc_chains)?;
                at_least_one("blr.n_samples", s.n_samples)?;
                Plan::Blr(BlrConfig {
                    n: s.n.unwrap_or(base.n),
                    d: s.d.unwrap_or(base.d),
                    link: match s.link {
                        Some(LinkName::Logistic) => BlrLink::Logistic,
                        Some(LinkName::ClippedExp) => BlrLink::ClippedExp,
                        None => base.link,
                    },
                    dictionary: dictionary(self.dictionary, base.dictionary)?,
                    alpha: s.alpha.unwrap_or(base.alpha),
                    init_lambda: s.init_lambda.or(base.init_lambda),
                    opt: optimizer(self.optimizer, base.opt, seed)?,
                    lmc_h: s.lmc_h.unwrap_or(base.lmc_h),
                    lmc_iters: s.lmc_iters.unwrap_or(base.lmc_iters),
                    lmc_chains: s.lmc_chains.unwrap_or(base.lmc_chains),
                    lmc_start: match s.lmc_start {
                        Some(StartName::Origin) => LmcStart::Origin,
                        Some(StartName::Mode) => LmcStart::Mode,
                        None => base.lmc_start,
                    },
                    n_samples: s.n_samples.unwrap_or(base.n_samples),
                })
            }
            Experiment::ApproxRates => {
                let base = ApproxConfig::default();
                let s = self.approx.unwrap_or_default();
                positive("approx.radius", s.radius)?;
                positive("approx.alpha", s.alpha)?;
                if let Some(ds) = &s.deltas {
                    if ds.len() < 2 {
                        return Err(bad("approx.deltas", "needs at least two meshes"));
                    }
                    for d in ds {
                        positive("approx.deltas", Some(*d))?;
                    }
                }
                let target = match s.target {
                    None if s.a.is_none() && s.b.is_none() && s.c.is_none() => base.target,
                    None => return Err(bad("approx.target", "required when a, b or c is given")),
                    Some(ApproxTargetName::Affine) => {
                        if s.c.is_some() {
                            return Err(bad("approx.c", "not a parameter of the affine target"));
                        }
                        positive("approx.a", s.a)?;
                        ApproxTarget::Affine { a: s.a.unwrap_or(1.0), b: s.b.unwrap_or(0.0) }
                    }
                    Some(ApproxTargetName::Tanh) => {
                        if s.b.is_some() {
                            return Err(bad("approx.b", "not a parameter of the tanh target"));
                        }
                        positive("approx.a", s.a)?;
                        nonnegative("approx.c", s.c)?;
                        ApproxTarget::Tanh { a: s.a.unwrap_or(1.0), c: s.c.unwrap_or(1.0) }
                    }
                    Some(ApproxTargetName::Cubic) => {
                        if s.a.is_some() || s.b.is_some() {
                            return Err(bad("approx.a", "the cubic target takes only `c`"));
                        }
                        nonnegative("approx.c", s.c)?;
                        ApproxTarget::Cubic { c: s.c.unwrap_or(0.1) }
                    }
                };
                Plan::Approx(ApproxConfig {
                    target,
                    kind: s.kind.map(FamilyKind::from).unwrap_or(base.kind),
                    radius: s.radius.unwrap_or(base.radius),
                    deltas: s.deltas.unwrap_or(base.deltas),
                    alpha: s.alpha.unwrap_or(base.alpha),
                })
            }
            Experiment::Mixtures => {
                let base = MixtureConfig::default();
                let s = self.mixtures.unwrap_or_default();
                finite_rows("mixtures.centers", &s.centers)?;
                finite_rows("mixtures.weights", &s.weights)?;
                finite_rows("mixtures.particles", &s.particles)?;
                positive("mixtures.alpha", s.alpha)?;
                nonnegative("mixtures.h", s.h)?;
                at_least_one("mixtures.n_mc", s.n_mc)?;
                at_least_one("mixtures.n_samples", s.n_samples)?;
                if let Some(x) = s.shift {
                    if !x.is_finite() {
                        return Err(bad("mixtures.shift", "must be finite"));
                    }
                }
                Plan::Mixtures(MixtureConfig {
                    centers: s.centers.unwrap_or(base.centers),
                    weights: s.weights.unwrap_or(base.weights),
                    dictionary: dictionary(self.dictionary, base.dictionary)?,
                    alpha: s.alpha.unwrap_or(base.alpha),
                    particles: s.particles.unwrap_or(base.particles),
                    flow: match s.flow {
                        Some(FlowName::Wgf) => Flow::Wgf,
                        Some(FlowName::Wfr) => Flow::Wfr,
                        None => base.flow,
                    },
                    h: s.h.unwrap_or(base.h),
                    n_mc: s.n_mc.unwrap_or(base.n_mc),
                    steps: s.steps.unwrap_or(base.steps),
                    eval_samples: s.eval_samples.unwrap_or(base.eval_samples),
                    shift: s.shift.unwrap_or(base.shift),
                    n_samples: s.n_samples.unwrap_or(base.n_samples),
                })
            }
        };
        Ok(RunConfig { experiment, seed, out: self.out, plan })
    }
}
