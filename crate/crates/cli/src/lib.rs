//! Configuration-driven experiment runner: parses a TOML run file, runs the
//! experiment and writes traces, parameters, samples and summaries as plain
//! tables.

pub mod config;
pub mod tables;

use std::fs;
use std::path::{Path, PathBuf};

use polymfvi::experiments::{approx_rates, blr, gaussian_mf, mixtures, product_gmm};

use crate::config::{Plan, RunConfig};
use crate::tables::{samples_table, trace_table, write_toml, MixtureFile, ParamsFile, Table};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Run(#[from] polymfvi::Error),
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Run(polymfvi::Error::Config(_)) => 2,
            Self::Run(polymfvi::Error::Divergence { .. }) => 3,
            _ => 1,
        }
    }
}

/// Reads and validates a run file.
pub fn load_config(
    path: &Path,
    implied: Option<config::Experiment>,
    seed: Option<u64>,
) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    config::RawConfig::parse(&text)?.validate(implied, seed)
}

/// Runs a validated experiment, writing its outputs under `out`. Returns a
/// one-line summary.
pub fn execute(cfg: &RunConfig, out: &Path) -> Result<String, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    let file = |name: &str| -> PathBuf { out.join(name) };
    let line = match &cfg.plan {
        Plan::GaussianMf(c) => {
            let r = gaussian_mf(c, cfg.seed)?;
            trace_table(&r.trace).write(&file("trace.csv"))?;
            write_toml(&ParamsFile::from_params(&r.params), &file("params.toml"))?;
            samples_table(&r.samples).write(&file("samples.csv"))?;
            let mut bw = Table::new(&["iter", "bw2"]);
            for (it, v) in &r.bw2 {
                bw.push(vec![Some(*it as f64), Some(*v)]);
            }
            bw.write(&file("summary.csv"))?;
            let mf = r.target.mf_reference.as_ref().expect("Gaussian targets carry the mean-field solution");
            let mut m = Table::new(&["coord", "mean", "mean_se", "target_mean", "target_var"]);
            for i in 0..r.final_mean.len() {
                m.push(vec![
                    Some((i + 1) as f64),
                    Some(r.final_mean[i]),
                    Some(r.final_mean_se[i]),
                    Some(mf.means[i]),
                    Some(mf.variances[i]),
                ]);
            }
            m.write(&file("marginals.csv"))?;
            let (first, last) = (r.bw2.first().map_or(f64::NAN, |x| x.1), r.bw2.last().map_or(f64::NAN, |x| x.1));
            format!("gaussian_mf: BW² to the mean-field covariance {first:.4} -> {last:.4}")
        }
        Plan::ProductGmm(c) => {
            let r = product_gmm(c, cfg.seed)?;
            trace_table(&r.trace).write(&file("trace.csv"))?;
            write_toml(&ParamsFile::from_params(&r.params), &file("params.toml"))?;
            samples_table(&r.samples).write(&file("samples.csv"))?;
            let mut t = Table::new(&["coord", "center", "mass"]);
            for (i, row) in r.mode_mass.iter().enumerate() {
                for (k, mass) in row.iter().enumerate() {
                    t.push(vec![Some((i + 1) as f64), Some(c.centers[i][k]), Some(*mass)]);
                }
            }
            t.write(&file("summary.csv"))?;
            let min = r.mode_mass.iter().flatten().cloned().fold(f64::INFINITY, f64::min);
            format!("product_gmm: smallest mass within distance 1 of a mode {min:.3}")
        }
        Plan::Blr(c) => {
            let r = blr(c, cfg.seed)?;
            trace_table(&r.trace).write(&file("trace.csv"))?;
            write_toml(&ParamsFile::from_params(&r.params), &file("params.toml"))?;
            samples_table(&r.samples).write(&file("samples.csv"))?;
            samples_table(&r.lmc).write(&file("lmc_samples.csv"))?;
            let mut t = Table::new(&["coord", "mf_mean", "mf_var", "lmc_mean", "lmc_var", "z"]);
            for (i, m) in r.marginals.iter().enumerate() {
                t.push(vec![
                    Some((i + 1) as f64),
                    Some(m.mf_mean),
                    Some(m.mf_var),
                    Some(m.lmc_mean),
                    Some(m.lmc_var),
                    Some(m.z),
                ]);
            }
            t.write(&file("summary.csv"))?;
            let agree = r.marginals.iter().filter(|m| m.z <= 3.0).count();
            format!("blr: {agree}/{} posterior means agree with LMC within 3 standard errors", r.marginals.len())
        }
        Plan::Approx(c) => {
            let rows = approx_rates(c)?;
            let mut t = Table::new(&["delta", "map_err", "jac_err", "map_order", "jac_order"]);
            for r in &rows {
                t.push(vec![Some(r.delta), Some(r.map_err), Some(r.jac_err), r.map_order, r.jac_order]);
            }
            t.write(&file("rates.csv"))?;
            let last = rows.last().expect("at least two meshes");
            format!(
                "approx_rates: finest mesh errors {:.3e} (map) {:.3e} (jacobian), orders {} / {}",
                last.map_err,
                last.jac_err,
                last.map_order.map_or("-".into(), |o| format!("{o:.2}")),
                last.jac_order.map_or("-".into(), |o| format!("{o:.2}")),
            )
        }
        Plan::Mixtures(c) => {
            let r = mixtures(c, cfg.seed)?;
            let k = r.state.len();
            let mut header = vec!["step".to_string(), "kl_estimate".to_string()];
            header.extend((1..=k).map(|i| format!("w{i}")));
            let mut t = Table::new(&header);
            for rec in &r.trace.records {
                let mut row = vec![Some(rec.step as f64), rec.kl_estimate];
                row.extend(rec.weights.iter().map(|w| Some(*w)));
                t.push(row);
            }
            t.write(&file("trace.csv"))?;
            let params = MixtureFile {
                weights: r.state.weights().to_vec(),
                particles: r.state.particles().iter().map(ParamsFile::from_params).collect(),
            };
            write_toml(&params, &file("params.toml"))?;
            samples_table(&r.samples).write(&file("samples.csv"))?;
            for w in &r.trace.warnings {
                log::warn!("{w}");
            }
            let weights: Vec<String> = r.state.weights().iter().map(|w| format!("{w:.4}")).collect();
            format!("mixtures: final weights [{}]", weights.join(", "))
        }
    };
    Ok(line)
}
