//! Command-line front end: experiment configs and the `run`, `sweep`,
//! `ablate` and `report` commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffnet::DerivRequest;
use crate::losses::HingeKind;
use crate::metrics::{self, Direction, Trajectory};
use crate::oracles::{self, io as obs_io, LVParams, MCConfig, OracleError};
use crate::problems::{self, HeatConfig, HeatNdConfig, LocalVolConfig, Problem, ProblemError, Term};
use crate::trainer::{self, Method, Model, TrainConfig, TrainError, TrainReport};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{0}")]
    Diverged(String),
    #[error(transparent)]
    Train(TrainError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl CliError {
    /// 3 for numerical divergence, 2 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Diverged(_) => 3,
            _ => 2,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_transition: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub eta_m: f64,
    pub p_m: usize,
    pub p_lambda: usize,
    pub record_stride: usize,
    pub validation_trajectory: bool,
    /// `relu` or `softplus`.
    pub hinge: String,
    pub hinge_delta: f64,
    pub n_outer: usize,
    pub beta: f64,
    pub penalty_init: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            lr_init: t.lr_init,
            lr_transition: t.lr_transition,
            lr_decay: t.lr_decay,
            weight_decay: t.weight_decay,
            eta_m: t.eta_m,
            p_m: t.p_m,
            p_lambda: t.p_lambda,
            record_stride: t.record_stride,
            validation_trajectory: t.validation_trajectory,
            hinge: "relu".into(),
            hinge_delta: 0.01,
            n_outer: t.n_outer,
            beta: t.beta,
            penalty_init: t.penalty_init,
        }
    }
}

/// Grid sizes. Unset entries take the problem's own defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// Interior points per axis (heat, local_vol).
    pub n_interior: Option<usize>,
    /// Points per initial/boundary line.
    pub n_line: Option<usize>,
    /// Validation points per axis (heat, local_vol) or in total (heat_nd).
    pub n_validation: Option<usize>,
    pub n_h: Option<usize>,
    pub n_collocation: Option<usize>,
    pub n_initial: Option<usize>,
    pub n_boundary: Option<usize>,
    /// Spatial dimension of `heat_nd`.
    pub dim: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeatSection {
    pub lambda: f64,
}

impl Default for HeatSection {
    fn default() -> Self {
        Self { lambda: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LocalVolSection {
    pub sigma_a: f64,
    pub a: f64,
    pub b: f64,
    pub s0: f64,
    pub r: f64,
    pub noise_level: f64,
    pub n_observations: usize,
    pub mc_paths: usize,
    pub mc_steps: usize,
    pub antithetic: bool,
    /// Observation cache; generated and written when the file is absent.
    pub dataset: Option<PathBuf>,
    pub t_min: f64,
    pub slope_lower_bound: bool,
}

impl Default for LocalVolSection {
    fn default() -> Self {
        let p = LVParams::default();
        let mc = MCConfig::default();
        Self {
            sigma_a: p.sigma_a,
            a: p.a,
            b: p.b,
            s0: p.s0,
            r: p.r,
            noise_level: p.noise_level,
            n_observations: 1000,
            mc_paths: mc.n_paths,
            mc_steps: mc.n_steps,
            antithetic: mc.antithetic,
            dataset: None,
            t_min: 0.01,
            slope_lower_bound: false,
        }
    }
}

/// Derivative profiles along `x` at fixed `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileSection {
    /// Any of `u`, `u_x`, `u_xx`, `u_t`.
    pub derivs: Vec<String>,
    pub t: Vec<f64>,
    pub n: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self { derivs: Vec::new(), t: vec![0.25, 0.5, 0.75], n: 101 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub eta_m: Vec<f64>,
    pub p_m: Vec<usize>,
    pub p_lambda: Vec<usize>,
    /// Overrides `training.epochs` for every cell.
    pub epochs: Option<usize>,
    /// Metrics whose log10 values are summed to rank cells.
    pub metrics: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            eta_m: vec![1e-4, 1e-3, 1e-2],
            p_m: vec![10, 100, 1000],
            p_lambda: vec![10, 100, 1000],
            epochs: None,
            metrics: ["E_0", "E_f", "E_b", "E_h"].map(String::from).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { methods: Method::ABLATION.iter().map(|m| m.name().to_string()).collect(), seeds: vec![0, 1, 2, 3, 4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// `heat`, `heat_nd` or `local_vol`.
    pub problem: String,
    pub method: String,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub training: TrainingSection,
    pub grid: GridSection,
    pub heat: HeatSection,
    pub local_vol: LocalVolSection,
    pub profiles: ProfileSection,
    pub sweep: SweepSection,
    pub ablate: AblateSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: "heat".into(),
            method: "dcpinn".into(),
            seed: 0,
            output_dir: PathBuf::from("out"),
            training: TrainingSection::default(),
            grid: GridSection::default(),
            heat: HeatSection::default(),
            local_vol: LocalVolSection::default(),
            profiles: ProfileSection::default(),
            sweep: SweepSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn check(&self) -> Result<(), CliError> {
        if !matches!(self.problem.as_str(), "heat" | "heat_nd" | "local_vol") {
            return Err(CliError::Usage(format!("unknown problem `{}` (heat, heat_nd, local_vol)", self.problem)));
        }
        self.method()?;
        for m in &self.ablate.methods {
            parse_method(m)?;
        }
        if self.training.record_stride == 0 {
            return Err(CliError::Config("training.record_stride must be at least 1".into()));
        }
        for d in &self.profiles.derivs {
            profile_term(d, 2)?;
        }
        self.train_config(self.method()?).map_err(|e| CliError::Config(e.to_string()))?.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn method(&self) -> Result<Method, CliError> {
        parse_method(&self.method)
    }

    pub fn train_config(&self, method: Method) -> Result<TrainConfig, CliError> {
        let t = &self.training;
        let hinge = match t.hinge.as_str() {
            "relu" => HingeKind::Relu,
            "softplus" => HingeKind::Softplus { delta: t.hinge_delta },
            other => return Err(CliError::Config(format!("unknown hinge `{other}` (relu, softplus)"))),
        };
        Ok(TrainConfig {
            method,
            epochs: t.epochs,
            lr_init: t.lr_init,
            lr_transition: t.lr_transition,
            lr_decay: t.lr_decay,
            weight_decay: t.weight_decay,
            eta_m: t.eta_m,
            p_m: t.p_m,
            p_lambda: t.p_lambda,
            seed: self.seed,
            record_stride: t.record_stride,
            validation_trajectory: t.validation_trajectory,
            hinge,
            n_outer: t.n_outer,
            beta: t.beta,
            penalty_init: t.penalty_init,
        })
    }

    pub fn lv_params(&self) -> LVParams {
        let l = &self.local_vol;
        LVParams { sigma_a: l.sigma_a, a: l.a, b: l.b, s0: l.s0, r: l.r, noise_level: l.noise_level }
    }
}

fn parse_method(name: &str) -> Result<Method, CliError> {
    Method::from_name(name).ok_or_else(|| {
        let all: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
        CliError::Usage(format!("unknown method `{name}` ({})", all.join(", ")))
    })
}

fn profile_term(name: &str, n_in: usize) -> Result<Term, CliError> {
    Ok(match name {
        "u" => Term::Value,
        "u_x" => Term::Grad(0),
        "u_xx" => Term::Hess(0),
        "u_t" => Term::Grad(n_in - 1),
        other => return Err(CliError::Config(format!("unknown profile derivative `{other}` (u, u_x, u_xx, u_t)"))),
    })
}

/// Builds the problem named in the config. Local-volatility observations are
/// read from `local_vol.dataset` when it exists and generated otherwise; a
/// generated set is written to the dataset path and to `out_dir`.
pub fn build_problem(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Problem, CliError> {
    let g = &cfg.grid;
    match cfg.problem.as_str() {
        "heat" => {
            let d = HeatConfig::default();
            Ok(problems::heat_1d(&HeatConfig {
                lambda: cfg.heat.lambda,
                n_interior: g.n_interior.unwrap_or(d.n_interior),
                n_line: g.n_line.unwrap_or(d.n_line),
                n_validation: g.n_validation.unwrap_or(d.n_validation),
            })?)
        }
        "heat_nd" => {
            let d = HeatNdConfig::default();
            Ok(problems::heat_nd(&HeatNdConfig {
                d: g.dim.unwrap_or(d.d),
                lambda: cfg.heat.lambda,
                n_collocation: g.n_collocation.unwrap_or(d.n_collocation),
                n_initial: g.n_initial.unwrap_or(d.n_initial),
                n_boundary: g.n_boundary.unwrap_or(d.n_boundary),
                n_validation: g.n_validation.unwrap_or(d.n_validation),
                seed: cfg.seed,
            })?)
        }
        "local_vol" => {
            let params = cfg.lv_params();
            let obs = load_or_generate_observations(cfg, &params, out_dir)?;
            let d = LocalVolConfig::default();
            Ok(problems::local_vol(
                &LocalVolConfig {
                    params,
                    n_interior: g.n_interior.unwrap_or(d.n_interior),
                    n_line: g.n_line.unwrap_or(d.n_line),
                    n_h: g.n_h.unwrap_or(d.n_h),
                    n_validation: g.n_validation.unwrap_or(d.n_validation),
                    t_min: cfg.local_vol.t_min,
                    slope_lower_bound: cfg.local_vol.slope_lower_bound,
                    seed: cfg.seed,
                },
                &obs,
            )?)
        }
        other => Err(CliError::Usage(format!("unknown problem `{other}`"))),
    }
}

fn load_or_generate_observations(
    cfg: &ExperimentConfig,
    params: &LVParams,
    out_dir: Option<&Path>,
) -> Result<Vec<oracles::Observation>, CliError> {
    let l = &cfg.local_vol;
    if let Some(path) = &l.dataset {
        if path.exists() {
            log::info!("reading observations from {}", path.display());
            return obs_io::read_observations(path).map_err(csv_err(path));
        }
    }
    let mc = MCConfig { n_paths: l.mc_paths, n_steps: l.mc_steps, antithetic: l.antithetic, seed: cfg.seed };
    log::info!("pricing {} observations with {} paths", l.n_observations, l.mc_paths);
    let obs = oracles::generate_observations(l.n_observations, params, &mc, cfg.seed)?;
    let mut targets: Vec<PathBuf> = l.dataset.iter().cloned().collect();
    if let Some(dir) = out_dir {
        targets.push(dir.join("observations.csv"));
    }
    for path in targets {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        obs_io::write_observations(&path, &obs).map_err(csv_err(&path))?;
    }
    Ok(obs)
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    w.write_record(header).map_err(csv_err(path))?;
    for r in rows {
        w.write_record(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Trajectory CSV header: `epoch,wall_time_s,loss_<c>...,lambda_<c>...,total`.
pub fn trajectory_header(report: &TrainReport) -> Vec<String> {
    let mut h = vec!["epoch".to_string(), "wall_time_s".to_string()];
    h.extend(report.categories.iter().map(|c| format!("loss_{}", c.label())));
    h.extend(report.categories.iter().map(|c| format!("lambda_{}", c.label())));
    h.push("total".into());
    h
}

/// Writes every artifact of a finished (or diverged) run into `dir`.
pub fn write_run_outputs(
    dir: &Path,
    cfg: &ExperimentConfig,
    report: &TrainReport,
    problem: &Problem,
) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let p = dir.join("config.toml");
    fs::write(&p, cfg.to_toml()).map_err(io_err(&p))?;

    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.epoch.to_string(), fmt(r.wall_time)];
            row.extend(r.losses.iter().map(|&v| fmt(v)));
            row.extend(r.lambdas.iter().map(|&v| fmt(v)));
            row.push(fmt(r.total));
            row
        })
        .collect();
    write_rows(&dir.join("trajectory.csv"), &trajectory_header(report), &rows)?;

    if let Some(first) = report.validation.first() {
        let mut header = vec!["epoch".to_string(), "wall_time_s".to_string()];
        header.extend(first.metrics.names().into_iter().map(String::from));
        let rows: Vec<Vec<String>> = report
            .validation
            .iter()
            .map(|v| {
                let mut row = vec![v.epoch.to_string(), fmt(v.wall_time)];
                row.extend(v.metrics.0.iter().map(|(_, x)| fmt(*x)));
                row
            })
            .collect();
        write_rows(&dir.join("validation_trajectory.csv"), &header, &rows)?;
    }

    let rows: Vec<Vec<String>> =
        report.final_metrics.0.iter().map(|(n, v)| vec![n.clone(), fmt(*v)]).collect();
    write_rows(&dir.join("metrics.csv"), &["metric".into(), "value".into()], &rows)?;

    let p = dir.join("model.dcpde");
    fs::write(&p, trainer::model_to_string(&report.model)).map_err(io_err(&p))?;

    for d in &cfg.profiles.derivs {
        let rows = profile_rows(&report.model, problem, d, &cfg.profiles.t, cfg.profiles.n)?;
        let rows: Vec<Vec<String>> = rows.iter().map(|r| r.iter().map(|&v| fmt(v)).collect()).collect();
        let header = ["x", "t", "value", "oracle"].map(String::from);
        write_rows(&dir.join(format!("profile_{d}.csv")), &header, &rows)?;
    }
    Ok(())
}

/// `[x, t, model, oracle]` rows of one derivative along the first input at
/// each fixed time. Remaining spatial inputs of `heat_nd` sit at 0.5.
pub fn profile_rows(
    model: &Model,
    problem: &Problem,
    deriv: &str,
    t_values: &[f64],
    n: usize,
) -> Result<Vec<[f64; 4]>, CliError> {
    let n_in = problem.input_dim();
    let term = profile_term(deriv, n_in)?;
    let (lo, hi) = (problem.domain.lo[0], problem.domain.hi[0]);
    let n = n.max(2);
    let mut pts = ndarray::Array2::from_elem((n * t_values.len(), n_in), 0.5);
    for (k, &t) in t_values.iter().enumerate() {
        for i in 0..n {
            let row = k * n + i;
            pts[[row, 0]] = lo + (hi - lo) * i as f64 / (n - 1) as f64;
            pts[[row, n_in - 1]] = t;
        }
    }
    let second = match term {
        Term::Hess(j) => vec![j],
        _ => Vec::new(),
    };
    let b = model.bundles(pts.view(), &DerivRequest::with_second(second)).map_err(|e| CliError::Train(e.into()))?;
    let ora = problem.oracle.bundles(pts.view());
    Ok((0..pts.nrows()).map(|i| [pts[[i, 0]], pts[[i, n_in - 1]], term.get(&b, i), term.get(&ora, i)]).collect())
}

/// Outcome of one training run written to disk.
#[derive(Debug)]
pub enum RunOutcome {
    Finished(Box<TrainReport>),
    Diverged(Box<TrainReport>, String),
}

/// Trains one configuration and writes its outputs into `dir`.
pub fn execute_run(cfg: &ExperimentConfig, method: Method, dir: &Path) -> Result<RunOutcome, CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let problem = build_problem(cfg, Some(dir))?;
    let tc = cfg.train_config(method)?;
    let mut cfg = cfg.clone();
    cfg.method = method.name().into();
    match trainer::train(&problem, &tc) {
        Ok(report) => {
            write_run_outputs(dir, &cfg, &report, &problem)?;
            Ok(RunOutcome::Finished(Box::new(report)))
        }
        Err(TrainError::Diverged { epoch, reason, report }) => {
            write_run_outputs(dir, &cfg, &report, &problem)?;
            Ok(RunOutcome::Diverged(report, format!("diverged at epoch {epoch}: {reason}")))
        }
        Err(e) => Err(CliError::Train(e)),
    }
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<(), CliError> {
    match execute_run(cfg, cfg.method()?, out)? {
        RunOutcome::Finished(report) => {
            for (name, v) in &report.final_metrics.0 {
                log::info!("{name} = {v:e}");
            }
            Ok(())
        }
        RunOutcome::Diverged(_, msg) => Err(CliError::Diverged(msg)),
    }
}

/// One cell of a sensitivity sweep with log10 values of the ranking metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub eta_m: f64,
    pub p_m: usize,
    pub p_lambda: usize,
    pub log_values: Vec<f64>,
    pub ok: bool,
}

impl SweepCell {
    pub fn score(&self) -> f64 {
        self.log_values.iter().sum()
    }
}

/// The `k` successful cells with the lowest summed log-metrics, best first.
/// Ties keep grid order.
pub fn best_cells(cells: &[SweepCell], k: usize) -> Vec<&SweepCell> {
    let mut ok: Vec<&SweepCell> = cells.iter().filter(|c| c.ok && !c.score().is_nan()).collect();
    ok.sort_by(|a, b| a.score().total_cmp(&b.score()));
    ok.truncate(k);
    ok
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<SweepCell>, CliError> {
    let method = cfg.method()?;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let s = &cfg.sweep;
    let mut cells = Vec::new();
    let mut rows = Vec::new();
    for &eta in &s.eta_m {
        for &pm in &s.p_m {
            for &pl in &s.p_lambda {
                let mut c = cfg.clone();
                c.training.eta_m = eta;
                c.training.p_m = pm;
                c.training.p_lambda = pl;
                if let Some(e) = s.epochs {
                    c.training.epochs = e;
                }
                let dir = out.join(format!("eta{eta:e}_pm{pm}_pl{pl}"));
                log::info!("sweep cell eta_m={eta:e} p_m={pm} p_lambda={pl}");
                let (status, metrics) = match execute_run(&c, method, &dir) {
                    Ok(RunOutcome::Finished(r)) => ("ok", Some(r.final_metrics)),
                    Ok(RunOutcome::Diverged(..)) => ("diverged", None),
                    Err(CliError::Train(e)) => {
                        log::warn!("cell failed: {e}");
                        ("error", None)
                    }
                    Err(e) => return Err(e),
                };
                let mut logs = Vec::new();
                for name in &s.metrics {
                    let v = metrics.as_ref().and_then(|m| m.get(name)).unwrap_or(f64::NAN);
                    logs.push(v.log10());
                    rows.push(vec![
                        fmt(eta),
                        pm.to_string(),
                        pl.to_string(),
                        name.clone(),
                        fmt(v),
                        fmt(v.log10()),
                        status.to_string(),
                    ]);
                }
                cells.push(SweepCell { eta_m: eta, p_m: pm, p_lambda: pl, log_values: logs, ok: status == "ok" });
            }
        }
    }
    let header = ["eta_m", "p_m", "p_lambda", "metric", "value", "log10_value", "status"].map(String::from);
    write_rows(&out.join("sweep.csv"), &header, &rows)?;
    let ranked = best_cells(&cells, cells.len());
    let rows: Vec<Vec<String>> = ranked
        .iter()
        .enumerate()
        .map(|(i, c)| vec![(i + 1).to_string(), fmt(c.eta_m), c.p_m.to_string(), c.p_lambda.to_string(), fmt(c.score())])
        .collect();
    let header = ["rank", "eta_m", "p_m", "p_lambda", "log10_sum"].map(String::from);
    write_rows(&out.join("sweep_best.csv"), &header, &rows)?;
    Ok(cells)
}

/// Seed-aggregated ablation summary for one method and metric.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationSummary {
    pub method: Method,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

pub fn cmd_ablate(cfg: &ExperimentConfig, seeds: &[u64], out: &Path) -> Result<Vec<AblationSummary>, CliError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let methods: Vec<Method> = cfg.ablate.methods.iter().map(|m| parse_method(m)).collect::<Result<_, _>>()?;
    let mut long_rows = Vec::new();
    let mut per_method: Vec<(Method, BTreeMap<String, Vec<f64>>, Vec<String>)> = Vec::new();
    let mut diverged = Vec::new();
    for &method in &methods {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut order = Vec::new();
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let dir = out.join(method.name()).join(format!("seed{seed}"));
            log::info!("ablation {method} seed {seed}");
            match execute_run(&c, method, &dir)? {
                RunOutcome::Finished(r) => {
                    for (name, v) in &r.final_metrics.0 {
                        if !values.contains_key(name) {
                            order.push(name.clone());
                        }
                        values.entry(name.clone()).or_default().push(*v);
                        long_rows.push(vec![method.name().into(), seed.to_string(), "ok".into(), name.clone(), fmt(*v)]);
                    }
                }
                RunOutcome::Diverged(_, msg) => {
                    log::warn!("{method} seed {seed}: {msg}");
                    diverged.push(format!("{method}/seed{seed}"));
                    long_rows.push(vec![method.name().into(), seed.to_string(), "diverged".into(), String::new(), String::new()]);
                }
            }
        }
        per_method.push((method, values, order));
    }
    let header = ["method", "seed", "status", "metric", "value"].map(String::from);
    write_rows(&out.join("ablation_runs.csv"), &header, &long_rows)?;

    let mut summary = Vec::new();
    for (method, values, order) in per_method {
        for name in order {
            let v = &values[&name];
            let n = v.len();
            let mean = v.iter().sum::<f64>() / n as f64;
            let var = if n > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
            summary.push(AblationSummary { method, metric: name, mean, std: var.sqrt(), n });
        }
    }
    let rows: Vec<Vec<String>> = summary
        .iter()
        .map(|s| vec![s.method.name().into(), s.metric.clone(), fmt(s.mean), fmt(s.std), s.n.to_string()])
        .collect();
    let header = ["method", "metric", "mean", "std", "n"].map(String::from);
    write_rows(&out.join("ablation_summary.csv"), &header, &rows)?;
    if !diverged.is_empty() {
        return Err(CliError::Diverged(format!("runs diverged: {}", diverged.join(", "))));
    }
    Ok(summary)
}

/// Metrics gathered from one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub method: String,
    pub metrics: Vec<(String, f64)>,
}

/// Axis used for nAUC and half-life.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeAxis {
    /// Deterministic; default.
    Epoch,
    WallClock,
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("missing file {}", path.display())));
    }
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header = r.headers().map_err(csv_err(path))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(csv_err(path))?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

fn parse_f64(path: &Path, s: &str) -> Result<f64, CliError> {
    s.parse().map_err(|_| CliError::Usage(format!("{}: bad number `{s}`", path.display())))
}

pub fn metric_direction(name: &str) -> Direction {
    if name.starts_with("nauc") {
        Direction::Maximize
    } else {
        Direction::Minimize
    }
}

/// Reads a run directory and derives accuracy, stability, efficiency and
/// violation metrics.
pub fn summarize_run(dir: &Path, axis: TimeAxis) -> Result<RunSummary, CliError> {
    let cfg_path = dir.join("config.toml");
    let method = match fs::read_to_string(&cfg_path) {
        Ok(text) => ExperimentConfig::from_toml(&text)?.method,
        Err(_) => "unknown".into(),
    };
    let label = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());

    let mpath = dir.join("metrics.csv");
    let (_, rows) = read_csv(&mpath)?;
    let mut metrics = Vec::new();
    for r in rows {
        if r.len() != 2 {
            return Err(CliError::Usage(format!("{}: expected metric,value rows", mpath.display())));
        }
        metrics.push((r[0].clone(), parse_f64(&mpath, &r[1])?));
    }

    let tpath = dir.join("trajectory.csv");
    if !tpath.exists() {
        return Err(CliError::Usage(format!("missing file {}", tpath.display())));
    }
    let vpath = dir.join("validation_trajectory.csv");
    let (header, rows) = read_csv(&vpath)?;
    let col = |name: &str| header.iter().position(|h| h == name);
    let (Some(ei), Some(wi), Some(ui)) = (col("epoch"), col("wall_time_s"), col("E_u")) else {
        return Err(CliError::Usage(format!("{}: missing epoch, wall_time_s or E_u column", vpath.display())));
    };
    let mut times = Vec::new();
    let mut errs = Vec::new();
    for r in &rows {
        let t = match axis {
            TimeAxis::Epoch => parse_f64(&vpath, &r[ei])?,
            TimeAxis::WallClock => parse_f64(&vpath, &r[wi])?,
        };
        times.push(t);
        errs.push(parse_f64(&vpath, &r[ui])?);
    }
    let (tv, na, th) = match Trajectory::new(times, errs) {
        Ok(traj) => (
            metrics::tvn(&traj, metrics::EPS),
            metrics::nauc(&traj, metrics::EPS),
            metrics::t_half(&traj).unwrap_or(f64::NAN),
        ),
        Err(_) => (f64::NAN, f64::NAN, f64::NAN),
    };
    metrics.push(("tvn_E_u".into(), tv));
    metrics.push(("nauc_E_u".into(), na));
    metrics.push(("t_half_E_u".into(), th));
    Ok(RunSummary { label, method, metrics })
}

/// Averages runs that share a method into one summary labelled by the method.
pub fn group_by_method(runs: &[RunSummary]) -> Vec<RunSummary> {
    let mut out: Vec<(RunSummary, usize)> = Vec::new();
    for r in runs {
        match out.iter_mut().find(|(s, _)| s.method == r.method) {
            Some((s, n)) => {
                for (name, v) in &r.metrics {
                    if let Some(e) = s.metrics.iter_mut().find(|(m, _)| m == name) {
                        e.1 += v;
                    }
                }
                *n += 1;
            }
            None => out.push((RunSummary { label: r.method.clone(), method: r.method.clone(), metrics: r.metrics.clone() }, 1)),
        }
    }
    out.into_iter()
        .map(|(mut s, n)| {
            s.metrics.iter_mut().for_each(|(_, v)| *v /= n as f64);
            s
        })
        .collect()
}

/// One output row of the report: `method,metric,value,improvement_pct,rank,log10_value`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub method: String,
    pub metric: String,
    pub value: f64,
    pub improvement_pct: Option<f64>,
    pub rank: f64,
    pub log10_value: Option<f64>,
}

/// Ranks every metric shared by all runs, adds improvements relative to
/// `runs[baseline]` and a final Borda row per run.
pub fn build_report(runs: &[RunSummary], baseline: usize) -> Result<Vec<ReportRow>, CliError> {
    if runs.len() < 2 {
        return Err(CliError::Usage("report needs at least two runs".into()));
    }
    let names: Vec<String> = runs[0]
        .metrics
        .iter()
        .map(|(n, _)| n.clone())
        .filter(|n| runs.iter().all(|r| r.metrics.iter().any(|(m, _)| m == n)))
        .collect();
    let get = |r: &RunSummary, n: &str| r.metrics.iter().find(|(m, _)| m == n).map(|(_, v)| *v).unwrap();
    let mut rows = Vec::new();
    let mut rank_matrix = Vec::new();
    for name in &names {
        let dir = metric_direction(name);
        let values: Vec<f64> = runs.iter().map(|r| get(r, name)).collect();
        let worst = match dir {
            Direction::Minimize => f64::INFINITY,
            Direction::Maximize => f64::NEG_INFINITY,
        };
        let keyed: Vec<f64> = values.iter().map(|&v| if v.is_nan() { worst } else { v }).collect();
        let ranks = metrics::rank_with_ties(&keyed, dir);
        let base = values[baseline];
        for (i, r) in runs.iter().enumerate() {
            let v = values[i];
            rows.push(ReportRow {
                method: r.label.clone(),
                metric: name.clone(),
                value: v,
                improvement_pct: Some(metrics::improvement_pct(base, v, dir, metrics::EPS)),
                rank: ranks[i],
                log10_value: Some(v.log10()),
            });
        }
        rank_matrix.push(ranks);
    }
    let sums = metrics::borda(&rank_matrix).map_err(|e| CliError::Usage(e.to_string()))?;
    let ranks = metrics::rank_with_ties(&sums, Direction::Minimize);
    for (i, r) in runs.iter().enumerate() {
        rows.push(ReportRow {
            method: r.label.clone(),
            metric: "borda".into(),
            value: sums[i],
            improvement_pct: None,
            rank: ranks[i],
            log10_value: None,
        });
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "metric", "value", "improvement_pct", "rank", "log10_value"]).expect("in-memory write");
    for r in rows {
        let opt = |v: Option<f64>| v.map(fmt).unwrap_or_default();
        w.write_record([r.method.clone(), r.metric.clone(), fmt(r.value), opt(r.improvement_pct), fmt(r.rank), opt(r.log10_value)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
}

/// Shortest trailing path of each directory that tells it apart from the
/// others, e.g. `pinn/seed0` and `dcpinn/seed0`.
pub fn unique_labels(dirs: &[PathBuf]) -> Vec<String> {
    let parts: Vec<Vec<String>> = dirs
        .iter()
        .map(|d| d.components().map(|c| c.as_os_str().to_string_lossy().into_owned()).collect())
        .collect();
    let tail = |p: &[String], k: usize| p[p.len().saturating_sub(k)..].join("/");
    let max_depth = parts.iter().map(Vec::len).max().unwrap_or(1).max(1);
    let mut depth = 1;
    while depth < max_depth {
        let labels: Vec<String> = parts.iter().map(|p| tail(p, depth)).collect();
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() == labels.len() {
            break;
        }
        depth += 1;
    }
    parts.iter().map(|p| tail(p, depth)).collect()
}

pub fn cmd_report(
    dirs: &[PathBuf],
    baseline: Option<&str>,
    group: bool,
    axis: TimeAxis,
    out: Option<&Path>,
) -> Result<Vec<ReportRow>, CliError> {
    let mut runs: Vec<RunSummary> = dirs.iter().map(|d| summarize_run(d, axis)).collect::<Result<_, _>>()?;
    for (run, label) in runs.iter_mut().zip(unique_labels(dirs)) {
        run.label = label;
    }
    let runs = if group { group_by_method(&runs) } else { runs };
    let base = match baseline {
        Some(b) => runs
            .iter()
            .position(|r| r.label == b || r.method == b)
            .ok_or_else(|| CliError::Usage(format!("baseline `{b}` matches no run")))?,
        None => runs.iter().position(|r| r.method == "pinn").unwrap_or(0),
    };
    let rows = build_report(&runs, base)?;
    let text = report_csv(&rows);
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let p = dir.join("report.csv");
            fs::write(&p, text).map_err(io_err(&p))?;
        }
        None => print!("{text}"),
    }
    Ok(rows)
}

#[derive(Debug, Parser)]
#[command(name = "dcpde", version, about = "Derivative-constrained PINN experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct CommonArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated seed list for `ablate`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration.
    Run(CommonArgs),
    /// Sensitivity sweep over eta_m, p_m and p_lambda.
    Sweep(CommonArgs),
    /// Ablation over methods and seeds.
    Ablate(CommonArgs),
    /// Rank finished runs.
    Report {
        run_dirs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run label or method used as the improvement baseline.
        #[arg(long)]
        baseline: Option<String>,
        /// Average runs that share a method.
        #[arg(long)]
        group_by_method: bool,
        /// Use wall-clock seconds instead of epochs for nAUC and half-life.
        #[arg(long)]
        wall_time: bool,
    },
}

fn load_common(args: &CommonArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn configure_threads() {
    #[cfg(feature = "parallel")]
    if let Some(n) = std::env::var("DCPDE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global().is_err() {
            log::warn!("thread pool already initialised; DCPDE_THREADS ignored");
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(a) => {
            let (cfg, out) = load_common(&a)?;
            cmd_run(&cfg, &out)
        }
        Command::Sweep(a) => {
            let (cfg, out) = load_common(&a)?;
            cmd_sweep(&cfg, &out).map(|_| ())
        }
        Command::Ablate(a) => {
            let (cfg, out) = load_common(&a)?;
            let seeds = a.seeds.clone().unwrap_or_else(|| cfg.ablate.seeds.clone());
            cmd_ablate(&cfg, &seeds, &out).map(|_| ())
        }
        Command::Report { run_dirs, out, baseline, group_by_method, wall_time } => {
            let axis = if wall_time { TimeAxis::WallClock } else { TimeAxis::Epoch };
            cmd_report(&run_dirs, baseline.as_deref(), group_by_method, axis, out.as_deref()).map(|_| ())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
