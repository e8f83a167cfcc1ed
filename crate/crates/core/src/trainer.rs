//! Training loop with self-adaptive balancing, constrained baselines, Adam
//! and trajectory recording.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use thiserror::Error;
use web_time::Instant;

use crate::balancing::{self, BalanceError, BalancingState};
use crate::baselines::{self, BaselineError, OuterLoopState};
use crate::diffnet::{
    init_glorot, Activation, BundleBatch, DerivRequest, Layer, NetError, NetworkParams, OutputTransform, ParamGrad,
    Tape,
};
use crate::losses::{hinge_adjoint, weighted_mse_adjoint, CategoryId, HingeKind, LossAdjoint, LossError};
use crate::metrics;
use crate::problems::{self, Domain, HardTransform, Operator, Problem, ProblemError};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String, report: Box<TrainReport> },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Pinn,
    PinnIneq,
    HpinnPen,
    HpinnAl,
    AlPinn,
    Dcpinn,
    DcpinnNoLambda,
    DcpinnNoM,
    DcpinnStatic,
}

impl Method {
    pub const ALL: [Method; 9] = [
        Method::Pinn,
        Method::PinnIneq,
        Method::HpinnPen,
        Method::HpinnAl,
        Method::AlPinn,
        Method::Dcpinn,
        Method::DcpinnNoLambda,
        Method::DcpinnNoM,
        Method::DcpinnStatic,
    ];

    /// Ablation roster in reporting order.
    pub const ABLATION: [Method; 5] =
        [Method::Pinn, Method::PinnIneq, Method::DcpinnNoLambda, Method::DcpinnNoM, Method::Dcpinn];

    pub fn name(self) -> &'static str {
        match self {
            Method::Pinn => "pinn",
            Method::PinnIneq => "pinn_ineq",
            Method::HpinnPen => "hpinn_pen",
            Method::HpinnAl => "hpinn_al",
            Method::AlPinn => "al_pinn",
            Method::Dcpinn => "dcpinn",
            Method::DcpinnNoLambda => "dcpinn_no_lambda",
            Method::DcpinnNoM => "dcpinn_no_m",
            Method::DcpinnStatic => "dcpinn_static",
        }
    }

    pub fn from_name(name: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == name)
    }

    pub fn uses_inequalities(self) -> bool {
        self != Method::Pinn
    }

    pub fn adapts_m(self) -> bool {
        matches!(self, Method::Dcpinn | Method::DcpinnNoLambda)
    }

    pub fn adapts_lambda(self) -> bool {
        matches!(self, Method::Dcpinn | Method::DcpinnNoM)
    }

    pub fn hard_boundary(self) -> bool {
        matches!(self, Method::HpinnPen | Method::HpinnAl)
    }

    pub fn outer_loop(self) -> bool {
        matches!(self, Method::HpinnPen | Method::HpinnAl | Method::AlPinn)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_transition: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub eta_m: f64,
    pub p_m: usize,
    pub p_lambda: usize,
    pub seed: u64,
    pub record_stride: usize,
    /// Evaluate validation metrics at every record, not only at the end.
    pub validation_trajectory: bool,
    pub hinge: HingeKind,
    pub n_outer: usize,
    pub beta: f64,
    pub penalty_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dcpinn,
            epochs: 10_000,
            lr_init: 1e-3,
            lr_transition: 2000.0,
            lr_decay: 0.9,
            weight_decay: 1e-6,
            eta_m: 1e-2,
            p_m: 100,
            p_lambda: 1000,
            seed: 0,
            record_stride: 100,
            validation_trajectory: true,
            hinge: HingeKind::Relu,
            n_outer: 10,
            beta: 2.0,
            penalty_init: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.lr_init > 0.0) || !(self.lr_transition > 0.0) || !(self.lr_decay > 0.0) {
            return bad("learning-rate settings must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1");
        }
        if !(self.eta_m > 0.0) || self.p_m == 0 || self.p_lambda == 0 {
            return bad("eta_m, p_m and p_lambda must be positive");
        }
        if self.n_outer == 0 || !(self.beta > 1.0) || !(self.penalty_init > 0.0) {
            return bad("outer loop needs n_outer >= 1, beta > 1 and a positive initial penalty");
        }
        if let HingeKind::Softplus { delta } = self.hinge {
            if !(delta > 0.0) {
                return bad("softplus hinge delta must be positive");
            }
        }
        Ok(())
    }
}

/// `lr_init * decay^(epoch / transition)` with a continuous exponent.
pub fn lr_at(epoch: usize, lr_init: f64, transition: f64, decay: f64) -> f64 {
    lr_init * decay.powf(epoch as f64 / transition)
}

/// Tensor-product grid including endpoints, row-major.
pub fn sample_uniform_grid(domain: &Domain, per_axis_counts: &[usize]) -> Result<Array2<f64>, ProblemError> {
    problems::uniform_grid(domain, per_axis_counts)
}

/// Adam moments with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ParamGrad,
    pub v: ParamGrad,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(params: &NetworkParams, weight_decay: f64) -> Self {
        Self {
            m: ParamGrad::zeros_like(params),
            v: ParamGrad::zeros_like(params),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// One bias-corrected Adam update. Weight decay shrinks the parameters by
/// `1 - lr * weight_decay` before the Adam delta is applied.
pub fn adam_step(
    state: &mut AdamState,
    params: &mut NetworkParams,
    grads: &ParamGrad,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.layers.len() != params.layers.len() {
        return Err(TrainError::Config("gradient and parameter shapes differ".into()));
    }
    if !grads.is_finite() {
        return Err(TrainError::Net(NetError::NonFinite { index: 0 }));
    }
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let shrink = 1.0 - lr * state.weight_decay;
    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    };
    for (((layer, g), m), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut state.m.layers).zip(&mut state.v.layers) {
        if layer.weight.dim() != g.weight.dim() || layer.bias.len() != g.bias.len() {
            return Err(TrainError::Config("gradient and parameter shapes differ".into()));
        }
        for (((p, &gv), mv), vv) in
            layer.weight.iter_mut().zip(g.weight.iter()).zip(m.weight.iter_mut()).zip(v.weight.iter_mut())
        {
            update(p, gv, mv, vv);
        }
        for (((p, &gv), mv), vv) in
            layer.bias.iter_mut().zip(g.bias.iter()).zip(m.bias.iter_mut()).zip(v.bias.iter_mut())
        {
            update(p, gv, mv, vv);
        }
    }
    Ok(())
}

/// Network plus the optional architectural boundary transform.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: NetworkParams,
    pub hard: Option<HardTransform>,
}

impl Model {
    /// Bundles of the model output `u` at `points`, evaluated in chunks.
    pub fn bundles(&self, points: ArrayView2<f64>, request: &DerivRequest) -> Result<BundleBatch, NetError> {
        let psi = crate::diffnet::eval_bundles(&self.params, points, request)?;
        Ok(match &self.hard {
            Some(h) => h.apply(points, request, &psi),
            None => psi,
        })
    }
}

/// Named scalar metrics in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics(pub Vec<(String, f64)>);

impl Metrics {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn push(&mut self, name: impl Into<String>, value: f64) {
        self.0.push((name.into(), value));
    }

    pub fn names(&self) -> Vec<&str> {
        self.0.iter().map(|(n, _)| n.as_str()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub wall_time: f64,
    /// Raw losses in category order.
    pub losses: Vec<f64>,
    /// Weights applied to each raw loss in the objective (0 if not trained).
    pub lambdas: Vec<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationRecord {
    pub epoch: usize,
    pub wall_time: f64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub method: Method,
    pub categories: Vec<CategoryId>,
    pub records: Vec<EpochRecord>,
    pub validation: Vec<ValidationRecord>,
    pub final_metrics: Metrics,
    pub model: Model,
    pub balancing: BalancingState,
    pub wall_time: f64,
}

/// Validation metrics of a model on the problem's dense grid.
///
/// * `E_u`: value RMSE over the full grid against the oracle.
/// * `E_0`, `E_b`: value RMSE on the initial/observation and boundary sets.
/// * `E_f`: RMSE of the PDE residual.
/// * `E_<deriv>`: RMSE of a network derivative against the oracle derivative.
/// * `E_h`: RMSE of the positive parts of all inequalities taken together.
/// * `viol_<h>`, `rate_<h>`: violation score and violation rate of each inequality.
pub fn validate(model: &Model, problem: &Problem) -> Result<Metrics, TrainError> {
    let v = &problem.validation;
    let mut second = problem.second_dirs();
    for d in &v.derivs {
        if let problems::Term::Hess(j) = d.term {
            second.push(j);
        }
    }
    second.sort_unstable();
    second.dedup();
    let request = DerivRequest::with_second(second);
    let b = model.bundles(v.points.view(), &request)?;
    let mut out = Metrics::default();
    let err = |e: metrics::MetricError| TrainError::Config(format!("validation: {e}"));
    out.push("E_u", metrics::rmse_between(b.value.as_slice().unwrap(), v.oracle.value.as_slice().unwrap()).map_err(err)?);
    let init = model.bundles(v.initial.points.view(), &DerivRequest::value_only())?;
    out.push("E_0", metrics::rmse_between(init.value.as_slice().unwrap(), &v.initial.targets).map_err(err)?);
    let bound = model.bundles(v.boundary.points.view(), &DerivRequest::value_only())?;
    out.push("E_b", metrics::rmse_between(bound.value.as_slice().unwrap(), &v.boundary.targets).map_err(err)?);
    let f = problem.residual.eval_batch(v.points.view(), &b)?;
    out.push("E_f", metrics::rmse(&f).map_err(err)?);
    for d in &v.derivs {
        let net: Vec<f64> = (0..b.len()).map(|i| d.term.get(&b, i)).collect();
        let ora: Vec<f64> = (0..b.len()).map(|i| d.term.get(&v.oracle, i)).collect();
        out.push(format!("E_{}", d.name), metrics::rmse_between(&net, &ora).map_err(err)?);
    }
    let mut positive = Vec::new();
    let mut per_ineq = Vec::new();
    for (op, name) in problem.inequalities.iter().zip(&problem.ineq_names) {
        let h = op.eval_batch(v.points.view(), &b)?;
        positive.extend(h.iter().map(|&x| x.max(0.0)));
        per_ineq.push((format!("viol_{name}"), metrics::violation_score(&h).map_err(err)?));
        per_ineq.push((format!("rate_{name}"), metrics::violation_rate(&h).map_err(err)?));
    }
    if !positive.is_empty() {
        out.push("E_h", metrics::rmse(&positive).map_err(err)?);
    }
    out.0.extend(per_ineq);
    Ok(out)
}

#[derive(Debug, Clone)]
enum PartKind {
    Fit(Vec<f64>),
    Equality(Operator),
    Inequality(Operator),
}

#[derive(Debug, Clone)]
struct Part {
    id: CategoryId,
    rows: Range<usize>,
    kind: PartKind,
    trained: bool,
}

#[derive(Debug, Clone)]
struct Group {
    points: Array2<f64>,
    request: DerivRequest,
    parts: Vec<Part>,
}

impl Group {
    fn any_trained(&self) -> bool {
        self.parts.iter().any(|p| p.trained)
    }
}

struct PartEval {
    values: Vec<f64>,
    adj: LossAdjoint,
}

fn build_groups(problem: &Problem, method: Method) -> Vec<Group> {
    let n_in = problem.input_dim();
    let hard = method.hard_boundary();
    let ineq = method.uses_inequalities();

    let n0 = problem.data.len();
    let nb = problem.boundary.len();
    let mut fit_pts = Array2::zeros((n0 + nb, n_in));
    fit_pts.slice_mut(s![..n0, ..]).assign(&problem.data.points);
    fit_pts.slice_mut(s![n0.., ..]).assign(&problem.boundary.points);
    let fit = Group {
        points: fit_pts,
        request: DerivRequest::value_only(),
        parts: vec![
            Part { id: CategoryId::Data, rows: 0..n0, kind: PartKind::Fit(problem.data.targets.clone()), trained: true },
            Part {
                id: CategoryId::Boundary,
                rows: n0..n0 + nb,
                kind: PartKind::Fit(problem.boundary.targets.clone()),
                trained: !hard,
            },
        ],
    };

    let ineq_parts = |n: usize| -> Vec<Part> {
        problem
            .inequalities
            .iter()
            .enumerate()
            .map(|(k, op)| Part { id: CategoryId::Inequality(k), rows: 0..n, kind: PartKind::Inequality(op.clone()), trained: ineq })
            .collect()
    };
    let ni = problem.interior.nrows();
    let mut interior_parts =
        vec![Part { id: CategoryId::Residual, rows: 0..ni, kind: PartKind::Equality(problem.residual.clone()), trained: true }];
    let mut groups = vec![fit];
    let mut dirs = problem.residual.second_dirs(n_in);
    match &problem.ineq_points {
        None => {
            interior_parts.extend(ineq_parts(ni));
            dirs = problem.second_dirs();
            groups.push(Group { points: problem.interior.clone(), request: DerivRequest::with_second(dirs), parts: interior_parts });
        }
        Some(pts) => {
            dirs.sort_unstable();
            dirs.dedup();
            groups.push(Group { points: problem.interior.clone(), request: DerivRequest::with_second(dirs), parts: interior_parts });
            let mut hd: Vec<usize> = problem.inequalities.iter().flat_map(|op| op.second_dirs(n_in)).collect();
            hd.sort_unstable();
            hd.dedup();
            groups.push(Group { points: pts.clone(), request: DerivRequest::with_second(hd), parts: ineq_parts(pts.nrows()) });
        }
    }
    groups
}

fn part_values(part: &Part, points: ArrayView2<f64>, u: &BundleBatch) -> Result<Vec<f64>, TrainError> {
    Ok(match &part.kind {
        PartKind::Fit(targets) => part.rows.clone().zip(targets).map(|(i, t)| u.value[i] - t).collect(),
        PartKind::Equality(op) | PartKind::Inequality(op) => op.eval_batch(points, u)?,
    })
}

/// Adds `scale * d_values` (plus optional multiplier terms) of one part to a
/// group-level bundle adjoint.
fn add_part_adjoint(part: &Part, points: ArrayView2<f64>, d_values: &[f64], adj: &mut BundleBatch) {
    match &part.kind {
        PartKind::Fit(_) => {
            for (i, d) in part.rows.clone().zip(d_values) {
                adj.value[i] += d;
            }
        }
        PartKind::Equality(op) | PartKind::Inequality(op) => op.add_adjoint(points, d_values, adj),
    }
}

/// Multiplier vector attached to a category by the augmented Lagrangian.
fn multipliers(state: &OuterLoopState, id: CategoryId, method: Method) -> Option<&[f64]> {
    if !matches!(method, Method::HpinnAl | Method::AlPinn) {
        return None;
    }
    match id {
        CategoryId::Residual => Some(&state.mu_f),
        CategoryId::Boundary if method == Method::AlPinn => Some(&state.mu_b),
        CategoryId::Inequality(k) => Some(&state.mu_h[k]),
        _ => None,
    }
}

/// Value and value-gradient of the multiplier term `mu . v` (equalities) or
/// `mu . [v]_+` (inequalities).
fn multiplier_term(mu: &[f64], part: &Part, values: &[f64]) -> (f64, Vec<f64>) {
    let ineq = matches!(part.kind, PartKind::Inequality(_));
    let mut val = 0.0;
    let grad = mu
        .iter()
        .zip(values)
        .map(|(&m, &v)| {
            if ineq {
                val += m * v.max(0.0);
                if v > 0.0 {
                    m
                } else {
                    0.0
                }
            } else {
                val += m * v;
                m
            }
        })
        .collect();
    (val, grad)
}

fn category_weight(
    id: CategoryId,
    method: Method,
    trained: &[(CategoryId, usize)],
    balance: &BalancingState,
    outer: &OuterLoopState,
) -> f64 {
    if !trained.iter().any(|t| t.0 == id) {
        return 0.0;
    }
    if method.outer_loop() {
        match id {
            CategoryId::Data => 1.0,
            _ => outer.penalty,
        }
    } else {
        balance.lambda(id)
    }
}

/// Stepwise training state: parameters, Adam moments, balancing weights,
/// outer-loop multipliers and the recorded trajectory.
pub struct Trainer<'a> {
    problem: Cow<'a, Problem>,
    cfg: TrainConfig,
    groups: Vec<Group>,
    categories: Vec<CategoryId>,
    trained: Vec<(CategoryId, usize)>,
    balance: BalancingState,
    outer: OuterLoopState,
    inner_steps: usize,
    adam: AdamState,
    model: Model,
    records: Vec<EpochRecord>,
    validation: Vec<ValidationRecord>,
    epoch: usize,
    train_time: f64,
}

impl<'a> Trainer<'a> {
    pub fn new(problem: &'a Problem, cfg: &TrainConfig) -> Result<Self, TrainError> {
        Self::with_problem(Cow::Borrowed(problem), cfg)
    }

    /// Trainer that owns its problem, for long-lived sessions.
    pub fn new_owned(problem: Problem, cfg: &TrainConfig) -> Result<Trainer<'static>, TrainError> {
        Trainer::with_problem(Cow::Owned(problem), cfg)
    }

    fn with_problem(problem: Cow<'a, Problem>, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let problem_ref: &Problem = &problem;
        let method = cfg.method;
        let params = init_glorot(&problem.layer_sizes, cfg.seed, problem.output_transform)?;
        let hard = method.hard_boundary().then_some(problem.hard);
        let model = Model { params, hard };
        let groups = build_groups(problem_ref, method);
        let trained: Vec<(CategoryId, usize)> = groups
            .iter()
            .flat_map(|g| g.parts.iter())
            .filter(|p| p.trained)
            .map(|p| (p.id, p.rows.len()))
            .collect();
        let balance = BalancingState::new(&trained, cfg.eta_m, cfg.p_m, cfg.p_lambda)?;
        let n_h = vec![problem.ineq_points().nrows(); problem.inequalities.len()];
        let outer =
            OuterLoopState::new(cfg.penalty_init, cfg.beta, problem.interior.nrows(), &n_h, problem.boundary.len())?;
        let adam = AdamState::new(&model.params, cfg.weight_decay);
        let categories = CategoryId::all(problem.inequalities.len());
        Ok(Self {
            problem,
            cfg: cfg.clone(),
            groups,
            categories,
            trained,
            balance,
            outer,
            inner_steps: (cfg.epochs / cfg.n_outer).max(1),
            adam,
            model,
            records: Vec::new(),
            validation: Vec::new(),
            epoch: 0,
            train_time: 0.0,
        })
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn records(&self) -> &[EpochRecord] {
        &self.records
    }

    pub fn validation(&self) -> &[ValidationRecord] {
        &self.validation
    }

    pub fn balancing(&self) -> &BalancingState {
        &self.balance
    }

    pub fn categories(&self) -> &[CategoryId] {
        &self.categories
    }

    /// Training seconds so far, excluding validation.
    pub fn train_time(&self) -> f64 {
        self.train_time
    }

    /// Appends validation metrics of the current model.
    pub fn validate_snapshot(&mut self) -> Result<(), TrainError> {
        let metrics = validate(&self.model, &self.problem)?;
        self.validation.push(ValidationRecord { epoch: self.epoch, wall_time: self.train_time, metrics });
        Ok(())
    }

    /// Records the losses of the untrained model as epoch 0.
    pub fn record_initial(&mut self) -> Result<(), TrainError> {
        self.run_epoch(0, false)
    }

    /// Runs one epoch of Algorithm 1 and returns its record on record epochs.
    pub fn step(&mut self) -> Result<Option<&EpochRecord>, TrainError> {
        let k = self.epoch + 1;
        let before = self.records.len();
        self.run_epoch(k, true)?;
        self.epoch = k;
        if self.records.len() > before && self.cfg.validation_trajectory {
            self.validate_snapshot()?;
        }
        Ok(if self.records.len() > before { self.records.last() } else { None })
    }

    pub fn finish(self) -> Result<TrainReport, TrainError> {
        let final_metrics = validate(&self.model, &self.problem)?;
        Ok(TrainReport {
            method: self.cfg.method,
            categories: self.categories,
            records: self.records,
            validation: self.validation,
            final_metrics,
            model: self.model,
            balancing: self.balance,
            wall_time: self.train_time,
        })
    }

    fn partial_report(&self) -> TrainReport {
        TrainReport {
            method: self.cfg.method,
            categories: self.categories.clone(),
            records: self.records.clone(),
            validation: self.validation.clone(),
            final_metrics: Metrics::default(),
            model: self.model.clone(),
            balancing: self.balance.clone(),
            wall_time: self.train_time,
        }
    }

    fn run_epoch(&mut self, k: usize, training: bool) -> Result<(), TrainError> {
        let clock = Instant::now();
        let cfg = &self.cfg;
        let method = cfg.method;
        let n_in = self.problem.input_dim();
        let is_record = !training || k % cfg.record_stride == 0;
        let per_category = training
            && ((method.adapts_lambda() && balancing::due(k, cfg.p_lambda)) || (method == Method::DcpinnStatic && k == 1));

        // Forward passes and per-part losses.
        let mut tapes = Vec::with_capacity(self.groups.len());
        let mut evals: Vec<Vec<Option<PartEval>>> = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            if !(g.any_trained() || is_record) {
                tapes.push(None);
                evals.push(g.parts.iter().map(|_| None).collect());
                continue;
            }
            let tape = Tape::forward(&self.model.params, g.points.view(), &g.request)?;
            let u = match &self.model.hard {
                Some(h) => h.apply(g.points.view(), &g.request, tape.bundle()),
                None => tape.bundle().clone(),
            };
            let mut pe = Vec::with_capacity(g.parts.len());
            for part in &g.parts {
                let values = part_values(part, g.points.view(), &u)?;
                let ones;
                let m: &[f64] = match self.balance.m.get(&part.id) {
                    Some(m) => m,
                    None => {
                        ones = vec![1.0; values.len()];
                        &ones
                    }
                };
                let adj = match part.kind {
                    PartKind::Inequality(_) => hinge_adjoint(&values, m, cfg.hinge)?,
                    _ => weighted_mse_adjoint(&values, m)?,
                };
                pe.push(Some(PartEval { values, adj }));
            }
            tapes.push(Some(tape));
            evals.push(pe);
        }

        // Per-category parameter gradients, only when a lambda update needs them.
        let mut cat_grads: Vec<(CategoryId, ParamGrad)> = Vec::new();
        if per_category {
            for (gi, g) in self.groups.iter().enumerate() {
                let Some(tape) = &tapes[gi] else { continue };
                for (pi, part) in g.parts.iter().enumerate() {
                    if !part.trained {
                        continue;
                    }
                    let e = evals[gi][pi].as_ref().expect("trained parts are evaluated");
                    let mut adj = BundleBatch::zeros(g.points.nrows(), n_in);
                    add_part_adjoint(part, g.points.view(), &e.adj.d_values, &mut adj);
                    let mut grad = ParamGrad::zeros_like(&self.model.params);
                    backward(tape, &self.model.hard, g, &adj, &mut grad);
                    cat_grads.push((part.id, grad));
                }
            }
        }

        // Balancing updates.
        if training && !method.outer_loop() {
            let m_due = (method.adapts_m() && balancing::due(k, cfg.p_m)) || (method == Method::DcpinnStatic && k == 1);
            if m_due {
                let mut grads = std::collections::BTreeMap::new();
                for (g, pe) in self.groups.iter().zip(&evals) {
                    for (p, e) in g.parts.iter().zip(pe) {
                        if p.trained {
                            grads.insert(p.id, e.as_ref().expect("trained parts are evaluated").adj.d_m.clone());
                        }
                    }
                }
                self.balance.apply_individual(&grads)?;
            }
            if per_category {
                let alpha = cat_grads.iter().map(|(id, g)| (*id, g.mean_abs())).collect();
                self.balance.apply_category(&alpha)?;
            }
        }

        // Objective and its parameter gradient.
        let weight = |id| category_weight(id, method, &self.trained, &self.balance, &self.outer);
        let mut total = 0.0;
        let mut grad = ParamGrad::zeros_like(&self.model.params);
        for (gi, g) in self.groups.iter().enumerate() {
            let mut adj = BundleBatch::zeros(g.points.nrows(), n_in);
            let mut any = false;
            for (pi, part) in g.parts.iter().enumerate() {
                let Some(e) = evals[gi][pi].as_ref() else { continue };
                if !part.trained {
                    continue;
                }
                let c = weight(part.id);
                total += c * e.adj.loss;
                let mut d: Vec<f64> = e.adj.d_values.iter().map(|v| c * v).collect();
                if let Some(mu) = multipliers(&self.outer, part.id, method) {
                    let (val, dm) = multiplier_term(mu, part, &e.values);
                    total += val;
                    d.iter_mut().zip(dm).for_each(|(a, b)| *a += b);
                }
                if per_category {
                    if let Some((_, cg)) = cat_grads.iter().find(|(id, _)| *id == part.id) {
                        // Balanced objectives carry no multiplier terms, so the
                        // weighted per-category gradients are exact.
                        grad.add_scaled(cg, c);
                    }
                } else {
                    add_part_adjoint(part, g.points.view(), &d, &mut adj);
                    any = true;
                }
            }
            if any {
                if let Some(tape) = &tapes[gi] {
                    backward(tape, &self.model.hard, g, &adj, &mut grad);
                }
            }
        }
        drop(tapes);

        let raw = |id: CategoryId| -> f64 {
            for (g, pe) in self.groups.iter().zip(&evals) {
                for (p, e) in g.parts.iter().zip(pe) {
                    if p.id == id {
                        return e.as_ref().map_or(f64::NAN, |e| e.adj.loss);
                    }
                }
            }
            f64::NAN
        };
        let record = EpochRecord {
            epoch: k,
            wall_time: 0.0,
            losses: self.categories.iter().map(|&c| raw(c)).collect(),
            lambdas: self.categories.iter().map(|&c| weight(c)).collect(),
            total,
        };

        let diverged = if !total.is_finite() {
            Some("non-finite loss".to_string())
        } else if total > DIVERGENCE_THRESHOLD {
            Some(format!("loss {total:e} exceeds {DIVERGENCE_THRESHOLD:e}"))
        } else if !grad.is_finite() {
            Some("non-finite gradient".to_string())
        } else {
            None
        };
        if let Some(reason) = diverged {
            self.train_time += clock.elapsed().as_secs_f64();
            self.records.push(EpochRecord { wall_time: self.train_time, ..record });
            return Err(TrainError::Diverged { epoch: k, reason, report: Box::new(self.partial_report()) });
        }
        if !training {
            self.records.push(record);
            return Ok(());
        }

        let lr = lr_at(k - 1, cfg.lr_init, cfg.lr_transition, cfg.lr_decay);
        adam_step(&mut self.adam, &mut self.model.params, &grad, lr)?;
        if method.outer_loop() && k % self.inner_steps == 0 && k < cfg.epochs {
            self.outer = outer_update(&self.outer, method, &self.groups, &evals)?;
        }
        self.train_time += clock.elapsed().as_secs_f64();
        if is_record {
            self.records.push(EpochRecord { wall_time: self.train_time, ..record });
        }
        Ok(())
    }
}

/// Runs the training loop of `cfg.method` on `problem`.
pub fn train(problem: &Problem, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let mut t = Trainer::new(problem, cfg)?;
    if cfg.validation_trajectory {
        t.validate_snapshot()?;
    }
    if cfg.epochs == 0 {
        t.record_initial()?;
    }
    for _ in 0..cfg.epochs {
        t.step()?;
    }
    t.finish()
}

fn backward(tape: &Tape, hard: &Option<HardTransform>, g: &Group, u_adj: &BundleBatch, grad: &mut ParamGrad) {
    match hard {
        Some(h) => {
            let psi_adj = h.adjoint(g.points.view(), &g.request, u_adj);
            tape.backward(&psi_adj, grad);
        }
        None => tape.backward(u_adj, grad),
    }
}

fn outer_update(
    state: &OuterLoopState,
    method: Method,
    groups: &[Group],
    evals: &[Vec<Option<PartEval>>],
) -> Result<OuterLoopState, TrainError> {
    if method == Method::HpinnPen {
        let mut next = state.clone();
        next.penalty = baselines::penalty_step(state.penalty, state.beta)?;
        next.outer_iter += 1;
        return Ok(next);
    }
    let find = |id: CategoryId| -> Vec<f64> {
        for (g, pe) in groups.iter().zip(evals) {
            for (p, e) in g.parts.iter().zip(pe) {
                if p.id == id {
                    return e.as_ref().map(|e| e.values.clone()).unwrap_or_default();
                }
            }
        }
        Vec::new()
    };
    let f = find(CategoryId::Residual);
    let h: Vec<Vec<f64>> = (0..state.mu_h.len()).map(|k| find(CategoryId::Inequality(k))).collect();
    let b = if method == Method::AlPinn { find(CategoryId::Boundary) } else { vec![0.0; state.mu_b.len()] };
    Ok(baselines::al_dual_update(state, &f, &h, &b)?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelFileError {
    #[error("missing or wrong magic header (expected DCPDE1)")]
    Magic,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Textual model dump: magic `DCPDE1`, activation, output transform, hard
/// transform, layer sizes, then each layer's row-major weights and bias.
pub fn model_to_string(model: &Model) -> String {
    let p = &model.params;
    let mut out = String::new();
    out.push_str("DCPDE1\n");
    let _ = writeln!(out, "activation {}", p.activation.name());
    let _ = writeln!(out, "output {}", p.output_transform.name());
    match model.hard {
        None => out.push_str("hard none\n"),
        Some(HardTransform::Heat { u_min, u_max }) => {
            let _ = writeln!(out, "hard heat {u_min} {u_max}");
        }
        Some(HardTransform::LocalVol { s0, u_min, u_max }) => {
            let _ = writeln!(out, "hard localvol {s0} {u_min} {u_max}");
        }
    }
    let sizes: Vec<String> = p.layer_sizes().iter().map(|s| s.to_string()).collect();
    let _ = writeln!(out, "layers {}", sizes.join(" "));
    let join = |it: &mut dyn Iterator<Item = &f64>| it.map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
    for (l, layer) in p.layers.iter().enumerate() {
        let _ = writeln!(out, "weight {l}");
        for row in layer.weight.rows() {
            let _ = writeln!(out, "{}", join(&mut row.iter()));
        }
        let _ = writeln!(out, "bias {l}");
        let _ = writeln!(out, "{}", join(&mut layer.bias.iter()));
    }
    out
}

struct LineCursor<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
}

impl<'a> LineCursor<'a> {
    fn next(&mut self) -> Result<(usize, &'a str), ModelFileError> {
        let line = self.lines.get(self.pos).copied();
        self.pos += 1;
        line.ok_or(ModelFileError::Parse { line: 0, msg: "unexpected end of file".into() })
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, Vec<&'a str>), ModelFileError> {
        let (n, l) = self.next()?;
        let mut parts = l.split_whitespace();
        if parts.next() != Some(key) {
            return Err(ModelFileError::Parse { line: n, msg: format!("expected `{key}`") });
        }
        Ok((n, parts.collect()))
    }

    fn values(&mut self, expect: usize) -> Result<Vec<f64>, ModelFileError> {
        let (n, l) = self.next()?;
        let v: Vec<f64> = l.split_whitespace().map(|s| parse_num(n, s)).collect::<Result<_, _>>()?;
        if v.len() != expect {
            return Err(ModelFileError::Parse { line: n, msg: format!("expected {expect} values, got {}", v.len()) });
        }
        Ok(v)
    }
}

fn parse_num(line: usize, s: &str) -> Result<f64, ModelFileError> {
    s.parse::<f64>().map_err(|e| ModelFileError::Parse { line, msg: format!("bad number `{s}`: {e}") })
}

pub fn model_from_str(text: &str) -> Result<Model, ModelFileError> {
    let lines: Vec<(usize, &str)> =
        text.lines().enumerate().map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty()).collect();
    if lines.first().map(|l| l.1) != Some("DCPDE1") {
        return Err(ModelFileError::Magic);
    }
    let mut cur = LineCursor { lines, pos: 1 };
    let perr = |line: usize, msg: String| ModelFileError::Parse { line, msg };

    let (n, a) = cur.keyed("activation")?;
    let activation = Activation::from_name(a.first().copied().unwrap_or("")).map_err(|e| perr(n, e.to_string()))?;
    let (n, o) = cur.keyed("output")?;
    let output = OutputTransform::from_name(o.first().copied().unwrap_or("")).map_err(|e| perr(n, e.to_string()))?;
    let (n, h) = cur.keyed("hard")?;
    let hard = match h.as_slice() {
        ["none"] => None,
        ["heat", lo, hi] => Some(HardTransform::Heat { u_min: parse_num(n, lo)?, u_max: parse_num(n, hi)? }),
        ["localvol", s0, lo, hi] => Some(HardTransform::LocalVol {
            s0: parse_num(n, s0)?,
            u_min: parse_num(n, lo)?,
            u_max: parse_num(n, hi)?,
        }),
        _ => return Err(perr(n, "unknown hard transform".into())),
    };
    let (n, sz) = cur.keyed("layers")?;
    let sizes: Vec<usize> =
        sz.iter().map(|s| s.parse::<usize>().map_err(|e| perr(n, e.to_string()))).collect::<Result<_, _>>()?;
    if sizes.len() < 2 {
        return Err(perr(n, "need at least two layer sizes".into()));
    }
    let mut layers = Vec::new();
    for (l, w) in sizes.windows(2).enumerate() {
        let (fan_in, fan_out) = (w[0], w[1]);
        let idx = l.to_string();
        let (n, got) = cur.keyed("weight")?;
        if got != [idx.as_str()] {
            return Err(perr(n, format!("expected `weight {l}`")));
        }
        let mut weight = Array2::zeros((fan_out, fan_in));
        for r in 0..fan_out {
            weight.row_mut(r).assign(&ndarray::Array1::from(cur.values(fan_in)?));
        }
        let (n, got) = cur.keyed("bias")?;
        if got != [idx.as_str()] {
            return Err(perr(n, format!("expected `bias {l}`")));
        }
        let bias = ndarray::Array1::from(cur.values(fan_out)?);
        layers.push(Layer { weight, bias });
    }
    if let Ok((n, _)) = cur.next() {
        return Err(perr(n, "trailing content".into()));
    }
    let params = NetworkParams::new(layers, activation, output)?;
    Ok(Model { params, hard })
}
