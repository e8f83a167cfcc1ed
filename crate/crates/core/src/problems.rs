//! Benchmark problems: residual operators, inequality sets, training sets and
//! validation oracles for the 1-D heat equation, the d-dimensional heat
//! equation and local-volatility calibration.

use std::sync::Arc;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffnet::{BundleBatch, DerivBundle, DerivRequest, OutputTransform};
use crate::oracles::{self, DupireReference, LVParams, Observation, OracleError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProblemError {
    #[error("point outside the operator domain: x = {0}")]
    Domain(f64),
    #[error("invalid problem setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Axis-aligned box.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Domain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, ProblemError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(ProblemError::Invalid("domain bounds must have equal, nonzero length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
            return Err(ProblemError::Invalid(format!("invalid domain bounds {lo:?} / {hi:?}")));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(dim: usize) -> Self {
        Self { lo: vec![0.0; dim], hi: vec![1.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.iter().zip(self.lo.iter().zip(&self.hi)).all(|(v, (a, b))| *a <= *v && *v <= *b)
    }
}

/// One entry of a derivative bundle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Value,
    Grad(usize),
    Hess(usize),
}

impl Term {
    #[inline]
    pub fn get(self, b: &BundleBatch, i: usize) -> f64 {
        match self {
            Term::Value => b.value[i],
            Term::Grad(j) => b.grad[[i, j]],
            Term::Hess(j) => b.hess[[i, j]],
        }
    }

    #[inline]
    fn add(self, b: &mut BundleBatch, i: usize, v: f64) {
        match self {
            Term::Value => b.value[i] += v,
            Term::Grad(j) => b.grad[[i, j]] += v,
            Term::Hess(j) => b.hess[[i, j]] += v,
        }
    }
}

/// Pointwise map from a derivative bundle to a scalar. Every operator used
/// here is affine in the bundle entries, with coefficients that may depend on
/// the point.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    /// `u_t - lambda sum_i u_{x_i x_i}`, time is the last input.
    Heat { lambda: f64 },
    /// `u_t - 1/2 sigma(x,t)^2 x^2 u_xx + r x u_x`
    Dupire { params: LVParams },
    /// `sign * term`
    Signed { term: Term, sign: f64 },
    /// `-exp(-r t) - u_x`, the lower slope bound of a call surface.
    SlopeLowerBound { r: f64 },
}

impl Operator {
    /// Calls `f(term, coefficient)` for every nonzero coefficient and returns
    /// the constant part.
    #[inline]
    fn coefficients(&self, p: &[f64], mut f: impl FnMut(Term, f64)) -> f64 {
        let t_idx = p.len() - 1;
        match self {
            Operator::Heat { lambda } => {
                f(Term::Grad(t_idx), 1.0);
                for i in 0..t_idx {
                    f(Term::Hess(i), -lambda);
                }
                0.0
            }
            Operator::Dupire { params } => {
                let (x, t) = (p[0], p[1]);
                let sig = params.sigma_a + params.a / x + params.b * t;
                f(Term::Grad(1), 1.0);
                f(Term::Hess(0), -0.5 * sig * sig * x * x);
                f(Term::Grad(0), params.r * x);
                0.0
            }
            Operator::Signed { term, sign } => {
                f(*term, *sign);
                0.0
            }
            Operator::SlopeLowerBound { r } => {
                f(Term::Grad(0), -1.0);
                -(-r * p[1]).exp()
            }
        }
    }

    /// Second-derivative directions the operator reads.
    pub fn second_dirs(&self, n_in: usize) -> Vec<usize> {
        let mut dirs = Vec::new();
        let probe = vec![1.0; n_in];
        self.coefficients(&probe, |term, _| {
            if let Term::Hess(j) = term {
                dirs.push(j);
            }
        });
        dirs
    }

    fn check_point(&self, p: &[f64]) -> Result<(), ProblemError> {
        if matches!(self, Operator::Dupire { .. }) && p[0] <= 0.0 {
            return Err(ProblemError::Domain(p[0]));
        }
        Ok(())
    }

    pub fn eval(&self, p: &[f64], b: &DerivBundle) -> Result<f64, ProblemError> {
        self.check_point(p)?;
        let mut acc = 0.0;
        let c = self.coefficients(p, |term, coef| {
            acc += coef
                * match term {
                    Term::Value => b.value,
                    Term::Grad(j) => b.grad[j],
                    Term::Hess(j) => b.diag_hess[j],
                }
        });
        Ok(c + acc)
    }

    pub fn eval_batch(&self, points: ArrayView2<f64>, b: &BundleBatch) -> Result<Vec<f64>, ProblemError> {
        let mut out = Vec::with_capacity(points.nrows());
        for (i, row) in points.rows().into_iter().enumerate() {
            let p = row.as_slice().expect("row-major points");
            self.check_point(p)?;
            let mut acc = 0.0;
            let c = self.coefficients(p, |term, coef| acc += coef * term.get(b, i));
            out.push(c + acc);
        }
        Ok(out)
    }

    /// `adj += d(values)/d(bundle)^T d_values`
    pub fn add_adjoint(&self, points: ArrayView2<f64>, d_values: &[f64], adj: &mut BundleBatch) {
        for (i, row) in points.rows().into_iter().enumerate() {
            let dv = d_values[i];
            if dv == 0.0 {
                continue;
            }
            let p = row.as_slice().expect("row-major points");
            self.coefficients(p, |term, coef| term.add(adj, i, coef * dv));
        }
    }
}

/// `u_t - lambda u_xx` for the layout `(x, t)`.
pub fn heat_residual(b: &DerivBundle, lambda: f64) -> f64 {
    b.grad[1] - lambda * b.diag_hess[0]
}

/// `[u_xx, u_t]`
pub fn heat_inequalities(b: &DerivBundle) -> [f64; 2] {
    [b.diag_hess[0], b.grad[1]]
}

/// `u_t - lambda sum_i u_{x_i x_i}` for the layout `(x_1..x_d, t)`.
pub fn heat_nd_residual(b: &DerivBundle, lambda: f64, d: usize) -> Result<f64, ProblemError> {
    if d < 1 || b.grad.len() != d + 1 {
        return Err(ProblemError::Invalid(format!("bundle of length {} does not match d = {d}", b.grad.len())));
    }
    Ok(b.grad[d] - lambda * b.diag_hess[..d].iter().sum::<f64>())
}

/// `sigma_a + a / x + b t`
pub fn lv_sigma(x: f64, t: f64, sigma_a: f64, a: f64, b: f64) -> Result<f64, ProblemError> {
    if x <= 0.0 {
        return Err(ProblemError::Domain(x));
    }
    Ok(sigma_a + a / x + b * t)
}

/// `u_t - 1/2 sigma(x,t)^2 x^2 u_xx + r x u_x`
pub fn dupire_residual(
    point: (f64, f64),
    b: &DerivBundle,
    sigma: impl Fn(f64, f64) -> f64,
    r: f64,
) -> Result<f64, ProblemError> {
    let (x, t) = point;
    if x <= 0.0 {
        return Err(ProblemError::Domain(x));
    }
    let s = sigma(x, t);
    Ok(b.grad[1] - 0.5 * s * s * x * x * b.diag_hess[0] + r * x * b.grad[0])
}

/// `[u_x, -u_xx, -u_t]`
pub fn no_arb_inequalities(b: &DerivBundle) -> [f64; 3] {
    [b.grad[0], -b.diag_hess[0], -b.grad[1]]
}

/// Architectural enforcement of boundary data:
/// `u = g(p) + D(p) (u_min + (u_max - u_min) psi)` where `D` vanishes on the
/// boundary sets and `g` carries the boundary values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HardTransform {
    /// `g = 0`, `D = prod_i x_i (1 - x_i)` over the spatial inputs.
    Heat { u_min: f64, u_max: f64 },
    /// `g = (s0 - x)^+`, `D = x t`.
    LocalVol { s0: f64, u_min: f64, u_max: f64 },
}

struct Factors {
    g: f64,
    g1: Vec<f64>,
    g2: Vec<f64>,
    d: f64,
    d1: Vec<f64>,
    d2: Vec<f64>,
}

impl HardTransform {
    pub fn bounds(&self) -> (f64, f64) {
        match *self {
            HardTransform::Heat { u_min, u_max } | HardTransform::LocalVol { u_min, u_max, .. } => (u_min, u_max),
        }
    }

    fn factors(&self, p: &[f64]) -> Factors {
        let n = p.len();
        match *self {
            HardTransform::Heat { .. } => {
                let d_sp = n - 1;
                let q: Vec<f64> = p[..d_sp].iter().map(|x| x * (1.0 - x)).collect();
                let prod_except = |i: usize| -> f64 { q.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, v)| v).product() };
                let mut d1 = vec![0.0; n];
                let mut d2 = vec![0.0; n];
                for i in 0..d_sp {
                    let rest = prod_except(i);
                    d1[i] = (1.0 - 2.0 * p[i]) * rest;
                    d2[i] = -2.0 * rest;
                }
                Factors { g: 0.0, g1: vec![0.0; n], g2: vec![0.0; n], d: q.iter().product(), d1, d2 }
            }
            HardTransform::LocalVol { s0, .. } => {
                let (x, t) = (p[0], p[1]);
                let g = (s0 - x).max(0.0);
                let gx = if x < s0 { -1.0 } else { 0.0 };
                Factors { g, g1: vec![gx, 0.0], g2: vec![0.0; 2], d: x * t, d1: vec![t, x], d2: vec![0.0; 2] }
            }
        }
    }

    /// Bundle of `u` from the bundle of the raw network output `psi`.
    pub fn apply(&self, points: ArrayView2<f64>, request: &DerivRequest, psi: &BundleBatch) -> BundleBatch {
        let (lo, hi) = self.bounds();
        let c = hi - lo;
        let n_in = points.ncols();
        let first = request.first || !request.second.is_empty();
        let mut u = BundleBatch::zeros(points.nrows(), n_in);
        for (i, row) in points.rows().into_iter().enumerate() {
            let f = self.factors(row.as_slice().expect("row-major points"));
            let phi = lo + c * psi.value[i];
            u.value[i] = f.g + f.d * phi;
            if first {
                for j in 0..n_in {
                    u.grad[[i, j]] = f.g1[j] + f.d1[j] * phi + f.d * c * psi.grad[[i, j]];
                }
            }
            for &j in &request.second {
                u.hess[[i, j]] = f.g2[j] + f.d2[j] * phi + 2.0 * f.d1[j] * c * psi.grad[[i, j]] + f.d * c * psi.hess[[i, j]];
            }
        }
        u
    }

    /// Adjoint of [`apply`](Self::apply): maps `dL/du` to `dL/dpsi`.
    pub fn adjoint(&self, points: ArrayView2<f64>, request: &DerivRequest, u_bar: &BundleBatch) -> BundleBatch {
        let (lo, hi) = self.bounds();
        let c = hi - lo;
        let n_in = points.ncols();
        let first = request.first || !request.second.is_empty();
        let mut psi_bar = BundleBatch::zeros(points.nrows(), n_in);
        for (i, row) in points.rows().into_iter().enumerate() {
            let f = self.factors(row.as_slice().expect("row-major points"));
            let mut phi_bar = u_bar.value[i] * f.d;
            if first {
                for j in 0..n_in {
                    let ub = u_bar.grad[[i, j]];
                    phi_bar += ub * f.d1[j];
                    psi_bar.grad[[i, j]] += ub * f.d * c;
                }
            }
            for &j in &request.second {
                let ub = u_bar.hess[[i, j]];
                phi_bar += ub * f.d2[j];
                psi_bar.grad[[i, j]] += ub * 2.0 * f.d1[j] * c;
                psi_bar.hess[[i, j]] += ub * f.d * c;
            }
            psi_bar.value[i] = phi_bar * c;
        }
        psi_bar
    }
}

/// Points with scalar targets.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub points: Array2<f64>,
    pub targets: Vec<f64>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn concat(sets: &[LabeledSet]) -> LabeledSet {
        let dim = sets[0].points.ncols();
        let n: usize = sets.iter().map(|s| s.len()).sum();
        let mut points = Array2::zeros((n, dim));
        let mut targets = Vec::with_capacity(n);
        let mut k = 0;
        for s in sets {
            for row in s.points.rows() {
                points.row_mut(k).assign(&row);
                k += 1;
            }
            targets.extend_from_slice(&s.targets);
        }
        LabeledSet { points, targets }
    }
}

/// Exact solution used for validation and derivative profiles.
#[derive(Debug, Clone)]
pub enum Oracle {
    Heat { lambda: f64 },
    LocalVol(Arc<DupireReference>),
}

impl Oracle {
    /// Value, full gradient and full diagonal Hessian at every point.
    pub fn bundles(&self, points: ArrayView2<f64>) -> BundleBatch {
        let n_in = points.ncols();
        let mut b = BundleBatch::zeros(points.nrows(), n_in);
        for (i, row) in points.rows().into_iter().enumerate() {
            let p = row.as_slice().expect("row-major points");
            match self {
                Oracle::Heat { lambda } => {
                    let (x, t) = (&p[..n_in - 1], p[n_in - 1]);
                    b.value[i] = oracles::heat_analytic(x, t, *lambda);
                    for j in 0..n_in - 1 {
                        b.grad[[i, j]] = oracles::heat_analytic_dx(x, t, *lambda, j);
                        b.hess[[i, j]] = oracles::heat_analytic_dxx(x, t, *lambda);
                    }
                    b.grad[[i, n_in - 1]] = oracles::heat_analytic_dt(x, t, *lambda);
                    b.hess[[i, n_in - 1]] =
                        -lambda * std::f64::consts::PI.powi(2) * (n_in - 1) as f64 * b.grad[[i, n_in - 1]];
                }
                Oracle::LocalVol(reference) => {
                    let [c, ck, ckk, ct] = reference.eval(p[0], p[1]);
                    b.value[i] = c;
                    b.grad[[i, 0]] = ck;
                    b.hess[[i, 0]] = ckk;
                    b.grad[[i, 1]] = ct;
                }
            }
        }
        b
    }
}

/// A derivative compared against the oracle during validation.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivMetric {
    pub name: String,
    pub term: Term,
}

#[derive(Debug, Clone)]
pub struct Validation {
    pub points: Array2<f64>,
    pub oracle: BundleBatch,
    /// Initial-condition or observation set with exact targets.
    pub initial: LabeledSet,
    pub boundary: LabeledSet,
    pub derivs: Vec<DerivMetric>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Heat1d,
    HeatNd { d: usize },
    LocalVol,
}

/// A fully materialised benchmark instance.
#[derive(Debug, Clone)]
pub struct Problem {
    pub kind: ProblemKind,
    pub domain: Domain,
    pub layer_sizes: Vec<usize>,
    pub output_transform: OutputTransform,
    pub residual: Operator,
    pub inequalities: Vec<Operator>,
    pub ineq_names: Vec<String>,
    /// Category 0.
    pub data: LabeledSet,
    /// Category b.
    pub boundary: LabeledSet,
    /// Residual collocation points.
    pub interior: Array2<f64>,
    /// Inequality points when they differ from `interior`.
    pub ineq_points: Option<Array2<f64>>,
    pub hard: HardTransform,
    pub oracle: Oracle,
    pub validation: Validation,
}

impl Problem {
    pub fn input_dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn ineq_points(&self) -> &Array2<f64> {
        self.ineq_points.as_ref().unwrap_or(&self.interior)
    }

    /// Second-derivative directions needed by the residual and inequalities.
    pub fn second_dirs(&self) -> Vec<usize> {
        let n = self.input_dim();
        let mut dirs: Vec<usize> = self.residual.second_dirs(n);
        for op in &self.inequalities {
            dirs.extend(op.second_dirs(n));
        }
        dirs.sort_unstable();
        dirs.dedup();
        dirs
    }
}

/// Tensor-product grid including endpoints, row-major (last axis fastest).
pub fn uniform_grid(domain: &Domain, counts: &[usize]) -> Result<Array2<f64>, ProblemError> {
    if counts.len() != domain.dim() || counts.iter().any(|&c| c < 2) {
        return Err(ProblemError::Invalid(format!("grid counts {counts:?} must be >= 2 per axis")));
    }
    let n: usize = counts.iter().product();
    let dim = counts.len();
    let mut pts = Array2::zeros((n, dim));
    for idx in 0..n {
        let mut rem = idx;
        for ax in (0..dim).rev() {
            let k = rem % counts[ax];
            rem /= counts[ax];
            let frac = k as f64 / (counts[ax] - 1) as f64;
            pts[[idx, ax]] = if k == counts[ax] - 1 {
                domain.hi[ax]
            } else {
                domain.lo[ax] + frac * (domain.hi[ax] - domain.lo[ax])
            };
        }
    }
    Ok(pts)
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { b } else { a + (b - a) * i as f64 / (n - 1) as f64 }).collect()
}

fn line(n: usize, f: impl Fn(f64) -> (f64, f64, f64)) -> LabeledSet {
    let mut points = Array2::zeros((n, 2));
    let mut targets = Vec::with_capacity(n);
    for (i, s) in linspace(0.0, 1.0, n).into_iter().enumerate() {
        let (x, t, v) = f(s);
        points[[i, 0]] = x;
        points[[i, 1]] = t;
        targets.push(v);
    }
    LabeledSet { points, targets }
}

fn uniform_points(domain: &Domain, n: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let dim = domain.dim();
    Array2::from_shape_fn((n, dim), |(_, j)| rng.random_range(domain.lo[j]..domain.hi[j]))
}

fn select_rows(points: &Array2<f64>, keep: impl Fn(&[f64]) -> bool) -> Array2<f64> {
    let rows: Vec<usize> = points
        .rows()
        .into_iter()
        .enumerate()
        .filter(|(_, r)| keep(r.as_slice().unwrap()))
        .map(|(i, _)| i)
        .collect();
    points.select(ndarray::Axis(0), &rows)
}

fn labeled_from_oracle(points: Array2<f64>, oracle: &Oracle) -> LabeledSet {
    let targets = oracle.bundles(points.view()).value.to_vec();
    LabeledSet { points, targets }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatConfig {
    pub lambda: f64,
    pub n_interior: usize,
    pub n_line: usize,
    pub n_validation: usize,
}

impl Default for HeatConfig {
    fn default() -> Self {
        Self { lambda: 0.1, n_interior: 31, n_line: 1001, n_validation: 101 }
    }
}

pub const HEAT_LAYERS: [usize; 2] = [100, 100];
pub const LV_LAYERS: [usize; 4] = [50, 50, 50, 50];

/// `u_t = lambda u_xx` on `[0,1]^2`, `u(x,0) = sin(pi x)`, zero at `x = 0, 1`,
/// with `u_xx <= 0` and `u_t <= 0`.
pub fn heat_1d(cfg: &HeatConfig) -> Result<Problem, ProblemError> {
    if !(cfg.lambda > 0.0) {
        return Err(ProblemError::Invalid("diffusivity must be positive".into()));
    }
    let domain = Domain::unit(2);
    let oracle = Oracle::Heat { lambda: cfg.lambda };
    let pi = std::f64::consts::PI;
    let data = line(cfg.n_line, |s| (s, 0.0, (pi * s).sin()));
    let boundary = LabeledSet::concat(&[line(cfg.n_line, |s| (0.0, s, 0.0)), line(cfg.n_line, |s| (1.0, s, 0.0))]);
    let interior = uniform_grid(&domain, &[cfg.n_interior, cfg.n_interior])?;

    let vpts = uniform_grid(&domain, &[cfg.n_validation, cfg.n_validation])?;
    let initial = labeled_from_oracle(select_rows(&vpts, |p| p[1] == 0.0), &oracle);
    let vboundary = labeled_from_oracle(select_rows(&vpts, |p| p[0] == 0.0 || p[0] == 1.0), &oracle);
    let validation = Validation {
        oracle: oracle.bundles(vpts.view()),
        points: vpts,
        initial,
        boundary: vboundary,
        derivs: vec![
            DerivMetric { name: "h_xx".into(), term: Term::Hess(0) },
            DerivMetric { name: "h_t".into(), term: Term::Grad(1) },
        ],
    };
    Ok(Problem {
        kind: ProblemKind::Heat1d,
        layer_sizes: [&[2][..], &HEAT_LAYERS, &[1]].concat(),
        output_transform: OutputTransform::Abs,
        residual: Operator::Heat { lambda: cfg.lambda },
        inequalities: vec![
            Operator::Signed { term: Term::Hess(0), sign: 1.0 },
            Operator::Signed { term: Term::Grad(1), sign: 1.0 },
        ],
        ineq_names: vec!["h_xx".into(), "h_t".into()],
        data,
        boundary,
        interior,
        ineq_points: None,
        hard: HardTransform::Heat { u_min: 0.0, u_max: 1.0 },
        oracle,
        validation,
        domain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeatNdConfig {
    pub d: usize,
    pub lambda: f64,
    pub n_collocation: usize,
    pub n_initial: usize,
    pub n_boundary: usize,
    pub n_validation: usize,
    pub seed: u64,
}

impl Default for HeatNdConfig {
    fn default() -> Self {
        Self { d: 2, lambda: 0.1, n_collocation: 100, n_initial: 100, n_boundary: 100, n_validation: 1000, seed: 0 }
    }
}

/// `u_t = lambda sum u_{x_i x_i}` on `[0,1]^(d+1)` with product-sine initial
/// data, zero on the spatial faces, and `u_{x_i x_i} <= 0`, `u_t <= 0`.
pub fn heat_nd(cfg: &HeatNdConfig) -> Result<Problem, ProblemError> {
    let d = cfg.d;
    if d < 1 {
        return Err(ProblemError::Invalid("dimension must be at least 1".into()));
    }
    if !(cfg.lambda > 0.0) || cfg.n_collocation == 0 || cfg.n_initial == 0 || cfg.n_boundary == 0 {
        return Err(ProblemError::Invalid("heat-nd sizes and diffusivity must be positive".into()));
    }
    let n_in = d + 1;
    let domain = Domain::unit(n_in);
    let oracle = Oracle::Heat { lambda: cfg.lambda };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let initial_pts = |n: usize, rng: &mut ChaCha8Rng| {
        let mut p = uniform_points(&domain, n, rng);
        p.column_mut(d).fill(0.0);
        p
    };
    let face_pts = |n: usize, rng: &mut ChaCha8Rng| {
        let mut p = uniform_points(&domain, n, rng);
        for mut row in p.rows_mut() {
            let axis = rng.random_range(0..d);
            row[axis] = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
        }
        p
    };
    let data = labeled_from_oracle(initial_pts(cfg.n_initial, &mut rng), &oracle);
    let boundary = labeled_from_oracle(face_pts(cfg.n_boundary, &mut rng), &oracle);
    let interior = uniform_points(&domain, cfg.n_collocation, &mut rng);
    let vpts = uniform_points(&domain, cfg.n_validation, &mut rng);
    let vinit = labeled_from_oracle(initial_pts(cfg.n_validation / 5 + 1, &mut rng), &oracle);
    let vbound = labeled_from_oracle(face_pts(cfg.n_validation / 5 + 1, &mut rng), &oracle);

    let mut inequalities: Vec<Operator> = (0..d).map(|i| Operator::Signed { term: Term::Hess(i), sign: 1.0 }).collect();
    inequalities.push(Operator::Signed { term: Term::Grad(d), sign: 1.0 });
    let mut ineq_names: Vec<String> =
        if d == 1 { vec!["h_xx".into()] } else { (1..=d).map(|i| format!("h_x{i}x{i}")).collect() };
    ineq_names.push("h_t".into());
    let derivs = inequalities
        .iter()
        .zip(&ineq_names)
        .map(|(op, name)| match op {
            Operator::Signed { term, .. } => DerivMetric { name: name.clone(), term: *term },
            _ => unreachable!(),
        })
        .collect();
    Ok(Problem {
        kind: ProblemKind::HeatNd { d },
        layer_sizes: [&[n_in][..], &HEAT_LAYERS, &[1]].concat(),
        output_transform: OutputTransform::Abs,
        residual: Operator::Heat { lambda: cfg.lambda },
        inequalities,
        ineq_names,
        data,
        boundary,
        interior,
        ineq_points: None,
        hard: HardTransform::Heat { u_min: 0.0, u_max: 1.0 },
        validation: Validation {
            oracle: oracle.bundles(vpts.view()),
            points: vpts,
            initial: vinit,
            boundary: vbound,
            derivs,
        },
        oracle,
        domain,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalVolConfig {
    pub params: LVParams,
    pub n_interior: usize,
    pub n_line: usize,
    pub n_h: usize,
    pub n_validation: usize,
    pub t_min: f64,
    /// Adds the slope lower bound `-exp(-r t) <= u_x` as a fourth inequality.
    pub slope_lower_bound: bool,
    pub seed: u64,
}

impl Default for LocalVolConfig {
    fn default() -> Self {
        Self {
            params: LVParams::default(),
            n_interior: 51,
            n_line: 1001,
            n_h: 5000,
            n_validation: 100,
            t_min: 0.01,
            slope_lower_bound: false,
            seed: 0,
        }
    }
}

/// Call-price surface `C(K, T)` on `[0.1 s0, 2 s0] x [t_min, 1]`, fitted to
/// noisy observations under the Dupire equation with no-arbitrage signs.
pub fn local_vol(cfg: &LocalVolConfig, observations: &[Observation]) -> Result<Problem, ProblemError> {
    let p = cfg.params;
    if observations.is_empty() {
        return Err(ProblemError::Invalid("no observations".into()));
    }
    if !(p.s0 > 0.0) {
        return Err(ProblemError::Invalid("s0 must be positive".into()));
    }
    let domain = Domain::new(vec![0.1 * p.s0, cfg.t_min], vec![2.0 * p.s0, 1.0])?;
    let reference = Arc::new(DupireReference::default_for(&p)?);
    let oracle = Oracle::LocalVol(reference);

    let n_obs = observations.len();
    let mut obs_pts = Array2::zeros((n_obs, 2));
    for (i, o) in observations.iter().enumerate() {
        obs_pts[[i, 0]] = o.x;
        obs_pts[[i, 1]] = o.t;
    }
    let data = LabeledSet { points: obs_pts.clone(), targets: observations.iter().map(|o| o.price_noisy).collect() };
    let (s0, x_hi) = (p.s0, 2.0 * p.s0);
    let payoff_line = |n| line(n, |s| (s * x_hi, 0.0, (s0 - s * x_hi).max(0.0)));
    let spot_line = |n| line(n, |s| (0.0, s, s0));
    let boundary = LabeledSet::concat(&[payoff_line(cfg.n_line), spot_line(cfg.n_line)]);
    let interior = uniform_grid(&domain, &[cfg.n_interior, cfg.n_interior])?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ineq_points = uniform_points(&domain, cfg.n_h, &mut rng);

    let vpts = uniform_grid(&domain, &[cfg.n_validation, cfg.n_validation])?;
    let validation = Validation {
        oracle: oracle.bundles(vpts.view()),
        points: vpts,
        initial: LabeledSet { points: obs_pts, targets: observations.iter().map(|o| o.price_clean).collect() },
        boundary: LabeledSet::concat(&[payoff_line(101), spot_line(101)]),
        derivs: vec![
            DerivMetric { name: "h_x".into(), term: Term::Grad(0) },
            DerivMetric { name: "h_xx".into(), term: Term::Hess(0) },
            DerivMetric { name: "h_t".into(), term: Term::Grad(1) },
        ],
    };
    let mut inequalities = vec![
        Operator::Signed { term: Term::Grad(0), sign: 1.0 },
        Operator::Signed { term: Term::Hess(0), sign: -1.0 },
        Operator::Signed { term: Term::Grad(1), sign: -1.0 },
    ];
    let mut ineq_names: Vec<String> = vec!["h_x".into(), "h_xx".into(), "h_t".into()];
    if cfg.slope_lower_bound {
        inequalities.push(Operator::SlopeLowerBound { r: p.r });
        ineq_names.push("h_xlo".into());
    }
    Ok(Problem {
        kind: ProblemKind::LocalVol,
        layer_sizes: [&[2][..], &LV_LAYERS, &[1]].concat(),
        output_transform: OutputTransform::Softplus,
        residual: Operator::Dupire { params: p },
        inequalities,
        ineq_names,
        data,
        boundary,
        interior,
        ineq_points: Some(ineq_points),
        hard: HardTransform::LocalVol { s0: p.s0, u_min: 0.0, u_max: 1.0 },
        oracle,
        validation,
        domain,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{eval_bundle, init_glorot};

    fn bundle(value: f64, grad: &[f64], hess: &[f64]) -> DerivBundle {
        DerivBundle { value, grad: grad.to_vec(), diag_hess: hess.to_vec() }
    }

    fn analytic_bundle(x: &[f64], t: f64, lambda: f64) -> DerivBundle {
        let mut p = x.to_vec();
        p.push(t);
        let pts = Array2::from_shape_vec((1, p.len()), p).unwrap();
        Oracle::Heat { lambda }.bundles(pts.view()).point(0)
    }

    #[test]
    fn heat_residual_examples() {
        assert_eq!(heat_residual(&bundle(0.0, &[0.0, 0.0], &[0.0, 0.0]), 0.1), 0.0);
        assert_eq!(heat_residual(&bundle(0.0, &[0.0, 1.0], &[0.0, 0.0]), 0.1), 1.0);
        assert!(heat_residual(&analytic_bundle(&[0.3], 0.5, 0.1), 0.1).abs() < 1e-10);
    }

    #[test]
    fn heat_inequality_examples() {
        assert_eq!(heat_inequalities(&bundle(0.0, &[0.0, -0.5], &[-1.0, 0.0])), [-1.0, -0.5]);
        assert_eq!(heat_inequalities(&bundle(0.0, &[0.0, 0.0], &[0.2, 0.0]))[0], 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let b = analytic_bundle(&[rng.random_range(0.0..1.0)], rng.random_range(0.0..1.0), 0.1);
            assert!(heat_inequalities(&b).iter().all(|&h| h <= 0.0));
        }
    }

    #[test]
    fn heat_nd_examples() {
        let b = analytic_bundle(&[0.4], 0.2, 0.1);
        assert_eq!(heat_nd_residual(&b, 0.1, 1).unwrap(), heat_residual(&b, 0.1));
        assert_eq!(heat_nd_residual(&bundle(0.0, &[0.0, 0.0, 2.0], &[0.0; 3]), 0.1, 2).unwrap(), 2.0);
        let b = analytic_bundle(&[0.25, 0.75], 0.1, 0.1);
        assert!(heat_nd_residual(&b, 0.1, 2).unwrap().abs() < 1e-10);
        assert!(heat_nd_residual(&b, 0.1, 0).is_err());
    }

    #[test]
    fn lv_sigma_examples() {
        assert!((lv_sigma(1.0, 0.0, 0.2, 0.1, 0.2).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(lv_sigma(0.37, 0.8, 0.2, 0.0, 0.0).unwrap(), 0.2);
        assert!((lv_sigma(0.5, 1.0, 0.2, 0.1, 0.2).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(lv_sigma(0.0, 1.0, 0.2, 0.1, 0.2), Err(ProblemError::Domain(0.0)));
    }

    #[test]
    fn dupire_examples() {
        let sig = |x: f64, t: f64| lv_sigma(x, t, 0.2, 0.1, 0.2).unwrap();
        assert_eq!(dupire_residual((1.0, 0.5), &bundle(0.3, &[0.0, 0.0], &[0.0, 0.0]), sig, 0.05).unwrap(), 0.0);
        assert_eq!(dupire_residual((1.0, 0.5), &bundle(0.3, &[0.0, 1.0], &[0.0, 0.0]), sig, 0.05).unwrap(), 1.0);
        let v = dupire_residual((1.0, 0.5), &bundle(0.0, &[0.0, 0.0], &[2.0, 0.0]), |_, _| 0.3, 0.0).unwrap();
        assert!((v + 0.09).abs() < 1e-15);
        assert!(dupire_residual((0.0, 0.5), &bundle(0.0, &[0.0; 2], &[0.0; 2]), sig, 0.05).is_err());
        // Operator form agrees with the scalar form.
        let op = Operator::Dupire { params: LVParams::default() };
        let b = bundle(0.1, &[-0.4, 0.2], &[1.3, 0.0]);
        let a = op.eval(&[0.8, 0.3], &b).unwrap();
        assert!((a - dupire_residual((0.8, 0.3), &b, sig, 0.05).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn no_arb_examples() {
        assert_eq!(no_arb_inequalities(&bundle(0.0, &[-0.5, 0.1], &[0.2, 0.0])), [-0.5, -0.2, -0.1]);
        assert_eq!(no_arb_inequalities(&bundle(0.0, &[-0.5, 0.1], &[-0.1, 0.0]))[1], 0.1);
        let g = oracles::bs_call_strike_greeks(1.0, 1.0, 0.5, 0.05, 0.2);
        let b = bundle(0.0, &[g[0], g[2]], &[g[1], 0.0]);
        assert!(no_arb_inequalities(&b).iter().all(|&h| h <= 0.0));
    }

    #[test]
    fn grid_examples() {
        let g = uniform_grid(&Domain::unit(2), &[31, 31]).unwrap();
        assert_eq!(g.nrows(), 961);
        assert_eq!(g.row(0).to_vec(), vec![0.0, 0.0]);
        assert_eq!(g.row(960).to_vec(), vec![1.0, 1.0]);
        let c = uniform_grid(&Domain::unit(2), &[2, 2]).unwrap();
        assert_eq!(c.rows().into_iter().map(|r| r.to_vec()).collect::<Vec<_>>(), vec![
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
            vec![1.0, 1.0]
        ]);
        let d = Domain::new(vec![0.1, 0.01], vec![2.0, 1.0]).unwrap();
        let g = uniform_grid(&d, &[17, 9]).unwrap();
        assert!(g.rows().into_iter().all(|r| d.contains(r.as_slice().unwrap())));
        assert!(uniform_grid(&d, &[1, 9]).is_err());
    }

    #[test]
    fn operator_adjoint_matches_eval() {
        let pts = ndarray::array![[0.4, 0.3], [1.2, 0.9]];
        let mut b = BundleBatch::zeros(2, 2);
        b.value[0] = 0.2;
        b.grad[[0, 0]] = -0.3;
        b.grad[[1, 1]] = 0.5;
        b.hess[[1, 0]] = 0.7;
        let ops = [
            Operator::Heat { lambda: 0.1 },
            Operator::Dupire { params: LVParams::default() },
            Operator::Signed { term: Term::Hess(0), sign: -1.0 },
            Operator::SlopeLowerBound { r: 0.05 },
        ];
        for op in ops {
            let v = op.eval_batch(pts.view(), &b).unwrap();
            let zero = op.eval_batch(pts.view(), &BundleBatch::zeros(2, 2)).unwrap();
            let mut adj = BundleBatch::zeros(2, 2);
            op.add_adjoint(pts.view(), &[1.0, 1.0], &mut adj);
            // Affine: value = constant + <adjoint, bundle>.
            for i in 0..2 {
                let lin = adj.value[i] * b.value[i]
                    + (0..2).map(|j| adj.grad[[i, j]] * b.grad[[i, j]] + adj.hess[[i, j]] * b.hess[[i, j]]).sum::<f64>();
                assert!((v[i] - zero[i] - lin).abs() < 1e-14);
            }
        }
    }

    /// The transformed bundle equals the bundle of the transformed network
    /// evaluated by finite differences, and the adjoint is its transpose.
    #[test]
    fn hard_transform_chain_rule() {
        let net = init_glorot(&[2, 8, 1], 3, OutputTransform::Softplus).unwrap();
        let transforms =
            [HardTransform::Heat { u_min: 0.0, u_max: 1.0 }, HardTransform::LocalVol { s0: 1.0, u_min: 0.0, u_max: 2.0 }];
        let pts = ndarray::array![[0.3, 0.4], [0.7, 0.2], [1.4, 0.6]];
        let req = DerivRequest::full(2);
        for tr in transforms {
            let psi = crate::diffnet::eval_bundles(&net, pts.view(), &req).unwrap();
            let u = tr.apply(pts.view(), &req, &psi);
            let f = |p: [f64; 2]| {
                let one = ndarray::arr2(&[p]);
                let b = eval_bundle(&net, &p, &DerivRequest::value_only()).unwrap();
                let mut bb = BundleBatch::zeros(1, 2);
                bb.value[0] = b.value;
                tr.apply(one.view(), &DerivRequest::value_only(), &bb).value[0]
            };
            let h = 1e-4;
            for i in 0..3 {
                let p = [pts[[i, 0]], pts[[i, 1]]];
                for j in 0..2 {
                    let mut pp = p;
                    let mut pm = p;
                    pp[j] += h;
                    pm[j] -= h;
                    let (fp, f0, fm) = (f(pp), f(p), f(pm));
                    assert!(((fp - fm) / (2.0 * h) - u.grad[[i, j]]).abs() < 1e-7);
                    assert!(((fp - 2.0 * f0 + fm) / (h * h) - u.hess[[i, j]]).abs() < 1e-4);
                }
            }
            // <u_bar, J psi_dot> == <J^T u_bar, psi_dot>
            let mut u_bar = BundleBatch::zeros(3, 2);
            let mut psi_dot = BundleBatch::zeros(3, 2);
            for i in 0..3 {
                u_bar.value[i] = 0.3 + i as f64;
                psi_dot.value[i] = 1.0 - 0.2 * i as f64;
                for j in 0..2 {
                    u_bar.grad[[i, j]] = 0.1 * (i + j) as f64 - 0.2;
                    u_bar.hess[[i, j]] = 0.05 * (i * j) as f64 + 0.1;
                    psi_dot.grad[[i, j]] = 0.7 - 0.3 * j as f64;
                    psi_dot.hess[[i, j]] = -0.4 + 0.1 * i as f64;
                }
            }
            let zero = BundleBatch::zeros(3, 2);
            let u0 = tr.apply(pts.view(), &req, &zero);
            let u1 = tr.apply(pts.view(), &req, &psi_dot);
            let dot = |a: &BundleBatch, b: &BundleBatch| {
                (&a.value * &b.value).sum() + (&a.grad * &b.grad).sum() + (&a.hess * &b.hess).sum()
            };
            let mut ju = u1.clone();
            ju.value -= &u0.value;
            ju.grad -= &u0.grad;
            ju.hess -= &u0.hess;
            let jt = tr.adjoint(pts.view(), &req, &u_bar);
            assert!((dot(&u_bar, &ju) - dot(&jt, &psi_dot)).abs() < 1e-12);
        }
    }

    #[test]
    fn hard_transform_hits_boundary_data() {
        let tr = HardTransform::LocalVol { s0: 1.0, u_min: 0.0, u_max: 1.0 };
        let pts = ndarray::array![[0.0, 0.4], [0.6, 0.0], [1.5, 0.0]];
        let mut psi = BundleBatch::zeros(3, 2);
        psi.value.fill(3.7);
        let u = tr.apply(pts.view(), &DerivRequest::value_only(), &psi);
        assert_eq!(u.value.to_vec(), vec![1.0, 0.4, 0.0]);
        let tr = HardTransform::Heat { u_min: 0.0, u_max: 1.0 };
        let pts = ndarray::array![[0.0, 0.4], [1.0, 0.9]];
        let u = tr.apply(pts.view(), &DerivRequest::value_only(), &psi);
        assert_eq!(u.value.to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn heat_problem_shapes() {
        let p = heat_1d(&HeatConfig::default()).unwrap();
        assert_eq!(p.interior.nrows(), 961);
        assert_eq!(p.data.len(), 1001);
        assert_eq!(p.boundary.len(), 2002);
        assert_eq!(p.validation.points.nrows(), 101 * 101);
        assert_eq!(p.validation.initial.len(), 101);
        assert_eq!(p.validation.boundary.len(), 202);
        assert_eq!(p.second_dirs(), vec![0]);
        assert_eq!(p.layer_sizes, vec![2, 100, 100, 1]);
        let p8 = heat_nd(&HeatNdConfig { d: 8, ..Default::default() }).unwrap();
        assert_eq!(p8.inequalities.len(), 9);
        assert_eq!(p8.second_dirs(), (0..8).collect::<Vec<_>>());
        assert_eq!(p8.interior.nrows(), 100);
    }
}
