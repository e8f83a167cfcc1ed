//! Acceptance suite. Each test prints one `PASS`/`FAIL` line to stderr (so it
//! shows up without `--nocapture`) and then asserts.
//!
//! The heat and local-volatility benchmarks train full-size models; the whole
//! suite takes a few hours on one CPU core.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use dcpde::cli::{best_cells, cmd_sweep, execute_run, ExperimentConfig, RunOutcome};
use dcpde::diffnet::{eval_bundle, eval_bundles, init_glorot, loss_param_grad, BundleBatch, DerivBundle, DerivRequest, OutputTransform};
use dcpde::losses::{hinge_adjoint, weighted_mse_adjoint, HingeKind};
use dcpde::metrics::{self, Direction, Trajectory};
use dcpde::oracles::{bs_call, heat_analytic, heat_analytic_dt, heat_analytic_dx, heat_analytic_dxx, mc_lv_price, LVParams, MCConfig};
use dcpde::problems::{heat_nd_residual, Operator, Term};
use dcpde::trainer::{Method, Metrics};
use ndarray::{Array2, ArrayView2};
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: usize, name: &str, pass: bool, detail: &str) {
    let status = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr();
    let _ = writeln!(err, "acceptance {id} [{status}] {name}: {detail}");
}

fn config(name: &str) -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dcpde-acceptance-{}", std::process::id())).join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Final metrics of `method` over `seeds`, or the list of failed runs.
type RunTable = BTreeMap<(Method, u64), Result<(Metrics, f64), String>>;

fn run_all(cfg: &ExperimentConfig, methods: &[Method], seeds: &[u64], tag: &str) -> RunTable {
    let root = scratch(tag);
    let mut out = BTreeMap::new();
    for &m in methods {
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            if let Some(ds) = &c.local_vol.dataset {
                let name = ds.file_name().unwrap().to_string_lossy().replace("seed0", &format!("seed{seed}"));
                c.local_vol.dataset = Some(root.join(name));
            }
            let dir = root.join(m.name()).join(format!("seed{seed}"));
            let res = match execute_run(&c, m, &dir) {
                Ok(RunOutcome::Finished(r)) => Ok((r.final_metrics, r.wall_time)),
                Ok(RunOutcome::Diverged(_, msg)) => Err(format!("{m} seed {seed}: {msg}")),
                Err(e) => Err(format!("{m} seed {seed}: {e}")),
            };
            out.insert((m, seed), res);
        }
    }
    out
}

fn collect(table: &RunTable, method: Method, metric: &str) -> Result<Vec<f64>, String> {
    table
        .iter()
        .filter(|((m, _), _)| *m == method)
        .map(|(_, r)| match r {
            Ok((metrics, _)) => metrics.get(metric).ok_or_else(|| format!("missing metric {metric}")),
            Err(e) => Err(e.clone()),
        })
        .collect()
}

const HEAT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Heat runs shared by the accuracy and ablation criteria.
fn heat_runs() -> &'static RunTable {
    static RUNS: OnceLock<RunTable> = OnceLock::new();
    RUNS.get_or_init(|| {
        let methods = [Method::Pinn, Method::PinnIneq, Method::DcpinnNoM, Method::Dcpinn];
        run_all(&config("heat.toml"), &methods, &HEAT_SEEDS, "heat")
    })
}

// Gradient correctness on a small network.

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// The four categorised losses of the heat problem on fixed point sets.
struct GradCase {
    data: Array2<f64>,
    targets: Vec<f64>,
    boundary: Array2<f64>,
    interior: Array2<f64>,
    m: Vec<f64>,
}

impl GradCase {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 6;
        let mut pts = |f: &mut dyn FnMut(&mut ChaCha8Rng) -> [f64; 2]| {
            Array2::from_shape_vec((n, 2), (0..n).flat_map(|_| f(&mut rng)).collect()).unwrap()
        };
        let data = pts(&mut |r| [r.random::<f64>(), 0.0]);
        let boundary = pts(&mut |r| [if r.random::<bool>() { 0.0 } else { 1.0 }, r.random::<f64>()]);
        let interior = pts(&mut |r| [r.random::<f64>(), r.random::<f64>()]);
        let targets = data.column(0).iter().map(|&x| (std::f64::consts::PI * x).sin()).collect();
        let m = (0..n).map(|i| 0.5 + 0.25 * i as f64).collect();
        GradCase { data, targets, boundary, interior, m }
    }

    /// Loss and bundle adjoint of category `k` (0: data, 1: residual,
    /// 2: boundary, 3: both inequalities).
    fn loss(&self, k: usize, b: &BundleBatch) -> (f64, BundleBatch) {
        let n = b.len();
        let mut adj = BundleBatch::zeros(n, 2);
        match k {
            0 | 2 => {
                let r: Vec<f64> = if k == 0 {
                    (0..n).map(|i| b.value[i] - self.targets[i]).collect()
                } else {
                    (0..n).map(|i| b.value[i]).collect()
                };
                let a = weighted_mse_adjoint(&r, &self.m).unwrap();
                for i in 0..n {
                    adj.value[i] = a.d_values[i];
                }
                (a.loss, adj)
            }
            1 => {
                let op = Operator::Heat { lambda: 0.1 };
                let r = op.eval_batch(self.interior.view(), b).unwrap();
                let a = weighted_mse_adjoint(&r, &self.m).unwrap();
                op.add_adjoint(self.interior.view(), &a.d_values, &mut adj);
                (a.loss, adj)
            }
            _ => {
                let mut total = 0.0;
                for term in [Term::Hess(0), Term::Grad(1)] {
                    let op = Operator::Signed { term, sign: 1.0 };
                    let h = op.eval_batch(self.interior.view(), b).unwrap();
                    let a = hinge_adjoint(&h, &self.m, HingeKind::Relu).unwrap();
                    op.add_adjoint(self.interior.view(), &a.d_values, &mut adj);
                    total += a.loss;
                }
                (total, adj)
            }
        }
    }

    fn points(&self, k: usize) -> ArrayView2<'_, f64> {
        match k {
            0 => self.data.view(),
            2 => self.boundary.view(),
            _ => self.interior.view(),
        }
    }
}

fn check_gradients(seed: u64) -> Result<(f64, f64, f64), TestCaseError> {
    let net = init_glorot(&[2, 16, 16, 1], seed, OutputTransform::Identity).unwrap();
    let case = GradCase::new(seed ^ 0x5eed);
    let req = DerivRequest::full(2);
    let flat = net.to_flat();
    let h = 1e-4;
    let mut worst_param = 0.0f64;
    for k in 0..4 {
        let pts = case.points(k);
        let (_, grad) = loss_param_grad(&net, pts, &req, |b| case.loss(k, b)).unwrap();
        let analytic = grad.to_flat();
        let mut q = net.clone();
        let mut f = flat.clone();
        for j in 0..flat.len() {
            f[j] = flat[j] + h;
            q.set_flat(&f).unwrap();
            let lp = case.loss(k, &eval_bundles(&q, pts, &req).unwrap()).0;
            f[j] = flat[j] - h;
            q.set_flat(&f).unwrap();
            let lm = case.loss(k, &eval_bundles(&q, pts, &req).unwrap()).0;
            f[j] = flat[j];
            let e = rel_err(analytic[j], (lp - lm) / (2.0 * h));
            worst_param = worst_param.max(e);
            prop_assert!(e < 1e-4, "loss {k} param {j}: {} vs fd, rel err {e:e}", analytic[j]);
        }
    }

    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    let (hg, hh) = (1e-5, 1e-4);
    for row in case.interior.rows() {
        let p = [row[0], row[1]];
        let b = eval_bundle(&net, &p, &req).unwrap();
        let f = |p: [f64; 2]| dcpde::diffnet::forward(&net, &p).unwrap();
        for j in 0..2 {
            let mut pp = p;
            let mut pm = p;
            pp[j] += hg;
            pm[j] -= hg;
            let g = (f(pp) - f(pm)) / (2.0 * hg);
            pp[j] = p[j] + hh;
            pm[j] = p[j] - hh;
            let hs = (f(pp) - 2.0 * f(p) + f(pm)) / (hh * hh);
            worst_g = worst_g.max((g - b.grad[j]).abs());
            worst_h = worst_h.max((hs - b.diag_hess[j]).abs());
        }
    }
    prop_assert!(worst_g < 1e-6, "input gradient error {worst_g:e}");
    prop_assert!(worst_h < 1e-5, "input hessian error {worst_h:e}");
    Ok((worst_param, worst_g, worst_h))
}

#[test]
fn c1_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut runner = TestRunner::new(PtConfig { cases: 8, failure_persistence: None, ..PtConfig::default() });
    let worst = std::cell::Cell::new((0.0f64, 0.0f64, 0.0f64));
    let result = runner.run(&any::<u64>(), |seed| {
        let (p, g, h) = check_gradients(seed)?;
        let w = worst.get();
        worst.set((w.0.max(p), w.1.max(g), w.2.max(h)));
        Ok(())
    });
    let secs = start.elapsed().as_secs_f64();
    let pass = result.is_ok() && secs < 10.0;
    let (p, g, h) = worst.get();
    let detail = match &result {
        Ok(()) => format!("max param rel err {p:.2e}, input grad err {g:.2e}, hess err {h:.2e}, {secs:.1} s"),
        Err(e) => format!("{e}"),
    };
    report(1, "gradient correctness", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c2_heat_accuracy() {
    let runs = heat_runs();
    let result = (|| -> Result<(f64, f64, f64, f64, f64), String> {
        let dc_u = median(&collect(runs, Method::Dcpinn, "E_u")?);
        let dc_h = median(&collect(runs, Method::Dcpinn, "E_h_xx")?);
        let pinn_u = median(&collect(runs, Method::Pinn, "E_u")?);
        let pinn_h = median(&collect(runs, Method::Pinn, "E_h_xx")?);
        let times: Vec<f64> = runs.iter().filter_map(|((m, _), r)| (*m == Method::Dcpinn).then_some(r)).filter_map(|r| r.as_ref().ok().map(|x| x.1)).collect();
        Ok((dc_u, dc_h, pinn_u, pinn_h, mean(&times)))
    })();
    let (pass, detail) = match result {
        Ok((dc_u, dc_h, pinn_u, pinn_h, secs)) => (
            dc_u <= 0.01 && dc_h <= 0.45 && dc_u < pinn_u && dc_h < pinn_h,
            format!(
                "median over {} seeds: dcpinn E_u {dc_u:.3e} E_h_xx {dc_h:.3e}; pinn E_u {pinn_u:.3e} E_h_xx {pinn_h:.3e}; {secs:.0} s per dcpinn run",
                HEAT_SEEDS.len()
            ),
        ),
        Err(e) => (false, e),
    };
    report(2, "heat accuracy", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c3_ablation_ordering() {
    let runs = heat_runs();
    let order = [Method::Dcpinn, Method::DcpinnNoM, Method::PinnIneq, Method::Pinn];
    let result: Result<Vec<f64>, String> = order.iter().map(|&m| collect(runs, m, "E_h_xx").map(|v| mean(&v))).collect();
    let (pass, detail) = match result {
        Ok(means) => {
            let pass = means.windows(2).all(|w| w[0] < w[1]);
            let parts: Vec<String> = order.iter().zip(&means).map(|(m, v)| format!("{m} {v:.3e}")).collect();
            (pass, format!("mean E_h_xx over {} seeds: {}", HEAT_SEEDS.len(), parts.join(" < ")))
        }
        Err(e) => (false, e),
    };
    report(3, "ablation ordering", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c4_sweep_prefers_larger_eta() {
    let cfg = config("heat_sweep.toml");
    assert_eq!(cfg.sweep.epochs, Some(2000));
    let (pass, detail) = match cmd_sweep(&cfg, &scratch("sweep")) {
        Ok(cells) => {
            let ranked = best_cells(&cells, 4);
            match ranked.first() {
                Some(best) => {
                    let top: Vec<String> = ranked
                        .iter()
                        .map(|c| format!("({:e},{},{}) {:.3}", c.eta_m, c.p_m, c.p_lambda, c.score()))
                        .collect();
                    (
                        best.eta_m == 1e-3 || best.eta_m == 1e-2,
                        format!("{} cells, top cells (eta_m,p_m,p_lambda) score: {}", cells.len(), top.join("; ")),
                    )
                }
                None => (false, "no cell finished".into()),
            }
        }
        Err(e) => (false, e.to_string()),
    };
    report(4, "sensitivity sweep", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c5_monte_carlo_matches_black_scholes() {
    let start = Instant::now();
    let params = LVParams { a: 0.0, b: 0.0, ..LVParams::default() };
    let cfg = MCConfig { n_paths: 1_000_000, seed: 11, ..MCConfig::default() };
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, t) in [(1.0, 1.0), (0.8, 0.5), (1.2, 1.0)] {
        let (price, se) = mc_lv_price(k, t, &params, &cfg).unwrap();
        let bs = bs_call(params.s0, k, t, params.r, params.sigma_a);
        let diff = (price - bs).abs();
        pass &= diff <= 3.0 * se && diff < 2e-3;
        parts.push(format!("K={k} T={t}: |MC-BS| {diff:.2e} ({:.2} se)", diff / se));
    }
    let (_, se1) = mc_lv_price(1.0, 1.0, &params, &cfg).unwrap();
    let (_, se4) = mc_lv_price(1.0, 1.0, &params, &MCConfig { n_paths: 4_000_000, ..cfg }).unwrap();
    let ratio = se4 / se1;
    pass &= (0.4..=0.6).contains(&ratio);
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    parts.push(format!("stderr ratio at 4x paths {ratio:.3}, {secs:.1} s"));
    let detail = parts.join("; ");
    report(5, "pricer equivalence", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c6_local_vol_no_arbitrage() {
    let seeds = [0, 1, 2];
    let runs = run_all(&config("local_vol.toml"), &[Method::Pinn, Method::Dcpinn], &seeds, "local_vol");
    let result = (|| -> Result<(Vec<f64>, f64, f64), String> {
        let viol_t = collect(&runs, Method::Dcpinn, "viol_h_t")?;
        let dc_rate = mean(&collect(&runs, Method::Dcpinn, "rate_h_x")?);
        let pinn_rate = mean(&collect(&runs, Method::Pinn, "rate_h_x")?);
        Ok((viol_t, dc_rate, pinn_rate))
    })();
    let (pass, detail) = match result {
        Ok((viol_t, dc, pinn)) => (
            viol_t.iter().all(|&v| v == 0.0) && 2.0 * dc <= pinn,
            format!("dcpinn viol_h_t per seed {viol_t:?}; mean u_x > 0 rate dcpinn {dc:.3e} vs pinn {pinn:.3e}"),
        ),
        Err(e) => (false, e),
    };
    report(6, "local volatility constraints", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn c7_metric_examples() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let traj = |e: &[f64]| Trajectory::new((0..e.len()).map(|i| i as f64).collect(), e.to_vec()).unwrap();
    let mut failures = Vec::new();
    let mut check = |name: &str, ok: bool| {
        if !ok {
            failures.push(name.to_string());
        }
    };
    check("rmse [3,4]", close(metrics::rmse(&[3.0, 4.0]).unwrap(), 12.5f64.sqrt()));
    check("rmse zeros", metrics::rmse(&[0.0; 5]).unwrap() == 0.0);
    check("rmse single", close(metrics::rmse(&[-0.7]).unwrap(), 0.7));
    check("tvn monotone", close(metrics::tvn(&traj(&[1.0, 0.5, 0.2]), metrics::EPS), 1.0));
    check("tvn rebound", close(metrics::tvn(&traj(&[1.0, 0.5, 0.7]), metrics::EPS), 1.4));
    check("tvn constant", metrics::tvn(&traj(&[0.3, 0.3, 0.3]), metrics::EPS) == 0.0);
    check("nauc constant", metrics::nauc(&traj(&[0.3, 0.3, 0.3]), metrics::EPS) == 0.0);
    let linear = Trajectory::new(vec![0.0, 0.5, 1.0], vec![1.0, 0.5, 0.0]).unwrap();
    check("nauc linear", close(metrics::nauc(&linear, metrics::EPS), 0.5));
    let drop = Trajectory::new(vec![0.0, 1e-3, 1.0], vec![1.0, 0.0, 0.0]).unwrap();
    check("nauc drop", close(metrics::nauc(&drop, metrics::EPS), 1.0 - 0.5e-3));
    check("violation feasible", metrics::violation_score(&[-1.0, 0.0, -0.2]).unwrap() == 0.0);
    check("violation [-1,2]", close(metrics::violation_score(&[-1.0, 2.0]).unwrap(), 1.0));
    check("violation [0.5]", close(metrics::violation_score(&[0.5]).unwrap(), 0.5));
    check("improvement heat", close(metrics::improvement_pct(0.013, 0.002, Direction::Minimize, metrics::EPS), 1100.0 / 13.0));
    check("improvement equal", metrics::improvement_pct(0.4, 0.4, Direction::Minimize, metrics::EPS) == 0.0);
    check("improvement maximize", close(metrics::improvement_pct(0.5, 1.0, Direction::Maximize, metrics::EPS), 100.0));
    check("borda single", metrics::borda(&[vec![1.0, 2.0, 3.0]]).unwrap() == vec![1.0, 2.0, 3.0]);
    check("borda reversed", metrics::borda(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap() == vec![3.0, 3.0]);
    let tied = metrics::rank_with_ties(&[0.1, 0.1, 0.3], Direction::Minimize);
    check("borda tie", metrics::borda(&[tied]).unwrap() == vec![1.5, 1.5, 3.0]);
    let pass = failures.is_empty();
    let detail = if pass { "18 hand-computed examples reproduced".to_string() } else { format!("mismatches: {}", failures.join(", ")) };
    report(7, "metric examples", pass, &detail);
    assert!(pass, "{detail}");
}

fn analytic_bundle(x: &[f64], t: f64, lambda: f64) -> DerivBundle {
    let d = x.len();
    let mut grad: Vec<f64> = (0..d).map(|i| heat_analytic_dx(x, t, lambda, i)).collect();
    grad.push(heat_analytic_dt(x, t, lambda));
    let mut diag_hess = vec![heat_analytic_dxx(x, t, lambda); d];
    diag_hess.push(0.0);
    DerivBundle { value: heat_analytic(x, t, lambda), grad, diag_hess }
}

#[test]
fn c8_heat_nd_consistency() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for d in [1, 2, 8] {
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
            let t: f64 = rng.random();
            worst = worst.max(heat_nd_residual(&analytic_bundle(&x, t, 0.1), 0.1, d).unwrap().abs());
        }
    }
    let mut pass = worst < 1e-10;
    let mut parts = vec![format!("max |residual| {worst:.1e}")];

    let base = config("heat_nd.toml");
    let mut times = Vec::new();
    for d in [1, 2, 8] {
        let mut cfg = base.clone();
        cfg.grid.dim = Some(d);
        cfg.grid.n_collocation = Some(100);
        let mut best = f64::INFINITY;
        for rep in 0..3 {
            match execute_run(&cfg, Method::Dcpinn, &scratch(&format!("heat_nd/d{d}_{rep}"))) {
                Ok(RunOutcome::Finished(r)) => best = best.min(r.wall_time),
                Ok(RunOutcome::Diverged(_, msg)) => {
                    pass = false;
                    parts.push(format!("d={d} {msg}"));
                }
                Err(e) => {
                    pass = false;
                    parts.push(format!("d={d} {e}"));
                }
            }
        }
        times.push(best);
    }
    pass &= times.windows(2).all(|w| w[0] <= w[1]);
    parts.push(format!("training time d=1,2,8: {:.2} s, {:.2} s, {:.2} s", times[0], times[1], times[2]));
    let detail = parts.join("; ");
    report(8, "d-dimensional heat", pass, &detail);
    assert!(pass, "{detail}");
}

/// Output files of a run directory with the wall-clock column removed.
fn numeric_outputs(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let Ok(entries) = std::fs::read_dir(&d) else { continue };
        for entry in entries {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let text = std::fs::read_to_string(&path).unwrap();
            let mut lines = text.lines();
            let header = lines.next().unwrap_or_default();
            let wall = header.split(',').position(|c| c == "wall_time_s");
            let strip = |l: &str| match wall {
                Some(w) => l.split(',').enumerate().filter(|(i, _)| *i != w).map(|(_, c)| c).collect::<Vec<_>>().join(","),
                None => l.to_string(),
            };
            let body: Vec<String> = std::iter::once(header).chain(lines).map(strip).collect();
            out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), body.join("\n"));
        }
    }
    out
}

#[test]
fn c9_determinism() {
    let bin = env!("CARGO_BIN_EXE_dcpde");
    let root = scratch("determinism");
    let cfg_path = root.join("small.toml");
    std::fs::write(
        &cfg_path,
        "problem = \"heat\"\nmethod = \"dcpinn\"\nseed = 3\n\
         training.epochs = 300\ntraining.p_m = 10\ntraining.p_lambda = 100\ntraining.record_stride = 50\n\
         grid.n_interior = 9\ngrid.n_line = 41\ngrid.n_validation = 21\n\
         profiles.derivs = [\"u_xx\"]\n\
         sweep.eta_m = [1e-3, 1e-2]\nsweep.p_m = [10]\nsweep.p_lambda = [100]\nsweep.epochs = 200\n\
         ablate.methods = [\"pinn\", \"dcpinn\"]\nablate.seeds = [0, 1]\n",
    )
    .unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for cmd in ["run", "sweep", "ablate", "report"] {
        let mut outputs = Vec::new();
        let out = root.join(cmd);
        for _ in 0..2 {
            let _ = std::fs::remove_dir_all(&out);
            let mut c = Command::new(bin);
            if cmd == "report" {
                c.arg("report").args([root.join("ablate/pinn/seed0"), root.join("ablate/dcpinn/seed0")]);
                c.arg("--out").arg(&out);
            } else {
                c.arg(cmd).arg("--config").arg(&cfg_path).arg("--out").arg(&out);
            }
            let run = c.env("RUST_LOG", "warn").output().unwrap();
            if !run.status.success() {
                pass = false;
                parts.push(format!("{cmd} exited with {}: {}", run.status, String::from_utf8_lossy(&run.stderr).trim()));
            }
            outputs.push(numeric_outputs(&out));
        }
        let same = outputs[0] == outputs[1] && !outputs[0].is_empty();
        pass &= same;
        parts.push(format!("{cmd}: {} files {}", outputs[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    let detail = parts.join("; ");
    report(9, "determinism", pass, &detail);
    assert!(pass, "{detail}");
}
