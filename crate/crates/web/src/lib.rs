//! Browser demo: train a small heat-equation model step by step, compare the
//! Monte Carlo pricer with Black-Scholes, and inspect the local-volatility
//! reference surface.

use dcpde::diffnet::DerivRequest;
use dcpde::oracles::{bs_call, mc_lv_prices, DupireReference, LVParams, MCConfig};
use dcpde::problems::{heat_1d, lv_sigma, HeatConfig, Term};
use dcpde::trainer::{Method, TrainConfig, Trainer};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Interactive heat-equation training run.
#[wasm_bindgen]
pub struct HeatSession {
    trainer: Trainer<'static>,
    last_total: f64,
}

#[wasm_bindgen]
impl HeatSession {
    /// `method` is any method name accepted by the CLI; `width` is the size of
    /// both hidden layers.
    #[wasm_bindgen(constructor)]
    pub fn new(method: &str, seed: u64, n_interior: usize, width: usize) -> Result<HeatSession, JsError> {
        let method = Method::from_name(method).ok_or_else(|| js_err(format!("unknown method `{method}`")))?;
        let mut problem = heat_1d(&HeatConfig { n_interior, n_line: 201, n_validation: 41, ..Default::default() })
            .map_err(js_err)?;
        problem.layer_sizes = vec![2, width, width, 1];
        let cfg = TrainConfig { method, seed, record_stride: 1, validation_trajectory: false, ..Default::default() };
        let trainer = Trainer::new_owned(problem, &cfg).map_err(js_err)?;
        Ok(HeatSession { trainer, last_total: f64::NAN })
    }

    /// Runs `n` epochs and returns the objective of the last one.
    pub fn step(&mut self, n: usize) -> Result<f64, JsError> {
        for _ in 0..n {
            if let Some(r) = self.trainer.step().map_err(js_err)? {
                self.last_total = r.total;
            }
        }
        Ok(self.last_total)
    }

    pub fn epoch(&self) -> usize {
        self.trainer.epoch()
    }

    /// Category labels in the order of `losses` and `weights`.
    pub fn categories(&self) -> Vec<String> {
        self.trainer.categories().iter().map(|c| c.label()).collect()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.trainer.records().last().map(|r| r.losses.clone()).unwrap_or_default()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.trainer.records().last().map(|r| r.lambdas.clone()).unwrap_or_default()
    }

    /// Flattened `[x, model, exact]` triples of `u`, `u_xx` or `u_t` at time `t`.
    pub fn profile(&self, deriv: &str, t: f64, n: usize) -> Result<Vec<f64>, JsError> {
        let term = match deriv {
            "u" => Term::Value,
            "u_xx" => Term::Hess(0),
            "u_t" => Term::Grad(1),
            other => return Err(js_err(format!("unknown derivative `{other}`"))),
        };
        let n = n.max(2);
        let pts = ndarray::Array2::from_shape_fn((n, 2), |(i, j)| if j == 0 { i as f64 / (n - 1) as f64 } else { t });
        let b = self.trainer.model().bundles(pts.view(), &DerivRequest::full(2)).map_err(js_err)?;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            let x = pts[[i, 0]];
            let exact = match term {
                Term::Value => dcpde::oracles::heat_analytic(&[x], t, 0.1),
                Term::Hess(_) => dcpde::oracles::heat_analytic_dxx(&[x], t, 0.1),
                _ => dcpde::oracles::heat_analytic_dt(&[x], t, 0.1),
            };
            out.extend([x, term.get(&b, i), exact]);
        }
        Ok(out)
    }
}

/// Flattened `[K, mc, bs, stderr]` rows for constant volatility `sigma`.
#[wasm_bindgen]
pub fn mc_vs_bs(sigma: f64, maturity: f64, n_strikes: usize, n_paths: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let params = LVParams { sigma_a: sigma, a: 0.0, b: 0.0, ..LVParams::default() };
    let n = n_strikes.max(2);
    let strikes: Vec<(f64, f64)> = (0..n).map(|i| (0.5 + 1.0 * i as f64 / (n - 1) as f64, maturity)).collect();
    let cfg = MCConfig { n_paths, n_steps: 100, antithetic: true, seed };
    let prices = mc_lv_prices(&strikes, &params, &cfg).map_err(js_err)?;
    let mut out = Vec::with_capacity(4 * n);
    for (&(k, t), &(price, stderr)) in strikes.iter().zip(&prices) {
        out.extend([k, price, bs_call(params.s0, k, t, params.r, sigma), stderr]);
    }
    Ok(out)
}

/// Flattened `[K, sigma, C, C_K, C_KK]` rows of the reference surface at
/// maturity `t` for local volatility `sigma_a + a/K + b t`.
#[wasm_bindgen]
pub fn local_vol_slice(sigma_a: f64, a: f64, b: f64, t: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let params = LVParams { sigma_a, a, b, ..LVParams::default() };
    let reference = DupireReference::solve(&params, 4.0 * params.s0, t.max(0.01), 800, 200).map_err(js_err)?;
    let n = n.max(2);
    let mut out = Vec::with_capacity(5 * n);
    for i in 0..n {
        let k = 0.1 + 1.9 * i as f64 / (n - 1) as f64;
        let sigma = lv_sigma(k, t, sigma_a, a, b).map_err(js_err)?;
        let [c, c_k, c_kk, _] = reference.eval(k, t);
        out.extend([k, sigma, c, c_k, c_kk]);
    }
    Ok(out)
}
