//! Ground truth: analytic heat solutions, Black-Scholes prices, a Monte Carlo
//! local-volatility pricer and a finite-difference Dupire reference surface.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::f64::consts::{PI, SQRT_2};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("invalid Monte Carlo configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid option: strike {strike}, maturity {maturity}")]
    InvalidOption { strike: f64, maturity: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Local-volatility model `sigma(S, t) = sigma_a + a / S + b t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LVParams {
    pub sigma_a: f64,
    pub a: f64,
    pub b: f64,
    pub s0: f64,
    pub r: f64,
    pub noise_level: f64,
}

impl Default for LVParams {
    fn default() -> Self {
        Self { sigma_a: 0.2, a: 0.1, b: 0.2, s0: 1.0, r: 0.05, noise_level: 0.05 }
    }
}

impl LVParams {
    /// Volatility with the spot floored at `0.1 s0`.
    #[inline]
    pub fn sigma_clipped(&self, s: f64, t: f64) -> f64 {
        let s = s.max(0.1 * self.s0);
        self.sigma_a + self.a / s + self.b * t
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MCConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    pub antithetic: bool,
    pub seed: u64,
}

impl Default for MCConfig {
    fn default() -> Self {
        Self { n_paths: 200_000, n_steps: 200, antithetic: true, seed: 0 }
    }
}

impl MCConfig {
    fn validate(&self) -> Result<(), OracleError> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(OracleError::InvalidConfig("n_paths and n_steps must be positive".into()));
        }
        if self.antithetic && self.n_paths % 2 != 0 {
            return Err(OracleError::InvalidConfig(format!(
                "n_paths must be even with antithetic sampling, got {}",
                self.n_paths
            )));
        }
        Ok(())
    }
}

/// `exp(-lambda pi^2 d t) prod sin(pi x_i)`
pub fn heat_analytic(x: &[f64], t: f64, lambda: f64) -> f64 {
    let d = x.len() as f64;
    (-lambda * PI * PI * d * t).exp() * x.iter().map(|&xi| (PI * xi).sin()).product::<f64>()
}

pub fn heat_analytic_dt(x: &[f64], t: f64, lambda: f64) -> f64 {
    -lambda * PI * PI * x.len() as f64 * heat_analytic(x, t, lambda)
}

pub fn heat_analytic_dx(x: &[f64], t: f64, lambda: f64, i: usize) -> f64 {
    let d = x.len() as f64;
    let mut p = (-lambda * PI * PI * d * t).exp() * PI * (PI * x[i]).cos();
    for (j, &xj) in x.iter().enumerate() {
        if j != i {
            p *= (PI * xj).sin();
        }
    }
    p
}

/// Second derivative in `x_i`; identical for every `i`.
pub fn heat_analytic_dxx(x: &[f64], t: f64, lambda: f64) -> f64 {
    -PI * PI * heat_analytic(x, t, lambda)
}

/// Standard normal CDF via the complementary error function.
#[inline]
pub fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

#[inline]
pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// European call under constant volatility. Degenerate inputs fall back to
/// the limits: zero strike gives `S`, zero maturity or volatility gives the
/// (forward) intrinsic value.
pub fn bs_call(s: f64, k: f64, tau: f64, r: f64, sigma: f64) -> f64 {
    if k <= 0.0 {
        return s;
    }
    if tau <= 0.0 {
        return (s - k).max(0.0);
    }
    let df = (-r * tau).exp();
    if sigma <= 0.0 {
        return (s - k * df).max(0.0);
    }
    let vol = sigma * tau.sqrt();
    let d_plus = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / vol;
    let d_minus = d_plus - vol;
    s * norm_cdf(d_plus) - k * df * norm_cdf(d_minus)
}

/// Strike and maturity derivatives of [`bs_call`]: `[dC/dK, d2C/dK2, dC/dtau]`.
pub fn bs_call_strike_greeks(s: f64, k: f64, tau: f64, r: f64, sigma: f64) -> [f64; 3] {
    let df = (-r * tau).exp();
    let vol = sigma * tau.sqrt();
    let d_plus = ((s / k).ln() + (r + 0.5 * sigma * sigma) * tau) / vol;
    let d_minus = d_plus - vol;
    let dk = -df * norm_cdf(d_minus);
    let dkk = df * norm_pdf(d_minus) / (k * vol);
    let dtau = s * norm_pdf(d_plus) * sigma / (2.0 * tau.sqrt()) + r * k * df * norm_cdf(d_minus);
    [dk, dkk, dtau]
}

/// Discounted call prices for many `(strike, maturity)` pairs from one shared
/// set of log-Euler paths. The time grid is the union of a uniform grid with
/// `cfg.n_steps` steps on `[0, max maturity]` and all requested maturities, so
/// every maturity is hit exactly.
///
/// Paths are generated in fixed-size chunks, each with its own ChaCha stream,
/// and chunk sums are combined in chunk order: the result does not depend on
/// how chunks are scheduled across threads.
pub fn mc_lv_prices(
    options: &[(f64, f64)],
    params: &LVParams,
    cfg: &MCConfig,
) -> Result<Vec<(f64, f64)>, OracleError> {
    cfg.validate()?;
    for &(k, t) in options {
        if !(k > 0.0 && t > 0.0 && k.is_finite() && t.is_finite()) {
            return Err(OracleError::InvalidOption { strike: k, maturity: t });
        }
    }
    if options.is_empty() {
        return Ok(Vec::new());
    }
    let t_max = options.iter().map(|o| o.1).fold(0.0, f64::max);
    let mut grid: Vec<f64> = (0..=cfg.n_steps).map(|i| t_max * i as f64 / cfg.n_steps as f64).collect();
    grid.extend(options.iter().map(|o| o.1));
    grid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    grid.dedup_by(|a, b| (*a - *b).abs() <= 1e-14 * t_max);

    // Options grouped by the grid node of their maturity.
    let mut at_node: Vec<Vec<usize>> = vec![Vec::new(); grid.len()];
    for (idx, &(_, t)) in options.iter().enumerate() {
        let node = grid
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - t).abs().partial_cmp(&(b.1 - t).abs()).unwrap())
            .unwrap()
            .0;
        at_node[node].push(idx);
    }

    let sims = if cfg.antithetic { cfg.n_paths / 2 } else { cfg.n_paths };
    const CHUNK: usize = 2048;
    let n_chunks = sims.div_ceil(CHUNK);
    let job = PathJob { options, params, grid: &grid, at_node: &at_node, antithetic: cfg.antithetic, seed: cfg.seed };

    #[cfg(feature = "parallel")]
    let partials: Vec<Vec<(f64, f64)>> = {
        use rayon::prelude::*;
        (0..n_chunks)
            .into_par_iter()
            .map(|c| job.run_chunk(c as u64, CHUNK.min(sims - c * CHUNK)))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let partials: Vec<Vec<(f64, f64)>> =
        (0..n_chunks).map(|c| job.run_chunk(c as u64, CHUNK.min(sims - c * CHUNK))).collect();

    let mut sum = vec![0.0; options.len()];
    let mut sum_sq = vec![0.0; options.len()];
    for part in &partials {
        for (i, &(s, q)) in part.iter().enumerate() {
            sum[i] += s;
            sum_sq[i] += q;
        }
    }
    let n = sims as f64;
    Ok(options
        .iter()
        .enumerate()
        .map(|(i, &(_, t))| {
            let mean = sum[i] / n;
            let var = if sims > 1 { ((sum_sq[i] / n - mean * mean) * n / (n - 1.0)).max(0.0) } else { 0.0 };
            let df = (-params.r * t).exp();
            (df * mean, df * (var / n).sqrt())
        })
        .collect())
}

struct PathJob<'a> {
    options: &'a [(f64, f64)],
    params: &'a LVParams,
    grid: &'a [f64],
    at_node: &'a [Vec<usize>],
    antithetic: bool,
    seed: u64,
}

impl PathJob<'_> {
    /// Per-option `(sum, sum of squares)` of undiscounted payoff samples; an
    /// antithetic pair counts as one sample (the pair average).
    fn run_chunk(&self, chunk: u64, count: usize) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chunk);
        let p = self.params;
        let n_opt = self.options.len();
        let mut acc = vec![(0.0, 0.0); n_opt];
        let mut pay = vec![0.0; n_opt];
        let steps: Vec<(f64, f64, f64)> = self
            .grid
            .windows(2)
            .map(|w| (w[0], w[1] - w[0], (w[1] - w[0]).sqrt()))
            .collect();
        for _ in 0..count {
            let mut s_up = p.s0;
            let mut s_dn = p.s0;
            pay.iter_mut().for_each(|v| *v = 0.0);
            for (i, &(t, dt, sqdt)) in steps.iter().enumerate() {
                let z: f64 = StandardNormal.sample(&mut rng);
                let sig = p.sigma_clipped(s_up, t);
                s_up *= ((p.r - 0.5 * sig * sig) * dt + sig * sqdt * z).exp();
                if self.antithetic {
                    let sig = p.sigma_clipped(s_dn, t);
                    s_dn *= ((p.r - 0.5 * sig * sig) * dt - sig * sqdt * z).exp();
                }
                for &o in &self.at_node[i + 1] {
                    let k = self.options[o].0;
                    pay[o] = if self.antithetic {
                        0.5 * ((s_up - k).max(0.0) + (s_dn - k).max(0.0))
                    } else {
                        (s_up - k).max(0.0)
                    };
                }
            }
            for (a, &v) in acc.iter_mut().zip(&pay) {
                a.0 += v;
                a.1 += v * v;
            }
        }
        acc
    }
}

/// Discounted call price and its standard error for one option.
pub fn mc_lv_price(k: f64, t: f64, params: &LVParams, cfg: &MCConfig) -> Result<(f64, f64), OracleError> {
    Ok(mc_lv_prices(&[(k, t)], params, cfg)?[0])
}

/// `u_i (1 + noise_level eta_i)` with i.i.d. standard normal `eta`.
pub fn add_noise(prices: &[f64], noise_level: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    prices
        .iter()
        .map(|&u| {
            let eta: f64 = StandardNormal.sample(&mut rng);
            u * (1.0 + noise_level * eta)
        })
        .collect()
}

/// Standard normal truncated to `[lo, hi]` by rejection.
pub fn trunc_normal<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if (lo..=hi).contains(&z) {
            return z;
        }
    }
}

/// Observation locations: a truncated normal on `[-1, 1]` mapped linearly onto
/// strikes `[0.1 s0, 2 s0]`, and a truncated normal on `[0.1, 2]` halved onto
/// maturities `[0.05, 1]`.
pub fn sample_observations(n: usize, s0: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let z = trunc_normal(&mut rng, -1.0, 1.0);
            let k = 0.1 * s0 + 0.5 * (z + 1.0) * 1.9 * s0;
            let tz = trunc_normal(&mut rng, 0.1, 2.0);
            (k, 0.5 * tz)
        })
        .collect()
}

/// One observed option price.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub x: f64,
    pub t: f64,
    pub price_clean: f64,
    pub price_noisy: f64,
    pub stderr: f64,
}

/// Samples `n` observation locations, prices them by Monte Carlo and adds
/// relative noise.
pub fn generate_observations(
    n: usize,
    params: &LVParams,
    cfg: &MCConfig,
    seed: u64,
) -> Result<Vec<Observation>, OracleError> {
    let locs = sample_observations(n, params.s0, seed);
    let priced = mc_lv_prices(&locs, params, cfg)?;
    let clean: Vec<f64> = priced.iter().map(|p| p.0).collect();
    let noisy = add_noise(&clean, params.noise_level, seed.wrapping_add(0x9E37_79B9));
    Ok(locs
        .iter()
        .zip(&priced)
        .zip(&noisy)
        .map(|((&(x, t), &(price_clean, stderr)), &price_noisy)| Observation {
            x,
            t,
            price_clean,
            price_noisy,
            stderr,
        })
        .collect())
}

#[cfg(feature = "cli")]
pub mod io {
    use super::Observation;
    use std::path::Path;

    pub const HEADER: [&str; 5] = ["x", "t", "price_clean", "price_noisy", "stderr"];

    pub fn write_observations(path: &Path, obs: &[Observation]) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(HEADER)?;
        for o in obs {
            w.write_record([o.x, o.t, o.price_clean, o.price_noisy, o.stderr].map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_observations(path: &Path) -> Result<Vec<Observation>, csv::Error> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != HEADER {
            return Err(csv::Error::from(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("unexpected header {:?}", headers),
            )));
        }
        let mut out = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: Result<Vec<f64>, _> = rec.iter().map(|s| s.parse::<f64>()).collect();
            let v = v.map_err(|e| {
                csv::Error::from(std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))
            })?;
            out.push(Observation { x: v[0], t: v[1], price_clean: v[2], price_noisy: v[3], stderr: v[4] });
        }
        Ok(out)
    }
}

/// Call-price surface `C(K, tau)` from a Crank-Nicolson solve of the Dupire
/// forward equation `C_tau = 1/2 sigma^2 K^2 C_KK - r K C_K`, with Dirichlet
/// data `C(0, tau) = s0` and `C(K_max, tau) = 0`. The first steps are fully
/// implicit to damp the payoff kink.
#[derive(Debug, Clone)]
pub struct DupireReference {
    params: LVParams,
    k_max: f64,
    tau_max: f64,
    nk: usize,
    nt: usize,
    /// `(nt + 1) x (nk + 1)`, row-major by time level.
    values: Vec<f64>,
}

impl DupireReference {
    pub fn solve(params: &LVParams, k_max: f64, tau_max: f64, nk: usize, nt: usize) -> Result<Self, OracleError> {
        if nk < 4 || nt < 1 || !(k_max > 0.0) || !(tau_max > 0.0) {
            return Err(OracleError::InvalidParameter("degenerate Dupire grid".into()));
        }
        let h = k_max / nk as f64;
        let dt = tau_max / nt as f64;
        let mut values = Vec::with_capacity((nt + 1) * (nk + 1));
        let mut c: Vec<f64> = (0..=nk).map(|j| (params.s0 - j as f64 * h).max(0.0)).collect();
        values.extend_from_slice(&c);

        // Tridiagonal coefficients of the spatial operator at one time level.
        let coeffs = |tau: f64| -> Vec<(f64, f64, f64)> {
            (0..=nk)
                .map(|j| {
                    let k = j as f64 * h;
                    let sk = params.sigma_clipped(k, tau) * k;
                    let diff = 0.5 * sk * sk / (h * h);
                    let conv = params.r * k / (2.0 * h);
                    (diff + conv, -2.0 * diff, diff - conv)
                })
                .collect()
        };
        const IMPLICIT_STEPS: usize = 4;
        let mut rhs = vec![0.0; nk + 1];
        let mut lo = vec![0.0; nk + 1];
        let mut di = vec![0.0; nk + 1];
        let mut up = vec![0.0; nk + 1];
        for n in 0..nt {
            let theta = if n < IMPLICIT_STEPS { 1.0 } else { 0.5 };
            let t0 = n as f64 * dt;
            let t1 = t0 + dt;
            let a_old = coeffs(t0);
            let a_new = coeffs(t1);
            for j in 1..nk {
                let (l, d, u) = a_old[j];
                let explicit = l * c[j - 1] + d * c[j] + u * c[j + 1];
                rhs[j] = c[j] + (1.0 - theta) * dt * explicit;
                let (l, d, u) = a_new[j];
                lo[j] = -theta * dt * l;
                di[j] = 1.0 - theta * dt * d;
                up[j] = -theta * dt * u;
            }
            // Boundary rows.
            di[0] = 1.0;
            up[0] = 0.0;
            rhs[0] = params.s0;
            lo[nk] = 0.0;
            di[nk] = 1.0;
            rhs[nk] = 0.0;
            c = thomas(&lo, &di, &up, &rhs);
            values.extend_from_slice(&c);
        }
        Ok(Self { params: *params, k_max, tau_max, nk, nt, values })
    }

    /// Grid used for validation: `K in [0, 4 s0]`, `tau in [0, 1]`.
    pub fn default_for(params: &LVParams) -> Result<Self, OracleError> {
        Self::solve(params, 4.0 * params.s0, 1.0, 2000, 1000)
    }

    fn at(&self, n: usize, j: usize) -> f64 {
        self.values[n * (self.nk + 1) + j]
    }

    /// `[C, C_K, C_KK]` at time level `n`, linearly interpolated in `K`.
    fn level(&self, n: usize, k: f64) -> [f64; 3] {
        let h = self.k_max / self.nk as f64;
        let pos = (k / h).clamp(1.0, (self.nk - 2) as f64);
        let j = (pos.floor() as usize).min(self.nk - 2);
        let w = pos - j as f64;
        let node = |j: usize| -> [f64; 3] {
            let (cm, c0, cp) = (self.at(n, j - 1), self.at(n, j), self.at(n, j + 1));
            [c0, (cp - cm) / (2.0 * h), (cp - 2.0 * c0 + cm) / (h * h)]
        };
        let a = node(j);
        let b = node(j + 1);
        [0, 1, 2].map(|i| (1.0 - w) * a[i] + w * b[i])
    }

    /// `[C, C_K, C_KK, C_tau]` at `(k, tau)`. `C_tau` comes from the PDE.
    pub fn eval(&self, k: f64, tau: f64) -> [f64; 4] {
        let dt = self.tau_max / self.nt as f64;
        let pos = (tau / dt).clamp(0.0, self.nt as f64);
        let n = (pos.floor() as usize).min(self.nt - 1);
        let w = pos - n as f64;
        let a = self.level(n, k);
        let b = self.level(n + 1, k);
        let [c, ck, ckk] = [0, 1, 2].map(|i| (1.0 - w) * a[i] + w * b[i]);
        let sk = self.params.sigma_clipped(k, tau) * k;
        let ct = 0.5 * sk * sk * ckk - self.params.r * k * ck;
        [c, ck, ckk, ct]
    }
}

fn thomas(lo: &[f64], di: &[f64], up: &[f64], rhs: &[f64]) -> Vec<f64> {
    let n = di.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = up[0] / di[0];
    d[0] = rhs[0] / di[0];
    for i in 1..n {
        let m = di[i] - lo[i] * c[i - 1];
        c[i] = up[i] / m;
        d[i] = (rhs[i] - lo[i] * d[i - 1]) / m;
    }
    let mut x = vec![0.0; n];
    x[n - 1] = d[n - 1];
    for i in (0..n - 1).rev() {
        x[i] = d[i] - c[i] * x[i + 1];
    }
    x
}
