//! Fixed-architecture tanh MLP with exact input derivatives.
//!
//! Besides the plain forward map, the network can propagate first-order
//! tangents (one per input direction) and diagonal second-order tangents
//! alongside the primal value. All streams share the same weight matrices, so
//! they are stacked row-wise and pushed through each affine layer with a single
//! matrix product. A hand-written reverse sweep over that extended forward pass
//! yields parameter gradients of any loss built from values, gradients and
//! diagonal Hessian entries.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("non-finite loss or derivative at batch index {index}")]
    NonFinite { index: usize },
}

/// Hidden-layer activation. Only C-infinity activations are admitted because
/// losses may contain second input derivatives and are differentiated once more.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn from_name(name: &str) -> Result<Self, NetError> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            other => Err(NetError::InvalidArchitecture(format!(
                "activation `{other}` is not C2-smooth or not supported; use tanh"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }
}

/// `tanh` through a single `exp`; absolute error stays within 2.3e-16 and it
/// is markedly cheaper than the libm routine in the hot loop.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let e = (-2.0 * x.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

/// Scalar map applied to the last affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputTransform {
    Identity,
    /// Derivative at exactly 0 is taken as 0.
    Abs,
    Softplus,
}

impl OutputTransform {
    pub fn from_name(name: &str) -> Result<Self, NetError> {
        match name {
            "identity" => Ok(Self::Identity),
            "abs" => Ok(Self::Abs),
            "softplus" => Ok(Self::Softplus),
            other => Err(NetError::InvalidArchitecture(format!(
                "unknown output transform `{other}`"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Abs => "abs",
            Self::Softplus => "softplus",
        }
    }

    /// Value and first three derivatives at `v`.
    #[inline]
    pub fn eval(self, v: f64) -> [f64; 4] {
        match self {
            Self::Identity => [v, 1.0, 0.0, 0.0],
            Self::Abs => {
                let sign = if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                [v.abs(), sign, 0.0, 0.0]
            }
            Self::Softplus => {
                let value = if v > 30.0 { v } else { v.exp().ln_1p() };
                let sig = 1.0 / (1.0 + (-v).exp());
                let d2 = sig * (1.0 - sig);
                [value, sig, d2, d2 * (1.0 - 2.0 * sig)]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Shape `(out, in)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Weights and biases of the MLP plus its fixed nonlinearities.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    pub output_transform: OutputTransform,
}

impl NetworkParams {
    pub fn new(
        layers: Vec<Layer>,
        activation: Activation,
        output_transform: OutputTransform,
    ) -> Result<Self, NetError> {
        if layers.len() < 2 {
            return Err(NetError::InvalidArchitecture(format!(
                "need at least 2 affine layers, got {}",
                layers.len()
            )));
        }
        for (l, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.dim();
            if out == 0 || inp == 0 {
                return Err(NetError::InvalidArchitecture(format!("layer {l} has a zero dimension")));
            }
            if layer.bias.len() != out {
                return Err(NetError::InvalidArchitecture(format!(
                    "layer {l}: bias length {} != {out}",
                    layer.bias.len()
                )));
            }
            if l > 0 && layers[l - 1].weight.nrows() != inp {
                return Err(NetError::InvalidArchitecture(format!(
                    "layer {l} expects {inp} inputs but layer {} produces {}",
                    l - 1,
                    layers[l - 1].weight.nrows()
                )));
            }
        }
        if layers.last().unwrap().weight.nrows() != 1 {
            return Err(NetError::InvalidArchitecture("output dimension must be 1".into()));
        }
        Ok(Self { layers, activation, output_transform })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    /// `[n_in, hidden..., 1]`
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.input_dim()];
        sizes.extend(self.layers.iter().map(|l| l.weight.nrows()));
        sizes
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameters flattened layer by layer, weights row-major then bias.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.num_params() {
            return Err(NetError::Shape { expected: self.num_params(), got: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }
}

/// Glorot-normal initialisation: zero-mean weights with variance
/// `2 / (fan_in + fan_out)`, zero biases.
pub fn init_glorot(
    layer_sizes: &[usize],
    seed: u64,
    output_transform: OutputTransform,
) -> Result<NetworkParams, NetError> {
    if layer_sizes.len() < 3 {
        return Err(NetError::InvalidArchitecture(format!(
            "need input, at least one hidden and output size, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(NetError::InvalidArchitecture(format!("non-positive size in {layer_sizes:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_sizes
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
            let weight = Array2::from_shape_simple_fn((fan_out, fan_in), || {
                let z: f64 = StandardNormal.sample(&mut rng);
                std * z
            });
            Layer { weight, bias: Array1::zeros(fan_out) }
        })
        .collect();
    NetworkParams::new(layers, Activation::Tanh, output_transform)
}

/// Plain single-point forward pass.
pub fn forward(params: &NetworkParams, point: &[f64]) -> Result<f64, NetError> {
    if point.len() != params.input_dim() {
        return Err(NetError::Shape { expected: params.input_dim(), got: point.len() });
    }
    let mut x = Array1::from(point.to_vec());
    let last = params.layers.len() - 1;
    for (l, layer) in params.layers.iter().enumerate() {
        let mut z = layer.weight.dot(&x) + &layer.bias;
        if l < last {
            z.mapv_inplace(tanh);
        }
        x = z;
    }
    Ok(params.output_transform.eval(x[0])[0])
}

/// Value, input gradient and diagonal of the input Hessian at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivBundle {
    pub value: f64,
    pub grad: Vec<f64>,
    pub diag_hess: Vec<f64>,
}

/// Column-oriented bundles for a batch of points. Entries that were not
/// requested are left at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleBatch {
    pub value: Array1<f64>,
    /// `(n, n_in)`
    pub grad: Array2<f64>,
    /// `(n, n_in)`
    pub hess: Array2<f64>,
}

impl BundleBatch {
    pub fn zeros(n: usize, n_in: usize) -> Self {
        Self {
            value: Array1::zeros(n),
            grad: Array2::zeros((n, n_in)),
            hess: Array2::zeros((n, n_in)),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn point(&self, i: usize) -> DerivBundle {
        DerivBundle {
            value: self.value[i],
            grad: self.grad.row(i).to_vec(),
            diag_hess: self.hess.row(i).to_vec(),
        }
    }

    fn first_non_finite(&self) -> Option<usize> {
        (0..self.len()).find(|&i| {
            !self.value[i].is_finite()
                || self.grad.row(i).iter().any(|v| !v.is_finite())
                || self.hess.row(i).iter().any(|v| !v.is_finite())
        })
    }
}

/// Which derivative streams to propagate.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DerivRequest {
    /// First derivatives in every input direction.
    pub first: bool,
    /// Input directions that also need `d^2 u / dx_i^2`.
    pub second: Vec<usize>,
}

impl DerivRequest {
    pub fn value_only() -> Self {
        Self::default()
    }

    /// All first derivatives and every diagonal second derivative.
    pub fn full(n_in: usize) -> Self {
        Self { first: true, second: (0..n_in).collect() }
    }

    /// All first derivatives plus the listed second derivatives.
    pub fn with_second(second: Vec<usize>) -> Self {
        Self { first: true, second }
    }

    fn n_streams(&self, n_in: usize) -> usize {
        1 + if self.first || !self.second.is_empty() { n_in } else { 0 } + self.second.len()
    }

    fn has_first(&self) -> bool {
        self.first || !self.second.is_empty()
    }
}

/// Parameter gradient, shape-congruent with [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub layers: Vec<Layer>,
}

impl ParamGrad {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        Self {
            layers: params
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Array2::zeros(l.weight.raw_dim()),
                    bias: Array1::zeros(l.bias.len()),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn fill_zero(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &ParamGrad, alpha: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.scaled_add(alpha, &b.weight);
            a.bias.scaled_add(alpha, &b.bias);
        }
    }

    /// Mean absolute value over all entries.
    pub fn mean_abs(&self) -> f64 {
        let sum: f64 = self
            .layers
            .iter()
            .map(|l| l.weight.iter().map(|v| v.abs()).sum::<f64>() + l.bias.iter().map(|v| v.abs()).sum::<f64>())
            .sum();
        sum / self.num_params() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().all(|v| v.is_finite()) && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

/// Recorded extended forward pass over a batch; supports repeated reverse sweeps.
///
/// Stream layout inside every stacked matrix (blocks of `n` rows): primal,
/// then one tangent per input direction, then one second-order tangent per
/// requested second-derivative direction.
pub struct Tape<'p> {
    params: &'p NetworkParams,
    points: Array2<f64>,
    request: DerivRequest,
    n: usize,
    n_first: usize,
    /// Stacked pre-activations per hidden layer.
    pre: Vec<Array2<f64>>,
    /// tanh of the primal pre-activation per hidden layer, `(n, d_l)`.
    act: Vec<Array2<f64>>,
    /// Stacked post-activations per hidden layer.
    post: Vec<Array2<f64>>,
    /// Stacked output pre-transform values, length `S * n`.
    out: Array1<f64>,
    bundle: BundleBatch,
}

impl<'p> Tape<'p> {
    pub fn forward(
        params: &'p NetworkParams,
        points: ArrayView2<f64>,
        request: &DerivRequest,
    ) -> Result<Self, NetError> {
        let n_in = params.input_dim();
        if points.ncols() != n_in {
            return Err(NetError::Shape { expected: n_in, got: points.ncols() });
        }
        if let Some(&bad) = request.second.iter().find(|&&j| j >= n_in) {
            return Err(NetError::Shape { expected: n_in, got: bad + 1 });
        }
        let n = points.nrows();
        let n_first = if request.has_first() { n_in } else { 0 };
        let streams = request.n_streams(n_in);
        let n_hidden = params.layers.len() - 1;

        let mut pre = Vec::with_capacity(n_hidden);
        let mut act = Vec::with_capacity(n_hidden);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(n_hidden);

        for l in 0..n_hidden {
            let layer = &params.layers[l];
            let width = layer.weight.nrows();
            let mut z = Array2::<f64>::zeros((streams * n, width));
            if l == 0 {
                // Primal block: X W^T + b; tangent j is column j of W on every row;
                // second-order tangents vanish because the input map is linear.
                general_mat_mul(1.0, &points, &layer.weight.t(), 0.0, &mut z.slice_mut(s![0..n, ..]));
                for j in 0..n_first {
                    let col = layer.weight.column(j);
                    let mut block = z.slice_mut(s![(1 + j) * n..(2 + j) * n, ..]);
                    for mut row in block.rows_mut() {
                        row.assign(&col);
                    }
                }
            } else {
                general_mat_mul(1.0, &post[l - 1], &layer.weight.t(), 0.0, &mut z);
            }
            z.slice_mut(s![0..n, ..]).rows_mut().into_iter().for_each(|mut row| row += &layer.bias);

            let mut y = Array2::<f64>::zeros((n, width));
            let mut a = Array2::<f64>::zeros((streams * n, width));
            activate(&z, &mut y, &mut a, n, n_first, &request.second);
            pre.push(z);
            act.push(y);
            post.push(a);
        }

        let last = params.layers.last().unwrap();
        let w_out = last.weight.row(0);
        let mut out = post.last().unwrap().dot(&w_out);
        out.slice_mut(s![0..n]).iter_mut().for_each(|v| *v += last.bias[0]);

        let mut bundle = BundleBatch::zeros(n, n_in);
        let transform = params.output_transform;
        for i in 0..n {
            let g = transform.eval(out[i]);
            bundle.value[i] = g[0];
            for j in 0..n_first {
                bundle.grad[[i, j]] = g[1] * out[(1 + j) * n + i];
            }
            for (k, &j) in request.second.iter().enumerate() {
                let vj = out[(1 + j) * n + i];
                let vjj = out[(1 + n_first + k) * n + i];
                bundle.hess[[i, j]] = g[2] * vj * vj + g[1] * vjj;
            }
        }

        Ok(Self {
            params,
            points: points.to_owned(),
            request: request.clone(),
            n,
            n_first,
            pre,
            act,
            post,
            out,
            bundle,
        })
    }

    pub fn bundle(&self) -> &BundleBatch {
        &self.bundle
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Reverse sweep: accumulates `d(loss)/d(theta)` into `grad`, given the
    /// adjoint of the loss with respect to every bundle entry. Adjoint entries
    /// for unrequested derivatives are ignored.
    pub fn backward(&self, adjoint: &BundleBatch, grad: &mut ParamGrad) {
        let n = self.n;
        if n == 0 {
            return;
        }
        let n_first = self.n_first;
        let second = &self.request.second;
        let streams = 1 + n_first + second.len();
        let transform = self.params.output_transform;
        let out = &self.out;

        // Output transform.
        let mut out_bar = Array1::<f64>::zeros(streams * n);
        for i in 0..n {
            let g = transform.eval(out[i]);
            let mut v_bar = adjoint.value[i] * g[1];
            for j in 0..n_first {
                let u_bar = adjoint.grad[[i, j]];
                let vj = out[(1 + j) * n + i];
                out_bar[(1 + j) * n + i] += u_bar * g[1];
                v_bar += u_bar * g[2] * vj;
            }
            for (k, &j) in second.iter().enumerate() {
                let u_bar = adjoint.hess[[i, j]];
                let vj = out[(1 + j) * n + i];
                let vjj = out[(1 + n_first + k) * n + i];
                out_bar[(1 + n_first + k) * n + i] = u_bar * g[1];
                out_bar[(1 + j) * n + i] += u_bar * 2.0 * g[2] * vj;
                v_bar += u_bar * (g[3] * vj * vj + g[2] * vjj);
            }
            out_bar[i] = v_bar;
        }

        // Output affine layer.
        let n_layers = self.params.layers.len();
        let last_post = &self.post[n_layers - 2];
        {
            let g_last = &mut grad.layers[n_layers - 1];
            let gw = last_post.t().dot(&out_bar);
            g_last.weight.row_mut(0).scaled_add(1.0, &gw);
            g_last.bias[0] += out_bar.slice(s![0..n]).sum();
        }
        let w_out = self.params.layers[n_layers - 1].weight.row(0);
        let mut a_bar = Array2::<f64>::zeros(last_post.raw_dim());
        for (mut row, &ob) in a_bar.rows_mut().into_iter().zip(out_bar.iter()) {
            if ob != 0.0 {
                row.scaled_add(ob, &w_out);
            }
        }

        // Hidden layers, last to first. `a_bar` becomes `z_bar` in place.
        for l in (0..n_layers - 1).rev() {
            activate_adjoint(&self.pre[l], &self.act[l], &mut a_bar, n, n_first, second);
            let z_bar = a_bar;
            let g = &mut grad.layers[l];
            g.bias.scaled_add(1.0, &z_bar.slice(s![0..n, ..]).sum_axis(Axis(0)));
            if l == 0 {
                general_mat_mul(1.0, &z_bar.slice(s![0..n, ..]).t(), &self.points, 1.0, &mut g.weight);
                for j in 0..n_first {
                    let colsum = z_bar.slice(s![(1 + j) * n..(2 + j) * n, ..]).sum_axis(Axis(0));
                    g.weight.column_mut(j).scaled_add(1.0, &colsum);
                }
                break;
            }
            let prev = &self.post[l - 1];
            general_mat_mul(1.0, &z_bar.t(), prev, 1.0, &mut g.weight);
            let w = &self.params.layers[l].weight;
            let mut next = Array2::<f64>::zeros(prev.raw_dim());
            general_mat_mul(1.0, &z_bar, w, 0.0, &mut next);
            a_bar = next;
        }
    }
}

#[inline]
fn block_row<'a>(m: &'a [f64], width: usize, n: usize, stream: usize, i: usize) -> &'a [f64] {
    let start = (stream * n + i) * width;
    &m[start..start + width]
}

fn activate(
    z: &Array2<f64>,
    y: &mut Array2<f64>,
    a: &mut Array2<f64>,
    n: usize,
    n_first: usize,
    second: &[usize],
) {
    let width = z.ncols();
    let zs = z.as_slice().expect("standard layout");
    let ys = y.as_slice_mut().expect("standard layout");
    let a_s = a.as_slice_mut().expect("standard layout");
    let mut s1 = vec![0.0; width];
    let mut s2 = vec![0.0; width];
    for i in 0..n {
        let z0 = block_row(zs, width, n, 0, i);
        let yrow = &mut ys[i * width..(i + 1) * width];
        for k in 0..width {
            let t = tanh(z0[k]);
            yrow[k] = t;
            s1[k] = 1.0 - t * t;
            s2[k] = -2.0 * t * s1[k];
        }
        a_s[i * width..(i + 1) * width].copy_from_slice(yrow);
        for j in 0..n_first {
            let off = ((1 + j) * n + i) * width;
            let zt = &zs[off..off + width];
            let at = &mut a_s[off..off + width];
            for k in 0..width {
                at[k] = s1[k] * zt[k];
            }
        }
        for (kk, &j) in second.iter().enumerate() {
            let zt = block_row(zs, width, n, 1 + j, i);
            let off = ((1 + n_first + kk) * n + i) * width;
            let zss = &zs[off..off + width];
            let at = &mut a_s[off..off + width];
            for k in 0..width {
                at[k] = s2[k] * zt[k] * zt[k] + s1[k] * zss[k];
            }
        }
    }
}

/// Turns stacked post-activation adjoints into pre-activation adjoints in place.
fn activate_adjoint(
    z: &Array2<f64>,
    y: &Array2<f64>,
    bar: &mut Array2<f64>,
    n: usize,
    n_first: usize,
    second: &[usize],
) {
    let width = z.ncols();
    let zs = z.as_slice().expect("standard layout");
    let ys = y.as_slice().expect("standard layout");
    let bs = bar.as_slice_mut().expect("standard layout");
    let mut s1 = vec![0.0; width];
    let mut s2 = vec![0.0; width];
    let mut s3 = vec![0.0; width];
    let mut z0_bar = vec![0.0; width];
    for i in 0..n {
        let yrow = &ys[i * width..(i + 1) * width];
        for k in 0..width {
            let t = yrow[k];
            let d1 = 1.0 - t * t;
            s1[k] = d1;
            s2[k] = -2.0 * t * d1;
            s3[k] = -2.0 * d1 * d1 + 4.0 * t * t * d1;
        }
        {
            let b0 = &bs[i * width..(i + 1) * width];
            for k in 0..width {
                z0_bar[k] = b0[k] * s1[k];
            }
        }
        for j in 0..n_first {
            let off_t = ((1 + j) * n + i) * width;
            for k in 0..width {
                let ab = bs[off_t + k];
                let t = zs[off_t + k];
                bs[off_t + k] = ab * s1[k];
                z0_bar[k] += ab * s2[k] * t;
            }
        }
        for (kk, &j) in second.iter().enumerate() {
            let off_s = ((1 + n_first + kk) * n + i) * width;
            let off_t = ((1 + j) * n + i) * width;
            for k in 0..width {
                let ab = bs[off_s + k];
                let t = zs[off_t + k];
                bs[off_s + k] = ab * s1[k];
                bs[off_t + k] += ab * 2.0 * s2[k] * t;
                z0_bar[k] += ab * (s3[k] * t * t + s2[k] * zs[off_s + k]);
            }
        }
        bs[i * width..(i + 1) * width].copy_from_slice(&z0_bar);
    }
}

/// Exact derivative bundle at a single point.
pub fn eval_bundle(
    params: &NetworkParams,
    point: &[f64],
    request: &DerivRequest,
) -> Result<DerivBundle, NetError> {
    if point.len() != params.input_dim() {
        return Err(NetError::Shape { expected: params.input_dim(), got: point.len() });
    }
    let pts = ArrayView2::from_shape((1, point.len()), point).expect("contiguous row");
    let tape = Tape::forward(params, pts, request)?;
    Ok(tape.bundle().point(0))
}

/// Bundles for many points, processed in chunks to bound memory.
pub fn eval_bundles(
    params: &NetworkParams,
    points: ArrayView2<f64>,
    request: &DerivRequest,
) -> Result<BundleBatch, NetError> {
    const CHUNK: usize = 2048;
    let n = points.nrows();
    let mut out = BundleBatch::zeros(n, params.input_dim());
    let mut start = 0;
    while start < n {
        let end = (start + CHUNK).min(n);
        let tape = Tape::forward(params, points.slice(s![start..end, ..]), request)?;
        let b = tape.bundle();
        out.value.slice_mut(s![start..end]).assign(&b.value);
        out.grad.slice_mut(s![start..end, ..]).assign(&b.grad);
        out.hess.slice_mut(s![start..end, ..]).assign(&b.hess);
        start = end;
    }
    Ok(out)
}

/// Loss value and parameter gradient for a scalar loss of the batch bundle.
///
/// `loss_fn` returns the loss and its adjoint with respect to every bundle
/// entry. A non-finite loss, bundle or adjoint is reported with the index of
/// the first offending point.
pub fn loss_param_grad<F>(
    params: &NetworkParams,
    points: ArrayView2<f64>,
    request: &DerivRequest,
    loss_fn: F,
) -> Result<(f64, ParamGrad), NetError>
where
    F: FnOnce(&BundleBatch) -> (f64, BundleBatch),
{
    let tape = Tape::forward(params, points, request)?;
    let (loss, adjoint) = loss_fn(tape.bundle());
    if let Some(index) = tape.bundle().first_non_finite().or_else(|| adjoint.first_non_finite()) {
        return Err(NetError::NonFinite { index });
    }
    if !loss.is_finite() {
        return Err(NetError::NonFinite { index: 0 });
    }
    let mut grad = ParamGrad::zeros_like(params);
    tape.backward(&adjoint, &mut grad);
    Ok((loss, grad))
}

/// Checks a bundle batch for non-finite entries.
pub fn check_finite(batch: &BundleBatch) -> Result<(), NetError> {
    match batch.first_non_finite() {
        Some(index) => Err(NetError::NonFinite { index }),
        None => Ok(()),
    }
}
