//! Differentiable building blocks with hand-written exact backward passes.
//!
//! There is no general autodiff graph; each block computes its own gradients,
//! which are verified against the central finite-difference oracle in
//! [`fdcheck`]. Everything runs in `f64` with a fixed summation order so that
//! repeated runs are bit-identical.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Tensors
// ---------------------------------------------------------------------------

/// Row-major real matrix; rows are instances, columns are features.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Tensor2 {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor2 {
        assert!(!rows.is_empty(), "Tensor2 needs at least one row");
        let cols = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor2 {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Tensor2 {
        assert_eq!(data.len(), rows * cols);
        Tensor2 { rows, cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Tensor2 {
        Tensor2 {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Dense layers
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the post-activation value.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Activation> {
        match s {
            "identity" => Some(Activation::Identity),
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// Fully connected layer `y = act(W x + b)` applied row-wise.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    /// `out x in` weight matrix.
    pub w: Tensor2,
    pub b: Vec<f64>,
    pub act: Activation,
}

/// Values cached by the forward pass for the backward pass.
pub struct DenseCache {
    x: Tensor2,
    y: Tensor2,
}

/// Gradient accumulator matching a [`DenseLayer`].
#[derive(Clone, Debug)]
pub struct DenseGrad {
    pub w: Tensor2,
    pub b: Vec<f64>,
}

impl DenseLayer {
    pub fn new_glorot(in_dim: usize, out_dim: usize, act: Activation, rng: &mut impl Rng) -> DenseLayer {
        DenseLayer {
            w: glorot_normal(out_dim, in_dim, rng),
            b: vec![0.0; out_dim],
            act,
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize, act: Activation) -> DenseLayer {
        DenseLayer {
            w: Tensor2::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
            act,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn zero_grad(&self) -> DenseGrad {
        DenseGrad {
            w: Tensor2::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, DenseCache)> {
        if x.cols() != self.in_dim() {
            return Err(Error::Shape(format!(
                "dense layer expects {} inputs, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let mut y = Tensor2::zeros(x.rows(), self.out_dim());
        for r in 0..x.rows() {
            let xr = x.row(r);
            let yr = y.row_mut(r);
            for o in 0..self.w.rows() {
                let wr = self.w.row(o);
                let mut acc = self.b[o];
                for (wi, xi) in wr.iter().zip(xr.iter()) {
                    acc += wi * xi;
                }
                yr[o] = self.act.apply(acc);
            }
        }
        let cache = DenseCache {
            x: x.clone(),
            y: y.clone(),
        };
        Ok((y, cache))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &DenseCache, gy: &Tensor2, grad: &mut DenseGrad) -> Tensor2 {
        debug_assert_eq!(gy.rows(), cache.x.rows());
        debug_assert_eq!(gy.cols(), self.out_dim());
        let mut gx = Tensor2::zeros(cache.x.rows(), self.in_dim());
        for r in 0..cache.x.rows() {
            let xr = cache.x.row(r);
            let yr = cache.y.row(r);
            let gyr = gy.row(r);
            let gxr = gx.row_mut(r);
            for o in 0..self.out_dim() {
                let gpre = gyr[o] * self.act.grad_from_output(yr[o]);
                if gpre == 0.0 {
                    continue;
                }
                grad.b[o] += gpre;
                let wr = self.w.row(o);
                let gwr = grad.w.row_mut(o);
                for i in 0..self.in_dim() {
                    gwr[i] += gpre * xr[i];
                    gxr[i] += gpre * wr[i];
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Multi-layer perceptron
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

pub struct MlpCache {
    stages: Vec<DenseCache>,
}

#[derive(Clone, Debug)]
pub struct MlpGrad {
    pub layers: Vec<DenseGrad>,
}

impl Mlp {
    /// Builds layers from a width tuple `(in, h1, ..., out)`. All layers use
    /// `hidden_act` except the last, which uses `last_act`.
    pub fn new(
        widths: &[usize],
        hidden_act: Activation,
        last_act: Activation,
        rng: &mut impl Rng,
    ) -> Mlp {
        assert!(widths.len() >= 2, "an MLP needs an input and an output width");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == widths.len() { last_act } else { hidden_act };
                DenseLayer::new_glorot(w[0], w[1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn zeros(widths: &[usize], hidden_act: Activation, last_act: Activation) -> Mlp {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == widths.len() { last_act } else { hidden_act };
                DenseLayer::zeros(w[0], w[1], act)
            })
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn zero_grad(&self) -> MlpGrad {
        MlpGrad {
            layers: self.layers.iter().map(|l| l.zero_grad()).collect(),
        }
    }

    pub fn forward(&self, x: &Tensor2) -> Result<(Tensor2, MlpCache)> {
        let mut stages = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward(&cur)?;
            stages.push(cache);
            cur = y;
        }
        Ok((cur, MlpCache { stages }))
    }

    pub fn backward(&self, cache: &MlpCache, gy: &Tensor2, grad: &mut MlpGrad) -> Tensor2 {
        let mut g = gy.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = layer.backward(&cache.stages[i], &g, &mut grad.layers[i]);
        }
        g
    }
}

// ---------------------------------------------------------------------------
// Aggregations
// ---------------------------------------------------------------------------

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus; used for parameter initialization.
fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

const PNORM_EPS: f64 = 1e-12;

/// Four element-wise aggregations applied in parallel and concatenated:
/// weighted mean, max, parametric log-sum-exp and parametric weighted p-norm.
/// Output dimension is four times the input dimension, laid out as
/// `[mean | max | lse | pnorm]`.
///
/// The positivity constraints hold by reparameterization:
/// `theta_r = softplus(rho_r)` and `theta_p = 1 + softplus(rho_p)`.
#[derive(Clone, Debug)]
pub struct AggregationBlock {
    pub rho_r: Vec<f64>,
    pub rho_p: Vec<f64>,
    pub theta_c: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AggGrad {
    pub rho_r: Vec<f64>,
    pub rho_p: Vec<f64>,
    pub theta_c: Vec<f64>,
}

pub struct AggCache {
    instances: Tensor2,
    weights: Vec<f64>,
    argmax: Vec<usize>,
}

impl AggregationBlock {
    /// Starts as (mean, max, soft-max with theta_r = 1, RMS distance with
    /// theta_p = 2 and theta_c = 0).
    pub fn new(dim: usize) -> AggregationBlock {
        AggregationBlock {
            rho_r: vec![softplus_inv(1.0); dim],
            rho_p: vec![softplus_inv(1.0); dim],
            theta_c: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.theta_c.len()
    }

    pub fn out_dim(&self) -> usize {
        4 * self.dim()
    }

    pub fn zero_grad(&self) -> AggGrad {
        AggGrad {
            rho_r: vec![0.0; self.rho_r.len()],
            rho_p: vec![0.0; self.rho_p.len()],
            theta_c: vec![0.0; self.theta_c.len()],
        }
    }

    pub fn theta_r(&self, j: usize) -> f64 {
        softplus(self.rho_r[j])
    }

    pub fn theta_p(&self, j: usize) -> f64 {
        1.0 + softplus(self.rho_p[j])
    }

    /// Aggregates `instances` (one per row) into a single vector. Rejects
    /// empty instance sets; the caller substitutes the learned imputation
    /// vector for those. Weights are treated as constants: the weighted mean
    /// and p-norm use them but no gradient flows into them.
    pub fn forward(&self, instances: &Tensor2, weights: &[f64]) -> Result<(Vec<f64>, AggCache)> {
        let k = instances.rows();
        let m = instances.cols();
        if k == 0 {
            return Err(Error::EmptyBag);
        }
        if m != self.dim() {
            return Err(Error::Shape(format!(
                "aggregation over dim {} got {m} columns",
                self.dim()
            )));
        }
        if weights.len() != k {
            return Err(Error::Shape(format!(
                "{} weights for {k} instances",
                weights.len()
            )));
        }
        debug_assert!(weights.iter().all(|&w| w > 0.0), "weights must be positive");

        let total_w: f64 = weights.iter().sum();
        let mut out = vec![0.0; 4 * m];
        let mut argmax = vec![0usize; m];

        for j in 0..m {
            // Weighted mean.
            let mut mean = 0.0;
            for i in 0..k {
                mean += weights[i] * instances.get(i, j);
            }
            out[j] = mean / total_w;

            // Max, first index wins ties.
            let mut best = instances.get(0, j);
            let mut best_i = 0;
            for i in 1..k {
                let v = instances.get(i, j);
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[m + j] = best;
            argmax[j] = best_i;

            // Log-sum-exp with the max-shift trick (unweighted).
            let theta_r = self.theta_r(j);
            let shift = theta_r * best;
            let mut s = 0.0;
            for i in 0..k {
                s += (theta_r * instances.get(i, j) - shift).exp();
            }
            out[2 * m + j] = (shift + s.ln() - (k as f64).ln()) / theta_r;

            // Weighted p-norm of |x - theta_c|.
            let theta_p = self.theta_p(j);
            let c = self.theta_c[j];
            let mut sp = 0.0;
            for i in 0..k {
                sp += weights[i] * (instances.get(i, j) - c).abs().powf(theta_p);
            }
            sp /= total_w;
            out[3 * m + j] = sp.powf(1.0 / theta_p);
        }

        Ok((
            out,
            AggCache {
                instances: instances.clone(),
                weights: weights.to_vec(),
                argmax,
            },
        ))
    }

    /// Backward pass; accumulates parameter gradients into `grad` and returns
    /// per-instance gradients.
    pub fn backward(&self, cache: &AggCache, gout: &[f64], grad: &mut AggGrad) -> Tensor2 {
        let k = cache.instances.rows();
        let m = cache.instances.cols();
        debug_assert_eq!(gout.len(), 4 * m);
        let total_w: f64 = cache.weights.iter().sum();
        let mut gx = Tensor2::zeros(k, m);

        for j in 0..m {
            let g_mean = gout[j];
            let g_max = gout[m + j];
            let g_lse = gout[2 * m + j];
            let g_pn = gout[3 * m + j];

            if g_mean != 0.0 {
                for i in 0..k {
                    *gx.row_mut(i).get_mut(j).unwrap() += g_mean * cache.weights[i] / total_w;
                }
            }

            if g_max != 0.0 {
                *gx.row_mut(cache.argmax[j]).get_mut(j).unwrap() += g_max;
            }

            if g_lse != 0.0 {
                let theta_r = self.theta_r(j);
                let best = cache.instances.get(cache.argmax[j], j);
                let shift = theta_r * best;
                let mut s = 0.0;
                for i in 0..k {
                    s += (theta_r * cache.instances.get(i, j) - shift).exp();
                }
                let lse = (shift + s.ln() - (k as f64).ln()) / theta_r;
                let mut expect_x = 0.0;
                for i in 0..k {
                    let p = (theta_r * cache.instances.get(i, j) - shift).exp() / s;
                    *gx.row_mut(i).get_mut(j).unwrap() += g_lse * p;
                    expect_x += p * cache.instances.get(i, j);
                }
                let dlse_dtheta = (expect_x - lse) / theta_r;
                grad.rho_r[j] += g_lse * dlse_dtheta * sigmoid(self.rho_r[j]);
            }

            if g_pn != 0.0 {
                let theta_p = self.theta_p(j);
                let c = self.theta_c[j];
                let mut sp = 0.0;
                for i in 0..k {
                    sp += cache.weights[i] * (cache.instances.get(i, j) - c).abs().powf(theta_p);
                }
                sp /= total_w;
                if sp > PNORM_EPS {
                    let a = sp.powf(1.0 / theta_p);
                    let scale = a / sp; // = sp^(1/p - 1)
                    let mut sum_dxi = 0.0;
                    let mut dsp_dp = 0.0;
                    for i in 0..k {
                        let d = cache.instances.get(i, j) - c;
                        let ad = d.abs();
                        if ad > PNORM_EPS {
                            let dxi = scale
                                * (cache.weights[i] / total_w)
                                * ad.powf(theta_p - 1.0)
                                * d.signum();
                            *gx.row_mut(i).get_mut(j).unwrap() += g_pn * dxi;
                            sum_dxi += dxi;
                            dsp_dp += (cache.weights[i] / total_w) * ad.powf(theta_p) * ad.ln();
                        }
                    }
                    grad.theta_c[j] += g_pn * (-sum_dxi);
                    let da_dp = a * ((dsp_dp / sp) / theta_p - sp.ln() / (theta_p * theta_p));
                    grad.rho_p[j] += g_pn * da_dp * sigmoid(self.rho_p[j]);
                }
            }
        }
        gx
    }
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Class-weighted binary cross entropy over two-way logits, averaged over the
/// minibatch. Class probabilities come from a log-sum-exp stabilized softmax,
/// so the loss is finite for any finite logits. Returns the loss and its
/// gradient with respect to the logits.
pub fn weighted_bce(
    logits: &Tensor2,
    labels: &[u8],
    omega0: f64,
    omega1: f64,
) -> Result<(f64, Tensor2)> {
    if logits.cols() != 2 {
        return Err(Error::Shape(format!(
            "two-way logits expected, got {} columns",
            logits.cols()
        )));
    }
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor2::zeros(logits.rows(), 2);
    for (r, &y) in labels.iter().enumerate() {
        debug_assert!(y <= 1);
        let z = logits.row(r);
        let m = z[0].max(z[1]);
        let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
        let logp = [z[0] - lse, z[1] - lse];
        let omega = if y == 1 { omega1 } else { omega0 };
        loss -= omega * logp[y as usize] / n;
        let gr = grad.row_mut(r);
        for c in 0..2 {
            let p = logp[c].exp();
            let indicator = if c == y as usize { 1.0 } else { 0.0 };
            gr[c] = -omega * (indicator - p) / n;
        }
    }
    Ok((loss, grad))
}

/// Two-way softmax probability of class 1.
pub fn softmax_class1(logits: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), 2);
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    e1 / (e0 + e1)
}

// ---------------------------------------------------------------------------
// Initialization and optimization
// ---------------------------------------------------------------------------

/// Weight matrix sampled from Normal(0, 2 / (fan_in + fan_out)).
pub fn glorot_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor2::from_vec(rows, cols, data)
}

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer state: first and second moment per parameter plus the step
/// counter for bias correction.
pub struct AdamState {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig, param_lens: &[usize]) -> AdamState {
        AdamState {
            cfg,
            t: 0,
            m: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
            v: param_lens.iter().map(|&l| vec![0.0; l]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over all parameter slots. Slot order must match the order
    /// used at construction.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let b1t = 1.0 - self.cfg.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.cfg.beta2.powi(self.t as i32);
        for (slot, (p, g)) in params.iter_mut().zip(grads.iter()).enumerate() {
            debug_assert_eq!(p.len(), self.m[slot].len());
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for i in 0..p.len() {
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * g[i];
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * g[i] * g[i];
                let mhat = m[i] / b1t;
                let vhat = v[i] / b2t;
                p[i] -= self.cfg.learning_rate * mhat / (vhat.sqrt() + self.cfg.epsilon);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central finite-difference gradient checks. The oracle only ever calls the
/// forward path, so it stays independent of every hand-written backward pass
/// it verifies.
pub mod fdcheck {
    pub const DEFAULT_STEP: f64 = 1e-5;
    pub const DEFAULT_TOL: f64 = 1e-4;

    /// |a - b| relative to max(|a|, |b|, 1).
    pub fn relative_error(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    /// Checks `analytic` against central differences of `f` around `x0`.
    /// Returns the first offending coordinate as an error string.
    pub fn check_gradient<F: FnMut(&[f64]) -> f64>(
        x0: &[f64],
        analytic: &[f64],
        mut f: F,
        step: f64,
        tol: f64,
    ) -> Result<(), String> {
        assert_eq!(x0.len(), analytic.len());
        let mut x = x0.to_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + step;
            let fp = f(&x);
            x[i] = orig - step;
            let fm = f(&x);
            x[i] = orig;
            let fd = (fp - fm) / (2.0 * step);
            let err = relative_error(fd, analytic[i]);
            if err > tol {
                return Err(format!(
                    "coordinate {i}: analytic {} vs finite difference {fd} (rel err {err:.3e})",
                    analytic[i]
                ));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    fn rand_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor2 {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.5..1.5)).collect();
        Tensor2::from_vec(rows, cols, data)
    }

    #[test]
    fn identity_layer_passes_through() {
        let mut layer = DenseLayer::zeros(3, 3, Activation::Identity);
        for i in 0..3 {
            layer.w.set(i, i, 1.0);
        }
        let x = Tensor2::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.0, -0.25]]);
        let (y, _) = layer.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn relu_zeroes_negatives_and_their_gradient() {
        let mut layer = DenseLayer::zeros(2, 2, Activation::Relu);
        layer.w.set(0, 0, 1.0);
        layer.w.set(1, 1, 1.0);
        let x = Tensor2::row_vector(&[-1.0, 2.0]);
        let (y, cache) = layer.forward(&x).unwrap();
        assert_eq!(y.row(0), &[0.0, 2.0]);
        let mut grad = layer.zero_grad();
        let gx = layer.backward(&cache, &Tensor2::row_vector(&[1.0, 1.0]), &mut grad);
        assert_eq!(gx.row(0), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let layer = DenseLayer::zeros(3, 2, Activation::Identity);
        let x = Tensor2::row_vector(&[1.0, 2.0]);
        assert!(layer.forward(&x).is_err());
    }

    /// Scalar loss used by the gradient checks: weighted sum of outputs.
    fn probe_loss(out: &[f64], probe: &[f64]) -> f64 {
        out.iter().zip(probe).map(|(o, p)| o * p).sum()
    }

    #[test]
    fn dense_gradients_match_finite_differences() {
        let mut rng = rng_from(&[11]);
        for act in [Activation::Identity, Activation::Relu, Activation::Tanh] {
            for trial in 0..5 {
                let (ind, outd, rows) = (
                    rng.random_range(1..5usize),
                    rng.random_range(1..5usize),
                    rng.random_range(1..4usize),
                );
                let layer = DenseLayer::new_glorot(ind, outd, act, &mut rng);
                let x = rand_tensor(rows, ind, &mut rng);
                let probe: Vec<f64> = (0..rows * outd).map(|_| rng.random_range(-1.0..1.0)).collect();

                let (y, cache) = layer.forward(&x).unwrap();
                let gy = Tensor2::from_vec(rows, outd, probe.clone());
                let mut grad = layer.zero_grad();
                let gx = layer.backward(&cache, &gy, &mut grad);

                // Parameters: flatten [w, b].
                let mut p0: Vec<f64> = layer.w.data().to_vec();
                p0.extend_from_slice(&layer.b);
                let mut analytic: Vec<f64> = grad.w.data().to_vec();
                analytic.extend_from_slice(&grad.b);
                let eval = |p: &[f64]| {
                    let mut l = layer.clone();
                    l.w.data_mut().copy_from_slice(&p[..ind * outd]);
                    l.b.copy_from_slice(&p[ind * outd..]);
                    let (y, _) = l.forward(&x).unwrap();
                    probe_loss(y.data(), &probe)
                };
                fdcheck::check_gradient(&p0, &analytic, eval, fdcheck::DEFAULT_STEP, fdcheck::DEFAULT_TOL)
                    .unwrap_or_else(|e| panic!("{act:?} trial {trial} params: {e}"));

                // Inputs.
                let eval_x = |xs: &[f64]| {
                    let xt = Tensor2::from_vec(rows, ind, xs.to_vec());
                    let (y, _) = layer.forward(&xt).unwrap();
                    probe_loss(y.data(), &probe)
                };
                fdcheck::check_gradient(
                    &x.data().to_vec(),
                    &gx.data().to_vec(),
                    eval_x,
                    fdcheck::DEFAULT_STEP,
                    fdcheck::DEFAULT_TOL,
                )
                .unwrap_or_else(|e| panic!("{act:?} trial {trial} inputs: {e}"));

                let _ = y;
            }
        }
    }

    #[test]
    fn singleton_aggregation_collapses() {
        let agg = AggregationBlock::new(3);
        let x = Tensor2::row_vector(&[0.7, -1.2, 0.0]);
        let (out, _) = agg.forward(&x, &[2.5]).unwrap();
        for j in 0..3 {
            let v = x.get(0, j);
            assert!((out[j] - v).abs() < 1e-12, "mean");
            assert!((out[3 + j] - v).abs() < 1e-12, "max");
            assert!((out[6 + j] - v).abs() < 1e-12, "lse of a single instance is exact");
            assert!((out[9 + j] - (v - agg.theta_c[j]).abs()).abs() < 1e-12, "pnorm");
        }
    }

    #[test]
    fn lse_of_two_zeros_is_zero() {
        let agg = AggregationBlock::new(1); // theta_r starts at 1
        let x = Tensor2::from_rows(&[vec![0.0], vec![0.0]]);
        let (out, _) = agg.forward(&x, &[1.0, 1.0]).unwrap();
        assert!((out[2]).abs() < 1e-12);
    }

    #[test]
    fn pnorm_rms_hand_value() {
        let agg = AggregationBlock::new(1); // theta_p starts at 2, theta_c at 0
        let x = Tensor2::from_rows(&[vec![3.0], vec![4.0]]);
        let (out, _) = agg.forward(&x, &[1.0, 1.0]).unwrap();
        assert!((out[3] - (25.0f64 / 2.0).sqrt()).abs() < 1e-12);
        assert!((out[3] - 3.5355339059327378).abs() < 1e-12);
    }

    #[test]
    fn empty_bag_is_rejected() {
        let agg = AggregationBlock::new(2);
        let x = Tensor2::zeros(0, 2);
        assert!(matches!(agg.forward(&x, &[]), Err(Error::EmptyBag)));
    }

    #[test]
    fn lse_approaches_max_for_large_theta() {
        let mut agg = AggregationBlock::new(1);
        agg.rho_r[0] = softplus_inv(50.0);
        let k = 6;
        let x = Tensor2::from_rows(&(0..k).map(|i| vec![i as f64 * 0.3 - 1.0]).collect::<Vec<_>>());
        let w = vec![1.0; k];
        let (out, _) = agg.forward(&x, &w).unwrap();
        let bound = (k as f64).ln() / 50.0;
        assert!((out[2] - out[1]).abs() <= bound + 1e-12);
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let agg = AggregationBlock::new(1);
        let x = Tensor2::from_rows(&[vec![0.5], vec![0.5], vec![0.1]]);
        let (out, cache) = agg.forward(&x, &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(out[1], 0.5);
        let mut grad = agg.zero_grad();
        let mut gout = vec![0.0; 4];
        gout[1] = 1.0;
        let gx = agg.backward(&cache, &gout, &mut grad);
        assert_eq!(gx.get(0, 0), 1.0);
        assert_eq!(gx.get(1, 0), 0.0);
    }

    #[test]
    fn aggregation_gradients_match_finite_differences() {
        let mut rng = rng_from(&[23]);
        for trial in 0..8 {
            let m = rng.random_range(1..4usize);
            let k = rng.random_range(1..5usize);
            let mut agg = AggregationBlock::new(m);
            for j in 0..m {
                agg.rho_r[j] = rng.random_range(-0.5..1.0);
                agg.rho_p[j] = rng.random_range(-0.5..1.0);
                agg.theta_c[j] = rng.random_range(-0.5..0.5);
            }
            let x = rand_tensor(k, m, &mut rng);
            let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..3.0)).collect();
            let probe: Vec<f64> = (0..4 * m).map(|_| rng.random_range(-1.0..1.0)).collect();

            let (_, cache) = agg.forward(&x, &w).unwrap();
            let mut grad = agg.zero_grad();
            let gx = agg.backward(&cache, &probe, &mut grad);

            // Instance gradients.
            let eval_x = |xs: &[f64]| {
                let xt = Tensor2::from_vec(k, m, xs.to_vec());
                let (out, _) = agg.forward(&xt, &w).unwrap();
                probe_loss(&out, &probe)
            };
            fdcheck::check_gradient(
                &x.data().to_vec(),
                &gx.data().to_vec(),
                eval_x,
                fdcheck::DEFAULT_STEP,
                fdcheck::DEFAULT_TOL,
            )
            .unwrap_or_else(|e| panic!("trial {trial} instances: {e}"));

            // Parameter gradients: [rho_r, rho_p, theta_c].
            let mut p0 = agg.rho_r.clone();
            p0.extend_from_slice(&agg.rho_p);
            p0.extend_from_slice(&agg.theta_c);
            let mut analytic = grad.rho_r.clone();
            analytic.extend_from_slice(&grad.rho_p);
            analytic.extend_from_slice(&grad.theta_c);
            let eval_p = |p: &[f64]| {
                let mut a = agg.clone();
                a.rho_r.copy_from_slice(&p[..m]);
                a.rho_p.copy_from_slice(&p[m..2 * m]);
                a.theta_c.copy_from_slice(&p[2 * m..]);
                let (out, _) = a.forward(&x, &w).unwrap();
                probe_loss(&out, &probe)
            };
            fdcheck::check_gradient(&p0, &analytic, eval_p, fdcheck::DEFAULT_STEP, fdcheck::DEFAULT_TOL)
                .unwrap_or_else(|e| panic!("trial {trial} params: {e}"));
        }
    }

    #[test]
    fn weights_receive_no_gradient() {
        // The contract: weights are constants. Verified here by checking that
        // the backward pass exposes no weight gradient slot at all, and that
        // scaling all weights uniformly leaves the weighted channels fixed.
        let agg = AggregationBlock::new(2);
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let (a, _) = agg.forward(&x, &[1.0, 2.0]).unwrap();
        let (b, _) = agg.forward(&x, &[2.0, 4.0]).unwrap();
        for (va, vb) in a.iter().zip(&b) {
            assert!((va - vb).abs() < 1e-12);
        }
    }

    #[test]
    fn duplicated_instance_with_halved_weight_preserves_weighted_channels() {
        // The weighted mean divides by the actual weight sum, so splitting
        // one instance into two half-weight copies is a no-op for the
        // weighted channels.
        let agg = AggregationBlock::new(2);
        let x = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0]]);
        let (a, _) = agg.forward(&x, &[1.0, 2.0]).unwrap();
        let dup = Tensor2::from_rows(&[vec![1.0, 2.0], vec![3.0, -1.0], vec![3.0, -1.0]]);
        let (b, _) = agg.forward(&dup, &[1.0, 1.0, 1.0]).unwrap();
        let m = 2;
        for j in 0..m {
            assert!((a[j] - b[j]).abs() < 1e-9, "weighted mean channel {j}");
            assert!((a[3 * m + j] - b[3 * m + j]).abs() < 1e-9, "pnorm channel {j}");
        }
    }

    #[test]
    fn bce_confident_correct_prediction_has_tiny_loss() {
        let logits = Tensor2::row_vector(&[-20.0, 20.0]);
        let (loss, _) = weighted_bce(&logits, &[1], 0.9, 0.1).unwrap();
        assert!(loss < 1e-8);
    }

    #[test]
    fn bce_hand_value() {
        // One sample, y = 1, p(y=1) = e^-1: loss = omega1 * 1.
        // softmax(z0, z1) with z1 - z0 = ln(e^-1 / (1 - e^-1)) gives p1 = e^-1.
        let p1: f64 = (-1.0f64).exp();
        let z1 = (p1 / (1.0 - p1)).ln();
        let logits = Tensor2::row_vector(&[0.0, z1]);
        let (loss, _) = weighted_bce(&logits, &[1], 0.9, 0.1).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);
    }

    #[test]
    fn bce_gradients_match_finite_differences() {
        let mut rng = rng_from(&[31]);
        for _ in 0..5 {
            let n = rng.random_range(1..6usize);
            let logits = rand_tensor(n, 2, &mut rng);
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
            let (_, grad) = weighted_bce(&logits, &labels, 0.9, 0.1).unwrap();
            let eval = |z: &[f64]| {
                let t = Tensor2::from_vec(n, 2, z.to_vec());
                weighted_bce(&t, &labels, 0.9, 0.1).unwrap().0
            };
            fdcheck::check_gradient(
                &logits.data().to_vec(),
                &grad.data().to_vec(),
                eval,
                fdcheck::DEFAULT_STEP,
                fdcheck::DEFAULT_TOL,
            )
            .unwrap();
        }
    }

    #[test]
    fn glorot_variance_is_calibrated() {
        let mut rng = rng_from(&[47]);
        let w = glorot_normal(1000, 1000, &mut rng);
        let n = w.data().len() as f64;
        let mean: f64 = w.data().iter().sum::<f64>() / n;
        let var: f64 = w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let expected = 2.0 / 2000.0;
        assert!((var - expected).abs() < 0.1 * expected, "var {var} vs {expected}");
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters() {
        let mut adam = AdamState::new(AdamConfig::default(), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        let orig = p.clone();
        adam.step(&mut [&mut p], &[&[0.0, 0.0, 0.0]]);
        assert_eq!(p, orig);
    }

    #[test]
    fn adam_descends_on_square() {
        let mut adam = AdamState::new(AdamConfig::default(), &[1]);
        let mut w = vec![1.0];
        let f = |w: f64| w * w;
        let before = f(w[0]);
        adam.step(&mut [&mut w], &[&[2.0 * 1.0]]);
        assert!(f(w[0]) < before);
    }
}
