//! From-scratch softplus MLP for per-link distance fields.
//!
//! The network maps `(p_x, p_y, p_z, theta, cos phi, sin phi)` to a scalar
//! distance estimate. Training minimizes a distance term plus an Eikonal
//! term on the spatial gradient and an overestimation penalty. The Eikonal
//! term needs parameter derivatives of `|grad_p|`, which are computed by a
//! reverse sweep over a forward pass carried out in dual numbers with three
//! tangent directions (one per spatial coordinate).

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{compute_error_metrics, ErrorMetrics, TrainingSample};
use crate::kinematics::{LinkConfig, LinkGeometry};
use crate::rng::stream;
use crate::{Error, Result};

/// Network input dimension: point (3) + theta + cos/sin phi.
pub const INPUT_DIM: usize = 6;

/// MLP weights: softplus hidden layers, linear output.
///
/// `weights[l]` is row-major with shape `dims[l+1] x dims[l]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layer_dims: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpParams {
    /// Zero-initialized network of the given shape.
    pub fn zeros(layer_dims: &[usize]) -> Self {
        let weights = layer_dims
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_dims[1..].iter().map(|&d| vec![0.0; d]).collect();
        Self { layer_dims: layer_dims.to_vec(), weights, biases }
    }

    /// Glorot-style init: uniform in `[-sqrt(6/(fan_in+fan_out)), +...]`.
    pub fn glorot<R: Rng>(layer_dims: &[usize], rng: &mut R) -> Self {
        let mut p = Self::zeros(layer_dims);
        for (l, w) in p.weights.iter_mut().enumerate() {
            let bound = (6.0 / (layer_dims[l] + layer_dims[l + 1]) as f64).sqrt();
            for v in w.iter_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    /// Hidden layer count / width shorthand: `n_hidden` layers of `width`.
    pub fn shape(n_hidden: usize, width: usize) -> Vec<usize> {
        let mut dims = vec![INPUT_DIM];
        dims.extend(std::iter::repeat(width).take(n_hidden));
        dims.push(1);
        dims
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn from_flat(&self, flat: &[f64]) -> Self {
        let mut p = Self::zeros(&self.layer_dims);
        let mut idx = 0;
        for l in 0..p.n_layers() {
            let wlen = p.weights[l].len();
            p.weights[l].copy_from_slice(&flat[idx..idx + wlen]);
            idx += wlen;
            let blen = p.biases[l].len();
            p.biases[l].copy_from_slice(&flat[idx..idx + blen]);
            idx += blen;
        }
        p
    }

    fn scale(&mut self, factor: f64) {
        for w in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in w {
                *v *= factor;
            }
        }
    }

    fn zip_apply(&mut self, other: &MlpParams, mut f: impl FnMut(&mut f64, f64)) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                f(x, *y);
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                f(x, *y);
            }
        }
    }

    /// Product of layer spectral-norm upper bounds (Frobenius norms), a
    /// Lipschitz bound on the network as a function of its input.
    pub fn lipschitz_bound(&self) -> f64 {
        self.weights
            .iter()
            .map(|w| w.iter().map(|v| v * v).sum::<f64>().sqrt())
            .product()
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the softplus derivative.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Encode `(p, q)` as the 6-dim network input. The `cos/sin` encoding of
/// `phi` removes the wrap-around discontinuity at `phi = +-pi`.
pub fn encode_input(p: &Vector3<f64>, q: &LinkConfig) -> [f64; INPUT_DIM] {
    [p.x, p.y, p.z, q.theta, q.phi.cos(), q.phi.sin()]
}

fn check_input(params: &MlpParams, input: &[f64]) -> Result<()> {
    if input.len() != params.layer_dims[0] {
        return Err(Error::DimensionMismatch {
            expected: params.layer_dims[0],
            got: input.len(),
        });
    }
    Ok(())
}

/// Widest layer evaluable without heap allocation in the hot path.
const FORWARD_STACK_WIDTH: usize = 64;

/// Scalar network output for a raw input vector.
pub fn mlp_forward(params: &MlpParams, input: &[f64]) -> Result<f64> {
    check_input(params, input)?;
    if params.layer_dims.iter().all(|&d| d <= FORWARD_STACK_WIDTH) {
        // allocation-free path: this sits inside the controller's rollout
        // loop and runs millions of times per episode
        let mut h = [0.0; FORWARD_STACK_WIDTH];
        let mut next = [0.0; FORWARD_STACK_WIDTH];
        h[..input.len()].copy_from_slice(input);
        let n = params.n_layers();
        for l in 0..n {
            let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
            for i in 0..rows {
                let row = &params.weights[l][i * cols..(i + 1) * cols];
                let mut z = params.biases[l][i];
                for (w, x) in row.iter().zip(&h[..cols]) {
                    z += w * x;
                }
                next[i] = if l + 1 < n { softplus(z) } else { z };
            }
            std::mem::swap(&mut h, &mut next);
        }
        return Ok(h[0]);
    }
    let n = params.n_layers();
    let mut h = input.to_vec();
    let mut next = Vec::new();
    for l in 0..n {
        let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
        next.clear();
        next.resize(rows, 0.0);
        for i in 0..rows {
            let row = &params.weights[l][i * cols..(i + 1) * cols];
            let mut z = params.biases[l][i];
            for (w, x) in row.iter().zip(&h) {
                z += w * x;
            }
            next[i] = if l + 1 < n { softplus(z) } else { z };
        }
        std::mem::swap(&mut h, &mut next);
    }
    Ok(h[0])
}

/// Exact gradient of the network output with respect to the first three
/// input coordinates (reverse sweep).
pub fn mlp_input_gradient(params: &MlpParams, input: &[f64]) -> Result<Vector3<f64>> {
    check_input(params, input)?;
    let n = params.n_layers();
    // forward, storing pre-activations
    let mut acts: Vec<Vec<f64>> = vec![input.to_vec()];
    let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n);
    for l in 0..n {
        let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
        let h = &acts[l];
        let mut z = vec![0.0; rows];
        for i in 0..rows {
            let row = &params.weights[l][i * cols..(i + 1) * cols];
            let mut acc = params.biases[l][i];
            for (w, x) in row.iter().zip(h) {
                acc += w * x;
            }
            z[i] = acc;
        }
        let a = if l + 1 < n { z.iter().map(|&v| softplus(v)).collect() } else { z.clone() };
        pre.push(z);
        acts.push(a);
    }
    // reverse sweep
    let mut adj = vec![1.0];
    for l in (0..n).rev() {
        let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
        let zbar: Vec<f64> = if l + 1 < n {
            adj.iter().zip(&pre[l]).map(|(a, &z)| a * sigmoid(z)).collect()
        } else {
            adj.clone()
        };
        let mut hbar = vec![0.0; cols];
        for i in 0..rows {
            let row = &params.weights[l][i * cols..(i + 1) * cols];
            for (j, w) in row.iter().enumerate() {
                hbar[j] += w * zbar[i];
            }
        }
        adj = hbar;
    }
    Ok(Vector3::new(adj[0], adj[1], adj[2]))
}

/// Scalar with three tangent components, for spatial-gradient propagation.
#[derive(Debug, Clone, Copy)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    const ZERO: Dual3 = Dual3 { v: 0.0, d: [0.0; 3] };
}

/// Training hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_eikonal: f64,
    pub lambda_overestimation: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.003,
            batch_size: 256,
            epochs: 100,
            lambda_eikonal: 0.05,
            lambda_overestimation: 2.0,
            seed: 0,
        }
    }
}

/// Batch loss and full parameter gradient.
///
/// Loss per sample: `(g - d)^2 + lambda_E (|grad_p g| - 1)^2 +
/// lambda_O max(0, g - d)^2`, averaged over the batch. The parameter
/// gradient of the Eikonal term is obtained by reverse-sweeping the dual
/// forward pass, which carries the spatial tangents through every layer.
pub fn loss_and_param_gradients(
    params: &MlpParams,
    batch: &[TrainingSample],
    lambda_eikonal: f64,
    lambda_overestimation: f64,
) -> Result<(f64, MlpParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("loss needs a non-empty batch"));
    }
    let mut grads = MlpParams::zeros(&params.layer_dims);
    let mut loss = 0.0;
    let mut scratch = DualScratch::new(params);
    for sample in batch {
        loss += accumulate_sample(params, sample, lambda_eikonal, lambda_overestimation, &mut grads, &mut scratch);
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((loss * inv, grads))
}

/// Reusable buffers for the dual forward/reverse sweep.
struct DualScratch {
    acts: Vec<Vec<Dual3>>,
    pre: Vec<Vec<Dual3>>,
}

impl DualScratch {
    fn new(params: &MlpParams) -> Self {
        let acts = params.layer_dims.iter().map(|&d| vec![Dual3::ZERO; d]).collect();
        let pre = params.layer_dims[1..].iter().map(|&d| vec![Dual3::ZERO; d]).collect();
        Self { acts, pre }
    }
}

/// Adds one sample's unnormalized loss gradient into `grads`, returns the
/// sample loss.
fn accumulate_sample(
    params: &MlpParams,
    sample: &TrainingSample,
    lambda_eikonal: f64,
    lambda_overestimation: f64,
    grads: &mut MlpParams,
    scratch: &mut DualScratch,
) -> f64 {
    let n = params.n_layers();
    let input = encode_input(&sample.point(), &sample.config());
    // dual forward pass: tangents seeded on the three point coordinates
    for (i, &x) in input.iter().enumerate() {
        let mut d = [0.0; 3];
        if i < 3 {
            d[i] = 1.0;
        }
        scratch.acts[0][i] = Dual3 { v: x, d };
    }
    for l in 0..n {
        let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
        let (head, tail) = scratch.acts.split_at_mut(l + 1);
        let h = &head[l];
        let out = &mut tail[0];
        for i in 0..rows {
            let row = &params.weights[l][i * cols..(i + 1) * cols];
            let mut z = Dual3 { v: params.biases[l][i], d: [0.0; 3] };
            for (w, x) in row.iter().zip(h.iter()) {
                z.v += w * x.v;
                for k in 0..3 {
                    z.d[k] += w * x.d[k];
                }
            }
            scratch.pre[l][i] = z;
            out[i] = if l + 1 < n {
                let s = sigmoid(z.v);
                Dual3 { v: softplus(z.v), d: [s * z.d[0], s * z.d[1], s * z.d[2]] }
            } else {
                z
            };
        }
    }
    let y = scratch.acts[n][0];
    let residual = y.v - sample.d;
    let grad_norm = (y.d[0] * y.d[0] + y.d[1] * y.d[1] + y.d[2] * y.d[2]).sqrt();
    let over = residual.max(0.0);
    let loss = residual * residual
        + lambda_eikonal * (grad_norm - 1.0) * (grad_norm - 1.0)
        + lambda_overestimation * over * over;

    // adjoint seed on the dual output
    let mut ybar = vec![Dual3 {
        v: 2.0 * residual + 2.0 * lambda_overestimation * over,
        d: [0.0; 3],
    }];
    if grad_norm > 0.0 {
        let c = 2.0 * lambda_eikonal * (grad_norm - 1.0) / grad_norm;
        for k in 0..3 {
            ybar[0].d[k] = c * y.d[k];
        }
    }
    // reverse sweep in dual space
    for l in (0..n).rev() {
        let (rows, cols) = (params.layer_dims[l + 1], params.layer_dims[l]);
        // through the activation
        let zbar: Vec<Dual3> = if l + 1 < n {
            (0..rows)
                .map(|i| {
                    let z = scratch.pre[l][i];
                    let s = sigmoid(z.v);
                    let sp = s * (1.0 - s);
                    let hb = ybar[i];
                    let mut v = hb.v * s;
                    for k in 0..3 {
                        v += hb.d[k] * sp * z.d[k];
                    }
                    Dual3 { v, d: [hb.d[0] * s, hb.d[1] * s, hb.d[2] * s] }
                })
                .collect()
        } else {
            ybar.clone()
        };
        // through the linear map: accumulate parameter grads, push adjoint
        let h = &scratch.acts[l];
        let mut hbar = vec![Dual3::ZERO; cols];
        for i in 0..rows {
            let zb = zbar[i];
            grads.biases[l][i] += zb.v;
            let wrow = &params.weights[l][i * cols..(i + 1) * cols];
            let grow = &mut grads.weights[l][i * cols..(i + 1) * cols];
            for j in 0..cols {
                let mut g = zb.v * h[j].v;
                for k in 0..3 {
                    g += zb.d[k] * h[j].d[k];
                }
                grow[j] += g;
                let w = wrow[j];
                hbar[j].v += w * zb.v;
                for k in 0..3 {
                    hbar[j].d[k] += w * zb.d[k];
                }
            }
        }
        ybar = hbar;
    }
    loss
}

/// Adam optimizer state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: MlpParams,
    pub v: MlpParams,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: MlpParams::zeros(&params.layer_dims),
            v: MlpParams::zeros(&params.layer_dims),
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut MlpParams, grads: &MlpParams, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powf(t);
    let c2 = 1.0 - b2.powf(t);
    let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
        }
    };
    for l in 0..params.n_layers() {
        update(
            &mut params.weights[l],
            &grads.weights[l],
            &mut state.m.weights[l],
            &mut state.v.weights[l],
        );
        update(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.m.biases[l],
            &mut state.v.biases[l],
        );
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: ErrorMetrics,
}

/// Batch-parallel chunk size; fixed so reductions have a canonical shape
/// regardless of thread count.
const GRAD_CHUNK: usize = 32;

fn batch_loss_and_grads(
    params: &MlpParams,
    batch: &[TrainingSample],
    lambda_eikonal: f64,
    lambda_overestimation: f64,
) -> (f64, MlpParams) {
    let partials: Vec<(f64, MlpParams)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| {
            let mut grads = MlpParams::zeros(&params.layer_dims);
            let mut scratch = DualScratch::new(params);
            let mut loss = 0.0;
            for s in chunk {
                loss += accumulate_sample(
                    params,
                    s,
                    lambda_eikonal,
                    lambda_overestimation,
                    &mut grads,
                    &mut scratch,
                );
            }
            (loss, grads)
        })
        .collect();
    let mut total = MlpParams::zeros(&params.layer_dims);
    let mut loss = 0.0;
    for (l, g) in partials {
        loss += l;
        total.zip_apply(&g, |x, y| *x += y);
    }
    let inv = 1.0 / batch.len() as f64;
    total.scale(inv);
    (loss * inv, total)
}

/// Predictions for a whole dataset (parallel, order-preserving).
pub fn predict_all(params: &MlpParams, samples: &[TrainingSample]) -> Vec<f64> {
    samples
        .par_iter()
        .map(|s| mlp_forward(params, &encode_input(&s.point(), &s.config())).unwrap())
        .collect()
}

/// Validation metrics of a parameter set against a labelled dataset.
pub fn evaluate(params: &MlpParams, samples: &[TrainingSample]) -> Result<ErrorMetrics> {
    let preds = predict_all(params, samples);
    let targets: Vec<f64> = samples.iter().map(|s| s.d).collect();
    compute_error_metrics(&preds, &targets)
}

/// Full training loop: seeded shuffles, mini-batch Adam, per-epoch
/// validation metrics. Deterministic for a fixed seed and any thread count.
pub fn train(
    dataset: &[TrainingSample],
    val_dataset: &[TrainingSample],
    layer_dims: &[usize],
    cfg: &TrainConfig,
) -> Result<(MlpParams, Vec<EpochStats>)> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("training dataset is empty"));
    }
    let mut init_rng = stream(cfg.seed, &[0xA0]);
    let mut params = MlpParams::glorot(layer_dims, &mut init_rng);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut batch_buf: Vec<TrainingSample> = Vec::with_capacity(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng = stream(cfg.seed, &[0xB0, epoch as u64]);
        shuffle(&mut order, &mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut n_batches = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            batch_buf.clear();
            batch_buf.extend(batch_idx.iter().map(|&i| dataset[i].clone()));
            let (loss, grads) = batch_loss_and_grads(
                &params,
                &batch_buf,
                cfg.lambda_eikonal,
                cfg.lambda_overestimation,
            );
            adam_step(&mut params, &grads, &mut adam, cfg.learning_rate);
            epoch_loss += loss;
            n_batches += 1;
        }
        let val = if val_dataset.is_empty() {
            ErrorMetrics { mae: 0.0, rmse: 0.0, moe: 0.0 }
        } else {
            evaluate(&params, val_dataset)?
        };
        history.push(EpochStats { epoch, train_loss: epoch_loss / n_batches as f64, val });
    }
    Ok((params, history))
}

/// Fisher–Yates with our deterministic stream.
fn shuffle<R: Rng>(order: &mut [usize], rng: &mut R) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Serialized model file: parameters plus the geometry and encoding they
/// were trained for.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub link_geometry: LinkGeometry,
    pub input_encoding: String,
    pub training_meta: serde_json::Value,
}

impl ModelFile {
    pub fn new(params: &MlpParams, geometry: LinkGeometry, meta: serde_json::Value) -> Self {
        Self {
            layer_dims: params.layer_dims.clone(),
            activation: "softplus".to_string(),
            weights: params.weights.clone(),
            biases: params.biases.clone(),
            link_geometry: geometry,
            input_encoding: "theta_cos_sin".to_string(),
            training_meta: meta,
        }
    }

    pub fn params(&self) -> MlpParams {
        MlpParams {
            layer_dims: self.layer_dims.clone(),
            weights: self.weights.clone(),
            biases: self.biases.clone(),
        }
    }

    pub fn save<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let data = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&data)?)
    }
}
