//! Feed-forward critic network `T(θ, y)`.
//!
//! The network consumes the concatenation `[θ, y]` and produces a single
//! scalar. Parameters live in one flat buffer so that gradients, Adam moments
//! and snapshots share a single layout: for every layer, the weight matrix
//! (row-major, `inputs × outputs`) followed by the bias vector.
//!
//! Hidden layers use a rectifier whose subgradient at zero is zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use wide::f64x8;

use crate::error::{check_len, Error, Result};

/// Nonlinearity applied after each hidden affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub theta_dim: usize,
    pub data_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
}

impl NetworkConfig {
    pub fn new(theta_dim: usize, data_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            theta_dim,
            data_dim,
            hidden,
            activation: Activation::Relu,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.theta_dim + self.data_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.theta_dim == 0 || self.data_dim == 0 {
            return Err(Error::Config(format!(
                "network input dims must be >= 1 (theta {}, data {})",
                self.theta_dim, self.data_dim
            )));
        }
        if self.hidden.is_empty() {
            return Err(Error::Config("network needs at least one hidden layer".into()));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::Config(format!(
                "hidden layer sizes must be >= 1, got {:?}",
                self.hidden
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Layer {
    inputs: usize,
    outputs: usize,
    /// Offset of the weight block in the flat parameter buffer.
    weights: usize,
    /// Offset of the bias block.
    biases: usize,
}

impl Layer {
    fn weight_range(&self) -> std::ops::Range<usize> {
        self.weights..self.weights + self.inputs * self.outputs
    }

    fn bias_range(&self) -> std::ops::Range<usize> {
        self.biases..self.biases + self.outputs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
    params: Vec<f64>,
}

/// Reusable per-row buffers for the forward and backward passes.
#[derive(Debug, Clone)]
pub struct Scratch {
    /// `acts[0]` is the input; `acts[l + 1]` the (post-activation) output of layer `l`.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
    input_grad: Vec<f64>,
}

impl Network {
    /// Builds a network with fan-in scaled uniform weights
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` and zero biases.
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut widths = Vec::with_capacity(config.hidden.len() + 2);
        widths.push(config.input_dim());
        widths.extend_from_slice(&config.hidden);
        widths.push(1);

        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            let weights = offset;
            let biases = weights + inputs * outputs;
            offset = biases + outputs;
            layers.push(Layer {
                inputs,
                outputs,
                weights,
                biases,
            });
        }

        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = vec![0.0; offset];
        for layer in &layers {
            let bound = init_bound(layer.inputs);
            for w in &mut params[layer.weight_range()] {
                *w = rng.random_range(-bound..bound);
            }
        }

        Ok(Self {
            config,
            layers,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_len("network parameters", self.params.len(), params.len())?;
        self.params.copy_from_slice(params);
        Ok(())
    }

    /// `(inputs, outputs)` of every affine layer, input side first.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| (l.inputs, l.outputs)).collect()
    }

    /// Row-major `inputs × outputs` weight block of layer `index`.
    pub fn weights(&self, index: usize) -> &[f64] {
        &self.params[self.layers[index].weight_range()]
    }

    pub fn biases(&self, index: usize) -> &[f64] {
        &self.params[self.layers[index].bias_range()]
    }

    pub fn weights_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layers[index].weight_range();
        &mut self.params[range]
    }

    pub fn biases_mut(&mut self, index: usize) -> &mut [f64] {
        let range = self.layers[index].bias_range();
        &mut self.params[range]
    }

    pub fn scratch(&self) -> Scratch {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(vec![0.0; self.config.input_dim()]);
        for layer in &self.layers {
            acts.push(vec![0.0; layer.outputs]);
        }
        let widest = self
            .layers
            .iter()
            .map(|l| l.inputs.max(l.outputs))
            .max()
            .unwrap_or(1);
        Scratch {
            acts,
            delta: vec![0.0; widest],
            delta_next: vec![0.0; widest],
            input_grad: vec![0.0; self.config.input_dim()],
        }
    }

    fn check_inputs(&self, theta: &[f64], y: &[f64]) -> Result<()> {
        check_len("critic theta input", self.config.theta_dim, theta.len())?;
        check_len("critic data input", self.config.data_dim, y.len())
    }

    /// Evaluates `T(θ, y)`.
    pub fn forward(&self, theta: &[f64], y: &[f64]) -> Result<f64> {
        self.check_inputs(theta, y)?;
        let mut scratch = self.scratch();
        Ok(self.forward_with(theta, y, &mut scratch))
    }

    /// Gradient of `T(θ, y)` with respect to every parameter, in the flat layout.
    pub fn backward_params(&self, theta: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(theta, y)?;
        let mut scratch = self.scratch();
        let mut grad = vec![0.0; self.params.len()];
        self.forward_with(theta, y, &mut scratch);
        self.backward_with(&mut scratch, 1.0, &mut grad, false);
        Ok(grad)
    }

    /// Gradient of `T(θ, y)` with respect to the data input `y`.
    pub fn backward_input_y(&self, theta: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_inputs(theta, y)?;
        let mut scratch = self.scratch();
        let mut grad = vec![0.0; self.params.len()];
        self.forward_with(theta, y, &mut scratch);
        self.backward_with(&mut scratch, 1.0, &mut grad, true);
        Ok(scratch.input_grad[self.config.theta_dim..].to_vec())
    }

    /// Unchecked forward pass; leaves the activations in `scratch` for a
    /// following [`Network::backward_with`].
    pub fn forward_with(&self, theta: &[f64], y: &[f64], scratch: &mut Scratch) -> f64 {
        let split = theta.len();
        scratch.acts[0][..split].copy_from_slice(theta);
        scratch.acts[0][split..].copy_from_slice(y);

        let last = self.layers.len() - 1;
        for (index, layer) in self.layers.iter().enumerate() {
            let (done, rest) = scratch.acts.split_at_mut(index + 1);
            let input = &done[index];
            let output = &mut rest[0];
            affine(
                input,
                &self.params[layer.weight_range()],
                &self.params[layer.bias_range()],
                output,
            );
            if index != last {
                for v in output.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
        }
        scratch.acts[self.layers.len()][0]
    }

    /// Accumulates `seed · ∂T/∂ψ` into `grad`. With `want_input`, also writes
    /// `seed · ∂T/∂[θ, y]` into the scratch input-gradient buffer
    /// (see [`Scratch::input_grad`]). Requires a preceding `forward_with`.
    pub fn backward_with(
        &self,
        scratch: &mut Scratch,
        seed: f64,
        grad: &mut [f64],
        want_input: bool,
    ) {
        scratch.delta[0] = seed;
        for index in (0..self.layers.len()).rev() {
            let layer = &self.layers[index];
            let input = &scratch.acts[index];
            let delta = &scratch.delta[..layer.outputs];

            for (g, d) in grad[layer.bias_range()].iter_mut().zip(delta) {
                *g += d;
            }
            let grad_w = &mut grad[layer.weight_range()];
            if layer.outputs == 1 {
                let d = delta[0];
                for (g, x) in grad_w.iter_mut().zip(input) {
                    *g += x * d;
                }
            } else {
                for (row, &x) in grad_w.chunks_exact_mut(layer.outputs).zip(input) {
                    if x == 0.0 {
                        continue;
                    }
                    for (g, d) in row.iter_mut().zip(delta) {
                        *g += x * d;
                    }
                }
            }

            if index == 0 && !want_input {
                break;
            }

            let weights = &self.params[layer.weight_range()];
            let target = if index == 0 {
                &mut scratch.input_grad[..]
            } else {
                &mut scratch.delta_next[..layer.inputs]
            };
            if layer.outputs == 1 {
                let d = delta[0];
                for (t, w) in target.iter_mut().zip(weights) {
                    *t = w * d;
                }
            } else {
                for (t, row) in target.iter_mut().zip(weights.chunks_exact(layer.outputs)) {
                    *t = dot(row, delta);
                }
            }
            if index > 0 {
                // Hidden input: apply the rectifier derivative (0 where the unit is off).
                for (t, &x) in scratch.delta_next[..layer.inputs].iter_mut().zip(input) {
                    if x <= 0.0 {
                        *t = 0.0;
                    }
                }
                std::mem::swap(&mut scratch.delta, &mut scratch.delta_next);
            }
        }
    }
}

impl Scratch {
    /// Gradient with respect to the concatenated input written by the most
    /// recent `backward_with(.., want_input = true)`.
    pub fn input_grad(&self) -> &[f64] {
        &self.input_grad
    }
}

/// Rows evaluated together by the blocked kernels.
pub const LANES: usize = 8;

/// One value per row of a block.
pub type Lane = f64x8;

/// Output units computed together in the blocked forward pass.
const TILE: usize = 8;

/// Buffers for evaluating [`LANES`] rows at once; unit-major, lane-minor.
#[derive(Debug, Clone)]
pub struct BlockScratch {
    acts: Vec<Vec<Lane>>,
    /// `deltas[l]`: gradient of the seeded output with respect to layer
    /// `l`'s pre-activation outputs.
    deltas: Vec<Vec<Lane>>,
    input_grad: Vec<Lane>,
}

impl BlockScratch {
    /// Loads `[θ, y]` into `lane`.
    pub fn set_row(&mut self, lane: usize, theta: &[f64], y: &[f64]) {
        for (slot, &v) in self.acts[0].iter_mut().zip(theta.iter().chain(y)) {
            slot.as_mut_array()[lane] = v;
        }
    }

    /// Zeroes `lane`'s input; used to pad a partial block.
    pub fn clear_row(&mut self, lane: usize) {
        for slot in self.acts[0].iter_mut() {
            slot.as_mut_array()[lane] = 0.0;
        }
    }

    /// Input gradients from the last `backward_block(.., want_input = true)`.
    pub fn input_grad(&self) -> &[Lane] {
        &self.input_grad
    }
}

impl Network {
    pub fn block_scratch(&self) -> BlockScratch {
        let zeros = |n| vec![Lane::ZERO; n];
        BlockScratch {
            acts: std::iter::once(self.config.input_dim())
                .chain(self.layers.iter().map(|l| l.outputs))
                .map(zeros)
                .collect(),
            deltas: self.layers.iter().map(|l| zeros(l.outputs)).collect(),
            input_grad: zeros(self.config.input_dim()),
        }
    }

    /// Forward pass over the rows loaded into `scratch`.
    pub fn forward_block(&self, scratch: &mut BlockScratch) -> Lane {
        let last = self.layers.len() - 1;
        for (index, layer) in self.layers.iter().enumerate() {
            let (done, rest) = scratch.acts.split_at_mut(index + 1);
            let input = &done[index];
            let output = &mut rest[0];
            let weights = &self.params[layer.weight_range()];
            let biases = &self.params[layer.bias_range()];
            let n_out = layer.outputs;
            let hidden = index != last;

            let tiles = n_out - n_out % TILE;
            for o in (0..tiles).step_by(TILE) {
                let mut acc = [Lane::ZERO; TILE];
                for (k, a) in acc.iter_mut().enumerate() {
                    *a = Lane::splat(biases[o + k]);
                }
                for (x, w) in input.iter().zip(weights.chunks_exact(n_out)) {
                    let w = &w[o..o + TILE];
                    for k in 0..TILE {
                        acc[k] = Lane::splat(w[k]).mul_add(*x, acc[k]);
                    }
                }
                for k in 0..TILE {
                    output[o + k] = if hidden { relu(acc[k]) } else { acc[k] };
                }
            }
            for o in tiles..n_out {
                // Interleaved partial sums break the dependency chain.
                let mut acc = [Lane::ZERO; 4];
                for (k, (x, w)) in input.iter().zip(weights.chunks_exact(n_out)).enumerate() {
                    acc[k % 4] = Lane::splat(w[o]).mul_add(*x, acc[k % 4]);
                }
                let sum = Lane::splat(biases[o]) + ((acc[0] + acc[1]) + (acc[2] + acc[3]));
                output[o] = if hidden { relu(sum) } else { sum };
            }
        }
        scratch.acts[self.layers.len()][0]
    }

    /// Back-propagates `seeds` through the block (after [`Network::forward_block`]),
    /// leaving per-layer deltas in `scratch` for [`Network::accumulate_block_grads`].
    /// With `want_input`, also writes per-lane `seeds[l] · ∂T_l/∂[θ, y]` into
    /// the scratch input gradient.
    pub fn backward_deltas(&self, scratch: &mut BlockScratch, seeds: Lane, want_input: bool) {
        let last = self.layers.len() - 1;
        scratch.deltas[last][0] = seeds;
        for index in (0..self.layers.len()).rev() {
            if index == 0 && !want_input {
                break;
            }
            let layer = &self.layers[index];
            let weights = &self.params[layer.weight_range()];
            let (below, rest) = scratch.deltas.split_at_mut(index);
            let delta = &rest[0];
            let target = if index == 0 {
                &mut scratch.input_grad[..]
            } else {
                &mut below[index - 1][..]
            };
            if layer.outputs == 1 {
                let d = delta[0];
                for (t, w) in target.iter_mut().zip(weights) {
                    *t = Lane::splat(*w) * d;
                }
            } else {
                backprop_rows(target, weights, delta);
            }
            if index > 0 {
                // Rectifier derivative: zero where the unit is off.
                for (t, x) in target.iter_mut().zip(&scratch.acts[index]) {
                    *t = x.simd_le(Lane::ZERO).bitselect(Lane::ZERO, *t);
                }
            }
        }
    }

    /// Accumulates the parameter gradients of every block lane-wise into
    /// `grad` (one [`Lane`] per parameter; see [`reduce_lanes`]). Visiting
    /// several blocks per sweep keeps the gradient traffic low.
    pub fn accumulate_block_grads(&self, blocks: &[BlockScratch], grad: &mut [Lane]) {
        for (index, layer) in self.layers.iter().enumerate() {
            let n_out = layer.outputs;
            for (o, g) in grad[layer.bias_range()].iter_mut().enumerate() {
                for b in blocks {
                    *g += b.deltas[index][o];
                }
            }
            let grad_w = &mut grad[layer.weight_range()];
            for (i, row) in grad_w.chunks_exact_mut(n_out).enumerate() {
                match blocks {
                    [b0, b1, b2, b3] => {
                        let x = [b0.acts[index][i], b1.acts[index][i], b2.acts[index][i], b3.acts[index][i]];
                        let d = [&b0.deltas[index][..n_out], &b1.deltas[index][..n_out], &b2.deltas[index][..n_out], &b3.deltas[index][..n_out]];
                        for (o, g) in row.iter_mut().enumerate() {
                            let mut acc = *g;
                            for k in 0..4 {
                                acc = x[k].mul_add(d[k][o], acc);
                            }
                            *g = acc;
                        }
                    }
                    _ => {
                        for b in blocks {
                            let x = b.acts[index][i];
                            if x == Lane::ZERO {
                                continue;
                            }
                            for (g, d) in row.iter_mut().zip(&b.deltas[index]) {
                                *g = x.mul_add(*d, *g);
                            }
                        }
                    }
                }
            }
        }
    }

    /// [`Network::backward_deltas`] followed by gradient accumulation for a
    /// single block.
    pub fn backward_block(
        &self,
        scratch: &mut BlockScratch,
        seeds: Lane,
        grad: &mut [Lane],
        want_input: bool,
    ) {
        self.backward_deltas(scratch, seeds, want_input);
        self.accumulate_block_grads(std::slice::from_ref(scratch), grad);
    }
}

/// Adds the lane sums of a blocked gradient into `out`.
pub fn reduce_lanes(grad: &[Lane], out: &mut [f64]) {
    for (o, g) in out.iter_mut().zip(grad) {
        *o += g.reduce_add();
    }
}

/// `target[i] = Σ_o W[i][o] · delta[o]`, four rows at a time.
fn backprop_rows(target: &mut [Lane], weights: &[f64], delta: &[Lane]) {
    let n_out = delta.len();
    let mut rows = weights.chunks_exact(n_out);
    let mut targets = target.chunks_exact_mut(4);
    for t in targets.by_ref() {
        let r: [&[f64]; 4] = std::array::from_fn(|_| rows.next().expect("row per target"));
        let mut acc = [Lane::ZERO; 4];
        for (o, d) in delta.iter().enumerate() {
            for k in 0..4 {
                acc[k] = Lane::splat(r[k][o]).mul_add(*d, acc[k]);
            }
        }
        t.copy_from_slice(&acc);
    }
    for (t, row) in targets.into_remainder().iter_mut().zip(rows) {
        let mut acc = [Lane::ZERO; 4];
        for (o, (w, d)) in row.iter().zip(delta).enumerate() {
            acc[o % 4] = Lane::splat(*w).mul_add(*d, acc[o % 4]);
        }
        *t = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    }
}

#[inline(always)]
fn relu(v: Lane) -> Lane {
    v.simd_lt(Lane::ZERO).bitselect(Lane::ZERO, v)
}

fn init_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Standard deviation of the initial weights of a layer with the given fan-in.
pub fn init_std(fan_in: usize) -> f64 {
    init_bound(fan_in) / 3f64.sqrt()
}

fn affine(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_out = b.len();
    if n_out == 1 {
        out[0] = b[0] + dot(x, w);
        return;
    }
    out.copy_from_slice(b);
    for (&xk, row) in x.iter().zip(w.chunks_exact(n_out)) {
        if xk == 0.0 {
            continue;
        }
        for (o, wkj) in out.iter_mut().zip(row) {
            *o += xk * wkj;
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Adam moment state, used here for gradient *ascent*:
/// `params += rate · m̂ / (sqrt(v̂) + ε)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self::with_hyper(len, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(len: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One ascent step. Parameters are left untouched if any gradient entry
    /// is non-finite.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], rate: f64) -> Result<()> {
        check_len("adam parameters", self.m.len(), params.len())?;
        check_len("adam gradient", self.m.len(), grads.len())?;
        if let Some((i, g)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient entry {g} at index {i}"
            )));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p += rate * m_hat / (v_hat.sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Step-wise multiplicative decay: `initial · multiplier^floor(epoch / period)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default = "one")]
    pub multiplier: f64,
    #[serde(default = "default_period")]
    pub period: usize,
}

fn one() -> f64 {
    1.0
}

fn default_period() -> usize {
    5000
}

impl LrSchedule {
    pub fn constant(rate: f64) -> Self {
        Self {
            initial: rate,
            multiplier: 1.0,
            period: default_period(),
        }
    }

    pub fn stepped(initial: f64, multiplier: f64, period: usize) -> Self {
        Self {
            initial,
            multiplier,
            period,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial >= 0.0) || !self.initial.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.initial
            )));
        }
        if !(self.multiplier > 0.0 && self.multiplier <= 1.0) {
            return Err(Error::Config(format!(
                "learning-rate multiplier must lie in (0, 1], got {}",
                self.multiplier
            )));
        }
        if self.period == 0 {
            return Err(Error::Config("learning-rate period must be >= 1".into()));
        }
        Ok(())
    }

    pub fn rate(&self, epoch: usize) -> f64 {
        let k = (epoch / self.period.max(1)) as i32;
        self.initial * self.multiplier.powi(k)
    }
}
