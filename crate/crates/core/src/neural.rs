//! Feed-forward network with reverse-mode gradients, the quantile training
//! loss, and an Adam optimizer.
//!
//! Parameters live in one flat buffer (per layer: column-major weight matrix,
//! then bias), which keeps the optimizer and checkpointing trivial.
//! Batched evaluation stores samples as columns.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DMatrixView};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Activation {
    Softplus { beta: f64 },
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus { beta } => {
                let bx = beta * x;
                (bx.max(0.0) + (-bx.abs()).exp().ln_1p()) / beta
            }
            Activation::Identity => x,
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus { beta } => {
                let bx = beta * x;
                if bx >= 0.0 {
                    1.0 / (1.0 + (-bx).exp())
                } else {
                    let e = bx.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

static GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    hidden: Activation,
    output: Activation,
    #[serde(skip, default = "next_generation")]
    generation: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.sizes == other.sizes
            && self.params == other.params
            && self.hidden == other.hidden
            && self.output == other.output
    }
}

impl Mlp {
    /// All-zero network with softplus(`beta`) hidden layers and output head.
    pub fn zeros(sizes: &[usize], beta: f64) -> Result<Self> {
        Self::with_activations(
            sizes,
            Activation::Softplus { beta },
            Activation::Softplus { beta },
        )
    }

    pub fn with_activations(
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::shape(format!("invalid layer sizes {sizes:?}")));
        }
        for act in [hidden, output] {
            if let Activation::Softplus { beta } = act {
                if !(beta > 0.0 && beta.is_finite()) {
                    return Err(Error::invalid("softplus beta must be > 0"));
                }
            }
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
            hidden,
            output,
            generation: next_generation(),
        })
    }

    /// Uniform Glorot initialization, biases zero.
    pub fn random<R: Rng + ?Sized>(sizes: &[usize], beta: f64, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(sizes, beta)?;
        net.randomize(rng);
        Ok(net)
    }

    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let mut off = 0;
        for w in self.sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut self.params[off..off + fan_in * fan_out] {
                *p = rng.gen_range(-limit..limit);
            }
            off += fan_in * fan_out;
            for p in &mut self.params[off..off + fan_out] {
                *p = 0.0;
            }
            off += fan_out;
        }
        self.generation = next_generation();
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least two layers")
    }

    pub fn hidden_activation(&self) -> Activation {
        self.hidden
    }

    pub fn output_activation(&self) -> Activation {
        self.output
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter access; invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params_mut().copy_from_slice(values);
        Ok(())
    }

    /// Rounds every parameter to the nearest `f32`, matching the checkpoint format.
    pub fn round_to_f32(&mut self) {
        for p in self.params_mut() {
            *p = *p as f32 as f64;
        }
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        // (weight offset, fan_in, fan_out)
        self.sizes.windows(2).scan(0usize, |off, w| {
            let here = *off;
            *off += w[0] * w[1] + w[1];
            Some((here, w[0], w[1]))
        })
    }

    fn activation_for(&self, layer: usize) -> Activation {
        if layer + 2 == self.sizes.len() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Evaluates a batch stored column-wise (`input_dim x batch`).
    pub fn forward_batch(&self, input: DMatrix<f64>) -> Result<BatchTape> {
        if input.nrows() != self.input_dim() {
            return Err(Error::shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.nrows()
            )));
        }
        let batch = input.ncols();
        let mut pre = Vec::with_capacity(self.sizes.len() - 1);
        let mut post: Vec<DMatrix<f64>> = Vec::with_capacity(self.sizes.len() - 1);
        for (l, (off, fan_in, fan_out)) in self.layers().enumerate() {
            let w =
                DMatrixView::from_slice(&self.params[off..off + fan_in * fan_out], fan_out, fan_in);
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let x = if l == 0 { &input } else { &post[l - 1] };
            let mut z = w * x;
            for c in 0..batch {
                for (r, bias) in b.iter().enumerate() {
                    z[(r, c)] += bias;
                }
            }
            let act = self.activation_for(l);
            let a = z.map(|v| act.apply(v));
            pre.push(z);
            post.push(a);
        }
        Ok(BatchTape {
            generation: self.generation,
            input,
            pre,
            post,
        })
    }

    /// Reverse pass. Returns flat parameter gradients (summed over the batch)
    /// and the input gradient (`input_dim x batch`).
    pub fn backward_batch(
        &self,
        tape: &BatchTape,
        output_grad: &DMatrix<f64>,
    ) -> Result<(Vec<f64>, DMatrix<f64>)> {
        if tape.generation != self.generation || tape.pre.len() + 1 != self.sizes.len() {
            return Err(Error::StaleTape);
        }
        let batch = tape.input.ncols();
        if output_grad.nrows() != self.output_dim() || output_grad.ncols() != batch {
            return Err(Error::shape("output gradient does not match the tape"));
        }
        let layers: Vec<(usize, usize, usize)> = self.layers().collect();
        let mut grads = vec![0.0; self.params.len()];
        let last = layers.len() - 1;
        let act = self.activation_for(last);
        let mut delta = output_grad.zip_map(&tape.pre[last], |g, z| g * act.derivative(z));
        for l in (0..layers.len()).rev() {
            let (off, fan_in, fan_out) = layers[l];
            let x = if l == 0 {
                &tape.input
            } else {
                &tape.post[l - 1]
            };
            let dw = &delta * x.transpose();
            grads[off..off + fan_in * fan_out].copy_from_slice(dw.as_slice());
            let gb = &mut grads[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            for c in 0..batch {
                for (r, g) in gb.iter_mut().enumerate() {
                    *g += delta[(r, c)];
                }
            }
            let w =
                DMatrixView::from_slice(&self.params[off..off + fan_in * fan_out], fan_out, fan_in);
            let dx = w.transpose() * &delta;
            if l == 0 {
                return Ok((grads, dx));
            }
            let act = self.activation_for(l - 1);
            delta = dx.zip_map(&tape.pre[l - 1], |g, z| g * act.derivative(z));
        }
        unreachable!("network has at least one layer")
    }

    /// Forward pass without keeping a tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        let tape = self.forward_batch(DMatrix::from_column_slice(input.len(), 1, input))?;
        Ok(tape.output().as_slice().to_vec())
    }
}

/// Intermediate values of a batched forward pass.
#[derive(Debug, Clone)]
pub struct BatchTape {
    generation: u64,
    input: DMatrix<f64>,
    pre: Vec<DMatrix<f64>>,
    post: Vec<DMatrix<f64>>,
}

impl BatchTape {
    pub fn output(&self) -> &DMatrix<f64> {
        self.post.last().expect("non-empty tape")
    }

    pub fn input(&self) -> &DMatrix<f64> {
        &self.input
    }
}

/// Single-sample tape.
#[derive(Debug, Clone)]
pub struct Tape(BatchTape);

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Vec<f64>,
}

pub fn mlp_forward(net: &Mlp, input: &[f64]) -> Result<(Vec<f64>, Tape)> {
    let tape = net.forward_batch(DMatrix::from_column_slice(input.len(), 1, input))?;
    Ok((tape.output().as_slice().to_vec(), Tape(tape)))
}

pub fn mlp_backward(net: &Mlp, tape: &Tape, output_grad: &[f64]) -> Result<Gradients> {
    let g = DMatrix::from_column_slice(output_grad.len(), 1, output_grad);
    let (params, input) = net.backward_batch(&tape.0, &g)?;
    Ok(Gradients {
        params,
        input: input.as_slice().to_vec(),
    })
}

/// A slice of tape values whose reverse-mode contribution may be severed.
#[derive(Debug, Clone, PartialEq)]
pub struct TapeSection {
    pub values: Vec<f64>,
    live: bool,
}

impl TapeSection {
    pub fn live(values: Vec<f64>) -> Self {
        Self { values, live: true }
    }

    pub fn is_live(&self) -> bool {
        self.live
    }

    /// Gradient that actually flows into this section's producers.
    pub fn route(&self, grad: &[f64]) -> Vec<f64> {
        if self.live {
            grad.to_vec()
        } else {
            vec![0.0; grad.len()]
        }
    }
}

/// Identity on values; the reverse pass contributes nothing through it.
pub fn stop_gradient(section: &TapeSection) -> TapeSection {
    TapeSection {
        values: section.values.clone(),
        live: false,
    }
}

fn check_quantile_args(w: &[f64], e: &[f64], level: f64) -> Result<()> {
    if w.len() != e.len() {
        return Err(Error::shape(format!(
            "w has {} entries, e has {}",
            w.len(),
            e.len()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!(
            "quantile level {level} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Asymmetric residual: `tau (w - e)` when `w >= e`, `(1 - tau)(e - w)` otherwise.
///
/// `tau` weights over-prediction, so minimizing the summed residual puts `w`
/// at the `1 - tau` quantile of `e`.
pub fn check_loss(w: &[f64], e: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_quantile_args(w, e, tau)?;
    Ok(w.iter()
        .zip(e)
        .map(|(w, e)| {
            if w >= e {
                tau * (w - e)
            } else {
                (1.0 - tau) * (e - w)
            }
        })
        .collect())
}

pub fn huber(s: f64, delta: f64) -> f64 {
    if s.abs() <= delta {
        0.5 * s * s
    } else {
        delta * (s.abs() - 0.5 * delta)
    }
}

pub fn huber_grad(s: f64, delta: f64) -> f64 {
    if s.abs() <= delta {
        s
    } else {
        delta * s.signum()
    }
}

/// `Huber(|r|_1)` with `r` the check residual at coverage level `alpha`
/// (the minimizer sits at the `alpha` quantile).
pub fn quantile_loss(w: &[f64], e: &[f64], alpha: f64, delta: f64) -> Result<f64> {
    let r = check_loss(w, e, 1.0 - alpha)?;
    Ok(huber(r.iter().sum(), delta))
}

/// Loss value and its (sub)gradient with respect to `w`.
pub fn quantile_loss_grad(w: &[f64], e: &[f64], alpha: f64, delta: f64) -> Result<(f64, Vec<f64>)> {
    let r = check_loss(w, e, 1.0 - alpha)?;
    let s: f64 = r.iter().sum();
    let outer = huber_grad(s, delta);
    let grad = w
        .iter()
        .zip(e)
        .map(|(w, e)| {
            if w >= e {
                outer * (1.0 - alpha)
            } else {
                -outer * alpha
            }
        })
        .collect();
    Ok((huber(s, delta), grad))
}

/// How reverse-mode gradients treat tube values fed back into later steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackGradient {
    /// Fed-back predictions are constants in the backward pass.
    #[default]
    Stop,
    /// Differentiate through the whole unrolled recursion.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub alpha: f64,
    /// Applied to the residual norm in units of the model's output scale.
    pub huber_delta: f64,
    pub learning_rate: f64,
    /// Learning rate at the last step, as a fraction of the initial one.
    pub final_lr_frac: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub grad_clip_norm: f64,
    pub hidden: Vec<usize>,
    pub beta: f64,
    pub feedback_gradient: FeedbackGradient,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            huber_delta: 1.0,
            learning_rate: 1e-3,
            final_lr_frac: 0.1,
            batch_size: 256,
            epochs: 10,
            steps_per_epoch: 300,
            seed: 0,
            grad_clip_norm: 10.0,
            hidden: vec![64, 64],
            beta: 5.0,
            feedback_gradient: FeedbackGradient::Stop,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("train.alpha must lie in (0, 1)");
        }
        if !(self.huber_delta > 0.0) {
            return bad("train.huber_delta must be > 0");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("train.learning_rate must be > 0");
        }
        if !(self.final_lr_frac > 0.0 && self.final_lr_frac <= 1.0) {
            return bad("train.final_lr_frac must lie in (0, 1]");
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == 0 {
            return bad("train.batch_size, epochs and steps_per_epoch must be >= 1");
        }
        if !(self.grad_clip_norm > 0.0) {
            return bad("train.grad_clip_norm must be > 0");
        }
        if self.hidden.contains(&0) {
            return bad("train.hidden layer widths must be >= 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("train.beta must be > 0");
        }
        Ok(())
    }

    /// Learning rate at optimizer step `t` of `total`, decayed linearly.
    pub fn lr_at(&self, t: usize, total: usize) -> f64 {
        let frac = if total > 1 {
            t as f64 / (total - 1) as f64
        } else {
            0.0
        };
        self.learning_rate * (1.0 - frac * (1.0 - self.final_lr_frac))
    }
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam: parameter, gradient, and state sizes differ",
        ));
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Rescales `grads` in place so its Euclidean norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= s);
    }
    norm
}

/// Per-feature affine standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fits on rows of `samples`; near-constant features get unit scale.
    pub fn fit<'a>(dim: usize, samples: impl Iterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for s in samples {
            n += 1;
            for i in 0..dim {
                let d = s[i] - mean[i];
                mean[i] += d / n as f64;
                m2[i] += d * (s[i] - mean[i]);
            }
        }
        let std = m2
            .iter()
            .map(|m| {
                let sd = if n > 1 {
                    (m / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                if sd > 1e-9 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_in_place(&self, x: &mut [f64]) {
        for ((x, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *x = (*x - m) / s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn zero_net_outputs_softplus_of_zero() {
        let net = Mlp::zeros(&[3, 4, 4, 2], 5.0).unwrap();
        let (out, _) = mlp_forward(&net, &[1.0, -2.0, 3.0]).unwrap();
        for o in out {
            assert!((o - 2f64.ln() / 5.0).abs() < 1e-15);
            assert!((o - 0.138629).abs() < 1e-6);
        }
        let single = Mlp::zeros(&[1, 1], 5.0).unwrap();
        assert!((single.eval(&[0.0]).unwrap()[0] - 2f64.ln() / 5.0).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let net = Mlp::zeros(&[3, 2], 5.0).unwrap();
        assert!(matches!(mlp_forward(&net, &[1.0]), Err(Error::Shape(_))));
    }

    /// Loop-based forward pass written without matrix types.
    fn straight_line_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let p = net.params();
        let sizes = net.sizes();
        let mut off = 0;
        let mut a = x.to_vec();
        for l in 0..sizes.len() - 1 {
            let (fi, fo) = (sizes[l], sizes[l + 1]);
            let act = if l + 2 == sizes.len() {
                net.output_activation()
            } else {
                net.hidden_activation()
            };
            let mut next = vec![0.0; fo];
            for r in 0..fo {
                let mut s = p[off + fi * fo + r];
                for c in 0..fi {
                    s += p[off + c * fo + r] * a[c];
                }
                next[r] = act.apply(s);
            }
            off += fi * fo + fo;
            a = next;
        }
        a
    }

    #[test]
    fn forward_matches_straight_line_recomputation() {
        let mut rng = rng::stream(1, &[]);
        for _ in 0..5 {
            let mut net = Mlp::random(&[5, 7, 6, 3], 5.0, &mut rng).unwrap();
            for p in net.params_mut() {
                *p += rng.gen_range(-0.1..0.1);
            }
            let x: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let a = net.eval(&x).unwrap();
            let b = straight_line_forward(&net, &x);
            for (a, b) in a.iter().zip(&b) {
                assert!((a - b).abs() < 1e-12);
                assert!(*a > 0.0);
            }
        }
    }

    #[test]
    fn linear_net_gradient_is_weight_transpose() {
        let mut rng = rng::stream(2, &[]);
        let mut net =
            Mlp::with_activations(&[3, 2], Activation::Identity, Activation::Identity).unwrap();
        net.randomize(&mut rng);
        let (_, tape) = mlp_forward(&net, &[0.3, -0.2, 0.5]).unwrap();
        let g = mlp_backward(&net, &tape, &[1.0, -2.0]).unwrap();
        let w = net.params();
        for c in 0..3 {
            // column-major 2x3 weight: W[r, c] = w[c * 2 + r]
            let expected = w[c * 2] * 1.0 + w[c * 2 + 1] * -2.0;
            assert!((g.input[c] - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let mut rng = rng::stream(3, &[]);
        let net = Mlp::random(&[4, 5, 2], 5.0, &mut rng).unwrap();
        let (_, tape) = mlp_forward(&net, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let g = mlp_backward(&net, &tape, &[0.0, 0.0]).unwrap();
        assert!(g.params.iter().chain(&g.input).all(|x| *x == 0.0));
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = rng::stream(4, &[]);
        let h = 1e-5;
        for _ in 0..10 {
            let mut net = Mlp::random(&[4, 6, 5, 2], 5.0, &mut rng).unwrap();
            for p in net.params_mut() {
                *p += rng.gen_range(-0.2..0.2);
            }
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let og = [0.7, -1.3];
            let f = |net: &Mlp, x: &[f64]| {
                let o = net.eval(x).unwrap();
                o[0] * og[0] + o[1] * og[1]
            };
            let (_, tape) = mlp_forward(&net, &x).unwrap();
            let g = mlp_backward(&net, &tape, &og).unwrap();
            let scale = g.params.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..net.num_params() {
                let base = net.params()[i];
                let mut plus = net.clone();
                plus.params_mut()[i] = base + h;
                let mut minus = net.clone();
                minus.params_mut()[i] = base - h;
                let fd = (f(&plus, &x) - f(&minus, &x)) / (2.0 * h);
                let rel =
                    (fd - g.params[i]).abs() / fd.abs().max(g.params[i].abs()).max(1e-3 * scale);
                assert!(rel < 1e-4, "param {i}: fd {fd} vs {}", g.params[i]);
            }
            for i in 0..4 {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (f(&net, &xp) - f(&net, &xm)) / (2.0 * h);
                assert!((fd - g.input[i]).abs() < 1e-4 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn stale_tape_is_rejected() {
        let mut net = Mlp::zeros(&[2, 2], 5.0).unwrap();
        let (_, tape) = mlp_forward(&net, &[1.0, 1.0]).unwrap();
        net.params_mut()[0] = 1.0;
        assert!(matches!(
            mlp_backward(&net, &tape, &[1.0, 1.0]),
            Err(Error::StaleTape)
        ));
    }

    #[test]
    fn check_loss_examples() {
        assert!((check_loss(&[1.0], &[0.5], 0.9).unwrap()[0] - 0.45).abs() < 1e-15);
        assert!((check_loss(&[0.5], &[1.0], 0.9).unwrap()[0] - 0.05).abs() < 1e-15);
        assert_eq!(check_loss(&[0.3], &[0.3], 0.9).unwrap()[0], 0.0);
        assert!(check_loss(&[1.0], &[1.0, 2.0], 0.9).is_err());
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber(0.0, 1.0), 0.0);
        let d = 0.7;
        assert!((huber(d, d) - d * d / 2.0).abs() < 1e-15);
        assert!((d * (d - d / 2.0) - d * d / 2.0).abs() < 1e-15);
        assert_eq!(huber(2.0, 1.0), 1.5);
        // derivative continuity at the knee
        assert!((huber_grad(d - 1e-12, d) - huber_grad(d + 1e-12, d)).abs() < 1e-9);
    }

    #[test]
    fn quantile_loss_examples() {
        assert_eq!(
            quantile_loss(&[0.4, 0.2], &[0.4, 0.2], 0.9, 1.0).unwrap(),
            0.0
        );
        let l = quantile_loss(&[1.0, 0.5], &[0.5, 1.0], 0.9, 1.0).unwrap();
        assert!((l - 0.125).abs() < 1e-15);
    }

    #[test]
    fn quantile_loss_grad_matches_differences() {
        let w = [0.3, 0.9, 0.2];
        let e = [0.5, 0.4, 0.1];
        for delta in [0.1, 1.0] {
            let (_, g) = quantile_loss_grad(&w, &e, 0.8, delta).unwrap();
            for i in 0..3 {
                let mut wp = w;
                wp[i] += 1e-7;
                let mut wm = w;
                wm[i] -= 1e-7;
                let fd = (quantile_loss(&wp, &e, 0.8, delta).unwrap()
                    - quantile_loss(&wm, &e, 0.8, delta).unwrap())
                    / 2e-7;
                assert!((fd - g[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_minimizer_is_the_quantile() {
        // samples 0.1..1.0; brute-force scan of the constant predictor
        let e: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let best = (0..=1000)
            .map(|i| i as f64 * 1e-3)
            .map(|c| (c, quantile_loss(&vec![c; e.len()], &e, 0.9, 1.0).unwrap()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0;
        assert!((best - 0.9).abs() <= 0.1 + 1e-12, "minimizer {best}");
    }

    #[test]
    fn stop_gradient_severs_one_leg() {
        // f(x) = stop(x) * x at x = 3
        let x = TapeSection::live(vec![3.0]);
        let stopped = stop_gradient(&x);
        let value = stopped.values[0] * x.values[0];
        let upstream = 1.0;
        let grad_x = x.route(&[upstream * stopped.values[0]])[0]
            + stopped.route(&[upstream * x.values[0]])[0];
        assert_eq!(value, 9.0);
        assert_eq!(grad_x, 3.0);
        assert_eq!(stopped.values, x.values);
        assert!(stopped.route(&[1.0, 2.0]).iter().all(|g| *g == 0.0));
    }

    #[test]
    fn adam_zero_grads_keep_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, 1e-3).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(s.t, 1);
    }

    #[test]
    fn adam_descends_and_matches_scalar_oracle() {
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[2.0], &mut s, 0.1).unwrap();
        assert!(p[0] < 1.0);

        // independent scalar Adam on f(x) = x^2
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut p = vec![1.0];
        let mut s = AdamState::new(1);
        for t in 1..=10 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
            let gp = 2.0 * p[0];
            adam_step(&mut p, &[gp], &mut s, 0.05).unwrap();
        }
        assert!((x - p[0]).abs() < 1e-15);
    }

    #[test]
    fn standardizer_fits_mean_and_std() {
        let rows = [vec![1.0, 5.0], vec![3.0, 5.0]];
        let s = Standardizer::fit(2, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert!((s.std[0] - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(s.std[1], 1.0);
    }
}
