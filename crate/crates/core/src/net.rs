//! A small fully connected network with hand-written reverse mode.
//!
//! Parameters live in one flat `f64` buffer so that the optimizer, gradient
//! clipping, Polyak averaging and checkpointing all work on plain slices.
//! Each layer stores its weight matrix (row-major, `outputs x inputs`)
//! followed by its bias.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl LayerShape {
    pub fn new(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
        }
    }

    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }
}

/// Weights and biases of a stack of dense layers.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    shapes: Vec<LayerShape>,
    offsets: Vec<usize>,
    data: Vec<f64>,
}

impl MlpParams {
    /// All-zero parameters for a chain of layers.
    pub fn zeros(shapes: Vec<LayerShape>) -> Result<Self> {
        if let Some(w) = shapes.windows(2).find(|w| w[0].outputs != w[1].inputs) {
            return Err(Error::Shape(format!(
                "layer with {} outputs feeds a layer with {} inputs",
                w[0].outputs, w[1].inputs
            )));
        }
        Self::bank(shapes)
    }

    /// All-zero parameters for layers that need not compose end to end
    /// (e.g. a side projection next to the trunk).
    pub fn bank(shapes: Vec<LayerShape>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::Shape("a network needs at least one layer".into()));
        }
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut total = 0;
        for s in &shapes {
            offsets.push(total);
            total += s.len();
        }
        Ok(Self {
            shapes,
            offsets,
            data: vec![0.0; total],
        })
    }

    /// Fan-in scaled uniform initialization, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`,
    /// with the last layer multiplied by `final_scale`.
    pub fn init<R: Rng + ?Sized>(
        shapes: Vec<LayerShape>,
        final_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let mut params = Self::bank(shapes)?;
        let last = params.shapes.len() - 1;
        for l in 0..params.shapes.len() {
            let bound = 1.0 / (params.shapes[l].inputs.max(1) as f64).sqrt();
            let scale = if l == last { final_scale } else { 1.0 };
            for w in params.layer_mut(l) {
                *w = scale * rng.random_range(-bound..bound);
            }
        }
        Ok(params)
    }

    /// Rebuild from a shape list and a flat buffer (checkpoint loading).
    pub fn from_flat(shapes: Vec<LayerShape>, data: Vec<f64>) -> Result<Self> {
        let mut params = Self::bank(shapes)?;
        if data.len() != params.data.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                params.data.len(),
                data.len()
            )));
        }
        params.data = data;
        Ok(params)
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn input_dim(&self) -> usize {
        self.shapes[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.shapes[self.shapes.len() - 1].outputs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn layer_range(&self, l: usize) -> Range<usize> {
        self.offsets[l]..self.offsets[l] + self.shapes[l].len()
    }

    fn layer_mut(&mut self, l: usize) -> &mut [f64] {
        let r = self.layer_range(l);
        &mut self.data[r]
    }

    /// Weight matrix of layer `l`, row-major.
    pub fn weights(&self, l: usize) -> &[f64] {
        let s = self.shapes[l];
        &self.data[self.offsets[l]..self.offsets[l] + s.outputs * s.inputs]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.shapes[l];
        let start = self.offsets[l];
        &mut self.data[start..start + s.outputs * s.inputs]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let s = self.shapes[l];
        let start = self.offsets[l] + s.outputs * s.inputs;
        &self.data[start..start + s.outputs]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let s = self.shapes[l];
        let start = self.offsets[l] + s.outputs * s.inputs;
        &mut self.data[start..start + s.outputs]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Forward pass through every layer.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        if self.shapes.windows(2).any(|w| w[0].outputs != w[1].inputs) {
            return Err(Error::Shape("layers do not form a chain".into()));
        }
        if input.len() != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        let mut tape = Tape::default();
        Ok(self.forward_layers(0..self.shapes.len(), input, &mut tape).to_vec())
    }

    /// Forward through `layers`, recording activations on `tape`.
    pub fn forward_layers<'t>(
        &self,
        layers: Range<usize>,
        input: &[f64],
        tape: &'t mut Tape,
    ) -> &'t [f64] {
        let n = layers.len();
        tape.reset(n + 1);
        tape.acts[0].extend_from_slice(input);
        for (k, l) in layers.enumerate() {
            let shape = self.shapes[l];
            debug_assert_eq!(tape.acts[k].len(), shape.inputs);
            let (done, rest) = tape.acts.split_at_mut(k + 1);
            let x = &done[k];
            let out = &mut rest[0];
            let w = self.weights(l);
            let b = self.bias(l);
            out.resize(shape.outputs, 0.0);
            kernels::affine(w, b, x, out);
            if shape.activation == Activation::Relu {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        &tape.acts[n]
    }

    /// Reverse pass matching a [`forward_layers`](Self::forward_layers) call
    /// over the same `layers`. Parameter gradients are accumulated into
    /// `grads`; the gradient with respect to the layer-range input is
    /// returned.
    pub fn backward_layers(
        &self,
        layers: Range<usize>,
        tape: &Tape,
        upstream: &[f64],
        grads: &mut Gradients,
    ) -> Vec<f64> {
        let first = layers.start;
        let n = layers.len();
        let mut delta = upstream.to_vec();
        for k in (0..n).rev() {
            let l = first + k;
            let shape = self.shapes[l];
            let x = &tape.acts[k];
            let y = &tape.acts[k + 1];
            if shape.activation == Activation::Relu {
                for (d, &yi) in delta.iter_mut().zip(y) {
                    if yi <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let w = self.weights(l);
            let g = &mut grads.data[self.offsets[l]..self.offsets[l] + shape.len()];
            let (gw, gb) = g.split_at_mut(shape.outputs * shape.inputs);
            let mut dx = vec![0.0; shape.inputs];
            kernels::affine_backward(w, x, &delta, gw, gb, &mut dx);
            delta = dx;
        }
        delta
    }

    /// Write the flat buffer as little-endian `f64` plus a JSON shape manifest.
    pub fn write_checkpoint<B: Write, J: Write>(&self, mut bin: B, json: J) -> Result<()> {
        for v in &self.data {
            bin.write_all(&v.to_le_bytes())?;
        }
        bin.flush()?;
        let manifest = CheckpointManifest {
            dtype: "f64-le".into(),
            len: self.data.len(),
            layers: self.shapes.clone(),
        };
        serde_json::to_writer_pretty(json, &manifest)?;
        Ok(())
    }

    pub fn read_checkpoint<B: Read, J: Read>(mut bin: B, json: J) -> Result<Self> {
        let manifest: CheckpointManifest = serde_json::from_reader(json)?;
        if manifest.dtype != "f64-le" {
            return Err(Error::Config(format!("unsupported dtype `{}`", manifest.dtype)));
        }
        let mut bytes = Vec::new();
        bin.read_to_end(&mut bytes)?;
        if bytes.len() != manifest.len * 8 {
            return Err(Error::Shape(format!(
                "checkpoint holds {} bytes, manifest promises {} values",
                bytes.len(),
                manifest.len
            )));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(manifest.layers, data)
    }

    /// Saves `<prefix>.bin` and `<prefix>.json`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let bin = BufWriter::new(File::create(prefix.with_extension("bin"))?);
        let json = BufWriter::new(File::create(prefix.with_extension("json"))?);
        self.write_checkpoint(bin, json)
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let bin = BufReader::new(File::open(prefix.with_extension("bin"))?);
        let json = BufReader::new(File::open(prefix.with_extension("json"))?);
        Self::read_checkpoint(bin, json)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    dtype: String,
    len: usize,
    layers: Vec<LayerShape>,
}

/// Dense-layer kernels. On x86-64 an AVX2 build of the same code is picked at
/// runtime; without FMA contraction both paths round identically.
mod kernels {
    #[inline(always)]
    fn dot(a: &[f64], b: &[f64]) -> f64 {
        let mut acc = [0.0; 8];
        let (a8, b8) = (a.chunks_exact(8), b.chunks_exact(8));
        let tail: f64 = a8.remainder().iter().zip(b8.remainder()).map(|(x, y)| x * y).sum();
        for (x, y) in a8.zip(b8) {
            for k in 0..8 {
                acc[k] += x[k] * y[k];
            }
        }
        ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
    }

    #[inline(always)]
    fn affine_generic(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        for ((row, &bias), o) in w.chunks_exact(x.len()).zip(b).zip(out) {
            *o = bias + dot(row, x);
        }
    }

    #[inline(always)]
    fn backward_generic(
        w: &[f64],
        x: &[f64],
        delta: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        dx: &mut [f64],
    ) {
        let n = x.len();
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            gb[o] += d;
            let (gw_row, w_row) = (&mut gw[o * n..(o + 1) * n], &w[o * n..(o + 1) * n]);
            for (gwi, &xi) in gw_row.iter_mut().zip(x) {
                *gwi += d * xi;
            }
            for (dxi, &wi) in dx.iter_mut().zip(w_row) {
                *dxi += d * wi;
            }
        }
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn affine_avx(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        affine_generic(w, b, x, out)
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn backward_avx(
        w: &[f64],
        x: &[f64],
        delta: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        dx: &mut [f64],
    ) {
        backward_generic(w, x, delta, gw, gb, dx)
    }

    /// `out = W x + b` with `W` row-major `[out.len()][x.len()]`.
    pub(super) fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { affine_avx(w, b, x, out) };
        }
        affine_generic(w, b, x, out)
    }

    /// Accumulates `dW += delta x^T`, `db += delta` and `dx += W^T delta`.
    pub(super) fn affine_backward(
        w: &[f64],
        x: &[f64],
        delta: &[f64],
        gw: &mut [f64],
        gb: &mut [f64],
        dx: &mut [f64],
    ) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            return unsafe { backward_avx(w, x, delta, gw, gb, dx) };
        }
        backward_generic(w, x, delta, gw, gb, dx)
    }
}

/// Activations recorded by a forward pass; reusable across calls.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    acts: Vec<Vec<f64>>,
}

impl Tape {
    fn reset(&mut self, n: usize) {
        self.acts.resize_with(n, Vec::new);
        for a in &mut self.acts[..n] {
            a.clear();
        }
    }
}

/// Gradient buffer laid out like [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            data: vec![0.0; params.len()],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { data }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Global-norm clipping. Returns the clipped copy.
pub fn grad_clip(grads: &Gradients, max_norm: f64) -> Gradients {
    let mut out = grads.clone();
    clip_in_place(&mut out, max_norm);
    out
}

/// In-place variant of [`grad_clip`]; returns the norm before clipping.
pub fn clip_in_place(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

/// `[cos(pi x), cos(2 pi x), ..., cos(dim pi x)]`.
pub fn cosine_embed(x: f64, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    CosineEmbedding::new(dim).embed_into(x, &mut out);
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CosineEmbedding {
    pub dim: usize,
}

impl CosineEmbedding {
    pub fn new(dim: usize) -> Self {
        assert!(dim >= 1, "embedding dimension must be positive");
        Self { dim }
    }

    pub fn embed_into(&self, x: f64, out: &mut [f64]) {
        for (k, o) in out[..self.dim].iter_mut().enumerate() {
            *o = ((k + 1) as f64 * PI * x).cos();
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(params: &MlpParams, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(state: &mut AdamState, params: &mut MlpParams, grads: &Gradients) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam state {} / params {} / gradients {}",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    let AdamConfig {
        lr,
        beta1,
        beta2,
        eps,
    } = state.config;
    state.step += 1;
    let bc1 = 1.0 - beta1.powi(state.step as i32);
    let bc2 = 1.0 - beta2.powi(state.step as i32);
    for (((p, &g), m), v) in params
        .data
        .iter_mut()
        .zip(&grads.data)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Layout of the critic network `f(z_t, t, tau, s, a) -> z_end`.
///
/// The first dense layer sees `[s, a, z_t, embed(t), embed(tau)]`. With
/// `projection = Some(p)` the two embeddings first pass through a shared
/// linear layer with `p` outputs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CriticArch {
    pub state_dim: usize,
    pub action_dim: usize,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub projection: Option<usize>,
}

/// One evaluation point of the critic.
#[derive(Clone, Copy, Debug)]
pub struct CriticInput<'a> {
    pub z: f64,
    pub t: f64,
    pub tau: f64,
    pub state: &'a [f64],
    pub action: &'a [f64],
}

/// Scratch space for [`CriticArch::forward`] / [`CriticArch::backward`].
#[derive(Clone, Debug, Default)]
pub struct CriticTape {
    embed: Vec<f64>,
    proj: Tape,
    trunk: Tape,
    input: Vec<f64>,
}

impl CriticArch {
    pub fn new(state_dim: usize, action_dim: usize, embed_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            state_dim,
            action_dim,
            embed_dim,
            hidden,
            projection: None,
        }
    }

    fn trunk_inputs(&self) -> usize {
        self.state_dim + self.action_dim + 1 + self.projection.unwrap_or(2 * self.embed_dim)
    }

    fn trunk_start(&self) -> usize {
        usize::from(self.projection.is_some())
    }

    pub fn layer_shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::new();
        if let Some(p) = self.projection {
            shapes.push(LayerShape::new(2 * self.embed_dim, p, Activation::Identity));
        }
        let mut width = self.trunk_inputs();
        for &h in &self.hidden {
            shapes.push(LayerShape::new(width, h, Activation::Relu));
            width = h;
        }
        shapes.push(LayerShape::new(width, 1, Activation::Identity));
        shapes
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        if self.hidden.contains(&0) || self.projection == Some(0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }

    /// Fan-in uniform initialization with the output layer scaled by 0.1.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MlpParams> {
        self.validate()?;
        MlpParams::init(self.layer_shapes(), 0.1, rng)
    }

    pub fn check_params(&self, params: &MlpParams) -> Result<()> {
        if params.shapes() != self.layer_shapes().as_slice() {
            return Err(Error::Shape("parameters do not match the critic layout".into()));
        }
        Ok(())
    }

    pub fn check_input(&self, input: &CriticInput<'_>) -> Result<()> {
        if input.state.len() != self.state_dim || input.action.len() != self.action_dim {
            return Err(Error::Shape(format!(
                "critic expects state {} / action {}, got {} / {}",
                self.state_dim,
                self.action_dim,
                input.state.len(),
                input.action.len()
            )));
        }
        Ok(())
    }

    /// Endpoint prediction `z_end`.
    pub fn forward(&self, params: &MlpParams, x: &CriticInput<'_>, tape: &mut CriticTape) -> f64 {
        debug_assert!(self.check_input(x).is_ok());
        let e = CosineEmbedding::new(self.embed_dim);
        tape.embed.resize(2 * self.embed_dim, 0.0);
        e.embed_into(x.t, &mut tape.embed[..self.embed_dim]);
        e.embed_into(x.tau, &mut tape.embed[self.embed_dim..]);

        tape.input.clear();
        tape.input.extend_from_slice(x.state);
        tape.input.extend_from_slice(x.action);
        tape.input.push(x.z);
        if self.projection.is_some() {
            let p = params.forward_layers(0..1, &tape.embed, &mut tape.proj);
            tape.input.extend_from_slice(p);
        } else {
            tape.input.extend_from_slice(&tape.embed);
        }
        let trunk = self.trunk_start()..params.shapes().len();
        params.forward_layers(trunk, &tape.input, &mut tape.trunk)[0]
    }

    /// Accumulates `upstream * d f / d params` into `grads` and returns
    /// `upstream * d f / d z_t`. `tape` must come from the matching forward.
    pub fn backward(
        &self,
        params: &MlpParams,
        tape: &CriticTape,
        upstream: f64,
        grads: &mut Gradients,
    ) -> f64 {
        let trunk = self.trunk_start()..params.shapes().len();
        let dinput = params.backward_layers(trunk, &tape.trunk, &[upstream], grads);
        let z_pos = self.state_dim + self.action_dim;
        if self.projection.is_some() {
            params.backward_layers(0..1, &tape.proj, &dinput[z_pos + 1..], grads);
        }
        dinput[z_pos]
    }

    /// Convenience forward without a caller-held tape.
    pub fn predict(&self, params: &MlpParams, x: &CriticInput<'_>) -> Result<f64> {
        self.check_params(params)?;
        self.check_input(x)?;
        Ok(self.forward(params, x, &mut CriticTape::default()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn cosine_embed_examples() {
        assert_eq!(cosine_embed(0.0, 3), vec![1.0, 1.0, 1.0]);
        let e = cosine_embed(1.0, 2);
        assert_abs_diff_eq!(e[0], -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[1], 1.0, epsilon = 1e-15);
        let e = cosine_embed(0.5, 2);
        assert_abs_diff_eq!(e[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(e[1], -1.0, epsilon = 1e-15);
        for i in 0..=100 {
            assert!(cosine_embed(i as f64 / 100.0, 32)
                .iter()
                .all(|c| (-1.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn shape_checks() {
        let bad = vec![
            LayerShape::new(3, 4, Activation::Relu),
            LayerShape::new(5, 1, Activation::Identity),
        ];
        assert!(matches!(MlpParams::zeros(bad), Err(Error::Shape(_))));
        let p = MlpParams::zeros(vec![LayerShape::new(3, 1, Activation::Identity)]).unwrap();
        assert!(matches!(p.forward(&[1.0, 2.0]), Err(Error::Shape(_))));
        let arch = CriticArch::new(2, 1, 4, vec![8]);
        let params = arch.init(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = CriticInput {
            z: 0.0,
            t: 0.0,
            tau: 0.5,
            state: &[1.0],
            action: &[0.0],
        };
        assert!(matches!(arch.predict(&params, &x), Err(Error::Shape(_))));
    }

    #[test]
    fn forward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let arch = CriticArch::new(2, 1, 4, vec![8, 8]);
        let mut params = arch.init(&mut rng).unwrap();
        let last = params.shapes().len() - 1;
        params.weights_mut(last).iter_mut().for_each(|w| *w = 0.0);
        params.bias_mut(last).iter_mut().for_each(|w| *w = 0.0);
        let x = CriticInput {
            z: 0.7,
            t: 0.3,
            tau: 0.2,
            state: &[1.0, -2.0],
            action: &[0.5],
        };
        assert_eq!(arch.predict(&params, &x).unwrap(), 0.0);

        // A single linear layer that reads only z_t.
        let lin = CriticArch::new(0, 0, 2, vec![]);
        let mut p = MlpParams::bank(lin.layer_shapes()).unwrap();
        p.weights_mut(0)[0] = 1.0;
        let x = CriticInput {
            z: 3.0,
            t: 0.4,
            tau: 0.9,
            state: &[],
            action: &[],
        };
        assert_eq!(lin.predict(&p, &x).unwrap(), 3.0);

        let arch = CriticArch::new(2, 1, 4, vec![8, 8]);
        let params = arch.init(&mut rng).unwrap();
        let x = CriticInput {
            z: 0.1,
            t: 0.6,
            tau: 0.3,
            state: &[0.2, 0.4],
            action: &[-1.0],
        };
        let a = arch.predict(&params, &x).unwrap();
        let b = arch.predict(&params, &x).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn backward_linear_example() {
        let mut p = MlpParams::zeros(vec![LayerShape::new(1, 1, Activation::Identity)]).unwrap();
        p.weights_mut(0)[0] = 2.0;
        let mut tape = Tape::default();
        let y = p.forward_layers(0..1, &[3.0], &mut tape)[0];
        assert_eq!(y, 6.0);
        let mut g = Gradients::zeros_like(&p);
        let dx = p.backward_layers(0..1, &tape, &[1.0], &mut g);
        assert_eq!(g.as_slice(), &[3.0, 1.0]);
        assert_eq!(dx, vec![2.0]);
        assert_eq!(g.len(), p.len());
    }

    fn gradient_check(arch: &CriticArch, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch.init(&mut rng).unwrap();
        let state: Vec<f64> = (0..arch.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let action: Vec<f64> = (0..arch.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = CriticInput {
            z: rng.random_range(-2.0..2.0),
            t: rng.random(),
            tau: rng.random(),
            state: &state,
            action: &action,
        };
        let mut tape = CriticTape::default();
        arch.forward(&params, &x, &mut tape);
        let mut g = Gradients::zeros_like(&params);
        let dz = arch.backward(&params, &tape, 1.0, &mut g);

        let h = 1e-5;
        let f = |p: &MlpParams, z: f64| {
            let xi = CriticInput { z, ..x };
            arch.forward(p, &xi, &mut CriticTape::default())
        };
        let fd_z = (f(&params, x.z + h) - f(&params, x.z - h)) / (2.0 * h);
        assert!(rel_err(dz, fd_z) < 1e-4, "dz {dz} vs {fd_z}");
        for _ in 0..64 {
            let i = rng.random_range(0..params.len());
            let mut plus = params.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = params.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (f(&plus, x.z) - f(&minus, x.z)) / (2.0 * h);
            let an = g.as_slice()[i];
            assert!(rel_err(an, fd) < 1e-4, "param {i}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        gradient_check(&CriticArch::new(0, 0, 8, vec![16, 16]), 11);
        gradient_check(&CriticArch::new(5, 2, 8, vec![16, 16]), 12);
        let mut proj = CriticArch::new(3, 1, 8, vec![16]);
        proj.projection = Some(6);
        gradient_check(&proj, 13);
    }

    #[test]
    fn adam_zero_gradient_and_zero_lr() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = CriticArch::new(1, 1, 4, vec![8]);
        let params = arch.init(&mut rng).unwrap();

        let mut p = params.clone();
        let mut st = AdamState::new(&p, AdamConfig::default());
        let zero = Gradients::zeros_like(&p);
        adam_step(&mut st, &mut p, &zero).unwrap();
        assert_eq!(p, params);

        let mut p = params.clone();
        let mut st = AdamState::new(
            &p,
            AdamConfig {
                lr: 0.0,
                ..Default::default()
            },
        );
        let g = Gradients::from_vec(vec![1.0; p.len()]);
        adam_step(&mut st, &mut p, &g).unwrap();
        assert_eq!(p, params);
        assert!(adam_step(&mut st, &mut p, &Gradients::from_vec(vec![0.0; 3])).is_err());
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let shapes = vec![LayerShape::new(1, 1, Activation::Identity)];
        let mut best = f64::INFINITY;
        for lr in [3e-4, 1e-3, 3e-3, 1e-2] {
            let mut p = MlpParams::zeros(shapes.clone()).unwrap();
            let mut st = AdamState::new(
                &p,
                AdamConfig {
                    lr,
                    ..Default::default()
                },
            );
            for _ in 0..2000 {
                let theta = p.as_slice()[0];
                let g = Gradients::from_vec(vec![2.0 * (theta - 5.0), 0.0]);
                adam_step(&mut st, &mut p, &g).unwrap();
            }
            best = best.min((p.as_slice()[0] - 5.0).abs());
        }
        assert!(best < 1e-2, "best |theta - 5| = {best}");
    }

    #[test]
    fn grad_clip_examples() {
        let g = Gradients::from_vec(vec![0.3, 0.4]);
        assert_eq!(grad_clip(&g, 1.0), g);
        let c = grad_clip(&Gradients::from_vec(vec![3.0, 4.0]), 1.0);
        assert_abs_diff_eq!(c.as_slice()[0], 0.6, epsilon = 1e-15);
        assert_abs_diff_eq!(c.as_slice()[1], 0.8, epsilon = 1e-15);
        assert!(c.norm() <= 1.0 + 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut arch = CriticArch::new(2, 1, 4, vec![8]);
        arch.projection = Some(3);
        let params = arch.init(&mut rng).unwrap();
        let mut bin = Vec::new();
        let mut json = Vec::new();
        params.write_checkpoint(&mut bin, &mut json).unwrap();
        assert_eq!(bin.len(), params.len() * 8);
        let back = MlpParams::read_checkpoint(&bin[..], &json[..]).unwrap();
        assert_eq!(back, params);
        assert!(MlpParams::read_checkpoint(&bin[..8], &json[..]).is_err());
    }
}
