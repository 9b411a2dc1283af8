//! Unconditional flow-matching baseline: a velocity field `v(z, t)` trained on
//! straight paths from `N(0, 1)` noise to the data and integrated with Euler.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{
    adam_step, clip_in_place, Activation, AdamConfig, AdamState, CosineEmbedding, Gradients,
    LayerShape, MlpParams, Tape,
};
use crate::quantile::ParticleSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowBaselineConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub sample_steps: usize,
    pub adam: AdamConfig,
    pub max_grad_norm: f64,
}

impl Default for FlowBaselineConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 16,
            sample_steps: 20,
            adam: AdamConfig::default(),
            max_grad_norm: 1.0,
        }
    }
}

impl FlowBaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.contains(&0) || self.embed_dim == 0 || self.sample_steps == 0 || !(self.max_grad_norm > 0.0) {
            return Err(Error::Config(
                "flow baseline needs positive widths, steps and clip norm".into(),
            ));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<LayerShape> {
        let mut shapes = Vec::new();
        let mut width = 1 + self.embed_dim;
        for &h in &self.hidden {
            shapes.push(LayerShape::new(width, h, Activation::Relu));
            width = h;
        }
        shapes.push(LayerShape::new(width, 1, Activation::Identity));
        shapes
    }
}

#[derive(Clone, Debug)]
pub struct FlowBaselineModel {
    config: FlowBaselineConfig,
    embed: CosineEmbedding,
    params: MlpParams,
    adam: AdamState,
}

impl FlowBaselineModel {
    pub fn new<R: Rng + ?Sized>(config: FlowBaselineConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let params = MlpParams::init(config.shapes(), 0.1, rng)?;
        let adam = AdamState::new(&params, config.adam);
        Ok(Self {
            embed: CosineEmbedding::new(config.embed_dim),
            config,
            params,
            adam,
        })
    }

    pub fn config(&self) -> &FlowBaselineConfig {
        &self.config
    }

    pub fn params(&self) -> &MlpParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams {
        &mut self.params
    }

    fn input(&self, z: f64, t: f64, buf: &mut Vec<f64>) {
        buf.clear();
        buf.push(z);
        buf.resize(1 + self.config.embed_dim, 0.0);
        self.embed.embed_into(t, &mut buf[1..]);
    }

    pub fn velocity(&self, z: f64, t: f64) -> f64 {
        let mut buf = Vec::new();
        let mut tape = Tape::default();
        self.input(z, t, &mut buf);
        let layers = 0..self.params.shapes().len();
        self.params.forward_layers(layers, &buf, &mut tape)[0]
    }

    /// One Adam step on the mean squared velocity error over `batch`.
    pub fn train_step<R: Rng + ?Sized>(&mut self, batch: &ParticleSet, rng: &mut R) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let n = batch.len() as f64;
        let layers = 0..self.params.shapes().len();
        let mut grads = Gradients::zeros_like(&self.params);
        let mut tape = Tape::default();
        let mut buf = Vec::new();
        let mut loss = 0.0;
        for &z1 in batch.atoms() {
            let z0: f64 = rng.sample(StandardNormal);
            let t: f64 = rng.random();
            let zt = (1.0 - t) * z0 + t * z1;
            self.input(zt, t, &mut buf);
            let v = self.params.forward_layers(layers.clone(), &buf, &mut tape)[0];
            let err = v - (z1 - z0);
            loss += err * err / n;
            self.params
                .backward_layers(layers.clone(), &tape, &[2.0 * err / n], &mut grads);
        }
        clip_in_place(&mut grads, self.config.max_grad_norm);
        adam_step(&mut self.adam, &mut self.params, &grads)?;
        Ok(loss)
    }

    /// `n` samples by Euler integration of the velocity field from noise.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<ParticleSet> {
        let steps = self.config.sample_steps;
        let dt = 1.0 / steps as f64;
        let mut buf = Vec::new();
        let mut tape = Tape::default();
        let layers = 0..self.params.shapes().len();
        let atoms = (0..n)
            .map(|_| {
                let mut z: f64 = rng.sample(StandardNormal);
                for k in 0..steps {
                    self.input(z, k as f64 * dt, &mut buf);
                    z += dt * self.params.forward_layers(layers.clone(), &buf, &mut tape)[0];
                }
                z
            })
            .collect();
        ParticleSet::new(atoms)
    }
}
