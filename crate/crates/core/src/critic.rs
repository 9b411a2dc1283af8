//! Diffusion bridge critic: an ensemble of endpoint predictors trained with a
//! quantile loss plus an anchor loss, sampled with integral-consistent steps.
//!
//! A return sample for level `tau` starts at `z = z_start = tau` and is
//! pushed along the bridge towards the network's endpoint prediction:
//!
//! ```text
//! for m in 0..M:
//!     z_hat = f(z, t_m, tau, s, a)
//!     z    += (xi(t_m) - xi(t_{m+1})) * (z_hat - z_start)
//! ```
//!
//! The weights sum to exactly one, so a network that always predicts the same
//! endpoint lands on it for every step count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{BridgeParams, TimeGrid};
use crate::error::{Error, Result};
use crate::net::{
    adam_step, AdamConfig, AdamState, CriticArch, CriticInput, CriticTape, Gradients, MlpParams,
};
use crate::quantile::{huber, huber_grad, quantile_loss, quantile_loss_grad, ParticleSet, QuantileLevels};

pub mod flow;

pub use flow::{FlowBaselineConfig, FlowBaselineModel};

/// One environment step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
    pub r: f64,
    pub s_next: Vec<f64>,
    pub a_next: Vec<f64>,
    /// 1 while the episode continues, 0 when `s_next` is terminal.
    pub mask: f64,
    /// `log pi(a_next | s_next)`, only used when the entropy term is on.
    #[serde(default)]
    pub next_log_prob: f64,
}

impl Transition {
    pub fn validate(&self) -> Result<()> {
        if self.mask != 0.0 && self.mask != 1.0 {
            return Err(Error::Config(format!("terminal mask must be 0 or 1, got {}", self.mask)));
        }
        let finite = self
            .s
            .iter()
            .chain(&self.a)
            .chain(&self.s_next)
            .chain(&self.a_next)
            .chain([&self.r, &self.next_log_prob])
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("transition has non-finite entries".into()));
        }
        Ok(())
    }
}

/// Network layout shared by all heads (state and action sizes come from the task).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    #[serde(default)]
    pub projection: Option<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 32,
            projection: None,
        }
    }
}

impl NetConfig {
    pub fn arch(&self, state_dim: usize, action_dim: usize) -> CriticArch {
        CriticArch {
            state_dim,
            action_dim,
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            projection: self.projection,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DbcConfig {
    pub gamma: f64,
    pub kappa: f64,
    pub anchor_weight: f64,
    /// Turning this off leaves the anchor loss alone.
    pub quantile_loss: bool,
    pub k_target: usize,
    pub k_online: usize,
    pub flow_steps: usize,
    pub heads: usize,
    /// Total number of stacked target atoms removed by DropTop.
    pub drop_count: usize,
    pub tau_target: f64,
    pub bridge: BridgeParams,
    pub entropy_alpha: f64,
    pub adam: AdamConfig,
    pub max_grad_norm: f64,
    pub net: NetConfig,
}

impl Default for DbcConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            kappa: 1.0,
            anchor_weight: 0.01,
            quantile_loss: true,
            k_target: 128,
            k_online: 64,
            flow_steps: 5,
            heads: 2,
            drop_count: 0,
            tau_target: 0.005,
            bridge: BridgeParams::default(),
            entropy_alpha: 0.0,
            adam: AdamConfig::default(),
            max_grad_norm: 1.0,
            net: NetConfig::default(),
        }
    }
}

impl DbcConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(0.0..1.0).contains(&self.gamma) {
            return fail(format!("gamma must lie in [0, 1), got {}", self.gamma));
        }
        if !(self.kappa >= 0.0) || !(self.anchor_weight >= 0.0) || !(self.entropy_alpha >= 0.0) {
            return fail("kappa, anchor_weight and entropy_alpha must be non-negative".into());
        }
        if self.k_online == 0 || self.k_target < self.k_online {
            return fail(format!(
                "need k_target >= k_online >= 1, got {} / {}",
                self.k_target, self.k_online
            ));
        }
        if self.flow_steps == 0 || self.heads == 0 {
            return fail("flow_steps and heads must be positive".into());
        }
        if self.drop_count >= self.k_target * self.heads {
            return fail(format!(
                "drop_count {} must be below k_target * heads = {}",
                self.drop_count,
                self.k_target * self.heads
            ));
        }
        if !(self.tau_target > 0.0 && self.tau_target <= 1.0) {
            return fail(format!("tau_target must lie in (0, 1], got {}", self.tau_target));
        }
        if !(self.max_grad_norm > 0.0) {
            return fail("max_grad_norm must be positive".into());
        }
        if !self.quantile_loss && self.anchor_weight == 0.0 {
            return fail("both loss terms are disabled".into());
        }
        self.bridge.validate()
    }
}

/// Precomputed integral-consistent weights on a time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Sampler {
    grid: TimeGrid,
    weights: Vec<f64>,
}

impl Sampler {
    pub fn new(bridge: &BridgeParams, grid: TimeGrid) -> Self {
        let weights = bridge.ctilde_weights(&grid);
        Self { grid, weights }
    }

    pub fn uniform(bridge: &BridgeParams, steps: usize) -> Self {
        Self::new(bridge, TimeGrid::uniform(steps))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Runs the bridge from `z_start = tau` with an arbitrary endpoint
    /// predictor `predict(z, t)`.
    pub fn run(&self, tau: f64, mut predict: impl FnMut(f64, f64) -> f64) -> f64 {
        let start = tau;
        let mut z = start;
        for (&t, &w) in self.grid.points().iter().zip(&self.weights) {
            let z_hat = predict(z, t);
            z += w * (z_hat - start);
        }
        z
    }

    /// One return sample from a critic head.
    pub fn sample(
        &self,
        arch: &CriticArch,
        params: &MlpParams,
        tau: f64,
        state: &[f64],
        action: &[f64],
        tape: &mut CriticTape,
    ) -> f64 {
        self.run(tau, |z, t| {
            let x = CriticInput {
                z,
                t,
                tau,
                state,
                action,
            };
            arch.forward(params, &x, tape)
        })
    }

    /// Like [`sample`](Self::sample) but also backpropagates `upstream`
    /// through every step of the trajectory into `grads`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_with_grad(
        &self,
        arch: &CriticArch,
        params: &MlpParams,
        tau: f64,
        state: &[f64],
        action: &[f64],
        upstream: f64,
        grads: &mut Gradients,
    ) -> f64 {
        let steps = self.weights.len();
        let mut tapes = vec![CriticTape::default(); steps];
        let start = tau;
        let mut z = start;
        for (m, tape) in tapes.iter_mut().enumerate() {
            let x = CriticInput {
                z,
                t: self.grid.points()[m],
                tau,
                state,
                action,
            };
            let z_hat = arch.forward(params, &x, tape);
            z += self.weights[m] * (z_hat - start);
        }
        // z_{m+1} = z_m + w_m (f(z_m) - z_start), so the adjoint picks up
        // w_m * df/dz at every step.
        let mut adjoint = upstream;
        for m in (0..steps).rev() {
            let dz = arch.backward(params, &tapes[m], adjoint * self.weights[m], grads);
            adjoint += dz;
        }
        z
    }
}

/// Per-head return samples for every level in `taus`.
pub fn sample_returns(
    arch: &CriticArch,
    heads: &[MlpParams],
    state: &[f64],
    action: &[f64],
    taus: &QuantileLevels,
    sampler: &Sampler,
) -> Result<Vec<ParticleSet>> {
    let probe = CriticInput {
        z: 0.0,
        t: 0.0,
        tau: 0.5,
        state,
        action,
    };
    arch.check_input(&probe)?;
    let mut tape = CriticTape::default();
    heads
        .iter()
        .map(|params| {
            arch.check_params(params)?;
            let atoms = taus
                .as_slice()
                .iter()
                .map(|&tau| sampler.sample(arch, params, tau, state, action, &mut tape))
                .collect();
            ParticleSet::new(atoms)
        })
        .collect()
}

/// Quantile term for one prediction: `sum_j rho_tau(y_j - z_hat) / K_tgt`
/// and its derivative with respect to `z_hat`.
pub fn quantile_term(z_hat: f64, tau: f64, targets: &[f64], kappa: f64) -> (f64, f64) {
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut grad = 0.0;
    for &y in targets {
        let u = y - z_hat;
        loss += quantile_loss(u, tau, kappa);
        grad -= quantile_loss_grad(u, tau, kappa);
    }
    (loss / n, grad / n)
}

/// Quantile loss summed over predictions `z_hat[i]` at levels `taus[i]`,
/// normalized by the number of targets.
pub fn quantile_loss_term(z_hat: &[f64], taus: &[f64], targets: &ParticleSet, kappa: f64) -> f64 {
    z_hat
        .iter()
        .zip(taus)
        .map(|(&z, &tau)| quantile_term(z, tau, targets.atoms(), kappa).0)
        .sum()
}

/// `sum_i huber(z_hat[i] - sample_quantile(targets, taus[i]), kappa)`.
pub fn anchor_loss_term(
    z_hat: &[f64],
    taus: &[f64],
    targets: &ParticleSet,
    kappa: f64,
) -> Result<f64> {
    let anchors = targets.sample_quantiles(taus)?;
    Ok(z_hat
        .iter()
        .zip(&anchors)
        .map(|(&z, &y)| huber(z - y, kappa))
        .sum())
}

/// Loss components of one update, averaged over heads and transitions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossReport {
    pub quantile: f64,
    pub anchor: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.quantile.is_finite() && self.anchor.is_finite() && self.total.is_finite()
    }
}

/// Online and target heads with their optimizer state.
#[derive(Clone, Debug)]
pub struct CriticEnsemble {
    config: DbcConfig,
    arch: CriticArch,
    sampler: Sampler,
    online: Vec<MlpParams>,
    target: Vec<MlpParams>,
    adam: Vec<AdamState>,
}

impl CriticEnsemble {
    pub fn new(config: DbcConfig, state_dim: usize, action_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let arch = config.net.arch(state_dim, action_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let online = (0..config.heads)
            .map(|_| arch.init(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let target = online.clone();
        let adam = online
            .iter()
            .map(|p| AdamState::new(p, config.adam))
            .collect();
        let sampler = Sampler::uniform(&config.bridge, config.flow_steps);
        Ok(Self {
            config,
            arch,
            sampler,
            online,
            target,
            adam,
        })
    }

    pub fn config(&self) -> &DbcConfig {
        &self.config
    }

    pub fn arch(&self) -> &CriticArch {
        &self.arch
    }

    pub fn sampler(&self) -> &Sampler {
        &self.sampler
    }

    pub fn online(&self) -> &[MlpParams] {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut [MlpParams] {
        &mut self.online
    }

    pub fn target(&self) -> &[MlpParams] {
        &self.target
    }

    pub fn target_mut(&mut self) -> &mut [MlpParams] {
        &mut self.target
    }

    /// Replaces the sampling grid (uniform by default).
    pub fn set_grid(&mut self, grid: TimeGrid) {
        self.sampler = Sampler::new(&self.config.bridge, grid);
    }

    /// Copies online parameters into the target heads.
    /// Overrides the Adam step size of every head, e.g. for a decay schedule.
    pub fn set_lr(&mut self, lr: f64) {
        self.adam.iter_mut().for_each(|a| a.config.lr = lr);
    }

    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
    }

    pub fn is_finite(&self) -> bool {
        self.online.iter().chain(&self.target).all(MlpParams::is_finite)
    }

    pub fn sample_online(
        &self,
        state: &[f64],
        action: &[f64],
        taus: &QuantileLevels,
    ) -> Result<Vec<ParticleSet>> {
        sample_returns(&self.arch, &self.online, state, action, taus, &self.sampler)
    }

    pub fn sample_target(
        &self,
        state: &[f64],
        action: &[f64],
        taus: &QuantileLevels,
    ) -> Result<Vec<ParticleSet>> {
        sample_returns(&self.arch, &self.target, state, action, taus, &self.sampler)
    }

    /// All heads' online samples at `taus`, stacked and sorted.
    pub fn online_distribution(
        &self,
        state: &[f64],
        action: &[f64],
        taus: &QuantileLevels,
    ) -> Result<ParticleSet> {
        let heads = self.sample_online(state, action, taus)?;
        ParticleSet::new_sorted(heads.into_iter().flat_map(ParticleSet::into_atoms).collect())
    }

    /// Bootstrapped target particles `r + m * gamma * (z - alpha * log pi)`
    /// from the target heads at `(s', a')`, after DropTop.
    pub fn build_targets(&self, tr: &Transition, seed: u64) -> Result<ParticleSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.build_targets_with(tr, &mut rng)
    }

    fn build_targets_with<R: Rng + ?Sized>(&self, tr: &Transition, rng: &mut R) -> Result<ParticleSet> {
        let cfg = &self.config;
        let taus = QuantileLevels::random(cfg.k_target, rng);
        if tr.mask == 0.0 {
            return ParticleSet::new(vec![tr.r; cfg.k_target * cfg.heads - cfg.drop_count]);
        }
        let heads = self.sample_target(&tr.s_next, &tr.a_next, &taus)?;
        let stacked =
            ParticleSet::new(heads.into_iter().flat_map(ParticleSet::into_atoms).collect())?;
        let kept = stacked.droptop(cfg.drop_count)?;
        let entropy = cfg.entropy_alpha * tr.next_log_prob;
        Ok(kept.map(|z| tr.r + tr.mask * cfg.gamma * (z - entropy)))
    }

    /// One optimizer update on a single transition.
    pub fn train_step(&mut self, tr: &Transition, seed: u64) -> Result<LossReport> {
        self.train_batch(std::slice::from_ref(tr), seed)
    }

    /// One optimizer update on a batch; losses are averaged over transitions.
    pub fn train_batch(&mut self, batch: &[Transition], seed: u64) -> Result<LossReport> {
        if batch.is_empty() {
            return Err(Error::Empty);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grads: Vec<Gradients> = self.online.iter().map(Gradients::zeros_like).collect();
        let mut report = LossReport::default();
        for tr in batch {
            tr.validate()?;
            let targets = self.build_targets_with(tr, &mut rng)?;
            let r = self.accumulate(&tr.s, &tr.a, &targets, &mut rng, &mut grads)?;
            report.quantile += r.quantile;
            report.anchor += r.anchor;
            report.total += r.total;
        }
        let scale = 1.0 / batch.len() as f64;
        report.quantile *= scale;
        report.anchor *= scale;
        report.total *= scale;
        grads.iter_mut().for_each(|g| g.scale(scale));
        self.apply(&mut grads)?;
        self.soft_update();
        Ok(report)
    }

    /// One update against externally supplied target particles at `(s, a)`.
    /// Target heads are still Polyak-averaged afterwards.
    pub fn fit_step(
        &mut self,
        state: &[f64],
        action: &[f64],
        targets: &ParticleSet,
        seed: u64,
    ) -> Result<LossReport> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grads: Vec<Gradients> = self.online.iter().map(Gradients::zeros_like).collect();
        let targets = targets.sorted();
        let report = self.accumulate(state, action, &targets, &mut rng, &mut grads)?;
        self.apply(&mut grads)?;
        self.soft_update();
        Ok(report)
    }

    /// Losses at `t = 0` and one random `t_m` for every head, averaged over
    /// heads; gradients are added into `grads`.
    fn accumulate<R: Rng + ?Sized>(
        &self,
        state: &[f64],
        action: &[f64],
        targets: &ParticleSet,
        rng: &mut R,
        grads: &mut [Gradients],
    ) -> Result<LossReport> {
        let cfg = &self.config;
        let targets = targets.sorted();
        let taus = QuantileLevels::random(cfg.k_online, rng);
        let anchors = targets.sample_quantiles(taus.as_slice())?;
        let t_m: f64 = rng.random();
        let points: Vec<[(f64, f64); 2]> = taus
            .as_slice()
            .iter()
            .zip(&anchors)
            .map(|(&tau, &anchor)| {
                [(tau, 0.0), (cfg.bridge.interpolate(tau, anchor, t_m), t_m)]
            })
            .collect();

        let head_weight = 1.0 / cfg.heads as f64;
        let mut report = LossReport::default();
        let mut tape = CriticTape::default();
        for (params, g) in self.online.iter().zip(grads.iter_mut()) {
            for ((&tau, &anchor), pair) in taus.as_slice().iter().zip(&anchors).zip(&points) {
                for &(z_in, t) in pair {
                    let x = CriticInput {
                        z: z_in,
                        t,
                        tau,
                        state,
                        action,
                    };
                    let z_hat = self.arch.forward(params, &x, &mut tape);
                    let mut dloss = 0.0;
                    if cfg.quantile_loss {
                        let (l, d) = quantile_term(z_hat, tau, targets.atoms(), cfg.kappa);
                        report.quantile += head_weight * l;
                        report.total += head_weight * l;
                        dloss += d;
                    }
                    let la = huber(z_hat - anchor, cfg.kappa);
                    report.anchor += head_weight * la;
                    report.total += head_weight * cfg.anchor_weight * la;
                    dloss += cfg.anchor_weight * huber_grad(z_hat - anchor, cfg.kappa);
                    if dloss != 0.0 {
                        self.arch.backward(params, &tape, head_weight * dloss, g);
                    }
                }
            }
        }
        Ok(report)
    }

    /// Joint global-norm clipping over all heads, then Adam per head.
    fn apply(&mut self, grads: &mut [Gradients]) -> Result<()> {
        let norm = grads
            .iter()
            .map(|g| g.as_slice().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm > self.config.max_grad_norm {
            let s = self.config.max_grad_norm / norm;
            grads.iter_mut().for_each(|g| g.scale(s));
        }
        for ((params, adam), g) in self.online.iter_mut().zip(&mut self.adam).zip(grads.iter()) {
            adam_step(adam, params, g)?;
        }
        Ok(())
    }

    /// `target <- tau_target * online + (1 - tau_target) * target`.
    pub fn soft_update(&mut self) {
        let rate = self.config.tau_target;
        for (tgt, onl) in self.target.iter_mut().zip(&self.online) {
            soft_update(tgt, onl, rate);
        }
    }

    /// Mean over `k_online * heads` online samples at random levels.
    pub fn q_value(&self, state: &[f64], action: &[f64], seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let taus = QuantileLevels::random(self.config.k_online, &mut rng);
        Ok(self.online_distribution(state, action, &taus)?.mean())
    }

    /// Mean of the online samples at fixed levels, e.g. midpoints for a
    /// quadrature estimate of `Q(s, a)` without sampling noise.
    pub fn q_value_at(&self, state: &[f64], action: &[f64], taus: &QuantileLevels) -> Result<f64> {
        Ok(self.online_distribution(state, action, taus)?.mean())
    }
}

/// Elementwise `target <- rate * online + (1 - rate) * target`.
pub fn soft_update(target: &mut MlpParams, online: &MlpParams, rate: f64) {
    for (t, &o) in target.as_mut_slice().iter_mut().zip(online.as_slice()) {
        *t = rate * o + (1.0 - rate) * *t;
    }
}
