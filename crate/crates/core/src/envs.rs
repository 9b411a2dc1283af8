//! Small tasks with known return distributions: the Bellman-drift mixture and
//! tabular MDPs with exact or Monte Carlo return oracles.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::critic::Transition;
use crate::error::{Error, Result};
use crate::quantile::ParticleSet;

const PROB_TOL: f64 = 1e-12;
const TRUNCATION_TOL: f64 = 1e-6;
const MAX_ENUMERATION: usize = 1_000_000;

fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

/// Finite Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<Component>,
}

impl Mixture {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Empty);
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        let ok = self
            .components
            .iter()
            .all(|c| c.weight > 0.0 && c.std >= 0.0 && c.mean.is_finite());
        if !ok || (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(
                "mixture weights must be positive and sum to 1, stds non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.weight * c.mean).sum()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|c| {
                let p = if c.std > 0.0 {
                    normal_cdf((x - c.mean) / c.std)
                } else if x >= c.mean {
                    1.0
                } else {
                    0.0
                };
                c.weight * p
            })
            .sum()
    }

    /// Probability mass of `[lo, hi]`.
    pub fn mass(&self, lo: f64, hi: f64) -> f64 {
        self.cdf(hi) - self.cdf(lo)
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ParticleSet {
        let atoms = (0..n)
            .map(|_| {
                let i = draw(self.components.iter().map(|c| c.weight), rng);
                let c = &self.components[i];
                let eps: f64 = rng.sample(StandardNormal);
                c.mean + c.std * eps
            })
            .collect();
        ParticleSet::new(atoms).expect("mixture samples are finite")
    }

    /// `W1 = \int |F_n(x) - F(x)| dx`, integrated on a fine grid covering
    /// both the samples and the mixture support.
    pub fn w1_to(&self, samples: &ParticleSet) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Empty);
        }
        let sorted = samples.sorted();
        let atoms = sorted.atoms();
        let spread = self
            .components
            .iter()
            .map(|c| c.std)
            .fold(0.0, f64::max)
            .max(1e-3);
        let lo = self
            .components
            .iter()
            .map(|c| c.mean - 10.0 * c.std)
            .fold(atoms[0], f64::min)
            - spread;
        let hi = self
            .components
            .iter()
            .map(|c| c.mean + 10.0 * c.std)
            .fold(atoms[atoms.len() - 1], f64::max)
            + spread;
        let cells = 200_000;
        let h = (hi - lo) / cells as f64;
        let n = atoms.len() as f64;
        let mut below = 0;
        let mut acc = 0.0;
        for i in 0..cells {
            let x = lo + (i as f64 + 0.5) * h;
            while below < atoms.len() && atoms[below] <= x {
                below += 1;
            }
            acc += (below as f64 / n - self.cdf(x)).abs();
        }
        Ok(acc * h)
    }

    /// Affine image `r + g * Z`.
    pub fn affine(&self, shift: f64, scale: f64) -> Mixture {
        Mixture {
            components: self
                .components
                .iter()
                .map(|c| Component {
                    weight: c.weight,
                    mean: shift + scale * c.mean,
                    std: scale.abs() * c.std,
                })
                .collect(),
        }
    }
}

/// Iterated Bellman drift `Z_k = r + gamma * Z_{k-1}` of a Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftTask {
    pub initial: Mixture,
    pub reward: f64,
    pub gamma: f64,
    pub iterations: usize,
    pub inner_steps: usize,
    /// Training steps used to fit the iteration-0 distribution.
    pub initial_steps: usize,
    /// Samples drawn per iteration for evaluation and as the next target pool.
    pub samples: usize,
}

impl Default for DriftTask {
    fn default() -> Self {
        Self {
            initial: Mixture {
                components: vec![
                    Component {
                        weight: 0.5,
                        mean: -2.0,
                        std: 0.3,
                    },
                    Component {
                        weight: 0.5,
                        mean: 2.0,
                        std: 0.3,
                    },
                ],
            },
            reward: 1.0,
            gamma: 0.9,
            iterations: 5,
            inner_steps: 500,
            initial_steps: 10_000,
            samples: 10_000,
        }
    }
}

impl DriftTask {
    pub fn validate(&self) -> Result<()> {
        self.initial.validate()?;
        if self.initial.components.iter().any(|c| !(c.std > 0.0)) {
            return Err(Error::Config("drift components need positive stds".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if self.samples == 0 {
            return Err(Error::Config("drift task needs at least one sample".into()));
        }
        Ok(())
    }

    /// Exact law of `Z_k`.
    pub fn true_distribution(&self, k: usize) -> Result<Mixture> {
        if k > self.iterations {
            return Err(Error::Config(format!(
                "iteration {k} beyond the task's {} iterations",
                self.iterations
            )));
        }
        let g = self.gamma.powi(k as i32);
        // r (1 - g^k) / (1 - g) written as a finite geometric sum.
        let shift: f64 = (0..k).map(|i| self.reward * self.gamma.powi(i as i32)).sum();
        Ok(self.initial.affine(shift, g))
    }

    /// Half-width of the gap windows at iteration `k`: half the component std.
    pub fn window(&self, k: usize) -> Result<f64> {
        let mix = self.true_distribution(k)?;
        Ok(0.5 * mix.components.iter().map(|c| c.std).fold(0.0, f64::max))
    }

    /// Lowest and highest component means of `Z_k`.
    pub fn modes(&self, k: usize) -> Result<(f64, f64)> {
        let mix = self.true_distribution(k)?;
        let lo = mix.components.iter().map(|c| c.mean).fold(f64::INFINITY, f64::min);
        let hi = mix.components.iter().map(|c| c.mean).fold(f64::NEG_INFINITY, f64::max);
        Ok((lo, hi))
    }

    /// Gap statistic of the samples against the true modes of `Z_k`.
    pub fn gap(&self, samples: &ParticleSet, k: usize) -> Result<f64> {
        let (lo, hi) = self.modes(k)?;
        bimodality_gap(samples, lo, hi, self.window(k)?)
    }

    /// Gap statistic of the true law of `Z_k`.
    pub fn analytic_gap(&self, k: usize) -> Result<f64> {
        let (lo, hi) = self.modes(k)?;
        let w = self.window(k)?;
        let mix = self.true_distribution(k)?;
        let mid = 0.5 * (lo + hi);
        Ok(mix.mass(lo - w, lo + w) + mix.mass(hi - w, hi + w) - mix.mass(mid - w, mid + w))
    }
}

/// `r + gamma * z` for every atom.
pub fn drift_sample_target(samples: &ParticleSet, reward: f64, gamma: f64) -> ParticleSet {
    samples.map(|z| reward + gamma * z)
}

/// Mass within `half_width` of either mode minus mass within `half_width`
/// of their midpoint. Positive means bimodal; near zero or negative means the
/// modes have merged.
pub fn bimodality_gap(
    samples: &ParticleSet,
    mode_lo: f64,
    mode_hi: f64,
    half_width: f64,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty);
    }
    if !(mode_lo < mode_hi) {
        return Err(Error::Interval {
            lo: mode_lo,
            hi: mode_hi,
        });
    }
    let mid = 0.5 * (mode_lo + mode_hi);
    let frac = |c: f64| {
        samples.atoms().iter().filter(|&&z| (z - c).abs() <= half_width).count() as f64
            / samples.len() as f64
    };
    Ok(frac(mode_lo) + frac(mode_hi) - frac(mid))
}

/// High-probability bound on `W1` between an `n`-sample empirical law and
/// its source when the support spans `range`: by the DKW inequality
/// `sup |F_n - F| <= sqrt(ln(2 / delta) / 2n)` with probability `1 - delta`,
/// and `W1 <= range * sup |F_n - F|`.
pub fn dkw_w1_bound(range: f64, n: usize, delta: f64) -> f64 {
    range * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt()
}

/// One outcome of a finite distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub value: f64,
    pub prob: f64,
}

/// Tabular MDP under a fixed stochastic policy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularMdp {
    pub name: String,
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`: finite reward law.
    pub rewards: Vec<Vec<Vec<Outcome>>>,
    /// `policy[s][a]`.
    pub policy: Vec<Vec<f64>>,
    pub gamma: f64,
    /// Entering one of these ends the episode.
    #[serde(default)]
    pub absorbing: Vec<usize>,
    #[serde(default)]
    pub horizon_cap: Option<usize>,
}

fn check_row(what: &str, row: &[f64]) -> Result<()> {
    let sum: f64 = row.iter().sum();
    if row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Config(format!("{what} is not a probability row (sum {sum})")));
    }
    Ok(())
}

impl TabularMdp {
    pub fn from_json(text: &str) -> Result<Self> {
        let mdp: Self = serde_json::from_str(text)?;
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut text = String::new();
        File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(Error::Config("MDP needs at least one state and action".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        let shape_ok = self.transitions.len() == ns
            && self.rewards.len() == ns
            && self.policy.len() == ns
            && self.transitions.iter().all(|r| r.len() == na && r.iter().all(|p| p.len() == ns))
            && self.rewards.iter().all(|r| r.len() == na)
            && self.policy.iter().all(|p| p.len() == na);
        if !shape_ok {
            return Err(Error::Shape(format!(
                "MDP tables must be indexed [{ns}][{na}]..."
            )));
        }
        if let Some(&s) = self.absorbing.iter().find(|&&s| s >= ns) {
            return Err(Error::Config(format!("absorbing state {s} out of range")));
        }
        for s in 0..ns {
            check_row(&format!("policy[{s}]"), &self.policy[s])?;
            for a in 0..na {
                check_row(&format!("transitions[{s}][{a}]"), &self.transitions[s][a])?;
                let law = &self.rewards[s][a];
                if law.is_empty() || law.iter().any(|o| !o.value.is_finite()) {
                    return Err(Error::Config(format!("rewards[{s}][{a}] must be finite and non-empty")));
                }
                let probs: Vec<f64> = law.iter().map(|o| o.prob).collect();
                check_row(&format!("rewards[{s}][{a}]"), &probs)?;
            }
        }
        Ok(())
    }

    pub fn is_absorbing(&self, s: usize) -> bool {
        self.absorbing.contains(&s)
    }

    /// States an episode can be in (everything but absorbing states).
    pub fn live_states(&self) -> Vec<usize> {
        (0..self.n_states).filter(|&s| !self.is_absorbing(s)).collect()
    }

    /// `(s, a)` pairs with a live state.
    pub fn live_pairs(&self) -> Vec<(usize, usize)> {
        self.live_states()
            .into_iter()
            .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
            .collect()
    }

    pub fn state_features(&self, s: usize) -> Vec<f64> {
        one_hot(s, self.n_states)
    }

    pub fn action_features(&self, a: usize) -> Vec<f64> {
        one_hot(a, self.n_actions)
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.rewards
            .iter()
            .flatten()
            .flatten()
            .map(|o| o.value.abs())
            .fold(0.0, f64::max)
    }

    /// Rollout length `T` with `gamma^T r_max / (1 - gamma) <= 1e-6`, or the
    /// configured cap if it satisfies that bound.
    pub fn horizon(&self) -> Result<usize> {
        let r_max = self.max_abs_reward();
        let tail = |t: usize| self.gamma.powi(t as i32) * r_max / (1.0 - self.gamma);
        match self.horizon_cap {
            Some(cap) if tail(cap) > TRUNCATION_TOL => Err(Error::Config(format!(
                "horizon cap {cap} leaves a truncation bias of {:.3e}",
                tail(cap)
            ))),
            Some(cap) => Ok(cap),
            None => {
                let mut t = 1;
                while tail(t) > TRUNCATION_TOL {
                    t += 1;
                }
                Ok(t)
            }
        }
    }

    fn check_state(&self, s: usize) -> Result<()> {
        if s >= self.n_states {
            return Err(Error::Config(format!(
                "state {s} out of range for {} states",
                self.n_states
            )));
        }
        Ok(())
    }

    /// One step from `s` under the policy, featurized for the critic.
    pub fn sample_transition<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Result<Transition> {
        self.check_state(s)?;
        let a = draw(self.policy[s].iter().copied(), rng);
        let r = self.sample_reward(s, a, rng);
        let s_next = draw(self.transitions[s][a].iter().copied(), rng);
        let a_next = draw(self.policy[s_next].iter().copied(), rng);
        Ok(Transition {
            s: self.state_features(s),
            a: self.action_features(a),
            r,
            s_next: self.state_features(s_next),
            a_next: self.action_features(a_next),
            mask: if self.is_absorbing(s_next) { 0.0 } else { 1.0 },
            next_log_prob: 0.0,
        })
    }

    fn sample_reward<R: Rng + ?Sized>(&self, s: usize, a: usize, rng: &mut R) -> f64 {
        let law = &self.rewards[s][a];
        law[draw(law.iter().map(|o| o.prob), rng)].value
    }

    /// One truncated discounted return starting with action `a` in `s`.
    pub fn rollout<R: Rng + ?Sized>(&self, s: usize, a: usize, horizon: usize, rng: &mut R) -> f64 {
        let (mut s, mut a) = (s, a);
        let mut ret = 0.0;
        let mut discount = 1.0;
        for _ in 0..horizon {
            ret += discount * self.sample_reward(s, a, rng);
            s = draw(self.transitions[s][a].iter().copied(), rng);
            if self.is_absorbing(s) {
                break;
            }
            a = draw(self.policy[s].iter().copied(), rng);
            discount *= self.gamma;
        }
        ret
    }

    /// Monte Carlo oracle from `n` independent rollouts.
    pub fn oracle_monte_carlo(&self, s: usize, a: usize, n: usize, seed: u64) -> Result<ReturnOracle> {
        self.check_state(s)?;
        if n == 0 {
            return Err(Error::Empty);
        }
        let horizon = self.horizon()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut atoms: Vec<f64> = (0..n).map(|_| self.rollout(s, a, horizon, &mut rng)).collect();
        atoms.sort_by(f64::total_cmp);
        Ok(ReturnOracle {
            mode: OracleMode::MonteCarlo,
            seed: Some(seed),
            weights: vec![1.0 / n as f64; n],
            atoms,
        })
    }

    /// Exact law by enumerating every trajectory with probability above
    /// `1e-12`. Fails when the chain does not terminate within the horizon.
    pub fn oracle_exact(&self, s: usize, a: usize) -> Result<ReturnOracle> {
        self.check_state(s)?;
        let horizon = self.horizon()?;
        let mut out = Vec::new();
        let mut stack = vec![(s, a, 0usize, 1.0, 0.0, 1.0)];
        let mut lost = 0.0;
        let mut visited = 0usize;
        while let Some((s, a, depth, prob, ret, discount)) = stack.pop() {
            visited += 1;
            if visited > MAX_ENUMERATION {
                return Err(Error::Config(format!(
                    "exact enumeration exceeded {MAX_ENUMERATION} nodes; use the Monte Carlo oracle"
                )));
            }
            if depth == horizon {
                lost += prob;
                continue;
            }
            for r in &self.rewards[s][a] {
                let value = ret + discount * r.value;
                for (s2, &p2) in self.transitions[s][a].iter().enumerate() {
                    let p = prob * r.prob * p2;
                    if p <= PROB_TOL {
                        lost += p;
                        continue;
                    }
                    if self.is_absorbing(s2) {
                        out.push((value, p));
                        continue;
                    }
                    for (a2, &pa) in self.policy[s2].iter().enumerate() {
                        if pa > 0.0 {
                            stack.push((s2, a2, depth + 1, p * pa, value, discount * self.gamma));
                        }
                    }
                }
            }
        }
        if lost > 1e-9 {
            return Err(Error::Config(format!(
                "exact enumeration dropped {lost:.3e} probability; use the Monte Carlo oracle"
            )));
        }
        ReturnOracle::from_weighted(out, OracleMode::Exact)
    }

    /// Exact oracle when enumeration succeeds, otherwise Monte Carlo.
    pub fn oracle(&self, s: usize, a: usize, n: usize, seed: u64) -> Result<ReturnOracle> {
        match self.oracle_exact(s, a) {
            Ok(o) => Ok(o),
            Err(Error::Config(_)) => self.oracle_monte_carlo(s, a, n, seed),
            Err(e) => Err(e),
        }
    }

    /// Bandit with two actions: a fair coin on `{0, 2}` and a
    /// `{1, 2, 3}` reward with weights `1/4, 1/2, 1/4`.
    pub fn desk_bandit() -> Self {
        let o = |value, prob| Outcome { value, prob };
        Self {
            name: "bandit".into(),
            n_states: 2,
            n_actions: 2,
            transitions: vec![vec![vec![0.0, 1.0]; 2], vec![vec![0.0, 1.0]; 2]],
            rewards: vec![
                vec![vec![o(0.0, 0.5), o(2.0, 0.5)], vec![o(1.0, 0.25), o(2.0, 0.5), o(3.0, 0.25)]],
                vec![vec![o(0.0, 1.0)]; 2],
            ],
            policy: vec![vec![0.5, 0.5]; 2],
            gamma: 0.9,
            absorbing: vec![1],
            horizon_cap: None,
        }
    }

    /// `0 -> 1 -> 2` with state 2 absorbing; the first step may also jump
    /// straight to 2. Rewards are symmetric two-point laws, so every return
    /// law is bimodal.
    pub fn desk_chain() -> Self {
        let o = |value, prob| Outcome { value, prob };
        Self {
            name: "chain".into(),
            n_states: 3,
            n_actions: 1,
            transitions: vec![
                vec![vec![0.0, 0.7, 0.3]],
                vec![vec![0.0, 0.0, 1.0]],
                vec![vec![0.0, 0.0, 1.0]],
            ],
            rewards: vec![
                vec![vec![o(-2.0, 0.5), o(2.0, 0.5)]],
                vec![vec![o(-1.0, 0.5), o(1.0, 0.5)]],
                vec![vec![o(0.0, 1.0)]],
            ],
            policy: vec![vec![1.0]; 3],
            gamma: 0.9,
            absorbing: vec![2],
            horizon_cap: None,
        }
    }

    /// Five states on a ring. Each step advances with probability 0.8 and
    /// otherwise stays; rewards are `0.25 s +- 0.5` with equal odds.
    pub fn desk_loop() -> Self {
        let n = 5;
        let o = |value, prob| Outcome { value, prob };
        let transitions = (0..n)
            .map(|s| {
                let mut row = vec![0.0; n];
                row[s] += 0.2;
                row[(s + 1) % n] += 0.8;
                vec![row]
            })
            .collect();
        let rewards = (0..n)
            .map(|s| {
                let base = 0.25 * s as f64;
                vec![vec![o(base - 0.5, 0.5), o(base + 0.5, 0.5)]]
            })
            .collect();
        Self {
            name: "loop".into(),
            n_states: n,
            n_actions: 1,
            transitions,
            rewards,
            policy: vec![vec![1.0]; n],
            gamma: 0.9,
            absorbing: vec![],
            horizon_cap: None,
        }
    }

    pub fn desk_suite() -> Vec<Self> {
        vec![Self::desk_bandit(), Self::desk_chain(), Self::desk_loop()]
    }
}

fn one_hot(i: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

/// Index drawn from (possibly unnormalized) non-negative weights.
fn draw<R: Rng + ?Sized>(weights: impl Iterator<Item = f64> + Clone, rng: &mut R) -> usize {
    let total: f64 = weights.clone().sum();
    let mut u = rng.random::<f64>() * total;
    let mut last = 0;
    for (i, w) in weights.enumerate() {
        if w > 0.0 {
            if u < w {
                return i;
            }
            u -= w;
            last = i;
        }
    }
    last
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Exact,
    MonteCarlo,
}

/// Ground-truth return law as a sorted weighted support.
#[derive(Clone, Debug, PartialEq)]
pub struct ReturnOracle {
    mode: OracleMode,
    seed: Option<u64>,
    atoms: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct OracleManifest {
    mode: OracleMode,
    seed: Option<u64>,
    size: usize,
}

impl ReturnOracle {
    /// Sorts, merges equal values and normalizes.
    pub fn from_weighted(mut pairs: Vec<(f64, f64)>, mode: OracleMode) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Empty);
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let total: f64 = pairs.iter().map(|p| p.1).sum();
        let mut atoms: Vec<f64> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for (v, w) in pairs {
            match atoms.last() {
                Some(&last) if (v - last).abs() <= 1e-12 * v.abs().max(1.0) => {
                    *weights.last_mut().unwrap() += w / total;
                }
                _ => {
                    atoms.push(v);
                    weights.push(w / total);
                }
            }
        }
        Ok(Self {
            mode,
            seed: None,
            atoms,
            weights,
        })
    }

    /// Equal-weight oracle from samples.
    pub fn from_particles(p: &ParticleSet) -> Self {
        let sorted = p.sorted();
        let n = sorted.len();
        Self {
            mode: OracleMode::MonteCarlo,
            seed: None,
            weights: vec![1.0 / n as f64; n],
            atoms: sorted.into_atoms(),
        }
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    /// `E|Z|`, the scale used for relative mean errors.
    pub fn mean_abs(&self) -> f64 {
        self.atoms.iter().zip(&self.weights).map(|(v, w)| v.abs() * w).sum()
    }

    /// Generalized inverse CDF: the smallest atom with `F(x) >= u`.
    pub fn quantile(&self, u: f64) -> f64 {
        let mut cum = 0.0;
        for (&v, &w) in self.atoms.iter().zip(&self.weights) {
            cum += w;
            if cum >= u - 1e-12 {
                return v;
            }
        }
        *self.atoms.last().unwrap()
    }

    /// Distance between the smallest and largest atom.
    pub fn range(&self) -> f64 {
        self.atoms[self.atoms.len() - 1] - self.atoms[0]
    }

    pub fn iqr(&self) -> f64 {
        self.quantile(0.75) - self.quantile(0.25)
    }

    /// Pushes the law through `r + gamma * z`.
    pub fn affine(&self, shift: f64, scale: f64) -> Self {
        let mut out = self.clone();
        out.atoms.iter_mut().for_each(|v| *v = shift + scale * *v);
        if scale < 0.0 {
            out.atoms.reverse();
            out.weights.reverse();
        }
        out
    }

    /// Mixture of laws with the given weights.
    pub fn mix(parts: &[(f64, &ReturnOracle)]) -> Result<Self> {
        let pairs = parts
            .iter()
            .flat_map(|(p, o)| o.atoms.iter().zip(&o.weights).map(move |(&v, &w)| (v, p * w)))
            .collect();
        let mode = if parts.iter().all(|(_, o)| o.mode == OracleMode::Exact) {
            OracleMode::Exact
        } else {
            OracleMode::MonteCarlo
        };
        Self::from_weighted(pairs, mode)
    }

    /// Exact `W1 = \int_0^1 |F^{-1}(u) - G^{-1}(u)| du` between two step
    /// quantile functions.
    pub fn w1(&self, other: &ReturnOracle) -> f64 {
        let (mut i, mut j) = (0, 0);
        let (mut ci, mut cj) = (self.weights[0], other.weights[0]);
        let mut u = 0.0;
        let mut acc = 0.0;
        loop {
            let next = ci.min(cj);
            acc += (next - u).max(0.0) * (self.atoms[i] - other.atoms[j]).abs();
            u = next;
            let last_i = i + 1 == self.atoms.len();
            let last_j = j + 1 == other.atoms.len();
            if ci <= cj && !last_i {
                i += 1;
                ci += self.weights[i];
            } else if !last_j {
                j += 1;
                cj += other.weights[j];
            } else if !last_i {
                i += 1;
                ci += self.weights[i];
            } else {
                break;
            }
        }
        acc
    }

    pub fn w1_to(&self, samples: &ParticleSet) -> f64 {
        self.w1(&Self::from_particles(samples))
    }

    /// Writes `<prefix>.bin` (atoms then weights, f64 little-endian) and
    /// `<prefix>.json`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let mut bin = BufWriter::new(File::create(prefix.with_extension("bin"))?);
        for v in self.atoms.iter().chain(&self.weights) {
            bin.write_all(&v.to_le_bytes())?;
        }
        bin.flush()?;
        let manifest = OracleManifest {
            mode: self.mode,
            seed: self.seed,
            size: self.atoms.len(),
        };
        serde_json::to_writer_pretty(File::create(prefix.with_extension("json"))?, &manifest)?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let manifest: OracleManifest =
            serde_json::from_reader(BufReader::new(File::open(prefix.with_extension("json"))?))?;
        let mut raw = Vec::new();
        File::open(prefix.with_extension("bin"))?.read_to_end(&mut raw)?;
        if raw.len() != 16 * manifest.size {
            return Err(Error::Shape(format!(
                "oracle file holds {} bytes, expected {}",
                raw.len(),
                16 * manifest.size
            )));
        }
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let (atoms, weights) = values.split_at(manifest.size);
        Ok(Self {
            mode: manifest.mode,
            seed: manifest.seed,
            atoms: atoms.to_vec(),
            weights: weights.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn drift_examples() {
        let task = DriftTask::default();
        assert_eq!(task.true_distribution(0).unwrap(), task.initial);
        let zero = DriftTask {
            gamma: 0.0,
            ..DriftTask::default()
        };
        for c in zero.true_distribution(3).unwrap().components {
            assert_eq!((c.mean, c.std), (1.0, 0.0));
        }
        let one = DriftTask {
            initial: Mixture {
                components: vec![Component {
                    weight: 1.0,
                    mean: 10.0,
                    std: 1.0,
                }],
            },
            ..DriftTask::default()
        };
        let c = one.true_distribution(2).unwrap().components[0];
        assert_abs_diff_eq!(c.mean, 1.0 + 0.9 + 0.81 * 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.std, 0.81, epsilon = 1e-12);
        assert!(task.true_distribution(6).is_err());
    }

    #[test]
    fn drift_target_examples() {
        let p = ParticleSet::new(vec![0.0]).unwrap();
        assert_eq!(drift_sample_target(&p, 1.0, 0.9).atoms(), &[1.0]);
        let p = ParticleSet::new(vec![2.0, 4.0]).unwrap();
        assert_eq!(drift_sample_target(&p, 0.0, 0.5).atoms(), &[1.0, 2.0]);
        let p = ParticleSet::new(vec![-1.0, 0.5, 3.0]).unwrap();
        let q = drift_sample_target(&p, 0.7, 0.9);
        assert_abs_diff_eq!(q.mean(), 0.7 + 0.9 * p.mean(), epsilon = 1e-12);
    }

    #[test]
    fn drift_law_matches_repeated_targets() {
        let task = DriftTask::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut z = task.initial.sample(20_000, &mut rng);
        for k in 1..=task.iterations {
            z = drift_sample_target(&z, task.reward, task.gamma);
            let w1 = task.true_distribution(k).unwrap().w1_to(&z).unwrap();
            assert!(w1 < 0.03, "k={k}: {w1}");
        }
    }

    #[test]
    fn gap_examples() {
        let split = ParticleSet::new(vec![-2.0, 2.0, -2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(bimodality_gap(&split, -2.0, 2.0, 0.15).unwrap(), 1.0);
        let merged = ParticleSet::new(vec![0.0; 10]).unwrap();
        assert_abs_diff_eq!(bimodality_gap(&merged, -2.0, 2.0, 0.15).unwrap(), -1.0);
        assert!(bimodality_gap(&merged, 2.0, -2.0, 0.15).is_err());

        let task = DriftTask::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..=task.iterations {
            let mix = task.true_distribution(k).unwrap();
            let draws = mix.sample(10_000, &mut rng);
            let g = task.gap(&draws, k).unwrap();
            let exact = task.analytic_gap(k).unwrap();
            assert!((g - exact).abs() <= 0.05, "k={k}: {g} vs {exact}");
        }
        // Half-std windows around each mode hold 2 Phi(0.5) - 1 of its mass.
        assert_abs_diff_eq!(task.analytic_gap(0).unwrap(), 0.3829249, epsilon = 1e-6);
    }

    #[test]
    fn mixture_w1_of_own_samples_is_small() {
        let mix = DriftTask::default().initial;
        let draws = mix.sample(10_000, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(mix.w1_to(&draws).unwrap() < 0.05);
        let shifted = draws.map(|z| z + 0.5);
        assert_abs_diff_eq!(mix.w1_to(&shifted).unwrap(), 0.5, epsilon = 0.05);
    }

    #[test]
    fn suite_is_valid() {
        for mdp in TabularMdp::desk_suite() {
            mdp.validate().unwrap();
            let text = serde_json::to_string(&mdp).unwrap();
            assert_eq!(TabularMdp::from_json(&text).unwrap(), mdp);
        }
        let mut bad = TabularMdp::desk_chain();
        bad.transitions[0][0][1] = 0.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn transition_examples() {
        let o = |value, prob| Outcome { value, prob };
        let det = TabularMdp {
            name: "det".into(),
            n_states: 2,
            n_actions: 1,
            transitions: vec![vec![vec![0.0, 1.0]], vec![vec![0.0, 1.0]]],
            rewards: vec![vec![vec![o(1.0, 1.0)]]; 2],
            policy: vec![vec![1.0]; 2],
            gamma: 0.9,
            absorbing: vec![1],
            horizon_cap: None,
        };
        let tr = det.sample_transition(0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tr.s, vec![1.0, 0.0]);
        assert_eq!(tr.s_next, vec![0.0, 1.0]);
        assert_eq!((tr.r, tr.mask), (1.0, 0.0));
        assert!(det.sample_transition(2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());

        let mut coin = det.clone();
        coin.rewards[0][0] = vec![o(0.0, 0.5), o(2.0, 0.5)];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let mean = (0..n).map(|_| coin.sample_transition(0, &mut rng).unwrap().r).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");

        let loop_mdp = TabularMdp::desk_loop();
        let a = loop_mdp.sample_transition(3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = loop_mdp.sample_transition(3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mask, 1.0);
    }

    #[test]
    fn exact_oracle_examples() {
        let bandit = TabularMdp::desk_bandit();
        let coin = bandit.oracle_exact(0, 0).unwrap();
        assert_eq!(coin.atoms(), &[0.0, 2.0]);
        assert_eq!(coin.weights(), &[0.5, 0.5]);
        assert_eq!(coin.iqr(), 2.0);
        let three = bandit.oracle_exact(0, 1).unwrap();
        assert_eq!(three.mean(), 2.0);
        assert_eq!(three.iqr(), 1.0);

        let chain = TabularMdp::desk_chain();
        let z0 = chain.oracle_exact(0, 0).unwrap();
        assert_eq!(z0.len(), 6);
        assert_abs_diff_eq!(z0.mean(), 0.0, epsilon = 1e-12);
        assert!(TabularMdp::desk_loop().oracle_exact(0, 0).is_err());
    }

    #[test]
    fn monte_carlo_agrees_with_exact() {
        let n = 100_000;
        for mdp in [TabularMdp::desk_bandit(), TabularMdp::desk_chain()] {
            for (s, a) in mdp.live_pairs() {
                let exact = mdp.oracle_exact(s, a).unwrap();
                let mc = mdp.oracle_monte_carlo(s, a, n, 11).unwrap();
                let w1 = exact.w1(&mc);
                let bound = dkw_w1_bound(exact.range(), n, 1e-6);
                assert!(w1 <= bound, "{} ({s},{a}): {w1} > {bound}", mdp.name);
            }
        }
    }

    #[test]
    fn exact_oracles_are_bellman_fixed_points() {
        for mdp in [TabularMdp::desk_bandit(), TabularMdp::desk_chain()] {
            for (s, a) in mdp.live_pairs() {
                let lhs = mdp.oracle_exact(s, a).unwrap();
                let mut parts = Vec::new();
                for r in &mdp.rewards[s][a] {
                    for (s2, &p) in mdp.transitions[s][a].iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        if mdp.is_absorbing(s2) {
                            let point = ReturnOracle::from_weighted(vec![(r.value, 1.0)], OracleMode::Exact).unwrap();
                            parts.push((r.prob * p, point));
                            continue;
                        }
                        for (a2, &pa) in mdp.policy[s2].iter().enumerate() {
                            let next = mdp.oracle_exact(s2, a2).unwrap().affine(r.value, mdp.gamma);
                            parts.push((r.prob * p * pa, next));
                        }
                    }
                }
                let refs: Vec<(f64, &ReturnOracle)> = parts.iter().map(|(p, o)| (*p, o)).collect();
                let rhs = ReturnOracle::mix(&refs).unwrap();
                assert!(lhs.w1(&rhs) <= 1e-3, "{} ({s},{a})", mdp.name);
            }
        }
    }

    #[test]
    fn loop_oracle_satisfies_bellman_in_distribution() {
        let mdp = TabularMdp::desk_loop();
        let n = 200_000;
        let s = 2;
        let lhs = mdp.oracle_monte_carlo(s, 0, n, 1).unwrap();
        let stay = mdp.oracle_monte_carlo(s, 0, n, 2).unwrap();
        let next = mdp.oracle_monte_carlo(s + 1, 0, n, 3).unwrap();
        let mut parts = Vec::new();
        for r in &mdp.rewards[s][0] {
            parts.push((0.2 * r.prob, stay.affine(r.value, mdp.gamma)));
            parts.push((0.8 * r.prob, next.affine(r.value, mdp.gamma)));
        }
        let refs: Vec<(f64, &ReturnOracle)> = parts.iter().map(|(p, o)| (*p, o)).collect();
        let rhs = ReturnOracle::mix(&refs).unwrap();
        assert!(lhs.w1(&rhs) <= 6.0 / (n as f64).sqrt(), "{}", lhs.w1(&rhs));
    }

    #[test]
    fn w1_examples() {
        let a = ReturnOracle::from_weighted(vec![(0.0, 1.0), (1.0, 1.0)], OracleMode::Exact).unwrap();
        let b = ReturnOracle::from_weighted(vec![(0.0, 1.0), (3.0, 1.0)], OracleMode::Exact).unwrap();
        assert_abs_diff_eq!(a.w1(&b), 1.0);
        assert_eq!(a.w1(&a), 0.0);
        let p = ParticleSet::new(vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let point = ReturnOracle::from_weighted(vec![(0.0, 1.0)], OracleMode::Exact).unwrap();
        assert_abs_diff_eq!(point.w1_to(&p), 1.0);
        // Agrees with the particle-set implementation on equal sizes.
        let x = ParticleSet::new(vec![0.3, -1.0, 2.5, 0.0]).unwrap();
        let y = ParticleSet::new(vec![1.0, 1.5, -0.2, 4.0]).unwrap();
        let direct = crate::quantile::wasserstein1(&x, &y).unwrap();
        let here = ReturnOracle::from_particles(&x).w1_to(&y);
        assert_abs_diff_eq!(direct, here, epsilon = 1e-12);
    }

    #[test]
    fn horizon_and_cache() {
        let mdp = TabularMdp::desk_loop();
        let t = mdp.horizon().unwrap();
        let r = mdp.max_abs_reward();
        assert!(mdp.gamma.powi(t as i32) * r / (1.0 - mdp.gamma) <= 1e-6);
        assert!(mdp.gamma.powi(t as i32 - 1) * r / (1.0 - mdp.gamma) > 1e-6);
        let capped = TabularMdp {
            horizon_cap: Some(10),
            ..mdp.clone()
        };
        assert!(capped.horizon().is_err());

        let dir = std::env::temp_dir().join(format!("dbc-oracle-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let oracle = mdp.oracle_monte_carlo(0, 0, 1000, 5).unwrap();
        oracle.save(&dir.join("z")).unwrap();
        assert_eq!(ReturnOracle::load(&dir.join("z")).unwrap(), oracle);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
