//! Executable property suites. Every check returns a measured statistic and
//! the threshold it was compared against, so the CLI can report them and the
//! acceptance tests can gate on them.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bridge::{
    bias_table, BridgeParams, EvalRule, ScheduleKind, ThetaSchedule, TimeGrid,
    BIAS_TABLE_TOLERANCE,
};
use crate::critic::{CriticEnsemble, DbcConfig, NetConfig, Sampler, Transition};
use crate::envs::{dkw_w1_bound, drift_sample_target, DriftTask, OracleMode, ReturnOracle, TabularMdp};
use crate::error::{Error, Result};
use crate::net::{cosine_embed, CriticArch, CriticInput, CriticTape, Gradients, MlpParams};
use crate::quantile::{order_index, ParticleSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Bridge,
    Quantile,
    Nn,
    Critic,
    Envs,
}

impl Suite {
    pub const ALL: [Suite; 5] = [Self::Bridge, Self::Quantile, Self::Nn, Self::Critic, Self::Envs];

    pub fn name(self) -> &'static str {
        match self {
            Self::Bridge => "bridge",
            Self::Quantile => "quantile",
            Self::Nn => "nn",
            Self::Critic => "critic",
            Self::Envs => "envs",
        }
    }

    pub fn run(self, seed: u64) -> Vec<PropCheck> {
        match self {
            Self::Bridge => bridge_suite(seed),
            Self::Quantile => quantile_suite(seed),
            Self::Nn => nn_suite(seed),
            Self::Critic => critic_suite(seed),
            Self::Envs => envs_suite(seed),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite {s:?}")))
    }
}

/// Outcome of one property.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PropCheck {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub statistic: f64,
    pub threshold: f64,
    pub detail: String,
}

impl PropCheck {
    /// Passes when `statistic <= threshold`.
    fn at_most(suite: Suite, name: &str, statistic: f64, threshold: f64, detail: String) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: statistic <= threshold,
            statistic,
            threshold,
            detail,
        }
    }

    /// Passes when `statistic >= threshold`.
    fn at_least(suite: Suite, name: &str, statistic: f64, threshold: f64, detail: String) -> Self {
        Self {
            suite,
            name: name.into(),
            passed: statistic >= threshold,
            statistic,
            threshold,
            detail,
        }
    }
}

fn reference_bridges() -> Vec<(ScheduleKind, BridgeParams)> {
    ScheduleKind::ALL
        .into_iter()
        .map(|k| (k, BridgeParams::new(ThetaSchedule::reference(k))))
        .collect()
}

fn random_grid<R: Rng + ?Sized>(rng: &mut R) -> TimeGrid {
    let n = rng.random_range(1..=200);
    let mut inner: Vec<f64> = (0..n - 1).map(|_| rng.random_range(1e-9..1.0 - 1e-9)).collect();
    inner.sort_by(f64::total_cmp);
    inner.dedup();
    let mut pts = vec![0.0];
    pts.extend(inner);
    pts.push(1.0);
    TimeGrid::new(pts).expect("sorted distinct interior points")
}

pub fn bridge_suite(seed: u64) -> Vec<PropCheck> {
    let s = Suite::Bridge;
    let bridges = reference_bridges();
    let mut out = Vec::new();

    let boundary = bridges
        .iter()
        .flat_map(|(_, b)| {
            [1e-3, 1.0, 7.5].map(|l2| {
                let b = b.with_lambda2(l2);
                (b.xi(0.0) - 1.0).abs().max(b.xi(1.0).abs())
            })
        })
        .fold(0.0, f64::max);
    out.push(PropCheck::at_most(s, "xi_boundary", boundary, 0.0, "max |xi(0)-1|, |xi(1)|".into()));

    let mut lambda = 0.0f64;
    for (_, b) in &bridges {
        let other = b.with_lambda2(37.0);
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            lambda = lambda
                .max((b.xi(t) - other.xi(t)).abs())
                .max((b.velocity_coeff(t) - other.velocity_coeff(t)).abs());
        }
    }
    out.push(PropCheck::at_most(s, "lambda2_independence", lambda, 1e-12, "lambda2 = 1 vs 37".into()));

    let h = 1e-6;
    let mut deriv = 0.0f64;
    for (_, b) in &bridges {
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let fd = if t < h {
                (b.xi(t + h) - b.xi(t)) / h
            } else if t > 1.0 - h {
                (b.xi(t) - b.xi(t - h)) / h
            } else {
                (b.xi(t + h) - b.xi(t - h)) / (2.0 * h)
            };
            deriv = deriv.max((b.velocity_coeff(t) + fd).abs());
        }
    }
    out.push(PropCheck::at_most(s, "derivative_identity", deriv, 1e-5, "1001 points, h = 1e-6".into()));

    let mut integral = 0.0f64;
    for (_, b) in &bridges {
        integral = integral.max((simpson(|t| b.velocity_coeff(t), 0.0, 1.0, 1_000_000) - 1.0).abs());
    }
    out.push(PropCheck::at_most(s, "integral_identity", integral, 1e-6, "Simpson, 1e6 panels".into()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tele = 0.0f64;
    for _ in 0..200 {
        let grid = random_grid(&mut rng);
        for (_, b) in &bridges {
            let sum = compensated_sum(&b.ctilde_weights(&grid));
            tele = tele.max((sum - 1.0).abs());
        }
    }
    for steps in [1, 2, 5, 10, 100, 1000] {
        for (_, b) in &bridges {
            let sum = compensated_sum(&b.ctilde_weights(&TimeGrid::uniform(steps)));
            tele = tele.max((sum - 1.0).abs());
        }
    }
    out.push(PropCheck::at_most(s, "telescoping", tele, 1e-15, "200 random grids + uniform".into()));

    let worst = bias_table(EvalRule::Right)
        .into_iter()
        .max_by(|a, b| a.deviation().total_cmp(&b.deviation()))
        .expect("table is non-empty");
    out.push(PropCheck::at_most(
        s,
        "bias_table",
        worst.deviation(),
        BIAS_TABLE_TOLERANCE,
        format!("worst cell M={} {}", worst.steps, worst.schedule),
    ));
    out
}

/// Neumaier summation, so the measured sum reflects the weights rather than
/// accumulation order.
pub fn compensated_sum(values: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Composite Simpson rule.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let n = panels + panels % 2;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

fn random_particles<R: Rng + ?Sized>(rng: &mut R) -> ParticleSet {
    let n = rng.random_range(1..=64);
    let ties = rng.random_bool(0.3);
    let atoms = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(-5.0..5.0);
            if ties {
                (v * 2.0).round() / 2.0
            } else {
                v
            }
        })
        .collect();
    ParticleSet::new(atoms).expect("finite atoms")
}

fn random_tau<R: Rng + ?Sized>(n: usize, rng: &mut R) -> f64 {
    if rng.random_bool(0.25) {
        // Exact multiples of 1/n exercise the ceiling snap.
        rng.random_range(1..n.max(2)) as f64 / n.max(2) as f64
    } else {
        rng.random_range(1e-6..1.0 - 1e-6)
    }
}

/// Largest excess of the order-statistic risk over any scanned candidate
/// (non-positive means the lemma holds).
pub fn minimizer_scan(cases: usize, scan: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..cases {
        let p = random_particles(&mut rng);
        let tau = random_tau(p.len(), &mut rng);
        let q = p.sample_quantile(tau).expect("non-empty");
        let at_q = p.empirical_risk(q, tau);
        let sorted = p.sorted();
        let (lo, hi) = (sorted.atoms()[0] - 1.0, sorted.atoms()[p.len() - 1] + 1.0);
        for k in 0..scan {
            let theta = lo + (hi - lo) * k as f64 / (scan - 1) as f64;
            worst = worst.max(at_q - p.empirical_risk(theta, tau));
        }
    }
    worst
}

/// Number of cases violating `n_<(q) <= n tau <= n_<=(q)`.
pub fn subgradient_violations(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..cases)
        .filter(|_| {
            let p = random_particles(&mut rng);
            let tau = random_tau(p.len(), &mut rng);
            let q = p.sample_quantile(tau).expect("non-empty");
            let below = p.atoms().iter().filter(|&&v| v < q).count() as f64;
            let at_most = p.atoms().iter().filter(|&&v| v <= q).count() as f64;
            let nt = p.len() as f64 * tau;
            !(below <= nt + 1e-9 && nt <= at_most + 1e-9)
        })
        .count()
}

fn uniform_quantiles<R: Rng + ?Sized>(n: usize, taus: &[f64], rng: &mut R) -> Vec<f64> {
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random()).collect();
    taus.iter()
        .map(|&tau| {
            let k = order_index(n, tau) - 1;
            *xs.select_nth_unstable_by(k, f64::total_cmp).1
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Consistency, bias decay and normality of the sample quantile on
/// Uniform(0, 1) data.
pub fn asymptotics(seed: u64) -> Vec<PropCheck> {
    let s = Suite::Quantile;
    let taus = [0.25, 0.5, 0.75];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // Median absolute error over 100 seeds, must not increase with n.
    let sizes = [100, 1_000, 10_000, 100_000];
    let mut rises = 0.0f64;
    let mut detail = Vec::new();
    for &tau in &taus {
        let medians: Vec<f64> = sizes
            .iter()
            .map(|&n| {
                median(
                    (0..100)
                        .map(|_| (uniform_quantiles(n, &[tau], &mut rng)[0] - tau).abs())
                        .collect(),
                )
            })
            .collect();
        for w in medians.windows(2) {
            rises = rises.max(w[1] - w[0]);
        }
        detail.push(format!("tau={tau}: {medians:?}"));
    }
    out.push(PropCheck::at_most(s, "consistency", rises, 0.0, detail.join("; ")));

    // sqrt(n) |mean bias| over 1e4 replications at n = 1e2 and 1e4.
    let reps = 10_000;
    let scaled_bias = |n: usize, rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
        let mut sums = [0.0; 3];
        let mut mid = Vec::with_capacity(reps);
        for _ in 0..reps {
            let q = uniform_quantiles(n, &taus, rng);
            for (acc, v) in sums.iter_mut().zip(&q) {
                *acc += v;
            }
            mid.push(q[1]);
        }
        let bias = sums
            .iter()
            .zip(&taus)
            .map(|(sum, tau)| (sum / reps as f64 - tau).abs() * (n as f64).sqrt())
            .collect();
        (bias, mid)
    };
    let (small, _) = scaled_bias(100, &mut rng);
    let (large, mid) = scaled_bias(10_000, &mut rng);
    let margin = small
        .iter()
        .zip(&large)
        .map(|(a, b)| a - b)
        .fold(f64::INFINITY, f64::min);
    out.push(PropCheck::at_least(
        s,
        "bias_decay",
        margin,
        f64::MIN_POSITIVE,
        format!("sqrt(n)|bias| n=1e2 {small:.4?} -> n=1e4 {large:.4?}"),
    ));

    let mean = mid.iter().sum::<f64>() / reps as f64;
    let var = mid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let expected = 0.25 / 10_000.0;
    out.push(PropCheck::at_most(
        s,
        "normality_variance",
        (var / expected - 1.0).abs(),
        0.2,
        format!("variance {var:.3e} vs {expected:.3e}"),
    ));
    out
}

pub fn quantile_suite(seed: u64) -> Vec<PropCheck> {
    let s = Suite::Quantile;
    let mut out = vec![PropCheck::at_most(
        s,
        "minimizer_scan",
        minimizer_scan(500, 10_000, seed),
        1e-12,
        "500 cases, 1e4-point scan".into(),
    )];
    out.push(PropCheck::at_most(
        s,
        "subgradient",
        subgradient_violations(500, seed + 1) as f64,
        0.0,
        "violations out of 500".into(),
    ));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let mut mono = 0usize;
    for _ in 0..500 {
        let p = random_particles(&mut rng);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (lo, hi) = (a.min(b).max(1e-9), a.max(b).max(1e-9));
        if p.sample_quantile(lo).unwrap() > p.sample_quantile(hi).unwrap() {
            mono += 1;
        }
    }
    out.push(PropCheck::at_most(s, "monotonicity", mono as f64, 0.0, "violations out of 500".into()));
    out.extend(asymptotics(seed + 3));
    out
}

fn rel_err(a: f64, b: f64) -> f64 {
    // The floor keeps finite-difference roundoff on near-zero gradients from
    // dominating.
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst relative error of analytic critic gradients (parameters and `z`)
/// against central differences over `probes` random parameters.
pub fn critic_gradient_check(arch: &CriticArch, probes: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = arch.init(&mut rng)?;
    // Move away from the tiny final-layer init so every path carries signal.
    let mut params = params;
    let last = params.shapes().len() - 1;
    for w in params.weights_mut(last) {
        *w *= 10.0;
    }
    let state: Vec<f64> = (0..arch.state_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let action: Vec<f64> = (0..arch.action_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = CriticInput {
        z: rng.random_range(-1.0..1.0),
        t: rng.random(),
        tau: rng.random(),
        state: &state,
        action: &action,
    };
    arch.check_input(&x)?;
    let mut tape = CriticTape::default();
    arch.forward(&params, &x, &mut tape);
    let mut g = Gradients::zeros_like(&params);
    let dz = arch.backward(&params, &tape, 1.0, &mut g);

    let h = 1e-5;
    let f = |p: &MlpParams, z: f64| arch.forward(p, &CriticInput { z, ..x }, &mut CriticTape::default());
    let mut worst = rel_err(dz, (f(&params, x.z + h) - f(&params, x.z - h)) / (2.0 * h));
    for _ in 0..probes {
        let i = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        let fd = (f(&plus, x.z) - f(&minus, x.z)) / (2.0 * h);
        worst = worst.max(rel_err(g.as_slice()[i], fd));
    }
    Ok(worst)
}

/// Worst relative error of the gradient of the mean sampled return against
/// central differences, backpropagating through all `steps` bridge steps.
pub fn sampling_gradient_check(steps: usize, probes: usize, seed: u64) -> Result<f64> {
    let arch = CriticArch::new(2, 1, 8, vec![32, 32]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = arch.init(&mut rng)?;
    let last = params.shapes().len() - 1;
    for w in params.weights_mut(last) {
        *w *= 10.0;
    }
    let sampler = Sampler::uniform(&BridgeParams::default(), steps);
    let taus: Vec<f64> = (0..8).map(|_| rng.random()).collect();
    let (s, a) = ([0.4, -0.3], [1.0]);
    let mean = |p: &MlpParams| {
        let mut tape = CriticTape::default();
        taus.iter()
            .map(|&tau| sampler.sample(&arch, p, tau, &s, &a, &mut tape))
            .sum::<f64>()
            / taus.len() as f64
    };
    let mut g = Gradients::zeros_like(&params);
    for &tau in &taus {
        sampler.sample_with_grad(&arch, &params, tau, &s, &a, 1.0 / taus.len() as f64, &mut g);
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = rng.random_range(0..params.len());
        let mut plus = params.clone();
        plus.as_mut_slice()[i] += h;
        let mut minus = params.clone();
        minus.as_mut_slice()[i] -= h;
        let fd = (mean(&plus) - mean(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(g.as_slice()[i], fd));
    }
    Ok(worst)
}

/// Architectures exercised by the gradient check: the desk critic layouts
/// with and without state/action inputs and with the embedding projection.
pub fn gradient_check_archs() -> Vec<CriticArch> {
    let mut proj = CriticArch::new(3, 2, 16, vec![64, 64]);
    proj.projection = Some(8);
    vec![
        CriticArch::new(0, 0, 16, vec![64, 64]),
        CriticArch::new(5, 1, 16, vec![64, 64]),
        CriticArch::new(2, 2, 32, vec![32]),
        proj,
    ]
}

pub fn nn_suite(seed: u64) -> Vec<PropCheck> {
    let s = Suite::Nn;
    let mut out = Vec::new();
    let worst = gradient_check_archs()
        .iter()
        .enumerate()
        .map(|(i, arch)| critic_gradient_check(arch, 64, seed + i as u64).unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    out.push(PropCheck::at_most(s, "gradient_check", worst, 1e-4, "64 probes per layout".into()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bound = (0..10_000)
        .map(|_| {
            let x: f64 = rng.random_range(-3.0..3.0);
            cosine_embed(x, 64).into_iter().map(f64::abs).fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    out.push(PropCheck::at_most(s, "embedding_bounded", bound, 1.0, "max |coordinate|".into()));

    let arch = CriticArch::new(3, 1, 8, vec![16, 16]);
    let params = arch.init(&mut rng).expect("valid arch");
    let x = CriticInput {
        z: 0.3,
        t: 0.6,
        tau: 0.2,
        state: &[1.0, 0.0, -1.0],
        action: &[0.5],
    };
    let run = || {
        let mut tape = CriticTape::default();
        let y = arch.forward(&params, &x, &mut tape);
        let mut g = Gradients::zeros_like(&params);
        arch.backward(&params, &tape, 1.0, &mut g);
        (y, g)
    };
    let same = run() == run();
    out.push(PropCheck::at_least(s, "determinism", same as u8 as f64, 1.0, "repeat forward/backward".into()));
    out
}

/// Largest endpoint miss of the sampler with a constant endpoint predictor.
pub fn endpoint_consistency(endpoints: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (_, bridge) in reference_bridges() {
        for steps in [1, 2, 5, 10, 100] {
            let sampler = Sampler::uniform(&bridge, steps);
            for _ in 0..endpoints {
                let end: f64 = rng.random_range(-10.0..10.0);
                let tau: f64 = rng.random();
                worst = worst.max((sampler.run(tau, |_, _| end) - end).abs());
            }
        }
    }
    worst
}

fn small_ensemble_config() -> DbcConfig {
    DbcConfig {
        k_target: 16,
        k_online: 8,
        heads: 2,
        net: NetConfig {
            hidden: vec![16, 16],
            embed_dim: 4,
            projection: None,
        },
        ..DbcConfig::default()
    }
}

fn probe_transition() -> Transition {
    Transition {
        s: vec![1.0, 0.0],
        a: vec![1.0],
        r: 0.5,
        s_next: vec![0.0, 1.0],
        a_next: vec![1.0],
        mask: 1.0,
        next_log_prob: 0.0,
    }
}

pub fn critic_suite(seed: u64) -> Vec<PropCheck> {
    let s = Suite::Critic;
    let mut out = vec![PropCheck::at_most(
        s,
        "endpoint_consistency",
        endpoint_consistency(20, seed),
        1e-12,
        "M in {1,2,5,10,100} x 3 schedules x 20 endpoints".into(),
    )];
    let grad = sampling_gradient_check(5, 64, seed).unwrap_or(f64::INFINITY);
    out.push(PropCheck::at_most(s, "sampling_gradient", grad, 1e-3, "M = 5, 64 probes".into()));

    let run = || -> Result<Vec<()>> {
        let cfg = small_ensemble_config();
        let tr = probe_transition();

        let mut ens = CriticEnsemble::new(cfg.clone(), 2, 1, seed)?;
        let before = ens.build_targets(&tr, seed)?;
        for p in ens.online_mut() {
            p.as_mut_slice().iter_mut().for_each(|v| *v *= 1.5);
        }
        if ens.build_targets(&tr, seed)? != before {
            return Err(Error::Config("targets depend on online heads".into()));
        }

        let dropping = CriticEnsemble::new(DbcConfig { drop_count: 6, ..cfg.clone() }, 2, 1, seed)?;
        let plain = CriticEnsemble::new(cfg.clone(), 2, 1, seed)?;
        for k in 0..50 {
            if dropping.build_targets(&tr, k)?.mean() > plain.build_targets(&tr, k)?.mean() + 1e-12 {
                return Err(Error::Config("dropping raised the target mean".into()));
            }
        }

        let trajectory = |mut e: CriticEnsemble| -> Result<Vec<u64>> {
            (0..10).map(|i| Ok(e.train_step(&tr, i)?.total.to_bits())).collect()
        };
        let a = trajectory(CriticEnsemble::new(cfg.clone(), 2, 1, seed)?)?;
        let b = trajectory(CriticEnsemble::new(cfg, 2, 1, seed)?)?;
        if a != b {
            return Err(Error::Config("train_step is not deterministic".into()));
        }
        Ok(vec![])
    };
    let (passed, detail) = match run() {
        Ok(_) => (true, "stop-gradient, conservatism, determinism".to_string()),
        Err(e) => (false, e.to_string()),
    };
    out.push(PropCheck::at_least(s, "ensemble_contracts", passed as u8 as f64, 1.0, detail));
    out
}

pub fn envs_suite(seed: u64) -> Vec<PropCheck> {
    let s = Suite::Envs;
    let mut out = Vec::new();
    let n = 100_000;
    let mut self_consistency = 0.0f64;
    let mut fixed_point = 0.0f64;
    for mdp in [TabularMdp::desk_bandit(), TabularMdp::desk_chain()] {
        for (st, a) in mdp.live_pairs() {
            let exact = mdp.oracle_exact(st, a).expect("enumerable");
            let mc = mdp.oracle_monte_carlo(st, a, n, seed).expect("valid pair");
            self_consistency = self_consistency.max(exact.w1(&mc) / dkw_w1_bound(exact.range(), n, 1e-6));
            fixed_point = fixed_point.max(exact.w1(&bellman_image(&mdp, st, a)));
        }
    }
    out.push(PropCheck::at_most(
        s,
        "oracle_self_consistency",
        self_consistency,
        1.0,
        "W1(exact, monte carlo) / DKW bound at delta = 1e-6, n = 1e5".into(),
    ));
    out.push(PropCheck::at_most(s, "bellman_fixed_point", fixed_point, 1e-3, "bandit + chain".into()));

    let task = DriftTask::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = task.initial.sample(20_000, &mut rng);
    let mut drift = 0.0f64;
    for k in 1..=task.iterations {
        z = drift_sample_target(&z, task.reward, task.gamma);
        drift = drift.max(task.true_distribution(k).unwrap().w1_to(&z).unwrap());
    }
    out.push(PropCheck::at_most(s, "drift_affine_law", drift, 0.03, "2e4 samples".into()));
    out
}

/// Law of `r + gamma Z(s', a')` mixed over rewards, successors and actions,
/// built from exact oracles.
pub fn bellman_image(mdp: &TabularMdp, s: usize, a: usize) -> ReturnOracle {
    let mut parts = Vec::new();
    for r in &mdp.rewards[s][a] {
        for (s2, &p) in mdp.transitions[s][a].iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            if mdp.is_absorbing(s2) {
                let point = ReturnOracle::from_weighted(vec![(r.value, 1.0)], OracleMode::Exact)
                    .expect("one atom");
                parts.push((r.prob * p, point));
                continue;
            }
            for (a2, &pa) in mdp.policy[s2].iter().enumerate() {
                if pa > 0.0 {
                    let next = mdp.oracle_exact(s2, a2).expect("enumerable");
                    parts.push((r.prob * p * pa, next.affine(r.value, mdp.gamma)));
                }
            }
        }
    }
    let refs: Vec<(f64, &ReturnOracle)> = parts.iter().map(|(p, o)| (*p, o)).collect();
    ReturnOracle::mix(&refs).expect("non-empty mixture")
}

/// Runs the selected suites (all when `None`).
pub fn run(suite: Option<Suite>, seed: u64) -> Vec<PropCheck> {
    match suite {
        Some(s) => s.run(seed),
        None => Suite::ALL.into_iter().flat_map(|s| s.run(seed)).collect(),
    }
}
