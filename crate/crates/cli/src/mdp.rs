//! Training the bridge critic on small tabular MDPs against exact or Monte
//! Carlo return oracles.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dbc::critic::{CriticEnsemble, DbcConfig, NetConfig};
use dbc::envs::{OracleMode, ReturnOracle, TabularMdp};
use dbc::net::AdamConfig;
use dbc::quantile::QuantileLevels;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{write_csv, write_json, RunManifest, RunStatus};

/// Largest accepted `W1 / IQR` per state-action pair.
pub const W1_IQR_RATIO: f64 = 0.1;
/// Largest accepted `|q - E Z| / E|Z|` per state-action pair.
pub const MEAN_ERROR_RATIO: f64 = 0.05;

/// Which MDP(s) to train on.
#[derive(Clone, Debug, PartialEq)]
pub enum MdpChoice {
    Bandit,
    Chain,
    Loop,
    /// All three desk fixtures.
    Suite,
    File(PathBuf),
}

impl MdpChoice {
    pub fn load(&self) -> Result<Vec<TabularMdp>> {
        Ok(match self {
            Self::Bandit => vec![TabularMdp::desk_bandit()],
            Self::Chain => vec![TabularMdp::desk_chain()],
            Self::Loop => vec![TabularMdp::desk_loop()],
            Self::Suite => TabularMdp::desk_suite(),
            Self::File(p) => vec![TabularMdp::load(p)?],
        })
    }
}

impl FromStr for MdpChoice {
    type Err = std::convert::Infallible;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ok(match s {
            "bandit" => Self::Bandit,
            "chain" => Self::Chain,
            "loop" => Self::Loop,
            "suite" => Self::Suite,
            path => Self::File(PathBuf::from(path)),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MdpConfig {
    pub dbc: DbcConfig,
    pub steps: usize,
    /// Transitions per gradient step.
    pub batch: usize,
    /// Step size at the last step as a fraction of `dbc.adam.lr`; the rate
    /// decays linearly in between.
    pub lr_final_fraction: f64,
    pub eval_every: usize,
    /// Midpoint levels per head used for W1 and the quadrature mean.
    pub eval_levels: usize,
    /// Rollouts for Monte Carlo oracles.
    pub oracle_samples: usize,
    pub oracle_seed: u64,
}

impl Default for MdpConfig {
    fn default() -> Self {
        Self {
            dbc: DbcConfig {
                gamma: 0.9,
                kappa: 0.05,
                k_target: 32,
                k_online: 32,
                heads: 2,
                tau_target: 0.05,
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                net: NetConfig {
                    hidden: vec![64, 64],
                    embed_dim: 16,
                    projection: None,
                },
                ..DbcConfig::default()
            },
            steps: 3000,
            batch: 16,
            lr_final_fraction: 0.05,
            eval_every: 500,
            eval_levels: 200,
            oracle_samples: 1_000_000,
            oracle_seed: 7,
        }
    }
}

impl MdpConfig {
    pub fn validate(&self) -> Result<()> {
        self.dbc.validate()?;
        if self.steps == 0 || self.batch == 0 || self.eval_every == 0 || self.eval_levels == 0 {
            return Err(CliError::Config(
                "steps, batch, eval_every and eval_levels must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.lr_final_fraction) {
            return Err(CliError::Config("lr_final_fraction must lie in [0, 1]".into()));
        }
        if self.oracle_samples == 0 {
            return Err(CliError::Config("oracle_samples must be positive".into()));
        }
        Ok(())
    }
}

/// Ground truth for every live state-action pair of one MDP.
#[derive(Clone, Debug)]
pub struct OracleSet {
    pub mdp: TabularMdp,
    pub pairs: Vec<(usize, usize, ReturnOracle)>,
}

impl OracleSet {
    pub fn build(mdp: &TabularMdp, samples: usize, seed: u64) -> Result<Self> {
        let pairs = mdp
            .live_pairs()
            .into_iter()
            .map(|(s, a)| {
                let pair_seed = seed ^ ((s as u64) << 32 | a as u64);
                Ok((s, a, mdp.oracle(s, a, samples, pair_seed)?))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            mdp: mdp.clone(),
            pairs,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (s, a, o) in &self.pairs {
            o.save(&dir.join(format!("{}_s{s}_a{a}", self.mdp.name)))?;
        }
        Ok(())
    }
}

/// One evaluation of one state-action pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpRecord {
    pub mdp: String,
    pub seed: u64,
    pub step: usize,
    pub state: usize,
    pub action: usize,
    pub w1: f64,
    pub oracle_iqr: f64,
    pub w1_ratio: f64,
    /// Quadrature mean over midpoint levels.
    pub q_value: f64,
    /// Mean over randomly drawn levels.
    pub q_sampled: f64,
    pub oracle_mean: f64,
    pub oracle_mean_abs: f64,
    pub mean_error_ratio: f64,
}

impl MdpRecord {
    pub fn passed(&self) -> bool {
        self.w1_ratio <= W1_IQR_RATIO && self.mean_error_ratio <= MEAN_ERROR_RATIO
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub quantile_loss: f64,
    pub anchor_loss: f64,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub critic: CriticEnsemble,
    pub records: Vec<MdpRecord>,
    pub losses: Vec<LossRecord>,
}

impl SeedRun {
    pub fn final_records(&self) -> impl Iterator<Item = &MdpRecord> {
        let last = self.records.last().map(|r| r.step);
        self.records.iter().filter(move |r| Some(r.step) == last)
    }

    /// Mean final W1 over all live pairs.
    pub fn final_mean_w1(&self) -> f64 {
        let (sum, n) = self.final_records().fold((0.0, 0), |(s, n), r| (s + r.w1, n + 1));
        sum / n as f64
    }
}

fn evaluate(
    critic: &CriticEnsemble,
    oracles: &OracleSet,
    cfg: &MdpConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<MdpRecord>> {
    let mdp = &oracles.mdp;
    let levels = QuantileLevels::midpoints(cfg.eval_levels);
    oracles
        .pairs
        .iter()
        .map(|(s, a, oracle)| {
            let (sf, af) = (mdp.state_features(*s), mdp.action_features(*a));
            let dist = critic.online_distribution(&sf, &af, &levels)?;
            let q_value = dist.mean();
            let q_sampled = critic.q_value(&sf, &af, seed ^ step as u64)?;
            let w1 = oracle.w1_to(&dist);
            let (mean, mean_abs, iqr) = (oracle.mean(), oracle.mean_abs(), oracle.iqr());
            Ok(MdpRecord {
                mdp: mdp.name.clone(),
                seed,
                step,
                state: *s,
                action: *a,
                w1,
                oracle_iqr: iqr,
                w1_ratio: w1 / iqr,
                q_value,
                q_sampled,
                oracle_mean: mean,
                oracle_mean_abs: mean_abs,
                mean_error_ratio: (q_value - mean).abs() / mean_abs,
            })
        })
        .collect()
}

/// Trains one critic on one MDP; evaluates every `eval_every` steps and at
/// the end.
pub fn train_seed(oracles: &OracleSet, cfg: &MdpConfig, seed: u64) -> Result<SeedRun> {
    cfg.validate()?;
    let mdp = &oracles.mdp;
    let live = mdp.live_states();
    let mut critic = CriticEnsemble::new(cfg.dbc.clone(), mdp.n_states, mdp.n_actions, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut records = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    let lr0 = cfg.dbc.adam.lr;
    for step in 1..=cfg.steps {
        let progress = (step - 1) as f64 / cfg.steps as f64;
        critic.set_lr(lr0 * (1.0 - (1.0 - cfg.lr_final_fraction) * progress));
        let batch = (0..cfg.batch)
            .map(|_| mdp.sample_transition(live[rng.random_range(0..live.len())], &mut rng))
            .collect::<dbc::Result<Vec<_>>>()?;
        let report = critic.train_batch(&batch, rng.next_u64())?;
        if !report.is_finite() || !critic.is_finite() {
            return Err(CliError::Divergence(format!(
                "{} seed {seed}: non-finite loss or parameters at step {step}",
                mdp.name
            )));
        }
        losses.push(LossRecord {
            step,
            quantile_loss: report.quantile,
            anchor_loss: report.anchor,
            total: report.total,
        });
        if step % cfg.eval_every == 0 || step == cfg.steps {
            records.extend(evaluate(&critic, oracles, cfg, seed, step)?);
        }
    }
    Ok(SeedRun {
        critic,
        records,
        losses,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PairVerdict {
    pub mdp: String,
    pub state: usize,
    pub action: usize,
    pub oracle_mode: OracleMode,
    pub seeds_passed: usize,
    pub w1_ratio: Vec<f64>,
    pub mean_error_ratio: Vec<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct MdpReport {
    pub pairs: Vec<PairVerdict>,
    /// mdp -> seed -> mean final W1 over live pairs.
    pub final_mean_w1: BTreeMap<String, BTreeMap<u64, f64>>,
    pub passed: bool,
}

impl MdpReport {
    pub fn from_runs(runs: &[(&OracleSet, Vec<(u64, SeedRun)>)]) -> Self {
        let mut pairs = Vec::new();
        let mut final_mean_w1: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
        for (oracles, seeds) in runs {
            for (seed, run) in seeds {
                final_mean_w1
                    .entry(oracles.mdp.name.clone())
                    .or_default()
                    .insert(*seed, run.final_mean_w1());
            }
            for (s, a, oracle) in &oracles.pairs {
                let finals: Vec<&MdpRecord> = seeds
                    .iter()
                    .filter_map(|(_, run)| {
                        run.final_records().find(|r| r.state == *s && r.action == *a)
                    })
                    .collect();
                let seeds_passed = finals.iter().filter(|r| r.passed()).count();
                pairs.push(PairVerdict {
                    mdp: oracles.mdp.name.clone(),
                    state: *s,
                    action: *a,
                    oracle_mode: oracle.mode(),
                    seeds_passed,
                    w1_ratio: finals.iter().map(|r| r.w1_ratio).collect(),
                    mean_error_ratio: finals.iter().map(|r| r.mean_error_ratio).collect(),
                    passed: 2 * seeds_passed > finals.len(),
                });
            }
        }
        let passed = pairs.iter().all(|p| p.passed);
        Self {
            pairs,
            final_mean_w1,
            passed,
        }
    }
}

/// Builds oracles, trains every seed on every selected MDP and writes
/// `metrics.csv`, per-run loss curves, cached oracles and `summary.json`.
pub fn run(choice: &MdpChoice, cfg: &MdpConfig, seeds: &[u64], out: &Path) -> Result<MdpReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    let mdps = choice.load()?;
    let mut manifest = RunManifest::start("train-mdp", cfg, seeds, out)?;
    let result = (|| {
        let oracle_sets = mdps
            .iter()
            .map(|m| OracleSet::build(m, cfg.oracle_samples, cfg.oracle_seed))
            .collect::<Result<Vec<_>>>()?;
        let mut runs = Vec::new();
        let mut records = Vec::new();
        fs::create_dir_all(out.join("losses"))?;
        for oracles in &oracle_sets {
            oracles.save(&out.join("oracles"))?;
            manifest.note(format!(
                "{}: oracle for {} pairs cached under oracles/",
                oracles.mdp.name,
                oracles.pairs.len()
            ));
            let mut seed_runs = Vec::new();
            for &seed in seeds {
                let run = train_seed(oracles, cfg, seed)?;
                let name = format!("losses/{}_seed{seed}.csv", oracles.mdp.name);
                write_csv(&manifest.output(&name), &run.losses)?;
                records.extend(run.records.iter().cloned());
                seed_runs.push((seed, run));
            }
            runs.push((oracles, seed_runs));
        }
        write_csv(&manifest.output("metrics.csv"), &records)?;
        let report = MdpReport::from_runs(&runs);
        write_json(&manifest.output("summary.json"), &report)?;
        Ok(report)
    })();
    match &result {
        Ok(r) => manifest.finish(if r.passed { RunStatus::Passed } else { RunStatus::Failed })?,
        Err(_) => manifest.finish(RunStatus::Error)?,
    }
    result
}
