//! Repeated Bellman drift of a bimodal distribution, fitted by the bridge
//! critic and by an unconditional flow-matching model.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use dbc::critic::{CriticEnsemble, DbcConfig, FlowBaselineConfig, FlowBaselineModel, NetConfig};
use dbc::envs::{drift_sample_target, DriftTask};
use dbc::net::AdamConfig;
use dbc::quantile::{ParticleSet, QuantileLevels};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::manifest::{write_csv, write_json, RunManifest, RunStatus};

/// Largest iteration-0 W1 to the true mixture accepted as a fit.
pub const INITIAL_FIT_W1: f64 = 0.15;
/// Fraction of the iteration-0 gap the bridge critic must keep.
pub const GAP_RETENTION: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    FlowBaseline,
    Dbc,
}

impl Method {
    pub const ALL: [Method; 2] = [Self::FlowBaseline, Self::Dbc];

    pub fn name(self) -> &'static str {
        match self {
            Self::FlowBaseline => "flow_baseline",
            Self::Dbc => "dbc",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub task: DriftTask,
    pub dbc: DbcConfig,
    pub flow: FlowBaselineConfig,
    /// Targets per training step for both methods.
    pub batch: usize,
    /// Write every evaluation sample set to disk.
    pub write_samples: bool,
}

impl Default for DriftConfig {
    fn default() -> Self {
        let adam = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        Self {
            task: DriftTask::default(),
            dbc: DbcConfig {
                heads: 1,
                kappa: 0.05,
                k_target: 64,
                k_online: 32,
                adam,
                net: NetConfig {
                    hidden: vec![64, 64],
                    embed_dim: 16,
                    projection: None,
                },
                ..DbcConfig::default()
            },
            flow: FlowBaselineConfig {
                hidden: vec![64, 64],
                embed_dim: 16,
                adam,
                ..FlowBaselineConfig::default()
            },
            batch: 64,
            write_samples: true,
        }
    }
}

impl DriftConfig {
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.dbc.validate()?;
        self.flow.validate()?;
        if self.batch == 0 {
            return Err(CliError::Config("batch must be positive".into()));
        }
        Ok(())
    }
}

enum Learner {
    Dbc(Box<CriticEnsemble>),
    Flow(Box<FlowBaselineModel>),
}

impl Learner {
    fn new(method: Method, cfg: &DriftConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        Ok(match method {
            Method::Dbc => {
                let dbc = DbcConfig {
                    k_target: cfg.batch.max(cfg.dbc.k_online),
                    ..cfg.dbc.clone()
                };
                Self::Dbc(Box::new(CriticEnsemble::new(dbc, 0, 0, rng.next_u64())?))
            }
            Method::FlowBaseline => Self::Flow(Box::new(FlowBaselineModel::new(cfg.flow.clone(), rng)?)),
        })
    }

    fn train(&mut self, targets: &ParticleSet, rng: &mut ChaCha8Rng) -> Result<f64> {
        Ok(match self {
            Self::Dbc(e) => e.fit_step(&[], &[], targets, rng.next_u64())?.total,
            Self::Flow(m) => m.train_step(targets, rng)?,
        })
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Result<ParticleSet> {
        Ok(match self {
            Self::Dbc(e) => {
                let per_head = n.div_ceil(e.config().heads);
                let taus = QuantileLevels::random(per_head, rng);
                e.online_distribution(&[], &[], &taus)?
            }
            Self::Flow(m) => m.sample(n, rng)?,
        })
    }
}

/// One evaluation of one method at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub seed: u64,
    pub method: Method,
    pub iteration: usize,
    pub w1: f64,
    pub gap: f64,
    pub true_gap: f64,
    pub last_loss: f64,
}

fn draw_batch(pool: &ParticleSet, n: usize, rng: &mut ChaCha8Rng) -> ParticleSet {
    let atoms = pool.atoms();
    ParticleSet::new((0..n).map(|_| atoms[rng.random_range(0..atoms.len())]).collect())
        .expect("pool atoms are finite")
}

/// Runs one method on one seed; returns one record per iteration and the
/// evaluation samples.
pub fn run_method(
    cfg: &DriftConfig,
    method: Method,
    seed: u64,
) -> Result<(Vec<DriftRecord>, Vec<ParticleSet>)> {
    let task = &cfg.task;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(method as u64 + 1);
    let mut learner = Learner::new(method, cfg, &mut rng)?;
    let mut records = Vec::new();
    let mut all_samples = Vec::new();

    let check = |loss: f64, k: usize, step: usize| {
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(CliError::Divergence(format!(
                "{} seed {seed}: non-finite loss at iteration {k}, step {step}",
                method.name()
            )))
        }
    };

    let mut loss = f64::NAN;
    for step in 0..task.initial_steps {
        let batch = task.initial.sample(cfg.batch, &mut rng);
        loss = check(learner.train(&batch, &mut rng)?, 0, step)?;
    }
    for k in 0..=task.iterations {
        if k > 0 {
            let pool = drift_sample_target(&all_samples[k - 1], task.reward, task.gamma);
            for step in 0..task.inner_steps {
                let batch = draw_batch(&pool, cfg.batch, &mut rng);
                loss = check(learner.train(&batch, &mut rng)?, k, step)?;
            }
        }
        let samples = learner.sample(task.samples, &mut rng)?;
        if samples.atoms().iter().any(|z| !z.is_finite()) {
            return Err(CliError::Divergence(format!(
                "{} seed {seed}: non-finite samples at iteration {k}",
                method.name()
            )));
        }
        records.push(DriftRecord {
            seed,
            method,
            iteration: k,
            w1: task.true_distribution(k)?.w1_to(&samples)?,
            gap: task.gap(&samples, k)?,
            true_gap: task.analytic_gap(k)?,
            last_loss: loss,
        });
        all_samples.push(samples);
    }
    Ok((records, all_samples))
}

#[derive(Clone, Debug, Serialize)]
pub struct SeedVerdict {
    pub seed: u64,
    pub dbc_retention: f64,
    pub dbc_final_gap: f64,
    pub flow_final_gap: f64,
    pub dbc_beats_flow: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct DriftReport {
    pub records: Vec<DriftRecord>,
    /// method -> seed -> gap per iteration.
    pub gaps: BTreeMap<String, BTreeMap<u64, Vec<f64>>>,
    pub seeds: Vec<SeedVerdict>,
    pub initial_fit: bool,
    pub retention_held: bool,
    pub dbc_wins: usize,
    pub passed: bool,
}

impl DriftReport {
    fn from_records(records: Vec<DriftRecord>, seeds: &[u64], iterations: usize) -> Self {
        let mut gaps: BTreeMap<String, BTreeMap<u64, Vec<f64>>> = BTreeMap::new();
        for r in &records {
            gaps.entry(r.method.name().into())
                .or_default()
                .entry(r.seed)
                .or_default()
                .push(r.gap);
        }
        let find = |m: Method, seed: u64, k: usize| {
            records
                .iter()
                .find(|r| r.method == m && r.seed == seed && r.iteration == k)
                .expect("every iteration is recorded")
        };
        let verdicts: Vec<SeedVerdict> = seeds
            .iter()
            .map(|&seed| {
                let d0 = find(Method::Dbc, seed, 0).gap;
                let dk = find(Method::Dbc, seed, iterations).gap;
                let fk = find(Method::FlowBaseline, seed, iterations).gap;
                SeedVerdict {
                    seed,
                    dbc_retention: dk / d0,
                    dbc_final_gap: dk,
                    flow_final_gap: fk,
                    dbc_beats_flow: dk > fk,
                }
            })
            .collect();
        let initial_fit = records
            .iter()
            .filter(|r| r.iteration == 0)
            .all(|r| r.w1 < INITIAL_FIT_W1);
        let retention_held = verdicts.iter().all(|v| v.dbc_retention >= GAP_RETENTION);
        let dbc_wins = verdicts.iter().filter(|v| v.dbc_beats_flow).count();
        let passed = initial_fit && retention_held && 3 * dbc_wins >= 2 * verdicts.len();
        Self {
            records,
            gaps,
            seeds: verdicts,
            initial_fit,
            retention_held,
            dbc_wins,
            passed,
        }
    }
}

/// Runs both methods on every seed and writes metrics, samples and a summary.
pub fn run(cfg: &DriftConfig, seeds: &[u64], out: &Path) -> Result<DriftReport> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(CliError::Config("at least one seed is required".into()));
    }
    let mut manifest = RunManifest::start("toy-drift", cfg, seeds, out)?;
    let result = (|| {
        let mut records = Vec::new();
        if cfg.write_samples {
            fs::create_dir_all(out.join("samples"))?;
        }
        for &seed in seeds {
            for method in Method::ALL {
                let (recs, samples) = run_method(cfg, method, seed)?;
                if cfg.write_samples {
                    for (k, s) in samples.iter().enumerate() {
                        let name = format!("samples/{}_seed{seed}_iter{k}.csv", method.name());
                        s.write_csv(BufWriter::new(File::create(manifest.output(&name))?))?;
                    }
                }
                records.extend(recs);
            }
        }
        write_csv(&manifest.output("metrics.csv"), &records)?;
        let report = DriftReport::from_records(records, seeds, cfg.task.iterations);
        write_json(&manifest.output("summary.json"), &report)?;
        Ok(report)
    })();
    match &result {
        Ok(r) => manifest.finish(if r.passed { RunStatus::Passed } else { RunStatus::Failed })?,
        Err(_) => manifest.finish(RunStatus::Error)?,
    }
    result
}
