//! Episodic training: losses, optimiser, checkpoints and evaluation.

pub mod analysis;
pub mod eval;
pub mod loss;
pub mod optim;

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::DType;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{write_atomically, DatasetIndex};
use crate::dataset::{ClipPools, EpisodeConfig, Phase, Protocol};
use crate::error::{Error, Result};
use crate::metrics::{accumulate, BoundaryTolerance, EvalRecord, Summary};
use crate::model::{DmaNet, ModelConfig, QueryMasks};
use crate::types::Episode;
use eval::{evaluate_episode, Oracle};
use loss::{episode_loss, LossReport, LossWeights};
use optim::{Adam, AdamConfig, CosineSchedule};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub episodes: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub adam: AdamConfig,
    pub weights: LossWeights,
    pub episode: EpisodeConfig,
    /// Split the run trains on; evaluation defaults to its test side.
    pub protocol: Protocol,
    /// Probability of pooling the query branch with ground-truth masks
    /// instead of proposals during training.
    pub teacher_forcing: f64,
    pub seed: u64,
    /// Write a log line every this many episodes.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            lr: 1e-3,
            min_lr: 1e-5,
            warmup: 100,
            adam: AdamConfig::default(),
            weights: LossWeights::default(),
            episode: EpisodeConfig::default(),
            protocol: Protocol::default(),
            teacher_forcing: 0.5,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            max_lr: self.lr,
            min_lr: self.min_lr,
            warmup: self.warmup,
            total: self.episodes,
        }
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossReport,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub step: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

/// Per-step episode seed: the sampling stream is a pure function of the
/// run seed and the step, so resumed runs see the same episodes.
fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub struct Trainer {
    pub net: DmaNet,
    pub opt: Adam,
    pub cfg: TrainConfig,
    pub step: usize,
}

impl Trainer {
    pub fn new(model: ModelConfig, cfg: TrainConfig, dtype: DType) -> Result<Self> {
        Ok(Self {
            net: DmaNet::new(model, dtype)?,
            opt: Adam::new(cfg.adam),
            cfg,
            step: 0,
        })
    }

    /// One optimisation step on `ep`.
    pub fn train_step(&mut self, ep: &Episode, teacher: bool) -> Result<(LossReport, f64)> {
        let fg = ep.query_foreground();
        let masks = if teacher && !fg.is_all_empty() {
            QueryMasks::Given(&fg)
        } else {
            QueryMasks::Proposals
        };
        let fwd = self.net.forward_episode(ep, masks)?;
        let (total, report) = episode_loss(ep, &fwd, &self.cfg.weights)?;
        if !report.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: serde_json::to_string(&report)?,
            });
        }
        let grads = total.backward()?;
        let lr = self.cfg.schedule().lr(self.step);
        let norm = self.opt.step(self.net.store(), &grads, lr)?;
        self.step += 1;
        Ok((report, norm))
    }

    /// Trains until `cfg.episodes` steps, drawing episodes from `pools`.
    /// `log` receives one JSON object per `log_every` steps.
    pub fn run(
        &mut self,
        index: &DatasetIndex,
        pools: &ClipPools,
        mut log: Option<&mut dyn Write>,
        mut on_step: impl FnMut(&Trainer, &LogEntry) -> Result<()>,
    ) -> Result<()> {
        let start = std::time::Instant::now();
        while self.step < self.cfg.episodes {
            let mut rng = step_rng(self.cfg.seed, self.step);
            let plan = pools.plan(index, &self.cfg.episode, Phase::Train, &mut rng)?;
            let ep = plan.materialize(index)?;
            let teacher = rng.gen_bool(self.cfg.teacher_forcing.clamp(0.0, 1.0));
            let lr = self.cfg.schedule().lr(self.step);
            let (loss, grad_norm) = self.train_step(&ep, teacher)?;
            let entry = LogEntry {
                step: self.step,
                lr,
                grad_norm,
                loss,
                seconds: start.elapsed().as_secs_f64(),
            };
            if let Some(w) = log.as_deref_mut() {
                if self.cfg.log_every > 0
                    && (self.step % self.cfg.log_every == 0 || self.step == self.cfg.episodes)
                {
                    writeln!(w, "{}", serde_json::to_string(&entry)?)?;
                    w.flush()?;
                }
            }
            on_step(self, &entry)?;
        }
        Ok(())
    }

    /// Writes `model.safetensors`, `optimizer.safetensors` and
    /// `checkpoint.json` into `dir`.
    pub fn save(&self, dir: &Path, overwrite: bool) -> Result<()> {
        write_atomically(dir, overwrite, |tmp| {
            self.net.store().save(&tmp.join("model.safetensors"))?;
            self.opt.save(&tmp.join("optimizer.safetensors"))?;
            let meta = CheckpointMeta {
                version: CHECKPOINT_VERSION,
                step: self.step,
                model: self.net.config().clone(),
                train: self.cfg.clone(),
            };
            fs::write(
                tmp.join("checkpoint.json"),
                serde_json::to_string_pretty(&meta)?,
            )?;
            Ok(())
        })
    }

    /// Restores model, optimiser state and step counter from `dir`.
    /// `episodes` may extend the original run length.
    pub fn resume(dir: &Path, episodes: Option<usize>, dtype: DType) -> Result<Self> {
        let meta = read_meta(dir)?;
        let mut cfg = meta.train.clone();
        if let Some(n) = episodes {
            cfg.episodes = n;
        }
        let mut t = Self::new(meta.model, cfg, dtype)?;
        t.net.store().load(&dir.join("model.safetensors"))?;
        t.opt.load(
            &dir.join("optimizer.safetensors"),
            t.net.store(),
            meta.step as u64,
        )?;
        t.step = meta.step;
        Ok(t)
    }
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(dir.join("checkpoint.json"))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
            dir.display(),
            meta.version
        )));
    }
    Ok(meta)
}

/// Loads a trained model for inference.
pub fn load_model(dir: &Path) -> Result<DmaNet> {
    let meta = read_meta(dir)?;
    let net = DmaNet::new(meta.model, DType::F32)?;
    net.store().load(&dir.join("model.safetensors"))?;
    Ok(net)
}

/// Evaluates `episodes` test episodes drawn with `seed`.
pub fn evaluate(
    net: &DmaNet,
    index: &DatasetIndex,
    pools: &ClipPools,
    cfg: &EpisodeConfig,
    episodes: usize,
    seed: u64,
    oracle: Oracle,
) -> Result<(Summary, Vec<EvalRecord>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(episodes * cfg.ways);
    for _ in 0..episodes {
        let ep = pools
            .plan(index, cfg, Phase::Test, &mut rng)?
            .materialize(index)?;
        records.extend(evaluate_episode(net, &ep, oracle, BoundaryTolerance::default())?.1);
    }
    Ok((accumulate(&records)?, records))
}
