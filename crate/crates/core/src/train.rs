//! Pretraining loop with deterministic batching and resumable state.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{parse, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::FusMae;
use crate::optim::{adamw_step, AdamHyper, OptimizerState, Schedule};
use crate::params::GradMap;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub hyper: AdamHyper,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            batch_size: 64,
            base_lr: 1.5625e-4,
            warmup_steps: 30,
            hyper: AdamHyper::default(),
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.base_lr, self.warmup_steps, self.steps)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        self.schedule().map(|_| ())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("train.steps".into(), self.steps.to_string());
        m.insert("train.batch_size".into(), self.batch_size.to_string());
        m.insert("train.base_lr".into(), format!("{:?}", self.base_lr));
        m.insert("train.warmup_steps".into(), self.warmup_steps.to_string());
        m.insert("train.beta1".into(), format!("{:?}", self.hyper.beta1));
        m.insert("train.beta2".into(), format!("{:?}", self.hyper.beta2));
        m.insert("train.eps".into(), format!("{:?}", self.hyper.eps));
        m.insert("train.weight_decay".into(), format!("{:?}", self.hyper.weight_decay));
        m.insert("train.seed".into(), self.seed.to_string());
        m.insert("train.checkpoint_every".into(), self.checkpoint_every.to_string());
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = TrainConfig::default();
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("train.") else { continue };
            match key {
                "steps" => c.steps = parse(k, v)?,
                "batch_size" => c.batch_size = parse(k, v)?,
                "base_lr" => c.base_lr = parse(k, v)?,
                "warmup_steps" => c.warmup_steps = parse(k, v)?,
                "beta1" => c.hyper.beta1 = parse(k, v)?,
                "beta2" => c.hyper.beta2 = parse(k, v)?,
                "eps" => c.hyper.eps = parse(k, v)?,
                "weight_decay" => c.hyper.weight_decay = parse(k, v)?,
                "seed" => c.seed = parse(k, v)?,
                "checkpoint_every" => c.checkpoint_every = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        Ok(c)
    }
}

/// Independent seeds for the different random streams of one run.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const MODEL_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trainer {
    pub model: FusMae<f32>,
    pub opt: OptimizerState<f32>,
    pub train: TrainConfig,
    pub schedule: Schedule,
    /// Number of completed steps.
    pub step: usize,
    mask_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: &ModelConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        let model = FusMae::new(model, derive_seed(train.seed, MODEL_STREAM))?;
        let opt = OptimizerState::new(&model.store, train.hyper);
        Ok(Trainer {
            opt,
            model,
            train: train.clone(),
            schedule: train.schedule()?,
            step: 0,
            mask_rng: ChaCha8Rng::seed_from_u64(derive_seed(train.seed, MASK_STREAM)),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.restore_model()?;
        let opt = ck.restore_optimizer(&model.store)?;
        Ok(Trainer {
            model,
            opt,
            train: ck.train.clone(),
            schedule: ck.train.schedule()?,
            step: ck.step,
            mask_rng: ck.restore_rng()?,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, &self.opt, &self.train, self.step, &self.mask_rng)
    }

    /// Samples of step `step`: consecutive slices of a permutation drawn
    /// once per epoch; the incomplete tail of each epoch is dropped.
    pub fn batch_indices(&self, n: usize, step: usize) -> Result<Vec<usize>> {
        let b = self.train.batch_size;
        let per_epoch = n / b;
        if per_epoch == 0 {
            return Err(Error::Config(format!("dataset of {n} samples is smaller than batch size {b}")));
        }
        let (epoch, slot) = (step / per_epoch, step % per_epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(self.train.seed, SHUFFLE_STREAM), epoch as u64));
        perm.shuffle(&mut rng);
        Ok(perm[slot * b..(slot + 1) * b].to_vec())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        let c = self.model.config();
        let d = &data.config;
        if (d.height, d.width, d.c1, d.c2) != (c.height, c.width, c.c1, c.c2) {
            return Err(Error::Config(format!(
                "dataset is {}x{} with {}+{} channels, model expects {}x{} with {}+{}",
                d.height, d.width, d.c1, d.c2, c.height, c.width, c.c1, c.c2
            )));
        }
        Ok(())
    }

    /// One optimizer step on the mean loss of the next batch.
    pub fn train_step(&mut self, data: &Dataset) -> Result<TraceRow> {
        self.check_data(data)?;
        let step = self.step;
        let batch = self.batch_indices(data.len(), step)?;
        let diverged = |source: Error| Error::Diverged {
            step,
            batch_start: batch[0],
            source: Box::new(source),
        };
        let lr = self.schedule.lr_at(step);
        let mut grads = GradMap::new();
        let mut loss = 0.0f64;
        for &i in &batch {
            let s = &data.samples[i];
            let plan = self.model.arch.sample_plan(&mut self.mask_rng)?;
            let (l, g) = self
                .model
                .arch
                .loss_and_grads(&self.model.store, &s.i1, &s.i2, &plan)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => diverged(e),
                    other => other,
                })?;
            loss += l as f64;
            grads.accumulate(&g);
        }
        let inv = 1.0 / batch.len() as f64;
        loss *= inv;
        if !loss.is_finite() {
            return Err(diverged(Error::NonFinite { op: "loss" }));
        }
        grads.scale(inv as f32);
        adamw_step(&mut self.model.store, &grads, &mut self.opt, lr)?;
        if !self.model.store.iter().all(|(_, p)| p.value.is_finite()) {
            return Err(diverged(Error::NonFinite { op: "adamw_step" }));
        }
        self.step += 1;
        Ok(TraceRow { step, lr, loss })
    }

    /// Trains until `self.train.steps`, calling `after_step` after each step
    /// (used for periodic checkpoints and progress output).
    pub fn run(
        &mut self,
        data: &Dataset,
        mut after_step: impl FnMut(&Trainer, &TraceRow) -> Result<()>,
    ) -> Result<Vec<TraceRow>> {
        let mut trace = Vec::with_capacity(self.train.steps.saturating_sub(self.step));
        while self.step < self.train.steps {
            let row = self.train_step(data)?;
            after_step(self, &row)?;
            trace.push(row);
        }
        Ok(trace)
    }
}

/// Fresh run from initialization to the configured step count.
pub fn pretrain_loop(data: &Dataset, model: &ModelConfig, train: &TrainConfig) -> Result<(Trainer, Vec<TraceRow>)> {
    let mut trainer = Trainer::new(model, train)?;
    let trace = trainer.run(data, |_, _| Ok(()))?;
    Ok((trainer, trace))
}

/// Mean loss over the first and last `window` steps.
pub fn smoothed_endpoints(trace: &[TraceRow], window: usize) -> Option<(f64, f64)> {
    if window == 0 || trace.len() < window {
        return None;
    }
    let mean = |rows: &[TraceRow]| rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64;
    Some((mean(&trace[..window]), mean(&trace[trace.len() - window..])))
}

pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut out = String::from("step,lr,loss\n");
    for r in trace {
        out.push_str(&format!("{},{:e},{:e}\n", r.step, r.lr, r.loss));
    }
    out
}

/// Parses the `step,lr,loss` CSV written by [`trace_csv`].
pub fn parse_trace_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("step,lr,loss") {
        return Err(Error::Invalid("loss trace lacks the step,lr,loss header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 3 {
                return Err(Error::Invalid(format!("bad trace row '{l}'")));
            }
            Ok(TraceRow {
                step: parse("step", f[0])?,
                lr: parse("lr", f[1])?,
                loss: parse("loss", f[2])?,
            })
        })
        .collect()
}
