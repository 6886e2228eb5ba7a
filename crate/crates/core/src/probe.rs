//! Downstream evaluation: linear probe on frozen CLS features and full
//! fine-tuning with a linear head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Session, Var};
use crate::config::{ModalityCondition, Task};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, PredictionSet, Truth};
use crate::model::{Architecture, FusMae};
use crate::nn::Linear;
use crate::optim::{adamw_step, AdamHyper, OptimizerState, Schedule};
use crate::params::{GradMap, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::train::derive_seed;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
}

impl EvalHyper {
    pub fn probe() -> Self {
        EvalHyper {
            epochs: 100,
            batch_size: 128,
            lr: 1e-2,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            seed: 1,
        }
    }

    pub fn finetune() -> Self {
        EvalHyper {
            epochs: 10,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 1,
        }
    }

    fn schedule(&self, steps_per_epoch: usize) -> Result<Schedule> {
        // One warmup epoch, capped so short runs still have a cosine phase.
        let total = self.epochs * steps_per_epoch;
        Schedule::new(self.lr, steps_per_epoch.min(total / 10), total)
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper {
            weight_decay: self.weight_decay,
            ..AdamHyper::default()
        }
    }
}

/// Ground truth of dataset rows `idx` for `task`.
pub fn dataset_truth(data: &Dataset, idx: &[usize], task: Task) -> Truth {
    match task {
        Task::Multilabel => Truth::Multilabel(idx.iter().map(|&i| data.samples[i].multilabel.clone()).collect()),
        Task::Single => Truth::Single(idx.iter().map(|&i| data.samples[i].single_label).collect()),
    }
}

/// CLS features of every sample, one row each.
pub fn extract_features(model: &FusMae<f32>, data: &Dataset, cond: ModalityCondition) -> Result<Vec<Vec<f64>>> {
    data.samples
        .iter()
        .map(|s| Ok(model.extract_features(&s.i1, &s.i2, cond)?.to_f64_vec()))
        .collect()
}

/// Per-feature standardization fitted on the training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or_else(|| Error::Invalid("no feature rows".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            mean.iter_mut().zip(r).for_each(|(m, x)| *m += x / n);
        }
        let mut var = vec![0.0; d];
        for r in rows {
            var.iter_mut().zip(r).zip(&mean).for_each(|((v, x), m)| *v += (x - m).powi(2) / n);
        }
        // Constant features map to 0 rather than dividing by zero.
        let std = var.into_iter().map(|v| if v > 1e-12 { v.sqrt() } else { 1.0 }).collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
        rows.iter()
            .map(|r| r.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s).collect())
            .collect()
    }
}

/// Mean binary cross-entropy of sigmoid(`logits`) against 0/1 `targets`.
pub fn bce_with_logits<S: Scalar>(s: &mut Session<'_, S>, logits: Var, targets: &Tensor<S>) -> Result<Var> {
    let y = s.constant(targets.clone())?;
    let sp = s.softplus(logits)?;
    let yz = s.mul(y, logits)?;
    let l = s.sub(sp, yz)?;
    s.mean(l)
}

/// Cross-entropy against `(1-ε)·onehot + ε/K`, averaged over rows.
pub fn smoothed_cross_entropy<S: Scalar>(
    s: &mut Session<'_, S>,
    logits: Var,
    labels: &[u16],
    smoothing: f64,
) -> Result<Var> {
    let shape = s.shape(logits).to_vec();
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n || labels.iter().any(|&c| c as usize >= k) {
        return Err(Error::Invalid("labels do not fit the logits".into()));
    }
    let mut q = vec![smoothing / k as f64; n * k];
    for (i, &c) in labels.iter().enumerate() {
        q[i * k + c as usize] += 1.0 - smoothing;
    }
    let q = s.constant(Tensor::from_f64(&[n, k], &q)?)?;
    let ls = s.log_softmax(logits)?;
    let t = s.mul(q, ls)?;
    let total = s.sum(t)?;
    s.scale(total, S::of(-1.0 / n as f64))
}

fn task_loss<S: Scalar>(s: &mut Session<'_, S>, logits: Var, truth: &Truth, k: usize, smoothing: f64) -> Result<Var> {
    match truth {
        Truth::Multilabel(rows) => {
            let y: Vec<f64> = rows.iter().flatten().map(|&b| f64::from(u8::from(b))).collect();
            bce_with_logits(s, logits, &Tensor::from_f64(&[rows.len(), k], &y)?)
        }
        Truth::Single(labels) => smoothed_cross_entropy(s, logits, labels, smoothing),
    }
}

/// Classes with no positive among the training labels.
pub fn absent_classes(truth: &Truth, k: usize) -> Vec<usize> {
    let ind = truth.indicators(k);
    (0..k).filter(|&c| !ind.iter().any(|r| r[c])).collect()
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub report: MetricsReport,
    pub head: ParamStore<f64>,
    pub warnings: Vec<String>,
}

/// Trains a `d → k` linear head on standardized training features and
/// reports metrics on the test features.
pub fn linear_probe(
    train_x: &[Vec<f64>],
    train_y: &Truth,
    test_x: &[Vec<f64>],
    test_y: &Truth,
    k: usize,
    hyper: &EvalHyper,
) -> Result<ProbeOutcome> {
    if train_x.len() != train_y.len() || test_x.len() != test_y.len() {
        return Err(Error::Invalid("feature and label counts differ".into()));
    }
    let mut warnings = Vec::new();
    let absent = absent_classes(train_y, k);
    if !absent.is_empty() {
        warnings.push(format!("classes {absent:?} have no positive in the training split"));
    }
    let norm = Standardizer::fit(train_x)?;
    let (train_x, test_x) = (norm.apply(train_x), norm.apply(test_x));
    let d = train_x[0].len();

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, 10));
    let mut store = ParamStore::<f64>::new();
    let head = Linear::new(&mut store, &mut rng, "head", d, k, true);
    let batch = hyper.batch_size.min(train_x.len()).max(1);
    let per_epoch = train_x.len().div_ceil(batch);
    let schedule = hyper.schedule(per_epoch)?;
    let mut opt = OptimizerState::new(&store, hyper.adam());
    let mut order: Vec<usize> = (0..train_x.len()).collect();
    let mut step = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let x: Vec<f64> = chunk.iter().flat_map(|&i| train_x[i].iter().copied()).collect();
            let mut s = Session::new(&store);
            let xv = s.constant(Tensor::from_f64(&[chunk.len(), d], &x)?)?;
            let logits = head.forward(&mut s, xv)?;
            let loss = task_loss(&mut s, logits, &train_y.subset(chunk), k, hyper.label_smoothing)?;
            let mut g = s.backward(loss)?.into_param_map();
            g.complete(&store);
            drop(s);
            adamw_step(&mut store, &g, &mut opt, schedule.lr_at(step))?;
            step += 1;
        }
    }

    let x: Vec<f64> = test_x.iter().flatten().copied().collect();
    let mut s = Session::new(&store);
    let xv = s.constant(Tensor::from_f64(&[test_x.len(), d], &x)?)?;
    let logits = head.forward(&mut s, xv)?;
    let scores: Vec<Vec<f64>> = s.value(logits).to_f64_vec().chunks(k).map(<[f64]>::to_vec).collect();
    drop(s);
    let report = MetricsReport::compute(&PredictionSet::new(scores, test_y.clone())?)?;
    if !report.excluded_classes().is_empty() {
        warnings.push(format!("classes {:?} have no positive in the test split; left out of mAP", report.excluded_classes()));
    }
    Ok(ProbeOutcome {
        report,
        head: store,
        warnings,
    })
}

/// Extracts features from `model` and runs [`linear_probe`]. The model is
/// only read.
pub fn probe_model(
    model: &FusMae<f32>,
    train: &Dataset,
    test: &Dataset,
    task: Task,
    cond: ModalityCondition,
    hyper: &EvalHyper,
) -> Result<ProbeOutcome> {
    let k = train.config.classes;
    let train_x = extract_features(model, train, cond)?;
    let test_x = extract_features(model, test, cond)?;
    let all = |d: &Dataset| (0..d.len()).collect::<Vec<_>>();
    linear_probe(
        &train_x,
        &dataset_truth(train, &all(train), task),
        &test_x,
        &dataset_truth(test, &all(test), task),
        k,
        hyper,
    )
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub report: MetricsReport,
    pub model: FusMae<f32>,
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains every encoder weight together with a linear head on the CLS
/// feature. Decoder weights are carried along untouched.
pub fn finetune(
    model: &FusMae<f32>,
    train: &Dataset,
    test: &Dataset,
    task: Task,
    cond: ModalityCondition,
    hyper: &EvalHyper,
) -> Result<FinetuneOutcome> {
    let k = train.config.classes;
    let d = model.config().dim;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, 11));
    let mut store = model.store.clone();
    let head = Linear::new(&mut store, &mut rng, "head", d, k, true);
    let arch = &model.arch;
    let batch = hyper.batch_size.min(train.len()).max(1);
    let per_epoch = train.len().div_ceil(batch);
    let schedule = hyper.schedule(per_epoch)?;
    let mut opt = OptimizerState::new(&store, hyper.adam());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_loss = Vec::with_capacity(hyper.epochs);
    let mut step = 0;
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let mut grads = GradMap::new();
            for &i in chunk {
                let sample = &train.samples[i];
                let mut s = Session::new(&store);
                let f = arch.features_graph(&mut s, &sample.i1, &sample.i2, cond)?;
                let f = s.reshape(f, &[1, d])?;
                let logits = head.forward(&mut s, f)?;
                let truth = dataset_truth(train, &[i], task);
                let loss = task_loss(&mut s, logits, &truth, k, hyper.label_smoothing)?;
                total += s.value(loss).item() as f64;
                let mut g = s.backward(loss)?.into_param_map();
                g.complete(&store);
                grads.accumulate(&g);
            }
            grads.scale(1.0 / chunk.len() as f32);
            adamw_step(&mut store, &grads, &mut opt, schedule.lr_at(step))?;
            step += 1;
        }
        epoch_loss.push(total / train.len() as f64);
    }

    let mut scores = Vec::with_capacity(test.len());
    for sample in &test.samples {
        let mut s = Session::new(&store);
        let f = arch.features_graph(&mut s, &sample.i1, &sample.i2, cond)?;
        let f = s.reshape(f, &[1, d])?;
        let logits = head.forward(&mut s, f)?;
        scores.push(s.value(logits).to_f64_vec());
    }
    let all: Vec<usize> = (0..test.len()).collect();
    let report = MetricsReport::compute(&PredictionSet::new(scores, dataset_truth(test, &all, task))?)?;

    // Drop the head so the returned model has the original parameter table.
    // Decoder weights saw only weight decay; keep them as they were.
    let mut tuned = model.clone();
    for (id, p) in model.store.iter() {
        if Architecture::is_encoder_param(&p.name) {
            tuned.store.set(id, store.get(id).clone())?;
        }
    }
    Ok(FinetuneOutcome {
        report,
        model: tuned,
        epoch_loss,
    })
}
