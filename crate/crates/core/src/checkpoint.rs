//! `FMCK` checkpoint format.
//!
//! Layout (integers little-endian): magic, version `u16`, config block
//! (`u32` length + `key=value` text), parameter table, optimizer block (first
//! and second moment tables, `t` as `u64`, β1, β2, eps, λ as `f64`), and the
//! mask RNG state (32-byte seed, `u64` stream, `u128` word position).
//!
//! A table is a `u32` count followed by entries of `u32` name length, name
//! bytes, `u32` rank, `u32` extents and `f32` payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::config::{format_kv, parse, parse_kv, ModelConfig};
use crate::error::{Error, Result};
use crate::model::FusMae;
use crate::optim::{AdamHyper, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FMCK";
pub const CHECKPOINT_VERSION: u16 = 1;

pub type NamedTensor = (String, Tensor<f32>);

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Completed optimizer steps.
    pub step: usize,
    pub params: Vec<NamedTensor>,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
    pub t: u64,
    pub hyper: AdamHyper,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

fn named(store: &ParamStore<f32>, tensors: &[Tensor<f32>]) -> Vec<NamedTensor> {
    store
        .iter()
        .zip(tensors)
        .map(|((_, p), t)| (p.name.clone(), t.clone()))
        .collect()
}

impl Checkpoint {
    pub fn capture(
        model: &FusMae<f32>,
        opt: &OptimizerState<f32>,
        train: &TrainConfig,
        step: usize,
        rng: &ChaCha8Rng,
    ) -> Self {
        Checkpoint {
            model: model.config().clone(),
            train: train.clone(),
            step,
            params: model.store.iter().map(|(_, p)| (p.name.clone(), (*p.value).clone())).collect(),
            m: named(&model.store, &opt.m),
            v: named(&model.store, &opt.v),
            t: opt.t,
            hyper: opt.hyper,
            rng_seed: rng.get_seed(),
            rng_stream: rng.get_stream(),
            rng_word_pos: rng.get_word_pos(),
        }
    }

    /// Parameters only, for evaluation of a model that was never trained
    /// (or not by this code).
    pub fn from_model(model: &FusMae<f32>, train: &TrainConfig) -> Self {
        let opt = OptimizerState::new(&model.store, train.hyper);
        Self::capture(model, &opt, train, 0, &ChaCha8Rng::seed_from_u64(0))
    }

    /// Builds the model from the stored config and loads every parameter.
    /// The name and shape tables must match exactly.
    pub fn restore_model(&self) -> Result<FusMae<f32>> {
        let mut model = FusMae::new(&self.model, 0)?;
        load_params(&mut model.store, &self.params)?;
        Ok(model)
    }

    pub fn restore_optimizer(&self, store: &ParamStore<f32>) -> Result<OptimizerState<f32>> {
        let mut m = Vec::with_capacity(store.len());
        let mut v = Vec::with_capacity(store.len());
        check_table(store, &self.m, "first moment")?;
        check_table(store, &self.v, "second moment")?;
        for ((_, a), (_, b)) in self.m.iter().zip(&self.v) {
            m.push(a.clone());
            v.push(b.clone());
        }
        Ok(OptimizerState {
            m,
            v,
            t: self.t,
            hyper: self.hyper,
        })
    }

    pub fn restore_rng(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        Ok(rng)
    }

    pub fn config_kv(&self) -> BTreeMap<String, String> {
        let mut kv = self.model.to_kv();
        kv.extend(self.train.to_kv());
        kv.insert("checkpoint.step".into(), self.step.to_string());
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let text = format_kv(&self.config_kv());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for table in [&self.params, &self.m, &self.v] {
            write_table(&mut out, table);
        }
        out.extend_from_slice(&self.t.to_le_bytes());
        for h in [self.hyper.beta1, self.hyper.beta2, self.hyper.eps, self.hyper.weight_decay] {
            out.extend_from_slice(&h.to_le_bytes());
        }
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if &r.array::<4>()? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("not an FMCK checkpoint (bad magic)".into()));
        }
        let version = u16::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Corrupt("config block is not UTF-8".into()))?;
        let kv = parse_kv(text).map_err(|e| Error::Corrupt(format!("config block: {e}")))?;
        let corrupt = |e: Error| Error::Corrupt(format!("config block: {e}"));
        let model = ModelConfig::from_kv(&kv).map_err(corrupt)?;
        let train = TrainConfig::from_kv(&kv).map_err(corrupt)?;
        let step: usize = match kv.get("checkpoint.step") {
            Some(v) => parse("checkpoint.step", v).map_err(corrupt)?,
            None => return Err(Error::Corrupt("config block lacks checkpoint.step".into())),
        };
        let params = r.table()?;
        let m = r.table()?;
        let v = r.table()?;
        let t = u64::from_le_bytes(r.array()?);
        let mut h = [0f64; 4];
        for x in &mut h {
            *x = f64::from_le_bytes(r.array()?);
        }
        let rng_seed = r.array::<32>()?;
        let rng_stream = u64::from_le_bytes(r.array()?);
        let rng_word_pos = u128::from_le_bytes(r.array()?);
        if !r.0.is_empty() {
            return Err(Error::Corrupt(format!("{} trailing bytes", r.0.len())));
        }
        Ok(Checkpoint {
            model,
            train,
            step,
            params,
            m,
            v,
            t,
            hyper: AdamHyper {
                beta1: h[0],
                beta2: h[1],
                eps: h[2],
                weight_decay: h[3],
            },
            rng_seed,
            rng_stream,
            rng_word_pos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        // Write to a sibling and rename so a crash never leaves a torn file.
        let tmp = path.with_extension("fmck.tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn check_table(store: &ParamStore<f32>, table: &[NamedTensor], what: &str) -> Result<()> {
    if table.len() != store.len() {
        return Err(Error::ParamMismatch(format!(
            "{what} table has {} tensors, model has {}",
            table.len(),
            store.len()
        )));
    }
    for ((_, p), (name, t)) in store.iter().zip(table) {
        if &p.name != name || p.value.shape() != t.shape() {
            return Err(Error::ParamMismatch(format!(
                "{what} table entry {name} {:?} does not match model parameter {} {:?}",
                t.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    Ok(())
}

/// Overwrites every parameter of `store` from `table` after checking that
/// names, order and shapes agree.
pub fn load_params(store: &mut ParamStore<f32>, table: &[NamedTensor]) -> Result<()> {
    check_table(store, table, "parameter")?;
    let ids: Vec<_> = store.ids().collect();
    for (id, (_, t)) in ids.into_iter().zip(table) {
        store.set(id, t.clone())?;
    }
    Ok(())
}

fn write_table(out: &mut Vec<u8>, table: &[NamedTensor]) {
    out.extend_from_slice(&(table.len() as u32).to_le_bytes());
    for (name, t) in table {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.0.len() < n {
            return Err(Error::Corrupt("truncated file".into()));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("took exactly N bytes"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn table(&mut self) -> Result<Vec<NamedTensor>> {
        let n = self.u32()? as usize;
        let mut out = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            if rank == 0 || rank > 8 {
                return Err(Error::Corrupt(format!("tensor {name} has rank {rank}")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
            let numel = numel.ok_or_else(|| Error::Corrupt(format!("tensor {name} too large")))?;
            let raw = self.take(numel.checked_mul(4).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("tensor {name}: {e}")))?;
            out.push((name, t));
        }
        Ok(out)
    }
}
