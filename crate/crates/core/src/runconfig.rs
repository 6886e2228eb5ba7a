//! Every hyperparameter of a run in one flat `key=value` table.
//!
//! Resolution order is defaults, then a config file, then explicit
//! overrides (command-line flags). The resolved table is written into each
//! run directory so the run can be replayed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{format_kv, parse, parse_kv, ModelConfig};
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::probe::EvalHyper;
use crate::train::TrainConfig;

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FUSMAE_OUT";

pub const RUN_CONFIG_FILE: &str = "run.cfg";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub probe: EvalHyper,
    pub finetune: EvalHyper,
    /// Free-form `run.*` entries (command, paths, sample counts).
    pub run: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            probe: EvalHyper::probe(),
            finetune: EvalHyper::finetune(),
            run: BTreeMap::new(),
        }
    }
}

fn eval_to_kv(prefix: &str, h: &EvalHyper, m: &mut BTreeMap<String, String>) {
    m.insert(format!("{prefix}.epochs"), h.epochs.to_string());
    m.insert(format!("{prefix}.batch_size"), h.batch_size.to_string());
    m.insert(format!("{prefix}.lr"), format!("{:?}", h.lr));
    m.insert(format!("{prefix}.weight_decay"), format!("{:?}", h.weight_decay));
    m.insert(format!("{prefix}.label_smoothing"), format!("{:?}", h.label_smoothing));
    m.insert(format!("{prefix}.seed"), h.seed.to_string());
}

fn eval_from_kv(prefix: &str, mut h: EvalHyper, kv: &BTreeMap<String, String>) -> Result<EvalHyper> {
    for (k, v) in kv {
        let Some(key) = k.strip_prefix(prefix).and_then(|r| r.strip_prefix('.')) else { continue };
        match key {
            "epochs" => h.epochs = parse(k, v)?,
            "batch_size" => h.batch_size = parse(k, v)?,
            "lr" => h.lr = parse(k, v)?,
            "weight_decay" => h.weight_decay = parse(k, v)?,
            "label_smoothing" => h.label_smoothing = parse(k, v)?,
            "seed" => h.seed = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown key '{k}'"))),
        }
    }
    if !(0.0..1.0).contains(&h.label_smoothing) {
        return Err(Error::Config(format!("{prefix}.label_smoothing must be in [0, 1)")));
    }
    if h.epochs == 0 || h.batch_size == 0 {
        return Err(Error::Config(format!("{prefix}.epochs and {prefix}.batch_size must be positive")));
    }
    Ok(h)
}

const SECTIONS: [&str; 6] = ["model", "train", "data", "probe", "finetune", "run"];

impl RunConfig {
    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = self.model.to_kv();
        m.extend(self.train.to_kv());
        m.extend(self.data.to_kv());
        eval_to_kv("probe", &self.probe, &mut m);
        eval_to_kv("finetune", &self.finetune, &mut m);
        for (k, v) in &self.run {
            m.insert(format!("run.{k}"), v.clone());
        }
        m
    }

    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        for k in kv.keys() {
            let section = k.split('.').next().unwrap_or("");
            if !SECTIONS.contains(&section) || !k.contains('.') {
                return Err(Error::Config(format!("unknown key '{k}'")));
            }
        }
        let cfg = RunConfig {
            model: ModelConfig::from_kv(kv)?,
            train: TrainConfig::from_kv(kv)?,
            data: DataConfig::from_kv(kv)?,
            probe: eval_from_kv("probe", EvalHyper::probe(), kv)?,
            finetune: eval_from_kv("finetune", EvalHyper::finetune(), kv)?,
            run: kv
                .iter()
                .filter_map(|(k, v)| k.strip_prefix("run.").map(|r| (r.to_string(), v.clone())))
                .collect(),
        };
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    /// Defaults, overlaid by `file` (if any), overlaid by `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &BTreeMap<String, String>) -> Result<Self> {
        let mut kv = RunConfig::default().to_kv();
        if let Some(path) = file {
            let text = fs::read_to_string(path)?;
            kv.extend(parse_kv(&text)?);
        }
        kv.extend(overrides.iter().map(|(k, v)| (k.clone(), v.clone())));
        Self::from_kv(&kv)
    }

    pub fn to_text(&self) -> String {
        format_kv(&self.to_kv())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RUN_CONFIG_FILE);
        fs::write(&path, self.to_text())?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&parse_kv(&fs::read_to_string(path)?)?)
    }
}

/// Output root: `$FUSMAE_OUT` if set, else `./runs`.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}
