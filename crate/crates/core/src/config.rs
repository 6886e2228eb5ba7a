//! Model configuration and its flat `key=value` encoding.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Both modalities stacked channel-wise behind a single patch projection.
    EarlyConcat,
    /// Cross-attention decoder blocks only (feature-level fusion).
    Xad,
    /// Cross-attended patch projection in the encoder plus cross-attention
    /// decoder blocks (early and feature-level fusion).
    Xaed,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::EarlyConcat, Variant::Xad, Variant::Xaed];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskStrategy {
    Independent,
    Consistent,
}

/// Key/value source for the decoder cross-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderKv {
    /// The other modality's full decoder sequence (visible latents and mask
    /// tokens, positions added).
    Full,
    /// Only the other modality's visible latents.
    Visible,
}

/// Which inputs are fed at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityCondition {
    /// Modality 1 only (SAR proxy).
    S1,
    /// Modality 2 only (optical proxy).
    S2,
    S1S2,
}

impl ModalityCondition {
    pub fn uses(self, modality: usize) -> bool {
        matches!(
            (self, modality),
            (ModalityCondition::S1S2, _) | (ModalityCondition::S1, 0) | (ModalityCondition::S2, 1)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Multilabel,
    Single,
}

macro_rules! str_enum {
    ($ty:ty { $($variant:path => $s:literal),+ $(,)? }) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $s),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($s => Ok($variant),)+
                    other => Err(Error::Config(format!(
                        "unknown {} '{other}' (expected one of: {})",
                        stringify!($ty),
                        [$($s),+].join(", ")
                    ))),
                }
            }
        }
    };
}

str_enum!(Variant {
    Variant::EarlyConcat => "early_concat",
    Variant::Xad => "xad",
    Variant::Xaed => "xaed",
});

str_enum!(MaskStrategy {
    MaskStrategy::Independent => "independent",
    MaskStrategy::Consistent => "consistent",
});

str_enum!(ModalityCondition {
    ModalityCondition::S1 => "s1",
    ModalityCondition::S2 => "s2",
    ModalityCondition::S1S2 => "s1s2",
});

str_enum!(Task {
    Task::Multilabel => "multilabel",
    Task::Single => "single",
});

str_enum!(DecoderKv {
    DecoderKv::Full => "full",
    DecoderKv::Visible => "visible",
});

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    /// Channels of modality 1 (SAR proxy).
    pub c1: usize,
    /// Channels of modality 2 (optical proxy).
    pub c2: usize,
    pub patch: usize,
    /// Encoder depth, counting the cross-attended block when present.
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub dec_dim: usize,
    pub dec_depth: usize,
    pub dec_heads: usize,
    pub mlp_ratio: usize,
    pub mask_ratio: f64,
    pub strategy: MaskStrategy,
    pub variant: Variant,
    pub xattn_shared_weights: bool,
    pub xattn_decoder_kv: DecoderKv,
    pub norm_pix_loss: bool,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 32,
            width: 32,
            c1: 2,
            c2: 4,
            patch: 8,
            depth: 4,
            dim: 64,
            heads: 4,
            dec_dim: 32,
            dec_depth: 2,
            dec_heads: 4,
            mlp_ratio: 4,
            mask_ratio: 0.75,
            strategy: MaskStrategy::Independent,
            variant: Variant::Xaed,
            xattn_shared_weights: true,
            xattn_decoder_kv: DecoderKv::Full,
            norm_pix_loss: false,
            ln_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Smallest configuration that still exercises every mechanism; used by
    /// the gradient checks.
    pub fn minimal() -> Self {
        ModelConfig {
            height: 8,
            width: 8,
            c1: 1,
            c2: 2,
            patch: 4,
            depth: 2,
            dim: 8,
            heads: 2,
            dec_dim: 8,
            dec_depth: 1,
            dec_heads: 2,
            mlp_ratio: 2,
            ..ModelConfig::default()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch, self.width / self.patch)
    }

    /// Patches per modality.
    pub fn num_patches(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    pub fn num_masked(&self) -> usize {
        masked_count(self.num_patches(), self.mask_ratio)
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        self.patch * self.patch * channels
    }

    pub fn channels(&self, modality: usize) -> usize {
        match modality {
            0 => self.c1,
            1 => self.c2,
            _ => panic!("modality index {modality} out of range"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return bad(format!(
                "image {}x{} not divisible by patch size {}",
                self.height, self.width, self.patch
            ));
        }
        if self.c1 == 0 || self.c2 == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible by heads {}", self.dim, self.heads));
        }
        if self.dec_heads == 0 || !self.dec_dim.is_multiple_of(self.dec_heads) {
            return bad(format!(
                "dec_dim {} not divisible by dec_heads {}",
                self.dec_dim, self.dec_heads
            ));
        }
        if !self.dim.is_multiple_of(4) || !self.dec_dim.is_multiple_of(4) {
            return bad("dim and dec_dim must be divisible by 4 for 2-D sin-cos positions".into());
        }
        if self.depth == 0 || self.dec_depth == 0 || self.mlp_ratio == 0 {
            return bad("depth, dec_depth and mlp_ratio must be positive".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask ratio {} outside [0, 1)", self.mask_ratio));
        }
        let t = self.num_patches();
        let m = self.num_masked();
        if m == 0 || m >= t {
            return bad(format!(
                "mask ratio {} masks {m} of {t} patches; need at least one masked and one visible",
                self.mask_ratio
            ));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("model.height", self.height.to_string());
        put("model.width", self.width.to_string());
        put("model.c1", self.c1.to_string());
        put("model.c2", self.c2.to_string());
        put("model.patch", self.patch.to_string());
        put("model.depth", self.depth.to_string());
        put("model.dim", self.dim.to_string());
        put("model.heads", self.heads.to_string());
        put("model.dec_dim", self.dec_dim.to_string());
        put("model.dec_depth", self.dec_depth.to_string());
        put("model.dec_heads", self.dec_heads.to_string());
        put("model.mlp_ratio", self.mlp_ratio.to_string());
        put("model.mask_ratio", format!("{:?}", self.mask_ratio));
        put("model.strategy", self.strategy.to_string());
        put("model.variant", self.variant.to_string());
        put("model.xattn_shared_weights", self.xattn_shared_weights.to_string());
        put("model.xattn_decoder_kv", self.xattn_decoder_kv.to_string());
        put("model.norm_pix_loss", self.norm_pix_loss.to_string());
        put("model.ln_eps", format!("{:?}", self.ln_eps));
        m
    }

    /// Reads `model.*` keys, falling back to defaults for absent ones.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = ModelConfig::default();
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("model.") else { continue };
            match key {
                "height" => c.height = parse(k, v)?,
                "width" => c.width = parse(k, v)?,
                "c1" => c.c1 = parse(k, v)?,
                "c2" => c.c2 = parse(k, v)?,
                "patch" => c.patch = parse(k, v)?,
                "depth" => c.depth = parse(k, v)?,
                "dim" => c.dim = parse(k, v)?,
                "heads" => c.heads = parse(k, v)?,
                "dec_dim" => c.dec_dim = parse(k, v)?,
                "dec_depth" => c.dec_depth = parse(k, v)?,
                "dec_heads" => c.dec_heads = parse(k, v)?,
                "mlp_ratio" => c.mlp_ratio = parse(k, v)?,
                "mask_ratio" => c.mask_ratio = parse(k, v)?,
                "strategy" => c.strategy = v.parse()?,
                "variant" => c.variant = v.parse()?,
                "xattn_shared_weights" => c.xattn_shared_weights = parse(k, v)?,
                "xattn_decoder_kv" => c.xattn_decoder_kv = v.parse()?,
                "norm_pix_loss" => c.norm_pix_loss = parse(k, v)?,
                "ln_eps" => c.ln_eps = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        Ok(c)
    }
}

/// `floor(ratio * total)`.
pub fn masked_count(total: usize, ratio: f64) -> usize {
    (ratio * total as f64).floor() as usize
}

pub(crate) fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{value}' for '{key}'")))
}

/// Parses `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn format_kv(kv: &BTreeMap<String, String>) -> String {
    kv.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}
