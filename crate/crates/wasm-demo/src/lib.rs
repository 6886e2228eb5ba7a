//! Three operations for the static page in `www/`: render a synthetic
//! SAR/optical pair, draw a mask plan, and show one attention map of a
//! freshly initialised model. Everything is deterministic in the seed.

use fusmae::data::{gen_sample, DataConfig};
use fusmae::mask::sample_mask;
use fusmae::model::AttentionReport;
use fusmae::{Error, FusMae, MaskStrategy, ModelConfig, Result, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Class colours for the label panel; wraps if there are more classes.
const PALETTE: [[u8; 3]; 8] = [
    [40, 40, 40],
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [0, 114, 178],
    [213, 94, 0],
    [204, 121, 167],
];

fn stretch(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    values.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect()
}

/// Sample `index` of the dataset generated with `seed`, as one RGBA strip
/// `3W x H`: optical bands 0..3 as RGB, SAR band 0 in grey, class map.
pub fn render_sample(seed: u64, index: u32) -> Result<Vec<u8>> {
    let cfg = DataConfig::default();
    let (scene, pair) = gen_sample(&cfg, seed, u64::from(index))?;
    let (h, w) = (cfg.height, cfg.width);
    let band = |t: &Tensor<f32>, c: usize| {
        let ch = t.shape()[2];
        stretch(&(0..h * w).map(|p| f64::from(t.data()[p * ch + c])).collect::<Vec<_>>())
    };
    let last = pair.i2.shape()[2] - 1;
    let opt: Vec<Vec<u8>> = (0..3).map(|c| band(&pair.i2, c.min(last))).collect();
    let sar = band(&pair.i1, 0);
    let mut out = vec![255u8; 3 * w * h * 4];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let class = PALETTE[scene.class_map[p] as usize % PALETTE.len()];
            let px = [[opt[0][p], opt[1][p], opt[2][p]], [sar[p], sar[p], sar[p]], class];
            for (panel, rgb) in px.iter().enumerate() {
                let o = (y * 3 * w + panel * w + x) * 4;
                out[o..o + 3].copy_from_slice(rgb);
            }
        }
    }
    Ok(out)
}

/// Mask flags for both modalities, `2T` bytes, 1 where the patch is masked.
pub fn mask_plan_flags(seed: u64, strategy: &str, ratio: f64) -> Result<Vec<u8>> {
    let strategy: MaskStrategy = strategy.parse()?;
    let t = ModelConfig::default().num_patches();
    let plan = sample_mask(t, ratio, strategy, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut flags = vec![0u8; 2 * t];
    for (m, masked) in plan.masked.iter().enumerate() {
        for &i in masked {
            flags[m * t + i] = 1;
        }
    }
    Ok(flags)
}

#[wasm_bindgen]
#[derive(Debug, Clone)]
pub struct AttentionView {
    rows: usize,
    cols: usize,
    weights: Vec<f32>,
    label: String,
    within: Option<f64>,
}

#[wasm_bindgen]
impl AttentionView {
    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn weights(&self) -> Vec<f32> {
        self.weights.clone()
    }
    pub fn label(&self) -> String {
        self.label.clone()
    }
    /// Share of attention staying inside the query's modality, if defined.
    pub fn within_modality_mass(&self) -> Option<f64> {
        self.within
    }
}

/// Head `head` of the first self-attention layer of a model initialised
/// from `model_seed`, on sample `index` of the dataset `data_seed`.
pub fn attention_view(variant: &str, model_seed: u64, data_seed: u64, index: u32, head: usize) -> Result<AttentionView> {
    let variant: Variant = variant.parse()?;
    let cfg = ModelConfig {
        variant,
        ..ModelConfig::default()
    };
    let model = FusMae::<f32>::new(&cfg, model_seed)?;
    let (_, pair) = gen_sample(&DataConfig::default(), data_seed, u64::from(index))?;
    let report = model.attention_maps(&pair.i1, &pair.i2)?;
    let map = report
        .maps
        .iter()
        .find(|m| m.label == AttentionReport::FIRST_SELF_ATTENTION && m.head == head)
        .ok_or_else(|| Error::Config(format!("no attention head {head}")))?;
    let within = report.within_modality_mass().and_then(|v| v.get(head).copied());
    Ok(AttentionView {
        rows: map.rows,
        cols: map.cols,
        weights: map.weights.iter().map(|&w| w as f32).collect(),
        label: map.label.clone(),
        within,
    })
}

fn js_err(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub fn image_size() -> usize {
    DataConfig::default().height
}

#[wasm_bindgen]
pub fn sample_rgba(seed: u64, index: u32) -> Result<Vec<u8>, JsError> {
    render_sample(seed, index).map_err(js_err)
}

#[wasm_bindgen]
pub fn mask_flags(seed: u64, strategy: &str, ratio: f64) -> Result<Vec<u8>, JsError> {
    mask_plan_flags(seed, strategy, ratio).map_err(js_err)
}

#[wasm_bindgen]
pub fn attention_map(variant: &str, model_seed: u64, data_seed: u64, index: u32, head: usize) -> Result<AttentionView, JsError> {
    attention_view(variant, model_seed, data_seed, index, head).map_err(js_err)
}
