//! Synthetic co-registered SAR/optical scenes and the `FMDS` dataset format.
//!
//! A scene is a class map of random disks over a background. Both
//! modalities render the same map: the optical proxy adds Gaussian noise to
//! per-class reflectances, the SAR proxy multiplies per-class backscatter by
//! Gamma speckle and works in log intensity.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use sha2::{Digest, Sha256};

use crate::config::parse;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FMDS";
pub const DATASET_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub c1: usize,
    pub c2: usize,
    pub classes: usize,
    pub n_blobs: usize,
    pub noise_sigma: f64,
    /// Number of looks of the SAR speckle. `f64::INFINITY` disables speckle.
    pub looks: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            height: 32,
            width: 32,
            c1: 2,
            c2: 4,
            classes: 6,
            n_blobs: 5,
            noise_sigma: 0.25,
            looks: 4.0,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.c1 == 0 || self.c2 == 0 {
            return Err(Error::Config("image extents and channel counts must be positive".into()));
        }
        if self.classes < 2 || self.classes > u16::MAX as usize {
            return Err(Error::Config(format!("class count {} outside [2, 65535]", self.classes)));
        }
        if self.n_blobs == 0 {
            return Err(Error::Config("n_blobs must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Config(format!("noise_sigma {} must be finite and >= 0", self.noise_sigma)));
        }
        if !(self.looks >= 1.0) {
            return Err(Error::Config(format!("looks {} must be >= 1", self.looks)));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("data.height".into(), self.height.to_string());
        m.insert("data.width".into(), self.width.to_string());
        m.insert("data.c1".into(), self.c1.to_string());
        m.insert("data.c2".into(), self.c2.to_string());
        m.insert("data.classes".into(), self.classes.to_string());
        m.insert("data.n_blobs".into(), self.n_blobs.to_string());
        m.insert("data.noise_sigma".into(), format!("{:?}", self.noise_sigma));
        m.insert("data.looks".into(), format!("{:?}", self.looks));
        m
    }

    /// Reads `data.*` keys over the defaults.
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = DataConfig::default();
        for (k, v) in kv {
            let Some(key) = k.strip_prefix("data.") else { continue };
            match key {
                "height" => c.height = parse(k, v)?,
                "width" => c.width = parse(k, v)?,
                "c1" => c.c1 = parse(k, v)?,
                "c2" => c.c2 = parse(k, v)?,
                "classes" => c.classes = parse(k, v)?,
                "n_blobs" => c.n_blobs = parse(k, v)?,
                "noise_sigma" => c.noise_sigma = parse(k, v)?,
                "looks" => c.looks = parse(k, v)?,
                _ => return Err(Error::Config(format!("unknown key '{k}'"))),
            }
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
    pub class: u16,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    /// Row-major class ids.
    pub class_map: Vec<u16>,
    pub blobs: Vec<Blob>,
}

impl SceneSpec {
    pub fn class_at(&self, y: usize, x: usize) -> u16 {
        self.class_map[y * self.width + x]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &c in &self.class_map {
            counts[c as usize] += 1;
        }
        counts
    }

    /// Bit `k` set iff class `k` covers at least one pixel.
    pub fn multilabel(&self) -> Vec<bool> {
        self.class_counts().iter().map(|&n| n > 0).collect()
    }

    /// Class with the most pixels, lowest id on ties.
    pub fn majority(&self) -> u16 {
        let counts = self.class_counts();
        let mut best = 0;
        for (k, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = k;
            }
        }
        best as u16
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    /// `[H, W, C_1]` SAR proxy.
    pub i1: Tensor<f32>,
    /// `[H, W, C_2]` optical proxy.
    pub i2: Tensor<f32>,
    pub multilabel: Vec<bool>,
    pub single_label: u16,
}

/// Background class 0, then `n_blobs` disks of classes `1..K` painted in
/// draw order. Radii are drawn between 1/8 and 1/2 of the shorter side.
pub fn gen_scene<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, classes: usize, n_blobs: usize) -> Result<SceneSpec> {
    if classes < 2 || n_blobs == 0 || height == 0 || width == 0 {
        return Err(Error::Config(format!(
            "scene needs K >= 2 and n_blobs >= 1 (got K={classes}, n_blobs={n_blobs})"
        )));
    }
    let side = height.min(width) as f64;
    let (r_lo, r_hi) = ((side / 8.0).max(1.0), (side / 2.0).max(1.5));
    let blobs: Vec<Blob> = (0..n_blobs)
        .map(|_| Blob {
            cy: rng.random_range(0.0..height as f64),
            cx: rng.random_range(0.0..width as f64),
            radius: rng.random_range(r_lo..r_hi),
            class: rng.random_range(1..classes) as u16,
        })
        .collect();
    let mut class_map = vec![0u16; height * width];
    for b in &blobs {
        for y in 0..height {
            for x in 0..width {
                let (dy, dx) = (y as f64 + 0.5 - b.cy, x as f64 + 0.5 - b.cx);
                if dy * dy + dx * dx <= b.radius * b.radius {
                    class_map[y * width + x] = b.class;
                }
            }
        }
    }
    Ok(SceneSpec {
        height,
        width,
        classes,
        class_map,
        blobs,
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Rank of `class` among all `classes` when sorted by a hash keyed on
/// `(salt, channel)`: a fixed per-channel permutation of the classes.
fn hashed_rank(salt: u64, channel: usize, class: usize, classes: usize) -> usize {
    let key = |k: usize| splitmix64(splitmix64(salt ^ channel as u64).wrapping_add(k as u64));
    let mine = key(class);
    (0..classes).filter(|&k| (key(k), k) < (mine, class)).count()
}

/// Reflectance of `class` in optical `channel`. Classes sit on evenly spaced
/// levels in `[0.05, 0.95]`, permuted per channel.
pub fn optical_mean(class: usize, channel: usize, classes: usize) -> f64 {
    let r = hashed_rank(0x0971_ca1, channel, class, classes);
    0.05 + 0.9 * r as f64 / (classes - 1) as f64
}

/// Backscatter of `class` in SAR `channel`, log-spaced over `[0.02, 1]`.
pub fn sar_level(class: usize, channel: usize, classes: usize) -> f64 {
    let r = hashed_rank(0x05a2, channel, class, classes);
    (0.02f64.ln() * (1.0 - r as f64 / (classes - 1) as f64)).exp()
}

/// Per-channel standardization over all pixels of a `[H, W, C]` buffer.
/// Constant channels become 0.
fn standardize(data: &mut [f64], channels: usize) {
    let n = (data.len() / channels) as f64;
    for c in 0..channels {
        let mean = data.iter().skip(c).step_by(channels).sum::<f64>() / n;
        let var = data.iter().skip(c).step_by(channels).map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        for v in data.iter_mut().skip(c).step_by(channels) {
            *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
        }
    }
}

fn to_image(scene: &SceneSpec, channels: usize, data: Vec<f64>) -> Result<Tensor<f32>> {
    Tensor::new(
        &[scene.height, scene.width, channels],
        data.into_iter().map(|v| v as f32).collect(),
    )
}

/// Optical proxy before standardization: per-class reflectance plus
/// Gaussian noise, clamped to `[0, 1]`.
pub fn render_optical_raw<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R, channels: usize, noise_sigma: f64) -> Result<Vec<f64>> {
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::Config(format!("noise_sigma: {e}")))?;
    let mut out = Vec::with_capacity(scene.class_map.len() * channels);
    for &k in &scene.class_map {
        for c in 0..channels {
            let v = optical_mean(k as usize, c, scene.classes) + noise.sample(rng);
            out.push(v.clamp(0.0, 1.0));
        }
    }
    Ok(out)
}

pub fn render_optical<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R, channels: usize, noise_sigma: f64) -> Result<Tensor<f32>> {
    let mut data = render_optical_raw(scene, rng, channels, noise_sigma)?;
    standardize(&mut data, channels);
    to_image(scene, channels, data)
}

/// Gamma(L, 1/L) speckle factors (unit mean). Infinite `looks` gives 1.
pub fn speckle<R: Rng + ?Sized>(rng: &mut R, looks: f64, n: usize) -> Result<Vec<f64>> {
    if !(looks >= 1.0) {
        return Err(Error::Config(format!("looks {looks} must be >= 1")));
    }
    if looks.is_infinite() {
        return Ok(vec![1.0; n]);
    }
    let g = Gamma::new(looks, 1.0 / looks).map_err(|e| Error::Config(format!("speckle: {e}")))?;
    Ok((0..n).map(|_| g.sample(rng)).collect())
}

/// SAR proxy before standardization: log of backscatter times speckle.
pub fn render_sar_raw<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R, channels: usize, looks: f64) -> Result<Vec<f64>> {
    let factors = speckle(rng, looks, scene.class_map.len() * channels)?;
    let mut out = Vec::with_capacity(factors.len());
    for (p, &k) in scene.class_map.iter().enumerate() {
        for c in 0..channels {
            out.push((sar_level(k as usize, c, scene.classes) * factors[p * channels + c]).ln());
        }
    }
    Ok(out)
}

pub fn render_sar<R: Rng + ?Sized>(scene: &SceneSpec, rng: &mut R, channels: usize, looks: f64) -> Result<Tensor<f32>> {
    let mut data = render_sar_raw(scene, rng, channels, looks)?;
    standardize(&mut data, channels);
    to_image(scene, channels, data)
}

/// Sample `index` of the dataset seeded by `seed`; regenerable on its own.
pub fn gen_sample(config: &DataConfig, seed: u64, index: u64) -> Result<(SceneSpec, SamplePair)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(index));
    let scene = gen_scene(&mut rng, config.height, config.width, config.classes, config.n_blobs)?;
    let i1 = render_sar(&scene, &mut rng, config.c1, config.looks)?;
    let i2 = render_optical(&scene, &mut rng, config.c2, config.noise_sigma)?;
    let pair = SamplePair {
        i1,
        i2,
        multilabel: scene.multilabel(),
        single_label: scene.majority(),
    };
    Ok((scene, pair))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DataConfig,
    pub samples: Vec<SamplePair>,
}

impl Dataset {
    pub fn generate(config: &DataConfig, n: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n == 0 {
            return Err(Error::Config("dataset needs at least one sample".into()));
        }
        let samples = (0..n as u64)
            .map(|i| gen_sample(config, seed, i).map(|(_, p)| p))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            config: config.clone(),
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let c = &self.config;
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        for v in [self.samples.len(), c.height, c.width, c.c1, c.c2, c.classes] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        for s in &self.samples {
            for img in [&s.i1, &s.i2] {
                for v in img.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            let bits: Vec<u8> = s.multilabel.iter().map(|&b| u8::from(b)).collect();
            w.write_all(&bits)?;
            w.write_all(&s.single_label.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    /// Parses a complete dataset file. The header's generation parameters
    /// beyond the shape (blobs, noise, looks) are not stored and keep their
    /// defaults.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Corrupt("not an FMDS dataset (bad magic)".into()));
        }
        let version = u16::from_le_bytes(read_array(&mut r)?);
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let mut header = [0usize; 6];
        for h in &mut header {
            *h = u32::from_le_bytes(read_array(&mut r)?) as usize;
        }
        let [n, height, width, c1, c2, classes] = header;
        let config = DataConfig {
            height,
            width,
            c1,
            c2,
            classes,
            ..DataConfig::default()
        };
        config.validate().map_err(|e| Error::Corrupt(format!("dataset header: {e}")))?;
        let per_sample = (height * width * (c1 + c2)) * 4 + classes + 2;
        if r.len() != n * per_sample {
            return Err(Error::Corrupt(format!(
                "dataset body has {} bytes, header implies {}",
                r.len(),
                n * per_sample
            )));
        }
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut image = |c: usize| -> Result<Tensor<f32>> {
                let len = height * width * c;
                let (head, tail) = r.split_at(len * 4);
                r = tail;
                let data = head
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                Tensor::new(&[height, width, c], data)
            };
            let i1 = image(c1)?;
            let i2 = image(c2)?;
            let (bits, tail) = r.split_at(classes);
            r = tail;
            let multilabel = bits
                .iter()
                .map(|&b| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    other => Err(Error::Corrupt(format!("multilabel byte {other}"))),
                })
                .collect::<Result<Vec<_>>>()?;
            let single_label = u16::from_le_bytes(read_array(&mut r)?);
            if single_label as usize >= classes {
                return Err(Error::Corrupt(format!("single label {single_label} >= K={classes}")));
            }
            samples.push(SamplePair {
                i1,
                i2,
                multilabel,
                single_label,
            });
        }
        Ok(Dataset { config, samples })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Writes the dataset and its manifest; returns the manifest path and
    /// the hex checksum.
    pub fn save(&self, path: &Path, seed: u64) -> Result<(PathBuf, String)> {
        let bytes = self.to_bytes();
        let checksum = sha256_hex(&bytes);
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut f = BufWriter::new(fs::File::create(path)?);
        f.write_all(&bytes)?;
        f.flush()?;
        let manifest = manifest_path(path);
        fs::write(&manifest, self.manifest_text(seed, &checksum))?;
        Ok((manifest, checksum))
    }

    pub fn manifest_text(&self, seed: u64, checksum: &str) -> String {
        let mut kv = self.config.to_kv();
        kv.insert("format".into(), format!("FMDS v{DATASET_VERSION}"));
        kv.insert("n".into(), self.samples.len().to_string());
        kv.insert("seed".into(), seed.to_string());
        let mut text = crate::config::format_kv(&kv);
        text.push_str(&format!("sha256={checksum}\n"));
        text
    }
}

pub fn manifest_path(dataset: &Path) -> PathBuf {
    let mut s = dataset.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Corrupt("truncated file".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn levels_are_distinct_per_channel() {
        for c in 0..4 {
            let mut v: Vec<f64> = (0..6).map(|k| optical_mean(k, c, 6)).collect();
            v.sort_by(f64::total_cmp);
            for w in v.windows(2) {
                assert!(w[1] - w[0] > 0.17);
            }
        }
    }
}
