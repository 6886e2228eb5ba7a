//! Patch extraction and fixed 2-D sine-cosine position embeddings.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

fn image_dims<S: Scalar>(image: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match image.shape() {
        &[h, w, c] => Ok((h, w, c)),
        s => Err(Error::shape(op, format!("expected [H, W, C], got {s:?}"))),
    }
}

/// `[H, W, C]` to `[T, P*P*C]`. Patches in row-major grid order; inside a
/// patch, row-major pixels with channels innermost.
pub fn patchify<S: Scalar>(image: &Tensor<S>, p: usize) -> Result<Tensor<S>> {
    let (h, w, c) = image_dims(image, "patchify")?;
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape("patchify", format!("{h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..p {
                let row = gy * p + py;
                let start = (row * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(&[gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<S: Scalar>(patches: &Tensor<S>, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor<S>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(Error::shape("unpatchify", format!("{h}x{w} not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    if patches.shape() != [gh * gw, p * p * c] {
        return Err(Error::shape(
            "unpatchify",
            format!("patches {:?} do not tile {h}x{w}x{c} at P={p}", patches.shape()),
        ));
    }
    let mut out = vec![S::zero(); h * w * c];
    for (t, patch) in patches.data().chunks_exact(p * p * c).enumerate() {
        let (gy, gx) = (t / gw, t % gw);
        for (py, chunk) in patch.chunks_exact(p * c).enumerate() {
            let start = ((gy * p + py) * w + gx * p) * c;
            out[start..start + p * c].copy_from_slice(chunk);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// Fixed position table `[gh*gw, d]`. The first `d/2` channels encode the
/// row index, the rest the column index, each as `d/4` sines followed by
/// `d/4` cosines at frequencies `10000^(-k/(d/4))`.
pub fn build_pos_embed<S: Scalar>(gh: usize, gw: usize, d: usize) -> Result<Tensor<S>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::Config(format!("position embedding width {d} not divisible by 4")));
    }
    if gh == 0 || gw == 0 {
        return Err(Error::Config("empty position grid".into()));
    }
    let q = d / 4;
    let omega: Vec<f64> = (0..q).map(|k| 10000f64.powf(-(k as f64) / q as f64)).collect();
    let mut out = Vec::with_capacity(gh * gw * d);
    for y in 0..gh {
        for x in 0..gw {
            for coord in [y as f64, x as f64] {
                out.extend(omega.iter().map(|&o| S::of((coord * o).sin())));
                out.extend(omega.iter().map(|&o| S::of((coord * o).cos())));
            }
        }
    }
    Tensor::new(&[gh * gw, d], out)
}
