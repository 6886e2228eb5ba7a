//! Transformer building blocks: multi-head (cross-)attention, the token-wise
//! MLP, the pre-norm encoder block and the two cross-attention fusion blocks.
//!
//! Parameter structs only hold [`ParamId`]s into a [`ParamStore`]; the forward
//! functions read the values through a [`Session`].

use rand::Rng;

use crate::autodiff::{Session, Var};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, in_dim, out_dim),
            true,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), false));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let w = s.p(self.weight);
        let y = s.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.p(b);
                s.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, dim: usize, eps: f64) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones(&[dim]), false),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[dim]), false),
            dim,
            eps,
        }
    }

    pub fn forward<S: Scalar>(&self, s: &mut Session<'_, S>, x: Var) -> Result<Var> {
        let g = s.p(self.gain);
        let b = s.p(self.bias);
        s.layer_norm(x, g, b, self.eps)
    }
}

/// Query/key/value/output projections, all `d x d`, split into `heads`
/// heads of width `d / heads`.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub name: String,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: dim {dim} not divisible by {heads} heads")));
        }
        let mut mat = |suffix: &str| store.add(format!("{name}.{suffix}"), xavier_uniform(rng, dim, dim), true);
        Ok(AttentionParams {
            name: name.to_string(),
            wq: mat("wq"),
            wk: mat("wk"),
            wv: mat("wv"),
            wo: mat("wo"),
            dim,
            heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// `softmax(Q K^T / sqrt(d_q)) V` per head, heads concatenated and projected
/// by `W_o`. Queries come from `q_src`, keys and values from `kv_src`.
pub fn multi_head_attention<S: Scalar>(
    s: &mut Session<'_, S>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
) -> Result<Var> {
    attend(s, q_src, kv_src, p, &p.name)
}

/// [`multi_head_attention`] with an explicit label for captured weights.
pub(crate) fn attend<S: Scalar>(
    s: &mut Session<'_, S>,
    q_src: Var,
    kv_src: Var,
    p: &AttentionParams,
    label: &str,
) -> Result<Var> {
    for (which, v) in [("query", q_src), ("key/value", kv_src)] {
        let shape = s.shape(v);
        if shape.len() != 2 || shape[1] != p.dim {
            return Err(Error::shape(
                "multi_head_attention",
                format!("{which} source {shape:?} must be [tokens, {}]", p.dim),
            ));
        }
    }
    let (wq, wk, wv, wo) = (s.p(p.wq), s.p(p.wk), s.p(p.wv), s.p(p.wo));
    let q = s.matmul(q_src, wq)?;
    let k = s.matmul(kv_src, wk)?;
    let v = s.matmul(kv_src, wv)?;
    let dq = p.head_dim();
    let scale = S::of(1.0 / (dq as f64).sqrt());
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = s.narrow(q, h * dq, dq)?;
        let kh = s.narrow(k, h * dq, dq)?;
        let vh = s.narrow(v, h * dq, dq)?;
        let kt = s.transpose(kh)?;
        let logits = s.matmul(qh, kt)?;
        let logits = s.scale(logits, scale)?;
        let weights = s.softmax(logits, 1)?;
        s.record_attention(label, h, weights);
        heads.push(s.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        s.concat(&heads, 1)?
    };
    s.matmul(merged, wo)
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl MlpParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        hidden: usize,
    ) -> Self {
        MlpParams {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), dim, hidden, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, dim, true),
        }
    }
}

/// `W_2 gelu(W_1 x + b_1) + b_2`, token-wise.
pub fn mlp_forward<S: Scalar>(s: &mut Session<'_, S>, x: Var, p: &MlpParams) -> Result<Var> {
    let h = p.fc1.forward(s, x)?;
    let h = s.gelu(h)?;
    p.fc2.forward(s, h)
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub norm1: LayerNorm,
    pub attn: AttentionParams,
    pub norm2: LayerNorm,
    pub mlp: MlpParams,
}

impl BlockParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(BlockParams {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim, eps),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim, eps),
            mlp: MlpParams::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        })
    }
}

/// `x + MHA(LN(x), LN(x))`, then `x + MLP(LN(x))`.
pub fn transformer_block<S: Scalar>(s: &mut Session<'_, S>, x: Var, p: &BlockParams) -> Result<Var> {
    let h = p.norm1.forward(s, x)?;
    let a = multi_head_attention(s, h, h, &p.attn)?;
    let x = s.add(x, a)?;
    let h = p.norm2.forward(s, x)?;
    let m = mlp_forward(s, h, &p.mlp)?;
    s.add(x, m)
}

/// Cross-attended patch projection block over two token streams.
#[derive(Debug, Clone)]
pub struct XAttnEncoderParams {
    pub norm_x: LayerNorm,
    pub norm_y: LayerNorm,
    /// Used for `CA(x, y)`, and for `CA(y, x)` too when `attn_yx` is `None`.
    pub attn: AttentionParams,
    pub attn_yx: Option<AttentionParams>,
    pub norm_mlp: LayerNorm,
    pub mlp: MlpParams,
}

impl XAttnEncoderParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
        shared_weights: bool,
    ) -> Result<Self> {
        let norm_x = LayerNorm::new(store, &format!("{name}.norm_x"), dim, eps);
        let norm_y = LayerNorm::new(store, &format!("{name}.norm_y"), dim, eps);
        let attn = AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads)?;
        let attn_yx = if shared_weights {
            None
        } else {
            Some(AttentionParams::new(store, rng, &format!("{name}.attn_yx"), dim, heads)?)
        };
        Ok(XAttnEncoderParams {
            norm_x,
            norm_y,
            attn,
            attn_yx,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim, eps),
            mlp: MlpParams::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        })
    }
}

/// `fus = (x ⊕ y) + (CA(x, y) ⊕ CA(y, x))`, output `fus + MLP(LN(fus))`.
/// Returns `T_x + T_y` tokens, x's first.
pub fn xattn_encoder_block<S: Scalar>(
    s: &mut Session<'_, S>,
    x: Var,
    y: Var,
    p: &XAttnEncoderParams,
) -> Result<Var> {
    let (dx, dy) = (s.shape(x)[1], s.shape(y)[1]);
    if dx != dy || dx != p.attn.dim {
        return Err(Error::shape(
            "xattn_encoder_block",
            format!("stream widths {dx} and {dy} vs block width {}", p.attn.dim),
        ));
    }
    let nx = p.norm_x.forward(s, x)?;
    let ny = p.norm_y.forward(s, y)?;
    let yx = p.attn_yx.as_ref().unwrap_or(&p.attn);
    let ca_xy = attend(s, nx, ny, &p.attn, &format!("{}.xy", p.attn.name))?;
    let ca_yx = attend(s, ny, nx, yx, &format!("{}.yx", yx.name))?;
    let tokens = s.concat(&[x, y], 0)?;
    let cross = s.concat(&[ca_xy, ca_yx], 0)?;
    let fus = s.add(tokens, cross)?;
    let h = p.norm_mlp.forward(s, fus)?;
    let m = mlp_forward(s, h, &p.mlp)?;
    s.add(fus, m)
}

/// Cross-attention block feeding one modality's decoder.
#[derive(Debug, Clone)]
pub struct XAttnDecoderParams {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: AttentionParams,
    pub norm_mlp: LayerNorm,
    pub mlp: MlpParams,
}

impl XAttnDecoderParams {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        rng: &mut R,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        eps: f64,
    ) -> Result<Self> {
        Ok(XAttnDecoderParams {
            norm_q: LayerNorm::new(store, &format!("{name}.norm_q"), dim, eps),
            norm_kv: LayerNorm::new(store, &format!("{name}.norm_kv"), dim, eps),
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), dim, heads)?,
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), dim, eps),
            mlp: MlpParams::new(store, rng, &format!("{name}.mlp"), dim, dim * mlp_ratio),
        })
    }
}

/// `z = z_i + CA(z_i, z_j)`, output `z + MLP(LN(z))`. Shape follows `z_i`.
pub fn xattn_decoder_block<S: Scalar>(
    s: &mut Session<'_, S>,
    z_i: Var,
    z_j: Var,
    p: &XAttnDecoderParams,
) -> Result<Var> {
    let (di, dj) = (s.shape(z_i)[1], s.shape(z_j)[1]);
    if di != dj || di != p.attn.dim {
        return Err(Error::shape(
            "xattn_decoder_block",
            format!("widths {di} and {dj} vs block width {}", p.attn.dim),
        ));
    }
    let q = p.norm_q.forward(s, z_i)?;
    let kv = p.norm_kv.forward(s, z_j)?;
    let ca = multi_head_attention(s, q, kv, &p.attn)?;
    let z = s.add(z_i, ca)?;
    let h = p.norm_mlp.forward(s, z)?;
    let m = mlp_forward(s, h, &p.mlp)?;
    s.add(z, m)
}
