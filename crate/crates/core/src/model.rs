//! The masked autoencoder: patch embedding, the three fusion variants of
//! the encoder, per-modality decoders and the masked reconstruction loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionMap, Session, Var};
use crate::config::{DecoderKv, MaskStrategy, ModalityCondition, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::mask::{sample_mask, MaskPlan};
use crate::nn::{
    transformer_block, xattn_decoder_block, xattn_encoder_block, BlockParams, LayerNorm, Linear,
    XAttnDecoderParams, XAttnEncoderParams,
};
use crate::params::{normal_init, GradMap, ParamId, ParamStore};
use crate::patch::{build_pos_embed, patchify, unpatchify};
use crate::tensor::{Scalar, Tensor};

const TOKEN_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
struct DecoderLayout {
    embed: Linear,
    xattn: Option<XAttnDecoderParams>,
    blocks: Vec<BlockParams>,
    norm: LayerNorm,
    head: Linear,
}

/// Parameter handles of one model instance. Identical for every scalar type,
/// so a store can be cast without touching the layout.
#[derive(Debug, Clone)]
struct Layout {
    /// One projection per modality, or a single one over stacked channels.
    embed: Vec<Linear>,
    cls: ParamId,
    missing: Option<[ParamId; 2]>,
    xattn: Option<XAttnEncoderParams>,
    blocks: Vec<BlockParams>,
    norm: LayerNorm,
    mask_token: ParamId,
    decoders: Vec<DecoderLayout>,
}

/// Model structure without weights. All forward passes live here and read
/// weights through a [`Session`], so the same code serves training (f32)
/// and gradient checks (f64).
#[derive(Debug, Clone)]
pub struct Architecture {
    config: ModelConfig,
    layout: Layout,
    pos: Tensor<f64>,
    dec_pos: Tensor<f64>,
}

/// Encoder output before the final norm.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `z_N`, rows in input order.
    pub z: Var,
    pub n_visible: [usize; 2],
    pub cls_row: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainGraph {
    pub loss: Var,
    pub modality_loss: [Var; 2],
    /// Per-patch predictions `[T, P*P*C_i]`.
    pub pred: [Var; 2],
}

/// Images assembled from targets at visible patches and predictions at
/// masked ones.
#[derive(Debug, Clone)]
pub struct Reconstruction<S> {
    pub image: [Tensor<S>; 2],
    pub patches: [Tensor<S>; 2],
}

#[derive(Debug, Clone)]
pub struct PretrainOutput<S> {
    pub loss: S,
    pub plan: MaskPlan,
    pub recon: Reconstruction<S>,
}

impl Architecture {
    /// Registers every parameter in `store` in canonical order and returns
    /// the architecture that reads them.
    pub fn build<S: Scalar, R: Rng + ?Sized>(config: &ModelConfig, store: &mut ParamStore<S>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config;
        let d = c.dim;
        let eps = c.ln_eps;
        let embed = match c.variant {
            Variant::EarlyConcat => vec![Linear::new(store, rng, "patch_embed.stacked", c.patch_dim(c.c1 + c.c2), d, true)],
            _ => vec![
                Linear::new(store, rng, "patch_embed.m1", c.patch_dim(c.c1), d, true),
                Linear::new(store, rng, "patch_embed.m2", c.patch_dim(c.c2), d, true),
            ],
        };
        let cls = store.add("cls_token", normal_init(rng, &[1, d], TOKEN_INIT_STD), false);
        let missing = match c.variant {
            Variant::EarlyConcat => None,
            _ => Some([
                store.add("missing.m1", normal_init(rng, &[1, d], TOKEN_INIT_STD), false),
                store.add("missing.m2", normal_init(rng, &[1, d], TOKEN_INIT_STD), false),
            ]),
        };
        let (xattn, n_blocks) = match c.variant {
            Variant::Xaed => (
                Some(XAttnEncoderParams::new(
                    store,
                    rng,
                    "encoder.xattn",
                    d,
                    c.heads,
                    c.mlp_ratio,
                    eps,
                    c.xattn_shared_weights,
                )?),
                c.depth - 1,
            ),
            _ => (None, c.depth),
        };
        let blocks = (0..n_blocks)
            .map(|i| BlockParams::new(store, rng, &format!("encoder.blocks.{i}"), d, c.heads, c.mlp_ratio, eps))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(store, "encoder.norm", d, eps);
        let mask_token = store.add("decoder.mask_token", normal_init(rng, &[1, c.dec_dim], TOKEN_INIT_STD), false);
        let mut decoders = Vec::with_capacity(2);
        for m in 0..2 {
            let name = format!("decoder.m{}", m + 1);
            let embed = Linear::new(store, rng, &format!("{name}.embed"), d, c.dec_dim, true);
            let (xattn, n_blocks) = match c.variant {
                Variant::EarlyConcat => (None, c.dec_depth),
                _ => (
                    Some(XAttnDecoderParams::new(
                        store,
                        rng,
                        &format!("{name}.xattn"),
                        c.dec_dim,
                        c.dec_heads,
                        c.mlp_ratio,
                        eps,
                    )?),
                    c.dec_depth - 1,
                ),
            };
            let blocks = (0..n_blocks)
                .map(|j| {
                    BlockParams::new(store, rng, &format!("{name}.blocks.{j}"), c.dec_dim, c.dec_heads, c.mlp_ratio, eps)
                })
                .collect::<Result<Vec<_>>>()?;
            let norm = LayerNorm::new(store, &format!("{name}.norm"), c.dec_dim, eps);
            let head = Linear::new(store, rng, &format!("{name}.head"), c.dec_dim, c.patch_dim(c.channels(m)), true);
            decoders.push(DecoderLayout {
                embed,
                xattn,
                blocks,
                norm,
                head,
            });
        }
        let (gh, gw) = c.grid();
        Ok(Architecture {
            config: c.clone(),
            layout: Layout {
                embed,
                cls,
                missing,
                xattn,
                blocks,
                norm,
                mask_token,
                decoders,
            },
            pos: build_pos_embed(gh, gw, d)?,
            dec_pos: build_pos_embed(gh, gw, c.dec_dim)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Parameters that only the encoder path reads (everything except the
    /// decoders and the mask token).
    pub fn is_encoder_param(name: &str) -> bool {
        !name.starts_with("decoder.")
    }

    fn check_images<S: Scalar>(&self, i1: &Tensor<S>, i2: &Tensor<S>) -> Result<()> {
        let c = &self.config;
        for (m, img) in [i1, i2].into_iter().enumerate() {
            let want = [c.height, c.width, c.channels(m)];
            if img.shape() != want {
                return Err(Error::shape(
                    "model input",
                    format!("modality {} image {:?}, config expects {want:?}", m + 1, img.shape()),
                ));
            }
        }
        Ok(())
    }

    fn pos_const<S: Scalar>(&self, s: &mut Session<'_, S>, decoder: bool) -> Result<Var> {
        let t = if decoder { &self.dec_pos } else { &self.pos };
        s.constant(t.cast())
    }

    /// `z_0,i = proj_i(patchify(I_i)) + E`, or the learned missing-modality
    /// token at every position when the modality is absent.
    pub fn embed_modality<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        modality: usize,
        image: Option<&Tensor<S>>,
    ) -> Result<Var> {
        if self.config.variant == Variant::EarlyConcat {
            return Err(Error::Invalid("early_concat has no per-modality projection".into()));
        }
        let t = self.config.num_patches();
        let tokens = match image {
            Some(img) => {
                let patches = s.constant(patchify(img, self.config.patch)?)?;
                self.layout.embed[modality].forward(s, patches)?
            }
            None => {
                let missing = self.layout.missing.expect("present for fused variants")[modality];
                let tok = s.p(missing);
                s.gather_rows(tok, &vec![0; t])?
            }
        };
        let pos = self.pos_const(s, false)?;
        s.add(tokens, pos)
    }

    fn embed_stacked<S: Scalar>(&self, s: &mut Session<'_, S>, i1: &Tensor<S>, i2: &Tensor<S>, cond: ModalityCondition) -> Result<Var> {
        let c = &self.config;
        let ct = c.c1 + c.c2;
        let mut data = Vec::with_capacity(c.height * c.width * ct);
        for (a, b) in i1.data().chunks_exact(c.c1).zip(i2.data().chunks_exact(c.c2)) {
            if cond.uses(0) {
                data.extend_from_slice(a);
            } else {
                data.extend(std::iter::repeat_n(S::zero(), c.c1));
            }
            if cond.uses(1) {
                data.extend_from_slice(b);
            } else {
                data.extend(std::iter::repeat_n(S::zero(), c.c2));
            }
        }
        let stacked = Tensor::new(&[c.height, c.width, ct], data)?;
        let patches = s.constant(patchify(&stacked, c.patch)?)?;
        let tokens = self.layout.embed[0].forward(s, patches)?;
        let pos = self.pos_const(s, false)?;
        s.add(tokens, pos)
    }

    /// Runs the encoder on the visible tokens of `plan`.
    pub fn encode<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        i1: &Tensor<S>,
        i2: &Tensor<S>,
        plan: &MaskPlan,
        cond: ModalityCondition,
    ) -> Result<Encoded> {
        self.check_images(i1, i2)?;
        plan.validate(self.config.num_patches())?;
        let l = &self.layout;
        let cls = s.p(l.cls);
        let (mut z, n_visible, cls_row) = match self.config.variant {
            Variant::EarlyConcat => {
                if !plan.is_consistent() {
                    return Err(Error::Invalid("early_concat needs one mask shared by both modalities".into()));
                }
                let tokens = self.embed_stacked(s, i1, i2, cond)?;
                let vis = s.gather_rows(tokens, &plan.visible[0])?;
                let v = plan.visible[0].len();
                (s.concat(&[cls, vis], 0)?, [v, v], 0)
            }
            Variant::Xad | Variant::Xaed => {
                let mut vis = [None; 2];
                for (m, img) in [i1, i2].into_iter().enumerate() {
                    let tokens = self.embed_modality(s, m, cond.uses(m).then_some(img))?;
                    vis[m] = Some(s.gather_rows(tokens, &plan.visible[m])?);
                }
                let [v1, v2] = vis.map(|v| v.expect("filled above"));
                let n = [plan.visible[0].len(), plan.visible[1].len()];
                let z = match &l.xattn {
                    Some(xp) => {
                        let fused = xattn_encoder_block(s, v1, v2, xp)?;
                        s.concat(&[fused, cls], 0)?
                    }
                    None => s.concat(&[v1, v2, cls], 0)?,
                };
                (z, n, n[0] + n[1])
            }
        };
        for b in &l.blocks {
            z = transformer_block(s, z, b)?;
        }
        Ok(Encoded { z, n_visible, cls_row })
    }

    /// Rows of the encoder output that belong to `modality` (the positional
    /// split of `z_N`).
    pub fn modality_rows(&self, enc: &Encoded, modality: usize) -> Vec<usize> {
        match self.config.variant {
            Variant::EarlyConcat => (1..1 + enc.n_visible[0]).collect(),
            _ => {
                let start = if modality == 0 { 0 } else { enc.n_visible[0] };
                (start..start + enc.n_visible[modality]).collect()
            }
        }
    }

    /// Decodes both modalities from normalized latents. Returns per-patch
    /// predictions `[T, P*P*C_i]`.
    pub fn decode<S: Scalar>(&self, s: &mut Session<'_, S>, enc: &Encoded, plan: &MaskPlan) -> Result<[Var; 2]> {
        let c = &self.config;
        let t = c.num_patches();
        let zn = self.layout.norm.forward(s, enc.z)?;
        let mut seq = Vec::with_capacity(2);
        for m in 0..2 {
            let dec = &self.layout.decoders[m];
            let lat = s.gather_rows(zn, &self.modality_rows(enc, m))?;
            let emb = dec.embed.forward(s, lat)?;
            let mask_tok = s.p(self.layout.mask_token);
            let src = s.concat(&[emb, mask_tok], 0)?;
            let v = plan.visible[m].len();
            let mut idx = vec![v; t];
            for (k, &pos) in plan.visible[m].iter().enumerate() {
                idx[pos] = k;
            }
            let full = s.gather_rows(src, &idx)?;
            let pos = self.pos_const(s, true)?;
            seq.push(s.add(full, pos)?);
        }
        let mut out = [seq[0], seq[1]];
        for m in 0..2 {
            let dec = &self.layout.decoders[m];
            let mut h = seq[m];
            if let Some(xp) = &dec.xattn {
                let other = 1 - m;
                let kv = match c.xattn_decoder_kv {
                    DecoderKv::Full => seq[other],
                    DecoderKv::Visible => s.gather_rows(seq[other], &plan.visible[other])?,
                };
                h = xattn_decoder_block(s, h, kv, xp)?;
            }
            for b in &dec.blocks {
                h = transformer_block(s, h, b)?;
            }
            let h = dec.norm.forward(s, h)?;
            out[m] = dec.head.forward(s, h)?;
        }
        Ok(out)
    }

    /// Reconstruction targets for one modality: raw patches, or per-patch
    /// standardized ones with `norm_pix_loss`.
    pub fn targets<S: Scalar>(&self, image: &Tensor<S>) -> Result<Tensor<S>> {
        let patches = patchify(image, self.config.patch)?;
        if !self.config.norm_pix_loss {
            return Ok(patches);
        }
        let d = patches.last_dim();
        let mut out = patches.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            let (mean, std) = row_stats(row);
            for v in row.iter_mut() {
                *v = S::of((v.f64() - mean) / std);
            }
        }
        Ok(out)
    }

    /// Full pretraining graph for one sample under a given mask.
    pub fn pretrain_graph<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        i1: &Tensor<S>,
        i2: &Tensor<S>,
        plan: &MaskPlan,
    ) -> Result<PretrainGraph> {
        let enc = self.encode(s, i1, i2, plan, ModalityCondition::S1S2)?;
        let pred = self.decode(s, &enc, plan)?;
        let mut losses = [pred[0]; 2];
        for (m, img) in [i1, i2].into_iter().enumerate() {
            let target = self.targets(img)?;
            losses[m] = masked_mse_loss(s, pred[m], &target, &plan.masked[m])?;
        }
        let sum = s.add(losses[0], losses[1])?;
        let loss = s.scale(sum, S::of(0.5))?;
        Ok(PretrainGraph {
            loss,
            modality_loss: losses,
            pred,
        })
    }

    /// Loss and parameter gradients (zero-filled for unused parameters).
    pub fn loss_and_grads<S: Scalar>(
        &self,
        store: &ParamStore<S>,
        i1: &Tensor<S>,
        i2: &Tensor<S>,
        plan: &MaskPlan,
    ) -> Result<(S, GradMap<S>)> {
        let mut s = Session::new(store);
        let g = self.pretrain_graph(&mut s, i1, i2, plan)?;
        let loss = s.value(g.loss).item();
        let mut grads = s.backward(g.loss)?.into_param_map();
        grads.complete(store);
        Ok((loss, grads))
    }

    /// Mask plan for this architecture: early_concat always shares one mask.
    pub fn sample_plan<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<MaskPlan> {
        let strategy = match self.config.variant {
            Variant::EarlyConcat => MaskStrategy::Consistent,
            _ => self.config.strategy,
        };
        sample_mask(self.config.num_patches(), self.config.mask_ratio, strategy, rng)
    }

    /// Normalized CLS latent of a full (unmasked) forward pass.
    pub fn features_graph<S: Scalar>(
        &self,
        s: &mut Session<'_, S>,
        i1: &Tensor<S>,
        i2: &Tensor<S>,
        cond: ModalityCondition,
    ) -> Result<Var> {
        let plan = MaskPlan::none(self.config.num_patches());
        let enc = self.encode(s, i1, i2, &plan, cond)?;
        let zn = self.layout.norm.forward(s, enc.z)?;
        let cls = s.gather_rows(zn, &[enc.cls_row])?;
        s.reshape(cls, &[self.config.dim])
    }
}

fn row_stats<S: Scalar>(row: &[S]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().map(|v| v.f64()).sum::<f64>() / n;
    let var = row.iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>() / n;
    (mean, (var + 1e-6).sqrt())
}

/// Mean squared error over the `masked` rows only.
pub fn masked_mse_loss<S: Scalar>(s: &mut Session<'_, S>, pred: Var, target: &Tensor<S>, masked: &[usize]) -> Result<Var> {
    if masked.is_empty() {
        return Err(Error::Invalid("masked_mse_loss needs at least one masked patch".into()));
    }
    if s.shape(pred) != target.shape() {
        return Err(Error::shape(
            "masked_mse_loss",
            format!("prediction {:?} vs target {:?}", s.shape(pred), target.shape()),
        ));
    }
    let target = s.constant(target.clone())?;
    let diff = s.sub(pred, target)?;
    let diff = s.gather_rows(diff, masked)?;
    let sq = s.mul(diff, diff)?;
    s.mean(sq)
}

/// An architecture together with its weights.
#[derive(Debug, Clone)]
pub struct FusMae<S> {
    pub arch: Architecture,
    pub store: ParamStore<S>,
}

impl<S: Scalar> FusMae<S> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let arch = Architecture::build(config, &mut store, &mut rng)?;
        Ok(FusMae { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.arch.config()
    }

    pub fn cast<T: Scalar>(&self) -> FusMae<T> {
        FusMae {
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    /// Samples a mask, runs encoder and decoders, and assembles the
    /// reconstructions.
    pub fn forward_pretrain<R: Rng + ?Sized>(&self, i1: &Tensor<S>, i2: &Tensor<S>, rng: &mut R) -> Result<PretrainOutput<S>> {
        let plan = self.arch.sample_plan(rng)?;
        self.forward_with_plan(i1, i2, plan)
    }

    pub fn forward_with_plan(&self, i1: &Tensor<S>, i2: &Tensor<S>, plan: MaskPlan) -> Result<PretrainOutput<S>> {
        let mut s = Session::new(&self.store);
        let g = self.arch.pretrain_graph(&mut s, i1, i2, &plan)?;
        let c = self.config();
        let mut patches = Vec::with_capacity(2);
        let mut images = Vec::with_capacity(2);
        for (m, img) in [i1, i2].into_iter().enumerate() {
            let target = patchify(img, c.patch)?;
            let pred = s.value(g.pred[m]);
            let d = target.last_dim();
            let mut data = target.data().to_vec();
            for &t in &plan.masked[m] {
                let mut row = pred.row(t).to_vec();
                if c.norm_pix_loss {
                    let (mean, std) = row_stats(target.row(t));
                    for v in &mut row {
                        *v = S::of(v.f64() * std + mean);
                    }
                }
                data[t * d..(t + 1) * d].copy_from_slice(&row);
            }
            let assembled = Tensor::new(target.shape(), data)?;
            images.push(unpatchify(&assembled, c.height, c.width, c.channels(m), c.patch)?);
            patches.push(pred.clone());
        }
        let [p1, p2]: [Tensor<S>; 2] = patches.try_into().expect("two modalities");
        let [r1, r2]: [Tensor<S>; 2] = images.try_into().expect("two modalities");
        Ok(PretrainOutput {
            loss: s.value(g.loss).item(),
            plan,
            recon: Reconstruction {
                image: [r1, r2],
                patches: [p1, p2],
            },
        })
    }

    /// CLS representation `[d]` from a full unmasked forward pass.
    pub fn extract_features(&self, i1: &Tensor<S>, i2: &Tensor<S>, cond: ModalityCondition) -> Result<Tensor<S>> {
        let mut s = Session::new(&self.store);
        let f = self.arch.features_graph(&mut s, i1, i2, cond)?;
        Ok(s.value(f).clone())
    }

    /// Attention weights of an unmasked forward pass, plus the modality of
    /// every encoder token (`None` for CLS) for block-diagonality scoring.
    pub fn attention_maps(&self, i1: &Tensor<S>, i2: &Tensor<S>) -> Result<AttentionReport> {
        let mut s = Session::new(&self.store);
        s.enable_attention_capture();
        let t = self.config().num_patches();
        let plan = MaskPlan::none(t);
        self.arch.encode(&mut s, i1, i2, &plan, ModalityCondition::S1S2)?;
        let maps = s.take_attention_maps();
        let token_modality = match self.config().variant {
            Variant::EarlyConcat => std::iter::once(None).chain((0..t).map(|_| None)).collect(),
            _ => (0..t)
                .map(|_| Some(0))
                .chain((0..t).map(|_| Some(1)))
                .chain(std::iter::once(None))
                .collect(),
        };
        Ok(AttentionReport { maps, token_modality })
    }
}

#[derive(Debug, Clone)]
pub struct AttentionReport {
    pub maps: Vec<AttentionMap>,
    /// Modality of each token of the encoder's self-attention sequence.
    pub token_modality: Vec<Option<usize>>,
}

impl AttentionReport {
    /// Label of the first self-attention block of the encoder.
    pub const FIRST_SELF_ATTENTION: &'static str = "encoder.blocks.0.attn";

    /// Per head: fraction of attention mass that modality tokens place on
    /// keys of their own modality, averaged over modality query rows. `None`
    /// when tokens carry no single modality (early_concat).
    pub fn within_modality_mass(&self) -> Option<Vec<f64>> {
        if self.token_modality.iter().all(Option::is_none) {
            return None;
        }
        let mut heads: Vec<&AttentionMap> =
            self.maps.iter().filter(|m| m.label == Self::FIRST_SELF_ATTENTION).collect();
        heads.sort_by_key(|m| m.head);
        Some(heads.iter().map(|m| within_mass(m, &self.token_modality)).collect())
    }

    /// The score uniform attention would get: mean fraction of keys that
    /// share the query token's modality.
    pub fn uniform_within_mass(&self) -> Option<f64> {
        let t = self.token_modality.len();
        let rows: Vec<f64> = self
            .token_modality
            .iter()
            .flatten()
            .map(|m| self.token_modality.iter().filter(|k| **k == Some(*m)).count() as f64 / t as f64)
            .collect();
        (!rows.is_empty()).then(|| rows.iter().sum::<f64>() / rows.len() as f64)
    }
}

fn within_mass(map: &AttentionMap, modality: &[Option<usize>]) -> f64 {
    let mut total = 0.0;
    let mut rows = 0usize;
    for i in 0..map.rows {
        let Some(mi) = modality[i] else { continue };
        total += map
            .row(i)
            .iter()
            .zip(modality)
            .filter(|(_, mk)| **mk == Some(mi))
            .map(|(w, _)| w)
            .sum::<f64>();
        rows += 1;
    }
    total / rows as f64
}
