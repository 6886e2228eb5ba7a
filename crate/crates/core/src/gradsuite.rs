//! Finite-difference checks of every block and of the full pretraining
//! objective at the minimal configuration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Session, Var};
use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::gradcheck::{check_objective, CheckOptions, CheckResult, Objective};
use crate::mask::MaskPlan;
use crate::model::{Architecture, FusMae};
use crate::nn::{
    mlp_forward, multi_head_attention, transformer_block, xattn_decoder_block, xattn_encoder_block, AttentionParams,
    BlockParams, Linear, MlpParams, XAttnDecoderParams, XAttnEncoderParams,
};
use crate::params::{GradMap, ParamId, ParamStore};
use crate::patch::{build_pos_embed, patchify};
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct SuiteOptions {
    pub dtype: DType,
    pub tol: f64,
    pub check: CheckOptions,
    /// Backward rule whose sign is flipped in every tape (fault fixture).
    pub fault: Option<&'static str>,
}

impl SuiteOptions {
    /// Defaults per precision: f64 at 1e-4, f32 at 1e-3. The f32 floor is
    /// 1e-5 because float32 rounding alone leaves ~1e-8 absolute noise on
    /// gradient entries.
    pub fn for_dtype(dtype: DType) -> Self {
        let (tol, floor) = match dtype {
            DType::F64 => (1e-4, 1e-6),
            DType::F32 => (1e-3, 1e-5),
        };
        SuiteOptions {
            dtype,
            tol,
            check: CheckOptions {
                dtype,
                floor,
                ..CheckOptions::default()
            },
            fault: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub suite: String,
    pub params: Vec<CheckResult>,
}

impl SuiteEntry {
    pub fn worst(&self) -> &CheckResult {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
            .expect("every suite checks at least one parameter")
    }
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub tol: f64,
    pub entries: Vec<SuiteEntry>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.worst().passes(self.tol))
    }

    pub fn lines(&self) -> Vec<String> {
        self.entries
            .iter()
            .map(|e| {
                let w = e.worst();
                format!(
                    "{:<5} {:<28} max_rel_err={:.3e} worst_param={} coords={}",
                    if w.passes(self.tol) { "PASS" } else { "FAIL" },
                    e.suite,
                    w.max_rel_err,
                    w.name,
                    e.params.iter().map(|p| p.checked).sum::<usize>()
                )
            })
            .collect()
    }
}

enum Block {
    Attention(AttentionParams),
    Mlp(MlpParams),
    Transformer(BlockParams),
    XEnc(XAttnEncoderParams),
    XDec(XAttnDecoderParams),
    /// Projection, patch size, and a constant `[8, 8, C]` image.
    PatchEmbed(Linear, usize, Tensor<f64>),
}

/// `sum(block(x, y) ⊙ w)` with the inputs registered as parameters, so input
/// gradients are checked too.
struct BlockObjective {
    block: Block,
    x: ParamId,
    y: ParamId,
    w: Tensor<f64>,
    fault: Option<&'static str>,
}

impl BlockObjective {
    fn graph<S: Scalar>(&self, s: &mut Session<'_, S>) -> Result<Var> {
        if let Some(op) = self.fault {
            s.inject_sign_fault(op);
        }
        let x = s.p(self.x);
        let y = s.p(self.y);
        let out = match &self.block {
            Block::Attention(p) => multi_head_attention(s, x, y, p)?,
            Block::Mlp(p) => mlp_forward(s, x, p)?,
            Block::Transformer(p) => transformer_block(s, x, p)?,
            Block::XEnc(p) => xattn_encoder_block(s, x, y, p)?,
            Block::XDec(p) => xattn_decoder_block(s, x, y, p)?,
            Block::PatchEmbed(proj, patch, img) => {
                let patches = s.constant(patchify(&img.cast(), *patch)?)?;
                let tokens = proj.forward(s, patches)?;
                let pos = s.constant(build_pos_embed(8 / patch, 8 / patch, proj.out_dim)?)?;
                s.add(tokens, pos)?
            }
        };
        let w = s.constant(self.w.cast())?;
        let prod = s.mul(out, w)?;
        s.sum(prod)
    }
}

impl Objective for BlockObjective {
    fn loss<S: Scalar>(&self, store: &ParamStore<S>) -> Result<S> {
        let mut s = Session::new(store);
        let l = self.graph(&mut s)?;
        Ok(s.value(l).item())
    }

    fn loss_and_grads<S: Scalar>(&self, store: &ParamStore<S>) -> Result<(S, GradMap<S>)> {
        let mut s = Session::new(store);
        let l = self.graph(&mut s)?;
        let mut g = s.backward(l)?.into_param_map();
        g.complete(store);
        Ok((s.value(l).item(), g))
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("nonempty shape")
}

fn block_case(
    seed: u64,
    (tx, ty, d, out_rows): (usize, usize, usize, usize),
    fault: Option<&'static str>,
    build: impl FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<Block>,
) -> Result<(BlockObjective, ParamStore<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let block = build(&mut store, &mut rng)?;
    // Move norm gains and biases off their 1/0 initialization so every
    // coordinate has a generic gradient.
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        if !store.param(id).decay {
            for v in store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let x = store.add("input.x", uniform(&mut rng, &[tx, d]), false);
    let y = store.add("input.y", uniform(&mut rng, &[ty, d]), false);
    let w = uniform(&mut rng, &[out_rows, out_rows_width(&block, d)]);
    Ok((BlockObjective { block, x, y, w, fault }, store))
}

fn out_rows_width(block: &Block, d: usize) -> usize {
    match block {
        Block::PatchEmbed(p, _, _) => p.out_dim,
        _ => d,
    }
}

/// Pretraining loss of one sample under a fixed mask.
pub struct PretrainObjective {
    pub arch: Architecture,
    pub images: [Tensor<f64>; 2],
    pub plan: MaskPlan,
    pub fault: Option<&'static str>,
}

impl Objective for PretrainObjective {
    fn loss<S: Scalar>(&self, store: &ParamStore<S>) -> Result<S> {
        let mut s = Session::new(store);
        let (i1, i2) = (self.images[0].cast(), self.images[1].cast());
        let g = self.arch.pretrain_graph(&mut s, &i1, &i2, &self.plan)?;
        Ok(s.value(g.loss).item())
    }

    fn loss_and_grads<S: Scalar>(&self, store: &ParamStore<S>) -> Result<(S, GradMap<S>)> {
        let mut s = Session::new(store);
        if let Some(op) = self.fault {
            s.inject_sign_fault(op);
        }
        let (i1, i2) = (self.images[0].cast(), self.images[1].cast());
        let g = self.arch.pretrain_graph(&mut s, &i1, &i2, &self.plan)?;
        let mut grads = s.backward(g.loss)?.into_param_map();
        grads.complete(store);
        Ok((s.value(g.loss).item(), grads))
    }
}

/// Minimal-config end-to-end objective for `variant`, with norm parameters
/// and tokens perturbed away from their initial values.
pub fn end_to_end_case(variant: Variant, seed: u64) -> Result<(PretrainObjective, ParamStore<f64>)> {
    let config = ModelConfig {
        variant,
        ..ModelConfig::minimal()
    };
    let mut model = FusMae::<f64>::new(&config, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        if !model.store.param(id).decay {
            for v in model.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
    }
    let images = [
        uniform(&mut rng, &[config.height, config.width, config.c1]),
        uniform(&mut rng, &[config.height, config.width, config.c2]),
    ];
    let plan = model.arch.sample_plan(&mut rng)?;
    Ok((
        PretrainObjective {
            arch: model.arch,
            images,
            plan,
            fault: None,
        },
        model.store,
    ))
}

/// Runs every block check and the three end-to-end checks.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut entries = Vec::new();
    let mut push = |suite: &str, obj: &dyn Fn() -> Result<Vec<CheckResult>>| -> Result<()> {
        entries.push(SuiteEntry {
            suite: suite.to_string(),
            params: obj()?,
        });
        Ok(())
    };
    let f = opts.fault;
    let c = opts.check;
    let cases: Vec<(&str, (usize, usize, usize, usize), BuildFn)> = vec![
        ("attention", (3, 3, 4, 3), Box::new(|st, r| Ok(Block::Attention(AttentionParams::new(st, r, "attn", 4, 2)?)))),
        ("mlp", (2, 1, 4, 2), Box::new(|st, r| Ok(Block::Mlp(MlpParams::new(st, r, "mlp", 4, 8))))),
        (
            "transformer_block",
            (3, 1, 4, 3),
            Box::new(|st, r| Ok(Block::Transformer(BlockParams::new(st, r, "block", 4, 2, 2, 1e-6)?))),
        ),
        (
            "xattn_encoder_block",
            (2, 2, 4, 4),
            Box::new(|st, r| Ok(Block::XEnc(XAttnEncoderParams::new(st, r, "xenc", 4, 2, 2, 1e-6, true)?))),
        ),
        (
            "xattn_decoder_block",
            (2, 2, 4, 2),
            Box::new(|st, r| Ok(Block::XDec(XAttnDecoderParams::new(st, r, "xdec", 4, 2, 2, 1e-6)?))),
        ),
        (
            "patch_embed",
            (1, 1, 8, 4),
            Box::new(|st, r| {
                let proj = Linear::new(st, r, "proj", 4 * 4 * 2, 8, true);
                Ok(Block::PatchEmbed(proj, 4, uniform(r, &[8, 8, 2])))
            }),
        ),
    ];
    for (i, (name, dims, build)) in cases.into_iter().enumerate() {
        let (obj, store) = block_case(100 + i as u64, dims, f, build)?;
        push(name, &|| check_objective(&obj, &store, c))?;
    }
    for (i, v) in Variant::ALL.into_iter().enumerate() {
        let (mut obj, store) = end_to_end_case(v, 200 + i as u64)?;
        obj.fault = f;
        let opts = CheckOptions {
            max_coords: c.max_coords.max(store.len() * 3),
            ..c
        };
        push(&format!("end_to_end.{v}"), &|| check_objective(&obj, &store, opts))?;
    }
    Ok(SuiteReport { tol: opts.tol, entries })
}

type BuildFn = Box<dyn FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> Result<Block>>;
