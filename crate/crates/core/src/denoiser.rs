//! Transformer predicting `v` over flattened plane tokens.
//!
//! Conditioning tokens are projected separately and prepended to the noisy
//! tokens; attention is full (no mask) and the prefix is dropped from the
//! output. Timestep, class and task embeddings are summed into one vector
//! that drives adaptive layer norm. The per-layer modulation is a shared base
//! projection plus a rank-`r` layer-specific correction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diffusion::{Conditioning, Denoise};
use crate::error::{config_err, shape_err, Result};
use crate::factorization::{PlaneKind, PlaneLayout};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::tensor::NdTensor;

const LN_EPS: f32 = 1e-6;
const QK_EPS: f32 = 1e-12;
/// Modulation vectors per block: shift, scale, gate for attention and MLP.
const MODS: usize = 6;

/// Plane ids used by the positional encoding.
pub const PLANE_IDS: usize = 9;
/// Plane id of volumetric tokens.
pub const VOLUME_PLANE_ID: usize = 8;

pub fn plane_id(kind: PlaneKind, conditioning: bool) -> usize {
    let base = match kind {
        PlaneKind::Xt => 0,
        PlaneKind::Yt => 1,
        PlaneKind::Xy1 => 2,
        PlaneKind::Xy2 => 3,
    };
    base + if conditioning { 4 } else { 0 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub lora_rank: usize,
    /// Number of classes; index `vocab` is the unconditional label.
    pub vocab: usize,
    pub max_seq: usize,
    /// Channels of each latent token.
    pub token_channels: usize,
    pub tasks: usize,
    /// Size of the row and column embedding tables.
    pub max_coord: usize,
    pub mlp_ratio: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            depth: 8,
            width: 256,
            heads: 8,
            lora_rank: 2,
            vocab: 10,
            max_seq: 2048,
            token_channels: 8,
            tasks: 4,
            max_coord: 128,
            mlp_ratio: 4,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0
            || self.width == 0
            || self.heads == 0
            || self.token_channels == 0
            || self.mlp_ratio == 0
        {
            return Err(config_err!(
                "depth, width, heads, token_channels and mlp_ratio must be positive"
            ));
        }
        if self.width % self.heads != 0 {
            return Err(config_err!(
                "width {} is not divisible by {} heads",
                self.width,
                self.heads
            ));
        }
        if self.width % 2 != 0 {
            return Err(config_err!("width must be even for the timestep embedding"));
        }
        if self.lora_rank == 0 {
            return Err(config_err!("lora_rank must be at least 1"));
        }
        if self.tasks == 0 || self.max_coord == 0 || self.max_seq == 0 {
            return Err(config_err!("tasks, max_coord and max_seq must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Scalars in the modulation pathway: shared base, per-layer low-rank
    /// factors and the final-layer modulation.
    pub fn modulation_params(&self) -> usize {
        let d = self.width;
        let base = d * MODS * d + MODS * d;
        let per_layer = d * self.lora_rank + self.lora_rank * MODS * d;
        let head = d * 2 * d + 2 * d;
        base + self.depth * per_layer + head
    }
}

/// A run of tokens from one plane, row-major over `rows x cols`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub plane: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Token layout seen by the denoiser.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub cond: Vec<Segment>,
    pub target: Vec<Segment>,
}

impl SequenceLayout {
    pub fn planes(layout: &PlaneLayout, cond: &[PlaneKind], target: &[PlaneKind]) -> Self {
        let seg = |k: PlaneKind, is_cond: bool| {
            let (rows, cols) = layout.plane_extent(k);
            Segment {
                plane: plane_id(k, is_cond),
                rows,
                cols,
            }
        };
        Self {
            cond: cond.iter().map(|&k| seg(k, true)).collect(),
            target: target.iter().map(|&k| seg(k, false)).collect(),
        }
    }

    /// Dense `t x h x w` tokens, rows indexed by `t * h + y`.
    pub fn volumetric(t: usize, h: usize, w: usize) -> Self {
        Self {
            cond: Vec::new(),
            target: vec![Segment {
                plane: VOLUME_PLANE_ID,
                rows: t * h,
                cols: w,
            }],
        }
    }

    pub fn cond_len(&self) -> usize {
        self.cond.iter().map(Segment::tokens).sum()
    }

    pub fn target_len(&self) -> usize {
        self.target.iter().map(Segment::tokens).sum()
    }

    /// `(plane, row, col)` of every token, conditioning prefix first.
    pub fn positions(&self) -> Vec<(usize, usize, usize)> {
        self.cond
            .iter()
            .chain(&self.target)
            .flat_map(|s| (0..s.rows).flat_map(move |r| (0..s.cols).map(move |c| (s.plane, r, c))))
            .collect()
    }
}

#[derive(Clone, Debug)]
struct Block {
    lora_a: ParamId,
    lora_b: ParamId,
    qkv: Linear,
    temperature: ParamId,
    out: Linear,
    mlp_in: Linear,
    mlp_out: Linear,
}

/// The denoising transformer together with its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub layout: SequenceLayout,
    pub store: ParamStore,
    in_proj: Linear,
    cond_proj: Linear,
    plane_emb: ParamId,
    row_emb: ParamId,
    col_emb: ParamId,
    time_mlp1: Linear,
    time_mlp2: Linear,
    class_emb: ParamId,
    task_emb: ParamId,
    mod_base: Linear,
    blocks: Vec<Block>,
    final_mod: Linear,
    out_proj: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, layout: SequenceLayout, seed: u64) -> Result<Self> {
        config.validate()?;
        let total = layout.cond_len() + layout.target_len();
        if layout.target_len() == 0 {
            return Err(config_err!("layout has no target tokens"));
        }
        if total > config.max_seq {
            return Err(config_err!(
                "sequence of {total} tokens exceeds max_seq {}",
                config.max_seq
            ));
        }
        for s in layout.cond.iter().chain(&layout.target) {
            if s.plane >= PLANE_IDS || s.rows > config.max_coord || s.cols > config.max_coord {
                return Err(config_err!("segment {s:?} outside the positional tables"));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, c, r) = (config.width, config.token_channels, config.lora_rank);
        let emb = |store: &mut ParamStore, name: &str, rows: usize, rng: &mut ChaCha8Rng| {
            store.add(name, NdTensor::randn([rows, d], 0.02, rng))
        };
        let in_proj = Linear::new(&mut store, "in_proj", 2 * c, d, true, &mut rng)?;
        let cond_proj = Linear::new(&mut store, "cond_proj", c, d, true, &mut rng)?;
        let plane_emb = emb(&mut store, "pos.plane", PLANE_IDS, &mut rng)?;
        let row_emb = emb(&mut store, "pos.row", config.max_coord, &mut rng)?;
        let col_emb = emb(&mut store, "pos.col", config.max_coord, &mut rng)?;
        let time_mlp1 = Linear::new(&mut store, "time.mlp1", d, d, true, &mut rng)?;
        let time_mlp2 = Linear::new(&mut store, "time.mlp2", d, d, true, &mut rng)?;
        let class_emb = emb(&mut store, "class_emb", config.vocab + 1, &mut rng)?;
        let task_emb = emb(&mut store, "task_emb", config.tasks, &mut rng)?;
        let mod_base = Linear::zeros(&mut store, "mod.base", d, MODS * d)?;
        let mut blocks = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            let p = format!("block{l}");
            blocks.push(Block {
                lora_a: store.add(
                    format!("{p}.lora_a"),
                    NdTensor::randn([d, r], 1.0 / (d as f32).sqrt(), &mut rng),
                )?,
                lora_b: store.add(format!("{p}.lora_b"), NdTensor::zeros([r, MODS * d]))?,
                qkv: Linear::new(&mut store, &format!("{p}.qkv"), d, 3 * d, true, &mut rng)?,
                temperature: store.add(
                    format!("{p}.temperature"),
                    NdTensor::full([config.heads, 1], (config.head_dim() as f32).sqrt()),
                )?,
                out: Linear::new(&mut store, &format!("{p}.attn_out"), d, d, true, &mut rng)?,
                mlp_in: Linear::new(
                    &mut store,
                    &format!("{p}.mlp_in"),
                    d,
                    config.mlp_ratio * d,
                    true,
                    &mut rng,
                )?,
                mlp_out: Linear::new(
                    &mut store,
                    &format!("{p}.mlp_out"),
                    config.mlp_ratio * d,
                    d,
                    true,
                    &mut rng,
                )?,
            });
        }
        let final_mod = Linear::zeros(&mut store, "mod.final", d, 2 * d)?;
        let out_proj = Linear::new(&mut store, "out_proj", d, c, true, &mut rng)?;
        Ok(Self {
            config,
            layout,
            store,
            in_proj,
            cond_proj,
            plane_emb,
            row_emb,
            col_emb,
            time_mlp1,
            time_mlp2,
            class_emb,
            task_emb,
            mod_base,
            blocks,
            final_mod,
            out_proj,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Sinusoidal embedding of a timestep, width `d`.
    pub fn timestep_features(t: usize, d: usize) -> NdTensor {
        let half = d / 2;
        let mut v = vec![0.0f32; d];
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let a = t as f64 * freq;
            v[i] = a.sin() as f32;
            v[half + i] = a.cos() as f32;
        }
        NdTensor::new([1, d], v).expect("length d")
    }

    fn positional<'t>(&self, tape: &'t Tape) -> Result<Var<'t>> {
        let pos = self.layout.positions();
        let planes: Vec<usize> = pos.iter().map(|p| p.0).collect();
        let rows: Vec<usize> = pos.iter().map(|p| p.1).collect();
        let cols: Vec<usize> = pos.iter().map(|p| p.2).collect();
        let p = |id| tape.param(&self.store, id);
        p(self.plane_emb)
            .embedding(&planes)?
            .add(p(self.row_emb).embedding(&rows)?)?
            .add(p(self.col_emb).embedding(&cols)?)
    }

    /// Summed timestep, class and task embedding, `[1, d]`.
    fn condition_embedding<'t>(
        &self,
        tape: &'t Tape,
        t: usize,
        cond: &Conditioning,
    ) -> Result<Var<'t>> {
        let cfg = &self.config;
        let label = cond.label.unwrap_or(cfg.vocab);
        if label > cfg.vocab {
            return Err(config_err!(
                "class label {label} outside vocabulary {}",
                cfg.vocab
            ));
        }
        if cond.task >= cfg.tasks {
            return Err(config_err!(
                "task {} outside {} task embeddings",
                cond.task,
                cfg.tasks
            ));
        }
        let tf = tape.constant(Self::timestep_features(t, cfg.width));
        let te = self.time_mlp1.forward(tape, &self.store, tf)?.silu();
        let te = self.time_mlp2.forward(tape, &self.store, te)?;
        let ce = tape
            .param(&self.store, self.class_emb)
            .embedding(&[label])?;
        let ke = tape
            .param(&self.store, self.task_emb)
            .embedding(&[cond.task])?;
        te.add(ce)?.add(ke)
    }

    /// Modulation vectors of layer `layer`: `[shift1, scale1, gate1, shift2, scale2, gate2]`, each `[d]`.
    pub fn modulation<'t>(
        &self,
        tape: &'t Tape,
        cond_emb: Var<'t>,
        layer: usize,
    ) -> Result<Vec<Var<'t>>> {
        let d = self.config.width;
        let e = cond_emb.silu();
        let base = self.mod_base.forward(tape, &self.store, e)?;
        let block = &self.blocks[layer];
        let low = e
            .matmul(tape.param(&self.store, block.lora_a))?
            .matmul(tape.param(&self.store, block.lora_b))?;
        let m = base.add(low)?.reshape(&[MODS * d])?;
        (0..MODS).map(|i| m.slice(0, i * d, d)).collect()
    }

    fn modulate<'t>(x: Var<'t>, shift: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LN_EPS).mul(scale.offset(1.0))?.add(shift)
    }

    fn attention<'t>(&self, tape: &'t Tape, block: &Block, x: Var<'t>) -> Result<Var<'t>> {
        let (heads, dh, d) = (self.config.heads, self.config.head_dim(), self.config.width);
        let len = x.shape()[0];
        let qkv = block.qkv.forward(tape, &self.store, x)?;
        let temp = tape.param(&self.store, block.temperature);
        let split = |i: usize| qkv.slice(1, i * d, d)?.reshape(&[len, heads, dh]);
        let q = split(0)?
            .l2_normalize(QK_EPS)
            .mul(temp)?
            .permute(&[1, 0, 2])?;
        let k = split(1)?.l2_normalize(QK_EPS).permute(&[1, 2, 0])?;
        let v = split(2)?.permute(&[1, 0, 2])?;
        let weights = q.bmm(k)?.softmax();
        let out = weights.bmm(v)?.permute(&[1, 0, 2])?.reshape(&[len, d])?;
        block.out.forward(tape, &self.store, out)
    }

    /// Full forward pass over explicit conditioning; returns `[n, c]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        z_t: Var<'t>,
        t: usize,
        cond: &Conditioning,
        self_cond: Var<'t>,
    ) -> Result<Var<'t>> {
        let n = self.layout.target_len();
        let c = self.config.token_channels;
        if z_t.shape() != [n, c] || self_cond.shape() != [n, c] {
            return Err(shape_err!(
                "expected [{n}, {c}] tokens, got {:?} and self-conditioning {:?}",
                z_t.shape(),
                self_cond.shape()
            ));
        }
        let m = self.layout.cond_len();
        let mut h = self
            .in_proj
            .forward(tape, &self.store, Var::concat(&[z_t, self_cond], 1)?)?;
        if m > 0 {
            let tokens = cond
                .tokens
                .as_ref()
                .ok_or_else(|| config_err!("layout expects {m} conditioning tokens, none given"))?;
            if tokens.shape() != [m, c] {
                return Err(shape_err!(
                    "conditioning tokens {:?}, expected [{m}, {c}]",
                    tokens.shape()
                ));
            }
            let ch = self
                .cond_proj
                .forward(tape, &self.store, tape.constant(tokens.clone()))?;
            h = Var::concat(&[ch, h], 0)?;
        }
        h = h.add(self.positional(tape)?)?;
        let e = self.condition_embedding(tape, t, cond)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let md = self.modulation(tape, e, l)?;
            let a = self.attention(tape, block, Self::modulate(h, md[0], md[1])?)?;
            h = h.add(a.mul(md[2])?)?;
            let x = Self::modulate(h, md[3], md[4])?;
            let x = block.mlp_in.forward(tape, &self.store, x)?.gelu();
            let x = block.mlp_out.forward(tape, &self.store, x)?;
            h = h.add(x.mul(md[5])?)?;
        }
        let fm = self
            .final_mod
            .forward(tape, &self.store, e.silu())?
            .reshape(&[2 * self.config.width])?;
        let d = self.config.width;
        let h = Self::modulate(h, fm.slice(0, 0, d)?, fm.slice(0, d, d)?)?;
        let h = if m > 0 { h.slice(0, m, n)? } else { h };
        self.out_proj.forward(tape, &self.store, h)
    }
}

impl Denoise for Denoiser {
    fn predict_v<'t>(
        &self,
        tape: &'t Tape,
        z_t: Var<'t>,
        t: usize,
        cond: &Conditioning,
        self_cond: Var<'t>,
    ) -> Result<Var<'t>> {
        self.forward(tape, z_t, t, cond, self_cond)
    }
}
