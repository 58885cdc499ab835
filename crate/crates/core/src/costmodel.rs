//! Sequence length, FLOPs and activation-memory model of the denoiser, and
//! a wall-clock benchmark of training steps.
//!
//! FLOPs count one multiply-accumulate as two operations and follow the
//! matrix products of [`Denoiser`] term by term, so the per-layer cost is
//! `24 L d^2 + 4 L^2 d` with `L` the total (conditioning + target) length.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::denoiser::{Denoiser, DenoiserConfig, SequenceLayout};
use crate::diffusion::Conditioning;
use crate::error::{config_err, Result};
use crate::factorization::{PlaneKind, PlaneLayout};
use crate::tensor::NdTensor;

const F32_BYTES: usize = 4;
/// Weights, gradients and two Adam moments.
const PARAM_COPIES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    Volumetric,
    FourPlane,
    TriPlane,
    ImageFourPlane,
}

impl RepresentationKind {
    pub const ALL: [Self; 4] = [
        Self::Volumetric,
        Self::FourPlane,
        Self::TriPlane,
        Self::ImageFourPlane,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Volumetric => "volumetric",
            Self::FourPlane => "four_plane",
            Self::TriPlane => "tri_plane",
            Self::ImageFourPlane => "image_four_plane",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentShape {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl LatentShape {
    pub fn new(t: usize, h: usize, w: usize, c: usize) -> Result<Self> {
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(config_err!(
                "latent extents must be positive, got {t}x{h}x{w}x{c}"
            ));
        }
        Ok(Self { t, h, w, c })
    }
}

pub fn seq_len(shape: LatentShape, kind: RepresentationKind) -> usize {
    let LatentShape { t, h, w, .. } = shape;
    match kind {
        RepresentationKind::Volumetric => t * h * w,
        RepresentationKind::FourPlane => t * (h + w) + 2 * h * w,
        RepresentationKind::TriPlane => t * (h + w) + h * w,
        RepresentationKind::ImageFourPlane => h * w + h + w,
    }
}

/// Token layout the denoiser sees for a representation (no conditioning).
pub fn sequence_layout(shape: LatentShape, kind: RepresentationKind) -> Result<SequenceLayout> {
    let planes = PlaneLayout::new(shape.t, shape.h, shape.w, shape.c)?;
    Ok(match kind {
        RepresentationKind::Volumetric => SequenceLayout::volumetric(shape.t, shape.h, shape.w),
        RepresentationKind::FourPlane => SequenceLayout::planes(&planes, &[], &PlaneKind::ALL),
        RepresentationKind::TriPlane => SequenceLayout::planes(
            &planes,
            &[],
            &[PlaneKind::Xt, PlaneKind::Yt, PlaneKind::Xy1],
        ),
        RepresentationKind::ImageFourPlane => {
            let image = PlaneLayout::new(1, shape.h, shape.w, shape.c)?;
            SequenceLayout::planes(&image, &[], &[PlaneKind::Xt, PlaneKind::Yt, PlaneKind::Xy1])
        }
    })
}

/// Forward FLOPs of one denoiser evaluation on `seq_len` target and
/// `cond_len` conditioning tokens.
pub fn flops_per_step(cfg: &DenoiserConfig, seq_len: usize, cond_len: usize) -> f64 {
    let (n, m) = (seq_len as f64, cond_len as f64);
    let l = n + m;
    let d = cfg.width as f64;
    let c = cfg.token_channels as f64;
    let r = cfg.lora_rank as f64;
    let mlp = cfg.mlp_ratio as f64;
    let embed = n * 2.0 * c * d + m * c * d + 2.0 * d * d;
    let modulation = 6.0 * d * d + d * r + r * 6.0 * d;
    let projections = l * d * 3.0 * d + l * d * d + 2.0 * mlp * l * d * d;
    let attention = 2.0 * l * l * d;
    let head = 2.0 * d * d + n * d * c;
    2.0 * (embed + cfg.depth as f64 * (modulation + projections + attention) + head)
}

/// Bytes of every intermediate tensor the tape keeps for one training
/// example, excluding parameters.
pub fn activation_bytes(
    cfg: &DenoiserConfig,
    seq_len: usize,
    cond_len: usize,
    batch: usize,
) -> usize {
    let (n, m) = (seq_len, cond_len);
    let l = n + m;
    let (d, c, r, heads, mlp) = (
        cfg.width,
        cfg.token_channels,
        cfg.lora_rank,
        cfg.heads,
        cfg.mlp_ratio,
    );
    let mut floats = 4 * n * c + 2 * n * d + 6 * l * d + 10 * d;
    if m > 0 {
        floats += m * c + 2 * m * d + l * d + n * d;
    }
    let per_layer = (35 + 3 * mlp) * l * d + 2 * heads * l * l + 39 * d + r;
    floats += cfg.depth * per_layer;
    floats += 10 * d + 3 * l * d + 2 * n * c;
    floats * F32_BYTES * batch
}

/// Parameter count of a denoiser built with `cfg` for any layout.
pub fn parameter_count(cfg: &DenoiserConfig) -> usize {
    let (d, c, r, mlp) = (cfg.width, cfg.token_channels, cfg.lora_rank, cfg.mlp_ratio);
    let linear = |i: usize, o: usize| i * o + o;
    let embeds = linear(2 * c, d)
        + linear(c, d)
        + (crate::denoiser::PLANE_IDS + 2 * cfg.max_coord + cfg.vocab + 1 + cfg.tasks) * d
        + 2 * linear(d, d);
    let block = d * r
        + r * 6 * d
        + linear(d, 3 * d)
        + cfg.heads
        + linear(d, d)
        + linear(d, mlp * d)
        + linear(mlp * d, d);
    embeds + linear(d, 6 * d) + cfg.depth * block + linear(d, 2 * d) + linear(d, c)
}

/// Largest batch whose activations plus optimizer state fit in `budget` bytes.
pub fn est_max_batch(
    cfg: &DenoiserConfig,
    seq_len: usize,
    cond_len: usize,
    budget: usize,
) -> usize {
    let fixed = PARAM_COPIES * F32_BYTES * parameter_count(cfg);
    let per_example = activation_bytes(cfg, seq_len, cond_len, 1);
    budget.saturating_sub(fixed) / per_example
}

/// Documented stand-in for the 214M-parameter transformer.
pub fn surrogate_214m() -> DenoiserConfig {
    DenoiserConfig {
        depth: 16,
        width: 1024,
        heads: 16,
        max_seq: 4096,
        ..DenoiserConfig::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub kind: RepresentationKind,
    pub shape: LatentShape,
    pub seq_len: usize,
    pub cond_len: usize,
    pub flops_per_step: f64,
    pub activation_bytes: usize,
    pub est_max_batch: usize,
    pub measured_ms: Option<f64>,
}

impl CostReport {
    pub fn new(
        cfg: &DenoiserConfig,
        shape: LatentShape,
        kind: RepresentationKind,
        budget: usize,
    ) -> Self {
        let n = seq_len(shape, kind);
        Self {
            kind,
            shape,
            seq_len: n,
            cond_len: 0,
            flops_per_step: flops_per_step(cfg, n, 0),
            activation_bytes: activation_bytes(cfg, n, 0, 1),
            est_max_batch: est_max_batch(cfg, n, 0, budget),
            measured_ms: None,
        }
    }

    pub const CSV_HEADER: &'static str =
        "kind,t,h,w,c,seq_len,cond_len,flops_per_step,activation_bytes,est_max_batch,measured_ms";

    pub fn csv_row(&self) -> String {
        let s = self.shape;
        let ms = self
            .measured_ms
            .map(|v| format!("{v:.3}"))
            .unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.6e},{},{},{}",
            self.kind.name(),
            s.t,
            s.h,
            s.w,
            s.c,
            self.seq_len,
            self.cond_len,
            self.flops_per_step,
            self.activation_bytes,
            self.est_max_batch,
            ms
        )
    }
}

/// All four representations for one shape.
pub fn cost_table(cfg: &DenoiserConfig, shape: LatentShape, budget: usize) -> Vec<CostReport> {
    RepresentationKind::ALL
        .iter()
        .map(|&k| CostReport::new(cfg, shape, k, budget))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub shape: LatentShape,
    pub kind: RepresentationKind,
    pub seq_len: usize,
    pub median_ms: f64,
}

/// Median wall time of a forward and backward training step for the
/// four-plane and volumetric token counts of every shape, at one config.
/// `warmup` iterations per row are excluded.
pub fn bench(
    cfg: &DenoiserConfig,
    shapes: &[LatentShape],
    warmup: usize,
    repeats: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(config_err!("bench needs at least one repeat"));
    }
    let mut rows = Vec::with_capacity(shapes.len() * 2);
    for &shape in shapes {
        for kind in [
            RepresentationKind::FourPlane,
            RepresentationKind::Volumetric,
        ] {
            let layout = sequence_layout(shape, kind)?;
            let n = layout.target_len();
            let mut cfg = cfg.clone();
            cfg.token_channels = shape.c;
            cfg.max_seq = cfg.max_seq.max(n);
            cfg.max_coord = cfg.max_coord.max(shape.t * shape.h).max(shape.w);
            let model = Denoiser::new(cfg, layout, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = NdTensor::randn([n, shape.c], 1.0, &mut rng);
            let cond = Conditioning::default();
            let mut times = Vec::with_capacity(repeats);
            for i in 0..warmup + repeats {
                let start = Instant::now();
                let tape = Tape::new();
                let zt = tape.constant(z.clone());
                let sc = tape.constant(NdTensor::zeros([n, shape.c]));
                let v = model.forward(&tape, zt, 500, &cond, sc)?;
                let loss = v.mse(zt)?;
                std::hint::black_box(tape.backward(loss)?);
                if i >= warmup {
                    times.push(start.elapsed().as_secs_f64() * 1e3);
                }
            }
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                shape,
                kind,
                seq_len: n,
                median_ms: times[times.len() / 2],
            });
        }
    }
    Ok(rows)
}
