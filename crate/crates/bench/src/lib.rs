//! Shared fixtures for the criterion benchmarks.

use fourplane_core::codec::{AutoEncoder, CodecConfig, LatentKind};
use fourplane_core::costmodel::{sequence_layout, LatentShape, RepresentationKind};
use fourplane_core::denoiser::{Denoiser, DenoiserConfig};
use fourplane_core::factorization::CombineKind;
use fourplane_core::{NdTensor, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Latent volume `[t, h, w, c]` of standard normal values.
pub fn latent(t: usize, h: usize, w: usize, c: usize, seed: u64) -> NdTensor {
    NdTensor::randn([t, h, w, c], 1.0, &mut rng(seed))
}

/// Default codec on 9x32x32 clips.
pub fn codec(kind: LatentKind) -> Result<AutoEncoder> {
    AutoEncoder::new(CodecConfig::default(), kind, (9, 32, 32), 0)
}

pub fn four_plane_codec() -> Result<AutoEncoder> {
    codec(LatentKind::four_plane(CombineKind::Concat))
}

/// Small denoiser used for the four-plane versus volumetric comparison.
pub fn small_config(c: usize) -> DenoiserConfig {
    DenoiserConfig {
        depth: 2,
        width: 64,
        heads: 4,
        token_channels: c,
        ..DenoiserConfig::default()
    }
}

/// Denoiser whose target sequence matches `kind` at `shape`, plus noisy tokens for it.
pub fn denoiser_for(shape: LatentShape, kind: RepresentationKind) -> Result<(Denoiser, NdTensor)> {
    let layout = sequence_layout(shape, kind)?;
    let n = layout.target_len();
    let mut cfg = small_config(shape.c);
    cfg.max_seq = cfg.max_seq.max(n);
    cfg.max_coord = cfg.max_coord.max(shape.t * shape.h).max(shape.w);
    let model = Denoiser::new(cfg, layout, 0)?;
    Ok((model, NdTensor::randn([n, shape.c], 1.0, &mut rng(1))))
}
