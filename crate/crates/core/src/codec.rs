//! Causal 3D convolutional autoencoder.
//!
//! Layout of the encoder for `L` spatial levels, of which the first
//! `temporal_down_layers` also halve time:
//!
//! ```text
//! conv_in(3 -> ch0)
//! for level in 0..L: down conv (stride 2 in space, 2 or 1 in time) -> residual blocks
//! norm -> act -> conv_out(-> c, or 2c for the variational posterior)
//! ```
//!
//! The decoder mirrors it with nearest-neighbour upsampling. A temporal
//! upsample repeats every frame twice and drops the first copy, which
//! inverts `t -> ceil(t / 2)` for odd frame counts and keeps the decoder causal.
//! Channel width at level `l` is `base_channels * min(2^l, 4)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::factorization::{
    self, CombineKind, PlaneLayout, PlaneReducer, PlaneSet, PlaneVars, ProjectionWeights,
    ReduceKind, ReduceTag, SpatialPlaneMode,
};
use crate::nn::{Activation, Conv3d, FrameGroupNorm};
use crate::params::{ParamId, ParamStore};
use crate::tensor::NdTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub f_t: usize,
    pub f_s: usize,
    pub c: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
    pub temporal_down_layers: usize,
    pub spatial_down_layers: usize,
    pub variational: bool,
    pub kl_weight: f32,
    pub activation: Activation,
    /// Temporal kernel extent; 1 gives a per-frame (image) codec.
    pub temporal_kernel: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            f_t: 2,
            f_s: 4,
            c: 8,
            base_channels: 8,
            residual_blocks: 1,
            temporal_down_layers: 1,
            spatial_down_layers: 2,
            variational: false,
            kl_weight: 1e-6,
            activation: Activation::Silu,
            temporal_kernel: 3,
        }
    }
}

impl CodecConfig {
    /// Downsampling of the 17x128x128 setting: `f_t = 4`, `f_s = 8`, `c = 8`.
    pub fn reference() -> Self {
        Self {
            f_t: 4,
            f_s: 8,
            temporal_down_layers: 2,
            spatial_down_layers: 3,
            ..Self::default()
        }
    }

    /// Builds a config from downsampling factors.
    pub fn with_factors(f_t: usize, f_s: usize, c: usize) -> Result<Self> {
        let log2 = |v: usize, what: &str| {
            if v.is_power_of_two() {
                Ok(v.trailing_zeros() as usize)
            } else {
                Err(config_err!("{what} = {v} is not a power of two"))
            }
        };
        let cfg = Self {
            f_t,
            f_s,
            c,
            temporal_down_layers: log2(f_t, "f_t")?,
            spatial_down_layers: log2(f_s, "f_s")?,
            ..Self::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.f_t != 1 << self.temporal_down_layers {
            return Err(config_err!(
                "f_t = {} but temporal_down_layers = {}",
                self.f_t,
                self.temporal_down_layers
            ));
        }
        if self.f_s != 1 << self.spatial_down_layers {
            return Err(config_err!(
                "f_s = {} but spatial_down_layers = {}",
                self.f_s,
                self.spatial_down_layers
            ));
        }
        if self.temporal_down_layers > self.spatial_down_layers {
            return Err(config_err!(
                "temporal downsampling needs a spatial level of its own"
            ));
        }
        if self.c == 0 || self.base_channels == 0 || self.temporal_kernel == 0 {
            return Err(config_err!(
                "c, base_channels and temporal_kernel must be positive"
            ));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(config_err!("kl_weight must be finite and non-negative"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * (1usize << level.min(2))
    }

    /// Latent extents for a `t x h x w` clip.
    pub fn latent_dims(
        &self,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<(usize, usize, usize)> {
        if frames == 0 || (frames - 1) % self.f_t != 0 {
            return Err(Error::Data(format!(
                "{frames} frames: T - 1 must be divisible by f_t = {}",
                self.f_t
            )));
        }
        if height == 0 || width == 0 || height % self.f_s != 0 || width % self.f_s != 0 {
            return Err(Error::Data(format!(
                "{height}x{width} frames: H and W must be divisible by f_s = {}",
                self.f_s
            )));
        }
        Ok((
            (frames - 1) / self.f_t + 1,
            height / self.f_s,
            width / self.f_s,
        ))
    }

    fn encoder_out_channels(&self) -> usize {
        if self.variational {
            2 * self.c
        } else {
            self.c
        }
    }
}

/// Dense `T x H x W x 3` clip with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub frames: NdTensor,
    pub fps: f32,
}

impl VideoClip {
    pub fn new(frames: NdTensor) -> Result<Self> {
        if frames.rank() != 4 || frames.shape()[3] != 3 {
            return Err(shape_err!(
                "clip must be [T,H,W,3], got {:?}",
                frames.shape()
            ));
        }
        Ok(Self { frames, fps: 8.0 })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.frames.shape();
        (s[0], s[1], s[2])
    }

    /// Single-frame clip holding frame `i`.
    pub fn frame(&self, i: usize) -> Result<VideoClip> {
        Self::new(self.frames.slice_axis(0, i, 1)?)
    }
}

/// Encoder output `Z` of shape `[t, h, w, c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVolume {
    pub values: NdTensor,
}

impl LatentVolume {
    pub fn new(values: NdTensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(shape_err!(
                "latent volume must be [t,h,w,c], got {:?}",
                values.shape()
            ));
        }
        Ok(Self { values })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        let s = self.values.shape();
        (s[0], s[1], s[2], s[3])
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: FrameGroupNorm,
    conv1: Conv3d,
    norm2: FrameGroupNorm,
    conv2: Conv3d,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        ch: usize,
        kt: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm1: FrameGroupNorm::new(store, &format!("{name}.norm1"), ch)?,
            conv1: Conv3d::new(
                store,
                &format!("{name}.conv1"),
                (kt, 3, 3),
                ch,
                ch,
                (1, 1, 1),
                1.0,
                rng,
            )?,
            norm2: FrameGroupNorm::new(store, &format!("{name}.norm2"), ch)?,
            conv2: Conv3d::new(
                store,
                &format!("{name}.conv2"),
                (kt, 3, 3),
                ch,
                ch,
                (1, 1, 1),
                0.5,
                rng,
            )?,
        })
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        act: Activation,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let h = act.apply(self.norm1.forward(tape, store, x)?);
        let h = self.conv1.forward(tape, store, h)?;
        let h = act.apply(self.norm2.forward(tape, store, h)?);
        x.add(self.conv2.forward(tape, store, h)?)
    }
}

#[derive(Clone, Debug)]
struct Level {
    /// Temporal factor 2 when set.
    temporal: bool,
    conv: Conv3d,
    blocks: Vec<ResBlock>,
}

#[derive(Clone, Debug)]
struct Encoder {
    conv_in: Conv3d,
    levels: Vec<Level>,
    norm_out: FrameGroupNorm,
    conv_out: Conv3d,
}

#[derive(Clone, Debug)]
struct Decoder {
    conv_in: Conv3d,
    mid: Vec<ResBlock>,
    /// Coarsest level first.
    levels: Vec<Level>,
    norm_out: FrameGroupNorm,
    conv_out: Conv3d,
}

impl Encoder {
    fn new(store: &mut ParamStore, cfg: &CodecConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let kt = cfg.temporal_kernel;
        let conv_in = Conv3d::new(
            store,
            "enc.conv_in",
            (kt, 3, 3),
            3,
            cfg.channels(0),
            (1, 1, 1),
            1.0,
            rng,
        )?;
        let mut levels = Vec::new();
        for l in 0..cfg.spatial_down_layers {
            let temporal = l < cfg.temporal_down_layers;
            let (cin, cout) = (cfg.channels(l), cfg.channels(l + 1));
            let stride = (if temporal { 2 } else { 1 }, 2, 2);
            let conv = Conv3d::new(
                store,
                &format!("enc.down{l}.conv"),
                (kt, 3, 3),
                cin,
                cout,
                stride,
                1.0,
                rng,
            )?;
            let blocks = (0..cfg.residual_blocks)
                .map(|b| ResBlock::new(store, &format!("enc.down{l}.block{b}"), cout, kt, rng))
                .collect::<Result<_>>()?;
            levels.push(Level {
                temporal,
                conv,
                blocks,
            });
        }
        let top = cfg.channels(cfg.spatial_down_layers);
        Ok(Self {
            conv_in,
            levels,
            norm_out: FrameGroupNorm::new(store, "enc.norm_out", top)?,
            conv_out: Conv3d::new(
                store,
                "enc.conv_out",
                (kt, 3, 3),
                top,
                cfg.encoder_out_channels(),
                (1, 1, 1),
                1.0,
                rng,
            )?,
        })
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        act: Activation,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let mut h = self.conv_in.forward(tape, store, x)?;
        for level in &self.levels {
            h = level.conv.forward(tape, store, h)?;
            for b in &level.blocks {
                h = b.forward(tape, store, act, h)?;
            }
        }
        let h = act.apply(self.norm_out.forward(tape, store, h)?);
        self.conv_out.forward(tape, store, h)
    }
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        cfg: &CodecConfig,
        in_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let kt = cfg.temporal_kernel;
        let top = cfg.channels(cfg.spatial_down_layers);
        let conv_in = Conv3d::new(
            store,
            "dec.conv_in",
            (kt, 3, 3),
            in_channels,
            top,
            (1, 1, 1),
            1.0,
            rng,
        )?;
        let mid = (0..cfg.residual_blocks)
            .map(|b| ResBlock::new(store, &format!("dec.mid.block{b}"), top, kt, rng))
            .collect::<Result<_>>()?;
        let mut levels = Vec::new();
        for l in (0..cfg.spatial_down_layers).rev() {
            let temporal = l < cfg.temporal_down_layers;
            let (cin, cout) = (cfg.channels(l + 1), cfg.channels(l));
            let conv = Conv3d::new(
                store,
                &format!("dec.up{l}.conv"),
                (kt, 3, 3),
                cin,
                cout,
                (1, 1, 1),
                1.0,
                rng,
            )?;
            let blocks = (0..cfg.residual_blocks)
                .map(|b| ResBlock::new(store, &format!("dec.up{l}.block{b}"), cout, kt, rng))
                .collect::<Result<_>>()?;
            levels.push(Level {
                temporal,
                conv,
                blocks,
            });
        }
        let base = cfg.channels(0);
        Ok(Self {
            conv_in,
            mid,
            levels,
            norm_out: FrameGroupNorm::new(store, "dec.norm_out", base)?,
            conv_out: Conv3d::new(
                store,
                "dec.conv_out",
                (kt, 3, 3),
                base,
                3,
                (1, 1, 1),
                1.0,
                rng,
            )?,
        })
    }

    fn forward<'t>(
        &self,
        tape: &'t Tape,
        store: &ParamStore,
        act: Activation,
        x: Var<'t>,
    ) -> Result<Var<'t>> {
        let mut h = self.conv_in.forward(tape, store, x)?;
        for b in &self.mid {
            h = b.forward(tape, store, act, h)?;
        }
        for level in &self.levels {
            if level.temporal {
                h = h.upsample_nearest(&[2, 2, 2, 1])?;
                let t = h.shape()[0];
                h = h.slice(0, 1, t - 1)?;
            } else {
                h = h.upsample_nearest(&[1, 2, 2, 1])?;
            }
            h = level.conv.forward(tape, store, h)?;
            for b in &level.blocks {
                h = b.forward(tape, store, act, h)?;
            }
        }
        let h = act.apply(self.norm_out.forward(tape, store, h)?);
        self.conv_out.forward(tape, store, h)
    }
}

/// How the latent volume reaches the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LatentKind {
    /// The dense volume `Z` is decoded directly.
    Volumetric,
    /// `Z` is factorized into four planes and recomposed before decoding.
    FourPlane {
        mode: SpatialPlaneMode,
        reduce: ReduceTag,
        combine: CombineKind,
    },
}

impl LatentKind {
    pub fn four_plane(combine: CombineKind) -> Self {
        Self::FourPlane {
            mode: SpatialPlaneMode::SegmentPool,
            reduce: ReduceTag::MeanPool,
            combine,
        }
    }

    pub fn decoder_channels(self, c: usize) -> usize {
        match self {
            Self::Volumetric => c,
            Self::FourPlane { combine, .. } => combine.output_channels(c),
        }
    }
}

#[derive(Clone, Debug)]
struct ProjectionLogits {
    xt: ParamId,
    yt: ParamId,
    xy1: ParamId,
    xy2: ParamId,
}

/// Differentiable pieces of one forward pass.
pub struct CodecForward<'t> {
    /// Decoder output before clamping.
    pub recon: Var<'t>,
    pub latent: Var<'t>,
    pub mean: Option<Var<'t>>,
    pub logvar: Option<Var<'t>>,
}

/// Result of encoding a clip.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub latent: LatentVolume,
    pub mean: Option<NdTensor>,
    pub logvar: Option<NdTensor>,
}

/// Encoder, decoder and the optional plane bottleneck between them.
#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub config: CodecConfig,
    pub kind: LatentKind,
    /// `T, H, W` of the clips the model is built for; sizes the learned projection.
    pub clip_dims: (usize, usize, usize),
    pub store: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    projection: Option<ProjectionLogits>,
}

impl AutoEncoder {
    pub fn new(
        config: CodecConfig,
        kind: LatentKind,
        clip_dims: (usize, usize, usize),
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let (t, h, w) = config.latent_dims(clip_dims.0, clip_dims.1, clip_dims.2)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(&mut store, &config, &mut rng)?;
        let decoder = Decoder::new(
            &mut store,
            &config,
            kind.decoder_channels(config.c),
            &mut rng,
        )?;
        let projection = match kind {
            LatentKind::FourPlane {
                reduce: ReduceTag::LinearProj,
                ..
            } => {
                let (s1, s2) = factorization::segment_lengths(t);
                Some(ProjectionLogits {
                    xt: store.add("proj.xt", NdTensor::zeros([w]))?,
                    yt: store.add("proj.yt", NdTensor::zeros([h]))?,
                    xy1: store.add("proj.xy1", NdTensor::zeros([s1]))?,
                    xy2: store.add("proj.xy2", NdTensor::zeros([s2]))?,
                })
            }
            _ => None,
        };
        Ok(Self {
            config,
            kind,
            clip_dims,
            store,
            encoder,
            decoder,
            projection,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn encoder_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name().starts_with("enc."))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    pub fn decoder_params(&self) -> usize {
        self.store
            .iter()
            .filter(|(_, p)| p.name().starts_with("dec."))
            .map(|(_, p)| p.tensor.len())
            .sum()
    }

    fn check_clip(&self, frames: &NdTensor) -> Result<(usize, usize, usize)> {
        if frames.rank() != 4 || frames.shape()[3] != 3 {
            return Err(shape_err!(
                "clip must be [T,H,W,3], got {:?}",
                frames.shape()
            ));
        }
        if !frames.all_finite() {
            return Err(Error::Data("clip contains non-finite values".into()));
        }
        let s = frames.shape();
        // frame count may vary (single frames, context prefixes); the spatial grid may not
        if (s[1], s[2]) != (self.clip_dims.1, self.clip_dims.2) {
            return Err(shape_err!(
                "codec was built for {}x{} frames, got {}x{}",
                self.clip_dims.1,
                self.clip_dims.2,
                s[1],
                s[2]
            ));
        }
        self.config.latent_dims(s[0], s[1], s[2])
    }

    /// Raw encoder output: `[t, h, w, c]`, or `[t, h, w, 2c]` (mean, logvar) for a VAE.
    pub fn encoder_forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.encoder
            .forward(tape, &self.store, self.config.activation, x)
    }

    pub fn decoder_forward<'t>(&self, tape: &'t Tape, features: Var<'t>) -> Result<Var<'t>> {
        let want = self.kind.decoder_channels(self.config.c);
        let got = *features.shape().last().unwrap_or(&0);
        if got != want {
            return Err(shape_err!("decoder takes {want} channels, got {got}"));
        }
        self.decoder
            .forward(tape, &self.store, self.config.activation, features)
    }

    /// Splits the posterior and draws a latent. Without `rng` the mean is used.
    fn posterior<'t>(
        &self,
        tape: &'t Tape,
        raw: Var<'t>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Option<Var<'t>>, Option<Var<'t>>)> {
        if !self.config.variational {
            return Ok((raw, None, None));
        }
        let c = self.config.c;
        let mean = raw.slice(3, 0, c)?;
        let logvar = raw.slice(3, c, c)?;
        let z = match rng {
            Some(rng) => {
                let eps = tape.constant(NdTensor::randn(mean.shape(), 1.0, rng));
                mean.add(logvar.scale(0.5).exp().mul(eps)?)?
            }
            None => mean,
        };
        Ok((z, Some(mean), Some(logvar)))
    }

    fn reducer<'t>(&self, tape: &'t Tape) -> PlaneReducer<'t> {
        match &self.projection {
            None => PlaneReducer::MeanPool,
            Some(p) => {
                let w = |id| tape.param(&self.store, id).softmax();
                PlaneReducer::Weighted {
                    xt: w(p.xt),
                    yt: w(p.yt),
                    xy1: w(p.xy1),
                    xy2: w(p.xy2),
                }
            }
        }
    }

    /// Current normalised projection weights, if the model learns them.
    pub fn projection_weights(&self) -> Option<ProjectionWeights> {
        self.projection.as_ref().map(|p| {
            let d = |id| self.store.get(id).tensor.data().to_vec();
            ProjectionWeights::from_logits(&d(p.xt), &d(p.yt), &d(p.xy1), &d(p.xy2))
        })
    }

    fn reduce_kind(&self) -> ReduceKind {
        match self.projection_weights() {
            Some(w) => ReduceKind::LinearProj(w),
            None => ReduceKind::MeanPool,
        }
    }

    /// Planes of `z` on the tape; `boundary` replaces the spatial planes.
    fn planes_var<'t>(
        &self,
        tape: &'t Tape,
        z: Var<'t>,
        boundary: Option<(Var<'t>, Var<'t>)>,
    ) -> Result<PlaneVars<'t>> {
        let reducer = self.reducer(tape);
        match boundary {
            Some((xy1, xy2)) => {
                let (xt, yt) = factorization::spatiotemporal_planes(z, &reducer)?;
                Ok(PlaneVars { xy1, xy2, xt, yt })
            }
            None => factorization::factorize_var(z, &reducer),
        }
    }

    /// Full differentiable pass. `rng` drives the VAE reparameterisation.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        clip: &NdTensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<CodecForward<'t>> {
        self.check_clip(clip)?;
        let x = tape.constant(clip.clone());
        let raw = self.encoder_forward(tape, x)?;
        let (z, mean, logvar) = self.posterior(tape, raw, rng.as_deref_mut())?;
        let features = match self.kind {
            LatentKind::Volumetric => z,
            LatentKind::FourPlane { mode, combine, .. } => {
                let boundary = match mode {
                    SpatialPlaneMode::SegmentPool => None,
                    SpatialPlaneMode::BoundaryEncode => {
                        Some(self.boundary_vars(tape, clip, rng.as_deref_mut())?)
                    }
                };
                let planes = self.planes_var(tape, z, boundary)?;
                factorization::recompose_var(&planes, combine)?
            }
        };
        let recon = self.decoder_forward(tape, features)?;
        Ok(CodecForward {
            recon,
            latent: z,
            mean,
            logvar,
        })
    }

    fn boundary_vars<'t>(
        &self,
        tape: &'t Tape,
        clip: &NdTensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let frames = clip.shape()[0];
        let mut encode_frame = |i: usize| -> Result<Var<'t>> {
            let x = tape.constant(clip.slice_axis(0, i, 1)?);
            let raw = self.encoder_forward(tape, x)?;
            let (z, _, _) = self.posterior(tape, raw, rng.as_deref_mut())?;
            let s = z.shape();
            z.reshape(&[s[1], s[2], s[3]])
        };
        Ok((encode_frame(0)?, encode_frame(frames - 1)?))
    }

    /// Reconstruction loss of one clip on a tape.
    pub fn loss<'t>(
        &self,
        tape: &'t Tape,
        clip: &NdTensor,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'t>> {
        let out = self.forward(tape, clip, rng)?;
        let target = tape.constant(clip.clone());
        codec_loss_var(
            target,
            out.recon,
            out.mean.zip(out.logvar),
            self.config.kl_weight,
        )
    }

    /// Encodes a clip. A VAE draws from its posterior when `seed` is given
    /// and returns the posterior mean otherwise.
    pub fn encode(&self, clip: &VideoClip, seed: Option<u64>) -> Result<Encoded> {
        self.check_clip(&clip.frames)?;
        let tape = Tape::no_grad();
        let raw = self.encoder_forward(&tape, tape.constant(clip.frames.clone()))?;
        let mut rng = seed.map(ChaCha8Rng::seed_from_u64);
        let (z, mean, logvar) = self.posterior(&tape, raw, rng.as_mut())?;
        Ok(Encoded {
            latent: LatentVolume::new(z.to_tensor())?,
            mean: mean.map(|v| v.to_tensor()),
            logvar: logvar.map(|v| v.to_tensor()),
        })
    }

    /// Spatial planes from encoding the two frames on their own.
    pub fn boundary_planes(
        &self,
        first: &VideoClip,
        last: &VideoClip,
    ) -> Result<(NdTensor, NdTensor)> {
        let squeeze = |clip: &VideoClip| -> Result<NdTensor> {
            if clip.frames.shape()[0] != 1 {
                return Err(shape_err!(
                    "boundary frames must be single frames, got {:?}",
                    clip.frames.shape()
                ));
            }
            let z = self.encode(clip, None)?.latent.values;
            let s = z.shape().to_vec();
            z.reshape([s[1], s[2], s[3]])
        };
        Ok((squeeze(first)?, squeeze(last)?))
    }

    /// Factorizes an encoded clip according to the model's latent kind.
    pub fn factorize(&self, clip: &VideoClip, latent: &LatentVolume) -> Result<PlaneSet> {
        let LatentKind::FourPlane { mode, .. } = self.kind else {
            return factorization::factorize(&latent.values, &ReduceKind::MeanPool);
        };
        let reduce = self.reduce_kind();
        match mode {
            SpatialPlaneMode::SegmentPool => factorization::factorize(&latent.values, &reduce),
            SpatialPlaneMode::BoundaryEncode => {
                let (first, last) =
                    self.boundary_planes(&clip.frame(0)?, &clip.frame(clip.dims().0 - 1)?)?;
                factorization::factorize_with_boundary(&latent.values, &reduce, first, last)
            }
        }
    }

    /// Clip to planes.
    pub fn encode_planes(&self, clip: &VideoClip) -> Result<PlaneSet> {
        let latent = self.encode(clip, None)?.latent;
        self.factorize(clip, &latent)
    }

    /// Decodes a feature volume with the configured channel count; output is clamped to `[-1, 1]`.
    pub fn decode(&self, features: &NdTensor) -> Result<VideoClip> {
        if features.rank() != 4 {
            return Err(shape_err!(
                "feature volume must be [t,h,w,c], got {:?}",
                features.shape()
            ));
        }
        let tape = Tape::no_grad();
        let out = self.decoder_forward(&tape, tape.constant(features.clone()))?;
        VideoClip::new(out.value().map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn decode_planes(&self, planes: &PlaneSet) -> Result<VideoClip> {
        let combine = match self.kind {
            LatentKind::FourPlane { combine, .. } => combine,
            LatentKind::Volumetric => {
                return Err(config_err!("volumetric model cannot decode planes"))
            }
        };
        self.decode(&factorization::recompose(planes, combine)?)
    }

    /// Encode, optional factorization, decode.
    pub fn reconstruct(&self, clip: &VideoClip) -> Result<VideoClip> {
        let tape = Tape::no_grad();
        let out = self.forward(&tape, &clip.frames, None)?;
        VideoClip::new(out.recon.value().map(|v| v.clamp(-1.0, 1.0)))
    }

    pub fn plane_layout(&self) -> Result<PlaneLayout> {
        let (t, h, w) =
            self.config
                .latent_dims(self.clip_dims.0, self.clip_dims.1, self.clip_dims.2)?;
        let mut layout = PlaneLayout::new(t, h, w, self.config.c)?;
        if let LatentKind::FourPlane { mode, reduce, .. } = self.kind {
            layout.mode = mode;
            layout.reduce = reduce;
        }
        Ok(layout)
    }
}

/// `mse(recon, clip) + kl_weight * KL`, with the KL term summed over latent elements.
pub fn codec_loss_var<'t>(
    clip: Var<'t>,
    recon: Var<'t>,
    posterior: Option<(Var<'t>, Var<'t>)>,
    kl_weight: f32,
) -> Result<Var<'t>> {
    let rec = recon.mse(clip)?;
    match posterior {
        None => Ok(rec),
        Some((mean, logvar)) => {
            // 0.5 * sum(mu^2 + exp(lv) - 1 - lv)
            let kl = mean
                .square()
                .add(logvar.exp())?
                .sub(logvar)?
                .offset(-1.0)
                .sum_all()
                .scale(0.5);
            rec.add(kl.scale(kl_weight))
        }
    }
}

/// Tensor form of [`codec_loss_var`].
pub fn codec_loss(
    clip: &NdTensor,
    recon: &NdTensor,
    posterior: Option<(&NdTensor, &NdTensor)>,
    kl_weight: f32,
) -> Result<f64> {
    if clip.shape() != recon.shape() {
        return Err(shape_err!(
            "clip {:?} vs reconstruction {:?}",
            clip.shape(),
            recon.shape()
        ));
    }
    let n = clip.len() as f64;
    let rec: f64 = clip
        .data()
        .iter()
        .zip(recon.data())
        .map(|(a, b)| ((a - b) as f64).powi(2))
        .sum::<f64>()
        / n;
    let kl = match posterior {
        None => 0.0,
        Some((m, lv)) => {
            if m.shape() != lv.shape() {
                return Err(shape_err!(
                    "mean {:?} vs logvar {:?}",
                    m.shape(),
                    lv.shape()
                ));
            }
            0.5 * m
                .data()
                .iter()
                .zip(lv.data())
                .map(|(&mu, &l)| {
                    let (mu, l) = (mu as f64, l as f64);
                    mu * mu + l.exp() - 1.0 - l
                })
                .sum::<f64>()
        }
    };
    Ok(rec + kl_weight as f64 * kl)
}

/// Copies image-codec weights into a video codec of the same layout: each 3D
/// kernel is zero except its last temporal slice, which takes the 2D kernel.
/// All other parameters are copied unchanged.
pub fn inflate_image_weights(image: &AutoEncoder, video: &mut AutoEncoder) -> Result<()> {
    if image.store.len() != video.store.len() {
        return Err(config_err!(
            "image codec has {} parameters, video codec {}",
            image.store.len(),
            video.store.len()
        ));
    }
    let mut updates = Vec::new();
    for ((_, src), (_, dst)) in image.store.iter().zip(video.store.iter()) {
        if src.name() != dst.name() {
            return Err(config_err!(
                "parameter {} has no counterpart (found {})",
                src.name(),
                dst.name()
            ));
        }
        let (ss, ds) = (src.tensor.shape(), dst.tensor.shape());
        let tensor = if src.name().ends_with(".kernel") {
            if ss.len() != 5 || ds.len() != 5 || ss[0] != 1 || ss[1..] != ds[1..] {
                return Err(config_err!(
                    "kernel {} has shape {ss:?}, cannot inflate to {ds:?}",
                    src.name()
                ));
            }
            let slice = src.tensor.len();
            let mut data = vec![0.0; dst.tensor.len()];
            data[dst.tensor.len() - slice..].copy_from_slice(src.tensor.data());
            NdTensor::new(ds.to_vec(), data)?
        } else {
            if ss != ds {
                return Err(config_err!(
                    "parameter {} has shape {ss:?} vs {ds:?}",
                    src.name()
                ));
            }
            src.tensor.clone()
        };
        updates.push((src.name().to_string(), tensor));
    }
    for (name, t) in updates {
        video.store.assign(&name, t)?;
    }
    Ok(())
}

/// Uniform random clip in `[-1, 1]`.
pub fn random_clip<R: Rng + ?Sized>(
    frames: usize,
    height: usize,
    width: usize,
    rng: &mut R,
) -> VideoClip {
    VideoClip {
        frames: NdTensor::uniform([frames, height, width, 3], -1.0, 1.0, rng),
        fps: 8.0,
    }
}
