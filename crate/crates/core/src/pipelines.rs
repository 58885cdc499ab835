//! Task wiring from a trained codec and denoiser to decoded clips.
//!
//! | task | conditioning planes | generated planes |
//! |------|---------------------|------------------|
//! | class-conditional | none | `xt, yt, xy1, xy2` |
//! | frame prediction | `xy1` | `xt, yt, xy2` |
//! | interpolation | `xy1, xy2` (boundary frames) | `xt, yt` |
//! | image | none | `xt, yt, xy1` of a single-frame latent |

use serde::{Deserialize, Serialize};

use crate::codec::{AutoEncoder, LatentKind, VideoClip};
use crate::denoiser::{Denoiser, SequenceLayout};
use crate::diffusion::{Conditioning, DdimSampler, NoiseSchedule};
use crate::error::{config_err, shape_err, Error, Result};
use crate::factorization::{segment_lengths, PlaneKind, PlaneLayout, PlaneSet, SpatialPlaneMode};
use crate::tensor::NdTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClassConditional,
    FramePrediction,
    Interpolation,
    ImageGeneration,
}

impl TaskKind {
    pub const ALL: [Self; 4] = [
        Self::ClassConditional,
        Self::FramePrediction,
        Self::Interpolation,
        Self::ImageGeneration,
    ];

    /// Index into the denoiser's task embedding.
    pub fn index(self) -> usize {
        match self {
            Self::ClassConditional => 0,
            Self::FramePrediction => 1,
            Self::Interpolation => 2,
            Self::ImageGeneration => 3,
        }
    }

    pub fn cond_planes(self) -> &'static [PlaneKind] {
        match self {
            Self::ClassConditional | Self::ImageGeneration => &[],
            Self::FramePrediction => &[PlaneKind::Xy1],
            Self::Interpolation => &[PlaneKind::Xy1, PlaneKind::Xy2],
        }
    }

    pub fn target_planes(self) -> &'static [PlaneKind] {
        match self {
            Self::ClassConditional => &PlaneKind::ALL,
            Self::FramePrediction => &[PlaneKind::Xt, PlaneKind::Yt, PlaneKind::Xy2],
            Self::Interpolation => &[PlaneKind::Xt, PlaneKind::Yt],
            Self::ImageGeneration => &[PlaneKind::Xt, PlaneKind::Yt, PlaneKind::Xy1],
        }
    }

    /// Denoiser token layout for a plane layout. Image generation always
    /// uses a single-frame layout.
    pub fn sequence_layout(self, layout: &PlaneLayout) -> Result<SequenceLayout> {
        let layout = match self {
            Self::ImageGeneration => PlaneLayout::new(1, layout.h, layout.w, layout.c)?,
            _ => *layout,
        };
        Ok(SequenceLayout::planes(
            &layout,
            self.cond_planes(),
            self.target_planes(),
        ))
    }
}

/// A task together with its inputs.
#[derive(Clone, Debug, PartialEq)]
pub enum TaskSpec {
    ClassConditional(usize),
    FramePrediction(NdTensor),
    Interpolation(VideoClip, VideoClip),
    ImageGeneration,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            Self::ClassConditional(_) => TaskKind::ClassConditional,
            Self::FramePrediction(_) => TaskKind::FramePrediction,
            Self::Interpolation(..) => TaskKind::Interpolation,
            Self::ImageGeneration => TaskKind::ImageGeneration,
        }
    }
}

/// Result of running a pipeline.
#[derive(Clone, Debug)]
pub struct TaskOutput {
    pub clip: VideoClip,
    pub planes: PlaneSet,
    /// Conditioning tokens given to the denoiser, `[m, c]`.
    pub cond_tokens: Option<NdTensor>,
    /// Generated tokens, `[n, c]`.
    pub generated: NdTensor,
}

/// Pixel frames whose latents make up the first temporal segment:
/// `(floor(t/2) - 1) * f_t + 1`, or one frame when `t = 1`.
pub fn prediction_context_frames(latent_t: usize, f_t: usize) -> usize {
    let (s1, _) = segment_lengths(latent_t);
    (s1 - 1) * f_t + 1
}

pub struct Pipeline<'a> {
    pub codec: &'a AutoEncoder,
    pub denoiser: &'a Denoiser,
    pub schedule: &'a NoiseSchedule,
    pub sampler: DdimSampler,
    pub task: TaskKind,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        codec: &'a AutoEncoder,
        denoiser: &'a Denoiser,
        schedule: &'a NoiseSchedule,
        task: TaskKind,
        steps: usize,
    ) -> Result<Self> {
        if !matches!(codec.kind, LatentKind::FourPlane { .. }) {
            return Err(config_err!("pipelines need a four-plane codec"));
        }
        let layout = codec.plane_layout()?;
        if denoiser.layout != task.sequence_layout(&layout)? {
            return Err(config_err!(
                "denoiser layout does not match the {task:?} partition"
            ));
        }
        if denoiser.config.token_channels != layout.c {
            return Err(config_err!(
                "denoiser expects {} channels, codec has {}",
                denoiser.config.token_channels,
                layout.c
            ));
        }
        if task == TaskKind::Interpolation && layout.mode != SpatialPlaneMode::BoundaryEncode {
            return Err(config_err!(
                "interpolation needs a codec in boundary-encode mode"
            ));
        }
        Ok(Self {
            codec,
            denoiser,
            schedule,
            sampler: DdimSampler::new(schedule, steps)?,
            task,
        })
    }

    fn layout(&self) -> Result<PlaneLayout> {
        let l = self.codec.plane_layout()?;
        match self.task {
            TaskKind::ImageGeneration => {
                let mut img = PlaneLayout::new(1, l.h, l.w, l.c)?;
                img.mode = l.mode;
                img.reduce = l.reduce;
                Ok(img)
            }
            _ => Ok(l),
        }
    }

    fn sample_tokens(&self, cond: &Conditioning, seed: u64) -> Result<NdTensor> {
        let shape = [
            self.denoiser.layout.target_len(),
            self.denoiser.config.token_channels,
        ];
        self.sampler
            .sample(self.denoiser, self.schedule, cond, &shape, seed)
    }

    /// Samples the target planes given the conditioning planes in `planes`
    /// and decodes the completed set.
    fn complete(
        &self,
        mut planes: PlaneSet,
        label: Option<usize>,
        seed: u64,
    ) -> Result<TaskOutput> {
        let cond_kinds = self.task.cond_planes();
        let cond_tokens = if cond_kinds.is_empty() {
            None
        } else {
            Some(planes.tokens_of(cond_kinds)?)
        };
        let cond = Conditioning {
            label,
            task: self.task.index(),
            tokens: cond_tokens.clone(),
        };
        let generated = self.sample_tokens(&cond, seed)?;
        planes.set_tokens_of(self.task.target_planes(), &generated)?;
        if self.task == TaskKind::ImageGeneration {
            planes.xy2 = planes.xy1.clone();
        }
        let clip = self.codec.decode_planes(&planes)?;
        Ok(TaskOutput {
            clip,
            planes,
            cond_tokens,
            generated,
        })
    }

    fn empty_planes(&self) -> Result<PlaneSet> {
        let l = self.layout()?;
        PlaneSet::new(
            NdTensor::zeros([l.h, l.w, l.c]),
            NdTensor::zeros([l.h, l.w, l.c]),
            NdTensor::zeros([l.t, l.h, l.c]),
            NdTensor::zeros([l.t, l.w, l.c]),
            l,
        )
    }

    fn expect(&self, task: TaskKind) -> Result<()> {
        if self.task != task {
            return Err(config_err!(
                "pipeline is set up for {:?}, not {task:?}",
                self.task
            ));
        }
        Ok(())
    }

    /// All four planes from noise. `label = None` samples unconditionally.
    pub fn generate_class_conditional(
        &self,
        label: Option<usize>,
        seed: u64,
    ) -> Result<TaskOutput> {
        self.expect(TaskKind::ClassConditional)?;
        self.complete(self.empty_planes()?, label, seed)
    }

    /// Single-frame generation.
    pub fn generate_image(&self, seed: u64) -> Result<TaskOutput> {
        self.expect(TaskKind::ImageGeneration)?;
        self.complete(self.empty_planes()?, None, seed)
    }

    /// First spatial plane computed from context frames only.
    pub fn context_plane(&self, context: &VideoClip) -> Result<NdTensor> {
        let l = self.layout()?;
        let need = prediction_context_frames(l.t, self.codec.config.f_t);
        let (frames, h, w) = context.dims();
        if frames != need || (h, w) != (self.codec.clip_dims.1, self.codec.clip_dims.2) {
            return Err(shape_err!(
                "context must be {need}x{}x{}, got {frames}x{h}x{w}",
                self.codec.clip_dims.1,
                self.codec.clip_dims.2
            ));
        }
        let z = self.codec.encode(context, None)?.latent.values;
        let (s1, _) = segment_lengths(l.t);
        if z.shape()[0] != s1 {
            return Err(Error::Data(format!(
                "context encodes to {} latent frames, expected {s1}",
                z.shape()[0]
            )));
        }
        let weights = match self.codec.projection_weights() {
            Some(pw) => pw.xy1,
            None => vec![1.0 / s1 as f32; s1],
        };
        let plane = l.h * l.w * l.c;
        let mut out = vec![0.0f32; plane];
        for (f, wt) in weights.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&z.data()[f * plane..(f + 1) * plane]) {
                *o += wt * v;
            }
        }
        NdTensor::new([l.h, l.w, l.c], out)
    }

    /// Generates the remaining planes from the context frames.
    pub fn predict_future(&self, context: &VideoClip, seed: u64) -> Result<TaskOutput> {
        self.expect(TaskKind::FramePrediction)?;
        let xy1 = self.context_plane(context)?;
        let mut planes = self.empty_planes()?;
        planes.xy1 = xy1;
        self.complete(planes, None, seed)
    }

    /// Generates the spatio-temporal planes between two boundary frames.
    pub fn interpolate(
        &self,
        first: &VideoClip,
        last: &VideoClip,
        seed: u64,
    ) -> Result<TaskOutput> {
        self.expect(TaskKind::Interpolation)?;
        let (xy1, xy2) = self.codec.boundary_planes(first, last)?;
        let mut planes = self.empty_planes()?;
        planes.xy1 = xy1;
        planes.xy2 = xy2;
        self.complete(planes, None, seed)
    }
}

/// Planes of a single-frame latent; both spatial planes equal the frame's latent.
pub fn image_planes(codec: &AutoEncoder, image: &VideoClip) -> Result<PlaneSet> {
    if image.dims().0 != 1 {
        return Err(shape_err!(
            "image tokens need a single frame, got {} frames",
            image.dims().0
        ));
    }
    let z = codec.encode(image, None)?.latent;
    crate::factorization::factorize(&z.values, &crate::factorization::ReduceKind::MeanPool)
}

/// Tokens of a single image: one spatial plane and the two length-`h`
/// and length-`w` vectors, `h*w + h + w` in total.
pub fn image_tokens(codec: &AutoEncoder, image: &VideoClip) -> Result<NdTensor> {
    image_planes(codec, image)?.tokens_of(TaskKind::ImageGeneration.target_planes())
}
