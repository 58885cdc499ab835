//! Seeded training loops for the codec and the denoiser.
//!
//! Every step draws its randomness from a generator seeded by
//! `(seed, step)`, so a run resumed from a checkpoint follows the same
//! trajectory as an uninterrupted one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::codec::{AutoEncoder, CodecConfig, LatentKind, VideoClip};
use crate::denoiser::{Denoiser, DenoiserConfig, SequenceLayout};
use crate::diffusion::{
    draw_self_condition, training_loss, Conditioning, DiffusionBatch, NoiseSchedule, ScheduleConfig,
};
use crate::error::{config_err, Error, Result};
use crate::evaldata::synthetic::splitmix64;
use crate::evaldata::{ClipSource, Split};
use crate::optim::{Adam, OptimConfig};
use crate::pipelines::TaskKind;
use crate::tensor::NdTensor;

pub const CODEC_KIND: &str = "codec";
pub const DENOISER_KIND: &str = "denoiser";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    /// A loss row is logged every `log_interval` steps.
    pub log_interval: u64,
    /// Checkpoint period in steps; 0 saves only at the end.
    pub checkpoint_interval: u64,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 4,
            log_interval: 10,
            checkpoint_interval: 0,
            seed: 0,
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(config_err!("batch_size and log_interval must be positive"));
        }
        self.optim.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionTrainConfig {
    pub train: TrainConfig,
    pub task: TaskKind,
    pub self_cond_rate: f64,
    /// Probability of replacing the class label by the unconditional one.
    pub label_dropout: f64,
    pub schedule: ScheduleConfig,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            task: TaskKind::ClassConditional,
            self_cond_rate: crate::diffusion::DEFAULT_SELF_COND_RATE,
            label_dropout: 0.1,
            schedule: ScheduleConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    /// Number of completed optimizer steps.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,loss,lr";

pub fn loss_csv(records: &[LossRecord]) -> String {
    let mut s = format!("{LOSS_CSV_HEADER}\n");
    for r in records {
        s.push_str(&format!("{},{:.9e},{:.9e}\n", r.step, r.loss, r.lr));
    }
    s
}

/// Generator for the 0-based optimizer step `step`.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(step.wrapping_add(0x5eed))))
}

fn train_indices(source: &dyn ClipSource) -> Result<Vec<usize>> {
    let idx = source.indices(Split::Train);
    if idx.is_empty() {
        return Err(Error::Data("dataset has no training clips".into()));
    }
    Ok(idx)
}

fn check_loss(loss: f32, step: u64) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss {loss} at step {step}"
        )));
    }
    Ok(())
}

/// Serialized alongside codec weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecMeta {
    pub config: CodecConfig,
    pub kind: LatentKind,
    pub clip_dims: (usize, usize, usize),
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

pub fn codec_checkpoint(
    model: &AutoEncoder,
    adam: Option<&Adam>,
    train: Option<&TrainConfig>,
) -> Result<Checkpoint> {
    let meta = CodecMeta {
        config: model.config.clone(),
        kind: model.kind,
        clip_dims: model.clip_dims,
        train: train.cloned(),
    };
    Ok(Checkpoint::capture(
        CODEC_KIND,
        serde_json::to_value(meta)?,
        &model.store,
        adam,
    ))
}

pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<(AutoEncoder, CodecMeta)> {
    let meta: CodecMeta = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Format(format!("codec header: {e}")))?;
    let mut model = AutoEncoder::new(meta.config.clone(), meta.kind, meta.clip_dims, 0)?;
    ck.restore_params(CODEC_KIND, &mut model.store)?;
    Ok((model, meta))
}

pub struct CodecTrainer {
    pub model: AutoEncoder,
    pub adam: Adam,
    pub config: TrainConfig,
    train: Vec<usize>,
}

impl CodecTrainer {
    pub fn new(model: AutoEncoder, config: TrainConfig, source: &dyn ClipSource) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(config.optim.clone(), &model.store)?;
        Ok(Self {
            model,
            adam,
            config,
            train: train_indices(source)?,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.adam.step
    }

    /// One optimizer step on a batch of training clips.
    pub fn step(&mut self, source: &dyn ClipSource) -> Result<LossRecord> {
        let step = self.adam.step;
        let mut rng = step_rng(self.config.seed, step);
        let mut total = 0.0f64;
        for _ in 0..self.config.batch_size {
            let idx = self.train[rng.random_range(0..self.train.len())];
            let clip = source.clip(idx)?;
            let tape = Tape::new();
            let loss = self.model.loss(&tape, &clip, Some(&mut rng))?;
            check_loss(loss.item(), step)?;
            total += loss.item() as f64;
            let grads = tape.backward(loss)?;
            self.model.store.accumulate(&grads);
        }
        let lr = self
            .adam
            .update(&mut self.model.store, 1.0 / self.config.batch_size as f32);
        Ok(LossRecord {
            step: step + 1,
            loss: total / self.config.batch_size as f64,
            lr,
        })
    }

    /// Steps until `config.steps`, calling `on_step` after each one.
    pub fn run(
        &mut self,
        source: &dyn ClipSource,
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.adam.step < self.config.steps {
            let rec = self.step(source)?;
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        codec_checkpoint(&self.model, Some(&self.adam), Some(&self.config))
    }

    /// Continues a run; the training config comes from the checkpoint.
    pub fn resume(ck: &Checkpoint, source: &dyn ClipSource) -> Result<Self> {
        let (model, meta) = codec_from_checkpoint(ck)?;
        let config = meta
            .train
            .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?;
        let mut trainer = Self::new(model, config, source)?;
        ck.restore_adam(&trainer.model.store, &mut trainer.adam)?;
        Ok(trainer)
    }
}

/// Denoiser token layout for a codec and task.
pub fn denoiser_layout(codec: &AutoEncoder, task: TaskKind) -> Result<SequenceLayout> {
    match codec.kind {
        LatentKind::Volumetric => {
            if task != TaskKind::ClassConditional {
                return Err(config_err!(
                    "volumetric latents only support class-conditional generation"
                ));
            }
            let l = codec.plane_layout()?;
            Ok(SequenceLayout::volumetric(l.t, l.h, l.w))
        }
        LatentKind::FourPlane { .. } => task.sequence_layout(&codec.plane_layout()?),
    }
}

/// Conditioning and target tokens of one clip for `task`.
pub fn task_tokens(
    codec: &AutoEncoder,
    task: TaskKind,
    clip: &VideoClip,
) -> Result<(Option<NdTensor>, NdTensor)> {
    if let LatentKind::Volumetric = codec.kind {
        let z = codec.encode(clip, None)?.latent.values;
        let s = z.shape().to_vec();
        return Ok((None, z.reshape([s[0] * s[1] * s[2], s[3]])?));
    }
    let planes = match task {
        TaskKind::ImageGeneration => crate::pipelines::image_planes(codec, &clip.frame(0)?)?,
        _ => codec.encode_planes(clip)?,
    };
    let cond = match task.cond_planes() {
        [] => None,
        kinds => Some(planes.tokens_of(kinds)?),
    };
    Ok((cond, planes.tokens_of(task.target_planes())?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserMeta {
    pub config: DenoiserConfig,
    pub layout: SequenceLayout,
    pub task: TaskKind,
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub train: Option<DiffusionTrainConfig>,
}

pub fn denoiser_checkpoint(
    model: &Denoiser,
    meta: &DenoiserMeta,
    adam: Option<&Adam>,
) -> Result<Checkpoint> {
    let meta = DenoiserMeta {
        config: model.config.clone(),
        layout: model.layout.clone(),
        ..meta.clone()
    };
    Ok(Checkpoint::capture(
        DENOISER_KIND,
        serde_json::to_value(meta)?,
        &model.store,
        adam,
    ))
}

pub fn denoiser_from_checkpoint(ck: &Checkpoint) -> Result<(Denoiser, DenoiserMeta)> {
    let meta: DenoiserMeta = serde_json::from_value(ck.config.clone())
        .map_err(|e| Error::Format(format!("denoiser header: {e}")))?;
    let mut model = Denoiser::new(meta.config.clone(), meta.layout.clone(), 0)?;
    ck.restore_params(DENOISER_KIND, &mut model.store)?;
    Ok((model, meta))
}

pub struct DiffusionTrainer {
    pub codec: AutoEncoder,
    pub model: Denoiser,
    pub adam: Adam,
    pub config: DiffusionTrainConfig,
    pub schedule: NoiseSchedule,
    train: Vec<usize>,
}

impl DiffusionTrainer {
    pub fn new(
        codec: AutoEncoder,
        model: Denoiser,
        config: DiffusionTrainConfig,
        source: &dyn ClipSource,
    ) -> Result<Self> {
        config.train.validate()?;
        if !(0.0..=1.0).contains(&config.self_cond_rate)
            || !(0.0..=1.0).contains(&config.label_dropout)
        {
            return Err(config_err!(
                "self_cond_rate and label_dropout must lie in [0, 1]"
            ));
        }
        if model.layout != denoiser_layout(&codec, config.task)? {
            return Err(config_err!(
                "denoiser layout does not match the codec and task"
            ));
        }
        let schedule = config.schedule.build()?;
        let adam = Adam::new(config.train.optim.clone(), &model.store)?;
        Ok(Self {
            codec,
            model,
            adam,
            config,
            schedule,
            train: train_indices(source)?,
        })
    }

    pub fn meta(&self) -> DenoiserMeta {
        DenoiserMeta {
            config: self.model.config.clone(),
            layout: self.model.layout.clone(),
            task: self.config.task,
            schedule: self.config.schedule.clone(),
            train: Some(self.config.clone()),
        }
    }

    pub fn step(&mut self, source: &dyn ClipSource) -> Result<LossRecord> {
        let step = self.adam.step;
        let cfg = &self.config;
        let batch = cfg.train.batch_size;
        let mut rng = step_rng(cfg.train.seed, step);
        let mut total = 0.0f64;
        for _ in 0..batch {
            let idx = self.train[rng.random_range(0..self.train.len())];
            let clip = VideoClip::new(source.clip(idx)?)?;
            let (tokens, z0) = task_tokens(&self.codec, cfg.task, &clip)?;
            let label = match cfg.task {
                TaskKind::ClassConditional if rng.random::<f64>() >= cfg.label_dropout => {
                    source.label(idx)
                }
                _ => None,
            };
            let cond = Conditioning {
                label,
                task: cfg.task.index(),
                tokens,
            };
            let example = DiffusionBatch::sample(z0, cond, &self.schedule, &mut rng);
            let self_cond = draw_self_condition(cfg.self_cond_rate, &mut rng);
            let tape = Tape::new();
            let loss = training_loss(&self.model, &tape, &example, &self.schedule, self_cond)?;
            check_loss(loss.item(), step)?;
            total += loss.item() as f64;
            let grads = tape.backward(loss)?;
            self.model.store.accumulate(&grads);
        }
        let lr = self.adam.update(&mut self.model.store, 1.0 / batch as f32);
        Ok(LossRecord {
            step: step + 1,
            loss: total / batch as f64,
            lr,
        })
    }

    pub fn run(
        &mut self,
        source: &dyn ClipSource,
        mut on_step: impl FnMut(&Self, &LossRecord) -> Result<()>,
    ) -> Result<Vec<LossRecord>> {
        let mut out = Vec::new();
        while self.adam.step < self.config.train.steps {
            let rec = self.step(source)?;
            on_step(self, &rec)?;
            out.push(rec);
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        denoiser_checkpoint(&self.model, &self.meta(), Some(&self.adam))
    }

    pub fn resume(ck: &Checkpoint, codec: AutoEncoder, source: &dyn ClipSource) -> Result<Self> {
        let (model, meta) = denoiser_from_checkpoint(ck)?;
        let config = meta
            .train
            .ok_or_else(|| Error::Format("checkpoint carries no training state".into()))?;
        let mut trainer = Self::new(codec, model, config, source)?;
        ck.restore_adam(&trainer.model.store, &mut trainer.adam)?;
        Ok(trainer)
    }
}
