//! Run configuration and its precedence rules.
//!
//! Values are resolved in this order, later sources winning:
//! built-in defaults, the `--config` run file, the `--codec-config` /
//! `--denoiser-config` section files, then individual flags. The resolved
//! configuration is written to `config.json` in the run directory.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fourplane_core::codec::{CodecConfig, LatentKind};
use fourplane_core::denoiser::DenoiserConfig;
use fourplane_core::diffusion::ScheduleConfig;
use fourplane_core::factorization::{CombineKind, ReduceTag, SpatialPlaneMode};
use fourplane_core::pipelines::TaskKind;
use fourplane_core::train::TrainConfig;

use crate::args::{
    CombineArg, KindArg, ModeArg, OptimArgs, ReduceArg, TaskArg, TrainCodecArgs, TrainDiffusionArgs,
};
use crate::error::{usage, CliResult};

pub const CONFIG_FILE: &str = "config.json";

/// What a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunTask {
    Codec,
    ClassConditional,
    FramePrediction,
    Interpolation,
    ImageGeneration,
}

impl RunTask {
    pub fn diffusion_task(self) -> Option<TaskKind> {
        match self {
            Self::Codec => None,
            Self::ClassConditional => Some(TaskKind::ClassConditional),
            Self::FramePrediction => Some(TaskKind::FramePrediction),
            Self::Interpolation => Some(TaskKind::Interpolation),
            Self::ImageGeneration => Some(TaskKind::ImageGeneration),
        }
    }
}

impl From<TaskArg> for RunTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Class => Self::ClassConditional,
            TaskArg::Predict => Self::FramePrediction,
            TaskArg::Interpolate => Self::Interpolation,
            TaskArg::Image => Self::ImageGeneration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: RunTask,
    /// Dataset directory holding `manifest.json`.
    pub data: Option<PathBuf>,
    pub codec_config_path: Option<PathBuf>,
    pub denoiser_config_path: Option<PathBuf>,
    /// Trained codec a diffusion run builds on.
    pub codec_checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Seed, batch size and optimizer (learning rate, warmup, cosine decay).
    pub train: TrainConfig,
    pub codec: CodecConfig,
    pub latent: LatentKind,
    pub denoiser: DenoiserConfig,
    pub self_cond_rate: f64,
    pub label_dropout: f64,
    pub schedule: ScheduleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let diffusion = fourplane_core::train::DiffusionTrainConfig::default();
        Self {
            task: RunTask::Codec,
            data: None,
            codec_config_path: None,
            denoiser_config_path: None,
            codec_checkpoint: None,
            output_dir: PathBuf::new(),
            train: TrainConfig::default(),
            codec: CodecConfig::default(),
            latent: LatentKind::four_plane(CombineKind::Concat),
            denoiser: DenoiserConfig::default(),
            self_cond_rate: diffusion.self_cond_rate,
            label_dropout: diffusion.label_dropout,
            schedule: ScheduleConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    pub fn save(&self, dir: &Path) -> CliResult<()> {
        std::fs::write(
            dir.join(CONFIG_FILE),
            serde_json::to_string_pretty(self)? + "\n",
        )?;
        Ok(())
    }

    fn base(config: Option<&Path>) -> CliResult<Self> {
        match config {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    fn apply_optim(&mut self, o: &OptimArgs) {
        let t = &mut self.train;
        set(&mut t.steps, o.steps);
        set(&mut t.batch_size, o.batch_size);
        set(&mut t.optim.learning_rate, o.lr);
        set(&mut t.optim.warmup_steps, o.warmup);
        set(&mut t.seed, o.seed);
        set(&mut t.log_interval, o.log_interval);
        set(&mut t.checkpoint_interval, o.checkpoint_interval);
        // the cosine decay spans the whole run
        t.optim.total_steps = t.steps;
    }

    pub fn for_codec(a: &TrainCodecArgs) -> CliResult<Self> {
        let mut cfg = Self::base(a.run.config.as_deref())?;
        cfg.task = RunTask::Codec;
        cfg.output_dir = a.run.run.clone();
        if a.run.data.is_some() {
            cfg.data = a.run.data.clone();
        }
        if let Some(p) = &a.codec_config {
            cfg.codec = read_json(p)?;
            cfg.codec_config_path = Some(p.clone());
        }
        let c = &mut cfg.codec;
        if let Some(f_t) = a.f_t {
            c.f_t = f_t;
            c.temporal_down_layers = log2(f_t, "--f-t")?;
        }
        if let Some(f_s) = a.f_s {
            c.f_s = f_s;
            c.spatial_down_layers = log2(f_s, "--f-s")?;
        }
        set(&mut c.c, a.channels);
        set(&mut c.base_channels, a.base_channels);
        set(&mut c.variational, a.variational);
        cfg.latent = latent_kind(cfg.latent, a.kind, a.combine, a.reduce, a.mode);
        cfg.apply_optim(&a.run.optim);
        Ok(cfg)
    }

    pub fn for_diffusion(a: &TrainDiffusionArgs) -> CliResult<Self> {
        let mut cfg = Self::base(a.run.config.as_deref())?;
        if cfg.task == RunTask::Codec {
            cfg.task = RunTask::ClassConditional;
        }
        if let Some(t) = a.task {
            cfg.task = t.into();
        }
        cfg.output_dir = a.run.run.clone();
        if a.run.data.is_some() {
            cfg.data = a.run.data.clone();
        }
        if a.codec.is_some() {
            cfg.codec_checkpoint = a.codec.clone();
        }
        if let Some(p) = &a.denoiser_config {
            cfg.denoiser = read_json(p)?;
            cfg.denoiser_config_path = Some(p.clone());
        }
        let d = &mut cfg.denoiser;
        set(&mut d.depth, a.depth);
        set(&mut d.width, a.width);
        set(&mut d.heads, a.heads);
        set(&mut d.lora_rank, a.lora_rank);
        set(&mut cfg.self_cond_rate, a.self_cond);
        set(&mut cfg.label_dropout, a.label_dropout);
        set(&mut cfg.schedule.beta_end, a.beta_end);
        cfg.apply_optim(&a.run.optim);
        Ok(cfg)
    }

    pub fn data_dir(&self) -> CliResult<&Path> {
        self.data
            .as_deref()
            .ok_or_else(|| usage("no dataset given (--data or \"data\" in the config)"))
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn log2(v: usize, flag: &str) -> CliResult<usize> {
    if v.is_power_of_two() {
        Ok(v.trailing_zeros() as usize)
    } else {
        Err(usage(format!("{flag} {v} is not a power of two")))
    }
}

fn latent_kind(
    base: LatentKind,
    kind: Option<KindArg>,
    combine: Option<CombineArg>,
    reduce: Option<ReduceArg>,
    mode: Option<ModeArg>,
) -> LatentKind {
    let (mut m, mut r, mut c) = match base {
        LatentKind::FourPlane {
            mode,
            reduce,
            combine,
        } => (mode, reduce, combine),
        LatentKind::Volumetric => (
            SpatialPlaneMode::SegmentPool,
            ReduceTag::MeanPool,
            CombineKind::Concat,
        ),
    };
    if kind == Some(KindArg::Volumetric) || (kind.is_none() && base == LatentKind::Volumetric) {
        return LatentKind::Volumetric;
    }
    if let Some(v) = combine {
        c = match v {
            CombineArg::Concat => CombineKind::Concat,
            CombineArg::Sum => CombineKind::Sum,
        };
    }
    if let Some(v) = reduce {
        r = match v {
            ReduceArg::MeanPool => ReduceTag::MeanPool,
            ReduceArg::LinearProj => ReduceTag::LinearProj,
        };
    }
    if let Some(v) = mode {
        m = match v {
            ModeArg::SegmentPool => SpatialPlaneMode::SegmentPool,
            ModeArg::BoundaryEncode => SpatialPlaneMode::BoundaryEncode,
        };
    }
    LatentKind::FourPlane {
        mode: m,
        reduce: r,
        combine: c,
    }
}

/// Reads a JSON config file; unreadable or malformed files are usage errors.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}
