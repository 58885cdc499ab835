use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fourplane_core::checkpoint::Checkpoint;
use fourplane_core::codec::{AutoEncoder, LatentKind, VideoClip};
use fourplane_core::costmodel::{self, LatentShape, RepresentationKind};
use fourplane_core::denoiser::{Denoiser, DenoiserConfig, SequenceLayout};
use fourplane_core::evaldata::{
    metrics, verify_dataset, write_dataset, ClipSource, ManifestSource, Split, SyntheticSpec,
};
use fourplane_core::factorization::{read_planes, write_planes};
use fourplane_core::pipelines::{prediction_context_frames, Pipeline, TaskKind, TaskOutput};
use fourplane_core::train::{
    codec_from_checkpoint, denoiser_from_checkpoint, denoiser_layout, CodecTrainer, DenoiserMeta,
    DiffusionTrainConfig, DiffusionTrainer, LossRecord,
};
use fourplane_core::{fpt, NdTensor};

use crate::args::*;
use crate::config::{read_json, RunConfig, RunTask, CONFIG_FILE};
use crate::error::{data, usage, CliResult};
use crate::image::write_grid;
use crate::report;
use crate::rundir::*;

pub fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Dataset(DatasetCommand::Make(a)) => dataset_make(&a),
        Command::Dataset(DatasetCommand::Verify { dir }) => dataset_verify(&dir),
        Command::TrainCodec(a) => train_codec(&a),
        Command::TrainDiffusion(a) => train_diffusion(&a),
        Command::Encode(a) => encode(&a),
        Command::Decode(a) => decode(&a),
        Command::Generate(a) => generate(&a),
        Command::Predict(a) => predict(&a),
        Command::Interpolate(a) => interpolate(&a),
        Command::Eval(a) => eval(&a),
        Command::Cost(a) => cost(&a),
        Command::Bench(a) => bench(&a),
        Command::Report(a) => report::report(&a.run),
    }
}

fn dataset_make(a: &DatasetMakeArgs) -> CliResult<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    for (slot, v) in [
        (&mut spec.clips, a.clips),
        (&mut spec.frames, a.frames),
        (&mut spec.height, a.height),
        (&mut spec.width, a.width),
    ] {
        if let Some(v) = v {
            *slot = v;
        }
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let m = write_dataset(&spec, &a.out)?;
    println!(
        "wrote {} clips of {}x{}x{} to {}",
        m.clips.len(),
        spec.frames,
        spec.height,
        spec.width,
        a.out.display()
    );
    Ok(())
}

fn dataset_verify(dir: &Path) -> CliResult<()> {
    let m = verify_dataset(dir)?;
    let test = m.clips.iter().filter(|c| c.split == Split::Test).count();
    println!(
        "ok: {} clips ({} train, {test} test)",
        m.clips.len(),
        m.clips.len() - test
    );
    Ok(())
}

/// Opens a dataset after checking every clip against its manifest hash.
pub fn open_dataset(dir: &Path) -> CliResult<ManifestSource> {
    let manifest =
        verify_dataset(dir).map_err(|e| data(format!("dataset {}: {e}", dir.display())))?;
    Ok(ManifestSource {
        root: dir.to_path_buf(),
        manifest,
    })
}

pub fn load_codec(path: &Path) -> CliResult<AutoEncoder> {
    let ck = Checkpoint::load(path)
        .map_err(|e| data(format!("codec checkpoint {}: {e}", path.display())))?;
    Ok(codec_from_checkpoint(&ck)?.0)
}

pub fn load_denoiser(path: &Path) -> CliResult<(Denoiser, DenoiserMeta)> {
    let ck = Checkpoint::load(path)
        .map_err(|e| data(format!("denoiser checkpoint {}: {e}", path.display())))?;
    Ok(denoiser_from_checkpoint(&ck)?)
}

fn load_clip(path: &Path) -> CliResult<VideoClip> {
    Ok(VideoClip::new(fpt::load(path)?)?)
}

fn log_step(rec: &LossRecord, log: &mut LossLog, interval: u64) -> CliResult<()> {
    if rec.step % interval == 0 {
        log.push(rec)?;
        eprintln!(
            "step {:>6}  loss {:.6e}  lr {:.3e}",
            rec.step, rec.loss, rec.lr
        );
    }
    Ok(())
}

fn save_periodic(
    ck: impl Fn() -> fourplane_core::Result<Checkpoint>,
    dir: &Path,
    latest: &str,
    step: u64,
    interval: u64,
) -> CliResult<()> {
    if interval > 0 && step % interval == 0 {
        let ck = ck()?;
        fs::create_dir_all(dir.join(CHECKPOINTS_DIR))?;
        ck.save(step_checkpoint(dir, step))?;
        ck.save(dir.join(latest))?;
    }
    Ok(())
}

fn train_codec(a: &TrainCodecArgs) -> CliResult<()> {
    let dir = &a.run.run;
    let _lock = RunLock::acquire(dir)?;
    let (mut trainer, source, mut log) = if a.run.resume {
        let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let source = open_dataset(cfg.data_dir()?)?;
        let ck = Checkpoint::load(dir.join(CODEC_CKPT))?;
        let trainer = CodecTrainer::resume(&ck, &source)?;
        let log = LossLog::resume(&dir.join(LOSS_FILE), trainer.step_index())?;
        (trainer, source, log)
    } else {
        let cfg = RunConfig::for_codec(a)?;
        let source = open_dataset(cfg.data_dir()?)?;
        let s = &source.manifest.spec;
        let model = AutoEncoder::new(
            cfg.codec.clone(),
            cfg.latent,
            (s.frames, s.height, s.width),
            cfg.train.seed,
        )?;
        let trainer = CodecTrainer::new(model, cfg.train.clone(), &source)?;
        cfg.save(dir)?;
        (trainer, source, LossLog::create(&dir.join(LOSS_FILE))?)
    };
    let (log_every, ck_every) = (
        trainer.config.log_interval,
        trainer.config.checkpoint_interval,
    );
    let stop = a.run.stop_at.unwrap_or(u64::MAX).min(trainer.config.steps);
    while trainer.step_index() < stop {
        let rec = trainer.step(&source)?;
        log_step(&rec, &mut log, log_every)?;
        save_periodic(|| trainer.checkpoint(), dir, CODEC_CKPT, rec.step, ck_every)?;
    }
    trainer.checkpoint()?.save(dir.join(CODEC_CKPT))?;
    println!(
        "codec at step {} saved to {}",
        trainer.step_index(),
        dir.join(CODEC_CKPT).display()
    );
    Ok(())
}

/// Widens the position tables and sequence limit to fit `layout`.
fn fit_layout(cfg: &mut DenoiserConfig, layout: &SequenceLayout) {
    cfg.max_seq = cfg.max_seq.max(layout.cond_len() + layout.target_len());
    let extent = layout
        .cond
        .iter()
        .chain(&layout.target)
        .map(|s| s.rows.max(s.cols))
        .max()
        .unwrap_or(1);
    cfg.max_coord = cfg.max_coord.max(extent);
}

fn train_diffusion(a: &TrainDiffusionArgs) -> CliResult<()> {
    let dir = &a.run.run;
    let _lock = RunLock::acquire(dir)?;
    let codec_of = |cfg: &RunConfig| -> CliResult<AutoEncoder> {
        let p = cfg
            .codec_checkpoint
            .as_deref()
            .ok_or_else(|| usage("no codec checkpoint given (--codec)"))?;
        load_codec(p)
    };
    let (mut trainer, source, mut log) = if a.run.resume {
        let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let source = open_dataset(cfg.data_dir()?)?;
        let ck = Checkpoint::load(dir.join(DENOISER_CKPT))?;
        let trainer = DiffusionTrainer::resume(&ck, codec_of(&cfg)?, &source)?;
        let log = LossLog::resume(&dir.join(LOSS_FILE), trainer.adam.step)?;
        (trainer, source, log)
    } else {
        let mut cfg = RunConfig::for_diffusion(a)?;
        let task = cfg
            .task
            .diffusion_task()
            .ok_or_else(|| usage("train-diffusion needs a diffusion task"))?;
        let codec = codec_of(&cfg)?;
        let source = open_dataset(cfg.data_dir()?)?;
        let layout = denoiser_layout(&codec, task)?;
        cfg.denoiser.token_channels = codec.config.c;
        fit_layout(&mut cfg.denoiser, &layout);
        let model = Denoiser::new(cfg.denoiser.clone(), layout, cfg.train.seed)?;
        let dcfg = DiffusionTrainConfig {
            train: cfg.train.clone(),
            task,
            self_cond_rate: cfg.self_cond_rate,
            label_dropout: cfg.label_dropout,
            schedule: cfg.schedule.clone(),
        };
        let trainer = DiffusionTrainer::new(codec, model, dcfg, &source)?;
        cfg.save(dir)?;
        (trainer, source, LossLog::create(&dir.join(LOSS_FILE))?)
    };
    let t = &trainer.config.train;
    let (log_every, ck_every) = (t.log_interval, t.checkpoint_interval);
    let stop = a.run.stop_at.unwrap_or(u64::MAX).min(t.steps);
    while trainer.adam.step < stop {
        let rec = trainer.step(&source)?;
        log_step(&rec, &mut log, log_every)?;
        save_periodic(
            || trainer.checkpoint(),
            dir,
            DENOISER_CKPT,
            rec.step,
            ck_every,
        )?;
    }
    trainer.checkpoint()?.save(dir.join(DENOISER_CKPT))?;
    println!(
        "denoiser at step {} saved to {}",
        trainer.adam.step,
        dir.join(DENOISER_CKPT).display()
    );
    Ok(())
}

fn create_parent(path: &Path) -> CliResult<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p)?;
    }
    Ok(())
}

fn encode(a: &EncodeArgs) -> CliResult<()> {
    let codec = load_codec(&a.codec)?;
    let clip = load_clip(&a.input)?;
    create_parent(&a.out)?;
    match codec.kind {
        LatentKind::Volumetric => fpt::save(&a.out, &codec.encode(&clip, None)?.latent.values)?,
        LatentKind::FourPlane { .. } => write_planes(
            BufWriter::new(File::create(&a.out)?),
            &codec.encode_planes(&clip)?,
        )?,
    }
    println!("encoded {} to {}", a.input.display(), a.out.display());
    Ok(())
}

fn decode(a: &DecodeArgs) -> CliResult<()> {
    let codec = load_codec(&a.codec)?;
    let mut bytes = Vec::new();
    File::open(&a.input)?.read_to_end(&mut bytes)?;
    let clip = if bytes.starts_with(b"FPPS") {
        codec.decode_planes(&read_planes(bytes.as_slice())?)?
    } else {
        codec.decode(&fpt::from_bytes(&bytes)?)?
    };
    create_parent(&a.out)?;
    fpt::save(&a.out, &clip.frames)?;
    if let Some(p) = &a.png {
        write_grid(p, &[&clip])?;
    }
    println!("decoded {} frames to {}", clip.dims().0, a.out.display());
    Ok(())
}

struct Sampler {
    codec: AutoEncoder,
    denoiser: Denoiser,
    meta: DenoiserMeta,
    schedule: fourplane_core::diffusion::NoiseSchedule,
}

impl Sampler {
    fn load(a: &SampleArgs) -> CliResult<Self> {
        let codec = load_codec(&a.codec)?;
        let (denoiser, meta) = load_denoiser(&a.denoiser)?;
        let schedule = meta.schedule.build()?;
        Ok(Self {
            codec,
            denoiser,
            meta,
            schedule,
        })
    }

    fn pipeline(&self, steps: usize) -> CliResult<Pipeline<'_>> {
        Ok(Pipeline::new(
            &self.codec,
            &self.denoiser,
            &self.schedule,
            self.meta.task,
            steps,
        )?)
    }
}

/// Writes `clip.fpt`, `planes.fpp` and `frames.png` (inputs above the output).
fn write_sample(out: &Path, result: &TaskOutput, inputs: &[&VideoClip]) -> CliResult<()> {
    fs::create_dir_all(out)?;
    fpt::save(out.join("clip.fpt"), &result.clip.frames)?;
    write_planes(
        BufWriter::new(File::create(out.join("planes.fpp"))?),
        &result.planes,
    )?;
    let mut rows: Vec<&VideoClip> = inputs.to_vec();
    rows.push(&result.clip);
    write_grid(&out.join("frames.png"), &rows)?;
    println!("wrote {} frames to {}", result.clip.dims().0, out.display());
    Ok(())
}

fn generate(a: &GenerateArgs) -> CliResult<()> {
    let s = Sampler::load(&a.sample)?;
    let p = s.pipeline(a.sample.steps)?;
    let result = match s.meta.task {
        TaskKind::ClassConditional => p.generate_class_conditional(a.label, a.sample.seed)?,
        TaskKind::ImageGeneration if a.label.is_none() => p.generate_image(a.sample.seed)?,
        TaskKind::ImageGeneration => return Err(usage("image generation takes no label")),
        t => {
            return Err(usage(format!(
                "denoiser was trained for {t:?}; use predict or interpolate"
            )))
        }
    };
    write_sample(&a.sample.out, &result, &[])
}

/// Leading frames a prediction denoiser conditions on.
pub fn context_of(codec: &AutoEncoder, clip: &VideoClip) -> CliResult<VideoClip> {
    let n = prediction_context_frames(codec.plane_layout()?.t, codec.config.f_t);
    if clip.dims().0 < n {
        return Err(data(format!(
            "prediction needs {n} context frames, clip has {}",
            clip.dims().0
        )));
    }
    Ok(VideoClip::new(clip.frames.slice_axis(0, 0, n)?)?)
}

fn predict(a: &PredictArgs) -> CliResult<()> {
    let s = Sampler::load(&a.sample)?;
    let p = s.pipeline(a.sample.steps)?;
    let context = context_of(&s.codec, &load_clip(&a.input)?)?;
    let result = p.predict_future(&context, a.sample.seed)?;
    write_sample(&a.sample.out, &result, &[&context])
}

/// First and last frame of a clip.
pub fn boundary_frames(clip: &VideoClip) -> CliResult<(VideoClip, VideoClip)> {
    Ok((clip.frame(0)?, clip.frame(clip.dims().0 - 1)?))
}

fn interpolate(a: &InterpolateArgs) -> CliResult<()> {
    let s = Sampler::load(&a.sample)?;
    let p = s.pipeline(a.sample.steps)?;
    let (first, last) = boundary_frames(&load_clip(&a.input)?)?;
    let result = p.interpolate(&first, &last, a.sample.seed)?;
    let ends = VideoClip::new(NdTensor::concat(&[&first.frames, &last.frames], 0)?)?;
    write_sample(&a.sample.out, &result, &[&ends])
}

/// Mean per-clip reconstruction metrics; PSNR and MSE on `[0, 1]` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub split: Split,
    pub clips: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub mse: f64,
}

pub fn evaluate(
    codec: &AutoEncoder,
    source: &dyn ClipSource,
    split: Split,
    limit: Option<usize>,
) -> CliResult<EvalMetrics> {
    let idx: Vec<usize> = source
        .indices(split)
        .into_iter()
        .take(limit.unwrap_or(usize::MAX))
        .collect();
    if idx.is_empty() {
        return Err(data(format!("no {split:?} clips to evaluate")));
    }
    let (mut p, mut s, mut m) = (0.0, 0.0, 0.0);
    for &i in &idx {
        let clip = VideoClip::new(source.clip(i)?)?;
        let recon = codec.reconstruct(&clip)?;
        p += metrics::psnr(&clip.frames, &recon.frames)?;
        s += metrics::ssim(&clip.frames, &recon.frames)?;
        m += metrics::mse_unit(&clip.frames, &recon.frames)?;
    }
    let n = idx.len() as f64;
    Ok(EvalMetrics {
        split,
        clips: idx.len(),
        psnr: p / n,
        ssim: s / n,
        mse: m / n,
    })
}

fn eval(a: &EvalArgs) -> CliResult<()> {
    let codec = load_codec(&a.codec)?;
    let source = open_dataset(&a.data)?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let m = evaluate(&codec, &source, split, a.limit)?;
    let text = serde_json::to_string_pretty(&m)? + "\n";
    if let Some(out) = &a.out {
        create_parent(out)?;
        fs::write(out, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cost(a: &CostArgs) -> CliResult<()> {
    let cfg = match &a.denoiser_config {
        Some(p) => read_json(p)?,
        None => costmodel::surrogate_214m(),
    };
    if !(a.budget_gib > 0.0 && a.budget_gib.is_finite()) {
        return Err(usage("--budget-gib must be positive"));
    }
    let shape = LatentShape::new(a.t, a.h, a.w, a.c)?;
    let budget = (a.budget_gib * (1u64 << 30) as f64) as usize;
    let mut csv = format!("{}\n", costmodel::CostReport::CSV_HEADER);
    for r in costmodel::cost_table(&cfg, shape, budget) {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    if let Some(out) = &a.out {
        create_parent(out)?;
        fs::write(out, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn parse_shape(s: &str) -> CliResult<LatentShape> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| usage(format!("shape {s:?} is not t,h,w,c")))?;
    match v[..] {
        [t, h, w, c] => Ok(LatentShape::new(t, h, w, c)?),
        _ => Err(usage(format!("shape {s:?} is not t,h,w,c"))),
    }
}

fn bench(a: &BenchArgs) -> CliResult<()> {
    let cfg = DenoiserConfig {
        depth: a.depth,
        width: a.width,
        heads: a.heads,
        ..DenoiserConfig::default()
    };
    let shapes = a
        .shapes
        .iter()
        .map(|s| parse_shape(s))
        .collect::<CliResult<Vec<_>>>()?;
    let rows = costmodel::bench(&cfg, &shapes, a.warmup, a.repeats, a.seed)?;
    fs::create_dir_all(&a.out)?;
    let mut csv = String::from("kind,t,h,w,c,seq_len,median_ms\n");
    for r in &rows {
        let s = r.shape;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{:.3}\n",
            r.kind.name(),
            s.t,
            s.h,
            s.w,
            s.c,
            r.seq_len,
            r.median_ms
        ));
    }
    fs::write(a.out.join("bench.csv"), &csv)?;
    fs::write(a.out.join("bench.svg"), bench_svg(&rows))?;
    print!("{csv}");
    for pair in rows.chunks(2) {
        if let [fp, vol] = pair {
            println!(
                "four_plane/volumetric at {}x{}x{}: {:.3}",
                fp.shape.t,
                fp.shape.h,
                fp.shape.w,
                fp.median_ms / vol.median_ms
            );
        }
    }
    Ok(())
}

fn bench_svg(rows: &[costmodel::BenchRow]) -> String {
    let (bar, gap, height) = (40.0, 20.0, 200.0);
    let max = rows.iter().map(|r| r.median_ms).fold(1e-9, f64::max);
    let width = rows.len() as f64 * (bar + gap) + gap;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{}\" font-family=\"sans-serif\" font-size=\"10\">\n",
        height + 40.0
    );
    for (i, r) in rows.iter().enumerate() {
        let h = height * r.median_ms / max;
        let x = gap + i as f64 * (bar + gap);
        let fill = if r.kind == RepresentationKind::FourPlane {
            "#4a7ebb"
        } else {
            "#c0504d"
        };
        svg.push_str(&format!(
            "  <rect x=\"{x}\" y=\"{:.2}\" width=\"{bar}\" height=\"{h:.2}\" fill=\"{fill}\"><title>{} {:.3} ms</title></rect>\n",
            height - h + 10.0,
            r.kind.name(),
            r.median_ms
        ));
        svg.push_str(&format!(
            "  <text x=\"{x}\" y=\"{}\">{} n={}</text>\n",
            height + 25.0,
            r.kind.name(),
            r.seq_len
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Codec checkpoint that belongs to a run directory.
pub fn run_codec_path(dir: &Path, cfg: &RunConfig) -> Option<PathBuf> {
    match cfg.task {
        RunTask::Codec => Some(dir.join(CODEC_CKPT)),
        _ => cfg.codec_checkpoint.clone(),
    }
}

pub fn read_metrics(path: &Path) -> CliResult<EvalMetrics> {
    let f = BufReader::new(File::open(path)?);
    serde_json::from_reader(f).map_err(|e| data(format!("{}: {e}", path.display())))
}
