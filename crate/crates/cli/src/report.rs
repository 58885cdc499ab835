//! Markdown summary of a run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use fourplane_core::codec::{AutoEncoder, VideoClip};
use fourplane_core::costmodel::{seq_len, LatentShape, RepresentationKind};
use fourplane_core::evaldata::{ClipSource, Split};
use fourplane_core::pipelines::{Pipeline, TaskKind};

use crate::commands::{
    boundary_frames, context_of, load_codec, load_denoiser, open_dataset, read_metrics,
    run_codec_path,
};
use crate::config::{RunConfig, RunTask, CONFIG_FILE};
use crate::error::{data, CliResult};
use crate::image::write_grid;
use crate::rundir::*;

const SAMPLE_STEPS: usize = 20;

pub fn report(dir: &Path) -> CliResult<()> {
    if !dir.is_dir() {
        return Err(data(format!(
            "run directory {} does not exist",
            dir.display()
        )));
    }
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let mut md = String::new();
    writeln!(md, "# Run report\n").unwrap();
    writeln!(md, "| setting | value |\n|---|---|").unwrap();
    writeln!(
        md,
        "| task | {} |",
        serde_json::to_string(&cfg.task)?.trim_matches('"')
    )
    .unwrap();
    writeln!(md, "| seed | {} |", cfg.train.seed).unwrap();
    writeln!(md, "| steps | {} |", cfg.train.steps).unwrap();
    writeln!(md, "| batch size | {} |", cfg.train.batch_size).unwrap();
    writeln!(
        md,
        "| learning rate | {:e} |",
        cfg.train.optim.learning_rate
    )
    .unwrap();
    writeln!(md, "| warmup steps | {} |", cfg.train.optim.warmup_steps).unwrap();

    loss_section(&mut md, &dir.join(LOSS_FILE))?;

    let metrics = dir.join(METRICS_FILE);
    if metrics.is_file() {
        let m = read_metrics(&metrics)?;
        writeln!(
            md,
            "\n## Reconstruction ({:?} split, {} clips)\n",
            m.split, m.clips
        )
        .unwrap();
        writeln!(
            md,
            "PSNR: {:.6} dB\n\nSSIM: {:.6}\n\nMSE: {:.9}",
            m.psnr, m.ssim, m.mse
        )
        .unwrap();
    }

    let codec = match run_codec_path(dir, &cfg) {
        Some(p) if p.is_file() => Some(load_codec(&p)?),
        _ => None,
    };
    if let Some(codec) = &codec {
        seq_section(&mut md, codec)?;
        let samples = samples(dir, &cfg, codec)?;
        if !samples.is_empty() {
            writeln!(md, "\n## Samples\n").unwrap();
            for s in samples {
                writeln!(md, "![{s}]({SAMPLES_DIR}/{s})").unwrap();
            }
        }
    }

    fs::write(dir.join(REPORT_FILE), &md)?;
    print!("{md}");
    Ok(())
}

fn loss_section(md: &mut String, path: &Path) -> CliResult<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let rows: Vec<(u64, f64)> = text
        .lines()
        .skip(1)
        .filter_map(|l| {
            let mut it = l.split(',');
            Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
        })
        .collect();
    let (Some(first), Some(last)) = (rows.first(), rows.last()) else {
        return Ok(());
    };
    let best = rows.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    writeln!(md, "\n## Training loss\n").unwrap();
    writeln!(
        md,
        "{} logged rows; step {} loss {:.6e}, step {} loss {:.6e}, lowest {best:.6e}",
        rows.len(),
        first.0,
        first.1,
        last.0,
        last.1
    )
    .unwrap();
    Ok(())
}

fn seq_section(md: &mut String, codec: &AutoEncoder) -> CliResult<()> {
    let l = codec.plane_layout()?;
    let shape = LatentShape::new(l.t, l.h, l.w, l.c)?;
    writeln!(
        md,
        "\n## Sequence lengths for a {}x{}x{}x{} latent\n",
        l.t, l.h, l.w, l.c
    )
    .unwrap();
    writeln!(md, "| representation | tokens |\n|---|---|").unwrap();
    for kind in RepresentationKind::ALL {
        writeln!(md, "| {} | {} |", kind.name(), seq_len(shape, kind)).unwrap();
    }
    writeln!(md, "\n| task | conditioning | generated |\n|---|---|---|").unwrap();
    for task in TaskKind::ALL {
        let s = task.sequence_layout(&l)?;
        writeln!(
            md,
            "| {} | {} | {} |",
            serde_json::to_string(&task)?.trim_matches('"'),
            s.cond_len(),
            s.target_len()
        )
        .unwrap();
    }
    Ok(())
}

/// Renders sample grids into `samples/` and returns their file names.
fn samples(dir: &Path, cfg: &RunConfig, codec: &AutoEncoder) -> CliResult<Vec<String>> {
    let Some(data_dir) = cfg.data.as_deref().filter(|d| d.is_dir()) else {
        return Ok(Vec::new());
    };
    let source = open_dataset(data_dir)?;
    let test = source.indices(Split::Test);
    let clips: Vec<VideoClip> = test
        .iter()
        .take(2)
        .map(|&i| Ok(VideoClip::new(source.clip(i)?)?))
        .collect::<CliResult<_>>()?;
    let Some(first) = clips.first() else {
        return Ok(Vec::new());
    };
    let out = dir.join(SAMPLES_DIR);
    let name = match cfg.task {
        RunTask::Codec => {
            let recon = clips
                .iter()
                .map(|c| codec.reconstruct(c))
                .collect::<fourplane_core::Result<Vec<_>>>()?;
            let mut rows = Vec::new();
            for (c, r) in clips.iter().zip(&recon) {
                rows.push(c);
                rows.push(r);
            }
            write_grid(&out.join("reconstruction.png"), &rows)?;
            "reconstruction.png"
        }
        _ => {
            let path = dir.join(DENOISER_CKPT);
            if !path.is_file() {
                return Ok(Vec::new());
            }
            let (den, meta) = load_denoiser(&path)?;
            let schedule = meta.schedule.build()?;
            let p = Pipeline::new(codec, &den, &schedule, meta.task, SAMPLE_STEPS)?;
            let result = match meta.task {
                TaskKind::ClassConditional => p.generate_class_conditional(None, 0)?,
                TaskKind::ImageGeneration => p.generate_image(0)?,
                TaskKind::FramePrediction => p.predict_future(&context_of(codec, first)?, 0)?,
                TaskKind::Interpolation => {
                    let (a, b) = boundary_frames(first)?;
                    p.interpolate(&a, &b, 0)?
                }
            };
            write_grid(&out.join("generated.png"), &[first, &result.clip])?;
            "generated.png"
        }
    };
    Ok(vec![name.to_string()])
}
