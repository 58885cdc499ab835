//! PNG strips and grids of clip frames.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use fourplane_core::codec::VideoClip;

use crate::error::{data, CliResult};

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Writes clips as rows of frames, left to right. Rows may differ in
/// frame count; missing cells stay black.
pub fn write_grid(path: &Path, rows: &[&VideoClip]) -> CliResult<()> {
    let Some(first) = rows.first() else {
        return Err(data("nothing to draw"));
    };
    let (_, h, w) = first.dims();
    if rows.iter().any(|c| (c.dims().1, c.dims().2) != (h, w)) {
        return Err(data("grid rows must share frame size"));
    }
    let cols = rows.iter().map(|c| c.dims().0).max().unwrap_or(1);
    let (width, height) = (cols * w, rows.len() * h);
    let mut pixels = vec![0u8; width * height * 3];
    for (r, clip) in rows.iter().enumerate() {
        let d = clip.frames.data();
        for f in 0..clip.dims().0 {
            for y in 0..h {
                for x in 0..w {
                    let src = ((f * h + y) * w + x) * 3;
                    let dst = ((r * h + y) * width + f * w + x) * 3;
                    for k in 0..3 {
                        pixels[dst + k] = to_u8(d[src + k]);
                    }
                }
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut enc = png::Encoder::new(
        BufWriter::new(File::create(path)?),
        width as u32,
        height as u32,
    );
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| data(format!("png: {e}")))?;
    writer
        .write_image_data(&pixels)
        .map_err(|e| data(format!("png: {e}")))?;
    writer.finish().map_err(|e| data(format!("png: {e}")))?;
    Ok(())
}
