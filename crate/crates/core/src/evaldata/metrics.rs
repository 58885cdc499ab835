//! PSNR and SSIM on clips with values in `[-1, 1]`.
//!
//! Both metrics first map values to `[0, 1]`, so the peak signal is 1.

use crate::error::{shape_err, Result};
use crate::tensor::NdTensor;

pub const PSNR_CAP_DB: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check_pair(a: &NdTensor, b: &NdTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err!(
            "metric inputs differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Mean squared error after mapping both inputs to `[0, 1]`.
pub fn mse_unit(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    check_pair(a, b)?;
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = 0.5 * (x as f64 - y as f64);
            d * d
        })
        .sum();
    Ok(s / a.len() as f64)
}

pub fn psnr(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    let mse = mse_unit(a, b)?;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Normalised 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter_valid(img: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let (ho, wo) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * img[y * w + x + i])
                .sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(y + i) * wo + x])
                .sum();
        }
    }
    (out, ho, wo)
}

/// Mean SSIM of two `h x w` planes with values in `[0, 1]`.
///
/// Frames smaller than the 11-pixel window use the largest odd window that
/// fits, with the same sigma.
pub fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let taps = gaussian_taps(size, SSIM_SIGMA);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
    let (mu_a, ho, wo) = filter_valid(a, h, w, &taps);
    let (mu_b, _, _) = filter_valid(b, h, w, &taps);
    let (aa, _, _) = filter_valid(&prod(a, a), h, w, &taps);
    let (bb, _, _) = filter_valid(&prod(b, b), h, w, &taps);
    let (ab, _, _) = filter_valid(&prod(a, b), h, w, &taps);
    let mut total = 0.0;
    for i in 0..ho * wo {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / (ho * wo) as f64
}

/// SSIM averaged over channels and frames of `[T, H, W, C]` clips.
pub fn ssim(a: &NdTensor, b: &NdTensor) -> Result<f64> {
    check_pair(a, b)?;
    if a.rank() != 4 {
        return Err(shape_err!("ssim expects [T,H,W,C], got {:?}", a.shape()));
    }
    let &[t, h, w, c] = a.shape() else {
        unreachable!()
    };
    let mut total = 0.0;
    let plane = |x: &NdTensor, f: usize, ch: usize| -> Vec<f64> {
        let d = x.data();
        (0..h * w)
            .map(|p| 0.5 * (d[(f * h * w + p) * c + ch] as f64 + 1.0))
            .collect()
    };
    for f in 0..t {
        for ch in 0..c {
            total += ssim_plane(&plane(a, f, ch), &plane(b, f, ch), h, w);
        }
    }
    Ok(total / (t * c) as f64)
}
