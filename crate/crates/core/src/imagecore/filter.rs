use rayon::prelude::*;

use super::{FlowField, Image};
use crate::error::{invalid, Result};

/// Anti-alias blur applied before every 2x pyramid subsample.
pub const PYRAMID_SIGMA: f64 = 0.8;
const PYRAMID_RADIUS: usize = 3;

/// Sampled, normalized 1-D Gaussian of length `2 * radius + 1`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return invalid(format!("gaussian sigma must be positive, got {sigma}"));
    }
    if radius < 1 {
        return invalid("gaussian radius must be at least 1");
    }
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / sum).collect())
}

/// Convolves every channel with `kernel` horizontally, then vertically.
/// Borders replicate the edge pixel. Accumulation is in f64.
pub fn separable_convolve(img: &Image, kernel: &[f64]) -> Result<Image> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let wide: Vec<f64> = img.data().iter().map(|&v| v as f64).collect();
    let out = separable_convolve_f64(&wide, w, h, ch, kernel)?;
    Image::from_vec(w, h, ch, out.into_iter().map(|v| v as f32).collect())
}

/// f64 core of [`separable_convolve`] over a raw interleaved buffer.
pub(crate) fn separable_convolve_f64(
    data: &[f64],
    w: usize,
    h: usize,
    ch: usize,
    kernel: &[f64],
) -> Result<Vec<f64>> {
    if kernel.len().is_multiple_of(2) {
        return invalid(format!("kernel length {} is not odd", kernel.len()));
    }
    debug_assert_eq!(data.len(), w * h * ch);
    let r = (kernel.len() / 2) as isize;
    let stride = w * ch;

    let mut tmp = vec![0f64; w * h * ch];
    tmp.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
        let src = &data[y * stride..(y + 1) * stride];
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f64;
                for (k, &wt) in kernel.iter().enumerate() {
                    let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[sx * ch + c];
                }
                row[x * ch + c] = acc;
            }
        }
    });

    let mut out = vec![0f64; w * h * ch];
    out.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f64;
                for (k, &wt) in kernel.iter().enumerate() {
                    let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    acc += wt * tmp[sy * stride + x * ch + c];
                }
                row[x * ch + c] = acc;
            }
        }
    });
    Ok(out)
}

/// Blur with sigma 0.8 and keep every second pixel; output dims are
/// `ceil(dim / 2)`.
pub fn downsample_half(img: &Image) -> Result<Image> {
    if img.width() < 2 || img.height() < 2 {
        return invalid(format!(
            "cannot downsample {}x{} image",
            img.width(),
            img.height()
        ));
    }
    let kernel = gaussian_kernel(PYRAMID_SIGMA, PYRAMID_RADIUS)?;
    let blurred = separable_convolve(img, &kernel)?;
    let (w, h) = (img.width().div_ceil(2), img.height().div_ceil(2));
    Image::from_fn(w, h, img.channels(), |x, y, c| blurred.get(2 * x, 2 * y, c))
}

/// Bilinear interpolation at a real-valued position, clamped to the
/// image domain.
#[inline]
pub(crate) fn sample_bilinear(img: &Image, x: f32, y: f32, c: usize) -> f32 {
    let xmax = (img.width() - 1) as f32;
    let ymax = (img.height() - 1) as f32;
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as usize, y0 as usize);
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let top = lerp(img.get(x0, y0, c), img.get(x1, y0, c), fx);
    let bottom = lerp(img.get(x0, y1, c), img.get(x1, y1, c), fx);
    lerp(top, bottom, fy)
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Resamples `img` at `(x + u, y + v)` for every pixel. Samples outside
/// the image clamp to the border.
pub fn warp_bilinear(img: &Image, flow: &FlowField) -> Result<Image> {
    if img.dims() != flow.dims() {
        return invalid(format!(
            "warp dims mismatch: image {:?}, flow {:?}",
            img.dims(),
            flow.dims()
        ));
    }
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let mut out = vec![0f32; w * h * ch];
    out.par_chunks_mut(w * ch).enumerate().for_each(|(y, row)| {
        for x in 0..w {
            let (u, v) = flow.get(x, y);
            let sx = x as f32 + u;
            let sy = y as f32 + v;
            for c in 0..ch {
                row[x * ch + c] = sample_bilinear(img, sx, sy, c);
            }
        }
    });
    Image::from_vec(w, h, ch, out)
}
