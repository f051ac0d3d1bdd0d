//! RGBF assembly: channel concatenation, per-channel standardization and
//! per-pixel feature extraction for the segmenter.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::imagecore::Image;

/// Stacks the channels of `b` after those of `a`.
pub fn concat_channels(a: &Image, b: &Image) -> Result<Image> {
    if a.dims() != b.dims() {
        return invalid(format!(
            "cannot concatenate {:?} with {:?}",
            a.dims(),
            b.dims()
        ));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.data().len() + b.data().len());
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Image::from_vec(a.width(), a.height(), ca + cb, data)
}

/// RGB followed by a 1-, 2- or 3-channel flow encoding.
pub fn concat_rgbf(rgb: &Image, flowmap: &Image) -> Result<Image> {
    if rgb.channels() != 3 {
        return invalid(format!("RGB input has {} channels", rgb.channels()));
    }
    if !(1..=3).contains(&flowmap.channels()) {
        return invalid(format!("flow map has {} channels", flowmap.channels()));
    }
    concat_channels(rgb, flowmap)
}

/// Splits an image into its first `at` channels and the rest.
pub fn split_channels(img: &Image, at: usize) -> Result<(Image, Image)> {
    let c = img.channels();
    if at == 0 || at >= c {
        return invalid(format!("cannot split {c} channels at {at}"));
    }
    let mut left = Vec::with_capacity(img.width() * img.height() * at);
    let mut right = Vec::with_capacity(img.width() * img.height() * (c - at));
    for px in img.data().chunks_exact(c) {
        left.extend_from_slice(&px[..at]);
        right.extend_from_slice(&px[at..]);
    }
    Ok((
        Image::from_vec(img.width(), img.height(), at, left)?,
        Image::from_vec(img.width(), img.height(), c - at, right)?,
    ))
}

/// Per-channel mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Mean 0 and unit deviation for every channel.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Statistics over every pixel of every image. Zero deviations are
/// replaced by 1.
pub fn compute_stats(images: &[Image]) -> Result<ChannelStats> {
    let Some(first) = images.first() else {
        return invalid("cannot compute statistics of an empty collection");
    };
    let c = first.channels();
    if images.iter().any(|img| img.channels() != c) {
        return invalid("images disagree on channel count");
    }
    let mut sum = vec![0f64; c];
    let mut n = 0usize;
    for img in images {
        for px in img.data().chunks_exact(c) {
            for (s, &v) in sum.iter_mut().zip(px) {
                *s += v as f64;
            }
        }
        n += img.width() * img.height();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let mut sq = vec![0f64; c];
    for img in images {
        for px in img.data().chunks_exact(c) {
            for ((s, &v), m) in sq.iter_mut().zip(px).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
    }
    let std = sq
        .iter()
        .map(|s| {
            let sd = (s / n as f64).sqrt();
            if sd > 0.0 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok(ChannelStats { mean, std })
}

/// `(x - mean_c) / std_c` per channel.
pub fn standardize(img: &Image, stats: &ChannelStats) -> Result<Image> {
    let c = img.channels();
    if stats.channels() != c {
        return invalid(format!(
            "stats have {} channels, image has {c}",
            stats.channels()
        ));
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = ((*v as f64 - stats.mean[k]) / stats.std[k]) as f32;
        }
    }
    Ok(out)
}

pub fn destandardize(img: &Image, stats: &ChannelStats) -> Result<Image> {
    let c = img.channels();
    if stats.channels() != c {
        return invalid(format!(
            "stats have {} channels, image has {c}",
            stats.channels()
        ));
    }
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (k, v) in px.iter_mut().enumerate() {
            *v = (*v as f64 * stats.std[k] + stats.mean[k]) as f32;
        }
    }
    Ok(out)
}

/// How a pixel's feature vector is gathered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    /// Half-width of the square window.
    pub radius: usize,
    /// Append `(x / W, y / H)`.
    pub position: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            radius: 1,
            position: true,
        }
    }
}

impl FeatureConfig {
    pub fn len(&self, channels: usize) -> usize {
        let side = 2 * self.radius + 1;
        channels * side * side + if self.position { 2 } else { 0 }
    }
}

/// Feature vector of the window centred on `(x, y)`: rows top to bottom,
/// pixels left to right, channels innermost, border replicated.
pub fn extract_features(img: &Image, x: usize, y: usize, cfg: &FeatureConfig) -> Result<Vec<f32>> {
    let mut out = vec![0f32; cfg.len(img.channels())];
    extract_features_into(img, x, y, cfg, &mut out)?;
    Ok(out)
}

/// Like [`extract_features`] but writes into a caller buffer of exactly
/// `cfg.len(channels)` entries.
pub fn extract_features_into(
    img: &Image,
    x: usize,
    y: usize,
    cfg: &FeatureConfig,
    out: &mut [f32],
) -> Result<()> {
    let (w, h) = img.dims();
    if x >= w || y >= h {
        return invalid(format!("pixel ({x},{y}) outside {w}x{h}"));
    }
    let c = img.channels();
    if out.len() != cfg.len(c) {
        return invalid(format!(
            "feature buffer has {} entries, expected {}",
            out.len(),
            cfg.len(c)
        ));
    }
    let r = cfg.radius as isize;
    let mut k = 0;
    for dy in -r..=r {
        let sy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
        let row = img.row(sy);
        for dx in -r..=r {
            let sx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
            out[k..k + c].copy_from_slice(&row[sx * c..(sx + 1) * c]);
            k += c;
        }
    }
    if cfg.position {
        out[k] = x as f32 / w as f32;
        out[k + 1] = y as f32 / h as f32;
    }
    Ok(())
}
